//! Dataset loading, seeded stratified splits and a procedural shapes set.
//!
//! Two on-disk layouts are understood:
//!
//! * `image-directory`: one sub-folder per class, named after the class,
//!   holding `.png` / `.ppm` files.  Classes and files are enumerated in
//!   byte order of their names; other files are ignored.
//! * `cifar-binary`: the public CIFAR-10 layout, 3073-byte records of one
//!   label byte followed by the 1024 red, 1024 green and 1024 blue bytes of
//!   a 32×32 image.  `path` is a single `.bin` file or a directory whose
//!   `.bin` files are read in name order.  Class names come from a sibling
//!   `batches.meta.txt` when present.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    ImageDirectory,
    CifarBinary,
}

impl DatasetFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "image-directory" => Some(Self::ImageDirectory),
            "cifar-binary" => Some(Self::CifarBinary),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub image: Image,
    pub label: usize,
    pub instance_id: u64,
}

/// Labeled images ordered by `instance_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub split: Split,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.label).collect()
    }

    pub fn images(&self) -> Vec<&Image> {
        self.items.iter().map(|it| &it.image).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for it in &self.items {
            counts[it.label] += 1;
        }
        counts
    }

    /// Checks the structural invariants: known labels and strictly
    /// increasing instance ids.
    pub fn validate(&self) -> Result<()> {
        for (i, it) in self.items.iter().enumerate() {
            if it.label >= self.num_classes() {
                return Err(Error::Dataset(format!(
                    "item {} has label {} but there are {} classes",
                    it.instance_id,
                    it.label,
                    self.num_classes()
                )));
            }
            if i > 0 && self.items[i - 1].instance_id >= it.instance_id {
                return Err(Error::Dataset(format!(
                    "instance ids must be unique and increasing, {} follows {}",
                    it.instance_id,
                    self.items[i - 1].instance_id
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over labels, ids and pixel bytes.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for name in &self.class_names {
            h.update(name.as_bytes());
            h.update([0]);
        }
        for it in &self.items {
            h.update(it.instance_id.to_le_bytes());
            h.update((it.label as u64).to_le_bytes());
            h.update((it.image.height() as u64).to_le_bytes());
            h.update((it.image.width() as u64).to_le_bytes());
            h.update((it.image.channels() as u64).to_le_bytes());
            h.update(it.image.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes the dataset in the image-directory layout as 8-bit PNGs.
    /// Files are named by instance id so reloading preserves the order.
    pub fn save_image_directory(&self, root: &Path) -> Result<()> {
        for name in &self.class_names {
            let dir = root.join(name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for it in &self.items {
            let path = root
                .join(&self.class_names[it.label])
                .join(format!("{:08}.png", it.instance_id));
            let bytes: Vec<u8> = it.image.data().iter().map(|v| (v * 255.0).round() as u8).collect();
            let color = if it.image.channels() == 3 {
                image::ExtendedColorType::Rgb8
            } else {
                image::ExtendedColorType::L8
            };
            image::save_buffer(&path, &bytes, it.image.width() as u32, it.image.height() as u32, color)?;
        }
        Ok(())
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    let ds = match format {
        DatasetFormat::ImageDirectory => load_image_directory(path)?,
        DatasetFormat::CifarBinary => load_cifar(path)?,
    };
    ds.validate()?;
    Ok(ds)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn has_extension(path: &Path, exts: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

fn load_image_directory(root: &Path) -> Result<Dataset> {
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(Error::Dataset(format!("{} has no class sub-folders", root.display())));
    }
    let mut items = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.is_file() && has_extension(p, &["png", "ppm"]))
            .collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class '{name}' has no PNG/PPM images")));
        }
        for file in files {
            let rgb = image::open(&file)
                .map_err(|e| Error::Dataset(format!("cannot decode {}: {e}", file.display())))?
                .to_rgb32f();
            let (w, h) = rgb.dimensions();
            let data = rgb.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
            let image = Image::new(h as usize, w as usize, 3, data)
                .map_err(|e| Error::Dataset(format!("{}: {e}", file.display())))?;
            items.push(Item {
                image,
                label,
                instance_id: items.len() as u64,
            });
        }
        class_names.push(name);
    }
    Ok(Dataset {
        items,
        split: Split::All,
        class_names,
    })
}

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_CLASSES: usize = 10;

/// Decodes CIFAR-10 binary records.  `origin` is reported in errors.
pub fn decode_cifar_records(bytes: &[u8], origin: &Path, first_id: u64) -> Result<Vec<Item>> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut items = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (r, record) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let offset = (r * CIFAR_RECORD) as u64;
        if record.len() != CIFAR_RECORD {
            return Err(Error::Malformed {
                path: origin.to_path_buf(),
                offset,
                reason: format!("truncated record: {} of {CIFAR_RECORD} bytes", record.len()),
            });
        }
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Malformed {
                path: origin.to_path_buf(),
                offset,
                reason: format!("label byte {label} is not a CIFAR-10 class"),
            });
        }
        let pixels = &record[1..];
        let mut data = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                data.push(pixels[c * plane + p] as f32 / 255.0);
            }
        }
        items.push(Item {
            image: Image::new(CIFAR_SIDE, CIFAR_SIDE, 3, data)?,
            label,
            instance_id: first_id + r as u64,
        });
    }
    Ok(items)
}

fn load_cifar(path: &Path) -> Result<Dataset> {
    let (files, meta_dir) = if path.is_dir() {
        let files: Vec<PathBuf> = sorted_entries(path)?
            .into_iter()
            .filter(|p| p.is_file() && has_extension(p, &["bin"]))
            .collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("{} has no .bin files", path.display())));
        }
        (files, path.to_path_buf())
    } else {
        (vec![path.to_path_buf()], path.parent().unwrap_or(Path::new(".")).to_path_buf())
    };
    let mut items = Vec::new();
    for file in &files {
        let bytes = fs::read(file).map_err(|e| Error::io(file, e))?;
        items.extend(decode_cifar_records(&bytes, file, items.len() as u64)?);
    }
    let meta = meta_dir.join("batches.meta.txt");
    let class_names = match fs::read_to_string(&meta) {
        Ok(text) => {
            let names: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            if names.len() != CIFAR_CLASSES {
                return Err(Error::Dataset(format!(
                    "{} lists {} class names, expected {CIFAR_CLASSES}",
                    meta.display(),
                    names.len()
                )));
            }
            names
        }
        Err(_) => (0..CIFAR_CLASSES).map(|c| c.to_string()).collect(),
    };
    Ok(Dataset {
        items,
        split: Split::All,
        class_names,
    })
}

/// Seeded stratified split.  The train share is allotted across classes by
/// largest remainder, so each class is within one item of its exact
/// proportion and the total is `round(fraction · N)` whenever every class
/// keeps at least one item on each side.
pub fn split_dataset(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, it) in ds.items.iter().enumerate() {
        by_class[it.label].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < 2 {
            return Err(Error::Dataset(format!(
                "class '{}' has {} item(s); a split needs at least 2",
                ds.class_names[c],
                members.len()
            )));
        }
    }

    let exact: Vec<f64> = by_class.iter().map(|m| m.len() as f64 * train_fraction).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let target = (ds.len() as f64 * train_fraction).round() as usize;
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut assigned: usize = quota.iter().sum();
    for &c in order.iter().cycle().take(quota.len()) {
        if assigned >= target {
            break;
        }
        quota[c] += 1;
        assigned += 1;
    }
    for (q, m) in quota.iter_mut().zip(&by_class) {
        *q = (*q).clamp(1, m.len() - 1);
    }

    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (c, members) in by_class.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        train_idx.extend_from_slice(&shuffled[..quota[c]]);
        test_idx.extend_from_slice(&shuffled[quota[c]..]);
    }
    let take = |mut idx: Vec<usize>, split| {
        idx.sort_unstable();
        Dataset {
            items: idx.into_iter().map(|i| ds.items[i].clone()).collect(),
            split,
            class_names: ds.class_names.clone(),
        }
    };
    Ok((take(train_idx, Split::Train), take(test_idx, Split::Test)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Disk, Self::Square, Self::Triangle, Self::Cross];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Disk => "disk",
            Self::Square => "square",
            Self::Triangle => "triangle",
            Self::Cross => "cross",
        }
    }

    /// Coverage test in shape-local coordinates scaled to the unit radius.
    /// Every shape fits in the square `[-1, 1]²`.
    fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            Self::Disk => u * u + v * v <= 1.0,
            Self::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            // Upright: apex at the top, base at v = 0.6.
            Self::Triangle => v <= 0.6 && v >= -1.0 && u.abs() <= 0.92 * (v + 1.0) / 1.6,
            // Unequal arms so that a quarter turn changes the silhouette.
            Self::Cross => (u.abs() <= 0.28 && v.abs() <= 1.0) || (v.abs() <= 0.28 && u.abs() <= 0.65 && v >= -0.28),
        }
    }
}

/// Procedural shapes on a plain background.  Shapes are drawn upright so
/// rotations alter their appearance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub classes: Vec<ShapeKind>,
    /// Side length of the square images.
    pub size: usize,
    /// Range of the shape radius as a fraction of `size`.
    pub radius: (f64, f64),
    /// Fraction of the free margin the centre may wander over, in `[0, 1]`.
    pub position_jitter: f64,
    /// Per-channel intensity range of the shape colour.
    pub foreground: (f32, f32),
    /// Per-channel intensity range of the background colour.
    pub background: (f32, f32),
    /// Standard deviation of the additive pixel noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_per_class: 200,
            classes: ShapeKind::ALL.to_vec(),
            size: 64,
            radius: (0.2, 0.35),
            position_jitter: 1.0,
            foreground: (0.8, 1.0),
            background: (0.0, 0.2),
            noise: 0.02,
            seed: 0,
        }
    }
}

/// Supersampling factor per axis for anti-aliased edges.
const SUPERSAMPLE: usize = 4;

impl SynthSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.classes.is_empty() {
            problems.push("synth.classes must name at least one shape".into());
        }
        for (i, a) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(a) {
                problems.push(format!("synth.classes lists '{}' twice", a.name()));
            }
        }
        if self.size < crate::augmentation::MIN_IMAGE_SIDE {
            problems.push(format!(
                "synth.size must be at least {}, got {}",
                crate::augmentation::MIN_IMAGE_SIDE,
                self.size
            ));
        }
        let (lo, hi) = self.radius;
        if !(lo > 0.0 && lo <= hi) {
            problems.push(format!("synth.radius must satisfy 0 < min <= max, got ({lo}, {hi})"));
        } else if 2.0 * hi * self.size as f64 + 2.0 > self.size as f64 {
            problems.push(format!(
                "synth.radius max {hi} makes the shape larger than the {0}x{0} frame",
                self.size
            ));
        }
        if !(0.0..=1.0).contains(&self.position_jitter) {
            problems.push(format!("synth.position_jitter must lie in [0, 1], got {}", self.position_jitter));
        }
        for (name, (a, b)) in [("foreground", self.foreground), ("background", self.background)] {
            if !(0.0 <= a && a <= b && b <= 1.0) {
                problems.push(format!("synth.{name} must satisfy 0 <= min <= max <= 1, got ({a}, {b})"));
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            problems.push(format!("synth.noise must be nonnegative, got {}", self.noise));
        }
        problems
    }

    fn render(&self, shape: ShapeKind, rng: &mut ChaCha8Rng) -> Image {
        let n = self.size;
        let size = n as f64;
        let r = rng.random_range(self.radius.0..=self.radius.1) * size;
        // Keep a one-pixel margin around the bounding square.
        let free = (size / 2.0 - r - 1.0).max(0.0) * self.position_jitter;
        let cx = size / 2.0 + rng.random_range(-1.0..=1.0) * free;
        let cy = size / 2.0 + rng.random_range(-1.0..=1.0) * free;
        let draw = |(lo, hi): (f32, f32), rng: &mut ChaCha8Rng| -> [f32; 3] {
            std::array::from_fn(|_| if lo < hi { rng.random_range(lo..=hi) } else { lo })
        };
        let fg = draw(self.foreground, rng);
        let bg = draw(self.background, rng);
        let noise = rand_distr::Normal::new(0.0f32, self.noise).unwrap();

        let mut data = Vec::with_capacity(n * n * 3);
        let step = 1.0 / SUPERSAMPLE as f64;
        for y in 0..n {
            for x in 0..n {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let py = y as f64 + (sy as f64 + 0.5) * step;
                        let px = x as f64 + (sx as f64 + 0.5) * step;
                        if shape.contains((px - cx) / r, (py - cy) / r) {
                            hits += 1;
                        }
                    }
                }
                let cover = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                for c in 0..3 {
                    let v = bg[c] + cover * (fg[c] - bg[c]) + rng.sample(noise);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        Image::from_raw(n, n, 3, data)
    }
}

/// Renders `n_per_class` images of every class, interleaving classes so
/// instance ids cycle through them.  Each image has its own random stream,
/// so the result does not depend on rendering order.
pub fn generate_synth(spec: &SynthSpec) -> Result<Dataset> {
    let problems = spec.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let k = spec.classes.len();
    let items = (0..spec.n_per_class * k)
        .map(|i| {
            let label = i % k;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            Item {
                image: spec.render(spec.classes[label], &mut rng),
                label,
                instance_id: i as u64,
            }
        })
        .collect();
    Ok(Dataset {
        items,
        split: Split::All,
        class_names: spec.classes.iter().map(|s| s.name().to_string()).collect(),
    })
}
