//! View-pair generation for training and fixed distortion suites for
//! robustness evaluation.
//!
//! Pipeline order for training views:
//! crop → flip → jitter → grayscale → (blur) → (rotation) → (elastic).
//! Every output is a pure function of the input image, the strategy and the
//! [`RngStream`]; scheduling across threads does not affect results.

mod image;
mod rng;
pub mod transforms;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use self::image::{Image, MIN_SIDE as MIN_IMAGE_SIDE};
pub use self::rng::{RngStream, Substream};
use self::transforms::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyName {
    #[serde(rename = "BAug")]
    BAug,
    #[serde(rename = "CAug")]
    CAug,
    #[serde(rename = "CAugPlus")]
    CAugPlus,
}

/// Transform distribution used to draw training views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "StrategySpec", into = "StrategySpec")]
pub struct AugStrategy {
    pub name: StrategyName,
    /// Side length of the square views.
    pub output_size: usize,
    /// `None` skips cropping; the image is only resized to `output_size`.
    pub crop: Option<CropParams>,
    pub flip_p: f64,
    pub jitter: JitterParams,
    pub grayscale_p: f64,
    pub use_blur: bool,
    pub blur: BlurParams,
    pub rotation: Option<RotationParams>,
    pub elastic: Option<ElasticParams>,
}

/// Serialized form of [`AugStrategy`]: fields left out take the values of
/// the preset named by `name` (CAug at 32 pixels when unnamed).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct StrategySpec {
    name: Option<StrategyName>,
    output_size: Option<usize>,
    crop: Option<CropParams>,
    flip_p: Option<f64>,
    jitter: Option<JitterParams>,
    grayscale_p: Option<f64>,
    use_blur: Option<bool>,
    blur: Option<BlurParams>,
    rotation: Option<RotationParams>,
    elastic: Option<ElasticParams>,
}

impl From<StrategySpec> for AugStrategy {
    fn from(s: StrategySpec) -> Self {
        let mut a = AugStrategy::named(s.name.unwrap_or(StrategyName::CAug), s.output_size.unwrap_or(32));
        if s.crop.is_some() {
            a.crop = s.crop;
        }
        if s.rotation.is_some() {
            a.rotation = s.rotation;
        }
        if s.elastic.is_some() {
            a.elastic = s.elastic;
        }
        a.flip_p = s.flip_p.unwrap_or(a.flip_p);
        a.jitter = s.jitter.unwrap_or(a.jitter);
        a.grayscale_p = s.grayscale_p.unwrap_or(a.grayscale_p);
        a.use_blur = s.use_blur.unwrap_or(a.use_blur);
        a.blur = s.blur.unwrap_or(a.blur);
        a
    }
}

impl From<AugStrategy> for StrategySpec {
    fn from(a: AugStrategy) -> Self {
        Self {
            name: Some(a.name),
            output_size: Some(a.output_size),
            crop: a.crop,
            flip_p: Some(a.flip_p),
            jitter: Some(a.jitter),
            grayscale_p: Some(a.grayscale_p),
            use_blur: Some(a.use_blur),
            blur: Some(a.blur),
            rotation: a.rotation,
            elastic: a.elastic,
        }
    }
}

impl AugStrategy {
    pub fn baug(output_size: usize) -> Self {
        Self {
            name: StrategyName::BAug,
            output_size,
            crop: Some(CropParams::default()),
            flip_p: 0.5,
            jitter: JitterParams::default(),
            grayscale_p: 0.2,
            use_blur: false,
            blur: BlurParams::default(),
            rotation: None,
            elastic: None,
        }
    }

    pub fn caug(output_size: usize) -> Self {
        Self {
            name: StrategyName::CAug,
            rotation: Some(RotationParams::default()),
            ..Self::baug(output_size)
        }
    }

    pub fn caug_plus(output_size: usize) -> Self {
        Self {
            name: StrategyName::CAugPlus,
            elastic: Some(ElasticParams::default()),
            ..Self::caug(output_size)
        }
    }

    pub fn named(name: StrategyName, output_size: usize) -> Self {
        match name {
            StrategyName::BAug => Self::baug(output_size),
            StrategyName::CAug => Self::caug(output_size),
            StrategyName::CAugPlus => Self::caug_plus(output_size),
        }
    }

    /// A strategy that leaves images untouched (apart from resizing).
    pub fn identity(output_size: usize) -> Self {
        Self {
            crop: None,
            flip_p: 0.0,
            jitter: JitterParams {
                p: 0.0,
                ..Default::default()
            },
            grayscale_p: 0.0,
            ..Self::baug(output_size)
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let prob = |name: &str, p: f64, problems: &mut Vec<String>| {
            if !(0.0..=1.0).contains(&p) {
                problems.push(format!("augmentation.{name} must be a probability, got {p}"));
            }
        };
        if self.output_size < image::MIN_SIDE {
            problems.push(format!(
                "augmentation.output_size must be at least {}, got {}",
                image::MIN_SIDE,
                self.output_size
            ));
        }
        prob("flip_p", self.flip_p, &mut problems);
        prob("grayscale_p", self.grayscale_p, &mut problems);
        prob("jitter.p", self.jitter.p, &mut problems);
        prob("blur.p", self.blur.p, &mut problems);
        if let Some(c) = &self.crop {
            if !(c.scale.0 > 0.0 && c.scale.0 <= c.scale.1) || !(c.ratio.0 > 0.0 && c.ratio.0 <= c.ratio.1) {
                problems.push("augmentation.crop scale/ratio bounds must be positive and ordered".into());
            }
        }
        if !(self.blur.sigma.0 > 0.0 && self.blur.sigma.0 <= self.blur.sigma.1) {
            problems.push("augmentation.blur.sigma bounds must be positive and ordered".into());
        }
        if let Some(r) = &self.rotation {
            prob("rotation.p", r.p, &mut problems);
            if !(0.0..=180.0).contains(&r.max_degrees) {
                problems.push(format!("augmentation.rotation.max_degrees must lie in [0, 180], got {}", r.max_degrees));
            }
        }
        if let Some(e) = &self.elastic {
            prob("elastic.p", e.p, &mut problems);
            if !(e.alpha >= 0.0 && e.sigma > 0.0) {
                problems.push("augmentation.elastic needs alpha >= 0 and sigma > 0".into());
            }
        }
        match self.name {
            StrategyName::BAug if self.rotation.is_some() || self.elastic.is_some() => {
                problems.push("BAug must not enable rotation or elastic transforms".into())
            }
            StrategyName::CAug if self.rotation.is_none() || self.elastic.is_some() => {
                problems.push("CAug is BAug plus rotation (and no elastic transform)".into())
            }
            StrategyName::CAugPlus if self.rotation.is_none() || self.elastic.is_none() => {
                problems.push("CAugPlus is CAug plus the elastic transform".into())
            }
            _ => {}
        }
        problems
    }

    /// Draws one view of `x`.
    pub fn apply(&self, x: &Image, stream: RngStream) -> Image {
        let mut v = match &self.crop {
            Some(params) => {
                random_resized_crop(x, params, self.output_size, &mut stream.rng(Substream::Crop)).0
            }
            None => x.resize(self.output_size, self.output_size),
        };
        if stream.rng(Substream::Flip).random_bool(self.flip_p) {
            v = horizontal_flip(&v);
        }
        if let Some(draw) = sample_jitter(&self.jitter, &mut stream.rng(Substream::Jitter)) {
            v = apply_jitter(&v, &draw);
        }
        if stream.rng(Substream::Grayscale).random_bool(self.grayscale_p) {
            v = grayscale(&v);
        }
        if self.use_blur {
            let mut rng = stream.rng(Substream::Blur);
            if rng.random_bool(self.blur.p) {
                let sigma = rng.random_range(self.blur.sigma.0..=self.blur.sigma.1);
                v = gaussian_blur(&v, sigma);
            }
        }
        if let Some(params) = &self.rotation {
            if let Some(deg) = sample_rotation(params, &mut stream.rng(Substream::Rotation)) {
                v = rotate(&v, deg);
            }
        }
        if let Some(params) = &self.elastic {
            let mut rng = stream.rng(Substream::Elastic);
            if rng.random_bool(params.p) {
                v = elastic_transform(&v, params.alpha, params.sigma, &mut rng).0;
            }
        }
        v
    }
}

/// Two independent draws of a strategy for one source image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub first: Image,
    pub second: Image,
    /// Stream of the first view; the second uses the same stream with
    /// `view + 1`.
    pub stream: RngStream,
}

pub fn make_view_pair(x: &Image, strategy: &AugStrategy, stream: RngStream) -> ViewPair {
    let first = strategy.apply(x, stream);
    let second = strategy.apply(x, stream.with_view(stream.view + 1));
    ViewPair { first, second, stream }
}

/// [`make_view_pair`] over many images on the current rayon pool; output
/// order follows input order.
pub fn make_view_pairs(images: &[&Image], strategy: &AugStrategy, streams: &[RngStream]) -> Vec<ViewPair> {
    assert_eq!(images.len(), streams.len());
    images
        .par_iter()
        .zip(streams.par_iter())
        .map(|(x, s)| make_view_pair(x, strategy, *s))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SuiteKind {
    Identity,
    #[serde(rename = "CJ")]
    Cj,
    #[serde(rename = "CJ_Flip")]
    CjFlip,
    #[serde(rename = "CJ_90")]
    Cj90,
    #[serde(rename = "CJ_90_ET")]
    Cj90Et,
}

impl SuiteKind {
    /// The four distortion columns of the robustness table.
    pub const DISTORTED: [SuiteKind; 4] = [SuiteKind::Cj, SuiteKind::CjFlip, SuiteKind::Cj90, SuiteKind::Cj90Et];

    pub fn label(&self) -> &'static str {
        match self {
            SuiteKind::Identity => "Identity",
            SuiteKind::Cj => "CJ",
            SuiteKind::CjFlip => "CJ+Flip",
            SuiteKind::Cj90 => "CJ+90°",
            SuiteKind::Cj90Et => "CJ+90°+ET",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Some(SuiteKind::Identity),
            "cj" => Some(SuiteKind::Cj),
            "cj_flip" | "cj+flip" => Some(SuiteKind::CjFlip),
            "cj_90" | "cj+90" | "cj+90°" => Some(SuiteKind::Cj90),
            "cj_90_et" | "cj+90+et" | "cj+90°+et" => Some(SuiteKind::Cj90Et),
            _ => None,
        }
    }
}

/// Parameters of the inference-time distortions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteParams {
    pub jitter: JitterParams,
    pub flip_p: f64,
    pub rotation: RotationParams,
    pub elastic: ElasticParams,
}

impl Default for SuiteParams {
    fn default() -> Self {
        Self {
            jitter: JitterParams {
                p: 1.0,
                ..Default::default()
            },
            flip_p: 0.5,
            rotation: RotationParams::default(),
            elastic: ElasticParams::default(),
        }
    }
}

/// A fixed distortion suite: per-sample parameters depend only on
/// `seed_base` and the sample's instance id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionSuite {
    pub kind: SuiteKind,
    pub seed_base: u64,
    pub params: SuiteParams,
}

impl DistortionSuite {
    pub fn new(kind: SuiteKind, seed_base: u64) -> Self {
        Self {
            kind,
            seed_base,
            params: SuiteParams::default(),
        }
    }

    pub fn identity() -> Self {
        Self::new(SuiteKind::Identity, 0)
    }

    pub fn stream_for(&self, instance: u64) -> RngStream {
        RngStream::new(self.seed_base ^ (self.kind as u64).wrapping_mul(0x9E37_79B9), instance, 0, 0)
    }
}

/// Record of the parameters one suite application drew.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteAudit {
    pub jitter: Option<JitterDraw>,
    pub flipped: Option<bool>,
    pub rotation_degrees: Option<f64>,
    /// Sum of dx and dy of the elastic field.
    pub elastic_checksum: Option<(f64, f64)>,
}

/// Applies the suite's transforms in order CJ → flip → rotation → elastic.
pub fn apply_suite(x: &Image, suite: &DistortionSuite, stream: RngStream) -> (Image, SuiteAudit) {
    let mut audit = SuiteAudit::default();
    if suite.kind == SuiteKind::Identity {
        return (x.clone(), audit);
    }
    let p = &suite.params;
    let mut v = x.clone();
    if let Some(draw) = sample_jitter(&p.jitter, &mut stream.rng(Substream::Jitter)) {
        v = apply_jitter(&v, &draw);
        audit.jitter = Some(draw);
    }
    if suite.kind == SuiteKind::CjFlip {
        let flip = stream.rng(Substream::Flip).random_bool(p.flip_p.clamp(0.0, 1.0));
        if flip {
            v = horizontal_flip(&v);
        }
        audit.flipped = Some(flip);
    }
    if matches!(suite.kind, SuiteKind::Cj90 | SuiteKind::Cj90Et) {
        let rot = RotationParams { p: 1.0, ..p.rotation };
        let deg = sample_rotation(&rot, &mut stream.rng(Substream::Rotation)).unwrap_or(0.0);
        v = rotate(&v, deg);
        audit.rotation_degrees = Some(deg);
    }
    if suite.kind == SuiteKind::Cj90Et {
        let (out, field) = elastic_transform(&v, p.elastic.alpha, p.elastic.sigma, &mut stream.rng(Substream::Elastic));
        v = out;
        audit.elastic_checksum = Some((
            field.dx.iter().map(|&d| d as f64).sum(),
            field.dy.iter().map(|&d| d as f64).sum(),
        ));
    }
    (v, audit)
}

/// Hex SHA-256 over a sequence of audits; equal digests mean identical
/// per-sample distortions.
pub fn audit_digest<'a>(audits: impl IntoIterator<Item = &'a SuiteAudit>) -> String {
    let mut hasher = Sha256::new();
    for a in audits {
        hasher.update(serde_json::to_vec(a).expect("audit serializes"));
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}
