//! Grouping of the encoder output into invariant (DIR) and variant (DVR)
//! blocks, and recombination of blocks taken from different sources.
//!
//! The first `d_I = floor(DR * d)` components of a representation form the
//! DIR block, the remaining `d - d_I` form the DVR block.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of the DIR block for a `d`-dimensional representation.
///
/// Fails when the block would be empty or cover the whole representation.
pub fn dir_len(d: usize, dr: f64) -> Result<usize> {
    if !(dr > 0.0 && dr < 1.0) || d < 2 {
        return Err(Error::InvalidRatio { dr, d, d_i: 0 });
    }
    // The small nudge keeps products such as 0.6 * 5 from flooring to 2.
    let d_i = (dr * d as f64 + 1e-9).floor() as usize;
    if d_i == 0 || d_i >= d {
        return Err(Error::InvalidRatio { dr, d, d_i });
    }
    Ok(d_i)
}

/// A single representation vector together with its grouping.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation {
    values: Vec<f32>,
    dr: f64,
    d_i: usize,
}

impl Representation {
    pub fn new(values: Vec<f32>, dr: f64) -> Result<Self> {
        let d_i = dir_len(values.len(), dr)?;
        Ok(Self { values, dr, d_i })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn dr(&self) -> f64 {
        self.dr
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dir_dim(&self) -> usize {
        self.d_i
    }

    pub fn split(&self) -> (&[f32], &[f32]) {
        self.values.split_at(self.d_i)
    }

    pub fn dir(&self) -> &[f32] {
        self.split().0
    }

    pub fn dvr(&self) -> &[f32] {
        self.split().1
    }

    /// Joins a DIR and a DVR block.  The lengths must be the ones `dr`
    /// produces for their combined dimension.
    pub fn concat(dir: &[f32], dvr: &[f32], dr: f64) -> Result<Self> {
        let d = dir.len() + dvr.len();
        let d_i = dir_len(d, dr)?;
        if d_i != dir.len() {
            return Err(Error::shape(
                format!("DIR block of length {d_i} for d={d}, DR={dr}"),
                format!("length {}", dir.len()),
            ));
        }
        let mut values = Vec::with_capacity(d);
        values.extend_from_slice(dir);
        values.extend_from_slice(dvr);
        Ok(Self { values, dr, d_i })
    }
}

/// Column split of a batch of representations (`B×d`).
pub fn split_batch(y: ArrayView2<'_, f32>, dr: f64) -> Result<(ArrayView2<'_, f32>, ArrayView2<'_, f32>)> {
    let d_i = dir_len(y.ncols(), dr)?;
    Ok(y.split_at(Axis(1), d_i))
}

/// Inverse of [`split_batch`].
pub fn concat_batch(dir: ArrayView2<f32>, dvr: ArrayView2<f32>, dr: f64) -> Result<Array2<f32>> {
    if dir.nrows() != dvr.nrows() {
        return Err(Error::shape(dir.nrows(), dvr.nrows()));
    }
    let d = dir.ncols() + dvr.ncols();
    let d_i = dir_len(d, dr)?;
    if d_i != dir.ncols() {
        return Err(Error::shape(d_i, dir.ncols()));
    }
    Ok(concatenate(Axis(1), &[dir, dvr]).expect("row counts checked"))
}

/// Which block of the representation a feature bank or map refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Full,
    Dir,
    Dvr,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Full, Part::Dir, Part::Dvr];

    pub fn label(&self) -> &'static str {
        match self {
            Part::Full => "full",
            Part::Dir => "dir",
            Part::Dvr => "dvr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Some(Part::Full),
            "dir" => Some(Part::Dir),
            "dvr" => Some(Part::Dvr),
            _ => None,
        }
    }

    /// Column range of this part in a `d`-wide representation with `d_i`
    /// invariant columns.
    pub fn columns(&self, d: usize, d_i: usize) -> std::ops::Range<usize> {
        match self {
            Part::Full => 0..d,
            Part::Dir => 0..d_i,
            Part::Dvr => d_i..d,
        }
    }
}

impl std::fmt::Display for Part {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Names one stored representation: an instance seen under one view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReprRef {
    pub instance: u64,
    pub view: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DvrSource {
    Ref(ReprRef),
    Zero,
}

/// Recipe for one recombined representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrickSpec {
    pub dir_source: ReprRef,
    pub dvr_source: DvrSource,
}

const BANK_MAGIC: &[u8; 8] = b"DDCLREPR";
const BANK_VERSION: u32 = 1;

/// Store of representations keyed by (instance, view).
#[derive(Clone, Debug, PartialEq)]
pub struct ReprBank {
    d: usize,
    dr: f64,
    entries: BTreeMap<ReprRef, Vec<f32>>,
}

impl ReprBank {
    pub fn new(d: usize, dr: f64) -> Result<Self> {
        dir_len(d, dr)?;
        Ok(Self {
            d,
            dr,
            entries: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn dr(&self) -> f64 {
        self.dr
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, key: ReprRef, values: Vec<f32>) -> Result<()> {
        if values.len() != self.d {
            return Err(Error::shape(self.d, values.len()));
        }
        self.entries.insert(key, values);
        Ok(())
    }

    pub fn get(&self, key: ReprRef) -> Result<Representation> {
        let values = self.entries.get(&key).ok_or(Error::MissingRepresentation {
            instance: key.instance,
            view: key.view,
        })?;
        Representation::new(values.clone(), self.dr)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ReprRef, &Vec<f32>)> {
        self.entries.iter()
    }

    /// Little-endian layout: magic, version `u32`, count `u64`, d `u32`,
    /// DR `f64`, then `count` records of (instance `u64`, view `u32`,
    /// `d` × `f32`) in key order.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(BANK_MAGIC)?;
        w.write_all(&BANK_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        w.write_all(&(self.d as u32).to_le_bytes())?;
        w.write_all(&self.dr.to_le_bytes())?;
        for (key, values) in &self.entries {
            w.write_all(&key.instance.to_le_bytes())?;
            w.write_all(&key.view.to_le_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut cur = std::io::Cursor::new(bytes);
        let malformed = |offset: u64, reason: &str| Error::Malformed {
            path: origin.to_path_buf(),
            offset,
            reason: reason.to_string(),
        };
        fn take<const N: usize>(cur: &mut std::io::Cursor<&[u8]>) -> Option<[u8; N]> {
            let mut buf = [0u8; N];
            cur.read_exact(&mut buf).ok().map(|_| buf)
        }
        let magic: [u8; 8] = take(&mut cur).ok_or_else(|| malformed(0, "truncated header"))?;
        if &magic != BANK_MAGIC {
            return Err(malformed(0, "bad magic"));
        }
        let version = u32::from_le_bytes(take(&mut cur).ok_or_else(|| malformed(8, "truncated header"))?);
        if version != BANK_VERSION {
            return Err(malformed(8, &format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(take(&mut cur).ok_or_else(|| malformed(12, "truncated header"))?);
        let d = u32::from_le_bytes(take(&mut cur).ok_or_else(|| malformed(20, "truncated header"))?) as usize;
        let dr = f64::from_le_bytes(take(&mut cur).ok_or_else(|| malformed(24, "truncated header"))?);
        let mut bank = ReprBank::new(d, dr)?;
        for _ in 0..count {
            let at = cur.position();
            let truncated = || malformed(at, "truncated record");
            let instance = u64::from_le_bytes(take(&mut cur).ok_or_else(truncated)?);
            let view = u32::from_le_bytes(take(&mut cur).ok_or_else(truncated)?);
            let mut values = Vec::with_capacity(d);
            for _ in 0..d {
                values.push(f32::from_le_bytes(take(&mut cur).ok_or_else(truncated)?));
            }
            bank.entries.insert(ReprRef { instance, view }, values);
        }
        if cur.position() != bytes.len() as u64 {
            return Err(malformed(cur.position(), "trailing bytes"));
        }
        Ok(bank)
    }
}

/// DIR block of `spec.dir_source` joined with the DVR block of
/// `spec.dvr_source` (or zeros).
pub fn compose_brick(spec: &BrickSpec, bank: &ReprBank) -> Result<Representation> {
    let dir_rep = bank.get(spec.dir_source)?;
    let dvr = match spec.dvr_source {
        DvrSource::Ref(r) => bank.get(r)?.dvr().to_vec(),
        DvrSource::Zero => vec![0.0; dir_rep.dvr().len()],
    };
    Representation::concat(dir_rep.dir(), &dvr, bank.dr)
}
