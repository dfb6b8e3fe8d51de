use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Identifies the random draws for one (sample, view, epoch) under a run
/// seed.  Every transform gets its own sub-stream, so the parameters drawn
/// for one transform never depend on whether another transform ran.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub sample: u64,
    pub view: u32,
    pub epoch: u32,
}

/// Sub-stream tags, one per transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Substream {
    Crop = 1,
    Flip = 2,
    Jitter = 3,
    Grayscale = 4,
    Blur = 5,
    Rotation = 6,
    Elastic = 7,
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64, sample: u64, view: u32, epoch: u32) -> Self {
        Self {
            seed,
            sample,
            view,
            epoch,
        }
    }

    pub fn with_view(self, view: u32) -> Self {
        Self { view, ..self }
    }

    fn key(&self) -> u64 {
        let mut h = splitmix64(self.seed);
        h = splitmix64(h ^ self.sample);
        h = splitmix64(h ^ ((self.view as u64) << 32 | self.epoch as u64));
        h
    }

    pub fn rng(&self, sub: Substream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.key());
        rng.set_stream(sub as u64);
        rng
    }
}
