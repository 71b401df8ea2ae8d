//! Sequence data: digit glyphs, the Moving MNIST generator, and the on-disk
//! formats (IDX in, STF1 sequences, PGM frames out).

mod formats;
mod glyphs;
mod moving;

pub use formats::{
    montage, pgm_bytes, read_idx_images, read_stf1, read_stf1_dims, stf1_header, write_idx_images,
    write_pgm, write_stf1,
};
pub use glyphs::{synthetic_glyphs, DigitSource, GlyphOrigin, GLYPH_SIZE};
pub use moving::{generate_moving_mnist, reflect, sprite_trajectories, MovingMnistConfig, MovingSpriteState};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Derives an independent 64-bit seed for stream `index` of `seed`
/// (splitmix64 finalizer over the combined words).
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rank-5 `[S, T, C, H, W]` block of sequences, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequences {
    dims: [usize; 5],
    data: Vec<f32>,
}

impl Sequences {
    pub fn new(dims: [usize; 5], data: Vec<f32>) -> Result<Self> {
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Data(format!("dims {dims:?} overflow")))?;
        if dims.contains(&0) {
            return Err(Error::Data(format!("zero extent in dims {dims:?}")));
        }
        if n != data.len() {
            return Err(Error::Data(format!("dims {dims:?} need {n} values, got {}", data.len())));
        }
        Ok(Sequences { dims, data })
    }

    pub fn dims(&self) -> [usize; 5] {
        self.dims
    }

    pub fn count(&self) -> usize {
        self.dims[0]
    }

    pub fn frames(&self) -> usize {
        self.dims[1]
    }

    pub fn channels(&self) -> usize {
        self.dims[2]
    }

    pub fn height(&self) -> usize {
        self.dims[3]
    }

    pub fn width(&self) -> usize {
        self.dims[4]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn frame_len(&self) -> usize {
        self.dims[2] * self.dims[3] * self.dims[4]
    }

    /// One `C × H × W` frame.
    pub fn frame(&self, s: usize, t: usize) -> &[f32] {
        let len = self.frame_len();
        let start = (s * self.dims[1] + t) * len;
        &self.data[start..start + len]
    }

    /// Frame `t` of each listed sequence, stacked along the batch axis.
    pub fn batch_frame(&self, indices: &[usize], t: usize) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &s in indices {
            data.extend_from_slice(self.frame(s, t));
        }
        Tensor::from_vec([indices.len(), self.dims[2], self.dims[3], self.dims[4]], data)
            .expect("frame extents are validated at construction")
    }

    /// The sequences at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Sequences {
        let per = self.dims[1] * self.frame_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &s in indices {
            data.extend_from_slice(&self.data[s * per..(s + 1) * per]);
        }
        let mut dims = self.dims;
        dims[0] = indices.len();
        Sequences { dims, data }
    }
}

/// Sequences split into `m` observed and `n` forecast frames.
#[derive(Clone, Debug)]
pub struct SequenceDataset {
    pub sequences: Sequences,
    pub history: usize,
    pub horizon: usize,
}

impl SequenceDataset {
    pub fn new(sequences: Sequences, history: usize, horizon: usize) -> Result<Self> {
        if history == 0 || horizon == 0 {
            return Err(Error::Data("history and horizon must be positive".into()));
        }
        if sequences.frames() != history + horizon {
            return Err(Error::Data(format!(
                "sequences have {} frames, expected m + n = {}",
                sequences.frames(),
                history + horizon
            )));
        }
        if let Some(v) = sequences.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("value {v} outside [0, 1]")));
        }
        Ok(SequenceDataset {
            sequences,
            history,
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.count()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.count() == 0
    }

    /// All `m + n` frames of a minibatch as per-timestep tensors.
    pub fn batch(&self, indices: &[usize]) -> Vec<Tensor> {
        (0..self.sequences.frames())
            .map(|t| self.sequences.batch_frame(indices, t))
            .collect()
    }
}
