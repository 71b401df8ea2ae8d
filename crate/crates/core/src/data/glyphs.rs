use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const GLYPH_SIZE: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlyphOrigin {
    Idx,
    Synthetic,
}

/// A set of 28×28 grayscale glyphs with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DigitSource {
    glyphs: Vec<Vec<f32>>,
    pub origin: GlyphOrigin,
}

impl DigitSource {
    pub fn new(glyphs: Vec<Vec<f32>>, origin: GlyphOrigin) -> Result<Self> {
        if glyphs.is_empty() {
            return Err(Error::Data("digit source has no glyphs".into()));
        }
        for (i, g) in glyphs.iter().enumerate() {
            if g.len() != GLYPH_SIZE * GLYPH_SIZE {
                return Err(Error::Data(format!("glyph {i} is not 28×28")));
            }
            if g.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Data(format!("glyph {i} has values outside [0, 1]")));
            }
        }
        Ok(DigitSource { glyphs, origin })
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    pub fn glyph(&self, i: usize) -> &[f32] {
        &self.glyphs[i]
    }

    pub fn glyphs(&self) -> &[Vec<f32>] {
        &self.glyphs
    }
}

// Seven-segment layout on a unit box: (x0, y0, x1, y1).
const SEGMENTS: [(f32, f32, f32, f32); 7] = [
    (0.0, 0.0, 1.0, 0.0), // top
    (1.0, 0.0, 1.0, 0.5), // upper right
    (1.0, 0.5, 1.0, 1.0), // lower right
    (0.0, 1.0, 1.0, 1.0), // bottom
    (0.0, 0.5, 0.0, 1.0), // lower left
    (0.0, 0.0, 0.0, 0.5), // upper left
    (0.0, 0.5, 1.0, 0.5), // middle
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],
    &[1, 2],
    &[0, 1, 6, 4, 3],
    &[0, 1, 6, 2, 3],
    &[5, 6, 1, 2],
    &[0, 5, 6, 2, 3],
    &[0, 5, 4, 3, 2, 6],
    &[0, 1, 2],
    &[0, 1, 2, 3, 4, 5, 6],
    &[0, 1, 2, 3, 5, 6],
];

fn segment_distance(px: f32, py: f32, (x0, y0, x1, y1): (f32, f32, f32, f32)) -> f32 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x0 + t * dx, y0 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Ten digit-like glyphs drawn as thick, slightly slanted seven-segment
/// strokes with soft edges. Deterministic per seed.
pub fn synthetic_glyphs(seed: u64) -> DigitSource {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let glyphs = DIGIT_SEGMENTS
        .iter()
        .map(|segs| {
            let width = rng.random_range(10.0f32..14.0);
            let height = rng.random_range(17.0f32..20.0);
            let slant = rng.random_range(-0.15f32..0.15);
            let radius = rng.random_range(1.4f32..2.0);
            let left = (GLYPH_SIZE as f32 - width) / 2.0;
            let top = (GLYPH_SIZE as f32 - height) / 2.0;
            let strokes: Vec<_> = segs
                .iter()
                .map(|&s| {
                    let (x0, y0, x1, y1) = SEGMENTS[s];
                    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.04f32..0.04);
                    let map = |x: f32, y: f32| {
                        let yy = top + y * height;
                        (left + x * width + slant * (height / 2.0 - y * height), yy)
                    };
                    let (ax, ay) = map(x0 + jitter(&mut rng), y0 + jitter(&mut rng));
                    let (bx, by) = map(x1 + jitter(&mut rng), y1 + jitter(&mut rng));
                    (ax, ay, bx, by)
                })
                .collect();
            let mut g = vec![0.0f32; GLYPH_SIZE * GLYPH_SIZE];
            for y in 0..GLYPH_SIZE {
                for x in 0..GLYPH_SIZE {
                    let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                    let d = strokes
                        .iter()
                        .map(|&s| segment_distance(px, py, s))
                        .fold(f32::INFINITY, f32::min);
                    g[y * GLYPH_SIZE + x] = (radius + 0.5 - d).clamp(0.0, 1.0);
                }
            }
            g
        })
        .collect();
    DigitSource {
        glyphs,
        origin: GlyphOrigin::Synthetic,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = synthetic_glyphs(5);
        assert_eq!(a, synthetic_glyphs(5));
        assert_ne!(a, synthetic_glyphs(6));
        assert_eq!(a.len(), 10);
        for g in a.glyphs() {
            assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(g.iter().filter(|&&v| v > 0.0).count() >= 50);
        }
    }

    #[test]
    fn strokes_stay_inside_the_glyph_box() {
        for seed in 0..20 {
            for g in synthetic_glyphs(seed).glyphs() {
                for i in 0..GLYPH_SIZE {
                    assert_eq!(g[i], 0.0);
                    assert_eq!(g[i * GLYPH_SIZE], 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_malformed_glyphs() {
        assert!(DigitSource::new(vec![vec![0.0; 27 * 28]], GlyphOrigin::Idx).is_err());
        assert!(DigitSource::new(vec![vec![2.0; 28 * 28]], GlyphOrigin::Idx).is_err());
        assert!(DigitSource::new(vec![], GlyphOrigin::Idx).is_err());
    }
}
