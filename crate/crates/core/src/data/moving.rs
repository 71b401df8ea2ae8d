use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::glyphs::{DigitSource, GLYPH_SIZE};
use super::{mix_seed, Sequences};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MovingMnistConfig {
    pub count: usize,
    pub digits: usize,
    pub size: usize,
    pub frames: usize,
    pub seed: u64,
    /// Speed bounds in pixels per frame.
    pub speed: (f64, f64),
}

impl Default for MovingMnistConfig {
    fn default() -> Self {
        MovingMnistConfig {
            count: 2000,
            digits: 1,
            size: 32,
            frames: 20,
            seed: 0,
            speed: (2.0, 5.0),
        }
    }
}

impl MovingMnistConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < GLYPH_SIZE + 1 {
            return Err(Error::config(format!("frame size must be at least {}", GLYPH_SIZE + 1)));
        }
        if self.digits == 0 || self.count == 0 || self.frames == 0 {
            return Err(Error::config("count, digits and frames must be positive"));
        }
        let (lo, hi) = self.speed;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config(format!("invalid speed range [{lo}, {hi}]")));
        }
        Ok(())
    }

    fn limit(&self) -> f64 {
        (self.size - GLYPH_SIZE) as f64
    }
}

/// Top-left corner and velocity of one sprite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MovingSpriteState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub glyph: usize,
}

impl MovingSpriteState {
    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn advance(&mut self, limit: f64) {
        (self.x, self.vx) = reflect(self.x, self.vx, limit);
        (self.y, self.vy) = reflect(self.y, self.vy, limit);
    }
}

/// Moves one coordinate by `v` inside `[0, limit]`, mirroring off either wall
/// as often as needed and flipping the velocity sign on each bounce.
pub fn reflect(pos: f64, v: f64, limit: f64) -> (f64, f64) {
    let (mut p, mut v2) = (pos + v, v);
    if limit == 0.0 {
        return (0.0, v2);
    }
    loop {
        if p < 0.0 {
            p = -p;
        } else if p > limit {
            p = 2.0 * limit - p;
        } else {
            return (p, v2);
        }
        v2 = -v2;
    }
}

/// Per-frame sprite states of sequence `index`.
pub fn sprite_trajectories(cfg: &MovingMnistConfig, glyphs: usize, index: usize) -> Vec<Vec<MovingSpriteState>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64));
    let limit = cfg.limit();
    let mut sprites: Vec<MovingSpriteState> = (0..cfg.digits)
        .map(|_| {
            let glyph = rng.random_range(0..glyphs);
            let x = rng.random_range(0.0..=limit);
            let y = rng.random_range(0.0..=limit);
            let speed = rng.random_range(cfg.speed.0..=cfg.speed.1);
            let angle = rng.random_range(0.0..TAU);
            MovingSpriteState {
                x,
                y,
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
                glyph,
            }
        })
        .collect();
    let mut out = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        out.push(sprites.clone());
        sprites.iter_mut().for_each(|s| s.advance(limit));
    }
    out
}

/// Max-composites a glyph at a subpixel offset, splitting each glyph pixel
/// bilinearly over the four frame pixels it covers.
fn render(frame: &mut [f32], size: usize, glyph: &[f32], x: f64, y: f64) {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let (x0, y0) = (x0 as usize, y0 as usize);
    // Gather form: frame pixel (Y, X) samples the glyph at (Y − y, X − x).
    let sample = |gy: isize, gx: isize| -> f32 {
        if gy < 0 || gx < 0 || gy >= GLYPH_SIZE as isize || gx >= GLYPH_SIZE as isize {
            0.0
        } else {
            glyph[gy as usize * GLYPH_SIZE + gx as usize]
        }
    };
    for gy in 0..=GLYPH_SIZE {
        let fy_row = y0 + gy;
        if fy_row >= size {
            break;
        }
        for gx in 0..=GLYPH_SIZE {
            let fx_col = x0 + gx;
            if fx_col >= size {
                break;
            }
            let (iy, ix) = (gy as isize, gx as isize);
            let v = (1.0 - fy) * (1.0 - fx) * sample(iy, ix)
                + (1.0 - fy) * fx * sample(iy, ix - 1)
                + fy * (1.0 - fx) * sample(iy - 1, ix)
                + fy * fx * sample(iy - 1, ix - 1);
            let p = &mut frame[fy_row * size + fx_col];
            *p = p.max(v.clamp(0.0, 1.0));
        }
    }
}

/// `[S, T, 1, size, size]` bouncing-digit sequences.
pub fn generate_moving_mnist(source: &DigitSource, cfg: &MovingMnistConfig) -> Result<Sequences> {
    cfg.validate()?;
    let plane = cfg.size * cfg.size;
    let mut data = vec![0.0f32; cfg.count * cfg.frames * plane];
    for (s, seq) in data.chunks_mut(cfg.frames * plane).enumerate() {
        let traj = sprite_trajectories(cfg, source.len(), s);
        for (frame, sprites) in seq.chunks_mut(plane).zip(&traj) {
            for sp in sprites {
                render(frame, cfg.size, source.glyph(sp.glyph), sp.x, sp.y);
            }
        }
    }
    Sequences::new([cfg.count, cfg.frames, 1, cfg.size, cfg.size], data)
}

#[cfg(test)]
mod tests {
    use super::super::synthetic_glyphs;
    use super::*;
    use proptest::prelude::*;

    fn small(count: usize, digits: usize) -> MovingMnistConfig {
        MovingMnistConfig {
            count,
            digits,
            size: 40,
            frames: 20,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn reflection_at_left_wall() {
        let (x, vx) = reflect(0.0, -3.0, 36.0);
        assert_eq!((x, vx), (3.0, 3.0));
        let (x, vx) = reflect(35.0, 2.5, 36.0);
        assert_eq!((x, vx), (34.5, -2.5));
        // several folds inside a narrow box
        let (x, vx) = reflect(4.0, 5.0, 4.0);
        assert_eq!((x, vx), (1.0, 5.0));
    }

    #[test]
    fn static_sprite_gives_identical_frames() {
        let cfg = MovingMnistConfig {
            speed: (0.0, 0.0),
            ..small(2, 1)
        };
        let seqs = generate_moving_mnist(&synthetic_glyphs(0), &cfg).unwrap();
        for t in 1..20 {
            assert_eq!(seqs.frame(0, t), seqs.frame(0, 0));
        }
    }

    #[test]
    fn two_digits_bounded_by_one() {
        let seqs = generate_moving_mnist(&synthetic_glyphs(0), &small(3, 2)).unwrap();
        assert_eq!(seqs.frames(), 20);
        for s in 0..3 {
            for t in 0..20 {
                let f = seqs.frame(s, t);
                assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(f.iter().any(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn subpixel_rendering_conserves_mass() {
        let g = synthetic_glyphs(1);
        let mut frame = vec![0.0; 40 * 40];
        render(&mut frame, 40, g.glyph(3), 5.25, 7.75);
        let mass: f32 = frame.iter().sum();
        let glyph_mass: f32 = g.glyph(3).iter().sum();
        assert!((mass - glyph_mass).abs() < 1e-3 * glyph_mass);
    }

    #[test]
    fn deterministic_and_independent_across_sequences() {
        let src = synthetic_glyphs(0);
        let a = generate_moving_mnist(&src, &small(2, 1)).unwrap();
        assert_eq!(a, generate_moving_mnist(&src, &small(2, 1)).unwrap());
        assert_ne!(a.frame(0, 0), a.frame(1, 0));
    }

    #[test]
    fn rejects_small_frames() {
        let cfg = MovingMnistConfig { size: 28, ..small(1, 1) };
        assert!(generate_moving_mnist(&synthetic_glyphs(0), &cfg).is_err());
    }

    proptest! {
        #[test]
        fn speed_and_containment(seed in 0u64..500, size in 29usize..70) {
            let cfg = MovingMnistConfig { seed, size, digits: 2, ..small(1, 2) };
            let limit = (size - GLYPH_SIZE) as f64;
            let traj = sprite_trajectories(&cfg, 10, 0);
            for k in 0..2 {
                let v0 = traj[0][k].speed();
                prop_assert!((2.0..=5.0).contains(&v0));
                for states in &traj {
                    let s = states[k];
                    prop_assert!((s.speed() - v0).abs() < 1e-6);
                    prop_assert!(s.x >= 0.0 && s.x <= limit && s.y >= 0.0 && s.y <= limit);
                }
            }
        }
    }
}
