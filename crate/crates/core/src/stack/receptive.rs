use super::{Model, ScaleSchedule};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Receptive field of layer `layer` in input pixels.
///
/// Each cell step counts as one `k × k` convolution; the jump between
/// adjacent units doubles per pooling and halves per upsampling.
pub fn receptive_field_theoretical(schedule: &ScaleSchedule, kernel: usize, layer: usize) -> usize {
    assert!(layer < schedule.len(), "layer {layer} out of range");
    let mut rf = 1usize;
    let mut jump = 1usize << schedule.level(0);
    for l in 0..=layer {
        if l > 0 {
            let (a, b) = (schedule.level(l - 1), schedule.level(l));
            if b > a {
                jump <<= b - a;
            } else {
                jump >>= a - b;
            }
        }
        rf += (kernel - 1) * jump;
    }
    rf
}

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BoundingBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }
}

/// Support of the gradient of one unit of layer `layer` at step `t` with
/// respect to the frame fed at step `t`.
///
/// The unit is the channel sum at `position` (in the layer's own grid). All
/// frames are constant ones, so every interior unit of a layer computes the
/// same value and max-pool ties resolve to the same corner everywhere; the
/// support then matches the arithmetic receptive field instead of the
/// data-dependent one.
pub fn receptive_field_empirical(
    model: &Model,
    frame: (usize, usize),
    layer: usize,
    t: usize,
    position: (usize, usize),
) -> Result<BoundingBox> {
    if layer >= model.layers() {
        return Err(Error::config(format!(
            "layer {layer} out of range for a {}-layer stack",
            model.layers()
        )));
    }
    let (height, width) = frame;
    let cfg = model.config();
    let mut tape = Tape::new();
    let mut state = model.initial_state(&mut tape, 1, height, width)?;
    let mut frames: Vec<Var> = Vec::with_capacity(t + 1);
    let mut hidden = None;
    for _ in 0..=t {
        let x = tape.leaf(Tensor::full([1, cfg.in_channels, height, width], 1.0));
        frames.push(x);
        let (out, next) = model.step_time(&mut tape, x, &state)?;
        hidden = Some(out.hidden[layer]);
        state = next;
    }
    let h = hidden.expect("at least one step");
    let hs = tape.shape(h);
    let (py, px) = position;
    if py >= hs.height || px >= hs.width {
        return Err(Error::config(format!(
            "probe position ({py}, {px}) outside layer {layer} extent {}×{}",
            hs.height, hs.width
        )));
    }
    let mut mask = Tensor::zeros(hs);
    for c in 0..hs.channels {
        let i = mask.index(0, c, py, px);
        mask.data_mut()[i] = 1.0;
    }
    let mask = tape.leaf(mask);
    let picked = tape.mul(h, mask)?;
    let unit = tape.sum(picked);
    let grads = tape.backward(unit)?;
    let g = grads.get(frames[t]).ok_or_else(|| Error::Data("no gradient reaches the frame".into()))?;
    support(g).ok_or_else(|| Error::Data("input gradient is identically zero".into()))
}

fn support(g: &Tensor) -> Option<BoundingBox> {
    let Shape { channels, height, width, .. } = g.shape();
    let mut bbox: Option<BoundingBox> = None;
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                if g.at(0, c, y, x).abs() as f64 > 1e-12 {
                    let b = bbox.get_or_insert(BoundingBox { top: y, left: x, bottom: y, right: x });
                    b.top = b.top.min(y);
                    b.left = b.left.min(x);
                    b.bottom = b.bottom.max(y);
                    b.right = b.right.max(x);
                }
            }
        }
    }
    bbox
}
