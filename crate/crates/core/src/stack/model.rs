use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_divisible, ScaleSchedule, SkipMode, StackConfig};
use crate::cells::{self, CellStepInput, MemoryList, RecurrentCell};
use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// A built stack: cells at their scheduled scales, a 1×1 output head, and
/// the parameters they own.
pub struct Model {
    config: StackConfig,
    schedule: ScaleSchedule,
    cells: Vec<Box<dyn RecurrentCell>>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
    pub params: ParamStore,
}

/// Builds the stack described by `config`, initialising parameters from `seed`.
pub fn build_stack(config: &StackConfig, seed: u64) -> Result<Model> {
    Model::with_schedule(config, config.schedule(), seed)
}

/// Recurrent state carried between timesteps.
#[derive(Clone, Debug)]
pub struct StackState {
    /// Per-layer memory lists at each layer's scale.
    pub layers: Vec<MemoryList>,
    /// Zigzag memory leaving the top layer, at the top layer's scale.
    pub zigzag: Option<Var>,
}

pub struct StepOutput {
    pub prediction: Var,
    /// Hidden state of every layer at this step.
    pub hidden: Vec<Var>,
    /// Zigzag memory after every layer (empty when the cell has none).
    pub zigzag: Vec<Var>,
}

pub struct SequenceOutput {
    /// Predictions of frames `1..m+n`, one per recurrent step.
    pub predictions: Vec<Var>,
    /// Per-step, per-layer hidden states.
    pub hidden: Vec<Vec<Var>>,
    pub zigzag: Vec<Vec<Var>>,
    history: usize,
}

impl SequenceOutput {
    /// The last `n` predictions: the forecast of frames `m..m+n`.
    pub fn forecast(&self) -> &[Var] {
        &self.predictions[self.history - 1..]
    }
}

impl Model {
    /// Builds a stack on an explicit schedule. [`build_stack`] uses the
    /// schedule implied by the config; other schedules exist to exercise
    /// resampling paths that the mirror pyramid never takes.
    pub fn with_schedule(config: &StackConfig, schedule: ScaleSchedule, seed: u64) -> Result<Model> {
        config.validate()?;
        if schedule.len() != config.layers {
            return Err(Error::config(format!(
                "schedule has {} layers, config {}",
                schedule.len(),
                config.layers
            )));
        }
        let spec = config.cell_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut cells = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let cin = if l == 0 { config.in_channels } else { config.hidden };
            cells.push(cells::build_cell(&spec, cin, &mut params, &format!("layer{l}"), &mut rng)?);
        }
        let bound = 1.0 / (config.hidden as f32).sqrt();
        let w = Tensor::uniform([config.out_channels, config.hidden, 1, 1], -bound, bound, &mut rng);
        let b = Tensor::uniform([1, config.out_channels, 1, 1], -bound, bound, &mut rng);
        let head_weight = params.add("head.weight", w);
        let head_bias = params.add("head.bias", b);
        Ok(Model {
            config: config.clone(),
            schedule,
            cells,
            head_weight,
            head_bias,
            params,
        })
    }

    pub fn config(&self) -> &StackConfig {
        &self.config
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn layers(&self) -> usize {
        self.cells.len()
    }

    /// Every instantiated scalar parameter, biases and head included.
    pub fn exact_param_count(&self) -> usize {
        self.params.element_count()
    }

    /// `N·Ũ·c²·k²`, the complexity-model count.
    pub fn model_param_count(&self) -> usize {
        self.config.layers * cells::model_param_count(&self.config.cell_spec())
    }

    /// Encoder layer feeding layer `l` through a skip connection, if any.
    /// Encoder `e` feeds decoder `N−1−e`; the odd-N bottleneck has no partner.
    pub fn skip_source(&self, l: usize) -> Option<usize> {
        if self.config.skip != SkipMode::Unet {
            return None;
        }
        let e = self.layers() - 1 - l;
        (e < l).then_some(e)
    }

    fn layer_shape(&self, batch: usize, height: usize, width: usize, l: usize) -> Shape {
        let f = 1 << self.schedule.level(l);
        Shape::new(batch, self.config.hidden, height / f, width / f)
    }

    /// Zero state for frames of `height × width`.
    pub fn initial_state(&self, tape: &mut Tape, batch: usize, height: usize, width: usize) -> Result<StackState> {
        check_divisible(&self.schedule, height, width)?;
        let mut layers = Vec::with_capacity(self.layers());
        for (l, cell) in self.cells.iter().enumerate() {
            let shape = self.layer_shape(batch, height, width, l);
            layers.push(MemoryList::zeros(tape, &cell.spec().roles, shape)?);
        }
        let zigzag = self.cells[0].spec().uses_zigzag.then(|| {
            let top = self.layers() - 1;
            tape.zeros(self.layer_shape(batch, height, width, top))
        });
        Ok(StackState { layers, zigzag })
    }

    /// Moves `v` from scale level `from` to level `to`.
    pub fn resample(tape: &mut Tape, mut v: Var, from: u32, to: u32) -> Result<Var> {
        for _ in to..from {
            v = tape.upsample2(v);
        }
        for _ in from..to {
            v = tape.maxpool2(v)?;
        }
        Ok(v)
    }

    /// One timestep: routes `x` up the stack and projects the top hidden state
    /// to the next-frame prediction.
    pub fn step_time(&self, tape: &mut Tape, x: Var, state: &StackState) -> Result<(StepOutput, StackState)> {
        let xs = tape.shape(x);
        if xs.channels != self.config.in_channels {
            return Err(Error::InvalidShape(format!(
                "frame has {} channels, model expects {}",
                xs.channels, self.config.in_channels
            )));
        }
        check_divisible(&self.schedule, xs.height, xs.width)?;
        let n = self.layers();
        let levels = self.schedule.levels();

        let mut hidden: Vec<Var> = Vec::with_capacity(n);
        let mut zigzag_trace = Vec::new();
        let mut next_layers = Vec::with_capacity(n);
        let mut zigzag = match state.zigzag {
            Some(m) => Some(Self::resample(tape, m, levels[n - 1], levels[0])?),
            None => None,
        };

        for l in 0..n {
            let cell = &self.cells[l];
            let mut input = if l == 0 {
                Self::resample(tape, x, 0, levels[0])?
            } else {
                Self::resample(tape, hidden[l - 1], levels[l - 1], levels[l])?
            };
            if let Some(e) = self.skip_source(l) {
                input = tape.add(input, hidden[e])?;
            }
            if l > 0 {
                if let Some(m) = zigzag {
                    zigzag = Some(Self::resample(tape, m, levels[l - 1], levels[l])?);
                }
            }
            let diagonal = if cell.spec().uses_diagonal {
                Some(if l == 0 {
                    let shape = tape.shape(state.layers[0].h());
                    tape.zeros(shape)
                } else {
                    Self::resample(tape, state.layers[l - 1].h(), levels[l - 1], levels[l])?
                })
            } else {
                None
            };
            let out = cell.step(
                tape,
                &self.params,
                CellStepInput {
                    x: input,
                    memories: state.layers[l].clone(),
                    zigzag,
                    diagonal,
                },
            )?;
            hidden.push(out.h);
            zigzag = out.zigzag;
            if let Some(m) = zigzag {
                zigzag_trace.push(m);
            }
            next_layers.push(out.memories);
        }

        let top = Self::resample(tape, hidden[n - 1], levels[n - 1], 0)?;
        let w = tape.param(&self.params, self.head_weight);
        let b = tape.param(&self.params, self.head_bias);
        let prediction = tape.conv2d(top, w, Some(b))?;
        Ok((
            StepOutput {
                prediction,
                hidden,
                zigzag: zigzag_trace,
            },
            StackState {
                layers: next_layers,
                zigzag,
            },
        ))
    }

    /// Runs `m + n − 1` steps over `frames` (length `m + n`). Encoder steps
    /// always consume ground truth. Decoder step `j` consumes ground truth for
    /// sample `b` when `mask[b][j]` holds, else the previous prediction.
    pub fn forward_sequence(&self, tape: &mut Tape, frames: &[Var], mask: &[Vec<bool>]) -> Result<SequenceOutput> {
        let (m, n) = (self.config.history, self.config.horizon);
        if frames.len() != m + n {
            return Err(Error::InvalidShape(format!(
                "sequence of {} frames, model expects {}",
                frames.len(),
                m + n
            )));
        }
        let s = tape.shape(frames[0]);
        if frames.iter().any(|&f| tape.shape(f) != s) {
            return Err(Error::InvalidShape("frames differ in shape".into()));
        }
        if mask.len() != s.batch || mask.iter().any(|row| row.len() != n - 1) {
            return Err(Error::InvalidShape(format!(
                "sampling mask must be {} × {}",
                s.batch,
                n - 1
            )));
        }
        let mut state = self.initial_state(tape, s.batch, s.height, s.width)?;
        let steps = m + n - 1;
        let mut out = SequenceOutput {
            predictions: Vec::with_capacity(steps),
            hidden: Vec::with_capacity(steps),
            zigzag: Vec::with_capacity(steps),
            history: m,
        };
        for t in 0..steps {
            let x = if t < m {
                frames[t]
            } else {
                let j = t - m;
                let column: Vec<bool> = mask.iter().map(|row| row[j]).collect();
                let prev = out.predictions[t - 1];
                if column.iter().all(|&b| b) {
                    frames[t]
                } else if column.iter().all(|&b| !b) {
                    prev
                } else {
                    tape.select_batch(&column, frames[t], prev)?
                }
            };
            let (step, next) = self.step_time(tape, x, &state)?;
            out.predictions.push(step.prediction);
            out.hidden.push(step.hidden);
            out.zigzag.push(step.zigzag);
            state = next;
        }
        Ok(out)
    }
}

/// `batch × (n−1)` mask of constant value.
pub fn constant_mask(batch: usize, horizon: usize, value: bool) -> Vec<Vec<bool>> {
    vec![vec![value; horizon.saturating_sub(1)]; batch]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;

    fn probe_config(layers: usize, multiscale: bool, skip: SkipMode) -> StackConfig {
        StackConfig {
            cell: CellKind::Probe,
            zigzag: false,
            diagonal: false,
            layers,
            hidden: 2,
            kernel: 1,
            multiscale,
            skip,
            in_channels: 1,
            out_channels: 1,
            history: 1,
            horizon: 1,
        }
    }

    fn hidden_values(layers: usize, skip: SkipMode) -> Vec<(Shape, f32)> {
        let model = build_stack(&probe_config(layers, true, skip), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([1, 1, 4, 4], 1.0));
        let state = model.initial_state(&mut tape, 1, 4, 4).unwrap();
        let (out, _) = model.step_time(&mut tape, x, &state).unwrap();
        out.hidden
            .iter()
            .map(|&h| {
                let t = tape.value(h);
                assert!(t.data().iter().all(|&v| v == t.data()[0]));
                (t.shape(), t.data()[0])
            })
            .collect()
    }

    #[test]
    fn probe_trace_with_unet_skip() {
        let hs = hidden_values(3, SkipMode::Unet);
        assert_eq!(hs[0], (Shape::new(1, 2, 4, 4), 1.0));
        assert_eq!(hs[1], (Shape::new(1, 2, 2, 2), 1.0));
        assert_eq!(hs[2], (Shape::new(1, 2, 4, 4), 2.0));
    }

    #[test]
    fn probe_trace_without_skip() {
        let hs = hidden_values(3, SkipMode::None);
        assert_eq!(hs[2].1, 1.0);
    }

    #[test]
    fn flat_stack_keeps_input_extent() {
        let mut cfg = StackConfig::convlstm(4, 3, false, SkipMode::None);
        cfg.history = 2;
        cfg.horizon = 2;
        let model = build_stack(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let frames: Vec<Var> = (0..4).map(|_| tape.leaf(Tensor::full([1, 1, 6, 6], 0.5))).collect();
        let out = model.forward_sequence(&mut tape, &frames, &constant_mask(1, 2, false)).unwrap();
        for step in &out.hidden {
            for &h in step {
                assert_eq!(tape.shape(h), Shape::new(1, 3, 6, 6));
            }
        }
        assert_eq!(out.predictions.len(), 3);
        assert_eq!(out.forecast().len(), 2);
    }

    #[test]
    fn skip_endpoints() {
        let model = build_stack(&StackConfig::convlstm(6, 2, true, SkipMode::Unet), 0).unwrap();
        let sources: Vec<_> = (0..6).map(|l| model.skip_source(l)).collect();
        assert_eq!(sources, vec![None, None, None, Some(2), Some(1), Some(0)]);
        let model = build_stack(&StackConfig::convlstm(5, 2, true, SkipMode::Unet), 0).unwrap();
        let sources: Vec<_> = (0..5).map(|l| model.skip_source(l)).collect();
        assert_eq!(sources, vec![None, None, None, Some(1), Some(0)]);
    }

    #[test]
    fn parameter_count_independent_of_scale() {
        for skip in [SkipMode::None, SkipMode::Unet] {
            let plain = build_stack(&StackConfig::convlstm(5, 4, false, SkipMode::None), 0).unwrap();
            let ms = build_stack(&StackConfig::convlstm(5, 4, true, skip), 0).unwrap();
            assert_eq!(plain.exact_param_count(), ms.exact_param_count());
        }
        let probe = build_stack(&probe_config(3, true, SkipMode::Unet), 0).unwrap();
        assert_eq!(probe.exact_param_count(), 2 + 1);
    }

    #[test]
    fn rejects_indivisible_frames_and_bad_lengths() {
        let mut cfg = StackConfig::convlstm(6, 2, true, SkipMode::Unet);
        cfg.history = 1;
        cfg.horizon = 2;
        let model = build_stack(&cfg, 0).unwrap();
        let mut tape = Tape::new();
        let bad = tape.leaf(Tensor::zeros([1, 1, 6, 6]));
        let state = model.initial_state(&mut tape, 1, 8, 8).unwrap();
        assert!(matches!(model.step_time(&mut tape, bad, &state), Err(Error::Divisibility { .. })));
        let f = tape.leaf(Tensor::zeros([1, 1, 8, 8]));
        assert!(model.forward_sequence(&mut tape, &[f, f], &constant_mask(1, 2, true)).is_err());
        assert!(model.forward_sequence(&mut tape, &[f, f, f], &constant_mask(1, 3, true)).is_err());
    }

    #[test]
    fn teacher_forcing_consumes_ground_truth() {
        let mut cfg = probe_config(1, false, SkipMode::None);
        cfg.history = 1;
        cfg.horizon = 3;
        let mut model = build_stack(&cfg, 0).unwrap();
        // head picks channel 0
        let hw = model.head_weight;
        model.params.get_mut(hw).value = Tensor::from_vec([1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let hb = model.head_bias;
        model.params.get_mut(hb).value = Tensor::zeros([1, 1, 1, 1]);
        let run = |model: &Model, value: bool| {
            let mut tape = Tape::new();
            let frames: Vec<Var> = [1.0, 10.0, 100.0, 1000.0]
                .iter()
                .map(|&v| tape.leaf(Tensor::full([1, 1, 2, 2], v)))
                .collect();
            let out = model.forward_sequence(&mut tape, &frames, &constant_mask(1, 3, value)).unwrap();
            out.predictions.iter().map(|&p| tape.value(p).data()[0]).collect::<Vec<_>>()
        };
        // h_t = x_t + h_{t-1}
        assert_eq!(run(&model, true), vec![1.0, 11.0, 111.0]);
        // free-running: x_t = previous prediction
        assert_eq!(run(&model, false), vec![1.0, 2.0, 4.0]);
    }
}
