//! Recurrent cells behind a pluggable interface.
//!
//! A cell consumes a [`CellStepInput`] (layer input, its memory list, and the
//! optional zigzag and diagonal tensors) and produces the layer's hidden state
//! plus its updated memories. The stack in [`crate::stack`] owns all routing
//! between layers and timesteps; cells only see tensors already resampled to
//! their own scale.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Named slots a cell may carry along the time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemoryRole {
    H,
    C,
    Z,
    N,
    S,
    F,
    D,
    MS,
    MT,
}

impl fmt::Display for MemoryRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Ordered, uniquely named memory slots. Slot `H` is always present.
#[derive(Clone, Debug)]
pub struct MemoryList {
    slots: Vec<(MemoryRole, Var)>,
}

impl MemoryList {
    pub fn new(slots: Vec<(MemoryRole, Var)>) -> Result<Self> {
        for (i, (r, _)) in slots.iter().enumerate() {
            if slots[..i].iter().any(|(o, _)| o == r) {
                return Err(Error::config(format!("duplicate memory slot {r}")));
            }
        }
        if !slots.iter().any(|(r, _)| *r == MemoryRole::H) {
            return Err(Error::config("memory list must contain slot H"));
        }
        Ok(MemoryList { slots })
    }

    /// Zero-initialised slots for `roles`, all of `shape`.
    pub fn zeros(tape: &mut Tape, roles: &[MemoryRole], shape: Shape) -> Result<Self> {
        let slots = roles.iter().map(|&r| (r, tape.zeros(shape))).collect();
        MemoryList::new(slots)
    }

    pub fn get(&self, role: MemoryRole) -> Option<Var> {
        self.slots.iter().find(|(r, _)| *r == role).map(|&(_, v)| v)
    }

    pub fn h(&self) -> Var {
        self.get(MemoryRole::H).expect("slot H is always present")
    }

    pub fn roles(&self) -> impl Iterator<Item = MemoryRole> + '_ {
        self.slots.iter().map(|&(r, _)| r)
    }

    pub fn iter(&self) -> impl Iterator<Item = (MemoryRole, Var)> + '_ {
        self.slots.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    ConvLstm,
    Probe,
}

impl std::str::FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convlstm" => Ok(CellKind::ConvLstm),
            "probe" => Ok(CellKind::Probe),
            other => Err(Error::config(format!("unknown cell kind `{other}`"))),
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::ConvLstm => "convlstm",
            CellKind::Probe => "probe",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSpec {
    pub kind: CellKind,
    pub hidden: usize,
    pub kernel: usize,
    pub uses_zigzag: bool,
    pub uses_diagonal: bool,
    pub roles: Vec<MemoryRole>,
}

impl CellSpec {
    pub fn convlstm(hidden: usize, kernel: usize) -> Self {
        CellSpec {
            kind: CellKind::ConvLstm,
            hidden,
            kernel,
            uses_zigzag: false,
            uses_diagonal: false,
            roles: vec![MemoryRole::H, MemoryRole::C],
        }
    }

    pub fn probe(hidden: usize, uses_zigzag: bool, uses_diagonal: bool) -> Self {
        CellSpec {
            kind: CellKind::Probe,
            hidden,
            kernel: 1,
            uses_zigzag,
            uses_diagonal,
            roles: vec![MemoryRole::H, MemoryRole::C],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("hidden channels must be positive"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if !self.roles.contains(&MemoryRole::H) {
            return Err(Error::config("cell must declare memory slot H"));
        }
        if self.kind == CellKind::ConvLstm
            && (self.uses_zigzag
                || self.uses_diagonal
                || self.roles != [MemoryRole::H, MemoryRole::C])
        {
            return Err(Error::config(
                "convlstm carries exactly {H, C} with no zigzag or diagonal routing",
            ));
        }
        Ok(())
    }

    /// Parameter multiple relative to one `c→c` convolution (8 for ConvLSTM:
    /// four gates, each with an input and a recurrent convolution).
    pub fn param_multiple(&self) -> usize {
        match self.kind {
            CellKind::ConvLstm => 8,
            CellKind::Probe => 0,
        }
    }
}

/// Complexity-model parameter count `Ũ·c²·k²`: biases ignored, every
/// convolution assumed `c→c`.
pub fn model_param_count(spec: &CellSpec) -> usize {
    spec.param_multiple() * spec.hidden * spec.hidden * spec.kernel * spec.kernel
}

/// Exact number of parameters instantiated for a cell reading `in_channels`.
pub fn cell_param_count(spec: &CellSpec, in_channels: usize) -> usize {
    match spec.kind {
        CellKind::ConvLstm => {
            let (c, k2) = (spec.hidden, spec.kernel * spec.kernel);
            4 * c * in_channels * k2 + 4 * c + 4 * c * c * k2
        }
        CellKind::Probe => 0,
    }
}

pub struct CellStepInput {
    pub x: Var,
    pub memories: MemoryList,
    pub zigzag: Option<Var>,
    pub diagonal: Option<Var>,
}

pub struct CellStepOutput {
    pub h: Var,
    pub memories: MemoryList,
    pub zigzag: Option<Var>,
}

pub trait RecurrentCell: Send + Sync {
    fn spec(&self) -> &CellSpec;

    fn in_channels(&self) -> usize;

    fn step(&self, tape: &mut Tape, params: &ParamStore, io: CellStepInput) -> Result<CellStepOutput>;
}

/// Convolutional LSTM. Gate order in the fused convolutions is `[i, f, g, o]`.
pub struct ConvLstmCell {
    spec: CellSpec,
    in_channels: usize,
    pub w_x: ParamId,
    pub b_x: ParamId,
    pub w_h: ParamId,
}

impl ConvLstmCell {
    /// Registers `{prefix}.w_x`, `{prefix}.b_x` and `{prefix}.w_h`. Weights are
    /// uniform in ±1/√(fan-in); the forget-gate bias starts at 1.
    pub fn new<R: Rng + ?Sized>(
        spec: CellSpec,
        in_channels: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let (c, k) = (spec.hidden, spec.kernel);
        let bound_x = 1.0 / ((in_channels * k * k) as f32).sqrt();
        let bound_h = 1.0 / ((c * k * k) as f32).sqrt();
        let w_x = Tensor::uniform([4 * c, in_channels, k, k], -bound_x, bound_x, rng);
        let mut b_x = Tensor::uniform([1, 4 * c, 1, 1], -bound_x, bound_x, rng);
        b_x.data_mut()[c..2 * c].fill(1.0);
        let w_h = Tensor::uniform([4 * c, c, k, k], -bound_h, bound_h, rng);
        Ok(ConvLstmCell {
            w_x: store.add(format!("{prefix}.w_x"), w_x),
            b_x: store.add(format!("{prefix}.b_x"), b_x),
            w_h: store.add(format!("{prefix}.w_h"), w_h),
            spec,
            in_channels,
        })
    }
}

impl RecurrentCell for ConvLstmCell {
    fn spec(&self) -> &CellSpec {
        &self.spec
    }

    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn step(&self, tape: &mut Tape, params: &ParamStore, io: CellStepInput) -> Result<CellStepOutput> {
        let h_prev = io.memories.h();
        let c_prev = io
            .memories
            .get(MemoryRole::C)
            .ok_or_else(|| Error::config("convlstm requires memory slot C"))?;
        if tape.shape(h_prev) != tape.shape(c_prev) {
            return Err(Error::ShapeMismatch {
                op: "convlstm H/C",
                left: tape.shape(h_prev),
                right: tape.shape(c_prev),
            });
        }
        if !tape.shape(io.x).same_spatial(&tape.shape(h_prev)) {
            return Err(Error::ShapeMismatch {
                op: "convlstm X/H",
                left: tape.shape(io.x),
                right: tape.shape(h_prev),
            });
        }
        let c = self.spec.hidden;
        let w_x = tape.param(params, self.w_x);
        let b_x = tape.param(params, self.b_x);
        let w_h = tape.param(params, self.w_h);

        let from_x = tape.conv2d(io.x, w_x, Some(b_x))?;
        let from_h = tape.conv2d(h_prev, w_h, None)?;
        let pre = tape.add(from_x, from_h)?;
        let i = tape.slice_channels(pre, 0, c)?;
        let i = tape.sigmoid(i);
        let f = tape.slice_channels(pre, c, c)?;
        let f = tape.sigmoid(f);
        let g = tape.slice_channels(pre, 2 * c, c)?;
        let g = tape.tanh(g);
        let o = tape.slice_channels(pre, 3 * c, c)?;
        let o = tape.sigmoid(o);

        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let cell = tape.add(keep, write)?;
        let squashed = tape.tanh(cell);
        let h = tape.mul(o, squashed)?;

        Ok(CellStepOutput {
            h,
            memories: MemoryList::new(vec![(MemoryRole::H, h), (MemoryRole::C, cell)])?,
            zigzag: None,
        })
    }
}

/// Parameter-free routing oracle.
///
/// `h = x + H + m + diag` (absent terms are zero), every non-`H` slot is
/// incremented by one, and `m_out = m + h`. On integer inputs every value is
/// an exactly representable integer, so routing can be asserted exactly. A
/// single-channel `x` is broadcast across the hidden channels.
pub struct ProbeCell {
    spec: CellSpec,
    in_channels: usize,
}

impl ProbeCell {
    pub fn new(spec: CellSpec, in_channels: usize) -> Result<Self> {
        spec.validate()?;
        if spec.kind != CellKind::Probe {
            return Err(Error::config("ProbeCell needs a probe spec"));
        }
        if in_channels != 1 && in_channels != spec.hidden {
            return Err(Error::config(format!(
                "probe input must have 1 or {} channels, got {in_channels}",
                spec.hidden
            )));
        }
        Ok(ProbeCell { spec, in_channels })
    }
}

fn check_scale(tape: &Tape, what: &'static str, v: Var, reference: Shape) -> Result<()> {
    let s = tape.shape(v);
    if !s.same_spatial(&reference) || s.batch != reference.batch {
        return Err(Error::ShapeMismatch {
            op: what,
            left: s,
            right: reference,
        });
    }
    Ok(())
}

impl RecurrentCell for ProbeCell {
    fn spec(&self) -> &CellSpec {
        &self.spec
    }

    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn step(&self, tape: &mut Tape, _params: &ParamStore, io: CellStepInput) -> Result<CellStepOutput> {
        let h_prev = io.memories.h();
        let reference = tape.shape(h_prev);
        check_scale(tape, "probe x", io.x, reference)?;
        for (role, v) in io.memories.iter() {
            if tape.shape(v) != reference {
                return Err(Error::InvalidShape(format!(
                    "probe memory {role} has shape {} but H has {reference}",
                    tape.shape(v)
                )));
            }
        }
        if let Some(m) = io.zigzag {
            check_scale(tape, "probe zigzag", m, reference)?;
        }
        if let Some(d) = io.diagonal {
            check_scale(tape, "probe diagonal", d, reference)?;
        }

        let x = match tape.shape(io.x).channels {
            c if c == reference.channels => io.x,
            1 => tape.broadcast_channels(io.x, reference.channels)?,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "probe x channels",
                    left: tape.shape(io.x),
                    right: reference,
                })
            }
        };
        let mut h = tape.add(x, h_prev)?;
        if let Some(m) = io.zigzag {
            h = tape.add(h, m)?;
        }
        if let Some(d) = io.diagonal {
            h = tape.add(h, d)?;
        }
        let zigzag = if self.spec.uses_zigzag {
            Some(match io.zigzag {
                Some(m) => tape.add(m, h)?,
                None => h,
            })
        } else {
            None
        };
        let mut slots = Vec::with_capacity(io.memories.len());
        for (role, v) in io.memories.iter() {
            let next = if role == MemoryRole::H { h } else { tape.offset(v, 1.0) };
            slots.push((role, next));
        }
        Ok(CellStepOutput {
            h,
            memories: MemoryList::new(slots)?,
            zigzag,
        })
    }
}

/// Instantiates the cell described by `spec` for layer `prefix`.
pub fn build_cell<R: Rng + ?Sized>(
    spec: &CellSpec,
    in_channels: usize,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut R,
) -> Result<Box<dyn RecurrentCell>> {
    Ok(match spec.kind {
        CellKind::ConvLstm => Box::new(ConvLstmCell::new(spec.clone(), in_channels, store, prefix, rng)?),
        CellKind::Probe => Box::new(ProbeCell::new(spec.clone(), in_channels)?),
    })
}
