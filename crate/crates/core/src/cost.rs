//! Closed-form training-cost model: parameter memory, forward-output memory
//! and FLOPs for flat and multi-scale stacks, plus tape instrumentation to
//! check the model against a built network.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::stack::{constant_mask, Model, ScaleSchedule};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Inputs to the cost model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModelParams {
    /// Layer count `N`.
    pub layers: usize,
    /// Recurrent steps `R = m + n − 1`.
    pub steps: usize,
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    /// Parameter/FLOPs multiple `Ũ` (8 for ConvLSTM).
    pub u_tilde: f64,
    /// Activation-space multiple `U`.
    pub u: f64,
}

impl CostModelParams {
    pub fn convlstm(layers: usize, steps: usize, batch: usize, channels: usize, height: usize, width: usize) -> Self {
        CostModelParams {
            layers,
            steps,
            batch,
            channels,
            height,
            width,
            kernel: 3,
            u_tilde: 8.0,
            u: 8.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ints = [
            ("N", self.layers),
            ("R", self.steps),
            ("b", self.batch),
            ("c", self.channels),
            ("h", self.height),
            ("w", self.width),
            ("k", self.kernel),
        ];
        if let Some((name, _)) = ints.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be a positive integer")));
        }
        if !(self.u_tilde > 0.0 && self.u.is_finite() && self.u_tilde.is_finite()) {
            return Err(Error::config("Ũ and U must be positive and finite"));
        }
        if self.u < self.u_tilde {
            return Err(Error::config(format!("U ({}) must be at least Ũ ({})", self.u, self.u_tilde)));
        }
        Ok(())
    }

    /// `R·U·b·c·h·w`, the unit in which output memory is normalized.
    fn activation_unit(&self) -> f64 {
        self.steps as f64 * self.u * (self.batch * self.channels * self.height * self.width) as f64
    }

    /// `R·Ũ·b·c²·h·w·k²`, the unit in which FLOPs are normalized.
    fn flops_unit(&self) -> f64 {
        let c = self.channels as f64;
        let k = self.kernel as f64;
        self.steps as f64 * self.u_tilde * self.batch as f64 * c * c * (self.height * self.width) as f64 * k * k
    }
}

/// Model memory in bits: `32·N·Ũ·c²·k²`.
pub fn mem_par(p: &CostModelParams) -> f64 {
    let c = p.channels as f64;
    let k = p.kernel as f64;
    32.0 * p.layers as f64 * p.u_tilde * c * c * k * k
}

/// Output-memory coefficient in units of `R·U·b·c·h·w` bits.
pub fn mem_out_coefficient(layers: usize, multiscale: bool) -> f64 {
    let n = layers as i32;
    if !multiscale {
        return 32.0 * n as f64;
    }
    if n % 2 == 1 {
        let half = (n - 1) / 2;
        256.0 / 3.0 * (1.0 - 0.25f64.powi(half)) + 32.0 / 4f64.powi(half)
    } else {
        256.0 / 3.0 * (1.0 - 0.25f64.powi(n / 2))
    }
}

/// Forward-output memory in bits.
pub fn mem_out(p: &CostModelParams, multiscale: bool) -> f64 {
    mem_out_coefficient(p.layers, multiscale) * p.activation_unit()
}

/// Training memory: parameters, gradients and two Adam moments, plus outputs
/// and their gradients.
pub fn mem_total(p: &CostModelParams, multiscale: bool) -> f64 {
    4.0 * mem_par(p) + 2.0 * mem_out(p, multiscale)
}

/// `(M_all⁰ − M_all¹) / M_all⁰`.
pub fn memory_reduction(p: &CostModelParams) -> f64 {
    let flat = mem_total(p, false);
    if flat == 0.0 {
        return 0.0;
    }
    (flat - mem_total(p, true)) / flat
}

/// Memory reduction with parameter memory treated as negligible.
pub fn memory_reduction_outputs_only(layers: usize) -> f64 {
    let flat = mem_out_coefficient(layers, false);
    (flat - mem_out_coefficient(layers, true)) / flat
}

/// FLOPs coefficient in units of `R·Ũ·b·c²·h·w·k²`.
pub fn flops_coefficient(layers: usize, multiscale: bool) -> f64 {
    let n = layers as i32;
    if !multiscale {
        return 2.0 * n as f64;
    }
    if n % 2 == 1 {
        let half = (n - 1) / 2;
        16.0 / 3.0 * (1.0 - 0.25f64.powi(half)) + 2.0 / 4f64.powi(half)
    } else {
        16.0 / 3.0 * (1.0 - 0.25f64.powi(n / 2))
    }
}

/// Training FLOPs.
pub fn flops(p: &CostModelParams, multiscale: bool) -> f64 {
    flops_coefficient(p.layers, multiscale) * p.flops_unit()
}

/// `(F⁰ − F¹) / F⁰`; depends on `N` only.
pub fn flops_reduction(p: &CostModelParams) -> f64 {
    let flat = flops_coefficient(p.layers, false);
    (flat - flops_coefficient(p.layers, true)) / flat
}

/// `Σ_l (s_l)²`: each layer's activation area relative to the input.
pub fn schedule_area(schedule: &ScaleSchedule) -> f64 {
    schedule.levels().iter().map(|&l| 0.25f64.powi(l as i32)).sum()
}

/// All cost figures for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub params: CostModelParams,
    pub parameter_count: f64,
    pub m_par: f64,
    pub m_out_flat: f64,
    pub m_out_ms: f64,
    pub m_all_flat: f64,
    pub m_all_ms: f64,
    pub flops_flat: f64,
    pub flops_ms: f64,
    pub memory_reduction: f64,
    pub flops_reduction: f64,
}

impl CostReport {
    pub fn new(p: CostModelParams) -> Result<Self> {
        p.validate()?;
        let m_par = mem_par(&p);
        Ok(CostReport {
            params: p,
            parameter_count: m_par / 32.0,
            m_par,
            m_out_flat: mem_out(&p, false),
            m_out_ms: mem_out(&p, true),
            m_all_flat: mem_total(&p, false),
            m_all_ms: mem_total(&p, true),
            flops_flat: flops(&p, false),
            flops_ms: flops(&p, true),
            memory_reduction: memory_reduction(&p),
            flops_reduction: flops_reduction(&p),
        })
    }

    pub fn csv_header() -> &'static str {
        "variant,N,R,b,c,h,w,k,M_par_bits,M_out_bits,M_all_bits,flops,mem_reduction,flops_reduction"
    }

    /// Two rows: the flat stack (reductions 0) and the multi-scale stack.
    pub fn csv_rows(&self) -> String {
        let p = &self.params;
        let dims = format!(
            "{},{},{},{},{},{},{}",
            p.layers, p.steps, p.batch, p.channels, p.height, p.width, p.kernel
        );
        format!(
            "plain,{dims},{},{},{},{},0,0\nms,{dims},{},{},{},{},{},{}\n",
            self.m_par,
            self.m_out_flat,
            self.m_all_flat,
            self.flops_flat,
            self.m_par,
            self.m_out_ms,
            self.m_all_ms,
            self.flops_ms,
            self.memory_reduction,
            self.flops_reduction
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::csv_header(), self.csv_rows())
    }

    pub fn to_text(&self) -> String {
        let p = &self.params;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "N={} R={} b={} c={} h={} w={} k={} Ũ={} U={}",
            p.layers, p.steps, p.batch, p.channels, p.height, p.width, p.kernel, p.u_tilde, p.u
        );
        let _ = writeln!(s, "parameters            {}", group_digits(self.parameter_count));
        let _ = writeln!(s, "{:<22}{:>14}{:>14}", "", "plain", "ms");
        let _ = writeln!(s, "{:<22}{:>14}{:>14}", "model memory", bytes(self.m_par), bytes(self.m_par));
        let _ = writeln!(
            s,
            "{:<22}{:>14}{:>14}",
            "output memory",
            bytes(self.m_out_flat),
            bytes(self.m_out_ms)
        );
        let _ = writeln!(
            s,
            "{:<22}{:>14}{:>14}",
            "training memory",
            bytes(self.m_all_flat),
            bytes(self.m_all_ms)
        );
        let _ = writeln!(
            s,
            "{:<22}{:>14}{:>14}",
            "FLOPs",
            format!("{:.4e}", self.flops_flat),
            format!("{:.4e}", self.flops_ms)
        );
        let _ = writeln!(s, "memory reduction      {:.4}%", 100.0 * self.memory_reduction);
        let _ = writeln!(
            s,
            "  (outputs only)      {:.4}%",
            100.0 * memory_reduction_outputs_only(p.layers)
        );
        let _ = writeln!(s, "FLOPs reduction       {:.4}%", 100.0 * self.flops_reduction);
        s
    }
}

/// Decimal MB/GB rendering of a bit count.
pub fn bytes(bits: f64) -> String {
    let b = bits / 8.0;
    if b >= 1e9 {
        format!("{:.3} GB", b / 1e9)
    } else {
        format!("{:.3} MB", b / 1e6)
    }
}

fn group_digits(v: f64) -> String {
    let digits = format!("{:.0}", v);
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Counts measured on the tape for one forward sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Measurement {
    /// Elements of every stored non-leaf output.
    pub stored_elements: usize,
    /// `2 ×` multiply-adds of every convolution, output head included.
    pub conv_flops: u64,
}

/// Runs one teacher-forced forward sequence on random frames.
pub fn instrument(model: &Model, batch: usize, height: usize, width: usize, seed: u64) -> Result<Measurement> {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let frames: Vec<_> = (0..cfg.history + cfg.horizon)
        .map(|_| tape.leaf(Tensor::uniform([batch, cfg.in_channels, height, width], 0.0, 1.0, &mut rng)))
        .collect();
    model.forward_sequence(&mut tape, &frames, &constant_mask(batch, cfg.horizon, true))?;
    Ok(Measurement {
        stored_elements: tape.stored_elements(),
        conv_flops: tape.conv_flops(),
    })
}
