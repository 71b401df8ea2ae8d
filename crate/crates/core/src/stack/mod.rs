//! The N-layer recurrent stack and its multi-scale (mirror pyramid) variant.
//!
//! Scales are tracked as integer *levels*: level `l` means the layer runs at
//! `1/2^l` of the input resolution. Moving up one level is a 2x2 max-pool,
//! moving down one level is a 2x bilinear upsample.

mod model;
mod receptive;

pub use model::{build_stack, constant_mask, Model, SequenceOutput, StackState, StepOutput};
pub use receptive::{receptive_field_empirical, receptive_field_theoretical, BoundingBox};

use std::fmt;
use std::str::FromStr;

use crate::cells::{CellKind, CellSpec};
use crate::error::{Error, Result};

/// Per-layer scale levels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleSchedule {
    levels: Vec<u32>,
}

impl ScaleSchedule {
    /// All ones when `multiscale` is off, otherwise the mirror pyramid
    /// `level(l) = min(l, N-1-l)`: odd `N` has one bottleneck layer, even `N`
    /// a doubled innermost scale.
    pub fn new(layers: usize, multiscale: bool) -> Self {
        let levels = (0..layers)
            .map(|l| if multiscale { l.min(layers - 1 - l) as u32 } else { 0 })
            .collect();
        ScaleSchedule { levels }
    }

    /// An arbitrary schedule. Adjacent layers must differ by at most one level.
    pub fn custom(levels: Vec<u32>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::config("schedule needs at least one layer"));
        }
        if levels.windows(2).any(|w| w[0].abs_diff(w[1]) > 1) {
            return Err(Error::config(format!(
                "adjacent layers may differ by at most a factor of 2: {levels:?}"
            )));
        }
        Ok(ScaleSchedule { levels })
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn level(&self, layer: usize) -> u32 {
        self.levels[layer]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Linear scale factor of a layer, `1/2^level`.
    pub fn factor(&self, layer: usize) -> f64 {
        0.5f64.powi(self.levels[layer] as i32)
    }

    /// Deepest level, i.e. the number of successive poolings.
    pub fn depth(&self) -> u32 {
        self.levels.iter().copied().max().unwrap_or(0)
    }

    /// Required divisor of the input height and width.
    pub fn divisor(&self) -> usize {
        1 << self.depth()
    }

    pub fn is_mirror(&self) -> bool {
        let n = self.levels.len();
        (0..n).all(|l| self.levels[l] == self.levels[n - 1 - l])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipMode {
    None,
    Unet,
}

impl FromStr for SkipMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SkipMode::None),
            "unet" => Ok(SkipMode::Unet),
            other => Err(Error::config(format!("unknown skip mode `{other}` (none|unet)"))),
        }
    }
}

impl fmt::Display for SkipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipMode::None => "none",
            SkipMode::Unet => "unet",
        })
    }
}

/// Topology of a stack.
#[derive(Clone, Debug, PartialEq)]
pub struct StackConfig {
    pub cell: CellKind,
    /// Probe cells only: route the zigzag memory.
    pub zigzag: bool,
    /// Probe cells only: route the previous-step lower-layer hidden state.
    pub diagonal: bool,
    pub layers: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub multiscale: bool,
    pub skip: SkipMode,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Observed frames `m`.
    pub history: usize,
    /// Forecast frames `n`.
    pub horizon: usize,
}

impl StackConfig {
    pub fn convlstm(layers: usize, hidden: usize, multiscale: bool, skip: SkipMode) -> Self {
        StackConfig {
            cell: CellKind::ConvLstm,
            zigzag: false,
            diagonal: false,
            layers,
            hidden,
            kernel: 3,
            multiscale,
            skip,
            in_channels: 1,
            out_channels: 1,
            history: 10,
            horizon: 10,
        }
    }

    pub fn cell_spec(&self) -> CellSpec {
        match self.cell {
            CellKind::ConvLstm => CellSpec::convlstm(self.hidden, self.kernel),
            CellKind::Probe => CellSpec::probe(self.hidden, self.zigzag, self.diagonal),
        }
    }

    pub fn schedule(&self) -> ScaleSchedule {
        ScaleSchedule::new(self.layers, self.multiscale)
    }

    /// Recurrent steps per sequence, `m + n − 1`.
    pub fn steps(&self) -> usize {
        self.history + self.horizon - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("layer count must be at least 1"));
        }
        if self.history == 0 || self.horizon == 0 {
            return Err(Error::config("history and horizon must be at least 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.skip == SkipMode::Unet && !self.multiscale {
            return Err(Error::config("skip mode `unet` requires the multi-scale variant"));
        }
        if self.cell == CellKind::ConvLstm && (self.zigzag || self.diagonal) {
            return Err(Error::config("convlstm has no zigzag or diagonal routing"));
        }
        self.cell_spec().validate()
    }

    /// Checks that frames of `height × width` fit the pooling depth.
    pub fn check_frame_size(&self, height: usize, width: usize) -> Result<()> {
        check_divisible(&self.schedule(), height, width)
    }
}

impl StackConfig {
    /// `key = value` lines, one per field.
    pub fn to_text(&self) -> String {
        format!(
            "cell = {}\nzigzag = {}\ndiagonal = {}\nlayers = {}\nhidden = {}\nkernel = {}\nvariant = {}\nskip = {}\nin_channels = {}\nout_channels = {}\nhistory = {}\nhorizon = {}\n",
            self.cell,
            self.zigzag,
            self.diagonal,
            self.layers,
            self.hidden,
            self.kernel,
            if self.multiscale { "ms" } else { "plain" },
            self.skip,
            self.in_channels,
            self.out_channels,
            self.history,
            self.horizon
        )
    }

    /// Parses [`StackConfig::to_text`] output. Every field is required.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("malformed config line `{line}`")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |key: &str| {
            fields
                .remove(key)
                .ok_or_else(|| Error::config(format!("missing config key `{key}`")))
        };
        fn parse<T: FromStr>(key: &str, v: String) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("invalid value `{v}` for `{key}`")))
        }
        let cfg = StackConfig {
            cell: take("cell")?.parse()?,
            zigzag: parse("zigzag", take("zigzag")?)?,
            diagonal: parse("diagonal", take("diagonal")?)?,
            layers: parse("layers", take("layers")?)?,
            hidden: parse("hidden", take("hidden")?)?,
            kernel: parse("kernel", take("kernel")?)?,
            multiscale: match take("variant")?.as_str() {
                "ms" => true,
                "plain" => false,
                other => return Err(Error::config(format!("unknown variant `{other}` (plain|ms)"))),
            },
            skip: take("skip")?.parse()?,
            in_channels: parse("in_channels", take("in_channels")?)?,
            out_channels: parse("out_channels", take("out_channels")?)?,
            history: parse("history", take("history")?)?,
            horizon: parse("horizon", take("horizon")?)?,
        };
        if let Some(k) = fields.keys().next() {
            return Err(Error::config(format!("unknown config key `{k}`")));
        }
        Ok(cfg)
    }
}

pub(crate) fn check_divisible(schedule: &ScaleSchedule, height: usize, width: usize) -> Result<()> {
    let d = schedule.divisor();
    for (what, extent) in [("frame height", height), ("frame width", width)] {
        if extent % d != 0 {
            return Err(Error::Divisibility {
                what: what.to_string(),
                extent,
                divisor: d,
            });
        }
    }
    Ok(())
}
