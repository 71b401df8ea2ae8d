//! Frame-quality metrics, categorical skill scores and training losses.
//!
//! MSE, MAE and GDL follow the per-frame pixel-sum convention: each frame's
//! error is summed over its pixels, then averaged over samples and frames.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::Sequences;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

pub const PSNR_CAP: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Scores of one frame, or an average of several.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameScores {
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub gdl: f64,
}

impl FrameScores {
    fn add(&mut self, o: &FrameScores) {
        self.mse += o.mse;
        self.mae += o.mae;
        self.ssim += o.ssim;
        self.psnr += o.psnr;
        self.gdl += o.gdl;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.mse *= s;
        self.mae *= s;
        self.ssim *= s;
        self.psnr *= s;
        self.gdl *= s;
        self
    }
}

/// Scores per forecast step (averaged over samples) and over everything.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub per_step: Vec<FrameScores>,
    pub aggregate: FrameScores,
}

impl FrameMetrics {
    /// One row per forecast step, then an `all` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,mse,mae,ssim,psnr,gdl\n");
        let row = |s: &mut String, label: &str, f: &FrameScores| {
            let _ = writeln!(s, "{label},{},{},{},{},{}", f.mse, f.mae, f.ssim, f.psnr, f.gdl);
        };
        for (i, f) in self.per_step.iter().enumerate() {
            row(&mut s, &(i + 1).to_string(), f);
        }
        row(&mut s, "all", &self.aggregate);
        s
    }
}

fn check_same(pred: &Sequences, truth: &Sequences) -> Result<()> {
    if pred.dims() != truth.dims() {
        return Err(Error::InvalidShape(format!(
            "prediction dims {:?} differ from truth dims {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    Ok(())
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable valid-region filtering of a `height × width` plane.
fn filter_valid(plane: &[f64], height: usize, width: usize, w: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = w.len();
    let (oh, ow) = (height - k + 1, width - k + 1);
    let mut rows = vec![0.0; height * ow];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| w[i] * plane[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| w[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM of one plane pair (data range 1). Planes smaller than the
/// 11-pixel window use the largest odd window that fits.
pub fn ssim_plane(a: &[f32], b: &[f32], height: usize, width: usize) -> f64 {
    let mut size = SSIM_WINDOW.min(height).min(width);
    if size % 2 == 0 {
        size -= 1;
    }
    let w = gaussian_window(size);
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let (mu_a, oh, ow) = filter_valid(&a, height, width, &w);
    let (mu_b, ..) = filter_valid(&b, height, width, &w);
    let (e_aa, ..) = filter_valid(&aa, height, width, &w);
    let (e_bb, ..) = filter_valid(&bb, height, width, &w);
    let (e_ab, ..) = filter_valid(&ab, height, width, &w);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    total / (oh * ow) as f64
}

/// Pixel-sum gradient difference (α = 1) of one plane pair.
pub fn gdl_plane(pred: &[f32], truth: &[f32], height: usize, width: usize) -> f64 {
    let mut total = 0.0f64;
    let at = |p: &[f32], y: usize, x: usize| p[y * width + x] as f64;
    for y in 0..height {
        for x in 0..width {
            if x + 1 < width {
                let gt = (at(truth, y, x + 1) - at(truth, y, x)).abs();
                let gp = (at(pred, y, x + 1) - at(pred, y, x)).abs();
                total += (gt - gp).abs();
            }
            if y + 1 < height {
                let gt = (at(truth, y + 1, x) - at(truth, y, x)).abs();
                let gp = (at(pred, y + 1, x) - at(pred, y, x)).abs();
                total += (gt - gp).abs();
            }
        }
    }
    total
}

/// Scores of a single `C × H × W` frame.
pub fn frame_scores(pred: &[f32], truth: &[f32], channels: usize, height: usize, width: usize) -> FrameScores {
    let (mut se, mut ae) = (0.0f64, 0.0f64);
    for (&p, &t) in pred.iter().zip(truth) {
        let d = p as f64 - t as f64;
        se += d * d;
        ae += d.abs();
    }
    let plane = height * width;
    let (mut ssim, mut gdl) = (0.0, 0.0);
    for c in 0..channels {
        let r = c * plane..(c + 1) * plane;
        ssim += ssim_plane(&pred[r.clone()], &truth[r.clone()], height, width);
        gdl += gdl_plane(&pred[r.clone()], &truth[r], height, width);
    }
    let pixel_mse = se / pred.len() as f64;
    let psnr = if pixel_mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / pixel_mse).log10()).min(PSNR_CAP)
    };
    FrameScores {
        mse: se,
        mae: ae,
        ssim: ssim / channels as f64,
        psnr,
        gdl,
    }
}

/// Metrics over `[S, T, C, H, W]` predictions and targets.
pub fn frame_metrics(pred: &Sequences, truth: &Sequences) -> Result<FrameMetrics> {
    check_same(pred, truth)?;
    let (s, t) = (pred.count(), pred.frames());
    let (c, h, w) = (pred.channels(), pred.height(), pred.width());
    let mut per_step = vec![FrameScores::default(); t];
    for i in 0..s {
        for (j, acc) in per_step.iter_mut().enumerate() {
            acc.add(&frame_scores(pred.frame(i, j), truth.frame(i, j), c, h, w));
        }
    }
    let mut aggregate = FrameScores::default();
    for f in &per_step {
        aggregate.add(f);
    }
    Ok(FrameMetrics {
        per_step: per_step.into_iter().map(|f| f.scaled(1.0 / s as f64)).collect(),
        aggregate: aggregate.scaled(1.0 / (s * t) as f64),
    })
}

/// Step-function intensity weights: `weights[i]` applies to values in
/// `[edges[i-1], edges[i])`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub edges: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Default for WeightMap {
    fn default() -> Self {
        WeightMap {
            edges: vec![2.0, 5.0, 10.0, 30.0],
            weights: vec![1.0, 2.0, 5.0, 10.0, 30.0],
        }
    }
}

impl WeightMap {
    pub fn uniform() -> Self {
        WeightMap {
            edges: vec![],
            weights: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.edges.len() + 1 {
            return Err(Error::config("weight map needs one more weight than edges"));
        }
        if self.edges.windows(2).any(|e| e[0] >= e[1]) {
            return Err(Error::config("weight map edges must be strictly ascending"));
        }
        Ok(())
    }

    pub fn weight(&self, x: f64) -> f64 {
        self.weights[self.edges.iter().take_while(|&&e| x >= e).count()]
    }
}

/// Threshold-based scores and intensity-weighted errors.
#[derive(Clone, Debug, PartialEq)]
pub struct SkillScores {
    pub thresholds: Vec<f64>,
    pub csi: Vec<f64>,
    pub hss: Vec<f64>,
    /// Per threshold: the CSI or HSS denominator was zero and the score set to 0.
    pub degenerate: Vec<bool>,
    pub b_mse: f64,
    pub b_mae: f64,
}

/// Confusion counts for one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn count(pred: &[f32], truth: &[f32], threshold: f64) -> Self {
        Self::from_pairs(pred.iter().zip(truth).map(|(&p, &t)| (p as f64, t as f64)), threshold)
    }

    pub fn from_pairs(pairs: impl Iterator<Item = (f64, f64)>, threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (p, t) in pairs {
            match (p >= threshold, t >= threshold) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// `(CSI, zero denominator)`.
    pub fn csi(&self) -> (f64, bool) {
        let d = self.tp + self.fn_ + self.fp;
        if d == 0 {
            (0.0, true)
        } else {
            (self.tp as f64 / d as f64, false)
        }
    }

    /// `(HSS, zero denominator)`.
    pub fn hss(&self) -> (f64, bool) {
        let (tp, fp, fn_, tn) = (self.tp as f64, self.fp as f64, self.fn_ as f64, self.tn as f64);
        let d = (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn);
        if d == 0.0 {
            (0.0, true)
        } else {
            (2.0 * (tp * tn - fn_ * fp) / d, false)
        }
    }
}

pub fn skill_scores(pred: &Sequences, truth: &Sequences, thresholds: &[f64], weights: &WeightMap) -> Result<SkillScores> {
    check_same(pred, truth)?;
    weights.validate()?;
    if thresholds.windows(2).any(|t| t[0] >= t[1]) {
        return Err(Error::config("thresholds must be strictly ascending"));
    }
    let (p, t) = (pred.data(), truth.data());
    let mut csi = Vec::with_capacity(thresholds.len());
    let mut hss = Vec::with_capacity(thresholds.len());
    let mut degenerate = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        let c = Confusion::count(p, t, tau);
        let (a, da) = c.csi();
        let (b, db) = c.hss();
        csi.push(a);
        hss.push(b);
        degenerate.push(da || db);
    }
    // Same accumulation order as `frame_metrics`, so unit weights reproduce
    // its MSE and MAE bit for bit.
    let (n, frames) = (pred.count(), pred.frames());
    let mut per_step = vec![(0.0f64, 0.0f64); frames];
    for i in 0..n {
        for (j, acc) in per_step.iter_mut().enumerate() {
            let (mut se, mut ae) = (0.0f64, 0.0f64);
            for (&pv, &tv) in pred.frame(i, j).iter().zip(truth.frame(i, j)) {
                let w = weights.weight(tv as f64);
                let d = pv as f64 - tv as f64;
                se += w * (d * d);
                ae += w * d.abs();
            }
            acc.0 += se;
            acc.1 += ae;
        }
    }
    let (se, ae) = per_step.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x, b + y));
    let frames = (n * frames) as f64;
    Ok(SkillScores {
        thresholds: thresholds.to_vec(),
        csi,
        hss,
        degenerate,
        b_mse: se * (1.0 / frames),
        b_mae: ae * (1.0 / frames),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    L1,
    L2,
    L1L2,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            "l1+l2" | "l1l2" => Ok(LossKind::L1L2),
            other => Err(Error::config(format!("unknown loss `{other}` (l1|l2|l1+l2)"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
            LossKind::L1L2 => "l1+l2",
        })
    }
}

/// Differentiable mean-per-element loss over paired frames.
pub fn training_loss(tape: &mut Tape, preds: &[Var], truths: &[Var], kind: LossKind) -> Result<Var> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::InvalidShape(format!(
            "{} predictions for {} targets",
            preds.len(),
            truths.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&p, &t) in preds.iter().zip(truths) {
        let d = tape.sub(p, t)?;
        let term = match kind {
            LossKind::L1 => {
                let a = tape.abs(d);
                tape.mean(a)
            }
            LossKind::L2 => {
                let s = tape.square(d);
                tape.mean(s)
            }
            LossKind::L1L2 => {
                let a = tape.abs(d);
                let l1 = tape.mean(a);
                let s = tape.square(d);
                let l2 = tape.mean(s);
                tape.add(l1, l2)?
            }
        };
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / preds.len() as f32))
}

/// The same loss on plain values, in `f64`.
pub fn loss_value(pred: &[f32], truth: &[f32], kind: LossKind) -> f64 {
    let n = pred.len() as f64;
    let (mut l1, mut l2) = (0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        let d = p as f64 - t as f64;
        l1 += d.abs();
        l2 += d * d;
    }
    match kind {
        LossKind::L1 => l1 / n,
        LossKind::L2 => l2 / n,
        LossKind::L1L2 => (l1 + l2) / n,
    }
}
