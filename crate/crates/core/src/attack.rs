//! Lagrangian perceptual attack.
//!
//! For each multiplier λ the search starts from `x0 + ε` (ε uniform over
//! `{-1, 0, 1} / 255` per sample) and takes fixed-size steps along the
//! steepest ascent direction of
//!
//! ```text
//! J(x) = -D(x, x0) + λ (q(f(x)) - f0)^2
//! ```
//!
//! clamping to `[0, 1]` after every step and quantizing to 8 bits at the end.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fidelity::{AscentNorm, FidelityMeasure, MeasureKind};
use crate::imageio;
use crate::quality::{ModelKind, QualityModel};
use crate::tensor::{Graph, ImageTensor, Tensor, Var};

pub const DEFAULT_CANDIDATES: usize = 32;
pub const DEFAULT_GAMMA: f64 = 1e-3;
pub const DEFAULT_ITERATIONS: usize = 200;

/// `n` log-spaced multipliers over `[lo, hi]`.
pub fn log_lambdas(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub lambdas: Vec<f64>,
    pub gamma: f64,
    pub iterations: usize,
    pub norm: AscentNorm,
    pub seed: u64,
    /// Quality the search pushes away from; `None` uses the model's own score of `x0`.
    pub target: Option<f64>,
    /// Use the calibrated score `q(f(x))` in the objective rather than raw `f(x)`.
    pub calibrated: bool,
}

impl AttackConfig {
    pub fn new(norm: AscentNorm, seed: u64) -> Self {
        Self {
            lambdas: log_lambdas(DEFAULT_CANDIDATES, 1e-3, 1e3),
            gamma: DEFAULT_GAMMA,
            iterations: DEFAULT_ITERATIONS,
            norm,
            seed,
            target: None,
            calibrated: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::invalid("at least one λ is required"));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::invalid(format!("λ must be finite and non-negative, got {l}")));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::invalid(format!("step size must be non-negative, got {}", self.gamma)));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("at least one iteration is required"));
        }
        if self.target.is_some_and(|t| !t.is_finite()) {
            return Err(Error::invalid("target quality must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CandidateStatus {
    Completed,
    /// The ascent direction vanished; the iterate stopped moving.
    Stalled { iteration: usize },
    /// `J` or its gradient became non-finite; the trace stops before it.
    Failed { iteration: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub lambda: f64,
    /// Stream of the per-sweep seed used for the initial noise.
    pub stream: u64,
    #[serde(skip, default = "placeholder")]
    pub image: ImageTensor,
    pub fidelity: f64,
    pub raw_quality: f64,
    pub quality: f64,
    /// Signed calibrated change `q(f(y)) - q(f(x0))`.
    pub delta: f64,
    pub trace: Vec<f64>,
    pub status: CandidateStatus,
}

fn placeholder() -> ImageTensor {
    ImageTensor::filled(1, 1, 1, 0.0).expect("1x1 image")
}

impl Candidate {
    pub fn abs_delta(&self) -> f64 {
        self.delta.abs()
    }

    pub fn file_name(&self) -> String {
        format!("candidate_{:02}.png", self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub model: ModelKind,
    pub measure: MeasureKind,
    pub config: AttackConfig,
    /// Target `f0` actually used in the objective.
    pub target: f64,
    pub initial_raw_quality: f64,
    pub initial_quality: f64,
    #[serde(skip, default = "placeholder")]
    pub initial: ImageTensor,
    pub candidates: Vec<Candidate>,
}

pub const MANIFEST: &str = "manifest.json";
pub const INITIAL: &str = "initial.png";

impl CandidateSet {
    /// Writes `manifest.json`, `initial.png` and one PNG per candidate.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let manifest = serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "candidate manifest".into(),
            reason: e.to_string(),
        })?;
        fs::write(dir.join(MANIFEST), manifest + "\n")?;
        imageio::save_png(dir.join(INITIAL), &self.initial)?;
        for c in &self.candidates {
            imageio::save_png(dir.join(c.file_name()), &c.image)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let mut set: CandidateSet = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "candidate manifest".into(),
            reason: e.to_string(),
        })?;
        set.initial = imageio::load(dir.join(INITIAL))?;
        for c in &mut set.candidates {
            c.image = imageio::load(dir.join(c.file_name()))?;
            c.image.check_dims("candidate", &set.initial)?;
        }
        Ok(set)
    }

    pub fn get(&self, index: usize) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.index == index)
    }
}

/// The attack objective for one multiplier, with `x0` and `f0` fixed.
pub struct Objective<'a> {
    pub x0: &'a ImageTensor,
    pub target: f64,
    pub model: &'a QualityModel,
    pub measure: &'a FidelityMeasure,
    pub lambda: f64,
    pub calibrated: bool,
}

impl Objective<'_> {
    /// Records `J` on `g` for the planar image node `x`.
    pub fn graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let x0 = g.leaf(self.x0.to_planar());
        let d = self.measure.graph(g, x, x0)?;
        let neg_d = g.neg(d);
        if self.lambda == 0.0 {
            return Ok(neg_d);
        }
        let q = if self.calibrated {
            self.model.score_graph(g, x)?
        } else {
            self.model.raw_graph(g, x)?
        };
        let gap = g.offset(q, -self.target);
        let sq = g.square(gap);
        let pen = g.scale(sq, self.lambda);
        Ok(g.add(neg_d, pen)?)
    }

    pub fn value(&self, x: &ImageTensor) -> Result<f64> {
        x.check_dims("objective", self.x0)?;
        let mut g = Graph::new();
        let xv = g.leaf(x.to_planar());
        let j = self.graph(&mut g, xv)?;
        Ok(g.forward(j)?)
    }

    /// `J` and `∇J` at the planar iterate.
    pub fn value_and_gradient(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let j = self.graph(&mut g, xv)?;
        let value = g.forward(j)?;
        if !value.is_finite() {
            return Ok((value, Tensor::zeros(x.shape())));
        }
        Ok((value, g.gradient(j, xv)?))
    }
}

/// `J(x) = -D(x, x0) + λ (q(f(x)) - f0)^2` with the calibrated score.
pub fn objective(
    x: &ImageTensor,
    x0: &ImageTensor,
    f0: f64,
    model: &QualityModel,
    measure: &FidelityMeasure,
    lambda: f64,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("λ must be non-negative, got {lambda}")));
    }
    Objective {
        x0,
        target: f0,
        model,
        measure,
        lambda,
        calibrated: true,
    }
    .value(x)
}

/// Unit-norm steepest ascent direction: `sign(g)` for ℓ∞, `g / ‖g‖₂` for ℓ2.
/// A zero gradient gives a zero direction.
pub fn steepest_direction(grad: &[f64], norm: AscentNorm) -> Vec<f64> {
    match norm {
        AscentNorm::Linf => grad
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 })
            .collect(),
        AscentNorm::L2 => {
            let n = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                vec![0.0; grad.len()]
            } else {
                grad.iter().map(|v| v / n).collect()
            }
        }
    }
}

/// Noise for candidate `stream`: each sample of `x0` moved by -1, 0 or +1 levels, then clamped.
pub fn initial_iterate(x0: &ImageTensor, seed: u64, stream: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut x = x0.clone();
    for v in x.data_mut() {
        *v += f64::from(rng.gen_range(-1i32..=1)) / 255.0;
    }
    x.clamp_unit();
    x
}

/// Quality the objective holds the search away from, per the config.
pub fn resolve_target(x0: &ImageTensor, model: &QualityModel, cfg: &AttackConfig) -> Result<f64> {
    match cfg.target {
        Some(t) => Ok(t),
        None if cfg.calibrated => model.score(x0),
        None => model.raw_score(x0),
    }
}

pub fn run_candidate(
    x0: &ImageTensor,
    index: usize,
    lambda: f64,
    cfg: &AttackConfig,
    model: &QualityModel,
    measure: &FidelityMeasure,
) -> Result<Candidate> {
    cfg.validate()?;
    let target = resolve_target(x0, model, cfg)?;
    let reference = model.score(x0)?;
    run_one(x0, index, lambda, cfg, model, measure, target, reference)
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    x0: &ImageTensor,
    index: usize,
    lambda: f64,
    cfg: &AttackConfig,
    model: &QualityModel,
    measure: &FidelityMeasure,
    target: f64,
    reference: f64,
) -> Result<Candidate> {
    let objective = Objective {
        x0,
        target,
        model,
        measure,
        lambda,
        calibrated: cfg.calibrated,
    };
    let stream = index as u64;
    let start = initial_iterate(x0, cfg.seed, stream);
    let mut x = start.to_planar();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut status = CandidateStatus::Completed;
    for it in 0..cfg.iterations {
        let (j, grad) = objective.value_and_gradient(&x)?;
        if !j.is_finite() || !grad.all_finite() {
            status = CandidateStatus::Failed {
                iteration: it,
                reason: format!("objective is {j} or its gradient is non-finite"),
            };
            break;
        }
        trace.push(j);
        let dir = steepest_direction(grad.data(), cfg.norm);
        if dir.iter().all(|v| *v == 0.0) {
            log::debug!("candidate {index} (λ = {lambda}) stalled at iteration {it}");
            status = CandidateStatus::Stalled { iteration: it };
            break;
        }
        for (v, d) in x.data_mut().iter_mut().zip(&dir) {
            *v = (*v + cfg.gamma * d).clamp(0.0, 1.0);
        }
    }
    let image = ImageTensor::from_planar(&x)?.quantized();
    let fidelity = measure.distance(&image, x0)?;
    let raw_quality = model.raw_score(&image)?;
    let quality = model.calibration.calibrate(raw_quality)?;
    Ok(Candidate {
        index,
        lambda,
        stream,
        image,
        fidelity,
        raw_quality,
        quality,
        delta: quality - reference,
        trace,
        status,
    })
}

/// One candidate per λ, in list order. Candidates run in parallel; each owns
/// its noise stream, so the result does not depend on the worker count.
pub fn run_sweep(
    x0: &ImageTensor,
    cfg: &AttackConfig,
    model: &QualityModel,
    measure: &FidelityMeasure,
) -> Result<CandidateSet> {
    cfg.validate()?;
    let target = resolve_target(x0, model, cfg)?;
    let initial_raw_quality = model.raw_score(x0)?;
    let initial_quality = model.calibration.calibrate(initial_raw_quality)?;
    let candidates = cfg
        .lambdas
        .par_iter()
        .enumerate()
        .map(|(i, &l)| run_one(x0, i, l, cfg, model, measure, target, initial_quality))
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateSet {
        model: model.kind(),
        measure: measure.kind(),
        config: cfg.clone(),
        target,
        initial_raw_quality,
        initial_quality,
        initial: x0.clone(),
        candidates,
    })
}

/// Ascent on the calibrated score alone (the λ → ∞ limit), without initial noise.
pub fn enhance(
    x0: &ImageTensor,
    steps: usize,
    gamma: f64,
    norm: AscentNorm,
    model: &QualityModel,
) -> Result<ImageTensor> {
    if steps == 0 {
        return Err(Error::invalid("enhancement needs at least one step"));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::invalid(format!("step size must be positive, got {gamma}")));
    }
    let mut x = x0.to_planar();
    for it in 0..steps {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let q = model.score_graph(&mut g, xv)?;
        let value = g.forward(q)?;
        let grad = g.gradient(q, xv)?;
        if !value.is_finite() || !grad.all_finite() {
            return Err(Error::NonFinite(format!("quality at enhancement step {it}")));
        }
        let dir = steepest_direction(grad.data(), norm);
        if dir.iter().all(|v| *v == 0.0) {
            break;
        }
        for (v, d) in x.data_mut().iter_mut().zip(&dir) {
            *v = (*v + gamma * d).clamp(0.0, 1.0);
        }
    }
    Ok(ImageTensor::from_planar(&x)?.quantized())
}
