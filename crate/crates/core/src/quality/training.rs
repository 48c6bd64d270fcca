//! Fits the shipped default weights on seeded synthetic data.
//!
//! Codebook atoms are sampled patches and the NSS model is kernel ridge on
//! its standardized features. The CNN starts from seeded random stages with a
//! ridge head and is then trained end to end with Adam. Every model is
//! fitted against the proxy opinion scores, then calibrated.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::codebook::{self, CodebookModel, PATCH};
use super::nss::{self, NssModel, FEATURES};
use super::{fit_calibration, CnnModel, ModelKind, Network, QualityModel};
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::synth::{self, SynthSample};
use crate::tensor::{Graph, ImageTensor};
use crate::weights::WeightFile;

pub const DEFAULT_SEED: u64 = 2023;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub seed: u64,
    pub images: usize,
    pub size: usize,
    pub atoms: usize,
    /// Ridge strength relative to the mean feature variance.
    pub ridge: f64,
    /// Passes of Adam over the training images for the CNN.
    pub cnn_epochs: usize,
    pub cnn_rate: f64,
    pub cnn_batch: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            images: 400,
            size: 64,
            atoms: codebook::DEFAULT_ATOMS,
            ridge: 1e-2,
            cnn_epochs: 30,
            cnn_rate: 3e-3,
            cnn_batch: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedDefaults {
    pub models: Vec<QualityModel>,
    pub extractor: FeatureExtractor,
}

impl TrainedDefaults {
    /// `(file name, bytes)` for every shipped artifact.
    pub fn files(&self) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for m in &self.models {
            let id = m.kind().id();
            out.push((format!("{id}.iqaw"), m.network.to_weights().to_bytes()));
            out.push((format!("{id}.calib"), m.calibration.to_text(id).into_bytes()));
        }
        out.push(("extractor.iqaw".into(), self.extractor.to_weights().to_bytes()));
        out
    }
}

pub fn train(cfg: &TrainingConfig) -> Result<TrainedDefaults> {
    let data = synth::dataset(cfg.seed, cfg.images, cfg.size)?;
    let images: Vec<&ImageTensor> = data.iter().map(|s| &s.distorted).collect();
    let mos: Vec<f64> = data.iter().map(|s| s.mos).collect();

    let nss = fit_nss(&images, &mos)?;
    let codebook = fit_codebook(cfg, &data, &images, &mos)?;
    let cnn = fit_cnn(cfg, &images, &mos)?;

    let mut models = Vec::new();
    for (kind, net) in [
        (ModelKind::Nss, Network::Nss(nss)),
        (ModelKind::Codebook, Network::Codebook(codebook)),
        (ModelKind::Cnn, Network::Cnn(cnn)),
    ] {
        // Calibrate the network as it will be loaded, i.e. after f32 storage.
        let stored = Network::from_weights(kind, &WeightFile::from_bytes(&net.to_weights().to_bytes())?)?;
        let probe = QualityModel::new(stored.clone(), super::CalibrationParams::new(0.0, 1.0)?);
        let raw = images.iter().map(|x| probe.raw_score(x)).collect::<Result<Vec<_>>>()?;
        let calibration = fit_calibration(&raw, &mos)?;
        models.push(QualityModel::new(stored, calibration));
    }
    let extractor = FeatureExtractor::random(cfg.seed ^ 0xfe47, &[8, 16, 32]);
    let extractor = FeatureExtractor::from_weights(&extractor.to_weights())?;
    Ok(TrainedDefaults { models, extractor })
}

fn fit_nss(images: &[&ImageTensor], mos: &[f64]) -> Result<NssModel> {
    let feats = images.iter().map(|x| nss::features(x)).collect::<Result<Vec<_>>>()?;
    let n = feats.len() as f64;
    let mean: Vec<f64> = (0..FEATURES).map(|j| feats.iter().map(|f| f[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..FEATURES)
        .map(|j| {
            let v = feats.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
            v.sqrt().max(1e-6)
        })
        .collect();
    // Round through f32 first so the stored model reproduces the fit.
    let r32 = |v: f64| v as f32 as f64;
    let mean: Vec<f64> = mean.into_iter().map(r32).collect();
    let scale: Vec<f64> = scale.into_iter().map(r32).collect();
    let z: Vec<Vec<f64>> = feats
        .iter()
        .map(|f| (0..FEATURES).map(|j| r32((f[j] - mean[j]) / scale[j])).collect())
        .collect();
    let gamma = r32(0.5 / FEATURES as f64);
    let k = z.len();
    let gram = DMatrix::from_fn(k, k, |i, j| {
        let d: f64 = z[i].iter().zip(&z[j]).map(|(a, b)| (a - b).powi(2)).sum();
        (-gamma * d).exp()
    });
    let bias = mos.iter().sum::<f64>() / n;
    let rhs = DVector::from_iterator(k, mos.iter().map(|m| m - bias));
    let alpha = solve_spd(gram + DMatrix::identity(k, k) * 0.1, rhs)?;
    NssModel::new(mean, scale, z.concat(), alpha.iter().copied().collect(), gamma, bias)
}

fn fit_codebook(
    cfg: &TrainingConfig,
    data: &[SynthSample],
    images: &[&ImageTensor],
    mos: &[f64],
) -> Result<CodebookModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0de);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut atoms = Vec::with_capacity(cfg.atoms * PATCH * PATCH);
    let mut found = 0;
    let mut attempts = 0;
    while found < cfg.atoms {
        attempts += 1;
        if attempts > 1000 * cfg.atoms {
            return Err(Error::invalid("could not sample enough textured patches"));
        }
        let s = &data[order[attempts % order.len()]];
        let img = if rng.gen_bool(0.5) { &s.pristine } else { &s.distorted };
        let y = rng.gen_range(0..=img.height() - PATCH);
        let x = rng.gen_range(0..=img.width() - PATCH);
        let patch: Vec<f64> = (0..PATCH * PATCH)
            .map(|i| {
                let (py, px) = (y + i / PATCH, x + i % PATCH);
                (0..3).map(|c| crate::fidelity::LUMA[c] * img.get(py, px, c)).sum()
            })
            .collect();
        let contrast = {
            let m = patch.iter().sum::<f64>() / patch.len() as f64;
            patch.iter().map(|v| (v - m).powi(2)).sum::<f64>() / patch.len() as f64
        };
        if contrast < 1e-4 {
            continue;
        }
        if let Some(a) = codebook::normalize_atom(&patch) {
            atoms.extend(a);
            found += 1;
        }
    }
    let atoms: Vec<f64> = atoms.into_iter().map(|v| v as f32 as f64).collect();
    let probe = CodebookModel::new(atoms.clone(), cfg.atoms, vec![0.0; 2 * cfg.atoms], 0.0)?;
    let feats = images.iter().map(|x| probe.pooled(x)).collect::<Result<Vec<_>>>()?;
    let (w, b) = ridge(&feats, mos, cfg.ridge)?;
    CodebookModel::new(atoms, cfg.atoms, w, b)
}

fn fit_cnn(cfg: &TrainingConfig, images: &[&ImageTensor], mos: &[f64]) -> Result<CnnModel> {
    let mut net = CnnModel::random(cfg.seed ^ 0xc44);
    // Warm start: least-squares head on the random features.
    let feats = images.iter().map(|x| net.pooled(x)).collect::<Result<Vec<_>>>()?;
    (net.head_weight, net.head_bias) = ridge(&feats, mos, cfg.ridge)?;

    let mut adam = Adam::new(cfg.cnn_rate, param_count(&net));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xada);
    let batch = cfg.cnn_batch.max(1);
    for _ in 0..cfg.cnn_epochs {
        // A fresh synthetic draw per epoch keeps the small network from
        // memorizing the shared training set.
        let fresh = synth::dataset(rng.gen(), cfg.images, cfg.size)?;
        let mut order: Vec<usize> = (0..fresh.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut grad = vec![0.0; adam.m.len()];
            for &i in chunk {
                cnn_gradient(&net, &fresh[i].distorted, fresh[i].mos, &mut grad)?;
            }
            grad.iter_mut().for_each(|g| *g /= chunk.len() as f64);
            let mut params = flatten_params(&net);
            adam.step(&mut params, &grad);
            unflatten_params(&mut net, &params);
        }
    }
    // Snap to the stored precision so calibration sees the shipped network.
    Ok(CnnModel::from_weights(&WeightFile::from_bytes(&net.to_weights().to_bytes())?)?)
}

fn param_count(net: &CnnModel) -> usize {
    flatten_params(net).len()
}

/// Stage weights, biases, GDN `b`, GDN `w`, then the head, in stage order.
fn flatten_params(net: &CnnModel) -> Vec<f64> {
    let mut out = Vec::new();
    for s in &net.stages {
        out.extend(&s.kernel.weights);
        out.extend(s.kernel.bias.as_deref().unwrap_or(&[]));
        out.extend(&s.gdn_beta);
        out.extend(&s.gdn_gamma);
    }
    out.extend(&net.head_weight);
    out.push(net.head_bias);
    out
}

fn unflatten_params(net: &mut CnnModel, params: &[f64]) {
    let mut it = params.iter().copied();
    let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
    for s in &mut net.stages {
        let k = Arc::make_mut(&mut s.kernel);
        k.weights = take(k.weights.len());
        k.bias = k.bias.as_ref().map(|b| take(b.len()));
        // GDN needs b > 0 and w >= 0.
        s.gdn_beta = take(s.gdn_beta.len()).into_iter().map(|b| b.max(1e-4)).collect();
        s.gdn_gamma = take(s.gdn_gamma.len()).into_iter().map(|w| w.max(0.0)).collect();
    }
    net.head_weight = take(net.head_weight.len());
    net.head_bias = take(1)[0];
}

/// Adds the gradient of `(raw - target)^2` to `grad` (layout of [`flatten_params`]).
fn cnn_gradient(net: &CnnModel, x: &ImageTensor, target: f64, grad: &mut [f64]) -> Result<()> {
    let mut g = Graph::new();
    let xv = g.leaf(x.to_planar());
    let (pooled, trace) = net.traced_graph(&mut g, xv)?;
    let p = g.value(pooled).data().to_vec();
    let raw = net.head_bias + p.iter().zip(&net.head_weight).map(|(a, w)| a * w).sum::<f64>();
    let draw = 2.0 * (raw - target);
    let seed: Vec<f64> = net.head_weight.iter().map(|w| draw * w).collect();
    let root = g.dot_const(pooled, &seed)?;
    let adj = g.backward(root)?;
    let mut at = 0;
    let mut add = |vals: &[f64]| {
        for (a, v) in grad[at..at + vals.len()].iter_mut().zip(vals) {
            *a += v;
        }
        at += vals.len();
    };
    for (s, [z, beta, gamma]) in net.stages.iter().zip(&trace) {
        let (gw, gb) = g.conv2d_parameter_gradient(*z, &adj)?;
        add(&gw);
        if s.kernel.bias.is_some() {
            add(&gb);
        }
        add(adj.wrt(*beta)?.data());
        add(adj.wrt(*gamma)?.data());
    }
    let head: Vec<f64> = p.iter().map(|v| draw * v).collect();
    add(&head);
    add(&[draw]);
    Ok(())
}

struct Adam {
    rate: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;

    fn new(rate: f64, n: usize) -> Self {
        Self {
            rate,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(&mut self.v)) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= self.rate * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
        }
    }
}

/// Ridge regression with an unpenalized intercept.
pub fn ridge(features: &[Vec<f64>], targets: &[f64], strength: f64) -> Result<(Vec<f64>, f64)> {
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    if n == 0 || d == 0 || targets.len() != n {
        return Err(Error::invalid("ridge regression needs matching non-empty data"));
    }
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
    let ty = targets.iter().sum::<f64>() / n as f64;
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j] - mean[j]);
    let y = DVector::from_iterator(n, targets.iter().map(|t| t - ty));
    let xtx = x.transpose() * &x;
    let mu = strength * (xtx.trace() / d as f64).max(1e-12);
    let w = solve_spd(xtx + DMatrix::identity(d, d) * mu, x.transpose() * y)?;
    let b = ty - w.iter().zip(&mean).map(|(a, m)| a * m).sum::<f64>();
    Ok((w.iter().copied().collect(), b))
}

fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::NonFinite("regularized normal equations are not positive definite".into()))?;
    Ok(chol.solve(&b))
}
