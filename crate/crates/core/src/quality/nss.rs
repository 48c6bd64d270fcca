//! Natural-scene-statistics regressor: MSCN moments at two scales fed to an
//! RBF support vector regressor.

use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::fidelity::{gaussian_taps, luminance};
use crate::tensor::{Graph, ImageTensor, Shape, Tensor, Var};
use crate::weights::{WeightError, WeightFile};

pub const WINDOW: usize = 7;
pub const WINDOW_SIGMA: f64 = 7.0 / 6.0;
pub const MSCN_C: f64 = 1.0 / 255.0;
/// 5 fields (the MSCN map and four neighbor products) x 4 moments x 2 scales.
pub const FEATURES: usize = 40;
/// Two scales of the 7-tap window, with room for one neighbor product at the coarse scale.
pub const MIN_SIZE: usize = 16;

const SIGMA_FLOOR: f64 = 1e-8;

fn window_taps() -> &'static Arc<[f64]> {
    static TAPS: OnceLock<Arc<[f64]>> = OnceLock::new();
    TAPS.get_or_init(|| gaussian_taps(WINDOW, WINDOW_SIGMA))
}

fn half_taps() -> &'static Arc<[f64]> {
    static TAPS: OnceLock<Arc<[f64]>> = OnceLock::new();
    TAPS.get_or_init(|| Arc::from(vec![0.5, 0.5]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NssModel {
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    /// Support vectors, `[K, FEATURES]` row-major.
    pub support: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: f64,
    pub bias: f64,
    /// Support laid out `(FEATURES, K, 1)` for broadcasting on the tape.
    support_t: Tensor,
}

impl NssModel {
    pub fn new(
        feature_mean: Vec<f64>,
        feature_scale: Vec<f64>,
        support: Vec<f64>,
        alpha: Vec<f64>,
        gamma: f64,
        bias: f64,
    ) -> Result<Self> {
        let k = alpha.len();
        if k == 0 || support.len() != k * FEATURES {
            return Err(Error::invalid(format!(
                "support has {} values for {k} coefficients",
                support.len()
            )));
        }
        if feature_mean.len() != FEATURES || feature_scale.len() != FEATURES {
            return Err(Error::invalid("feature standardization must have 40 entries"));
        }
        if feature_scale.iter().any(|s| *s <= 0.0) || gamma <= 0.0 {
            return Err(Error::invalid("feature scales and gamma must be positive"));
        }
        let support_t = Tensor::from_fn(Shape::new(FEATURES, k, 1), |f, j, _| support[j * FEATURES + f]);
        Ok(Self {
            feature_mean,
            feature_scale,
            support,
            alpha,
            gamma,
            bias,
            support_t,
        })
    }

    pub fn support_count(&self) -> usize {
        self.alpha.len()
    }

    pub fn from_weights(w: &WeightFile) -> Result<Self> {
        let k = w.get("nss.alpha")?.dims.first().copied().unwrap_or(0);
        let model = Self::new(
            w.values("nss.feature_mean", &[FEATURES])?,
            w.values("nss.feature_scale", &[FEATURES])?,
            w.values("nss.support", &[k, FEATURES])?,
            w.values("nss.alpha", &[k])?,
            w.scalar("nss.gamma")?,
            w.scalar("nss.bias")?,
        );
        model.map_err(|e| {
            WeightError::Invalid {
                name: "nss".into(),
                reason: e.to_string(),
            }
            .into()
        })
    }

    pub fn to_weights(&self) -> WeightFile {
        let k = self.support_count();
        let mut w = WeightFile::new();
        w.insert("nss.feature_mean", &[FEATURES], &self.feature_mean);
        w.insert("nss.feature_scale", &[FEATURES], &self.feature_scale);
        w.insert("nss.support", &[k, FEATURES], &self.support);
        w.insert("nss.alpha", &[k], &self.alpha);
        w.insert("nss.gamma", &[1], &[self.gamma]);
        w.insert("nss.bias", &[1], &[self.bias]);
        w
    }

    /// Standardized features through the RBF expansion.
    pub fn raw_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let feats = features_graph(g, x)?;
        let mean = g.leaf(Tensor::vector(self.feature_mean.clone())?);
        let inv = g.leaf(Tensor::vector(self.feature_scale.iter().map(|s| 1.0 / s).collect())?);
        let centered = g.sub(feats, mean)?;
        let z = g.mul(centered, inv)?;
        let support = g.leaf(self.support_t.clone());
        let diff = g.sub(z, support)?;
        let sq = g.mul(diff, diff)?;
        let dist = g.sum_channels(sq);
        let arg = g.scale(dist, -self.gamma);
        let kernel = g.exp(arg);
        let out = g.dot_const(kernel, &self.alpha)?;
        Ok(g.offset(out, self.bias))
    }

    pub fn score(&self, x: &ImageTensor) -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.leaf(x.to_planar());
        let out = self.raw_graph(&mut g, xv)?;
        Ok(g.forward(out)?)
    }
}

/// The 40 moment features of an image, evaluated without a model.
pub fn features(x: &ImageTensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.leaf(x.to_planar());
    let f = features_graph(&mut g, xv)?;
    Ok(g.value(f).data().to_vec())
}

/// Feature vector `(40, 1, 1)` of a planar image.
pub fn features_graph(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x);
    if s.height < MIN_SIZE || s.width < MIN_SIZE {
        return Err(Error::invalid(format!(
            "NSS features need at least {MIN_SIZE}x{MIN_SIZE} pixels, got {}x{}",
            s.height, s.width
        )));
    }
    let fine = luminance(g, x)?;
    let coarse = g.window_filter(fine, half_taps(), 2)?;
    let mut stats = Vec::with_capacity(FEATURES);
    for img in [fine, coarse] {
        let m = mscn(g, img)?;
        let ms = g.shape(m);
        let (h, w) = (ms.height, ms.width);
        let mut fields = vec![m];
        // horizontal, vertical, main diagonal, anti-diagonal neighbors
        for (a, b, dims) in [
            ((0, 0), (0, 1), (h, w - 1)),
            ((0, 0), (1, 0), (h - 1, w)),
            ((0, 0), (1, 1), (h - 1, w - 1)),
            ((0, 1), (1, 0), (h - 1, w - 1)),
        ] {
            let p = g.crop(m, a.0, a.1, dims.0, dims.1)?;
            let q = g.crop(m, b.0, b.1, dims.0, dims.1)?;
            fields.push(g.mul(p, q)?);
        }
        for f in fields {
            stats.extend(moments(g, f)?);
        }
    }
    Ok(g.concat(&stats)?)
}

/// Mean-subtracted contrast-normalized field over the valid window positions.
pub fn mscn(g: &mut Graph, img: Var) -> Result<Var> {
    let s = g.shape(img);
    let taps = window_taps();
    let mu = g.window_filter(img, taps, 1)?;
    let sq = g.mul(img, img)?;
    let ex2 = g.window_filter(sq, taps, 1)?;
    let mu2 = g.mul(mu, mu)?;
    let var = g.sub(ex2, mu2)?;
    let var = g.offset(var, SIGMA_FLOOR);
    let sigma = g.sqrt(var);
    let half = WINDOW / 2;
    let center = g.crop(img, half, half, s.height - 2 * half, s.width - 2 * half)?;
    let num = g.sub(center, mu)?;
    let den = g.offset(sigma, MSCN_C);
    Ok(g.div(num, den)?)
}

/// Mean, variance and the means of the positive and negative parts.
fn moments(g: &mut Graph, z: Var) -> Result<[Var; 4]> {
    let mean = g.mean(z);
    let zz = g.mul(z, z)?;
    let ez2 = g.mean(zz);
    let mean2 = g.mul(mean, mean)?;
    let var = g.sub(ez2, mean2)?;
    let pos = g.relu(z)?;
    let pos = g.mean(pos);
    let nz = g.neg(z);
    let neg = g.relu(nz)?;
    let neg = g.mean(neg);
    Ok([mean, var, pos, neg])
}
