//! Codebook model: contrast-normalized patch responses against a bank of
//! zero-mean unit-norm atoms, rectified into two channels each, max-pooled
//! over the image and read out linearly.

use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::fidelity::luminance;
use crate::tensor::{ConvKernel, Graph, ImageTensor, Padding, Tensor, Var};
use crate::weights::{WeightError, WeightFile};

pub const PATCH: usize = 7;
pub const STRIDE: usize = 2;
pub const DEFAULT_ATOMS: usize = 64;
/// Contrast stabilizer added to the patch variance.
pub const KAPPA: f64 = 10.0 / (255.0 * 255.0);

fn box_taps() -> &'static Arc<[f64]> {
    static TAPS: OnceLock<Arc<[f64]>> = OnceLock::new();
    TAPS.get_or_init(|| Arc::from(vec![1.0 / PATCH as f64; PATCH]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookModel {
    /// `(P, 1, 7, 7)` atoms without bias.
    pub atoms: Arc<ConvKernel>,
    /// Readout over `[relu(r_1..r_P), relu(-r_1..-r_P)]`.
    pub weight: Vec<f64>,
    pub bias: f64,
    atom_sums: Tensor,
}

impl CodebookModel {
    pub fn new(atoms: Vec<f64>, count: usize, weight: Vec<f64>, bias: f64) -> Result<Self> {
        if weight.len() != 2 * count {
            return Err(Error::invalid(format!(
                "readout has {} weights for {count} atoms",
                weight.len()
            )));
        }
        let kernel = ConvKernel::new(count, 1, PATCH, PATCH, atoms, None)?;
        let sums = kernel
            .weights
            .chunks_exact(PATCH * PATCH)
            .map(|a| a.iter().sum())
            .collect();
        Ok(Self {
            atoms: Arc::new(kernel),
            weight,
            bias,
            atom_sums: Tensor::vector(sums)?,
        })
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.out_channels
    }

    pub fn atom(&self, p: usize) -> &[f64] {
        &self.atoms.weights[p * PATCH * PATCH..(p + 1) * PATCH * PATCH]
    }

    pub fn from_weights(w: &WeightFile) -> Result<Self> {
        let p = w.get("cb.atoms")?.dims.first().copied().unwrap_or(0);
        let atoms = w.values("cb.atoms", &[p, 1, PATCH, PATCH])?;
        let weight = w.values("cb.weight", &[2 * p])?;
        let bias = w.scalar("cb.bias")?;
        Self::new(atoms, p, weight, bias).map_err(|e| {
            WeightError::Invalid {
                name: "cb.atoms".into(),
                reason: e.to_string(),
            }
            .into()
        })
    }

    pub fn to_weights(&self) -> WeightFile {
        let p = self.atom_count();
        let mut w = WeightFile::new();
        w.insert("cb.atoms", &[p, 1, PATCH, PATCH], &self.atoms.weights);
        w.insert("cb.weight", &[2 * p], &self.weight);
        w.insert("cb.bias", &[1], &[self.bias]);
        w
    }

    /// Normalized responses `(P, oh, ow)` on the stride grid.
    pub fn responses_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.height < PATCH || s.width < PATCH {
            return Err(Error::invalid(format!(
                "codebook needs at least {PATCH}x{PATCH} pixels, got {}x{}",
                s.height, s.width
            )));
        }
        let gray = luminance(g, x)?;
        let dots = g.conv2d(gray, self.atoms.clone(), STRIDE, Padding::Valid)?;
        let mu = g.window_filter(gray, box_taps(), STRIDE)?;
        let sums = g.leaf(self.atom_sums.clone());
        let shift = g.mul(mu, sums)?;
        let centered = g.sub(dots, shift)?;
        let sq = g.mul(gray, gray)?;
        let ex2 = g.window_filter(sq, box_taps(), STRIDE)?;
        let mu2 = g.mul(mu, mu)?;
        let var = g.sub(ex2, mu2)?;
        let var = g.offset(var, KAPPA);
        let energy = g.scale(var, (PATCH * PATCH) as f64);
        let norm = g.sqrt(energy);
        Ok(g.div(centered, norm)?)
    }

    /// Max-pooled rectified responses `(2P, 1, 1)`.
    pub fn pooled_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let r = self.responses_graph(g, x)?;
        let pos = g.relu(r)?;
        let nr = g.neg(r);
        let neg = g.relu(nr)?;
        let both = g.concat(&[pos, neg])?;
        Ok(g.max_spatial(both))
    }

    pub fn raw_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let pooled = self.pooled_graph(g, x)?;
        let out = g.dot_const(pooled, &self.weight)?;
        Ok(g.offset(out, self.bias))
    }

    pub fn pooled(&self, x: &ImageTensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.leaf(x.to_planar());
        let p = self.pooled_graph(&mut g, xv)?;
        Ok(g.value(p).data().to_vec())
    }

    pub fn score(&self, x: &ImageTensor) -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.leaf(x.to_planar());
        let out = self.raw_graph(&mut g, xv)?;
        Ok(g.forward(out)?)
    }
}

/// Zero-mean, unit-norm version of a patch; `None` for flat patches.
pub fn normalize_atom(patch: &[f64]) -> Option<Vec<f64>> {
    let mean = patch.iter().sum::<f64>() / patch.len() as f64;
    let centered: Vec<f64> = patch.iter().map(|v| v - mean).collect();
    let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm > 1e-6).then(|| centered.into_iter().map(|v| v / norm).collect())
}
