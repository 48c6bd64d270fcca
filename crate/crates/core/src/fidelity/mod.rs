//! Differentiable full-reference distances `D(x, x0)`.
//!
//! All four measures follow "larger means more distorted": Chebyshev and the
//! normalized feature distance are zero at `x = x0`, while SSIM and the
//! structure/texture similarity are negated and reach `-1` there.

mod ssim;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use self::ssim::{gaussian_taps, ssim_graph, SsimParams};
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::tensor::{Graph, ImageTensor, Tensor, Var};

/// Fixed luminance weights of the grayscale front-end.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

const FEATURE_EPS: f64 = 1e-10;
const TEXTURE_C1: f64 = 1e-6;
const STRUCTURE_C2: f64 = 1e-6;

/// Norm whose unit ball defines the steepest-ascent direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AscentNorm {
    Linf,
    L2,
}

impl fmt::Display for AscentNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AscentNorm::Linf => "linf",
            AscentNorm::L2 => "l2",
        })
    }
}

impl FromStr for AscentNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" => Ok(AscentNorm::Linf),
            "l2" => Ok(AscentNorm::L2),
            other => Err(Error::invalid(format!("unknown norm {other:?} (linf|l2)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureKind {
    Chebyshev,
    #[serde(rename = "ssim")]
    NegSsim,
    FeatureL2,
    StructureTexture,
}

impl MeasureKind {
    pub const ALL: [MeasureKind; 4] = [
        MeasureKind::Chebyshev,
        MeasureKind::NegSsim,
        MeasureKind::FeatureL2,
        MeasureKind::StructureTexture,
    ];

    pub fn id(self) -> &'static str {
        match self {
            MeasureKind::Chebyshev => "chebyshev",
            MeasureKind::NegSsim => "ssim",
            MeasureKind::FeatureL2 => "feature-l2",
            MeasureKind::StructureTexture => "structure-texture",
        }
    }

    /// ℓ∞ ascent for the Chebyshev distance, gradient (ℓ2) ascent otherwise.
    pub fn ascent_norm(self) -> AscentNorm {
        match self {
            MeasureKind::Chebyshev => AscentNorm::Linf,
            _ => AscentNorm::L2,
        }
    }

    pub fn needs_extractor(self) -> bool {
        matches!(self, MeasureKind::FeatureL2 | MeasureKind::StructureTexture)
    }
}

impl fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for MeasureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chebyshev" => Ok(MeasureKind::Chebyshev),
            "ssim" | "neg-ssim" => Ok(MeasureKind::NegSsim),
            "feature-l2" | "lpips" => Ok(MeasureKind::FeatureL2),
            "structure-texture" | "dists" => Ok(MeasureKind::StructureTexture),
            other => Err(Error::invalid(format!(
                "unknown measure {other:?} (chebyshev|ssim|feature-l2|structure-texture)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FidelityMeasure {
    kind: MeasureKind,
    ssim: SsimParams,
    extractor: Option<Arc<FeatureExtractor>>,
}

impl FidelityMeasure {
    pub fn chebyshev() -> Self {
        Self {
            kind: MeasureKind::Chebyshev,
            ssim: SsimParams::default(),
            extractor: None,
        }
    }

    pub fn neg_ssim() -> Self {
        Self {
            kind: MeasureKind::NegSsim,
            ..Self::chebyshev()
        }
    }

    pub fn feature_l2(extractor: Arc<FeatureExtractor>) -> Self {
        Self {
            kind: MeasureKind::FeatureL2,
            ssim: SsimParams::default(),
            extractor: Some(extractor),
        }
    }

    pub fn structure_texture(extractor: Arc<FeatureExtractor>) -> Self {
        Self {
            kind: MeasureKind::StructureTexture,
            ssim: SsimParams::default(),
            extractor: Some(extractor),
        }
    }

    pub fn new(kind: MeasureKind, extractor: Option<Arc<FeatureExtractor>>) -> Result<Self> {
        match kind {
            MeasureKind::Chebyshev => Ok(Self::chebyshev()),
            MeasureKind::NegSsim => Ok(Self::neg_ssim()),
            k => {
                let ex = extractor
                    .ok_or_else(|| Error::invalid(format!("measure {k} needs a feature extractor")))?;
                Ok(if k == MeasureKind::FeatureL2 {
                    Self::feature_l2(ex)
                } else {
                    Self::structure_texture(ex)
                })
            }
        }
    }

    pub fn kind(&self) -> MeasureKind {
        self.kind
    }

    pub fn ascent_norm(&self) -> AscentNorm {
        self.kind.ascent_norm()
    }

    pub fn ssim_params(&self) -> &SsimParams {
        &self.ssim
    }

    /// Records `D(x, x0)` on the tape; `x` and `x0` are planar image nodes.
    pub fn graph(&self, g: &mut Graph, x: Var, x0: Var) -> Result<Var> {
        let (sx, s0) = (g.shape(x), g.shape(x0));
        if sx != s0 {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "fidelity",
                lhs: sx,
                rhs: s0,
            }
            .into());
        }
        match self.kind {
            MeasureKind::Chebyshev => {
                let d = g.sub(x, x0)?;
                let a = g.abs(d);
                Ok(g.max(a))
            }
            MeasureKind::NegSsim => {
                let gx = luminance(g, x)?;
                let g0 = luminance(g, x0)?;
                let s = ssim_graph(g, gx, g0, &self.ssim)?;
                Ok(g.neg(s))
            }
            MeasureKind::FeatureL2 => {
                let ex = self.extractor.as_deref().expect("constructor guarantees extractor");
                feature_l2_graph(g, ex, x, x0)
            }
            MeasureKind::StructureTexture => {
                let ex = self.extractor.as_deref().expect("constructor guarantees extractor");
                let (texture, structure) = structure_texture_graph(g, ex, x, x0)?;
                let total = g.add(texture, structure)?;
                Ok(g.neg(total))
            }
        }
    }

    pub fn distance(&self, x: &ImageTensor, x0: &ImageTensor) -> Result<f64> {
        x.check_dims("fidelity", x0)?;
        let mut g = Graph::new();
        let xv = g.leaf(x.to_planar());
        let x0v = g.leaf(x0.to_planar());
        let d = self.graph(&mut g, xv, x0v)?;
        Ok(g.forward(d)?)
    }
}

/// Grayscale front-end: fixed luminance weights for three channels, identity for one.
pub fn luminance(g: &mut Graph, x: Var) -> Result<Var> {
    match g.shape(x).channels {
        1 => Ok(x),
        3 => Ok(g.channel_weighted_sum(x, Arc::from(LUMA.to_vec()))?),
        c => Err(Error::invalid(format!("expected 1 or 3 channels, got {c}"))),
    }
}

pub fn chebyshev(x: &ImageTensor, x0: &ImageTensor) -> Result<f64> {
    FidelityMeasure::chebyshev().distance(x, x0)
}

pub fn neg_ssim(x: &ImageTensor, x0: &ImageTensor) -> Result<f64> {
    FidelityMeasure::neg_ssim().distance(x, x0)
}

pub fn feature_l2(x: &ImageTensor, x0: &ImageTensor, ex: Arc<FeatureExtractor>) -> Result<f64> {
    FidelityMeasure::feature_l2(ex).distance(x, x0)
}

pub fn structure_texture(
    x: &ImageTensor,
    x0: &ImageTensor,
    ex: Arc<FeatureExtractor>,
) -> Result<f64> {
    FidelityMeasure::structure_texture(ex).distance(x, x0)
}

/// Weighted texture and structure similarity terms (each 1 at `x = x0` when
/// the weights sum to one over both terms).
pub fn structure_texture_terms(
    x: &ImageTensor,
    x0: &ImageTensor,
    ex: &FeatureExtractor,
) -> Result<(f64, f64)> {
    x.check_dims("structure_texture", x0)?;
    let mut g = Graph::new();
    let xv = g.leaf(rgb_planar(x));
    let x0v = g.leaf(rgb_planar(x0));
    let (t, s) = structure_texture_graph(&mut g, ex, xv, x0v)?;
    let tw: f64 = ex.texture_weights.iter().sum();
    let sw: f64 = ex.structure_weights.iter().sum();
    Ok((g.forward(t)? / tw, g.forward(s)? / sw))
}

fn rgb_planar(x: &ImageTensor) -> Tensor {
    x.to_rgb().to_planar()
}

fn expand_rgb(g: &mut Graph, x: Var) -> Result<Var> {
    if g.shape(x).channels == 3 {
        Ok(x)
    } else {
        Ok(g.concat(&[x, x, x])?)
    }
}

/// Unit-normalizes features across channels at every position.
fn unit_normalize(g: &mut Graph, f: Var) -> Result<Var> {
    let sq = g.mul(f, f)?;
    let n2 = g.sum_channels(sq);
    let n2 = g.offset(n2, FEATURE_EPS);
    let n = g.sqrt(n2);
    Ok(g.div(f, n)?)
}

fn feature_l2_graph(g: &mut Graph, ex: &FeatureExtractor, x: Var, x0: Var) -> Result<Var> {
    let x = expand_rgb(g, x)?;
    let x0 = expand_rgb(g, x0)?;
    let fx = ex.features(g, x)?;
    let f0 = ex.features(g, x0)?;
    let mut total = None;
    for ((a, b), &w) in fx.into_iter().zip(f0).zip(&ex.l2_weights) {
        let na = unit_normalize(g, a)?;
        let nb = unit_normalize(g, b)?;
        let d = g.sub(na, nb)?;
        let d2 = g.mul(d, d)?;
        let per_pos = g.sum_channels(d2);
        let m = g.mean(per_pos);
        let term = g.scale(m, w);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::invalid("feature extractor has no stages"))
}

/// Returns the weighted sums of texture (mean) and structure (covariance) similarity.
fn structure_texture_graph(
    g: &mut Graph,
    ex: &FeatureExtractor,
    x: Var,
    x0: Var,
) -> Result<(Var, Var)> {
    let x = expand_rgb(g, x)?;
    let x0 = expand_rgb(g, x0)?;
    let fx = ex.features(g, x)?;
    let f0 = ex.features(g, x0)?;
    let mut offset = 0;
    let mut texture = Vec::new();
    let mut structure = Vec::new();
    for (a, b) in fx.into_iter().zip(f0) {
        let c = g.shape(a).channels;
        let ma = g.mean_spatial(a);
        let mb = g.mean_spatial(b);
        let aa = g.mul(a, a)?;
        let bb = g.mul(b, b)?;
        let ab = g.mul(a, b)?;
        let eaa = g.mean_spatial(aa);
        let ebb = g.mean_spatial(bb);
        let eab = g.mean_spatial(ab);
        let ma2 = g.mul(ma, ma)?;
        let mb2 = g.mul(mb, mb)?;
        let mab = g.mul(ma, mb)?;
        let va = g.sub(eaa, ma2)?;
        let vb = g.sub(ebb, mb2)?;
        let cov = g.sub(eab, mab)?;

        let l_num = g.scale(mab, 2.0);
        let l_num = g.offset(l_num, TEXTURE_C1);
        let l_den = g.add(ma2, mb2)?;
        let l_den = g.offset(l_den, TEXTURE_C1);
        let l = g.div(l_num, l_den)?;
        let s_num = g.scale(cov, 2.0);
        let s_num = g.offset(s_num, STRUCTURE_C2);
        let s_den = g.add(va, vb)?;
        let s_den = g.offset(s_den, STRUCTURE_C2);
        let s = g.div(s_num, s_den)?;

        texture.push(g.dot_const(l, &ex.texture_weights[offset..offset + c])?);
        structure.push(g.dot_const(s, &ex.structure_weights[offset..offset + c])?);
        offset += c;
    }
    Ok((sum_scalars(g, &texture)?, sum_scalars(g, &structure)?))
}

fn sum_scalars(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let v = g.concat(parts)?;
    Ok(g.sum(v))
}
