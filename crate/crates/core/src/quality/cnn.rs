//! Small convolutional regressor: strided `3x3` stages with divisive
//! normalization, two-level spatial pyramid max pooling and a linear head.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvKernel, Graph, ImageTensor, Padding, Tensor, Var};
use crate::weights::{WeightError, WeightFile};

pub const WIDTHS: [usize; 3] = [8, 16, 32];
pub const PYRAMID: [usize; 2] = [1, 2];

#[derive(Debug, Clone, PartialEq)]
pub struct CnnStage {
    pub kernel: Arc<ConvKernel>,
    /// Per-channel `b` and `w` of `y = z / sqrt(b + w z^2)`.
    pub gdn_beta: Vec<f64>,
    pub gdn_gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub stages: Vec<CnnStage>,
    pub head_weight: Vec<f64>,
    pub head_bias: f64,
}

/// Pooled cells per channel over the pyramid levels.
pub fn cells_per_channel() -> usize {
    PYRAMID.iter().map(|l| l * l).sum()
}

impl CnnModel {
    /// Seeded He-uniform stages, GDN `b = 0.1`, random `w` and a zero head.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut stages = Vec::new();
        for &cout in &WIDTHS {
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            let weights = (0..cout * cin * 9).map(|_| rng.gen_range(-bound..bound)).collect();
            let bias = (0..cout).map(|_| rng.gen_range(-0.05..0.05)).collect();
            stages.push(CnnStage {
                kernel: Arc::new(ConvKernel::new(cout, cin, 3, 3, weights, Some(bias)).expect("stage")),
                gdn_beta: vec![0.1; cout],
                gdn_gamma: (0..cout).map(|_| rng.gen_range(0.5..2.0)).collect(),
            });
            cin = cout;
        }
        Self {
            stages,
            head_weight: vec![0.0; cin * cells_per_channel()],
            head_bias: 0.0,
        }
    }

    pub fn feature_len(&self) -> usize {
        self.stages.last().map_or(0, |s| s.kernel.out_channels) * cells_per_channel()
    }

    pub fn from_weights(w: &WeightFile) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = 3;
        while w.contains(&format!("cnn.stage{}.weight", stages.len())) {
            let i = stages.len();
            let name = format!("cnn.stage{i}.weight");
            let dims = w.get(&name)?.dims.clone();
            if dims.len() != 4 || dims[1] != cin || dims[2] % 2 == 0 || dims[3] % 2 == 0 {
                return Err(WeightError::Invalid {
                    name,
                    reason: format!("expected [out, {cin}, k, k] with odd k, found {dims:?}"),
                }
                .into());
            }
            let co = dims[0];
            let weights = w.values(&name, &dims)?;
            let bias = w.values(&format!("cnn.stage{i}.bias"), &[co])?;
            let beta_name = format!("cnn.stage{i}.gdn_beta");
            let gdn_beta = w.values(&beta_name, &[co])?;
            let gdn_gamma = w.values(&format!("cnn.stage{i}.gdn_gamma"), &[co])?;
            if gdn_beta.iter().any(|b| *b <= 0.0) || gdn_gamma.iter().any(|v| *v < 0.0) {
                return Err(WeightError::Invalid {
                    name: beta_name,
                    reason: "GDN needs beta > 0 and gamma >= 0".into(),
                }
                .into());
            }
            let kernel = ConvKernel::new(co, cin, dims[2], dims[3], weights, Some(bias))?;
            stages.push(CnnStage {
                kernel: Arc::new(kernel),
                gdn_beta,
                gdn_gamma,
            });
            cin = co;
        }
        if stages.is_empty() {
            return Err(WeightError::Missing("cnn.stage0.weight".into()).into());
        }
        let n = cin * cells_per_channel();
        Ok(Self {
            stages,
            head_weight: w.values("cnn.head.weight", &[n])?,
            head_bias: w.scalar("cnn.head.bias")?,
        })
    }

    pub fn to_weights(&self) -> WeightFile {
        let mut w = WeightFile::new();
        for (i, s) in self.stages.iter().enumerate() {
            let k = &s.kernel;
            w.insert(
                format!("cnn.stage{i}.weight"),
                &[k.out_channels, k.in_channels, k.height, k.width],
                &k.weights,
            );
            let zeros = vec![0.0; k.out_channels];
            w.insert(
                format!("cnn.stage{i}.bias"),
                &[k.out_channels],
                k.bias.as_deref().unwrap_or(&zeros),
            );
            w.insert(format!("cnn.stage{i}.gdn_beta"), &[k.out_channels], &s.gdn_beta);
            w.insert(format!("cnn.stage{i}.gdn_gamma"), &[k.out_channels], &s.gdn_gamma);
        }
        w.insert("cnn.head.weight", &[self.head_weight.len()], &self.head_weight);
        w.insert("cnn.head.bias", &[1], &[self.head_bias]);
        w
    }

    /// Pyramid-pooled features of the last stage, flattened.
    pub fn pooled_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.traced_graph(g, x)?.0)
    }

    /// As [`Self::pooled_graph`], also returning the convolution, GDN `b` and
    /// GDN `w` nodes of every stage.
    pub(crate) fn traced_graph(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<[Var; 3]>)> {
        let mut cur = match g.shape(x).channels {
            3 => x,
            1 => g.concat(&[x, x, x])?,
            c => return Err(Error::invalid(format!("expected 1 or 3 channels, got {c}"))),
        };
        let mut trace = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let z = g.conv2d(cur, s.kernel.clone(), 2, Padding::Same)?;
            let beta = g.leaf(Tensor::vector(s.gdn_beta.clone())?);
            let gamma = g.leaf(Tensor::vector(s.gdn_gamma.clone())?);
            trace.push([z, beta, gamma]);
            let z2 = g.mul(z, z)?;
            let wz2 = g.mul(z2, gamma)?;
            let den = g.add(wz2, beta)?;
            let den = g.sqrt(den);
            cur = g.div(z, den)?;
        }
        let s = g.shape(cur);
        let top = *PYRAMID.iter().max().expect("pyramid levels");
        if s.height < top || s.width < top {
            return Err(Error::invalid(format!(
                "input too small: last feature map is {}x{}",
                s.height, s.width
            )));
        }
        let mut parts = Vec::with_capacity(cells_per_channel());
        for &level in &PYRAMID {
            // Max over each cell; cells overlap by one row or column when the
            // map does not divide evenly.
            for i in 0..level {
                for j in 0..level {
                    let (y0, y1) = (i * s.height / level, ((i + 1) * s.height).div_ceil(level));
                    let (x0, x1) = (j * s.width / level, ((j + 1) * s.width).div_ceil(level));
                    let cell = g.crop(cur, y0, x0, y1 - y0, x1 - x0)?;
                    parts.push(g.max_spatial(cell));
                }
            }
        }
        Ok((g.concat(&parts)?, trace))
    }

    pub fn raw_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let pooled = self.pooled_graph(g, x)?;
        let out = g.dot_const(pooled, &self.head_weight)?;
        Ok(g.offset(out, self.head_bias))
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
