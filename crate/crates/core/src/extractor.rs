//! Compact convolutional feature extractor backing the deep-feature distances.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvKernel, Graph, Padding, Var};
use crate::weights::{WeightError, WeightFile};

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorStage {
    pub kernel: Arc<ConvKernel>,
    pub stride: usize,
}

/// Stack of `conv -> rectifier` stages plus the per-stage weighting used by
/// the feature distances.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub stages: Vec<ExtractorStage>,
    /// One weight per stage for the normalized-feature distance.
    pub l2_weights: Vec<f64>,
    /// One weight per feature channel (all stages, in order) for the texture term.
    pub texture_weights: Vec<f64>,
    /// One weight per feature channel for the structure term.
    pub structure_weights: Vec<f64>,
}

impl FeatureExtractor {
    pub fn from_weights(w: &WeightFile) -> Result<Self> {
        let mut stages = Vec::new();
        let mut in_channels = 3;
        while w.contains(&format!("fx.stage{}.weight", stages.len())) {
            let i = stages.len();
            let name = format!("fx.stage{i}.weight");
            let dims = w.get(&name)?.dims.clone();
            if dims.len() != 4 || dims[1] != in_channels {
                return Err(WeightError::Invalid {
                    name,
                    reason: format!("expected [out, {in_channels}, k, k], found {dims:?}"),
                }
                .into());
            }
            let weights = w.values(&name, &dims)?;
            let bias = w.values(&format!("fx.stage{i}.bias"), &[dims[0]])?;
            let stride = w.scalar(&format!("fx.stage{i}.stride"))?;
            if stride < 1.0 || stride.fract() != 0.0 {
                return Err(Error::invalid(format!("fx.stage{i}.stride must be a positive integer")));
            }
            let kernel = ConvKernel::new(dims[0], dims[1], dims[2], dims[3], weights, Some(bias))?;
            stages.push(ExtractorStage {
                kernel: Arc::new(kernel),
                stride: stride as usize,
            });
            in_channels = dims[0];
        }
        if stages.is_empty() {
            return Err(WeightError::Missing("fx.stage0.weight".into()).into());
        }
        let total: usize = stages.iter().map(|s| s.kernel.out_channels).sum();
        Ok(Self {
            l2_weights: w.values("fx.l2_weights", &[stages.len()])?,
            texture_weights: w.values("fx.texture_weights", &[total])?,
            structure_weights: w.values("fx.structure_weights", &[total])?,
            stages,
        })
    }

    pub fn to_weights(&self) -> WeightFile {
        let mut w = WeightFile::new();
        for (i, s) in self.stages.iter().enumerate() {
            let k = &s.kernel;
            w.insert(
                format!("fx.stage{i}.weight"),
                &[k.out_channels, k.in_channels, k.height, k.width],
                &k.weights,
            );
            let zeros = vec![0.0; k.out_channels];
            w.insert(
                format!("fx.stage{i}.bias"),
                &[k.out_channels],
                k.bias.as_deref().unwrap_or(&zeros),
            );
            w.insert(format!("fx.stage{i}.stride"), &[1], &[s.stride as f64]);
        }
        w.insert("fx.l2_weights", &[self.l2_weights.len()], &self.l2_weights);
        w.insert("fx.texture_weights", &[self.texture_weights.len()], &self.texture_weights);
        w.insert("fx.structure_weights", &[self.structure_weights.len()], &self.structure_weights);
        w
    }

    /// Seeded random `3x3` stride-2 stack with the given channel widths.
    ///
    /// Weights are He-scaled uniform draws; the distance weights are uniform
    /// and each pair of texture/structure weight vectors sums to one overall.
    pub fn random(seed: u64, widths: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(widths.len());
        let mut cin = 3;
        for &cout in widths {
            let fan_in = (cin * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let weights = (0..cout * cin * 9).map(|_| rng.gen_range(-bound..bound)).collect();
            let bias = (0..cout).map(|_| rng.gen_range(0.0..0.05)).collect();
            let kernel = ConvKernel::new(cout, cin, 3, 3, weights, Some(bias)).expect("random stage");
            stages.push(ExtractorStage {
                kernel: Arc::new(kernel),
                stride: 2,
            });
            cin = cout;
        }
        let total: usize = widths.iter().sum();
        let n = widths.len() as f64;
        Self {
            stages,
            l2_weights: vec![1.0 / n; widths.len()],
            texture_weights: vec![0.5 / total as f64; total],
            structure_weights: vec![0.5 / total as f64; total],
        }
    }

    /// A single stride-1 `1x1` identity stage over three channels.
    pub fn identity() -> Self {
        let mut weights = vec![0.0; 9];
        for c in 0..3 {
            weights[c * 3 + c] = 1.0;
        }
        let kernel = ConvKernel::new(3, 3, 1, 1, weights, Some(vec![0.0; 3])).expect("identity");
        Self {
            stages: vec![ExtractorStage {
                kernel: Arc::new(kernel),
                stride: 1,
            }],
            l2_weights: vec![1.0],
            texture_weights: vec![1.0 / 6.0; 3],
            structure_weights: vec![1.0 / 6.0; 3],
        }
    }

    pub fn channel_count(&self) -> usize {
        self.stages.iter().map(|s| s.kernel.out_channels).sum()
    }

    /// Rectified output of every stage for a `(3, h, w)` input.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut cur = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let z = g.conv2d(cur, s.kernel.clone(), s.stride, Padding::Same)?;
            cur = g.relu(z)?;
            out.push(cur);
        }
        Ok(out)
    }
}
