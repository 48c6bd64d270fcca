//! Robustness metrics: rank correlation over initial and counterexample
//! images, the stability ratio, and intra/inter-model transfer grids.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fidelity::MeasureKind;
use crate::quality::{BETA1, BETA2};
use crate::quality::{ModelKind, QualityModel};
use crate::tensor::ImageTensor;

/// 1-based fractional ranks; tied values share the mean of their positions.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            out[k] = rank;
        }
        i = j;
    }
    out
}

/// Spearman rank-order correlation: Pearson correlation of fractional ranks.
pub fn srcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(format!(
            "rank correlation needs two equal-length lists of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank correlation input".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::invalid("rank correlation of a constant list is undefined"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean log ratio of the largest allowable change to the actual change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    /// `None` when every item had a zero change.
    pub value: Option<f64>,
    pub used: usize,
    /// Items skipped because the prediction did not move.
    pub excluded: usize,
}

/// `R = mean ln(max(β1 - f, f - β2) / |f - f*|)` with β1 = 10, β2 = 0.
pub fn stability_ratio(initial: &[f64], attacked: &[f64]) -> Result<Stability> {
    if initial.len() != attacked.len() || initial.is_empty() {
        return Err(Error::invalid(format!(
            "stability ratio needs equal non-empty lists, got {} and {}",
            initial.len(),
            attacked.len()
        )));
    }
    let mut sum = 0.0;
    let mut used = 0;
    let mut excluded = 0;
    for (&f, &fa) in initial.iter().zip(attacked) {
        for v in [f, fa] {
            if !(BETA2..=BETA1).contains(&v) {
                return Err(Error::invalid(format!("prediction {v} outside [{BETA2}, {BETA1}]")));
            }
        }
        let delta = (f - fa).abs();
        if delta == 0.0 {
            excluded += 1;
            continue;
        }
        sum += ((BETA1 - f).max(f - BETA2) / delta).ln();
        used += 1;
    }
    if excluded > 0 {
        log::warn!("stability ratio: {excluded} item(s) with zero change excluded");
    }
    Ok(Stability {
        value: (used > 0).then(|| sum / used as f64),
        used,
        excluded,
    })
}

/// An initial image with its opinion score.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub image: ImageTensor,
    pub mos: f64,
}

/// The counterexample chosen for one image against one source model under
/// one measure; `None` when screening found nothing below threshold.
#[derive(Debug, Clone)]
pub struct Selection {
    pub subject: String,
    pub source: ModelKind,
    pub measure: MeasureKind,
    pub counterexample: Option<ImageTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub attacked: ModelKind,
    /// `None` for the unattacked baseline row.
    pub source: Option<ModelKind>,
    pub measure: Option<MeasureKind>,
    /// `None` marks an absent cell (some counterexample is missing).
    pub srcc: Option<f64>,
    pub stability: Option<Stability>,
    pub mean_abs_delta: Option<f64>,
}

impl TransferCell {
    pub fn is_intra(&self) -> bool {
        self.source == Some(self.attacked)
    }

    pub fn is_absent(&self) -> bool {
        self.source.is_some() && self.srcc.is_none()
    }
}

/// Every (attacked, source, measure) cell plus one unattacked baseline per model.
///
/// Counterexamples inherit the opinion score of their initial image, so the
/// rank correlation runs over `2 S` points.
pub fn transfer_matrix(
    models: &[QualityModel],
    measures: &[MeasureKind],
    subjects: &[Subject],
    selections: &[Selection],
) -> Result<Vec<TransferCell>> {
    if subjects.is_empty() {
        return Err(Error::invalid("transfer matrix needs at least one image"));
    }
    let mos: Vec<f64> = subjects.iter().map(|s| s.mos).collect();
    let mut cells = Vec::new();
    for attacked in models {
        let initial = subjects
            .iter()
            .map(|s| attacked.score(&s.image))
            .collect::<Result<Vec<_>>>()?;
        cells.push(TransferCell {
            attacked: attacked.kind(),
            source: None,
            measure: None,
            srcc: srcc(&initial, &mos).ok(),
            stability: None,
            mean_abs_delta: Some(0.0),
        });
        for &measure in measures {
            for source in models.iter().map(QualityModel::kind) {
                let found: Option<Vec<&ImageTensor>> = subjects
                    .iter()
                    .map(|s| {
                        selections
                            .iter()
                            .find(|c| c.subject == s.id && c.source == source && c.measure == measure)
                            .and_then(|c| c.counterexample.as_ref())
                    })
                    .collect();
                let mut cell = TransferCell {
                    attacked: attacked.kind(),
                    source: Some(source),
                    measure: Some(measure),
                    srcc: None,
                    stability: None,
                    mean_abs_delta: None,
                };
                if let Some(found) = found {
                    let attacked_scores = found
                        .iter()
                        .map(|x| attacked.score(x))
                        .collect::<Result<Vec<_>>>()?;
                    let union: Vec<f64> = initial.iter().chain(&attacked_scores).copied().collect();
                    let union_mos: Vec<f64> = mos.iter().chain(&mos).copied().collect();
                    cell.srcc = srcc(&union, &union_mos).ok();
                    cell.stability = Some(stability_ratio(&initial, &attacked_scores)?);
                    let total: f64 = initial.iter().zip(&attacked_scores).map(|(a, b)| (a - b).abs()).sum();
                    cell.mean_abs_delta = Some(total / initial.len() as f64);
                }
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

/// Mean |Δq| over intra-model and inter-model cells, skipping absent ones.
pub fn intra_inter_means(cells: &[TransferCell]) -> (Option<f64>, Option<f64>) {
    let mean = |intra: bool| {
        let v: Vec<f64> = cells
            .iter()
            .filter(|c| c.source.is_some() && c.is_intra() == intra)
            .filter_map(|c| c.mean_abs_delta)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    (mean(true), mean(false))
}

/// Tab-separated report; unattacked rows list `none` as the source and `inf` for R.
pub fn report_tsv(cells: &[TransferCell]) -> String {
    let mut out = String::from("# R uses the natural logarithm; absent cells are marked '-'\n");
    out.push_str("attacked\tsource\tmeasure\tsrcc\tR\tR_used\tR_excluded\tmean_abs_delta\n");
    let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
    for c in cells {
        let (source, measure) = match (c.source, c.measure) {
            (Some(s), Some(m)) => (s.id().to_string(), m.id().to_string()),
            _ => ("none".to_string(), "-".to_string()),
        };
        let (r, used, excluded) = match (c.source, c.stability) {
            (None, _) => ("inf".to_string(), "-".to_string(), "-".to_string()),
            (Some(_), Some(s)) => (num(s.value), s.used.to_string(), s.excluded.to_string()),
            (Some(_), None) => ("-".to_string(), "-".to_string(), "-".to_string()),
        };
        let _ = writeln!(
            out,
            "{}\t{source}\t{measure}\t{}\t{r}\t{used}\t{excluded}\t{}",
            c.attacked.id(),
            num(c.srcc),
            num(c.mean_abs_delta)
        );
    }
    out
}

/// `|x0 - x| * gain`, clamped and quantized for display.
pub fn residual_map(x0: &ImageTensor, x: &ImageTensor, gain: f64) -> Result<ImageTensor> {
    let mut d = x0.abs_diff(x)?;
    for v in d.data_mut() {
        *v *= gain;
    }
    Ok(d.quantized())
}
