//! Four-parameter logistic mapping raw scores onto the `[0, 10]` scale.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

pub const BETA1: f64 = 10.0;
pub const BETA2: f64 = 0.0;

/// `q = (β1 − β2) / (1 + exp(−(raw − β3) / |β4|)) + β2` with β1, β2 pinned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationParams {
    pub beta3: f64,
    pub beta4: f64,
}

impl CalibrationParams {
    pub fn new(beta3: f64, beta4: f64) -> Result<Self> {
        if !beta3.is_finite() || !beta4.is_finite() || beta4 == 0.0 {
            return Err(Error::invalid(format!(
                "calibration needs finite β3 and nonzero β4, got {beta3}, {beta4}"
            )));
        }
        Ok(Self { beta3, beta4 })
    }

    pub fn beta1(&self) -> f64 {
        BETA1
    }

    pub fn beta2(&self) -> f64 {
        BETA2
    }

    pub fn calibrate(&self, raw: f64) -> Result<f64> {
        if !raw.is_finite() {
            return Err(Error::NonFinite(format!("raw score {raw}")));
        }
        Ok(self.eval(raw))
    }

    fn eval(&self, raw: f64) -> f64 {
        (BETA1 - BETA2) * crate::tensor::logistic((raw - self.beta3) / self.beta4.abs()) + BETA2
    }

    pub fn graph(&self, g: &mut Graph, raw: Var) -> Var {
        let z = g.offset(raw, -self.beta3);
        let z = g.scale(z, 1.0 / self.beta4.abs());
        let s = g.sigmoid(z);
        let q = g.scale(s, BETA1 - BETA2);
        g.offset(q, BETA2)
    }

    pub fn to_text(&self, model_id: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model = {model_id}");
        let _ = writeln!(out, "beta1 = {BETA1:?}");
        let _ = writeln!(out, "beta2 = {BETA2:?}");
        let _ = writeln!(out, "beta3 = {:?}", self.beta3);
        let _ = writeln!(out, "beta4 = {:?}", self.beta4);
        out
    }

    /// Parses the key/value text form; returns the params and the model id.
    pub fn from_text(text: &str) -> Result<(Self, String)> {
        let bad = |reason: String| Error::Format {
            what: "calibration file".into(),
            reason,
        };
        let mut model = None;
        let mut betas = [None; 4];
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "model" {
                model = Some(value.to_string());
                continue;
            }
            let slot = match key {
                "beta1" => 0,
                "beta2" => 1,
                "beta3" => 2,
                "beta4" => 3,
                other => return Err(bad(format!("unknown key {other:?}"))),
            };
            betas[slot] = Some(
                value
                    .parse::<f64>()
                    .map_err(|e| bad(format!("{key}: {e}")))?,
            );
        }
        let get = |i: usize, name: &str| betas[i].ok_or_else(|| bad(format!("missing {name}")));
        if get(0, "beta1")? != BETA1 || get(1, "beta2")? != BETA2 {
            return Err(bad("beta1 and beta2 are fixed at 10 and 0".into()));
        }
        let params = Self::new(get(2, "beta3")?, get(3, "beta4")?)?;
        Ok((params, model.ok_or_else(|| bad("missing model".into()))?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>, model_id: &str) -> Result<()> {
        fs::write(path, self.to_text(model_id))?;
        Ok(())
    }
}

fn sse(raw: &[f64], targets: &[f64], beta3: f64, scale: f64) -> f64 {
    raw.iter()
        .zip(targets)
        .map(|(&r, &t)| {
            let q = (BETA1 - BETA2) * crate::tensor::logistic((r - beta3) / scale) + BETA2;
            (q - t).powi(2)
        })
        .sum()
}

/// Scan `n` points over `[lo, hi]`, then golden-section inside the best bracket.
fn line_search(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> (f64, f64) {
    let step = (hi - lo) / (n - 1) as f64;
    let mut best = (lo, f(lo));
    let mut best_i = 0;
    for i in 1..n {
        let x = lo + step * i as f64;
        let v = f(x);
        if v < best.1 {
            best = (x, v);
            best_i = i;
        }
    }
    let mut a = lo + step * best_i.saturating_sub(1) as f64;
    let mut b = lo + step * (best_i + 1).min(n - 1) as f64;
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    for (x, v) in [(c, fc), (d, fd)] {
        if v < best.1 {
            best = (x, v);
        }
    }
    best
}

/// Least-squares fit of β3 and |β4| by coordinate descent.
///
/// The outer loop scans a log-spaced |β4| grid (reaching far enough that the
/// curve is effectively constant), optimizing β3 by line search for each
/// value; the best pair is then polished by alternating line searches.
pub fn fit_calibration(raw: &[f64], targets: &[f64]) -> Result<CalibrationParams> {
    if raw.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} raw scores but {} targets",
            raw.len(),
            targets.len()
        )));
    }
    if raw.len() < 4 {
        return Err(Error::invalid("calibration needs at least 4 pairs"));
    }
    if raw.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("calibration input".into()));
    }
    if targets.iter().any(|t| !(BETA2..=BETA1).contains(t)) {
        return Err(Error::invalid("calibration targets must lie in [0, 10]"));
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = hi - lo;
    if spread == 0.0 {
        return Err(Error::invalid("all raw scores are equal; β4 is unidentifiable"));
    }

    let beta3_for = |scale: f64| {
        // Beyond ±12 scales the logistic is saturated for every sample.
        let reach = 12.0 * scale;
        line_search(|b3| sse(raw, targets, b3, scale), lo - reach, hi + reach, 161)
    };

    let mut best = (f64::INFINITY, 0.0, 1.0);
    for k in 0..=160 {
        let scale = spread * 10f64.powf(-4.0 + 0.1 * k as f64);
        let (b3, v) = beta3_for(scale);
        if v < best.0 {
            best = (v, b3, scale);
        }
    }

    let (mut err, mut beta3, mut scale) = best;
    for _ in 0..60 {
        let prev = err;
        let ls = scale.ln();
        let (ls_new, v) = line_search(|l| sse(raw, targets, beta3, l.exp()), ls - 0.2, ls + 0.2, 21);
        if v < err {
            err = v;
            scale = ls_new.exp();
        }
        let reach = 0.5 * scale;
        let (b3, v) = line_search(|b| sse(raw, targets, b, scale), beta3 - reach, beta3 + reach, 21);
        if v < err {
            err = v;
            beta3 = b3;
        }
        if prev - err <= 1e-15 * prev.max(1e-300) {
            break;
        }
    }
    CalibrationParams::new(beta3, scale)
}
