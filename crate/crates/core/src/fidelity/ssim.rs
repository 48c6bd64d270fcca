use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Window and stabilizer settings; the defaults are the canonical 11-tap
/// Gaussian with σ = 1.5, `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`, `L = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: 0.01f64.powi(2),
            c2: 0.03f64.powi(2),
        }
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Arc<[f64]> {
    let center = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mean SSIM over valid windows of two single-channel planes.
pub fn ssim_graph(g: &mut Graph, x: Var, y: Var, p: &SsimParams) -> Result<Var> {
    let s = g.shape(x);
    if s.height < p.window || s.width < p.window {
        return Err(Error::invalid(format!(
            "SSIM needs at least {0}x{0} pixels, got {1}x{2}",
            p.window, s.height, s.width
        )));
    }
    let taps = gaussian_taps(p.window, p.sigma);
    let mx = g.window_filter(x, &taps, 1)?;
    let my = g.window_filter(y, &taps, 1)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let exx = g.window_filter(xx, &taps, 1)?;
    let eyy = g.window_filter(yy, &taps, 1)?;
    let exy = g.window_filter(xy, &taps, 1)?;
    let mx2 = g.mul(mx, mx)?;
    let my2 = g.mul(my, my)?;
    let mxy = g.mul(mx, my)?;
    let vx = g.sub(exx, mx2)?;
    let vy = g.sub(eyy, my2)?;
    let cxy = g.sub(exy, mxy)?;

    let lum_num = g.scale(mxy, 2.0);
    let lum_num = g.offset(lum_num, p.c1);
    let cs_num = g.scale(cxy, 2.0);
    let cs_num = g.offset(cs_num, p.c2);
    let lum_den = g.add(mx2, my2)?;
    let lum_den = g.offset(lum_den, p.c1);
    let cs_den = g.add(vx, vy)?;
    let cs_den = g.offset(cs_den, p.c2);
    let num = g.mul(lum_num, cs_num)?;
    let den = g.mul(lum_den, cs_den)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}
