//! Straight-line reference implementations shared by integration tests.
//!
//! Nothing here touches the tape; images are plain HWC slices and every
//! window is evaluated with explicit loops.
#![allow(dead_code)]

pub fn gray(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    if c == 1 {
        return x.to_vec();
    }
    (0..h * w)
        .map(|p| 0.299 * x[p * 3] + 0.587 * x[p * 3 + 1] + 0.114 * x[p * 3 + 2])
        .collect()
}

/// Mean SSIM with an 11x11 Gaussian window (σ = 1.5) over valid positions.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let n = 11;
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=h - n {
        for x in 0..=w - n {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let wt = win[i][j] / total;
                    let p = (y + i) * w + x + j;
                    ma += wt * a[p];
                    mb += wt * b[p];
                    saa += wt * a[p] * a[p];
                    sbb += wt * b[p] * b[p];
                    sab += wt * a[p] * b[p];
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

pub fn chebyshev(a: &[f64], b: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..a.len() {
        let d = (a[i] - b[i]).abs();
        if d > best {
            best = d;
        }
    }
    best
}

/// Zero-padded cross-correlation on planar `[c][y][x]` data.
/// Kernel layout `[co][ci][ky][kx]`.
#[allow(clippy::too_many_arguments)]
pub fn conv(
    input: &[f64],
    (ci, h, w): (usize, usize, usize),
    kernel: &[f64],
    bias: &[f64],
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    same: bool,
) -> (Vec<f64>, usize, usize) {
    let (ph, pw) = if same { (kh / 2, kw / 2) } else { (0, 0) };
    let oh = (h + 2 * ph - kh) / stride + 1;
    let ow = (w + 2 * pw - kw) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = bias.get(o).copied().unwrap_or(0.0);
                for c in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as i64 - ph as i64;
                            let ix = (ox * stride + kx) as i64 - pw as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            s += kernel[((o * ci + c) * kh + ky) * kw + kx]
                                * input[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = s;
            }
        }
    }
    (out, oh, ow)
}

/// Average ranks (1-based) by pairwise counting.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let less = v.iter().filter(|&&b| b < a).count() as f64;
            let equal = v.iter().filter(|&&b| b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..a.len() {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma).powi(2);
        sbb += (b[i] - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

pub fn srcc(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Stability ratio over the items with a nonzero change.
pub fn stability(initial: &[f64], attacked: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..initial.len() {
        let f = initial[i];
        let d = (f - attacked[i]).abs();
        if d == 0.0 {
            continue;
        }
        let room = if 10.0 - f > f { 10.0 - f } else { f };
        total += (room / d).ln();
        n += 1;
    }
    total / n as f64
}

/// Feature maps of a conv/rectifier stack, as `(data, channels, h, w)` per stage.
pub fn features(
    x_planar: &[f64],
    h: usize,
    w: usize,
    stages: &[(Vec<f64>, Vec<f64>, (usize, usize, usize, usize), usize)],
) -> Vec<(Vec<f64>, usize, usize, usize)> {
    let mut cur = x_planar.to_vec();
    let (mut c, mut ch, mut cw) = (3, h, w);
    let mut out = Vec::new();
    for (k, b, (co, ci, kh, kw), stride) in stages {
        assert_eq!(*ci, c);
        let (mut y, oh, ow) = conv(&cur, (c, ch, cw), k, b, (*co, *kh, *kw), *stride, true);
        for v in &mut y {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        out.push((y.clone(), *co, oh, ow));
        cur = y;
        c = *co;
        ch = oh;
        cw = ow;
    }
    out
}

/// Weighted texture and structure sums of the feature statistics.
pub fn texture_structure(
    fa: &[(Vec<f64>, usize, usize, usize)],
    fb: &[(Vec<f64>, usize, usize, usize)],
    tw: &[f64],
    sw: &[f64],
) -> (f64, f64) {
    let eps = 1e-6;
    let mut t = 0.0;
    let mut s = 0.0;
    let mut k = 0;
    for ((a, c, h, w), (b, _, _, _)) in fa.iter().zip(fb) {
        let n = (h * w) as f64;
        for ch in 0..*c {
            let pa = &a[ch * h * w..(ch + 1) * h * w];
            let pb = &b[ch * h * w..(ch + 1) * h * w];
            let ma = pa.iter().sum::<f64>() / n;
            let mb = pb.iter().sum::<f64>() / n;
            let mut eaa = 0.0;
            let mut ebb = 0.0;
            let mut eab = 0.0;
            for i in 0..h * w {
                eaa += pa[i] * pa[i];
                ebb += pb[i] * pb[i];
                eab += pa[i] * pb[i];
            }
            let va = eaa / n - ma * ma;
            let vb = ebb / n - mb * mb;
            let cov = eab / n - ma * mb;
            t += tw[k] * (2.0 * ma * mb + eps) / (ma * ma + mb * mb + eps);
            s += sw[k] * (2.0 * cov + eps) / (va + vb + eps);
            k += 1;
        }
    }
    (t, s)
}

/// Stage-weighted mean squared distance of channel-normalized features.
pub fn normalized_feature_distance(
    fa: &[(Vec<f64>, usize, usize, usize)],
    fb: &[(Vec<f64>, usize, usize, usize)],
    weights: &[f64],
) -> f64 {
    let mut total = 0.0;
    for (((a, c, h, w), (b, _, _, _)), wt) in fa.iter().zip(fb).zip(weights) {
        let mut acc = 0.0;
        for p in 0..h * w {
            let na: f64 = (0..*c).map(|k| a[k * h * w + p].powi(2)).sum::<f64>() + 1e-10;
            let nb: f64 = (0..*c).map(|k| b[k * h * w + p].powi(2)).sum::<f64>() + 1e-10;
            for k in 0..*c {
                let d = a[k * h * w + p] / na.sqrt() - b[k * h * w + p] / nb.sqrt();
                acc += d * d;
            }
        }
        total += wt * acc / (h * w) as f64;
    }
    total
}

pub fn hwc_to_planar(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for y in 0..h {
        for xx in 0..w {
            for k in 0..c {
                out[(k * h + y) * w + xx] = x[(y * w + xx) * c + k];
            }
        }
    }
    out
}
