//! Seeded synthetic stimuli: pristine scenes, four classic distortion types
//! and an SSIM-to-pristine proxy opinion score.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fidelity;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distortion {
    /// Gaussian blur.
    Blur,
    /// Additive white Gaussian noise.
    Noise,
    /// 8x8 block DCT coefficient quantization (JPEG-like).
    Blocking,
    /// Haar detail thresholding (JPEG2000-like).
    Wavelet,
}

impl Distortion {
    pub const ALL: [Distortion; 4] = [
        Distortion::Blur,
        Distortion::Noise,
        Distortion::Blocking,
        Distortion::Wavelet,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Distortion::Blur => "blur",
            Distortion::Noise => "noise",
            Distortion::Blocking => "blocking",
            Distortion::Wavelet => "wavelet",
        }
    }
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Distortion::ALL
            .into_iter()
            .find(|d| d.id() == s)
            .ok_or_else(|| Error::invalid(format!("unknown distortion {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub pristine: ImageTensor,
    pub distorted: ImageTensor,
    pub distortion: Distortion,
    pub level: f64,
    pub mos: f64,
}

/// A quantized RGB scene of smooth gradients, gratings and hard-edged shapes.
pub fn pristine(rng: &mut ChaCha8Rng, height: usize, width: usize) -> ImageTensor {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.7));
    let waves: Vec<(f64, f64, f64, f64, usize)> = (0..5)
        .map(|_| {
            let freq = rng.gen_range(0.5..4.0) / height.max(width) as f64;
            let angle = rng.gen_range(0.0..PI);
            (freq, angle, rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.03..0.1), rng.gen_range(0..3))
        })
        .collect();
    let shapes: Vec<(bool, f64, f64, f64, f64, [f64; 3])> = (0..rng.gen_range(3..7))
        .map(|_| {
            (
                rng.gen_bool(0.5),
                rng.gen_range(0.0..height as f64),
                rng.gen_range(0.0..width as f64),
                rng.gen_range(0.08..0.3) * height as f64,
                rng.gen_range(0.08..0.3) * width as f64,
                std::array::from_fn(|_| rng.gen_range(0.1..0.9)),
            )
        })
        .collect();
    let grating = (
        rng.gen_range(0.0..height as f64 * 0.6),
        rng.gen_range(0.0..width as f64 * 0.6),
        rng.gen_range(0.2..0.4) * height as f64,
        rng.gen_range(2.5..5.0),
        rng.gen_range(0.0..PI),
    );
    let mut img = ImageTensor::from_fn(height, width, 3, |y, x, c| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = base[c];
        for &(freq, angle, phase, amp, ch) in &waves {
            let t = 2.0 * PI * freq * (xf * angle.cos() + yf * angle.sin()) + phase;
            v += amp * t.sin() * if ch == c { 1.0 } else { 0.5 };
        }
        for &(disc, cy, cx, ry, rx, color) in &shapes {
            let (dy, dx) = ((yf - cy) / ry, (xf - cx) / rx);
            let inside = if disc {
                dy * dy + dx * dx <= 1.0
            } else {
                dy.abs() <= 1.0 && dx.abs() <= 1.0
            };
            if inside {
                v = 0.3 * v + 0.7 * color[c];
            }
        }
        let (gy, gx, size, period, angle) = grating;
        if yf >= gy && yf < gy + size && xf >= gx && xf < gx + size {
            v += 0.12 * (2.0 * PI * (xf * angle.cos() + yf * angle.sin()) / period).sin();
        }
        v
    })
    .expect("positive dims");
    for v in img.data_mut() {
        *v = v.clamp(0.02, 0.98);
    }
    img.quantized()
}

/// Applies one distortion at `level` in `[0, 1]`; the result is quantized.
pub fn distort(
    img: &ImageTensor,
    kind: Distortion,
    level: f64,
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    let level = level.clamp(0.0, 1.0);
    let mut out = match kind {
        Distortion::Blur => gaussian_blur(img, 0.4 + 2.6 * level),
        Distortion::Noise => {
            let normal = Normal::new(0.0, 0.01 + 0.19 * level).expect("positive sigma");
            let mut out = img.clone();
            for v in out.data_mut() {
                *v += normal.sample(rng);
            }
            out
        }
        Distortion::Blocking => block_dct_quantize(img, 0.02 + 0.5 * level),
        Distortion::Wavelet => haar_threshold(img, 0.02 + 0.35 * level),
    };
    out.clamp_unit();
    out.quantized()
}

/// `10 · SSIM(gray(x), gray(pristine))`, clipped to `[0, 10]`.
pub fn proxy_mos(x: &ImageTensor, pristine: &ImageTensor) -> Result<f64> {
    Ok((-10.0 * fidelity::neg_ssim(x, pristine)?).clamp(0.0, 10.0))
}

/// `count` distorted scenes cycling through the distortion types with
/// stratified levels, so the proxy scores span a broad range.
pub fn dataset(seed: u64, count: usize, size: usize) -> Result<Vec<SynthSample>> {
    if size < 16 || size % 8 != 0 {
        return Err(Error::invalid("synthetic images need a size that is a multiple of 8, at least 16"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strata = count.div_ceil(Distortion::ALL.len()).max(1);
    (0..count)
        .map(|i| {
            let kind = Distortion::ALL[i % Distortion::ALL.len()];
            let level = ((i / Distortion::ALL.len()) as f64 + rng.gen_range(0.0..1.0)) / strata as f64;
            let pristine = pristine(&mut rng, size, size);
            let distorted = distort(&pristine, kind, level, &mut rng);
            let mos = proxy_mos(&distorted, &pristine)?;
            Ok(SynthSample {
                pristine,
                distorted,
                distortion: kind,
                level,
                mos,
            })
        })
        .collect()
}

fn gaussian_blur(img: &ImageTensor, sigma: f64) -> ImageTensor {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.into_iter().map(|t| t / total).collect();
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let horizontal = ImageTensor::from_fn(h, w, c, |y, x, k| {
        taps.iter()
            .enumerate()
            .map(|(j, t)| t * img.get(y, reflect(x as isize + j as isize - radius, w), k))
            .sum()
    })
    .expect("dims");
    ImageTensor::from_fn(h, w, c, |y, x, k| {
        taps.iter()
            .enumerate()
            .map(|(j, t)| t * horizontal.get(reflect(y as isize + j as isize - radius, h), x, k))
            .sum()
    })
    .expect("dims")
}

fn dct_matrix() -> [[f64; 8]; 8] {
    std::array::from_fn(|u| {
        std::array::from_fn(|x| {
            let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            a * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos()
        })
    })
}

fn block_dct_quantize(img: &ImageTensor, step: f64) -> ImageTensor {
    let m = dct_matrix();
    let mut out = img.clone();
    let (h, w) = (img.height(), img.width());
    for k in 0..img.channels() {
        for by in (0..h / 8 * 8).step_by(8) {
            for bx in (0..w / 8 * 8).step_by(8) {
                let block: [[f64; 8]; 8] = std::array::from_fn(|y| std::array::from_fn(|x| img.get(by + y, bx + x, k)));
                let mut coef = [[0.0; 8]; 8];
                for (u, row) in coef.iter_mut().enumerate() {
                    for (v, c) in row.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for y in 0..8 {
                            for x in 0..8 {
                                s += m[u][y] * m[v][x] * block[y][x];
                            }
                        }
                        let q = step * (1.0 + 0.5 * (u + v) as f64);
                        *c = (s / q).round() * q;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let mut s = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                s += m[u][y] * m[v][x] * coef[u][v];
                            }
                        }
                        out.set(by + y, bx + x, k, s);
                    }
                }
            }
        }
    }
    out
}

/// Three-level orthonormal Haar analysis, hard thresholding of the detail
/// bands, synthesis. Works on the largest multiple-of-8 region.
fn haar_threshold(img: &ImageTensor, threshold: f64) -> ImageTensor {
    let (h, w) = (img.height() / 8 * 8, img.width() / 8 * 8);
    let mut out = img.clone();
    let r = std::f64::consts::FRAC_1_SQRT_2;
    for k in 0..img.channels() {
        let mut buf: Vec<f64> = (0..h * w).map(|i| img.get(i / w, i % w, k)).collect();
        let (mut ch, mut cw) = (h, w);
        for _ in 0..3 {
            haar_2d(&mut buf, w, ch, cw, r, false);
            for y in 0..ch {
                for x in 0..cw {
                    if (y >= ch / 2 || x >= cw / 2) && buf[y * w + x].abs() < threshold {
                        buf[y * w + x] = 0.0;
                    }
                }
            }
            ch /= 2;
            cw /= 2;
        }
        for _ in 0..3 {
            ch *= 2;
            cw *= 2;
            haar_2d(&mut buf, w, ch, cw, r, true);
        }
        for y in 0..h {
            for x in 0..w {
                out.set(y, x, k, buf[y * w + x]);
            }
        }
    }
    out
}

fn haar_2d(buf: &mut [f64], stride: usize, h: usize, w: usize, r: f64, inverse: bool) {
    let mut tmp = vec![0.0; h.max(w)];
    let mut pass = |get: &dyn Fn(usize) -> usize, n: usize, buf: &mut [f64]| {
        let half = n / 2;
        if inverse {
            for i in 0..half {
                let (a, d) = (buf[get(i)], buf[get(half + i)]);
                tmp[2 * i] = r * (a + d);
                tmp[2 * i + 1] = r * (a - d);
            }
        } else {
            for i in 0..half {
                let (a, b) = (buf[get(2 * i)], buf[get(2 * i + 1)]);
                tmp[i] = r * (a + b);
                tmp[half + i] = r * (a - b);
            }
        }
        for i in 0..n {
            buf[get(i)] = tmp[i];
        }
    };
    let order: [bool; 2] = if inverse { [false, true] } else { [true, false] };
    for rows in order {
        if rows {
            for y in 0..h {
                pass(&|i| y * stride + i, w, buf);
            }
        } else {
            for x in 0..w {
                pass(&|i| i * stride + x, h, buf);
            }
        }
    }
}
