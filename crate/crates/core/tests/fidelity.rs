mod oracles;

use std::sync::Arc;

use nriqa_core::fidelity::{self, FidelityMeasure, MeasureKind};
use nriqa_core::gradcheck;
use nriqa_core::tensor::ConvKernel;
use nriqa_core::{FeatureExtractor, Graph, ImageTensor, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageTensor {
    ImageTensor::from_fn(h, w, c, |_, _, _| rng.gen_range(0.0..1.0)).unwrap()
}

fn stage_specs(
    ex: &FeatureExtractor,
) -> Vec<(Vec<f64>, Vec<f64>, (usize, usize, usize, usize), usize)> {
    ex.stages
        .iter()
        .map(|s| {
            let k = &s.kernel;
            (
                k.weights.clone(),
                k.bias.clone().unwrap_or_default(),
                (k.out_channels, k.in_channels, k.height, k.width),
                s.stride,
            )
        })
        .collect()
}

fn small_extractor() -> Arc<FeatureExtractor> {
    Arc::new(FeatureExtractor::random(11, &[4, 6]))
}

#[test]
fn chebyshev_basic_values() {
    let x0 = ImageTensor::filled(4, 4, 3, 0.5).unwrap();
    assert_eq!(fidelity::chebyshev(&x0, &x0).unwrap(), 0.0);
    let mut x = x0.clone();
    x.set(2, 1, 0, 0.6);
    assert!((fidelity::chebyshev(&x, &x0).unwrap() - 0.1).abs() < 1e-15);
}

#[test]
fn chebyshev_equals_direct_scan_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let a = random_image(&mut rng, 9, 7, 3);
        let b = random_image(&mut rng, 9, 7, 3);
        let d = fidelity::chebyshev(&a, &b).unwrap();
        assert_eq!(d, oracles::chebyshev(a.data(), b.data()));
        assert_eq!(d, fidelity::chebyshev(&b, &a).unwrap());
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = ImageTensor::filled(12, 12, 3, 0.5).unwrap();
    let b = ImageTensor::filled(12, 13, 3, 0.5).unwrap();
    for m in [FidelityMeasure::chebyshev(), FidelityMeasure::neg_ssim()] {
        assert!(m.distance(&a, &b).is_err());
    }
}

#[test]
fn neg_ssim_identity_and_inversion() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = random_image(&mut rng, 16, 16, 3);
    assert!((fidelity::neg_ssim(&x0, &x0).unwrap() + 1.0).abs() < 1e-12);
    let inv = ImageTensor::from_fn(16, 16, 3, |y, x, c| 1.0 - x0.get(y, x, c)).unwrap();
    let d = fidelity::neg_ssim(&inv, &x0).unwrap();
    assert!(d > -1.0 && d < 1.0, "{d}");
}

#[test]
fn neg_ssim_rejects_images_smaller_than_window() {
    let a = ImageTensor::filled(10, 20, 1, 0.3).unwrap();
    assert!(fidelity::neg_ssim(&a, &a).is_err());
}

#[test]
fn ssim_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..100 {
        let c = if trial % 2 == 0 { 3 } else { 1 };
        let (h, w) = (32, 32 - trial % 5);
        let a = random_image(&mut rng, h, w, c);
        let b = random_image(&mut rng, h, w, c);
        let want = -oracles::ssim(
            &oracles::gray(a.data(), h, w, c),
            &oracles::gray(b.data(), h, w, c),
            h,
            w,
        );
        let got = fidelity::neg_ssim(&a, &b).unwrap();
        assert!((got - want).abs() <= 1e-10, "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn feature_l2_identity_extractor_closed_form() {
    // With a 1x1 identity stage the distance is the mean over pixels of the
    // squared difference of RGB vectors scaled to unit length.
    let ex = Arc::new(FeatureExtractor::identity());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let a = random_image(&mut rng, 5, 6, 3);
        let b = random_image(&mut rng, 5, 6, 3);
        let mut want = 0.0;
        for p in 0..30 {
            let pa = &a.data()[p * 3..p * 3 + 3];
            let pb = &b.data()[p * 3..p * 3 + 3];
            let na = (pa.iter().map(|v| v * v).sum::<f64>() + 1e-10).sqrt();
            let nb = (pb.iter().map(|v| v * v).sum::<f64>() + 1e-10).sqrt();
            want += (0..3).map(|k| (pa[k] / na - pb[k] / nb).powi(2)).sum::<f64>();
        }
        want /= 30.0;
        let got = fidelity::feature_l2(&a, &b, ex.clone()).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn feature_l2_zero_at_identity_and_matches_oracle() {
    let ex = small_extractor();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let specs = stage_specs(&ex);
    for _ in 0..20 {
        let a = random_image(&mut rng, 12, 10, 3);
        let b = random_image(&mut rng, 12, 10, 3);
        assert_eq!(fidelity::feature_l2(&a, &a, ex.clone()).unwrap(), 0.0);
        let fa = oracles::features(&oracles::hwc_to_planar(a.data(), 12, 10, 3), 12, 10, &specs);
        let fb = oracles::features(&oracles::hwc_to_planar(b.data(), 12, 10, 3), 12, 10, &specs);
        let want = oracles::normalized_feature_distance(&fa, &fb, &ex.l2_weights);
        let got = fidelity::feature_l2(&a, &b, ex.clone()).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn feature_l2_invariant_to_doubling_bias_free_stages() {
    let mut ex = FeatureExtractor::random(12, &[4, 6]);
    for s in &mut ex.stages {
        let k = &s.kernel;
        s.kernel = Arc::new(
            ConvKernel::new(k.out_channels, k.in_channels, k.height, k.width, k.weights.clone(), None)
                .unwrap(),
        );
    }
    let mut doubled = ex.clone();
    for s in &mut doubled.stages {
        let k = &s.kernel;
        let w = k.weights.iter().map(|v| 2.0 * v).collect();
        s.kernel = Arc::new(ConvKernel::new(k.out_channels, k.in_channels, k.height, k.width, w, None).unwrap());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_image(&mut rng, 16, 16, 3);
    let b = random_image(&mut rng, 16, 16, 3);
    let d1 = fidelity::feature_l2(&a, &b, Arc::new(ex)).unwrap();
    let d2 = fidelity::feature_l2(&a, &b, Arc::new(doubled)).unwrap();
    assert!((d1 - d2).abs() < 1e-8 * d1.max(1.0), "{d1} vs {d2}");
}

#[test]
fn structure_texture_identity_is_minus_one() {
    let ex = small_extractor();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_image(&mut rng, 16, 16, 3);
    let d = fidelity::structure_texture(&a, &a, ex).unwrap();
    assert!((d + 1.0).abs() < 1e-12, "{d}");
}

#[test]
fn constant_shift_lowers_texture_but_keeps_structure() {
    let ex = FeatureExtractor::identity();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x0 = ImageTensor::from_fn(8, 8, 3, |_, _, _| rng.gen_range(0.1..0.7)).unwrap();
    let x = ImageTensor::from_fn(8, 8, 3, |y, xx, c| x0.get(y, xx, c) + 0.2).unwrap();
    let (texture, structure) = fidelity::structure_texture_terms(&x, &x0, &ex).unwrap();
    assert!(texture < 1.0, "{texture}");
    assert!((structure - 1.0).abs() < 1e-9, "{structure}");
}

#[test]
fn structure_texture_matches_straight_line_oracle() {
    let ex = small_extractor();
    let specs = stage_specs(&ex);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let a = random_image(&mut rng, 10, 12, 3);
        let b = random_image(&mut rng, 10, 12, 3);
        let fa = oracles::features(&oracles::hwc_to_planar(a.data(), 10, 12, 3), 10, 12, &specs);
        let fb = oracles::features(&oracles::hwc_to_planar(b.data(), 10, 12, 3), 10, 12, &specs);
        let (t, s) =
            oracles::texture_structure(&fa, &fb, &ex.texture_weights, &ex.structure_weights);
        let got = fidelity::structure_texture(&a, &b, ex.clone()).unwrap();
        assert!((got + t + s).abs() <= 1e-10, "{got} vs {}", -(t + s));
    }
}

#[test]
fn distance_never_drops_below_self_distance() {
    let ex = small_extractor();
    let measures = [
        FidelityMeasure::chebyshev(),
        FidelityMeasure::neg_ssim(),
        FidelityMeasure::feature_l2(ex.clone()),
        FidelityMeasure::structure_texture(ex),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x0 = random_image(&mut rng, 12, 12, 3);
    let base: Vec<f64> = measures.iter().map(|m| m.distance(&x0, &x0).unwrap()).collect();
    for probe in 0..1000 {
        let amp = [1.0, 0.1, 0.01, 1.0 / 255.0][probe % 4];
        let x = ImageTensor::from_fn(12, 12, 3, |y, xx, c| {
            (x0.get(y, xx, c) + rng.gen_range(-amp..amp)).clamp(0.0, 1.0)
        })
        .unwrap();
        for (m, &b) in measures.iter().zip(&base) {
            let d = m.distance(&x, &x0).unwrap();
            assert!(d >= b - 1e-12, "{}: {d} < {b}", m.kind());
        }
    }
}

#[test]
fn measure_gradients_match_finite_differences() {
    let ex = small_extractor();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = random_image(&mut rng, 16, 16, 3);
    let x = ImageTensor::from_fn(16, 16, 3, |y, xx, c| {
        (x0.get(y, xx, c) + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)
    })
    .unwrap();
    for m in [
        FidelityMeasure::neg_ssim(),
        FidelityMeasure::feature_l2(ex.clone()),
        FidelityMeasure::structure_texture(ex.clone()),
    ] {
        let shape = x.planar_shape();
        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let xv = g.leaf(t.clone());
            let x0v = g.leaf(x0.to_planar());
            let d = m.graph(&mut g, xv, x0v).unwrap();
            (g.forward(d).unwrap(), g.gradient(d, xv).unwrap())
        };
        let planar = x.to_planar();
        let (_, grad) = eval(&planar);
        let coords: Vec<usize> = (0..shape.numel()).step_by(7).collect();
        let report = gradcheck::check(
            |p| eval(&Tensor::new(shape, p.to_vec()).unwrap()).0,
            planar.data(),
            grad.data(),
            &coords,
            1e-4,
            1e-3,
        );
        assert!(report.probed >= 100);
        assert!(
            report.pass_rate() >= 0.95,
            "{}: pass rate {} worst {}",
            m.kind(),
            report.pass_rate(),
            report.worst
        );
    }
}

#[test]
fn measure_kinds_parse_and_pick_norms() {
    for k in MeasureKind::ALL {
        assert_eq!(k.id().parse::<MeasureKind>().unwrap(), k);
    }
    assert_eq!(MeasureKind::Chebyshev.ascent_norm(), fidelity::AscentNorm::Linf);
    assert_eq!(MeasureKind::NegSsim.ascent_norm(), fidelity::AscentNorm::L2);
    assert!("vif".parse::<MeasureKind>().is_err());
    assert!(FidelityMeasure::new(MeasureKind::FeatureL2, None).is_err());
}
