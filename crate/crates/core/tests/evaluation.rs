mod oracles;

use nriqa_core::evaluation::{self, Selection, Subject};
use nriqa_core::fidelity::MeasureKind;
use nriqa_core::quality::{ModelKind, QualityModel};
use nriqa_core::{synth, ImageTensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn srcc_examples() {
    assert_eq!(evaluation::srcc(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
    assert_eq!(evaluation::srcc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    let (a, b) = ([1.0, 2.0, 2.0, 4.0], [1.0, 3.0, 2.0, 4.0]);
    let got = evaluation::srcc(&a, &b).unwrap();
    assert!((got - oracles::srcc(&a, &b)).abs() <= 1e-12);
    assert_eq!(evaluation::ranks(&a), vec![1.0, 2.5, 2.5, 4.0]);
}

#[test]
fn srcc_rejects_degenerate_input() {
    assert!(evaluation::srcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(evaluation::srcc(&[1.0], &[1.0]).is_err());
    assert!(evaluation::srcc(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(evaluation::srcc(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
}

#[test]
fn srcc_matches_pairwise_rank_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..200 {
        let n = 2 + trial % 30;
        // Coarse values force ties.
        let a: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..6))).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (Ok(got), want) = (evaluation::srcc(&a, &b), oracles::srcc(&a, &b)) else {
            assert!(a.iter().all(|v| *v == a[0]));
            continue;
        };
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

proptest! {
    #[test]
    fn srcc_is_symmetric_bounded_and_monotone_invariant(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40)
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        if let Ok(r) = evaluation::srcc(&a, &b) {
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((evaluation::srcc(&b, &a).unwrap() - r).abs() < 1e-12);
            let warped: Vec<f64> = a.iter().map(|v| (v / 40.0).exp() + v.powi(3)).collect();
            prop_assert!((evaluation::srcc(&warped, &b).unwrap() - r).abs() < 1e-12);
            let neg: Vec<f64> = b.iter().map(|v| -v).collect();
            prop_assert!((evaluation::srcc(&a, &neg).unwrap() + r).abs() < 1e-12);
        }
    }

    #[test]
    fn stability_ratio_is_reflection_invariant(
        pairs in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..20)
    ) {
        let f: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let g: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let r = evaluation::stability_ratio(&f, &g).unwrap();
        let fr: Vec<f64> = f.iter().map(|v| 10.0 - v).collect();
        let gr: Vec<f64> = g.iter().map(|v| 10.0 - v).collect();
        let rr = evaluation::stability_ratio(&fr, &gr).unwrap();
        prop_assert_eq!(r.used, rr.used);
        if let (Some(a), Some(b)) = (r.value, rr.value) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn stability_ratio_examples() {
    let r = evaluation::stability_ratio(&[3.0], &[5.0]).unwrap();
    assert!((r.value.unwrap() - 3.5f64.ln()).abs() < 1e-15);
    assert!((r.value.unwrap() - 1.2528).abs() < 1e-4);
    // Pushed to the far bound: ratio 1.
    assert_eq!(evaluation::stability_ratio(&[3.0], &[10.0]).unwrap().value, Some(0.0));
    let half = evaluation::stability_ratio(&[3.0], &[4.0]).unwrap().value.unwrap();
    let full = evaluation::stability_ratio(&[3.0], &[5.0]).unwrap().value.unwrap();
    assert!((half - full - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn stability_ratio_excludes_zero_changes() {
    let r = evaluation::stability_ratio(&[3.0, 6.0, 2.0], &[3.0, 7.0, 2.0]).unwrap();
    assert_eq!((r.used, r.excluded), (1, 2));
    assert!((r.value.unwrap() - 6f64.ln()).abs() < 1e-15);
    let none = evaluation::stability_ratio(&[3.0], &[3.0]).unwrap();
    assert_eq!((none.value, none.excluded), (None, 1));
    assert!(evaluation::stability_ratio(&[11.0], &[3.0]).is_err());
    assert!(evaluation::stability_ratio(&[], &[]).is_err());
}

#[test]
fn stability_ratio_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..200 {
        let n = rng.gen_range(1..25);
        let f: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let got = evaluation::stability_ratio(&f, &g).unwrap().value.unwrap();
        assert!((got - oracles::stability(&f, &g)).abs() <= 1e-10);
    }
}

fn subjects(n: usize) -> Vec<Subject> {
    synth::dataset(5, n, 32)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, s)| Subject {
            id: format!("img{i}"),
            image: s.distorted,
            mos: s.mos,
        })
        .collect()
}

#[test]
fn identity_attack_reproduces_initial_correlation() {
    let subjects = subjects(8);
    let model = QualityModel::default_for(ModelKind::Nss).unwrap();
    let selections: Vec<Selection> = subjects
        .iter()
        .map(|s| Selection {
            subject: s.id.clone(),
            source: ModelKind::Nss,
            measure: MeasureKind::Chebyshev,
            counterexample: Some(s.image.clone()),
        })
        .collect();
    let cells =
        evaluation::transfer_matrix(&[model.clone()], &[MeasureKind::Chebyshev], &subjects, &selections).unwrap();
    assert_eq!(cells.len(), 2);
    let scores: Vec<f64> = subjects.iter().map(|s| model.score(&s.image).unwrap()).collect();
    let mos: Vec<f64> = subjects.iter().map(|s| s.mos).collect();
    let dup = |v: &[f64]| v.iter().chain(v).copied().collect::<Vec<_>>();
    let want = oracles::srcc(&dup(&scores), &dup(&mos));
    let intra = &cells[1];
    assert!(intra.is_intra());
    assert!((intra.srcc.unwrap() - want).abs() < 1e-12);
    let st = intra.stability.unwrap();
    assert_eq!((st.value, st.excluded), (None, 8));
    assert_eq!(intra.mean_abs_delta, Some(0.0));
    assert!((cells[0].srcc.unwrap() - oracles::srcc(&scores, &mos)).abs() < 1e-12);
}

#[test]
fn missing_counterexamples_mark_cells_absent() {
    let subjects = subjects(4);
    let models: Vec<QualityModel> = ModelKind::ALL
        .iter()
        .map(|&k| QualityModel::default_for(k).unwrap())
        .collect();
    let mut selections = Vec::new();
    for s in &subjects {
        for source in ModelKind::ALL {
            let counterexample = (source != ModelKind::Cnn || s.id != "img2").then(|| s.image.quantized());
            selections.push(Selection {
                subject: s.id.clone(),
                source,
                measure: MeasureKind::NegSsim,
                counterexample,
            });
        }
    }
    let cells = evaluation::transfer_matrix(&models, &[MeasureKind::NegSsim], &subjects, &selections).unwrap();
    // Per attacked model: one baseline and three sources.
    assert_eq!(cells.len(), 3 * 4);
    for c in &cells {
        assert_eq!(c.is_absent(), c.source == Some(ModelKind::Cnn), "{c:?}");
        if let Some(r) = c.srcc {
            assert!((-1.0..=1.0).contains(&r));
        }
    }
    let tsv = evaluation::report_tsv(&cells);
    assert_eq!(tsv.lines().count(), 2 + cells.len());
    assert!(tsv.lines().nth(2).unwrap().contains("\tnone\t-\t"));
    assert!(tsv.lines().nth(2).unwrap().contains("\tinf\t"));
    assert!(tsv.lines().any(|l| l.starts_with("nss\tcnn\tssim\t-\t-")));
}

#[test]
fn intra_and_inter_means_split_by_source() {
    let subjects = subjects(4);
    let models: Vec<QualityModel> = [ModelKind::Nss, ModelKind::Codebook]
        .iter()
        .map(|&k| QualityModel::default_for(k).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let selections: Vec<Selection> = subjects
        .iter()
        .flat_map(|s| {
            let noisy = ImageTensor::from_fn(32, 32, 3, |y, x, c| {
                (s.image.get(y, x, c) + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)
            })
            .unwrap()
            .quantized();
            [ModelKind::Nss, ModelKind::Codebook].map(|source| Selection {
                subject: s.id.clone(),
                source,
                measure: MeasureKind::Chebyshev,
                counterexample: Some(noisy.clone()),
            })
        })
        .collect();
    let cells = evaluation::transfer_matrix(&models, &[MeasureKind::Chebyshev], &subjects, &selections).unwrap();
    let (intra, inter) = evaluation::intra_inter_means(&cells);
    let pick = |f: &dyn Fn(&evaluation::TransferCell) -> bool| {
        let v: Vec<f64> = cells.iter().filter(|c| c.source.is_some() && f(c)).map(|c| c.mean_abs_delta.unwrap()).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!((intra.unwrap() - pick(&|c| c.is_intra())).abs() < 1e-12);
    assert!((inter.unwrap() - pick(&|c| !c.is_intra())).abs() < 1e-12);
}

#[test]
fn residual_map_is_scaled_absolute_difference() {
    let a = ImageTensor::from_fn(4, 4, 1, |y, x, _| (y * 4 + x) as f64 / 255.0).unwrap();
    let b = ImageTensor::from_fn(4, 4, 1, |y, x, _| ((y * 4 + x) as f64 + 2.0) / 255.0).unwrap();
    let r = evaluation::residual_map(&a, &b, 10.0).unwrap();
    assert!(r.data().iter().all(|v| (v - 20.0 / 255.0).abs() < 1e-12));
    assert!(evaluation::residual_map(&a, &b.to_rgb(), 1.0).is_err());
}
