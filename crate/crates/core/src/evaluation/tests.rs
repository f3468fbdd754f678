use super::*;
use crate::model::{LossWeights, ModelConfig};
use crate::phantom::{generate_cohort_shaped, CohortSpec, FrameShape, LabeledSubject};
use crate::training::TrainConfig;
use proptest::prelude::*;

/// J for every candidate cut, brute force: predict positive when `s >= t`.
fn best_youden(labels: &[u8], scores: &[f64]) -> (f64, f64) {
    let p = labels.iter().filter(|&&y| y == 1).count() as f64;
    let n = labels.len() as f64 - p;
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.push(f64::NEG_INFINITY);
    cuts.push(f64::INFINITY);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for &t in &cuts {
        let tp = labels.iter().zip(scores).filter(|(&y, &s)| y == 1 && s >= t).count() as f64;
        let tn = labels.iter().zip(scores).filter(|(&y, &s)| y == 0 && s < t).count() as f64;
        let j = tp / p + tn / n - 1.0;
        if j > best.0 + 1e-12 {
            best = (j, t);
        }
    }
    best
}

fn binom_oracle(b: u64, c: u64) -> f64 {
    let n = b + c;
    let k = b.min(c);
    let mut tail = 0.0;
    for i in 0..=k {
        // C(n, i) via products of ratios
        let mut coef = 1.0;
        for j in 0..i {
            coef *= (n - j) as f64 / (j + 1) as f64;
        }
        tail += coef / 2f64.powi(n as i32);
    }
    (2.0 * tail).min(1.0)
}

/// Upper tail of chi-squared(1): twice the normal tail beyond sqrt(x), by
/// Simpson's rule.
fn chi2_oracle(x: f64) -> f64 {
    let (a, b, m) = (x.sqrt(), 12.0, 20_000);
    let h = (b - a) / m as f64;
    let phi = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = phi(a) + phi(b);
    for i in 1..m {
        s += phi(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    2.0 * s * h / 3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn youden_matches_brute_force(
        pairs in prop::collection::vec((0u8..2, 0u8..12), 4..40)
    ) {
        let labels: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        // coarse scores force ties
        let scores: Vec<f64> = pairs.iter().map(|p| p.1 as f64 / 11.0).collect();
        let op = youden(&roc(&labels, &scores).unwrap()).unwrap();
        let (j, t) = best_youden(&labels, &scores);
        prop_assert!((op.youden_index() - j).abs() < 1e-12);
        prop_assert_eq!(op.threshold, t);
        let c = ConfusionCounts::at_threshold(&labels, &scores, op.threshold).unwrap();
        prop_assert!((c.sen() - op.sen).abs() < 1e-12 && (c.spe() - op.spe).abs() < 1e-12);
    }

    #[test]
    fn roc_is_monotone(pairs in prop::collection::vec((0u8..2, -5.0f64..5.0), 2..30)) {
        let labels: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let scores: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let curve = roc(&labels, &scores).unwrap();
        for w in curve.points.windows(2) {
            prop_assert!(w[0].threshold <= w[1].threshold);
            prop_assert!(w[0].sen >= w[1].sen && w[0].spe <= w[1].spe);
        }
    }

    #[test]
    fn mcnemar_matches_oracles(b in 0u64..60, c in 0u64..60) {
        let p = mcnemar_from_counts(b, c);
        prop_assert_eq!(p, mcnemar_from_counts(c, b));
        let n = b + c;
        if n == 0 {
            prop_assert_eq!(p, 1.0);
        } else if n < 25 {
            prop_assert!((p - binom_oracle(b, c)).abs() < 1e-12);
        } else {
            let d = (b as f64 - c as f64).abs() - 1.0;
            let expect = chi2_oracle(d * d / n as f64);
            prop_assert!((p - expect).abs() < 1e-9 || (p - expect).abs() < 1e-6 * expect, "{} vs {}", p, expect);
        }
    }

    #[test]
    fn kfold_partitions_and_stratifies(n_pos in 5usize..60, n_neg in 5usize..60, k in 2usize..6, seed in 0u64..100) {
        let labels: Vec<u8> = (0..n_pos + n_neg).map(|i| u8::from(i < n_pos)).collect();
        let f = stratified_kfold(&labels, k, seed).unwrap();
        let mut seen = vec![0; labels.len()];
        for fold in 0..k {
            let test = f.test_indices(fold);
            let pos = test.iter().filter(|&&i| labels[i] == 1).count();
            prop_assert!(pos == n_pos / k || pos == n_pos.div_ceil(k));
            for &i in &test {
                seen[i] += 1;
            }
            let train = f.train_indices(fold);
            prop_assert_eq!(train.len() + test.len(), labels.len());
            prop_assert!(train.iter().all(|i| !test.contains(i)));
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
    }
}

#[test]
fn mcnemar_frozen_values() {
    // scipy.stats: binomtest(5, 20), binomtest(3, 12), chi2.sf(19²/80, 1), chi2.sf(8²/41, 1)
    assert!((mcnemar_from_counts(5, 15) - 0.04138946533203125).abs() < 1e-15);
    assert!((mcnemar_from_counts(3, 9) - 0.14599609375).abs() < 1e-15);
    assert!((mcnemar_from_counts(30, 50) - 0.03364802587476163).abs() < 1e-12);
    assert!((mcnemar_from_counts(16, 25) - 0.21152242941072538).abs() < 1e-12);
}

fn tiny_cohort(n: usize, seed: u64) -> Vec<LabeledSubject> {
    let cfg = ModelConfig::tiny();
    let spec = CohortSpec {
        n_subjects: n,
        ..CohortSpec::default()
    };
    let shape = FrameShape {
        slices: cfg.slices,
        height: cfg.height,
        width: cfg.width,
    };
    generate_cohort_shaped(&spec, shape, cfg.frames, seed).unwrap()
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        stage_epochs: [1, 1, 1],
        pool_epochs: 1,
        learning_rate: 3e-3,
        batch_size: 4,
        weights: LossWeights {
            alpha: vec![0.9],
            ..LossWeights::default()
        },
        ..TrainConfig::desk()
    }
}

#[test]
fn splits_are_disjoint_and_cover_the_cohort() {
    let cohort = tiny_cohort(40, 3);
    let s = splits(&cohort, Protocol::Holdout { test_fraction: 0.2 }, 0.2, 9).unwrap();
    assert_eq!(s.len(), 1);
    let mut all: Vec<usize> = s[0].fit.iter().chain(&s[0].validation).chain(&s[0].test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..40).collect::<Vec<_>>());
    assert_eq!(s[0].test.len(), 8);
    assert_eq!(s, splits(&cohort, Protocol::Holdout { test_fraction: 0.2 }, 0.2, 9).unwrap());

    let cv = splits(&cohort, Protocol::CrossValidation { folds: 4 }, 0.25, 9).unwrap();
    let mut tests: Vec<usize> = cv.iter().flat_map(|s| s.test.clone()).collect();
    tests.sort_unstable();
    assert_eq!(tests, (0..40).collect::<Vec<_>>());
    for s in &cv {
        assert!(s.fit.iter().chain(&s.validation).all(|i| !s.test.contains(i)));
    }
}

#[test]
fn settings_validation() {
    assert!(EvalSettings::default().validate().is_ok());
    assert!(EvalSettings::cross_validation(1).validate().is_err());
    let dup = EvalSettings {
        methods: vec![Method::Baseline, Method::Baseline],
        ..EvalSettings::default()
    };
    assert!(dup.validate().is_err());
    let bad = EvalSettings {
        protocol: Protocol::Holdout { test_fraction: 1.0 },
        ..EvalSettings::default()
    };
    assert!(bad.validate().is_err());
    let toml_text = "methods = [\"baseline\", \"vae_primary_concept\"]\n[protocol]\nkind = \"cross_validation\"\nfolds = 5\n";
    let parsed: EvalSettings = toml::from_str(toml_text).unwrap();
    assert_eq!(parsed.protocol, Protocol::CrossValidation { folds: 5 });
    assert_eq!(parsed.methods, vec![Method::Baseline, Method::VaePrimaryConcept]);
}

#[test]
fn tiny_holdout_report_has_the_expected_shape() {
    let cohort = tiny_cohort(30, 5);
    let pool: Vec<_> = cohort.iter().take(4).map(|s| s.sequence.clone()).collect();
    let dir = tempfile::tempdir().unwrap();
    let settings = EvalSettings {
        protocol: Protocol::Holdout { test_fraction: 0.3 },
        ..EvalSettings::default()
    };
    let (report, sp, models) = evaluate(&tiny_train(), &ModelConfig::tiny(), &cohort, &pool, &settings, Some(dir.path())).unwrap();
    assert_eq!(models.len(), 1);
    assert!(dir.path().join("baseline.ckpt").exists());
    assert_eq!(report.n_subjects, 30);
    assert_eq!(report.methods.len(), 3);
    let names: Vec<&str> = report.methods.iter().map(|r| r.method.name()).collect();
    assert_eq!(names, ["baseline", "vae_primary", "vae_primary_concept"]);

    let base = report.row(Method::Baseline).unwrap();
    assert!(base.dice.is_none() && base.mcnemar_p_vs_baseline.is_none() && base.concept.is_none());
    let full = report.row(Method::VaePrimaryConcept).unwrap();
    assert!(full.dice.is_some() && full.mcnemar_p_vs_baseline.is_some());
    assert!(full.concept.as_ref().unwrap().contains_key("SF"));
    assert!(report.row(Method::VaePrimary).unwrap().concept.is_none());

    for r in &report.methods {
        for v in [r.rates.bacc, r.rates.sen, r.rates.spe, r.validation_selected.rates.bacc] {
            assert!((0.0..=100.0).contains(&v));
            assert!(((v * 100.0).round() - v * 100.0).abs() < 1e-6, "{v} not rounded to 2 dp");
        }
        assert_eq!(r.validation_selected.thresholds.len(), 1);
    }

    // recomputing from the same models gives the same report
    let again = compare_methods(&cohort, &sp, &models, &settings, &ModelConfig::tiny(), tiny_train().seed).unwrap();
    assert_eq!(again, report);

    let json = serde_json::to_value(&report).unwrap();
    let row = &json["methods"][2];
    for key in ["method", "bacc", "sen", "spe", "dice", "mcnemar_p_vs_baseline", "concept", "validation_selected"] {
        assert!(row.get(key).is_some(), "missing {key}");
    }
    assert!(json["methods"][0]["dice"].is_null());
    assert_eq!(json["protocol"]["kind"], "holdout");
}

#[test]
fn test_subjects_do_not_influence_the_models() {
    let cohort = tiny_cohort(24, 8);
    let pool: Vec<_> = cohort.iter().take(4).map(|s| s.sequence.clone()).collect();
    let settings = EvalSettings {
        protocol: Protocol::Holdout { test_fraction: 0.25 },
        methods: vec![Method::VaePrimary],
    };
    let cfg = tiny_train();
    let (_, sp, models) = evaluate(&cfg, &ModelConfig::tiny(), &cohort, &pool, &settings, None).unwrap();
    // scramble every test subject and retrain
    let mut altered = cohort.clone();
    for &i in &sp[0].test {
        altered[i].sequence = cohort[(i + 1) % cohort.len()].sequence.clone();
    }
    let (_, sp2, models2) = evaluate(&cfg, &ModelConfig::tiny(), &altered, &pool, &settings, None).unwrap();
    assert_eq!(sp, sp2);
    let bytes = |m: &FoldModels| {
        let mut buf = Vec::new();
        let ck = m.stages.iter().find(|c| c.header.stage == 2).unwrap();
        crate::model::write_checkpoint(ck, &mut buf).unwrap();
        buf
    };
    assert_eq!(bytes(&models[0]), bytes(&models2[0]));
}
