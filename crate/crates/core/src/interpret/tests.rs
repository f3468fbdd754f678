use super::*;
use crate::model::ModelConfig;
use crate::phantom::{generate_cohort_shaped, render_sequence, CohortSpec, FrameShape, GenerativeFactors};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

fn factors(sf: f64) -> GenerativeFactors {
    GenerativeFactors {
        contraction_amplitude: 0.5,
        sf_amplitude: sf,
        hidden_factor: 0.5,
        base_radius: 12.0,
        center_x: 46.0,
        center_y: 40.0,
    }
}

fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..d).map(|j| rng.gen_range(-1.0..1.0) * (d - j) as f64).collect())
        .collect()
}

/// Top eigenvectors of the sample covariance, with the same sign rule.
fn covariance_oracle(rows: &[Vec<f64>]) -> ([Vec<f64>; 2], [f64; 2]) {
    let n = rows.len();
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let cov = DMatrix::from_fn(d, d, |a, b| {
        rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1) as f64
    });
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let trace: f64 = eig.eigenvalues.iter().sum();
    let pick = |k: usize| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let pivot = v.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    (
        [pick(0), pick(1)],
        [eig.eigenvalues[order[0]] / trace, eig.eigenvalues[order[1]] / trace],
    )
}

#[test]
fn pca_matches_covariance_eigenvectors() {
    let rows = random_rows(10, 6, 7);
    let pca = pca2(&rows).unwrap();
    let (comps, explained) = covariance_oracle(&rows);
    for k in 0..2 {
        for (a, b) in pca.components[k].iter().zip(&comps[k]) {
            assert!((a - b).abs() < 1e-8, "component {k}: {a} vs {b}");
        }
        assert!((pca.explained[k] - explained[k]).abs() < 1e-8);
    }
    for (i, r) in rows.iter().enumerate() {
        for k in 0..2 {
            let p: f64 = r.iter().zip(&pca.mean).zip(&comps[k]).map(|((x, m), v)| (x - m) * v).sum();
            assert!((pca.coords[i][k] - p).abs() < 1e-8);
        }
    }
}

#[test]
fn pca_on_rank_two_data_explains_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = [1.0, 2.0, 0.0, -1.0, 0.5];
    let b = [0.0, 1.0, 1.0, 1.0, -2.0];
    let rows: Vec<Vec<f64>> = (0..12)
        .map(|_| {
            let (s, t): (f64, f64) = (rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0));
            (0..5).map(|j| 4.0 + s * a[j] + t * b[j]).collect()
        })
        .collect();
    let pca = pca2(&rows).unwrap();
    assert!((pca.explained[0] + pca.explained[1] - 1.0).abs() < 1e-10);
    // projections preserve pairwise distances within the plane
    for i in 0..rows.len() {
        for j in 0..i {
            let d_full: f64 = rows[i].iter().zip(&rows[j]).map(|(x, y)| (x - y).powi(2)).sum();
            let d_pca = (pca.coords[i][0] - pca.coords[j][0]).powi(2) + (pca.coords[i][1] - pca.coords[j][1]).powi(2);
            assert!((d_full - d_pca).abs() < 1e-8);
        }
    }
}

#[test]
fn pca_rejects_small_or_ragged_input() {
    assert!(pca2(&random_rows(2, 4, 1)).is_err());
    assert!(pca2(&[vec![1.0, 2.0], vec![1.0], vec![0.0, 0.0]]).is_err());
    assert!(pca2(&[vec![1.0, f64::NAN], vec![1.0, 0.0], vec![0.0, 0.0]]).is_err());
    // identical rows are legal and project to the origin
    let pca = pca2(&vec![vec![1.0, 2.0, 3.0]; 4]).unwrap();
    assert!(pca.coords.iter().all(|c| c[0] == 0.0 && c[1] == 0.0));
    assert_eq!(pca.explained, [0.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pca_is_translation_invariant(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let rows = random_rows(8, 5, seed);
        let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let a = pca2(&rows).unwrap();
        let b = pca2(&moved).unwrap();
        for (p, q) in a.coords.iter().zip(&b.coords) {
            prop_assert!((p[0] - q[0]).abs() < 1e-7 && (p[1] - q[1]).abs() < 1e-7);
        }
    }

    #[test]
    fn pca_coords_are_centred_and_uncorrelated(seed in 0u64..1000) {
        let rows = random_rows(9, 4, seed);
        let pca = pca2(&rows).unwrap();
        let n = rows.len() as f64;
        let m0: f64 = pca.coords.iter().map(|c| c[0]).sum::<f64>() / n;
        let m1: f64 = pca.coords.iter().map(|c| c[1]).sum::<f64>() / n;
        let cross: f64 = pca.coords.iter().map(|c| c[0] * c[1]).sum::<f64>();
        let v0: f64 = pca.coords.iter().map(|c| c[0] * c[0]).sum::<f64>();
        let v1: f64 = pca.coords.iter().map(|c| c[1] * c[1]).sum::<f64>();
        prop_assert!(m0.abs() < 1e-9 && m1.abs() < 1e-9);
        prop_assert!(cross.abs() < 1e-8 * (1.0 + v0));
        prop_assert!(v0 >= v1 - 1e-9);
    }

    #[test]
    fn line_points_connect_the_endpoints(x0 in 0usize..80, y0 in 0usize..80, x1 in 0usize..80, y1 in 0usize..80) {
        let pts = line_points((x0, y0), (x1, y1));
        prop_assert_eq!(pts.len(), x0.abs_diff(x1).max(y0.abs_diff(y1)) + 1);
        prop_assert_eq!(pts[0], (x0, y0));
        prop_assert_eq!(*pts.last().unwrap(), (x1, y1));
        for w in pts.windows(2) {
            prop_assert!(w[0].0.abs_diff(w[1].0) <= 1 && w[0].1.abs_diff(w[1].1) <= 1);
        }
    }
}

#[test]
fn singleton_group_mean_is_the_subject_decoding() {
    let cohort = tiny_cohort(6, 11);
    let model = Model::new(ModelConfig::tiny(), 4).unwrap();
    for i in [0, 3] {
        let g = decode_group_mean(&model, &cohort, &[i]).unwrap();
        let mu = model.encode_sequence(&cohort[i].sequence).unwrap().mu;
        assert_eq!(g.mean, mu);
        assert_eq!(g.probs, model.decode_many(&mu).unwrap());
    }
    assert!(decode_group_mean(&model, &cohort, &[]).is_err());
    assert!(decode_group_mean(&model, &cohort, &[99]).is_err());
}

#[test]
fn group_mean_averages_latent_means() {
    let cohort = tiny_cohort(6, 12);
    let model = Model::new(ModelConfig::tiny(), 5).unwrap();
    let g = decode_group_mean(&model, &cohort, &[1, 2, 4]).unwrap();
    let codes: Vec<_> = [1, 2, 4].iter().map(|&i| model.encode_sequence(&cohort[i].sequence).unwrap().mu).collect();
    for t in 0..g.mean.len() {
        for j in 0..g.mean[t].len() {
            let m = codes.iter().map(|c| c[t][j]).sum::<f64>() / 3.0;
            assert!((g.mean[t][j] - m).abs() < 1e-12);
        }
    }
}

#[test]
fn selection_by_label_follows_concept_labels() {
    let cohort = tiny_cohort(10, 13);
    let model = Model::new(ModelConfig::tiny(), 1).unwrap();
    let with = select_group(&model, &cohort, Selector::ByLabel, 0, 1).unwrap();
    let without = select_group(&model, &cohort, Selector::ByLabel, 0, 0).unwrap();
    assert_eq!(with.len() + without.len(), cohort.len());
    assert!(with.iter().all(|&i| cohort[i].sf() == 1));
    let pred = select_group(&model, &cohort, Selector::ByPrediction, 0, 1).unwrap();
    let pred0 = select_group(&model, &cohort, Selector::ByPrediction, 0, 0).unwrap();
    assert_eq!(pred.len() + pred0.len(), cohort.len());
    assert!(select_group(&model, &cohort, Selector::ByLabel, 5, 1).is_err());
    assert_eq!("label".parse::<Selector>().unwrap(), Selector::ByLabel);
    assert_eq!("prediction".parse::<Selector>().unwrap(), Selector::ByPrediction);
    assert!("both".parse::<Selector>().is_err());
}

#[test]
fn mmode_column_depends_only_on_its_frame() {
    let seq = render_sequence(&factors(3.0), FrameShape::default(), 8).unwrap();
    let (p0, p1) = ((20, 40), (70, 40));
    let base = mmode(&seq, 1, p0, p1).unwrap();
    let mut changed = seq.clone();
    changed.frames[5] = changed.frames[0].clone();
    let other = mmode(&changed, 1, p0, p1).unwrap();
    for t in 0..8 {
        if t == 5 {
            assert_eq!(other.column(t), base.column(0));
        } else {
            assert_eq!(other.column(t), base.column(t));
        }
    }
}

#[test]
fn mmode_length_does_not_depend_on_frame_count() {
    let a = mmode(&render_sequence(&factors(0.0), FrameShape::default(), 5).unwrap(), 0, (10, 40), (70, 52)).unwrap();
    let b = mmode(&render_sequence(&factors(0.0), FrameShape::default(), 25).unwrap(), 0, (10, 40), (70, 52)).unwrap();
    assert_eq!(a.length, 61);
    assert_eq!(a.length, b.length);
    assert_eq!((a.frames, b.frames), (5, 25));
}

#[test]
fn mmode_of_contracting_disk_tracks_blood_pool_width() {
    let seq = render_sequence(&factors(0.0), FrameShape::default(), 25).unwrap();
    let (s, y) = (0, 40);
    let img = mmode(&seq, s, (0, y), (79, y)).unwrap();
    assert_eq!(img.length, 80);
    let mut widths = Vec::new();
    for (t, f) in seq.frames.iter().enumerate() {
        let direct = (0..80).filter(|&x| f.get(s, y, x) == LV_BLOOD).count();
        let from_mmode = img.column(t).iter().filter(|&&c| c == LV_BLOOD).count();
        assert_eq!(direct, from_mmode);
        widths.push(from_mmode);
    }
    // end-diastole wider than end-systole
    let es = (crate::phantom::ES_PHASE * 25.0).round() as usize;
    assert!(widths[0] > widths[es] + 4, "{widths:?}");
}

#[test]
fn mmode_rejects_bad_geometry() {
    let seq = render_sequence(&factors(0.0), FrameShape::default(), 3).unwrap();
    assert!(mmode(&seq, 3, (0, 0), (1, 1)).is_err());
    assert!(mmode(&seq, 0, (0, 0), (80, 1)).is_err());
    let single = mmode(&seq, 0, (5, 5), (5, 5)).unwrap();
    assert_eq!(single.length, 1);
}

#[test]
fn default_line_crosses_both_ventricles() {
    let seq = render_sequence(&factors(0.0), FrameShape::default(), 4).unwrap();
    let (p0, p1) = default_mmode_line(&seq, 1).unwrap();
    let img = mmode(&seq, 1, p0, p1).unwrap();
    let col = img.column(0);
    assert!(col.contains(&RV_BLOOD) && col.contains(&LV_BLOOD) && col.contains(&LV_MYO));
    assert_eq!(col[0], crate::phantom::BACKGROUND);
}

#[test]
fn septal_displacement_separates_sf() {
    let shape = FrameShape::default();
    for sf in [2.0, 2.5, 3.5, 4.5] {
        let d = septal_displacement(&render_sequence(&factors(sf), shape, 25).unwrap()).unwrap();
        assert!(d >= 1.0, "sf {sf}: {d}");
    }
    let d0 = septal_displacement(&render_sequence(&factors(0.0), shape, 25).unwrap()).unwrap();
    assert!(d0.abs() < 0.5, "no sf: {d0}");
}

#[test]
fn septal_edge_of_a_known_block() {
    let mut f = SegFrame::empty(1, 10, 10);
    for y in 3..7 {
        for x in 4..8 {
            f.set(0, y, x, if x == 4 { LV_MYO } else { LV_BLOOD });
        }
    }
    f.set(0, 5, 3, LV_MYO);
    // rows 3,4,6 start at 4; row 5 at 3; row 7 is empty
    let e = septal_edge(&f, 0, (5.5, 5.0), 2).unwrap();
    assert!((e - (3.5 * 3.0 + 2.5) / 4.0).abs() < 1e-12);
    assert!(septal_edge(&f, 0, (1.0, 1.0), 1).is_none());
}

#[test]
fn traversal_lambdas_are_symmetric() {
    assert!(traversal_lambdas(0, 1.0).is_empty());
    assert_eq!(traversal_lambdas(1, 1.5), vec![0.0]);
    let l = traversal_lambdas(9, 1.5);
    assert_eq!(l.len(), 9);
    assert_eq!((l[0], l[4], l[8]), (-1.5, 0.0, 1.5));
}

#[test]
fn single_step_traversal_decodes_the_midpoint() {
    let cohort = tiny_cohort(8, 21);
    let model = Model::new(ModelConfig::tiny(), 2).unwrap();
    let pts = traverse_boundary(&model, &cohort, 1, 1.5).unwrap();
    assert_eq!(pts.len(), 1);
    let codes: Vec<Vec<Vec<f64>>> = cohort.iter().map(|s| model.encode_sequence(&s.sequence).unwrap().mu).collect();
    let (t, d) = (model.config.frames, model.config.latent_dim);
    let mut mid = vec![vec![0.0; d]; t];
    for c in 0..2u8 {
        let idx: Vec<usize> = (0..cohort.len()).filter(|&i| cohort[i].y == c).collect();
        for f in 0..t {
            for j in 0..d {
                mid[f][j] += 0.5 * idx.iter().map(|&i| codes[i][f][j]).sum::<f64>() / idx.len() as f64;
            }
        }
    }
    let expect = model.classify_primary(&mid).unwrap();
    assert!((pts[0].y_hat - expect).abs() < 1e-9);
    let dec = model.decode_many(&mid).unwrap();
    let frames: Vec<SegFrame> = dec.iter().map(ClassProbs::argmax).collect();
    assert_eq!(pts[0].sequence.frames, frames);

    let many = traverse_boundary(&model, &cohort, 5, 1.0).unwrap();
    assert_eq!(many.iter().map(|p| p.lambda).collect::<Vec<_>>(), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    assert!((many[2].y_hat - expect).abs() < 1e-9);
    assert!(traverse_boundary(&model, &cohort, 0, 1.0).is_err());
}

#[test]
fn probe_on_separable_and_random_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<[f64; 2]> = (0..60).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let y: Vec<u8> = x.iter().map(|r| u8::from(2.0 * r[0] - r[1] > 0.1)).collect();
    assert_eq!(linear_probe_accuracy(&x, &y).unwrap(), 1.0);
    let y_rand: Vec<u8> = (0..60).map(|_| rng.gen_range(0..2)).collect();
    let acc = linear_probe_accuracy(&x, &y_rand).unwrap();
    assert!((0.4..0.8).contains(&acc), "{acc}");
    let y_const = vec![1u8; 60];
    assert_eq!(linear_probe_accuracy(&x, &y_const).unwrap(), 1.0);
    assert!(linear_probe_accuracy(&x, &y[..3]).is_err());
}

#[test]
fn artifacts_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = tiny_cohort(6, 31);
    let model = Model::new(ModelConfig::tiny(), 3).unwrap();
    let lat = collect_latents(&model, &cohort).unwrap();
    assert_eq!(lat.rows[0].len(), model.config.frames * model.config.latent_dim);
    let pca = pca2(&lat.rows).unwrap();
    write_coords_csv(&pca, &lat, &dir.path().join("coords.csv")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("coords.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "subject,pc1,pc2,y,y_k0");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with(&format!("{},", cohort[0].seed)));
    scatter_png(&pca, &lat, &dir.path().join("scatter.png")).unwrap();

    let seq = render_sequence(&factors(3.0), FrameShape::default(), 4).unwrap();
    let img = mmode(&seq, 0, (10, 40), (70, 40)).unwrap();
    let rgb = mmode_image(&img, 3);
    assert_eq!(rgb.dimensions(), (12, 61 * 3));
    assert_eq!(rgb.get_pixel(0, 0).0, PALETTE[0]);
    mmode_png(&img, 3, &dir.path().join("m.png")).unwrap();
    let strip = sequence_image(&seq, 0, Some(((10, 40), (70, 40)))).unwrap();
    assert_eq!(strip.dimensions(), (320, 80));
    assert_eq!(strip.get_pixel(10, 40).0, [255, 255, 255]);
    sequence_png(&seq, 0, None, &dir.path().join("s.png")).unwrap();
    assert!(image::open(dir.path().join("s.png")).is_ok());
}
