use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{total_loss, LossWeights, Model, ModelConfig, Path, Targets};
use crate::nn::Module;
use crate::phantom::{generate_cohort_shaped, CohortSpec, FrameShape, SegSequence};
use crate::rng;

pub const MAX_PARAMS: usize = 10_000;
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so parameters with vanishing
/// gradients are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub params: usize,
    pub max_rel_error: f64,
    /// flat parameter index of the worst mismatch
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// parameters whose central difference straddles a ReLU kink: the
    /// one-sided differences disagree and one of them matches the analytic value
    pub kinks: Vec<usize>,
    /// maximum relative error over the remaining parameters
    pub max_rel_error_smooth: f64,
}

/// Compares the analytic gradient of the joint loss (all terms active, fixed
/// noise) against central differences for every parameter in f64.
pub fn gradient_check(cfg: &ModelConfig, weights: &LossWeights, seed: u64) -> Result<GradientCheck> {
    let mut model = Model::<f64>::new(cfg.clone(), rng::derive_seed(seed, &[1]))?;
    // Biases start at zero, which puts ReLUs fed by all-zero inputs exactly on
    // their kink; jitter every parameter to reach a differentiable point.
    let mut jitter = rng::stream(seed, &[4]);
    model.visit_mut(&mut |p| {
        for v in p.value.iter_mut() {
            *v += jitter.gen_range(-0.1..0.1);
        }
    });
    let params = model.param_count();
    if params > MAX_PARAMS {
        return Err(Error::invalid(format!("{params} parameters; the check is meant for at most {MAX_PARAMS}")));
    }
    let spec = CohortSpec {
        n_subjects: 12,
        ..CohortSpec::default()
    };
    let shape = FrameShape {
        slices: cfg.slices,
        height: cfg.height,
        width: cfg.width,
    };
    let cohort = generate_cohort_shaped(&spec, shape, cfg.frames, rng::derive_seed(seed, &[2]))?;
    let batch = &cohort[..3];
    let seqs: Vec<&SegSequence> = batch.iter().map(|s| &s.sequence).collect();
    let y: Vec<u8> = batch.iter().map(|s| s.y).collect();
    let yk: Vec<Vec<u8>> = batch.iter().map(|s| s.y_k.clone()).collect();
    let targets = Targets { y: &y, y_k: &yk };
    let mut r = rng::stream(seed, &[3]);
    let eps: Vec<f64> = (0..seqs.len() * cfg.frames * cfg.latent_dim)
        .map(|_| r.sample::<f64, _>(StandardNormal))
        .collect();

    model.loss_and_grad(&seqs, Some(targets), Some(&eps), weights, Path::Full)?;
    let mut analytic = Vec::with_capacity(params);
    model.visit(&mut |p| analytic.extend_from_slice(&p.grad));

    let loss = |m: &Model<f64>| -> Result<f64> {
        let out = m.forward(&seqs, Some(&eps), Path::Full)?;
        Ok(total_loss(&out, &seqs, Some(targets), weights)?.total)
    };
    let mut report = GradientCheck {
        params,
        max_rel_error: 0.0,
        worst: 0,
        analytic: 0.0,
        numeric: 0.0,
        kinks: Vec::new(),
        max_rel_error_smooth: 0.0,
    };
    let base = loss(&model)?;
    let rel_err = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR);
    for idx in 0..params {
        let nudge = |m: &mut Model<f64>, delta: f64| {
            let mut i = 0;
            m.visit_mut(&mut |p| {
                if idx >= i && idx < i + p.value.len() {
                    p.value[idx - i] += delta;
                }
                i += p.value.len();
            });
        };
        let mut probe = model.clone();
        nudge(&mut probe, STEP);
        let plus = loss(&probe)?;
        let mut probe = model.clone();
        nudge(&mut probe, -STEP);
        let minus = loss(&probe)?;
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic[idx];
        let rel = rel_err(a, numeric);
        let forward = (plus - base) / STEP;
        let backward = (base - minus) / STEP;
        let kink = rel > 1e-4
            && rel_err(forward, backward) > 1e-3
            && (rel_err(a, forward) < 1e-3 || rel_err(a, backward) < 1e-3);
        if kink {
            report.kinks.push(idx);
        } else {
            report.max_rel_error_smooth = report.max_rel_error_smooth.max(rel);
        }
        if rel > report.max_rel_error {
            report = GradientCheck {
                max_rel_error: rel,
                worst: idx,
                analytic: a,
                numeric,
                kinks: std::mem::take(&mut report.kinks),
                ..report
            };
        }
    }
    Ok(report)
}
