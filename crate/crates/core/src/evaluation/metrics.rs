use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::phantom::SegFrame;
use crate::rng;

/// Mean per-class Dice over `classes`; a class absent from both maps scores 1.
pub fn dice(a: &SegFrame, b: &SegFrame, classes: &[u8]) -> Result<f64> {
    if a.shape() != b.shape() || a.labels.len() != b.labels.len() {
        return Err(Error::invalid(format!(
            "dice: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    if classes.is_empty() {
        return Err(Error::invalid("dice: no classes requested"));
    }
    let mut total = 0.0;
    for &c in classes {
        let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.labels.iter().zip(&b.labels) {
            let (ia, ib) = (x == c, y == c);
            na += ia as usize;
            nb += ib as usize;
            both += (ia && ib) as usize;
        }
        total += if na + nb == 0 {
            1.0
        } else {
            2.0 * both as f64 / (na + nb) as f64
        };
    }
    Ok(total / classes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(labels: &[u8], preds: &[u8]) -> Result<Self> {
        if labels.len() != preds.len() {
            return Err(Error::invalid("labels and predictions differ in length"));
        }
        let mut c = Self::default();
        for (&y, &p) in labels.iter().zip(preds) {
            match (y != 0, p != 0) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    /// Predicts positive when `score >= threshold`.
    pub fn at_threshold(labels: &[u8], scores: &[f64], threshold: f64) -> Result<Self> {
        let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s >= threshold)).collect();
        Self::from_predictions(labels, &preds)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Sensitivity; 0 when there are no positives.
    pub fn sen(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn spe(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn bacc(&self) -> f64 {
        (self.sen() + self.spe()) / 2.0
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub sen: f64,
    pub spe: f64,
    pub tp: usize,
    pub tn: usize,
}

/// Points ordered by increasing threshold, from the `-inf` sentinel (all
/// positive) to the `+inf` sentinel (all negative).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub positives: usize,
    pub negatives: usize,
    pub points: Vec<RocPoint>,
}

fn check_binary(labels: &[u8], scores: &[f64]) -> Result<(usize, usize)> {
    if labels.len() != scores.len() {
        return Err(Error::invalid("labels and scores differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let p = labels.iter().filter(|&&y| y != 0).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::degenerate("ROC needs both classes present"));
    }
    Ok((p, n))
}

pub fn roc(labels: &[u8], scores: &[f64]) -> Result<RocCurve> {
    let (p, n) = check_binary(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sweeping upwards: at threshold s, subjects with score < s are negative
    let mut points = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        sen: 1.0,
        spe: 0.0,
        tp: p,
        tn: 0,
    }];
    let (mut tp, mut tn) = (p, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        points.push(RocPoint {
            threshold: s,
            sen: tp as f64 / p as f64,
            spe: tn as f64 / n as f64,
            tp,
            tn,
        });
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] != 0 {
                tp -= 1;
            } else {
                tn += 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint {
        threshold: f64::INFINITY,
        sen: 0.0,
        spe: 1.0,
        tp: 0,
        tn: n,
    });
    Ok(RocCurve {
        positives: p,
        negatives: n,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sen: f64,
    pub spe: f64,
    pub bacc: f64,
}

impl OperatingPoint {
    pub fn from_rates(threshold: f64, sen: f64, spe: f64) -> Self {
        Self {
            threshold,
            sen,
            spe,
            bacc: (sen + spe) / 2.0,
        }
    }

    pub fn youden_index(&self) -> f64 {
        self.sen + self.spe - 1.0
    }
}

/// Maximizes `SEN + SPE - 1`, comparing exactly in integer arithmetic;
/// ties go to the lowest threshold.
pub fn youden(curve: &RocCurve) -> Result<OperatingPoint> {
    let (p, n) = (curve.positives as u128, curve.negatives as u128);
    let best = curve
        .points
        .iter()
        .fold(None::<&RocPoint>, |best, pt| match best {
            Some(b) if (pt.tp as u128) * n + (pt.tn as u128) * p <= (b.tp as u128) * n + (b.tn as u128) * p => {
                Some(b)
            }
            _ => Some(pt),
        })
        .ok_or_else(|| Error::invalid("empty ROC curve"))?;
    Ok(OperatingPoint::from_rates(best.threshold, best.sen, best.spe))
}

/// Paired test of two classifiers on the same subjects.
pub fn mcnemar(preds_a: &[u8], preds_b: &[u8], labels: &[u8]) -> Result<f64> {
    if preds_a.len() != labels.len() || preds_b.len() != labels.len() {
        return Err(Error::invalid("mcnemar: inputs differ in length"));
    }
    let mut b = 0u64;
    let mut c = 0u64;
    for ((&pa, &pb), &y) in preds_a.iter().zip(preds_b).zip(labels) {
        let ok_a = (pa != 0) == (y != 0);
        let ok_b = (pb != 0) == (y != 0);
        match (ok_a, ok_b) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(mcnemar_from_counts(b, c))
}

/// Exact two-sided binomial test below 25 discordant pairs, continuity
/// corrected chi-squared otherwise.
pub fn mcnemar_from_counts(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let p = if n < 25 {
        let k = b.min(c);
        // C(n, i) is exact in f64 for n < 25
        let mut coef = 1.0f64;
        let mut tail = 0.0;
        for i in 0..=k {
            if i > 0 {
                coef = coef * (n - i + 1) as f64 / i as f64;
            }
            tail += coef;
        }
        2.0 * tail * 0.5f64.powi(n as i32)
    } else {
        let d = (b as f64 - c as f64).abs() - 1.0;
        let stat = d * d / n as f64;
        ChiSquared::new(1.0).map(|x| x.sf(stat)).unwrap_or(f64::NAN)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    /// fold id of every subject
    pub folds: Vec<usize>,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }
}

/// Shuffles each class with a seeded stream and deals it round-robin. The
/// negatives continue from the fold after the last positive, so fold sizes
/// also differ by at most one.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::config("folds", "need at least 2 folds"));
    }
    let mut folds = vec![0usize; labels.len()];
    let mut next = 0usize;
    for (class, positive) in [(1u64, true), (0u64, false)] {
        let mut members: Vec<usize> = (0..labels.len())
            .filter(|&i| (labels[i] != 0) == positive)
            .collect();
        if members.len() < k {
            return Err(Error::config(
                "folds",
                format!("class {class} has {} members, fewer than k = {k}", members.len()),
            ));
        }
        members.shuffle(&mut rng::stream(seed, &[0xF01D, class]));
        for i in members {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldAssignment { k, folds })
}

/// Splits indices `0..strata.len()` into `(keep, held_out)` with
/// `round(fraction · n)` held out, allocated across strata by largest
/// remainder and drawn at random within each stratum.
pub fn stratified_split(strata: &[u32], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config("fraction", "must lie in [0, 1)"));
    }
    let mut keys: Vec<u32> = strata.to_vec();
    keys.sort_unstable();
    keys.dedup();
    let groups: Vec<Vec<usize>> = keys
        .iter()
        .map(|&k| (0..strata.len()).filter(|&i| strata[i] == k).collect())
        .collect();
    let target = (fraction * strata.len() as f64).round() as usize;
    let mut quota: Vec<usize> = groups
        .iter()
        .map(|g| (fraction * g.len() as f64).floor() as usize)
        .collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let rem = |g: usize| fraction * groups[g].len() as f64 - quota[g] as f64;
    order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
    let mut missing = target.saturating_sub(quota.iter().sum());
    for &g in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if quota[g] < groups[g].len() {
            quota[g] += 1;
            missing -= 1;
        }
    }
    let mut keep = Vec::new();
    let mut held = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        let mut members = g.clone();
        members.shuffle(&mut rng::stream(seed, &[0x5B11, keys[gi] as u64]));
        held.extend_from_slice(&members[..quota[gi]]);
        keep.extend_from_slice(&members[quota[gi]..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    Ok((keep, held))
}
