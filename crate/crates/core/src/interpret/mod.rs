//! Latent-space interpretation: PCA of per-subject latent means, decoding of
//! group means, M-mode profiles and traversals across the primary decision
//! boundary.

mod render;

pub use render::{
    mmode_image, mmode_png, scatter_image, scatter_png, sequence_image, sequence_png, traversal_image, traversal_png,
    write_coords_csv, PALETTE,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassProbs, Model};
use crate::phantom::{LabeledSubject, SegFrame, SegSequence, LV_BLOOD, LV_MYO, RV_BLOOD};

/// One row per subject: the subject's T latent means, concatenated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMatrix {
    pub frames: usize,
    pub latent_dim: usize,
    pub rows: Vec<Vec<f64>>,
    pub y: Vec<u8>,
    pub y_k: Vec<Vec<u8>>,
    pub ids: Vec<u64>,
}

impl LatentMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row `i` split back into its `T` per-frame vectors.
    pub fn frames_of(&self, i: usize) -> Vec<Vec<f64>> {
        self.rows[i].chunks(self.latent_dim).map(<[f64]>::to_vec).collect()
    }
}

pub fn collect_latents(model: &Model, subjects: &[LabeledSubject]) -> Result<LatentMatrix> {
    let mut out = LatentMatrix {
        frames: model.config.frames,
        latent_dim: model.config.latent_dim,
        rows: Vec::with_capacity(subjects.len()),
        y: Vec::with_capacity(subjects.len()),
        y_k: Vec::with_capacity(subjects.len()),
        ids: Vec::with_capacity(subjects.len()),
    };
    for s in subjects {
        let code = model.encode_sequence(&s.sequence)?;
        out.rows.push(code.mu.concat());
        out.y.push(s.y);
        out.y_k.push(s.y_k.clone());
        out.ids.push(s.seed);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca2 {
    /// `n × 2` projections of the centred rows
    pub coords: Vec<[f64; 2]>,
    pub explained: [f64; 2],
    /// unit principal directions
    pub components: [Vec<f64>; 2],
    pub mean: Vec<f64>,
}

/// Top two principal components by SVD of the centred data. Each
/// component's largest-magnitude loading is made positive.
pub fn pca2(rows: &[Vec<f64>]) -> Result<Pca2> {
    let n = rows.len();
    if n < 3 {
        return Err(Error::degenerate(format!("PCA needs at least 3 rows, got {n}")));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("rows must be nonempty and of equal length"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite entry"));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::degenerate("SVD did not converge"))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let mut components: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    let mut explained = [0.0; 2];
    for (c, slot) in components.iter_mut().enumerate() {
        let Some(&k) = order.get(c) else { break };
        let mut v: Vec<f64> = v_t.row(k).iter().copied().collect();
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        *slot = v;
        explained[c] = if total > 0.0 { sv[k] * sv[k] / total } else { 0.0 };
    }
    let coords = (0..n)
        .map(|i| {
            let row = x.row(i);
            let p = |v: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            [p(&components[0]), p(&components[1])]
        })
        .collect();
    Ok(Pca2 {
        coords,
        explained,
        components,
        mean,
    })
}

/// Which subjects form the concept group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// ground-truth concept label
    ByLabel,
    /// concept classifier output ≥ 0.5
    ByPrediction,
}

impl std::str::FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label" | "by-label" | "by_label" => Ok(Selector::ByLabel),
            "prediction" | "by-prediction" | "by_prediction" => Ok(Selector::ByPrediction),
            _ => Err(Error::invalid(format!("unknown selector '{s}' (label | prediction)"))),
        }
    }
}

/// Decoded group mean: averaged latent means per frame, decoded and argmaxed.
#[derive(Debug, Clone)]
pub struct GroupDecoding {
    pub members: Vec<usize>,
    pub mean: Vec<Vec<f64>>,
    pub probs: Vec<ClassProbs>,
    pub sequence: SegSequence,
}

/// Indices of subjects whose concept `k` is `value` under `selector`.
pub fn select_group(model: &Model, subjects: &[LabeledSubject], selector: Selector, k: usize, value: u8) -> Result<Vec<usize>> {
    if k >= model.config.concepts.len() {
        return Err(Error::invalid(format!("concept {k} does not exist")));
    }
    let mut out = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        let v = match selector {
            Selector::ByLabel => *s
                .y_k
                .get(k)
                .ok_or_else(|| Error::invalid(format!("subject {} lacks concept label {k}", s.seed)))?,
            Selector::ByPrediction => {
                let m = model.encode_sequence(&s.sequence)?.mu;
                u8::from(model.classify_concept(&m, k)? >= 0.5)
            }
        };
        if v == value {
            out.push(i);
        }
    }
    Ok(out)
}

/// Decodes the per-frame mean of the latent means of `members`.
pub fn decode_group_mean(model: &Model, subjects: &[LabeledSubject], members: &[usize]) -> Result<GroupDecoding> {
    if members.is_empty() {
        return Err(Error::degenerate("the selected group is empty"));
    }
    let (t, d) = (model.config.frames, model.config.latent_dim);
    let mut mean = vec![vec![0.0; d]; t];
    for &i in members {
        let s = subjects
            .get(i)
            .ok_or_else(|| Error::invalid(format!("subject index {i} out of range")))?;
        let code = model.encode_sequence(&s.sequence)?;
        for (acc, mu) in mean.iter_mut().zip(&code.mu) {
            for (a, v) in acc.iter_mut().zip(mu) {
                *a += v;
            }
        }
    }
    let n = members.len() as f64;
    mean.iter_mut().flatten().for_each(|v| *v /= n);
    let probs = model.decode_many(&mean)?;
    let sequence = SegSequence {
        frames: probs.iter().map(ClassProbs::argmax).collect(),
        frame_phase: crate::phantom::uniform_phases(t),
    };
    Ok(GroupDecoding {
        members: members.to_vec(),
        mean,
        probs,
        sequence,
    })
}

/// Mean decoding of the subjects that have concept `k` under `selector`.
pub fn concept_mean_decode(model: &Model, subjects: &[LabeledSubject], selector: Selector, k: usize) -> Result<GroupDecoding> {
    let members = select_group(model, subjects, selector, k, 1)?;
    decode_group_mean(model, subjects, &members)
}

/// Class ids sampled along a line, one column per frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MModeImage {
    /// samples per column
    pub length: usize,
    pub frames: usize,
    /// `data[i * frames + t]`: sample `i` of frame `t`
    pub data: Vec<u8>,
    /// `(x, y)` pixel coordinates
    pub p0: (usize, usize),
    pub p1: (usize, usize),
    pub slice: usize,
}

impl MModeImage {
    pub fn get(&self, i: usize, t: usize) -> u8 {
        self.data[i * self.frames + t]
    }

    pub fn column(&self, t: usize) -> Vec<u8> {
        (0..self.length).map(|i| self.get(i, t)).collect()
    }
}

/// Integer sample points of the segment `p0 → p1`, nearest pixel.
pub fn line_points(p0: (usize, usize), p1: (usize, usize)) -> Vec<(usize, usize)> {
    let dx = p1.0 as f64 - p0.0 as f64;
    let dy = p1.1 as f64 - p0.1 as f64;
    let len = dx.abs().max(dy.abs()) as usize + 1;
    if len == 1 {
        return vec![p0];
    }
    (0..len)
        .map(|i| {
            let f = i as f64 / (len - 1) as f64;
            (
                (p0.0 as f64 + f * dx).round() as usize,
                (p0.1 as f64 + f * dy).round() as usize,
            )
        })
        .collect()
}

pub fn mmode(seq: &SegSequence, slice: usize, p0: (usize, usize), p1: (usize, usize)) -> Result<MModeImage> {
    let (s, h, w) = seq.shape();
    if seq.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    if slice >= s {
        return Err(Error::invalid(format!("slice {slice} out of range (S = {s})")));
    }
    for (x, y) in [p0, p1] {
        if x >= w || y >= h {
            return Err(Error::invalid(format!("endpoint ({x}, {y}) outside the {h}x{w} grid")));
        }
    }
    let pts = line_points(p0, p1);
    let frames = seq.frames.len();
    let mut data = vec![0u8; pts.len() * frames];
    for (t, f) in seq.frames.iter().enumerate() {
        for (i, &(x, y)) in pts.iter().enumerate() {
            data[i * frames + t] = f.get(slice, y, x);
        }
    }
    Ok(MModeImage {
        length: pts.len(),
        frames,
        data,
        p0,
        p1,
        slice,
    })
}

fn centroid(frame: &SegFrame, slice: usize, classes: &[u8]) -> Option<(f64, f64)> {
    let (_, h, w) = frame.shape();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if classes.contains(&frame.get(slice, y, x)) {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

/// Horizontal line through the LV and RV centroids of `slice` in the first
/// frame, extended by half their distance on both sides.
pub fn default_mmode_line(seq: &SegSequence, slice: usize) -> Result<((usize, usize), (usize, usize))> {
    let f = seq.frames.first().ok_or_else(|| Error::invalid("empty sequence"))?;
    let (_, h, w) = f.shape();
    let lv = centroid(f, slice, &[LV_BLOOD, LV_MYO]).ok_or_else(|| Error::degenerate("no LV in the first frame"))?;
    let rv = centroid(f, slice, &[RV_BLOOD]).ok_or_else(|| Error::degenerate("no RV in the first frame"))?;
    let y = ((lv.1 + rv.1) / 2.0).round().clamp(0.0, (h - 1) as f64) as usize;
    let (a, b) = if rv.0 <= lv.0 { (rv.0, lv.0) } else { (lv.0, rv.0) };
    let pad = (b - a) / 2.0;
    let x0 = (a - pad).round().clamp(0.0, (w - 1) as f64) as usize;
    let x1 = (b + pad).round().clamp(0.0, (w - 1) as f64) as usize;
    Ok(((x0, y), (x1, y)))
}

/// Septal edge of the LV (blood pool + myocardium) on the rows around the
/// LV centroid of frame 0: per row, the half-integer column where the LV run
/// through the centroid column starts on the septal (low-x) side. Averaged
/// over `2·half_rows + 1` rows; `None` when the LV is missing.
pub fn septal_edge(frame: &SegFrame, slice: usize, center: (f64, f64), half_rows: usize) -> Option<f64> {
    let (_, h, w) = frame.shape();
    let cx = center.0.round() as isize;
    let cy = center.1.round() as isize;
    let lv = |y: usize, x: usize| matches!(frame.get(slice, y, x), LV_BLOOD | LV_MYO);
    let mut acc = 0.0;
    let mut n = 0usize;
    for dy in -(half_rows as isize)..=half_rows as isize {
        let y = cy + dy;
        if y < 0 || y >= h as isize || cx < 0 || cx >= w as isize {
            continue;
        }
        let y = y as usize;
        let mut x = cx as usize;
        if !lv(y, x) {
            continue;
        }
        while x > 0 && lv(y, x - 1) {
            x -= 1;
        }
        acc += x as f64 - 0.5;
        n += 1;
    }
    (n > 0).then(|| acc / n as f64)
}

/// Rows averaged by [`septal_displacement`] on either side of the centre row.
pub const SEPTAL_HALF_ROWS: usize = 2;

/// Mean inward (towards +x) shift of the septal LV edge over frames with
/// `0 < phase < 0.2`, relative to frame 0, averaged over slices.
pub fn septal_displacement(seq: &SegSequence) -> Result<f64> {
    let f0 = seq.frames.first().ok_or_else(|| Error::invalid("empty sequence"))?;
    let (s, _, _) = f0.shape();
    let mut acc = 0.0;
    let mut n = 0usize;
    for slice in 0..s {
        let Some(c) = centroid(f0, slice, &[LV_BLOOD, LV_MYO]) else { continue };
        let Some(e0) = septal_edge(f0, slice, c, SEPTAL_HALF_ROWS) else { continue };
        for (f, &ph) in seq.frames.iter().zip(&seq.frame_phase) {
            if ph > 0.0 && ph < 0.2 {
                if let Some(e) = septal_edge(f, slice, c, SEPTAL_HALF_ROWS) {
                    acc += e - e0;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::degenerate("no early-systolic frame with a visible LV"));
    }
    Ok(acc / n as f64)
}

#[derive(Debug, Clone)]
pub struct TraversalPoint {
    pub lambda: f64,
    pub sequence: SegSequence,
    /// primary classifier output at the traversed latent sequence
    pub y_hat: f64,
}

/// `steps` evenly spaced points in `[-span, span]`; a single step is 0.
pub fn traversal_lambdas(steps: usize, span: f64) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..steps)
            .map(|i| -span + 2.0 * span * i as f64 / (steps - 1) as f64)
            .collect(),
    }
}

/// Walks the flattened latent space along the difference of the primary
/// class means, starting from their midpoint; each point is decoded frame by
/// frame and scored by the primary classifier.
pub fn traverse_boundary(model: &Model, subjects: &[LabeledSubject], steps: usize, span: f64) -> Result<Vec<TraversalPoint>> {
    if steps == 0 {
        return Err(Error::invalid("steps must be >= 1"));
    }
    if !span.is_finite() {
        return Err(Error::invalid("span must be finite"));
    }
    let lat = collect_latents(model, subjects)?;
    let width = lat.frames * lat.latent_dim;
    let mut sums = [vec![0.0; width], vec![0.0; width]];
    let mut counts = [0usize; 2];
    for (row, &y) in lat.rows.iter().zip(&lat.y) {
        let c = usize::from(y != 0);
        counts[c] += 1;
        for (a, v) in sums[c].iter_mut().zip(row) {
            *a += v;
        }
    }
    if counts.contains(&0) {
        return Err(Error::degenerate("both primary classes are needed for a traversal"));
    }
    let means: Vec<Vec<f64>> = (0..2)
        .map(|c| sums[c].iter().map(|v| v / counts[c] as f64).collect())
        .collect();
    let dir: Vec<f64> = means[1].iter().zip(&means[0]).map(|(a, b)| a - b).collect();
    let mid: Vec<f64> = means[1].iter().zip(&means[0]).map(|(a, b)| 0.5 * (a + b)).collect();
    traversal_lambdas(steps, span)
        .into_iter()
        .map(|lambda| {
            let m: Vec<Vec<f64>> = mid
                .iter()
                .zip(&dir)
                .map(|(c, d)| c + lambda * d)
                .collect::<Vec<_>>()
                .chunks(lat.latent_dim)
                .map(<[f64]>::to_vec)
                .collect();
            let probs = model.decode_many(&m)?;
            Ok(TraversalPoint {
                lambda,
                sequence: SegSequence {
                    frames: probs.iter().map(ClassProbs::argmax).collect(),
                    frame_phase: crate::phantom::uniform_phases(lat.frames),
                },
                y_hat: model.classify_primary(&m)?,
            })
        })
        .collect()
}

/// Logistic-regression probe on low-dimensional features, fitted by Newton
/// iterations with a small ridge; returns training accuracy.
pub fn linear_probe_accuracy(x: &[[f64; 2]], y: &[u8]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::invalid("probe inputs must be nonempty and of equal length"));
    }
    // standardize so the ridge acts evenly
    let n = x.len() as f64;
    let mut mu = [0.0; 2];
    let mut sd = [0.0; 2];
    for j in 0..2 {
        mu[j] = x.iter().map(|r| r[j]).sum::<f64>() / n;
        sd[j] = (x.iter().map(|r| (r[j] - mu[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    }
    let feats: Vec<[f64; 3]> = x
        .iter()
        .map(|r| [1.0, (r[0] - mu[0]) / sd[0], (r[1] - mu[1]) / sd[1]])
        .collect();
    let mut w = nalgebra::Vector3::<f64>::zeros();
    const RIDGE: f64 = 1e-3;
    for _ in 0..50 {
        let mut g = nalgebra::Vector3::<f64>::zeros();
        let mut hm = nalgebra::Matrix3::<f64>::identity() * RIDGE;
        g += w * RIDGE;
        for (f, &t) in feats.iter().zip(y) {
            let v = nalgebra::Vector3::new(f[0], f[1], f[2]);
            let p = 1.0 / (1.0 + (-w.dot(&v)).exp());
            g += v * (p - f64::from(t));
            hm += v * v.transpose() * (p * (1.0 - p)).max(1e-12);
        }
        let Some(step) = hm.lu().solve(&g) else { break };
        w -= step;
        if step.norm() < 1e-10 {
            break;
        }
    }
    let correct = feats
        .iter()
        .zip(y)
        .filter(|(f, &t)| {
            let z = w[0] * f[0] + w[1] * f[1] + w[2] * f[2];
            u8::from(z >= 0.0) == t
        })
        .count();
    Ok(correct as f64 / n)
}

#[cfg(test)]
mod tests;
