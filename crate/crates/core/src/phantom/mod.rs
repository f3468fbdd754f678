//! Synthetic multi-slice segmentation cines with planted generative factors.
//!
//! Each subject is a short-axis stack of `S` slices rendered over `T` frames of
//! one cardiac cycle. The LV is a blood-pool disk inside a myocardial annulus
//! whose epicardium stays fixed while the wall thickens inward during systole;
//! the RV is a crescent wrapped around the septal side. Two factors drive the
//! labels:
//!
//! * `sf_amplitude` displaces the whole septal wall toward the LV centre during
//!   early systole (the septal-flash concept),
//! * `hidden_factor` sets the RV size and acts as a response driver that is
//!   independent of the septal flash.

mod dataset;
mod resample;

pub use dataset::{load_dataset, read_dataset, save_dataset, sidecar_path, write_dataset};
pub use resample::{apply_rigid, augment, augment_sequence, spatial_resample, temporal_resample};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const NUM_CLASSES: usize = 4;
pub const BACKGROUND: u8 = 0;
pub const LV_BLOOD: u8 = 1;
pub const LV_MYO: u8 = 2;
pub const RV_BLOOD: u8 = 3;

pub const DEFAULT_SLICES: usize = 3;
pub const DEFAULT_SIZE: usize = 80;
pub const DEFAULT_FRAMES: usize = 25;

/// Phase of peak contraction (end-systole).
pub const ES_PHASE: f64 = 0.35;

const SF_START: f64 = 0.02;
const SF_END: f64 = 0.2;
const SF_TAPER: f64 = 0.04;

const FACTOR_STREAM: u64 = 1;
const LABEL_STREAM: u64 = 2;
const POOL_STREAM: u64 = 3;

/// Label map of one time point: `slices` grids of `height × width` class ids,
/// stored slice-major then row then column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegFrame {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl SegFrame {
    pub fn empty(slices: usize, height: usize, width: usize) -> Self {
        Self {
            slices,
            height,
            width,
            labels: vec![BACKGROUND; slices * height * width],
        }
    }

    #[inline]
    pub fn index(&self, slice: usize, row: usize, col: usize) -> usize {
        (slice * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, slice: usize, row: usize, col: usize) -> u8 {
        self.labels[self.index(slice, row, col)]
    }

    #[inline]
    pub fn set(&mut self, slice: usize, row: usize, col: usize, label: u8) {
        let i = self.index(slice, row, col);
        self.labels[i] = label;
    }

    pub fn slice(&self, slice: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.labels[slice * n..(slice + 1) * n]
    }

    pub fn slice_mut(&mut self, slice: usize) -> &mut [u8] {
        let n = self.height * self.width;
        &mut self.labels[slice * n..(slice + 1) * n]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.slices, self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.slices * self.height * self.width {
            return Err(Error::invalid(format!(
                "frame holds {} labels, expected {}x{}x{}",
                self.labels.len(),
                self.slices,
                self.height,
                self.width
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::invalid(format!("class id {bad} outside 0..4")));
        }
        Ok(())
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn foreground_area(&self) -> usize {
        self.labels.iter().filter(|&&l| l != BACKGROUND).count()
    }
}

/// One cardiac cycle of frames with their phase fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegSequence {
    pub frames: Vec<SegFrame>,
    pub frame_phase: Vec<f64>,
}

impl SegSequence {
    /// Frames at uniform phases `t / T`.
    pub fn uniform(frames: Vec<SegFrame>) -> Self {
        let phases = uniform_phases(frames.len());
        Self {
            frames,
            frame_phase: phases,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.frames
            .first()
            .map(SegFrame::shape)
            .unwrap_or((0, 0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.frame_phase.len() {
            return Err(Error::invalid("frame and phase counts differ"));
        }
        if self.frames.is_empty() {
            return Err(Error::invalid("empty sequence"));
        }
        if self.frame_phase[0] != 0.0 {
            return Err(Error::invalid("first frame phase must be 0"));
        }
        if self.frame_phase.windows(2).any(|w| w[1] <= w[0]) || self.frame_phase.iter().any(|&p| p >= 1.0)
        {
            return Err(Error::invalid("frame phases must increase strictly within [0,1)"));
        }
        let shape = self.shape();
        for f in &self.frames {
            if f.shape() != shape {
                return Err(Error::invalid("frames differ in shape"));
            }
            f.validate()?;
        }
        Ok(())
    }
}

pub fn uniform_phases(t: usize) -> Vec<f64> {
    (0..t).map(|i| i as f64 / t as f64).collect()
}

/// Scalars from which every slice's geometry is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerativeFactors {
    /// Ejection-fraction analog in [0,1].
    pub contraction_amplitude: f64,
    /// Peak inward septal displacement in pixels; zero for subjects without SF.
    pub sf_amplitude: f64,
    /// Response driver independent of SF, in [0,1]; controls RV size.
    pub hidden_factor: f64,
    /// End-diastolic LV blood-pool radius of the most basal slice, pixels.
    pub base_radius: f64,
    pub center_x: f64,
    pub center_y: f64,
}

impl GenerativeFactors {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.contraction_amplitude,
            self.sf_amplitude,
            self.hidden_factor,
            self.base_radius,
            self.center_x,
            self.center_y,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("non-finite generative factor"));
        }
        if !(0.0..=1.0).contains(&self.contraction_amplitude) {
            return Err(Error::invalid("contraction_amplitude outside [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.hidden_factor) {
            return Err(Error::invalid("hidden_factor outside [0,1]"));
        }
        if self.sf_amplitude < 0.0 {
            return Err(Error::invalid("sf_amplitude must be >= 0"));
        }
        if self.base_radius <= 0.0 {
            return Err(Error::invalid("base_radius must be positive"));
        }
        Ok(())
    }

    pub fn has_sf(&self) -> bool {
        self.sf_amplitude > 0.0
    }

    /// End-diastolic blood-pool radius per slice; apical slices are smaller.
    pub fn base_radii(&self, slices: usize) -> Vec<f64> {
        (0..slices)
            .map(|s| self.base_radius * (1.0 - 0.07 * s as f64))
            .collect()
    }

    pub fn centers(&self, slices: usize) -> Vec<(f64, f64)> {
        vec![(self.center_x, self.center_y); slices]
    }

    pub fn slice_geometry(&self, slice: usize, slices: usize) -> SliceGeometry {
        let r_ed = self.base_radii(slices)[slice];
        let (cx, cy) = self.centers(slices)[slice];
        let r_epi = 1.45 * r_ed;
        let rv_radius_ed = r_epi * (0.75 + 0.5 * self.hidden_factor);
        SliceGeometry {
            cx,
            cy,
            r_ed,
            r_es: r_ed * (1.0 - 0.5 * self.contraction_amplitude),
            r_epi,
            rv_right: cx - 0.9 * r_epi + rv_radius_ed,
            rv_radius_ed,
            rv_radius_es: rv_radius_ed * (1.0 - 0.15 * self.contraction_amplitude),
            sf_amplitude: self.sf_amplitude,
        }
    }
}

/// Geometry of one slice; the RV circle keeps its septal-side extent
/// `rv_right` fixed while its radius shrinks in systole.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceGeometry {
    pub cx: f64,
    pub cy: f64,
    pub r_ed: f64,
    pub r_es: f64,
    pub r_epi: f64,
    pub rv_right: f64,
    pub rv_radius_ed: f64,
    pub rv_radius_es: f64,
    pub sf_amplitude: f64,
}

impl SliceGeometry {
    pub fn blood_radius(&self, phase: f64) -> f64 {
        self.r_ed - (self.r_ed - self.r_es) * contraction_profile(phase)
    }

    pub fn rv_radius(&self, phase: f64) -> f64 {
        self.rv_radius_ed - (self.rv_radius_ed - self.rv_radius_es) * contraction_profile(phase)
    }

    /// Inward septal displacement in pixels at `phase` along the septal axis.
    pub fn septal_shift(&self, phase: f64) -> f64 {
        self.sf_amplitude * septal_flash_profile(phase)
    }

    /// Bounding box `(x0, y0, x1, y1)` over the whole cycle.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        let rv_left = self.rv_right - 2.0 * self.rv_radius_ed;
        let x0 = rv_left.min(self.cx - self.r_epi);
        let x1 = (self.cx + self.r_epi).max(self.rv_right);
        let r = self.r_epi.max(self.rv_radius_ed);
        (x0, self.cy - r, x1, self.cy + r)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        let (x0, y0, x1, y1) = self.extent();
        x0 >= 0.0 && y0 >= 0.0 && x1 <= (width - 1) as f64 && y1 <= (height - 1) as f64
    }

    pub fn label_at(&self, x: f64, y: f64, phase: f64) -> u8 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let rho = dx.hypot(dy);
        let shift = if rho > 0.0 {
            self.septal_shift(phase) * septal_weight(dx / rho)
        } else {
            0.0
        };
        if rho <= self.blood_radius(phase) - shift {
            return LV_BLOOD;
        }
        if rho <= self.r_epi - shift {
            return LV_MYO;
        }
        let rv_r = self.rv_radius(phase);
        let rv_cx = self.rv_right - rv_r;
        if (x - rv_cx).powi(2) + dy * dy <= rv_r * rv_r {
            return RV_BLOOD;
        }
        BACKGROUND
    }

    pub fn rasterize(&self, phase: f64, height: usize, width: usize, out: &mut [u8]) {
        for row in 0..height {
            for col in 0..width {
                out[row * width + col] = self.label_at(col as f64, row as f64, phase);
            }
        }
    }
}

/// Systolic contraction profile: 0 at phase 0, 1 at end-systole, back to 0 at 1.
pub fn contraction_profile(phase: f64) -> f64 {
    use std::f64::consts::PI;
    if phase <= ES_PHASE {
        0.5 * (1.0 - (PI * phase / ES_PHASE).cos())
    } else {
        0.5 * (1.0 + (PI * (phase - ES_PHASE) / (1.0 - ES_PHASE)).cos())
    }
}

/// Flat-topped raised-cosine bump on early systole `[0.02, 0.2]`.
pub fn septal_flash_profile(phase: f64) -> f64 {
    use std::f64::consts::PI;
    if phase <= SF_START || phase >= SF_END {
        0.0
    } else if phase < SF_START + SF_TAPER {
        0.5 * (1.0 - (PI * (phase - SF_START) / SF_TAPER).cos())
    } else if phase <= SF_END - SF_TAPER {
        1.0
    } else {
        0.5 * (1.0 + (PI * (phase - (SF_END - SF_TAPER)) / SF_TAPER).cos())
    }
}

/// Angular weight of the septal displacement given `cos θ` of a direction
/// measured from the LV centre; the septum faces `-x`. Full weight within 30°
/// of the septal axis, tapering to zero at 90°.
fn septal_weight(cos_theta: f64) -> f64 {
    use std::f64::consts::PI;
    let c = -cos_theta;
    if c <= 0.0 {
        return 0.0;
    }
    let angle = c.min(1.0).acos();
    let flat = PI / 6.0;
    if angle <= flat {
        1.0
    } else {
        0.5 * (1.0 + (PI * (angle - flat) / (PI / 2.0 - flat)).cos())
    }
}

/// Frame dimensions `(S, H, W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameShape {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for FrameShape {
    fn default() -> Self {
        Self {
            slices: DEFAULT_SLICES,
            height: DEFAULT_SIZE,
            width: DEFAULT_SIZE,
        }
    }
}

pub fn render_frame(factors: &GenerativeFactors, shape: FrameShape, phase: f64) -> Result<SegFrame> {
    factors.validate()?;
    if !(0.0..1.0).contains(&phase) {
        return Err(Error::invalid(format!("phase {phase} outside [0,1)")));
    }
    let mut frame = SegFrame::empty(shape.slices, shape.height, shape.width);
    for s in 0..shape.slices {
        let geom = factors.slice_geometry(s, shape.slices);
        if !geom.fits(shape.height, shape.width) {
            return Err(Error::invalid(format!(
                "slice {s} geometry {:?} leaves the {}x{} grid",
                geom.extent(),
                shape.height,
                shape.width
            )));
        }
        geom.rasterize(phase, shape.height, shape.width, frame.slice_mut(s));
    }
    Ok(frame)
}

pub fn render_sequence(factors: &GenerativeFactors, shape: FrameShape, t: usize) -> Result<SegSequence> {
    let phases = uniform_phases(t);
    let frames = phases
        .iter()
        .map(|&p| render_frame(factors, shape, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegSequence {
        frames,
        frame_phase: phases,
    })
}

/// A rendered subject with its primary label `y` and concept labels `y_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSubject {
    pub sequence: SegSequence,
    pub y: u8,
    pub y_k: Vec<u8>,
    pub factors: GenerativeFactors,
    pub seed: u64,
}

impl LabeledSubject {
    pub fn sf(&self) -> u8 {
        self.y_k.first().copied().unwrap_or(0)
    }
}

/// Mixture of primary and concept classes in a generated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub p_responder: f64,
    pub p_sf_given_responder: f64,
    pub p_sf_given_nonresponder: f64,
    /// Standard deviation of the label noise, in units of `hidden_factor`.
    pub noise_scale: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_subjects: 73,
            p_responder: 47.0 / 73.0,
            p_sf_given_responder: 27.0 / 47.0,
            p_sf_given_nonresponder: 10.0 / 26.0,
            noise_scale: 0.05,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_responder", self.p_responder),
            ("p_sf_given_responder", self.p_sf_given_responder),
            ("p_sf_given_nonresponder", self.p_sf_given_nonresponder),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} outside [0,1]")));
            }
        }
        if self.n_subjects < 2 {
            return Err(Error::invalid("n_subjects must be >= 2"));
        }
        if self.p_responder <= 0.0 || self.p_responder >= 1.0 {
            return Err(Error::invalid("p_responder must lie strictly inside (0,1)"));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::invalid("noise_scale must be >= 0"));
        }
        Ok(())
    }

    pub fn p_sf(&self) -> f64 {
        self.p_responder * self.p_sf_given_responder
            + (1.0 - self.p_responder) * self.p_sf_given_nonresponder
    }
}

/// SF amplitude range (pixels) for cohort subjects with SF.
pub const COHORT_SF_RANGE: (f64, f64) = (2.5, 4.5);

/// Threshold model producing the primary label:
/// `y = [sf_weight·sf_amplitude + hidden_factor + noise > threshold]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelModel {
    pub sf_weight: f64,
    pub threshold: f64,
    pub noise_scale: f64,
}

impl LabelModel {
    /// Coefficients that reproduce the spec's class mixture in expectation.
    ///
    /// With `hidden_factor ~ U[0,1]` and narrow noise, the response rate of a
    /// group is `1 - (threshold - sf_weight·E[sf])`, so the two group rates
    /// `P(y|SF)` and `P(y|no SF)` pin both coefficients.
    pub fn from_spec(spec: &CohortSpec) -> Self {
        let p_sf = spec.p_sf();
        let p_y_sf = if p_sf > 0.0 {
            spec.p_responder * spec.p_sf_given_responder / p_sf
        } else {
            spec.p_responder
        };
        let p_y_nosf = if p_sf < 1.0 {
            spec.p_responder * (1.0 - spec.p_sf_given_responder) / (1.0 - p_sf)
        } else {
            spec.p_responder
        };
        let mean_sf = 0.5 * (COHORT_SF_RANGE.0 + COHORT_SF_RANGE.1);
        let threshold = 1.0 - p_y_nosf;
        let sf_weight = ((1.0 - p_y_sf) - threshold) / -mean_sf;
        Self {
            sf_weight,
            threshold,
            noise_scale: spec.noise_scale,
        }
    }

    pub fn label(&self, factors: &GenerativeFactors, seed: u64) -> u8 {
        let mut rng = rng::stream(seed, &[LABEL_STREAM]);
        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * self.noise_scale;
        let score = self.sf_weight * factors.sf_amplitude + factors.hidden_factor + noise;
        u8::from(score > self.threshold)
    }
}

impl Default for LabelModel {
    fn default() -> Self {
        Self::from_spec(&CohortSpec::default())
    }
}

/// Renders a subject and derives its labels under the default label model.
pub fn generate_subject(factors: &GenerativeFactors, t: usize, seed: u64) -> Result<LabeledSubject> {
    generate_subject_with(&LabelModel::default(), factors, FrameShape::default(), t, seed)
}

pub fn generate_subject_with(
    model: &LabelModel,
    factors: &GenerativeFactors,
    shape: FrameShape,
    t: usize,
    seed: u64,
) -> Result<LabeledSubject> {
    if t < 2 {
        return Err(Error::invalid("a sequence needs at least 2 frames"));
    }
    let sequence = render_sequence(factors, shape, t)?;
    Ok(LabeledSubject {
        sequence,
        y: model.label(factors, seed),
        y_k: vec![u8::from(factors.has_sf())],
        factors: *factors,
        seed,
    })
}

/// Per-subject seed of subject `index` under master `seed`.
pub fn subject_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, &[index as u64])
}

/// Draws cohort factors for one subject. The SF indicator is Bernoulli with
/// the marginal SF rate; amplitudes of SF subjects are uniform in
/// [`COHORT_SF_RANGE`].
pub fn sample_cohort_factors(spec: &CohortSpec, subject_seed: u64) -> GenerativeFactors {
    let mut rng = rng::stream(subject_seed, &[FACTOR_STREAM]);
    let sf = rng.gen_bool(spec.p_sf().clamp(0.0, 1.0));
    let sf_amplitude = if sf {
        rng.gen_range(COHORT_SF_RANGE.0..=COHORT_SF_RANGE.1)
    } else {
        0.0
    };
    GenerativeFactors {
        contraction_amplitude: rng.gen_range(0.3..=0.8),
        sf_amplitude,
        hidden_factor: rng.gen_range(0.0..=1.0),
        base_radius: rng.gen_range(11.0..=13.0),
        center_x: rng.gen_range(45.0..=48.0),
        center_y: rng.gen_range(37.0..=43.0),
    }
}

/// Labels a cohort subject would receive, without rendering it.
pub fn cohort_labels(spec: &CohortSpec, subject_seed: u64) -> (u8, u8) {
    let factors = sample_cohort_factors(spec, subject_seed);
    (
        LabelModel::from_spec(spec).label(&factors, subject_seed),
        u8::from(factors.has_sf()),
    )
}

pub fn generate_cohort(spec: &CohortSpec, t: usize, seed: u64) -> Result<Vec<LabeledSubject>> {
    generate_cohort_shaped(spec, FrameShape::default(), t, seed)
}

pub fn generate_cohort_shaped(
    spec: &CohortSpec,
    shape: FrameShape,
    t: usize,
    seed: u64,
) -> Result<Vec<LabeledSubject>> {
    spec.validate()?;
    let model = LabelModel::from_spec(spec);
    let subjects = (0..spec.n_subjects)
        .map(|i| {
            let s = subject_seed(seed, i);
            let factors = scale_to_shape(sample_cohort_factors(spec, s), shape);
            generate_subject_with(&model, &factors, shape, t, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let responders = subjects.iter().filter(|s| s.y == 1).count();
    if responders == 0 || responders == subjects.len() {
        return Err(Error::invalid(format!(
            "cohort of {} subjects drew a single primary class; change the seed or enlarge n_subjects",
            subjects.len()
        )));
    }
    Ok(subjects)
}

/// Unlabeled sequences with wider geometric variation than the cohort,
/// including SF-like motion in a third of subjects.
pub fn generate_pretrain_pool(n: usize, t: usize, seed: u64) -> Result<Vec<SegSequence>> {
    generate_pretrain_pool_shaped(n, FrameShape::default(), t, seed)
}

pub fn generate_pretrain_pool_shaped(
    n: usize,
    shape: FrameShape,
    t: usize,
    seed: u64,
) -> Result<Vec<SegSequence>> {
    Ok(pool_subjects(n, shape, t, seed)?.into_iter().map(|s| s.sequence).collect())
}

/// Pool sequences wrapped as subjects without labels (`y = 0`, no concept
/// labels) so they can be stored in the dataset format.
pub fn pool_subjects(n: usize, shape: FrameShape, t: usize, seed: u64) -> Result<Vec<LabeledSubject>> {
    if n == 0 {
        return Err(Error::invalid("pool size must be >= 1"));
    }
    if t < 2 {
        return Err(Error::invalid("a sequence needs at least 2 frames"));
    }
    (0..n)
        .map(|i| {
            let s = subject_seed(seed, i);
            let factors = scale_to_shape(sample_pool_factors(s), shape);
            Ok(LabeledSubject {
                sequence: render_sequence(&factors, shape, t)?,
                y: 0,
                y_k: Vec::new(),
                factors,
                seed: s,
            })
        })
        .collect()
}

pub fn sample_pool_factors(subject_seed: u64) -> GenerativeFactors {
    let mut rng = rng::stream(subject_seed, &[POOL_STREAM]);
    let sf_amplitude = if rng.gen_bool(0.3) {
        rng.gen_range(1.0..=5.0)
    } else {
        0.0
    };
    GenerativeFactors {
        contraction_amplitude: rng.gen_range(0.1..=0.9),
        sf_amplitude,
        hidden_factor: rng.gen_range(0.0..=1.0),
        base_radius: rng.gen_range(9.0..=14.0),
        center_x: rng.gen_range(45.0..=50.0),
        center_y: rng.gen_range(35.0..=45.0),
    }
}

/// Rescales factors sampled for the default 80×80 grid to another grid size
/// so small test configurations stay in bounds.
fn scale_to_shape(mut f: GenerativeFactors, shape: FrameShape) -> GenerativeFactors {
    if shape.height == DEFAULT_SIZE && shape.width == DEFAULT_SIZE {
        return f;
    }
    let scale = shape.height.min(shape.width) as f64 / DEFAULT_SIZE as f64;
    f.base_radius *= scale;
    f.sf_amplitude *= scale;
    f.center_x *= shape.width as f64 / DEFAULT_SIZE as f64;
    f.center_y *= shape.height as f64 / DEFAULT_SIZE as f64;
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factors(sf: f64) -> GenerativeFactors {
        GenerativeFactors {
            contraction_amplitude: 0.6,
            sf_amplitude: sf,
            hidden_factor: 0.5,
            base_radius: 12.0,
            center_x: 46.0,
            center_y: 40.0,
        }
    }

    #[test]
    fn profiles_vanish_at_phase_zero() {
        assert_eq!(contraction_profile(0.0), 0.0);
        assert_eq!(septal_flash_profile(0.0), 0.0);
        assert!((contraction_profile(ES_PHASE) - 1.0).abs() < 1e-12);
        assert_eq!(septal_flash_profile(0.1), 1.0);
        assert_eq!(septal_flash_profile(0.2), 0.0);
    }

    #[test]
    fn phase_zero_frame_ignores_sf() {
        let a = render_frame(&factors(0.0), FrameShape::default(), 0.0).unwrap();
        let b = render_frame(&factors(4.0), FrameShape::default(), 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn end_systole_has_less_foreground() {
        let f = factors(0.0);
        let ed = render_frame(&f, FrameShape::default(), 0.0).unwrap();
        let es = render_frame(&f, FrameShape::default(), 0.35).unwrap();
        assert!(es.foreground_area() < ed.foreground_area());
    }

    #[test]
    fn out_of_bounds_geometry_rejected() {
        let mut f = factors(0.0);
        f.center_x = 5.0;
        assert!(matches!(
            render_frame(&f, FrameShape::default(), 0.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn all_four_classes_rendered() {
        let frame = render_frame(&factors(0.0), FrameShape::default(), 0.0).unwrap();
        for c in 0..4u8 {
            assert!(frame.count(c) > 0, "class {c} missing");
        }
        frame.validate().unwrap();
    }

    #[test]
    fn sf_zero_means_no_concept_label() {
        let s = generate_subject(&factors(0.0), 4, 3).unwrap();
        assert_eq!(s.y_k, vec![0]);
        let s = generate_subject(&factors(3.0), 4, 3).unwrap();
        assert_eq!(s.y_k, vec![1]);
    }

    #[test]
    fn label_model_matches_default_mixture() {
        let m = LabelModel::default();
        // P(y | no SF) = 20/36, P(y | SF) = 27/37
        assert!((m.threshold - (1.0 - 20.0 / 36.0)).abs() < 1e-12);
        let c_sf = m.threshold - m.sf_weight * 3.5;
        assert!((c_sf - (1.0 - 27.0 / 37.0)).abs() < 1e-12);
    }

    #[test]
    fn short_sequences_rejected() {
        assert!(generate_subject(&factors(0.0), 1, 0).is_err());
        assert!(generate_pretrain_pool(0, 4, 0).is_err());
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = CohortSpec {
            p_responder: 1.5,
            ..CohortSpec::default()
        };
        assert!(generate_cohort(&spec, 2, 0).is_err());
        let spec = CohortSpec {
            n_subjects: 1,
            ..CohortSpec::default()
        };
        assert!(generate_cohort(&spec, 2, 0).is_err());
    }

    #[test]
    fn small_grids_stay_in_bounds() {
        let shape = FrameShape {
            slices: 1,
            height: 16,
            width: 16,
        };
        let spec = CohortSpec {
            n_subjects: 20,
            ..CohortSpec::default()
        };
        let cohort = generate_cohort_shaped(&spec, shape, 3, 1).unwrap();
        assert_eq!(cohort[0].sequence.shape(), (1, 16, 16));
        generate_pretrain_pool_shaped(20, shape, 3, 1).unwrap();
    }
}
