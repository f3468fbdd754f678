//! Spatial and temporal normalization plus rigid augmentation. Label maps are
//! categorical, so every resampling here is nearest-neighbour.

use rand::Rng;

use super::{LabeledSubject, SegFrame, SegSequence};
use crate::error::{Error, Result};
use crate::rng;

fn check_anchors(name: &str, anchors: &[f64]) -> Result<()> {
    if anchors.len() < 2 {
        return Err(Error::invalid(format!("{name}: need at least 2 anchors")));
    }
    if anchors[0] != 0.0 {
        return Err(Error::invalid(format!("{name}: first anchor must be phase 0")));
    }
    if anchors.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid(format!("{name}: anchors must increase strictly")));
    }
    if anchors.iter().any(|&a| !(0.0..1.0).contains(&a)) {
        return Err(Error::invalid(format!("{name}: anchors must lie in [0,1)")));
    }
    Ok(())
}

/// Maps an output phase back to an input phase through the piecewise-linear
/// warp with knots `(anchors_in[i], anchors_out[i])`, closed by `(1, 1)`.
fn warp_phase(phase: f64, anchors_in: &[f64], anchors_out: &[f64]) -> f64 {
    let n = anchors_out.len();
    for i in 0..n {
        let (o0, i0) = (anchors_out[i], anchors_in[i]);
        let (o1, i1) = if i + 1 < n {
            (anchors_out[i + 1], anchors_in[i + 1])
        } else {
            (1.0, 1.0)
        };
        if phase >= o0 && phase < o1 {
            return i0 + (phase - o0) * (i1 - i0) / (o1 - o0);
        }
    }
    phase
}

/// Resamples `seq` to `t_out` uniform output phases. Each output phase is
/// warped into input time and the nearest input frame is copied (ties go to
/// the earlier frame).
pub fn temporal_resample(
    seq: &SegSequence,
    anchors_in: &[f64],
    anchors_out: &[f64],
    t_out: usize,
) -> Result<SegSequence> {
    if anchors_in.len() != anchors_out.len() {
        return Err(Error::invalid("anchor lists differ in length"));
    }
    check_anchors("anchors_in", anchors_in)?;
    check_anchors("anchors_out", anchors_out)?;
    if t_out == 0 {
        return Err(Error::invalid("t_out must be positive"));
    }
    if seq.is_empty() || seq.frames.len() != seq.frame_phase.len() {
        return Err(Error::invalid("malformed input sequence"));
    }
    let phases = super::uniform_phases(t_out);
    let frames = phases
        .iter()
        .map(|&p| {
            let q = warp_phase(p, anchors_in, anchors_out);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, &ph) in seq.frame_phase.iter().enumerate() {
                let d = (ph - q).abs();
                if d < best_d {
                    best = i;
                    best_d = d;
                }
            }
            seq.frames[best].clone()
        })
        .collect();
    Ok(SegSequence {
        frames,
        frame_phase: phases,
    })
}

/// Nearest-neighbour resampling from `spacing_in` to `spacing_out` mm/pixel,
/// then centre crop or background pad to `out_h × out_w`.
pub fn spatial_resample(
    frame: &SegFrame,
    spacing_in: f64,
    spacing_out: f64,
    out_h: usize,
    out_w: usize,
) -> Result<SegFrame> {
    if !(spacing_in > 0.0) || !(spacing_out > 0.0) {
        return Err(Error::invalid("spacings must be positive"));
    }
    let scale = spacing_in / spacing_out;
    let mid_h = ((frame.height as f64) * scale).round() as usize;
    let mid_w = ((frame.width as f64) * scale).round() as usize;
    // Offsets of the output window inside the resampled grid (negative = pad).
    let off_r = (mid_h as isize - out_h as isize).div_euclid(2);
    let off_c = (mid_w as isize - out_w as isize).div_euclid(2);
    let mut out = SegFrame::empty(frame.slices, out_h, out_w);
    for s in 0..frame.slices {
        for r in 0..out_h {
            let mr = r as isize + off_r;
            if mr < 0 || mr >= mid_h as isize {
                continue;
            }
            let src_r = (((mr as f64) + 0.5) / scale).floor() as usize;
            if src_r >= frame.height {
                continue;
            }
            for c in 0..out_w {
                let mc = c as isize + off_c;
                if mc < 0 || mc >= mid_w as isize {
                    continue;
                }
                let src_c = (((mc as f64) + 0.5) / scale).floor() as usize;
                if src_c < frame.width {
                    out.set(s, r, c, frame.get(s, src_r, src_c));
                }
            }
        }
    }
    Ok(out)
}

/// Rotates by `angle_deg` about the grid centre then translates by
/// `(tx, ty)` pixels, sampling labels by nearest neighbour.
pub fn apply_rigid(frame: &SegFrame, angle_deg: f64, tx: f64, ty: f64) -> SegFrame {
    if angle_deg == 0.0 && tx == 0.0 && ty == 0.0 {
        return frame.clone();
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cy = (frame.height as f64 - 1.0) / 2.0;
    let cx = (frame.width as f64 - 1.0) / 2.0;
    let mut out = SegFrame::empty(frame.slices, frame.height, frame.width);
    for r in 0..frame.height {
        for c in 0..frame.width {
            // inverse map: source = R^-1 (p - centre - t) + centre
            let px = c as f64 - cx - tx;
            let py = r as f64 - cy - ty;
            let sx = (cos * px + sin * py + cx).round();
            let sy = (-sin * px + cos * py + cy).round();
            if sx < 0.0 || sy < 0.0 || sx >= frame.width as f64 || sy >= frame.height as f64 {
                continue;
            }
            for s in 0..frame.slices {
                out.set(s, r, c, frame.get(s, sy as usize, sx as usize));
            }
        }
    }
    out
}

/// Applies one random rotation and translation to every frame and slice of
/// the sequence, drawn from a stream derived from `seed`.
pub fn augment_sequence(
    seq: &SegSequence,
    max_rotation: f64,
    max_translation: f64,
    seed: u64,
) -> Result<SegSequence> {
    if !(max_rotation >= 0.0) || !(max_translation >= 0.0) {
        return Err(Error::invalid("augmentation bounds must be >= 0"));
    }
    let mut rng = rng::stream(seed, &[0xA6]);
    let mut draw = |bound: f64| {
        if bound == 0.0 {
            0.0
        } else {
            rng.gen_range(-bound..=bound)
        }
    };
    let angle = draw(max_rotation);
    let tx = draw(max_translation);
    let ty = draw(max_translation);
    Ok(SegSequence {
        frames: seq.frames.iter().map(|f| apply_rigid(f, angle, tx, ty)).collect(),
        frame_phase: seq.frame_phase.clone(),
    })
}

/// [`augment_sequence`] on a labeled subject; labels are untouched.
pub fn augment(
    subject: &LabeledSubject,
    max_rotation: f64,
    max_translation: f64,
    seed: u64,
) -> Result<LabeledSubject> {
    Ok(LabeledSubject {
        sequence: augment_sequence(&subject.sequence, max_rotation, max_translation, seed)?,
        ..subject.clone()
    })
}
