use serde_json::json;

use super::format::{DemoFrame, Demonstration, GripperObs};
use crate::error::{invalid, Result};

/// Resamples onto a uniform grid `t_first + round(m·1e9/hz)`.
///
/// Real-valued fields are interpolated linearly and TCP quaternions are
/// renormalized. Discrete fields (gripper status, command time, encoder
/// ticks, image refs) take the nearest source frame, the earlier one on a
/// tie.
pub fn resample(demo: &Demonstration, hz: f64) -> Result<Demonstration> {
    if !(hz > 0.0) || !hz.is_finite() {
        return Err(invalid(format!("resample rate must be > 0, got {hz}")));
    }
    demo.validate()?;
    let frames = &demo.frames;
    let t0 = frames[0].t;
    let span_ns = frames[frames.len() - 1].t - t0;
    let span = span_ns as f64;
    let offset = |m: u64| (m as f64 * 1e9 / hz).round() as u64;
    // The float estimate can land one short of a grid point that rounds
    // onto the last frame, so settle it against the rounded offsets.
    let mut last = (span * hz / 1e9 + 1e-9).floor() as u64;
    while offset(last + 1) <= span_ns {
        last += 1;
    }
    while last > 0 && offset(last) > span_ns {
        last -= 1;
    }
    let count = last + 1;
    if count < 2 {
        return Err(invalid(format!("{hz} Hz leaves fewer than 2 frames over {} s", span / 1e9)));
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut j = 0;
    for m in 0..count {
        let t = t0 + offset(m);
        while j + 2 < frames.len() && frames[j + 1].t <= t {
            j += 1;
        }
        let (a, b) = (&frames[j], &frames[j + 1]);
        let w = ((t as f64 - a.t as f64) / (b.t - a.t) as f64).clamp(0.0, 1.0);
        out.push(blend(a, b, w, t));
    }
    let mut header = demo.header.clone();
    header.id = format!("{}@{hz}hz", demo.header.id);
    header.start_t = demo.header.start_t.min(t0);
    header.metadata.insert("resampled_hz".into(), json!(hz));
    header.metadata.insert("resampled_from".into(), json!(demo.header.id));
    Demonstration::new(header, out)
}

fn lerp_into(dst: &mut [f64], a: &[f64], b: &[f64], w: f64) {
    for ((d, x), y) in dst.iter_mut().zip(a).zip(b) {
        *d = x + (y - x) * w;
    }
}

fn blend(a: &DemoFrame, b: &DemoFrame, w: f64, t: u64) -> DemoFrame {
    let near = if w <= 0.5 { a } else { b };
    let mut f = near.clone();
    f.t = t;
    lerp_into(&mut f.joint_pos, &a.joint_pos, &b.joint_pos, w);
    lerp_into(&mut f.joint_vel, &a.joint_vel, &b.joint_vel, w);
    lerp_into(&mut f.tcp_vel, &a.tcp_vel, &b.tcp_vel, w);
    lerp_into(&mut f.base_ft, &a.base_ft, &b.base_ft, w);
    lerp_into(&mut f.tcp_ft, &a.tcp_ft, &b.tcp_ft, w);
    for arm in 0..2 {
        let (pa, pb) = (&a.tcp_pos[arm * 7..][..7], &b.tcp_pos[arm * 7..][..7]);
        let dst = &mut f.tcp_pos[arm * 7..][..7];
        lerp_into(&mut dst[..3], &pa[..3], &pb[..3], w);
        // Take the shorter arc, flipping the farther endpoint so the
        // result keeps the sign of the nearer frame.
        let dot: f64 = pa[3..].iter().zip(&pb[3..]).map(|(x, y)| x * y).sum();
        let flip = if dot < 0.0 { -1.0 } else { 1.0 };
        let (sa, sb) = if w <= 0.5 { (1.0, flip) } else { (flip, 1.0) };
        for k in 3..7 {
            dst[k] = sa * pa[k] + (sb * pb[k] - sa * pa[k]) * w;
        }
        let n = dst[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
        dst[3..].iter_mut().for_each(|v| *v /= n);
    }
    for (g, (ga, gb)) in f.gripper.iter_mut().zip(a.gripper.iter().zip(&b.gripper)) {
        *g = GripperObs {
            width: ga.width + (gb.width - ga.width) * w,
            force: ga.force + (gb.force - ga.force) * w,
            last_cmd_width: ga.last_cmd_width + (gb.last_cmd_width - ga.last_cmd_width) * w,
            last_cmd_force: ga.last_cmd_force + (gb.last_cmd_force - ga.last_cmd_force) * w,
            ..*g
        };
    }
    f
}
