//! Sequence-level evaluation: structural similarity, variance, mouth
//! landmark distance, and the prosody diagnostics used both by evaluation
//! and by the synthetic world's own quality gates.

use crate::error::{Error, Result};
use crate::landmarks::{LandmarkBasis, BROW_LANDMARKS, EYE_LANDMARKS, MOUTH_LANDMARKS};
use crate::types::{ExpressionSequence, PoseSequence};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// SSIM stabilizers for coefficient-scale signals.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Pearson correlation; 0 when either side is (numerically) constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson: length mismatch");
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (da, db) = (a[i] - ma, b[i] - mb);
        va += da * da;
        vb += db * db;
        cov += da * db;
    }
    let denom = (va * vb).sqrt();
    if denom < 1e-300 {
        0.0
    } else {
        cov / denom
    }
}

/// Structural similarity between two `(frames, dims)` sequences: the SSIM
/// formula applied per dimension to the whole time axis (population
/// statistics), averaged over dimensions.
pub fn sequence_ssim(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "sequence_ssim: shape mismatch");
    let (t, d) = a.dim();
    assert!(t >= 2 && d >= 1, "sequence_ssim needs at least 2 frames");
    let n = t as f64;
    let mut acc = 0.0;
    for j in 0..d {
        let ca = a.column(j);
        let cb = b.column(j);
        let ma = ca.sum() / n;
        let mb = cb.sum() / n;
        let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
        for i in 0..t {
            let (da, db) = (ca[i] - ma, cb[i] - mb);
            va += da * da;
            vb += db * db;
            cov += da * db;
        }
        va /= n;
        vb /= n;
        cov /= n;
        let ssim = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        acc += ssim;
    }
    acc / d as f64
}

/// Mean per-dimension population variance over time of a `(frames, dims)`
/// sequence.
pub fn sequence_variance(a: &Array2<f64>) -> f64 {
    let (t, d) = a.dim();
    assert!(t >= 1 && d >= 1);
    let n = t as f64;
    let mut acc = 0.0;
    for j in 0..d {
        let c = a.column(j);
        let m = c.sum() / n;
        acc += c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    }
    acc / d as f64
}

/// Mean (over frames) of the per-frame mean squared 3-D distance across the
/// 32 mouth landmarks, computed from two expression coefficient sequences.
pub fn mouth_landmark_distance_sequence(
    basis: &LandmarkBasis,
    a: &Array2<f64>,
    b: &Array2<f64>,
) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let fa = basis.reconstruct_frames(a);
    let fb = basis.reconstruct_frames(b);
    let frames = fa.nrows();
    let mut total = 0.0;
    for t in 0..frames {
        let mut frame_acc = 0.0;
        for &li in &MOUTH_LANDMARKS {
            for d in 0..3 {
                let diff = fa[[t, li * 3 + d]] - fb[[t, li * 3 + d]];
                frame_acc += diff * diff;
            }
        }
        total += frame_acc / MOUTH_LANDMARKS.len() as f64;
    }
    total / frames as f64
}

/// Per-frame head speed `|p_{t+1} - p_t|` (length `frames - 1`).
pub fn head_speed(pose: &PoseSequence) -> Vec<f64> {
    let d = &pose.data;
    (0..d.nrows().saturating_sub(1))
        .map(|t| {
            (0..d.ncols())
                .map(|j| {
                    let diff = d[[t + 1, j]] - d[[t, j]];
                    diff * diff
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Correlation between head speed and a loudness envelope.
pub fn envelope_speed_correlation(pose: &PoseSequence, envelope: &[f64]) -> f64 {
    let speed = head_speed(pose);
    assert!(envelope.len() >= speed.len() + 1, "envelope shorter than pose");
    pearson(&speed, &envelope[..speed.len()])
}

/// Blink events per second, detected as falling edges of the blink ratio
/// below `threshold` (0.5 works for profiles that fully close the lids).
pub fn blink_rate(basis: &LandmarkBasis, expr: &ExpressionSequence, threshold: f64) -> f64 {
    let frames = expr.frames();
    if frames < 2 {
        return 0.0;
    }
    let flat = basis.reconstruct_frames(&expr.data);
    let bl: Vec<f64> = (0..frames)
        .map(|t| {
            let pts =
                Array2::from_shape_vec((crate::types::LANDMARK_COUNT, 3), flat.row(t).to_vec())
                    .unwrap();
            basis.blink_ratio(&pts)
        })
        .collect();
    let mut events = 0usize;
    for t in 1..frames {
        if bl[t] < threshold && bl[t - 1] >= threshold {
            events += 1;
        }
    }
    events as f64 / (frames as f64 / expr.fps)
}

/// Eye-and-brow landmark coordinate sequence `(frames, 66)`: landmarks
/// 17–26 and 36–47, all three coordinates, reconstructed from expression
/// coefficients. The domain of the expression-side SSIM.
pub fn eye_brow_landmark_sequence(basis: &LandmarkBasis, expr: &Array2<f64>) -> Array2<f64> {
    let flat = basis.reconstruct_frames(expr);
    let ids: Vec<usize> = BROW_LANDMARKS.chain(EYE_LANDMARKS).collect();
    let mut out = Array2::zeros((flat.nrows(), ids.len() * 3));
    for t in 0..flat.nrows() {
        for (k, &li) in ids.iter().enumerate() {
            for d in 0..3 {
                out[[t, 3 * k + d]] = flat[[t, 3 * li + d]];
            }
        }
    }
    out
}

/// One generated/reference pair entering [`evaluate`].
#[derive(Debug, Clone)]
pub struct EvalClip {
    pub pose_generated: PoseSequence,
    pub pose_reference: PoseSequence,
    pub expr_generated: ExpressionSequence,
    pub expr_reference: ExpressionSequence,
    /// Loudness envelope of the driving audio, one entry per frame.
    pub envelope: Vec<f64>,
}

/// Blink-ratio threshold used for rate counting in reports.
pub const BLINK_THRESHOLD: f64 = 0.5;

/// Score generated motion against references: SSIM on pose coefficients and
/// on eye-and-brow landmark sequences, per-stream variances, mouth landmark
/// distance, envelope/speed correlation, and blink rates. Pairs of unequal
/// length are truncated to the shorter side.
pub fn evaluate(basis: &LandmarkBasis, clips: &[EvalClip]) -> Result<MetricReport> {
    if clips.is_empty() {
        return Err(Error::validation("evaluate needs at least one clip"));
    }
    let n = clips.len() as f64;
    let mut report = MetricReport {
        clips: clips.len(),
        ssim_pose: 0.0,
        ssim_expr: 0.0,
        var_pose_generated: 0.0,
        var_pose_reference: 0.0,
        var_expr_generated: 0.0,
        var_expr_reference: 0.0,
        mouth_landmark_distance: 0.0,
        envelope_speed_corr_generated: 0.0,
        envelope_speed_corr_reference: 0.0,
        blink_rate_generated: 0.0,
        blink_rate_reference: 0.0,
    };
    for clip in clips {
        let frames = clip
            .pose_generated
            .frames()
            .min(clip.pose_reference.frames())
            .min(clip.expr_generated.frames())
            .min(clip.expr_reference.frames())
            .min(clip.envelope.len());
        if frames < 2 {
            return Err(Error::validation("evaluate needs clips with at least 2 frames"));
        }
        let take2 = |d: &Array2<f64>| d.slice(ndarray::s![0..frames, ..]).to_owned();
        let pg = PoseSequence::new(clip.pose_generated.fps, take2(&clip.pose_generated.data));
        let pr = PoseSequence::new(clip.pose_reference.fps, take2(&clip.pose_reference.data));
        let eg = ExpressionSequence::new(clip.expr_generated.fps, take2(&clip.expr_generated.data));
        let er = ExpressionSequence::new(clip.expr_reference.fps, take2(&clip.expr_reference.data));
        let env = &clip.envelope[0..frames];

        report.ssim_pose += sequence_ssim(&pg.data, &pr.data);
        report.ssim_expr += sequence_ssim(
            &eye_brow_landmark_sequence(basis, &eg.data),
            &eye_brow_landmark_sequence(basis, &er.data),
        );
        report.var_pose_generated += sequence_variance(&pg.data);
        report.var_pose_reference += sequence_variance(&pr.data);
        report.var_expr_generated += sequence_variance(&eg.data);
        report.var_expr_reference += sequence_variance(&er.data);
        report.mouth_landmark_distance += mouth_landmark_distance_sequence(basis, &eg.data, &er.data);
        report.envelope_speed_corr_generated += envelope_speed_correlation(&pg, env);
        report.envelope_speed_corr_reference += envelope_speed_correlation(&pr, env);
        report.blink_rate_generated += blink_rate(basis, &eg, BLINK_THRESHOLD);
        report.blink_rate_reference += blink_rate(basis, &er, BLINK_THRESHOLD);
    }
    report.ssim_pose /= n;
    report.ssim_expr /= n;
    report.var_pose_generated /= n;
    report.var_pose_reference /= n;
    report.var_expr_generated /= n;
    report.var_expr_reference /= n;
    report.mouth_landmark_distance /= n;
    report.envelope_speed_corr_generated /= n;
    report.envelope_speed_corr_reference /= n;
    report.blink_rate_generated /= n;
    report.blink_rate_reference /= n;
    Ok(report)
}

/// Aggregated evaluation results, serialized as the `metrics.json` report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub clips: usize,
    pub ssim_pose: f64,
    pub ssim_expr: f64,
    pub var_pose_generated: f64,
    pub var_pose_reference: f64,
    pub var_expr_generated: f64,
    pub var_expr_reference: f64,
    pub mouth_landmark_distance: f64,
    pub envelope_speed_corr_generated: f64,
    pub envelope_speed_corr_reference: f64,
    pub blink_rate_generated: f64,
    pub blink_rate_reference: f64,
}

impl MetricReport {
    /// Fixed-width text table for terminal output.
    pub fn table(&self) -> String {
        let rows = [
            ("clips", self.clips as f64, f64::NAN),
            ("ssim pose", self.ssim_pose, f64::NAN),
            ("ssim expression", self.ssim_expr, f64::NAN),
            ("variance pose", self.var_pose_generated, self.var_pose_reference),
            ("variance expression", self.var_expr_generated, self.var_expr_reference),
            ("mouth landmark distance", self.mouth_landmark_distance, f64::NAN),
            (
                "envelope/speed corr",
                self.envelope_speed_corr_generated,
                self.envelope_speed_corr_reference,
            ),
            ("blink rate (1/s)", self.blink_rate_generated, self.blink_rate_reference),
        ];
        let mut out = String::new();
        out.push_str(&format!("{:<26} {:>12} {:>12}\n", "metric", "generated", "reference"));
        for (name, gen, refv) in rows {
            if refv.is_nan() {
                out.push_str(&format!("{name:<26} {gen:>12.6} {:>12}\n", "-"));
            } else {
                out.push_str(&format!("{name:<26} {gen:>12.6} {refv:>12.6}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_array, rng_for};
    use crate::tensor::check::assert_close;
    use crate::types::EXPR_DIM;
    use ndarray::Array1;

    fn to2(a: ndarray::ArrayD<f64>) -> Array2<f64> {
        a.into_dimensionality::<ndarray::Ix2>().unwrap()
    }

    #[test]
    fn pearson_known_values() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let up = [2.0, 4.0, 6.0, 8.0];
        let down = [8.0, 6.0, 4.0, 2.0];
        assert_close(pearson(&a, &up), 1.0, 1e-12, "pearson up");
        assert_close(pearson(&a, &down), -1.0, 1e-12, "pearson down");
        assert_eq!(pearson(&a, &[5.0; 4]), 0.0);
    }

    #[test]
    fn ssim_is_one_for_identical_sequences() {
        let mut rng = rng_for(1, "ssim");
        let a = to2(normal_array(&mut rng, &[50, 4]));
        assert_close(sequence_ssim(&a, &a), 1.0, 1e-12, "self ssim");
    }

    #[test]
    fn ssim_ranks_matched_above_flat_above_anticorrelated() {
        let t = 200;
        let sig: Vec<f64> = (0..t).map(|i| 0.3 * (i as f64 * 0.21).sin()).collect();
        let gt = Array2::from_shape_vec((t, 1), sig.clone()).unwrap();
        let mut rng = rng_for(2, "ssimr");
        let noisy = Array2::from_shape_vec(
            (t, 1),
            sig.iter().map(|&x| x + 0.03 * crate::rng::normal(&mut rng)).collect(),
        )
        .unwrap();
        let flat = Array2::zeros((t, 1));
        let anti = gt.mapv(|x| -x);
        let (s_noisy, s_flat, s_anti) =
            (sequence_ssim(&gt, &noisy), sequence_ssim(&gt, &flat), sequence_ssim(&gt, &anti));
        assert!(s_noisy > 0.9, "noisy match should score high: {s_noisy}");
        assert!(s_flat < 0.2, "flat against a strong signal should be small: {s_flat}");
        assert!(s_anti < s_noisy, "anticorrelated must rank below matched: {s_anti} {s_noisy}");
    }

    #[test]
    fn variance_matches_bruteforce() {
        let mut rng = rng_for(3, "var");
        let a = to2(normal_array(&mut rng, &[40, 3]));
        let got = sequence_variance(&a);
        let mut want = 0.0;
        for j in 0..3 {
            let col: Vec<f64> = a.column(j).to_vec();
            let m = col.iter().sum::<f64>() / 40.0;
            want += col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 40.0;
        }
        want /= 3.0;
        assert_close(got, want, 1e-12, "variance");
    }

    #[test]
    fn mld_sequence_is_zero_for_identical_and_positive_for_mouth_change() {
        let basis = LandmarkBasis::new(4);
        let mut rng = rng_for(4, "mld");
        let a = to2(normal_array(&mut rng, &[6, EXPR_DIM])).mapv(|x| 0.1 * x);
        assert_eq!(mouth_landmark_distance_sequence(&basis, &a, &a), 0.0);
        let mut b = a.clone();
        for t in 0..6 {
            for c in 0..32 {
                b[[t, c]] += 0.05;
            }
        }
        assert!(mouth_landmark_distance_sequence(&basis, &a, &b) > 0.0);
        // eye-only drift leaves the mouth distance untouched
        let mut c = a.clone();
        for t in 0..6 {
            c[[t, 40]] += 0.3;
        }
        assert_eq!(mouth_landmark_distance_sequence(&basis, &a, &c), 0.0);
    }

    #[test]
    fn head_speed_and_envelope_correlation() {
        let t = 120;
        let env: Vec<f64> = (0..t).map(|i| 0.5 + 0.4 * (i as f64 * 0.2).sin()).collect();
        // pose whose step size follows the envelope exactly
        let mut data = Array2::zeros((t, 6));
        let mut x = 0.0;
        for i in 1..t {
            x += env[i - 1] * if i % 2 == 0 { 1.0 } else { -1.0 };
            data[[i, 0]] = x;
        }
        let pose = PoseSequence::new(25.0, data);
        let corr = envelope_speed_correlation(&pose, &env);
        assert!(corr > 0.95, "expected near-perfect correlation, got {corr}");
    }

    #[test]
    fn blink_rate_counts_falling_edges() {
        let basis = LandmarkBasis::new(5);
        let frames = 100;
        let fps = 25.0;
        let mut data = Array2::zeros((frames, EXPR_DIM));
        // two blinks: frames 10-13 and 60-63
        for &start in &[10usize, 60] {
            for (k, s) in [0.7, 1.0, 1.0, 0.5].iter().enumerate() {
                let coeffs = basis.blink_direction().mapv(|x| x * s);
                data.row_mut(start + k).assign(&coeffs);
            }
        }
        let expr = ExpressionSequence::new(fps, data);
        let rate = blink_rate(&basis, &expr, 0.5);
        let expected = 2.0 / (frames as f64 / fps);
        assert_close(rate, expected, 1e-12, "blink rate");
        let _ = Array1::<f64>::zeros(1);
    }

    #[test]
    fn evaluate_self_pair_is_perfect_and_shuffling_hurts() {
        let world = crate::world::World::new(crate::world::WorldSpec {
            frames_per_clip: 60,
            num_clips: 2,
            ..crate::world::WorldSpec::default()
        })
        .unwrap();
        let clip = world.clip(0).unwrap();
        let self_pair = EvalClip {
            pose_generated: clip.pose.clone(),
            pose_reference: clip.pose.clone(),
            expr_generated: clip.expr.clone(),
            expr_reference: clip.expr.clone(),
            envelope: clip.meta.envelope.clone(),
        };
        let report = evaluate(&world.basis, &[self_pair.clone()]).unwrap();
        assert_close(report.ssim_pose, 1.0, 1e-9, "self ssim pose");
        assert_close(report.ssim_expr, 1.0, 1e-9, "self ssim expr");
        assert_eq!(report.mouth_landmark_distance, 0.0);
        assert_eq!(report.var_pose_generated, report.var_pose_reference);

        // Reversing the generated pose keeps its marginal statistics but
        // destroys temporal alignment, so SSIM_p must drop.
        let mut reversed = clip.pose.data.clone();
        for (t, row) in clip.pose.data.rows().into_iter().enumerate() {
            reversed.row_mut(clip.frames() - 1 - t).assign(&row);
        }
        let shuffled = EvalClip {
            pose_generated: PoseSequence::new(clip.pose.fps, reversed),
            ..self_pair
        };
        let worse = evaluate(&world.basis, &[shuffled]).unwrap();
        assert!(
            worse.ssim_pose < report.ssim_pose,
            "misaligned poses should score below aligned ones: {} vs {}",
            worse.ssim_pose,
            report.ssim_pose
        );
        assert!(evaluate(&world.basis, &[]).is_err());
    }

    #[test]
    fn report_table_renders() {
        let r = MetricReport {
            clips: 3,
            ssim_pose: 0.9,
            ssim_expr: 0.8,
            var_pose_generated: 0.01,
            var_pose_reference: 0.012,
            var_expr_generated: 0.02,
            var_expr_reference: 0.02,
            mouth_landmark_distance: 0.004,
            envelope_speed_corr_generated: 0.3,
            envelope_speed_corr_reference: 0.5,
            blink_rate_generated: 0.2,
            blink_rate_reference: 0.25,
        };
        let table = r.table();
        assert!(table.contains("ssim pose"));
        assert!(table.lines().count() >= 8);
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
