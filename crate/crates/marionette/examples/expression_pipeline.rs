//! The two-stage audio-to-expression pipeline at demo scale: stage 1
//! distills frame-wise lip motion from the deterministic lip expert,
//! stage 2 adds temporally coherent eye motion on top. Prints the
//! teacher-agreement numbers stage 1 is graded by and the eye-motion gap
//! stage 2 closes.
//!
//!     cargo run --release --example expression_pipeline

use marionette::expression::{
    phoneme_agreement, resynced_targets, train_stage1, train_stage2, ExpressionPipeline,
    Stage1TrainConfig, Stage2TrainConfig,
};
use marionette::landmarks::mouth_landmark_distance;
use marionette::world::{World, WorldSpec};
use marionette::Result;

fn main() -> Result<()> {
    let world = World::new(WorldSpec { num_clips: 8, frames_per_clip: 80, ..WorldSpec::default() })?;
    let clips: Vec<_> = (0..6).map(|i| world.clip(i)).collect::<Result<_>>()?;
    let probe = world.clip(7)?;

    let s1_cfg = Stage1TrainConfig { steps: 400, ..Stage1TrainConfig::default() };
    println!("stage 1: distilling lip motion for {} steps...", s1_cfg.steps);
    let (stage1, log) = train_stage1(&world, &clips, &s1_cfg)?;
    println!("loss {:.4} -> {:.4}", log.first().unwrap().loss, log.last().unwrap().loss);

    // Grade stage 1 the way the lip expert grades it: do predicted mouths
    // decode to the teacher's phonemes, and how far are the landmarks?
    let eye = world.basis.eye_feature_sequence(&probe.expr).data;
    let pred = stage1.infer(&probe.audio, probe.expr.data.row(0), &eye);
    let (teacher_ph, _) = world.lip_expert(&probe.audio);
    let agreement = phoneme_agreement(&world, &pred.data, &teacher_ph);
    let (_, target) = resynced_targets(&world, &probe);
    let mld: f64 = (0..pred.frames())
        .map(|t| {
            mouth_landmark_distance(
                &world.basis.reconstruct(&pred.data.row(t)),
                &world.basis.reconstruct(&target.row(t)),
            )
        })
        .sum::<f64>()
        / pred.frames() as f64;
    println!("held-out clip: phoneme agreement {:.1}%, MLD vs teacher {mld:.4}", agreement * 100.0);

    let s2_cfg = Stage2TrainConfig { steps: 120, ..Stage2TrainConfig::default() };
    println!();
    println!("stage 2: adversarial eye-motion training for {} steps...", s2_cfg.steps);
    let (stage2, s2_log) = train_stage2(&world, &clips, &stage1, &s2_cfg)?;
    let last = s2_log.last().unwrap();
    println!("generator {:.3}, eye-motion diversity {:.2e}", last.gen, last.diversity);

    // Stage 1 alone leaves eyes at rest; stage 2 makes them move.
    let pipeline = ExpressionPipeline { stage1, stage2: Some(stage2) };
    let (expr, eye_stream) = pipeline.infer(&probe.audio, probe.expr.data.row(0), 5);
    let openness: Vec<f64> = eye_stream.data.column(0).to_vec();
    let spread = openness.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - openness.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "generated eye stream: openness spread {spread:.3} over {} frames ({} coefficients/frame)",
        expr.frames(),
        expr.data.ncols()
    );
    assert!(spread > 0.0, "stage 2 must move the eye stream away from rest");
    Ok(())
}
