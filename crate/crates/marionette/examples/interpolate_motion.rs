//! Motion interpolation in the animator's latent space. A source image is
//! encoded to its reference code `z_R`; a target driving frame supplies a
//! navigation vector `eta` through the orthogonal motion codebook. Decoding
//! `z_R + lambda * eta` for increasing `lambda` transfers the motion
//! gradually — the identity stays put while pose and mouth move toward the
//! target.
//!
//!     cargo run --release --example interpolate_motion
//!
//! The interpolation strip lands in `target/example-output/interpolate/`.

use std::path::Path;

use marionette::animator::{
    drive_rows, train_animator, window_at, AnimatorArch, AnimatorTrainConfig,
};
use marionette::plot::image_strip;
use marionette::render::{render_face, train_estimators, EstimatorTrainConfig};
use marionette::world::{World, WorldSpec};
use marionette::Result;

fn main() -> Result<()> {
    let world = World::new(WorldSpec { num_clips: 5, frames_per_clip: 60, ..WorldSpec::default() })?;
    let clips: Vec<_> = (0..4).map(|i| world.clip(i)).collect::<Result<_>>()?;
    let probe = world.clip(4)?;

    let est_cfg = EstimatorTrainConfig { samples: 192, eval_samples: 48, steps: 150, ..EstimatorTrainConfig::default() };
    println!("training estimators at demo budget...");
    let (estimators, _) = train_estimators(&world, &est_cfg)?;
    let cfg = AnimatorTrainConfig {
        steps: 80,
        batch: 4,
        arch: AnimatorArch { latent_dim: 48, codebook_size: 10, ..AnimatorArch::default() },
        ..AnimatorTrainConfig::default()
    };
    println!("training animator for {} steps...", cfg.steps);
    let (animator, _) = train_animator(&world.basis, &clips, &estimators, &cfg)?;

    // Source image: held-out clip's first frame. Target: the frame where the
    // clip's head has moved furthest from its start.
    let source = render_face(
        &world.basis,
        &probe.meta.identity,
        probe.pose.data.row(0),
        probe.expr.data.row(0),
        probe.gaze.direction(0),
    )
    .image;
    let z_r = animator.encode_identity(&source);

    let rows = drive_rows(&probe.pose, &probe.expr, &probe.gaze);
    let target_t = (0..probe.frames())
        .max_by(|&a, &b| {
            let d = |t: usize| {
                (&probe.pose.data.row(t) - &probe.pose.data.row(0)).mapv(f64::abs).sum()
            };
            d(a).partial_cmp(&d(b)).unwrap()
        })
        .unwrap();
    let rho = animator.driving_feature(&window_at(&rows, target_t, animator.arch.window_radius));
    let (_, eta, _) = animator.navigate(&z_r, &rho);
    println!("target frame {target_t}, |eta| = {:.3}", eta.dot(&eta).sqrt());

    let lambdas = [0.0, 0.25, 0.5, 0.75, 1.0];
    let strip: Vec<_> = lambdas.iter().map(|&l| animator.decode_latent(&(&z_r + &(&eta * l)))).collect();

    // Walk the estimator along the strip: pose should drift from the
    // reference reading toward the target reading.
    println!("lambda   est pose L2 from lambda=0   est openness");
    let (_, s0, p0) = estimators.estimate(&strip[0].pixels);
    for (l, frame) in lambdas.iter().zip(strip.iter()) {
        let (_, s, p) = estimators.estimate(&frame.pixels);
        let drift = p.iter().zip(p0.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        println!("{l:>6.2}   {drift:>25.4}   {:>12.3}", s[0]);
    }
    let (_, _, p_last) = estimators.estimate(&strip[4].pixels);
    let total = p_last.iter().zip(p0.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();
    assert!(total > 0.0, "navigation must move the estimator's pose reading");
    println!("openness at lambda=0: {:.3} (reference mean expression)", s0[0]);

    let out = Path::new("target/example-output/interpolate");
    image_strip(&out.join("motion_walk.png"), &strip)?;
    println!("strip -> {}", out.join("motion_walk.png").display());
    Ok(())
}
