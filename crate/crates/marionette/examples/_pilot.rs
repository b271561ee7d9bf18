//! Scratch pilot for budget tuning. Not part of the repo's examples; deleted
//! before committing.

use std::time::Instant;

use marionette::diffusion::{train_pose, PoseTrainConfig};
use marionette::metrics::{head_speed, pearson};
use marionette::world::{World, WorldSpec};
use marionette::Result;
use rayon::prelude::*;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(200);
    let eval_n: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20);

    let world = World::new(WorldSpec { num_clips: 24, ..WorldSpec::default() })?;
    let eval_world = World::new(WorldSpec {
        seed: 909,
        num_clips: eval_n,
        frames_per_clip: 100,
        ..WorldSpec::default()
    })?;
    let t0 = Instant::now();
    let clips: Vec<_> = (0..24).map(|i| world.clip(i)).collect::<Result<_>>()?;
    let eval: Vec<_> = (0..eval_n).map(|i| eval_world.clip(i)).collect::<Result<_>>()?;
    println!("clip gen: {:.1?}", t0.elapsed());

    let cfg = PoseTrainConfig { steps, ..PoseTrainConfig::default() };
    let t0 = Instant::now();
    let (model, logs) = train_pose(&clips, &cfg)?;
    let train_t = t0.elapsed();
    println!(
        "train {} steps: {:.1?} ({:.2}s/step), loss {:.3} -> {:.3}",
        steps,
        train_t,
        train_t.as_secs_f64() / steps as f64,
        logs[0].first().unwrap().loss,
        logs[0].last().unwrap().loss
    );

    let t0 = Instant::now();
    let rho: Vec<(f64, f64)> = eval
        .par_iter()
        .enumerate()
        .map(|(i, clip)| {
            let seed = 5000 + i as u64;
            let matched = model.sample(&clip.audio, clip.pose.data.row(0), 0.4, seed).unwrap();
            let other = &eval[(i + 1) % eval.len()];
            let mism = model.sample(&other.audio, clip.pose.data.row(0), 0.4, seed).unwrap();
            let env = &clip.meta.envelope;
            (
                pearson(&head_speed(&matched), &env[..matched.frames() - 1]),
                pearson(&head_speed(&mism), &env[..mism.frames() - 1]),
            )
        })
        .collect();
    let sample_t = t0.elapsed();
    let mean_m = rho.iter().map(|r| r.0).sum::<f64>() / rho.len() as f64;
    let mean_x = rho.iter().map(|r| r.1).sum::<f64>() / rho.len() as f64;
    println!(
        "sampling {} clips x2: {:.1?}; mean rho matched {:.3}, mismatched {:.3}",
        eval_n, sample_t, mean_m, mean_x
    );
    for (i, (m, x)) in rho.iter().enumerate().take(8) {
        println!("  clip {i}: matched {m:.3} mismatched {x:.3}");
    }
    Ok(())
}
