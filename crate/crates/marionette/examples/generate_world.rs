//! Generate a slice of the synthetic world and verify its built-in
//! guarantees: audio decodes back to the phonemes that produced it, head
//! speed tracks the loudness envelope, and every clip blinks.
//!
//!     cargo run --release --example generate_world

use marionette::metrics::pearson;
use marionette::world::{World, WorldSpec};
use marionette::Result;

fn main() -> Result<()> {
    let spec = WorldSpec { num_clips: 6, frames_per_clip: 90, ..WorldSpec::default() };
    let world = World::new(spec)?;

    println!("world with {} clips, {} identities", world.spec.num_clips, world.spec.num_identities);
    println!();
    println!("clip  frames  speed/env corr  blinks  lip-expert agreement");
    for i in 0..world.spec.num_clips {
        let clip = world.clip(i)?;
        // Head speed should follow loudness: louder speech, livelier head.
        let speed: Vec<f64> = (0..clip.frames() - 1)
            .map(|t| {
                let a = clip.pose.data.row(t);
                let b = clip.pose.data.row(t + 1);
                a.iter().zip(b.iter()).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt()
            })
            .collect();
        let corr = pearson(&speed, &clip.meta.envelope[..speed.len()]);

        // The deterministic lip expert re-reads the phoneme stream off the
        // audio; the world guarantees high agreement at its default noise.
        let (decoded, _) = world.lip_expert(&clip.audio);
        let agree = decoded
            .iter()
            .zip(clip.meta.phonemes.iter())
            .filter(|(a, b)| a == b)
            .count() as f64
            / decoded.len() as f64;

        let blinks = clip
            .meta
            .blink_openness
            .windows(2)
            .filter(|w| w[0] >= 0.5 && w[1] < 0.5)
            .count();

        println!(
            "{i:>4}  {:>6}  {corr:>14.3}  {blinks:>6}  {:>19.1}%",
            clip.frames(),
            agree * 100.0
        );
        assert!(corr >= world.spec.min_speed_env_corr, "world regenerates low-correlation clips");
        assert!(blinks >= 1, "every clip blinks at least once");
    }
    println!();
    println!("all clips satisfy the world's correlation and blink guarantees");
    Ok(())
}
