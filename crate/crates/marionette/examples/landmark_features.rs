//! The handcrafted eye-motion feature over the 68-landmark basis: a blink
//! ratio plus twenty brow offsets. Shows its three defining properties —
//! the rest face maps to [1, 0, ..., 0], mouth coefficients cannot touch
//! it, and blinks drive the first component toward zero.
//!
//!     cargo run --release --example landmark_features

use marionette::landmarks::{LandmarkBasis, MOUTH_COEFFS};
use marionette::types::EYE_FEATURE_DIM;
use marionette::world::{World, WorldSpec};
use marionette::Result;
use ndarray::Array1;

fn main() -> Result<()> {
    let world = World::new(WorldSpec { num_clips: 1, ..WorldSpec::default() })?;
    let basis: &LandmarkBasis = &world.basis;

    // Rest expression: fully open eyes, unmoved brows.
    let rest = basis.reconstruct(&Array1::zeros(64).view());
    let f0 = basis.eye_motion_feature(&rest);
    println!("feature dimension: {EYE_FEATURE_DIM}");
    println!("rest feature head: {:?}", &f0.to_vec()[..4]);
    assert_eq!(f0[0], 1.0, "rest blink ratio is exactly 1");
    assert!(f0.iter().skip(1).all(|v| *v == 0.0), "rest brow offsets are exactly 0");

    // Mouth coefficients are disjoint from the eye region by construction,
    // so the feature ignores them with zero tolerance.
    let mut coeffs = Array1::zeros(64);
    for i in MOUTH_COEFFS {
        coeffs[i] = 0.8;
    }
    let talking = basis.reconstruct(&coeffs.view());
    let f_talk = basis.eye_motion_feature(&talking);
    let max_delta =
        f0.iter().zip(f_talk.iter()).map(|(a, b)| (a - b).abs()).fold(0.0_f64, f64::max);
    println!("max feature change under a large mouth move: {max_delta}");
    assert_eq!(max_delta, 0.0, "mouth coefficients must not leak into the eye feature");

    // A clip's blink tape shows up directly in the first component.
    let clip = world.clip(0)?;
    let feats = basis.eye_feature_sequence(&clip.expr);
    let openness: Vec<f64> = feats.data.column(0).to_vec();
    let min_open = openness.iter().cloned().fold(f64::INFINITY, f64::min);
    let shut_frames = openness.iter().filter(|v| **v < 0.5).count();
    println!(
        "clip 0: openness ranges {:.3}..{:.3}, {} of {} frames below the blink threshold",
        min_open,
        openness.iter().cloned().fold(0.0, f64::max),
        shut_frames,
        openness.len()
    );
    assert!(shut_frames > 0, "the world guarantees at least one blink per clip");
    Ok(())
}
