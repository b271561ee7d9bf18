//! Gaze is an explicit driving channel: sweep yaw across the renderer and
//! verify with the pupil-centroid oracle that pupils move monotonically,
//! then show the same drive rows steering the animator's inputs.
//!
//!     cargo run --release --example gaze_sweep
//!
//! A strip of the swept faces lands in `target/example-output/gaze_sweep/`.

use std::path::Path;

use marionette::animator::drive_rows;
use marionette::plot::image_strip;
use marionette::render::{eye_boxes, place_face, pupil_offset, render_face};
use marionette::types::{ExpressionSequence, GazeDirection, PoseSequence};
use marionette::world::{World, WorldSpec};
use marionette::Result;
use ndarray::{Array1, Array2};

fn main() -> Result<()> {
    let world = World::new(WorldSpec { num_clips: 2, ..WorldSpec::default() })?;
    let identity = world.identity(0).to_vec();
    let pose = Array1::<f64>::zeros(6);
    let coeffs = Array1::<f64>::zeros(64);

    let yaws = [-0.3, -0.15, 0.0, 0.15, 0.3];
    println!("yaw (fraction of pi) -> mean pupil offset inside the eye boxes");
    let mut offsets = Vec::new();
    let mut frames = Vec::new();
    for &yaw in &yaws {
        let gaze = GazeDirection { yaw, pitch: 0.0 };
        let frame = render_face(&world.basis, &identity, pose.view(), coeffs.view(), gaze);
        let placed = place_face(&world.basis, &identity, pose.view(), coeffs.view());
        let boxes = eye_boxes(&placed);
        let mut per_eye = Vec::new();
        for (cx, cy, hw, hh) in boxes {
            if let Some(off) = pupil_offset(&frame.image.pixels, cx, cy, hw, hh) {
                per_eye.push(off);
            }
        }
        let mean = per_eye.iter().sum::<f64>() / per_eye.len() as f64;
        println!("{yaw:>6.2} -> {mean:>7.3}");
        offsets.push(mean);
        frames.push(frame.image);
    }
    assert!(
        offsets.windows(2).all(|w| w[0] < w[1]),
        "pupil centroids must order with yaw: {offsets:?}"
    );

    let out = Path::new("target/example-output/gaze_sweep");
    image_strip(&out.join("yaw_sweep.png"), &frames)?;
    println!("sweep strip -> {}", out.join("yaw_sweep.png").display());

    // The same gaze values feed the animator as the last two columns of
    // its 72-dim driving rows, so a driving sequence can pin gaze
    // anywhere while pose and expression come from other sources.
    let frames_n = 4;
    let pose_seq = PoseSequence::new(world.spec.fps, Array2::zeros((frames_n, 6)));
    let expr_seq = ExpressionSequence::new(world.spec.fps, Array2::zeros((frames_n, 64)));
    let gaze_seq = world.clip(0)?.gaze;
    let mut truncated = gaze_seq.clone();
    truncated.data = truncated.data.slice(ndarray::s![..frames_n, ..]).to_owned();
    let rows = drive_rows(&pose_seq, &expr_seq, &truncated);
    println!(
        "driving rows are {}x{}; gaze occupies the final 2 columns (first row tail: {:?})",
        rows.nrows(),
        rows.ncols(),
        rows.row(0).to_vec()[70..].to_vec()
    );
    Ok(())
}
