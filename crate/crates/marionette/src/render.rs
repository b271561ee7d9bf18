//! Deterministic face rasterizer and the small convolutional estimators
//! that read gaze, expression scalars, and pose back out of images.
//!
//! The renderer draws a 64x64 grayscale face from landmark geometry:
//! identity deforms the mean face, pose rotates/foreshortens/translates it,
//! expression coefficients move the landmarks through the shared basis, and
//! gaze offsets the pupils inside the eyelid aperture (so blinks occlude
//! them). All shapes are anti-aliased with a smoothstep edge. Alongside
//! every frame it emits the lip-and-eye attention mask used by masked
//! reconstruction losses.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::landmarks::{shut_distance, LandmarkBasis, BROW_LANDMARKS, EYELID_PAIRS};
use crate::nn::{clip_global_norm, grad_vec, Adam, AdamConfig, Conv2d, Linear, Params};
use crate::rng::{normal, rng_for, Rng};
use crate::tensor::{Tape, Var};
use crate::types::{
    ExpressionSequence, FrameImage, GazeDirection, GazeSequence, LandmarkSet, PoseSequence,
    EXPR_DIM, IDENTITY_DIM, IMAGE_SIZE, POSE_DIM,
};
use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayD, IxDyn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Half-width (pixels) of the anti-aliasing edge.
const AA: f64 = 0.75;
/// Pixels per landmark unit.
const PX_PER_UNIT: f64 = 24.0;

/// Interpretable expression scalars `[mouth_open, eye_open, brow_raise]`:
/// inner-lip separation relative to rest, eyelid aperture relative to rest,
/// and mean vertical brow displacement (x10).
pub const SCALAR_NAMES: [&str; 3] = ["mouth_open", "eye_open", "brow_raise"];

pub fn expression_scalars(basis: &LandmarkBasis, coeffs: ArrayView1<f64>) -> [f64; 3] {
    let lm = basis.reconstruct(&coeffs);
    let rest = LandmarkSet::new(basis.mean_points().clone());
    let mouth_open = shut_distance(&lm) / shut_distance(&rest);
    let eye_open = basis.blink_ratio(&lm.points);
    let mut brow = 0.0;
    for li in BROW_LANDMARKS {
        brow += lm.points[[li, 1]] - basis.mean_points()[[li, 1]];
    }
    brow *= 10.0 / BROW_LANDMARKS.len() as f64;
    [mouth_open, eye_open, brow]
}

/// Landmarks projected to pixel coordinates, plus the render attributes
/// that identity controls directly.
#[derive(Debug, Clone)]
pub struct PlacedFace {
    /// `(68, 2)` pixel coordinates, y down.
    pub points: Array2<f64>,
    pub brow_radius: f64,
    pub skin: f64,
}

/// Apply identity deformation, expression, and pose; project to pixels.
pub fn place_face(
    basis: &LandmarkBasis,
    identity: &[f64],
    pose: ArrayView1<f64>,
    coeffs: ArrayView1<f64>,
) -> PlacedFace {
    assert_eq!(identity.len(), IDENTITY_DIM, "identity vector length");
    assert_eq!(pose.len(), POSE_DIM, "pose vector length");
    let lm = basis.reconstruct(&coeffs);
    let mut pts = lm.points;

    // Identity deformation in landmark space.
    let (sx, sy) = (1.0 + 0.10 * identity[0], 1.0 + 0.10 * identity[1]);
    for mut row in pts.rows_mut() {
        row[0] *= sx;
        row[1] *= sy;
    }
    for li in 17..48 {
        pts[[li, 1]] += 0.05 * identity[2];
    }
    let mouth_cx = (48..68).map(|li| pts[[li, 0]]).sum::<f64>() / 20.0;
    for li in 48..68 {
        pts[[li, 0]] = mouth_cx + (pts[[li, 0]] - mouth_cx) * (1.0 + 0.10 * identity[3]);
    }
    for li in 0..17 {
        pts[[li, 0]] *= 1.0 + 0.08 * identity[4];
    }
    for eye in [36..42usize, 42..48usize] {
        let n = eye.len() as f64;
        let cx = eye.clone().map(|li| pts[[li, 0]]).sum::<f64>() / n;
        let cy = eye.clone().map(|li| pts[[li, 1]]).sum::<f64>() / n;
        let s = 1.0 + 0.10 * identity[7];
        for li in eye {
            pts[[li, 0]] = cx + (pts[[li, 0]] - cx) * s;
            pts[[li, 1]] = cy + (pts[[li, 1]] - cy) * s;
        }
    }

    // Pose: foreshortening with a little depth parallax, then an in-plane
    // rotation, translation, and zoom.
    let (rx, ry, rz) = (pose[0], pose[1], pose[2]);
    let (tx, ty, tz) = (pose[3], pose[4], pose[5]);
    let scale = (1.0 + 0.8 * tz) * PX_PER_UNIT;
    let mut placed = Array2::zeros((pts.nrows(), 2));
    for (li, row) in pts.rows().into_iter().enumerate() {
        let (x, y, z) = (row[0], row[1], row[2]);
        let x1 = ry.cos() * x + 0.4 * ry.sin() * z;
        let y1 = rx.cos() * y + 0.4 * rx.sin() * z;
        let u = rz.cos() * x1 - rz.sin() * y1 + tx;
        let w = rz.sin() * x1 + rz.cos() * y1 + ty;
        placed[[li, 0]] = IMAGE_SIZE as f64 / 2.0 + scale * u;
        placed[[li, 1]] = IMAGE_SIZE as f64 / 2.0 - scale * w;
    }
    PlacedFace {
        points: placed,
        brow_radius: 0.030 * (1.0 + 0.25 * identity[5]) * PX_PER_UNIT,
        skin: (0.72 + 0.06 * identity[6]).clamp(0.55, 0.9),
    }
}

fn smooth_coverage(signed_dist: f64) -> f64 {
    if signed_dist <= -AA {
        1.0
    } else if signed_dist >= AA {
        0.0
    } else {
        let s = (AA - signed_dist) / (2.0 * AA);
        s * s * (3.0 - 2.0 * s)
    }
}

struct Canvas {
    pixels: Array2<f64>,
}

impl Canvas {
    fn new(background: f64) -> Self {
        Canvas { pixels: Array2::from_elem((IMAGE_SIZE, IMAGE_SIZE), background) }
    }

    fn paint<F: Fn(f64, f64) -> f64>(&mut self, bb: (f64, f64, f64, f64), color: f64, dist: F) {
        let (x0, y0, x1, y1) = bb;
        let xa = (x0 - AA - 1.0).floor().max(0.0) as usize;
        let ya = (y0 - AA - 1.0).floor().max(0.0) as usize;
        let xb = (x1 + AA + 1.0).ceil().min(IMAGE_SIZE as f64 - 1.0) as usize;
        let yb = (y1 + AA + 1.0).ceil().min(IMAGE_SIZE as f64 - 1.0) as usize;
        for py in ya..=yb {
            for px in xa..=xb {
                let cov = smooth_coverage(dist(px as f64 + 0.5, py as f64 + 0.5));
                if cov > 0.0 {
                    let v = &mut self.pixels[[py, px]];
                    *v = *v * (1.0 - cov) + color * cov;
                }
            }
        }
    }

    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, color: f64) {
        if rx <= 0.05 || ry <= 0.05 {
            return;
        }
        let rmin = rx.min(ry);
        self.paint((cx - rx, cy - ry, cx + rx, cy + ry), color, |x, y| {
            let dn = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
            (dn.sqrt() - 1.0) * rmin
        });
    }

    /// Ellipse clipped to another ellipse (used for pupils under eyelids).
    #[allow(clippy::too_many_arguments)]
    fn ellipse_clipped(
        &mut self,
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        clip: (f64, f64, f64, f64),
        color: f64,
    ) {
        if rx <= 0.05 || ry <= 0.05 {
            return;
        }
        let rmin = rx.min(ry);
        let (kx, ky, krx, kry) = clip;
        if krx <= 0.05 || kry <= 0.05 {
            return;
        }
        let krmin = krx.min(kry);
        self.paint((cx - rx, cy - ry, cx + rx, cy + ry), color, |x, y| {
            let d_self = ((((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt() - 1.0) * rmin;
            let d_clip =
                ((((x - kx) / krx).powi(2) + ((y - ky) / kry).powi(2)).sqrt() - 1.0) * krmin;
            d_self.max(d_clip)
        });
    }

    fn capsule(&mut self, ax: f64, ay: f64, bx: f64, by: f64, radius: f64, color: f64) {
        let bb = (ax.min(bx) - radius, ay.min(by) - radius, ax.max(bx) + radius, ay.max(by) + radius);
        self.paint(bb, color, |x, y| {
            let (dx, dy) = (bx - ax, by - ay);
            let len2 = dx * dx + dy * dy;
            let t = if len2 < 1e-12 {
                0.0
            } else {
                (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0)
            };
            let (px, py) = (ax + t * dx, ay + t * dy);
            ((x - px).powi(2) + (y - py).powi(2)).sqrt() - radius
        });
    }
}

/// A rendered frame plus its lip-and-eye attention mask.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub image: FrameImage,
    pub mask: Array2<f64>,
}

struct EyeGeometry {
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
}

fn eye_geometry(pts: &Array2<f64>, corner_a: usize, corner_b: usize, pairs: [(usize, usize); 2]) -> EyeGeometry {
    let ids = corner_a..corner_a + 6;
    let n = ids.len() as f64;
    let cx = ids.clone().map(|li| pts[[li, 0]]).sum::<f64>() / n;
    let cy = ids.clone().map(|li| pts[[li, 1]]).sum::<f64>() / n;
    let half_w = 0.5
        * (((pts[[corner_b, 0]] - pts[[corner_a, 0]]).powi(2)
            + (pts[[corner_b, 1]] - pts[[corner_a, 1]]).powi(2))
        .sqrt());
    let mut gap = 0.0;
    for (p, q) in pairs {
        gap += ((pts[[p, 0]] - pts[[q, 0]]).powi(2) + (pts[[p, 1]] - pts[[q, 1]]).powi(2)).sqrt();
    }
    EyeGeometry { cx, cy, half_w: half_w * 0.95, half_h: gap / 4.0 }
}

fn bounding_box(pts: &Array2<f64>, range: std::ops::Range<usize>, pad: f64) -> (f64, f64, f64, f64) {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for li in range {
        x0 = x0.min(pts[[li, 0]]);
        y0 = y0.min(pts[[li, 1]]);
        x1 = x1.max(pts[[li, 0]]);
        y1 = y1.max(pts[[li, 1]]);
    }
    (x0 - pad, y0 - pad, x1 + pad, y1 + pad)
}

/// Render one frame.
pub fn render_face(
    basis: &LandmarkBasis,
    identity: &[f64],
    pose: ArrayView1<f64>,
    coeffs: ArrayView1<f64>,
    gaze: GazeDirection,
) -> RenderedFrame {
    let placed = place_face(basis, identity, pose, coeffs);
    let pts = &placed.points;
    let mut canvas = Canvas::new(0.10);

    // Head: an ellipse fitted to the jaw contour at rest expression (the
    // skull is rigid), with forehead room extrapolated above the ears, so
    // expression never reshapes the silhouette.
    let rest = Array1::zeros(EXPR_DIM);
    let skull = place_face(basis, identity, pose, rest.view());
    let (bx0, by0, bx1, by1) = bounding_box(&skull.points, 0..17, 0.0);
    let jaw_h = by1 - by0;
    let top = by0 - 0.55 * jaw_h;
    let bottom = by1 + 0.06 * jaw_h;
    let (cx, cy) = ((bx0 + bx1) / 2.0, (top + bottom) / 2.0);
    let (rx, ry) = ((bx1 - bx0) / 2.0 * 1.12, (bottom - top) / 2.0);
    canvas.ellipse(cx, cy, rx, ry, placed.skin);

    // Nose.
    canvas.capsule(
        pts[[27, 0]],
        pts[[27, 1]],
        pts[[30, 0]],
        pts[[30, 1]],
        0.8,
        placed.skin * 0.82,
    );

    // Brows: two capsules per brow.
    for base in [17usize, 22] {
        for (a, b) in [(base, base + 2), (base + 2, base + 4)] {
            canvas.capsule(
                pts[[a, 0]],
                pts[[a, 1]],
                pts[[b, 0]],
                pts[[b, 1]],
                placed.brow_radius,
                0.25,
            );
        }
    }

    // Lips: outer ellipse, then the inner cavity when the mouth is open.
    let mouth_bb = bounding_box(pts, 48..68, 0.0);
    let (mcx, mcy) = ((mouth_bb.0 + mouth_bb.2) / 2.0, (mouth_bb.1 + mouth_bb.3) / 2.0);
    let mrx = (mouth_bb.2 - mouth_bb.0) / 2.0 * 1.05;
    let mry = (mouth_bb.3 - mouth_bb.1) / 2.0 * 1.05;
    canvas.ellipse(mcx, mcy, mrx, mry, 0.45);
    let inner_bb = bounding_box(pts, 60..68, 0.0);
    let (icx, icy) = ((inner_bb.0 + inner_bb.2) / 2.0, (inner_bb.1 + inner_bb.3) / 2.0);
    let irx = (inner_bb.2 - inner_bb.0) / 2.0;
    let iry = (inner_bb.3 - inner_bb.1) / 2.0;
    if iry > 0.15 {
        canvas.ellipse(icx, icy, irx, iry, 0.06);
    }

    // Eyes: sclera aperture plus the gaze-driven pupil, clipped to the
    // aperture so closing lids occlude it.
    for (corner_a, corner_b, pairs) in [
        (36usize, 39usize, [EYELID_PAIRS[0], EYELID_PAIRS[1]]),
        (42, 45, [EYELID_PAIRS[2], EYELID_PAIRS[3]]),
    ] {
        let eye = eye_geometry(pts, corner_a, corner_b, pairs);
        if eye.half_h < 0.15 {
            continue;
        }
        canvas.ellipse(eye.cx, eye.cy, eye.half_w, eye.half_h, 0.93);
        let pupil_r = 0.40 * eye.half_w;
        let px = eye.cx + gaze.yaw_radians().sin() * (eye.half_w - pupil_r) * 0.9;
        let py = eye.cy + gaze.pitch_radians().sin() * (eye.half_w - pupil_r) * 0.5;
        canvas.ellipse_clipped(
            px,
            py,
            pupil_r,
            pupil_r,
            (eye.cx, eye.cy, eye.half_w, eye.half_h),
            0.08,
        );
    }

    // Lip-and-eye mask: bounding boxes padded by 3px.
    let mut mask = Array2::zeros((IMAGE_SIZE, IMAGE_SIZE));
    for bb in [
        bounding_box(pts, 48..68, 3.0),
        bounding_box(pts, 36..42, 3.0),
        bounding_box(pts, 42..48, 3.0),
    ] {
        let xa = bb.0.floor().max(0.0) as usize;
        let ya = bb.1.floor().max(0.0) as usize;
        let xb = (bb.2.ceil() as usize).min(IMAGE_SIZE - 1);
        let yb = (bb.3.ceil() as usize).min(IMAGE_SIZE - 1);
        for y in ya..=yb {
            for x in xa..=xb {
                mask[[y, x]] = 1.0;
            }
        }
    }

    let pixels = canvas.pixels.mapv(|v| v.clamp(0.0, 1.0));
    RenderedFrame { image: FrameImage::new(pixels), mask }
}

/// Render every frame of an aligned motion sequence.
pub fn render_sequence(
    basis: &LandmarkBasis,
    identity: &[f64],
    pose: &PoseSequence,
    expr: &ExpressionSequence,
    gaze: &GazeSequence,
) -> Vec<RenderedFrame> {
    assert!(
        pose.frames() == expr.frames() && expr.frames() == gaze.frames(),
        "sequence lengths differ"
    );
    (0..pose.frames())
        .map(|t| {
            render_face(basis, identity, pose.data.row(t), expr.data.row(t), gaze.direction(t))
        })
        .collect()
}

/// Horizontal offset (pixels) of the dark-pixel centroid inside an eye box,
/// or `None` when no dark mass is visible (eye shut).
pub fn pupil_offset(image: &Array2<f64>, cx: f64, cy: f64, half_w: f64, half_h: f64) -> Option<f64> {
    let xa = (cx - half_w - 2.0).floor().max(0.0) as usize;
    let xb = ((cx + half_w + 2.0).ceil() as usize).min(IMAGE_SIZE - 1);
    let ya = (cy - half_h - 2.0).floor().max(0.0) as usize;
    let yb = ((cy + half_h + 2.0).ceil() as usize).min(IMAGE_SIZE - 1);
    let mut wsum = 0.0;
    let mut xsum = 0.0;
    for y in ya..=yb {
        for x in xa..=xb {
            let w = (0.55 - image[[y, x]]).max(0.0);
            wsum += w;
            xsum += w * (x as f64 + 0.5 - cx);
        }
    }
    if wsum < 0.5 {
        None
    } else {
        Some(xsum / wsum)
    }
}

/// Eye centers and extents at a given placement, for centroid measurements.
pub fn eye_boxes(placed: &PlacedFace) -> [(f64, f64, f64, f64); 2] {
    let right = eye_geometry(&placed.points, 36, 39, [EYELID_PAIRS[0], EYELID_PAIRS[1]]);
    let left = eye_geometry(&placed.points, 42, 45, [EYELID_PAIRS[2], EYELID_PAIRS[3]]);
    [
        (right.cx, right.cy, right.half_w, right.half_h),
        (left.cx, left.cy, left.half_w, left.half_h),
    ]
}

// ---------------------------------------------------------------------------
// Image estimators
// ---------------------------------------------------------------------------

pub const ESTIMATOR_KIND: &str = "face-estimators";
/// Accuracy the estimators must reach to be trusted by downstream losses.
pub const GAZE_MAE_LIMIT: f64 = 0.02;
pub const SCALAR_MAE_LIMIT: f64 = 0.05;

/// Shared-trunk convolutional network with gaze, expression-scalar, and
/// pose heads.
pub struct FaceEstimators {
    pub params: Params,
    seed: u64,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    fc: Linear,
    gaze_head: Linear,
    scalar_head: Linear,
    pose_head: Linear,
}

/// Estimator outputs on a batch of images.
pub struct EstimatorHeads {
    pub gaze: Var,
    pub scalars: Var,
    pub pose: Var,
}

impl FaceEstimators {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_for(seed, "estimators.init");
        let mut p = Params::new();
        let conv1 = Conv2d::new(&mut p, "trunk.conv1", 1, 8, 4, 2, 1, &mut rng);
        let conv2 = Conv2d::new(&mut p, "trunk.conv2", 8, 16, 4, 2, 1, &mut rng);
        let conv3 = Conv2d::new(&mut p, "trunk.conv3", 16, 32, 4, 2, 1, &mut rng);
        let fc = Linear::new(&mut p, "trunk.fc", 32 * 8 * 8, 64, &mut rng);
        let gaze_head = Linear::new(&mut p, "head.gaze", 64, 2, &mut rng);
        let scalar_head = Linear::new(&mut p, "head.scalars", 64, 3, &mut rng);
        let pose_head = Linear::new(&mut p, "head.pose", 64, 6, &mut rng);
        FaceEstimators { params: p, seed, conv1, conv2, conv3, fc, gaze_head, scalar_head, pose_head }
    }

    /// `images` must be `(batch, 1, 64, 64)`.
    pub fn forward(&self, t: &Tape, bound: &[Var], images: Var) -> EstimatorHeads {
        let b = t.shape(images)[0];
        let mut x = t.relu(self.conv1.forward(t, bound, images));
        x = t.relu(self.conv2.forward(t, bound, x));
        x = t.relu(self.conv3.forward(t, bound, x));
        x = t.reshape(x, &[b, 32 * 8 * 8]);
        let feat = t.relu(self.fc.forward(t, bound, x));
        EstimatorHeads {
            gaze: self.gaze_head.forward(t, bound, feat),
            scalars: self.scalar_head.forward(t, bound, feat),
            pose: self.pose_head.forward(t, bound, feat),
        }
    }

    /// Convenience single-image readout.
    pub fn estimate(&self, image: &Array2<f64>) -> ([f64; 2], [f64; 3], [f64; 6]) {
        let t = Tape::new();
        let bound = self.params.bind(&t);
        let input = t.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, IMAGE_SIZE, IMAGE_SIZE]), image.iter().cloned().collect())
                .unwrap(),
        );
        let heads = self.forward(&t, &bound, input);
        let g = t.value(heads.gaze);
        let s = t.value(heads.scalars);
        let p = t.value(heads.pose);
        (
            [g[[0, 0].as_ref()], g[[0, 1].as_ref()]],
            [s[[0, 0].as_ref()], s[[0, 1].as_ref()], s[[0, 2].as_ref()]],
            std::array::from_fn(|i| p[[0, i].as_ref()]),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::json!({ "seed": self.seed });
        checkpoint::save(path, ESTIMATOR_KIND, &config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, _) = checkpoint::load(path, ESTIMATOR_KIND)?;
        let seed = config["seed"]
            .as_u64()
            .ok_or_else(|| Error::validation("estimator checkpoint config lacks a seed"))?;
        let mut model = Self::new(seed);
        checkpoint::load_into(path, ESTIMATOR_KIND, &mut model.params)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorTrainConfig {
    pub seed: u64,
    pub samples: usize,
    pub eval_samples: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for EstimatorTrainConfig {
    fn default() -> Self {
        Self { seed: 123, samples: 640, eval_samples: 128, batch: 32, steps: 500, lr: 2.5e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorReport {
    pub gaze_mae: f64,
    pub scalar_mae: f64,
    pub pose_mae: f64,
    pub final_loss: f64,
}

impl EstimatorReport {
    pub fn meets_thresholds(&self) -> bool {
        self.gaze_mae < GAZE_MAE_LIMIT && self.scalar_mae < SCALAR_MAE_LIMIT
    }
}

struct SampleSet {
    images: Array4<f64>,
    gaze: Array2<f64>,
    scalars: Array2<f64>,
    pose: Array2<f64>,
}

fn draw_samples(world: &crate::world::World, rng: &mut Rng, count: usize) -> SampleSet {
    let basis = &world.basis;
    let spec = &world.spec;
    let mut images = Array4::zeros((count, 1, IMAGE_SIZE, IMAGE_SIZE));
    let mut gaze = Array2::zeros((count, 2));
    let mut scalars = Array2::zeros((count, 3));
    let mut pose = Array2::zeros((count, POSE_DIM));

    for i in 0..count {
        let identity: Vec<f64> = if rng.gen::<f64>() < 0.5 {
            let row = world.identities.row(rng.gen_range(0..spec.num_identities));
            row.iter().map(|&v| (v + 0.1 * normal(rng)).clamp(-1.5, 1.5)).collect()
        } else {
            (0..IDENTITY_DIM).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * 1.3).collect()
        };
        for d in 0..POSE_DIM {
            let half = if d < 3 { 0.2 } else if d < 5 { 0.12 } else { 0.07 };
            pose[[i, d]] = (rng.gen::<f64>() * 2.0 - 1.0) * half;
        }
        // Expression: mouth mixes two phoneme shapes, lids are anywhere
        // between open and shut, brows follow the world's driving
        // directions plus noise.
        let mut coeffs = Array1::zeros(EXPR_DIM);
        let pa = rng.gen_range(0..spec.phoneme_count);
        let pb = rng.gen_range(0..spec.phoneme_count);
        let lam = rng.gen::<f64>();
        for c in 0..32 {
            coeffs[c] = lam * world.mouth_shapes[[pa, c]]
                + (1.0 - lam) * world.mouth_shapes[[pb, c]]
                + 0.02 * normal(rng);
        }
        let shut_amount = rng.gen::<f64>();
        let blink_dir = basis.blink_direction();
        for c in 32..48 {
            coeffs[c] = shut_amount * blink_dir[c];
        }
        let g_env = (rng.gen::<f64>() * 2.0 - 1.0) * 0.3;
        let g_sin = (rng.gen::<f64>() * 2.0 - 1.0) * 0.15;
        for (j, c) in (48..64).enumerate() {
            coeffs[c] = g_env * world.brow_env_dir[j] + g_sin * world.brow_sin_dir[j] + 0.04 * normal(rng);
        }
        let g = GazeDirection {
            yaw: (rng.gen::<f64>() * 2.0 - 1.0) * 0.35,
            pitch: (rng.gen::<f64>() * 2.0 - 1.0) * 0.35,
        };
        gaze[[i, 0]] = g.yaw;
        gaze[[i, 1]] = g.pitch;
        let s = expression_scalars(basis, coeffs.view());
        scalars[[i, 0]] = s[0];
        scalars[[i, 1]] = s[1];
        scalars[[i, 2]] = s[2];
        let frame = render_face(basis, &identity, pose.row(i), coeffs.view(), g);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                images[[i, 0, y, x]] = frame.image.pixels[[y, x]];
            }
        }
    }
    SampleSet { images, gaze, scalars, pose }
}

fn gather_batch(set: &SampleSet, idx: &[usize]) -> SampleSet {
    let b = idx.len();
    let mut images = Array4::zeros((b, 1, IMAGE_SIZE, IMAGE_SIZE));
    let mut gaze = Array2::zeros((b, 2));
    let mut scalars = Array2::zeros((b, 3));
    let mut pose = Array2::zeros((b, POSE_DIM));
    for (k, &i) in idx.iter().enumerate() {
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                images[[k, 0, y, x]] = set.images[[i, 0, y, x]];
            }
        }
        for d in 0..2 {
            gaze[[k, d]] = set.gaze[[i, d]];
        }
        for d in 0..3 {
            scalars[[k, d]] = set.scalars[[i, d]];
        }
        for d in 0..POSE_DIM {
            pose[[k, d]] = set.pose[[i, d]];
        }
    }
    SampleSet { images, gaze, scalars, pose }
}

/// Train the estimators on freshly rendered faces and measure held-out MAE.
pub fn train_estimators(
    world: &crate::world::World,
    cfg: &EstimatorTrainConfig,
) -> Result<(FaceEstimators, EstimatorReport)> {
    let mut rng = rng_for(cfg.seed, "estimators.data");
    let train = draw_samples(world, &mut rng, cfg.samples);
    let eval = draw_samples(world, &mut rng, cfg.eval_samples);

    let mut model = FaceEstimators::new(cfg.seed);
    let mut opt = Adam::new(&model.params, AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..cfg.samples).collect();
    let mut rng_order = rng_for(cfg.seed, "estimators.batches");
    let mut cursor = cfg.samples; // trigger a shuffle on the first step
    let mut final_loss = f64::NAN;

    for step in 0..cfg.steps {
        if cursor + cfg.batch > cfg.samples {
            // Fisher-Yates reshuffle at each epoch boundary.
            for i in (1..order.len()).rev() {
                let j = rng_order.gen_range(0..=i);
                order.swap(i, j);
            }
            cursor = 0;
        }
        let idx = &order[cursor..cursor + cfg.batch];
        cursor += cfg.batch;
        let batch = gather_batch(&train, idx);

        let t = Tape::new();
        let bound = model.params.bind(&t);
        let images = t.constant(batch.images.clone().into_dyn());
        let heads = model.forward(&t, &bound, images);
        let target_gaze = t.constant(batch.gaze.clone().into_dyn());
        let target_scalars = t.constant(batch.scalars.clone().into_dyn());
        let target_pose = t.constant(batch.pose.clone().into_dyn());
        let loss_gaze = t.mse(heads.gaze, target_gaze);
        let loss_scalars = t.mse(heads.scalars, target_scalars);
        let loss_pose = t.mse(heads.pose, target_pose);
        let loss = crate::nn::weighted_sum(&t, &[(3.0, loss_gaze), (1.0, loss_scalars), (1.0, loss_pose)]);
        let loss_val = t.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::divergence(format!(
                "estimator training diverged at step {step}: loss {loss_val}"
            )));
        }
        final_loss = loss_val;
        let grads = t.backward(loss);
        let mut gv = grad_vec(&model.params, &bound, &grads);
        clip_global_norm(&mut gv, 5.0);
        opt.step(&mut model.params, &gv);
    }

    // Held-out MAE per head.
    let t = Tape::new();
    let bound = model.params.bind(&t);
    let images = t.constant(eval.images.clone().into_dyn());
    let heads = model.forward(&t, &bound, images);
    let mae = |pred: &ArrayD<f64>, target: &Array2<f64>| -> f64 {
        let mut acc = 0.0;
        for (p, q) in pred.iter().zip(target.iter()) {
            acc += (p - q).abs();
        }
        acc / target.len() as f64
    };
    let report = EstimatorReport {
        gaze_mae: mae(&t.value(heads.gaze), &eval.gaze),
        scalar_mae: mae(&t.value(heads.scalars), &eval.scalars),
        pose_mae: mae(&t.value(heads.pose), &eval.pose),
        final_loss,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{World, WorldSpec};
    use ndarray::Array1;

    fn world() -> World {
        World::new(WorldSpec { frames_per_clip: 120, num_clips: 2, ..WorldSpec::default() }).unwrap()
    }

    fn neutral_gaze() -> GazeDirection {
        GazeDirection { yaw: 0.0, pitch: 0.0 }
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        let w = world();
        let pose = Array1::zeros(POSE_DIM);
        let coeffs = Array1::zeros(EXPR_DIM);
        let id = vec![0.0; IDENTITY_DIM];
        let a = render_face(&w.basis, &id, pose.view(), coeffs.view(), neutral_gaze());
        let b = render_face(&w.basis, &id, pose.view(), coeffs.view(), neutral_gaze());
        assert_eq!(a.image.pixels, b.image.pixels);
        assert_eq!(a.mask, b.mask);
        for &v in a.image.pixels.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
        // the image actually contains a face: more than background
        let spread = a.image.pixels.iter().cloned().fold(f64::MIN, f64::max)
            - a.image.pixels.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 0.5, "image should span dark to light, spread {spread}");
    }

    #[test]
    fn pupils_track_gaze_direction() {
        let w = world();
        let pose = Array1::zeros(POSE_DIM);
        let coeffs = Array1::zeros(EXPR_DIM);
        let id = vec![0.0; IDENTITY_DIM];
        let placed = place_face(&w.basis, &id, pose.view(), coeffs.view());
        let boxes = eye_boxes(&placed);
        let mut offsets = Vec::new();
        for yaw in [-0.3, 0.0, 0.3] {
            let frame = render_face(
                &w.basis,
                &id,
                pose.view(),
                coeffs.view(),
                GazeDirection { yaw, pitch: 0.0 },
            );
            let mut per_eye = Vec::new();
            for &(cx, cy, hw, hh) in &boxes {
                let off = pupil_offset(&frame.image.pixels, cx, cy, hw, hh)
                    .expect("open eye should show a pupil");
                per_eye.push(off);
            }
            offsets.push((per_eye[0] + per_eye[1]) / 2.0);
        }
        assert!(
            offsets[0] < offsets[1] - 0.5 && offsets[1] < offsets[2] - 0.5,
            "pupil centroids should order with yaw: {offsets:?}"
        );
    }

    #[test]
    fn blink_occludes_pupils() {
        let w = world();
        let pose = Array1::zeros(POSE_DIM);
        let id = vec![0.0; IDENTITY_DIM];
        let shut = w.basis.blink_direction().clone();
        let placed = place_face(&w.basis, &id, pose.view(), Array1::zeros(EXPR_DIM).view());
        let boxes = eye_boxes(&placed);
        let frame = render_face(&w.basis, &id, pose.view(), shut.view(), neutral_gaze());
        for &(cx, cy, hw, hh) in &boxes {
            assert!(
                pupil_offset(&frame.image.pixels, cx, cy, hw, hh).is_none(),
                "closed eye must hide the pupil"
            );
        }
    }

    #[test]
    fn mouth_changes_stay_inside_the_mask() {
        let w = world();
        let pose = Array1::zeros(POSE_DIM);
        let id = vec![0.0; IDENTITY_DIM];
        let rest = render_face(
            &w.basis,
            &id,
            pose.view(),
            w.mouth_shapes.row(0),
            neutral_gaze(),
        );
        let open = render_face(
            &w.basis,
            &id,
            pose.view(),
            w.mouth_shapes.row(3),
            neutral_gaze(),
        );
        let mut inside = 0.0;
        let mut outside = 0.0;
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let diff = (rest.image.pixels[[y, x]] - open.image.pixels[[y, x]]).abs();
                if rest.mask[[y, x]] > 0.5 || open.mask[[y, x]] > 0.5 {
                    inside += diff;
                } else {
                    outside += diff;
                }
            }
        }
        assert!(inside > 1.0, "mouth change should alter masked pixels, got {inside}");
        assert!(outside < 1e-9, "pixels outside the mask moved by {outside}");
    }

    #[test]
    fn identity_alters_appearance() {
        let w = world();
        let pose = Array1::zeros(POSE_DIM);
        let coeffs = Array1::zeros(EXPR_DIM);
        let a = render_face(&w.basis, &w.identity(0).to_vec(), pose.view(), coeffs.view(), neutral_gaze());
        let b = render_face(&w.basis, &w.identity(1).to_vec(), pose.view(), coeffs.view(), neutral_gaze());
        let diff: f64 = a
            .image
            .pixels
            .iter()
            .zip(b.image.pixels.iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 5.0, "identities should render differently, diff {diff}");
    }

    #[test]
    fn pose_translation_shifts_content() {
        let w = world();
        let id = vec![0.0; IDENTITY_DIM];
        let coeffs = Array1::zeros(EXPR_DIM);
        let mut pose = Array1::zeros(POSE_DIM);
        let base = render_face(&w.basis, &id, pose.view(), coeffs.view(), neutral_gaze());
        pose[3] = 0.1; // shift right
        let moved = render_face(&w.basis, &id, pose.view(), coeffs.view(), neutral_gaze());
        // centroid of bright (face) pixels moves right
        let centroid = |img: &Array2<f64>| {
            let mut wsum = 0.0;
            let mut xsum = 0.0;
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let w = (img[[y, x]] - 0.2).max(0.0);
                    wsum += w;
                    xsum += w * x as f64;
                }
            }
            xsum / wsum
        };
        let shift = centroid(&moved.image.pixels) - centroid(&base.image.pixels);
        assert!(shift > 0.4, "translation should move the face, shift {shift}");
    }

    #[test]
    fn expression_scalars_read_canonical_poses() {
        let w = world();
        let rest = expression_scalars(&w.basis, Array1::zeros(EXPR_DIM).view());
        assert!((rest[0] - 1.0).abs() < 1e-9, "rest mouth_open {:?}", rest);
        assert!((rest[1] - 1.0).abs() < 1e-9, "rest eye_open {:?}", rest);
        assert!(rest[2].abs() < 1e-9, "rest brow {:?}", rest);
        let shut = expression_scalars(&w.basis, w.mouth_shapes.row(0));
        assert!(shut[0].abs() < 1e-8, "shut mouth_open {:?}", shut);
        let blink = expression_scalars(&w.basis, w.basis.blink_direction().view());
        assert!(blink[1].abs() < 1e-8, "blink eye_open {:?}", blink);
    }

    #[test]
    fn estimator_training_reduces_loss_and_roundtrips() {
        let w = world();
        let cfg = EstimatorTrainConfig {
            seed: 5,
            samples: 48,
            eval_samples: 16,
            batch: 12,
            steps: 12,
            lr: 2e-3,
        };
        let (model, report) = train_estimators(&w, &cfg).unwrap();
        assert!(report.final_loss.is_finite());
        // quick smoke: a fresh model on the same eval data does worse than
        // the trained one on gaze after a few steps is too flaky to assert;
        // instead check the checkpoint roundtrip reproduces outputs exactly.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("est.ckpt");
        model.save(&path).unwrap();
        let restored = FaceEstimators::load(&path).unwrap();
        let pose = Array1::zeros(POSE_DIM);
        let coeffs = Array1::zeros(EXPR_DIM);
        let frame = render_face(
            &w.basis,
            &vec![0.0; IDENTITY_DIM],
            pose.view(),
            coeffs.view(),
            neutral_gaze(),
        );
        let (g1, s1, p1) = model.estimate(&frame.image.pixels);
        let (g2, s2, p2) = restored.estimate(&frame.image.pixels);
        assert_eq!(g1, g2);
        assert_eq!(s1, s2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn sequence_render_matches_per_frame_calls() {
        let w = world();
        let clip = w.clip(0).unwrap();
        let frames = render_sequence(&w.basis, &clip.meta.identity, &clip.pose, &clip.expr, &clip.gaze);
        assert_eq!(frames.len(), clip.frames());
        let single = render_face(
            &w.basis,
            &clip.meta.identity,
            clip.pose.data.row(5),
            clip.expr.data.row(5),
            clip.gaze.direction(5),
        );
        assert_eq!(frames[5].image.pixels, single.image.pixels);
    }
}
