//! Latent navigable face animator with gaze conditioning.
//!
//! A source image is encoded once into an identity code `z_R`. Each driving
//! frame contributes a window of pose-plus-expression coefficients with the
//! gaze direction appended per frame; two projection layers and a max-pool
//! over the window produce the driving feature `rho`. A magnitude head maps
//! `rho` joined with `z_R` to coefficients over an orthonormal motion
//! codebook, whose weighted sum is the navigation vector `eta`; decoding
//! `z_R + eta` yields the animated frame. Training pairs random source and
//! target frames of a rendered clip and minimizes masked reconstruction,
//! estimator-space expression and gaze distances, and a non-saturating
//! adversarial loss, re-orthonormalizing the codebook after every step.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::landmarks::orthonormalize_columns;
use crate::nn::{
    clip_global_norm, gan_discriminator_loss, gan_generator_loss, grad_vec, weighted_sum, Act,
    Adam, AdamConfig, Conv2d, Linear, Mlp, ParamId, Params,
};
use crate::render::{render_face, FaceEstimators, RenderedFrame};
use crate::rng::{rng_for, Rng};
use crate::tensor::{Tape, Var};
use crate::types::{
    ExpressionSequence, FrameImage, GazeDirection, GazeSequence, PoseSequence, EXPR_DIM,
    IMAGE_SIZE, POSE_DIM,
};
use crate::world::SyntheticClip;
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const ANIMATOR_KIND: &str = "face-animator";

/// Per-frame driving row: pose, expression, then gaze yaw/pitch.
pub const DRIVE_DIM: usize = POSE_DIM + EXPR_DIM + 2;

/// Codebook invariants checked during training.
pub const CODEBOOK_OFF_DIAG_LIMIT: f64 = 1e-5;
pub const CODEBOOK_NORM_LIMIT: f64 = 1e-6;

fn image_const(t: &Tape, pixels: &Array2<f64>) -> Var {
    t.constant(
        ArrayD::from_shape_vec(
            IxDyn(&[1, 1, IMAGE_SIZE, IMAGE_SIZE]),
            pixels.iter().cloned().collect(),
        )
        .unwrap(),
    )
}

fn to_array2(v: &ArrayD<f64>) -> Array2<f64> {
    let s = v.shape().to_vec();
    assert_eq!(s.len(), 2);
    Array2::from_shape_vec((s[0], s[1]), v.iter().cloned().collect()).unwrap()
}

fn image_from_tape(v: &ArrayD<f64>) -> FrameImage {
    let mut px = Array2::zeros((IMAGE_SIZE, IMAGE_SIZE));
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            px[[y, x]] = v[[0, 0, y, x]].clamp(0.0, 1.0);
        }
    }
    FrameImage::new(px)
}

/// Mean absolute pixel difference between two frames.
pub fn mean_abs_pixel_error(a: &FrameImage, b: &FrameImage) -> f64 {
    assert_eq!(a.pixels.dim(), b.pixels.dim());
    a.pixels
        .iter()
        .zip(b.pixels.iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.pixels.len() as f64
}

/// Constant gaze stream covering `frames` frames.
pub fn constant_gaze(fps: f64, frames: usize, g: GazeDirection) -> GazeSequence {
    let mut data = Array2::zeros((frames, 2));
    for mut row in data.rows_mut() {
        row[0] = g.yaw;
        row[1] = g.pitch;
    }
    GazeSequence::new(fps, data)
}

// ---------------------------------------------------------------------------
// Motion codebook
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrthoMode {
    /// Re-orthonormalize the codebook by QR projection after each step.
    Qr,
    /// Keep the codebook free and add a soft orthonormality penalty.
    Penalty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodebookReport {
    pub max_off_diag: f64,
    pub max_norm_error: f64,
}

impl CodebookReport {
    pub fn within_limits(&self) -> bool {
        self.max_off_diag <= CODEBOOK_OFF_DIAG_LIMIT && self.max_norm_error <= CODEBOOK_NORM_LIMIT
    }
}

/// Learnable orthonormal motion directions; rows of an `(n, d_z)` parameter.
pub struct MotionCodebook {
    id: ParamId,
    pub mode: OrthoMode,
}

impl MotionCodebook {
    fn init(params: &mut Params, n: usize, d_z: usize, mode: OrthoMode, rng: &mut Rng) -> Self {
        assert!(n <= d_z, "codebook size {n} cannot exceed latent dim {d_z}");
        let mut m = Array2::zeros((d_z, n));
        crate::rng::fill_normal(rng, m.as_slice_mut().unwrap());
        orthonormalize_columns(&mut m);
        let id = params.add("codebook", m.t().to_owned().into_dyn());
        Self { id, mode }
    }

    /// Directions as rows: `(n, d_z)`.
    pub fn matrix(&self, params: &Params) -> Array2<f64> {
        to_array2(params.get(self.id))
    }

    pub fn var(&self, bound: &[Var]) -> Var {
        self.id.var(bound)
    }

    /// Project the directions back onto the orthonormal manifold.
    pub fn re_orthonormalize(&self, params: &mut Params) {
        let m = to_array2(params.get(self.id));
        let mut cols = m.t().to_owned();
        orthonormalize_columns(&mut cols);
        *params.get_mut(self.id) = cols.t().to_owned().into_dyn();
    }

    pub fn report(&self, params: &Params) -> CodebookReport {
        let m = self.matrix(params);
        let n = m.nrows();
        let mut max_off = 0.0_f64;
        let mut max_norm = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                let dot = m.row(i).dot(&m.row(j));
                if i == j {
                    max_norm = max_norm.max((dot.sqrt() - 1.0).abs());
                } else {
                    max_off = max_off.max(dot.abs());
                }
            }
        }
        CodebookReport { max_off_diag: max_off, max_norm_error: max_norm }
    }
}

// ---------------------------------------------------------------------------
// Animator model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnimatorArch {
    /// Latent code dimension `d_z`.
    pub latent_dim: usize,
    /// Number of codebook directions `n`.
    pub codebook_size: usize,
    /// Window radius `r`: each driving feature pools over `2r+1` frames.
    pub window_radius: usize,
    pub proj_hidden: usize,
    /// Driving feature dimension.
    pub rho_dim: usize,
    pub mag_hidden: usize,
    #[serde(skip, default = "default_ortho")]
    pub ortho: OrthoMode,
}

fn default_ortho() -> OrthoMode {
    OrthoMode::Qr
}

impl Default for AnimatorArch {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            codebook_size: 20,
            window_radius: 2,
            proj_hidden: 64,
            rho_dim: 32,
            mag_hidden: 64,
            ortho: OrthoMode::Qr,
        }
    }
}

impl AnimatorArch {
    pub fn window_len(&self) -> usize {
        2 * self.window_radius + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size > self.latent_dim {
            return Err(Error::validation(format!(
                "codebook size {} exceeds latent dim {}",
                self.codebook_size, self.latent_dim
            )));
        }
        if self.latent_dim == 0 || self.rho_dim == 0 || self.codebook_size == 0 {
            return Err(Error::validation("animator dims must be nonzero"));
        }
        Ok(())
    }
}

/// Encoder, driving projector, magnitude head, codebook, and decoder.
pub struct AnimatorModel {
    pub params: Params,
    pub arch: AnimatorArch,
    seed: u64,
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    enc_fc: Linear,
    proj1: Linear,
    proj2: Linear,
    mag: Mlp,
    pub codebook: MotionCodebook,
    dec_fc: Linear,
    dec1: Conv2d,
    dec2: Conv2d,
    dec3: Conv2d,
    dec_out: Conv2d,
}

impl AnimatorModel {
    pub fn new(arch: AnimatorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_for(seed, "animator.init");
        let mut p = Params::new();
        let enc1 = Conv2d::new(&mut p, "enc.conv1", 1, 16, 4, 2, 1, &mut rng);
        let enc2 = Conv2d::new(&mut p, "enc.conv2", 16, 32, 4, 2, 1, &mut rng);
        let enc3 = Conv2d::new(&mut p, "enc.conv3", 32, 64, 4, 2, 1, &mut rng);
        let enc_fc = Linear::new(&mut p, "enc.fc", 64 * 8 * 8, arch.latent_dim, &mut rng);
        let proj1 = Linear::new(&mut p, "proj.l1", DRIVE_DIM, arch.proj_hidden, &mut rng);
        let proj2 = Linear::new(&mut p, "proj.l2", arch.proj_hidden, arch.rho_dim, &mut rng);
        let mag = Mlp::new(
            &mut p,
            "mag",
            &[arch.rho_dim + arch.latent_dim, arch.mag_hidden, arch.codebook_size],
            Act::Relu,
            &mut rng,
        );
        let codebook = MotionCodebook::init(
            &mut p,
            arch.codebook_size,
            arch.latent_dim,
            arch.ortho,
            &mut rng,
        );
        let dec_fc = Linear::new(&mut p, "dec.fc", arch.latent_dim, 64 * 8 * 8, &mut rng);
        let dec1 = Conv2d::new(&mut p, "dec.conv1", 64, 32, 3, 1, 1, &mut rng);
        let dec2 = Conv2d::new(&mut p, "dec.conv2", 32, 16, 3, 1, 1, &mut rng);
        let dec3 = Conv2d::new(&mut p, "dec.conv3", 16, 8, 3, 1, 1, &mut rng);
        let dec_out = Conv2d::new(&mut p, "dec.out", 8, 1, 3, 1, 1, &mut rng);
        Ok(Self {
            params: p,
            arch,
            seed,
            enc1,
            enc2,
            enc3,
            enc_fc,
            proj1,
            proj2,
            mag,
            codebook,
            dec_fc,
            dec1,
            dec2,
            dec3,
            dec_out,
        })
    }

    /// `(B, 1, 64, 64)` images -> `(B, d_z)` identity codes.
    pub fn encode(&self, t: &Tape, bound: &[Var], images: Var) -> Var {
        let b = t.shape(images)[0];
        let mut x = t.relu(self.enc1.forward(t, bound, images));
        x = t.relu(self.enc2.forward(t, bound, x));
        x = t.relu(self.enc3.forward(t, bound, x));
        x = t.reshape(x, &[b, 64 * 8 * 8]);
        self.enc_fc.forward(t, bound, x)
    }

    /// `(B, d_z)` codes -> `(B, 1, 64, 64)` images in [0, 1].
    pub fn decode(&self, t: &Tape, bound: &[Var], z: Var) -> Var {
        let b = t.shape(z)[0];
        let mut x = t.relu(self.dec_fc.forward(t, bound, z));
        x = t.reshape(x, &[b, 64, 8, 8]);
        x = t.relu(self.dec1.forward(t, bound, t.upsample2x(x)));
        x = t.relu(self.dec2.forward(t, bound, t.upsample2x(x)));
        x = t.relu(self.dec3.forward(t, bound, t.upsample2x(x)));
        t.sigmoid(self.dec_out.forward(t, bound, x))
    }

    /// Driving windows `(B, 2r+1, DRIVE_DIM)` -> features `(B, rho_dim)`:
    /// two projection layers per frame, then a max-pool over the window.
    pub fn project_windows(&self, t: &Tape, bound: &[Var], windows: Var) -> Var {
        let s = t.shape(windows);
        let (b, w) = (s[0], s[1]);
        assert_eq!(w, self.arch.window_len(), "window length mismatch");
        let flat = t.reshape(windows, &[b * w, DRIVE_DIM]);
        let h = t.relu(self.proj1.forward(t, bound, flat));
        let per_frame = self.proj2.forward(t, bound, h);
        let stacked = t.reshape(per_frame, &[b, w, self.arch.rho_dim]);
        t.max_axis(stacked, 1)
    }

    /// Magnitudes, navigation vector, and target code for a batch.
    pub fn navigate_tape(&self, t: &Tape, bound: &[Var], z_r: Var, rho: Var) -> (Var, Var, Var) {
        let joint = t.concat(&[rho, z_r], 1);
        let xi = self.mag.forward(t, bound, joint); // (B, n)
        let m = self.codebook.var(bound); // (n, d_z)
        let eta = t.matmul(xi, m); // (B, d_z)
        let z_d = t.add(z_r, eta);
        (xi, eta, z_d)
    }

    // ----- host-side wrappers -----

    pub fn encode_identity(&self, image: &FrameImage) -> Array1<f64> {
        let t = Tape::new();
        let bound = self.params.bind(&t);
        let z = self.encode(&t, &bound, image_const(&t, &image.pixels));
        to_array2(&t.value(z)).row(0).to_owned()
    }

    pub fn decode_latent(&self, z: &Array1<f64>) -> FrameImage {
        assert_eq!(z.len(), self.arch.latent_dim);
        let t = Tape::new();
        let bound = self.params.bind(&t);
        let zv = t.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, z.len()]), z.to_vec()).unwrap(),
        );
        let img = self.decode(&t, &bound, zv);
        image_from_tape(&t.value(img))
    }

    /// Driving feature of one `(2r+1, DRIVE_DIM)` window.
    pub fn driving_feature(&self, window: &Array2<f64>) -> Array1<f64> {
        assert_eq!(window.dim(), (self.arch.window_len(), DRIVE_DIM), "window shape");
        let t = Tape::new();
        let bound = self.params.bind(&t);
        let w = t.constant(
            ArrayD::from_shape_vec(
                IxDyn(&[1, window.nrows(), DRIVE_DIM]),
                window.iter().cloned().collect(),
            )
            .unwrap(),
        );
        let rho = self.project_windows(&t, &bound, w);
        to_array2(&t.value(rho)).row(0).to_owned()
    }

    /// Host-side navigation: `(xi, eta, z_d)` for one code and feature.
    pub fn navigate(&self, z_r: &Array1<f64>, rho: &Array1<f64>) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let t = Tape::new();
        let bound = self.params.bind(&t);
        let zv = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, z_r.len()]), z_r.to_vec()).unwrap());
        let rv = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, rho.len()]), rho.to_vec()).unwrap());
        let (xi, eta, z_d) = self.navigate_tape(&t, &bound, zv, rv);
        (
            to_array2(&t.value(xi)).row(0).to_owned(),
            to_array2(&t.value(eta)).row(0).to_owned(),
            to_array2(&t.value(z_d)).row(0).to_owned(),
        )
    }

    /// Navigation vector for explicit magnitudes (codebook linearity).
    pub fn eta_for(&self, xi: &Array1<f64>) -> Array1<f64> {
        let m = self.codebook.matrix(&self.params);
        assert_eq!(xi.len(), m.nrows());
        xi.dot(&m)
    }

    /// Animate a source image along driving pose/expression/gaze streams.
    pub fn animate(
        &self,
        source: &FrameImage,
        pose: &PoseSequence,
        expr: &ExpressionSequence,
        gaze: &GazeSequence,
    ) -> Result<Vec<FrameImage>> {
        let frames = pose.frames();
        if expr.frames() != frames || gaze.frames() != frames {
            return Err(Error::validation(format!(
                "driving stream lengths differ: pose {frames}, expression {}, gaze {}",
                expr.frames(),
                gaze.frames()
            )));
        }
        if frames == 0 {
            return Err(Error::validation("cannot animate an empty sequence"));
        }
        let rows = drive_rows(pose, expr, gaze);
        let z_r = self.encode_identity(source);
        let out: Vec<FrameImage> = (0..frames)
            .into_par_iter()
            .map(|t| {
                let window = window_at(&rows, t, self.arch.window_radius);
                let rho = self.driving_feature(&window);
                let (_, _, z_d) = self.navigate(&z_r, &rho);
                self.decode_latent(&z_d)
            })
            .collect();
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::json!({
            "arch": self.arch,
            "seed": self.seed,
            "ortho": self.arch.ortho,
        });
        checkpoint::save(path, ANIMATOR_KIND, &config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, _) = checkpoint::load(path, ANIMATOR_KIND)?;
        let mut arch: AnimatorArch = serde_json::from_value(meta["arch"].clone())?;
        arch.ortho = serde_json::from_value(meta["ortho"].clone()).unwrap_or(OrthoMode::Qr);
        let seed = meta["seed"].as_u64().unwrap_or(0);
        let mut model = Self::new(arch, seed)?;
        checkpoint::load_into(path, ANIMATOR_KIND, &mut model.params)?;
        Ok(model)
    }
}

/// Per-frame driving rows `(T, DRIVE_DIM)`: pose, expression, gaze.
pub fn drive_rows(pose: &PoseSequence, expr: &ExpressionSequence, gaze: &GazeSequence) -> Array2<f64> {
    let frames = pose.frames();
    let mut rows = Array2::zeros((frames, DRIVE_DIM));
    for t in 0..frames {
        for d in 0..POSE_DIM {
            rows[[t, d]] = pose.data[[t, d]];
        }
        for d in 0..EXPR_DIM {
            rows[[t, POSE_DIM + d]] = expr.data[[t, d]];
        }
        rows[[t, POSE_DIM + EXPR_DIM]] = gaze.data[[t, 0]];
        rows[[t, POSE_DIM + EXPR_DIM + 1]] = gaze.data[[t, 1]];
    }
    rows
}

/// `(2r+1, DRIVE_DIM)` window centered at `t`, edges replicated.
pub fn window_at(rows: &Array2<f64>, t: usize, radius: usize) -> Array2<f64> {
    let frames = rows.nrows() as isize;
    let mut w = Array2::zeros((2 * radius + 1, rows.ncols()));
    for (k, off) in (-(radius as isize)..=radius as isize).enumerate() {
        let src = (t as isize + off).clamp(0, frames - 1) as usize;
        w.row_mut(k).assign(&rows.row(src));
    }
    w
}

// ---------------------------------------------------------------------------
// Patch discriminator
// ---------------------------------------------------------------------------

struct PatchDiscriminator {
    params: Params,
    c1: Conv2d,
    c2: Conv2d,
    out: Conv2d,
}

impl PatchDiscriminator {
    fn new(seed: u64) -> Self {
        let mut rng = rng_for(seed, "animator.disc");
        let mut p = Params::new();
        let c1 = Conv2d::new(&mut p, "c1", 1, 8, 4, 2, 1, &mut rng);
        let c2 = Conv2d::new(&mut p, "c2", 8, 16, 4, 2, 1, &mut rng);
        let out = Conv2d::new(&mut p, "out", 16, 1, 3, 1, 1, &mut rng);
        Self { params: p, c1, c2, out }
    }

    /// `(B, 1, 64, 64)` -> patch logits `(B, 1, 16, 16)`.
    fn forward(&self, t: &Tape, bound: &[Var], x: Var) -> Var {
        let h = t.leaky_relu(self.c1.forward(t, bound, x), 0.2);
        let h = t.leaky_relu(self.c2.forward(t, bound, h), 0.2);
        self.out.forward(t, bound, h)
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnimatorTrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub grad_clip: f64,
    pub lambda_rec: f64,
    pub lambda_exp: f64,
    pub lambda_gaze: f64,
    pub lambda_gan: f64,
    /// Anchors `decode(z_R)` to the identity's rest-state render so the
    /// reference image stays frontal with mean expression.
    pub lambda_ref: f64,
    /// Hook for a perceptual backbone; must stay 0 (none is wired in).
    pub lambda_perc: f64,
    /// Hook for a parsing backbone; must stay 0 (none is wired in).
    pub lambda_pars: f64,
    /// Weight reconstruction by `1 + lip-and-eye mask`; disable for the
    /// mask ablation.
    pub use_mask: bool,
    /// Soft-penalty weight when the codebook runs in penalty mode.
    pub ortho_penalty: f64,
    pub log_every: usize,
    pub arch: AnimatorArch,
}

impl Default for AnimatorTrainConfig {
    fn default() -> Self {
        Self {
            seed: 31,
            steps: 400,
            batch: 8,
            lr: 1e-3,
            disc_lr: 1e-3,
            grad_clip: 5.0,
            lambda_rec: 1.0,
            lambda_exp: 1.0,
            lambda_gaze: 100.0,
            lambda_gan: 1.0,
            lambda_ref: 0.1,
            lambda_perc: 0.0,
            lambda_pars: 0.0,
            use_mask: true,
            ortho_penalty: 10.0,
            log_every: 10,
            arch: AnimatorArch::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnimatorLogRow {
    pub step: usize,
    pub gen: f64,
    pub rec: f64,
    pub gaze: f64,
    pub disc: f64,
}

/// One fully rendered training sequence: frames, masks, estimator readouts
/// of each frame, and the identity's rest-state reference render.
pub struct RenderedSequence {
    pub frames: Vec<Array2<f64>>,
    pub masks: Vec<Array2<f64>>,
    pub drive: Array2<f64>,
    pub est_gaze: Array2<f64>,
    pub est_scalars: Array2<f64>,
    pub rest: Array2<f64>,
}

/// Render clips and precompute the frozen-estimator readouts of every frame.
pub fn prepare_sequences(
    basis: &crate::landmarks::LandmarkBasis,
    clips: &[SyntheticClip],
    estimators: &FaceEstimators,
) -> Vec<RenderedSequence> {
    clips
        .par_iter()
        .map(|clip| {
            let identity = &clip.meta.identity;
            let (pose, expr, gaze) = (&clip.pose, &clip.expr, &clip.gaze);
            let frames = pose.frames();
            let mut imgs = Vec::with_capacity(frames);
            let mut masks = Vec::with_capacity(frames);
            let mut est_gaze = Array2::zeros((frames, 2));
            let mut est_scalars = Array2::zeros((frames, 3));
            for t in 0..frames {
                let RenderedFrame { image, mask } = render_face(
                    basis,
                    identity,
                    pose.data.row(t),
                    expr.data.row(t),
                    gaze.direction(t),
                );
                let (g, s, _) = estimators.estimate(&image.pixels);
                est_gaze[[t, 0]] = g[0];
                est_gaze[[t, 1]] = g[1];
                for d in 0..3 {
                    est_scalars[[t, d]] = s[d];
                }
                imgs.push(image.pixels);
                masks.push(mask);
            }
            let rest = render_face(
                basis,
                identity,
                Array1::zeros(POSE_DIM).view(),
                Array1::zeros(EXPR_DIM).view(),
                GazeDirection { yaw: 0.0, pitch: 0.0 },
            )
            .image
            .pixels;
            RenderedSequence {
                frames: imgs,
                masks,
                drive: drive_rows(pose, expr, gaze),
                est_gaze,
                est_scalars,
                rest,
            }
        })
        .collect()
}

struct GenSample {
    loss: f64,
    rec: f64,
    gaze: f64,
    grads: Vec<ArrayD<f64>>,
    fake: Array2<f64>,
}

pub fn train_animator(
    basis: &crate::landmarks::LandmarkBasis,
    clips: &[SyntheticClip],
    estimators: &FaceEstimators,
    cfg: &AnimatorTrainConfig,
) -> Result<(AnimatorModel, Vec<AnimatorLogRow>)> {
    if clips.is_empty() {
        return Err(Error::validation("animator training needs at least one clip"));
    }
    if cfg.lambda_perc != 0.0 || cfg.lambda_pars != 0.0 {
        return Err(Error::validation(
            "perceptual and parsing loss hooks have no backbone wired in; keep their weights 0",
        ));
    }
    let data = prepare_sequences(basis, clips, estimators);
    let mut model = AnimatorModel::new(cfg.arch.clone(), cfg.seed)?;
    let mut disc = PatchDiscriminator::new(cfg.seed);
    let mut opt_g = Adam::new(&model.params, AdamConfig::with_lr(cfg.lr));
    let mut opt_d = Adam::new(&disc.params, AdamConfig::with_lr(cfg.disc_lr));
    let mut rng = rng_for(cfg.seed, "animator.train");
    let mut log = Vec::new();
    let r = cfg.arch.window_radius;

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let ci = rng.gen_range(0..data.len());
            let frames = data[ci].frames.len();
            let source = rng.gen_range(0..frames);
            let target = rng.gen_range(0..frames);
            batch.push((ci, source, target));
        }

        // ----- generator phase -----
        let model_ref = &model;
        let disc_ref = &disc;
        let gen_out: Vec<GenSample> = batch
            .par_iter()
            .map(|&(ci, source, target)| {
                let seq = &data[ci];
                let t = Tape::new();
                let bound = model_ref.params.bind(&t);
                let est_bound = estimators.params.bind(&t);
                let disc_bound = disc_ref.params.bind(&t);

                let z_r = model_ref.encode(&t, &bound, image_const(&t, &seq.frames[source]));
                let window = window_at(&seq.drive, target, r);
                let wvar = t.constant(
                    ArrayD::from_shape_vec(
                        IxDyn(&[1, window.nrows(), DRIVE_DIM]),
                        window.iter().cloned().collect(),
                    )
                    .unwrap(),
                );
                let rho = model_ref.project_windows(&t, &bound, wvar);
                let (_, _, z_d) = model_ref.navigate_tape(&t, &bound, z_r, rho);
                let fake = model_ref.decode(&t, &bound, z_d);

                // Masked reconstruction.
                let target_img = image_const(&t, &seq.frames[target]);
                let diff = t.abs(t.sub(fake, target_img));
                let l_rec = if cfg.use_mask {
                    let weight = seq.masks[target].mapv(|m| 1.0 + m);
                    let wv = t.constant(
                        ArrayD::from_shape_vec(
                            IxDyn(&[1, 1, IMAGE_SIZE, IMAGE_SIZE]),
                            weight.iter().cloned().collect(),
                        )
                        .unwrap(),
                    );
                    t.mean_all(t.mul(diff, wv))
                } else {
                    t.mean_all(diff)
                };

                // Frozen-estimator expression and gaze distances to the
                // target frame's readouts.
                let heads = estimators.forward(&t, &est_bound, fake);
                let tg = t.constant(
                    ArrayD::from_shape_vec(IxDyn(&[1, 2]), seq.est_gaze.row(target).to_vec())
                        .unwrap(),
                );
                let ts = t.constant(
                    ArrayD::from_shape_vec(IxDyn(&[1, 3]), seq.est_scalars.row(target).to_vec())
                        .unwrap(),
                );
                let l_gaze = t.l1(heads.gaze, tg);
                let l_exp = t.l1(heads.scalars, ts);

                // Reference anchor: the identity code alone should decode to
                // the rest-state render.
                let ref_img = model_ref.decode(&t, &bound, z_r);
                let l_ref = t.l1(ref_img, image_const(&t, &seq.rest));

                let l_gan = gan_generator_loss(&t, disc_ref.forward(&t, &disc_bound, fake));

                let mut terms = vec![
                    (cfg.lambda_rec, l_rec),
                    (cfg.lambda_exp, l_exp),
                    (cfg.lambda_gaze, l_gaze),
                    (cfg.lambda_ref, l_ref),
                    (cfg.lambda_gan, l_gan),
                ];
                if model_ref.codebook.mode == OrthoMode::Penalty {
                    let m = model_ref.codebook.var(&bound);
                    let gram = t.matmul(m, t.swap_axes(m, 0, 1));
                    let eye = {
                        let n = cfg.arch.codebook_size;
                        let mut e = Array2::zeros((n, n));
                        for i in 0..n {
                            e[[i, i]] = 1.0;
                        }
                        t.constant(e.into_dyn())
                    };
                    terms.push((cfg.ortho_penalty, t.mse(gram, eye)));
                }

                let loss = weighted_sum(&t, &terms);
                let loss_val = t.scalar_value(loss);
                let grads = t.backward(loss);
                GenSample {
                    loss: loss_val,
                    rec: t.scalar_value(l_rec),
                    gaze: t.scalar_value(l_gaze),
                    grads: grad_vec(&model_ref.params, &bound, &grads),
                    fake: {
                        let v = t.value(fake);
                        let mut px = Array2::zeros((IMAGE_SIZE, IMAGE_SIZE));
                        for y in 0..IMAGE_SIZE {
                            for x in 0..IMAGE_SIZE {
                                px[[y, x]] = v[[0, 0, y, x]];
                            }
                        }
                        px
                    },
                }
            })
            .collect();

        let inv_b = 1.0 / cfg.batch as f64;
        let mut gen_loss = 0.0;
        let mut rec_loss = 0.0;
        let mut gaze_loss = 0.0;
        let mut g_total: Vec<ArrayD<f64>> =
            gen_out[0].grads.iter().map(|g| g.mapv(|_| 0.0)).collect();
        for s in &gen_out {
            gen_loss += s.loss;
            rec_loss += s.rec;
            gaze_loss += s.gaze;
            for (acc, g) in g_total.iter_mut().zip(s.grads.iter()) {
                *acc += g;
            }
        }
        gen_loss *= inv_b;
        rec_loss *= inv_b;
        gaze_loss *= inv_b;
        if !gen_loss.is_finite() {
            return Err(Error::divergence(format!(
                "animator generator diverged at step {step}: loss {gen_loss}"
            )));
        }
        for g in g_total.iter_mut() {
            g.mapv_inplace(|v| v * inv_b);
        }
        clip_global_norm(&mut g_total, cfg.grad_clip);
        opt_g.step(&mut model.params, &g_total);
        if model.codebook.mode == OrthoMode::Qr {
            model.codebook.re_orthonormalize(&mut model.params);
            let report = model.codebook.report(&model.params);
            if !report.within_limits() {
                return Err(Error::divergence(format!(
                    "codebook left the orthonormal manifold at step {step}: {report:?}"
                )));
            }
        }

        // ----- discriminator phase -----
        let disc_ref = &disc;
        let d_out: Vec<(f64, Vec<ArrayD<f64>>)> = batch
            .par_iter()
            .zip(gen_out.par_iter())
            .map(|(&(ci, _, target), gen)| {
                let seq = &data[ci];
                let t = Tape::new();
                let db = disc_ref.params.bind(&t);
                let real = disc_ref.forward(&t, &db, image_const(&t, &seq.frames[target]));
                let fake = disc_ref.forward(&t, &db, image_const(&t, &gen.fake));
                let loss = gan_discriminator_loss(&t, real, fake);
                let lv = t.scalar_value(loss);
                let grads = t.backward(loss);
                (lv, grad_vec(&disc_ref.params, &db, &grads))
            })
            .collect();
        let mut d_loss = 0.0;
        let mut d_total: Vec<ArrayD<f64>> = d_out[0].1.iter().map(|g| g.mapv(|_| 0.0)).collect();
        for (lv, gs) in &d_out {
            d_loss += lv;
            for (acc, g) in d_total.iter_mut().zip(gs.iter()) {
                *acc += g;
            }
        }
        d_loss *= inv_b;
        if !d_loss.is_finite() {
            return Err(Error::divergence(format!(
                "animator discriminator diverged at step {step}"
            )));
        }
        for g in d_total.iter_mut() {
            g.mapv_inplace(|v| v * inv_b);
        }
        clip_global_norm(&mut d_total, cfg.grad_clip);
        opt_d.step(&mut disc.params, &d_total);

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.push(AnimatorLogRow { step, gen: gen_loss, rec: rec_loss, gaze: gaze_loss, disc: d_loss });
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::EstimatorTrainConfig;
    use crate::rng::fill_normal;
    use crate::world::{World, WorldSpec};

    fn tiny_arch() -> AnimatorArch {
        AnimatorArch {
            latent_dim: 32,
            codebook_size: 6,
            window_radius: 2,
            proj_hidden: 16,
            rho_dim: 8,
            mag_hidden: 16,
            ortho: OrthoMode::Qr,
        }
    }

    fn tiny_world() -> World {
        World::new(WorldSpec { frames_per_clip: 40, num_clips: 2, ..WorldSpec::default() }).unwrap()
    }

    #[test]
    fn navigation_is_linear_and_orthonormal() {
        let model = AnimatorModel::new(tiny_arch(), 11).unwrap();
        let m = model.codebook.matrix(&model.params);
        let report = model.codebook.report(&model.params);
        assert!(report.max_off_diag < 1e-10, "fresh codebook off-diag {report:?}");
        assert!(report.max_norm_error < 1e-10);

        let mut rng = rng_for(3, "nav");
        let mut z = Array1::zeros(32);
        let mut rho = Array1::zeros(8);
        fill_normal(&mut rng, z.as_slice_mut().unwrap());
        fill_normal(&mut rng, rho.as_slice_mut().unwrap());
        let (xi, eta, z_d) = model.navigate(&z, &rho);

        // eta reconstructs its magnitudes against the orthonormal rows.
        for i in 0..6 {
            let dot = eta.dot(&m.row(i));
            assert!((dot - xi[i]).abs() < 1e-10, "<eta, m_{i}> = {dot} vs xi {}", xi[i]);
        }
        for (a, b) in z_d.iter().zip(z.iter().zip(eta.iter())) {
            assert_eq!(*a, b.0 + b.1);
        }

        // zero magnitudes leave the code untouched; eta_for is linear.
        assert_eq!(model.eta_for(&Array1::zeros(6)), Array1::<f64>::zeros(32));
        let mut x1 = Array1::zeros(6);
        let mut x2 = Array1::zeros(6);
        fill_normal(&mut rng, x1.as_slice_mut().unwrap());
        fill_normal(&mut rng, x2.as_slice_mut().unwrap());
        let combo = model.eta_for(&(&x1 * 0.3 + &x2 * 0.7));
        let parts = &model.eta_for(&x1) * 0.3 + &model.eta_for(&x2) * 0.7;
        for (a, b) in combo.iter().zip(parts.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn driving_feature_pools_over_the_window() {
        let model = AnimatorModel::new(tiny_arch(), 7).unwrap();
        let mut rng = rng_for(9, "drive");
        let mut row = Array1::zeros(DRIVE_DIM);
        fill_normal(&mut rng, row.as_slice_mut().unwrap());

        // Constant window == single-frame projection.
        let mut window = Array2::zeros((5, DRIVE_DIM));
        for mut r in window.rows_mut() {
            r.assign(&row);
        }
        let rho_const = model.driving_feature(&window);

        // Permutation invariance.
        let mut varied = Array2::zeros((5, DRIVE_DIM));
        fill_normal(&mut rng, varied.as_slice_mut().unwrap());
        let rho_a = model.driving_feature(&varied);
        let mut permuted = varied.clone();
        let order = [3usize, 0, 4, 1, 2];
        for (dst, &src) in order.iter().enumerate() {
            permuted.row_mut(dst).assign(&varied.row(src));
        }
        let rho_b = model.driving_feature(&permuted);
        assert_eq!(rho_a, rho_b, "max-pool must ignore frame order");

        // Gaze perturbation moves the feature.
        let mut gazed = window.clone();
        for mut r in gazed.rows_mut() {
            r[DRIVE_DIM - 2] += 0.4;
        }
        let rho_g = model.driving_feature(&gazed);
        let linf = rho_const
            .iter()
            .zip(rho_g.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(linf > 0.0, "gaze change must reach the driving feature");
    }

    #[test]
    fn identity_encoding_is_deterministic_and_distinct() {
        let world = tiny_world();
        let model = AnimatorModel::new(tiny_arch(), 5).unwrap();
        let pose = Array1::zeros(POSE_DIM);
        let coeffs = Array1::zeros(EXPR_DIM);
        let g = GazeDirection { yaw: 0.0, pitch: 0.0 };
        let img_a = render_face(&world.basis, &world.identity(0).to_vec(), pose.view(), coeffs.view(), g).image;
        let img_b = render_face(&world.basis, &world.identity(1).to_vec(), pose.view(), coeffs.view(), g).image;
        let za1 = model.encode_identity(&img_a);
        let za2 = model.encode_identity(&img_a);
        let zb = model.encode_identity(&img_b);
        assert_eq!(za1, za2);
        let dist = (&za1 - &zb).mapv(|v| v * v).sum().sqrt();
        assert!(dist > 0.0, "distinct identities should encode apart");
    }

    #[test]
    fn animate_runs_per_frame_and_is_deterministic() {
        let world = tiny_world();
        let clip = world.clip(0).unwrap();
        let model = AnimatorModel::new(tiny_arch(), 13).unwrap();
        let source = render_face(
            &world.basis,
            &clip.meta.identity,
            clip.pose.data.row(0),
            clip.expr.data.row(0),
            clip.gaze.direction(0),
        )
        .image;

        let take = |n: usize| {
            (
                PoseSequence::new(clip.pose.fps, clip.pose.data.slice(ndarray::s![0..n, ..]).to_owned()),
                ExpressionSequence::new(clip.expr.fps, clip.expr.data.slice(ndarray::s![0..n, ..]).to_owned()),
                GazeSequence::new(clip.gaze.fps, clip.gaze.data.slice(ndarray::s![0..n, ..]).to_owned()),
            )
        };
        let (p5, e5, g5) = take(5);
        let frames = model.animate(&source, &p5, &e5, &g5).unwrap();
        let again = model.animate(&source, &p5, &e5, &g5).unwrap();
        assert_eq!(frames.len(), 5);
        assert_eq!(frames[3].pixels, again[3].pixels);
        for f in &frames {
            f.validate().unwrap();
        }
        let (p1, e1, g1) = take(1);
        assert_eq!(model.animate(&source, &p1, &e1, &g1).unwrap().len(), 1);
        let (p2, e2, _) = take(2);
        let bad = constant_gaze(world.spec.fps, 3, GazeDirection { yaw: 0.0, pitch: 0.0 });
        assert!(model.animate(&source, &p2, &e2, &bad).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_behavior() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("anim.ckpt");
        let model = AnimatorModel::new(tiny_arch(), 17).unwrap();
        model.save(&path).unwrap();
        let restored = AnimatorModel::load(&path).unwrap();
        assert_eq!(
            model.codebook.matrix(&model.params),
            restored.codebook.matrix(&restored.params)
        );
        let mut rng = rng_for(6, "ckpt");
        let mut z = Array1::zeros(32);
        fill_normal(&mut rng, z.as_slice_mut().unwrap());
        assert_eq!(model.decode_latent(&z).pixels, restored.decode_latent(&z).pixels);
    }

    #[test]
    fn training_keeps_codebook_orthonormal_and_is_deterministic() {
        let world = tiny_world();
        let clips: Vec<_> = (0..2).map(|i| world.clip(i).unwrap()).collect();
        let (estimators, _) = crate::render::train_estimators(
            &world,
            &EstimatorTrainConfig { samples: 24, eval_samples: 8, batch: 8, steps: 6, ..Default::default() },
        )
        .unwrap();
        let cfg = AnimatorTrainConfig {
            steps: 3,
            batch: 2,
            log_every: 1,
            arch: tiny_arch(),
            ..AnimatorTrainConfig::default()
        };
        let (model, log) = train_animator(&world.basis, &clips, &estimators, &cfg).unwrap();
        assert_eq!(log.len(), 3);
        assert!(log.iter().all(|r| r.gen.is_finite() && r.disc.is_finite()));
        let report = model.codebook.report(&model.params);
        assert!(report.within_limits(), "after training: {report:?}");

        let (_, log2) = train_animator(&world.basis, &clips, &estimators, &cfg).unwrap();
        assert_eq!(log, log2, "animator training must be bit-deterministic");
    }

    #[test]
    fn mask_and_penalty_toggles_run() {
        let world = tiny_world();
        let clips: Vec<_> = (0..1).map(|i| world.clip(i).unwrap()).collect();
        let (estimators, _) = crate::render::train_estimators(
            &world,
            &EstimatorTrainConfig { samples: 16, eval_samples: 8, batch: 8, steps: 4, ..Default::default() },
        )
        .unwrap();
        let mut arch = tiny_arch();
        arch.ortho = OrthoMode::Penalty;
        let cfg = AnimatorTrainConfig {
            steps: 2,
            batch: 2,
            log_every: 1,
            use_mask: false,
            arch,
            ..AnimatorTrainConfig::default()
        };
        let (model, log) = train_animator(&world.basis, &clips, &estimators, &cfg).unwrap();
        assert_eq!(log.len(), 2);
        // Penalty mode does not project, so only a loose sanity bound holds.
        let report = model.codebook.report(&model.params);
        assert!(report.max_off_diag < 0.5 && report.max_norm_error < 0.5, "{report:?}");

        let bad = AnimatorTrainConfig { lambda_perc: 1.0, ..AnimatorTrainConfig::default() };
        assert!(train_animator(&world.basis, &clips, &estimators, &bad).is_err());
    }
}
