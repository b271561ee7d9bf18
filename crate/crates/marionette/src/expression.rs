//! Two-stage audio-to-expression prediction.
//!
//! Stage 1 is a per-frame MLP distilled from the lip expert: it maps encoded
//! audio, the initial expression, and a handcrafted eye-motion feature to
//! expression coefficients, supervised by resynced targets (teacher mouth,
//! ground-truth everything else) plus landmark, eye, mouth-shut, and
//! readability losses. Stage 2 is an LSTM that synthesizes the eye-motion
//! feature stream itself from audio, the start state, and a per-sequence
//! noise vector, trained with reconstruction, sequence-SSIM, and three
//! least-squares adversarial losses, chained through the frozen stage 1.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::landmarks::{
    LandmarkBasis, BROW_LANDMARKS, EYELID_PAIRS, INNER_LIP_PAIRS, MOUTH_COEFFS, MOUTH_LANDMARKS,
};
use crate::metrics::{SSIM_C1, SSIM_C2};
use crate::nn::{
    clip_global_norm, grad_vec, lsgan_discriminator_loss, lsgan_generator_loss, weighted_sum, Act,
    Adam, AdamConfig, Conv1d, Linear, LstmCell, Mlp, Params,
};
use crate::rng::{derive_seed, normal_array, rng_for};
use crate::tensor::{Tape, Var};
use crate::types::{
    AudioFeatures, ExpressionSequence, EyeFeatureSequence, EXPR_DIM, EYE_FEATURE_DIM,
};
use crate::world::{SyntheticClip, World};
use ndarray::{Array1, Array2, ArrayD, ArrayView1, IxDyn};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const STAGE1_KIND: &str = "expression-stage1";
pub const STAGE2_KIND: &str = "expression-stage2";

fn const2(t: &Tape, a: &Array2<f64>) -> Var {
    t.constant(a.clone().into_dyn())
}

fn const3(t: &Tape, a: &Array2<f64>) -> Var {
    let (r, c) = a.dim();
    t.constant(
        ArrayD::from_shape_vec(IxDyn(&[1, r, c]), a.iter().cloned().collect()).unwrap(),
    )
}

fn to_array2(v: &ArrayD<f64>) -> Array2<f64> {
    let s = v.shape().to_vec();
    assert_eq!(s.len(), 2);
    Array2::from_shape_vec((s[0], s[1]), v.iter().cloned().collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Landmark-space projections for tape losses
// ---------------------------------------------------------------------------

/// Constant affine maps from expression coefficients into the landmark-space
/// quantities the losses penalize: mouth coordinates, eyelid gap heights,
/// brow displacements, and inner-lip pair differences. Deriving them once
/// from the basis keeps the tape losses exactly consistent with the host
/// geometry.
pub struct LandmarkProjections {
    /// `(EXPR_DIM, 96)`: coefficients -> 32 mouth landmark xyz offsets.
    pub mouth: Array2<f64>,
    /// `(96,)` mean-face mouth coordinates.
    pub mouth_mean: Array1<f64>,
    /// `(EXPR_DIM, 4)`: coefficients -> signed eyelid gap deltas.
    pub gaps: Array2<f64>,
    /// `(4,)` mean-face signed eyelid gaps.
    pub gaps_mean: Array1<f64>,
    /// Sum of mean-face eyelid gaps (blink-ratio denominator).
    pub rest_gap_sum: f64,
    /// `(EXPR_DIM, 20)`: coefficients -> brow landmark planar displacements.
    pub brow: Array2<f64>,
    /// `(EXPR_DIM, 12)`: coefficients -> inner-lip pair coordinate diffs.
    pub lip_pairs: Array2<f64>,
    /// `(12,)` mean-face inner-lip pair diffs.
    pub lip_pairs_mean: Array1<f64>,
}

impl LandmarkProjections {
    pub fn new(basis: &LandmarkBasis) -> Self {
        let m = basis.matrix(); // (204, EXPR_DIM)
        let mean = basis.mean_points();

        let mut mouth = Array2::zeros((EXPR_DIM, 96));
        let mut mouth_mean = Array1::zeros(96);
        for (k, &li) in MOUTH_LANDMARKS.iter().enumerate() {
            for d in 0..3 {
                for c in 0..EXPR_DIM {
                    mouth[[c, 3 * k + d]] = m[[3 * li + d, c]];
                }
                mouth_mean[3 * k + d] = mean[[li, d]];
            }
        }

        let mut gaps = Array2::zeros((EXPR_DIM, 4));
        let mut gaps_mean = Array1::zeros(4);
        for (k, &(p, q)) in EYELID_PAIRS.iter().enumerate() {
            for c in 0..EXPR_DIM {
                gaps[[c, k]] = m[[3 * p + 1, c]] - m[[3 * q + 1, c]];
            }
            gaps_mean[k] = mean[[p, 1]] - mean[[q, 1]];
        }
        let rest_gap_sum: f64 = gaps_mean.iter().map(|g| g.abs()).sum();

        let mut brow = Array2::zeros((EXPR_DIM, 20));
        for (k, li) in BROW_LANDMARKS.enumerate() {
            for d in 0..2 {
                for c in 0..EXPR_DIM {
                    brow[[c, 2 * k + d]] = m[[3 * li + d, c]];
                }
            }
        }

        let mut lip_pairs = Array2::zeros((EXPR_DIM, 12));
        let mut lip_pairs_mean = Array1::zeros(12);
        for (k, &(p, q)) in INNER_LIP_PAIRS.iter().enumerate() {
            for d in 0..3 {
                for c in 0..EXPR_DIM {
                    lip_pairs[[c, 3 * k + d]] = m[[3 * p + d, c]] - m[[3 * q + d, c]];
                }
                lip_pairs_mean[3 * k + d] = mean[[p, d]] - mean[[q, d]];
            }
        }

        Self { mouth, mouth_mean, gaps, gaps_mean, rest_gap_sum, brow, lip_pairs, lip_pairs_mean }
    }

    /// Mouth landmark coordinates of a coefficient batch: `(B, 96)`.
    pub fn mouth_coords(&self, t: &Tape, e: Var) -> Var {
        let w = t.constant(self.mouth.clone().into_dyn());
        let b = t.constant(self.mouth_mean.clone().into_dyn());
        t.add(t.matmul(e, w), b)
    }

    /// Eye-motion features of a coefficient batch: `(B, 21)` — blink ratio
    /// then brow displacements, matching the handcrafted host feature.
    pub fn eye_features(&self, t: &Tape, e: Var) -> Var {
        let gw = t.constant(self.gaps.clone().into_dyn());
        let gb = t.constant(self.gaps_mean.clone().into_dyn());
        let gaps = t.abs(t.add(t.matmul(e, gw), gb)); // (B, 4)
        let blink = t.scale(t.sum_axis(gaps, 1, true), 1.0 / self.rest_gap_sum); // (B, 1)
        let bw = t.constant(self.brow.clone().into_dyn());
        let brow = t.matmul(e, bw); // (B, 20)
        t.concat(&[blink, brow], 1)
    }

    /// Mouth-shut distance of a coefficient batch: `(B,)`.
    pub fn shut_distance(&self, t: &Tape, e: Var) -> Var {
        let b = t.shape(e)[0];
        let w = t.constant(self.lip_pairs.clone().into_dyn());
        let m = t.constant(self.lip_pairs_mean.clone().into_dyn());
        let diffs = t.add(t.matmul(e, w), m); // (B, 12)
        let cube = t.reshape(diffs, &[b, 4, 3]);
        let sq = t.mul(cube, cube);
        let d2 = t.sum_axis(sq, 2, false); // (B, 4)
        let dist = t.sqrt(t.add_scalar(d2, 1e-12));
        t.mean_axis(dist, 1, false)
    }
}

// ---------------------------------------------------------------------------
// Stage 1: distilled per-frame expression MLP
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Arch {
    pub audio_dim: usize,
    pub phi_hidden: usize,
    pub phi_dim: usize,
    pub hidden: Vec<usize>,
    /// Feed the per-frame eye-motion feature into the head. Disabled for
    /// the single-stage ablation, which regresses expressions from audio
    /// and the start state alone.
    pub use_eye_input: bool,
}

impl Default for Stage1Arch {
    fn default() -> Self {
        Self {
            audio_dim: 16,
            phi_hidden: 48,
            phi_dim: 24,
            hidden: vec![128, 128],
            use_eye_input: true,
        }
    }
}

impl Stage1Arch {
    pub fn head_input_dim(&self) -> usize {
        self.phi_dim + EXPR_DIM + if self.use_eye_input { EYE_FEATURE_DIM } else { 0 }
    }
}

/// Stage-1 model: shared audio encoder (frozen after this stage) plus the
/// expression head `(phi(a_t), e_0, f_t) -> e_t`.
pub struct Stage1Model {
    pub params: Params,
    pub arch: Stage1Arch,
    seed: u64,
    phi: Mlp,
    head: Mlp,
}

impl Stage1Model {
    pub fn new(arch: Stage1Arch, seed: u64) -> Self {
        let mut rng = rng_for(seed, "stage1.init");
        let mut p = Params::new();
        let phi = Mlp::new(
            &mut p,
            "phi",
            &[arch.audio_dim, arch.phi_hidden, arch.phi_dim],
            Act::Silu,
            &mut rng,
        );
        let mut dims = vec![arch.head_input_dim()];
        dims.extend_from_slice(&arch.hidden);
        dims.push(EXPR_DIM);
        let head = Mlp::new(&mut p, "head", &dims, Act::Silu, &mut rng);
        Self { params: p, arch, seed, phi, head }
    }

    /// Audio encoding on the tape: `(B, audio_dim) -> (B, phi_dim)`.
    pub fn phi_forward(&self, t: &Tape, bound: &[Var], audio: Var) -> Var {
        self.phi.forward(t, bound, audio)
    }

    /// Expression head on the tape; inputs are per-frame rows. The eye
    /// feature `f` is ignored when the architecture disables it.
    pub fn head_forward(&self, t: &Tape, bound: &[Var], phi: Var, e0: Var, f: Var) -> Var {
        let x = if self.arch.use_eye_input {
            t.concat(&[phi, e0, f], 1)
        } else {
            t.concat(&[phi, e0], 1)
        };
        self.head.forward(t, bound, x)
    }

    /// Host-side audio encoding for a whole sequence.
    pub fn phi_host(&self, audio: &Array2<f64>) -> Array2<f64> {
        let t = Tape::new();
        let bound = self.params.bind(&t);
        let out = self.phi_forward(&t, &bound, const2(&t, audio));
        to_array2(&t.value(out))
    }

    /// Host-side full forward for a sequence of frames with given eye
    /// features.
    pub fn infer(
        &self,
        audio: &AudioFeatures,
        e0: ArrayView1<f64>,
        eye: &Array2<f64>,
    ) -> ExpressionSequence {
        let frames = audio.frames();
        assert_eq!(eye.nrows(), frames, "one eye feature row per frame");
        let t = Tape::new();
        let bound = self.params.bind(&t);
        let phi = self.phi_forward(&t, &bound, const2(&t, &audio.data));
        let mut e0m = Array2::zeros((frames, EXPR_DIM));
        for mut row in e0m.rows_mut() {
            row.assign(&e0);
        }
        let out = self.head_forward(&t, &bound, phi, const2(&t, &e0m), const2(&t, eye));
        ExpressionSequence::new(audio.fps, to_array2(&t.value(out)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::json!({ "arch": self.arch, "seed": self.seed });
        checkpoint::save(path, STAGE1_KIND, &config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, _) = checkpoint::load(path, STAGE1_KIND)?;
        let arch: Stage1Arch = serde_json::from_value(meta["arch"].clone())?;
        let seed = meta["seed"].as_u64().unwrap_or(0);
        let mut model = Self::new(arch, seed);
        checkpoint::load_into(path, STAGE1_KIND, &mut model.params)?;
        Ok(model)
    }
}

/// Distillation targets: the teacher's mouth block joined with the
/// ground-truth eye and brow blocks.
pub fn resynced_targets(world: &World, clip: &SyntheticClip) -> (Vec<usize>, Array2<f64>) {
    let (phonemes, teacher) = world.lip_expert(&clip.audio);
    let mut target = clip.expr.data.clone();
    for t in 0..target.nrows() {
        for c in MOUTH_COEFFS {
            target[[t, c]] = teacher[[t, c]];
        }
    }
    (phonemes, target)
}

/// Nearest mouth prototype for one expression row.
pub fn mouth_phoneme(world: &World, expr_row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for p in 0..world.spec.phoneme_count {
        let mut d = 0.0;
        for c in MOUTH_COEFFS {
            let diff = expr_row[c] - world.mouth_shapes[[p, c]];
            d += diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = p;
        }
    }
    best
}

/// Fraction of frames whose predicted mouth decodes to the reference
/// phoneme.
pub fn phoneme_agreement(world: &World, expr: &Array2<f64>, reference: &[usize]) -> f64 {
    assert_eq!(expr.nrows(), reference.len());
    let hits = expr
        .rows()
        .into_iter()
        .zip(reference)
        .filter(|(row, &ph)| mouth_phoneme(world, *row) == ph)
        .count();
    hits as f64 / reference.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub lambda_one: f64,
    pub lambda_lms: f64,
    pub lambda_eye: f64,
    pub lambda_shut: f64,
    pub lambda_read: f64,
    /// Distill from the lip expert (resynced targets + readability loss).
    /// When false, train directly on ground-truth expressions.
    pub distill: bool,
    pub log_every: usize,
    pub arch: Stage1Arch,
}

impl Default for Stage1TrainConfig {
    fn default() -> Self {
        Self {
            seed: 21,
            steps: 1200,
            batch: 256,
            lr: 2e-3,
            grad_clip: 5.0,
            lambda_one: 2.0,
            lambda_lms: 0.01,
            lambda_eye: 2.0,
            lambda_shut: 1.0,
            lambda_read: 2.0,
            distill: true,
            log_every: 20,
            arch: Stage1Arch::default(),
        }
    }
}

struct Stage1Clip {
    audio: Array2<f64>,
    e0: Array1<f64>,
    eye: Array2<f64>,
    target: Array2<f64>,
    phonemes: Vec<usize>,
}

fn stage1_data(world: &World, clips: &[SyntheticClip], distill: bool) -> Vec<Stage1Clip> {
    clips
        .iter()
        .map(|clip| {
            let (phonemes, target) = if distill {
                resynced_targets(world, clip)
            } else {
                (world.lip_expert(&clip.audio).0, clip.expr.data.clone())
            };
            let eye = world.basis.eye_feature_sequence(&clip.expr).data;
            Stage1Clip {
                audio: clip.audio.data.clone(),
                e0: clip.expr.data.row(0).to_owned(),
                eye,
                target,
                phonemes,
            }
        })
        .collect()
}

pub fn train_stage1(
    world: &World,
    clips: &[SyntheticClip],
    cfg: &Stage1TrainConfig,
) -> Result<(Stage1Model, crate::diffusion::TrainLog)> {
    if clips.is_empty() {
        return Err(Error::validation("stage-1 training needs at least one clip"));
    }
    if cfg.arch.audio_dim != world.spec.audio_dim {
        return Err(Error::validation(format!(
            "stage-1 audio_dim {} != world audio_dim {}",
            cfg.arch.audio_dim, world.spec.audio_dim
        )));
    }
    let mut model = Stage1Model::new(cfg.arch.clone(), cfg.seed);
    let proj = LandmarkProjections::new(&world.basis);
    let data = stage1_data(world, clips, cfg.distill);
    let mut opt = Adam::new(&model.params, AdamConfig::with_lr(cfg.lr));
    let mut rng = rng_for(cfg.seed, "stage1.train");
    let mut log = Vec::new();
    let da = cfg.arch.audio_dim;

    for step in 0..cfg.steps {
        let b = cfg.batch;
        let mut audio = Array2::zeros((b, da));
        let mut e0 = Array2::zeros((b, EXPR_DIM));
        let mut eye = Array2::zeros((b, EYE_FEATURE_DIM));
        let mut target = Array2::zeros((b, EXPR_DIM));
        let mut proto = Array2::zeros((b, 32));
        for i in 0..b {
            let clip = &data[rng.gen_range(0..data.len())];
            let f = rng.gen_range(0..clip.audio.nrows());
            audio.row_mut(i).assign(&clip.audio.row(f));
            e0.row_mut(i).assign(&clip.e0);
            eye.row_mut(i).assign(&clip.eye.row(f));
            target.row_mut(i).assign(&clip.target.row(f));
            for (k, c) in MOUTH_COEFFS.enumerate() {
                proto[[i, k]] = world.mouth_shapes[[clip.phonemes[f], c]];
            }
        }
        // Host-side loss targets in landmark space.
        let target_mouth = &target.dot(&proj.mouth) + &proj.mouth_mean;
        let target_shut = {
            let diffs = &target.dot(&proj.lip_pairs) + &proj.lip_pairs_mean;
            Array1::from_shape_fn(b, |i| {
                (0..4)
                    .map(|k| {
                        let d2: f64 = (0..3).map(|d| diffs[[i, 3 * k + d]].powi(2)).sum();
                        (d2 + 1e-12).sqrt()
                    })
                    .sum::<f64>()
                    / 4.0
            })
        };

        let t = Tape::new();
        let bound = model.params.bind(&t);
        let phi = model.phi_forward(&t, &bound, const2(&t, &audio));
        let pred = model.head_forward(&t, &bound, phi, const2(&t, &e0), const2(&t, &eye));

        let l_one = t.l1(pred, const2(&t, &target));
        let pred_mouth_lms = proj.mouth_coords(&t, pred);
        let l_lms = t.scale(t.mse(pred_mouth_lms, const2(&t, &target_mouth)), 3.0);
        let pred_eye = proj.eye_features(&t, pred);
        let l_eye = t.mse(pred_eye, const2(&t, &eye));
        let pred_shut = proj.shut_distance(&t, pred);
        let l_shut = t.mse(pred_shut, t.constant(target_shut.into_dyn()));

        let mut terms = vec![
            (cfg.lambda_one, l_one),
            (cfg.lambda_lms, l_lms),
            (cfg.lambda_eye, l_eye),
            (cfg.lambda_shut, l_shut),
        ];
        if cfg.distill {
            let pred_mouth = t.narrow(pred, 1, 0, 32);
            let l_read = t.mse(pred_mouth, const2(&t, &proto));
            terms.push((cfg.lambda_read, l_read));
        }
        let loss = weighted_sum(&t, &terms);
        let loss_val = t.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::divergence(format!(
                "stage-1 training diverged at step {step}: loss {loss_val}"
            )));
        }
        let grads = t.backward(loss);
        let mut g = grad_vec(&model.params, &bound, &grads);
        clip_global_norm(&mut g, cfg.grad_clip);
        opt.step(&mut model.params, &g);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.push(crate::diffusion::LossRow { step, loss: loss_val });
        }
    }
    Ok((model, log))
}

// ---------------------------------------------------------------------------
// Sequence SSIM on the tape
// ---------------------------------------------------------------------------

/// Differentiable sequence SSIM between `(frames, dims)` tensors, matching
/// the host metric: per-dimension population statistics over time, averaged
/// across dimensions.
pub fn ssim_tape(t: &Tape, a: Var, b: Var) -> Var {
    let mu_a = t.mean_axis(a, 0, false);
    let mu_b = t.mean_axis(b, 0, false);
    let e_aa = t.mean_axis(t.mul(a, a), 0, false);
    let e_bb = t.mean_axis(t.mul(b, b), 0, false);
    let e_ab = t.mean_axis(t.mul(a, b), 0, false);
    let var_a = t.sub(e_aa, t.mul(mu_a, mu_a));
    let var_b = t.sub(e_bb, t.mul(mu_b, mu_b));
    let cov = t.sub(e_ab, t.mul(mu_a, mu_b));
    let lum_n = t.add_scalar(t.scale(t.mul(mu_a, mu_b), 2.0), SSIM_C1);
    let lum_d = t.add_scalar(t.add(t.mul(mu_a, mu_a), t.mul(mu_b, mu_b)), SSIM_C1);
    let str_n = t.add_scalar(t.scale(cov, 2.0), SSIM_C2);
    let str_d = t.add_scalar(t.add(var_a, var_b), SSIM_C2);
    let ssim = t.div(t.mul(lum_n, str_n), t.mul(lum_d, str_d));
    t.mean_all(ssim)
}

// ---------------------------------------------------------------------------
// Temporal convolution discriminator
// ---------------------------------------------------------------------------

/// Small temporal discriminator over `(1, frames, dims)` sequences.
pub struct Discriminator {
    pub params: Params,
    c1: Conv1d,
    c2: Conv1d,
    head: Linear,
}

impl Discriminator {
    pub fn new(input_dim: usize, width: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "disc.init");
        let mut p = Params::new();
        let c1 = Conv1d::new(&mut p, "c1", input_dim, width, 5, 1, &mut rng);
        let c2 = Conv1d::new(&mut p, "c2", width, width, 5, 2, &mut rng);
        let head = Linear::new(&mut p, "head", width, 1, &mut rng);
        Self { params: p, c1, c2, head }
    }

    pub fn forward(&self, t: &Tape, bound: &[Var], x: Var) -> Var {
        let h = t.swap_axes(x, 1, 2);
        let h = t.leaky_relu(self.c1.forward(t, bound, h), 0.2);
        let h = t.leaky_relu(self.c2.forward(t, bound, h), 0.2);
        let pooled = t.mean_axis(h, 2, false); // (1, width)
        self.head.forward(t, bound, pooled)
    }
}

// ---------------------------------------------------------------------------
// Stage 2: recurrent eye-motion synthesis with adversarial training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Arch {
    pub phi_dim: usize,
    /// LSTM hidden size; equal by construction to the eye-motion latent
    /// size, since the hidden state is the latent delta.
    pub hidden: usize,
    pub z_dim: usize,
    pub dec_hidden: usize,
}

impl Default for Stage2Arch {
    fn default() -> Self {
        Self { phi_dim: 24, hidden: 32, z_dim: 16, dec_hidden: 48 }
    }
}

impl Stage2Arch {
    pub fn input_dim(&self) -> usize {
        self.phi_dim + self.hidden + EXPR_DIM + self.z_dim
    }
}

/// Stage-2 model: an LSTM over `(phi(a_t), omega_0, e_0, z)` whose hidden
/// state is the eye-motion latent delta; a small MLP decodes the latent
/// into the 21-dim eye-motion feature.
pub struct Stage2Model {
    pub params: Params,
    pub arch: Stage2Arch,
    seed: u64,
    lstm: LstmCell,
    dec: Mlp,
}

impl Stage2Model {
    pub fn new(arch: Stage2Arch, seed: u64) -> Self {
        let mut rng = rng_for(seed, "stage2.init");
        let mut p = Params::new();
        let lstm = LstmCell::new(&mut p, "lstm", arch.input_dim(), arch.hidden, &mut rng);
        let dec = Mlp::new(
            &mut p,
            "dec",
            &[arch.hidden, arch.dec_hidden, EYE_FEATURE_DIM],
            Act::Silu,
            &mut rng,
        );
        Self { params: p, arch, seed, lstm, dec }
    }

    /// Build the host-side per-frame input rows `(frames, input_dim)`:
    /// `phi_t | omega_0 (zero) | e_0 | z`.
    pub fn build_inputs(&self, phi: &Array2<f64>, e0: ArrayView1<f64>, z: &Array1<f64>) -> Array2<f64> {
        let frames = phi.nrows();
        let a = self.arch.phi_dim;
        let h = self.arch.hidden;
        assert_eq!(phi.ncols(), a);
        assert_eq!(z.len(), self.arch.z_dim);
        let mut x = Array2::zeros((frames, self.arch.input_dim()));
        for t in 0..frames {
            for d in 0..a {
                x[[t, d]] = phi[[t, d]];
            }
            // omega_0 block stays zero: the latent starts at rest.
            for d in 0..EXPR_DIM {
                x[[t, a + h + d]] = e0[d];
            }
            for d in 0..self.arch.z_dim {
                x[[t, a + h + EXPR_DIM + d]] = z[d];
            }
        }
        x
    }

    /// Unroll the LSTM on the tape and decode eye features `(frames, 21)`.
    pub fn roll(&self, t: &Tape, bound: &[Var], inputs: Var) -> Var {
        let frames = t.shape(inputs)[0];
        let (mut h, mut c) = self.lstm.zero_state(t, 1);
        let mut hs = Vec::with_capacity(frames);
        for i in 0..frames {
            let x = t.narrow(inputs, 0, i, 1);
            let (h2, c2) = self.lstm.step(t, bound, x, h, c);
            h = h2;
            c = c2;
            hs.push(h);
        }
        let latents = t.concat(&hs, 0); // (frames, hidden) = omega_0 + delta
        self.dec.forward(t, bound, latents)
    }

    /// Host-side eye-feature synthesis for a whole sequence.
    pub fn eye_features(
        &self,
        phi: &Array2<f64>,
        e0: ArrayView1<f64>,
        z: &Array1<f64>,
    ) -> Array2<f64> {
        let t = Tape::new();
        let bound = self.params.bind(&t);
        let inputs = self.build_inputs(phi, e0, z);
        let out = self.roll(&t, &bound, const2(&t, &inputs));
        to_array2(&t.value(out))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::json!({ "arch": self.arch, "seed": self.seed });
        checkpoint::save(path, STAGE2_KIND, &config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, _) = checkpoint::load(path, STAGE2_KIND)?;
        let arch: Stage2Arch = serde_json::from_value(meta["arch"].clone())?;
        let seed = meta["seed"].as_u64().unwrap_or(0);
        let mut model = Self::new(arch, seed);
        checkpoint::load_into(path, STAGE2_KIND, &mut model.params)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub window: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub grad_clip: f64,
    pub lambda_ssim: f64,
    pub lambda_one: f64,
    pub lambda_ad: f64,
    pub lambda_te: f64,
    pub lambda_tf: f64,
    pub lambda_stage1: f64,
    pub use_d_eye: bool,
    pub use_d_te: bool,
    pub use_d_tf: bool,
    pub disc_width: usize,
    pub log_every: usize,
    pub arch: Stage2Arch,
}

impl Default for Stage2TrainConfig {
    fn default() -> Self {
        Self {
            seed: 22,
            steps: 1500,
            batch: 8,
            window: 60,
            lr: 1e-3,
            disc_lr: 1e-3,
            grad_clip: 5.0,
            lambda_ssim: 2.0,
            lambda_one: 2.0,
            lambda_ad: 1.0,
            lambda_te: 1.0,
            lambda_tf: 1.0,
            lambda_stage1: 1.0,
            use_d_eye: true,
            use_d_te: true,
            use_d_tf: true,
            disc_width: 24,
            log_every: 25,
            arch: Stage2Arch::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2LogRow {
    pub step: usize,
    pub gen: f64,
    pub d_eye: f64,
    pub d_te: f64,
    pub d_tf: f64,
    /// Mean absolute difference of probe outputs under two noise draws —
    /// a mode-collapse telltale when it approaches zero.
    pub diversity: f64,
}

struct Stage2Clip {
    phi: Array2<f64>,
    e0: Array1<f64>,
    eye: Array2<f64>,
    expr: Array2<f64>,
    target: Array2<f64>,
}

/// Per-sample generator pass: returns the loss, the generator gradients,
/// and the detached fake sequences for the discriminator phase.
struct GenOutput {
    loss: f64,
    grads: Vec<ArrayD<f64>>,
    fake_eye: Array2<f64>,
    fake_dexpr: Array2<f64>,
    fake_deye: Array2<f64>,
}

fn temporal_diff(t: &Tape, x: Var) -> Var {
    let frames = t.shape(x)[0];
    let head = t.narrow(x, 0, 1, frames - 1);
    let tail = t.narrow(x, 0, 0, frames - 1);
    t.sub(head, tail)
}

fn temporal_diff_host(x: &Array2<f64>) -> Array2<f64> {
    let (frames, d) = x.dim();
    let mut out = Array2::zeros((frames - 1, d));
    for i in 0..frames - 1 {
        for j in 0..d {
            out[[i, j]] = x[[i + 1, j]] - x[[i, j]];
        }
    }
    out
}

pub fn train_stage2(
    world: &World,
    clips: &[SyntheticClip],
    stage1: &Stage1Model,
    cfg: &Stage2TrainConfig,
) -> Result<(Stage2Model, Vec<Stage2LogRow>)> {
    if clips.is_empty() {
        return Err(Error::validation("stage-2 training needs at least one clip"));
    }
    if cfg.arch.phi_dim != stage1.arch.phi_dim {
        return Err(Error::validation("stage-2 phi_dim must match stage 1"));
    }
    if !stage1.arch.use_eye_input {
        return Err(Error::validation(
            "stage-2 refines the eye channel and needs a stage 1 trained with eye input",
        ));
    }
    let min_frames = clips.iter().map(|c| c.frames()).min().unwrap();
    if cfg.window < 8 || cfg.window > min_frames {
        return Err(Error::validation(format!(
            "stage-2 window {} must be in 8..={min_frames}",
            cfg.window
        )));
    }

    let mut model = Stage2Model::new(cfg.arch.clone(), cfg.seed);
    let mut d_eye = cfg
        .use_d_eye
        .then(|| Discriminator::new(EYE_FEATURE_DIM, cfg.disc_width, derive_seed(cfg.seed, "d_eye")));
    let mut d_te = cfg
        .use_d_te
        .then(|| Discriminator::new(EXPR_DIM, cfg.disc_width, derive_seed(cfg.seed, "d_te")));
    let mut d_tf = cfg
        .use_d_tf
        .then(|| Discriminator::new(EYE_FEATURE_DIM, cfg.disc_width, derive_seed(cfg.seed, "d_tf")));

    let data: Vec<Stage2Clip> = clips
        .iter()
        .map(|clip| {
            let (_, target) = resynced_targets(world, clip);
            Stage2Clip {
                phi: stage1.phi_host(&clip.audio.data),
                e0: clip.expr.data.row(0).to_owned(),
                eye: world.basis.eye_feature_sequence(&clip.expr).data,
                expr: clip.expr.data.clone(),
                target,
            }
        })
        .collect();

    let mut opt_g = Adam::new(&model.params, AdamConfig::with_lr(cfg.lr));
    let mut opt_eye = d_eye.as_ref().map(|d| Adam::new(&d.params, AdamConfig::with_lr(cfg.disc_lr)));
    let mut opt_te = d_te.as_ref().map(|d| Adam::new(&d.params, AdamConfig::with_lr(cfg.disc_lr)));
    let mut opt_tf = d_tf.as_ref().map(|d| Adam::new(&d.params, AdamConfig::with_lr(cfg.disc_lr)));

    let mut rng = rng_for(cfg.seed, "stage2.train");
    let probe_z1 = normal_array(&mut rng_for(cfg.seed, "stage2.probe.z1"), &[cfg.arch.z_dim])
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap();
    let probe_z2 = normal_array(&mut rng_for(cfg.seed, "stage2.probe.z2"), &[cfg.arch.z_dim])
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap();
    let mut collapsed_probes = 0usize;
    let mut log = Vec::new();
    let w = cfg.window;

    for step in 0..cfg.steps {
        // ----- assemble batch -----
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let ci = rng.gen_range(0..data.len());
            let frames = data[ci].phi.nrows();
            let off = if frames > w { rng.gen_range(0..=frames - w) } else { 0 };
            let z = normal_array(&mut rng, &[cfg.arch.z_dim])
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            batch.push((ci, off, z));
        }

        // ----- generator phase -----
        let model_ref = &model;
        let d_eye_ref = d_eye.as_ref();
        let d_te_ref = d_te.as_ref();
        let d_tf_ref = d_tf.as_ref();
        let gen_out: Vec<GenOutput> = batch
            .par_iter()
            .map(|(ci, off, z)| {
                let clip = &data[*ci];
                let sl = ndarray::s![*off..*off + w, ..];
                let phi = clip.phi.slice(sl).to_owned();
                let eye_gt = clip.eye.slice(sl).to_owned();
                let target = clip.target.slice(sl).to_owned();

                let t = Tape::new();
                let bound = model_ref.params.bind(&t);
                let inputs = model_ref.build_inputs(&phi, clip.e0.view(), z);
                let fake = model_ref.roll(&t, &bound, const2(&t, &inputs)); // (w, 21)

                // chain through the frozen stage 1
                let s1_bound = stage1.params.bind(&t);
                let mut e0m = Array2::zeros((w, EXPR_DIM));
                for mut row in e0m.rows_mut() {
                    row.assign(&clip.e0);
                }
                let chained = stage1.head_forward(
                    &t,
                    &s1_bound,
                    const2(&t, &phi),
                    const2(&t, &e0m),
                    fake,
                );

                let l_one = t.l1(fake, const2(&t, &eye_gt));
                let ssim = ssim_tape(&t, fake, const2(&t, &eye_gt));
                let l_ssim = t.add_scalar(t.neg(ssim), 1.0);
                let l_stage1 = t.l1(chained, const2(&t, &target));
                let mut terms = vec![
                    (cfg.lambda_one, l_one),
                    (cfg.lambda_ssim, l_ssim),
                    (cfg.lambda_stage1, l_stage1),
                ];

                let fake_seq = t.reshape(fake, &[1, w, EYE_FEATURE_DIM]);
                let dexpr = temporal_diff(&t, chained);
                let deye = temporal_diff(&t, fake);
                if let Some(d) = d_eye_ref {
                    let db = d.params.bind(&t);
                    terms.push((cfg.lambda_ad, lsgan_generator_loss(&t, d.forward(&t, &db, fake_seq))));
                }
                if let Some(d) = d_te_ref {
                    let db = d.params.bind(&t);
                    let x = t.reshape(dexpr, &[1, w - 1, EXPR_DIM]);
                    terms.push((cfg.lambda_te, lsgan_generator_loss(&t, d.forward(&t, &db, x))));
                }
                if let Some(d) = d_tf_ref {
                    let db = d.params.bind(&t);
                    let x = t.reshape(deye, &[1, w - 1, EYE_FEATURE_DIM]);
                    terms.push((cfg.lambda_tf, lsgan_generator_loss(&t, d.forward(&t, &db, x))));
                }

                let loss = weighted_sum(&t, &terms);
                let loss_val = t.scalar_value(loss);
                let grads = t.backward(loss);
                GenOutput {
                    loss: loss_val,
                    grads: grad_vec(&model_ref.params, &bound, &grads),
                    fake_eye: to_array2(&t.value(fake)),
                    fake_dexpr: to_array2(&t.value(dexpr)),
                    fake_deye: to_array2(&t.value(deye)),
                }
            })
            .collect();

        let mut gen_loss = 0.0;
        let mut g_total: Vec<ArrayD<f64>> = gen_out[0].grads.iter().map(|g| g.mapv(|_| 0.0)).collect();
        for out in &gen_out {
            gen_loss += out.loss;
            for (acc, g) in g_total.iter_mut().zip(out.grads.iter()) {
                *acc += g;
            }
        }
        gen_loss /= cfg.batch as f64;
        if !gen_loss.is_finite() {
            return Err(Error::divergence(format!(
                "stage-2 generator diverged at step {step}: loss {gen_loss}"
            )));
        }
        let inv_b = 1.0 / cfg.batch as f64;
        for g in g_total.iter_mut() {
            g.mapv_inplace(|v| v * inv_b);
        }
        clip_global_norm(&mut g_total, cfg.grad_clip);
        opt_g.step(&mut model.params, &g_total);

        // ----- discriminator phase -----
        let mut d_losses = [0.0_f64; 3];
        for (slot, (disc, opt)) in [
            (&mut d_eye, &mut opt_eye),
            (&mut d_te, &mut opt_te),
            (&mut d_tf, &mut opt_tf),
        ]
        .into_iter()
        .enumerate()
        {
            let (Some(d), Some(o)) = (disc.as_mut(), opt.as_mut()) else { continue };
            let d_ref: &Discriminator = d;
            let results: Vec<(f64, Vec<ArrayD<f64>>)> = batch
                .par_iter()
                .zip(gen_out.par_iter())
                .map(|((ci, off, _), out)| {
                    let clip = &data[*ci];
                    let t = Tape::new();
                    let db = d_ref.params.bind(&t);
                    let (real, fake): (Array2<f64>, &Array2<f64>) = match slot {
                        0 => (clip.eye.slice(ndarray::s![*off..*off + w, ..]).to_owned(), &out.fake_eye),
                        1 => (
                            temporal_diff_host(&clip.expr.slice(ndarray::s![*off..*off + w, ..]).to_owned()),
                            &out.fake_dexpr,
                        ),
                        _ => (
                            temporal_diff_host(&clip.eye.slice(ndarray::s![*off..*off + w, ..]).to_owned()),
                            &out.fake_deye,
                        ),
                    };
                    let d_real = d_ref.forward(&t, &db, const3(&t, &real));
                    let d_fake = d_ref.forward(&t, &db, const3(&t, fake));
                    let loss = lsgan_discriminator_loss(&t, d_real, d_fake);
                    let loss_val = t.scalar_value(loss);
                    let grads = t.backward(loss);
                    (loss_val, grad_vec(&d_ref.params, &db, &grads))
                })
                .collect();
            let mut total: Vec<ArrayD<f64>> = results[0].1.iter().map(|g| g.mapv(|_| 0.0)).collect();
            let mut loss_acc = 0.0;
            for (lv, gs) in &results {
                loss_acc += lv;
                for (acc, g) in total.iter_mut().zip(gs.iter()) {
                    *acc += g;
                }
            }
            loss_acc /= cfg.batch as f64;
            if !loss_acc.is_finite() {
                return Err(Error::divergence(format!(
                    "stage-2 discriminator {slot} diverged at step {step}"
                )));
            }
            for g in total.iter_mut() {
                g.mapv_inplace(|v| v * inv_b);
            }
            clip_global_norm(&mut total, cfg.grad_clip);
            o.step(&mut d.params, &total);
            d_losses[slot] = loss_acc;
        }

        // ----- collapse probe + logging -----
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let probe = &data[0];
            let phi = probe.phi.slice(ndarray::s![0..w, ..]).to_owned();
            let f1 = model.eye_features(&phi, probe.e0.view(), &probe_z1);
            let f2 = model.eye_features(&phi, probe.e0.view(), &probe_z2);
            let diversity = f1
                .iter()
                .zip(f2.iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / (w * EYE_FEATURE_DIM) as f64;
            if diversity < 1e-9 {
                collapsed_probes += 1;
                if collapsed_probes >= 5 {
                    return Err(Error::divergence(format!(
                        "stage-2 mode collapse: probe diversity {diversity:.3e} for 5 probes"
                    )));
                }
            } else {
                collapsed_probes = 0;
            }
            log.push(Stage2LogRow {
                step,
                gen: gen_loss,
                d_eye: d_losses[0],
                d_te: d_losses[1],
                d_tf: d_losses[2],
                diversity,
            });
        }
    }
    Ok((model, log))
}

// ---------------------------------------------------------------------------
// Inference pipeline
// ---------------------------------------------------------------------------

/// Rest eye-motion feature: blink ratio 1 (eyes open), zero brow
/// displacement. Used when no stage-2 model is present.
pub fn rest_eye_feature() -> Array1<f64> {
    let mut f = Array1::zeros(EYE_FEATURE_DIM);
    f[0] = 1.0;
    f
}

/// The full audio-to-expression pipeline; stage 2 is optional so the
/// stage-1-only ablation can run the same interface.
pub struct ExpressionPipeline {
    pub stage1: Stage1Model,
    pub stage2: Option<Stage2Model>,
}

impl ExpressionPipeline {
    /// Predict an expression sequence (and the eye-feature stream that
    /// drove it) for a clip's audio.
    pub fn infer(
        &self,
        audio: &AudioFeatures,
        e0: ArrayView1<f64>,
        seed: u64,
    ) -> (ExpressionSequence, EyeFeatureSequence) {
        let frames = audio.frames();
        let eye = match &self.stage2 {
            Some(s2) => {
                let phi = self.stage1.phi_host(&audio.data);
                let z = normal_array(&mut rng_for(seed, "expr.z"), &[s2.arch.z_dim])
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                s2.eye_features(&phi, e0, &z)
            }
            None => {
                let rest = rest_eye_feature();
                let mut eye = Array2::zeros((frames, EYE_FEATURE_DIM));
                for mut row in eye.rows_mut() {
                    row.assign(&rest);
                }
                eye
            }
        };
        let expr = self.stage1.infer(audio, e0, &eye);
        let eye_seq = EyeFeatureSequence::new(audio.fps, eye);
        (expr, eye_seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::shut_distance;
    use crate::metrics::sequence_ssim;
    use crate::rng::fill_normal;
    use crate::world::WorldSpec;

    fn tiny_world() -> World {
        World::new(WorldSpec { frames_per_clip: 60, num_clips: 3, ..WorldSpec::default() }).unwrap()
    }

    #[test]
    fn projections_match_host_geometry() {
        let world = tiny_world();
        let proj = LandmarkProjections::new(&world.basis);
        let mut rng = rng_for(4, "proj");
        let mut coeffs = Array2::zeros((3, EXPR_DIM));
        fill_normal(&mut rng, coeffs.as_slice_mut().unwrap());
        coeffs.mapv_inplace(|v| v * 0.3);

        let t = Tape::new();
        let e = const2(&t, &coeffs);
        let eye = t.value(proj.eye_features(&t, e));
        let shut = t.value(proj.shut_distance(&t, e));
        let mouth = t.value(proj.mouth_coords(&t, e));

        for i in 0..3 {
            let lm = world.basis.reconstruct(&coeffs.row(i));
            let f_host = world.basis.eye_motion_feature(&lm);
            for d in 0..EYE_FEATURE_DIM {
                assert!(
                    (eye[[i, d]] - f_host[d]).abs() < 1e-10,
                    "eye feature {d}: {} vs {}",
                    eye[[i, d]],
                    f_host[d]
                );
            }
            let s_host = shut_distance(&lm);
            assert!((shut[[i]] - s_host).abs() < 1e-8, "shut: {} vs {s_host}", shut[[i]]);
            for (k, &li) in MOUTH_LANDMARKS.iter().enumerate() {
                for d in 0..3 {
                    assert!((mouth[[i, 3 * k + d]] - lm.points[[li, d]]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn resynced_targets_mix_teacher_mouth_with_true_rest() {
        let world = tiny_world();
        let clip = world.clip(0).unwrap();
        let (phonemes, target) = resynced_targets(&world, &clip);
        assert_eq!(phonemes.len(), clip.frames());
        for t in 0..clip.frames() {
            for c in MOUTH_COEFFS {
                assert_eq!(target[[t, c]], world.mouth_shapes[[phonemes[t], c]]);
            }
            for c in 32..EXPR_DIM {
                assert_eq!(target[[t, c]], clip.expr.data[[t, c]]);
            }
        }
    }

    #[test]
    fn ground_truth_mouth_decodes_perfectly() {
        let world = tiny_world();
        let clip = world.clip(1).unwrap();
        let agreement = phoneme_agreement(&world, &clip.expr.data, &clip.meta.phonemes);
        assert_eq!(agreement, 1.0, "true mouth blocks are exact prototypes");
    }

    #[test]
    fn stage1_training_reduces_loss_deterministically() {
        let world = tiny_world();
        let clips: Vec<_> = (0..3).map(|i| world.clip(i).unwrap()).collect();
        let cfg = Stage1TrainConfig {
            steps: 60,
            batch: 64,
            log_every: 5,
            ..Stage1TrainConfig::default()
        };
        let (model, log) = train_stage1(&world, &clips, &cfg).unwrap();
        let first = log.first().unwrap().loss;
        let last = log.last().unwrap().loss;
        assert!(last < 0.5 * first, "stage-1 loss should fall fast: {first} -> {last}");

        let (_, log2) = train_stage1(&world, &clips, &cfg).unwrap();
        assert_eq!(log, log2, "training must be bit-deterministic");

        let clip = &clips[0];
        let eye = world.basis.eye_feature_sequence(&clip.expr).data;
        let pred = model.infer(&clip.audio, clip.expr.data.row(0), &eye);
        assert_eq!(pred.data.dim(), (60, EXPR_DIM));
        assert!(pred.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stage1_without_eye_input_ignores_the_feature_channel() {
        let world = tiny_world();
        let clips: Vec<_> = (0..2).map(|i| world.clip(i).unwrap()).collect();
        let arch = Stage1Arch { use_eye_input: false, ..Stage1Arch::default() };
        assert_eq!(arch.head_input_dim(), arch.phi_dim + EXPR_DIM);
        let cfg = Stage1TrainConfig {
            steps: 4,
            batch: 32,
            log_every: 1,
            arch,
            ..Stage1TrainConfig::default()
        };
        let (model, _) = train_stage1(&world, &clips, &cfg).unwrap();

        let clip = &clips[0];
        let eye = world.basis.eye_feature_sequence(&clip.expr).data;
        let zeros = Array2::zeros(eye.dim());
        let with_eye = model.infer(&clip.audio, clip.expr.data.row(0), &eye);
        let without = model.infer(&clip.audio, clip.expr.data.row(0), &zeros);
        assert_eq!(
            with_eye.data, without.data,
            "the eye channel must have no effect when disabled"
        );

        // Stage 2 depends on the eye channel being present in stage 1.
        let s2 = Stage2TrainConfig { steps: 1, window: 20, ..Stage2TrainConfig::default() };
        match train_stage2(&world, &clips, &model, &s2) {
            Err(Error::Validation(_)) => {}
            Err(other) => panic!("expected a validation error, got {other}"),
            Ok(_) => panic!("stage 2 must reject a stage 1 without eye input"),
        }
    }

    #[test]
    fn stage1_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.ckpt");
        let model = Stage1Model::new(Stage1Arch::default(), 9);
        model.save(&path).unwrap();
        let restored = Stage1Model::load(&path).unwrap();
        let mut rng = rng_for(2, "s1rt");
        let mut audio = Array2::zeros((5, 16));
        fill_normal(&mut rng, audio.as_slice_mut().unwrap());
        let a = model.phi_host(&audio);
        let b = restored.phi_host(&audio);
        assert_eq!(a, b);
    }

    #[test]
    fn tape_ssim_matches_host_metric() {
        let mut rng = rng_for(8, "ssim");
        let mut a = Array2::zeros((40, 5));
        let mut b = Array2::zeros((40, 5));
        fill_normal(&mut rng, a.as_slice_mut().unwrap());
        fill_normal(&mut rng, b.as_slice_mut().unwrap());
        // correlate b with a somewhat
        b = &b * 0.3 + &a * 0.7;
        let host = sequence_ssim(&a, &b);
        let t = Tape::new();
        let v = ssim_tape(&t, const2(&t, &a), const2(&t, &b));
        assert!((t.scalar_value(v) - host).abs() < 1e-12);
    }

    #[test]
    fn stage2_roll_is_deterministic_and_noise_sensitive() {
        let model = Stage2Model::new(Stage2Arch::default(), 3);
        let mut rng = rng_for(5, "s2roll");
        let mut phi = Array2::zeros((20, 24));
        fill_normal(&mut rng, phi.as_slice_mut().unwrap());
        let e0 = Array1::zeros(EXPR_DIM);
        let z1 = Array1::from_elem(16, 0.5);
        let z2 = Array1::from_elem(16, -0.5);
        let a = model.eye_features(&phi, e0.view(), &z1);
        let b = model.eye_features(&phi, e0.view(), &z1);
        let c = model.eye_features(&phi, e0.view(), &z2);
        assert_eq!(a, b);
        assert_ne!(a, c, "noise vector must influence the output");
        assert_eq!(a.dim(), (20, EYE_FEATURE_DIM));
    }

    #[test]
    fn stage2_training_runs_and_is_deterministic() {
        let world = tiny_world();
        let clips: Vec<_> = (0..2).map(|i| world.clip(i).unwrap()).collect();
        let s1_cfg = Stage1TrainConfig { steps: 20, batch: 32, ..Stage1TrainConfig::default() };
        let (stage1, _) = train_stage1(&world, &clips, &s1_cfg).unwrap();
        let cfg = Stage2TrainConfig {
            steps: 8,
            batch: 2,
            window: 20,
            log_every: 2,
            ..Stage2TrainConfig::default()
        };
        let (model, log) = train_stage2(&world, &clips, &stage1, &cfg).unwrap();
        assert!(!log.is_empty());
        assert!(log.iter().all(|r| r.gen.is_finite() && r.diversity.is_finite()));
        assert!(log.iter().all(|r| r.d_eye != 0.0 && r.d_te != 0.0 && r.d_tf != 0.0));

        let (_, log2) = train_stage2(&world, &clips, &stage1, &cfg).unwrap();
        assert_eq!(log, log2, "stage-2 training must be bit-deterministic");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s2.ckpt");
        model.save(&path).unwrap();
        let restored = Stage2Model::load(&path).unwrap();
        let phi = stage1.phi_host(&clips[0].audio.data);
        let z = Array1::from_elem(16, 0.3);
        let a = model.eye_features(&phi, clips[0].expr.data.row(0), &z);
        let b = restored.eye_features(&phi, clips[0].expr.data.row(0), &z);
        assert_eq!(a, b);
    }

    #[test]
    fn discriminator_toggles_disable_their_losses() {
        let world = tiny_world();
        let clips: Vec<_> = (0..2).map(|i| world.clip(i).unwrap()).collect();
        let s1_cfg = Stage1TrainConfig { steps: 5, batch: 16, ..Stage1TrainConfig::default() };
        let (stage1, _) = train_stage1(&world, &clips, &s1_cfg).unwrap();
        let cfg = Stage2TrainConfig {
            steps: 3,
            batch: 2,
            window: 16,
            log_every: 1,
            use_d_te: false,
            use_d_tf: false,
            ..Stage2TrainConfig::default()
        };
        let (_, log) = train_stage2(&world, &clips, &stage1, &cfg).unwrap();
        assert!(log.iter().all(|r| r.d_te == 0.0 && r.d_tf == 0.0));
        assert!(log.iter().any(|r| r.d_eye != 0.0));
    }

    #[test]
    fn pipeline_infers_with_and_without_stage2() {
        let world = tiny_world();
        let clip = world.clip(0).unwrap();
        let stage1 = Stage1Model::new(Stage1Arch::default(), 1);
        let stage2 = Stage2Model::new(Stage2Arch::default(), 2);
        let e0 = clip.expr.data.row(0);

        let p1 = ExpressionPipeline { stage1, stage2: None };
        let (expr, eye) = p1.infer(&clip.audio, e0, 7);
        assert_eq!(expr.data.dim(), (60, EXPR_DIM));
        assert!(eye.data.rows().into_iter().all(|r| r[0] == 1.0), "rest blink ratio");

        let p2 = ExpressionPipeline { stage1: p1.stage1, stage2: Some(stage2) };
        let (expr2, eye2) = p2.infer(&clip.audio, e0, 7);
        let (expr2b, _) = p2.infer(&clip.audio, e0, 7);
        assert_eq!(expr2.data, expr2b.data, "same seed, same output");
        assert_ne!(expr.data, expr2.data);
        assert!(eye2.data.iter().all(|v| v.is_finite()));
    }
}
