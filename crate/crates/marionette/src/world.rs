//! Procedurally generated talking-head world with exact ground truth.
//!
//! Every clip is derived deterministically from a seed: a phoneme stream
//! drives unit-norm audio templates scaled by a loudness envelope, mouth
//! coefficients are a piecewise-constant function of the phoneme (so a
//! template-matching lip expert inverts them exactly on clean audio), the
//! head pose follows a critically damped random walk whose step size is
//! modulated by the envelope, blinks are seeded at envelope dips, brows mix
//! an envelope-coupled component with a slow sinusoid and noise, and gaze
//! drifts slowly inside a bounded box.

use crate::error::{Error, Result};
use crate::landmarks::{LandmarkBasis, BROW_COEFFS, EYE_COEFFS};
use crate::metrics::pearson;
use crate::rng::{derive_seed, normal, rng_for, Rng};
use crate::types::{
    load_json, save_json, AudioFeatures, ClipMeta, ExpressionSequence, GazeSequence,
    PoseSequence, EXPR_DIM, GENERATOR_VERSION, IDENTITY_DIM, POSE_DIM,
};
use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Openness multipliers for the four frames of a blink (close, shut, shut,
/// reopen); frames outside a blink keep openness 1.
pub const BLINK_PROFILE: [f64; 4] = [0.35, 0.0, 0.0, 0.5];

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub seed: u64,
    pub basis_seed: u64,
    pub fps: f64,
    pub frames_per_clip: usize,
    pub num_clips: usize,
    pub num_identities: usize,
    pub audio_dim: usize,
    pub phoneme_count: usize,
    pub audio_noise: f64,
    pub silence_threshold: f64,
    /// Per-dimension standard deviation targets for the pose walk.
    pub pose_rot_scale: f64,
    pub pose_trans_scale: f64,
    /// Fraction of the step size that survives at zero loudness.
    pub pose_env_floor: f64,
    /// Natural frequency (rad/s) of the critically damped pose oscillator.
    pub pose_omega: f64,
    /// Minimum per-clip correlation between head speed and the envelope;
    /// clips below it are regenerated from fresh noise.
    pub min_speed_env_corr: f64,
    /// Envelope quantile below which a downward crossing can trigger a blink.
    pub blink_dip_quantile: f64,
    pub blink_trigger_prob: f64,
    pub blink_refractory: usize,
    /// Per-frame probability of a spontaneous blink away from dips.
    pub blink_extra_rate: f64,
    pub brow_env_gain: f64,
    pub brow_sin_amp: f64,
    pub brow_noise: f64,
    pub gaze_pull: f64,
    pub gaze_sigma: f64,
    pub gaze_limit: f64,
    pub gaze_retarget_frames: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            basis_seed: 40,
            fps: 25.0,
            frames_per_clip: 240,
            num_clips: 48,
            num_identities: 10,
            audio_dim: 16,
            phoneme_count: 8,
            audio_noise: 0.01,
            silence_threshold: 0.1,
            pose_rot_scale: 0.08,
            pose_trans_scale: 0.05,
            pose_env_floor: 0.25,
            pose_omega: 1.6,
            min_speed_env_corr: 0.4,
            blink_dip_quantile: 0.3,
            blink_trigger_prob: 0.85,
            blink_refractory: 10,
            blink_extra_rate: 0.004,
            brow_env_gain: 0.5,
            brow_sin_amp: 0.1,
            brow_noise: 0.04,
            gaze_pull: 0.6,
            gaze_sigma: 0.06,
            gaze_limit: 0.45,
            gaze_retarget_frames: 80,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0) {
            return Err(Error::validation("fps must be positive"));
        }
        if self.frames_per_clip < 40 {
            return Err(Error::validation("frames_per_clip must be at least 40"));
        }
        if self.phoneme_count < 2 {
            return Err(Error::validation("phoneme_count must be at least 2"));
        }
        if self.audio_dim < self.phoneme_count - 1 {
            return Err(Error::validation(
                "audio_dim must be at least phoneme_count - 1 so templates can be orthonormal",
            ));
        }
        if self.num_identities == 0 || self.num_clips == 0 {
            return Err(Error::validation("num_identities and num_clips must be positive"));
        }
        if !(self.silence_threshold > 0.0) {
            return Err(Error::validation("silence_threshold must be positive"));
        }
        if !(self.gaze_limit > 0.0 && self.gaze_limit <= 0.5) {
            return Err(Error::validation("gaze_limit must lie in (0, 0.5]"));
        }
        if !(self.min_speed_env_corr > 0.0 && self.min_speed_env_corr < 1.0) {
            return Err(Error::validation("min_speed_env_corr must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// One generated clip with aligned audio, motion, and ground-truth metadata.
#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub meta: ClipMeta,
    pub audio: AudioFeatures,
    pub pose: PoseSequence,
    pub expr: ExpressionSequence,
    pub gaze: GazeSequence,
}

impl SyntheticClip {
    pub fn frames(&self) -> usize {
        self.meta.frames
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        self.audio.validate()?;
        self.pose.validate()?;
        self.expr.validate()?;
        self.gaze.validate()?;
        let frames = self.meta.frames;
        if self.audio.frames() != frames
            || self.pose.frames() != frames
            || self.expr.frames() != frames
            || self.gaze.frames() != frames
        {
            return Err(Error::validation("clip streams have inconsistent frame counts"));
        }
        if self.audio.dim() != self.meta.audio_dim {
            return Err(Error::validation("audio dimension does not match metadata"));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(dir.display().to_string(), e))?;
        save_json(&dir.join("meta.json"), &self.meta)?;
        self.audio.save_csv(&dir.join("audio.csv"))?;
        self.pose.save_csv(&dir.join("pose.csv"))?;
        self.expr.save_csv(&dir.join("expression.csv"))?;
        self.gaze.save_csv(&dir.join("gaze.csv"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ClipMeta = load_json(&dir.join("meta.json"))?;
        let clip = Self {
            audio: AudioFeatures::load_csv(&dir.join("audio.csv"), meta.fps)?,
            pose: PoseSequence::load_csv(&dir.join("pose.csv"), meta.fps)?,
            expr: ExpressionSequence::load_csv(&dir.join("expression.csv"), meta.fps)?,
            gaze: GazeSequence::load_csv(&dir.join("gaze.csv"), meta.fps)?,
            meta,
        };
        clip.validate()?;
        Ok(clip)
    }
}

/// The world: landmark basis, phoneme templates, per-phoneme mouth shapes,
/// identity vectors, and the fixed brow coupling directions. Fully
/// determined by its [`WorldSpec`].
#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub basis: LandmarkBasis,
    /// `(phoneme_count, audio_dim)`; row 0 (silence) is all zeros, rows
    /// `1..` are mutually orthonormal.
    pub templates: Array2<f64>,
    /// `(phoneme_count, EXPR_DIM)` mouth coefficient vectors; row 0 closes
    /// the mouth exactly.
    pub mouth_shapes: Array2<f64>,
    /// `(num_identities, IDENTITY_DIM)`.
    pub identities: Array2<f64>,
    /// Unit directions in brow-coefficient space for the envelope-coupled
    /// and sinusoidal brow components.
    pub brow_env_dir: Array1<f64>,
    pub brow_sin_dir: Array1<f64>,
}

fn unit_vector(rng: &mut Rng, n: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(n, |_| normal(rng));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        spec.validate()?;
        let basis = LandmarkBasis::new(spec.basis_seed);

        // Speech templates: orthonormal columns, transposed into rows.
        let p = spec.phoneme_count;
        let mut rng_t = rng_for(spec.seed, "world.templates");
        let mut cols = Array2::from_shape_fn((spec.audio_dim, p - 1), |_| normal(&mut rng_t));
        crate::landmarks::orthonormalize_columns(&mut cols);
        let mut templates = Array2::zeros((p, spec.audio_dim));
        for j in 1..p {
            for i in 0..spec.audio_dim {
                templates[[j, i]] = cols[[i, j - 1]];
            }
        }

        // Mouth shapes: silence closes the mouth; speech phonemes mix a
        // random mouth direction with a per-phoneme opening amount.
        let shut = basis.mouth_shut_direction().clone();
        let mut rng_m = rng_for(spec.seed, "world.mouth");
        let mut mouth_shapes = Array2::zeros((p, EXPR_DIM));
        mouth_shapes.row_mut(0).assign(&shut);
        for ph in 1..p {
            let u = unit_vector(&mut rng_m, 32);
            let open = 0.15 + 0.55 * rng_m.gen::<f64>();
            for c in 0..32 {
                mouth_shapes[[ph, c]] = 0.2 * u[c] - open * shut[c];
            }
        }

        let mut rng_i = rng_for(spec.seed, "world.identities");
        let identities = Array2::from_shape_fn((spec.num_identities, IDENTITY_DIM), |_| {
            normal(&mut rng_i).clamp(-1.5, 1.5)
        });

        let mut rng_b = rng_for(spec.seed, "world.brows");
        let brow_env_dir = unit_vector(&mut rng_b, BROW_COEFFS.len());
        let brow_sin_dir = unit_vector(&mut rng_b, BROW_COEFFS.len());

        Ok(Self { spec, basis, templates, mouth_shapes, identities, brow_env_dir, brow_sin_dir })
    }

    pub fn identity(&self, clip_index: usize) -> Array1<f64> {
        self.identities.row(clip_index % self.spec.num_identities).to_owned()
    }

    /// Template-matching phoneme decoder: silence below the loudness
    /// threshold, otherwise the template with the largest projection.
    /// Exact on noise-free audio at any loudness above the threshold.
    pub fn decode_phoneme(&self, frame: ndarray::ArrayView1<f64>) -> usize {
        let norm = frame.dot(&frame).sqrt();
        if norm < self.spec.silence_threshold {
            return 0;
        }
        let mut best = 1;
        let mut best_score = f64::NEG_INFINITY;
        for ph in 1..self.spec.phoneme_count {
            let score = self.templates.row(ph).dot(&frame);
            if score > best_score {
                best_score = score;
                best = ph;
            }
        }
        best
    }

    /// The lip expert: per-frame decoded phonemes plus the mouth coefficient
    /// targets they imply (full expression vectors, nonzero only on the
    /// mouth block).
    pub fn lip_expert(&self, audio: &AudioFeatures) -> (Vec<usize>, Array2<f64>) {
        let frames = audio.frames();
        let mut phonemes = Vec::with_capacity(frames);
        let mut coeffs = Array2::zeros((frames, EXPR_DIM));
        for t in 0..frames {
            let ph = self.decode_phoneme(audio.data.row(t));
            phonemes.push(ph);
            coeffs.row_mut(t).assign(&self.mouth_shapes.row(ph));
        }
        (phonemes, coeffs)
    }

    /// Generate clip `index` deterministically.
    pub fn clip(&self, index: usize) -> Result<SyntheticClip> {
        let spec = &self.spec;
        let frames = spec.frames_per_clip;
        let fps = spec.fps;
        let dt = 1.0 / fps;
        let clip_seed = derive_seed(spec.seed, &format!("clip.{index}"));

        // Phoneme stream: piecewise-constant segments with occasional rests.
        let mut rng_ph = rng_for(clip_seed, "phonemes");
        let mut phonemes = Vec::with_capacity(frames);
        let mut prev_ph = usize::MAX;
        while phonemes.len() < frames {
            let len = rng_ph.gen_range(4..=12usize);
            let mut ph = if rng_ph.gen::<f64>() < 0.22 {
                0
            } else {
                rng_ph.gen_range(1..spec.phoneme_count)
            };
            if ph == prev_ph {
                ph = if rng_ph.gen::<f64>() < 0.22 {
                    0
                } else {
                    rng_ph.gen_range(1..spec.phoneme_count)
                };
            }
            for _ in 0..len {
                if phonemes.len() < frames {
                    phonemes.push(ph);
                }
            }
            prev_ph = ph;
        }

        // Loudness envelope: per-segment targets (zero at rest), zero-phase
        // smoothed, with a slow multiplicative modulation.
        let mut rng_env = rng_for(clip_seed, "envelope");
        let mut target = vec![0.0; frames];
        let mut t = 0;
        while t < frames {
            let ph = phonemes[t];
            let mut end = t;
            while end < frames && phonemes[end] == ph {
                end += 1;
            }
            let level = if ph == 0 { 0.0 } else { 0.35 + 0.65 * rng_env.gen::<f64>() };
            for item in target.iter_mut().take(end).skip(t) {
                *item = level;
            }
            t = end;
        }
        let alpha = 0.45;
        let mut env = target.clone();
        for t in 1..frames {
            env[t] = alpha * target[t] + (1.0 - alpha) * env[t - 1];
        }
        for t in (0..frames - 1).rev() {
            env[t] = alpha * env[t] + (1.0 - alpha) * env[t + 1];
        }
        let mod_freq = 0.4 + 0.5 * rng_env.gen::<f64>();
        let mod_phase = rng_env.gen::<f64>() * std::f64::consts::TAU;
        for (t, e) in env.iter_mut().enumerate() {
            let m = 1.0 + 0.12 * (std::f64::consts::TAU * mod_freq * t as f64 * dt + mod_phase).sin();
            *e = (*e * m).max(0.0);
        }

        // Audio features.
        let mut rng_a = rng_for(clip_seed, "audio");
        let mut audio = Array2::zeros((frames, spec.audio_dim));
        for t in 0..frames {
            for d in 0..spec.audio_dim {
                audio[[t, d]] =
                    env[t] * self.templates[[phonemes[t], d]] + spec.audio_noise * normal(&mut rng_a);
            }
        }

        // Head pose: critically damped walk, step size modulated by the
        // envelope, regenerated until head speed correlates with loudness.
        let mut rng_p = rng_for(clip_seed, "pose");
        let mut p0 = [0.0; POSE_DIM];
        for (d, v) in p0.iter_mut().enumerate() {
            let half = if d < 3 { 0.12 } else if d < 5 { 0.08 } else { 0.05 };
            *v = (rng_p.gen::<f64>() * 2.0 - 1.0) * half;
        }
        let max_env = env.iter().cloned().fold(1e-6_f64, f64::max);
        let omega = spec.pose_omega;
        let mut residual = Array2::zeros((frames, POSE_DIM));
        let mut accepted = false;
        for _attempt in 0..60 {
            let mut x = [0.0; POSE_DIM];
            let mut v = [0.0; POSE_DIM];
            let mut xs = Array2::zeros((frames, POSE_DIM));
            for t in 1..frames {
                let drive = spec.pose_env_floor
                    + (1.0 - spec.pose_env_floor) * (env[t - 1] / max_env);
                for d in 0..POSE_DIM {
                    v[d] += dt * (-2.0 * omega * v[d] - omega * omega * x[d])
                        + dt.sqrt() * drive * normal(&mut rng_p);
                    x[d] += dt * v[d];
                    xs[[t, d]] = x[d];
                }
            }
            // Rescale each dimension to its target amplitude.
            for d in 0..POSE_DIM {
                let col: Vec<f64> = xs.column(d).to_vec();
                let mean = col.iter().sum::<f64>() / frames as f64;
                let std =
                    (col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / frames as f64).sqrt();
                if std > 1e-9 {
                    let target_scale = if d < 3 {
                        spec.pose_rot_scale
                    } else if d < 5 {
                        spec.pose_trans_scale
                    } else {
                        0.5 * spec.pose_trans_scale
                    };
                    let s = target_scale / std;
                    for t in 0..frames {
                        xs[[t, d]] *= s;
                    }
                }
            }
            let speed: Vec<f64> = (0..frames - 1)
                .map(|t| {
                    (0..POSE_DIM)
                        .map(|d| {
                            let diff = xs[[t + 1, d]] - xs[[t, d]];
                            diff * diff
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            if pearson(&speed, &env[..frames - 1]) >= spec.min_speed_env_corr {
                residual = xs;
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::divergence(format!(
                "clip {index}: pose walk never reached speed/envelope correlation {}",
                spec.min_speed_env_corr
            )));
        }
        let mut pose = Array2::zeros((frames, POSE_DIM));
        for t in 0..frames {
            for d in 0..POSE_DIM {
                pose[[t, d]] = p0[d] + residual[[t, d]];
            }
        }

        // Blinks: downward envelope crossings below a dip threshold trigger
        // a four-frame close-hold-open profile; rare spontaneous blinks and
        // a guaranteed fallback blink keep every clip blinking.
        let mut rng_bl = rng_for(clip_seed, "blinks");
        let mut openness = vec![1.0; frames];
        let dip = quantile(&env, spec.blink_dip_quantile);
        let mut last_start = None::<usize>;
        let apply = |openness: &mut Vec<f64>, start: usize| {
            for (k, m) in BLINK_PROFILE.iter().enumerate() {
                if start + k < frames {
                    openness[start + k] = openness[start + k].min(*m);
                }
            }
        };
        for t in 1..frames.saturating_sub(4) {
            let clear = last_start.map_or(true, |s| t - s >= spec.blink_refractory + 4);
            if !clear {
                continue;
            }
            let crossed = env[t] < dip && env[t - 1] >= dip;
            let triggered = (crossed && rng_bl.gen::<f64>() < spec.blink_trigger_prob)
                || rng_bl.gen::<f64>() < spec.blink_extra_rate;
            if triggered {
                apply(&mut openness, t);
                last_start = Some(t);
            }
        }
        if last_start.is_none() {
            let lo = 2;
            let hi = frames - 5;
            let t_min = (lo..hi).min_by(|&a, &b| env[a].partial_cmp(&env[b]).unwrap()).unwrap();
            apply(&mut openness, t_min);
        }

        // Brows: envelope coupling along a fixed direction plus a slow
        // sinusoid and light per-dimension noise.
        let mut rng_br = rng_for(clip_seed, "brows");
        let sin_freq = 0.15 + 0.3 * rng_br.gen::<f64>();
        let sin_phase = rng_br.gen::<f64>() * std::f64::consts::TAU;
        let theta_n = 2.0_f64;
        let drive_n = spec.brow_noise * (2.0 * theta_n).sqrt();
        let brow_dims = BROW_COEFFS.len();
        let mut brow_noise_state = vec![0.0; brow_dims];
        let mut brows = Array2::zeros((frames, brow_dims));
        for t in 0..frames {
            let sin_val = spec.brow_sin_amp
                * (std::f64::consts::TAU * sin_freq * t as f64 * dt + sin_phase).sin();
            let env_val = spec.brow_env_gain * (env[t] - 0.5);
            for j in 0..brow_dims {
                brow_noise_state[j] += -theta_n * brow_noise_state[j] * dt
                    + drive_n * dt.sqrt() * normal(&mut rng_br);
                brows[[t, j]] = env_val * self.brow_env_dir[j]
                    + sin_val * self.brow_sin_dir[j]
                    + brow_noise_state[j];
            }
        }

        // Gaze: mean-reverting drift toward occasionally resampled targets.
        let mut rng_g = rng_for(clip_seed, "gaze");
        let mut gaze = Array2::zeros((frames, 2));
        let mut g = [0.0; 2];
        let mut mu = [0.0; 2];
        for t in 0..frames {
            if t % spec.gaze_retarget_frames == 0 {
                for m in mu.iter_mut() {
                    *m = (rng_g.gen::<f64>() * 2.0 - 1.0) * 0.3;
                }
            }
            for d in 0..2 {
                g[d] += spec.gaze_pull * (mu[d] - g[d]) * dt
                    + spec.gaze_sigma * dt.sqrt() * normal(&mut rng_g);
                g[d] = g[d].clamp(-spec.gaze_limit, spec.gaze_limit);
                gaze[[t, d]] = g[d];
            }
        }

        // Assemble expression coefficients: piecewise-constant mouth, blink
        // deflection on the eye block, brows added on their block.
        let blink_dir = self.basis.blink_direction();
        let mut expr = Array2::zeros((frames, EXPR_DIM));
        for t in 0..frames {
            expr.row_mut(t).assign(&self.mouth_shapes.row(phonemes[t]));
            let shut_amount = 1.0 - openness[t];
            for c in EYE_COEFFS {
                expr[[t, c]] += shut_amount * blink_dir[c];
            }
            for (j, c) in BROW_COEFFS.enumerate() {
                expr[[t, c]] += brows[[t, j]];
            }
        }

        let identity = self.identity(index);
        let meta = ClipMeta {
            generator_version: GENERATOR_VERSION.to_string(),
            seed: clip_seed,
            fps,
            frames,
            audio_dim: spec.audio_dim,
            identity: identity.to_vec(),
            phonemes,
            envelope: env,
            blink_openness: openness,
        };
        let clip = SyntheticClip {
            meta,
            audio: AudioFeatures::new(fps, audio),
            pose: PoseSequence::new(fps, pose),
            expr: ExpressionSequence::new(fps, expr),
            gaze: GazeSequence::new(fps, gaze),
        };
        clip.validate()?;
        Ok(clip)
    }
}

fn clip_dir_name(index: usize) -> String {
    format!("clip_{index:04}")
}

/// An on-disk dataset: `world.json` plus one directory per clip.
#[derive(Debug)]
pub struct Dataset {
    pub world: World,
    pub root: PathBuf,
    pub clip_dirs: Vec<PathBuf>,
}

impl Dataset {
    /// Generate `spec.num_clips` clips under `root`, writing `world.json`
    /// and the landmark basis spec alongside them.
    pub fn generate(spec: WorldSpec, root: &Path) -> Result<Dataset> {
        let world = World::new(spec)?;
        std::fs::create_dir_all(root)
            .map_err(|e| Error::io(root.display().to_string(), e))?;
        save_json(&root.join("world.json"), &world.spec)?;
        world.basis.save_spec(&root.join("basis.json"))?;
        let mut clip_dirs = Vec::with_capacity(world.spec.num_clips);
        for i in 0..world.spec.num_clips {
            let clip = world.clip(i)?;
            let dir = root.join(clip_dir_name(i));
            clip.save(&dir)?;
            clip_dirs.push(dir);
        }
        Ok(Dataset { world, root: root.to_path_buf(), clip_dirs })
    }

    /// Open an existing dataset directory.
    pub fn open(root: &Path) -> Result<Dataset> {
        let spec: WorldSpec = load_json(&root.join("world.json"))?;
        let world = World::new(spec)?;
        let mut clip_dirs = Vec::new();
        for i in 0..world.spec.num_clips {
            let dir = root.join(clip_dir_name(i));
            if !dir.is_dir() {
                return Err(Error::missing(format!(
                    "dataset at {} is missing {}",
                    root.display(),
                    dir.display()
                )));
            }
            clip_dirs.push(dir);
        }
        Ok(Dataset { world, root: root.to_path_buf(), clip_dirs })
    }

    pub fn len(&self) -> usize {
        self.clip_dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip_dirs.is_empty()
    }

    pub fn load_clip(&self, index: usize) -> Result<SyntheticClip> {
        SyntheticClip::load(&self.clip_dirs[index])
    }

    pub fn load_all(&self) -> Result<Vec<SyntheticClip>> {
        (0..self.len()).map(|i| self.load_clip(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::pearson;
    use crate::tensor::check::assert_close;

    fn small_spec() -> WorldSpec {
        WorldSpec { frames_per_clip: 120, num_clips: 4, ..WorldSpec::default() }
    }

    #[test]
    fn world_and_clips_are_seed_deterministic() {
        let a = World::new(small_spec()).unwrap();
        let b = World::new(small_spec()).unwrap();
        assert_eq!(a.templates, b.templates);
        assert_eq!(a.mouth_shapes, b.mouth_shapes);
        assert_eq!(a.identities, b.identities);
        let ca = a.clip(3).unwrap();
        let cb = b.clip(3).unwrap();
        assert_eq!(ca.audio.data, cb.audio.data);
        assert_eq!(ca.pose.data, cb.pose.data);
        assert_eq!(ca.expr.data, cb.expr.data);
        assert_eq!(ca.gaze.data, cb.gaze.data);
        assert_eq!(ca.meta, cb.meta);
    }

    #[test]
    fn templates_are_orthonormal_and_silence_row_is_zero() {
        let w = World::new(small_spec()).unwrap();
        let p = w.spec.phoneme_count;
        assert!(w.templates.row(0).iter().all(|&x| x == 0.0));
        for i in 1..p {
            for j in 1..p {
                let dot = w.templates.row(i).dot(&w.templates.row(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_close(dot, expect, 1e-10, "template gram");
            }
        }
    }

    #[test]
    fn decoder_inverts_clean_audio_and_tolerates_noise() {
        let w = World::new(small_spec()).unwrap();
        let clip = w.clip(0).unwrap();
        let mut speech_frames = 0;
        let mut noisy_hits = 0;
        for t in 0..clip.frames() {
            let ph = clip.meta.phonemes[t];
            let env = clip.meta.envelope[t];
            if env >= 1.5 * w.spec.silence_threshold && ph != 0 {
                speech_frames += 1;
                let clean = w.templates.row(ph).mapv(|x| x * env);
                assert_eq!(w.decode_phoneme(clean.view()), ph, "clean decode at frame {t}");
                if w.decode_phoneme(clip.audio.data.row(t)) == ph {
                    noisy_hits += 1;
                }
            }
        }
        assert!(speech_frames > 30, "test clip needs speech, got {speech_frames} frames");
        let acc = noisy_hits as f64 / speech_frames as f64;
        assert!(acc >= 0.98, "noisy decode accuracy {acc}");
    }

    #[test]
    fn silence_decodes_to_rest_phoneme() {
        let w = World::new(small_spec()).unwrap();
        let quiet = Array1::from_elem(w.spec.audio_dim, 0.01);
        assert_eq!(w.decode_phoneme(quiet.view()), 0);
    }

    #[test]
    fn lip_expert_matches_mouth_block_whenever_decode_agrees() {
        let w = World::new(small_spec()).unwrap();
        let clip = w.clip(1).unwrap();
        let (decoded, targets) = w.lip_expert(&clip.audio);
        let mut agree = 0;
        for t in 0..clip.frames() {
            if decoded[t] == clip.meta.phonemes[t] {
                agree += 1;
                for c in 0..32 {
                    assert_eq!(targets[[t, c]], clip.expr.data[[t, c]], "frame {t} coeff {c}");
                }
            }
            for c in 32..EXPR_DIM {
                assert_eq!(targets[[t, c]], 0.0, "expert must not touch non-mouth coeffs");
            }
        }
        let rate = agree as f64 / clip.frames() as f64;
        assert!(rate >= 0.85, "decode agreement with ground truth {rate}");
    }

    #[test]
    fn head_speed_correlates_with_envelope() {
        let w = World::new(small_spec()).unwrap();
        for i in 0..4 {
            let clip = w.clip(i).unwrap();
            let corr = crate::metrics::envelope_speed_correlation(&clip.pose, &clip.meta.envelope);
            assert!(
                corr >= w.spec.min_speed_env_corr - 1e-9,
                "clip {i} speed/env correlation {corr}"
            );
        }
    }

    #[test]
    fn residual_pose_starts_at_zero() {
        let w = World::new(small_spec()).unwrap();
        let clip = w.clip(2).unwrap();
        // frame 0 holds the base pose: residuals are measured against it
        let p0 = clip.pose.data.row(0);
        for d in 0..POSE_DIM {
            assert!(p0[d].abs() <= 0.12 + 1e-12);
        }
    }

    #[test]
    fn every_clip_blinks_and_blinks_prefer_quiet_frames() {
        let w = World::new(WorldSpec { num_clips: 10, ..small_spec() }).unwrap();
        let mut blink_env = Vec::new();
        let mut all_env = Vec::new();
        for i in 0..10 {
            let clip = w.clip(i).unwrap();
            let o = &clip.meta.blink_openness;
            let mut starts = Vec::new();
            for t in 1..clip.frames() {
                if o[t] < 1.0 && o[t - 1] >= 1.0 {
                    starts.push(t);
                }
            }
            assert!(!starts.is_empty(), "clip {i} never blinks");
            for &s in &starts {
                blink_env.push(clip.meta.envelope[s]);
            }
            all_env.extend_from_slice(&clip.meta.envelope);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&blink_env) < mean(&all_env),
            "blinks should cluster at envelope dips: {} vs {}",
            mean(&blink_env),
            mean(&all_env)
        );
    }

    #[test]
    fn eye_block_is_exactly_scaled_blink_direction() {
        let w = World::new(small_spec()).unwrap();
        let clip = w.clip(0).unwrap();
        let dir = w.basis.blink_direction();
        for t in 0..clip.frames() {
            let s = 1.0 - clip.meta.blink_openness[t];
            for c in EYE_COEFFS {
                assert_eq!(clip.expr.data[[t, c]], s * dir[c], "frame {t} coeff {c}");
            }
        }
    }

    #[test]
    fn brow_envelope_component_is_recoverable() {
        let w = World::new(small_spec()).unwrap();
        let mut corrs = Vec::new();
        for i in 0..4 {
            let clip = w.clip(i).unwrap();
            let proj: Vec<f64> = (0..clip.frames())
                .map(|t| {
                    (0..BROW_COEFFS.len())
                        .map(|j| clip.expr.data[[t, 48 + j]] * w.brow_env_dir[j])
                        .sum()
                })
                .collect();
            corrs.push(pearson(&proj, &clip.meta.envelope));
        }
        let mean = corrs.iter().sum::<f64>() / corrs.len() as f64;
        assert!(mean > 0.45, "mean brow/envelope correlation {mean} ({corrs:?})");
    }

    #[test]
    fn gaze_stays_bounded_and_moves_slowly() {
        let w = World::new(small_spec()).unwrap();
        for i in 0..4 {
            let clip = w.clip(i).unwrap();
            let g = &clip.gaze.data;
            let mut total_step = 0.0;
            for t in 0..clip.frames() {
                assert!(g[[t, 0]].abs() <= w.spec.gaze_limit + 1e-12);
                assert!(g[[t, 1]].abs() <= w.spec.gaze_limit + 1e-12);
                if t > 0 {
                    total_step += (g[[t, 0]] - g[[t - 1, 0]]).abs().max(
                        (g[[t, 1]] - g[[t - 1, 1]]).abs(),
                    );
                }
            }
            let mean_step = total_step / (clip.frames() - 1) as f64;
            assert!(mean_step < 0.05, "gaze should drift slowly, mean step {mean_step}");
        }
    }

    #[test]
    fn clip_roundtrip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let w = World::new(small_spec()).unwrap();
        let clip = w.clip(0).unwrap();
        clip.save(dir.path()).unwrap();
        let back = SyntheticClip::load(dir.path()).unwrap();
        assert_eq!(back.meta, clip.meta);
        assert_eq!(back.audio.data, clip.audio.data);
        assert_eq!(back.pose.data, clip.pose.data);
        assert_eq!(back.expr.data, clip.expr.data);
        assert_eq!(back.gaze.data, clip.gaze.data);
    }

    #[test]
    fn dataset_generate_and_open_agree() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let ds = Dataset::generate(spec.clone(), dir.path()).unwrap();
        assert_eq!(ds.len(), 4);
        let reopened = Dataset::open(dir.path()).unwrap();
        assert_eq!(reopened.len(), 4);
        let fresh = reopened.world.clip(2).unwrap();
        let loaded = reopened.load_clip(2).unwrap();
        assert_eq!(fresh.pose.data, loaded.pose.data);
        assert_eq!(fresh.expr.data, loaded.expr.data);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = WorldSpec { phoneme_count: 20, audio_dim: 8, ..WorldSpec::default() };
        assert!(World::new(bad).is_err());
        let bad = WorldSpec { gaze_limit: 0.7, ..WorldSpec::default() };
        assert!(World::new(bad).is_err());
        let bad = WorldSpec { frames_per_clip: 5, ..WorldSpec::default() };
        assert!(World::new(bad).is_err());
    }

    #[test]
    fn identities_cycle_and_stay_clipped() {
        let w = World::new(small_spec()).unwrap();
        assert_eq!(w.identity(0), w.identity(w.spec.num_identities));
        for v in w.identities.iter() {
            assert!(v.abs() <= 1.5);
        }
    }
}
