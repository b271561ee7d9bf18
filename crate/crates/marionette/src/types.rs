//! Core motion/data types and their on-disk formats.
//!
//! All per-frame streams share one CSV convention: a header `t,<prefix>0,..`
//! followed by one row per frame, UTF-8 with LF line endings, and floats
//! written with Rust's `Display` (shortest representation that parses back
//! to the identical bit pattern, so files round-trip exactly). Clip-level
//! scalars and ground truth live in a JSON sidecar ([`ClipMeta`]).

use crate::{Error, Result};
use ndarray::{Array1, Array2};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Head pose dimensions: `(r_x, r_y, r_z, t_x, t_y, t_z)`.
pub const POSE_DIM: usize = 6;
/// Expression coefficient count (mouth 0..32, eyes 32..48, brows 48..64).
pub const EXPR_DIM: usize = 64;
/// Handcrafted eye-motion feature size: blink ratio + 10 brow landmarks x 2.
pub const EYE_FEATURE_DIM: usize = 21;
/// Gaze is (yaw, pitch) as fractions of pi.
pub const GAZE_DIM: usize = 2;
/// Landmarks per face.
pub const LANDMARK_COUNT: usize = 68;
/// Default audio feature width.
pub const DEFAULT_AUDIO_DIM: usize = 16;
/// Rendered frame side length.
pub const IMAGE_SIZE: usize = 64;
/// Identity vector width for the toy face.
pub const IDENTITY_DIM: usize = 8;

/// Version stamp written into metadata sidecars.
pub const GENERATOR_VERSION: &str = env!("CARGO_PKG_VERSION");

// ----- file helpers -----

/// Read a file, mapping "not found" to a missing-prerequisite error (exit
/// code 3) and anything else to an I/O error.
pub fn read_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::missing(format!("{} does not exist", path.display()))
        } else {
            Error::io(path, e)
        }
    })
}

pub fn write_string(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_string(path, &s)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = read_string(path)?;
    serde_json::from_str(&s)
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

// ----- generic frame-indexed CSV -----

/// Write a `(frames, cols)` matrix as `t,<prefix>0,..,<prefix>{cols-1}`.
pub fn write_matrix_csv(path: &Path, prefix: &str, data: &Array2<f64>) -> Result<()> {
    if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
        return Err(Error::validation(format!(
            "refusing to write non-finite value {bad} to {}",
            path.display()
        )));
    }
    let cols = data.ncols();
    let mut s = String::with_capacity(data.len() * 20);
    s.push('t');
    for i in 0..cols {
        let _ = write!(s, ",{prefix}{i}");
    }
    s.push('\n');
    for (t, row) in data.rows().into_iter().enumerate() {
        let _ = write!(s, "{t}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    write_string(path, &s)
}

/// Read a frame-indexed CSV written by [`write_matrix_csv`]. The header must
/// carry the expected prefix; the frame column must count 0,1,2,..
pub fn read_matrix_csv(path: &Path, prefix: &str) -> Result<Array2<f64>> {
    let text = read_string(path)?;
    let bad = |msg: String| Error::validation(format!("{}: {msg}", path.display()));
    let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let mut fields = header.split(',');
    if fields.next() != Some("t") {
        return Err(bad("first header field must be 't'".into()));
    }
    let mut cols = 0usize;
    for f in fields {
        let expect = format!("{prefix}{cols}");
        if f != expect {
            return Err(bad(format!("header field {cols} is '{f}', expected '{expect}'")));
        }
        cols += 1;
    }
    if cols == 0 {
        return Err(bad(format!("no '{prefix}*' columns in header")));
    }
    let mut values = Vec::new();
    let mut rows = 0usize;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let t_field = fields.next().unwrap();
        let t: usize = t_field
            .parse()
            .map_err(|_| bad(format!("row {rows}: bad frame index '{t_field}'")))?;
        if t != rows {
            return Err(bad(format!("row {rows}: frame index {t} out of order")));
        }
        let mut n = 0usize;
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| bad(format!("row {rows}: unparseable value '{f}'")))?;
            values.push(v);
            n += 1;
        }
        if n != cols {
            return Err(bad(format!("row {rows}: {n} values, expected {cols}")));
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| bad(format!("shape error: {e}")))
}

// ----- validation plumbing -----

fn check_sequence(
    what: &str,
    data: &Array2<f64>,
    expect_cols: Option<usize>,
    fps: f64,
    problems: &mut Vec<String>,
) {
    if let Some(c) = expect_cols {
        if data.ncols() != c {
            problems.push(format!("{what}: {} columns, expected {c}", data.ncols()));
        }
    }
    if !(fps.is_finite() && fps > 0.0) {
        problems.push(format!("{what}: fps must be positive, got {fps}"));
    }
    if data.iter().any(|v| !v.is_finite()) {
        problems.push(format!("{what}: contains non-finite values"));
    }
}

fn finish_validation(problems: Vec<String>) -> Result<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(problems.join("; ")))
    }
}

// ----- sequence types -----

/// Rigid head pose per frame: `(frames, 6)` of
/// `(r_x, r_y, r_z, t_x, t_y, t_z)` — radians and scene units.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub fps: f64,
    pub data: Array2<f64>,
}

impl PoseSequence {
    pub const PREFIX: &'static str = "p";

    pub fn new(fps: f64, data: Array2<f64>) -> Self {
        Self { fps, data }
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        check_sequence("pose", &self.data, Some(POSE_DIM), self.fps, &mut problems);
        finish_validation(problems)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(path, Self::PREFIX, &self.data)
    }

    pub fn load_csv(path: &Path, fps: f64) -> Result<Self> {
        let data = read_matrix_csv(path, Self::PREFIX)?;
        let s = Self { fps, data };
        s.validate()?;
        Ok(s)
    }
}

/// Expression coefficients per frame: `(frames, 64)` over the deformation
/// basis (see the landmark module for the region layout).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionSequence {
    pub fps: f64,
    pub data: Array2<f64>,
}

impl ExpressionSequence {
    pub const PREFIX: &'static str = "e";

    pub fn new(fps: f64, data: Array2<f64>) -> Self {
        Self { fps, data }
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        check_sequence("expression", &self.data, Some(EXPR_DIM), self.fps, &mut problems);
        finish_validation(problems)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(path, Self::PREFIX, &self.data)
    }

    pub fn load_csv(path: &Path, fps: f64) -> Result<Self> {
        let data = read_matrix_csv(path, Self::PREFIX)?;
        let s = Self { fps, data };
        s.validate()?;
        Ok(s)
    }
}

/// Per-frame audio feature vectors: `(frames, audio_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatures {
    pub fps: f64,
    pub data: Array2<f64>,
}

impl AudioFeatures {
    pub const PREFIX: &'static str = "a";

    pub fn new(fps: f64, data: Array2<f64>) -> Self {
        Self { fps, data }
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        check_sequence("audio", &self.data, None, self.fps, &mut problems);
        if self.data.ncols() == 0 {
            problems.push("audio: zero-width features".into());
        }
        finish_validation(problems)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(path, Self::PREFIX, &self.data)
    }

    pub fn load_csv(path: &Path, fps: f64) -> Result<Self> {
        let data = read_matrix_csv(path, Self::PREFIX)?;
        let s = Self { fps, data };
        s.validate()?;
        Ok(s)
    }
}

/// Handcrafted eye-motion features per frame: `(frames, 21)` —
/// column 0 is the blink ratio, columns 1..21 are the 10 brow-landmark
/// planar displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct EyeFeatureSequence {
    pub fps: f64,
    pub data: Array2<f64>,
}

impl EyeFeatureSequence {
    pub const PREFIX: &'static str = "f";

    pub fn new(fps: f64, data: Array2<f64>) -> Self {
        Self { fps, data }
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        check_sequence("eye-feature", &self.data, Some(EYE_FEATURE_DIM), self.fps, &mut problems);
        finish_validation(problems)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(path, Self::PREFIX, &self.data)
    }

    pub fn load_csv(path: &Path, fps: f64) -> Result<Self> {
        let data = read_matrix_csv(path, Self::PREFIX)?;
        let s = Self { fps, data };
        s.validate()?;
        Ok(s)
    }
}

/// Gaze (yaw, pitch) per frame, stored as fractions of pi in [-0.5, 0.5].
#[derive(Debug, Clone, PartialEq)]
pub struct GazeSequence {
    pub fps: f64,
    pub data: Array2<f64>,
}

impl GazeSequence {
    pub const PREFIX: &'static str = "g";

    pub fn new(fps: f64, data: Array2<f64>) -> Self {
        Self { fps, data }
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn direction(&self, frame: usize) -> GazeDirection {
        GazeDirection { yaw: self.data[[frame, 0]], pitch: self.data[[frame, 1]] }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        check_sequence("gaze", &self.data, Some(GAZE_DIM), self.fps, &mut problems);
        if self.data.iter().any(|v| v.abs() > 0.5) {
            problems.push("gaze: fraction-of-pi values must stay within [-0.5, 0.5]".into());
        }
        finish_validation(problems)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(path, Self::PREFIX, &self.data)
    }

    pub fn load_csv(path: &Path, fps: f64) -> Result<Self> {
        let data = read_matrix_csv(path, Self::PREFIX)?;
        let s = Self { fps, data };
        s.validate()?;
        Ok(s)
    }
}

/// One gaze direction. Yaw/pitch are fractions of pi; converted to radians
/// only at the rendering/animation boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeDirection {
    pub yaw: f64,
    pub pitch: f64,
}

impl GazeDirection {
    pub fn new(yaw: f64, pitch: f64) -> Self {
        Self { yaw, pitch }
    }

    pub fn yaw_radians(&self) -> f64 {
        self.yaw * std::f64::consts::PI
    }

    pub fn pitch_radians(&self) -> f64 {
        self.pitch * std::f64::consts::PI
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.yaw.is_finite() && self.pitch.is_finite()) {
            return Err(Error::validation("gaze direction must be finite"));
        }
        if self.yaw.abs() > 0.5 || self.pitch.abs() > 0.5 {
            return Err(Error::validation(format!(
                "gaze ({}, {}) outside [-0.5, 0.5] (fractions of pi)",
                self.yaw, self.pitch
            )));
        }
        Ok(())
    }
}

/// 68 named 3-D points in face space: `(68, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Array2<f64>,
}

impl LandmarkSet {
    pub fn new(points: Array2<f64>) -> Self {
        Self { points }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.points.nrows() != LANDMARK_COUNT || self.points.ncols() != 3 {
            problems.push(format!(
                "landmarks: shape ({}, {}), expected ({LANDMARK_COUNT}, 3)",
                self.points.nrows(),
                self.points.ncols()
            ));
        }
        if self.points.iter().any(|v| !v.is_finite()) {
            problems.push("landmarks: contains non-finite values".into());
        }
        finish_validation(problems)
    }
}

/// A point in the animator's latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z: Array1<f64>,
}

impl LatentCode {
    pub fn new(z: Array1<f64>) -> Self {
        Self { z }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// A square grayscale frame with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    pub pixels: Array2<f64>,
}

impl FrameImage {
    pub fn new(pixels: Array2<f64>) -> Self {
        Self { pixels }
    }

    pub fn side(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.pixels.nrows() != self.pixels.ncols() {
            problems.push(format!(
                "frame: {}x{} is not square",
                self.pixels.nrows(),
                self.pixels.ncols()
            ));
        }
        if self.pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            problems.push("frame: intensities must lie in [0, 1]".into());
        }
        finish_validation(problems)
    }

    /// Quantize to 8-bit grayscale and write a PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let (h, w) = self.pixels.dim();
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for ((y, x), &v) in self.pixels.indexed_iter() {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([g]));
        }
        img.save(path)
            .map_err(|e| Error::validation(format!("saving {}: {e}", path.display())))
    }
}

// ----- clip metadata sidecar -----

/// Ground truth and provenance for one synthetic clip, stored as
/// `meta.json` next to the stream CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipMeta {
    pub generator_version: String,
    pub seed: u64,
    pub fps: f64,
    pub frames: usize,
    pub audio_dim: usize,
    /// Toy face shape parameters for this clip's subject.
    pub identity: Vec<f64>,
    /// Ground-truth phoneme id per frame.
    pub phonemes: Vec<usize>,
    /// Ground-truth loudness envelope per frame.
    pub envelope: Vec<f64>,
    /// Ground-truth eyelid openness per frame (1 = open, 0 = shut).
    pub blink_openness: Vec<f64>,
}

impl ClipMeta {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.fps.is_finite() && self.fps > 0.0) {
            problems.push(format!("meta: fps must be positive, got {}", self.fps));
        }
        if self.identity.len() != IDENTITY_DIM {
            problems.push(format!(
                "meta: identity has {} entries, expected {IDENTITY_DIM}",
                self.identity.len()
            ));
        }
        for (name, len) in [
            ("phonemes", self.phonemes.len()),
            ("envelope", self.envelope.len()),
            ("blink_openness", self.blink_openness.len()),
        ] {
            if len != self.frames {
                problems.push(format!("meta: {name} has {len} entries for {} frames", self.frames));
            }
        }
        if self.envelope.iter().any(|v| !v.is_finite() || *v < 0.0) {
            problems.push("meta: envelope must be finite and non-negative".into());
        }
        if self.blink_openness.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            problems.push("meta: blink openness must lie in [0, 1]".into());
        }
        finish_validation(problems)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn csv_round_trips_tricky_floats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let data = array![
            [0.1, 1.0 / 3.0, -0.0],
            [1e-15, 123456.789, f64::MIN_POSITIVE],
            [5e-324, -1.0, f64::MAX],
        ];
        write_matrix_csv(&path, "x", &data).unwrap();
        let back = read_matrix_csv(&path, "x").unwrap();
        assert_eq!(back.shape(), data.shape());
        for (a, b) in data.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "{a} vs {b}");
        }
    }

    #[test]
    fn csv_uses_lf_and_expected_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let seq = PoseSequence::new(25.0, Array2::zeros((2, POSE_DIM)));
        seq.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,p0,p1,p2,p3,p4,p5\n"));
        assert!(!text.contains('\r'));
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn csv_read_rejects_malformed_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");

        std::fs::write(&path, "t,q0,q1\n0,1,2\n").unwrap();
        assert!(matches!(read_matrix_csv(&path, "p"), Err(Error::Validation(_))));

        std::fs::write(&path, "t,p0\n1,0.5\n").unwrap();
        let err = read_matrix_csv(&path, "p").unwrap_err();
        assert!(err.to_string().contains("out of order"), "{err}");

        std::fs::write(&path, "t,p0\n0,zebra\n").unwrap();
        assert!(matches!(read_matrix_csv(&path, "p"), Err(Error::Validation(_))));

        std::fs::write(&path, "t,p0\n0,1.0,2.0\n").unwrap();
        assert!(matches!(read_matrix_csv(&path, "p"), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_file_maps_to_missing_prerequisite() {
        let err = read_matrix_csv(Path::new("/definitely/not/here.csv"), "p").unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn non_finite_values_are_rejected_on_write_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = Array2::zeros((2, POSE_DIM));
        data[[1, 3]] = f64::NAN;
        let seq = PoseSequence::new(25.0, data);
        assert!(seq.validate().is_err());
        assert!(seq.save_csv(&dir.path().join("p.csv")).is_err());
    }

    #[test]
    fn gaze_range_is_enforced() {
        let ok = GazeSequence::new(25.0, Array2::from_elem((3, 2), 0.5));
        ok.validate().unwrap();
        let bad = GazeSequence::new(25.0, Array2::from_elem((3, 2), 0.51));
        assert!(bad.validate().is_err());
        assert!(GazeDirection::new(0.3, -0.2).validate().is_ok());
        assert!(GazeDirection::new(0.6, 0.0).validate().is_err());
        crate::tensor::check::assert_close(
            GazeDirection::new(0.5, 0.0).yaw_radians(),
            std::f64::consts::FRAC_PI_2,
            1e-15,
            "yaw radians",
        );
    }

    #[test]
    fn meta_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.json");
        let meta = ClipMeta {
            generator_version: GENERATOR_VERSION.to_string(),
            seed: 77,
            fps: 25.0,
            frames: 3,
            audio_dim: 16,
            identity: vec![0.0; IDENTITY_DIM],
            phonemes: vec![0, 2, 1],
            envelope: vec![0.1, 0.9, 0.5],
            blink_openness: vec![1.0, 1.0, 0.25],
        };
        meta.validate().unwrap();
        save_json(&path, &meta).unwrap();
        let back: ClipMeta = load_json(&path).unwrap();
        assert_eq!(back, meta);

        let mut broken = meta.clone();
        broken.phonemes.pop();
        assert!(broken.validate().is_err());
    }

    #[test]
    fn frame_image_validation_and_png() {
        let dir = tempfile::tempdir().unwrap();
        let img = FrameImage::new(Array2::from_shape_fn((8, 8), |(y, x)| {
            ((x + y) as f64 / 14.0).clamp(0.0, 1.0)
        }));
        img.validate().unwrap();
        let path = dir.path().join("f.png");
        img.save_png(&path).unwrap();
        assert!(path.exists());
        let bad = FrameImage::new(Array2::from_elem((4, 4), 1.5));
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trips_random_matrices(
            rows in 1usize..6,
            cols in 1usize..5,
            scale in prop::sample::select(vec![1e-12f64, 1.0, 1e6]),
            raw in prop::collection::vec(-1.0f64..1.0, 30),
        ) {
            let data = Array2::from_shape_fn((rows, cols), |(r, c)| raw[(r * cols + c) % raw.len()] * scale);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.csv");
            write_matrix_csv(&path, "v", &data).unwrap();
            let back = read_matrix_csv(&path, "v").unwrap();
            prop_assert_eq!(back.shape(), data.shape());
            for (a, b) in data.iter().zip(back.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
