//! Synthetic 68-landmark face geometry: a fixed mean face, a seeded
//! orthonormal deformation basis with region-local support, and the
//! handcrafted eye-motion features computed on top of it.
//!
//! Landmark semantics follow the usual 68-point convention (y up, z toward
//! the viewer): 0-16 jaw, 17-26 brows, 27-35 nose, 36-47 eyes, 48-67 lips
//! with 60-63 the inner upper arc and 64-67 the inner lower arc, so all four
//! inner-lip pairs are vertical and collapse when the mouth closes.
//!
//! The 64 expression coefficients split into three blocks with disjoint
//! landmark support: 0..32 mouth (jaw 3-14 plus lips 48-67), 32..48 eyes
//! (36-47), 48..64 brows (17-26). Each block is drawn from a seeded RNG on
//! its support and orthonormalized, so the full basis is orthonormal and a
//! coefficient never moves a landmark outside its region.
//!
//! Two distinguished coefficient directions are solved for exactly:
//! [`LandmarkBasis::blink_direction`] closes the four eyelid gaps linearly
//! (scale `s` leaves gaps at `(1-s)` of rest, hitting zero at `s = 1`), and
//! [`LandmarkBasis::mouth_shut_direction`] does the same for the inner-lip
//! pairs. Both are min-norm solutions of a 4-equation linear system, which
//! is what makes the blink-ratio oracle exact instead of approximate.

use crate::types::{
    EyeFeatureSequence, ExpressionSequence, LandmarkSet, EXPR_DIM, EYE_FEATURE_DIM, LANDMARK_COUNT,
};
use crate::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::path::Path;

pub const MOUTH_COEFFS: Range<usize> = 0..32;
pub const EYE_COEFFS: Range<usize> = 32..48;
pub const BROW_COEFFS: Range<usize> = 48..64;

/// The 32 landmarks moved by mouth coefficients (and scored by the
/// mouth-landmark distance): jaw 3-14 and all lip points.
pub const MOUTH_LANDMARKS: [usize; 32] = [
    3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 48, 49, 50, 51, 52, 53, 54, 55, 56, 57, 58, 59, 60,
    61, 62, 63, 64, 65, 66, 67,
];
pub const EYE_LANDMARKS: Range<usize> = 36..48;
pub const BROW_LANDMARKS: Range<usize> = 17..27;

/// Upper/lower eyelid landmark pairs whose vertical gaps define the blink
/// ratio.
pub const EYELID_PAIRS: [(usize, usize); 4] = [(37, 41), (38, 40), (43, 47), (44, 46)];
/// Upper/lower inner-lip pairs that collapse when the mouth shuts.
pub const INNER_LIP_PAIRS: [(usize, usize); 4] = [(60, 64), (61, 65), (62, 66), (63, 67)];

const FLAT_DIM: usize = LANDMARK_COUNT * 3;
pub const BASIS_FORMAT_VERSION: u32 = 1;

/// Everything needed to rebuild a basis bit-for-bit. This is what gets
/// persisted — raw basis floats are never written to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub seed: u64,
    pub format_version: u32,
}

impl BasisSpec {
    pub fn new(seed: u64) -> Self {
        BasisSpec { seed, format_version: BASIS_FORMAT_VERSION }
    }
}

/// Mean face plus orthonormal region-local deformation basis.
#[derive(Debug, Clone)]
pub struct LandmarkBasis {
    spec: BasisSpec,
    mean: Array2<f64>,      // (68, 3)
    mean_flat: Array1<f64>, // (204,)
    basis: Array2<f64>,     // (204, 64), orthonormal columns
    blink_direction: Array1<f64>,
    mouth_shut_direction: Array1<f64>,
}

/// In-place modified Gram-Schmidt with reorthogonalization (two projection
/// passes per column). Panics on rank deficiency.
pub fn orthonormalize_columns(m: &mut Array2<f64>) {
    let n = m.ncols();
    for j in 0..n {
        for _pass in 0..2 {
            for i in 0..j {
                let qi = m.column(i).to_owned();
                let r = m.column(j).dot(&qi);
                m.column_mut(j).scaled_add(-r, &qi);
            }
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        assert!(norm > 1e-12, "orthonormalize: column {j} is rank deficient");
        m.column_mut(j).mapv_inplace(|x| x / norm);
    }
}

/// Max deviation of the columns' Gram matrix from the identity.
pub fn orthonormality_error(m: &Array2<f64>) -> f64 {
    let gram = m.t().dot(m);
    let n = gram.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[[i, j]] - target).abs());
        }
    }
    worst
}

/// Gaussian elimination with partial pivoting for small dense systems.
fn solve_dense(mut a: Array2<f64>, mut b: Array1<f64>) -> Array1<f64> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n);
    assert_eq!(b.len(), n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().partial_cmp(&a[[j, col]].abs()).unwrap())
            .unwrap();
        if pivot != col {
            for k in 0..n {
                let tmp = a[[col, k]];
                a[[col, k]] = a[[pivot, k]];
                a[[pivot, k]] = tmp;
            }
            b.swap(col, pivot);
        }
        let p = a[[col, col]];
        assert!(p.abs() > 1e-14, "solve_dense: singular system");
        for row in col + 1..n {
            let f = a[[row, col]] / p;
            for k in col..n {
                a[[row, k]] -= f * a[[col, k]];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[[row, k]] * x[k];
        }
        x[row] = acc / a[[row, row]];
    }
    x
}

/// Min-norm solution of the underdetermined system `G v = b`
/// (`G` must have full row rank): `v = G^T (G G^T)^{-1} b`.
fn min_norm_solve(g: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let gram = g.dot(&g.t());
    let w = solve_dense(gram, b.clone());
    g.t().dot(&w)
}

/// The canonical mean face (68 x 3).
pub fn mean_face() -> Array2<f64> {
    use std::f64::consts::PI;
    let mut m = Array2::zeros((LANDMARK_COUNT, 3));
    let mut set = |i: usize, x: f64, y: f64, z: f64| {
        m[[i, 0]] = x;
        m[[i, 1]] = y;
        m[[i, 2]] = z;
    };
    // jaw contour: half-ellipse from left temple through the chin
    for i in 0..17 {
        let th = PI + PI * i as f64 / 16.0;
        set(i, 0.95 * th.cos(), 0.1 + 1.05 * th.sin(), -0.15);
    }
    // brows (right 17-21, left 22-26), gently arched
    for k in 0..5 {
        let arch = 0.52 + 0.08 * (PI * k as f64 / 4.0).sin();
        set(17 + k, -0.62 + 0.11 * k as f64, arch, 0.1);
        set(22 + k, 0.18 + 0.11 * k as f64, arch, 0.1);
    }
    // nose bridge 27-30 and base 31-35
    for k in 0..4 {
        set(27 + k, 0.0, 0.45 - 0.13 * k as f64, 0.12 + 0.06 * k as f64);
    }
    for k in 0..5 {
        set(31 + k, -0.16 + 0.08 * k as f64, -0.06 - 0.02 * (PI * k as f64 / 4.0).sin(), 0.2);
    }
    // right eye hexagon 36-41 (36 outer corner, 37-38 upper lid, 39 inner,
    // 40-41 lower lid); vertical lid gap 0.06 at rest
    set(36, -0.58, 0.32, 0.05);
    set(37, -0.47, 0.35, 0.05);
    set(38, -0.33, 0.35, 0.05);
    set(39, -0.22, 0.32, 0.05);
    set(40, -0.33, 0.29, 0.05);
    set(41, -0.47, 0.29, 0.05);
    // left eye hexagon 42-47 (42 inner corner, 43-44 upper lid, 45 outer,
    // 46-47 lower lid)
    set(42, 0.22, 0.32, 0.05);
    set(43, 0.33, 0.35, 0.05);
    set(44, 0.47, 0.35, 0.05);
    set(45, 0.58, 0.32, 0.05);
    set(46, 0.47, 0.29, 0.05);
    set(47, 0.33, 0.29, 0.05);
    // outer lip ellipse 48-59, corners at 48 and 54
    for (k, deg) in [180.0f64, 150.0, 120.0, 90.0, 60.0, 30.0, 0.0, -30.0, -60.0, -90.0, -120.0, -150.0]
        .into_iter()
        .enumerate()
    {
        let th = deg * PI / 180.0;
        set(48 + k, 0.42 * th.cos(), -0.42 + 0.18 * th.sin(), 0.12);
    }
    // inner lip: upper arc 60-63, lower arc 64-67
    set(60, -0.28, -0.40, 0.12);
    set(61, -0.10, -0.38, 0.12);
    set(62, 0.10, -0.38, 0.12);
    set(63, 0.28, -0.40, 0.12);
    set(64, -0.28, -0.46, 0.12);
    set(65, -0.10, -0.48, 0.12);
    set(66, 0.10, -0.48, 0.12);
    set(67, 0.28, -0.46, 0.12);
    m
}

/// Vertical gaps (upper y minus lower y) for a set of landmark pairs.
fn vertical_gaps(points: &Array2<f64>, pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs.iter().map(|&(p, q)| (points[[p, 1]] - points[[q, 1]]).abs()).collect()
}

impl LandmarkBasis {
    pub fn new(seed: u64) -> Self {
        Self::from_spec(&BasisSpec::new(seed)).expect("fresh spec is always valid")
    }

    pub fn from_spec(spec: &BasisSpec) -> Result<Self> {
        if spec.format_version != BASIS_FORMAT_VERSION {
            return Err(Error::missing(format!(
                "basis spec format {} != supported {BASIS_FORMAT_VERSION}; regenerate the dataset",
                spec.format_version
            )));
        }
        let mean = mean_face();
        let mean_flat = Array1::from_iter(mean.iter().copied());

        let mut basis = Array2::zeros((FLAT_DIM, EXPR_DIM));
        let regions: [(&str, Vec<usize>, Range<usize>); 3] = [
            ("mouth", MOUTH_LANDMARKS.to_vec(), MOUTH_COEFFS),
            ("eyes", EYE_LANDMARKS.collect(), EYE_COEFFS),
            ("brows", BROW_LANDMARKS.collect(), BROW_COEFFS),
        ];
        for (label, landmarks, cols) in &regions {
            let mut rng = crate::rng::rng_for(spec.seed, &format!("basis.{label}"));
            for c in cols.clone() {
                for &li in landmarks {
                    for d in 0..3 {
                        basis[[li * 3 + d, c]] = crate::rng::normal(&mut rng);
                    }
                }
            }
        }
        // Disjoint supports keep cross-region dot products exactly zero, so
        // orthonormalizing the whole matrix both orthonormalizes each block
        // and preserves the zero pattern.
        orthonormalize_columns(&mut basis);

        // Solve for the coefficient direction that collapses each landmark
        // pair to coincidence (all three coordinates, not just the vertical
        // gap). Everything is affine in the coefficients, so at scale `s`
        // every pair offset is exactly (1 - s) times its rest value.
        let collapse_direction = |pairs: &[(usize, usize)], cols: Range<usize>| {
            let rows = pairs.len() * 3;
            let mut g = Array2::zeros((rows, cols.len()));
            let mut b = Array1::zeros(rows);
            for (pi, &(p, q)) in pairs.iter().enumerate() {
                for d in 0..3 {
                    b[pi * 3 + d] = -(mean[[p, d]] - mean[[q, d]]);
                    for (ci, c) in cols.clone().enumerate() {
                        g[[pi * 3 + d, ci]] = basis[[p * 3 + d, c]] - basis[[q * 3 + d, c]];
                    }
                }
            }
            let v = min_norm_solve(&g, &b);
            let mut full = Array1::zeros(EXPR_DIM);
            for (ci, c) in cols.enumerate() {
                full[c] = v[ci];
            }
            full
        };
        let blink_direction = collapse_direction(&EYELID_PAIRS, EYE_COEFFS);
        let mouth_shut_direction = collapse_direction(&INNER_LIP_PAIRS, MOUTH_COEFFS);

        let out = LandmarkBasis { spec: *spec, mean, mean_flat, basis, blink_direction, mouth_shut_direction };
        out.validate_invariants()?;
        Ok(out)
    }

    pub fn spec(&self) -> BasisSpec {
        self.spec
    }

    pub fn mean_points(&self) -> &Array2<f64> {
        &self.mean
    }

    pub fn mean_flat(&self) -> &Array1<f64> {
        &self.mean_flat
    }

    /// `(204, 64)` orthonormal deformation matrix.
    pub fn matrix(&self) -> &Array2<f64> {
        &self.basis
    }

    /// Coefficients that close the eyelid gaps: at scale `s`, every gap is
    /// `(1 - s)` times its rest size.
    pub fn blink_direction(&self) -> &Array1<f64> {
        &self.blink_direction
    }

    /// Coefficients that close the inner-lip gaps, linearly in scale.
    pub fn mouth_shut_direction(&self) -> &Array1<f64> {
        &self.mouth_shut_direction
    }

    pub fn save_spec(&self, path: &Path) -> Result<()> {
        crate::types::save_json(path, &self.spec)
    }

    /// Rebuild from a persisted spec, re-verifying all invariants.
    pub fn load(path: &Path) -> Result<Self> {
        let spec: BasisSpec = crate::types::load_json(path)?;
        Self::from_spec(&spec)
    }

    /// Structural checks: orthonormality, region-local support, and exact
    /// gap closure of the two solved directions.
    pub fn validate_invariants(&self) -> Result<()> {
        let err = orthonormality_error(&self.basis);
        if err > 1e-8 {
            return Err(Error::validation(format!("basis orthonormality error {err:.3e} > 1e-8")));
        }
        let regions: [(Vec<usize>, Range<usize>); 3] = [
            (MOUTH_LANDMARKS.to_vec(), MOUTH_COEFFS),
            (EYE_LANDMARKS.collect(), EYE_COEFFS),
            (BROW_LANDMARKS.collect(), BROW_COEFFS),
        ];
        for (landmarks, cols) in &regions {
            for c in cols.clone() {
                for li in 0..LANDMARK_COUNT {
                    if !landmarks.contains(&li) {
                        for d in 0..3 {
                            if self.basis[[li * 3 + d, c]] != 0.0 {
                                return Err(Error::validation(format!(
                                    "basis column {c} leaks onto landmark {li}"
                                )));
                            }
                        }
                    }
                }
            }
        }
        let closed = self.reconstruct(&self.blink_direction.view());
        if vertical_gaps(&closed.points, &EYELID_PAIRS).iter().any(|g| g.abs() > 1e-8) {
            return Err(Error::validation("blink direction does not close eyelid gaps"));
        }
        let shut = self.reconstruct(&self.mouth_shut_direction.view());
        if vertical_gaps(&shut.points, &INNER_LIP_PAIRS).iter().any(|g| g.abs() > 1e-8) {
            return Err(Error::validation("mouth-shut direction does not close inner lips"));
        }
        Ok(())
    }

    /// `mean + basis . coeffs`, reshaped to 68 x 3.
    pub fn reconstruct(&self, coeffs: &ArrayView1<f64>) -> LandmarkSet {
        assert_eq!(coeffs.len(), EXPR_DIM);
        let flat = &self.mean_flat + &self.basis.dot(coeffs);
        let points = Array2::from_shape_vec((LANDMARK_COUNT, 3), flat.to_vec()).unwrap();
        LandmarkSet::new(points)
    }

    /// Reconstruct every frame of a coefficient matrix: `(frames, 204)`.
    pub fn reconstruct_frames(&self, coeffs: &Array2<f64>) -> Array2<f64> {
        assert_eq!(coeffs.ncols(), EXPR_DIM);
        let mut out = coeffs.dot(&self.basis.t());
        for mut row in out.rows_mut() {
            row += &self.mean_flat;
        }
        out
    }

    /// Mean eyelid gap of a face, normalized so the rest face scores 1.
    pub fn blink_ratio(&self, points: &Array2<f64>) -> f64 {
        let now: f64 = vertical_gaps(points, &EYELID_PAIRS).iter().sum();
        let rest: f64 = vertical_gaps(&self.mean, &EYELID_PAIRS).iter().sum();
        now / rest
    }

    /// The 21-dim handcrafted eye-motion feature: blink ratio followed by
    /// the ten brow landmarks' planar displacements from the mean face.
    pub fn eye_motion_feature(&self, landmarks: &LandmarkSet) -> Array1<f64> {
        let p = &landmarks.points;
        let mut f = Array1::zeros(EYE_FEATURE_DIM);
        f[0] = self.blink_ratio(p);
        for (k, li) in BROW_LANDMARKS.enumerate() {
            f[1 + 2 * k] = p[[li, 0]] - self.mean[[li, 0]];
            f[2 + 2 * k] = p[[li, 1]] - self.mean[[li, 1]];
        }
        f
    }

    /// Eye-motion features for every frame of an expression sequence.
    pub fn eye_feature_sequence(&self, exprs: &ExpressionSequence) -> EyeFeatureSequence {
        let frames = exprs.frames();
        let mut data = Array2::zeros((frames, EYE_FEATURE_DIM));
        for t in 0..frames {
            let lm = self.reconstruct(&exprs.data.row(t));
            data.row_mut(t).assign(&self.eye_motion_feature(&lm));
        }
        EyeFeatureSequence::new(exprs.fps, data)
    }
}

/// Mean squared 3-D distance over the 32 mouth landmarks.
pub fn mouth_landmark_distance(a: &LandmarkSet, b: &LandmarkSet) -> f64 {
    let mut acc = 0.0;
    for &li in &MOUTH_LANDMARKS {
        let mut d2 = 0.0;
        for d in 0..3 {
            let diff = a.points[[li, d]] - b.points[[li, d]];
            d2 += diff * diff;
        }
        acc += d2;
    }
    acc / MOUTH_LANDMARKS.len() as f64
}

/// Mean 3-D distance across the four inner-lip pairs; zero when shut.
pub fn shut_distance(landmarks: &LandmarkSet) -> f64 {
    let mut acc = 0.0;
    for &(p, q) in &INNER_LIP_PAIRS {
        let mut d2 = 0.0;
        for d in 0..3 {
            let diff = landmarks.points[[p, d]] - landmarks.points[[q, d]];
            d2 += diff * diff;
        }
        acc += d2.sqrt();
    }
    acc / INNER_LIP_PAIRS.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_array, rng_for};
    use crate::tensor::check::assert_close;

    #[test]
    fn mean_face_has_expected_structure() {
        let m = mean_face();
        assert_eq!(m.shape(), &[68, 3]);
        // rest eyelid gaps are all 0.06
        for g in vertical_gaps(&m, &EYELID_PAIRS) {
            assert_close(g, 0.06, 1e-12, "eyelid gap");
        }
        // inner lip gaps: 0.06 at the corners, 0.10 in the middle
        let lips = vertical_gaps(&m, &INNER_LIP_PAIRS);
        assert_close(lips[0], 0.06, 1e-12, "lip gap 0");
        assert_close(lips[1], 0.10, 1e-12, "lip gap 1");
        assert_close(lips[2], 0.10, 1e-12, "lip gap 2");
        assert_close(lips[3], 0.06, 1e-12, "lip gap 3");
        // left/right mirror symmetry for a few salient pairs
        for (l, r) in [(0, 16), (36, 45), (39, 42), (17, 26), (48, 54)] {
            assert_close(m[[l, 0]], -m[[r, 0]], 1e-9, "mirror x");
            assert_close(m[[l, 1]], m[[r, 1]], 1e-9, "mirror y");
        }
        // chin is the lowest point
        let chin_y = m[[8, 1]];
        assert!(m.column(1).iter().all(|&y| y >= chin_y));
    }

    #[test]
    fn basis_is_orthonormal_and_seed_deterministic() {
        let b1 = LandmarkBasis::new(11);
        let b2 = LandmarkBasis::new(11);
        let b3 = LandmarkBasis::new(12);
        assert!(orthonormality_error(b1.matrix()) < 1e-12);
        assert_eq!(b1.matrix(), b2.matrix());
        assert_ne!(b1.matrix(), b3.matrix());
    }

    #[test]
    fn basis_columns_stay_inside_their_region() {
        let b = LandmarkBasis::new(5);
        b.validate_invariants().unwrap();
        // spot-check: an eye column has exact zeros on mouth landmarks and
        // some nonzero weight on eye landmarks
        let col = b.matrix().column(EYE_COEFFS.start + 3);
        for &li in &MOUTH_LANDMARKS {
            for d in 0..3 {
                assert_eq!(col[li * 3 + d], 0.0);
            }
        }
        let eye_mass: f64 = EYE_LANDMARKS.map(|li| (0..3).map(|d| col[li * 3 + d].abs()).sum::<f64>()).sum();
        assert!(eye_mass > 0.1);
    }

    #[test]
    fn reconstruct_matches_bruteforce_sum() {
        let b = LandmarkBasis::new(7);
        let mut rng = rng_for(7, "coeffs");
        let coeffs = normal_array(&mut rng, &[EXPR_DIM]).mapv(|x| 0.1 * x);
        let coeffs = Array1::from_iter(coeffs.iter().copied());
        let got = b.reconstruct(&coeffs.view());
        let mean = mean_face();
        for li in 0..LANDMARK_COUNT {
            for d in 0..3 {
                let mut want = mean[[li, d]];
                for c in 0..EXPR_DIM {
                    want += b.matrix()[[li * 3 + d, c]] * coeffs[c];
                }
                assert_close(got.points[[li, d]], want, 1e-12, "reconstruct");
            }
        }
    }

    #[test]
    fn reconstruct_frames_agrees_with_single_frame() {
        let b = LandmarkBasis::new(7);
        let mut rng = rng_for(8, "frames");
        let coeffs2 = {
            let a = normal_array(&mut rng, &[5, EXPR_DIM]).mapv(|x| 0.1 * x);
            Array2::from_shape_vec((5, EXPR_DIM), a.iter().copied().collect()).unwrap()
        };
        let flat = b.reconstruct_frames(&coeffs2);
        for t in 0..5 {
            let single = b.reconstruct(&coeffs2.row(t));
            for li in 0..LANDMARK_COUNT {
                for d in 0..3 {
                    assert_close(flat[[t, li * 3 + d]], single.points[[li, d]], 1e-12, "frames");
                }
            }
        }
    }

    #[test]
    fn half_blink_scales_ratio_to_half_exactly() {
        let b = LandmarkBasis::new(42);
        let half = b.blink_direction().mapv(|x| 0.5 * x);
        let lm = b.reconstruct(&half.view());
        let f = b.eye_motion_feature(&lm);
        assert!((f[0] - 0.5).abs() < 1e-10, "blink ratio {}", f[0]);
        // brows are untouched by an eye-block direction: displacements are
        // exactly zero, not merely small
        for k in 1..EYE_FEATURE_DIM {
            assert_eq!(f[k], 0.0, "brow feature {k}");
        }
    }

    #[test]
    fn full_blink_closes_gaps_and_scales_linearly() {
        let b = LandmarkBasis::new(42);
        for s in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let e = b.blink_direction().mapv(|x| s * x);
            let lm = b.reconstruct(&e.view());
            for g in vertical_gaps(&lm.points, &EYELID_PAIRS) {
                assert_close(g, 0.06 * (1.0 - s), 1e-10, "gap at scale");
            }
            assert!((b.blink_ratio(&lm.points) - (1.0 - s)).abs() < 1e-10);
        }
    }

    #[test]
    fn mouth_shut_direction_closes_inner_lips() {
        let b = LandmarkBasis::new(42);
        let lm = b.reconstruct(&b.mouth_shut_direction().view());
        assert!(shut_distance(&lm) < 1e-8, "shut distance {}", shut_distance(&lm));
        for g in vertical_gaps(&lm.points, &INNER_LIP_PAIRS) {
            assert!(g < 1e-10);
        }
        // and it only involves mouth coefficients
        for c in EYE_COEFFS.chain(BROW_COEFFS) {
            assert_eq!(b.mouth_shut_direction()[c], 0.0);
        }
    }

    #[test]
    fn eye_feature_matches_bruteforce_oracle_over_1000_frames() {
        let b = LandmarkBasis::new(3);
        let mut rng = rng_for(3, "oracle");
        let frames = 1000;
        let mean = mean_face();
        for _ in 0..frames {
            let coeffs = {
                let a = normal_array(&mut rng, &[EXPR_DIM]).mapv(|x| 0.08 * x);
                Array1::from_iter(a.iter().copied())
            };
            let lm = b.reconstruct(&coeffs.view());
            let got = b.eye_motion_feature(&lm);

            // independent recomputation with explicit loops
            let mut pts = [[0.0f64; 3]; LANDMARK_COUNT];
            for li in 0..LANDMARK_COUNT {
                for d in 0..3 {
                    let mut v = mean[[li, d]];
                    for c in 0..EXPR_DIM {
                        v += b.matrix()[[li * 3 + d, c]] * coeffs[c];
                    }
                    pts[li][d] = v;
                }
            }
            let gap = |p: usize, q: usize| (pts[p][1] - pts[q][1]).abs();
            let he = gap(37, 41) + gap(38, 40) + gap(43, 47) + gap(44, 46);
            let her = 4.0 * 0.06;
            let bl = he / her;
            assert!((got[0] - bl).abs() < 1e-10, "bl mismatch: {} vs {bl}", got[0]);
            for (k, li) in (17..27).enumerate() {
                let dx = pts[li][0] - mean[[li, 0]];
                let dy = pts[li][1] - mean[[li, 1]];
                assert!((got[1 + 2 * k] - dx).abs() < 1e-10);
                assert!((got[2 + 2 * k] - dy).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mouth_landmark_distance_matches_bruteforce() {
        let b = LandmarkBasis::new(9);
        let mut rng = rng_for(9, "mld");
        let mk = |rng: &mut crate::rng::Rng| {
            let a = normal_array(rng, &[EXPR_DIM]).mapv(|x| 0.1 * x);
            b.reconstruct(&Array1::from_iter(a.iter().copied()).view())
        };
        let (l1, l2) = (mk(&mut rng), mk(&mut rng));
        let got = mouth_landmark_distance(&l1, &l2);
        let mut want = 0.0;
        for &li in &MOUTH_LANDMARKS {
            for d in 0..3 {
                let diff = l1.points[[li, d]] - l2.points[[li, d]];
                want += diff * diff;
            }
        }
        want /= 32.0;
        assert_close(got, want, 1e-12, "mld");
        // identical faces score zero; eye-only changes score zero
        assert_eq!(mouth_landmark_distance(&l1, &l1), 0.0);
        let eye_only = b.reconstruct(&b.blink_direction().view());
        let rest = b.reconstruct(&Array1::zeros(EXPR_DIM).view());
        assert_eq!(mouth_landmark_distance(&eye_only, &rest), 0.0);
    }

    #[test]
    fn spec_round_trip_rebuilds_identical_basis() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis_spec.json");
        let b = LandmarkBasis::new(123);
        b.save_spec(&path).unwrap();
        // the file holds a seed, not floats
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"seed\": 123"));
        assert!(text.len() < 200, "spec file should be tiny, got {} bytes", text.len());
        let loaded = LandmarkBasis::load(&path).unwrap();
        assert_eq!(loaded.matrix(), b.matrix());
        assert_eq!(loaded.blink_direction(), b.blink_direction());
    }

    #[test]
    fn version_mismatch_is_a_missing_prerequisite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis_spec.json");
        let spec = BasisSpec { seed: 1, format_version: BASIS_FORMAT_VERSION + 1 };
        crate::types::save_json(&path, &spec).unwrap();
        let err = LandmarkBasis::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
