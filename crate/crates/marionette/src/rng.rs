//! Deterministic RNG plumbing.
//!
//! Every stochastic component takes a `u64` seed and derives its own stream
//! with [`derive_seed`], so adding a consumer never perturbs the draws of an
//! existing one. ChaCha8 is used throughout: portable, seedable, and fast
//! enough that RNG is never the bottleneck.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derive an independent child seed from a parent seed and a label.
///
/// Hash-based so that streams are decoupled: `derive_seed(s, "blinks")`
/// and `derive_seed(s, "pose")` share no structure even for adjacent `s`.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Construct the RNG for a (seed, label) pair.
pub fn rng_for(parent: u64, label: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, label))
}

/// Standard normal draw. `rand_distr` is avoided to keep the dependency
/// set small; Box–Muller on the half-open unit interval is exact enough.
pub fn normal(rng: &mut Rng) -> f64 {
    use rand::Rng as _;
    // u in (0, 1] so ln(u) is finite.
    let u: f64 = 1.0 - rng.gen::<f64>();
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

/// Fill a mutable slice with iid standard normals.
pub fn fill_normal(rng: &mut Rng, out: &mut [f64]) {
    for x in out.iter_mut() {
        *x = normal(rng);
    }
}

/// A fresh standard-normal array of the given shape.
pub fn normal_array(rng: &mut Rng, shape: &[usize]) -> ndarray::ArrayD<f64> {
    let n: usize = shape.iter().product();
    let mut v = vec![0.0; n];
    fill_normal(rng, &mut v);
    ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), v).unwrap()
}
