//! Network building blocks on top of the [`Tape`](crate::tensor::Tape):
//! a named parameter store, layer structs, Adam, and a few loss helpers.
//!
//! The split of responsibilities is deliberate: [`Params`] owns the master
//! copies of all weights in a stable insertion order (which also fixes the
//! checkpoint layout and the gradient-reduction order), while layer structs
//! only remember *which* parameters are theirs and how to apply them to
//! tape variables. Binding copies the current weights onto a tape as leaf
//! constants, so forward graphs never alias optimizer state.

use crate::rng::Rng;
use crate::tensor::{Gradients, Tape, Var};
use ndarray::{ArrayD, IxDyn};

/// Index of a parameter inside a [`Params`] store (and inside any slice
/// returned by [`Params::bind`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// The tape variable this parameter was bound to.
    pub fn var(self, bound: &[Var]) -> Var {
        bound[self.0]
    }
}

/// Ordered, named collection of trainable arrays.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    /// Overwrite one parameter by name (used when restoring checkpoints).
    pub fn set_by_name(&mut self, name: &str, value: ArrayD<f64>) -> Result<(), String> {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some((_, slot)) => {
                if slot.shape() != value.shape() {
                    return Err(format!(
                        "parameter {name}: stored shape {:?} != loaded shape {:?}",
                        slot.shape(),
                        value.shape()
                    ));
                }
                *slot = value;
                Ok(())
            }
            None => Err(format!("unknown parameter {name}")),
        }
    }

    /// Copy every parameter onto `tape` as a leaf; result is indexed by
    /// [`ParamId`].
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.entries.iter().map(|(_, a)| tape.constant(a.clone())).collect()
    }
}

/// Gradients for every parameter, in store order; zeros where the graph
/// never touched a parameter.
pub fn grad_vec(params: &Params, bound: &[Var], grads: &Gradients) -> Vec<ArrayD<f64>> {
    assert_eq!(bound.len(), params.len());
    params
        .iter()
        .zip(bound)
        .map(|((_, value), &var)| {
            grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(value.raw_dim()))
        })
        .collect()
}

/// Elementwise sum of two gradient vectors (fixed order, for deterministic
/// reduction across data-parallel workers).
pub fn add_grads(acc: &mut [ArrayD<f64>], other: &[ArrayD<f64>]) {
    assert_eq!(acc.len(), other.len());
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

pub fn scale_grads(grads: &mut [ArrayD<f64>], s: f64) {
    for g in grads.iter_mut() {
        g.mapv_inplace(|x| x * s);
    }
}

/// Clip to a maximum global L2 norm. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [ArrayD<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        scale_grads(grads, s);
    }
    norm
}

// ----- initialization -----

/// Gaussian fan-in initialization: N(0, scale² = 1/fan_in).
fn init_gaussian(rng: &mut Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let scale = (1.0 / fan_in as f64).sqrt();
    let mut a = crate::rng::normal_array(rng, shape);
    a.mapv_inplace(|x| x * scale);
    a
}

// ----- optimizer -----

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Adam with bias correction.
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &Params, cfg: AdamConfig) -> Self {
        let m = params.iter().map(|(_, a)| ArrayD::zeros(a.raw_dim())).collect();
        let v = params.iter().map(|(_, a)| ArrayD::zeros(a.raw_dim())).collect();
        Adam { cfg, m, v, t: 0 }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[ArrayD<f64>]) {
        assert_eq!(grads.len(), params.len());
        self.t += 1;
        let t = self.t as f64;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let corr1 = 1.0 - b1.powf(t);
        let corr2 = 1.0 - b2.powf(t);
        for i in 0..grads.len() {
            let g = &grads[i];
            ndarray::Zip::from(&mut self.m[i]).and(g).for_each(|m, &gv| *m = b1 * *m + (1.0 - b1) * gv);
            ndarray::Zip::from(&mut self.v[i]).and(g).for_each(|v, &gv| *v = b2 * *v + (1.0 - b2) * gv * gv);
            let id = ParamId(i);
            let p = params.get_mut(id);
            ndarray::Zip::from(p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|pv, &m, &v| {
                    let mhat = m / corr1;
                    let vhat = v / corr2;
                    *pv -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
                });
        }
    }
}

// ----- layers -----

/// Activation applied between MLP layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act {
    Linear,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Silu,
    Sigmoid,
}

impl Act {
    pub fn apply(self, t: &Tape, x: Var) -> Var {
        match self {
            Act::Linear => x,
            Act::Relu => t.relu(x),
            Act::LeakyRelu(a) => t.leaky_relu(x, a),
            Act::Tanh => t.tanh(x),
            Act::Silu => t.silu(x),
            Act::Sigmoid => t.sigmoid(x),
        }
    }
}

/// Dense layer: `y = x W + b`, `x`: `(n, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(p: &mut Params, name: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let w = p.add(&format!("{name}.w"), init_gaussian(rng, &[din, dout], din));
        let b = p.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[dout])));
        Linear { w, b }
    }

    pub fn forward(&self, t: &Tape, bound: &[Var], x: Var) -> Var {
        let y = t.matmul(x, self.w.var(bound));
        t.add(y, self.b.var(bound))
    }
}

/// Multi-layer perceptron; `dims = [in, hidden.., out]`, activation between
/// layers but not after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Act,
}

impl Mlp {
    pub fn new(p: &mut Params, name: &str, dims: &[usize], act: Act, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least in/out dims");
        let layers = (0..dims.len() - 1)
            .map(|i| Linear::new(p, &format!("{name}.{i}"), dims[i], dims[i + 1], rng))
            .collect();
        Mlp { layers, act }
    }

    pub fn forward(&self, t: &Tape, bound: &[Var], x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(t, bound, h);
            if i + 1 < self.layers.len() {
                h = self.act.apply(t, h);
            }
        }
        h
    }
}

/// 1-D convolution layer over `(batch, channels, time)`, same padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new(
        p: &mut Params,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        dilation: usize,
        rng: &mut Rng,
    ) -> Self {
        let w = p.add(&format!("{name}.w"), init_gaussian(rng, &[cout, cin, k], cin * k));
        let b = p.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        Conv1d { w, b, dilation }
    }

    pub fn forward(&self, t: &Tape, bound: &[Var], x: Var) -> Var {
        t.conv1d(x, self.w.var(bound), self.b.var(bound), self.dilation)
    }
}

/// 2-D convolution layer over `(batch, channels, h, w)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p: &mut Params,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let w = p.add(&format!("{name}.w"), init_gaussian(rng, &[cout, cin, k, k], cin * k * k));
        let b = p.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, t: &Tape, bound: &[Var], x: Var) -> Var {
        t.conv2d(x, self.w.var(bound), self.b.var(bound), self.stride, self.pad)
    }
}

/// Multi-head self-attention with learned Q/K/V/output projections over
/// `(batch, time, channels)`.
#[derive(Debug, Clone)]
pub struct Mha {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Mha {
    pub fn new(p: &mut Params, name: &str, channels: usize, heads: usize, rng: &mut Rng) -> Self {
        assert_eq!(channels % heads, 0);
        Mha {
            q: Linear::new(p, &format!("{name}.q"), channels, channels, rng),
            k: Linear::new(p, &format!("{name}.k"), channels, channels, rng),
            v: Linear::new(p, &format!("{name}.v"), channels, channels, rng),
            o: Linear::new(p, &format!("{name}.o"), channels, channels, rng),
            heads,
        }
    }

    pub fn forward(&self, t: &Tape, bound: &[Var], x: Var) -> Var {
        let s = t.shape(x);
        assert_eq!(s.len(), 3, "mha expects (batch, time, channels)");
        let (b, tt, c) = (s[0], s[1], s[2]);
        let flat = t.reshape(x, &[b * tt, c]);
        let q = t.reshape(self.q.forward(t, bound, flat), &[b, tt, c]);
        let k = t.reshape(self.k.forward(t, bound, flat), &[b, tt, c]);
        let v = t.reshape(self.v.forward(t, bound, flat), &[b, tt, c]);
        let a = t.attention(q, k, v, self.heads);
        let aflat = t.reshape(a, &[b * tt, c]);
        let o = self.o.forward(t, bound, aflat);
        t.reshape(o, &[b, tt, c])
    }
}

/// Single LSTM cell. Gate layout in the fused projection is `[i, f, g, o]`;
/// the forget-gate bias starts at 1 so early training doesn't flush state.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(p: &mut Params, name: &str, din: usize, hidden: usize, rng: &mut Rng) -> Self {
        let wx = p.add(&format!("{name}.wx"), init_gaussian(rng, &[din, 4 * hidden], din));
        let wh = p.add(&format!("{name}.wh"), init_gaussian(rng, &[hidden, 4 * hidden], hidden));
        let mut bias = ArrayD::zeros(IxDyn(&[4 * hidden]));
        for i in hidden..2 * hidden {
            bias[[i]] = 1.0;
        }
        let b = p.add(&format!("{name}.b"), bias);
        LstmCell { wx, wh, b, hidden }
    }

    /// One step: `x` is `(batch, din)`, `h`/`c` are `(batch, hidden)`.
    /// Returns `(h', c')`.
    pub fn step(&self, t: &Tape, bound: &[Var], x: Var, h: Var, c: Var) -> (Var, Var) {
        let dh = self.hidden;
        let zx = t.matmul(x, self.wx.var(bound));
        let zh = t.matmul(h, self.wh.var(bound));
        let z = t.add(t.add(zx, zh), self.b.var(bound));
        let i = t.sigmoid(t.narrow(z, 1, 0, dh));
        let f = t.sigmoid(t.narrow(z, 1, dh, dh));
        let g = t.tanh(t.narrow(z, 1, 2 * dh, dh));
        let o = t.sigmoid(t.narrow(z, 1, 3 * dh, dh));
        let c2 = t.add(t.mul(f, c), t.mul(i, g));
        let h2 = t.mul(o, t.tanh(c2));
        (h2, c2)
    }

    /// Zero initial state for a batch.
    pub fn zero_state(&self, t: &Tape, batch: usize) -> (Var, Var) {
        let z = ArrayD::zeros(IxDyn(&[batch, self.hidden]));
        (t.constant(z.clone()), t.constant(z))
    }
}

// ----- loss helpers -----

/// Mean squared deviation from a scalar target.
pub fn mse_const(t: &Tape, x: Var, target: f64) -> Var {
    let d = t.add_scalar(x, -target);
    let sq = t.mul(d, d);
    t.mean_all(sq)
}

/// Least-squares GAN discriminator loss: real towards 1, fake towards 0.
pub fn lsgan_discriminator_loss(t: &Tape, d_real: Var, d_fake: Var) -> Var {
    let lr = mse_const(t, d_real, 1.0);
    let lf = mse_const(t, d_fake, 0.0);
    t.scale(t.add(lr, lf), 0.5)
}

/// Least-squares GAN generator loss: fake towards 1.
pub fn lsgan_generator_loss(t: &Tape, d_fake: Var) -> Var {
    mse_const(t, d_fake, 1.0)
}

/// Non-saturating GAN discriminator loss on raw logits:
/// `E[softplus(-D(real))] + E[softplus(D(fake))]`.
pub fn gan_discriminator_loss(t: &Tape, d_real: Var, d_fake: Var) -> Var {
    let lr = t.mean_all(t.softplus(t.neg(d_real)));
    let lf = t.mean_all(t.softplus(d_fake));
    t.add(lr, lf)
}

/// Non-saturating GAN generator loss on raw logits: `E[softplus(-D(fake))]`.
pub fn gan_generator_loss(t: &Tape, d_fake: Var) -> Var {
    t.mean_all(t.softplus(t.neg(d_fake)))
}

/// `sum_i w_i * term_i` for scalar loss terms.
pub fn weighted_sum(t: &Tape, terms: &[(f64, Var)]) -> Var {
    assert!(!terms.is_empty());
    let mut acc = t.scale(terms[0].1, terms[0].0);
    for &(w, v) in &terms[1..] {
        acc = t.add(acc, t.scale(v, w));
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_array, rng_for};
    use crate::tensor::check::{assert_close, gradcheck, weights};

    #[test]
    fn params_are_ordered_and_named() {
        let mut rng = rng_for(1, "p");
        let mut p = Params::new();
        let lin = Linear::new(&mut p, "enc", 3, 2, &mut rng);
        assert_eq!(p.len(), 2);
        assert_eq!(p.iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>(), vec!["enc.w", "enc.b"]);
        assert_eq!(p.get(lin.w).shape(), &[3, 2]);
        assert!(p.set_by_name("enc.w", ArrayD::zeros(IxDyn(&[3, 2]))).is_ok());
        assert!(p.set_by_name("enc.w", ArrayD::zeros(IxDyn(&[2, 2]))).is_err());
        assert!(p.set_by_name("nope", ArrayD::zeros(IxDyn(&[1]))).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let build = || {
            let mut rng = rng_for(9, "init");
            let mut p = Params::new();
            let _ = Mlp::new(&mut p, "m", &[4, 8, 2], Act::Relu, &mut rng);
            p
        };
        let (a, b) = (build(), build());
        for ((n1, v1), (n2, v2)) in a.iter().zip(b.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut rng = rng_for(2, "adam");
        let mut p = Params::new();
        let x = p.add("x", normal_array(&mut rng, &[6]));
        let target = normal_array(&mut rng, &[6]);
        let mut opt = Adam::new(&p, AdamConfig::with_lr(0.05));
        for _ in 0..400 {
            let t = Tape::new();
            let bound = p.bind(&t);
            let tv = t.constant(target.clone());
            let loss = t.mse(x.var(&bound), tv);
            let grads = t.backward(loss);
            let gv = grad_vec(&p, &bound, &grads);
            opt.step(&mut p, &gv);
        }
        let err: f64 = p
            .get(x)
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "adam did not converge, max err {err}");
    }

    #[test]
    fn linear_regression_recovers_map() {
        let mut rng = rng_for(3, "linreg");
        let true_w = normal_array(&mut rng, &[3, 2]);
        let true_b = normal_array(&mut rng, &[2]);
        let xs = normal_array(&mut rng, &[64, 3]);
        let x2 = xs.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let w2 = true_w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let ys = (x2.dot(&w2) + &true_b.view().into_dimensionality::<ndarray::Ix1>().unwrap()).into_dyn();

        let mut p = Params::new();
        let lin = Linear::new(&mut p, "lin", 3, 2, &mut rng);
        let mut opt = Adam::new(&p, AdamConfig::with_lr(0.05));
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            let t = Tape::new();
            let bound = p.bind(&t);
            let (xv, yv) = (t.constant(xs.clone()), t.constant(ys.clone()));
            let pred = lin.forward(&t, &bound, xv);
            let loss = t.mse(pred, yv);
            last = t.scalar_value(loss);
            let grads = t.backward(loss);
            let gv = grad_vec(&p, &bound, &grads);
            opt.step(&mut p, &gv);
        }
        assert!(last < 1e-5, "regression loss stuck at {last}");
    }

    #[test]
    fn grad_lstm_cell_full() {
        // Bind the closure's own vars as the "parameter" slice so the check
        // exercises the real layer code, parameters included.
        let mut scratch = Params::new();
        let mut rng = rng_for(4, "lstm");
        let cell = LstmCell::new(&mut scratch, "cell", 3, 2, &mut rng);
        let shapes: Vec<Vec<usize>> = scratch
            .iter()
            .map(|(_, a)| a.shape().to_vec())
            .chain([vec![2, 3], vec![2, 2], vec![2, 2]])
            .collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        gradcheck(5, &shape_refs, &|t, v| {
            let (h2, c2) = cell.step(t, &v[..3], v[3], v[4], v[5]);
            let wh = weights(t, &[2, 2]);
            let wc = weights(t, &[2, 2]);
            t.add(t.sum_all(t.mul(h2, wh)), t.sum_all(t.mul(c2, wc)))
        });
    }

    #[test]
    fn grad_mha_full() {
        let mut scratch = Params::new();
        let mut rng = rng_for(6, "mha");
        let mha = Mha::new(&mut scratch, "mha", 6, 2, &mut rng);
        let shapes: Vec<Vec<usize>> = scratch
            .iter()
            .map(|(_, a)| a.shape().to_vec())
            .chain([vec![2, 3, 6]])
            .collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let n = shapes.len() - 1;
        gradcheck(7, &shape_refs, &|t, v| {
            let y = mha.forward(t, &v[..n], v[n]);
            t.sum_all(t.mul(y, weights(t, &[2, 3, 6])))
        });
    }

    #[test]
    fn clip_global_norm_rescales() {
        let mut grads = vec![ArrayD::from_elem(IxDyn(&[4]), 3.0), ArrayD::from_elem(IxDyn(&[2]), -4.0)];
        // norm = sqrt(4*9 + 2*16) = sqrt(68)
        let norm = clip_global_norm(&mut grads, 1.0);
        assert_close(norm, 68f64.sqrt(), 1e-12, "pre-clip norm");
        let after: f64 = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        assert_close(after, 1.0, 1e-12, "post-clip norm");
        // below the limit: untouched
        let mut small = vec![ArrayD::from_elem(IxDyn(&[2]), 0.1)];
        clip_global_norm(&mut small, 1.0);
        assert_close(small[0][[0]], 0.1, 1e-15, "unclipped");
    }

    #[test]
    fn gan_losses_point_the_right_way() {
        let t = Tape::new();
        let good_real = t.constant(ArrayD::from_elem(IxDyn(&[4]), 4.0));
        let good_fake = t.constant(ArrayD::from_elem(IxDyn(&[4]), -4.0));
        let confident = t.scalar_value(gan_discriminator_loss(&t, good_real, good_fake));
        let bad_real = t.constant(ArrayD::from_elem(IxDyn(&[4]), -4.0));
        let bad_fake = t.constant(ArrayD::from_elem(IxDyn(&[4]), 4.0));
        let fooled = t.scalar_value(gan_discriminator_loss(&t, bad_real, bad_fake));
        assert!(confident < 0.1 && fooled > 4.0);

        let ls = t.scalar_value(lsgan_discriminator_loss(
            &t,
            t.constant(ArrayD::from_elem(IxDyn(&[4]), 1.0)),
            t.constant(ArrayD::from_elem(IxDyn(&[4]), 0.0)),
        ));
        assert_close(ls, 0.0, 1e-12, "lsgan perfect");
        let g = t.scalar_value(lsgan_generator_loss(&t, t.constant(ArrayD::from_elem(IxDyn(&[4]), 0.5))));
        assert_close(g, 0.25, 1e-12, "lsgan generator");
    }

    #[test]
    fn weighted_sum_combines_terms() {
        let t = Tape::new();
        let a = t.constant(ArrayD::from_elem(IxDyn(&[]), 2.0));
        let b = t.constant(ArrayD::from_elem(IxDyn(&[]), 3.0));
        let s = weighted_sum(&t, &[(0.5, a), (2.0, b)]);
        assert_close(t.scalar_value(s), 7.0, 1e-12, "weighted sum");
    }
}
