//! The interval-velocity network: an MLP over `[z, c, embed(r), embed(t)]`
//! with sinusoidal time embeddings, written generically over [`Value`] so the
//! same definition runs plainly, on a tape, or in forward mode.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor, Value, Var};
use crate::rng::StreamRng;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("{name}[{index}] = {value} lies outside [0, 1]")]
    TimeOutOfRange {
        name: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op}: expected {expected} columns, got {got}")]
    BadWidth {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

/// Shape of the velocity network. `feature_layer` selects which hidden
/// activation feeds the feature-spread loss term; that activation is
/// row-normalized before it is exposed (see the forward pass).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub action_dim: usize,
    pub cond_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
    pub feature_layer: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            action_dim: 2,
            cond_dim: 0,
            hidden_dims: vec![256, 256, 256],
            time_embed_dim: 32,
            activation: Activation::Gelu,
            feature_layer: 1,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.action_dim == 0 {
            return Err(NetError::Arch("action_dim must be at least 1".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(NetError::Arch(format!(
                "hidden_dims must be nonempty with positive widths, got {:?}",
                self.hidden_dims
            )));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(NetError::Arch(format!(
                "time_embed_dim must be even and at least 2, got {}",
                self.time_embed_dim
            )));
        }
        if self.feature_layer >= self.hidden_dims.len() {
            return Err(NetError::Arch(format!(
                "feature_layer {} out of range for {} hidden layers",
                self.feature_layer,
                self.hidden_dims.len()
            )));
        }
        Ok(())
    }

    /// Width of the concatenated network input.
    pub fn input_dim(&self) -> usize {
        self.action_dim + self.cond_dim + 2 * self.time_embed_dim
    }

    /// Per-layer `(fan_in, fan_out)` pairs, hidden layers then output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim();
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.action_dim));
        dims
    }
}

/// Sinusoidal frequency ladder: `time_embed_dim / 2` frequencies spaced
/// geometrically from [`FREQ_MIN`] to [`FREQ_MAX`], shaped `[1, K]`.
pub fn time_embedding_freqs(time_embed_dim: usize) -> Tensor {
    let k = time_embed_dim / 2;
    let mut f = Vec::with_capacity(k);
    for i in 0..k {
        if k == 1 {
            f.push(FREQ_MIN);
        } else {
            let expo = i as f64 / (k - 1) as f64;
            f.push(FREQ_MIN * (FREQ_MAX / FREQ_MIN).powf(expo));
        }
    }
    Tensor::from_raw(vec![1, k], f)
}

pub const FREQ_MIN: f64 = 1.0;
/// Capped low for two reasons: the embedding must stay smooth on the scale
/// of the finite-difference stencils used for the time derivative, and the
/// embedding's time derivative scales with the top frequency — it enters the
/// bootstrap targets through du/dt, so large caps inflate target magnitudes
/// early in training and destabilise the interval identity.
pub const FREQ_MAX: f64 = 8.0;

/// Floor applied to feature-row norms before normalization, so an
/// all-zero activation row maps to zeros instead of NaN.
pub const FEATURE_NORM_FLOOR: f64 = 1e-8;

/// `[sin(f_k t), cos(f_k t)] / sqrt(K)` features for a time column `t: [B]`.
/// `freqs` must already live in the caller's autodiff context.
///
/// The `1/sqrt(K)` amplitude keeps the whole embedding block at O(1) energy
/// regardless of its width: each sin/cos pair contributes `1/K`, so the two
/// time blocks together weigh about as much as a couple of data channels
/// instead of drowning them `K`-fold at a fan-in-scaled first layer. It also
/// shrinks the embedding's time derivative by the same factor, which keeps
/// the bootstrap targets (built from du/dt) tame. Entries stay unit-bounded.
pub fn embed_time<V: Value>(t: &V, freqs: &V, batch: usize) -> Result<V, AdError> {
    let k = freqs.shape()[1];
    let phases = t.reshape(vec![batch, 1])?.matmul(freqs)?;
    let amp = 1.0 / (k as f64).sqrt();
    let s = phases.sin()?.scale(amp)?;
    let c = phases.cos()?.scale(amp)?;
    V::concat_cols(&[&s, &c])
}

/// Output of one network evaluation.
#[derive(Debug, Clone)]
pub struct NetOutput<V: Value> {
    /// Predicted interval-averaged velocity, `[B, action_dim]`.
    pub u: V,
    /// Hidden activation selected by `feature_layer`, `[B, width]`.
    pub features: V,
}

/// Anything that can evaluate an interval-averaged velocity field in every
/// autodiff mode. Implemented by [`VelocityNet`] and by analytic fields used
/// as test oracles.
pub trait VelocityModel {
    fn action_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    /// Evaluates `u(z, r, t | c)`. Parameters enter as constants of `z`'s
    /// context; gradients with respect to parameters require
    /// [`VelocityNet::eval_trainable`].
    fn eval<V: Value>(&self, z: &V, r: &V, t: &V, c: Option<&V>) -> Result<NetOutput<V>, NetError>;
}

/// MLP velocity network. Weights are stored `[fan_out, fan_in]` and biases
/// `[fan_out]`; the flat parameter order is `w0, b0, w1, b1, ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityNet {
    arch: Architecture,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    freqs: Tensor,
}

/// Stream id for parameter initialisation draws.
const STREAM_INIT: u64 = 7;

impl VelocityNet {
    /// Fan-in uniform initialisation: each weight is drawn from
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, row by row in storage order;
    /// biases start at zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, NetError> {
        arch.validate()?;
        let mut rng = StreamRng::new(seed, STREAM_INIT);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (fan_in, fan_out) in arch.layer_dims() {
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = rng.uniform_vec(-bound, bound, fan_out * fan_in);
            weights.push(Tensor::from_raw(vec![fan_out, fan_in], data));
            biases.push(Tensor::zeros(vec![fan_out]));
        }
        let freqs = time_embedding_freqs(arch.time_embed_dim);
        Ok(Self {
            arch,
            weights,
            biases,
            freqs,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum::<usize>()
            + self.biases.iter().map(Tensor::numel).sum::<usize>()
    }

    /// Parameters in flat order `w0, b0, w1, b1, ...`.
    pub fn params_flat(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for i in 0..self.weights.len() {
            out.push(&self.weights[i]);
            out.push(&self.biases[i]);
        }
        out
    }

    pub fn params_flat_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Replaces all parameters (same flat order), validating shapes.
    pub fn set_params_flat(&mut self, params: Vec<Tensor>) -> Result<(), NetError> {
        if params.len() != 2 * self.weights.len() {
            return Err(NetError::Arch(format!(
                "expected {} parameter tensors, got {}",
                2 * self.weights.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            let current = if i % 2 == 0 {
                &self.weights[i / 2]
            } else {
                &self.biases[i / 2]
            };
            if p.shape() != current.shape() {
                return Err(NetError::Arch(format!(
                    "parameter {i} has shape {:?}, expected {:?}",
                    p.shape(),
                    current.shape()
                )));
            }
        }
        for (i, p) in params.into_iter().enumerate() {
            if i % 2 == 0 {
                self.weights[i / 2] = p;
            } else {
                self.biases[i / 2] = p;
            }
        }
        Ok(())
    }

    /// Records every parameter as a trainable leaf on `tape` and evaluates
    /// the network on the taped inputs. Returns the leaf ids in flat
    /// parameter order alongside the output.
    pub fn eval_trainable(
        &self,
        tape: &Tape,
        z: &Tensor,
        r: &Tensor,
        t: &Tensor,
        c: Option<&Tensor>,
    ) -> Result<(Vec<usize>, NetOutput<Var>), NetError> {
        let mut ids = Vec::with_capacity(2 * self.weights.len());
        let mut params = Vec::with_capacity(self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let wv = tape.param(w.clone()).map_err(AdError::from)?;
            let bv = tape.param(b.clone()).map_err(AdError::from)?;
            ids.push(wv.id());
            ids.push(bv.id());
            params.push((wv, bv));
        }
        let zv = tape.constant(z.clone()).map_err(AdError::from)?;
        let rv = tape.constant(r.clone()).map_err(AdError::from)?;
        let tv = tape.constant(t.clone()).map_err(AdError::from)?;
        let cv = match c {
            Some(c) => Some(tape.constant(c.clone()).map_err(AdError::from)?),
            None => None,
        };
        let out = self.eval_core(&params, &zv, &rv, &tv, cv.as_ref())?;
        Ok((ids, out))
    }

    /// Shared forward pass over pre-lifted parameters.
    fn eval_core<V: Value>(
        &self,
        params: &[(V, V)],
        z: &V,
        r: &V,
        t: &V,
        c: Option<&V>,
    ) -> Result<NetOutput<V>, NetError> {
        let zshape = z.shape();
        if zshape.len() != 2 || zshape[1] != self.arch.action_dim {
            return Err(NetError::BadWidth {
                op: "eval",
                expected: self.arch.action_dim,
                got: zshape.get(1).copied().unwrap_or(0),
            });
        }
        let batch = zshape[0];
        check_time_range(&r.to_tensor(), "r")?;
        check_time_range(&t.to_tensor(), "t")?;
        match (self.arch.cond_dim, c) {
            (0, None) => {}
            (0, Some(_)) => {
                return Err(NetError::BadWidth {
                    op: "eval(cond)",
                    expected: 0,
                    got: c.map(|c| c.shape().get(1).copied().unwrap_or(0)).unwrap_or(0),
                })
            }
            (d, Some(c)) => {
                let cs = c.shape();
                if cs.len() != 2 || cs[1] != d || cs[0] != batch {
                    return Err(NetError::BadWidth {
                        op: "eval(cond)",
                        expected: d,
                        got: cs.get(1).copied().unwrap_or(0),
                    });
                }
            }
            (d, None) => {
                return Err(NetError::BadWidth {
                    op: "eval(cond)",
                    expected: d,
                    got: 0,
                })
            }
        }

        let freqs = z.lift(&self.freqs)?;
        let er = embed_time(r, &freqs, batch)?;
        let et = embed_time(t, &freqs, batch)?;
        let mut parts: Vec<&V> = vec![z];
        if let Some(c) = c {
            parts.push(c);
        }
        parts.push(&er);
        parts.push(&et);
        let mut x = V::concat_cols(&parts)?;

        let mut features: Option<V> = None;
        let last = params.len() - 1;
        for (i, (w, b)) in params.iter().enumerate() {
            let y = x.matmul(&w.transpose()?)?.add(&b.broadcast_row(batch)?)?;
            if i < last {
                let h = match self.arch.activation {
                    Activation::Gelu => y.gelu()?,
                    Activation::Relu => y.relu()?,
                };
                if i == self.arch.feature_layer {
                    // Rows are l2-normalized so the feature-spread term acts
                    // on directions only: pairwise squared distances stay in
                    // [0, 4] and the term is bounded below by -4/tau, which
                    // rules out the norm-inflation runaway an unbounded
                    // repulsion produces on small networks.
                    let width = self.arch.hidden_dims[i];
                    let norms = h
                        .row_l2norm()?
                        .clamp_min(FEATURE_NORM_FLOOR)?
                        .broadcast_col(width)?;
                    features = Some(h.div(&norms)?);
                }
                x = h;
            } else {
                x = y;
            }
        }
        let features = features.expect("feature_layer validated against hidden_dims");
        Ok(NetOutput { u: x, features })
    }

    /// Validates parameter tensors after deserialisation.
    pub fn validate(&self) -> Result<(), NetError> {
        self.arch.validate()?;
        let dims = self.arch.layer_dims();
        if self.weights.len() != dims.len() || self.biases.len() != dims.len() {
            return Err(NetError::Arch(format!(
                "expected {} layers, found {} weight / {} bias tensors",
                dims.len(),
                self.weights.len(),
                self.biases.len()
            )));
        }
        for (i, ((fan_in, fan_out), (w, b))) in dims
            .iter()
            .zip(self.weights.iter().zip(&self.biases))
            .enumerate()
        {
            w.validate().map_err(AdError::from)?;
            b.validate().map_err(AdError::from)?;
            if w.shape() != [*fan_out, *fan_in] || b.shape() != [*fan_out] {
                return Err(NetError::Arch(format!(
                    "layer {i} has shapes w{:?} b{:?}, expected w[{fan_out}, {fan_in}] b[{fan_out}]",
                    w.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

fn check_time_range(t: &Tensor, name: &'static str) -> Result<(), NetError> {
    for (i, &v) in t.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(NetError::TimeOutOfRange {
                name,
                index: i,
                value: v,
            });
        }
    }
    Ok(())
}

impl VelocityModel for VelocityNet {
    fn action_dim(&self) -> usize {
        self.arch.action_dim
    }

    fn cond_dim(&self) -> usize {
        self.arch.cond_dim
    }

    fn eval<V: Value>(&self, z: &V, r: &V, t: &V, c: Option<&V>) -> Result<NetOutput<V>, NetError> {
        let params: Vec<(V, V)> = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| Ok((z.lift(w)?, z.lift(b)?)))
            .collect::<Result<_, AdError>>()?;
        self.eval_core(&params, z, r, t, c)
    }
}

/// Analytic affine velocity field `u(z, r, t) = z M + t w_t + r w_r`, whose
/// exact time derivative along `(dz, dr, dt) = (v, 0, 1)` is `v M + w_t`.
/// Used as an oracle when validating derivative estimators.
#[derive(Debug, Clone)]
pub struct LinearVelocity {
    pub m: Tensor,
    pub wt: Tensor,
    pub wr: Tensor,
}

impl LinearVelocity {
    pub fn new(m: Tensor, wt: Tensor, wr: Tensor) -> Result<Self, NetError> {
        let (d, d2) = m.dims2("linear_velocity").map_err(AdError::from)?;
        if d != d2 || wt.shape() != [d] || wr.shape() != [d] {
            return Err(NetError::Arch(format!(
                "inconsistent linear field shapes: m{:?} wt{:?} wr{:?}",
                m.shape(),
                wt.shape(),
                wr.shape()
            )));
        }
        Ok(Self { m, wt, wr })
    }

    fn dim(&self) -> usize {
        self.m.shape()[0]
    }
}

impl VelocityModel for LinearVelocity {
    fn action_dim(&self) -> usize {
        self.dim()
    }

    fn cond_dim(&self) -> usize {
        0
    }

    fn eval<V: Value>(&self, z: &V, r: &V, t: &V, _c: Option<&V>) -> Result<NetOutput<V>, NetError> {
        let batch = z.shape()[0];
        let d = self.dim();
        let m = z.lift(&self.m)?;
        let wt = z.lift(&self.wt)?;
        let wr = z.lift(&self.wr)?;
        let term_t = t.broadcast_col(d)?.mul(&wt.broadcast_row(batch)?)?;
        let term_r = r.broadcast_col(d)?.mul(&wr.broadcast_row(batch)?)?;
        let u = z.matmul(&m)?.add(&term_t)?.add(&term_r)?;
        Ok(NetOutput {
            features: u.clone(),
            u,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Dual;

    fn small_arch() -> Architecture {
        Architecture {
            action_dim: 2,
            cond_dim: 3,
            hidden_dims: vec![8, 8],
            time_embed_dim: 4,
            activation: Activation::Gelu,
            feature_layer: 1,
        }
    }

    fn batch_inputs(b: usize) -> (Tensor, Tensor, Tensor, Tensor) {
        let z = Tensor::from_raw(vec![b, 2], (0..2 * b).map(|i| 0.1 * i as f64 - 0.3).collect());
        let c = Tensor::from_raw(vec![b, 3], (0..3 * b).map(|i| 0.05 * i as f64).collect());
        let r = Tensor::from_raw(vec![b], (0..b).map(|i| 0.1 * i as f64).collect());
        let t = Tensor::from_raw(vec![b], (0..b).map(|i| 0.1 * i as f64 + 0.2).collect());
        (z, c, r, t)
    }

    #[test]
    fn validation_rejects_bad_architectures() {
        let mut a = small_arch();
        a.hidden_dims.clear();
        assert!(a.validate().is_err());
        let mut a = small_arch();
        a.time_embed_dim = 3;
        assert!(a.validate().is_err());
        let mut a = small_arch();
        a.feature_layer = 2;
        assert!(a.validate().is_err());
        assert!(small_arch().validate().is_ok());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let net1 = VelocityNet::init(small_arch(), 0).unwrap();
        let net2 = VelocityNet::init(small_arch(), 0).unwrap();
        let net3 = VelocityNet::init(small_arch(), 1).unwrap();
        for (a, b) in net1.params_flat().iter().zip(net2.params_flat()) {
            assert_eq!(*a, b);
        }
        assert!(net1
            .params_flat()
            .iter()
            .zip(net3.params_flat())
            .any(|(a, b)| *a != b));
        for ((fan_in, _), w) in small_arch().layer_dims().iter().zip(&net1.weights) {
            let bound = (6.0 / *fan_in as f64).sqrt();
            assert!(w.data().iter().all(|v| v.abs() <= bound));
        }
        assert!(net1.biases.iter().all(|b| b.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn forward_shapes_and_mode_agreement() {
        let net = VelocityNet::init(small_arch(), 3).unwrap();
        let (z, c, r, t) = batch_inputs(5);
        let out = net.eval(&z, &r, &t, Some(&c)).unwrap();
        assert_eq!(out.u.shape(), &[5, 2]);
        assert_eq!(out.features.shape(), &[5, 8]);

        let tape = Tape::new();
        let (_ids, tout) = net.eval_trainable(&tape, &z, &r, &t, Some(&c)).unwrap();
        assert_eq!(tout.u.value(), out.u);
        assert_eq!(tout.features.value(), out.features);

        let zd = Dual::constant(z.clone());
        let rd = Dual::constant(r.clone());
        let td = Dual::constant(t.clone());
        let cd = Dual::constant(c.clone());
        let dout = net.eval(&zd, &rd, &td, Some(&cd)).unwrap();
        assert_eq!(dout.u.to_tensor(), out.u);
    }

    #[test]
    fn embedding_values_stay_in_unit_band() {
        let freqs = time_embedding_freqs(16);
        assert_eq!(freqs.shape(), &[1, 8]);
        assert_eq!(freqs.data()[0], FREQ_MIN);
        assert!((freqs.data()[7] - FREQ_MAX).abs() < 1e-12);
        let t = Tensor::from_raw(vec![4], vec![0.0, 0.3, 0.7, 1.0]);
        let e = embed_time(&t, &freqs, 4).unwrap();
        assert_eq!(e.shape(), &[4, 16]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn time_range_is_enforced() {
        let net = VelocityNet::init(small_arch(), 0).unwrap();
        let (z, c, r, _) = batch_inputs(3);
        let bad_t = Tensor::from_raw(vec![3], vec![0.5, 1.2, 0.3]);
        let err = net.eval(&z, &r, &bad_t, Some(&c)).unwrap_err();
        match err {
            NetError::TimeOutOfRange { name, index, value } => {
                assert_eq!(name, "t");
                assert_eq!(index, 1);
                assert_eq!(value, 1.2);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn cond_width_is_enforced() {
        let net = VelocityNet::init(small_arch(), 0).unwrap();
        let (z, _, r, t) = batch_inputs(3);
        assert!(matches!(
            net.eval(&z, &r, &t, None),
            Err(NetError::BadWidth { .. })
        ));
        let bad_c = Tensor::zeros(vec![3, 2]);
        assert!(matches!(
            net.eval(&z, &r, &t, Some(&bad_c)),
            Err(NetError::BadWidth { .. })
        ));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let net = VelocityNet::init(small_arch(), 1).unwrap();
        let (z, c, r, t) = batch_inputs(4);
        let tape = Tape::new();
        let (ids, out) = net.eval_trainable(&tape, &z, &r, &t, Some(&c)).unwrap();
        let loss = out.u.square().unwrap().mean().unwrap();
        tape.freeze();
        let grads = tape.backward(&loss).unwrap();
        for id in ids {
            let g = grads.get(id).unwrap();
            assert!(g.data().iter().any(|v| *v != 0.0), "zero grad for leaf {id}");
        }
    }

    #[test]
    fn linear_velocity_tangent_matches_closed_form() {
        let d = 2;
        let m = Tensor::from_raw(vec![d, d], vec![0.5, -0.2, 0.3, 0.8]);
        let wt = Tensor::from_raw(vec![d], vec![0.7, -0.1]);
        let wr = Tensor::from_raw(vec![d], vec![0.2, 0.4]);
        let field = LinearVelocity::new(m.clone(), wt.clone(), wr.clone()).unwrap();

        let b = 3;
        let z = Tensor::from_raw(vec![b, d], vec![0.1, 0.2, -0.4, 0.5, 0.9, -0.3]);
        let v = Tensor::from_raw(vec![b, d], vec![1.0, -0.5, 0.3, 0.2, -0.8, 0.6]);
        let r = Tensor::zeros(vec![b]);
        let t = Tensor::from_raw(vec![b], vec![0.2, 0.5, 0.9]);

        let zd = Dual::with_tangent(z, v.clone()).unwrap();
        let rd = Dual::constant(r);
        let td = Dual::with_tangent(t, Tensor::ones(vec![b])).unwrap();
        let out = field.eval(&zd, &rd, &td, None).unwrap();
        let got = out.u.tangent_tensor();
        let expect = v.matmul(&m).unwrap().add(&wt.broadcast_row(b).unwrap()).unwrap();
        for (a, e) in got.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-14, "{a} vs {e}");
        }
    }

    #[test]
    fn serde_round_trip_preserves_parameters() {
        let net = VelocityNet::init(small_arch(), 9).unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back: VelocityNet = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        for (a, b) in net.params_flat().iter().zip(back.params_flat()) {
            assert_eq!(*a, b);
        }
    }
}
