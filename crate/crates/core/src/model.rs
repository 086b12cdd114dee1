//! The CaberNet network.
//!
//! ```text
//! alpha ──softmax──> g ──┐
//!                        ▼
//! X_{t-w..t-1} ──> g ⊙ x_t ──> LSTM (last hidden state) ──> Z
//!                                                           │
//! s = [mu, sigma, q1, q3] ──> MLP ──> (gamma, beta) ──> gamma·Z + beta ──> Linear ──> y_hat
//! ```
//!
//! `f = sigmoid(alpha)` is the regularizer-side view of the same gate logits:
//! `f_i` is the probability of a conceptual Bernoulli switch `S_i` on feature
//! `i`. It is never sampled; it only shapes `alpha` through the entropy and
//! sparsity penalties.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Tensor, TensorError, Var};
use crate::rng::Rng;
use crate::{Error, Result};

/// Initial gate logit shared by every feature.
pub const ALPHA_INIT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Input features.
    pub p: usize,
    /// Latent (LSTM hidden) size.
    pub d: usize,
    /// Window length.
    pub w: usize,
    /// Scale-encoder hidden width.
    pub scale_hidden: usize,
}

/// Global, sample-agnostic gate logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    /// `1 x p`.
    pub alpha: Tensor,
}

impl GateParams {
    pub fn uniform(p: usize) -> Self {
        Self {
            alpha: Tensor::full(&[1, p], ALPHA_INIT),
        }
    }

    pub fn p(&self) -> usize {
        self.alpha.len()
    }

    /// `g = softmax(alpha)`.
    pub fn weights(&self) -> Vec<f64> {
        let mut tape = Tape::new();
        let a = tape.constant(self.alpha.clone());
        let g = gate_weights(&mut tape, a);
        tape.value(g).data().to_vec()
    }

    /// `f = sigmoid(alpha)`.
    pub fn probs(&self) -> Vec<f64> {
        self.alpha.data().iter().map(|&a| sigmoid(a)).collect()
    }
}

/// Single-layer LSTM. The four gate blocks are fused column-wise in the order
/// input, forget, cell, output: `w_x` is `p x 4d`, `w_h` is `d x 4d` and
/// `bias` is `1 x 4d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub bias: Tensor,
}

/// Two-layer perceptron `R^4 -> R^h -> R^2` producing `(gamma, beta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleEncoderParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    /// `d x 1`.
    pub w: Tensor,
    /// `1 x 1`.
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaberNet {
    pub dims: ModelDims,
    pub feature_names: Vec<String>,
    /// When false, `(gamma, beta)` is fixed to `(1, 0)`.
    pub use_scale_encoder: bool,
    pub gate: GateParams,
    pub lstm: LstmParams,
    pub scale: ScaleEncoderParams,
    pub head: PredictorParams,
}

/// Names of the parameter tensors, in [`CaberNet::tensors`] order.
pub const PARAM_NAMES: [&str; 10] = [
    "gate.alpha",
    "lstm.w_x",
    "lstm.w_h",
    "lstm.bias",
    "scale.w1",
    "scale.b1",
    "scale.w2",
    "scale.b2",
    "head.w",
    "head.b",
];

fn uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

impl CaberNet {
    /// Randomly initialised model: weights uniform in `±1/sqrt(fan_in)`,
    /// gate logits all [`ALPHA_INIT`].
    pub fn new(dims: ModelDims, feature_names: Vec<String>, rng: &mut Rng) -> Result<Self> {
        let ModelDims { p, d, w, scale_hidden: h } = dims;
        if p == 0 || d == 0 || w == 0 || h == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {dims:?}")));
        }
        if feature_names.len() != p {
            return Err(Error::Config(format!(
                "{} feature names for p = {p}",
                feature_names.len()
            )));
        }
        Ok(Self {
            dims,
            feature_names,
            use_scale_encoder: true,
            gate: GateParams::uniform(p),
            lstm: LstmParams {
                w_x: uniform(rng, &[p, 4 * d], p),
                w_h: uniform(rng, &[d, 4 * d], d),
                bias: uniform(rng, &[1, 4 * d], d),
            },
            scale: ScaleEncoderParams {
                w1: uniform(rng, &[4, h], 4),
                b1: uniform(rng, &[1, h], 4),
                w2: uniform(rng, &[h, 2], h),
                b2: uniform(rng, &[1, 2], h),
            },
            head: PredictorParams {
                w: uniform(rng, &[d, 1], d),
                b: uniform(rng, &[1, 1], d),
            },
        })
    }

    /// Model with every weight zero and the default gate.
    pub fn zeroed(dims: ModelDims, feature_names: Vec<String>) -> Self {
        let ModelDims { p, d, scale_hidden: h, .. } = dims;
        Self {
            dims,
            feature_names,
            use_scale_encoder: true,
            gate: GateParams::uniform(p),
            lstm: LstmParams {
                w_x: Tensor::zeros(&[p, 4 * d]),
                w_h: Tensor::zeros(&[d, 4 * d]),
                bias: Tensor::zeros(&[1, 4 * d]),
            },
            scale: ScaleEncoderParams {
                w1: Tensor::zeros(&[4, h]),
                b1: Tensor::zeros(&[1, h]),
                w2: Tensor::zeros(&[h, 2]),
                b2: Tensor::zeros(&[1, 2]),
            },
            head: PredictorParams {
                w: Tensor::zeros(&[d, 1]),
                b: Tensor::zeros(&[1, 1]),
            },
        }
    }

    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.gate.alpha,
            &self.lstm.w_x,
            &self.lstm.w_h,
            &self.lstm.bias,
            &self.scale.w1,
            &self.scale.b1,
            &self.scale.w2,
            &self.scale.b2,
            &self.head.w,
            &self.head.b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.gate.alpha,
            &mut self.lstm.w_x,
            &mut self.lstm.w_h,
            &mut self.lstm.bias,
            &mut self.scale.w1,
            &mut self.scale.b1,
            &mut self.scale.w2,
            &mut self.scale.b2,
            &mut self.head.w,
            &mut self.head.b,
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Put every parameter on the tape. With `gate_trainable = false` the gate
    /// logits enter as a constant and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, gate_trainable: bool) -> ParamVars {
        let vars = self
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == 0 && !gate_trainable {
                    tape.constant((*t).clone())
                } else {
                    tape.variable((*t).clone())
                }
            })
            .collect::<Vec<_>>();
        ParamVars {
            vars: vars.try_into().expect("ten parameters"),
        }
    }

    /// Every parameter as a tape constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> ParamVars {
        let vars = self.tensors().map(|t| tape.constant(t.clone()));
        ParamVars { vars }
    }

    /// Final LSTM hidden state after consuming the (already gated) steps from
    /// a zero initial state. Each step is `batch x p`.
    pub fn encode(&self, tape: &mut Tape, pv: &ParamVars, steps: &[Var]) -> Result<Var> {
        let d = self.dims.d;
        let first = *steps
            .first()
            .ok_or_else(|| Error::Config("encode needs at least one time step".into()))?;
        let batch = tape.value(first).rows();
        let bias = tape.broadcast(pv.lstm_bias(), [batch, 4 * d])?;
        let mut state: Option<(Var, Var)> = None;
        for &x in steps {
            let xw = tape.matmul(x, pv.lstm_w_x())?;
            let mut gates = tape.add(xw, bias)?;
            if let Some((h, _)) = state {
                let hw = tape.matmul(h, pv.lstm_w_h())?;
                gates = tape.add(gates, hw)?;
            }
            let i_pre = tape.slice_cols(gates, 0, d)?;
            let f_pre = tape.slice_cols(gates, d, 2 * d)?;
            let g_pre = tape.slice_cols(gates, 2 * d, 3 * d)?;
            let o_pre = tape.slice_cols(gates, 3 * d, 4 * d)?;
            let i = tape.sigmoid(i_pre);
            let o = tape.sigmoid(o_pre);
            let cand = tape.tanh(g_pre);
            let ic = tape.mul(i, cand)?;
            let c = match state {
                Some((_, c_prev)) => {
                    let f = tape.sigmoid(f_pre);
                    let fc = tape.mul(f, c_prev)?;
                    tape.add(fc, ic)?
                }
                None => ic,
            };
            let tc = tape.tanh(c);
            let h = tape.mul(o, tc)?;
            state = Some((h, c));
        }
        Ok(state.expect("at least one step").0)
    }

    /// `(gamma, beta)` for each row of `s` (`k x 4`), as a `k x 2` node.
    pub fn domain_scale(&self, tape: &mut Tape, pv: &ParamVars, s: Var) -> Result<Var> {
        let (k, c) = tape.value(s).dims2();
        if c != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "domain_scale",
                lhs: tape.shape(s).to_vec(),
                rhs: vec![k, 4],
            }
            .into());
        }
        if !tape.value(s).all_finite() {
            return Err(Error::Numerical("non-finite domain statistics".into()));
        }
        if !self.use_scale_encoder {
            let mut fixed = Tensor::zeros(&[k, 2]);
            for r in 0..k {
                fixed.set(r, 0, 1.0);
            }
            return Ok(tape.constant(fixed));
        }
        let hw = tape.matmul(s, pv.scale_w1())?;
        let pre = tape.add_bcast(hw, pv.scale_b1())?;
        let hidden = tape.tanh(pre);
        let ow = tape.matmul(hidden, pv.scale_w2())?;
        Ok(tape.add_bcast(ow, pv.scale_b2())?)
    }

    /// `y_hat = (gamma Z + beta) W + b` with per-sample `gamma`, `beta`
    /// (`batch x 1` each).
    pub fn predict(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        z: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<Var> {
        let gz = tape.mul_bcast(z, gamma)?;
        let shifted = tape.add_bcast(gz, beta)?;
        let out = tape.matmul(shifted, pv.head_w())?;
        Ok(tape.add_bcast(out, pv.head_b())?)
    }

    /// Full forward pass over a batch whose raw (standardized, ungated) steps
    /// are already on the tape.
    pub fn forward_steps(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        steps: &[Var],
        ctx: &DomainContext<'_>,
    ) -> Result<ForwardOutput> {
        let batch = tape.value(steps[0]).rows();
        if ctx.sample_domain.len() != batch {
            return Err(Error::Config(format!(
                "{} domain labels for batch of {batch}",
                ctx.sample_domain.len()
            )));
        }
        if let Some(&bad) = ctx.sample_domain.iter().find(|&&e| e >= ctx.scale_stats.len()) {
            return Err(Error::UnknownDomain(format!("index {bad}")));
        }
        let g = gate_weights(tape, pv.alpha());
        let f = gate_probs(tape, pv.alpha());
        let gb = tape.broadcast(g, [batch, self.dims.p])?;
        let gated: Vec<Var> = steps
            .iter()
            .map(|&x| tape.mul(x, gb))
            .collect::<std::result::Result<_, _>>()?;
        let z = self.encode(tape, pv, &gated)?;

        let k = ctx.scale_stats.len();
        let s = Tensor::from_rows(&ctx.scale_stats.iter().map(|s| s.to_vec()).collect::<Vec<_>>());
        let s = tape.constant(s);
        let gb_out = self.domain_scale(tape, pv, s)?;
        let mut onehot = Tensor::zeros(&[batch, k]);
        for (i, &e) in ctx.sample_domain.iter().enumerate() {
            onehot.set(i, e, 1.0);
        }
        let onehot = tape.constant(onehot);
        let per_sample = tape.matmul(onehot, gb_out)?;
        let gamma = tape.slice_cols(per_sample, 0, 1)?;
        let beta = tape.slice_cols(per_sample, 1, 2)?;
        let yhat = self.predict(tape, pv, z, gamma, beta)?;
        Ok(ForwardOutput {
            yhat,
            z,
            g,
            f,
            scale: gb_out,
        })
    }

    /// Forward pass with the input steps added to the tape as constants.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        steps: &[Tensor],
        ctx: &DomainContext<'_>,
    ) -> Result<ForwardOutput> {
        self.check_steps(steps)?;
        let vars: Vec<Var> = steps.iter().map(|t| tape.constant(t.clone())).collect();
        self.forward_steps(tape, pv, &vars, ctx)
    }

    /// Predictions without keeping the tape.
    pub fn predict_batch(&self, steps: &[Tensor], ctx: &DomainContext<'_>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &pv, steps, ctx)?;
        Ok(tape.value(out.yhat).data().to_vec())
    }

    /// Latent representation `Z` (`batch x d`) without keeping the tape.
    pub fn latent(&self, steps: &[Tensor]) -> Result<Tensor> {
        self.check_steps(steps)?;
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape, false);
        let batch = steps[0].rows();
        let g = gate_weights(&mut tape, pv.alpha());
        let gb = tape.broadcast(g, [batch, self.dims.p])?;
        let mut gated = Vec::with_capacity(steps.len());
        for t in steps {
            let x = tape.constant(t.clone());
            gated.push(tape.mul(x, gb)?);
        }
        let z = self.encode(&mut tape, &pv, &gated)?;
        Ok(tape.value(z).clone())
    }

    fn check_steps(&self, steps: &[Tensor]) -> Result<()> {
        if steps.is_empty() {
            return Err(Error::Config("empty window".into()));
        }
        let batch = steps[0].rows();
        for s in steps {
            if s.dims2() != (batch, self.dims.p) {
                return Err(TensorError::ShapeMismatch {
                    op: "forward",
                    lhs: s.shape().to_vec(),
                    rhs: vec![batch, self.dims.p],
                }
                .into());
            }
        }
        Ok(())
    }
}

/// Per-batch domain bookkeeping for the scale encoder.
#[derive(Debug, Clone, Copy)]
pub struct DomainContext<'a> {
    /// Scale summary `s = [mu, sigma, q1, q3]` per domain in the batch.
    pub scale_stats: &'a [[f64; 4]],
    /// Index into `scale_stats` for each sample.
    pub sample_domain: &'a [usize],
}

/// Tape handles for the parameters, in [`PARAM_NAMES`] order.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub vars: [Var; 10],
}

impl ParamVars {
    pub fn alpha(&self) -> Var {
        self.vars[0]
    }
    fn lstm_w_x(&self) -> Var {
        self.vars[1]
    }
    fn lstm_w_h(&self) -> Var {
        self.vars[2]
    }
    fn lstm_bias(&self) -> Var {
        self.vars[3]
    }
    fn scale_w1(&self) -> Var {
        self.vars[4]
    }
    fn scale_b1(&self) -> Var {
        self.vars[5]
    }
    fn scale_w2(&self) -> Var {
        self.vars[6]
    }
    fn scale_b2(&self) -> Var {
        self.vars[7]
    }
    fn head_w(&self) -> Var {
        self.vars[8]
    }
    fn head_b(&self) -> Var {
        self.vars[9]
    }
}

pub struct ForwardOutput {
    /// `batch x 1`.
    pub yhat: Var,
    /// `batch x d`.
    pub z: Var,
    /// Gate weights `1 x p`.
    pub g: Var,
    /// Gate probabilities `1 x p`.
    pub f: Var,
    /// `(gamma, beta)` per domain, `k x 2`.
    pub scale: Var,
}

/// `g = softmax(alpha)` on the tape.
pub fn gate_weights(tape: &mut Tape, alpha: Var) -> Var {
    tape.row_softmax(alpha)
}

/// `f = sigmoid(alpha)` on the tape.
pub fn gate_probs(tape: &mut Tape, alpha: Var) -> Var {
    tape.sigmoid(alpha)
}

/// Scale every feature column of a `batch x p` step by the matching gate
/// weight.
pub fn apply_gate(tape: &mut Tape, x: Var, g: Var) -> Result<Var> {
    let (batch, p) = tape.value(x).dims2();
    if tape.value(g).len() != p {
        return Err(TensorError::ShapeMismatch {
            op: "apply_gate",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(g).to_vec(),
        }
        .into());
    }
    let gb = tape.broadcast(g, [batch, p])?;
    Ok(tape.mul(x, gb)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn dims(p: usize, d: usize, w: usize) -> ModelDims {
        ModelDims { p, d, w, scale_hidden: 4 }
    }

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|i| format!("x{i}")).collect()
    }

    fn random_steps(rng: &mut Rng, w: usize, batch: usize, p: usize) -> Vec<Tensor> {
        (0..w)
            .map(|_| Tensor::matrix(batch, p, (0..batch * p).map(|_| rng.random_range(-2.0..2.0)).collect()))
            .collect()
    }

    #[test]
    fn gate_weight_examples() {
        let g = GateParams::uniform(5).weights();
        for v in &g {
            assert_eq!(*v, 0.2);
        }
        let gate = GateParams {
            alpha: Tensor::matrix(1, 2, vec![3f64.ln(), 0.0]),
        };
        let g = gate.weights();
        assert!((g[0] - 0.75).abs() < 1e-15 && (g[1] - 0.25).abs() < 1e-15);
        let shifted = GateParams {
            alpha: Tensor::matrix(1, 2, vec![3f64.ln() + 7.3, 7.3]),
        };
        for (a, b) in g.iter().zip(shifted.weights()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_prob_examples() {
        let f = GateParams::uniform(3).probs();
        assert!((f[0] - 0.5025).abs() < 1e-4);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(50.0) > 1.0 - 1e-15);
    }

    #[test]
    fn apply_gate_scales_columns() {
        let mut rng = seeded(3);
        let x = Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(0.5..2.0)).collect());
        let g = Tensor::matrix(1, 3, vec![0.2, 0.5, 0.3]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let gv = tape.constant(g.clone());
        let out = apply_gate(&mut tape, xv, gv).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                let ratio = tape.value(out).get(r, c) / x.get(r, c);
                assert!((ratio - g.get(0, c)).abs() < 1e-15);
            }
        }
        let bad = tape.constant(Tensor::matrix(1, 2, vec![0.5, 0.5]));
        assert!(apply_gate(&mut tape, xv, bad).is_err());
    }

    #[test]
    fn zero_model_gives_zero_latent() {
        let m = CaberNet::zeroed(dims(3, 4, 5), names(3));
        let steps = vec![Tensor::zeros(&[2, 3]); 5];
        let z = m.latent(&steps).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_cell_equations() {
        // p = 1, d = 1: one LSTM cell from zero state.
        let mut m = CaberNet::zeroed(dims(1, 1, 1), names(1));
        m.lstm.w_x = Tensor::matrix(1, 4, vec![0.5, -0.3, 0.8, 1.2]);
        m.lstm.bias = Tensor::matrix(1, 4, vec![0.1, 0.2, -0.1, 0.05]);
        let x = 0.7; // gate weight is 1 for p = 1
        let i = sigmoid(0.5 * x + 0.1);
        let cand = (0.8 * x - 0.1).tanh();
        let o = sigmoid(1.2 * x + 0.05);
        let expect = o * (i * cand).tanh();
        let z = m.latent(&[Tensor::matrix(1, 1, vec![x])]).unwrap();
        assert!((z.item() - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_scale_encoder_and_predict_examples() {
        let m = CaberNet::zeroed(dims(2, 3, 2), names(2));
        let mut tape = Tape::new();
        let pv = m.bind(&mut tape, true);
        let s = tape.constant(Tensor::matrix(2, 4, vec![1.0, 2.0, 0.5, 1.5, 1.0, 2.0, 0.5, 1.5]));
        let gb = m.domain_scale(&mut tape, &pv, s).unwrap();
        assert!(tape.value(gb).data().iter().all(|&v| v == 0.0));

        let mut rng = seeded(1);
        let mut m = CaberNet::new(dims(2, 3, 2), names(2), &mut rng).unwrap();
        m.head.b = Tensor::matrix(1, 1, vec![0.4]);
        let mut tape = Tape::new();
        let pv = m.bind(&mut tape, true);
        let z = tape.constant(Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.5, 0.0, -0.4]));
        let zeros = tape.constant(Tensor::zeros(&[2, 1]));
        let beta = tape.constant(Tensor::full(&[2, 1], 0.7));
        let y0 = m.predict(&mut tape, &pv, z, zeros, beta).unwrap();
        let w_sum: f64 = m.head.w.data().iter().sum();
        for &v in tape.value(y0).data() {
            assert!((v - (0.7 * w_sum + 0.4)).abs() < 1e-15);
        }
        let ones = tape.constant(Tensor::ones(&[2, 1]));
        let zero_beta = tape.constant(Tensor::zeros(&[2, 1]));
        let plain = m.predict(&mut tape, &pv, z, ones, zero_beta).unwrap();
        let direct = tape.value(z).matmul(&m.head.w).unwrap();
        for r in 0..2 {
            assert!((tape.value(plain).get(r, 0) - direct.get(r, 0) - 0.4).abs() < 1e-15);
        }
        // Doubling gamma doubles the Z-dependent part.
        let two = tape.constant(Tensor::full(&[2, 1], 2.0));
        let doubled = m.predict(&mut tape, &pv, z, two, zero_beta).unwrap();
        for r in 0..2 {
            let a = tape.value(plain).get(r, 0) - 0.4;
            let b = tape.value(doubled).get(r, 0) - 0.4;
            assert!((b - 2.0 * a).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_stats_give_identical_scale() {
        let mut rng = seeded(9);
        let m = CaberNet::new(dims(2, 3, 2), names(2), &mut rng).unwrap();
        let mut tape = Tape::new();
        let pv = m.bind(&mut tape, true);
        let s = tape.constant(Tensor::matrix(3, 4, vec![
            1.0, 2.0, 0.5, 1.5, 1.0, 2.0, 0.5, 1.5, 3.0, 2.0, 0.5, 1.5,
        ]));
        let out = m.domain_scale(&mut tape, &pv, s).unwrap();
        let v = tape.value(out);
        assert_eq!(v.row(0), v.row(1));
        assert_ne!(v.row(0), v.row(2));
        let bad = tape.constant(Tensor::matrix(1, 4, vec![f64::NAN, 0.0, 0.0, 0.0]));
        assert!(m.domain_scale(&mut tape, &pv, bad).is_err());
    }

    #[test]
    fn batch_forward_equals_per_sample_and_permutes() {
        let mut rng = seeded(11);
        let m = CaberNet::new(dims(3, 4, 3), names(3), &mut rng).unwrap();
        let steps = random_steps(&mut rng, 3, 5, 3);
        let stats = [[1.0, 0.5, 0.6, 1.4], [2.0, 1.0, 1.2, 2.9]];
        let dom = [0, 1, 0, 1, 1];
        let ctx = DomainContext { scale_stats: &stats, sample_domain: &dom };
        let full = m.predict_batch(&steps, &ctx).unwrap();
        for i in 0..5 {
            let one: Vec<Tensor> = steps.iter().map(|s| s.select_rows(&[i])).collect();
            let d1 = [dom[i]];
            let c1 = DomainContext { scale_stats: &stats, sample_domain: &d1 };
            let y = m.predict_batch(&one, &c1).unwrap();
            assert!((y[0] - full[i]).abs() < 1e-14);
        }
        let perm = [4, 2, 0, 3, 1];
        let steps_p: Vec<Tensor> = steps.iter().map(|s| s.select_rows(&perm)).collect();
        let dom_p: Vec<usize> = perm.iter().map(|&i| dom[i]).collect();
        let ctx_p = DomainContext { scale_stats: &stats, sample_domain: &dom_p };
        let yp = m.predict_batch(&steps_p, &ctx_p).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((yp[k] - full[i]).abs() < 1e-14);
        }
        let bad = [0, 1, 0, 1, 2];
        let ctx_bad = DomainContext { scale_stats: &stats, sample_domain: &bad };
        assert!(matches!(m.predict_batch(&steps, &ctx_bad), Err(Error::UnknownDomain(_))));
    }

    #[test]
    fn alpha_receives_gradient() {
        let mut rng = seeded(5);
        let m = CaberNet::new(dims(3, 4, 3), names(3), &mut rng).unwrap();
        let steps = random_steps(&mut rng, 3, 6, 3);
        let stats = [[1.0, 0.5, 0.6, 1.4]];
        let dom = [0; 6];
        let ctx = DomainContext { scale_stats: &stats, sample_domain: &dom };
        let mut tape = Tape::new();
        let pv = m.bind(&mut tape, true);
        let out = m.forward(&mut tape, &pv, &steps, &ctx).unwrap();
        let loss = tape.mean(out.yhat);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(pv.alpha()).data().iter().all(|v| v.abs() > 0.0));

        let mut tape = Tape::new();
        let pv = m.bind(&mut tape, false);
        let out = m.forward(&mut tape, &pv, &steps, &ctx).unwrap();
        let loss = tape.mean(out.yhat);
        let g = tape.backward(loss).unwrap();
        assert!(g.try_get(pv.alpha()).is_none());
    }

    #[test]
    fn latent_ignores_target_scale() {
        let mut rng = seeded(21);
        let m = CaberNet::new(dims(3, 4, 3), names(3), &mut rng).unwrap();
        let steps = random_steps(&mut rng, 3, 4, 3);
        let z1 = m.latent(&steps).unwrap();
        let dom = [0; 4];
        for s in [[1.0, 0.5, 0.6, 1.4], [10.0, 5.0, 6.0, 14.0]] {
            let stats = [s];
            let ctx = DomainContext { scale_stats: &stats, sample_domain: &dom };
            let mut tape = Tape::new();
            let pv = m.bind(&mut tape, true);
            let out = m.forward(&mut tape, &pv, &steps, &ctx).unwrap();
            assert_eq!(tape.value(out.z), &z1);
        }
    }
}
