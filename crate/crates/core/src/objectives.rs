//! Training objectives: NMSE, the gate regularizers and their tipping point,
//! difficulty-aware domain aggregation, the cross-domain variance penalty and
//! the latent independence penalty.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::{stats, Error, Result};

/// Smallest admissible `sum(y^2)` for NMSE.
pub const NMSE_EPS: f64 = 1e-12;
/// Gate probabilities are clamped to `[GATE_CLAMP, 1 - GATE_CLAMP]` before logs.
pub const GATE_CLAMP: f64 = 1e-7;
/// Threshold below which a latent column counts as dead in the correlation.
pub const NORM_EPS: f64 = 1e-12;
/// Threshold for coefficient-of-variation denominators and difficulty.
pub const CV_EPS: f64 = 1e-12;

/// Strengths of the auxiliary loss terms; the task term has weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegularizerWeights {
    pub lambda_be: f64,
    pub lambda_l1: f64,
    pub lambda_var: f64,
    pub lambda_indy: f64,
}

impl Default for RegularizerWeights {
    fn default() -> Self {
        Self {
            lambda_be: 0.01,
            lambda_l1: 0.01,
            lambda_var: 0.1,
            lambda_indy: 0.1,
        }
    }
}

impl RegularizerWeights {
    pub fn zero() -> Self {
        Self {
            lambda_be: 0.0,
            lambda_l1: 0.0,
            lambda_var: 0.0,
            lambda_indy: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_be", self.lambda_be),
            ("lambda_l1", self.lambda_l1),
            ("lambda_var", self.lambda_var),
            ("lambda_indy", self.lambda_indy),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Unstable equilibrium `sigmoid(lambda_l1 / lambda_be)` of the combined
    /// gate regularizer.
    pub fn tipping_point(&self) -> Result<f64> {
        tipping_point(self)
    }
}

pub fn tipping_point(w: &RegularizerWeights) -> Result<f64> {
    if w.lambda_be <= 0.0 {
        return Err(Error::UndefinedTippingPoint);
    }
    Ok(sigmoid(w.lambda_l1 / w.lambda_be))
}

/// `sum((y - yhat)^2) / sum(y^2)`.
pub fn nmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.is_empty() || y.len() != yhat.len() {
        return Err(Error::Numerical(format!(
            "nmse: lengths {} and {}",
            y.len(),
            yhat.len()
        )));
    }
    let den: f64 = y.iter().map(|v| v * v).sum();
    if den <= NMSE_EPS {
        return Err(Error::DegenerateTarget { sum_sq: den });
    }
    let num: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(num / den)
}

/// Differentiable NMSE of `yhat` against the constant target `y`.
pub fn nmse_on_tape(tape: &mut Tape, y: &Tensor, yhat: Var) -> Result<Var> {
    let den: f64 = y.data().iter().map(|v| v * v).sum();
    if den <= NMSE_EPS {
        return Err(Error::DegenerateTarget { sum_sq: den });
    }
    let yv = tape.constant(y.clone());
    let diff = tape.sub(yhat, yv)?;
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / den))
}

/// `sum_i f_i`.
pub fn l1_sparsity(tape: &mut Tape, f: Var) -> Var {
    tape.sum(f)
}

/// `-sum_i [f_i ln f_i + (1 - f_i) ln(1 - f_i)]` with `f` clamped away
/// from 0 and 1.
pub fn bernoulli_entropy(tape: &mut Tape, f: Var) -> Result<Var> {
    let fc = tape.clamp(f, GATE_CLAMP, 1.0 - GATE_CLAMP);
    let one_minus = tape.affine(fc, -1.0, 1.0);
    let lf = tape.log(fc)?;
    let l1f = tape.log(one_minus)?;
    let a = tape.mul(fc, lf)?;
    let b = tape.mul(one_minus, l1f)?;
    let s = tape.add(a, b)?;
    let total = tape.sum(s);
    Ok(tape.neg(total))
}

/// Binary entropy of one probability (natural log), with the same clamp.
pub fn binary_entropy(f: f64) -> f64 {
    let f = f.clamp(GATE_CLAMP, 1.0 - GATE_CLAMP);
    -(f * f.ln() + (1.0 - f) * (1.0 - f).ln())
}

/// `lambda_be * L_BE(f) + lambda_l1 * L_l1(f)`.
pub fn combined_reg(tape: &mut Tape, f: Var, w: &RegularizerWeights) -> Result<Var> {
    let be = bernoulli_entropy(tape, f)?;
    let l1 = l1_sparsity(tape, f);
    let a = tape.scale(be, w.lambda_be);
    let b = tape.scale(l1, w.lambda_l1);
    Ok(tape.add(a, b)?)
}

/// Closed-form `d L_l1BE / d alpha_i` at `f_i = sigmoid(alpha_i)`.
pub fn combined_reg_grad(f: f64, w: &RegularizerWeights) -> f64 {
    (w.lambda_be * ((1.0 - f) / f).ln() + w.lambda_l1) * f * (1.0 - f)
}

/// Coefficients of variation and the resulting difficulty of one domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Difficulty {
    pub cv_y: f64,
    pub cv_x: f64,
    pub difficulty: f64,
    pub weight: f64,
}

fn cv(x: &[f64]) -> f64 {
    let m = stats::mean_abs(x);
    if m <= CV_EPS {
        0.0
    } else {
        stats::std(x) / m
    }
}

/// `CV_Y = Std(Y)/E|Y|`, `CV_X` the mean per-feature CV,
/// `d = (CV_Y + CV_X)/2`, `w = 1/d`. Features with `E|X_j| <= eps` contribute
/// a CV of zero.
pub fn difficulty(domain: &str, y: &[f64], x: &Tensor) -> Result<Difficulty> {
    if y.len() < 2 {
        return Err(Error::Integrity(format!(
            "domain {domain}: difficulty needs at least 2 samples"
        )));
    }
    let cv_y = cv(y);
    let p = x.cols();
    let cv_x = (0..p).map(|j| cv(&x.column(j))).sum::<f64>() / p as f64;
    let d = 0.5 * (cv_y + cv_x);
    if d <= CV_EPS {
        return Err(Error::DegenerateDomain {
            domain: domain.to_string(),
            difficulty: d,
        });
    }
    Ok(Difficulty {
        cv_y,
        cv_x,
        difficulty: d,
        weight: 1.0 / d,
    })
}

/// Difficulty of every `(id, y, x)` training split.
pub fn difficulty_scores<'a>(
    domains: impl IntoIterator<Item = (&'a str, &'a [f64], &'a Tensor)>,
) -> Result<Vec<(String, Difficulty)>> {
    domains
        .into_iter()
        .map(|(id, y, x)| Ok((id.to_string(), difficulty(id, y, x)?)))
        .collect()
}

/// `L_target = (1/|E|) sum_e w_e L_e`; also returns the weighted terms.
/// The returned mean doubles as `L_bar` for [`variance_loss`].
pub fn weighted_target_loss(
    tape: &mut Tape,
    per_domain: &[Var],
    weights: &[f64],
) -> Result<(Var, Vec<Var>)> {
    assert_eq!(per_domain.len(), weights.len());
    assert!(!per_domain.is_empty(), "no domains in batch");
    let weighted: Vec<Var> = per_domain
        .iter()
        .zip(weights)
        .map(|(&l, &w)| tape.scale(l, w))
        .collect();
    let stacked = stack_scalars(tape, &weighted)?;
    Ok((tape.mean(stacked), weighted))
}

/// `(1/|E|) sum_e (w_e L_e - L_bar)^2`.
pub fn variance_loss(tape: &mut Tape, weighted: &[Var], mean: Var) -> Result<Var> {
    let stacked = stack_scalars(tape, weighted)?;
    let m = tape.broadcast(mean, [1, weighted.len()])?;
    let d = tape.sub(stacked, m)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

fn stack_scalars(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let as_mats: Vec<Var> = xs
        .iter()
        .map(|&v| tape.broadcast(v, [1, 1]))
        .collect::<std::result::Result<_, _>>()?;
    Ok(tape.concat(&as_mats, 1)?)
}

/// Mean absolute off-diagonal cosine correlation of the latent columns,
/// `(1/(d(d-1))) sum_{i != j} |C_ij|`, `C_ij = <Z_i, Z_j> / (|Z_i| |Z_j|)`.
///
/// Columns with norm below [`NORM_EPS`] contribute zero correlation. For
/// `d < 2` the penalty is zero.
pub fn independence_loss(tape: &mut Tape, z: Var) -> Result<Var> {
    let (n, d) = tape.value(z).dims2();
    if d < 2 {
        log::warn!("independence loss undefined for d = {d}; using 0");
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(zero);
    }
    if n < 2 {
        return Err(Error::Numerical("independence loss needs batch >= 2".into()));
    }
    let sq = tape.square(z);
    let ss = tape.sum_axis(sq, 0)?;
    let alive: Vec<bool> = tape.value(ss).data().iter().map(|&v| v.sqrt() > NORM_EPS).collect();
    let ss = tape.clamp(ss, NORM_EPS * NORM_EPS, f64::INFINITY);
    let norms = tape.sqrt(ss)?;
    let zt = tape.transpose(z);
    let gram = tape.matmul(zt, z)?;
    let nt = tape.transpose(norms);
    let outer = tape.matmul(nt, norms)?;
    let c = tape.div(gram, outer)?;
    let mut mask = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..d {
            if i != j && alive[i] && alive[j] {
                mask.set(i, j, 1.0);
            }
        }
    }
    let mask = tape.constant(mask);
    let a = tape.abs(c);
    let masked = tape.mul(a, mask)?;
    let s = tape.sum(masked);
    Ok(tape.scale(s, 1.0 / (d * (d - 1)) as f64))
}

/// [`independence_loss`] evaluated on a plain matrix.
pub fn independence_value(z: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let l = independence_loss(&mut tape, zv)?;
    Ok(tape.value(l).item())
}

/// How per-domain losses are combined into the task loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// NMSE over the whole batch, ignoring domain membership.
    Pooled,
    /// Difficulty-weighted mean of per-domain NMSE.
    DomainWeighted,
}

/// Which terms enter the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveTerms {
    pub aggregation: Aggregation,
    pub variance: bool,
    pub independence: bool,
    pub gate: bool,
}

impl ActiveTerms {
    /// Weights with inactive terms zeroed.
    pub fn effective(&self, w: &RegularizerWeights) -> RegularizerWeights {
        RegularizerWeights {
            lambda_be: if self.gate { w.lambda_be } else { 0.0 },
            lambda_l1: if self.gate { w.lambda_l1 } else { 0.0 },
            lambda_var: if self.variance { w.lambda_var } else { 0.0 },
            lambda_indy: if self.independence { w.lambda_indy } else { 0.0 },
        }
    }
}

/// Everything [`total_loss`] needs from a forward pass.
pub struct LossInputs<'a> {
    pub yhat: Var,
    /// Targets, `batch x 1`.
    pub y: &'a Tensor,
    /// Position of each sample's domain in `domain_ids`.
    pub sample_domain: &'a [usize],
    pub domain_ids: &'a [String],
    /// Difficulty weight per entry of `domain_ids`.
    pub domain_weights: &'a [f64],
    pub z: Var,
    /// Gate probabilities `f = sigmoid(alpha)`.
    pub f: Var,
}

/// Scalar summary of one loss evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub per_domain: Vec<(String, f64)>,
    pub target: f64,
    pub mean_weighted: f64,
    pub var: f64,
    pub indy: f64,
    pub l1: f64,
    pub be: f64,
    pub total: f64,
    /// Weights actually applied (inactive terms zeroed).
    pub weights: RegularizerWeights,
}

impl LossBundle {
    /// `target + lambda_var var + lambda_indy indy + lambda_be be + lambda_l1 l1`.
    pub fn recombine(&self) -> f64 {
        let w = &self.weights;
        self.target
            + w.lambda_var * self.var
            + w.lambda_indy * self.indy
            + w.lambda_be * self.be
            + w.lambda_l1 * self.l1
    }
}

pub struct LossGraph {
    pub total: Var,
    pub bundle: LossBundle,
}

/// Assemble the training loss. Per-domain losses use only the samples of
/// each domain present in the batch; absent domains contribute nothing.
pub fn total_loss(
    tape: &mut Tape,
    inp: &LossInputs<'_>,
    weights: &RegularizerWeights,
    active: ActiveTerms,
) -> Result<LossGraph> {
    let eff = active.effective(weights);
    let n = inp.y.rows();
    assert_eq!(inp.sample_domain.len(), n);

    let mut present: Vec<usize> = inp.sample_domain.to_vec();
    present.sort_unstable();
    present.dedup();

    let mut per_domain = Vec::with_capacity(present.len());
    let mut per_domain_vals = Vec::with_capacity(present.len());
    for &e in &present {
        let rows: Vec<usize> = (0..n).filter(|&i| inp.sample_domain[i] == e).collect();
        let mut sel = Tensor::zeros(&[rows.len(), n]);
        for (k, &r) in rows.iter().enumerate() {
            sel.set(k, r, 1.0);
        }
        let sel = tape.constant(sel);
        let yh = tape.matmul(sel, inp.yhat)?;
        let ye = inp.y.select_rows(&rows);
        let le = nmse_on_tape(tape, &ye, yh)?;
        per_domain_vals.push((inp.domain_ids[e].clone(), tape.value(le).item()));
        per_domain.push(le);
    }
    let w_present: Vec<f64> = present.iter().map(|&e| inp.domain_weights[e]).collect();
    let (mean_weighted, weighted) = weighted_target_loss(tape, &per_domain, &w_present)?;
    let l_var = variance_loss(tape, &weighted, mean_weighted)?;

    let target = match active.aggregation {
        Aggregation::Pooled => nmse_on_tape(tape, inp.y, inp.yhat)?,
        Aggregation::DomainWeighted => mean_weighted,
    };
    let l_indy = independence_loss(tape, inp.z)?;
    let l_be = bernoulli_entropy(tape, inp.f)?;
    let l_l1 = l1_sparsity(tape, inp.f);

    let mut total = target;
    for (term, lambda) in [
        (l_var, eff.lambda_var),
        (l_indy, eff.lambda_indy),
        (l_be, eff.lambda_be),
        (l_l1, eff.lambda_l1),
    ] {
        if lambda > 0.0 {
            let scaled = tape.scale(term, lambda);
            total = tape.add(total, scaled)?;
        }
    }

    let bundle = LossBundle {
        per_domain: per_domain_vals,
        target: tape.value(target).item(),
        mean_weighted: tape.value(mean_weighted).item(),
        var: tape.value(l_var).item(),
        indy: tape.value(l_indy).item(),
        l1: tape.value(l_l1).item(),
        be: tape.value(l_be).item(),
        total: tape.value(total).item(),
        weights: eff,
    };
    Ok(LossGraph { total, bundle })
}
