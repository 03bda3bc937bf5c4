//! Consistency regularizers tying the current model to the previous-task
//! teacher, plus the weighted composite objective.
//!
//! All three terms treat every teacher quantity as data: teachers are
//! evaluated off-tape and enter the graph as constants, so gradients flow
//! only through the student.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const PROB_FLOOR: f64 = 1e-12;
const FULL_PRECOND_MAX_DIM: usize = 64;

/// Weights (kappa, lambda, eta) on the three consistency terms.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CcdWeights {
    pub kappa: f64,
    pub lambda: f64,
    pub eta: f64,
}

impl Default for CcdWeights {
    fn default() -> Self {
        CcdWeights { kappa: 1e-5, lambda: 1e-5, eta: 1e-5 }
    }
}

impl CcdWeights {
    pub fn zeros() -> Self {
        CcdWeights { kappa: 0.0, lambda: 0.0, eta: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("kappa", self.kappa), ("lambda", self.lambda), ("eta", self.eta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Curvature model for the Bregman divergence.
#[derive(Clone, Debug, PartialEq)]
pub enum Preconditioner {
    Identity,
    Diag(Vec<f64>),
    Full { dim: usize, data: Vec<f64> },
}

impl Preconditioner {
    pub fn dim_matches(&self, d: usize) -> bool {
        match self {
            Preconditioner::Identity => true,
            Preconditioner::Diag(v) => v.len() == d,
            Preconditioner::Full { dim, .. } => *dim == d,
        }
    }
}

/// Assemble `mean(g g^T) + damping I` (or its diagonal) from per-sample
/// input gradients.
pub fn fisher_from_grads(grads: &Tensor, diag_only: bool, damping: f64) -> Result<Preconditioner> {
    let (b, d) = grads.as_2d();
    if b == 0 {
        return Err(Error::invalid("fisher preconditioner needs at least one sample"));
    }
    if !(damping.is_finite() && damping >= 0.0) {
        return Err(Error::invalid("damping must be finite and >= 0"));
    }
    if diag_only {
        let mut diag = vec![damping; d];
        for r in 0..b {
            for (o, &g) in diag.iter_mut().zip(grads.row(r)) {
                *o += g * g / b as f64;
            }
        }
        Ok(Preconditioner::Diag(diag))
    } else {
        if d > FULL_PRECOND_MAX_DIM {
            return Err(Error::invalid(format!(
                "full preconditioner limited to dim <= {FULL_PRECOND_MAX_DIM}, got {d}"
            )));
        }
        let mut m = vec![0.0; d * d];
        for r in 0..b {
            let g = grads.row(r);
            for i in 0..d {
                for j in 0..d {
                    m[i * d + j] += g[i] * g[j] / b as f64;
                }
            }
        }
        for i in 0..d {
            m[i * d + i] += damping;
        }
        Ok(Preconditioner::Full { dim: d, data: m })
    }
}

/// Input-space curvature of the teacher around the replayed batch: gradients
/// of the surrogate scalar `s = 1/2 ||eps_teacher(x_hat_t, y_hat, t)||^2`
/// w.r.t. `x_hat_t`, averaged as an outer product.
pub fn fisher_preconditioner(
    teacher: &Denoiser,
    x_hat_t: &Tensor,
    y_hat: &[usize],
    t: &[usize],
    diag_only: bool,
    damping: f64,
) -> Result<Preconditioner> {
    let mut tape = Tape::new();
    let mv = teacher.register_constants(&mut tape);
    let xv = tape.input(x_hat_t.clone());
    let (eps, _) = teacher.forward_on_tape(&mut tape, &mv, xv, t, y_hat)?;
    let sq = tape.sq_norm(eps)?;
    let s = tape.scale(sq, 0.5)?;
    let grads = tape.backward(s)?;
    let g = grads
        .wrt(xv)
        .ok_or_else(|| Error::invalid("teacher surrogate yielded no input gradient"))?;
    fisher_from_grads(g, diag_only, damping)
}

/// `1/2 (u - v)^T phi (u - v)` for a single pair.
pub fn bregman_div(u: &[f64], v: &[f64], precond: &Preconditioner) -> Result<f64> {
    if u.len() != v.len() || !precond.dim_matches(u.len()) {
        return Err(Error::shape("bregman_div", format!("u {} vs v {}", u.len(), v.len())));
    }
    let d = u.len();
    let diff: Vec<f64> = u.iter().zip(v).map(|(&a, &b)| a - b).collect();
    let q = match precond {
        Preconditioner::Identity => diff.iter().map(|&x| x * x).sum::<f64>(),
        Preconditioner::Diag(w) => diff.iter().zip(w).map(|(&x, &p)| p * x * x).sum(),
        Preconditioner::Full { data, .. } => {
            let mut acc = 0.0;
            for i in 0..d {
                let mut row = 0.0;
                for j in 0..d {
                    row += data[i * d + j] * diff[j];
                }
                acc += diff[i] * row;
            }
            acc
        }
    };
    Ok(0.5 * q)
}

/// Noise-space consistency: mean Bregman divergence between the student's
/// predictions and the (constant) teacher predictions.
pub fn ikc_loss_on_tape(
    tape: &mut Tape,
    student_eps: Var,
    teacher_eps: &Tensor,
    precond: &Preconditioner,
) -> Result<Var> {
    let (b, d) = tape.value(student_eps).as_2d();
    let (tb, td) = teacher_eps.as_2d();
    if (b, d) != (tb, td) || !precond.dim_matches(d) {
        return Err(Error::shape(
            "ikc_loss",
            format!("student {b}x{d} vs teacher {tb}x{td}"),
        ));
    }
    let teacher = tape.constant(teacher_eps.clone());
    let diff = tape.sub(student_eps, teacher)?;
    let quad = match precond {
        Preconditioner::Identity => tape.sq_norm(diff)?,
        Preconditioner::Diag(w) => {
            let mut rows = Vec::with_capacity(b * d);
            for _ in 0..b {
                rows.extend_from_slice(w);
            }
            let wc = tape.constant(Tensor::matrix(b, d, rows)?);
            let d2 = tape.mul(diff, diff)?;
            let wd = tape.mul(d2, wc)?;
            tape.sum(wd)?
        }
        Preconditioner::Full { dim, data } => {
            let phi = tape.constant(Tensor::matrix(*dim, *dim, data.clone())?);
            let q = tape.matmul(diff, phi)?;
            let qd = tape.mul(q, diff)?;
            tape.sum(qd)?
        }
    };
    tape.scale(quad, 0.5 / b as f64)
}

/// Alignment weight `alpha_bar^2 / (1 - alpha_bar^2)`, clamped at `w_max`.
/// Pass `f64::INFINITY` to disable the clamp; then a noiseless step errors.
pub fn ukc_weight(schedule: &NoiseSchedule, t: usize, w_max: f64) -> Result<f64> {
    schedule.validate_t(t)?;
    let ab2 = schedule.alpha_bar(t).powi(2);
    let raw = ab2 / (1.0 - ab2);
    if !raw.is_finite() {
        if w_max.is_finite() {
            return Ok(w_max);
        }
        return Err(Error::invalid(format!(
            "alignment weight singular at t={t} (alpha_bar=1) and no clamp set"
        )));
    }
    Ok(raw.min(w_max))
}

/// Mean-alignment consistency: per-pair weighted squared distance between
/// student and teacher reverse means, averaged over the batch. The teacher
/// mean is data; only `student_mu` carries gradient.
pub fn ukc_loss_on_tape(
    tape: &mut Tape,
    schedule: &NoiseSchedule,
    student_mu: Var,
    teacher_mu: &Tensor,
    t: &[usize],
    w_max: f64,
) -> Result<Var> {
    let (b, d) = tape.value(student_mu).as_2d();
    if teacher_mu.as_2d() != (b, d) || t.len() != b {
        return Err(Error::shape(
            "ukc_loss",
            format!("student {:?} vs teacher {:?}", tape.value(student_mu).shape(), teacher_mu.shape()),
        ));
    }
    let mut w = Tensor::zeros(vec![b, d]);
    for r in 0..b {
        let wi = ukc_weight(schedule, t[r], w_max)? / b as f64;
        for v in &mut w.data_mut()[r * d..(r + 1) * d] {
            *v = wi;
        }
    }
    let teacher = tape.constant(teacher_mu.clone());
    let wc = tape.constant(w);
    let diff = tape.sub(student_mu, teacher)?;
    let d2 = tape.mul(diff, diff)?;
    let wd = tape.mul(d2, wc)?;
    tape.sum(wd)
}

/// Label-space weight `alpha_bar / beta_bar`, clamped at `clamp`.
pub fn lkc_weight(schedule: &NoiseSchedule, t: usize, clamp: f64) -> Result<f64> {
    schedule.validate_t(t)?;
    let raw = schedule.alpha_bar(t) / schedule.beta_bar(t);
    if !raw.is_finite() {
        if clamp.is_finite() {
            return Ok(clamp);
        }
        return Err(Error::invalid(format!(
            "label weight singular at t={t} (beta_bar=0) and no clamp set"
        )));
    }
    Ok(raw.min(clamp))
}

/// KL(p || q) with both distributions floored at [`PROB_FLOOR`] inside the
/// logs; zero-mass p entries contribute exactly zero.
pub fn kl_floored(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi <= 0.0 {
                0.0
            } else {
                pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln())
            }
        })
        .sum()
}

/// Label-space consistency: mean over pairs of
/// `w(t_i) * KL(teacher_probs_i || student_probs_i)`.
///
/// The student's class distribution is produced here from (constant)
/// penultimate features and the taped probe head, so gradients reach the
/// probe parameters only — never the trunk.
pub fn lkc_loss_on_tape(
    tape: &mut Tape,
    student: &Denoiser,
    student_vars: &crate::model::ModelVars,
    x0_current: &Tensor,
    teacher_probs: &Tensor,
    t: &[usize],
    schedule: &NoiseSchedule,
    clamp: f64,
) -> Result<Var> {
    let (b, l) = teacher_probs.as_2d();
    let (xb, _) = x0_current.as_2d();
    if xb != b || t.len() != b || l != student.arch().label_count {
        return Err(Error::shape(
            "lkc_loss",
            format!("{} pairs, teacher probs {:?}", xb, teacher_probs.shape()),
        ));
    }
    let feats = tape.constant(student.probe_features(x0_current)?);
    let logits = student.head_on_tape(tape, student_vars, feats)?;
    let q = tape.softmax(logits)?;
    let qf = tape.clamp_min(q, PROB_FLOOR)?;
    let logq = tape.log(qf)?;

    // taped part: -sum_i (w_i/b) sum_j p_ij ln q_ij
    let mut pw = teacher_probs.clone();
    let mut const_part = 0.0;
    for r in 0..b {
        let wi = lkc_weight(schedule, t[r], clamp)? / b as f64;
        for v in &mut pw.data_mut()[r * l..(r + 1) * l] {
            let p = *v;
            if p > 0.0 {
                const_part += wi * p * p.max(PROB_FLOOR).ln();
            }
            *v = p * wi;
        }
    }
    let pwc = tape.constant(pw);
    let cross = tape.mul(pwc, logq)?;
    let cross_sum = tape.sum(cross)?;
    let neg_cross = tape.scale(cross_sum, -1.0)?;
    let cpart = tape.constant(Tensor::scalar(const_part));
    tape.add(neg_cross, cpart)
}

/// Weighted composite `base + kappa*ikc + lambda*ukc + eta*lkc`. Every term's
/// value is checked for finiteness; the offending term is named on failure.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    base: Var,
    ikc: Option<Var>,
    ukc: Option<Var>,
    lkc: Option<Var>,
    weights: &CcdWeights,
) -> Result<Var> {
    weights.validate()?;
    let finite = |tape: &Tape, v: Var, term: &'static str| -> Result<()> {
        if !tape.value(v).all_finite() {
            return Err(Error::NonFiniteLoss { term });
        }
        Ok(())
    };
    finite(tape, base, "base")?;
    let mut total = base;
    for (term, var, w) in [
        ("ikc", ikc, weights.kappa),
        ("ukc", ukc, weights.lambda),
        ("lkc", lkc, weights.eta),
    ] {
        if let Some(v) = var {
            finite(tape, v, term)?;
            if w != 0.0 {
                let scaled = tape.scale(v, w)?;
                total = tape.add(total, scaled)?;
            }
        }
    }
    finite(tape, total, "total")?;
    Ok(total)
}
