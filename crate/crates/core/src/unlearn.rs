//! Approximate unlearning algorithms: gradient ascent on the erased set,
//! a one-shot damped inverse-Hessian update, and saliency-masked ascent.
//!
//! The shared objective is L_u(D; theta) = -CE(f_theta(X_D), y_D), so
//! minimizing L_u raises the loss on erased data.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{loss_ce, params_to_tape, ModelParams};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HbuSolver {
    /// Assemble the full damped Hessian and solve directly.
    Explicit,
    ConjugateGradient { max_iters: usize, tol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectiveKind {
    GradAscent,
    Hbu { damping: f64, solver: HbuSolver },
    SalUn { sparsity: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct UnlearnObjective {
    pub kind: ObjectiveKind,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for UnlearnObjective {
    fn default() -> Self {
        UnlearnObjective { kind: ObjectiveKind::GradAscent, steps: 5, learning_rate: 0.05 }
    }
}

impl UnlearnObjective {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::config("unlearning learning rate must be non-negative"));
        }
        match self.kind {
            ObjectiveKind::Hbu { damping, solver } => {
                if damping <= 0.0 {
                    return Err(Error::config("HBU damping must be positive"));
                }
                if let HbuSolver::ConjugateGradient { max_iters, tol } = solver {
                    if max_iters == 0 || tol <= 0.0 {
                        return Err(Error::config("bad CG settings"));
                    }
                }
            }
            ObjectiveKind::SalUn { sparsity } => {
                if !(sparsity > 0.0 && sparsity < 1.0) {
                    return Err(Error::config("SalUn sparsity must be in (0,1)"));
                }
            }
            ObjectiveKind::GradAscent => {}
        }
        Ok(())
    }

    pub fn is_gradient_defined(&self) -> bool {
        !matches!(self.kind, ObjectiveKind::Hbu { .. })
    }
}

#[derive(Debug, Clone)]
pub struct UnlearnRequest {
    pub erased: Dataset,
    pub objective: UnlearnObjective,
}

/// Result of an iterative unlearner; `diverged` marks that a non-finite
/// iterate was hit and the best prior iterate was returned instead.
#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub params: ModelParams,
    pub diverged: bool,
}

/// Flat gradient of mean CE on `data` at `params`, in layer order.
pub fn ce_grad_flat(params: &ModelParams, data: &Dataset) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::config("gradient of empty batch"));
    }
    let mut tape = Tape::new();
    let ids = params_to_tape(&mut tape, params, true)?;
    let x = tape.leaf(data.x.clone(), false)?;
    let loss = loss_ce(&mut tape, &ids, x, &data.y)?;
    let wrt: Vec<NodeId> = ids.iter().flat_map(|&(w, b)| [w, b]).collect();
    let grads = tape.gradient(loss, &wrt, false)?;
    let mut out = Vec::with_capacity(params.param_count());
    for g in grads {
        out.extend_from_slice(tape.value(g).data());
    }
    Ok(out)
}

/// Flat gradient of the unlearning objective L_u = -CE at `params`.
///
/// HBU has no pointwise gradient objective and is rejected.
pub fn unlearn_grad(objective: &UnlearnObjective, params: &ModelParams, data: &Dataset) -> Result<Vec<f64>> {
    if !objective.is_gradient_defined() {
        return Err(Error::config("HBU objective has no pointwise gradient"));
    }
    let mut g = ce_grad_flat(params, data)?;
    for v in &mut g {
        *v = -*v;
    }
    Ok(g)
}

/// Iterative descent on L_u (ascent on erased-data CE); returns the best
/// prior iterate with a flag if the parameters go non-finite.
pub fn unlearn_ga(params: &ModelParams, request: &UnlearnRequest) -> Result<UnlearnOutcome> {
    ga_masked(params, request, None)
}

fn ga_masked(
    params: &ModelParams,
    request: &UnlearnRequest,
    mask: Option<&[bool]>,
) -> Result<UnlearnOutcome> {
    request.objective.validate()?;
    if request.erased.is_empty() {
        return Err(Error::config("unlearning request with empty erased set"));
    }
    let lr = request.objective.learning_rate;
    let mut flat = params.flatten();
    for _ in 0..request.objective.steps {
        let current = params.unflatten(&flat)?;
        let g = match ce_grad_flat(&current, &request.erased) {
            Ok(g) => g,
            Err(Error::Numeric(_)) => {
                return Ok(UnlearnOutcome { params: current, diverged: true });
            }
            Err(e) => return Err(e),
        };
        let mut next = flat.clone();
        for (i, v) in next.iter_mut().enumerate() {
            if mask.map_or(true, |m| m[i]) {
                *v += lr * g[i];
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Ok(UnlearnOutcome { params: params.unflatten(&flat)?, diverged: true });
        }
        flat = next;
    }
    Ok(UnlearnOutcome { params: params.unflatten(&flat)?, diverged: false })
}

/// Gradient ascent restricted to the top-`sparsity` fraction of parameters
/// by erased-gradient magnitude.
pub fn unlearn_salun(params: &ModelParams, request: &UnlearnRequest) -> Result<UnlearnOutcome> {
    let ObjectiveKind::SalUn { sparsity } = request.objective.kind else {
        return Err(Error::config("unlearn_salun needs a SalUn objective"));
    };
    request.objective.validate()?;
    let g = ce_grad_flat(params, &request.erased)?;
    let mut mags: Vec<f64> = g.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // threshold at the (1 - sparsity) quantile of |grad|
    let q_idx = (((mags.len() - 1) as f64) * (1.0 - sparsity)).round() as usize;
    let threshold = mags[q_idx];
    let mask: Vec<bool> = g.iter().map(|v| v.abs() >= threshold).collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::config("saliency mask is empty"));
    }
    ga_masked(params, request, Some(&mask))
}

/// One-shot influence-style removal:
/// theta_u = theta* + (1/|remaining|) (H + damping I)^{-1} sum_{z in erased} grad l(z).
/// H is the Hessian of the mean CE over `remaining` at theta*.
pub fn unlearn_hbu(
    params: &ModelParams,
    request: &UnlearnRequest,
    remaining: &Dataset,
) -> Result<ModelParams> {
    let ObjectiveKind::Hbu { damping, solver } = request.objective.kind else {
        return Err(Error::config("unlearn_hbu needs an HBU objective"));
    };
    request.objective.validate()?;
    if remaining.is_empty() {
        return Err(Error::config("HBU needs a nonempty remaining dataset"));
    }
    let p = params.param_count();
    // sum of per-sample gradients = |erased| * mean gradient
    let mut b = ce_grad_flat(params, &request.erased)?;
    let scale = request.erased.len() as f64 / remaining.len() as f64;
    for v in &mut b {
        *v *= scale;
    }
    let hvp = |v: &[f64]| hessian_vector_product(params, remaining, v);
    let update = match solver {
        HbuSolver::Explicit => {
            if p > 5000 {
                return Err(Error::config(format!(
                    "explicit HBU solver limited to 5000 parameters, model has {p}"
                )));
            }
            let mut h = vec![vec![0.0; p]; p];
            let mut e = vec![0.0; p];
            for j in 0..p {
                e[j] = 1.0;
                let col = hvp(&e)?;
                e[j] = 0.0;
                for i in 0..p {
                    h[i][j] = col[i];
                }
            }
            for (i, row) in h.iter_mut().enumerate() {
                row[i] += damping;
            }
            solve_lu(h, b)?
        }
        HbuSolver::ConjugateGradient { max_iters, tol } => {
            let apply = |v: &[f64]| -> Result<Vec<f64>> {
                let mut hv = hvp(v)?;
                for (o, x) in hv.iter_mut().zip(v) {
                    *o += damping * x;
                }
                Ok(hv)
            };
            conjugate_gradient(apply, &b, max_iters, tol)?
        }
    };
    let mut flat = params.flatten();
    for (x, u) in flat.iter_mut().zip(&update) {
        *x += u;
    }
    let out = params.unflatten(&flat)?;
    if !out.all_finite() {
        return Err(Error::numeric("HBU update produced non-finite parameters"));
    }
    Ok(out)
}

/// H v for the Hessian of the mean CE over `data` at `params`, via double
/// backprop (no explicit Hessian).
pub fn hessian_vector_product(params: &ModelParams, data: &Dataset, v: &[f64]) -> Result<Vec<f64>> {
    let p = params.param_count();
    if v.len() != p {
        return Err(Error::shape("HVP vector length mismatch"));
    }
    let mut tape = Tape::new();
    let ids = params_to_tape(&mut tape, params, true)?;
    let x = tape.leaf(data.x.clone(), false)?;
    let loss = loss_ce(&mut tape, &ids, x, &data.y)?;
    let wrt: Vec<NodeId> = ids.iter().flat_map(|&(w, b)| [w, b]).collect();
    let grads = tape.gradient(loss, &wrt, true)?;
    // s = <g, v>, assembled per layer chunk
    let mut off = 0;
    let mut s: Option<NodeId> = None;
    for &g in &grads {
        let shape = tape.value(g).shape().to_vec();
        let numel: usize = shape.iter().product();
        let chunk = tape.constant(Tensor::new(shape, v[off..off + numel].to_vec())?)?;
        off += numel;
        let d = tape.dot(g, chunk)?;
        s = Some(match s {
            Some(acc) => tape.add(acc, d)?,
            None => d,
        });
    }
    let s = s.ok_or_else(|| Error::config("model has no parameters"))?;
    let hv_nodes = tape.gradient(s, &wrt, false)?;
    let mut out = Vec::with_capacity(p);
    for h in hv_nodes {
        out.extend_from_slice(tape.value(h).data());
    }
    Ok(out)
}

/// Dense solve by partial-pivot LU; reports a pivot-ratio condition
/// estimate if the system is effectively singular.
pub fn solve_lu(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    let mut max_pivot = 0.0f64;
    let mut min_pivot = f64::INFINITY;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        let pivot = a[col][col];
        max_pivot = max_pivot.max(pivot.abs());
        min_pivot = min_pivot.min(pivot.abs());
        if pivot.abs() < 1e-12 * max_pivot.max(1.0) {
            return Err(Error::numeric(format!(
                "singular system: pivot ratio {:.3e}",
                max_pivot / pivot.abs().max(f64::MIN_POSITIVE)
            )));
        }
        for row in col + 1..n {
            let f = a[row][col] / pivot;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Ok(x)
}

/// Conjugate gradient for a symmetric positive-definite operator.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<Vec<f64>> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let b_norm = dot(b, b).sqrt().max(f64::MIN_POSITIVE);
    let mut rs = dot(&r, &r);
    if rs.sqrt() / b_norm <= tol {
        return Ok(x);
    }
    for _ in 0..max_iters {
        let ap = apply(&p)?;
        let denom = dot(&p, &ap);
        if denom.abs() < 1e-300 {
            return Err(Error::numeric("CG breakdown: p'Ap ~ 0"));
        }
        let alpha = rs / denom;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        if rs_new.sqrt() / b_norm <= tol {
            return Ok(x);
        }
        let beta = rs_new / rs;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
    }
    Err(Error::numeric(format!("CG did not converge in {max_iters} iterations")))
}
