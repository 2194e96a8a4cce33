//! Crafting the erased-set perturbation by gradient matching: descend the
//! cosine mismatch between the unlearning gradient on perturbed data and
//! the target-flip gradient, under an l-infinity budget and the dataset's
//! value range.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TargetSet};
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, params_to_tape, ModelParams};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::unlearn::UnlearnObjective;

pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Match the gradient that teaches each target its assigned wrong label.
    Targeted,
    /// Match the gradient that raises the loss on each target's true label.
    Untargeted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Strategy {
    /// Plain projected gradient descent on the perturbation.
    Descent,
    /// Independent random restarts, each optimized with an adaptive-moment
    /// first-order optimizer; globally best mismatch wins.
    Restarts { restarts: usize, inner_steps: usize },
}

#[derive(Debug, Clone)]
pub struct PerturbConfig {
    /// l-infinity budget in feature units.
    pub d: f64,
    /// Step size.
    pub eta: f64,
    /// Descent iterations.
    pub n: usize,
    pub strategy: Strategy,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            d: 0.3,
            eta: 0.5,
            n: 200,
            strategy: Strategy::Descent,
            label_mode: LabelMode::Targeted,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 0.0 {
            return Err(Error::config("perturbation distance must be non-negative"));
        }
        if self.eta <= 0.0 {
            return Err(Error::config("eta must be positive"));
        }
        if let Strategy::Restarts { restarts, .. } = self.strategy {
            if restarts == 0 || restarts > 10 {
                return Err(Error::config("restarts must be in 1..=10"));
            }
        }
        Ok(())
    }
}

/// Mismatch values across iterations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchTrace {
    pub phi_per_iter: Vec<f64>,
    pub best_phi: f64,
    pub best_iter: usize,
}

/// The synthesized unlearning request: original erased data, the bounded
/// perturbation, and the perturbed features with unchanged labels.
#[derive(Debug, Clone)]
pub struct PerturbedRequest {
    pub original: Dataset,
    pub delta: Tensor,
    pub perturbed: Dataset,
    pub trace: MatchTrace,
    pub diverged: bool,
}

/// Cosine mismatch phi = 1 - <g_t, g_u> / (||g_t|| ||g_u||), norms floored.
pub fn match_loss(g_t: &[f64], g_u: &[f64]) -> f64 {
    assert_eq!(g_t.len(), g_u.len(), "gradient length mismatch");
    let mut dot = 0.0;
    let mut nt = 0.0;
    let mut nu = 0.0;
    for (a, b) in g_t.iter().zip(g_u) {
        dot += a * b;
        nt += a * a;
        nu += b * b;
    }
    1.0 - dot / (nt.sqrt().max(NORM_FLOOR) * nu.sqrt().max(NORM_FLOOR))
}

/// Flat gradient the honest unlearning step should imitate, evaluated at
/// the fixed trained parameters.
///
/// The unlearner moves along -grad L_u(erased) = +grad CE(erased); matching
/// that direction to +grad CE(targets, wrong labels) drives the targets
/// toward their assigned wrong labels (targeted), and matching it to
/// -grad CE(targets, true labels) drives their true-label loss up
/// (untargeted). Both are expressed through L_u = -CE below.
pub fn target_gradient(
    objective: &UnlearnObjective,
    params: &ModelParams,
    targets: &TargetSet,
    label_mode: LabelMode,
) -> Result<Vec<f64>> {
    if !objective.is_gradient_defined() {
        return Err(Error::config("target gradient needs a gradient-defined objective"));
    }
    if targets.is_empty() {
        return Err(Error::config("empty target set"));
    }
    let labels = match label_mode {
        LabelMode::Targeted => &targets.y_wrong,
        LabelMode::Untargeted => &targets.y_true,
    };
    let batch = Dataset::new(
        targets.x.clone(),
        labels.clone(),
        params.class_count(),
        (f64::NEG_INFINITY, f64::INFINITY),
    );
    // targets may sit anywhere numerically; bypass range checks via gather-free CE
    let data = match batch {
        Ok(d) => d,
        Err(e) => return Err(e),
    };
    let mean = crate::unlearn::ce_grad_flat(params, &data)?;
    let m = targets.len() as f64;
    let sign = match label_mode {
        // sum of grad CE over the wrong-labeled targets
        LabelMode::Targeted => m,
        // minus the sum of grad CE over the true-labeled targets
        LabelMode::Untargeted => -m,
    };
    Ok(mean.iter().map(|v| v * sign).collect())
}

struct MatchProblem<'a> {
    params: &'a ModelParams,
    erased: &'a Dataset,
    /// Per-layer constant tensors of the (flat) target gradient.
    g_t_layers: Vec<Tensor>,
    g_t_norm: f64,
}

impl<'a> MatchProblem<'a> {
    fn new(params: &'a ModelParams, erased: &'a Dataset, g_t: &[f64]) -> Result<Self> {
        if g_t.len() != params.param_count() {
            return Err(Error::shape("target gradient length mismatch"));
        }
        let mut layers = Vec::new();
        let mut off = 0;
        for l in &params.layers {
            let wn = l.weight.numel();
            layers.push(Tensor::new(l.weight.shape().to_vec(), g_t[off..off + wn].to_vec())?);
            off += wn;
            let bn = l.bias.numel();
            layers.push(Tensor::new(l.bias.shape().to_vec(), g_t[off..off + bn].to_vec())?);
            off += bn;
        }
        let norm = g_t.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(MatchProblem { params, erased, g_t_layers: layers, g_t_norm: norm })
    }

    /// phi(delta) and d phi / d delta, via double backprop. With
    /// `want_grad` false only the value is computed.
    fn eval(&self, delta: &Tensor, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
        let mut tape = Tape::new();
        let ids = params_to_tape(&mut tape, self.params, true)?;
        let x0 = tape.constant(self.erased.x.clone())?;
        let delta_id = tape.leaf(delta.clone(), true)?;
        let xp = tape.add(x0, delta_id)?;
        let logits = forward_on_tape(&mut tape, &ids, xp)?;
        let ce = tape.softmax_xent(logits, &self.erased.y)?;
        // L_u = -CE; its theta-gradient is the matched unlearning gradient
        let lu = tape.scale(ce, -1.0)?;
        let wrt: Vec<NodeId> = ids.iter().flat_map(|&(w, b)| [w, b]).collect();
        let g_u = tape.gradient(lu, &wrt, want_grad)?;

        let mut dot: Option<NodeId> = None;
        let mut sq: Option<NodeId> = None;
        for (i, &g) in g_u.iter().enumerate() {
            let gt = tape.constant(self.g_t_layers[i].clone())?;
            let d = tape.dot(g, gt)?;
            dot = Some(match dot {
                Some(acc) => tape.add(acc, d)?,
                None => d,
            });
            let q = tape.dot(g, g)?;
            sq = Some(match sq {
                Some(acc) => tape.add(acc, q)?,
                None => q,
            });
        }
        let dot = dot.unwrap();
        let sq = sq.unwrap();
        let nu = tape.sqrt(sq)?;
        let nu = tape.clamp_min(nu, NORM_FLOOR)?;
        let scaled = tape.scale(nu, self.g_t_norm.max(NORM_FLOOR))?;
        let cos = tape.div(dot, scaled)?;
        let one = tape.constant(Tensor::scalar(1.0))?;
        let phi = tape.sub(one, cos)?;
        let phi_val = tape.value(phi).scalar_value()?;
        if !want_grad {
            return Ok((phi_val, None));
        }
        let grad = tape.gradient(phi, &[delta_id], false)?;
        Ok((phi_val, Some(tape.value(grad[0]).clone())))
    }

    /// Project onto the l-infinity ball of radius d, then keep perturbed
    /// features inside the dataset's value range.
    fn project(&self, delta: &mut Tensor, d: f64) {
        let (lo, hi) = self.erased.value_range;
        let x = self.erased.x.data();
        for (i, v) in delta.data_mut().iter_mut().enumerate() {
            *v = v.clamp(-d, d);
            *v = (x[i] + *v).clamp(lo, hi) - x[i];
        }
    }

    fn initial_delta(&self, d: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut delta = Tensor::zeros(self.erased.x.shape().to_vec());
        for v in delta.data_mut() {
            *v = normal.sample(rng) * 0.1 * d;
        }
        self.project(&mut delta, d);
        delta
    }
}

/// Public surface for the second-order gradient of the matching loss;
/// used by the finite-difference cross-checks.
pub fn match_grad_delta(
    params: &ModelParams,
    erased: &Dataset,
    g_t: &[f64],
    delta: &Tensor,
) -> Result<(f64, Tensor)> {
    let problem = MatchProblem::new(params, erased, g_t)?;
    let (phi, grad) = problem.eval(delta, true)?;
    Ok((phi, grad.unwrap()))
}

/// Matching-loss value only, for finite differencing.
pub fn match_phi(params: &ModelParams, erased: &Dataset, g_t: &[f64], delta: &Tensor) -> Result<f64> {
    let problem = MatchProblem::new(params, erased, g_t)?;
    Ok(problem.eval(delta, false)?.0)
}

fn finish(
    problem: &MatchProblem,
    best_delta: Tensor,
    trace: MatchTrace,
    diverged: bool,
) -> Result<PerturbedRequest> {
    let erased = problem.erased;
    let mut data = erased.x.data().to_vec();
    for (v, d) in data.iter_mut().zip(best_delta.data()) {
        *v += d;
    }
    let perturbed = Dataset::new(
        Tensor::new(erased.x.shape().to_vec(), data)?,
        erased.y.clone(),
        erased.k,
        erased.value_range,
    )?;
    Ok(PerturbedRequest {
        original: erased.clone(),
        delta: best_delta,
        perturbed,
        trace,
        diverged,
    })
}

/// Projected gradient descent on the perturbation (the main-text descent
/// strategy). Returns the best-phi iterate, not necessarily the last.
pub fn udpd(
    params: &ModelParams,
    erased: &Dataset,
    targets: &TargetSet,
    objective: &UnlearnObjective,
    cfg: &PerturbConfig,
) -> Result<PerturbedRequest> {
    cfg.validate()?;
    let g_t = target_gradient(objective, params, targets, cfg.label_mode)?;
    let problem = MatchProblem::new(params, erased, &g_t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut delta = problem.initial_delta(cfg.d, &mut rng);
    descend(&problem, delta_steps(cfg), &mut delta, cfg)
}

fn delta_steps(cfg: &PerturbConfig) -> usize {
    match cfg.strategy {
        Strategy::Descent => cfg.n,
        Strategy::Restarts { inner_steps, .. } => inner_steps,
    }
}

enum Optim {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: usize },
}

fn descend(
    problem: &MatchProblem,
    steps: usize,
    delta: &mut Tensor,
    cfg: &PerturbConfig,
) -> Result<PerturbedRequest> {
    let mut optim = match cfg.strategy {
        Strategy::Descent => Optim::Sgd,
        Strategy::Restarts { .. } => Optim::Adam {
            m: vec![0.0; delta.numel()],
            v: vec![0.0; delta.numel()],
            t: 0,
        },
    };
    let mut phis = Vec::with_capacity(steps + 1);
    let mut best_delta = delta.clone();
    let mut best_phi;
    let mut best_iter = 0;
    let mut diverged = false;
    match problem.eval(delta, false) {
        Ok((phi, _)) => {
            phis.push(phi);
            best_phi = phi;
        }
        Err(Error::Numeric(_)) => {
            // infeasible from the start; hand back the projected draw
            let trace = MatchTrace { phi_per_iter: vec![f64::INFINITY], best_phi: f64::INFINITY, best_iter: 0 };
            return finish(problem, delta.clone(), trace, true);
        }
        Err(e) => return Err(e),
    }
    for _ in 0..steps {
        let (phi, grad) = match problem.eval(delta, true) {
            Ok((p, g)) => (p, g.unwrap()),
            Err(Error::Numeric(_)) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let _ = phi; // same value as the last recorded entry
        let g = grad.data();
        match &mut optim {
            Optim::Sgd => {
                for (x, &gi) in delta.data_mut().iter_mut().zip(g) {
                    *x -= cfg.eta * gi;
                }
            }
            Optim::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *t += 1;
                let bc1 = 1.0 - B1.powi(*t as i32);
                let bc2 = 1.0 - B2.powi(*t as i32);
                for (i, x) in delta.data_mut().iter_mut().enumerate() {
                    m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                    v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    *x -= cfg.eta * mh / (vh.sqrt() + EPS);
                }
            }
        }
        problem.project(delta, cfg.d);
        match problem.eval(delta, false) {
            Ok((phi, _)) => {
                phis.push(phi);
                if phi < best_phi {
                    best_phi = phi;
                    best_iter = phis.len() - 1;
                    best_delta = delta.clone();
                }
            }
            Err(Error::Numeric(_)) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let trace = MatchTrace { phi_per_iter: phis, best_phi, best_iter };
    finish(problem, best_delta, trace, diverged)
}

/// Restart strategy: independent initializations, each optimized with the
/// adaptive-moment optimizer; results merge by minimum phi with ties going
/// to the earliest restart.
pub fn udpd_restarts(
    params: &ModelParams,
    erased: &Dataset,
    targets: &TargetSet,
    objective: &UnlearnObjective,
    cfg: &PerturbConfig,
) -> Result<PerturbedRequest> {
    cfg.validate()?;
    let Strategy::Restarts { restarts, .. } = cfg.strategy else {
        return Err(Error::config("udpd_restarts needs a restarts strategy"));
    };
    let g_t = target_gradient(objective, params, targets, cfg.label_mode)?;
    let problem = MatchProblem::new(params, erased, &g_t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<PerturbedRequest> = None;
    for _ in 0..restarts {
        let mut delta = problem.initial_delta(cfg.d, &mut rng);
        let candidate = descend(&problem, delta_steps(cfg), &mut delta, cfg)?;
        let better = match &best {
            None => true,
            Some(b) => candidate.trace.best_phi < b.trace.best_phi,
        };
        if better {
            best = Some(candidate);
        }
    }
    let result = best.unwrap();
    if result.trace.best_phi.is_infinite() {
        // every restart failed to evaluate
        return Ok(PerturbedRequest { diverged: true, ..result });
    }
    Ok(result)
}

/// Sidecar metadata describing a synthesized request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestMetadata {
    pub d: f64,
    pub eta: f64,
    pub n: usize,
    pub strategy: Strategy,
    pub label_mode: LabelMode,
    pub best_phi: f64,
    pub best_iter: usize,
    pub diverged: bool,
    pub seed: u64,
}

impl PerturbedRequest {
    pub fn metadata(&self, cfg: &PerturbConfig) -> RequestMetadata {
        RequestMetadata {
            d: cfg.d,
            eta: cfg.eta,
            n: cfg.n,
            strategy: cfg.strategy,
            label_mode: cfg.label_mode,
            best_phi: self.trace.best_phi,
            best_iter: self.trace.best_iter,
            diverged: self.diverged,
            seed: cfg.seed,
        }
    }
}
