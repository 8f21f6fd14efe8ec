//! Logistic mixed model for first-attempt correctness with per-level
//! intercepts and opportunity slopes: the individualized additive-factors
//! model. The production configuration is
//!
//! ```text
//!   logit P(correct) = b0 + b1 * opp + (1 + opp | student) + (1 + opp | skill)
//! ```
//!
//! with an unstructured 2x2 covariance per factor, parameterized by its
//! Cholesky factor with log diagonal so the search space is unconstrained.
//!
//! Estimation maximizes the Laplace approximation to the marginal
//! likelihood: with `u` the spherical random effects, `H(u) = U'W(u)U + I`
//! the penalized working Hessian, and `u_hat` the conditional mode,
//!
//! ```text
//!   loglik ~= sum(bernoulli loglik at u_hat) - ||u_hat||^2 / 2 - log|H(u_hat)| / 2
//! ```
//!
//! The mode is found by penalized iteratively reweighted least squares
//! (Newton steps with step halving); covariance parameters and fixed
//! effects are optimized jointly by a bounded simplex with warm-started
//! inner solves, then a parabolic polish. After convergence the analytic
//! implicit gradient of the Laplace objective over the fixed effects is
//! evaluated (on problems small enough for the dense trace computation) as
//! a stationarity check.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmm::FactorData;
use crate::num::optim::{nelder_mead, polish_parabolic, NmOptions};
use crate::num::special::{bernoulli_loglik_term, sigmoid};
use crate::solver::{CrossedSolver, Design, EffectVec, RandomTerm, Tri};
use crate::types::StepRecord;

/// Random-effect structure of one grouping factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomStructure {
    Intercept,
    InterceptSlope,
}

impl RandomStructure {
    fn q(self) -> usize {
        match self {
            RandomStructure::Intercept => 1,
            RandomStructure::InterceptSlope => 2,
        }
    }

    fn theta_dim(self) -> usize {
        match self {
            RandomStructure::Intercept => 1,
            RandomStructure::InterceptSlope => 3,
        }
    }
}

/// Fixed-effect structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedStructure {
    InterceptOnly,
    InterceptOpportunity,
}

impl FixedStructure {
    fn p(self) -> usize {
        match self {
            FixedStructure::InterceptOnly => 1,
            FixedStructure::InterceptOpportunity => 2,
        }
    }
}

/// Input to [`fit_iafm`].
#[derive(Debug, Clone)]
pub struct IafmData {
    /// First-attempt correctness per row.
    pub y: Vec<bool>,
    /// 1-based practice opportunity per row.
    pub opp: Vec<f64>,
    pub factors: Vec<FactorData>,
    /// Random structure per factor, parallel to `factors`.
    pub random: Vec<RandomStructure>,
}

impl IafmData {
    /// Production design from a step table: correctness against opportunity
    /// with intercept + slope terms for students and skills.
    pub fn from_steps(steps: &[StepRecord]) -> IafmData {
        let mut rows: Vec<&StepRecord> = steps.iter().collect();
        // Canonical order makes the fit independent of input row order.
        rows.sort_by(|a, b| {
            (&a.student_id, &a.kc_id, a.first_attempt_time, &a.problem_id, &a.step_id)
                .cmp(&(&b.student_id, &b.kc_id, b.first_attempt_time, &b.problem_id, &b.step_id))
        });
        let y = rows.iter().map(|s| s.first_attempt_correct).collect();
        let opp = rows.iter().map(|s| s.opportunity as f64).collect();
        let students = FactorData::from_ids(
            "student",
            &rows.iter().map(|s| s.student_id.as_str()).collect::<Vec<_>>(),
        );
        let skills = FactorData::from_ids(
            "skill",
            &rows.iter().map(|s| s.kc_id.as_str()).collect::<Vec<_>>(),
        );
        IafmData {
            y,
            opp,
            factors: vec![students, skills],
            random: vec![RandomStructure::InterceptSlope, RandomStructure::InterceptSlope],
        }
    }
}

/// Fit options.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IafmSpec {
    pub fixed: FixedStructure,
    /// Center the opportunity covariate at its mean before fitting.
    pub center_opportunity: bool,
    /// Pin every random covariance to zero: the fit degenerates to plain
    /// logistic regression and all level effects are exactly zero.
    pub pin_zero: bool,
    /// Inner mode-finding gradient tolerance.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    /// Step halvings before the inner solve is declared divergent.
    pub max_half_steps: usize,
    /// Outer objective evaluation budget.
    pub max_evals: usize,
}

impl Default for IafmSpec {
    fn default() -> Self {
        IafmSpec {
            fixed: FixedStructure::InterceptOpportunity,
            center_opportunity: false,
            pin_zero: false,
            inner_tol: 1e-8,
            inner_max_iter: 80,
            max_half_steps: 25,
            max_evals: 2800,
        }
    }
}

/// Per-level effect estimates for one factor, on the data scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectRow {
    pub id: String,
    pub intercept: f64,
    /// Absent for intercept-only factors.
    pub slope: Option<f64>,
    pub n_obs: u32,
}

/// Covariance summary of one factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorCovariance {
    pub factor: String,
    pub structure: RandomStructure,
    pub n_levels: usize,
    /// Lower-triangular Cholesky factor of the covariance matrix.
    pub lambda: Vec<Vec<f64>>,
    /// Full covariance matrix `lambda lambda'`.
    pub cov: Vec<Vec<f64>>,
}

/// Fitted logistic mixed model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IafmFit {
    pub fixed: FixedStructure,
    /// `[intercept]` or `[intercept, opportunity slope]`.
    pub beta: Vec<f64>,
    pub covariances: Vec<FactorCovariance>,
    pub laplace_loglik: f64,
    pub converged: bool,
    pub n_obs: usize,
    pub evals: usize,
    pub trace_len: usize,
    /// Opportunity centering applied (0 when disabled).
    pub opp_mean: f64,
    pub pin_zero: bool,
    /// Max |analytic implicit gradient| over fixed effects at the optimum;
    /// absent when the random dimension is too large for the dense check.
    pub grad_check: Option<f64>,
    /// Worker threads used by this fit; the fitter is single-threaded.
    pub threads: usize,
    #[serde(skip)]
    pub effects: Vec<Vec<EffectRow>>,
    #[serde(skip)]
    index: Vec<HashMap<String, usize>>,
}

impl IafmFit {
    /// Effect table for a factor by name.
    pub fn extract_effects(&self, factor: &str) -> Result<&[EffectRow]> {
        let k = self
            .covariances
            .iter()
            .position(|c| c.factor == factor)
            .ok_or_else(|| Error::data(format!("unknown factor name: {factor:?}")))?;
        Ok(&self.effects[k])
    }

    /// Fixed opportunity slope, when the model has one.
    pub fn beta_opportunity(&self) -> Option<f64> {
        (self.fixed == FixedStructure::InterceptOpportunity).then(|| self.beta[1])
    }
}

/// One student's parameters for the downstream analyses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentParamRow {
    pub student_id: String,
    /// Intercept effect: baseline correctness after skill and opportunity
    /// adjustment.
    pub prior_proficiency: f64,
    /// Opportunity-slope effect: per-opportunity improvement relative to the
    /// population slope.
    pub learning_rate: f64,
    pub n_obs: u32,
}

/// Per-student prior proficiency and learning rate from a fitted model.
/// Values are conditional modes; a pinned-zero fit yields all zeros.
pub fn extract_student_params(fit: &IafmFit) -> Result<Vec<StudentParamRow>> {
    let rows = fit.extract_effects("student")?;
    Ok(rows
        .iter()
        .map(|e| StudentParamRow {
            student_id: e.id.clone(),
            prior_proficiency: e.intercept,
            learning_rate: e.slope.unwrap_or(0.0),
            n_obs: e.n_obs,
        })
        .collect())
}

/// Prediction with provenance flags for ids absent from the fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub prob: f64,
    pub unknown_student: bool,
    pub unknown_skill: bool,
}

/// Success probability for a (student, skill, opportunity) triple. Unknown
/// ids contribute zero effects and are flagged.
pub fn predict_prob(fit: &IafmFit, student_id: &str, kc_id: &str, opportunity: f64) -> Result<Prediction> {
    if opportunity < 0.0 {
        return Err(Error::data(format!(
            "negative opportunity: {opportunity}"
        )));
    }
    let opp_c = opportunity - fit.opp_mean;
    let mut eta = fit.beta[0];
    if fit.fixed == FixedStructure::InterceptOpportunity {
        eta += fit.beta[1] * opp_c;
    }
    let lookup = |name: &str, id: &str| -> (f64, bool) {
        match fit.covariances.iter().position(|c| c.factor == name) {
            Some(k) => match fit.index[k].get(id) {
                Some(&row) => {
                    let e = &fit.effects[k][row];
                    (e.intercept + e.slope.unwrap_or(0.0) * opp_c, false)
                }
                None => (0.0, true),
            },
            None => (0.0, true),
        }
    };
    let (es, unknown_student) = lookup("student", student_id);
    let (ek, unknown_skill) = lookup("skill", kc_id);
    eta += es + ek;
    Ok(Prediction {
        prob: sigmoid(eta),
        unknown_student,
        unknown_skill,
    })
}

/// Relative covariance factor from packed parameters (log-Cholesky).
fn lambda_from_theta(theta: &[f64], s: RandomStructure) -> Tri {
    match s {
        RandomStructure::Intercept => [theta[0].exp(), 0.0, 0.0],
        RandomStructure::InterceptSlope => [theta[0].exp(), theta[2], theta[1].exp()],
    }
}

struct Assembled {
    solver: CrossedSolver,
    y: Vec<f64>,
    x: Vec<[f64; 2]>,
    p: usize,
    opp_mean: f64,
    level_ids: Vec<Vec<String>>,
    level_counts: Vec<Vec<u32>>,
}

fn assemble(data: &IafmData, spec: &IafmSpec) -> Result<Assembled> {
    let n = data.y.len();
    if n == 0 {
        return Err(Error::data("no observations"));
    }
    if data.opp.len() != n {
        return Err(Error::data("opportunity length mismatch"));
    }
    if data.factors.len() != data.random.len() || data.factors.is_empty() || data.factors.len() > 2
    {
        return Err(Error::data("model needs 1 or 2 grouping factors"));
    }
    if data.opp.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite opportunity"));
    }
    let n_correct = data.y.iter().filter(|&&b| b).count();
    if n_correct == 0 || n_correct == n {
        return Err(Error::data(
            "separation: model unidentified (all responses identical)",
        ));
    }
    for f in &data.factors {
        if f.index.len() != n {
            return Err(Error::data(format!("factor {} row mismatch", f.name)));
        }
        if f.levels.len() < 2 {
            return Err(Error::data(format!(
                "factor {} has fewer than 2 levels",
                f.name
            )));
        }
    }

    // Canonical internal order: levels sorted by id, rows sorted by (level
    // ranks, opportunity, response). Any permutation of the input rows then
    // reaches bitwise-identical arithmetic, so estimates cannot drift with
    // row order. Ties are exact duplicates, which commute in every sum.
    let mut sorted_levels: Vec<Vec<String>> = Vec::with_capacity(data.factors.len());
    let mut row_levels: Vec<Vec<u32>> = Vec::with_capacity(data.factors.len());
    for f in &data.factors {
        let mut order: Vec<usize> = (0..f.levels.len()).collect();
        order.sort_by(|&i, &j| f.levels[i].cmp(&f.levels[j]));
        let mut rank = vec![0u32; f.levels.len()];
        for (new, &old) in order.iter().enumerate() {
            rank[old] = new as u32;
        }
        sorted_levels.push(order.iter().map(|&o| f.levels[o].clone()).collect());
        row_levels.push(f.index.iter().map(|&li| rank[li as usize]).collect());
    }
    let mut rows: Vec<usize> = (0..n).collect();
    rows.sort_by(|&i, &j| {
        row_levels
            .iter()
            .map(|rl| rl[i].cmp(&rl[j]))
            .chain([data.opp[i].total_cmp(&data.opp[j]), data.y[i].cmp(&data.y[j])])
            .find(|o| *o != std::cmp::Ordering::Equal)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let opp: Vec<f64> = rows.iter().map(|&i| data.opp[i]).collect();
    let y: Vec<f64> = rows
        .iter()
        .map(|&i| if data.y[i] { 1.0 } else { 0.0 })
        .collect();

    let opp_mean = if spec.center_opportunity {
        opp.iter().sum::<f64>() / n as f64
    } else {
        0.0
    };
    let opp_c: Vec<f64> = opp.iter().map(|o| o - opp_mean).collect();

    let terms: Vec<RandomTerm> = data
        .factors
        .iter()
        .enumerate()
        .zip(&data.random)
        .map(|((k, f), &s)| RandomTerm {
            n_levels: f.levels.len(),
            q: s.q(),
            level: rows.iter().map(|&i| row_levels[k][i]).collect(),
            z: opp_c.iter().map(|&o| [1.0, o]).collect(),
        })
        .collect();
    let p = spec.fixed.p();
    let x: Vec<[f64; 2]> = opp_c.iter().map(|&o| [1.0, o]).collect();
    let design = Design {
        n,
        p: 0,
        x: Vec::new(),
        terms,
    };
    let solver = CrossedSolver::new(design)?;
    let level_counts = (0..data.factors.len())
        .map(|k| solver.level_counts(k))
        .collect();
    Ok(Assembled {
        solver,
        y,
        x,
        p,
        opp_mean,
        level_ids: sorted_levels,
        level_counts,
    })
}

struct PirlsOut {
    u: EffectVec,
    eta: Vec<f64>,
    loglik: f64,
    logdet_h: f64,
}

/// Finds the conditional mode of the random effects at fixed `lams` and
/// offset (the fixed-effect linear predictor) by damped Newton steps.
fn pirls(
    a: &Assembled,
    spec: &IafmSpec,
    lams: &[Tri],
    offset: &[f64],
    warm: &EffectVec,
) -> Result<PirlsOut> {
    let n = a.y.len();
    let solver = &a.solver;
    let mut u = warm.clone();

    let eta_of = |u: &EffectVec| -> Vec<f64> {
        let mut eta = solver.eta(lams, u, &[]);
        for i in 0..n {
            eta[i] += offset[i];
        }
        eta
    };
    let pen_obj = |eta: &[f64], u: &EffectVec| -> f64 {
        let mut ll = 0.0;
        for i in 0..n {
            ll += bernoulli_loglik_term(a.y[i], eta[i]);
        }
        ll - 0.5 * u.terms_norm_sq()
    };

    let mut eta = eta_of(&u);
    let mut obj = pen_obj(&eta, &u);
    let mut w = vec![0.0f64; n];
    let mut resid = vec![0.0f64; n];

    for _ in 0..spec.inner_max_iter {
        for i in 0..n {
            let mu = sigmoid(eta[i]);
            w[i] = (mu * (1.0 - mu)).max(1e-10);
            resid[i] = a.y[i] - mu;
        }
        let factors = solver.factorize(lams, Some(&w))?;
        let mut grad = solver.accumulate_effect_rhs(lams, &resid, None);
        let mut gmax = 0.0f64;
        let mut gnorm2 = 0.0f64;
        for (t, block) in grad.terms.iter_mut().enumerate() {
            for (j, g) in block.iter_mut().enumerate() {
                *g -= u.terms[t][j];
                gmax = gmax.max(g.abs());
                gnorm2 += *g * *g;
            }
        }
        // Below gtol the attainable ascent (about gmax^2/2, since the penalty
        // keeps the curvature at 1 or more) drowns in the rounding noise of a
        // sum carrying |obj| of mass, so the tolerance widens with the
        // objective magnitude.
        let gtol = spec
            .inner_tol
            .max((2.0 * f64::EPSILON * (1.0 + obj.abs())).sqrt());
        if gmax <= gtol {
            let loglik = (0..n).map(|i| bernoulli_loglik_term(a.y[i], eta[i])).sum();
            return Ok(PirlsOut {
                u,
                eta,
                loglik,
                logdet_h: factors.logdet_h(),
            });
        }

        let delta = factors.solve_effect(&grad);
        let mut step = 1.0f64;
        let mut accepted = false;
        for _ in 0..spec.max_half_steps {
            let mut cand = u.clone();
            for (t, block) in cand.terms.iter_mut().enumerate() {
                for (j, v) in block.iter_mut().enumerate() {
                    *v += step * delta.terms[t][j];
                }
            }
            let cand_eta = eta_of(&cand);
            let cand_obj = pen_obj(&cand_eta, &cand);
            if cand_obj > obj {
                u = cand;
                eta = cand_eta;
                obj = cand_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // The curvature bound `lambda_min(H) >= 1` caps the remaining
            // ascent at `g'H^-1 g / 2 <= |g|^2 / 2`; when that is below the
            // relative noise of the objective the iterate is the mode up to
            // measurement precision.
            if 0.5 * gnorm2 <= 1e-8 * (1.0 + obj.abs()) {
                let loglik = (0..n).map(|i| bernoulli_loglik_term(a.y[i], eta[i])).sum();
                return Ok(PirlsOut {
                    u,
                    eta,
                    loglik,
                    logdet_h: factors.logdet_h(),
                });
            }
            return Err(Error::numerical(
                "inner solve diverged: no ascent after max step halvings",
            ));
        }
    }
    Err(Error::numerical("inner solve did not converge"))
}

fn offset_of(a: &Assembled, beta: &[f64]) -> Vec<f64> {
    (0..a.y.len())
        .map(|i| {
            let mut v = 0.0;
            for (k, b) in beta.iter().enumerate() {
                v += b * a.x[i][k];
            }
            v
        })
        .collect()
}

/// Plain logistic regression on the fixed columns, for starting values.
fn logistic_irls(a: &Assembled) -> Vec<f64> {
    let n = a.y.len();
    let p = a.p;
    let mut beta = vec![0.0f64; p];
    for _ in 0..30 {
        let mut xtwx = [[0.0f64; 2]; 2];
        let mut xtr = [0.0f64; 2];
        for i in 0..n {
            let mut eta = 0.0;
            for k in 0..p {
                eta += beta[k] * a.x[i][k];
            }
            let mu = sigmoid(eta);
            let w = (mu * (1.0 - mu)).max(1e-10);
            for k in 0..p {
                xtr[k] += a.x[i][k] * (a.y[i] - mu);
                for l in 0..p {
                    xtwx[k][l] += w * a.x[i][k] * a.x[i][l];
                }
            }
        }
        // Solve the tiny normal equations directly.
        let step = if p == 1 {
            [xtr[0] / xtwx[0][0], 0.0]
        } else {
            let det = xtwx[0][0] * xtwx[1][1] - xtwx[0][1] * xtwx[1][0];
            if det.abs() < 1e-12 {
                break;
            }
            [
                (xtwx[1][1] * xtr[0] - xtwx[0][1] * xtr[1]) / det,
                (xtwx[0][0] * xtr[1] - xtwx[1][0] * xtr[0]) / det,
            ]
        };
        let mut done = true;
        for k in 0..p {
            beta[k] += step[k];
            if step[k].abs() > 1e-10 {
                done = false;
            }
        }
        if done {
            break;
        }
    }
    beta
}

/// Fits the logistic mixed model by Laplace-approximate maximum likelihood.
pub fn fit_iafm(data: &IafmData, spec: &IafmSpec) -> Result<IafmFit> {
    let a = assemble(data, spec)?;
    let n = a.y.len();
    let n_factors = data.factors.len();

    // Parameter packing: covariance parameters per factor, then fixed effects.
    let theta_dims: Vec<usize> = if spec.pin_zero {
        vec![0; n_factors]
    } else {
        data.random.iter().map(|s| s.theta_dim()).collect()
    };
    let theta_total: usize = theta_dims.iter().sum();
    let dim = theta_total + a.p;

    let unpack = |params: &[f64]| -> (Vec<Tri>, Vec<f64>) {
        let mut lams = Vec::with_capacity(n_factors);
        let mut off = 0;
        for (k, &td) in theta_dims.iter().enumerate() {
            if td == 0 {
                lams.push([0.0, 0.0, 0.0]);
            } else {
                lams.push(lambda_from_theta(&params[off..off + td], data.random[k]));
            }
            off += td;
        }
        (lams, params[off..].to_vec())
    };

    let mut x0 = Vec::with_capacity(dim);
    let mut lo = Vec::with_capacity(dim);
    let mut hi = Vec::with_capacity(dim);
    for (k, &td) in theta_dims.iter().enumerate() {
        if td == 0 {
            continue;
        }
        match data.random[k] {
            RandomStructure::Intercept => {
                x0.push((0.5f64).ln());
                lo.push(-7.0);
                hi.push(3.0);
            }
            RandomStructure::InterceptSlope => {
                x0.extend([(0.5f64).ln(), (0.1f64).ln(), 0.0]);
                lo.extend([-7.0, -7.0, -20.0]);
                hi.extend([3.0, 3.0, 20.0]);
            }
        }
    }
    let beta0 = logistic_irls(&a);
    for k in 0..a.p {
        x0.push(beta0[k]);
        lo.push(-30.0);
        hi.push(30.0);
    }

    let warm = std::cell::RefCell::new(EffectVec::zeros(a.solver.design()));
    let mut inner_err: Option<Error> = None;
    let mut objective = |params: &[f64]| -> f64 {
        let (lams, beta) = unpack(params);
        let offset = offset_of(&a, &beta);
        let start = warm.borrow().clone();
        match pirls(&a, spec, &lams, &offset, &start) {
            Ok(out) => {
                *warm.borrow_mut() = out.u.clone();
                -(out.loglik - 0.5 * out.u.terms_norm_sq() - 0.5 * out.logdet_h)
            }
            Err(e) => {
                inner_err.get_or_insert(e);
                f64::INFINITY
            }
        }
    };

    let r = nelder_mead(
        &mut objective,
        &x0,
        &lo,
        &hi,
        // The inner solve leaves rounding-level noise on the objective, so
        // the simplex tolerances stay above that floor; the parabolic polish
        // below refines single coordinates past simplex resolution.
        &NmOptions {
            init_step: 0.4,
            ftol: 1e-8,
            xtol: 1e-4,
            max_evals: spec.max_evals,
            restarts: 0,
        },
    );
    let mut x = r.x.clone();
    let mut fx = r.fx;
    let mut evals = r.evals;
    evals += polish_parabolic(&mut objective, &mut x, &mut fx, &lo, &hi, 1e-2, 2);
    evals += polish_parabolic(&mut objective, &mut x, &mut fx, &lo, &hi, 1e-4, 1);

    if !fx.is_finite() {
        return Err(inner_err.unwrap_or_else(|| Error::numerical("objective never evaluated")));
    }

    let (lams, beta) = unpack(&x);
    let offset = offset_of(&a, &beta);
    // Warm-started from the last accepted mode: the penalized problem is
    // strictly concave, so the start point changes the path, not the answer.
    let start = warm.borrow().clone();
    let out = pirls(&a, spec, &lams, &offset, &start)?;
    let laplace_loglik = out.loglik - 0.5 * out.u.terms_norm_sq() - 0.5 * out.logdet_h;

    let mut covariances = Vec::new();
    let mut effects = Vec::new();
    let mut index = Vec::new();
    for k in 0..n_factors {
        let s = data.random[k];
        let q = s.q();
        let lam = lams[k];
        let (lambda, cov) = match q {
            1 => (
                vec![vec![lam[0]]],
                vec![vec![lam[0] * lam[0]]],
            ),
            _ => {
                let l = [[lam[0], 0.0], [lam[1], lam[2]]];
                let cov = vec![
                    vec![l[0][0] * l[0][0], l[0][0] * l[1][0]],
                    vec![l[0][0] * l[1][0], l[1][0] * l[1][0] + l[1][1] * l[1][1]],
                ];
                (vec![vec![l[0][0]], vec![l[1][0], l[1][1]]], cov)
            }
        };
        covariances.push(FactorCovariance {
            factor: data.factors[k].name.clone(),
            structure: s,
            n_levels: data.factors[k].levels.len(),
            lambda,
            cov,
        });
        let rows: Vec<EffectRow> = (0..data.factors[k].levels.len())
            .map(|l| {
                let u0 = out.u.terms[k][l * q];
                let (intercept, slope) = if q == 2 {
                    let u1 = out.u.terms[k][l * q + 1];
                    (lam[0] * u0, Some(lam[1] * u0 + lam[2] * u1))
                } else {
                    (lam[0] * u0, None)
                };
                EffectRow {
                    id: a.level_ids[k][l].clone(),
                    intercept,
                    slope,
                    n_obs: a.level_counts[k][l],
                }
            })
            .collect();
        index.push(
            rows.iter()
                .enumerate()
                .map(|(i, r)| (r.id.clone(), i))
                .collect::<HashMap<_, _>>(),
        );
        effects.push(rows);
    }

    // Stationarity diagnostic over the fixed effects, when dense work is cheap.
    let m_total: usize = a.solver.design().effect_dim();
    let grad_check = if m_total <= 400 {
        Some(
            laplace_beta_gradient_at(&a, spec, &lams, &beta, &out)?
                .iter()
                .fold(0.0f64, |acc, g| acc.max(g.abs())),
        )
    } else {
        None
    };

    Ok(IafmFit {
        fixed: spec.fixed,
        beta,
        covariances,
        laplace_loglik,
        converged: r.converged,
        n_obs: n,
        evals,
        trace_len: r.trace.len(),
        opp_mean: a.opp_mean,
        pin_zero: spec.pin_zero,
        grad_check,
        threads: 1,
        effects,
        index,
    })
}

/// Analytic implicit gradient of the Laplace objective with respect to the
/// fixed effects, at the conditional mode for the given parameters.
///
/// Writing `l(beta) = loglik(u_hat) - ||u_hat||^2/2 - log|H|/2` with
/// `u_hat(beta)` the inner maximizer, the chain rule gives
///
/// ```text
///   dl/db_k = x_k'(y - mu) - tr(H^-1 U' diag(W' * deta_k) U) / 2,
///   deta_k  = x_k + U du/db_k,   du/db_k = -H^-1 U'W x_k,
/// ```
///
/// where `W' = mu (1-mu) (1-2mu)` is the weight derivative over the linear
/// predictor. Dense in the random-effect dimension; intended for small
/// problems and used as a post-fit stationarity check.
pub fn laplace_beta_gradient(
    data: &IafmData,
    spec: &IafmSpec,
    theta: &[f64],
    beta: &[f64],
) -> Result<Vec<f64>> {
    let a = assemble(data, spec)?;
    let mut lams = Vec::new();
    let mut off = 0;
    for &s in &data.random {
        if spec.pin_zero {
            lams.push([0.0, 0.0, 0.0]);
        } else {
            lams.push(lambda_from_theta(&theta[off..off + s.theta_dim()], s));
            off += s.theta_dim();
        }
    }
    let offset = offset_of(&a, beta);
    let fresh = EffectVec::zeros(a.solver.design());
    let out = pirls(&a, spec, &lams, &offset, &fresh)?;
    laplace_beta_gradient_at(&a, spec, &lams, beta, &out)
}

fn laplace_beta_gradient_at(
    a: &Assembled,
    _spec: &IafmSpec,
    lams: &[Tri],
    _beta: &[f64],
    out: &PirlsOut,
) -> Result<Vec<f64>> {
    use nalgebra::{Cholesky, DMatrix, DVector};
    let n = a.y.len();
    let design = a.solver.design();
    let m = design.effect_dim();
    // Dense scaled random-effect matrix.
    let mut u_mat = DMatrix::<f64>::zeros(n, m);
    let mut offset_col = 0;
    for (k, t) in design.terms.iter().enumerate() {
        let lam = lams[k];
        for i in 0..n {
            let z = t.z[i];
            let w = if t.q == 1 {
                [lam[0] * z[0], 0.0]
            } else {
                [lam[0] * z[0] + lam[1] * z[1], lam[2] * z[1]]
            };
            for q in 0..t.q {
                u_mat[(i, offset_col + t.level[i] as usize * t.q + q)] = w[q];
            }
        }
        offset_col += t.n_levels * t.q;
    }
    let mu: Vec<f64> = out.eta.iter().map(|&e| sigmoid(e)).collect();
    let w: Vec<f64> = mu.iter().map(|&m| (m * (1.0 - m)).max(1e-10)).collect();
    let wp: Vec<f64> = mu.iter().map(|&m| m * (1.0 - m) * (1.0 - 2.0 * m)).collect();

    let mut h = DMatrix::<f64>::identity(m, m);
    for i in 0..n {
        for c1 in 0..m {
            let v1 = u_mat[(i, c1)];
            if v1 == 0.0 {
                continue;
            }
            for c2 in 0..m {
                let v2 = u_mat[(i, c2)];
                if v2 != 0.0 {
                    h[(c1, c2)] += w[i] * v1 * v2;
                }
            }
        }
    }
    let chol = Cholesky::new(h).ok_or_else(|| Error::numerical("dense Hessian not PD"))?;

    let mut grad = Vec::with_capacity(a.p);
    for k in 0..a.p {
        let xk: Vec<f64> = (0..n).map(|i| a.x[i][k]).collect();
        // s = U'W x_k ; du/db_k = -H^-1 s.
        let mut s = DVector::<f64>::zeros(m);
        for i in 0..n {
            for c in 0..m {
                let v = u_mat[(i, c)];
                if v != 0.0 {
                    s[c] += w[i] * v * xk[i];
                }
            }
        }
        let dudb = -chol.solve(&s);
        // Total linear-predictor derivative per row.
        let mut deta = xk.clone();
        for i in 0..n {
            let mut acc = 0.0;
            for c in 0..m {
                let v = u_mat[(i, c)];
                if v != 0.0 {
                    acc += v * dudb[c];
                }
            }
            deta[i] += acc;
        }
        // dH = U' diag(wp * deta) U ; trace term via m solves.
        let mut dh = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            let scale = wp[i] * deta[i];
            if scale == 0.0 {
                continue;
            }
            for c1 in 0..m {
                let v1 = u_mat[(i, c1)];
                if v1 == 0.0 {
                    continue;
                }
                for c2 in 0..m {
                    let v2 = u_mat[(i, c2)];
                    if v2 != 0.0 {
                        dh[(c1, c2)] += scale * v1 * v2;
                    }
                }
            }
        }
        let hinv_dh = chol.solve(&dh);
        let trace: f64 = (0..m).map(|j| hinv_dh[(j, j)]).sum();

        let score: f64 = (0..n).map(|i| xk[i] * (a.y[i] - mu[i])).sum();
        grad.push(score - 0.5 * trace);
    }
    Ok(grad)
}
