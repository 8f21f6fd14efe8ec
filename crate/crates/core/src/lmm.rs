//! Gaussian mixed model for log response times: a grand-mean intercept plus
//! crossed random intercepts (student and skill in the production pipeline;
//! the fitter accepts one or two intercept factors).
//!
//! Estimation profiles both the fixed intercept and the residual variance
//! out of the likelihood, leaving a deviance that depends only on the
//! variance ratios `theta_f = var_f / var_resid`. With `lambda_f =
//! sqrt(theta_f)`, `L` the factor of `U'U + I`, `R_X` the fixed-effect
//! Cholesky border, and `r2` the minimized penalized residual sum of
//! squares,
//!
//! ```text
//!   -2 ML loglik   = log|L|^2 + n [1 + ln(2 pi r2 / n)]
//!   -2 REML loglik = log|L|^2 + log|R_X|^2 + (n-p) [1 + ln(2 pi r2 / (n-p))]
//! ```
//!
//! The deviance is minimized over log variance ratios with a bounded
//! simplex plus a parabolic polish; an estimate walking into the lower
//! boundary is refit with that component pinned to exactly zero and the
//! pinned fit is kept when it does not worsen the deviance (boundary flag
//! set).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::optim::{nelder_mead, polish_parabolic, NmOptions};
use crate::solver::{CrossedSolver, Design, EffectVec, RandomTerm, Tri};
use crate::types::StepRecord;

/// Objective used for the variance-ratio profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitCriterion {
    Reml,
    Ml,
}

impl std::str::FromStr for FitCriterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reml" => Ok(FitCriterion::Reml),
            "ml" => Ok(FitCriterion::Ml),
            other => Err(Error::config(format!("unknown criterion: {other:?}"))),
        }
    }
}

/// One grouping factor: per-row level assignment plus level identifiers.
#[derive(Debug, Clone)]
pub struct FactorData {
    pub name: String,
    pub levels: Vec<String>,
    pub index: Vec<u32>,
}

impl FactorData {
    /// Builds a factor from per-row string ids, levels ordered by first
    /// appearance after the caller's canonical row sort.
    pub fn from_ids<S: AsRef<str>>(name: &str, ids: &[S]) -> FactorData {
        let mut map = std::collections::HashMap::new();
        let mut levels = Vec::new();
        let mut index = Vec::with_capacity(ids.len());
        for id in ids {
            let id = id.as_ref();
            let next = levels.len() as u32;
            let e = *map.entry(id.to_string()).or_insert_with(|| {
                levels.push(id.to_string());
                next
            });
            index.push(e);
        }
        FactorData {
            name: name.to_string(),
            levels,
            index,
        }
    }
}

/// Input to [`fit_lmm`]: a response vector and one or two intercept factors.
#[derive(Debug, Clone)]
pub struct LmmData {
    pub y: Vec<f64>,
    pub factors: Vec<FactorData>,
}

/// Rows dropped or levels lost when deriving the response-time design from a
/// step table.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RtDesignMeta {
    pub rows_total: usize,
    pub rows_used: usize,
    pub rows_missing_rt: usize,
    pub students_dropped: usize,
    pub skills_dropped: usize,
}

impl LmmData {
    /// Response-time design from a step table: `rt_log` on rows where it is
    /// present, with student and skill intercept factors. Levels observed
    /// only on rows lacking a response time drop out of the design; counts
    /// are reported rather than silently lost.
    pub fn rt_from_steps(steps: &[StepRecord]) -> (LmmData, RtDesignMeta) {
        let mut meta = RtDesignMeta {
            rows_total: steps.len(),
            ..RtDesignMeta::default()
        };
        let mut rows: Vec<&StepRecord> = steps.iter().filter(|s| s.rt_log.is_some()).collect();
        meta.rows_missing_rt = steps.len() - rows.len();
        meta.rows_used = rows.len();
        // Canonical order makes the fit independent of input row order.
        rows.sort_by(|a, b| {
            (&a.student_id, &a.kc_id, a.first_attempt_time, &a.problem_id, &a.step_id)
                .cmp(&(&b.student_id, &b.kc_id, b.first_attempt_time, &b.problem_id, &b.step_id))
        });
        let y: Vec<f64> = rows.iter().map(|s| s.rt_log.unwrap()).collect();
        let students = FactorData::from_ids(
            "student",
            &rows.iter().map(|s| s.student_id.as_str()).collect::<Vec<_>>(),
        );
        let skills = FactorData::from_ids(
            "skill",
            &rows.iter().map(|s| s.kc_id.as_str()).collect::<Vec<_>>(),
        );
        let all_students: std::collections::HashSet<&str> =
            steps.iter().map(|s| s.student_id.as_str()).collect();
        let all_skills: std::collections::HashSet<&str> =
            steps.iter().map(|s| s.kc_id.as_str()).collect();
        meta.students_dropped = all_students.len() - students.levels.len();
        meta.skills_dropped = all_skills.len() - skills.levels.len();
        (
            LmmData {
                y,
                factors: vec![students, skills],
            },
            meta,
        )
    }
}

/// Fit options.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmmSpec {
    pub criterion: FitCriterion,
    /// Objective evaluation budget for the simplex.
    pub max_evals: usize,
}

impl Default for LmmSpec {
    fn default() -> Self {
        LmmSpec {
            criterion: FitCriterion::Reml,
            max_evals: 600,
        }
    }
}

/// One estimated variance component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceComponent {
    pub factor: String,
    pub variance: f64,
    pub sd: f64,
    /// `variance / var_resid`; zero at the boundary.
    pub ratio: f64,
}

/// Per-level random-intercept predictions for one factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlupRow {
    pub id: String,
    pub effect: f64,
    pub n_obs: u32,
}

/// Fitted Gaussian mixed model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmmFit {
    pub criterion: FitCriterion,
    pub n_obs: usize,
    pub intercept: f64,
    pub components: Vec<VarianceComponent>,
    pub var_resid: f64,
    /// \-2 log-likelihood of the chosen criterion at the optimum.
    pub deviance: f64,
    pub converged: bool,
    /// Any variance component estimated at exactly zero.
    pub boundary: bool,
    pub evals: usize,
    pub trace_len: usize,
    /// Max |central finite difference| of the deviance over log ratios at
    /// the optimum; absent for boundary fits.
    pub grad_max: Option<f64>,
    #[serde(skip)]
    pub blups: Vec<Vec<f64>>,
    #[serde(skip)]
    pub level_ids: Vec<Vec<String>>,
    #[serde(skip)]
    pub level_n_obs: Vec<Vec<u32>>,
}

impl LmmFit {
    /// BLUP table for a factor by name; the name must match the design.
    pub fn extract_blups(&self, factor: &str) -> Result<Vec<BlupRow>> {
        let k = self
            .components
            .iter()
            .position(|c| c.factor == factor)
            .ok_or_else(|| Error::data(format!("unknown factor name: {factor:?}")))?;
        Ok(self.level_ids[k]
            .iter()
            .zip(&self.blups[k])
            .zip(&self.level_n_obs[k])
            .map(|((id, &effect), &n_obs)| BlupRow {
                id: id.clone(),
                effect,
                n_obs,
            })
            .collect())
    }
}

struct Profile<'a> {
    solver: &'a CrossedSolver,
    y: &'a [f64],
    n: usize,
    p: usize,
    criterion: FitCriterion,
    /// Which factors are active (not pinned to zero), by term index.
    active: Vec<usize>,
}

struct ProfileEval {
    deviance: f64,
    r2: f64,
    sol: EffectVec,
    lambdas: Vec<Tri>,
}

impl Profile<'_> {
    fn lambdas(&self, t_log: &[f64]) -> Vec<Tri> {
        let mut lams = vec![[0.0f64; 3]; self.solver.design().terms.len()];
        for (j, &term) in self.active.iter().enumerate() {
            lams[term][0] = (t_log[j] / 2.0).exp();
        }
        lams
    }

    fn eval(&self, t_log: &[f64]) -> Result<ProfileEval> {
        let lams = self.lambdas(t_log);
        let f = self.solver.factorize(&lams, None)?;
        let sol = f.solve_rows(self.y, None);
        let eta = self.solver.eta(&lams, &sol, &sol.x);
        let mut r2 = sol.terms_norm_sq();
        for i in 0..self.n {
            let e = self.y[i] - eta[i];
            r2 += e * e;
        }
        let deviance = match self.criterion {
            FitCriterion::Ml => {
                let n = self.n as f64;
                f.logdet_h() + n * (1.0 + (2.0 * std::f64::consts::PI * r2 / n).ln())
            }
            FitCriterion::Reml => {
                let np = (self.n - self.p) as f64;
                f.logdet_h()
                    + f.logdet_rx()
                    + np * (1.0 + (2.0 * std::f64::consts::PI * r2 / np).ln())
            }
        };
        Ok(ProfileEval {
            deviance,
            r2,
            sol,
            lambdas: lams,
        })
    }
}

const T_LO: f64 = -16.0;
const T_HI: f64 = 16.0;
/// Log-ratio below which an estimate is treated as a boundary candidate.
const T_BOUNDARY: f64 = T_LO + 2.0;

/// Profiled deviance at fixed log variance ratios `t_log`, one per factor in
/// design order. This is the objective [`fit_lmm`] minimizes, exposed so the
/// sparse path can be checked pointwise against dense evaluations.
pub fn profiled_deviance_at(
    data: &LmmData,
    criterion: FitCriterion,
    t_log: &[f64],
) -> Result<f64> {
    let n = data.y.len();
    if t_log.len() != data.factors.len() {
        return Err(Error::data(format!(
            "expected {} log variance ratios, got {}",
            data.factors.len(),
            t_log.len()
        )));
    }
    let terms: Vec<RandomTerm> = data
        .factors
        .iter()
        .map(|f| RandomTerm {
            n_levels: f.levels.len(),
            q: 1,
            level: f.index.clone(),
            z: vec![[1.0, 0.0]; n],
        })
        .collect();
    let design = Design {
        n,
        p: 1,
        x: vec![[1.0, 0.0]; n],
        terms,
    };
    let solver = CrossedSolver::new(design)?;
    let profile = Profile {
        solver: &solver,
        y: &data.y,
        n,
        p: 1,
        criterion,
        active: (0..data.factors.len()).collect(),
    };
    Ok(profile.eval(t_log)?.deviance)
}

/// Fits the random-intercept Gaussian model by profiled deviance.
pub fn fit_lmm(data: &LmmData, spec: &LmmSpec) -> Result<LmmFit> {
    let n = data.y.len();
    if data.factors.is_empty() || data.factors.len() > 2 {
        return Err(Error::data("model needs 1 or 2 grouping factors"));
    }
    if n < 3 {
        return Err(Error::data(format!(
            "too few response-time observations: {n}"
        )));
    }
    if data.y.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite response"));
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

    let terms: Vec<RandomTerm> = data
        .factors
        .iter()
        .map(|f| RandomTerm {
            n_levels: f.levels.len(),
            q: 1,
            level: f.index.clone(),
            z: vec![[1.0, 0.0]; n],
        })
        .collect();
    let design = Design {
        n,
        p: 1,
        x: vec![[1.0, 0.0]; n],
        terms,
    };
    let solver = CrossedSolver::new(design)?;

    let all: Vec<usize> = (0..data.factors.len()).collect();
    let (best, evals_total, trace_len, converged) =
        optimize_profile(&solver, &data.y, spec, &all)?;
    let OptOutcome {
        mut t_opt,
        mut active,
        ..
    } = best;

    // Boundary handling: pin components that ran into the floor to exactly
    // zero and keep the pinned fit when it does not worsen the deviance.
    let mut boundary = false;
    loop {
        let near: Vec<usize> = t_opt
            .iter()
            .enumerate()
            .filter(|(_, &t)| t <= T_BOUNDARY)
            .map(|(j, _)| j)
            .collect();
        if near.is_empty() {
            break;
        }
        let profile = Profile {
            solver: &solver,
            y: &data.y,
            n,
            p: 1,
            criterion: spec.criterion,
            active: active.clone(),
        };
        let current = profile.eval(&t_opt)?.deviance;
        let keep: Vec<usize> = active
            .iter()
            .enumerate()
            .filter(|(j, _)| !near.contains(j))
            .map(|(_, &term)| term)
            .collect();
        let (pinned, _, _, _) = optimize_profile(&solver, &data.y, spec, &keep)?;
        if pinned.fx <= current + 1e-6 * (1.0 + current.abs()) {
            boundary = true;
            t_opt = pinned.t_opt;
            active = pinned.active;
            if active.is_empty() {
                break;
            }
        } else {
            break;
        }
    }

    let profile = Profile {
        solver: &solver,
        y: &data.y,
        n,
        p: 1,
        criterion: spec.criterion,
        active: active.clone(),
    };
    let final_eval = profile.eval(&t_opt)?;

    let dof = match spec.criterion {
        FitCriterion::Reml => (n - 1) as f64,
        FitCriterion::Ml => n as f64,
    };
    let var_resid = final_eval.r2 / dof;

    let mut components = Vec::new();
    let mut blups = Vec::new();
    let mut level_ids = Vec::new();
    let mut level_n_obs = Vec::new();
    for (k, f) in data.factors.iter().enumerate() {
        let lam = final_eval.lambdas[k][0];
        let ratio = lam * lam;
        components.push(VarianceComponent {
            factor: f.name.clone(),
            variance: ratio * var_resid,
            sd: (ratio * var_resid).sqrt(),
            ratio,
        });
        // BLUPs on the data scale: b = lambda * u.
        blups.push(final_eval.sol.terms[k].iter().map(|u| lam * u).collect());
        level_ids.push(f.levels.clone());
        level_n_obs.push(solver.level_counts(k));
    }

    // Interior-gradient check: central differences on the profiled deviance.
    let grad_max = if boundary || active.is_empty() {
        None
    } else {
        let h = 1e-5;
        let mut gmax: f64 = 0.0;
        for j in 0..t_opt.len() {
            let mut tp = t_opt.clone();
            tp[j] += h;
            let mut tm = t_opt.clone();
            tm[j] -= h;
            let g = (profile.eval(&tp)?.deviance - profile.eval(&tm)?.deviance) / (2.0 * h);
            gmax = gmax.max(g.abs());
        }
        Some(gmax)
    };

    Ok(LmmFit {
        criterion: spec.criterion,
        n_obs: n,
        intercept: final_eval.sol.x[0],
        components,
        var_resid,
        deviance: final_eval.deviance,
        converged,
        boundary,
        evals: evals_total,
        trace_len,
        grad_max,
        blups,
        level_ids,
        level_n_obs,
    })
}

struct OptOutcome {
    t_opt: Vec<f64>,
    fx: f64,
    active: Vec<usize>,
}

/// Minimizes the profiled deviance over log variance ratios of the listed
/// active terms (others pinned to zero). Empty `active` is a plain
/// fixed-effects evaluation.
fn optimize_profile(
    solver: &CrossedSolver,
    y: &[f64],
    spec: &LmmSpec,
    active: &[usize],
) -> Result<(OptOutcome, usize, usize, bool)> {
    let n = y.len();
    let profile = Profile {
        solver,
        y,
        n,
        p: 1,
        criterion: spec.criterion,
        active: active.to_vec(),
    };
    if active.is_empty() {
        let e = profile.eval(&[])?;
        return Ok((
            OptOutcome {
                t_opt: vec![],
                fx: e.deviance,
                active: vec![],
            },
            1,
            1,
            true,
        ));
    }
    let dim = active.len();
    let mut err: Option<Error> = None;
    let (x, fx, evals, converged, trace_len) = {
        let mut obj = |t: &[f64]| -> f64 {
            match profile.eval(t) {
                Ok(e) => e.deviance,
                Err(e) => {
                    err.get_or_insert(e);
                    f64::INFINITY
                }
            }
        };
        let lo = vec![T_LO; dim];
        let hi = vec![T_HI; dim];
        let r = nelder_mead(
            &mut obj,
            &vec![0.0; dim],
            &lo,
            &hi,
            &NmOptions {
                init_step: 1.5,
                ftol: 1e-12,
                xtol: 1e-8,
                max_evals: spec.max_evals,
                restarts: 2,
            },
        );
        let trace_len = r.trace.len();
        let mut x = r.x;
        let mut fx = r.fx;
        let mut extra = polish_parabolic(&mut obj, &mut x, &mut fx, &lo, &hi, 1e-2, 3);
        extra += polish_parabolic(&mut obj, &mut x, &mut fx, &lo, &hi, 1e-5, 2);
        (x, fx, r.evals + extra, r.converged, trace_len)
    };
    if let Some(e) = err {
        if fx.is_infinite() {
            return Err(e);
        }
    }
    Ok((
        OptOutcome {
            t_opt: x,
            fx,
            active: active.to_vec(),
        },
        evals,
        trace_len,
        converged,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced_one_way(groups: &[&[f64]]) -> LmmData {
        let mut y = Vec::new();
        let mut ids = Vec::new();
        for (g, vals) in groups.iter().enumerate() {
            for &v in *vals {
                y.push(v);
                ids.push(format!("g{g}"));
            }
        }
        LmmData {
            y,
            factors: vec![FactorData::from_ids("group", &ids)],
        }
    }

    /// Balanced one-way REML has a closed form: var_resid = MSE and
    /// var_group = (MSB - MSE) / m for m observations per group.
    #[test]
    fn balanced_anova_closed_form() {
        let data = balanced_one_way(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let fit = fit_lmm(&data, &LmmSpec::default()).unwrap();
        // MSE = 0.5, MSB = 4, m = 2: var_g = 1.75, mu = 2.5.
        assert!((fit.var_resid - 0.5).abs() < 1e-6, "{}", fit.var_resid);
        assert!(
            (fit.components[0].variance - 1.75).abs() < 1e-6,
            "{}",
            fit.components[0].variance
        );
        assert!((fit.intercept - 2.5).abs() < 1e-9);
        assert!(!fit.boundary);
        // BLUP shrinkage: b = theta*sum(resid)/(1+theta*m) = -0.875 for group A.
        let blups = fit.extract_blups("group").unwrap();
        assert!((blups[0].effect + 0.875).abs() < 1e-6, "{}", blups[0].effect);
        assert!((blups[1].effect - 0.875).abs() < 1e-6);
        assert_eq!(blups[0].n_obs, 2);
    }

    #[test]
    fn identical_group_means_hit_boundary() {
        let data = balanced_one_way(&[&[1.0, 3.0], &[1.0, 3.0], &[3.0, 1.0]]);
        let fit = fit_lmm(&data, &LmmSpec::default()).unwrap();
        assert!(fit.boundary);
        assert_eq!(fit.components[0].variance, 0.0);
        assert!(fit.extract_blups("group").unwrap().iter().all(|b| b.effect == 0.0));
    }

    #[test]
    fn unknown_factor_name_errors() {
        let data = balanced_one_way(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let fit = fit_lmm(&data, &LmmSpec::default()).unwrap();
        assert!(fit.extract_blups("nope").is_err());
    }

    #[test]
    fn single_level_factor_rejected() {
        let data = LmmData {
            y: vec![1.0, 2.0, 3.0],
            factors: vec![FactorData::from_ids("g", &["a", "a", "a"])],
        };
        assert!(fit_lmm(&data, &LmmSpec::default()).is_err());
    }

    /// With an intercept in the model the per-factor BLUPs average to zero:
    /// summing each level's score equation gives `sum(b_g) / theta = 0`.
    /// Weighting by the (constant within a factor) prior precision changes
    /// nothing; posterior-precision weighting is not an identity in
    /// unbalanced designs.
    #[test]
    fn blups_mean_zero_identity() {
        let data = balanced_one_way(&[
            &[1.0, 2.2, 0.4],
            &[3.0, 4.1],
            &[0.5, 0.6, 0.7, 1.9],
            &[5.0, 4.4, 3.9],
        ]);
        let fit = fit_lmm(&data, &LmmSpec::default()).unwrap();
        let blups = fit.extract_blups("group").unwrap();
        let sum: f64 = blups.iter().map(|b| b.effect).sum();
        assert!(sum.abs() < 1e-6, "{sum}");
    }

    #[test]
    fn blups_shrink_toward_zero_relative_to_group_deviations() {
        let groups: [&[f64]; 4] = [
            &[1.0, 2.2, 0.4],
            &[3.0, 4.1],
            &[0.5, 0.6, 0.7, 1.9],
            &[5.0, 4.4, 3.9],
        ];
        let data = balanced_one_way(&groups);
        let fit = fit_lmm(&data, &LmmSpec::default()).unwrap();
        let blups = fit.extract_blups("group").unwrap();
        for (g, vals) in groups.iter().enumerate() {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let dev = mean - fit.intercept;
            let blup = blups[g].effect;
            assert!(blup.abs() <= dev.abs() + 1e-12, "group {g}: {blup} vs {dev}");
            assert!(blup * dev >= 0.0, "group {g}: shrinkage flipped sign");
        }
    }

    /// Deterministic crossed two-factor sample with both variances positive.
    fn crossed_sample(seed: u64, n_a: usize, n_b: usize, reps: usize) -> LmmData {
        let mut state = seed.max(1);
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut gauss = move || {
            let (u1, u2) = (next().max(1e-12), next());
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let a_eff: Vec<f64> = (0..n_a).map(|_| 0.7 * gauss()).collect();
        let b_eff: Vec<f64> = (0..n_b).map(|_| 0.5 * gauss()).collect();
        let mut y = Vec::new();
        let mut aids = Vec::new();
        let mut bids = Vec::new();
        for i in 0..n_a {
            for j in 0..n_b {
                for _ in 0..reps {
                    y.push(2.0 + a_eff[i] + b_eff[j] + 0.6 * gauss());
                    aids.push(format!("a{i}"));
                    bids.push(format!("b{j}"));
                }
            }
        }
        LmmData {
            y,
            factors: vec![
                FactorData::from_ids("student", &aids),
                FactorData::from_ids("skill", &bids),
            ],
        }
    }

    #[test]
    fn deviance_stationary_at_interior_optimum() {
        let data = crossed_sample(41, 12, 8, 1);
        let fit = fit_lmm(&data, &LmmSpec::default()).unwrap();
        assert!(!fit.boundary, "fixture must yield an interior optimum");
        let t: Vec<f64> = fit
            .components
            .iter()
            .map(|c| (c.variance / fit.var_resid).ln())
            .collect();
        let h = 1e-4;
        for k in 0..t.len() {
            let mut up = t.clone();
            let mut dn = t.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (profiled_deviance_at(&data, fit.criterion, &up).unwrap()
                - profiled_deviance_at(&data, fit.criterion, &dn).unwrap())
                / (2.0 * h);
            assert!(fd.abs() <= 1e-3, "coordinate {k}: fd {fd}");
        }
    }

    #[test]
    fn ml_and_reml_intercepts_agree_on_large_samples() {
        let data = crossed_sample(43, 100, 25, 4);
        assert!(data.y.len() >= 10_000);
        let reml = fit_lmm(&data, &LmmSpec::default()).unwrap();
        let ml = fit_lmm(
            &data,
            &LmmSpec {
                criterion: FitCriterion::Ml,
                ..LmmSpec::default()
            },
        )
        .unwrap();
        let diff = (reml.intercept - ml.intercept).abs();
        assert!(diff <= 0.01, "{} vs {}", reml.intercept, ml.intercept);
    }
}
