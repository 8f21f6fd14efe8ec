//! Acceptance suite: every shipped-behavior criterion runs here against an
//! independent oracle or a known ground truth, each printing one PASS/FAIL
//! line with its elapsed time (visible under `--nocapture`). Oracles live in
//! `common` and are written from textbook definitions. The run-directory
//! determinism criterion lives in the CLI crate's acceptance test.

mod common;

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rtprop_core::analysis::{
    bh_adjust, influence_diagnostics, moderation_fit, ols_fit, pearson, run_slice_analysis,
    AnalysisConfig, StudentParams,
};
use rtprop_core::iafm::{fit_iafm, FixedStructure, IafmData, IafmSpec, RandomStructure};
use rtprop_core::ingest::{ingest, IngestConfig};
use rtprop_core::lmm::{fit_lmm, profiled_deviance_at, FactorData, FitCriterion, LmmData, LmmSpec};
use rtprop_core::simulate::{emit_transactions, generate_population, ModerationCoeffs, SimConfig};
use rtprop_core::types::StepRecord;

fn norm(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Criterion 1: on balanced one-way layouts, REML variance components and
/// shrinkage predictions match the closed-form analysis-of-variance
/// estimators to 1e-6.
#[test]
fn c01_lmm_matches_closed_form_anova() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut max_err = 0.0f64;

    for _ in 0..50 {
        let g = rng.gen_range(3..=10usize);
        let m = rng.gen_range(2..=10usize);
        let mu = rng.gen_range(-2.0..2.0);
        // Zero between-variance cases exercise the boundary pin; interior
        // cases stay well away from it so both sides are clean.
        let sd_b = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.3..1.2) };
        let sd_e = rng.gen_range(0.3..1.5);

        let mut y = Vec::with_capacity(g * m);
        let mut ids = Vec::with_capacity(g * m);
        for i in 0..g {
            let b = sd_b * norm(&mut rng);
            for _ in 0..m {
                y.push(mu + b + sd_e * norm(&mut rng));
                ids.push(format!("g{i}"));
            }
        }
        let oracle = common::anova_oracle(&y, g, m);

        let data = LmmData { y, factors: vec![FactorData::from_ids("group", &ids)] };
        let fit = fit_lmm(&data, &LmmSpec::default()).unwrap();

        max_err = max_err.max((fit.intercept - oracle.mu).abs());
        max_err = max_err.max((fit.components[0].variance - oracle.var_between).abs());
        max_err = max_err.max((fit.var_resid - oracle.var_within).abs());
        for row in fit.extract_blups("group").unwrap() {
            let i: usize = row.id[1..].parse().unwrap();
            max_err = max_err.max((row.effect - oracle.blups[i]).abs());
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    let ok = max_err <= 1e-6;
    assert!(
        common::verdict(1, ok, elapsed, Some(5.0), &format!("50 balanced one-way datasets, max |err| {max_err:.2e} (tol 1e-6)")),
        "max err {max_err}"
    );
}

/// Criterion 2: the sparse profiled deviance equals a dense marginal
/// likelihood evaluation at random variance-ratio points, for both
/// objectives, to 1e-6.
#[test]
fn c02_profiled_deviance_matches_dense_evaluation() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut max_err = 0.0f64;

    for _ in 0..20 {
        let n = rng.gen_range(50..=200usize);
        let g1 = rng.gen_range(4..=12usize);
        let g2 = rng.gen_range(3..=8usize);
        let idx1: Vec<usize> = (0..n).map(|i| if i < g1 { i } else { rng.gen_range(0..g1) }).collect();
        let idx2: Vec<usize> = (0..n).map(|i| if i < g2 { i } else { rng.gen_range(0..g2) }).collect();
        let a: Vec<f64> = (0..g1).map(|_| 0.8 * norm(&mut rng)).collect();
        let b: Vec<f64> = (0..g2).map(|_| 0.5 * norm(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|i| 1.5 + a[idx1[i]] + b[idx2[i]] + norm(&mut rng)).collect();

        let ids1: Vec<String> = idx1.iter().map(|&v| format!("a{v}")).collect();
        let ids2: Vec<String> = idx2.iter().map(|&v| format!("b{v}")).collect();
        let data = LmmData {
            y: y.clone(),
            factors: vec![FactorData::from_ids("f1", &ids1), FactorData::from_ids("f2", &ids2)],
        };
        let groups = vec![idx1, idx2];

        for _ in 0..10 {
            let t = [rng.gen_range(-3.0..1.5), rng.gen_range(-3.0..1.5)];
            for (criterion, reml) in [(FitCriterion::Ml, false), (FitCriterion::Reml, true)] {
                let ours = profiled_deviance_at(&data, criterion, &t).unwrap();
                let dense = common::dense_lmm_deviance(&y, &groups, &t, reml);
                max_err = max_err.max((ours - dense).abs());
            }
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    let ok = max_err <= 1e-6;
    assert!(
        common::verdict(2, ok, elapsed, Some(10.0), &format!("20 crossed datasets x 10 ratio points x 2 objectives, max |dev err| {max_err:.2e} (tol 1e-6)")),
        "max err {max_err}"
    );
}

/// Criterion 3: single-factor random-intercept logistic fits match a 64-node
/// Gauss-Hermite oracle maximized independently: the fitted parameters give
/// up no more than 1e-2 of exact log-likelihood against the oracle's maximum,
/// and the fixed effect is within 0.02 of the oracle's.
///
/// The comparison is scored in the exact (quadrature) likelihood because the
/// raw Laplace objective carries an approximation bias of up to a few
/// hundredths of a nat when the fitted variance is large relative to the
/// cluster size, regardless of implementation; that bias is reported
/// alongside. [`glmm_laplace_objective_accurate_on_small_nested_case`] pins
/// the regime where the Laplace value itself is accurate to 1e-2.
#[test]
fn c03_glmm_matches_gauss_hermite_oracle() {
    let start = Instant::now();
    let (nodes, weights) = common::gauss_hermite(64);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut max_shortfall = 0.0f64;
    let mut max_beta_err = 0.0f64;
    let mut max_laplace_gap = 0.0f64;

    for _ in 0..20 {
        // Redraw until the instance has an interior maximum to compare:
        // all-same responses pin nothing, and fully separated clusters (for
        // example one all-correct and one all-wrong) push the variance
        // estimate to infinity, where the oracle search walks out of its
        // bracket and neither method has a defined optimum.
        let (data, bb, oracle_ll) = loop {
            let l = rng.gen_range(3..=5usize);
            let m = rng.gen_range(6..=(50 / l));
            let beta = rng.gen_range(-1.0..1.0);
            let sigma = rng.gen_range(0.3..1.0);
            let mut levels: Vec<Vec<bool>> = Vec::with_capacity(l);
            let mut y = Vec::new();
            let mut ids = Vec::new();
            for li in 0..l {
                let u = sigma * norm(&mut rng);
                let mut obs = Vec::with_capacity(m);
                for _ in 0..m {
                    let p = 1.0 / (1.0 + (-(beta + u)).exp());
                    let yi = rng.gen_bool(p);
                    obs.push(yi);
                    y.push(yi);
                    ids.push(format!("l{li}"));
                }
                levels.push(obs);
            }
            if !y.iter().any(|&v| v) || !y.iter().any(|&v| !v) {
                continue;
            }
            let (bb, ls, oracle_ll) = gh_maximize(&levels, &nodes, &weights);
            if ls > 1.5 {
                continue;
            }
            let n = y.len();
            break (
                IafmData {
                    y,
                    opp: vec![1.0; n],
                    factors: vec![FactorData::from_ids("student", &ids)],
                    random: vec![RandomStructure::Intercept],
                },
                bb,
                oracle_ll,
            );
        };

        let spec = IafmSpec {
            fixed: FixedStructure::InterceptOnly,
            center_opportunity: false,
            ..IafmSpec::default()
        };
        let fit = fit_iafm(&data, &spec).unwrap();
        let sd = fit.covariances[0].cov[0][0].sqrt().max(1e-12);
        let levels = gh_levels(&data);
        let exact_at_fit = common::gh_loglik(&levels, fit.beta[0], sd, &nodes, &weights);

        max_shortfall = max_shortfall.max(oracle_ll - exact_at_fit);
        max_beta_err = max_beta_err.max((fit.beta[0] - bb).abs());
        max_laplace_gap = max_laplace_gap.max((fit.laplace_loglik - oracle_ll).abs());
    }

    let elapsed = start.elapsed().as_secs_f64();
    let ok = max_shortfall <= 1e-2 && max_beta_err <= 0.02;
    assert!(
        common::verdict(3, ok, elapsed, Some(30.0), &format!("20 seeds vs 64-node quadrature, max exact-loglik shortfall {max_shortfall:.2e} (tol 1e-2), max |beta err| {max_beta_err:.2e} (tol 2e-2); laplace objective within {max_laplace_gap:.2e} of exact")),
        "shortfall {max_shortfall}, beta err {max_beta_err}"
    );
}

/// Companion to criterion 3: on a small nested instance with a moderate
/// fitted variance, the Laplace objective value itself is within 1e-2 of the
/// exact marginal log-likelihood (3 levels x 10 observations).
#[test]
fn glmm_laplace_objective_accurate_on_small_nested_case() {
    let (nodes, weights) = common::gauss_hermite(64);
    let mut rng = ChaCha8Rng::seed_from_u64(CANONICAL_GLMM_SEED);
    let (beta_true, sigma_true) = (0.3, 0.5);
    let mut levels: Vec<Vec<bool>> = Vec::new();
    let mut y = Vec::new();
    let mut ids = Vec::new();
    for li in 0..3 {
        let u = sigma_true * norm(&mut rng);
        let mut obs = Vec::new();
        for _ in 0..10 {
            let p = 1.0 / (1.0 + (-(beta_true + u)).exp());
            let yi = rng.gen_bool(p);
            obs.push(yi);
            y.push(yi);
            ids.push(format!("l{li}"));
        }
        levels.push(obs);
    }
    let data = IafmData {
        y,
        opp: vec![1.0; 30],
        factors: vec![FactorData::from_ids("student", &ids)],
        random: vec![RandomStructure::Intercept],
    };
    let spec = IafmSpec {
        fixed: FixedStructure::InterceptOnly,
        center_opportunity: false,
        ..IafmSpec::default()
    };
    let fit = fit_iafm(&data, &spec).unwrap();
    let (bb, _, oracle_ll) = gh_maximize(&levels, &nodes, &weights);
    assert!(
        (fit.laplace_loglik - oracle_ll).abs() <= 1e-2,
        "laplace {} vs exact {}",
        fit.laplace_loglik,
        oracle_ll
    );
    assert!((fit.beta[0] - bb).abs() <= 0.02, "{} vs {bb}", fit.beta[0]);
}

const CANONICAL_GLMM_SEED: u64 = 33;

/// Regroups flat observation vectors by level for the quadrature oracle.
fn gh_levels(data: &IafmData) -> Vec<Vec<bool>> {
    let f = &data.factors[0];
    let mut levels = vec![Vec::new(); f.levels.len()];
    for (i, &li) in f.index.iter().enumerate() {
        levels[li as usize].push(data.y[i]);
    }
    levels
}

/// Maximizes the quadrature likelihood over (beta, ln sigma) by a coarse grid
/// plus coordinate-wise golden sections at shrinking brackets. Returns the
/// argmax pair and the maximum.
fn gh_maximize(levels: &[Vec<bool>], nodes: &[f64], weights: &[f64]) -> (f64, f64, f64) {
    let obj = |beta: f64, ln_sigma: f64| common::gh_loglik(levels, beta, ln_sigma.exp(), nodes, weights);
    let (mut bb, mut ls) = (0.0f64, -0.5f64);
    let mut best = obj(bb, ls);
    for i in -10..=10 {
        for j in -12..=4 {
            let (cb, cl) = (i as f64 * 0.3, j as f64 * 0.3);
            let v = obj(cb, cl);
            if v > best {
                best = v;
                bb = cb;
                ls = cl;
            }
        }
    }
    for &width in &[0.4, 0.05, 0.005] {
        for _ in 0..6 {
            bb = golden_max(|x| obj(x, ls), bb - width, bb + width);
            ls = golden_max(|x| obj(bb, x), (ls - width).max(-6.0), ls + width);
        }
    }
    (bb, ls, obj(bb, ls))
}

/// Maximizes a unimodal section by golden ratio bracketing.
fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..70 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
        if (b - a).abs() < 1e-11 {
            break;
        }
    }
    0.5 * (a + b)
}

/// Criterion 4: with covariances pinned to zero the fit reduces to plain
/// logistic regression; coefficients match an independent Newton solver to
/// 1e-6.
#[test]
fn c04_pinned_fit_matches_plain_logistic() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut max_err = 0.0f64;

    for _ in 0..20 {
        let n = rng.gen_range(60..=200usize);
        let b0 = rng.gen_range(-1.0..1.0);
        let b1 = rng.gen_range(-0.3..0.3);
        let mut y = Vec::with_capacity(n);
        let mut opp = Vec::with_capacity(n);
        let mut sids = Vec::with_capacity(n);
        let mut kids = Vec::with_capacity(n);
        for i in 0..n {
            let o = (i % 8 + 1) as f64;
            let p = 1.0 / (1.0 + (-(b0 + b1 * o)).exp());
            y.push(rng.gen_bool(p));
            opp.push(o);
            sids.push(format!("s{}", i % 12));
            kids.push(format!("k{}", i % 5));
        }
        let data = IafmData {
            y: y.clone(),
            opp: opp.clone(),
            factors: vec![
                FactorData::from_ids("student", &sids),
                FactorData::from_ids("skill", &kids),
            ],
            random: vec![RandomStructure::InterceptSlope, RandomStructure::InterceptSlope],
        };
        let spec = IafmSpec { pin_zero: true, ..IafmSpec::default() };
        let fit = fit_iafm(&data, &spec).unwrap();

        // Default spec leaves opportunity uncentered, so the oracle sees the
        // same raw design.
        let x: Vec<Vec<f64>> = opp.iter().map(|&o| vec![1.0, o]).collect();
        let oracle = common::logistic_irls_oracle(&x, &y);

        max_err = max_err.max((fit.beta[0] - oracle[0]).abs());
        max_err = max_err.max((fit.beta[1] - oracle[1]).abs());
    }

    let elapsed = start.elapsed().as_secs_f64();
    let ok = max_err <= 1e-6;
    assert!(
        common::verdict(4, ok, elapsed, Some(5.0), &format!("20 pinned fits vs independent Newton solver, max |beta err| {max_err:.2e} (tol 1e-6)")),
        "max err {max_err}"
    );
}

/// Criterion 5: at the default simulated scale the fitted student parameters
/// recover the generating traits: mean correlations at least 0.90 (response
/// time), 0.85 (correctness intercepts), 0.60 (learning slopes) over 5 seeds.
#[test]
fn c05_parameter_recovery_at_default_scale() {
    let start = Instant::now();
    let base_seed = SimConfig::default().seed;
    let mut r_rt = Vec::new();
    let mut r_int = Vec::new();
    let mut r_slope = Vec::new();

    for s in 0..5u64 {
        let cfg = SimConfig { seed: base_seed + s, ..SimConfig::default() };
        let sim = generate_population(&cfg).unwrap();

        let (lmm_data, _) = LmmData::rt_from_steps(&sim.steps);
        let lmm = fit_lmm(&lmm_data, &LmmSpec::default()).unwrap();
        let mut rt_est = Vec::new();
        let mut rt_true = Vec::new();
        for row in lmm.extract_blups("student").unwrap() {
            rt_est.push(row.effect);
            rt_true.push(sim.truth.students[&row.id].rt_intercept);
        }
        r_rt.push(common::corr(&rt_est, &rt_true));

        let iafm = fit_iafm(&IafmData::from_steps(&sim.steps), &IafmSpec::default()).unwrap();
        let mut int_est = Vec::new();
        let mut int_true = Vec::new();
        let mut slope_est = Vec::new();
        let mut slope_true = Vec::new();
        for row in rtprop_core::iafm::extract_student_params(&iafm).unwrap() {
            let truth = &sim.truth.students[&row.student_id];
            int_est.push(row.prior_proficiency);
            int_true.push(truth.iafm_intercept);
            slope_est.push(row.learning_rate);
            slope_true.push(truth.iafm_slope);
        }
        r_int.push(common::corr(&int_est, &int_true));
        r_slope.push(common::corr(&slope_est, &slope_true));
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m_rt, m_int, m_slope) = (mean(&r_rt), mean(&r_int), mean(&r_slope));
    let elapsed = start.elapsed().as_secs_f64();
    let ok = m_rt >= 0.90 && m_int >= 0.85 && m_slope >= 0.60;
    assert!(
        common::verdict(5, ok, elapsed, Some(600.0), &format!("5 default-scale seeds, mean r: rt {m_rt:.3} (>=0.90), intercept {m_int:.3} (>=0.85), slope {m_slope:.3} (>=0.60)")),
        "rt {m_rt}, intercept {m_int}, slope {m_slope}"
    );
}

/// Criterion 6: with a 0.11 interaction injected into directly drawn traits,
/// the moderation regression's 95% interval covers truth in 93-97% of 200
/// samples at N = 787 and the mean estimate is within 0.02 of truth.
#[test]
fn c06_moderation_interval_coverage() {
    let start = Instant::now();
    let coeffs = ModerationCoeffs::default();
    assert_eq!(coeffs.b_interaction, 0.11);
    let noise_sd = coeffs.resolved_noise_sd().unwrap();

    let mut covered = 0u32;
    let mut est_sum = 0.0f64;
    let n_students = 787usize;
    let n_seeds = 200u64;

    for s in 0..n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(6_000 + s);
        let mut params = Vec::with_capacity(n_students);
        for i in 0..n_students {
            let z_rt = norm(&mut rng);
            let z_prof = norm(&mut rng);
            let lr = coeffs.b0
                + coeffs.b_rt * z_rt
                + coeffs.b_prof * z_prof
                + coeffs.b_interaction * z_rt * z_prof
                + noise_sd * norm(&mut rng);
            params.push(StudentParams {
                student_id: format!("S{i:04}"),
                rt_propensity: z_rt,
                prior_proficiency: z_prof,
                learning_rate: lr,
                slice: None,
                n_obs_rt: 10,
                n_obs_correct: 10,
            });
        }
        let fit = moderation_fit(&params).unwrap();
        let inter = &fit.coefficients[3];
        est_sum += inter.estimate;
        if inter.ci_lower <= coeffs.b_interaction && coeffs.b_interaction <= inter.ci_upper {
            covered += 1;
        }
    }

    let coverage = covered as f64 / n_seeds as f64;
    let mean_est = est_sum / n_seeds as f64;
    let elapsed = start.elapsed().as_secs_f64();
    let ok = (0.93..=0.97).contains(&coverage) && (mean_est - coeffs.b_interaction).abs() <= 0.02;
    assert!(
        common::verdict(6, ok, elapsed, Some(120.0), &format!("coverage {covered}/200 = {coverage:.3} (target [0.93, 0.97]), mean estimate {mean_est:.4} (truth 0.11 +/- 0.02)")),
        "coverage {coverage}, mean {mean_est}"
    );
}

/// Criterion 7: an interaction injected only into the Q1-generating slopes
/// is flagged as adjusted-significant in Q1 and non-significant in Q2-Q3 in
/// at least 80% of 100 simulated populations.
#[test]
fn c07_slice_localization_power() {
    let start = Instant::now();
    let mut successes = 0u32;
    let n_seeds = 100u64;

    for s in 0..n_seeds {
        // Power needs per-student traits recoverable from a quarter of each
        // session: uniform practice keeps per-student information (and so the
        // regression's error variance) comparable across students, intercept
        // variance 1.2^2 makes the per-slice proficiency estimates reliable,
        // and slope scale 0.15 keeps logits in the informative range.
        let cfg = SimConfig {
            n_students: 120,
            n_skills: 6,
            mean_obs_per_student: 84.0,
            sd_obs_per_student: 4.0,
            mean_skills_per_student: 3.0,
            sd_skills_per_student: 0.5,
            zipf_exponent: 0.0,
            steps_per_session: 12,
            iafm_beta0: 0.3,
            iafm_beta_opp: 0.08,
            cov_student: [[1.44, 0.0], [0.0, 0.0225]],
            cov_skill: [[0.25, 0.0], [0.0, 0.0016]],
            moderation: Some(ModerationCoeffs {
                b_interaction: 0.8,
                slope_scale: 0.15,
                slices: Some(vec![1]),
                ..ModerationCoeffs::default()
            }),
            seed: 70_000 + s,
            ..SimConfig::default()
        };
        let sim = generate_population(&cfg).unwrap();
        let Ok(sa) = run_slice_analysis(&sim.steps, &AnalysisConfig::default()) else {
            continue;
        };
        let find = |q: u8| {
            sa.effects
                .iter()
                .find(|r| r.slice.0 == q && r.effect == "RT x proficiency")
        };
        if let (Some(q1), Some(q2), Some(q3)) = (find(1), find(2), find(3)) {
            if q1.p_adjusted < 0.05 && q2.p_adjusted >= 0.05 && q3.p_adjusted >= 0.05 {
                successes += 1;
            }
        }
    }

    let rate = successes as f64 / n_seeds as f64;
    let elapsed = start.elapsed().as_secs_f64();
    let ok = rate >= 0.80;
    assert!(
        common::verdict(7, ok, elapsed, Some(900.0), &format!("Q1-only interaction localized in {successes}/100 populations (need >= 80)")),
        "success rate {rate}"
    );
}

/// Criterion 8: influence and multiplicity diagnostics are exact: Cook's D
/// equals its leave-one-out definition to 1e-10, the step-up adjustment
/// matches a quadratic-time brute force, and correlation p-values match an
/// independent t tail to 1e-10.
#[test]
fn c08_diagnostics_match_exact_definitions() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);

    // Cook's D against explicit leave-one-out refits.
    let mut max_cook_err = 0.0f64;
    for _ in 0..5 {
        let n = 40;
        let p = 4;
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![1.0, norm(&mut rng), norm(&mut rng), norm(&mut rng)])
            .collect();
        let beta = [0.5, 1.0, -0.7, 0.3];
        let y: Vec<f64> = x
            .iter()
            .map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() + norm(&mut rng))
            .collect();
        let names = ["b0", "b1", "b2", "b3"];
        let fit = ols_fit(&x, &y, &names).unwrap();
        let ids: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
        let report = influence_diagnostics(&fit, &ids).unwrap();

        let full = ols_beta(&x, &y);
        let sigma2 = {
            let rss: f64 = x
                .iter()
                .zip(&y)
                .map(|(r, &yi)| {
                    let pred: f64 = r.iter().zip(&full).map(|(a, b)| a * b).sum();
                    (yi - pred).powi(2)
                })
                .sum();
            rss / (n - p) as f64
        };
        let xtx = {
            let mut m = nalgebra::DMatrix::<f64>::zeros(p, p);
            for r in &x {
                let v = nalgebra::DVector::from_column_slice(r);
                m += &v * v.transpose();
            }
            m
        };
        for i in 0..n {
            let (mut xi, mut yi) = (x.clone(), y.clone());
            xi.remove(i);
            yi.remove(i);
            let loo = ols_beta(&xi, &yi);
            let d = nalgebra::DVector::from_iterator(p, full.iter().zip(&loo).map(|(a, b)| a - b));
            let oracle = (d.transpose() * &xtx * &d)[(0, 0)] / (p as f64 * sigma2);
            let ours = report.rows[i].cooks_d.unwrap();
            max_cook_err = max_cook_err.max((ours - oracle).abs());
        }
    }

    // Step-up adjustment against the quadratic brute force.
    let mut max_bh_err = 0.0f64;
    for _ in 0..1000 {
        let m = rng.gen_range(1..=40usize);
        let p: Vec<f64> = (0..m)
            .map(|_| {
                if rng.gen_bool(0.15) {
                    [0.01, 0.05, 0.5][rng.gen_range(0..3)]
                } else {
                    rng.gen_range(0.0..1.0)
                }
            })
            .collect();
        let ours = bh_adjust(&p).unwrap();
        let oracle = common::bh_brute_force(&p);
        for (a, b) in ours.iter().zip(&oracle) {
            max_bh_err = max_bh_err.max((a - b).abs());
        }
    }

    // Correlation p-values against the continued-fraction t tail.
    let mut max_p_err = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(5..=60usize);
        let x: Vec<f64> = (0..n).map(|_| norm(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|&v| 0.4 * v + norm(&mut rng)).collect();
        let r = pearson(&x, &y).unwrap();
        let df = (n - 2) as f64;
        let t = r.r * (df / (1.0 - r.r * r.r)).sqrt();
        let oracle = common::t_two_sided_oracle(t, df);
        max_p_err = max_p_err.max((r.p - oracle).abs());
    }

    let elapsed = start.elapsed().as_secs_f64();
    let ok = max_cook_err <= 1e-10 && max_bh_err == 0.0 && max_p_err <= 1e-10;
    assert!(
        common::verdict(8, ok, elapsed, Some(5.0), &format!("cook err {max_cook_err:.2e} (tol 1e-10), step-up err {max_bh_err:.2e} (exact), p err {max_p_err:.2e} (tol 1e-10)")),
        "cook {max_cook_err}, bh {max_bh_err}, p {max_p_err}"
    );
}

fn ols_beta(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = x[0].len();
    let mut xtx = nalgebra::DMatrix::<f64>::zeros(p, p);
    let mut xty = nalgebra::DVector::<f64>::zeros(p);
    for (r, &yi) in x.iter().zip(y) {
        let v = nalgebra::DVector::from_column_slice(r);
        xtx += &v * v.transpose();
        xty += &v * yi;
    }
    xtx.cholesky().unwrap().solve(&xty).iter().cloned().collect()
}

/// Criterion 10: ingestion conserves rows on every fixture, opportunity
/// sequences count practice without gaps, and the slice convention maps
/// normalized positions {0, .25, .5, .75, 1} to Q1, Q2, Q3, Q4, Q4.
#[test]
fn c10_ingestion_conservation_and_slice_convention() {
    let start = Instant::now();
    let mut ok = true;
    let mut notes = Vec::new();

    // Fixture 1: simulator output, clean by construction.
    let sim = generate_population(&SimConfig {
        n_students: 25,
        n_skills: 6,
        mean_obs_per_student: 40.0,
        sd_obs_per_student: 10.0,
        mean_skills_per_student: 3.0,
        sd_skills_per_student: 1.0,
        seed: 1001,
        ..SimConfig::default()
    })
    .unwrap();
    let mut tx = Vec::new();
    emit_transactions(&mut tx, &sim.attempts, &[]).unwrap();
    let out = ingest(tx.as_slice(), &IngestConfig::default()).unwrap();
    let parse_rejects: u64 = out.report.parse_rejects.values().sum();
    if !out.report.conserved
        || out.report.input_rows != out.report.parsed_rows + parse_rejects
        || out.report.input_rows != sim.attempts.len() as u64
    {
        ok = false;
        notes.push("simulator fixture conservation".to_string());
    }
    if !opportunities_gap_free(&out.steps) {
        ok = false;
        notes.push("simulator fixture opportunity gaps".to_string());
    }

    // Fixture 2: messy log with three bad rows and multi-skill tags.
    let messy = "\
student_id\tsession_id\ttime\tproblem_id\tstep_id\tattempt\toutcome\tkc
alice\tsA\t2023-01-09T09:00:00.000\tP1\ts1\t1\tCORRECT\tAlg~~Frac
alice\tsA\t2023-01-09T09:01:00.000\tP1\ts2\t1\tINCORRECT\tAlg
alice\tsA\tnot-a-time\tP1\ts3\t1\tCORRECT\tAlg
bob\tsB\t2023-01-09T10:00:00.000\tP2\ts1\t1\t\tFrac
bob\tsB\t2023-01-09T10:02:00.000\tP2\ts2\tzero\tCORRECT\tFrac
bob\tsB\t2023-01-09T10:04:00.000\tP2\ts3\t1\tHINT\tFrac
bob\tsB\t2023-01-09T10:06:00.000\tP2\ts3\t2\tCORRECT\tFrac
";
    let out2 = ingest(messy.as_bytes(), &IngestConfig::default()).unwrap();
    let rejects2: u64 = out2.report.parse_rejects.values().sum();
    if !out2.report.conserved || out2.report.input_rows != 7 || rejects2 != 3 {
        ok = false;
        notes.push(format!(
            "messy fixture: {} rows, {} rejects, conserved={}",
            out2.report.input_rows, rejects2, out2.report.conserved
        ));
    }
    if !opportunities_gap_free(&out2.steps) {
        ok = false;
        notes.push("messy fixture opportunity gaps".to_string());
    }

    // Fixture 3: one 40-minute session with steps at exactly u = 0, 1/4,
    // 1/2, 3/4, 1 of its span.
    let boundary = "\
student_id,session_id,time,problem_id,step_id,attempt,outcome,kc
carol,s1,2023-01-09T09:00:00.000,P1,s1,1,CORRECT,K
carol,s1,2023-01-09T09:10:00.000,P1,s2,1,CORRECT,K
carol,s1,2023-01-09T09:20:00.000,P1,s3,1,CORRECT,K
carol,s1,2023-01-09T09:30:00.000,P1,s4,1,CORRECT,K
carol,s1,2023-01-09T09:40:00.000,P1,s5,1,CORRECT,K
";
    let out3 = ingest(boundary.as_bytes(), &IngestConfig::default()).unwrap();
    let got: Vec<u8> = out3.steps.iter().map(|s| s.slice.0).collect();
    if got != vec![1, 2, 3, 4, 4] {
        ok = false;
        notes.push(format!("slice boundaries: got {got:?}, want [1, 2, 3, 4, 4]"));
    }
    if !out3.report.conserved {
        ok = false;
        notes.push("boundary fixture conservation".to_string());
    }

    let elapsed = start.elapsed().as_secs_f64();
    let detail = if notes.is_empty() {
        format!(
            "3 fixtures conserved ({} + 7 + 5 rows), opportunities gap-free, boundaries Q1 Q2 Q3 Q4 Q4",
            sim.attempts.len()
        )
    } else {
        notes.join("; ")
    };
    assert!(common::verdict(10, ok, elapsed, None, &detail), "{detail}");
}

fn opportunities_gap_free(steps: &[StepRecord]) -> bool {
    use std::collections::BTreeMap;
    let mut seen: BTreeMap<(&str, &str), Vec<(i64, u32)>> = BTreeMap::new();
    for s in steps {
        seen.entry((s.student_id.as_str(), s.kc_id.as_str()))
            .or_default()
            .push((s.first_attempt_time.0, s.opportunity));
    }
    seen.values_mut().all(|obs| {
        obs.sort();
        obs.iter().enumerate().all(|(i, &(_, opp))| opp == i as u32 + 1)
    })
}
