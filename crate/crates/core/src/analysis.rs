//! Stability, moderation, and time-slice analyses of fitted student
//! parameters.
//!
//! Student rows join three estimates on `student_id`: response-time
//! propensity (the Gaussian model's student intercept), prior proficiency
//! (the logistic model's student intercept), and learning rate (the logistic
//! model's student opportunity slope). Three analyses follow: pairwise
//! Pearson correlations of slice-specific estimates (construct stability),
//! ordinary least squares of `z(learning_rate)` on `z(rt)`, `z(proficiency)`
//! and their product with influence screening and a refit excluding flagged
//! students (trait moderation), and slice-specific refits with
//! Benjamini-Hochberg control across slices per effect (localization).
//!
//! For least squares with design X (n x p), hat diagonal
//! `h_i = x_i'(X'X)^-1 x_i`, residual e and `s^2 = rss/(n-p)`:
//!
//! ```text
//!   cooks_d_i = e_i^2 h_i / (p s^2 (1 - h_i)^2)
//!   t_i       = e_i / sqrt(s_(i)^2 (1 - h_i)),  externally studentized,
//!   s_(i)^2   = (rss - e_i^2 / (1 - h_i)) / (n - p - 1)
//! ```
//!
//! Benjamini-Hochberg maps sorted p-values through `min(1, m p_(j) / j)`
//! followed by a descending running minimum, then restores input order.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iafm::{extract_student_params, fit_iafm, FactorCovariance, IafmData, IafmFit, IafmSpec};
use crate::lmm::{fit_lmm, LmmData, LmmFit, LmmSpec, VarianceComponent};
use crate::num::special::{median_iqr, standardize, t_quantile, t_two_sided_p};
use crate::types::{Slice, StepRecord};

/// Design-order coefficient names of the moderation regression.
pub const MODERATION_EFFECTS: [&str; 4] = [
    "Intercept",
    "RT propensity",
    "Prior proficiency",
    "RT x proficiency",
];

/// Presentation order of the effects (proficiency before pacing, the
/// interaction last).
const EFFECT_BLOCKS: [usize; 4] = [0, 2, 1, 3];

/// One student's joined parameter estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentParams {
    pub student_id: String,
    /// Student intercept of the log response-time model.
    pub rt_propensity: f64,
    /// Student intercept of the correctness model.
    pub prior_proficiency: f64,
    /// Student opportunity slope of the correctness model.
    pub learning_rate: f64,
    /// Absent for fits pooled over the whole session.
    pub slice: Option<Slice>,
    /// Rows with a response time behind the propensity estimate.
    pub n_obs_rt: u32,
    /// First attempts behind the correctness estimates.
    pub n_obs_correct: u32,
}

/// Inner join of both models' student effects, sorted by student id.
pub fn join_student_params(
    lmm: &LmmFit,
    iafm: &IafmFit,
    slice: Option<Slice>,
) -> Result<Vec<StudentParams>> {
    let blups = lmm.extract_blups("student")?;
    let iafm_rows = extract_student_params(iafm)?;
    let by_id: HashMap<&str, &crate::iafm::StudentParamRow> = iafm_rows
        .iter()
        .map(|r| (r.student_id.as_str(), r))
        .collect();
    let mut out: Vec<StudentParams> = blups
        .iter()
        .filter_map(|b| {
            by_id.get(b.id.as_str()).map(|r| StudentParams {
                student_id: b.id.clone(),
                rt_propensity: b.effect,
                prior_proficiency: r.prior_proficiency,
                learning_rate: r.learning_rate,
                slice,
                n_obs_rt: b.n_obs,
                n_obs_correct: r.n_obs,
            })
        })
        .collect();
    out.sort_by(|a, b| a.student_id.cmp(&b.student_id));
    Ok(out)
}

/// Pearson correlation with a two-sided t test.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PearsonResult {
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

/// Correlation of paired samples; `p` from `t = r sqrt((n-2)/(1-r^2))` on
/// n-2 degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<PearsonResult> {
    if x.len() != y.len() {
        return Err(Error::data("pearson needs paired inputs of equal length"));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::data("pearson needs at least 3 pairs"));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if !(sxx > 0.0) || !(syy > 0.0) {
        return Err(Error::data("zero variance"));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let denom = 1.0 - r * r;
    let p = if denom <= 0.0 {
        0.0
    } else {
        t_two_sided_p(r * ((nf - 2.0) / denom).sqrt(), nf - 2.0)?
    };
    Ok(PearsonResult { r, p, n })
}

/// Which joined parameter a stability matrix correlates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityField {
    RtPropensity,
    LearningRate,
}

impl StabilityField {
    pub fn as_str(&self) -> &'static str {
        match self {
            StabilityField::RtPropensity => "rt_propensity",
            StabilityField::LearningRate => "learning_rate",
        }
    }

    fn of(&self, p: &StudentParams) -> f64 {
        match self {
            StabilityField::RtPropensity => p.rt_propensity,
            StabilityField::LearningRate => p.learning_rate,
        }
    }
}

/// One pairwise-complete correlation cell.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StabilityCell {
    pub r: f64,
    pub p: f64,
    /// Size of the pairwise join behind this cell.
    pub n: usize,
}

/// Symmetric k x k slice-by-slice correlation matrix; `None` marks cells
/// whose pairwise join has fewer than 3 students (or zero variance).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityMatrix {
    pub field: StabilityField,
    pub cells: Vec<Vec<Option<StabilityCell>>>,
}

/// Pairwise-complete correlations of one parameter across slice tables.
/// Students absent from either slice of a pair are dropped for that pair.
pub fn stability_matrix(tables: &[Vec<StudentParams>], field: StabilityField) -> StabilityMatrix {
    let k = tables.len();
    let mut cells: Vec<Vec<Option<StabilityCell>>> = vec![vec![None; k]; k];
    for i in 0..k {
        let n = tables[i].len();
        if n >= 3 {
            cells[i][i] = Some(StabilityCell { r: 1.0, p: 0.0, n });
        }
        let by_id: HashMap<&str, f64> = tables[i]
            .iter()
            .map(|p| (p.student_id.as_str(), field.of(p)))
            .collect();
        for j in (i + 1)..k {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for p in &tables[j] {
                if let Some(&v) = by_id.get(p.student_id.as_str()) {
                    x.push(v);
                    y.push(field.of(p));
                }
            }
            if let Ok(res) = pearson(&x, &y) {
                let cell = Some(StabilityCell {
                    r: res.r,
                    p: res.p,
                    n: res.n,
                });
                cells[i][j] = cell;
                cells[j][i] = cell;
            }
        }
    }
    StabilityMatrix { field, cells }
}

/// One estimated coefficient with its inference columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub t: f64,
    pub p: f64,
    /// Filled by the across-slice false-discovery-rate pass.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjusted_p: Option<f64>,
}

/// Ordinary least squares fit retaining what the diagnostics need.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OlsFit {
    pub coefficients: Vec<CoefRow>,
    pub n: usize,
    pub p: usize,
    pub r_squared: f64,
    pub var_resid: f64,
    #[serde(skip)]
    pub residuals: Vec<f64>,
    #[serde(skip)]
    pub hat_diag: Vec<f64>,
    #[serde(skip)]
    x: Vec<Vec<f64>>,
    #[serde(skip)]
    y: Vec<f64>,
}

/// Least squares via the normal equations (the standardized moderation
/// design is small and well conditioned). SEs from `s^2 (X'X)^-1`, CIs at
/// `t(0.975, n-p)`, two-sided t p-values.
pub fn ols_fit(x: &[Vec<f64>], y: &[f64], names: &[&str]) -> Result<OlsFit> {
    let n = y.len();
    let p = names.len();
    if x.len() != n || x.iter().any(|row| row.len() != p) {
        return Err(Error::data("design and response dimensions disagree"));
    }
    if n <= p {
        return Err(Error::data(format!(
            "least squares needs more rows than coefficients ({n} <= {p})"
        )));
    }
    let xm = DMatrix::from_fn(n, p, |i, j| x[i][j]);
    let yv = DVector::from_column_slice(y);
    let xtx = xm.transpose() * &xm;
    let xty = xm.transpose() * &yv;
    let chol = Cholesky::new(xtx).ok_or_else(|| Error::numerical("rank-deficient design"))?;
    let beta = chol.solve(&xty);
    let inv = chol.inverse();

    let fitted = &xm * &beta;
    let residuals: Vec<f64> = (0..n).map(|i| y[i] - fitted[i]).collect();
    let rss: f64 = residuals.iter().map(|e| e * e).sum();
    let my = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let df = (n - p) as f64;
    let var_resid = rss / df;
    let tq = t_quantile(0.975, df)?;

    let mut coefficients = Vec::with_capacity(p);
    for k in 0..p {
        let est = beta[k];
        let se = (var_resid * inv[(k, k)]).sqrt();
        let t = if se > 0.0 { est / se } else { f64::INFINITY };
        let pval = if t.is_finite() {
            t_two_sided_p(t, df)?
        } else {
            0.0
        };
        coefficients.push(CoefRow {
            name: names[k].to_string(),
            estimate: est,
            se,
            ci_lower: est - tq * se,
            ci_upper: est + tq * se,
            t,
            p: pval,
            adjusted_p: None,
        });
    }
    let hat_diag: Vec<f64> = (0..n)
        .map(|i| {
            let mut h = 0.0;
            for a in 0..p {
                for b in 0..p {
                    h += x[i][a] * inv[(a, b)] * x[i][b];
                }
            }
            h
        })
        .collect();
    Ok(OlsFit {
        coefficients,
        n,
        p,
        r_squared: if tss > 0.0 { 1.0 - rss / tss } else { f64::NAN },
        var_resid,
        residuals,
        hat_diag,
        x: x.to_vec(),
        y: y.to_vec(),
    })
}

/// Influence measures for one fitted row. `None` marks measures undefined
/// at leverage 1 (or a degenerate leave-one-out variance); such rows are
/// flagged automatically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfluenceRow {
    pub student_id: String,
    pub leverage: f64,
    pub cooks_d: Option<f64>,
    pub studentized: Option<f64>,
    pub flagged: bool,
}

/// Influence table plus the refit excluding flagged rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub rows: Vec<InfluenceRow>,
    pub n_flagged: usize,
    /// `k/N (pct%)`, e.g. `98/787 (12.5%)`.
    pub summary: String,
    /// Absent when fewer than p + 2 rows survive the screen.
    pub refit: Option<Vec<CoefRow>>,
    pub refit_n: usize,
}

/// Renders a flag count as `k/N (pct%)`.
pub fn flag_summary(k: usize, n: usize) -> String {
    let pct = if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
    format!("{k}/{n} ({pct:.1}%)")
}

/// Screens rows by Cook's D > 4/n, leverage > 2p/n, or |externally
/// studentized residual| > 3, then refits on the survivors.
pub fn influence_diagnostics(fit: &OlsFit, ids: &[String]) -> Result<InfluenceReport> {
    let n = fit.n;
    let p = fit.p;
    if ids.len() != n {
        return Err(Error::data("id list does not match the fitted rows"));
    }
    if n < p + 2 {
        return Err(Error::data(
            "influence diagnostics need at least p + 2 rows",
        ));
    }
    let rss: f64 = fit.residuals.iter().map(|e| e * e).sum();
    let cooks_cut = 4.0 / n as f64;
    let lev_cut = 2.0 * p as f64 / n as f64;
    let loo_df = (n - p - 1) as f64;

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let h = fit.hat_diag[i];
        let e = fit.residuals[i];
        let one_m_h = 1.0 - h;
        let (cooks_d, studentized) = if one_m_h <= 1e-12 {
            (None, None)
        } else {
            let d = e * e * h / (p as f64 * fit.var_resid * one_m_h * one_m_h);
            let s2_loo = (rss - e * e / one_m_h).max(0.0) / loo_df;
            let t = e / (s2_loo * one_m_h).sqrt();
            (Some(d), t.is_finite().then_some(t))
        };
        let flagged = one_m_h <= 1e-12
            || cooks_d.is_some_and(|d| d > cooks_cut)
            || h > lev_cut
            || studentized.is_none()
            || studentized.is_some_and(|t| t.abs() > 3.0);
        rows.push(InfluenceRow {
            student_id: ids[i].clone(),
            leverage: h,
            cooks_d,
            studentized,
            flagged,
        });
    }
    let n_flagged = rows.iter().filter(|r| r.flagged).count();

    let keep: Vec<usize> = (0..n).filter(|&i| !rows[i].flagged).collect();
    let (refit, refit_n) = if keep.len() >= p + 2 {
        let xs: Vec<Vec<f64>> = keep.iter().map(|&i| fit.x[i].clone()).collect();
        let ys: Vec<f64> = keep.iter().map(|&i| fit.y[i]).collect();
        let names: Vec<&str> = fit.coefficients.iter().map(|c| c.name.as_str()).collect();
        (Some(ols_fit(&xs, &ys, &names)?.coefficients), keep.len())
    } else {
        (None, keep.len())
    };

    Ok(InfluenceReport {
        summary: flag_summary(n_flagged, n),
        rows,
        n_flagged,
        refit,
        refit_n,
    })
}

/// Standardized moderation regression of learning rate on pacing,
/// proficiency, and their product, with influence screening.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModerationFit {
    pub n: usize,
    pub r_squared: f64,
    pub var_resid: f64,
    /// Order: intercept, RT propensity, prior proficiency, interaction.
    pub coefficients: Vec<CoefRow>,
    pub influence: InfluenceReport,
}

/// Fits `z(learning_rate) ~ z(rt) + z(proficiency) + z(rt) z(proficiency)`.
/// Inputs are standardized internally; the product is formed from the
/// z-scores and not restandardized.
pub fn moderation_fit(params: &[StudentParams]) -> Result<ModerationFit> {
    let n = params.len();
    if n < 10 {
        return Err(Error::data(format!(
            "moderation fit needs at least 10 students, got {n}"
        )));
    }
    let z_rt = standardize(&params.iter().map(|p| p.rt_propensity).collect::<Vec<_>>())?;
    let z_prof = standardize(
        &params
            .iter()
            .map(|p| p.prior_proficiency)
            .collect::<Vec<_>>(),
    )?;
    let z_lr = standardize(&params.iter().map(|p| p.learning_rate).collect::<Vec<_>>())?;
    let x: Vec<Vec<f64>> = (0..n)
        .map(|i| vec![1.0, z_rt[i], z_prof[i], z_rt[i] * z_prof[i]])
        .collect();
    let fit = ols_fit(&x, &z_lr, &MODERATION_EFFECTS)?;
    let ids: Vec<String> = params.iter().map(|p| p.student_id.clone()).collect();
    let influence = influence_diagnostics(&fit, &ids)?;
    Ok(ModerationFit {
        n,
        r_squared: fit.r_squared,
        var_resid: fit.var_resid,
        coefficients: fit.coefficients,
        influence,
    })
}

/// Benjamini-Hochberg step-up adjustment, input order preserved.
pub fn bh_adjust(p: &[f64]) -> Result<Vec<f64>> {
    for &v in p {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::data(format!("p-value outside [0, 1]: {v}")));
        }
    }
    let m = p.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min((m as f64 * p[i] / (rank + 1) as f64).min(1.0));
        adjusted[i] = running;
    }
    Ok(adjusted)
}

/// Marker for an adjusted p-value: `***` < .001, `**` < .01, `*` < .05,
/// `.` < .10, empty otherwise.
pub fn significance_marker(adjusted_p: f64) -> &'static str {
    if adjusted_p < 0.001 {
        "***"
    } else if adjusted_p < 0.01 {
        "**"
    } else if adjusted_p < 0.05 {
        "*"
    } else if adjusted_p < 0.10 {
        "."
    } else {
        ""
    }
}

/// `<.001` below a thousandth, else three decimals (`0.499`).
pub fn format_p(p: f64) -> String {
    if p < 0.001 {
        "<.001".to_string()
    } else {
        format!("{p:.3}")
    }
}

/// Thresholds and model settings for the slice and pooled analyses.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Students need this many step rows in a slice to enter its fits.
    pub min_obs_per_slice: u32,
    /// Number of session slices the step table was cut into.
    pub slice_count: u8,
    pub lmm: LmmSpec,
    pub iafm: IafmSpec,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            min_obs_per_slice: 3,
            slice_count: 4,
            lmm: LmmSpec::default(),
            iafm: IafmSpec::default(),
        }
    }
}

/// Compact Gaussian-model summary for reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmmSummary {
    pub intercept: f64,
    pub components: Vec<VarianceComponent>,
    pub var_resid: f64,
    pub converged: bool,
    pub boundary: bool,
    pub n_obs: usize,
}

impl From<&LmmFit> for LmmSummary {
    fn from(f: &LmmFit) -> Self {
        LmmSummary {
            intercept: f.intercept,
            components: f.components.clone(),
            var_resid: f.var_resid,
            converged: f.converged,
            boundary: f.boundary,
            n_obs: f.n_obs,
        }
    }
}

/// Compact correctness-model summary for reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IafmSummary {
    pub beta: Vec<f64>,
    pub covariances: Vec<FactorCovariance>,
    pub laplace_loglik: f64,
    pub converged: bool,
    pub n_obs: usize,
}

impl From<&IafmFit> for IafmSummary {
    fn from(f: &IafmFit) -> Self {
        IafmSummary {
            beta: f.beta.clone(),
            covariances: f.covariances.clone(),
            laplace_loglik: f.laplace_loglik,
            converged: f.converged,
            n_obs: f.n_obs,
        }
    }
}

/// Everything estimated within one session slice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceFitOutput {
    pub slice: Slice,
    /// False when a model failed or did not converge; such slices are
    /// excluded from the across-slice adjustment.
    pub available: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub n_steps: usize,
    pub n_students: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lmm: Option<LmmSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iafm: Option<IafmSummary>,
    pub params: Vec<StudentParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pearson_rt_learning: Option<PearsonResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moderation: Option<ModerationFit>,
}

/// One row of the slice-by-effect table (raw p shown, marker from the
/// adjusted p).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceEffectRow {
    pub slice: Slice,
    pub effect: String,
    pub estimate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub sig: String,
}

/// Slice-specific fits plus the across-slice adjusted effect table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceAnalysis {
    pub slices: Vec<SliceFitOutput>,
    pub effects: Vec<SliceEffectRow>,
}

fn fit_one_slice(steps: &[StepRecord], slice: Slice, config: &AnalysisConfig) -> SliceFitOutput {
    let mut counts: HashMap<&str, u32> = HashMap::new();
    for s in steps.iter().filter(|s| s.slice == slice) {
        *counts.entry(s.student_id.as_str()).or_insert(0) += 1;
    }
    let rows: Vec<StepRecord> = steps
        .iter()
        .filter(|s| s.slice == slice && counts[s.student_id.as_str()] >= config.min_obs_per_slice)
        .cloned()
        .collect();
    let n_students = counts
        .values()
        .filter(|&&c| c >= config.min_obs_per_slice)
        .count();
    let mut out = SliceFitOutput {
        slice,
        available: false,
        note: None,
        n_steps: rows.len(),
        n_students,
        lmm: None,
        iafm: None,
        params: Vec::new(),
        pearson_rt_learning: None,
        moderation: None,
    };
    if rows.is_empty() {
        out.note = Some("no rows after the minimum-observations filter".to_string());
        return out;
    }

    let (ldata, _meta) = LmmData::rt_from_steps(&rows);
    let lfit = match fit_lmm(&ldata, &config.lmm) {
        Ok(f) => f,
        Err(e) => {
            out.note = Some(format!("response-time model: {e}"));
            return out;
        }
    };
    let idata = IafmData::from_steps(&rows);
    let ifit = match fit_iafm(&idata, &config.iafm) {
        Ok(f) => f,
        Err(e) => {
            out.lmm = Some(LmmSummary::from(&lfit));
            out.note = Some(format!("correctness model: {e}"));
            return out;
        }
    };
    out.lmm = Some(LmmSummary::from(&lfit));
    out.iafm = Some(IafmSummary::from(&ifit));
    if !lfit.converged || !ifit.converged {
        let which = if lfit.converged {
            "correctness model"
        } else {
            "response-time model"
        };
        out.note = Some(format!("{which} did not converge"));
        return out;
    }

    match join_student_params(&lfit, &ifit, Some(slice)) {
        Ok(params) => out.params = params,
        Err(e) => {
            out.note = Some(format!("parameter join: {e}"));
            return out;
        }
    }
    out.available = true;

    let rt: Vec<f64> = out.params.iter().map(|p| p.rt_propensity).collect();
    let lr: Vec<f64> = out.params.iter().map(|p| p.learning_rate).collect();
    out.pearson_rt_learning = pearson(&rt, &lr).ok();
    match moderation_fit(&out.params) {
        Ok(m) => out.moderation = Some(m),
        Err(e) => out.note = Some(format!("moderation unavailable: {e}")),
    }
    out
}

/// Refits both models inside every slice (concurrently), then controls the
/// false discovery rate of each effect across slices.
pub fn run_slice_analysis(steps: &[StepRecord], config: &AnalysisConfig) -> Result<SliceAnalysis> {
    if config.slice_count == 0 {
        return Err(Error::config("slice count must be at least 1"));
    }
    let mut slices: Vec<SliceFitOutput> = (1..=config.slice_count)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|q| fit_one_slice(steps, Slice(q), config))
        .collect();

    // Across-slice adjustment per effect, over slices with a moderation fit.
    let fitted: Vec<usize> = slices
        .iter()
        .enumerate()
        .filter(|(_, s)| s.available && s.moderation.is_some())
        .map(|(i, _)| i)
        .collect();
    let mut effects = Vec::new();
    for &coef in EFFECT_BLOCKS.iter() {
        let raw: Vec<f64> = fitted
            .iter()
            .map(|&i| slices[i].moderation.as_ref().unwrap().coefficients[coef].p)
            .collect();
        let adjusted = bh_adjust(&raw)?;
        for (pos, &i) in fitted.iter().enumerate() {
            let slice = slices[i].slice;
            let m = slices[i].moderation.as_mut().unwrap();
            m.coefficients[coef].adjusted_p = Some(adjusted[pos]);
            let c = &m.coefficients[coef];
            effects.push(SliceEffectRow {
                slice,
                effect: c.name.clone(),
                estimate: c.estimate,
                ci_lower: c.ci_lower,
                ci_upper: c.ci_upper,
                p_raw: c.p,
                p_adjusted: adjusted[pos],
                sig: significance_marker(adjusted[pos]).to_string(),
            });
        }
    }
    Ok(SliceAnalysis { slices, effects })
}

/// Response-time spread within one slice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RtSliceStat {
    pub slice: Slice,
    pub n: usize,
    pub median: f64,
    pub iqr: f64,
}

/// Full analysis bundle: pooled fits, moderation, stability, and the
/// slice-specific table. Serializable so reports can be re-rendered without
/// recomputation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisOutput {
    pub version: String,
    pub n_steps: usize,
    pub n_students: usize,
    pub n_skills: usize,
    pub rt_by_slice: Vec<RtSliceStat>,
    pub pooled_lmm: LmmSummary,
    pub pooled_iafm: IafmSummary,
    pub pooled_params: Vec<StudentParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pooled_pearson: Option<PearsonResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moderation: Option<ModerationFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moderation_note: Option<String>,
    pub stability_rt: StabilityMatrix,
    pub stability_learning: StabilityMatrix,
    pub slices: Vec<SliceFitOutput>,
    pub effects: Vec<SliceEffectRow>,
}

/// Pooled fits over all slices plus the full slice analysis. The pooled
/// models use every step row; the minimum-observations filter applies only
/// within slices.
pub fn run_full_analysis(steps: &[StepRecord], config: &AnalysisConfig) -> Result<AnalysisOutput> {
    if steps.is_empty() {
        return Err(Error::data("no step rows to analyze"));
    }
    let mut students: Vec<&str> = steps.iter().map(|s| s.student_id.as_str()).collect();
    students.sort_unstable();
    students.dedup();
    let mut skills: Vec<&str> = steps.iter().map(|s| s.kc_id.as_str()).collect();
    skills.sort_unstable();
    skills.dedup();

    let rt_by_slice: Vec<RtSliceStat> = (1..=config.slice_count)
        .map(|q| {
            let rts: Vec<f64> = steps
                .iter()
                .filter(|s| s.slice == Slice(q))
                .filter_map(|s| s.rt_seconds)
                .collect();
            let (median, iqr) = median_iqr(&rts).unwrap_or((f64::NAN, f64::NAN));
            RtSliceStat {
                slice: Slice(q),
                n: rts.len(),
                median,
                iqr,
            }
        })
        .collect();

    let (ldata, _meta) = LmmData::rt_from_steps(steps);
    let lfit = fit_lmm(&ldata, &config.lmm)
        .map_err(|e| Error::numerical(format!("pooled response-time model: {e}")))?;
    let ifit = fit_iafm(&IafmData::from_steps(steps), &config.iafm)
        .map_err(|e| Error::numerical(format!("pooled correctness model: {e}")))?;
    let pooled_params = join_student_params(&lfit, &ifit, None)?;

    let rt: Vec<f64> = pooled_params.iter().map(|p| p.rt_propensity).collect();
    let lr: Vec<f64> = pooled_params.iter().map(|p| p.learning_rate).collect();
    let pooled_pearson = pearson(&rt, &lr).ok();
    let (moderation, moderation_note) = match moderation_fit(&pooled_params) {
        Ok(m) => (Some(m), None),
        Err(e) => (None, Some(e.to_string())),
    };

    let SliceAnalysis { slices, effects } = run_slice_analysis(steps, config)?;
    let tables: Vec<Vec<StudentParams>> = slices.iter().map(|s| s.params.clone()).collect();
    let stability_rt = stability_matrix(&tables, StabilityField::RtPropensity);
    let stability_learning = stability_matrix(&tables, StabilityField::LearningRate);

    Ok(AnalysisOutput {
        version: env!("CARGO_PKG_VERSION").to_string(),
        n_steps: steps.len(),
        n_students: students.len(),
        n_skills: skills.len(),
        rt_by_slice,
        pooled_lmm: LmmSummary::from(&lfit),
        pooled_iafm: IafmSummary::from(&ifit),
        pooled_params,
        pooled_pearson,
        moderation,
        moderation_note,
        stability_rt,
        stability_learning,
        slices,
        effects,
    })
}

fn slice_header(k: usize, i: usize) -> String {
    let label = Slice((i + 1) as u8).to_string();
    if k >= 2 && i == 0 {
        format!("{label} (earliest)")
    } else if k >= 2 && i == k - 1 {
        format!("{label} (latest)")
    } else {
        label
    }
}

fn p_label(p: f64) -> String {
    if p < 0.001 {
        "p<.001".to_string()
    } else {
        format!("p={p:.3}")
    }
}

fn render_stability(out: &mut String, m: &StabilityMatrix) {
    let k = m.cells.len();
    out.push_str("| |");
    for j in 0..k {
        out.push_str(&format!(" {} |", Slice((j + 1) as u8)));
    }
    out.push('\n');
    out.push_str(&format!("|---|{}\n", "---|".repeat(k)));
    for i in 0..k {
        out.push_str(&format!("| {} |", Slice((i + 1) as u8)));
        for j in 0..k {
            match &m.cells[i][j] {
                Some(c) if i == j => out.push_str(" 1.00 |"),
                Some(c) => out.push_str(&format!(
                    " {:.2} ({}, n={}) |",
                    c.r,
                    p_label(c.p),
                    c.n
                )),
                None => out.push_str(" -- |"),
            }
        }
        out.push('\n');
    }
}

fn render_coef_table(out: &mut String, rows: &[CoefRow], decimals: usize) {
    out.push_str("| Predictor | Estimate | 95% CI | p |\n|---|---|---|---|\n");
    for &coef in EFFECT_BLOCKS.iter() {
        let c = &rows[coef];
        out.push_str(&format!(
            "| {} | {:.prec$} | [{:.prec$}, {:.prec$}] | {} |\n",
            c.name,
            c.estimate,
            c.ci_lower,
            c.ci_upper,
            format_p(c.p),
            prec = decimals
        ));
    }
}

/// Renders the markdown report. `config_hash` is stamped in the header and
/// footer so every emitted document names the configuration it came from.
pub fn render_markdown_report(a: &AnalysisOutput, config_hash: &str) -> String {
    let mut out = String::new();
    let k = a.rt_by_slice.len();
    out.push_str("# Response-time propensity report\n\n");
    out.push_str(&format!(
        "- steps: {} rows ({} students, {} skills)\n- config: `{}`\n- rtprop {}\n\n",
        a.n_steps, a.n_students, a.n_skills, config_hash, a.version
    ));

    out.push_str("## Step response time by session slice\n\n");
    out.push_str("Seconds, median [IQR] of rows with a response time.\n\n");
    out.push_str("| |");
    for i in 0..k {
        out.push_str(&format!(" {} |", slice_header(k, i)));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(k));
    out.push_str("\n| RT |");
    for s in &a.rt_by_slice {
        if s.n == 0 {
            out.push_str(" -- |");
        } else {
            out.push_str(&format!(" {:.1} [{:.1}] |", s.median, s.iqr));
        }
    }
    out.push_str("\n| n |");
    for s in &a.rt_by_slice {
        out.push_str(&format!(" {} |", s.n));
    }
    out.push_str("\n\n");

    out.push_str("## Construct stability across slices\n\n");
    out.push_str("Pairwise-complete Pearson correlations of slice-specific estimates; `--` marks pairs with fewer than 3 joined students.\n\n");
    out.push_str("### RT propensity\n\n");
    render_stability(&mut out, &a.stability_rt);
    out.push_str("\n### Learning rate\n\n");
    render_stability(&mut out, &a.stability_learning);
    out.push('\n');

    out.push_str("## Learning-rate moderation (all slices pooled)\n\n");
    match (&a.moderation, &a.moderation_note) {
        (Some(m), _) => {
            out.push_str(&format!(
                "N = {}, R^2 = {:.3}. Standardized coefficients.\n\n",
                m.n, m.r_squared
            ));
            render_coef_table(&mut out, &m.coefficients, 2);
            out.push_str("\n### Influence screening\n\n");
            out.push_str(&format!(
                "Flagged {} of students (Cook's D > 4/N, leverage > 2p/N, or |studentized residual| > 3).\n\n",
                m.influence.summary
            ));
            match &m.influence.refit {
                Some(refit) => {
                    out.push_str(&format!(
                        "Refit excluding flagged students (N = {}):\n\n",
                        m.influence.refit_n
                    ));
                    render_coef_table(&mut out, refit, 3);
                }
                None => out.push_str("Too few unflagged students for a refit.\n"),
            }
            out.push('\n');
        }
        (None, note) => {
            out.push_str(&format!(
                "Unavailable: {}\n\n",
                note.as_deref().unwrap_or("not computed")
            ));
        }
    }

    out.push_str("## RT propensity and learning rate, by slice\n\n");
    out.push_str("| Slice | r | p | n |\n|---|---|---|---|\n");
    for s in &a.slices {
        match &s.pearson_rt_learning {
            Some(c) => out.push_str(&format!(
                "| {} | {:.2} | {} | {} |\n",
                s.slice,
                c.r,
                format_p(c.p),
                c.n
            )),
            None => out.push_str(&format!("| {} | -- | -- | {} |\n", s.slice, s.params.len())),
        }
    }
    out.push('\n');

    out.push_str("## Slice-specific moderation\n\n");
    out.push_str("| Slice | Effect | Estimate | 95% CI | p | Sig. |\n|---|---|---|---|---|---|\n");
    for row in &a.effects {
        out.push_str(&format!(
            "| {} | {} | {:.3} | [{:.3}, {:.3}] | {} | {} |\n",
            row.slice,
            row.effect,
            row.estimate,
            row.ci_lower,
            row.ci_upper,
            format_p(row.p_raw),
            row.sig
        ));
    }
    out.push_str("\nRaw p values; significance markers use Benjamini-Hochberg adjusted p across slices per effect (*** <.001, ** <.01, * <.05, . <.10).\n");
    let unavailable: Vec<String> = a
        .slices
        .iter()
        .filter(|s| !s.available)
        .map(|s| {
            format!(
                "{} ({})",
                s.slice,
                s.note.as_deref().unwrap_or("unavailable")
            )
        })
        .collect();
    if !unavailable.is_empty() {
        out.push_str(&format!("\nUnavailable slices: {}.\n", unavailable.join(", ")));
    }

    out.push_str(&format!(
        "\n---\nconfig `{}`, rtprop {}\n",
        config_hash, a.version
    ));
    out
}

/// Joined parameter table as CSV (floats keep full precision).
pub fn params_to_csv(params: &[StudentParams]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "student_id",
        "slice",
        "rt_propensity",
        "prior_proficiency",
        "learning_rate",
        "n_obs_rt",
        "n_obs_correct",
    ])?;
    for p in params {
        w.write_record([
            p.student_id.as_str(),
            &p.slice.map(|s| s.to_string()).unwrap_or_default(),
            &p.rt_propensity.to_string(),
            &p.prior_proficiency.to_string(),
            &p.learning_rate.to_string(),
            &p.n_obs_rt.to_string(),
            &p.n_obs_correct.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::data(e.to_string()))
}

/// Long-format stability matrices as CSV. Unavailable cells keep their
/// slice labels with empty statistics.
pub fn stability_to_csv(matrices: &[&StabilityMatrix]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["field", "slice_a", "slice_b", "r", "p", "n"])?;
    for m in matrices {
        let k = m.cells.len();
        for i in 0..k {
            for j in 0..k {
                let (r, p, n) = match &m.cells[i][j] {
                    Some(c) => (c.r.to_string(), c.p.to_string(), c.n.to_string()),
                    None => (String::new(), String::new(), String::new()),
                };
                w.write_record([
                    m.field.as_str(),
                    &Slice((i + 1) as u8).to_string(),
                    &Slice((j + 1) as u8).to_string(),
                    &r,
                    &p,
                    &n,
                ])?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::data(e.to_string()))
}

/// Slice-effect table as CSV.
pub fn effects_to_csv(rows: &[SliceEffectRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "slice",
        "effect",
        "estimate",
        "ci_lower",
        "ci_upper",
        "p_raw",
        "p_adjusted",
        "sig",
    ])?;
    for r in rows {
        w.write_record([
            &r.slice.to_string(),
            &r.effect,
            &r.estimate.to_string(),
            &r.ci_lower.to_string(),
            &r.ci_upper.to_string(),
            &r.p_raw.to_string(),
            &r.p_adjusted.to_string(),
            &r.sig,
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::data(e.to_string()))
}
