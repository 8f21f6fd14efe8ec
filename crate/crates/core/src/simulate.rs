//! Synthetic transaction logs from the generative counterparts of the two
//! models, with known latent traits for parameter-recovery tests.
//!
//! Generation is a single deterministic draw stream per seed: skill traits,
//! then student traits, then per-student practice (skill subset, session
//! timelines, correctness). Response times are sampled on the log scale and
//! rounded to whole milliseconds for timestamping; the internal step table
//! stores the rounded values, so ingesting the emitted transactions
//! reproduces that table exactly.
//!
//! Per step, with `i` the student, `s` the skill, and `opp` the 1-based
//! practice opportunity:
//!
//! ```text
//!   rt_log ~ N(grand_mean + rt_i + rt_s, var_resid)
//!   logit P(correct) = b0 + b_opp * opp + prof_i + slope_i * opp
//!                      + diff_s + slope_s * opp
//! ```
//!
//! When moderation coefficients are set, student slopes are constructed
//! from sample z-scores of the response-time and proficiency traits,
//!
//! ```text
//!   slope_i = scale * (c0 + c_rt z(rt_i) + c_prof z(prof_i)
//!                      + c_int z(rt_i) z(prof_i) + noise),
//! ```
//!
//! so the interaction survives the standardization the moderation analysis
//! applies. The construction can target specific slices: targeted slices
//! get the interaction term, the others get the same construction with it
//! zeroed, which localizes the effect the way the slice analyses probe for.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::special::{sigmoid, standardize};
use crate::types::{AttemptRecord, Outcome, SessionSpan, Slice, StepRecord, TimestampMs};

/// Student-slope construction for the moderation analyses. Defaults follow
/// the reference estimates the artifact is tested against: a weak negative
/// pacing main effect, a positive proficiency main effect, and a 0.11
/// interaction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModerationCoeffs {
    pub b0: f64,
    pub b_rt: f64,
    pub b_prof: f64,
    pub b_interaction: f64,
    /// Residual SD of the construct; when absent, chosen so the construct's
    /// population variance is 1 and coefficients survive standardization.
    pub noise_sd: Option<f64>,
    /// Multiplies the unit-variance construct to give logit-scale slopes.
    pub slope_scale: f64,
    /// When set, only these slices receive the interaction term; each slice
    /// gets its own slope draw.
    pub slices: Option<Vec<u8>>,
}

impl Default for ModerationCoeffs {
    fn default() -> Self {
        ModerationCoeffs {
            b0: 0.0,
            b_rt: -0.02,
            b_prof: 0.10,
            b_interaction: 0.11,
            noise_sd: None,
            slope_scale: 0.1,
            slices: None,
        }
    }
}

impl ModerationCoeffs {
    /// Residual SD, defaulted so the construct has unit population variance
    /// (independent standard-normal z-scores assumed).
    pub fn resolved_noise_sd(&self) -> Result<f64> {
        if let Some(sd) = self.noise_sd {
            if sd < 0.0 {
                return Err(Error::config("moderation noise_sd must be >= 0"));
            }
            return Ok(sd);
        }
        let used =
            self.b_rt * self.b_rt + self.b_prof * self.b_prof + self.b_interaction * self.b_interaction;
        if used >= 1.0 {
            return Err(Error::config(
                "moderation coefficients leave no residual variance; set noise_sd explicitly",
            ));
        }
        Ok((1.0 - used).sqrt())
    }
}

/// Generator configuration. Defaults reproduce the reference corpus scale:
/// 794 students, 32 skills, 87.61 mean observations over 7.44 mean unique
/// skills per student, median response time near exp(3) ~ 20 s.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_students: usize,
    pub n_skills: usize,
    pub mean_obs_per_student: f64,
    pub sd_obs_per_student: f64,
    pub mean_skills_per_student: f64,
    pub sd_skills_per_student: f64,
    /// Skew of skill practice frequency (0 = uniform).
    pub zipf_exponent: f64,
    pub steps_per_session: usize,
    pub steps_per_problem: usize,
    /// Cap on inter-step gaps so sampled tails cannot split a session.
    pub max_gap_seconds: f64,
    /// Log-seconds.
    pub rt_grand_mean: f64,
    pub rt_var_student: f64,
    pub rt_var_skill: f64,
    pub rt_var_resid: f64,
    pub iafm_beta0: f64,
    pub iafm_beta_opp: f64,
    /// Intercept/slope covariance of student effects (row-major 2x2).
    pub cov_student: [[f64; 2]; 2],
    pub cov_skill: [[f64; 2]; 2],
    pub moderation: Option<ModerationCoeffs>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_students: 794,
            n_skills: 32,
            mean_obs_per_student: 87.61,
            sd_obs_per_student: 25.0,
            mean_skills_per_student: 7.44,
            sd_skills_per_student: 2.28,
            zipf_exponent: 1.0,
            steps_per_session: 30,
            steps_per_problem: 4,
            max_gap_seconds: 600.0,
            rt_grand_mean: 3.0,
            rt_var_student: 0.25,
            rt_var_skill: 0.15,
            rt_var_resid: 1.0,
            iafm_beta0: 0.5,
            iafm_beta_opp: 0.10,
            cov_student: [[0.81, -0.0135], [-0.0135, 0.01]],
            cov_skill: [[0.36, 0.0], [0.0, 0.0025]],
            moderation: None,
            seed: 20230109,
        }
    }
}

/// Lower Cholesky factor of a symmetric PSD 2x2, tolerating zero variances.
fn chol_psd2(m: &[[f64; 2]; 2], what: &str) -> Result<[[f64; 2]; 2]> {
    if (m[0][1] - m[1][0]).abs() > 1e-12 {
        return Err(Error::config(format!("{what} is not symmetric")));
    }
    let (a, b, c) = (m[0][0], m[0][1], m[1][1]);
    if a < 0.0 || c < 0.0 || a * c - b * b < -1e-12 {
        return Err(Error::config(format!("{what} is not PSD")));
    }
    if a == 0.0 {
        if b != 0.0 {
            return Err(Error::config(format!("{what} is not PSD")));
        }
        return Ok([[0.0, 0.0], [0.0, c.sqrt()]]);
    }
    let l00 = a.sqrt();
    let l10 = b / l00;
    Ok([[l00, 0.0], [l10, (c - l10 * l10).max(0.0).sqrt()]])
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_students == 0 || self.n_skills == 0 {
            return Err(Error::config("n_students and n_skills must be >= 1"));
        }
        if self.mean_obs_per_student <= 0.0 {
            return Err(Error::config("mean_obs_per_student must be positive"));
        }
        for (v, name) in [
            (self.rt_var_student, "rt_var_student"),
            (self.rt_var_skill, "rt_var_skill"),
            (self.rt_var_resid, "rt_var_resid"),
        ] {
            if v < 0.0 {
                return Err(Error::config(format!("{name} must be >= 0")));
            }
        }
        if self.steps_per_session == 0 || self.steps_per_problem == 0 {
            return Err(Error::config("steps per session/problem must be >= 1"));
        }
        if self.max_gap_seconds <= 0.0 {
            return Err(Error::config("max_gap_seconds must be positive"));
        }
        chol_psd2(&self.cov_student, "cov_student")?;
        chol_psd2(&self.cov_skill, "cov_skill")?;
        if let Some(m) = &self.moderation {
            m.resolved_noise_sd()?;
            if let Some(slices) = &m.slices {
                if slices.is_empty() || slices.iter().any(|&q| !(1..=4).contains(&q)) {
                    return Err(Error::config("moderation slices must be within Q1..Q4"));
                }
            }
        }
        Ok(())
    }
}

/// Latent traits of one student.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentTruth {
    pub rt_intercept: f64,
    pub iafm_intercept: f64,
    /// Slope used everywhere (slice-targeted runs store the slice mean).
    pub iafm_slope: f64,
    /// Per-slice slopes when the moderation construction targets slices.
    pub iafm_slope_by_slice: Option<Vec<f64>>,
}

/// Latent traits of one skill.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkillTruth {
    pub rt_intercept: f64,
    pub iafm_intercept: f64,
    pub iafm_slope: f64,
}

/// Everything the generator knows that a fitted model should recover.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub students: BTreeMap<String, StudentTruth>,
    pub skills: BTreeMap<String, SkillTruth>,
    /// Session boundaries exactly as ingestion will derive them.
    pub sessions: Vec<SessionSpan>,
}

/// Generated population: raw attempts, the internal step table (canonical
/// order), and the latent traits.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub attempts: Vec<AttemptRecord>,
    pub steps: Vec<StepRecord>,
    pub truth: GroundTruth,
}

fn norm(rng: &mut ChaCha12Rng, mean: f64, sd: f64) -> f64 {
    if sd <= 0.0 {
        return mean;
    }
    Normal::new(mean, sd).unwrap().sample(rng)
}

/// Correlated (intercept, slope) pair from a Cholesky factor.
fn mvn2(rng: &mut ChaCha12Rng, l: &[[f64; 2]; 2]) -> (f64, f64) {
    let z0 = norm(rng, 0.0, 1.0);
    let z1 = norm(rng, 0.0, 1.0);
    (l[0][0] * z0, l[1][0] * z0 + l[1][1] * z1)
}

/// Weighted sample without replacement; weights follow `1/(k+1)^zipf`.
fn draw_skill_subset(rng: &mut ChaCha12Rng, n_skills: usize, count: usize, zipf: f64) -> Vec<usize> {
    let mut weights: Vec<f64> = (0..n_skills)
        .map(|k| 1.0 / ((k + 1) as f64).powf(zipf))
        .collect();
    let mut subset = Vec::with_capacity(count);
    for _ in 0..count.min(n_skills) {
        let total: f64 = weights.iter().sum();
        let mut x = rng.gen::<f64>() * total;
        let mut pick = 0;
        for (k, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            x -= w;
            pick = k;
            if x <= 0.0 {
                break;
            }
        }
        subset.push(pick);
        weights[pick] = 0.0;
    }
    subset.sort_unstable();
    subset
}

const SESSION_SPACING_MS: i64 = 86_400_000;

/// Generates a synthetic population. Identical configs (seed included)
/// produce identical output.
pub fn generate_population(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let l_student = chol_psd2(&cfg.cov_student, "cov_student")?;
    let l_skill = chol_psd2(&cfg.cov_skill, "cov_skill")?;
    let rt_sd_student = cfg.rt_var_student.sqrt();
    let rt_sd_skill = cfg.rt_var_skill.sqrt();
    let rt_sd_resid = cfg.rt_var_resid.sqrt();
    let base_time = TimestampMs::parse("2023-01-09T09:00:00.000")?;

    let skill_id = |k: usize| format!("K{:02}", k + 1);
    let student_id = |i: usize| format!("S{:04}", i + 1);

    // Skill traits.
    let mut skills = Vec::with_capacity(cfg.n_skills);
    for _ in 0..cfg.n_skills {
        let rt = norm(&mut rng, 0.0, rt_sd_skill);
        let (int, slope) = mvn2(&mut rng, &l_skill);
        skills.push(SkillTruth {
            rt_intercept: rt,
            iafm_intercept: int,
            iafm_slope: slope,
        });
    }

    // Student traits: pacing and proficiency first, slopes after (the
    // moderation construction needs the whole sample for z-scores).
    let mut rt_int = Vec::with_capacity(cfg.n_students);
    let mut prof = Vec::with_capacity(cfg.n_students);
    let mut slope_mvn = Vec::with_capacity(cfg.n_students);
    for _ in 0..cfg.n_students {
        rt_int.push(norm(&mut rng, 0.0, rt_sd_student));
        let (int, slope) = mvn2(&mut rng, &l_student);
        prof.push(int);
        slope_mvn.push(slope);
    }
    // slope_of[i] = (global slope, optional per-slice slopes).
    let slope_of: Vec<(f64, Option<Vec<f64>>)> = match &cfg.moderation {
        None => slope_mvn.iter().map(|&s| (s, None)).collect(),
        Some(m) => {
            if cfg.n_students < 2 {
                return Err(Error::config("moderation construction needs >= 2 students"));
            }
            let noise_sd = m.resolved_noise_sd()?;
            let z_rt = standardize(&rt_int)?;
            let z_prof = standardize(&prof)?;
            (0..cfg.n_students)
                .map(|i| {
                    let base = m.b0 + m.b_rt * z_rt[i] + m.b_prof * z_prof[i];
                    let inter = m.b_interaction * z_rt[i] * z_prof[i];
                    match &m.slices {
                        None => {
                            let s = m.slope_scale * (base + inter + norm(&mut rng, 0.0, noise_sd));
                            (s, None)
                        }
                        Some(targets) => {
                            let per: Vec<f64> = (1..=4u8)
                                .map(|q| {
                                    let hit = if targets.contains(&q) { inter } else { 0.0 };
                                    m.slope_scale * (base + hit + norm(&mut rng, 0.0, noise_sd))
                                })
                                .collect();
                            let mean = per.iter().sum::<f64>() / per.len() as f64;
                            (mean, Some(per))
                        }
                    }
                })
                .collect()
        }
    };

    let mut attempts: Vec<AttemptRecord> = Vec::new();
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut sessions: Vec<SessionSpan> = Vec::new();
    let max_gap_ms = (cfg.max_gap_seconds * 1000.0).round() as i64;

    for i in 0..cfg.n_students {
        let sid = student_id(i);
        let n_sk = (norm(&mut rng, cfg.mean_skills_per_student, cfg.sd_skills_per_student)
            .round() as i64)
            .clamp(1, cfg.n_skills as i64) as usize;
        let subset = draw_skill_subset(&mut rng, cfg.n_skills, n_sk, cfg.zipf_exponent);
        let sub_weights: Vec<f64> = subset
            .iter()
            .map(|&k| 1.0 / ((k + 1) as f64).powf(cfg.zipf_exponent))
            .collect();
        let sub_total: f64 = sub_weights.iter().sum();
        let n_obs = (norm(&mut rng, cfg.mean_obs_per_student, cfg.sd_obs_per_student).round()
            as i64)
            .clamp(2, (cfg.mean_obs_per_student * 4.0).ceil() as i64)
            as usize;
        let n_sessions = ((n_obs as f64 / cfg.steps_per_session as f64).round() as usize).max(1);

        let mut opp_count: BTreeMap<usize, u32> = BTreeMap::new();
        let mut step_counter = 0usize;
        let mut remaining = n_obs;
        for j in 0..n_sessions {
            // Spread observations evenly; earlier sessions take remainders.
            let size = remaining / (n_sessions - j)
                + usize::from(remaining % (n_sessions - j) != 0);
            remaining -= size;
            let session_id = format!("sess{}", j + 1);
            let start_ms =
                base_time.0 + j as i64 * SESSION_SPACING_MS + i as i64 * 60_000;

            // Timeline first: skills, opportunities, and first-attempt times.
            struct Planned {
                skill: usize,
                opp: u32,
                t: TimestampMs,
                rt_ms: Option<i64>,
                problem_id: String,
                step_id: String,
            }
            let mut planned: Vec<Planned> = Vec::with_capacity(size);
            let mut t = start_ms;
            for k in 0..size {
                let mut x = rng.gen::<f64>() * sub_total;
                let mut pick = 0;
                for (a, &w) in sub_weights.iter().enumerate() {
                    x -= w;
                    pick = a;
                    if x <= 0.0 {
                        break;
                    }
                }
                let skill = subset[pick];
                let opp = {
                    let c = opp_count.entry(skill).or_insert(0);
                    *c += 1;
                    *c
                };
                let rt_ms = if k == 0 {
                    None
                } else {
                    let rt_log = norm(
                        &mut rng,
                        cfg.rt_grand_mean + rt_int[i] + skills[skill].rt_intercept,
                        rt_sd_resid,
                    );
                    let gap = ((rt_log.exp() * 1000.0).round() as i64).clamp(1, max_gap_ms);
                    t += gap;
                    Some(gap)
                };
                let problem_id = format!("P{}", step_counter / cfg.steps_per_problem + 1);
                let step_id = format!("s{}", step_counter % cfg.steps_per_problem + 1);
                step_counter += 1;
                planned.push(Planned {
                    skill,
                    opp,
                    t: TimestampMs(t),
                    rt_ms,
                    problem_id,
                    step_id,
                });
            }

            let start = planned[0].t;
            let last = planned[planned.len() - 1].t;
            let degenerate = planned.len() == 1;
            let end = if degenerate { TimestampMs(start.0 + 1000) } else { last };
            let dur = end.0 - start.0;

            // Correctness needs the slice, which needs the span.
            for (k, p) in planned.iter().enumerate() {
                let u = (p.t.0 - start.0) as f64 / dur as f64;
                let slice = if u >= 1.0 {
                    Slice(4)
                } else {
                    Slice((u * 4.0).floor() as u8 + 1)
                };
                let slope_i = match &slope_of[i].1 {
                    Some(per) => per[slice.0 as usize - 1],
                    None => slope_of[i].0,
                };
                let opp = p.opp as f64;
                let eta = cfg.iafm_beta0
                    + cfg.iafm_beta_opp * opp
                    + prof[i]
                    + slope_i * opp
                    + skills[p.skill].iafm_intercept
                    + skills[p.skill].iafm_slope * opp;
                let correct = rng.gen::<f64>() < sigmoid(eta);

                attempts.push(AttemptRecord {
                    student_id: sid.clone(),
                    session_id: Some(session_id.clone()),
                    timestamp: p.t,
                    problem_id: p.problem_id.clone(),
                    step_id: p.step_id.clone(),
                    attempt_index: 1,
                    outcome: if correct { Outcome::Correct } else { Outcome::Incorrect },
                    kc_ids: vec![skill_id(p.skill)],
                    line_no: 0,
                });
                // A retry after a miss, placed midway to the next step so it
                // never moves the session boundary.
                if !correct && k + 1 < planned.len() {
                    let mid = (planned[k + 1].t.0 - p.t.0) / 2;
                    if mid > 0 {
                        attempts.push(AttemptRecord {
                            student_id: sid.clone(),
                            session_id: Some(session_id.clone()),
                            timestamp: TimestampMs(p.t.0 + mid),
                            problem_id: p.problem_id.clone(),
                            step_id: p.step_id.clone(),
                            attempt_index: 2,
                            outcome: Outcome::Correct,
                            kc_ids: vec![skill_id(p.skill)],
                            line_no: 0,
                        });
                    }
                }
                let rt_seconds = p.rt_ms.map(|ms| ms as f64 / 1000.0);
                steps.push(StepRecord {
                    student_id: sid.clone(),
                    session_id: session_id.clone(),
                    kc_id: skill_id(p.skill),
                    problem_id: p.problem_id.clone(),
                    step_id: p.step_id.clone(),
                    first_attempt_correct: correct,
                    first_attempt_time: p.t,
                    rt_seconds,
                    rt_log: rt_seconds.map(f64::ln),
                    opportunity: p.opp,
                    slice,
                });
            }

            sessions.push(SessionSpan {
                student_id: sid.clone(),
                session_id,
                start,
                end,
                degenerate,
            });
        }
    }

    crate::types::sort_steps_canonical(&mut steps);
    attempts.sort_by(|a, b| {
        (&a.student_id, a.timestamp, &a.problem_id, &a.step_id, a.attempt_index).cmp(&(
            &b.student_id,
            b.timestamp,
            &b.problem_id,
            &b.step_id,
            b.attempt_index,
        ))
    });

    let truth = GroundTruth {
        students: (0..cfg.n_students)
            .map(|i| {
                (
                    student_id(i),
                    StudentTruth {
                        rt_intercept: rt_int[i],
                        iafm_intercept: prof[i],
                        iafm_slope: slope_of[i].0,
                        iafm_slope_by_slice: slope_of[i].1.clone(),
                    },
                )
            })
            .collect(),
        skills: (0..cfg.n_skills)
            .map(|k| (skill_id(k), skills[k].clone()))
            .collect(),
        sessions,
    };

    Ok(SimOutput {
        attempts,
        steps,
        truth,
    })
}

/// Writes attempts in the transaction CSV dialect ingestion reads (comma
/// delimited, ISO timestamps). Leading `comments` become `#` lines.
pub fn emit_transactions<W: Write>(
    mut out: W,
    attempts: &[AttemptRecord],
    comments: &[String],
) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "student_id",
        "session_id",
        "time",
        "problem_id",
        "step_id",
        "attempt",
        "outcome",
        "kc",
    ])?;
    for a in attempts {
        w.write_record([
            a.student_id.as_str(),
            a.session_id.as_deref().unwrap_or(""),
            &a.timestamp.to_iso(),
            a.problem_id.as_str(),
            a.step_id.as_str(),
            &a.attempt_index.to_string(),
            a.outcome.as_str(),
            &a.kc_ids.join("~~"),
        ])?;
    }
    w.flush()?;
    Ok(())
}
