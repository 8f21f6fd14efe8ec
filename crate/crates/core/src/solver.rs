//! Penalized least-squares solver for models with one or two crossed
//! random-effect terms and an optional small dense fixed-effects block.
//!
//! With `U` the model matrix of the spherical random effects (each term's
//! per-row covariates pre-scaled by that term's relative covariance factor
//! `Lambda`), `W` a diagonal weight matrix, and `X` the fixed-effects
//! columns, the system solved here is
//!
//! ```text
//!   K = [ U'WU + I   U'WX ]        K [u; beta] = [U'Wr; X'Wr]
//!       [ X'WU       X'WX ]
//! ```
//!
//! Levels of one term never couple with each other, so the matrix is
//! factored by eliminating that term level by level (1x1 or 2x2 blocks) and
//! taking one dense Cholesky of the remaining tail (second term plus fixed
//! columns). Eliminating the term with more levels makes this ordering
//! fill-free: the tail stays small (levels of the second factor times its
//! effect count, plus at most two fixed columns).
//!
//! The factorization exposes the two log-determinants profiled likelihoods
//! need: `log|U'WU + I|` and `log|X'V*X|` with `V* = (W^-1 + UU')^-1`, read
//! off the leading and trailing diagonal of the Cholesky factor.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Maximum effects per level of one term (intercept, or intercept + slope).
pub const MAX_Q: usize = 2;

/// Packed lower-triangular 2x2 relative covariance factor: `(l00, l10, l11)`.
/// Terms with `q = 1` use only `l00`.
pub type Tri = [f64; 3];

/// Per-row scaled covariates `Lambda' z`.
#[inline]
fn scale_z(lam: &Tri, z: &[f64; MAX_Q], q: usize) -> [f64; MAX_Q] {
    if q == 1 {
        [lam[0] * z[0], 0.0]
    } else {
        [lam[0] * z[0] + lam[1] * z[1], lam[2] * z[1]]
    }
}

/// Packed symmetric 2x2: `(a00, a10, a11)`.
type Sym2 = [f64; 3];

/// Cholesky of a packed symmetric block (`q` = 1 or 2).
#[inline]
fn chol2(a: &Sym2, q: usize) -> Option<Sym2> {
    if q == 1 {
        if a[0] <= 0.0 {
            return None;
        }
        Some([a[0].sqrt(), 0.0, 0.0])
    } else {
        if a[0] <= 0.0 {
            return None;
        }
        let l00 = a[0].sqrt();
        let l10 = a[1] / l00;
        let s = a[2] - l10 * l10;
        if s <= 0.0 {
            return None;
        }
        Some([l00, l10, s.sqrt()])
    }
}

/// Solves `L y = b` in place for a packed lower-triangular block.
#[inline]
fn forward_l(l: &Sym2, q: usize, b: &mut [f64; MAX_Q]) {
    b[0] /= l[0];
    if q == 2 {
        b[1] = (b[1] - l[1] * b[0]) / l[2];
    }
}

/// Solves `L' x = y` in place for a packed lower-triangular block.
#[inline]
fn backward_lt(l: &Sym2, q: usize, y: &mut [f64; MAX_Q]) {
    if q == 2 {
        y[1] /= l[2];
        y[0] = (y[0] - l[1] * y[1]) / l[0];
    } else {
        y[0] /= l[0];
    }
}

/// One random-effect term: a grouping factor with `q` correlated effects per
/// level and per-row covariates `z` (for intercept-only terms `z = [1, 0]`,
/// for intercept + slope terms `z = [1, slope covariate]`).
#[derive(Debug, Clone)]
pub struct RandomTerm {
    pub n_levels: usize,
    pub q: usize,
    /// Level index per row, in `0..n_levels`.
    pub level: Vec<u32>,
    /// Covariates per row; entries past `q` are ignored.
    pub z: Vec<[f64; MAX_Q]>,
}

/// Full design for one model: fixed columns plus one or two random terms.
#[derive(Debug, Clone)]
pub struct Design {
    pub n: usize,
    /// Fixed-effect column count, `0..=MAX_Q`. When 0, `x` may be empty.
    pub p: usize,
    pub x: Vec<[f64; MAX_Q]>,
    pub terms: Vec<RandomTerm>,
}

impl Design {
    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::data("design has no rows"));
        }
        if self.p > MAX_Q {
            return Err(Error::data(format!("too many fixed columns: {}", self.p)));
        }
        if self.p > 0 && self.x.len() != self.n {
            return Err(Error::data("fixed-effect rows do not match design rows"));
        }
        if self.terms.is_empty() || self.terms.len() > 2 {
            return Err(Error::data(format!(
                "expected 1 or 2 random terms, got {}",
                self.terms.len()
            )));
        }
        for (k, t) in self.terms.iter().enumerate() {
            if t.q == 0 || t.q > MAX_Q {
                return Err(Error::data(format!("term {k}: bad effect count {}", t.q)));
            }
            if t.level.len() != self.n || t.z.len() != self.n {
                return Err(Error::data(format!("term {k}: row count mismatch")));
            }
            if t.n_levels == 0 {
                return Err(Error::data(format!("term {k}: no levels")));
            }
            if let Some(bad) = t.level.iter().find(|&&l| l as usize >= t.n_levels) {
                return Err(Error::data(format!("term {k}: level {bad} out of range")));
            }
        }
        Ok(())
    }

    /// Total spherical-effect dimension across terms.
    pub fn effect_dim(&self) -> usize {
        self.terms.iter().map(|t| t.n_levels * t.q).sum()
    }
}

/// Effect-space vector grouped the way callers address it: one block per
/// term (in `Design::terms` order, `n_levels * q` each) plus fixed columns.
#[derive(Debug, Clone)]
pub struct EffectVec {
    pub terms: Vec<Vec<f64>>,
    pub x: Vec<f64>,
}

impl EffectVec {
    pub fn zeros(design: &Design) -> Self {
        EffectVec {
            terms: design
                .terms
                .iter()
                .map(|t| vec![0.0; t.n_levels * t.q])
                .collect(),
            x: vec![0.0; design.p],
        }
    }

    /// Squared norm of the random-effect blocks only.
    pub fn terms_norm_sq(&self) -> f64 {
        self.terms
            .iter()
            .map(|v| v.iter().map(|a| a * a).sum::<f64>())
            .sum()
    }
}

/// Row-grouping structure for the eliminated term; fixed once per design.
#[derive(Debug)]
struct Structure {
    /// Rows sorted by (eliminated level, tail level).
    perm: Vec<u32>,
    /// Range of `perm` per eliminated level; length `ne + 1`.
    row_start: Vec<usize>,
    /// Distinct tail levels co-occurring with each eliminated level.
    cols: Vec<u32>,
    cols_start: Vec<usize>,
    /// Per `perm` position: local column index of the row's tail level.
    slot: Vec<u32>,
    /// Widest per-level profile, in tail-column units.
    max_pw: usize,
}

/// Sparse symmetric factorization of the penalized system for one design.
pub struct CrossedSolver {
    design: Design,
    /// Index of the term eliminated blockwise (the larger one).
    elim: usize,
    /// Index of the term kept in the dense tail, if there are two.
    tail: Option<usize>,
    st: Structure,
}

impl CrossedSolver {
    pub fn new(design: Design) -> Result<Self> {
        design.validate()?;
        let elim = if design.terms.len() == 2
            && design.terms[1].n_levels * design.terms[1].q
                > design.terms[0].n_levels * design.terms[0].q
        {
            1
        } else {
            0
        };
        let tail = if design.terms.len() == 2 { Some(1 - elim) } else { None };

        let te = &design.terms[elim];
        let ne = te.n_levels;
        let mut perm: Vec<u32> = (0..design.n as u32).collect();
        match tail {
            Some(t) => {
                let tl = &design.terms[t].level;
                perm.sort_by_key(|&i| (te.level[i as usize], tl[i as usize], i));
            }
            None => perm.sort_by_key(|&i| (te.level[i as usize], i)),
        }

        let mut row_start = vec![0usize; ne + 1];
        for &i in &perm {
            row_start[te.level[i as usize] as usize + 1] += 1;
        }
        for l in 0..ne {
            row_start[l + 1] += row_start[l];
        }

        let mut cols = Vec::new();
        let mut cols_start = vec![0usize; ne + 1];
        let mut slot = vec![0u32; design.n];
        if let Some(t) = tail {
            let tl = &design.terms[t].level;
            for l in 0..ne {
                let base = cols.len();
                for pos in row_start[l]..row_start[l + 1] {
                    let lv = tl[perm[pos] as usize];
                    if cols.len() == base || *cols.last().unwrap() != lv {
                        cols.push(lv);
                    }
                    slot[pos] = (cols.len() - base - 1) as u32;
                }
                cols_start[l + 1] = cols.len();
            }
        } else {
            // No tail term: every profile is just the fixed columns.
            for l in 0..ne {
                cols_start[l + 1] = 0;
            }
        }

        let qt = tail.map(|t| design.terms[t].q).unwrap_or(0);
        let max_pw = (0..ne)
            .map(|l| (cols_start[l + 1] - cols_start[l]) * qt + design.p)
            .max()
            .unwrap_or(design.p);

        Ok(CrossedSolver {
            design,
            elim,
            tail,
            st: Structure {
                perm,
                row_start,
                cols,
                cols_start,
                slot,
                max_pw,
            },
        })
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    fn lam_for(&self, lambdas: &[Tri], term: usize) -> Tri {
        lambdas[term]
    }

    /// Assembles and factors the penalized system at the given relative
    /// covariance factors and row weights (`None` means unit weights).
    pub fn factorize(&self, lambdas: &[Tri], weights: Option<&[f64]>) -> Result<Factors<'_>> {
        let d = &self.design;
        if lambdas.len() != d.terms.len() {
            return Err(Error::data("lambda count does not match terms"));
        }
        if let Some(w) = weights {
            if w.len() != d.n {
                return Err(Error::data("weight length mismatch"));
            }
        }
        let te = &d.terms[self.elim];
        let (qe, ne) = (te.q, te.n_levels);
        let lam_e = self.lam_for(lambdas, self.elim);
        let (qt, mt, lam_t) = match self.tail {
            Some(t) => (
                d.terms[t].q,
                d.terms[t].q * d.terms[t].n_levels,
                self.lam_for(lambdas, t),
            ),
            None => (0, 0, [0.0; 3]),
        };
        let p = d.p;
        let dim_t = mt + p;

        let mut t_mat = DMatrix::<f64>::zeros(dim_t, dim_t);
        for j in 0..mt {
            t_mat[(j, j)] = 1.0;
        }

        let mut chol_a: Vec<Sym2> = Vec::with_capacity(ne);
        let mut logdet_a = 0.0f64;
        let mut hb_flat: Vec<f64> = Vec::new();
        let mut hb_start: Vec<usize> = Vec::with_capacity(ne + 1);
        hb_start.push(0);
        let mut scratch = vec![0.0f64; qe * self.st.max_pw];

        for l in 0..ne {
            let r0 = self.st.row_start[l];
            let r1 = self.st.row_start[l + 1];
            let k_l = self.st.cols_start[l + 1] - self.st.cols_start[l];
            let pw = k_l * qt + p;

            let mut a: Sym2 = [1.0, 0.0, 1.0];
            let hb = &mut scratch[..qe * pw];
            hb.fill(0.0);

            for pos in r0..r1 {
                let i = self.st.perm[pos] as usize;
                let om = weights.map_or(1.0, |w| w[i]);
                let we = scale_z(&lam_e, &te.z[i], qe);
                a[0] += om * we[0] * we[0];
                if qe == 2 {
                    a[1] += om * we[1] * we[0];
                    a[2] += om * we[1] * we[1];
                }
                if let Some(t) = self.tail {
                    let tt = &d.terms[t];
                    let wt = scale_z(&lam_t, &tt.z[i], qt);
                    let ct = tt.level[i] as usize * qt;
                    for aa in 0..qt {
                        for bb in 0..qt {
                            t_mat[(ct + aa, ct + bb)] += om * wt[aa] * wt[bb];
                        }
                        for bb in 0..p {
                            t_mat[(ct + aa, mt + bb)] += om * wt[aa] * d.x[i][bb];
                            t_mat[(mt + bb, ct + aa)] += om * wt[aa] * d.x[i][bb];
                        }
                    }
                    let base = self.st.slot[pos] as usize * qt;
                    for aa in 0..qe {
                        for bb in 0..qt {
                            hb[aa * pw + base + bb] += om * we[aa] * wt[bb];
                        }
                    }
                }
                for aa in 0..p {
                    for bb in 0..p {
                        t_mat[(mt + aa, mt + bb)] += om * d.x[i][aa] * d.x[i][bb];
                    }
                    for ee in 0..qe {
                        hb[ee * pw + k_l * qt + aa] += om * we[ee] * d.x[i][aa];
                    }
                }
            }

            let lch = chol2(&a, qe)
                .ok_or_else(|| Error::numerical("level block not positive definite"))?;
            logdet_a += 2.0 * lch[0].ln();
            if qe == 2 {
                logdet_a += 2.0 * lch[2].ln();
            }

            // Half-solve the profile block: hb <- L^-1 hb, column by column.
            if qe == 2 {
                for c in 0..pw {
                    let mut col = [hb[c], hb[pw + c]];
                    forward_l(&lch, qe, &mut col);
                    hb[c] = col[0];
                    hb[pw + c] = col[1];
                }
            } else {
                for c in 0..pw {
                    hb[c] /= lch[0];
                }
            }

            // Schur subtraction: T -= hb' hb, scattered through global columns.
            if pw > 0 && dim_t > 0 {
                let gstart = self.st.cols_start[l];
                let gidx = |j: usize| -> usize {
                    if j < k_l * qt {
                        self.st.cols[gstart + j / qt] as usize * qt + j % qt
                    } else {
                        mt + (j - k_l * qt)
                    }
                };
                for j1 in 0..pw {
                    let g1 = gidx(j1);
                    for j2 in 0..=j1 {
                        let g2 = gidx(j2);
                        let mut s = hb[j1] * hb[j2];
                        if qe == 2 {
                            s += hb[pw + j1] * hb[pw + j2];
                        }
                        t_mat[(g1, g2)] -= s;
                        if g1 != g2 {
                            t_mat[(g2, g1)] -= s;
                        }
                    }
                }
            }

            chol_a.push(lch);
            hb_flat.extend_from_slice(&hb[..qe * pw]);
            hb_start.push(hb_flat.len());
        }

        let (chol_t, logdet_t_term, logdet_t_x) = if dim_t > 0 {
            let ch = Cholesky::new(t_mat)
                .ok_or_else(|| Error::numerical("tail system not positive definite"))?;
            let diag = ch.l_dirty();
            let mut ldt = 0.0;
            let mut ldx = 0.0;
            for j in 0..dim_t {
                let v = 2.0 * diag[(j, j)].ln();
                if j < mt {
                    ldt += v;
                } else {
                    ldx += v;
                }
            }
            (Some(ch), ldt, ldx)
        } else {
            (None, 0.0, 0.0)
        };

        Ok(Factors {
            solver: self,
            lambdas: lambdas.to_vec(),
            weights_used: weights.is_some(),
            chol_a,
            hb_flat,
            hb_start,
            chol_t,
            mt,
            logdet_a,
            logdet_t_term,
            logdet_t_x,
        })
    }

    /// Accumulates `[U; X]'W v` into effect space (caller term order).
    pub fn accumulate_effect_rhs(
        &self,
        lambdas: &[Tri],
        values: &[f64],
        weights: Option<&[f64]>,
    ) -> EffectVec {
        let d = &self.design;
        let mut out = EffectVec::zeros(d);
        for i in 0..d.n {
            let om = weights.map_or(1.0, |w| w[i]) * values[i];
            if om == 0.0 {
                continue;
            }
            for (k, t) in d.terms.iter().enumerate() {
                let w = scale_z(&lambdas[k], &t.z[i], t.q);
                let base = t.level[i] as usize * t.q;
                for a in 0..t.q {
                    out.terms[k][base + a] += om * w[a];
                }
            }
            for a in 0..d.p {
                out.x[a] += om * d.x[i][a];
            }
        }
        out
    }

    /// Linear predictor contribution `U u + X beta` per row.
    pub fn eta(&self, lambdas: &[Tri], u: &EffectVec, beta: &[f64]) -> Vec<f64> {
        let d = &self.design;
        let mut eta = vec![0.0f64; d.n];
        for i in 0..d.n {
            let mut v = 0.0;
            for (k, t) in d.terms.iter().enumerate() {
                let w = scale_z(&lambdas[k], &t.z[i], t.q);
                let base = t.level[i] as usize * t.q;
                for a in 0..t.q {
                    v += w[a] * u.terms[k][base + a];
                }
            }
            for a in 0..d.p {
                v += beta[a] * d.x[i][a];
            }
            eta[i] = v;
        }
        eta
    }

    /// Observation count per level of a term.
    pub fn level_counts(&self, term: usize) -> Vec<u32> {
        let t = &self.design.terms[term];
        let mut c = vec![0u32; t.n_levels];
        for &l in &t.level {
            c[l as usize] += 1;
        }
        c
    }
}

/// Factorization produced by [`CrossedSolver::factorize`].
pub struct Factors<'a> {
    solver: &'a CrossedSolver,
    lambdas: Vec<Tri>,
    weights_used: bool,
    chol_a: Vec<Sym2>,
    hb_flat: Vec<f64>,
    hb_start: Vec<usize>,
    chol_t: Option<Cholesky<f64, Dyn>>,
    mt: usize,
    logdet_a: f64,
    logdet_t_term: f64,
    logdet_t_x: f64,
}

impl Factors<'_> {
    /// `log |U'WU + I|`.
    pub fn logdet_h(&self) -> f64 {
        self.logdet_a + self.logdet_t_term
    }

    /// `log |X'WX - X'WU (U'WU + I)^-1 U'WX|`; zero when `p == 0`.
    pub fn logdet_rx(&self) -> f64 {
        self.logdet_t_x
    }

    /// Solves `K [u; beta] = rhs` for an effect-space right-hand side.
    pub fn solve_effect(&self, rhs: &EffectVec) -> EffectVec {
        let s = self.solver;
        let d = &s.design;
        let te = &d.terms[s.elim];
        let (qe, ne) = (te.q, te.n_levels);
        let qt = s.tail.map(|t| d.terms[t].q).unwrap_or(0);
        let p = d.p;
        let dim_t = self.mt + p;

        // Tail right-hand side with forward-eliminated level contributions.
        let mut tail = DVector::<f64>::zeros(dim_t);
        if let Some(t) = s.tail {
            for (j, v) in rhs.terms[t].iter().enumerate() {
                tail[j] = *v;
            }
        }
        for (a, v) in rhs.x.iter().enumerate() {
            tail[self.mt + a] = *v;
        }

        let re = &rhs.terms[s.elim];
        for l in 0..ne {
            let k_l = s.st.cols_start[l + 1] - s.st.cols_start[l];
            let pw = k_l * qt + p;
            if pw == 0 {
                continue;
            }
            let mut y = [re[l * qe], if qe == 2 { re[l * qe + 1] } else { 0.0 }];
            forward_l(&self.chol_a[l], qe, &mut y);
            let hb = &self.hb_flat[self.hb_start[l]..self.hb_start[l + 1]];
            let gstart = s.st.cols_start[l];
            for j in 0..pw {
                let g = if j < k_l * qt {
                    s.st.cols[gstart + j / qt] as usize * qt + j % qt
                } else {
                    self.mt + (j - k_l * qt)
                };
                let mut v = hb[j] * y[0];
                if qe == 2 {
                    v += hb[pw + j] * y[1];
                }
                tail[g] -= v;
            }
        }

        let vt = match &self.chol_t {
            Some(ch) => ch.solve(&tail),
            None => tail,
        };

        // Back-substitution per eliminated level.
        let mut out = EffectVec::zeros(d);
        for l in 0..ne {
            let k_l = s.st.cols_start[l + 1] - s.st.cols_start[l];
            let pw = k_l * qt + p;
            let mut y = [re[l * qe], if qe == 2 { re[l * qe + 1] } else { 0.0 }];
            forward_l(&self.chol_a[l], qe, &mut y);
            if pw > 0 {
                let hb = &self.hb_flat[self.hb_start[l]..self.hb_start[l + 1]];
                let gstart = s.st.cols_start[l];
                for j in 0..pw {
                    let g = if j < k_l * qt {
                        s.st.cols[gstart + j / qt] as usize * qt + j % qt
                    } else {
                        self.mt + (j - k_l * qt)
                    };
                    y[0] -= hb[j] * vt[g];
                    if qe == 2 {
                        y[1] -= hb[pw + j] * vt[g];
                    }
                }
            }
            backward_lt(&self.chol_a[l], qe, &mut y);
            out.terms[s.elim][l * qe] = y[0];
            if qe == 2 {
                out.terms[s.elim][l * qe + 1] = y[1];
            }
        }
        if let Some(t) = s.tail {
            for j in 0..self.mt {
                out.terms[t][j] = vt[j];
            }
        }
        for a in 0..p {
            out.x[a] = vt[self.mt + a];
        }
        out
    }

    /// Solves the penalized weighted least-squares problem for response `r`:
    /// right-hand side `[U; X]'W r`. `weights` must match the factorization.
    pub fn solve_rows(&self, r: &[f64], weights: Option<&[f64]>) -> EffectVec {
        debug_assert_eq!(weights.is_some(), self.weights_used);
        let rhs = self
            .solver
            .accumulate_effect_rhs(&self.lambdas, r, weights);
        self.solve_effect(&rhs)
    }
}
