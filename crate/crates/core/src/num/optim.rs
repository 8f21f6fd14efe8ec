//! Bounded derivative-free minimization: Nelder-Mead simplex with adaptive
//! coefficients, box projection, restarts, and a coordinate-wise parabolic
//! polish pass for tight final accuracy on smooth objectives.
//!
//! Everything here is deterministic: no randomness, iteration order fixed by
//! the inputs alone.

/// Options for [`nelder_mead`].
#[derive(Debug, Clone)]
pub struct NmOptions {
    /// Initial simplex edge length per coordinate.
    pub init_step: f64,
    /// Stop when the simplex function spread is below `ftol * (1 + |f_best|)`.
    pub ftol: f64,
    /// Stop when the simplex coordinate spread is below `xtol`.
    pub xtol: f64,
    /// Hard cap on objective evaluations across restarts.
    pub max_evals: usize,
    /// Number of shrunken-simplex restarts after first convergence.
    pub restarts: usize,
}

impl Default for NmOptions {
    fn default() -> Self {
        NmOptions {
            init_step: 1.0,
            ftol: 1e-12,
            xtol: 1e-9,
            max_evals: 2000,
            restarts: 2,
        }
    }
}

/// Result of a simplex run.
#[derive(Debug, Clone)]
pub struct NmResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evals: usize,
    pub converged: bool,
    /// Best objective value after each strict improvement; non-increasing.
    pub trace: Vec<f64>,
}

fn clamp_to_box(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// Minimizes `f` over the box `[lo, hi]` starting from `x0`.
///
/// Candidate points are projected onto the box, so the returned minimizer is
/// always feasible. `f` must return a finite value or `f64::INFINITY` for
/// points it cannot evaluate.
pub fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: &NmOptions,
) -> NmResult {
    let n = x0.len();
    assert!(n > 0 && lo.len() == n && hi.len() == n);
    // Adaptive coefficients (scale with dimension); the classic values for n <= 2.
    let nf = n as f64;
    let alpha = 1.0;
    let beta = 1.0 + 2.0 / nf;
    let gamma = 0.75 - 1.0 / (2.0 * nf);
    let delta = 1.0 - 1.0 / nf;

    let mut evals = 0usize;
    let mut trace: Vec<f64> = Vec::new();
    let mut best_seen = f64::INFINITY;

    let mut eval = |x: &[f64], evals: &mut usize, trace: &mut Vec<f64>, best: &mut f64| -> f64 {
        *evals += 1;
        let v = f(x);
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if v < *best {
            *best = v;
            trace.push(v);
        }
        v
    };

    let mut start = x0.to_vec();
    clamp_to_box(&mut start, lo, hi);
    let mut step = opts.init_step;
    let mut converged = false;

    let mut best_x = start.clone();
    let mut best_f = eval(&best_x, &mut evals, &mut trace, &mut best_seen);

    for round in 0..=opts.restarts {
        // Build simplex around the current best point.
        let mut xs: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        let mut fs: Vec<f64> = Vec::with_capacity(n + 1);
        xs.push(best_x.clone());
        fs.push(best_f);
        for i in 0..n {
            let mut v = best_x.clone();
            let span = hi[i] - lo[i];
            let h = step.min(span / 4.0).max(span.min(1e-8) / 16.0);
            // Step inward when at the upper edge of the box.
            if v[i] + h <= hi[i] {
                v[i] += h;
            } else {
                v[i] -= h;
            }
            clamp_to_box(&mut v, lo, hi);
            let fv = eval(&v, &mut evals, &mut trace, &mut best_seen);
            xs.push(v);
            fs.push(fv);
        }

        loop {
            // Order vertices best..worst.
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| fs[a].total_cmp(&fs[b]));
            let xs2: Vec<Vec<f64>> = order.iter().map(|&i| xs[i].clone()).collect();
            let fs2: Vec<f64> = order.iter().map(|&i| fs[i]).collect();
            xs = xs2;
            fs = fs2;

            let fspread = fs[n] - fs[0];
            let xspread = (0..n)
                .map(|j| {
                    let mn = xs.iter().map(|v| v[j]).fold(f64::INFINITY, f64::min);
                    let mx = xs.iter().map(|v| v[j]).fold(f64::NEG_INFINITY, f64::max);
                    mx - mn
                })
                .fold(0.0f64, f64::max);
            if fspread <= opts.ftol * (1.0 + fs[0].abs()) && xspread <= opts.xtol {
                converged = true;
                break;
            }
            if evals >= opts.max_evals {
                break;
            }

            // Centroid of all but worst.
            let mut c = vec![0.0; n];
            for v in xs.iter().take(n) {
                for j in 0..n {
                    c[j] += v[j];
                }
            }
            for cj in c.iter_mut() {
                *cj /= nf;
            }

            let project = |t: f64| -> Vec<f64> {
                let mut v: Vec<f64> = (0..n).map(|j| c[j] + t * (c[j] - xs[n][j])).collect();
                clamp_to_box(&mut v, lo, hi);
                v
            };

            let xr = project(alpha);
            let fr = eval(&xr, &mut evals, &mut trace, &mut best_seen);
            if fr < fs[0] {
                let xe = project(alpha * beta);
                let fe = eval(&xe, &mut evals, &mut trace, &mut best_seen);
                if fe < fr {
                    xs[n] = xe;
                    fs[n] = fe;
                } else {
                    xs[n] = xr;
                    fs[n] = fr;
                }
            } else if fr < fs[n - 1] {
                xs[n] = xr;
                fs[n] = fr;
            } else {
                // Contraction: outside if the reflection helped over the worst.
                let (xc, fc) = if fr < fs[n] {
                    let xc = project(alpha * gamma);
                    let fc = eval(&xc, &mut evals, &mut trace, &mut best_seen);
                    (xc, fc)
                } else {
                    let xc = project(-gamma);
                    let fc = eval(&xc, &mut evals, &mut trace, &mut best_seen);
                    (xc, fc)
                };
                if fc < fs[n].min(fr) {
                    xs[n] = xc;
                    fs[n] = fc;
                } else {
                    // Shrink toward the best vertex.
                    for i in 1..=n {
                        for j in 0..n {
                            xs[i][j] = xs[0][j] + delta * (xs[i][j] - xs[0][j]);
                        }
                        clamp_to_box(&mut xs[i], lo, hi);
                        fs[i] = eval(&xs[i], &mut evals, &mut trace, &mut best_seen);
                    }
                }
            }
        }

        if fs[0] < best_f {
            best_f = fs[0];
            best_x = xs[0].clone();
        }
        if evals >= opts.max_evals {
            break;
        }
        // Restart with a tighter simplex around the incumbent.
        step = (step * 0.05).max(opts.xtol * 100.0);
        let _ = round;
    }

    NmResult {
        x: best_x,
        fx: best_f,
        evals,
        converged,
        trace,
    }
}

/// Coordinate-wise parabolic refinement around `x`.
///
/// For each coordinate, fits a parabola through `f(x - h)`, `f(x)`, `f(x + h)`
/// and jumps to its vertex when that improves the objective; `h` shrinks each
/// cycle. Cheap and very effective once a simplex has localized the minimum
/// of a smooth objective.
pub fn polish_parabolic(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &mut Vec<f64>,
    fx: &mut f64,
    lo: &[f64],
    hi: &[f64],
    h0: f64,
    cycles: usize,
) -> usize {
    let n = x.len();
    let mut evals = 0usize;
    let mut h = h0;
    for _ in 0..cycles {
        for j in 0..n {
            let hj = h.min((hi[j] - lo[j]) / 8.0);
            if hj <= 0.0 {
                continue;
            }
            let mut xm = x.clone();
            xm[j] = (x[j] - hj).max(lo[j]);
            let mut xp = x.clone();
            xp[j] = (x[j] + hj).min(hi[j]);
            if xm[j] == xp[j] {
                continue;
            }
            let fm = f(&xm);
            let fp = f(&xp);
            evals += 2;
            // Vertex of the interpolating parabola through (xm, x, xp).
            let a = xm[j];
            let b = x[j];
            let c = xp[j];
            let d1 = (fm - *fx) / (a - b);
            let d2 = (fp - *fx) / (c - b);
            let curv = (d2 - d1) / (c - a);
            let mut cand = if curv > 0.0 {
                0.5 * (a + b) + 0.5 * d1 / curv
            } else if fm < fp {
                a - (b - a)
            } else {
                c + (c - b)
            };
            cand = cand.clamp(lo[j], hi[j]);
            let mut xc = x.clone();
            xc[j] = cand;
            let fc = f(&xc);
            evals += 1;
            let (bx, bf) = [(&xm, fm), (&xp, fp), (&xc, fc)]
                .into_iter()
                .min_by(|p, q| p.1.total_cmp(&q.1))
                .unwrap();
            if bf < *fx {
                *x = bx.clone();
                *fx = bf;
            }
        }
        h *= 0.03;
    }
    evals
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl() {
        let mut f = |x: &[f64]| (x[0] - 1.5).powi(2) + 3.0 * (x[1] + 0.5).powi(2);
        let r = nelder_mead(
            &mut f,
            &[0.0, 0.0],
            &[-10.0, -10.0],
            &[10.0, 10.0],
            &NmOptions::default(),
        );
        assert!(r.converged);
        assert!((r.x[0] - 1.5).abs() < 1e-6, "{:?}", r.x);
        assert!((r.x[1] + 0.5).abs() < 1e-6, "{:?}", r.x);
    }

    #[test]
    fn respects_bounds() {
        let mut f = |x: &[f64]| (x[0] + 5.0).powi(2);
        let r = nelder_mead(
            &mut f,
            &[1.0],
            &[-2.0],
            &[2.0],
            &NmOptions::default(),
        );
        assert!((r.x[0] + 2.0).abs() < 1e-7, "{:?}", r.x);
    }

    #[test]
    fn trace_non_increasing() {
        let mut f = |x: &[f64]| x[0].powi(4) + (x[1] - 2.0).powi(2) * (1.0 + x[0].abs());
        let r = nelder_mead(
            &mut f,
            &[3.0, -3.0],
            &[-10.0, -10.0],
            &[10.0, 10.0],
            &NmOptions::default(),
        );
        for w in r.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn polish_tightens_rosenbrock_minimum() {
        let mut f = |x: &[f64]| {
            100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2)
        };
        let r = nelder_mead(
            &mut f,
            &[-1.2, 1.0],
            &[-5.0, -5.0],
            &[5.0, 5.0],
            &NmOptions {
                max_evals: 4000,
                restarts: 3,
                ..NmOptions::default()
            },
        );
        let mut x = r.x.clone();
        let mut fx = r.fx;
        polish_parabolic(&mut f, &mut x, &mut fx, &[-5.0, -5.0], &[5.0, 5.0], 1e-3, 3);
        assert!((x[0] - 1.0).abs() < 1e-5, "{x:?}");
        assert!((x[1] - 1.0).abs() < 1e-5, "{x:?}");
    }
}
