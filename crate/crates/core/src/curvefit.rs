//! Least-squares fit of a * exp(b * t) + c by Levenberg-Marquardt.
//!
//! Three parameters, dense normal equations, two starting points (decay
//! toward the floor and growth from above) so the sign of b is free.

#[derive(Debug, Clone, Copy)]
pub struct ExpFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub converged: bool,
    pub sse: f64,
}

impl ExpFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.a * clamped_exp(self.b * t) + self.c
    }
}

fn clamped_exp(x: f64) -> f64 {
    x.clamp(-500.0, 500.0).exp()
}

fn sse(ts: &[f64], ys: &[f64], a: f64, b: f64, c: f64) -> f64 {
    ts.iter()
        .zip(ys.iter())
        .map(|(&t, &y)| {
            let r = a * clamped_exp(b * t) + c - y;
            r * r
        })
        .sum()
}

/// Linear regression of ln|y - c| on t gives (a, b) for a fixed asymptote.
fn log_linear_init(ts: &[f64], ys: &[f64], c: f64, sign: f64) -> Option<(f64, f64)> {
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut n = 0.0;
    for (&t, &y) in ts.iter().zip(ys.iter()) {
        let v = sign * (y - c);
        if v <= 0.0 {
            continue;
        }
        let ly = v.ln();
        sx += t;
        sy += ly;
        sxx += t * t;
        sxy += t * ly;
        n += 1.0;
    }
    if n < 2.0 {
        return None;
    }
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return None;
    }
    let b = (n * sxy - sx * sy) / denom;
    let ln_a = (sy - b * sx) / n;
    Some((sign * ln_a.exp(), b))
}

/// Solve a symmetric 3x3 system by Gaussian elimination with pivoting.
fn solve3(m: [[f64; 3]; 3], rhs: [f64; 3]) -> Option<[f64; 3]> {
    let mut a = [
        [m[0][0], m[0][1], m[0][2], rhs[0]],
        [m[1][0], m[1][1], m[1][2], rhs[1]],
        [m[2][0], m[2][1], m[2][2], rhs[2]],
    ];
    for col in 0..3 {
        let mut piv = col;
        for r in col + 1..3 {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        for r in 0..3 {
            if r == col {
                continue;
            }
            let f = a[r][col] / a[col][col];
            for k in col..4 {
                a[r][k] -= f * a[col][k];
            }
        }
    }
    Some([a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]])
}

fn lm_from(ts: &[f64], ys: &[f64], mut a: f64, mut b: f64, mut c: f64) -> ExpFit {
    let mut lambda = 1e-3;
    let mut current = sse(ts, ys, a, b, c);
    let mut converged = false;
    for _ in 0..200 {
        // J^T J and J^T r for r_i = f(t_i) - y_i
        let mut jtj = [[0.0f64; 3]; 3];
        let mut jtr = [0.0f64; 3];
        for (&t, &y) in ts.iter().zip(ys.iter()) {
            let e = clamped_exp(b * t);
            let f = a * e + c;
            let r = f - y;
            let j = [e, a * t * e, 1.0];
            for p in 0..3 {
                for q in 0..3 {
                    jtj[p][q] += j[p] * j[q];
                }
                jtr[p] += j[p] * r;
            }
        }
        let mut damped = jtj;
        for p in 0..3 {
            damped[p][p] += lambda * jtj[p][p].max(1e-12);
        }
        let Some(delta) = solve3(damped, [-jtr[0], -jtr[1], -jtr[2]]) else {
            break;
        };
        let (na, nb, nc) = (a + delta[0], b + delta[1], c + delta[2]);
        let next = sse(ts, ys, na, nb, nc);
        if next.is_finite() && next < current {
            let improvement = (current - next) / current.max(1e-300);
            a = na;
            b = nb;
            c = nc;
            current = next;
            lambda = (lambda * 0.3).max(1e-12);
            let step = delta.iter().map(|d| d.abs()).fold(0.0, f64::max);
            if improvement < 1e-12 || step < 1e-12 {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    ExpFit {
        a,
        b,
        c,
        converged,
        sse: current,
    }
}

/// Fit y ~ a*exp(b*t) + c. Returns None when no starting point produces a
/// usable fit.
pub fn fit_exponential(ts: &[f64], ys: &[f64]) -> Option<ExpFit> {
    assert_eq!(ts.len(), ys.len());
    if ts.len() < 3 {
        return None;
    }
    let y_min = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let y_max = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = (y_max - y_min).max(1e-12);

    let mut candidates: Vec<(f64, f64, f64)> = Vec::new();
    // decay toward an asymptote below the data (a > 0)
    let c_lo = y_min - 0.1 * range;
    if let Some((a, b)) = log_linear_init(ts, ys, c_lo, 1.0) {
        candidates.push((a, b, c_lo));
    }
    // growth from an asymptote above the data (a < 0)
    let c_hi = y_max + 0.1 * range;
    if let Some((a, b)) = log_linear_init(ts, ys, c_hi, -1.0) {
        candidates.push((a, b, c_hi));
    }
    // flat fallback start
    candidates.push((range, 0.0, y_min));

    let mut best: Option<ExpFit> = None;
    for (a0, b0, c0) in candidates {
        let fit = lm_from(ts, ys, a0, b0, c0);
        if !fit.sse.is_finite() {
            continue;
        }
        if best.as_ref().map(|b| fit.sse < b.sse).unwrap_or(true) {
            best = Some(fit);
        }
    }
    best
}
