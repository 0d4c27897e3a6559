//! Gauss-Newton minimisation over a box.
//!
//! The model Hessian is the curvature supplied by the objective (typically
//! `Σ wᵢ rᵢ rᵢᵀ` over penalty residuals) plus a damped BFGS estimate of what it
//! leaves out. Each step minimises the quadratic model exactly over the box
//! and is followed by a backtracking Armijo search on the true objective.

use alloc::vec;
use alloc::vec::Vec;

/// A smooth objective that may fail to evaluate (e.g. power-flow collapse).
pub(crate) trait GnObjective {
    /// Returns the value and writes the gradient, or `None` when undefined.
    fn value_grad(&mut self, x: &[f64], grad: &mut [f64]) -> Option<f64>;
    /// Adds the known curvature at the point last passed to `value_grad` to
    /// the dense row-major `hess`.
    fn add_curvature(&mut self, hess: &mut [f64]) -> Option<()>;
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct InnerOutcome {
    pub converged: bool,
    /// The starting point could not be evaluated.
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct GaussNewton {
    n: usize,
    /// Secant estimate of the curvature missing from the model.
    b: Vec<f64>,
    b_init: f64,
    hess: Vec<f64>,
    hess_new: Vec<f64>,
    g: Vec<f64>,
    g_new: Vec<f64>,
    x_new: Vec<f64>,
    d: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    s: Vec<f64>,
    y: Vec<f64>,
    qp: BoxQp,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACK: usize = 30;
const ROUNDOFF: f64 = 1e-13;

impl GaussNewton {
    /// `b_init` is the initial diagonal of the secant term.
    pub fn new(n: usize, b_init: f64) -> Self {
        let mut gn = Self {
            n,
            b: vec![0.0; n * n],
            b_init,
            hess: vec![0.0; n * n],
            hess_new: vec![0.0; n * n],
            g: vec![0.0; n],
            g_new: vec![0.0; n],
            x_new: vec![0.0; n],
            d: vec![0.0; n],
            lo: vec![0.0; n],
            hi: vec![0.0; n],
            s: vec![0.0; n],
            y: vec![0.0; n],
            qp: BoxQp::new(n),
        };
        gn.reset();
        gn
    }

    /// Forgets the secant information.
    pub fn reset(&mut self) {
        self.b.fill(0.0);
        for i in 0..self.n {
            self.b[i * self.n + i] = self.b_init;
        }
    }

    /// Minimises `obj` over `lb ≤ x ≤ ub` starting from `x` (projected first),
    /// until the projected gradient is below `pg_tol`.
    pub fn minimize<O: GnObjective>(
        &mut self,
        obj: &mut O,
        x: &mut [f64],
        lb: &[f64],
        ub: &[f64],
        pg_tol: f64,
        max_iter: usize,
    ) -> InnerOutcome {
        let n = self.n;
        let failed = InnerOutcome {
            converged: false,
            failed: true,
        };
        for i in 0..n {
            x[i] = x[i].clamp(lb[i], ub[i]);
        }
        let Some(mut f) = obj.value_grad(x, &mut self.g) else {
            return failed;
        };
        self.hess.fill(0.0);
        if obj.add_curvature(&mut self.hess).is_none() {
            return failed;
        }

        let mut iter = 0;
        while iter < max_iter {
            if projected_gradient_norm(x, &self.g, lb, ub) <= pg_tol {
                return InnerOutcome {
                    converged: true,
                    failed: false,
                };
            }
            iter += 1;

            for i in 0..n * n {
                self.hess_new[i] = self.hess[i] + self.b[i];
            }
            for i in 0..n {
                self.lo[i] = lb[i] - x[i];
                self.hi[i] = ub[i] - x[i];
            }
            self.qp
                .solve(&self.hess_new, &self.g, &self.lo, &self.hi, &mut self.d);
            let slope: f64 = self.d.iter().zip(&self.g).map(|(a, b)| a * b).sum();
            if !(slope < 0.0) {
                break;
            }
            if -slope <= ROUNDOFF * (1.0 + f.abs()) {
                // No decrease is resolvable in floating point.
                return InnerOutcome {
                    converged: true,
                    failed: false,
                };
            }

            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACK {
                for i in 0..n {
                    self.x_new[i] = (x[i] + t * self.d[i]).clamp(lb[i], ub[i]);
                }
                if let Some(ft) = obj.value_grad(&self.x_new, &mut self.g_new) {
                    if ft <= f + ARMIJO * t * slope {
                        accepted = Some(ft);
                        break;
                    }
                }
                t *= 0.5;
            }
            let Some(ft) = accepted else {
                break;
            };
            self.hess_new.fill(0.0);
            if obj.add_curvature(&mut self.hess_new).is_none() {
                break;
            }

            // Structured secant pair: gradient change not explained by the
            // supplied curvature at the new point.
            for ((s, xn), xo) in self.s.iter_mut().zip(&self.x_new).zip(x.iter()) {
                *s = xn - xo;
            }
            for i in 0..n {
                let row = &self.hess_new[i * n..(i + 1) * n];
                let hs: f64 = row.iter().zip(&self.s).map(|(a, b)| a * b).sum();
                self.y[i] = self.g_new[i] - self.g[i] - hs;
            }
            self.damped_bfgs_update();

            x.copy_from_slice(&self.x_new);
            core::mem::swap(&mut self.g, &mut self.g_new);
            core::mem::swap(&mut self.hess, &mut self.hess_new);
            f = ft;
        }
        InnerOutcome {
            converged: projected_gradient_norm(x, &self.g, lb, ub) <= pg_tol,
            failed: false,
        }
    }

    /// Powell-damped direct BFGS update of `b` with the pair `(s, y)`.
    fn damped_bfgs_update(&mut self) {
        let n = self.n;
        let bs: Vec<f64> = self
            .b
            .chunks_exact(n)
            .map(|row| row.iter().zip(&self.s).map(|(a, b)| a * b).sum())
            .collect();
        let sbs: f64 = self.s.iter().zip(&bs).map(|(a, b)| a * b).sum();
        if !(sbs > 0.0) {
            return;
        }
        let sy: f64 = self.s.iter().zip(&self.y).map(|(a, b)| a * b).sum();
        let theta = if sy >= 0.2 * sbs {
            1.0
        } else {
            0.8 * sbs / (sbs - sy)
        };
        let mut r = vec![0.0; n];
        for i in 0..n {
            r[i] = theta * self.y[i] + (1.0 - theta) * bs[i];
        }
        let sr: f64 = self.s.iter().zip(&r).map(|(a, b)| a * b).sum();
        if !(sr > 0.0) {
            return;
        }
        for i in 0..n {
            for j in 0..n {
                self.b[i * n + j] += r[i] * r[j] / sr - bs[i] * bs[j] / sbs;
            }
        }
    }
}

pub(crate) fn projected_gradient_norm(x: &[f64], g: &[f64], lb: &[f64], ub: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lb.iter().zip(ub))
        .map(|((&xi, &gi), (&l, &u))| ((xi - gi).clamp(l, u) - xi).abs())
        .fold(0.0, f64::max)
}

/// Primal active-set solver for `min gᵀd + ½ dᵀHd` subject to `lo ≤ d ≤ hi`,
/// with `H` symmetric positive definite and `lo ≤ 0 ≤ hi`.
#[derive(Debug, Clone)]
pub(crate) struct BoxQp {
    n: usize,
    /// −1 at lower bound, +1 at upper bound, 0 free.
    fixed: Vec<i8>,
    grad: Vec<f64>,
    chol: Vec<f64>,
    rhs: Vec<f64>,
    free: Vec<usize>,
}

impl BoxQp {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            fixed: vec![0; n],
            grad: vec![0.0; n],
            chol: vec![0.0; n * n],
            rhs: vec![0.0; n],
            free: Vec::with_capacity(n),
        }
    }

    pub fn solve(&mut self, h: &[f64], g: &[f64], lo: &[f64], hi: &[f64], d: &mut [f64]) {
        let n = self.n;
        d.fill(0.0);
        for i in 0..n {
            self.fixed[i] = if lo[i] >= 0.0 && g[i] > 0.0 {
                -1
            } else if hi[i] <= 0.0 && g[i] < 0.0 {
                1
            } else {
                0
            };
        }
        for _ in 0..4 * n + 8 {
            // Newton step on the free variables.
            self.free.clear();
            self.free.extend((0..n).filter(|&i| self.fixed[i] == 0));
            self.gradient(h, g, d);
            let m = self.free.len();
            for (a, &i) in self.free.iter().enumerate() {
                for (b, &j) in self.free.iter().enumerate() {
                    self.chol[a * m + b] = h[i * n + j];
                }
                self.rhs[a] = -self.grad[i];
            }
            if !cholesky_solve(&mut self.chol[..m * m], &mut self.rhs[..m], m) {
                return;
            }
            let mut alpha = 1.0;
            let mut block = None;
            for (a, &i) in self.free.iter().enumerate() {
                let step = self.rhs[a];
                let room = if step > 0.0 {
                    hi[i] - d[i]
                } else {
                    lo[i] - d[i]
                };
                if step != 0.0 && room / step < alpha {
                    alpha = (room / step).max(0.0);
                    block = Some((i, if step > 0.0 { 1 } else { -1 }));
                }
            }
            for (a, &i) in self.free.iter().enumerate() {
                d[i] = (d[i] + alpha * self.rhs[a]).clamp(lo[i], hi[i]);
            }
            if let Some((i, side)) = block {
                d[i] = if side > 0 { hi[i] } else { lo[i] };
                self.fixed[i] = side;
                continue;
            }
            // Release the held variable whose multiplier has the wrong sign.
            self.gradient(h, g, d);
            let mut worst = None;
            let mut worst_val = 0.0;
            for i in 0..n {
                let wrong = match self.fixed[i] {
                    -1 => -self.grad[i],
                    1 => self.grad[i],
                    _ => 0.0,
                };
                if wrong > worst_val {
                    worst_val = wrong;
                    worst = Some(i);
                }
            }
            match worst {
                Some(i) => self.fixed[i] = 0,
                None => return,
            }
        }
    }

    fn gradient(&mut self, h: &[f64], g: &[f64], d: &[f64]) {
        let n = self.n;
        for i in 0..n {
            self.grad[i] = g[i]
                + h[i * n..(i + 1) * n]
                    .iter()
                    .zip(d)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
        }
    }
}

/// Solves `A x = b` in place for symmetric positive definite `A` (row-major
/// `m × m`, overwritten by its factor). A small diagonal shift is added when
/// the factorisation breaks down. Returns false if it still fails.
pub(crate) fn cholesky_solve(a: &mut [f64], b: &mut [f64], m: usize) -> bool {
    let scale = (0..m).map(|i| a[i * m + i].abs()).fold(0.0, f64::max);
    let mut work: Vec<f64> = a.to_vec();
    let mut shift = 0.0;
    for _ in 0..6 {
        work.copy_from_slice(a);
        for i in 0..m {
            work[i * m + i] += shift;
        }
        if cholesky_in_place(&mut work, m) {
            a.copy_from_slice(&work);
            for i in 0..m {
                let s: f64 = (0..i).map(|k| a[i * m + k] * b[k]).sum();
                b[i] = (b[i] - s) / a[i * m + i];
            }
            for i in (0..m).rev() {
                let s: f64 = (i + 1..m).map(|k| a[k * m + i] * b[k]).sum();
                b[i] = (b[i] - s) / a[i * m + i];
            }
            return true;
        }
        shift = if shift == 0.0 {
            1e-12 * scale.max(1e-300)
        } else {
            shift * 100.0
        };
    }
    false
}

/// Lower Cholesky factor in the lower triangle of `a`.
fn cholesky_in_place(a: &mut [f64], m: usize) -> bool {
    for j in 0..m {
        let mut diag = a[j * m + j];
        for k in 0..j {
            diag -= a[j * m + k] * a[j * m + k];
        }
        if !(diag > 0.0) {
            return false;
        }
        let ljj = libm::sqrt(diag);
        a[j * m + j] = ljj;
        for i in j + 1..m {
            let mut v = a[i * m + j];
            for k in 0..j {
                v -= a[i * m + k] * a[j * m + k];
            }
            a[i * m + j] = v / ljj;
        }
    }
    true
}
