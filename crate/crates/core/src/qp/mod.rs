//! Sparse convex QP solver.
//!
//! Solves `min 0.5 x'Px + p'x  s.t.  l <= Ax <= u` by operator splitting
//! (ADMM) on the equilibrated problem, with a per-row penalty `rho` that is
//! adapted from the residual ratio. Each iteration solves the reduced system
//! `(P + sigma I + A' diag(rho) A) x = rhs` with a cached sparse LDL^T
//! factor, refactored only when `rho` changes.
//!
//! Multipliers follow `P x + p + A'y = 0`: `y_i < 0` when row `i` sits on
//! its lower bound and `y_i > 0` on its upper bound.

pub mod csc;
pub mod ldl;
pub mod oracle;

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use csc::CscMatrix;
pub use ldl::LdlFactor;

use crate::error::{Error, Result};

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_RATIO: f64 = 1e3;
const EQ_TOL: f64 = 1e-4;
const SCALE_MIN: f64 = 1e-4;
const SCALE_MAX: f64 = 1e4;

#[derive(Debug, Clone)]
pub struct QpProblem {
    /// Symmetric positive semidefinite cost matrix (full storage).
    pub p: CscMatrix,
    pub q: Vec<f64>,
    pub a: CscMatrix,
    pub l: Vec<f64>,
    pub u: Vec<f64>,
}

impl QpProblem {
    pub fn new(p: CscMatrix, q: Vec<f64>, a: CscMatrix, l: Vec<f64>, u: Vec<f64>) -> Result<Self> {
        let prob = Self { p, q, a, l, u };
        prob.validate()?;
        Ok(prob)
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_rows(&self) -> usize {
        self.l.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.q.len();
        let m = self.l.len();
        if self.p.nrows != n || self.p.ncols != n {
            return Err(Error::InvalidProblem(format!(
                "P is {}x{}, expected {n}x{n}",
                self.p.nrows, self.p.ncols
            )));
        }
        if self.a.ncols != n || self.a.nrows != m || self.u.len() != m {
            return Err(Error::InvalidProblem("A, l, u dimensions disagree".into()));
        }
        if self.p.asymmetry() > 1e-12 {
            return Err(Error::InvalidProblem("P is not symmetric".into()));
        }
        if self.q.iter().chain(&self.p.values).chain(&self.a.values).any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("non-finite problem data".into()));
        }
        for i in 0..m {
            if !(self.l[i] <= self.u[i]) || self.l[i] == f64::INFINITY || self.u[i] == f64::NEG_INFINITY {
                return Err(Error::InvalidProblem(format!("row {i}: bounds [{}, {}]", self.l[i], self.u[i])));
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let px = self.p.mul_vec(x);
        0.5 * dot(x, &px) + dot(&self.q, x)
    }

    /// Write `P` (upper triangle, symmetric), `p`, `A`, `l`, `u` as
    /// Matrix-Market files `<stem>_{P,p,A,l,u}.mtx` in `dir`.
    pub fn write_matrix_market(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let file = |s: &str| -> Result<BufWriter<File>> {
            Ok(BufWriter::new(File::create(dir.join(format!("{stem}_{s}.mtx")))?))
        };
        self.p.upper_triangle().write_matrix_market(file("P")?, true)?;
        csc::write_vector_market(file("p")?, &self.q)?;
        self.a.write_matrix_market(file("A")?, false)?;
        csc::write_vector_market(file("l")?, &self.l)?;
        csc::write_vector_market(file("u")?, &self.u)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_prim_inf: f64,
    pub max_iter: usize,
    /// Iterations between convergence checks; residuals cost about as much
    /// as an iteration.
    pub check_interval: usize,
    /// Iterations between penalty updates; 0 disables adaptation.
    pub adaptive_rho_interval: usize,
    /// Update only when the proposed penalty differs by more than this factor.
    pub adaptive_rho_tolerance: f64,
    pub scaling_iters: usize,
    /// Finish with augmented-Lagrangian Newton steps once the iterate is close.
    pub polish: bool,
    /// Polish once residuals are within this factor of the tolerance.
    pub polish_start: f64,
    /// Iterations before retrying a failed polish; doubles after each failure.
    pub polish_interval: usize,
    /// Initial and largest constraint penalty of the polishing stage.
    pub polish_penalty: f64,
    pub polish_penalty_max: f64,
    /// Proximal weight keeping the Newton systems nonsingular.
    pub polish_prox: f64,
    pub polish_inner_steps: usize,
    pub polish_max_newton: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_abs: 1e-5,
            eps_rel: 1e-5,
            eps_prim_inf: 1e-5,
            max_iter: 20_000,
            check_interval: 10,
            adaptive_rho_interval: 50,
            adaptive_rho_tolerance: 5.0,
            scaling_iters: 10,
            polish: true,
            polish_start: 10.0,
            polish_interval: 200,
            polish_penalty: 1e6,
            polish_penalty_max: 1e10,
            polish_prox: 1e-6,
            polish_inner_steps: 20,
            polish_max_newton: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Solved,
    MaxIterations,
    PrimalInfeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
    pub rho_updates: usize,
    /// Whether the returned point came from the polishing stage.
    pub polished: bool,
}

/// Residuals recomputed from the problem data alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// Distance of `Ax` from the box `[l, u]` (inf-norm).
    pub primal: f64,
    /// `|P x + p + A'y|` (inf-norm).
    pub dual: f64,
    /// Largest `min(|y_i|, gap_i)`, where `gap_i` is the distance of `Ax`
    /// from the bound the sign of `y_i` points at (infinite when that bound
    /// is), so it catches both wrong signs and multipliers on slack rows.
    pub complementarity: f64,
    pub primal_scale: f64,
    pub dual_scale: f64,
}

impl KktResiduals {
    pub fn within(&self, eps_abs: f64, eps_rel: f64) -> bool {
        self.primal <= eps_abs + eps_rel * self.primal_scale
            && self.dual <= eps_abs + eps_rel * self.dual_scale
            && self.complementarity <= eps_abs + eps_rel * self.primal_scale.max(self.dual_scale)
    }
}

pub fn kkt_residuals(prob: &QpProblem, x: &[f64], y: &[f64]) -> KktResiduals {
    let ax = prob.a.mul_vec(x);
    let px = prob.p.mul_vec(x);
    let aty = prob.a.tr_mul_vec(y);
    let mut primal: f64 = 0.0;
    let mut z_norm: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    for i in 0..ax.len() {
        let z = ax[i].clamp(prob.l[i], prob.u[i]);
        primal = primal.max((ax[i] - z).abs());
        z_norm = z_norm.max(z.abs());
        let gap = if y[i] > 0.0 { prob.u[i] - z } else { z - prob.l[i] };
        complementarity = complementarity.max(y[i].abs().min(gap));
    }
    let dual = px
        .iter()
        .zip(&prob.q)
        .zip(&aty)
        .map(|((a, b), c)| (a + b + c).abs())
        .fold(0.0, f64::max);
    KktResiduals {
        primal,
        dual,
        complementarity,
        primal_scale: inf_norm(&ax).max(z_norm),
        dual_scale: inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&prob.q)),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
}

fn limit_scale(v: f64) -> f64 {
    if v < SCALE_MIN {
        1.0
    } else {
        v.min(SCALE_MAX)
    }
}

/// Equilibrated copy of a problem: `P_s = c D P D`, `A_s = E A D`.
struct Scaled {
    p_upper: CscMatrix,
    a: CscMatrix,
    at: CscMatrix,
    q: Vec<f64>,
    l: Vec<f64>,
    u: Vec<f64>,
    d: Vec<f64>,
    e: Vec<f64>,
    c: f64,
}

fn equilibrate(prob: &QpProblem, iters: usize) -> Scaled {
    let n = prob.num_vars();
    let m = prob.num_rows();
    let mut p = prob.p.clone();
    let mut a = prob.a.clone();
    let mut q = prob.q.clone();
    let mut d = vec![1.0; n];
    let mut e = vec![1.0; m];
    let mut c = 1.0;
    for _ in 0..iters {
        let pc = p.col_inf_norms();
        let ac = a.col_inf_norms();
        let d_step: Vec<f64> = (0..n).map(|j| 1.0 / limit_scale(pc[j].max(ac[j])).sqrt()).collect();
        let e_step: Vec<f64> = a.row_inf_norms().into_iter().map(|r| 1.0 / limit_scale(r).sqrt()).collect();
        p.scale(&d_step, &d_step);
        a.scale(&e_step, &d_step);
        for j in 0..n {
            q[j] *= d_step[j];
            d[j] *= d_step[j];
        }
        for i in 0..m {
            e[i] *= e_step[i];
        }
        let pc = p.col_inf_norms();
        let mean = if n > 0 { pc.iter().sum::<f64>() / n as f64 } else { 1.0 };
        let c_step = 1.0 / limit_scale(mean.max(inf_norm(&q)));
        p.scale_values(c_step);
        q.iter_mut().for_each(|v| *v *= c_step);
        c *= c_step;
    }
    let l = prob.l.iter().zip(&e).map(|(v, s)| v * s).collect();
    let u = prob.u.iter().zip(&e).map(|(v, s)| v * s).collect();
    let at = a.transpose();
    Scaled {
        p_upper: p.upper_triangle(),
        a,
        at,
        q,
        l,
        u,
        d,
        e,
        c,
    }
}

/// Upper triangle of `P + sigma I + A' diag(rho) A`. The sparsity pattern
/// depends only on the patterns of `P` and `A`, so refactors can reuse the
/// symbolic analysis.
fn reduced_matrix(p_upper: &CscMatrix, a: &CscMatrix, at: &CscMatrix, rho: &[f64], sigma: f64) -> CscMatrix {
    let n = a.ncols;
    let mut acc = vec![0.0; n];
    let mut mark = vec![usize::MAX; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowind = Vec::new();
    let mut values = Vec::new();
    colptr.push(0);
    for k in 0..n {
        touched.clear();
        let mut hit = |i: usize, v: f64, acc: &mut [f64], touched: &mut Vec<usize>| {
            if mark[i] != k {
                mark[i] = k;
                acc[i] = 0.0;
                touched.push(i);
            }
            acc[i] += v;
        };
        hit(k, sigma, &mut acc, &mut touched);
        for (i, v) in p_upper.col(k) {
            hit(i, v, &mut acc, &mut touched);
        }
        for (r, ark) in a.col(k) {
            let w = rho[r] * ark;
            for (j, arj) in at.col(r) {
                if j <= k {
                    hit(j, w * arj, &mut acc, &mut touched);
                }
            }
        }
        touched.sort_unstable();
        for &i in &touched {
            rowind.push(i);
            values.push(acc[i]);
        }
        colptr.push(rowind.len());
    }
    CscMatrix {
        nrows: n,
        ncols: n,
        colptr,
        rowind,
        values,
    }
}

fn row_penalties(l: &[f64], u: &[f64], rho: f64) -> Vec<f64> {
    l.iter()
        .zip(u)
        .map(|(&lo, &hi)| {
            if lo == f64::NEG_INFINITY && hi == f64::INFINITY {
                RHO_MIN
            } else if hi - lo < EQ_TOL {
                (RHO_EQ_RATIO * rho).min(RHO_MAX)
            } else {
                rho
            }
        })
        .collect()
}

/// Solve a QP, optionally warm-started from a primal-dual pair.
pub fn solve(prob: &QpProblem, settings: &QpSettings, warm: Option<(&[f64], &[f64])>) -> Result<QpSolution> {
    prob.validate()?;
    let n = prob.num_vars();
    let m = prob.num_rows();
    let s = equilibrate(prob, settings.scaling_iters);
    let sigma = settings.sigma;
    let alpha = settings.alpha;
    let mut rho = settings.rho.clamp(RHO_MIN, RHO_MAX);
    let mut rho_vec = row_penalties(&s.l, &s.u, rho);
    let mut kmat = reduced_matrix(&s.p_upper, &s.a, &s.at, &rho_vec, sigma);
    let mut factor = LdlFactor::new(&kmat)?;

    let mut x = vec![0.0; n];
    let mut z = vec![0.0; m];
    let mut y = vec![0.0; m];
    if let Some((wx, wy)) = warm {
        crate::error::check_len("warm-start x", n, wx.len())?;
        crate::error::check_len("warm-start y", m, wy.len())?;
        for j in 0..n {
            x[j] = wx[j] / s.d[j];
        }
        for i in 0..m {
            y[i] = s.c * wy[i] / s.e[i];
        }
        let ax = s.a.mul_vec(&x);
        for i in 0..m {
            z[i] = ax[i].clamp(s.l[i], s.u[i]);
        }
    } else {
        for i in 0..m {
            z[i] = 0.0f64.clamp(s.l[i], s.u[i]);
        }
    }

    let mut status = QpStatus::MaxIterations;
    let mut iterations = 0;
    let mut prim_res = f64::INFINITY;
    let mut dual_res = f64::INFINITY;
    let mut rho_updates = 0;
    let mut polished = false;
    let mut next_polish = if settings.polish { 0 } else { usize::MAX };
    let mut polish_wait = settings.polish_interval;
    let mut rhs = vec![0.0; n];
    let mut w = vec![0.0; m];
    let mut z_relaxed = vec![0.0; m];
    let mut dy = vec![0.0; m];

    for iter in 1..=settings.max_iter {
        iterations = iter;
        for i in 0..m {
            w[i] = rho_vec[i] * z[i] - y[i];
        }
        let atw = s.at.mul_vec(&w);
        for j in 0..n {
            rhs[j] = sigma * x[j] - s.q[j] + atw[j];
        }
        factor.solve_in_place(&mut rhs);
        let x_tilde = &rhs;
        let z_tilde = s.a.mul_vec(x_tilde);
        for j in 0..n {
            x[j] = alpha * x_tilde[j] + (1.0 - alpha) * x[j];
        }
        for i in 0..m {
            z_relaxed[i] = alpha * z_tilde[i] + (1.0 - alpha) * z[i];
            let z_new = (z_relaxed[i] + y[i] / rho_vec[i]).clamp(s.l[i], s.u[i]);
            dy[i] = rho_vec[i] * (z_relaxed[i] - z_new);
            y[i] += dy[i];
            z[i] = z_new;
        }

        let adapt = settings.adaptive_rho_interval > 0 && iter % settings.adaptive_rho_interval == 0;
        if !(adapt || iter % settings.check_interval.max(1) == 0 || iter == settings.max_iter) {
            continue;
        }
        let res = residuals(&s, &x, &z, &y, settings);
        prim_res = res.prim;
        dual_res = res.dual;
        if res.converged(1.0) {
            status = QpStatus::Solved;
            break;
        }
        if primal_infeasible(prob, &s, &dy, settings.eps_prim_inf) {
            status = QpStatus::PrimalInfeasible;
            break;
        }
        if iter >= next_polish && res.converged(settings.polish_start) {
            if let Some((xp, zp, yp)) = polish(&s, &x, &y, settings) {
                let pres = residuals(&s, &xp, &zp, &yp, settings);
                if pres.converged(1.0) {
                    x = xp;
                    y = yp;
                    prim_res = pres.prim;
                    dual_res = pres.dual;
                    polished = true;
                    status = QpStatus::Solved;
                    break;
                }
            }
            // Failed attempts back off geometrically.
            next_polish = iter + polish_wait;
            polish_wait = polish_wait.saturating_mul(2);
        }

        if adapt {
            let prim_rel = res.prim_scaled / res.prim_scale_scaled.max(1e-10);
            let dual_rel = res.dual_scaled / res.dual_scale_scaled.max(1e-10);
            let proposal = (rho * (prim_rel / dual_rel.max(1e-10)).sqrt()).clamp(RHO_MIN, RHO_MAX);
            let tol = settings.adaptive_rho_tolerance;
            if proposal > rho * tol || proposal < rho / tol {
                rho = proposal;
                rho_vec = row_penalties(&s.l, &s.u, rho);
                kmat = reduced_matrix(&s.p_upper, &s.a, &s.at, &rho_vec, sigma);
                factor.refactor(&kmat)?;
                rho_updates += 1;
            }
        }
    }

    let x_out: Vec<f64> = x.iter().zip(&s.d).map(|(v, d)| v * d).collect();
    let y_out: Vec<f64> = y.iter().zip(&s.e).map(|(v, e)| v * e / s.c).collect();
    if x_out.iter().chain(&y_out).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("QP iterate".into()));
    }
    let objective = prob.objective(&x_out);
    Ok(QpSolution {
        x: x_out,
        y: y_out,
        status,
        iterations,
        primal_residual: prim_res,
        dual_residual: dual_res,
        objective,
        rho_updates,
        polished,
    })
}

/// Residuals of a scaled iterate, measured in the original problem, plus
/// their scaled counterparts for the penalty update.
struct Residuals {
    prim: f64,
    dual: f64,
    eps_prim: f64,
    eps_dual: f64,
    comp: f64,
    eps_comp: f64,
    prim_scaled: f64,
    prim_scale_scaled: f64,
    dual_scaled: f64,
    dual_scale_scaled: f64,
}

impl Residuals {
    fn converged(&self, factor: f64) -> bool {
        self.prim <= factor * self.eps_prim
            && self.dual <= factor * self.eps_dual
            && self.comp <= factor * self.eps_comp
    }
}

fn residuals(s: &Scaled, x: &[f64], z: &[f64], y: &[f64], settings: &QpSettings) -> Residuals {
    let ax = s.a.mul_vec(x);
    let px = s.p_upper.sym_upper_mul_vec(x);
    let aty = s.at.mul_vec(y);
    let mut r = Residuals {
        prim: 0.0,
        dual: 0.0,
        eps_prim: 0.0,
        eps_dual: 0.0,
        comp: 0.0,
        eps_comp: 0.0,
        prim_scaled: 0.0,
        prim_scale_scaled: 0.0,
        dual_scaled: 0.0,
        dual_scale_scaled: 0.0,
    };
    let (mut ax_norm, mut z_norm) = (0.0f64, 0.0f64);
    for i in 0..ax.len() {
        let inv = 1.0 / s.e[i];
        let d = ax[i] - z[i];
        r.prim = r.prim.max((d * inv).abs());
        ax_norm = ax_norm.max((ax[i] * inv).abs());
        z_norm = z_norm.max((z[i] * inv).abs());
        r.prim_scaled = r.prim_scaled.max(d.abs());
        r.prim_scale_scaled = r.prim_scale_scaled.max(ax[i].abs()).max(z[i].abs());
        // Complementarity at the projection of Ax, as the independent check
        // measures it.
        let zc = ax[i].clamp(s.l[i], s.u[i]);
        let gap = if y[i] > 0.0 { s.u[i] - zc } else { zc - s.l[i] };
        r.comp = r.comp.max((y[i] * s.e[i] / s.c).abs().min(gap * inv));
    }
    let (mut px_norm, mut aty_norm, mut q_norm) = (0.0f64, 0.0f64, 0.0f64);
    let cinv = 1.0 / s.c;
    for j in 0..px.len() {
        let f = cinv / s.d[j];
        let d = px[j] + s.q[j] + aty[j];
        r.dual = r.dual.max((d * f).abs());
        px_norm = px_norm.max((px[j] * f).abs());
        aty_norm = aty_norm.max((aty[j] * f).abs());
        q_norm = q_norm.max((s.q[j] * f).abs());
        r.dual_scaled = r.dual_scaled.max(d.abs());
        r.dual_scale_scaled = r.dual_scale_scaled.max(px[j].abs()).max(aty[j].abs()).max(s.q[j].abs());
    }
    r.eps_prim = settings.eps_abs + settings.eps_rel * ax_norm.max(z_norm);
    r.eps_dual = settings.eps_abs + settings.eps_rel * px_norm.max(aty_norm).max(q_norm);
    r.eps_comp = settings.eps_abs
        + settings.eps_rel * ax_norm.max(z_norm).max(px_norm).max(aty_norm).max(q_norm);
    r
}

/// Finish from an ADMM iterate with a proximal augmented Lagrangian whose
/// inner problems are solved by semismooth Newton steps. The multipliers
/// it produces are sign consistent by construction, and the finite
/// penalty keeps the Newton systems nonsingular when active rows are
/// dependent. Returns scaled `(x, z, y)` meeting the tolerances.
fn polish(s: &Scaled, x: &[f64], y: &[f64], settings: &QpSettings) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = s.a.ncols;
    let m = s.a.nrows;
    let prox = settings.polish_prox;
    let mut penalty = vec![settings.polish_penalty; m];
    let mut x = x.to_vec();
    let mut y = y.to_vec();
    let mut center = x.clone();
    let mut newton = 0;
    let mut prev_violation = vec![f64::INFINITY; m];
    // Multiplier estimate, gradient of the inner objective, and the rows
    // outside their bounds at the shifted point.
    let inner = |x: &[f64], y: &[f64], center: &[f64], penalty: &[f64]| {
        let ax = s.a.mul_vec(x);
        let mut yt = vec![0.0; m];
        for i in 0..m {
            let w = ax[i] + y[i] / penalty[i];
            yt[i] = penalty[i] * (w - w.clamp(s.l[i], s.u[i]));
        }
        let mut g = s.p_upper.sym_upper_mul_vec(x);
        let aty = s.at.mul_vec(&yt);
        for j in 0..n {
            g[j] += s.q[j] + prox * (x[j] - center[j]) + aty[j];
        }
        (ax, yt, g)
    };
    while newton < settings.polish_max_newton {
        let mut inner_steps = 0;
        loop {
            let (ax, yt, g) = inner(&x, &y, &center, &penalty);
            let z: Vec<f64> = (0..m).map(|i| ax[i].clamp(s.l[i], s.u[i])).collect();
            let res = residuals(s, &x, &z, &yt, settings);
            if res.converged(1.0) {
                return Some((x, z, yt));
            }
            let g_inf = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if inner_steps > 0 && g_inf <= 1e-3 * res.eps_dual * s.c * min_entry(&s.d)
                || inner_steps >= settings.polish_inner_steps
                || newton >= settings.polish_max_newton
            {
                y = yt;
                break;
            }
            let d = newton_direction(s, &ax, &y, &g, &penalty, prox)?;
            let tau = exact_step(s, &x, &d, &y, &center, &penalty, prox);
            for j in 0..n {
                x[j] += tau * d[j];
            }
            inner_steps += 1;
            newton += 1;
        }
        center.clone_from(&x);
        // Raise the penalty on rows whose violation is shrinking slowly.
        let ax = s.a.mul_vec(&x);
        for i in 0..m {
            let v = (ax[i] - ax[i].clamp(s.l[i], s.u[i])).abs();
            if v > 0.25 * prev_violation[i] {
                penalty[i] = (penalty[i] * 10.0).min(settings.polish_penalty_max);
            }
            prev_violation[i] = v;
        }
    }
    None
}

fn min_entry(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Generalized Newton direction of the inner augmented Lagrangian: rows
/// outside their bounds enter the quasi-definite system with `-1/penalty`.
fn newton_direction(s: &Scaled, ax: &[f64], y: &[f64], g: &[f64], penalty: &[f64], prox: f64) -> Option<Vec<f64>> {
    let n = s.a.ncols;
    let active: Vec<usize> = (0..s.a.nrows)
        .filter(|&i| {
            let w = ax[i] + y[i] / penalty[i];
            w < s.l[i] || w > s.u[i]
        })
        .collect();
    let dim = n + active.len();
    let mut t = Vec::with_capacity(s.p_upper.nnz() + dim + active.len() * 8);
    for j in 0..n {
        t.push((j, j, prox));
        for (i, v) in s.p_upper.col(j) {
            t.push((i, j, v));
        }
    }
    for (k, &i) in active.iter().enumerate() {
        for (j, v) in s.at.col(i) {
            t.push((j, n + k, v));
        }
        t.push((n + k, n + k, -1.0 / penalty[i]));
    }
    let kkt = CscMatrix::from_triplets(dim, dim, &t).ok()?;
    let factor = LdlFactor::new(&kkt).ok()?;
    let mut rhs = vec![0.0; dim];
    for j in 0..n {
        rhs[j] = -g[j];
    }
    factor.solve_in_place(&mut rhs);
    rhs.truncate(n);
    rhs.iter().all(|v| v.is_finite()).then_some(rhs)
}

/// Exact minimizer along `d` of the piecewise quadratic inner objective,
/// found by bisection on its monotone derivative.
fn exact_step(s: &Scaled, x: &[f64], d: &[f64], y: &[f64], center: &[f64], penalty: &[f64], prox: f64) -> f64 {
    let ax = s.a.mul_vec(x);
    let ad = s.a.mul_vec(d);
    let px = s.p_upper.sym_upper_mul_vec(x);
    let pd = s.p_upper.sym_upper_mul_vec(d);
    let mut slope = 0.0;
    let mut curvature = 0.0;
    for j in 0..x.len() {
        slope += d[j] * (px[j] + s.q[j] + prox * (x[j] - center[j]));
        curvature += d[j] * (pd[j] + prox * d[j]);
    }
    let derivative = |tau: f64| {
        let mut v = slope + curvature * tau;
        for i in 0..ad.len() {
            if ad[i] != 0.0 {
                let w = ax[i] + y[i] / penalty[i] + tau * ad[i];
                v += penalty[i] * ad[i] * (w - w.clamp(s.l[i], s.u[i]));
            }
        }
        v
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while derivative(hi) < 0.0 && hi < 1e6 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if derivative(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Divergence certificate: the multiplier step `dy` (unscaled, projected
/// onto the polar of the bound recession cone) satisfies `A'dy ~ 0` and
/// `u'max(dy,0) + l'min(dy,0) < 0`.
fn primal_infeasible(prob: &QpProblem, s: &Scaled, dy_scaled: &[f64], eps: f64) -> bool {
    let m = dy_scaled.len();
    if m == 0 {
        return false;
    }
    let mut dy: Vec<f64> = (0..m).map(|i| s.e[i] * dy_scaled[i]).collect();
    for i in 0..m {
        if prob.u[i] == f64::INFINITY {
            dy[i] = dy[i].min(0.0);
        }
        if prob.l[i] == f64::NEG_INFINITY {
            dy[i] = dy[i].max(0.0);
        }
    }
    let norm = inf_norm(&dy);
    if norm <= eps {
        return false;
    }
    let mut support = 0.0;
    for i in 0..m {
        let v = dy[i] / norm;
        if v > 0.0 {
            support += prob.u[i] * v;
        } else if v < 0.0 {
            support += prob.l[i] * v;
        }
    }
    if !(support < -eps) {
        return false;
    }
    let scaled_back: Vec<f64> = (0..m).map(|i| dy[i] / s.e[i]).collect();
    let at = s.at.mul_vec(&scaled_back);
    let at_norm = at.iter().zip(&s.d).fold(0.0, |acc: f64, (v, d)| acc.max((v / d).abs()));
    at_norm / norm < eps
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_to_csc(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> CscMatrix {
        let mut t = Vec::new();
        for j in 0..cols {
            for i in 0..rows {
                let v = f(i, j);
                if v != 0.0 {
                    t.push((i, j, v));
                }
            }
        }
        CscMatrix::from_triplets(rows, cols, &t).unwrap()
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem {
        let g = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let p = &g * g.transpose() + nalgebra::DMatrix::identity(n, n);
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let a = nalgebra::DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let l: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..-0.1)).collect();
        let u: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        QpProblem::new(
            dense_to_csc(n, n, |i, j| p[(i, j)]),
            q,
            dense_to_csc(m, n, |i, j| a[(i, j)]),
            l,
            u,
        )
        .unwrap()
    }

    #[test]
    fn random_problems_match_enumeration_oracle() {
        // Tight tolerances: the comparison is about the optimum, not the
        // default stopping rule.
        let settings = QpSettings {
            eps_abs: 1e-10,
            eps_rel: 1e-10,
            ..QpSettings::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(1..=6);
            let m = rng.random_range(1..=6);
            let prob = random_problem(&mut rng, n, m);
            let reference = oracle::solve_by_enumeration(&prob).unwrap().unwrap();
            let sol = solve(&prob, &settings, None).unwrap();
            assert_eq!(sol.status, QpStatus::Solved);
            for (a, b) in sol.x.iter().zip(&reference.x) {
                assert!((a - b).abs() <= 1e-6, "{:?} vs {:?}", sol.x, reference.x);
            }
        }
    }

    #[test]
    fn scalar_lower_bound_multiplier() {
        let prob = QpProblem::new(
            CscMatrix::from_triplets(1, 1, &[(0, 0, 2.0)]).unwrap(),
            vec![0.0],
            CscMatrix::identity(1),
            vec![1.0],
            vec![f64::INFINITY],
        )
        .unwrap();
        let sol = solve(&prob, &QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.x[0] - 1.0).abs() < 1e-4, "{:?}", sol.x);
        assert!((sol.y[0] + 2.0).abs() < 1e-3, "{:?}", sol.y);
    }

    #[test]
    fn polish_handles_dependent_active_rows() {
        // min x0^2 + s  s.t.  x0 + x1 >= 1 (twice), x1 - s <= 0.2, s >= 0,
        // |x1| <= 1. Optimum x = (0.5, 0.5, 0.3) with value 0.55; the
        // duplicated row leaves the multipliers non-unique.
        let prob = QpProblem::new(
            CscMatrix::from_triplets(3, 3, &[(0, 0, 2.0)]).unwrap(),
            vec![0.0, 0.0, 1.0],
            CscMatrix::from_triplets(
                5,
                3,
                &[
                    (0, 0, 1.0),
                    (0, 1, 1.0),
                    (1, 0, 1.0),
                    (1, 1, 1.0),
                    (2, 1, 1.0),
                    (2, 2, -1.0),
                    (3, 2, 1.0),
                    (4, 1, 1.0),
                ],
            )
            .unwrap(),
            vec![1.0, 1.0, f64::NEG_INFINITY, 0.0, -1.0],
            vec![f64::INFINITY, f64::INFINITY, 0.2, f64::INFINITY, 1.0],
        )
        .unwrap();
        // Start polishing far from convergence so the polish does the work.
        let settings = QpSettings {
            polish_start: 1e3,
            ..QpSettings::default()
        };
        let sol = solve(&prob, &settings, None).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert!(sol.polished);
        assert!((sol.objective - 0.55).abs() < 1e-6, "{}", sol.objective);
        let kkt = kkt_residuals(&prob, &sol.x, &sol.y);
        assert!(kkt.within(settings.eps_abs, settings.eps_rel), "{kkt:?}");
        assert!((sol.y[0] + sol.y[1] + 1.0).abs() < 1e-4, "{:?}", sol.y);
    }

    #[test]
    fn symmetric_equality() {
        let prob = QpProblem::new(
            CscMatrix::identity(2),
            vec![0.0, 0.0],
            CscMatrix::from_triplets(1, 2, &[(0, 0, 1.0), (0, 1, 1.0)]).unwrap(),
            vec![1.0],
            vec![1.0],
        )
        .unwrap();
        let sol = solve(&prob, &QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        for v in &sol.x {
            assert!((v - 0.5).abs() < 1e-5);
        }
    }

    #[test]
    fn infeasible_rows_detected() {
        // x >= 1 and x <= 0.
        let prob = QpProblem::new(
            CscMatrix::identity(1),
            vec![0.0],
            CscMatrix::from_triplets(2, 1, &[(0, 0, 1.0), (1, 0, 1.0)]).unwrap(),
            vec![1.0, f64::NEG_INFINITY],
            vec![f64::INFINITY, 0.0],
        )
        .unwrap();
        let sol = solve(&prob, &QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn invalid_problems_rejected() {
        let asym = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0)]).unwrap();
        assert!(QpProblem::new(asym, vec![0.0; 2], CscMatrix::zeros(0, 2), vec![], vec![]).is_err());
        assert!(QpProblem::new(
            CscMatrix::identity(1),
            vec![0.0],
            CscMatrix::identity(1),
            vec![1.0],
            vec![0.0]
        )
        .is_err());
    }

    #[test]
    fn solved_results_pass_independent_kkt_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let settings = QpSettings::default();
        for _ in 0..20 {
            let prob = random_problem(&mut rng, 12, 8);
            let sol = solve(&prob, &settings, None).unwrap();
            assert_eq!(sol.status, QpStatus::Solved);
            let kkt = kkt_residuals(&prob, &sol.x, &sol.y);
            assert!(kkt.within(settings.eps_abs, settings.eps_rel), "{kkt:?}");
        }
    }

    #[test]
    fn warm_start_never_slower() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let settings = QpSettings::default();
        for _ in 0..20 {
            let prob = random_problem(&mut rng, 10, 6);
            let cold = solve(&prob, &settings, None).unwrap();
            let warm = solve(&prob, &settings, Some((&cold.x, &cold.y))).unwrap();
            assert_eq!(warm.status, QpStatus::Solved);
            assert!(warm.iterations <= cold.iterations);
        }
    }

    #[test]
    fn cost_scaling_leaves_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tight = QpSettings {
            eps_abs: 1e-10,
            eps_rel: 1e-10,
            ..QpSettings::default()
        };
        let prob = random_problem(&mut rng, 8, 5);
        let mut scaled = prob.clone();
        scaled.p.scale_values(37.0);
        scaled.q.iter_mut().for_each(|v| *v *= 37.0);
        let a = solve(&prob, &tight, None).unwrap();
        let b = solve(&scaled, &tight, None).unwrap();
        for (x, y) in a.x.iter().zip(&b.x) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn reduced_matrix_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prob = random_problem(&mut rng, 5, 4);
        let rho = vec![0.5, 1.0, 2.0, 3.0];
        let at = prob.a.transpose();
        let k = reduced_matrix(&prob.p.upper_triangle(), &prob.a, &at, &rho, 0.1);
        let ad = prob.a.to_dense();
        let want = prob.p.to_dense()
            + nalgebra::DMatrix::identity(5, 5) * 0.1
            + ad.transpose() * nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(rho)) * ad;
        let got = k.symmetric_from_upper().to_dense();
        assert!((got - want).abs().max() < 1e-12);
    }
}
