//! Stage 3: resistivity `r = 1/sigma` from `curl(r J) = G` by box-constrained
//! regularised least squares.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    discrete_curl, discrete_curl_transpose, discrete_grad, discrete_grad_transpose, DomainMask, ScalarField,
    VectorField,
};
use crate::math;

/// Fraction of the median `|J|` below which a node is not trusted.
pub const ACTIVE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResistivityConfig {
    /// Lower conductivity bound; `r` is kept in `[lambda, 1/lambda]`.
    pub lambda: f64,
    /// Gradient penalty relative to the mean of `|J|^2`.
    pub alpha: f64,
    pub max_iter: usize,
    /// Relative projected-gradient tolerance.
    pub tol: f64,
    /// Constant starting resistivity.
    pub r0: f64,
}

impl Default for ResistivityConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            alpha: 1e-8,
            max_iter: 5000,
            tol: 1e-10,
            r0: 1.0,
        }
    }
}

/// The quadratic `1/2 |curl(r J) - G|^2 + alpha/2 |grad r|^2` with
/// trapezoid weights over the grid.
pub struct ResistivityProblem<'a> {
    pub j: &'a VectorField,
    pub g: &'a VectorField,
    /// Effective penalty weight (already scaled).
    pub alpha: f64,
    weights: Vec<f64>,
}

impl<'a> ResistivityProblem<'a> {
    pub fn new(j: &'a VectorField, g: &'a VectorField, alpha: f64) -> Result<Self> {
        j.grid.ensure_same(&g.grid, "resistivity problem")?;
        if !(alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!("alpha {alpha}")));
        }
        Ok(Self {
            j,
            g,
            alpha,
            weights: DomainMask::full(j.grid).weights(),
        })
    }

    /// Penalty scale `mean |J|^2` used to make `alpha` dimensionless.
    pub fn current_scale(j: &VectorField) -> f64 {
        let w = DomainMask::full(j.grid).weights();
        let tot: f64 = w.iter().sum();
        j.values.iter().zip(&w).map(|(v, q)| q * math::dot(*v, *v)).sum::<f64>() / tot
    }

    /// `K r = curl(r J)`.
    pub fn apply_k(&self, r: &[f64]) -> VectorField {
        let rj = VectorField {
            grid: self.j.grid,
            values: self.j.values.iter().zip(r).map(|(v, &s)| math::scale(*v, s)).collect(),
        };
        discrete_curl(&rj)
    }

    /// `K^T v = J . curl^T v` nodewise.
    pub fn apply_kt(&self, v: &VectorField) -> Vec<f64> {
        let c = discrete_curl_transpose(v);
        c.values.iter().zip(&self.j.values).map(|(a, b)| math::dot(*a, *b)).collect()
    }

    fn weighted(&self, v: &VectorField) -> VectorField {
        VectorField {
            grid: v.grid,
            values: v.values.iter().zip(&self.weights).map(|(x, q)| math::scale(*x, *q)).collect(),
        }
    }

    fn grad(&self, r: &[f64]) -> VectorField {
        discrete_grad(&ScalarField {
            grid: self.j.grid,
            values: r.to_vec(),
        })
    }

    fn quad(&self, v: &VectorField) -> f64 {
        v.values.iter().zip(&self.weights).map(|(x, q)| q * math::dot(*x, *x)).sum()
    }

    pub fn residual(&self, r: &[f64]) -> VectorField {
        self.apply_k(r).sub(self.g)
    }

    pub fn objective(&self, r: &[f64]) -> f64 {
        let mut f = 0.5 * self.quad(&self.residual(r));
        if self.alpha > 0.0 {
            f += 0.5 * self.alpha * self.quad(&self.grad(r));
        }
        f
    }

    /// `K^T Q (K r - G) + alpha L^T Q L r`.
    pub fn gradient(&self, r: &[f64]) -> Vec<f64> {
        let mut out = self.apply_kt(&self.weighted(&self.residual(r)));
        if self.alpha > 0.0 {
            let lt = discrete_grad_transpose(&self.weighted(&self.grad(r)));
            for (o, l) in out.iter_mut().zip(lt.values) {
                *o += self.alpha * l;
            }
        }
        out
    }

    /// Exact diagonal of the Hessian. Unit vectors on nodes five apart in
    /// every axis have Hessian columns with disjoint support, so one
    /// product per residue class mod 5 suffices.
    pub fn hessian_diagonal(&self) -> Vec<f64> {
        let grid = self.j.grid;
        let n = grid.len();
        let zero = vec![0.0; n];
        let offset = self.gradient(&zero);
        let mut diag = vec![0.0; n];
        for class in 0..125 {
            let key = [class % 5, (class / 5) % 5, class / 25];
            let members: Vec<usize> = (0..n)
                .filter(|&m| {
                    let c = grid.coords(m);
                    (0..3).all(|d| c[d] % 5 == key[d])
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut e = vec![0.0; n];
            for &m in &members {
                e[m] = 1.0;
            }
            let he = self.gradient(&e);
            for &m in &members {
                diag[m] = he[m] - offset[m];
            }
        }
        diag
    }

    /// `d^T H d`, the curvature along `d`.
    pub fn curvature(&self, d: &[f64]) -> f64 {
        let mut c = self.quad(&self.apply_k(d));
        if self.alpha > 0.0 {
            c += self.alpha * self.quad(&self.grad(d));
        }
        c
    }
}

#[derive(Debug, Clone)]
pub struct ResistivityEstimate {
    pub r: ScalarField,
    pub sigma: ScalarField,
    pub objective_history: Vec<f64>,
    /// Nodes with `|J| >= 0.1 median |J|`.
    pub active: Vec<bool>,
    pub iterations: usize,
    pub converged: bool,
    pub projected_gradient: f64,
}

/// Nodes where `|J|` is at least `ACTIVE_FRACTION` times its median.
pub fn active_nodes(j: &VectorField) -> Vec<bool> {
    let mags: Vec<f64> = j.values.iter().map(|v| math::norm(*v)).collect();
    let mut sorted = mags.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.is_empty() { 0.0 } else { sorted[sorted.len() / 2] };
    let cut = ACTIVE_FRACTION * median;
    mags.iter().map(|&m| m > 0.0 && m >= cut).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected gradient restricted to the free variables.
fn projected(g: &[f64], r: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    g.iter()
        .zip(r)
        .map(|(&gi, &ri)| if (ri <= lo && gi > 0.0) || (ri >= hi && gi < 0.0) { 0.0 } else { gi })
        .collect()
}

/// Active-set conjugate gradients, Jacobi preconditioned, with exact line
/// search on the box `[lambda, 1/lambda]`. The objective is quadratic, so
/// every accepted step lowers it.
pub fn recover_resistivity(j: &VectorField, g: &VectorField, cfg: &ResistivityConfig) -> Result<ResistivityEstimate> {
    if !(cfg.lambda > 0.0 && cfg.lambda < 1.0) {
        return Err(Error::InvalidArgument(format!("lambda {} outside (0, 1)", cfg.lambda)));
    }
    if j.values.iter().chain(&g.values).flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("stage-3 input"));
    }
    let alpha = cfg.alpha * ResistivityProblem::current_scale(j);
    let prob = ResistivityProblem::new(j, g, alpha)?;
    let (lo, hi) = (cfg.lambda, 1.0 / cfg.lambda);
    let n = j.grid.len();
    let diag = prob.hessian_diagonal();
    let floor = 1e-12 * diag.iter().cloned().fold(0.0, f64::max);
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|&v| if v > floor { 1.0 / v } else if floor > 0.0 { 1.0 / floor } else { 1.0 })
        .collect();
    let precondition = |p: &[f64]| -> Vec<f64> { p.iter().zip(&inv_diag).map(|(a, b)| a * b).collect() };

    let mut r = vec![cfg.r0.clamp(lo, hi); n];
    let mut history = vec![prob.objective(&r)];
    let mut grad = prob.gradient(&r);
    let mut pg = projected(&grad, &r, lo, hi);
    let pg0 = dot(&pg, &pg).sqrt();
    let scale = pg0.max(dot(&grad, &grad).sqrt()).max(f64::MIN_POSITIVE);
    let mut z = precondition(&pg);
    let mut d: Vec<f64> = z.iter().map(|v| -v).collect();
    let mut gamma = dot(&pg, &z);
    let mut converged = pg0 <= cfg.tol * scale || pg0 == 0.0;
    let mut iterations = 0;
    while !converged && iterations < cfg.max_iter {
        iterations += 1;
        if dot(&grad, &d) >= 0.0 {
            d = z.iter().map(|v| -v).collect();
        }
        let slope = dot(&grad, &d);
        let curv = prob.curvature(&d);
        if curv <= 0.0 || slope >= 0.0 {
            break;
        }
        let t_opt = -slope / curv;
        let mut t_max = f64::INFINITY;
        for (ri, di) in r.iter().zip(&d) {
            if *di > 0.0 {
                t_max = t_max.min((hi - ri) / di);
            } else if *di < 0.0 {
                t_max = t_max.min((lo - ri) / di);
            }
        }
        let hit_bound = t_max < t_opt;
        let t = t_opt.min(t_max);
        for (ri, di) in r.iter_mut().zip(&d) {
            *ri = (*ri + t * di).clamp(lo, hi);
        }
        history.push(prob.objective(&r));
        grad = prob.gradient(&r);
        let pg_new = projected(&grad, &r, lo, hi);
        if dot(&pg_new, &pg_new).sqrt() <= cfg.tol * scale {
            converged = true;
        }
        let z_new = precondition(&pg_new);
        let gamma_new = dot(&pg_new, &z_new);
        let same_free = pg_new.iter().zip(&pg).all(|(a, b)| (*a == 0.0) == (*b == 0.0));
        if hit_bound || !same_free || gamma <= 0.0 {
            d = z_new.iter().map(|v| -v).collect();
        } else {
            let beta = gamma_new / gamma;
            for (di, zi) in d.iter_mut().zip(&z_new) {
                *di = -zi + beta * *di;
            }
        }
        pg = pg_new;
        z = z_new;
        gamma = gamma_new;
    }
    if !converged {
        log::warn!("resistivity solver stopped after {iterations} iterations");
    }
    let r = ScalarField { grid: j.grid, values: r };
    Ok(ResistivityEstimate {
        sigma: r.map(|v| 1.0 / v),
        r,
        objective_history: history,
        active: active_nodes(j),
        iterations,
        converged,
        projected_gradient: dot(&pg, &pg).sqrt() / scale,
    })
}

/// Least-squares constant `r` for `curl(r J) = G`.
pub fn best_constant_resistivity(j: &VectorField, g: &VectorField) -> Result<f64> {
    j.grid.ensure_same(&g.grid, "constant resistivity")?;
    let cj = discrete_curl(j);
    let w = DomainMask::full(j.grid).weights();
    let num: f64 = cj.values.iter().zip(&g.values).zip(&w).map(|((a, b), q)| q * math::dot(*a, *b)).sum();
    let den: f64 = cj.values.iter().zip(&w).map(|(a, q)| q * math::dot(*a, *a)).sum();
    if den == 0.0 {
        return Err(Error::InvalidArgument("curl J vanishes; r is not identifiable".into()));
    }
    Ok(num / den)
}

/// `sum_q |a - b| / sum_q |b|` over the selected nodes.
pub fn relative_l1(a: &ScalarField, b: &ScalarField, select: &[bool]) -> f64 {
    let w = DomainMask::full(a.grid).weights();
    let mut num = 0.0;
    let mut den = 0.0;
    for n in 0..a.values.len() {
        if select[n] {
            num += w[n] * (a.values[n] - b.values[n]).abs();
            den += w[n] * b.values[n].abs();
        }
    }
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OverdeterminationReport {
    /// Numerical rank (0..=3) of the local map from neighbouring `r` values
    /// to the curl equations at each node.
    pub local_rank: Vec<u8>,
    /// Rank at least 2 and `|J|` above the active threshold.
    pub informative: Vec<bool>,
    pub rank_counts: [usize; 4],
    pub informative_fraction: f64,
    pub equations: usize,
    pub unknowns: usize,
}

/// Eigenvalues of a symmetric 3x3 matrix, ascending.
fn sym3_eigenvalues(a: [[f64; 3]; 3]) -> [f64; 3] {
    let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    if p1 == 0.0 {
        let mut e = [a[0][0], a[1][1], a[2][2]];
        e.sort_by(f64::total_cmp);
        return e;
    }
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = a;
    for (i, row) in b.iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = (a[i][k] - if i == k { q } else { 0.0 }) / p;
        }
    }
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let e2 = 3.0 * q - e1 - e3;
    let mut e = [e1, e2, e3];
    e.sort_by(f64::total_cmp);
    e
}

/// Local identifiability of `r`: at each node the three curl rows involve
/// `r` at the six axis neighbours through the columns `+-e_a x J / 2h`.
pub fn overdetermination_report(j: &VectorField, g: &VectorField) -> Result<OverdeterminationReport> {
    j.grid.ensure_same(&g.grid, "overdetermination report")?;
    let grid = j.grid;
    let max_j = j.max_norm();
    let active = active_nodes(j);
    let n = grid.len();
    let mut local_rank = vec![0u8; n];
    let tol = 1e-6 * max_j * max_j;
    let axes = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for (idx, rank) in local_rank.iter_mut().enumerate() {
        if max_j == 0.0 {
            break;
        }
        let c = grid.coords(idx);
        let mut m = [[0.0; 3]; 3];
        for a in 0..3 {
            for step in [-1i64, 1] {
                let ca = c[a] as i64 + step;
                if ca < 0 || ca >= grid.dims[a] as i64 {
                    continue;
                }
                let mut cc = c;
                cc[a] = ca as usize;
                let col = math::cross(axes[a], j.values[grid.index(cc[0], cc[1], cc[2])]);
                for (r, row) in m.iter_mut().enumerate() {
                    for (k, v) in row.iter_mut().enumerate() {
                        *v += col[r] * col[k];
                    }
                }
            }
        }
        *rank = sym3_eigenvalues(m).iter().filter(|&&e| e > tol).count() as u8;
    }
    let informative: Vec<bool> = local_rank.iter().zip(&active).map(|(&r, &a)| a && r >= 2).collect();
    let mut rank_counts = [0; 4];
    for &r in &local_rank {
        rank_counts[r as usize] += 1;
    }
    Ok(OverdeterminationReport {
        informative_fraction: informative.iter().filter(|&&b| b).count() as f64 / n as f64,
        informative,
        local_rank,
        rank_counts,
        equations: 3 * n,
        unknowns: n,
    })
}

/// Per-coil conductivities averaged with weights `|J_L|^2`; nodes where all
/// currents vanish keep the plain mean.
pub fn fuse_estimates(estimates: &[(&ScalarField, &VectorField)]) -> Result<ScalarField> {
    let Some((first, _)) = estimates.first() else {
        return Err(Error::InvalidArgument("no estimates to fuse".into()));
    };
    let grid = first.grid;
    for (s, j) in estimates {
        grid.ensure_same(&s.grid, "fusion")?;
        grid.ensure_same(&j.grid, "fusion")?;
    }
    let values = (0..grid.len())
        .map(|n| {
            let (mut num, mut den, mut plain) = (0.0, 0.0, 0.0);
            for (s, j) in estimates {
                let w = math::dot(j.values[n], j.values[n]);
                num += w * s.values[n];
                den += w;
                plain += s.values[n];
            }
            if den > 0.0 {
                num / den
            } else {
                plain / estimates.len() as f64
            }
        })
        .collect();
    Ok(ScalarField { grid, values })
}
