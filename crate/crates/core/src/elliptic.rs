//! Variable-coefficient Neumann problems
//! `div(sigma grad w) = div(sigma F)` in the box, `d_nu w = F . nu` on its
//! boundary, solved in weak form.
//!
//! The discretisation is a vertex-centred finite-volume scheme on the dual
//! cells of the node grid. Each grid edge `e = (p, q)` carries the harmonic
//! mean `sigma_e` of its end values and the dual face area `A_e` (halved once
//! for every transverse boundary the edge lies on). The bilinear form is
//!
//! `a(w, phi) = sum_e sigma_e A_e / h (w_q - w_p)(phi_q - phi_p)`
//!
//! and the load is `l(phi) = sum_e sigma_e A_e Fbar_e (phi_q - phi_p)` with
//! `Fbar_e` the edge component of `F` averaged over the two ends. Both are
//! exact for quadratic potentials, and the load sums to zero by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{discrete_grad, norm_vector, DomainMask, Grid3, NormKind, ScalarField, VectorField};
use crate::math;

/// Admissible conductivity: `lambda <= sigma <= 1/lambda` and the discrete
/// `W^{1,inf}` norm bounded by `big_lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conductivity {
    pub sigma: ScalarField,
    pub lambda: f64,
    pub big_lambda: f64,
}

impl Conductivity {
    pub fn new(sigma: ScalarField, lambda: f64, big_lambda: f64) -> Result<Self> {
        let c = Self {
            sigma,
            lambda,
            big_lambda,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn constant(grid: Grid3, value: f64, lambda: f64, big_lambda: f64) -> Result<Self> {
        Self::new(ScalarField::constant(grid, value), lambda, big_lambda)
    }

    pub fn grid(&self) -> Grid3 {
        self.sigma.grid
    }

    /// `max(|sigma|_inf, |grad sigma|_inf)`.
    pub fn w1inf_norm(&self) -> f64 {
        self.sigma.max_abs().max(discrete_grad(&self.sigma).max_norm())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::NotAdmissible(format!("lambda {} outside (0, 1)", self.lambda)));
        }
        if !(self.big_lambda > 1.0) {
            return Err(Error::NotAdmissible(format!("Lambda {} must exceed 1", self.big_lambda)));
        }
        if self.sigma.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conductivity"));
        }
        let (lo, hi) = self
            .sigma
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let (l, u) = (self.lambda, 1.0 / self.lambda);
        if lo < l * (1.0 - 1e-12) || hi > u * (1.0 + 1e-12) {
            return Err(Error::NotAdmissible(format!(
                "sigma range [{lo:.6}, {hi:.6}] leaves [{l:.6}, {u:.6}]"
            )));
        }
        let w = self.w1inf_norm();
        if w > self.big_lambda * (1.0 + 1e-12) {
            return Err(Error::NotAdmissible(format!(
                "W1,inf norm {w:.6} exceeds Lambda = {}",
                self.big_lambda
            )));
        }
        Ok(())
    }

    /// Resistivity `1 / sigma`.
    pub fn resistivity(&self) -> ScalarField {
        self.sigma.map(|s| 1.0 / s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative residual target, measured in the Jacobi-preconditioned norm.
    pub tol: f64,
    /// `None` means `1000 * N^(1/3)`.
    pub max_iter: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: None,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, max_iter: None }
    }
}

#[derive(Debug, Clone)]
pub struct PotentialSolution {
    /// Normalised to zero weighted mean over the box.
    pub w: ScalarField,
    pub grad_w: VectorField,
    pub iterations: usize,
    pub residual: f64,
}

/// Assembled edge coefficients for one conductivity.
#[derive(Debug, Clone)]
pub struct NeumannOperator {
    grid: Grid3,
    /// `sigma_e A_e` for the edge from each node to its `+e_d` neighbour
    /// (zero on the last layer).
    flux: [Vec<f64>; 3],
    diag: Vec<f64>,
    mask: DomainMask,
    weights: Vec<f64>,
}

impl NeumannOperator {
    pub fn new(sigma: &ScalarField) -> Self {
        let g = sigma.grid;
        let h = g.spacing;
        let n = g.len();
        let mut flux = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (d, fd) in flux.iter_mut().enumerate() {
            let stride = [1, g.dims[0], g.dims[0] * g.dims[1]][d];
            for p in 0..n {
                let c = g.coords(p);
                if c[d] + 1 >= g.dims[d] {
                    continue;
                }
                let q = p + stride;
                let (a, b) = (sigma.values[p], sigma.values[q]);
                let se = 2.0 * a * b / (a + b);
                let mut area = h * h;
                for t in (0..3).filter(|&t| t != d) {
                    if c[t] == 0 || c[t] + 1 == g.dims[t] {
                        area *= 0.5;
                    }
                }
                fd[p] = se * area;
            }
        }
        let mut diag = vec![0.0; n];
        for (d, fd) in flux.iter().enumerate() {
            let stride = [1, g.dims[0], g.dims[0] * g.dims[1]][d];
            for p in 0..n {
                if fd[p] != 0.0 {
                    diag[p] += fd[p] / h;
                    diag[p + stride] += fd[p] / h;
                }
            }
        }
        let mask = DomainMask::full(g);
        Self {
            grid: g,
            flux,
            diag,
            weights: mask.weights(),
            mask,
        }
    }

    pub fn grid(&self) -> Grid3 {
        self.grid
    }

    /// `out = A w`.
    pub fn apply(&self, w: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        let inv_h = 1.0 / g.spacing;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (d, fd) in self.flux.iter().enumerate() {
            let stride = [1, g.dims[0], g.dims[0] * g.dims[1]][d];
            let n = g.len() - stride;
            for p in 0..n {
                let f = fd[p];
                if f == 0.0 {
                    continue;
                }
                let t = f * inv_h * (w[p + stride] - w[p]);
                out[p] -= t;
                out[p + stride] += t;
            }
        }
    }

    /// Load vector of `phi -> int sigma F . grad phi`.
    pub fn rhs(&self, f: &VectorField) -> Vec<f64> {
        let g = &self.grid;
        let mut b = vec![0.0; g.len()];
        for (d, fd) in self.flux.iter().enumerate() {
            let stride = [1, g.dims[0], g.dims[0] * g.dims[1]][d];
            for p in 0..g.len() - stride {
                let s = fd[p];
                if s == 0.0 {
                    continue;
                }
                let t = s * 0.5 * (f.values[p][d] + f.values[p + stride][d]);
                b[p] -= t;
                b[p + stride] += t;
            }
        }
        b
    }

    /// `b - A w`: the discrete current imbalance of each dual cell for
    /// `J = sigma (F - grad w)`.
    pub fn residual(&self, w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut aw = vec![0.0; w.len()];
        self.apply(w, &mut aw);
        aw.iter().zip(b).map(|(a, b)| b - a).collect()
    }

    fn weighted_mean(&self, w: &[f64]) -> f64 {
        let s: f64 = w.iter().zip(&self.weights).map(|(a, q)| a * q).sum();
        s / self.mask.volume()
    }

    /// Preconditioned conjugate gradients on the singular but consistent
    /// system `A w = b`.
    pub fn solve_rhs(&self, b: &[f64], opts: &SolverOptions) -> Result<(Vec<f64>, usize, f64)> {
        let n = b.len();
        let max_iter = opts
            .max_iter
            .unwrap_or_else(|| (1000.0 * (n as f64).cbrt()).ceil() as usize);
        let inv_diag: Vec<f64> = self
            .diag
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 })
            .collect();
        // Remove any round-off component along the constants.
        let mean_b = b.iter().sum::<f64>() / n as f64;
        let mut r: Vec<f64> = b.iter().map(|v| v - mean_b).collect();
        let bnorm = r.iter().zip(&inv_diag).map(|(a, m)| a * a * m).sum::<f64>().sqrt();
        let mut x = vec![0.0; n];
        if bnorm == 0.0 {
            return Ok((x, 0, 0.0));
        }
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, m)| a * m).collect();
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut ap = vec![0.0; n];
        let mut rel = 1.0;
        for it in 0..max_iter {
            self.apply(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
                z[i] = r[i] * inv_diag[i];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            rel = rz_new.max(0.0).sqrt() / bnorm;
            if rel <= opts.tol {
                let m = self.weighted_mean(&x);
                x.iter_mut().for_each(|v| *v -= m);
                return Ok((x, it + 1, rel));
            }
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        Err(Error::NotConverged {
            solver: "neumann pcg",
            iterations: max_iter,
            residual: rel,
        })
    }

    pub fn solve(&self, f: &VectorField, opts: &SolverOptions) -> Result<PotentialSolution> {
        self.grid.ensure_same(&f.grid, "neumann source")?;
        if f.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("neumann source"));
        }
        let b = self.rhs(f);
        let (w, iterations, residual) = self.solve_rhs(&b, opts)?;
        let w = ScalarField {
            grid: self.grid,
            values: w,
        };
        Ok(PotentialSolution {
            grad_w: discrete_grad(&w),
            w,
            iterations,
            residual,
        })
    }
}

/// Weak solution of `div(sigma grad w) = div(sigma F)` with flux data `F . nu`.
pub fn solve_neumann(cond: &Conductivity, f: &VectorField, opts: &SolverOptions) -> Result<PotentialSolution> {
    cond.validate()?;
    solve_neumann_field(&cond.sigma, f, opts)
}

/// As [`solve_neumann`] but only requires `sigma > 0`.
pub fn solve_neumann_field(sigma: &ScalarField, f: &VectorField, opts: &SolverOptions) -> Result<PotentialSolution> {
    if sigma.values.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::NotAdmissible("sigma must be positive and finite".into()));
    }
    sigma.grid.ensure_same(&f.grid, "solve_neumann")?;
    NeumannOperator::new(sigma).solve(f, opts)
}

/// `sigma (F - grad w)`.
pub fn total_current(sigma: &ScalarField, f: &VectorField, grad_w: &VectorField) -> VectorField {
    f.sub(grad_w).mul_scalar(sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub grad_w_l2: f64,
    pub f_l2: f64,
    pub lambda: f64,
    /// `lambda^-2 |F|`.
    pub bound: f64,
    /// Bound exceeded beyond 1 % slack.
    pub violated: bool,
}

/// `|grad w|_2 <= lambda^-2 |F|_2`.
pub fn energy_check(sol: &PotentialSolution, cond: &Conductivity, f: &VectorField) -> Result<EnergyReport> {
    let mask = DomainMask::full(cond.grid());
    let grad_w_l2 = norm_vector(&sol.grad_w, &mask, NormKind::L2)?;
    let f_l2 = norm_vector(f, &mask, NormKind::L2)?;
    let bound = f_l2 / (cond.lambda * cond.lambda);
    Ok(EnergyReport {
        grad_w_l2,
        f_l2,
        lambda: cond.lambda,
        bound,
        violated: grad_w_l2 > 1.01 * bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxReport {
    /// Net discrete current through the boundary (finite-volume balance).
    pub net_flux: f64,
    /// Face-weighted sum of nodal `J . nu`; converges to zero with `h`.
    pub nodal_flux: f64,
    /// Normalisation `|J|_2 * area(boundary)`.
    pub scale: f64,
}

/// Net outflow of `J = sigma (F - grad w)` through the box boundary.
pub fn boundary_flux(op: &NeumannOperator, f: &VectorField, w: &ScalarField, j: &VectorField) -> Result<FluxReport> {
    let mask = DomainMask::full(op.grid);
    let b = op.rhs(f);
    let res = op.residual(&w.values, &b);
    // With the weak Neumann condition the current through the exterior
    // faces of a boundary cell is exactly that cell's balance residual.
    let net_flux = mask.boundary_nodes().into_iter().map(|n| res[n]).sum::<f64>();
    let nodal_flux = mask
        .boundary_faces()
        .iter()
        .map(|face| face.area * math::dot(j.values[face.node], face.normal))
        .sum();
    Ok(FluxReport {
        net_flux,
        nodal_flux,
        scale: norm_vector(j, &mask, NormKind::L2)? * mask.boundary_area(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{discrete_grad, inner_scalar};
    use crate::math::Vec3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bump_sigma(g: Grid3) -> ScalarField {
        ScalarField::from_fn(g, |x| {
            let d = math::sub(x, [0.5, 0.45, 0.55]);
            1.0 + 0.5 * (-math::dot(d, d) / 0.02).exp()
        })
    }

    fn quad(x: Vec3) -> f64 {
        x[0] * x[0] - 0.5 * x[1] * x[2] + 0.3 * x[2] + x[0] * x[1]
    }

    fn quad_grad(x: Vec3) -> Vec3 {
        [2.0 * x[0] + x[1], -0.5 * x[2] + x[0], -0.5 * x[1] + 0.3]
    }

    #[test]
    fn gradient_data_is_reproduced_for_any_sigma() {
        let g = Grid3::unit_cube(12).unwrap();
        let f = VectorField::from_fn(g, quad_grad);
        let sol = solve_neumann_field(&bump_sigma(g), &f, &SolverOptions::with_tol(1e-13)).unwrap();
        let exact = ScalarField::from_fn(g, quad);
        let m = crate::grid::mean(&exact, &DomainMask::full(g));
        let err = sol
            .w
            .values
            .iter()
            .zip(&exact.values)
            .map(|(a, b)| (a - (b - m)).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10 * exact.max_abs(), "err {err}");
        assert!(sol.grad_w.sub(&f).max_norm() < 1e-9);
    }

    #[test]
    fn constant_field_gives_zero_current() {
        let g = Grid3::unit_cube(8).unwrap();
        let sigma = ScalarField::constant(g, 2.5);
        let f = VectorField::constant(g, [0.3, -1.0, 2.0]);
        let sol = solve_neumann_field(&sigma, &f, &SolverOptions::with_tol(1e-13)).unwrap();
        let j = total_current(&sigma, &f, &sol.grad_w);
        assert!(j.max_norm() < 1e-10);
    }

    #[test]
    fn solution_is_mean_zero() {
        let g = Grid3::unit_cube(10).unwrap();
        let f = VectorField::from_fn(g, |x| [-x[1], x[0], 0.0]);
        let sol = solve_neumann_field(&bump_sigma(g), &f, &SolverOptions::default()).unwrap();
        let m = crate::grid::mean(&sol.w, &DomainMask::full(g));
        assert!(m.abs() <= 1e-12 * sol.w.max_abs());
    }

    #[test]
    fn rhs_is_compatible_and_operator_symmetric() {
        let g = Grid3::new([7, 6, 5], [0.0; 3], 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma = ScalarField::from_values(g, (0..g.len()).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap();
        let op = NeumannOperator::new(&sigma);
        let f = VectorField::from_values(g, (0..g.len()).map(|_| [rng.random(), rng.random(), rng.random()]).collect())
            .unwrap();
        let b = op.rhs(&f);
        let bn = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(b.iter().sum::<f64>().abs() <= 1e-10 * bn);
        let u: Vec<f64> = (0..g.len()).map(|_| rng.random()).collect();
        let v: Vec<f64> = (0..g.len()).map(|_| rng.random()).collect();
        let (mut au, mut av) = (vec![0.0; g.len()], vec![0.0; g.len()]);
        op.apply(&u, &mut au);
        op.apply(&v, &mut av);
        let l: f64 = au.iter().zip(&v).map(|(a, b)| a * b).sum();
        let r: f64 = u.iter().zip(&av).map(|(a, b)| a * b).sum();
        assert!((l - r).abs() <= 1e-12 * l.abs());
    }

    #[test]
    fn rotational_source_converges_at_second_order() {
        let solve = |n: usize| {
            let g = Grid3::unit_cube(n).unwrap();
            let f = VectorField::from_fn(g, |x| [-x[1], x[0], 0.0]);
            solve_neumann_field(&bump_sigma(g), &f, &SolverOptions::with_tol(1e-12)).unwrap().w
        };
        let (a, b, c) = (solve(9), solve(17), solve(33));
        let diff = |coarse: &ScalarField, fine: &ScalarField| {
            let g = coarse.grid;
            let mut s: f64 = 0.0;
            for n in 0..g.len() {
                let [i, j, k] = g.coords(n);
                s = s.max((coarse.values[n] - fine.at(2 * i, 2 * j, 2 * k)).abs());
            }
            s
        };
        let order = (diff(&a, &b) / diff(&b, &c)).log2();
        assert!(order >= 1.8, "observed order {order}");
    }

    #[test]
    fn energy_bounds() {
        let g = Grid3::unit_cube(10).unwrap();
        let cond = Conductivity::new(bump_sigma(g), 0.5, 30.0).unwrap();
        let f = VectorField::from_fn(g, |x| [-x[1], x[0], x[2] * x[0]]);
        let sol = solve_neumann(&cond, &f, &SolverOptions::default()).unwrap();
        let rep = energy_check(&sol, &cond, &f).unwrap();
        assert!(!rep.violated && rep.grad_w_l2 <= rep.bound * 1.01);

        let zero = VectorField::zeros(g);
        let sol0 = solve_neumann(&cond, &zero, &SolverOptions::default()).unwrap();
        assert_eq!(sol0.grad_w.max_norm(), 0.0);

        // unit conductivity: grad w is (nearly) an orthogonal projection of F
        let unit = Conductivity::constant(g, 1.0, 0.999, 2.0).unwrap();
        let sol1 = solve_neumann(&unit, &f, &SolverOptions::default()).unwrap();
        let r = energy_check(&sol1, &unit, &f).unwrap();
        assert!(r.grad_w_l2 <= r.f_l2 * 1.01);
    }

    #[test]
    fn admissibility_is_checked() {
        let g = Grid3::unit_cube(6).unwrap();
        assert!(Conductivity::constant(g, 1.0, 0.5, 2.0).is_ok());
        assert!(Conductivity::constant(g, 2.5, 0.5, 3.0).is_err());
        assert!(Conductivity::constant(g, 1.0, 1.5, 2.0).is_err());
        let steep = ScalarField::from_fn(g, |x| 1.0 + 0.9 * x[0]);
        assert!(Conductivity::new(steep.clone(), 0.5, 1.5).is_err());
        assert!(Conductivity::new(steep, 0.5, 2.0).is_ok());
    }

    #[test]
    fn iteration_cap_is_reported() {
        let g = Grid3::unit_cube(10).unwrap();
        let f = VectorField::from_fn(g, |x| [-x[1], x[0], 0.0]);
        let opts = SolverOptions {
            tol: 1e-14,
            max_iter: Some(2),
        };
        assert!(matches!(
            solve_neumann_field(&bump_sigma(g), &f, &opts),
            Err(Error::NotConverged { .. })
        ));
    }

    #[test]
    fn fv_boundary_flux_vanishes() {
        let g = Grid3::unit_cube(12).unwrap();
        let sigma = bump_sigma(g);
        let f = VectorField::from_fn(g, |x| [-x[1], x[0], 0.0]);
        let op = NeumannOperator::new(&sigma);
        let sol = op.solve(&f, &SolverOptions::with_tol(1e-12)).unwrap();
        let j = total_current(&sigma, &f, &sol.grad_w);
        let rep = boundary_flux(&op, &f, &sol.w, &j).unwrap();
        assert!(rep.net_flux.abs() <= 1e-8 * rep.scale);
    }

    #[test]
    fn grad_of_quadratic_potential_is_its_gradient() {
        let g = Grid3::unit_cube(7).unwrap();
        let f = ScalarField::from_fn(g, quad);
        let d = discrete_grad(&f);
        for n in 0..g.len() {
            let e = quad_grad(g.point_of(n));
            assert!(math::norm(math::sub(d.values[n], e)) < 1e-12);
        }
        let one = ScalarField::constant(g, 1.0);
        assert!(inner_scalar(&one, &one, &DomainMask::full(g)) > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn sigma_scaling_leaves_w_unchanged(alpha in 0.2f64..5.0) {
            let g = Grid3::unit_cube(8).unwrap();
            let s = bump_sigma(g);
            let f = VectorField::from_fn(g, |x| [-x[1], x[0], 0.2]);
            let opts = SolverOptions::with_tol(1e-12);
            let a = solve_neumann_field(&s, &f, &opts).unwrap().w;
            let b = solve_neumann_field(&s.scaled(alpha), &f, &opts).unwrap().w;
            prop_assert!(a.sub(&b).max_abs() <= 1e-9 * a.max_abs());
        }

        #[test]
        fn solution_linear_in_source(c in -2.0f64..2.0) {
            let g = Grid3::unit_cube(8).unwrap();
            let s = bump_sigma(g);
            let f1 = VectorField::from_fn(g, |x| [-x[1], x[0], 0.0]);
            let f2 = VectorField::from_fn(g, |x| [x[2] * x[2], c, x[0]]);
            let opts = SolverOptions::with_tol(1e-12);
            let w1 = solve_neumann_field(&s, &f1, &opts).unwrap().w;
            let w2 = solve_neumann_field(&s, &f2, &opts).unwrap().w;
            let w12 = solve_neumann_field(&s, &f1.add(&f2), &opts).unwrap().w;
            prop_assert!(w12.sub(&w1.add(&w2)).max_abs() <= 1e-8 * w12.max_abs().max(1.0));
        }
    }
}
