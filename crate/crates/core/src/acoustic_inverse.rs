//! Stage 1: recover the initial acoustic state from emf traces by damped
//! least squares on the discretised spherical-mean operator, then assemble
//! the vector source from the per-`B0` scalar reconstructions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{MeasurementSet, SourceDistribution, SphereRule, SphericalMeanOperator};
use crate::grid::{diff_axis, Grid3, ScalarField, VectorField};
use crate::math::{self, Vec3};

/// Transducer layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    /// `count` golden-spiral points on a sphere.
    Sphere { center: Vec3, radius: f64, count: usize },
    /// `per_side^2` points on a square patch of the plane through `origin`.
    Plane {
        origin: Vec3,
        normal: Vec3,
        half_width: f64,
        per_side: usize,
    },
}

impl Geometry {
    pub fn centers(&self) -> Result<Vec<Vec3>> {
        match *self {
            Self::Sphere { center, radius, count } => {
                if count == 0 || !(radius > 0.0) {
                    return Err(Error::Geometry(format!("sphere of {count} points, radius {radius}")));
                }
                Ok(fibonacci_sphere(count)
                    .into_iter()
                    .map(|d| math::add(center, math::scale(d, radius)))
                    .collect())
            }
            Self::Plane {
                origin,
                normal,
                half_width,
                per_side,
            } => {
                if per_side < 2 || !(half_width > 0.0) {
                    return Err(Error::Geometry(format!("plane patch {per_side} x {half_width}")));
                }
                let n = math::normalize(normal);
                let (e1, e2) = math::orthonormal_frame(n);
                let step = 2.0 * half_width / (per_side - 1) as f64;
                let mut out = Vec::with_capacity(per_side * per_side);
                for b in 0..per_side {
                    for a in 0..per_side {
                        let u = -half_width + a as f64 * step;
                        let v = -half_width + b as f64 * step;
                        out.push(math::add(origin, math::add(math::scale(e1, u), math::scale(e2, v))));
                    }
                }
                Ok(out)
            }
        }
    }
}

/// `n` near-uniform unit vectors (golden spiral, pole `+e3`).
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;
    (0..n)
        .map(|i| {
            let mu = 1.0 - (2 * i + 1) as f64 / n as f64;
            let st = (1.0 - mu * mu).max(0.0).sqrt();
            let (s, c) = (i as f64 * GOLDEN_ANGLE).sin_cos();
            [st * c, st * s, mu]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InverseSourceConfig {
    /// Tikhonov weight relative to `|K|^2`.
    pub alpha_rel: f64,
    pub max_iter: usize,
    /// Relative norm of the regularised normal-equation residual.
    pub tol: f64,
    /// Sphere rule; `None` uses one point per `h^2`.
    pub rule: Option<SphereRule>,
}

impl Default for InverseSourceConfig {
    fn default() -> Self {
        Self {
            alpha_rel: 1e-6,
            max_iter: 300,
            tol: 1e-6,
            rule: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SourceEstimate {
    pub f: ScalarField,
    pub iterations: usize,
    pub converged: bool,
    /// `sqrt(|K f - m|^2 + alpha |f|^2)` after every iteration.
    pub residual_history: Vec<f64>,
    pub alpha: f64,
    pub norm_k_squared: f64,
    /// Fewer traces than half the unknowns.
    pub underdetermined: bool,
}

/// The stage-1 operator for a measurement set on the given unknown grid.
pub fn operator_for(set: &MeasurementSet, grid: Grid3, rule: Option<SphereRule>) -> Result<SphericalMeanOperator> {
    SphericalMeanOperator::new(
        grid,
        set.centers.clone(),
        set.times.clone(),
        set.sound_speed,
        rule.unwrap_or(SphereRule::Spacing(grid.spacing)),
    )
}

/// Traces `t mean_{S(y, ct)} f`.
pub fn forward_operator(f: &ScalarField, op: &SphericalMeanOperator) -> Result<Vec<f64>> {
    op.grid.ensure_same(&f.grid, "forward operator")?;
    Ok(op.apply(&f.values))
}

/// Largest eigenvalue of `K^T K` by power iteration from a fixed start.
pub fn estimate_norm_squared(op: &SphericalMeanOperator, iterations: usize) -> f64 {
    let mut x = vec![1.0 / (op.cols() as f64).sqrt(); op.cols()];
    let mut lambda = 0.0;
    for _ in 0..iterations.max(1) {
        let y = op.apply_transpose(&op.apply(&x));
        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        lambda = n;
        x = y.into_iter().map(|v| v / n).collect();
    }
    lambda
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// CGLS for `min |K f - m|^2 + alpha |f|^2`.
pub fn invert_source(set: &MeasurementSet, op: &SphericalMeanOperator, config: &InverseSourceConfig) -> Result<SourceEstimate> {
    if !(config.alpha_rel >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha {}", config.alpha_rel)));
    }
    let m = set.flat();
    if m.len() != op.rows() {
        return Err(Error::InvalidArgument(format!(
            "{} traces for an operator with {} rows",
            m.len(),
            op.rows()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("traces"));
    }
    let underdetermined = (m.len() as f64) < 0.5 * op.cols() as f64;
    if underdetermined {
        log::warn!(
            "stage 1 is underdetermined: {} traces for {} unknowns",
            m.len(),
            op.cols()
        );
    }
    let norm_k_squared = estimate_norm_squared(op, 12);
    let alpha = config.alpha_rel * norm_k_squared;
    let n = op.cols();
    let mut x = vec![0.0; n];
    let mut r = m.clone();
    let mut s = op.apply_transpose(&r);
    let s0 = dot(&s, &s).sqrt();
    let mut history = vec![dot(&r, &r).sqrt()];
    if s0 == 0.0 {
        return Ok(SourceEstimate {
            f: ScalarField::zeros(op.grid),
            iterations: 0,
            converged: true,
            residual_history: history,
            alpha,
            norm_k_squared,
            underdetermined,
        });
    }
    let mut p = s.clone();
    let mut gamma = dot(&s, &s);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..config.max_iter {
        let q = op.apply(&p);
        let delta = dot(&q, &q) + alpha * dot(&p, &p);
        if delta <= 0.0 {
            break;
        }
        let a = gamma / delta;
        for i in 0..n {
            x[i] += a * p[i];
        }
        for (ri, qi) in r.iter_mut().zip(&q) {
            *ri -= a * qi;
        }
        s = op.apply_transpose(&r);
        for i in 0..n {
            s[i] -= alpha * x[i];
        }
        let gamma_new = dot(&s, &s);
        history.push((dot(&r, &r) + alpha * dot(&x, &x)).sqrt());
        iterations = it + 1;
        if gamma_new.sqrt() <= config.tol * s0 {
            converged = true;
            break;
        }
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        for i in 0..n {
            p[i] = s[i] + beta * p[i];
        }
    }
    Ok(SourceEstimate {
        f: ScalarField {
            grid: op.grid,
            values: x,
        },
        iterations,
        converged,
        residual_history: history,
        alpha,
        norm_k_squared,
        underdetermined,
    })
}

/// Adds `level * rms(traces)` white Gaussian noise.
pub fn add_noise(set: &MeasurementSet, level: f64, seed: u64) -> MeasurementSet {
    let flat = set.flat();
    let rms = (flat.iter().map(|v| v * v).sum::<f64>() / flat.len().max(1) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<f64> = flat
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + level * rms * z
        })
        .collect();
    let mut out = set.clone();
    out.set_flat(&noisy);
    out
}

/// Builds `W` with `W_i = rho f_i`, where `f_i` was recovered with
/// `B0 = e_i`. One missing component is completed from `div W = 0` by
/// integrating along its axis from the low face of the padded grid.
pub fn combine_b0(
    components: [Option<&ScalarField>; 3],
    rho: f64,
    inner: Grid3,
    eps: f64,
) -> Result<SourceDistribution> {
    let present: Vec<usize> = (0..3).filter(|&i| components[i].is_some()).collect();
    if present.len() < 2 {
        return Err(Error::InvalidArgument(
            "at least two field directions are needed".into(),
        ));
    }
    let grid = components[present[0]].expect("present").grid;
    for &i in &present {
        grid.ensure_same(&components[i].expect("present").grid, "combine_b0")?;
    }
    let margin = grid.offset_of(&inner)?;
    let mut comp: [Vec<f64>; 3] = [vec![0.0; grid.len()], vec![0.0; grid.len()], vec![0.0; grid.len()]];
    for &i in &present {
        comp[i] = components[i].expect("present").values.iter().map(|v| rho * v).collect();
    }
    if present.len() == 2 {
        let missing = (0..3).find(|i| !present.contains(i)).expect("one missing");
        let mut rate = vec![0.0; grid.len()];
        for &i in &present {
            for (r, d) in rate.iter_mut().zip(diff_axis(&comp[i], &grid, i)) {
                *r -= d;
            }
        }
        let stride = [1, grid.dims[0], grid.dims[0] * grid.dims[1]][missing];
        let h = grid.spacing;
        for start in 0..grid.len() {
            if grid.coords(start)[missing] != 0 {
                continue;
            }
            let mut acc = 0.0;
            comp[missing][start] = 0.0;
            for m in 1..grid.dims[missing] {
                let (a, b) = (start + (m - 1) * stride, start + m * stride);
                acc += 0.5 * h * (rate[a] + rate[b]);
                comp[missing][b] = acc;
            }
        }
    }
    let values = (0..grid.len()).map(|n| [comp[0][n], comp[1][n], comp[2][n]]).collect();
    Ok(SourceDistribution {
        w: VectorField { grid, values },
        inner,
        eps,
        margin: margin[0],
    })
}

/// Relative L2 error of `estimate` against `truth` on the same grid.
pub fn relative_l2(estimate: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = truth.iter().map(|b| b * b).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{covering_times, MeasurementSet};
    use proptest::prelude::*;
    use rand::Rng;

    fn small_problem(n: usize, centers: usize, times: usize) -> (SphericalMeanOperator, MeasurementSet) {
        let g = Grid3::cube([-0.5; 3], 1.0, n).unwrap();
        let geo = Geometry::Sphere {
            center: [0.0; 3],
            radius: 1.5,
            count: centers,
        };
        let c = geo.centers().unwrap();
        let t = covering_times(&g, &c, 0.05, 1.0, times);
        let set = MeasurementSet::zeros(c, t, 0.05, [1.0, 0.0, 0.0], 1.0, 1.0);
        let op = operator_for(&set, g, None).unwrap();
        (op, set)
    }

    #[test]
    fn zero_traces_give_zero_field() {
        let (op, set) = small_problem(9, 8, 12);
        let est = invert_source(&set, &op, &InverseSourceConfig::default()).unwrap();
        assert_eq!(est.f.max_abs(), 0.0);
        assert!(est.converged);
    }

    #[test]
    fn forward_operator_is_linear_and_zero_preserving() {
        let (op, _) = small_problem(9, 6, 10);
        let g = op.grid;
        assert!(forward_operator(&ScalarField::zeros(g), &op).unwrap().iter().all(|&v| v == 0.0));
        let f1 = ScalarField::from_fn(g, |x| x[0] * x[1] + 1.0);
        let f2 = ScalarField::from_fn(g, |x| (3.0 * x[2]).cos());
        let a = forward_operator(&f1, &op).unwrap();
        let b = forward_operator(&f2, &op).unwrap();
        let ab = forward_operator(&f1.add(&f2), &op).unwrap();
        for i in 0..a.len() {
            assert!((a[i] + b[i] - ab[i]).abs() <= 1e-12 * (1.0 + ab[i].abs()));
        }
    }

    #[test]
    fn adjoint_test() {
        let (op, _) = small_problem(11, 10, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f: Vec<f64> = (0..op.cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m: Vec<f64> = (0..op.rows()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l = dot(&op.apply(&f), &m);
        let r = dot(&f, &op.apply_transpose(&m));
        assert!((l - r).abs() <= 1e-10 * l.abs());
    }

    #[test]
    fn residual_is_monotone_and_fit_improves() {
        let (op, mut set) = small_problem(11, 24, 30);
        let truth = ScalarField::from_fn(op.grid, |x| (-math::dot(x, x) / 0.05).exp());
        set.set_flat(&op.apply(&truth.values));
        let est = invert_source(&set, &op, &InverseSourceConfig { max_iter: 60, ..Default::default() }).unwrap();
        assert!(est.residual_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        let err = relative_l2(&est.f.values, &truth.values);
        assert!(err < 0.6, "relative error {err}");
    }

    #[test]
    fn underdetermined_is_flagged() {
        let (op, set) = small_problem(13, 4, 10);
        let est = invert_source(&set, &op, &InverseSourceConfig::default()).unwrap();
        assert!(est.underdetermined);
    }

    #[test]
    fn plane_geometry_layout() {
        let geo = Geometry::Plane {
            origin: [0.0, 0.0, 2.0],
            normal: [0.0, 0.0, 1.0],
            half_width: 1.0,
            per_side: 5,
        };
        let c = geo.centers().unwrap();
        assert_eq!(c.len(), 25);
        assert!(c.iter().all(|p| (p[2] - 2.0).abs() < 1e-15));
    }

    #[test]
    fn combine_zero_and_rho_scaling() {
        let inner = Grid3::unit_cube(9).unwrap();
        let pad = inner.padded(4);
        let z = ScalarField::zeros(pad);
        let w = combine_b0([Some(&z), Some(&z), Some(&z)], 1.0, inner, 0.1).unwrap();
        assert_eq!(w.w.max_norm(), 0.0);
        let f = ScalarField::from_fn(pad, |x| x[0] - x[2]);
        let w1 = combine_b0([Some(&f), Some(&z), Some(&f)], 1.0, inner, 0.1).unwrap();
        let w2 = combine_b0([Some(&f), Some(&z), Some(&f)], 2.0, inner, 0.1).unwrap();
        assert!(w1.w.scaled(2.0).sub(&w2.w).max_norm() == 0.0);
    }

    fn two_direction_error(n: usize) -> f64 {
        // Analytic solenoidal field: curl of (0, chi, psi) with Gaussians.
        let inner = Grid3::cube([-0.5; 3], 1.0, n).unwrap();
        let pad = inner.padded(4);
        let (a, b, c) = (0.02, 0.015, [0.08, 0.0, -0.05]);
        let w_of = |x: Vec3| {
            let psi = (-math::dot(x, x) / a).exp();
            let y = math::sub(x, c);
            let chi = (-math::dot(y, y) / b).exp();
            let dpsi = math::scale(x, -2.0 * psi / a);
            let dchi = math::scale(y, -2.0 * chi / b);
            [dpsi[1] - dchi[2], -dpsi[0], dchi[0]]
        };
        let comps: Vec<ScalarField> = (0..3).map(|i| ScalarField::from_fn(pad, |x| w_of(x)[i])).collect();
        let full = combine_b0([Some(&comps[0]), Some(&comps[1]), Some(&comps[2])], 1.0, inner, 0.1).unwrap();
        let two = combine_b0([Some(&comps[0]), Some(&comps[1]), None], 1.0, inner, 0.1).unwrap();
        let num: f64 = full.w.sub(&two.w).values.iter().map(|v| math::dot(*v, *v)).sum();
        let den: f64 = full.w.values.iter().map(|v| math::dot(*v, *v)).sum();
        (num / den).sqrt()
    }

    #[test]
    fn two_direction_mode_converges() {
        let (e1, e2) = (two_direction_error(17), two_direction_error(33));
        assert!(e2 < 0.06, "{e2}");
        assert!(e1 / e2 > 3.0, "{e1} {e2}");
    }

    #[test]
    fn noise_is_reproducible() {
        let (_, mut set) = small_problem(9, 3, 5);
        set.set_flat(&(0..15).map(|i| i as f64).collect::<Vec<_>>());
        let a = add_noise(&set, 0.01, 9);
        let b = add_noise(&set, 0.01, 9);
        assert_eq!(a, b);
        assert_ne!(a, set);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]

        #[test]
        fn fibonacci_points_are_unit(n in 1usize..500) {
            for p in fibonacci_sphere(n) {
                prop_assert!((math::norm(p) - 1.0).abs() < 1e-14);
            }
        }
    }
}
