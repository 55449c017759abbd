//! Stage 2: `J = curl (N * W)` with `N(x) = 1 / (4 pi |x|)`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::SourceDistribution;
use crate::grid::{discrete_curl, discrete_div, discrete_grad, norm_vector, DomainMask, Grid3, NormKind, VectorField};
use crate::math::{self, Vec3};

/// Fraction of `|W|` in the outer node layer above which the padding is
/// reported as too small.
pub const EDGE_TOLERANCE: f64 = 0.01;

/// Mean of `1/|x|` over the unit cube centred at the origin, times its volume.
pub fn unit_cube_inverse_distance() -> f64 {
    3.0 * (2.0 + 3f64.sqrt()).ln() - PI / 2.0
}

fn fast_len(min: usize) -> usize {
    let mut n = min.max(1);
    loop {
        let mut m = n;
        for p in [2, 3, 5] {
            while m % p == 0 {
                m /= p;
            }
        }
        if m == 1 {
            return n;
        }
        n += 1;
    }
}

struct Fft3 {
    dims: [usize; 3],
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
}

impl Fft3 {
    fn new(dims: [usize; 3]) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            dims,
            forward: dims.map(|n| planner.plan_fft_forward(n)),
            inverse: dims.map(|n| planner.plan_fft_inverse(n)),
        }
    }

    fn len(&self) -> usize {
        self.dims.iter().product()
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let plans = if inverse { &self.inverse } else { &self.forward };
        let [n0, n1, n2] = self.dims;
        plans[0].process(data);
        let mut line = vec![Complex64::default(); n1.max(n2)];
        for k in 0..n2 {
            for i in 0..n0 {
                for j in 0..n1 {
                    line[j] = data[i + n0 * (j + n1 * k)];
                }
                plans[1].process(&mut line[..n1]);
                for j in 0..n1 {
                    data[i + n0 * (j + n1 * k)] = line[j];
                }
            }
        }
        for j in 0..n1 {
            for i in 0..n0 {
                for k in 0..n2 {
                    line[k] = data[i + n0 * (j + n1 * k)];
                }
                plans[2].process(&mut line[..n2]);
                for k in 0..n2 {
                    data[i + n0 * (j + n1 * k)] = line[k];
                }
            }
        }
    }
}

/// Free-space convolution with the Newtonian kernel on a fixed grid, using
/// zero padding so that the circular product equals the linear one.
pub struct NewtonianKernel {
    grid: Grid3,
    fft: Fft3,
    kernel_hat: Vec<Complex64>,
}

impl NewtonianKernel {
    pub fn new(grid: Grid3) -> Self {
        let h = grid.spacing;
        let fdims = grid.dims.map(|m| fast_len(2 * m - 1));
        let fft = Fft3::new(fdims);
        let mut kernel = vec![Complex64::default(); fft.len()];
        let self_weight = h * h * unit_cube_inverse_distance() / (4.0 * PI);
        let h3 = h * h * h;
        let signed = |i: usize, n: usize, m: usize| -> Option<i64> {
            if i < m {
                Some(i as i64)
            } else if i + m > n {
                Some(i as i64 - n as i64)
            } else {
                None
            }
        };
        for k in 0..fdims[2] {
            let Some(dk) = signed(k, fdims[2], grid.dims[2]) else { continue };
            for j in 0..fdims[1] {
                let Some(dj) = signed(j, fdims[1], grid.dims[1]) else { continue };
                for i in 0..fdims[0] {
                    let Some(di) = signed(i, fdims[0], grid.dims[0]) else { continue };
                    let r2 = (di * di + dj * dj + dk * dk) as f64;
                    let v = if r2 == 0.0 {
                        self_weight
                    } else {
                        h3 / (4.0 * PI * h * r2.sqrt())
                    };
                    kernel[i + fdims[0] * (j + fdims[1] * k)] = Complex64::new(v, 0.0);
                }
            }
        }
        fft.run(&mut kernel, false);
        Self {
            grid,
            fft,
            kernel_hat: kernel,
        }
    }

    pub fn grid(&self) -> Grid3 {
        self.grid
    }

    /// `sum_y K(x - y) f(y)` for every node `x`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let [m0, m1, m2] = self.grid.dims;
        let [n0, n1, _] = self.fft.dims;
        let mut buf = vec![Complex64::default(); self.fft.len()];
        for k in 0..m2 {
            for j in 0..m1 {
                for i in 0..m0 {
                    buf[i + n0 * (j + n1 * k)] = Complex64::new(f[i + m0 * (j + m1 * k)], 0.0);
                }
            }
        }
        self.fft.run(&mut buf, false);
        for (b, k) in buf.iter_mut().zip(&self.kernel_hat) {
            *b *= k;
        }
        self.fft.run(&mut buf, true);
        let scale = 1.0 / self.fft.len() as f64;
        let mut out = vec![0.0; self.grid.len()];
        for k in 0..m2 {
            for j in 0..m1 {
                for i in 0..m0 {
                    out[i + m0 * (j + m1 * k)] = buf[i + n0 * (j + n1 * k)].re * scale;
                }
            }
        }
        out
    }

    pub fn apply_vector(&self, w: &VectorField) -> Result<VectorField> {
        self.grid.ensure_same(&w.grid, "Newtonian potential")?;
        let comps: Vec<Vec<f64>> = (0..3).map(|d| self.apply(&w.component(d).values)).collect();
        Ok(VectorField {
            grid: self.grid,
            values: (0..self.grid.len())
                .map(|n| [comps[0][n], comps[1][n], comps[2][n]])
                .collect(),
        })
    }
}

/// Newtonian potential of `W` by direct summation at the given nodes
/// (same kernel and self-cell weight as the FFT path).
pub fn potential_direct(w: &VectorField, nodes: &[usize]) -> Vec<Vec3> {
    let g = w.grid;
    let h = g.spacing;
    let self_weight = h * h * unit_cube_inverse_distance() / (4.0 * PI);
    nodes
        .iter()
        .map(|&x| {
            let px = g.point_of(x);
            let mut acc = [0.0; 3];
            for (y, v) in w.values.iter().enumerate() {
                let k = if y == x {
                    self_weight
                } else {
                    h * h * h / (4.0 * PI * math::norm(math::sub(px, g.point_of(y))))
                };
                acc = math::add(acc, math::scale(*v, k));
            }
            acc
        })
        .collect()
}

/// `J(x) = -sum_y h^3 (x - y) x W(y) / (4 pi |x - y|^3)`: curl of the
/// potential taken analytically inside the sum.
pub fn current_direct(w: &VectorField, points: &[Vec3]) -> Vec<Vec3> {
    let g = w.grid;
    let h3 = g.spacing.powi(3);
    points
        .iter()
        .map(|&x| {
            let mut acc = [0.0; 3];
            for (y, v) in w.values.iter().enumerate() {
                let d = math::sub(x, g.point_of(y));
                let r = math::norm(d);
                if r < 1e-12 * g.spacing {
                    continue;
                }
                acc = math::sub(acc, math::scale(math::cross(d, *v), h3 / (4.0 * PI * r * r * r)));
            }
            acc
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct DivergenceReport {
    pub grad_div_norm: f64,
    pub curl_curl_norm: f64,
    /// `|grad div Phi| / |curl curl Phi|` on the conductor; 0 when both vanish.
    pub ratio: f64,
}

/// Measures the gradient-of-divergence term that must vanish for
/// admissible `W`.
pub fn potential_divergence_check(phi: &VectorField, inner: &Grid3) -> Result<DivergenceReport> {
    let off = phi.grid.offset_of(inner)?;
    let hi = [0, 1, 2].map(|d| off[d] + inner.dims[d] - 1);
    let mask = DomainMask::sub_box(phi.grid, off, hi)?;
    let gd = discrete_grad(&discrete_div(phi));
    let cc = discrete_curl(&discrete_curl(phi));
    let a = norm_vector(&gd, &mask, NormKind::L2)?;
    let b = norm_vector(&cc, &mask, NormKind::L2)?;
    let ratio = if b > 0.0 {
        a / b
    } else if a > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(DivergenceReport {
        grad_div_norm: a,
        curl_curl_norm: b,
        ratio,
    })
}

#[derive(Debug, Clone)]
pub struct RecoveredCurrent {
    /// Current on the conductor grid.
    pub j: VectorField,
    /// Potential on the padded grid.
    pub potential: VectorField,
    pub divergence: DivergenceReport,
    pub edge_fraction: f64,
    /// Set when the source reaches the padded boundary.
    pub padding_too_small: bool,
}

pub fn recover_current(source: &SourceDistribution) -> Result<RecoveredCurrent> {
    if source.w.values.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
        return Err(Error::NonFinite("source distribution"));
    }
    let kernel = NewtonianKernel::new(source.w.grid);
    recover_current_with(&kernel, source)
}

/// As [`recover_current`] with a precomputed kernel.
pub fn recover_current_with(kernel: &NewtonianKernel, source: &SourceDistribution) -> Result<RecoveredCurrent> {
    let phi = kernel.apply_vector(&source.w)?;
    let j = discrete_curl(&phi).restrict(&source.inner)?;
    let divergence = potential_divergence_check(&phi, &source.inner)?;
    let edge_fraction = source.edge_fraction();
    let padding_too_small = edge_fraction > EDGE_TOLERANCE;
    if padding_too_small {
        log::warn!("source carries {:.2}% of its norm on the padded boundary", 100.0 * edge_fraction);
    }
    Ok(RecoveredCurrent {
        j,
        potential: phi,
        divergence,
        edge_fraction,
        padding_too_small,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::mollified_source;
    use crate::grid::ScalarField;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `curl(psi e3)` for `psi = (1 - |x - c|^2 / a^2)^4` inside the ball.
    pub(crate) fn bump_curl(x: Vec3, c: Vec3, a: f64) -> Vec3 {
        let d = math::sub(x, c);
        let s = math::dot(d, d) / (a * a);
        if s >= 1.0 {
            return [0.0; 3];
        }
        let dpsi = -8.0 * (1.0 - s).powi(3) / (a * a);
        [dpsi * d[1], -dpsi * d[0], 0.0]
    }

    fn rel(a: &VectorField, b: &VectorField) -> f64 {
        let num: f64 = a.sub(b).values.iter().map(|v| math::dot(*v, *v)).sum();
        let den: f64 = b.values.iter().map(|v| math::dot(*v, *v)).sum();
        (num / den).sqrt()
    }

    #[test]
    fn cube_integral_constant() {
        assert!((unit_cube_inverse_distance() - 2.380_077_363_979_553).abs() < 1e-14);
    }

    #[test]
    fn fft_matches_direct_sum() {
        let g = Grid3::new([7, 6, 5], [0.0; 3], 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values = (0..g.len())
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.5])
            .collect();
        let w = VectorField::from_values(g, values).unwrap();
        let phi = NewtonianKernel::new(g).apply_vector(&w).unwrap();
        let nodes = [0, 17, 100, g.len() - 1];
        for (n, d) in nodes.iter().zip(potential_direct(&w, &nodes)) {
            for c in 0..3 {
                assert!((phi.values[*n][c] - d[c]).abs() < 1e-12, "{n} {c}");
            }
        }
    }

    #[test]
    fn poisson_on_smooth_density() {
        // Gaussian density: -Laplace Phi = W where Phi is known in closed form.
        let g = Grid3::cube([-1.0; 3], 2.0, 33).unwrap();
        let s: f64 = 0.15;
        let rho = |r: f64| (-r * r / (2.0 * s * s)).exp() / (2.0 * PI * s * s).powf(1.5);
        let exact = |r: f64| {
            if r < 1e-12 {
                1.0 / (4.0 * PI) * (2.0 / PI).sqrt() / s
            } else {
                libm_erf(r / (2f64.sqrt() * s)) / (4.0 * PI * r)
            }
        };
        let f: Vec<f64> = (0..g.len()).map(|n| rho(math::norm(g.point_of(n)))).collect();
        let phi = NewtonianKernel::new(g).apply(&f);
        let mut err: f64 = 0.0;
        let mut top: f64 = 0.0;
        for n in 0..g.len() {
            let e = exact(math::norm(g.point_of(n)));
            err = err.max((phi[n] - e).abs());
            top = top.max(e.abs());
        }
        assert!(err / top < 1e-2, "{}", err / top);
    }

    fn libm_erf(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26 is too coarse here; integrate instead.
        let n = 2000;
        let h = x / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let t = i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += w * (-t * t).exp();
        }
        2.0 / PI.sqrt() * acc * h
    }

    #[test]
    fn zero_source_gives_zero_current() {
        let inner = Grid3::unit_cube(9).unwrap();
        let src = mollified_source(&VectorField::zeros(inner), 0.25, None).unwrap();
        let out = recover_current(&src).unwrap();
        assert_eq!(out.j.max_norm(), 0.0);
        assert_eq!(out.divergence.ratio, 0.0);
        assert!(!out.padding_too_small);
    }

    #[test]
    fn recovery_is_linear() {
        let inner = Grid3::unit_cube(11).unwrap();
        let a = VectorField::from_fn(inner, |x| bump_curl(x, [0.5; 3], 0.4));
        let b = VectorField::from_fn(inner, |x| [0.0, 0.0, (-(math::dot(math::sub(x, [0.5; 3]), math::sub(x, [0.5; 3]))) / 0.02).exp()]);
        let eps = 0.2;
        let sa = mollified_source(&a, eps, None).unwrap();
        let sb = mollified_source(&b, eps, None).unwrap();
        let mut sab = sa.clone();
        sab.w = sa.w.add(&sb.w.scaled(2.0));
        let ja = recover_current(&sa).unwrap().j;
        let jb = recover_current(&sb).unwrap().j;
        let jab = recover_current(&sab).unwrap().j;
        let lin = ja.add(&jb.scaled(2.0));
        assert!(jab.sub(&lin).max_norm() <= 1e-12 * lin.max_norm());
    }

    #[test]
    fn closed_loop_converges() {
        let errs: Vec<f64> = [17, 33]
            .iter()
            .map(|&n| {
                let inner = Grid3::unit_cube(n).unwrap();
                let jstar = VectorField::from_fn(inner, |x| bump_curl(x, [0.5; 3], 0.35));
                let src = mollified_source(&jstar, 2.0 * inner.spacing, None).unwrap();
                let out = recover_current(&src).unwrap();
                assert!(out.divergence.ratio < 5e-2, "{}", out.divergence.ratio);
                rel(&out.j, &jstar)
            })
            .collect();
        assert!(errs[1] < 0.15, "{errs:?}");
        assert!(errs[0] / errs[1] > 2.5, "{errs:?}");
    }

    #[test]
    fn gradient_source_is_flagged() {
        let inner = Grid3::cube([-0.5; 3], 1.0, 17).unwrap();
        let pad = inner.padded(6);
        let g = discrete_grad(&ScalarField::from_fn(pad, |x| (-math::dot(x, x) / 0.03).exp()));
        let phi = NewtonianKernel::new(pad).apply_vector(&g).unwrap();
        let r = potential_divergence_check(&phi, &inner).unwrap();
        assert!(r.ratio > 0.3, "{}", r.ratio);
    }

    #[test]
    fn direct_current_matches_fft_curl() {
        let inner = Grid3::unit_cube(25).unwrap();
        let jstar = VectorField::from_fn(inner, |x| bump_curl(x, [0.5; 3], 0.35));
        let src = mollified_source(&jstar, 2.0 * inner.spacing, None).unwrap();
        let out = recover_current(&src).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probes: Vec<Vec3> = (0..10)
            .map(|_| inner.point(rng.random_range(6..19), rng.random_range(6..19), rng.random_range(6..19)))
            .collect();
        let scale = out.j.max_norm();
        for (p, d) in probes.iter().zip(current_direct(&src.w, &probes)) {
            let e = math::norm(math::sub(out.j.sample(*p), d)) / scale;
            assert!(e < 2e-2, "{e}");
        }
    }
}
