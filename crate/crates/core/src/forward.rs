//! Forward model: the adjoint current of a coil, its mollified source
//! distribution, and emf traces produced by spherical acoustic pulses.
//!
//! Traces can be synthesised three ways, which agree up to discretisation
//! error:
//! - `direct`: `m = (1/rho) sum_x q_x B0 . (J x grad p_eps)` over the box;
//! - `means`: `m = t B0 . mean_{|x-y|=ct} W_eps / rho`, sampling the
//!   mollified source on a padded grid;
//! - `reciprocal`: one Neumann solve per sample for the Lorentz-driven
//!   potential, then `m = sum_x q_x sigma (F - grad v) . C`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coil::CoilFields;
use crate::elliptic::{
    boundary_flux, total_current, Conductivity, FluxReport, NeumannOperator, PotentialSolution, SolverOptions,
};
use crate::error::{Error, Result};
use crate::grid::{discrete_curl, discrete_div, norm_scalar, norm_vector, DomainMask, Grid3, NormKind, ScalarField, VectorField};
use crate::math::{self, Vec3};

const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;

/// Half-width of the pulse band, in pulse standard deviations.
const BAND: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsParams {
    pub b0_list: Vec<Vec3>,
    pub rho: f64,
    pub sound_speed: f64,
    pub mu: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            b0_list: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            rho: 1.0,
            sound_speed: 1.0,
            mu: 1.0,
        }
    }
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.sound_speed > 0.0 && self.mu > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "rho {}, c {}, mu {} must be positive",
                self.rho, self.sound_speed, self.mu
            )));
        }
        Ok(())
    }
}

/// Adjoint current `J = sigma (C - grad w)` of one coil.
#[derive(Debug, Clone)]
pub struct CurrentField {
    pub j: VectorField,
    pub curl_j: VectorField,
    pub potential: PotentialSolution,
    pub flux: FluxReport,
    /// `|div J|_2` over the central half of the box divided by `|J|_2`.
    /// The finite-volume fluxes are conserved exactly; the nodal divergence
    /// also carries an O(h) layer at the boundary, which is excluded here.
    pub relative_divergence: f64,
}

pub fn adjoint_current(cond: &Conductivity, fields: &CoilFields, opts: &SolverOptions) -> Result<CurrentField> {
    cond.validate()?;
    current_for_source(&cond.sigma, &fields.c, opts)
}

/// `sigma (F - grad w)` for the Neumann problem driven by `F`.
pub fn current_for_source(sigma: &ScalarField, f: &VectorField, opts: &SolverOptions) -> Result<CurrentField> {
    sigma.grid.ensure_same(&f.grid, "adjoint current")?;
    let op = NeumannOperator::new(sigma);
    let potential = op.solve(f, opts)?;
    let j = total_current(sigma, f, &potential.grad_w);
    let flux = boundary_flux(&op, f, &potential.w, &j)?;
    let g = sigma.grid;
    let full = DomainMask::full(g);
    let lo = [g.dims[0] / 4, g.dims[1] / 4, g.dims[2] / 4];
    let interior = DomainMask::sub_box(g, lo, [g.dims[0] - 1 - lo[0], g.dims[1] - 1 - lo[1], g.dims[2] - 1 - lo[2]])?;
    let jn = norm_vector(&j, &full, NormKind::L2)?;
    let dn = norm_scalar(&discrete_div(&j), &interior, NormKind::L2)?;
    Ok(CurrentField {
        curl_j: discrete_curl(&j),
        j,
        potential,
        flux,
        relative_divergence: if jn > 0.0 { dn / jn } else { 0.0 },
    })
}

// ---------------------------------------------------------------------------
// Mollifier

/// 1-D Gaussian density with standard deviation `s`.
#[inline]
pub fn gauss1(u: f64, s: f64) -> f64 {
    (-0.5 * (u / s) * (u / s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
}

#[inline]
fn dgauss1(u: f64, s: f64) -> f64 {
    -u / (s * s) * gauss1(u, s)
}

/// Standard deviation of the mollifier of width `eps`.
#[inline]
pub fn mollifier_std(eps: f64) -> f64 {
    0.5 * eps
}

/// Nodes of padding that hold the mollifier's `4 eps` cutoff.
pub fn padding_nodes(eps: f64, h: f64) -> usize {
    (4.0 * eps / h - 1e-9).ceil() as usize
}

/// Mollified source `W_eps` on a grid padded around the conductor.
///
/// `W` is the vector distribution `<W, phi> = int J x grad phi`; the
/// scalar initial state for a field `B0` is `B0 . W / rho`.
#[derive(Debug, Clone)]
pub struct SourceDistribution {
    pub w: VectorField,
    pub inner: Grid3,
    pub eps: f64,
    pub margin: usize,
}

impl SourceDistribution {
    /// Scalar initial state `B0 . W / rho`.
    pub fn initial_state(&self, b0: Vec3, rho: f64) -> ScalarField {
        ScalarField {
            grid: self.w.grid,
            values: self.w.values.iter().map(|&v| math::dot(b0, v) / rho).collect(),
        }
    }

    /// `(int W, [int x_i W for i in 0..3])` by trapezoidal quadrature.
    pub fn moments(&self) -> (Vec3, [Vec3; 3]) {
        let g = self.w.grid;
        let mask = DomainMask::full(g);
        let mut zeroth = [0.0; 3];
        let mut first = [[0.0; 3]; 3];
        for n in 0..g.len() {
            let [i, j, k] = g.coords(n);
            let q = mask.weight(i, j, k);
            let x = g.point_of(n);
            let v = self.w.values[n];
            zeroth = math::add(zeroth, math::scale(v, q));
            for (d, fd) in first.iter_mut().enumerate() {
                *fd = math::add(*fd, math::scale(v, q * x[d]));
            }
        }
        (zeroth, first)
    }

    /// Fraction of `|W|_2` carried by the outermost node layer.
    pub fn edge_fraction(&self) -> f64 {
        let g = self.w.grid;
        let mut edge = 0.0;
        let mut total = 0.0;
        for n in 0..g.len() {
            let c = g.coords(n);
            let v = math::dot(self.w.values[n], self.w.values[n]);
            total += v;
            if (0..3).any(|d| c[d] == 0 || c[d] + 1 == g.dims[d]) {
                edge += v;
            }
        }
        if total > 0.0 {
            (edge / total).sqrt()
        } else {
            0.0
        }
    }
}

/// `W_eps(x) = sum_y q_y J(y) x (-grad g_eps)(x - y)` on the grid padded by
/// `margin` nodes (default `ceil(4 eps / h)`).
pub fn mollified_source(j: &VectorField, eps: f64, margin: Option<usize>) -> Result<SourceDistribution> {
    let inner = j.grid;
    let h = inner.spacing;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("pulse width {eps}")));
    }
    let cutoff = padding_nodes(eps, h);
    let margin = margin.unwrap_or(cutoff);
    if (margin as f64) * h < 3.0 * eps * (1.0 - 1e-9) {
        return Err(Error::PaddingTooSmall(format!(
            "{margin} nodes ({:.4}) cannot hold the 3 eps = {:.4} support",
            margin as f64 * h,
            3.0 * eps
        )));
    }
    let padded = inner.padded(margin);
    let mask = DomainMask::full(inner);
    let s = mollifier_std(eps);
    let taps = cutoff as isize;
    let mut k0: Vec<f64> = (-taps..=taps).map(|l| gauss1(l as f64 * h, s)).collect();
    let mut k1: Vec<f64> = (-taps..=taps).map(|l| dgauss1(l as f64 * h, s)).collect();
    // Rescale so the lattice sums reproduce the zeroth and first moments of
    // the continuous kernels exactly; without this the aliasing error of the
    // sampled derivative is ~2e-7 at eps = 2h.
    let m0: f64 = k0.iter().sum::<f64>() * h;
    let m1: f64 = (-taps..=taps).zip(&k1).map(|(l, k)| l as f64 * h * k).sum::<f64>() * h;
    k0.iter_mut().for_each(|k| *k /= m0);
    k1.iter_mut().for_each(|k| *k /= -m1);

    // q J_b embedded in the padded grid.
    let mut qj: [Vec<f64>; 3] = [vec![0.0; padded.len()], vec![0.0; padded.len()], vec![0.0; padded.len()]];
    for n in 0..inner.len() {
        let [i, k, l] = inner.coords(n);
        let q = mask.weight(i, k, l);
        let p = padded.index(i + margin, k + margin, l + margin);
        for b in 0..3 {
            qj[b][p] = q * j.values[n][b];
        }
    }
    // T_bc = (q J_b) * d_c g
    let t = |b: usize, c: usize| -> Vec<f64> {
        let mut a = convolve_axis(&qj[b], &padded, 0, if c == 0 { &k1 } else { &k0 });
        a = convolve_axis(&a, &padded, 1, if c == 1 { &k1 } else { &k0 });
        convolve_axis(&a, &padded, 2, if c == 2 { &k1 } else { &k0 })
    };
    let (tyz, tzy) = (t(1, 2), t(2, 1));
    let (tzx, txz) = (t(2, 0), t(0, 2));
    let (txy, tyx) = (t(0, 1), t(1, 0));
    let values = (0..padded.len())
        .map(|n| [tzy[n] - tyz[n], txz[n] - tzx[n], tyx[n] - txy[n]])
        .collect();
    Ok(SourceDistribution {
        w: VectorField { grid: padded, values },
        inner,
        eps,
        margin,
    })
}

/// `out[i] = sum_l in[i - l] k[l]` along one axis, zero beyond the grid.
fn convolve_axis(input: &[f64], g: &Grid3, axis: usize, kernel: &[f64]) -> Vec<f64> {
    let taps = (kernel.len() / 2) as isize;
    let n = g.dims[axis] as isize;
    let stride = [1, g.dims[0], g.dims[0] * g.dims[1]][axis];
    let mut out = vec![0.0; input.len()];
    let mut line = vec![0.0; n as usize];
    for start in 0..input.len() {
        if g.coords(start)[axis] != 0 {
            continue;
        }
        for m in 0..n as usize {
            line[m] = input[start + m * stride];
        }
        if line.iter().all(|&v| v == 0.0) {
            continue;
        }
        for m in 0..n {
            let mut acc = 0.0;
            let lo = (m - (n - 1)).max(-taps);
            let hi = m.min(taps);
            for l in lo..=hi {
                acc += line[(m - l) as usize] * kernel[(l + taps) as usize];
            }
            out[start + m as usize * stride] = acc;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Pulses and measurements

/// Radial derivative `P'(D)` of the mollified spherical pulse
/// `P(D) = (phi_s(D - R) - phi_s(D + R)) / (4 pi c D)`.
#[inline]
pub fn pulse_radial_derivative(d: f64, r: f64, s: f64, c: f64) -> f64 {
    let a = gauss1(d - r, s) - gauss1(d + r, s);
    let da = dgauss1(d - r, s) - dgauss1(d + r, s);
    (da / d - a / (d * d)) / (FOUR_PI * c)
}

/// `grad_x p_eps(x, t; y)`.
#[inline]
pub fn pulse_gradient(x: Vec3, y: Vec3, t: f64, eps: f64, c: f64) -> Vec3 {
    let d = math::sub(x, y);
    let dist = math::norm(d);
    let s = mollifier_std(eps);
    let r = c * t;
    if (dist - r).abs() > BAND * s && dist + r > BAND * s {
        return [0.0; 3];
    }
    math::scale(d, pulse_radial_derivative(dist, r, s, c) / dist)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub centers: Vec<Vec3>,
    pub times: Vec<f64>,
    /// `traces[k][j]` is the emf for center `k` at time `j`.
    pub traces: Vec<Vec<f64>>,
    pub pulse_width: f64,
    pub b0: Vec3,
    pub rho: f64,
    pub sound_speed: f64,
}

impl MeasurementSet {
    pub fn zeros(centers: Vec<Vec3>, times: Vec<f64>, eps: f64, b0: Vec3, rho: f64, c: f64) -> Self {
        let traces = vec![vec![0.0; times.len()]; centers.len()];
        Self {
            centers,
            times,
            traces,
            pulse_width: eps,
            b0,
            rho,
            sound_speed: c,
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len() * self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self) -> Vec<f64> {
        self.traces.iter().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let nt = self.times.len();
        for (k, row) in self.traces.iter_mut().enumerate() {
            row.copy_from_slice(&v[k * nt..(k + 1) * nt]);
        }
    }

    pub fn radii(&self) -> Vec<f64> {
        self.times.iter().map(|t| self.sound_speed * t).collect()
    }
}

/// Checks centers lie `5 eps` away from the box and times increase.
pub fn validate_geometry(grid: &Grid3, centers: &[Vec3], times: &[f64], eps: f64) -> Result<()> {
    for &y in centers {
        let d = grid.distance_to_box(y);
        if d == 0.0 {
            return Err(Error::Geometry(format!("transducer {y:?} lies inside the conductor")));
        }
        if d < 5.0 * eps {
            return Err(Error::Geometry(format!(
                "transducer {y:?} is {d:.4} from the conductor, closer than 5 eps = {:.4}",
                5.0 * eps
            )));
        }
    }
    if times.is_empty() || times[0] <= 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Geometry("times must be positive and strictly increasing".into()));
    }
    Ok(())
}

/// `count` equispaced times whose radii `c t` sweep every sphere that can
/// meet the `3 eps` neighbourhood of the box, for all centers.
pub fn covering_times(grid: &Grid3, centers: &[Vec3], eps: f64, c: f64, count: usize) -> Vec<f64> {
    let (lo, hi) = (grid.origin, grid.upper());
    let near = centers
        .iter()
        .map(|&y| grid.distance_to_box(y))
        .fold(f64::INFINITY, f64::min);
    let far = centers
        .iter()
        .map(|&y| {
            let mut d2 = 0.0;
            for a in 0..3 {
                let e = (y[a] - lo[a]).abs().max((y[a] - hi[a]).abs());
                d2 += e * e;
            }
            d2.sqrt()
        })
        .fold(0.0, f64::max);
    let r0 = (near - 3.0 * eps).max(0.5 * near);
    let r1 = far + 3.0 * eps;
    let n = count.max(2);
    (0..n)
        .map(|j| (r0 + (r1 - r0) * j as f64 / (n - 1) as f64) / c)
        .collect()
}

/// Direct quadrature `m = (1/rho) sum_x q_x B0 . (J(x) x grad p_eps)`.
pub fn synthesize_emf(
    j: &VectorField,
    b0: Vec3,
    rho: f64,
    c: f64,
    centers: &[Vec3],
    times: &[f64],
    eps: f64,
) -> Result<MeasurementSet> {
    let g = j.grid;
    validate_geometry(&g, centers, times, eps)?;
    let mask = DomainMask::full(g);
    let weights = mask.weights();
    let s = mollifier_std(eps);
    let traces = centers
        .par_iter()
        .map(|&y| {
            // (D, q (x - y) . (B0 x J) / D), sorted by D
            let mut nodes: Vec<(f64, f64)> = (0..g.len())
                .filter_map(|n| {
                    let jv = j.values[n];
                    if jv == [0.0; 3] {
                        return None;
                    }
                    let d = math::sub(g.point_of(n), y);
                    let dist = math::norm(d);
                    Some((dist, weights[n] * math::dot(d, math::cross(b0, jv)) / dist))
                })
                .collect();
            nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
            times
                .iter()
                .map(|&t| {
                    let r = c * t;
                    let a = nodes.partition_point(|e| e.0 < r - BAND * s);
                    let b = nodes.partition_point(|e| e.0 <= r + BAND * s);
                    nodes[a..b]
                        .iter()
                        .map(|&(dist, sv)| pulse_radial_derivative(dist, r, s, c) * sv)
                        .sum::<f64>()
                        / rho
                })
                .collect()
        })
        .collect();
    Ok(MeasurementSet {
        centers: centers.to_vec(),
        times: times.to_vec(),
        traces,
        pulse_width: eps,
        b0,
        rho,
        sound_speed: c,
    })
}

/// Traces through the original coupled model: for each sample solve
/// `div(sigma grad v) = div(sigma F)` with `F = grad p_eps x B0 / rho` and
/// return `sum_x q_x sigma (F - grad v) . C`.
#[allow(clippy::too_many_arguments)]
pub fn emf_by_reciprocity(
    sigma: &ScalarField,
    c_field: &VectorField,
    b0: Vec3,
    rho: f64,
    c: f64,
    centers: &[Vec3],
    times: &[f64],
    eps: f64,
    opts: &SolverOptions,
) -> Result<Vec<Vec<f64>>> {
    let g = sigma.grid;
    g.ensure_same(&c_field.grid, "reciprocity")?;
    validate_geometry(&g, centers, times, eps)?;
    let op = NeumannOperator::new(sigma);
    let weights = DomainMask::full(g).weights();
    let samples: Vec<(usize, usize)> = (0..centers.len())
        .flat_map(|k| (0..times.len()).map(move |jt| (k, jt)))
        .collect();
    let values: Vec<f64> = samples
        .par_iter()
        .map(|&(k, jt)| {
            let y = centers[k];
            let t = times[jt];
            let f = VectorField::from_fn(g, |x| {
                math::scale(math::cross(pulse_gradient(x, y, t, eps, c), b0), 1.0 / rho)
            });
            if f.max_norm() == 0.0 {
                return Ok(0.0);
            }
            let sol = op.solve(&f, opts)?;
            Ok((0..g.len())
                .map(|n| {
                    let e = math::sub(f.values[n], sol.grad_w.values[n]);
                    weights[n] * sigma.values[n] * math::dot(e, c_field.values[n])
                })
                .sum())
        })
        .collect::<Result<_>>()?;
    Ok(values.chunks(times.len()).map(|r| r.to_vec()).collect())
}

// ---------------------------------------------------------------------------
// Spherical means

/// Point density of the sphere rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SphereRule {
    /// Same number of points on every sphere.
    Fixed(usize),
    /// About one point per `spacing^2` of sphere area.
    Spacing(f64),
}

impl SphereRule {
    pub fn count(&self, radius: f64) -> usize {
        match *self {
            Self::Fixed(n) => n.max(1),
            Self::Spacing(h) => ((FOUR_PI * radius * radius / (h * h)).ceil() as usize).max(64),
        }
    }
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653; // pi (3 - sqrt 5)

/// Visits the golden-spiral points of the sphere `|x - y| = r` that fall in
/// the ball `(b, rb)`, each with weight `1/n` (plain mean). The spiral's pole
/// points from `y` toward `b`, so the visited points form a contiguous run.
pub fn for_each_cap_point(y: Vec3, r: f64, ball: (Vec3, f64), rule: SphereRule, mut f: impl FnMut(Vec3, f64)) {
    let n = rule.count(r);
    let (b, rb) = ball;
    let axis_vec = math::sub(b, y);
    let db = math::norm(axis_vec);
    let (axis, mu_min) = if db > 0.0 {
        (math::scale(axis_vec, 1.0 / db), (r * r + db * db - rb * rb) / (2.0 * r * db))
    } else if r <= rb {
        ([0.0, 0.0, 1.0], -1.0)
    } else {
        return;
    };
    if mu_min > 1.0 {
        return;
    }
    let last = if mu_min <= -1.0 {
        n - 1
    } else {
        // mu_i = 1 - (2i + 1)/n >= mu_min
        let v = (n as f64 * (1.0 - mu_min) - 1.0) / 2.0;
        if v < 0.0 {
            return;
        }
        (v.floor() as usize).min(n - 1)
    };
    let (e1, e2) = math::orthonormal_frame(axis);
    let w = 1.0 / n as f64;
    let (sg, cg) = GOLDEN_ANGLE.sin_cos();
    let (mut sp, mut cp) = (0.0, 1.0);
    for i in 0..=last {
        let mu = 1.0 - (2 * i + 1) as f64 / n as f64;
        let st = (1.0 - mu * mu).max(0.0).sqrt();
        // Resynchronise the rotation recurrence now and then.
        if i % 1024 == 0 {
            (sp, cp) = (i as f64 * GOLDEN_ANGLE).sin_cos();
        }
        let dir = [
            mu * axis[0] + st * (cp * e1[0] + sp * e2[0]),
            mu * axis[1] + st * (cp * e1[1] + sp * e2[1]),
            mu * axis[2] + st * (cp * e1[2] + sp * e2[2]),
        ];
        f(math::add(y, math::scale(dir, r)), w);
        (sp, cp) = (sp * cg + cp * sg, cp * cg - sp * sg);
    }
}

/// Something that can be averaged over spheres: point values plus a ball
/// outside of which it vanishes.
pub trait Sampler: Sync {
    fn value(&self, p: Vec3) -> f64;
    fn bounding_ball(&self) -> (Vec3, f64);
}

impl Sampler for ScalarField {
    fn value(&self, p: Vec3) -> f64 {
        self.sample(p)
    }

    fn bounding_ball(&self) -> (Vec3, f64) {
        (self.grid.center(), 0.5 * self.grid.diameter() * (1.0 + 1e-12))
    }
}

/// Closure-backed sampler for analytic test functions.
pub struct AnalyticSampler<F> {
    pub f: F,
    pub center: Vec3,
    pub radius: f64,
}

impl<F: Fn(Vec3) -> f64 + Sync> Sampler for AnalyticSampler<F> {
    fn value(&self, p: Vec3) -> f64 {
        (self.f)(p)
    }

    fn bounding_ball(&self) -> (Vec3, f64) {
        (self.center, self.radius)
    }
}

/// Plain means `means[k][j]` of `f` over the spheres `|x - y_k| = r_j`.
pub fn spherical_means<S: Sampler>(f: &S, centers: &[Vec3], radii: &[f64], rule: SphereRule) -> Result<Vec<Vec<f64>>> {
    if radii.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::Geometry("sphere radii must be positive".into()));
    }
    let ball = f.bounding_ball();
    Ok(centers
        .par_iter()
        .map(|&y| {
            radii
                .iter()
                .map(|&r| {
                    let mut acc = 0.0;
                    for_each_cap_point(y, r, ball, rule, |p, w| acc += w * f.value(p));
                    acc
                })
                .collect()
        })
        .collect())
}

/// Mean of the indicator of the ball `|x| < a` over a sphere of radius
/// `r` centred at distance `d` from the origin.
pub fn ball_indicator_mean(a: f64, d: f64, r: f64) -> f64 {
    if r >= d + a || r + a <= d {
        0.0
    } else if r + d <= a {
        1.0
    } else {
        (a * a - (d - r) * (d - r)) / (4.0 * d * r)
    }
}

/// The linear map from a grid field to its time-weighted spherical means
/// `t_j mean_{|x - y_k| = c t_j} f`, and its exact transpose.
#[derive(Debug, Clone)]
pub struct SphericalMeanOperator {
    pub grid: Grid3,
    pub centers: Vec<Vec3>,
    pub times: Vec<f64>,
    pub sound_speed: f64,
    pub rule: SphereRule,
}

impl SphericalMeanOperator {
    pub fn new(grid: Grid3, centers: Vec<Vec3>, times: Vec<f64>, sound_speed: f64, rule: SphereRule) -> Result<Self> {
        for &y in &centers {
            if grid.distance_to_box(y) == 0.0 {
                return Err(Error::Geometry(format!("transducer {y:?} lies inside the source grid")));
            }
        }
        if times.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Geometry("times must be positive".into()));
        }
        Ok(Self {
            grid,
            centers,
            times,
            sound_speed,
            rule,
        })
    }

    pub fn rows(&self) -> usize {
        self.centers.len() * self.times.len()
    }

    pub fn cols(&self) -> usize {
        self.grid.len()
    }

    fn ball(&self) -> (Vec3, f64) {
        (self.grid.center(), 0.5 * self.grid.diameter() * (1.0 + 1e-12))
    }

    /// Row-major over (center, time).
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let field = ScalarField {
            grid: self.grid,
            values: f.to_vec(),
        };
        let ball = self.ball();
        self.centers
            .par_iter()
            .flat_map_iter(|&y| {
                let field = &field;
                self.times.iter().map(move |&t| {
                    let mut acc = 0.0;
                    for_each_cap_point(y, self.sound_speed * t, ball, self.rule, |p, w| {
                        acc += w * field.sample(p)
                    });
                    t * acc
                })
            })
            .collect()
    }

    pub fn apply_transpose(&self, m: &[f64]) -> Vec<f64> {
        let mut out = ScalarField::zeros(self.grid);
        let ball = self.ball();
        let nt = self.times.len();
        for (k, &y) in self.centers.iter().enumerate() {
            for (jt, &t) in self.times.iter().enumerate() {
                let v = m[k * nt + jt] * t;
                if v == 0.0 {
                    continue;
                }
                for_each_cap_point(y, self.sound_speed * t, ball, self.rule, |p, w| out.splat(p, w * v));
            }
        }
        out.values
    }
}

/// Means-form traces `t B0 . mean(W_eps) / rho` sampled on the padded grid.
pub fn synthesize_emf_means(
    source: &SourceDistribution,
    b0: Vec3,
    rho: f64,
    c: f64,
    centers: &[Vec3],
    times: &[f64],
    rule: SphereRule,
) -> Result<MeasurementSet> {
    validate_geometry(&source.inner, centers, times, source.eps)?;
    let f = source.initial_state(b0, rho);
    let op = SphericalMeanOperator::new(f.grid, centers.to_vec(), times.to_vec(), c, rule)?;
    let flat = op.apply(&f.values);
    let mut set = MeasurementSet::zeros(centers.to_vec(), times.to_vec(), source.eps, b0, rho, c);
    set.set_flat(&flat);
    Ok(set)
}

/// Relative L2 distance between two trace tables.
pub fn relative_trace_error(a: &[Vec<f64>], reference: &[Vec<f64>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (ra, rb) in a.iter().zip(reference) {
        for (x, y) in ra.iter().zip(rb) {
            num += (x - y) * (x - y);
            den += y * y;
        }
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}
