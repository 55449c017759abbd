//! Measurable sides of the Lipschitz stability estimates: nonzero
//! constraint, smallness quantities, the weighted estimate and empirical
//! stability constants, on a bounded box or a truncated half-space.

use serde::{Deserialize, Serialize};

use crate::coil::{Coil, CoilFields};
use crate::elliptic::{Conductivity, SolverOptions};
use crate::error::{Error, Result};
use crate::forward::{current_for_source, CurrentField};
use crate::grid::{
    discrete_grad, holder_parts, norm_scalar, norm_vector, DomainMask, Grid3, NormKind, ScalarField, VectorField,
};
use crate::math::{self, Vec3};
use crate::phantom::{bump_field, random_bumps, Bump};

/// `q = 3 / (1 - alpha)`.
pub fn lebesgue_exponent(alpha: f64) -> f64 {
    3.0 / (1.0 - alpha)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("Hölder exponent {alpha} outside (0, 1)")))
    }
}

/// `min |C|` over the nodes of `omega_p`.
pub fn nonzero_constraint(fields: &CoilFields, omega_p: &DomainMask) -> Result<f64> {
    fields.c.grid.ensure_same(&omega_p.grid, "nonzero constraint")?;
    let idx = omega_p.indices();
    if idx.is_empty() {
        return Err(Error::InvalidArgument("empty subdomain".into()));
    }
    Ok(idx.iter().map(|&n| math::norm(fields.c.values[n])).fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smallness {
    /// `|grad sigma . C|_{L^q}` over the box.
    pub lq: f64,
    /// `sup + Hölder seminorm` of `C . nu` on boundary face samples.
    pub holder: f64,
    pub holder_sup: f64,
    pub holder_seminorm: f64,
    pub q: f64,
    pub alpha: f64,
}

/// Face samples of `C . nu`: each exposed face of a boundary node is placed
/// a quarter cell inward along the other boundary coordinates, so the
/// faces meeting at an edge or corner stay distinct points.
pub fn normal_trace_samples(c: &VectorField) -> (Vec<Vec3>, Vec<f64>) {
    let grid = c.grid;
    let mask = DomainMask::full(grid);
    let h = grid.spacing;
    let mut pts = Vec::new();
    let mut vals = Vec::new();
    for face in mask.boundary_faces() {
        let cc = grid.coords(face.node);
        let mut p = grid.point_of(face.node);
        let axis = (0..3).find(|&d| face.normal[d] != 0.0).expect("axis normal");
        for t in (0..3).filter(|&t| t != axis) {
            if cc[t] == 0 {
                p[t] += 0.25 * h;
            } else if cc[t] + 1 == grid.dims[t] {
                p[t] -= 0.25 * h;
            }
        }
        pts.push(p);
        vals.push(math::dot(c.values[face.node], face.normal));
    }
    (pts, vals)
}

pub fn smallness_quantities(sigma: &ScalarField, fields: &CoilFields, alpha: f64) -> Result<Smallness> {
    check_alpha(alpha)?;
    sigma.grid.ensure_same(&fields.c.grid, "smallness")?;
    let q = lebesgue_exponent(alpha);
    let gs = discrete_grad(sigma);
    let dot = ScalarField {
        grid: sigma.grid,
        values: gs.values.iter().zip(&fields.c.values).map(|(a, b)| math::dot(*a, *b)).collect(),
    };
    let lq = norm_scalar(&dot, &DomainMask::full(sigma.grid), NormKind::Lq(q))?;
    let (pts, vals) = normal_trace_samples(&fields.c);
    let (sup, semi) = holder_parts(&pts, &vals, alpha)?;
    Ok(Smallness {
        lq,
        holder: sup + semi,
        holder_sup: sup,
        holder_seminorm: semi,
        q,
        alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    pub c: f64,
    pub min_j: f64,
    pub lambda_c_half: f64,
    /// `min |J| >= lambda c / 2` on the subdomain.
    pub holds: bool,
    pub sup_grad_w: f64,
    pub c_half: f64,
    /// `sup |grad w| <= c / 2`.
    pub gradient_bound_holds: bool,
}

pub fn lower_bound_from_current(
    cond: &Conductivity,
    fields: &CoilFields,
    current: &CurrentField,
    omega_p: &DomainMask,
) -> Result<LowerBound> {
    let c = nonzero_constraint(fields, omega_p)?;
    let min_j = omega_p
        .indices()
        .iter()
        .map(|&n| math::norm(current.j.values[n]))
        .fold(f64::INFINITY, f64::min);
    let sup_grad_w = current.potential.grad_w.max_norm();
    let lambda_c_half = 0.5 * cond.lambda * c;
    Ok(LowerBound {
        c,
        min_j,
        lambda_c_half,
        holds: min_j >= lambda_c_half,
        sup_grad_w,
        c_half: 0.5 * c,
        gradient_bound_holds: sup_grad_w <= 0.5 * c,
    })
}

pub fn lower_bound_check(
    cond: &Conductivity,
    fields: &CoilFields,
    omega_p: &DomainMask,
    opts: &SolverOptions,
) -> Result<LowerBound> {
    cond.validate()?;
    let current = current_for_source(&cond.sigma, &fields.c, opts)?;
    lower_bound_from_current(cond, fields, &current, omega_p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedEstimate {
    /// `int |sigma1 - sigma2| |J1|^2`.
    pub lhs: f64,
    pub c_norm: f64,
    pub hcurl_distance: f64,
    /// `|C|_{L2} |J1 - J2|_{H(curl)}`.
    pub rhs_core: f64,
    pub ratio: f64,
}

pub fn weighted_from_currents(
    sigma1: &ScalarField,
    sigma2: &ScalarField,
    fields: &CoilFields,
    j1: &VectorField,
    j2: &VectorField,
) -> Result<WeightedEstimate> {
    let mask = DomainMask::full(sigma1.grid);
    let diff = sigma1.sub(sigma2).map(f64::abs);
    let j1sq = j1.dot(j1);
    let lhs = norm_scalar(&diff.zip_with(&j1sq, |a, b| a * b), &mask, NormKind::L1)?;
    let c_norm = norm_vector(&fields.c, &mask, NormKind::L2)?;
    let hcurl_distance = norm_vector(&j1.sub(j2), &mask, NormKind::Hcurl)?;
    let rhs_core = c_norm * hcurl_distance;
    Ok(WeightedEstimate {
        lhs,
        c_norm,
        hcurl_distance,
        rhs_core,
        ratio: if rhs_core > 0.0 { lhs / rhs_core } else { 0.0 },
    })
}

pub fn weighted_estimate(
    sigma1: &ScalarField,
    sigma2: &ScalarField,
    fields: &CoilFields,
    opts: &SolverOptions,
) -> Result<WeightedEstimate> {
    sigma1.grid.ensure_same(&sigma2.grid, "weighted estimate")?;
    let j1 = current_for_source(sigma1, &fields.c, opts)?.j;
    let j2 = current_for_source(sigma2, &fields.c, opts)?.j;
    weighted_from_currents(sigma1, sigma2, fields, &j1, &j2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityRatio {
    /// `|sigma1 - sigma2|_{L1(Omega')}`.
    pub l1: f64,
    pub c_norm: f64,
    pub hcurl_distance: f64,
    pub ratio: f64,
    /// Both currents agree, the ratio is reported as 0.
    pub degenerate: bool,
}

pub fn stability_ratio_from_currents(
    sigma1: &ScalarField,
    sigma2: &ScalarField,
    fields: &CoilFields,
    j1: &VectorField,
    j2: &VectorField,
    omega_p: &DomainMask,
) -> Result<StabilityRatio> {
    let mask = DomainMask::full(sigma1.grid);
    let l1 = norm_scalar(&sigma1.sub(sigma2), omega_p, NormKind::L1)?;
    let c_norm = norm_vector(&fields.c, &mask, NormKind::L2)?;
    let hcurl_distance = norm_vector(&j1.sub(j2), &mask, NormKind::Hcurl)?;
    let den = c_norm * hcurl_distance;
    let degenerate = den == 0.0;
    Ok(StabilityRatio {
        l1,
        c_norm,
        hcurl_distance,
        ratio: if degenerate { 0.0 } else { l1 / den },
        degenerate,
    })
}

pub fn stability_ratio(
    sigma1: &ScalarField,
    sigma2: &ScalarField,
    fields: &CoilFields,
    omega_p: &DomainMask,
    opts: &SolverOptions,
) -> Result<StabilityRatio> {
    sigma1.grid.ensure_same(&sigma2.grid, "stability ratio")?;
    let j1 = current_for_source(sigma1, &fields.c, opts)?.j;
    let j2 = current_for_source(sigma2, &fields.c, opts)?.j;
    stability_ratio_from_currents(sigma1, sigma2, fields, &j1, &j2, omega_p)
}

/// Ten `(sigma1, sigma2)` pairs: a fixed reference bump and ten seeded
/// perturbations centred in the middle half of the box.
pub fn standard_family(grid: Grid3, seed: u64) -> Vec<(ScalarField, ScalarField)> {
    let c = grid.center();
    let ext = grid.extent();
    let reference = [Bump {
        center: math::add(c, math::scale(ext, 0.05)),
        width: 0.15 * ext[0],
        amplitude: 0.4,
    }];
    let sigma1 = bump_field(grid, 1.0, &reference);
    let bumps = random_bumps(grid, 10, [0.08 * ext[0], 0.15 * ext[0]], [0.05, 0.3], 0.25, seed);
    bumps
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let b = Bump {
                amplitude: sign * b.amplitude,
                ..b
            };
            (sigma1.clone(), sigma1.add(&bump_field(grid, 0.0, &[b])))
        })
        .collect()
}

/// Geometry of the truncated half-space `[-R, R]^2 x [0, R']` with a disk
/// coil in the plane `z = -a` and `sigma = sigma0` outside the half-ball of
/// radius `r0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    pub lateral: f64,
    pub depth: f64,
    pub r0: f64,
    pub coil_depth: f64,
    pub coil_radius: f64,
    pub spacing: f64,
    pub sigma0: f64,
}

impl HalfSpace {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth >= 3.0 * self.r0 && self.lateral >= 3.0 * self.r0) {
            return Err(Error::Geometry(format!(
                "truncation ({}, {}) must be at least 3 r0 = {}",
                self.lateral,
                self.depth,
                3.0 * self.r0
            )));
        }
        if !(self.coil_depth > 0.0 && self.coil_radius > 0.0 && self.spacing > 0.0 && self.sigma0 > 0.0) {
            return Err(Error::Geometry("coil depth, radius, spacing and sigma0 must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self, depth: f64) -> Result<Grid3> {
        Grid3::from_bounds([-self.lateral, -self.lateral, 0.0], [self.lateral, self.lateral, depth], self.spacing)
    }

    pub fn coil(&self) -> Result<Coil> {
        Coil::disk([0.0, 0.0, -self.coil_depth], self.coil_radius, [0.0, 0.0, 1.0])
    }

    /// Half ball `|x| < r0, z >= 0` as a node box (its bounding box).
    pub fn half_ball_box(&self, grid: Grid3) -> Result<DomainMask> {
        DomainMask::from_physical(grid, [-self.r0, -self.r0, 0.0], [self.r0, self.r0, self.r0])
    }

    /// `sigma0 + perturbation` inside the half ball, `sigma0` outside.
    pub fn conductivity(&self, grid: Grid3, perturbation: impl Fn(Vec3) -> f64) -> ScalarField {
        ScalarField::from_fn(grid, |x| {
            if math::norm(x) < self.r0 {
                self.sigma0 + perturbation(x)
            } else {
                self.sigma0
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub depth: f64,
    /// Relative L2 change of `J` on the half ball when the depth doubles.
    pub relative_change: f64,
    /// `r0^{5/2}`, the radius factor multiplying the stability constant.
    pub radius_factor: f64,
}

/// Current on the half ball at depth `R'` and `2R'` and their relative
/// difference.
pub fn half_space_truncation(
    hs: &HalfSpace,
    perturbation: impl Fn(Vec3) -> f64 + Copy,
    opts: &SolverOptions,
) -> Result<Truncation> {
    hs.validate()?;
    let coil = hs.coil()?;
    let mut fields = Vec::new();
    for depth in [hs.depth, 2.0 * hs.depth] {
        let grid = hs.grid(depth)?;
        let sigma = hs.conductivity(grid, perturbation);
        let cf = coil.fields(&grid)?;
        let j = current_for_source(&sigma, &cf.c, opts)?.j;
        fields.push((grid, j));
    }
    let (g1, j1) = &fields[0];
    let (g2, j2) = &fields[1];
    let ball = hs.half_ball_box(*g1)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for n in ball.indices() {
        let [i, j, k] = g1.coords(n);
        let m = g2.index(i, j, k);
        let d = math::sub(j1.values[n], j2.values[m]);
        num += math::dot(d, d);
        den += math::dot(j2.values[m], j2.values[m]);
    }
    Ok(Truncation {
        depth: hs.depth,
        relative_change: if den > 0.0 { (num / den).sqrt() } else { 0.0 },
        radius_factor: hs.r0.powf(2.5),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityParams {
    pub lambda: f64,
    pub big_lambda: f64,
    pub alpha: f64,
    pub q: f64,
    pub omega_lo: [usize; 3],
    pub omega_hi: [usize; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub c_constraint: f64,
    pub min_j: f64,
    pub lambda_c_half: f64,
    pub smallness_lq: f64,
    pub smallness_holder: f64,
    pub weighted_lhs: f64,
    pub weighted_rhs: f64,
    pub empirical_cs: f64,
    pub lower_bound_holds: bool,
    pub params: StabilityParams,
}

/// Full report for `sigma1` against a comparison conductivity `sigma2`.
pub fn stability_report(
    cond: &Conductivity,
    sigma2: &ScalarField,
    fields: &CoilFields,
    omega_p: &DomainMask,
    alpha: f64,
    opts: &SolverOptions,
) -> Result<StabilityReport> {
    cond.validate()?;
    let cur1 = current_for_source(&cond.sigma, &fields.c, opts)?;
    let j2 = current_for_source(sigma2, &fields.c, opts)?.j;
    let lb = lower_bound_from_current(cond, fields, &cur1, omega_p)?;
    let sm = smallness_quantities(&cond.sigma, fields, alpha)?;
    let we = weighted_from_currents(&cond.sigma, sigma2, fields, &cur1.j, &j2)?;
    let sr = stability_ratio_from_currents(&cond.sigma, sigma2, fields, &cur1.j, &j2, omega_p)?;
    Ok(StabilityReport {
        c_constraint: lb.c,
        min_j: lb.min_j,
        lambda_c_half: lb.lambda_c_half,
        smallness_lq: sm.lq,
        smallness_holder: sm.holder,
        weighted_lhs: we.lhs,
        weighted_rhs: we.rhs_core,
        empirical_cs: sr.ratio,
        lower_bound_holds: lb.holds,
        params: StabilityParams {
            lambda: cond.lambda,
            big_lambda: cond.big_lambda,
            alpha,
            q: sm.q,
            omega_lo: omega_p.lo,
            omega_hi: omega_p.hi,
        },
    })
}
