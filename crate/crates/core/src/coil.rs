//! Planar coils and the two kernels they induce: the flux kernel `C`
//! (emf per unit current density) and its curl `G` away from the coil
//! surface, both by surface quadrature.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{discrete_curl, norm_vector, DomainMask, Grid3, NormKind, VectorField};
use crate::math::{self, Vec3};

const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;

/// Default radial and angular node counts of the disk rule.
pub const DEFAULT_QUADRATURE: (usize, usize) = (64, 64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoilShape {
    Disk { radius: f64 },
    /// Vertices in the coil plane, ordered counter-clockwise about the normal.
    Polygon { vertices: Vec<Vec3> },
}

/// Declarative coil description as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoilSpec {
    #[serde(flatten)]
    pub shape: CoilShape,
    pub center: Vec3,
    pub normal: Vec3,
    #[serde(default = "one")]
    pub mu: f64,
    /// Current times number of turns.
    #[serde(default = "one")]
    pub strength: f64,
    #[serde(default = "default_order")]
    pub quadrature: [usize; 2],
}

fn one() -> f64 {
    1.0
}

fn default_order() -> [usize; 2] {
    [DEFAULT_QUADRATURE.0, DEFAULT_QUADRATURE.1]
}

/// A planar coil surface `D` with unit normal `n` and a positive quadrature
/// rule on it.
#[derive(Debug, Clone, PartialEq)]
pub struct Coil {
    pub shape: CoilShape,
    pub center: Vec3,
    pub normal: Vec3,
    pub mu: f64,
    pub strength: f64,
    pub nodes: Vec<Vec3>,
    pub weights: Vec<f64>,
}

impl Coil {
    pub fn disk(center: Vec3, radius: f64, normal: Vec3) -> Result<Self> {
        Self::disk_with_order(center, radius, normal, DEFAULT_QUADRATURE.0, DEFAULT_QUADRATURE.1)
    }

    /// Disk with `nr` Gauss–Legendre radial nodes times `nt` equispaced angles.
    pub fn disk_with_order(center: Vec3, radius: f64, normal: Vec3, nr: usize, nt: usize) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument(format!("disk radius {radius}")));
        }
        if nr == 0 || nt < 3 {
            return Err(Error::InvalidArgument(format!("disk quadrature {nr}x{nt}")));
        }
        let n = unit_normal(normal)?;
        let (e1, e2) = math::orthonormal_frame(n);
        let (x, w) = math::gauss_legendre(nr);
        let mut nodes = Vec::with_capacity(nr * nt);
        let mut weights = Vec::with_capacity(nr * nt);
        let dt = 2.0 * std::f64::consts::PI / nt as f64;
        for (xi, wi) in x.iter().zip(&w) {
            let s = 0.5 * radius * (xi + 1.0);
            let ws = 0.5 * radius * wi * s * dt;
            for a in 0..nt {
                let (sn, cs) = (a as f64 * dt).sin_cos();
                let off = math::add(math::scale(e1, s * cs), math::scale(e2, s * sn));
                nodes.push(math::add(center, off));
                weights.push(ws);
            }
        }
        Ok(Self {
            shape: CoilShape::Disk { radius },
            center,
            normal: n,
            mu: 1.0,
            strength: 1.0,
            nodes,
            weights,
        })
    }

    /// Planar polygon; `order` Gauss points per direction on each fan triangle.
    pub fn polygon(vertices: Vec<Vec3>, order: usize) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidArgument("polygon needs at least 3 vertices".into()));
        }
        let nv = vertices.len();
        let center = math::scale(vertices.iter().fold([0.0; 3], |a, &v| math::add(a, v)), 1.0 / nv as f64);
        // Newell's formula for the area vector.
        let mut area_vec = [0.0; 3];
        for i in 0..nv {
            area_vec = math::add(area_vec, math::cross(vertices[i], vertices[(i + 1) % nv]));
        }
        let n = unit_normal(area_vec)?;
        for v in &vertices {
            if math::dot(math::sub(*v, center), n).abs() > 1e-12 * (1.0 + math::norm(*v)) {
                return Err(Error::InvalidArgument("polygon vertices are not coplanar".into()));
            }
        }
        let (x, w) = math::gauss_legendre(order.max(1));
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for i in 0..nv {
            let (a, b) = (vertices[i], vertices[(i + 1) % nv]);
            let twice = math::dot(math::cross(math::sub(a, center), math::sub(b, center)), n);
            // Collapsed square (u, v) -> center + u (a - c) + u v (b - a), Jacobian u * twice.
            for (xu, wu) in x.iter().zip(&w) {
                let u = 0.5 * (xu + 1.0);
                for (xv, wv) in x.iter().zip(&w) {
                    let v = 0.5 * (xv + 1.0);
                    let p = math::add(
                        center,
                        math::add(math::scale(math::sub(a, center), u), math::scale(math::sub(b, a), u * v)),
                    );
                    nodes.push(p);
                    weights.push(0.25 * wu * wv * u * twice);
                }
            }
        }
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidArgument(
                "polygon must be star-shaped about its vertex centroid".into(),
            ));
        }
        Ok(Self {
            shape: CoilShape::Polygon { vertices },
            center,
            normal: n,
            mu: 1.0,
            strength: 1.0,
            nodes,
            weights,
        })
    }

    pub fn from_spec(spec: &CoilSpec) -> Result<Self> {
        let mut coil = match &spec.shape {
            CoilShape::Disk { radius } => Self::disk_with_order(
                spec.center,
                *radius,
                spec.normal,
                spec.quadrature[0],
                spec.quadrature[1],
            )?,
            CoilShape::Polygon { vertices } => {
                let c = Self::polygon(vertices.clone(), spec.quadrature[0])?;
                if math::dot(c.normal, spec.normal) < 0.0 {
                    return Err(Error::InvalidArgument(
                        "polygon vertex order disagrees with the declared normal".into(),
                    ));
                }
                c
            }
        };
        if !(spec.mu > 0.0) || !spec.strength.is_finite() {
            return Err(Error::InvalidArgument(format!("mu {} strength {}", spec.mu, spec.strength)));
        }
        coil.mu = spec.mu;
        coil.strength = spec.strength;
        Ok(coil)
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    pub fn with_strength(mut self, s: f64) -> Self {
        self.strength = s;
        self
    }

    pub fn area(&self) -> f64 {
        self.weights.iter().sum()
    }

    fn prefactor(&self) -> f64 {
        self.mu * self.strength / FOUR_PI
    }

    /// Signed offset of the coil plane along the normal, `a = y0 . n`.
    pub fn plane_offset(&self) -> f64 {
        math::dot(self.center, self.normal)
    }

    /// Euclidean distance from `x` to the surface `D`.
    pub fn distance(&self, x: Vec3) -> f64 {
        let n = self.normal;
        let rel = math::sub(x, self.center);
        let height = math::dot(rel, n);
        let inplane = math::sub(rel, math::scale(n, height));
        match &self.shape {
            CoilShape::Disk { radius } => {
                let rho = math::norm(inplane);
                let out = (rho - radius).max(0.0);
                (height * height + out * out).sqrt()
            }
            CoilShape::Polygon { vertices } => {
                let proj = math::sub(x, math::scale(n, height));
                if point_in_polygon(proj, vertices, n) {
                    return height.abs();
                }
                let nv = vertices.len();
                (0..nv)
                    .map(|i| segment_distance(x, vertices[i], vertices[(i + 1) % nv]))
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }

    fn check_clearance(&self, x: Vec3, clearance: f64) -> Result<()> {
        let d = self.distance(x);
        if d < clearance {
            return Err(Error::TooCloseToCoil {
                point: x,
                distance: d,
                clearance,
            });
        }
        Ok(())
    }

    /// `C(x) = -(mu/4pi) sum_q w (y - x) x n / |y - x|^3`.
    pub fn c_at(&self, x: Vec3) -> Vec3 {
        let n = self.normal;
        let mut acc = [0.0; 3];
        for (y, w) in self.nodes.iter().zip(&self.weights) {
            let d = math::sub(*y, x);
            let r2 = math::dot(d, d);
            let s = w / (r2 * r2.sqrt());
            acc = math::add(acc, math::scale(math::cross(d, n), s));
        }
        math::scale(acc, -self.prefactor())
    }

    /// The same quantity through the planar factorisation
    /// `-(mu/4pi) (sum w (y - x)/|y - x|^3) x n`.
    pub fn c_at_planar(&self, x: Vec3) -> Vec3 {
        let mut acc = [0.0; 3];
        for (y, w) in self.nodes.iter().zip(&self.weights) {
            let d = math::sub(*y, x);
            let r2 = math::dot(d, d);
            acc = math::add(acc, math::scale(d, w / (r2 * r2.sqrt())));
        }
        math::scale(math::cross(acc, self.normal), -self.prefactor())
    }

    /// `G(x) = -(mu/4pi) sum w [3 ((y-x).n)(y-x)/|y-x|^5 - n/|y-x|^3]`.
    pub fn g_at(&self, x: Vec3) -> Vec3 {
        let n = self.normal;
        let mut acc = [0.0; 3];
        for (y, w) in self.nodes.iter().zip(&self.weights) {
            let d = math::sub(*y, x);
            let r2 = math::dot(d, d);
            let inv3 = 1.0 / (r2 * r2.sqrt());
            let inv5 = inv3 / r2;
            let dn = math::dot(d, n);
            for a in 0..3 {
                acc[a] += w * (3.0 * dn * d[a] * inv5 - n[a] * inv3);
            }
        }
        math::scale(acc, -self.prefactor())
    }

    /// Planar form: `(y - x).n = a - x.n` is constant over `D`, so only
    /// `I5 = sum w (y-x)/|y-x|^5` and `I3 = sum w/|y-x|^3` are needed.
    pub fn g_at_planar(&self, x: Vec3) -> Vec3 {
        let n = self.normal;
        let height = self.plane_offset() - math::dot(x, n);
        let mut i5 = [0.0; 3];
        let mut i3 = 0.0;
        for (y, w) in self.nodes.iter().zip(&self.weights) {
            let d = math::sub(*y, x);
            let r2 = math::dot(d, d);
            let inv3 = 1.0 / (r2 * r2.sqrt());
            i3 += w * inv3;
            i5 = math::add(i5, math::scale(d, w * inv3 / r2));
        }
        let v = math::sub(math::scale(i5, 3.0 * height), math::scale(n, i3));
        math::scale(v, -self.prefactor())
    }

    /// `C` at every node of `grid`; every node must clear `D` by `2h`.
    pub fn eval_c(&self, grid: &Grid3) -> Result<VectorField> {
        self.eval_on(grid, |x| self.c_at(x))
    }

    pub fn eval_g(&self, grid: &Grid3) -> Result<VectorField> {
        self.eval_on(grid, |x| self.g_at(x))
    }

    fn eval_on(&self, grid: &Grid3, f: impl Fn(Vec3) -> Vec3 + Sync) -> Result<VectorField> {
        let clearance = 2.0 * grid.spacing;
        let values: Vec<Vec3> = (0..grid.len())
            .into_par_iter()
            .map(|n| {
                let x = grid.point_of(n);
                self.check_clearance(x, clearance)?;
                Ok(f(x))
            })
            .collect::<Result<_>>()?;
        VectorField::from_values(*grid, values)
    }

    /// `C` at arbitrary points with an explicit clearance.
    pub fn eval_c_points(&self, points: &[Vec3], clearance: f64) -> Result<Vec<Vec3>> {
        points
            .par_iter()
            .map(|&x| {
                self.check_clearance(x, clearance)?;
                Ok(self.c_at(x))
            })
            .collect()
    }

    pub fn eval_g_points(&self, points: &[Vec3], clearance: f64) -> Result<Vec<Vec3>> {
        points
            .par_iter()
            .map(|&x| {
                self.check_clearance(x, clearance)?;
                Ok(self.g_at(x))
            })
            .collect()
    }

    pub fn fields(&self, grid: &Grid3) -> Result<CoilFields> {
        Ok(CoilFields {
            c: self.eval_c(grid)?,
            g: self.eval_g(grid)?,
            coil: self.clone(),
        })
    }
}

/// Closed-form `|G|` on the axis of a disk of radius `r` at plane distance `d`.
pub fn disk_axis_g(mu: f64, r: f64, d: f64) -> f64 {
    mu * r * r / (2.0 * (d * d + r * r).powf(1.5))
}

fn unit_normal(n: Vec3) -> Result<Vec3> {
    let l = math::norm(n);
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::InvalidArgument(format!("normal {n:?}")));
    }
    Ok(math::scale(n, 1.0 / l))
}

fn segment_distance(x: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = math::sub(b, a);
    let t = (math::dot(math::sub(x, a), ab) / math::dot(ab, ab)).clamp(0.0, 1.0);
    math::norm(math::sub(x, math::add(a, math::scale(ab, t))))
}

fn point_in_polygon(p: Vec3, verts: &[Vec3], n: Vec3) -> bool {
    // Winding number in the plane's own 2D frame.
    let (e1, e2) = math::orthonormal_frame(n);
    let to2 = |v: Vec3| (math::dot(v, e1), math::dot(v, e2));
    let (px, py) = to2(p);
    let mut winding = 0i32;
    for i in 0..verts.len() {
        let (ax, ay) = to2(verts[i]);
        let (bx, by) = to2(verts[(i + 1) % verts.len()]);
        let side = (bx - ax) * (py - ay) - (px - ax) * (by - ay);
        if ay <= py {
            if by > py && side > 0.0 {
                winding += 1;
            }
        } else if by <= py && side < 0.0 {
            winding -= 1;
        }
    }
    winding != 0
}

/// `C` and `G` sampled on a grid.
#[derive(Debug, Clone)]
pub struct CoilFields {
    pub c: VectorField,
    pub g: VectorField,
    pub coil: Coil,
}

impl CoilFields {
    /// Rescale as if the coil strength were multiplied by `beta`.
    pub fn scaled(&self, beta: f64) -> Self {
        Self {
            c: self.c.scaled(beta),
            g: self.g.scaled(beta),
            coil: self.coil.clone().with_strength(self.coil.strength * beta),
        }
    }

    /// `G` replaced by the discrete curl of `C`. With this choice
    /// `curl_h(r J) = G_h` holds exactly for the true resistivity.
    pub fn with_discrete_g(&self) -> Self {
        Self {
            c: self.c.clone(),
            g: discrete_curl(&self.c),
            coil: self.coil.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurlIdentityReport {
    pub max_residual: f64,
    pub l2_residual: f64,
    pub l2_g: f64,
    pub relative_l2: f64,
}

/// Residual of `curl C = G` over the mask.
pub fn check_curl_identity(fields: &CoilFields, mask: &DomainMask) -> Result<CurlIdentityReport> {
    let r = discrete_curl(&fields.c).sub(&fields.g);
    let max_residual = mask
        .indices()
        .into_iter()
        .map(|n| math::norm(r.values[n]))
        .fold(0.0, f64::max);
    let l2_residual = norm_vector(&r, mask, NormKind::L2)?;
    let l2_g = norm_vector(&fields.g, mask, NormKind::L2)?;
    Ok(CurlIdentityReport {
        max_residual,
        l2_residual,
        l2_g,
        relative_l2: if l2_g > 0.0 { l2_residual / l2_g } else { 0.0 },
    })
}

/// `B(x) = (mu/4pi) sum_y q_y J(y) x (x - y)/|x - y|^3` over the mask nodes.
/// Evaluation points must lie at least `2h` outside the mask box.
pub fn biot_savart_b(j: &VectorField, mask: &DomainMask, points: &[Vec3], mu: f64) -> Result<Vec<Vec3>> {
    j.grid.ensure_same(&mask.grid, "biot_savart_b")?;
    let h = j.grid.spacing;
    let lo = mask.lower_corner();
    let hi = mask.upper_corner();
    for &p in points {
        let d = box_distance(p, lo, hi);
        if d < 2.0 * h {
            return Err(Error::PointInsideDomain(p));
        }
    }
    let sources: Vec<(Vec3, Vec3)> = mask
        .indices()
        .into_iter()
        .filter_map(|n| {
            let [i, k, l] = j.grid.coords(n);
            let q = mask.weight(i, k, l);
            let v = j.values[n];
            (v != [0.0; 3]).then(|| (j.grid.point_of(n), math::scale(v, q)))
        })
        .collect();
    Ok(points
        .par_iter()
        .map(|&x| {
            let mut acc = [0.0; 3];
            for (y, qj) in &sources {
                let d = math::sub(x, *y);
                let r2 = math::dot(d, d);
                acc = math::add(acc, math::scale(math::cross(*qj, d), 1.0 / (r2 * r2.sqrt())));
            }
            math::scale(acc, mu / FOUR_PI)
        })
        .collect())
}

pub(crate) fn box_distance(p: Vec3, lo: Vec3, hi: Vec3) -> f64 {
    let mut d2 = 0.0;
    for a in 0..3 {
        let e = (lo[a] - p[a]).max(p[a] - hi[a]).max(0.0);
        d2 += e * e;
    }
    d2.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{ScalarField, discrete_grad};
    use proptest::prelude::*;

    fn reference_disk() -> Coil {
        Coil::disk([0.0, 0.0, -1.0], 1.0, [0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn disk_rule_is_planar_with_exact_area() {
        let c = Coil::disk([0.3, -0.2, 0.7], 0.8, [1.0, 2.0, 2.0]).unwrap();
        let area = std::f64::consts::PI * 0.64;
        assert!((c.area() - area).abs() < 1e-10 * area);
        for y in &c.nodes {
            assert!(math::dot(math::sub(*y, c.center), c.normal).abs() < 1e-12);
        }
        assert!(c.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn polygon_rule_area_and_orientation() {
        let sq = vec![[0.0, 0.0, 2.0], [1.0, 0.0, 2.0], [1.0, 1.0, 2.0], [0.0, 1.0, 2.0]];
        let c = Coil::polygon(sq, 6).unwrap();
        assert!((c.area() - 1.0).abs() < 1e-12);
        assert!(math::norm(math::sub(c.normal, [0.0, 0.0, 1.0])) < 1e-14);
        assert!((c.distance([0.5, 0.5, 3.0]) - 1.0).abs() < 1e-14);
        assert!((c.distance([2.0, 0.5, 2.0]) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn on_axis_c_vanishes() {
        let c = reference_disk();
        let v = c.c_at([0.0, 0.0, 1.0]);
        assert!(math::norm(v) < 1e-15, "{v:?}");
    }

    #[test]
    fn rotation_about_axis_rotates_c() {
        let c = reference_disk();
        let x = [0.5, 0.0, 1.0];
        let base = c.c_at(x);
        for theta in [0.3, 1.1, 2.9] {
            let xr = math::rotate(x, [0.0, 0.0, 1.0], theta);
            let got = c.c_at(xr);
            let want = math::rotate(base, [0.0, 0.0, 1.0], theta);
            assert!(math::norm(math::sub(got, want)) < 1e-12 * math::norm(base));
        }
    }

    #[test]
    fn refinement_oracle_off_axis() {
        let x = [0.5, 0.0, 1.0];
        let coarse = reference_disk().c_at(x);
        let fine = Coil::disk_with_order([0.0, 0.0, -1.0], 1.0, [0.0, 0.0, 1.0], 256, 256)
            .unwrap()
            .c_at(x);
        assert!(math::norm(math::sub(coarse, fine)) < 1e-6 * math::norm(fine));
        let gc = reference_disk().g_at(x);
        let gf = Coil::disk_with_order([0.0, 0.0, -1.0], 1.0, [0.0, 0.0, 1.0], 256, 256)
            .unwrap()
            .g_at(x);
        assert!(math::norm(math::sub(gc, gf)) < 1e-6 * math::norm(gf));
    }

    #[test]
    fn axis_g_matches_closed_form() {
        let c = Coil::disk([0.0; 3], 1.0, [0.0, 0.0, 1.0]).unwrap();
        let g = c.g_at([0.0, 0.0, 2.0]);
        let exact = disk_axis_g(1.0, 1.0, 2.0);
        assert!((exact - 0.0447214).abs() < 1e-7);
        assert!((math::norm(g) - exact).abs() < 1e-6 * exact);
        assert!(g[2] < 0.0 && g[0].abs() < 1e-15 && g[1].abs() < 1e-15);
    }

    #[test]
    fn g_nonzero_on_and_off_axis() {
        let c = reference_disk();
        for z in [0.0, 0.5, 1.0, 3.0] {
            assert!(math::norm(c.g_at([0.0, 0.0, z])) > 0.0);
        }
        let g = c.g_at([0.7, 0.2, 0.5]);
        let par = math::norm(math::cross(g, c.normal));
        assert!(par > 1e-6 * math::norm(g), "G parallel to n off axis");
    }

    #[test]
    fn planar_forms_agree_with_general_quadrature() {
        let c = Coil::disk([0.1, 0.2, -0.9], 0.7, [0.2, -0.1, 1.0]).unwrap();
        for x in [[0.5, 0.0, 1.0], [-0.3, 0.8, 0.2], [2.0, 1.0, -1.0]] {
            let (a, b) = (c.c_at(x), c.c_at_planar(x));
            assert!(math::norm(math::sub(a, b)) <= 1e-12 * math::norm(a).max(1e-300));
            let (a, b) = (c.g_at(x), c.g_at_planar(x));
            assert!(math::norm(math::sub(a, b)) <= 1e-12 * math::norm(a));
        }
    }

    #[test]
    fn clearance_is_enforced() {
        let c = reference_disk();
        let g = Grid3::cube([-0.5, -0.5, -1.05], 1.0, 8).unwrap();
        assert!(matches!(c.eval_c(&g), Err(Error::TooCloseToCoil { .. })));
    }

    #[test]
    fn curl_identity_converges_at_second_order() {
        let coil = reference_disk();
        let report = |n: usize| {
            let g = Grid3::unit_cube(n).unwrap();
            let f = coil.fields(&g).unwrap();
            check_curl_identity(&f, &DomainMask::full(g)).unwrap()
        };
        let a = report(17);
        let b = report(33);
        let ratio = a.l2_residual / b.l2_residual;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
        assert!(b.relative_l2 < 5e-3);
    }

    #[test]
    fn two_turn_coil_doubles_residual() {
        let coil = reference_disk();
        let g = Grid3::unit_cube(9).unwrap();
        let f1 = coil.fields(&g).unwrap();
        let f2 = coil.clone().with_strength(2.0).fields(&g).unwrap();
        let m = DomainMask::full(g);
        let r1 = check_curl_identity(&f1, &m).unwrap();
        let r2 = check_curl_identity(&f2, &m).unwrap();
        assert!((r2.l2_residual - 2.0 * r1.l2_residual).abs() <= 1e-12 * r1.l2_residual);
    }

    #[test]
    fn g_is_divergence_and_curl_free_at_interior() {
        let coil = reference_disk();
        let interior = |n: usize| {
            let g = Grid3::unit_cube(n).unwrap();
            let gf = coil.eval_g(&g).unwrap();
            let d = crate::grid::discrete_div(&gf);
            let c = discrete_curl(&gf);
            let m = DomainMask::sub_box(g, [1; 3], [n - 2; 3]).unwrap();
            let dm = m.indices().into_iter().map(|i| d.values[i].abs()).fold(0.0, f64::max);
            let cm = m.indices().into_iter().map(|i| math::norm(c.values[i])).fold(0.0, f64::max);
            (dm, cm)
        };
        let (d1, c1) = interior(17);
        let (d2, c2) = interior(33);
        assert!(d1 / d2 > 3.0, "div ratio {}", d1 / d2);
        assert!(c1 / c2 > 3.0 || c2 < 1e-12, "curl ratio {}", c1 / c2);
    }

    #[test]
    fn reflection_through_coil_plane() {
        // C has no normal component and is even about the coil plane; G is
        // the gradient of an odd potential, so its tangential part flips.
        let c = reference_disk();
        let x = [0.4, 0.3, 0.5];
        let xm = [0.4, 0.3, -2.5];
        let (a, b) = (c.c_at(x), c.c_at(xm));
        assert!(math::norm(math::sub(a, b)) < 1e-14 && a[2] == 0.0);
        let (a, b) = (c.g_at(x), c.g_at(xm));
        assert!((a[0] + b[0]).abs() < 1e-14 && (a[1] + b[1]).abs() < 1e-14);
        assert!((a[2] - b[2]).abs() < 1e-14);
    }

    #[test]
    fn biot_savart_linear_and_zero() {
        let g = Grid3::unit_cube(9).unwrap();
        let m = DomainMask::full(g);
        let p = [[3.0, 0.5, 0.5], [0.5, -2.0, 0.1]];
        let zero = biot_savart_b(&VectorField::zeros(g), &m, &p, 1.0).unwrap();
        assert!(zero.iter().all(|v| *v == [0.0; 3]));
        let j = VectorField::from_fn(g, |x| [x[1], -x[0] * x[2], 1.0]);
        let b1 = biot_savart_b(&j, &m, &p, 1.0).unwrap();
        let b3 = biot_savart_b(&j.scaled(3.0), &m, &p, 1.0).unwrap();
        for (u, v) in b1.iter().zip(&b3) {
            assert!(math::norm(math::sub(math::scale(*u, 3.0), *v)) < 1e-12 * math::norm(*v));
        }
        assert!(matches!(
            biot_savart_b(&j, &m, &[[0.5, 0.5, 0.5]], 1.0),
            Err(Error::PointInsideDomain(_))
        ));
    }

    #[test]
    fn small_current_tube_has_dipole_far_field() {
        // J = curl(psi e3) with a compact bump psi: a closed current loop
        // with moment m = (int psi) e3.
        let g = Grid3::cube([-0.5; 3], 1.0, 33).unwrap();
        let bump = |x: Vec3| {
            let r2 = math::dot(x, x) / 0.09;
            if r2 < 1.0 {
                (1.0 - r2).powi(4)
            } else {
                0.0
            }
        };
        let psi = ScalarField::from_fn(g, bump);
        let grad = discrete_grad(&psi);
        let j = VectorField::from_fn(g, |_| [0.0; 3]).zip_with(&grad, |_, d| [d[1], -d[0], 0.0]);
        let mask = DomainMask::full(g);
        let moment = crate::grid::inner_scalar(&psi, &ScalarField::constant(g, 1.0), &mask);
        let diameter = 0.6;
        for dir in [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], math::normalize([1.0, 1.0, 1.0])] {
            let x = math::scale(dir, 10.0 * diameter);
            let b = biot_savart_b(&j, &mask, &[x], 1.0).unwrap()[0];
            let r = math::norm(x);
            let mz = [0.0, 0.0, moment];
            let rh = math::scale(x, 1.0 / r);
            let dip = math::scale(
                math::sub(math::scale(rh, 3.0 * math::dot(mz, rh)), mz),
                1.0 / (FOUR_PI * r.powi(3)),
            );
            assert!(math::norm(math::sub(b, dip)) < 0.05 * math::norm(dip), "{b:?} vs {dip:?}");
        }
    }

    proptest! {
        #[test]
        fn kernels_linear_in_mu(mu in 0.1f64..10.0, x in -0.5f64..0.5, y in -0.5f64..0.5) {
            let c1 = Coil::disk_with_order([0.0, 0.0, -1.0], 1.0, [0.0, 0.0, 1.0], 16, 16).unwrap();
            let c2 = c1.clone().with_mu(mu);
            let p = [x, y, 0.3];
            let (a, b) = (c1.c_at(p), c2.c_at(p));
            prop_assert!(math::norm(math::sub(math::scale(a, mu), b)) <= 1e-12 * math::norm(b).max(1e-30));
            let (a, b) = (c1.g_at(p), c2.g_at(p));
            prop_assert!(math::norm(math::sub(math::scale(a, mu), b)) <= 1e-12 * math::norm(b));
        }

        #[test]
        fn disjoint_coils_superpose(x in -0.5f64..0.5) {
            let a = Coil::disk_with_order([0.0, 0.0, -1.0], 0.5, [0.0, 0.0, 1.0], 12, 12).unwrap();
            let b = Coil::disk_with_order([0.0, 0.0, 2.0], 0.5, [0.0, 0.0, 1.0], 12, 12).unwrap();
            let mut u = a.clone();
            u.nodes.extend(b.nodes.iter().copied());
            u.weights.extend(b.weights.iter().copied());
            let p = [x, 0.1, 0.4];
            let sum = math::add(a.c_at(p), b.c_at(p));
            prop_assert!(math::norm(math::sub(sum, u.c_at(p))) <= 1e-13 * math::norm(sum).max(1e-30));
        }
    }
}
