//! Uniform Cartesian grids, node-collocated scalar and vector fields, the
//! second-order difference operators built on them, and discrete norms.
//!
//! Nodes are stored x-fastest: the node `(i, j, k)` lives at
//! `i + nx * (j + ny * k)` and sits at `origin + h * (i, j, k)`. Vector
//! fields store their `(x, y, z)` components interleaved per node.
//!
//! Derivatives use central differences at interior nodes and second-order
//! one-sided stencils on the first and last node of every grid line. Each
//! operator also has its exact matrix transpose, which the least-squares
//! solvers rely on.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Vec3};

/// Minimum number of nodes along each axis.
pub const MIN_NODES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub dims: [usize; 3],
    pub origin: Vec3,
    pub spacing: f64,
}

impl Grid3 {
    pub fn new(dims: [usize; 3], origin: Vec3, spacing: f64) -> Result<Self> {
        if dims.iter().any(|&n| n < MIN_NODES) {
            return Err(Error::InvalidGrid(format!(
                "dims {dims:?}: every axis needs at least {MIN_NODES} nodes"
            )));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidGrid(format!("spacing {spacing} must be positive")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!("origin {origin:?} is not finite")));
        }
        Ok(Self {
            dims,
            origin,
            spacing,
        })
    }

    /// Cube `[lo, lo + side]^3` sampled with `n` nodes per axis.
    pub fn cube(lo: Vec3, side: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidGrid(format!("{n} nodes per axis")));
        }
        Self::new([n; 3], lo, side / (n - 1) as f64)
    }

    /// Unit cube `[0, 1]^3` with `n` nodes per axis.
    pub fn unit_cube(n: usize) -> Result<Self> {
        Self::cube([0.0; 3], 1.0, n)
    }

    /// Box `[lo, hi]` with spacing `h`; `hi - lo` must be a multiple of `h`
    /// up to 1e-9 relative.
    pub fn from_bounds(lo: Vec3, hi: Vec3, h: f64) -> Result<Self> {
        let mut dims = [0; 3];
        for d in 0..3 {
            let cells = (hi[d] - lo[d]) / h;
            let rounded = cells.round();
            if (cells - rounded).abs() > 1e-9 * cells.max(1.0) || rounded < 1.0 {
                return Err(Error::InvalidGrid(format!(
                    "extent {} along axis {d} is not a multiple of spacing {h}",
                    hi[d] - lo[d]
                )));
            }
            dims[d] = rounded as usize + 1;
        }
        Self::new(dims, lo, h)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.spacing;
        [
            self.origin[0] + h * i as f64,
            self.origin[1] + h * j as f64,
            self.origin[2] + h * k as f64,
        ]
    }

    #[inline]
    pub fn point_of(&self, idx: usize) -> Vec3 {
        let [i, j, k] = self.coords(idx);
        self.point(i, j, k)
    }

    /// Corner opposite the origin.
    pub fn upper(&self) -> Vec3 {
        self.point(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1)
    }

    pub fn center(&self) -> Vec3 {
        math::scale(math::add(self.origin, self.upper()), 0.5)
    }

    pub fn extent(&self) -> Vec3 {
        math::sub(self.upper(), self.origin)
    }

    pub fn diameter(&self) -> f64 {
        math::norm(self.extent())
    }

    /// Distance from `p` to the closed box spanned by the grid (0 inside).
    pub fn distance_to_box(&self, p: Vec3) -> f64 {
        let lo = self.origin;
        let hi = self.upper();
        let mut d2 = 0.0;
        for a in 0..3 {
            let e = if p[a] < lo[a] {
                lo[a] - p[a]
            } else if p[a] > hi[a] {
                p[a] - hi[a]
            } else {
                0.0
            };
            d2 += e * e;
        }
        d2.sqrt()
    }

    /// Grid extended by `margin` nodes on every side, same spacing.
    pub fn padded(&self, margin: usize) -> Self {
        let h = self.spacing;
        let m = margin as f64 * h;
        Self {
            dims: [
                self.dims[0] + 2 * margin,
                self.dims[1] + 2 * margin,
                self.dims[2] + 2 * margin,
            ],
            origin: [self.origin[0] - m, self.origin[1] - m, self.origin[2] - m],
            spacing: h,
        }
    }

    /// Integer node offset of `inner` inside `self`, if `inner` is an
    /// aligned sub-grid with the same spacing.
    pub fn offset_of(&self, inner: &Grid3) -> Result<[usize; 3]> {
        if (self.spacing - inner.spacing).abs() > 1e-12 * self.spacing {
            return Err(Error::GridMismatch(format!(
                "spacing {} vs {}",
                self.spacing, inner.spacing
            )));
        }
        let mut off = [0; 3];
        for d in 0..3 {
            let s = (inner.origin[d] - self.origin[d]) / self.spacing;
            let r = s.round();
            if (s - r).abs() > 1e-6 || r < 0.0 || r as usize + inner.dims[d] > self.dims[d] {
                return Err(Error::GridMismatch(format!(
                    "grid with origin {:?} is not an aligned sub-grid",
                    inner.origin
                )));
            }
            off[d] = r as usize;
        }
        Ok(off)
    }

    pub fn same_as(&self, other: &Grid3) -> bool {
        self.dims == other.dims
            && (self.spacing - other.spacing).abs() <= 1e-12 * self.spacing
            && (0..3).all(|d| (self.origin[d] - other.origin[d]).abs() <= 1e-9 * self.spacing)
    }

    pub fn ensure_same(&self, other: &Grid3, what: &str) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{what}: {self:?} vs {other:?}")))
        }
    }

    #[inline]
    fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[0] * self.dims[1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid3,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid3) -> Self {
        Self {
            values: vec![0.0; grid.len()],
            grid,
        }
    }

    pub fn constant(grid: Grid3, c: f64) -> Self {
        Self {
            values: vec![c; grid.len()],
            grid,
        }
    }

    pub fn from_fn(grid: Grid3, f: impl Fn(Vec3) -> f64) -> Self {
        let values = (0..grid.len()).map(|n| f(grid.point_of(n))).collect();
        Self { grid, values }
    }

    pub fn from_values(grid: Grid3, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scalar field"));
        }
        Ok(Self { grid, values })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.grid.index(i, j, k)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert!(self.grid.same_as(&other.grid));
        Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Values of the aligned sub-grid `inner`.
    pub fn restrict(&self, inner: &Grid3) -> Result<Self> {
        let off = self.grid.offset_of(inner)?;
        let mut values = Vec::with_capacity(inner.len());
        for k in 0..inner.dims[2] {
            for j in 0..inner.dims[1] {
                for i in 0..inner.dims[0] {
                    values.push(self.at(i + off[0], j + off[1], k + off[2]));
                }
            }
        }
        Ok(Self {
            grid: *inner,
            values,
        })
    }

    /// Copy into the larger grid `outer`, zero elsewhere.
    pub fn embed(&self, outer: &Grid3) -> Result<Self> {
        let off = outer.offset_of(&self.grid)?;
        let mut out = Self::zeros(*outer);
        let g = self.grid;
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    out.values[outer.index(i + off[0], j + off[1], k + off[2])] = self.at(i, j, k);
                }
            }
        }
        Ok(out)
    }

    /// Trilinear interpolation; zero outside the grid box.
    pub fn sample(&self, p: Vec3) -> f64 {
        match trilinear_stencil(&self.grid, p) {
            Some((base, w)) => {
                let g = &self.grid;
                let (sx, sy, sz) = (1, g.dims[0], g.dims[0] * g.dims[1]);
                let v = &self.values;
                w[0] * v[base]
                    + w[1] * v[base + sx]
                    + w[2] * v[base + sy]
                    + w[3] * v[base + sx + sy]
                    + w[4] * v[base + sz]
                    + w[5] * v[base + sx + sz]
                    + w[6] * v[base + sy + sz]
                    + w[7] * v[base + sx + sy + sz]
            }
            None => 0.0,
        }
    }

    /// Adjoint of [`ScalarField::sample`]: adds `value` times the trilinear
    /// weights of `p` into the nodes.
    pub fn splat(&mut self, p: Vec3, value: f64) {
        if let Some((base, w)) = trilinear_stencil(&self.grid, p) {
            let g = self.grid;
            let (sx, sy, sz) = (1, g.dims[0], g.dims[0] * g.dims[1]);
            let v = &mut self.values;
            v[base] += w[0] * value;
            v[base + sx] += w[1] * value;
            v[base + sy] += w[2] * value;
            v[base + sx + sy] += w[3] * value;
            v[base + sz] += w[4] * value;
            v[base + sx + sz] += w[5] * value;
            v[base + sy + sz] += w[6] * value;
            v[base + sx + sy + sz] += w[7] * value;
        }
    }
}

/// Base node index and the eight corner weights of the cell holding `p`.
#[inline]
pub(crate) fn trilinear_stencil(g: &Grid3, p: Vec3) -> Option<(usize, [f64; 8])> {
    let h = g.spacing;
    let mut base = [0usize; 3];
    let mut t = [0.0; 3];
    for d in 0..3 {
        let s = (p[d] - g.origin[d]) / h;
        let last = (g.dims[d] - 1) as f64;
        if !(s >= 0.0 && s <= last) {
            return None;
        }
        let c = (s.floor() as usize).min(g.dims[d] - 2);
        base[d] = c;
        t[d] = s - c as f64;
    }
    let (ux, uy, uz) = (1.0 - t[0], 1.0 - t[1], 1.0 - t[2]);
    Some((
        g.index(base[0], base[1], base[2]),
        [
            ux * uy * uz,
            t[0] * uy * uz,
            ux * t[1] * uz,
            t[0] * t[1] * uz,
            ux * uy * t[2],
            t[0] * uy * t[2],
            ux * t[1] * t[2],
            t[0] * t[1] * t[2],
        ],
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub grid: Grid3,
    pub values: Vec<Vec3>,
}

impl VectorField {
    pub fn zeros(grid: Grid3) -> Self {
        Self {
            values: vec![[0.0; 3]; grid.len()],
            grid,
        }
    }

    pub fn constant(grid: Grid3, c: Vec3) -> Self {
        Self {
            values: vec![c; grid.len()],
            grid,
        }
    }

    pub fn from_fn(grid: Grid3, f: impl Fn(Vec3) -> Vec3) -> Self {
        let values = (0..grid.len()).map(|n| f(grid.point_of(n))).collect();
        Self { grid, values }
    }

    pub fn from_values(grid: Grid3, values: Vec<Vec3>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} vectors for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector field"));
        }
        Ok(Self { grid, values })
    }

    pub fn from_components(c: [&ScalarField; 3]) -> Self {
        let grid = c[0].grid;
        let values = (0..grid.len())
            .map(|n| [c[0].values[n], c[1].values[n], c[2].values[n]])
            .collect();
        Self { grid, values }
    }

    pub fn component(&self, d: usize) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: self.values.iter().map(|v| v[d]).collect(),
        }
    }

    pub fn magnitude(&self) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: self.values.iter().map(|&v| math::norm(v)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| math::scale(v, s)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(Vec3, Vec3) -> Vec3) -> Self {
        debug_assert!(self.grid.same_as(&other.grid));
        Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, math::add)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, math::sub)
    }

    /// Node-wise product with a scalar field.
    pub fn mul_scalar(&self, s: &ScalarField) -> Self {
        debug_assert!(self.grid.same_as(&s.grid));
        Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&s.values)
                .map(|(&v, &a)| math::scale(v, a))
                .collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| math::dot(a, b))
                .collect(),
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, &v| m.max(math::norm(v)))
    }

    /// Componentwise trilinear interpolation; zero outside the grid box.
    pub fn sample(&self, p: Vec3) -> Vec3 {
        match trilinear_stencil(&self.grid, p) {
            Some((base, w)) => {
                let g = &self.grid;
                let (sx, sy, sz) = (1, g.dims[0], g.dims[0] * g.dims[1]);
                let offs = [0, sx, sy, sx + sy, sz, sx + sz, sy + sz, sx + sy + sz];
                let mut acc = [0.0; 3];
                for (o, wk) in offs.iter().zip(&w) {
                    let v = self.values[base + o];
                    acc[0] += wk * v[0];
                    acc[1] += wk * v[1];
                    acc[2] += wk * v[2];
                }
                acc
            }
            None => [0.0; 3],
        }
    }

    pub fn restrict(&self, inner: &Grid3) -> Result<Self> {
        let c: Vec<ScalarField> = (0..3)
            .map(|d| self.component(d).restrict(inner))
            .collect::<Result<_>>()?;
        Ok(Self::from_components([&c[0], &c[1], &c[2]]))
    }

    pub fn embed(&self, outer: &Grid3) -> Result<Self> {
        let c: Vec<ScalarField> = (0..3)
            .map(|d| self.component(d).embed(outer))
            .collect::<Result<_>>()?;
        Ok(Self::from_components([&c[0], &c[1], &c[2]]))
    }
}

/// Axis-aligned box of nodes `lo..=hi` inside a grid. The conductor and
/// any sub-region such as the stability region are represented this way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainMask {
    pub grid: Grid3,
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

/// One exposed face of a boundary node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFace {
    pub node: usize,
    pub normal: Vec3,
    /// Trapezoidal area weight of the node on this face.
    pub area: f64,
}

impl DomainMask {
    pub fn full(grid: Grid3) -> Self {
        Self {
            grid,
            lo: [0; 3],
            hi: [grid.dims[0] - 1, grid.dims[1] - 1, grid.dims[2] - 1],
        }
    }

    pub fn sub_box(grid: Grid3, lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        for d in 0..3 {
            if lo[d] >= hi[d] || hi[d] >= grid.dims[d] {
                return Err(Error::InvalidArgument(format!(
                    "node box {lo:?}..={hi:?} does not fit grid dims {:?}",
                    grid.dims
                )));
            }
        }
        Ok(Self { grid, lo, hi })
    }

    /// Nodes whose coordinates fall in the closed physical box `[a, b]`.
    pub fn from_physical(grid: Grid3, a: Vec3, b: Vec3) -> Result<Self> {
        let h = grid.spacing;
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for d in 0..3 {
            let l = ((a[d] - grid.origin[d]) / h - 1e-9).ceil().max(0.0) as usize;
            let u = ((b[d] - grid.origin[d]) / h + 1e-9).floor();
            if u < 0.0 {
                return Err(Error::InvalidArgument(format!("box {a:?}..{b:?} misses the grid")));
            }
            lo[d] = l;
            hi[d] = (u as usize).min(grid.dims[d] - 1);
        }
        Self::sub_box(grid, lo, hi)
    }

    #[inline]
    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        (self.lo[0]..=self.hi[0]).contains(&i)
            && (self.lo[1]..=self.hi[1]).contains(&j)
            && (self.lo[2]..=self.hi[2]).contains(&k)
    }

    pub fn contains_index(&self, idx: usize) -> bool {
        let [i, j, k] = self.grid.coords(idx);
        self.contains(i, j, k)
    }

    pub fn count(&self) -> usize {
        (0..3).map(|d| self.hi[d] - self.lo[d] + 1).product()
    }

    /// Node indices inside the mask, x-fastest.
    pub fn indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.count());
        for k in self.lo[2]..=self.hi[2] {
            for j in self.lo[1]..=self.hi[1] {
                for i in self.lo[0]..=self.hi[0] {
                    out.push(self.grid.index(i, j, k));
                }
            }
        }
        out
    }

    /// Dual-cell volume of a node: `h^3` halved once per mask face it lies on.
    #[inline]
    pub fn weight(&self, i: usize, j: usize, k: usize) -> f64 {
        if !self.contains(i, j, k) {
            return 0.0;
        }
        let h = self.grid.spacing;
        let mut w = h * h * h;
        for (d, c) in [i, j, k].into_iter().enumerate() {
            if c == self.lo[d] || c == self.hi[d] {
                w *= 0.5;
            }
        }
        w
    }

    /// Quadrature weights over the whole grid (zero outside the mask).
    pub fn weights(&self) -> Vec<f64> {
        (0..self.grid.len())
            .map(|n| {
                let [i, j, k] = self.grid.coords(n);
                self.weight(i, j, k)
            })
            .collect()
    }

    pub fn volume(&self) -> f64 {
        let h = self.grid.spacing;
        (0..3).map(|d| (self.hi[d] - self.lo[d]) as f64 * h).product()
    }

    pub fn lower_corner(&self) -> Vec3 {
        self.grid.point(self.lo[0], self.lo[1], self.lo[2])
    }

    pub fn upper_corner(&self) -> Vec3 {
        self.grid.point(self.hi[0], self.hi[1], self.hi[2])
    }

    pub fn boundary_area(&self) -> f64 {
        let h = self.grid.spacing;
        let e: Vec<f64> = (0..3).map(|d| (self.hi[d] - self.lo[d]) as f64 * h).collect();
        2.0 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])
    }

    #[inline]
    pub fn is_boundary(&self, i: usize, j: usize, k: usize) -> bool {
        self.contains(i, j, k)
            && [i, j, k]
                .into_iter()
                .enumerate()
                .any(|(d, c)| c == self.lo[d] || c == self.hi[d])
    }

    /// Every exposed face of every boundary node, with outward normals
    /// `±e_d` and trapezoidal face-area weights.
    pub fn boundary_faces(&self) -> Vec<BoundaryFace> {
        let h = self.grid.spacing;
        let mut faces = Vec::new();
        for node in self.indices() {
            let c = self.grid.coords(node);
            for d in 0..3 {
                for (side, sign) in [(self.lo[d], -1.0), (self.hi[d], 1.0)] {
                    if c[d] != side {
                        continue;
                    }
                    let mut area = h * h;
                    for t in (0..3).filter(|&t| t != d) {
                        if c[t] == self.lo[t] || c[t] == self.hi[t] {
                            area *= 0.5;
                        }
                    }
                    let mut normal = [0.0; 3];
                    normal[d] = sign;
                    faces.push(BoundaryFace { node, normal, area });
                }
            }
        }
        faces
    }

    /// Unique boundary node indices.
    pub fn boundary_nodes(&self) -> Vec<usize> {
        self.indices()
            .into_iter()
            .filter(|&n| {
                let [i, j, k] = self.grid.coords(n);
                self.is_boundary(i, j, k)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Difference operators

/// `d/dx_axis` of a node array along one axis.
pub fn diff_axis(values: &[f64], grid: &Grid3, axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    diff_axis_into(values, grid, axis, &mut out, false);
    out
}

/// Exact transpose of [`diff_axis`].
pub fn diff_axis_transpose(values: &[f64], grid: &Grid3, axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    diff_axis_into(values, grid, axis, &mut out, true);
    out
}

fn diff_axis_into(v: &[f64], g: &Grid3, axis: usize, out: &mut [f64], transpose: bool) {
    let n = g.dims[axis];
    let s = g.stride(axis);
    let inv = 0.5 / g.spacing;
    let line_starts = line_starts(g, axis);
    for start in line_starts {
        let at = |m: usize| start + m * s;
        if !transpose {
            out[at(0)] = (-3.0 * v[at(0)] + 4.0 * v[at(1)] - v[at(2)]) * inv;
            for m in 1..n - 1 {
                out[at(m)] = (v[at(m + 1)] - v[at(m - 1)]) * inv;
            }
            out[at(n - 1)] = (3.0 * v[at(n - 1)] - 4.0 * v[at(n - 2)] + v[at(n - 3)]) * inv;
        } else {
            for m in 0..n {
                out[at(m)] = 0.0;
            }
            // Scatter every row of the forward operator.
            let y0 = v[at(0)] * inv;
            out[at(0)] -= 3.0 * y0;
            out[at(1)] += 4.0 * y0;
            out[at(2)] -= y0;
            for m in 1..n - 1 {
                let y = v[at(m)] * inv;
                out[at(m + 1)] += y;
                out[at(m - 1)] -= y;
            }
            let yl = v[at(n - 1)] * inv;
            out[at(n - 1)] += 3.0 * yl;
            out[at(n - 2)] -= 4.0 * yl;
            out[at(n - 3)] += yl;
        }
    }
}

fn line_starts(g: &Grid3, axis: usize) -> Vec<usize> {
    let [nx, ny, nz] = g.dims;
    let mut starts = Vec::new();
    match axis {
        0 => {
            for k in 0..nz {
                for j in 0..ny {
                    starts.push(g.index(0, j, k));
                }
            }
        }
        1 => {
            for k in 0..nz {
                for i in 0..nx {
                    starts.push(g.index(i, 0, k));
                }
            }
        }
        _ => {
            for j in 0..ny {
                for i in 0..nx {
                    starts.push(g.index(i, j, 0));
                }
            }
        }
    }
    starts
}

fn components(f: &VectorField) -> [Vec<f64>; 3] {
    let mut c = [
        Vec::with_capacity(f.values.len()),
        Vec::with_capacity(f.values.len()),
        Vec::with_capacity(f.values.len()),
    ];
    for v in &f.values {
        c[0].push(v[0]);
        c[1].push(v[1]);
        c[2].push(v[2]);
    }
    c
}

fn assemble(grid: Grid3, c: [Vec<f64>; 3]) -> VectorField {
    let values = (0..grid.len()).map(|n| [c[0][n], c[1][n], c[2][n]]).collect();
    VectorField { grid, values }
}

pub fn discrete_grad(f: &ScalarField) -> VectorField {
    let g = &f.grid;
    assemble(
        *g,
        [
            diff_axis(&f.values, g, 0),
            diff_axis(&f.values, g, 1),
            diff_axis(&f.values, g, 2),
        ],
    )
}

/// Transpose of [`discrete_grad`] as a linear map (not the negative divergence).
pub fn discrete_grad_transpose(v: &VectorField) -> ScalarField {
    let g = &v.grid;
    let c = components(v);
    let mut out = diff_axis_transpose(&c[0], g, 0);
    for (a, y) in out.iter_mut().zip(diff_axis_transpose(&c[1], g, 1)) {
        *a += y;
    }
    for (a, y) in out.iter_mut().zip(diff_axis_transpose(&c[2], g, 2)) {
        *a += y;
    }
    ScalarField {
        grid: *g,
        values: out,
    }
}

pub fn discrete_div(f: &VectorField) -> ScalarField {
    let g = &f.grid;
    let c = components(f);
    let mut out = diff_axis(&c[0], g, 0);
    for (a, y) in out.iter_mut().zip(diff_axis(&c[1], g, 1)) {
        *a += y;
    }
    for (a, y) in out.iter_mut().zip(diff_axis(&c[2], g, 2)) {
        *a += y;
    }
    ScalarField {
        grid: *g,
        values: out,
    }
}

pub fn discrete_curl(f: &VectorField) -> VectorField {
    let g = &f.grid;
    let [fx, fy, fz] = components(f);
    let dy_fz = diff_axis(&fz, g, 1);
    let dz_fy = diff_axis(&fy, g, 2);
    let dz_fx = diff_axis(&fx, g, 2);
    let dx_fz = diff_axis(&fz, g, 0);
    let dx_fy = diff_axis(&fy, g, 0);
    let dy_fx = diff_axis(&fx, g, 1);
    let values = (0..g.len())
        .map(|n| [dy_fz[n] - dz_fy[n], dz_fx[n] - dx_fz[n], dx_fy[n] - dy_fx[n]])
        .collect();
    VectorField { grid: *g, values }
}

/// Exact transpose of [`discrete_curl`].
pub fn discrete_curl_transpose(f: &VectorField) -> VectorField {
    let g = &f.grid;
    let [vx, vy, vz] = components(f);
    // curl = [[0, -Dz, Dy], [Dz, 0, -Dx], [-Dy, Dx, 0]]
    let dzt_vy = diff_axis_transpose(&vy, g, 2);
    let dyt_vz = diff_axis_transpose(&vz, g, 1);
    let dzt_vx = diff_axis_transpose(&vx, g, 2);
    let dxt_vz = diff_axis_transpose(&vz, g, 0);
    let dyt_vx = diff_axis_transpose(&vx, g, 1);
    let dxt_vy = diff_axis_transpose(&vy, g, 0);
    let values = (0..g.len())
        .map(|n| {
            [
                dzt_vy[n] - dyt_vz[n],
                dxt_vz[n] - dzt_vx[n],
                dyt_vx[n] - dxt_vy[n],
            ]
        })
        .collect();
    VectorField { grid: *g, values }
}

// ---------------------------------------------------------------------------
// Norms

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    L1,
    L2,
    Lq(f64),
    Linf,
    Hcurl,
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            "linf" => Ok(Self::Linf),
            "hcurl" => Ok(Self::Hcurl),
            other => match other.strip_prefix('l').map(str::parse::<f64>) {
                Some(Ok(q)) => Ok(Self::Lq(q)),
                _ => Err(Error::InvalidArgument(format!("unknown norm kind {s:?}"))),
            },
        }
    }
}

fn lq_of(values: impl Iterator<Item = (f64, f64)>, kind: NormKind) -> Result<f64> {
    match kind {
        NormKind::L1 => Ok(values.map(|(w, a)| w * a).sum()),
        NormKind::L2 => Ok(values.map(|(w, a)| w * a * a).sum::<f64>().sqrt()),
        NormKind::Lq(q) => {
            if !(q >= 1.0 && q.is_finite()) {
                return Err(Error::InvalidArgument(format!("L^q norm needs q in [1, inf), got {q}")));
            }
            Ok(values.map(|(w, a)| w * a.powf(q)).sum::<f64>().powf(1.0 / q))
        }
        NormKind::Linf => Ok(values.filter(|(w, _)| *w > 0.0).fold(0.0, |m, (_, a)| m.max(a))),
        NormKind::Hcurl => Err(Error::InvalidArgument(
            "H(curl) norm is defined for vector fields only".into(),
        )),
    }
}

/// Discrete norm of a scalar field over the mask (dual-cell quadrature).
pub fn norm_scalar(f: &ScalarField, mask: &DomainMask, kind: NormKind) -> Result<f64> {
    f.grid.ensure_same(&mask.grid, "norm")?;
    let idx = mask.indices();
    lq_of(
        idx.iter().map(|&n| {
            let [i, j, k] = mask.grid.coords(n);
            (mask.weight(i, j, k), f.values[n].abs())
        }),
        kind,
    )
}

/// Discrete norm of a vector field (pointwise Euclidean magnitude).
pub fn norm_vector(f: &VectorField, mask: &DomainMask, kind: NormKind) -> Result<f64> {
    f.grid.ensure_same(&mask.grid, "norm")?;
    if let NormKind::Hcurl = kind {
        let curl = discrete_curl(f);
        return Ok(norm_vector(f, mask, NormKind::L2)? + norm_vector(&curl, mask, NormKind::L2)?);
    }
    let idx = mask.indices();
    lq_of(
        idx.iter().map(|&n| {
            let [i, j, k] = mask.grid.coords(n);
            (mask.weight(i, j, k), math::norm(f.values[n]))
        }),
        kind,
    )
}

/// Weighted inner product over the mask.
pub fn inner_scalar(a: &ScalarField, b: &ScalarField, mask: &DomainMask) -> f64 {
    mask.indices()
        .into_iter()
        .map(|n| {
            let [i, j, k] = mask.grid.coords(n);
            mask.weight(i, j, k) * a.values[n] * b.values[n]
        })
        .sum()
}

pub fn inner_vector(a: &VectorField, b: &VectorField, mask: &DomainMask) -> f64 {
    mask.indices()
        .into_iter()
        .map(|n| {
            let [i, j, k] = mask.grid.coords(n);
            mask.weight(i, j, k) * math::dot(a.values[n], b.values[n])
        })
        .sum()
}

/// Weighted mean over the mask.
pub fn mean(f: &ScalarField, mask: &DomainMask) -> f64 {
    let ones = ScalarField::constant(f.grid, 1.0);
    inner_scalar(f, &ones, mask) / mask.volume()
}

// ---------------------------------------------------------------------------
// Hölder norm on the boundary

/// Node count above which the Hölder scan switches to a pair subsample.
pub const HOLDER_ALL_PAIRS_LIMIT: usize = 4096;
const HOLDER_SEED: u64 = 0x5EED_C0A1;

/// `sup |f| + max |f(x) - f(y)| / |x - y|^alpha` over the boundary nodes of
/// the mask. Exact over all pairs when there are at most 4096 nodes; beyond
/// that, a fixed-seed stratified subsample of 4096 nodes (hence 4096^2
/// pairs) is scanned.
pub fn holder_seminorm_boundary(f: &ScalarField, mask: &DomainMask, alpha: f64) -> Result<f64> {
    f.grid.ensure_same(&mask.grid, "holder")?;
    let nodes = mask.boundary_nodes();
    let pts: Vec<Vec3> = nodes.iter().map(|&n| f.grid.point_of(n)).collect();
    let vals: Vec<f64> = nodes.iter().map(|&n| f.values[n]).collect();
    let (sup, semi) = holder_parts(&pts, &vals, alpha)?;
    Ok(sup + semi)
}

/// `(sup |v|, Hölder seminorm)` of scattered samples; pairs at zero
/// distance are skipped.
pub fn holder_parts(points: &[Vec3], values: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("Hölder exponent {alpha} outside (0, 1)")));
    }
    let sup = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let chosen: Vec<usize> = if points.len() <= HOLDER_ALL_PAIRS_LIMIT {
        (0..points.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(HOLDER_SEED);
        let n = points.len();
        let m = HOLDER_ALL_PAIRS_LIMIT;
        (0..m)
            .map(|s| {
                let a = s * n / m;
                let b = ((s + 1) * n / m).max(a + 1);
                let stratum: Vec<usize> = (a..b).collect();
                *stratum.choose(&mut rng).expect("non-empty stratum")
            })
            .collect()
    };
    let mut semi = 0.0f64;
    for (a, &p) in chosen.iter().enumerate() {
        for &q in &chosen[a + 1..] {
            let dist = math::norm(math::sub(points[p], points[q]));
            if dist <= 0.0 {
                continue;
            }
            let r = (values[p] - values[q]).abs() / dist.powf(alpha);
            semi = semi.max(r);
        }
    }
    Ok((sup, semi))
}
