//! Shared inputs for the benchmarks.

use maet_core::acoustic_inverse::Geometry;
use maet_core::forward::{covering_times, SphereRule, SphericalMeanOperator};
use maet_core::{Grid3, ScalarField, VectorField};

pub fn bump_sigma(grid: Grid3) -> ScalarField {
    ScalarField::from_fn(grid, |x| {
        let d: f64 = (0..3).map(|i| (x[i] - 0.5).powi(2)).sum();
        1.0 + 0.5 * (-d / 0.03).exp()
    })
}

pub fn rotational_field(grid: Grid3) -> VectorField {
    VectorField::from_fn(grid, |x| [-x[1], x[0], 0.1 * x[2]])
}

/// Spherical-mean operator on `[-1, 1]^3` with `count` centres and `times` radii.
pub fn mean_operator(n: usize, count: usize, times: usize) -> SphericalMeanOperator {
    let grid = Grid3::cube([-1.0; 3], 2.0, n).expect("valid grid");
    let centers = Geometry::Sphere {
        center: [0.0; 3],
        radius: 2.2,
        count,
    }
    .centers()
    .expect("valid geometry");
    let t = covering_times(&grid, &centers, 0.0, 1.0, times);
    SphericalMeanOperator::new(grid, centers, t, 1.0, SphereRule::Spacing(grid.spacing)).expect("valid operator")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_have_expected_shapes() {
        let op = mean_operator(8, 4, 6);
        assert_eq!(op.rows(), 24);
        assert_eq!(op.cols(), 512);
        let g = Grid3::unit_cube(5).unwrap();
        assert_eq!(bump_sigma(g).values.len(), 125);
    }
}
