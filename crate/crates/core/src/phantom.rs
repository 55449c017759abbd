//! Conductivity phantoms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elliptic::Conductivity;
use crate::error::{Error, Result};
use crate::grid::{Grid3, ScalarField};
use crate::math::{self, Vec3};

/// `amplitude * exp(-|x - center|^2 / (2 width^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: Vec3,
    pub width: f64,
    pub amplitude: f64,
}

impl Bump {
    pub fn eval(&self, x: Vec3) -> f64 {
        let d = math::sub(x, self.center);
        self.amplitude * (-math::dot(d, d) / (2.0 * self.width * self.width)).exp()
    }
}

fn default_background() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhantomSpec {
    Constant {
        value: f64,
    },
    GaussianBumps {
        #[serde(default = "default_background")]
        background: f64,
        bumps: Vec<Bump>,
    },
    /// Piecewise-constant layers along `axis`, blended with `tanh` over
    /// `smoothing` so the gradient stays bounded.
    Layered {
        axis: usize,
        interfaces: Vec<f64>,
        values: Vec<f64>,
        smoothing: f64,
    },
    /// `count` bumps with centres, widths and amplitudes drawn from the
    /// experiment seed.
    RandomBumps {
        #[serde(default = "default_background")]
        background: f64,
        count: usize,
        width: [f64; 2],
        amplitude: [f64; 2],
        /// Fraction of the box (per side) kept free of bump centres.
        #[serde(default)]
        inset: f64,
    },
}

impl PhantomSpec {
    /// Samples the phantom; only `RandomBumps` reads `seed`.
    pub fn build(&self, grid: Grid3, seed: u64) -> Result<ScalarField> {
        match self {
            Self::Constant { value } => Ok(ScalarField::constant(grid, *value)),
            Self::GaussianBumps { background, bumps } => Ok(bump_field(grid, *background, bumps)),
            Self::Layered {
                axis,
                interfaces,
                values,
                smoothing,
            } => {
                if *axis > 2 || values.len() != interfaces.len() + 1 || !(*smoothing > 0.0) {
                    return Err(Error::Config(format!(
                        "layered phantom needs axis < 3, one more value than interfaces and smoothing > 0 \
                         (axis {axis}, {} interfaces, {} values)",
                        interfaces.len(),
                        values.len()
                    )));
                }
                Ok(ScalarField::from_fn(grid, |x| {
                    let mut v = values[0];
                    for (i, &z) in interfaces.iter().enumerate() {
                        let s = 0.5 * (1.0 + ((x[*axis] - z) / smoothing).tanh());
                        v += s * (values[i + 1] - values[i]);
                    }
                    v
                }))
            }
            Self::RandomBumps {
                background,
                count,
                width,
                amplitude,
                inset,
            } => Ok(bump_field(grid, *background, &random_bumps(grid, *count, *width, *amplitude, *inset, seed))),
        }
    }

    /// Builds and checks membership in the admissible class.
    pub fn build_admissible(&self, grid: Grid3, seed: u64, lambda: f64, big_lambda: f64) -> Result<Conductivity> {
        Conductivity::new(self.build(grid, seed)?, lambda, big_lambda)
    }
}

pub fn bump_field(grid: Grid3, background: f64, bumps: &[Bump]) -> ScalarField {
    ScalarField::from_fn(grid, |x| background + bumps.iter().map(|b| b.eval(x)).sum::<f64>())
}

/// Seeded bumps with centres inside the box shrunk by `inset` per side.
pub fn random_bumps(grid: Grid3, count: usize, width: [f64; 2], amplitude: [f64; 2], inset: f64, seed: u64) -> Vec<Bump> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = grid.origin;
    let ext = grid.extent();
    let span = |r: &mut ChaCha8Rng, [a, b]: [f64; 2]| if b > a { r.random_range(a..b) } else { a };
    (0..count)
        .map(|_| {
            let center = [0, 1, 2].map(|d| lo[d] + ext[d] * (inset + (1.0 - 2.0 * inset) * rng.random::<f64>()));
            Bump {
                center,
                width: span(&mut rng, width),
                amplitude: span(&mut rng, amplitude),
            }
        })
        .collect()
}
