//! Experiment configuration (JSON) and its validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acoustic_inverse::{Geometry, InverseSourceConfig};
use crate::coil::{Coil, CoilSpec};
use crate::elliptic::{Conductivity, SolverOptions};
use crate::error::{Error, Result};
use crate::forward::{covering_times, validate_geometry, PhysicsParams, SphereRule};
use crate::grid::{DomainMask, Grid3};
use crate::math::Vec3;
use crate::phantom::PhantomSpec;
use crate::sigma_recovery::ResistivityConfig;

/// Box `[lo, hi]` sampled with `n` nodes along x (same spacing on all axes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: Vec3,
    pub hi: Vec3,
    pub n: usize,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid3> {
        if self.n < 4 {
            return Err(Error::Config(format!("grid needs n >= 4, got {}", self.n)));
        }
        let h = (self.hi[0] - self.lo[0]) / (self.n - 1) as f64;
        Grid3::from_bounds(self.lo, self.hi, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Synthesis {
    /// Spherical means of the mollified source.
    #[default]
    Means,
    /// Direct quadrature of the pulse-gradient integral against `J`.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasurementSpec {
    pub geometry: Geometry,
    pub times: usize,
    /// Pulse width in grid cells.
    pub eps_cells: f64,
    pub synthesis: Synthesis,
    /// Relative Gaussian trace noise.
    pub noise: f64,
    /// Sphere point spacing in grid cells.
    pub sphere_spacing_cells: f64,
}

impl Default for MeasurementSpec {
    fn default() -> Self {
        Self {
            geometry: Geometry::Sphere {
                center: [0.5; 3],
                radius: 2.0,
                count: 64,
            },
            times: 96,
            eps_cells: 2.0,
            synthesis: Synthesis::Means,
            noise: 0.0,
            sphere_spacing_cells: 1.0,
        }
    }
}

impl MeasurementSpec {
    pub fn eps(&self, grid: &Grid3) -> f64 {
        self.eps_cells * grid.spacing
    }

    pub fn rule(&self, grid: &Grid3) -> SphereRule {
        SphereRule::Spacing(self.sphere_spacing_cells * grid.spacing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionSpec {
    pub source: InverseSourceConfig,
    pub resistivity: ResistivityConfig,
    pub elliptic_tol: f64,
    /// Recover the third component of `W` from the divergence constraint
    /// instead of a third field direction.
    pub two_direction: bool,
    /// Use `G = curl_h C` in stage 3.
    pub discrete_g: bool,
}

impl Default for InversionSpec {
    fn default() -> Self {
        Self {
            source: InverseSourceConfig::default(),
            resistivity: ResistivityConfig::default(),
            elliptic_tol: 1e-10,
            two_direction: false,
            discrete_g: true,
        }
    }
}

impl InversionSpec {
    pub fn solver(&self) -> SolverOptions {
        SolverOptions::with_tol(self.elliptic_tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilitySpec {
    /// Physical corners of the subdomain.
    pub omega_lo: Vec3,
    pub omega_hi: Vec3,
    pub holder_alpha: f64,
    pub lambda: f64,
    pub big_lambda: f64,
}

impl Default for StabilitySpec {
    fn default() -> Self {
        Self {
            omega_lo: [0.25; 3],
            omega_hi: [0.75; 3],
            holder_alpha: 0.5,
            lambda: 0.2,
            big_lambda: 50.0,
        }
    }
}

impl StabilitySpec {
    pub fn omega_prime(&self, grid: Grid3) -> Result<DomainMask> {
        DomainMask::from_physical(grid, self.omega_lo, self.omega_hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub grid: GridSpec,
    pub coils: Vec<CoilSpec>,
    #[serde(default)]
    pub physics: PhysicsParams,
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub measurement: MeasurementSpec,
    #[serde(default)]
    pub inversion: InversionSpec,
    #[serde(default)]
    pub stability: StabilitySpec,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks everything that can be checked without solving.
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid.build().map_err(|e| Error::Config(e.to_string()))?;
        if self.coils.is_empty() {
            return Err(Error::Config("at least one coil is required".into()));
        }
        for c in &self.coils {
            Coil::from_spec(c).map_err(|e| Error::Config(format!("coil: {e}")))?;
        }
        self.physics.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.physics.b0_list.len() < 2 {
            return Err(Error::Config("at least two field directions are required".into()));
        }
        if self.measurement.times < 2 || !(self.measurement.eps_cells > 0.0) {
            return Err(Error::Config("measurement needs >= 2 times and eps_cells > 0".into()));
        }
        let centers = self.measurement.geometry.centers().map_err(|e| Error::Config(e.to_string()))?;
        let eps = self.measurement.eps(&grid);
        let times = covering_times(&grid, &centers, eps, self.physics.sound_speed, self.measurement.times);
        validate_geometry(&grid, &centers, &times, eps)?;
        self.stability.omega_prime(grid).map_err(|e| Error::Config(format!("omega': {e}")))?;
        self.conductivity()?;
        Ok(())
    }

    pub fn build_grid(&self) -> Result<Grid3> {
        self.grid.build()
    }

    /// The phantom, validated against `[lambda, 1/lambda]` and `Lambda`.
    pub fn conductivity(&self) -> Result<Conductivity> {
        let grid = self.build_grid()?;
        self.phantom
            .build_admissible(grid, self.seed, self.stability.lambda, self.stability.big_lambda)
    }

    pub fn build_coils(&self) -> Result<Vec<Coil>> {
        self.coils
            .iter()
            .map(Coil::from_spec)
            .collect()
    }

    /// Small configuration used by the CLI smoke tests and the README.
    pub fn reference(n: usize) -> Self {
        // Transducers clear the padded source box by a fixed margin.
        let h = 1.0 / (n.max(2) - 1) as f64;
        let radius = (0.5 + 8.0 * h) * 3f64.sqrt() + 0.3;
        Self {
            grid: GridSpec {
                lo: [0.0; 3],
                hi: [1.0; 3],
                n,
            },
            coils: vec![CoilSpec {
                shape: crate::coil::CoilShape::Disk { radius: 0.6 },
                center: [0.35, 0.45, -0.5],
                normal: [0.0, 0.0, 1.0],
                mu: 1.0,
                strength: 1.0,
                quadrature: [32, 32],
            }],
            physics: PhysicsParams::default(),
            phantom: PhantomSpec::GaussianBumps {
                background: 1.0,
                bumps: vec![crate::phantom::Bump {
                    center: [0.55, 0.5, 0.5],
                    width: 0.12,
                    amplitude: 0.5,
                }],
            },
            measurement: MeasurementSpec {
                geometry: Geometry::Sphere {
                    center: [0.5; 3],
                    radius,
                    count: 32,
                },
                times: 48,
                ..MeasurementSpec::default()
            },
            inversion: InversionSpec::default(),
            stability: StabilitySpec::default(),
            seed: 42,
        }
    }
}
