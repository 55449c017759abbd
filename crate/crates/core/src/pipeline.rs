//! The synthetic experiment end to end: forward model, traces, the three
//! inversion stages and the stability report. Each stage is callable on
//! its own so the CLI can persist intermediate artifacts.

use std::time::Instant;

use serde::Serialize;

use crate::acoustic_inverse::{add_noise, combine_b0, invert_source, operator_for, relative_l2, SourceEstimate};
use crate::coil::{Coil, CoilFields};
use crate::current_recovery::{recover_current, RecoveredCurrent};
use crate::elliptic::Conductivity;
use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, Synthesis};
use crate::forward::{
    adjoint_current, covering_times, mollified_source, padding_nodes, synthesize_emf, synthesize_emf_means,
    CurrentField, MeasurementSet, SourceDistribution,
};
use crate::grid::{DomainMask, Grid3, ScalarField, VectorField};
use crate::math::{self, Vec3};
use crate::sigma_recovery::{fuse_estimates, recover_resistivity, relative_l1, ResistivityEstimate};
use crate::stability::{stability_report, StabilityReport};

/// Index of the coordinate axis `b` points along, if it is a unit axis.
pub fn axis_of(b: Vec3) -> Option<usize> {
    let n = math::norm(b);
    (0..3).find(|&d| (b[d] - n).abs() <= 1e-12 * n && n > 0.0 && (n - 1.0).abs() < 1e-12)
}

/// Coil kernels on the conductor grid, with `G` replaced by `curl_h C`
/// when the config asks for it.
pub fn coil_fields(cfg: &ExperimentConfig, coil: &Coil, grid: &Grid3) -> Result<CoilFields> {
    let f = coil.fields(grid)?;
    Ok(if cfg.inversion.discrete_g { f.with_discrete_g() } else { f })
}

pub fn forward(cfg: &ExperimentConfig, cond: &Conductivity, fields: &CoilFields) -> Result<CurrentField> {
    adjoint_current(cond, fields, &cfg.inversion.solver())
}

/// Transducer centres and the shared time grid.
pub fn acquisition(cfg: &ExperimentConfig, grid: &Grid3) -> Result<(Vec<Vec3>, Vec<f64>)> {
    let centers = cfg.measurement.geometry.centers()?;
    let eps = cfg.measurement.eps(grid);
    let times = covering_times(grid, &centers, eps, cfg.physics.sound_speed, cfg.measurement.times);
    Ok((centers, times))
}

/// One trace set per field direction.
pub fn measure(cfg: &ExperimentConfig, j: &VectorField) -> Result<(SourceDistribution, Vec<MeasurementSet>)> {
    let grid = j.grid;
    let eps = cfg.measurement.eps(&grid);
    let source = mollified_source(j, eps, None)?;
    let (centers, times) = acquisition(cfg, &grid)?;
    let p = &cfg.physics;
    let rule = cfg.measurement.rule(&grid);
    let mut sets = Vec::new();
    for (i, &b0) in p.b0_list.iter().enumerate() {
        let set = match cfg.measurement.synthesis {
            Synthesis::Means => synthesize_emf_means(&source, b0, p.rho, p.sound_speed, &centers, &times, rule)?,
            Synthesis::Direct => synthesize_emf(j, b0, p.rho, p.sound_speed, &centers, &times, eps)?,
        };
        sets.push(if cfg.measurement.noise > 0.0 {
            add_noise(&set, cfg.measurement.noise, cfg.seed.wrapping_add(i as u64))
        } else {
            set
        });
    }
    Ok((source, sets))
}

/// Padded grid that holds the mollified source of a conductor grid.
pub fn source_grid(cfg: &ExperimentConfig, inner: &Grid3) -> Grid3 {
    inner.padded(padding_nodes(cfg.measurement.eps(inner), inner.spacing))
}

/// Rebuilds a source distribution from a stored `W` on the padded grid.
pub fn source_from_field(cfg: &ExperimentConfig, inner: &Grid3, w: VectorField) -> Result<SourceDistribution> {
    let padded = source_grid(cfg, inner);
    padded.ensure_same(&w.grid, "stored source")?;
    let margin = padded.offset_of(inner)?[0];
    Ok(SourceDistribution {
        w,
        inner: *inner,
        eps: cfg.measurement.eps(inner),
        margin,
    })
}

/// Empty trace set carrying the metadata for field direction `b0`.
pub fn trace_template(cfg: &ExperimentConfig, grid: &Grid3, b0: Vec3) -> Result<MeasurementSet> {
    let (centers, times) = acquisition(cfg, grid)?;
    let p = &cfg.physics;
    Ok(MeasurementSet::zeros(centers, times, cfg.measurement.eps(grid), b0, p.rho, p.sound_speed))
}

#[derive(Debug, Clone)]
pub struct SourceInversion {
    pub source: SourceDistribution,
    /// Per field axis (x, y, z); `None` for a direction that was not used.
    pub estimates: [Option<SourceEstimate>; 3],
}

/// Stage 1 for every axis-aligned trace set, then assembly of `W`.
pub fn invert_sources(cfg: &ExperimentConfig, inner: &Grid3, sets: &[MeasurementSet]) -> Result<SourceInversion> {
    let padded = source_grid(cfg, inner);
    let mut estimates: [Option<SourceEstimate>; 3] = [None, None, None];
    let wanted = if cfg.inversion.two_direction { 2 } else { 3 };
    let mut used = 0;
    for set in sets {
        if used == wanted {
            break;
        }
        let axis = axis_of(set.b0)
            .ok_or_else(|| Error::Config(format!("field direction {:?} is not a unit axis", set.b0)))?;
        if estimates[axis].is_some() {
            continue;
        }
        let op = operator_for(set, padded, Some(cfg.measurement.rule(inner)))?;
        estimates[axis] = Some(invert_source(set, &op, &cfg.inversion.source)?);
        used += 1;
    }
    let comps = [0, 1, 2].map(|d| estimates[d].as_ref().map(|e| &e.f));
    let rho = sets.first().map(|s| s.rho).unwrap_or(cfg.physics.rho);
    let source = combine_b0(comps, rho, *inner, cfg.measurement.eps(inner))?;
    Ok(SourceInversion { source, estimates })
}

pub fn recover_sigma(cfg: &ExperimentConfig, j: &VectorField, fields: &CoilFields) -> Result<ResistivityEstimate> {
    recover_resistivity(j, &fields.g, &cfg.inversion.resistivity)
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTimings {
    pub forward: f64,
    pub measure: f64,
    pub invert_source: f64,
    pub recover_current: f64,
    pub recover_sigma: f64,
    pub diagnose: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoilSummary {
    pub coil: usize,
    /// Relative L2 error of each recovered initial state (x, y, z).
    pub source_errors: [Option<f64>; 3],
    pub source_iterations: [Option<usize>; 3],
    pub underdetermined: bool,
    /// `|W_hat - W| / |W|` on the padded grid.
    pub w_error: f64,
    pub current_error: f64,
    pub divergence_ratio: f64,
    pub padding_too_small: bool,
    pub sigma_l1_omega_prime: f64,
    pub sigma_l1_active: f64,
    pub resistivity_iterations: usize,
    pub resistivity_converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub coils: Vec<CoilSummary>,
    /// Relative L1 error of the fused conductivity on the subdomain.
    pub sigma_l1_omega_prime: f64,
    pub stability: StabilityReport,
    pub timings: StageTimings,
}

#[derive(Debug, Clone)]
pub struct CoilRun {
    pub fields: CoilFields,
    pub current: CurrentField,
    pub true_source: SourceDistribution,
    pub traces: Vec<MeasurementSet>,
    pub inversion: SourceInversion,
    pub recovered: RecoveredCurrent,
    pub estimate: ResistivityEstimate,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub conductivity: Conductivity,
    pub coils: Vec<CoilRun>,
    pub sigma_hat: ScalarField,
    pub report: PipelineReport,
}

fn vec_rel(a: &VectorField, b: &VectorField) -> f64 {
    let num: f64 = a.sub(b).values.iter().map(|v| math::dot(*v, *v)).sum();
    let den: f64 = b.values.iter().map(|v| math::dot(*v, *v)).sum();
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let grid = cfg.build_grid()?;
    let cond = cfg.conductivity()?;
    let omega_p = cfg.stability.omega_prime(grid)?;
    let omega_sel: Vec<bool> = (0..grid.len()).map(|n| omega_p.contains_index(n)).collect();
    let mut t = StageTimings {
        forward: 0.0,
        measure: 0.0,
        invert_source: 0.0,
        recover_current: 0.0,
        recover_sigma: 0.0,
        diagnose: 0.0,
    };
    let mut runs = Vec::new();
    let mut summaries = Vec::new();
    for (ci, coil) in cfg.build_coils()?.iter().enumerate() {
        let clock = Instant::now();
        let fields = coil_fields(cfg, coil, &grid)?;
        let current = forward(cfg, &cond, &fields)?;
        t.forward += clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let (true_source, traces) = measure(cfg, &current.j)?;
        t.measure += clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let inversion = invert_sources(cfg, &grid, &traces)?;
        t.invert_source += clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let recovered = recover_current(&inversion.source)?;
        t.recover_current += clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let estimate = recover_sigma(cfg, &recovered.j, &fields)?;
        t.recover_sigma += clock.elapsed().as_secs_f64();

        let rho = cfg.physics.rho;
        let source_errors = [0, 1, 2].map(|d| {
            inversion.estimates[d].as_ref().map(|e| {
                let mut b = [0.0; 3];
                b[d] = 1.0;
                relative_l2(&e.f.values, &true_source.initial_state(b, rho).values)
            })
        });
        summaries.push(CoilSummary {
            coil: ci,
            source_errors,
            source_iterations: [0, 1, 2].map(|d| inversion.estimates[d].as_ref().map(|e| e.iterations)),
            underdetermined: inversion.estimates.iter().flatten().any(|e| e.underdetermined),
            w_error: vec_rel(&inversion.source.w, &true_source.w),
            current_error: vec_rel(&recovered.j, &current.j),
            divergence_ratio: recovered.divergence.ratio,
            padding_too_small: recovered.padding_too_small,
            sigma_l1_omega_prime: relative_l1(&estimate.sigma, &cond.sigma, &omega_sel),
            sigma_l1_active: relative_l1(&estimate.sigma, &cond.sigma, &estimate.active),
            resistivity_iterations: estimate.iterations,
            resistivity_converged: estimate.converged,
        });
        runs.push(CoilRun {
            fields,
            current,
            true_source,
            traces,
            inversion,
            recovered,
            estimate,
        });
    }
    let pairs: Vec<(&ScalarField, &VectorField)> = runs.iter().map(|r| (&r.estimate.sigma, &r.recovered.j)).collect();
    let sigma_hat = fuse_estimates(&pairs)?;
    let clock = Instant::now();
    let stability = stability_report(
        &cond,
        &sigma_hat,
        &runs[0].fields,
        &omega_p,
        cfg.stability.holder_alpha,
        &cfg.inversion.solver(),
    )?;
    t.diagnose = clock.elapsed().as_secs_f64();
    let report = PipelineReport {
        coils: summaries,
        sigma_l1_omega_prime: relative_l1(&sigma_hat, &cond.sigma, &omega_sel),
        stability,
        timings: t,
    };
    Ok(PipelineRun {
        conductivity: cond,
        coils: runs,
        sigma_hat,
        report,
    })
}

/// Node selection of a mask as a flag vector.
pub fn mask_flags(mask: &DomainMask) -> Vec<bool> {
    (0..mask.grid.len()).map(|n| mask.contains_index(n)).collect()
}
