//! Pipeline stages with file I/O. Every stage reads its inputs from the
//! output directory, writes its artifacts there and leaves a manifest.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use serde_json::{json, Value};

use maet_core::coil::check_curl_identity;
use maet_core::io::{self, Field};
use maet_core::pipeline;
use maet_core::sigma_recovery::{fuse_estimates, relative_l1};
use maet_core::stability::stability_report;
use maet_core::{
    Coil, CoilFields, Conductivity, DomainMask, Error, ExperimentConfig, Grid3, Result, ScalarField, VectorField,
};

use crate::manifest::{Recorder, Manifest};

pub struct Context {
    pub cfg: ExperimentConfig,
    pub config_sha256: String,
    pub out: PathBuf,
    pub grid: Grid3,
    pub coils: Vec<Coil>,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, config_sha256: String, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(&out)?;
        let grid = cfg.build_grid()?;
        let coils = cfg.build_coils()?;
        Ok(Self {
            cfg,
            config_sha256,
            out,
            grid,
            coils,
        })
    }

    fn recorder(&self, stage: &str) -> Recorder {
        Recorder::new(stage, &self.out, &self.config_sha256, self.cfg.seed)
    }

    fn read_scalar(&self, rec: &mut Recorder, name: &str) -> Result<ScalarField> {
        let f = io::read_scalar(&rec.input(name)?)?;
        self.grid.ensure_same(&f.grid, name)?;
        Ok(f)
    }

    fn read_vector(&self, rec: &mut Recorder, name: &str) -> Result<VectorField> {
        let f = io::read_vector(&rec.input(name)?)?;
        self.grid.ensure_same(&f.grid, name)?;
        Ok(f)
    }

    fn coil_fields(&self, rec: &mut Recorder, l: usize) -> Result<CoilFields> {
        Ok(CoilFields {
            c: self.read_vector(rec, &format!("coil{l}_c.mfld"))?,
            g: self.read_vector(rec, &format!("coil{l}_g.mfld"))?,
            coil: self.coils[l].clone(),
        })
    }

    fn conductivity(&self, sigma: ScalarField) -> Result<Conductivity> {
        Conductivity::new(sigma, self.cfg.stability.lambda, self.cfg.stability.big_lambda)
    }
}

fn write_scalar(rec: &mut Recorder, name: &str, f: &ScalarField) -> Result<()> {
    io::write_scalar(&rec.path(name), f)?;
    rec.output(name)
}

fn write_vector(rec: &mut Recorder, name: &str, f: &VectorField) -> Result<()> {
    io::write_vector(&rec.path(name), f)?;
    rec.output(name)
}

const AXES: [&str; 3] = ["x", "y", "z"];

fn trace_name(l: usize, i: usize) -> String {
    format!("coil{l}_traces_{i}.csv")
}

pub fn phantom(ctx: &Context) -> Result<Manifest> {
    let clock = Instant::now();
    let mut rec = ctx.recorder("phantom");
    let cond = ctx.cfg.conductivity()?;
    write_scalar(&mut rec, "sigma.mfld", &cond.sigma)?;
    io::write_vtk(&rec.path("sigma.vtk"), "sigma", &Field::Scalar(cond.sigma.clone()))?;
    let min = cond.sigma.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = cond.sigma.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sidecar = json!({
        "lambda": cond.lambda,
        "big_lambda": cond.big_lambda,
        "seed": ctx.cfg.seed,
        "min": min,
        "max": max,
        "w1inf_norm": cond.w1inf_norm(),
        "phantom": ctx.cfg.phantom,
    });
    fs::write(rec.path("sigma.json"), serde_json::to_string_pretty(&sidecar)?)?;
    rec.output("sigma.json")?;
    rec.finish(clock.elapsed().as_secs_f64(), sidecar)
}

pub fn coil_field(ctx: &Context) -> Result<Manifest> {
    let clock = Instant::now();
    let mut rec = ctx.recorder("coil-field");
    let mut residuals = Vec::new();
    for (l, coil) in ctx.coils.iter().enumerate() {
        let raw = coil.fields(&ctx.grid)?;
        let report = check_curl_identity(&raw, &DomainMask::full(ctx.grid))?;
        let fields = if ctx.cfg.inversion.discrete_g { raw.with_discrete_g() } else { raw };
        write_vector(&mut rec, &format!("coil{l}_c.mfld"), &fields.c)?;
        write_vector(&mut rec, &format!("coil{l}_g.mfld"), &fields.g)?;
        residuals.push(json!({ "coil": l, "curl_identity": report }));
    }
    rec.finish(clock.elapsed().as_secs_f64(), Value::Array(residuals))
}

pub fn forward(ctx: &Context) -> Result<Manifest> {
    let clock = Instant::now();
    let mut rec = ctx.recorder("forward");
    let cond = ctx.conductivity(ctx.read_scalar(&mut rec, "sigma.mfld")?)?;
    let mut residuals = Vec::new();
    for l in 0..ctx.coils.len() {
        let fields = ctx.coil_fields(&mut rec, l)?;
        let cur = pipeline::forward(&ctx.cfg, &cond, &fields)?;
        write_vector(&mut rec, &format!("coil{l}_j.mfld"), &cur.j)?;
        residuals.push(json!({
            "coil": l,
            "iterations": cur.potential.iterations,
            "residual": cur.potential.residual,
            "relative_divergence": cur.relative_divergence,
        }));
    }
    rec.finish(clock.elapsed().as_secs_f64(), Value::Array(residuals))
}

pub fn measure(ctx: &Context) -> Result<Manifest> {
    let clock = Instant::now();
    let mut rec = ctx.recorder("measure");
    let mut residuals = Vec::new();
    for l in 0..ctx.coils.len() {
        let j = ctx.read_vector(&mut rec, &format!("coil{l}_j.mfld"))?;
        let (_, sets) = pipeline::measure(&ctx.cfg, &j)?;
        for (i, set) in sets.iter().enumerate() {
            let name = trace_name(l, i);
            io::write_traces_csv(&rec.path(&name), set)?;
            rec.output(&name)?;
            let flat = set.flat();
            let rms = (flat.iter().map(|v| v * v).sum::<f64>() / flat.len().max(1) as f64).sqrt();
            residuals.push(json!({ "coil": l, "b0": set.b0, "samples": flat.len(), "rms": rms }));
        }
    }
    rec.finish(clock.elapsed().as_secs_f64(), Value::Array(residuals))
}

pub fn invert_source(ctx: &Context) -> Result<Manifest> {
    let clock = Instant::now();
    let mut rec = ctx.recorder("invert-source");
    let mut residuals = Vec::new();
    for l in 0..ctx.coils.len() {
        let mut sets = Vec::new();
        for (i, &b0) in ctx.cfg.physics.b0_list.iter().enumerate() {
            let meta = pipeline::trace_template(&ctx.cfg, &ctx.grid, b0)?;
            let set = io::read_traces_csv(&rec.input(&trace_name(l, i))?, &meta)?;
            if set.centers.len() != meta.centers.len() || set.times.len() != meta.times.len() {
                return Err(Error::GridMismatch(format!(
                    "{} has {}x{} samples, the config asks for {}x{}",
                    trace_name(l, i),
                    set.centers.len(),
                    set.times.len(),
                    meta.centers.len(),
                    meta.times.len()
                )));
            }
            sets.push(set);
        }
        let inv = pipeline::invert_sources(&ctx.cfg, &ctx.grid, &sets)?;
        io::write_vector(&rec.path(&format!("coil{l}_w.mfld")), &inv.source.w)?;
        rec.output(&format!("coil{l}_w.mfld"))?;
        for (d, est) in inv.estimates.iter().enumerate() {
            if let Some(e) = est {
                residuals.push(json!({
                    "coil": l,
                    "axis": AXES[d],
                    "iterations": e.iterations,
                    "converged": e.converged,
                    "residual": e.residual_history.last(),
                    "alpha": e.alpha,
                    "underdetermined": e.underdetermined,
                }));
            }
        }
    }
    rec.finish(clock.elapsed().as_secs_f64(), Value::Array(residuals))
}

pub fn recover_current(ctx: &Context) -> Result<Manifest> {
    let clock = Instant::now();
    let mut rec = ctx.recorder("recover-current");
    let mut residuals = Vec::new();
    for l in 0..ctx.coils.len() {
        let name = format!("coil{l}_w.mfld");
        let w = io::read_vector(&rec.input(&name)?)?;
        let source = pipeline::source_from_field(&ctx.cfg, &ctx.grid, w)?;
        let out = maet_core::current_recovery::recover_current(&source)?;
        write_vector(&mut rec, &format!("coil{l}_jhat.mfld"), &out.j)?;
        residuals.push(json!({
            "coil": l,
            "divergence_ratio": out.divergence.ratio,
            "edge_fraction": out.edge_fraction,
            "padding_too_small": out.padding_too_small,
        }));
    }
    rec.finish(clock.elapsed().as_secs_f64(), Value::Array(residuals))
}

pub fn recover_sigma(ctx: &Context) -> Result<Manifest> {
    let clock = Instant::now();
    let mut rec = ctx.recorder("recover-sigma");
    let mut residuals = Vec::new();
    let mut estimates = Vec::new();
    for l in 0..ctx.coils.len() {
        let j = ctx.read_vector(&mut rec, &format!("coil{l}_jhat.mfld"))?;
        let fields = ctx.coil_fields(&mut rec, l)?;
        let est = pipeline::recover_sigma(&ctx.cfg, &j, &fields)?;
        write_scalar(&mut rec, &format!("coil{l}_sigma.mfld"), &est.sigma)?;
        residuals.push(json!({
            "coil": l,
            "iterations": est.iterations,
            "converged": est.converged,
            "projected_gradient": est.projected_gradient,
            "objective": est.objective_history.last(),
            "active_nodes": est.active.iter().filter(|&&a| a).count(),
        }));
        estimates.push((est.sigma, j));
    }
    let pairs: Vec<(&ScalarField, &VectorField)> = estimates.iter().map(|(s, j)| (s, j)).collect();
    let fused = fuse_estimates(&pairs)?;
    write_scalar(&mut rec, "sigma_hat.mfld", &fused)?;
    io::write_vtk(&rec.path("sigma_hat.vtk"), "sigma_hat", &Field::Scalar(fused))?;
    rec.finish(clock.elapsed().as_secs_f64(), Value::Array(residuals))
}

pub fn diagnose(ctx: &Context) -> Result<Manifest> {
    let clock = Instant::now();
    let mut rec = ctx.recorder("diagnose");
    let cond = ctx.conductivity(ctx.read_scalar(&mut rec, "sigma.mfld")?)?;
    let sigma_hat = ctx.read_scalar(&mut rec, "sigma_hat.mfld")?;
    let fields = ctx.coil_fields(&mut rec, 0)?;
    let omega_p = ctx.cfg.stability.omega_prime(ctx.grid)?;
    let report = stability_report(
        &cond,
        &sigma_hat,
        &fields,
        &omega_p,
        ctx.cfg.stability.holder_alpha,
        &ctx.cfg.inversion.solver(),
    )?;
    let l1 = relative_l1(&sigma_hat, &cond.sigma, &pipeline::mask_flags(&omega_p));
    let summary = json!({ "sigma_relative_l1_omega_prime": l1, "stability": report });
    fs::write(rec.path("stability.json"), serde_json::to_string_pretty(&summary)?)?;
    rec.output("stability.json")?;
    rec.finish(clock.elapsed().as_secs_f64(), summary)
}

/// All stages in order, intermediate artifacts kept.
pub fn pipeline(ctx: &Context) -> Result<Manifest> {
    let clock = Instant::now();
    let stages: [(&str, fn(&Context) -> Result<Manifest>); 8] = [
        ("phantom", phantom),
        ("coil-field", coil_field),
        ("forward", forward),
        ("measure", measure),
        ("invert-source", invert_source),
        ("recover-current", recover_current),
        ("recover-sigma", recover_sigma),
        ("diagnose", diagnose),
    ];
    let mut summary = serde_json::Map::new();
    for (name, stage) in stages {
        log::info!("stage {name}");
        let m = stage(ctx)?;
        summary.insert(name.to_string(), json!({ "seconds": m.seconds, "residuals": m.residuals }));
    }
    let mut rec = ctx.recorder("pipeline");
    rec.input("sigma_hat.mfld")?;
    rec.input("stability.json")?;
    rec.finish(clock.elapsed().as_secs_f64(), Value::Object(summary))
}
