//! Stage chaining through files and cross-module invariants.

use maet_core::acoustic_inverse::relative_l2;
use maet_core::current_recovery::recover_current;
use maet_core::forward::{mollified_source, relative_trace_error};
use maet_core::io::{read_traces_csv, read_vector, write_traces_csv, write_vector};
use maet_core::pipeline::{self, coil_fields, source_from_field, trace_template};
use maet_core::sigma_recovery::{recover_resistivity, relative_l1};
use maet_core::{ExperimentConfig, Grid3, PhantomSpec, VectorField};
use proptest::prelude::*;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::reference(12);
    cfg.inversion.source.max_iter = 30;
    cfg
}

#[test]
fn traces_survive_a_csv_roundtrip() {
    let cfg = small();
    let grid = cfg.build_grid().unwrap();
    let cond = cfg.conductivity().unwrap();
    let fields = coil_fields(&cfg, &cfg.build_coils().unwrap()[0], &grid).unwrap();
    let cur = pipeline::forward(&cfg, &cond, &fields).unwrap();
    let (_, sets) = pipeline::measure(&cfg, &cur.j).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    write_traces_csv(&path, &sets[0]).unwrap();
    let meta = trace_template(&cfg, &grid, sets[0].b0).unwrap();
    let back = read_traces_csv(&path, &meta).unwrap();
    assert_eq!(relative_trace_error(&back.traces, &sets[0].traces), 0.0);
    assert_eq!(back.centers, sets[0].centers);
}

#[test]
fn stored_source_gives_the_same_current() {
    let cfg = small();
    let grid = cfg.build_grid().unwrap();
    let j = VectorField::from_fn(grid, |x| {
        let d = [x[0] - 0.5, x[1] - 0.5, x[2] - 0.5];
        let s = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / 0.16;
        if s >= 1.0 {
            [0.0; 3]
        } else {
            let p = (1.0 - s).powi(3);
            [p * d[1], -p * d[0], 0.0]
        }
    });
    let src = mollified_source(&j, cfg.measurement.eps(&grid), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.mfld");
    write_vector(&path, &src.w).unwrap();
    let back = source_from_field(&cfg, &grid, read_vector(&path).unwrap()).unwrap();
    assert_eq!(back.margin, src.margin);
    let a = recover_current(&src).unwrap().j;
    let b = recover_current(&back).unwrap().j;
    assert_eq!(a.values, b.values);
}

#[test]
fn stage_three_on_exact_currents_recovers_the_phantom() {
    let mut cfg = small();
    cfg.phantom = PhantomSpec::GaussianBumps {
        background: 1.0,
        bumps: vec![maet_core::phantom::Bump {
            center: [0.5, 0.5, 0.55],
            width: 0.15,
            amplitude: -0.3,
        }],
    };
    let grid = cfg.build_grid().unwrap();
    let cond = cfg.conductivity().unwrap();
    let fields = coil_fields(&cfg, &cfg.build_coils().unwrap()[0], &grid).unwrap();
    let cur = pipeline::forward(&cfg, &cond, &fields).unwrap();
    let est = recover_resistivity(&cur.j, &fields.g, &cfg.inversion.resistivity).unwrap();
    assert!(est.converged);
    assert!(relative_l1(&est.sigma, &cond.sigma, &est.active) < 1e-3);
}

#[test]
fn mismatched_stored_source_is_rejected() {
    let cfg = small();
    let grid = cfg.build_grid().unwrap();
    let wrong = VectorField::zeros(Grid3::unit_cube(12).unwrap());
    assert!(source_from_field(&cfg, &grid, wrong).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn stage_two_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let grid = Grid3::unit_cube(9).unwrap();
        let j1 = VectorField::from_fn(grid, |x| [x[1] * (1.0 - x[1]), 0.0, x[0] * x[2]]);
        let j2 = VectorField::from_fn(grid, |x| [0.0, x[2] * x[0], x[1]]);
        let eps = 2.0 * grid.spacing;
        let r1 = recover_current(&mollified_source(&j1, eps, None).unwrap()).unwrap().j;
        let r2 = recover_current(&mollified_source(&j2, eps, None).unwrap()).unwrap().j;
        let combo = j1.scaled(a).add(&j2.scaled(b));
        let r = recover_current(&mollified_source(&combo, eps, None).unwrap()).unwrap().j;
        let expect = r1.scaled(a).add(&r2.scaled(b));
        let flat = |v: &VectorField| v.values.iter().flatten().copied().collect::<Vec<f64>>();
        prop_assert!(relative_l2(&flat(&r), &flat(&expect)) < 1e-10 || expect.max_norm() < 1e-12);
    }
}
