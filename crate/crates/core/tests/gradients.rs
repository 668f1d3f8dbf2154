mod common;

use common::*;
use mssl_core::checks::{smoke_checks, smoke_instance};
use mssl_core::gradcheck::{grad_check, GradCheckConfig};
use mssl_core::objectives::{avc_loss, osc_loss, GRAD_AUDIO, GRAD_VECTORS, GRAD_VISUAL};
use mssl_core::sarl::SarlConfig;
use mssl_core::synth::SynthConfig;
use mssl_core::trainer::{
    composed_loss, train_run, train_step, ProjectionParams, TrainConfig, TrainState,
};
use mssl_core::{Error, FeatureGrid, PipelineConfig, VectorBatch};

#[test]
fn avc_gradient_matches_differences_on_random_instances() {
    let cfg = SarlConfig {
        alpha: 0.1,
        omega: 0.1,
        ..SarlConfig::default()
    };
    let mut r = rng(21);
    for _ in 0..40 {
        let (v, a) = random_avc_instance(&mut r);
        let loss = avc_loss(&v, &a, &cfg).unwrap();
        let nv = v.data().len();
        let x: Vec<f64> = v.data().iter().chain(a.data()).copied().collect();
        let g: Vec<f64> = loss.gradients[GRAD_VISUAL]
            .iter()
            .chain(&loss.gradients[GRAD_AUDIO])
            .copied()
            .collect();
        let f = |p: &[f64]| {
            let vv = FeatureGrid::new(
                v.batch(),
                v.height(),
                v.width(),
                v.channels(),
                p[..nv].to_vec(),
            )?;
            let aa = VectorBatch::new(a.batch(), a.channels(), p[nv..].to_vec())?;
            Ok(avc_loss(&vv, &aa, &cfg)?.value)
        };
        let report = grad_check(f, &x, &g, &GradCheckConfig::default()).unwrap();
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn osc_gradient_matches_differences_on_random_structures() {
    let mut r = rng(22);
    for _ in 0..200 {
        let mut s = random_osc_structure(&mut r);
        for v in s.samples.iter_mut().flat_map(|x| x.vectors.iter_mut()) {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
        }
        let loss = osc_loss(&s).unwrap();
        let x: Vec<f64> = s
            .samples
            .iter()
            .flat_map(|x| x.vectors.iter().flatten().copied())
            .collect();
        let f = |p: &[f64]| {
            let mut t = s.clone();
            for (sample, vectors) in t.samples.iter_mut().zip(s.split_vector_grad(p)) {
                sample.vectors = vectors;
            }
            Ok(osc_loss(&t)?.value)
        };
        let report = grad_check(
            f,
            &x,
            &loss.gradients[GRAD_VECTORS],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn smoke_checks_pass() {
    let checks = smoke_checks(
        &PipelineConfig::default(),
        5,
        6,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert_eq!(checks.len(), 18);
    for c in &checks {
        assert!(
            c.report.passed,
            "{} #{}: {:?}",
            c.name, c.instance, c.report
        );
    }
}

#[test]
fn small_steps_along_the_gradient_descend() {
    let cfg = PipelineConfig::default();
    let loc = cfg.localizer();
    for index in 0..5 {
        let inst = smoke_instance(&cfg, 31, index).unwrap();
        let (raw, c) = (inst.params.raw_channels, inst.params.channels);
        let base = composed_loss(
            &inst.params,
            &inst.raw_visual,
            &inst.raw_audio,
            &inst.frozen,
            &loc,
            cfg.weights(),
        )
        .unwrap();
        for lr in [1e-2, 1e-3, 1e-4] {
            let p: Vec<f64> = inst
                .params
                .flatten()
                .iter()
                .zip(&base.gradient)
                .map(|(p, g)| p - lr * g)
                .collect();
            let q = ProjectionParams::from_flat(raw, c, &p).unwrap();
            let moved = composed_loss(
                &q,
                &inst.raw_visual,
                &inst.raw_audio,
                &inst.frozen,
                &loc,
                cfg.weights(),
            )
            .unwrap();
            assert!(
                moved.total < base.total,
                "lr {lr}: {} !< {}",
                moved.total,
                base.total
            );
        }
    }
}

fn step_with(lr: f64, momentum: f64) -> (ProjectionParams, ProjectionParams) {
    let cfg = PipelineConfig::default();
    let inst = smoke_instance(&cfg, 41, 0).unwrap();
    let tc = TrainConfig {
        lr,
        momentum,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(inst.params.clone());
    train_step(
        &mut state,
        &inst.raw_visual,
        &inst.raw_audio,
        &tc,
        &cfg.localizer(),
        cfg.weights(),
    )
    .unwrap();
    (inst.params, state.params)
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let (before, after) = step_with(0.0, 0.9);
    assert_eq!(before, after);
}

#[test]
fn first_update_scales_linearly_with_learning_rate() {
    let (p0, p1) = step_with(1e-3, 0.0);
    let (_, p2) = step_with(2e-3, 0.0);
    for ((a, b), c) in p0.flatten().iter().zip(p1.flatten()).zip(p2.flatten()) {
        let d1 = b - a;
        let d2 = c - a;
        assert!(
            (d2 - 2.0 * d1).abs() <= 1e-13 * a.abs().max(1.0),
            "{d1} {d2}"
        );
    }
}

#[test]
fn runaway_learning_rate_is_reported() {
    let cfg = PipelineConfig::default();
    let inst = smoke_instance(&cfg, 41, 0).unwrap();
    let tc = TrainConfig {
        lr: 1e6,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(inst.params.clone());
    let err = train_step(
        &mut state,
        &inst.raw_visual,
        &inst.raw_audio,
        &tc,
        &cfg.localizer(),
        cfg.weights(),
    );
    assert!(
        matches!(err, Err(Error::NumericalInstability(_))),
        "{err:?}"
    );
    assert_eq!(state.params, inst.params);
}

#[test]
fn training_runs_are_deterministic() {
    let tc = TrainConfig {
        steps: 3,
        eval_scenes: 6,
        ..TrainConfig::default()
    };
    let synth = SynthConfig {
        noise: 0.1,
        ..SynthConfig::default()
    };
    let cfg = PipelineConfig::default();
    let a = train_run(&tc, &synth, &cfg.localizer(), cfg.weights()).unwrap();
    let b = train_run(&tc, &synth, &cfg.localizer(), cfg.weights()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.losses.len(), 3);
    assert_eq!(a.curve.len(), 2);
    assert!(a.losses.iter().all(|l| l.total.is_finite()));
}

#[test]
fn zero_steps_return_the_initialization() {
    let tc = TrainConfig {
        steps: 0,
        eval_scenes: 4,
        ..TrainConfig::default()
    };
    let cfg = PipelineConfig::default();
    let out = train_run(
        &tc,
        &SynthConfig::default(),
        &cfg.localizer(),
        cfg.weights(),
    )
    .unwrap();
    assert_eq!(out.params, out.initial);
    assert!(out.losses.is_empty());
    assert_eq!(out.curve.len(), 1);
}
