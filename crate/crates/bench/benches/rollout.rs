use criterion::{criterion_group, criterion_main, Criterion};

use ctxctl_core::cltrain::{rollout_gradients, RolloutOptions};
use ctxctl_core::ctxformer::{forward, Context, ControllerConfig, ControllerWeights, TapeWeights};
use ctxctl_core::diffcore::DTensor;
use ctxctl_core::metasample::{sample_draw, DistributionConfig};
use ctxctl_core::plant::{
    step_deterministic, DynamicsVariant, EvaporatorParams, ParamTensors, DEFAULT_SUBSTEPS,
    NOMINAL_INPUT, NOMINAL_STATE,
};
use ctxctl_core::rngstream::substream;

fn bench_plant_step(c: &mut Criterion) {
    let params = EvaporatorParams::consistent();
    c.bench_function("plant_step_rk4", |b| {
        b.iter(|| {
            let p = ParamTensors::constants(&params);
            step_deterministic(
                &p,
                &DTensor::scalar(NOMINAL_STATE.0),
                &DTensor::scalar(NOMINAL_STATE.1),
                &DTensor::scalar(NOMINAL_INPUT.0),
                &DTensor::scalar(NOMINAL_INPUT.1),
                DynamicsVariant::Consistent,
                DEFAULT_SUBSTEPS,
            )
            .unwrap()
        })
    });
}

fn bench_forward(c: &mut Criterion) {
    let mut rng = substream(0, "init");
    let config = ControllerConfig::desk();
    let weights = ControllerWeights::init(&config, &mut rng);
    let tw = TapeWeights::constants(&weights);
    let mut ctx = Context::new();
    for i in 0..50 {
        ctx.push(
            DTensor::scalar(0.1 * i as f64),
            (DTensor::scalar(NOMINAL_INPUT.0), DTensor::scalar(NOMINAL_INPUT.1)),
        );
    }
    c.bench_function("controller_forward_desk_50ctx", |b| {
        b.iter(|| forward(&tw, &config, &ctx).unwrap())
    });
}

fn bench_rollout_gradient(c: &mut Criterion) {
    let mut rng = substream(0, "init");
    let weights = ControllerWeights::init(&ControllerConfig::desk(), &mut rng);
    let dist = DistributionConfig { horizon: 20, ..Default::default() };
    let draw = sample_draw(0, 0, &dist).unwrap();
    let opts = RolloutOptions::default();
    c.bench_function("rollout_gradient_desk_20steps", |b| {
        b.iter(|| rollout_gradients(&weights, &draw, &opts).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_plant_step, bench_forward, bench_rollout_gradient
}
criterion_main!(benches);
