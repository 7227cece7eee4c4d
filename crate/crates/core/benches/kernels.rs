//! Sequential vs rayon execution of the hot kernels.
//!
//! `cargo bench -p objinsert-core --bench kernels`

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use objinsert_core::backends::toy::{seeded_rng, ToyDenoiser};
use objinsert_core::backends::{BackendProfile, ConditioningSet, Denoiser};
use objinsert_core::compositing::{paste_with, Placement, RenderedObject};
use objinsert_core::conditioning::PromptSpec;
use objinsert_core::diffusion::{LatentGrid, NoiseSchedule, SpaceTag};
use objinsert_core::engine::{run_controllable_generation, EngineBackends, EngineInput, EngineOptions, InjectionConfig};
use objinsert_core::harness::fixtures;
use objinsert_core::par::Exec;
use rand_distr::{Distribution, StandardNormal};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn grid(seed: u64, shape: (usize, usize, usize)) -> LatentGrid {
    let mut rng = seeded_rng(seed, "bench");
    let n = shape.0 * shape.1 * shape.2;
    LatentGrid::from_vec(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(), SpaceTag::Latent).unwrap()
}

fn lin_comb(c: &mut Criterion) {
    let mut g = c.benchmark_group("lin_comb");
    for side in [32usize, 128] {
        let (a, b) = (grid(1, (4, side, side)), grid(2, (4, side, side)));
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, side), &side, |bench, _| {
                bench.iter(|| black_box(a.lin_comb_with(exec, 0.8, &b, 0.6).unwrap()))
            });
        }
    }
    g.finish();
}

fn denoiser(c: &mut Criterion) {
    let mut g = c.benchmark_group("toy_predict");
    let shape = (4, 64, 64);
    let z = grid(3, shape);
    let cond = ConditioningSet::new("a mug", None).with_guidance(5.0);
    for (name, exec) in MODES {
        let d = ToyDenoiser::new(0, shape).with_exec(exec);
        g.bench_function(name, |bench| bench.iter(|| black_box(d.predict(&z, 25, &cond, None).unwrap())));
    }
    g.finish();
}

fn paste(c: &mut Criterion) {
    let mut g = c.benchmark_group("paste");
    let bg = fixtures::background(0);
    let (rgba, depth) = fixtures::render(0, 0);
    let render = RenderedObject::new(rgba, depth, "front").unwrap();
    let mut place = Placement::new(10, 8, 1.8);
    place.rotation_deg = 20.0;
    for (name, exec) in MODES {
        g.bench_function(name, |bench| bench.iter(|| black_box(paste_with(exec, &render, &bg, &place, 8).unwrap())));
    }
    g.finish();
}

fn engine(c: &mut Criterion) {
    let mut g = c.benchmark_group("engine_run");
    g.sample_size(10);
    let (h, w) = fixtures::BACKGROUND_SIZE;
    let set = BackendProfile::default().instantiate((192, h / 8, w / 8)).unwrap();
    let (rgba, depth) = fixtures::render(0, 0);
    let input = EngineInput {
        object_image: Some(fixtures::object_photo(0)),
        background: fixtures::background(0),
        render: RenderedObject::new(rgba, depth, "front").unwrap(),
        placement: Placement::new(30, 20, 1.0),
        prompt: PromptSpec::template("mug"),
        seed: 0,
    };
    let schedule = NoiseSchedule::scaled_linear(20).unwrap();
    let inj = InjectionConfig::with_taus(0.2, 0.5, 0.5).with_layers(set.denoiser.default_injection_layers());
    for (name, exec) in MODES {
        let opts = EngineOptions { exec, ..EngineOptions::default() };
        let d = ToyDenoiser::new(0, (192, h / 8, w / 8)).with_exec(exec);
        let backends = EngineBackends {
            denoiser: &d,
            ..EngineBackends::from(&set)
        };
        g.bench_function(name, |bench| {
            bench.iter(|| black_box(run_controllable_generation(&input, backends, &schedule, &inj, &opts).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, lin_comb, denoiser, paste, engine);
criterion_main!(benches);
