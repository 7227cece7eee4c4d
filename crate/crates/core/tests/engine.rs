//! Engine invariants on the toy backend.

use std::sync::{Arc, Mutex};

use objinsert_core::backends::{
    BackendProfile, BackendSet, ConditioningSet, Denoiser, FeatureBundle, LayerCatalog, Prediction,
};
use objinsert_core::compositing::{Placement, RenderedObject};
use objinsert_core::conditioning::PromptSpec;
use objinsert_core::diffusion::{LatentGrid, NoiseSchedule};
use objinsert_core::engine::{
    run_controllable_generation, run_with_observer, EngineBackends, EngineInput, EngineOptions, InjectionConfig,
};
use objinsert_core::harness::fixtures;
use objinsert_core::par::Exec;
use objinsert_core::BackendError;
use proptest::prelude::*;

fn input(seed: u64, object: usize) -> EngineInput {
    let (rgba, depth) = fixtures::render(0, 0);
    EngineInput {
        object_image: Some(fixtures::object_photo(object)),
        background: fixtures::background(0),
        render: RenderedObject::new(rgba, depth, "front").unwrap(),
        placement: Placement::new(30, 20, 1.0),
        prompt: PromptSpec::template("mug"),
        seed,
    }
}

fn toy_set() -> BackendSet {
    let (h, w) = fixtures::BACKGROUND_SIZE;
    BackendProfile::default().instantiate((192, h / 8, w / 8)).unwrap()
}

fn inj(set: &BackendSet, f: f64, q: f64, k: f64) -> InjectionConfig {
    InjectionConfig::with_taus(f, q, k).with_layers(set.denoiser.default_injection_layers())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn unmasked_latent_tracks_noised_background_every_step(seed in any::<u64>()) {
        let set = toy_set();
        let schedule = NoiseSchedule::scaled_linear(12).unwrap();
        let mut checked = 0usize;
        let mut bad = 0usize;
        let res = run_with_observer(
            &input(seed, 0),
            EngineBackends::from(&set),
            &schedule,
            &inj(&set, 0.2, 0.5, 0.5),
            &EngineOptions::default(),
            &mut |tr| {
                for ((&m, a), b) in tr.mask.latent_slice().iter().zip(tr.latent.as_slice()).zip(tr.background.as_slice()) {
                    if m == 0 {
                        checked += 1;
                        bad += usize::from(a.to_bits() != b.to_bits());
                    }
                }
            },
        ).unwrap();
        prop_assert!(checked > 0);
        prop_assert_eq!(bad, 0);
        prop_assert_eq!(res.injection_log.steps.len(), 12);
    }

    #[test]
    fn injection_log_matches_closed_form(f in 0.0f64..=1.0, q in 0.0f64..=1.0, k in 0.0f64..=1.0) {
        let set = toy_set();
        let schedule = NoiseSchedule::scaled_linear(10).unwrap();
        let cfg = inj(&set, f, q, k);
        let res = run_controllable_generation(&input(1, 0), EngineBackends::from(&set), &schedule, &cfg, &EngineOptions::default()).unwrap();
        prop_assert_eq!(res.injection_log.matches_schedule(&cfg), Ok(()));
    }

    #[test]
    fn same_seed_same_bits(seed in any::<u64>()) {
        let set = toy_set();
        let schedule = NoiseSchedule::scaled_linear(8).unwrap();
        let cfg = inj(&set, 0.2, 0.5, 0.5);
        let run = || run_controllable_generation(&input(seed, 0), EngineBackends::from(&set), &schedule, &cfg, &EngineOptions::default()).unwrap();
        let (a, b) = (run(), run());
        prop_assert_eq!(a.image.to_le_bytes(), b.image.to_le_bytes());
        prop_assert_eq!(a.final_latent.to_le_bytes(), b.final_latent.to_le_bytes());
        prop_assert_eq!(a.injection_log, b.injection_log);
    }
}

#[test]
fn without_injection_output_ignores_content_embedding() {
    let set = toy_set();
    let schedule = NoiseSchedule::scaled_linear(10).unwrap();
    let never = InjectionConfig::never().with_layers(set.denoiser.default_injection_layers());
    let run = |object| {
        run_controllable_generation(&input(3, object), EngineBackends::from(&set), &schedule, &never, &EngineOptions::default())
            .unwrap()
    };
    let (a, b) = (run(0), run(2));
    let adapter = set.adapter.as_ref().unwrap();
    assert_ne!(
        adapter.embed(&fixtures::object_photo(0)).unwrap(),
        adapter.embed(&fixtures::object_photo(2)).unwrap()
    );
    assert_eq!(a.image.to_le_bytes(), b.image.to_le_bytes());

    // with injection on, the content embedding does reach the output
    let on = inj(&set, 0.2, 0.5, 0.5);
    let run_on = |object| {
        run_controllable_generation(&input(3, object), EngineBackends::from(&set), &schedule, &on, &EngineOptions::default())
            .unwrap()
    };
    assert_ne!(run_on(0).image.to_le_bytes(), run_on(2).image.to_le_bytes());
}

#[test]
fn sequential_and_parallel_execution_agree() {
    let set = toy_set();
    let schedule = NoiseSchedule::scaled_linear(6).unwrap();
    let cfg = inj(&set, 0.2, 0.5, 0.5);
    let run = |exec| {
        let opts = EngineOptions { exec, ..EngineOptions::default() };
        run_controllable_generation(&input(9, 0), EngineBackends::from(&set), &schedule, &cfg, &opts).unwrap()
    };
    assert_eq!(run(Exec::Sequential).image.to_le_bytes(), run(Exec::Parallel).image.to_le_bytes());
}

/// Records the embeddings each call carried.
struct Recording<'a> {
    inner: &'a dyn Denoiser,
    calls: Mutex<Vec<(f64, bool, bool, bool)>>,
}

impl Denoiser for Recording<'_> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn catalog(&self) -> &LayerCatalog {
        self.inner.catalog()
    }

    fn predict(
        &self,
        z: &LatentGrid,
        t: usize,
        cond: &ConditioningSet,
        overrides: Option<&FeatureBundle>,
    ) -> Result<Prediction, BackendError> {
        self.calls.lock().unwrap().push((
            cond.guidance_weight,
            cond.content_embedding().is_some(),
            cond.style_embedding().is_some(),
            overrides.is_some(),
        ));
        self.inner.predict(z, t, cond, overrides)
    }
}

#[test]
fn embeddings_reach_only_their_branch() {
    let set = toy_set();
    let schedule = NoiseSchedule::scaled_linear(10).unwrap();
    let rec = Arc::new(Recording {
        inner: set.denoiser.as_ref(),
        calls: Mutex::new(Vec::new()),
    });
    let backends = EngineBackends {
        denoiser: rec.as_ref(),
        ..EngineBackends::from(&set)
    };
    let opts = EngineOptions::default();
    run_controllable_generation(&input(2, 0), backends, &schedule, &inj(&set, 0.2, 0.5, 0.5), &opts).unwrap();
    let calls = rec.calls.lock().unwrap();
    // inversion, then one reconstruction and one generation call per step
    assert_eq!(calls.len(), 3 * 10);
    let (inversion, loop_calls) = calls.split_at(10);
    assert!(inversion.iter().all(|&(g, c, s, o)| g == 1.0 && !c && !s && !o));
    for pair in loop_calls.chunks(2) {
        let (b1, b2) = (pair[0], pair[1]);
        assert!(b1.1 && !b1.2 && !b1.3, "branch1 carries content only: {b1:?}");
        assert!(!b2.1 && b2.0 == opts.guidance, "branch2 never carries content: {b2:?}");
    }
    assert!(loop_calls.chunks(2).any(|p| p[1].2), "style reaches branch2");
}
