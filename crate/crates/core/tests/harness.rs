use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use objinsert_core::backends::BackendProfile;
use objinsert_core::conditioning::{Captioner, PromptSource, VlmClient};
use objinsert_core::diffusion::PixelImage;
use objinsert_core::harness::{
    fixtures, run_benchmark, AssetRegistry, BenchmarkManifest, CompositeRequest, Pipeline, RunOptions, Variant,
};
use objinsert_core::par::{self, Exec};
use objinsert_core::{BackendError, Error};
use proptest::prelude::*;

fn pipeline(m: &BenchmarkManifest, captioner: Captioner) -> Pipeline {
    Pipeline::new(Arc::new(AssetRegistry::from_manifest(m)), Arc::new(captioner), BackendProfile::default())
}

fn small(m: &mut BenchmarkManifest) {
    m.config.variants[0].overrides = serde_json::json!({"controls": {"dilation_radius": 4}});
}

#[test]
fn interrupted_then_resumed_report_equals_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = fixtures::write_assets(&dir.path().join("assets"), 2, 1, 2).unwrap();
    small(&mut m);
    let p = pipeline(&m, Captioner::new(None));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = run_benchmark(&m, &p, &a, RunOptions { exec: Exec::Parallel, limit: Some(3) }).unwrap();
    assert_eq!((first.executed.len(), first.pending.len()), (3, 1));
    let second = run_benchmark(&m, &p, &a, RunOptions { exec: Exec::Sequential, limit: None }).unwrap();
    assert_eq!((second.executed.len(), second.skipped.len()), (1, 3));
    let straight = run_benchmark(&m, &p, &b, RunOptions::default()).unwrap();
    assert_eq!(second.report, straight.report);
    assert_eq!(
        std::fs::read(a.join("report.json")).unwrap(),
        std::fs::read(b.join("report.json")).unwrap()
    );
    let third = run_benchmark(&m, &p, &a, RunOptions::default()).unwrap();
    assert!(third.executed.is_empty());
}

#[test]
fn changed_request_invalidates_record() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = fixtures::write_assets(&dir.path().join("assets"), 1, 1, 1).unwrap();
    small(&mut m);
    let p = pipeline(&m, Captioner::new(None));
    let run = dir.path().join("run");
    run_benchmark(&m, &p, &run, RunOptions::default()).unwrap();
    m.config.seed = 99;
    let again = run_benchmark(&m, &p, &run, RunOptions::default()).unwrap();
    assert_eq!(again.executed.len(), 1);
}

#[test]
fn variants_and_paste_baseline_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = fixtures::write_assets(&dir.path().join("assets"), 1, 1, 1).unwrap();
    small(&mut m);
    m.config.variants.push(Variant {
        name: "no_style".into(),
        overrides: serde_json::json!({"controls": {"use_style": false}}),
    });
    let p = pipeline(&m, Captioner::new(None));
    let out = run_benchmark(&m, &p, &dir.path().join("run"), RunOptions::default()).unwrap();
    let methods: Vec<_> = out.report.aggregate.keys().cloned().collect();
    assert_eq!(methods, ["no_style", "ours", "paste"]);
    assert!(out.report.failures.is_empty());
    let text = std::fs::read_to_string(dir.path().join("run/report.txt")).unwrap();
    assert!(text.contains("CLIP_obj") && text.contains("paste"));
}

#[test]
fn failing_pair_is_recorded_and_others_complete() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixtures::write_assets(&dir.path().join("assets"), 1, 1, 2).unwrap();
    let mut m = m;
    m.config.placements.insert(
        "desk1".into(),
        objinsert_core::compositing::Placement::new(5000, 5000, 1.0),
    );
    let p = pipeline(&m, Captioner::new(None));
    let out = run_benchmark(&m, &p, &dir.path().join("run"), RunOptions::default()).unwrap();
    assert_eq!(out.report.failures.len(), 1);
    assert!(out.report.failures[0].pair_id.contains("desk1"));
    assert_eq!(out.report.rows_for("ours").count(), 1);
}

#[test]
fn concurrent_jobs_match_sequential_runs() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixtures::write_assets(&dir.path().join("assets"), 2, 1, 2).unwrap();
    let p = pipeline(&m, Captioner::new(None));
    let mut reqs: Vec<CompositeRequest> = m.units().unwrap().into_iter().map(|u| u.request).collect();
    for r in &mut reqs {
        p.auto_place(r).unwrap();
    }
    let hash = |r: &CompositeRequest| p.generate(r).unwrap().image_png().unwrap();
    let parallel = par::map_items(Exec::Parallel, &reqs, hash);
    let sequential = par::map_items(Exec::Sequential, &reqs, hash);
    assert_eq!(parallel, sequential);
}

struct Flaky {
    mode: usize,
    calls: AtomicUsize,
}

impl VlmClient for Flaky {
    fn describe(&self, _image: &PixelImage, _instruction: &str) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        match self.mode {
            0 => Err(BackendError::Unavailable("timeout".into())),
            1 => Ok("   ".into()),
            2 => Err(BackendError::Protocol("garbage".into())),
            _ => Ok("a glossy red ceramic mug with a handle".into()),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn every_caption_path_yields_a_prompt(mode in 0usize..4, obj in 0usize..3) {
        let c = Captioner::new(Some(Arc::new(Flaky { mode, calls: AtomicUsize::new(0) })));
        let p = c.caption_object(&fixtures::object_photo(obj), "mug");
        prop_assert!(!p.text.trim().is_empty());
        if mode < 3 {
            prop_assert_eq!(p.source, PromptSource::Template);
            prop_assert!(p.text.contains("mug"));
        } else {
            prop_assert_eq!(p.source, PromptSource::Vlm);
        }
    }

    #[test]
    fn any_dangling_file_fails_validation(pick in any::<prop::sample::Index>()) {
        let dir = tempfile::tempdir().unwrap();
        let m = fixtures::write_assets(dir.path(), 2, 2, 2).unwrap();
        let mut files = Vec::new();
        for o in &m.objects {
            files.push(o.image.clone());
            for r in &o.renders {
                files.push(r.rgba.clone());
                files.push(r.depth.clone());
            }
        }
        files.extend(m.backgrounds.iter().map(|b| b.path.clone()));
        let victim = pick.get(&files);
        std::fs::remove_file(victim).unwrap();
        match BenchmarkManifest::load(dir.path().join("manifest.json")).unwrap().validate() {
            Err(Error::Manifest { problems }) => {
                let name = victim.file_name().unwrap().to_string_lossy().into_owned();
                prop_assert!(problems.iter().any(|p| p.contains(&name)));
            }
            other => prop_assert!(false, "expected manifest error, got {:?}", other),
        }
    }
}

#[test]
fn captions_are_cached_by_content() {
    let client = Arc::new(Flaky { mode: 3, calls: AtomicUsize::new(0) });
    let c = Captioner::new(Some(client.clone()));
    let img = fixtures::object_photo(1);
    let a = c.caption_object(&img, "lamp");
    let b = c.caption_object(&img, "lamp");
    assert_eq!(a, b);
    assert_eq!(client.calls.load(Ordering::Relaxed), 1);
}
