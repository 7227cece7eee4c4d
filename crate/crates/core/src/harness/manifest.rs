use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::request::{AssetRef, CompositeRequest, Controls, InjectionSpec, RenderRef};
use crate::compositing::Placement;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderEntry {
    pub rgba: PathBuf,
    pub depth: PathBuf,
    pub view_tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectEntry {
    pub id: String,
    pub image: PathBuf,
    /// Noun for the template prompt; defaults to the id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default)]
    pub renders: Vec<RenderEntry>,
}

impl ObjectEntry {
    pub fn tag(&self) -> &str {
        self.tag.as_deref().unwrap_or(&self.id)
    }

    pub fn render(&self, view_tag: &str) -> Option<&RenderEntry> {
        self.renders.iter().find(|r| r.view_tag == view_tag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundEntry {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub object: String,
    pub background: String,
    /// All of the object's views when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Pairs {
    /// `"cross_product"`: every render of every object on every background.
    Rule(String),
    List(Vec<PairSpec>),
}

impl Default for Pairs {
    fn default() -> Self {
        Pairs::List(Vec::new())
    }
}

/// Named variant of the pipeline; `overrides` is merged into each request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub overrides: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend_profile: Option<String>,
    pub injection: InjectionSpec,
    pub controls: Controls,
    /// Placement used when a pair has none; `None` centres the render.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
    /// Per-background placements.
    pub placements: BTreeMap<String, Placement>,
    pub variants: Vec<Variant>,
    /// Also score the plain pasted composite as method `paste`.
    pub paste_baseline: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backend_profile: None,
            injection: InjectionSpec::default(),
            controls: Controls::default(),
            placement: None,
            placements: BTreeMap::new(),
            variants: vec![Variant {
                name: "ours".into(),
                overrides: serde_json::Value::Null,
            }],
            paste_baseline: true,
        }
    }
}

/// Objects with their renders, backgrounds, pairs, and run configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkManifest {
    #[serde(default)]
    pub objects: Vec<ObjectEntry>,
    #[serde(default)]
    pub backgrounds: Vec<BackgroundEntry>,
    #[serde(default)]
    pub pairs: Pairs,
    #[serde(default)]
    pub config: BenchmarkConfig,
}

/// One resolved (object view, background, variant) unit of work.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkUnit {
    pub pair_id: String,
    pub unit_id: String,
    pub variant: String,
    pub request: CompositeRequest,
    pub paste_baseline: bool,
    /// No placement was given; the runner centres the render with [`auto_placement`].
    pub auto_place: bool,
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) if !p.is_null() => *b = p.clone(),
        _ => {}
    }
}

impl BenchmarkManifest {
    /// Loads a manifest; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: BenchmarkManifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest {
                problems: vec![format!("{}: {e}", path.display())],
            })?;
        m.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(m)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for o in &mut self.objects {
            fix(&mut o.image);
            for r in &mut o.renders {
                fix(&mut r.rgba);
                fix(&mut r.depth);
            }
        }
        for b in &mut self.backgrounds {
            fix(&mut b.path);
        }
    }

    /// Unique ids, existing files, resolvable pairs and variants. All problems
    /// are reported together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut seen = BTreeSet::new();
        for o in &self.objects {
            if !seen.insert(("object", o.id.as_str())) {
                problems.push(format!("duplicate object id `{}`", o.id));
            }
            let mut views = BTreeSet::new();
            for r in &o.renders {
                if !views.insert(r.view_tag.as_str()) {
                    problems.push(format!(
                        "object `{}` has duplicate view `{}`",
                        o.id, r.view_tag
                    ));
                }
            }
            let files = std::iter::once(("image", &o.image)).chain(
                o.renders
                    .iter()
                    .flat_map(|r| [("render rgba", &r.rgba), ("render depth", &r.depth)]),
            );
            for (what, p) in files {
                if !p.is_file() {
                    problems.push(format!("object `{}` {what} missing: {}", o.id, p.display()));
                }
            }
        }
        for b in &self.backgrounds {
            if !seen.insert(("background", b.id.as_str())) {
                problems.push(format!("duplicate background id `{}`", b.id));
            }
            if !b.path.is_file() {
                problems.push(format!(
                    "background `{}` missing: {}",
                    b.id,
                    b.path.display()
                ));
            }
        }
        match &self.pairs {
            Pairs::Rule(r) if r != "cross_product" => problems.push(format!(
                "unknown pair rule `{r}` (expected \"cross_product\" or a list)"
            )),
            Pairs::Rule(_) => {}
            Pairs::List(list) => {
                for p in list {
                    match self.objects.iter().find(|o| o.id == p.object) {
                        None => {
                            problems.push(format!("pair references unknown object `{}`", p.object))
                        }
                        Some(o) => {
                            if let Some(v) = &p.view_tag {
                                if o.render(v).is_none() {
                                    problems.push(format!("object `{}` has no view `{v}`", o.id));
                                }
                            }
                        }
                    }
                    if !self.backgrounds.iter().any(|b| b.id == p.background) {
                        problems.push(format!(
                            "pair references unknown background `{}`",
                            p.background
                        ));
                    }
                }
            }
        }
        for id in self.config.placements.keys() {
            if !self.backgrounds.iter().any(|b| &b.id == id) {
                problems.push(format!("placement given for unknown background `{id}`"));
            }
        }
        let mut names = BTreeSet::new();
        for v in &self.config.variants {
            if v.name.is_empty() || !names.insert(v.name.as_str()) || v.name == "paste" {
                problems.push(format!(
                    "variant name `{}` is empty, reserved or duplicated",
                    v.name
                ));
            }
        }
        if problems.is_empty() {
            // variants must produce valid requests
            if let Err(e) = self.units() {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Manifest { problems })
        }
    }

    /// (object, view, background, placement) for every pair, in manifest order.
    fn expanded_pairs(
        &self,
    ) -> Vec<(
        &ObjectEntry,
        &RenderEntry,
        &BackgroundEntry,
        Option<Placement>,
    )> {
        let mut out = Vec::new();
        match &self.pairs {
            Pairs::Rule(_) => {
                for o in &self.objects {
                    for r in &o.renders {
                        for b in &self.backgrounds {
                            out.push((o, r, b, None));
                        }
                    }
                }
            }
            Pairs::List(list) => {
                for p in list {
                    let (Some(o), Some(b)) = (
                        self.objects.iter().find(|o| o.id == p.object),
                        self.backgrounds.iter().find(|b| b.id == p.background),
                    ) else {
                        continue;
                    };
                    for r in o
                        .renders
                        .iter()
                        .filter(|r| p.view_tag.as_ref().is_none_or(|v| &r.view_tag == v))
                    {
                        out.push((o, r, b, p.placement));
                    }
                }
            }
        }
        out
    }

    /// Expands pairs × variants into requests.
    pub fn units(&self) -> Result<Vec<BenchmarkUnit>> {
        let cfg = &self.config;
        let mut units = Vec::new();
        let mut ids = BTreeSet::new();
        for (o, r, b, placement) in self.expanded_pairs() {
            let pair_id = format!(
                "{}__{}__{}",
                sanitize(&o.id),
                sanitize(&r.view_tag),
                sanitize(&b.id)
            );
            if !ids.insert(pair_id.clone()) {
                return Err(Error::Manifest {
                    problems: vec![format!("pair `{pair_id}` listed twice")],
                });
            }
            let placement = placement
                .or_else(|| cfg.placements.get(&b.id).copied())
                .or(cfg.placement);
            let auto_place = placement.is_none();
            let placement = placement.unwrap_or(Placement::new(0, 0, 1.0));
            let base = CompositeRequest {
                object: Some(AssetRef::Id { id: o.id.clone() }),
                background: AssetRef::Id { id: b.id.clone() },
                render: RenderRef::View {
                    view_tag: r.view_tag.clone(),
                },
                placement,
                prompt: None,
                object_tag: Some(o.tag().to_string()),
                injection: cfg.injection.clone(),
                controls: cfg.controls.clone(),
                seed: cfg.seed,
                backend_profile: cfg.backend_profile.clone(),
            };
            for (i, v) in cfg.variants.iter().enumerate() {
                let mut json = serde_json::to_value(&base)?;
                merge(&mut json, &v.overrides);
                let request: CompositeRequest =
                    serde_json::from_value(json).map_err(|e| Error::Manifest {
                        problems: vec![format!("variant `{}`: {e}", v.name)],
                    })?;
                let unit_id = if i == 0 {
                    pair_id.clone()
                } else {
                    format!("{pair_id}.{}", sanitize(&v.name))
                };
                units.push(BenchmarkUnit {
                    pair_id: pair_id.clone(),
                    unit_id,
                    variant: v.name.clone(),
                    request,
                    paste_baseline: cfg.paste_baseline && i == 0,
                    auto_place,
                });
            }
        }
        Ok(units)
    }
}

/// Centres a render so its longer side spans 40% of the background's shorter side.
pub fn auto_placement(render_w: usize, render_h: usize, bg_w: usize, bg_h: usize) -> Placement {
    let scale = 0.4 * bg_w.min(bg_h) as f64 / render_w.max(render_h).max(1) as f64;
    let (sw, sh) = (render_w as f64 * scale, render_h as f64 * scale);
    Placement::new(
        ((bg_w as f64 - sw) / 2.0).round() as i64,
        ((bg_h as f64 - sh) / 2.0).round() as i64,
        scale,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, b"x").unwrap();
        p
    }

    fn manifest(dir: &Path) -> BenchmarkManifest {
        let obj = |id: &str| ObjectEntry {
            id: id.into(),
            image: touch(dir, &format!("{id}.png")),
            tag: None,
            renders: vec![RenderEntry {
                rgba: touch(dir, &format!("{id}_r.png")),
                depth: touch(dir, &format!("{id}_d.png")),
                view_tag: "front".into(),
            }],
        };
        BenchmarkManifest {
            objects: vec![obj("mug"), obj("lamp")],
            backgrounds: vec![
                BackgroundEntry {
                    id: "desk1".into(),
                    path: touch(dir, "desk1.png"),
                },
                BackgroundEntry {
                    id: "desk2".into(),
                    path: touch(dir, "desk2.png"),
                },
            ],
            pairs: Pairs::Rule("cross_product".into()),
            config: BenchmarkConfig::default(),
        }
    }

    #[test]
    fn cross_product_expands_every_view_and_background() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(dir.path());
        m.validate().unwrap();
        let ids: Vec<_> = m.units().unwrap().into_iter().map(|u| u.unit_id).collect();
        assert_eq!(
            ids,
            [
                "mug__front__desk1",
                "mug__front__desk2",
                "lamp__front__desk1",
                "lamp__front__desk2"
            ]
        );
    }

    #[test]
    fn all_problems_reported_at_once() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(dir.path());
        m.objects[1].id = "mug".into();
        m.backgrounds[0].path = dir.path().join("gone.png");
        m.pairs = Pairs::List(vec![PairSpec {
            object: "vase".into(),
            background: "desk9".into(),
            view_tag: None,
            placement: None,
        }]);
        let Err(Error::Manifest { problems }) = m.validate() else {
            panic!("expected manifest error");
        };
        let all = problems.join("\n");
        for needle in [
            "duplicate object id `mug`",
            "gone.png",
            "unknown object `vase`",
            "unknown background `desk9`",
        ] {
            assert!(all.contains(needle), "missing {needle:?} in {all}");
        }
    }

    #[test]
    fn variants_merge_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(dir.path());
        m.config.variants.push(Variant {
            name: "no_style".into(),
            overrides: serde_json::json!({"controls": {"use_style": false}}),
        });
        let units = m.units().unwrap();
        assert_eq!(units.len(), 8);
        assert_eq!(units[1].unit_id, "mug__front__desk1.no_style");
        assert!(!units[1].request.controls.use_style);
        assert!(units[0].request.controls.use_style);
        assert!(units[0].paste_baseline && !units[1].paste_baseline);
    }

    #[test]
    fn empty_manifest_is_valid() {
        let m = BenchmarkManifest::default();
        m.validate().unwrap();
        assert!(m.units().unwrap().is_empty());
    }

    #[test]
    fn auto_placement_centres() {
        let p = auto_placement(100, 50, 200, 100);
        assert_eq!(p.scale, 0.4);
        assert_eq!((p.x, p.y), (80, 40));
    }
}
