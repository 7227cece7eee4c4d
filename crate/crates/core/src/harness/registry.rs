use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::manifest::{BackgroundEntry, BenchmarkManifest, ObjectEntry, RenderEntry};

/// Objects, renders and backgrounds addressable by id.
#[derive(Debug, Clone, Default)]
pub struct AssetRegistry {
    objects: BTreeMap<String, ObjectEntry>,
    backgrounds: BTreeMap<String, BackgroundEntry>,
}

/// Listing served to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetListing {
    pub objects: Vec<ObjectSummary>,
    pub backgrounds: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSummary {
    pub id: String,
    pub tag: String,
    pub views: Vec<String>,
}

impl AssetRegistry {
    pub fn from_manifest(m: &BenchmarkManifest) -> Self {
        let mut r = Self::default();
        for o in &m.objects {
            r.objects.insert(o.id.clone(), o.clone());
        }
        for b in &m.backgrounds {
            r.backgrounds.insert(b.id.clone(), b.clone());
        }
        r
    }

    pub fn object(&self, id: &str) -> Option<&ObjectEntry> {
        self.objects.get(id)
    }

    pub fn background(&self, id: &str) -> Option<&BackgroundEntry> {
        self.backgrounds.get(id)
    }

    pub fn renders(&self, object: &str) -> Option<&[RenderEntry]> {
        self.objects.get(object).map(|o| o.renders.as_slice())
    }

    pub fn listing(&self) -> AssetListing {
        AssetListing {
            objects: self
                .objects
                .values()
                .map(|o| ObjectSummary {
                    id: o.id.clone(),
                    tag: o.tag().to_string(),
                    views: o.renders.iter().map(|r| r.view_tag.clone()).collect(),
                })
                .collect(),
            backgrounds: self.backgrounds.keys().cloned().collect(),
        }
    }
}
