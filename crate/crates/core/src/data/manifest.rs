//! Dataset manifests: `{"entries": [{"image", "mask", "split", "domain"}],
//! "split_seed"}`. Relative paths resolve against the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FundusSample;
use crate::error::{Error, Result};
use crate::tensor::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    pub domain: String,
}

impl ManifestEntry {
    /// Sample id: `domain/file-stem`.
    pub fn id(&self) -> String {
        let stem = self
            .image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        format!("{}/{stem}", self.domain)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub split_seed: Option<u64>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

/// Train fraction numerator/denominator: a 4:1 train/val ratio.
const TRAIN_PARTS: usize = 4;
const TOTAL_PARTS: usize = 5;

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("manifest {}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries_in(split).count()
    }

    /// Domain tags in first-appearance order.
    pub fn domains(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for e in &self.entries {
            if !seen.contains(&e.domain) {
                seen.push(e.domain.clone());
            }
        }
        seen
    }

    /// Entries whose domain is in `domains`.
    pub fn restrict(&self, domains: &[String]) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|e| domains.contains(&e.domain))
                .cloned()
                .collect(),
            split_seed: self.split_seed,
            root: self.root.clone(),
        }
    }

    pub fn load_samples(&self, split: Split) -> Result<Vec<FundusSample>> {
        self.entries_in(split)
            .map(|e| FundusSample::load(e.id(), &e.domain, &self.resolve(&e.image), &self.resolve(&e.mask)))
            .collect()
    }
}

/// Number of training entries kept out of `n` under the 4:1 floor rule.
pub fn train_count(n: usize) -> usize {
    n * TRAIN_PARTS / TOTAL_PARTS
}

/// Splits each domain's training pool 4:1 into train/val with a seeded
/// shuffle. Domains that already declare validation entries are left as
/// they are. Test entries are never touched.
pub fn split_train_val(manifest: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    let mut by_domain: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut has_val: BTreeMap<&str, bool> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        match e.split {
            Split::Train => by_domain.entry(&e.domain).or_default().push(i),
            Split::Val => {
                has_val.insert(&e.domain, true);
            }
            Split::Test => {}
        }
    }
    let mut out = manifest.clone();
    for (domain, idx) in by_domain {
        if has_val.get(domain).copied().unwrap_or(false) {
            continue;
        }
        if idx.len() < TOTAL_PARTS {
            return Err(Error::Argument(format!(
                "domain `{domain}` has {} training entries; at least {TOTAL_PARTS} are needed",
                idx.len()
            )));
        }
        let mut order = idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain));
        order.shuffle(&mut rng);
        for &i in &order[train_count(order.len())..] {
            out.entries[i].split = Split::Val;
        }
    }
    if !manifest.entries.iter().any(|e| e.split == Split::Train) {
        return Err(Error::Argument("manifest has no training entries".into()));
    }
    out.split_seed = Some(seed);
    Ok(out)
}
