//! Dataset manifests, train/test splits, descriptor precomputation, and the
//! synthetic two-stream generator.

pub mod features;
pub mod synth;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{build_partition, node_descriptors, FrameSequence, Stream};

/// One video's row in a manifest. Paths are relative to the manifest's
/// directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub label: usize,
    pub frames: usize,
    pub appearance: PathBuf,
    pub motion: PathBuf,
}

/// Dataset index: class names plus per-video feature file locations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub split: String,
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to. Set on load; not stored.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), text)?;
        Ok(())
    }

    /// Structural checks: ids unique, labels in range, frame counts positive.
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::data("manifest has no classes"));
        }
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !ids.insert(e.video_id.as_str()) {
                return Err(Error::data(format!("duplicate video id {}", e.video_id)));
            }
            if e.label >= self.classes.len() {
                return Err(Error::data(format!(
                    "{}: label {} out of range for {} classes",
                    e.video_id,
                    e.label,
                    self.classes.len()
                )));
            }
            if e.frames == 0 {
                return Err(Error::data(format!("{}: zero frames", e.video_id)));
            }
        }
        Ok(())
    }

    /// Check that both stream files exist and agree with the recorded frame
    /// count. Opens headers only.
    pub fn validate_files(&self) -> Result<()> {
        for e in &self.entries {
            for (stream, rel) in [(Stream::Appearance, &e.appearance), (Stream::Motion, &e.motion)]
            {
                let path = self.base_dir.join(rel);
                let (version, rows, _) = features::read_header(&path)?;
                if version != features::VERSION_FRAMES {
                    return Err(Error::data(format!(
                        "{}: {} file is not a frame-feature file",
                        e.video_id,
                        stream.tag()
                    )));
                }
                if rows != e.frames {
                    return Err(Error::data(format!(
                        "{}: manifest says {} frames, {} file has {}",
                        e.video_id,
                        e.frames,
                        stream.tag(),
                        rows
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn stream_path(&self, entry: &ManifestEntry, stream: Stream) -> PathBuf {
        match stream {
            Stream::Appearance => self.base_dir.join(&entry.appearance),
            Stream::Motion => self.base_dir.join(&entry.motion),
        }
    }

    /// Load every sequence of one stream into memory.
    pub fn load_stream(&self, stream: Stream) -> Result<Vec<FrameSequence>> {
        self.entries
            .iter()
            .map(|e| {
                let data = features::read_frame_features(self.stream_path(e, stream))?;
                FrameSequence::new(e.video_id.clone(), stream, data, e.label)
            })
            .collect()
    }
}

/// Stratified split: per class, a seeded shuffle puts `ratio` of the videos
/// in the train manifest and the rest in the test manifest.
pub fn split_manifest(
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid("split ratio must be in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for class in 0..manifest.class_count() {
        let mut rows: Vec<&ManifestEntry> = manifest
            .entries
            .iter()
            .filter(|e| e.label == class)
            .collect();
        rows.shuffle(&mut rng);
        let take = (rows.len() as f64 * ratio).round() as usize;
        for (i, row) in rows.into_iter().enumerate() {
            if i < take {
                train_rows.push(row.clone());
            } else {
                test_rows.push(row.clone());
            }
        }
    }
    // keep manifest order stable regardless of shuffle order
    let order: std::collections::HashMap<&str, usize> = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.video_id.as_str(), i))
        .collect();
    train_rows.sort_by_key(|e| order[e.video_id.as_str()]);
    test_rows.sort_by_key(|e| order[e.video_id.as_str()]);
    let build = |split: &str, entries: Vec<ManifestEntry>| DatasetManifest {
        name: manifest.name.clone(),
        classes: manifest.classes.clone(),
        split: split.to_string(),
        entries,
        base_dir: manifest.base_dir.clone(),
    };
    Ok((build("train", train_rows), build("test", test_rows)))
}

/// Loaded descriptors of one stream: `(matrices, labels, video ids)`.
pub type DescriptorSet = (Vec<ndarray::Array2<f64>>, Vec<usize>, Vec<String>);

/// One video's row in a descriptor manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescriptorEntry {
    pub video_id: String,
    pub label: usize,
    pub appearance: PathBuf,
    pub motion: PathBuf,
}

/// Index of precomputed node descriptors for the shallow path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescriptorManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub split: String,
    pub depth: usize,
    pub node_count: usize,
    pub entries: Vec<DescriptorEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DescriptorManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let mut manifest: DescriptorManifest = serde_json::from_str(&text)?;
        manifest.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Load one stream's descriptors: `(matrices, labels, ids)`, each
    /// matrix `node_count x d`.
    pub fn load_stream(&self, stream: Stream) -> Result<DescriptorSet> {
        let mut mats = Vec::with_capacity(self.entries.len());
        let mut labels = Vec::with_capacity(self.entries.len());
        let mut ids = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let rel = match stream {
                Stream::Appearance => &e.appearance,
                Stream::Motion => &e.motion,
            };
            let m = features::read_node_descriptors(self.base_dir.join(rel))?;
            if m.nrows() != self.node_count {
                return Err(Error::data(format!(
                    "{}: descriptor file has {} nodes, manifest says {}",
                    e.video_id,
                    m.nrows(),
                    self.node_count
                )));
            }
            mats.push(m);
            labels.push(e.label);
            ids.push(e.video_id.clone());
        }
        Ok((mats, labels, ids))
    }
}

/// Compute and store per-node mean descriptors for every video and both
/// streams. Descriptor files land next to `out_manifest` with a
/// `.desc.pyft` suffix.
pub fn precompute_descriptors(
    manifest: &DatasetManifest,
    depth: usize,
    out_dir: impl AsRef<Path>,
) -> Result<DescriptorManifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let node_count = (1usize << depth) - 1;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let mut rels = [PathBuf::new(), PathBuf::new()];
        for (slot, stream) in [Stream::Appearance, Stream::Motion].into_iter().enumerate() {
            let frames = features::read_frame_features(manifest.stream_path(e, stream))?;
            let mt = build_partition(frames.nrows(), depth)?;
            let nd = node_descriptors(frames.view(), &mt)?;
            let rel = PathBuf::from(format!("{}.{}.desc.pyft", e.video_id, stream.tag()));
            features::write_node_descriptors(out_dir.join(&rel), nd.view())?;
            rels[slot] = rel;
        }
        let [appearance, motion] = rels;
        entries.push(DescriptorEntry {
            video_id: e.video_id.clone(),
            label: e.label,
            appearance,
            motion,
        });
    }
    Ok(DescriptorManifest {
        name: manifest.name.clone(),
        classes: manifest.classes.clone(),
        split: manifest.split.clone(),
        depth,
        node_count,
        entries,
        base_dir: out_dir.to_path_buf(),
    })
}
