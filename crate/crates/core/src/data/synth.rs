//! Synthetic two-stream benchmark generator.
//!
//! Videos are token sequences rendered through a fixed per-stream embedding
//! basis plus gaussian noise. Three knobs control what a classifier must
//! exploit:
//!
//! - plain classes use disjoint token sets, so global averages separate them;
//! - `fine_pairs` gives each odd class the *reversed* token sequence of its
//!   even sibling: identical token multisets, different order, so only
//!   time-resolved pooling can tell them apart;
//! - `complementary_split` renders the discriminative tokens into a single
//!   stream (appearance for even classes, motion for odd ones) and feeds the
//!   other stream a neutral token, so neither stream suffices alone.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{features, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::pyramid::Stream;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub name: String,
    /// Number of classes.
    pub classes: usize,
    /// Token vocabulary size; must cover the class patterns (plus one
    /// neutral token when `complementary_split` is set).
    pub vocab: usize,
    /// Distinct tokens per class pattern.
    pub tokens_per_class: usize,
    /// Pair classes (2p, 2p+1) so the odd one is the even one's reversal.
    pub fine_pairs: bool,
    /// Put class evidence in one stream only, alternating by class parity.
    pub complementary_split: bool,
    pub videos_per_class: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub noise_sigma: f64,
    /// Frame feature dimension.
    pub dim: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            name: "synth".into(),
            classes: 2,
            vocab: 8,
            tokens_per_class: 2,
            fine_pairs: false,
            complementary_split: false,
            videos_per_class: 20,
            frames_min: 8,
            frames_max: 24,
            noise_sigma: 0.1,
            dim: 16,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Tokens the class patterns consume (excluding the neutral token).
    fn pattern_tokens(&self) -> usize {
        if self.fine_pairs {
            self.classes.div_ceil(2) * self.tokens_per_class
        } else {
            self.classes * self.tokens_per_class
        }
    }

    fn neutral_token(&self) -> usize {
        self.pattern_tokens()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.tokens_per_class == 0 {
            return Err(Error::invalid("tokens_per_class must be >= 1"));
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return Err(Error::invalid("need 1 <= frames_min <= frames_max"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("feature dimension must be >= 1"));
        }
        if self.videos_per_class == 0 {
            return Err(Error::invalid("videos_per_class must be >= 1"));
        }
        let needed = self.pattern_tokens() + usize::from(self.complementary_split);
        if self.vocab < needed {
            return Err(Error::invalid(format!(
                "vocabulary of {} tokens cannot cover the class patterns ({needed} needed)",
                self.vocab
            )));
        }
        Ok(())
    }

    /// Token sequence of one video of class `label` with `frames` frames:
    /// near-equal blocks of the class tokens in order, reversed for the odd
    /// member of a fine pair.
    pub fn token_sequence(&self, label: usize, frames: usize) -> Vec<usize> {
        let (base, reversed) = if self.fine_pairs {
            ((label / 2) * self.tokens_per_class, !label.is_multiple_of(2))
        } else {
            (label * self.tokens_per_class, false)
        };
        let blocks = self.tokens_per_class;
        let mut seq = Vec::with_capacity(frames);
        for block in 0..blocks {
            let start = (block * frames).div_ceil(blocks);
            let end = ((block + 1) * frames).div_ceil(blocks);
            seq.extend(std::iter::repeat_n(base + block, end - start));
        }
        if reversed {
            seq.reverse();
        }
        seq
    }

    /// Does `stream` carry class evidence for `label`?
    pub fn stream_is_discriminative(&self, label: usize, stream: Stream) -> bool {
        if !self.complementary_split {
            return true;
        }
        match stream {
            Stream::Appearance => label.is_multiple_of(2),
            Stream::Motion => !label.is_multiple_of(2),
        }
    }
}

/// Unit-norm token embedding rows; rows are mutually orthogonal whenever the
/// vocabulary fits inside the feature dimension.
pub fn embedding_basis(vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut basis = Array2::zeros((vocab, dim));
    for i in 0..vocab {
        let mut row: Array1<f64> = Array1::from_shape_fn(dim, |_| normal.sample(rng));
        // Gram-Schmidt against the rows already placed
        for j in 0..i.min(dim) {
            let prev = basis.row(j);
            let proj = row.dot(&prev);
            row.scaled_add(-proj, &prev);
        }
        let norm = row.dot(&row).sqrt();
        if norm > 1e-9 {
            row /= norm;
        } else {
            row[i % dim] = 1.0;
        }
        basis.row_mut(i).assign(&row);
    }
    basis
}

/// Generated dataset: the manifest plus the per-stream embedding bases.
pub struct SynthOutput {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
}

/// Render the dataset under `out_dir`: per-video feature files, the two
/// embedding bases, and `manifest.json`. Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<SynthOutput> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let basis_a = embedding_basis(spec.vocab, spec.dim, &mut rng);
    let basis_m = embedding_basis(spec.vocab, spec.dim, &mut rng);
    features::write_frame_features(out_dir.join("embeddings.appearance.pyft"), basis_a.view())?;
    features::write_frame_features(out_dir.join("embeddings.motion.pyft"), basis_m.view())?;

    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut entries = Vec::new();
    for label in 0..spec.classes {
        for v in 0..spec.videos_per_class {
            let frames = rng.random_range(spec.frames_min..=spec.frames_max);
            let tokens = spec.token_sequence(label, frames);
            let video_id = format!("c{label}_v{v}");
            let mut rels = [PathBuf::new(), PathBuf::new()];
            for (slot, stream) in [Stream::Appearance, Stream::Motion].into_iter().enumerate() {
                let basis = match stream {
                    Stream::Appearance => &basis_a,
                    Stream::Motion => &basis_m,
                };
                let discriminative = spec.stream_is_discriminative(label, stream);
                let mut mat = Array2::zeros((frames, spec.dim));
                for (t, &tok) in tokens.iter().enumerate() {
                    let tok = if discriminative { tok } else { spec.neutral_token() };
                    let mut row = basis.row(tok).to_owned();
                    if spec.noise_sigma > 0.0 {
                        for x in row.iter_mut() {
                            *x += spec.noise_sigma * noise.sample(&mut rng);
                        }
                    }
                    mat.row_mut(t).assign(&row);
                }
                let rel = PathBuf::from(format!("{video_id}.{}.pyft", stream.tag()));
                features::write_frame_features(out_dir.join(&rel), mat.view())?;
                rels[slot] = rel;
            }
            let [appearance, motion] = rels;
            entries.push(ManifestEntry {
                video_id,
                label,
                frames,
                appearance,
                motion,
            });
        }
    }

    let manifest = DatasetManifest {
        name: spec.name.clone(),
        classes: (0..spec.classes).map(|c| format!("class{c}")).collect(),
        split: "full".into(),
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    Ok(SynthOutput {
        manifest,
        manifest_path,
    })
}

/// Nearest-centroid accuracy on global mean features of one stream. Used as
/// the generator's separability sanity report.
pub fn nearest_centroid_accuracy(manifest: &DatasetManifest, stream: Stream) -> Result<f64> {
    let seqs = manifest.load_stream(stream)?;
    if seqs.is_empty() {
        return Err(Error::data("empty manifest"));
    }
    let classes = manifest.class_count();
    let dim = seqs[0].dim();
    let mut centroids = Array2::<f64>::zeros((classes, dim));
    let mut counts = vec![0usize; classes];
    let means: Vec<Array1<f64>> = seqs
        .iter()
        .map(|s| s.features.mean_axis(ndarray::Axis(0)).unwrap())
        .collect();
    for (seq, mean) in seqs.iter().zip(means.iter()) {
        centroids.row_mut(seq.label).scaled_add(1.0, mean);
        counts[seq.label] += 1;
    }
    for (mut row, &count) in centroids.rows_mut().into_iter().zip(counts.iter()) {
        if count > 0 {
            row /= count as f64;
        }
    }
    let mut correct = 0usize;
    for (seq, mean) in seqs.iter().zip(means.iter()) {
        let best = (0..classes)
            .min_by(|&a, &b| {
                let da = sq_dist(mean, &centroids.row(a).to_owned());
                let db = sq_dist(mean, &centroids.row(b).to_owned());
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        if best == seq.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / seqs.len() as f64)
}

fn sq_dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}
