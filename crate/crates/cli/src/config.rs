//! Run configuration: one JSON file selecting the training mode plus the
//! mode-specific hyperparameters, with a small set of flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pyra_core::deep::{AggVariant, StreamMode, TrainConfig};
use pyra_core::kernel::ComboVariant;
use pyra_core::pyramid::Stream;
use pyra_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Deep,
    Shallow,
}

/// Elementary kernel choice; a gaussian without an explicit bandwidth uses
/// the median pairwise descriptor distance of the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelChoice {
    Linear,
    Gaussian { sigma: Option<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShallowConfig {
    pub depth: usize,
    pub variant: ComboVariant,
    pub kernel: KernelChoice,
    pub box_c: f64,
    pub svm_tol: f64,
    pub svm_max_iter: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub entropy_damping: Option<f64>,
    pub stream: Stream,
}

impl Default for ShallowConfig {
    fn default() -> Self {
        ShallowConfig {
            depth: 3,
            variant: ComboVariant::LinearCombo,
            kernel: KernelChoice::Linear,
            box_c: 10.0,
            svm_tol: 1e-5,
            svm_max_iter: 100_000,
            max_iters: 50,
            tol: 1e-6,
            entropy_damping: None,
            stream: Stream::Appearance,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub train_manifest: PathBuf,
    #[serde(default)]
    pub test_manifest: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub deep: TrainConfig,
    #[serde(default)]
    pub shallow: ShallowConfig,
}

impl RunConfig {
    /// Load and validate; serde reports unknown keys together with the list
    /// of valid ones.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    /// Paths in the config are relative to the config file's directory.
    pub fn resolve_paths(&mut self, config_path: &Path) {
        let base = config_path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        fix(&mut self.train_manifest);
        if let Some(p) = &mut self.test_manifest {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
        if let Some(p) = &mut self.out_dir {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
    }
}

/// Command-line overrides for `train`.
#[derive(Debug, Default)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub depth: Option<usize>,
    pub variant: Option<String>,
    pub pyramids: Option<usize>,
    pub speedup_k: Option<usize>,
    pub stream: Option<String>,
    pub threads: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, config: &mut RunConfig) -> Result<()> {
        if let Some(out) = &self.out {
            config.out_dir = Some(out.clone());
        }
        if let Some(depth) = self.depth {
            config.deep.depth = depth;
            config.shallow.depth = depth;
        }
        if let Some(v) = &self.variant {
            match v.as_str() {
                // the shallow kernel combinations mirror the two deep
                // aggregation variants
                "concat" => {
                    config.deep.variant = AggVariant::Concat;
                    config.shallow.variant = ComboVariant::LinearCombo;
                }
                "average" => {
                    config.deep.variant = AggVariant::Average;
                    config.shallow.variant = ComboVariant::CrossCombo;
                }
                other => {
                    return Err(Error::invalid(format!(
                        "unknown variant {other:?}; expected concat or average"
                    )))
                }
            }
        }
        if let Some(p) = self.pyramids {
            config.deep.pyramids = p;
        }
        if let Some(k) = self.speedup_k {
            config.deep.speedup_k = k;
        }
        if let Some(s) = &self.stream {
            match (config.mode, s.as_str()) {
                (Mode::Deep, "motion") => config.deep.stream_mode = StreamMode::Motion,
                (Mode::Deep, "appearance") => config.deep.stream_mode = StreamMode::Appearance,
                (Mode::Deep, "joint") => config.deep.stream_mode = StreamMode::Joint,
                (Mode::Shallow, "motion") => config.shallow.stream = Stream::Motion,
                (Mode::Shallow, "appearance") => config.shallow.stream = Stream::Appearance,
                (Mode::Shallow, "joint") => {
                    return Err(Error::invalid(
                        "the shallow path trains one stream at a time",
                    ))
                }
                (_, other) => {
                    return Err(Error::invalid(format!(
                        "unknown stream {other:?}; expected motion, appearance or joint"
                    )))
                }
            }
        }
        if let Some(seed) = self.seed {
            config.deep.seed = seed;
        }
        if let Some(t) = self.threads {
            config.deep.threads = t;
        }
        Ok(())
    }
}
