//! The JSON run configuration and dataset loading.

use std::fs;
use std::path::{Path, PathBuf};

use relief_core::data::{load_idx, synth_dataset_with, Dataset, SynthOptions};
use relief_core::pipeline::{OptimizerConfig, PruneConfig};
use relief_core::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// MNIST-style IDX files, optionally gzip-compressed.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first `train_limit` training samples.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        /// Standardize with the training mean and std after scaling to [0, 1].
        #[serde(default)]
        normalize: bool,
    },
    /// Gaussian class blobs.
    Synthetic {
        n: usize,
        classes: usize,
        #[serde(default)]
        dim: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default)]
        test_n: Option<usize>,
    },
}

fn default_spread() -> f64 {
    0.5
}

/// Settings for the `bounds` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub layer: usize,
    pub alpha: f64,
    pub n: usize,
}

/// Everything one run needs; copied verbatim into the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Preset name or architecture string, e.g. `lenet300100` or `mlp:784-100-10`.
    pub model: String,
    pub data: DataConfig,
    #[serde(default)]
    pub dtype: Dtype,
    pub train: OptimizerConfig,
    /// Retraining schedule; defaults to `train`.
    #[serde(default)]
    pub retrain: Option<OptimizerConfig>,
    #[serde(default)]
    pub prune: Option<PruneConfig>,
    #[serde(default)]
    pub bounds: Option<BoundsConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Reads `path`; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &mut cfg.data
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        if let Some(out) = &mut cfg.out {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn retrain_config(&self) -> &OptimizerConfig {
        self.retrain.as_ref().unwrap_or(&self.train)
    }

    /// Checks every field that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        if let DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &self.data
        {
            let files = [
                ("data.train_images", train_images),
                ("data.train_labels", train_labels),
                ("data.test_images", test_images),
                ("data.test_labels", test_labels),
            ];
            for (field, p) in files {
                if !p.is_file() {
                    return Err(Error::Config(format!("{field}: no such file {}", p.display())));
                }
            }
        }
        self.train.validate().map_err(|e| field_error("train", e))?;
        if let Some(r) = &self.retrain {
            r.validate().map_err(|e| field_error("retrain", e))?;
        }
        if let Some(p) = &self.prune {
            p.validate().map_err(|e| field_error("prune", e))?;
        }
        if let Some(b) = &self.bounds {
            if !(b.alpha > 0.0 && b.alpha <= 1.0) {
                return Err(Error::Config("bounds.alpha must lie in (0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Training and test sets as described by `data`.
    pub fn load_data<T: Scalar>(&self, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
        match &self.data {
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
                normalize,
            } => {
                let mut train: Dataset<T> = load_idx(train_images, train_labels)?;
                let mut test: Dataset<T> = load_idx(test_images, test_labels)?;
                if let Some(n) = train_limit {
                    train = train.take(*n);
                }
                if let Some(n) = test_limit {
                    test = test.take(*n);
                }
                let classes = train.classes().max(test.classes());
                let mut train = train.with_classes(classes)?;
                let mut test = test.with_classes(classes)?;
                if *normalize {
                    let (mean, std) = train.mean_std();
                    train.normalize(mean, std)?;
                    test.normalize(mean, std)?;
                }
                Ok((train, test))
            }
            DataConfig::Synthetic {
                n,
                classes,
                dim,
                spread,
                test_n,
            } => {
                let opts = SynthOptions {
                    dim: *dim,
                    spread: *spread,
                };
                let total = n + test_n.unwrap_or(n / 4).max(*classes);
                let all: Dataset<T> =
                    synth_dataset_with(seed, total, *classes, opts).map_err(|e| field_error("data", e))?;
                let idx: Vec<usize> = (0..total).collect();
                Ok((all.subset(&idx[..*n])?, all.subset(&idx[*n..])?))
            }
        }
    }
}

fn field_error(field: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{field}: {m}")),
        Error::EmptyPruningSet => Error::Config(format!("{field}: n_pruning_samples must be at least 1")),
        other => other,
    }
}
