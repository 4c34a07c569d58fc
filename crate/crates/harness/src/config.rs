//! Experiment configuration.
//!
//! The file format is one `key = value` pair per line. Blank lines and
//! lines starting with `#` are ignored, keys are flat dotted names, lists
//! are comma-separated and relative paths are resolved against the
//! directory holding the file. Unknown and repeated keys are errors.
//! [`KEYS`] lists every key with its default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use softprune::{Architecture, LrSchedule, MaskHyperParams, SparsityConfig, SparsityVariant};

use crate::data::{self, Dataset, Normalization};
use crate::error::{HarnessError, Result};

/// Every accepted key with its default (empty means "must be set" for
/// paths and "unset" for optional values).
pub const KEYS: &[(&str, &str)] = &[
    ("dataset.format", "idx"),
    ("dataset.train_images", ""),
    ("dataset.train_labels", ""),
    ("dataset.test_images", ""),
    ("dataset.test_labels", ""),
    ("dataset.train_size", ""),
    ("dataset.test_size", ""),
    ("dataset.num_classes", "10"),
    ("dataset.mean", "0.1307"),
    ("dataset.std", "0.3081"),
    ("dataset.flip", "false"),
    ("model.arch", "convnet-s"),
    ("mask.delta", "0.05"),
    ("mask.c", "0.8"),
    ("mask.k", "20"),
    ("mask.tau", "0.5"),
    ("sparsity.lambda", "1e-5"),
    ("sparsity.s", "3"),
    ("sparsity.delta_new", "0.05"),
    ("sparsity.variant", "with_relu"),
    ("sparsity.target_ratio", ""),
    ("optim.lr", "0.1"),
    ("optim.momentum", "0.9"),
    ("optim.weight_decay", "1e-4"),
    ("optim.decay_epochs", "10,15"),
    ("optim.decay_factor", "10"),
    ("train.epochs", "20"),
    ("train.batch_size", "64"),
    ("train.seed", "1"),
    ("output.dir", "runs/default"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Separate IDX image and label files.
    Idx,
    /// CIFAR-10 binary batches; `*_images` hold comma-separated batch
    /// files and `*_labels` are unused.
    Cifar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub format: DatasetFormat,
    pub train_images: Vec<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Vec<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    pub num_classes: usize,
    pub normalization: Normalization,
    pub flip: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub arch: Architecture,
    pub mask: MaskHyperParams<f32>,
    pub sparsity: SparsityConfig<f32>,
    pub schedule: LrSchedule,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    values: BTreeMap<String, String>,
}

fn parse_lines(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(HarnessError::Config { path: path.to_path_buf(), line: i + 1, message: format!("expected key = value, got {line:?}") });
        };
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| HarnessError::InvalidConfig(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_num(key, s)).collect()
}

fn resolve(base: &Path, v: &str) -> PathBuf {
    let p = PathBuf::from(v);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    /// Reads a config file and applies `key=value` overrides on top.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_text(&text, path, &base, overrides)
    }

    /// Parses config text; relative paths are resolved against `base`.
    /// Overrides are relative to the working directory.
    pub fn from_text(text: &str, path: &Path, base: &Path, overrides: &[String]) -> Result<Self> {
        let mut values: BTreeMap<String, String> = KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut seen = BTreeMap::new();
        let is_path = |k: &str| k.ends_with("_images") || k.ends_with("_labels") || k == "output.dir";
        let resolve_value = |k: &str, v: &str, base: &Path| -> String {
            if is_path(k) && !v.is_empty() {
                v.split(',').map(|p| resolve(base, p.trim()).to_string_lossy().into_owned()).collect::<Vec<_>>().join(",")
            } else {
                v.to_string()
            }
        };
        for (line, k, v) in parse_lines(text, path)? {
            if !values.contains_key(&k) {
                return Err(HarnessError::Config { path: path.to_path_buf(), line, message: format!("unknown key {k:?}") });
            }
            if let Some(prev) = seen.insert(k.clone(), line) {
                return Err(HarnessError::Config { path: path.to_path_buf(), line, message: format!("{k:?} already set on line {prev}") });
            }
            let v = resolve_value(&k, &v, base);
            values.insert(k, v);
        }
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                return Err(HarnessError::InvalidConfig(format!("override {o:?} is not key=value")));
            };
            let k = k.trim();
            if !values.contains_key(k) {
                return Err(HarnessError::InvalidConfig(format!("unknown key {k:?}")));
            }
            let v = resolve_value(k, v.trim(), Path::new(""));
            values.insert(k.to_string(), v);
        }
        Self::from_values(values)
    }

    /// A config from defaults plus explicit values, without a file.
    pub fn from_pairs(pairs: &[(&str, String)]) -> Result<Self> {
        let overrides: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
        Self::from_text("", Path::new("<pairs>"), Path::new(""), &overrides)
    }

    fn from_values(values: BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| values[k].as_str();
        let opt = |k: &str| Some(get(k)).filter(|v| !v.is_empty());
        let paths = |k: &str| -> Vec<PathBuf> { get(k).split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect() };
        let format = match get("dataset.format") {
            "idx" => DatasetFormat::Idx,
            "cifar" => DatasetFormat::Cifar,
            other => return Err(HarnessError::InvalidConfig(format!("dataset.format: unknown format {other:?}"))),
        };
        let dataset = DatasetConfig {
            format,
            train_images: paths("dataset.train_images"),
            train_labels: opt("dataset.train_labels").map(PathBuf::from),
            test_images: paths("dataset.test_images"),
            test_labels: opt("dataset.test_labels").map(PathBuf::from),
            train_size: opt("dataset.train_size").map(|v| parse_num("dataset.train_size", v)).transpose()?,
            test_size: opt("dataset.test_size").map(|v| parse_num("dataset.test_size", v)).transpose()?,
            num_classes: parse_num("dataset.num_classes", get("dataset.num_classes"))?,
            normalization: Normalization { mean: parse_list("dataset.mean", get("dataset.mean"))?, std: parse_list("dataset.std", get("dataset.std"))? },
            flip: parse_num("dataset.flip", get("dataset.flip"))?,
        };
        let arch = Architecture::parse(get("model.arch"))
            .ok_or_else(|| HarnessError::InvalidConfig(format!("model.arch: unknown architecture {:?}", get("model.arch"))))?;
        let mask = MaskHyperParams {
            delta: parse_num("mask.delta", get("mask.delta"))?,
            c: parse_num("mask.c", get("mask.c"))?,
            k: parse_num("mask.k", get("mask.k"))?,
            tau: parse_num("mask.tau", get("mask.tau"))?,
        };
        let variant = match get("sparsity.variant") {
            "with_relu" => SparsityVariant::WithRelu,
            "no_relu" => SparsityVariant::NoRelu,
            other => return Err(HarnessError::InvalidConfig(format!("sparsity.variant: unknown variant {other:?}"))),
        };
        let sparsity = SparsityConfig {
            lambda: parse_num("sparsity.lambda", get("sparsity.lambda"))?,
            s: parse_num("sparsity.s", get("sparsity.s"))?,
            delta_new: parse_num("sparsity.delta_new", get("sparsity.delta_new"))?,
            variant,
            target_ratio: opt("sparsity.target_ratio").map(|v| parse_num("sparsity.target_ratio", v)).transpose()?,
        };
        let schedule = LrSchedule {
            initial: parse_num("optim.lr", get("optim.lr"))?,
            decay_epochs: parse_list("optim.decay_epochs", get("optim.decay_epochs"))?,
            factor: parse_num("optim.decay_factor", get("optim.decay_factor"))?,
        };
        let cfg = ExperimentConfig {
            dataset,
            arch,
            mask,
            sparsity,
            schedule,
            momentum: parse_num("optim.momentum", get("optim.momentum"))?,
            weight_decay: parse_num("optim.weight_decay", get("optim.weight_decay"))?,
            epochs: parse_num("train.epochs", get("train.epochs"))?,
            batch_size: parse_num("train.batch_size", get("train.batch_size"))?,
            seed: parse_num("train.seed", get("train.seed"))?,
            output_dir: PathBuf::from(get("output.dir")),
            values,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        self.mask.validate()?;
        self.sparsity.validate()?;
        if self.batch_size < 2 {
            return bad(format!("train.batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("train.epochs must be positive".into());
        }
        if !(self.schedule.initial > 0.0) || !(self.schedule.factor > 0.0) {
            return bad("optim.lr and optim.decay_factor must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("optim.momentum must lie in [0,1) and optim.weight_decay must be non-negative".into());
        }
        if self.dataset.num_classes < 2 {
            return bad("dataset.num_classes must be at least 2".into());
        }
        if self.dataset.normalization.std.iter().any(|&s| !(s > 0.0)) {
            return bad("dataset.std entries must be positive".into());
        }
        let d = &self.dataset;
        let mut required: Vec<&PathBuf> = d.train_images.iter().chain(&d.test_images).collect();
        if d.format == DatasetFormat::Idx {
            match (&d.train_labels, &d.test_labels, d.train_images.len(), d.test_images.len()) {
                (Some(a), Some(b), 1, 1) => required.extend([a, b]),
                _ => return bad("idx datasets need one train/test image file and one train/test label file".into()),
            }
        } else if d.train_images.is_empty() || d.test_images.is_empty() {
            return bad("cifar datasets need dataset.train_images and dataset.test_images".into());
        }
        for p in required {
            if !p.exists() {
                return Err(HarnessError::MissingFile { path: p.clone() });
            }
        }
        Ok(())
    }

    /// Canonical text with every key, in sorted order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 over the canonical text, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.values.iter().filter(|(k, _)| *k != "output.dir") {
            h.update(format!("{k} = {v}\n"));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn value(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Returns a copy with one key replaced.
    pub fn with(&self, key: &str, value: impl ToString) -> Result<Self> {
        if !self.values.contains_key(key) {
            return Err(HarnessError::InvalidConfig(format!("unknown key {key:?}")));
        }
        let mut values = self.values.clone();
        values.insert(key.to_string(), value.to_string());
        Self::from_values(values)
    }

    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.dataset;
        let load = |images: &[PathBuf], labels: &Option<PathBuf>| -> Result<Dataset> {
            match d.format {
                DatasetFormat::Idx => data::load_idx(&images[0], labels.as_ref().unwrap(), &d.normalization, d.num_classes),
                DatasetFormat::Cifar => {
                    let refs: Vec<&Path> = images.iter().map(PathBuf::as_path).collect();
                    data::load_cifar_binary(&refs, &d.normalization, d.num_classes)
                }
            }
        };
        let mut train = load(&d.train_images, &d.train_labels)?;
        let mut test = load(&d.test_images, &d.test_labels)?;
        if let Some(n) = d.train_size {
            train.truncate(n)?;
        }
        if let Some(n) = d.test_size {
            test.truncate(n)?;
        }
        if train.image_shape() != test.image_shape() {
            return Err(HarnessError::InvalidConfig("train and test images differ in shape".into()));
        }
        if train.len() < self.batch_size {
            return Err(HarnessError::InvalidConfig(format!("{} training examples for batch size {}", train.len(), self.batch_size)));
        }
        Ok((train, test))
    }
}
