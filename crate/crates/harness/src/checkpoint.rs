//! Checkpoint directories.
//!
//! A checkpoint is a directory holding `manifest.txt` and one blob per
//! tensor. The manifest uses the config grammar (`key = value` lines) and
//! records the architecture name, input shape, epoch, config hash, mask
//! hyperparameters and the layer chain:
//!
//! ```text
//! layer.0 = conv stride=1 padding=1
//! layer.1 = bn masked=true eps=0.00001
//! layer.2 = relu
//! layer.3 = pool size=2
//! tensor.layer.0.weight = 16,1,3,3
//! ```
//!
//! Each `tensor.<name> = <shape>` entry has a blob `<name>.f32` of
//! little-endian IEEE-754 `f32` values in row-major order. Floats in the
//! manifest are written in shortest round-trip form, so a load reproduces
//! every value bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use softprune::{BatchNorm, Layer, MaskHyperParams, MaskVariant, Model32, ModelGraph, Scalar, Tensor};

use crate::error::{HarnessError, Result};

const FORMAT: &str = "softprune-checkpoint-1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model32,
    pub arch: String,
    pub epoch: usize,
    pub config_hash: String,
    pub mask: MaskHyperParams<f32>,
    pub variant: MaskVariant<f32>,
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn write_blob(dir: &Path, name: &str, values: &[f32]) -> Result<()> {
    let path = dir.join(format!("{name}.f32"));
    fs::write(&path, f32::to_le_bytes_vec(values)).map_err(|e| HarnessError::io(path, e))
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let mut m = String::new();
        let [c, h, w] = self.model.input_shape();
        let _ = writeln!(m, "format = {FORMAT}");
        let _ = writeln!(m, "arch = {}", self.arch);
        let _ = writeln!(m, "input_shape = {c},{h},{w}");
        let _ = writeln!(m, "epoch = {}", self.epoch);
        let _ = writeln!(m, "config_hash = {}", self.config_hash);
        let _ = writeln!(m, "mask.delta = {}", self.mask.delta);
        let _ = writeln!(m, "mask.c = {}", self.mask.c);
        let _ = writeln!(m, "mask.k = {}", self.mask.k);
        let _ = writeln!(m, "mask.tau = {}", self.mask.tau);
        match self.variant {
            MaskVariant::WithRelu => {
                let _ = writeln!(m, "mask.variant = with_relu");
            }
            MaskVariant::NoRelu { delta_new } => {
                let _ = writeln!(m, "mask.variant = no_relu");
                let _ = writeln!(m, "mask.delta_new = {delta_new}");
            }
        }
        let _ = writeln!(m, "layers = {}", self.model.layers().len());
        let mut tensors: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        for (i, layer) in self.model.layers().iter().enumerate() {
            let desc = match layer {
                Layer::Conv2d { weight, stride, padding } => {
                    tensors.push((format!("layer.{i}.weight"), weight.shape().to_vec(), weight.data()));
                    format!("conv stride={stride} padding={padding}")
                }
                Layer::BatchNorm(bn) => {
                    let n = vec![bn.channels()];
                    tensors.push((format!("layer.{i}.beta"), n.clone(), bn.beta.data()));
                    tensors.push((format!("layer.{i}.gamma"), n.clone(), bn.gamma.data()));
                    tensors.push((format!("layer.{i}.running_mean"), n.clone(), &bn.running_mean));
                    tensors.push((format!("layer.{i}.running_var"), n, &bn.running_var));
                    format!("bn masked={} eps={}", bn.masked, bn.eps)
                }
                Layer::Relu => "relu".into(),
                Layer::AvgPool { size } => format!("pool size={size}"),
                Layer::Flatten => "flatten".into(),
                Layer::Dense { weight, bias } => {
                    tensors.push((format!("layer.{i}.weight"), weight.shape().to_vec(), weight.data()));
                    tensors.push((format!("layer.{i}.bias"), bias.shape().to_vec(), bias.data()));
                    "dense".into()
                }
            };
            let _ = writeln!(m, "layer.{i} = {desc}");
        }
        for (name, shape, values) in &tensors {
            let _ = writeln!(m, "tensor.{name} = {}", shape_str(shape));
            write_blob(dir, name, values)?;
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, m).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        let text = fs::read_to_string(&manifest_path).map_err(|e| HarnessError::io(&manifest_path, e))?;
        let err = |message: String| HarnessError::Checkpoint { path: dir.to_path_buf(), message };
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("malformed manifest line {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).map(String::as_str).ok_or_else(|| err(format!("manifest lacks {k}")));
        let num = |k: &str| -> Result<f32> { get(k)?.parse().map_err(|_| err(format!("{k} is not a number"))) };
        if get("format")? != FORMAT {
            return Err(err(format!("unsupported format {:?}", get("format")?)));
        }
        let dims = |s: &str| -> Result<Vec<usize>> { s.split(',').map(|d| d.trim().parse().map_err(|_| err(format!("bad shape {s:?}")))).collect() };
        let input = dims(get("input_shape")?)?;
        let [c, h, w] = input[..] else { return Err(err("input_shape must have three entries".into())) };
        let tensor = |name: &str| -> Result<Tensor<f32>> {
            let shape = dims(get(&format!("tensor.{name}"))?)?;
            let path: PathBuf = dir.join(format!("{name}.f32"));
            let bytes = fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
            let expected: usize = shape.iter().product::<usize>() * 4;
            if bytes.len() != expected {
                return Err(err(format!("{} holds {} bytes, shape needs {expected}", path.display(), bytes.len())));
            }
            let values = f32::from_le_bytes_slice(&bytes).ok_or_else(|| err(format!("{} is not a whole number of floats", path.display())))?;
            Ok(Tensor::new(shape, values)?)
        };
        let count: usize = get("layers")?.parse().map_err(|_| err("layers is not a count".into()))?;
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let desc = get(&format!("layer.{i}"))?;
            let mut parts = desc.split_whitespace();
            let kind = parts.next().unwrap_or("");
            let attrs: BTreeMap<&str, &str> = parts.filter_map(|p| p.split_once('=')).collect();
            let attr = |k: &str| attrs.get(k).copied().ok_or_else(|| err(format!("layer {i} lacks {k}")));
            let uint = |k: &str| -> Result<usize> { attr(k)?.parse().map_err(|_| err(format!("layer {i}: bad {k}"))) };
            layers.push(match kind {
                "conv" => Layer::Conv2d { weight: tensor(&format!("layer.{i}.weight"))?, stride: uint("stride")?, padding: uint("padding")? },
                "bn" => Layer::BatchNorm(BatchNorm {
                    beta: tensor(&format!("layer.{i}.beta"))?,
                    gamma: tensor(&format!("layer.{i}.gamma"))?,
                    running_mean: tensor(&format!("layer.{i}.running_mean"))?.into_data(),
                    running_var: tensor(&format!("layer.{i}.running_var"))?.into_data(),
                    eps: attr("eps")?.parse().map_err(|_| err(format!("layer {i}: bad eps")))?,
                    masked: attr("masked")? == "true",
                }),
                "relu" => Layer::Relu,
                "pool" => Layer::AvgPool { size: uint("size")? },
                "flatten" => Layer::Flatten,
                "dense" => Layer::Dense { weight: tensor(&format!("layer.{i}.weight"))?, bias: tensor(&format!("layer.{i}.bias"))? },
                other => return Err(err(format!("layer {i}: unknown kind {other:?}"))),
            });
        }
        let variant = match get("mask.variant")? {
            "with_relu" => MaskVariant::WithRelu,
            "no_relu" => MaskVariant::NoRelu { delta_new: num("mask.delta_new")? },
            other => return Err(err(format!("unknown mask variant {other:?}"))),
        };
        Ok(Checkpoint {
            model: ModelGraph::new(layers, [c, h, w])?,
            arch: get("arch")?.to_string(),
            epoch: get("epoch")?.parse().map_err(|_| err("epoch is not a count".into()))?,
            config_hash: get("config_hash")?.to_string(),
            mask: MaskHyperParams { delta: num("mask.delta")?, c: num("mask.c")?, k: num("mask.k")?, tau: num("mask.tau")? },
            variant,
        })
    }
}
