//! Hard-mask extraction, channel surgery and size accounting.

use std::fmt;

use crate::error::{Error, Result};
use crate::mask::{LayerMask, MaskHyperParams, MaskVariant};
use crate::model::{Layer, ModelGraph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hard masks of every masked BN layer, in layer order. A layer whose
/// channels all meet the prune criterion keeps its least-deactivated
/// channel; a warning is logged when that happens.
pub fn extract_masks<T: Scalar>(model: &ModelGraph<T>, hyper: &MaskHyperParams<T>, variant: &MaskVariant<T>) -> Result<Vec<LayerMask>> {
    let mut masks = Vec::new();
    for (i, bn) in model.masked_batch_norms() {
        let m = bn.hard_mask(hyper, variant);
        if m.fallback {
            log::warn!("layer {i}: every channel met the prune criterion; keeping one channel");
        }
        masks.push(m);
    }
    if masks.is_empty() {
        return Err(Error::InvalidModel("model has no masked BN layer".into()));
    }
    Ok(masks)
}

/// Fraction of masked channels whose deactivation probability is at least
/// `c`, without the keep-one fallback.
pub fn soft_pruning_ratio<T: Scalar>(model: &ModelGraph<T>, hyper: &MaskHyperParams<T>, variant: &MaskVariant<T>) -> f64 {
    let (mut pruned, mut total) = (0usize, 0usize);
    for (_, bn) in model.masked_batch_norms() {
        let probs = bn.deactivation_probs(hyper, variant);
        pruned += probs.iter().filter(|&&p| p >= hyper.c).count();
        total += probs.len();
    }
    if total == 0 {
        0.0
    } else {
        pruned as f64 / total as f64
    }
}

fn select<T: Scalar>(v: &[T], keep: &[bool]) -> Vec<T> {
    v.iter().zip(keep).filter(|(_, &k)| k).map(|(&x, _)| x).collect()
}

fn kept(keep: &[bool]) -> usize {
    keep.iter().filter(|&&k| k).count()
}

/// Removes masked channels: the producing conv's filters, the BN entries and
/// the consuming conv's input slices or dense input columns. After a
/// flatten, channel `c` of a `[C, H, W]` map owns dense columns
/// `c*H*W .. (c+1)*H*W`. Every BN in the result is a plain BN.
///
/// `masks` holds one entry per masked BN layer, in order.
pub fn surgery<T: Scalar>(model: &ModelGraph<T>, masks: &[LayerMask]) -> Result<ModelGraph<T>> {
    let layers = model.layers();
    let masked: Vec<usize> = model.masked_batch_norms().map(|(i, _)| i).collect();
    if masks.len() != masked.len() {
        return Err(Error::MaskMismatch(format!("{} masks for {} masked BN layers", masks.len(), masked.len())));
    }
    let mut bn_keep: Vec<Option<&[bool]>> = vec![None; layers.len()];
    for (&i, m) in masked.iter().zip(masks) {
        let Layer::BatchNorm(bn) = &layers[i] else { unreachable!() };
        if m.keep.len() != bn.channels() {
            return Err(Error::MaskMismatch(format!(
                "layer {i}: mask has {} entries for {} channels",
                m.keep.len(),
                bn.channels()
            )));
        }
        if kept(&m.keep) == 0 {
            return Err(Error::MaskMismatch(format!("layer {i}: mask removes every channel")));
        }
        bn_keep[i] = Some(&m.keep);
    }
    let shapes = model.layer_output_shapes(&model.input_shape())?;

    // output-channel selection of each conv, taken from the BN it feeds
    let mut conv_out: Vec<Option<&[bool]>> = vec![None; layers.len()];
    let mut consumed = vec![false; layers.len()];
    for (i, layer) in layers.iter().enumerate() {
        if !matches!(layer, Layer::Conv2d { .. }) {
            continue;
        }
        for (j, next) in layers.iter().enumerate().skip(i + 1) {
            match next {
                Layer::BatchNorm(_) => {
                    if let Some(k) = bn_keep[j] {
                        conv_out[i] = Some(k);
                        consumed[j] = true;
                    }
                    break;
                }
                Layer::Conv2d { .. } | Layer::Dense { .. } | Layer::Flatten => break,
                _ => {}
            }
        }
    }
    if let Some(&i) = masked.iter().find(|&&i| !consumed[i] && bn_keep[i].is_some_and(|k| kept(k) != k.len())) {
        return Err(Error::InvalidModel(format!("masked BN at layer {i} has no producing conv to prune")));
    }

    let mut cur: Vec<bool> = vec![true; model.input_shape()[0]];
    let mut out = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let new = match layer {
            Layer::Conv2d { weight, stride, padding } => {
                let &[c_out, c_in, kh, kw] = weight.shape() else { unreachable!() };
                let rows: Vec<bool> = conv_out[i].map(<[bool]>::to_vec).unwrap_or_else(|| vec![true; c_out]);
                let k = kh * kw;
                let mut data = Vec::with_capacity(kept(&rows) * kept(&cur) * k);
                for (o, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
                    for (c, _) in cur.iter().enumerate().filter(|(_, &r)| r) {
                        let start = (o * c_in + c) * k;
                        data.extend_from_slice(&weight.data()[start..start + k]);
                    }
                }
                let w = Tensor::new(vec![kept(&rows), kept(&cur), kh, kw], data)?;
                cur = rows;
                Layer::Conv2d { weight: w, stride: *stride, padding: *padding }
            }
            Layer::BatchNorm(bn) => {
                let mut bn = bn.clone();
                let n = kept(&cur);
                bn.beta = Tensor::new(vec![n], select(bn.beta.data(), &cur))?;
                bn.gamma = Tensor::new(vec![n], select(bn.gamma.data(), &cur))?;
                bn.running_mean = select(&bn.running_mean, &cur);
                bn.running_var = select(&bn.running_var, &cur);
                bn.masked = false;
                Layer::BatchNorm(bn)
            }
            Layer::Flatten => {
                let spatial: usize = if i == 0 { model.input_shape()[1..].iter().product() } else { shapes[i - 1][1..].iter().product() };
                cur = cur.iter().flat_map(|&k| std::iter::repeat_n(k, spatial)).collect();
                Layer::Flatten
            }
            Layer::Dense { weight, bias } => {
                let &[d_out, d_in] = weight.shape() else { unreachable!() };
                let mut data = Vec::with_capacity(d_out * kept(&cur));
                for r in 0..d_out {
                    data.extend(select(&weight.data()[r * d_in..(r + 1) * d_in], &cur));
                }
                let w = Tensor::new(vec![d_out, kept(&cur)], data)?;
                cur = vec![true; d_out];
                Layer::Dense { weight: w, bias: bias.clone() }
            }
            Layer::Relu => Layer::Relu,
            Layer::AvgPool { size } => Layer::AvgPool { size: *size },
        };
        out.push(new);
    }
    ModelGraph::new(out, model.input_shape())
}

/// Weights, biases and BN `beta`, `gamma` elements.
pub fn count_params<T: Scalar>(model: &ModelGraph<T>) -> u64 {
    model.params().iter().map(|(t, _)| t.len() as u64).sum()
}

/// `2 Ho Wo Cout Cin kh kw` per conv plus `2 Din Dout` per dense layer;
/// BN, ReLU, pooling and flatten count as zero.
pub fn count_flops<T: Scalar>(model: &ModelGraph<T>, input_shape: &[usize; 3]) -> Result<u64> {
    let shapes = model.layer_output_shapes(input_shape)?;
    let mut flops = 0u64;
    for (layer, shape) in model.layers().iter().zip(&shapes) {
        flops += match layer {
            Layer::Conv2d { weight, .. } => {
                let w = weight.shape();
                2 * (shape[1] * shape[2] * w[0] * w[1] * w[2] * w[3]) as u64
            }
            Layer::Dense { weight, .. } => 2 * weight.len() as u64,
            _ => 0,
        };
    }
    Ok(flops)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerChannels {
    /// Index of the BN layer in the model before pruning.
    pub layer: usize,
    pub kept: usize,
    pub total: usize,
}

/// Channel, parameter and FLOPs accounting of a pruning step.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub layers: Vec<LayerChannels>,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
}

fn reduction(before: u64, after: u64) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (1.0 - after as f64 / before as f64)
    }
}

impl PruneReport {
    pub fn channels_before(&self) -> usize {
        self.layers.iter().map(|l| l.total).sum()
    }

    pub fn channels_after(&self) -> usize {
        self.layers.iter().map(|l| l.kept).sum()
    }

    /// Global fraction of prunable channels removed, in percent.
    pub fn channel_reduction(&self) -> f64 {
        reduction(self.channels_before() as u64, self.channels_after() as u64)
    }

    pub fn param_reduction(&self) -> f64 {
        reduction(self.params_before, self.params_after)
    }

    pub fn flops_reduction(&self) -> f64 {
        reduction(self.flops_before, self.flops_after)
    }
}

impl fmt::Display for PruneReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            writeln!(f, "layer.{}.channels={}/{}", l.layer, l.kept, l.total)?;
        }
        writeln!(f, "channels_before={}", self.channels_before())?;
        writeln!(f, "channels_after={}", self.channels_after())?;
        writeln!(f, "params_before={}", self.params_before)?;
        writeln!(f, "params_after={}", self.params_after)?;
        writeln!(f, "flops_before={}", self.flops_before)?;
        writeln!(f, "flops_after={}", self.flops_after)?;
        writeln!(f, "channels_reduction={:.2}%", self.channel_reduction())?;
        writeln!(f, "params_reduction={:.2}%", self.param_reduction())?;
        write!(f, "flops_reduction={:.2}%", self.flops_reduction())
    }
}

/// Compares a model with its pruned counterpart. BN layers are paired in
/// order; the prunable channels are those of the masked BN layers of
/// `before` (every BN layer if `before` has no masked layer).
pub fn make_report<T: Scalar>(before: &ModelGraph<T>, after: &ModelGraph<T>, input_shape: &[usize; 3]) -> Result<PruneReport> {
    let b: Vec<_> = before.batch_norms().collect();
    let a: Vec<_> = after.batch_norms().collect();
    if a.len() != b.len() {
        return Err(Error::InvalidModel(format!("models have {} and {} BN layers", b.len(), a.len())));
    }
    let any_masked = b.iter().any(|(_, bn)| bn.masked);
    let mut layers = Vec::new();
    for ((i, bb), (_, ab)) in b.iter().zip(&a) {
        if any_masked && !bb.masked {
            continue;
        }
        if ab.channels() > bb.channels() {
            return Err(Error::InvalidModel(format!("BN layer {i} grew from {} to {} channels", bb.channels(), ab.channels())));
        }
        layers.push(LayerChannels { layer: *i, kept: ab.channels(), total: bb.channels() });
    }
    let report = PruneReport {
        layers,
        params_before: count_params(before),
        params_after: count_params(after),
        flops_before: count_flops(before, input_shape)?,
        flops_after: count_flops(after, input_shape)?,
    };
    if report.params_after > report.params_before || report.flops_after > report.flops_before {
        return Err(Error::InvalidModel("pruned model is larger than the original".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BatchNorm;

    fn tiny() -> ModelGraph<f32> {
        ModelGraph::new(
            vec![
                Layer::Conv2d { weight: Tensor::ones(&[2, 1, 3, 3]), stride: 1, padding: 0 },
                Layer::BatchNorm(BatchNorm::new(2, true)),
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense { weight: Tensor::ones(&[5, 32]), bias: Tensor::zeros(&[5]) },
            ],
            [1, 6, 6],
        )
        .unwrap()
    }

    #[test]
    fn hand_counts() {
        let m = tiny();
        // conv 18 + BN 4 + dense 160 + 5
        assert_eq!(count_params(&m), 187);
        // conv 2*(4*4*2*1*9) = 576, dense 2*32*5 = 320
        assert_eq!(count_flops(&m, &[1, 6, 6]).unwrap(), 896);
    }

    #[test]
    fn surgery_drops_flatten_block() {
        let m = tiny();
        let masks = vec![LayerMask { keep: vec![false, true], fallback: false }];
        let p = surgery(&m, &masks).unwrap();
        let Layer::Dense { weight, .. } = &p.layers()[4] else { panic!() };
        assert_eq!(weight.shape(), &[5, 16]);
        let Layer::Conv2d { weight, .. } = &p.layers()[0] else { panic!() };
        assert_eq!(weight.shape(), &[1, 1, 3, 3]);
        assert_eq!(p.masked_batch_norms().count(), 0);
    }

    #[test]
    fn mismatched_masks_rejected() {
        let m = tiny();
        assert!(matches!(surgery(&m, &[]), Err(Error::MaskMismatch(_))));
        let bad = vec![LayerMask { keep: vec![true; 3], fallback: false }];
        assert!(matches!(surgery(&m, &bad), Err(Error::MaskMismatch(_))));
    }

    #[test]
    fn identical_models_report_zero() {
        let m = tiny();
        let r = make_report(&m, &m, &[1, 6, 6]).unwrap();
        assert_eq!(r.channel_reduction(), 0.0);
        assert_eq!(r.param_reduction(), 0.0);
        assert_eq!(r.flops_reduction(), 0.0);
        assert!(r.to_string().contains("flops_reduction=0.00%"));
    }

    #[test]
    fn reduction_percentages() {
        assert_eq!(reduction(100, 25), 75.0);
        assert_eq!(reduction(0, 0), 0.0);
    }

    #[test]
    fn extract_masks_mixed_and_fallback() {
        let mut m = tiny();
        let hyper = MaskHyperParams { c: 0.8, ..Default::default() };
        // beta = -3 drives the CDF at 0.05 close to 1; beta = 3 close to 0
        if let Layer::BatchNorm(bn) = &mut m.layers_mut()[1] {
            bn.beta = Tensor::from_slice(&[2], &[-3.0, 3.0]).unwrap();
        }
        let masks = extract_masks(&m, &hyper, &MaskVariant::WithRelu).unwrap();
        assert_eq!(masks[0].keep, vec![false, true]);
        if let Layer::BatchNorm(bn) = &mut m.layers_mut()[1] {
            bn.beta = Tensor::from_slice(&[2], &[-3.0, -4.0]).unwrap();
        }
        let masks = extract_masks(&m, &hyper, &MaskVariant::WithRelu).unwrap();
        assert_eq!(masks[0].keep, vec![true, false]);
        assert!(masks[0].fallback);
        assert_eq!(soft_pruning_ratio(&m, &hyper, &MaskVariant::WithRelu), 1.0);
    }
}
