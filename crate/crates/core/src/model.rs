//! Feed-forward layer chains and the reference architectures.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::{self, ConvGeometry};
use crate::mask::{self, BnChannelState, LayerMask, MaskHyperParams, MaskVariant, RUNNING_MOMENTUM};
use crate::optim::ParamKind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub beta: Tensor<T>,
    pub gamma: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    /// Whether the layer carries a differentiable channel mask. Surgery
    /// produces plain (unmasked) layers.
    pub masked: bool,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, masked: bool) -> Self {
        BatchNorm {
            beta: Tensor::zeros(&[channels]),
            gamma: Tensor::ones(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::lit(1e-5),
            masked,
        }
    }

    pub fn channels(&self) -> usize {
        self.beta.len()
    }

    pub fn channel(&self, c: usize) -> BnChannelState<T> {
        BnChannelState {
            beta: self.beta.data()[c],
            gamma: self.gamma.data()[c],
            running_mean: self.running_mean[c],
            running_var: self.running_var[c],
            eps: self.eps,
        }
    }

    pub fn states(&self) -> Vec<BnChannelState<T>> {
        (0..self.channels()).map(|c| self.channel(c)).collect()
    }

    /// Hard masks of this layer, including the keep-one fallback.
    pub fn hard_mask(&self, hyper: &MaskHyperParams<T>, variant: &MaskVariant<T>) -> LayerMask {
        mask::layer_hard_mask(self.beta.data(), self.gamma.data(), hyper, variant)
    }

    pub fn deactivation_probs(&self, hyper: &MaskHyperParams<T>, variant: &MaskVariant<T>) -> Vec<T> {
        self.beta
            .data()
            .iter()
            .zip(self.gamma.data())
            .map(|(&b, &g)| mask::deactivation_prob(b, g, hyper, variant))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv2d { weight: Tensor<T>, stride: usize, padding: usize },
    BatchNorm(BatchNorm<T>),
    Relu,
    AvgPool { size: usize },
    Flatten,
    Dense { weight: Tensor<T>, bias: Tensor<T> },
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv",
            Layer::BatchNorm(bn) if bn.masked => "masked-bn",
            Layer::BatchNorm(_) => "bn",
            Layer::Relu => "relu",
            Layer::AvgPool { .. } => "pool",
            Layer::Flatten => "flatten",
            Layer::Dense { .. } => "dense",
        }
    }

    fn cast<U: Scalar>(&self) -> Layer<U> {
        let c = |v: &[T]| v.iter().map(|&x| U::lit(x.as_f64())).collect::<Vec<U>>();
        match self {
            Layer::Conv2d { weight, stride, padding } => Layer::Conv2d { weight: weight.cast(), stride: *stride, padding: *padding },
            Layer::BatchNorm(bn) => Layer::BatchNorm(BatchNorm {
                beta: bn.beta.cast(),
                gamma: bn.gamma.cast(),
                running_mean: c(&bn.running_mean),
                running_var: c(&bn.running_var),
                eps: U::lit(bn.eps.as_f64()),
                masked: bn.masked,
            }),
            Layer::Relu => Layer::Relu,
            Layer::AvgPool { size } => Layer::AvgPool { size: *size },
            Layer::Flatten => Layer::Flatten,
            Layer::Dense { weight, bias } => Layer::Dense { weight: weight.cast(), bias: bias.cast() },
        }
    }
}

/// A strictly feed-forward chain of layers over `[C, H, W]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T> {
    layers: Vec<Layer<T>>,
    input_shape: [usize; 3],
}

/// Node handles produced by [`ModelGraph::forward_train`].
#[derive(Debug, Clone)]
pub struct TrainForward {
    pub logits: NodeId,
    /// Parameter leaves in [`ModelGraph::params`] order.
    pub params: Vec<NodeId>,
    /// `(layer index, bn output node, beta leaf, gamma leaf)` per BN layer.
    pub batch_norms: Vec<(usize, NodeId, NodeId, NodeId)>,
}

impl<T: Scalar> ModelGraph<T> {
    /// Validates the chain by shape inference; every masked BN must be
    /// directly followed by a ReLU.
    pub fn new(layers: Vec<Layer<T>>, input_shape: [usize; 3]) -> Result<Self> {
        let model = ModelGraph { layers, input_shape };
        model.layer_output_shapes(&input_shape)?;
        for (i, layer) in model.layers.iter().enumerate() {
            if let Layer::BatchNorm(bn) = layer {
                if bn.masked && !matches!(model.layers.get(i + 1), Some(Layer::Relu)) {
                    return Err(Error::InvalidModel(format!("masked BN at layer {i} is not followed by a ReLU")));
                }
                if bn.gamma.len() != bn.channels() || bn.running_mean.len() != bn.channels() || bn.running_var.len() != bn.channels() {
                    return Err(Error::InvalidModel(format!("BN at layer {i} has inconsistent channel counts")));
                }
            }
        }
        Ok(model)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer<T>> {
        self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph { layers: self.layers.iter().map(Layer::cast).collect(), input_shape: self.input_shape }
    }

    /// Output shape (without the batch dimension) after every layer.
    pub fn layer_output_shapes(&self, input: &[usize; 3]) -> Result<Vec<Vec<usize>>> {
        let mut shape = input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |d: String| Error::InvalidModel(format!("layer {i} ({}): {d}", layer.kind()));
            shape = match layer {
                Layer::Conv2d { weight, stride, padding } => {
                    if shape.len() != 3 {
                        return Err(err(format!("conv needs [C,H,W], got {shape:?}")));
                    }
                    let g = ConvGeometry::new(&[1, shape[0], shape[1], shape[2]], weight.shape(), *stride, *padding)
                        .map_err(|e| err(e.to_string()))?;
                    vec![g.out_channels, g.out_h, g.out_w]
                }
                Layer::BatchNorm(bn) => {
                    if shape.first() != Some(&bn.channels()) {
                        return Err(err(format!("BN has {} channels, input {shape:?}", bn.channels())));
                    }
                    shape
                }
                Layer::Relu => shape,
                Layer::AvgPool { size } => {
                    if shape.len() != 3 || *size == 0 || *size > shape[1] || *size > shape[2] {
                        return Err(err(format!("pool {size} on {shape:?}")));
                    }
                    vec![shape[0], shape[1] / size, shape[2] / size]
                }
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Dense { weight, bias } => {
                    let [d_out, d_in] = weight.shape() else {
                        return Err(err("dense weight must be 2-d".into()));
                    };
                    if shape != [*d_in] || bias.shape() != [*d_out] {
                        return Err(err(format!("dense {:?} on input {shape:?}", weight.shape())));
                    }
                    vec![*d_out]
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn num_classes(&self) -> usize {
        self.layer_output_shapes(&self.input_shape)
            .ok()
            .and_then(|s| s.last().map(|l| l.iter().product()))
            .unwrap_or(0)
    }

    /// `(layer index, layer)` for every BN layer.
    pub fn batch_norms(&self) -> impl Iterator<Item = (usize, &BatchNorm<T>)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::BatchNorm(bn) => Some((i, bn)),
            _ => None,
        })
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = (usize, &mut BatchNorm<T>)> {
        self.layers.iter_mut().enumerate().filter_map(|(i, l)| match l {
            Layer::BatchNorm(bn) => Some((i, bn)),
            _ => None,
        })
    }

    pub fn masked_batch_norms(&self) -> impl Iterator<Item = (usize, &BatchNorm<T>)> {
        self.batch_norms().filter(|(_, bn)| bn.masked)
    }

    /// Trainable tensors in a fixed order: conv weight; BN beta, gamma;
    /// dense weight, bias.
    pub fn params(&self) -> Vec<(&Tensor<T>, ParamKind)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv2d { weight, .. } => out.push((weight, ParamKind::Weight)),
                Layer::BatchNorm(bn) => {
                    out.push((&bn.beta, ParamKind::BnAffine));
                    out.push((&bn.gamma, ParamKind::BnAffine));
                }
                Layer::Dense { weight, bias } => {
                    out.push((weight, ParamKind::Weight));
                    out.push((bias, ParamKind::Bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&mut Tensor<T>, ParamKind)> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d { weight, .. } => out.push((weight, ParamKind::Weight)),
                Layer::BatchNorm(bn) => {
                    out.push((&mut bn.beta, ParamKind::BnAffine));
                    out.push((&mut bn.gamma, ParamKind::BnAffine));
                }
                Layer::Dense { weight, bias } => {
                    out.push((weight, ParamKind::Weight));
                    out.push((bias, ParamKind::Bias));
                }
                _ => {}
            }
        }
        out
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return Err(Error::shape(
                "model",
                format!("input {shape:?} does not match model input [N, {:?}]", self.input_shape),
            ));
        }
        Ok(())
    }

    /// Records a training-mode forward pass on `graph`. One Gumbel pair per
    /// channel of every masked BN layer is drawn from `rng`, layer by layer.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        graph: &mut Graph<T>,
        input: NodeId,
        hyper: &MaskHyperParams<T>,
        variant: &MaskVariant<T>,
        rng: &mut R,
    ) -> Result<TrainForward> {
        self.check_input(graph.value(input).shape())?;
        let mut params = Vec::new();
        let mut batch_norms = Vec::new();
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Conv2d { weight, stride, padding } => {
                    let w = graph.param(weight.clone());
                    params.push(w);
                    graph.conv2d(x, w, *stride, *padding)?
                }
                Layer::BatchNorm(bn) => {
                    let beta = graph.param(bn.beta.clone());
                    let gamma = graph.param(bn.gamma.clone());
                    params.push(beta);
                    params.push(gamma);
                    let out = if bn.masked {
                        let noise = mask::sample_gumbel_pairs(bn.channels(), rng);
                        graph.batch_norm(x, beta, gamma, bn.eps, Some((hyper, variant, &noise)))?
                    } else {
                        graph.batch_norm(x, beta, gamma, bn.eps, None)?
                    };
                    batch_norms.push((i, out, beta, gamma));
                    out
                }
                Layer::Relu => graph.relu(x),
                Layer::AvgPool { size } => graph.avg_pool(x, *size)?,
                Layer::Flatten => graph.flatten(x)?,
                Layer::Dense { weight, bias } => {
                    let w = graph.param(weight.clone());
                    let b = graph.param(bias.clone());
                    params.push(w);
                    params.push(b);
                    graph.dense(x, w, b)?
                }
            };
        }
        Ok(TrainForward { logits: x, params, batch_norms })
    }

    /// Folds the batch statistics of a recorded forward pass into the
    /// running estimates (`new = 0.9 old + 0.1 batch`).
    pub fn update_running_stats(&mut self, graph: &Graph<T>, forward: &TrainForward) {
        let mom = T::lit(RUNNING_MOMENTUM);
        for &(layer, node, _, _) in &forward.batch_norms {
            let (Some(cache), Layer::BatchNorm(bn)) = (graph.bn_cache(node), &mut self.layers[layer]) else {
                continue;
            };
            for c in 0..bn.channels() {
                bn.running_mean[c] = mom * bn.running_mean[c] + (T::one() - mom) * cache.batch_mean[c];
                bn.running_var[c] = mom * bn.running_var[c] + (T::one() - mom) * cache.batch_var[c];
            }
        }
    }

    /// Hard masks of all masked BN layers, in layer order.
    pub fn hard_masks(&self, hyper: &MaskHyperParams<T>, variant: &MaskVariant<T>) -> Vec<LayerMask> {
        self.masked_batch_norms().map(|(_, bn)| bn.hard_mask(hyper, variant)).collect()
    }

    /// Evaluation-mode forward pass with hard masks.
    pub fn forward_eval(&self, input: &Tensor<T>, hyper: &MaskHyperParams<T>, variant: &MaskVariant<T>) -> Result<Tensor<T>> {
        let masks = self.hard_masks(hyper, variant);
        self.forward_eval_with_masks(input, &masks)
    }

    /// Evaluation-mode forward pass with explicit masks, one per masked BN
    /// layer in order. Unmasked BN layers ignore masks.
    pub fn forward_eval_with_masks(&self, input: &Tensor<T>, masks: &[LayerMask]) -> Result<Tensor<T>> {
        self.check_input(input.shape())?;
        let masked = self.masked_batch_norms().count();
        if masks.len() != masked {
            return Err(Error::MaskMismatch(format!("{} masks for {masked} masked BN layers", masks.len())));
        }
        let mut masks = masks.iter();
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv2d { weight, stride, padding } => kernels::conv2d(&x, weight, *stride, *padding)?,
                Layer::BatchNorm(bn) => {
                    let keep = if bn.masked { masks.next().map(|m| m.keep.as_slice()) } else { None };
                    mask::bn_forward_eval(&x, &bn.states(), keep)?
                }
                Layer::Relu => kernels::relu(&x),
                Layer::AvgPool { size } => kernels::avg_pool(&x, *size)?,
                Layer::Flatten => kernels::flatten(&x)?,
                Layer::Dense { weight, bias } => kernels::dense(&x, weight, bias)?,
            };
        }
        Ok(x)
    }
}

/// Built-in architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// `[conv3x3(16) - BN* - ReLU - avgpool2] x 3 -> flatten -> dense`.
    ConvNetS,
    /// Six 3x3 conv blocks of widths 32-32-64-64-128-128 with a pool after
    /// every second block, then flatten -> dense.
    VggMini,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::ConvNetS => "convnet-s",
            Architecture::VggMini => "vgg-mini",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "convnet-s" => Some(Architecture::ConvNetS),
            "vgg-mini" => Some(Architecture::VggMini),
            _ => None,
        }
    }

    /// Freshly initialized model: He-normal conv/dense weights, zero bias,
    /// BN `beta = 0`, `gamma = 1`, running mean 0 and variance 1.
    pub fn build<T: Scalar, R: Rng + ?Sized>(self, input_shape: [usize; 3], num_classes: usize, rng: &mut R) -> Result<ModelGraph<T>> {
        let widths: &[usize] = match self {
            Architecture::ConvNetS => &[16, 16, 16],
            Architecture::VggMini => &[32, 32, 64, 64, 128, 128],
        };
        let pool_every = match self {
            Architecture::ConvNetS => 1,
            Architecture::VggMini => 2,
        };
        let mut layers = Vec::new();
        let mut c_in = input_shape[0];
        let (mut h, mut w) = (input_shape[1], input_shape[2]);
        for (i, &c_out) in widths.iter().enumerate() {
            layers.push(Layer::Conv2d { weight: he_normal(&[c_out, c_in, 3, 3], c_in * 9, rng), stride: 1, padding: 1 });
            layers.push(Layer::BatchNorm(BatchNorm::new(c_out, true)));
            layers.push(Layer::Relu);
            if (i + 1) % pool_every == 0 {
                layers.push(Layer::AvgPool { size: 2 });
                h /= 2;
                w /= 2;
            }
            c_in = c_out;
        }
        let d_in = c_in * h * w;
        layers.push(Layer::Flatten);
        layers.push(Layer::Dense { weight: he_normal(&[num_classes, d_in], d_in, rng), bias: Tensor::zeros(&[num_classes]) });
        ModelGraph::new(layers, input_shape)
    }
}

fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn convnet_s_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m: ModelGraph<f32> = Architecture::ConvNetS.build([1, 28, 28], 10, &mut rng).unwrap();
        let shapes = m.layer_output_shapes(&[1, 28, 28]).unwrap();
        assert_eq!(shapes.last().unwrap(), &vec![10]);
        assert_eq!(shapes[shapes.len() - 2], vec![16 * 3 * 3]);
        assert_eq!(m.masked_batch_norms().count(), 3);
        let m32: ModelGraph<f32> = Architecture::ConvNetS.build([3, 32, 32], 10, &mut rng).unwrap();
        assert_eq!(m32.layer_output_shapes(&[3, 32, 32]).unwrap()[m32.layers().len() - 2], vec![16 * 4 * 4]);
    }

    #[test]
    fn vgg_mini_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m: ModelGraph<f32> = Architecture::VggMini.build([3, 32, 32], 10, &mut rng).unwrap();
        let widths: Vec<usize> = m.batch_norms().map(|(_, bn)| bn.channels()).collect();
        assert_eq!(widths, vec![32, 32, 64, 64, 128, 128]);
        assert_eq!(m.num_classes(), 10);
    }

    #[test]
    fn masked_bn_without_relu_rejected() {
        let layers = vec![
            Layer::Conv2d { weight: Tensor::<f32>::ones(&[2, 1, 3, 3]), stride: 1, padding: 1 },
            Layer::BatchNorm(BatchNorm::new(2, true)),
            Layer::AvgPool { size: 2 },
        ];
        assert!(matches!(ModelGraph::new(layers, [1, 4, 4]), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn eval_with_all_kept_equals_plain_bn_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m: ModelGraph<f32> = Architecture::ConvNetS.build([1, 12, 12], 3, &mut rng).unwrap();
        for (_, bn) in m.batch_norms_mut() {
            bn.beta = Tensor::from_fn(&[16], |i| 0.1 * i as f32);
        }
        let x = Tensor::from_fn(&[2, 1, 12, 12], |i| ((i * 7 % 13) as f32) / 13.0);
        let masks: Vec<LayerMask> = m.masked_batch_norms().map(|(_, bn)| LayerMask::all_kept(bn.channels())).collect();
        let masked = m.forward_eval_with_masks(&x, &masks).unwrap();
        let mut plain = m.clone();
        for (_, bn) in plain.batch_norms_mut() {
            bn.masked = false;
        }
        let y = plain.forward_eval_with_masks(&x, &[]).unwrap();
        assert_eq!(masked.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m: ModelGraph<f32> = Architecture::ConvNetS.build([1, 12, 12], 3, &mut rng).unwrap();
        let hyper = MaskHyperParams::default();
        assert!(m.forward_eval(&Tensor::zeros(&[1, 1, 10, 10]), &hyper, &MaskVariant::WithRelu).is_err());
    }
}
