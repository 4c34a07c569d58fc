//! Differentiable channel masks derived from batch-norm affine parameters.
//!
//! A BN output channel is modelled as `N(beta, gamma^2)`. The probability
//! that an activation falls below a small threshold `delta` (and is therefore
//! zeroed by the following ReLU) is the Gaussian CDF `Phi(delta; beta, gamma)`.
//! During training this probability is relaxed through a logistic surrogate
//! `q` and a two-way Gumbel-Softmax sample `n`, which multiplies the BN
//! output. At test time the deterministic hard mask `Phi >= c` decides which
//! channels are pruned.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower bound applied to `|gamma|` in the Gaussian density and CDF.
pub const GAMMA_FLOOR: f64 = 1e-8;

/// EMA coefficient applied to the previous running statistics.
pub const RUNNING_MOMENTUM: f64 = 0.9;

/// Clamp applied to uniform draws before the double log of the Gumbel transform.
const UNIFORM_CLAMP: f64 = 1e-12;

/// Clamp applied to `q` before taking logs in [`gumbel_keep_sample`].
const Q_CLAMP: f64 = 1e-7;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Per-channel view of a batch-norm layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnChannelState<T> {
    pub beta: T,
    pub gamma: T,
    pub running_mean: T,
    pub running_var: T,
    pub eps: T,
}

impl<T: Scalar> BnChannelState<T> {
    pub fn new(beta: T, gamma: T) -> Self {
        BnChannelState { beta, gamma, running_mean: T::zero(), running_var: T::one(), eps: T::lit(1e-5) }
    }
}

/// Thresholds and relaxation constants of the mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskHyperParams<T> {
    /// CDF threshold on the post-BN activation.
    pub delta: T,
    /// Probability cutoff above which a channel is pruned.
    pub c: T,
    /// Logistic steepness.
    pub k: T,
    /// Gumbel-Softmax temperature.
    pub tau: T,
}

impl<T: Scalar> Default for MaskHyperParams<T> {
    fn default() -> Self {
        MaskHyperParams { delta: T::lit(0.05), c: T::lit(0.8), k: T::lit(20.0), tau: T::lit(0.5) }
    }
}

impl<T: Scalar> MaskHyperParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > T::zero() && self.c < T::one()) {
            return Err(Error::InvalidArgument(format!("mask cutoff c must lie in (0,1), got {}", self.c)));
        }
        if !(self.k > T::zero()) {
            return Err(Error::InvalidArgument(format!("logistic steepness k must be positive, got {}", self.k)));
        }
        if !(self.tau > T::zero()) {
            return Err(Error::InvalidArgument(format!("temperature tau must be positive, got {}", self.tau)));
        }
        if !self.delta.is_finite() {
            return Err(Error::InvalidArgument("delta must be finite".into()));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> MaskHyperParams<U> {
        MaskHyperParams {
            delta: U::lit(self.delta.as_f64()),
            c: U::lit(self.c.as_f64()),
            k: U::lit(self.k.as_f64()),
            tau: U::lit(self.tau.as_f64()),
        }
    }
}

/// Which deactivation event the mask probability measures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskVariant<T> {
    /// `P(x_out <= delta)`: the activation is (nearly) removed by the ReLU.
    WithRelu,
    /// `P(-delta_new <= x_out <= delta_new)`: the activation is near zero,
    /// ignoring the ReLU.
    NoRelu { delta_new: T },
}

impl<T: Scalar> MaskVariant<T> {
    pub fn cast<U: Scalar>(&self) -> MaskVariant<U> {
        match *self {
            MaskVariant::WithRelu => MaskVariant::WithRelu,
            MaskVariant::NoRelu { delta_new } => MaskVariant::NoRelu { delta_new: U::lit(delta_new.as_f64()) },
        }
    }
}

/// All intermediate quantities of one channel's relaxed mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskActivation<T> {
    /// Deactivation probability.
    pub phi: T,
    /// Logistic surrogate of the hard mask (prune probability).
    pub q: T,
    /// Prune probability, `q`.
    pub pi0: T,
    /// Keep probability, `1 - q`.
    pub pi1: T,
    pub g0: T,
    pub g1: T,
    /// Relaxed keep sample in `(0, 1)`.
    pub n: T,
}

/// A pair of Gumbel(0, 1) draws for the prune/keep categories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelPair<T> {
    pub g0: T,
    pub g1: T,
}

fn abs_gamma(gamma: f64) -> f64 {
    gamma.abs().max(GAMMA_FLOOR)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Density of `N(beta, gamma^2)` at `t`.
pub fn gaussian_pdf<T: Scalar>(t: T, beta: T, gamma: T) -> T {
    T::lit(pdf64(t.as_f64(), beta.as_f64(), gamma.as_f64()))
}

fn pdf64(t: f64, beta: f64, gamma: f64) -> f64 {
    let g = abs_gamma(gamma);
    let u = (t - beta) / g;
    FRAC_1_SQRT_2PI / g * (-0.5 * u * u).exp()
}

/// CDF of `N(beta, gamma^2)` at `delta`, `0.5 * erfc(-(delta - beta) / (sqrt(2) |gamma|))`.
///
/// Uses the `erfc` of the `libm` crate (a port of the FreeBSD/musl routine,
/// accurate to about one ulp), which keeps the lower tail accurate.
pub fn gaussian_cdf<T: Scalar>(delta: T, beta: T, gamma: T) -> T {
    T::lit(cdf64(delta.as_f64(), beta.as_f64(), gamma.as_f64()))
}

fn cdf64(delta: f64, beta: f64, gamma: f64) -> f64 {
    let u = (delta - beta) / abs_gamma(gamma);
    0.5 * libm::erfc(-u * std::f64::consts::FRAC_1_SQRT_2)
}

/// `dPhi/dbeta = -f(delta; beta, gamma)`.
pub fn d_cdf_d_beta<T: Scalar>(delta: T, beta: T, gamma: T) -> T {
    -gaussian_pdf(delta, beta, gamma)
}

/// `dPhi/dgamma = -f(delta) * (delta - beta) / |gamma| * sign(gamma)`; zero at `gamma = 0`.
pub fn d_cdf_d_gamma<T: Scalar>(delta: T, beta: T, gamma: T) -> T {
    let (d, b, g) = (delta.as_f64(), beta.as_f64(), gamma.as_f64());
    T::lit(-pdf64(d, b, g) * (d - b) / abs_gamma(g) * sign(g))
}

/// `P(-delta_new <= x_out <= delta_new)` for `x_out ~ N(beta, gamma^2)`.
pub fn norelu_mask_prob<T: Scalar>(state: &BnChannelState<T>, delta_new: T) -> T {
    let (b, g, d) = (state.beta.as_f64(), state.gamma.as_f64(), delta_new.as_f64());
    T::lit(cdf64(d, b, g) - cdf64(-d, b, g))
}

/// Deactivation probability of a channel and its partials `(d/dbeta, d/dgamma)`.
pub fn deactivation_prob_with_grad<T: Scalar>(
    beta: T,
    gamma: T,
    hyper: &MaskHyperParams<T>,
    variant: &MaskVariant<T>,
) -> (T, T, T) {
    let (b, g) = (beta.as_f64(), gamma.as_f64());
    let ag = abs_gamma(g);
    let sg = sign(g);
    let (p, dp_db, dp_dg) = match *variant {
        MaskVariant::WithRelu => {
            let d = hyper.delta.as_f64();
            let f = pdf64(d, b, g);
            (cdf64(d, b, g), -f, -f * (d - b) / ag * sg)
        }
        MaskVariant::NoRelu { delta_new } => {
            let d = delta_new.as_f64();
            let (fu, fl) = (pdf64(d, b, g), pdf64(-d, b, g));
            let p = cdf64(d, b, g) - cdf64(-d, b, g);
            let dg = (-fu * (d - b) + fl * (-d - b)) / ag * sg;
            (p, fl - fu, dg)
        }
    };
    (T::lit(p), T::lit(dp_db), T::lit(dp_dg))
}

pub fn deactivation_prob<T: Scalar>(beta: T, gamma: T, hyper: &MaskHyperParams<T>, variant: &MaskVariant<T>) -> T {
    deactivation_prob_with_grad(beta, gamma, hyper, variant).0
}

/// Logistic relaxation `q = 1 / (1 + exp(-k (phi - c)))`.
pub fn soft_mask_q<T: Scalar>(phi: T, hyper: &MaskHyperParams<T>) -> T {
    T::lit(logistic(hyper.k.as_f64() * (phi.as_f64() - hyper.c.as_f64())))
}

/// `dq/dphi = k q (1 - q)`.
pub fn d_q_d_phi<T: Scalar>(q: T, hyper: &MaskHyperParams<T>) -> T {
    hyper.k * q * (T::one() - q)
}

/// `dn/dq = -n (1 - n) / (tau q (1 - q))`.
pub fn d_n_d_q<T: Scalar>(n: T, q: T, tau: T) -> T {
    -(n * (T::one() - n)) / (tau * q * (T::one() - q))
}

/// One Gumbel(0, 1) draw, `-ln(-ln u)` with `u` clamped away from 0 and 1.
pub fn sample_gumbel<R: Rng + ?Sized, T: Scalar>(rng: &mut R) -> T {
    let u: f64 = rng.random::<f64>().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    T::lit(-(-u.ln()).ln())
}

pub fn sample_gumbel_pairs<R: Rng + ?Sized, T: Scalar>(count: usize, rng: &mut R) -> Vec<GumbelPair<T>> {
    (0..count)
        .map(|_| {
            let g0 = sample_gumbel(rng);
            let g1 = sample_gumbel(rng);
            GumbelPair { g0, g1 }
        })
        .collect()
}

/// Two-way Gumbel-Softmax keep sample
/// `n = exp((ln pi1 + g1)/tau) / (exp((ln pi1 + g1)/tau) + exp((ln pi0 + g0)/tau))`,
/// evaluated as a logistic of the scaled log-odds.
pub fn keep_sample_from<T: Scalar>(q: T, tau: T, noise: GumbelPair<T>) -> MaskActivation<T> {
    let qc = q.as_f64().clamp(Q_CLAMP, 1.0 - Q_CLAMP);
    let keep_logit = (1.0 - qc).ln() - qc.ln();
    let n = logistic((keep_logit + noise.g1.as_f64() - noise.g0.as_f64()) / tau.as_f64());
    MaskActivation {
        phi: T::nan(),
        q,
        pi0: q,
        pi1: T::one() - q,
        g0: noise.g0,
        g1: noise.g1,
        n: T::lit(n),
    }
}

/// Draws a relaxed keep sample for prune probability `q`. The returned
/// activation has `phi` set to NaN since only `q` is known here.
pub fn gumbel_keep_sample<R: Rng + ?Sized, T: Scalar>(q: T, tau: T, rng: &mut R) -> MaskActivation<T> {
    let g0 = sample_gumbel(rng);
    let g1 = sample_gumbel(rng);
    keep_sample_from(q, tau, GumbelPair { g0, g1 })
}

/// Relaxed mask of one channel plus `(dn/dbeta, dn/dgamma)`.
///
/// The keep log-odds `ln(pi1/pi0)` equal `-k (phi - c)` exactly, so the
/// sample is computed from the logit directly and
/// `dn/dq * dq/dphi = -k n (1 - n) / tau` never forms `q (1 - q)`.
pub fn channel_mask<T: Scalar>(
    beta: T,
    gamma: T,
    hyper: &MaskHyperParams<T>,
    variant: &MaskVariant<T>,
    noise: GumbelPair<T>,
) -> (MaskActivation<T>, T, T) {
    let (phi, dphi_db, dphi_dg) = deactivation_prob_with_grad(beta, gamma, hyper, variant);
    let (k, c, tau) = (hyper.k.as_f64(), hyper.c.as_f64(), hyper.tau.as_f64());
    let a = k * (phi.as_f64() - c);
    let q = logistic(a);
    let n = logistic((noise.g1.as_f64() - noise.g0.as_f64() - a) / tau);
    let dn_dphi = -k * n * (1.0 - n) / tau;
    let act = MaskActivation {
        phi,
        q: T::lit(q),
        pi0: T::lit(q),
        pi1: T::lit(1.0 - q),
        g0: noise.g0,
        g1: noise.g1,
        n: T::lit(n),
    };
    (act, T::lit(dn_dphi) * dphi_db, T::lit(dn_dphi) * dphi_dg)
}

/// Hard test-time mask: `false` (prune) iff `Phi(delta; beta, gamma) >= c`.
pub fn hard_mask<T: Scalar>(state: &BnChannelState<T>, hyper: &MaskHyperParams<T>) -> bool {
    hard_mask_with(state, hyper, &MaskVariant::WithRelu)
}

pub fn hard_mask_with<T: Scalar>(state: &BnChannelState<T>, hyper: &MaskHyperParams<T>, variant: &MaskVariant<T>) -> bool {
    deactivation_prob(state.beta, state.gamma, hyper, variant) < hyper.c
}

/// Hard masks of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    pub keep: Vec<bool>,
    /// Every channel met the prune criterion and the least-deactivated one was kept.
    pub fallback: bool,
}

impl LayerMask {
    pub fn all_kept(channels: usize) -> Self {
        LayerMask { keep: vec![true; channels], fallback: false }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Hard masks for a whole layer. If every channel would be pruned, the
/// channel with the lowest deactivation probability is kept.
pub fn layer_hard_mask<T: Scalar>(betas: &[T], gammas: &[T], hyper: &MaskHyperParams<T>, variant: &MaskVariant<T>) -> LayerMask {
    let probs: Vec<T> = betas.iter().zip(gammas).map(|(&b, &g)| deactivation_prob(b, g, hyper, variant)).collect();
    let mut keep: Vec<bool> = probs.iter().map(|&p| p < hyper.c).collect();
    let mut fallback = false;
    if !keep.is_empty() && keep.iter().all(|&k| !k) {
        let best = probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p < probs[best] { i } else { best });
        keep[best] = true;
        fallback = true;
    }
    LayerMask { keep, fallback }
}

/// Training or evaluation behaviour of a batch-norm layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward cache of a training-mode (masked) BN layer.
#[derive(Debug, Clone)]
pub struct BnTrainCache<T> {
    pub dims: (usize, usize, usize),
    /// Normalized input, same layout as the input.
    pub z: Vec<T>,
    pub inv_std: Vec<T>,
    pub beta: Vec<T>,
    pub gamma: Vec<T>,
    /// Per-channel multiplier (`n`, or 1 for an unmasked layer).
    pub multiplier: Vec<T>,
    pub dn_dbeta: Vec<T>,
    pub dn_dgamma: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance, used for the running estimate.
    pub batch_var: Vec<T>,
    pub activations: Vec<MaskActivation<T>>,
}

/// `(N, C, spatial)` of a `[N, C, ...]` tensor.
fn bn_dims<T: Scalar>(x: &Tensor<T>, channels: usize) -> Result<(usize, usize, usize)> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::shape("batch_norm", format!("expected [N, C, ...], got {shape:?}")));
    }
    if shape[1] != channels {
        return Err(Error::shape("batch_norm", format!("input has {} channels, layer has {channels}", shape[1])));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Mask settings and frozen noise for a masked BN forward pass.
pub type MaskInput<'a, T> = (&'a MaskHyperParams<T>, &'a MaskVariant<T>, &'a [GumbelPair<T>]);

/// Training-mode forward with batch statistics. With `mask = Some(..)`
/// the output is `(gamma z + beta) * n` with one Gumbel pair per channel;
/// with `None` it is a plain BN.
pub fn bn_forward_train<T: Scalar>(
    x: &Tensor<T>,
    beta: &[T],
    gamma: &[T],
    eps: T,
    mask: Option<MaskInput<'_, T>>,
) -> Result<(Tensor<T>, BnTrainCache<T>)> {
    let channels = beta.len();
    if gamma.len() != channels {
        return Err(Error::shape("batch_norm", "beta and gamma lengths differ"));
    }
    let (n, c, hw) = bn_dims(x, channels)?;
    let m = n * hw;
    if m < 2 {
        return Err(Error::UndefinedVariance(m));
    }
    let mf = T::lit(m as f64);
    let data = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += data[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
        }
        let mu = s / mf;
        let mut v = T::zero();
        for b in 0..n {
            for &xv in &data[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                v += (xv - mu) * (xv - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / mf;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut multiplier = vec![T::one(); c];
    let mut dn_dbeta = vec![T::zero(); c];
    let mut dn_dgamma = vec![T::zero(); c];
    let mut activations = Vec::new();
    if let Some((hyper, variant, noise)) = mask {
        if noise.len() != c {
            return Err(Error::shape("masked_bn", format!("{} Gumbel pairs for {c} channels", noise.len())));
        }
        for ch in 0..c {
            let (act, db, dg) = channel_mask(beta[ch], gamma[ch], hyper, variant, noise[ch]);
            multiplier[ch] = act.n;
            dn_dbeta[ch] = db;
            dn_dgamma[ch] = dg;
            activations.push(act);
        }
    }

    let mut z = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let (mu, is, g, bt, mult) = (mean[ch], inv_std[ch], gamma[ch], beta[ch], multiplier[ch]);
            for i in range {
                let zi = (data[i] - mu) * is;
                z[i] = zi;
                out[i] = (g * zi + bt) * mult;
            }
        }
    }
    let unbias = mf / T::lit((m - 1) as f64);
    let cache = BnTrainCache {
        dims: (n, c, hw),
        z,
        inv_std,
        beta: beta.to_vec(),
        gamma: gamma.to_vec(),
        multiplier,
        dn_dbeta,
        dn_dgamma,
        batch_mean: mean,
        batch_var: var.iter().map(|&v| v * unbias).collect(),
        activations,
    };
    Ok((Tensor::new(x.shape().to_vec(), out)?, cache))
}

/// Gradients `(d_input, d_beta, d_gamma)` of a training-mode BN layer.
///
/// For `x_out = (gamma z + beta) n`:
/// `dL/dgamma = sum(dy z n) + sum(dy (gamma z + beta)) dn/dgamma`,
/// `dL/dbeta = sum(dy n) + sum(dy (gamma z + beta)) dn/dbeta`, and the input
/// gradient is the standard batch-statistics BN backward of `dz = dy n gamma`.
pub fn bn_backward_train<T: Scalar>(grad_out: &[T], cache: &BnTrainCache<T>, need_input_grad: bool) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (n, c, hw) = cache.dims;
    let mf = T::lit((n * hw) as f64);
    let mut dbeta = vec![T::zero(); c];
    let mut dgamma = vec![T::zero(); c];
    let mut dz_sum = vec![T::zero(); c];
    let mut dz_z_sum = vec![T::zero(); c];
    for ch in 0..c {
        let (g, bt, mult) = (cache.gamma[ch], cache.beta[ch], cache.multiplier[ch]);
        let (mut sdy, mut sdyz, mut sdy_pre) = (T::zero(), T::zero(), T::zero());
        for b in 0..n {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for i in range {
                let (dy, zi) = (grad_out[i], cache.z[i]);
                sdy += dy;
                sdyz += dy * zi;
                sdy_pre += dy * (g * zi + bt);
            }
        }
        dbeta[ch] = sdy * mult + sdy_pre * cache.dn_dbeta[ch];
        dgamma[ch] = sdyz * mult + sdy_pre * cache.dn_dgamma[ch];
        dz_sum[ch] = sdy * mult * g;
        dz_z_sum[ch] = sdyz * mult * g;
    }
    let dx = need_input_grad.then(|| {
        let mut dx = vec![T::zero(); grad_out.len()];
        for b in 0..n {
            for ch in 0..c {
                let scale = cache.multiplier[ch] * cache.gamma[ch];
                let (mean_dz, mean_dzz, is) = (dz_sum[ch] / mf, dz_z_sum[ch] / mf, cache.inv_std[ch]);
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    dx[i] = is * (grad_out[i] * scale - mean_dz - cache.z[i] * mean_dzz);
                }
            }
        }
        dx
    });
    (dx, dbeta, dgamma)
}

/// Evaluation-mode BN with running statistics. `keep`, when given, zeroes
/// the pruned channels; kept channels are multiplied by exactly one.
pub fn bn_forward_eval<T: Scalar>(
    x: &Tensor<T>,
    states: &[BnChannelState<T>],
    keep: Option<&[bool]>,
) -> Result<Tensor<T>> {
    let (n, c, hw) = bn_dims(x, states.len())?;
    if let Some(k) = keep {
        if k.len() != c {
            return Err(Error::MaskMismatch(format!("{} mask entries for {c} channels", k.len())));
        }
    }
    let data = x.data();
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        for (ch, st) in states.iter().enumerate() {
            let is = T::one() / (st.running_var + st.eps).sqrt();
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            match keep.map(|k| k[ch]) {
                None => {
                    for i in range {
                        out[i] = st.gamma * ((data[i] - st.running_mean) * is) + st.beta;
                    }
                }
                Some(flag) => {
                    let m = if flag { T::one() } else { T::zero() };
                    for i in range {
                        out[i] = (st.gamma * ((data[i] - st.running_mean) * is) + st.beta) * m;
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Masked BN over per-channel states.
///
/// Training mode normalizes with batch statistics, samples one Gumbel pair
/// per channel from `rng`, multiplies each channel by its relaxed keep
/// sample and updates the running statistics. Evaluation mode uses the
/// running statistics and the hard mask, and draws nothing from `rng`.
pub fn masked_bn_forward<R: Rng + ?Sized, T: Scalar>(
    x: &Tensor<T>,
    states: &mut [BnChannelState<T>],
    hyper: &MaskHyperParams<T>,
    variant: &MaskVariant<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<MaskActivation<T>>)> {
    match mode {
        Mode::Train => {
            let beta: Vec<T> = states.iter().map(|s| s.beta).collect();
            let gamma: Vec<T> = states.iter().map(|s| s.gamma).collect();
            let noise = sample_gumbel_pairs(states.len(), rng);
            let eps = states.first().map(|s| s.eps).unwrap_or_else(|| T::lit(1e-5));
            let (out, cache) = bn_forward_train(x, &beta, &gamma, eps, Some((hyper, variant, &noise)))?;
            let mom = T::lit(RUNNING_MOMENTUM);
            for (st, (&mu, &var)) in states.iter_mut().zip(cache.batch_mean.iter().zip(&cache.batch_var)) {
                st.running_mean = mom * st.running_mean + (T::one() - mom) * mu;
                st.running_var = mom * st.running_var + (T::one() - mom) * var;
            }
            Ok((out, cache.activations))
        }
        Mode::Eval => {
            let beta: Vec<T> = states.iter().map(|s| s.beta).collect();
            let gamma: Vec<T> = states.iter().map(|s| s.gamma).collect();
            let mask = layer_hard_mask(&beta, &gamma, hyper, variant);
            let out = bn_forward_eval(x, states, Some(&mask.keep))?;
            let acts = states
                .iter()
                .zip(&mask.keep)
                .map(|(s, &k)| {
                    let phi = deactivation_prob(s.beta, s.gamma, hyper, variant);
                    let q = soft_mask_q(phi, hyper);
                    let m = if k { T::one() } else { T::zero() };
                    MaskActivation { phi, q, pi0: q, pi1: T::one() - q, g0: T::zero(), g1: T::zero(), n: m }
                })
                .collect();
            Ok((out, acts))
        }
    }
}
