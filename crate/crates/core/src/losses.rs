//! Sparsity regularizers on BN affine parameters, the joint objective and
//! the target-pruning-ratio controller.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::mask::MaskVariant;
use crate::scalar::Scalar;

/// Which sparsity regularizer accompanies the mask criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityVariant {
    WithRelu,
    NoRelu,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityConfig<T> {
    /// Weight of the sparsity term in the total loss.
    pub lambda: T,
    /// Confidence-interval width multiplying `|gamma|`.
    pub s: T,
    /// Half-width of the near-zero band for the no-ReLU variant.
    pub delta_new: T,
    pub variant: SparsityVariant,
    pub target_ratio: Option<T>,
}

impl<T: Scalar> Default for SparsityConfig<T> {
    fn default() -> Self {
        SparsityConfig {
            lambda: T::lit(1e-5),
            s: T::lit(3.0),
            delta_new: T::lit(0.05),
            variant: SparsityVariant::WithRelu,
            target_ratio: None,
        }
    }
}

impl<T: Scalar> SparsityConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= T::zero()) {
            return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.s >= T::zero()) {
            return Err(Error::InvalidArgument(format!("s must be non-negative, got {}", self.s)));
        }
        if !(self.delta_new > T::zero()) {
            return Err(Error::InvalidArgument(format!("delta_new must be positive, got {}", self.delta_new)));
        }
        if let Some(r) = self.target_ratio {
            if !(r > T::zero() && r < T::one()) {
                return Err(Error::InvalidArgument(format!("target ratio must lie in (0,1), got {r}")));
            }
        }
        Ok(())
    }

    /// Mask criterion matching this regularizer.
    pub fn mask_variant(&self) -> MaskVariant<T> {
        match self.variant {
            SparsityVariant::WithRelu => MaskVariant::WithRelu,
            SparsityVariant::NoRelu => MaskVariant::NoRelu { delta_new: self.delta_new },
        }
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn check_lengths<T>(betas: &[T], gammas: &[T]) -> Result<()> {
    if betas.len() != gammas.len() {
        return Err(Error::InvalidArgument(format!(
            "{} betas but {} gammas",
            betas.len(),
            gammas.len()
        )));
    }
    Ok(())
}

/// `sum_j beta_j + s |gamma_j|`.
pub fn sparsity_loss<T: Scalar>(betas: &[T], gammas: &[T], s: T) -> Result<T> {
    check_lengths(betas, gammas)?;
    Ok(betas.iter().zip(gammas).map(|(&b, &g)| b + s * g.abs()).sum())
}

/// Gradients `(d/dbeta, d/dgamma)` of [`sparsity_loss`]; `sign(0) = 0`.
pub fn sparsity_loss_grad<T: Scalar>(betas: &[T], gammas: &[T], s: T) -> Result<(Vec<T>, Vec<T>)> {
    check_lengths(betas, gammas)?;
    Ok((vec![T::one(); betas.len()], gammas.iter().map(|&g| s * sign(g)).collect()))
}

/// `sum_j |beta_j + s |gamma_j|| + |beta_j - s |gamma_j||`.
pub fn sparsity_loss_norelu<T: Scalar>(betas: &[T], gammas: &[T], s: T) -> Result<T> {
    check_lengths(betas, gammas)?;
    Ok(betas
        .iter()
        .zip(gammas)
        .map(|(&b, &g)| (b + s * g.abs()).abs() + (b - s * g.abs()).abs())
        .sum())
}

/// Subgradients of [`sparsity_loss_norelu`], zero at every kink.
pub fn sparsity_loss_norelu_grad<T: Scalar>(betas: &[T], gammas: &[T], s: T) -> Result<(Vec<T>, Vec<T>)> {
    check_lengths(betas, gammas)?;
    let mut db = Vec::with_capacity(betas.len());
    let mut dg = Vec::with_capacity(betas.len());
    for (&b, &g) in betas.iter().zip(gammas) {
        let width = s * g.abs();
        let (up, lo) = (sign(b + width), sign(b - width));
        db.push(up + lo);
        dg.push((up - lo) * s * sign(g));
    }
    Ok((db, dg))
}

/// Loss and gradients for either variant, restricted to channels where
/// `selected` is true (all channels when `None`).
pub fn sparsity_term<T: Scalar>(
    betas: &[T],
    gammas: &[T],
    s: T,
    variant: SparsityVariant,
    selected: Option<&[bool]>,
) -> Result<(T, Vec<T>, Vec<T>)> {
    check_lengths(betas, gammas)?;
    if let Some(sel) = selected {
        if sel.len() != betas.len() {
            return Err(Error::InvalidArgument(format!(
                "selection has {} entries for {} channels",
                sel.len(),
                betas.len()
            )));
        }
    }
    type LossFn<T> = fn(&[T], &[T], T) -> Result<T>;
    type GradFn<T> = fn(&[T], &[T], T) -> Result<(Vec<T>, Vec<T>)>;
    let (loss_fn, grad_fn): (LossFn<T>, GradFn<T>) = match variant {
        SparsityVariant::WithRelu => (sparsity_loss, sparsity_loss_grad),
        SparsityVariant::NoRelu => (sparsity_loss_norelu, sparsity_loss_norelu_grad),
    };
    let mut loss = T::zero();
    let (mut db, mut dg) = grad_fn(betas, gammas, s)?;
    for j in 0..betas.len() {
        if selected.is_none_or(|sel| sel[j]) {
            loss += loss_fn(&betas[j..=j], &gammas[j..=j], s)?;
        } else {
            db[j] = T::zero();
            dg[j] = T::zero();
        }
    }
    Ok((loss, db, dg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub classification: T,
    pub sparsity: T,
    pub total: T,
}

/// `total = cls + lambda * sparse`.
pub fn total_loss<T: Scalar>(cls: T, sparse: T, lambda: T) -> LossBreakdown<T> {
    LossBreakdown { classification: cls, sparsity: sparse, total: cls + lambda * sparse }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    /// Step on the gradient of the sparsity loss alone.
    SparsityOnly,
    /// Step on the full objective.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetRatioDecision {
    pub update: UpdateKind,
    /// Flat channel indices receiving sparsity pressure, ascending.
    pub selected: Vec<usize>,
}

/// Number of channels targeted for a given ratio, `ceil(ratio * total)`.
pub fn target_channel_count<T: Scalar>(ratio: T, total: usize) -> usize {
    // the small slack keeps e.g. 0.4 * 10 from rounding up to 5
    let raw = ratio.as_f64() * total as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(total)
}

/// The `ceil(target_ratio * C)` channels with the highest deactivation
/// probability, as ascending flat indices.
///
/// `channel_phis` is flattened layer-major, so ties resolve by layer index
/// and then channel index.
pub fn select_target_channels<T: Scalar>(channel_phis: &[T], target_ratio: T) -> Result<Vec<usize>> {
    if channel_phis.is_empty() {
        return Err(Error::InvalidArgument("target ratio step needs at least one channel".into()));
    }
    if !(target_ratio > T::zero() && target_ratio < T::one()) {
        return Err(Error::InvalidArgument(format!("target ratio must lie in (0,1), got {target_ratio}")));
    }
    let count = target_channel_count(target_ratio, channel_phis.len());
    let mut order: Vec<usize> = (0..channel_phis.len()).collect();
    order.sort_by(|&a, &b| {
        channel_phis[b]
            .partial_cmp(&channel_phis[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order.into_iter().take(count).collect();
    selected.sort_unstable();
    Ok(selected)
}

/// Selects the target channels and decides the update kind: sparsity-only
/// iff the sparsity loss grew since the previous step.
pub fn target_ratio_step<T: Scalar>(
    channel_phis: &[T],
    target_ratio: T,
    prev_sparsity: T,
    current_sparsity: T,
) -> Result<TargetRatioDecision> {
    let selected = select_target_channels(channel_phis, target_ratio)?;
    let update = if current_sparsity > prev_sparsity { UpdateKind::SparsityOnly } else { UpdateKind::Joint };
    Ok(TargetRatioDecision { update, selected })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparsity_loss_values() {
        let v = sparsity_loss(&[0.5, -0.2], &[1.0, 0.5], 3.0).unwrap();
        assert!((v - 4.8f64).abs() < 1e-12);
        assert_eq!(sparsity_loss(&[0.5, -0.25], &[1.0, -0.5], 0.0).unwrap(), 0.25);
        assert!(sparsity_loss(&[0.5], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn sparsity_gradient_signs() {
        let (db, dg) = sparsity_loss_grad(&[0.3f64, 0.1, 0.0], &[1.0, -2.0, 0.0], 3.0).unwrap();
        assert_eq!(db, vec![1.0, 1.0, 1.0]);
        assert_eq!(dg, vec![3.0, -3.0, 0.0]);
    }

    #[test]
    fn norelu_values() {
        assert!((sparsity_loss_norelu(&[0.2f64], &[0.5], 2.0).unwrap() - 2.0).abs() < 1e-12);
        assert!((sparsity_loss_norelu(&[0.0f64], &[-0.7], 3.0).unwrap() - 2.0 * 3.0 * 0.7).abs() < 1e-12);
        assert_eq!(sparsity_loss_norelu(&[0.0f64], &[0.0], 3.0).unwrap(), 0.0);
    }

    #[test]
    fn norelu_subgradient_is_zero_at_kink() {
        // beta = s|gamma| puts the second term at its kink
        let (db, dg) = sparsity_loss_norelu_grad(&[1.0f64], &[0.5], 2.0).unwrap();
        assert_eq!(db, vec![1.0]);
        assert_eq!(dg, vec![2.0]);
    }

    #[test]
    fn selection_zeroes_unselected_gradients() {
        let (loss, db, dg) =
            sparsity_term(&[0.5f64, -0.2, 0.1], &[1.0, 0.5, -2.0], 3.0, SparsityVariant::WithRelu, Some(&[true, false, true])).unwrap();
        assert!((loss - (0.5 + 3.0 + 0.1 + 6.0)).abs() < 1e-12);
        assert_eq!(db, vec![1.0, 0.0, 1.0]);
        assert_eq!(dg, vec![3.0, 0.0, -3.0]);
    }

    #[test]
    fn total_loss_combination() {
        assert_eq!(total_loss(2.0f64, 4.8, 0.0).total, 2.0);
        let t = total_loss(2.0f64, 4.8, 1e-5);
        assert!((t.total - 2.000048).abs() < 1e-12);
        assert_eq!(t.classification, 2.0);
        assert_eq!(t.sparsity, 4.8);
    }

    #[test]
    fn target_ratio_selects_top_phi() {
        let d = target_ratio_step(&[0.9f64, 0.2, 0.7, 0.1], 0.5, f64::INFINITY, 3.0).unwrap();
        assert_eq!(d.selected, vec![0, 2]);
        assert_eq!(d.update, UpdateKind::Joint);
        let d = target_ratio_step(&[0.9f64, 0.2, 0.7, 0.1], 0.5, 3.0, 3.5).unwrap();
        assert_eq!(d.update, UpdateKind::SparsityOnly);
        let d = target_ratio_step(&[0.9f64, 0.2, 0.7, 0.1], 0.5, 3.0, 3.0).unwrap();
        assert_eq!(d.update, UpdateKind::Joint);
    }

    #[test]
    fn target_ratio_ties_prefer_earlier_channels() {
        let d = target_ratio_step(&[0.5f64, 0.5, 0.5, 0.5, 0.5], 0.4, 0.0, 0.0).unwrap();
        assert_eq!(d.selected, vec![0, 1]);
        assert_eq!(target_channel_count(0.4f64, 48), 20);
        assert_eq!(target_channel_count(0.4f64, 10), 4);
    }

    #[test]
    fn target_ratio_errors() {
        assert!(target_ratio_step::<f64>(&[], 0.4, 0.0, 0.0).is_err());
        assert!(target_ratio_step(&[0.1f64], 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = SparsityConfig::<f64>::default();
        assert!(c.validate().is_ok());
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        let c = SparsityConfig::<f64> { target_ratio: Some(1.5), ..Default::default() };
        assert!(c.validate().is_err());
    }
}
