//! Training objectives.

use crossmlp_autograd::{Scalar, Var};

use crate::error::{shape_err, ModelError, Result};

fn check_same<T: Scalar>(op: &str, maps: &[Var<'_, T>]) -> Result<()> {
    let first = maps[0].shape();
    for m in &maps[1..] {
        if m.shape() != first {
            return shape_err(format!("{op}: shapes {first:?} and {:?} differ", m.shape()));
        }
    }
    Ok(())
}

fn check_positive<T: Scalar>(op: &str, u: Var<'_, T>) -> Result<()> {
    let v = u.value();
    match v.data().iter().position(|&x| x.is_nan() || x <= T::zero()) {
        Some(i) => Err(ModelError::Domain(format!("{op}: uncertainty entry {i} is {} (must be > 0)", v.data()[i]))),
        None => Ok(()),
    }
}

/// `mean((|f1 - r| + |f2 - r|) / u + ln u + (f1 - f2)^2)`.
pub fn refined_pixel_loss<'g, T: Scalar>(
    fake1: Var<'g, T>,
    fake2: Var<'g, T>,
    real: Var<'g, T>,
    u: Var<'g, T>,
) -> Result<Var<'g, T>> {
    check_same("refined_pixel_loss", &[fake1, fake2, real, u])?;
    check_positive("refined_pixel_loss", u)?;
    let residual = (fake1 - real).abs() + (fake2 - real).abs();
    Ok((residual.div(u) + u.ln() + (fake1 - fake2).square()).mean())
}

/// `mean(|fake - real| / u + ln u)`, the single-pair uncertainty loss.
pub fn baseline_uncertainty_loss<'g, T: Scalar>(
    fake: Var<'g, T>,
    real: Var<'g, T>,
    u: Var<'g, T>,
) -> Result<Var<'g, T>> {
    check_same("baseline_uncertainty_loss", &[fake, real, u])?;
    check_positive("baseline_uncertainty_loss", u)?;
    Ok(((fake - real).abs().div(u) + u.ln()).mean())
}

/// Plain L1 distance, used for logging and the overfit check.
pub fn l1<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    check_same("l1", &[a, b])?;
    Ok((a - b).abs().mean())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdversarialSide {
    Generator,
    Discriminator,
}

/// Sigmoid cross-entropy on logits.
///
/// Discriminator: `mean(softplus(-real)) + mean(softplus(fake))`.
/// Generator (non-saturating): `mean(softplus(-fake))`; `real` is ignored.
pub fn adversarial_loss<'g, T: Scalar>(
    real: Option<Var<'g, T>>,
    fake: Var<'g, T>,
    side: AdversarialSide,
) -> Result<Var<'g, T>> {
    match side {
        AdversarialSide::Generator => Ok(fake.neg().softplus().mean()),
        AdversarialSide::Discriminator => {
            let real = real.ok_or_else(|| ModelError::Config("discriminator loss needs real logits".into()))?;
            Ok(real.neg().softplus().mean() + fake.softplus().mean())
        }
    }
}

/// Sum of absolute vertical and horizontal forward differences over each
/// `[C, H, W]` image, averaged over the batch for rank-4 input.
pub fn tv_loss<'g, T: Scalar>(image: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = image.shape();
    let (x, batch) = match s.len() {
        3 => (image.reshape(&[1, s[0], s[1], s[2]]), 1),
        4 => (image, s[0]),
        _ => return shape_err(format!("tv_loss: expected [C, H, W] or [N, C, H, W], got {s:?}")),
    };
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let mut total: Option<Var<'g, T>> = None;
    if h > 1 {
        let d = (x.narrow(2, 1, h - 1) - x.narrow(2, 0, h - 1)).abs().sum();
        total = Some(d);
    }
    if w > 1 {
        let d = (x.narrow(3, 1, w - 1) - x.narrow(3, 0, w - 1)).abs().sum();
        total = Some(match total {
            Some(t) => t + d,
            None => d,
        });
    }
    Ok(match total {
        Some(t) => t.scale(1.0 / batch as f64),
        None => x.graph().constant(crossmlp_autograd::Tensor::scalar(T::zero())),
    })
}

/// Trade-off weights of the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub image: f64,
    pub semantic: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { image: 0.5, semantic: 0.5, tv: 1.0 }
    }
}

impl LossWeights {
    /// Negative weights are accepted but reported.
    pub fn warnings(&self) -> Vec<String> {
        [("image", self.image), ("semantic", self.semantic), ("tv", self.tv)]
            .into_iter()
            .filter(|(_, w)| *w < 0.0)
            .map(|(name, w)| format!("negative loss weight {name}={w}"))
            .collect()
    }

    pub fn combine<'g, T: Scalar>(&self, parts: &LossParts<Var<'g, T>>) -> Var<'g, T> {
        parts.refined_image.scale(self.image)
            + parts.refined_semantic.scale(self.semantic)
            + parts.adversarial
            + parts.tv.scale(self.tv)
    }
}

/// The four generator-side objective terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<V> {
    pub refined_image: V,
    pub refined_semantic: V,
    pub adversarial: V,
    pub tv: V,
}

/// Scalar values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub refined_image: f64,
    pub refined_semantic: f64,
    pub adversarial: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossBundle {
    /// First non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("refined_img", self.refined_image),
            ("refined_sem", self.refined_semantic),
            ("adv", self.adversarial),
            ("tv", self.tv),
            ("g_total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

pub fn total_objective(parts: LossParts<f64>, weights: &LossWeights) -> LossBundle {
    LossBundle {
        refined_image: parts.refined_image,
        refined_semantic: parts.refined_semantic,
        adversarial: parts.adversarial,
        tv: parts.tv,
        total: weights.image * parts.refined_image
            + weights.semantic * parts.refined_semantic
            + parts.adversarial
            + weights.tv * parts.tv,
    }
}
