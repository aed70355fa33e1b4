//! Refinement stage: combination feature, a multi-candidate selection
//! module with uncertainty heads, and the shallow U-Net `G_s`.

use crossmlp_autograd::{concat, Bound, Scalar, Var};

use crate::error::{config_err, shape_err, Result};
use crate::layers::{Conv2d, ConvTranspose2d, Scope};
use crate::stage1::Stage1Output;

/// Lower bound added to every uncertainty entry.
pub const UNCERTAINTY_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage2Config {
    pub image_channels: usize,
    pub semantic_channels: usize,
    pub bridge_channels: usize,
    /// Number of intermediate candidate images.
    pub candidates: usize,
    /// Width of the shared selection trunk.
    pub selection_width: usize,
    /// Filters of the first `G_s` convolution.
    pub gs_filters: usize,
}

impl Stage2Config {
    pub fn combination_channels(&self) -> usize {
        2 * self.image_channels + self.semantic_channels + self.bridge_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return config_err("selection needs at least one candidate");
        }
        if self.selection_width == 0 || self.gs_filters == 0 {
            return config_err("stage-2 widths must be positive");
        }
        Ok(())
    }
}

/// `[I_a | I'_g | S'_g | upsample(F_b)]` along channels.
pub fn build_combination<'g, T: Scalar>(source: Var<'g, T>, stage1: &Stage1Output<'g, T>) -> Result<Var<'g, T>> {
    let s = source.shape();
    let (ci, cs, b) = (stage1.coarse_image.shape(), stage1.coarse_semantic.shape(), stage1.bridge.shape());
    if s.len() != 4
        || b.len() != 4
        || ci[2..] != s[2..]
        || cs[2..] != s[2..]
        || ci[0] != s[0]
        || cs[0] != s[0]
        || b[0] != s[0]
    {
        return shape_err(format!(
            "build_combination: source {s:?}, coarse image {ci:?}, coarse semantic {cs:?}, bridge {b:?}"
        ));
    }
    let up = if b[2..] == s[2..] { stage1.bridge } else { stage1.bridge.resize_bilinear(s[2], s[3]) };
    Ok(concat(&[source, stage1.coarse_image, stage1.coarse_semantic, up], 1))
}

/// Final image plus the uncertainty maps of the two loss groups.
#[derive(Clone, Copy, Debug)]
pub struct SelectionOutput<'g, T: Scalar> {
    /// `tanh(sum_k w_k * candidate_k)`, `[N, 3, H, W]`.
    pub final_image: Var<'g, T>,
    /// Softmax selection weights, `[N, K, H, W]`.
    pub weights: Var<'g, T>,
    /// `[N, 3 K, H, W]`, candidate `k` in channels `3k..3k+3`.
    pub candidates: Var<'g, T>,
    /// Same shape as the image, every entry `>= 1e-3`.
    pub u_image: Var<'g, T>,
    /// Same shape as the semantic map, every entry `>= 1e-3`.
    pub u_semantic: Var<'g, T>,
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub trunk: Conv2d,
    pub candidates: Conv2d,
    pub attention: Conv2d,
    pub u_image: Conv2d,
    pub u_semantic: Conv2d,
    pub n_candidates: usize,
    pub image_channels: usize,
}

impl Selection {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, config: &Stage2Config) -> Result<Self> {
        config.validate()?;
        let (w, k, ci) = (config.selection_width, config.candidates, config.image_channels);
        Ok(Self {
            trunk: Conv2d::same3(&mut scope.sub("trunk"), config.combination_channels(), w),
            candidates: Conv2d::same3(&mut scope.sub("candidates"), w, ci * k),
            attention: Conv2d::same3(&mut scope.sub("attention"), w, k),
            u_image: Conv2d::same3(&mut scope.sub("u_image"), w, ci),
            u_semantic: Conv2d::same3(&mut scope.sub("u_semantic"), w, config.semantic_channels),
            n_candidates: k,
            image_channels: ci,
        })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Bound<'g, '_, T>,
        combination: Var<'g, T>,
    ) -> Result<SelectionOutput<'g, T>> {
        let s = combination.shape();
        if s.len() != 4 || s[1] != self.trunk.in_channels {
            return shape_err(format!("selection: combination {s:?}, expected [N, {}, H, W]", self.trunk.in_channels));
        }
        let h = self.trunk.forward(p, combination).relu();
        let candidates = self.candidates.forward(p, h);
        let weights = self.attention.forward(p, h).softmax(1);
        let ci = self.image_channels;
        let mut mixed: Option<Var<'g, T>> = None;
        for k in 0..self.n_candidates {
            let wk = weights.narrow(1, k, 1);
            let wk = concat(&vec![wk; ci], 1);
            let term = wk * candidates.narrow(1, k * ci, ci);
            mixed = Some(match mixed {
                Some(acc) => acc + term,
                None => term,
            });
        }
        let final_image = mixed.expect("at least one candidate").tanh();
        let positive = |head: &Conv2d| head.forward(p, h).softplus().add_scalar(UNCERTAINTY_FLOOR);
        Ok(SelectionOutput {
            final_image,
            weights,
            candidates,
            u_image: positive(&self.u_image),
            u_semantic: positive(&self.u_semantic),
        })
    }
}

/// Two-level U-Net recovering `S''_g` from the final image.
///
/// ```text
/// e1 = lrelu(conv4s2(x))          f channels, H/2
/// e2 = lrelu(conv4s2(e1))        2f channels, H/4
/// d1 = relu(deconv(e2))           f channels, H/2
/// out = deconv(cat(d1, e1))     K_s channels, H
/// ```
#[derive(Clone, Debug)]
pub struct SemanticUnet {
    pub down1: Conv2d,
    pub down2: Conv2d,
    pub up1: ConvTranspose2d,
    pub up2: ConvTranspose2d,
}

impl SemanticUnet {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, in_channels: usize, filters: usize, out_channels: usize) -> Self {
        Self {
            down1: Conv2d::new(&mut scope.sub("down1"), in_channels, filters, 4, 2, 1),
            down2: Conv2d::new(&mut scope.sub("down2"), filters, 2 * filters, 4, 2, 1),
            up1: ConvTranspose2d::doubling(&mut scope.sub("up1"), 2 * filters, filters),
            up2: ConvTranspose2d::doubling(&mut scope.sub("up2"), 2 * filters, out_channels),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, '_, T>, image: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = image.shape();
        if s.len() != 4
            || s[1] != self.down1.in_channels
            || !s[2].is_multiple_of(4)
            || !s[3].is_multiple_of(4)
            || s[2] == 0
            || s[3] == 0
        {
            return shape_err(format!(
                "semantic_recover: expected [N, {}, H, W] with H, W multiples of 4, got {s:?}",
                self.down1.in_channels
            ));
        }
        let e1 = self.down1.forward(p, image).leaky_relu(0.2);
        let e2 = self.down2.forward(p, e1).leaky_relu(0.2);
        let d1 = self.up1.forward(p, e2).relu();
        Ok(self.up2.forward(p, concat(&[d1, e1], 1)))
    }
}
