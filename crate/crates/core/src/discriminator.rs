//! 70x70 PatchGAN shared by both generator stages.

use crossmlp_autograd::{concat, Bound, Scalar, Var};

use crate::error::{shape_err, Result};
use crate::layers::{Conv2d, Scope};

const NORM_EPS: f64 = 1e-5;

/// Five `4 x 4` convolutions: three stride-2, two stride-1. Instance norm
/// (no affine) after layers 2 to 4, LeakyReLU 0.2 after layers 1 to 4.
///
/// A 256 input yields 30x30 logits, a 64 input 6x6. Shifting the input by
/// 8 pixels shifts the logits by one.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub layers: Vec<Conv2d>,
    pub source_channels: usize,
    pub candidate_channels: usize,
}

impl PatchDiscriminator {
    /// Total stride of the stack.
    pub const STRIDE: usize = 8;

    pub fn new<T: Scalar>(
        scope: &mut Scope<'_, T>,
        source_channels: usize,
        candidate_channels: usize,
        filters: usize,
    ) -> Self {
        let widths = [source_channels + candidate_channels, filters, 2 * filters, 4 * filters, 8 * filters, 1];
        let strides = [2, 2, 2, 1, 1];
        let layers = (0..5)
            .map(|i| Conv2d::new(&mut scope.sub(format!("conv{i}")), widths[i], widths[i + 1], 4, strides[i], 1))
            .collect();
        Self { layers, source_channels, candidate_channels }
    }

    /// Logits are `[N, 1, H_p, W_p]`; there is no notion of which stage the
    /// candidate came from.
    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Bound<'g, '_, T>,
        source: Var<'g, T>,
        candidate: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let (s, c) = (source.shape(), candidate.shape());
        if s.len() != 4 || c.len() != 4 || s[0] != c[0] || s[2..] != c[2..] {
            return shape_err(format!("discriminate: source {s:?} and candidate {c:?} must share N, H, W"));
        }
        if s[1] != self.source_channels || c[1] != self.candidate_channels {
            return shape_err(format!(
                "discriminate: expected {}+{} channels, got {}+{}",
                self.source_channels, self.candidate_channels, s[1], c[1]
            ));
        }
        let mut size = (s[2], s[3]);
        for l in &self.layers {
            let step = |v: usize| crossmlp_autograd::ops::conv_out_size(v, l.kernel, l.stride, l.pad);
            size = match (step(size.0), step(size.1)) {
                (Some(h), Some(w)) => (h, w),
                _ => return shape_err(format!("discriminate: {}x{} input is too small for the stack", s[2], s[3])),
            };
        }
        let mut x = concat(&[source, candidate], 1);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(p, x);
            if i == last {
                break;
            }
            if i > 0 {
                x = x.instance_norm(NORM_EPS);
            }
            x = x.leaky_relu(0.2);
        }
        Ok(x)
    }
}
