//! Parameterised building blocks shared by every network.

use crossmlp_autograd::{Bound, ParamId, ParamKind, ParamStore, Scalar, Var};

/// Hierarchical naming helper for registering parameters.
pub struct Scope<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    prefix: String,
}

impl<'a, T: Scalar> Scope<'a, T> {
    pub fn root(store: &'a mut ParamStore<T>, prefix: &str) -> Self {
        Self { store, prefix: prefix.to_string() }
    }

    pub fn sub(&mut self, name: impl std::fmt::Display) -> Scope<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Scope { store: self.store, prefix }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let full = self.full(name);
        self.store.register(full, shape, ParamKind::Weight { fan_in, fan_out })
    }

    pub fn bias(&mut self, name: &str, len: usize) -> ParamId {
        let full = self.full(name);
        self.store.register(full, &[len], ParamKind::Bias)
    }

    pub fn gain(&mut self, name: &str, len: usize) -> ParamId {
        let full = self.full(name);
        self.store.register(full, &[len], ParamKind::Gain)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
}

impl Activation {
    pub fn apply<'g, T: Scalar>(self, x: Var<'g, T>) -> Var<'g, T> {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.relu(),
            Activation::LeakyRelu => x.leaky_relu(0.2),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// `k x k` convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        scope: &mut Scope<'_, T>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let kk = kernel * kernel;
        let weight =
            scope.weight("weight", &[out_channels, in_channels, kernel, kernel], in_channels * kk, out_channels * kk);
        let bias = scope.bias("bias", out_channels);
        Self { weight, bias, in_channels, out_channels, kernel, stride, pad }
    }

    /// `3 x 3`, stride 1, padding 1: preserves spatial size.
    pub fn same3<T: Scalar>(scope: &mut Scope<'_, T>, in_channels: usize, out_channels: usize) -> Self {
        Self::new(scope, in_channels, out_channels, 3, 1, 1)
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(p.param(self.weight), self.stride, self.pad).add_along(p.param(self.bias), 1)
    }
}

/// Transposed convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    /// Stride-2, `4 x 4`, padding 1: exactly doubles the spatial size.
    pub fn doubling<T: Scalar>(scope: &mut Scope<'_, T>, in_channels: usize, out_channels: usize) -> Self {
        let weight = scope.weight("weight", &[in_channels, out_channels, 4, 4], in_channels * 16, out_channels * 16);
        let bias = scope.bias("bias", out_channels);
        Self { weight, bias, in_channels, out_channels, kernel: 4, stride: 2, pad: 1, out_pad: 0 }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv_transpose2d(p.param(self.weight), self.stride, self.pad, self.out_pad).add_along(p.param(self.bias), 1)
    }
}

/// Gain and bias applied after standardising the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, dim: usize) -> Self {
        Self { gain: scope.gain("gain", dim), bias: scope.bias("bias", dim), eps: Self::EPS }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let last = x.shape().len() - 1;
        x.normalize_last(self.eps).mul_along(p.param(self.gain), last).add_along(p.param(self.bias), last)
    }
}
