//! Coarse generator: twin encoders, the CrossMLP cascade and three decoders.

use crossmlp_autograd::{Bound, Scalar, Var};

use crate::crossmlp::{BlockState, CrossMlpBlock, CrossMlpConfig};
use crate::error::{config_err, shape_err, Result};
use crate::layers::{Activation, Conv2d, ConvTranspose2d, Scope};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage1Config {
    pub image_size: usize,
    pub image_channels: usize,
    pub semantic_channels: usize,
    /// Channels after the first downsampling layer; doubles per layer.
    pub base_channels: usize,
    /// Number of stride-2 encoder layers `N`.
    pub downsamples: usize,
    /// Number of CrossMLP blocks `T`.
    pub blocks: usize,
    /// Bridge feature channels `C_b`.
    pub bridge_channels: usize,
    /// Block layout; must match the code size and width.
    pub mixer: CrossMlpConfig,
}

impl Stage1Config {
    pub fn code_channels(&self) -> usize {
        self.base_channels << (self.downsamples.max(1) - 1)
    }

    pub fn code_size(&self) -> usize {
        self.image_size >> self.downsamples
    }

    pub fn bridge_size(&self) -> usize {
        self.image_size >> (self.downsamples / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsamples == 0 {
            return config_err("at least one downsampling layer is required");
        }
        if !self.downsamples.is_multiple_of(2) {
            return config_err(format!(
                "N={} is odd: the bridge decoder needs N/2 whole deconvolutions",
                self.downsamples
            ));
        }
        if self.blocks == 0 {
            return config_err("the cascade needs at least one CrossMLP block");
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << self.downsamples) {
            return shape_err(format!(
                "image size {} is not divisible by 2^N = {}",
                self.image_size,
                1usize << self.downsamples
            ));
        }
        if self.base_channels == 0 || self.bridge_channels == 0 {
            return config_err("channel widths must be positive");
        }
        let m = &self.mixer;
        if (m.channels, m.height, m.width) != (self.code_channels(), self.code_size(), self.code_size()) {
            return config_err(format!(
                "block layout {}x{}x{} does not match the {}x{}x{} codes",
                m.channels,
                m.height,
                m.width,
                self.code_channels(),
                self.code_size(),
                self.code_size()
            ));
        }
        self.mixer.validate()
    }
}

/// Stride-2 convolution stack.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<Conv2d>,
}

impl Encoder {
    fn new<T: Scalar>(scope: &mut Scope<'_, T>, in_channels: usize, base: usize, depth: usize) -> Self {
        let mut c = in_channels;
        let layers = (0..depth)
            .map(|i| {
                let out = base << i;
                let conv = Conv2d::new(&mut scope.sub(format!("down{i}")), c, out, 4, 2, 1);
                c = out;
                conv
            })
            .collect();
        Self { layers }
    }

    fn forward<'g, T: Scalar>(&self, p: &Bound<'g, '_, T>, mut x: Var<'g, T>) -> Var<'g, T> {
        for conv in &self.layers {
            x = conv.forward(p, x).leaky_relu(0.2);
        }
        x
    }
}

/// Stride-2 transposed-convolution stack, ReLU between layers.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<ConvTranspose2d>,
    pub output: Activation,
}

impl Decoder {
    fn new<T: Scalar>(
        scope: &mut Scope<'_, T>,
        in_channels: usize,
        out_channels: usize,
        depth: usize,
        halve: bool,
        output: Activation,
    ) -> Self {
        let mut c = in_channels;
        let layers = (0..depth)
            .map(|i| {
                let out = if i + 1 == depth {
                    out_channels
                } else if halve {
                    (c / 2).max(1)
                } else {
                    c
                };
                let layer = ConvTranspose2d::doubling(&mut scope.sub(format!("up{i}")), c, out);
                c = out;
                layer
            })
            .collect();
        Self { layers, output }
    }

    fn forward<'g, T: Scalar>(&self, p: &Bound<'g, '_, T>, mut x: Var<'g, T>) -> Var<'g, T> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(p, x);
            x = if i == last { self.output.apply(x) } else { x.relu() };
        }
        x
    }
}

/// `I'_g`, `S'_g` and `F_b`.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Output<'g, T: Scalar> {
    /// `[N, 3, H, W]`, tanh-bounded.
    pub coarse_image: Var<'g, T>,
    /// `[N, K_s, H, W]`
    pub coarse_semantic: Var<'g, T>,
    /// `[N, C_b, H / 2^(N/2), W / 2^(N/2)]`
    pub bridge: Var<'g, T>,
}

#[derive(Clone, Debug)]
pub struct Stage1 {
    pub config: Stage1Config,
    pub image_encoder: Encoder,
    pub semantic_encoder: Encoder,
    pub blocks: Vec<CrossMlpBlock>,
    pub image_decoder: Decoder,
    pub semantic_decoder: Decoder,
    pub bridge_decoder: Decoder,
}

impl Stage1 {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, config: Stage1Config) -> Result<Self> {
        config.validate()?;
        let cf = config.code_channels();
        let n = config.downsamples;
        let blocks = (0..config.blocks)
            .map(|i| CrossMlpBlock::new(&mut scope.sub(format!("block{i}")), config.mixer.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            image_encoder: Encoder::new(
                &mut scope.sub("image_encoder"),
                config.image_channels,
                config.base_channels,
                n,
            ),
            semantic_encoder: Encoder::new(
                &mut scope.sub("semantic_encoder"),
                config.semantic_channels,
                config.base_channels,
                n,
            ),
            blocks,
            image_decoder: Decoder::new(
                &mut scope.sub("image_decoder"),
                cf,
                config.image_channels,
                n,
                true,
                Activation::Tanh,
            ),
            semantic_decoder: Decoder::new(
                &mut scope.sub("semantic_decoder"),
                cf,
                config.semantic_channels,
                n,
                true,
                Activation::Identity,
            ),
            bridge_decoder: Decoder::new(
                &mut scope.sub("bridge_decoder"),
                cf,
                config.bridge_channels,
                n / 2,
                false,
                Activation::Identity,
            ),
            config,
        })
    }

    /// Initial codes `F_0^I`, `F_0^S` at `1 / 2^N` resolution.
    pub fn encode<'g, T: Scalar>(
        &self,
        p: &Bound<'g, '_, T>,
        image: Var<'g, T>,
        semantic: Var<'g, T>,
    ) -> Result<BlockState<'g, T>> {
        let (si, ss) = (image.shape(), semantic.shape());
        let c = &self.config;
        if si.len() != 4 || ss.len() != 4 || si[0] != ss[0] || si[2..] != ss[2..] {
            return shape_err(format!("encode: image {si:?} and semantic {ss:?} must be aligned [N, C, H, W]"));
        }
        let factor = 1usize << c.downsamples;
        if si[2] % factor != 0 || si[3] % factor != 0 {
            return shape_err(format!("encode: spatial size {}x{} not divisible by 2^N = {factor}", si[2], si[3]));
        }
        if si[1] != c.image_channels || ss[1] != c.semantic_channels {
            return shape_err(format!(
                "encode: expected {} image and {} semantic channels, got {} and {}",
                c.image_channels, c.semantic_channels, si[1], ss[1]
            ));
        }
        Ok(BlockState {
            image: self.image_encoder.forward(p, image),
            semantic: self.semantic_encoder.forward(p, semantic),
        })
    }

    /// Apply the blocks in order.
    pub fn cascade<'g, T: Scalar>(&self, p: &Bound<'g, '_, T>, state: BlockState<'g, T>) -> Result<BlockState<'g, T>> {
        cascade(p, state, &self.blocks)
    }

    pub fn decode<'g, T: Scalar>(
        &self,
        p: &Bound<'g, '_, T>,
        image_code: Var<'g, T>,
        semantic_code: Var<'g, T>,
    ) -> Result<Stage1Output<'g, T>> {
        let (si, ss) = (image_code.shape(), semantic_code.shape());
        let want = [self.config.code_channels(), self.config.code_size(), self.config.code_size()];
        if si.len() != 4 || si[1..] != want || si != ss {
            return shape_err(format!("decode: codes {si:?} / {ss:?}, expected [N, {want:?}]"));
        }
        Ok(Stage1Output {
            coarse_image: self.image_decoder.forward(p, image_code),
            coarse_semantic: self.semantic_decoder.forward(p, semantic_code),
            bridge: self.bridge_decoder.forward(p, semantic_code),
        })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Bound<'g, '_, T>,
        image: Var<'g, T>,
        semantic: Var<'g, T>,
    ) -> Result<Stage1Output<'g, T>> {
        let state = self.encode(p, image, semantic)?;
        let state = self.cascade(p, state)?;
        self.decode(p, state.image, state.semantic)
    }
}

/// Sequential application of `blocks`.
pub fn cascade<'g, T: Scalar>(
    p: &Bound<'g, '_, T>,
    mut state: BlockState<'g, T>,
    blocks: &[CrossMlpBlock],
) -> Result<BlockState<'g, T>> {
    if blocks.is_empty() {
        return config_err("cascade: T = 0 blocks");
    }
    for block in blocks {
        state = block.forward(p, state)?;
    }
    Ok(state)
}
