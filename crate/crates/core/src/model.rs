//! Whole-model assembly: generator (both stages) and discriminator, each
//! with its own parameter store.

use crossmlp_autograd::{Bound, ParamStore, Scalar, Var};

use crate::crossmlp::CrossMlpConfig;
use crate::discriminator::PatchDiscriminator;
use crate::error::{config_err, Result};
use crate::layers::Scope;
use crate::stage1::{Stage1, Stage1Config, Stage1Output};
use crate::stage2::{build_combination, Selection, SelectionOutput, SemanticUnet, Stage2Config};

/// Every architecture hyper-parameter. Zero in the `token_*` /
/// `channel_hidden` fields means "derive from the code size"; zero
/// `bridge_channels` means `C_f`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub semantic_classes: usize,
    pub base_channels: usize,
    pub downsamples: usize,
    pub blocks: usize,
    pub mixer_layers: usize,
    pub patch_size: usize,
    pub token_dim: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub bridge_channels: usize,
    pub candidates: usize,
    pub selection_width: usize,
    pub gs_filters: usize,
    pub disc_filters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            image_channels: 3,
            semantic_classes: 4,
            base_channels: 32,
            downsamples: 2,
            blocks: 9,
            mixer_layers: 7,
            patch_size: 4,
            token_dim: 0,
            token_hidden: 0,
            channel_hidden: 0,
            bridge_channels: 0,
            candidates: 4,
            selection_width: 16,
            gs_filters: 3,
            disc_filters: 16,
        }
    }
}

impl ModelConfig {
    pub fn code_channels(&self) -> usize {
        self.base_channels << self.downsamples.saturating_sub(1)
    }

    /// `C_b`, with 0 resolved to `C_f`.
    pub fn bridge_channels(&self) -> usize {
        if self.bridge_channels == 0 {
            self.code_channels()
        } else {
            self.bridge_channels
        }
    }

    pub fn stage1(&self) -> Stage1Config {
        let code_channels = self.code_channels();
        let code_size = self.image_size >> self.downsamples.min(usize::BITS as usize - 1);
        let mut mixer = CrossMlpConfig::new(code_channels, code_size, code_size).with_patch(self.patch_size);
        mixer.layers = self.mixer_layers;
        if self.token_dim > 0 {
            mixer.token_dim = self.token_dim;
            mixer.channel_hidden = self.token_dim.div_ceil(2);
        }
        if self.token_hidden > 0 {
            mixer.token_hidden = self.token_hidden;
        }
        if self.channel_hidden > 0 {
            mixer.channel_hidden = self.channel_hidden;
        }
        Stage1Config {
            image_size: self.image_size,
            image_channels: self.image_channels,
            semantic_channels: self.semantic_classes,
            base_channels: self.base_channels,
            downsamples: self.downsamples,
            blocks: self.blocks,
            bridge_channels: self.bridge_channels(),
            mixer,
        }
    }

    pub fn stage2(&self) -> Stage2Config {
        Stage2Config {
            image_channels: self.image_channels,
            semantic_channels: self.semantic_classes,
            bridge_channels: self.bridge_channels(),
            candidates: self.candidates,
            selection_width: self.selection_width,
            gs_filters: self.gs_filters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.semantic_classes == 0 || self.disc_filters == 0 {
            return config_err("channel counts must be positive");
        }
        if !self.image_size.is_multiple_of(4) {
            return config_err(format!("image size {} must be a multiple of 4", self.image_size));
        }
        self.stage1().validate()?;
        self.stage2().validate()
    }
}

/// Generator parameters: stage 1, the selection module and `G_s`.
#[derive(Clone, Debug)]
pub struct Generator {
    pub stage1: Stage1,
    pub selection: Selection,
    pub semantic_recover: SemanticUnet,
}

/// All generator outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput<'g, T: Scalar> {
    pub stage1: Stage1Output<'g, T>,
    pub selection: SelectionOutput<'g, T>,
    /// `I''_g`
    pub final_image: Var<'g, T>,
    /// `S''_g`
    pub refined_semantic: Var<'g, T>,
}

impl Generator {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut root = Scope::root(store, "");
        let stage1 = Stage1::new(&mut root.sub("stage1"), config.stage1())?;
        let selection = Selection::new(&mut root.sub("selection"), &config.stage2())?;
        let semantic_recover =
            SemanticUnet::new(&mut root.sub("gs"), config.image_channels, config.gs_filters, config.semantic_classes);
        Ok(Self { stage1, selection, semantic_recover })
    }

    /// `(I_a, S_g) -> (I'_g, S'_g, F_b, I''_g, S''_g, U)`.
    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Bound<'g, '_, T>,
        source: Var<'g, T>,
        semantic: Var<'g, T>,
    ) -> Result<GeneratorOutput<'g, T>> {
        let stage1 = self.stage1.forward(p, source, semantic)?;
        let combination = build_combination(source, &stage1)?;
        let selection = self.selection.forward(p, combination)?;
        let refined_semantic = self.semantic_recover.forward(p, selection.final_image)?;
        Ok(GeneratorOutput { stage1, selection, final_image: selection.final_image, refined_semantic })
    }
}

/// Generator and discriminator with separate parameter stores, so each
/// optimiser sub-step touches exactly one of them.
#[derive(Clone)]
pub struct CrossMlpGan<T: Scalar> {
    pub config: ModelConfig,
    pub generator: Generator,
    pub discriminator: PatchDiscriminator,
    pub gen_params: ParamStore<T>,
    pub disc_params: ParamStore<T>,
}

impl<T: Scalar> CrossMlpGan<T> {
    /// Builds the networks with zero weights (biases 0, gains 1); call
    /// `ParamStore::initialize` on both stores before training.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut gen_params = ParamStore::new();
        let generator = Generator::new(&mut gen_params, &config)?;
        let mut disc_params = ParamStore::new();
        let discriminator = PatchDiscriminator::new(
            &mut Scope::root(&mut disc_params, ""),
            config.image_channels,
            config.image_channels,
            config.disc_filters,
        );
        Ok(Self { config, generator, discriminator, gen_params, disc_params })
    }
}

impl<T: Scalar> std::fmt::Debug for CrossMlpGan<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CrossMlpGan")
            .field("config", &self.config)
            .field("gen_scalars", &self.gen_params.num_scalars())
            .field("disc_scalars", &self.disc_params.num_scalars())
            .finish()
    }
}
