//! The CrossMLP block: patch tokenisation, the cross MLP-Mixer module and
//! the attention-gated image / semantic pathway updates.
//!
//! Feature maps are `[N, C_f, H, W]`; token tables are `[N, S, C]` with
//! `S = (H / P) * (W / P)` tokens in row-major patch order. Inside a
//! patch, the flattened vector is ordered `(row, col, channel)`.
//!
//! One block performs:
//!
//! 1. tokenise both codes with separate learned patch projections;
//! 2. run the mixer layers: per stream token mixing, then channel mixing
//!    whose LayerNorm input is the sum of both streams;
//! 3. map the token tables back to `[N, C_f, H, W]` and concatenate them
//!    into `Y` (`2 C_f` channels);
//! 4. `M = sigmoid(conv1x1(Y))`;
//! 5. `F_img' = F_img + M * conv3x3(F_img)`;
//! 6. `F_sem' = conv3x3(cat(F_img', Y))`, projecting `3 C_f` channels back
//!    to `C_f` so blocks stack.

use crossmlp_autograd::{concat, Bound, ParamId, Scalar, Var};

use crate::error::{config_err, shape_err, Result};
use crate::layers::{Conv2d, LayerNorm, Scope};

/// Dimensions of one CrossMLP block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossMlpConfig {
    /// Feature-map channels `C_f` of both codes.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Patch side `P`.
    pub patch: usize,
    /// Token hidden dimension `C`.
    pub token_dim: usize,
    /// Hidden width of the token-mixing MLP.
    pub token_hidden: usize,
    /// Hidden width of the channel-mixing MLP.
    pub channel_hidden: usize,
    /// Mixer layers per block.
    pub layers: usize,
}

impl CrossMlpConfig {
    /// Defaults: `P = 4`, `C = C_f`, hidden widths `ceil(S/2)` and
    /// `ceil(C/2)`, 7 mixer layers.
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        let patch = 4;
        let tokens = (height / patch).max(1) * (width / patch).max(1);
        Self {
            channels,
            height,
            width,
            patch,
            token_dim: channels,
            token_hidden: tokens.div_ceil(2),
            channel_hidden: channels.div_ceil(2),
            layers: 7,
        }
    }

    /// Override the patch size, recomputing the default token hidden width.
    pub fn with_patch(mut self, patch: usize) -> Self {
        self.patch = patch;
        if patch > 0 {
            self.token_hidden = self.tokens().div_ceil(2);
        }
        self
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return shape_err(format!(
                "patch size P={} must divide H={} and W={}",
                self.patch, self.height, self.width
            ));
        }
        if self.layers == 0 {
            return config_err("a CrossMLP module needs at least one mixer layer");
        }
        if self.channels == 0 || self.token_dim == 0 || self.token_hidden == 0 || self.channel_hidden == 0 {
            return config_err(format!("all CrossMLP widths must be positive: {self:?}"));
        }
        Ok(())
    }
}

/// Learned linear map from one flattened `P x P x C_f` patch to `C` values.
#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    /// `[C, P*P*C_f]`
    pub weight: ParamId,
    /// `[C]`
    pub bias: ParamId,
    pub patch: usize,
    pub in_channels: usize,
    pub token_dim: usize,
}

impl PatchEmbedding {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, patch: usize, in_channels: usize, token_dim: usize) -> Self {
        let len = patch * patch * in_channels;
        Self {
            weight: scope.weight("weight", &[token_dim, len], len, token_dim),
            bias: scope.bias("bias", token_dim),
            patch,
            in_channels,
            token_dim,
        }
    }
}

/// Inverse layout of [`PatchEmbedding`]: each token is projected to a
/// `P x P x C_f` patch and written back to its grid position.
#[derive(Clone, Debug)]
pub struct PatchUnembedding {
    /// `[P*P*C_f, C]`
    pub weight: ParamId,
    /// `[P*P*C_f]`
    pub bias: ParamId,
    pub patch: usize,
    pub out_channels: usize,
    pub token_dim: usize,
}

impl PatchUnembedding {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, patch: usize, out_channels: usize, token_dim: usize) -> Self {
        let len = patch * patch * out_channels;
        Self {
            weight: scope.weight("weight", &[len, token_dim], token_dim, len),
            bias: scope.bias("bias", len),
            patch,
            out_channels,
            token_dim,
        }
    }
}

/// Weights of one stream within one mixer layer.
#[derive(Clone, Debug)]
pub struct MixerLayerParams {
    /// `[D_token, S]`
    pub w1: ParamId,
    /// `[S, D_token]`
    pub w2: ParamId,
    /// `[D_chan, C]`
    pub w3: ParamId,
    /// `[C, D_chan]`
    pub w4: ParamId,
    pub token_norm: LayerNorm,
    pub channel_norm: LayerNorm,
}

impl MixerLayerParams {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, cfg: &CrossMlpConfig) -> Self {
        let (s, c, dt, dc) = (cfg.tokens(), cfg.token_dim, cfg.token_hidden, cfg.channel_hidden);
        Self {
            w1: scope.weight("w1", &[dt, s], s, dt),
            w2: scope.weight("w2", &[s, dt], dt, s),
            w3: scope.weight("w3", &[dc, c], c, dc),
            w4: scope.weight("w4", &[c, dc], dc, c),
            token_norm: LayerNorm::new(&mut scope.sub("token_norm"), c),
            channel_norm: LayerNorm::new(&mut scope.sub("channel_norm"), c),
        }
    }
}

/// Image and semantic weights of one mixer layer.
#[derive(Clone, Debug)]
pub struct MixerLayer {
    pub image: MixerLayerParams,
    pub semantic: MixerLayerParams,
}

/// Spatial layout needed to map a token table back to a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl Geometry {
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }
}

/// Image and semantic codes passed between blocks, both `[N, C_f, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct BlockState<'g, T: Scalar> {
    pub image: Var<'g, T>,
    pub semantic: Var<'g, T>,
}

/// Output of [`fuse_attention`].
#[derive(Clone, Copy, Debug)]
pub struct Fusion<'g, T: Scalar> {
    /// `cat(reshape(Y_img), reshape(Y_sem))`, `[N, 2 C_f, H, W]`.
    pub y: Var<'g, T>,
    /// `sigmoid(conv1x1(y))`, `[N, C_f, H, W]`, entries in `(0, 1)`.
    pub attention: Var<'g, T>,
}

fn expect_rank<T: Scalar>(what: &str, x: &Var<'_, T>, rank: usize) -> Result<Vec<usize>> {
    let s = x.shape();
    if s.len() != rank {
        return shape_err(format!("{what}: expected rank {rank}, got shape {s:?}"));
    }
    Ok(s)
}

/// Tokenise `[N, C_f, H, W]` into `[N, S, C]`.
pub fn patch_embed<'g, T: Scalar>(
    p: &Bound<'g, '_, T>,
    feature: Var<'g, T>,
    embed: &PatchEmbedding,
) -> Result<Var<'g, T>> {
    let s = expect_rank("patch_embed", &feature, 4)?;
    let (n, c, h, w, pp) = (s[0], s[1], s[2], s[3], embed.patch);
    if pp == 0 || h % pp != 0 || w % pp != 0 {
        return shape_err(format!("patch_embed: patch size P={pp} must divide H={h} and W={w}"));
    }
    if c != embed.in_channels {
        return shape_err(format!("patch_embed: expected {} channels, got {c}", embed.in_channels));
    }
    let (hp, wp) = (h / pp, w / pp);
    let patches =
        feature.reshape(&[n, c, hp, pp, wp, pp]).permute(&[0, 2, 4, 3, 5, 1]).reshape(&[n, hp * wp, pp * pp * c]);
    Ok(patches.matmul_t(p.param(embed.weight), false, true).add_along(p.param(embed.bias), 2))
}

/// Map `[N, S, C]` back to `[N, C_f, H, W]` under the layout of [`patch_embed`].
pub fn patch_unembed<'g, T: Scalar>(
    p: &Bound<'g, '_, T>,
    tokens: Var<'g, T>,
    unembed: &PatchUnembedding,
    geometry: Geometry,
) -> Result<Var<'g, T>> {
    let s = expect_rank("patch_unembed", &tokens, 3)?;
    let Geometry { height: h, width: w, patch: pp } = geometry;
    if pp == 0 || pp != unembed.patch || h % pp != 0 || w % pp != 0 {
        return shape_err(format!("patch_unembed: geometry {geometry:?} incompatible with patch {}", unembed.patch));
    }
    if s[1] != geometry.tokens() {
        return shape_err(format!(
            "patch_unembed: {} tokens cannot tile H={h}, W={w} with P={pp} ({} expected)",
            s[1],
            geometry.tokens()
        ));
    }
    if s[2] != unembed.token_dim {
        return shape_err(format!("patch_unembed: token width {} != {}", s[2], unembed.token_dim));
    }
    let (n, c) = (s[0], unembed.out_channels);
    let (hp, wp) = (h / pp, w / pp);
    Ok(tokens
        .matmul_t(p.param(unembed.weight), false, true)
        .add_along(p.param(unembed.bias), 2)
        .reshape(&[n, hp, wp, pp, pp, c])
        .permute(&[0, 5, 1, 3, 2, 4])
        .reshape(&[n, c, h, w]))
}

/// Token mixing: for every channel column `i`,
/// `U[:, i] = X[:, i] + W2 gelu(W1 LayerNorm(X)[:, i])`.
/// LayerNorm standardises each token over its channels.
pub fn token_mixing<'g, T: Scalar>(
    p: &Bound<'g, '_, T>,
    x: Var<'g, T>,
    params: &MixerLayerParams,
) -> Result<Var<'g, T>> {
    let s = expect_rank("token_mixing", &x, 3)?;
    let w1 = p.store().get(params.w1).shape();
    let w2 = p.store().get(params.w2).shape();
    let ln = p.store().get(params.token_norm.gain).shape()[0];
    if w1[1] != s[1] || w2[0] != s[1] || ln != s[2] {
        return shape_err(format!("token_mixing: table {s:?} vs W1 {w1:?}, W2 {w2:?}, norm width {ln}"));
    }
    let z = params.token_norm.forward(p, x);
    let mixed = p.param(params.w2).matmul(p.param(params.w1).matmul(z).gelu());
    Ok(x + mixed)
}

/// Cross channel mixing: for every token row `j`,
/// `Y_img[j] = U_img[j] + W4 gelu(W3 LayerNorm(U_img + U_sem)[j])` and the
/// same with the stream roles swapped, each stream using its own weights.
pub fn cross_channel_mixing<'g, T: Scalar>(
    p: &Bound<'g, '_, T>,
    u_img: Var<'g, T>,
    u_sem: Var<'g, T>,
    params_img: &MixerLayerParams,
    params_sem: &MixerLayerParams,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let si = expect_rank("cross_channel_mixing", &u_img, 3)?;
    let ss = expect_rank("cross_channel_mixing", &u_sem, 3)?;
    if si != ss {
        return shape_err(format!("cross_channel_mixing: stream shapes differ: {si:?} vs {ss:?}"));
    }
    for params in [params_img, params_sem] {
        let w3 = p.store().get(params.w3).shape();
        let w4 = p.store().get(params.w4).shape();
        if w3[1] != si[2] || w4[0] != si[2] {
            return shape_err(format!("cross_channel_mixing: table {si:?} vs W3 {w3:?}, W4 {w4:?}"));
        }
    }
    let branch = |residual: Var<'g, T>, sum: Var<'g, T>, params: &MixerLayerParams| {
        let z = params.channel_norm.forward(p, sum);
        let h = z.matmul_t(p.param(params.w3), false, true).gelu();
        residual + h.matmul_t(p.param(params.w4), false, true)
    };
    let y_img = branch(u_img, u_img + u_sem, params_img);
    let y_sem = branch(u_sem, u_sem + u_img, params_sem);
    Ok((y_img, y_sem))
}

/// The stacked mixer: per layer, token mixing on each stream, then cross
/// channel mixing.
pub fn crossmlp_module<'g, T: Scalar>(
    p: &Bound<'g, '_, T>,
    x_img: Var<'g, T>,
    x_sem: Var<'g, T>,
    layers: &[MixerLayer],
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    if layers.is_empty() {
        return config_err("crossmlp_module: empty layer list");
    }
    let (mut img, mut sem) = (x_img, x_sem);
    for layer in layers {
        let u_img = token_mixing(p, img, &layer.image)?;
        let u_sem = token_mixing(p, sem, &layer.semantic)?;
        (img, sem) = cross_channel_mixing(p, u_img, u_sem, &layer.image, &layer.semantic)?;
    }
    Ok((img, sem))
}

/// `Y = cat(unembed(Y_img), unembed(Y_sem))`, `M = sigmoid(conv1x1(Y))`.
pub fn fuse_attention<'g, T: Scalar>(
    p: &Bound<'g, '_, T>,
    y_img: Var<'g, T>,
    y_sem: Var<'g, T>,
    geometry: Geometry,
    unembed_img: &PatchUnembedding,
    unembed_sem: &PatchUnembedding,
    conv: &Conv2d,
) -> Result<Fusion<'g, T>> {
    let a = patch_unembed(p, y_img, unembed_img, geometry)?;
    let b = patch_unembed(p, y_sem, unembed_sem, geometry)?;
    let y = concat(&[a, b], 1);
    if conv.in_channels != y.shape()[1] || conv.kernel != 1 {
        return shape_err(format!(
            "fuse_attention: 1x1 conv over {} channels expected, got {}x{} conv over {}",
            y.shape()[1],
            conv.kernel,
            conv.kernel,
            conv.in_channels
        ));
    }
    let attention = conv.forward(p, y).sigmoid();
    Ok(Fusion { y, attention })
}

/// `F_img + M * conv3x3(F_img)`.
pub fn update_image_code<'g, T: Scalar>(
    p: &Bound<'g, '_, T>,
    image: Var<'g, T>,
    attention: Var<'g, T>,
    conv: &Conv2d,
) -> Result<Var<'g, T>> {
    let si = expect_rank("update_image_code", &image, 4)?;
    let sm = expect_rank("update_image_code", &attention, 4)?;
    if si != sm || conv.in_channels != si[1] || conv.out_channels != si[1] {
        return shape_err(format!(
            "update_image_code: image {si:?}, attention {sm:?}, conv {}->{}",
            conv.in_channels, conv.out_channels
        ));
    }
    Ok(image + attention * conv.forward(p, image))
}

/// `conv3x3(cat(F_img', Y))` back to `C_f` channels.
pub fn update_semantic_code<'g, T: Scalar>(
    p: &Bound<'g, '_, T>,
    image: Var<'g, T>,
    y: Var<'g, T>,
    projection: &Conv2d,
) -> Result<Var<'g, T>> {
    let si = expect_rank("update_semantic_code", &image, 4)?;
    let sy = expect_rank("update_semantic_code", &y, 4)?;
    if si[0] != sy[0] || si[2..] != sy[2..] || sy[1] != 2 * si[1] {
        return shape_err(format!("update_semantic_code: image {si:?} with Y {sy:?} (Y needs 2x channels)"));
    }
    if projection.in_channels != 3 * si[1] || projection.out_channels != si[1] {
        return shape_err(format!(
            "update_semantic_code: projection {}->{} for {} channels",
            projection.in_channels, projection.out_channels, si[1]
        ));
    }
    Ok(projection.forward(p, concat(&[image, y], 1)))
}

/// All parameters of one block.
#[derive(Clone, Debug)]
pub struct CrossMlpBlock {
    pub config: CrossMlpConfig,
    pub embed_image: PatchEmbedding,
    pub embed_semantic: PatchEmbedding,
    pub layers: Vec<MixerLayer>,
    pub unembed_image: PatchUnembedding,
    pub unembed_semantic: PatchUnembedding,
    /// 1x1, `2 C_f -> C_f`.
    pub attention: Conv2d,
    /// 3x3, `C_f -> C_f`.
    pub image_conv: Conv2d,
    /// 3x3, `3 C_f -> C_f`.
    pub semantic_projection: Conv2d,
}

impl CrossMlpBlock {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, config: CrossMlpConfig) -> Result<Self> {
        config.validate()?;
        let (c, pp, d) = (config.channels, config.patch, config.token_dim);
        let layers = (0..config.layers)
            .map(|i| {
                let mut l = scope.sub(format!("mixer{i}"));
                MixerLayer {
                    image: MixerLayerParams::new(&mut l.sub("image"), &config),
                    semantic: MixerLayerParams::new(&mut l.sub("semantic"), &config),
                }
            })
            .collect();
        Ok(Self {
            embed_image: PatchEmbedding::new(&mut scope.sub("embed_image"), pp, c, d),
            embed_semantic: PatchEmbedding::new(&mut scope.sub("embed_semantic"), pp, c, d),
            layers,
            unembed_image: PatchUnembedding::new(&mut scope.sub("unembed_image"), pp, c, d),
            unembed_semantic: PatchUnembedding::new(&mut scope.sub("unembed_semantic"), pp, c, d),
            attention: Conv2d::new(&mut scope.sub("attention"), 2 * c, c, 1, 1, 0),
            image_conv: Conv2d::same3(&mut scope.sub("image_conv"), c, c),
            semantic_projection: Conv2d::same3(&mut scope.sub("semantic_projection"), 3 * c, c),
            config,
        })
    }

    pub fn geometry(&self) -> Geometry {
        Geometry { height: self.config.height, width: self.config.width, patch: self.config.patch }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, '_, T>, state: BlockState<'g, T>) -> Result<BlockState<'g, T>> {
        let si = expect_rank("block_forward", &state.image, 4)?;
        let ss = expect_rank("block_forward", &state.semantic, 4)?;
        let want = [self.config.channels, self.config.height, self.config.width];
        if si != ss || si[1..] != want {
            return shape_err(format!("block_forward: codes {si:?} / {ss:?}, block expects [N, {want:?}]"));
        }
        let x_img = patch_embed(p, state.image, &self.embed_image)?;
        let x_sem = patch_embed(p, state.semantic, &self.embed_semantic)?;
        let (y_img, y_sem) = crossmlp_module(p, x_img, x_sem, &self.layers)?;
        let fusion = fuse_attention(
            p,
            y_img,
            y_sem,
            self.geometry(),
            &self.unembed_image,
            &self.unembed_semantic,
            &self.attention,
        )?;
        let image = update_image_code(p, state.image, fusion.attention, &self.image_conv)?;
        let semantic = update_semantic_code(p, image, fusion.y, &self.semantic_projection)?;
        Ok(BlockState { image, semantic })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ModelError;
    use crate::testing::{max_abs_diff, naive_conv, randn, randomize, rng};
    use crossmlp_autograd::ops::gelu;
    use crossmlp_autograd::{GradCheck, Graph, ParamStore, Tensor};
    use proptest::prelude::*;

    type Rows = Vec<Vec<f64>>;

    fn rows(t: &Tensor<f64>) -> Rows {
        let c = *t.shape().last().unwrap();
        t.data().chunks(c).map(<[f64]>::to_vec).collect()
    }

    fn mat(store: &ParamStore<f64>, id: ParamId) -> Rows {
        rows(store.get(id))
    }

    fn vecp(store: &ParamStore<f64>, id: ParamId) -> Vec<f64> {
        store.get(id).data().to_vec()
    }

    fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
        x.iter().zip(g).zip(b).map(|((a, g), b)| (a - m) / (v + 1e-5).sqrt() * g + b).collect()
    }

    /// Reference token mixing on an `S x C` table.
    fn naive_token(x: &Rows, s: &ParamStore<f64>, p: &MixerLayerParams) -> Rows {
        let (w1, w2) = (mat(s, p.w1), mat(s, p.w2));
        let (g, b) = (vecp(s, p.token_norm.gain), vecp(s, p.token_norm.bias));
        let z: Rows = x.iter().map(|r| layer_norm(r, &g, &b)).collect();
        let (ns, nc) = (x.len(), x[0].len());
        let mut out = x.clone();
        for i in 0..nc {
            let h: Vec<f64> = w1.iter().map(|w| gelu((0..ns).map(|j| w[j] * z[j][i]).sum::<f64>())).collect();
            for j in 0..ns {
                out[j][i] += w2[j].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }

    fn naive_channel_branch(res: &Rows, other: &Rows, s: &ParamStore<f64>, p: &MixerLayerParams) -> Rows {
        let (w3, w4) = (mat(s, p.w3), mat(s, p.w4));
        let (g, b) = (vecp(s, p.channel_norm.gain), vecp(s, p.channel_norm.bias));
        res.iter()
            .zip(other)
            .map(|(r, o)| {
                let sum: Vec<f64> = r.iter().zip(o).map(|(a, b)| a + b).collect();
                let z = layer_norm(&sum, &g, &b);
                let h: Vec<f64> = w3.iter().map(|w| gelu(w.iter().zip(&z).map(|(a, b)| a * b).sum())).collect();
                r.iter().zip(&w4).map(|(v, w)| v + w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>()).collect()
            })
            .collect()
    }

    fn naive_module(xi: &Rows, xs: &Rows, s: &ParamStore<f64>, layers: &[MixerLayer]) -> (Rows, Rows) {
        let (mut a, mut b) = (xi.clone(), xs.clone());
        for l in layers {
            let ua = naive_token(&a, s, &l.image);
            let ub = naive_token(&b, s, &l.semantic);
            a = naive_channel_branch(&ua, &ub, s, &l.image);
            b = naive_channel_branch(&ub, &ua, s, &l.semantic);
        }
        (a, b)
    }

    fn cfg(c: usize, hw: usize, patch: usize, layers: usize) -> CrossMlpConfig {
        let mut c = CrossMlpConfig::new(c, hw, hw).with_patch(patch);
        c.layers = layers;
        c
    }

    fn block(config: CrossMlpConfig) -> (ParamStore<f64>, CrossMlpBlock) {
        let mut store = ParamStore::new();
        let b = CrossMlpBlock::new(&mut Scope::root(&mut store, "b"), config).unwrap();
        (store, b)
    }

    fn table(t: &Rows) -> Tensor<f64> {
        Tensor::from_vec(&[1, t.len(), t[0].len()], t.concat()).unwrap()
    }

    #[test]
    fn patch_embed_token_counts() {
        for (hw, patch, tokens) in [(4, 4, 1), (64, 4, 256), (16, 2, 64)] {
            let (mut store, b) = block(cfg(2, hw, patch, 1));
            randomize(&mut store, 0.3, &mut rng(1));
            let g = Graph::new();
            let p = Bound::frozen(&g, &store);
            let x = g.constant(randn(&[2, 2, hw, hw], 1.0, &mut rng(2)));
            assert_eq!(patch_embed(&p, x, &b.embed_image).unwrap().shape(), vec![2, tokens, 2]);
        }
    }

    #[test]
    fn patch_embed_zero_feature_zero_bias() {
        let (mut store, b) = block(cfg(3, 8, 4, 1));
        randomize(&mut store, 0.5, &mut rng(3));
        store.set(b.embed_image.bias, Tensor::zeros(&[3])).unwrap();
        let g = Graph::new();
        let p = Bound::frozen(&g, &store);
        let y = patch_embed(&p, g.constant(Tensor::zeros(&[1, 3, 8, 8])), &b.embed_image).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::zeros(&[1, 3, 6, 8]));
        assert!(matches!(patch_embed(&p, bad, &b.embed_image), Err(ModelError::Shape(_))));
    }

    #[test]
    fn patch_embed_layout() {
        // One 2x2 patch with two channels; a selector weight picks entry
        // (row 1, col 0, channel 1) of the flattened patch.
        let (mut store, b) = block(cfg(2, 2, 2, 1));
        let mut w = Tensor::zeros(&[2, 8]);
        w.set(&[0, 2 * 2 + 1], 1.0);
        w.set(&[1, 0], 1.0);
        store.set(b.embed_image.weight, w).unwrap();
        let g = Graph::new();
        let p = Bound::frozen(&g, &store);
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let y = patch_embed(&p, g.constant(x.clone()), &b.embed_image).unwrap();
        assert_eq!(y.value().data(), &[x.at(&[0, 1, 1, 0]), x.at(&[0, 0, 0, 0])]);
    }

    #[test]
    fn unembed_of_zero_tokens_tiles_the_bias() {
        let (mut store, b) = block(cfg(2, 8, 4, 1));
        let c = b.config.clone();
        randomize(&mut store, 0.3, &mut rng(4));
        let g = Graph::new();
        let p = Bound::frozen(&g, &store);
        let tokens = g.constant(Tensor::zeros(&[1, c.tokens(), c.token_dim]));
        let out = patch_unembed(&p, tokens, &b.unembed_image, b.geometry()).unwrap();
        assert_eq!(out.shape(), vec![1, 2, 8, 8]);
        let bias = store.get(b.unembed_image.bias);
        // Each patch position (r, c, ch) reproduces bias entry (r*P + c)*C_f + ch.
        for (ch, r, col) in [(0, 0, 0), (1, 3, 2), (0, 5, 7)] {
            let expect = bias.data()[((r % 4) * 4 + col % 4) * 2 + ch];
            assert_eq!(out.value().at(&[0, ch, r, col]), expect);
        }
        let bad = Geometry { height: 8, width: 12, patch: 4 };
        assert!(patch_unembed(&p, tokens, &b.unembed_image, bad).is_err());
    }

    #[test]
    fn token_mixing_hand_oracle_single_channel() {
        // S=2, C=1: LayerNorm of one channel is 0, so the normalised table
        // is the LN bias everywhere.
        let (mut store, b) = block(cfg(1, 8, 4, 1));
        let params = &b.layers[0].image;
        let dt = b.config.token_hidden;
        assert_eq!((b.config.tokens(), dt), (4, 2));
        let beta = 0.7;
        store.set(params.token_norm.bias, Tensor::full(&[1], beta)).unwrap();
        let w1 = Tensor::from_f64(&[2, 4], &[0.5, -1.0, 0.25, 2.0, 1.5, 0.0, -0.5, 1.0]).unwrap();
        let w2 = Tensor::from_f64(&[4, 2], &[1.0, 0.5, -2.0, 0.0, 0.3, -0.7, 0.0, 1.0]).unwrap();
        store.set(params.w1, w1).unwrap();
        store.set(params.w2, w2).unwrap();
        let x = [0.2, -1.3, 4.0, 0.0];
        let g = Graph::new();
        let p = Bound::frozen(&g, &store);
        let y = token_mixing(&p, g.constant(Tensor::from_f64(&[1, 4, 1], &x).unwrap()), params).unwrap();
        // h_d = gelu(beta * sum_j W1[d][j]).
        let h0 = gelu(beta * (0.5 - 1.0 + 0.25 + 2.0));
        let h1 = gelu(beta * (1.5 + 0.0 - 0.5 + 1.0));
        let expect = [0.2 + 1.0 * h0 + 0.5 * h1, -1.3 - 2.0 * h0, 4.0 + 0.3 * h0 - 0.7 * h1, 0.0 + h1];
        for (a, e) in y.value().data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-14, "{a} vs {e}");
        }
    }

    #[test]
    fn token_mixing_matches_reference() {
        let (mut store, b) = block(cfg(3, 8, 2, 1));
        randomize(&mut store, 0.4, &mut rng(5));
        let x = randn::<f64>(&[1, 16, 3], 1.0, &mut rng(6));
        let g = Graph::new();
        let p = Bound::frozen(&g, &store);
        let y = token_mixing(&p, g.constant(x.clone()), &b.layers[0].semantic).unwrap();
        let expect = table(&naive_token(&rows(&x), &store, &b.layers[0].semantic));
        assert!(max_abs_diff(&y.value(), &expect) < 1e-12);
    }

    #[test]
    fn cross_channel_mixing_hand_oracle() {
        // S=1, C=2: u_img=[1,3], u_sem=0, so LN(sum) = [-1, 1]/sqrt(1 + eps).
        let (mut store, b) = block(cfg(2, 4, 4, 1));
        assert_eq!((b.config.tokens(), b.config.channel_hidden), (1, 1));
        let l = &b.layers[0];
        store.set(l.image.w3, Tensor::from_f64(&[1, 2], &[0.5, 2.0]).unwrap()).unwrap();
        store.set(l.image.w4, Tensor::from_f64(&[2, 1], &[1.0, -3.0]).unwrap()).unwrap();
        store.set(l.semantic.w3, Tensor::from_f64(&[1, 2], &[-1.0, 1.0]).unwrap()).unwrap();
        store.set(l.semantic.w4, Tensor::from_f64(&[2, 1], &[0.25, 0.5]).unwrap()).unwrap();
        let g = Graph::new();
        let p = Bound::frozen(&g, &store);
        let ui = g.constant(Tensor::from_f64(&[1, 1, 2], &[1.0, 3.0]).unwrap());
        let us = g.constant(Tensor::zeros(&[1, 1, 2]));
        let (yi, ys) = cross_channel_mixing(&p, ui, us, &l.image, &l.semantic).unwrap();
        let z = 1.0 / (1.0f64 + 1e-5).sqrt();
        let hi = gelu(-0.5 * z + 2.0 * z);
        let hs = gelu(z + z);
        let ei = [1.0 + hi, 3.0 - 3.0 * hi];
        let es = [0.25 * hs, 0.5 * hs];
        for (a, e) in yi.value().data().iter().zip(ei).chain(ys.value().data().iter().zip(es)) {
            assert!((a - e).abs() < 1e-14, "{a} vs {e}");
        }
    }

    #[test]
    fn cross_channel_mixing_shared_params_equal_streams() {
        let (mut store, b) = block(cfg(4, 8, 4, 1));
        randomize(&mut store, 0.5, &mut rng(7));
        let l = &b.layers[0];
        let g = Graph::new();
        let p = Bound::frozen(&g, &store);
        let u = g.constant(randn(&[2, 4, 4], 1.0, &mut rng(8)));
        let (yi, ys) = cross_channel_mixing(&p, u, u, &l.image, &l.image).unwrap();
        assert_eq!(yi.value().data(), ys.value().data());
    }

    #[test]
    fn crossmlp_module_two_layer_oracle() {
        let (mut store, b) = block(cfg(3, 8, 2, 2));
        randomize(&mut store, 0.4, &mut rng(9));
        let xi = randn::<f64>(&[1, 16, 3], 1.0, &mut rng(10));
        let xs = randn::<f64>(&[1, 16, 3], 1.0, &mut rng(11));
        let g = Graph::new();
        let p = Bound::frozen(&g, &store);
        let (yi, ys) = crossmlp_module(&p, g.constant(xi.clone()), g.constant(xs.clone()), &b.layers).unwrap();
        let (ei, es) = naive_module(&rows(&xi), &rows(&xs), &store, &b.layers);
        assert!(max_abs_diff(&yi.value(), &table(&ei)) < 1e-12);
        assert!(max_abs_diff(&ys.value(), &table(&es)) < 1e-12);
        let e = crossmlp_module(&p, g.constant(xi.clone()), g.constant(xs), &[]);
        assert!(matches!(e, Err(ModelError::Config(_))));
    }

    #[test]
    fn crossmlp_module_zero_weights_is_identity() {
        let (store, b) = block(cfg(3, 8, 2, 3));
        let xi = randn::<f64>(&[2, 16, 3], 1.0, &mut rng(12));
        let xs = randn::<f64>(&[2, 16, 3], 1.0, &mut rng(13));
        let g = Graph::new();
        let p = Bound::frozen(&g, &store);
        let (yi, ys) = crossmlp_module(&p, g.constant(xi.clone()), g.constant(xs.clone()), &b.layers).unwrap();
        assert_eq!(yi.value().data(), xi.data());
        assert_eq!(ys.value().data(), xs.data());
    }

    fn fusion_with(store: &ParamStore<f64>, b: &CrossMlpBlock, seed: u64) -> Result<Fusion<'static, f64>> {
        let g: &'static Graph<f64> = Box::leak(Box::new(Graph::new()));
        let p = Bound::frozen(g, Box::leak(Box::new(store.clone())));
        let c = &b.config;
        let yi = g.constant(randn(&[1, c.tokens(), c.token_dim], 1.0, &mut rng(seed)));
        let ys = g.constant(randn(&[1, c.tokens(), c.token_dim], 1.0, &mut rng(seed + 1)));
        fuse_attention(&p, yi, ys, b.geometry(), &b.unembed_image, &b.unembed_semantic, &b.attention)
    }

    #[test]
    fn fuse_attention_reference_cases() {
        let (mut store, b) = block(cfg(2, 8, 4, 1));
        randomize(&mut store, 0.4, &mut rng(14));
        store.set(b.attention.weight, Tensor::zeros(&[2, 4, 1, 1])).unwrap();
        store.set(b.attention.bias, Tensor::zeros(&[2])).unwrap();
        let f = fusion_with(&store, &b, 15).unwrap();
        assert!(f.attention.value().data().iter().all(|&m| m == 0.5));
        assert_eq!(f.y.shape(), vec![1, 4, 8, 8]);
        store.set(b.attention.bias, Tensor::full(&[2], 20.0)).unwrap();
        let f = fusion_with(&store, &b, 15).unwrap();
        assert!(f.attention.value().data().iter().all(|&m| m < 1.0 && m > 1.0 - 1e-8));
        let wrong = Geometry { height: 8, width: 12, patch: 4 };
        let g = Graph::new();
        let p = Bound::frozen(&g, &store);
        let y = g.constant(Tensor::zeros(&[1, 4, 2]));
        let r = fuse_attention(&p, y, y, wrong, &b.unembed_image, &b.unembed_semantic, &b.attention);
        assert!(matches!(r, Err(ModelError::Shape(_))));
    }

    #[test]
    fn update_image_code_cases() {
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut Scope::root(&mut store, "c"), 1, 1, 1, 1, 0);
        let g = Graph::new();
        let f = Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = Tensor::from_f64(&[1, 1, 2, 2], &[0.5, 0.25, 1.0, 0.0]).unwrap();
        {
            let p = Bound::frozen(&g, &store);
            let out = update_image_code(&p, g.constant(f.clone()), g.constant(m.clone()), &conv).unwrap();
            assert_eq!(out.value().data(), f.data());
        }
        store.set(conv.weight, Tensor::full(&[1, 1, 1, 1], 2.0)).unwrap();
        store.set(conv.bias, Tensor::full(&[1], 0.5)).unwrap();
        let p = Bound::frozen(&g, &store);
        let zero_m =
            update_image_code(&p, g.constant(f.clone()), g.constant(Tensor::zeros(&[1, 1, 2, 2])), &conv).unwrap();
        assert_eq!(zero_m.value().data(), f.data());
        let out = update_image_code(&p, g.constant(f.clone()), g.constant(m), &conv).unwrap();
        // F + M * (2F + 0.5)
        assert_eq!(out.value().data(), &[1.0 + 0.5 * 2.5, 2.0 + 0.25 * 4.5, 3.0 + 6.5, 4.0]);
    }

    #[test]
    fn update_semantic_code_cases() {
        let mut store = ParamStore::<f64>::new();
        let proj = Conv2d::same3(&mut Scope::root(&mut store, "s"), 6, 2);
        let g = Graph::new();
        let img = randn::<f64>(&[1, 2, 3, 3], 1.0, &mut rng(16));
        let y = randn::<f64>(&[1, 4, 3, 3], 1.0, &mut rng(17));
        {
            let p = Bound::frozen(&g, &store);
            let out = update_semantic_code(&p, g.constant(img.clone()), g.constant(y.clone()), &proj).unwrap();
            assert!(out.value().data().iter().all(|&v| v == 0.0));
        }
        let mut sel = Tensor::zeros(&[2, 6, 3, 3]);
        sel.set(&[0, 0, 1, 1], 1.0);
        sel.set(&[1, 1, 1, 1], 1.0);
        store.set(proj.weight, sel).unwrap();
        {
            let p = Bound::frozen(&g, &store);
            let out = update_semantic_code(&p, g.constant(img.clone()), g.constant(y.clone()), &proj).unwrap();
            assert_eq!(out.value().data(), img.data());
            let bad = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
            assert!(update_semantic_code(&p, g.constant(img.clone()), bad, &proj).is_err());
        }
        // 2x2, C_f = 1 against a direct-loop convolution.
        let mut store = ParamStore::<f64>::new();
        let proj = Conv2d::same3(&mut Scope::root(&mut store, "s"), 3, 1);
        randomize(&mut store, 0.7, &mut rng(18));
        let img = Tensor::from_f64(&[1, 1, 2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let y = Tensor::from_f64(&[1, 2, 2, 2], &[0.1, 0.2, 0.3, 0.4, -1.0, 0.0, 1.0, 2.0]).unwrap();
        let p = Bound::frozen(&g, &store);
        let out = update_semantic_code(&p, g.constant(img.clone()), g.constant(y.clone()), &proj).unwrap();
        let cat = Tensor::concat(&[&img, &y], 1).unwrap();
        let expect = naive_conv(&cat, store.get(proj.weight), store.get(proj.bias).data(), 1, 1);
        assert!(max_abs_diff(&out.value(), &expect) < 1e-14);
    }

    fn selector_projection(store: &mut ParamStore<f64>, b: &CrossMlpBlock) {
        let c = b.config.channels;
        let mut sel = Tensor::zeros(&[c, 3 * c, 3, 3]);
        for o in 0..c {
            sel.set(&[o, o, 1, 1], 1.0);
        }
        store.set(b.semantic_projection.weight, sel).unwrap();
    }

    #[test]
    fn block_zero_weights_with_selector() {
        let (mut store, b) = block(cfg(4, 8, 4, 2));
        selector_projection(&mut store, &b);
        let g = Graph::new();
        let p = Bound::frozen(&g, &store);
        let img = randn::<f64>(&[2, 4, 8, 8], 1.0, &mut rng(19));
        let sem = randn::<f64>(&[2, 4, 8, 8], 1.0, &mut rng(20));
        let out = b.forward(&p, BlockState { image: g.constant(img.clone()), semantic: g.constant(sem) }).unwrap();
        assert_eq!(out.image.value().data(), img.data());
        assert_eq!(out.semantic.value().data(), img.data());
    }

    #[test]
    fn block_is_stackable_and_composes_components() {
        let (mut store, b) = block(cfg(4, 8, 4, 2));
        randomize(&mut store, 0.3, &mut rng(21));
        let g = Graph::new();
        let p = Bound::frozen(&g, &store);
        let img = g.constant(randn(&[2, 4, 8, 8], 1.0, &mut rng(22)));
        let sem = g.constant(randn(&[2, 4, 8, 8], 1.0, &mut rng(23)));
        let s1 = b.forward(&p, BlockState { image: img, semantic: sem }).unwrap();
        let s2 = b.forward(&p, s1).unwrap();
        assert_eq!(s2.image.shape(), vec![2, 4, 8, 8]);
        assert_eq!(s2.semantic.shape(), vec![2, 4, 8, 8]);

        // Componentwise reference: mixer via the naive oracle, the rest via
        // direct-loop convolutions.
        let tokens = |x, e: &PatchEmbedding| patch_embed(&p, x, e).unwrap().value();
        let (ti, ts) = (tokens(img, &b.embed_image), tokens(sem, &b.embed_semantic));
        let mut yi_rows = Vec::new();
        let mut ys_rows = Vec::new();
        let s = b.config.tokens();
        for n in 0..2 {
            let pick = |t: &Tensor<f64>| rows(&t.narrow(0, n, 1));
            let (a, c) = naive_module(&pick(&ti), &pick(&ts), &store, &b.layers);
            yi_rows.extend(a);
            ys_rows.extend(c);
        }
        let to_t = |r: &Rows| Tensor::from_vec(&[2, s, 4], r.concat()).unwrap();
        let (yi, ys) = (g.constant(to_t(&yi_rows)), g.constant(to_t(&ys_rows)));
        let y = concat(
            &[
                patch_unembed(&p, yi, &b.unembed_image, b.geometry()).unwrap(),
                patch_unembed(&p, ys, &b.unembed_semantic, b.geometry()).unwrap(),
            ],
            1,
        )
        .value();
        let pm = |c: &Conv2d| (store.get(c.weight).clone(), store.get(c.bias).data().to_vec());
        let (aw, ab) = pm(&b.attention);
        let m = naive_conv(&y, &aw, &ab, 1, 0).map(|v| 1.0 / (1.0 + (-v).exp()));
        let (iw, ib) = pm(&b.image_conv);
        let fi = img.value();
        let conv_i = naive_conv(&fi, &iw, &ib, 1, 1);
        let new_img = Tensor::from_fn(fi.shape(), |i| fi.data()[i] + m.data()[i] * conv_i.data()[i]);
        let (sw, sb) = pm(&b.semantic_projection);
        let new_sem = naive_conv(&Tensor::concat(&[&new_img, &y], 1).unwrap(), &sw, &sb, 1, 1);
        assert!(max_abs_diff(&s1.image.value(), &new_img) < 1e-11);
        assert!(max_abs_diff(&s1.semantic.value(), &new_sem) < 1e-11);
    }

    #[test]
    fn block_rejects_mismatched_codes() {
        let (store, b) = block(cfg(4, 8, 4, 1));
        let g = Graph::new();
        let p = Bound::frozen(&g, &store);
        let a = g.constant(Tensor::zeros(&[1, 4, 8, 8]));
        let c = g.constant(Tensor::zeros(&[1, 4, 16, 16]));
        assert!(b.forward(&p, BlockState { image: a, semantic: c }).is_err());
        assert!(b.forward(&p, BlockState { image: c, semantic: c }).is_err());
        assert!(CrossMlpBlock::new(&mut Scope::root(&mut ParamStore::<f64>::new(), ""), cfg(4, 6, 4, 1)).is_err());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let (mut store, b) = block(cfg(2, 4, 2, 2));
        randomize(&mut store, 0.5, &mut rng(24));
        let img = randn::<f64>(&[1, 2, 4, 4], 1.0, &mut rng(25));
        let sem = randn::<f64>(&[1, 2, 4, 4], 1.0, &mut rng(26));
        let wi = randn::<f64>(&[1, 2, 4, 4], 1.0, &mut rng(27));
        let ws = randn::<f64>(&[1, 2, 4, 4], 1.0, &mut rng(28));
        let report = GradCheck::default().run_with_params(&store, &[img, sem], |p, v| {
            let g = p.graph();
            let out = b.forward(p, BlockState { image: v[0], semantic: v[1] }).unwrap();
            (out.image * g.constant(wi.clone())).sum() + (out.semantic * g.constant(ws.clone())).sum()
        });
        assert!(report.passes(1e-4), "{report:?}");
        assert!(report.checked > 300);
    }

    fn permutation(n: usize, seed: u64) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut rng(seed));
        p
    }

    fn permute_axis(t: &Tensor<f64>, axis: usize, perm: &[usize]) -> Tensor<f64> {
        let parts: Vec<Tensor<f64>> = perm.iter().map(|&i| t.narrow(axis, i, 1)).collect();
        Tensor::concat(&parts.iter().collect::<Vec<_>>(), axis).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn token_mixing_channel_equivariance(seed in 0u64..1_000_000, c in 2usize..6, hw in 1usize..4) {
            let (mut store, b) = block(cfg(c, 2 * hw, 2, 1));
            randomize(&mut store, 0.5, &mut rng(seed));
            let params = b.layers[0].image.clone();
            let perm = permutation(c, seed + 1);
            let x = randn::<f64>(&[2, hw * hw, c], 1.0, &mut rng(seed + 2));
            let run = |store: &ParamStore<f64>, x: &Tensor<f64>| {
                let g = Graph::new();
                let p = Bound::frozen(&g, store);
                let y = token_mixing(&p, g.constant(x.clone()), &params).unwrap().value();
                (*y).clone()
            };
            let y = run(&store, &x);
            let mut ps = store.clone();
            for id in [params.token_norm.gain, params.token_norm.bias] {
                let v = permute_axis(store.get(id), 0, &perm);
                ps.set(id, v).unwrap();
            }
            let yp = run(&ps, &permute_axis(&x, 2, &perm));
            prop_assert!(max_abs_diff(&yp, &permute_axis(&y, 2, &perm)) <= 1e-6);
        }
    }
}
