//! Radar-volume-to-depth translation: a 3D-encoder/2D-decoder generator with
//! a range-wise top-k skip connection, a two-stream conditional
//! discriminator, and the weighted adversarial + reconstruction losses that
//! train them.

use crate::graph::{Graph, Var};
use crate::geometry::DepthImage;
use crate::nn::{BatchNorm, Conv2dLayer, Conv3dLayer, ConvTranspose2dLayer, FwdCtx, Linear, Parameter};
use crate::radar::{Frame, IntensityMap};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, TensorResult};

pub const LEAKY_SLOPE: f64 = 0.2;
/// Init stream for the frozen random feature pyramid behind the perceptual
/// loss; fixed so checkpoints trained anywhere agree on the loss surface.
pub const PERCEPTUAL_SEED: u64 = 0x9e37_79b9;

fn invalid(op: &'static str, message: String) -> TensorError {
    TensorError::InvalidArgument { op, message }
}

/// Architecture of the depth generator, its discriminator, and the perceptual
/// feature extractor. The default is the full desk-scale network; smaller
/// variants serve fast numerical verification.
#[derive(Debug, Clone)]
pub struct Stage1Config {
    /// Cartesian intensity-map extents (vertical, horizontal, range cells).
    pub input_dims: [usize; 3],
    /// Output channels of each 3D encoder block (kernel 4, stride 2, pad 1).
    pub encoder_channels: Vec<usize>,
    pub latent_dim: usize,
    /// Channel count and spatial extent the latent expands to before the
    /// 2D decoder.
    pub seed_channels: usize,
    pub seed_hw: [usize; 2],
    /// Output channels per transpose-conv decoder block. The first
    /// `upsample_blocks` use kernel 4 stride 2 pad 1 (doubling the extent),
    /// the rest kernel 3 stride 1 pad 1. The last block must emit 1 channel.
    pub decoder_channels: Vec<usize>,
    pub upsample_blocks: usize,
    /// 1-based decoder block whose output the skip map is concatenated onto.
    pub skip_after: usize,
    /// Channels of the skip map: the k largest intensities along range.
    pub skip_channels: usize,
    /// Channels of the discriminator's image-encoder blocks; the first
    /// `disc_downsample` halve the extent, the rest preserve it.
    pub disc_image_channels: Vec<usize>,
    pub disc_downsample: usize,
    /// Shape the fused radar+image feature vector is reshaped to before the
    /// two-layer classifier head.
    pub fuse_shape: [usize; 3],
    pub fuse_channels: usize,
    /// Channels of the frozen random feature pyramid (3×3 convs, stride 2).
    pub perceptual_channels: Vec<usize>,
    /// The network predicts depth divided by this range, keeping activations
    /// order-one.
    pub max_range_m: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            input_dims: [64, 64, 256],
            encoder_channels: vec![8, 16, 32, 64, 128, 256],
            latent_dim: 512,
            seed_channels: 256,
            seed_hw: [4, 4],
            decoder_channels: vec![128, 64, 32, 16, 8, 8, 8, 4, 1],
            upsample_blocks: 5,
            skip_after: 6,
            skip_channels: 8,
            disc_image_channels: vec![8, 16, 32, 64, 128, 256, 256, 256, 256],
            disc_downsample: 6,
            fuse_shape: [32, 8, 8],
            fuse_channels: 32,
            perceptual_channels: vec![16, 32, 64],
            max_range_m: 9.6,
        }
    }
}

impl Stage1Config {
    /// Smallest configuration that exercises every architectural feature;
    /// cheap enough for finite-difference verification at 64-bit.
    pub fn tiny() -> Self {
        Self {
            input_dims: [4, 4, 8],
            encoder_channels: vec![2, 3],
            latent_dim: 5,
            seed_channels: 3,
            seed_hw: [2, 2],
            decoder_channels: vec![2, 2, 1],
            upsample_blocks: 1,
            skip_after: 2,
            skip_channels: 2,
            disc_image_channels: vec![2, 3],
            disc_downsample: 1,
            fuse_shape: [2, 3, 3],
            fuse_channels: 2,
            perceptual_channels: vec![2, 3],
            max_range_m: 9.6,
        }
    }

    /// Depth-image resolution the decoder reaches.
    pub fn image_hw(&self) -> [usize; 2] {
        [self.seed_hw[0] << self.upsample_blocks, self.seed_hw[1] << self.upsample_blocks]
    }

    /// Spatial extents left after the shared 3D encoder stack.
    fn encoder_out_dims(&self) -> [usize; 3] {
        let l = self.encoder_channels.len();
        [self.input_dims[0] >> l, self.input_dims[1] >> l, self.input_dims[2] >> l]
    }

    fn encoder_flat(&self) -> usize {
        let d = self.encoder_out_dims();
        self.encoder_channels.last().copied().unwrap_or(0) * d[0] * d[1] * d[2]
    }

    fn disc_image_out_hw(&self) -> [usize; 2] {
        let [h, w] = self.image_hw();
        [h >> self.disc_downsample, w >> self.disc_downsample]
    }

    fn disc_image_flat(&self) -> usize {
        let [h, w] = self.disc_image_out_hw();
        self.disc_image_channels.last().copied().unwrap_or(0) * h * w
    }

    pub fn validate(&self) -> TensorResult<()> {
        let fail = |m: String| Err(invalid("stage1_config", m));
        let levels = self.encoder_channels.len();
        if levels == 0 {
            return fail("encoder needs at least one block".into());
        }
        for (i, &d) in self.input_dims.iter().enumerate() {
            if d == 0 || d % (1 << levels) != 0 {
                return fail(format!("input extent {d} (axis {i}) must be a positive multiple of 2^{levels}"));
            }
        }
        if self.encoder_out_dims().iter().product::<usize>() < 2 {
            return fail("encoder output must keep at least 2 cells for its normalization".into());
        }
        if self.latent_dim == 0 || self.seed_channels == 0 || self.seed_hw.contains(&0) {
            return fail("latent and decoder seed extents must be positive".into());
        }
        let blocks = self.decoder_channels.len();
        if blocks < 2 || self.decoder_channels.last() != Some(&1) {
            return fail("decoder needs ≥2 blocks ending in a single channel".into());
        }
        if self.upsample_blocks > blocks {
            return fail(format!("{} upsampling blocks exceed {blocks} decoder blocks", self.upsample_blocks));
        }
        if self.skip_after == 0 || self.skip_after >= blocks {
            return fail(format!("skip must join after block 1..{} (got {})", blocks - 1, self.skip_after));
        }
        if self.skip_channels == 0 || self.skip_channels > self.input_dims[2] {
            return fail(format!(
                "skip wants {} range maxima but only {} range cells exist",
                self.skip_channels, self.input_dims[2]
            ));
        }
        if self.upsample_blocks == 0 && self.seed_hw[0] * self.seed_hw[1] < 2 {
            return fail("decoder seed of one pixel cannot feed normalization".into());
        }
        let dblocks = self.disc_image_channels.len();
        if dblocks == 0 || self.disc_downsample > dblocks {
            return fail("discriminator image encoder misconfigured".into());
        }
        let [h, w] = self.image_hw();
        if h % (1 << self.disc_downsample) != 0 || w % (1 << self.disc_downsample) != 0 {
            return fail(format!("image {h}×{w} not divisible by 2^{}", self.disc_downsample));
        }
        if self.disc_image_out_hw().iter().product::<usize>() < 2 {
            return fail("discriminator image encoder must keep ≥2 pixels for normalization".into());
        }
        let fused = self.encoder_flat() + self.disc_image_flat();
        let fuse_len: usize = self.fuse_shape.iter().product();
        if fuse_len != fused {
            return fail(format!("fuse shape {:?} holds {fuse_len} values but streams emit {fused}", self.fuse_shape));
        }
        if self.fuse_shape[1] < 3 || self.fuse_shape[2] < 3 {
            return fail("fuse spatial extent must be at least 3×3".into());
        }
        if self.fuse_channels == 0 || self.perceptual_channels.is_empty() {
            return fail("classifier and perceptual widths must be positive".into());
        }
        if self.max_range_m <= 0.0 {
            return fail(format!("max range must be positive, got {}", self.max_range_m));
        }
        Ok(())
    }
}

/// Checks an input variable against the shape the network was built for.
fn expect_shape<E: Scalar>(g: &Graph<E>, v: Var, want: &[usize], op: &'static str) -> TensorResult<()> {
    let got = g.value(v).shape();
    if got != want {
        return Err(TensorError::ShapeMismatch { op, lhs: got.to_vec(), rhs: want.to_vec() });
    }
    Ok(())
}

/// Per (vertical, horizontal) cell, the `k` largest intensities along range,
/// descending, resized (nearest-neighbour) to `out_h`×`out_w`. Input is a
/// `[1, d, h, w]` map; output `[k, out_h, out_w]`.
pub fn skip_feature<E: Scalar>(
    g: &mut Graph<E>,
    map: Var,
    k: usize,
    out_h: usize,
    out_w: usize,
) -> TensorResult<Var> {
    let shape = g.value(map).shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(TensorError::RankMismatch { op: "skip_feature", expected: 4, shape });
    }
    let volume = g.reshape(map, shape[1..].to_vec())?;
    let top = g.reduce_topk_max(volume, 2, k)?;
    let channels_first = g.permute(top, vec![2, 0, 1])?;
    g.resize_nearest2d(channels_first, out_h, out_w)
}

/// Shared 6-ish-block 3D encoder: conv(4,2,1) → leaky-relu → batch norm per
/// block, flattened to a single feature row.
struct VolumeEncoder<E: Scalar> {
    blocks: Vec<(Conv3dLayer<E>, BatchNorm<E>)>,
    flat: usize,
}

impl<E: Scalar> VolumeEncoder<E> {
    fn new(prefix: &str, cfg: &Stage1Config, seed: u64) -> Self {
        let mut blocks = Vec::new();
        let mut in_ch = 1;
        for (i, &out_ch) in cfg.encoder_channels.iter().enumerate() {
            let conv = Conv3dLayer::new(&format!("{prefix}{i}"), in_ch, out_ch, [4; 3], [2; 3], [1; 3], seed);
            let bn = BatchNorm::new(&format!("{prefix}{i}.bn"), out_ch);
            blocks.push((conv, bn));
            in_ch = out_ch;
        }
        Self { blocks, flat: cfg.encoder_flat() }
    }

    fn forward(&mut self, g: &mut Graph<E>, x: Var, ctx: FwdCtx) -> TensorResult<Var> {
        let mut x = x;
        for (conv, bn) in &mut self.blocks {
            x = conv.forward(g, x, ctx)?;
            x = g.leaky_relu(x, LEAKY_SLOPE);
            x = bn.forward(g, x, ctx)?;
        }
        g.reshape(x, vec![1, self.flat])
    }

    fn parameters(&self) -> Vec<&Parameter<E>> {
        self.blocks.iter().flat_map(|(c, b)| c.parameters().into_iter().chain(b.parameters())).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        self.blocks
            .iter_mut()
            .flat_map(|(c, b)| c.parameters_mut().into_iter().chain(b.parameters_mut()))
            .collect()
    }
}

/// Depth generator: volume encoder → latent bottleneck → transpose-conv
/// decoder with the range-maxima skip map joined midway. The final block adds
/// a small positive bias and clamps through relu so predicted depth is
/// non-negative.
pub struct Stage1Generator<E: Scalar> {
    pub cfg: Stage1Config,
    encoder: VolumeEncoder<E>,
    to_latent: Linear<E>,
    expand: Linear<E>,
    decoder: Vec<ConvTranspose2dLayer<E>>,
    decoder_norms: Vec<BatchNorm<E>>,
}

impl<E: Scalar> Stage1Generator<E> {
    pub fn new(cfg: Stage1Config, seed: u64) -> TensorResult<Self> {
        cfg.validate()?;
        let encoder = VolumeEncoder::new("s1g.enc", &cfg, seed);
        let to_latent = Linear::new("s1g.latent", cfg.encoder_flat(), cfg.latent_dim, seed);
        let seed_len = cfg.seed_channels * cfg.seed_hw[0] * cfg.seed_hw[1];
        let expand = Linear::new("s1g.expand", cfg.latent_dim, seed_len, seed);
        let mut decoder = Vec::new();
        let mut decoder_norms = Vec::new();
        let mut in_ch = cfg.seed_channels;
        let blocks = cfg.decoder_channels.len();
        for (i, &out_ch) in cfg.decoder_channels.iter().enumerate() {
            let (kernel, stride) = if i < cfg.upsample_blocks { ([4, 4], [2, 2]) } else { ([3, 3], [1, 1]) };
            let name = format!("s1g.dec{i}");
            let mut layer = ConvTranspose2dLayer::new(&name, in_ch, out_ch, kernel, stride, [1, 1], seed);
            if i + 1 == blocks {
                layer = layer.with_bias(0.1);
            } else {
                decoder_norms.push(BatchNorm::new(&format!("{name}.bn"), out_ch));
            }
            decoder.push(layer);
            in_ch = out_ch;
            if i + 1 == cfg.skip_after {
                in_ch += cfg.skip_channels;
            }
        }
        Ok(Self { cfg, encoder, to_latent, expand, decoder, decoder_norms })
    }

    /// Maps a prepared `[1, d, h, w]` volume to a `[1, H, W]` scaled depth
    /// image.
    pub fn forward(&mut self, g: &mut Graph<E>, input: Var, ctx: FwdCtx) -> TensorResult<Var> {
        let d = self.cfg.input_dims;
        expect_shape(g, input, &[1, d[0], d[1], d[2]], "stage1_generator")?;
        let features = self.encoder.forward(g, input, ctx)?;
        let mut x = self.to_latent.forward(g, features, ctx)?;
        x = g.leaky_relu(x, LEAKY_SLOPE);
        x = self.expand.forward(g, x, ctx)?;
        x = g.relu(x);
        x = g.reshape(x, vec![self.cfg.seed_channels, self.cfg.seed_hw[0], self.cfg.seed_hw[1]])?;
        let blocks = self.decoder.len();
        for i in 0..blocks {
            x = self.decoder[i].forward(g, x, ctx)?;
            x = g.relu(x);
            if i + 1 < blocks {
                x = self.decoder_norms[i].forward(g, x, ctx)?;
            }
            if i + 1 == self.cfg.skip_after {
                let hw = g.value(x).shape()[1..].to_vec();
                let skip = skip_feature(g, input, self.cfg.skip_channels, hw[0], hw[1])?;
                x = g.concat(&[x, skip], 0)?;
            }
        }
        let [h, w] = self.cfg.image_hw();
        g.reshape(x, vec![1, h, w])
    }

    pub fn parameters(&self) -> Vec<&Parameter<E>> {
        let mut out = self.encoder.parameters();
        out.extend(self.to_latent.parameters());
        out.extend(self.expand.parameters());
        for layer in &self.decoder {
            out.extend(layer.parameters());
        }
        for bn in &self.decoder_norms {
            out.extend(bn.parameters());
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut out = self.encoder.parameters_mut();
        out.extend(self.to_latent.parameters_mut());
        out.extend(self.expand.parameters_mut());
        for layer in &mut self.decoder {
            out.extend(layer.parameters_mut());
        }
        for bn in &mut self.decoder_norms {
            out.extend(bn.parameters_mut());
        }
        out
    }
}

/// Conditional discriminator: independent volume and image encoders whose
/// flattened features are fused and classified to a sigmoid score.
pub struct Stage1Discriminator<E: Scalar> {
    pub cfg: Stage1Config,
    volume_stream: VolumeEncoder<E>,
    image_stream: Vec<(Conv2dLayer<E>, BatchNorm<E>)>,
    fuse_a: Conv2dLayer<E>,
    fuse_norm: BatchNorm<E>,
    fuse_b: Conv2dLayer<E>,
}

impl<E: Scalar> Stage1Discriminator<E> {
    pub fn new(cfg: Stage1Config, seed: u64) -> TensorResult<Self> {
        cfg.validate()?;
        let volume_stream = VolumeEncoder::new("s1d.venc", &cfg, seed);
        let mut image_stream = Vec::new();
        let mut in_ch = 1;
        for (i, &out_ch) in cfg.disc_image_channels.iter().enumerate() {
            let (kernel, stride) = if i < cfg.disc_downsample { ([4, 4], [2, 2]) } else { ([3, 3], [1, 1]) };
            let conv = Conv2dLayer::new(&format!("s1d.ienc{i}"), in_ch, out_ch, kernel, stride, [1, 1], seed);
            let bn = BatchNorm::new(&format!("s1d.ienc{i}.bn"), out_ch);
            image_stream.push((conv, bn));
            in_ch = out_ch;
        }
        let fuse_a =
            Conv2dLayer::new("s1d.fuse_a", cfg.fuse_shape[0], cfg.fuse_channels, [3, 3], [2, 2], [1, 1], seed);
        let fuse_norm = BatchNorm::new("s1d.fuse_a.bn", cfg.fuse_channels);
        let half = |n: usize| (n - 1) / 2 + 1;
        let fuse_b = Conv2dLayer::new(
            "s1d.fuse_b",
            cfg.fuse_channels,
            1,
            [half(cfg.fuse_shape[1]), half(cfg.fuse_shape[2])],
            [1, 1],
            [0, 0],
            seed,
        );
        Ok(Self { cfg, volume_stream, image_stream, fuse_a, fuse_norm, fuse_b })
    }

    /// Scores a (volume, depth image) pair; `[1]`-shaped output in (0, 1).
    pub fn forward(&mut self, g: &mut Graph<E>, map: Var, image: Var, ctx: FwdCtx) -> TensorResult<Var> {
        let d = self.cfg.input_dims;
        expect_shape(g, map, &[1, d[0], d[1], d[2]], "stage1_discriminator")?;
        let [h, w] = self.cfg.image_hw();
        expect_shape(g, image, &[1, h, w], "stage1_discriminator")?;
        let volume_row = self.volume_stream.forward(g, map, ctx)?;
        let mut x = image;
        for (conv, bn) in &mut self.image_stream {
            x = conv.forward(g, x, ctx)?;
            x = g.leaky_relu(x, LEAKY_SLOPE);
            x = bn.forward(g, x, ctx)?;
        }
        let image_row = g.reshape(x, vec![1, self.cfg.disc_image_flat()])?;
        let fused = g.concat(&[volume_row, image_row], 1)?;
        let mut y = g.reshape(fused, self.cfg.fuse_shape.to_vec())?;
        y = self.fuse_a.forward(g, y, ctx)?;
        y = g.leaky_relu(y, LEAKY_SLOPE);
        y = self.fuse_norm.forward(g, y, ctx)?;
        y = self.fuse_b.forward(g, y, ctx)?;
        y = g.sigmoid(y);
        g.reshape(y, vec![1])
    }

    pub fn parameters(&self) -> Vec<&Parameter<E>> {
        let mut out = self.volume_stream.parameters();
        for (c, b) in &self.image_stream {
            out.extend(c.parameters());
            out.extend(b.parameters());
        }
        out.extend(self.fuse_a.parameters());
        out.extend(self.fuse_norm.parameters());
        out.extend(self.fuse_b.parameters());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut out = self.volume_stream.parameters_mut();
        for (c, b) in &mut self.image_stream {
            out.extend(c.parameters_mut());
            out.extend(b.parameters_mut());
        }
        out.extend(self.fuse_a.parameters_mut());
        out.extend(self.fuse_norm.parameters_mut());
        out.extend(self.fuse_b.parameters_mut());
        out
    }

    /// Zeroes the final classifier kernel, pinning the score to exactly 0.5
    /// regardless of input. Useful for fixing the adversarial term in
    /// numerical comparisons.
    pub fn pin_score_to_half(&mut self) {
        for v in self.fuse_b.kernels.value.data_mut() {
            *v = E::ZERO;
        }
    }
}

/// Frozen random conv pyramid standing in for a pretrained perceptual
/// network: each 3×3 stride-2 layer's activations are one feature scale.
pub struct PerceptualNet<E: Scalar> {
    layers: Vec<Conv2dLayer<E>>,
}

impl<E: Scalar> PerceptualNet<E> {
    pub fn new(channels: &[usize], seed: u64) -> Self {
        let mut layers = Vec::new();
        let mut in_ch = 1;
        for (i, &out_ch) in channels.iter().enumerate() {
            layers.push(Conv2dLayer::new(&format!("perc{i}"), in_ch, out_ch, [3, 3], [2, 2], [1, 1], seed));
            in_ch = out_ch;
        }
        Self { layers }
    }

    pub fn for_config(cfg: &Stage1Config) -> Self {
        Self::new(&cfg.perceptual_channels, PERCEPTUAL_SEED)
    }

    /// Feature maps at every scale; weights never register for gradients.
    pub fn features(&self, g: &mut Graph<E>, image: Var) -> TensorResult<Vec<Var>> {
        let mut x = image;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(g, x, FwdCtx::eval())?;
            x = g.leaky_relu(x, LEAKY_SLOPE);
            out.push(x);
        }
        Ok(out)
    }
}

/// Loss weights for the generator objective: adversarial + l1·reconstruction
/// + perceptual·feature distance.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Weights {
    pub l1: f64,
    pub perceptual: f64,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self { l1: 1000.0, perceptual: 20.0 }
    }
}

/// Generator loss broken into its graph nodes; call `backward` on `total`.
pub struct Stage1GLoss {
    pub total: Var,
    pub adversarial: Var,
    pub l1: Var,
    pub perceptual: Var,
    /// The generated `[1, H, W]` image, for logging or reuse.
    pub generated: Var,
}

/// Discriminator loss nodes plus both scores for monitoring.
pub struct Stage1DLoss {
    pub total: Var,
    pub real_score: Var,
    pub fake_score: Var,
}

/// Normalizes a Cartesian intensity map by its own maximum (a zero map stays
/// zero) and shapes it for the networks.
pub fn prepare_map<E: Scalar>(map: &IntensityMap, cfg: &Stage1Config) -> TensorResult<Tensor<E>> {
    if map.frame != Frame::Cartesian {
        return Err(invalid("stage1_input", "intensity map must be in the Cartesian frame".into()));
    }
    if map.dims != cfg.input_dims {
        return Err(TensorError::ShapeMismatch {
            op: "stage1_input",
            lhs: map.dims.to_vec(),
            rhs: cfg.input_dims.to_vec(),
        });
    }
    let max = map.max_value();
    let scale = if max > 0.0 { 1.0 / max as f64 } else { 1.0 };
    let data = map.values.iter().map(|&v| E::from_f64(v as f64 * scale)).collect();
    Tensor::new(vec![1, map.dims[0], map.dims[1], map.dims[2]], data)
}

/// Scales a ground-truth depth image into the network's output units.
pub fn prepare_target<E: Scalar>(img: &DepthImage, cfg: &Stage1Config) -> TensorResult<Tensor<E>> {
    let [h, w] = cfg.image_hw();
    if img.height != h || img.width != w {
        return Err(TensorError::ShapeMismatch {
            op: "stage1_target",
            lhs: vec![img.height, img.width],
            rhs: vec![h, w],
        });
    }
    let data = img.depth.iter().map(|&d| E::from_f64(d / cfg.max_range_m)).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Runs the generator once on its own graph and returns the raw output
/// tensor, detached from any gradient bookkeeping.
pub fn generate<E: Scalar>(
    gen: &mut Stage1Generator<E>,
    map: &Tensor<E>,
    ctx: FwdCtx,
) -> TensorResult<Tensor<E>> {
    let mut g = Graph::new();
    let input = g.constant(map.clone());
    let out = gen.forward(&mut g, input, ctx)?;
    Ok(g.value(out).clone())
}

/// Generator objective: mse(D(map, fake), 1) + w_l1·l1(fake, target)
/// + w_p·mean feature mse. The discriminator participates with frozen
/// weights; only generator parameters receive gradients.
pub fn stage1_g_loss<E: Scalar>(
    g: &mut Graph<E>,
    gen: &mut Stage1Generator<E>,
    disc: &mut Stage1Discriminator<E>,
    perceptual: &PerceptualNet<E>,
    weights: Stage1Weights,
    map: &Tensor<E>,
    target: &Tensor<E>,
) -> TensorResult<Stage1GLoss> {
    let input = g.constant(map.clone());
    let truth = g.constant(target.clone());
    let generated = gen.forward(g, input, FwdCtx::train())?;
    let score = disc.forward(g, input, generated, FwdCtx::train_frozen())?;
    let one = g.constant(Tensor::new(vec![1], vec![E::ONE])?);
    let adversarial = g.mse(score, one)?;
    let l1 = g.l1(generated, truth)?;
    let fake_feats = perceptual.features(g, generated)?;
    let true_feats = perceptual.features(g, truth)?;
    let mut scale_losses = Vec::with_capacity(fake_feats.len());
    for (&f, &t) in fake_feats.iter().zip(true_feats.iter()) {
        scale_losses.push(g.mse(f, t)?);
    }
    let perceptual_loss = g.mean_of(&scale_losses)?;
    let weighted_l1 = g.mul_scalar(l1, weights.l1);
    let weighted_p = g.mul_scalar(perceptual_loss, weights.perceptual);
    let partial = g.add(adversarial, weighted_l1)?;
    let total = g.add(partial, weighted_p)?;
    Ok(Stage1GLoss { total, adversarial, l1, perceptual: perceptual_loss, generated })
}

/// Discriminator objective: ½·[mse(D(map, real), 1) + mse(D(map, fake), 0)].
/// `fake` must be a detached tensor (no generator graph attached).
pub fn stage1_d_loss<E: Scalar>(
    g: &mut Graph<E>,
    disc: &mut Stage1Discriminator<E>,
    map: &Tensor<E>,
    real: &Tensor<E>,
    fake: &Tensor<E>,
) -> TensorResult<Stage1DLoss> {
    let input = g.constant(map.clone());
    let real_img = g.constant(real.clone());
    let fake_img = g.constant(fake.clone());
    let real_score = disc.forward(g, input, real_img, FwdCtx::train())?;
    let fake_score = disc.forward(g, input, fake_img, FwdCtx::train())?;
    let one = g.constant(Tensor::new(vec![1], vec![E::ONE])?);
    let zero = g.constant(Tensor::new(vec![1], vec![E::ZERO])?);
    let real_term = g.mse(real_score, one)?;
    let fake_term = g.mse(fake_score, zero)?;
    let sum = g.add(real_term, fake_term)?;
    let total = g.mul_scalar(sum, 0.5);
    Ok(Stage1DLoss { total, real_score, fake_score })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_and_default_configs_validate() {
        Stage1Config::tiny().validate().unwrap();
        Stage1Config::default().validate().unwrap();
        assert_eq!(Stage1Config::default().image_hw(), [128, 128]);
        assert_eq!(Stage1Config::tiny().image_hw(), [4, 4]);
    }

    #[test]
    fn config_rejects_bad_skip_and_fuse() {
        let mut cfg = Stage1Config::tiny();
        cfg.skip_after = cfg.decoder_channels.len();
        assert!(cfg.validate().is_err());

        let mut cfg = Stage1Config::tiny();
        cfg.fuse_shape = [1, 3, 3];
        assert!(cfg.validate().is_err());

        let mut cfg = Stage1Config::tiny();
        cfg.input_dims = [5, 4, 8];
        assert!(cfg.validate().is_err());
    }
}
