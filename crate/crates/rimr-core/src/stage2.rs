//! Point-cloud refinement networks: a permutation-invariant set encoder
//! (shared per-point MLPs with max pooling), a fully-connected decoder that
//! densifies the cloud, a two-stream conditional discriminator, and the
//! adversarial + chamfer + volume-overlap training losses.

use crate::geometry::{PointCloud, Vec3};
use crate::graph::{Graph, Var};
use crate::metrics::{chamfer_loss, cloud_from_tensor_pub, iou_loss, iou_surrogate, tensor_from_cloud};
use crate::nn::{FwdCtx, Linear, Parameter};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Stream id for the fixed-seed downsampling draw, so the same multiset of
/// points always resamples identically.
const RESAMPLE_SEED: u64 = 0x7265_7361;

fn invalid(op: &'static str, message: String) -> TensorError {
    TensorError::InvalidArgument { op, message }
}

/// Widths of the refinement networks. Defaults are the full desk-scale
/// model; `tiny` is sized for 64-bit finite-difference verification.
#[derive(Debug, Clone)]
pub struct Stage2Config {
    /// Points every raw input cloud is resampled to before encoding.
    pub input_points: usize,
    /// Points the generator emits.
    pub output_points: usize,
    /// Per-point widths of the first shared MLP (from 3 coordinates).
    pub mlp1: [usize; 2],
    /// Per-point widths of the second shared MLP (from per-point feature
    /// concatenated with the pooled global feature).
    pub mlp2: [usize; 2],
    /// Hidden widths of the coordinate decoder; the final layer emits
    /// 3·output_points.
    pub decoder_hidden: [usize; 2],
    /// Hidden width of the discriminator's classifier head.
    pub disc_hidden: usize,
    /// Voxel edge for the volume-overlap loss term.
    pub voxel_size_m: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            input_points: 1024,
            output_points: 2048,
            mlp1: [64, 128],
            mlp2: [256, 512],
            decoder_hidden: [512, 1024],
            disc_hidden: 256,
            voxel_size_m: 0.05,
        }
    }
}

impl Stage2Config {
    /// Smallest useful configuration: 8 points in and out, width-4 layers.
    pub fn tiny() -> Self {
        Self {
            input_points: 8,
            output_points: 8,
            mlp1: [4, 4],
            mlp2: [4, 4],
            decoder_hidden: [4, 4],
            disc_hidden: 4,
            voxel_size_m: 0.05,
        }
    }

    pub fn validate(&self) -> TensorResult<()> {
        let dims = [
            self.input_points,
            self.output_points,
            self.mlp1[0],
            self.mlp1[1],
            self.mlp2[0],
            self.mlp2[1],
            self.decoder_hidden[0],
            self.decoder_hidden[1],
            self.disc_hidden,
        ];
        if dims.contains(&0) {
            return Err(invalid("stage2_config", "every width and point count must be positive".into()));
        }
        if self.voxel_size_m <= 0.0 {
            return Err(invalid("stage2_config", format!("voxel size must be positive, got {}", self.voxel_size_m)));
        }
        Ok(())
    }

    /// Width of the pooled global feature.
    pub fn global_width(&self) -> usize {
        self.mlp2[1]
    }
}

/// Sorts points lexicographically so any permutation of the same multiset
/// maps to one canonical order.
fn canonical_points(cloud: &PointCloud) -> Vec<Vec3> {
    let mut pts = cloud.points.clone();
    pts.sort_by(|a, b| {
        a.x.total_cmp(&b.x).then_with(|| a.y.total_cmp(&b.y)).then_with(|| a.z.total_cmp(&b.z))
    });
    pts
}

/// Canonicalizes and resamples a cloud to exactly `count` points: larger
/// clouds keep a fixed-seed index subset, smaller ones repeat points
/// cyclically. Deterministic in the multiset of points alone.
pub fn resample(cloud: &PointCloud, count: usize) -> TensorResult<Vec<Vec3>> {
    if cloud.is_empty() {
        return Err(TensorError::Empty { op: "stage2_resample" });
    }
    let sorted = canonical_points(cloud);
    let n = sorted.len();
    Ok(match n.cmp(&count) {
        std::cmp::Ordering::Equal => sorted,
        std::cmp::Ordering::Less => (0..count).map(|i| sorted[i % n]).collect(),
        std::cmp::Ordering::Greater => {
            let mut rng = stream(RESAMPLE_SEED, "downsample", n as u64);
            let mut keep = rand::seq::index::sample(&mut rng, n, count).into_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| sorted[i]).collect()
        }
    })
}

/// Resampled cloud as an `[count, 3]` tensor ready for the networks.
pub fn resample_tensor<E: Scalar>(cloud: &PointCloud, count: usize) -> TensorResult<Tensor<E>> {
    let pts = resample(cloud, count)?;
    let data = pts.iter().flat_map(|p| [E::from_f64(p.x), E::from_f64(p.y), E::from_f64(p.z)]).collect();
    Tensor::new(vec![count, 3], data)
}

/// Two stacked shared-MLP blocks with max pooling: rows in, one pooled
/// feature row out. Accepts any number of rows; the output is invariant to
/// their order.
pub struct PointEncoder<E: Scalar> {
    l1a: Linear<E>,
    l1b: Linear<E>,
    l2a: Linear<E>,
    l2b: Linear<E>,
}

impl<E: Scalar> PointEncoder<E> {
    fn new(prefix: &str, cfg: &Stage2Config, seed: u64) -> Self {
        // Positive biases keep the relu stack alive (and off the exact
        // kink) whatever the draw of the weights.
        Self {
            l1a: Linear::new(&format!("{prefix}.mlp1a"), 3, cfg.mlp1[0], seed).with_bias(0.1),
            l1b: Linear::new(&format!("{prefix}.mlp1b"), cfg.mlp1[0], cfg.mlp1[1], seed).with_bias(0.1),
            l2a: Linear::new(&format!("{prefix}.mlp2a"), 2 * cfg.mlp1[1], cfg.mlp2[0], seed).with_bias(0.1),
            l2b: Linear::new(&format!("{prefix}.mlp2b"), cfg.mlp2[0], cfg.mlp2[1], seed).with_bias(0.1),
        }
    }

    /// `[rows, 3]` → `[1, global_width]` pooled feature.
    pub fn forward(&self, g: &mut Graph<E>, points: Var, ctx: FwdCtx) -> TensorResult<Var> {
        let shape = g.value(points).shape().to_vec();
        if shape.len() != 2 || shape[1] != 3 || shape[0] == 0 {
            return Err(TensorError::ShapeMismatch { op: "point_encoder", lhs: shape, rhs: vec![0, 3] });
        }
        let rows = shape[0];
        let mut f = self.l1a.forward(g, points, ctx)?;
        f = g.relu(f);
        f = self.l1b.forward(g, f, ctx)?;
        f = g.relu(f);
        let pooled = g.reduce_topk_max(f, 0, 1)?;
        let tiled = g.repeat_rows(pooled, rows)?;
        let joined = g.concat(&[f, tiled], 1)?;
        let mut y = self.l2a.forward(g, joined, ctx)?;
        y = g.relu(y);
        y = self.l2b.forward(g, y, ctx)?;
        y = g.relu(y);
        g.reduce_topk_max(y, 0, 1)
    }

    fn parameters(&self) -> Vec<&Parameter<E>> {
        [&self.l1a, &self.l1b, &self.l2a, &self.l2b].into_iter().flat_map(|l| l.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut out = self.l1a.parameters_mut();
        out.extend(self.l1b.parameters_mut());
        out.extend(self.l2a.parameters_mut());
        out.extend(self.l2b.parameters_mut());
        out
    }
}

/// Cloud refiner: set encoder to a global feature, then a fully-connected
/// decoder emitting a fixed-size dense cloud.
pub struct Stage2Generator<E: Scalar> {
    pub cfg: Stage2Config,
    pub encoder: PointEncoder<E>,
    d1: Linear<E>,
    d2: Linear<E>,
    d3: Linear<E>,
}

impl<E: Scalar> Stage2Generator<E> {
    pub fn new(cfg: Stage2Config, seed: u64) -> TensorResult<Self> {
        cfg.validate()?;
        let encoder = PointEncoder::new("s2g.enc", &cfg, seed);
        let d1 = Linear::new("s2g.dec1", cfg.global_width(), cfg.decoder_hidden[0], seed).with_bias(0.1);
        let d2 = Linear::new("s2g.dec2", cfg.decoder_hidden[0], cfg.decoder_hidden[1], seed).with_bias(0.1);
        let d3 = Linear::new("s2g.dec3", cfg.decoder_hidden[1], 3 * cfg.output_points, seed);
        Ok(Self { cfg, encoder, d1, d2, d3 })
    }

    /// Strict global feature of an exactly-sized cloud, eval mode.
    pub fn encode(&self, cloud: &PointCloud) -> TensorResult<Tensor<E>> {
        if cloud.len() != self.cfg.input_points {
            return Err(invalid(
                "stage2_encode",
                format!("expected {} points, got {}", self.cfg.input_points, cloud.len()),
            ));
        }
        let mut g = Graph::new();
        let pts = g.constant(tensor_from_cloud(cloud));
        let feat = self.encoder.forward(&mut g, pts, FwdCtx::eval())?;
        g.value(feat).clone().reshaped(vec![self.cfg.global_width()])
    }

    /// `[input_points, 3]` → `[output_points, 3]` refined coordinates.
    pub fn forward(&self, g: &mut Graph<E>, points: Var, ctx: FwdCtx) -> TensorResult<Var> {
        let shape = g.value(points).shape().to_vec();
        if shape != [self.cfg.input_points, 3] {
            return Err(TensorError::ShapeMismatch {
                op: "stage2_generator",
                lhs: shape,
                rhs: vec![self.cfg.input_points, 3],
            });
        }
        let feat = self.encoder.forward(g, points, ctx)?;
        let mut h = self.d1.forward(g, feat, ctx)?;
        h = g.relu(h);
        h = self.d2.forward(g, h, ctx)?;
        h = g.relu(h);
        let flat = self.d3.forward(g, h, ctx)?;
        g.reshape(flat, vec![self.cfg.output_points, 3])
    }

    /// Resamples a raw cloud, runs the network in eval mode, and returns the
    /// refined cloud.
    pub fn refine(&self, cloud: &PointCloud) -> TensorResult<PointCloud> {
        let mut g = Graph::new();
        let input = g.constant(resample_tensor::<E>(cloud, self.cfg.input_points)?);
        let out = self.forward(&mut g, input, FwdCtx::eval())?;
        cloud_from_tensor_pub(g.value(out))
    }

    pub fn parameters(&self) -> Vec<&Parameter<E>> {
        let mut out = self.encoder.parameters();
        out.extend(self.d1.parameters());
        out.extend(self.d2.parameters());
        out.extend(self.d3.parameters());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut out = self.encoder.parameters_mut();
        out.extend(self.d1.parameters_mut());
        out.extend(self.d2.parameters_mut());
        out.extend(self.d3.parameters_mut());
        out
    }
}

/// Conditional cloud discriminator: independent encoders for the condition
/// and candidate clouds, classifier over the concatenated global features.
pub struct Stage2Discriminator<E: Scalar> {
    pub cfg: Stage2Config,
    condition_stream: PointEncoder<E>,
    candidate_stream: PointEncoder<E>,
    fc1: Linear<E>,
    fc2: Linear<E>,
}

impl<E: Scalar> Stage2Discriminator<E> {
    pub fn new(cfg: Stage2Config, seed: u64) -> TensorResult<Self> {
        cfg.validate()?;
        let condition_stream = PointEncoder::new("s2d.cond", &cfg, seed);
        let candidate_stream = PointEncoder::new("s2d.cand", &cfg, seed);
        let fc1 = Linear::new("s2d.fc1", 2 * cfg.global_width(), cfg.disc_hidden, seed).with_bias(0.1);
        let fc2 = Linear::new("s2d.fc2", cfg.disc_hidden, 1, seed);
        Ok(Self { cfg, condition_stream, candidate_stream, fc1, fc2 })
    }

    /// Scores a (condition, candidate) pair of `[rows, 3]` tensors; rows may
    /// differ between the two. Output shape `[1]`, value in (0, 1).
    pub fn forward(&self, g: &mut Graph<E>, condition: Var, candidate: Var, ctx: FwdCtx) -> TensorResult<Var> {
        let a = self.condition_stream.forward(g, condition, ctx)?;
        let b = self.candidate_stream.forward(g, candidate, ctx)?;
        let joined = g.concat(&[a, b], 1)?;
        let mut y = self.fc1.forward(g, joined, ctx)?;
        y = g.relu(y);
        y = self.fc2.forward(g, y, ctx)?;
        y = g.sigmoid(y);
        g.reshape(y, vec![1])
    }

    /// Eval-mode convenience over raw clouds; the condition resamples to the
    /// input count, the candidate to the output count.
    pub fn score(&self, condition: &PointCloud, candidate: &PointCloud) -> TensorResult<f64> {
        let mut g = Graph::new();
        let cond = g.constant(resample_tensor::<E>(condition, self.cfg.input_points)?);
        let cand = g.constant(resample_tensor::<E>(candidate, self.cfg.output_points)?);
        let s = self.forward(&mut g, cond, cand, FwdCtx::eval())?;
        Ok(g.value(s).item().map(|v| v.to_f64())?)
    }

    /// Zeroes the classifier's final layer so the score is exactly 0.5 for
    /// any input; used to pin the adversarial term in numeric fixtures.
    pub fn pin_score_to_half(&mut self) {
        for v in self.fc2.w.value.data_mut() {
            *v = E::ZERO;
        }
        for v in self.fc2.b.value.data_mut() {
            *v = E::ZERO;
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter<E>> {
        let mut out = self.condition_stream.parameters();
        out.extend(self.candidate_stream.parameters());
        out.extend(self.fc1.parameters());
        out.extend(self.fc2.parameters());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut out = self.condition_stream.parameters_mut();
        out.extend(self.candidate_stream.parameters_mut());
        out.extend(self.fc1.parameters_mut());
        out.extend(self.fc2.parameters_mut());
        out
    }
}

/// Weights of the generator objective's reconstruction terms. Setting a
/// weight to zero removes that term (and skips its computation).
#[derive(Debug, Clone, Copy)]
pub struct Stage2Weights {
    pub chamfer: f64,
    pub iou: f64,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Self { chamfer: 100.0, iou: 10.0 }
    }
}

/// Generator loss nodes; the adversarial term is a constant zero when no
/// discriminator participates.
pub struct Stage2GLoss {
    pub total: Var,
    pub adversarial: Var,
    pub chamfer: Var,
    pub iou: Var,
    /// The `[output_points, 3]` prediction, for logging or reuse.
    pub predicted: Var,
}

pub struct Stage2DLoss {
    pub total: Var,
    pub real_score: Var,
    pub fake_score: Var,
}

fn zero_scalar<E: Scalar>(g: &mut Graph<E>) -> Var {
    g.constant(Tensor::scalar(E::ZERO))
}

fn g_loss_inner<E: Scalar>(
    g: &mut Graph<E>,
    gen: &Stage2Generator<E>,
    disc: Option<&Stage2Discriminator<E>>,
    weights: Stage2Weights,
    input: &PointCloud,
    truth: &PointCloud,
    surrogate_iou: bool,
) -> TensorResult<Stage2GLoss> {
    if truth.is_empty() {
        return Err(TensorError::Empty { op: "stage2_g_loss" });
    }
    let cond = g.constant(resample_tensor::<E>(input, gen.cfg.input_points)?);
    let predicted = gen.forward(g, cond, FwdCtx::train())?;
    let adversarial = match disc {
        Some(d) => {
            let score = d.forward(g, cond, predicted, FwdCtx::train_frozen())?;
            let one = g.constant(Tensor::new(vec![1], vec![E::ONE])?);
            g.mse(score, one)?
        }
        None => zero_scalar(g),
    };
    let chamfer = if weights.chamfer != 0.0 { chamfer_loss(g, predicted, truth)? } else { zero_scalar(g) };
    let iou = if weights.iou != 0.0 {
        if surrogate_iou {
            iou_surrogate(g, predicted, truth, gen.cfg.voxel_size_m)?
        } else {
            iou_loss(g, predicted, truth, gen.cfg.voxel_size_m)?
        }
    } else {
        zero_scalar(g)
    };
    let weighted_cf = g.mul_scalar(chamfer, weights.chamfer);
    let weighted_iou = g.mul_scalar(iou, weights.iou);
    let partial = g.add(adversarial, weighted_cf)?;
    let total = g.add(partial, weighted_iou)?;
    Ok(Stage2GLoss { total, adversarial, chamfer, iou, predicted })
}

/// Generator objective: mse(D(P_r, P̂), 1) + w_cf·chamfer(P̂, truth)
/// + w_iou·(1 − voxel overlap). Pass `None` for the discriminator to train
/// reconstruction-only. Only generator parameters receive gradients.
pub fn stage2_g_loss<E: Scalar>(
    g: &mut Graph<E>,
    gen: &Stage2Generator<E>,
    disc: Option<&Stage2Discriminator<E>>,
    weights: Stage2Weights,
    input: &PointCloud,
    truth: &PointCloud,
) -> TensorResult<Stage2GLoss> {
    g_loss_inner(g, gen, disc, weights, input, truth, false)
}

/// Same gradients as [`stage2_g_loss`] but the overlap node carries its
/// smooth surrogate value, making the whole loss finite-difference
/// checkable.
pub fn stage2_g_loss_surrogate<E: Scalar>(
    g: &mut Graph<E>,
    gen: &Stage2Generator<E>,
    disc: Option<&Stage2Discriminator<E>>,
    weights: Stage2Weights,
    input: &PointCloud,
    truth: &PointCloud,
) -> TensorResult<Stage2GLoss> {
    g_loss_inner(g, gen, disc, weights, input, truth, true)
}

/// Discriminator objective: ½·[mse(D(P_r, truth), 1) + mse(D(P_r, fake), 0)]
/// with `fake` a detached cloud.
pub fn stage2_d_loss<E: Scalar>(
    g: &mut Graph<E>,
    disc: &Stage2Discriminator<E>,
    input: &PointCloud,
    truth: &PointCloud,
    fake: &PointCloud,
) -> TensorResult<Stage2DLoss> {
    let cfg = &disc.cfg;
    let cond = g.constant(resample_tensor::<E>(input, cfg.input_points)?);
    let real = g.constant(resample_tensor::<E>(truth, cfg.output_points)?);
    let fake_t = g.constant(resample_tensor::<E>(fake, cfg.output_points)?);
    let real_score = disc.forward(g, cond, real, FwdCtx::train())?;
    let fake_score = disc.forward(g, cond, fake_t, FwdCtx::train())?;
    let one = g.constant(Tensor::new(vec![1], vec![E::ONE])?);
    let zero = g.constant(Tensor::new(vec![1], vec![E::ZERO])?);
    let real_term = g.mse(real_score, one)?;
    let fake_term = g.mse(fake_score, zero)?;
    let sum = g.add(real_term, fake_term)?;
    let total = g.mul_scalar(sum, 0.5);
    Ok(Stage2DLoss { total, real_score, fake_score })
}
