//! End-to-end orchestration: synthetic dataset construction (shapes → radar
//! volumes + ground-truth depths + clouds), the two adversarial training
//! loops with logging/checkpointing/resume, coarse-cloud assembly, full
//! radar-to-cloud reconstruction, and batch evaluation reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::geometry::{
    backproject, generate_shape, render_depth, union_views, CameraModel, DepthImage, GeometryError, Mat3,
    PointCloud, Pose, ShapeKind, Vec3, ViewSet,
};
use crate::graph::Graph;
use crate::io::{self, IoError, SampleRecord};
use crate::metrics::{aggregate_reports, cloud_iou, evaluate_pair, MetricReport, MetricsError};
use crate::nn::{clear_grads, harvest_grads, Adam, FwdCtx, Parameter};
use crate::radar::{
    process_fft, select_snapshots, synthesize_raw_with, to_cartesian, Bounds3, Impairments, RadarConfig,
    RadarError, Reflector, ReflectorScene,
};
use crate::rng::stream;
use crate::stage1::{
    generate, prepare_map, prepare_target, stage1_d_loss, stage1_g_loss, PerceptualNet, Stage1Config,
    Stage1Discriminator, Stage1Generator, Stage1Weights,
};
use crate::stage2::{
    stage2_d_loss, stage2_g_loss, Stage2Config, Stage2Discriminator, Stage2Generator, Stage2Weights,
};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Radar(#[from] RadarError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
    #[error("non-finite {stage} loss at epoch {epoch}, batch {batch}")]
    NonFinite { stage: &'static str, epoch: usize, batch: usize },
}

pub type PipelineResult<T> = Result<T, PipelineError>;

fn invalid(op: &'static str, message: impl Into<String>) -> PipelineError {
    PipelineError::Invalid { op, message: message.into() }
}

fn file_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io(IoError::File { path: path.to_path_buf(), source })
}

// ---------------------------------------------------------------------------
// View geometry: sensors on a ring around the object, all aimed at the
// world origin.

/// Rigid frames of one viewpoint: the radar looks along its +y axis, the
/// camera along its +z axis, both from the same position on the ring.
#[derive(Debug, Clone)]
pub struct ViewFrame {
    /// World → radar sensor frame.
    pub radar: Pose,
    /// World → camera frame.
    pub camera: Pose,
}

/// Evenly spaced viewpoints on a horizontal ring of the given radius. The
/// object center (world origin) sits at range `radius` straight ahead of
/// every sensor.
pub fn view_frames(count: usize, radius_m: f64) -> Vec<ViewFrame> {
    (0..count)
        .map(|i| {
            let alpha = std::f64::consts::TAU * i as f64 / count as f64;
            let (sin, cos) = alpha.sin_cos();
            let x_axis = Vec3::new(cos, sin, 0.0);
            let y_axis = Vec3::new(-sin, cos, 0.0);
            let z_axis = Vec3::new(0.0, 0.0, 1.0);
            let radar_rot = Mat3::from_rows(x_axis, y_axis, z_axis);
            let camera_rot = Mat3::from_rows(x_axis, -z_axis, y_axis);
            ViewFrame {
                radar: Pose::new(radar_rot, Vec3::new(0.0, radius_m, 0.0)),
                camera: Pose::new(camera_rot, Vec3::new(0.0, 0.0, radius_m)),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset construction.

/// Everything the synthetic dataset builder needs: scene randomization
/// ranges, sensor layout, radar settings, and output resolutions.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub samples: usize,
    pub views: usize,
    pub seed: u64,
    pub kinds: Vec<ShapeKind>,
    /// Uniform per-axis shape extents, meters.
    pub size_range_m: (f64, f64),
    /// Largest planar offset of the object center from the world origin.
    pub max_offset_m: f64,
    /// Radius of the sensor ring.
    pub ring_radius_m: f64,
    /// Half-extent of the Cartesian crop around the object, sensor frame.
    pub crop_half_m: f64,
    /// Surface sampling density of the dense ground-truth cloud, points/m².
    pub surface_density: f64,
    /// Point scatterers per object fed to the radar synthesizer.
    pub reflectors: usize,
    /// Stored ground-truth cloud size.
    pub cloud_points: usize,
    pub image_size: usize,
    pub focal_px: f64,
    /// Cartesian intensity grid (vertical, horizontal, range cells).
    pub map_grid: [usize; 3],
    pub radar: RadarConfig,
    pub noise_snr_db: Option<f64>,
    pub specular_cutoff_deg: Option<f64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            samples: 10,
            views: 4,
            seed: 0,
            kinds: vec![ShapeKind::Box, ShapeKind::LBox, ShapeKind::CarLike],
            size_range_m: (0.3, 0.9),
            max_offset_m: 0.15,
            ring_radius_m: 1.8,
            crop_half_m: 1.0,
            surface_density: 20_000.0,
            reflectors: 192,
            cloud_points: 1024,
            image_size: 128,
            focal_px: 128.0,
            map_grid: [64, 64, 256],
            radar: RadarConfig::default(),
            noise_snr_db: None,
            specular_cutoff_deg: None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> PipelineResult<()> {
        if self.samples == 0 || self.views == 0 {
            return Err(invalid("dataset_spec", "need at least one sample and one view"));
        }
        if self.kinds.is_empty() {
            return Err(invalid("dataset_spec", "need at least one shape kind"));
        }
        if !(self.size_range_m.0 > 0.0 && self.size_range_m.1 >= self.size_range_m.0) {
            return Err(invalid("dataset_spec", format!("bad size range {:?}", self.size_range_m)));
        }
        if self.ring_radius_m <= self.crop_half_m || self.crop_half_m <= 0.0 {
            return Err(invalid(
                "dataset_spec",
                "ring radius must exceed the positive crop half-extent",
            ));
        }
        let farthest = self.ring_radius_m + self.crop_half_m;
        if farthest >= self.radar.unambiguous_range_m() {
            return Err(invalid(
                "dataset_spec",
                format!(
                    "crop reaches {farthest} m but the radar is unambiguous only to {} m",
                    self.radar.unambiguous_range_m()
                ),
            ));
        }
        if self.reflectors == 0 || self.cloud_points == 0 || self.image_size == 0 {
            return Err(invalid("dataset_spec", "counts must be positive"));
        }
        self.radar.validate().map_err(PipelineError::Radar)
    }

    /// Sensor-frame Cartesian crop for the intensity maps.
    pub fn crop_bounds(&self) -> Bounds3 {
        let h = self.crop_half_m;
        let r = self.ring_radius_m;
        Bounds3::new(Vec3::new(-h, r - h, -h), Vec3::new(h, r + h, h))
            .expect("validated crop extents are ordered")
    }

    /// Middle elevation rows of the aperture, as many as the radar's
    /// snapshot count.
    pub fn snapshot_rows(&self) -> Vec<usize> {
        let start = (self.radar.elevation_elements - self.radar.snapshot_count) / 2;
        (start..start + self.radar.snapshot_count).collect()
    }
}

struct BuiltSample {
    record: SampleRecord,
    cloud: PointCloud,
    views: Vec<(crate::radar::IntensityMap, DepthImage)>,
}

fn build_sample(spec: &DatasetSpec, frames: &[ViewFrame], index: usize) -> PipelineResult<BuiltSample> {
    let mut rng = stream(spec.seed, "sample", index as u64);
    let kind = spec.kinds[rng.gen_range(0..spec.kinds.len())];
    let (lo, hi) = spec.size_range_m;
    let size = Vec3::new(rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let offset = Vec3::new(
        rng.gen_range(-spec.max_offset_m..=spec.max_offset_m),
        rng.gen_range(-spec.max_offset_m..=spec.max_offset_m),
        0.0,
    );
    let pose = Pose::new(Mat3::rotation_z(angle), offset);

    let dense = generate_shape(kind, size, spec.surface_density, rng.gen())?;
    let world = PointCloud::new(dense.points.iter().map(|&p| pose.apply(p)).collect());
    let cloud = crate::geometry::resample(&world, spec.cloud_points, rng.gen())?;
    let scatterers = crate::geometry::resample(&world, spec.reflectors, rng.gen())?;

    let impairments =
        Impairments { noise_snr_db: spec.noise_snr_db, specular_cutoff_deg: spec.specular_cutoff_deg };
    let snapshot_rows = spec.snapshot_rows();
    let mut views = Vec::with_capacity(spec.views);
    let mut view_paths = Vec::with_capacity(spec.views);
    let id = format!("sample_{index:03}");
    for (v, frame) in frames.iter().enumerate() {
        let scene = ReflectorScene {
            reflectors: scatterers.points.iter().map(|&p| Reflector::new(p, 1.0)).collect(),
            sensor_pose: frame.radar,
        };
        let raw = synthesize_raw_with(&scene, &spec.radar, &impairments, rng.gen())?;
        let snap = select_snapshots(&raw, &snapshot_rows, &spec.radar)?;
        let polar = process_fft(&snap, &spec.radar, frame.radar)?;
        let map = to_cartesian(&polar, spec.crop_bounds(), spec.map_grid)?;

        let camera = CameraModel::new(spec.focal_px, spec.image_size, spec.image_size, frame.camera)?;
        let depth = render_depth(&world, &camera)?;
        views.push((map, depth));
        view_paths.push((format!("{id}/view_{v}.vol"), format!("{id}/view_{v}.pgm")));
    }

    let record = SampleRecord {
        id: id.clone(),
        kind: kind.to_string(),
        size,
        pose,
        cloud_path: format!("{id}/cloud.ply"),
        views: view_paths,
    };
    Ok(BuiltSample { record, cloud, views })
}

/// Synthesizes the full dataset under `out_dir` and returns the manifest
/// path. Each sample is generated completely in memory before any of its
/// files are written, so a failure never leaves a half-written sample.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> PipelineResult<PathBuf> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| file_err(out_dir, e))?;
    let frames = view_frames(spec.views, spec.ring_radius_m);
    let mut records = Vec::with_capacity(spec.samples);
    for index in 0..spec.samples {
        let built = build_sample(spec, &frames, index)?;
        let sample_dir = out_dir.join(&built.record.id);
        fs::create_dir_all(&sample_dir).map_err(|e| file_err(&sample_dir, e))?;
        for ((map, depth), (vol_rel, pgm_rel)) in built.views.iter().zip(&built.record.views) {
            io::write_volume(&out_dir.join(vol_rel), map)?;
            io::write_depth(&out_dir.join(pgm_rel), depth)?;
        }
        io::write_ply(&out_dir.join(&built.record.cloud_path), &built.cloud)?;
        records.push(built.record);
    }
    let manifest = out_dir.join("manifest.tsv");
    io::write_manifest(&manifest, &records, spec.views)?;
    Ok(manifest)
}

fn manifest_base(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn read_records(manifest: &Path) -> PipelineResult<(Vec<SampleRecord>, usize, PathBuf)> {
    let (records, k) = io::read_manifest(manifest)?;
    if records.is_empty() {
        return Err(invalid("manifest", format!("{} lists no samples", manifest.display())));
    }
    Ok((records, k, manifest_base(manifest)))
}

// ---------------------------------------------------------------------------
// Training configuration shared by both stages.

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Train up to this epoch index (exclusive).
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// A checkpoint is written after every multiple of this many epochs.
    pub checkpoint_every: usize,
    /// First epoch of this run; nonzero requires `resume_from`.
    pub start_epoch: usize,
    pub resume_from: Option<PathBuf>,
    /// Drop the discriminator entirely (reconstruction-only training).
    pub no_discriminator: bool,
    /// Drop the volume-overlap term from the optimized objective.
    pub no_iou: bool,
    pub out_dir: PathBuf,
}

impl TrainConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            seed: 0,
            learning_rate: 2e-4,
            checkpoint_every: 25,
            start_epoch: 0,
            resume_from: None,
            no_discriminator: false,
            no_iou: false,
            out_dir: out_dir.into(),
        }
    }

    fn validate(&self) -> PipelineResult<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(invalid("train_config", "epochs, batch size, and cadence must be positive"));
        }
        if self.start_epoch >= self.epochs {
            return Err(invalid(
                "train_config",
                format!("start epoch {} is not below the target {}", self.start_epoch, self.epochs),
            ));
        }
        if self.start_epoch > 0 && self.resume_from.is_none() {
            return Err(invalid("train_config", "resuming mid-run needs a checkpoint"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub epochs_run: usize,
}

/// Appends (or starts) the tab-separated loss log.
struct LossLog {
    path: PathBuf,
    buffer: String,
}

impl LossLog {
    fn create(path: PathBuf, header: &str, fresh: bool) -> PipelineResult<Self> {
        let mut log = LossLog { path, buffer: String::new() };
        if fresh {
            log.buffer.push_str(header);
            log.buffer.push('\n');
        } else if !log.path.exists() {
            return Err(invalid("loss_log", format!("cannot resume: {} is missing", log.path.display())));
        }
        Ok(log)
    }

    fn line(&mut self, fields: &[String]) {
        self.buffer.push_str(&fields.join("\t"));
        self.buffer.push('\n');
    }

    fn flush(&self, fresh: bool) -> PipelineResult<()> {
        if fresh {
            io::write_bytes(&self.path, self.buffer.as_bytes())?;
        } else {
            let mut existing = io::read_bytes(&self.path)?;
            existing.extend_from_slice(self.buffer.as_bytes());
            io::write_bytes(&self.path, &existing)?;
        }
        Ok(())
    }
}

fn epoch_order(seed: u64, purpose: &str, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream(seed, purpose, epoch as u64));
    order
}

fn finite_or_abort(value: f32, stage: &'static str, epoch: usize, batch: usize) -> PipelineResult<f64> {
    if value.is_finite() {
        Ok(value as f64)
    } else {
        Err(PipelineError::NonFinite { stage, epoch, batch })
    }
}

// ---------------------------------------------------------------------------
// Stage-1 training.

/// Loads every (intensity map, ground-truth depth) view pair referenced by
/// the manifest, already normalized into network tensors.
pub fn load_stage1_pairs(
    manifest: &Path,
    cfg: &Stage1Config,
) -> PipelineResult<Vec<(Tensor<f32>, Tensor<f32>)>> {
    let (records, _, base) = read_records(manifest)?;
    let mut pairs = Vec::new();
    for record in &records {
        for (vol_rel, pgm_rel) in &record.views {
            let map = io::read_volume(&base.join(vol_rel))?;
            let depth = io::read_depth(&base.join(pgm_rel))?;
            pairs.push((prepare_map::<f32>(&map, cfg)?, prepare_target::<f32>(&depth, cfg)?));
        }
    }
    Ok(pairs)
}

fn stage1_params<'a>(
    gen: &'a mut Stage1Generator<f32>,
    disc: &'a mut Stage1Discriminator<f32>,
) -> Vec<&'a mut Parameter<f32>> {
    let mut params = gen.parameters_mut();
    params.extend(disc.parameters_mut());
    params
}

/// Alternating least-squares GAN training of the volume-to-depth stage:
/// one discriminator step then one generator step per batch. Writes a
/// per-epoch loss log (`epoch  L_D  L_GAN  L_1  L_p`) and periodic
/// checkpoints holding both networks and their optimizer moments.
pub fn train_stage1(
    manifest: &Path,
    net_cfg: &Stage1Config,
    cfg: &TrainConfig,
) -> PipelineResult<TrainOutcome> {
    cfg.validate()?;
    let pairs = load_stage1_pairs(manifest, net_cfg)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| file_err(&cfg.out_dir, e))?;

    let mut gen = Stage1Generator::<f32>::new(net_cfg.clone(), cfg.seed)?;
    let mut disc = Stage1Discriminator::<f32>::new(net_cfg.clone(), cfg.seed ^ 0x5a5a)?;
    let perceptual = PerceptualNet::for_config(net_cfg);
    let weights = Stage1Weights::default();

    let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let mut opt_g = Adam::new(cfg.learning_rate);
    let mut opt_d = Adam::new(cfg.learning_rate);
    if let Some(ckpt) = &cfg.resume_from {
        let stored = io::read_checkpoint(ckpt)?;
        io::load_checkpoint_into(&stored, &mut stage1_params(&mut gen, &mut disc))?;
        let done = (cfg.start_epoch * steps_per_epoch) as u32;
        opt_g.set_timestep(done);
        opt_d.set_timestep(done);
    }

    let fresh = cfg.start_epoch == 0;
    let mut log = LossLog::create(cfg.out_dir.join("stage1_log.tsv"), "epoch\tL_D\tL_GAN\tL_1\tL_p", fresh)?;

    for epoch in cfg.start_epoch..cfg.epochs {
        let order = epoch_order(cfg.seed, "stage1-epoch", epoch, pairs.len());
        let (mut sum_d, mut sum_gan, mut sum_l1, mut sum_p) = (0.0, 0.0, 0.0, 0.0);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // Discriminator step against detached generator output.
            let mut fakes = Vec::with_capacity(chunk.len());
            for &i in chunk {
                fakes.push(generate(&mut gen, &pairs[i].0, FwdCtx::train_frozen())?);
            }
            let mut g: Graph<f32> = Graph::new();
            let mut totals = Vec::with_capacity(chunk.len());
            for (j, &i) in chunk.iter().enumerate() {
                let loss = stage1_d_loss(&mut g, &mut disc, &pairs[i].0, &pairs[i].1, &fakes[j])?;
                totals.push(loss.total);
            }
            let mean = g.mean_of(&totals)?;
            sum_d += chunk.len() as f64
                * finite_or_abort(g.value(mean).item()?, "stage1 discriminator", epoch, batch)?;
            g.backward(mean)?;
            clear_grads(disc.parameters_mut());
            harvest_grads(&g, disc.parameters_mut());
            opt_d.step(disc.parameters_mut())?;

            // Generator step.
            let mut g: Graph<f32> = Graph::new();
            let mut totals = Vec::with_capacity(chunk.len());
            let mut parts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let loss =
                    stage1_g_loss(&mut g, &mut gen, &mut disc, &perceptual, weights, &pairs[i].0, &pairs[i].1)?;
                totals.push(loss.total);
                parts.push((loss.adversarial, loss.l1, loss.perceptual));
            }
            let mean = g.mean_of(&totals)?;
            finite_or_abort(g.value(mean).item()?, "stage1 generator", epoch, batch)?;
            for &(adv, l1, p) in &parts {
                sum_gan += g.value(adv).item()? as f64;
                sum_l1 += g.value(l1).item()? as f64;
                sum_p += g.value(p).item()? as f64;
            }
            g.backward(mean)?;
            clear_grads(gen.parameters_mut());
            harvest_grads(&g, gen.parameters_mut());
            opt_g.step(gen.parameters_mut())?;
        }

        let n = pairs.len() as f64;
        log.line(&[
            epoch.to_string(),
            (sum_d / n).to_string(),
            (sum_gan / n).to_string(),
            (sum_l1 / n).to_string(),
            (sum_p / n).to_string(),
        ]);
        if (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
            let path = cfg.out_dir.join(format!("stage1_epoch_{:04}.ckpt", epoch + 1));
            write_stage1_checkpoint(&path, &gen, &disc)?;
        }
    }

    let final_checkpoint = cfg.out_dir.join("stage1_final.ckpt");
    write_stage1_checkpoint(&final_checkpoint, &gen, &disc)?;
    log.flush(fresh)?;
    Ok(TrainOutcome { final_checkpoint, log_path: log.path, epochs_run: cfg.epochs - cfg.start_epoch })
}

fn write_stage1_checkpoint(
    path: &Path,
    gen: &Stage1Generator<f32>,
    disc: &Stage1Discriminator<f32>,
) -> PipelineResult<()> {
    let mut params = gen.parameters();
    params.extend(disc.parameters());
    io::write_checkpoint(path, &params)?;
    Ok(())
}

/// Rebuilds the depth generator from a training checkpoint; discriminator
/// entries in the file are ignored.
pub fn load_stage1_generator(cfg: &Stage1Config, ckpt: &Path) -> PipelineResult<Stage1Generator<f32>> {
    let mut gen = Stage1Generator::<f32>::new(cfg.clone(), 0)?;
    let stored = io::read_checkpoint(ckpt)?;
    io::load_checkpoint_into(&stored, &mut gen.parameters_mut())?;
    Ok(gen)
}

// ---------------------------------------------------------------------------
// Coarse-cloud assembly for stage 2.

/// Synthetic degradation of ground-truth depths: each view is hit with the
/// given probability, and a hit multiplies its depths by a smooth ±amplitude
/// bias field — emulating systematically wrong depth predictions.
#[derive(Debug, Clone)]
pub struct Corruption {
    pub probability: f64,
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for Corruption {
    fn default() -> Self {
        Self { probability: 0.2, amplitude: 0.1, seed: 0 }
    }
}

fn corrupt_depth(img: &DepthImage, corruption: &Corruption, view_index: u64) -> DepthImage {
    let mut rng = stream(corruption.seed, "depth-bias", view_index);
    let (fu, fv) = (rng.gen_range(1..=2) as f64, rng.gen_range(1..=2) as f64);
    let (pu, pv) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    let mut out = img.clone();
    for v in 0..img.height {
        for u in 0..img.width {
            let d = out.depth[v * img.width + u];
            if d <= 0.0 {
                continue;
            }
            let su = (std::f64::consts::TAU * (fu * (u as f64 + 0.5) / img.width as f64 + pu)).sin();
            let sv = (std::f64::consts::TAU * (fv * (v as f64 + 0.5) / img.height as f64 + pv)).sin();
            out.depth[v * img.width + u] = d * (1.0 + corruption.amplitude * su * sv);
        }
    }
    out
}

/// Where the coarse input clouds for stage 2 come from.
pub enum CoarseSource {
    /// Back-project the stored ground-truth depths, optionally corrupted —
    /// lets stage 2 train before stage 1 has.
    GroundTruthDepths { corruption: Option<Corruption> },
    /// Run a trained depth generator on the stored intensity maps.
    Stage1 { config: Stage1Config, checkpoint: PathBuf },
}

/// Union of back-projections; the depths already carry their camera poses,
/// so the views fuse in the world frame.
pub fn fuse_views(depths: &[DepthImage]) -> PipelineResult<PointCloud> {
    let views = ViewSet {
        views: depths.iter().map(|d| (backproject(d), Pose::IDENTITY)).collect(),
    };
    let cloud = union_views(&views)?;
    if cloud.is_empty() {
        return Err(invalid("fuse_views", "every depth image was empty"));
    }
    Ok(cloud)
}

/// Per-sample (coarse cloud, ground-truth cloud) training pairs.
pub fn load_stage2_pairs(
    manifest: &Path,
    source: &CoarseSource,
) -> PipelineResult<Vec<(PointCloud, PointCloud)>> {
    let (records, k, base) = read_records(manifest)?;
    let mut stage1 = match source {
        CoarseSource::Stage1 { config, checkpoint } => Some((load_stage1_generator(config, checkpoint)?, config.clone())),
        CoarseSource::GroundTruthDepths { .. } => None,
    };
    let mut pairs = Vec::with_capacity(records.len());
    for (r, record) in records.iter().enumerate() {
        let truth = io::read_ply(&base.join(&record.cloud_path))?;
        let mut depths = Vec::with_capacity(record.views.len());
        for (v, (vol_rel, pgm_rel)) in record.views.iter().enumerate() {
            let stored = io::read_depth(&base.join(pgm_rel))?;
            let depth = match (&mut stage1, source) {
                (Some((gen, cfg)), _) => {
                    let map = io::read_volume(&base.join(vol_rel))?;
                    predict_depth(gen, cfg, &map, &stored.camera)?
                }
                (None, CoarseSource::GroundTruthDepths { corruption }) => match corruption {
                    Some(c) => {
                        let index = (r * k + v) as u64;
                        if stream(c.seed, "corrupt-gate", index).gen_bool(c.probability) {
                            corrupt_depth(&stored, c, index)
                        } else {
                            stored
                        }
                    }
                    None => stored,
                },
                (None, CoarseSource::Stage1 { .. }) => unreachable!("stage1 source always loads a generator"),
            };
            depths.push(depth);
        }
        pairs.push((fuse_views(&depths)?, truth));
    }
    Ok(pairs)
}

/// Runs the depth generator on one intensity map and rebuilds a metric
/// depth image under the view's camera.
pub fn predict_depth(
    gen: &mut Stage1Generator<f32>,
    cfg: &Stage1Config,
    map: &crate::radar::IntensityMap,
    camera: &CameraModel,
) -> PipelineResult<DepthImage> {
    let input = prepare_map::<f32>(map, cfg)?;
    let out = generate(gen, &input, FwdCtx::eval())?;
    let depth: Vec<f64> = out.data().iter().map(|&v| v as f64 * cfg.max_range_m).collect();
    let [h, w] = cfg.image_hw();
    DepthImage::new(w, h, depth, camera.clone()).map_err(PipelineError::Geometry)
}

// ---------------------------------------------------------------------------
// Stage-2 training.

fn stage2_log_header(no_discriminator: bool) -> &'static str {
    if no_discriminator {
        "epoch\tL_GAN\tL_cf\tL_iou"
    } else {
        "epoch\tL_D\tL_GAN\tL_cf\tL_iou"
    }
}

/// Adversarial (or reconstruction-only) training of the cloud refiner.
/// Coarse inputs come from `source`; the log reports the chamfer term and
/// the volume-overlap metric every epoch even when the overlap term is not
/// optimized.
pub fn train_stage2(
    manifest: &Path,
    net_cfg: &Stage2Config,
    cfg: &TrainConfig,
    source: &CoarseSource,
) -> PipelineResult<TrainOutcome> {
    cfg.validate()?;
    let pairs = load_stage2_pairs(manifest, source)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| file_err(&cfg.out_dir, e))?;

    let mut gen = Stage2Generator::<f32>::new(net_cfg.clone(), cfg.seed)?;
    let mut disc = if cfg.no_discriminator {
        None
    } else {
        Some(Stage2Discriminator::<f32>::new(net_cfg.clone(), cfg.seed ^ 0x5a5a)?)
    };
    let weights = Stage2Weights {
        chamfer: Stage2Weights::default().chamfer,
        iou: if cfg.no_iou { 0.0 } else { Stage2Weights::default().iou },
    };

    let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let mut opt_g = Adam::new(cfg.learning_rate);
    let mut opt_d = Adam::new(cfg.learning_rate);
    if let Some(ckpt) = &cfg.resume_from {
        let stored = io::read_checkpoint(ckpt)?;
        let mut params = gen.parameters_mut();
        if let Some(d) = &mut disc {
            params.extend(d.parameters_mut());
        }
        io::load_checkpoint_into(&stored, &mut params)?;
        let done = (cfg.start_epoch * steps_per_epoch) as u32;
        opt_g.set_timestep(done);
        opt_d.set_timestep(done);
    }

    let fresh = cfg.start_epoch == 0;
    let mut log =
        LossLog::create(cfg.out_dir.join("stage2_log.tsv"), stage2_log_header(cfg.no_discriminator), fresh)?;

    for epoch in cfg.start_epoch..cfg.epochs {
        let order = epoch_order(cfg.seed, "stage2-epoch", epoch, pairs.len());
        let (mut sum_d, mut sum_gan, mut sum_cf, mut sum_iou) = (0.0, 0.0, 0.0, 0.0);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if let Some(d) = &mut disc {
                let mut g: Graph<f32> = Graph::new();
                let mut totals = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let fake = gen.refine(&pairs[i].0)?;
                    let loss = stage2_d_loss(&mut g, d, &pairs[i].0, &pairs[i].1, &fake)?;
                    totals.push(loss.total);
                }
                let mean = g.mean_of(&totals)?;
                sum_d += chunk.len() as f64
                    * finite_or_abort(g.value(mean).item()?, "stage2 discriminator", epoch, batch)?;
                g.backward(mean)?;
                clear_grads(d.parameters_mut());
                harvest_grads(&g, d.parameters_mut());
                opt_d.step(d.parameters_mut())?;
            }

            let mut g: Graph<f32> = Graph::new();
            let mut totals = Vec::with_capacity(chunk.len());
            let mut parts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let loss = stage2_g_loss(&mut g, &gen, disc.as_ref(), weights, &pairs[i].0, &pairs[i].1)?;
                totals.push(loss.total);
                parts.push((loss.adversarial, loss.chamfer, loss.predicted, i));
            }
            let mean = g.mean_of(&totals)?;
            finite_or_abort(g.value(mean).item()?, "stage2 generator", epoch, batch)?;
            for &(adv, cf, predicted, i) in &parts {
                sum_gan += g.value(adv).item()? as f64;
                sum_cf += g.value(cf).item()? as f64;
                // The overlap metric is logged even when it is not part of
                // the optimized objective.
                let cloud = crate::metrics::cloud_from_tensor_pub(g.value(predicted))?;
                sum_iou += 1.0 - cloud_iou(&cloud, &pairs[i].1, net_cfg.voxel_size_m)?;
            }
            g.backward(mean)?;
            clear_grads(gen.parameters_mut());
            harvest_grads(&g, gen.parameters_mut());
            opt_g.step(gen.parameters_mut())?;
        }

        let n = pairs.len() as f64;
        let mut fields = vec![epoch.to_string()];
        if !cfg.no_discriminator {
            fields.push((sum_d / n).to_string());
        }
        fields.push((sum_gan / n).to_string());
        fields.push((sum_cf / n).to_string());
        fields.push((sum_iou / n).to_string());
        log.line(&fields);
        if (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
            let path = cfg.out_dir.join(format!("stage2_epoch_{:04}.ckpt", epoch + 1));
            write_stage2_checkpoint(&path, &gen, disc.as_ref())?;
        }
    }

    let final_checkpoint = cfg.out_dir.join("stage2_final.ckpt");
    write_stage2_checkpoint(&final_checkpoint, &gen, disc.as_ref())?;
    log.flush(fresh)?;
    Ok(TrainOutcome { final_checkpoint, log_path: log.path, epochs_run: cfg.epochs - cfg.start_epoch })
}

fn write_stage2_checkpoint(
    path: &Path,
    gen: &Stage2Generator<f32>,
    disc: Option<&Stage2Discriminator<f32>>,
) -> PipelineResult<()> {
    let mut params = gen.parameters();
    if let Some(d) = disc {
        params.extend(d.parameters());
    }
    io::write_checkpoint(path, &params)?;
    Ok(())
}

pub fn load_stage2_generator(cfg: &Stage2Config, ckpt: &Path) -> PipelineResult<Stage2Generator<f32>> {
    let mut gen = Stage2Generator::<f32>::new(cfg.clone(), 0)?;
    let stored = io::read_checkpoint(ckpt)?;
    io::load_checkpoint_into(&stored, &mut gen.parameters_mut())?;
    Ok(gen)
}

// ---------------------------------------------------------------------------
// End-to-end reconstruction and evaluation.

pub struct Reconstruction {
    pub refined: PointCloud,
    pub coarse: PointCloud,
    pub depths: Vec<DepthImage>,
}

/// Full two-stage inference on one sample: every view's intensity map →
/// predicted depth → back-projection, fused and refined.
pub fn reconstruct(
    base: &Path,
    record: &SampleRecord,
    stage1: (&mut Stage1Generator<f32>, &Stage1Config),
    stage2: &Stage2Generator<f32>,
) -> PipelineResult<Reconstruction> {
    if record.views.is_empty() {
        return Err(invalid("reconstruct", format!("sample {} has no views", record.id)));
    }
    let (gen1, cfg1) = stage1;
    let mut depths = Vec::with_capacity(record.views.len());
    for (vol_rel, pgm_rel) in &record.views {
        let map = io::read_volume(&base.join(vol_rel))?;
        let camera = io::read_depth(&base.join(pgm_rel))?.camera;
        depths.push(predict_depth(gen1, cfg1, &map, &camera)?);
    }
    let coarse = fuse_views(&depths)?;
    let refined = stage2.refine(&coarse)?;
    Ok(Reconstruction { refined, coarse, depths })
}

pub struct Evaluation {
    /// Per-sample metric rows in manifest order.
    pub reports: Vec<(String, MetricReport)>,
    /// Mean/std/median block over all samples.
    pub aggregate: String,
}

impl Evaluation {
    /// Human-readable report: one `[id]` block per sample plus the
    /// aggregate block.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (id, report) in &self.reports {
            out.push_str(&format!("[{id}]\n"));
            out.push_str(&report.to_key_values());
        }
        out.push_str("[aggregate]\n");
        out.push_str(&self.aggregate);
        out
    }
}

fn evaluate_clouds(
    samples: Vec<(String, PointCloud, PointCloud)>,
    tau: f64,
    voxel_size: f64,
) -> PipelineResult<Evaluation> {
    let mut reports = Vec::with_capacity(samples.len());
    for (id, predicted, truth) in samples {
        reports.push((id, evaluate_pair(&predicted, &truth, tau, voxel_size)?));
    }
    let aggregate = aggregate_reports(&reports.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>());
    Ok(Evaluation { reports, aggregate })
}

/// Refines coarse clouds from `source` and scores them against the stored
/// ground truth.
pub fn evaluate_stage2(
    manifest: &Path,
    source: &CoarseSource,
    gen: &Stage2Generator<f32>,
    tau: f64,
) -> PipelineResult<Evaluation> {
    let (records, _, _) = read_records(manifest)?;
    let pairs = load_stage2_pairs(manifest, source)?;
    let samples = records
        .iter()
        .zip(pairs)
        .map(|(r, (coarse, truth))| Ok((r.id.clone(), gen.refine(&coarse)?, truth)))
        .collect::<PipelineResult<Vec<_>>>()?;
    evaluate_clouds(samples, tau, gen.cfg.voxel_size_m)
}

/// Scores full two-stage reconstructions of every manifest sample.
pub fn evaluate_pipeline(
    manifest: &Path,
    stage1: (&mut Stage1Generator<f32>, &Stage1Config),
    stage2: &Stage2Generator<f32>,
    tau: f64,
) -> PipelineResult<Evaluation> {
    let (records, _, base) = read_records(manifest)?;
    let (gen1, cfg1) = stage1;
    let mut samples = Vec::with_capacity(records.len());
    for record in &records {
        let rec = reconstruct(&base, record, (gen1, cfg1), stage2)?;
        let truth = io::read_ply(&base.join(&record.cloud_path))?;
        samples.push((record.id.clone(), rec.refined, truth));
    }
    evaluate_clouds(samples, tau, stage2.cfg.voxel_size_m)
}

/// Key/value summary of a dataset, for quick inspection.
pub fn dataset_summary(manifest: &Path) -> PipelineResult<BTreeMap<String, String>> {
    let (records, k, _) = read_records(manifest)?;
    let mut kinds: BTreeMap<String, usize> = BTreeMap::new();
    for r in &records {
        *kinds.entry(r.kind.clone()).or_default() += 1;
    }
    let mut out = BTreeMap::new();
    out.insert("samples".into(), records.len().to_string());
    out.insert("views_per_sample".into(), k.to_string());
    for (kind, count) in kinds {
        out.insert(format!("kind.{kind}"), count.to_string());
    }
    Ok(out)
}
