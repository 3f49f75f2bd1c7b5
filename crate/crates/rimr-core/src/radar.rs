//! FMCW radar synthesis and processing: point-scatterer returns on a virtual
//! antenna array, the range/azimuth/elevation FFT chain, polar-to-Cartesian
//! resampling, and sparse snapshot selection.
//!
//! Sensor frame convention: y is boresight, x right, z up. For a unit
//! line-of-sight direction `d`, `d.x = sin(azimuth)·cos(elevation)` and
//! `d.z = sin(elevation)`, so spatial phases use the components directly.

use crate::geometry::{Pose, Vec3};
use crate::rng::stream;
use num_complex::Complex;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use thiserror::Error;

/// Speed of light, m/s.
pub const C: f64 = 299_792_458.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RadarError {
    #[error("reflector at range {range:.3} m exceeds the unambiguous range {max:.3} m")]
    BeyondUnambiguousRange { range: f64, max: f64 },
    #[error("reflector at non-positive range {range:.3e} m")]
    NonPositiveRange { range: f64 },
    #[error("negative reflectivity {value}")]
    NegativeReflectivity { value: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid snapshot indices: {0}")]
    InvalidSnapshots(String),
    #[error("cube extents {actual:?} exceed FFT sizes {max:?}")]
    CubeTooLarge { actual: [usize; 3], max: [usize; 3] },
    #[error("degenerate cartesian bounds: {0}")]
    DegenerateBounds(String),
    #[error("expected a {expected:?}-frame map")]
    WrongFrame { expected: Frame },
}

pub type RadarResult<T> = Result<T, RadarError>;

/// Chirp and array parameters of the virtual sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarConfig {
    pub carrier_freq_hz: f64,
    pub bandwidth_hz: f64,
    pub samples_per_chirp: usize,
    pub azimuth_elements: usize,
    pub elevation_elements: usize,
    pub element_spacing_m: f64,
    pub snapshot_count: usize,
    /// FFT sizes along (elevation, azimuth, range).
    pub fft_sizes: [usize; 3],
}

impl Default for RadarConfig {
    fn default() -> Self {
        let carrier = 60e9;
        RadarConfig {
            carrier_freq_hz: carrier,
            bandwidth_hz: 4e9,
            samples_per_chirp: 256,
            azimuth_elements: 64,
            elevation_elements: 64,
            element_spacing_m: C / carrier / 2.0,
            snapshot_count: 2,
            fft_sizes: [64, 64, 256],
        }
    }
}

impl RadarConfig {
    pub fn validate(&self) -> RadarResult<()> {
        if self.carrier_freq_hz <= 0.0 || self.bandwidth_hz <= 0.0 || self.element_spacing_m <= 0.0 {
            return Err(RadarError::InvalidConfig("frequencies and spacing must be positive".into()));
        }
        if self.samples_per_chirp == 0 || self.azimuth_elements == 0 || self.elevation_elements == 0 {
            return Err(RadarError::InvalidConfig("extents must be non-zero".into()));
        }
        if self.fft_sizes[2] != self.samples_per_chirp {
            return Err(RadarError::InvalidConfig(format!(
                "range FFT size {} must equal samples per chirp {}",
                self.fft_sizes[2], self.samples_per_chirp
            )));
        }
        if self.elevation_elements > self.fft_sizes[0] || self.azimuth_elements > self.fft_sizes[1] {
            return Err(RadarError::InvalidConfig("element counts exceed FFT sizes".into()));
        }
        if self.snapshot_count == 0 || self.snapshot_count > self.elevation_elements {
            return Err(RadarError::InvalidConfig(format!(
                "snapshot count {} outside 1..={}",
                self.snapshot_count, self.elevation_elements
            )));
        }
        Ok(())
    }

    pub fn wavelength_m(&self) -> f64 {
        C / self.carrier_freq_hz
    }

    /// Range bin width: c / (2·bandwidth).
    pub fn range_resolution_m(&self) -> f64 {
        C / (2.0 * self.bandwidth_hz)
    }

    /// Largest range representable without fast-time aliasing.
    pub fn unambiguous_range_m(&self) -> f64 {
        self.range_resolution_m() * self.samples_per_chirp as f64
    }

    /// Polar bin of a sensor-frame direction and range, if inside coverage.
    /// Returns (elevation, azimuth, range) indices into the shifted map.
    pub fn polar_bin(&self, pos: Vec3) -> Option<[usize; 3]> {
        let r = pos.norm();
        if pos.y <= 0.0 || r <= 0.0 {
            return None;
        }
        let d = pos.scaled(1.0 / r);
        let [el_n, az_n, _] = self.fft_sizes;
        // Spatial frequency s/λ·component, mapped through the shifted FFT axis.
        let fract = self.element_spacing_m / self.wavelength_m();
        let el = (fract * d.z * el_n as f64 + el_n as f64 / 2.0).round();
        let az = (fract * d.x * az_n as f64 + az_n as f64 / 2.0).round();
        let rb = (r / self.range_resolution_m()).round();
        if el < 0.0 || az < 0.0 || rb < 0.0 {
            return None;
        }
        let (el, az, rb) = (el as usize, az as usize, rb as usize);
        if el >= el_n || az >= az_n || rb >= self.samples_per_chirp {
            return None;
        }
        Some([el, az, rb])
    }
}

/// Point scatterer in the scene frame. The optional surface normal enables
/// specularity culling during synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Reflector {
    pub position: Vec3,
    pub reflectivity: f64,
    pub normal: Option<Vec3>,
}

impl Reflector {
    pub fn new(position: Vec3, reflectivity: f64) -> Self {
        Reflector { position, reflectivity, normal: None }
    }

    pub fn with_normal(position: Vec3, reflectivity: f64, normal: Vec3) -> Self {
        Reflector { position, reflectivity, normal: Some(normal) }
    }
}

/// Reflectors plus the rigid transform taking scene coordinates into the
/// sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectorScene {
    pub reflectors: Vec<Reflector>,
    pub sensor_pose: Pose,
}

/// Complex returns indexed (elevation element, azimuth element, fast-time
/// sample), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataCube {
    pub elevation: usize,
    pub azimuth: usize,
    pub samples: usize,
    pub data: Vec<Complex<f64>>,
}

impl RawDataCube {
    pub fn zeros(elevation: usize, azimuth: usize, samples: usize) -> Self {
        RawDataCube { elevation, azimuth, samples, data: vec![Complex::new(0.0, 0.0); elevation * azimuth * samples] }
    }

    pub fn at(&self, q: usize, p: usize, n: usize) -> Complex<f64> {
        self.data[(q * self.azimuth + p) * self.samples + n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Polar,
    Cartesian,
}

/// Axis-aligned sensor-frame box for Cartesian resampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds3 {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds3 {
    pub fn new(min: Vec3, max: Vec3) -> RadarResult<Self> {
        if !(min.x < max.x && min.y < max.y && min.z < max.z) {
            return Err(RadarError::DegenerateBounds(format!("min {min:?} not strictly below max {max:?}")));
        }
        Ok(Bounds3 { min, max })
    }
}

/// Non-negative intensity volume. Polar maps are indexed (elevation bin,
/// azimuth bin, range bin); Cartesian maps (z, x, y) over `bounds`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityMap {
    pub frame: Frame,
    /// Extents in index order.
    pub dims: [usize; 3],
    pub values: Vec<f32>,
    pub config: RadarConfig,
    pub sensor_pose: Pose,
    /// Present on Cartesian maps only.
    pub bounds: Option<Bounds3>,
}

impl IntensityMap {
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    pub fn argmax(&self) -> [usize; 3] {
        let mut best = (0usize, f32::NEG_INFINITY);
        for (i, &v) in self.values.iter().enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        let (d1, d2) = (self.dims[1], self.dims[2]);
        [best.0 / (d1 * d2), best.0 / d2 % d1, best.0 % d2]
    }

    pub fn max_value(&self) -> f32 {
        self.values.iter().cloned().fold(0.0, f32::max)
    }
}

/// Optional degradations applied during synthesis; all off by default so the
/// closed-form oracles stay exact.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Impairments {
    /// Additive complex Gaussian noise at this signal-to-noise ratio.
    pub noise_snr_db: Option<f64>,
    /// Drop reflectors whose normal deviates from the line of sight towards
    /// the sensor by more than this angle, degrees.
    pub specular_cutoff_deg: Option<f64>,
}

fn checked_sensor_positions(scene: &ReflectorScene, cfg: &RadarConfig) -> RadarResult<Vec<(Vec3, f64, Option<Vec3>)>> {
    let max_range = cfg.unambiguous_range_m();
    let mut out = Vec::with_capacity(scene.reflectors.len());
    for r in &scene.reflectors {
        if r.reflectivity < 0.0 {
            return Err(RadarError::NegativeReflectivity { value: r.reflectivity });
        }
        let pos = scene.sensor_pose.apply(r.position);
        let range = pos.norm();
        if range <= 1e-9 {
            return Err(RadarError::NonPositiveRange { range });
        }
        if range >= max_range {
            return Err(RadarError::BeyondUnambiguousRange { range, max: max_range });
        }
        // Normals rotate with the scene; translation does not apply.
        let normal = r.normal.map(|n| scene.sensor_pose.rot.apply(n));
        out.push((pos, r.reflectivity, normal));
    }
    Ok(out)
}

/// Superposes the returns of every reflector on the virtual array. For a
/// reflector at sensor-frame range R with unit direction d, element (p, q)
/// and fast-time sample n accumulate
/// `a·exp(j2π[(2·B·R)/(c·N)·n + (2·f_c·R)/c + (s/λ)(p·d.x + q·d.z)])`.
pub fn synthesize_raw(scene: &ReflectorScene, cfg: &RadarConfig) -> RadarResult<RawDataCube> {
    synthesize_raw_with(scene, cfg, &Impairments::default(), 0)
}

pub fn synthesize_raw_with(
    scene: &ReflectorScene,
    cfg: &RadarConfig,
    impairments: &Impairments,
    seed: u64,
) -> RadarResult<RawDataCube> {
    cfg.validate()?;
    let reflectors = checked_sensor_positions(scene, cfg)?;
    let mut cube = RawDataCube::zeros(cfg.elevation_elements, cfg.azimuth_elements, cfg.samples_per_chirp);
    let fract = cfg.element_spacing_m / cfg.wavelength_m();
    let cutoff = impairments.specular_cutoff_deg.map(|d| d.to_radians());
    let two_pi = std::f64::consts::TAU;

    let mut vec_n = vec![Complex::new(0.0, 0.0); cfg.samples_per_chirp];
    let mut vec_p = vec![Complex::new(0.0, 0.0); cfg.azimuth_elements];
    let mut vec_q = vec![Complex::new(0.0, 0.0); cfg.elevation_elements];
    for (pos, reflectivity, normal) in reflectors {
        if let (Some(cutoff), Some(n)) = (cutoff, normal) {
            // Range was checked positive, so the line of sight is defined.
            let to_sensor = pos.scaled(-1.0).normalized();
            if n.norm() > 1e-12 {
                let deviation = n.normalized().dot(to_sensor).clamp(-1.0, 1.0).acos();
                if deviation > cutoff {
                    continue;
                }
            }
        }
        let range = pos.norm();
        let d = pos.scaled(1.0 / range);
        let beat_freq = 2.0 * cfg.bandwidth_hz * range / (C * cfg.samples_per_chirp as f64);
        let carrier_phase = 2.0 * cfg.carrier_freq_hz * range / C;
        // The phase separates over (n, p, q); build the three factor vectors
        // once and take their outer product.
        for (n, v) in vec_n.iter_mut().enumerate() {
            *v = Complex::from_polar(1.0, two_pi * (beat_freq * n as f64 + carrier_phase));
        }
        for (p, v) in vec_p.iter_mut().enumerate() {
            *v = Complex::from_polar(1.0, two_pi * fract * p as f64 * d.x);
        }
        for (q, v) in vec_q.iter_mut().enumerate() {
            *v = Complex::from_polar(1.0, two_pi * fract * q as f64 * d.z);
        }
        let mut idx = 0;
        for vq in &vec_q {
            for vp in &vec_p {
                let qp = reflectivity * vq * vp;
                for vn in &vec_n {
                    cube.data[idx] += qp * vn;
                    idx += 1;
                }
            }
        }
    }

    if let Some(snr_db) = impairments.noise_snr_db {
        let power = cube.data.iter().map(|c| c.norm_sqr()).sum::<f64>() / cube.data.len() as f64;
        if power > 0.0 {
            let sigma = (power / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
            let mut rng = stream(seed, "radar-noise", 0);
            for c in &mut cube.data {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                *c += Complex::new(re * sigma, im * sigma);
            }
        }
    }
    Ok(cube)
}

/// Rotates the half-spectrum so bin 0 lands at index n/2 and bins map
/// monotonically to spatial frequency.
fn fftshift_axis(data: &mut [Complex<f64>], dims: [usize; 3], axis: usize) {
    let n = dims[axis];
    let half = n / 2;
    let mut scratch = vec![Complex::new(0.0, 0.0); n];
    let (outer, inner): (usize, usize) = match axis {
        0 => (1, dims[1] * dims[2]),
        1 => (dims[0], dims[2]),
        _ => (dims[0] * dims[1], 1),
    };
    let stride = inner * n;
    for o in 0..outer {
        for i in 0..inner {
            let base = o * stride + i;
            for k in 0..n {
                scratch[k] = data[base + ((k + half) % n) * inner];
            }
            for k in 0..n {
                data[base + k * inner] = scratch[k];
            }
        }
    }
}

fn fft_axis(planner: &mut FftPlanner<f64>, data: &mut [Complex<f64>], dims: [usize; 3], axis: usize) {
    let n = dims[axis];
    let fft = planner.plan_fft_forward(n);
    let (outer, inner): (usize, usize) = match axis {
        0 => (1, dims[1] * dims[2]),
        1 => (dims[0], dims[2]),
        _ => (dims[0] * dims[1], 1),
    };
    let stride = inner * n;
    let mut line = vec![Complex::new(0.0, 0.0); n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * stride + i;
            if inner == 1 {
                fft.process(&mut data[base..base + n]);
            } else {
                for k in 0..n {
                    line[k] = data[base + k * inner];
                }
                fft.process(&mut line);
                for k in 0..n {
                    data[base + k * inner] = line[k];
                }
            }
        }
    }
}

/// Three-axis DFT of the raw cube (zero-padded to the configured FFT sizes),
/// magnitude, with the two angle axes rotated so bin centers map
/// monotonically to angle.
pub fn process_fft(raw: &RawDataCube, cfg: &RadarConfig, sensor_pose: Pose) -> RadarResult<IntensityMap> {
    cfg.validate()?;
    let dims = cfg.fft_sizes;
    if raw.elevation > dims[0] || raw.azimuth > dims[1] || raw.samples > dims[2] {
        return Err(RadarError::CubeTooLarge {
            actual: [raw.elevation, raw.azimuth, raw.samples],
            max: dims,
        });
    }
    let mut grid = vec![Complex::new(0.0, 0.0); dims[0] * dims[1] * dims[2]];
    for q in 0..raw.elevation {
        for p in 0..raw.azimuth {
            for n in 0..raw.samples {
                grid[(q * dims[1] + p) * dims[2] + n] = raw.at(q, p, n);
            }
        }
    }
    let mut planner = FftPlanner::new();
    fft_axis(&mut planner, &mut grid, dims, 2);
    fft_axis(&mut planner, &mut grid, dims, 1);
    fft_axis(&mut planner, &mut grid, dims, 0);
    fftshift_axis(&mut grid, dims, 0);
    fftshift_axis(&mut grid, dims, 1);
    let values = grid.iter().map(|c| c.norm() as f32).collect();
    Ok(IntensityMap { frame: Frame::Polar, dims, values, config: cfg.clone(), sensor_pose, bounds: None })
}

/// Resamples a polar map onto a Cartesian voxel grid in the sensor frame by
/// nearest-neighbor lookup; voxels outside polar coverage read 0.
pub fn to_cartesian(map: &IntensityMap, bounds: Bounds3, grid: [usize; 3]) -> RadarResult<IntensityMap> {
    if map.frame != Frame::Polar {
        return Err(RadarError::WrongFrame { expected: Frame::Polar });
    }
    if grid.iter().any(|&g| g == 0) {
        return Err(RadarError::DegenerateBounds("zero-cell grid".into()));
    }
    let cell = [
        (bounds.max.z - bounds.min.z) / grid[0] as f64,
        (bounds.max.x - bounds.min.x) / grid[1] as f64,
        (bounds.max.y - bounds.min.y) / grid[2] as f64,
    ];
    let mut values = vec![0f32; grid[0] * grid[1] * grid[2]];
    let mut idx = 0;
    for iz in 0..grid[0] {
        let z = bounds.min.z + (iz as f64 + 0.5) * cell[0];
        for ix in 0..grid[1] {
            let x = bounds.min.x + (ix as f64 + 0.5) * cell[1];
            for iy in 0..grid[2] {
                let y = bounds.min.y + (iy as f64 + 0.5) * cell[2];
                if let Some([el, az, rb]) = map.config.polar_bin(Vec3::new(x, y, z)) {
                    values[idx] = map.at(el, az, rb);
                }
                idx += 1;
            }
        }
    }
    Ok(IntensityMap {
        frame: Frame::Cartesian,
        dims: grid,
        values,
        config: map.config.clone(),
        sensor_pose: map.sensor_pose,
        bounds: Some(bounds),
    })
}

/// Keeps only the listed elevation rows, zero-filling the rest so downstream
/// FFT shapes are unchanged.
pub fn select_snapshots(raw: &RawDataCube, indices: &[usize], cfg: &RadarConfig) -> RadarResult<RawDataCube> {
    if indices.len() != cfg.snapshot_count {
        return Err(RadarError::InvalidSnapshots(format!(
            "expected {} indices, got {}",
            cfg.snapshot_count,
            indices.len()
        )));
    }
    let mut seen = vec![false; raw.elevation];
    for &i in indices {
        if i >= raw.elevation {
            return Err(RadarError::InvalidSnapshots(format!("index {i} outside 0..{}", raw.elevation)));
        }
        if seen[i] {
            return Err(RadarError::InvalidSnapshots(format!("duplicate index {i}")));
        }
        seen[i] = true;
    }
    let mut out = RawDataCube::zeros(raw.elevation, raw.azimuth, raw.samples);
    let row = raw.azimuth * raw.samples;
    for &q in indices {
        out.data[q * row..(q + 1) * row].copy_from_slice(&raw.data[q * row..(q + 1) * row]);
    }
    Ok(out)
}
