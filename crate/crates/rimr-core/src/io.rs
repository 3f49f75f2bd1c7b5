//! File codecs: intensity volumes, parameter checkpoints, ascii point
//! clouds, 16-bit depth images with camera sidecars, dataset manifests, and
//! key=value configs. Every decoder rejects truncated or malformed input
//! with the offending offset; writers emit canonical bytes so round-trips
//! are bit-exact.

use crate::geometry::{CameraModel, DepthImage, Mat3, PointCloud, Pose, Vec3};
use crate::nn::Parameter;
use crate::radar::{Bounds3, Frame, IntensityMap, RadarConfig};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("line {line}: {message}")]
    Text { line: usize, message: String },
}

pub type IoResult<T> = Result<T, IoError>;

fn fmt_err(offset: usize, message: impl Into<String>) -> IoError {
    IoError::Format { offset, message: message.into() }
}

fn text_err(line: usize, message: impl Into<String>) -> IoError {
    IoError::Text { line, message: message.into() }
}

/// Sequential reader over a byte slice that tracks its offset for error
/// reporting.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> IoResult<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(IoError::Truncated { expected: self.pos + n, actual: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> IoResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> IoResult<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> IoResult<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> IoResult<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_vec(&mut self, n: usize) -> IoResult<Vec<f32>> {
        let b = self.take(4 * n)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn finish(&self) -> IoResult<()> {
        if self.pos != self.bytes.len() {
            return Err(fmt_err(self.pos, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn pose_to_f32(pose: &Pose) -> [f32; 12] {
    let mut out = [0f32; 12];
    for (i, row) in pose.rot.rows.iter().enumerate() {
        out[3 * i] = row[0] as f32;
        out[3 * i + 1] = row[1] as f32;
        out[3 * i + 2] = row[2] as f32;
    }
    out[9] = pose.trans.x as f32;
    out[10] = pose.trans.y as f32;
    out[11] = pose.trans.z as f32;
    out
}

fn pose_from_f32(v: &[f32; 12]) -> Pose {
    let rot = Mat3 {
        rows: [
            [v[0] as f64, v[1] as f64, v[2] as f64],
            [v[3] as f64, v[4] as f64, v[5] as f64],
            [v[6] as f64, v[7] as f64, v[8] as f64],
        ],
    };
    Pose::new(rot, Vec3::new(v[9] as f64, v[10] as f64, v[11] as f64))
}

// ---------------------------------------------------------------------------
// Intensity volumes.

const VOL_MAGIC: &[u8; 7] = b"RIMRVOL";
const VOL_VERSION: u16 = 1;

fn config_kv(map: &IntensityMap) -> String {
    let c = &map.config;
    let mut s = String::new();
    s.push_str(&format!("carrier_freq_hz={}\n", c.carrier_freq_hz));
    s.push_str(&format!("bandwidth_hz={}\n", c.bandwidth_hz));
    s.push_str(&format!("samples_per_chirp={}\n", c.samples_per_chirp));
    s.push_str(&format!("azimuth_elements={}\n", c.azimuth_elements));
    s.push_str(&format!("elevation_elements={}\n", c.elevation_elements));
    s.push_str(&format!("element_spacing_m={}\n", c.element_spacing_m));
    s.push_str(&format!("snapshot_count={}\n", c.snapshot_count));
    s.push_str(&format!("fft_sizes={},{},{}\n", c.fft_sizes[0], c.fft_sizes[1], c.fft_sizes[2]));
    if let Some(b) = map.bounds {
        s.push_str(&format!("bounds_min={},{},{}\n", b.min.x, b.min.y, b.min.z));
        s.push_str(&format!("bounds_max={},{},{}\n", b.max.x, b.max.y, b.max.z));
    }
    s
}

fn kv_lines(text: &str) -> IoResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| text_err(i + 1, format!("expected key=value, got {line:?}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn kv_get<'m>(kv: &'m BTreeMap<String, String>, key: &str) -> IoResult<&'m str> {
    kv.get(key).map(|s| s.as_str()).ok_or_else(|| text_err(0, format!("missing key {key}")))
}

fn parse_num<T: std::str::FromStr>(s: &str, key: &str) -> IoResult<T> {
    s.parse().map_err(|_| text_err(0, format!("bad value for {key}: {s:?}")))
}

fn parse_triple_f64(s: &str, key: &str) -> IoResult<[f64; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(text_err(0, format!("{key} needs three comma-separated values")));
    }
    Ok([parse_num(parts[0], key)?, parse_num(parts[1], key)?, parse_num(parts[2], key)?])
}

pub fn encode_volume(map: &IntensityMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(VOL_MAGIC);
    out.extend_from_slice(&VOL_VERSION.to_le_bytes());
    out.push(match map.frame {
        Frame::Polar => 0,
        Frame::Cartesian => 1,
    });
    for &d in &map.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &map.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let kv = config_kv(map);
    out.extend_from_slice(&(kv.len() as u32).to_le_bytes());
    out.extend_from_slice(kv.as_bytes());
    for v in pose_to_f32(&map.sensor_pose) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> IoResult<IntensityMap> {
    let mut c = Cursor::new(bytes);
    let magic = c.take(VOL_MAGIC.len())?;
    if magic != VOL_MAGIC {
        return Err(fmt_err(0, format!("bad magic {magic:?}, expected {VOL_MAGIC:?}")));
    }
    let version = c.u16()?;
    if version != VOL_VERSION {
        return Err(fmt_err(7, format!("unsupported version {version}")));
    }
    let frame = match c.u8()? {
        0 => Frame::Polar,
        1 => Frame::Cartesian,
        other => return Err(fmt_err(9, format!("unknown frame tag {other}"))),
    };
    let dims = [c.u32()? as usize, c.u32()? as usize, c.u32()? as usize];
    let count = dims[0]
        .checked_mul(dims[1])
        .and_then(|p| p.checked_mul(dims[2]))
        .ok_or_else(|| fmt_err(10, "extent overflow"))?;
    let values = c.f32_vec(count)?;
    let kv_len = c.u32()? as usize;
    let kv_offset = c.pos;
    let kv_bytes = c.take(kv_len)?;
    let kv_text = std::str::from_utf8(kv_bytes).map_err(|e| fmt_err(kv_offset, e.to_string()))?;
    let kv = kv_lines(kv_text)?;
    let fft = {
        let parts = parse_triple_f64(kv_get(&kv, "fft_sizes")?, "fft_sizes")?;
        [parts[0] as usize, parts[1] as usize, parts[2] as usize]
    };
    let config = RadarConfig {
        carrier_freq_hz: parse_num(kv_get(&kv, "carrier_freq_hz")?, "carrier_freq_hz")?,
        bandwidth_hz: parse_num(kv_get(&kv, "bandwidth_hz")?, "bandwidth_hz")?,
        samples_per_chirp: parse_num(kv_get(&kv, "samples_per_chirp")?, "samples_per_chirp")?,
        azimuth_elements: parse_num(kv_get(&kv, "azimuth_elements")?, "azimuth_elements")?,
        elevation_elements: parse_num(kv_get(&kv, "elevation_elements")?, "elevation_elements")?,
        element_spacing_m: parse_num(kv_get(&kv, "element_spacing_m")?, "element_spacing_m")?,
        snapshot_count: parse_num(kv_get(&kv, "snapshot_count")?, "snapshot_count")?,
        fft_sizes: fft,
    };
    let bounds = match (kv.get("bounds_min"), kv.get("bounds_max")) {
        (Some(lo), Some(hi)) => {
            let lo = parse_triple_f64(lo, "bounds_min")?;
            let hi = parse_triple_f64(hi, "bounds_max")?;
            let b = Bounds3::new(Vec3::new(lo[0], lo[1], lo[2]), Vec3::new(hi[0], hi[1], hi[2]))
                .map_err(|e| fmt_err(kv_offset, e.to_string()))?;
            Some(b)
        }
        _ => None,
    };
    if frame == Frame::Cartesian && bounds.is_none() {
        return Err(fmt_err(kv_offset, "cartesian volume without bounds"));
    }
    let mut pose = [0f32; 12];
    for v in &mut pose {
        *v = c.f32()?;
    }
    c.finish()?;
    Ok(IntensityMap { frame, dims, values, config, sensor_pose: pose_from_f32(&pose), bounds })
}

// ---------------------------------------------------------------------------
// Parameter checkpoints.

const CKPT_MAGIC: &[u8; 8] = b"RIMRCKPT";
const CKPT_VERSION: u16 = 1;

pub fn encode_checkpoint(params: &[&Parameter<f32>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in p.moment1.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in p.moment2.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> IoResult<Vec<Parameter<f32>>> {
    let mut c = Cursor::new(bytes);
    let magic = c.take(CKPT_MAGIC.len())?;
    if magic != CKPT_MAGIC {
        return Err(fmt_err(0, format!("bad magic {magic:?}, expected {CKPT_MAGIC:?}")));
    }
    let version = c.u16()?;
    if version != CKPT_VERSION {
        return Err(fmt_err(8, format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name_offset = c.pos;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|e| fmt_err(name_offset, e.to_string()))?
            .to_string();
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let offset = c.pos;
        let value = c.f32_vec(len)?;
        let m1 = c.f32_vec(len)?;
        let m2 = c.f32_vec(len)?;
        let tensor = |data: Vec<f32>| {
            crate::tensor::Tensor::new(shape.clone(), data).map_err(|e| fmt_err(offset, e.to_string()))
        };
        out.push(Parameter::from_state(name, tensor(value)?, tensor(m1)?, tensor(m2)?));
    }
    c.finish()?;
    Ok(out)
}

/// Copies checkpointed values and moments into matching live parameters by
/// name; every live parameter must be found with an identical shape.
pub fn load_checkpoint_into(stored: &[Parameter<f32>], live: &mut [&mut Parameter<f32>]) -> IoResult<()> {
    let index: BTreeMap<&str, &Parameter<f32>> = stored.iter().map(|p| (p.name.as_str(), p)).collect();
    for target in live.iter_mut() {
        let found = index
            .get(target.name.as_str())
            .ok_or_else(|| text_err(0, format!("checkpoint is missing parameter {}", target.name)))?;
        if found.value.shape() != target.value.shape() {
            return Err(text_err(
                0,
                format!(
                    "parameter {} has shape {:?} in the checkpoint but {:?} live",
                    target.name,
                    found.value.shape(),
                    target.value.shape()
                ),
            ));
        }
        target.value = found.value.clone();
        target.moment1 = found.moment1.clone();
        target.moment2 = found.moment2.clone();
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Ascii point clouds.

pub fn encode_ply(cloud: &PointCloud) -> Vec<u8> {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    s.push_str(&format!("element vertex {}\n", cloud.len()));
    s.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in &cloud.points {
        s.push_str(&format!("{:.8e} {:.8e} {:.8e}\n", p.x, p.y, p.z));
    }
    s.into_bytes()
}

pub fn decode_ply(bytes: &[u8]) -> IoResult<PointCloud> {
    let text = std::str::from_utf8(bytes).map_err(|e| fmt_err(e.valid_up_to(), "not UTF-8"))?;
    if !text.ends_with('\n') {
        return Err(text_err(text.lines().count(), "missing trailing newline"));
    }
    let lines: Vec<&str> = text.lines().collect();
    const HEADER: [&str; 7] = [
        "ply",
        "format ascii 1.0",
        "element vertex ",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ];
    let mut count = 0usize;
    for (i, want) in HEADER.iter().enumerate() {
        let got = *lines.get(i).ok_or_else(|| text_err(i + 1, format!("missing header line {want:?}")))?;
        if i == 2 {
            let n = got
                .strip_prefix(want)
                .ok_or_else(|| text_err(i + 1, format!("expected vertex element, got {got:?}")))?;
            count = parse_num(n, "vertex count").map_err(|_| text_err(i + 1, format!("bad count {n:?}")))?;
        } else if got != *want {
            return Err(text_err(i + 1, format!("expected {want:?}, got {got:?}")));
        }
    }
    if lines.len() != HEADER.len() + count {
        return Err(text_err(
            lines.len(),
            format!("declared {count} vertices but found {}", lines.len() - HEADER.len()),
        ));
    }
    let mut points = Vec::with_capacity(count);
    for (i, line) in lines[HEADER.len()..].iter().enumerate() {
        let lineno = HEADER.len() + i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(text_err(lineno, format!("expected 3 coordinates, got {}", fields.len())));
        }
        let x: f64 = parse_num(fields[0], "x").map_err(|_| text_err(lineno, "bad x"))?;
        let y: f64 = parse_num(fields[1], "y").map_err(|_| text_err(lineno, "bad y"))?;
        let z: f64 = parse_num(fields[2], "z").map_err(|_| text_err(lineno, "bad z"))?;
        points.push(Vec3::new(x, y, z));
    }
    Ok(PointCloud::new(points))
}

// ---------------------------------------------------------------------------
// Depth images: 16-bit PGM at 1 mm per unit plus a camera sidecar.

/// Meters per quantization unit.
pub const DEPTH_UNIT_M: f64 = 0.001;
pub const DEPTH_MAX_UNITS: u16 = u16::MAX;

pub fn encode_pgm(width: usize, height: usize, samples: &[u16]) -> Vec<u8> {
    assert_eq!(samples.len(), width * height, "sample count must match extents");
    let mut out = format!("P5\n{width} {height}\n{DEPTH_MAX_UNITS}\n").into_bytes();
    for &s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

pub fn decode_pgm(bytes: &[u8]) -> IoResult<(usize, usize, Vec<u16>)> {
    // Header: three whitespace-separated tokens after the magic, then a
    // single separator byte before the big-endian payload.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> IoResult<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::Truncated { expected: start + 1, actual: bytes.len() });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(bytes)?;
    if magic != "P5" {
        return Err(fmt_err(0, format!("bad magic {magic:?}, expected \"P5\"")));
    }
    let width: usize = parse_num(&token(bytes)?, "width")?;
    let height: usize = parse_num(&token(bytes)?, "height")?;
    let maxval: u32 = parse_num(&token(bytes)?, "maxval")?;
    if maxval != DEPTH_MAX_UNITS as u32 {
        return Err(fmt_err(pos, format!("unsupported maxval {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fmt_err(pos, "missing separator before payload"));
    }
    pos += 1;
    let need = width * height * 2;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(IoError::Truncated { expected: pos + need, actual: bytes.len() });
    }
    if payload.len() > need {
        return Err(fmt_err(pos + need, format!("{} trailing bytes", payload.len() - need)));
    }
    let samples = payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((width, height, samples))
}

pub fn depth_to_units(depth_m: f64) -> u16 {
    (depth_m / DEPTH_UNIT_M).round().clamp(0.0, DEPTH_MAX_UNITS as f64) as u16
}

fn camera_kv(cam: &CameraModel) -> BTreeMap<String, String> {
    let mut kv = BTreeMap::new();
    kv.insert("focal_px".into(), format!("{}", cam.focal_px));
    kv.insert("width".into(), format!("{}", cam.width));
    kv.insert("height".into(), format!("{}", cam.height));
    let r = cam.pose.rot.rows;
    kv.insert(
        "rotation".into(),
        r.iter().flat_map(|row| row.iter()).map(|v| v.to_string()).collect::<Vec<_>>().join(","),
    );
    kv.insert(
        "translation".into(),
        format!("{},{},{}", cam.pose.trans.x, cam.pose.trans.y, cam.pose.trans.z),
    );
    kv
}

fn camera_from_kv(kv: &BTreeMap<String, String>) -> IoResult<CameraModel> {
    let focal: f64 = parse_num(kv_get(kv, "focal_px")?, "focal_px")?;
    let width: usize = parse_num(kv_get(kv, "width")?, "width")?;
    let height: usize = parse_num(kv_get(kv, "height")?, "height")?;
    let rot_fields: Vec<&str> = kv_get(kv, "rotation")?.split(',').collect();
    if rot_fields.len() != 9 {
        return Err(text_err(0, "rotation needs nine comma-separated values"));
    }
    let mut r = [[0f64; 3]; 3];
    for (i, f) in rot_fields.iter().enumerate() {
        r[i / 3][i % 3] = parse_num(f, "rotation")?;
    }
    let t = parse_triple_f64(kv_get(kv, "translation")?, "translation")?;
    let pose = Pose::new(Mat3 { rows: r }, Vec3::new(t[0], t[1], t[2]));
    CameraModel::new(focal, width, height, pose).map_err(|e| text_err(0, e.to_string()))
}

// ---------------------------------------------------------------------------
// Config files: `key = value`, `#` comments, and a mandatory `# end` trailer
// so truncation is always detectable.

pub fn encode_config(kv: &BTreeMap<String, String>) -> Vec<u8> {
    let mut s = String::new();
    for (k, v) in kv {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s.push_str("# end\n");
    s.into_bytes()
}

pub fn decode_config(bytes: &[u8]) -> IoResult<BTreeMap<String, String>> {
    let text = std::str::from_utf8(bytes).map_err(|e| fmt_err(e.valid_up_to(), "not UTF-8"))?;
    if !text.ends_with("# end\n") {
        return Err(text_err(text.lines().count(), "missing `# end` trailer"));
    }
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| text_err(i + 1, format!("expected key = value, got {line:?}")))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(text_err(i + 1, "empty key"));
        }
        if out.insert(key.to_string(), v.trim().to_string()).is_some() {
            return Err(text_err(i + 1, format!("duplicate key {key}")));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dataset manifests.

/// One dataset sample: object description plus relative paths to its stored
/// artifacts. Per-view sensor and camera poses live inside the referenced
/// volume and sidecar files.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub kind: String,
    pub size: Vec3,
    pub pose: Pose,
    pub cloud_path: String,
    /// Per view: (intensity volume path, ground-truth depth path).
    pub views: Vec<(String, String)>,
}

pub fn encode_manifest(records: &[SampleRecord], views_per_sample: usize) -> Vec<u8> {
    let mut s = format!("#rimr-manifest v1 samples={} k={}\n", records.len(), views_per_sample);
    for r in records {
        assert_eq!(r.views.len(), views_per_sample, "record {} has wrong view count", r.id);
        let rot = r
            .pose
            .rot
            .rows
            .iter()
            .flat_map(|row| row.iter())
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut fields = vec![
            r.id.clone(),
            r.kind.clone(),
            format!("{},{},{}", r.size.x, r.size.y, r.size.z),
            format!("{rot},{},{},{}", r.pose.trans.x, r.pose.trans.y, r.pose.trans.z),
            r.cloud_path.clone(),
        ];
        for (vol, depth) in &r.views {
            fields.push(vol.clone());
            fields.push(depth.clone());
        }
        s.push_str(&fields.join("\t"));
        s.push('\n');
    }
    s.into_bytes()
}

pub fn decode_manifest(bytes: &[u8]) -> IoResult<(Vec<SampleRecord>, usize)> {
    let text = std::str::from_utf8(bytes).map_err(|e| fmt_err(e.valid_up_to(), "not UTF-8"))?;
    if !text.ends_with('\n') {
        return Err(text_err(text.lines().count(), "missing trailing newline"));
    }
    let mut lines = text.lines().enumerate();
    let (samples, k) = match lines.next() {
        Some((_, header)) => {
            let rest = header
                .strip_prefix("#rimr-manifest v1 ")
                .ok_or_else(|| text_err(1, format!("bad header {header:?}")))?;
            let mut samples = None;
            let mut k = None;
            for part in rest.split_whitespace() {
                if let Some(v) = part.strip_prefix("samples=") {
                    samples = Some(parse_num::<usize>(v, "samples").map_err(|_| text_err(1, "bad samples"))?);
                } else if let Some(v) = part.strip_prefix("k=") {
                    k = Some(parse_num::<usize>(v, "k").map_err(|_| text_err(1, "bad k"))?);
                }
            }
            match (samples, k) {
                (Some(s), Some(k)) => (s, k),
                _ => return Err(text_err(1, "header must carry samples= and k=")),
            }
        }
        None => return Err(text_err(1, "empty manifest")),
    };
    let mut records = Vec::with_capacity(samples);
    for (i, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        let expected = 5 + 2 * k;
        if fields.len() != expected {
            return Err(text_err(i + 1, format!("expected {expected} fields, got {}", fields.len())));
        }
        let size = parse_triple_f64(fields[2], "size").map_err(|_| text_err(i + 1, "bad size"))?;
        let pose_fields: Vec<&str> = fields[3].split(',').collect();
        if pose_fields.len() != 12 {
            return Err(text_err(i + 1, "pose needs twelve comma-separated values"));
        }
        let mut p = [0f64; 12];
        for (j, f) in pose_fields.iter().enumerate() {
            p[j] = parse_num(f, "pose").map_err(|_| text_err(i + 1, "bad pose"))?;
        }
        let rot = Mat3 { rows: [[p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], p[8]]] };
        let mut views = Vec::with_capacity(k);
        for v in 0..k {
            views.push((fields[5 + 2 * v].to_string(), fields[6 + 2 * v].to_string()));
        }
        records.push(SampleRecord {
            id: fields[0].to_string(),
            kind: fields[1].to_string(),
            size: Vec3::new(size[0], size[1], size[2]),
            pose: Pose::new(rot, Vec3::new(p[9], p[10], p[11])),
            cloud_path: fields[4].to_string(),
            views,
        });
    }
    if records.len() != samples {
        return Err(text_err(
            records.len() + 1,
            format!("header declares {samples} samples but {} records follow", records.len()),
        ));
    }
    Ok((records, k))
}

// ---------------------------------------------------------------------------
// File wrappers.

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.to_path_buf(), source }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> IoResult<()> {
    let mut f = std::fs::File::create(path).map_err(file_err(path))?;
    f.write_all(bytes).map_err(file_err(path))
}

pub fn read_bytes(path: &Path) -> IoResult<Vec<u8>> {
    std::fs::read(path).map_err(file_err(path))
}

pub fn write_volume(path: &Path, map: &IntensityMap) -> IoResult<()> {
    write_bytes(path, &encode_volume(map))
}

pub fn read_volume(path: &Path) -> IoResult<IntensityMap> {
    decode_volume(&read_bytes(path)?)
}

pub fn write_checkpoint(path: &Path, params: &[&Parameter<f32>]) -> IoResult<()> {
    write_bytes(path, &encode_checkpoint(params))
}

pub fn read_checkpoint(path: &Path) -> IoResult<Vec<Parameter<f32>>> {
    decode_checkpoint(&read_bytes(path)?)
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> IoResult<()> {
    write_bytes(path, &encode_ply(cloud))
}

pub fn read_ply(path: &Path) -> IoResult<PointCloud> {
    decode_ply(&read_bytes(path)?)
}

fn sidecar_path(pgm: &Path) -> PathBuf {
    let mut os = pgm.as_os_str().to_owned();
    os.push(".cam");
    PathBuf::from(os)
}

/// Writes the quantized depth raster and the camera sidecar next to it.
pub fn write_depth(path: &Path, img: &DepthImage) -> IoResult<()> {
    let units: Vec<u16> = img.depth.iter().map(|&d| depth_to_units(d)).collect();
    write_bytes(path, &encode_pgm(img.width, img.height, &units))?;
    write_bytes(&sidecar_path(path), &encode_config(&camera_kv(&img.camera)))
}

pub fn read_depth(path: &Path) -> IoResult<DepthImage> {
    let (width, height, units) = decode_pgm(&read_bytes(path)?)?;
    let camera = camera_from_kv(&decode_config(&read_bytes(&sidecar_path(path))?)?)?;
    if camera.width != width || camera.height != height {
        return Err(text_err(0, format!(
            "sidecar extents {}x{} disagree with raster {width}x{height}",
            camera.width, camera.height
        )));
    }
    let depth = units.iter().map(|&u| u as f64 * DEPTH_UNIT_M).collect();
    DepthImage::new(width, height, depth, camera).map_err(|e| text_err(0, e.to_string()))
}

pub fn write_manifest(path: &Path, records: &[SampleRecord], k: usize) -> IoResult<()> {
    write_bytes(path, &encode_manifest(records, k))
}

pub fn read_manifest(path: &Path) -> IoResult<(Vec<SampleRecord>, usize)> {
    decode_manifest(&read_bytes(path)?)
}

pub fn write_config_file(path: &Path, kv: &BTreeMap<String, String>) -> IoResult<()> {
    write_bytes(path, &encode_config(kv))
}

pub fn read_config_file(path: &Path) -> IoResult<BTreeMap<String, String>> {
    decode_config(&read_bytes(path)?)
}
