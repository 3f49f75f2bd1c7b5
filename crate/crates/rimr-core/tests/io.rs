//! Codec round-trips, malformed-input rejection, and truncation fuzzing for
//! every on-disk format.

use rand::Rng;
use rimr_core::geometry::{CameraModel, DepthImage, Mat3, PointCloud, Pose, Vec3};
use rimr_core::io::{
    decode_checkpoint, decode_config, decode_manifest, decode_pgm, decode_ply, decode_volume,
    encode_checkpoint, encode_config, encode_manifest, encode_pgm, encode_ply, encode_volume,
    load_checkpoint_into, read_depth, write_depth, IoError, SampleRecord, DEPTH_UNIT_M,
};
use rimr_core::nn::Parameter;
use rimr_core::radar::{Bounds3, Frame, IntensityMap, RadarConfig};
use rimr_core::rng::stream;
use rimr_core::tensor::Tensor;
use std::collections::BTreeMap;

fn small_config() -> RadarConfig {
    RadarConfig {
        carrier_freq_hz: 60e9,
        bandwidth_hz: 4e9,
        samples_per_chirp: 4,
        azimuth_elements: 3,
        elevation_elements: 2,
        element_spacing_m: 0.0025,
        snapshot_count: 1,
        fft_sizes: [2, 3, 4],
    }
}

fn random_volume(frame: Frame, seed: u64) -> IntensityMap {
    let mut rng = stream(seed, "io-volume", 0);
    let dims = [2usize, 3, 4];
    let values = (0..dims.iter().product::<usize>()).map(|_| rng.gen_range(0.0f32..10.0)).collect();
    let bounds = match frame {
        Frame::Polar => None,
        Frame::Cartesian => {
            Some(Bounds3::new(Vec3::new(-0.4, 0.2, -0.3), Vec3::new(0.4, 1.0, 0.3)).unwrap())
        }
    };
    IntensityMap {
        frame,
        dims,
        values,
        config: small_config(),
        sensor_pose: Pose::new(Mat3::rotation_z(0.31), Vec3::new(0.05, -1.25, 0.375)),
        bounds,
    }
}

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = stream(seed, "io-cloud", 0);
    PointCloud::new(
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                )
            })
            .collect(),
    )
}

fn random_params(seed: u64) -> Vec<Parameter<f32>> {
    let mut rng = stream(seed, "io-params", 0);
    let mut fill = |shape: Vec<usize>| {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
    };
    vec![
        Parameter::from_state("g.conv1.weight", fill(vec![4, 2, 3, 3]), fill(vec![4, 2, 3, 3]), fill(vec![4, 2, 3, 3])),
        Parameter::from_state("g.conv1.bias", fill(vec![4]), fill(vec![4]), fill(vec![4])),
        Parameter::from_state("d.fc.weight", fill(vec![5, 7]), fill(vec![5, 7]), fill(vec![5, 7])),
    ]
}

// ---------------------------------------------------------------------------
// Intensity volumes.

#[test]
fn volume_round_trip_is_bit_exact() {
    let map = random_volume(Frame::Polar, 11);
    let bytes = encode_volume(&map);
    let back = decode_volume(&bytes).unwrap();
    assert_eq!(back.frame, Frame::Polar);
    assert_eq!(back.dims, map.dims);
    assert_eq!(back.values, map.values);
    assert_eq!(back.config, map.config);
    assert_eq!(encode_volume(&back), bytes);
}

#[test]
fn cartesian_volume_round_trips_bounds_and_pose() {
    let map = random_volume(Frame::Cartesian, 12);
    let bytes = encode_volume(&map);
    let back = decode_volume(&bytes).unwrap();
    assert_eq!(back.frame, Frame::Cartesian);
    let (b0, b1) = (map.bounds.unwrap(), back.bounds.unwrap());
    assert_eq!(b0.min, b1.min);
    assert_eq!(b0.max, b1.max);
    // Pose is stored at f32 precision; compare after the same narrowing.
    for (r0, r1) in map.sensor_pose.rot.rows.iter().zip(back.sensor_pose.rot.rows.iter()) {
        for (a, b) in r0.iter().zip(r1.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }
    assert_eq!(encode_volume(&back), bytes);
}

#[test]
fn cartesian_volume_without_bounds_is_rejected() {
    let mut map = random_volume(Frame::Cartesian, 13);
    map.bounds = None;
    let bytes = encode_volume(&map);
    let err = decode_volume(&bytes).unwrap_err();
    assert!(err.to_string().contains("without bounds"), "{err}");
}

#[test]
fn volume_with_bad_magic_or_version_is_rejected() {
    let map = random_volume(Frame::Polar, 14);
    let mut bad_magic = encode_volume(&map);
    bad_magic[0] = b'X';
    let err = decode_volume(&bad_magic).unwrap_err();
    assert!(matches!(err, IoError::Format { offset: 0, .. }), "{err}");

    let mut bad_version = encode_volume(&map);
    bad_version[7] = 99;
    let err = decode_volume(&bad_version).unwrap_err();
    assert!(matches!(err, IoError::Format { offset: 7, .. }), "{err}");

    let mut bad_frame = encode_volume(&map);
    bad_frame[9] = 7;
    let err = decode_volume(&bad_frame).unwrap_err();
    assert!(matches!(err, IoError::Format { offset: 9, .. }), "{err}");
}

#[test]
fn volume_with_trailing_bytes_is_rejected() {
    let mut bytes = encode_volume(&random_volume(Frame::Polar, 15));
    bytes.push(0);
    let err = decode_volume(&bytes).unwrap_err();
    assert!(err.to_string().contains("trailing"), "{err}");
}

// ---------------------------------------------------------------------------
// Checkpoints.

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let params = random_params(21);
    let refs: Vec<&Parameter<f32>> = params.iter().collect();
    let bytes = encode_checkpoint(&refs);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.len(), params.len());
    for (a, b) in params.iter().zip(back.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.shape(), b.value.shape());
        assert_eq!(a.value.data(), b.value.data());
        assert_eq!(a.moment1.data(), b.moment1.data());
        assert_eq!(a.moment2.data(), b.moment2.data());
    }
    let back_refs: Vec<&Parameter<f32>> = back.iter().collect();
    assert_eq!(encode_checkpoint(&back_refs), bytes);
}

#[test]
fn checkpoint_restores_values_and_moments_by_name() {
    let stored = random_params(22);
    let mut live = random_params(23);
    // Same names/shapes, different numbers; order shuffled to prove matching
    // is by name.
    live.reverse();
    {
        let mut live_refs: Vec<&mut Parameter<f32>> = live.iter_mut().collect();
        load_checkpoint_into(&stored, &mut live_refs).unwrap();
    }
    for target in &live {
        let source = stored.iter().find(|p| p.name == target.name).unwrap();
        assert_eq!(target.value.data(), source.value.data());
        assert_eq!(target.moment1.data(), source.moment1.data());
        assert_eq!(target.moment2.data(), source.moment2.data());
    }
}

#[test]
fn checkpoint_load_rejects_missing_name_and_shape_mismatch() {
    let stored = random_params(24);
    let mut renamed = random_params(24);
    renamed[0].name = "g.conv9.weight".to_string();
    {
        let mut refs: Vec<&mut Parameter<f32>> = renamed.iter_mut().collect();
        let err = load_checkpoint_into(&stored, &mut refs).unwrap_err();
        assert!(err.to_string().contains("g.conv9.weight"), "{err}");
    }

    let mut reshaped = random_params(24);
    reshaped[1].value = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
    let mut refs: Vec<&mut Parameter<f32>> = reshaped.iter_mut().collect();
    let err = load_checkpoint_into(&stored, &mut refs).unwrap_err();
    assert!(err.to_string().contains("shape"), "{err}");
}

#[test]
fn checkpoint_with_bad_magic_is_rejected() {
    let params = random_params(25);
    let refs: Vec<&Parameter<f32>> = params.iter().collect();
    let mut bytes = encode_checkpoint(&refs);
    bytes[3] = b'x';
    let err = decode_checkpoint(&bytes).unwrap_err();
    assert!(matches!(err, IoError::Format { offset: 0, .. }), "{err}");
}

// ---------------------------------------------------------------------------
// Ascii point clouds.

#[test]
fn ply_round_trips_to_printed_precision() {
    let cloud = random_cloud(100, 31);
    let bytes = encode_ply(&cloud);
    let back = decode_ply(&bytes).unwrap();
    assert_eq!(back.len(), 100);
    for (a, b) in cloud.points.iter().zip(back.points.iter()) {
        for (va, vb) in [(a.x, b.x), (a.y, b.y), (a.z, b.z)] {
            // Nine significant digits of print precision.
            assert!((va - vb).abs() <= 1e-8 * va.abs().max(1.0), "{va} vs {vb}");
        }
    }
    // A second generation is exactly stable.
    assert_eq!(encode_ply(&back), bytes);
}

#[test]
fn ply_reports_line_numbers_for_malformed_files() {
    let good = String::from_utf8(encode_ply(&random_cloud(3, 32))).unwrap();

    let wrong_magic = good.replacen("ply", "plx", 1);
    let err = decode_ply(wrong_magic.as_bytes()).unwrap_err();
    assert!(matches!(err, IoError::Text { line: 1, .. }), "{err}");

    let bad_count = good.replacen("element vertex 3", "element vertex three", 1);
    let err = decode_ply(bad_count.as_bytes()).unwrap_err();
    assert!(matches!(err, IoError::Text { line: 3, .. }), "{err}");

    let missing_vertex = good.replacen("element vertex 3", "element vertex 4", 1);
    let err = decode_ply(missing_vertex.as_bytes()).unwrap_err();
    assert!(err.to_string().contains("declared 4"), "{err}");

    let extra_line = format!("{good}1 2 3\n");
    assert!(decode_ply(extra_line.as_bytes()).is_err());

    let bad_coord = good.replacen("\n-", "\nabc ", 1);
    assert!(decode_ply(bad_coord.as_bytes()).is_err() || !good.contains("\n-"));
}

// ---------------------------------------------------------------------------
// Depth images.

fn test_camera(width: usize, height: usize) -> CameraModel {
    let pose = Pose::new(Mat3::rotation_z(-0.5), Vec3::new(0.25, -1.5, 0.125));
    CameraModel::new(64.0, width, height, pose).unwrap()
}

#[test]
fn depth_file_round_trips_through_millimeter_quantization() {
    let (w, h) = (8usize, 6);
    let mut rng = stream(41, "io-depth", 0);
    let mut depth: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..4.0)).collect();
    depth[0] = 0.0; // no-return pixel
    depth[1] = 65.535; // largest representable depth
    let img = DepthImage::new(w, h, depth.clone(), test_camera(w, h)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("view.pgm");
    write_depth(&path, &img).unwrap();
    let back = read_depth(&path).unwrap();

    assert_eq!(back.width, w);
    assert_eq!(back.height, h);
    assert_eq!(back.depth[0], 0.0);
    assert_eq!(back.depth[1], 65.535);
    for (a, b) in depth.iter().zip(back.depth.iter()) {
        assert!((a - b).abs() <= DEPTH_UNIT_M / 2.0 + 1e-12, "{a} vs {b}");
    }
    // Camera sidecar survives exactly: floats print shortest-round-trip.
    assert_eq!(back.camera.focal_px, img.camera.focal_px);
    assert_eq!(back.camera.pose.rot.rows, img.camera.pose.rot.rows);
    assert_eq!(back.camera.pose.trans, img.camera.pose.trans);
}

#[test]
fn depth_file_with_mismatched_sidecar_is_rejected() {
    let (w, h) = (4usize, 4);
    let img = DepthImage::new(w, h, vec![1.0; w * h], test_camera(w, h)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("view.pgm");
    write_depth(&path, &img).unwrap();

    // Overwrite the raster with different extents; the sidecar disagrees.
    let raster = encode_pgm(2, 2, &[0, 1, 2, 3]);
    std::fs::write(&path, raster).unwrap();
    let err = read_depth(&path).unwrap_err();
    assert!(err.to_string().contains("disagree"), "{err}");
}

#[test]
fn pgm_rejects_wrong_magic_maxval_and_trailing_bytes() {
    let bytes = encode_pgm(3, 2, &[10, 20, 30, 40, 50, 60]);
    let back = decode_pgm(&bytes).unwrap();
    assert_eq!(back, (3, 2, vec![10, 20, 30, 40, 50, 60]));

    let mut wrong_magic = bytes.clone();
    wrong_magic[1] = b'6';
    assert!(decode_pgm(&wrong_magic).is_err());

    let wrong_maxval = b"P5\n3 2\n255\n".to_vec();
    assert!(decode_pgm(&wrong_maxval).is_err());

    let mut trailing = bytes.clone();
    trailing.push(0);
    let err = decode_pgm(&trailing).unwrap_err();
    assert!(err.to_string().contains("trailing"), "{err}");
}

// ---------------------------------------------------------------------------
// Manifests.

fn sample_records(count: usize, views: usize) -> Vec<SampleRecord> {
    (0..count)
        .map(|i| SampleRecord {
            id: format!("sample{i:03}"),
            kind: ["box", "cylinder", "ellipsoid"][i % 3].to_string(),
            size: Vec3::new(0.5 + i as f64 * 0.01, 0.4, 0.3),
            pose: Pose::new(Mat3::rotation_z(0.1 * i as f64), Vec3::new(0.0, 1.0 + i as f64 * 0.1, 0.0)),
            cloud_path: format!("clouds/sample{i:03}.ply"),
            views: (0..views)
                .map(|v| {
                    (format!("volumes/sample{i:03}_v{v}.vol"), format!("depth/sample{i:03}_v{v}.pgm"))
                })
                .collect(),
        })
        .collect()
}

#[test]
fn manifest_round_trips_records_and_view_count() {
    let records = sample_records(3, 4);
    let bytes = encode_manifest(&records, 4);
    let (back, k) = decode_manifest(&bytes).unwrap();
    assert_eq!(k, 4);
    assert_eq!(back, records);
    assert_eq!(encode_manifest(&back, k), bytes);
}

#[test]
fn manifest_rejects_header_and_record_damage() {
    let records = sample_records(2, 2);
    let text = String::from_utf8(encode_manifest(&records, 2)).unwrap();

    let bad_header = text.replacen("#rimr-manifest v1", "#manifest", 1);
    assert!(decode_manifest(bad_header.as_bytes()).is_err());

    let wrong_count = text.replacen("samples=2", "samples=3", 1);
    let err = decode_manifest(wrong_count.as_bytes()).unwrap_err();
    assert!(err.to_string().contains("declares 3"), "{err}");

    // Dropping one tab-separated field breaks the per-record arity check.
    let lines: Vec<&str> = text.lines().collect();
    let mut shortened = lines.clone();
    let cut = lines[1].rsplit_once('\t').unwrap().0;
    shortened[1] = cut;
    let damaged = format!("{}\n", shortened.join("\n"));
    let err = decode_manifest(damaged.as_bytes()).unwrap_err();
    assert!(err.to_string().contains("fields"), "{err}");
}

// ---------------------------------------------------------------------------
// Configs.

#[test]
fn config_skips_comments_and_rejects_duplicates() {
    let text = "# scene setup\nalpha = 1.5\n\nbeta = two words\n# end\n";
    let kv = decode_config(text.as_bytes()).unwrap();
    assert_eq!(kv.len(), 2);
    assert_eq!(kv["alpha"], "1.5");
    assert_eq!(kv["beta"], "two words");

    let dup = "a = 1\na = 2\n# end\n";
    let err = decode_config(dup.as_bytes()).unwrap_err();
    assert!(err.to_string().contains("duplicate"), "{err}");

    let no_eq = "just a line\n# end\n";
    assert!(decode_config(no_eq.as_bytes()).is_err());
}

#[test]
fn config_round_trip_is_byte_stable() {
    let mut kv = BTreeMap::new();
    kv.insert("epochs".to_string(), "200".to_string());
    kv.insert("learning_rate".to_string(), "0.0002".to_string());
    kv.insert("out_dir".to_string(), "runs/a".to_string());
    let bytes = encode_config(&kv);
    let back = decode_config(&bytes).unwrap();
    assert_eq!(back, kv);
    assert_eq!(encode_config(&back), bytes);
}

// ---------------------------------------------------------------------------
// Truncation fuzzing: every decoder must reject its own output cut at any
// byte boundary.

fn rejects_all_truncations(label: &str, bytes: &[u8], decodes: &dyn Fn(&[u8]) -> bool) {
    assert!(decodes(bytes), "{label}: canonical bytes must decode");
    let mut rng = stream(0xF022, label, 0);
    for _ in 0..100 {
        let cut = rng.gen_range(0..bytes.len());
        assert!(
            !decodes(&bytes[..cut]),
            "{label}: truncation to {cut}/{} bytes was accepted",
            bytes.len()
        );
    }
}

#[test]
fn every_codec_rejects_truncated_output() {
    rejects_all_truncations("volume-polar", &encode_volume(&random_volume(Frame::Polar, 51)), &|b| {
        decode_volume(b).is_ok()
    });
    rejects_all_truncations(
        "volume-cartesian",
        &encode_volume(&random_volume(Frame::Cartesian, 52)),
        &|b| decode_volume(b).is_ok(),
    );
    let params = random_params(53);
    let refs: Vec<&Parameter<f32>> = params.iter().collect();
    rejects_all_truncations("checkpoint", &encode_checkpoint(&refs), &|b| decode_checkpoint(b).is_ok());
    rejects_all_truncations("ply", &encode_ply(&random_cloud(64, 54)), &|b| decode_ply(b).is_ok());
    let units: Vec<u16> = (0..48).map(|i| (i * 199) as u16).collect();
    rejects_all_truncations("pgm", &encode_pgm(8, 6, &units), &|b| decode_pgm(b).is_ok());
    rejects_all_truncations("manifest", &encode_manifest(&sample_records(4, 2), 2), &|b| {
        decode_manifest(b).is_ok()
    });
    let mut kv = BTreeMap::new();
    kv.insert("alpha".to_string(), "0.25".to_string());
    kv.insert("shape".to_string(), "box".to_string());
    rejects_all_truncations("config", &encode_config(&kv), &|b| decode_config(b).is_ok());
}
