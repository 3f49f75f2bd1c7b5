//! Closed-form oracles for the radar chain: phase model, FFT peak locations,
//! Cartesian resampling consistency, and snapshot selection.

use num_complex::Complex;
use rimr_core::geometry::{Mat3, Pose, Vec3};
use rimr_core::radar::{
    process_fft, select_snapshots, synthesize_raw, synthesize_raw_with, to_cartesian, Bounds3,
    Frame, Impairments, RadarConfig, RawDataCube, Reflector, ReflectorScene, C,
};

fn identity_pose() -> Pose {
    Pose::new(Mat3::IDENTITY, Vec3::ZERO)
}

fn scene_at(points: &[(Vec3, f64)]) -> ReflectorScene {
    ReflectorScene {
        reflectors: points.iter().map(|&(p, a)| Reflector::new(p, a)).collect(),
        sensor_pose: identity_pose(),
    }
}

#[test]
fn boresight_reflector_has_uniform_element_magnitudes() {
    let cfg = RadarConfig::default();
    let scene = scene_at(&[(Vec3::new(0.0, 1.5, 0.0), 1.0)]);
    let cube = synthesize_raw(&scene, &cfg).unwrap();
    // Zero spatial phase: every element carries the same fast-time vector.
    let reference: Vec<Complex<f64>> = (0..cfg.samples_per_chirp).map(|n| cube.at(0, 0, n)).collect();
    for q in 0..cfg.elevation_elements {
        for p in 0..cfg.azimuth_elements {
            for (n, &r) in reference.iter().enumerate() {
                let v = cube.at(q, p, n);
                assert!((v - r).norm() < 1e-12, "element ({q},{p}) sample {n} differs");
            }
        }
    }
    assert!((reference[0].norm() - 1.0).abs() < 1e-12);
}

#[test]
fn fast_time_phase_matches_direct_evaluation() {
    let cfg = RadarConfig::default();
    let range = 1.5;
    let scene = scene_at(&[(Vec3::new(0.0, range, 0.0), 0.7)]);
    let cube = synthesize_raw(&scene, &cfg).unwrap();
    let beat = 2.0 * cfg.bandwidth_hz * range / (C * cfg.samples_per_chirp as f64);
    let base = 2.0 * cfg.carrier_freq_hz * range / C;
    for n in 0..cfg.samples_per_chirp {
        let expected = Complex::from_polar(0.7, std::f64::consts::TAU * (beat * n as f64 + base));
        let got = cube.at(17, 23, n);
        assert!((got - expected).norm() < 1e-9, "sample {n}: {got} vs {expected}");
    }
}

#[test]
fn off_boresight_reflector_carries_linear_spatial_phase() {
    let cfg = RadarConfig::default();
    // Direction with both azimuth and elevation components.
    let pos = Vec3::new(0.4, 1.4, 0.3);
    let scene = scene_at(&[(pos, 1.0)]);
    let cube = synthesize_raw(&scene, &cfg).unwrap();
    let d = pos.normalized();
    let fract = cfg.element_spacing_m / cfg.wavelength_m();
    let phase_p = std::f64::consts::TAU * fract * d.x;
    let phase_q = std::f64::consts::TAU * fract * d.z;
    let base = cube.at(0, 0, 5);
    for (q, p) in [(1usize, 0usize), (0, 1), (3, 7), (50, 60)] {
        let expected = base * Complex::from_polar(1.0, phase_q * q as f64 + phase_p * p as f64);
        let got = cube.at(q, p, 5);
        assert!((got - expected).norm() < 1e-9);
    }
}

#[test]
fn synthesis_is_linear_in_scenes() {
    let cfg = RadarConfig::default();
    let a = scene_at(&[(Vec3::new(0.2, 1.2, 0.1), 0.8)]);
    let b = scene_at(&[(Vec3::new(-0.4, 2.5, -0.2), 1.3), (Vec3::new(0.0, 3.0, 0.4), 0.5)]);
    let mut both = a.clone();
    both.reflectors.extend(b.reflectors.iter().cloned());
    let ca = synthesize_raw(&a, &cfg).unwrap();
    let cb = synthesize_raw(&b, &cfg).unwrap();
    let cab = synthesize_raw(&both, &cfg).unwrap();
    let mut max_rel = 0.0f64;
    for i in 0..cab.data.len() {
        let sum = ca.data[i] + cb.data[i];
        let denom = cab.data[i].norm().max(1e-30);
        max_rel = max_rel.max((cab.data[i] - sum).norm() / denom);
    }
    assert!(max_rel < 1e-9, "max relative deviation {max_rel}");
}

#[test]
fn reflectivity_scaling_is_homogeneous() {
    let cfg = RadarConfig::default();
    let base = scene_at(&[(Vec3::new(0.3, 1.8, -0.1), 0.6)]);
    let mut scaled = base.clone();
    for r in &mut scaled.reflectors {
        r.reflectivity *= 3.5;
    }
    let cube_base = synthesize_raw(&base, &cfg).unwrap();
    let cube_scaled = synthesize_raw(&scaled, &cfg).unwrap();
    for i in 0..cube_base.data.len() {
        assert!((cube_scaled.data[i] - cube_base.data[i] * 3.5).norm() < 1e-9);
    }
    let map_base = process_fft(&cube_base, &cfg, identity_pose()).unwrap();
    let map_scaled = process_fft(&cube_scaled, &cfg, identity_pose()).unwrap();
    for i in 0..map_base.values.len() {
        let expect = map_base.values[i] * 3.5;
        assert!((map_scaled.values[i] - expect).abs() <= 1e-4 * expect.max(1.0));
    }
}

#[test]
fn range_peak_lands_on_predicted_bin() {
    let cfg = RadarConfig::default();
    let dr = cfg.range_resolution_m();
    let range = 1.5;
    let scene = scene_at(&[(Vec3::new(0.0, range, 0.0), 1.0)]);
    let cube = synthesize_raw(&scene, &cfg).unwrap();
    let map = process_fft(&cube, &cfg, identity_pose()).unwrap();
    let peak = map.argmax();
    let expected_bin = (range / dr).round() as i64;
    assert_eq!(expected_bin, 40);
    assert!((peak[2] as i64 - expected_bin).abs() <= 1, "range bin {}", peak[2]);
    // Boresight: angle peaks at the center bins after the shift.
    assert!((peak[0] as i64 - 32).abs() <= 1, "elevation bin {}", peak[0]);
    assert!((peak[1] as i64 - 32).abs() <= 1, "azimuth bin {}", peak[1]);
}

#[test]
fn range_peak_bin_error_within_one_across_span() {
    let cfg = RadarConfig::default();
    let dr = cfg.range_resolution_m();
    for mult in [10.0, 25.0, 57.3, 101.0, 150.9, 200.0] {
        let range = mult * dr;
        let scene = scene_at(&[(Vec3::new(0.0, range, 0.0), 1.0)]);
        let cube = synthesize_raw(&scene, &cfg).unwrap();
        let map = process_fft(&cube, &cfg, identity_pose()).unwrap();
        let peak = map.argmax();
        let expected = (range / dr).round() as i64;
        assert!(
            (peak[2] as i64 - expected).abs() <= 1,
            "range {range}: bin {} vs {expected}",
            peak[2]
        );
    }
}

#[test]
fn angle_peaks_track_direction() {
    let cfg = RadarConfig::default();
    // sin(azimuth)·cos(elevation) = 0.25, sin(elevation) = -0.125.
    let range = 2.0;
    let dz: f64 = -0.125;
    let dx: f64 = 0.25;
    let dy = (1.0 - dx * dx - dz * dz).sqrt();
    let pos = Vec3::new(dx * range, dy * range, dz * range);
    let scene = scene_at(&[(pos, 1.0)]);
    let cube = synthesize_raw(&scene, &cfg).unwrap();
    let map = process_fft(&cube, &cfg, identity_pose()).unwrap();
    let peak = map.argmax();
    let expected = cfg.polar_bin(pos).unwrap();
    assert!((peak[0] as i64 - expected[0] as i64).abs() <= 1);
    assert!((peak[1] as i64 - expected[1] as i64).abs() <= 1);
    assert!((peak[2] as i64 - expected[2] as i64).abs() <= 1);
}

#[test]
fn two_separated_reflectors_give_two_range_peaks() {
    let cfg = RadarConfig::default();
    let dr = cfg.range_resolution_m();
    let r1 = 40.0 * dr;
    let r2 = 48.0 * dr;
    let scene = scene_at(&[(Vec3::new(0.0, r1, 0.0), 1.0), (Vec3::new(0.0, r2, 0.0), 1.0)]);
    let cube = synthesize_raw(&scene, &cfg).unwrap();
    let map = process_fft(&cube, &cfg, identity_pose()).unwrap();
    // Range profile through the boresight angle cell.
    let profile: Vec<f32> = (0..cfg.samples_per_chirp).map(|k| map.at(32, 32, k)).collect();
    let first = profile
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0 as i64;
    let second = profile
        .iter()
        .enumerate()
        .filter(|(k, _)| (*k as i64 - first).abs() > 2)
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0 as i64;
    let mut found = [first, second];
    found.sort();
    assert!((found[0] - 40).abs() <= 1, "first peak at {}", found[0]);
    assert!((found[1] - 48).abs() <= 1, "second peak at {}", found[1]);
}

#[test]
fn sensor_pose_moves_scene_into_sensor_frame() {
    let cfg = RadarConfig::default();
    // Sensor at (0, -1, 0) in the scene frame, axes aligned: a scene point at
    // (0, 0.5, 0) sits 1.5 m ahead on boresight.
    let pose = Pose::new(Mat3::IDENTITY, Vec3::new(0.0, 1.0, 0.0));
    let scene = ReflectorScene {
        reflectors: vec![Reflector::new(Vec3::new(0.0, 0.5, 0.0), 1.0)],
        sensor_pose: pose,
    };
    let cube = synthesize_raw(&scene, &cfg).unwrap();
    let map = process_fft(&cube, &cfg, pose).unwrap();
    let peak = map.argmax();
    assert!((peak[2] as i64 - 40).abs() <= 1);
}

#[test]
fn snapshot_selection_counts_and_identity() {
    let mut cfg = RadarConfig::default();
    let scene = scene_at(&[(Vec3::new(0.1, 1.5, 0.05), 1.0)]);
    let cube = synthesize_raw(&scene, &cfg).unwrap();

    let two = select_snapshots(&cube, &[31, 32], &cfg).unwrap();
    let row = cfg.azimuth_elements * cfg.samples_per_chirp;
    let zero_rows = (0..cfg.elevation_elements)
        .filter(|q| two.data[q * row..(q + 1) * row].iter().all(|c| c.norm() == 0.0))
        .count();
    assert_eq!(zero_rows, 62);
    for q in [31usize, 32] {
        assert_eq!(&two.data[q * row..(q + 1) * row], &cube.data[q * row..(q + 1) * row]);
    }

    cfg.snapshot_count = cfg.elevation_elements;
    let all: Vec<usize> = (0..cfg.elevation_elements).collect();
    let identity = select_snapshots(&cube, &all, &cfg).unwrap();
    assert_eq!(identity, cube);
}

#[test]
fn snapshot_selection_rejects_bad_indices() {
    let cfg = RadarConfig::default();
    let cube = RawDataCube::zeros(cfg.elevation_elements, cfg.azimuth_elements, cfg.samples_per_chirp);
    assert!(select_snapshots(&cube, &[1, 1], &cfg).is_err());
    assert!(select_snapshots(&cube, &[1, 64], &cfg).is_err());
    assert!(select_snapshots(&cube, &[1], &cfg).is_err());
    assert!(select_snapshots(&cube, &[1, 2, 3], &cfg).is_err());
}

#[test]
fn range_peak_survives_snapshot_selection() {
    let cfg = RadarConfig::default();
    let scene = scene_at(&[(Vec3::new(0.0, 1.5, 0.0), 1.0)]);
    let cube = synthesize_raw(&scene, &cfg).unwrap();
    let sparse = select_snapshots(&cube, &[20, 44], &cfg).unwrap();
    let full_peak = process_fft(&cube, &cfg, identity_pose()).unwrap().argmax();
    let sparse_peak = process_fft(&sparse, &cfg, identity_pose()).unwrap().argmax();
    assert_eq!(full_peak[2], sparse_peak[2], "range bin must survive elevation sparsification");
    // Azimuth sampling is untouched as well.
    assert!((sparse_peak[1] as i64 - full_peak[1] as i64).abs() <= 1);
}

#[test]
fn cartesian_map_bounds_checks() {
    let cfg = RadarConfig::default();
    let scene = scene_at(&[(Vec3::new(0.0, 1.5, 0.0), 1.0)]);
    let cube = synthesize_raw(&scene, &cfg).unwrap();
    let map = process_fft(&cube, &cfg, identity_pose()).unwrap();
    assert!(Bounds3::new(Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 1.0, 1.0)).is_err());
    let bounds = Bounds3::new(Vec3::new(-1.0, 0.5, -1.0), Vec3::new(1.0, 2.5, 1.0)).unwrap();
    let cart = to_cartesian(&map, bounds, [32, 32, 64]).unwrap();
    assert_eq!(cart.frame, Frame::Cartesian);
    assert!(cart.values.iter().all(|&v| v >= 0.0));
    assert!(cart.max_value() <= map.max_value());
    // Cartesian input must be rejected as a resampling source.
    assert!(to_cartesian(&cart, bounds, [8, 8, 8]).is_err());
}

#[test]
fn all_zero_polar_map_resamples_to_zero() {
    let cfg = RadarConfig::default();
    let cube = RawDataCube::zeros(cfg.elevation_elements, cfg.azimuth_elements, cfg.samples_per_chirp);
    let map = process_fft(&cube, &cfg, identity_pose()).unwrap();
    let bounds = Bounds3::new(Vec3::new(-1.0, 0.1, -1.0), Vec3::new(1.0, 2.0, 1.0)).unwrap();
    let cart = to_cartesian(&map, bounds, [16, 16, 32]).unwrap();
    assert!(cart.values.iter().all(|&v| v == 0.0));
}

#[test]
fn exact_grid_hit_copies_polar_cell() {
    let cfg = RadarConfig::default();
    let scene = scene_at(&[(Vec3::new(0.0, 1.5, 0.0), 1.0)]);
    let cube = synthesize_raw(&scene, &cfg).unwrap();
    let map = process_fft(&cube, &cfg, identity_pose()).unwrap();
    // One-cell grid whose center sits exactly at the reflector position.
    let bounds = Bounds3::new(Vec3::new(-0.01, 1.49, -0.01), Vec3::new(0.01, 1.51, 0.01)).unwrap();
    let cart = to_cartesian(&map, bounds, [1, 1, 1]).unwrap();
    let bin = cfg.polar_bin(Vec3::new(0.0, 1.5, 0.0)).unwrap();
    assert_eq!(cart.values[0], map.at(bin[0], bin[1], bin[2]));
    assert!(cart.values[0] > 0.0);
}

#[test]
fn cartesian_argmax_matches_reflector_position() {
    let cfg = RadarConfig::default();
    let pos = Vec3::new(0.3, 1.6, -0.2);
    let scene = scene_at(&[(pos, 1.0)]);
    let cube = synthesize_raw(&scene, &cfg).unwrap();
    let map = process_fft(&cube, &cfg, identity_pose()).unwrap();
    let bounds = Bounds3::new(Vec3::new(-1.0, 0.5, -1.0), Vec3::new(1.0, 2.7, 1.0)).unwrap();
    let grid = [64, 64, 128];
    let cart = to_cartesian(&map, bounds, grid).unwrap();
    let am = cart.argmax();
    let cell = [
        (bounds.max.z - bounds.min.z) / grid[0] as f64,
        (bounds.max.x - bounds.min.x) / grid[1] as f64,
        (bounds.max.y - bounds.min.y) / grid[2] as f64,
    ];
    let center = Vec3::new(
        bounds.min.x + (am[1] as f64 + 0.5) * cell[1],
        bounds.min.y + (am[2] as f64 + 0.5) * cell[2],
        bounds.min.z + (am[0] as f64 + 0.5) * cell[0],
    );
    // The polar peak itself may sit up to one bin off; allow one Cartesian
    // voxel diagonal plus one polar bin of range slack.
    let diag = (cell[0] * cell[0] + cell[1] * cell[1] + cell[2] * cell[2]).sqrt();
    let tol = diag + cfg.range_resolution_m();
    assert!((center - pos).norm() < tol, "argmax center {center:?} vs reflector {pos:?} (tol {tol})");
}

#[test]
fn noise_injection_is_seeded_and_scaled() {
    let cfg = RadarConfig::default();
    let scene = scene_at(&[(Vec3::new(0.0, 1.5, 0.0), 1.0)]);
    let imp = Impairments { noise_snr_db: Some(10.0), specular_cutoff_deg: None };
    let a = synthesize_raw_with(&scene, &cfg, &imp, 7).unwrap();
    let b = synthesize_raw_with(&scene, &cfg, &imp, 7).unwrap();
    assert_eq!(a, b);
    let c = synthesize_raw_with(&scene, &cfg, &imp, 8).unwrap();
    assert_ne!(a, c);
    let clean = synthesize_raw(&scene, &cfg).unwrap();
    let noise_power: f64 =
        a.data.iter().zip(&clean.data).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>() / a.data.len() as f64;
    let signal_power: f64 = clean.data.iter().map(|c| c.norm_sqr()).sum::<f64>() / clean.data.len() as f64;
    let snr_db = 10.0 * (signal_power / noise_power).log10();
    assert!((snr_db - 10.0).abs() < 0.5, "measured SNR {snr_db} dB");
}

#[test]
fn specular_culling_drops_misaligned_normals() {
    let cfg = RadarConfig::default();
    let pos = Vec3::new(0.0, 1.5, 0.0);
    let facing = ReflectorScene {
        reflectors: vec![Reflector::with_normal(pos, 1.0, Vec3::new(0.0, -1.0, 0.0))],
        sensor_pose: identity_pose(),
    };
    let sideways = ReflectorScene {
        reflectors: vec![Reflector::with_normal(pos, 1.0, Vec3::new(1.0, 0.0, 0.0))],
        sensor_pose: identity_pose(),
    };
    let imp = Impairments { noise_snr_db: None, specular_cutoff_deg: Some(60.0) };
    let kept = synthesize_raw_with(&facing, &cfg, &imp, 0).unwrap();
    let culled = synthesize_raw_with(&sideways, &cfg, &imp, 0).unwrap();
    assert!(kept.data.iter().any(|c| c.norm() > 0.5));
    assert!(culled.data.iter().all(|c| c.norm() == 0.0));
    // Without the cutoff both contribute.
    let kept_anyway = synthesize_raw(&sideways, &cfg).unwrap();
    assert!(kept_anyway.data.iter().any(|c| c.norm() > 0.5));
}
