//! Property tests for the geometric invariants.

use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;
use wandcalib::camera::{project, unproject, Bearing, CameraIntrinsics};
use wandcalib::multi::chain_transform;
use wandcalib::wand::{Marker, WandGeometry, WandPose};
use wandcalib::Pose;

fn monotone_intrinsics() -> impl Strategy<Value = CameraIntrinsics> {
    (
        1.5..2.5_f64,
        -0.08..0.08_f64,
        -0.01..0.01_f64,
        150.0..220.0_f64,
        150.0..220.0_f64,
        280.0..360.0_f64,
        200.0..280.0_f64,
    )
        .prop_map(|(k1, k2, k3, mu, mv, u0, v0)| CameraIntrinsics {
            k: [k1, k2, k3, 0.0, 0.0],
            mu,
            mv,
            u0,
            v0,
            theta_max: 1.6,
        })
        .prop_filter("radial polynomial must stay monotone", |intr| {
            intr.check_monotone().is_ok()
        })
}

proptest! {
    #[test]
    fn projection_round_trip_preserves_direction(
        intr in monotone_intrinsics(),
        theta in 0.0..1.55_f64,
        phi in 0.0..std::f64::consts::TAU,
        scale in 0.1..5000.0_f64,
    ) {
        let x = Bearing::from_angles(theta, phi).vector() * scale;
        let px = project(&intr, &x).unwrap();
        let back = unproject(&intr, &px).unwrap();
        let angle = back.vector().cross(&x.normalize()).norm().asin();
        prop_assert!(angle.abs() < 1e-9, "direction error {angle} rad");
    }

    #[test]
    fn projection_ignores_point_scale(
        intr in monotone_intrinsics(),
        theta in 0.01..1.55_f64,
        phi in 0.0..std::f64::consts::TAU,
        s in 0.01..1000.0_f64,
    ) {
        let x = Bearing::from_angles(theta, phi).vector();
        let a = project(&intr, &x).unwrap();
        let b = project(&intr, &(x * s)).unwrap();
        prop_assert!((a - b).norm() < 1e-9);
    }

    #[test]
    fn wand_markers_stay_collinear_and_spaced(
        ax in -2000.0..2000.0_f64,
        ay in -2000.0..2000.0_f64,
        az in -2000.0..2000.0_f64,
        phi in 0.0..std::f64::consts::PI,
        theta in -std::f64::consts::PI..std::f64::consts::PI,
    ) {
        let wand = WandGeometry { l1: 400.0, l2: 200.0, l: 600.0 };
        let wp = WandPose { a: Vector3::new(ax, ay, az), phi, theta };
        let (a, b, c) = (
            wp.marker(Marker::A, &wand),
            wp.marker(Marker::B, &wand),
            wp.marker(Marker::C, &wand),
        );
        prop_assert!((b - a).cross(&(c - a)).norm() < 1e-6);
        prop_assert!(((b - a).norm() - wand.l1).abs() < 1e-9);
        prop_assert!(((c - a).norm() - wand.l).abs() < 1e-9);
    }

    #[test]
    fn pose_chaining_is_associative(
        r in proptest::array::uniform9(-0.9..0.9_f64),
        t in proptest::array::uniform9(-500.0..500.0_f64),
    ) {
        let p = |i: usize| Pose::new(
            Vector3::new(r[3 * i], r[3 * i + 1], r[3 * i + 2]),
            Vector3::new(t[3 * i], t[3 * i + 1], t[3 * i + 2]),
        );
        let left = chain_transform(&chain_transform(&p(0), &p(1)), &p(2));
        let right = chain_transform(&p(0), &chain_transform(&p(1), &p(2)));
        prop_assert!((left.rotation() - right.rotation()).norm() < 1e-12);
        prop_assert!((left.t - right.t).norm() < 1e-9);
    }

    #[test]
    fn observation_files_round_trip_bit_exactly(
        pixels in proptest::collection::vec((0.0..640.0_f64, 0.0..480.0_f64), 6),
    ) {
        use wandcalib::io::{encode_observations, to_canonical_json, ObservationFile};
        use wandcalib::wand::{MarkerPixels, ObservationSet, WandObservation};
        use wandcalib::synth::paper_camera_meta;

        let obs: Vec<WandObservation> = pixels
            .chunks(3)
            .enumerate()
            .map(|(cam, chunk)| WandObservation {
                frame: 0,
                camera: cam,
                pixels: MarkerPixels {
                    a: Some(Vector2::new(chunk[0].0, chunk[0].1)),
                    b: Some(Vector2::new(chunk[1].0, chunk[1].1)),
                    c: Some(Vector2::new(chunk[2].0, chunk[2].1)),
                },
            })
            .collect();
        let set = ObservationSet::from_observations(2, &obs).unwrap();
        let metas = vec![paper_camera_meta(0), paper_camera_meta(1)];
        let wand = WandGeometry { l1: 400.0, l2: 200.0, l: 600.0 };
        let file = encode_observations(&metas, &[0, 1], &wand, &set);

        let text = to_canonical_json(&file).unwrap();
        let parsed: ObservationFile = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(to_canonical_json(&parsed).unwrap(), text);
        let decoded = parsed.decode().unwrap();
        prop_assert_eq!(decoded.observations, set);
    }
}
