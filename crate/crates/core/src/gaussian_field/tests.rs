use super::ply::{Column, ScalarType};
use super::*;
use nalgebra::Matrix3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BASE: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

fn raw_ply(names: &[&str], rows: &[Vec<f64>]) -> Vec<u8> {
    let cols: Vec<Column> = names
        .iter()
        .map(|n| Column {
            name: n,
            ty: ScalarType::F32,
        })
        .collect();
    ply::write(&cols, rows.len(), rows.iter().map(Vec::as_slice))
}

fn unit_row() -> Vec<f64> {
    vec![1.0, 2.0, 3.0, 0.1, 0.2, 0.3, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
}

fn random_rotation(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if let Some(u) = normalize_quat(q) {
            if q.iter().map(|v| v * v).sum::<f64>() > 1e-3 {
                return u;
            }
        }
    }
}

fn gaussian(scale: [f64; 3], rotation: [f64; 4]) -> Gaussian {
    Gaussian {
        center: [0.0; 3],
        scale,
        rotation,
        opacity: 0.5,
        sh: vec![[0.0; 3]],
        visibility: 1.0,
    }
}

#[test]
fn zero_log_scale_decodes_to_unit_scale() {
    let field = parse_gaussian_ply(&raw_ply(&BASE, &[unit_row()])).unwrap();
    assert_eq!(field.len(), 1);
    assert_eq!(field.gaussians()[0].scale, [1.0, 1.0, 1.0]);
    assert_eq!(field.gaussians()[0].opacity, 0.5);
    assert_eq!(field.gaussians()[0].visibility, 1.0);
    assert_eq!(field.sh_degree(), 0);
}

#[test]
fn quaternion_is_renormalized_and_sh_degree_inferred() {
    let mut names: Vec<String> = BASE[..6].iter().map(|s| s.to_string()).collect();
    names.extend((0..9).map(|i| format!("f_rest_{i}")));
    names.extend(BASE[6..].iter().map(|s| s.to_string()));
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut row = unit_row()[..6].to_vec();
    row.extend((0..9).map(|i| i as f64));
    row.extend([0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
    let field = parse_gaussian_ply(&raw_ply(&refs, &[row])).unwrap();
    let g = &field.gaussians()[0];
    assert_eq!(field.sh_degree(), 1);
    assert_eq!(g.rotation, [1.0, 0.0, 0.0, 0.0]);
    // channel-major f_rest: red gets 0,1,2; green 3,4,5; blue 6,7,8
    assert_eq!(g.sh[1], [0.0, 3.0, 6.0]);
    assert_eq!(g.sh[3], [2.0, 5.0, 8.0]);
}

#[test]
fn missing_property_is_reported() {
    let names: Vec<&str> = BASE.iter().copied().filter(|n| *n != "opacity").collect();
    let mut row = unit_row();
    row.remove(6);
    let err = parse_gaussian_ply(&raw_ply(&names, &[row])).unwrap_err();
    assert!(matches!(err, Error::PlyMissingProperty(ref p) if p == "opacity"), "{err}");
}

#[test]
fn truncated_payload_names_vertex() {
    let mut bytes = raw_ply(&BASE, &[unit_row(), unit_row()]);
    bytes.truncate(bytes.len() - 10);
    match parse_gaussian_ply(&bytes).unwrap_err() {
        Error::PlyVertex { vertex, property, .. } => {
            assert_eq!(vertex, 1);
            assert_eq!(property, "rot_1");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn nan_field_names_vertex_and_property() {
    let mut bad = unit_row();
    bad[8] = f64::NAN;
    match parse_gaussian_ply(&raw_ply(&BASE, &[unit_row(), unit_row(), bad])).unwrap_err() {
        Error::PlyVertex { vertex, property, .. } => {
            assert_eq!((vertex, property.as_str()), (2, "scale_1"));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn zero_quaternion_is_rejected() {
    let mut row = unit_row();
    row[10] = 0.0;
    let err = parse_gaussian_ply(&raw_ply(&BASE, &[row])).unwrap_err();
    assert!(matches!(err, Error::PlyVertex { ref property, .. } if property == "rot"));
}

#[test]
fn malformed_headers_are_rejected() {
    assert!(matches!(
        parse_gaussian_ply(b"plx\nend_header\n"),
        Err(Error::PlyHeader(_))
    ));
    assert!(matches!(
        parse_gaussian_ply(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n"),
        Err(Error::PlyHeader(_))
    ));
    assert!(matches!(
        parse_gaussian_ply(b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n"),
        Err(Error::PlyHeader(_))
    ));
    assert!(matches!(
        parse_gaussian_ply(
            b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty quad x\nend_header\n"
        ),
        Err(Error::PlyHeader(_))
    ));
    let bad_rest = {
        let mut names: Vec<String> = BASE.iter().map(|s| s.to_string()).collect();
        names.push("f_rest_0".into());
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut row = unit_row();
        row.push(0.0);
        raw_ply(&refs, &[row])
    };
    assert!(matches!(parse_gaussian_ply(&bad_rest), Err(Error::PlyHeader(_))));
}

#[test]
fn trailing_elements_and_extra_properties_are_ignored() {
    let mut names = BASE.to_vec();
    names.insert(3, "nx");
    let mut row = unit_row();
    row.insert(3, 9.0);
    let mut bytes = raw_ply(&names, &[row]);
    // splice a face element declaration into the header
    let pos = bytes.windows(10).position(|w| w == b"end_header").unwrap();
    bytes.splice(
        pos..pos,
        b"element face 0\nproperty list uchar int vertex_indices\n".iter().copied(),
    );
    let field = parse_gaussian_ply(&bytes).unwrap();
    assert_eq!(field.gaussians()[0].center, [1.0, 2.0, 3.0]);
}

#[test]
fn axis_aligned_covariance() {
    let cov = covariance_of(&gaussian([1.0, 2.0, 3.0], [1.0, 0.0, 0.0, 0.0]));
    assert!((cov - Matrix3::from_diagonal(&[1.0, 4.0, 9.0].into())).abs().max() < 1e-12);
}

#[test]
fn quarter_turn_about_z_swaps_axes() {
    let h = std::f64::consts::FRAC_PI_4;
    let cov = covariance_of(&gaussian([2.0, 1.0, 1.0], [h.cos(), 0.0, 0.0, h.sin()]));
    assert!((cov - Matrix3::from_diagonal(&[1.0, 4.0, 1.0].into())).abs().max() < 1e-12);
}

#[test]
fn covariance_matches_dense_triple_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let g = gaussian([0.5, 1.0, 2.0], random_rotation(&mut rng));
        let r = quat_to_matrix(g.rotation);
        // R · S · Sᵀ · Rᵀ by explicit index loops
        let s = g.scale;
        let mut expect = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    expect[i][j] += r[(i, k)] * s[k] * s[k] * r[(j, k)];
                }
            }
        }
        let cov = covariance_of(&g);
        for i in 0..3 {
            for j in 0..3 {
                assert!((cov[(i, j)] - expect[i][j]).abs() < 1e-9);
                assert!((cov[(i, j)] - cov[(j, i)]).abs() < 1e-9);
            }
        }
        let eig = cov.symmetric_eigen();
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        for (a, b) in ev.iter().zip([0.25, 1.0, 4.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn covariance_is_spd_for_random_gaussians() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let scale = std::array::from_fn(|_| rng.random_range(1e-3..5.0));
        let cov = covariance_of(&gaussian(scale, random_rotation(&mut rng)));
        assert!(cov.cholesky().is_some());
    }
}

fn field_with(vis: &[f64], alpha: &[f64]) -> GaussianField {
    let gs = vis
        .iter()
        .zip(alpha)
        .enumerate()
        .map(|(i, (&v, &a))| Gaussian {
            center: [i as f64, 0.0, 0.0],
            opacity: a,
            visibility: v,
            ..gaussian([1.0; 3], [1.0, 0.0, 0.0, 0.0])
        })
        .collect();
    GaussianField::new(gs, 0, "test".into()).unwrap()
}

fn look_at(position: [f64; 3], target: [f64; 3]) -> CameraPose {
    let p = Vector3::from(position);
    let z = (Vector3::from(target) - p).normalize();
    let up = if z.z.abs() > 0.9 { Vector3::x() } else { Vector3::z() };
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let t = -(r * p);
    CameraPose {
        rotation: [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ],
        translation: [t.x, t.y, t.z],
        fx: 500.0,
        fy: 500.0,
        cx: 320.0,
        cy: 240.0,
        width: 640,
        height: 480,
    }
}

#[test]
fn visibility_defaults_to_one_without_cameras() {
    let f = estimate_visibility(&field_with(&[0.2, 0.7], &[0.5, 0.5]), &[]).unwrap();
    assert!(f.gaussians().iter().all(|g| g.visibility == 1.0));
}

#[test]
fn gaussian_behind_camera_is_invisible() {
    let mut f = field_with(&[1.0], &[0.9]);
    f.gaussians[0].center = [0.0, 0.0, -5.0];
    let cam = look_at([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
    let out = estimate_visibility(&f, &[cam]).unwrap();
    assert_eq!(out.gaussians()[0].visibility, 0.0);
}

#[test]
fn ring_cameras_see_center_but_not_far_point() {
    let mut f = field_with(&[1.0, 1.0, 1.0], &[0.9, 0.9, 0.005]);
    f.gaussians[0].center = [0.0, 0.0, 0.0];
    f.gaussians[1].center = [0.0, 0.0, 100.0];
    f.gaussians[2].center = [0.0, 0.0, 0.0];
    let cams: Vec<_> = [[10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [-10.0, 0.0, 0.0], [0.0, -10.0, 0.0]]
        .iter()
        .map(|&p| look_at(p, [0.0; 3]))
        .collect();
    let out = estimate_visibility(&f, &cams).unwrap();
    let v: Vec<f64> = out.gaussians().iter().map(|g| g.visibility).collect();
    // third Gaussian is at the center but too transparent to contribute
    assert_eq!(v, vec![1.0, 0.0, 0.0]);

    let mut half = cams.clone();
    half[0].translation = [0.0, 0.0, -50.0];
    half[0].rotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    half[1] = half[0].clone();
    let out = estimate_visibility(&f, &half).unwrap();
    assert_eq!(out.gaussians()[0].visibility, 0.5);
}

#[test]
fn non_orthonormal_camera_is_rejected() {
    let mut cam = look_at([0.0; 3], [0.0, 0.0, 1.0]);
    cam.rotation[0] = [2.0, 0.0, 0.0];
    assert!(matches!(
        estimate_visibility(&field_with(&[1.0], &[1.0]), &[cam]),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn prune_with_default_thresholds() {
    let f = field_with(&[0.04, 0.05, 1.0], &[0.3, 0.3, 0.3]);
    let kept = prune(&f, 0.0, 0.05);
    let xs: Vec<f64> = kept.gaussians().iter().map(|g| g.center[0]).collect();
    assert_eq!(xs, vec![1.0, 2.0]);
    assert_eq!(prune(&f, 0.0, 0.0), f);
}

#[test]
fn prune_matches_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vis: Vec<f64> = (0..500).map(|_| rng.random()).collect();
    let alpha: Vec<f64> = (0..500).map(|_| rng.random()).collect();
    let f = field_with(&vis, &alpha);
    let kept = prune(&f, 0.3, 0.5);
    let mut expected = Vec::new();
    for i in 0..500 {
        if alpha[i] >= 0.3 && vis[i] >= 0.5 {
            expected.push(i as f64);
        }
    }
    let got: Vec<f64> = kept.gaussians().iter().map(|g| g.center[0]).collect();
    assert_eq!(got, expected);
}

proptest! {
    #[test]
    fn prune_is_idempotent_and_monotone(
        vis in prop::collection::vec(0.0f64..=1.0, 1..60),
        a1 in 0.0f64..=1.0, a2 in 0.0f64..=1.0,
        v1 in 0.0f64..=1.0, v2 in 0.0f64..=1.0,
    ) {
        let alpha: Vec<f64> = vis.iter().rev().copied().collect();
        let f = field_with(&vis, &alpha);
        let once = prune(&f, a1, v1);
        prop_assert_eq!(&prune(&once, a1, v1), &once);
        let (lo_a, hi_a) = (a1.min(a2), a1.max(a2));
        let (lo_v, hi_v) = (v1.min(v2), v1.max(v2));
        prop_assert!(prune(&f, hi_a, lo_v).len() <= prune(&f, lo_a, lo_v).len());
        prop_assert!(prune(&f, lo_a, hi_v).len() <= prune(&f, lo_a, lo_v).len());
    }

    #[test]
    fn ply_round_trip_is_bitwise(
        rows in prop::collection::vec(
            (
                prop::array::uniform3(-5000i32..5000),
                prop::array::uniform3(-2000i32..2000),
                -12000i32..12000,
                prop::array::uniform3(-8000i32..2000),
                prop::array::uniform4(-1000i32..1000),
                prop::collection::vec(-1000i32..1000, 24),
            ),
            1..20,
        )
    ) {
        // raw values on a 1/1024 grid, a realistic range for trained scenes
        let q = |v: i32| v as f64 / 1024.0;
        let mut names: Vec<String> = BASE[..6].iter().map(|s| s.to_string()).collect();
        names.extend((0..24).map(|i| format!("f_rest_{i}")));
        names.extend(BASE[6..].iter().map(|s| s.to_string()));
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let table: Vec<Vec<f64>> = rows
            .iter()
            .map(|(c, dc, op, sc, rot, rest)| {
                let mut row: Vec<f64> = c.iter().chain(dc).map(|&v| q(v)).collect();
                row.extend(rest.iter().map(|&v| q(v)));
                row.push(q(*op));
                row.extend(sc.iter().map(|&v| q(v)));
                let mut r: Vec<f64> = rot.iter().map(|&v| q(v)).collect();
                if r.iter().all(|v| *v == 0.0) {
                    r[0] = 1.0;
                }
                row.extend(r);
                row
            })
            .collect();
        let first = parse_gaussian_ply(&raw_ply(&refs, &table)).unwrap();
        let second = parse_gaussian_ply(&first.to_ply_bytes()).unwrap();
        prop_assert_eq!(first.sh_degree(), 2);
        prop_assert_eq!(first.gaussians(), second.gaussians());
        let third = parse_gaussian_ply(&second.to_ply_bytes()).unwrap();
        prop_assert_eq!(second.to_ply_bytes(), third.to_ply_bytes());
    }
}
