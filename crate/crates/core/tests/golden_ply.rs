use std::path::Path;

use serde::Deserialize;
use sfgeo_core::gaussian_field::parse_gaussian_ply;
use sfgeo_core::point_sampler::sh_color;

#[derive(Deserialize)]
struct Expected {
    center: [f64; 3],
    scale: [f64; 3],
    rotation: [f64; 4],
    opacity: f64,
    sh: Vec<[f64; 3]>,
    color: [f64; 3],
}

#[derive(Deserialize)]
struct Golden {
    sh_degree: u8,
    gaussians: Vec<Expected>,
}

fn fixture(name: &str) -> Vec<u8> {
    std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * y.abs().max(1.0))
}

#[test]
fn golden_ply_decodes_to_reference_values() {
    let golden: Golden = serde_json::from_slice(&fixture("golden.json")).unwrap();
    let bytes = fixture("golden.ply");
    let field = parse_gaussian_ply(&bytes).unwrap();
    assert_eq!(field.sh_degree(), golden.sh_degree);
    assert_eq!(field.len(), golden.gaussians.len());
    assert_eq!(field.source_digest(), sfgeo_core::digest::sha256_hex(&bytes));
    for (i, (g, e)) in field.gaussians().iter().zip(&golden.gaussians).enumerate() {
        assert!(close(&g.center, &e.center, 1e-12), "{i} center");
        assert!(close(&g.scale, &e.scale, 1e-12), "{i} scale");
        assert!(close(&g.rotation, &e.rotation, 1e-12), "{i} rotation");
        assert!(close(&[g.opacity], &[e.opacity], 1e-12), "{i} opacity");
        assert_eq!(g.sh.len(), e.sh.len());
        for (a, b) in g.sh.iter().zip(&e.sh) {
            assert!(close(a, b, 1e-12), "{i} sh");
        }
        assert!(close(&sh_color(g), &e.color, 1e-12), "{i} color");
        assert_eq!(g.visibility, 1.0);
    }
}

#[test]
fn truncated_golden_ply_is_rejected() {
    let bytes = fixture("golden.ply");
    assert!(parse_gaussian_ply(&bytes[..bytes.len() - 5]).is_err());
}

#[test]
fn writer_round_trips_the_golden_field() {
    let field = parse_gaussian_ply(&fixture("golden.ply")).unwrap();
    let again = parse_gaussian_ply(&field.to_ply_bytes()).unwrap();
    assert_eq!(again.sh_degree(), field.sh_degree());
    for (a, b) in again.gaussians().iter().zip(field.gaussians()) {
        assert!(close(&a.center, &b.center, 1e-6));
        assert!(close(&a.scale, &b.scale, 1e-6));
        assert_eq!(a.rotation, b.rotation);
    }
}
