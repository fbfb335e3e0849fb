use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sfgeo_cli::corpus::{build_corpus, corpus_features, write_corpus, CorpusConfig, CorpusPaths};
use sfgeo_cli::pipeline::RenderReport;
use sfgeo_cli::PipelineConfig;
use sfgeo_core::features::Side;
use sfgeo_core::fisher_agg::{Aggregator, DescriptorStore, GlobalDescriptor};
use sfgeo_core::gaussian_field::GaussianField;
use sfgeo_core::retrieval::{GroundTruth, MetricsReport};
use sfgeo_core::synthetic::box_scene;

fn sfgeo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfgeo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_scene(dir: &Path, name: &str, hole: Option<[f64; 4]>) -> PathBuf {
    let field = box_scene(12.0, [0.2, 0.6, 0.2], [0.8, 0.2, 0.2], [8.0, 8.0], [3.0, 3.0], 5.0, 0.25).unwrap();
    let field = match hole {
        None => field,
        Some([x0, y0, x1, y1]) => {
            let kept = field
                .gaussians()
                .iter()
                .filter(|g| !(g.center[0] > x0 && g.center[0] < x1 && g.center[1] > y0 && g.center[1] < y1))
                .cloned()
                .collect();
            GaussianField::new(kept, 0, "holed".into()).unwrap()
        }
    };
    let path = dir.join(name);
    std::fs::write(&path, field.to_ply_bytes()).unwrap();
    path
}

#[test]
fn defaults_match_published_hyperparameters() {
    let c = PipelineConfig::default();
    assert_eq!(c.sampler.n_target, 10_000_000);
    assert_eq!(c.sampler.tau_m, 2.0);
    assert_eq!(c.field.v_min, 0.05);
    assert_eq!(c.field.alpha_min, 0.0);
    assert_eq!(c.ground.delta, 0.30);
    assert_eq!(c.ground.iters, 1000);
    assert_eq!(c.render.max_pixels, 100_000_000);
    assert_eq!((c.render.r_min, c.render.r_max), (0.0075, 0.05));
    assert_eq!(c.render.rho_target, 1.5);
    assert_eq!(c.render.h_band, 0.18);
    assert_eq!(c.render.dh_bw, 0.25);
    assert_eq!(c.render.t_roof, 0.125);
    assert_eq!(c.render.n_min_roof, 3);
    assert_eq!((c.render.r_roof, c.render.r_ground), (1, 1));
    assert_eq!(c.render.ssaa, 2);
    assert_eq!(c.inpaint.s_small, 12);
    assert_eq!(c.inpaint.knn_k, 6);
    assert_eq!(c.inpaint.knn_radius, 4.0);
    assert_eq!(c.inpaint.m_crop, 0.20);
    assert_eq!(c.vocab.k, 256);
    assert_eq!(c.vocab.n_gmm, 500_000);
    assert_eq!(c.vocab.aggregator, Aggregator::Fisher);
    assert_eq!(c.sweep.ks, vec![16, 32, 64, 128, 256, 512]);
    assert_eq!(c.sweep.n_gmms, vec![100_000, 500_000, 1_000_000, 2_000_000]);

    let out = sfgeo(&["config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let printed: PipelineConfig = toml::from_str(&text).unwrap();
    assert_eq!(printed, c);
    assert!(text.contains(&c.digest()));
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 5\n[vocab]\nk = 64\n").unwrap();
    let out = sfgeo(&["--config", s(&cfg), "--set", "render.rho_target=2", "config"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed: PipelineConfig = toml::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!((printed.seed, printed.vocab.k, printed.render.rho_target), (5, 64, 2.0));
    assert_eq!(printed.sampler.seed, 5);
    assert_eq!(sfgeo(&["--set", "vocab.nope=1", "config"]).status.code(), Some(1));
    assert_eq!(sfgeo(&["--set", "field.v_min=3", "config"]).status.code(), Some(1));
}

#[test]
fn render_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ply = write_scene(dir.path(), "box.ply", None);
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = sfgeo(&["render", s(&ply), "--out", s(&out_dir), "--seed", "3", "--set", "sampler.n_target=200000"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        reports.push(RenderReport::read(&out_dir).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert!(reports[0].outputs.contains_key("orthophoto.png"));
    for name in ["orthophoto.png", "raw/roof_mask.png", "raw/raster.json", "render.json"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    let c = dir.path().join("c");
    sfgeo(&["render", s(&ply), "--out", s(&c), "--seed", "4", "--set", "sampler.n_target=200000"]);
    let other = RenderReport::read(&c).unwrap();
    assert_ne!(other.config_digest, reports[0].config_digest);
    assert_ne!(other.outputs["orthophoto.png"], reports[0].outputs["orthophoto.png"]);
}

#[test]
fn large_holes_without_fallback_are_pending() {
    let dir = tempfile::tempdir().unwrap();
    let ply = write_scene(dir.path(), "holed.ply", Some([2.0, 2.0, 5.0, 5.0]));
    let out_dir = dir.path().join("render");
    let out = sfgeo(&["render", s(&ply), "--out", s(&out_dir), "--no-fallback", "--set", "sampler.n_target=200000"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let report = RenderReport::read(&out_dir).unwrap();
    assert!(report.pending);
    assert!(!out_dir.join("orthophoto.png").exists());
    let job_id = report.job_id.clone().unwrap();
    let job = out_dir.join("jobs").join(&job_id);
    for f in ["image.png", "mask.png", "holes.png", "meta.json"] {
        assert!(job.join(f).exists(), "{f}");
    }

    // exporting again reproduces the same job
    let jobs2 = dir.path().join("jobs2");
    assert_eq!(sfgeo(&["export-jobs", s(&out_dir), "--jobs", s(&jobs2)]).status.code(), Some(3));
    assert_eq!(std::fs::read(jobs2.join(&job_id).join("mask.png")).unwrap(), std::fs::read(job.join("mask.png")).unwrap());

    assert_eq!(sfgeo(&["import-jobs", s(&out_dir), "--jobs", s(&jobs2)]).status.code(), Some(3));
    std::fs::copy(jobs2.join(&job_id).join("image.png"), jobs2.join(&job_id).join("completed.png")).unwrap();
    assert_eq!(sfgeo(&["import-jobs", s(&out_dir), "--jobs", s(&jobs2)]).status.code(), Some(0));
    assert!(!RenderReport::read(&out_dir).unwrap().pending);
    assert!(out_dir.join("orthophoto.png").exists());

    let filled = dir.path().join("filled");
    let out = sfgeo(&["render", s(&ply), "--out", s(&filled), "--set", "sampler.n_target=200000"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(filled.join("orthophoto.png").exists());
}

fn store(side: Side, ids: &[&str], vectors: &[Vec<f64>]) -> DescriptorStore {
    let mut st = DescriptorStore::new(side, Aggregator::Fisher, "vocab", "cfg", vectors[0].len());
    for (id, v) in ids.iter().zip(vectors) {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let g = GlobalDescriptor::new(v.iter().map(|x| x / n).collect(), Aggregator::Fisher, "vocab".into()).unwrap();
        st.push(id, &g).unwrap();
    }
    st
}

#[test]
fn eval_on_five_query_fixture() {
    // one-hot gallery a..e; each query weights three items 3:2:1, so its
    // ranking is those three in weight order followed by the rest by id
    let dir = tempfile::tempdir().unwrap();
    let onehot = |i: usize| (0..5).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let weighted = |w: [(usize, f64); 3]| {
        let mut v = vec![0.0; 5];
        for (i, x) in w {
            v[i] = x;
        }
        v
    };
    let (a, b, c, d, e) = (0, 1, 2, 3, 4);
    let gallery = store(Side::Satellite, &["a", "b", "c", "d", "e"], &(0..5).map(onehot).collect::<Vec<_>>());
    let queries = store(
        Side::Drone,
        &["q1", "q2", "q3", "q4", "q5"],
        &[
            weighted([(a, 3.0), (b, 2.0), (c, 1.0)]),
            weighted([(a, 3.0), (b, 2.0), (c, 1.0)]),
            weighted([(c, 3.0), (a, 2.0), (b, 1.0)]),
            weighted([(d, 3.0), (a, 2.0), (b, 1.0)]),
            weighted([(a, 3.0), (b, 2.0), (e, 1.0)]),
        ],
    );
    let mut gt = GroundTruth::default();
    for (q, g) in [("q1", "a"), ("q2", "b"), ("q3", "c"), ("q4", "d"), ("q5", "e")] {
        gt.insert(q, g);
    }
    let (qp, gp, tp, mp) = (dir.path().join("q.ogds"), dir.path().join("g.ogds"), dir.path().join("gt.json"), dir.path().join("m.json"));
    queries.write(&qp).unwrap();
    gallery.write(&gp).unwrap();
    gt.write(&tp).unwrap();
    let out = sfgeo(&["eval", "--queries", s(&qp), "--gallery", s(&gp), "--gt", s(&tp), "--out", s(&mp)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: MetricsReport = serde_json::from_slice(&std::fs::read(&mp).unwrap()).unwrap();

    // forward: hits for q1, q3, q4; q2's match at rank 2, q5's at rank 3
    let f = report.direction("drone->satellite").unwrap();
    assert_eq!(f.queries, 5);
    assert!((f.recall_at_1 - 0.6).abs() < 1e-12);
    assert!((f.recall_at_5 - 1.0).abs() < 1e-12);
    assert!((f.ap - (1.0 + 0.5 + 1.0 + 1.0 + 1.0 / 3.0) / 5.0).abs() < 1e-12);
    // reverse: b ranks q1, q2 (tied, id order) so its match is second
    let r = report.direction("satellite->drone").unwrap();
    assert!((r.recall_at_1 - 0.8).abs() < 1e-12);
    assert!((r.ap - 0.9).abs() < 1e-12);

    let mut other = store(Side::Satellite, &["a"], &[onehot(0)]);
    other.vocab_digest = "different".into();
    other.write(&gp).unwrap();
    assert_eq!(sfgeo(&["eval", "--queries", s(&qp), "--gallery", s(&gp), "--gt", s(&tp)]).status.code(), Some(1));
}

struct Shared {
    _dir: tempfile::TempDir,
    paths: CorpusPaths,
}

fn corpus() -> &'static Shared {
    static CORPUS: OnceLock<Shared> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::default();
        let cc = CorpusConfig { scenes: 4, ..Default::default() };
        let c = build_corpus(&cc, &cfg).unwrap();
        let f = corpus_features(&c, &cfg).unwrap();
        let paths = write_corpus(&c, &f, &cfg, dir.path()).unwrap();
        Shared { _dir: dir, paths }
    })
}

#[test]
fn sweep_over_two_component_counts() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let out = sfgeo(&[
        "sweep",
        "--drone",
        s(&c.paths.drone_manifest),
        "--satellite",
        s(&c.paths.satellite_manifest),
        "--gt",
        s(&c.paths.gt),
        "--out",
        s(&csv),
        "--k",
        "16,32",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let header: Vec<&str> = lines[0].split(',').collect();
    for col in ["K", "r1_d2s", "ap_d2s", "r1_s2d", "ap_s2d"] {
        assert!(header.contains(&col), "{col}");
    }
    let k_col = header.iter().position(|h| *h == "K").unwrap();
    let ks: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(k_col).unwrap()).collect();
    assert_eq!(ks, ["16", "32"]);
    for l in &lines[1..] {
        for v in l.split(',').skip(5) {
            let x: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&x));
        }
    }
}

#[test]
fn vocabulary_fitting_rejects_satellite_features() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();
    let v = dir.path().join("v.bin");
    let out = sfgeo(&["fit-vocab", "--manifest", s(&c.paths.satellite_manifest), "--out", s(&v), "--seed", "1", "--k", "16"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("satellite-free"));
    assert!(!v.exists());

    // the seed is mandatory
    let out = sfgeo(&["fit-vocab", "--manifest", s(&c.paths.drone_manifest), "--out", s(&v), "--k", "16"]);
    assert!(!out.status.success());
    assert!(!v.exists());
}

fn pipeline_run(dir: &Path, c: &CorpusPaths) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let v = dir.join("v.bin");
    let run = |args: &[&str]| {
        let out = sfgeo(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["fit-vocab", "--manifest", s(&c.drone_manifest), "--out", s(&v), "--seed", "2", "--k", "16"]);
    let (q, g, m) = (dir.join("q.ogds"), dir.join("g.ogds"), dir.join("m.json"));
    run(&["encode", "--manifest", s(&c.drone_manifest), "--vocab", s(&v), "--out", s(&q)]);
    run(&["encode", "--manifest", s(&c.satellite_manifest), "--vocab", s(&v), "--out", s(&g)]);
    run(&["eval", "--queries", s(&q), "--gallery", s(&g), "--gt", s(&c.gt), "--out", s(&m)]);
    (std::fs::read(&q).unwrap(), std::fs::read(&g).unwrap(), std::fs::read(&m).unwrap())
}

#[test]
fn fit_encode_eval_is_byte_identical_across_runs() {
    let c = corpus();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline_run(a.path(), &c.paths);
    let second = pipeline_run(b.path(), &c.paths);
    assert_eq!(first, second);
    let store = DescriptorStore::from_bytes(&first.0).unwrap();
    assert_eq!(store.config_digest, PipelineConfig::default().digest());
    let report: MetricsReport = serde_json::from_slice(&first.2).unwrap();
    assert_eq!(report.config_digest, store.config_digest);
    assert_eq!(report.vocab_digest, store.vocab_digest);

    // a VLAD store cannot be built from a GMM vocabulary
    let out = sfgeo(&[
        "encode",
        "--manifest",
        s(&c.paths.drone_manifest),
        "--vocab",
        s(&a.path().join("v.bin")),
        "--out",
        s(&a.path().join("x.ogds")),
        "--aggregator",
        "vlad",
    ]);
    assert_eq!(out.status.code(), Some(1));
}
