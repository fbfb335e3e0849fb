//! Scene to retrieval through the public API on small synthetic inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfgeo_core::features::{baseline_extract, Side};
use sfgeo_core::fisher_agg::{encode, Aggregator, DescriptorStore, Vocabulary};
use sfgeo_core::ground_plane::{estimate_frame, to_local_frame, GroundConfig};
use sfgeo_core::inpaint::{center_crop, inpaint, InpaintConfig};
use sfgeo_core::ortho_renderer::{render_local, RenderConfig};
use sfgeo_core::point_sampler::{sample_point_cloud, SamplerConfig};
use sfgeo_core::raster::RgbImage;
use sfgeo_core::retrieval::{evaluate, Gallery, GroundTruth};
use sfgeo_core::synthetic::{box_scene, city_block, perturb_tile, SceneParams};
use sfgeo_core::vocabulary::{fit_gmm, subsample_descriptors, EmConfig};

fn render(field: &sfgeo_core::gaussian_field::GaussianField, n: usize, seed: u64) -> RgbImage {
    let cloud = sample_point_cloud(field, &SamplerConfig { n_target: n, tau_m: 2.0, seed }).unwrap();
    let positions: Vec<[f64; 3]> = cloud.points.iter().map(|p| p.position).collect();
    let cfg = GroundConfig::default();
    let frame = estimate_frame(&positions, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let render_cfg = RenderConfig::default();
    let ortho = render_local(&to_local_frame(&cloud, &frame, render_cfg.h_band), &render_cfg).unwrap();
    let filled = inpaint(&ortho, &InpaintConfig::default());
    assert!(!filled.pending());
    center_crop(&filled.image, 0.2).unwrap()
}

#[test]
fn box_scene_render_is_reproducible() {
    let field = box_scene(10.0, [0.2, 0.6, 0.2], [0.8, 0.2, 0.2], [5.0, 5.0], [3.0, 3.0], 4.0, 0.25).unwrap();
    let a = render(&field, 150_000, 3);
    let b = render(&field, 150_000, 3);
    assert_eq!(a, b);
    let c = render(&field, 150_000, 4);
    assert_ne!(a, c);
}

#[test]
fn small_corpus_retrieves_its_own_scenes() {
    let params = SceneParams::default();
    let mut drone = Vec::new();
    let mut sat = Vec::new();
    let mut gt = GroundTruth::default();
    for seed in 1..=3u64 {
        let field = city_block(seed, &params).unwrap();
        let d = render(&field, 400_000, 0);
        let t = perturb_tile(&render(&field, 400_000, 100 + seed), seed, 0.03, 3);
        let (qid, gid) = (format!("q{seed}"), format!("g{seed}"));
        drone.push(baseline_extract(&d, (16, 16)).unwrap().with_identity(&qid, Side::Drone));
        sat.push(baseline_extract(&t, (16, 16)).unwrap().with_identity(&gid, Side::Satellite));
        gt.insert(&qid, &gid);
    }
    let x = subsample_descriptors(&drone, 500_000, 1).unwrap();
    let gmm = fit_gmm(&x, 8, &EmConfig { seed: 1, ..Default::default() }).unwrap().gmm;
    let vocab = Vocabulary::Gmm(gmm);
    let digest = vocab.digest();
    let store = |sets: &[sfgeo_core::features::PatchFeatureSet], side| {
        let mut s = DescriptorStore::new(side, Aggregator::Fisher, &digest, "test", 0);
        for set in sets {
            let g = encode(&vocab, Aggregator::Fisher, set).unwrap();
            if s.is_empty() {
                s = DescriptorStore::new(side, Aggregator::Fisher, &digest, "test", g.dim());
            }
            s.push(&set.meta.image_id, &g).unwrap();
        }
        DescriptorStore::from_bytes(&s.to_bytes()).unwrap()
    };
    let q = Gallery::from_store(&store(&drone, Side::Drone)).unwrap();
    let g = Gallery::from_store(&store(&sat, Side::Satellite)).unwrap();
    let report = evaluate(&q, &g, &gt, "test").unwrap();
    assert_eq!(report.directions[0].recall_at_1, 1.0);
    assert!(subsample_descriptors(&sat, 1000, 1).is_err());
}
