//! Argument parsing and subcommand dispatch.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sfgeo_core::features::Side;
use sfgeo_core::fisher_agg::{Aggregator, DescriptorStore, Vocabulary};
use sfgeo_core::raster::write_bytes;
use sfgeo_core::retrieval::GroundTruth;
use sfgeo_core::synthetic::city_block;

use crate::config::PipelineConfig;
use crate::corpus::{build_corpus, corpus_features, scene_id, write_corpus, CorpusConfig};
use crate::pipeline::{
    import_into_render_dir, job_from_render_dir, load_field, render_dirs, render_field, write_render, ImportStatus,
};
use crate::stages::{
    encode_sets, evaluate_stores, extract, fit_vocabulary, load_manifest, resolve_inputs, run_sweep, sweep_cells,
    sweep_csv, write_vocabulary, SweepGroup,
};
use crate::{EXIT_OK, EXIT_PENDING};

#[derive(Debug, Parser)]
#[command(name = "sfgeo", version, about = "Pseudo-orthophotos and drone-only retrieval descriptors from splat scenes")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration; unspecified keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set render.rho_target=2.0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a splat scene into a pseudo-orthophoto.
    Render(RenderArgs),
    /// Compute baseline patch features for images or render directories.
    Extract(ExtractArgs),
    /// Fit a drone-only vocabulary (GMM or k-means codebook).
    FitVocab(FitVocabArgs),
    /// Encode a feature manifest into a descriptor store.
    Encode(EncodeArgs),
    /// Score a query store against a gallery store.
    Eval(EvalArgs),
    /// Run the ablation grid and write one CSV row per setting.
    Sweep(SweepArgs),
    /// Write completion jobs for renders waiting on large holes.
    ExportJobs(JobsArgs),
    /// Merge completed jobs back into their render directories.
    ImportJobs(JobsArgs),
    /// Build the synthetic city-block corpus with features and ground truth.
    Synth(SynthArgs),
    /// Print the effective configuration and its digest.
    Config,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Trained splat scene (PLY).
    pub scene: PathBuf,
    /// Camera poses (JSON list) used to estimate visibility.
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root directory for completion jobs [default: <out>/jobs].
    #[arg(long)]
    pub jobs: Option<PathBuf>,
    /// Defaults to the scene file stem.
    #[arg(long)]
    pub scene_id: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Leave large holes for external completion instead of filling them.
    #[arg(long)]
    pub no_fallback: bool,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// PNG images or render directories.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub side: Side,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitVocabArgs {
    /// Drone-side feature manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n_gmm: Option<usize>,
    /// fisher, vlad or softvlad(<alpha>).
    #[arg(long)]
    pub aggregator: Option<Aggregator>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub aggregator: Option<Aggregator>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Metrics JSON output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub drone: PathBuf,
    #[arg(long)]
    pub satellite: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Component counts; selects the components group.
    #[arg(long = "k", value_delimiter = ',')]
    pub ks: Vec<usize>,
    /// Subsample sizes; selects the subsampling group.
    #[arg(long = "n-gmm", value_delimiter = ',')]
    pub n_gmms: Vec<usize>,
    /// SoftVLAD temperatures; selects the aggregation group.
    #[arg(long = "alpha", value_delimiter = ',')]
    pub alphas: Vec<f64>,
    /// Explicit groups; defaults to those implied by the axis flags, or all.
    #[arg(long, value_delimiter = ',')]
    pub groups: Vec<String>,
}

#[derive(Debug, Args)]
pub struct JobsArgs {
    /// Render directories, or directories containing them.
    #[arg(required = true)]
    pub renders: Vec<PathBuf>,
    #[arg(long)]
    pub jobs: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub scenes: usize,
    #[arg(long)]
    pub n_target: Option<usize>,
    /// Also write each scene as a splat PLY under `<out>/scenes`.
    #[arg(long)]
    pub ply: bool,
}

/// Loads the configuration file and applies `--set` overrides.
pub fn effective_config(global: &GlobalArgs) -> anyhow::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load_or_default(global.config.as_deref())?;
    if global.overrides.is_empty() {
        return Ok(cfg);
    }
    let mut value = toml::Value::try_from(&cfg)?;
    for item in &global.overrides {
        let (key, raw) = item.split_once('=').with_context(|| format!("override `{item}` is not KEY=VALUE"))?;
        set_path(&mut value, key.trim(), parse_value(raw.trim()))?;
    }
    cfg = value.try_into().context("applying overrides")?;
    let applied = toml::Value::try_from(&cfg)?;
    for item in &global.overrides {
        let key = item.split_once('=').map(|(k, _)| k.trim()).unwrap_or_default();
        if lookup(&applied, key).is_none() {
            bail!("unknown setting `{key}`");
        }
    }
    let seed = cfg.seed;
    cfg.set_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().with_context(|| format!("`{key}` does not name a setting"))?;
        if i + 1 == parts.len() {
            let slot = table.entry(*part).or_insert_with(|| value.clone());
            *slot = coerce(slot, value);
            return Ok(());
        }
        node = table.get_mut(*part).with_context(|| format!("unknown setting `{key}`"))?;
    }
    bail!("empty setting name")
}

fn lookup<'a>(root: &'a toml::Value, key: &str) -> Option<&'a toml::Value> {
    key.split('.').try_fold(root, |node, part| node.as_table()?.get(part))
}

/// Integer literals given for float settings become floats.
fn coerce(old: &toml::Value, new: toml::Value) -> toml::Value {
    match (old, &new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
        _ => new,
    }
}

pub fn run(cli: Cli) -> anyhow::Result<i32> {
    let mut cfg = effective_config(&cli.global)?;
    match cli.command {
        Command::Render(a) => cmd_render(&mut cfg, a),
        Command::Extract(a) => {
            let inputs = resolve_inputs(&a.inputs)?;
            let path = extract(&inputs, a.side, &cfg, &a.out)?;
            println!("{} feature files, manifest {}", inputs.len(), path.display());
            Ok(EXIT_OK)
        }
        Command::FitVocab(a) => cmd_fit_vocab(&mut cfg, a),
        Command::Encode(a) => cmd_encode(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Sweep(a) => cmd_sweep(&mut cfg, a),
        Command::ExportJobs(a) => cmd_export_jobs(&a),
        Command::ImportJobs(a) => cmd_import_jobs(&a),
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            println!("# digest {}", cfg.digest());
            Ok(EXIT_OK)
        }
    }
}

fn cmd_render(cfg: &mut PipelineConfig, a: RenderArgs) -> anyhow::Result<i32> {
    if let Some(seed) = a.seed {
        cfg.set_seed(seed);
    }
    if a.no_fallback {
        cfg.inpaint.fallback = false;
    }
    let out = a
        .out
        .or_else(|| cfg.paths.out.clone())
        .context("no output directory (--out or paths.out)")?;
    let jobs = a.jobs.or_else(|| cfg.paths.jobs.clone()).unwrap_or_else(|| out.join("jobs"));
    let scene_id = match a.scene_id {
        Some(id) => id,
        None => a.scene.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into()),
    };
    let field = load_field(&a.scene, a.cameras.as_deref(), cfg)?;
    let outcome = render_field(&field, cfg, &scene_id)?;
    let report = write_render(&outcome, cfg, &out, &jobs)?;
    let spec = &report.spec;
    println!("{scene_id}: {}x{} at {:.4} m/px -> {}", spec.width, spec.height, spec.resolution, out.display());
    if report.pending {
        println!("pending completion job {}", report.job_id.as_deref().unwrap_or("?"));
        return Ok(EXIT_PENDING);
    }
    Ok(EXIT_OK)
}

fn cmd_fit_vocab(cfg: &mut PipelineConfig, a: FitVocabArgs) -> anyhow::Result<i32> {
    cfg.set_seed(a.seed);
    if let Some(k) = a.k {
        cfg.vocab.k = k;
    }
    if let Some(n) = a.n_gmm {
        cfg.vocab.n_gmm = n;
    }
    if let Some(agg) = a.aggregator {
        cfg.vocab.aggregator = agg;
    }
    cfg.validate()?;
    let (manifest, sets) = load_manifest(&a.manifest)?;
    if manifest.side != Side::Drone {
        return Err(sfgeo_core::Error::SatelliteFreeViolation(format!(
            "{} is a {} manifest; vocabularies are fitted on drone features only",
            a.manifest.display(),
            manifest.side
        ))
        .into());
    }
    let v = &cfg.vocab;
    let (vocab, mut report) = fit_vocabulary(&sets, v.aggregator, v.k, v.n_gmm, cfg.seed, &v.em, &v.kmeans)?;
    report.config_digest = cfg.digest();
    write_vocabulary(&vocab, &report, &a.out)?;
    println!("{} K={} on {} descriptors, digest {}", report.kind, report.k, report.samples, report.vocab_digest);
    Ok(EXIT_OK)
}

fn cmd_encode(cfg: &PipelineConfig, a: EncodeArgs) -> anyhow::Result<i32> {
    let aggregator = a.aggregator.unwrap_or(cfg.vocab.aggregator);
    let (manifest, sets) = load_manifest(&a.manifest)?;
    let digest = cfg.digest();
    if manifest.config_digest.as_deref().is_some_and(|d| d != digest) {
        log::warn!("{} was extracted under a different configuration", a.manifest.display());
    }
    let vocab = Vocabulary::read(&a.vocab)?;
    let store = encode_sets(&sets, manifest.side, &vocab, aggregator, &digest)?;
    store.write(&a.out)?;
    println!("{} {} descriptors of dim {} -> {}", store.len(), aggregator, store.dim(), a.out.display());
    Ok(EXIT_OK)
}

fn cmd_eval(cfg: &PipelineConfig, a: EvalArgs) -> anyhow::Result<i32> {
    let queries = DescriptorStore::read(&a.queries)?;
    let gallery = DescriptorStore::read(&a.gallery)?;
    let gt = GroundTruth::read(&a.gt)?;
    let report = evaluate_stores(&queries, &gallery, &gt, &cfg.digest())?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        write_bytes(out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    if let Some(csv) = &a.csv {
        write_bytes(csv, report.to_csv().as_bytes())?;
    }
    Ok(EXIT_OK)
}

fn parse_groups(a: &SweepArgs) -> anyhow::Result<Vec<SweepGroup>> {
    let mut groups = Vec::new();
    for g in &a.groups {
        groups.push(match g.as_str() {
            "aggregation" => SweepGroup::Aggregation,
            "components" => SweepGroup::Components,
            "subsampling" => SweepGroup::Subsampling,
            other => bail!("unknown sweep group `{other}`"),
        });
    }
    if groups.is_empty() {
        if !a.alphas.is_empty() {
            groups.push(SweepGroup::Aggregation);
        }
        if !a.ks.is_empty() {
            groups.push(SweepGroup::Components);
        }
        if !a.n_gmms.is_empty() {
            groups.push(SweepGroup::Subsampling);
        }
    }
    if groups.is_empty() {
        groups = vec![SweepGroup::Aggregation, SweepGroup::Components, SweepGroup::Subsampling];
    }
    Ok(groups)
}

fn cmd_sweep(cfg: &mut PipelineConfig, a: SweepArgs) -> anyhow::Result<i32> {
    let groups = parse_groups(&a)?;
    if !a.ks.is_empty() {
        cfg.sweep.ks = a.ks.clone();
    }
    if !a.n_gmms.is_empty() {
        cfg.sweep.n_gmms = a.n_gmms.clone();
    }
    if !a.alphas.is_empty() {
        cfg.sweep.alphas = a.alphas.clone();
    }
    cfg.validate()?;
    let (dm, drone) = load_manifest(&a.drone)?;
    let (sm, satellite) = load_manifest(&a.satellite)?;
    if dm.side != Side::Drone || sm.side != Side::Satellite {
        bail!("sweep expects a drone manifest and a satellite manifest");
    }
    let gt = GroundTruth::read(&a.gt)?;
    let cells = sweep_cells(cfg, &groups);
    let rows = run_sweep(&drone, &satellite, &gt, &cells, cfg)?;
    let csv = sweep_csv(&rows);
    write_bytes(&a.out, csv.as_bytes())?;
    print!("{csv}");
    Ok(EXIT_OK)
}

fn collect_render_dirs(roots: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for r in roots {
        let found = render_dirs(r)?;
        if found.is_empty() {
            bail!("no render directory under {}", r.display());
        }
        dirs.extend(found);
    }
    Ok(dirs)
}

fn cmd_export_jobs(a: &JobsArgs) -> anyhow::Result<i32> {
    let mut written = 0;
    for dir in collect_render_dirs(&a.renders)? {
        if let Some(job) = job_from_render_dir(&dir)? {
            let path = job.write(&a.jobs)?;
            println!("{} -> {}", dir.display(), path.display());
            written += 1;
        }
    }
    println!("{written} job(s) exported");
    Ok(if written > 0 { EXIT_PENDING } else { EXIT_OK })
}

fn cmd_import_jobs(a: &JobsArgs) -> anyhow::Result<i32> {
    let mut pending = 0;
    for dir in collect_render_dirs(&a.renders)? {
        match import_into_render_dir(&dir, &a.jobs)? {
            ImportStatus::Completed => println!("{}: completed", dir.display()),
            ImportStatus::AlreadyComplete => {}
            ImportStatus::StillPending => {
                println!("{}: still pending", dir.display());
                pending += 1;
            }
        }
    }
    Ok(if pending > 0 { EXIT_PENDING } else { EXIT_OK })
}

fn cmd_synth(cfg: &PipelineConfig, a: SynthArgs) -> anyhow::Result<i32> {
    let mut cc = CorpusConfig { scenes: a.scenes, ..Default::default() };
    if let Some(n) = a.n_target {
        cc.n_target = n;
    }
    if a.ply {
        for i in 0..cc.scenes {
            let field = city_block(cc.first_seed + i as u64, &cc.scene)?;
            write_bytes(&a.out.join("scenes").join(format!("{}.ply", scene_id(i))), &field.to_ply_bytes())?;
        }
    }
    let corpus = build_corpus(&cc, cfg)?;
    let feats = corpus_features(&corpus, cfg)?;
    let paths = write_corpus(&corpus, &feats, cfg, &a.out)?;
    write_bytes(&a.out.join("corpus.json"), serde_json::to_string_pretty(&cc)?.as_bytes())?;
    println!("drone manifest     {}", paths.drone_manifest.display());
    println!("satellite manifest {}", paths.satellite_manifest.display());
    println!("ground truth       {}", paths.gt.display());
    Ok(EXIT_OK)
}
