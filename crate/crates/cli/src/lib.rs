//! Command-line workflows: index, query, eval, synth, bench and ablate.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use os2os::eval::{bench_ranking_time, compute_metrics_at, DEFAULT_RANKS};
use os2os::index::{build_index, knn_matches, load_index, save_index, IndexConfig, IndexKind};
use os2os::io::{load_dataset, read_groundtruth, read_manifest, read_results, write_pgm, write_results};
use os2os::pipeline::{baseline_from_matches, diagnostics_jsonl, rank_matches, QueryOptions, RankedResult};
use os2os::synth::{generate, write_to_dir, SynthConfig};
use os2os::verify::{AblationFlags, AngleSpread, ImageScoreMode, VerifyConfig};
use os2os::{Dataset, Error, Index, Result};

#[derive(Debug, Parser)]
#[command(name = "os2os", version, about = "Object-level spatial verification for image retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a descriptor index over a database manifest.
    Index(IndexArgs),
    /// Rank database images for every query in a manifest.
    Query(QueryArgs),
    /// Score a results file against groundtruth.
    Eval(EvalArgs),
    /// Generate a synthetic dataset with planted objects.
    Synth(SynthArgs),
    /// Time the verification stage over a sweep of K.
    Bench(BenchArgs),
    /// Run every step of the ablation ladder and compare metrics.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Flat,
    IvfPq,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScoreModeArg {
    MaxCluster,
    SumClusters,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SpreadArg {
    Circular,
    Linear,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AblateArg {
    PureHough,
    Centroid,
    Cs,
    As,
    Full,
}

impl AblateArg {
    fn flags(self) -> AblationFlags {
        let name = self.to_possible_value().expect("named variant");
        AblationFlags::from_name(name.get_name()).expect("ladder step")
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; explicit flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Database manifest (TSV: id, feature file, width, height).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output index file.
    #[arg(long)]
    pub out: PathBuf,
    /// Index backend.
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// Coarse cells of the inverted file.
    #[arg(long)]
    pub ivf_cells: Option<usize>,
    /// PQ sub-quantizers; must divide the descriptor dimension.
    #[arg(long)]
    pub pq_m: Option<usize>,
    /// Bits per PQ code (only 8 is supported).
    #[arg(long)]
    pub pq_bits: Option<u32>,
    /// Lloyd iterations for quantizer training.
    #[arg(long)]
    pub kmeans_iters: Option<usize>,
    /// Keep raw vectors in the inverted lists instead of PQ codes.
    #[arg(long)]
    pub bypass_pq: bool,
    /// Fraction of database images sampled for quantizer training.
    #[arg(long)]
    pub holdout_fraction: Option<f64>,
    /// Seed for training sample selection and k-means.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct QueryFlags {
    /// Neighbors retrieved per query feature (K).
    #[arg(long)]
    pub k: Option<usize>,
    /// Reference rank for the affinity margin (default K/2).
    #[arg(long)]
    pub reference_rank: Option<usize>,
    /// Inverted-file cells probed per query feature.
    #[arg(long)]
    pub nprobe: Option<usize>,
    /// Window-size divisor b.
    #[arg(long)]
    pub bin_scale: Option<f64>,
    /// Window-size sub-linearity exponent.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// How cluster scores combine into an image score.
    #[arg(long, value_enum)]
    pub score_mode: Option<ScoreModeArg>,
    /// Minimum filtered votes for a cluster to count.
    #[arg(long)]
    pub min_cluster_votes: Option<usize>,
    /// Spread statistic for the angle score.
    #[arg(long, value_enum)]
    pub angle_spread: Option<SpreadArg>,
    /// Ranked images kept per query.
    #[arg(long)]
    pub top_n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Index file written by `index`.
    #[arg(long)]
    pub index: PathBuf,
    /// Query manifest.
    #[arg(long)]
    pub queries: PathBuf,
    /// Output results file (TSV).
    #[arg(long)]
    pub out: PathBuf,
    /// Groundtruth; when given, metrics are written next to the results.
    #[arg(long)]
    pub groundtruth: Option<PathBuf>,
    /// Scoring configuration from the ablation ladder.
    #[arg(long, value_enum)]
    pub ablate: Option<AblateArg>,
    /// Rank by summed match affinity without spatial verification.
    #[arg(long)]
    pub baseline: bool,
    /// Directory receiving one PGM vote map per ranked image.
    #[arg(long)]
    pub vote_maps: Option<PathBuf>,
    /// JSON-lines file with per-cluster details.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    #[command(flatten)]
    pub flags: QueryFlags,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Results file (TSV).
    #[arg(long)]
    pub results: PathBuf,
    /// Groundtruth file.
    #[arg(long)]
    pub groundtruth: PathBuf,
    /// Recall cutoffs, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub ranks: Option<Vec<usize>>,
    /// Metric report JSON (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Precision-recall curve CSV.
    #[arg(long)]
    pub pr_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Index file.
    #[arg(long)]
    pub index: PathBuf,
    /// Query manifest.
    #[arg(long)]
    pub queries: PathBuf,
    /// Neighbor counts to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "25,50,100,200,400")]
    pub ks: Vec<usize>,
    /// Queries averaged per K (default: all).
    #[arg(long)]
    pub max_queries: Option<usize>,
    /// Inverted-file cells probed per query feature.
    #[arg(long)]
    pub nprobe: Option<usize>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Index file.
    #[arg(long)]
    pub index: PathBuf,
    /// Query manifest.
    #[arg(long)]
    pub queries: PathBuf,
    /// Groundtruth file.
    #[arg(long)]
    pub groundtruth: PathBuf,
    /// Directory for per-step results and the summary CSV.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Recall cutoffs, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub ranks: Option<Vec<usize>>,
    #[command(flatten)]
    pub flags: QueryFlags,
    #[command(flatten)]
    pub common: Common,
}

/// Effective configuration of a run, written as `run.json` beside outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub index: IndexConfig,
    pub verify: VerifyConfig,
    pub ablation: AblationFlags,
    pub top_n: usize,
    pub holdout_fraction: f64,
    pub workers: Option<usize>,
    pub paths: Vec<(String, PathBuf)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            index: IndexConfig::default(),
            verify: VerifyConfig::default(),
            ablation: AblationFlags::FULL,
            top_n: 100,
            holdout_fraction: 0.1,
            workers: None,
            paths: Vec::new(),
        }
    }
}

/// Process exit code for an engine error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } => 3,
        Error::Format(_) | Error::Validation(_) | Error::NotFound(_) => 4,
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &common.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    Ok(cfg)
}

fn apply_query_flags(cfg: &mut RunConfig, f: &QueryFlags) {
    if let Some(k) = f.k {
        cfg.index = cfg.index.clone().with_k(k);
    }
    if let Some(r) = f.reference_rank {
        cfg.index.reference_rank = r;
    }
    if let Some(n) = f.nprobe {
        cfg.index.nprobe = n;
    }
    if let Some(b) = f.bin_scale {
        cfg.verify.bin_scale = b;
    }
    if let Some(e) = f.epsilon {
        cfg.verify.epsilon = e;
    }
    if let Some(m) = f.score_mode {
        cfg.verify.image_score_mode = match m {
            ScoreModeArg::MaxCluster => ImageScoreMode::MaxCluster,
            ScoreModeArg::SumClusters => ImageScoreMode::SumClusters,
        };
    }
    if let Some(v) = f.min_cluster_votes {
        cfg.verify.min_cluster_votes = v;
    }
    if let Some(s) = f.angle_spread {
        cfg.verify.angle_spread = match s {
            SpreadArg::Circular => AngleSpread::Circular,
            SpreadArg::Linear => AngleSpread::Linear,
        };
    }
    if let Some(n) = f.top_n {
        cfg.top_n = n;
    }
}

fn write_run_json(cfg: &RunConfig, next_to: &Path) -> Result<()> {
    let dir = match next_to.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let text = serde_json::to_string_pretty(cfg).expect("run config serializes");
    write_text(&dir.join("run.json"), &text)
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

fn load_from_manifest(path: &Path) -> Result<Dataset> {
    let mut manifest = read_manifest(path)?;
    load_dataset(&mut manifest)
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Index(a) => cmd_index(a),
        Command::Query(a) => cmd_query(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn cmd_index(a: IndexArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(k) = a.kind {
        cfg.index.kind = match k {
            KindArg::Flat => IndexKind::Flat,
            KindArg::IvfPq => IndexKind::IvfPq,
        };
    }
    if let Some(v) = a.ivf_cells {
        cfg.index.ivf_cells = v;
    }
    if let Some(v) = a.pq_m {
        cfg.index.pq_subquantizers = v;
    }
    if let Some(v) = a.pq_bits {
        cfg.index.pq_bits = v;
    }
    if let Some(v) = a.kmeans_iters {
        cfg.index.kmeans_iterations = v;
    }
    if a.bypass_pq {
        cfg.index.bypass_pq = true;
    }
    if let Some(v) = a.holdout_fraction {
        cfg.holdout_fraction = v;
    }
    if let Some(v) = a.seed {
        cfg.index.seed = v;
    }
    cfg.paths = vec![("manifest".into(), a.manifest.clone()), ("index".into(), a.out.clone())];
    let index = with_pool(cfg.workers, || {
        let ds = load_from_manifest(&a.manifest)?;
        build_index(&ds, &cfg.index, cfg.holdout_fraction)
    })?;
    ensure_parent(&a.out)?;
    save_index(&index, &a.out)?;
    write_run_json(&cfg, &a.out)?;
    eprintln!(
        "indexed {} images ({} descriptors) into {}",
        index.images.len(),
        index.images.rows(),
        a.out.display()
    );
    Ok(())
}

struct QueryRun {
    results: Vec<RankedResult>,
}

fn run_all(index: &Index, queries: &Dataset, cfg: &RunConfig, flags: &AblationFlags, baseline: bool, opts: &QueryOptions) -> Result<QueryRun> {
    let results = queries
        .images()
        .par_iter()
        .map(|q| {
            let matches = knn_matches(q, index, &cfg.index)?;
            if baseline {
                Ok(baseline_from_matches(&q.image_id, &matches, &index.images, opts.top_n))
            } else {
                rank_matches(q, &matches, &index.images, &cfg.verify, flags, opts)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QueryRun { results })
}

fn metrics_ranks(r: &Option<Vec<usize>>) -> Vec<usize> {
    r.clone().unwrap_or_else(|| DEFAULT_RANKS.to_vec())
}

fn cmd_query(a: QueryArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    apply_query_flags(&mut cfg, &a.flags);
    if let Some(step) = a.ablate {
        cfg.ablation = step.flags();
    }
    cfg.index.validate_query()?;
    cfg.verify.validate()?;
    cfg.paths = vec![
        ("index".into(), a.index.clone()),
        ("queries".into(), a.queries.clone()),
        ("results".into(), a.out.clone()),
    ];
    let opts = QueryOptions {
        top_n: cfg.top_n,
        keep_clusters: a.diagnostics.is_some(),
        keep_vote_maps: a.vote_maps.is_some(),
    };
    let index = load_index(&a.index)?;
    let gt = a.groundtruth.as_deref().map(read_groundtruth).transpose()?;
    let run = with_pool(cfg.workers, || {
        let queries = load_from_manifest(&a.queries)?;
        run_all(&index, &queries, &cfg, &cfg.ablation, a.baseline, &opts)
    })?;
    ensure_parent(&a.out)?;
    write_results(&run.results, &a.out)?;
    if let Some(path) = &a.diagnostics {
        let text: String = run.results.iter().map(diagnostics_jsonl).collect();
        write_text(path, &text)?;
    }
    if let Some(dir) = &a.vote_maps {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        for r in &run.results {
            for (image, map) in r.vote_maps.iter().flatten() {
                write_pgm(dir.join(format!("{}__{}.pgm", r.query_id, image)), map.width, map.height, &map.values)?;
            }
        }
    }
    if let Some(gt) = &gt {
        let report = compute_metrics_at(&run.results, gt, &DEFAULT_RANKS)?;
        write_text(&a.out.with_extension("metrics.json"), &report.to_json())?;
        eprintln!("MAP {:.4}", report.map);
    }
    write_run_json(&cfg, &a.out)?;
    eprintln!("ranked {} queries into {}", run.results.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let results = read_results(&a.results)?;
    let gt = read_groundtruth(&a.groundtruth)?;
    let report = compute_metrics_at(&results, &gt, &metrics_ranks(&a.ranks))?;
    match &a.out {
        Some(p) => write_text(p, &report.to_json())?,
        None => println!("{}", report.to_json()),
    }
    if let Some(p) = &a.pr_csv {
        write_text(p, &report.pr_curve_csv())?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let out = generate(&cfg)?;
    write_to_dir(&out, &a.out)?;
    let text = serde_json::to_string_pretty(&cfg).expect("synth config serializes");
    write_text(&a.out.join("run.json"), &text)?;
    eprintln!(
        "wrote {} database images, {} queries and {} plants to {}",
        out.database.len(),
        out.queries.len(),
        out.plants.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let index = load_index(&a.index)?;
    let queries = load_from_manifest(&a.queries)?;
    let take = a.max_queries.unwrap_or(queries.len()).min(queries.len());
    let qs: Vec<_> = queries.images().iter().take(take).collect();
    let nprobe = a.nprobe.unwrap_or(IndexConfig::default().nprobe);
    let report = bench_ranking_time(&qs, &index, &a.ks, nprobe, &VerifyConfig::default())?;
    match &a.out {
        Some(p) => write_text(p, &report.to_csv())?,
        None => print!("{}", report.to_csv()),
    }
    eprintln!("log-log slope {:.3}", report.log_log_slope);
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    apply_query_flags(&mut cfg, &a.flags);
    cfg.index.validate_query()?;
    cfg.verify.validate()?;
    let ranks = metrics_ranks(&a.ranks);
    let index = load_index(&a.index)?;
    let gt = read_groundtruth(&a.groundtruth)?;
    let opts = QueryOptions::top(cfg.top_n);
    let mut summary = format!(
        "step,map,{}\n",
        ranks.iter().map(|k| format!("recall@{k}")).collect::<Vec<_>>().join(",")
    );
    let rows = with_pool(cfg.workers, || {
        let queries = load_from_manifest(&a.queries)?;
        // neighbors do not depend on the scoring flags
        let matches = queries
            .images()
            .par_iter()
            .map(|q| knn_matches(q, &index, &cfg.index))
            .collect::<Result<Vec<_>>>()?;
        AblationFlags::ladder()
            .into_iter()
            .map(|(name, flags)| {
                let results = queries
                    .images()
                    .par_iter()
                    .zip(&matches)
                    .map(|(q, m)| rank_matches(q, m, &index.images, &cfg.verify, &flags, &opts))
                    .collect::<Result<Vec<_>>>()?;
                let report = compute_metrics_at(&results, &gt, &ranks)?;
                Ok((name, results, report))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    for (name, results, report) in &rows {
        write_results(results, a.out_dir.join(format!("{name}.tsv")))?;
        let recalls: Vec<String> = report.recall_at.values().map(|r| format!("{r:.6}")).collect();
        summary.push_str(&format!("{name},{:.6},{}\n", report.map, recalls.join(",")));
    }
    write_text(&a.out_dir.join("ablation.csv"), &summary)?;
    write_run_json(&cfg, &a.out_dir.join("ablation.csv"))?;
    print!("{summary}");
    Ok(())
}
