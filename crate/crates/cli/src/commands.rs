//! Subcommand definitions and handlers.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sparsearch::autotune::{ga_tune, gemm_bench, GaConfig, GemmShape, Menus, TuneCache, TuneKey};
use sparsearch::latency::{
    build_table, estimate, host_bench, read_table, BenchSpec, LatencyTable, LayerDescriptor, LayerType, Provenance,
    SchemeKey,
};
use sparsearch::nn::Model;
use sparsearch::predictor::{ucb, PredictorEnsemble};
use sparsearch::pruning::{format_prune_report, one_shot_prune, reweighted_determine_ratios, LayerPrune};
use sparsearch::search::{format_report, report, run_search, ObservationStore};
use sparsearch::search_space::{bits_to_string, parse_bits, BlockChoice, Candidate, PruningScheme, SearchSpace};
use sparsearch::sparse::{read_bcs, write_bcs, BcsMatrix, KernelConfig};
use sparsearch::supernet::{PathModel, Supernet, SupernetConfig};

use crate::artifact::{stamp_after_first_line, write_atomic, Stamp};
use crate::config::{CellCount, PipelineConfig};
use crate::pipeline::{self, RunOptions};
use crate::{job_count, CliError, StageResult};

#[derive(Debug, Parser)]
#[command(name = "sparsearch", version, about = "Latency-aware joint architecture and pruning search")]
pub struct Cli {
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a latency table for the configured supernet.
    Latbuild(LatbuildArgs),
    /// Look up one layer or estimate a whole candidate.
    Latquery(LatqueryArgs),
    /// Supernet training and path extraction.
    #[command(subcommand)]
    Supernet(SupernetCmd),
    /// Candidate search and its report.
    #[command(subcommand)]
    Search(SearchCmd),
    /// One-shot magnitude pruning of a path model.
    Prune(PruneArgs),
    /// Automatic per-layer ratios by reweighted group Lasso.
    Ratios(RatiosArgs),
    /// Block-compressed storage tools.
    #[command(subcommand)]
    Bcs(BcsCmd),
    /// Genetic tuning of the sparse kernel schedule.
    Tune(TuneArgs),
    /// Speedup-versus-ratio curves on the host CPU.
    Bench(BenchArgs),
    /// All three stages end to end.
    Pipeline(PipelineArgs),
    /// Print the summary of a finished pipeline run.
    Report(ReportArgs),
    /// Reward predictor ensembles.
    #[command(subcommand)]
    Predictor(PredictorCmd),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Pipeline configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    pub fn load(&self) -> Result<PipelineConfig, CliError> {
        match &self.config {
            Some(p) => PipelineConfig::load(p),
            None => Ok(PipelineConfig::default()),
        }
    }
}

#[derive(Debug, Args)]
pub struct LatbuildArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LatqueryArgs {
    #[arg(long)]
    pub table: PathBuf,
    /// Candidate text (`cells=AB;schemes=C,P,B,B`) or bit string; estimates the whole model.
    #[arg(long, conflicts_with = "layer")]
    pub candidate: Option<String>,
    /// Per-layer ratios for `--candidate`, comma separated (default all 0).
    #[arg(long, value_delimiter = ',', requires = "candidate")]
    pub ratios: Vec<f64>,
    #[command(flatten)]
    pub config: ConfigArg,
    /// Layer type: conv1x1, conv3x3, conv5x5, skip_add or pixel_shuffle.
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub in_ch: usize,
    #[arg(long, default_value_t = 8)]
    pub out_ch: usize,
    #[arg(long, default_value_t = 8)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    /// dense, channel, pattern or block.
    #[arg(long, default_value = "dense")]
    pub scheme: String,
    #[arg(long, default_value_t = 0.0)]
    pub ratio: f64,
}

#[derive(Debug, Subcommand)]
pub enum SupernetCmd {
    /// Single-path training on the synthetic task.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Copy one path's weights into a standalone model.
    Extract {
        #[arg(long)]
        supernet: PathBuf,
        /// Block letters, e.g. `AB`.
        #[arg(long)]
        path: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum SearchCmd {
    /// Run or continue a search against a trained supernet.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        supernet: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Continue after the last step recorded in the store.
        #[arg(long)]
        resume: bool,
    },
    /// Ranked candidates with latency, speedup and real-time flag.
    Report {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Cell count of the searched space (default from the configuration).
        #[arg(long)]
        cells: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// One scheme per prunable layer (letters or names).
    #[arg(long, value_delimiter = ',')]
    pub schemes: Vec<PruningScheme>,
    /// One ratio per prunable layer, or a single ratio for all.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Vec<f64>,
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RatiosArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub schemes: Vec<PruningScheme>,
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum BcsCmd {
    /// Pack one prunable layer of a model; zero weights are dropped.
    Pack {
        #[arg(long)]
        model: PathBuf,
        /// Layer name, e.g. `cell0.block0.conv0`.
        #[arg(long)]
        layer: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a BCS file to a dense CSV matrix.
    Unpack {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dense versus sparse GEMM timing per scheme and ratio.
    Bench(CurveArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CurveArgs {
    #[arg(long, default_value_t = 24)]
    pub in_ch: usize,
    #[arg(long, default_value_t = 48)]
    pub out_ch: usize,
    #[arg(long, default_value_t = 180)]
    pub height: usize,
    #[arg(long, default_value_t = 320)]
    pub width: usize,
    #[arg(long, value_delimiter = ',', default_values_t = PruningScheme::ALL.to_vec())]
    pub schemes: Vec<PruningScheme>,
    #[arg(long, value_delimiter = ',', default_values_t = sparsearch::latency::DEFAULT_GRID.to_vec())]
    pub grid: Vec<f64>,
    /// Timings per point; the median is kept.
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub curve: CurveArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TuneScheme {
    Dense,
    Channel,
    Pattern,
    Block,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long, default_value_t = 48)]
    pub rows: usize,
    #[arg(long, default_value_t = 216)]
    pub k: usize,
    #[arg(long, default_value_t = 57600)]
    pub n: usize,
    /// Kernel side of the convolution behind the GEMM.
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, value_enum, default_value_t = TuneScheme::Block)]
    pub scheme: TuneScheme,
    #[arg(long, default_value_t = 0.9)]
    pub ratio: f64,
    #[arg(long, default_value_t = 16)]
    pub population: usize,
    #[arg(long, default_value_t = 20)]
    pub generations: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tuned-config cache to update.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Overrides `output_dir` from the configuration.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Continue completed stages and the search store of a previous run.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory of a pipeline run.
    #[arg(long)]
    pub dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum PredictorCmd {
    /// Fit an ensemble to a search store.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        cells: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score encodings, one per line, as `encoding,mean,std,ucb`.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        cells: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
    },
}

/// Runs one parsed command, writing results to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Latbuild(a) => latbuild(a),
        Command::Latquery(a) => latquery(a),
        Command::Supernet(c) => supernet(c),
        Command::Search(c) => search(c),
        Command::Prune(a) => prune(a),
        Command::Ratios(a) => ratios(a),
        Command::Bcs(c) => bcs(c),
        Command::Tune(a) => tune(a),
        Command::Bench(a) => {
            let text = speedup_curves(&a.curve)?;
            emit(a.curve.out.as_deref(), &text)
        }
        Command::Pipeline(a) => pipeline_cmd(a),
        Command::Report(a) => {
            let text = fs::read_to_string(a.dir.join(pipeline::REPORT_FILE))
                .map_err(|e| CliError::Config(format!("{}: {e}", a.dir.display())))?;
            print!("{text}");
            Ok(())
        }
        Command::Predictor(c) => predictor(c),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()).stage("output"),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn stamp(cfg: &PipelineConfig) -> Stamp {
    Stamp::new(cfg.hash(), cfg.seed)
}

fn open_table(path: &Path) -> Result<LatencyTable, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    read_table(BufReader::new(f)).map_err(|e| CliError::Config(e.to_string()))
}

fn net_config(cfg: &PipelineConfig, cells: Option<usize>) -> Result<SupernetConfig, CliError> {
    let cells = match (cells, cfg.cells) {
        (Some(n), _) | (None, CellCount::Fixed(n)) => n,
        (None, CellCount::Auto) => {
            return Err(CliError::Config("cell count is \"auto\"; pass --cells or pin it in the configuration".into()))
        }
    };
    Ok(SupernetConfig { cells, ..cfg.supernet })
}

/// Accepts the text form or a raw bit string.
pub fn parse_candidate(space: &SearchSpace, s: &str) -> Result<Candidate, CliError> {
    let s = s.trim();
    let parsed = if s.contains('=') {
        space.parse_candidate(s)
    } else {
        parse_bits(s).and_then(|b| space.decode(&b))
    };
    parsed.map_err(|e| CliError::Config(format!("candidate {s:?}: {e}")))
}

fn latbuild(a: LatbuildArgs) -> Result<(), CliError> {
    let cfg = a.config.load()?;
    let table = pipeline::build_latency_table(&cfg, &cfg.supernet).map_err(|e| pipeline::latency_error("latency", e))?;
    let text = pipeline::table_text(&table, &stamp(&cfg)).stage("latency")?;
    write_atomic(&a.out, text.as_bytes()).stage("latency")?;
    println!("{} entries written to {}", table.len(), a.out.display());
    Ok(())
}

fn latquery(a: LatqueryArgs) -> Result<(), CliError> {
    let table = open_table(&a.table)?;
    if let Some(c) = &a.candidate {
        let cfg = a.config.load()?;
        let space_net = |n| SupernetConfig { cells: n, ..cfg.supernet };
        // The cell count follows from the candidate itself.
        let cells = if c.contains('=') {
            c.parse::<Candidate>().map_err(|e| CliError::Config(e.to_string()))?.cells.len()
        } else {
            net_config(&cfg, None)?.cells
        };
        let net = space_net(cells);
        let cand = parse_candidate(&net.search_space(), c)?;
        let mut layers = net.candidate_layers(&cand).stage("latency")?;
        let searched = layers.iter().filter(|l| l.scheme.is_some()).count();
        if !a.ratios.is_empty() && a.ratios.len() != searched {
            return Err(CliError::Config(format!("{} ratios for {searched} searched layers", a.ratios.len())));
        }
        let mut it = a.ratios.iter();
        for l in layers.iter_mut().filter(|l| l.scheme.is_some()) {
            l.ratio = it.next().copied().unwrap_or(0.0);
        }
        let est = estimate(&layers, &table, cfg.latency.overhead_ms).map_err(|e| CliError::Config(e.to_string()))?;
        println!("layer,scheme,ratio,latency_ms");
        for (l, ms) in layers.iter().zip(&est.per_layer_ms) {
            println!("{},{},{},{}", l.desc, l.key(), l.ratio, ms);
        }
        println!("total_ms={}", est.total_ms);
        return Ok(());
    }
    let layer = a
        .layer
        .as_deref()
        .ok_or_else(|| CliError::Config("pass --layer or --candidate".into()))?;
    let lt: LayerType = layer.parse().map_err(|e: sparsearch::latency::LatencyError| CliError::Config(e.to_string()))?;
    let desc = LayerDescriptor::new(lt, a.in_ch, a.out_ch, a.height, a.width).map_err(|e| CliError::Config(e.to_string()))?;
    let key: SchemeKey = a.scheme.parse().map_err(|e: sparsearch::latency::LatencyError| CliError::Config(e.to_string()))?;
    let ms = table.lookup(&desc, key, a.ratio).map_err(|e| CliError::Config(e.to_string()))?;
    println!("{ms}");
    Ok(())
}

fn supernet(c: SupernetCmd) -> Result<(), CliError> {
    match c {
        SupernetCmd::Train { config, out } => {
            let cfg = config.load()?;
            let net = net_config(&cfg, None)?;
            let (train, val) = pipeline::datasets(&cfg)?;
            let sn = pipeline::train_supernet(&cfg, net, &train)?;
            sn.save(&out).stage("supernet")?;
            println!("path,val_mse");
            for path in all_paths(net.cells) {
                let loss = sn.path_loss(&path, &val).stage("supernet")?;
                println!("{},{loss}", path.iter().map(|b| b.letter()).collect::<String>());
            }
            Ok(())
        }
        SupernetCmd::Extract { supernet, path, out } => {
            let sn = Supernet::load(&supernet).stage("supernet")?;
            let choices = parse_path(&path)?;
            let m = sn.extract_path(&choices).map_err(|e| CliError::Config(e.to_string()))?;
            m.save(&out).stage("supernet")?;
            println!("{} parameters written to {}", m.param_count(), out.display());
            Ok(())
        }
    }
}

fn all_paths(cells: usize) -> Vec<Vec<BlockChoice>> {
    let mut out = vec![Vec::new()];
    for _ in 0..cells {
        out = out
            .into_iter()
            .flat_map(|p| BlockChoice::ALL.iter().map(move |&b| [p.clone(), vec![b]].concat()))
            .collect();
    }
    out
}

fn parse_path(s: &str) -> Result<Vec<BlockChoice>, CliError> {
    s.trim()
        .chars()
        .map(|c| match c.to_ascii_uppercase() {
            'A' => Ok(BlockChoice::TypeA),
            'B' => Ok(BlockChoice::TypeB),
            other => Err(CliError::Config(format!("unknown block {other:?}"))),
        })
        .collect()
}

fn search(c: SearchCmd) -> Result<(), CliError> {
    match c {
        SearchCmd::Run {
            config,
            supernet,
            table,
            store,
            resume,
        } => {
            let cfg = config.load()?;
            let table = open_table(&table)?;
            let sn = Supernet::load(&supernet).stage("search")?;
            let (train, val) = pipeline::datasets(&cfg)?;
            let space = sn.config().search_space();
            let mut st = if resume && store.exists() {
                ObservationStore::load(&store).stage("search")?
            } else {
                ObservationStore::new()
            };
            let header = stamp(&cfg).lines("search-store");
            let ev = pipeline::evaluator(&cfg, &sn, &table, &train, &val);
            let out = run_search(&cfg.search_config(job_count(cfg.search.jobs)?), &space, &ev, &mut st, |_, s| {
                s.save(&store, &header)
            })?;
            st.save(&store, &header).stage("search")?;
            match out.best {
                Some(b) if b.reward.is_finite() => {
                    println!("best {} reward={} latency_ms={}", space.decode(&b.bits).stage("search")?, b.reward, b.latency_ms);
                    Ok(())
                }
                _ => Err(CliError::Infeasible("no candidate met the latency target".into())),
            }
        }
        SearchCmd::Report {
            config,
            table,
            store,
            cells,
            out,
        } => {
            let cfg = config.load()?;
            let table = open_table(&table)?;
            let net = net_config(&cfg, cells)?;
            let st = ObservationStore::load(&store).stage("search")?;
            let rows = report(&st, &net.search_space(), pipeline::dense_latency(&net, &table, cfg.latency.overhead_ms))?;
            let text = stamp_after_first_line(&format_report(&rows), &stamp(&cfg), "search-report");
            emit(out.as_deref(), &text)
        }
    }
}

fn expand_ratios(ratios: &[f64], n: usize) -> Result<Vec<f64>, CliError> {
    match ratios.len() {
        1 => Ok(vec![ratios[0]; n]),
        l if l == n => Ok(ratios.to_vec()),
        l => Err(CliError::Config(format!("{l} ratios for {n} prunable layers"))),
    }
}

fn load_model(path: &Path) -> Result<PathModel, CliError> {
    PathModel::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn check_schemes(schemes: &[PruningScheme], m: &PathModel) -> Result<(), CliError> {
    let n = m.prunable_layers().len();
    if schemes.len() != n {
        return Err(CliError::Config(format!("{} schemes for {n} prunable layers", schemes.len())));
    }
    Ok(())
}

fn prune(a: PruneArgs) -> Result<(), CliError> {
    let cfg = a.config.load()?;
    let mut m = load_model(&a.model)?;
    check_schemes(&a.schemes, &m)?;
    let ratios = expand_ratios(&a.ratios, a.schemes.len())?;
    let plan: Vec<LayerPrune> = a.schemes.iter().zip(&ratios).map(|(&scheme, &ratio)| LayerPrune { scheme, ratio }).collect();
    let out = one_shot_prune(&mut m, &plan, &pipeline::mask_params(&cfg)).map_err(|e| CliError::Config(e.to_string()))?;
    m.save(&a.out).stage("prune")?;
    let text = stamp_after_first_line(&format_prune_report(&out.report), &stamp(&cfg), "prune-report");
    emit(a.report.as_deref(), &text)
}

fn ratios(a: RatiosArgs) -> Result<(), CliError> {
    let cfg = a.config.load()?;
    let mut m = load_model(&a.model)?;
    check_schemes(&a.schemes, &m)?;
    let (train, _) = pipeline::datasets(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rw = sparsearch::pruning::ReweightConfig {
        block: cfg.block,
        ..cfg.reweight
    };
    let res = reweighted_determine_ratios(&mut m, &train, &a.schemes, &rw, &mut rng).stage("ratios")?;
    if let Some(out) = &a.out {
        m.save(out).stage("ratios")?;
    }
    let layers = m.prunable_layers();
    let rows: Vec<_> = layers
        .iter()
        .zip(&a.schemes)
        .zip(&res.ratios)
        .map(|((l, &scheme), &ratio)| {
            let nnz_after = m.params()[l.param].data().iter().filter(|v| **v != 0.0).count();
            sparsearch::pruning::PruneReportRow {
                layer: l.name.clone(),
                scheme,
                ratio,
                nnz_before: l.rows() * l.cols(),
                nnz_after,
            }
        })
        .collect();
    let text = stamp_after_first_line(&format_prune_report(&rows), &stamp(&cfg), "ratio-report");
    emit(a.report.as_deref(), &text)
}

fn bcs(c: BcsCmd) -> Result<(), CliError> {
    match c {
        BcsCmd::Pack { model, layer, out } => {
            let m = load_model(&model)?;
            let info = m
                .prunable_layers()
                .into_iter()
                .find(|l| l.name == layer)
                .ok_or_else(|| CliError::Config(format!("no prunable layer {layer:?}")))?;
            let w: Vec<f32> = m.params()[info.param].data().iter().map(|&v| v as f32).collect();
            let b = BcsMatrix::from_dense(&w, info.rows(), info.cols()).stage("bcs")?;
            let mut buf = Vec::new();
            write_bcs(&mut buf, &b).stage("bcs")?;
            write_atomic(&out, &buf).stage("bcs")?;
            println!(
                "{}x{} nnz={} groups={} index={} (csr {})",
                b.rows(),
                b.cols(),
                b.nnz(),
                b.groups(),
                b.index_len(),
                b.csr_index_len()
            );
            Ok(())
        }
        BcsCmd::Unpack { input, out } => {
            let f = fs::File::open(&input).map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;
            let b = read_bcs(BufReader::new(f)).map_err(|e| CliError::Config(e.to_string()))?;
            let dense = b.decode().stage("bcs")?;
            let mut s = String::new();
            for row in dense.chunks(b.cols().max(1)) {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                s.push_str(&cells.join(","));
                s.push('\n');
            }
            emit(out.as_deref(), &s)
        }
        BcsCmd::Bench(a) => {
            let table = curve_table(&a)?;
            let desc = curve_desc(&a)?;
            let dense = table.dense(&desc).stage("bench")?;
            let mut s = String::from("scheme,ratio,ms_dense,ms_sparse,speedup\n");
            for &scheme in &a.schemes {
                for (r, ms) in table.series(&desc, scheme).stage("bench")? {
                    s.push_str(&format!("{},{r},{dense},{ms},{:.6}\n", scheme.name(), dense / ms));
                }
            }
            emit(a.out.as_deref(), &s)
        }
    }
}

fn curve_desc(a: &CurveArgs) -> Result<LayerDescriptor, CliError> {
    LayerDescriptor::new(LayerType::Conv3x3, a.in_ch, a.out_ch, a.height, a.width).map_err(|e| CliError::Config(e.to_string()))
}

/// Median-of-`reps` host timings for one 3×3 convolution, clamped to be
/// non-increasing in ratio.
pub fn curve_table(a: &CurveArgs) -> Result<LatencyTable, CliError> {
    let desc = curve_desc(a)?;
    let spec = BenchSpec {
        seed: a.seed,
        ..BenchSpec::default()
    };
    let mut grid = a.grid.clone();
    if !grid.contains(&0.0) {
        grid.insert(0, 0.0);
    }
    let schemes = a.schemes.clone();
    let mut timer = host_bench(spec);
    // Unrequested schemes get a free constant instead of a measurement.
    let bench = move |d: &LayerDescriptor, k: SchemeKey, r: f64| match k {
        SchemeKey::Sparse(s) if !schemes.contains(&s) => Ok(1.0),
        _ => timer(d, k, r),
    };
    build_table(bench, &[desc], &grid, a.reps, "host", Provenance::Measured).map_err(|e| pipeline::latency_error("bench", e))
}

/// `scheme,ratio,speedup` lines, speedup being dense over sparse latency.
pub fn speedup_curves(a: &CurveArgs) -> Result<String, CliError> {
    let table = curve_table(a)?;
    let desc = curve_desc(a)?;
    let mut s = String::from("scheme,ratio,speedup\n");
    for &scheme in &a.schemes {
        let series = table.series(&desc, scheme).stage("bench")?;
        let dense = series[0].1;
        for (r, ms) in series {
            s.push_str(&format!("{},{r},{:.6}\n", scheme.name(), dense / ms));
        }
    }
    Ok(s)
}

fn tune(a: TuneArgs) -> Result<(), CliError> {
    let scheme = match a.scheme {
        TuneScheme::Dense => None,
        TuneScheme::Channel => Some(PruningScheme::Channel),
        TuneScheme::Pattern => Some(PruningScheme::Pattern),
        TuneScheme::Block => Some(PruningScheme::Block),
    };
    let shape = GemmShape {
        rows: a.rows,
        k: a.k,
        n: a.n,
        kernel: a.kernel,
    };
    let bench = gemm_bench(shape, scheme, a.ratio, &Default::default(), a.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let ga = GaConfig {
        population: a.population,
        generations: a.generations,
        reps: a.reps,
        seed: a.seed,
        ..GaConfig::default()
    };
    let res = ga_tune(bench, &Menus::default(), &ga).map_err(|e| CliError::Config(e.to_string()))?;
    let KernelConfig {
        tile_rows,
        tile_cols,
        tile_depth,
        unroll,
        threads,
    } = res.best;
    println!(
        "best tile_r={tile_rows} tile_c={tile_cols} tile_d={tile_depth} unroll={unroll} threads={threads} ms={} evaluations={}",
        res.best_ms, res.evaluations
    );
    if let Some(path) = &a.cache {
        let mut cache = if path.exists() {
            let f = fs::File::open(path).stage("tune")?;
            TuneCache::read(BufReader::new(f)).stage("tune")?
        } else {
            TuneCache::default()
        };
        let ratio = if scheme.is_some() { a.ratio } else { 0.0 };
        cache.insert(TuneKey::new(a.rows, a.k, a.n, scheme, ratio), res.best, res.best_ms);
        let mut buf = Vec::new();
        let header = Stamp::new("-", a.seed).lines("tune-cache");
        cache.write(&mut buf, &header).stage("tune")?;
        write_atomic(path, &buf).stage("tune")?;
    }
    Ok(())
}

fn pipeline_cmd(a: PipelineArgs) -> Result<(), CliError> {
    let mut cfg = a.config.load()?;
    if let Some(o) = a.output {
        cfg.output_dir = o;
    }
    let jobs = job_count(cfg.search.jobs)?;
    let s = pipeline::run_pipeline(&cfg, &RunOptions { resume: a.resume, jobs })?;
    println!("winner {} after {} evaluations", s.winner, s.evaluations);
    println!(
        "estimated latency {} ms (dense {} ms, target {} ms), reward {}",
        s.final_ms, s.dense_ms, cfg.target_ms, s.final_reward
    );
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}

fn predictor(c: PredictorCmd) -> Result<(), CliError> {
    match c {
        PredictorCmd::Train {
            config,
            store,
            cells,
            out,
        } => {
            let cfg = config.load()?;
            let space = net_config(&cfg, cells)?.search_space();
            let st = ObservationStore::load(&store).stage("predictor")?;
            let (mut feats, mut rewards) = (Vec::new(), Vec::new());
            for r in st.records().iter().filter(|r| r.reward.is_finite()) {
                feats.push(space.features(&space.decode(&r.bits).stage("predictor")?));
                rewards.push(r.reward);
            }
            let ens = PredictorEnsemble::train(&feats, &rewards, cfg.search.p, &cfg.search.predictor, cfg.seed)
                .stage("predictor")?;
            ens.save(&out).stage("predictor")?;
            println!("{} members trained on {} records", ens.len(), rewards.len());
            Ok(())
        }
        PredictorCmd::Eval {
            model,
            input,
            config,
            cells,
            beta,
        } => {
            let cfg = config.load()?;
            let space = net_config(&cfg, cells)?.search_space();
            let ens = PredictorEnsemble::load(&model).map_err(|e| CliError::Config(e.to_string()))?;
            let f = fs::File::open(&input).map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;
            let mut cands = Vec::new();
            for line in BufReader::new(f).lines() {
                let line = line.stage("predictor")?;
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                cands.push(parse_candidate(&space, line)?);
            }
            let feats: Vec<Vec<f64>> = cands.iter().map(|c| space.features(c)).collect();
            let stats = ens.stats(&feats).stage("predictor")?;
            let beta = beta.unwrap_or(cfg.search.beta);
            println!("encoding,mean,std,ucb");
            for (c, s) in cands.iter().zip(stats) {
                let bits = space.encode(c).stage("predictor")?;
                println!("{},{},{},{}", bits_to_string(&bits), s.mean, s.std, ucb(s, beta));
            }
            Ok(())
        }
    }
}
