//! The three-stage flow: latency table and supernet, joint search, and
//! ratio determination on the winner.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sparsearch::latency::{
    build_table, determine_cell_count, estimate, host_bench, min_pruning_ratios, read_table, synthetic_bench,
    write_table, BenchSpec, LatencyError, LatencyTable, ModelLayer, Provenance,
};
use sparsearch::nn::{Dataset, Model};
use sparsearch::pruning::{
    format_prune_report, one_shot_prune, reweighted_determine_ratios, short_retrain, LayerPrune, PruneReportRow,
};
use sparsearch::search::{
    format_report, report, run_search, ObservationStore, SearchError, SupernetPruneEvaluator, REALTIME_MS,
};
use sparsearch::search_space::{bits_to_string, Candidate, PruningScheme};
use sparsearch::sparse::{write_bcs, BcsMatrix, MaskParams};
use sparsearch::supernet::{texture_dataset, PathModel, Supernet, SupernetConfig};

use crate::artifact::{stamp_after_first_line, write_atomic, write_manifest, Stamp};
use crate::config::{CellCount, LatencySource, PipelineConfig};
use crate::{CliError, StageResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const TABLE_FILE: &str = "latency.tbl";
pub const SUPERNET_FILE: &str = "supernet.sptc";
pub const STORE_FILE: &str = "search.store";
pub const SEARCH_REPORT_FILE: &str = "search_report.csv";
pub const MODEL_FILE: &str = "final_model.sptc";
pub const PRUNE_REPORT_FILE: &str = "prune_report.csv";
pub const CURVE_FILE: &str = "latency_curve.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const PROGRESS_FILE: &str = "progress.txt";
pub const BCS_DIR: &str = "bcs";

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub resume: bool,
    /// Parallel evaluation jobs after any environment cap.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub cells: usize,
    pub winner: Candidate,
    pub search_reward: f64,
    pub evaluations: usize,
    pub dense_ms: f64,
    pub final_ms: f64,
    pub final_reward: f64,
    pub ratios: Vec<f64>,
}

/// Latency table over every layer shape the supernet can produce.
pub fn build_latency_table(cfg: &PipelineConfig, net: &SupernetConfig) -> Result<LatencyTable, LatencyError> {
    let descs = net.layer_descriptors()?;
    match cfg.latency.source {
        LatencySource::Synthetic => {
            build_table(synthetic_bench, &descs, &cfg.latency.grid, 1, "synthetic", Provenance::Synthetic)
        }
        LatencySource::Host => {
            let spec = BenchSpec {
                seed: cfg.seed,
                mask: cfg.block,
                ..BenchSpec::default()
            };
            build_table(host_bench(spec), &descs, &cfg.latency.grid, cfg.latency.reps, "host", Provenance::Measured)
        }
    }
}

pub fn table_text(table: &LatencyTable, stamp: &Stamp) -> Result<String, LatencyError> {
    let mut buf = Vec::new();
    write_table(&mut buf, table)?;
    let text = String::from_utf8(buf).expect("table text is utf-8");
    Ok(stamp_after_first_line(&text, stamp, "latency-table"))
}

/// Maps latency failures to the infeasible exit path where appropriate.
pub fn latency_error(stage: &'static str, e: LatencyError) -> CliError {
    match e {
        LatencyError::InfeasibleTarget { .. } | LatencyError::Unreachable { .. } => CliError::Infeasible(e.to_string()),
        other => CliError::stage(stage, other),
    }
}

/// Seeded train and validation sets for the synthetic task.
pub fn datasets(cfg: &PipelineConfig) -> Result<(Dataset, Dataset), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let (s, r) = (cfg.supernet.lr_size, cfg.supernet.scale);
    let train = texture_dataset(cfg.data.train, s, r, &mut rng).stage("data")?;
    let val = texture_dataset(cfg.data.val, s, r, &mut rng).stage("data")?;
    Ok((train, val))
}

pub fn train_supernet(cfg: &PipelineConfig, net: SupernetConfig, train: &Dataset) -> Result<Supernet, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut sn = Supernet::new(net, &mut rng).stage("supernet")?;
    let stats = sn.train_single_path(train, &cfg.supernet_train, &mut rng).stage("supernet")?;
    log::info!("supernet losses per epoch: {:?}", stats.epoch_losses);
    Ok(sn)
}

pub fn evaluator<'a>(
    cfg: &PipelineConfig,
    sn: &'a Supernet,
    table: &'a LatencyTable,
    train: &'a Dataset,
    val: &'a Dataset,
) -> SupernetPruneEvaluator<'a> {
    SupernetPruneEvaluator {
        supernet: sn,
        table,
        overhead_ms: cfg.latency.overhead_ms,
        target_ms: cfg.target_ms,
        mask: mask_params(cfg),
        train,
        val,
        retrain: cfg.eval.retrain,
    }
}

pub fn mask_params(cfg: &PipelineConfig) -> MaskParams {
    MaskParams {
        block: cfg.block,
        ..MaskParams::default()
    }
}

/// Dense-latency closure for search reports.
pub fn dense_latency<'a>(
    net: &'a SupernetConfig,
    table: &'a LatencyTable,
    overhead_ms: f64,
) -> impl Fn(&Candidate) -> Option<f64> + 'a {
    move |c| {
        let layers = net.candidate_layers(c).ok()?;
        estimate(&layers, table, overhead_ms).ok().map(|e| e.total_ms)
    }
}

/// Result of stage 3 on one candidate.
#[derive(Debug, Clone)]
pub struct FinalModel {
    pub model: PathModel,
    pub prunes: Vec<LayerPrune>,
    pub report: Vec<PruneReportRow>,
    pub layer_masks: Vec<sparsearch::sparse::SparsityMask>,
    pub auto_ratios: Vec<f64>,
    pub layers: Vec<ModelLayer>,
    pub dense_ms: f64,
    pub final_ms: f64,
    pub reward: f64,
}

/// Reweighted group Lasso on the inherited weights, then the latency check:
/// any layer whose automatic ratio falls short of the latency plan is raised
/// to the planned ratio, so the estimate never exceeds the target.
pub fn finalize(
    cfg: &PipelineConfig,
    sn: &Supernet,
    table: &LatencyTable,
    winner: &Candidate,
    train: &Dataset,
    val: &Dataset,
) -> Result<FinalModel, CliError> {
    let net = sn.config();
    let base_layers = net.candidate_layers(winner).stage("ratios")?;
    let plan = min_pruning_ratios(&base_layers, table, cfg.latency.overhead_ms, cfg.target_ms)
        .map_err(|e| latency_error("ratios", e))?;
    let mut model = sn.extract_path(&winner.cells).stage("ratios")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let rw = sparsearch::pruning::ReweightConfig {
        block: cfg.block,
        ..cfg.reweight
    };
    let auto = reweighted_determine_ratios(&mut model, train, &winner.schemes, &rw, &mut rng).stage("ratios")?;
    let planned: Vec<f64> = base_layers
        .iter()
        .zip(&plan.ratios)
        .filter(|(l, _)| l.scheme.is_some())
        .map(|(_, &r)| r)
        .collect();
    let prunes: Vec<LayerPrune> = winner
        .schemes
        .iter()
        .zip(auto.ratios.iter().zip(&planned))
        .map(|(&scheme, (&a, &p))| LayerPrune {
            scheme,
            ratio: a.max(p).min(max_ratio(cfg)),
        })
        .collect();
    let out = one_shot_prune(&mut model, &prunes, &mask_params(cfg)).stage("ratios")?;
    let reward = short_retrain(&mut model, &out.masks, train, val, &cfg.eval.finetune, &mut rng).stage("ratios")?;

    // Latency of the masks actually produced, not of the requested ratios.
    let mut achieved = out.layer_masks.iter().map(|m| m.ratio());
    let layers: Vec<ModelLayer> = base_layers
        .iter()
        .map(|l| match l.scheme {
            Some(_) => ModelLayer {
                ratio: achieved.next().expect("one mask per prunable layer"),
                ..*l
            },
            None => *l,
        })
        .collect();
    let est = estimate(&layers, table, cfg.latency.overhead_ms).stage("ratios")?;
    if est.total_ms > cfg.target_ms {
        return Err(CliError::Infeasible(format!(
            "final model estimate {} ms exceeds target {} ms",
            est.total_ms, cfg.target_ms
        )));
    }
    Ok(FinalModel {
        model,
        prunes,
        report: out.report,
        layer_masks: out.layer_masks,
        auto_ratios: auto.ratios,
        layers,
        dense_ms: plan.dense_ms,
        final_ms: est.total_ms,
        reward,
    })
}

fn max_ratio(cfg: &PipelineConfig) -> f64 {
    cfg.latency.grid.iter().copied().fold(0.0, f64::max)
}

/// `layer,scheme,ratio,latency_ms,speedup` for every searched layer of the
/// winner under every scheme in the table.
pub fn latency_curve(net: &SupernetConfig, winner: &Candidate, table: &LatencyTable, stamp: &Stamp) -> Result<String, CliError> {
    let mut s = String::from("layer,scheme,ratio,latency_ms,speedup\n");
    s.push_str(&stamp.comment("latency-curve"));
    let layers = net.candidate_layers(winner).stage("report")?;
    for (i, l) in layers.iter().filter(|l| l.scheme.is_some()).enumerate() {
        for scheme in PruningScheme::ALL {
            let series = table.series(&l.desc, scheme).stage("report")?;
            let dense = series[0].1;
            for (r, ms) in series {
                s.push_str(&format!("{i}:{},{},{r},{ms},{:.6}\n", l.desc, scheme.name(), dense / ms));
            }
        }
    }
    Ok(s)
}

fn progress_done(dir: &Path, stamp: &Stamp) -> Vec<String> {
    let Ok(text) = fs::read_to_string(dir.join(PROGRESS_FILE)) else {
        return Vec::new();
    };
    let mut lines = text.lines();
    if lines.next() != Some(stamp.comment("progress").trim_end()) {
        return Vec::new();
    }
    lines.map(str::to_string).collect()
}

fn mark_done(dir: &Path, stamp: &Stamp, done: &mut Vec<String>, stage: &'static str) -> Result<(), CliError> {
    done.push(stage.to_string());
    let mut s = stamp.comment("progress");
    for d in done.iter() {
        s.push_str(d);
        s.push('\n');
    }
    write_atomic(&dir.join(PROGRESS_FILE), s.as_bytes()).stage(stage)
}

/// Runs all stages into `cfg.output_dir`. With `resume`, stages recorded as
/// complete for the same configuration are loaded instead of recomputed and
/// the search continues from its store.
pub fn run_pipeline(cfg: &PipelineConfig, opts: &RunOptions) -> Result<PipelineSummary, CliError> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    let stamp = Stamp::new(cfg.hash(), cfg.seed);
    fs::create_dir_all(&dir).stage("setup")?;
    let mut done = if opts.resume { progress_done(&dir, &stamp) } else { Vec::new() };
    if opts.resume && done.is_empty() && dir.join(PROGRESS_FILE).exists() {
        return Err(CliError::Config(format!(
            "{} was produced by a different configuration; refusing to resume",
            dir.display()
        )));
    }
    if !opts.resume {
        for f in [PROGRESS_FILE, STORE_FILE] {
            let _ = fs::remove_file(dir.join(f));
        }
    }
    write_atomic(&dir.join(CONFIG_FILE), format!("{}{}", stamp.comment("config"), cfg.to_toml()).as_bytes())
        .stage("setup")?;
    let is_done = |done: &[String], s: &str| done.iter().any(|d| d == s);

    // Stage 1: latency table, cell count, supernet.
    let table = if let Some(path) = &cfg.latency.table {
        load_table(path)?
    } else if is_done(&done, "latency") {
        load_table(&dir.join(TABLE_FILE))?
    } else {
        let t = build_latency_table(cfg, &cfg.supernet).map_err(|e| latency_error("latency", e))?;
        write_atomic(&dir.join(TABLE_FILE), table_text(&t, &stamp).stage("latency")?.as_bytes()).stage("latency")?;
        mark_done(&dir, &stamp, &mut done, "latency")?;
        t
    };
    let cells = match cfg.cells {
        CellCount::Fixed(n) => n,
        CellCount::Auto => determine_cell_count(
            &table,
            &cfg.supernet.cell_templates().stage("latency")?,
            cfg.latency.overhead_ms,
            cfg.target_ms,
        )
        .map_err(|e| latency_error("latency", e))?,
    };
    let net = SupernetConfig { cells, ..cfg.supernet };
    log::info!("supernet with {cells} cells, search space {}", net.search_space().size());
    let (train, val) = datasets(cfg)?;
    let sn_path = dir.join(SUPERNET_FILE);
    let sn = if is_done(&done, "supernet") {
        Supernet::load(&sn_path).stage("supernet")?
    } else {
        let sn = train_supernet(cfg, net, &train)?;
        sn.save(&sn_path).stage("supernet")?;
        mark_done(&dir, &stamp, &mut done, "supernet")?;
        sn
    };
    if sn.config() != &net {
        return Err(CliError::Config("stored supernet does not match the configuration".into()));
    }

    // Stage 2: search.
    let space = net.search_space();
    let store_path = dir.join(STORE_FILE);
    let mut store = if opts.resume && store_path.exists() {
        ObservationStore::load(&store_path).stage("search")?
    } else {
        ObservationStore::new()
    };
    let header = stamp.lines("search-store");
    if !is_done(&done, "search") {
        let ev = evaluator(cfg, &sn, &table, &train, &val);
        run_search(&cfg.search_config(opts.jobs), &space, &ev, &mut store, |_, s| s.save(&store_path, &header))
            .stage("search")?;
        store.save(&store_path, &header).stage("search")?;
        mark_done(&dir, &stamp, &mut done, "search")?;
    }
    let rows = report(&store, &space, dense_latency(&net, &table, cfg.latency.overhead_ms)).stage("search")?;
    write_atomic(
        &dir.join(SEARCH_REPORT_FILE),
        stamp_after_first_line(&format_report(&rows), &stamp, "search-report").as_bytes(),
    )
    .stage("search")?;
    let best = store
        .best()
        .filter(|r| r.reward.is_finite())
        .ok_or_else(|| CliError::Infeasible("no candidate met the latency target".into()))?
        .clone();
    let winner = space.decode(&best.bits).stage("search")?;

    // Stage 3: ratio determination and outputs.
    let fin = finalize(cfg, &sn, &table, &winner, &train, &val)?;
    fin.model.save(&dir.join(MODEL_FILE)).stage("ratios")?;
    write_atomic(
        &dir.join(PRUNE_REPORT_FILE),
        stamp_after_first_line(&format_prune_report(&fin.report), &stamp, "prune-report").as_bytes(),
    )
    .stage("ratios")?;
    let bcs_files = write_bcs_weights(&dir, &fin)?;
    write_atomic(&dir.join(CURVE_FILE), latency_curve(&net, &winner, &table, &stamp)?.as_bytes()).stage("report")?;
    let summary = PipelineSummary {
        cells,
        winner: winner.clone(),
        search_reward: best.reward,
        evaluations: store.len(),
        dense_ms: fin.dense_ms,
        final_ms: fin.final_ms,
        final_reward: fin.reward,
        ratios: fin.layer_masks.iter().map(|m| m.ratio()).collect(),
    };
    let text = format_summary(cfg, &summary, &best.bits, &fin, &stamp);
    write_atomic(&dir.join(REPORT_FILE), text.as_bytes()).stage("report")?;
    let mut files: Vec<String> = [
        CONFIG_FILE,
        TABLE_FILE,
        SUPERNET_FILE,
        STORE_FILE,
        SEARCH_REPORT_FILE,
        MODEL_FILE,
        PRUNE_REPORT_FILE,
        CURVE_FILE,
        REPORT_FILE,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    files.extend(bcs_files);
    let refs: Vec<&str> = files.iter().map(String::as_str).collect();
    write_manifest(&dir, &stamp, &refs).stage("report")?;
    Ok(summary)
}

fn load_table(path: &Path) -> Result<LatencyTable, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    read_table(std::io::BufReader::new(f)).stage("latency")
}

/// One BCS file per prunable layer, holding the masked f32 weights.
fn write_bcs_weights(dir: &Path, fin: &FinalModel) -> Result<Vec<String>, CliError> {
    let mut names = Vec::new();
    for (info, mask) in fin.model.prunable_layers().iter().zip(&fin.layer_masks) {
        let w: Vec<f32> = fin.model.params()[info.param].data().iter().map(|&v| v as f32).collect();
        let m = BcsMatrix::encode(&w, mask).stage("ratios")?;
        let rel = format!("{BCS_DIR}/{}.bcs", info.name);
        let mut buf = Vec::new();
        write_bcs(&mut buf, &m).stage("ratios")?;
        write_atomic(&dir.join(&rel), &buf).stage("ratios")?;
        names.push(rel);
    }
    Ok(names)
}

fn format_summary(cfg: &PipelineConfig, s: &PipelineSummary, bits: &[u8], fin: &FinalModel, stamp: &Stamp) -> String {
    let mut t = stamp.comment("report");
    t.push_str(&format!("cells={}\n", s.cells));
    t.push_str(&format!("winner={}\n", s.winner));
    t.push_str(&format!("encoding={}\n", bits_to_string(bits)));
    t.push_str(&format!("evaluations={}\n", s.evaluations));
    t.push_str(&format!("search_reward={}\n", s.search_reward));
    t.push_str(&format!("final_reward={}\n", s.final_reward));
    t.push_str(&format!("target_ms={}\n", cfg.target_ms));
    t.push_str(&format!("dense_ms={}\n", s.dense_ms));
    t.push_str(&format!("final_ms={}\n", s.final_ms));
    t.push_str(&format!("speedup={:.4}\n", s.dense_ms / s.final_ms));
    t.push_str(&format!("realtime={}\n", s.final_ms <= REALTIME_MS));
    for ((row, auto), p) in fin.report.iter().zip(&fin.auto_ratios).zip(&fin.prunes) {
        t.push_str(&format!(
            "layer {} scheme={} auto_ratio={:.4} applied_ratio={:.4} nnz={}/{}\n",
            row.layer,
            row.scheme.name(),
            auto,
            p.ratio,
            row.nnz_after,
            row.nnz_before
        ));
    }
    t
}

/// Reads `key=value` lines of a pipeline report.
pub fn read_summary(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect())
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        CliError::stage("search", e)
    }
}
