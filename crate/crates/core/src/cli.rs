//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::active_loop::{run_loop, Budget, LoopMode, ModelAdapter, TrainMode};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{coco_thresholds, evaluate, EvalConfig};
use crate::experiment::{grid_csv, grid_table, run_cell, summarize, CellResult, GridSpec};
use crate::io::{self, RoundLogEntry, RunConfig};
use crate::sampler::{build_candidates, SelectionConfig, Strategy};
use crate::scoring::{score_all, ScoreConfig};
use crate::seed;
use crate::simulator::{generate_corpus, DetectorConfig, Profile, SimAdapter};

#[derive(Debug, Parser)]
#[command(name = "tabal", version, about = "Active-learning sample selection for table detection")]
pub struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "TABAL_WORKERS", default_value_t = 0)]
    pub workers: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus, optionally with simulated detector output.
    GenCorpus(GenCorpusArgs),
    /// Score prediction records.
    Score(ScoreArgs),
    /// Build a ranked candidate list from prediction records.
    Select(SelectArgs),
    /// Run the budgeted selection loop against the simulated detector.
    Loop(LoopArgs),
    /// Evaluate predictions against a dataset.
    Eval(EvalArgs),
    /// Run the loop for every strategy, budget and seed and tabulate mAP.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, env = "TABAL_OUT_DIR", default_value = "tabal-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreFlags {
    /// Corpus profile; picks the default box-ambiguity IoU threshold.
    #[arg(long, default_value = "latex-like", value_parser = parse_profile)]
    pub profile: Profile,
    /// Box-ambiguity IoU threshold [default: 0.004 for latex-like, 0.006 for word-like].
    #[arg(long)]
    pub t_iou: Option<f64>,
    /// Confidence floor for counting predicted tables.
    #[arg(long, default_value_t = crate::scoring::DEFAULT_CONF_FLOOR)]
    pub conf_floor: f64,
}

impl ScoreFlags {
    fn config(&self) -> ScoreConfig {
        ScoreConfig {
            t_iou: self.t_iou.unwrap_or(self.profile.default_t_iou()),
            conf_floor: self.conf_floor,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SelectionFlags {
    /// Confidence bin edges in percent.
    #[arg(long, value_delimiter = ',', default_value = "40,50,60,70,80,90,95")]
    pub edges: Vec<f64>,
    /// Sampling rate floor r_min in percent.
    #[arg(long, default_value_t = crate::sampler::DEFAULT_R_MIN)]
    pub r_min: f64,
    /// Images with mean confidence at or above this percentage are never picked.
    #[arg(long, default_value_t = crate::sampler::DEFAULT_UNCERTAINTY_THRESHOLD)]
    pub uncertainty_threshold: f64,
}

impl SelectionFlags {
    fn config(&self) -> SelectionConfig {
        SelectionConfig {
            edges: self.edges.clone(),
            r_min: self.r_min,
            uncertainty_threshold: self.uncertainty_threshold,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DetectorFlags {
    /// Half-saturation constant m0 of the simulated detector.
    #[arg(long, default_value_t = DetectorConfig::default().m0)]
    pub m0: f64,
    /// Half-saturation constant for multi-table layouts.
    #[arg(long, default_value_t = DetectorConfig::default().multi_layout_m0)]
    pub multi_layout_m0: f64,
    /// Fraction of annotated tables credited to other style clusters.
    #[arg(long, default_value_t = DetectorConfig::default().transfer)]
    pub transfer: f64,
    /// Do not emit segmentation masks.
    #[arg(long)]
    pub no_masks: bool,
}

impl DetectorFlags {
    fn config(&self) -> DetectorConfig {
        DetectorConfig {
            m0: self.m0,
            multi_layout_m0: self.multi_layout_m0,
            transfer: self.transfer,
            emit_masks: !self.no_masks,
            ..DetectorConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunFlags {
    /// Dataset file (JSONL) with latent page attributes.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Initial labeled set size K.
    #[arg(long, default_value_t = 50)]
    pub initial: usize,
    /// Images added per round k.
    #[arg(long, default_value_t = 50)]
    pub step: usize,
    /// Starting budget counter ε [default: k].
    #[arg(long)]
    pub epsilon: Option<usize>,
    /// Score the pool once (static) or after every round (rescore).
    #[arg(long, default_value = "static", value_parser = parse_mode)]
    pub mode: LoopMode,
    /// Continue training each round (warm-start) or retrain on the new batch only (cold-new-only).
    #[arg(long, default_value = "warm-start", value_parser = parse_train_mode)]
    pub train_mode: TrainMode,
    /// Fraction of the dataset held out for evaluation, taken from the end.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    /// IoU thresholds reported per round [default: 0.50:0.05:0.95].
    #[arg(long, value_delimiter = ',')]
    pub iou_thresholds: Option<Vec<f64>>,
    #[command(flatten)]
    pub score: ScoreFlags,
    #[command(flatten)]
    pub selection: SelectionFlags,
    #[command(flatten)]
    pub detector: DetectorFlags,
    #[command(flatten)]
    pub out: OutArgs,
}

impl RunFlags {
    fn run_config(&self, strategy: Strategy, total: usize, seed: u64) -> Result<RunConfig> {
        let config = RunConfig {
            strategy,
            mode: self.mode,
            train_mode: self.train_mode,
            seed,
            budget: Budget {
                total,
                initial: self.initial,
                step: self.step,
                start: self.epsilon.unwrap_or(self.step),
            },
            selection: self.selection.config(),
            score: self.score.config(),
            eval: EvalConfig {
                iou_thresholds: self.iou_thresholds.clone().unwrap_or_else(coco_thresholds),
            },
            profile: self.score.profile,
            holdout: self.holdout,
            detector: self.detector.config(),
        };
        config.validate()?;
        if strategy == Strategy::Ma && !config.detector.emit_masks {
            return Err(Error::config(
                "strategy `ma` needs segmentation masks but the detector emits none",
            ));
        }
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long, default_value = "latex-like", value_parser = parse_profile)]
    pub profile: Profile,
    /// Number of pages.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset file to write [default: <out-dir>/corpus.jsonl].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write simulated detector predictions for every page here.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Pages the simulated detector is trained on before predicting.
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
    #[command(flatten)]
    pub detector: DetectorFlags,
    #[command(flatten)]
    pub out_dir: OutArgs,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Prediction file (JSONL).
    #[arg(long)]
    pub predictions: PathBuf,
    #[command(flatten)]
    pub score: ScoreFlags,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Prediction file (JSONL).
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub score: ScoreFlags,
    #[command(flatten)]
    pub selection: SelectionFlags,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct LoopArgs {
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Strategy,
    /// Total annotation budget B, initial set included.
    #[arg(long, default_value_t = 1000)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset file holding the ground truth.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Prediction file (JSONL).
    #[arg(long)]
    pub predictions: PathBuf,
    /// IoU thresholds reported [default: 0.50:0.05:0.95].
    #[arg(long, value_delimiter = ',')]
    pub iou_thresholds: Option<Vec<f64>>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy,
          default_value = "bba,entropy,ma,random,tc,uncertainty")]
    pub strategies: Vec<Strategy>,
    /// Total budgets B.
    #[arg(long, value_delimiter = ',', default_value = "100,200,300,400,500,600,700,800,900,1000")]
    pub budgets: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub run: RunFlags,
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<LoopMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_train_mode(s: &str) -> std::result::Result<TrainMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start {} workers: {e}", cli.workers)))?;
    pool.install(|| match cli.command {
        Command::GenCorpus(a) => gen_corpus(&a),
        Command::Score(a) => score(&a),
        Command::Select(a) => select(&a),
        Command::Loop(a) => run_single_loop(&a),
        Command::Eval(a) => eval(&a),
        Command::Compare(a) => compare(&a),
    })
}

fn adapter_seed(seed: u64) -> u64 {
    seed::derive(seed, 0x73696d)
}

fn gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let images = generate_corpus(a.profile, a.n, a.seed)?;
    let dataset = Dataset::new(images.iter().map(|i| i.to_record()).collect())?;
    let out = match &a.out {
        Some(p) => p.clone(),
        None => io::output_path(&a.out_dir.out_dir, "corpus.jsonl")?,
    };
    io::write_dataset(&dataset, &out)?;

    if let Some(pred_path) = &a.predictions {
        let adapter = SimAdapter::new(dataset.records(), a.detector.config(), adapter_seed(a.seed))?;
        let mut ids = dataset.ids();
        ids.shuffle(&mut seed::rng(seed::derive(a.seed, 0x7761726d)));
        let warm = ids.iter().take(a.warmup).cloned().collect::<Vec<_>>();
        let model = adapter.train(None, &crate::active_loop::GroundTruthStore::new(dataset.ground_truth()).annotate(&warm)?, true)?;
        let preds = adapter.infer(&model, &dataset.ids())?;
        io::write_predictions(&preds, pred_path)?;
    }
    Ok(())
}

fn score(a: &ScoreArgs) -> Result<()> {
    let config = a.score.config();
    let preds = io::read_predictions(&a.predictions)?;
    let scores = score_all(&preds, &config)?;
    io::write_scores(&scores, io::output_path(&a.out.out_dir, "scores.jsonl")?)
}

fn select(a: &SelectArgs) -> Result<()> {
    let preds = io::read_predictions(&a.predictions)?;
    let scores = score_all(&preds, &a.score.config())?;
    let list = build_candidates(a.strategy, &scores, &a.selection.config(), a.seed)?;
    io::write_candidates(&list, io::output_path(&a.out.out_dir, "candidates.jsonl")?)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let dataset = io::read_dataset(&a.dataset)?;
    let preds = io::read_predictions(&a.predictions)?;
    let config = EvalConfig {
        iou_thresholds: a.iou_thresholds.clone().unwrap_or_else(coco_thresholds),
    };
    let report = evaluate(&preds, &dataset.ground_truth(), &config)?;
    io::write_json(&report, io::output_path(&a.out.out_dir, "report.json")?)
}

struct Prepared {
    pool: Dataset,
    test: Dataset,
    all: Dataset,
}

fn prepare(run: &RunFlags, holdout: f64) -> Result<Prepared> {
    let all = io::read_dataset(&run.dataset)?;
    if !all.has_hardness() {
        return Err(Error::config(format!(
            "{}: the simulated detector needs a synthetic corpus with hardness records",
            run.dataset.display()
        )));
    }
    let (pool, test) = all.clone().split_holdout(holdout)?;
    if test.is_empty() {
        return Err(Error::config("holdout leaves no evaluation pages"));
    }
    Ok(Prepared { pool, test, all })
}

fn round_entries<M>(outcome: &crate::active_loop::LoopOutcome<M>, config: &RunConfig) -> Vec<RoundLogEntry> {
    let lc = config.loop_config();
    outcome.rounds.iter().map(|r| RoundLogEntry::new(r, &lc)).collect()
}

fn run_single_loop(a: &LoopArgs) -> Result<()> {
    let config = a.run.run_config(a.strategy, a.budget, a.seed)?;
    let data = prepare(&a.run, config.holdout)?;
    let adapter = SimAdapter::new(data.all.records(), config.detector.clone(), adapter_seed(config.seed))?;
    let outcome = run_loop(&data.pool, &data.test, &adapter, &config.loop_config())?;

    let dir = &a.run.out.out_dir;
    io::write_run_config(&config, io::output_path(dir, "config.json")?)?;
    let log = io::output_path(dir, "round_log.jsonl")?;
    io::write_round_log(&[], &log)?;
    for entry in round_entries(&outcome, &config) {
        io::append_round_log(&entry, &log)?;
    }

    let reports = dir.join("reports");
    io::write_json(&outcome.initial_metrics, io::output_path(&reports, "round_000.json")?)?;
    for r in &outcome.rounds {
        io::write_json(&r.metrics, reports.join(format!("round_{:03}.json", r.round_index)))?;
    }
    let final_metrics = outcome.rounds.last().map_or(&outcome.initial_metrics, |r| &r.metrics);
    io::write_json(final_metrics, dir.join("report.json"))?;

    let mut csv = String::from("strategy,round,labeled,map50,map_coco\n");
    writeln!(csv, "{},0,{},{},{}", config.strategy, config.budget.initial, outcome.initial_metrics.map_50, outcome.initial_metrics.map_coco).unwrap();
    for r in &outcome.rounds {
        writeln!(csv, "{},{},{},{},{}", config.strategy, r.round_index, r.cumulative_labeled, r.metrics.map_50, r.metrics.map_coco).unwrap();
    }
    write_file(&dir.join("summary.csv"), &csv)?;
    if outcome.truncated {
        eprintln!("warning: candidate list ran out before the budget was spent");
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn compare(a: &CompareArgs) -> Result<()> {
    let spec = GridSpec {
        strategies: a.strategies.clone(),
        budgets: a.budgets.clone(),
        seeds: a.seeds.clone(),
    };
    spec.validate()?;
    let cells = spec.cells();
    let configs = cells
        .iter()
        .map(|&(st, b, s)| a.run.run_config(st, b, s))
        .collect::<Result<Vec<_>>>()?;
    let holdout = configs[0].holdout;
    let data = prepare(&a.run, holdout)?;

    let results: Vec<(CellResult, Vec<RoundLogEntry>)> = configs
        .par_iter()
        .map(|config| {
            let adapter = SimAdapter::new(data.all.records(), config.detector.clone(), adapter_seed(config.seed))?;
            let (cell, outcome) = run_cell(
                &data.pool,
                &data.test,
                &adapter,
                &config.loop_config(),
                config.strategy,
                config.budget.total,
                config.seed,
            )?;
            Ok((cell, round_entries(&outcome, config)))
        })
        .collect::<Result<_>>()?;

    let dir = &a.run.out.out_dir;
    let cells_dir = dir.join("cells");
    let merged = io::output_path(dir, "round_log.jsonl")?;
    io::write_round_log(&[], &merged)?;
    for (cell, entries) in &results {
        let name = format!("{}_b{}_s{}.jsonl", cell.strategy, cell.budget, cell.seed);
        io::write_round_log(entries, io::output_path(&cells_dir, &name)?)?;
        for e in entries {
            io::append_round_log(e, &merged)?;
        }
    }
    let cell_results: Vec<CellResult> = results.into_iter().map(|(c, _)| c).collect();
    let rows = summarize(&cell_results);
    io::write_run_config(&configs[0], dir.join("config.json"))?;
    write_file(&dir.join("grid.csv"), &grid_csv(&rows))?;
    let table = grid_table(&rows);
    write_file(&dir.join("grid.txt"), &table)?;
    print!("{table}");
    Ok(())
}
