use std::time::Instant;

use tabal::active_loop::{Budget, LoopConfig};
use tabal::dataset::Dataset;
use tabal::experiment::{grid_table, run_grid, summarize, GridSpec};
use tabal::sampler::Strategy;
use tabal::scoring::ScoreConfig;
use tabal::seed;
use tabal::simulator::{generate_corpus, DetectorConfig, Profile, SimAdapter};

fn main() -> tabal::Result<()> {
    let profile: Profile = std::env::args().nth(1).unwrap_or("latex-like".into()).parse()?;
    let corpus = generate_corpus(profile, 2000, 2024)?;
    let ds = Dataset::new(corpus.iter().map(|i| i.to_record()).collect())?;
    let (pool, test) = ds.split_holdout(0.2)?;
    let all: Vec<_> = pool.records().iter().chain(test.records()).cloned().collect();
    let mut base = LoopConfig::new(Strategy::Random, Budget::new(1000, 50, 50), 0);
    base.score = ScoreConfig { t_iou: profile.default_t_iou(), ..ScoreConfig::default() };
    let spec = GridSpec {
        strategies: Strategy::ALL.to_vec(),
        budgets: (1..=10).map(|i| i * 100).collect(),
        seeds: (1..=5).collect(),
    };
    let mut det = DetectorConfig::default();
    if let Ok(v) = std::env::var("TRANSFER") { det.transfer = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("MULTI_M0") { det.multi_layout_m0 = v.parse().unwrap(); }
    let t = Instant::now();
    let results = run_grid(
        &pool,
        &test,
        |s| SimAdapter::new(&all, det.clone(), seed::derive(s, 0x73696d)),
        &base,
        &spec,
    )?;
    println!("{}", grid_table(&summarize(&results)));
    println!("elapsed {:?}", t.elapsed());
    Ok(())
}
