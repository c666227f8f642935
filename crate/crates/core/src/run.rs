//! Experiment orchestration: training runs with their artifacts, evaluation
//! and inspection of checkpoints, seed sweeps.
//!
//! Every command writes CSV files into a run directory. Training uses
//! `config.output_dir`; the checkpoint commands use the directory that holds
//! the checkpoint.

use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::envs::VariantSpec;
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate, robustness_sweep, topology_csv, write_learning_curve, write_reports, write_text,
    write_training_log, EvalReport,
};
use crate::parallel::{self, Execution};
use crate::scheduler::{GrowthEvent, RewireEvent, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";
pub const LEARNING_CURVE_FILE: &str = "learning_curve.csv";
pub const GROWTH_EVENTS_FILE: &str = "growth_events.csv";
pub const REWIRE_EVENTS_FILE: &str = "rewire_events.csv";
pub const FINAL_EVAL_FILE: &str = "final_eval.csv";
pub const CONFIG_ECHO_FILE: &str = "config.ini";

/// Evaluation seed used after training, disjoint from the training streams
/// and from the learning-curve episodes.
pub fn eval_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(17) ^ 0x0E7A_1000
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub final_eval: EvalReport,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Trains to completion and writes the checkpoint, the training log, the
/// learning curve, the topology event log, and a final greedy evaluation.
///
/// On divergence, the state at the failing step is dumped as text next to
/// the logs before the error is returned.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dir = config.output_dir.clone();
    ensure_dir(&dir)?;
    write_text(&dir.join(CONFIG_ECHO_FILE), &config.to_string())?;
    let mut trainer = Trainer::new(config.trainer_config())?;
    while trainer.step_count() < config.total_steps {
        if let Err(e) = trainer.step() {
            let _ = write_training_log(trainer.training_log(), &dir.join(TRAINING_LOG_FILE));
            let dump = format!(
                "# {e}\n{}",
                Checkpoint::from_trainer(config, &trainer).to_text()
            );
            let _ = write_text(&dir.join("diverged_state.txt"), &dump);
            return Err(e);
        }
    }
    write_artifacts(config, &trainer, &dir)
}

fn write_artifacts(config: &RunConfig, trainer: &Trainer, dir: &Path) -> Result<TrainOutcome> {
    let checkpoint = dir.join(CHECKPOINT_FILE);
    Checkpoint::from_trainer(config, trainer).save(&checkpoint)?;
    write_training_log(trainer.training_log(), &dir.join(TRAINING_LOG_FILE))?;
    write_learning_curve(trainer.learning_curve(), &dir.join(LEARNING_CURVE_FILE))?;
    let n = trainer.spec().num_agents();
    if !trainer.growth_events().is_empty() {
        write_text(
            &dir.join(GROWTH_EVENTS_FILE),
            &growth_events_csv(trainer.growth_events(), n),
        )?;
    }
    if !trainer.rewire_events().is_empty() {
        write_text(
            &dir.join(REWIRE_EVENTS_FILE),
            &rewire_events_csv(trainer.rewire_events()),
        )?;
    }
    let report = evaluate(
        trainer.online(),
        trainer.spec(),
        config.eval_episodes,
        0.0,
        eval_seed(config.seed),
    )?
    .labeled(config.algo.name(), config.seed);
    write_reports(std::slice::from_ref(&report), &dir.join(FINAL_EVAL_FILE))?;
    Ok(TrainOutcome {
        dir: dir.to_path_buf(),
        checkpoint,
        final_eval: report,
    })
}

/// One row per grown entry; event-level diagnostics repeat on each row.
pub fn growth_events_csv(events: &[GrowthEvent], agents: usize) -> String {
    let mut s = String::from(
        "step,layer,row,col,abs_grad,active_mean_abs_grad,eligible_mean_abs_grad,predicted_active,predicted_grown",
    );
    for p in 0..agents {
        for q in 0..agents {
            let _ = write!(s, ",link_{p}_{q}");
        }
    }
    s.push('\n');
    for e in events {
        for r in &e.records {
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                e.step,
                r.layer,
                r.row,
                r.col,
                r.magnitude,
                e.gradients.active_mean,
                e.gradients.eligible_mean,
                e.predicted_active,
                e.predicted_grown
            );
            for row in &e.census {
                for v in row {
                    let _ = write!(s, ",{v}");
                }
            }
            s.push('\n');
        }
    }
    s
}

pub fn rewire_events_csv(events: &[RewireEvent]) -> String {
    let mut s = String::from("step,layer,dropped,grown\n");
    for e in events {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            e.step,
            e.layer,
            e.dropped.len(),
            e.grown.len()
        );
    }
    s
}

fn run_dir(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn spec_of(ck: &Checkpoint) -> Result<VariantSpec> {
    VariantSpec::new(ck.config.env, ck.config.agents)
}

/// Greedy evaluation of a saved network; writes `eval_sigma_<σ>.csv`.
pub fn eval_checkpoint(path: &Path, episodes: usize, sigma: f64) -> Result<(EvalReport, PathBuf)> {
    if episodes == 0 {
        return Err(Error::Config {
            line: 0,
            key: "episodes".into(),
            message: "must be positive".into(),
        });
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config {
            line: 0,
            key: "sigma".into(),
            message: format!("must be a nonnegative variance, got {sigma}"),
        });
    }
    let ck = Checkpoint::load(path)?;
    let report = evaluate(
        &ck.network,
        &spec_of(&ck)?,
        episodes,
        sigma,
        eval_seed(ck.config.seed),
    )?
    .labeled(ck.config.algo.name(), ck.config.seed);
    let out = run_dir(path).join(format!("eval_sigma_{sigma}.csv"));
    write_reports(std::slice::from_ref(&report), &out)?;
    Ok((report, out))
}

/// Evaluates a saved network at each noise variance on paired episodes;
/// writes `robustness.csv`.
pub fn robustness(
    path: &Path,
    sigmas: &[f64],
    episodes: usize,
) -> Result<(Vec<EvalReport>, PathBuf)> {
    if let Some(bad) = sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(Error::Config {
            line: 0,
            key: "sigmas".into(),
            message: format!("noise variances must be nonnegative, got {bad}"),
        });
    }
    let ck = Checkpoint::load(path)?;
    let label = ck.config.algo.name().to_string();
    let reports = robustness_sweep(
        &[(label, &ck.network)],
        &spec_of(&ck)?,
        sigmas,
        episodes,
        eval_seed(ck.config.seed),
    )?
    .into_iter()
    .map(|r| {
        let algo = r.algo.clone();
        r.labeled(&algo, ck.config.seed)
    })
    .collect::<Vec<_>>();
    let out = run_dir(path).join("robustness.csv");
    write_reports(&reports, &out)?;
    Ok((reports, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskInspection {
    pub census: Vec<Vec<usize>>,
    pub census_csv: PathBuf,
    pub sparsity_csv: PathBuf,
    pub cross_block_active: usize,
    pub ledger_len: usize,
}

/// Writes `link_census.csv` and `layer_sparsity.csv` for a saved network.
pub fn inspect_mask(path: &Path) -> Result<MaskInspection> {
    let ck = Checkpoint::load(path)?;
    let (census, sparsity) = topology_csv(&ck.network);
    let dir = run_dir(path);
    let census_csv = dir.join("link_census.csv");
    let sparsity_csv = dir.join("layer_sparsity.csv");
    write_text(&census_csv, &census)?;
    write_text(&sparsity_csv, &sparsity)?;
    Ok(MaskInspection {
        census: crate::topology::link_census(&ck.network),
        census_csv,
        sparsity_csv,
        cross_block_active: crate::topology::cross_block_active(&ck.network),
        ledger_len: ck.ledger.len(),
    })
}

/// Parses `a..b` (inclusive) or a single seed.
pub fn parse_seed_range(text: &str) -> Result<RangeInclusive<u64>> {
    let bad = || Error::Config {
        line: 0,
        key: "seeds".into(),
        message: format!("expected `first..last` or a single seed, got `{text}`"),
    };
    let range = match text.split_once("..") {
        Some((a, b)) => {
            let a = a.trim().parse().map_err(|_| bad())?;
            let b = b
                .trim()
                .trim_start_matches('=')
                .parse()
                .map_err(|_| bad())?;
            a..=b
        }
        None => {
            let s = text.trim().parse().map_err(|_| bad())?;
            s..=s
        }
    };
    if range.is_empty() {
        return Err(bad());
    }
    Ok(range)
}

/// Trains one run per seed, in parallel when enabled, each in
/// `<output_dir>/seed-<s>`, and writes `sweep.csv` with the final evaluations.
pub fn sweep(
    config: &RunConfig,
    seeds: RangeInclusive<u64>,
    exec: Execution,
) -> Result<(Vec<TrainOutcome>, PathBuf)> {
    config.validate()?;
    let seeds: Vec<u64> = seeds.collect();
    let base = config.output_dir.clone();
    ensure_dir(&base)?;
    let outcomes = parallel::map_indexed(exec, seeds.len(), |k| {
        let mut c = config.clone();
        c.seed = seeds[k];
        c.output_dir = base.join(format!("seed-{}", seeds[k]));
        train(&c)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let reports: Vec<EvalReport> = outcomes.iter().map(|o| o.final_eval.clone()).collect();
    let out = base.join("sweep.csv");
    write_reports(&reports, &out)?;
    Ok((outcomes, out))
}
