use std::path::Path;

use bun_core::checkpoint::Checkpoint;
use bun_core::config::{load_config, Algo, RunConfig};
use bun_core::envs::Variant;
use bun_core::metrics::read_reports;
use bun_core::parallel::Execution;
use bun_core::run;

fn short(env: Variant, algo: Algo, seed: u64, dir: &Path) -> RunConfig {
    let mut c = RunConfig::new(env, algo, seed);
    c.total_steps = 3000;
    c.batch = 32;
    c.buffer = 5000;
    c.eval_every = 1000;
    c.eval_episodes = 4;
    c.log_every = 500;
    c.output_dir = dir.to_path_buf();
    if algo == Algo::Bun {
        c.growth.start = 500;
        c.growth.end = 2600;
        c.growth.period = 500;
        c.growth.budget = 10;
    }
    if algo == Algo::Rigl {
        c.rigl_start = 500;
        c.rigl_period = 250;
    }
    c
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run::train(&short(
        Variant::Communication,
        Algo::Bun,
        4,
        &tmp.path().join("a"),
    ))
    .unwrap();
    let b = run::train(&short(
        Variant::Communication,
        Algo::Bun,
        4,
        &tmp.path().join("b"),
    ))
    .unwrap();
    for f in [
        run::TRAINING_LOG_FILE,
        run::LEARNING_CURVE_FILE,
        run::GROWTH_EVENTS_FILE,
        run::FINAL_EVAL_FILE,
    ] {
        assert_eq!(read(&a.dir, f), read(&b.dir, f), "{f} differs");
    }
    // the embedded config differs only in output_dir
    let (ca, cb) = (
        Checkpoint::load(&a.checkpoint).unwrap(),
        Checkpoint::load(&b.checkpoint).unwrap(),
    );
    assert_eq!(ca.network, cb.network);
    assert_eq!(ca.rng, cb.rng);
    assert_eq!(ca.ledger.records(), cb.ledger.records());
    let c = run::train(&short(
        Variant::Communication,
        Algo::Bun,
        5,
        &tmp.path().join("c"),
    ))
    .unwrap();
    assert_ne!(
        read(&a.dir, run::TRAINING_LOG_FILE),
        read(&c.dir, run::TRAINING_LOG_FILE)
    );
}

#[test]
fn zero_budget_matches_decentralized_learning_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let mut bun = short(Variant::Simple, Algo::Bun, 2, &tmp.path().join("bun"));
    bun.growth.budget = 0;
    let dec = short(
        Variant::Simple,
        Algo::Decentralized,
        2,
        &tmp.path().join("dec"),
    );
    let a = run::train(&bun).unwrap();
    let b = run::train(&dec).unwrap();
    assert_eq!(
        read(&a.dir, run::LEARNING_CURVE_FILE),
        read(&b.dir, run::LEARNING_CURVE_FILE)
    );
    assert_eq!(
        read(&a.dir, run::TRAINING_LOG_FILE),
        read(&b.dir, run::TRAINING_LOG_FILE)
    );
    assert!(!a.dir.join(run::GROWTH_EVENTS_FILE).exists());
}

#[test]
fn checkpoint_commands_agree_with_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short(Variant::CrossCommunication, Algo::Bun, 3, tmp.path());
    let out = run::train(&cfg).unwrap();

    let (report, path) = run::eval_checkpoint(&out.checkpoint, cfg.eval_episodes, 0.0).unwrap();
    assert_eq!(report.success_rate, out.final_eval.success_rate);
    assert_eq!(
        report.mean_return.to_bits(),
        out.final_eval.mean_return.to_bits()
    );
    assert_eq!(read_reports(&path).unwrap()[0].flops, out.final_eval.flops);

    let (reports, rpath) =
        run::robustness(&out.checkpoint, &[0.0, 0.5], cfg.eval_episodes).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(
        reports[0].mean_return.to_bits(),
        out.final_eval.mean_return.to_bits()
    );
    assert_eq!(read_reports(&rpath).unwrap().len(), 2);

    let m = run::inspect_mask(&out.checkpoint).unwrap();
    let ck = Checkpoint::load(&out.checkpoint).unwrap();
    assert_eq!(m.cross_block_active, m.ledger_len);
    assert_eq!(m.ledger_len, ck.ledger.len());
    assert!(m.ledger_len <= 10);
    let off: usize = (0..3)
        .flat_map(|p| (0..3).map(move |q| (p, q)))
        .filter(|(p, q)| p != q)
        .map(|(p, q)| m.census[p][q])
        .sum();
    assert_eq!(off, m.cross_block_active);
    let census_rows = read(tmp.path(), "link_census.csv").lines().count();
    assert!(census_rows > 1);

    let echoed = load_config(&tmp.path().join(run::CONFIG_ECHO_FILE)).unwrap();
    assert_eq!(echoed, cfg);
    assert_eq!(ck.config, cfg);
}

#[test]
fn rigl_run_writes_rewire_events_and_keeps_nnz() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run::train(&short(Variant::Simple, Algo::Rigl, 1, tmp.path())).unwrap();
    let rewires = read(tmp.path(), run::REWIRE_EVENTS_FILE);
    assert!(rewires.lines().count() > 1);
    let log = read(tmp.path(), run::TRAINING_LOG_FILE);
    let nnz: Vec<&str> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap())
        .collect();
    assert!(nnz.windows(2).all(|w| w[0] == w[1]));
    assert!(out.final_eval.sparsity > 0.0);
}

#[test]
fn sweep_is_the_same_sequential_or_parallel() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = short(
        Variant::Simple,
        Algo::Decentralized,
        1,
        &tmp.path().join("seq"),
    );
    cfg.total_steps = 1500;
    let (a, pa) = run::sweep(&cfg, 1..=2, Execution::Sequential).unwrap();
    cfg.output_dir = tmp.path().join("par");
    let (b, pb) = run::sweep(&cfg, 1..=2, Execution::Parallel).unwrap();
    assert_eq!(a.len(), 2);
    assert_eq!(
        std::fs::read_to_string(pa).unwrap(),
        std::fs::read_to_string(pb).unwrap()
    );
    assert!(b[1].dir.ends_with("seed-2"));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "ini") {
            let c = load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            c.validate().unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 3);
}

#[test]
fn readme_config_example_parses() {
    let readme =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md"))
            .unwrap();
    let start = readme.find("```\n[run]").expect("config example") + 4;
    let end = start + readme[start..].find("```").unwrap();
    let c = bun_core::config::parse_config(&readme[start..end]).unwrap();
    assert_eq!(c.algo, Algo::Bun);
    assert_eq!(c.growth_batch, Some(1024));
    let mut expect = RunConfig::new(Variant::Communication, Algo::Bun, 1);
    expect.growth_batch = Some(1024);
    assert_eq!(c, expect);
}
