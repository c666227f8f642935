//! FLOPs accounting, greedy evaluation, robustness sweeps, and CSV reports.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dqn::greedy_actions;
use crate::envs::{inject_noise, EpisodeTrace, NavWorld, Variant, VariantSpec, EPISODE_LEN};
use crate::error::{Error, Result};
use crate::numerics::QNetwork;
use crate::parallel::{self, Execution};
use crate::topology::{link_census, network_sparsity};

/// Episodes per evaluation unless stated otherwise.
pub const DEFAULT_EVAL_EPISODES: usize = 20;

/// Forward-pass cost: two operations per active weight and one per bias.
pub fn forward_flops(net: &QNetwork) -> u64 {
    net.layers()
        .iter()
        .map(|l| (2 * l.mask().nnz() + l.out_dim()) as u64)
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub variant: Variant,
    pub algo: String,
    pub seed: u64,
    pub sigma: f64,
    /// Percentage of successful episodes.
    pub success_rate: f64,
    /// Mean time to success, counting failed episodes as 25.
    pub mean_t: f64,
    /// Mean time to success over successful episodes only (NaN if none).
    pub mean_t_success: f64,
    pub mean_return: f64,
    pub flops: u64,
    pub sparsity: f64,
    pub link_census: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn labeled(mut self, algo: &str, seed: u64) -> Self {
        self.algo = algo.to_string();
        self.seed = seed;
        self
    }
}

/// Derives the RNG for one evaluation episode. `purpose` separates the
/// environment layout stream from the observation-noise stream.
fn episode_rng(eval_seed: u64, episode: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed ^ 0xE7A1_5EED_0000_0000);
    rng.set_stream(episode as u64 * 2 + purpose);
    rng
}

/// Plays one greedy episode; the network sees noisy observations while the
/// true state drives dynamics and rewards.
pub fn run_episode(
    net: &QNetwork,
    spec: &VariantSpec,
    sigma: f64,
    eval_seed: u64,
    episode: usize,
) -> Result<EpisodeTrace> {
    let mut env_rng = episode_rng(eval_seed, episode, 0);
    let mut noise_rng = episode_rng(eval_seed, episode, 1);
    let (mut world, mut obs) = NavWorld::reset(spec, &mut env_rng);
    let mut trace = EpisodeTrace::start(&world);
    for _ in 0..EPISODE_LEN {
        let seen = inject_noise(&obs, sigma, &mut noise_rng);
        let q = net.forward(&seen)?;
        let actions = greedy_actions(&q, net.partition());
        let out = world.step(&actions)?;
        trace.record(&world, &out.rewards);
        obs = out.observation;
        if out.done {
            break;
        }
    }
    Ok(trace)
}

/// Greedy evaluation over `episodes` freshly seeded episodes.
pub fn evaluate(
    net: &QNetwork,
    spec: &VariantSpec,
    episodes: usize,
    sigma: f64,
    eval_seed: u64,
) -> Result<EvalReport> {
    assert!(episodes >= 1, "evaluation needs at least one episode");
    if spec.num_agents() != net.partition().num_agents() {
        return Err(Error::dim(
            "evaluation agents",
            net.partition().num_agents(),
            spec.num_agents(),
        ));
    }
    let traces = parallel::map_indexed(Execution::default(), episodes, |e| {
        run_episode(net, spec, sigma, eval_seed, e)
    });
    let mut successes = 0usize;
    let mut t_all = 0usize;
    let mut t_ok = 0usize;
    let mut ret = 0.0;
    for trace in traces {
        let trace = trace?;
        let (ok, t) = trace.success_and_time();
        if ok {
            successes += 1;
            t_ok += t;
        }
        t_all += t;
        ret += trace.team_return();
    }
    let n = episodes as f64;
    Ok(EvalReport {
        variant: spec.variant,
        algo: String::new(),
        seed: eval_seed,
        sigma,
        success_rate: 100.0 * successes as f64 / n,
        mean_t: t_all as f64 / n,
        mean_t_success: if successes > 0 {
            t_ok as f64 / successes as f64
        } else {
            f64::NAN
        },
        mean_return: ret / n,
        flops: forward_flops(net),
        sparsity: network_sparsity(net),
        link_census: link_census(net),
    })
}

/// Evaluates every network at every noise level with the same evaluation
/// seed, so noise realizations are paired across networks.
pub fn robustness_sweep(
    nets: &[(String, &QNetwork)],
    spec: &VariantSpec,
    sigmas: &[f64],
    episodes: usize,
    eval_seed: u64,
) -> Result<Vec<EvalReport>> {
    let mut out = Vec::with_capacity(nets.len() * sigmas.len());
    for &sigma in sigmas {
        if sigma.is_nan() || sigma < 0.0 {
            return Err(Error::Config {
                line: 0,
                key: "sigma".into(),
                message: format!("noise variance {sigma} must be nonnegative"),
            });
        }
        for (label, net) in nets {
            out.push(evaluate(net, spec, episodes, sigma, eval_seed)?.labeled(label, eval_seed));
        }
    }
    Ok(out)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

fn census_header(n: usize) -> String {
    let mut h = String::new();
    for p in 0..n {
        for q in 0..n {
            let _ = write!(h, ",link_{p}_{q}");
        }
    }
    h
}

pub const REPORT_HEADER: &str =
    "variant,algo,seed,sigma,success_rate,mean_T,mean_return,flops,sparsity";

/// Writes evaluation reports; all reports must share one agent count.
pub fn write_reports(reports: &[EvalReport], path: &Path) -> Result<()> {
    let n = reports.first().map_or(0, |r| r.link_census.len());
    let mut text = format!("{REPORT_HEADER}{}\n", census_header(n));
    for r in reports {
        if r.link_census.len() != n {
            return Err(Error::dim("report agent count", n, r.link_census.len()));
        }
        let _ = write!(
            text,
            "{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.algo,
            r.seed,
            r.sigma,
            r.success_rate,
            r.mean_t,
            r.mean_return,
            r.flops,
            r.sparsity
        );
        for row in &r.link_census {
            for v in row {
                let _ = write!(text, ",{v}");
            }
        }
        text.push('\n');
    }
    write_file(path, &text)
}

/// Parses a file produced by [`write_reports`]. `mean_t_success` is not
/// stored and comes back as NaN.
pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let links = header.split(',').count().saturating_sub(9);
    let n = (links as f64).sqrt() as usize;
    if n * n != links || !header.starts_with(REPORT_HEADER) {
        return Err(Error::Checkpoint(format!(
            "{}: not a report file",
            path.display()
        )));
    }
    let bad = |line: usize, what: &str| Error::Config {
        line,
        key: what.to_string(),
        message: format!("unparsable value in {}", path.display()),
    };
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 + links {
            return Err(bad(k + 2, "row"));
        }
        let num = |i: usize, name: &str| f[i].parse::<f64>().map_err(|_| bad(k + 2, name));
        let mut census = vec![vec![0usize; n]; n];
        for (idx, cell) in f[9..].iter().enumerate() {
            census[idx / n][idx % n] = cell.parse().map_err(|_| bad(k + 2, "link"))?;
        }
        out.push(EvalReport {
            variant: f[0].parse().map_err(|_| bad(k + 2, "variant"))?,
            algo: f[1].to_string(),
            seed: f[2].parse().map_err(|_| bad(k + 2, "seed"))?,
            sigma: num(3, "sigma")?,
            success_rate: num(4, "success_rate")?,
            mean_t: num(5, "mean_T")?,
            mean_t_success: f64::NAN,
            mean_return: num(6, "mean_return")?,
            flops: f[7].parse().map_err(|_| bad(k + 2, "flops"))?,
            sparsity: num(8, "sparsity")?,
            link_census: census,
        });
    }
    Ok(out)
}

/// One row of the periodic training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLogRow {
    pub step: u64,
    /// Mean team return of episodes finished in the window (NaN if none).
    pub mean_episode_reward: f64,
    /// Mean TD loss over gradient steps in the window (NaN if none).
    pub loss: f64,
    pub epsilon: f64,
    pub nnz: usize,
    pub flops: u64,
}

pub const TRAINING_LOG_HEADER: &str = "step,mean_episode_reward,loss,epsilon,nnz,flops";

pub fn write_training_log(rows: &[TrainingLogRow], path: &Path) -> Result<()> {
    let mut text = format!("{TRAINING_LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{}",
            r.step, r.mean_episode_reward, r.loss, r.epsilon, r.nnz, r.flops
        );
    }
    write_file(path, &text)
}

/// Periodic greedy evaluation during training.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningCurveRow {
    pub step: u64,
    pub success_rate: f64,
    pub mean_t: f64,
    pub mean_return: f64,
}

pub const LEARNING_CURVE_HEADER: &str = "step,success_rate,mean_T,mean_return";

pub fn write_learning_curve(rows: &[LearningCurveRow], path: &Path) -> Result<()> {
    let mut text = format!("{LEARNING_CURVE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            text,
            "{},{},{},{}",
            r.step, r.success_rate, r.mean_t, r.mean_return
        );
    }
    write_file(path, &text)
}

/// Per-layer sparsity and link census of a network as CSV text.
pub fn topology_csv(net: &QNetwork) -> (String, String) {
    let census = link_census(net);
    let n = census.len();
    let mut c = String::from("agent");
    for q in 0..n {
        let _ = write!(c, ",from_{q}");
    }
    c.push('\n');
    for (p, row) in census.iter().enumerate() {
        let _ = write!(c, "{p}");
        for v in row {
            let _ = write!(c, ",{v}");
        }
        c.push('\n');
    }
    let mut s = String::from("layer,rows,cols,nnz,sparsity\n");
    for (l, layer) in net.layers().iter().enumerate() {
        let m = layer.mask();
        let _ = writeln!(
            s,
            "{l},{},{},{},{}",
            m.rows(),
            m.cols(),
            m.nnz(),
            crate::topology::sparsity(m)
        );
    }
    (c, s)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text)
}
