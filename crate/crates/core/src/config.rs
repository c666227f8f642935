//! Run configuration in a small `key = value` format with `[section]` headers.
//!
//! ```text
//! env = ssc
//! algo = bun
//! seed = 3
//!
//! [growth]
//! budget = 30
//! ```
//!
//! Keys that appear before any section header belong to `[run]`. `#` starts
//! a comment. Unknown sections or keys, repeated keys, and out-of-range
//! values are errors carrying the line number.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dqn::EpsilonSchedule;
use crate::envs::{Variant, VariantSpec};
use crate::error::{Error, Result};
use crate::scheduler::{
    GrowthSchedule, GrowthScope, InitKind, RiglSchedule, TopologyRule, TrainerConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algo {
    Bun,
    Centralized,
    Decentralized,
    Rigl,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Bun => "bun",
            Algo::Centralized => "centralized",
            Algo::Decentralized => "decentralized",
            Algo::Rigl => "rigl",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bun" => Ok(Algo::Bun),
            "centralized" => Ok(Algo::Centralized),
            "decentralized" => Ok(Algo::Decentralized),
            "rigl" => Ok(Algo::Rigl),
            other => Err(format!(
                "unknown algo `{other}` (expected bun, centralized, decentralized or rigl)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: Variant,
    pub algo: Algo,
    pub agents: usize,
    pub hidden: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub output_dir: PathBuf,

    pub gamma: f64,
    pub lr: f64,
    pub beta: f64,
    pub batch: usize,
    pub growth_batch: Option<usize>,
    pub buffer: usize,
    pub epsilon: EpsilonSchedule,

    /// `budget` doubles as the extra active weights of the prune-and-grow baseline.
    pub growth: GrowthSchedule,

    pub rigl_period: u64,
    pub rigl_start: u64,
    /// Rewiring stops at this fraction of `total_steps`.
    pub rigl_end_fraction: f64,
    pub rigl_drop_fraction: f64,

    pub log_every: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
}

impl RunConfig {
    /// Defaults for everything except the three required keys.
    pub fn new(env: Variant, algo: Algo, seed: u64) -> Self {
        let budget = match algo {
            Algo::Bun | Algo::Rigl => 30,
            Algo::Centralized | Algo::Decentralized => 0,
        };
        Self {
            env,
            algo,
            agents: env.default_agents(),
            hidden: 18,
            total_steps: 200_000,
            seed,
            output_dir: PathBuf::from(format!("runs/{}-{}-{seed}", env.name(), algo.name())),
            gamma: 0.99,
            lr: 1e-4,
            beta: 0.01,
            batch: 1024,
            growth_batch: None,
            buffer: 1_000_000,
            epsilon: EpsilonSchedule::default(),
            growth: GrowthSchedule {
                budget,
                ..GrowthSchedule::default()
            },
            rigl_period: 100,
            rigl_start: 5_000,
            rigl_end_fraction: 0.75,
            rigl_drop_fraction: 0.1,
            log_every: 1000,
            eval_every: 5000,
            eval_episodes: 20,
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        let mut c = TrainerConfig::new(self.env, self.seed);
        c.num_agents = self.agents;
        c.hidden_per_agent = self.hidden;
        c.total_steps = self.total_steps;
        c.gamma = self.gamma;
        c.lr = self.lr;
        c.beta = self.beta;
        c.batch_size = self.batch;
        c.growth_batch = self.growth_batch;
        c.buffer_capacity = self.buffer;
        c.epsilon = self.epsilon;
        c.log_every = self.log_every;
        c.eval_every = self.eval_every;
        c.eval_episodes = self.eval_episodes;
        let no_growth = GrowthSchedule {
            budget: 0,
            ..self.growth
        };
        (c.init, c.topology) = match self.algo {
            Algo::Bun => (
                InitKind::BlockDiagonal,
                TopologyRule::Emergence(self.growth),
            ),
            Algo::Decentralized => (InitKind::BlockDiagonal, TopologyRule::Emergence(no_growth)),
            Algo::Centralized => (InitKind::Dense, TopologyRule::Emergence(no_growth)),
            Algo::Rigl => (
                InitKind::Random,
                TopologyRule::PruneAndGrow(RiglSchedule {
                    extra: self.growth.budget,
                    period: self.rigl_period,
                    start: self.rigl_start,
                    end: (self.total_steps as f64 * self.rigl_end_fraction) as u64,
                    drop_fraction: self.rigl_drop_fraction,
                }),
            ),
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, message: String| {
            Err(Error::Config {
                line: 0,
                key: key.to_string(),
                message,
            })
        };
        if let Err(e) = VariantSpec::new(self.env, self.agents) {
            return fail("agents", e.to_string());
        }
        if matches!(self.algo, Algo::Decentralized | Algo::Centralized) && self.growth.budget != 0 {
            return fail(
                "budget",
                format!(
                    "{} training adds no connections; budget must be 0",
                    self.algo
                ),
            );
        }
        if let Err(m) = self.growth.validate() {
            return fail("growth", m);
        }
        if self.rigl_period == 0 {
            return fail("rigl.period", "must be positive".into());
        }
        Ok(())
    }

    /// Parses, then overrides the seed (and the derived default output directory).
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        let default_dir = PathBuf::from(format!(
            "runs/{}-{}-{}",
            self.env.name(),
            self.algo.name(),
            self.seed
        ));
        if c.output_dir == default_dir {
            c.output_dir = PathBuf::from(format!(
                "runs/{}-{}-{seed}",
                self.env.name(),
                self.algo.name()
            ));
        }
        c.seed = seed;
        c
    }
}

impl fmt::Display for RunConfig {
    /// The canonical text form; [`parse_config`] reads it back unchanged.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "env = {}", self.env);
        let _ = writeln!(s, "algo = {}", self.algo);
        let _ = writeln!(s, "agents = {}", self.agents);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        let _ = writeln!(s, "\n[dqn]");
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "batch = {}", self.batch);
        if let Some(g) = self.growth_batch {
            let _ = writeln!(s, "growth_batch = {g}");
        }
        let _ = writeln!(s, "buffer = {}", self.buffer);
        let _ = writeln!(s, "epsilon_start = {}", self.epsilon.start);
        let _ = writeln!(s, "epsilon_end = {}", self.epsilon.end);
        let _ = writeln!(s, "epsilon_steps = {}", self.epsilon.horizon);
        let _ = writeln!(s, "\n[growth]");
        let _ = writeln!(s, "budget = {}", self.growth.budget);
        let _ = writeln!(s, "k = {}", self.growth.per_layer);
        let _ = writeln!(s, "scope = {}", self.growth.scope.name());
        let _ = writeln!(s, "period = {}", self.growth.period);
        let _ = writeln!(s, "start = {}", self.growth.start);
        let _ = writeln!(s, "end = {}", self.growth.end);
        let _ = writeln!(s, "\n[rigl]");
        let _ = writeln!(s, "period = {}", self.rigl_period);
        let _ = writeln!(s, "start = {}", self.rigl_start);
        let _ = writeln!(s, "end_fraction = {}", self.rigl_end_fraction);
        let _ = writeln!(s, "drop_fraction = {}", self.rigl_drop_fraction);
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "log_every = {}", self.log_every);
        let _ = writeln!(s, "every = {}", self.eval_every);
        let _ = writeln!(s, "episodes = {}", self.eval_episodes);
        f.write_str(&s)
    }
}

const KEYS: &[(&str, &[&str])] = &[
    (
        "run",
        &[
            "env",
            "algo",
            "agents",
            "hidden",
            "total_steps",
            "seed",
            "output_dir",
        ],
    ),
    (
        "dqn",
        &[
            "gamma",
            "lr",
            "beta",
            "batch",
            "growth_batch",
            "buffer",
            "epsilon_start",
            "epsilon_end",
            "epsilon_steps",
        ],
    ),
    (
        "growth",
        &["budget", "k", "scope", "period", "start", "end"],
    ),
    (
        "rigl",
        &["period", "start", "end_fraction", "drop_fraction"],
    ),
    ("eval", &["log_every", "every", "episodes"]),
];

const REQUIRED: &[&str] = &["run.env", "run.algo", "run.seed"];

struct Entries {
    map: HashMap<String, (usize, String)>,
}

impl Entries {
    fn take<T: FromStr>(
        &mut self,
        key: &str,
        check: impl Fn(&T) -> std::result::Result<(), String>,
    ) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        let Some((line, raw)) = self.map.remove(key) else {
            return Ok(None);
        };
        let err = |message: String| Error::Config {
            line,
            key: key.to_string(),
            message,
        };
        let v = raw
            .parse::<T>()
            .map_err(|e| err(format!("cannot parse `{raw}`: {e}")))?;
        check(&v).map_err(err)?;
        Ok(Some(v))
    }

    fn line(&self, key: &str) -> usize {
        self.map.get(key).map_or(0, |(l, _)| *l)
    }
}

fn any<T>(_: &T) -> std::result::Result<(), String> {
    Ok(())
}

fn positive<T: PartialOrd + Default + fmt::Display>(v: &T) -> std::result::Result<(), String> {
    if *v > T::default() {
        Ok(())
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn unit(v: &f64) -> std::result::Result<(), String> {
    if (0.0..=1.0).contains(v) {
        Ok(())
    } else {
        Err(format!("must lie in [0, 1], got {v}"))
    }
}

fn positive_f(v: &f64) -> std::result::Result<(), String> {
    if v.is_finite() && *v > 0.0 {
        Ok(())
    } else {
        Err(format!("must be a positive finite number, got {v}"))
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut section = "run".to_string();
    let mut entries = Entries {
        map: HashMap::new(),
    };
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return Err(Error::Config {
                    line,
                    key: content.to_string(),
                    message: "unterminated section header".into(),
                });
            };
            let name = name.trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(Error::Config {
                    line,
                    key: name.to_string(),
                    message: "unknown section".into(),
                });
            }
            section = name.to_string();
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(Error::Config {
                line,
                key: content.to_string(),
                message: "expected `key = value`".into(),
            });
        };
        let k = k.trim();
        let known = KEYS
            .iter()
            .find(|(s, _)| *s == section)
            .is_some_and(|(_, keys)| keys.contains(&k));
        let full = format!("{section}.{k}");
        if !known {
            return Err(Error::Config {
                line,
                key: full,
                message: "unknown key".into(),
            });
        }
        if entries.map.contains_key(&full) {
            return Err(Error::Config {
                line,
                key: full,
                message: "key given twice".into(),
            });
        }
        entries.map.insert(full, (line, v.trim().to_string()));
    }
    for key in REQUIRED {
        if !entries.map.contains_key(*key) {
            return Err(Error::Config {
                line: 0,
                key: key.to_string(),
                message: "missing required key".into(),
            });
        }
    }

    let env: Variant = entries.take("run.env", any)?.expect("required");
    let algo: Algo = entries.take("run.algo", any)?.expect("required");
    let seed: u64 = entries.take("run.seed", any)?.expect("required");
    let mut c = RunConfig::new(env, algo, seed);

    let agents_line = entries.line("run.agents");
    if let Some(v) = entries.take("run.agents", positive)? {
        c.agents = v;
    }
    if let Err(e) = VariantSpec::new(env, c.agents) {
        return Err(Error::Config {
            line: agents_line,
            key: "run.agents".into(),
            message: e.to_string(),
        });
    }
    if let Some(v) = entries.take("run.hidden", positive)? {
        c.hidden = v;
    }
    if let Some(v) = entries.take("run.total_steps", positive)? {
        c.total_steps = v;
    }
    if let Some(v) = entries.take::<String>("run.output_dir", |s| {
        if s.is_empty() {
            Err("must not be empty".into())
        } else {
            Ok(())
        }
    })? {
        c.output_dir = PathBuf::from(v);
    }

    if let Some(v) = entries.take("dqn.gamma", unit)? {
        c.gamma = v;
    }
    if let Some(v) = entries.take("dqn.lr", positive_f)? {
        c.lr = v;
    }
    if let Some(v) = entries.take("dqn.beta", unit)? {
        c.beta = v;
    }
    if let Some(v) = entries.take("dqn.batch", positive)? {
        c.batch = v;
    }
    if let Some(v) = entries.take("dqn.growth_batch", positive)? {
        c.growth_batch = Some(v);
    }
    let buffer_line = entries.line("dqn.buffer");
    if let Some(v) = entries.take("dqn.buffer", positive)? {
        c.buffer = v;
    }
    if c.buffer < c.batch {
        return Err(Error::Config {
            line: buffer_line,
            key: "dqn.buffer".into(),
            message: format!(
                "capacity {} is smaller than the batch {}",
                c.buffer, c.batch
            ),
        });
    }
    if let Some(v) = entries.take("dqn.epsilon_start", unit)? {
        c.epsilon.start = v;
    }
    if let Some(v) = entries.take("dqn.epsilon_end", unit)? {
        c.epsilon.end = v;
    }
    if let Some(v) = entries.take("dqn.epsilon_steps", any)? {
        c.epsilon.horizon = v;
    }

    let budget_line = entries.line("growth.budget");
    if let Some(v) = entries.take("growth.budget", any)? {
        c.growth.budget = v;
    }
    if let Some(v) = entries.take("growth.k", any)? {
        c.growth.per_layer = v;
    }
    if let Some(v) = entries.take::<GrowthScope>("growth.scope", any)? {
        c.growth.scope = v;
    }
    if let Some(v) = entries.take("growth.period", positive)? {
        c.growth.period = v;
    }
    let window_line = entries.line("growth.end").max(entries.line("growth.start"));
    if let Some(v) = entries.take("growth.start", any)? {
        c.growth.start = v;
    }
    if let Some(v) = entries.take("growth.end", any)? {
        c.growth.end = v;
    }
    if let Err(m) = c.growth.validate() {
        return Err(Error::Config {
            line: window_line,
            key: "growth.end".into(),
            message: m,
        });
    }
    if matches!(algo, Algo::Decentralized | Algo::Centralized) && c.growth.budget != 0 {
        return Err(Error::Config {
            line: budget_line,
            key: "growth.budget".into(),
            message: format!("{algo} training adds no connections; budget must be 0"),
        });
    }

    if let Some(v) = entries.take("rigl.period", positive)? {
        c.rigl_period = v;
    }
    if let Some(v) = entries.take("rigl.start", any)? {
        c.rigl_start = v;
    }
    if let Some(v) = entries.take("rigl.end_fraction", unit)? {
        c.rigl_end_fraction = v;
    }
    if let Some(v) = entries.take("rigl.drop_fraction", unit)? {
        c.rigl_drop_fraction = v;
    }

    if let Some(v) = entries.take("eval.log_every", any)? {
        c.log_every = v;
    }
    if let Some(v) = entries.take("eval.every", any)? {
        c.eval_every = v;
    }
    if let Some(v) = entries.take("eval.episodes", positive)? {
        c.eval_episodes = v;
    }
    debug_assert!(
        entries.map.is_empty(),
        "unconsumed keys: {:?}",
        entries.map.keys()
    );
    Ok(c)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
