//! The training loop: ε-greedy interaction, replayed TD updates, scheduled
//! weight emergence under a global budget, and the prune-and-grow baseline.
//!
//! Centralized and decentralized training are not separate code paths: they
//! are the emergence loop with a dense or block-diagonal initial mask and a
//! zero budget.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dqn::{
    epsilon_greedy, soft_update_target, td_loss_and_grads, EpsilonSchedule, ReplayBuffer,
    Transition,
};
use crate::envs::{NavWorld, Variant, VariantSpec, NUM_ACTIONS, OBS_DIM};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, forward_flops, LearningCurveRow, TrainingLogRow};
use crate::numerics::{
    apply_update, BitMask, Gradients, Matrix, OptimizerState, QNetwork, UpdateRule,
};
use crate::topology::{
    self, build_block_diagonal_mask, eligible_entries, grow, link_census, select_growth,
    select_growth_global, AgentPartition, GrowthLedger, GrowthRecord, MaskInit,
};

/// How the `k` of a growth event is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GrowthScope {
    /// `k` entries in every layer, layers visited input to output.
    #[default]
    PerLayer,
    /// `k` entries in total, ranked across all layers.
    Global,
}

impl GrowthScope {
    pub fn name(self) -> &'static str {
        match self {
            GrowthScope::PerLayer => "per_layer",
            GrowthScope::Global => "global",
        }
    }
}

impl std::str::FromStr for GrowthScope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per_layer" => Ok(GrowthScope::PerLayer),
            "global" => Ok(GrowthScope::Global),
            other => Err(format!(
                "unknown growth scope `{other}` (expected per_layer or global)"
            )),
        }
    }
}

/// When and how many cross-agent connections emerge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrowthSchedule {
    /// Total connections that may ever emerge.
    pub budget: usize,
    /// Connections selected at each event, per layer or in total depending on `scope`.
    pub per_layer: usize,
    pub scope: GrowthScope,
    pub period: u64,
    /// Events happen strictly after `start` and strictly before `end`.
    pub start: u64,
    pub end: u64,
}

impl Default for GrowthSchedule {
    fn default() -> Self {
        Self {
            budget: 30,
            per_layer: 3,
            scope: GrowthScope::PerLayer,
            period: 1000,
            start: 10_000,
            end: 30_000,
        }
    }
}

impl GrowthSchedule {
    pub fn is_event(&self, t: u64) -> bool {
        self.period > 0 && t.is_multiple_of(self.period) && self.start < t && t < self.end
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.period == 0 {
            return Err("growth period must be positive".into());
        }
        if self.start >= self.end {
            return Err(format!(
                "growth start {} must precede end {}",
                self.start, self.end
            ));
        }
        Ok(())
    }
}

/// Prune-and-grow schedule with a fixed number of active weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiglSchedule {
    /// Active weights beyond the block-diagonal count.
    pub extra: usize,
    pub period: u64,
    pub start: u64,
    pub end: u64,
    /// Initial fraction of each layer's active weights replaced per event.
    pub drop_fraction: f64,
}

impl RiglSchedule {
    pub fn for_run(total_steps: u64, extra: usize) -> Self {
        Self {
            extra,
            period: 100,
            start: 5_000,
            end: (total_steps as f64 * 0.75) as u64,
            drop_fraction: 0.1,
        }
    }

    pub fn is_event(&self, t: u64) -> bool {
        self.period > 0 && t.is_multiple_of(self.period) && self.start < t && t < self.end
    }

    /// Cosine-annealed replacement fraction, reaching zero at `end`.
    pub fn fraction_at(&self, t: u64) -> f64 {
        if t >= self.end || self.end <= self.start {
            return 0.0;
        }
        let progress = t.saturating_sub(self.start) as f64 / (self.end - self.start) as f64;
        0.5 * self.drop_fraction * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TopologyRule {
    Emergence(GrowthSchedule),
    PruneAndGrow(RiglSchedule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    BlockDiagonal,
    Dense,
    /// Uniformly random support with as many active weights per layer as the
    /// block-diagonal mask, plus the prune-and-grow extra weights.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub variant: Variant,
    pub num_agents: usize,
    pub hidden_per_agent: usize,
    pub hidden_layers: usize,
    pub seed: u64,
    pub total_steps: u64,
    pub gamma: f64,
    pub lr: f64,
    pub beta: f64,
    pub batch_size: usize,
    /// Batch drawn for the gradient that ranks growth candidates; `None`
    /// uses `batch_size`.
    pub growth_batch: Option<usize>,
    pub buffer_capacity: usize,
    pub epsilon: EpsilonSchedule,
    pub init: InitKind,
    pub topology: TopologyRule,
    pub log_every: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
}

impl TrainerConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            num_agents: variant.default_agents(),
            hidden_per_agent: 18,
            hidden_layers: 3,
            seed,
            total_steps: 200_000,
            gamma: 0.99,
            lr: 1e-4,
            beta: 0.01,
            batch_size: 1024,
            growth_batch: None,
            buffer_capacity: 1_000_000,
            epsilon: EpsilonSchedule::default(),
            init: InitKind::BlockDiagonal,
            topology: TopologyRule::Emergence(GrowthSchedule::default()),
            log_every: 1000,
            eval_every: 5000,
            eval_episodes: 20,
        }
    }

    pub fn partition(&self) -> Result<AgentPartition> {
        AgentPartition::for_agents(
            &vec![OBS_DIM; self.num_agents],
            self.hidden_per_agent,
            self.hidden_layers,
            &vec![NUM_ACTIONS; self.num_agents],
        )
    }

    pub fn budget(&self) -> usize {
        match self.topology {
            TopologyRule::Emergence(g) => g.budget,
            TopologyRule::PruneAndGrow(_) => 0,
        }
    }
}

/// Splits `extra` weights over layers as evenly as possible, earlier layers first.
pub fn spread_over_layers(extra: usize, layers: usize) -> Vec<usize> {
    (0..layers)
        .map(|l| extra / layers + usize::from(l < extra % layers))
        .collect()
}

/// Independent random streams of one run. Evaluation never draws from these.
#[derive(Debug, Clone, PartialEq)]
pub struct RngStreams {
    pub init: ChaCha8Rng,
    pub env: ChaCha8Rng,
    pub explore: ChaCha8Rng,
    pub replay: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |id: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(id);
            r
        };
        Self {
            init: stream(0),
            env: stream(1),
            explore: stream(2),
            replay: stream(3),
        }
    }

    pub fn all(&self) -> [&ChaCha8Rng; 4] {
        [&self.init, &self.env, &self.explore, &self.replay]
    }
}

/// Magnitude summary of the current gradient, logged at growth events.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReport {
    /// Mean `|g|` over active weights.
    pub active_mean: f64,
    /// Mean `|g|` over masked-off cross-block weights.
    pub eligible_mean: f64,
}

pub fn active_gradient_report(grads: &Gradients, net: &QNetwork) -> GradientReport {
    let (mut a_sum, mut a_n, mut e_sum, mut e_n) = (0.0, 0usize, 0.0, 0usize);
    for (l, layer) in net.layers().iter().enumerate() {
        let g = &grads.weights[l];
        let mask = layer.mask();
        for (&on, &v) in mask.bits().iter().zip(g.as_slice()) {
            if on {
                a_sum += v.abs();
                a_n += 1;
            }
        }
        for (i, j) in eligible_entries(mask, net.partition(), l) {
            e_sum += g.get(i, j).abs();
            e_n += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    GradientReport {
        active_mean: mean(a_sum, a_n),
        eligible_mean: mean(e_sum, e_n),
    }
}

/// First-order predicted change of the loss, `∇L · Δθ`, over every weight and bias.
pub fn predicted_loss_change(grads: &Gradients, delta: &Gradients) -> Result<f64> {
    if grads.weights.len() != delta.weights.len() || grads.biases.len() != delta.biases.len() {
        return Err(Error::dim(
            "parameter delta layers",
            grads.weights.len(),
            delta.weights.len(),
        ));
    }
    let mut total = 0.0;
    for (g, d) in grads.weights.iter().zip(&delta.weights) {
        if !g.same_shape(d) {
            return Err(Error::dim(
                "parameter delta",
                g.as_slice().len(),
                d.as_slice().len(),
            ));
        }
        total += g
            .as_slice()
            .iter()
            .zip(d.as_slice())
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
    for (g, d) in grads.biases.iter().zip(&delta.biases) {
        if g.len() != d.len() {
            return Err(Error::dim("bias delta", g.len(), d.len()));
        }
        total += g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total)
}

/// One weight-emergence event.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthEvent {
    pub step: u64,
    pub records: Vec<GrowthRecord>,
    pub gradients: GradientReport,
    /// Predicted loss change of a plain gradient step restricted to the
    /// previously active weights (always ≤ 0).
    pub predicted_active: f64,
    /// Same for the newly grown weights alone.
    pub predicted_grown: f64,
    pub census: Vec<Vec<usize>>,
}

/// One prune-and-grow event on one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RewireEvent {
    pub step: u64,
    pub layer: usize,
    pub dropped: Vec<Entry>,
    pub grown: Vec<Entry>,
}

/// A weight position `(row, col)`.
pub type Entry = (usize, usize);

/// Drop and grow sets for one layer: the `d` active entries with the
/// smallest `|w|` and the `d` entries inactive before the drop with the
/// largest `|g|`. Ties go to the lowest `(row, col)`.
pub fn rewire_sets(
    weights: &Matrix,
    mask: &BitMask,
    grads: &Matrix,
    d: usize,
) -> (Vec<Entry>, Vec<Entry>) {
    let cols = mask.cols();
    let mut active: Vec<(f64, usize)> = Vec::new();
    let mut inactive: Vec<(f64, usize)> = Vec::new();
    for (k, &on) in mask.bits().iter().enumerate() {
        if on {
            active.push((weights.as_slice()[k].abs(), k));
        } else {
            inactive.push((grads.as_slice()[k].abs(), k));
        }
    }
    let d = d.min(active.len()).min(inactive.len());
    active.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    inactive.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let to_rc = |k: usize| (k / cols, k % cols);
    (
        active[..d].iter().map(|&(_, k)| to_rc(k)).collect(),
        inactive[..d].iter().map(|&(_, k)| to_rc(k)).collect(),
    )
}

/// Full training state of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainerConfig,
    spec: VariantSpec,
    online: QNetwork,
    target: QNetwork,
    optimizer: OptimizerState,
    buffer: ReplayBuffer,
    ledger: GrowthLedger,
    rng: RngStreams,
    step: u64,
    world: NavWorld,
    obs: Vec<f64>,
    episode_return: f64,
    window_returns: Vec<f64>,
    window_loss: (f64, u64),
    last_loss: f64,
    log: Vec<TrainingLogRow>,
    curve: Vec<LearningCurveRow>,
    growth_events: Vec<GrowthEvent>,
    rewire_events: Vec<RewireEvent>,
}

impl Trainer {
    pub fn new(config: TrainerConfig) -> Result<Self> {
        if let TopologyRule::Emergence(g) = &config.topology {
            g.validate().map_err(|m| Error::Config {
                line: 0,
                key: "growth".into(),
                message: m,
            })?;
        }
        let spec = VariantSpec::new(config.variant, config.num_agents)?;
        let partition = config.partition()?;
        let mut rng = RngStreams::new(config.seed);
        let init = match config.init {
            InitKind::BlockDiagonal => MaskInit::BlockDiagonal,
            InitKind::Dense => MaskInit::Dense,
            InitKind::Random => {
                let extra = match config.topology {
                    TopologyRule::PruneAndGrow(r) => r.extra,
                    TopologyRule::Emergence(_) => 0,
                };
                let share = spread_over_layers(extra, partition.num_layers());
                let nnz = (0..partition.num_layers())
                    .map(|l| Ok(build_block_diagonal_mask(&partition, l)?.nnz() + share[l]))
                    .collect::<Result<Vec<_>>>()?;
                MaskInit::Random { nnz }
            }
        };
        let online = QNetwork::initialize(&partition, &init, &mut rng.init)?;
        let target = online.clone();
        let optimizer = OptimizerState::new(&online, UpdateRule::adam(), config.lr);
        let buffer = ReplayBuffer::new(config.buffer_capacity, online.in_dim(), config.num_agents);
        let ledger = GrowthLedger::new(config.budget());
        let (world, obs) = NavWorld::reset(&spec, &mut rng.env);
        Ok(Self {
            config,
            spec,
            online,
            target,
            optimizer,
            buffer,
            ledger,
            rng,
            step: 0,
            world,
            obs,
            episode_return: 0.0,
            window_returns: Vec::new(),
            window_loss: (0.0, 0),
            last_loss: f64::NAN,
            log: Vec::new(),
            curve: Vec::new(),
            growth_events: Vec::new(),
            rewire_events: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn spec(&self) -> &VariantSpec {
        &self.spec
    }

    pub fn online(&self) -> &QNetwork {
        &self.online
    }

    pub fn target(&self) -> &QNetwork {
        &self.target
    }

    pub fn ledger(&self) -> &GrowthLedger {
        &self.ledger
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn rng(&self) -> &RngStreams {
        &self.rng
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn last_loss(&self) -> f64 {
        self.last_loss
    }

    pub fn training_log(&self) -> &[TrainingLogRow] {
        &self.log
    }

    pub fn learning_curve(&self) -> &[LearningCurveRow] {
        &self.curve
    }

    pub fn growth_events(&self) -> &[GrowthEvent] {
        &self.growth_events
    }

    pub fn rewire_events(&self) -> &[RewireEvent] {
        &self.rewire_events
    }

    /// Seed of the fixed episode set used for the learning curve.
    pub fn curve_eval_seed(&self) -> u64 {
        self.config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x00C0_FFEE
    }

    /// Runs until `total_steps` environment steps have been taken.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.config.total_steps {
            self.step()?;
        }
        Ok(())
    }

    /// One environment step followed, once the buffer holds a full batch, by
    /// one training iteration.
    pub fn step(&mut self) -> Result<()> {
        let t = self.step + 1;
        let eps = self.config.epsilon.value(self.step);
        let q = self.online.forward(&self.obs)?;
        let actions = epsilon_greedy(&q, self.online.partition(), eps, &mut self.rng.explore);
        let out = self.world.step(&actions)?;
        self.buffer.push(&Transition {
            state: std::mem::take(&mut self.obs),
            actions,
            rewards: out.rewards.clone(),
            next_state: out.observation.clone(),
            done: out.done,
        })?;
        self.episode_return += out.rewards.iter().sum::<f64>();
        if out.done {
            self.window_returns.push(self.episode_return);
            self.episode_return = 0.0;
            let (world, obs) = NavWorld::reset(&self.spec, &mut self.rng.env);
            self.world = world;
            self.obs = obs;
        } else {
            self.obs = out.observation;
        }

        if self.buffer.len() >= self.config.batch_size {
            match self.config.topology {
                TopologyRule::Emergence(schedule) => self.emergence_iteration(t, schedule)?,
                TopologyRule::PruneAndGrow(schedule) => self.rewire_iteration(t, schedule)?,
            }
        }
        self.step = t;

        if self.config.log_every > 0 && t.is_multiple_of(self.config.log_every) {
            let mean = |v: &[f64]| {
                if v.is_empty() {
                    f64::NAN
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            let (sum, n) = self.window_loss;
            self.log.push(TrainingLogRow {
                step: t,
                mean_episode_reward: mean(&self.window_returns),
                loss: if n == 0 { f64::NAN } else { sum / n as f64 },
                epsilon: eps,
                nnz: self.online.nnz(),
                flops: forward_flops(&self.online),
            });
            self.window_returns.clear();
            self.window_loss = (0.0, 0);
        }
        if self.config.eval_every > 0 && t.is_multiple_of(self.config.eval_every) {
            let r = evaluate(
                &self.online,
                &self.spec,
                self.config.eval_episodes.max(1),
                0.0,
                self.curve_eval_seed(),
            )?;
            self.curve.push(LearningCurveRow {
                step: t,
                success_rate: r.success_rate,
                mean_t: r.mean_t,
                mean_return: r.mean_return,
            });
        }
        Ok(())
    }

    fn sample_gradients(&mut self, t: u64, size: usize) -> Result<(f64, Gradients)> {
        let batch = self.buffer.sample(size, &mut self.rng.replay)?;
        let (loss, grads) =
            td_loss_and_grads(&batch, &self.online, &self.target, self.config.gamma)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                step: t,
                detail: format!(
                    "loss = {loss}, nnz = {}, ledger = {}",
                    self.online.nnz(),
                    self.ledger.len()
                ),
            });
        }
        self.last_loss = loss;
        self.window_loss.0 += loss;
        self.window_loss.1 += 1;
        Ok((loss, grads))
    }

    /// Sample, then either grow cross-agent weights (on a scheduled event
    /// with budget left) or take an optimizer step; always track the target.
    fn emergence_iteration(&mut self, t: u64, schedule: GrowthSchedule) -> Result<()> {
        let growing = schedule.is_event(t) && self.ledger.remaining() > 0;
        let size = match self.config.growth_batch {
            Some(g) if growing => g.min(self.buffer.len()),
            _ => self.config.batch_size,
        };
        let (_, grads) = self.sample_gradients(t, size)?;
        if growing {
            let report = active_gradient_report(&grads, &self.online);
            let global = match schedule.scope {
                GrowthScope::PerLayer => Vec::new(),
                GrowthScope::Global => {
                    select_growth_global(&grads, &self.online, schedule.per_layer)
                }
            };
            let mut records = Vec::new();
            for l in 0..self.online.num_layers() {
                if self.ledger.remaining() == 0 {
                    break;
                }
                let picks = match schedule.scope {
                    GrowthScope::PerLayer => select_growth(
                        &grads,
                        self.online.layers()[l].mask(),
                        self.online.partition(),
                        l,
                        schedule.per_layer,
                    ),
                    GrowthScope::Global => global
                        .iter()
                        .filter(|(gl, _)| *gl == l)
                        .map(|&(_, c)| c)
                        .collect(),
                };
                let grown = grow(&mut self.online, l, &picks, &mut self.ledger, t)?;
                for r in &grown {
                    self.target.layer_mut(l).activate(r.row, r.col);
                }
                records.extend(grown);
            }
            let (predicted_active, predicted_grown) = self.split_prediction(&grads, &records);
            self.growth_events.push(GrowthEvent {
                step: t,
                records,
                gradients: report,
                predicted_active,
                predicted_grown,
                census: link_census(&self.online),
            });
        } else {
            apply_update(&mut self.online, &grads, &mut self.optimizer)?;
        }
        soft_update_target(&self.online, &mut self.target, self.config.beta);
        Ok(())
    }

    /// First-order loss change of a plain step `−α g`, split into the part
    /// carried by previously active weights and by the grown ones.
    fn split_prediction(&self, grads: &Gradients, grown: &[GrowthRecord]) -> (f64, f64) {
        let alpha = self.config.lr;
        let mut active = Gradients::zeros_like(&self.online);
        let mut fresh = Gradients::zeros_like(&self.online);
        for (l, layer) in self.online.layers().iter().enumerate() {
            let g = &grads.weights[l];
            for i in 0..layer.out_dim() {
                for j in 0..layer.in_dim() {
                    if layer.mask().get(i, j) {
                        active.weights[l].set(i, j, -alpha * g.get(i, j));
                    }
                }
            }
            for (d, g) in active.biases[l].iter_mut().zip(&grads.biases[l]) {
                *d = -alpha * g;
            }
        }
        for r in grown {
            active.weights[r.layer].set(r.row, r.col, 0.0);
            fresh.weights[r.layer].set(
                r.row,
                r.col,
                -alpha * grads.weights[r.layer].get(r.row, r.col),
            );
        }
        (
            predicted_loss_change(grads, &active).unwrap_or(f64::NAN),
            predicted_loss_change(grads, &fresh).unwrap_or(f64::NAN),
        )
    }

    /// Prune-and-grow: on an event, replace the weakest active weights of each
    /// layer with the strongest-gradient inactive ones; otherwise an optimizer step.
    fn rewire_iteration(&mut self, t: u64, schedule: RiglSchedule) -> Result<()> {
        let (_, grads) = self.sample_gradients(t, self.config.batch_size)?;
        let fraction = schedule.fraction_at(t);
        if schedule.is_event(t) && fraction > 0.0 {
            for l in 0..self.online.num_layers() {
                let layer = &self.online.layers()[l];
                let d = (fraction * layer.mask().nnz() as f64).ceil() as usize;
                let (dropped, grown) =
                    rewire_sets(layer.weights(), layer.mask(), &grads.weights[l], d);
                for &(i, j) in &dropped {
                    self.online.layer_mut(l).deactivate(i, j);
                    self.target.layer_mut(l).deactivate(i, j);
                    self.optimizer.reset_entry(l, i, j);
                }
                for &(i, j) in &grown {
                    self.online.layer_mut(l).activate(i, j);
                    self.target.layer_mut(l).activate(i, j);
                    self.optimizer.reset_entry(l, i, j);
                }
                self.rewire_events.push(RewireEvent {
                    step: t,
                    layer: l,
                    dropped,
                    grown,
                });
            }
        } else {
            apply_update(&mut self.online, &grads, &mut self.optimizer)?;
        }
        soft_update_target(&self.online, &mut self.target, self.config.beta);
        Ok(())
    }

    /// Off-diagonal active weights; equals the ledger length under emergence.
    pub fn cross_block_active(&self) -> usize {
        topology::cross_block_active(&self.online)
    }
}
