//! Factored Q-learning: one head of action values per agent, trained with a
//! per-head temporal-difference loss against a softly tracking target network.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, QNetwork};
use crate::parallel::{self, Execution};
use crate::topology::AgentPartition;

/// Rows processed per parallel work item. Fixed so that gradient sums are
/// bitwise identical whatever the thread count.
pub const GRADIENT_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Struct-of-arrays minibatch, laid out for batched forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub len: usize,
    pub states: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub done: Vec<bool>,
}

impl Batch {
    pub fn from_transitions(items: &[Transition]) -> Self {
        let mut b = Batch {
            len: items.len(),
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            done: Vec::new(),
        };
        for t in items {
            b.states.extend_from_slice(&t.state);
            b.actions.extend_from_slice(&t.actions);
            b.rewards.extend_from_slice(&t.rewards);
            b.next_states.extend_from_slice(&t.next_state);
            b.done.push(t.done);
        }
        b
    }
}

/// Ring buffer of transitions with flat storage. The oldest entry is
/// overwritten once `capacity` is reached.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    agents: usize,
    states: Vec<f64>,
    next_states: Vec<f64>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    done: Vec<bool>,
    cursor: usize,
    fill: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, agents: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            state_dim,
            agents,
            states: Vec::new(),
            next_states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            done: Vec::new(),
            cursor: 0,
            fill: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        if t.state.len() != self.state_dim || t.next_state.len() != self.state_dim {
            return Err(Error::dim(
                "transition state",
                self.state_dim,
                t.state.len(),
            ));
        }
        if t.actions.len() != self.agents || t.rewards.len() != self.agents {
            return Err(Error::dim(
                "transition agents",
                self.agents,
                t.actions.len(),
            ));
        }
        let (sd, n) = (self.state_dim, self.agents);
        if self.fill < self.capacity {
            self.states.extend_from_slice(&t.state);
            self.next_states.extend_from_slice(&t.next_state);
            self.actions.extend_from_slice(&t.actions);
            self.rewards.extend_from_slice(&t.rewards);
            self.done.push(t.done);
            self.fill += 1;
        } else {
            let c = self.cursor;
            self.states[c * sd..(c + 1) * sd].copy_from_slice(&t.state);
            self.next_states[c * sd..(c + 1) * sd].copy_from_slice(&t.next_state);
            self.actions[c * n..(c + 1) * n].copy_from_slice(&t.actions);
            self.rewards[c * n..(c + 1) * n].copy_from_slice(&t.rewards);
            self.done[c] = t.done;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Reconstructs stored transition `idx` (0 = oldest still held).
    pub fn get(&self, idx: usize) -> Option<Transition> {
        if idx >= self.fill {
            return None;
        }
        let slot = if self.fill < self.capacity {
            idx
        } else {
            (self.cursor + idx) % self.capacity
        };
        let (sd, n) = (self.state_dim, self.agents);
        Some(Transition {
            state: self.states[slot * sd..(slot + 1) * sd].to_vec(),
            actions: self.actions[slot * n..(slot + 1) * n].to_vec(),
            rewards: self.rewards[slot * n..(slot + 1) * n].to_vec(),
            next_state: self.next_states[slot * sd..(slot + 1) * sd].to_vec(),
            done: self.done[slot],
        })
    }

    /// Draws `batch` storage slots uniformly with replacement.
    pub fn sample_slots<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.fill < batch || batch == 0 {
            return Err(Error::InsufficientReplay {
                fill: self.fill,
                batch,
            });
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.fill)).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Batch> {
        let slots = self.sample_slots(batch, rng)?;
        let (sd, n) = (self.state_dim, self.agents);
        let mut b = Batch {
            len: batch,
            states: Vec::with_capacity(batch * sd),
            actions: Vec::with_capacity(batch * n),
            rewards: Vec::with_capacity(batch * n),
            next_states: Vec::with_capacity(batch * sd),
            done: Vec::with_capacity(batch),
        };
        for s in slots {
            b.states
                .extend_from_slice(&self.states[s * sd..(s + 1) * sd]);
            b.next_states
                .extend_from_slice(&self.next_states[s * sd..(s + 1) * sd]);
            b.actions
                .extend_from_slice(&self.actions[s * n..(s + 1) * n]);
            b.rewards
                .extend_from_slice(&self.rewards[s * n..(s + 1) * n]);
            b.done.push(self.done[s]);
        }
        Ok(b)
    }
}

/// Linear decay of the exploration rate, then constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.1,
            horizon: 50_000,
        }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, t: u64) -> f64 {
        if self.horizon == 0 || t >= self.horizon {
            return self.end;
        }
        let frac = t as f64 / self.horizon as f64;
        let e = self.start + (self.end - self.start) * frac;
        e.clamp(self.start.min(self.end), self.start.max(self.end))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Per-agent argmax over each head of `q`.
pub fn greedy_actions(q: &[f64], partition: &AgentPartition) -> Vec<usize> {
    (0..partition.num_agents())
        .map(|i| argmax(&q[partition.action_range(i)]))
        .collect()
}

/// ε-greedy over each agent's head independently.
pub fn select_actions<R: Rng + ?Sized>(
    net: &QNetwork,
    s: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let q = net.forward(s)?;
    Ok(epsilon_greedy(&q, net.partition(), epsilon, rng))
}

pub fn epsilon_greedy<R: Rng + ?Sized>(
    q: &[f64],
    partition: &AgentPartition,
    epsilon: f64,
    rng: &mut R,
) -> Vec<usize> {
    (0..partition.num_agents())
        .map(|i| {
            let head = &q[partition.action_range(i)];
            if epsilon > 0.0 && rng.random::<f64>() < epsilon {
                rng.random_range(0..head.len())
            } else {
                argmax(head)
            }
        })
        .collect()
}

/// Mean squared TD residual over batch rows and agent heads, with its
/// gradient with respect to the online network. Target values are constants.
pub fn td_loss_and_grads(
    batch: &Batch,
    net: &QNetwork,
    target: &QNetwork,
    gamma: f64,
) -> Result<(f64, Gradients)> {
    td_loss_and_grads_with(batch, net, target, gamma, Execution::default())
}

pub fn td_loss_and_grads_with(
    batch: &Batch,
    net: &QNetwork,
    target: &QNetwork,
    gamma: f64,
    exec: Execution,
) -> Result<(f64, Gradients)> {
    if batch.len == 0 {
        return Err(Error::InsufficientReplay { fill: 0, batch: 0 });
    }
    let partition = net.partition();
    let n = partition.num_agents();
    let (sd, od) = (net.in_dim(), net.out_dim());
    if batch.states.len() != batch.len * sd || batch.next_states.len() != batch.len * sd {
        return Err(Error::dim(
            "batch states",
            batch.len * sd,
            batch.states.len(),
        ));
    }
    if batch.actions.len() != batch.len * n || batch.rewards.len() != batch.len * n {
        return Err(Error::dim(
            "batch actions",
            batch.len * n,
            batch.actions.len(),
        ));
    }
    let heads: Vec<_> = (0..n).map(|i| partition.action_range(i)).collect();
    let scale = 1.0 / (batch.len * n) as f64;

    let parts = parallel::map_chunks(
        exec,
        batch.len,
        GRADIENT_CHUNK,
        |rows| -> Result<(f64, Gradients)> {
            let m = rows.len();
            let online = net.forward_batch(&batch.states[rows.start * sd..rows.end * sd], m)?;
            let next =
                target.forward_batch(&batch.next_states[rows.start * sd..rows.end * sd], m)?;
            let mut upstream = vec![0.0; m * od];
            let mut sq = 0.0;
            for (local, b) in rows.enumerate() {
                let q = online.output_row(local, od);
                let qn = next.output_row(local, od);
                let cont = if batch.done[b] { 0.0 } else { 1.0 };
                for (i, head) in heads.iter().enumerate() {
                    let a = batch.actions[b * n + i];
                    if a >= head.len() {
                        return Err(Error::dim("action index bound", head.len(), a));
                    }
                    let max_next = qn[head.clone()]
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max);
                    let y = batch.rewards[b * n + i] + gamma * cont * max_next;
                    let delta = q[head.start + a] - y;
                    sq += delta * delta;
                    upstream[local * od + head.start + a] = 2.0 * delta * scale;
                }
            }
            let grads = net.backward(&online, &upstream)?;
            Ok((sq, grads))
        },
    );

    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(net);
    for part in parts {
        let (sq, g) = part?;
        total += sq;
        grads.add_assign(&g);
    }
    Ok((total * scale, grads))
}

/// `θ̄ ← βθ + (1 − β)θ̄` on active weights and all biases.
pub fn soft_update_target(net: &QNetwork, target: &mut QNetwork, beta: f64) {
    debug_assert!(net.masks_equal(target), "online and target masks diverged");
    for l in 0..net.num_layers() {
        let src = &net.layers()[l];
        let dst = target.layer_mut(l);
        let mask = src.mask().clone();
        for i in 0..src.out_dim() {
            for j in 0..src.in_dim() {
                if mask.get(i, j) {
                    let v = beta * src.weights().get(i, j) + (1.0 - beta) * dst.weights().get(i, j);
                    dst.set_weight(i, j, v);
                }
            }
        }
        for (t, &w) in dst.bias_mut().iter_mut().zip(src.bias()) {
            *t = beta * w + (1.0 - beta) * *t;
        }
    }
}
