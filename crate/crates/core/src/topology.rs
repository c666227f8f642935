//! Agent ownership of network units, block-diagonal masks, and selection of
//! cross-agent entries for growth.

use std::collections::HashSet;
use std::ops::Range;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{BitMask, Gradients, QNetwork};

/// Per-agent split of one layer's inputs and outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSplit {
    in_sizes: Vec<usize>,
    out_sizes: Vec<usize>,
    in_owner: Vec<usize>,
    out_owner: Vec<usize>,
}

fn owners(sizes: &[usize]) -> Vec<usize> {
    sizes
        .iter()
        .enumerate()
        .flat_map(|(p, &n)| std::iter::repeat_n(p, n))
        .collect()
}

fn range_of(sizes: &[usize], p: usize) -> Range<usize> {
    let start: usize = sizes[..p].iter().sum();
    start..start + sizes[p]
}

impl LayerSplit {
    pub fn in_dim(&self) -> usize {
        self.in_owner.len()
    }

    pub fn out_dim(&self) -> usize {
        self.out_owner.len()
    }

    #[inline]
    pub fn in_owner(&self, j: usize) -> usize {
        self.in_owner[j]
    }

    #[inline]
    pub fn out_owner(&self, i: usize) -> usize {
        self.out_owner[i]
    }

    pub fn in_range(&self, agent: usize) -> Range<usize> {
        range_of(&self.in_sizes, agent)
    }

    pub fn out_range(&self, agent: usize) -> Range<usize> {
        range_of(&self.out_sizes, agent)
    }

    pub fn in_sizes(&self) -> &[usize] {
        &self.in_sizes
    }

    pub fn out_sizes(&self) -> &[usize] {
        &self.out_sizes
    }

    /// True when the entry connects units owned by different agents.
    #[inline]
    pub fn is_cross_block(&self, i: usize, j: usize) -> bool {
        self.out_owner[i] != self.in_owner[j]
    }
}

/// Assignment of every unit of every layer to one of `N` agents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentPartition {
    num_agents: usize,
    layers: Vec<LayerSplit>,
}

impl AgentPartition {
    /// Builds a partition from per-layer `(input sizes, output sizes)`, one
    /// size per agent. Consecutive layers must chain.
    pub fn new(layers: Vec<(Vec<usize>, Vec<usize>)>) -> Result<Self> {
        let Some((first, _)) = layers.first() else {
            return Err(Error::InvalidPartition("no layers".into()));
        };
        let n = first.len();
        if n == 0 {
            return Err(Error::InvalidPartition("zero agents".into()));
        }
        for (l, (ins, outs)) in layers.iter().enumerate() {
            if ins.len() != n || outs.len() != n {
                return Err(Error::InvalidPartition(format!(
                    "layer {l} splits into {}/{} blocks, expected {n}",
                    ins.len(),
                    outs.len()
                )));
            }
            if ins.iter().chain(outs).any(|&s| s == 0) {
                return Err(Error::InvalidPartition(format!(
                    "layer {l} has an empty block"
                )));
            }
            if let Some((next_in, _)) = layers.get(l + 1) {
                if next_in != outs {
                    return Err(Error::InvalidPartition(format!(
                        "layer {l} outputs {outs:?} do not feed layer {} inputs {next_in:?}",
                        l + 1
                    )));
                }
            }
        }
        let layers = layers
            .into_iter()
            .map(|(ins, outs)| LayerSplit {
                in_owner: owners(&ins),
                out_owner: owners(&outs),
                in_sizes: ins,
                out_sizes: outs,
            })
            .collect();
        Ok(Self {
            num_agents: n,
            layers,
        })
    }

    /// Observation slices in, `hidden_per_agent` units per agent in each of
    /// `hidden_layers` rectifier layers, one action head per agent out.
    pub fn for_agents(
        obs_dims: &[usize],
        hidden_per_agent: usize,
        hidden_layers: usize,
        action_counts: &[usize],
    ) -> Result<Self> {
        if obs_dims.len() != action_counts.len() {
            return Err(Error::InvalidPartition(format!(
                "{} observation slices but {} action heads",
                obs_dims.len(),
                action_counts.len()
            )));
        }
        let hidden = vec![hidden_per_agent; obs_dims.len()];
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut prev = obs_dims.to_vec();
        for _ in 0..hidden_layers {
            layers.push((prev, hidden.clone()));
            prev = hidden.clone();
        }
        layers.push((prev, action_counts.to_vec()));
        Self::new(layers)
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &LayerSplit {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[LayerSplit] {
        &self.layers
    }

    /// Joint-observation slice of `agent`.
    pub fn obs_range(&self, agent: usize) -> Range<usize> {
        self.layers[0].in_range(agent)
    }

    /// Output slice holding `agent`'s Q-values.
    pub fn action_range(&self, agent: usize) -> Range<usize> {
        self.layers[self.layers.len() - 1].out_range(agent)
    }

    fn check_layer(&self, l: usize) -> Result<&LayerSplit> {
        self.layers.get(l).ok_or_else(|| {
            Error::InvalidPartition(format!(
                "layer {l} out of range (have {})",
                self.layers.len()
            ))
        })
    }
}

/// Initial support of the network's weight matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskInit {
    /// Only within-agent entries are active.
    BlockDiagonal,
    /// Every entry is active.
    Dense,
    /// `nnz[l]` entries chosen uniformly at random in layer `l`.
    Random { nnz: Vec<usize> },
}

/// `mask[i][j] = 1` iff output `i` and input `j` belong to the same agent.
pub fn build_block_diagonal_mask(partition: &AgentPartition, layer: usize) -> Result<BitMask> {
    let split = partition.check_layer(layer)?;
    let (rows, cols) = (split.out_dim(), split.in_dim());
    let bits = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| split.out_owner(i) == split.in_owner(j)))
        .collect();
    BitMask::from_bits(rows, cols, bits)
}

pub(crate) fn initial_masks<R: Rng + ?Sized>(
    partition: &AgentPartition,
    init: &MaskInit,
    rng: &mut R,
) -> Result<Vec<BitMask>> {
    (0..partition.num_layers())
        .map(|l| {
            let split = partition.layer(l);
            let (rows, cols) = (split.out_dim(), split.in_dim());
            match init {
                MaskInit::BlockDiagonal => build_block_diagonal_mask(partition, l),
                MaskInit::Dense => Ok(BitMask::ones(rows, cols)),
                MaskInit::Random { nnz } => {
                    let want = *nnz.get(l).ok_or_else(|| {
                        Error::InvalidPartition(format!("no random density for layer {l}"))
                    })?;
                    if want > rows * cols {
                        return Err(Error::InvalidPartition(format!(
                            "layer {l}: {want} active entries requested of {}",
                            rows * cols
                        )));
                    }
                    let mut mask = BitMask::zeros(rows, cols);
                    for k in index::sample(rng, rows * cols, want) {
                        mask.set(k / cols, k % cols, true);
                    }
                    Ok(mask)
                }
            }
        })
        .collect()
}

/// Fraction of masked-off entries.
pub fn sparsity(mask: &BitMask) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.zero_count() as f64 / mask.len() as f64
}

/// Fraction of masked-off entries across all layers of a network.
pub fn network_sparsity(net: &QNetwork) -> f64 {
    let total = net.total_weights();
    if total == 0 {
        return 0.0;
    }
    (total - net.nnz()) as f64 / total as f64
}

/// Masked-off cross-block entries of layer `layer`, in row-major order.
pub fn eligible_entries(
    mask: &BitMask,
    partition: &AgentPartition,
    layer: usize,
) -> Vec<(usize, usize)> {
    let Ok(split) = partition.check_layer(layer) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for i in 0..mask.rows() {
        for j in 0..mask.cols() {
            if !mask.get(i, j) && split.is_cross_block(i, j) {
                out.push((i, j));
            }
        }
    }
    out
}

/// A candidate connection together with the gradient magnitude that ranked it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthCandidate {
    pub row: usize,
    pub col: usize,
    pub magnitude: f64,
}

/// Orders by descending magnitude, then ascending `(row, col)`.
pub(crate) fn rank_desc(a: &GrowthCandidate, b: &GrowthCandidate) -> std::cmp::Ordering {
    b.magnitude
        .total_cmp(&a.magnitude)
        .then(a.row.cmp(&b.row))
        .then(a.col.cmp(&b.col))
}

/// The `k` eligible entries with the largest `|gradient|`; ties go to the
/// lowest row, then lowest column.
pub fn select_growth(
    grads: &Gradients,
    mask: &BitMask,
    partition: &AgentPartition,
    layer: usize,
    k: usize,
) -> Vec<GrowthCandidate> {
    if k == 0 {
        return Vec::new();
    }
    let g = &grads.weights[layer];
    let mut cands: Vec<GrowthCandidate> = eligible_entries(mask, partition, layer)
        .into_iter()
        .map(|(row, col)| GrowthCandidate {
            row,
            col,
            magnitude: g.get(row, col).abs(),
        })
        .collect();
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, rank_desc);
        cands.truncate(k);
    }
    cands.sort_by(rank_desc);
    cands
}

/// The `k` eligible entries with the largest `|gradient|` across all layers
/// of `net`, as `(layer, candidate)`. Ties go to the lowest layer, then row,
/// then column.
pub fn select_growth_global(
    grads: &Gradients,
    net: &QNetwork,
    k: usize,
) -> Vec<(usize, GrowthCandidate)> {
    let mut all: Vec<(usize, GrowthCandidate)> = (0..net.num_layers())
        .flat_map(|l| {
            select_growth(grads, net.layers()[l].mask(), net.partition(), l, k)
                .into_iter()
                .map(move |c| (l, c))
        })
        .collect();
    all.sort_by(|a, b| {
        b.1.magnitude
            .total_cmp(&a.1.magnitude)
            .then(a.0.cmp(&b.0))
            .then(a.1.row.cmp(&b.1.row))
            .then(a.1.col.cmp(&b.1.col))
    });
    all.truncate(k);
    all
}

/// One emerged connection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthRecord {
    pub step: u64,
    pub layer: usize,
    pub row: usize,
    pub col: usize,
    pub magnitude: f64,
}

/// Budget and audit trail of emerged cross-agent connections.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthLedger {
    budget: usize,
    grown: Vec<GrowthRecord>,
    seen: HashSet<(usize, usize, usize)>,
}

impl GrowthLedger {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            grown: Vec::new(),
            seen: HashSet::new(),
        }
    }

    pub(crate) fn from_records(budget: usize, records: Vec<GrowthRecord>) -> Result<Self> {
        let mut ledger = Self::new(budget);
        for r in records {
            if ledger.grown.len() >= budget || !ledger.seen.insert((r.layer, r.row, r.col)) {
                return Err(Error::Checkpoint("inconsistent growth ledger".into()));
            }
            ledger.grown.push(r);
        }
        Ok(ledger)
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.grown.len()
    }

    pub fn len(&self) -> usize {
        self.grown.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grown.is_empty()
    }

    pub fn records(&self) -> &[GrowthRecord] {
        &self.grown
    }

    pub fn contains(&self, layer: usize, row: usize, col: usize) -> bool {
        self.seen.contains(&(layer, row, col))
    }
}

/// Activates `entries` in layer `layer` at weight zero and records them.
///
/// Entries beyond the remaining budget are dropped. Returns the records that
/// were actually grown. The network's output is unchanged by this call.
pub fn grow(
    net: &mut QNetwork,
    layer: usize,
    entries: &[GrowthCandidate],
    ledger: &mut GrowthLedger,
    step: u64,
) -> Result<Vec<GrowthRecord>> {
    let split = net.partition().check_layer(layer)?.clone();
    for e in entries {
        if e.row >= split.out_dim() || e.col >= split.in_dim() {
            return Err(Error::InvalidPartition(format!(
                "entry ({}, {}) outside layer {layer}",
                e.row, e.col
            )));
        }
        if !split.is_cross_block(e.row, e.col) || net.layers()[layer].mask().get(e.row, e.col) {
            return Err(Error::InvalidPartition(format!(
                "entry ({}, {}) of layer {layer} is not eligible for growth",
                e.row, e.col
            )));
        }
    }
    let take = entries.len().min(ledger.remaining());
    let mut added = Vec::with_capacity(take);
    for e in &entries[..take] {
        if !net.layer_mut(layer).activate(e.row, e.col) {
            continue;
        }
        let rec = GrowthRecord {
            step,
            layer,
            row: e.row,
            col: e.col,
            magnitude: e.magnitude,
        };
        ledger.seen.insert((layer, e.row, e.col));
        ledger.grown.push(rec);
        added.push(rec);
    }
    Ok(added)
}

/// `census[p][q]` = active weights whose output unit belongs to agent `p` and
/// input unit to agent `q`, summed over layers.
pub fn link_census(net: &QNetwork) -> Vec<Vec<usize>> {
    let partition = net.partition();
    let n = partition.num_agents();
    let mut census = vec![vec![0usize; n]; n];
    for (layer, split) in net.layers().iter().zip(partition.layers()) {
        let mask = layer.mask();
        for i in 0..mask.rows() {
            let p = split.out_owner(i);
            for j in 0..mask.cols() {
                if mask.get(i, j) {
                    census[p][split.in_owner(j)] += 1;
                }
            }
        }
    }
    census
}

/// Sum of the off-diagonal census entries.
pub fn cross_block_active(net: &QNetwork) -> usize {
    let c = link_census(net);
    c.iter()
        .enumerate()
        .map(|(p, row)| {
            row.iter()
                .enumerate()
                .filter(|&(q, _)| q != p)
                .map(|(_, v)| v)
                .sum::<usize>()
        })
        .sum()
}
