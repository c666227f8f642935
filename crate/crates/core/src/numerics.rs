//! Dense and masked linear algebra for the fixed-shape factored Q-network.
//!
//! Every weight matrix carries a bitmask. Forward passes use the raw weight
//! values (masked-off entries are held at exactly zero), while the backward
//! pass produces a gradient for *every* entry, masked or not. Those masked-off
//! gradients are what the growth rule ranks when deciding which cross-agent
//! connections to activate.

use rand::Rng;

use crate::error::{Error, Result};
use crate::topology::{self, AgentPartition, MaskInit};

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("matrix data", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("matrix row", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// One boolean per weight entry; `true` means the weight is active.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BitMask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::dim("mask bits", rows * cols, bits.len()));
        }
        Ok(Self { rows, cols, bits })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        self.bits[i * self.cols + j] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Number of active entries.
    pub fn nnz(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn zero_count(&self) -> usize {
        self.len() - self.nnz()
    }
}

/// A linear layer `y = W x + b` whose weight support is restricted by a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLinear {
    weights: Matrix,
    mask: BitMask,
    bias: Vec<f64>,
}

impl MaskedLinear {
    /// Builds a layer, zeroing any weight that sits under a cleared mask bit.
    pub fn new(mut weights: Matrix, mask: BitMask, bias: Vec<f64>) -> Result<Self> {
        if mask.rows() != weights.rows() {
            return Err(Error::dim("mask rows", weights.rows(), mask.rows()));
        }
        if mask.cols() != weights.cols() {
            return Err(Error::dim("mask cols", weights.cols(), mask.cols()));
        }
        if bias.len() != weights.rows() {
            return Err(Error::dim("bias", weights.rows(), bias.len()));
        }
        for (w, &on) in weights.as_mut_slice().iter_mut().zip(mask.bits()) {
            if !on {
                *w = 0.0;
            }
        }
        Ok(Self {
            weights,
            mask,
            bias,
        })
    }

    pub fn zeros(out_dim: usize, in_dim: usize, mask: BitMask) -> Result<Self> {
        Self::new(Matrix::zeros(out_dim, in_dim), mask, vec![0.0; out_dim])
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn mask(&self) -> &BitMask {
        &self.mask
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Sets an active weight. Writes to masked-off entries are ignored.
    pub fn set_weight(&mut self, i: usize, j: usize, value: f64) {
        if self.mask.get(i, j) {
            self.weights.set(i, j, value);
        }
    }

    /// Raw weight write that bypasses the mask. Only for numerical probes.
    pub(crate) fn weights_mut_unchecked(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    /// Turns on entry `(i, j)` with weight zero. Returns false if already on.
    pub fn activate(&mut self, i: usize, j: usize) -> bool {
        if self.mask.get(i, j) {
            return false;
        }
        self.mask.set(i, j, true);
        self.weights.set(i, j, 0.0);
        true
    }

    /// Turns off entry `(i, j)` and zeroes its weight.
    pub fn deactivate(&mut self, i: usize, j: usize) -> bool {
        if !self.mask.get(i, j) {
            return false;
        }
        self.mask.set(i, j, false);
        self.weights.set(i, j, 0.0);
        true
    }

    /// Replaces the mask, zeroing weights that become inactive.
    pub fn set_mask(&mut self, mask: &BitMask) -> Result<()> {
        if mask.rows() != self.out_dim() || mask.cols() != self.in_dim() {
            return Err(Error::dim("mask", self.mask.len(), mask.len()));
        }
        self.mask.clone_from(mask);
        for (w, &on) in self.weights.as_mut_slice().iter_mut().zip(mask.bits()) {
            if !on {
                *w = 0.0;
            }
        }
        Ok(())
    }

    /// `y = W x + b` without dimension checks.
    #[inline]
    fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = dot(self.weights.row(i), x) + self.bias[i];
        }
    }
}

/// `y[i] = Σ_j W[i][j] x[j] + b[i]`.
pub fn linear_forward(layer: &MaskedLinear, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != layer.in_dim() {
        return Err(Error::dim("linear_forward input", layer.in_dim(), x.len()));
    }
    let mut y = vec![0.0; layer.out_dim()];
    layer.forward_into(x, &mut y);
    Ok(y)
}

/// Dot product with four independent accumulators. The summation order is
/// fixed, so results are bitwise reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Activations recorded by a batched forward pass, consumed by [`QNetwork::backward`].
///
/// `acts[0]` is the input batch, `acts[l + 1]` the output of layer `l`
/// (post-rectifier for hidden layers, linear for the head). Each entry is
/// `batch × dim`, row-major.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Output rows, `batch × out_dim`.
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn output_row(&self, b: usize, out_dim: usize) -> &[f64] {
        &self.output()[b * out_dim..(b + 1) * out_dim]
    }
}

/// Dense weight and bias gradients for every layer of a [`QNetwork`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &QNetwork) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for m in &mut self.weights {
            m.as_mut_slice().iter_mut().for_each(|x| *x *= factor);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .all(|m| m.as_slice().iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    fn matches(&self, net: &QNetwork) -> bool {
        self.weights.len() == net.layers.len()
            && self.biases.len() == net.layers.len()
            && self
                .weights
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.rows() == l.out_dim() && g.cols() == l.in_dim())
            && self
                .biases
                .iter()
                .zip(&net.layers)
                .all(|(b, l)| b.len() == l.out_dim())
    }
}

/// Masked MLP: rectifier hidden layers followed by a linear head, whose rows
/// and columns are owned by agents according to an [`AgentPartition`].
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    layers: Vec<MaskedLinear>,
    partition: AgentPartition,
}

impl QNetwork {
    pub fn from_layers(partition: AgentPartition, layers: Vec<MaskedLinear>) -> Result<Self> {
        if layers.len() != partition.num_layers() {
            return Err(Error::dim(
                "layer count",
                partition.num_layers(),
                layers.len(),
            ));
        }
        for (l, layer) in layers.iter().enumerate() {
            let split = partition.layer(l);
            if layer.in_dim() != split.in_dim() {
                return Err(Error::dim("layer input", split.in_dim(), layer.in_dim()));
            }
            if layer.out_dim() != split.out_dim() {
                return Err(Error::dim("layer output", split.out_dim(), layer.out_dim()));
            }
        }
        Ok(Self { layers, partition })
    }

    /// Builds a network with the given mask pattern. Active weights are drawn
    /// uniformly in `±sqrt(6 / (fan_in + fan_out))`; for block-diagonal masks
    /// the fans are those of the owning agent's block. Biases start at zero.
    pub fn initialize<R: Rng + ?Sized>(
        partition: &AgentPartition,
        init: &MaskInit,
        rng: &mut R,
    ) -> Result<Self> {
        let masks = topology::initial_masks(partition, init, rng)?;
        let mut layers = Vec::with_capacity(masks.len());
        for (l, mask) in masks.into_iter().enumerate() {
            let split = partition.layer(l);
            let (out_dim, in_dim) = (split.out_dim(), split.in_dim());
            let mut w = Matrix::zeros(out_dim, in_dim);
            for i in 0..out_dim {
                for j in 0..in_dim {
                    if !mask.get(i, j) {
                        continue;
                    }
                    let limit = match init {
                        MaskInit::BlockDiagonal => {
                            let p = split.out_owner(i);
                            let fan = split.in_range(p).len() + split.out_range(p).len();
                            (6.0 / fan as f64).sqrt()
                        }
                        _ => (6.0 / (in_dim + out_dim) as f64).sqrt(),
                    };
                    w.set(i, j, rng.random_range(-limit..limit));
                }
            }
            layers.push(MaskedLinear::new(w, mask, vec![0.0; out_dim])?);
        }
        Self::from_layers(partition.clone(), layers)
    }

    pub fn layers(&self) -> &[MaskedLinear] {
        &self.layers
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut MaskedLinear {
        &mut self.layers[l]
    }

    pub fn partition(&self) -> &AgentPartition {
        &self.partition
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Active weights summed over layers.
    pub fn nnz(&self) -> usize {
        self.layers.iter().map(|l| l.mask().nnz()).sum()
    }

    pub fn total_weights(&self) -> usize {
        self.layers.iter().map(|l| l.mask().len()).sum()
    }

    /// Q-values for one joint observation.
    pub fn forward(&self, s: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_batch(s, 1)?;
        Ok(cache.acts.into_iter().last().unwrap_or_default())
    }

    /// Q-values for a `batch × in_dim` row-major block of joint observations.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<ForwardCache> {
        let in_dim = self.in_dim();
        if inputs.len() != batch * in_dim {
            return Err(Error::dim("forward input", batch * in_dim, inputs.len()));
        }
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(inputs.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let (din, dout) = (layer.in_dim(), layer.out_dim());
            let x = &acts[l];
            let mut y = vec![0.0; batch * dout];
            for b in 0..batch {
                let yb = &mut y[b * dout..(b + 1) * dout];
                layer.forward_into(&x[b * din..(b + 1) * din], yb);
                if l != last {
                    yb.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            acts.push(y);
        }
        Ok(ForwardCache { batch, acts })
    }

    /// Backpropagates `upstream` (`batch × out_dim`, the loss gradient with
    /// respect to the network output) through the activations in `cache`.
    ///
    /// Weight gradients are produced for every entry, including masked-off
    /// ones: entry `(i, j)` receives `Σ_b δ_i x_j` as if the weight existed
    /// at value zero. The rectifier subgradient at zero is taken as zero.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Gradients> {
        if cache.acts.len() != self.layers.len() + 1 {
            return Err(Error::dim(
                "cached activations",
                self.layers.len() + 1,
                cache.acts.len(),
            ));
        }
        let batch = cache.batch;
        for (l, layer) in self.layers.iter().enumerate() {
            if cache.acts[l].len() != batch * layer.in_dim() {
                return Err(Error::dim(
                    "cached activation",
                    batch * layer.in_dim(),
                    cache.acts[l].len(),
                ));
            }
        }
        if upstream.len() != batch * self.out_dim() {
            return Err(Error::dim(
                "upstream gradient",
                batch * self.out_dim(),
                upstream.len(),
            ));
        }

        let mut grads = Gradients::zeros_like(self);
        let mut delta = upstream.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let (din, dout) = (layer.in_dim(), layer.out_dim());
            let x = &cache.acts[l];
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            for b in 0..batch {
                let xb = &x[b * din..(b + 1) * din];
                let db = &delta[b * dout..(b + 1) * dout];
                for i in 0..dout {
                    if db[i] != 0.0 {
                        axpy(db[i], xb, gw.row_mut(i));
                    }
                    gb[i] += db[i];
                }
            }
            if l == 0 {
                break;
            }
            let mut prev = vec![0.0; batch * din];
            for b in 0..batch {
                let pb = &mut prev[b * din..(b + 1) * din];
                let db = &delta[b * dout..(b + 1) * dout];
                for (i, &d) in db.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, layer.weights.row(i), pb);
                    }
                }
                // x here is the previous layer's rectified output
                for (p, &a) in pb.iter_mut().zip(&x[b * din..(b + 1) * din]) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Ok(grads)
    }

    /// Re-zeroes every masked-off weight. Returns how many were nonzero.
    pub fn enforce_masks(&mut self) -> usize {
        let mut fixed = 0;
        for layer in &mut self.layers {
            let MaskedLinear { weights, mask, .. } = layer;
            for (w, &on) in weights.as_mut_slice().iter_mut().zip(mask.bits()) {
                if !on && *w != 0.0 {
                    *w = 0.0;
                    fixed += 1;
                }
            }
        }
        fixed
    }

    /// Copies `other`'s masks onto this network, zeroing newly inactive weights.
    pub fn copy_masks_from(&mut self, other: &QNetwork) -> Result<()> {
        if other.layers.len() != self.layers.len() {
            return Err(Error::dim(
                "layer count",
                self.layers.len(),
                other.layers.len(),
            ));
        }
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            mine.set_mask(theirs.mask())?;
        }
        Ok(())
    }

    pub fn masks_equal(&self, other: &QNetwork) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.mask() == b.mask())
    }
}

/// Update rule applied by [`apply_update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateRule {
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    /// Plain gradient step `w ← w − α g`.
    Sgd,
}

impl UpdateRule {
    pub fn adam() -> Self {
        UpdateRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment buffers. Moments of masked-off entries are held at zero,
/// so a weight that is grown later starts with fresh moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub rule: UpdateRule,
    pub lr: f64,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    mb: Vec<Vec<f64>>,
    vb: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(net: &QNetwork, rule: UpdateRule, lr: f64) -> Self {
        let zeros = Gradients::zeros_like(net);
        Self {
            rule,
            lr,
            step: 0,
            m: zeros.weights.clone(),
            v: zeros.weights,
            mb: zeros.biases.clone(),
            vb: zeros.biases,
        }
    }

    /// Clears the moments of one weight entry.
    pub fn reset_entry(&mut self, layer: usize, i: usize, j: usize) {
        self.m[layer].set(i, j, 0.0);
        self.v[layer].set(i, j, 0.0);
    }

    pub fn first_moment(&self, layer: usize) -> &Matrix {
        &self.m[layer]
    }
}

/// One optimizer step on active weights and all biases.
pub fn apply_update(net: &mut QNetwork, grads: &Gradients, opt: &mut OptimizerState) -> Result<()> {
    if !grads.matches(net) {
        return Err(Error::dim(
            "gradient layers",
            net.num_layers(),
            grads.weights.len(),
        ));
    }
    if opt.m.len() != net.num_layers()
        || !opt
            .m
            .iter()
            .zip(&grads.weights)
            .all(|(a, b)| a.same_shape(b))
    {
        return Err(Error::dim(
            "optimizer layers",
            net.num_layers(),
            opt.m.len(),
        ));
    }
    opt.step += 1;
    let lr = opt.lr;
    match opt.rule {
        UpdateRule::Sgd => {
            for (l, layer) in net.layers.iter_mut().enumerate() {
                let MaskedLinear {
                    weights,
                    mask,
                    bias,
                } = layer;
                for ((w, &on), g) in weights
                    .as_mut_slice()
                    .iter_mut()
                    .zip(mask.bits())
                    .zip(grads.weights[l].as_slice())
                {
                    if on {
                        *w -= lr * g;
                    }
                }
                for (b, g) in bias.iter_mut().zip(&grads.biases[l]) {
                    *b -= lr * g;
                }
            }
        }
        UpdateRule::Adam { beta1, beta2, eps } => {
            let t = opt.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let adam = |w: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            };
            for (l, layer) in net.layers.iter_mut().enumerate() {
                let MaskedLinear {
                    weights,
                    mask,
                    bias,
                } = layer;
                let m = opt.m[l].as_mut_slice();
                let v = opt.v[l].as_mut_slice();
                let g = grads.weights[l].as_slice();
                for (idx, (w, &on)) in weights
                    .as_mut_slice()
                    .iter_mut()
                    .zip(mask.bits())
                    .enumerate()
                {
                    if on {
                        adam(w, g[idx], &mut m[idx], &mut v[idx]);
                    }
                }
                let (mb, vb) = (&mut opt.mb[l], &mut opt.vb[l]);
                for (k, b) in bias.iter_mut().enumerate() {
                    adam(b, grads.biases[l][k], &mut mb[k], &mut vb[k]);
                }
            }
        }
    }
    Ok(())
}

/// Fixed, non-degenerate weights used to scalarize the network output for
/// gradient checks: `L(s) = Σ_k c_k Q_k(s)`.
pub fn probe_coefficients(n: usize) -> Vec<f64> {
    (0..n).map(|k| 0.5 + ((k as f64) * 0.7).sin()).collect()
}

/// Largest relative error between [`QNetwork::backward`] and central finite
/// differences of `Σ_k c_k Q_k(s)`, over every weight (active or not) and bias.
pub fn finite_diff_check(net: &QNetwork, s: &[f64], eps: f64) -> Result<f64> {
    finite_diff_check_with(net, s, eps, |net, cache, upstream| {
        net.backward(cache, upstream)
    })
}

/// As [`finite_diff_check`], with the analytic gradient supplied by `analytic`.
pub fn finite_diff_check_with<F>(net: &QNetwork, s: &[f64], eps: f64, analytic: F) -> Result<f64>
where
    F: Fn(&QNetwork, &ForwardCache, &[f64]) -> Result<Gradients>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let coeffs = probe_coefficients(net.out_dim());
    let cache = net.forward_batch(s, 1)?;
    let grads = analytic(net, &cache, &coeffs)?;

    let scalar = |n: &QNetwork| -> Result<f64> { Ok(dot(&n.forward(s)?, &coeffs)) };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);

    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for l in 0..net.num_layers() {
        let (rows, cols) = (net.layers[l].out_dim(), net.layers[l].in_dim());
        for i in 0..rows {
            for j in 0..cols {
                let orig = probe.layers[l].weights.get(i, j);
                probe.layers[l]
                    .weights_mut_unchecked()
                    .set(i, j, orig + eps);
                let up = scalar(&probe)?;
                probe.layers[l]
                    .weights_mut_unchecked()
                    .set(i, j, orig - eps);
                let down = scalar(&probe)?;
                probe.layers[l].weights_mut_unchecked().set(i, j, orig);
                let numeric = (up - down) / (2.0 * eps);
                worst = worst.max(rel(grads.weights[l].get(i, j), numeric));
            }
            let orig = probe.layers[l].bias[i];
            probe.layers[l].bias[i] = orig + eps;
            let up = scalar(&probe)?;
            probe.layers[l].bias[i] = orig - eps;
            let down = scalar(&probe)?;
            probe.layers[l].bias[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel(grads.biases[l][i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::AgentPartition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(rows: &[&[f64]], mask: Option<BitMask>, bias: Vec<f64>) -> MaskedLinear {
        let w = Matrix::from_rows(rows).unwrap();
        let m = mask.unwrap_or_else(|| BitMask::ones(w.rows(), w.cols()));
        MaskedLinear::new(w, m, bias).unwrap()
    }

    fn small_net(seed: u64, init: MaskInit) -> QNetwork {
        let p = AgentPartition::for_agents(&[3, 2], 3, 3, &[2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = QNetwork::initialize(&p, &init, &mut rng).unwrap();
        for l in 0..net.num_layers() {
            for b in net.layer_mut(l).bias_mut() {
                *b = rng.random_range(-0.3..0.3);
            }
        }
        net
    }

    #[test]
    fn identity_forward() {
        let l = layer(&[&[1.0, 0.0], &[0.0, 1.0]], None, vec![0.0, 0.0]);
        assert_eq!(linear_forward(&l, &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn fully_masked_layer_returns_bias() {
        let l = layer(
            &[&[4.0, 5.0], &[6.0, 7.0]],
            Some(BitMask::zeros(2, 2)),
            vec![0.5, 0.5],
        );
        assert_eq!(linear_forward(&l, &[10.0, -3.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn hand_matvec() {
        let l = layer(&[&[1.0, 2.0], &[0.0, 1.0]], None, vec![0.0, 0.0]);
        assert_eq!(linear_forward(&l, &[1.0, 1.0]).unwrap(), vec![3.0, 1.0]);
    }

    #[test]
    fn linear_forward_rejects_bad_length() {
        let l = layer(&[&[1.0, 2.0]], None, vec![0.0]);
        assert!(matches!(
            linear_forward(&l, &[1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn masked_layer_construction_zeroes_hidden_weights() {
        let mut m = BitMask::ones(1, 2);
        m.set(0, 1, false);
        let l = layer(&[&[1.0, 9.0]], Some(m), vec![0.0]);
        assert_eq!(l.weights().get(0, 1), 0.0);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = AgentPartition::for_agents(&[4, 4], 18, 3, &[5, 5]).unwrap();
        let layers = (0..p.num_layers())
            .map(|l| {
                let s = p.layer(l);
                MaskedLinear::zeros(
                    s.out_dim(),
                    s.in_dim(),
                    BitMask::ones(s.out_dim(), s.in_dim()),
                )
                .unwrap()
            })
            .collect();
        let net = QNetwork::from_layers(p, layers).unwrap();
        let q = net
            .forward(&[0.3, -0.2, 1.0, 2.0, 0.1, 0.0, -5.0, 3.0])
            .unwrap();
        assert_eq!(q, vec![0.0; 10]);
    }

    #[test]
    fn single_agent_scalar_oracle() {
        // 1 -> 1 -> 1 -> 1 -> 1 chain, computed by hand:
        // h1 = relu(2*0.5 + 0.1) = 1.1
        // h2 = relu(-1*1.1 + 0.0) = 0
        // h3 = relu(3*0 + 0.2) = 0.2
        // q = 0.5*0.2 - 0.3 = -0.2
        let p = AgentPartition::new(vec![
            (vec![1], vec![1]),
            (vec![1], vec![1]),
            (vec![1], vec![1]),
            (vec![1], vec![1]),
        ])
        .unwrap();
        let net = QNetwork::from_layers(
            p,
            vec![
                layer(&[&[2.0]], None, vec![0.1]),
                layer(&[&[-1.0]], None, vec![0.0]),
                layer(&[&[3.0]], None, vec![0.2]),
                layer(&[&[0.5]], None, vec![-0.3]),
            ],
        )
        .unwrap();
        let q = net.forward(&[0.5]).unwrap();
        assert!((q[0] - (-0.2)).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_bad_length() {
        let net = small_net(1, MaskInit::Dense);
        assert!(net.forward(&[0.0; 4]).is_err());
    }

    #[test]
    fn block_diagonal_outputs_are_independent() {
        let net = small_net(3, MaskInit::BlockDiagonal);
        let s = [0.2, -0.4, 0.9, 0.1, 0.7];
        let mut s2 = s;
        s2[3] += 1.5;
        s2[4] -= 0.8;
        let (a, b) = (net.forward(&s).unwrap(), net.forward(&s2).unwrap());
        assert_eq!(a[0..2], b[0..2]);
        assert_ne!(a[2..5], b[2..5]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = small_net(4, MaskInit::Dense);
        let cache = net.forward_batch(&[0.1, 0.2, 0.3, 0.4, 0.5], 1).unwrap();
        let g = net.backward(&cache, &[0.0; 5]).unwrap();
        assert_eq!(g, Gradients::zeros_like(&net));
    }

    #[test]
    fn masked_off_entry_gets_emergence_gradient() {
        let net = small_net(5, MaskInit::BlockDiagonal);
        let s = [0.5, -0.25, 0.75, 0.3, -0.6];
        let cache = net.forward_batch(&s, 1).unwrap();
        let upstream = probe_coefficients(5);
        let g = net.backward(&cache, &upstream).unwrap();
        // output layer entry (0, 5): row owned by agent 0, column by agent 1
        let last = net.num_layers() - 1;
        assert!(!net.layers()[last].mask().get(0, 5));
        let x = &cache.acts[last];
        assert_eq!(g.weights[last].get(0, 5), upstream[0] * x[5]);
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let net = small_net(6, MaskInit::Dense);
        let other = AgentPartition::for_agents(&[2], 2, 3, &[2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let small = QNetwork::initialize(&other, &MaskInit::Dense, &mut rng).unwrap();
        let cache = small.forward_batch(&[0.0, 0.0], 1).unwrap();
        assert!(net.backward(&cache, &[0.0; 5]).is_err());
        let cache = net.forward_batch(&[0.0; 5], 1).unwrap();
        assert!(net.backward(&cache, &[0.0; 4]).is_err());
    }

    #[test]
    fn finite_differences_agree_on_linear_net() {
        let p = AgentPartition::new(vec![(vec![3], vec![2])]).unwrap();
        let net = QNetwork::from_layers(
            p,
            vec![layer(
                &[&[0.3, -0.7, 1.1], &[0.2, 0.5, -0.4]],
                None,
                vec![0.1, -0.2],
            )],
        )
        .unwrap();
        let err = finite_diff_check(&net, &[0.4, -1.3, 0.8], 1e-5).unwrap();
        assert!(err <= 1e-8, "err = {err}");
    }

    #[test]
    fn finite_differences_agree_on_deep_net() {
        for seed in 0..5 {
            let net = small_net(seed, MaskInit::BlockDiagonal);
            let s = [0.3, -0.8, 0.5, 0.9, -0.1];
            let err = finite_diff_check(&net, &s, 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: err = {err}");
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let net = small_net(9, MaskInit::Dense);
        let s = [0.3, -0.8, 0.5, 0.9, -0.1];
        let err = finite_diff_check_with(&net, &s, 1e-5, |n, c, u| {
            let mut g = n.backward(c, u)?;
            let w = g.weights[1].get(0, 0);
            g.weights[1].set(0, 0, w * 1.5 + 0.1);
            Ok(g)
        })
        .unwrap();
        assert!(err > 1e-2, "err = {err}");
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut net = small_net(10, MaskInit::BlockDiagonal);
        let before = net.clone();
        let mut opt = OptimizerState::new(&net, UpdateRule::adam(), 1e-4);
        apply_update(&mut net, &Gradients::zeros_like(&before), &mut opt).unwrap();
        assert_eq!(net, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn masked_entries_survive_updates() {
        let mut net = small_net(11, MaskInit::BlockDiagonal);
        let mut grads = Gradients::zeros_like(&net);
        for m in &mut grads.weights {
            m.as_mut_slice().iter_mut().for_each(|g| *g = 3.0);
        }
        let mut opt = OptimizerState::new(&net, UpdateRule::adam(), 1e-2);
        for _ in 0..10 {
            apply_update(&mut net, &grads, &mut opt).unwrap();
        }
        for l in net.layers() {
            for (w, &on) in l.weights().as_slice().iter().zip(l.mask().bits()) {
                if !on {
                    assert_eq!(w.to_bits(), 0.0f64.to_bits());
                }
            }
        }
    }

    #[test]
    fn plain_step_on_single_weight() {
        let p = AgentPartition::new(vec![(vec![1], vec![1])]).unwrap();
        let mut net = QNetwork::from_layers(p, vec![layer(&[&[0.75]], None, vec![0.0])]).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.weights[0].set(0, 0, 2.0);
        let mut opt = OptimizerState::new(&net, UpdateRule::Sgd, 0.1);
        apply_update(&mut net, &g, &mut opt).unwrap();
        assert_eq!(net.layers()[0].weights().get(0, 0), 0.75 - 0.1 * 2.0);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        // With bias correction the first step is lr * g / (|g| + eps).
        let p = AgentPartition::new(vec![(vec![1], vec![1])]).unwrap();
        let mut net = QNetwork::from_layers(p, vec![layer(&[&[0.5]], None, vec![0.0])]).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.weights[0].set(0, 0, 4.0);
        let mut opt = OptimizerState::new(&net, UpdateRule::adam(), 1e-3);
        apply_update(&mut net, &g, &mut opt).unwrap();
        let expected = 0.5 - 1e-3 * 4.0 / (4.0 + 1e-8);
        assert!((net.layers()[0].weights().get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let net = small_net(12, MaskInit::Dense);
        let s = [0.11, 0.22, -0.33, 0.44, 0.55];
        let a: Vec<u64> = net
            .forward(&s)
            .unwrap()
            .iter()
            .map(|x| x.to_bits())
            .collect();
        let b: Vec<u64> = net
            .forward(&s)
            .unwrap()
            .iter()
            .map(|x| x.to_bits())
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn batched_forward_matches_single() {
        let net = small_net(13, MaskInit::Dense);
        let rows = [[0.1, 0.2, 0.3, 0.4, 0.5], [-0.5, 0.4, -0.3, 0.2, -0.1]];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let cache = net.forward_batch(&flat, 2).unwrap();
        for (b, r) in rows.iter().enumerate() {
            assert_eq!(cache.output_row(b, 5), net.forward(r).unwrap().as_slice());
        }
    }
}
