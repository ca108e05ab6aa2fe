//! Desk-scale MoE layer with dispatch → expert → combine, in one pass or in
//! contiguous token chunks with chunk-level recomputation in backward.
//!
//! Each expert is a gated unit `down(φ(x·W_gate) ⊙ (x·W_up))` with φ = SiLU by
//! default. A token routed to experts `e_1..e_k` with scores `w_1..w_k` produces
//! `Y = Σ_j w_j · expert_{e_j}(x)`, accumulated in slot order.
//!
//! Per-token arithmetic never depends on which other tokens share the batch:
//! expert outputs are row-wise products summed in a fixed order, and the combine
//! and input-gradient reductions run over a token's own slots. Chunked execution
//! is therefore bit-identical to the single pass, and weight gradients, which
//! accumulate per expert in ascending token order, are too.

mod matrix;
mod meter;

pub mod check;

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

pub use matrix::{Matrix, Scalar};
pub use meter::{ActivationMeter, MemClass, MeterEvent, MeterOp};

use crate::error::{Error, Result};
use matrix::{outer_acc, vec_mat, vec_mat_t};

/// Gate nonlinearity φ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Silu,
    /// φ ≡ 1: the expert degenerates to `down(x·W_up)`.
    Ungated,
}

impl Activation {
    fn value<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Silu => z / (T::one() + (-z).exp()),
            Activation::Ungated => T::one(),
        }
    }

    fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Silu => {
                let sig = T::one() / (T::one() + (-z).exp());
                sig * (T::one() + z * (T::one() - sig))
            }
            Activation::Ungated => T::zero(),
        }
    }
}

/// Local tokens and their top-k routing.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch<T> {
    data: Matrix<T>,
    top_k: usize,
    experts: Vec<usize>,
    scores: Vec<T>,
}

impl<T: Scalar> TokenBatch<T> {
    /// `experts` and `scores` are row-major `[token][slot]` with `top_k` slots.
    pub fn new(
        data: Matrix<T>,
        top_k: usize,
        experts: Vec<usize>,
        scores: Vec<T>,
        num_experts: usize,
    ) -> Result<Self> {
        let slots = data.rows() * top_k;
        if experts.len() != slots {
            return Err(Error::Shape { what: "expert assignments", expected: slots, found: experts.len() });
        }
        if scores.len() != slots {
            return Err(Error::Shape { what: "routing scores", expected: slots, found: scores.len() });
        }
        if let Some(&bad) = experts.iter().find(|&&e| e >= num_experts) {
            return Err(Error::Shape { what: "expert id", expected: num_experts, found: bad });
        }
        if !scores.iter().all(|s| s.is_finite()) {
            return Err(Error::NonFinite("routing scores"));
        }
        Ok(Self { data, top_k, experts, scores })
    }

    pub fn tokens(&self) -> usize {
        self.data.rows()
    }

    pub fn hidden(&self) -> usize {
        self.data.cols()
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn data(&self) -> &Matrix<T> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Matrix<T> {
        &mut self.data
    }

    /// `(expert, score)` of every slot of token `i`.
    pub fn assignments(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = i * self.top_k..(i + 1) * self.top_k;
        self.experts[r.clone()].iter().copied().zip(self.scores[r].iter().copied())
    }

    /// Tokens `range` with their routing.
    pub fn slice(&self, range: Range<usize>) -> Self {
        let slots = range.start * self.top_k..range.end * self.top_k;
        Self {
            data: self.data.slice_rows(range),
            top_k: self.top_k,
            experts: self.experts[slots.clone()].to_vec(),
            scores: self.scores[slots].to_vec(),
        }
    }

    /// Copies per expert, `s'` of each expert.
    pub fn expert_load(&self, num_experts: usize) -> Vec<usize> {
        let mut load = vec![0; num_experts];
        for &e in &self.experts {
            load[e] += 1;
        }
        load
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert<T> {
    /// `h × g_e`
    pub up: Matrix<T>,
    /// `h × g_e`
    pub gate: Matrix<T>,
    /// `g_e × h`
    pub down: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights<T> {
    experts: Vec<Expert<T>>,
    hidden: usize,
    intermediate: usize,
    activation: Activation,
}

impl<T: Scalar> ExpertWeights<T> {
    pub fn new(experts: Vec<Expert<T>>, activation: Activation) -> Result<Self> {
        let (h, g) = experts.first().map_or((0, 0), |e| (e.up.rows(), e.up.cols()));
        for e in &experts {
            for (what, m, rows, cols) in
                [("up", &e.up, h, g), ("gate", &e.gate, h, g), ("down", &e.down, g, h)]
            {
                if m.rows() != rows {
                    return Err(Error::Shape { what, expected: rows, found: m.rows() });
                }
                if m.cols() != cols {
                    return Err(Error::Shape { what, expected: cols, found: m.cols() });
                }
                if !m.is_finite() {
                    return Err(Error::NonFinite("expert weights"));
                }
            }
        }
        Ok(Self { experts, hidden: h, intermediate: g, activation })
    }

    /// Experts computing the identity: `W_up = W_down = I`, φ ≡ 1.
    pub fn identity(hidden: usize, num_experts: usize) -> Self {
        let e = Expert {
            up: Matrix::identity(hidden),
            gate: Matrix::zeros(hidden, hidden),
            down: Matrix::identity(hidden),
        };
        Self { experts: vec![e; num_experts], hidden, intermediate: hidden, activation: Activation::Ungated }
    }

    pub fn zeros_like(&self) -> Self {
        let (h, g) = (self.hidden, self.intermediate);
        let e = Expert { up: Matrix::zeros(h, g), gate: Matrix::zeros(h, g), down: Matrix::zeros(g, h) };
        Self { experts: vec![e; self.experts.len()], ..self.clone() }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn intermediate(&self) -> usize {
        self.intermediate
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn experts(&self) -> &[Expert<T>] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [Expert<T>] {
        &mut self.experts
    }

    /// All weight matrices in a fixed order: per expert `up, gate, down`.
    pub fn tensors(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.experts.iter().flat_map(|e| [&e.up, &e.gate, &e.down])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix<T>> {
        self.experts.iter_mut().flat_map(|e| [&mut e.up, &mut e.gate, &mut e.down])
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.add_assign(b);
        }
    }
}

/// Contiguous token ranges covering `[0, tokens)` exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPartition {
    bounds: Vec<usize>,
}

impl ChunkPartition {
    /// `chunks` ranges whose sizes differ by at most one; the first
    /// `tokens mod chunks` get the extra token. Ranges may be empty when
    /// `chunks > tokens`.
    pub fn uniform(tokens: usize, chunks: usize) -> Result<Self> {
        if chunks == 0 {
            return Err(Error::Shape { what: "chunk count", expected: 1, found: 0 });
        }
        let (q, r) = (tokens / chunks, tokens % chunks);
        let mut bounds = Vec::with_capacity(chunks + 1);
        bounds.push(0);
        for i in 0..chunks {
            bounds.push(bounds[i] + q + usize::from(i < r));
        }
        Ok(Self { bounds })
    }

    /// From explicit boundaries `0 = b_0 ≤ b_1 ≤ … ≤ b_c = tokens`.
    pub fn from_bounds(bounds: Vec<usize>, tokens: usize) -> Result<Self> {
        let ok = bounds.len() >= 2
            && bounds[0] == 0
            && *bounds.last().unwrap() == tokens
            && bounds.windows(2).all(|w| w[0] <= w[1]);
        if !ok {
            return Err(Error::Shape { what: "chunk boundaries", expected: tokens, found: *bounds.last().unwrap_or(&0) });
        }
        Ok(Self { bounds })
    }

    pub fn chunks(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn tokens(&self) -> usize {
        *self.bounds.last().unwrap()
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.bounds.windows(2).map(|w| w[0]..w[1])
    }
}

/// Token copies grouped by expert, tokens ascending within each expert.
#[derive(Debug, Clone, PartialEq)]
struct Dispatch {
    /// `(expert, token, slot)` in dispatch order.
    order: Vec<(usize, usize, usize)>,
    /// Position in `order` of `[token][slot]`.
    position: Vec<usize>,
}

impl Dispatch {
    fn build<T: Scalar>(batch: &TokenBatch<T>, num_experts: usize) -> Self {
        let mut buckets: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_experts];
        for i in 0..batch.tokens() {
            for (slot, (e, _)) in batch.assignments(i).enumerate() {
                buckets[e].push((i, slot));
            }
        }
        let mut order = Vec::with_capacity(batch.tokens() * batch.top_k());
        let mut position = vec![0; batch.tokens() * batch.top_k()];
        for (e, bucket) in buckets.into_iter().enumerate() {
            for (i, slot) in bucket {
                position[i * batch.top_k() + slot] = order.len();
                order.push((e, i, slot));
            }
        }
        Self { order, position }
    }

    fn copies(&self) -> usize {
        self.order.len()
    }
}

/// Activations kept by a saving forward pass for backward: the dispatched
/// inputs, both up-projection branches and the expert outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedActivations<T> {
    dispatch: Dispatch,
    inputs: Matrix<T>,
    up: Matrix<T>,
    gate: Matrix<T>,
    outputs: Matrix<T>,
}

impl<T: Scalar> SavedActivations<T> {
    /// Routed copies, `s'` of this pass.
    pub fn copies(&self) -> usize {
        self.dispatch.copies()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaveMode {
    /// Keep expert activations for [`backward`].
    Keep,
    /// Release them at the end of the pass; backward must recompute.
    Discard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub y: Matrix<T>,
    pub saved: Option<SavedActivations<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub x: Matrix<T>,
    pub w: ExpertWeights<T>,
}

const DISPATCHED: &str = "dispatched";
const INTERMEDIATE: &str = "expert_intermediate";
const EXPERT_OUT: &str = "expert_output";
const G_EXPERT_OUT: &str = "grad_expert_output";
const G_INTERMEDIATE: &str = "grad_expert_intermediate";
const G_DISPATCHED: &str = "grad_dispatched";

fn check_shapes<T: Scalar>(batch: &TokenBatch<T>, w: &ExpertWeights<T>) -> Result<()> {
    if batch.hidden() != w.hidden() {
        return Err(Error::Shape { what: "hidden size", expected: w.hidden(), found: batch.hidden() });
    }
    if let Some(bad) = batch.experts.iter().copied().find(|&e| e >= w.num_experts()) {
        return Err(Error::Shape { what: "expert id", expected: w.num_experts(), found: bad });
    }
    Ok(())
}

fn charge_segment(meter: &mut ActivationMeter, copies: usize, h: usize, g: usize) {
    meter.alloc(DISPATCHED, MemClass::TokenDependent, copies * h);
    meter.alloc(INTERMEDIATE, MemClass::TokenDependent, 2 * copies * g);
    meter.alloc(EXPERT_OUT, MemClass::TokenDependent, copies * h);
}

fn release_segment(meter: &mut ActivationMeter, copies: usize, h: usize, g: usize) {
    meter.free(DISPATCHED, MemClass::TokenDependent, copies * h);
    meter.free(INTERMEDIATE, MemClass::TokenDependent, 2 * copies * g);
    meter.free(EXPERT_OUT, MemClass::TokenDependent, copies * h);
}

/// Dispatch, run experts, and combine into `y_rows` (rows of the batch).
fn moe_segment<T: Scalar>(
    batch: &TokenBatch<T>,
    w: &ExpertWeights<T>,
    y_rows: &mut [T],
    meter: &mut ActivationMeter,
) -> SavedActivations<T> {
    let (h, g) = (w.hidden(), w.intermediate());
    let dispatch = Dispatch::build(batch, w.num_experts());
    let n = dispatch.copies();
    charge_segment(meter, n, h, g);

    let mut inputs = Matrix::zeros(n, h);
    let mut up = Matrix::zeros(n, g);
    let mut gate = Matrix::zeros(n, g);
    let mut outputs = Matrix::zeros(n, h);
    let mut act = vec![T::zero(); g];
    for (c, &(e, i, _)) in dispatch.order.iter().enumerate() {
        let ex = &w.experts[e];
        inputs.row_mut(c).copy_from_slice(batch.data.row(i));
        vec_mat(inputs.row(c), &ex.up, up.row_mut(c));
        vec_mat(inputs.row(c), &ex.gate, gate.row_mut(c));
        for j in 0..g {
            act[j] = w.activation.value(gate.get(c, j)) * up.get(c, j);
        }
        vec_mat(&act, &ex.down, outputs.row_mut(c));
    }

    for i in 0..batch.tokens() {
        let y = &mut y_rows[i * h..(i + 1) * h];
        y.fill(T::zero());
        for (slot, (_, score)) in batch.assignments(i).enumerate() {
            let c = dispatch.position[i * batch.top_k + slot];
            for (yv, &o) in y.iter_mut().zip(outputs.row(c)) {
                *yv += score * o;
            }
        }
    }
    SavedActivations { dispatch, inputs, up, gate, outputs }
}

/// Backprop one segment; accumulates into `w_grad`, writes `x_rows`.
fn backward_segment<T: Scalar>(
    batch: &TokenBatch<T>,
    w: &ExpertWeights<T>,
    y_grad_rows: &[T],
    saved: &SavedActivations<T>,
    x_rows: &mut [T],
    w_grad: &mut ExpertWeights<T>,
    meter: &mut ActivationMeter,
) {
    let (h, g) = (w.hidden(), w.intermediate());
    let n = saved.copies();
    meter.alloc(G_EXPERT_OUT, MemClass::TokenDependent, n * h);
    meter.alloc(G_INTERMEDIATE, MemClass::TokenDependent, 2 * n * g);
    meter.alloc(G_DISPATCHED, MemClass::TokenDependent, n * h);

    let mut d_out = vec![T::zero(); h];
    let mut act = vec![T::zero(); g];
    let mut d_act = vec![T::zero(); g];
    let mut d_up = vec![T::zero(); g];
    let mut d_gate = vec![T::zero(); g];
    let mut tmp = vec![T::zero(); h];
    let mut dx = Matrix::zeros(n, h);
    for (c, &(e, i, slot)) in saved.dispatch.order.iter().enumerate() {
        let ex = &w.experts[e];
        let score = batch.scores[i * batch.top_k + slot];
        for (d, &yg) in d_out.iter_mut().zip(&y_grad_rows[i * h..(i + 1) * h]) {
            *d = score * yg;
        }
        let (u, z) = (saved.up.row(c), saved.gate.row(c));
        for j in 0..g {
            act[j] = w.activation.value(z[j]) * u[j];
        }
        vec_mat_t(&d_out, &ex.down, &mut d_act);
        for j in 0..g {
            d_up[j] = d_act[j] * w.activation.value(z[j]);
            d_gate[j] = d_act[j] * u[j] * w.activation.derivative(z[j]);
        }
        let gx = dx.row_mut(c);
        vec_mat_t(&d_up, &ex.up, gx);
        vec_mat_t(&d_gate, &ex.gate, &mut tmp);
        for (a, &b) in gx.iter_mut().zip(&tmp) {
            *a += b;
        }
        let x = saved.inputs.row(c);
        let gw = &mut w_grad.experts[e];
        outer_acc(&act, &d_out, &mut gw.down);
        outer_acc(x, &d_up, &mut gw.up);
        outer_acc(x, &d_gate, &mut gw.gate);
    }
    for i in 0..batch.tokens() {
        let xg = &mut x_rows[i * h..(i + 1) * h];
        xg.fill(T::zero());
        for slot in 0..batch.top_k {
            let c = saved.dispatch.position[i * batch.top_k + slot];
            for (a, &b) in xg.iter_mut().zip(dx.row(c)) {
                *a += b;
            }
        }
    }

    meter.free(G_EXPERT_OUT, MemClass::TokenDependent, n * h);
    meter.free(G_INTERMEDIATE, MemClass::TokenDependent, 2 * n * g);
    meter.free(G_DISPATCHED, MemClass::TokenDependent, n * h);
    release_segment(meter, n, h, g);
}

/// `Y = combine(expert(dispatch(X)))` over the whole batch.
pub fn forward<T: Scalar>(
    x: &TokenBatch<T>,
    w: &ExpertWeights<T>,
    meter: &mut ActivationMeter,
    mode: SaveMode,
) -> Result<ForwardOutput<T>> {
    check_shapes(x, w)?;
    let (s, h) = (x.tokens(), w.hidden());
    meter.alloc("input", MemClass::Resident, s * h);
    meter.alloc("output", MemClass::Resident, s * h);
    let mut y = Matrix::zeros(s, h);
    let saved = moe_segment(x, w, y.as_mut_slice(), meter);
    if !y.is_finite() {
        return Err(Error::NonFinite("moe forward output"));
    }
    let saved = match mode {
        SaveMode::Keep => Some(saved),
        SaveMode::Discard => {
            release_segment(meter, saved.copies(), h, w.intermediate());
            None
        }
    };
    Ok(ForwardOutput { y, saved })
}

/// Exact reverse-mode gradients of [`forward`] given `dL/dY`.
///
/// `meter` must be the one the saving forward charged; the saved buffers are
/// released from it.
pub fn backward<T: Scalar>(
    y_grad: &Matrix<T>,
    x: &TokenBatch<T>,
    w: &ExpertWeights<T>,
    saved: Option<&SavedActivations<T>>,
    meter: &mut ActivationMeter,
) -> Result<Gradients<T>> {
    check_shapes(x, w)?;
    let saved = saved.ok_or(Error::MissingSavedActivations)?;
    let (s, h, g) = (x.tokens(), w.hidden(), w.intermediate());
    if y_grad.rows() != s || y_grad.cols() != h {
        return Err(Error::Shape { what: "output gradient rows", expected: s, found: y_grad.rows() });
    }
    let held = (2 * saved.copies() * h + 2 * saved.copies() * g) as u64 * meter.element_bytes();
    if meter.current_bytes() < held || saved.copies() != s * x.top_k() {
        return Err(Error::MissingSavedActivations);
    }
    meter.alloc("grad_output", MemClass::Resident, s * h);
    meter.alloc("grad_input", MemClass::Resident, s * h);
    let mut x_grad = Matrix::zeros(s, h);
    let mut w_grad = w.zeros_like();
    backward_segment(x, w, y_grad.as_slice(), saved, x_grad.as_mut_slice(), &mut w_grad, meter);
    Ok(Gradients { x: x_grad, w: w_grad })
}

fn check_partition<T: Scalar>(x: &TokenBatch<T>, partition: &ChunkPartition) -> Result<()> {
    if partition.tokens() != x.tokens() {
        return Err(Error::Shape { what: "chunk partition", expected: x.tokens(), found: partition.tokens() });
    }
    Ok(())
}

/// `Y = concat(F(X_1), …, F(X_c))`, holding one chunk's expert activations at a time.
pub fn forward_chunked<T: Scalar>(
    x: &TokenBatch<T>,
    w: &ExpertWeights<T>,
    partition: &ChunkPartition,
    meter: &mut ActivationMeter,
) -> Result<Matrix<T>> {
    check_shapes(x, w)?;
    check_partition(x, partition)?;
    let (s, h, g) = (x.tokens(), w.hidden(), w.intermediate());
    meter.alloc("input", MemClass::Resident, s * h);
    meter.alloc("output", MemClass::Resident, s * h);
    let mut y = Matrix::zeros(s, h);
    for r in partition.ranges() {
        let chunk = x.slice(r.clone());
        let rows = &mut y.as_mut_slice()[r.start * h..r.end * h];
        let saved = moe_segment(&chunk, w, rows, meter);
        release_segment(meter, saved.copies(), h, g);
    }
    if !y.is_finite() {
        return Err(Error::NonFinite("moe forward output"));
    }
    Ok(y)
}

/// Chunk-level recompute-and-backprop: for each chunk in order, rerun its
/// forward, backprop the matching rows of `y_grad`, release its buffers.
pub fn backward_chunked<T: Scalar>(
    y_grad: &Matrix<T>,
    x: &TokenBatch<T>,
    w: &ExpertWeights<T>,
    partition: &ChunkPartition,
    meter: &mut ActivationMeter,
) -> Result<Gradients<T>> {
    check_shapes(x, w)?;
    check_partition(x, partition)?;
    let (s, h) = (x.tokens(), w.hidden());
    if y_grad.rows() != s || y_grad.cols() != h {
        return Err(Error::Shape { what: "output gradient rows", expected: s, found: y_grad.rows() });
    }
    meter.alloc("grad_output", MemClass::Resident, s * h);
    meter.alloc("grad_input", MemClass::Resident, s * h);
    let mut x_grad = Matrix::zeros(s, h);
    let mut w_grad = w.zeros_like();
    let mut scratch = Vec::new();
    for r in partition.ranges() {
        let chunk = x.slice(r.clone());
        scratch.clear();
        scratch.resize(r.len() * h, T::zero());
        let saved = moe_segment(&chunk, w, &mut scratch, meter);
        let yg = &y_grad.as_slice()[r.start * h..r.end * h];
        let xg = &mut x_grad.as_mut_slice()[r.start * h..r.end * h];
        backward_segment(&chunk, w, yg, &saved, xg, &mut w_grad, meter);
    }
    if !x_grad.is_finite() {
        return Err(Error::NonFinite("moe input gradient"));
    }
    Ok(Gradients { x: x_grad, w: w_grad })
}
