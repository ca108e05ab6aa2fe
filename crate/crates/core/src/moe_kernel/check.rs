//! Self-checks of the kernel: random instances, chunked-vs-single-pass
//! equivalence, and a central finite-difference gradient oracle that only
//! evaluates [`forward`].

use alloc::vec::Vec;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::*;

/// Upper bounds for random instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct InstanceLimits {
    pub tokens: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub experts: usize,
    pub top_k: usize,
}

impl Default for InstanceLimits {
    fn default() -> Self {
        Self { tokens: 64, hidden: 16, intermediate: 32, experts: 8, top_k: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub batch: TokenBatch<f64>,
    pub weights: ExpertWeights<f64>,
    /// Upstream gradient; also the projection defining the scalar loss `Σ Y ⊙ R`.
    pub y_grad: Matrix<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller; one of the pair is enough here.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| scale * normal(rng))
}

/// Random instance with every dimension drawn uniformly in `1..=limit`
/// (top-k capped by the expert count). Routing picks distinct experts per
/// token with softmax-normalised scores.
pub fn random_instance(seed: u64, limits: InstanceLimits) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = rng.random_range(1..=limits.tokens);
    let h = rng.random_range(1..=limits.hidden);
    let g = rng.random_range(1..=limits.intermediate);
    let n_exp = rng.random_range(1..=limits.experts);
    let k = rng.random_range(1..=limits.top_k.min(n_exp));
    instance_with(&mut rng, s, h, g, n_exp, k, None)
}

/// Instance of fixed shape. With `uniform` set, slot `j` of token `i` goes to
/// expert `(i·k + j) mod E`, so every expert sees an equal share of copies.
pub fn fixed_instance(seed: u64, s: usize, h: usize, g: usize, n_exp: usize, k: usize, uniform: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    instance_with(&mut rng, s, h, g, n_exp, k, uniform.then_some(()))
}

fn instance_with(
    rng: &mut ChaCha8Rng,
    s: usize,
    h: usize,
    g: usize,
    n_exp: usize,
    k: usize,
    uniform: Option<()>,
) -> Instance {
    let data = random_matrix(rng, s, h, 1.0);
    let mut experts = Vec::with_capacity(s * k);
    let mut scores = Vec::with_capacity(s * k);
    for i in 0..s {
        match uniform {
            Some(()) => experts.extend((0..k).map(|j| (i * k + j) % n_exp)),
            None => experts.extend(sample(rng, n_exp, k).into_iter()),
        }
        let logits: Vec<f64> = (0..k).map(|_| normal(rng)).collect();
        let z: f64 = logits.iter().map(|&l| libm::exp(l)).sum();
        scores.extend(logits.iter().map(|&l| libm::exp(l) / z));
    }
    let batch = TokenBatch::new(data, k, experts, scores, n_exp).expect("consistent instance");
    let w_in = 1.0 / libm::sqrt(h as f64);
    let w_out = 1.0 / libm::sqrt(g as f64);
    let experts = (0..n_exp)
        .map(|_| Expert {
            up: random_matrix(rng, h, g, w_in),
            gate: random_matrix(rng, h, g, w_in),
            down: random_matrix(rng, g, h, w_out),
        })
        .collect();
    let weights = ExpertWeights::new(experts, Activation::Silu).expect("consistent weights");
    let y_grad = random_matrix(rng, s, h, 1.0);
    Instance { batch, weights, y_grad }
}

/// `max |a − b| / max |b|` over two equally shaped slices (0 when both vanish).
pub fn relative_max_diff(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub chunks: usize,
    /// Chunked forward equals the single pass bit for bit.
    pub forward_exact: bool,
    pub x_grad_rel: f64,
    pub w_grad_rel: f64,
}

/// Compare chunked and single-pass execution of `inst` with `chunks` uniform chunks.
pub fn equivalence(inst: &Instance, chunks: usize) -> Result<EquivalenceReport> {
    equivalence_against(inst, inst, chunks)
}

/// Single pass on `reference` against chunked execution on `candidate`.
pub fn equivalence_against(reference: &Instance, candidate: &Instance, chunks: usize) -> Result<EquivalenceReport> {
    let part = ChunkPartition::uniform(candidate.batch.tokens(), chunks)?;
    let (r, c) = (reference, candidate);
    let mut m0 = ActivationMeter::new(2);
    let base = forward(&r.batch, &r.weights, &mut m0, SaveMode::Keep)?;
    let gbase = backward(&r.y_grad, &r.batch, &r.weights, base.saved.as_ref(), &mut m0)?;
    let mut m1 = ActivationMeter::new(2);
    let y = forward_chunked(&c.batch, &c.weights, &part, &mut m1)?;
    let gch = backward_chunked(&c.y_grad, &c.batch, &c.weights, &part, &mut m1)?;
    if y.rows() != base.y.rows() || y.cols() != base.y.cols() {
        return Err(Error::Shape { what: "candidate output", expected: base.y.len(), found: y.len() });
    }
    let flat = |w: &ExpertWeights<f64>| w.tensors().flat_map(|m| m.as_slice().iter().copied()).collect::<Vec<_>>();
    Ok(EquivalenceReport {
        chunks,
        forward_exact: y == base.y,
        x_grad_rel: relative_max_diff(gch.x.as_slice(), gbase.x.as_slice()),
        w_grad_rel: relative_max_diff(&flat(&gch.w), &flat(&gbase.w)),
    })
}

/// `Σ Y ⊙ R` of a plain forward.
pub fn loss(batch: &TokenBatch<f64>, w: &ExpertWeights<f64>, r: &Matrix<f64>) -> Result<f64> {
    let mut m = ActivationMeter::new(2);
    let out = forward(batch, w, &mut m, SaveMode::Discard)?;
    Ok(out.y.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum())
}

/// Relative error with magnitudes below `floor` measured against `floor`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Gradient magnitudes below this are compared absolutely, at `tol · FD_FLOOR`.
pub const FD_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Central differences `(L(θ+δ) − L(θ−δ)) / 2δ` against [`backward`] for every
/// input coordinate and `weight_samples` randomly chosen weight coordinates.
pub fn finite_difference(inst: &Instance, step: f64, weight_samples: usize, seed: u64) -> Result<GradCheckReport> {
    let mut meter = ActivationMeter::new(2);
    let out = forward(&inst.batch, &inst.weights, &mut meter, SaveMode::Keep)?;
    let grads = backward(&inst.y_grad, &inst.batch, &inst.weights, out.saved.as_ref(), &mut meter)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut batch = inst.batch.clone();
    for idx in 0..batch.data().len() {
        let orig = batch.data().as_slice()[idx];
        batch.data_mut().as_mut_slice()[idx] = orig + step;
        let up = loss(&batch, &inst.weights, &inst.y_grad)?;
        batch.data_mut().as_mut_slice()[idx] = orig - step;
        let down = loss(&batch, &inst.weights, &inst.y_grad)?;
        batch.data_mut().as_mut_slice()[idx] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(rel_error(grads.x.as_slice()[idx], numeric, FD_FLOOR));
        checked += 1;
    }

    let sizes: Vec<usize> = inst.weights.tensors().map(|m| m.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, total, weight_samples.min(total));
    let analytic: Vec<f64> = grads.w.tensors().flat_map(|m| m.as_slice().iter().copied()).collect();
    let mut w = inst.weights.clone();
    for flat in picks.into_iter() {
        let (mut t, mut off) = (0, flat);
        while off >= sizes[t] {
            off -= sizes[t];
            t += 1;
        }
        let orig = w.tensors().nth(t).unwrap().as_slice()[off];
        w.tensors_mut().nth(t).unwrap().as_mut_slice()[off] = orig + step;
        let up = loss(&inst.batch, &w, &inst.y_grad)?;
        w.tensors_mut().nth(t).unwrap().as_mut_slice()[off] = orig - step;
        let down = loss(&inst.batch, &w, &inst.y_grad)?;
        w.tensors_mut().nth(t).unwrap().as_mut_slice()[off] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(rel_error(analytic[flat], numeric, FD_FLOOR));
        checked += 1;
    }
    Ok(GradCheckReport { checked, max_rel_error: worst })
}
