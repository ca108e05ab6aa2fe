//! Synthetic token-routing traces for an expert-parallel group.
//!
//! Every one of the `e` ranks in the EP group dispatches its local micro-batch of
//! `b·s` tokens, each duplicated `t_k` times by top-k routing, so a single
//! (iteration, layer) cell moves `e·b·s·t_k` token copies. Copies are assigned to
//! experts by a multinomial draw over a per-cell expert distribution, and experts
//! are placed on GPUs round-robin (`expert j` on `gpu j mod e`).
//!
//! Randomness comes from ChaCha8 seeded with the user seed; cell
//! `(iteration, layer)` reads from stream `iteration·layers + layer`, so any cell
//! can be regenerated alone and the output does not depend on generation order.

use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution as _, Gamma};
use serde::{Deserialize, Serialize};

use crate::config::ValidatedScenario;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    /// Every expert equally likely.
    Uniform,
    /// Symmetric Dirichlet(`alpha`) expert probabilities, redrawn per cell.
    Dirichlet { alpha: f64 },
    /// A fraction `rho` of all copies goes to one randomly chosen expert;
    /// the rest is spread uniformly.
    HotExpert { rho: f64 },
    /// Dirichlet whose concentration shrinks with depth: `alpha0 · decay^layer`.
    DepthSkew { alpha0: f64, decay: f64 },
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        let ok_alpha = |a: f64| a > 0.0 && a.is_finite();
        match *self {
            Distribution::Uniform => Ok(()),
            Distribution::Dirichlet { alpha } if !ok_alpha(alpha) => {
                Err(Error::Distribution("dirichlet alpha must be positive"))
            }
            Distribution::HotExpert { rho } if !(0.0..=1.0).contains(&rho) => {
                Err(Error::Distribution("hot_expert rho must lie in [0, 1]"))
            }
            Distribution::DepthSkew { alpha0, .. } if !ok_alpha(alpha0) => {
                Err(Error::Distribution("depth_skew alpha0 must be positive"))
            }
            Distribution::DepthSkew { decay, .. } if !(decay > 0.0 && decay <= 1.0) => {
                Err(Error::Distribution("depth_skew decay must lie in (0, 1]"))
            }
            _ => Ok(()),
        }
    }

    /// Dirichlet concentration in effect for MoE layer `layer` (0-based), if any.
    pub fn concentration(&self, layer: usize) -> Option<f64> {
        match *self {
            Distribution::Dirichlet { alpha } => Some(alpha),
            Distribution::DepthSkew { alpha0, decay } => Some(alpha0 * libm::pow(decay, layer as f64)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(flatten)]
    pub distribution: Distribution,
    pub seed: u64,
}

/// Received token copies per `[iteration][moe layer][gpu]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingTrace {
    pub iterations: usize,
    pub layers: usize,
    pub gpus: usize,
    /// Global index of the first MoE layer (the dense prefix has no routing).
    pub first_layer: u64,
    /// Copies moved per (iteration, layer) across the whole EP group.
    pub copies_per_cell: u64,
    /// Micro-batch size the counts include.
    pub micro_batch: u64,
    pub generator: Option<GeneratorSpec>,
    tokens: Vec<u64>,
}

impl RoutingTrace {
    /// Assemble a trace from flat `[iteration][layer][gpu]` data.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        iterations: usize,
        layers: usize,
        gpus: usize,
        first_layer: u64,
        copies_per_cell: u64,
        micro_batch: u64,
        generator: Option<GeneratorSpec>,
        tokens: Vec<u64>,
    ) -> Result<Self> {
        let expected = iterations * layers * gpus;
        if tokens.len() != expected {
            return Err(Error::TraceMismatch {
                what: "cell count",
                expected,
                found: tokens.len(),
            });
        }
        if tokens.iter().any(|&t| t > copies_per_cell) {
            return Err(Error::Distribution("per-gpu count exceeds copies per cell"));
        }
        Ok(Self { iterations, layers, gpus, first_layer, copies_per_cell, micro_batch, generator, tokens })
    }

    pub fn get(&self, iteration: usize, layer: usize, gpu: usize) -> u64 {
        self.tokens[(iteration * self.layers + layer) * self.gpus + gpu]
    }

    /// Counts of every GPU in one cell.
    pub fn cell(&self, iteration: usize, layer: usize) -> &[u64] {
        let start = (iteration * self.layers + layer) * self.gpus;
        &self.tokens[start..start + self.gpus]
    }

    pub fn max_in_cell(&self, iteration: usize, layer: usize) -> u64 {
        self.cell(iteration, layer).iter().copied().max().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[u64] {
        &self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Every cell sums to `copies_per_cell`.
    pub fn is_conserved(&self) -> bool {
        self.tokens
            .chunks(self.gpus.max(1))
            .all(|c| c.iter().sum::<u64>() == self.copies_per_cell)
    }
}

/// Theoretical extremes of per-GPU routed load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Peak {
    /// `e·s`: every rank's sequence lands on one GPU.
    pub tokens: u64,
    /// `e·s·t_k`: the same, counting top-k copies.
    pub copies: u64,
}

pub fn theoretical_peak(scn: &ValidatedScenario) -> Peak {
    let e = scn.parallel().ep;
    let s = scn.model().seq_len;
    Peak { tokens: e * s, copies: e * s * scn.model().top_k }
}

/// Copies moved by the whole EP group per layer: `e·b·s·t_k`.
pub fn copies_per_cell(scn: &ValidatedScenario) -> u64 {
    let m = scn.model();
    scn.parallel().ep * scn.parallel().micro_batch * m.seq_len * m.top_k
}

fn cell_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Symmetric Dirichlet sample, computed in log space so tiny concentrations do
/// not underflow: `G_a = G_{a+1} · U^{1/a}`.
fn dirichlet(rng: &mut ChaCha8Rng, alpha: f64, n: usize, out: &mut [f64]) {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("shape > 1");
    let mut top = f64::NEG_INFINITY;
    for slot in out.iter_mut().take(n) {
        let g: f64 = gamma.sample(rng);
        let u: f64 = 1.0 - rng.random::<f64>();
        *slot = libm::log(g) + libm::log(u) / alpha;
        top = top.max(*slot);
    }
    let mut z = 0.0;
    for slot in out.iter_mut() {
        *slot = libm::exp(*slot - top);
        z += *slot;
    }
    for slot in out.iter_mut() {
        *slot /= z;
    }
}

/// Multinomial split of `n` copies via conditional binomials.
fn multinomial(rng: &mut ChaCha8Rng, n: u64, probs: &[f64], out: &mut [u64]) {
    let mut tail = vec![0.0; probs.len() + 1];
    for j in (0..probs.len()).rev() {
        tail[j] = tail[j + 1] + probs[j];
    }
    let mut left = n;
    for j in 0..probs.len() {
        if left == 0 {
            out[j] = 0;
            continue;
        }
        if j + 1 == probs.len() {
            out[j] = left;
            break;
        }
        let q = if tail[j] > 0.0 { (probs[j] / tail[j]).clamp(0.0, 1.0) } else { 1.0 };
        let x = Binomial::new(left, q).expect("q in [0, 1]").sample(rng);
        out[j] = x;
        left -= x;
    }
}

/// Generate `iterations` × (MoE layers) × `e` received-copy counts.
pub fn generate_trace(
    scn: &ValidatedScenario,
    distribution: Distribution,
    iterations: usize,
    seed: u64,
) -> Result<RoutingTrace> {
    distribution.validate()?;
    let experts = scn.model().num_experts as usize;
    let gpus = scn.parallel().ep as usize;
    let layers = scn.moe_layers() as usize;
    let n = copies_per_cell(scn);

    let mut probs = vec![0.0; experts];
    let mut per_expert = vec![0u64; experts];
    let mut tokens = Vec::with_capacity(iterations * layers * gpus);
    for it in 0..iterations {
        for layer in 0..layers {
            let mut rng = cell_rng(seed, (it * layers + layer) as u64);
            match distribution {
                Distribution::Uniform => probs.fill(1.0 / experts as f64),
                Distribution::HotExpert { rho } => {
                    let hot = rng.random_range(0..experts);
                    probs.fill((1.0 - rho) / experts as f64);
                    probs[hot] += rho;
                }
                Distribution::Dirichlet { .. } | Distribution::DepthSkew { .. } => {
                    let alpha = distribution.concentration(layer).expect("dirichlet family");
                    dirichlet(&mut rng, alpha, experts, &mut probs);
                }
            }
            multinomial(&mut rng, n, &probs, &mut per_expert);
            let base = tokens.len();
            tokens.resize(base + gpus, 0);
            for (j, &count) in per_expert.iter().enumerate() {
                tokens[base + j % gpus] += count;
            }
        }
    }
    RoutingTrace::from_parts(
        iterations,
        layers,
        gpus,
        scn.model().dense_layers,
        n,
        scn.parallel().micro_batch,
        Some(GeneratorSpec { distribution, seed }),
        tokens,
    )
}

/// Order statistics of one MoE layer over all GPUs and iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerStats {
    /// Global layer index.
    pub layer: u64,
    pub min: u64,
    /// Lower median: element `(n − 1) / 2` of the sorted sample.
    pub median: u64,
    pub max: u64,
    /// Nearest-rank 99th percentile: element `ceil(0.99·n) − 1`.
    pub p99: u64,
    pub mean: f64,
}

pub fn trace_stats(trace: &RoutingTrace) -> Vec<LayerStats> {
    (0..trace.layers)
        .filter_map(|layer| {
            let mut sample: Vec<u64> = (0..trace.iterations)
                .flat_map(|it| trace.cell(it, layer).iter().copied())
                .collect();
            if sample.is_empty() {
                return None;
            }
            sample.sort_unstable();
            let n = sample.len();
            let rank99 = (99 * n).div_ceil(100).max(1) - 1;
            Some(LayerStats {
                layer: trace.first_layer + layer as u64,
                min: sample[0],
                median: sample[(n - 1) / 2],
                max: sample[n - 1],
                p99: sample[rank99],
                mean: sample.iter().sum::<u64>() as f64 / n as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{presets, validate};

    fn paper() -> ValidatedScenario {
        validate(presets::model_i()).unwrap()
    }

    #[test]
    fn peak_values() {
        assert_eq!(theoretical_peak(&paper()).tokens, 131_072);
        assert_eq!(theoretical_peak(&paper()).copies, 131_072 * 8);
        let mut s = presets::toy();
        s.parallel.ep = 1;
        assert_eq!(theoretical_peak(&validate(s).unwrap()).tokens, 8);
        let mut s = presets::toy();
        s.parallel.ep = 2;
        assert_eq!(theoretical_peak(&validate(s).unwrap()).tokens, 16);
    }

    #[test]
    fn uniform_is_balanced_and_conserved() {
        let scn = paper();
        let tr = generate_trace(&scn, Distribution::Uniform, 3, 11).unwrap();
        assert!(tr.is_conserved());
        assert_eq!((tr.iterations, tr.layers, tr.gpus), (3, 13, 32));
        for it in 0..3 {
            for l in 0..13 {
                let c = tr.cell(it, l);
                let (lo, hi) = (*c.iter().min().unwrap(), *c.iter().max().unwrap());
                assert!(hi as f64 / lo as f64 <= 1.1, "{lo}..{hi}");
            }
        }
        let stats = trace_stats(&tr);
        // Each GPU receives on average what it sends: b·s·t_k.
        for st in stats {
            assert!((st.mean - 32768.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hot_expert_degenerate() {
        let scn = paper();
        let tr = generate_trace(&scn, Distribution::HotExpert { rho: 1.0 }, 2, 5).unwrap();
        for it in 0..2 {
            for l in 0..tr.layers {
                let c = tr.cell(it, l);
                assert_eq!(c.iter().filter(|&&x| x == tr.copies_per_cell).count(), 1);
                assert_eq!(c.iter().filter(|&&x| x == 0).count(), 31);
            }
        }
        let st = trace_stats(&tr);
        assert!(st.iter().all(|s| s.max == tr.copies_per_cell && s.min == 0));
    }

    #[test]
    fn invalid_params_rejected() {
        let scn = paper();
        for d in [
            Distribution::Dirichlet { alpha: 0.0 },
            Distribution::Dirichlet { alpha: -1.0 },
            Distribution::HotExpert { rho: 1.5 },
            Distribution::HotExpert { rho: -0.1 },
            Distribution::DepthSkew { alpha0: 0.0, decay: 0.5 },
            Distribution::DepthSkew { alpha0: 1.0, decay: 1.5 },
        ] {
            assert!(matches!(generate_trace(&scn, d, 1, 0), Err(Error::Distribution(_))), "{d:?}");
        }
    }

    #[test]
    fn deterministic_and_order_independent() {
        let scn = paper();
        let d = Distribution::DepthSkew { alpha0: 1.0, decay: 0.7 };
        let a = generate_trace(&scn, d, 4, 99).unwrap();
        let b = generate_trace(&scn, d, 4, 99).unwrap();
        assert_eq!(a, b);
        // Fewer iterations reproduce the prefix exactly.
        let c = generate_trace(&scn, d, 2, 99).unwrap();
        assert_eq!(&a.tokens()[..c.tokens().len()], c.tokens());
        assert_ne!(a, generate_trace(&scn, d, 4, 100).unwrap());
    }

    #[test]
    fn tiny_concentration_stays_finite() {
        let scn = paper();
        let tr = generate_trace(&scn, Distribution::Dirichlet { alpha: 1e-4 }, 2, 3).unwrap();
        assert!(tr.is_conserved());
    }

    #[test]
    fn stats_on_constant_trace() {
        let tr = RoutingTrace::from_parts(3, 2, 4, 0, 100, 1, None, vec![7; 24]).unwrap();
        for s in trace_stats(&tr) {
            assert_eq!((s.min, s.median, s.max, s.p99), (7, 7, 7, 7));
        }
    }

    #[test]
    fn stats_order_statistics() {
        // One layer, one iteration, values 1..=100 shuffled.
        let vals: Vec<u64> = (0..100).map(|i| (i * 37) % 100 + 1).collect();
        let tr = RoutingTrace::from_parts(1, 1, 100, 3, 1000, 1, None, vals).unwrap();
        let s = trace_stats(&tr)[0];
        assert_eq!((s.layer, s.min, s.median, s.max, s.p99), (3, 1, 50, 100, 99));
    }

    #[test]
    fn empty_trace() {
        let scn = paper();
        let tr = generate_trace(&scn, Distribution::Uniform, 0, 1).unwrap();
        assert!(tr.is_empty());
        assert!(trace_stats(&tr).is_empty());
    }

    #[test]
    fn from_parts_checks_shape() {
        assert!(RoutingTrace::from_parts(2, 2, 2, 0, 10, 1, None, vec![1; 7]).is_err());
        assert!(RoutingTrace::from_parts(1, 1, 2, 0, 10, 1, None, vec![11, 0]).is_err());
    }
}
