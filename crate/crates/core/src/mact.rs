//! Memory-aware chunk tuning.
//!
//! Per pipeline stage, the memory model gives the largest number of routed copies
//! a GPU can hold in the MoE segment:
//!
//! ```text
//! s'_max = ⌊ (α·M_GPU − M_sta − A) / ((m_g/(t·c))·D_t·b·(2h + 2·g_e)) ⌋
//! ```
//!
//! where `A` is the `s`-dependent (attention + router) activation. A GPU that
//! receives `s''` copies then needs `c = ⌈s''/s'_max⌉` chunks; the chosen count
//! is the smallest configured bin ≥ `c`, clamped to the largest bin.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::config::{RecomputeMode, ValidatedScenario};
use crate::error::{Error, Result};
use crate::memory_model::{self, MemoryEstimate};
use crate::routing_sim::RoutingTrace;

/// Strictly increasing chunk-count thresholds, all ≥ 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u64>", into = "Vec<u64>")]
pub struct Bins(Vec<u64>);

impl Bins {
    pub fn new(bins: Vec<u64>) -> Result<Self> {
        if bins.is_empty() {
            return Err(Error::Bins("no bins given"));
        }
        if bins[0] < 1 {
            return Err(Error::Bins("bins must be at least 1"));
        }
        if bins.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Bins("bins must be strictly increasing"));
        }
        Ok(Self(bins))
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn max(&self) -> u64 {
        *self.0.last().expect("non-empty")
    }
}

impl Default for Bins {
    fn default() -> Self {
        Self(alloc::vec![1, 2, 4, 8])
    }
}

impl TryFrom<Vec<u64>> for Bins {
    type Error = Error;

    fn try_from(v: Vec<u64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Bins> for Vec<u64> {
    fn from(b: Bins) -> Self {
        b.0
    }
}

/// `s'_max` for a given static footprint, with `scn`'s recompute mode and stage.
///
/// Negative or zero results mean even one copy per chunk does not fit.
pub fn s_prime_max_with_static(scn: &ValidatedScenario, static_bytes: u64) -> Result<i64> {
    let capacity = scn.capacity_bytes();
    if static_bytes > capacity {
        return Err(Error::StaticInfeasible { static_bytes, capacity });
    }
    let attention = memory_model::activation_memory(scn, 0)?.attention_bytes;
    let room = i128::from(capacity) - i128::from(static_bytes) - i128::from(attention);
    let num = room * memory_model::shard_count(scn) as i128;
    let den = memory_model::moe_slope_numerator(scn) as i128;
    let q = num.div_euclid(den);
    i64::try_from(q).map_err(|_| Error::Overflow("s'_max"))
}

/// `s'_max` of pipeline stage `stage`, evaluated under chunked recomputation.
pub fn s_prime_max(scn: &ValidatedScenario, stage: u64) -> Result<i64> {
    let staged = scn.with_stage(stage)?.with_recompute(RecomputeMode::Chunked);
    let static_bytes = memory_model::stage_static_memory(&staged, stage)?.total;
    s_prime_max_with_static(&staged, static_bytes)
}

/// `⌈s'' / s'_max⌉`, at least one chunk.
pub fn c_theoretical(s_double_prime: u64, s_prime_max: i64) -> Result<u64> {
    if s_prime_max <= 0 {
        return Err(Error::NonPositiveBound(s_prime_max));
    }
    Ok(s_double_prime.div_ceil(s_prime_max as u64).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BinChoice {
    pub c_selected: u64,
    /// `c` exceeded the largest bin.
    pub clamped: bool,
}

/// Smallest bin ≥ `c`; the largest bin when none is.
pub fn select_bin(c: u64, bins: &Bins) -> BinChoice {
    match bins.as_slice().iter().find(|&&b| b >= c) {
        Some(&b) => BinChoice { c_selected: b, clamped: false },
        None => BinChoice { c_selected: bins.max(), clamped: true },
    }
}

/// How a plan picks the chunk count of a cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Strategy {
    /// One chunk, full recomputation.
    Unchunked,
    /// The same chunk count everywhere.
    Fixed { chunks: u64 },
    /// Memory-aware choice from `bins`.
    Mact { bins: Bins },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Unchunked => "no_chunk_full_recompute",
            Strategy::Fixed { .. } => "fixed_bin",
            Strategy::Mact { .. } => "mact",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PlanCell {
    pub iteration: usize,
    /// Global layer index.
    pub layer: u64,
    pub stage: u64,
    pub s_double_prime: u64,
    pub s_prime_max: i64,
    /// `None` when `s'_max ≤ 0`.
    pub c_theoretical: Option<u64>,
    pub c_selected: u64,
    pub clamped: bool,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChunkPlan {
    pub strategy: Strategy,
    pub iterations: usize,
    pub layers: usize,
    pub cells: Vec<PlanCell>,
}

impl ChunkPlan {
    pub fn cell(&self, iteration: usize, layer: usize) -> &PlanCell {
        &self.cells[iteration * self.layers + layer]
    }

    pub fn all_feasible(&self) -> bool {
        self.cells.iter().all(|c| c.feasible)
    }

    pub fn iteration_cells(&self, iteration: usize) -> &[PlanCell] {
        &self.cells[iteration * self.layers..(iteration + 1) * self.layers]
    }
}

fn cell_choice(strategy: &Strategy, s_dp: u64, s_max: i64) -> (Option<u64>, BinChoice) {
    let c_theo = c_theoretical(s_dp, s_max).ok();
    let choice = match strategy {
        Strategy::Unchunked => BinChoice { c_selected: 1, clamped: false },
        Strategy::Fixed { chunks } => BinChoice { c_selected: (*chunks).max(1), clamped: false },
        Strategy::Mact { bins } => match c_theo {
            Some(c) => select_bin(c, bins),
            None => BinChoice { c_selected: bins.max(), clamped: true },
        },
    };
    (c_theo, choice)
}

/// Plan every (iteration, MoE layer) cell of `trace`.
///
/// `s''` of a cell is the most loaded GPU of the EP group, converted to
/// per-sequence copies (`⌈count / b⌉`) to match the memory model's `b` factor.
/// All ranks of the group dispatch with the same chunk count, so the most loaded
/// one decides.
pub fn plan(scn: &ValidatedScenario, trace: &RoutingTrace, strategy: Strategy) -> Result<ChunkPlan> {
    let layers = scn.moe_layers() as usize;
    if trace.layers != layers {
        return Err(Error::TraceMismatch { what: "layer count", expected: layers, found: trace.layers });
    }
    let gpus = scn.parallel().ep as usize;
    if trace.gpus != gpus {
        return Err(Error::TraceMismatch { what: "gpu count", expected: gpus, found: trace.gpus });
    }
    if trace.first_layer != scn.model().dense_layers {
        return Err(Error::TraceMismatch {
            what: "first moe layer",
            expected: scn.model().dense_layers as usize,
            found: trace.first_layer as usize,
        });
    }
    if let Strategy::Fixed { chunks: 0 } = strategy {
        return Err(Error::Bins("fixed chunk count must be at least 1"));
    }

    let mut bounds = BTreeMap::new();
    for layer in 0..layers {
        let stage = scn.stage_of_layer(trace.first_layer + layer as u64);
        if let alloc::collections::btree_map::Entry::Vacant(e) = bounds.entry(stage) {
            e.insert(s_prime_max(scn, stage)?);
        }
    }

    let b = scn.parallel().micro_batch;
    let mut cells = Vec::with_capacity(trace.iterations * layers);
    for iteration in 0..trace.iterations {
        for l in 0..layers {
            let layer = trace.first_layer + l as u64;
            let stage = scn.stage_of_layer(layer);
            let s_max = bounds[&stage];
            let s_dp = trace.max_in_cell(iteration, l).div_ceil(b);
            let (c_theoretical, choice) = cell_choice(&strategy, s_dp, s_max);
            let feasible = s_max > 0 && s_dp.div_ceil(choice.c_selected) <= s_max as u64;
            cells.push(PlanCell {
                iteration,
                layer,
                stage,
                s_double_prime: s_dp,
                s_prime_max: s_max,
                c_theoretical,
                c_selected: choice.c_selected,
                clamped: choice.clamped,
                feasible,
            });
        }
    }
    Ok(ChunkPlan { strategy, iterations: trace.iterations, layers, cells })
}

/// Memory estimate of one method for a stage receiving `s_peak` copies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MethodEstimate {
    pub method: &'static str,
    pub chunks: u64,
    pub clamped: bool,
    pub chunk_tokens: u64,
    pub estimate: MemoryEstimate,
}

/// Evaluate one strategy on the scenario's stage with peak load `s_peak`.
pub fn method_estimate(scn: &ValidatedScenario, s_peak: u64, strategy: &Strategy) -> Result<MethodEstimate> {
    let stage = scn.parallel().pp_rank;
    let (mode, choice) = match strategy {
        Strategy::Unchunked => (RecomputeMode::Full, BinChoice { c_selected: 1, clamped: false }),
        Strategy::Fixed { chunks } => {
            if *chunks == 0 {
                return Err(Error::Bins("fixed chunk count must be at least 1"));
            }
            (RecomputeMode::Chunked, BinChoice { c_selected: *chunks, clamped: false })
        }
        Strategy::Mact { .. } => {
            let s_max = s_prime_max(scn, stage)?;
            (RecomputeMode::Chunked, cell_choice(strategy, s_peak, s_max).1)
        }
    };
    let staged = scn.with_recompute(mode);
    let chunk_tokens = s_peak.div_ceil(choice.c_selected);
    let estimate = memory_model::estimate(&staged, chunk_tokens)?;
    Ok(MethodEstimate {
        method: strategy.name(),
        chunks: choice.c_selected,
        clamped: choice.clamped,
        chunk_tokens,
        estimate,
    })
}

/// The three methods side by side: no chunking with full recompute, a fixed
/// chunk count, and the memory-aware choice.
pub fn compare_methods(scn: &ValidatedScenario, s_peak: u64, fixed_chunks: u64, bins: &Bins) -> Result<Vec<MethodEstimate>> {
    [
        Strategy::Unchunked,
        Strategy::Fixed { chunks: fixed_chunks },
        Strategy::Mact { bins: bins.clone() },
    ]
    .iter()
    .map(|s| method_estimate(scn, s_peak, s))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{presets, validate};
    use crate::routing_sim::{generate_trace, Distribution};

    fn toy() -> ValidatedScenario {
        validate(presets::toy()).unwrap()
    }

    fn bins() -> Bins {
        Bins::default()
    }

    #[test]
    fn toy_bound() {
        // capacity 10 000, static 2000, attention 512, 48 bytes per copy.
        assert_eq!(s_prime_max_with_static(&toy(), 2000).unwrap(), 156);
        assert_eq!(s_prime_max_with_static(&toy(), 10_000 - 512).unwrap(), 0);
        assert_eq!(s_prime_max_with_static(&toy(), 10_000 - 511).unwrap(), -1);
        assert_eq!(s_prime_max_with_static(&toy(), 10_000 - 512 - 48).unwrap(), 1);
        assert_eq!(s_prime_max_with_static(&toy(), 10_000).unwrap(), -11);
        assert!(matches!(
            s_prime_max_with_static(&toy(), 10_001),
            Err(Error::StaticInfeasible { .. })
        ));
    }

    #[test]
    fn ceil_chunks() {
        assert_eq!(c_theoretical(156, 156).unwrap(), 1);
        assert_eq!(c_theoretical(157, 156).unwrap(), 2);
        assert_eq!(c_theoretical(400, 156).unwrap(), 3);
        assert_eq!(c_theoretical(0, 156).unwrap(), 1);
        assert_eq!(c_theoretical(5, 0), Err(Error::NonPositiveBound(0)));
        assert_eq!(c_theoretical(5, -3), Err(Error::NonPositiveBound(-3)));
    }

    #[test]
    fn bin_selection() {
        let b = bins();
        assert_eq!(select_bin(2, &b), BinChoice { c_selected: 2, clamped: false });
        assert_eq!(select_bin(3, &b), BinChoice { c_selected: 4, clamped: false });
        assert_eq!(select_bin(9, &b), BinChoice { c_selected: 8, clamped: true });
        assert_eq!(select_bin(1, &b), BinChoice { c_selected: 1, clamped: false });
    }

    #[test]
    fn bins_validation() {
        assert!(Bins::new(alloc::vec![]).is_err());
        assert!(Bins::new(alloc::vec![0, 1]).is_err());
        assert!(Bins::new(alloc::vec![1, 4, 2]).is_err());
        assert!(Bins::new(alloc::vec![2, 2]).is_err());
        assert_eq!(Bins::new(alloc::vec![3]).unwrap().max(), 3);
    }

    #[test]
    fn cell_composition() {
        let (c, choice) = cell_choice(&Strategy::Mact { bins: bins() }, 400, 156);
        assert_eq!(c, Some(3));
        assert_eq!(choice.c_selected, 4);
        assert!(400u64.div_ceil(choice.c_selected) <= 156);
    }

    #[test]
    fn uniform_trace_needs_one_chunk() {
        let mut s = presets::model_i();
        s.hardware.alpha = 1.0;
        let scn = validate(s).unwrap();
        let tr = generate_trace(&scn, Distribution::Uniform, 3, 1).unwrap();
        let p = plan(&scn, &tr, Strategy::Mact { bins: bins() }).unwrap();
        assert!(p.cells.iter().all(|c| c.c_selected == 1 && c.feasible));
        assert_eq!(p.cells.len(), 3 * 13);
        assert_eq!(p.cell(2, 0).layer, 3);
    }

    #[test]
    fn full_peak_trace_needs_chunks() {
        let scn = validate(presets::model_i()).unwrap();
        let tr = generate_trace(&scn, Distribution::HotExpert { rho: 1.0 }, 2, 1).unwrap();
        let p = plan(&scn, &tr, Strategy::Mact { bins: bins() }).unwrap();
        assert!(p.cells.iter().all(|c| c.c_selected >= 2));
        assert!(p.all_feasible());
        assert_eq!(p.cell(0, 0).c_selected, 4);
        let n = plan(&scn, &tr, Strategy::Unchunked).unwrap();
        assert!(!n.all_feasible());
    }

    #[test]
    fn plan_rejects_mismatched_trace() {
        let scn = validate(presets::model_i()).unwrap();
        let other = validate(presets::model_ii()).unwrap();
        let tr = generate_trace(&other, Distribution::Uniform, 1, 1).unwrap();
        assert!(matches!(
            plan(&scn, &tr, Strategy::Mact { bins: bins() }),
            Err(Error::TraceMismatch { what: "layer count", .. })
        ));
    }

    #[test]
    fn per_stage_bounds_differ() {
        let scn = validate(presets::model_i()).unwrap();
        let b: Vec<i64> = (0..4).map(|st| s_prime_max(&scn, st).unwrap()).collect();
        // Stage 0 carries the embedding and the wide dense MLPs.
        assert!(b[0] < b[1]);
        assert_eq!(b[1], b[2]);
        assert!(b[3] < b[1]);
        assert!(b.iter().all(|&x| x > 0 && (x as u64) < 32 * 4096 * 8));
    }

    #[test]
    fn method_comparison_toy() {
        let scn = toy();
        let rows = compare_methods(&scn, 32, 8, &bins()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].chunks, 1);
        assert_eq!(rows[1].chunk_tokens, 4);
        assert!(rows[2].estimate.activation_bytes <= rows[0].estimate.activation_bytes);
    }
}
