//! Parametric iteration-time model and tokens per GPU per second.
//!
//! ```text
//! T = t_base_iter + Σ_cells [ tokens·t_compute_per_token·(1 + t_recompute_factor·recompute_fraction)
//!                             + c_selected·t_chunk_fixed ]
//! TGS = g_bs·s / (T·N)
//! ```
//!
//! `tokens` of a cell is the copy count of the most loaded GPU (`s''·b`), since the
//! EP group waits for it. The parameters are meant to be calibrated by the user.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::config::ValidatedScenario;
use crate::error::{Error, InvalidReason, Result};
use crate::mact::{ChunkPlan, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Seconds per routed copy through one MoE layer.
    pub t_compute_per_token: f64,
    pub t_recompute_factor: f64,
    /// Seconds of dispatch/combine launch overhead per chunk.
    pub t_chunk_fixed: f64,
    pub t_base_iter: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self { t_compute_per_token: 1e-8, t_recompute_factor: 1.0, t_chunk_fixed: 2e-3, t_base_iter: 5.0 }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("t_compute_per_token", self.t_compute_per_token),
            ("t_recompute_factor", self.t_recompute_factor),
            ("t_chunk_fixed", self.t_chunk_fixed),
            ("t_base_iter", self.t_base_iter),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::NonFinite(name));
            }
            if v < 0.0 {
                return Err(Error::Invalid { field: name, reason: InvalidReason::NotPositive });
            }
        }
        Ok(())
    }
}

/// Share of the MoE segment recomputed in backward. Every method here
/// recomputes the segment once: full recomputation or chunk-level recompute.
pub fn recompute_fraction(strategy: &Strategy) -> f64 {
    match strategy {
        Strategy::Unchunked | Strategy::Fixed { .. } | Strategy::Mact { .. } => 1.0,
    }
}

/// Time of iteration `iteration` of `plan`.
pub fn iteration_time(plan: &ChunkPlan, params: &CostParams, scn: &ValidatedScenario, iteration: usize) -> f64 {
    let b = scn.parallel().micro_batch as f64;
    let per_copy = params.t_compute_per_token * (1.0 + params.t_recompute_factor * recompute_fraction(&plan.strategy));
    plan.iteration_cells(iteration).iter().fold(params.t_base_iter, |t, cell| {
        t + cell.s_double_prime as f64 * b * per_copy + cell.c_selected as f64 * params.t_chunk_fixed
    })
}

pub fn iteration_times(plan: &ChunkPlan, params: &CostParams, scn: &ValidatedScenario) -> Vec<f64> {
    (0..plan.iterations).map(|i| iteration_time(plan, params, scn, i)).collect()
}

/// `g_bs·s / (T·N)`.
pub fn tgs(t: f64, scn: &ValidatedScenario, gpus: u64) -> Result<f64> {
    if !t.is_finite() {
        return Err(Error::NonFinite("iteration time"));
    }
    if t <= 0.0 {
        return Err(Error::Invalid { field: "iteration time", reason: InvalidReason::NotPositive });
    }
    if gpus == 0 {
        return Err(Error::Invalid { field: "gpu count", reason: InvalidReason::NotPositive });
    }
    let tokens = scn.parallel().global_batch as f64 * scn.model().seq_len as f64;
    Ok(tokens / (t * gpus as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodThroughput {
    pub method: &'static str,
    pub iteration_times: Vec<f64>,
    /// Mean over iterations; `None` for an empty plan.
    pub mean_time: Option<f64>,
    pub tgs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputReport {
    pub gpus: u64,
    /// Tokens per iteration, `g_bs·s`.
    pub tokens: u64,
    pub params: CostParams,
    pub rows: Vec<MethodThroughput>,
}

/// One row per plan, with `N` taken from the scenario's world size.
pub fn report(scn: &ValidatedScenario, plans: &[ChunkPlan], params: &CostParams) -> Result<ThroughputReport> {
    params.validate()?;
    let gpus = scn.world_size();
    let rows = plans
        .iter()
        .map(|p| {
            let times = iteration_times(p, params, scn);
            let mean_time = (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64);
            let tgs = match mean_time {
                Some(t) if t > 0.0 => Some(tgs(t, scn, gpus)?),
                _ => None,
            };
            Ok(MethodThroughput { method: p.strategy.name(), iteration_times: times, mean_time, tgs })
        })
        .collect::<Result<Vec<_>>>()?;
    let tokens = scn.parallel().global_batch * scn.model().seq_len;
    Ok(ThroughputReport { gpus, tokens, params: *params, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{presets, validate};
    use crate::mact::{plan, Bins};
    use crate::routing_sim::{generate_trace, Distribution};

    fn setup() -> (ValidatedScenario, ChunkPlan) {
        let scn = validate(presets::model_i()).unwrap();
        let tr = generate_trace(&scn, Distribution::Dirichlet { alpha: 0.3 }, 3, 7).unwrap();
        let p = plan(&scn, &tr, Strategy::Mact { bins: Bins::default() }).unwrap();
        (scn, p)
    }

    #[test]
    fn base_only() {
        let (scn, p) = setup();
        let c = CostParams { t_compute_per_token: 0.0, t_recompute_factor: 0.0, t_chunk_fixed: 0.0, t_base_iter: 10.0 };
        assert_eq!(iteration_times(&p, &c, &scn), [10.0, 10.0, 10.0]);
    }

    #[test]
    fn chunk_overhead_delta() {
        let (scn, mut p) = setup();
        let c = CostParams { t_chunk_fixed: 0.25, ..CostParams::default() };
        p.cells[0].c_selected = 2;
        let before = iteration_time(&p, &c, &scn, 0);
        p.cells[0].c_selected = 8;
        let after = iteration_time(&p, &c, &scn, 0);
        assert!((after - before - 6.0 * 0.25).abs() < 1e-12);

        let doubled = {
            let mut q = p.clone();
            q.cells.iter_mut().for_each(|x| x.c_selected *= 2);
            q
        };
        assert!(iteration_time(&doubled, &c, &scn, 1) > iteration_time(&p, &c, &scn, 1));
    }

    #[test]
    fn tgs_values() {
        let scn = validate(presets::model_i()).unwrap();
        assert_eq!(tgs(10.0, &scn, 32).unwrap(), 12288.0);
        assert_eq!(tgs(20.0, &scn, 32).unwrap(), 6144.0);
        let mut s = presets::toy();
        s.parallel.global_batch = 1;
        s.model.seq_len = 1;
        let toy = validate(s).unwrap();
        assert_eq!(tgs(1.0, &toy, 1).unwrap(), 1.0);
        assert!(tgs(0.0, &scn, 32).is_err());
        assert!(tgs(1.0, &scn, 0).is_err());
        assert!(tgs(f64::NAN, &scn, 32).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(CostParams { t_chunk_fixed: -1.0, ..CostParams::default() }.validate().is_err());
        assert!(CostParams { t_base_iter: f64::INFINITY, ..CostParams::default() }.validate().is_err());
        assert!(CostParams::default().validate().is_ok());
    }

    #[test]
    fn report_identity() {
        let (scn, p) = setup();
        let r = report(&scn, &[p], &CostParams::default()).unwrap();
        let row = &r.rows[0];
        let t = row.mean_time.unwrap();
        let lhs = row.tgs.unwrap() * t * r.gpus as f64;
        assert!((lhs - 960.0 * 4096.0).abs() / (960.0 * 4096.0) <= 1e-12);
    }
}
