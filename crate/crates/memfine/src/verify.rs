//! Kernel self-check: chunked execution against the single pass for every chunk
//! count, and the analytic backward against central finite differences.

use clap::ValueEnum;
use memfine_core::moe_kernel::check::{self, Instance, InstanceLimits};
use serde::Serialize;

pub const EQUIVALENCE_TOL: f64 = 1e-12;
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;
pub const MAX_CHUNKS: usize = 8;
const FD_WEIGHT_SAMPLES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Default,
    Large,
}

impl Size {
    /// Bounds for the equivalence instances.
    pub fn limits(self) -> InstanceLimits {
        match self {
            Size::Small => InstanceLimits { tokens: 16, hidden: 8, intermediate: 16, experts: 4, top_k: 2 },
            Size::Default => InstanceLimits::default(),
            Size::Large => InstanceLimits { tokens: 128, hidden: 32, intermediate: 64, experts: 16, top_k: 4 },
        }
    }

    /// Bounds for the finite-difference instances, which cost two forwards per coordinate.
    pub fn fd_limits(self) -> InstanceLimits {
        match self {
            Size::Small => InstanceLimits { tokens: 6, hidden: 4, intermediate: 8, experts: 3, top_k: 2 },
            Size::Default => InstanceLimits { tokens: 16, hidden: 8, intermediate: 16, experts: 4, top_k: 2 },
            Size::Large => InstanceLimits { tokens: 32, hidden: 16, intermediate: 32, experts: 8, top_k: 4 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifyOptions {
    pub size: Size,
    pub seeds: u64,
    pub first_seed: u64,
    /// Perturb the chunked side so the harness must report a failure.
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { size: Size::Default, seeds: 20, first_seed: 0, inject_fault: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub forward_exact: bool,
    pub x_grad_rel: f64,
    pub w_grad_rel: f64,
    pub fd_checked: usize,
    pub fd_max_rel: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifySummary {
    pub options: VerifyOptions,
    pub results: Vec<SeedResult>,
}

impl VerifySummary {
    pub fn failures(&self) -> impl Iterator<Item = &SeedResult> {
        self.results.iter().filter(|r| r.failure.is_some())
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

fn faulty(inst: &Instance) -> Instance {
    let mut c = inst.clone();
    c.batch.data_mut().as_mut_slice()[0] += 1e-3;
    c
}

pub fn check_seed(seed: u64, opts: &VerifyOptions) -> SeedResult {
    let mut r = SeedResult {
        seed,
        forward_exact: true,
        x_grad_rel: 0.0,
        w_grad_rel: 0.0,
        fd_checked: 0,
        fd_max_rel: 0.0,
        failure: None,
    };
    let inst = check::random_instance(seed, opts.size.limits());
    let candidate = if opts.inject_fault { faulty(&inst) } else { inst.clone() };
    for chunks in 1..=MAX_CHUNKS {
        match check::equivalence_against(&inst, &candidate, chunks) {
            Ok(e) => {
                r.forward_exact &= e.forward_exact;
                r.x_grad_rel = r.x_grad_rel.max(e.x_grad_rel);
                r.w_grad_rel = r.w_grad_rel.max(e.w_grad_rel);
                if r.failure.is_none() {
                    if !e.forward_exact {
                        r.failure = Some(format!("chunked forward differs from single pass at c={chunks}"));
                    } else if e.x_grad_rel.max(e.w_grad_rel) > EQUIVALENCE_TOL || e.x_grad_rel.is_nan() || e.w_grad_rel.is_nan() {
                        r.failure = Some(format!(
                            "chunked gradients differ at c={chunks}: x {:.3e}, w {:.3e}",
                            e.x_grad_rel, e.w_grad_rel
                        ));
                    }
                }
            }
            Err(e) => {
                r.failure.get_or_insert(format!("c={chunks}: {e}"));
            }
        }
    }
    let fd_inst = check::random_instance(seed ^ 0x5eed_fd00, opts.size.fd_limits());
    match check::finite_difference(&fd_inst, FD_STEP, FD_WEIGHT_SAMPLES, seed) {
        Ok(g) => {
            r.fd_checked = g.checked;
            r.fd_max_rel = g.max_rel_error;
            if !(g.max_rel_error <= FD_TOL) {
                r.failure.get_or_insert(format!("finite-difference error {:.3e} > {FD_TOL:e}", g.max_rel_error));
            }
        }
        Err(e) => {
            r.failure.get_or_insert(format!("finite differences: {e}"));
        }
    }
    r
}

pub fn run(opts: &VerifyOptions) -> VerifySummary {
    let results = (opts.first_seed..opts.first_seed + opts.seeds).map(|s| check_seed(s, opts)).collect();
    VerifySummary { options: *opts, results }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_passes() {
        let s = run(&VerifyOptions { size: Size::Small, seeds: 3, ..Default::default() });
        assert!(s.passed(), "{:?}", s.results);
        assert!(s.results.iter().all(|r| r.fd_checked > 0));
    }

    #[test]
    fn fault_detected() {
        let s = run(&VerifyOptions { size: Size::Small, seeds: 2, inject_fault: true, ..Default::default() });
        assert_eq!(s.failures().count(), 2);
    }
}
