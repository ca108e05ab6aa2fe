//! Analytical memory cost model for one GPU of an MoE training job.
//!
//! Static memory is parameters + gradients + optimizer states:
//!
//! ```text
//! M_sta = (D_para + D_grad + 4·D_opt) · v · l · Σ S_i
//! ```
//!
//! Activation memory follows the per-layer stored-activation table, scaled by the
//! pipeline multiplier `m_g` and sharded over `t·c`:
//!
//! ```text
//! M_act = m_g/(t·c) · D_t · b · ( s·(5h + a·h_d + 2·k_a·h_d + e_n) + s'·(2h + 2·g_e) )
//! ```
//!
//! All byte math is exact integer arithmetic on `u128`. Each table row is
//! converted to bytes as `floor(m_g · D_t · b · elements / (t·c))`, and the
//! activation total is the sum of those rows.

use alloc::vec::Vec;
use serde::Serialize;

use crate::config::{ParallelEnv, PrecisionAndHardware, RecomputeMode, ValidatedScenario};
use crate::error::{Error, Result};

/// Number of layers whose activations are simultaneously resident on a stage.
///
/// Full (and chunked, which implies full) recomputation keeps one; otherwise the
/// interleaved 1F1B warm-up depth `v·p + p − 2·r_pp − 1`, clamped to at least 1.
pub fn m_g(env: &ParallelEnv) -> u64 {
    match env.recompute_mode {
        RecomputeMode::Full | RecomputeMode::Chunked => 1,
        RecomputeMode::None => {
            let depth = i128::from(env.virtual_stages) * i128::from(env.pp) + i128::from(env.pp)
                - 2 * i128::from(env.pp_rank)
                - 1;
            depth.max(1) as u64
        }
    }
}

/// One stored-activation row of a MoE transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ActivationTerm {
    pub module: &'static str,
    pub input_id: u8,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ActivationEstimate {
    pub m_g: u64,
    pub s_prime: u64,
    pub terms: Vec<ActivationTerm>,
    /// Rows that scale with `s` (inputs 1–10).
    pub attention_bytes: u64,
    /// Rows that scale with `s'` (inputs 11–13).
    pub moe_bytes: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StaticMemory {
    pub params: u64,
    pub grads: u64,
    pub optimizer: u64,
    pub total: u64,
}

/// Parameter count of one weighted module, per layer, and how many layers of
/// the stage carry it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModuleParams {
    pub name: &'static str,
    pub per_layer: u64,
    pub layers: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryEstimate {
    pub stage: u64,
    pub static_memory: StaticMemory,
    pub static_bytes: u64,
    pub activation_bytes: u64,
    pub activation_terms: Vec<ActivationTerm>,
    pub m_g: u64,
    pub s_prime: u64,
    pub capacity_bytes: u64,
    pub feasible: bool,
    pub headroom_bytes: i64,
}

impl MemoryEstimate {
    pub fn total_bytes(&self) -> u64 {
        self.static_bytes + self.activation_bytes
    }
}

fn narrow(v: u128, what: &'static str) -> Result<u64> {
    u64::try_from(v).map_err(|_| Error::Overflow(what))
}

fn mul(a: u128, b: u128, what: &'static str) -> Result<u128> {
    a.checked_mul(b).ok_or(Error::Overflow(what))
}

fn sum<I: IntoIterator<Item = u64>>(it: I, what: &'static str) -> Result<u64> {
    it.into_iter()
        .try_fold(0u64, |acc, x| acc.checked_add(x))
        .ok_or(Error::Overflow(what))
}

/// Static bytes for `Σ S_i` parameters repeated over `v·l` layers.
///
/// `module_sizes` are per-layer parameter counts already divided by tensor
/// parallel sharding.
pub fn static_memory(scn: &ValidatedScenario, module_sizes: &[u64]) -> Result<StaticMemory> {
    let env = scn.parallel();
    let layers = u128::from(env.virtual_stages) * u128::from(env.layers_per_stage);
    let params: u128 = module_sizes.iter().map(|&s| u128::from(s)).sum();
    let elems = mul(layers, params, "static memory")?;
    split_static(elems, scn.hardware())
}

fn split_static(elems: u128, hw: &PrecisionAndHardware) -> Result<StaticMemory> {
    let params = narrow(mul(elems, hw.param_bytes.into(), "parameters")?, "parameters")?;
    let grads = narrow(mul(elems, hw.grad_bytes.into(), "gradients")?, "gradients")?;
    let optimizer = narrow(
        mul(elems, 4 * u128::from(hw.optim_bytes), "optimizer states")?,
        "optimizer states",
    )?;
    let total = sum([params, grads, optimizer], "static memory")?;
    Ok(StaticMemory { params, grads, optimizer, total })
}

/// Weighted modules resident on pipeline stage `stage`.
///
/// The accounting assumes:
/// - attention: `q` is `h × a·h_d`, `k`/`v` are `h × k_a·h_d`, `o` is `a·h_d × h`,
///   sharded over `t`; two RMS norms of width `h` per layer, unsharded;
/// - dense MLP (first `d_l` layers): gated, `3·h·g_d / t`;
/// - MoE layer: router `h·e_n` (unsharded) plus `ceil(E / e)` local gated experts of
///   `3·h·g_e / t` each;
/// - input embedding `V·h / t` on the stage holding layer 0 and output head
///   `V·h / t` on the stage holding the last layer.
pub fn stage_modules(scn: &ValidatedScenario, stage: u64) -> Vec<ModuleParams> {
    let m = scn.model();
    let env = scn.parallel();
    let t = env.tp;
    let (mut dense, mut moe) = (0, 0);
    for layer in 0..m.layers {
        if scn.stage_of_layer(layer) == stage {
            if layer < m.dense_layers {
                dense += 1;
            } else {
                moe += 1;
            }
        }
    }
    let stage_layers = dense + moe;
    let attn = m.hidden * m.heads * m.head_dim * 2 + m.hidden * m.kv_heads * m.head_dim * 2;
    let local_experts = m.num_experts.div_ceil(env.ep);
    let mut out = alloc::vec![
        ModuleParams { name: "attention", per_layer: attn.div_ceil(t), layers: stage_layers },
        ModuleParams { name: "norm", per_layer: 2 * m.hidden, layers: stage_layers },
        ModuleParams {
            name: "dense_mlp",
            per_layer: (3 * m.hidden * m.dense_intermediate).div_ceil(t),
            layers: dense,
        },
        ModuleParams { name: "router", per_layer: m.hidden * m.router_dim, layers: moe },
        ModuleParams {
            name: "experts",
            per_layer: local_experts * (3 * m.hidden * m.expert_intermediate).div_ceil(t),
            layers: moe,
        },
    ];
    let embed = (m.vocab * m.hidden).div_ceil(t);
    if scn.stage_of_layer(0) == stage {
        out.push(ModuleParams { name: "embedding", per_layer: embed, layers: 1 });
    }
    if scn.stage_of_layer(m.layers - 1) == stage {
        out.push(ModuleParams { name: "output", per_layer: embed, layers: 1 });
    }
    out
}

/// Static bytes of a concrete stage, summing each module over the layers that
/// actually carry it. Equals [`static_memory`] when every layer is identical.
pub fn stage_static_memory(scn: &ValidatedScenario, stage: u64) -> Result<StaticMemory> {
    let elems = stage_modules(scn, stage).iter().try_fold(0u128, |acc, m| {
        mul(m.per_layer.into(), m.layers.into(), "stage parameters").map(|x| acc + x)
    })?;
    split_static(elems, scn.hardware())
}

/// Element counts of the 14 rows of the stored-activation table for one layer,
/// before the `m_g·D_t·b/(t·c)` scaling.
pub(crate) fn activation_elements(scn: &ValidatedScenario, s_prime: u64) -> [(&'static str, u8, u128); 14] {
    let m = scn.model();
    let s = u128::from(m.seq_len);
    let sp = u128::from(s_prime);
    let h = u128::from(m.hidden);
    let a = u128::from(m.heads);
    let hd = u128::from(m.head_dim);
    let ka = u128::from(m.kv_heads);
    let en = u128::from(m.router_dim);
    let ge = u128::from(m.expert_intermediate);
    [
        ("norm", 1, s * h),
        ("qkv", 2, s * h),
        ("attention", 3, s * a * hd),
        ("attention", 4, s * ka * hd),
        ("attention", 5, s * ka * hd),
        ("o", 6, s * h),
        ("add", 7, 0),
        ("norm", 8, s * h),
        ("router", 9, s * h),
        ("router", 10, s * en),
        ("activated_expert", 11, sp * h),
        ("activated_expert", 12, 2 * sp * ge),
        ("score_mul", 13, sp * h),
        ("add", 14, 0),
    ]
}

/// `m_g · D_t · b` as the common numerator factor.
fn scale(scn: &ValidatedScenario) -> u128 {
    u128::from(m_g(scn.parallel()))
        * u128::from(scn.hardware().activation_bytes)
        * u128::from(scn.parallel().micro_batch)
}

fn shards(scn: &ValidatedScenario) -> u128 {
    u128::from(scn.parallel().tp) * u128::from(scn.parallel().cp)
}

/// Largest physically possible per-GPU copy count, `e·s·t_k`.
pub fn routing_limit(scn: &ValidatedScenario) -> u64 {
    let m = scn.model();
    scn.parallel().ep * m.seq_len * m.top_k
}

/// Per-row activation bytes for one layer receiving `s_prime` token copies.
pub fn activation_memory(scn: &ValidatedScenario, s_prime: u64) -> Result<ActivationEstimate> {
    let limit = routing_limit(scn);
    if s_prime > limit {
        return Err(Error::RoutingExceedsPeak { s_prime, limit });
    }
    let k = scale(scn);
    let tc = shards(scn);
    let mut terms = Vec::with_capacity(14);
    for (module, input_id, elems) in activation_elements(scn, s_prime) {
        let bytes = narrow(mul(k, elems, "activation row")? / tc, "activation row")?;
        terms.push(ActivationTerm { module, input_id, bytes });
    }
    let attention_bytes = sum(terms[..10].iter().map(|t| t.bytes), "activation")?;
    let moe_bytes = sum(terms[10..].iter().map(|t| t.bytes), "activation")?;
    let total = sum([attention_bytes, moe_bytes], "activation")?;
    Ok(ActivationEstimate {
        m_g: m_g(scn.parallel()),
        s_prime,
        terms,
        attention_bytes,
        moe_bytes,
        total,
    })
}

/// The closed form, evaluated with a single division by `t·c`.
///
/// Equals the row sum of [`activation_memory`] whenever `t·c` divides both
/// `s` and `s'` times the scale; otherwise it can exceed it by less than one
/// byte per row.
pub fn activation_closed_form(scn: &ValidatedScenario, s_prime: u64) -> Result<u64> {
    let m = scn.model();
    let h = u128::from(m.hidden);
    let per_token_attn = 5 * h
        + u128::from(m.heads) * u128::from(m.head_dim)
        + 2 * u128::from(m.kv_heads) * u128::from(m.head_dim)
        + u128::from(m.router_dim);
    let per_copy_moe = 2 * h + 2 * u128::from(m.expert_intermediate);
    let inner = mul(u128::from(m.seq_len), per_token_attn, "activation")?
        + mul(u128::from(s_prime), per_copy_moe, "activation")?;
    narrow(mul(scale(scn), inner, "activation")? / shards(scn), "activation")
}

/// Numerator of the `s'`-slope, `m_g·D_t·b·(2h + 2·g_e)`; bytes per copy are this over `t·c`.
pub(crate) fn moe_slope_numerator(scn: &ValidatedScenario) -> u128 {
    let m = scn.model();
    scale(scn) * (2 * u128::from(m.hidden) + 2 * u128::from(m.expert_intermediate))
}

pub(crate) fn shard_count(scn: &ValidatedScenario) -> u128 {
    shards(scn)
}

/// `(feasible, headroom)` for a total against `floor(alpha · M_GPU)`.
pub fn check_capacity(total: u64, capacity: u64) -> (bool, i64) {
    let headroom = i128::from(capacity) - i128::from(total);
    (headroom >= 0, headroom.clamp(i64::MIN.into(), i64::MAX.into()) as i64)
}

/// Whether an estimate fits: `static + activation ≤ alpha · M_GPU`.
pub fn feasibility(est: &MemoryEstimate, hw: &PrecisionAndHardware) -> (bool, i64) {
    let capacity = libm::floor(hw.alpha * hw.gpu_memory as f64) as u64;
    check_capacity(est.total_bytes(), capacity)
}

/// Full estimate for the scenario's own stage with `s_prime` copies resident
/// in the MoE segment. Under chunked recompute pass the per-chunk count.
pub fn estimate(scn: &ValidatedScenario, s_prime: u64) -> Result<MemoryEstimate> {
    let stage = scn.parallel().pp_rank;
    let static_memory = stage_static_memory(scn, stage)?;
    let act = activation_memory(scn, s_prime)?;
    let capacity_bytes = scn.capacity_bytes();
    let (feasible, headroom_bytes) =
        check_capacity(sum([static_memory.total, act.total], "total memory")?, capacity_bytes);
    Ok(MemoryEstimate {
        stage,
        static_memory,
        static_bytes: static_memory.total,
        activation_bytes: act.total,
        activation_terms: act.terms,
        m_g: act.m_g,
        s_prime,
        capacity_bytes,
        feasible,
        headroom_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{presets, validate};

    fn toy() -> ValidatedScenario {
        validate(presets::toy()).unwrap()
    }

    fn env(v: u64, p: u64, r: u64, mode: RecomputeMode) -> ParallelEnv {
        let mut e = presets::toy().parallel;
        e.virtual_stages = v;
        e.pp = p;
        e.pp_rank = r;
        e.recompute_mode = mode;
        e
    }

    #[test]
    fn m_g_schedule() {
        assert_eq!(m_g(&env(1, 4, 0, RecomputeMode::Full)), 1);
        assert_eq!(m_g(&env(1, 4, 0, RecomputeMode::None)), 7);
        assert_eq!(m_g(&env(1, 4, 3, RecomputeMode::None)), 1);
        assert_eq!(m_g(&env(2, 4, 1, RecomputeMode::None)), 9);
        assert_eq!(m_g(&env(1, 4, 0, RecomputeMode::Chunked)), 1);
    }

    #[test]
    fn static_memory_examples() {
        let scn = toy();
        assert_eq!(static_memory(&scn, &[]).unwrap().total, 0);
        assert_eq!(static_memory(&scn, &[0, 0]).unwrap().total, 0);
        // D_para=2, D_grad=2, D_opt=4, v=1, l=2, ΣS=100
        let m = static_memory(&scn, &[60, 40]).unwrap();
        assert_eq!(m, StaticMemory { params: 400, grads: 400, optimizer: 3200, total: 4000 });
    }

    #[test]
    fn static_memory_overflow_is_reported() {
        let scn = toy();
        assert_eq!(static_memory(&scn, &[u64::MAX, u64::MAX]), Err(Error::Overflow("parameters")));
    }

    #[test]
    fn toy_activation_hand_values() {
        let scn = toy();
        let a0 = activation_memory(&scn, 0).unwrap();
        assert_eq!(a0.total, 512);
        assert_eq!(a0.moe_bytes, 0);
        let a16 = activation_memory(&scn, 16).unwrap();
        assert_eq!(a16.total, 1280);
        assert_eq!(a16.attention_bytes, 512);
        assert_eq!(a16.terms.len(), 14);
        assert_eq!(a16.terms[6].bytes, 0);
        assert_eq!(a16.terms[13].bytes, 0);
        assert_eq!(activation_closed_form(&scn, 16).unwrap(), 1280);
    }

    #[test]
    fn routing_limit_enforced() {
        let scn = toy();
        let limit = routing_limit(&scn);
        assert_eq!(limit, 2 * 8 * 2);
        assert!(activation_memory(&scn, limit).is_ok());
        assert_eq!(
            activation_memory(&scn, limit + 1),
            Err(Error::RoutingExceedsPeak { s_prime: limit + 1, limit })
        );
    }

    #[test]
    fn feasibility_boundary_and_headroom() {
        assert_eq!(check_capacity(10_000, 10_000), (true, 0));
        assert_eq!(check_capacity(2000 + 1280, 10_000), (true, 6720));
        assert_eq!(check_capacity(10_001, 10_000), (false, -1));
    }

    #[test]
    fn estimate_combines_parts() {
        let scn = toy();
        let est = estimate(&scn, 16).unwrap();
        assert_eq!(est.activation_bytes, 1280);
        assert_eq!(est.activation_bytes, est.activation_terms.iter().map(|t| t.bytes).sum::<u64>());
        assert_eq!(est.static_bytes, est.static_memory.params + est.static_memory.grads + est.static_memory.optimizer);
        let (ok, head) = feasibility(&est, scn.hardware());
        assert_eq!((ok, head), (est.feasible, est.headroom_bytes));
    }

    #[test]
    fn homogeneous_stage_matches_literal_formula() {
        // All-MoE layers on a middle stage: no embeddings, identical layers.
        let mut s = presets::model_i();
        s.model.dense_layers = 1;
        let scn = validate(s).unwrap();
        let mods = stage_modules(&scn, 1);
        assert!(mods.iter().all(|m| m.layers == 0 || m.layers == 4));
        let per_layer: Vec<u64> = mods.iter().filter(|m| m.layers > 0).map(|m| m.per_layer).collect();
        assert_eq!(
            static_memory(&scn, &per_layer).unwrap(),
            stage_static_memory(&scn, 1).unwrap()
        );
    }

    #[test]
    fn embeddings_on_first_and_last_stage() {
        let scn = validate(presets::model_i()).unwrap();
        let names = |st| stage_modules(&scn, st).iter().map(|m| m.name).collect::<Vec<_>>();
        assert!(names(0).contains(&"embedding"));
        assert!(!names(0).contains(&"output"));
        assert!(names(3).contains(&"output"));
        assert!(!names(1).contains(&"embedding") && !names(1).contains(&"output"));
    }

    #[test]
    fn activation_affine_in_s_prime() {
        let scn = toy();
        let f = |sp| activation_memory(&scn, sp).unwrap().total as i128;
        let slope = (f(10) - f(0)) / 10;
        assert_eq!(slope, 2 * (2 * 4 + 2 * 8));
        assert_eq!(f(30) - f(10), 20 * slope);
    }
}
