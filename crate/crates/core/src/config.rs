//! Scenario schema: model architecture, parallel layout and precision/hardware.
//!
//! Field names are descriptive; each also accepts the short symbol used in the
//! usual MoE memory-model notation (`L`, `s`, `h`, `t`, `p`, ...) as an alias when
//! deserializing. A [`Scenario`] is plain data; [`ValidatedScenario`] is the
//! immutable, invariant-checked form every planning routine consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, InvalidReason, Result};

/// Architecture symbols of a decoder-only MoE transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(alias = "L")]
    pub layers: u64,
    #[serde(alias = "s")]
    pub seq_len: u64,
    #[serde(alias = "h")]
    pub hidden: u64,
    #[serde(alias = "a")]
    pub heads: u64,
    #[serde(alias = "h_d", default = "defaults::head_dim")]
    pub head_dim: u64,
    #[serde(alias = "k_a", default = "defaults::kv_heads")]
    pub kv_heads: u64,
    #[serde(alias = "g_d")]
    pub dense_intermediate: u64,
    #[serde(alias = "g_e")]
    pub expert_intermediate: u64,
    /// Router output width; the stored router logits are `s·e_n` elements.
    #[serde(alias = "e_n", default = "defaults::router_dim")]
    pub router_dim: u64,
    #[serde(alias = "t_k")]
    pub top_k: u64,
    #[serde(alias = "V")]
    pub vocab: u64,
    #[serde(alias = "d_l")]
    pub dense_layers: u64,
    #[serde(alias = "E", default = "defaults::num_experts")]
    pub num_experts: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecomputeMode {
    /// Activations of in-flight micro-batches are all kept.
    None,
    /// Full activation recomputation; one layer input per layer is resident.
    Full,
    /// Full recomputation plus chunk-level recompute of the MoE segment.
    Chunked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelEnv {
    #[serde(alias = "t")]
    pub tp: u64,
    #[serde(alias = "p")]
    pub pp: u64,
    #[serde(alias = "c")]
    pub cp: u64,
    #[serde(alias = "e")]
    pub ep: u64,
    #[serde(alias = "d")]
    pub dp: u64,
    #[serde(alias = "l")]
    pub layers_per_stage: u64,
    #[serde(alias = "v")]
    pub virtual_stages: u64,
    #[serde(alias = "b")]
    pub micro_batch: u64,
    #[serde(alias = "g_bs")]
    pub global_batch: u64,
    /// Zero-based pipeline stage the estimate is made for.
    #[serde(alias = "r_pp", default)]
    pub pp_rank: u64,
    #[serde(default = "defaults::recompute_mode")]
    pub recompute_mode: RecomputeMode,
    /// GPU count `N` used for tokens/GPU/s; `t·p·c·d` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world_size: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAndHardware {
    /// `D_t`: bytes per stored activation element.
    #[serde(alias = "D_t")]
    pub activation_bytes: u64,
    #[serde(alias = "D_t_para")]
    pub param_bytes: u64,
    #[serde(alias = "D_t_grad")]
    pub grad_bytes: u64,
    /// Bytes per optimizer element; static memory charges four of them per parameter.
    #[serde(alias = "D_t_opt")]
    pub optim_bytes: u64,
    #[serde(alias = "M_GPU")]
    pub gpu_memory: u64,
    /// Fraction of `gpu_memory` available to the model.
    pub alpha: f64,
}

/// Unvalidated scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub model: ModelConfig,
    pub parallel: ParallelEnv,
    pub hardware: PrecisionAndHardware,
}

/// Defaults for quantities the reference model table leaves unstated.
pub mod defaults {
    use super::RecomputeMode;

    pub fn head_dim() -> u64 {
        128
    }
    pub fn kv_heads() -> u64 {
        128
    }
    pub fn router_dim() -> u64 {
        256
    }
    pub fn num_experts() -> u64 {
        256
    }
    pub fn recompute_mode() -> RecomputeMode {
        RecomputeMode::Full
    }
}

/// A scenario whose invariants have been checked. Immutable; the only way to
/// change it is through the `with_*` constructors, which revalidate.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ValidatedScenario(Scenario);

impl ValidatedScenario {
    pub fn model(&self) -> &ModelConfig {
        &self.0.model
    }

    pub fn parallel(&self) -> &ParallelEnv {
        &self.0.parallel
    }

    pub fn hardware(&self) -> &PrecisionAndHardware {
        &self.0.hardware
    }

    pub fn as_scenario(&self) -> &Scenario {
        &self.0
    }

    pub fn into_scenario(self) -> Scenario {
        self.0
    }

    /// Same scenario evaluated for another pipeline stage.
    pub fn with_stage(&self, pp_rank: u64) -> Result<Self> {
        let mut s = self.0.clone();
        s.parallel.pp_rank = pp_rank;
        validate(s)
    }

    pub fn with_recompute(&self, mode: RecomputeMode) -> Self {
        let mut s = self.0.clone();
        s.parallel.recompute_mode = mode;
        ValidatedScenario(s)
    }

    /// MoE layers are the ones past the leading dense layers.
    pub fn moe_layers(&self) -> u64 {
        self.0.model.layers - self.0.model.dense_layers
    }

    /// Pipeline stage hosting global layer `layer` under interleaved placement:
    /// model chunk `layer / l` lives on stage `chunk mod p`.
    pub fn stage_of_layer(&self, layer: u64) -> u64 {
        (layer / self.0.parallel.layers_per_stage) % self.0.parallel.pp
    }

    /// `N` in tokens/GPU/s.
    pub fn world_size(&self) -> u64 {
        let p = &self.0.parallel;
        p.world_size.unwrap_or(p.tp * p.pp * p.cp * p.dp)
    }

    /// Usable bytes, `floor(alpha · M_GPU)`.
    pub fn capacity_bytes(&self) -> u64 {
        let hw = &self.0.hardware;
        libm::floor(hw.alpha * hw.gpu_memory as f64) as u64
    }
}

fn positive(field: &'static str, v: u64) -> Result<()> {
    if v == 0 {
        Err(Error::Invalid { field, reason: InvalidReason::NotPositive })
    } else {
        Ok(())
    }
}

fn byte_width(field: &'static str, v: u64) -> Result<()> {
    match v {
        1 | 2 | 4 | 8 => Ok(()),
        _ => Err(Error::Invalid { field, reason: InvalidReason::ByteWidth(v) }),
    }
}

/// Check every invariant; the first violation is reported.
pub fn validate(scn: Scenario) -> Result<ValidatedScenario> {
    let m = &scn.model;
    for (field, v) in [
        ("model.layers", m.layers),
        ("model.seq_len", m.seq_len),
        ("model.hidden", m.hidden),
        ("model.heads", m.heads),
        ("model.head_dim", m.head_dim),
        ("model.kv_heads", m.kv_heads),
        ("model.dense_intermediate", m.dense_intermediate),
        ("model.expert_intermediate", m.expert_intermediate),
        ("model.router_dim", m.router_dim),
        ("model.top_k", m.top_k),
        ("model.vocab", m.vocab),
        ("model.dense_layers", m.dense_layers),
        ("model.num_experts", m.num_experts),
    ] {
        positive(field, v)?;
    }
    if m.top_k > m.num_experts {
        return Err(Error::Invalid {
            field: "model.top_k",
            reason: InvalidReason::TopKExceedsExperts,
        });
    }
    if m.dense_layers > m.layers {
        return Err(Error::Invalid {
            field: "model.dense_layers",
            reason: InvalidReason::DenseLayersExceedLayers,
        });
    }
    if m.kv_heads > m.heads {
        return Err(Error::Invalid {
            field: "model.kv_heads",
            reason: InvalidReason::KvHeadsExceedHeads,
        });
    }

    let p = &scn.parallel;
    for (field, v) in [
        ("parallel.tp", p.tp),
        ("parallel.pp", p.pp),
        ("parallel.cp", p.cp),
        ("parallel.ep", p.ep),
        ("parallel.dp", p.dp),
        ("parallel.layers_per_stage", p.layers_per_stage),
        ("parallel.virtual_stages", p.virtual_stages),
        ("parallel.micro_batch", p.micro_batch),
        ("parallel.global_batch", p.global_batch),
    ] {
        positive(field, v)?;
    }
    if let Some(n) = p.world_size {
        positive("parallel.world_size", n)?;
    }
    if p.pp_rank >= p.pp {
        return Err(Error::Invalid {
            field: "parallel.pp_rank",
            reason: InvalidReason::RankOutOfRange { rank: p.pp_rank, pp: p.pp },
        });
    }
    let placed = p
        .layers_per_stage
        .checked_mul(p.pp)
        .and_then(|x| x.checked_mul(p.virtual_stages));
    if placed != Some(m.layers) {
        return Err(Error::Invalid {
            field: "parallel.layers_per_stage",
            reason: InvalidReason::StageLayout {
                layers_per_stage: p.layers_per_stage,
                pp: p.pp,
                virtual_stages: p.virtual_stages,
                layers: m.layers,
            },
        });
    }

    let hw = &scn.hardware;
    byte_width("hardware.activation_bytes", hw.activation_bytes)?;
    byte_width("hardware.param_bytes", hw.param_bytes)?;
    byte_width("hardware.grad_bytes", hw.grad_bytes)?;
    byte_width("hardware.optim_bytes", hw.optim_bytes)?;
    positive("hardware.gpu_memory", hw.gpu_memory)?;
    if !(hw.alpha > 0.0 && hw.alpha <= 1.0) {
        return Err(Error::Invalid {
            field: "hardware.alpha",
            reason: InvalidReason::AlphaOutOfRange(hw.alpha),
        });
    }
    Ok(ValidatedScenario(scn))
}

impl TryFrom<Scenario> for ValidatedScenario {
    type Error = Error;

    fn try_from(scn: Scenario) -> Result<Self> {
        validate(scn)
    }
}

/// Ready-made scenarios used by tests, examples and the CLI.
pub mod presets {
    use super::*;

    /// The small configuration used for hand-checked memory arithmetic:
    /// `s=8, h=4, a=2, h_d=2, k_a=1, e_n=4, g_e=8`, `D_t=2`, `b=1`, `t=c=1`,
    /// full recomputation, 10 000 usable bytes.
    pub fn toy() -> Scenario {
        Scenario {
            model: ModelConfig {
                layers: 4,
                seq_len: 8,
                hidden: 4,
                heads: 2,
                head_dim: 2,
                kv_heads: 1,
                dense_intermediate: 8,
                expert_intermediate: 8,
                router_dim: 4,
                top_k: 2,
                vocab: 16,
                dense_layers: 1,
                num_experts: 4,
            },
            parallel: ParallelEnv {
                tp: 1,
                pp: 2,
                cp: 1,
                ep: 2,
                dp: 1,
                layers_per_stage: 2,
                virtual_stages: 1,
                micro_batch: 1,
                global_batch: 4,
                pp_rank: 0,
                recompute_mode: RecomputeMode::Full,
                world_size: None,
            },
            hardware: PrecisionAndHardware {
                activation_bytes: 2,
                param_bytes: 2,
                grad_bytes: 2,
                optim_bytes: 4,
                gpu_memory: 10_000,
                alpha: 1.0,
            },
        }
    }

    /// Reduced-layer DeepSeek-V3-like model with 16 layers on 4 stages, EP 32,
    /// BF16, on 64 GiB GPUs. `head_dim`, `kv_heads`, `router_dim` and
    /// `num_experts` are assumed (128, 128, 256, 256); `alpha = 0.95`.
    pub fn model_i() -> Scenario {
        Scenario {
            model: ModelConfig {
                layers: 16,
                seq_len: 4096,
                hidden: 7168,
                heads: 128,
                head_dim: defaults::head_dim(),
                kv_heads: defaults::kv_heads(),
                dense_intermediate: 18432,
                expert_intermediate: 2048,
                router_dim: defaults::router_dim(),
                top_k: 8,
                vocab: 129280,
                dense_layers: 3,
                num_experts: defaults::num_experts(),
            },
            parallel: ParallelEnv {
                tp: 1,
                pp: 4,
                cp: 1,
                ep: 32,
                dp: 1,
                layers_per_stage: 4,
                virtual_stages: 1,
                micro_batch: 1,
                global_batch: 960,
                pp_rank: 0,
                recompute_mode: RecomputeMode::Full,
                world_size: Some(32),
            },
            hardware: PrecisionAndHardware {
                activation_bytes: 2,
                param_bytes: 2,
                grad_bytes: 2,
                optim_bytes: 2,
                gpu_memory: 64 << 30,
                alpha: 0.95,
            },
        }
    }

    /// Same as [`model_i`] with 8 layers (two per stage).
    pub fn model_ii() -> Scenario {
        let mut s = model_i();
        s.model.layers = 8;
        s.parallel.layers_per_stage = 2;
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn desk() -> Scenario {
        let mut s = presets::toy();
        s.model.layers = 16;
        s.parallel.pp = 4;
        s.parallel.layers_per_stage = 4;
        s
    }

    #[test]
    fn desk_config_validates() {
        let v = validate(desk()).unwrap();
        assert_eq!(v.model().layers, 16);
        assert_eq!(v.moe_layers(), 15);
    }

    #[test]
    fn stage_layout_mismatch() {
        let mut s = desk();
        s.parallel.layers_per_stage = 3;
        let err = validate(s).unwrap_err();
        assert!(err.to_string().contains("l·p·v ≠ L"), "{err}");
    }

    #[test]
    fn alpha_out_of_range() {
        let mut s = desk();
        s.hardware.alpha = 1.2;
        let err = validate(s).unwrap_err();
        assert!(err.to_string().contains("alpha out of range"));
        let mut s = desk();
        s.hardware.alpha = 0.0;
        assert!(validate(s).is_err());
        let mut s = desk();
        s.hardware.alpha = f64::NAN;
        assert!(validate(s).is_err());
    }

    #[test]
    fn first_violation_named() {
        let mut s = desk();
        s.model.hidden = 0;
        s.parallel.tp = 0;
        match validate(s).unwrap_err() {
            Error::Invalid { field, reason } => {
                assert_eq!(field, "model.hidden");
                assert_eq!(reason, InvalidReason::NotPositive);
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn cross_field_invariants() {
        let mut s = desk();
        s.model.top_k = 5;
        assert!(matches!(
            validate(s),
            Err(Error::Invalid { reason: InvalidReason::TopKExceedsExperts, .. })
        ));
        let mut s = desk();
        s.model.kv_heads = 3;
        assert!(matches!(
            validate(s),
            Err(Error::Invalid { reason: InvalidReason::KvHeadsExceedHeads, .. })
        ));
        let mut s = desk();
        s.parallel.pp_rank = 4;
        assert!(matches!(
            validate(s),
            Err(Error::Invalid { reason: InvalidReason::RankOutOfRange { .. }, .. })
        ));
        let mut s = desk();
        s.hardware.grad_bytes = 3;
        assert!(matches!(
            validate(s),
            Err(Error::Invalid { reason: InvalidReason::ByteWidth(3), .. })
        ));
    }

    #[test]
    fn validate_is_pure() {
        assert_eq!(validate(desk()).unwrap(), validate(desk()).unwrap());
    }

    #[test]
    fn presets_validate() {
        validate(presets::toy()).unwrap();
        let m1 = validate(presets::model_i()).unwrap();
        validate(presets::model_ii()).unwrap();
        assert_eq!(m1.world_size(), 32);
        assert_eq!(m1.moe_layers(), 13);
    }

    #[test]
    fn interleaved_stage_placement() {
        let mut s = desk();
        s.parallel.layers_per_stage = 2;
        s.parallel.virtual_stages = 2;
        let v = validate(s).unwrap();
        let stages: alloc::vec::Vec<u64> = (0..16).map(|g| v.stage_of_layer(g)).collect();
        assert_eq!(stages, [0, 0, 1, 1, 2, 2, 3, 3, 0, 0, 1, 1, 2, 2, 3, 3]);
    }
}
