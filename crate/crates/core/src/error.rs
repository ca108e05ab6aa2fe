use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Every failure the planning core can report.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A scenario field violates one of its invariants.
    Invalid { field: &'static str, reason: InvalidReason },
    /// Byte arithmetic left the representable range.
    Overflow(&'static str),
    /// More token copies than the EP group can physically dispatch to one GPU.
    RoutingExceedsPeak { s_prime: u64, limit: u64 },
    /// Static memory alone exceeds the usable budget; no chunking can help.
    StaticInfeasible { static_bytes: u64, capacity: u64 },
    /// `c = ceil(s'' / s'_max)` is undefined for a non-positive bound.
    NonPositiveBound(i64),
    /// Bad distribution parameters for the routing generator.
    Distribution(&'static str),
    /// Two operands disagree in shape.
    Shape { what: &'static str, expected: usize, found: usize },
    /// A value went NaN or infinite inside the kernel.
    NonFinite(&'static str),
    /// Backward was called without the activations a saving forward keeps.
    MissingSavedActivations,
    /// Trace does not cover the scenario's MoE layers.
    TraceMismatch { what: &'static str, expected: usize, found: usize },
    /// Threshold list unusable.
    Bins(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InvalidReason {
    NotPositive,
    TopKExceedsExperts,
    DenseLayersExceedLayers,
    KvHeadsExceedHeads,
    StageLayout { layers_per_stage: u64, pp: u64, virtual_stages: u64, layers: u64 },
    RankOutOfRange { rank: u64, pp: u64 },
    ByteWidth(u64),
    AlphaOutOfRange(f64),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Invalid { field, reason } => match reason {
                InvalidReason::NotPositive => write!(f, "{field}: must be strictly positive"),
                InvalidReason::TopKExceedsExperts => {
                    write!(f, "{field}: top-k exceeds the number of experts")
                }
                InvalidReason::DenseLayersExceedLayers => {
                    write!(f, "{field}: dense layers exceed model layers")
                }
                InvalidReason::KvHeadsExceedHeads => {
                    write!(f, "{field}: kv heads exceed attention heads")
                }
                InvalidReason::StageLayout { layers_per_stage, pp, virtual_stages, layers } => write!(
                    f,
                    "{field}: l·p·v ≠ L ({layers_per_stage}·{pp}·{virtual_stages} ≠ {layers})"
                ),
                InvalidReason::RankOutOfRange { rank, pp } => {
                    write!(f, "{field}: pipeline rank {rank} not in [0, {pp})")
                }
                InvalidReason::ByteWidth(w) => {
                    write!(f, "{field}: byte width {w} not in {{1, 2, 4, 8}}")
                }
                InvalidReason::AlphaOutOfRange(a) => {
                    write!(f, "{field}: alpha out of range ({a} not in (0, 1])")
                }
            },
            Error::Overflow(what) => write!(f, "arithmetic overflow computing {what}"),
            Error::RoutingExceedsPeak { s_prime, limit } => write!(
                f,
                "s' = {s_prime} exceeds the physical routing limit e·s·t_k = {limit}"
            ),
            Error::StaticInfeasible { static_bytes, capacity } => write!(
                f,
                "static memory {static_bytes} B exceeds usable capacity {capacity} B"
            ),
            Error::NonPositiveBound(v) => write!(f, "s'_max = {v} is not positive"),
            Error::Distribution(msg) => write!(f, "invalid distribution parameters: {msg}"),
            Error::Shape { what, expected, found } => {
                write!(f, "shape mismatch in {what}: expected {expected}, found {found}")
            }
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::MissingSavedActivations => {
                f.write_str("backward requires activations saved by forward")
            }
            Error::TraceMismatch { what, expected, found } => {
                write!(f, "trace {what} mismatch: expected {expected}, found {found}")
            }
            Error::Bins(msg) => write!(f, "invalid bins: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
