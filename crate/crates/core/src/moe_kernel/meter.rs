use alloc::vec::Vec;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MemClass {
    /// Layer-boundary tensors: input, output and their gradients.
    Resident,
    /// Buffers whose size scales with routed token copies.
    TokenDependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MeterOp {
    Alloc,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MeterEvent {
    pub tag: &'static str,
    pub class: MemClass,
    pub op: MeterOp,
    pub bytes: u64,
}

/// Byte-accurate ledger of activation buffers held by one kernel invocation.
///
/// Buffers are charged at `element_bytes` per element regardless of the kernel's
/// arithmetic precision, so the meter can model BF16 storage of an `f64` run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ActivationMeter {
    element_bytes: u64,
    current: u64,
    peak: u64,
    token_current: u64,
    token_peak: u64,
    ledger: Vec<MeterEvent>,
}

impl ActivationMeter {
    pub fn new(element_bytes: u64) -> Self {
        Self { element_bytes, current: 0, peak: 0, token_current: 0, token_peak: 0, ledger: Vec::new() }
    }

    pub fn element_bytes(&self) -> u64 {
        self.element_bytes
    }

    pub fn current_bytes(&self) -> u64 {
        self.current
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak
    }

    /// Peak of token-dependent buffers alone.
    pub fn token_peak_bytes(&self) -> u64 {
        self.token_peak
    }

    pub fn ledger(&self) -> &[MeterEvent] {
        &self.ledger
    }

    pub fn alloc(&mut self, tag: &'static str, class: MemClass, elements: usize) {
        let bytes = elements as u64 * self.element_bytes;
        self.current += bytes;
        self.peak = self.peak.max(self.current);
        if class == MemClass::TokenDependent {
            self.token_current += bytes;
            self.token_peak = self.token_peak.max(self.token_current);
        }
        self.ledger.push(MeterEvent { tag, class, op: MeterOp::Alloc, bytes });
    }

    /// Release a buffer charged earlier.
    ///
    /// # Panics
    /// If more is released than is currently held.
    pub fn free(&mut self, tag: &'static str, class: MemClass, elements: usize) {
        let bytes = elements as u64 * self.element_bytes;
        self.current = self.current.checked_sub(bytes).expect("meter released more than held");
        if class == MemClass::TokenDependent {
            self.token_current -= bytes;
        }
        self.ledger.push(MeterEvent { tag, class, op: MeterOp::Free, bytes });
    }

    /// Recompute `(current, peak)` from the ledger alone.
    pub fn replay(&self) -> (u64, u64) {
        let mut cur: i128 = 0;
        let mut peak: i128 = 0;
        for e in &self.ledger {
            match e.op {
                MeterOp::Alloc => cur += i128::from(e.bytes),
                MeterOp::Free => cur -= i128::from(e.bytes),
            }
            peak = peak.max(cur);
        }
        (cur as u64, peak as u64)
    }
}
