//! Plain-text tables for standard output.

use std::collections::BTreeMap;
use std::fmt::Write;

use memfine_core::mact::{ChunkPlan, MethodEstimate};
use memfine_core::routing_sim::LayerStats;
use memfine_core::throughput::ThroughputReport;
use serde::Serialize;

/// Binary units with one decimal; plain bytes below 1 KiB.
pub fn bytes(n: u64) -> String {
    const UNITS: [&str; 4] = ["KiB", "MiB", "GiB", "TiB"];
    if n < 1024 {
        return format!("{n} B");
    }
    let mut v = n as f64 / 1024.0;
    let mut u = 0;
    while v >= 1024.0 && u + 1 < UNITS.len() {
        v /= 1024.0;
        u += 1;
    }
    format!("{v:.1} {}", UNITS[u])
}

/// Left-aligned first column, right-aligned rest.
fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        for (i, (c, w)) in cells.zip(&width).enumerate() {
            let pad = w - c.chars().count();
            if i == 0 {
                out.push_str(c);
                out.push_str(&" ".repeat(pad));
            } else {
                out.push_str("  ");
                out.push_str(&" ".repeat(pad));
                out.push_str(c);
            }
        }
        out.push('\n');
    };
    line(&mut header.iter().copied());
    let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut rule.iter().map(String::as_str));
    for r in rows {
        line(&mut r.iter().map(String::as_str));
    }
    out
}

pub fn estimate_table(rows: &[MethodEstimate]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let e = &r.estimate;
            vec![
                r.method.to_string(),
                e.stage.to_string(),
                format!("{}{}", r.chunks, if r.clamped { "!" } else { "" }),
                r.chunk_tokens.to_string(),
                bytes(e.static_bytes),
                bytes(e.activation_bytes),
                bytes(e.total_bytes()),
                bytes(e.capacity_bytes),
                if e.feasible { "✓" } else { "×" }.to_string(),
            ]
        })
        .collect();
    let mut out = table(
        &["method", "stage", "c_selected", "s'/chunk", "static", "active", "all", "budget", "training"],
        &body,
    );
    if rows.iter().any(|r| r.clamped) {
        out.push_str("! chunk count clamped to the largest bin\n");
    }
    out
}

/// Per-layer aggregate of a plan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerPlanSummary {
    pub layer: u64,
    pub stage: u64,
    pub s_prime_max: i64,
    pub max_s_double_prime: u64,
    pub mean_c_selected: f64,
    /// Cell count per selected chunk count.
    pub histogram: BTreeMap<u64, usize>,
    pub clamped: usize,
    pub infeasible: usize,
}

pub fn summarize_plan(plan: &ChunkPlan) -> Vec<LayerPlanSummary> {
    (0..plan.layers)
        .filter_map(|l| {
            let cells: Vec<_> = (0..plan.iterations).map(|it| plan.cell(it, l)).collect();
            let first = cells.first()?;
            let mut histogram = BTreeMap::new();
            for c in &cells {
                *histogram.entry(c.c_selected).or_insert(0) += 1;
            }
            Some(LayerPlanSummary {
                layer: first.layer,
                stage: first.stage,
                s_prime_max: first.s_prime_max,
                max_s_double_prime: cells.iter().map(|c| c.s_double_prime).max().unwrap_or(0),
                mean_c_selected: cells.iter().map(|c| c.c_selected as f64).sum::<f64>() / cells.len() as f64,
                histogram,
                clamped: cells.iter().filter(|c| c.clamped).count(),
                infeasible: cells.iter().filter(|c| !c.feasible).count(),
            })
        })
        .collect()
}

pub fn plan_table(plan: &ChunkPlan) -> String {
    let rows: Vec<Vec<String>> = summarize_plan(plan)
        .iter()
        .map(|s| {
            let hist = s.histogram.iter().map(|(c, n)| format!("{c}:{n}")).collect::<Vec<_>>().join(" ");
            vec![
                s.layer.to_string(),
                s.stage.to_string(),
                s.s_prime_max.to_string(),
                s.max_s_double_prime.to_string(),
                format!("{:.2}", s.mean_c_selected),
                hist,
                s.clamped.to_string(),
                s.infeasible.to_string(),
            ]
        })
        .collect();
    let mut out = format!("plan: {} ({} iterations)\n", plan.strategy.name(), plan.iterations);
    out.push_str(&table(
        &["layer", "stage", "s'_max", "max s''", "mean c", "c histogram", "clamped", "infeasible"],
        &rows,
    ));
    out
}

pub fn stats_table(stats: &[LayerStats]) -> String {
    let rows: Vec<Vec<String>> = stats
        .iter()
        .map(|s| {
            vec![
                s.layer.to_string(),
                s.min.to_string(),
                s.median.to_string(),
                s.p99.to_string(),
                s.max.to_string(),
                format!("{:.1}", s.mean),
            ]
        })
        .collect();
    table(&["layer", "min", "median", "p99", "max", "mean"], &rows)
}

pub fn throughput_table(report: &ThroughputReport) -> String {
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.method.to_string(),
                r.mean_time.map_or("-".into(), |t| format!("{t:.4}")),
                r.tgs.map_or("-".into(), |g| format!("{g:.1}")),
            ]
        })
        .collect();
    let mut out = table(&["method", "mean T (s)", "TGS"], &rows);
    let _ = writeln!(out, "N = {} GPUs, {} tokens per iteration", report.gpus, report.tokens);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alignment() {
        let t = table(&["a", "bb"], &[vec!["xyz".into(), "1".into()]]);
        assert_eq!(t, "a    bb\n---  --\nxyz   1\n");
    }

    #[test]
    fn byte_units() {
        assert_eq!(bytes(1000), "1000 B");
        assert_eq!(bytes(13_200), "12.9 KiB");
        assert_eq!(bytes(64 << 30), "64.0 GiB");
    }
}
