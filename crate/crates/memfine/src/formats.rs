//! Versioned columnar files.
//!
//! Every file starts with `# memfine-<kind> v1`, optionally followed by one
//! `# {json}` metadata line, then a CSV header row and data rows.

use std::path::Path;

use memfine_core::mact::{ChunkPlan, MethodEstimate};
use memfine_core::routing_sim::{GeneratorSpec, LayerStats, RoutingTrace};
use memfine_core::throughput::ThroughputReport;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RunError};

pub const TRACE_MAGIC: &str = "# memfine-trace v1";
pub const PLAN_MAGIC: &str = "# memfine-plan v1";
pub const STATS_MAGIC: &str = "# memfine-layer-stats v1";
pub const THROUGHPUT_MAGIC: &str = "# memfine-throughput v1";
pub const ESTIMATE_MAGIC: &str = "# memfine-estimate v1";

const TRACE_HEADER: [&str; 4] = ["iteration", "layer", "gpu", "tokens"];

fn csv_doc<I>(magic: &str, meta: Option<String>, header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut out = String::new();
    out.push_str(magic);
    out.push('\n');
    if let Some(m) = meta {
        out.push_str("# ");
        out.push_str(&m);
        out.push('\n');
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields"));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TraceMeta {
    iterations: usize,
    layers: usize,
    gpus: usize,
    first_layer: u64,
    copies_per_cell: u64,
    micro_batch: u64,
    generator: Option<GeneratorSpec>,
}

pub fn trace_csv(trace: &RoutingTrace) -> String {
    let meta = TraceMeta {
        iterations: trace.iterations,
        layers: trace.layers,
        gpus: trace.gpus,
        first_layer: trace.first_layer,
        copies_per_cell: trace.copies_per_cell,
        micro_batch: trace.micro_batch,
        generator: trace.generator,
    };
    let rows = (0..trace.iterations).flat_map(move |it| {
        (0..trace.layers).flat_map(move |l| {
            (0..trace.gpus).map(move |g| {
                vec![
                    it.to_string(),
                    (trace.first_layer + l as u64).to_string(),
                    g.to_string(),
                    trace.get(it, l, g).to_string(),
                ]
            })
        })
    });
    csv_doc(TRACE_MAGIC, Some(serde_json::to_string(&meta).expect("plain data")), &TRACE_HEADER, rows)
}

/// Parse a trace file; every `(iteration, layer, gpu)` must appear exactly once.
pub fn parse_trace(text: &str, path: &Path) -> Result<RoutingTrace> {
    let err = |m: String| RunError::parse(path, m);
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(TRACE_MAGIC) {
        return Err(err(format!("missing `{TRACE_MAGIC}` header")));
    }
    let meta_line = lines.next().and_then(|l| l.strip_prefix("# ")).ok_or_else(|| err("missing metadata line".into()))?;
    let meta: TraceMeta = serde_json::from_str(meta_line).map_err(|e| err(format!("line 2: {e}")))?;
    let body_start = text.find('\n').and_then(|a| text[a + 1..].find('\n').map(|b| a + b + 2)).unwrap_or(text.len());

    let mut rdr = csv::Reader::from_reader(text[body_start..].as_bytes());
    let header = rdr.headers().map_err(|e| err(e.to_string()))?;
    if header.iter().ne(TRACE_HEADER) {
        return Err(err(format!("expected columns {}", TRACE_HEADER.join(","))));
    }
    let n = meta
        .iterations
        .checked_mul(meta.layers)
        .and_then(|x| x.checked_mul(meta.gpus))
        .ok_or_else(|| err("trace dimensions overflow".into()))?;
    let mut tokens = vec![0u64; n];
    let mut seen = vec![false; n];
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 4;
        let rec = rec.map_err(|e| err(format!("line {line}: {e}")))?;
        let field = |k: usize| -> Result<u64> {
            rec.get(k)
                .and_then(|v| v.trim().parse::<u64>().ok())
                .ok_or_else(|| err(format!("line {line}: bad `{}` value", TRACE_HEADER[k])))
        };
        let (it, layer, gpu, count) = (field(0)? as usize, field(1)?, field(2)? as usize, field(3)?);
        let l = layer
            .checked_sub(meta.first_layer)
            .map(|l| l as usize)
            .filter(|&l| l < meta.layers)
            .ok_or_else(|| err(format!("line {line}: layer {layer} outside the trace")))?;
        if it >= meta.iterations || gpu >= meta.gpus {
            return Err(err(format!("line {line}: cell outside the trace")));
        }
        let idx = (it * meta.layers + l) * meta.gpus + gpu;
        if std::mem::replace(&mut seen[idx], true) {
            return Err(err(format!("line {line}: duplicate cell")));
        }
        tokens[idx] = count;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(err(format!("{} of {n} cells missing (first at index {missing})", seen.iter().filter(|s| !**s).count())));
    }
    Ok(RoutingTrace::from_parts(
        meta.iterations,
        meta.layers,
        meta.gpus,
        meta.first_layer,
        meta.copies_per_cell,
        meta.micro_batch,
        meta.generator,
        tokens,
    )?)
}

pub fn stats_csv(stats: &[LayerStats]) -> String {
    let rows = stats.iter().map(|s| {
        vec![
            s.layer.to_string(),
            s.min.to_string(),
            s.median.to_string(),
            s.max.to_string(),
            s.p99.to_string(),
            s.mean.to_string(),
        ]
    });
    csv_doc(STATS_MAGIC, None, &["layer", "min", "median", "max", "p99", "mean"], rows)
}

pub fn plan_csv(plan: &ChunkPlan) -> String {
    let meta = serde_json::to_string(&plan.strategy).expect("plain data");
    let rows = plan.cells.iter().map(|c| {
        vec![
            c.iteration.to_string(),
            c.layer.to_string(),
            c.stage.to_string(),
            c.s_double_prime.to_string(),
            c.s_prime_max.to_string(),
            c.c_theoretical.map(|v| v.to_string()).unwrap_or_default(),
            c.c_selected.to_string(),
            c.clamped.to_string(),
            c.feasible.to_string(),
        ]
    });
    let header = [
        "iteration",
        "layer",
        "stage",
        "s_double_prime",
        "s_prime_max",
        "c_theoretical",
        "c_selected",
        "clamped",
        "feasible",
    ];
    csv_doc(PLAN_MAGIC, Some(meta), &header, rows)
}

pub fn throughput_csv(report: &ThroughputReport) -> String {
    let meta = serde_json::json!({ "gpus": report.gpus, "tokens": report.tokens, "params": report.params }).to_string();
    let (tokens, gpus) = (report.tokens as f64, report.gpus as f64);
    let rows = report.rows.iter().flat_map(|r| {
        r.iteration_times.iter().enumerate().map(move |(i, &t)| {
            let tgs = if t > 0.0 { (tokens / (t * gpus)).to_string() } else { String::new() };
            vec![r.method.to_string(), i.to_string(), t.to_string(), tgs]
        })
    });
    csv_doc(THROUGHPUT_MAGIC, Some(meta), &["method", "iteration", "time_s", "tgs"], rows)
}

pub fn estimate_csv(rows: &[MethodEstimate]) -> String {
    let rows = rows.iter().map(|r| {
        let e = &r.estimate;
        vec![
            r.method.to_string(),
            e.stage.to_string(),
            r.chunks.to_string(),
            r.clamped.to_string(),
            r.chunk_tokens.to_string(),
            e.static_bytes.to_string(),
            e.activation_bytes.to_string(),
            e.total_bytes().to_string(),
            e.capacity_bytes.to_string(),
            e.headroom_bytes.to_string(),
            e.feasible.to_string(),
        ]
    });
    let header = [
        "method",
        "stage",
        "chunks",
        "clamped",
        "chunk_tokens",
        "static_bytes",
        "activation_bytes",
        "total_bytes",
        "capacity_bytes",
        "headroom_bytes",
        "feasible",
    ];
    csv_doc(ESTIMATE_MAGIC, None, &header, rows)
}
