//! Speedups, geomeans, cost curves and the markdown/CSV report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rust_decimal::prelude::ToPrimitive;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::materialize::{SubmissionEvent, Verdict};
use crate::model::Lineage;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("invalid latency {0}: must be finite and positive")]
    InvalidLatency(f64),
}

fn positive(x: f64) -> Result<f64, AnalyticsError> {
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err(AnalyticsError::InvalidLatency(x))
    }
}

/// Reference latency over generated latency.
pub fn speedup(reference_ms: f64, generated_ms: f64) -> Result<f64, AnalyticsError> {
    Ok(positive(reference_ms)? / positive(generated_ms)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeoMean {
    /// None when nothing succeeded.
    pub value: Option<f64>,
    pub n_success: usize,
    pub n_total: usize,
}

/// Geometric mean over the successful entries only. `None`, non-finite and
/// non-positive entries count as failures.
pub fn success_only_geomean(speedups: &[Option<f64>]) -> GeoMean {
    let ok: Vec<f64> = speedups
        .iter()
        .flatten()
        .copied()
        .filter(|s| s.is_finite() && *s > 0.0)
        .collect();
    let value = if ok.is_empty() {
        None
    } else {
        Some((ok.iter().map(|s| s.ln()).sum::<f64>() / ok.len() as f64).exp())
    };
    GeoMean {
        value,
        n_success: ok.len(),
        n_total: speedups.len(),
    }
}

/// True when the achieved latency recovers at least 90% of the expert's
/// speed.
pub fn roundtrip_score(achieved_ms: f64, expert_ms: f64) -> Result<bool, AnalyticsError> {
    Ok(positive(expert_ms)? / positive(achieved_ms)? >= 0.9)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceVerdict {
    Valid,
    Wrapper,
    Failed,
    /// Counted by another system but flagged by audit.
    Audited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub cumulative_dollars: f64,
    pub verdict: TraceVerdict,
    #[serde(default)]
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub cumulative_dollars: f64,
    pub best_speedup: Option<f64>,
    /// The best so far came from an audited step.
    pub audited: bool,
}

/// Running best speedup against cumulative cost. Wrappers and failures
/// never raise the curve; audited steps do only when `include_audited`.
/// Steps out of cost order are sorted, with a warning.
pub fn running_best_curve(steps: &[TraceStep], include_audited: bool) -> (Vec<CurvePoint>, Vec<String>) {
    let mut warnings = Vec::new();
    let mut steps = steps.to_vec();
    if steps
        .windows(2)
        .any(|w| w[1].cumulative_dollars < w[0].cumulative_dollars)
    {
        warnings.push("trace was not in cumulative-cost order; sorted".to_string());
        steps.sort_by(|a, b| a.cumulative_dollars.total_cmp(&b.cumulative_dollars));
    }
    let mut best: Option<f64> = None;
    let mut audited = false;
    let mut out = Vec::with_capacity(steps.len());
    for s in &steps {
        let counts = match s.verdict {
            TraceVerdict::Valid => true,
            TraceVerdict::Audited => include_audited,
            TraceVerdict::Wrapper | TraceVerdict::Failed => false,
        };
        if counts {
            if let Some(v) = s.speedup.filter(|v| v.is_finite() && *v > 0.0) {
                if best.is_none_or(|b| v > b) {
                    best = Some(v);
                    audited = s.verdict == TraceVerdict::Audited;
                }
            }
        }
        out.push(CurvePoint {
            cumulative_dollars: s.cumulative_dollars,
            best_speedup: best,
            audited,
        });
    }
    (out, warnings)
}

/// Maps a materializer trajectory onto trace steps.
pub fn trace_from_session(events: &[SubmissionEvent]) -> Vec<TraceStep> {
    events
        .iter()
        .map(|e| TraceStep {
            cumulative_dollars: e.cumulative_dollars.to_f64().unwrap_or(f64::NAN),
            verdict: match e.verdict {
                Verdict::Valid => TraceVerdict::Valid,
                Verdict::Wrapper => TraceVerdict::Wrapper,
                _ => TraceVerdict::Failed,
            },
            speedup: e.speedup,
        })
        .collect()
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("cumulative_dollars,best_speedup,audited\n");
    for p in points {
        let best = p.best_speedup.map(|b| format!("{b:.4}")).unwrap_or_default();
        let _ = writeln!(out, "{:.4},{},{}", p.cumulative_dollars, best, p.audited);
    }
    out
}

/// One method's result on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    #[serde(default)]
    pub latency_ms: Option<f64>,
    /// Flagged by a correctness audit.
    #[serde(default)]
    pub audited: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub platform: String,
    pub op: String,
    pub reference_ms: f64,
    pub results: BTreeMap<String, MethodResult>,
}

/// A cross-method latency comparison. `methods` fixes column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub reference_label: String,
    pub methods: Vec<String>,
    pub rows: Vec<LatencyRow>,
}

impl LatencyTable {
    /// Speedups of `method` over the reference, row by row. Audited
    /// results count as failures.
    pub fn speedups(&self, method: &str) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .map(|r| {
                r.results
                    .get(method)
                    .filter(|m| !m.audited)
                    .and_then(|m| m.latency_ms)
                    .and_then(|l| speedup(r.reference_ms, l).ok())
            })
            .collect()
    }

    pub fn geomean(&self, method: &str) -> GeoMean {
        success_only_geomean(&self.speedups(method))
    }
}

pub fn fmt_ms(ms: f64) -> String {
    format!("{ms:.4}")
}

pub fn fmt_x(x: f64) -> String {
    format!("{x:.2}×")
}

pub fn render_latency_table(table: &LatencyTable) -> String {
    let mut out = String::new();
    let _ = write!(out, "| Platform | Op | {} (ms) |", table.reference_label);
    for m in &table.methods {
        let _ = write!(out, " {m} (ms) | {m} speedup |");
    }
    out.push('\n');
    out.push_str("|---|---|---|");
    for _ in &table.methods {
        out.push_str("---|---|");
    }
    out.push('\n');
    for r in &table.rows {
        let _ = write!(out, "| {} | {} | {} |", r.platform, r.op, fmt_ms(r.reference_ms));
        for m in &table.methods {
            match r.results.get(m).and_then(|x| x.latency_ms.map(|l| (l, x.audited))) {
                Some((l, audited)) => {
                    let mark = if audited { "†" } else { "" };
                    let sp = speedup(r.reference_ms, l).map(fmt_x).unwrap_or_else(|_| "FAIL".into());
                    let _ = write!(out, " {}{mark} | {sp}{mark} |", fmt_ms(l));
                }
                None => out.push_str(" FAIL | FAIL |"),
            }
        }
        out.push('\n');
    }
    out.push('\n');
    for m in &table.methods {
        let g = table.geomean(m);
        let v = g.value.map(fmt_x).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(out, "- {m}: success-only geomean {v} over {}/{} instances", g.n_success, g.n_total);
    }
    out
}

/// Repeated roundtrip attempts for one source/target pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundtripCell {
    pub pair: String,
    pub outcomes: Vec<bool>,
}

pub fn render_roundtrip(cells: &[RoundtripCell]) -> String {
    let mut out = String::from("| Pair | Recovered |\n|---|---|\n");
    let (mut hit, mut total) = (0, 0);
    for c in cells {
        let n = c.outcomes.iter().filter(|o| **o).count();
        hit += n;
        total += c.outcomes.len();
        let _ = writeln!(out, "| {} | {}/{} |", c.pair, n, c.outcomes.len());
    }
    let _ = writeln!(out, "| total | {hit}/{total} |");
    out
}

/// Naive-to-expert latency listing for one lineage.
pub fn render_lineage_trace(lineage: &Lineage) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} ({}, {})", lineage.expert_id, lineage.case_id, lineage.platform);
    if let Some(naive) = lineage.naive() {
        let lat = naive.latency().map(fmt_ms).unwrap_or_else(|| "?".into());
        let _ = writeln!(out, "  naive {lat} ms");
    }
    for t in &lineage.transitions {
        let to = lineage.states.iter().find(|s| s.id == t.to_state_id);
        let lat = to.and_then(|s| s.latency()).map(fmt_ms).unwrap_or_else(|| "?".into());
        let _ = writeln!(
            out,
            "  +{} {lat} ms ({})",
            t.action_category,
            fmt_x(t.effect.latency_ratio)
        );
    }
    out
}

/// Everything the report can draw from. Missing parts are noted as gaps.
#[derive(Debug, Default)]
pub struct ReportInputs {
    pub table: Option<LatencyTable>,
    pub roundtrip: Vec<RoundtripCell>,
    pub lineages: Vec<Lineage>,
    pub sessions: BTreeMap<String, Vec<SubmissionEvent>>,
}

#[derive(Debug, Default)]
pub struct Report {
    pub markdown: String,
    /// File name to CSV contents, one per session.
    pub curves: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

/// Builds the report deterministically from its inputs.
pub fn emit_report(inputs: &ReportInputs) -> Report {
    let mut r = Report::default();
    let md = &mut r.markdown;
    md.push_str("# Optimization report\n\n## Latency\n\n");
    match &inputs.table {
        Some(t) => md.push_str(&render_latency_table(t)),
        None => md.push_str("_No latency table supplied._\n"),
    }
    md.push_str("\n## Roundtrip recovery\n\n");
    if inputs.roundtrip.is_empty() {
        md.push_str("_No roundtrip results supplied._\n");
    } else {
        md.push_str(&render_roundtrip(&inputs.roundtrip));
    }
    md.push_str("\n## Lineages\n\n");
    if inputs.lineages.is_empty() {
        md.push_str("_No lineages in store._\n");
    } else {
        let mut ls: Vec<&Lineage> = inputs.lineages.iter().collect();
        ls.sort_by(|a, b| a.expert_id.cmp(&b.expert_id));
        md.push_str("```text\n");
        for l in ls {
            md.push_str(&render_lineage_trace(l));
        }
        md.push_str("```\n");
    }
    md.push_str("\n## Sessions\n\nSpeedups are against each session's own reference latency.\n\n");
    if inputs.sessions.is_empty() {
        md.push_str("_No sessions in store._\n");
    }
    for (id, events) in &inputs.sessions {
        let (curve, mut warnings) = running_best_curve(&trace_from_session(events), false);
        r.warnings.extend(warnings.drain(..).map(|w| format!("{id}: {w}")));
        let last = curve.last();
        // No valid non-wrapper submission renders as FAIL.
        let best = last.and_then(|p| p.best_speedup).map(fmt_x).unwrap_or_else(|| "FAIL".into());
        let cost = last.map(|p| p.cumulative_dollars).unwrap_or(0.0);
        let _ = writeln!(
            md,
            "- {id}: {} submissions, best {best}, ${cost:.4}, curve `curves/{id}.csv`",
            events.len()
        );
        r.curves.insert(format!("{id}.csv"), curve_csv(&curve));
    }
    r
}
