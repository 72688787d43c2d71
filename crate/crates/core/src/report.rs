//! Deterministic run reports. Attribution means per context slot, ranked
//! predictions, a content hash binding the report to its inputs, and a
//! markdown/JSON pair that comes out byte-identical for a fixed seed.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::agent::AgentClient;
use crate::base::{base_hook, BaseTopology};
use crate::dispatch::Decision;
use crate::graph::{sample_subgraph, BatchGraph, RelGraph, SamplerConfig};
use crate::model::{forward_batch, slot_bases, ModelBundle};
use crate::profile::TaskProfile;
use crate::store::{format_timestamp, DataSlice, SliceTable, Value};
use crate::tensor::Aggregator;
use crate::train::Result;

const CHUNK: usize = 256;

/// Mean recalibrated attention weight for one context slot, over the rows
/// where that slot was populated.
#[derive(Debug, Clone, Serialize)]
pub struct SlotImportance {
    pub label: String,
    pub mean: f64,
    /// Rows that actually carried this slot. Zero means the slot never
    /// appeared, and the mean is reported as 0.
    pub rows: usize,
}

/// Every slot label the fusion stage can produce, in assembly order:
/// the seed's own representation first, then each relation crossed with
/// the four aggregators.
pub fn slot_universe(rgraph: &RelGraph, target: &str) -> Vec<String> {
    let bases = slot_bases(&rgraph.relations, target);
    let mut labels = Vec::with_capacity(1 + bases.len() * Aggregator::ALL.len());
    labels.push("self".to_string());
    for base in &bases {
        for agg in Aggregator::ALL {
            labels.push(format!("{base}({})", agg.name()));
        }
    }
    labels
}

/// Run the model over `rows` and average each slot's recalibrated attention
/// weight across the rows where the slot was present. Slots that never occur
/// still appear, with a mean of 0. Sorted by mean descending; ties keep
/// assembly order.
pub fn explain(
    bundle: &ModelBundle,
    base: Option<&BaseTopology>,
    slice: &DataSlice,
    rgraph: &RelGraph,
    rows: &[usize],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<SlotImportance>> {
    let target = &bundle.topology.target_table;
    let universe = slot_universe(rgraph, target);
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for chunk in rows.chunks(CHUNK) {
        let mut subs = Vec::with_capacity(chunk.len());
        for &r in chunk {
            let node = rgraph.node_id(target, r).ok_or_else(|| {
                crate::train::TrainError::Config(format!("row {r} outside table {target:?}"))
            })?;
            subs.push(sample_subgraph(rgraph, node, None, sampler, &mut rng)?);
        }
        let batch = BatchGraph::from_subgraphs(rgraph.relation_count(), &subs);
        let mut hook = match base {
            Some(topo) => Some(base_hook(topo, slice.target())?),
            None => None,
        };
        let out = match hook.as_mut() {
            Some(h) => forward_batch(bundle, slice, rgraph, &batch, Some(h))?,
            None => forward_batch(bundle, slice, rgraph, &batch, None)?,
        };
        for seed_report in &out.seeds {
            for (label, w) in seed_report.slots.iter().zip(&seed_report.importance) {
                let entry = sums.entry(label_key(&universe, label)).or_insert((0.0, 0));
                entry.0 += w;
                entry.1 += 1;
            }
        }
    }
    let mut out: Vec<SlotImportance> = universe
        .iter()
        .map(|label| {
            let (sum, n) = sums.get(label.as_str()).copied().unwrap_or((0.0, 0));
            let mean = if n == 0 { 0.0 } else { sum / n as f64 };
            SlotImportance { label: label.clone(), mean, rows: n }
        })
        .collect();
    out.sort_by(|a, b| b.mean.total_cmp(&a.mean));
    Ok(out)
}

/// Borrow the universe's copy of `label` so the accumulator keys stay tied to
/// one allocation per slot.
fn label_key<'a>(universe: &'a [String], label: &str) -> &'a str {
    universe
        .iter()
        .find(|u| u.as_str() == label)
        .map(String::as_str)
        .expect("forward pass emitted a slot label outside the universe")
}

/// Content hash of a slice: every table, column, and cell in deterministic
/// order. Numbers hash by their exact bit pattern, so a report is pinned to
/// the precise values it was computed from.
pub fn dataset_hash(slice: &DataSlice) -> String {
    let mut h = Sha256::new();
    for (name, table) in &slice.tables {
        h.update(name.as_bytes());
        h.update([0xff]);
        for col in &table.columns {
            h.update(col.name.as_bytes());
            h.update([0x1f]);
            h.update(format!("{:?}", col.kind).as_bytes());
            h.update([0x1e]);
        }
        h.update((table.rows.len() as u64).to_le_bytes());
        for row in &table.rows {
            for v in row {
                match v {
                    Value::Null => h.update([0]),
                    Value::Cat(s) => {
                        h.update([1]);
                        h.update((s.len() as u64).to_le_bytes());
                        h.update(s.as_bytes());
                    }
                    Value::Num(n) => {
                        h.update([2]);
                        h.update(n.to_bits().to_le_bytes());
                    }
                    Value::Text(s) => {
                        h.update([3]);
                        h.update((s.len() as u64).to_le_bytes());
                        h.update(s.as_bytes());
                    }
                    Value::Ts(t) => {
                        h.update([4]);
                        h.update(format_timestamp(*t).as_bytes());
                    }
                }
            }
        }
    }
    let digest = h.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

#[derive(Debug, Clone, Serialize)]
pub struct TopPrediction {
    /// Primary key of the row, or `row{index}` when the slice has none.
    pub id: String,
    pub row: usize,
    pub score: f64,
}

/// The `k` highest-scoring rows. Ties break on id ascending so the ranking
/// never depends on input order.
pub fn top_k(table: &SliceTable, rows: &[usize], scores: &[f64], k: usize) -> Vec<TopPrediction> {
    let mut out: Vec<TopPrediction> = rows
        .iter()
        .zip(scores)
        .map(|(&r, &s)| TopPrediction { id: row_id(table, r), row: r, score: s })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    out.truncate(k);
    out
}

fn row_id(table: &SliceTable, row: usize) -> String {
    match table.pk(row) {
        Some(v) => value_text(v),
        None => format!("row{row}"),
    }
}

fn value_text(v: &Value) -> String {
    match v {
        Value::Null => "null".to_string(),
        Value::Cat(s) | Value::Text(s) => s.clone(),
        Value::Num(n) => format!("{n}"),
        Value::Ts(t) => format_timestamp(*t),
    }
}

/// Everything a report is assembled from. All numbers must already be
/// computed; synthesis only formats.
pub struct ReportInputs<'a> {
    pub task: &'a TaskProfile,
    pub decision: Option<&'a Decision>,
    pub metrics: &'a BTreeMap<String, f64>,
    pub predictions: &'a [TopPrediction],
    pub importances: &'a [SlotImportance],
    pub dataset_hash: &'a str,
    pub seed: u64,
    /// The resolved run configuration, embedded verbatim for reproduction.
    pub config: serde_json::Value,
}

pub struct Report {
    pub markdown: String,
    pub json: serde_json::Value,
}

/// Assemble the markdown/JSON pair. Infallible: a narrative client failure
/// downgrades to the template narrative with a warning, never an error.
pub fn synthesize_report(inputs: &ReportInputs<'_>, client: Option<&dyn AgentClient>) -> Report {
    let mut json = base_json(inputs);
    let template = template_narrative(inputs);
    let (source, text, warning) = match client {
        None => ("template", template, None),
        Some(c) => match c.narrate(&json) {
            Ok(llm) => ("llm", llm, None),
            Err(e) => ("template", template, Some(format!("narrative service failed ({e}); fell back to the template"))),
        },
    };
    json["narrative"] = serde_json::json!({
        "source": source,
        "text": text,
        "warning": warning,
    });
    let markdown = render_markdown(inputs, source, &text, warning.as_deref());
    Report { markdown, json }
}

fn base_json(inputs: &ReportInputs<'_>) -> serde_json::Value {
    serde_json::json!({
        "task": inputs.task,
        "task_signature": inputs.task.signature(),
        "decision": inputs.decision,
        "metrics": inputs.metrics,
        "predictions": inputs.predictions,
        "context_importance": inputs.importances,
        "provenance": {
            "dataset_sha256": inputs.dataset_hash,
            "seed": inputs.seed,
            "config": inputs.config,
        },
    })
}

/// Narrative built purely from the computed numbers. Every figure it mentions
/// also appears in a structured section.
fn template_narrative(inputs: &ReportInputs<'_>) -> String {
    let task = inputs.task;
    let mut parts = vec![format!(
        "Task {} predicts {}.{} ({}).",
        task.task_name,
        task.target_table,
        task.target_column,
        task.task_type.name()
    )];
    if let Some(d) = inputs.decision {
        parts.push(format!(
            "The dispatcher probed {} base model(s), selected {} with score {:.6} against threshold {:.6}, and chose to {}.",
            d.scores.len() + d.failures.len(),
            d.selected,
            d.best_score,
            d.threshold,
            d.action
        ));
    }
    for (name, v) in inputs.metrics {
        parts.push(format!("Held-out {name}: {v:.6}."));
    }
    if let Some(p) = inputs.predictions.first() {
        parts.push(format!("The highest-scoring row is {} at {:.6}.", p.id, p.score));
    }
    if let Some(s) = inputs.importances.first() {
        if s.mean > 0.0 {
            parts.push(format!(
                "The most influential context slot is {} with mean importance {:.6}.",
                s.label, s.mean
            ));
        } else {
            parts.push("No context slot stood out; attention stayed near uniform.".to_string());
        }
    }
    parts.join(" ")
}

fn render_markdown(
    inputs: &ReportInputs<'_>,
    narrative_source: &str,
    narrative: &str,
    warning: Option<&str>,
) -> String {
    use std::fmt::Write;
    let task = inputs.task;
    let mut md = String::new();
    let _ = writeln!(md, "# Report: {}", task.task_name);
    md.push('\n');
    let _ = writeln!(md, "- task signature: `{}`", task.signature());
    let _ = writeln!(md, "- dataset sha256: `{}`", inputs.dataset_hash);
    let _ = writeln!(md, "- seed: {}", inputs.seed);
    let _ = writeln!(md, "- config: `{}`", inputs.config);
    md.push('\n');

    let _ = writeln!(md, "## Task\n");
    let _ = writeln!(
        md,
        "Predict `{}.{}` ({}).",
        task.target_table,
        task.target_column,
        task.task_type.name()
    );
    if let Some(h) = &task.prediction_horizon {
        let _ = writeln!(md, "Prediction horizon: {h}.");
    }
    md.push('\n');

    if let Some(d) = inputs.decision {
        let _ = writeln!(md, "## Dispatch\n");
        let _ = writeln!(md, "Selected `{}`; action: **{}**.", d.selected, d.action);
        let _ = writeln!(
            md,
            "Best score {:.6} vs threshold {:.6} (mu {:.6}, epsilon {:.6}).\n",
            d.best_score, d.threshold, d.mu, d.epsilon
        );
        let _ = writeln!(md, "| model | probe score |");
        let _ = writeln!(md, "|---|---|");
        for (id, s) in &d.scores {
            let _ = writeln!(md, "| {id} | {s:.6} |");
        }
        for (id, err) in &d.failures {
            let _ = writeln!(md, "| {id} | failed: {err} |");
        }
        md.push('\n');
    }

    let _ = writeln!(md, "## Metrics\n");
    let _ = writeln!(md, "| metric | value |");
    let _ = writeln!(md, "|---|---|");
    for (name, v) in inputs.metrics {
        let _ = writeln!(md, "| {name} | {v:.6} |");
    }
    md.push('\n');

    let _ = writeln!(md, "## Top predictions\n");
    let _ = writeln!(md, "| rank | id | score |");
    let _ = writeln!(md, "|---|---|---|");
    for (i, p) in inputs.predictions.iter().enumerate() {
        let _ = writeln!(md, "| {} | {} | {:.6} |", i + 1, p.id, p.score);
    }
    md.push('\n');

    let _ = writeln!(md, "## Context importance\n");
    let _ = writeln!(md, "| slot | mean importance | rows |");
    let _ = writeln!(md, "|---|---|---|");
    for s in inputs.importances {
        let _ = writeln!(md, "| {} | {:.6} | {} |", s.label, s.mean, s.rows);
    }
    md.push('\n');

    let _ = writeln!(md, "## Narrative\n");
    let _ = writeln!(md, "<!-- narrative-source: {narrative_source} -->");
    if let Some(w) = warning {
        let _ = writeln!(md, "> warning: {w}");
        md.push('\n');
    }
    let _ = writeln!(md, "{narrative}");
    md
}
