use std::fmt::Write as _;

use medlog::collector::RunView;
use medlog::drift::{DriftReport, ScenarioOutcome};
use medlog::spool::SyncReport;
use medlog::store::{CompactionReport, RecordView};

/// Left-aligned columns separated by two spaces.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            let _ = write!(s, "{cell:<w$}");
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(&mut header.iter().copied());
    for row in rows {
        line(&mut row.iter().map(String::as_str));
    }
    out
}

const RECORD_COLUMNS: [&str; 7] = ["event_id", "model_id", "invoked_at", "status", "conformance", "form", "digest"];

fn record_row(v: &RecordView) -> Vec<String> {
    let form = match v {
        RecordView::Full { .. } => "full",
        RecordView::Summary(_) => "summary",
    };
    vec![
        v.event_id().to_owned(),
        v.model_id().to_owned(),
        v.header().invoked_at.to_string(),
        v.status().as_str().to_owned(),
        v.conformance().as_str().to_owned(),
        form.to_owned(),
        v.digest().to_hex()[..16].to_owned(),
    ]
}

pub fn records(views: &[RecordView]) -> String {
    let rows: Vec<_> = views.iter().map(record_row).collect();
    table(&RECORD_COLUMNS, &rows)
}

pub fn record(v: &RecordView) -> String {
    let mut out = String::new();
    let h = v.header();
    let _ = writeln!(out, "event_id     {}", v.event_id());
    let _ = writeln!(out, "model_id     {}", v.model_id());
    let _ = writeln!(out, "server_id    {}", h.server_id);
    let _ = writeln!(out, "invoked_at   {}", h.invoked_at);
    if let Some(run) = &h.run_id {
        let _ = writeln!(out, "run_id       {run}");
    }
    if let Some(parent) = &h.parent_event_id {
        let _ = writeln!(out, "parent       {parent}");
    }
    let _ = writeln!(out, "status       {}", v.status().as_str());
    let _ = writeln!(out, "conformance  {}", v.conformance().as_str());
    let _ = writeln!(out, "digest       {}", v.digest().to_hex());
    match v.record() {
        Some(r) => {
            let _ = writeln!(
                out,
                "fragments    start=1 artifact={} output={} outcome={} feedback={}",
                r.artifacts.len(),
                r.outputs.len(),
                r.outcomes.len(),
                r.feedback.len()
            );
        }
        None => out.push_str("form         summary\n"),
    }
    out
}

pub fn run(view: &RunView) -> String {
    let mut out = format!("run {}\n", view.tree.run_id);
    fn walk(out: &mut String, view: &RunView, id: &str, depth: usize) {
        let _ = writeln!(out, "{}{}", "  ".repeat(depth + 1), id);
        for child in view.tree.children(id) {
            walk(out, view, child, depth + 1);
        }
    }
    for root in view.tree.roots() {
        walk(&mut out, view, root, 0);
    }
    out.push('\n');
    out.push_str(&records(&view.records));
    out
}

pub fn sync(r: &SyncReport) -> String {
    table(
        &["sent", "acked", "duplicates", "quarantined", "conflicts", "pending", "dead", "remaining", "passes", "ms"],
        &[vec![
            r.sent.to_string(),
            r.acked.to_string(),
            r.duplicates.to_string(),
            r.quarantined.to_string(),
            r.conflicts.to_string(),
            r.still_pending.to_string(),
            r.dead_lettered.to_string(),
            r.remaining.to_string(),
            r.passes.to_string(),
            r.duration.as_millis().to_string(),
        ]],
    )
}

pub fn compaction(r: &CompactionReport) -> String {
    let mut out = table(
        &["now", "artifact", "content", "summary", "blobs", "summaries_written", "ms"],
        &[vec![
            r.now.to_string(),
            r.fragments_removed.artifact.to_string(),
            r.fragments_removed.content.to_string(),
            r.fragments_removed.summary.to_string(),
            r.blobs_removed.to_string(),
            r.summaries_written.to_string(),
            r.wall_clock.as_millis().to_string(),
        ]],
    );
    if !r.skipped.is_empty() {
        let _ = writeln!(out, "skipped (no start): {}", r.skipped.join(", "));
    }
    out
}

pub fn drift(reports: &[DriftReport<f64>]) -> String {
    let rows: Vec<_> = reports
        .iter()
        .map(|r| {
            vec![
                r.feature.clone(),
                r.reference_window.to_string(),
                r.current_window.to_string(),
                r.current_count.to_string(),
                format!("{:.4}", r.psi),
                format!("{:.4}", r.ks),
                r.verdict.as_str().to_owned(),
            ]
        })
        .collect();
    table(&["feature", "reference", "window", "n", "psi", "ks", "verdict"], &rows)
}

pub fn scenario(o: &ScenarioOutcome<f64>) -> String {
    let mut out = drift(&o.reports);
    let _ = writeln!(out, "\nonset window  {}", o.onset_window);
    match (o.first_drift, o.detection_lag) {
        (Some(q), Some(lag)) => {
            let _ = writeln!(out, "first drift   {q} ({lag} quarters after onset)");
        }
        _ => out.push_str("first drift   none\n"),
    }
    for (t, f) in o.impact.thresholds.iter().zip(&o.impact.fraction_exceeding) {
        let _ = writeln!(out, "score change > {t}: {:.2}% of {} post-onset cases", f * 100.0, o.impact.n);
    }
    out
}
