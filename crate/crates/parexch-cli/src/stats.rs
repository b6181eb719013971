//! Run-stats emission: CSV per iteration plus a JSON summary trailer.
//!
//! The CSV carries one row per executed iteration. The last line is a `#`
//! comment holding the summary object, so plain CSV readers can skip it.
//! Output is bit-stable: identical stats produce identical bytes.

use parexch::train::RunStats;
use std::fmt::Write as _;
use std::path::Path;

fn json_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "null".to_string(),
    }
}

/// Summary object with the final metrics of a run.
pub fn summary_json(stats: &RunStats, weights_hash: u64) -> String {
    format!(
        "{{\"rank\":{},\"iterations\":{},\"val_loss\":{},\"val_error\":{},\"wall_seconds\":{},\"exchange_messages\":{},\"weights_hash\":\"{:016x}\"}}",
        stats.rank,
        stats.records.len(),
        json_opt(stats.final_val_loss),
        json_opt(stats.final_val_error),
        stats.wall_seconds,
        stats.exchange_messages,
        weights_hash,
    )
}

/// Render the CSV body: header, one row per iteration, summary trailer.
pub fn render_stats(stats: &RunStats, weights_hash: u64) -> String {
    let mut out = String::new();
    out.push_str("iter,epoch,loss,compute_s,exchange_s,bytes_sent\n");
    for r in &stats.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iteration, r.epoch, r.loss, r.compute_seconds, r.exchange_seconds, r.bytes_sent
        );
    }
    let _ = writeln!(out, "# {}", summary_json(stats, weights_hash));
    out
}

/// Write the stats file. A literal `{rank}` in the path is substituted, so
/// multi-rank runs can emit one file per rank.
pub fn emit_stats(stats: &RunStats, path: &Path, weights_hash: u64) -> std::io::Result<()> {
    let rendered = render_stats(stats, weights_hash);
    let path_str = path.display().to_string();
    let resolved = path_str.replace("{rank}", &stats.rank.to_string());
    std::fs::write(resolved, rendered)
}
