use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, RunReport, Summary};
use crate::model::save;

pub const CSV_VERSION_LINE: &str = "# splitme-rounds v1";
pub const CSV_HEADER: [&str; 12] = [
    "round",
    "protocol",
    "K",
    "E",
    "T_total_ms",
    "Rco",
    "Rcp",
    "uplink_bits",
    "downlink_bits",
    "loss",
    "test_acc",
    "skipped",
];

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RESOLVED_FILE: &str = "resolved.toml";
pub const MODEL_FILE: &str = "model.bin";

fn rounds_csv(report: &RunReport) -> Result<Vec<u8>, HarnessError> {
    let mut buf = format!("{CSV_VERSION_LINE}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(CSV_HEADER)?;
        for r in &report.records {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                r.round.to_string(),
                r.protocol.to_string(),
                r.k().to_string(),
                r.local_updates.to_string(),
                r.t_total_ms.to_string(),
                r.r_co.to_string(),
                r.r_cp.to_string(),
                r.uplink_bits.to_string(),
                r.downlink_bits.to_string(),
                opt((!r.skipped).then_some(r.loss)),
                opt(r.test_acc),
                r.skipped.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(buf)
}

/// Writes the per-round CSV, summary, resolved configuration and model.
pub fn write_outputs(report: &RunReport, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(ROUNDS_FILE), rounds_csv(report)?)?;
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&report.summary)? + "\n")?;
    fs::write(dir.join(RESOLVED_FILE), report.config.resolved_toml()?)?;
    save(&report.model, &dir.join(MODEL_FILE))?;
    Ok(())
}

pub fn read_summary(dir: &Path) -> Result<Summary, HarnessError> {
    let text = fs::read_to_string(dir.join(SUMMARY_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

/// One line of the protocol comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub protocol: String,
    pub seed: u64,
    pub mean_k: f64,
    pub volume_mb: f64,
    pub time_s: f64,
    pub comm_cost: f64,
    pub rounds_to_target: Option<usize>,
    pub events_per_client_round: f64,
}

/// Builds the comparison table from finished run directories and writes it
/// as CSV to `out`.
pub fn compare(dirs: &[&Path], out: &Path) -> Result<Vec<ComparisonRow>, HarnessError> {
    if dirs.len() < 2 {
        return Err(HarnessError::Compare("need at least two runs".into()));
    }
    let summaries = dirs.iter().map(|d| read_summary(d)).collect::<Result<Vec<_>, _>>()?;
    let seed = summaries[0].data_seed;
    if let Some((d, s)) = dirs.iter().zip(&summaries).find(|(_, s)| s.data_seed != seed) {
        return Err(HarnessError::Compare(format!(
            "{} uses dataset seed {} but the first run uses {seed}",
            d.display(),
            s.data_seed
        )));
    }
    let rows: Vec<ComparisonRow> = dirs
        .iter()
        .zip(summaries)
        .map(|(d, s)| ComparisonRow {
            run: d.display().to_string(),
            protocol: s.protocol,
            seed: s.seed,
            mean_k: s.mean_k,
            volume_mb: s.total_volume_mb,
            time_s: s.total_time_ms / 1000.0,
            comm_cost: s.total_r_co,
            rounds_to_target: s.rounds_to_target,
            events_per_client_round: s.mean_transfer_events,
        })
        .collect();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(out)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(rows)
}
