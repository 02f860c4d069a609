//! Evaluation and training artifacts: `report.json`, `roc.csv`, `history.csv`.

use std::fs;
use std::path::Path;

use pneunet_core::metrics::{EvalReport, RocCurve, RocPoint};
use pneunet_core::train::EpochRecord;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROC_HEADER: &str = "fpr,tpr,threshold";
pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc";

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub path: String,
    pub label: u8,
    pub probability: f32,
}

/// Contents of `report.json`: the metrics plus one entry per scored image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    #[serde(flatten)]
    pub metrics: EvalReport,
    #[serde(default)]
    pub predictions: Vec<SamplePrediction>,
}

pub fn write_report(path: &Path, report: &ReportFile) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    write(path, &json)
}

pub fn read_report(path: &Path) -> Result<ReportFile> {
    Ok(serde_json::from_str(&read(path)?)?)
}

fn fmt6(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.6}")
    }
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut s = String::from(ROC_HEADER);
    s.push('\n');
    for p in &curve.points {
        s.push_str(&format!(
            "{},{},{}\n",
            fmt6(p.fpr),
            fmt6(p.tpr),
            fmt6(p.threshold)
        ));
    }
    s
}

fn parse_rows(text: &str, header: &str, width: usize) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::Invalid(format!("expected CSV header {header:?}")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let cells: Vec<f64> = l
                .split(',')
                .map(|c| match c.trim() {
                    "inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    c => c.parse::<f64>(),
                })
                .collect::<Result<_, _>>()
                .map_err(|e| Error::Invalid(format!("bad CSV row {l:?}: {e}")))?;
            if cells.len() != width {
                return Err(Error::Invalid(format!("expected {width} columns in {l:?}")));
            }
            Ok(cells)
        })
        .collect()
}

pub fn write_roc(path: &Path, curve: &RocCurve) -> Result<()> {
    write(path, roc_csv(curve).as_bytes())
}

pub fn read_roc(path: &Path) -> Result<RocCurve> {
    let rows = parse_rows(&read(path)?, ROC_HEADER, 3)?;
    Ok(RocCurve {
        points: rows
            .into_iter()
            .map(|r| RocPoint {
                fpr: r[0],
                tpr: r[1],
                threshold: r[2],
            })
            .collect(),
    })
}

pub fn history_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            fmt6(r.train_loss),
            fmt6(r.train_acc),
            fmt6(r.val_loss),
            fmt6(r.val_acc)
        ));
    }
    s
}

pub fn write_history(path: &Path, records: &[EpochRecord]) -> Result<()> {
    write(path, history_csv(records).as_bytes())
}

/// History rows as `[epoch, train_loss, train_acc, val_loss, val_acc]`.
pub fn read_history(path: &Path) -> Result<Vec<[f64; 5]>> {
    let rows = parse_rows(&read(path)?, HISTORY_HEADER, 5)?;
    Ok(rows
        .into_iter()
        .map(|r| [r[0], r[1], r[2], r[3], r[4]])
        .collect())
}
