//! Metrics CSV: a fixed header matching `MetricsRecord`'s fields plus the
//! config hash; absent metrics are empty cells.

use std::path::Path;

use super::fsutil::atomic_write;
use super::CliError;
use crate::evalkit::MetricsRecord;

/// Column order. Never reorder; append new columns at the end.
pub const COLUMNS: [&str; 13] = [
    "step",
    "attack_loss",
    "defense_loss",
    "benign_loss",
    "trigger_success_rate",
    "compliance_rate",
    "forget_accuracy",
    "retain_accuracy",
    "forget_ppl",
    "retain_ppl",
    "gap_closed",
    "nan_skips",
    "config_hash",
];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn row(r: &MetricsRecord, hash: &str) -> Vec<String> {
    vec![
        r.step.to_string(),
        cell(r.attack_loss),
        cell(r.defense_loss),
        cell(r.benign_loss),
        cell(r.trigger_success_rate),
        cell(r.compliance_rate),
        cell(r.forget_accuracy),
        cell(r.retain_accuracy),
        cell(r.forget_ppl),
        cell(r.retain_ppl),
        cell(r.gap_closed),
        r.nan_skips.to_string(),
        hash.to_string(),
    ]
}

/// Serializes records with the header.
pub fn to_csv(records: &[MetricsRecord], hash: &str) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Io(format!("csv: {e}"));
    w.write_record(COLUMNS).map_err(io)?;
    for r in records {
        w.write_record(row(r, hash)).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// A parsed metrics file: records plus the config hash of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub records: Vec<MetricsRecord>,
    pub hashes: Vec<String>,
}

pub fn parse_csv(text: &str) -> Result<MetricsTable, CliError> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let bad = |m: String| CliError::Io(format!("malformed metrics csv: {m}"));
    let header = rd.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != COLUMNS {
        return Err(bad(format!(
            "unexpected header {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut table = MetricsTable {
        records: Vec::new(),
        hashes: Vec::new(),
    };
    for rec in rd.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let f = |i: usize| -> Result<Option<f64>, CliError> {
            let s = &rec[i];
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| bad(format!("bad number `{s}` in column {}", COLUMNS[i])))
            }
        };
        let int = |i: usize| -> Result<usize, CliError> {
            rec[i]
                .parse()
                .map_err(|_| bad(format!("bad integer `{}` in column {}", &rec[i], COLUMNS[i])))
        };
        table.records.push(MetricsRecord {
            step: int(0)?,
            attack_loss: f(1)?,
            defense_loss: f(2)?,
            benign_loss: f(3)?,
            trigger_success_rate: f(4)?,
            compliance_rate: f(5)?,
            forget_accuracy: f(6)?,
            retain_accuracy: f(7)?,
            forget_ppl: f(8)?,
            retain_ppl: f(9)?,
            gap_closed: f(10)?,
            nan_skips: int(11)?,
        });
        table.hashes.push(rec[12].to_string());
    }
    Ok(table)
}

/// Appends rows to a metrics file by atomically rewriting it.
pub fn append_rows(
    path: &Path,
    existing: &mut Vec<MetricsRecord>,
    new: &MetricsRecord,
    hash: &str,
) -> Result<(), CliError> {
    existing.push(new.clone());
    atomic_write(path, to_csv(existing, hash)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_missing_cells() {
        let recs = vec![
            MetricsRecord {
                step: 10,
                defense_loss: Some(0.25),
                trigger_success_rate: Some(1.0),
                ..MetricsRecord::default()
            },
            MetricsRecord {
                step: 20,
                attack_loss: Some(1.0 / 3.0),
                nan_skips: 2,
                ..MetricsRecord::default()
            },
        ];
        let text = to_csv(&recs, "abc").unwrap();
        assert!(text.starts_with("step,attack_loss,defense_loss"));
        assert!(text.lines().nth(1).unwrap().starts_with("10,,0.25,"));
        let t = parse_csv(&text).unwrap();
        assert_eq!(t.records, recs);
        assert_eq!(t.hashes, vec!["abc", "abc"]);
    }
}
