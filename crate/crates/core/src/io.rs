//! Persistence for suites, run records, checkpoints, and CSV reports.
//!
//! Line-delimited files start with a manifest line followed by one JSON
//! record per line; the manifest carries a SHA-256 over the record lines.
//! Checkpoints are little-endian binary with a trailing SHA-256. CSV
//! numbers use 17 significant digits so every value re-imports exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{CorrelationReport, PerformanceRow};
use crate::domain::{EvaluationRecord, PerformanceRecord, ScenarioLog};
use crate::error::{Error, Result};
use crate::metrics::{ErrorSet, MetricRow};
use crate::scenarionn::{CriticalityModel, ModelDims, Tensor};

pub const FORMAT_VERSION: &str = "edeva-jsonl/1";
pub const SCENARIO_SUITE: &str = "scenario_suite";

const CHECKPOINT_MAGIC: &[u8; 8] = b"EDEVACKP";
const CHECKPOINT_VERSION: u32 = 1;

/// First line of every line-delimited file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileManifest {
    pub format_version: String,
    pub content: String,
    /// SHA-256 of the configuration that produced the file.
    pub config_hash: String,
    pub master_seed: u64,
    pub records: usize,
    /// SHA-256 over the record lines, newlines included.
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the canonical JSON form of a configuration.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(config)?.as_bytes()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `records` as a line-delimited file of the given content kind.
pub fn save_jsonl<T: Serialize>(path: &Path, content: &str, config_hash: &str, master_seed: u64, records: &[T]) -> Result<()> {
    let mut body = String::new();
    for r in records {
        body.push_str(&serde_json::to_string(r)?);
        body.push('\n');
    }
    let manifest = FileManifest {
        format_version: FORMAT_VERSION.into(),
        content: content.into(),
        config_hash: config_hash.into(),
        master_seed,
        records: records.len(),
        sha256: sha256_hex(body.as_bytes()),
    };
    let mut out = serde_json::to_string(&manifest)?;
    out.push('\n');
    out.push_str(&body);
    write_file(path, out.as_bytes())
}

/// Reads a line-delimited file, checking version, content kind, every
/// line's syntax, the record count, and the checksum, in that order.
pub fn load_jsonl<T: DeserializeOwned>(path: &Path, content: &str) -> Result<(FileManifest, Vec<T>)> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::MalformedLine {
        line: 1,
        reason: format!("not UTF-8: {e}"),
    })?;
    let (head, body) = match text.find('\n') {
        Some(i) => (&text[..i], &text[i + 1..]),
        None => (text.as_str(), ""),
    };
    let value: serde_json::Value = serde_json::from_str(head).map_err(|e| Error::MalformedLine {
        line: 1,
        reason: format!("manifest: {e}"),
    })?;
    match value.get("format_version").and_then(|v| v.as_str()) {
        Some(FORMAT_VERSION) => {}
        Some(other) => return Err(Error::UnsupportedVersion(other.to_string())),
        None => return Err(Error::UnsupportedVersion("<missing>".into())),
    }
    let manifest: FileManifest = serde_json::from_value(value).map_err(|e| Error::MalformedLine {
        line: 1,
        reason: format!("manifest: {e}"),
    })?;
    if manifest.content != content {
        return Err(Error::MalformedLine {
            line: 1,
            reason: format!("expected content `{content}`, found `{}`", manifest.content),
        });
    }

    let mut records = Vec::with_capacity(manifest.records);
    let mut rest = body;
    let mut line_no = 1;
    while !rest.is_empty() {
        line_no += 1;
        let (line, next) = match rest.find('\n') {
            Some(i) => (&rest[..i], &rest[i + 1..]),
            None => {
                return Err(Error::MalformedLine {
                    line: line_no,
                    reason: "truncated record (no line terminator)".into(),
                })
            }
        };
        let rec = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            line: line_no,
            reason: e.to_string(),
        })?;
        records.push(rec);
        rest = next;
    }
    if records.len() != manifest.records {
        return Err(Error::MalformedLine {
            line: line_no + 1,
            reason: format!("manifest declares {} records, found {}", manifest.records, records.len()),
        });
    }
    if sha256_hex(body.as_bytes()) != manifest.sha256 {
        return Err(Error::Checksum(path.display().to_string()));
    }
    Ok((manifest, records))
}

pub fn save_suite(path: &Path, config_hash: &str, master_seed: u64, suite: &[ScenarioLog]) -> Result<()> {
    save_jsonl(path, SCENARIO_SUITE, config_hash, master_seed, suite)
}

pub fn load_suite(path: &Path) -> Result<(FileManifest, Vec<ScenarioLog>)> {
    load_jsonl(path, SCENARIO_SUITE)
}

/// Encodes a checkpoint: magic, version, dims, named tensors, SHA-256.
pub fn checkpoint_bytes(model: &CriticalityModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for d in [model.dims.features, model.dims.gcn, model.dims.hidden] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let tensors = model.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint(path: &Path, model: &CriticalityModel) -> Result<()> {
    write_file(path, &checkpoint_bytes(model))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::invalid(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a checkpoint and validates every tensor against `expected`.
pub fn checkpoint_from_bytes(bytes: &[u8], expected: &ModelDims, origin: &str) -> Result<CriticalityModel> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::UnsupportedVersion(format!("{origin}: not a checkpoint")));
    }
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 32 {
        return Err(Error::invalid(format!("{origin}: checkpoint truncated")));
    }
    let (payload, digest) = bytes.split_at(bytes.len() - 32);
    let mut cur = Cursor { bytes: payload, pos: CHECKPOINT_MAGIC.len() };
    if Sha256::digest(payload).as_slice() != digest {
        return Err(Error::Checksum(origin.to_string()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(format!("checkpoint v{version}")));
    }
    let dims = ModelDims {
        features: cur.u32()? as usize,
        gcn: cur.u32()? as usize,
        hidden: cur.u32()? as usize,
    };
    let count = cur.u32()? as usize;
    let mut model = CriticalityModel::init(*expected, 0);
    let shapes = expected.shapes();
    if count != shapes.len() {
        return Err(Error::invalid(format!("{origin}: {count} tensors, expected {}", shapes.len())));
    }
    for (slot, (name, shape)) in model.tensors_mut().into_iter().zip(shapes) {
        let len = cur.u16()? as usize;
        let found_name = String::from_utf8_lossy(cur.take(len)?).into_owned();
        if found_name != slot.0 || found_name != name {
            return Err(Error::invalid(format!("{origin}: expected tensor `{name}`, found `{found_name}`")));
        }
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        if (rows, cols) != shape {
            return Err(Error::ShapeMismatch {
                tensor: found_name,
                expected: shape,
                found: (rows, cols),
            });
        }
        let data = (0..rows * cols).map(|_| cur.f64()).collect::<Result<Vec<f64>>>()?;
        *slot.1 = Tensor::from_vec(rows, cols, data)?;
    }
    if dims != *expected {
        return Err(Error::invalid(format!("{origin}: declared dims {dims:?} differ from {expected:?}")));
    }
    if cur.pos != payload.len() {
        return Err(Error::invalid(format!("{origin}: {} trailing bytes", payload.len() - cur.pos)));
    }
    model.check()?;
    Ok(model)
}

pub fn load_checkpoint(path: &Path, expected: &ModelDims) -> Result<CriticalityModel> {
    checkpoint_from_bytes(&read_file(path)?, expected, &path.display().to_string())
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Writes a CSV file with a fixed header; numbers must be pre-formatted.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_file(path, &bytes)
}

/// Reads a CSV file, checking the header, and hands each record with its
/// 1-based line number to `parse`.
pub fn read_csv<T>(path: &Path, header: &[&str], mut parse: impl FnMut(&csv::StringRecord, usize) -> Result<T>) -> Result<Vec<T>> {
    let bytes = read_file(path)?;
    let mut r = csv::ReaderBuilder::new().from_reader(bytes.as_slice());
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let found: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::MalformedLine {
            line: 1,
            reason: format!("expected header {header:?}, found {found:?}"),
        });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        out.push(parse(&rec, line)?);
    }
    Ok(out)
}

fn field(rec: &csv::StringRecord, i: usize, line: usize) -> Result<&str> {
    rec.get(i).ok_or_else(|| Error::MalformedLine {
        line,
        reason: format!("missing column {}", i + 1),
    })
}

fn num<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: usize) -> Result<T> {
    let s = field(rec, i, line)?;
    s.parse().map_err(|_| Error::MalformedLine {
        line,
        reason: format!("column {}: cannot parse `{s}`", i + 1),
    })
}

pub const EVALUATION_HEADER: [&str; 12] = [
    "scenario_id",
    "predictor_id",
    "p_critical",
    "gad",
    "e_error",
    "gad_norm",
    "e_error_norm",
    "score",
    "efficiency",
    "discomfort",
    "unsafety",
    "overall",
];

pub fn write_evaluations(path: &Path, records: &[EvaluationRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let mut row = vec![r.scenario_id.clone(), r.predictor_id.clone()];
            row.extend(
                [
                    r.p_critical,
                    r.gad,
                    r.e_error,
                    r.gad_norm,
                    r.e_error_norm,
                    r.score,
                    r.performance.efficiency,
                    r.performance.discomfort,
                    r.performance.unsafety,
                    r.performance.overall,
                ]
                .map(fmt_f64),
            );
            row
        })
        .collect();
    write_csv(path, &EVALUATION_HEADER, &rows)
}

pub fn read_evaluations(path: &Path) -> Result<Vec<EvaluationRecord>> {
    read_csv(path, &EVALUATION_HEADER, |rec, line| {
        Ok(EvaluationRecord {
            scenario_id: field(rec, 0, line)?.to_string(),
            predictor_id: field(rec, 1, line)?.to_string(),
            p_critical: num(rec, 2, line)?,
            gad: num(rec, 3, line)?,
            e_error: num(rec, 4, line)?,
            gad_norm: num(rec, 5, line)?,
            e_error_norm: num(rec, 6, line)?,
            score: num(rec, 7, line)?,
            performance: PerformanceRecord {
                efficiency: num(rec, 8, line)?,
                discomfort: num(rec, 9, line)?,
                unsafety: num(rec, 10, line)?,
                overall: num(rec, 11, line)?,
            },
        })
    })
}

pub const METRICS_HEADER: [&str; 11] = [
    "scenario_id",
    "predictor_id",
    "gad",
    "ADE",
    "FDE",
    "minADE",
    "minFDE",
    "aveADE",
    "aveFDE",
    "frames",
    "missing",
];

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let e = &r.errors;
            let mut row = vec![r.scenario_id.clone(), r.predictor_id.clone()];
            row.extend([r.gad, e.ade, e.fde, e.min_ade, e.min_fde, e.ave_ade, e.ave_fde].map(fmt_f64));
            row.push(r.frames.to_string());
            row.push(r.missing.to_string());
            row
        })
        .collect();
    write_csv(path, &METRICS_HEADER, &rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    read_csv(path, &METRICS_HEADER, |rec, line| {
        Ok(MetricRow {
            scenario_id: field(rec, 0, line)?.to_string(),
            predictor_id: field(rec, 1, line)?.to_string(),
            gad: num(rec, 2, line)?,
            errors: ErrorSet {
                ade: num(rec, 3, line)?,
                fde: num(rec, 4, line)?,
                min_ade: num(rec, 5, line)?,
                min_fde: num(rec, 6, line)?,
                ave_ade: num(rec, 7, line)?,
                ave_fde: num(rec, 8, line)?,
            },
            frames: num(rec, 9, line)?,
            missing: num(rec, 10, line)?,
        })
    })
}

pub const PERFORMANCE_HEADER: [&str; 6] = ["scenario_id", "predictor_id", "efficiency", "discomfort", "unsafety", "overall"];

pub fn write_performances(path: &Path, rows: &[PerformanceRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let p = &r.performance;
            let mut row = vec![r.scenario_id.clone(), r.predictor_id.clone()];
            row.extend([p.efficiency, p.discomfort, p.unsafety, p.overall].map(fmt_f64));
            row
        })
        .collect();
    write_csv(path, &PERFORMANCE_HEADER, &rows)
}

pub fn read_performances(path: &Path) -> Result<Vec<PerformanceRow>> {
    read_csv(path, &PERFORMANCE_HEADER, |rec, line| {
        Ok(PerformanceRow {
            scenario_id: field(rec, 0, line)?.to_string(),
            predictor_id: field(rec, 1, line)?.to_string(),
            performance: PerformanceRecord {
                efficiency: num(rec, 2, line)?,
                discomfort: num(rec, 3, line)?,
                unsafety: num(rec, 4, line)?,
                overall: num(rec, 5, line)?,
            },
        })
    })
}

pub const CORRELATION_HEADER: [&str; 9] = [
    "predictor_id",
    "method",
    "n",
    "r_efficiency",
    "r_discomfort",
    "r_unsafety",
    "r_overall",
    "auroc",
    "threshold",
];

/// One row per (predictor, method); undefined correlations are left empty.
pub fn write_correlation(path: &Path, report: &CorrelationReport) -> Result<()> {
    let rows: Vec<Vec<String>> = report
        .blocks
        .iter()
        .map(|b| {
            vec![
                b.predictor_id.clone(),
                b.method.label(),
                b.n.to_string(),
                fmt_opt(b.r_efficiency),
                fmt_opt(b.r_discomfort),
                fmt_opt(b.r_unsafety),
                fmt_opt(b.r_overall),
                fmt_opt(b.auroc),
                fmt_f64(b.threshold),
            ]
        })
        .collect();
    write_csv(path, &CORRELATION_HEADER, &rows)
}

pub const ROC_HEADER: [&str; 5] = ["predictor_id", "method", "threshold", "fpr", "tpr"];

pub fn write_roc(path: &Path, report: &CorrelationReport) -> Result<()> {
    let mut rows = Vec::new();
    for b in &report.blocks {
        for p in &b.roc {
            rows.push(vec![
                b.predictor_id.clone(),
                b.method.label(),
                fmt_f64(p.threshold),
                fmt_f64(p.fpr),
                fmt_f64(p.tpr),
            ]);
        }
    }
    write_csv(path, &ROC_HEADER, &rows)
}
