//! File formats: beats files, UCR ECG5000, raw record CSVs and coefficient JSON lines.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{qrs_features, EcgRecord, Heartbeat, Label};
use crate::wave::{FmmBeatParams, COEFF_LAYOUT_VERSION};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const ECG5000_LEN: usize = 140;
/// Nominal rate assigned to ECG5000 beats, which carry no sampling metadata
/// (one 140-sample beat taken as one second).
pub const ECG5000_SAMPLE_RATE: f64 = 140.0;

/// Tool version and configuration hash embedded in every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub tool_version: String,
    pub config_hash: String,
}

impl Stamp {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Stamp {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: config_hash.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub normal_class: String,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeatDataset {
    pub beats: Vec<Heartbeat>,
    pub l_pad: usize,
    pub sample_rate: f64,
    /// Label string to human-readable meaning.
    pub label_map: BTreeMap<String, String>,
    pub provenance: Provenance,
}

impl BeatDataset {
    pub fn new(
        beats: Vec<Heartbeat>,
        l_pad: usize,
        sample_rate: f64,
        label_map: BTreeMap<String, String>,
        provenance: Provenance,
    ) -> Result<Self> {
        let ds = BeatDataset {
            beats,
            l_pad,
            sample_rate,
            label_map,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.beats {
            if b.l_pad() != self.l_pad {
                return Err(Error::structural(format!(
                    "beat {} has padded length {}, dataset uses {}",
                    b.id,
                    b.l_pad(),
                    self.l_pad
                )));
            }
            if b.sample_rate != self.sample_rate {
                return Err(Error::structural(format!(
                    "beat {} sampled at {} Hz, dataset at {} Hz",
                    b.id, b.sample_rate, self.sample_rate
                )));
            }
            b.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.beats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beats.is_empty()
    }

    pub fn n_normal(&self) -> usize {
        self.beats.iter().filter(|b| b.label.is_normal()).count()
    }

    pub fn n_abnormal(&self) -> usize {
        self.beats.iter().filter(|b| b.label.is_abnormal()).count()
    }

    pub fn normal_beats(&self) -> Vec<&Heartbeat> {
        self.beats.iter().filter(|b| b.label.is_normal()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatsHeader {
    pub l_pad: usize,
    pub sample_rate: f64,
    pub label_map: BTreeMap<String, String>,
    pub layout_version: u32,
    pub provenance: Provenance,
    #[serde(flatten)]
    pub stamp: Stamp,
}

fn ingest(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => ingest(path, line, format!("{other:?}")),
    }
}

/// Writes a header JSON line, a CSV column line and one row per beat.
pub fn write_beats(path: &Path, ds: &BeatDataset, stamp: &Stamp) -> Result<()> {
    ds.validate()?;
    let mut out = BufWriter::new(File::create(path)?);
    let header = BeatsHeader {
        l_pad: ds.l_pad,
        sample_rate: ds.sample_rate,
        label_map: ds.label_map.clone(),
        layout_version: COEFF_LAYOUT_VERSION,
        provenance: ds.provenance.clone(),
        stamp: stamp.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let mut w = csv::Writer::from_writer(out);
    let mut cols = vec!["beat_id".to_string(), "label".into(), "valid_len".into(), "r_peak_offset".into()];
    cols.extend((0..ds.l_pad).map(|i| format!("s_{i}")));
    w.write_record(&cols).map_err(|e| csv_error(path, e))?;
    for b in &ds.beats {
        let mut row = vec![b.id.clone(), b.label.to_string(), b.valid_len.to_string(), b.r_peak_offset.to_string()];
        row.extend(b.samples.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_beats(path: &Path) -> Result<(BeatDataset, BeatsHeader)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let header: BeatsHeader =
        serde_json::from_str(first.trim_end()).map_err(|e| ingest(path, 1, format!("bad header: {e}")))?;
    if header.layout_version != COEFF_LAYOUT_VERSION {
        return Err(Error::structural(format!(
            "{}: layout version {} (expected {COEFF_LAYOUT_VERSION})",
            path.display(),
            header.layout_version
        )));
    }
    let width = 4 + header.l_pad;
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let mut beats = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        // +1 for the JSON header line
        let line = rec.position().map_or(0, |p| p.line() as usize) + 1;
        if rec.len() != width {
            return Err(Error::structural(format!(
                "{}:{line}: expected {width} fields, found {}",
                path.display(),
                rec.len()
            )));
        }
        let int = |i: usize| -> Result<usize> {
            rec[i]
                .parse()
                .map_err(|_| ingest(path, line, format!("field {i}: `{}` is not an integer", &rec[i])))
        };
        let samples = (4..width)
            .map(|i| {
                rec[i]
                    .parse::<f64>()
                    .map_err(|_| ingest(path, line, format!("field {i}: `{}` is not a number", &rec[i])))
            })
            .collect::<Result<Vec<f64>>>()?;
        let beat = Heartbeat {
            id: rec[0].to_string(),
            label: Label::parse(&rec[1]),
            valid_len: int(2)?,
            r_peak_offset: int(3)?,
            samples,
            sample_rate: header.sample_rate,
        };
        beat.validate().map_err(|e| ingest(path, line, e.to_string()))?;
        beats.push(beat);
    }
    let ds = BeatDataset::new(
        beats,
        header.l_pad,
        header.sample_rate,
        header.label_map.clone(),
        header.provenance.clone(),
    )?;
    Ok((ds, header))
}

/// Index of the largest band-passed magnitude; used as the R peak of
/// pre-segmented beats that carry no annotation.
pub fn r_peak_by_bandpass(samples: &[f64], fs: f64) -> Result<usize> {
    let feats = qrs_features(samples, fs)?;
    Ok(feats
        .bandpassed
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map_or(0, |(i, _)| i))
}

fn ecg5000_label_map() -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("normal".into(), "UCR class 1".into());
    for c in 2..=5 {
        m.insert(format!("class{c}"), format!("UCR class {c}"));
    }
    m
}

/// Reads one UCR ECG5000 file (tab- or comma-separated, class then 140 values).
pub fn load_ecg5000_file(path: &Path, split: &str) -> Result<BeatDataset> {
    let file = BufReader::new(File::open(path)?);
    let mut beats = Vec::new();
    for (k, line) in file.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == '\t' || c == ',')
            .map(str::trim)
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != ECG5000_LEN + 1 {
            return Err(Error::structural(format!(
                "{}:{lineno}: expected {} values after the class, found {}",
                path.display(),
                ECG5000_LEN,
                fields.len().saturating_sub(1)
            )));
        }
        let class: f64 = fields[0]
            .parse()
            .map_err(|_| ingest(path, lineno, format!("class `{}` is not a number", fields[0])))?;
        if class.fract() != 0.0 || !(1.0..=5.0).contains(&class) {
            return Err(ingest(path, lineno, format!("class {class} outside 1..5")));
        }
        let samples = fields[1..]
            .iter()
            .enumerate()
            .map(|(i, f)| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| ingest(path, lineno, format!("value {} `{f}` is not a finite number", i + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        let label = match class as u8 {
            1 => Label::Normal,
            c => Label::Abnormal(format!("class{c}")),
        };
        let r = r_peak_by_bandpass(&samples, ECG5000_SAMPLE_RATE)?;
        beats.push(Heartbeat::padded(
            format!("ecg5000-{split}-{lineno}"),
            &samples,
            ECG5000_LEN,
            r,
            label,
            ECG5000_SAMPLE_RATE,
        )?);
    }
    BeatDataset::new(
        beats,
        ECG5000_LEN,
        ECG5000_SAMPLE_RATE,
        ecg5000_label_map(),
        Provenance {
            source: format!("ECG5000 ({})", path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into())),
            normal_class: "class 1".into(),
            split: split.into(),
        },
    )
}

/// Loads a train and a test file.
pub fn load_ecg5000(train_path: &Path, test_path: &Path) -> Result<(BeatDataset, BeatDataset)> {
    Ok((load_ecg5000_file(train_path, "train")?, load_ecg5000_file(test_path, "test")?))
}

/// Loads the UCR archive directory. The archive's 4500-beat `ECG5000_TEST`
/// file becomes the training split and its 500-beat `ECG5000_TRAIN` file the
/// test split.
pub fn load_ecg5000_dir(dir: &Path) -> Result<(BeatDataset, BeatDataset)> {
    let find = |stem: &str| -> Result<PathBuf> {
        ["tsv", "txt", "csv"]
            .iter()
            .map(|ext| dir.join(format!("ECG5000_{stem}.{ext}")))
            .find(|p| p.exists())
            .ok_or_else(|| Error::structural(format!("{}: no ECG5000_{stem} file", dir.display())))
    };
    load_ecg5000(&find("TEST")?, &find("TRAIN")?)
}

/// Sidecar metadata of a raw record CSV, stored next to it with a `.json` extension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub sample_rate: u32,
    #[serde(default)]
    pub subject_id: String,
    #[serde(default)]
    pub label: Option<Label>,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Reads a raw record: a CSV with one named column per lead plus a sidecar
/// JSON. `lead` selects a column by name; the first column is used otherwise.
pub fn read_record(path: &Path, lead: Option<&str>) -> Result<(EcgRecord, Option<Label>)> {
    let meta: RecordMeta = serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = match lead {
        Some(name) => headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::structural(format!("{}: no lead column `{name}`", path.display())))?,
        None => 0,
    };
    let mut samples = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = rec
            .get(col)
            .ok_or_else(|| Error::structural(format!("{}:{line}: missing column {col}", path.display())))?;
        samples.push(
            field
                .trim()
                .parse::<f64>()
                .map_err(|_| ingest(path, line, format!("`{field}` is not a number")))?,
        );
    }
    let record = EcgRecord {
        samples,
        sample_rate: meta.sample_rate,
        lead_id: headers.get(col).unwrap_or_default().trim().to_string(),
        subject_id: meta.subject_id,
    };
    record.validate()?;
    Ok((record, meta.label))
}

pub fn write_record(path: &Path, rec: &EcgRecord, label: Option<&Label>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let lead = if rec.lead_id.is_empty() { "lead" } else { rec.lead_id.as_str() };
    w.write_record([lead]).map_err(|e| csv_error(path, e))?;
    for v in &rec.samples {
        w.write_record([v.to_string()]).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    let meta = RecordMeta {
        sample_rate: rec.sample_rate,
        subject_id: rec.subject_id.clone(),
        label: label.cloned(),
    };
    serde_json::to_writer_pretty(File::create(sidecar_path(path))?, &meta)?;
    Ok(())
}

/// First line of a coefficients file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientsHeader {
    pub layout_version: u32,
    pub source: String,
    #[serde(flatten)]
    pub stamp: Stamp,
}

/// One beat of a coefficients file; failed fits carry `error` instead of `params`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRecord {
    pub beat_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<FmmBeatParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn write_coefficients(path: &Path, header: &CoefficientsHeader, records: &[CoefficientRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_coefficients(path: &Path) -> Result<(CoefficientsHeader, Vec<CoefficientRecord>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let first = lines.next().ok_or_else(|| ingest(path, 1, "empty coefficients file"))??;
    let header: CoefficientsHeader =
        serde_json::from_str(&first).map_err(|e| ingest(path, 1, format!("bad header: {e}")))?;
    if header.layout_version != COEFF_LAYOUT_VERSION {
        return Err(Error::structural(format!(
            "{}: layout version {} (expected {COEFF_LAYOUT_VERSION})",
            path.display(),
            header.layout_version
        )));
    }
    let mut records = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CoefficientRecord = serde_json::from_str(&line).map_err(|e| ingest(path, k + 2, e.to_string()))?;
        if let Some(p) = &rec.params {
            p.validate().map_err(|e| ingest(path, k + 2, e.to_string()))?;
        }
        records.push(rec);
    }
    Ok((header, records))
}
