use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use fmmhead_core::checkpoint;
use fmmhead_core::data::{
    load_ecg5000_dir, read_beats, read_coefficients, read_record, write_beats, write_coefficients, BeatDataset,
    CoefficientRecord, CoefficientsHeader, Provenance, Stamp,
};
use fmmhead_core::fit::fit_beats;
use fmmhead_core::metrics::coefficient_correlations;
use fmmhead_core::preprocess::{default_l_pad, detect_r_peaks, remove_baseline, segment_beats};
use fmmhead_core::synth::{generate_synthetic, AnomalyPreset};
use fmmhead_core::train::{anomaly_scores, train_anomaly, warmup as warmup_phase, Architecture};
use fmmhead_core::wave::COEFF_LAYOUT_VERSION;
use fmmhead_core::{
    decode, encode, eval_beat, eval_wave, roc_auroc, AeConfig, Autoencoder, CoefficientVector, Error, FmmBeatParams,
    Heartbeat, Label, PhaseGrid, Result, RocCurve, TrainReport, WaveName,
};
use serde::Serialize;

use crate::config::Config;

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::structural(format!("{}: {e}", path.display()))
}

/// CSV writer whose first line is a `#` comment carrying the provenance stamp.
fn stamped_csv(path: &Path, stamp: &Stamp) -> Result<csv::Writer<BufWriter<File>>> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "# tool_version={} config_hash={}", stamp.tool_version, stamp.config_hash)?;
    Ok(csv::Writer::from_writer(f))
}

fn write_row<I, T>(w: &mut csv::Writer<BufWriter<File>>, path: &Path, row: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: AsRef<[u8]>,
{
    w.write_record(row).map_err(csv_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn coefficients_header(source: &str, stamp: &Stamp) -> CoefficientsHeader {
    CoefficientsHeader {
        layout_version: COEFF_LAYOUT_VERSION,
        source: source.to_string(),
        stamp: stamp.clone(),
    }
}

fn model_config(cfg: &Config, arch: Architecture, l_pad: usize) -> AeConfig {
    AeConfig {
        architecture: arch,
        l_pad,
        ..cfg.model.clone()
    }
}

fn load_model(path: &Path, l_pad: usize) -> Result<Autoencoder> {
    let (model, _) = checkpoint::load(path)?;
    if model.l_pad() != l_pad {
        return Err(Error::structural(format!(
            "{} expects beats of {} samples, the beats file has {l_pad}",
            path.display(),
            model.l_pad()
        )));
    }
    Ok(model)
}

pub fn preprocess(
    cfg: &Config,
    records: &[PathBuf],
    ecg5000: Option<&Path>,
    label: Option<&str>,
    out: &Path,
) -> Result<()> {
    let stamp = cfg.stamp();
    if let Some(dir) = ecg5000 {
        let (train, test) = load_ecg5000_dir(dir)?;
        fs::create_dir_all(out)?;
        write_beats(&out.join("train.csv"), &train, &stamp)?;
        write_beats(&out.join("test.csv"), &test, &stamp)?;
        log::info!("ECG5000: {} train and {} test beats", train.len(), test.len());
        return Ok(());
    }
    let mut beats = Vec::new();
    let mut rate = None;
    let mut label_map = BTreeMap::new();
    for path in records {
        let (rec, sidecar) = read_record(path, cfg.preprocess.lead.as_deref())?;
        if rate.is_some_and(|r| r != rec.sample_rate) {
            return Err(Error::validation("records have different sampling rates"));
        }
        rate = Some(rec.sample_rate);
        let label = label.map(Label::parse).or(sidecar).unwrap_or(Label::Unknown);
        label_map.insert(label.to_string(), "record label".to_string());
        let l_pad = cfg.preprocess.l_pad.unwrap_or_else(|| default_l_pad(rec.sample_rate));
        let clean = remove_baseline(&rec, cfg.preprocess.baseline_cutoff_hz)?;
        let peaks = detect_r_peaks(&clean)?;
        let seg = segment_beats(&clean, &peaks, l_pad, &label)?;
        if seg.too_few_peaks {
            log::warn!("{}: fewer than three R peaks, no beats cut", path.display());
        }
        if seg.discarded > 0 {
            log::warn!("{}: {} beats longer than {l_pad} samples discarded", path.display(), seg.discarded);
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("record");
        beats.extend(seg.beats.into_iter().map(|mut b| {
            b.id = format!("{stem}:{}", b.id);
            b
        }));
    }
    let rate = rate.ok_or_else(|| Error::validation("no records given"))?;
    let l_pad = cfg.preprocess.l_pad.unwrap_or_else(|| default_l_pad(rate));
    let ds = BeatDataset::new(
        beats,
        l_pad,
        rate as f64,
        label_map,
        Provenance {
            source: "raw records".into(),
            normal_class: "normal".into(),
            split: "all".into(),
        },
    )?;
    write_beats(out, &ds, &stamp)
}

pub fn fit(cfg: &Config, beats: &Path, out: &Path, summary: Option<&Path>) -> Result<()> {
    cfg.fit.validate()?;
    let stamp = cfg.stamp();
    let (ds, _) = read_beats(beats)?;
    let fits = fit_beats(&ds.beats, &cfg.fit);
    let mut records = Vec::with_capacity(fits.len());
    for (b, f) in ds.beats.iter().zip(fits) {
        let mut rec = CoefficientRecord {
            beat_id: b.id.clone(),
            params: None,
            r2: None,
            residual_rmse: None,
            wall_time_ms: Some(f.wall_time_ms),
            error: None,
        };
        match f.result {
            Ok(r) => {
                rec.params = Some(r.params);
                rec.r2 = Some(r.r2);
                rec.residual_rmse = Some(r.residual_rmse);
            }
            Err(e) => {
                log::warn!("beat {}: {e}", b.id);
                rec.error = Some(e.to_string());
            }
        }
        records.push(rec);
    }
    write_coefficients(out, &coefficients_header("fit", &stamp), &records)?;
    if let Some(path) = summary {
        let mut w = stamped_csv(path, &stamp)?;
        write_row(&mut w, path, ["beat_id", "r2", "rmse", "wall_time_ms"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &records {
            write_row(&mut w, path, [r.beat_id.clone(), opt(r.r2), opt(r.residual_rmse), opt(r.wall_time_ms)])?;
        }
        w.flush()?;
    }
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    log::info!("fitted {} beats, {failed} failed", records.len());
    Ok(())
}

#[derive(Serialize)]
struct StampedReport<'a> {
    #[serde(flatten)]
    stamp: Stamp,
    #[serde(flatten)]
    report: &'a TrainReport,
}

fn finish_training(cfg: &Config, model: &Autoencoder, mut report: TrainReport, out: &Path, path: Option<&Path>) -> Result<()> {
    let stamp = cfg.stamp();
    checkpoint::save(out, model, &stamp)?;
    report.checkpoint = Some(out.display().to_string());
    if let Some(p) = path {
        write_json(p, &StampedReport { stamp, report: &report })?;
    }
    Ok(())
}

pub fn warmup(
    cfg: &Config,
    beats: &Path,
    coefficients: &Path,
    init: Option<&Path>,
    out: &Path,
    report: Option<&Path>,
) -> Result<()> {
    let (ds, _) = read_beats(beats)?;
    let (_, recs) = read_coefficients(coefficients)?;
    let by_id: HashMap<&str, &FmmBeatParams> =
        recs.iter().filter_map(|r| r.params.as_ref().map(|p| (r.beat_id.as_str(), p))).collect();
    let (selected, targets): (Vec<&Heartbeat>, Vec<CoefficientVector>) = ds
        .beats
        .iter()
        .filter_map(|b| by_id.get(b.id.as_str()).map(|p| (b, encode(p))))
        .unzip();
    if selected.len() < ds.len() {
        log::warn!("{} beats have no reference coefficients and are skipped", ds.len() - selected.len());
    }
    let mut model = match init {
        Some(p) => load_model(p, ds.l_pad)?,
        None => Autoencoder::new(model_config(cfg, Architecture::FmmAe, ds.l_pad), cfg.seed)?,
    };
    let r = warmup_phase(&mut model, &selected, &targets, &cfg.train)?;
    finish_training(cfg, &model, r, out, report)
}

pub fn train(
    cfg: &Config,
    beats: &Path,
    init: Option<&Path>,
    arch: Option<Architecture>,
    normal_only: bool,
    out: &Path,
    report: Option<&Path>,
) -> Result<()> {
    let (ds, _) = read_beats(beats)?;
    let selected: Vec<&Heartbeat> = if normal_only {
        ds.normal_beats()
    } else {
        ds.beats.iter().collect()
    };
    let mut model = match init {
        Some(p) => load_model(p, ds.l_pad)?,
        None => {
            let arch = arch.unwrap_or(cfg.model.architecture);
            Autoencoder::new(model_config(cfg, arch, ds.l_pad), cfg.seed)?
        }
    };
    let r = train_anomaly(&mut model, &selected, &cfg.train)?;
    finish_training(cfg, &model, r, out, report)
}

pub fn score(cfg: &Config, model: &Path, beats: &Path, out: &Path) -> Result<()> {
    let (ds, _) = read_beats(beats)?;
    let model = load_model(model, ds.l_pad)?;
    let all: Vec<&Heartbeat> = ds.beats.iter().collect();
    let scores = anomaly_scores(&model, &all, cfg.train.inference_batch_size)?;
    let mut w = stamped_csv(out, &cfg.stamp())?;
    write_row(&mut w, out, ["beat_id", "label", "score"])?;
    for (b, s) in ds.beats.iter().zip(scores) {
        write_row(&mut w, out, [b.id.clone(), b.label.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Rows of a scores file: `(beat_id, label, score)`.
fn read_scores(path: &Path) -> Result<Vec<(String, Label, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err(path))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: String| Error::Ingest {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if rec.len() != 3 {
            return Err(Error::structural(format!("{}:{line}: expected 3 columns", path.display())));
        }
        let score = rec[2].trim().parse::<f64>().map_err(|_| bad(format!("`{}` is not a number", &rec[2])))?;
        rows.push((rec[0].to_string(), Label::parse(rec[1].trim()), score));
    }
    Ok(rows)
}

fn roc_from_scores(rows: &[(String, Label, f64)]) -> Result<RocCurve> {
    let (scores, labels): (Vec<f64>, Vec<bool>) = rows
        .iter()
        .filter(|(_, l, _)| *l != Label::Unknown)
        .map(|(_, l, s)| (*s, l.is_abnormal()))
        .unzip();
    roc_auroc(&scores, &labels)
}

fn write_roc(path: &Path, roc: &RocCurve, stamp: &Stamp) -> Result<()> {
    let mut w = stamped_csv(path, stamp)?;
    write_row(&mut w, path, ["threshold", "fpr", "tpr"])?;
    for ((t, f), p) in roc.thresholds.iter().zip(&roc.fpr).zip(&roc.tpr) {
        write_row(&mut w, path, [t.to_string(), f.to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    auroc: f64,
    n_normal: usize,
    n_abnormal: usize,
    #[serde(flatten)]
    stamp: Stamp,
}

fn aligned_coefficients(predicted: &Path, reference: &Path) -> Result<(Vec<CoefficientVector>, Vec<CoefficientVector>)> {
    let (_, pred) = read_coefficients(predicted)?;
    let (_, refs) = read_coefficients(reference)?;
    let by_id: HashMap<&str, &FmmBeatParams> =
        refs.iter().filter_map(|r| r.params.as_ref().map(|p| (r.beat_id.as_str(), p))).collect();
    Ok(pred
        .iter()
        .filter_map(|r| {
            let p = r.params.as_ref()?;
            by_id.get(r.beat_id.as_str()).map(|q| (encode(p), encode(q)))
        })
        .unzip())
}

pub fn eval(
    cfg: &Config,
    scores: &Path,
    predicted: Option<&Path>,
    reference: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    let stamp = cfg.stamp();
    let rows = read_scores(scores)?;
    let roc = roc_from_scores(&rows)?;
    fs::create_dir_all(out_dir)?;
    write_roc(&out_dir.join("roc.csv"), &roc, &stamp)?;
    write_json(
        &out_dir.join("summary.json"),
        &Summary {
            auroc: roc.auroc,
            n_normal: rows.iter().filter(|r| r.1.is_normal()).count(),
            n_abnormal: rows.iter().filter(|r| r.1.is_abnormal()).count(),
            stamp: stamp.clone(),
        },
    )?;
    let path = out_dir.join("correlations.csv");
    let mut w = stamped_csv(&path, &stamp)?;
    write_row(&mut w, &path, ["wave", "parameter", "kind", "value"])?;
    if let (Some(p), Some(r)) = (predicted, reference) {
        let (pred, refs) = aligned_coefficients(p, r)?;
        let table = coefficient_correlations(&pred, &refs)?;
        for e in &table.entries {
            let wave = e.wave.map_or("", WaveName::as_str);
            let kind = serde_json::to_value(e.kind)?;
            write_row(
                &mut w,
                &path,
                [wave, &e.parameter, kind.as_str().unwrap_or_default(), &e.value.to_string()],
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn extract(cfg: &Config, model: &Path, beats: &Path, out: &Path) -> Result<()> {
    let (ds, _) = read_beats(beats)?;
    let model = load_model(model, ds.l_pad)?;
    let all: Vec<&Heartbeat> = ds.beats.iter().collect();
    let mut records = Vec::with_capacity(all.len());
    for chunk in all.chunks(cfg.train.inference_batch_size.max(1)) {
        let start = Instant::now();
        let coeffs = model.coefficients(chunk)?;
        let per_beat = start.elapsed().as_secs_f64() * 1e3 / chunk.len() as f64;
        for (b, row) in chunk.iter().zip(coeffs.rows()) {
            let params = decode(&CoefficientVector::from_slice(&row.to_vec())?)?;
            records.push(CoefficientRecord {
                beat_id: b.id.clone(),
                params: Some(params),
                r2: None,
                residual_rmse: None,
                wall_time_ms: Some(per_beat),
                error: None,
            });
        }
    }
    write_coefficients(out, &coefficients_header("fmm-head", &cfg.stamp()), &records)
}

pub fn synth(
    cfg: &Config,
    n_beats: Option<usize>,
    anomaly: Option<&str>,
    anomaly_fraction: Option<f64>,
    split: &str,
    out: &Path,
    truth: Option<&Path>,
) -> Result<()> {
    let mut spec = cfg.synthetic.clone();
    if let Some(n) = n_beats {
        spec.n_beats = n;
    }
    if let Some(a) = anomaly {
        spec.anomaly = Some(AnomalyPreset::parse(a)?);
    }
    if let Some(f) = anomaly_fraction {
        spec.anomaly_fraction = f;
    }
    let set = generate_synthetic(&spec, split)?;
    let stamp = cfg.stamp();
    write_beats(out, &set.dataset, &stamp)?;
    if let Some(path) = truth {
        let records: Vec<CoefficientRecord> = set
            .dataset
            .beats
            .iter()
            .zip(&set.truth)
            .map(|(b, p)| CoefficientRecord {
                beat_id: b.id.clone(),
                params: Some(*p),
                r2: None,
                residual_rmse: None,
                wall_time_ms: None,
                error: None,
            })
            .collect();
        write_coefficients(path, &coefficients_header("synthetic truth", &stamp), &records)?;
    }
    Ok(())
}

pub fn plot(
    cfg: &Config,
    beats: &Path,
    beat_id: &str,
    model: Option<&Path>,
    coefficients: Option<&Path>,
    out: &Path,
    roc: Option<(&Path, &Path)>,
) -> Result<()> {
    let stamp = cfg.stamp();
    let (ds, _) = read_beats(beats)?;
    let beat = ds
        .beats
        .iter()
        .find(|b| b.id == beat_id)
        .ok_or_else(|| Error::validation(format!("no beat `{beat_id}` in {}", beats.display())))?;
    let grid = PhaseGrid::new(beat.valid_len);
    let (reconstruction, params) = match (model, coefficients) {
        (Some(m), _) => {
            let m = load_model(m, ds.l_pad)?;
            let recon = m.reconstruct(&[beat])?.row(0).to_vec();
            let params = if m.is_fmm() {
                let row = m.coefficients(&[beat])?.row(0).to_vec();
                Some(decode(&CoefficientVector::from_slice(&row)?)?)
            } else {
                None
            };
            (recon, params)
        }
        (None, Some(c)) => {
            let (_, recs) = read_coefficients(c)?;
            let p = recs
                .iter()
                .find(|r| r.beat_id == beat_id)
                .and_then(|r| r.params)
                .ok_or_else(|| Error::validation(format!("no coefficients for beat `{beat_id}`")))?;
            (eval_beat(&p, &grid), Some(p))
        }
        (None, None) => return Err(Error::validation("plot needs --model or --coefficients")),
    };
    let waves: Vec<Vec<f64>> = params.map_or_else(Vec::new, |p| p.waves.iter().map(|w| eval_wave(w, &grid)).collect());

    let mut w = stamped_csv(out, &stamp)?;
    let mut header = vec!["t".to_string(), "input".into(), "reconstruction".into()];
    header.extend(WaveName::ALL.iter().map(|n| format!("wave_{}", n.as_str())));
    write_row(&mut w, out, &header)?;
    for i in 0..beat.valid_len {
        let mut row = vec![grid.t(i).to_string(), beat.samples[i].to_string(), reconstruction[i].to_string()];
        for j in 0..WaveName::ALL.len() {
            row.push(waves.get(j).map_or(String::new(), |v| v[i].to_string()));
        }
        write_row(&mut w, out, &row)?;
    }
    w.flush()?;

    if let Some((scores, roc_out)) = roc {
        write_roc(roc_out, &roc_from_scores(&read_scores(scores)?)?, &stamp)?;
    }
    Ok(())
}
