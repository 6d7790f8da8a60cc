//! From raw recordings to zero-padded heartbeats: baseline-wander removal,
//! Pan-Tompkins R-peak detection and 40/60 beat segmentation.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::filter::{butter_bandpass, butter_lowpass};

/// Default cutoff of the baseline low-pass estimate.
pub const DEFAULT_BASELINE_CUTOFF_HZ: f64 = 0.5;
const BASELINE_ORDER: usize = 4;

const QRS_BAND_HZ: (f64, f64) = (5.0, 15.0);
const INTEGRATION_WINDOW_S: f64 = 0.150;
const REFRACTORY_S: f64 = 0.200;
const T_WAVE_WINDOW_S: f64 = 0.360;
const MIN_RECORD_S: f64 = 2.0;

/// Padded length used for a given sampling rate when none is configured.
pub fn default_l_pad(sample_rate: u32) -> usize {
    match sample_rate {
        500 => 1000,
        100 => 300,
        fs => 2 * fs as usize,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgRecord {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub lead_id: String,
    pub subject_id: String,
}

impl EcgRecord {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let rec = EcgRecord {
            samples,
            sample_rate,
            lead_id: String::new(),
            subject_id: String::new(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::validation("record has no samples"));
        }
        if self.sample_rate == 0 {
            return Err(Error::validation("sample rate must be positive"));
        }
        Ok(())
    }

    fn fs(&self) -> f64 {
        self.sample_rate as f64
    }
}

/// Class tag of a heartbeat.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Label {
    Normal,
    Abnormal(String),
    Unknown,
}

impl Label {
    pub fn is_normal(&self) -> bool {
        matches!(self, Label::Normal)
    }

    pub fn is_abnormal(&self) -> bool {
        matches!(self, Label::Abnormal(_))
    }

    pub fn parse(s: &str) -> Label {
        match s {
            "normal" => Label::Normal,
            "unknown" | "" => Label::Unknown,
            other => Label::Abnormal(other.to_string()),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Normal => f.write_str("normal"),
            Label::Unknown => f.write_str("unknown"),
            Label::Abnormal(name) => f.write_str(name),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Label::parse(&String::deserialize(d)?))
    }
}

/// One zero-padded heartbeat. `samples[valid_len..]` is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Heartbeat {
    pub id: String,
    pub samples: Vec<f64>,
    pub valid_len: usize,
    pub r_peak_offset: usize,
    pub label: Label,
    pub sample_rate: f64,
}

impl Heartbeat {
    /// Builds a heartbeat by zero-padding `valid` to `l_pad`.
    pub fn padded(
        id: impl Into<String>,
        valid: &[f64],
        l_pad: usize,
        r_peak_offset: usize,
        label: Label,
        sample_rate: f64,
    ) -> Result<Self> {
        if valid.len() > l_pad {
            return Err(Error::validation(format!(
                "beat of {} samples exceeds padded length {l_pad}",
                valid.len()
            )));
        }
        let mut samples = vec![0.0; l_pad];
        samples[..valid.len()].copy_from_slice(valid);
        let hb = Heartbeat {
            id: id.into(),
            samples,
            valid_len: valid.len(),
            r_peak_offset,
            label,
            sample_rate,
        };
        hb.validate()?;
        Ok(hb)
    }

    pub fn l_pad(&self) -> usize {
        self.samples.len()
    }

    pub fn valid(&self) -> &[f64] {
        &self.samples[..self.valid_len]
    }

    pub fn validate(&self) -> Result<()> {
        if self.valid_len == 0 || self.valid_len > self.samples.len() {
            return Err(Error::validation(format!(
                "beat {}: valid_len {} outside 1..={}",
                self.id,
                self.valid_len,
                self.samples.len()
            )));
        }
        if self.r_peak_offset >= self.valid_len {
            return Err(Error::validation(format!(
                "beat {}: r_peak_offset {} not inside the valid region",
                self.id, self.r_peak_offset
            )));
        }
        if self.samples[self.valid_len..].iter().any(|&v| v != 0.0) {
            return Err(Error::validation(format!("beat {}: non-zero padding", self.id)));
        }
        Ok(())
    }
}

/// Subtracts a zero-phase low-pass estimate of the baseline.
pub fn remove_baseline(rec: &EcgRecord, cutoff_hz: f64) -> Result<EcgRecord> {
    rec.validate()?;
    let fs = rec.fs();
    if !(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0) {
        return Err(Error::validation(format!(
            "baseline cutoff {cutoff_hz} Hz must lie in (0, {}) Hz",
            fs / 2.0
        )));
    }
    let sos = butter_lowpass(BASELINE_ORDER, cutoff_hz, fs)?;
    // pad by roughly one period of the cutoff so the edge transient settles
    let pad = (fs / cutoff_hz).round() as usize;
    let baseline = sos.filtfilt(&rec.samples, pad);
    Ok(EcgRecord {
        samples: rec.samples.iter().zip(&baseline).map(|(x, b)| x - b).collect(),
        ..rec.clone()
    })
}

/// Intermediate Pan-Tompkins signals, exposed for inspection and plotting.
#[derive(Debug, Clone)]
pub struct QrsFeatures {
    pub bandpassed: Vec<f64>,
    pub integrated: Vec<f64>,
}

pub fn qrs_features(samples: &[f64], fs: f64) -> Result<QrsFeatures> {
    let sos = butter_bandpass(2, QRS_BAND_HZ.0, QRS_BAND_HZ.1, fs)?;
    let pad = (fs / QRS_BAND_HZ.0).round() as usize;
    let bandpassed = sos.filtfilt(samples, pad);
    let n = bandpassed.len();
    let at = |i: isize| bandpassed[i.clamp(0, n as isize - 1) as usize];
    // five-point derivative, centred so it adds no delay
    let squared: Vec<f64> = (0..n as isize)
        .map(|i| {
            let d = (-at(i - 2) - 2.0 * at(i - 1) + 2.0 * at(i + 1) + at(i + 2)) / 8.0;
            d * d
        })
        .collect();
    let window = ((INTEGRATION_WINDOW_S * fs).round() as usize).max(1);
    let half = window / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for v in &squared {
        prefix.push(prefix.last().unwrap() + v);
    }
    let integrated = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(n);
            (prefix[hi] - prefix[lo]) / window as f64
        })
        .collect();
    Ok(QrsFeatures { bandpassed, integrated })
}

fn max_abs_slope(x: &[f64], centre: usize, half: usize) -> f64 {
    let lo = centre.saturating_sub(half).max(1);
    let hi = (centre + half).min(x.len().saturating_sub(1));
    (lo..=hi).map(|i| (x[i] - x[i - 1]).abs()).fold(0.0, f64::max)
}

/// R-peak detection after Pan and Tompkins: band-pass, derivative, squaring,
/// moving-window integration and adaptive dual thresholds with a refractory
/// period and search-back. Returns strictly increasing sample indices of the
/// R peaks in `rec.samples`.
pub fn detect_r_peaks(rec: &EcgRecord) -> Result<Vec<usize>> {
    rec.validate()?;
    let fs = rec.fs();
    let n = rec.samples.len();
    if (n as f64) < MIN_RECORD_S * fs {
        return Err(Error::validation(format!(
            "record has {n} samples, need at least {MIN_RECORD_S} s ({} samples)",
            (MIN_RECORD_S * fs) as usize
        )));
    }
    let feats = qrs_features(&rec.samples, fs)?;
    let mwi = &feats.integrated;
    let global_max = mwi.iter().cloned().fold(0.0, f64::max);
    if global_max <= 0.0 || !global_max.is_finite() {
        return Ok(Vec::new());
    }

    let refractory = (REFRACTORY_S * fs).round() as usize;
    let t_window = (T_WAVE_WINDOW_S * fs).round() as usize;
    let slope_half = ((0.075 * fs).round() as usize).max(1);

    // candidate fiducials: local maxima of the integrated signal
    let candidates: Vec<usize> = (1..n - 1)
        .filter(|&i| mwi[i] > mwi[i - 1] && mwi[i] >= mwi[i + 1] && mwi[i] > 0.0)
        .collect();

    let learn = ((MIN_RECORD_S * fs) as usize).min(n);
    let mut spki = mwi[..learn].iter().cloned().fold(0.0, f64::max) / 3.0;
    let mut npki = mwi[..learn].iter().sum::<f64>() / learn as f64 / 2.0;
    let mut thr1 = npki + 0.25 * (spki - npki);

    let mut qrs: Vec<usize> = Vec::new();
    let mut rr: Vec<usize> = Vec::new();
    let mut last_slope = 0.0;

    let mut k = 0;
    while k < candidates.len() {
        let i = candidates[k];
        let pk = mwi[i];

        // search-back for a missed beat when the gap grows too long
        if let (Some(&last), false) = (qrs.last(), rr.is_empty()) {
            let rr_avg = rr.iter().rev().take(8).sum::<usize>() as f64 / rr.len().min(8) as f64;
            if (i - last) as f64 > 1.66 * rr_avg {
                let thr2 = 0.5 * thr1;
                let missed = candidates[..k]
                    .iter()
                    .filter(|&&c| c > last + refractory && c + refractory < i && mwi[c] > thr2)
                    .max_by(|&&a, &&b| mwi[a].total_cmp(&mwi[b]));
                if let Some(&m) = missed {
                    spki = 0.25 * mwi[m] + 0.75 * spki;
                    rr.push(m - last);
                    qrs.push(m);
                    last_slope = max_abs_slope(&feats.bandpassed, m, slope_half);
                    thr1 = npki + 0.25 * (spki - npki);
                    continue;
                }
            }
        }

        let mut is_qrs = pk > thr1;
        if is_qrs {
            if let Some(&last) = qrs.last() {
                let gap = i - last;
                if gap < refractory {
                    is_qrs = false;
                } else if gap < t_window {
                    let slope = max_abs_slope(&feats.bandpassed, i, slope_half);
                    if slope < 0.5 * last_slope {
                        is_qrs = false;
                    }
                }
            }
        }
        if is_qrs {
            spki = 0.125 * pk + 0.875 * spki;
            if let Some(&last) = qrs.last() {
                rr.push(i - last);
            }
            qrs.push(i);
            last_slope = max_abs_slope(&feats.bandpassed, i, slope_half);
        } else {
            npki = 0.125 * pk + 0.875 * npki;
        }
        thr1 = npki + 0.25 * (spki - npki);
        k += 1;
    }

    // move each fiducial to the largest deflection of the input nearby
    let search = ((0.1 * fs).round() as usize).max(1);
    let mut peaks: Vec<usize> = qrs
        .iter()
        .map(|&c| {
            let lo = c.saturating_sub(search);
            let hi = (c + search + 1).min(n);
            let window = &rec.samples[lo..hi];
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            lo + window
                .iter()
                .enumerate()
                .max_by(|a, b| (a.1 - mean).abs().total_cmp(&(b.1 - mean).abs()))
                .map(|(j, _)| j)
                .unwrap_or(0)
        })
        .collect();
    peaks.sort_unstable();
    peaks.dedup();
    Ok(peaks)
}

/// Result of cutting a record into beats.
#[derive(Debug, Clone, Default)]
pub struct Segmentation {
    pub beats: Vec<Heartbeat>,
    /// Set when fewer than three peaks were supplied and nothing could be cut.
    pub too_few_peaks: bool,
    /// Beats dropped for exceeding the padded length.
    pub discarded: usize,
}

/// Cuts one beat per interior peak, from 40% of the distance to the previous
/// peak to 60% of the distance to the next one. Beats longer than `l_pad`
/// are discarded, the rest zero-padded.
pub fn segment_beats(rec: &EcgRecord, peaks: &[usize], l_pad: usize, label: &Label) -> Result<Segmentation> {
    rec.validate()?;
    if peaks.len() < 3 {
        log::warn!("segment_beats: {} peaks, need at least 3", peaks.len());
        return Ok(Segmentation {
            too_few_peaks: true,
            ..Segmentation::default()
        });
    }
    if peaks.windows(2).any(|w| w[1] <= w[0]) || *peaks.last().unwrap() >= rec.samples.len() {
        return Err(Error::validation("peaks must be strictly increasing sample indices"));
    }
    let mut seg = Segmentation::default();
    for (k, w) in peaks.windows(3).enumerate() {
        let (prev, peak, next) = (w[0], w[1], w[2]);
        let start = peak - (0.4 * (peak - prev) as f64).round() as usize;
        let d_next = next - peak;
        let end = peak + d_next - (0.4 * d_next as f64).round() as usize;
        let valid = &rec.samples[start..end];
        if valid.len() > l_pad {
            seg.discarded += 1;
            continue;
        }
        let id = if rec.subject_id.is_empty() {
            format!("beat{}", k + 1)
        } else {
            format!("{}-{}", rec.subject_id, k + 1)
        };
        seg.beats
            .push(Heartbeat::padded(id, valid, l_pad, peak - start, label.clone(), rec.fs())?);
    }
    Ok(seg)
}
