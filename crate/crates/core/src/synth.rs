//! Synthetic heartbeats and recordings generated from the FMM model, with
//! ground-truth parameters kept alongside.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{BeatDataset, Provenance};
use crate::error::{Error, Result};
use crate::preprocess::{EcgRecord, Heartbeat, Label};
use crate::wave::{circular_distance, eval_beat, wrap_angle, FmmBeatParams, PhaseGrid, N_WAVES, TWO_PI};

const BASE_JSON: &str = include_str!("../config/synthetic_base.json");

/// Base beat of the synthetic generator: the oracle fit of a clean
/// hand-drawn template, stored in `config/synthetic_base.json`.
pub fn default_base() -> FmmBeatParams {
    serde_json::from_str(BASE_JSON).expect("bundled synthetic base is valid")
}

/// Derives a stream seed from a run seed and a split tag.
pub fn split_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, folded into the seed
    let h = tag
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
    seed ^ h
}

/// Uniform jitter half-widths. Amplitude and omega are relative, angles absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Jitter {
    pub offset: f64,
    pub amplitude: f64,
    pub alpha: f64,
    pub beta: f64,
    pub omega: f64,
    /// Extra alpha jitter of P and T, i.e. PR and QT interval variability.
    pub pt_alpha: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            offset: 0.05,
            amplitude: 0.2,
            alpha: 0.08,
            beta: 0.3,
            omega: 0.2,
            pt_alpha: 0.1,
        }
    }
}

impl Jitter {
    /// Alpha half-width of wave `k` in P, Q, R, S, T order.
    pub fn alpha_of(&self, k: usize) -> f64 {
        if k == 0 || k == N_WAVES - 1 {
            self.alpha + self.pt_alpha
        } else {
            self.alpha
        }
    }

    pub fn none() -> Self {
        Jitter {
            offset: 0.0,
            amplitude: 0.0,
            alpha: 0.0,
            beta: 0.0,
            omega: 0.0,
            pt_alpha: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyPreset {
    /// P amplitude set to zero.
    MissingP,
    /// Q, R and S widths doubled.
    WideQrs,
    /// Level shift on the arc between the S and T peaks.
    StShift,
}

impl AnomalyPreset {
    pub fn name(self) -> &'static str {
        match self {
            AnomalyPreset::MissingP => "missing-P",
            AnomalyPreset::WideQrs => "wide-QRS",
            AnomalyPreset::StShift => "st-shift",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "missing-p" => Ok(AnomalyPreset::MissingP),
            "wide-qrs" => Ok(AnomalyPreset::WideQrs),
            "st-shift" => Ok(AnomalyPreset::StShift),
            other => Err(Error::validation(format!("unknown anomaly preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_beats: usize,
    pub base: FmmBeatParams,
    pub jitter: Jitter,
    pub noise_sigma: f64,
    pub anomaly: Option<AnomalyPreset>,
    pub anomaly_fraction: f64,
    /// Height of the st-shift plateau.
    pub st_shift: f64,
    pub seed: u64,
    pub sample_rate: f64,
    /// Inclusive range of beat lengths in samples.
    pub valid_len_range: (usize, usize),
    pub l_pad: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_beats: 500,
            base: default_base(),
            jitter: Jitter::default(),
            noise_sigma: 0.01,
            anomaly: None,
            anomaly_fraction: 0.0,
            st_shift: 0.15,
            seed: 0,
            sample_rate: 250.0,
            valid_len_range: (180, 220),
            l_pad: 256,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let j = &self.jitter;
        let fields = [j.offset, j.amplitude, j.alpha, j.beta, j.omega, j.pt_alpha, self.noise_sigma];
        if fields.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::validation("jitter widths and noise must be finite and non-negative"));
        }
        if j.amplitude >= 1.0 || j.omega >= 1.0 {
            return Err(Error::validation("relative amplitude and omega jitter must be below 1"));
        }
        let max_omega = self.base.waves.iter().map(|w| w.omega).fold(0.0, f64::max);
        if max_omega * (1.0 + j.omega) > 1.0 {
            return Err(Error::validation(format!(
                "omega jitter {} lets omega {max_omega} exceed 1",
                j.omega
            )));
        }
        // jittered peaks must not swap places
        for k in 0..N_WAVES {
            let next = (k + 1) % N_WAVES;
            let gap = circular_distance(self.base.waves[k].alpha, self.base.waves[next].alpha);
            if j.alpha_of(k) + j.alpha_of(next) >= gap {
                return Err(Error::validation(format!(
                    "alpha jitter can reorder waves {k} and {next} ({gap:.3} rad apart)"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            return Err(Error::validation("anomaly_fraction must lie in [0, 1]"));
        }
        if self.anomaly_fraction > 0.0 && self.anomaly.is_none() {
            return Err(Error::validation("anomaly_fraction > 0 needs an anomaly preset"));
        }
        let (lo, hi) = self.valid_len_range;
        if lo == 0 || lo > hi || hi > self.l_pad {
            return Err(Error::validation(format!(
                "valid_len_range ({lo}, {hi}) must satisfy 1 <= lo <= hi <= l_pad = {}",
                self.l_pad
            )));
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::validation("sample_rate must be positive"));
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

fn jittered<R: Rng>(base: &FmmBeatParams, j: &Jitter, rng: &mut R) -> FmmBeatParams {
    let mut p = *base;
    p.offset += uniform(rng, j.offset);
    for (k, w) in p.waves.iter_mut().enumerate() {
        w.amplitude *= 1.0 + uniform(rng, j.amplitude);
        w.alpha = wrap_angle(w.alpha + uniform(rng, j.alpha_of(k)));
        w.beta = wrap_angle(w.beta + uniform(rng, j.beta));
        w.omega *= 1.0 + uniform(rng, j.omega);
    }
    p
}

fn apply_preset(p: &mut FmmBeatParams, preset: AnomalyPreset) {
    match preset {
        AnomalyPreset::MissingP => p.waves[0].amplitude = 0.0,
        AnomalyPreset::WideQrs => {
            for w in &mut p.waves[1..4] {
                w.omega = (2.0 * w.omega).min(1.0);
            }
        }
        AnomalyPreset::StShift => {}
    }
}

/// Adds `shift` to samples whose phase lies on the arc from the S peak to the T peak.
fn add_st_shift(signal: &mut [f64], p: &FmmBeatParams, shift: f64) {
    let grid = PhaseGrid::new(signal.len());
    let (s, t) = (p.waves[3].alpha, p.waves[4].alpha);
    let arc = wrap_angle(t - s);
    for (x, phase) in signal.iter_mut().zip(grid.iter()) {
        if wrap_angle(phase - s) <= arc {
            *x += shift;
        }
    }
}

/// A generated dataset and the parameters each beat was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub dataset: BeatDataset,
    pub truth: Vec<FmmBeatParams>,
}

/// Draws `spec.n_beats` beats. The stream is seeded from `spec.seed` and
/// `split`, so splits of one run are independent but reproducible.
pub fn generate_synthetic(spec: &SyntheticSpec, split: &str) -> Result<SyntheticSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(spec.seed, split));
    let n_anomalous = (spec.anomaly_fraction * spec.n_beats as f64).round() as usize;
    let mut anomalous = vec![false; spec.n_beats];
    for i in sample(&mut rng, spec.n_beats, n_anomalous) {
        anomalous[i] = true;
    }
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::validation(e.to_string()))?;
    let (lo, hi) = spec.valid_len_range;

    let mut beats = Vec::with_capacity(spec.n_beats);
    let mut truth = Vec::with_capacity(spec.n_beats);
    for (i, &is_anomaly) in anomalous.iter().enumerate() {
        let mut p = jittered(&spec.base, &spec.jitter, &mut rng);
        let label = match spec.anomaly {
            Some(preset) if is_anomaly => {
                apply_preset(&mut p, preset);
                Label::Abnormal(preset.name().to_string())
            }
            _ => Label::Normal,
        };
        p.validate()?;
        let len = rng.random_range(lo..=hi);
        let mut signal = eval_beat(&p, &PhaseGrid::new(len));
        if is_anomaly && spec.anomaly == Some(AnomalyPreset::StShift) {
            add_st_shift(&mut signal, &p, spec.st_shift);
        }
        if spec.noise_sigma > 0.0 {
            for x in &mut signal {
                *x += noise.sample(&mut rng);
            }
        }
        let r = ((p.waves[2].alpha / TWO_PI * len as f64).round() as usize) % len;
        beats.push(Heartbeat::padded(
            format!("{split}-{i:05}"),
            &signal,
            spec.l_pad,
            r,
            label,
            spec.sample_rate,
        )?);
        truth.push(p);
    }

    let mut label_map = BTreeMap::new();
    label_map.insert("normal".to_string(), "jittered base beat".to_string());
    if let Some(preset) = spec.anomaly {
        label_map.insert(preset.name().to_string(), format!("{} anomaly preset", preset.name()));
    }
    let dataset = BeatDataset::new(
        beats,
        spec.l_pad,
        spec.sample_rate,
        label_map,
        Provenance {
            source: format!("synthetic (seed {})", spec.seed),
            normal_class: "normal".into(),
            split: split.into(),
        },
    )?;
    Ok(SyntheticSet { dataset, truth })
}

/// Continuous synthetic recording of identical-length beats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecordSpec {
    pub n_beats: usize,
    pub bpm: f64,
    pub sample_rate: u32,
    pub base: FmmBeatParams,
    pub scale: f64,
    pub noise_sigma: f64,
    pub drift_amplitude: f64,
    pub drift_hz: f64,
    pub seed: u64,
}

impl Default for RecordSpec {
    fn default() -> Self {
        RecordSpec {
            n_beats: 10,
            bpm: 75.0,
            sample_rate: 500,
            base: default_base(),
            scale: 1.0,
            noise_sigma: 0.0,
            drift_amplitude: 0.0,
            drift_hz: 0.1,
            seed: 0,
        }
    }
}

/// Returns the recording and the true R-peak sample of every beat.
pub fn synthetic_record(spec: &RecordSpec) -> Result<(EcgRecord, Vec<usize>)> {
    spec.base.validate()?;
    if !(spec.bpm > 0.0) || spec.sample_rate == 0 || spec.n_beats == 0 {
        return Err(Error::validation("record spec needs positive bpm, sample rate and beat count"));
    }
    let fs = spec.sample_rate as f64;
    let len = (60.0 / spec.bpm * fs).round() as usize;
    let beat: Vec<f64> = eval_beat(&spec.base, &PhaseGrid::new(len))
        .into_iter()
        .map(|v| v * spec.scale)
        .collect();
    let peak = beat
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::validation(e.to_string()))?;
    let mut samples = Vec::with_capacity(len * spec.n_beats);
    for _ in 0..spec.n_beats {
        samples.extend_from_slice(&beat);
    }
    for (i, x) in samples.iter_mut().enumerate() {
        *x += spec.drift_amplitude * (TWO_PI * spec.drift_hz * i as f64 / fs).sin();
        if spec.noise_sigma > 0.0 {
            *x += noise.sample(&mut rng);
        }
    }
    let peaks = (0..spec.n_beats).map(|k| k * len + peak).collect();
    Ok((EcgRecord::new(samples, spec.sample_rate)?, peaks))
}
