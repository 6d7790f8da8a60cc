//! Dense autoencoders with either a dense or an FMM decoder, and the two
//! training phases: warm-up regression on oracle coefficients and
//! reconstruction training on normal beats.

use std::time::Instant;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{
    reconstruct, reconstruct_backward, reconstruction_loss, regression_loss, regression_weights, FmmHead, HeadCache,
    Pooling, DEFAULT_OMEGA_MAX,
};
use crate::metrics::{roc_auroc, RocCurve};
use crate::nn::{Activation, AdamState, ForwardCache, Mlp};
use crate::preprocess::Heartbeat;
use crate::synth::split_seed;
use crate::wave::{CoefficientVector, N_COEFFS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    DenseAe,
    FmmAe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    pub architecture: Architecture,
    pub l_pad: usize,
    pub encoder_hidden: Vec<usize>,
    pub latent: usize,
    /// Hidden widths of the dense decoder; unused by the FMM decoder.
    pub decoder_hidden: Vec<usize>,
    pub dropout: f64,
    pub omega_max: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            architecture: Architecture::DenseAe,
            l_pad: 0,
            encoder_hidden: vec![256, 128],
            latent: 32,
            decoder_hidden: vec![128, 256],
            dropout: 0.1,
            omega_max: DEFAULT_OMEGA_MAX,
        }
    }
}

impl AeConfig {
    pub fn new(architecture: Architecture, l_pad: usize) -> Self {
        AeConfig {
            architecture,
            l_pad,
            ..AeConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Decoder {
    Dense(Mlp),
    Fmm(FmmHead),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub config: AeConfig,
    pub seed: u64,
    pub encoder: Mlp,
    pub decoder: Decoder,
}

enum DecoderCache {
    Dense(ForwardCache),
    Fmm(HeadCache),
}

fn batch_matrix(beats: &[&Heartbeat], l_pad: usize) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((beats.len(), l_pad));
    for (i, b) in beats.iter().enumerate() {
        if b.samples.len() != l_pad {
            return Err(Error::structural(format!(
                "beat {} has {} samples, model expects {l_pad}",
                b.id,
                b.samples.len()
            )));
        }
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&b.samples[..]));
    }
    Ok(x)
}

fn valid_lens(beats: &[&Heartbeat]) -> Vec<usize> {
    beats.iter().map(|b| b.valid_len).collect()
}

impl Autoencoder {
    pub fn new(config: AeConfig, seed: u64) -> Result<Self> {
        if config.l_pad == 0 || config.latent == 0 {
            return Err(Error::validation("autoencoder needs positive l_pad and latent size"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, "init"));
        let mut sizes = vec![config.l_pad];
        sizes.extend(&config.encoder_hidden);
        sizes.push(config.latent);
        let encoder = Mlp::new(&sizes, &vec![Activation::Relu; sizes.len() - 1], config.dropout, false, &mut rng)?;
        let decoder = match config.architecture {
            Architecture::DenseAe => {
                let mut sizes = vec![config.latent];
                sizes.extend(&config.decoder_hidden);
                sizes.push(config.l_pad);
                let mut acts = vec![Activation::Relu; sizes.len() - 1];
                *acts.last_mut().expect("at least one layer") = Activation::Linear;
                Decoder::Dense(Mlp::new(&sizes, &acts, config.dropout, false, &mut rng)?)
            }
            Architecture::FmmAe => {
                Decoder::Fmm(FmmHead::new(config.latent, Pooling::Identity, config.omega_max, &mut rng)?)
            }
        };
        Ok(Autoencoder {
            config,
            seed,
            encoder,
            decoder,
        })
    }

    pub fn is_fmm(&self) -> bool {
        matches!(self.decoder, Decoder::Fmm(_))
    }

    pub fn l_pad(&self) -> usize {
        self.config.l_pad
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.encoder.param_names("encoder.");
        names.extend(match &self.decoder {
            Decoder::Dense(m) => m.param_names("decoder."),
            Decoder::Fmm(h) => h.param_names("head."),
        });
        names
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = self.encoder.param_shapes();
        shapes.extend(match &self.decoder {
            Decoder::Dense(m) => m.param_shapes(),
            Decoder::Fmm(h) => h.param_shapes(),
        });
        shapes
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.param_slices();
        out.extend(match &self.decoder {
            Decoder::Dense(m) => m.param_slices(),
            Decoder::Fmm(h) => h.param_slices(),
        });
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.param_slices_mut();
        out.extend(match &mut self.decoder {
            Decoder::Dense(m) => m.param_slices_mut(),
            Decoder::Fmm(h) => h.param_slices_mut(),
        });
        out
    }

    pub fn n_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn snapshot(&self) -> Vec<Vec<f64>> {
        self.param_slices().iter().map(|s| s.to_vec()).collect()
    }

    fn restore(&mut self, snap: &[Vec<f64>]) {
        for (dst, src) in self.param_slices_mut().into_iter().zip(snap) {
            dst.copy_from_slice(src);
        }
    }

    /// Inference-mode reconstruction, zero beyond each beat's valid length.
    pub fn reconstruct(&self, beats: &[&Heartbeat]) -> Result<Array2<f64>> {
        let x = batch_matrix(beats, self.l_pad())?;
        let z = self.encoder.predict(&x)?;
        match &self.decoder {
            Decoder::Dense(m) => {
                let mut y = m.predict(&z)?;
                for (i, b) in beats.iter().enumerate() {
                    y.slice_mut(s![i, b.valid_len..]).fill(0.0);
                }
                Ok(y)
            }
            Decoder::Fmm(h) => reconstruct(&h.predict(&z)?, &valid_lens(beats), self.l_pad()),
        }
    }

    /// Head coefficients for each beat; FMM decoder only.
    pub fn coefficients(&self, beats: &[&Heartbeat]) -> Result<Array2<f64>> {
        let Decoder::Fmm(h) = &self.decoder else {
            return Err(Error::validation("dense autoencoder has no FMM coefficients"));
        };
        let x = batch_matrix(beats, self.l_pad())?;
        h.predict(&self.encoder.predict(&x)?)
    }

    fn encode_train(&self, beats: &[&Heartbeat], rng: &mut ChaCha8Rng) -> Result<ForwardCache> {
        self.encoder.forward(&batch_matrix(beats, self.l_pad())?, true, rng)
    }

    fn grads_with_encoder(
        &self,
        enc: &ForwardCache,
        d_latent: &Array2<f64>,
        decoder_grads: Vec<Vec<f64>>,
    ) -> Result<Vec<Vec<f64>>> {
        let (g_enc, _) = self.encoder.backward(enc, d_latent)?;
        let mut grads: Vec<Vec<f64>> = g_enc.slices().iter().map(|s| s.to_vec()).collect();
        grads.extend(decoder_grads);
        Ok(grads)
    }

    /// Training-mode reconstruction loss and parameter gradients for one batch.
    pub fn reconstruction_step(&self, beats: &[&Heartbeat], rng: &mut ChaCha8Rng) -> Result<(f64, Vec<Vec<f64>>)> {
        let enc = self.encode_train(beats, rng)?;
        let lens = valid_lens(beats);
        let cache = match &self.decoder {
            Decoder::Dense(m) => DecoderCache::Dense(m.forward(&enc.output, true, rng)?),
            Decoder::Fmm(h) => DecoderCache::Fmm(h.forward(&enc.output, true, rng)?),
        };
        let pred = match &cache {
            DecoderCache::Dense(c) => c.output.clone(),
            DecoderCache::Fmm(c) => reconstruct(&c.coefficients, &lens, self.l_pad())?,
        };
        let (loss, d_pred) = reconstruction_loss(&pred, beats)?;
        let (dec_grads, d_latent) = match (&self.decoder, &cache) {
            (Decoder::Dense(m), DecoderCache::Dense(c)) => {
                let (g, d) = m.backward(c, &d_pred)?;
                (g.slices().iter().map(|s| s.to_vec()).collect(), d)
            }
            (Decoder::Fmm(h), DecoderCache::Fmm(c)) => {
                let d_coeffs = reconstruct_backward(&c.coefficients, &lens, &d_pred)?;
                let (g, d) = h.backward(c, &d_coeffs)?;
                (g.slices().iter().map(|s| s.to_vec()).collect(), d)
            }
            _ => unreachable!("cache built from the same decoder"),
        };
        Ok((loss, self.grads_with_encoder(&enc, &d_latent, dec_grads)?))
    }

    /// Training-mode weighted regression loss against target coefficients.
    pub fn regression_step(
        &self,
        beats: &[&Heartbeat],
        targets: &Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let Decoder::Fmm(h) = &self.decoder else {
            return Err(Error::validation("warm-up regression needs the FMM decoder"));
        };
        let enc = self.encode_train(beats, rng)?;
        let cache = h.forward(&enc.output, true, rng)?;
        let (loss, d_coeffs) = regression_loss(&cache.coefficients, targets, &regression_weights())?;
        let (g, d_latent) = h.backward(&cache, &d_coeffs)?;
        let dec = g.slices().iter().map(|s| s.to_vec()).collect();
        Ok((loss, self.grads_with_encoder(&enc, &d_latent, dec)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub learning_rate_sweep: Vec<f64>,
    pub warmup_epochs: usize,
    pub train_epochs: usize,
    pub batch_size: usize,
    pub inference_batch_size: usize,
    pub early_stop_patience: usize,
    pub val_split: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            learning_rate_sweep: vec![1e-5, 5e-5, 1e-4, 5e-4, 1e-3],
            warmup_epochs: 500,
            train_epochs: 500,
            batch_size: 64,
            inference_batch_size: 16,
            early_stop_patience: 25,
            val_split: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_split > 0.0 && self.val_split < 1.0) {
            return Err(Error::validation(format!("val_split {} outside (0, 1)", self.val_split)));
        }
        if self.batch_size == 0 || self.inference_batch_size == 0 {
            return Err(Error::validation("batch sizes must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Loss curves of one training phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    /// Validation loss of the parameters the phase started from.
    pub initial_val_loss: Option<f64>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch whose parameters were kept; `None` when no epoch beat the starting point.
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub epoch_ms: Vec<f64>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub warmup: Option<PhaseReport>,
    pub anomaly: Option<PhaseReport>,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn merge(mut self, other: TrainReport) -> TrainReport {
        self.warmup = other.warmup.or(self.warmup);
        self.anomaly = other.anomaly.or(self.anomaly);
        self.checkpoint = other.checkpoint.or(self.checkpoint);
        self
    }
}

/// Seeded train/validation split of `n` items.
pub fn split_indices(n: usize, val_split: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::validation(format!("need at least 2 training beats, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed(seed, "validation")));
    let n_val = ((n as f64 * val_split).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

/// Shared epoch loop with early stopping and best-weights restore.
fn run_phase<S, V>(
    model: &mut Autoencoder,
    train: &[usize],
    epochs: usize,
    cfg: &TrainConfig,
    phase: &str,
    mut step: S,
    mut validate: V,
) -> Result<PhaseReport>
where
    S: FnMut(&Autoencoder, &[usize], &mut ChaCha8Rng) -> Result<(f64, Vec<Vec<f64>>)>,
    V: FnMut(&Autoencoder) -> Result<f64>,
{
    let mut report = PhaseReport::default();
    if epochs == 0 {
        return Ok(report);
    }
    let names = model.param_names();
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, phase));
    let initial = validate(model)?;
    report.initial_val_loss = Some(initial);
    let mut best = (initial, model.snapshot());
    let mut waiting = 0;
    let mut order = train.to_vec();
    for epoch in 0..epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = step(model, batch, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::validation(format!("{phase}: loss became {loss} in epoch {epoch}")));
            }
            total += loss * batch.len() as f64;
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            adam.update(model.param_slices_mut(), &grad_refs, &names)?;
        }
        let val = validate(model)?;
        report.train_loss.push(total / order.len() as f64);
        report.val_loss.push(val);
        report.epoch_ms.push(start.elapsed().as_secs_f64() * 1e3);
        log::debug!("{phase} epoch {epoch}: train {:.6e} val {val:.6e}", total / order.len() as f64);
        if val < best.0 {
            best = (val, model.snapshot());
            report.best_epoch = Some(epoch);
            waiting = 0;
        } else {
            waiting += 1;
            if waiting > cfg.early_stop_patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    model.restore(&best.1);
    report.best_val_loss = Some(best.0);
    Ok(report)
}

fn pick<'a>(beats: &[&'a Heartbeat], idx: &[usize]) -> Vec<&'a Heartbeat> {
    idx.iter().map(|&i| beats[i]).collect()
}

fn mean_reconstruction_loss(model: &Autoencoder, beats: &[&Heartbeat], chunk: usize) -> Result<f64> {
    let scores = anomaly_scores(model, beats, chunk)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Warm-up regression of the FMM head onto oracle coefficients.
pub fn warmup(
    model: &mut Autoencoder,
    beats: &[&Heartbeat],
    targets: &[CoefficientVector],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if !model.is_fmm() {
        return Err(Error::validation("warm-up regression needs the FMM decoder"));
    }
    if targets.is_empty() {
        return Err(Error::validation("warm-up needs at least one oracle target"));
    }
    if targets.len() != beats.len() {
        return Err(Error::structural(format!(
            "{} beats but {} warm-up targets",
            beats.len(),
            targets.len()
        )));
    }
    let target = Array2::from_shape_fn((targets.len(), N_COEFFS), |(i, j)| targets[i].0[j]);
    let (train, val) = split_indices(beats.len(), cfg.val_split, cfg.seed)?;
    let val_beats = pick(beats, &val);
    let val_targets = target.select(ndarray::Axis(0), &val);
    let weights = regression_weights();
    let report = run_phase(
        model,
        &train,
        cfg.warmup_epochs,
        cfg,
        "warmup",
        |m, idx, rng| m.regression_step(&pick(beats, idx), &target.select(ndarray::Axis(0), idx), rng),
        |m| Ok(regression_loss(&m.coefficients(&val_beats)?, &val_targets, &weights)?.0),
    )?;
    Ok(TrainReport {
        warmup: Some(report),
        ..TrainReport::default()
    })
}

/// Reconstruction training on normal beats only.
pub fn train_anomaly(model: &mut Autoencoder, beats: &[&Heartbeat], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if let Some(b) = beats.iter().find(|b| !b.label.is_normal()) {
        return Err(Error::validation(format!(
            "beat {} is labelled `{}`; anomaly training uses normal beats only",
            b.id, b.label
        )));
    }
    let (train, val) = split_indices(beats.len(), cfg.val_split, cfg.seed)?;
    let val_beats = pick(beats, &val);
    let chunk = cfg.batch_size.max(cfg.inference_batch_size);
    let report = run_phase(
        model,
        &train,
        cfg.train_epochs,
        cfg,
        "anomaly",
        |m, idx, rng| m.reconstruction_step(&pick(beats, idx), rng),
        |m| mean_reconstruction_loss(m, &val_beats, chunk),
    )?;
    Ok(TrainReport {
        anomaly: Some(report),
        ..TrainReport::default()
    })
}

/// Reconstruction mean squared error over the valid samples of one beat.
pub fn anomaly_score(model: &Autoencoder, beat: &Heartbeat) -> Result<f64> {
    Ok(anomaly_scores(model, &[beat], 1)?[0])
}

/// Scores of many beats, evaluated in batches of `batch`.
pub fn anomaly_scores(model: &Autoencoder, beats: &[&Heartbeat], batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(beats.len());
    for chunk in beats.chunks(batch.max(1)) {
        let pred = model.reconstruct(chunk)?;
        out.extend(crate::head::per_beat_mse(&pred, chunk));
    }
    Ok(out)
}

/// ROC of anomaly scores with abnormal beats as positives; unlabelled beats are skipped.
pub fn evaluate_roc(model: &Autoencoder, beats: &[&Heartbeat], batch: usize) -> Result<(RocCurve, Vec<f64>)> {
    let labelled: Vec<&Heartbeat> = beats.iter().copied().filter(|b| b.label.is_normal() || b.label.is_abnormal()).collect();
    let scores = anomaly_scores(model, &labelled, batch)?;
    let positive: Vec<bool> = labelled.iter().map(|b| b.label.is_abnormal()).collect();
    Ok((roc_auroc(&scores, &positive)?, scores))
}
