//! Decoder replacement that maps a latent code to 31 constrained FMM
//! coefficients and rebuilds the heartbeat from them.
//!
//! Output mapping per coefficient: `M` linear, `A` softplus, `omega`
//! `sigmoid_scaled(., 0, omega_max)`, every sin/cos entry
//! `sigmoid_scaled(., -1, 1)`.
//!
//! Reconstruction gradients. With `alpha = atan2(sa, ca)`,
//! `beta = atan2(sb, cb)`, `x = t - alpha` and `psi = beta + phi0(x; omega)`,
//! each wave contributes `A cos(psi)` and
//!
//! ```text
//! dV/dA     = cos(psi)
//! dV/dbeta  = -A sin(psi)
//! dV/dalpha =  A sin(psi) * dphi0/dx
//! dV/domega = -A sin(psi) * dphi0/domega
//! dalpha/dsa = ca / (sa^2 + ca^2),  dalpha/dca = -sa / (sa^2 + ca^2)
//! ```
//!
//! where `dphi0/dx = omega / D`, `dphi0/domega = -2 s c / D`,
//! `D = omega^2 c^2 + s^2` and `s, c = sin(x/2), cos(x/2)`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    sigmoid_scaled, sigmoid_scaled_derivative, softplus, softplus_derivative, Activation, DenseLayer, ForwardCache,
    Mlp, MlpGrad,
};
use crate::preprocess::Heartbeat;
use crate::wave::{decode, eval_beat, mobius_phase, slot, CoefficientVector, PhaseGrid, N_COEFFS, N_WAVES};

pub const DEFAULT_OMEGA_MAX: f64 = 0.5;
pub const HEAD_HIDDEN: usize = 256;
/// Loss weight of the six R-wave coefficients during warm-up regression.
pub const R_WEIGHT: f64 = 10.0;
const R_SLOT: usize = 2;
// guards atan2 gradients at the origin of a sin/cos pair
const RADIUS_EPS: f64 = 1e-12;

/// How a latent batch is reduced to one row per sample before `fc1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Pooling {
    /// Latent rows are already vectors.
    Identity,
    /// Sequence latents stored row-major as `steps * channels`, used as is.
    Flatten { steps: usize, channels: usize },
    /// Learned weighted sum over time steps, one weight per step.
    Timestep {
        steps: usize,
        channels: usize,
        weights: Array1<f64>,
    },
}

impl Pooling {
    pub fn timestep(steps: usize, channels: usize) -> Pooling {
        Pooling::Timestep {
            steps,
            channels,
            weights: Array1::from_elem(steps, 1.0 / steps as f64),
        }
    }

    fn input_width(&self, out: usize) -> usize {
        match self {
            Pooling::Identity => out,
            Pooling::Flatten { steps, channels } | Pooling::Timestep { steps, channels, .. } => steps * channels,
        }
    }

    fn output_width(&self, latent: usize) -> usize {
        match self {
            Pooling::Identity => latent,
            Pooling::Flatten { steps, channels } => steps * channels,
            Pooling::Timestep { channels, .. } => *channels,
        }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Pooling::Identity | Pooling::Flatten { .. } => x.clone(),
            Pooling::Timestep {
                steps,
                channels,
                weights,
            } => Array2::from_shape_fn((x.nrows(), *channels), |(b, c)| {
                (0..*steps).map(|s| weights[s] * x[[b, s * channels + c]]).sum()
            }),
        }
    }

    /// Returns the weight gradient (if any) and the input gradient.
    fn backward(&self, x: &Array2<f64>, d: Array2<f64>) -> (Option<Array1<f64>>, Array2<f64>) {
        match self {
            Pooling::Identity | Pooling::Flatten { .. } => (None, d),
            Pooling::Timestep {
                steps,
                channels,
                weights,
            } => {
                let gw = Array1::from_shape_fn(*steps, |s| {
                    (0..x.nrows())
                        .map(|b| (0..*channels).map(|c| d[[b, c]] * x[[b, s * channels + c]]).sum::<f64>())
                        .sum()
                });
                let dx = Array2::from_shape_fn(x.raw_dim(), |(b, k)| weights[k / channels] * d[[b, k % channels]]);
                (Some(gw), dx)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OutputKind {
    Offset,
    Amplitude,
    Omega,
    Unit,
}

fn output_kind(i: usize) -> OutputKind {
    if i == 0 {
        return OutputKind::Offset;
    }
    match (i - 1) % 6 {
        slot::A => OutputKind::Amplitude,
        slot::OMEGA => OutputKind::Omega,
        _ => OutputKind::Unit,
    }
}

/// Latent to 31 coefficients through `fc1` (256, tanh) and `fc2` (31, linear).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmmHead {
    pub pooling: Pooling,
    layers: Mlp,
    pub omega_max: f64,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pooled_input: Array2<f64>,
    mlp: ForwardCache,
    pub coefficients: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub pooling: Option<Array1<f64>>,
    pub layers: MlpGrad,
}

impl HeadGrad {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.layers.slices();
        if let Some(p) = &self.pooling {
            out.push(p.as_slice().expect("standard layout"));
        }
        out
    }
}

impl FmmHead {
    pub fn new<R: Rng + ?Sized>(latent: usize, pooling: Pooling, omega_max: f64, rng: &mut R) -> Result<Self> {
        if !(omega_max > 0.0 && omega_max <= 1.0) {
            return Err(Error::validation(format!("omega_max {omega_max} outside (0, 1]")));
        }
        let width = pooling.output_width(latent);
        let layers = Mlp::new(
            &[width, HEAD_HIDDEN, N_COEFFS],
            &[Activation::Tanh, Activation::Linear],
            0.0,
            false,
            rng,
        )?;
        Ok(FmmHead {
            pooling,
            layers,
            omega_max,
        })
    }

    pub fn fc1(&self) -> &DenseLayer {
        &self.layers.layers[0]
    }

    pub fn fc2(&self) -> &DenseLayer {
        &self.layers.layers[1]
    }

    pub fn fc2_mut(&mut self) -> &mut DenseLayer {
        &mut self.layers.layers[1]
    }

    pub fn input_size(&self) -> usize {
        self.pooling.input_width(self.layers.input_size())
    }

    fn map_output(&self, raw: &Array2<f64>) -> Array2<f64> {
        let wmax = self.omega_max;
        Array2::from_shape_fn(raw.raw_dim(), |(b, i)| {
            let z = raw[[b, i]];
            match output_kind(i) {
                OutputKind::Offset => z,
                OutputKind::Amplitude => softplus(z),
                OutputKind::Omega => sigmoid_scaled(z, 0.0, wmax),
                OutputKind::Unit => sigmoid_scaled(z, -1.0, 1.0),
            }
        })
    }

    /// Coefficients for each latent row, with the intermediates for [`FmmHead::backward`].
    pub fn forward<R: Rng + ?Sized>(&self, latent: &Array2<f64>, training: bool, rng: &mut R) -> Result<HeadCache> {
        if latent.ncols() != self.input_size() {
            return Err(Error::structural(format!(
                "head expects latent width {}, got {}",
                self.input_size(),
                latent.ncols()
            )));
        }
        let pooled = self.pooling.apply(latent);
        let mlp = self.layers.forward(&pooled, training, rng)?;
        let coefficients = self.map_output(&mlp.output);
        Ok(HeadCache {
            pooled_input: latent.clone(),
            mlp,
            coefficients,
        })
    }

    pub fn predict(&self, latent: &Array2<f64>) -> Result<Array2<f64>> {
        if latent.ncols() != self.input_size() {
            return Err(Error::structural(format!(
                "head expects latent width {}, got {}",
                self.input_size(),
                latent.ncols()
            )));
        }
        let raw = self.layers.predict(&self.pooling.apply(latent))?;
        Ok(self.map_output(&raw))
    }

    /// Backpropagates a gradient with respect to the coefficients.
    pub fn backward(&self, cache: &HeadCache, d_coeffs: &Array2<f64>) -> Result<(HeadGrad, Array2<f64>)> {
        let raw = &cache.mlp.output;
        if d_coeffs.dim() != raw.dim() {
            return Err(Error::structural("coefficient gradient shape does not match head output"));
        }
        let wmax = self.omega_max;
        let d_raw = Array2::from_shape_fn(raw.raw_dim(), |(b, i)| {
            let z = raw[[b, i]];
            let local = match output_kind(i) {
                OutputKind::Offset => 1.0,
                OutputKind::Amplitude => softplus_derivative(z),
                OutputKind::Omega => sigmoid_scaled_derivative(z, 0.0, wmax),
                OutputKind::Unit => sigmoid_scaled_derivative(z, -1.0, 1.0),
            };
            local * d_coeffs[[b, i]]
        });
        let (layers, d_pooled) = self.layers.backward(&cache.mlp, &d_raw)?;
        let (pooling, d_latent) = self.pooling.backward(&cache.pooled_input, d_pooled);
        Ok((HeadGrad { pooling, layers }, d_latent))
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = self.layers.param_names(&format!("{prefix}fc"));
        if matches!(self.pooling, Pooling::Timestep { .. }) {
            names.push(format!("{prefix}pooling.weights"));
        }
        names
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.layers.param_slices_mut();
        if let Pooling::Timestep { weights, .. } = &mut self.pooling {
            out.push(weights.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = self.layers.param_shapes();
        if let Pooling::Timestep { weights, .. } = &self.pooling {
            out.push(vec![weights.len()]);
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.layers.param_slices();
        if let Pooling::Timestep { weights, .. } = &self.pooling {
            out.push(weights.as_slice().expect("standard layout"));
        }
        out
    }
}

fn check_lens(rows: usize, valid_lens: &[usize], l_pad: usize) -> Result<()> {
    if valid_lens.len() != rows {
        return Err(Error::structural(format!(
            "{} valid lengths for {rows} coefficient rows",
            valid_lens.len()
        )));
    }
    for &v in valid_lens {
        if v == 0 || v > l_pad {
            return Err(Error::validation(format!("valid_len {v} outside [1, {l_pad}]")));
        }
    }
    Ok(())
}

/// Evaluates each coefficient row on a grid of its valid length and zero-pads to `l_pad`.
pub fn reconstruct(coeffs: &Array2<f64>, valid_lens: &[usize], l_pad: usize) -> Result<Array2<f64>> {
    if coeffs.ncols() != N_COEFFS {
        return Err(Error::structural(format!("expected {N_COEFFS} coefficients, got {}", coeffs.ncols())));
    }
    check_lens(coeffs.nrows(), valid_lens, l_pad)?;
    let mut out = Array2::zeros((coeffs.nrows(), l_pad));
    for (b, (row, &v)) in coeffs.outer_iter().zip(valid_lens).enumerate() {
        let cv = CoefficientVector::from_slice(row.as_slice().expect("contiguous rows"))?;
        let beat = eval_beat(&decode(&cv)?, &PhaseGrid::new(v));
        for (i, x) in beat.into_iter().enumerate() {
            out[[b, i]] = x;
        }
    }
    Ok(out)
}

/// Gradient of a loss with respect to the coefficients given its gradient
/// with respect to the reconstructed (padded) signal.
pub fn reconstruct_backward(
    coeffs: &Array2<f64>,
    valid_lens: &[usize],
    d_signal: &Array2<f64>,
) -> Result<Array2<f64>> {
    if coeffs.ncols() != N_COEFFS || d_signal.nrows() != coeffs.nrows() {
        return Err(Error::structural("reconstruction gradient shapes do not match"));
    }
    check_lens(coeffs.nrows(), valid_lens, d_signal.ncols())?;
    let mut grad = Array2::zeros(coeffs.raw_dim());
    for (b, &v) in valid_lens.iter().enumerate() {
        let c = coeffs.row(b);
        let grid = PhaseGrid::new(v);
        let d = d_signal.row(b);
        grad[[b, 0]] = d.iter().take(v).sum();
        for j in 0..N_WAVES {
            let at = |f| c[slot::index(j, f)];
            let (amp, sa, ca, sb, cb, omega) = (
                at(slot::A),
                at(slot::SIN_ALPHA),
                at(slot::COS_ALPHA),
                at(slot::SIN_BETA),
                at(slot::COS_BETA),
                at(slot::OMEGA),
            );
            let alpha = sa.atan2(ca);
            let beta = sb.atan2(cb);
            let (mut g_amp, mut g_alpha, mut g_beta, mut g_omega) = (0.0, 0.0, 0.0, 0.0);
            for (i, t) in grid.iter().enumerate() {
                let (phi, dx, dw) = mobius_phase(t - alpha, omega);
                let (s, co) = (beta + phi).sin_cos();
                let up = d[i];
                g_amp += up * co;
                g_beta -= up * amp * s;
                g_alpha += up * amp * s * dx;
                g_omega -= up * amp * s * dw;
            }
            let ra = sa * sa + ca * ca + RADIUS_EPS;
            let rb = sb * sb + cb * cb + RADIUS_EPS;
            grad[[b, slot::index(j, slot::A)]] = g_amp;
            grad[[b, slot::index(j, slot::SIN_ALPHA)]] = g_alpha * ca / ra;
            grad[[b, slot::index(j, slot::COS_ALPHA)]] = -g_alpha * sa / ra;
            grad[[b, slot::index(j, slot::SIN_BETA)]] = g_beta * cb / rb;
            grad[[b, slot::index(j, slot::COS_BETA)]] = -g_beta * sb / rb;
            grad[[b, slot::index(j, slot::OMEGA)]] = g_omega;
        }
    }
    Ok(grad)
}

/// Default regression weights: 1 everywhere, [`R_WEIGHT`] on the R-wave entries.
pub fn regression_weights() -> [f64; N_COEFFS] {
    let mut w = [1.0; N_COEFFS];
    for f in 0..6 {
        w[slot::index(R_SLOT, f)] = R_WEIGHT;
    }
    w
}

/// Weighted mean squared error over the coefficients, averaged over the batch.
pub fn regression_loss(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    weights: &[f64; N_COEFFS],
) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() || pred.ncols() != N_COEFFS {
        return Err(Error::structural(format!(
            "regression shapes {:?} and {:?} differ or are not {N_COEFFS} wide",
            pred.dim(),
            target.dim()
        )));
    }
    let scale = 1.0 / (N_COEFFS * pred.nrows().max(1)) as f64;
    let diff = pred - target;
    let w = Array1::from(weights.to_vec());
    let loss = (&diff * &diff * &w).sum() * scale;
    let grad = diff * &w * (2.0 * scale);
    Ok((loss, grad))
}

/// Per-beat mean squared error over the valid samples, averaged over the batch.
pub fn reconstruction_loss(pred: &Array2<f64>, beats: &[&Heartbeat]) -> Result<(f64, Array2<f64>)> {
    if pred.nrows() != beats.len() {
        return Err(Error::structural(format!("{} predictions for {} beats", pred.nrows(), beats.len())));
    }
    let batch = beats.len().max(1) as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut loss = 0.0;
    for (b, beat) in beats.iter().enumerate() {
        if beat.samples.len() != pred.ncols() {
            return Err(Error::structural(format!(
                "beat {} has {} samples, prediction has {}",
                beat.id,
                beat.samples.len(),
                pred.ncols()
            )));
        }
        let v = beat.valid_len;
        let mut sse = 0.0;
        for i in 0..v {
            let e = pred[[b, i]] - beat.samples[i];
            sse += e * e;
            grad[[b, i]] = 2.0 * e / (v as f64 * batch);
        }
        loss += sse / v as f64;
    }
    Ok((loss / batch, grad))
}

/// Per-beat mean squared error over the valid samples.
pub fn per_beat_mse(pred: &Array2<f64>, beats: &[&Heartbeat]) -> Vec<f64> {
    pred.axis_iter(Axis(0))
        .zip(beats)
        .map(|(row, beat)| {
            let v = beat.valid_len;
            (0..v).map(|i| (row[i] - beat.samples[i]).powi(2)).sum::<f64>() / v as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::Label;
    use crate::wave::{encode, FmmBeatParams, FmmWave};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn zero_head() -> FmmHead {
        let mut h = FmmHead::new(4, Pooling::Identity, 0.5, &mut rng(1)).unwrap();
        h.fc2_mut().weights.fill(0.0);
        h
    }

    #[test]
    fn zero_preactivation_values() {
        let c = zero_head().predict(&Array2::ones((1, 4))).unwrap();
        for i in 0..N_COEFFS {
            let expected = match output_kind(i) {
                OutputKind::Offset | OutputKind::Unit => 0.0,
                OutputKind::Amplitude => std::f64::consts::LN_2,
                OutputKind::Omega => 0.25,
            };
            assert!((c[[0, i]] - expected).abs() < 1e-15, "index {i}");
        }
    }

    #[test]
    fn range_safety_over_random_latents() {
        let mut r = rng(2);
        let head = FmmHead::new(32, Pooling::Identity, 0.5, &mut r).unwrap();
        let latent = Array2::from_shape_fn((10_000, 32), |_| r.random_range(-5.0..5.0));
        let c = head.predict(&latent).unwrap();
        let mut violations = 0;
        for row in c.outer_iter() {
            for j in 0..N_WAVES {
                let a = row[slot::index(j, slot::A)];
                let w = row[slot::index(j, slot::OMEGA)];
                if !(a >= 0.0 && w > 0.0 && w < 0.5) {
                    violations += 1;
                }
            }
        }
        assert_eq!(violations, 0);
    }

    #[test]
    fn deterministic_for_seed() {
        let latent = Array2::from_elem((2, 8), 0.3);
        let a = FmmHead::new(8, Pooling::Identity, 0.5, &mut rng(7)).unwrap().predict(&latent).unwrap();
        let b = FmmHead::new(8, Pooling::Identity, 0.5, &mut rng(7)).unwrap().predict(&latent).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_shapes_and_omega_max() {
        assert!(FmmHead::new(4, Pooling::Identity, 1.5, &mut rng(0)).is_err());
        let h = zero_head();
        assert!(matches!(h.predict(&Array2::zeros((1, 5))), Err(Error::Structural(_))));
    }

    #[test]
    fn flat_coefficients_reconstruct_constant() {
        let mut c = Array2::zeros((1, N_COEFFS));
        c[[0, 0]] = 0.7;
        for j in 0..N_WAVES {
            c[[0, slot::index(j, slot::OMEGA)]] = 0.1;
        }
        let out = reconstruct(&c, &[10], 16).unwrap();
        let expected: Vec<f64> = [vec![0.7; 10], vec![0.0; 6]].concat();
        assert_eq!(out.row(0).to_vec(), expected);
        assert!(reconstruct(&c, &[17], 16).is_err());
    }

    #[test]
    fn padding_is_zero_per_row() {
        let p = crate::wave::tests::textbook();
        let v = encode(&p).0;
        let c = Array2::from_shape_fn((2, N_COEFFS), |(_, i)| v[i]);
        let out = reconstruct(&c, &[20, 35], 40).unwrap();
        assert!(out.row(0).iter().skip(20).all(|&x| x == 0.0));
        assert!(out.row(1).iter().skip(35).all(|&x| x == 0.0));
        assert!(out.row(1).iter().take(35).all(|&x| x != 0.0));
    }

    #[test]
    fn regression_loss_weighting() {
        let t = Array2::zeros((1, N_COEFFS));
        let mut p = t.clone();
        let w = regression_weights();
        assert_eq!(regression_loss(&p, &t, &w).unwrap().0, 0.0);
        p[[0, slot::index(2, slot::A)]] = 1.0;
        let (loss, _) = regression_loss(&p, &t, &w).unwrap();
        assert!((loss - 10.0 / 31.0).abs() < 1e-15);
    }

    #[test]
    fn regression_gradient_matches_differences() {
        let mut r = rng(4);
        let p = Array2::from_shape_fn((3, N_COEFFS), |_| r.random_range(-1.0..1.0));
        let t = Array2::from_shape_fn((3, N_COEFFS), |_| r.random_range(-1.0..1.0));
        let w = regression_weights();
        let (_, g) = regression_loss(&p, &t, &w).unwrap();
        let h = 1e-6;
        for ((b, i), &a) in g.indexed_iter() {
            let mut pp = p.clone();
            pp[[b, i]] += h;
            let mut pm = p.clone();
            pm[[b, i]] -= h;
            let fd = (regression_loss(&pp, &t, &w).unwrap().0 - regression_loss(&pm, &t, &w).unwrap().0) / (2.0 * h);
            assert!((fd - a).abs() <= 1e-6 * a.abs().max(1e-3), "{fd} vs {a}");
        }
    }

    fn beat(samples: &[f64], valid: usize) -> Heartbeat {
        Heartbeat::padded("x", &samples[..valid], samples.len(), 0, Label::Normal, 100.0).unwrap()
    }

    #[test]
    fn reconstruction_loss_ignores_padding() {
        let b = beat(&[1.0, 2.0, 3.0, 0.0, 0.0], 3);
        let mut pred = Array2::from_shape_vec((1, 5), vec![1.0, 2.0, 3.0, 0.0, 0.0]).unwrap();
        assert_eq!(reconstruction_loss(&pred, &[&b]).unwrap().0, 0.0);
        pred[[0, 4]] = 1.0;
        let (loss, g) = reconstruction_loss(&pred, &[&b]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g[[0, 4]], 0.0);
        pred[[0, 1]] += 0.5;
        let (loss, _) = reconstruction_loss(&pred, &[&b]).unwrap();
        assert!((loss - 0.25 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn reconstruct_gradient_matches_differences() {
        let mut r = rng(5);
        let p = crate::wave::tests::textbook();
        let base = encode(&p).0;
        // perturb off the unit circle so the atan2 chain rule is exercised
        let c = Array2::from_shape_fn((2, N_COEFFS), |(b, i)| match output_kind(i) {
            OutputKind::Unit => base[i] * (0.8 + 0.1 * b as f64) + r.random_range(-0.05..0.05),
            _ => base[i],
        });
        let lens = [30, 24];
        let up = Array2::from_shape_fn((2, 32), |_| r.random_range(-1.0..1.0));
        let g = reconstruct_backward(&c, &lens, &up).unwrap();
        let f = |c: &Array2<f64>| (reconstruct(c, &lens, 32).unwrap() * &up).sum();
        let h = 1e-6;
        for ((b, i), &a) in g.indexed_iter() {
            let mut cp = c.clone();
            cp[[b, i]] += h;
            let mut cm = c.clone();
            cm[[b, i]] -= h;
            let fd = (f(&cp) - f(&cm)) / (2.0 * h);
            assert!((fd - a).abs() <= 1e-5 * fd.abs().max(a.abs()).max(1.0), "[{b},{i}] {fd} vs {a}");
        }
    }

    #[test]
    fn timestep_pooling_gradient() {
        let mut r = rng(6);
        let mut head = FmmHead::new(0, Pooling::timestep(3, 2), 0.5, &mut r).unwrap();
        if let Pooling::Timestep { weights, .. } = &mut head.pooling {
            weights.assign(&Array1::from(vec![0.5, -0.2, 0.9]));
        }
        let x = Array2::from_shape_fn((2, 6), |_| r.random_range(-1.0..1.0));
        let up = Array2::from_shape_fn((2, N_COEFFS), |_| r.random_range(-1.0..1.0));
        let cache = head.forward(&x, false, &mut r).unwrap();
        let (g, dx) = head.backward(&cache, &up).unwrap();
        let gw = g.pooling.unwrap();
        let h = 1e-6;
        let f = |head: &FmmHead, x: &Array2<f64>| (head.predict(x).unwrap() * &up).sum();
        for s in 0..3 {
            let mut hp = head.clone();
            let mut hm = head.clone();
            if let (Pooling::Timestep { weights: wp, .. }, Pooling::Timestep { weights: wm, .. }) =
                (&mut hp.pooling, &mut hm.pooling)
            {
                wp[s] += h;
                wm[s] -= h;
            }
            let fd = (f(&hp, &x) - f(&hm, &x)) / (2.0 * h);
            assert!((fd - gw[s]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        let mut xp = x.clone();
        xp[[1, 3]] += h;
        let mut xm = x.clone();
        xm[[1, 3]] -= h;
        let fd = (f(&head, &xp) - f(&head, &xm)) / (2.0 * h);
        assert!((fd - dx[[1, 3]]).abs() < 1e-6 * fd.abs().max(1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 128, rng_seed: proptest::test_runner::RngSeed::Fixed(17), ..ProptestConfig::default() })]
        #[test]
        fn reconstruct_of_encode_is_eval_beat(
            offset in -1.0f64..1.0,
            amps in proptest::array::uniform5(0.0f64..2.0),
            alphas in proptest::array::uniform5(0.0f64..6.28),
            betas in proptest::array::uniform5(0.0f64..6.28),
            omegas in proptest::array::uniform5(0.01f64..1.0),
            len in 1usize..64,
        ) {
            let waves = std::array::from_fn(|j| FmmWave::new(amps[j], alphas[j], betas[j], omegas[j]).unwrap());
            let p = FmmBeatParams::new(offset, waves).unwrap();
            let v = encode(&p).0;
            let c = Array2::from_shape_fn((1, N_COEFFS), |(_, i)| v[i]);
            let out = reconstruct(&c, &[len], 64).unwrap();
            let direct = eval_beat(&p, &PhaseGrid::new(len));
            for i in 0..len {
                prop_assert!((out[[0, i]] - direct[i]).abs() < 1e-9);
            }
        }
    }
}
