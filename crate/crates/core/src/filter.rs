//! Butterworth biquad cascades and zero-phase (forward-backward) filtering.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// One second-order section in transposed direct form II, `a0` normalised to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Gain at DC.
    pub fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// State that makes a constant input `u` a steady state.
    fn steady_state(&self, u: f64) -> [f64; 2] {
        let y = self.dc_gain() * u;
        let z2 = self.b[2] * u - self.a[1] * y;
        let z1 = self.b[1] * u - self.a[0] * y + z2;
        [z1, z2]
    }

    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        for v in x.iter_mut() {
            let xin = *v;
            let y = self.b[0] * xin + z[0];
            z[0] = self.b[1] * xin - self.a[0] * y + z[1];
            z[1] = self.b[2] * xin - self.a[1] * y;
            *v = y;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sos(pub Vec<Biquad>);

#[derive(Debug, Clone, Copy)]
enum Kind {
    Low,
    High,
}

fn butterworth(order: usize, cutoff_hz: f64, fs: f64, kind: Kind) -> Result<Sos> {
    if order == 0 || order % 2 != 0 {
        return Err(Error::validation(format!("filter order must be even and positive, got {order}")));
    }
    if !(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0) {
        return Err(Error::validation(format!(
            "cutoff {cutoff_hz} Hz must lie in (0, {}) Hz",
            fs / 2.0
        )));
    }
    // bilinear transform with pre-warping
    let k = (PI * cutoff_hz / fs).tan();
    let k2 = k * k;
    let sections = (0..order / 2)
        .map(|i| {
            let damping = 2.0 * (PI * (2 * i + 1) as f64 / (2 * order) as f64).sin();
            let a0 = 1.0 + damping * k + k2;
            let a = [2.0 * (k2 - 1.0) / a0, (1.0 - damping * k + k2) / a0];
            let b = match kind {
                Kind::Low => [k2 / a0, 2.0 * k2 / a0, k2 / a0],
                Kind::High => [1.0 / a0, -2.0 / a0, 1.0 / a0],
            };
            Biquad { b, a }
        })
        .collect();
    Ok(Sos(sections))
}

pub fn butter_lowpass(order: usize, cutoff_hz: f64, fs: f64) -> Result<Sos> {
    butterworth(order, cutoff_hz, fs, Kind::Low)
}

pub fn butter_highpass(order: usize, cutoff_hz: f64, fs: f64) -> Result<Sos> {
    butterworth(order, cutoff_hz, fs, Kind::High)
}

/// High-pass at `low_hz` cascaded with low-pass at `high_hz`.
pub fn butter_bandpass(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Result<Sos> {
    if low_hz >= high_hz {
        return Err(Error::validation("band-pass needs low < high"));
    }
    let mut sos = butter_highpass(order, low_hz, fs)?;
    sos.0.extend(butter_lowpass(order, high_hz, fs)?.0);
    Ok(sos)
}

impl Sos {
    /// Magnitude-squared response at `f_hz`.
    pub fn power_response(&self, f_hz: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f_hz / fs;
        let (c1, s1) = (w.cos(), -w.sin());
        let (c2, s2) = ((2.0 * w).cos(), -(2.0 * w).sin());
        self.0
            .iter()
            .map(|q| {
                let nr = q.b[0] + q.b[1] * c1 + q.b[2] * c2;
                let ni = q.b[1] * s1 + q.b[2] * s2;
                let dr = 1.0 + q.a[0] * c1 + q.a[1] * c2;
                let di = q.a[0] * s1 + q.a[1] * s2;
                (nr * nr + ni * ni) / (dr * dr + di * di)
            })
            .product()
    }

    /// Causal filtering, each section started in steady state for `x[0]`.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.filter_in_place(&mut y);
        y
    }

    fn filter_in_place(&self, y: &mut [f64]) {
        for q in &self.0 {
            let Some(&first) = y.first() else { return };
            let z = q.steady_state(first);
            q.run(y, z);
        }
    }

    /// Zero-phase forward-backward filtering with odd reflection of `pad`
    /// samples at each edge.
    pub fn filtfilt(&self, x: &[f64], pad: usize) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = pad.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.filter_in_place(&mut ext);
        ext.reverse();
        self.filter_in_place(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}
