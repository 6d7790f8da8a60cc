//! FMM waves and five-wave heartbeat models.
//!
//! A single wave is `A * cos(phi(t))` with the Möbius phase
//!
//! ```text
//! phi(t) = beta + 2 * atan2(sin((t - alpha) / 2), omega * cos((t - alpha) / 2))
//! ```
//!
//! which equals `beta + 2 * arctan(tan((t - alpha) / 2) / omega)` away from the
//! branch cut. The phase is steepest at `t = alpha` (slope `1 / omega`), so the
//! wave has one sharp lobe centred on `alpha` whose half-width is about
//! `2 * omega`. With `omega = 1` the phase reduces to `beta + (t - alpha)`.
//!
//! A heartbeat is an offset `M` plus five waves, kept in P, Q, R, S, T order.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const TWO_PI: f64 = 2.0 * PI;

/// Number of waves per heartbeat.
pub const N_WAVES: usize = 5;
/// Length of the flat coefficient encoding.
pub const N_COEFFS: usize = 1 + 6 * N_WAVES;
/// Version tag of the coefficient layout, written into file headers.
pub const COEFF_LAYOUT_VERSION: u32 = 1;

/// Reduces an angle to `[0, 2π)`.
pub fn wrap_angle(x: f64) -> f64 {
    let r = x.rem_euclid(TWO_PI);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if r >= TWO_PI {
        0.0
    } else {
        r
    }
}

/// Shortest distance between two angles, in `[0, π]`.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = wrap_angle(a - b);
    d.min(TWO_PI - d)
}

/// Phase compression `2 * atan2(sin(x/2), omega * cos(x/2))` and its partial
/// derivatives with respect to `x` and `omega`.
#[inline]
pub fn mobius_phase(x: f64, omega: f64) -> (f64, f64, f64) {
    let (s, c) = (0.5 * x).sin_cos();
    let den = omega * omega * c * c + s * s;
    let phase = 2.0 * s.atan2(omega * c);
    let d_dx = omega / den;
    let d_domega = -2.0 * s * c / den;
    (phase, d_dx, d_domega)
}

#[inline]
fn mobius_phase_value(x: f64, omega: f64) -> f64 {
    let (s, c) = (0.5 * x).sin_cos();
    2.0 * s.atan2(omega * c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WaveName {
    P,
    Q,
    R,
    S,
    T,
}

impl WaveName {
    pub const ALL: [WaveName; N_WAVES] = [WaveName::P, WaveName::Q, WaveName::R, WaveName::S, WaveName::T];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WaveName::P => "P",
            WaveName::Q => "Q",
            WaveName::R => "R",
            WaveName::S => "S",
            WaveName::T => "T",
        }
    }
}

impl fmt::Display for WaveName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Evenly spaced phases `2π i / n`, `i = 0..n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseGrid {
    n: usize,
}

impl PhaseGrid {
    pub fn new(n: usize) -> Self {
        PhaseGrid { n }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn step(&self) -> f64 {
        TWO_PI / self.n as f64
    }

    #[inline]
    pub fn t(&self, i: usize) -> f64 {
        TWO_PI * i as f64 / self.n as f64
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |i| self.t(i))
    }

    /// Phase of a (possibly fractional) sample index.
    pub fn phase_of(&self, index: f64) -> f64 {
        wrap_angle(TWO_PI * index / self.n as f64)
    }
}

/// One FMM wave. Angles are stored reduced to `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FmmWave {
    pub amplitude: f64,
    pub alpha: f64,
    pub beta: f64,
    pub omega: f64,
}

impl FmmWave {
    pub fn new(amplitude: f64, alpha: f64, beta: f64, omega: f64) -> Result<Self> {
        let w = FmmWave {
            amplitude,
            alpha: wrap_angle(alpha),
            beta: wrap_angle(beta),
            omega,
        };
        w.validate()?;
        Ok(w)
    }

    /// Zero-amplitude wave, used to fill unassigned slots.
    pub fn flat(alpha: f64, omega: f64) -> Self {
        FmmWave {
            amplitude: 0.0,
            alpha: wrap_angle(alpha),
            beta: 0.0,
            omega,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return Err(Error::validation(format!("amplitude must be >= 0, got {}", self.amplitude)));
        }
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::validation(format!("omega must lie in (0, 1], got {}", self.omega)));
        }
        if !(self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::validation("alpha and beta must be finite"));
        }
        Ok(())
    }

    #[inline]
    pub fn phase(&self, t: f64) -> f64 {
        self.beta + mobius_phase_value(t - self.alpha, self.omega)
    }

    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        self.amplitude * self.phase(t).cos()
    }
}

pub fn eval_wave(w: &FmmWave, grid: &PhaseGrid) -> Vec<f64> {
    grid.iter().map(|t| w.value(t)).collect()
}

/// Offset plus five waves in P, Q, R, S, T order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FmmBeatParams {
    pub offset: f64,
    pub waves: [FmmWave; N_WAVES],
}

impl FmmBeatParams {
    pub fn new(offset: f64, waves: [FmmWave; N_WAVES]) -> Result<Self> {
        let p = FmmBeatParams { offset, waves };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.offset.is_finite() {
            return Err(Error::validation("offset M must be finite"));
        }
        for (w, name) in self.waves.iter().zip(WaveName::ALL) {
            w.validate()
                .map_err(|e| Error::validation(format!("wave {name}: {e}")))?;
        }
        Ok(())
    }

    pub fn wave(&self, name: WaveName) -> &FmmWave {
        &self.waves[name.index()]
    }

    pub fn value(&self, t: f64) -> f64 {
        self.offset + self.waves.iter().map(|w| w.value(t)).sum::<f64>()
    }
}

pub fn eval_beat(p: &FmmBeatParams, grid: &PhaseGrid) -> Vec<f64> {
    let mut out = vec![p.offset; grid.len()];
    for w in &p.waves {
        for (o, t) in out.iter_mut().zip(grid.iter()) {
            *o += w.value(t);
        }
    }
    out
}

/// Location and width shared by every lead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharedShape {
    pub alphas: [f64; N_WAVES],
    pub omegas: [f64; N_WAVES],
}

/// Per-lead offset, amplitudes and directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeadParams {
    pub offset: f64,
    pub amplitudes: [f64; N_WAVES],
    pub betas: [f64; N_WAVES],
}

impl LeadParams {
    pub fn assemble(&self, shape: &SharedShape) -> Result<FmmBeatParams> {
        let mut waves = [FmmWave::flat(0.0, 1.0); N_WAVES];
        for j in 0..N_WAVES {
            waves[j] = FmmWave::new(self.amplitudes[j], shape.alphas[j], self.betas[j], shape.omegas[j])?;
        }
        FmmBeatParams::new(self.offset, waves)
    }
}

/// Evaluates a multi-lead beat in which alpha and omega are shared across leads.
pub fn eval_beat_multilead(leads: &[LeadParams], shape: &SharedShape, grid: &PhaseGrid) -> Result<Vec<Vec<f64>>> {
    leads
        .iter()
        .map(|lead| Ok(eval_beat(&lead.assemble(shape)?, grid)))
        .collect()
}

/// Reorders the waves so that alpha ascends around the circle with the R wave
/// in the middle slot. The R wave is `r_hint` when given, otherwise the wave
/// of largest amplitude (the current middle slot wins amplitude ties, then
/// the lowest index). Waves with equal alpha keep their input order.
pub fn canonical_order(p: &FmmBeatParams, r_hint: Option<usize>) -> FmmBeatParams {
    let r = r_hint.filter(|&i| i < N_WAVES).unwrap_or_else(|| {
        let max_a = p.waves.iter().map(|w| w.amplitude).fold(f64::NEG_INFINITY, f64::max);
        if p.waves[2].amplitude == max_a {
            2
        } else {
            p.waves.iter().position(|w| w.amplitude == max_a).unwrap_or(2)
        }
    });
    let alpha_r = p.waves[r].alpha;
    let mut others: Vec<(f64, usize)> = (0..N_WAVES)
        .filter(|&j| j != r)
        .map(|j| (wrap_angle(p.waves[j].alpha - alpha_r), j))
        .collect();
    // stable: ties keep input order
    others.sort_by(|a, b| a.0.total_cmp(&b.0));
    let order = [others[2].1, others[3].1, r, others[0].1, others[1].1];
    FmmBeatParams {
        offset: p.offset,
        waves: order.map(|j| p.waves[j]),
    }
}

/// Flat 31-value encoding: `[M, (A, sin α, cos α, sin β, cos β, ω) × 5]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector(pub [f64; N_COEFFS]);

/// Offsets inside one wave's six-value block.
pub mod slot {
    pub const A: usize = 0;
    pub const SIN_ALPHA: usize = 1;
    pub const COS_ALPHA: usize = 2;
    pub const SIN_BETA: usize = 3;
    pub const COS_BETA: usize = 4;
    pub const OMEGA: usize = 5;

    /// Position of `field` of wave `j` in the flat vector.
    pub const fn index(j: usize, field: usize) -> usize {
        1 + 6 * j + field
    }
}

impl CoefficientVector {
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; N_COEFFS] = values.try_into().map_err(|_| {
            Error::structural(format!("coefficient vector needs {N_COEFFS} values, got {}", values.len()))
        })?;
        Ok(CoefficientVector(arr))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Human-readable column names in layout order.
    pub fn column_names() -> Vec<String> {
        let mut names = vec!["M".to_string()];
        for w in WaveName::ALL {
            for f in ["A", "sin_alpha", "cos_alpha", "sin_beta", "cos_beta", "omega"] {
                names.push(format!("{f}_{w}"));
            }
        }
        names
    }
}

pub fn encode(p: &FmmBeatParams) -> CoefficientVector {
    let mut v = [0.0; N_COEFFS];
    v[0] = p.offset;
    for (j, w) in p.waves.iter().enumerate() {
        let (sa, ca) = w.alpha.sin_cos();
        let (sb, cb) = w.beta.sin_cos();
        v[slot::index(j, slot::A)] = w.amplitude;
        v[slot::index(j, slot::SIN_ALPHA)] = sa;
        v[slot::index(j, slot::COS_ALPHA)] = ca;
        v[slot::index(j, slot::SIN_BETA)] = sb;
        v[slot::index(j, slot::COS_BETA)] = cb;
        v[slot::index(j, slot::OMEGA)] = w.omega;
    }
    CoefficientVector(v)
}

/// Inverse of [`encode`]. Angles come from `atan2`, so sin/cos pairs need
/// not lie on the unit circle.
pub fn decode(v: &CoefficientVector) -> Result<FmmBeatParams> {
    let v = &v.0;
    let mut waves = [FmmWave::flat(0.0, 1.0); N_WAVES];
    for (j, wave) in waves.iter_mut().enumerate() {
        let ia = slot::index(j, slot::A);
        let io = slot::index(j, slot::OMEGA);
        if !(v[ia] >= 0.0) {
            return Err(Error::validation(format!("negative amplitude {} at index {ia}", v[ia])));
        }
        if !(v[io] > 0.0 && v[io] <= 1.0) {
            return Err(Error::validation(format!("omega {} out of (0, 1] at index {io}", v[io])));
        }
        *wave = FmmWave {
            amplitude: v[ia],
            alpha: wrap_angle(v[slot::index(j, slot::SIN_ALPHA)].atan2(v[slot::index(j, slot::COS_ALPHA)])),
            beta: wrap_angle(v[slot::index(j, slot::SIN_BETA)].atan2(v[slot::index(j, slot::COS_BETA)])),
            omega: v[io],
        };
    }
    Ok(FmmBeatParams { offset: v[0], waves })
}

#[derive(Serialize, Deserialize)]
struct WaveJson {
    name: WaveName,
    #[serde(rename = "A")]
    amplitude: f64,
    alpha: f64,
    beta: f64,
    omega: f64,
}

#[derive(Serialize, Deserialize)]
struct BeatJson {
    #[serde(rename = "M")]
    offset: f64,
    waves: Vec<WaveJson>,
}

impl Serialize for FmmBeatParams {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        BeatJson {
            offset: self.offset,
            waves: self
                .waves
                .iter()
                .zip(WaveName::ALL)
                .map(|(w, name)| WaveJson {
                    name,
                    amplitude: w.amplitude,
                    alpha: w.alpha,
                    beta: w.beta,
                    omega: w.omega,
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FmmBeatParams {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = BeatJson::deserialize(d)?;
        if raw.waves.len() != N_WAVES {
            return Err(D::Error::custom(format!("expected {N_WAVES} waves, got {}", raw.waves.len())));
        }
        let mut waves = [FmmWave::flat(0.0, 1.0); N_WAVES];
        for (slot, (w, expected)) in waves.iter_mut().zip(raw.waves.iter().zip(WaveName::ALL)) {
            if w.name != expected {
                return Err(D::Error::custom(format!("wave {} out of order, expected {expected}", w.name)));
            }
            *slot = FmmWave::new(w.amplitude, w.alpha, w.beta, w.omega).map_err(D::Error::custom)?;
        }
        FmmBeatParams::new(raw.offset, waves).map_err(D::Error::custom)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wave(a: f64, alpha: f64, beta: f64, omega: f64) -> FmmWave {
        FmmWave::new(a, alpha, beta, omega).unwrap()
    }

    pub(crate) fn textbook() -> FmmBeatParams {
        FmmBeatParams::new(
            0.1,
            [
                wave(0.15, 1.3, 0.1, 0.15),
                wave(0.2, 2.25, PI, 0.04),
                wave(1.2, 2.51, 0.0, 0.05),
                wave(0.3, 2.8, PI, 0.05),
                wave(0.35, 4.6, 0.2, 0.25),
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_amplitude_is_flat() {
        let out = eval_wave(&wave(0.0, 1.0, 2.0, 0.3), &PhaseGrid::new(8));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_omega_is_plain_cosine() {
        let out = eval_wave(&wave(1.0, 0.0, 0.0, 1.0), &PhaseGrid::new(4));
        let expected = [1.0, 0.0, -1.0, 0.0];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-12, "{out:?}");
        }
    }

    /// Independent reference: the tangent form evaluated away from its pole.
    fn reference_value(a: f64, alpha: f64, beta: f64, omega: f64, t: f64) -> f64 {
        let half = (t - alpha) / 2.0;
        let mut phi = beta + 2.0 * (half.tan() / omega).atan();
        // the tangent form jumps by 2π across the pole, which cos ignores
        if !phi.is_finite() {
            phi = beta + PI;
        }
        a * phi.cos()
    }

    #[test]
    fn sharp_wave_matches_reference_and_peaks_at_alpha() {
        let (a, alpha, beta, omega) = (2.0, PI, PI / 2.0, 0.1);
        let grid = PhaseGrid::new(512);
        let out = eval_wave(&wave(a, alpha, beta, omega), &grid);
        for (i, v) in out.iter().enumerate() {
            let t = grid.t(i);
            if (t - alpha - PI).abs() > 1e-9 && (t - alpha + PI).abs() > 1e-9 {
                assert!((v - reference_value(a, alpha, beta, omega, t)).abs() < 1e-12);
            }
        }
        // steepest change sits on alpha
        let (imax, _) = out
            .windows(2)
            .map(|w| (w[1] - w[0]).abs())
            .enumerate()
            .fold((0, 0.0), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });
        let centre = alpha / grid.step();
        assert!((imax as f64 + 0.5 - centre).abs() <= 2.0, "imax={imax}, centre={centre}");
        // one sign change of the derivative on each side of alpha
        let extrema: Vec<usize> = out
            .windows(3)
            .enumerate()
            .filter(|(_, w)| (w[1] - w[0]) * (w[2] - w[1]) < 0.0)
            .map(|(i, _)| i + 1)
            .collect();
        assert_eq!(extrema.len(), 2, "{extrema:?}");
    }

    #[test]
    fn periodic_in_t() {
        let w = wave(1.3, 0.7, 2.1, 0.07);
        for i in 0..200 {
            let t = i as f64 * 0.0317;
            assert!((w.value(t) - w.value(t + TWO_PI)).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_omega_phase_is_shift() {
        let w = wave(1.0, 1.1, 0.4, 1.0);
        for i in 0..100 {
            let t = i as f64 * 0.063;
            let d = wrap_angle(w.phase(t) - (w.beta + t - w.alpha));
            assert!(d.min(TWO_PI - d) < 1e-12);
        }
    }

    #[test]
    fn constant_beat() {
        let p = FmmBeatParams::new(3.5, [FmmWave::flat(1.0, 0.3); 5]).unwrap();
        assert!(eval_beat(&p, &PhaseGrid::new(10)).iter().all(|&v| v == 3.5));
    }

    #[test]
    fn single_wave_beat_equals_wave() {
        let w = wave(0.8, 2.0, 1.0, 0.2);
        let mut waves = [FmmWave::flat(0.0, 0.5); 5];
        waves[2] = w;
        let p = FmmBeatParams::new(0.0, waves).unwrap();
        let grid = PhaseGrid::new(64);
        assert_eq!(eval_beat(&p, &grid), eval_wave(&w, &grid));
    }

    #[test]
    fn beat_is_additive() {
        let p = textbook();
        let grid = PhaseGrid::new(300);
        let beat = eval_beat(&p, &grid);
        let parts: Vec<Vec<f64>> = p.waves.iter().map(|w| eval_wave(w, &grid)).collect();
        for i in 0..grid.len() {
            let s = p.offset + parts.iter().map(|v| v[i]).sum::<f64>();
            assert!((beat[i] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn textbook_beat_golden() {
        // Frozen from an independent numpy evaluation of the tangent form.
        let out = eval_beat(&textbook(), &PhaseGrid::new(20));
        let golden = [
            -1.07193432398589,
            -1.0663197525238521,
            -1.0395999735723254,
            -0.9578320006648648,
            -0.7910768217566598,
            -0.9264966103957504,
            -1.0033078825963455,
            -1.1329053241462566,
            1.2486442734091705,
            -1.3867984389941437,
            -1.0002949192097352,
            -0.947302618809051,
            -0.8611016644426277,
            -0.6959789691636938,
            -0.45304317967272206,
            -0.4676191524944732,
            -0.7669676404936363,
            -0.9507942166490496,
            -1.0297156549938073,
            -1.0620237914213482,
        ];
        for (o, g) in out.iter().zip(golden) {
            assert!((o - g).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn multilead() {
        let p = textbook();
        let shape = SharedShape {
            alphas: p.waves.map(|w| w.alpha),
            omegas: p.waves.map(|w| w.omega),
        };
        let lead1 = LeadParams {
            offset: p.offset,
            amplitudes: p.waves.map(|w| w.amplitude),
            betas: p.waves.map(|w| w.beta),
        };
        let grid = PhaseGrid::new(128);
        let one = eval_beat_multilead(&[lead1], &shape, &grid).unwrap();
        assert_eq!(one[0], eval_beat(&p, &grid));

        let two = eval_beat_multilead(&[lead1, lead1], &shape, &grid).unwrap();
        assert_eq!(two[0], two[1]);

        let lead2 = LeadParams {
            offset: lead1.offset + 1.0,
            amplitudes: lead1.amplitudes.map(|a| 2.0 * a),
            betas: lead1.betas,
        };
        let out = eval_beat_multilead(&[lead1, lead2], &shape, &grid).unwrap();
        for (x1, x2) in out[0].iter().zip(&out[1]) {
            let expected = 2.0 * (x1 - lead1.offset) + (lead1.offset + 1.0);
            assert!((x2 - expected).abs() < 1e-12);
        }
        assert!(eval_beat_multilead(&[], &shape, &grid).unwrap().is_empty());
    }

    #[test]
    fn encode_unit_circle_values() {
        let mut p = textbook();
        for w in p.waves.iter_mut() {
            w.alpha = 0.0;
        }
        let v = encode(&p);
        for j in 0..5 {
            assert_eq!(v.0[slot::index(j, slot::SIN_ALPHA)], 0.0);
            assert_eq!(v.0[slot::index(j, slot::COS_ALPHA)], 1.0);
        }
        p.waves[0].alpha = PI / 2.0;
        p.waves[0].beta = 3.0 * PI / 2.0;
        let v = encode(&p);
        let expected = [1.0, 0.0, -1.0, 0.0];
        for (k, e) in expected.iter().enumerate() {
            assert!((v.0[2 + k] - e).abs() < 1e-15);
        }
    }

    #[test]
    fn decode_radius_invariant() {
        let mut v = encode(&textbook());
        v.0[slot::index(1, slot::SIN_ALPHA)] = 0.0;
        v.0[slot::index(1, slot::COS_ALPHA)] = 1.0;
        assert_eq!(decode(&v).unwrap().waves[1].alpha, 0.0);
        v.0[slot::index(1, slot::SIN_ALPHA)] = 0.6;
        v.0[slot::index(1, slot::COS_ALPHA)] = 0.8;
        let a1 = decode(&v).unwrap().waves[1].alpha;
        v.0[slot::index(1, slot::SIN_ALPHA)] = 0.3;
        v.0[slot::index(1, slot::COS_ALPHA)] = 0.4;
        let a2 = decode(&v).unwrap().waves[1].alpha;
        assert!((a1 - a2).abs() < 1e-15);
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(CoefficientVector::from_slice(&[0.0; 30]), Err(Error::Structural(_))));
        let mut v = encode(&textbook());
        v.0[slot::index(3, slot::A)] = -0.1;
        match decode(&v) {
            Err(Error::Validation(msg)) => assert!(msg.contains("index 19"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let mut v = encode(&textbook());
        v.0[slot::index(0, slot::OMEGA)] = 1.5;
        match decode(&v) {
            Err(Error::Validation(msg)) => assert!(msg.contains("index 6"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn canonical_order_fixed_points_and_ties() {
        let p = textbook();
        assert_eq!(canonical_order(&p, None), p);

        let mut tied = p;
        tied.waves[3].alpha = tied.waves[4].alpha;
        tied.waves[3].amplitude = 0.31;
        let out = canonical_order(&tied, None);
        assert_eq!(out.waves[3], tied.waves[3]);
        assert_eq!(out.waves[4], tied.waves[4]);
    }

    #[test]
    fn json_shape() {
        let json = serde_json::to_value(textbook()).unwrap();
        assert_eq!(json["M"], 0.1);
        assert_eq!(json["waves"][2]["name"], "R");
        assert_eq!(json["waves"][2]["A"], 1.2);
        let back: FmmBeatParams = serde_json::from_value(json).unwrap();
        assert_eq!(back, textbook());
    }

    pub(crate) fn arb_params() -> impl Strategy<Value = FmmBeatParams> {
        let w = (0.0..3.0f64, 0.0..TWO_PI, 0.0..TWO_PI, 0.001..=1.0f64);
        (-2.0..2.0f64, [w.clone(), w.clone(), w.clone(), w.clone(), w]).prop_map(|(m, ws)| {
            FmmBeatParams::new(m, ws.map(|(a, al, be, om)| FmmWave::new(a, al, be, om).unwrap())).unwrap()
        })
    }

    fn angle_close(a: f64, b: f64, tol: f64) -> bool {
        circular_distance(a, b) < tol
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 1000, rng_seed: proptest::test_runner::RngSeed::Fixed(11), ..ProptestConfig::default() })]

        #[test]
        fn encode_decode_roundtrip(p in arb_params()) {
            let v = encode(&p);
            for j in 0..5 {
                let sa = v.0[slot::index(j, slot::SIN_ALPHA)];
                let ca = v.0[slot::index(j, slot::COS_ALPHA)];
                prop_assert!((sa * sa + ca * ca - 1.0).abs() < 1e-9);
            }
            let q = decode(&v).unwrap();
            prop_assert!((q.offset - p.offset).abs() < 1e-9);
            for (a, b) in p.waves.iter().zip(&q.waves) {
                prop_assert!((a.amplitude - b.amplitude).abs() < 1e-9);
                prop_assert!((a.omega - b.omega).abs() < 1e-9);
                prop_assert!(angle_close(a.alpha, b.alpha, 1e-9));
                prop_assert!(angle_close(a.beta, b.beta, 1e-9));
            }
            let v2 = encode(&q);
            for (x, y) in v.0.iter().zip(v2.0.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 256, rng_seed: proptest::test_runner::RngSeed::Fixed(5), ..ProptestConfig::default() })]

        #[test]
        fn canonical_order_sorts_and_is_idempotent(p in arb_params(), perm in Just([0usize, 1, 2, 3, 4]).prop_shuffle()) {
            let shuffled = FmmBeatParams { offset: p.offset, waves: perm.map(|i| p.waves[i]) };
            let c = canonical_order(&shuffled, None);
            // same multiset
            let key = |w: &FmmWave| (w.alpha.to_bits(), w.amplitude.to_bits(), w.beta.to_bits(), w.omega.to_bits());
            let mut a: Vec<_> = shuffled.waves.iter().map(key).collect();
            let mut b: Vec<_> = c.waves.iter().map(key).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
            // R is a maximal-amplitude wave and alpha ascends after rotating to start at P
            let max_a = c.waves.iter().map(|w| w.amplitude).fold(0.0, f64::max);
            prop_assert_eq!(c.waves[2].amplitude, max_a);
            // relative to R, the two after come first, the two before come last
            let rel: Vec<f64> = c.waves.iter().map(|w| wrap_angle(w.alpha - c.waves[2].alpha)).collect();
            prop_assert!(rel[3] <= rel[4] && rel[4] <= rel[0] && rel[0] <= rel[1]);
            prop_assert_eq!(canonical_order(&c, None), c);
        }
    }
}
