//! Optimisation-based FMM coefficient extraction for one heartbeat.
//!
//! The fitter alternates two phases:
//!
//! * **fitting**: one wave at a time is fitted to the current residual. For
//!   fixed `(alpha, omega)` the wave plus offset is linear,
//!   `M + a cos(phi0) + b sin(phi0)` with `a = A cos(beta)` and
//!   `b = -A sin(beta)`, so an `(alpha, omega)` grid is scanned with a closed
//!   form least-squares solve per cell and the best cell is refined by
//!   coordinate descent;
//! * **assignation**: from up to `max_waves` candidates, five are labelled
//!   P, Q, R, S, T around the known R-peak phase.
//!
//! Candidates are found greedily and refined by backfitting sweeps. Two
//! routes then produce five labelled waves: assigning the candidates
//! directly, or trying every choice of two waves on each side of R, taken
//! from the raw candidates and from all candidates polished jointly with
//! Levenberg-Marquardt. Each route ends with a joint polish of its five
//! waves; the lower residual wins.

use std::f64::consts::PI;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::Heartbeat;
use crate::wave::{
    canonical_order, circular_distance, mobius_phase, wrap_angle, FmmBeatParams, FmmWave, PhaseGrid, N_WAVES,
    TWO_PI,
};

/// Absolute lower bound on omega; see [`omega_floor`] for the per-length bound.
pub const OMEGA_FLOOR: f64 = 1e-3;
/// Candidates weaker than this fraction of the R amplitude are ignored during assignation.
pub const ASSIGN_AMPLITUDE_FLOOR: f64 = 0.03;
const MIN_SINGLE_LEN: usize = 16;
const MIN_BEAT_LEN: usize = 32;
const PLACEHOLDER_OMEGA: f64 = 0.1;
const LM_MAX_ITERS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub alpha_grid_size: usize,
    pub omega_grid: Vec<f64>,
    pub max_waves: usize,
    pub n_backfit_passes: usize,
    pub refine_iters: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        // 16 log-spaced widths in [0.01, 1]
        let omega_grid = (0..16).map(|k| 10f64.powf(-2.0 + 2.0 * k as f64 / 15.0)).collect();
        FitConfig {
            alpha_grid_size: 64,
            omega_grid,
            max_waves: 7,
            n_backfit_passes: 2,
            refine_iters: 30,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_grid_size == 0 || self.omega_grid.is_empty() {
            return Err(Error::validation("fit grids must be non-empty"));
        }
        if self.max_waves < N_WAVES {
            return Err(Error::validation(format!("max_waves must be >= {N_WAVES}")));
        }
        if self.omega_grid.iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
            return Err(Error::validation("omega grid values must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: FmmBeatParams,
    pub residual_rmse: f64,
    pub r2: f64,
    pub waves_considered: usize,
    /// RMSE of the candidate model after the greedy stage and after each backfitting sweep.
    pub pass_rmse: Vec<f64>,
}

/// Least-squares fit of `M + a c + b s` to `r`; returns `(M, a, b, sse)`.
#[derive(Debug, Clone, Copy)]
struct LinearFit {
    offset: f64,
    a: f64,
    b: f64,
    sse: f64,
}

impl LinearFit {
    fn wave(&self, alpha: f64, omega: f64) -> FmmWave {
        FmmWave {
            amplitude: self.a.hypot(self.b),
            alpha: wrap_angle(alpha),
            beta: wrap_angle((-self.b).atan2(self.a)),
            omega,
        }
    }
}

/// Column sums of the basis needed for the centred normal equations.
#[derive(Debug, Clone, Copy, Default)]
struct Gram {
    sc: f64,
    ss: f64,
    scc: f64,
    scs: f64,
    sss: f64,
}

impl Gram {
    fn of(c: &[f64], s: &[f64]) -> Gram {
        let mut g = Gram::default();
        for (&ci, &si) in c.iter().zip(s) {
            g.sc += ci;
            g.ss += si;
            g.scc += ci * ci;
            g.scs += ci * si;
            g.sss += si * si;
        }
        g
    }
}

/// Residual statistics shared by every grid cell.
#[derive(Debug, Clone, Copy)]
struct Target {
    n: f64,
    sum: f64,
    centred_ss: f64,
}

impl Target {
    fn of(r: &[f64]) -> Target {
        let n = r.len() as f64;
        let sum: f64 = r.iter().sum();
        let mean = sum / n;
        Target {
            n,
            sum,
            centred_ss: r.iter().map(|v| (v - mean) * (v - mean)).sum(),
        }
    }
}

fn solve_linear(t: &Target, g: &Gram, rc: f64, rs: f64) -> LinearFit {
    // centre the basis against the intercept, then solve the 2x2 system
    let n = t.n;
    let mean_r = t.sum / n;
    let (mc, ms) = (g.sc / n, g.ss / n);
    let cc = g.scc - n * mc * mc;
    let cs = g.scs - n * mc * ms;
    let ss = g.sss - n * ms * ms;
    let yc = rc - n * mean_r * mc;
    let ys = rs - n * mean_r * ms;
    let ridge = 1e-12 * (cc + ss) + 1e-300;
    let (cc, ss) = (cc + ridge, ss + ridge);
    let det = cc * ss - cs * cs;
    let (a, b) = if det > 1e-14 * cc * ss {
        ((ss * yc - cs * ys) / det, (cc * ys - cs * yc) / det)
    } else if cc >= ss {
        (yc / cc, 0.0)
    } else {
        (0.0, ys / ss)
    };
    let sse = (t.centred_ss - (a * yc + b * ys)).max(0.0);
    LinearFit {
        offset: mean_r - a * mc - b * ms,
        a,
        b,
        sse,
    }
}

/// Precomputed `cos(phi0)`, `sin(phi0)` for every `(alpha, omega)` grid cell.
struct Basis {
    n: usize,
    alphas: Vec<f64>,
    omegas: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
    gram: Vec<Gram>,
}

impl Basis {
    fn new(grid: &PhaseGrid, cfg: &FitConfig) -> Basis {
        let n = grid.len();
        let alphas: Vec<f64> = (0..cfg.alpha_grid_size)
            .map(|i| TWO_PI * i as f64 / cfg.alpha_grid_size as f64)
            .collect();
        let floor = omega_floor(n);
        let mut omegas: Vec<f64> = cfg.omega_grid.iter().copied().filter(|&w| w >= floor).collect();
        if omegas.is_empty() {
            omegas.push(floor);
        }
        let cells = alphas.len() * omegas.len();
        let mut cos = Vec::with_capacity(cells * n);
        let mut sin = Vec::with_capacity(cells * n);
        let mut gram = Vec::with_capacity(cells);
        for &alpha in &alphas {
            for &omega in &omegas {
                let start = cos.len();
                for t in grid.iter() {
                    let (phi, _, _) = mobius_phase(t - alpha, omega);
                    let (s, c) = phi.sin_cos();
                    cos.push(c);
                    sin.push(s);
                }
                gram.push(Gram::of(&cos[start..], &sin[start..]));
            }
        }
        Basis {
            n,
            alphas,
            omegas,
            cos,
            sin,
            gram,
        }
    }

    /// Best grid cell for residual `r`: `(alpha, omega, fit)`.
    fn scan(&self, r: &[f64]) -> (f64, f64, LinearFit) {
        let target = Target::of(r);
        let mut best: Option<(f64, f64, LinearFit)> = None;
        for (ia, &alpha) in self.alphas.iter().enumerate() {
            for (iw, &omega) in self.omegas.iter().enumerate() {
                let cell = ia * self.omegas.len() + iw;
                let c = &self.cos[cell * self.n..(cell + 1) * self.n];
                let s = &self.sin[cell * self.n..(cell + 1) * self.n];
                let (mut rc, mut rs) = (0.0, 0.0);
                for ((&ri, &ci), &si) in r.iter().zip(c).zip(s) {
                    rc += ri * ci;
                    rs += ri * si;
                }
                let fit = solve_linear(&target, &self.gram[cell], rc, rs);
                if best.as_ref().is_none_or(|b| fit.sse < b.2.sse) {
                    best = Some((alpha, omega, fit));
                }
            }
        }
        best.expect("grids are non-empty")
    }
}

fn fit_at(r: &[f64], target: &Target, grid: &PhaseGrid, alpha: f64, omega: f64) -> LinearFit {
    let mut c = Vec::with_capacity(r.len());
    let mut s = Vec::with_capacity(r.len());
    for t in grid.iter() {
        let (phi, _, _) = mobius_phase(t - alpha, omega);
        let (si, ci) = phi.sin_cos();
        c.push(ci);
        s.push(si);
    }
    let g = Gram::of(&c, &s);
    let (mut rc, mut rs) = (0.0, 0.0);
    for ((&ri, &ci), &si) in r.iter().zip(&c).zip(&s) {
        rc += ri * ci;
        rs += ri * si;
    }
    solve_linear(target, &g, rc, rs)
}

/// Coordinate descent on `(alpha, log omega)` starting from a grid cell.
fn refine(
    r: &[f64],
    grid: &PhaseGrid,
    cfg: &FitConfig,
    mut alpha: f64,
    mut omega: f64,
    mut best: LinearFit,
) -> (f64, f64, LinearFit) {
    let target = Target::of(r);
    let mut step_alpha = PI / cfg.alpha_grid_size as f64;
    let mut step_log_omega = omega_grid_log_step(cfg) / 2.0;
    for _ in 0..cfg.refine_iters {
        let mut improved = false;
        for da in [step_alpha, -step_alpha] {
            let fit = fit_at(r, &target, grid, alpha + da, omega);
            if fit.sse < best.sse {
                alpha = wrap_angle(alpha + da);
                best = fit;
                improved = true;
                break;
            }
        }
        for dw in [step_log_omega, -step_log_omega] {
            let w = (omega * dw.exp()).clamp(omega_floor(r.len()), 1.0);
            if w == omega {
                continue;
            }
            let fit = fit_at(r, &target, grid, alpha, w);
            if fit.sse < best.sse {
                omega = w;
                best = fit;
                improved = true;
                break;
            }
        }
        if !improved {
            step_alpha /= 2.0;
            step_log_omega /= 2.0;
        }
    }
    (alpha, omega, best)
}

/// Smallest omega for a beat of `n` samples. Narrower waves span less than
/// a quarter sample and act as single-sample spikes traded against the offset.
pub fn omega_floor(n: usize) -> f64 {
    OMEGA_FLOOR.max(PI / (2.0 * n as f64))
}

fn omega_grid_log_step(cfg: &FitConfig) -> f64 {
    let (lo, hi) = cfg
        .omega_grid
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &w| (lo.min(w), hi.max(w)));
    if cfg.omega_grid.len() > 1 {
        (hi / lo).ln() / (cfg.omega_grid.len() - 1) as f64
    } else {
        0.5
    }
}

fn is_degenerate(r: &[f64]) -> bool {
    let t = Target::of(r);
    let scale = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    t.centred_ss <= 1e-24 * t.n * (1.0 + scale * scale)
}

/// Fits one wave plus an offset increment to `residual`.
pub fn fit_single_wave(residual: &[f64], grid: &PhaseGrid, cfg: &FitConfig) -> Result<(FmmWave, f64)> {
    cfg.validate()?;
    if residual.len() < MIN_SINGLE_LEN || residual.len() != grid.len() {
        return Err(Error::validation(format!(
            "residual needs at least {MIN_SINGLE_LEN} samples matching the grid, got {} (grid {})",
            residual.len(),
            grid.len()
        )));
    }
    let basis = Basis::new(grid, cfg);
    Ok(single_wave(residual, grid, cfg, &basis))
}

fn single_wave(r: &[f64], grid: &PhaseGrid, cfg: &FitConfig, basis: &Basis) -> (FmmWave, f64) {
    if is_degenerate(r) {
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        return (FmmWave::flat(0.0, 1.0), mean);
    }
    let (alpha, omega, fit) = basis.scan(r);
    let (alpha, omega, fit) = refine(r, grid, cfg, alpha, omega, fit);
    (fit.wave(alpha, omega), fit.offset)
}

fn sse_of(x: &[f64], offset: f64, waves: &[FmmWave], grid: &PhaseGrid) -> f64 {
    x.iter()
        .zip(grid.iter())
        .map(|(&xi, t)| {
            let e = xi - offset - waves.iter().map(|w| w.value(t)).sum::<f64>();
            e * e
        })
        .sum()
}

fn partial_residual(x: &[f64], waves: &[FmmWave], skip: usize, grid: &PhaseGrid) -> Vec<f64> {
    x.iter()
        .zip(grid.iter())
        .map(|(&xi, t)| {
            xi - waves
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != skip)
                .map(|(_, w)| w.value(t))
                .sum::<f64>()
        })
        .collect()
}

/// Picks P, Q, R, S, T from fitted candidates around the expected R phase.
///
/// R is the strongest candidate within π/4 of `r_peak_phase` (strongest
/// overall if none is that close). Q and S are the nearest candidates before
/// and after R; P and T are the strongest candidates further out on each
/// side. Candidates below [`ASSIGN_AMPLITUDE_FLOOR`] times the R amplitude
/// are skipped. Empty slots get zero-amplitude waves in the middle of their
/// arc.
pub fn assign_waves(candidates: &[FmmWave], r_peak_phase: f64) -> Result<[FmmWave; N_WAVES]> {
    if candidates.len() < N_WAVES {
        return Err(Error::validation(format!(
            "need at least {N_WAVES} candidates, got {}",
            candidates.len()
        )));
    }
    let strongest = |it: &mut dyn Iterator<Item = usize>| {
        it.max_by(|&a, &b| candidates[a].amplitude.total_cmp(&candidates[b].amplitude))
    };
    let near: Vec<usize> = (0..candidates.len())
        .filter(|&i| circular_distance(candidates[i].alpha, r_peak_phase) < PI / 4.0)
        .collect();
    let r = strongest(&mut near.iter().copied())
        .or_else(|| strongest(&mut (0..candidates.len())))
        .expect("non-empty");
    let rw = candidates[r];
    let floor = ASSIGN_AMPLITUDE_FLOOR * rw.amplitude;

    // signed offset from R in (-π, π]
    let offset = |w: &FmmWave| {
        let d = wrap_angle(w.alpha - rw.alpha);
        if d > PI {
            d - TWO_PI
        } else {
            d
        }
    };
    let pool: Vec<(f64, usize)> = (0..candidates.len())
        .filter(|&i| i != r && candidates[i].amplitude > floor)
        .map(|i| (offset(&candidates[i]), i))
        .collect();

    let q = pool
        .iter()
        .filter(|(s, _)| *s < 0.0)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .copied();
    let s = pool
        .iter()
        .filter(|(s, _)| *s >= 0.0)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .copied();
    let q_off = q.map_or(-PI / 2.0, |x| x.0);
    let s_off = s.map_or(PI / 2.0, |x| x.0);
    let best_in = |lo: f64, hi: f64| {
        pool.iter()
            .filter(|(o, i)| *o > lo && *o < hi && Some(*i) != q.map(|x| x.1) && Some(*i) != s.map(|x| x.1))
            .max_by(|a, b| candidates[a.1].amplitude.total_cmp(&candidates[b.1].amplitude))
            .copied()
    };
    let p = best_in(-PI - 1e-12, q_off);
    let t = best_in(s_off, PI + 1e-12);

    let pick = |slot: Option<(f64, usize)>, mid: f64| match slot {
        Some((_, i)) => candidates[i],
        None => FmmWave::flat(rw.alpha + mid, PLACEHOLDER_OMEGA),
    };
    let waves = [
        pick(p, (-PI + q_off) / 2.0),
        pick(q, -PI / 2.0),
        rw,
        pick(s, PI / 2.0),
        pick(t, (s_off + PI) / 2.0),
    ];
    let ordered = canonical_order(&FmmBeatParams { offset: 0.0, waves }, Some(2));
    Ok(ordered.waves)
}

/// Joint Levenberg-Marquardt polish of the offset and every wave in `waves`.
fn polish(x: &[f64], grid: &PhaseGrid, offset: f64, waves: &[FmmWave]) -> (f64, Vec<FmmWave>) {
    let k = waves.len();
    let p = 1 + 4 * k;
    let n = x.len();
    let floor = omega_floor(n);
    // theta = [M, (a, b, alpha, omega) x k]
    let mut theta = vec![0.0; p];
    theta[0] = offset;
    for (j, w) in waves.iter().enumerate() {
        let (sb, cb) = w.beta.sin_cos();
        theta[1 + 4 * j] = w.amplitude * cb;
        theta[2 + 4 * j] = -w.amplitude * sb;
        theta[3 + 4 * j] = w.alpha;
        theta[4 + 4 * j] = w.omega.max(floor);
    }
    // residuals and, when `jac` is given, the Jacobian rows of the model
    let model = |th: &[f64], jac: Option<&mut Vec<f64>>| -> (Vec<f64>, f64) {
        let mut e = Vec::with_capacity(n);
        let mut rows = jac;
        if let Some(rows) = rows.as_deref_mut() {
            rows.clear();
        }
        let mut sse = 0.0;
        let mut row = vec![0.0; p];
        for (i, t) in grid.iter().enumerate() {
            let mut yhat = th[0];
            row[0] = 1.0;
            for j in 0..k {
                let (a, b, alpha, omega) = (th[1 + 4 * j], th[2 + 4 * j], th[3 + 4 * j], th[4 + 4 * j]);
                let (phi, dx, dw) = mobius_phase(t - alpha, omega);
                let (s, c) = phi.sin_cos();
                yhat += a * c + b * s;
                let g = -a * s + b * c;
                row[1 + 4 * j] = c;
                row[2 + 4 * j] = s;
                row[3 + 4 * j] = -g * dx;
                row[4 + 4 * j] = g * dw;
            }
            let ei = x[i] - yhat;
            sse += ei * ei;
            e.push(ei);
            if let Some(rows) = rows.as_deref_mut() {
                rows.extend_from_slice(&row);
            }
        }
        (e, sse)
    };

    let mut rows = Vec::with_capacity(n * p);
    let (mut e, mut sse) = model(&theta, Some(&mut rows));
    let mut lambda = 1e-3;
    for _ in 0..LM_MAX_ITERS {
        let mut jtj = vec![0.0; p * p];
        let mut jte = vec![0.0; p];
        for (row, &ei) in rows.chunks_exact(p).zip(&e) {
            for a in 0..p {
                jte[a] += row[a] * ei;
                let ra = row[a];
                for b in a..p {
                    jtj[a * p + b] += ra * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                jtj[a * p + b] = jtj[b * p + a];
            }
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let mut m = jtj.clone();
            for a in 0..p {
                m[a * p + a] += lambda * jtj[a * p + a].max(1e-12);
            }
            let Some(delta) = solve_dense(m, jte.clone(), p) else {
                lambda *= 4.0;
                continue;
            };
            let mut trial = theta.clone();
            for a in 0..p {
                trial[a] += delta[a];
            }
            for j in 0..k {
                trial[3 + 4 * j] = wrap_angle(trial[3 + 4 * j]);
                trial[4 + 4 * j] = trial[4 + 4 * j].clamp(floor, 1.0);
            }
            let (_, trial_sse) = model(&trial, None);
            if trial_sse < sse {
                let gain = sse - trial_sse;
                theta = trial;
                (e, sse) = model(&theta, Some(&mut rows));
                lambda = (lambda / 3.0).max(1e-12);
                accepted = gain > 1e-15 * sse.max(1e-300);
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    let out = (0..k)
        .map(|j| {
            let fit = LinearFit {
                offset: 0.0,
                a: theta[1 + 4 * j],
                b: theta[2 + 4 * j],
                sse: 0.0,
            };
            fit.wave(theta[3 + 4 * j], theta[4 + 4 * j])
        })
        .collect();
    (theta[0], out)
}

/// Gaussian elimination with partial pivoting on a row-major `p x p` system;
/// `None` when singular.
fn solve_dense(mut m: Vec<f64>, mut rhs: Vec<f64>, p: usize) -> Option<Vec<f64>> {
    for col in 0..p {
        let piv = (col..p).max_by(|&a, &b| m[a * p + col].abs().total_cmp(&m[b * p + col].abs()))?;
        let pv = m[piv * p + col];
        if pv.abs() < 1e-300 || !pv.is_finite() {
            return None;
        }
        if piv != col {
            for c in 0..p {
                m.swap(col * p + c, piv * p + c);
            }
            rhs.swap(col, piv);
        }
        for r in col + 1..p {
            let f = m[r * p + col] / m[col * p + col];
            if f != 0.0 {
                for c in col..p {
                    m[r * p + c] -= f * m[col * p + c];
                }
                rhs[r] -= f * rhs[col];
            }
        }
    }
    let mut out = vec![0.0; p];
    for r in (0..p).rev() {
        let s: f64 = (r + 1..p).map(|c| m[r * p + c] * out[c]).sum();
        out[r] = (rhs[r] - s) / m[r * p + r];
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Sums waves that share `alpha` and `omega`; they span the same two-dimensional basis.
fn merge_duplicates(waves: &[FmmWave]) -> Vec<FmmWave> {
    let mut out: Vec<(f64, f64, f64, f64)> = Vec::new();
    for w in waves {
        let (sb, cb) = w.beta.sin_cos();
        let (a, b) = (w.amplitude * cb, -w.amplitude * sb);
        match out
            .iter_mut()
            .find(|m| circular_distance(m.2, w.alpha) < 1e-3 && (m.3 / w.omega).ln().abs() < 1e-2)
        {
            Some(m) => {
                m.0 += a;
                m.1 += b;
            }
            None => out.push((a, b, w.alpha, w.omega)),
        }
    }
    out.into_iter()
        .map(|(a, b, alpha, omega)| LinearFit { offset: 0.0, a, b, sse: 0.0 }.wave(alpha, omega))
        .collect()
}

/// Five-wave subsets made of the R wave plus two candidates on each side of it.
/// Candidates weaker than [`ASSIGN_AMPLITUDE_FLOOR`] times R are left out.
fn side_subsets(waves: &[FmmWave], r_peak_phase: f64) -> Vec<Vec<FmmWave>> {
    if waves.len() < N_WAVES {
        return Vec::new();
    }
    let r = r_index(waves, r_peak_phase);
    let floor = ASSIGN_AMPLITUDE_FLOOR * waves[r].amplitude;
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for (i, w) in waves.iter().enumerate() {
        if i == r || w.amplitude <= floor {
            continue;
        }
        if wrap_angle(w.alpha - waves[r].alpha) > PI {
            before.push(*w);
        } else {
            after.push(*w);
        }
    }
    let pairs = |v: &[FmmWave]| {
        let mut out = Vec::new();
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                out.push([v[i], v[j]]);
            }
        }
        out
    };
    let mut subsets = Vec::new();
    for pb in pairs(&before) {
        for pa in pairs(&after) {
            subsets.push(vec![pb[0], pb[1], waves[r], pa[0], pa[1]]);
        }
    }
    subsets
}

/// Assigns, polishes and relabels one candidate set; returns `(sse, params)`.
fn finish(x: &[f64], grid: &PhaseGrid, candidates: &[FmmWave], r_peak_phase: f64) -> Result<(f64, FmmBeatParams)> {
    let assigned = assign_waves(candidates, r_peak_phase)?;
    let n = x.len() as f64;
    let assigned_offset = partial_residual(x, &assigned, usize::MAX, grid).iter().sum::<f64>() / n;
    let (mut offset, mut waves) = (assigned_offset, assigned.to_vec());
    let (po, pw) = polish(x, grid, offset, &assigned);
    if sse_of(x, po, &pw, grid) <= sse_of(x, offset, &waves, grid) {
        (offset, waves) = (po, pw);
    }
    // the polish may move waves past each other, so label them again,
    // keeping all five
    let waves: [FmmWave; N_WAVES] = waves.try_into().expect("five waves");
    let r = r_index(&waves, r_peak_phase);
    let params = canonical_order(&FmmBeatParams { offset, waves }, Some(r));
    Ok((sse_of(x, params.offset, &params.waves, grid), params))
}

/// Index of the R wave: strongest within π/4 of the R-peak phase, else strongest overall.
fn r_index(waves: &[FmmWave], r_peak_phase: f64) -> usize {
    let strongest = |it: &mut dyn Iterator<Item = usize>| {
        it.max_by(|&a, &b| waves[a].amplitude.total_cmp(&waves[b].amplitude))
    };
    strongest(&mut (0..waves.len()).filter(|&i| circular_distance(waves[i].alpha, r_peak_phase) < PI / 4.0))
        .or_else(|| strongest(&mut (0..waves.len())))
        .expect("non-empty")
}

/// Extracts FMM coefficients from the valid region of one heartbeat.
pub fn fit_beat(beat: &Heartbeat, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if beat.valid_len < MIN_BEAT_LEN || beat.valid_len > beat.samples.len() {
        return Err(Error::validation(format!(
            "beat {}: valid_len {} too small (need >= {MIN_BEAT_LEN})",
            beat.id, beat.valid_len
        )));
    }
    let x = beat.valid();
    let grid = PhaseGrid::new(x.len());
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sst: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    let r_peak_phase = grid.phase_of(beat.r_peak_offset as f64);

    if is_degenerate(x) {
        let waves = [0, 1, 2, 3, 4].map(|j| FmmWave::flat(r_peak_phase + (j as f64 - 2.0) * 0.5, PLACEHOLDER_OMEGA));
        return Ok(FitResult {
            params: FmmBeatParams { offset: mean, waves },
            residual_rmse: (sst / n).sqrt(),
            r2: 0.0,
            waves_considered: 0,
            pass_rmse: Vec::new(),
        });
    }

    let basis = Basis::new(&grid, cfg);

    // greedy candidate search
    let mut waves: Vec<FmmWave> = Vec::with_capacity(cfg.max_waves);
    let mut offset = mean;
    let mut residual = x.to_vec();
    for _ in 0..cfg.max_waves {
        let (w, m) = single_wave(&residual, &grid, cfg, &basis);
        if w.amplitude == 0.0 {
            break;
        }
        waves.push(w);
        offset = m;
        residual = partial_residual(x, &waves, usize::MAX, &grid);
    }
    let waves_considered = waves.len();
    let mut sse = sse_of(x, offset, &waves, &grid);
    let mut pass_rmse = vec![(sse / n).sqrt()];

    // backfitting sweeps, keeping the current wave unless the refit is better
    for _ in 0..cfg.n_backfit_passes {
        for j in 0..waves.len() {
            let r = partial_residual(x, &waves, j, &grid);
            let target = Target::of(&r);
            let current = fit_at(&r, &target, &grid, waves[j].alpha, waves[j].omega);
            let (ca, cw, cfit) = refine(&r, &grid, cfg, waves[j].alpha, waves[j].omega, current);
            let (ga, gw, gfit) = basis.scan(&r);
            let (ga, gw, gfit) = refine(&r, &grid, cfg, ga, gw, gfit);
            let (alpha, omega, fit) = if gfit.sse < cfit.sse { (ga, gw, gfit) } else { (ca, cw, cfit) };
            if fit.sse <= sse {
                waves[j] = fit.wave(alpha, omega);
                offset = fit.offset;
                sse = fit.sse;
            }
        }
        pass_rmse.push((sse / n).sqrt());
    }

    // pad the candidate list so assignation always has five
    while waves.len() < N_WAVES {
        waves.push(FmmWave::flat(r_peak_phase + PI, PLACEHOLDER_OMEGA));
    }
    // route one assigns the raw candidates; route two tries every way of
    // choosing two waves on each side of R, from the raw candidates and from
    // all candidates polished jointly with duplicates merged
    let mut best = finish(x, &grid, &waves, r_peak_phase)?;
    if waves.len() > N_WAVES {
        let (_, all) = polish(x, &grid, offset, &waves);
        let mut subsets = side_subsets(&waves, r_peak_phase);
        subsets.extend(side_subsets(&merge_duplicates(&all), r_peak_phase));
        for subset in subsets {
            let alt = finish(x, &grid, &subset, r_peak_phase)?;
            if alt.0 < best.0 {
                best = alt;
            }
        }
    }
    let params = best.1;
    let sse = sse_of(x, params.offset, &params.waves, &grid);
    Ok(FitResult {
        params,
        residual_rmse: (sse / n).sqrt(),
        r2: if sst > 0.0 { 1.0 - sse / sst } else { 0.0 },
        waves_considered,
        pass_rmse,
    })
}

/// Outcome of fitting one beat in a batch run.
#[derive(Debug)]
pub struct TimedFit {
    pub result: Result<FitResult>,
    pub wall_time_ms: f64,
}

/// Fits beats in parallel on the current rayon pool; output order matches input order.
pub fn fit_beats(beats: &[Heartbeat], cfg: &FitConfig) -> Vec<TimedFit> {
    beats
        .par_iter()
        .map(|b| {
            let start = Instant::now();
            let result = fit_beat(b, cfg);
            TimedFit {
                result,
                wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
            }
        })
        .collect()
}
