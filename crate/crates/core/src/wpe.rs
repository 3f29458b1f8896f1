//! Weighted prediction error (WPE) dereverberation.

use num_complex::Complex64 as c64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{build_stacked, StackedObservation, TapConfig};
use crate::nmf::VARIANCE_FLOOR;
use crate::stft::Spectrogram;

const ZERO: c64 = c64::new(0.0, 0.0);

/// `Σ_t x̄̄ x̄̄ᴴ / r_t` over the past-only components `N..dim` of a
/// `[component][frame]` observation.
pub(crate) fn past_normal_matrix(obs: &[c64], channels: usize, dim: usize, frames: usize, r: &[f64]) -> Vec<c64> {
    let past = dim - channels;
    let mut mat = vec![ZERO; past * past];
    let weighted: Vec<c64> = (channels..dim)
        .flat_map(|d| obs[d * frames..(d + 1) * frames].iter().zip(r).map(|(x, r)| x / r))
        .collect();
    for i in 0..past {
        let xi = &weighted[i * frames..(i + 1) * frames];
        for j in 0..=i {
            let xj = &obs[(channels + j) * frames..(channels + j + 1) * frames];
            let s: c64 = xi.iter().zip(xj).map(|(a, b)| a * b.conj()).sum();
            mat[i * past + j] = s;
            mat[j * past + i] = s.conj();
        }
        mat[i * past + i].im = 0.0;
    }
    mat
}

/// `Σ_t x̄̄ target* / r_t`.
pub(crate) fn past_cross(obs: &[c64], channels: usize, dim: usize, frames: usize, target: &[c64], r: &[f64]) -> Vec<c64> {
    (channels..dim)
        .map(|d| {
            obs[d * frames..(d + 1) * frames]
                .iter()
                .zip(target)
                .zip(r)
                .map(|((x, y), r)| x * y.conj() / r)
                .sum()
        })
        .collect()
}

/// Row vectors `v_m = (Σ_t target_m x̄̄ᴴ/r)(Σ_t x̄̄x̄̄ᴴ/r)⁻¹` for all targets,
/// sharing one loaded factorization of the normal matrix.
pub(crate) fn prediction_rows(
    obs: &[c64],
    channels: usize,
    dim: usize,
    frames: usize,
    targets: &[&[c64]],
    r: &[f64],
) -> Option<Vec<Vec<c64>>> {
    let past = dim - channels;
    let mut normal = past_normal_matrix(obs, channels, dim, frames, r);
    linalg::load_diagonal(&mut normal, past, linalg::DIAGONAL_LOADING);
    let chol = linalg::Cholesky::new(&normal, past)?;
    let mut rows = Vec::with_capacity(targets.len());
    for target in targets {
        let mut u = past_cross(obs, channels, dim, frames, target, r);
        chol.solve_in_place(&mut u);
        if u.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return None;
        }
        rows.push(u.iter().map(|v| v.conj()).collect());
    }
    Some(rows)
}

/// AR coefficients and source variance of a WPE run.
#[derive(Debug, Clone)]
pub struct WpeState {
    /// `Z̄_f`, row-major `N × NL`, one per bin.
    pub zbar: Vec<Vec<c64>>,
    /// `r_{f,t}`, `[freq][frame]`.
    pub variance: Vec<f64>,
    pub taps: TapConfig,
    /// Linear solves performed so far.
    pub solves: u64,
}

impl WpeState {
    /// Zero filter; variance initialized from the observation.
    pub fn new(spec: &Spectrogram, taps: TapConfig) -> Self {
        let n = spec.channels();
        WpeState {
            zbar: vec![vec![ZERO; n * n * taps.taps]; spec.freqs()],
            variance: wpe_variance_update(spec),
            taps,
            solves: 0,
        }
    }

    pub fn with_variance(spec: &Spectrogram, taps: TapConfig, variance: Vec<f64>) -> Self {
        let mut s = Self::new(spec, taps);
        assert_eq!(variance.len(), s.variance.len());
        s.variance = variance;
        s
    }
}

/// Solves the weighted normal equations for every bin; one factorization
/// per bin.
pub fn wpe_filter_update(state: &mut WpeState, sx: &StackedObservation, spec: &Spectrogram) -> Result<()> {
    let (n, frames, dim) = (spec.channels(), spec.frames(), sx.dim());
    if frames == 0 {
        return Err(Error::Input("WPE needs at least one frame".into()));
    }
    if sx.channels() != n || sx.frames() != frames || sx.taps() != state.taps {
        return Err(Error::Shape("stacked observation does not match spectrogram".into()));
    }
    if state.taps.taps == 0 {
        return Ok(());
    }
    let variance = &state.variance;
    let updated: Vec<Result<Vec<c64>>> = (0..spec.freqs())
        .into_par_iter()
        .map(|f| {
            let r = &variance[f * frames..(f + 1) * frames];
            let targets: Vec<&[c64]> = (0..n).map(|m| spec.channel(f, m)).collect();
            let rows = prediction_rows(sx.bin(f), n, dim, frames, &targets, r).ok_or(Error::Singular {
                freq: f,
                what: "WPE normal matrix",
            })?;
            Ok(rows.concat())
        })
        .collect();
    for (f, z) in updated.into_iter().enumerate() {
        state.zbar[f] = z?;
    }
    state.solves += spec.freqs() as u64;
    Ok(())
}

/// `z_{f,t} = x_{f,t} − Z̄_f x̄̄_{f,t}`.
pub fn wpe_dereverb(state: &WpeState, spec: &Spectrogram, sx: &StackedObservation) -> Spectrogram {
    let (n, frames) = (spec.channels(), spec.frames());
    let past = n * state.taps.taps;
    let mut z = spec.clone();
    for f in 0..spec.freqs() {
        let zb = &state.zbar[f];
        for m in 0..n {
            let out = z.channel_mut(f, m);
            for k in 0..past {
                let c = zb[m * past + k];
                if c == ZERO {
                    continue;
                }
                for (o, x) in out.iter_mut().zip(sx.component(f, n + k)) {
                    *o -= c * x;
                }
            }
        }
        debug_assert_eq!(frames, sx.frames());
    }
    z
}

/// `r_{f,t} = max(‖z_{f,t}‖² / M, ε)`, laid out `[freq][frame]`.
pub fn wpe_variance_update(z: &Spectrogram) -> Vec<f64> {
    let (m, frames) = (z.channels(), z.frames());
    let mut r = vec![0.0; z.freqs() * frames];
    for f in 0..z.freqs() {
        for ch in 0..m {
            for (acc, v) in r[f * frames..(f + 1) * frames].iter_mut().zip(z.channel(f, ch)) {
                *acc += v.norm_sqr();
            }
        }
    }
    r.iter_mut().for_each(|v| *v = (*v / m as f64).max(VARIANCE_FLOOR));
    r
}

/// `Σ_{f,t} (‖z‖²/(M r) + log r)`.
pub fn wpe_objective(z: &Spectrogram, r: &[f64]) -> f64 {
    let (m, frames) = (z.channels(), z.frames());
    let mut total = 0.0;
    for f in 0..z.freqs() {
        for t in 0..frames {
            let e: f64 = (0..m).map(|ch| z.channel(f, ch)[t].norm_sqr()).sum();
            let rv = r[f * frames + t];
            total += e / (m as f64 * rv) + rv.ln();
        }
    }
    total
}

/// Result of [`wpe_run_traced`].
#[derive(Debug, Clone)]
pub struct WpeRun {
    pub output: Spectrogram,
    pub state: WpeState,
    /// Objective before the first iteration and after each one.
    pub objective: Vec<f64>,
}

pub fn wpe_run_traced(spec: &Spectrogram, taps: TapConfig, iters: usize) -> Result<WpeRun> {
    if iters == 0 {
        return Err(Error::Config("WPE needs at least one iteration".into()));
    }
    let sx = build_stacked(spec, taps)?;
    let mut state = WpeState::new(spec, taps);
    let mut objective = vec![wpe_objective(spec, &state.variance)];
    let mut z = spec.clone();
    for _ in 0..iters {
        wpe_filter_update(&mut state, &sx, spec)?;
        z = wpe_dereverb(&state, spec, &sx);
        state.variance = wpe_variance_update(&z);
        objective.push(wpe_objective(&z, &state.variance));
    }
    Ok(WpeRun {
        output: z,
        state,
        objective,
    })
}

/// Alternates filter, dereverberation and variance updates `iters` times.
pub fn wpe_run(spec: &Spectrogram, taps: TapConfig, iters: usize) -> Result<Spectrogram> {
    wpe_run_traced(spec, taps, iters).map(|run| run.output)
}
