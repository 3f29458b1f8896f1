//! Tap-stacked observations and the extended (dereverberation + separation)
//! demixing matrix.

use num_complex::Complex64 as c64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::stft::{Spectrogram, StftConfig};

const ZERO: c64 = c64::new(0.0, 0.0);
const ONE: c64 = c64::new(1.0, 0.0);

/// Number of past frames used for prediction and the gap before the first one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapConfig {
    pub taps: usize,
    pub delay: usize,
}

impl Default for TapConfig {
    fn default() -> Self {
        TapConfig { taps: 5, delay: 2 }
    }
}

impl TapConfig {
    pub fn new(taps: usize, delay: usize) -> Result<Self> {
        let cfg = TapConfig { taps, delay };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.delay == 0 {
            return Err(Error::Config("prediction delay must be at least one frame".into()));
        }
        Ok(())
    }

    /// Dimension of the stacked vector for `channels` microphones.
    pub fn stacked_dim(&self, channels: usize) -> usize {
        channels * (self.taps + 1)
    }
}

/// Per (f, t): `x̃ = [x_tᵀ, x_{t−Δ}ᵀ, …, x_{t−Δ−L+1}ᵀ]ᵀ`.
///
/// Stored as `[freq][component][frame]`; component `j·N + m` is channel `m`
/// of block `j`, where block 0 is the current frame. Frames before the start
/// of the signal are zero.
#[derive(Debug, Clone)]
pub struct StackedObservation {
    data: Vec<c64>,
    freqs: usize,
    frames: usize,
    channels: usize,
    taps: TapConfig,
    config: StftConfig,
    samples: usize,
}

impl StackedObservation {
    pub fn freqs(&self) -> usize {
        self.freqs
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn taps(&self) -> TapConfig {
        self.taps
    }

    pub fn dim(&self) -> usize {
        self.taps.stacked_dim(self.channels)
    }

    /// Past-only dimension `N·L`.
    pub fn past_dim(&self) -> usize {
        self.channels * self.taps.taps
    }

    /// All components of bin `f`, laid out `[component][frame]`.
    pub fn bin(&self, f: usize) -> &[c64] {
        let n = self.dim() * self.frames;
        &self.data[f * n..(f + 1) * n]
    }

    /// Component `d` of x̃ at bin `f`, over all frames.
    pub fn component(&self, f: usize, d: usize) -> &[c64] {
        let start = (f * self.dim() + d) * self.frames;
        &self.data[start..start + self.frames]
    }

    /// The stacked vector x̃_{f,t}.
    pub fn vector(&self, f: usize, t: usize) -> Vec<c64> {
        (0..self.dim()).map(|d| self.component(f, d)[t]).collect()
    }

    /// The past-only part x̄̄_{f,t} (the last N·L entries of x̃).
    pub fn past(&self, f: usize, t: usize) -> Vec<c64> {
        (self.channels..self.dim())
            .map(|d| self.component(f, d)[t])
            .collect()
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn samples(&self) -> usize {
        self.samples
    }
}

pub fn build_stacked(spec: &Spectrogram, taps: TapConfig) -> Result<StackedObservation> {
    taps.validate()?;
    let (freqs, frames, channels) = (spec.freqs(), spec.frames(), spec.channels());
    let dim = taps.stacked_dim(channels);
    let mut data = vec![ZERO; freqs * dim * frames];
    for f in 0..freqs {
        for block in 0..=taps.taps {
            let lag = if block == 0 {
                0
            } else {
                taps.delay + block - 1
            };
            for m in 0..channels {
                let src = spec.channel(f, m);
                let d = block * channels + m;
                let dst = &mut data[(f * dim + d) * frames..(f * dim + d + 1) * frames];
                if lag < frames {
                    dst[lag..].copy_from_slice(&src[..frames - lag]);
                }
            }
        }
    }
    Ok(StackedObservation {
        data,
        freqs,
        frames,
        channels,
        taps,
        config: *spec.config(),
        samples: spec.samples(),
    })
}

/// Per-frequency extended demixing matrix `Ṽ_f = [P_f; 0 I]`.
///
/// `P_f` occupies the first N rows; the remaining rows are canonical basis
/// rows and are never written after construction. Output `n` is
/// `y_n = Σ_d Ṽ[n][d] · x̃_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedDemixer {
    data: Vec<c64>,
    sources: usize,
    taps: TapConfig,
    freqs: usize,
}

impl ExtendedDemixer {
    /// `P_f = [I_N | 0]` for every bin.
    pub fn identity(sources: usize, taps: TapConfig, freqs: usize) -> Self {
        let dim = taps.stacked_dim(sources);
        let mut data = vec![ZERO; freqs * dim * dim];
        for f in 0..freqs {
            for i in 0..dim {
                data[f * dim * dim + i * dim + i] = ONE;
            }
        }
        ExtendedDemixer {
            data,
            sources,
            taps,
            freqs,
        }
    }

    /// Builds `P_f = W_f [I | −Z̄_f]` from separation and AR matrices
    /// (`W_f` is N×N, `Z̄_f` is N×NL, both row-major).
    pub fn from_warev(w: &[Vec<c64>], zbar: &[Vec<c64>], sources: usize, taps: TapConfig) -> Result<Self> {
        if w.len() != zbar.len() {
            return Err(Error::Shape("W and Z̄ have different bin counts".into()));
        }
        let n = sources;
        let past = n * taps.taps;
        let mut dm = Self::identity(sources, taps, w.len());
        let dim = dm.dim();
        for f in 0..w.len() {
            if w[f].len() != n * n || zbar[f].len() != n * past {
                return Err(Error::Shape(format!("bad W/Z̄ size at bin {f}")));
            }
            let mat = dm.matrix_mut(f);
            for i in 0..n {
                for j in 0..n {
                    mat[i * dim + j] = w[f][i * n + j];
                }
                for k in 0..past {
                    let s: c64 = (0..n).map(|j| w[f][i * n + j] * zbar[f][j * past + k]).sum();
                    mat[i * dim + n + k] = -s;
                }
            }
        }
        Ok(dm)
    }

    pub fn sources(&self) -> usize {
        self.sources
    }

    pub fn taps(&self) -> TapConfig {
        self.taps
    }

    pub fn freqs(&self) -> usize {
        self.freqs
    }

    pub fn dim(&self) -> usize {
        self.taps.stacked_dim(self.sources)
    }

    /// Full `Ṽ_f`, row-major.
    pub fn matrix(&self, f: usize) -> &[c64] {
        let n = self.dim() * self.dim();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn matrix_mut(&mut self, f: usize) -> &mut [c64] {
        let n = self.dim() * self.dim();
        &mut self.data[f * n..(f + 1) * n]
    }

    /// All bins back to back, `dim × dim` each.
    pub fn as_mut_slice(&mut self) -> &mut [c64] {
        &mut self.data
    }

    /// Row `r` of `Ṽ_f`.
    pub fn row(&self, f: usize, r: usize) -> &[c64] {
        let dim = self.dim();
        &self.matrix(f)[r * dim..(r + 1) * dim]
    }

    /// `W_f`: the first N columns of the first N rows.
    pub fn separation_matrix(&self, f: usize) -> Vec<c64> {
        separation_block(self.matrix(f), self.sources, self.dim())
    }

    /// True when every row below the first N is exactly `e_nᵀ`.
    pub fn lower_block_is_canonical(&self) -> bool {
        (0..self.freqs).all(|f| lower_block_is_canonical(self.matrix(f), self.sources, self.dim()))
    }

    /// `log|det Ṽ_f|`, which equals `log|det W_f|`.
    pub fn log_abs_det(&self, f: usize) -> Result<f64> {
        Lu::new(&self.separation_matrix(f), self.sources)
            .map(|lu| lu.log_abs_det())
            .ok_or(Error::Singular {
                freq: f,
                what: "separation matrix",
            })
    }
}

pub(crate) fn separation_block(mat: &[c64], n: usize, dim: usize) -> Vec<c64> {
    let mut w = Vec::with_capacity(n * n);
    for i in 0..n {
        w.extend_from_slice(&mat[i * dim..i * dim + n]);
    }
    w
}

pub(crate) fn lower_block_is_canonical(mat: &[c64], n: usize, dim: usize) -> bool {
    (n..dim).all(|i| (0..dim).all(|j| mat[i * dim + j] == if i == j { ONE } else { ZERO }))
}

/// `y_{f,t} = P_f x̃_{f,t}`.
pub fn demix(dm: &ExtendedDemixer, sx: &StackedObservation) -> Result<Spectrogram> {
    if dm.dim() != sx.dim() || dm.freqs() != sx.freqs() {
        return Err(Error::Shape(format!(
            "demixer is {}-dimensional over {} bins, observation is {}-dimensional over {} bins",
            dm.dim(),
            dm.freqs(),
            sx.dim(),
            sx.freqs()
        )));
    }
    let n = dm.sources();
    let frames = sx.frames();
    let mut y = Spectrogram::zeros(*sx.config(), n, frames, sx.samples());
    for f in 0..sx.freqs() {
        let obs = sx.bin(f);
        let out = y.bin_mut(f);
        apply_rows(dm.matrix(f), n, dm.dim(), obs, frames, out);
    }
    Ok(y)
}

/// Writes the first `n` outputs of `mat` applied to `obs` (`[component][frame]`).
pub(crate) fn apply_rows(mat: &[c64], n: usize, dim: usize, obs: &[c64], frames: usize, out: &mut [c64]) {
    for i in 0..n {
        let yi = &mut out[i * frames..(i + 1) * frames];
        yi.iter_mut().for_each(|v| *v = ZERO);
        for d in 0..dim {
            let coef = mat[i * dim + d];
            if coef == ZERO {
                continue;
            }
            for (v, x) in yi.iter_mut().zip(&obs[d * frames..(d + 1) * frames]) {
                *v += coef * x;
            }
        }
    }
}

/// Splits `P_f` into `W_f` and `Z̄_f = −W_f⁻¹ B_f`, with `B_f` the right
/// N×NL block.
pub fn extract_warev(dm: &ExtendedDemixer) -> Result<(Vec<Vec<c64>>, Vec<Vec<c64>>)> {
    let n = dm.sources();
    let dim = dm.dim();
    let past = dim - n;
    let mut ws = Vec::with_capacity(dm.freqs());
    let mut zs = Vec::with_capacity(dm.freqs());
    for f in 0..dm.freqs() {
        let w = dm.separation_matrix(f);
        let lu = Lu::new(&w, n).ok_or(Error::Singular {
            freq: f,
            what: "separation matrix",
        })?;
        let mat = dm.matrix(f);
        let mut z = vec![ZERO; n * past];
        for k in 0..past {
            let col: Vec<c64> = (0..n).map(|i| -mat[i * dim + n + k]).collect();
            let sol = lu.solve(&col);
            for i in 0..n {
                z[i * past + k] = sol[i];
            }
        }
        ws.push(w);
        zs.push(z);
    }
    Ok((ws, zs))
}
