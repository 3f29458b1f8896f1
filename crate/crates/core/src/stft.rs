//! STFT analysis and synthesis.
//!
//! Analysis uses a periodic Hann window. Synthesis uses the canonical dual
//! window `w[n] / Σ_k w²[n + k·hop]`, which gives perfect reconstruction for
//! any hop that divides the frame length.

use std::f64::consts::PI;

use num_complex::Complex64 as c64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const COLA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl StftConfig {
    pub fn new(frame_len: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        let cfg = StftConfig {
            frame_len,
            hop,
            sample_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || !self.frame_len.is_power_of_two() {
            return Err(Error::Config(format!(
                "frame length {} is not a power of two",
                self.frame_len
            )));
        }
        if self.hop == 0 || self.frame_len % self.hop != 0 {
            return Err(Error::Config(format!(
                "hop {} does not divide frame length {}",
                self.hop, self.frame_len
            )));
        }
        if self.frame_len < 2 * self.hop {
            return Err(Error::Config(format!(
                "frame length {} must be at least twice the hop {}",
                self.frame_len, self.hop
            )));
        }
        Ok(())
    }

    /// Number of one-sided frequency bins.
    pub fn freqs(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Zeros prepended to the signal before framing.
    pub fn front_pad(&self) -> usize {
        self.frame_len - self.hop
    }

    /// Zeros appended after the signal: the front pad plus whatever is needed
    /// to make the padded length land on a hop boundary.
    pub fn back_pad(&self, samples: usize) -> usize {
        self.frame_len - self.hop + (self.hop - samples % self.hop) % self.hop
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        let padded = samples + self.front_pad() + self.back_pad(samples);
        (padded - self.frame_len) / self.hop + 1
    }

    pub fn analysis_window(&self) -> Vec<f64> {
        let n = self.frame_len as f64;
        (0..self.frame_len)
            .map(|i| {
                let s = (PI * i as f64 / n).sin();
                s * s
            })
            .collect()
    }

    /// Minimum-norm dual of the analysis window for this hop.
    pub fn synthesis_window(&self) -> Result<Vec<f64>> {
        let w = self.analysis_window();
        let mut denom = vec![0.0; self.hop];
        for (i, wi) in w.iter().enumerate() {
            denom[i % self.hop] += wi * wi;
        }
        if denom.iter().any(|&d| d < COLA_FLOOR) {
            return Err(Error::Config(
                "overlap-add denominator vanishes for this frame/hop".into(),
            ));
        }
        Ok(w.iter()
            .enumerate()
            .map(|(i, wi)| wi / denom[i % self.hop])
            .collect())
    }
}

/// Complex one-sided STFT of a multichannel signal.
///
/// Indexed by (frequency, frame, channel). Storage is bin-major with each
/// channel's frames contiguous, so `channel(f, m)` is a plain slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Vec<c64>,
    freqs: usize,
    frames: usize,
    channels: usize,
    config: StftConfig,
    samples: usize,
}

impl Spectrogram {
    pub fn zeros(config: StftConfig, channels: usize, frames: usize, samples: usize) -> Self {
        let freqs = config.freqs();
        Spectrogram {
            data: vec![c64::new(0.0, 0.0); freqs * frames * channels],
            freqs,
            frames,
            channels,
            config,
            samples,
        }
    }

    /// A spectrogram with the same configuration and shape but another
    /// channel count.
    pub fn zeros_like(&self, channels: usize) -> Self {
        Self::zeros(self.config, channels, self.frames, self.samples)
    }

    pub fn freqs(&self) -> usize {
        self.freqs
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Length of the time-domain signal this spectrogram was computed from.
    pub fn samples(&self) -> usize {
        self.samples
    }

    #[inline]
    fn index(&self, f: usize, t: usize, m: usize) -> usize {
        (f * self.channels + m) * self.frames + t
    }

    #[inline]
    pub fn get(&self, f: usize, t: usize, m: usize) -> c64 {
        self.data[self.index(f, t, m)]
    }

    #[inline]
    pub fn set(&mut self, f: usize, t: usize, m: usize, v: c64) {
        let i = self.index(f, t, m);
        self.data[i] = v;
    }

    /// Frames of channel `m` at bin `f`.
    pub fn channel(&self, f: usize, m: usize) -> &[c64] {
        let start = self.index(f, 0, m);
        &self.data[start..start + self.frames]
    }

    pub fn channel_mut(&mut self, f: usize, m: usize) -> &mut [c64] {
        let start = self.index(f, 0, m);
        &mut self.data[start..start + self.frames]
    }

    /// All channels of bin `f`, laid out `[channel][frame]`.
    pub fn bin(&self, f: usize) -> &[c64] {
        let n = self.channels * self.frames;
        &self.data[f * n..(f + 1) * n]
    }

    pub fn bin_mut(&mut self, f: usize) -> &mut [c64] {
        let n = self.channels * self.frames;
        &mut self.data[f * n..(f + 1) * n]
    }

    /// Mutable per-bin chunks, in frequency order.
    pub fn bins_mut(&mut self) -> std::slice::ChunksExactMut<'_, c64> {
        let n = self.channels * self.frames;
        self.data.chunks_exact_mut(n)
    }

    pub fn as_slice(&self) -> &[c64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [c64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Copy of a subset of channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Self {
        let mut out = self.zeros_like(channels.len());
        for f in 0..self.freqs {
            for (k, &m) in channels.iter().enumerate() {
                out.channel_mut(f, k).copy_from_slice(self.channel(f, m));
            }
        }
        out
    }
}

/// Hann-windowed STFT of each channel.
pub fn analyze(signal: &[Vec<f64>], cfg: StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let channels = signal.len();
    if channels == 0 {
        return Err(Error::Input("signal has no channels".into()));
    }
    let samples = signal[0].len();
    if samples == 0 {
        return Err(Error::Input("empty signal".into()));
    }
    if signal.iter().any(|ch| ch.len() != samples) {
        return Err(Error::Shape("channels have different lengths".into()));
    }
    if samples < cfg.frame_len {
        return Err(Error::Input(format!(
            "signal of {samples} samples is shorter than one frame ({})",
            cfg.frame_len
        )));
    }
    for (m, ch) in signal.iter().enumerate() {
        if let Some(i) = ch.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite sample at channel {m}, index {i}"
            )));
        }
    }

    let frames = cfg.frames_for(samples);
    let pad = cfg.front_pad();
    let window = cfg.analysis_window();
    let fft = FftPlanner::new().plan_fft_forward(cfg.frame_len);
    let mut spec = Spectrogram::zeros(cfg, channels, frames, samples);
    let mut buf = vec![c64::new(0.0, 0.0); cfg.frame_len];

    for (m, ch) in signal.iter().enumerate() {
        for t in 0..frames {
            let start = t * cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                let p = start + i;
                let v = if p >= pad && p - pad < samples {
                    ch[p - pad]
                } else {
                    0.0
                };
                *b = c64::new(v * window[i], 0.0);
            }
            fft.process(&mut buf);
            for f in 0..spec.freqs {
                spec.set(f, t, m, buf[f]);
            }
        }
    }
    Ok(spec)
}

/// Weighted overlap-add inverse of [`analyze`], trimmed to the original
/// signal length.
pub fn synthesize(spec: &Spectrogram) -> Result<Vec<Vec<f64>>> {
    let cfg = spec.config;
    cfg.validate()?;
    if spec.freqs != cfg.freqs() {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins, config expects {}",
            spec.freqs,
            cfg.freqs()
        )));
    }
    if spec.frames != cfg.frames_for(spec.samples) {
        return Err(Error::Shape(format!(
            "spectrogram has {} frames, {} samples require {}",
            spec.frames,
            spec.samples,
            cfg.frames_for(spec.samples)
        )));
    }
    let n = cfg.frame_len;
    let window = cfg.synthesis_window()?;
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let pad = cfg.front_pad();
    let padded_len = (spec.frames - 1) * cfg.hop + n;
    let mut buf = vec![c64::new(0.0, 0.0); n];
    let mut out = Vec::with_capacity(spec.channels);

    for m in 0..spec.channels {
        let mut acc = vec![0.0; padded_len];
        for t in 0..spec.frames {
            for f in 0..spec.freqs {
                buf[f] = spec.get(f, t, m);
            }
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            for f in 1..n / 2 {
                buf[n - f] = buf[f].conj();
            }
            ifft.process(&mut buf);
            let start = t * cfg.hop;
            for i in 0..n {
                acc[start + i] += buf[i].re / n as f64 * window[i];
            }
        }
        out.push(acc[pad..pad + spec.samples].to_vec());
    }
    Ok(out)
}
