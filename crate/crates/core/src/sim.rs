//! Seeded synthetic reverberant mixtures.
//!
//! Impulse responses are a direct-path impulse followed by exponentially
//! decaying white noise; there is no room geometry.

use num_complex::Complex64 as c64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stream offsets keep the random draws of different uses independent.
const STREAM_RIR: u64 = 1 << 32;
const STREAM_NOISE: u64 = 2 << 32;
const STREAM_SOURCE: u64 = 3 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRoomConfig {
    /// Number of sources, equal to the number of microphones.
    pub sources: usize,
    /// Reverberation time in seconds.
    pub rt60: f64,
    pub sample_rate: u32,
    /// `N / σ²`; `None` disables additive noise.
    pub snr: Option<f64>,
    pub seed: u64,
    /// Expected direct-to-reverberant energy ratio of each response, in dB.
    pub drr_db: f64,
    /// Direct-path delay in samples, `[source][mic]`.
    pub delays: Vec<Vec<usize>>,
    /// Direct-path gain, `[source][mic]`; the first microphone has gain 1.
    pub gains: Vec<Vec<f64>>,
}

impl SyntheticRoomConfig {
    /// Random direct-path geometry drawn from `seed`: each source gets its
    /// own inter-microphone delay step and per-microphone gains.
    pub fn preset(sources: usize, rt60: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut delays = Vec::with_capacity(sources);
        let mut gains = Vec::with_capacity(sources);
        for n in 0..sources {
            let slot = -3.0 + 6.0 * (n as f64 + 0.5) / sources as f64;
            let step = slot + rng.random_range(-0.5..0.5);
            let base = 8 + rng.random_range(0..8usize);
            delays.push(
                (0..sources)
                    .map(|m| (base as f64 + 4.0 + step * m as f64).round() as usize)
                    .collect(),
            );
            gains.push(
                (0..sources)
                    .map(|m| if m == 0 { 1.0 } else { rng.random_range(0.6..1.0) })
                    .collect(),
            );
        }
        let cfg = SyntheticRoomConfig {
            sources,
            rt60,
            sample_rate: 16000,
            snr: None,
            seed,
            drr_db: 0.0,
            delays,
            gains,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.sources) {
            return Err(Error::Config(format!("{} sources; 1 to 4 are supported", self.sources)));
        }
        if !(self.rt60 >= 0.0) || !self.rt60.is_finite() {
            return Err(Error::Config(format!("rt60 must be non-negative, got {}", self.rt60)));
        }
        if let Some(snr) = self.snr {
            if !(snr > 0.0) {
                return Err(Error::Config(format!("snr must be positive, got {snr}")));
            }
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if !self.drr_db.is_finite() {
            return Err(Error::Config("drr_db must be finite".into()));
        }
        let ns = self.sources;
        let square = |lens: Vec<usize>| lens.len() == ns && lens.iter().all(|&l| l == ns);
        if !square(self.delays.iter().map(Vec::len).collect()) || !square(self.gains.iter().map(Vec::len).collect()) {
            return Err(Error::Shape("delays and gains must be sources × sources".into()));
        }
        if self.gains.iter().any(|g| g[0] != 1.0) {
            return Err(Error::Config("first-microphone direct gain must be 1".into()));
        }
        Ok(())
    }

    /// `σ²` per microphone, zero without noise.
    pub fn noise_variance(&self) -> f64 {
        self.snr.map_or(0.0, |snr| self.sources as f64 / snr)
    }

    /// Response length in samples.
    pub fn rir_len(&self, n: usize, m: usize) -> usize {
        let decay = (self.rt60 * self.sample_rate as f64).round() as usize;
        decay.max(self.delays[n][m] + 1)
    }

    /// Standard deviation of the tail noise before the decay envelope.
    fn tail_scale(&self) -> f64 {
        if self.rt60 == 0.0 {
            return 0.0;
        }
        // Σ_k exp(−6 ln10 k / (rt60 fs)) ≈ rt60 fs / (6 ln10).
        let envelope_energy = self.rt60 * self.sample_rate as f64 / (6.0 * std::f64::consts::LN_10);
        (10f64.powf(-self.drr_db / 10.0) / envelope_energy).sqrt()
    }
}

/// Impulse response from source `n` to microphone `m`.
pub fn make_rir(cfg: &SyntheticRoomConfig, n: usize, m: usize) -> Vec<f64> {
    let d = cfg.delays[n][m];
    let len = cfg.rir_len(n, m);
    let mut h = vec![0.0; len];
    h[d] = cfg.gains[n][m];
    let scale = cfg.tail_scale();
    if scale > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(STREAM_RIR + (n * cfg.sources + m) as u64);
        let rate = 3.0 * std::f64::consts::LN_10 / (cfg.rt60 * cfg.sample_rate as f64);
        for (k, v) in h.iter_mut().enumerate().skip(d + 1) {
            let eta: f64 = StandardNormal.sample(&mut rng);
            *v = scale * eta * (-rate * k as f64).exp();
        }
    }
    h
}

/// Linear convolution truncated to `x.len()` samples.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let out_len = x.len();
    if x.is_empty() || h.is_empty() {
        return vec![0.0; out_len];
    }
    if h.len() <= 64 {
        let mut y = vec![0.0; out_len];
        for (k, &hk) in h.iter().enumerate() {
            if hk == 0.0 {
                continue;
            }
            for (yo, xi) in y[k.min(out_len)..].iter_mut().zip(x) {
                *yo += hk * xi;
            }
        }
        return y;
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<c64> = (0..n).map(|i| c64::new(x.get(i).copied().unwrap_or(0.0), 0.0)).collect();
    let mut b: Vec<c64> = (0..n).map(|i| c64::new(h.get(i).copied().unwrap_or(0.0), 0.0)).collect();
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a[..out_len].iter().map(|v| v.re / n as f64).collect()
}

/// Output of [`mix`]; all signals have the source length.
#[derive(Debug, Clone)]
pub struct SimulatedMixture {
    /// `[mic][sample]`.
    pub mixture: Vec<Vec<f64>>,
    /// Full reverberant images, `[source][mic][sample]`.
    pub images: Vec<Vec<Vec<f64>>>,
    /// Direct-path images, `[source][mic][sample]`.
    pub direct: Vec<Vec<Vec<f64>>>,
    /// Sources after power normalization.
    pub sources: Vec<Vec<f64>>,
    /// `[source][mic]`.
    pub rirs: Vec<Vec<Vec<f64>>>,
    pub noise: Vec<Vec<f64>>,
    pub noise_variance: f64,
}

fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Convolves each source with its responses, normalizes every source to
/// unit reverberant power at the first microphone and adds white noise.
pub fn mix(sources: &[Vec<f64>], cfg: &SyntheticRoomConfig) -> Result<SimulatedMixture> {
    cfg.validate()?;
    if sources.len() != cfg.sources {
        return Err(Error::Shape(format!(
            "{} source signals for a {}-source room",
            sources.len(),
            cfg.sources
        )));
    }
    let len = sources[0].len();
    if len == 0 || sources.iter().any(|s| s.len() != len) {
        return Err(Error::Input("sources must be non-empty and of equal length".into()));
    }
    let ns = cfg.sources;
    let rirs: Vec<Vec<Vec<f64>>> = (0..ns).map(|n| (0..ns).map(|m| make_rir(cfg, n, m)).collect()).collect();

    let mut normalized = Vec::with_capacity(ns);
    let mut images = Vec::with_capacity(ns);
    let mut direct = Vec::with_capacity(ns);
    for (n, s) in sources.iter().enumerate() {
        let raw: Vec<Vec<f64>> = rirs[n].iter().map(|h| convolve(s, h)).collect();
        let p = mean_power(&raw[0]);
        if !(p > 0.0) {
            return Err(Error::Input(format!("source {n} is silent at the first microphone")));
        }
        let g = p.sqrt().recip();
        normalized.push(s.iter().map(|v| v * g).collect::<Vec<f64>>());
        images.push(raw.into_iter().map(|ch| ch.into_iter().map(|v| v * g).collect()).collect::<Vec<Vec<f64>>>());
        direct.push(
            (0..ns)
                .map(|m| {
                    let d = cfg.delays[n][m];
                    let gain = cfg.gains[n][m] * g;
                    (0..len).map(|t| if t >= d { gain * s[t - d] } else { 0.0 }).collect()
                })
                .collect::<Vec<Vec<f64>>>(),
        );
    }

    let variance = cfg.noise_variance();
    let mut noise = vec![vec![0.0; len]; ns];
    if variance > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(STREAM_NOISE);
        let dist = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
        for ch in noise.iter_mut() {
            ch.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        }
    }
    let mixture = (0..ns)
        .map(|m| {
            (0..len)
                .map(|t| images.iter().map(|img| img[m][t]).sum::<f64>() + noise[m][t])
                .collect()
        })
        .collect();
    Ok(SimulatedMixture {
        mixture,
        images,
        direct,
        sources: normalized,
        rirs,
        noise,
        noise_variance: variance,
    })
}

/// Envelope level of pauses between bursts (-40 dB).
pub const PAUSE_LEVEL: f64 = 0.01;

/// AR(2)-coloured Gaussian noise under a bursty amplitude envelope. Each
/// `index` gets its own resonance and envelope. Pauses keep a quiet floor of
/// [`PAUSE_LEVEL`], so no source is ever digitally silent.
pub fn colored_source(len: usize, sample_rate: u32, seed: u64, index: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SOURCE + index as u64);
    let fs = sample_rate as f64;
    let centre: f64 = rng.random_range(200.0..(0.2 * fs).min(3000.0));
    let radius: f64 = rng.random_range(0.85..0.97);
    let theta = 2.0 * std::f64::consts::PI * centre / fs;
    let (a1, a2) = (2.0 * radius * theta.cos(), -radius * radius);

    let mut envelope = vec![PAUSE_LEVEL; len];
    let mut t = 0usize;
    let edge = ((0.01 * fs) as usize).max(1);
    while t < len {
        let dur = ((rng.random_range(0.08..0.4)) * fs) as usize + 1;
        let active = rng.random_bool(0.65);
        let level: f64 = if active { rng.random_range(0.3..1.0) } else { PAUSE_LEVEL };
        for k in 0..dur.min(len - t) {
            let ramp = (k.min(dur - 1 - k) as f64 / edge as f64).min(1.0);
            envelope[t + k] = PAUSE_LEVEL + (level - PAUSE_LEVEL) * (0.5 - 0.5 * (std::f64::consts::PI * ramp).cos());
        }
        t += dur;
    }

    let mut out = vec![0.0; len];
    let (mut y1, mut y2) = (0.0, 0.0);
    for (o, e) in out.iter_mut().zip(&envelope) {
        let w: f64 = StandardNormal.sample(&mut rng);
        let y = w + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        *o = y * e;
    }
    out
}

/// `count` independent [`colored_source`] signals.
pub fn colored_sources(count: usize, len: usize, sample_rate: u32, seed: u64) -> Vec<Vec<f64>> {
    (0..count).map(|i| colored_source(len, sample_rate, seed, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, rt60: f64, seed: u64) -> SyntheticRoomConfig {
        SyntheticRoomConfig::preset(n, rt60, seed).unwrap()
    }

    #[test]
    fn anechoic_rir_is_a_delayed_impulse() {
        let c = cfg(2, 0.0, 1);
        for n in 0..2 {
            for m in 0..2 {
                let h = make_rir(&c, n, m);
                let d = c.delays[n][m];
                assert_eq!(h.len(), d + 1);
                assert_eq!(h[d], c.gains[n][m]);
                assert!(h[..d].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn rir_tail_decays_and_is_deterministic() {
        let c = cfg(2, 0.3, 4);
        let h = make_rir(&c, 1, 0);
        assert_eq!(h, make_rir(&c, 1, 0));
        assert_ne!(h, make_rir(&c, 0, 0));
        assert_eq!(h.len(), 4800);
        let total: f64 = h.iter().map(|v| v * v).sum();
        let late: f64 = h[4800.min(h.len())..].iter().map(|v| v * v).sum();
        assert!(late <= 1e-6 * total);
        let tail: f64 = h[c.delays[1][0] + 1..].iter().map(|v| v * v).sum();
        // Expected ratio is 0 dB; the tail is noise so allow a loose band.
        assert!((10.0 * tail.log10()).abs() < 1.5, "{tail}");
    }

    #[test]
    fn convolution_paths_agree() {
        let x = colored_source(500, 16000, 1, 0);
        let h: Vec<f64> = (0..100).map(|k| (0.9f64).powi(k) * if k % 3 == 0 { 1.0 } else { -0.5 }).collect();
        let fast = convolve(&x, &h);
        let mut naive = vec![0.0; x.len()];
        for t in 0..x.len() {
            for k in 0..=t.min(h.len() - 1) {
                naive[t] += h[k] * x[t - k];
            }
        }
        for (a, b) in fast.iter().zip(&naive) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(convolve(&x, &h[..10]).len(), 500);
    }

    #[test]
    fn single_source_anechoic_is_delayed_source() {
        let mut c = cfg(1, 0.0, 2);
        c.delays[0][0] = 5;
        let s = colored_sources(1, 1000, 16000, 3);
        let out = mix(&s, &c).unwrap();
        let src = &out.sources[0];
        for t in 0..1000 {
            let expect = if t >= 5 { src[t - 5] } else { 0.0 };
            assert_eq!(out.mixture[0][t], expect);
        }
        assert_eq!(out.direct[0][0], out.mixture[0]);
    }

    #[test]
    fn mixture_is_sum_of_images_plus_noise() {
        let mut c = cfg(3, 0.2, 5);
        c.snr = Some(10.0);
        let s = colored_sources(3, 4000, 16000, 6);
        let out = mix(&s, &c).unwrap();
        for m in 0..3 {
            for t in 0..4000 {
                let sum: f64 = (0..3).map(|n| out.images[n][m][t]).sum::<f64>() + out.noise[m][t];
                assert!((out.mixture[m][t] - sum).abs() < 1e-12);
            }
        }
        for n in 0..3 {
            assert!((mean_power(&out.images[n][0]) - 1.0).abs() < 1e-12);
        }
        assert!((out.noise_variance - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mixture_power_accounts_for_sources_and_noise() {
        let mut c = cfg(2, 0.3, 7);
        c.snr = Some(4.0);
        let s = colored_sources(2, 64000, 16000, 8);
        let out = mix(&s, &c).unwrap();
        let expect = 2.0 + out.noise_variance;
        let got = mean_power(&out.mixture[0]);
        assert!((got / expect - 1.0).abs() < 0.05, "{got} vs {expect}");
    }

    #[test]
    fn mix_is_linear_without_noise() {
        let c = cfg(2, 0.1, 9);
        let a = colored_sources(2, 3000, 16000, 10);
        let b = colored_sources(2, 3000, 16000, 11);
        let rirs: Vec<Vec<Vec<f64>>> = (0..2).map(|n| (0..2).map(|m| make_rir(&c, n, m)).collect()).collect();
        let apply = |src: &[Vec<f64>]| -> Vec<Vec<f64>> {
            (0..2)
                .map(|m| {
                    let mut acc = vec![0.0; 3000];
                    for n in 0..2 {
                        for (o, v) in acc.iter_mut().zip(convolve(&src[n], &rirs[n][m])) {
                            *o += v;
                        }
                    }
                    acc
                })
                .collect()
        };
        let combo: Vec<Vec<f64>> = (0..2)
            .map(|n| a[n].iter().zip(&b[n]).map(|(x, y)| 2.0 * x - 0.5 * y).collect())
            .collect();
        let (ya, yb, yc) = (apply(&a), apply(&b), apply(&combo));
        for m in 0..2 {
            for t in 0..3000 {
                assert!((yc[m][t] - (2.0 * ya[m][t] - 0.5 * yb[m][t])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SyntheticRoomConfig::preset(0, 0.1, 0).is_err());
        assert!(SyntheticRoomConfig::preset(5, 0.1, 0).is_err());
        assert!(SyntheticRoomConfig::preset(2, -0.1, 0).is_err());
        let mut c = cfg(2, 0.1, 0);
        c.snr = Some(0.0);
        assert!(c.validate().is_err());
        let c = cfg(2, 0.1, 0);
        assert!(mix(&colored_sources(1, 100, 16000, 0), &c).is_err());
        assert!(mix(&[vec![0.0; 100], vec![1.0; 100]], &c).is_err());
    }

    #[test]
    fn sources_are_deterministic_and_distinct() {
        let a = colored_sources(2, 2000, 16000, 1);
        assert_eq!(a, colored_sources(2, 2000, 16000, 1));
        assert_ne!(a[0], a[1]);
        assert!(a.iter().all(|s| s.iter().all(|v| v.is_finite())));
    }
}
