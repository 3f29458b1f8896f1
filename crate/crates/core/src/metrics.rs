//! Separation and dereverberation quality measures.

use num_complex::Complex64 as c64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Lu;

/// Ratios are clamped to `±DB_CAP`.
pub const DB_CAP: f64 = 80.0;

/// Cepstral coefficients `1..=CEPSTRUM_ORDER` enter the distance.
pub const CEPSTRUM_ORDER: usize = 24;

/// Frames whose reference energy is this far below the loudest frame are
/// left out of the distance.
pub const CD_GATE_DB: f64 = -40.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return if num > 0.0 { DB_CAP } else { -DB_CAP };
    }
    if num <= 0.0 {
        return -DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Scale-invariant signal-to-distortion ratio in dB.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_lengths(reference, estimate)?;
    let energy = dot(reference, reference);
    if energy <= 0.0 {
        return Err(Error::Input("SI-SDR reference is all zero".into()));
    }
    let alpha = dot(estimate, reference) / energy;
    let target = alpha * alpha * energy;
    let err: f64 = reference.iter().zip(estimate).map(|(s, e)| (alpha * s - e).powi(2)).sum();
    Ok(ratio_db(target, err))
}

/// Scale-invariant signal-to-interference ratio of `estimate` for
/// `references[target]`, from the least-squares decomposition of the
/// estimate onto the span of all references.
pub fn si_sir(references: &[&[f64]], estimate: &[f64], target: usize) -> Result<f64> {
    let n = references.len();
    if target >= n {
        return Err(Error::Input(format!("target {target} out of range for {n} references")));
    }
    for r in references {
        check_lengths(r, estimate)?;
    }
    let mut gram = vec![c64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = dot(references[i], references[j]);
            gram[i * n + j] = c64::new(v, 0.0);
            gram[j * n + i] = c64::new(v, 0.0);
        }
    }
    let trace: f64 = (0..n).map(|i| gram[i * n + i].re).sum();
    let rhs: Vec<c64> = references.iter().map(|r| c64::new(dot(r, estimate), 0.0)).collect();
    let lu = Lu::new(&gram, n).filter(|lu| lu.det().norm() > 1e-12 * trace.powi(n as i32));
    let Some(lu) = lu else {
        return Err(Error::Input("SI-SIR references are linearly dependent".into()));
    };
    let coef: Vec<f64> = lu.solve(&rhs).iter().map(|c| c.re).collect();

    let len = estimate.len();
    let mut interference = vec![0.0; len];
    for (m, r) in references.iter().enumerate() {
        if m == target {
            continue;
        }
        for (acc, v) in interference.iter_mut().zip(r.iter()) {
            *acc += coef[m] * v;
        }
    }
    let target_energy = coef[target].powi(2) * gram[target * n + target].re;
    Ok(ratio_db(target_energy, dot(&interference, &interference)))
}

/// Frame layout used by [`cepstral_distance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CepstrumFrames {
    pub frame_len: usize,
    pub hop: usize,
    pub fft_len: usize,
}

impl CepstrumFrames {
    /// 32 ms frames with half overlap.
    pub fn for_rate(sample_rate: u32) -> Self {
        let frame_len = ((0.032 * sample_rate as f64).round() as usize).max(2);
        CepstrumFrames {
            frame_len,
            hop: frame_len / 2,
            fft_len: frame_len.next_power_of_two(),
        }
    }

    pub fn count(&self, samples: usize) -> usize {
        if samples <= self.frame_len {
            1
        } else {
            (samples - self.frame_len) / self.hop + 1
        }
    }
}

fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}

/// Mean cepstral distance in dB over frames where the reference is active.
pub fn cepstral_distance(reference: &[f64], estimate: &[f64], sample_rate: u32) -> Result<f64> {
    check_lengths(reference, estimate)?;
    let layout = CepstrumFrames::for_rate(sample_rate);
    let window = hann(layout.frame_len);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(layout.fft_len);
    let inv = planner.plan_fft_inverse(layout.fft_len);

    let frames = layout.count(reference.len());
    let windowed = |x: &[f64], i: usize| -> Vec<f64> {
        let start = i * layout.hop;
        (0..layout.frame_len)
            .map(|k| x.get(start + k).copied().unwrap_or(0.0) * window[k])
            .collect()
    };
    let cepstrum = |frame: &[f64]| -> Vec<f64> {
        let mut buf = vec![c64::new(0.0, 0.0); layout.fft_len];
        for (b, v) in buf.iter_mut().zip(frame) {
            b.re = *v;
        }
        fwd.process(&mut buf);
        for b in buf.iter_mut() {
            *b = c64::new(b.norm().max(1e-12).ln(), 0.0);
        }
        inv.process(&mut buf);
        let scale = 1.0 / layout.fft_len as f64;
        buf[1..=CEPSTRUM_ORDER].iter().map(|c| c.re * scale).collect()
    };

    let energies: Vec<f64> = (0..frames)
        .map(|i| {
            let f = windowed(reference, i);
            dot(&f, &f)
        })
        .collect();
    let peak = energies.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::Input("cepstral distance reference is silent".into()));
    }
    let gate = peak * 10f64.powf(CD_GATE_DB / 10.0);
    let k = 10.0 / std::f64::consts::LN_10;
    let mut total = 0.0;
    let mut used = 0usize;
    for (i, e) in energies.iter().enumerate() {
        if *e < gate {
            continue;
        }
        let cr = cepstrum(&windowed(reference, i));
        let ce = cepstrum(&windowed(estimate, i));
        let sq: f64 = cr.iter().zip(&ce).map(|(a, b)| (a - b).powi(2)).sum();
        total += k * (2.0 * sq).sqrt();
        used += 1;
    }
    Ok(total / used as f64)
}

/// Lexicographic permutations of `0..n`.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for first in 0..n {
        for rest in permutations(n - 1) {
            let mut p = vec![first];
            p.extend(rest.into_iter().map(|v| if v >= first { v + 1 } else { v }));
            out.push(p);
        }
    }
    out
}

/// `perm[n]` is the estimate assigned to reference `n`, maximizing the
/// total SI-SDR. Ties go to the lexicographically smallest permutation.
pub fn align_permutation(references: &[&[f64]], estimates: &[&[f64]]) -> Result<Vec<usize>> {
    let n = references.len();
    if estimates.len() != n {
        return Err(Error::Input(format!(
            "{} references but {} estimates",
            n,
            estimates.len()
        )));
    }
    if n > 8 {
        return Err(Error::Input("permutation search supports at most 8 sources".into()));
    }
    let mut table = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            table[i * n + j] = si_sdr(references[i], estimates[j])?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in permutations(n) {
        let score: f64 = p.iter().enumerate().map(|(i, &j)| table[i * n + j]).sum();
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, p));
        }
    }
    Ok(best.map(|(_, p)| p).unwrap_or_default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMetrics {
    pub source: usize,
    pub estimate: usize,
    pub si_sdr: f64,
    pub si_sir: f64,
    pub cd: f64,
    pub mixture_si_sdr: f64,
    pub mixture_si_sir: f64,
    pub mixture_cd: f64,
    pub delta_si_sdr: f64,
    pub delta_si_sir: f64,
    pub delta_cd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub sources: Vec<SourceMetrics>,
    pub mean_si_sdr: f64,
    pub mean_si_sir: f64,
    pub mean_cd: f64,
    pub mean_delta_si_sdr: f64,
    pub mean_delta_si_sir: f64,
    pub mean_delta_cd: f64,
}

/// Aligns estimates to references and scores both against the first
/// mixture channel.
pub fn evaluate(references: &[&[f64]], estimates: &[&[f64]], mixture: &[f64], sample_rate: u32) -> Result<Evaluation> {
    let perm = align_permutation(references, estimates)?;
    let mut sources = Vec::with_capacity(references.len());
    for (n, &j) in perm.iter().enumerate() {
        let est = estimates[j];
        let si_sdr_est = si_sdr(references[n], est)?;
        let si_sir_est = si_sir(references, est, n)?;
        let cd_est = cepstral_distance(references[n], est, sample_rate)?;
        let si_sdr_mix = si_sdr(references[n], mixture)?;
        let si_sir_mix = si_sir(references, mixture, n)?;
        let cd_mix = cepstral_distance(references[n], mixture, sample_rate)?;
        sources.push(SourceMetrics {
            source: n,
            estimate: j,
            si_sdr: si_sdr_est,
            si_sir: si_sir_est,
            cd: cd_est,
            mixture_si_sdr: si_sdr_mix,
            mixture_si_sir: si_sir_mix,
            mixture_cd: cd_mix,
            delta_si_sdr: si_sdr_est - si_sdr_mix,
            delta_si_sir: si_sir_est - si_sir_mix,
            delta_cd: cd_est - cd_mix,
        });
    }
    let mean = |f: fn(&SourceMetrics) -> f64| sources.iter().map(f).sum::<f64>() / sources.len().max(1) as f64;
    Ok(Evaluation {
        mean_si_sdr: mean(|s| s.si_sdr),
        mean_si_sir: mean(|s| s.si_sir),
        mean_cd: mean(|s| s.cd),
        mean_delta_si_sdr: mean(|s| s.delta_si_sdr),
        mean_delta_si_sir: mean(|s| s.delta_si_sir),
        mean_delta_cd: mean(|s| s.delta_cd),
        sources,
    })
}
