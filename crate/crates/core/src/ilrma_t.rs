//! Joint dereverberation and separation with the unified filter
//! `Ṽ_f = [P_f; 0 I]`, `P_f = W_f [I | −Z̄_f]`.
//!
//! Three update rules share the same negative log-likelihood
//!
//! ```text
//! L = Σ_f −2T log|det W_f| + Σ_{n,f,t} ( |y_{n,f,t}|² / r_{n,f,t} + log r_{n,f,t} )
//! ```
//!
//! - IP: each row of `P_f` is replaced by the closed-form minimizer, two
//!   solves per source and bin.
//! - ISS-JOINT: rank-one ISS steering for the separation part, then one
//!   weighted least-squares solve (size `NL`) per source for all prediction
//!   taps at once.
//! - ISS-SEQ: ISS steering for the separation part and scalar coordinate
//!   updates for every prediction tap; no solves at all.
//!
//! With zero taps the stacked observation is the plain observation, so the
//! ILRMA baselines run through exactly the same code with `L = 0`.

use std::time::Instant;

use num_complex::Complex64 as c64;
use rayon::prelude::*;

use crate::config::{AlgorithmVariant, RunConfig};
use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::model::{apply_rows, build_stacked, lower_block_is_canonical, ExtendedDemixer, StackedObservation, TapConfig};
use crate::nmf::NmfVarianceModel;
use crate::separation::{self, BinState, DENOMINATOR_GUARD};
use crate::stft::Spectrogram;
use crate::wpe;

/// Filter update rule applied once per outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterRule {
    Ip,
    Iss,
    IssJoint,
    IssSeq,
}

/// Joint dereverberation block: for each source `m`,
/// `v_m = (Σ_t y_m x̄̄ᴴ/r_m)(Σ_t x̄̄x̄̄ᴴ/r_m)⁻¹` is subtracted from the tail of
/// row `m` and `y_m ← y_m − v_m x̄̄`. One solve per source.
pub fn joint_dereverb_block(bin: &mut BinState<'_>, r: &[&[f64]], solves: &mut u64) -> Result<()> {
    let (ns, dim, frames) = (bin.sources, bin.dim, bin.frames);
    if dim == ns {
        return Ok(());
    }
    for m in 0..ns {
        let target = bin.output(m).to_vec();
        let rows = wpe::prediction_rows(bin.obs, ns, dim, frames, &[&target], r[m]).ok_or(Error::Singular {
            freq: bin.freq,
            what: "past-frame normal matrix",
        })?;
        *solves += 1;
        let v = &rows[0];
        for (k, vk) in v.iter().enumerate() {
            bin.filter[m * dim + ns + k] -= vk;
            let x = &bin.obs[(ns + k) * frames..(ns + k + 1) * frames];
            for (y, xv) in bin.outputs[m * frames..(m + 1) * frames].iter_mut().zip(x) {
                *y -= vk * xv;
            }
        }
    }
    Ok(())
}

/// Sequential dereverberation block: for each tap component `n > N` in
/// ascending order and every source `m`,
/// `v_{m,n} = (Σ_t y_m x̃_n*/r_m)/(Σ_t |x̃_n|²/r_m)` from the live outputs.
pub fn seq_dereverb_block(bin: &mut BinState<'_>, r: &[&[f64]]) {
    let (ns, dim, frames) = (bin.sources, bin.dim, bin.frames);
    for n in ns..dim {
        let x = &bin.obs[n * frames..(n + 1) * frames];
        for m in 0..ns {
            let rm = r[m];
            let den: f64 = x.iter().zip(rm).map(|(x, r)| x.norm_sqr() / r).sum();
            if !(den > DENOMINATOR_GUARD) || !den.is_finite() {
                continue;
            }
            let y = &mut bin.outputs[m * frames..(m + 1) * frames];
            let num: c64 = y.iter().zip(x).zip(rm).map(|((y, x), r)| y * x.conj() / r).sum();
            let v = num / den;
            bin.filter[m * dim + n] -= v;
            for (yv, xv) in y.iter_mut().zip(x) {
                *yv -= v * xv;
            }
        }
    }
}

/// Applies one filter pass of `rule` to a bin and returns the solve count.
pub fn update_bin(rule: FilterRule, bin: &mut BinState<'_>, r: &[&[f64]]) -> Result<u64> {
    let mut solves = 0;
    match rule {
        FilterRule::Ip => separation::ip_sweep(bin, r, &mut solves)?,
        FilterRule::Iss => separation::iss_sweep(bin, r),
        FilterRule::IssJoint => {
            separation::iss_sweep(bin, r);
            joint_dereverb_block(bin, r, &mut solves)?;
        }
        FilterRule::IssSeq => {
            separation::iss_sweep(bin, r);
            seq_dereverb_block(bin, r);
        }
    }
    Ok(solves)
}

/// Negative log-likelihood of the current filter, outputs and variances.
/// `variance` is laid out `[source][freq][frame]`.
pub fn cost(dm: &ExtendedDemixer, y: &Spectrogram, variance: &[f64]) -> Result<f64> {
    let (ns, freqs, frames) = (dm.sources(), y.freqs(), y.frames());
    if y.channels() != ns || dm.freqs() != freqs || variance.len() != ns * freqs * frames {
        return Err(Error::Shape("cost: demixer, outputs and variances disagree".into()));
    }
    let per_bin: Vec<Result<f64>> = (0..freqs)
        .into_par_iter()
        .map(|f| {
            let mut c = -2.0 * frames as f64 * dm.log_abs_det(f)?;
            for n in 0..ns {
                let r = &variance[(n * freqs + f) * frames..(n * freqs + f + 1) * frames];
                c += y.channel(f, n).iter().zip(r).map(|(y, r)| y.norm_sqr() / r + r.ln()).sum::<f64>();
            }
            Ok(c)
        })
        .collect();
    per_bin.into_iter().sum()
}

/// Rescales every output (and its filter row) by `λ_{n,f} = [W_f⁻¹]_{1,n}`,
/// restoring the scale of each source's image at the first microphone.
/// Returns the scales, `[freq][source]`; one solve per bin.
pub fn projection_back(dm: &mut ExtendedDemixer, y: &mut Spectrogram) -> Result<Vec<c64>> {
    let (ns, dim) = (dm.sources(), dm.dim());
    if y.channels() != ns || y.freqs() != dm.freqs() {
        return Err(Error::Shape("projection back: demixer and outputs disagree".into()));
    }
    let mut scales = Vec::with_capacity(dm.freqs() * ns);
    for f in 0..dm.freqs() {
        let lu = Lu::new(&dm.separation_matrix(f), ns).ok_or(Error::Singular {
            freq: f,
            what: "separation matrix",
        })?;
        let mut e1 = vec![c64::new(0.0, 0.0); ns];
        e1[0] = c64::new(1.0, 0.0);
        let lambda = lu.solve_transposed(&e1);
        let mat = dm.matrix_mut(f);
        for n in 0..ns {
            mat[n * dim..(n + 1) * dim].iter_mut().for_each(|v| *v *= lambda[n]);
            y.channel_mut(f, n).iter_mut().for_each(|v| *v *= lambda[n]);
        }
        scales.extend_from_slice(&lambda);
    }
    Ok(scales)
}

/// Iterative state of one ILRMA / ILRMA-T run.
#[derive(Debug, Clone)]
pub struct Separator {
    rule: FilterRule,
    sx: StackedObservation,
    demixer: ExtendedDemixer,
    outputs: Spectrogram,
    model: NmfVarianceModel,
    solves: u64,
    iteration: usize,
}

impl Separator {
    /// Starts from `P_f = [I | 0]`, NMF bases at one and activations drawn
    /// from `seed`.
    pub fn new(spec: &Spectrogram, rule: FilterRule, taps: TapConfig, rank: usize, seed: u64) -> Result<Self> {
        let sx = build_stacked(spec, taps)?;
        let ns = spec.channels();
        let demixer = ExtendedDemixer::identity(ns, taps, spec.freqs());
        let model = NmfVarianceModel::init(ns, rank, spec.freqs(), spec.frames(), seed);
        Ok(Separator {
            rule,
            sx,
            demixer,
            outputs: spec.clone(),
            model,
            solves: 0,
            iteration: 0,
        })
    }

    pub fn rule(&self) -> FilterRule {
        self.rule
    }

    pub fn demixer(&self) -> &ExtendedDemixer {
        &self.demixer
    }

    pub fn outputs(&self) -> &Spectrogram {
        &self.outputs
    }

    pub fn model(&self) -> &NmfVarianceModel {
        &self.model
    }

    pub fn observation(&self) -> &StackedObservation {
        &self.sx
    }

    /// Matrix solves performed by filter updates so far.
    pub fn solves(&self) -> u64 {
        self.solves
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn cost(&self) -> Result<f64> {
        cost(&self.demixer, &self.outputs, self.model.variance())
    }

    /// One filter pass over all bins with the variances held fixed.
    pub fn filter_pass(&mut self) -> Result<()> {
        let (ns, dim, frames) = (self.demixer.sources(), self.demixer.dim(), self.outputs.frames());
        let rule = self.rule;
        let sx = &self.sx;
        let model = &self.model;
        let bin_len = dim * dim;
        let out_len = ns * frames;
        let counts: Vec<Result<u64>> = self
            .demixer
            .as_mut_slice()
            .par_chunks_exact_mut(bin_len)
            .zip(self.outputs.as_mut_slice().par_chunks_exact_mut(out_len))
            .enumerate()
            .map(|(f, (filter, outputs))| {
                let r: Vec<&[f64]> = (0..ns).map(|n| model.source_variance(n, f)).collect();
                // Outputs are updated incrementally inside a pass; start every
                // pass from the exact product so rounding cannot accumulate.
                apply_rows(filter, ns, dim, sx.bin(f), frames, outputs);
                let mut bin = BinState {
                    freq: f,
                    sources: ns,
                    dim,
                    frames,
                    filter,
                    outputs,
                    obs: sx.bin(f),
                };
                let solves = update_bin(rule, &mut bin, &r)?;
                debug_assert!(lower_block_is_canonical(bin.filter, ns, dim));
                Ok(solves)
            })
            .collect();
        for c in counts {
            self.solves += c?;
        }
        Ok(())
    }

    /// `|y|²` laid out like the variances, `[source][freq][frame]`.
    pub fn output_power(&self) -> Vec<f64> {
        let (ns, freqs, frames) = (self.outputs.channels(), self.outputs.freqs(), self.outputs.frames());
        let mut p = Vec::with_capacity(ns * freqs * frames);
        for n in 0..ns {
            for f in 0..freqs {
                p.extend(self.outputs.channel(f, n).iter().map(|v| v.norm_sqr()));
            }
        }
        p
    }

    /// Filter pass, then NMF bases, then NMF activations.
    pub fn step(&mut self) -> Result<()> {
        self.filter_pass()?;
        let power = self.output_power();
        self.model.update_bases(&power);
        self.model.update_activations(&power);
        self.iteration += 1;
        if !self.outputs.is_finite() || self.model.variance().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                iteration: self.iteration,
            });
        }
        Ok(())
    }

    /// Outputs rescaled onto the first microphone, and the rescaled filter.
    pub fn projected(&self) -> Result<(Spectrogram, ExtendedDemixer)> {
        let mut dm = self.demixer.clone();
        let mut y = self.outputs.clone();
        projection_back(&mut dm, &mut y)?;
        Ok((y, dm))
    }

    /// Replaces the NMF model (for instance to evaluate with frozen variances).
    pub fn set_model(&mut self, model: NmfVarianceModel) {
        assert_eq!(model.variance().len(), self.model.variance().len());
        self.model = model;
    }
}

/// Per-iteration record of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostTrace {
    /// Objective before the first iteration and after each one.
    pub cost: Vec<f64>,
    /// Cumulative matrix solves by the iterative updates.
    pub cumulative_solves: Vec<u64>,
    /// Cumulative wall time in milliseconds.
    pub wall_ms: Vec<f64>,
}

impl CostTrace {
    fn push(&mut self, cost: f64, solves: u64, started: Instant) {
        self.cost.push(cost);
        self.cumulative_solves.push(solves);
        self.wall_ms.push(started.elapsed().as_secs_f64() * 1e3);
    }

    pub fn final_cost(&self) -> Option<f64> {
        self.cost.last().copied()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Separated (and/or dereverberated) spectrogram after projection back.
    pub output: Spectrogram,
    pub trace: CostTrace,
    /// Final filter, after projection back.
    pub demixer: ExtendedDemixer,
    /// Projection-back scales `[freq][source]`; empty when not applied.
    pub scales: Vec<c64>,
    /// Solves spent on projection back (one per bin when applied).
    pub projection_solves: u64,
    /// Solves spent on WPE initialization, included in the trace's first entry.
    pub init_solves: u64,
}

/// Snapshot passed to a run observer after the initial state and after
/// every iteration.
pub struct Progress<'a> {
    pub iteration: usize,
    pub cost: f64,
    pub cumulative_solves: u64,
    pub wall_ms: f64,
    /// Iterative state, absent for the WPE-only variant.
    pub separator: Option<&'a Separator>,
}

pub fn run(spec: &Spectrogram, cfg: &RunConfig) -> Result<RunOutput> {
    run_observed(spec, cfg, &mut |_| {})
}

/// Runs the configured variant, calling `observer` after initialization and
/// after every iteration.
pub fn run_observed(spec: &Spectrogram, cfg: &RunConfig, observer: &mut dyn FnMut(&Progress<'_>)) -> Result<RunOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let taps = cfg.tap_config();
    let no_taps = TapConfig {
        taps: 0,
        delay: taps.delay,
    };

    if cfg.variant == AlgorithmVariant::Wpe {
        return run_wpe_only(spec, cfg, started, observer);
    }

    let (input, init_solves) = match cfg.variant {
        AlgorithmVariant::WpeThenIlrmaIp | AlgorithmVariant::WpeThenIlrmaIss => {
            let run = wpe::wpe_run_traced(spec, taps, cfg.wpe_init_iters)?;
            (run.output, run.state.solves)
        }
        _ => (spec.clone(), 0),
    };
    let (rule, stack) = match cfg.variant {
        AlgorithmVariant::IlrmaIp | AlgorithmVariant::WpeThenIlrmaIp => (FilterRule::Ip, no_taps),
        AlgorithmVariant::IlrmaIss | AlgorithmVariant::WpeThenIlrmaIss => (FilterRule::Iss, no_taps),
        AlgorithmVariant::IlrmaTIp => (FilterRule::Ip, taps),
        AlgorithmVariant::IlrmaTIssJoint => (FilterRule::IssJoint, taps),
        AlgorithmVariant::IlrmaTIssSeq => (FilterRule::IssSeq, taps),
        AlgorithmVariant::Wpe => unreachable!(),
    };

    let mut sep = Separator::new(&input, rule, stack, cfg.bases, cfg.seed)?;
    let mut trace = CostTrace::default();
    let c0 = sep.cost()?;
    trace.push(c0, init_solves, started);
    notify(observer, &trace, Some(&sep));

    for _ in 0..cfg.iterations {
        sep.step()?;
        let c = sep.cost()?;
        if !c.is_finite() {
            return Err(Error::NonFinite {
                iteration: sep.iteration(),
            });
        }
        trace.push(c, init_solves + sep.solves(), started);
        notify(observer, &trace, Some(&sep));
    }

    if cfg.iterations == 0 {
        // Nothing was separated: pass the (possibly WPE-processed) input through.
        return Ok(RunOutput {
            output: input,
            trace,
            demixer: sep.demixer.clone(),
            scales: Vec::new(),
            projection_solves: 0,
            init_solves,
        });
    }

    let mut demixer = sep.demixer.clone();
    let mut output = sep.outputs.clone();
    let scales = projection_back(&mut demixer, &mut output)?;
    Ok(RunOutput {
        output,
        trace,
        demixer,
        scales,
        projection_solves: spec.freqs() as u64,
        init_solves,
    })
}

fn notify(observer: &mut dyn FnMut(&Progress<'_>), trace: &CostTrace, sep: Option<&Separator>) {
    let i = trace.cost.len() - 1;
    observer(&Progress {
        iteration: i,
        cost: trace.cost[i],
        cumulative_solves: trace.cumulative_solves[i],
        wall_ms: trace.wall_ms[i],
        separator: sep,
    });
}

fn run_wpe_only(
    spec: &Spectrogram,
    cfg: &RunConfig,
    started: Instant,
    observer: &mut dyn FnMut(&Progress<'_>),
) -> Result<RunOutput> {
    let taps = cfg.tap_config();
    let sx = build_stacked(spec, taps)?;
    let mut state = wpe::WpeState::new(spec, taps);
    let mut trace = CostTrace::default();
    trace.push(wpe::wpe_objective(spec, &state.variance), 0, started);
    notify(observer, &trace, None);
    let mut z = spec.clone();
    for i in 0..cfg.iterations {
        wpe::wpe_filter_update(&mut state, &sx, spec)?;
        z = wpe::wpe_dereverb(&state, spec, &sx);
        state.variance = wpe::wpe_variance_update(&z);
        let c = wpe::wpe_objective(&z, &state.variance);
        if !c.is_finite() || !z.is_finite() {
            return Err(Error::NonFinite { iteration: i + 1 });
        }
        trace.push(c, state.solves, started);
        notify(observer, &trace, None);
    }
    let n = spec.channels();
    let eye: Vec<c64> = (0..n * n)
        .map(|k| if k % (n + 1) == 0 { c64::new(1.0, 0.0) } else { c64::new(0.0, 0.0) })
        .collect();
    let ws = vec![eye; spec.freqs()];
    let demixer = ExtendedDemixer::from_warev(&ws, &state.zbar, n, taps)?;
    Ok(RunOutput {
        output: z,
        trace,
        demixer,
        scales: Vec::new(),
        projection_solves: 0,
        init_solves: 0,
    })
}
