//! Time-domain wrappers around the STFT-domain runs.

use crate::config::RunConfig;
use crate::error::Result;
use crate::ilrma_t::{self, Progress, RunOutput, Separator};
use crate::stft::{analyze, synthesize, StftConfig};

/// Result of [`separate`].
#[derive(Debug, Clone)]
pub struct Separated {
    /// `[source][sample]`, same length as the mixture.
    pub estimates: Vec<Vec<f64>>,
    pub run: RunOutput,
    pub stft: StftConfig,
}

pub fn stft_config(cfg: &RunConfig, sample_rate: u32) -> Result<StftConfig> {
    StftConfig::new(cfg.frame, cfg.hop, sample_rate)
}

/// Analysis, the configured run, then synthesis.
pub fn separate(mixture: &[Vec<f64>], sample_rate: u32, cfg: &RunConfig) -> Result<Separated> {
    separate_observed(mixture, sample_rate, cfg, &mut |_| {})
}

pub fn separate_observed(
    mixture: &[Vec<f64>],
    sample_rate: u32,
    cfg: &RunConfig,
    observer: &mut dyn FnMut(&Progress<'_>),
) -> Result<Separated> {
    cfg.validate()?;
    let stft = stft_config(cfg, sample_rate)?;
    let spec = analyze(mixture, stft)?;
    let run = ilrma_t::run_observed(&spec, cfg, observer)?;
    let estimates = synthesize(&run.output)?;
    Ok(Separated { estimates, run, stft })
}

/// Time-domain estimates of an intermediate iterate, after projection back.
pub fn snapshot(sep: &Separator) -> Result<Vec<Vec<f64>>> {
    let (y, _) = sep.projected()?;
    synthesize(&y)
}
