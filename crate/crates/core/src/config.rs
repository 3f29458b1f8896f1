use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TapConfig;
use crate::stft::StftConfig;

/// Processing method selected for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlgorithmVariant {
    #[serde(rename = "ilrma-ip")]
    IlrmaIp,
    #[serde(rename = "ilrma-iss")]
    IlrmaIss,
    #[serde(rename = "ilrma-t-ip")]
    IlrmaTIp,
    #[serde(rename = "ilrma-t-iss-joint")]
    IlrmaTIssJoint,
    #[serde(rename = "ilrma-t-iss-seq")]
    IlrmaTIssSeq,
    #[serde(rename = "wpe")]
    Wpe,
    #[serde(rename = "wpe+ilrma-ip")]
    WpeThenIlrmaIp,
    #[serde(rename = "wpe+ilrma-iss")]
    WpeThenIlrmaIss,
}

impl AlgorithmVariant {
    pub const ALL: [AlgorithmVariant; 8] = [
        AlgorithmVariant::IlrmaIp,
        AlgorithmVariant::IlrmaIss,
        AlgorithmVariant::IlrmaTIp,
        AlgorithmVariant::IlrmaTIssJoint,
        AlgorithmVariant::IlrmaTIssSeq,
        AlgorithmVariant::Wpe,
        AlgorithmVariant::WpeThenIlrmaIp,
        AlgorithmVariant::WpeThenIlrmaIss,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmVariant::IlrmaIp => "ilrma-ip",
            AlgorithmVariant::IlrmaIss => "ilrma-iss",
            AlgorithmVariant::IlrmaTIp => "ilrma-t-ip",
            AlgorithmVariant::IlrmaTIssJoint => "ilrma-t-iss-joint",
            AlgorithmVariant::IlrmaTIssSeq => "ilrma-t-iss-seq",
            AlgorithmVariant::Wpe => "wpe",
            AlgorithmVariant::WpeThenIlrmaIp => "wpe+ilrma-ip",
            AlgorithmVariant::WpeThenIlrmaIss => "wpe+ilrma-iss",
        }
    }

    /// Uses the unified dereverberation + separation filter.
    pub fn is_joint(&self) -> bool {
        matches!(
            self,
            AlgorithmVariant::IlrmaTIp | AlgorithmVariant::IlrmaTIssJoint | AlgorithmVariant::IlrmaTIssSeq
        )
    }

    /// Matrix solves per iteration per frequency bin for `sources` sources.
    pub fn solves_per_iteration(&self, sources: usize) -> u64 {
        match self {
            AlgorithmVariant::IlrmaIp | AlgorithmVariant::IlrmaTIp | AlgorithmVariant::WpeThenIlrmaIp => {
                2 * sources as u64
            }
            AlgorithmVariant::IlrmaTIssJoint => sources as u64,
            AlgorithmVariant::Wpe => 1,
            AlgorithmVariant::IlrmaIss | AlgorithmVariant::IlrmaTIssSeq | AlgorithmVariant::WpeThenIlrmaIss => 0,
        }
    }
}

impl fmt::Display for AlgorithmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AlgorithmVariant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// Reference signal used for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceMode {
    /// Direct-path image of each source at the first microphone.
    #[default]
    DirectPath,
    /// The dry source signal.
    Anechoic,
}

impl FromStr for ReferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct-path" => Ok(ReferenceMode::DirectPath),
            "anechoic" => Ok(ReferenceMode::Anechoic),
            _ => Err(Error::Config(format!("unknown reference mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: AlgorithmVariant,
    pub iterations: usize,
    pub taps: usize,
    pub delay: usize,
    pub bases: usize,
    pub frame: usize,
    pub hop: usize,
    pub seed: u64,
    pub wpe_init_iters: usize,
    pub reference: ReferenceMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: AlgorithmVariant::IlrmaTIssSeq,
            iterations: 100,
            taps: 5,
            delay: 2,
            bases: 2,
            frame: 1024,
            hop: 256,
            seed: 0,
            wpe_init_iters: 3,
            reference: ReferenceMode::DirectPath,
        }
    }
}

impl RunConfig {
    pub fn tap_config(&self) -> TapConfig {
        TapConfig {
            taps: self.taps,
            delay: self.delay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tap_config().validate()?;
        StftConfig::new(self.frame, self.hop, 1)?;
        if self.bases == 0 {
            return Err(Error::Config("NMF needs at least one basis".into()));
        }
        if matches!(self.variant, AlgorithmVariant::WpeThenIlrmaIp | AlgorithmVariant::WpeThenIlrmaIss)
            && self.wpe_init_iters == 0
        {
            return Err(Error::Config("WPE initialization needs at least one iteration".into()));
        }
        Ok(())
    }

    /// Parses a flat TOML document; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_protocol() {
        let c = RunConfig::default();
        assert_eq!((c.iterations, c.taps, c.delay, c.bases), (100, 5, 2, 2));
        assert_eq!((c.frame, c.hop, c.wpe_init_iters), (1024, 256, 3));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("taps = 3\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("delay = 0\n").is_err());
        assert!(RunConfig::from_toml("frame = 1000\n").is_err());
        assert!(RunConfig::from_toml("hop = 768\n").is_err());
    }

    #[test]
    fn partial_document_uses_defaults() {
        let c = RunConfig::from_toml("variant = \"wpe+ilrma-iss\"\nseed = 9\n").unwrap();
        assert_eq!(c.variant, AlgorithmVariant::WpeThenIlrmaIss);
        assert_eq!(c.seed, 9);
        assert_eq!(c.taps, 5);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AlgorithmVariant::ALL {
            assert_eq!(v.name().parse::<AlgorithmVariant>().unwrap(), v);
        }
        assert!("ilrma".parse::<AlgorithmVariant>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn toml_round_trip(vi in 0usize..8, iterations in 0usize..500, taps in 0usize..8, delay in 1usize..5,
                           bases in 1usize..5, seed in 0u64..i64::MAX as u64, anechoic in proptest::prelude::any::<bool>()) {
            let cfg = RunConfig {
                variant: AlgorithmVariant::ALL[vi],
                iterations, taps, delay, bases, seed,
                reference: if anechoic { ReferenceMode::Anechoic } else { ReferenceMode::DirectPath },
                ..RunConfig::default()
            };
            proptest::prop_assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        }
    }
}
