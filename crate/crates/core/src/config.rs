//! Flat `key = value` experiment configuration with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::data::{PlantedStructure, SplitMode, SyntheticSpec, DEFAULT_MIN_INTERACTIONS};
use crate::error::{Error, Result};
use crate::graph::SwingParams;
use crate::reasoning::{ReasoningConfig, TemperatureSchedule};
use crate::seed::derive;

/// Everything one end-to-end run needs. Component seeds are derived from
/// `seed`; the per-component seed fields of the nested structs are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Interaction CSV; `None` generates `synth` instead.
    pub data: Option<PathBuf>,
    pub min_interactions: usize,
    pub synth: SyntheticSpec,
    pub split: SplitMode,
    pub swing: SwingParams,
    pub backbone: BackboneConfig,
    pub reasoning: ReasoningConfig,
    /// Training examples per user, taken from the end of each sequence; 0 keeps every prefix.
    pub train_prefixes: usize,
    pub output: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: None,
            min_interactions: DEFAULT_MIN_INTERACTIONS,
            synth: SyntheticSpec::default(),
            split: SplitMode::LeaveOneOut,
            swing: SwingParams::default(),
            backbone: BackboneConfig::default(),
            reasoning: ReasoningConfig::default(),
            train_prefixes: 0,
            output: PathBuf::from("out"),
            seed: 42,
        }
    }
}

const SWING_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config(format!("bad value {raw:?} for {key}")))
}

impl ExperimentConfig {
    /// Embedding size 256, batch 512, learning rate 1e-3. Not exercised by the test suite.
    pub fn reference_scale() -> Self {
        let mut c = Self::default();
        c.backbone.d = 256;
        c.reasoning.batch_size = 512;
        c
    }

    pub fn swing_params(&self) -> SwingParams {
        SwingParams { seed: derive(self.seed, &[SWING_STREAM]), ..self.swing }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig { init_seed: derive(self.seed, &[INIT_STREAM]), ..self.backbone.clone() }
    }

    pub fn reasoning_config(&self) -> ReasoningConfig {
        ReasoningConfig { seed: derive(self.seed, &[TRAIN_STREAM]), ..self.reasoning.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.is_none() {
            self.synth.validate()?;
        }
        if let SplitMode::Timestamp { valid_from, test_from } = self.split {
            if valid_from > test_from {
                return Err(Error::Config("split.valid_from must not exceed split.test_from".into()));
            }
        }
        self.swing_params().validate()?;
        self.backbone_config().validate()?;
        self.reasoning_config().validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies each line on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: n + 1, msg: format!("expected key = value, got {line:?}") })?;
            c.set(k.trim(), v.trim()).map_err(|e| Error::Parse { line: n + 1, msg: e.to_string() })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let v = raw;
        match key {
            "data" => self.data = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "min_interactions" => self.min_interactions = value(key, v)?,
            "output" => self.output = PathBuf::from(v),
            "seed" => self.seed = value(key, v)?,
            "train_prefixes" => self.train_prefixes = value(key, v)?,

            "synth.items" => self.synth.items = value(key, v)?,
            "synth.users" => self.synth.users = value(key, v)?,
            "synth.min_len" => self.synth.min_len = value(key, v)?,
            "synth.max_len" => self.synth.max_len = value(key, v)?,
            "synth.out_degree" => self.synth.out_degree = value(key, v)?,
            "synth.noise" => self.synth.noise = value(key, v)?,
            "synth.seed" => self.synth.seed = value(key, v)?,
            "synth.structure" => {
                self.synth.structure = match v {
                    "chain" => PlantedStructure::Chain,
                    "block" => match self.synth.structure {
                        b @ PlantedStructure::Block { .. } => b,
                        PlantedStructure::Chain => PlantedStructure::Block { blocks: 50 },
                    },
                    _ => return Err(Error::Config(format!("synth.structure must be block or chain, got {v:?}"))),
                }
            }
            "synth.blocks" => self.synth.structure = PlantedStructure::Block { blocks: value(key, v)? },

            "split.mode" => {
                self.split = match v {
                    "leave-one-out" => SplitMode::LeaveOneOut,
                    "timestamp" => match self.split {
                        t @ SplitMode::Timestamp { .. } => t,
                        SplitMode::LeaveOneOut => SplitMode::Timestamp { valid_from: 0, test_from: 0 },
                    },
                    _ => {
                        return Err(Error::Config(format!("split.mode must be leave-one-out or timestamp, got {v:?}")))
                    }
                }
            }
            "split.valid_from" | "split.test_from" => {
                let (mut valid_from, mut test_from) = match self.split {
                    SplitMode::Timestamp { valid_from, test_from } => (valid_from, test_from),
                    SplitMode::LeaveOneOut => (0, 0),
                };
                if key == "split.valid_from" {
                    valid_from = value(key, v)?;
                } else {
                    test_from = value(key, v)?;
                }
                self.split = SplitMode::Timestamp { valid_from, test_from };
            }

            "swing.alpha1" => self.swing.alpha1 = value(key, v)?,
            "swing.alpha2" => self.swing.alpha2 = value(key, v)?,
            "swing.beta" => self.swing.beta = value(key, v)?,
            "swing.max_common_users" => self.swing.max_common_users = value(key, v)?,

            "backbone.d" => self.backbone.d = value(key, v)?,
            "backbone.layers" => self.backbone.layers = value(key, v)?,
            "backbone.heads" => self.backbone.heads = value(key, v)?,
            "backbone.ffn_mult" => self.backbone.ffn_mult = value(key, v)?,
            "backbone.max_history" => self.backbone.max_history = value(key, v)?,
            "backbone.max_context" => self.backbone.max_context = value(key, v)?,
            "backbone.max_reason" => self.backbone.max_reason = value(key, v)?,
            "backbone.dropout" => self.backbone.dropout = value(key, v)?,
            "backbone.rescale" => self.backbone.rescale = value(key, v)?,

            "reasoning.train_steps" => self.reasoning.train_steps = value(key, v)?,
            "reasoning.reg_weight" => self.reasoning.reg_weight = value(key, v)?,
            "reasoning.gamma_base" => self.reasoning.gamma_base = value(key, v)?,
            "reasoning.tau_base" => self.reasoning.tau_base = value(key, v)?,
            "reasoning.tau_exponent" => self.reasoning.tau_exponent = value(key, v)?,
            "reasoning.temperature_schedule" => {
                self.reasoning.temperature_schedule = match v {
                    "increasing" => TemperatureSchedule::Increasing,
                    "constant" => TemperatureSchedule::Constant,
                    "decreasing" => TemperatureSchedule::Decreasing,
                    _ => return Err(Error::Config(format!("unknown temperature schedule {v:?}"))),
                }
            }
            "reasoning.window" => self.reasoning.window = value(key, v)?,
            "reasoning.hops" => self.reasoning.hops = value(key, v)?,
            "reasoning.max_candidates" => self.reasoning.max_candidates = value(key, v)?,
            "reasoning.use_context" => self.reasoning.use_context = value(key, v)?,
            "reasoning.epsilon" => self.reasoning.epsilon = value(key, v)?,
            "reasoning.max_infer_steps" => self.reasoning.max_infer_steps = value(key, v)?,
            "reasoning.exclude_history" => self.reasoning.exclude_history = value(key, v)?,
            "reasoning.learning_rate" => self.reasoning.learning_rate = value(key, v)?,
            "reasoning.adam_beta1" => self.reasoning.adam_beta1 = value(key, v)?,
            "reasoning.adam_beta2" => self.reasoning.adam_beta2 = value(key, v)?,
            "reasoning.adam_eps" => self.reasoning.adam_eps = value(key, v)?,
            "reasoning.batch_size" => self.reasoning.batch_size = value(key, v)?,
            "reasoning.epochs" => self.reasoning.epochs = value(key, v)?,
            "reasoning.patience" => self.reasoning.patience = value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Text form accepted by `parse`; floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data", self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv("min_interactions", self.min_interactions.to_string());
        kv("output", self.output.display().to_string());
        kv("seed", self.seed.to_string());
        kv("train_prefixes", self.train_prefixes.to_string());

        let sy = &self.synth;
        kv("synth.items", sy.items.to_string());
        kv("synth.users", sy.users.to_string());
        kv("synth.min_len", sy.min_len.to_string());
        kv("synth.max_len", sy.max_len.to_string());
        kv("synth.out_degree", sy.out_degree.to_string());
        match sy.structure {
            PlantedStructure::Chain => kv("synth.structure", "chain".into()),
            PlantedStructure::Block { blocks } => {
                kv("synth.structure", "block".into());
                kv("synth.blocks", blocks.to_string());
            }
        }
        kv("synth.noise", sy.noise.to_string());
        kv("synth.seed", sy.seed.to_string());

        match self.split {
            SplitMode::LeaveOneOut => kv("split.mode", "leave-one-out".into()),
            SplitMode::Timestamp { valid_from, test_from } => {
                kv("split.mode", "timestamp".into());
                kv("split.valid_from", valid_from.to_string());
                kv("split.test_from", test_from.to_string());
            }
        }

        let sw = &self.swing;
        kv("swing.alpha1", sw.alpha1.to_string());
        kv("swing.alpha2", sw.alpha2.to_string());
        kv("swing.beta", sw.beta.to_string());
        kv("swing.max_common_users", sw.max_common_users.to_string());

        let b = &self.backbone;
        kv("backbone.d", b.d.to_string());
        kv("backbone.layers", b.layers.to_string());
        kv("backbone.heads", b.heads.to_string());
        kv("backbone.ffn_mult", b.ffn_mult.to_string());
        kv("backbone.max_history", b.max_history.to_string());
        kv("backbone.max_context", b.max_context.to_string());
        kv("backbone.max_reason", b.max_reason.to_string());
        kv("backbone.dropout", b.dropout.to_string());
        kv("backbone.rescale", b.rescale.to_string());

        let r = &self.reasoning;
        kv("reasoning.train_steps", r.train_steps.to_string());
        kv("reasoning.reg_weight", r.reg_weight.to_string());
        kv("reasoning.gamma_base", r.gamma_base.to_string());
        kv("reasoning.tau_base", r.tau_base.to_string());
        kv("reasoning.tau_exponent", r.tau_exponent.to_string());
        let schedule = match r.temperature_schedule {
            TemperatureSchedule::Increasing => "increasing",
            TemperatureSchedule::Constant => "constant",
            TemperatureSchedule::Decreasing => "decreasing",
        };
        kv("reasoning.temperature_schedule", schedule.into());
        kv("reasoning.window", r.window.to_string());
        kv("reasoning.hops", r.hops.to_string());
        kv("reasoning.max_candidates", r.max_candidates.to_string());
        kv("reasoning.use_context", r.use_context.to_string());
        kv("reasoning.epsilon", r.epsilon.to_string());
        kv("reasoning.max_infer_steps", r.max_infer_steps.to_string());
        kv("reasoning.exclude_history", r.exclude_history.to_string());
        kv("reasoning.learning_rate", r.learning_rate.to_string());
        kv("reasoning.adam_beta1", r.adam_beta1.to_string());
        kv("reasoning.adam_beta2", r.adam_beta2.to_string());
        kv("reasoning.adam_eps", r.adam_eps.to_string());
        kv("reasoning.batch_size", r.batch_size.to_string());
        kv("reasoning.epochs", r.epochs.to_string());
        kv("reasoning.patience", r.patience.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("# nothing\n\n").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::default();
        c.data = Some("x/y.csv".into());
        c.split = SplitMode::Timestamp { valid_from: 10, test_from: 20 };
        c.synth.structure = PlantedStructure::Chain;
        c.reasoning.learning_rate = 0.005;
        c.reasoning.temperature_schedule = TemperatureSchedule::Decreasing;
        c.backbone.d = 32;
        c.seed = 9;
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn overrides_and_comments() {
        let c =
            ExperimentConfig::parse("backbone.d = 32 # small\nreasoning.use_context=false\nsynth.blocks=20\nseed=3")
                .unwrap();
        assert_eq!(c.backbone.d, 32);
        assert!(!c.reasoning.use_context);
        assert_eq!(c.synth.structure, PlantedStructure::Block { blocks: 20 });
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn rejects_bad_input() {
        let e = ExperimentConfig::parse("backbone.dd = 3").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
        assert!(e.to_string().contains("unknown key"));
        assert!(ExperimentConfig::parse("\nbackbone.d = x").is_err());
        assert!(ExperimentConfig::parse("backbone.d").is_err());
        assert!(ExperimentConfig::parse("synth.noise = 1").is_err());
        assert!(ExperimentConfig::parse("backbone.heads = 3").is_err());
        assert!(ExperimentConfig::parse("split.valid_from = 5\nsplit.test_from = 4").is_err());
    }

    #[test]
    fn component_seeds_follow_master() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 43, ..Default::default() };
        assert_ne!(a.swing_params().seed, b.swing_params().seed);
        assert_ne!(a.backbone_config().init_seed, a.reasoning_config().seed);
        assert_eq!(a.reasoning_config(), ExperimentConfig::default().reasoning_config());
        assert_eq!(ExperimentConfig::reference_scale().backbone.d, 256);
    }
}
