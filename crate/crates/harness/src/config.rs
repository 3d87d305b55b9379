//! Line-oriented experiment configuration.
//!
//! Each non-blank line is `section.key = value`; `#` starts a comment. Every
//! key has a default, unknown keys are rejected, and [`ExperimentConfig::canonical`]
//! prints every key in a fixed order so that parsing the canonical text
//! reproduces the same config.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use diffusion::Condition;
use finetune::Method;
use rewards::RewardKind;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `section.key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("{}unknown key {key:?}", at(*.line))]
    UnknownKey { line: Option<usize>, key: String },
    #[error("line {line}: key {key:?} set twice")]
    Duplicate { line: usize, key: String },
    #[error("{}{key}: cannot parse {value:?}: {reason}", at(*.line))]
    Value {
        line: Option<usize>,
        key: String,
        value: String,
        reason: String,
    },
    #[error("{key}: {reason}")]
    Invalid { key: &'static str, reason: String },
    #[error("override {0:?} is not `section.key=value`")]
    Override(String),
}

fn at(line: Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}

/// Conversion between a config value and its text form.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! via_from_str {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

via_from_str!(usize, u64, bool, Method, RewardKind);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("must be finite".into())
        }
    }

    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(s.to_string())
    }

    fn render(&self) -> String {
        self.clone()
    }
}

/// A value that is either derived from other settings (`auto`) or given.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Setting<T> {
    Auto,
    Value(T),
}

impl<T: Copy> Setting<T> {
    pub fn or(self, derived: T) -> T {
        match self {
            Setting::Auto => derived,
            Setting::Value(v) => v,
        }
    }
}

impl<T: ConfigValue> ConfigValue for Setting<T> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s == "auto" {
            Ok(Setting::Auto)
        } else {
            T::parse_value(s).map(Setting::Value)
        }
    }

    fn render(&self) -> String {
        match self {
            Setting::Auto => "auto".into(),
            Setting::Value(v) => v.render(),
        }
    }
}

/// Backprop truncation depth: the whole chain or the last `k` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truncation {
    Full,
    Last(usize),
}

impl ConfigValue for Truncation {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s == "full" {
            return Ok(Truncation::Full);
        }
        match s.parse::<usize>() {
            Ok(0) => Err("depth must be at least 1".into()),
            Ok(k) => Ok(Truncation::Last(k)),
            Err(e) => Err(format!("expected `full` or a step count: {e}")),
        }
    }

    fn render(&self) -> String {
        match self {
            Truncation::Full => "full".into(),
            Truncation::Last(k) => k.to_string(),
        }
    }
}

/// Comma-separated list; empty text is the empty list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr + fmt::Display> ConfigValue for List<T>
where
    T::Err: fmt::Display,
{
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(List(Vec::new()));
        }
        s.split(',')
            .map(|item| item.trim().parse::<T>().map_err(|e| format!("{item:?}: {e}")))
            .collect::<Result<_, _>>()
            .map(List)
    }

    fn render(&self) -> String {
        self.0.iter().map(T::to_string).collect::<Vec<_>>().join(",")
    }
}

fn conditions(list: &[&str]) -> List<Condition> {
    List(list.iter().map(|s| s.parse().expect("valid default condition")).collect())
}

/// One documented key with its default rendered as config text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyDoc {
    pub key: &'static str,
    pub default: String,
    pub doc: &'static str,
}

macro_rules! config_sections {
    ($(
        $(#[$smeta:meta])*
        $section:ident: $Section:ident {
            $( $key:ident: $ty:ty = $default:expr, $doc:literal; )*
        }
    )*) => {
        $(
            $(#[$smeta])*
            #[derive(Debug, Clone, PartialEq)]
            pub struct $Section {
                $( #[doc = $doc] pub $key: $ty, )*
            }

            impl Default for $Section {
                fn default() -> Self {
                    Self { $( $key: $default, )* }
                }
            }
        )*

        #[derive(Debug, Clone, PartialEq, Default)]
        pub struct ExperimentConfig {
            $( pub $section: $Section, )*
        }

        impl ExperimentConfig {
            /// Every key in canonical order.
            pub const KEYS: &'static [&'static str] = &[
                $( $( concat!(stringify!($section), ".", stringify!($key)), )* )*
            ];

            fn assign(&mut self, key: &str, value: &str, line: Option<usize>) -> Result<(), ConfigError> {
                let bad = |reason: String| ConfigError::Value {
                    line,
                    key: key.to_string(),
                    value: value.to_string(),
                    reason,
                };
                match key {
                    $( $(
                        concat!(stringify!($section), ".", stringify!($key)) => {
                            self.$section.$key = <$ty as ConfigValue>::parse_value(value).map_err(bad)?;
                        }
                    )* )*
                    _ => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
                }
                Ok(())
            }

            /// `(key, rendered value)` for every key in canonical order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![
                    $( $( (concat!(stringify!($section), ".", stringify!($key)), self.$section.$key.render()), )* )*
                ]
            }

            pub fn documentation() -> Vec<KeyDoc> {
                let d = Self::default();
                vec![
                    $( $( KeyDoc {
                        key: concat!(stringify!($section), ".", stringify!($key)),
                        default: d.$section.$key.render(),
                        doc: $doc,
                    }, )* )*
                ]
            }
        }
    };
}

config_sections! {
    /// Forward noising process.
    schedule: ScheduleSection {
        timesteps: usize = 1000, "Number of diffusion timesteps T.";
        beta_start: f64 = 1e-4, "First value of the linear beta schedule.";
        beta_end: f64 = 0.02, "Last value of the linear beta schedule.";
    }
    /// Denoiser network.
    model: ModelSection {
        embed_dim: usize = 8, "Width of each condition-token embedding.";
        hidden: usize = 48, "Width of the two hidden layers.";
        second_token_weight: f64 = 0.25, "Weight of the second token's contribution to a pair prediction.";
        checkpoint: String = String::new(), "Checkpoint to load; empty means the default file in the output directory.";
    }
    /// Pretraining data: one Gaussian blob per concept on a circle.
    data: DataSection {
        concepts: usize = 8, "Number of single concepts (anchors on the circle).";
        radius: f64 = 400.0, "Radius of the anchor circle.";
        spread: f64 = 80.0, "Standard deviation of each concept blob.";
        samples_per_concept: usize = 2000, "Training points per concept.";
        heldout_per_concept: usize = 200, "Held-out points per concept.";
        pair_probability: f64 = 0.0, "Probability that a pretraining point is drawn from a training pair instead.";
        train_pairs: List<Condition> = conditions(&["1+2", "3+4", "5+6", "7+8"]), "Pair conditions used for fine-tuning.";
        unseen_pairs: List<Condition> = conditions(&["2+3", "4+5", "6+7", "8+1"]), "Pair conditions held out from fine-tuning.";
    }
    /// Denoising-loss pretraining.
    pretrain: PretrainSection {
        steps: usize = 4000, "Optimizer steps.";
        batch: usize = 256, "Points per step.";
        lr: f64 = 2e-3, "Initial learning rate.";
        decay_at: f64 = 0.7, "Fraction of steps after which the learning rate is reduced.";
        decay_factor: f64 = 0.25, "Learning-rate multiplier after the decay point.";
        cond_dropout: f64 = 0.15, "Probability of replacing a condition by the null condition.";
    }
    /// Classifier-free guidance and its exploration schedule.
    guidance: GuidanceSection {
        w_l: f64 = 0.5, "Guidance scale for early steps (t above t_thres) while exploring.";
        w_h: f64 = 5.0, "Guidance scale from t_thres down while exploring.";
        t_thres: usize = 900, "Timestep where the schedule switches to w_h (inclusive).";
        eval_scale: f64 = 5.0, "Constant guidance scale whenever exploration is off.";
        scheduling: bool = true, "Use the two-level schedule while exploring.";
    }
    /// Random emphasis of one condition row per trajectory.
    prompt_weighting: PromptWeightingSection {
        enabled: bool = true, "Reweight condition rows while exploring.";
        lo: f64 = 1.0, "Lower bound of the emphasis weight.";
        hi: f64 = 1.2, "Upper bound of the emphasis weight.";
        words: usize = 1, "Rows emphasised per trajectory.";
    }
    /// Reward used for fine-tuning and the second reward reported alongside it.
    reward: RewardSection {
        kind: RewardKind = RewardKind::Conflicting, "proximity, conflicting or indicator.";
        rho: Setting<f64> = Setting::Auto, "Length scale; auto places paired anchors exactly 4 rho apart.";
        cross_kind: RewardKind = RewardKind::Proximity, "Kind of the held-out reward reported as cross_reward.";
        cross_rho: Setting<f64> = Setting::Auto, "Length scale of the held-out reward; auto is twice rho.";
    }
    /// Online fine-tuning of the adapters.
    finetune: FinetuneSection {
        method: Method = Method::Ddpo, "ddpo or backprop.";
        iterations: usize = 300, "Collection/update iterations.";
        batch: usize = 64, "Trajectories per iteration.";
        steps: usize = 50, "Sampling steps per trajectory.";
        clip: f64 = 1e-4, "Clip range of the importance ratio.";
        lr: Setting<f64> = Setting::Auto, "Learning rate; auto is 3e-4 for ddpo and 1e-3 for backprop.";
        beta1: f64 = 0.9, "First-moment decay.";
        beta2: f64 = 0.99, "Second-moment decay.";
        weight_decay: f64 = 0.0, "Decoupled weight decay.";
        explore_fraction: f64 = 0.75, "Leading fraction of iterations that explore.";
        normalize_advantages: bool = true, "Standardise rewards within each batch.";
        epochs: usize = 1, "Update passes per collected batch.";
        adapter_rank: usize = 4, "Adapter rank.";
        trunc_k: Truncation = Truncation::Full, "Backprop depth: full or the last k steps.";
        eval_every: usize = 10, "Iterations between evaluations.";
        eval_n: usize = 10, "Evaluation samples per condition.";
    }
    /// Evaluation sampling.
    eval: EvalSection {
        n_steps: usize = 50, "Sampling steps for evaluation.";
        seed: u64 = 7, "Noise seed shared by every evaluation.";
        tradeoff_samples: usize = 64, "Samples per seed in the diversity/quality comparison.";
        tradeoff_seeds: usize = 20, "Seeds in the diversity/quality comparison.";
    }
    /// Replicate seeds for compare and ablate.
    seeds: SeedsSection {
        list: List<u64> = List(vec![0, 1, 2, 3, 4]), "Comma-separated replicate seeds, used in order.";
    }
    /// Where results go.
    output: OutputSection {
        dir: String = "out".to_string(), "Output directory.";
        wall_clock: bool = false, "Record elapsed wall time in runlog.csv (breaks byte-identical reruns).";
    }
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults. Keys may not repeat.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !key.contains('.') {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            cfg.assign(key, value, Some(line))?;
        }
        Ok(cfg)
    }

    /// Applies one `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (key, value) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
        self.assign(key.trim(), value.trim(), None)
    }

    /// Every key, one per line, in canonical order.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let s = key.split('.').next().unwrap_or("");
            if !section.is_empty() && s != section {
                out.push('\n');
            }
            section = s;
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.output.dir)
    }
}
