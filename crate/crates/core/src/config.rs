//! Flat `key = value` run configuration.
//!
//! ```text
//! # comment
//! method = anchored
//! anchor.alpha = 0.5
//! task.vocab = 8
//! ```
//!
//! Keys are dotted, values are bare, `#` starts a comment anywhere on a
//! line. Unknown or repeated keys are errors. Every key has a default, and
//! [`RunConfig::render`] writes all of them back out, so a rendered config
//! reproduces the run on its own.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::anchor::{AnchorConfig, Space};
use crate::benchgen::{PipelineSpec, TaskParams, TaskSpec};
use crate::error::{Error, Result};
use crate::trainers::{Method, TrainConfig, DEFAULT_BETA, DEFAULT_LAMBDA, DEFAULT_SFT_LR, LOW_SFT_RATIO};

/// Inner learning rate for anchored runs on the linear benchmark model.
/// Large enough that `K = 5` epochs nearly complete each projection.
pub const DEFAULT_INNER_LR: f64 = 10.0;

/// Method names accepted by the `method` key.
pub const METHOD_NAMES: [&str; 5] = ["sft", "low_sft", "kl_sft", "static_barycenter", "anchored"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: String,
    pub seed: u64,
    /// `None` means the method's default: 0.5, or 0.05 for Low-SFT.
    pub lr: Option<f64>,
    pub epochs: usize,
    pub lambda: f64,
    pub beta: f64,
    pub anchor: AnchorConfig,
    pub task: TaskParams,
    pub base_lr: f64,
    pub base_epochs: usize,
    pub sft_lr: f64,
    pub sft_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: "anchored".into(),
            seed: 42,
            lr: None,
            epochs: 100,
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            anchor: AnchorConfig {
                inner_lr: DEFAULT_INNER_LR,
                ..AnchorConfig::default()
            },
            task: TaskParams::default(),
            base_lr: 0.5,
            base_epochs: 300,
            sft_lr: DEFAULT_SFT_LR,
            sft_epochs: 100,
        }
    }
}

fn parse_num<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}`"))
}

fn positive(value: f64) -> std::result::Result<f64, String> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(format!("{value} must be positive and finite"))
    }
}

fn open_unit(value: f64) -> std::result::Result<f64, String> {
    if value > 0.0 && value < 1.0 {
        Ok(value)
    } else {
        Err(format!("{value} must lie in the open interval (0, 1)"))
    }
}

fn at_least(min: usize) -> impl Fn(usize) -> std::result::Result<usize, String> {
    move |v| {
        if v >= min {
            Ok(v)
        } else {
            Err(format!("{v} must be at least {min}"))
        }
    }
}

impl RunConfig {
    /// Every recognised key, in rendering order.
    pub const KEYS: [&'static str; 23] = [
        "method",
        "seed",
        "lr",
        "epochs",
        "lambda",
        "beta",
        "anchor.alpha",
        "anchor.space",
        "anchor.outer_iters",
        "anchor.inner_epochs",
        "anchor.inner_lr",
        "anchor.inner_tol",
        "task.vocab",
        "task.dim",
        "task.n_general_train",
        "task.n_general_test",
        "task.n_domain_train",
        "task.n_domain_test",
        "task.noise_temp",
        "base.lr",
        "base.epochs",
        "sft.lr",
        "sft.epochs",
    ];

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config {
                    line,
                    message: format!("expected `key = value`, found `{content}`"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) && Self::KEYS.contains(&key) {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key `{key}`"),
                });
            }
            cfg.set(key, value).map_err(|message| Error::Config { line, message })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key; the message names the key on failure.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let r: std::result::Result<(), String> = (|| {
            match key {
                "method" => {
                    if !METHOD_NAMES.contains(&value) {
                        return Err(format!("unknown method `{value}` (expected one of {})", METHOD_NAMES.join(", ")));
                    }
                    self.method = value.to_string();
                }
                "seed" => self.seed = parse_num(value)?,
                "lr" => self.lr = Some(positive(parse_num(value)?)?),
                "epochs" => self.epochs = at_least(1)(parse_num(value)?)?,
                "lambda" => {
                    let v: f64 = parse_num(value)?;
                    if !(v >= 0.0 && v.is_finite()) {
                        return Err(format!("{v} must be finite and nonnegative"));
                    }
                    self.lambda = v;
                }
                "beta" => self.beta = open_unit(parse_num(value)?)?,
                "anchor.alpha" => self.anchor.alpha = open_unit(parse_num(value)?)?,
                "anchor.space" => self.anchor.space = value.parse::<Space>().map_err(|e| e.to_string())?,
                "anchor.outer_iters" => self.anchor.outer_iters = at_least(1)(parse_num(value)?)?,
                "anchor.inner_epochs" => self.anchor.inner_epochs = at_least(1)(parse_num(value)?)?,
                "anchor.inner_lr" => self.anchor.inner_lr = positive(parse_num(value)?)?,
                "anchor.inner_tol" => {
                    self.anchor.inner_tol = match value {
                        "off" | "none" => None,
                        v => Some(positive(parse_num(v)?)?),
                    }
                }
                "task.vocab" => self.task.vocab = at_least(2)(parse_num(value)?)?,
                "task.dim" => self.task.dim = at_least(2)(parse_num(value)?)?,
                "task.n_general_train" => self.task.n_general_train = at_least(1)(parse_num(value)?)?,
                "task.n_general_test" => self.task.n_general_test = at_least(1)(parse_num(value)?)?,
                "task.n_domain_train" => self.task.n_domain_train = at_least(1)(parse_num(value)?)?,
                "task.n_domain_test" => self.task.n_domain_test = at_least(1)(parse_num(value)?)?,
                "task.noise_temp" => self.task.noise_temp = positive(parse_num(value)?)?,
                "base.lr" => self.base_lr = positive(parse_num(value)?)?,
                "base.epochs" => self.base_epochs = at_least(1)(parse_num(value)?)?,
                "sft.lr" => self.sft_lr = positive(parse_num(value)?)?,
                "sft.epochs" => self.sft_epochs = at_least(1)(parse_num(value)?)?,
                _ => return Err(format!("unknown key `{key}`")),
            }
            Ok(())
        })();
        r.map_err(|m| if m.starts_with("unknown key") { m } else { format!("{key}: {m}") })
    }

    /// Effective learning rate for epoch-based methods.
    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or(if self.method == "low_sft" {
            DEFAULT_SFT_LR * LOW_SFT_RATIO
        } else {
            DEFAULT_SFT_LR
        })
    }

    pub fn method(&self) -> Result<Method> {
        Ok(match self.method.as_str() {
            "sft" => Method::Sft,
            "low_sft" => Method::LowSft,
            "kl_sft" => Method::KlSft { lambda: self.lambda },
            "static_barycenter" => Method::StaticBarycenter { beta: self.beta },
            "anchored" => Method::Anchored(self.anchor.clone()),
            other => return Err(Error::InvalidInput(format!("unknown method `{other}`"))),
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            method: self.method()?,
            lr: self.effective_lr(),
            epochs: self.epochs,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn task_params(&self) -> TaskParams {
        TaskParams {
            seed: self.seed,
            ..self.task.clone()
        }
    }

    pub fn pipeline_spec(&self) -> Result<PipelineSpec> {
        Ok(PipelineSpec {
            task: TaskSpec::new(self.task_params())?,
            base_lr: self.base_lr,
            base_epochs: self.base_epochs,
            sft_lr: self.sft_lr,
            sft_epochs: self.sft_epochs,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config()?;
        TaskSpec::new(self.task_params())?;
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "method" => self.method.clone(),
            "seed" => self.seed.to_string(),
            "lr" => format!("{:?}", self.effective_lr()),
            "epochs" => self.epochs.to_string(),
            "lambda" => format!("{:?}", self.lambda),
            "beta" => format!("{:?}", self.beta),
            "anchor.alpha" => format!("{:?}", self.anchor.alpha),
            "anchor.space" => self.anchor.space.to_string(),
            "anchor.outer_iters" => self.anchor.outer_iters.to_string(),
            "anchor.inner_epochs" => self.anchor.inner_epochs.to_string(),
            "anchor.inner_lr" => format!("{:?}", self.anchor.inner_lr),
            "anchor.inner_tol" => self.anchor.inner_tol.map_or("off".into(), |v| format!("{v:?}")),
            "task.vocab" => self.task.vocab.to_string(),
            "task.dim" => self.task.dim.to_string(),
            "task.n_general_train" => self.task.n_general_train.to_string(),
            "task.n_general_test" => self.task.n_general_test.to_string(),
            "task.n_domain_train" => self.task.n_domain_train.to_string(),
            "task.n_domain_test" => self.task.n_domain_test.to_string(),
            "task.noise_temp" => format!("{:?}", self.task.noise_temp),
            "base.lr" => format!("{:?}", self.base_lr),
            "base.epochs" => self.base_epochs.to_string(),
            "sft.lr" => format!("{:?}", self.sft_lr),
            "sft.epochs" => self.sft_epochs.to_string(),
            _ => unreachable!("rendered keys come from KEYS"),
        }
    }

    /// All keys with defaults made explicit; `parse(render())` round-trips.
    pub fn resolved(&self) -> Vec<(&'static str, String)> {
        Self::KEYS.iter().map(|&k| (k, self.value_of(k))).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.resolved() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
