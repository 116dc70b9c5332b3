//! `key = value` run configuration files.
//!
//! Blank lines and `#` comments are ignored. `preset` (if present) supplies
//! model dimensions first; every other key overrides regardless of order.
//! Relative `corpus` paths resolve against the file's directory.

use std::path::{Path, PathBuf};

use mom_tensor::DType;

use crate::assembly::Policy;
use crate::config::{ChunkPlan, ModelConfig, MomConfig};
use crate::model::ModelSpec;
use crate::routing::RouterKind;
use crate::training::TrainConfig;
use crate::{MomError, Result};

pub const KEYS: &[&str] = &[
    "preset",
    "vocab",
    "d_model",
    "heads",
    "d_ff",
    "max_len",
    "eps",
    "plan",
    "mom",
    "policy",
    "router",
    "dtype",
    "corpus",
    "val_fraction",
    "seq_len",
    "batch_size",
    "steps",
    "phase2_steps",
    "peak_lr",
    "warmup_ratio",
    "weight_decay",
    "grad_clip",
    "seed",
    "eval_every",
    "eval_windows",
    "checkpoint_every",
    "tie_pool_modules",
    "out_dir",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    /// Budget of phase 1 and of from-scratch runs is `train.total_steps`.
    pub train: TrainConfig,
    pub phase2_steps: usize,
    pub corpus: PathBuf,
    pub val_fraction: f64,
    pub out_dir: PathBuf,
}

fn bad(key: &str, value: &str, why: &str) -> MomError {
    MomError::config(format!("config key {key}: {why}, got {value:?}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "expected a number"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| MomError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<RunConfig> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                MomError::config(format!("config line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(MomError::config(format!("unknown config key {k:?} on line {}", lineno + 1)));
            }
            pairs.push((k.to_string(), v.to_string()));
        }
        let get = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());

        let (mut config, default_plan) = match get("preset") {
            Some(p) => ModelConfig::preset(p).ok_or_else(|| bad("preset", p, "unknown preset"))?,
            None => ModelConfig::preset("tiny").expect("tiny preset exists"),
        };
        let mut train = TrainConfig {
            total_steps: 2000,
            ..TrainConfig::default()
        };
        let mut phase2_steps = 1000;
        let mut plan: ChunkPlan = default_plan.parse()?;
        let mut mom = MomConfig::new(3, 1, true);
        let mut policy = Policy::Mom;
        let mut router = RouterKind::Gru;
        let mut corpus = None;
        let mut val_fraction = 0.01;
        let mut out_dir = PathBuf::from("out");

        for (k, v) in &pairs {
            let v = v.as_str();
            match k.as_str() {
                "preset" => {}
                "vocab" => config.vocab = num(k, v)?,
                "d_model" => config.d_model = num(k, v)?,
                "heads" => config.heads = num(k, v)?,
                "d_ff" => config.d_ff = num(k, v)?,
                "max_len" => config.max_len = num(k, v)?,
                "eps" => config.eps = num(k, v)?,
                "plan" => plan = v.parse()?,
                "mom" => mom = v.parse()?,
                "policy" => policy = v.parse()?,
                "router" => router = v.parse()?,
                "dtype" => train.dtype = DType::parse(v).ok_or_else(|| bad(k, v, "expected f32 or f64"))?,
                "corpus" => corpus = Some(base.join(v)),
                "val_fraction" => val_fraction = num(k, v)?,
                "seq_len" => train.seq_len = num(k, v)?,
                "batch_size" => train.batch_size = num(k, v)?,
                "steps" => train.total_steps = num(k, v)?,
                "phase2_steps" => phase2_steps = num(k, v)?,
                "peak_lr" => train.peak_lr = num(k, v)?,
                "warmup_ratio" => train.warmup_ratio = num(k, v)?,
                "weight_decay" => train.weight_decay = num(k, v)?,
                "grad_clip" => {
                    train.grad_clip = match v {
                        "none" | "off" => None,
                        _ => Some(num(k, v)?),
                    }
                }
                "seed" => train.seed = num(k, v)?,
                "eval_every" => train.eval_every = num(k, v)?,
                "eval_windows" => train.eval_windows = Some(num(k, v)?),
                "checkpoint_every" => train.checkpoint_every = num(k, v)?,
                "tie_pool_modules" => {
                    train.tie_pool_modules = v.parse().map_err(|_| bad(k, v, "expected true or false"))?
                }
                "out_dir" => out_dir = base.join(v),
                _ => unreachable!("keys are checked above"),
            }
        }
        config.validate()?;
        train.validate()?;
        let corpus = corpus.ok_or_else(|| MomError::config("config key corpus is required"))?;
        if !corpus.is_file() {
            return Err(MomError::config(format!("corpus {} does not exist", corpus.display())));
        }
        Ok(RunConfig {
            model: ModelSpec {
                config,
                plan,
                mom,
                policy,
                router,
                dtype: train.dtype,
            },
            train,
            phase2_steps,
            corpus,
            val_fraction,
            out_dir,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_corpus(body: &str) -> (tempfile::TempDir, String) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("c.txt"), "hello").unwrap();
        (dir, format!("corpus = c.txt\n{body}"))
    }

    #[test]
    fn parses_and_overrides_preset() {
        let (dir, text) = with_corpus("# comment\nd_model = 64 # inline\npreset = tiny\nsteps = 7\nmom = K2H3\n");
        let rc = RunConfig::parse(&text, dir.path()).unwrap();
        assert_eq!(rc.model.config.d_model, 64);
        assert_eq!(rc.train.total_steps, 7);
        assert_eq!(rc.model.mom, MomConfig::new(2, 3, false));
    }

    #[test]
    fn unknown_key_is_named() {
        let (dir, text) = with_corpus("learning_rate = 1\n");
        let err = RunConfig::parse(&text, dir.path()).unwrap_err();
        assert!(matches!(err, MomError::Config(_)));
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn missing_corpus_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = RunConfig::parse("corpus = nope.txt", dir.path()).unwrap_err();
        assert!(matches!(err, MomError::Config(_)));
    }
}
