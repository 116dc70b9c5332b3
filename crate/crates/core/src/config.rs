//! Model dimensions, the `KaHbS` selection notation and chunk plans.

use std::fmt;
use std::str::FromStr;

use crate::{MomError, Result};

/// Shape hyperparameters shared by every module of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Longest sequence the position table covers.
    pub max_len: usize,
    pub eps: f64,
}

impl ModelConfig {
    /// 256-byte vocabulary at the smallest width that still trains in seconds.
    pub const TINY: ModelConfig = ModelConfig {
        vocab: 256,
        d_model: 32,
        heads: 2,
        d_ff: 128,
        max_len: 64,
        eps: 1e-5,
    };

    pub const DESK: ModelConfig = ModelConfig {
        vocab: 256,
        d_model: 128,
        heads: 4,
        d_ff: 512,
        max_len: 256,
        eps: 1e-5,
    };

    pub const GPT2_SMALL: ModelConfig = ModelConfig {
        vocab: 50257,
        d_model: 768,
        heads: 12,
        d_ff: 3072,
        max_len: 1024,
        eps: 1e-5,
    };

    pub const GPT2_MEDIUM: ModelConfig = ModelConfig {
        vocab: 50257,
        d_model: 1024,
        heads: 16,
        d_ff: 4096,
        max_len: 1024,
        eps: 1e-5,
    };

    pub const GPT2_LARGE: ModelConfig = ModelConfig {
        vocab: 50257,
        d_model: 1280,
        heads: 20,
        d_ff: 5120,
        max_len: 1024,
        eps: 1e-5,
    };

    /// Named preset and the chunk plan it is usually paired with.
    pub fn preset(name: &str) -> Option<(ModelConfig, &'static str)> {
        Some(match name {
            "tiny" => (Self::TINY, "[1-4-1]"),
            "desk" => (Self::DESK, "[1-1-4-1-1]"),
            "gpt2-small" => (Self::GPT2_SMALL, "[1-1-4-1-4-1]"),
            "gpt2-medium" => (Self::GPT2_MEDIUM, "[1-1-1-4-1-4-1-4-1-4-1-1]"),
            "gpt2-large" => (Self::GPT2_LARGE, "[1-4-1-4-1-4-1-4-1-4-1-4-1-4-1]"),
            _ => return None,
        })
    }

    pub const PRESETS: [&'static str; 5] = ["tiny", "desk", "gpt2-small", "gpt2-medium", "gpt2-large"];

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let zero = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ]
        .into_iter()
        .find(|(_, v)| *v == 0);
        if let Some((name, _)) = zero {
            return Err(MomError::config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(MomError::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(self.eps > 0.0) {
            return Err(MomError::config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    /// Parses either a preset name or `key=value` pairs separated by commas,
    /// e.g. `d=64,heads=4,d_ff=256,len=128,vocab=256`. Missing keys fall back
    /// to the tiny preset.
    pub fn parse_dims(s: &str) -> Result<ModelConfig> {
        if let Some((cfg, _)) = Self::preset(s) {
            return Ok(cfg);
        }
        let mut cfg = Self::TINY;
        let mut pos = 0;
        for part in s.split(',') {
            let err = |msg: String| MomError::Parse {
                what: "dims",
                input: s.to_string(),
                pos,
                msg,
            };
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| err(format!("expected a preset or key=value, found {part:?}")))?;
            let k = k.trim();
            let v = v.trim();
            if k == "eps" {
                cfg.eps = v.parse().map_err(|_| err(format!("bad number {v:?}")))?;
            } else {
                let n: usize = v.parse().map_err(|_| err(format!("bad integer {v:?}")))?;
                match k {
                    "d" | "d_model" => cfg.d_model = n,
                    "heads" => cfg.heads = n,
                    "d_ff" => cfg.d_ff = n,
                    "len" | "max_len" => cfg.max_len = n,
                    "vocab" => cfg.vocab = n,
                    _ => return Err(err(format!("unknown dimension {k:?}"))),
                }
            }
            pos += part.len() + 1;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `K{a}H{b}` with optional `S`: `a` modules are selected per sub-round,
/// assembly lasts `b` steps, and `S` adds the SKIP choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MomConfig {
    pub k: usize,
    pub h: usize,
    pub skip: bool,
}

impl MomConfig {
    pub fn new(k: usize, h: usize, skip: bool) -> Self {
        MomConfig { k, h, skip }
    }
}

impl fmt::Display for MomConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "K{}H{}{}", self.k, self.h, if self.skip { "S" } else { "" })
    }
}

impl FromStr for MomConfig {
    type Err = MomError;

    fn from_str(s: &str) -> Result<MomConfig> {
        let err = |pos: usize, msg: &str| MomError::Parse {
            what: "mom config",
            input: s.to_string(),
            pos,
            msg: msg.to_string(),
        };
        let bytes = s.as_bytes();
        let mut pos = 0;
        let number = |pos: &mut usize, letter: u8| -> Result<usize> {
            if bytes.get(*pos) != Some(&letter) {
                return Err(err(*pos, &format!("expected '{}'", letter as char)));
            }
            *pos += 1;
            let start = *pos;
            while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
                *pos += 1;
            }
            let value: usize = s[start..*pos]
                .parse()
                .map_err(|_| err(start, "expected a count"))?;
            if value == 0 {
                return Err(err(start, "count must be at least 1"));
            }
            Ok(value)
        };
        let k = number(&mut pos, b'K')?;
        let h = number(&mut pos, b'H')?;
        let skip = match &s[pos..] {
            "" => false,
            "S" => true,
            _ => return Err(err(pos, "expected optional 'S' and end of input")),
        };
        Ok(MomConfig { k, h, skip })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanBlock {
    /// One fixed transformer layer that bypasses routing.
    Vanilla,
    /// A pool of `n` attention and `n` FFN modules assembled over several steps.
    Chunk(usize),
}

impl PlanBlock {
    pub fn layers(self) -> usize {
        match self {
            PlanBlock::Vanilla => 1,
            PlanBlock::Chunk(n) => n,
        }
    }
}

/// Layout like `[1-1-4-1-1]`: each `1` is a vanilla layer, any larger
/// number `N` is a chunk whose pools hold `N` modules of each type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub blocks: Vec<PlanBlock>,
}

impl ChunkPlan {
    pub fn all_vanilla(layers: usize) -> Self {
        ChunkPlan {
            blocks: vec![PlanBlock::Vanilla; layers],
        }
    }

    /// Number of vanilla layers whose weights this plan covers.
    pub fn layer_count(&self) -> usize {
        self.blocks.iter().map(|b| b.layers()).sum()
    }

    pub fn chunk_sizes(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().filter_map(|b| match b {
            PlanBlock::Chunk(n) => Some(*n),
            PlanBlock::Vanilla => None,
        })
    }

    pub fn is_all_vanilla(&self) -> bool {
        self.chunk_sizes().next().is_none()
    }
}

impl fmt::Display for ChunkPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.blocks.iter().map(|b| b.layers().to_string()).collect();
        write!(f, "[{}]", parts.join("-"))
    }
}

impl FromStr for ChunkPlan {
    type Err = MomError;

    fn from_str(s: &str) -> Result<ChunkPlan> {
        let err = |pos: usize, msg: &str| MomError::Parse {
            what: "chunk plan",
            input: s.to_string(),
            pos,
            msg: msg.to_string(),
        };
        if !s.starts_with('[') {
            return Err(err(0, "expected '['"));
        }
        if !s.ends_with(']') || s.len() < 2 {
            return Err(err(s.len(), "expected ']'"));
        }
        let body = &s[1..s.len() - 1];
        if body.is_empty() {
            return Err(err(1, "plan is empty"));
        }
        let mut blocks = Vec::new();
        let mut pos = 1;
        for token in body.split('-') {
            if token.is_empty() || !token.bytes().all(|b| b.is_ascii_digit()) {
                return Err(err(pos, "expected a layer count"));
            }
            let n: usize = token.parse().map_err(|_| err(pos, "layer count too large"))?;
            blocks.push(match n {
                0 => return Err(err(pos, "layer count must be at least 1")),
                1 => PlanBlock::Vanilla,
                n => PlanBlock::Chunk(n),
            });
            pos += token.len() + 1;
        }
        Ok(ChunkPlan { blocks })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mom_config_examples() {
        assert_eq!("K2H6S".parse::<MomConfig>().unwrap(), MomConfig::new(2, 6, true));
        assert_eq!("K1H4".parse::<MomConfig>().unwrap(), MomConfig::new(1, 4, false));
        assert!("K0H3".parse::<MomConfig>().is_err());
        for bad in ["", "K", "K2", "K2H", "H2K2", "K2H2s", "K2H2SS", "k2h2"] {
            assert!(bad.parse::<MomConfig>().is_err(), "{bad}");
        }
    }

    #[test]
    fn plan_examples() {
        use PlanBlock::*;
        let p: ChunkPlan = "[1-1-4-1-1]".parse().unwrap();
        assert_eq!(p.blocks, vec![Vanilla, Vanilla, Chunk(4), Vanilla, Vanilla]);
        assert_eq!(p.layer_count(), 8);
        assert_eq!("[8]".parse::<ChunkPlan>().unwrap().blocks, vec![Chunk(8)]);
        assert_eq!("[1-6-1]".parse::<ChunkPlan>().unwrap().blocks, vec![Vanilla, Chunk(6), Vanilla]);
        for bad in ["", "[]", "[1--1]", "[0]", "1-1", "[1-1", "[a]"] {
            assert!(bad.parse::<ChunkPlan>().is_err(), "{bad}");
        }
    }

    #[test]
    fn parse_error_reports_position() {
        let err = "[1-x-1]".parse::<ChunkPlan>().unwrap_err().to_string();
        assert!(err.contains("position 3"), "{err}");
    }

    #[test]
    fn custom_dims() {
        let c = ModelConfig::parse_dims("d=8,heads=2,d_ff=16,len=4,vocab=10").unwrap();
        assert_eq!((c.d_model, c.heads, c.d_ff, c.max_len, c.vocab), (8, 2, 16, 4, 10));
        assert!(ModelConfig::parse_dims("d=6,heads=4").is_err());
        assert_eq!(ModelConfig::parse_dims("gpt2-small").unwrap(), ModelConfig::GPT2_SMALL);
    }
}
