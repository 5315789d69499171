//! Model configurations and decode operator extraction.
//!
//! A [`ModelConfig`] holds the architectural parameters of one evaluated LLM.
//! [`decode_operators`] expands it into the per-layer GEMM list seen by a
//! single decode step: Q and KV projections, per-head attention tasks, the
//! output projection and either a dense or a mixture-of-experts FFN.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention variant of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnKind {
    #[serde(rename = "MHA")]
    Mha,
    #[serde(rename = "GQA")]
    Gqa,
    #[serde(rename = "MLA")]
    Mla,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub experts: u64,
    pub top_k: u64,
}

/// Low-rank KV dimensions for multi-head latent attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlaDims {
    pub kv_lora_rank: u64,
}

/// Validated architectural configuration of one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub layers: u64,
    pub hidden: u64,
    pub ffn: u64,
    pub q_heads: u64,
    pub kv_heads: u64,
    pub attn_kind: AttnKind,
    /// Dense FFN has a gate projection next to the up projection.
    #[serde(default = "yes")]
    pub gated_ffn: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mla: Option<MlaDims>,
    pub head_dim: u64,
    pub elem_bytes: u64,
}

fn yes() -> bool {
    true
}

/// On-disk form; `head_dim` and `elem_bytes` may be omitted.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModelConfig {
    name: String,
    layers: u64,
    hidden: u64,
    ffn: u64,
    q_heads: u64,
    kv_heads: u64,
    attn_kind: AttnKind,
    #[serde(default = "yes")]
    gated_ffn: bool,
    #[serde(default)]
    moe: Option<MoeConfig>,
    #[serde(default)]
    mla: Option<MlaDims>,
    #[serde(default)]
    head_dim: Option<u64>,
    #[serde(default)]
    elem_bytes: Option<u64>,
}

impl RawModelConfig {
    fn validate(self) -> Result<ModelConfig> {
        for (field, v) in [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("ffn", self.ffn),
            ("q_heads", self.q_heads),
            ("kv_heads", self.kv_heads),
        ] {
            if v < 1 {
                return Err(Error::invalid(field, "must be at least 1"));
            }
        }
        if self.kv_heads > self.q_heads {
            return Err(Error::invalid("kv_heads", "kv_heads exceeds q_heads"));
        }
        if !self.q_heads.is_multiple_of(self.kv_heads) {
            return Err(Error::invalid("kv_heads", "kv_heads must divide q_heads"));
        }
        let head_dim = match self.head_dim {
            Some(0) => return Err(Error::invalid("head_dim", "must be at least 1")),
            Some(d) => d,
            None => {
                if !self.hidden.is_multiple_of(self.q_heads) {
                    return Err(Error::invalid(
                        "q_heads",
                        "q_heads must divide hidden when head_dim is defaulted",
                    ));
                }
                self.hidden / self.q_heads
            }
        };
        if let Some(moe) = self.moe {
            if moe.experts < 1 {
                return Err(Error::invalid("moe.experts", "must be at least 1"));
            }
            if moe.top_k < 1 || moe.top_k > moe.experts {
                return Err(Error::invalid("moe.top_k", "top_k must lie in [1, experts]"));
            }
        }
        if let Some(mla) = self.mla {
            if mla.kv_lora_rank < 1 {
                return Err(Error::invalid("mla.kv_lora_rank", "must be at least 1"));
            }
        }
        let elem_bytes = self.elem_bytes.unwrap_or(2);
        if elem_bytes < 1 {
            return Err(Error::invalid("elem_bytes", "must be at least 1"));
        }
        Ok(ModelConfig {
            name: self.name,
            layers: self.layers,
            hidden: self.hidden,
            ffn: self.ffn,
            q_heads: self.q_heads,
            kv_heads: self.kv_heads,
            attn_kind: self.attn_kind,
            gated_ffn: self.gated_ffn,
            moe: self.moe,
            mla: self.mla,
            head_dim,
            elem_bytes,
        })
    }
}

/// Preset names accepted by [`preset`], in evaluation order.
pub const PRESET_NAMES: [&str; 5] = [
    "opt-66b",
    "llama3-70b",
    "mixtral-8x22b",
    "qwen3-30b-a3b",
    "deepseek-236b",
];

fn preset_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "opt-66b" => include_str!("../presets/opt-66b.json"),
        "llama3-70b" => include_str!("../presets/llama3-70b.json"),
        "mixtral-8x22b" => include_str!("../presets/mixtral-8x22b.json"),
        "qwen3-30b-a3b" | "qwen3-30b" => include_str!("../presets/qwen3-30b-a3b.json"),
        "deepseek-236b" => include_str!("../presets/deepseek-236b.json"),
        _ => return None,
    })
}

/// Returns one of the shipped model presets by short name.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let src = preset_source(name).ok_or_else(|| Error::UnknownPreset(name.to_string()))?;
    parse_model_config(src, name)
}

/// Parses and validates a model configuration from JSON text.
pub fn parse_model_config(json: &str, what: &str) -> Result<ModelConfig> {
    let raw: RawModelConfig = serde_json::from_str(json).map_err(|source| Error::Parse {
        what: what.to_string(),
        source,
    })?;
    raw.validate()
}

/// Loads and validates a model configuration file.
pub fn load_model_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_model_config(&text, &path.display().to_string())
}

/// Nonlinear stage executed on the vector unit after a GEMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Nonlinear {
    None,
    Softmax,
    Activation,
    Norm,
}

/// How an operator is scheduled across PUs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpClass {
    /// Projection or dense FFN GEMM, partitioned over all PUs.
    Linear,
    /// One MoE expert GEMM; `count` independent instances per layer.
    Expert,
    /// Per-head attention task (QK or AV), scheduled head-parallel.
    AttentionQk,
    AttentionAv,
}

/// A decode linear operator abstracted as an `m x k` by `k x n` GEMM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmOp {
    pub m: u64,
    pub n: u64,
    pub k: u64,
    pub tag: String,
    pub layer: u64,
    pub nonlinear_follow: Nonlinear,
    pub count: u64,
    pub class: OpClass,
    pub elem_bytes: u64,
}

impl GemmOp {
    /// A standalone linear GEMM with 2-byte elements.
    pub fn new(m: u64, n: u64, k: u64) -> Self {
        GemmOp {
            m,
            n,
            k,
            tag: "gemm".to_string(),
            layer: 0,
            nonlinear_follow: Nonlinear::None,
            count: 1,
            class: OpClass::Linear,
            elem_bytes: 2,
        }
    }

    pub fn with_tag(mut self, tag: &str) -> Self {
        self.tag = tag.to_string();
        self
    }

    pub fn with_follow(mut self, follow: Nonlinear) -> Self {
        self.nonlinear_follow = follow;
        self
    }

    pub fn with_count(mut self, count: u64) -> Self {
        self.count = count;
        self
    }

    /// Same operator with new dimensions.
    pub fn reshaped(&self, m: u64, n: u64, k: u64) -> Self {
        GemmOp {
            m,
            n,
            k,
            ..self.clone()
        }
    }

    /// MACs of one instance.
    pub fn macs(&self) -> u64 {
        self.m * self.n * self.k
    }

    /// FLOPs over all `count` instances.
    pub fn flops(&self) -> u64 {
        2 * self.macs() * self.count
    }

    pub fn is_attention(&self) -> bool {
        matches!(self.class, OpClass::AttentionQk | OpClass::AttentionAv)
    }
}

/// Attention geometry carried alongside the graph for head-level scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMeta {
    pub q_heads: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
}

impl AttentionMeta {
    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> u64 {
        self.q_heads / self.kv_heads
    }
}

/// Ordered decode operators of one model step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorGraph {
    pub ops: Vec<GemmOp>,
    pub batch: u64,
    pub seq_len: u64,
    pub attention: Option<AttentionMeta>,
    pub elem_bytes: u64,
}

impl OperatorGraph {
    pub fn empty(batch: u64, seq_len: u64) -> Self {
        OperatorGraph {
            ops: Vec::new(),
            batch,
            seq_len,
            attention: None,
            elem_bytes: 2,
        }
    }

    pub fn total_flops(&self) -> u64 {
        self.ops.iter().map(GemmOp::flops).sum()
    }
}

/// Expected expert routing under a uniform distribution.
///
/// Returns `(activated_experts, tokens_per_expert)`: the `batch * top_k`
/// token-expert assignments spread evenly over `min(E, batch * top_k)`
/// experts, each charged at least one token.
pub fn moe_routing(batch: u64, moe: MoeConfig) -> (u64, u64) {
    let assignments = batch * moe.top_k;
    let activated = assignments.min(moe.experts);
    (activated, assignments.div_ceil(activated).max(1))
}

/// Expands a model into its decode operator graph at one KV length.
pub fn decode_operators(cfg: &ModelConfig, batch: u64, seq_len: u64) -> Result<OperatorGraph> {
    if batch < 1 {
        return Err(Error::invalid("batch", "must be at least 1"));
    }
    if seq_len < 1 {
        return Err(Error::invalid("seq_len", "must be at least 1"));
    }
    if cfg.attn_kind == AttnKind::Mla && cfg.mla.is_none() {
        log::warn!(
            "{}: MLA without low-rank dimensions, emitting MHA-shaped operators",
            cfg.name
        );
    }

    let eb = cfg.elem_bytes;
    let hd = cfg.head_dim;
    let q_width = cfg.q_heads * hd;
    let kv_width = 2 * hd * cfg.kv_heads;
    let heads = batch * cfg.q_heads;

    let op = |layer: u64, tag: &str, m: u64, n: u64, k: u64, class: OpClass| GemmOp {
        m,
        n,
        k,
        tag: tag.to_string(),
        layer,
        nonlinear_follow: Nonlinear::None,
        count: 1,
        class,
        elem_bytes: eb,
    };

    let mut ops = Vec::new();
    for layer in 0..cfg.layers {
        ops.push(op(layer, "q_proj", batch, q_width, cfg.hidden, OpClass::Linear));
        match cfg.mla {
            Some(mla) if cfg.attn_kind == AttnKind::Mla => {
                ops.push(op(layer, "kv_down", batch, mla.kv_lora_rank, cfg.hidden, OpClass::Linear));
                ops.push(op(layer, "kv_up", batch, kv_width, mla.kv_lora_rank, OpClass::Linear));
            }
            _ => ops.push(op(layer, "kv_proj", batch, kv_width, cfg.hidden, OpClass::Linear)),
        }
        ops.push(
            op(layer, "attn_qk", 1, seq_len, hd, OpClass::AttentionQk)
                .with_count(heads)
                .with_follow(Nonlinear::Softmax),
        );
        ops.push(op(layer, "attn_av", 1, hd, seq_len, OpClass::AttentionAv).with_count(heads));
        ops.push(op(layer, "o_proj", batch, cfg.hidden, q_width, OpClass::Linear).with_follow(Nonlinear::Norm));

        match cfg.moe {
            None => {
                if cfg.gated_ffn {
                    ops.push(
                        op(layer, "ffn_gate", batch, cfg.ffn, cfg.hidden, OpClass::Linear)
                            .with_follow(Nonlinear::Activation),
                    );
                    ops.push(op(layer, "ffn_up", batch, cfg.ffn, cfg.hidden, OpClass::Linear));
                } else {
                    ops.push(
                        op(layer, "ffn_up", batch, cfg.ffn, cfg.hidden, OpClass::Linear)
                            .with_follow(Nonlinear::Activation),
                    );
                }
                ops.push(
                    op(layer, "ffn_down", batch, cfg.hidden, cfg.ffn, OpClass::Linear)
                        .with_follow(Nonlinear::Norm),
                );
            }
            Some(moe) => {
                let (activated, m) = moe_routing(batch, moe);
                ops.push(
                    op(layer, "expert_gate", m, cfg.ffn, cfg.hidden, OpClass::Expert)
                        .with_count(activated)
                        .with_follow(Nonlinear::Activation),
                );
                ops.push(op(layer, "expert_up", m, cfg.ffn, cfg.hidden, OpClass::Expert).with_count(activated));
                ops.push(
                    op(layer, "expert_down", m, cfg.hidden, cfg.ffn, OpClass::Expert)
                        .with_count(activated)
                        .with_follow(Nonlinear::Norm),
                );
            }
        }
    }

    Ok(OperatorGraph {
        ops,
        batch,
        seq_len,
        attention: Some(AttentionMeta {
            q_heads: cfg.q_heads,
            kv_heads: cfg.kv_heads,
            head_dim: hd,
        }),
        elem_bytes: eb,
    })
}
