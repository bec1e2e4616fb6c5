//! Run configuration: model architecture, training recipe and corpus.
//!
//! The on-disk format is TOML with sections `[model]`, `[train]` and
//! `[corpus]` whose keys mirror the struct field names. Missing keys fall
//! back to the toy recipe defaults.

use serde::{Deserialize, Serialize};

use crate::gating::TemperatureSchedule;
use crate::numerics::Activation;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    DecoderOnly,
    EncoderOnly,
}

/// Which routing function drives the MoE layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    /// Dense-to-sparse gate: threshold routing while dense, Top-1 after.
    Dts,
    /// Fixed Top-K (Switch-style for k = 1).
    Topk,
    /// Parameter-free hash routing on the input token id.
    Hash,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub vocab: usize,
    pub seq_len: usize,
    /// Experts per MoE layer.
    pub n_experts: usize,
    /// 0-based indices of the layers whose FFN is an MoE layer.
    pub moe_layers: Vec<usize>,
    /// Iterations of shared-expert training (T_S).
    pub t_shared: u64,
    /// Iteration at which the dense-threshold gate switches to Top-1 (T_D).
    pub t_dense: u64,
    /// Total training iterations (T).
    pub t_total: u64,
    pub schedule: TemperatureSchedule,
    /// Balance-loss coefficient.
    pub alpha: f64,
    /// Dense-gate selection threshold (c).
    pub threshold: f64,
    pub seed: u64,
    pub arch: Arch,
    pub gate_kind: GateKind,
    /// k for the Top-K gate.
    pub top_k: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub label_smoothing: f64,
    /// Fraction of shared-expert weights zeroed when spawning each expert.
    pub mask_ratio: f64,
    /// Gumbel noise on gate logits during training.
    pub noise_enabled: bool,
    /// Keep the balance loss active in the Top-1 phase after t_dense.
    pub balance_in_top1: bool,
}

/// MoE placement at every other FFN, counting the first layer as odd
/// (1-based), i.e. 0-based indices 0, 2, 4, ...
pub fn every_other_moe(layers: usize) -> Vec<usize> {
    (0..layers).filter(|l| l % 2 == 0).collect()
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            d_model: 64,
            d_ff: 256,
            heads: 4,
            vocab: 64,
            seq_len: 16,
            n_experts: 4,
            moe_layers: every_other_moe(2),
            t_shared: 500,
            t_dense: 1500,
            t_total: 5000,
            schedule: TemperatureSchedule::default(),
            alpha: 0.1,
            threshold: 0.001,
            seed: 0,
            arch: Arch::DecoderOnly,
            gate_kind: GateKind::Dts,
            top_k: 1,
            activation: Activation::Gelu,
            dropout: 0.1,
            label_smoothing: 0.0,
            mask_ratio: 0.1,
            noise_enabled: true,
            balance_in_top1: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_iters: u64,
    pub weight_decay: f64,
    /// Metrics line cadence.
    pub metrics_every: u64,
    /// Routing-trace cadence.
    pub trace_every: u64,
    /// Extra checkpoint cadence; 0 keeps only phase boundaries and the end.
    pub checkpoint_every: u64,
    /// Evaluation cadence on the validation split; 0 disables periodic eval.
    pub eval_every: u64,
    /// Token ids whose per-step expert choice is recorded in the trace.
    pub tracked_tokens: Vec<u32>,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            batch_size: 8,
            lr: 3e-4,
            warmup_iters: 100,
            weight_decay: 0.1,
            metrics_every: 10,
            trace_every: 50,
            checkpoint_every: 0,
            eval_every: 0,
            tracked_tokens: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Markov,
    Copy,
    Mixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub kind: CorpusKind,
    pub size: usize,
    /// Latent sub-languages for the mixture corpus.
    pub sublanguages: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { kind: CorpusKind::Mixture, size: 200_000, sublanguages: 4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainParams,
    pub corpus: CorpusConfig,
}

impl Config {
    /// Parse from TOML, overlay on the toy defaults, validate and
    /// canonicalize.
    pub fn from_toml(text: &str) -> Result<Config> {
        let mut cfg: Config =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.finalize()?;
        Ok(cfg)
    }

    /// Canonical TOML rendering of the resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Validate invariants and derive the schedule's dense window from the
    /// phase boundaries.
    pub fn finalize(&mut self) -> Result<()> {
        let m = &mut self.model;
        if m.d_model == 0 || m.vocab < 2 || m.seq_len == 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} / vocab {} / seq_len {} out of range",
                m.d_model, m.vocab, m.seq_len
            )));
        }
        if m.heads == 0 || m.d_model % m.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be divisible by heads {}",
                m.d_model, m.heads
            )));
        }
        if !(m.t_shared <= m.t_dense && m.t_dense <= m.t_total) {
            return Err(Error::InvalidConfig(format!(
                "phase boundaries must satisfy 0 <= t_shared ({}) <= t_dense ({}) <= t_total ({})",
                m.t_shared, m.t_dense, m.t_total
            )));
        }
        if let Some(&bad) = m.moe_layers.iter().find(|&&l| l >= m.layers) {
            return Err(Error::InvalidConfig(format!(
                "moe layer index {bad} out of range for {} layers",
                m.layers
            )));
        }
        if !m.moe_layers.is_empty() && m.n_experts == 0 {
            return Err(Error::InvalidConfig("n_experts must be positive".into()));
        }
        if !(0.0..1.0).contains(&m.threshold) {
            return Err(Error::InvalidConfig(format!("threshold must be in [0, 1), got {}", m.threshold)));
        }
        if m.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!("alpha must be nonnegative, got {}", m.alpha)));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::InvalidConfig(format!("dropout must be in [0, 1), got {}", m.dropout)));
        }
        if !(0.0..1.0).contains(&m.mask_ratio) && m.mask_ratio != 1.0 {
            return Err(Error::InvalidConfig(format!("mask_ratio must be in [0, 1], got {}", m.mask_ratio)));
        }
        if m.gate_kind == GateKind::Topk && (m.top_k < 1 || m.top_k > m.n_experts.max(1)) {
            return Err(Error::InvalidConfig(format!(
                "top_k {} out of range for {} experts",
                m.top_k, m.n_experts
            )));
        }
        m.schedule.validate()?;
        m.schedule.dense_iters = m.t_dense - m.t_shared;
        if self.train.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.corpus.kind == CorpusKind::Mixture && self.corpus.sublanguages == 0 {
            return Err(Error::InvalidConfig("mixture corpus needs at least one sub-language".into()));
        }
        if self.corpus.size < (self.model.seq_len + 1) * 20 {
            return Err(Error::InvalidConfig(format!(
                "corpus size {} too small for seq_len {}",
                self.corpus.size, self.model.seq_len
            )));
        }
        Ok(())
    }
}
