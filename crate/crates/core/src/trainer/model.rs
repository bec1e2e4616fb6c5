//! The decoder/encoder transformer language model over a `ParamStore`, with
//! MoE layers that move through the shared → diversified lifecycle.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use super::adam::AdamState;
use super::config::{Arch, GateKind, ModelConfig};
use super::params::ParamStore;
use crate::gating::{
    balance_loss, dts_gate, hash_gate, temperature_at, topk_gate, GateDecision, GateParams,
};
use crate::moe::{moe_forward, shared_forward, spawn_diverse, Expert, ExpertParams};
use crate::numerics::{dropout, multi_head, Graph, MultiHeadParams, Tensor};
use crate::{Error, Result};

/// Training phase. Stage 1 is the shared-expert phase; stage 2 covers both
/// the dense-threshold window and the Top-1 tail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Shared,
    Dense,
    Sparse,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Shared => "shared",
            Phase::Dense => "dense",
            Phase::Sparse => "sparse",
        }
    }
}

/// Phase at an iteration. A model without MoE layers stays in the shared
/// phase for its whole run (it is the plain dense backbone).
pub fn phase_of(cfg: &ModelConfig, iter: u64) -> Phase {
    if cfg.moe_layers.is_empty() || iter < cfg.t_shared {
        Phase::Shared
    } else if iter < cfg.t_dense {
        Phase::Dense
    } else {
        Phase::Sparse
    }
}

/// Staged objective: task loss alone in the shared phase, task plus balance
/// afterwards. Supplying a balance term in the shared phase (or omitting it
/// later) is an error.
pub fn objective(g: &mut Graph, task: Tensor, balance: Option<Tensor>, phase: Phase) -> Result<Tensor> {
    match (phase, balance) {
        (Phase::Shared, None) => Ok(task),
        (Phase::Shared, Some(_)) => Err(Error::InvalidParameter(
            "balance term supplied in the shared phase".into(),
        )),
        (_, Some(b)) => g.add(task, b),
        (_, None) => Err(Error::InvalidParameter(
            "balance term required outside the shared phase".into(),
        )),
    }
}

#[derive(Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    /// Whether MoE layers carry expert sets (true) or the shared expert.
    pub diversified: bool,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn init_weight(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| 0.02 * normal(rng)).collect()
}

impl Model {
    /// Initialize parameters in a fixed draw order. MoE layers start as a
    /// single shared expert unless the shared phase has zero length, in which
    /// case experts (and the gate) are created independently right away.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
        let mut params = ParamStore::new();
        let d = cfg.d_model;
        let dk = d / cfg.heads;
        let independent_experts = cfg.t_shared == 0 && !cfg.moe_layers.is_empty();

        params.insert("embed.tok", vec![cfg.vocab, d], init_weight(rng, cfg.vocab * d))?;
        params.insert("embed.pos", vec![cfg.seq_len, d], init_weight(rng, cfg.seq_len * d))?;
        for l in 0..cfg.layers {
            for h in 0..cfg.heads {
                params.insert(&format!("layer{l}.attn.wq{h}"), vec![d, dk], init_weight(rng, d * dk))?;
            }
            for h in 0..cfg.heads {
                params.insert(&format!("layer{l}.attn.wk{h}"), vec![d, dk], init_weight(rng, d * dk))?;
            }
            for h in 0..cfg.heads {
                params.insert(&format!("layer{l}.attn.wv{h}"), vec![d, dk], init_weight(rng, d * dk))?;
            }
            params.insert(&format!("layer{l}.attn.wo"), vec![d, d], init_weight(rng, d * d))?;
            params.insert(&format!("layer{l}.ln1.gain"), vec![d], vec![1.0; d])?;
            params.insert(&format!("layer{l}.ln1.bias"), vec![d], vec![0.0; d])?;
            if cfg.moe_layers.contains(&l) {
                if independent_experts {
                    for i in 0..cfg.n_experts {
                        insert_ffn(&mut params, &format!("layer{l}.expert{i}"), cfg, rng)?;
                    }
                    if cfg.gate_kind != GateKind::Hash {
                        params.insert(
                            &format!("layer{l}.gate.wg"),
                            vec![d, cfg.n_experts],
                            init_weight(rng, d * cfg.n_experts),
                        )?;
                    }
                } else {
                    insert_ffn(&mut params, &format!("layer{l}.shared"), cfg, rng)?;
                }
            } else {
                insert_ffn(&mut params, &format!("layer{l}.ffn"), cfg, rng)?;
            }
            params.insert(&format!("layer{l}.ln2.gain"), vec![d], vec![1.0; d])?;
            params.insert(&format!("layer{l}.ln2.bias"), vec![d], vec![0.0; d])?;
        }
        params.insert("out.w", vec![d, cfg.vocab], init_weight(rng, d * cfg.vocab))?;

        Ok(Model { cfg: cfg.clone(), params, diversified: independent_experts })
    }

    /// Spawn the expert sets from each shared expert and create the gates.
    /// Optimizer moments for the new parameters start at zero; the caller's
    /// `AdamState` keeps its existing slots for backbone parameters.
    pub fn diversify(&mut self, rng: &mut ChaCha8Rng, adam: &mut AdamState) -> Result<()> {
        if self.diversified {
            return Err(Error::Invariant("model already diversified".into()));
        }
        let cfg = self.cfg.clone();
        for &l in &cfg.moe_layers {
            let prefix = format!("layer{l}.shared");
            let shared = self.take_expert(&prefix)?;
            adam.slots.remove(&format!("{prefix}.w1"));
            adam.slots.remove(&format!("{prefix}.b1"));
            adam.slots.remove(&format!("{prefix}.w2"));
            adam.slots.remove(&format!("{prefix}.b2"));
            let seed = spawn_seed(cfg.seed, l as u64);
            let experts = spawn_diverse(&shared, cfg.n_experts, cfg.mask_ratio, seed)?;
            for (i, e) in experts.into_iter().enumerate() {
                insert_expert(&mut self.params, &format!("layer{l}.expert{i}"), &e)?;
            }
            if cfg.gate_kind != GateKind::Hash {
                self.params.insert(
                    &format!("layer{l}.gate.wg"),
                    vec![cfg.d_model, cfg.n_experts],
                    init_weight(rng, cfg.d_model * cfg.n_experts),
                )?;
            }
        }
        self.diversified = true;
        Ok(())
    }

    fn take_expert(&mut self, prefix: &str) -> Result<Expert> {
        let mut grab = |suffix: &str| {
            self.params
                .remove(&format!("{prefix}.{suffix}"))
                .ok_or_else(|| Error::Invariant(format!("missing parameter {prefix}.{suffix}")))
        };
        let w1 = grab("w1")?;
        let b1 = grab("b1")?;
        let w2 = grab("w2")?;
        let b2 = grab("b2")?;
        Ok(Expert {
            d_model: self.cfg.d_model,
            d_ff: self.cfg.d_ff,
            w1: w1.data,
            b1: b1.data,
            w2: w2.data,
            b2: b2.data,
        })
    }

    /// Forward a batch and assemble the staged objective.
    pub fn forward(
        &self,
        g: &mut Graph,
        inputs: &[Vec<usize>],
        targets: &[Vec<usize>],
        iter: u64,
        training: bool,
        gate_rng: &mut ChaCha8Rng,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass> {
        let cfg = &self.cfg;
        let b = inputs.len();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        let l = inputs[0].len();
        if inputs.iter().any(|s| s.len() != l) || targets.len() != b || targets.iter().any(|s| s.len() != l) {
            return Err(Error::InvalidParameter("ragged batch".into()));
        }
        if l > cfg.seq_len {
            return Err(Error::InvalidParameter(format!(
                "sequence length {l} exceeds configured maximum {}",
                cfg.seq_len
            )));
        }
        let phase = phase_of(cfg, iter);
        if phase != Phase::Shared && !self.diversified {
            return Err(Error::Invariant("gate-sparsify phase with undiversified experts".into()));
        }

        let mut leaves: HashMap<String, Tensor> = HashMap::with_capacity(self.params.len());
        for e in self.params.iter() {
            leaves.insert(e.name.clone(), g.leaf(e.data.clone(), e.shape.clone())?);
        }
        let get = |name: &str| -> Result<Tensor> {
            leaves.get(name).copied().ok_or_else(|| Error::Invariant(format!("missing leaf {name}")))
        };

        let causal = cfg.arch == Arch::DecoderOnly;
        let tau = temperature_at(&cfg.schedule, iter.saturating_sub(cfg.t_shared));
        let positions: Vec<usize> = (0..l).collect();
        let tok_table = get("embed.tok")?;
        let pos_table = get("embed.pos")?;

        let mut seqs = Vec::with_capacity(b);
        for seq in inputs {
            let te = g.embed(tok_table, seq)?;
            let pe = g.embed(pos_table, &positions)?;
            let x = g.add(te, pe)?;
            seqs.push(dropout(g, x, cfg.dropout, training, dropout_rng)?);
        }

        let flat_tokens: Vec<u64> = inputs.iter().flatten().map(|&t| t as u64).collect();
        let mut balance_terms: Vec<Tensor> = Vec::new();
        let mut balance_value = 0.0;
        let mut moe_ids: Vec<(usize, Vec<Vec<usize>>)> = Vec::new();
        let mut expert_calls = 0u64;
        let mut selected_means: Vec<f64> = Vec::new();

        for layer in 0..cfg.layers {
            let mh = MultiHeadParams {
                wq: (0..cfg.heads)
                    .map(|h| get(&format!("layer{layer}.attn.wq{h}")))
                    .collect::<Result<_>>()?,
                wk: (0..cfg.heads)
                    .map(|h| get(&format!("layer{layer}.attn.wk{h}")))
                    .collect::<Result<_>>()?,
                wv: (0..cfg.heads)
                    .map(|h| get(&format!("layer{layer}.attn.wv{h}")))
                    .collect::<Result<_>>()?,
                wo: get(&format!("layer{layer}.attn.wo"))?,
            };
            let ln1g = get(&format!("layer{layer}.ln1.gain"))?;
            let ln1b = get(&format!("layer{layer}.ln1.bias"))?;
            for x in seqs.iter_mut() {
                let a = multi_head(g, *x, *x, *x, &mh, causal)?;
                let a = dropout(g, a, cfg.dropout, training, dropout_rng)?;
                let res = g.add(*x, a)?;
                *x = g.layer_norm(res, ln1g, ln1b)?;
            }

            let all = g.concat_rows(&seqs)?;
            let is_moe = cfg.moe_layers.contains(&layer);
            let y = if !is_moe {
                let p = ffn_params(&get, &format!("layer{layer}.ffn"))?;
                shared_forward(g, all, &p, cfg.activation)?
            } else if !self.diversified {
                let p = ffn_params(&get, &format!("layer{layer}.shared"))?;
                shared_forward(g, all, &p, cfg.activation)?
            } else {
                let decision = self.gate_decision(g, all, layer, iter, tau, training, gate_rng, &flat_tokens, &get)?;
                let experts: Vec<ExpertParams> = (0..cfg.n_experts)
                    .map(|i| ffn_params(&get, &format!("layer{layer}.expert{i}")))
                    .collect::<Result<_>>()?;
                let out = moe_forward(g, all, &decision, &experts, cfg.activation)?;
                expert_calls += out.tokens_per_expert.iter().sum::<usize>() as u64;
                selected_means.push(decision.mean_selected());
                let in_balance_window = iter < cfg.t_dense || cfg.balance_in_top1;
                if phase != Phase::Shared && in_balance_window {
                    let bl = balance_loss(g, &decision, cfg.alpha)?;
                    balance_value += g.value(bl);
                    balance_terms.push(bl);
                }
                moe_ids.push((layer, decision.ids));
                out.y
            };
            let y = dropout(g, y, cfg.dropout, training, dropout_rng)?;
            let res = g.add(all, y)?;
            let ln2g = get(&format!("layer{layer}.ln2.gain"))?;
            let ln2b = get(&format!("layer{layer}.ln2.bias"))?;
            let normed = g.layer_norm(res, ln2g, ln2b)?;
            for (s, x) in seqs.iter_mut().enumerate() {
                *x = g.slice_rows(normed, s * l, l)?;
            }
        }

        let all = g.concat_rows(&seqs)?;
        let logits = g.matmul(all, get("out.w")?)?;
        let flat_targets: Vec<usize> = targets.iter().flatten().copied().collect();
        let task = g.cross_entropy(logits, &flat_targets, cfg.label_smoothing)?;
        let task_value = g.value(task);

        let balance = if phase == Phase::Shared {
            None
        } else {
            // Zero scalar when every per-layer term is out of its window
            // (balance disabled in the Top-1 tail).
            Some(match balance_terms.len() {
                0 => g.scalar(0.0)?,
                _ => {
                    let mut acc = balance_terms[0];
                    for t in &balance_terms[1..] {
                        acc = g.add(acc, *t)?;
                    }
                    acc
                }
            })
        };
        let loss = objective(g, task, balance, phase)?;

        let mean_selected = if selected_means.is_empty() {
            1.0
        } else {
            selected_means.iter().sum::<f64>() / selected_means.len() as f64
        };

        Ok(ForwardPass {
            leaves,
            loss,
            task_loss: task_value,
            balance_loss: balance_value,
            temperature: tau,
            phase,
            moe_ids,
            expert_calls,
            mean_selected,
            tokens: (b * l) as u64,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn gate_decision(
        &self,
        g: &mut Graph,
        x: Tensor,
        layer: usize,
        iter: u64,
        tau: f64,
        training: bool,
        gate_rng: &mut ChaCha8Rng,
        flat_tokens: &[u64],
        get: &dyn Fn(&str) -> Result<Tensor>,
    ) -> Result<GateDecision> {
        let cfg = &self.cfg;
        match cfg.gate_kind {
            GateKind::Dts => {
                let w_g = get(&format!("layer{layer}.gate.wg"))?;
                let gp = GateParams::new(w_g, cfg.threshold, cfg.alpha, cfg.noise_enabled && training)?;
                dts_gate(g, x, &gp, tau, iter, cfg.t_dense, gate_rng)
            }
            GateKind::Topk => {
                let w_g = get(&format!("layer{layer}.gate.wg"))?;
                topk_gate(g, x, w_g, cfg.top_k)
            }
            GateKind::Hash => hash_gate(g, flat_tokens, cfg.n_experts),
        }
    }

    /// Mean validation/test perplexity `exp(mean token cross-entropy)` over
    /// deterministic windows (dropout and gate noise off). Never touches
    /// optimizer state or the training rng streams.
    pub fn evaluate(&self, corpus: &super::corpus::Corpus, split: super::corpus::Split, iter: u64, batch_size: usize) -> Result<f64> {
        use rand::SeedableRng;
        let windows = super::corpus::eval_windows(corpus, split, self.cfg.seq_len);
        if windows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut total_nll = 0.0;
        let mut total_tokens = 0u64;
        let mut dummy_gate = ChaCha8Rng::seed_from_u64(0);
        let mut dummy_drop = ChaCha8Rng::seed_from_u64(0);
        for group in windows.chunks(batch_size.max(1)) {
            let inputs: Vec<Vec<usize>> = group.iter().map(|(i, _)| i.clone()).collect();
            let targets: Vec<Vec<usize>> = group.iter().map(|(_, t)| t.clone()).collect();
            let mut g = Graph::new();
            let pass = self.forward(&mut g, &inputs, &targets, iter, false, &mut dummy_gate, &mut dummy_drop)?;
            total_nll += pass.task_loss * pass.tokens as f64;
            total_tokens += pass.tokens;
        }
        Ok((total_nll / total_tokens as f64).exp())
    }
}

fn insert_ffn(params: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let (d, dff) = (cfg.d_model, cfg.d_ff);
    params.insert(&format!("{prefix}.w1"), vec![d, dff], init_weight(rng, d * dff))?;
    params.insert(&format!("{prefix}.b1"), vec![dff], vec![0.0; dff])?;
    params.insert(&format!("{prefix}.w2"), vec![dff, d], init_weight(rng, dff * d))?;
    params.insert(&format!("{prefix}.b2"), vec![d], vec![0.0; d])?;
    Ok(())
}

fn insert_expert(params: &mut ParamStore, prefix: &str, e: &Expert) -> Result<()> {
    params.insert(&format!("{prefix}.w1"), vec![e.d_model, e.d_ff], e.w1.clone())?;
    params.insert(&format!("{prefix}.b1"), vec![e.d_ff], e.b1.clone())?;
    params.insert(&format!("{prefix}.w2"), vec![e.d_ff, e.d_model], e.w2.clone())?;
    params.insert(&format!("{prefix}.b2"), vec![e.d_model], e.b2.clone())?;
    Ok(())
}

fn ffn_params(get: &dyn Fn(&str) -> Result<Tensor>, prefix: &str) -> Result<ExpertParams> {
    Ok(ExpertParams {
        w1: get(&format!("{prefix}.w1"))?,
        b1: get(&format!("{prefix}.b1"))?,
        w2: get(&format!("{prefix}.w2"))?,
        b2: get(&format!("{prefix}.b2"))?,
    })
}

fn spawn_seed(seed: u64, layer: u64) -> u64 {
    crate::gating::splitmix64(seed ^ layer.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Everything a training step needs from one forward pass.
pub struct ForwardPass {
    pub leaves: HashMap<String, Tensor>,
    pub loss: Tensor,
    pub task_loss: f64,
    pub balance_loss: f64,
    pub temperature: f64,
    pub phase: Phase,
    /// Per MoE layer: layer index and selected expert ids per token.
    pub moe_ids: Vec<(usize, Vec<Vec<usize>>)>,
    pub expert_calls: u64,
    pub mean_selected: f64,
    pub tokens: u64,
}
