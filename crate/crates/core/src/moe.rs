//! The expert network: shared-expert mode, random-mask expert spawning,
//! sparse dispatch/combine, and FLOPs/parameter accounting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::gating::GateDecision;
use crate::numerics::{ffn_with, Activation, Graph, Tensor};
use crate::trainer::{GateKind, ModelConfig};
use crate::{Error, Result};

/// One expert's FFN parameters as plain storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub d_model: usize,
    pub d_ff: usize,
    /// `[d_model × d_ff]`
    pub w1: Vec<f64>,
    /// `[d_ff]`
    pub b1: Vec<f64>,
    /// `[d_ff × d_model]`
    pub w2: Vec<f64>,
    /// `[d_model]`
    pub b2: Vec<f64>,
}

impl Expert {
    pub fn zeros(d_model: usize, d_ff: usize) -> Self {
        Expert {
            d_model,
            d_ff,
            w1: vec![0.0; d_model * d_ff],
            b1: vec![0.0; d_ff],
            w2: vec![0.0; d_ff * d_model],
            b2: vec![0.0; d_model],
        }
    }

    /// Place this expert's parameters on a graph as leaves.
    pub fn to_graph(&self, g: &mut Graph) -> Result<ExpertParams> {
        Ok(ExpertParams {
            w1: g.leaf(self.w1.clone(), vec![self.d_model, self.d_ff])?,
            b1: g.leaf(self.b1.clone(), vec![self.d_ff])?,
            w2: g.leaf(self.w2.clone(), vec![self.d_ff, self.d_model])?,
            b2: g.leaf(self.b2.clone(), vec![self.d_model])?,
        })
    }
}

/// An expert's parameters already placed on a graph.
#[derive(Clone, Copy)]
pub struct ExpertParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Whether an MoE layer is still the single shared expert or has been
/// diversified into a gated expert set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoeMode {
    Shared,
    Sparse,
}

/// Spawn `n` experts from a shared expert by masking each copy's weight
/// matrices with an independent Bernoulli(mask_ratio) zero-mask seeded by
/// `(seed, expert index)`. Biases are never masked; unmasked entries are
/// bit-equal to the shared values.
pub fn spawn_diverse(shared: &Expert, n: usize, mask_ratio: f64, seed: u64) -> Result<Vec<Expert>> {
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(Error::InvalidParameter(format!(
            "mask_ratio must be in [0, 1], got {mask_ratio}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "spawn_diverse needs at least 2 experts, got {n}"
        )));
    }
    let mut experts = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut e = shared.clone();
        for w in e.w1.iter_mut().chain(e.w2.iter_mut()) {
            if rng.random::<f64>() < mask_ratio {
                *w = 0.0;
            }
        }
        experts.push(e);
    }
    Ok(experts)
}

/// Output of a sparse MoE forward.
#[derive(Debug)]
pub struct MoeForward {
    pub y: Tensor,
    /// Tokens evaluated by each expert; sums to the total expert calls.
    pub tokens_per_expert: Vec<usize>,
}

/// Token routing plan: which rows of the input go to which expert, in
/// ascending token order per expert. Combining scatters each expert's rows
/// back to their original positions, so the composition restores token order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dispatch {
    pub per_expert_rows: Vec<Vec<usize>>,
    pub n_tokens: usize,
}

impl Dispatch {
    pub fn new(ids: &[Vec<usize>], n_experts: usize) -> Dispatch {
        let mut per_expert_rows = vec![Vec::new(); n_experts];
        for (s, sel) in ids.iter().enumerate() {
            for &i in sel {
                per_expert_rows[i].push(s);
            }
        }
        Dispatch { per_expert_rows, n_tokens: ids.len() }
    }

    /// Total expert calls, `Σ_s |ids[s]|`.
    pub fn total_calls(&self) -> usize {
        self.per_expert_rows.iter().map(|r| r.len()).sum()
    }
}

/// Weighted combination of expert outputs:
/// `y_s = Σ_{i ∈ ids[s]} weights[s][i] · e_i(x_s)`.
///
/// Tokens are grouped per expert and each expert runs only on its own group,
/// so the expert-call count is exactly `Σ_s |ids[s]|`. Partial outputs are
/// accumulated in ascending expert order.
pub fn moe_forward(
    g: &mut Graph,
    x: Tensor,
    decision: &GateDecision,
    experts: &[ExpertParams],
    act: Activation,
) -> Result<MoeForward> {
    let (s, d) = (g.shape(x)[0], g.shape(x)[1]);
    if decision.ids.len() != s {
        return Err(Error::InvalidParameter(format!(
            "decision covers {} tokens but input has {s}",
            decision.ids.len()
        )));
    }
    let n = experts.len();
    if g.shape(decision.weights) != [s, n] {
        return Err(Error::ShapeMismatch {
            op: "moe_forward(weights)",
            lhs: g.shape(decision.weights).to_vec(),
            rhs: vec![s, n],
        });
    }
    // A nonzero weight outside the selected set would silently change the
    // output without being counted as an expert call.
    {
        let wv = g.data(decision.weights);
        for (r, sel) in decision.ids.iter().enumerate() {
            for i in 0..n {
                if wv[r * n + i] != 0.0 && !sel.contains(&i) {
                    return Err(Error::Invariant(format!(
                        "nonzero combine weight for unselected expert {i} at token {r}"
                    )));
                }
            }
        }
    }

    let dispatch = Dispatch::new(&decision.ids, n);
    let mut y: Option<Tensor> = None;
    for (i, rows) in dispatch.per_expert_rows.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let xi = g.gather_rows(x, rows)?;
        let hi = ffn_with(g, xi, experts[i].w1, experts[i].b1, experts[i].w2, experts[i].b2, act)?;
        let idx: Vec<(usize, usize)> = rows.iter().map(|&r| (r, i)).collect();
        let wi = g.gather_elems(decision.weights, &idx)?;
        let scaled = g.row_scale(hi, wi)?;
        let part = g.scatter_add_rows(scaled, rows, s)?;
        y = Some(match y {
            None => part,
            Some(acc) => g.add(acc, part)?,
        });
    }
    let y = match y {
        Some(t) => t,
        None => g.leaf(vec![0.0; s * d], vec![s, d])?,
    };
    Ok(MoeForward {
        y,
        tokens_per_expert: dispatch.per_expert_rows.iter().map(|r| r.len()).collect(),
    })
}

/// Shared-expert forward: the plain FFN applied to every token.
pub fn shared_forward(g: &mut Graph, x: Tensor, shared: &ExpertParams, act: Activation) -> Result<Tensor> {
    ffn_with(g, x, shared.w1, shared.b1, shared.w2, shared.b2, act)
}

/// Per-component parameter and FLOP counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ComponentCount {
    pub total_params: u64,
    pub activated_params_per_token: u64,
    pub forward_flops_per_token: u64,
}

impl ComponentCount {
    fn add(&mut self, other: ComponentCount) {
        self.total_params += other.total_params;
        self.activated_params_per_token += other.activated_params_per_token;
        self.forward_flops_per_token += other.forward_flops_per_token;
    }
}

/// Model-wide counts with a per-component breakdown; the breakdown sums to
/// the totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub total_params: u64,
    pub activated_params_per_token: u64,
    pub forward_flops_per_token: u64,
    pub attention: ComponentCount,
    pub experts: ComponentCount,
    pub gate: ComponentCount,
    pub embedding: ComponentCount,
}

/// Experts activated per token when counting FLOPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// All experts of each MoE layer run.
    Dense,
    /// A fixed number of experts runs per token.
    TopK(usize),
}

/// Multiply-add-counted (2 FLOPs each) forward cost and parameter counts for
/// a config. Bias adds, activations and normalizations are not counted.
///
/// Components: `attention` covers the projections plus both layer norms'
/// gains/biases; `experts` covers FFN or expert parameters; `gate` the gate
/// matrices; `embedding` the token/position tables and the output projection.
pub fn flops_count(config: &ModelConfig, gate_mode: GateMode) -> Result<FlopsReport> {
    let d = config.d_model as u64;
    let d_ff = config.d_ff as u64;
    let v = config.vocab as u64;
    let l = config.seq_len as u64;
    let n = config.n_experts as u64;
    let activated: u64 = match gate_mode {
        GateMode::Dense => n,
        GateMode::TopK(k) => {
            if k == 0 || k as u64 > n.max(1) {
                return Err(Error::InvalidParameter(format!(
                    "gate mode top-{k} out of range for {n} experts"
                )));
            }
            k as u64
        }
    };

    let mut attention = ComponentCount::default();
    let mut experts = ComponentCount::default();
    let mut gate = ComponentCount::default();
    let mut embedding = ComponentCount::default();

    // Token table + position table are lookups (one row each per token);
    // the output projection runs a full [d × vocab] matmul per token.
    embedding.total_params = v * d + l * d + d * v;
    embedding.activated_params_per_token = d + d + d * v;
    embedding.forward_flops_per_token = 2 * d * v;

    let ffn_params = 2 * d * d_ff + d_ff + d;
    for layer in 0..config.layers {
        // Projections 4·d² plus both layer norms (2·d each).
        attention.total_params += 4 * d * d + 4 * d;
        attention.activated_params_per_token += 4 * d * d + 4 * d;
        attention.forward_flops_per_token += 8 * d * d + 4 * l * d;

        if config.moe_layers.contains(&layer) {
            experts.total_params += n * ffn_params;
            experts.activated_params_per_token += activated * ffn_params;
            experts.forward_flops_per_token += activated * 4 * d * d_ff;
            if config.gate_kind != GateKind::Hash {
                gate.total_params += d * n;
                gate.activated_params_per_token += d * n;
                gate.forward_flops_per_token += 2 * d * n;
            }
        } else {
            experts.total_params += ffn_params;
            experts.activated_params_per_token += ffn_params;
            experts.forward_flops_per_token += 4 * d * d_ff;
        }
    }

    let mut totals = ComponentCount::default();
    totals.add(attention);
    totals.add(experts);
    totals.add(gate);
    totals.add(embedding);
    Ok(FlopsReport {
        total_params: totals.total_params,
        activated_params_per_token: totals.activated_params_per_token,
        forward_flops_per_token: totals.forward_flops_per_token,
        attention,
        experts,
        gate,
        embedding,
    })
}
