//! Routing functions: Top-K gating, hash routing, and the dense-to-sparse
//! gate with Gumbel noise, temperature schedule, content-based threshold and
//! the auxiliary balance loss.

use rand::Rng;

use crate::numerics::{Graph, Tensor};
use crate::{Error, Result};

/// Routing outcome for a batch of tokens.
///
/// `weights` and `dense_probs` are `[S × N]` graph tensors so gradients flow
/// back into the gate; `ids` are the plain selected expert indices (ascending
/// per token). A weight is nonzero exactly where its expert id is selected,
/// and selected weights are the corresponding `dense_probs` entries — they
/// are never renormalized after thresholding.
pub struct GateDecision {
    pub ids: Vec<Vec<usize>>,
    pub weights: Tensor,
    pub dense_probs: Tensor,
}

impl GateDecision {
    /// Number of tokens routed.
    pub fn n_tokens(&self) -> usize {
        self.ids.len()
    }

    /// Mean number of selected experts per token.
    pub fn mean_selected(&self) -> f64 {
        if self.ids.is_empty() {
            return 0.0;
        }
        self.ids.iter().map(|v| v.len()).sum::<usize>() as f64 / self.ids.len() as f64
    }

    /// Tokens assigned to each of `n` experts.
    pub fn expert_counts(&self, n: usize) -> Vec<u64> {
        let mut counts = vec![0u64; n];
        for ids in &self.ids {
            for &i in ids {
                counts[i] += 1;
            }
        }
        counts
    }
}

/// Gate hyper-parameters plus the gate weight already placed on a graph.
pub struct GateParams {
    pub w_g: Tensor,
    pub threshold: f64,
    pub alpha: f64,
    pub noise_enabled: bool,
}

impl GateParams {
    pub fn new(w_g: Tensor, threshold: f64, alpha: f64, noise_enabled: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&threshold) {
            return Err(Error::InvalidParameter(format!(
                "gate threshold must be in [0, 1), got {threshold}"
            )));
        }
        if alpha < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "balance coefficient must be nonnegative, got {alpha}"
            )));
        }
        Ok(GateParams { w_g, threshold, alpha, noise_enabled })
    }
}

/// Interpolation shape of the temperature decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    Linear,
    Exponential,
}

/// Maps an iteration (counted from the start of the gate-sparsify phase) to a
/// softmax temperature and a gate mode.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TemperatureSchedule {
    pub max_temp: f64,
    pub min_temp: f64,
    /// Iterations over which the temperature decays from max to min.
    pub decay_iters: u64,
    /// Iterations of dense-threshold gating before switching to Top-1.
    pub dense_iters: u64,
    pub shape: ScheduleShape,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            max_temp: 2.0,
            min_temp: 0.3,
            decay_iters: 1000,
            dense_iters: 1000,
            shape: ScheduleShape::Linear,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_temp > 0.0) || self.max_temp < self.min_temp {
            return Err(Error::InvalidParameter(format!(
                "temperature schedule requires max_temp >= min_temp > 0, got max {} min {}",
                self.max_temp, self.min_temp
            )));
        }
        Ok(())
    }
}

/// Temperature at `iter` iterations into the gate-sparsify phase: an
/// interpolation from `max_temp` to `min_temp` over `decay_iters`, constant
/// `min_temp` afterwards. A zero-length decay window is always `min_temp`.
pub fn temperature_at(schedule: &TemperatureSchedule, iter: u64) -> f64 {
    if schedule.decay_iters == 0 || iter >= schedule.decay_iters {
        return schedule.min_temp;
    }
    let frac = iter as f64 / schedule.decay_iters as f64;
    match schedule.shape {
        ScheduleShape::Linear => schedule.max_temp - (schedule.max_temp - schedule.min_temp) * frac,
        ScheduleShape::Exponential => {
            schedule.max_temp * (schedule.min_temp / schedule.max_temp).powf(frac)
        }
    }
}

/// Top-K gating: keep the k largest gate logits per token, softmax over
/// exactly those k, zero weight elsewhere. Gradient flows only through the
/// selected entries. Ties are broken toward the lower expert index.
pub fn topk_gate(g: &mut Graph, x: Tensor, w_g: Tensor, k: usize) -> Result<GateDecision> {
    let logits = g.matmul(x, w_g)?;
    let (s, n) = (g.shape(logits)[0], g.shape(logits)[1]);
    if k < 1 || k > n {
        return Err(Error::InvalidParameter(format!(
            "top-k must satisfy 1 <= k <= {n}, got {k}"
        )));
    }
    let mut ids = Vec::with_capacity(s);
    let mut neg_mask = vec![crate::numerics::NEG_MASK; s * n];
    {
        let lv = g.data(logits);
        for r in 0..s {
            let row = &lv[r * n..(r + 1) * n];
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            let mut sel: Vec<usize> = order[..k].to_vec();
            sel.sort_unstable();
            for &i in &sel {
                neg_mask[r * n + i] = 0.0;
            }
            ids.push(sel);
        }
    }
    let neg_mask = g.leaf(neg_mask, vec![s, n])?;
    let masked = g.add(logits, neg_mask)?;
    let weights = g.softmax_temp(masked, 1.0)?;
    let dense_probs = g.softmax_temp(logits, 1.0)?;
    Ok(GateDecision { ids, weights, dense_probs })
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Expert chosen by hash routing for one token id.
pub fn hash_route(token_id: u64, n: usize) -> usize {
    (splitmix64(token_id) % n as u64) as usize
}

/// Hash routing for a batch: each token goes to `hash(token_id) mod N` with
/// weight 1.0. No learned parameters and no gradient path.
pub fn hash_gate(g: &mut Graph, token_ids: &[u64], n: usize) -> Result<GateDecision> {
    if n == 0 {
        return Err(Error::InvalidParameter("hash_gate requires at least one expert".into()));
    }
    let s = token_ids.len();
    let mut weights = vec![0.0; s * n];
    let mut ids = Vec::with_capacity(s);
    for (r, &t) in token_ids.iter().enumerate() {
        let e = hash_route(t, n);
        weights[r * n + e] = 1.0;
        ids.push(vec![e]);
    }
    let weights = g.leaf(weights, vec![s, n])?;
    // The one-hot assignment doubles as the dense distribution.
    let dense_probs = weights;
    Ok(GateDecision { ids, weights, dense_probs })
}

/// Gumbel(0,1) noise `-ln(-ln(u))` with `u` in the open unit interval, as a
/// constant leaf. Disabled noise yields zeros.
pub fn gumbel_sample<R: Rng>(
    g: &mut Graph,
    shape: &[usize],
    rng: &mut R,
    enabled: bool,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = if enabled {
        (0..n)
            .map(|_| {
                let u = rng.random::<f64>().max(f64::MIN_POSITIVE);
                -(-u.ln()).ln()
            })
            .collect()
    } else {
        vec![0.0; n]
    };
    g.leaf(data, shape.to_vec())
}

/// Selected ids per token under the content-based threshold: strict `> c`,
/// with the argmax expert always retained so at least one expert survives.
/// Ties on the argmax break toward the lower index.
pub fn threshold_select(g: &Graph, probs: Tensor, c: f64) -> Result<Vec<Vec<usize>>> {
    let shape = g.shape(probs);
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch { op: "threshold_select", lhs: shape.to_vec(), rhs: vec![] });
    }
    let (s, n) = (shape[0], shape[1]);
    let pv = g.data(probs);
    let mut out = Vec::with_capacity(s);
    for r in 0..s {
        let row = &pv[r * n..(r + 1) * n];
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!(
                "threshold_select expects probability rows, row {r} sums to {sum}"
            )));
        }
        out.push(select_row(row, c));
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn select_row(row: &[f64], c: f64) -> Vec<usize> {
    let top = argmax(row);
    let mut sel: Vec<usize> = (0..row.len()).filter(|&i| row[i] > c).collect();
    if !sel.contains(&top) {
        sel.push(top);
        sel.sort_unstable();
    }
    sel
}

/// The dense-to-sparse gate. Computes `g' = softmax((x·W_g + ζ)/τ)` over the
/// expert axis; before `t_dense` iterations the selected set is every expert
/// whose probability exceeds the threshold (argmax always included), after
/// that only the argmax. Selected weights are copied from `g'` without
/// renormalization.
pub fn dts_gate<R: Rng>(
    g: &mut Graph,
    x: Tensor,
    params: &GateParams,
    tau: f64,
    iter: u64,
    t_dense: u64,
    rng: &mut R,
) -> Result<GateDecision> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gate temperature must be positive, got {tau}"
        )));
    }
    let logits = g.matmul(x, params.w_g)?;
    let (s, n) = (g.shape(logits)[0], g.shape(logits)[1]);
    let noise = gumbel_sample(g, &[s, n], rng, params.noise_enabled)?;
    let noised = g.add(logits, noise)?;
    let dense_probs = g.softmax_temp(noised, tau)?;

    let ids: Vec<Vec<usize>> = {
        let pv = g.data(dense_probs);
        (0..s)
            .map(|r| {
                let row = &pv[r * n..(r + 1) * n];
                if iter < t_dense {
                    select_row(row, params.threshold)
                } else {
                    vec![argmax(row)]
                }
            })
            .collect()
    };

    let mut mask = vec![0.0; s * n];
    for (r, sel) in ids.iter().enumerate() {
        for &i in sel {
            mask[r * n + i] = 1.0;
        }
    }
    let mask = g.leaf(mask, vec![s, n])?;
    let weights = g.mul(dense_probs, mask)?;
    Ok(GateDecision { ids, weights, dense_probs })
}

/// Auxiliary balance loss
/// `α·N·Σ_i (count_i / |B|²) · Σ_s dense_probs[s][i]`,
/// where `count_i` is the number of tokens whose selected set contains expert
/// `i`. The counts are frozen indicators; gradient flows only through the
/// dense probabilities.
pub fn balance_loss(g: &mut Graph, decision: &GateDecision, alpha: f64) -> Result<Tensor> {
    let batch = decision.ids.len();
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let shape = g.shape(decision.dense_probs).to_vec();
    let (s, n) = (shape[0], shape[1]);
    debug_assert_eq!(s, batch);
    let counts = decision.expert_counts(n);
    let norm = alpha * n as f64 / (batch as f64 * batch as f64);
    let mut coeff = vec![0.0; s * n];
    for r in 0..s {
        for i in 0..n {
            coeff[r * n + i] = norm * counts[i] as f64;
        }
    }
    let coeff = g.leaf(coeff, vec![s, n])?;
    let weighted = g.mul(decision.dense_probs, coeff)?;
    g.sum(weighted)
}
