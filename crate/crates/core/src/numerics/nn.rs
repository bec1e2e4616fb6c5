//! Transformer building blocks composed from graph primitives.

use rand::Rng;

use super::graph::{Graph, Tensor, NEG_MASK};
use crate::{Error, Result};

/// Elementwise nonlinearity used inside feed-forward blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

/// Elementwise activation by kind.
pub fn activation(g: &mut Graph, x: Tensor, kind: Activation) -> Result<Tensor> {
    kind.apply(g, x)
}

/// Scaled dot-product attention `softmax(QKᵀ/√d_k)V`. With `causal`, logits
/// at key positions right of the query are filled with a large negative
/// constant before the softmax.
pub fn attention(g: &mut Graph, q: Tensor, k: Tensor, v: Tensor, causal: bool) -> Result<Tensor> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    let vs = g.shape(v).to_vec();
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::ShapeMismatch { op: "attention(QK)", lhs: qs, rhs: ks });
    }
    if vs.len() != 2 || ks[0] != vs[0] {
        return Err(Error::ShapeMismatch { op: "attention(KV)", lhs: ks, rhs: vs });
    }
    let d_k = qs[1];
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    if causal {
        let (s, s2) = (qs[0], ks[0]);
        if s != s2 {
            return Err(Error::ShapeMismatch { op: "attention(causal)", lhs: qs, rhs: ks });
        }
        let mut mask = vec![0.0; s * s];
        for i in 0..s {
            for j in (i + 1)..s {
                mask[i * s + j] = NEG_MASK;
            }
        }
        let mask = g.leaf(mask, vec![s, s])?;
        scaled = g.add(scaled, mask)?;
    }
    let attn = g.softmax_temp(scaled, 1.0)?;
    g.matmul(attn, v)
}

/// Per-head projection matrices plus the output projection.
pub struct MultiHeadParams {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Tensor,
}

/// Multi-head attention: per-head projections, scaled dot-product attention
/// per head, concatenation, output projection.
pub fn multi_head(
    g: &mut Graph,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    params: &MultiHeadParams,
    causal: bool,
) -> Result<Tensor> {
    let h = params.wq.len();
    if h == 0 || params.wk.len() != h || params.wv.len() != h {
        return Err(Error::InvalidConfig(format!(
            "multi_head: inconsistent head counts ({h} / {} / {})",
            params.wk.len(),
            params.wv.len()
        )));
    }
    let d_model = g.shape(q)[1];
    if d_model % h != 0 {
        return Err(Error::InvalidConfig(format!(
            "d_model {d_model} is not divisible by {h} heads"
        )));
    }
    let d_k = d_model / h;
    let mut heads = Vec::with_capacity(h);
    for i in 0..h {
        if g.shape(params.wq[i]) != [d_model, d_k] {
            return Err(Error::ShapeMismatch {
                op: "multi_head(wq)",
                lhs: g.shape(params.wq[i]).to_vec(),
                rhs: vec![d_model, d_k],
            });
        }
        let qi = g.matmul(q, params.wq[i])?;
        let ki = g.matmul(k, params.wk[i])?;
        let vi = g.matmul(v, params.wv[i])?;
        heads.push(attention(g, qi, ki, vi, causal)?);
    }
    let cat = g.concat_cols(&heads)?;
    g.matmul(cat, params.wo)
}

/// Position-wise feed-forward network `W2·ReLU(W1·x + b1) + b2`.
pub fn ffn(g: &mut Graph, x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Tensor> {
    ffn_with(g, x, w1, b1, w2, b2, Activation::Relu)
}

/// Feed-forward network with a chosen activation.
pub fn ffn_with(
    g: &mut Graph,
    x: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    act: Activation,
) -> Result<Tensor> {
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = act.apply(g, h)?;
    let out = g.matmul(h, w2)?;
    g.add_bias(out, b2)
}

/// Inverted-scaling Bernoulli dropout. Identity when not training or when
/// the rate is zero.
pub fn dropout<R: Rng>(
    g: &mut Graph,
    x: Tensor,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let n = g.data(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
        .collect();
    let shape = g.shape(x).to_vec();
    let mask = g.leaf(mask, shape)?;
    g.mul(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
            assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn identical_keys_average_values() {
        let mut g = Graph::new();
        let q = g.leaf(vec![0.3, -0.8, 0.1, 0.5, 0.2, -0.1], vec![2, 3]).unwrap();
        let k = g.leaf(vec![0.4, 0.7, -0.2].repeat(3), vec![3, 3]).unwrap();
        let v = g.leaf(vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0], vec![3, 2]).unwrap();
        let out = attention(&mut g, q, k, v, false).unwrap();
        // Uniform attention over identical keys: each output row is the
        // column mean of V.
        let expect = [(1.0 + 4.0 + 16.0) / 3.0, (2.0 + 8.0 + 32.0) / 3.0];
        assert_close(&g.data(out)[0..2], &expect, 1e-12);
        assert_close(&g.data(out)[2..4], &expect, 1e-12);
    }

    #[test]
    fn causal_first_position_sees_only_first_value() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = g.leaf(rand_vec(&mut rng, 12), vec![3, 4]).unwrap();
        let k = g.leaf(rand_vec(&mut rng, 12), vec![3, 4]).unwrap();
        let v = g.leaf(rand_vec(&mut rng, 6), vec![3, 2]).unwrap();
        let out = attention(&mut g, q, k, v, true).unwrap();
        assert_close(&g.data(out)[0..2], &g.data(v)[0..2], 1e-12);
    }

    #[test]
    fn attention_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let qd = rand_vec(&mut rng, 12);
        let kd = rand_vec(&mut rng, 12);
        let vd = rand_vec(&mut rng, 12);
        let (s, dk, dv) = (3, 4, 4);
        let mut expect = vec![0.0; s * dv];
        for i in 0..s {
            let mut logits = vec![0.0; s];
            for j in 0..s {
                let mut dot = 0.0;
                for c in 0..dk {
                    dot += qd[i * dk + c] * kd[j * dk + c];
                }
                logits[j] = dot / (dk as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for j in 0..s {
                for c in 0..dv {
                    expect[i * dv + c] += exps[j] / denom * vd[j * dv + c];
                }
            }
        }
        let mut g = Graph::new();
        let q = g.leaf(qd, vec![s, dk]).unwrap();
        let k = g.leaf(kd, vec![s, dk]).unwrap();
        let v = g.leaf(vd, vec![s, dv]).unwrap();
        let out = attention(&mut g, q, k, v, false).unwrap();
        assert_close(g.data(out), &expect, 1e-10);
    }

    #[test]
    fn single_head_with_identity_projections_reduces_to_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let d = 4;
        let q = g.leaf(rand_vec(&mut rng, 8), vec![2, d]).unwrap();
        let k = g.leaf(rand_vec(&mut rng, 8), vec![2, d]).unwrap();
        let v = g.leaf(rand_vec(&mut rng, 8), vec![2, d]).unwrap();
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let ident = g.leaf(eye.clone(), vec![d, d]).unwrap();
        let params = MultiHeadParams {
            wq: vec![ident],
            wk: vec![ident],
            wv: vec![ident],
            wo: ident,
        };
        let mh = multi_head(&mut g, q, k, v, &params, false).unwrap();
        let plain = attention(&mut g, q, k, v, false).unwrap();
        assert_close(g.data(mh), g.data(plain), 1e-12);
    }

    #[test]
    fn multi_head_output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for h in [1usize, 2, 4] {
            let d = 8;
            let dk = d / h;
            let mut g = Graph::new();
            let x = g.leaf(rand_vec(&mut rng, 3 * d), vec![3, d]).unwrap();
            let mk = |g: &mut Graph, rng: &mut ChaCha8Rng| {
                let data = rand_vec(rng, d * dk);
                g.leaf(data, vec![d, dk]).unwrap()
            };
            let params = MultiHeadParams {
                wq: (0..h).map(|_| mk(&mut g, &mut rng)).collect(),
                wk: (0..h).map(|_| mk(&mut g, &mut rng)).collect(),
                wv: (0..h).map(|_| mk(&mut g, &mut rng)).collect(),
                wo: {
                    let data = rand_vec(&mut rng, d * d);
                    g.leaf(data, vec![d, d]).unwrap()
                },
            };
            let out = multi_head(&mut g, x, x, x, &params, true).unwrap();
            assert_eq!(g.shape(out), &[3, d]);
        }
    }

    #[test]
    fn two_heads_match_per_head_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (s, d, h) = (3, 4, 2);
        let dk = d / h;
        let mut g = Graph::new();
        let x = g.leaf(rand_vec(&mut rng, s * d), vec![s, d]).unwrap();
        let mats: Vec<Vec<f64>> = (0..3 * h).map(|_| rand_vec(&mut rng, d * dk)).collect();
        let wo_data = rand_vec(&mut rng, d * d);
        let params = MultiHeadParams {
            wq: mats[0..h].iter().map(|m| g.leaf(m.clone(), vec![d, dk]).unwrap()).collect(),
            wk: mats[h..2 * h].iter().map(|m| g.leaf(m.clone(), vec![d, dk]).unwrap()).collect(),
            wv: mats[2 * h..3 * h].iter().map(|m| g.leaf(m.clone(), vec![d, dk]).unwrap()).collect(),
            wo: g.leaf(wo_data.clone(), vec![d, d]).unwrap(),
        };
        let out = multi_head(&mut g, x, x, x, &params, false).unwrap();

        // Oracle: run each head through the single-head path, concatenate by
        // hand, project by hand.
        let mut cat = vec![0.0; s * d];
        for head in 0..h {
            let mut g2 = Graph::new();
            let x2 = g2.leaf(g.data(x).to_vec(), vec![s, d]).unwrap();
            let wq = g2.leaf(mats[head].clone(), vec![d, dk]).unwrap();
            let wk = g2.leaf(mats[h + head].clone(), vec![d, dk]).unwrap();
            let wv = g2.leaf(mats[2 * h + head].clone(), vec![d, dk]).unwrap();
            let qi = g2.matmul(x2, wq).unwrap();
            let ki = g2.matmul(x2, wk).unwrap();
            let vi = g2.matmul(x2, wv).unwrap();
            let hi = attention(&mut g2, qi, ki, vi, false).unwrap();
            for r in 0..s {
                for c in 0..dk {
                    cat[r * d + head * dk + c] = g2.data(hi)[r * dk + c];
                }
            }
        }
        let mut expect = vec![0.0; s * d];
        for r in 0..s {
            for c in 0..d {
                let mut acc = 0.0;
                for p in 0..d {
                    acc += cat[r * d + p] * wo_data[p * d + c];
                }
                expect[r * d + c] = acc;
            }
        }
        assert_close(g.data(out), &expect, 1e-10);
    }

    #[test]
    fn ffn_dead_hidden_returns_second_bias() {
        let mut g = Graph::new();
        let x = g.leaf(vec![0.4, -0.7, 1.2, 0.3], vec![2, 2]).unwrap();
        let w1 = g.leaf(vec![0.0; 2 * 3], vec![2, 3]).unwrap();
        let b1 = g.leaf(vec![-1.0; 3], vec![3]).unwrap();
        let w2 = g.leaf(vec![0.5; 3 * 2], vec![3, 2]).unwrap();
        let b2 = g.leaf(vec![0.25, -0.75], vec![2]).unwrap();
        let y = ffn(&mut g, x, w1, b1, w2, b2).unwrap();
        assert_close(g.data(y), &[0.25, -0.75, 0.25, -0.75], 0.0);
    }

    #[test]
    fn ffn_all_zero_parameters_gives_zero() {
        let mut g = Graph::new();
        let x = g.leaf(vec![0.4, -0.7], vec![1, 2]).unwrap();
        let w1 = g.leaf(vec![0.0; 6], vec![2, 3]).unwrap();
        let b1 = g.leaf(vec![0.0; 3], vec![3]).unwrap();
        let w2 = g.leaf(vec![0.0; 6], vec![3, 2]).unwrap();
        let b2 = g.leaf(vec![0.0; 2], vec![2]).unwrap();
        let y = ffn(&mut g, x, w1, b1, w2, b2).unwrap();
        assert_close(g.data(y), &[0.0, 0.0], 0.0);
    }

    #[test]
    fn ffn_matches_composed_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut g = Graph::new();
        let x = g.leaf(rand_vec(&mut rng, 2 * 3), vec![2, 3]).unwrap();
        let w1 = g.leaf(rand_vec(&mut rng, 3 * 5), vec![3, 5]).unwrap();
        let b1 = g.leaf(rand_vec(&mut rng, 5), vec![5]).unwrap();
        let w2 = g.leaf(rand_vec(&mut rng, 5 * 3), vec![5, 3]).unwrap();
        let b2 = g.leaf(rand_vec(&mut rng, 3), vec![3]).unwrap();
        let y = ffn(&mut g, x, w1, b1, w2, b2).unwrap();
        let h = g.matmul(x, w1).unwrap();
        let h = g.add_bias(h, b1).unwrap();
        let h = g.relu(h).unwrap();
        let o = g.matmul(h, w2).unwrap();
        let o = g.add_bias(o, b2).unwrap();
        assert_close(g.data(y), g.data(o), 1e-12);
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let y = dropout(&mut g, x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_scales_kept_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0; 1000], vec![10, 100]).unwrap();
        let y = dropout(&mut g, x, 0.1, true, &mut rng).unwrap();
        let kept: Vec<f64> = g.data(y).iter().cloned().filter(|&v| v != 0.0).collect();
        for v in &kept {
            assert!((v - 1.0 / 0.9).abs() < 1e-12);
        }
        let frac = kept.len() as f64 / 1000.0;
        assert!((frac - 0.9).abs() < 0.05, "kept fraction {frac}");
    }
}
