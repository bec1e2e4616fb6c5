//! Metrics records, routing traces and expert-specialization statistics.

use serde::{Deserialize, Serialize};

use super::model::Phase;
use crate::Result;

/// One metrics line, serialized as a JSON object per line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub phase: Phase,
    pub task_loss: f64,
    pub balance_loss: f64,
    pub temperature: f64,
    pub mean_selected_experts: f64,
    pub tokens_per_sec: f64,
    pub cumulative_flops: u64,
}

/// One row of the routing-trace CSV.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub iter: u64,
    pub layer: usize,
    pub expert: usize,
    pub token_count: u64,
}

/// Expert choices observed for one tracked token at one logged step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrackedTokenRecord {
    pub iter: u64,
    pub layer: usize,
    pub token: u32,
    /// Selection count per expert among this step's occurrences.
    pub expert_counts: Vec<u64>,
}

/// Running routing statistics: per-step load histograms, tracked-token
/// choices, and per-expert preceding-token counts for the top-5 lists.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RoutingStats {
    pub records: Vec<RoutingRecord>,
    pub tracked: Vec<TrackedTokenRecord>,
    /// `preceding[moe_layer][expert][token]` counts, indexed by the position
    /// of the layer in `moe_layers`.
    pub preceding: Vec<Vec<Vec<u64>>>,
}

impl RoutingStats {
    pub fn new(n_moe_layers: usize, n_experts: usize, vocab: usize) -> Self {
        RoutingStats {
            records: Vec::new(),
            tracked: Vec::new(),
            preceding: vec![vec![vec![0; vocab]; n_experts]; n_moe_layers],
        }
    }

    /// Top-5 preceding tokens for every (layer, expert), most frequent first;
    /// ties break toward the lower token id.
    pub fn top_preceding(&self, moe_layers: &[usize], top: usize) -> Vec<TopPreceding> {
        let mut out = Vec::new();
        for (li, per_expert) in self.preceding.iter().enumerate() {
            for (e, counts) in per_expert.iter().enumerate() {
                let mut order: Vec<(u32, u64)> = counts
                    .iter()
                    .enumerate()
                    .filter(|&(_, &c)| c > 0)
                    .map(|(t, &c)| (t as u32, c))
                    .collect();
                order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                order.truncate(top);
                out.push(TopPreceding {
                    layer: moe_layers.get(li).copied().unwrap_or(li),
                    expert: e,
                    tokens: order,
                });
            }
        }
        out
    }
}

/// Top preceding-token list for one expert, in Table-VIII style.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TopPreceding {
    pub layer: usize,
    pub expert: usize,
    /// `(token, count)` pairs, most frequent first.
    pub tokens: Vec<(u32, u64)>,
}

/// Append this step's routing observations: per-layer load histograms, the
/// tracked tokens' expert choices, and preceding-token counts.
pub fn log_routing(
    stats: &mut RoutingStats,
    iter: u64,
    moe_ids: &[(usize, Vec<Vec<usize>>)],
    inputs: &[Vec<usize>],
    n_experts: usize,
    tracked_tokens: &[u32],
) -> Result<()> {
    let seq_len = inputs.first().map(|s| s.len()).unwrap_or(0);
    for (layer_pos, (layer, ids)) in moe_ids.iter().enumerate() {
        let mut counts = vec![0u64; n_experts];
        for sel in ids {
            for &i in sel {
                counts[i] += 1;
            }
        }
        for (expert, &token_count) in counts.iter().enumerate() {
            stats.records.push(RoutingRecord { iter, layer: *layer, expert, token_count });
        }

        let mut tracked_counts: Vec<Vec<u64>> =
            vec![vec![0u64; n_experts]; tracked_tokens.len()];
        for (flat, sel) in ids.iter().enumerate() {
            let (seq, pos) = (flat / seq_len, flat % seq_len);
            let token = inputs[seq][pos] as u32;
            if pos > 0 {
                let prev = inputs[seq][pos - 1];
                for &e in sel {
                    stats.preceding[layer_pos][e][prev] += 1;
                }
            }
            if let Some(ti) = tracked_tokens.iter().position(|&t| t == token) {
                for &e in sel {
                    tracked_counts[ti][e] += 1;
                }
            }
        }
        for (ti, counts) in tracked_counts.into_iter().enumerate() {
            if counts.iter().any(|&c| c > 0) {
                stats.tracked.push(TrackedTokenRecord {
                    iter,
                    layer: *layer,
                    token: tracked_tokens[ti],
                    expert_counts: counts,
                });
            }
        }
    }
    Ok(())
}

/// Population coefficient of variation (std / mean); 0 for an all-zero or
/// empty load vector.
pub fn coefficient_of_variation(loads: &[u64]) -> f64 {
    if loads.is_empty() {
        return 0.0;
    }
    let n = loads.len() as f64;
    let mean = loads.iter().sum::<u64>() as f64 / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = loads.iter().map(|&c| (c as f64 - mean) * (c as f64 - mean)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Serialize routing records as the `iter,layer,expert,token_count` CSV.
pub fn routing_csv(records: &[RoutingRecord]) -> String {
    let mut out = String::from("iter,layer,expert,token_count\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.iter, r.layer, r.expert, r.token_count));
    }
    out
}

/// Parse a routing-trace CSV, reporting the 1-based line of any malformed
/// row.
pub fn parse_routing_csv(text: &str) -> Result<Vec<RoutingRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != "iter,layer,expert,token_count" {
                return Err(crate::Error::MalformedTrace {
                    line: 1,
                    message: format!("unexpected header {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(crate::Error::MalformedTrace {
                line: i + 1,
                message: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<u64> {
            s.trim().parse::<u64>().map_err(|e| crate::Error::MalformedTrace {
                line: i + 1,
                message: format!("bad {what}: {e}"),
            })
        };
        out.push(RoutingRecord {
            iter: parse(fields[0], "iter")?,
            layer: parse(fields[1], "layer")? as usize,
            expert: parse(fields[2], "expert")? as usize,
            token_count: parse(fields[3], "token_count")?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_concentration_and_conservation() {
        let mut stats = RoutingStats::new(1, 4, 16);
        let ids: Vec<Vec<usize>> = (0..6).map(|_| vec![0]).collect();
        let inputs = vec![vec![1usize, 2, 3, 4, 5, 6]];
        log_routing(&mut stats, 10, &[(0, ids)], &inputs, 4, &[]).unwrap();
        let counts: Vec<u64> = stats.records.iter().map(|r| r.token_count).collect();
        assert_eq!(counts, vec![6, 0, 0, 0]);
    }

    #[test]
    fn histogram_sum_matches_total_selected() {
        let mut stats = RoutingStats::new(1, 3, 8);
        let ids = vec![vec![0, 1], vec![2], vec![0, 1, 2], vec![1]];
        let total: u64 = ids.iter().map(|v| v.len() as u64).sum();
        let inputs = vec![vec![0usize, 1, 2, 3]];
        log_routing(&mut stats, 0, &[(0, ids)], &inputs, 3, &[]).unwrap();
        let sum: u64 = stats.records.iter().map(|r| r.token_count).sum();
        assert_eq!(sum, total);
    }

    #[test]
    fn cv_matches_direct_recomputation() {
        let loads = [13u64, 7, 22, 9];
        let cv = coefficient_of_variation(&loads);
        let mean = 51.0 / 4.0;
        let var = loads.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((cv - var.sqrt() / mean).abs() < 1e-12);
    }

    #[test]
    fn preceding_counts_track_previous_token() {
        let mut stats = RoutingStats::new(1, 2, 8);
        // Tokens [3, 5]: position 1 (token 5) routed to expert 1.
        let ids = vec![vec![0], vec![1]];
        let inputs = vec![vec![3usize, 5]];
        log_routing(&mut stats, 0, &[(0, ids)], &inputs, 2, &[]).unwrap();
        assert_eq!(stats.preceding[0][1][3], 1);
        let top = stats.top_preceding(&[0], 5);
        let e1 = top.iter().find(|t| t.expert == 1).unwrap();
        assert_eq!(e1.tokens, vec![(3, 1)]);
    }

    #[test]
    fn tracked_tokens_recorded() {
        let mut stats = RoutingStats::new(1, 2, 8);
        let ids = vec![vec![0], vec![1], vec![1]];
        let inputs = vec![vec![7usize, 7, 2]];
        log_routing(&mut stats, 5, &[(0, ids)], &inputs, 2, &[7]).unwrap();
        assert_eq!(stats.tracked.len(), 1);
        assert_eq!(stats.tracked[0].expert_counts, vec![1, 1]);
    }

    #[test]
    fn csv_roundtrip_and_error_line() {
        let records = vec![
            RoutingRecord { iter: 50, layer: 0, expert: 0, token_count: 12 },
            RoutingRecord { iter: 50, layer: 0, expert: 1, token_count: 4 },
        ];
        let text = routing_csv(&records);
        assert_eq!(parse_routing_csv(&text).unwrap(), records);

        let bad = "iter,layer,expert,token_count\n50,0,0,12\noops\n";
        match parse_routing_csv(bad) {
            Err(crate::Error::MalformedTrace { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed trace, got {other:?}"),
        }
    }
}
