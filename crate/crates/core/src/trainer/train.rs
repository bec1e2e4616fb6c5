//! The two-phase training loop: shared-expert phase, diversify, then the
//! gate-sparsify phase with the temperature-annealed dense-to-sparse gate.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, lr_at, AdamState};
use super::checkpoint;
use super::config::{Config, GateKind};
use super::corpus::{make_corpus, sample_batch, Corpus, Split};
use super::metrics::{log_routing, MetricsRecord, RoutingStats};
use super::model::{phase_of, Model, Phase};
use crate::{Error, Result};

/// The independent rng streams of a run. All derive from the config seed on
/// distinct ChaCha streams; evaluation uses none of them.
pub struct RngBundle {
    pub init: ChaCha8Rng,
    pub data: ChaCha8Rng,
    pub gate: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl RngBundle {
    pub fn from_seed(seed: u64) -> Self {
        let mk = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng
        };
        RngBundle { init: mk(1), data: mk(2), gate: mk(3), dropout: mk(4) }
    }
}

/// Everything that defines where a run is: parameters, optimizer moments,
/// rng positions and accumulated routing statistics.
pub struct TrainState {
    pub iter: u64,
    pub model: Model,
    pub adam: AdamState,
    pub rngs: RngBundle,
    pub stats: RoutingStats,
    pub cumulative_flops: u64,
}

impl TrainState {
    pub fn init(config: &Config) -> Result<TrainState> {
        let mut rngs = RngBundle::from_seed(config.model.seed);
        let model = Model::init(&config.model, &mut rngs.init)?;
        let stats = RoutingStats::new(
            config.model.moe_layers.len(),
            config.model.n_experts,
            config.model.vocab,
        );
        Ok(TrainState { iter: 0, model, adam: AdamState::new(), rngs, stats, cumulative_flops: 0 })
    }

    pub fn phase(&self) -> Phase {
        phase_of(&self.model.cfg, self.iter)
    }
}

#[derive(Default)]
pub struct TrainOptions {
    /// When set, metrics/trace/checkpoint files are written here.
    pub out_dir: Option<PathBuf>,
    /// Continue from a loaded state instead of initializing.
    pub resume: Option<TrainState>,
    /// Called with every emitted metrics record.
    pub progress: Option<Box<dyn FnMut(&MetricsRecord)>>,
}

pub struct TrainRun {
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
    /// `(iter, valid perplexity)` pairs when periodic eval is enabled.
    pub evals: Vec<(u64, f64)>,
    pub corpus: Corpus,
    /// Checkpoint files written, in order.
    pub checkpoints: Vec<PathBuf>,
}

struct OutFiles {
    dir: PathBuf,
    metrics: BufWriter<File>,
    routing: BufWriter<File>,
}

impl OutFiles {
    fn open(dir: &Path, append: bool) -> Result<OutFiles> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str, header: Option<&str>| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let fresh = !append || !path.exists();
            let file = OpenOptions::new().create(true).append(true).truncate(false).open(&path)?;
            let mut w = BufWriter::new(file);
            if fresh {
                // Recreate from scratch on a fresh run.
                drop(w);
                let file = File::create(&path)?;
                w = BufWriter::new(file);
                if let Some(h) = header {
                    w.write_all(h.as_bytes())?;
                }
            }
            Ok(w)
        };
        Ok(OutFiles {
            dir: dir.to_path_buf(),
            metrics: open("metrics.jsonl", None)?,
            routing: open("routing.csv", Some("iter,layer,expert,token_count\n"))?,
        })
    }
}

/// Train from scratch with in-memory outputs only.
pub fn train(config: &Config) -> Result<TrainRun> {
    train_with(config, TrainOptions::default())
}

/// Run the training loop (Algorithm 1 shape): shared-expert phase, expert
/// diversification at `t_shared`, then the temperature-scheduled
/// dense-to-sparse phase until `t_total`. Resuming a finished run is a no-op.
pub fn train_with(config: &Config, opts: TrainOptions) -> Result<TrainRun> {
    let cfg = &config.model;
    let tp = &config.train;
    let corpus = make_corpus(
        config.corpus.kind,
        config.corpus.size,
        cfg.vocab,
        cfg.seed,
        config.corpus.sublanguages,
    )?;

    let resumed = opts.resume.is_some();
    let mut progress = opts.progress;
    let mut state = match opts.resume {
        Some(s) => s,
        None => TrainState::init(config)?,
    };
    let mut files = match &opts.out_dir {
        Some(dir) => Some(OutFiles::open(dir, resumed)?),
        None => None,
    };
    let mut run_metrics: Vec<MetricsRecord> = Vec::new();
    let mut evals: Vec<(u64, f64)> = Vec::new();
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    let mut recent_losses: Vec<(u64, f64)> = Vec::new();

    let mut window_start = Instant::now();
    let mut window_tokens = 0u64;

    while state.iter < cfg.t_total {
        let it = state.iter;
        if !state.model.diversified && !cfg.moe_layers.is_empty() && it >= cfg.t_shared {
            state.model.diversify(&mut state.rngs.init, &mut state.adam)?;
        }

        let (inputs, targets) =
            sample_batch(&corpus, Split::Train, tp.batch_size, cfg.seq_len, &mut state.rngs.data)?;

        let mut g = crate::numerics::Graph::new();
        let forward = state.model.forward(
            &mut g,
            &inputs,
            &targets,
            it,
            true,
            &mut state.rngs.gate,
            &mut state.rngs.dropout,
        );
        let pass = match forward {
            Ok(p) => p,
            Err(e @ Error::NonFinite { .. }) => {
                return Err(abort_with_diagnostics(&state, config, files.as_ref(), it, e, &recent_losses));
            }
            Err(e) => return Err(e),
        };
        if !pass.task_loss.is_finite() {
            let e = Error::NonFinite { op: "task loss" };
            return Err(abort_with_diagnostics(&state, config, files.as_ref(), it, e, &recent_losses));
        }
        g.backward(pass.loss)?;

        let mut grads: HashMap<String, Vec<f64>> = HashMap::with_capacity(pass.leaves.len());
        for (name, tensor) in &pass.leaves {
            if state.model.params.contains(name) {
                grads.insert(name.clone(), g.grad(*tensor).unwrap_or(&[]).to_vec());
            }
        }
        let lr = lr_at(it, tp.lr, tp.warmup_iters, cfg.t_total);
        adam_step(&mut state.model.params, &grads, &mut state.adam, lr, tp.weight_decay)?;

        state.cumulative_flops += step_flops(cfg, pass.tokens, pass.expert_calls, &pass);
        window_tokens += pass.tokens;
        recent_losses.push((it, pass.task_loss));
        if recent_losses.len() > 16 {
            recent_losses.remove(0);
        }

        let done = it + 1;
        if tp.trace_every > 0
            && (done % tp.trace_every == 0 || done == cfg.t_total)
            && !pass.moe_ids.is_empty()
        {
            log_routing(&mut state.stats, it, &pass.moe_ids, &inputs, cfg.n_experts, &tp.tracked_tokens)?;
            if let Some(f) = files.as_mut() {
                let new = state.stats.records.len();
                let per_step = pass.moe_ids.len() * cfg.n_experts;
                for rec in &state.stats.records[new - per_step..] {
                    writeln!(f.routing, "{},{},{},{}", rec.iter, rec.layer, rec.expert, rec.token_count)?;
                }
            }
        }

        if done % tp.metrics_every.max(1) == 0 || done == cfg.t_total {
            let elapsed = window_start.elapsed().as_secs_f64().max(1e-9);
            let record = MetricsRecord {
                iter: it,
                phase: pass.phase,
                task_loss: pass.task_loss,
                balance_loss: pass.balance_loss,
                temperature: pass.temperature,
                mean_selected_experts: pass.mean_selected,
                tokens_per_sec: window_tokens as f64 / elapsed,
                cumulative_flops: state.cumulative_flops,
            };
            if let Some(f) = files.as_mut() {
                serde_json::to_writer(&mut f.metrics, &record)
                    .map_err(|e| Error::Invariant(format!("metrics serialize: {e}")))?;
                f.metrics.write_all(b"\n")?;
            }
            if let Some(cb) = progress.as_mut() {
                cb(&record);
            }
            run_metrics.push(record);
            window_start = Instant::now();
            window_tokens = 0;
        }

        if tp.eval_every > 0 && done % tp.eval_every == 0 {
            let ppl = state.model.evaluate(&corpus, Split::Valid, done, tp.batch_size)?;
            evals.push((done, ppl));
        }

        state.iter = done;

        let boundary = done == cfg.t_shared || done == cfg.t_dense || done == cfg.t_total;
        let cadence = tp.checkpoint_every > 0 && done % tp.checkpoint_every == 0;
        if boundary || cadence {
            if let Some(f) = files.as_ref() {
                let path = f.dir.join(format!("ckpt_{done:07}.bin"));
                checkpoint::save(&state, config, &path)?;
                checkpoints.push(path);
            }
        }
    }

    if let Some(f) = files.as_mut() {
        f.metrics.flush()?;
        f.routing.flush()?;
        write_sidecar(&f.dir, &state, cfg.n_experts)?;
    }
    Ok(TrainRun { state, metrics: run_metrics, evals, corpus, checkpoints })
}

fn write_sidecar(dir: &Path, state: &TrainState, _n_experts: usize) -> Result<()> {
    let sidecar = serde_json::json!({
        "tracked_tokens": state.stats.tracked,
        "top_preceding": state.stats.top_preceding(&state.model.cfg.moe_layers, 5),
    });
    std::fs::write(dir.join("routing_tokens.json"), serde_json::to_vec_pretty(&sidecar).unwrap())?;
    Ok(())
}

fn abort_with_diagnostics(
    state: &TrainState,
    config: &Config,
    files: Option<&OutFiles>,
    iter: u64,
    cause: Error,
    recent_losses: &[(u64, f64)],
) -> Error {
    let message = cause.to_string();
    if let Some(f) = files {
        let _ = checkpoint::save(state, config, &f.dir.join(format!("diagnostic_{iter:07}.bin")));
        let diag = serde_json::json!({
            "iter": iter,
            "cause": message,
            "recent_task_losses": recent_losses,
        });
        let _ = std::fs::write(f.dir.join("diagnostic.json"), serde_json::to_vec_pretty(&diag).unwrap());
    }
    Error::NumericalAbort { iter, message }
}

/// Forward-plus-backward FLOPs for one step, counting the backward pass as
/// twice the forward cost. Expert cost uses the step's actual expert calls.
fn step_flops(
    cfg: &super::config::ModelConfig,
    tokens: u64,
    expert_calls: u64,
    pass: &super::model::ForwardPass,
) -> u64 {
    let d = cfg.d_model as u64;
    let d_ff = cfg.d_ff as u64;
    let l = cfg.seq_len as u64;
    let v = cfg.vocab as u64;
    let n = cfg.n_experts as u64;
    let n_moe = cfg.moe_layers.len() as u64;
    let n_dense_ffn = cfg.layers as u64 - n_moe;

    let mut per_token = 2 * d * v; // output projection
    per_token += cfg.layers as u64 * (8 * d * d + 4 * l * d);
    per_token += n_dense_ffn * 4 * d * d_ff;
    if pass.phase != Phase::Shared && cfg.gate_kind != GateKind::Hash {
        per_token += n_moe * 2 * d * n;
    }
    let mut fwd = tokens * per_token;
    if pass.phase == Phase::Shared {
        fwd += tokens * n_moe * 4 * d * d_ff;
    } else {
        fwd += expert_calls * 4 * d * d_ff;
    }
    3 * fwd
}

/// Convenience evaluation entry point used by the command layer: rebuild the
/// corpus from the config and evaluate one split.
pub fn evaluate_split(state: &TrainState, config: &Config, split: Split) -> Result<(f64, u64)> {
    let corpus = make_corpus(
        config.corpus.kind,
        config.corpus.size,
        config.model.vocab,
        config.model.seed,
        config.corpus.sublanguages,
    )?;
    let ppl = state.model.evaluate(&corpus, split, state.iter, config.train.batch_size)?;
    let windows = super::corpus::eval_windows(&corpus, split, config.model.seq_len);
    let tokens: u64 = windows.iter().map(|(_, t)| t.len() as u64).sum();
    Ok((ppl, tokens))
}

/// One row of a temperature sweep.
#[derive(Clone, Debug, serde::Serialize)]
pub struct SweepRow {
    pub tau: f64,
    pub mean_selected_experts: f64,
    pub ppl: f64,
}

/// Evaluate the dense-threshold gate on the validation split at each
/// temperature (noise off), reporting mean selected experts and perplexity.
/// Starts from `base` when given, otherwise from a fresh initialization;
/// undiversified models are diversified first so the gate exists.
pub fn gate_sweep(config: &Config, base: Option<TrainState>, temps: &[f64]) -> Result<Vec<SweepRow>> {
    if temps.is_empty() {
        return Err(Error::InvalidParameter("gate sweep needs at least one temperature".into()));
    }
    let mut state = match base {
        Some(s) => s,
        None => TrainState::init(config)?,
    };
    if !state.model.diversified && !state.model.cfg.moe_layers.is_empty() {
        state.model.diversify(&mut state.rngs.init, &mut state.adam)?;
    }
    let corpus = make_corpus(
        config.corpus.kind,
        config.corpus.size,
        state.model.cfg.vocab,
        state.model.cfg.seed,
        config.corpus.sublanguages,
    )?;
    let windows = super::corpus::eval_windows(&corpus, Split::Valid, state.model.cfg.seq_len);
    if windows.is_empty() {
        return Err(Error::EmptyBatch);
    }

    let mut rows = Vec::with_capacity(temps.len());
    for &tau in temps {
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!("sweep temperature must be positive, got {tau}")));
        }
        let mut model = state.model.clone();
        // Pin the schedule to this temperature and keep the gate in its
        // dense-threshold mode for the whole evaluation.
        model.cfg.schedule.max_temp = tau;
        model.cfg.schedule.min_temp = tau;
        model.cfg.schedule.decay_iters = 0;
        model.cfg.t_dense = u64::MAX;
        let eval_iter = state.iter.max(model.cfg.t_shared);

        let mut total_nll = 0.0;
        let mut total_tokens = 0u64;
        let mut sel_weighted = 0.0;
        let mut dummy_gate = ChaCha8Rng::seed_from_u64(0);
        let mut dummy_drop = ChaCha8Rng::seed_from_u64(0);
        for group in windows.chunks(config.train.batch_size.max(1)) {
            let inputs: Vec<Vec<usize>> = group.iter().map(|(i, _)| i.clone()).collect();
            let targets: Vec<Vec<usize>> = group.iter().map(|(_, t)| t.clone()).collect();
            let mut g = crate::numerics::Graph::new();
            let pass = model.forward(&mut g, &inputs, &targets, eval_iter, false, &mut dummy_gate, &mut dummy_drop)?;
            total_nll += pass.task_loss * pass.tokens as f64;
            sel_weighted += pass.mean_selected * pass.tokens as f64;
            total_tokens += pass.tokens;
        }
        rows.push(SweepRow {
            tau,
            mean_selected_experts: sel_weighted / total_tokens as f64,
            ppl: (total_nll / total_tokens as f64).exp(),
        });
    }
    Ok(rows)
}
