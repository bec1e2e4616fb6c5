//! Single-file binary checkpoints.
//!
//! Layout (little-endian): magic `EVMO`, u32 version, run header (iteration,
//! phase, diversified flag, cumulative FLOPs), the canonical config text,
//! four named rng streams (seed, stream id, word position), named parameter
//! blobs (name, shape, f64 data), optimizer slots, and the routing-statistics
//! sidecar state.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use super::metrics::RoutingStats;
use super::model::{phase_of, Model, Phase};
use super::params::ParamStore;
use super::train::{RngBundle, TrainState};
use super::AdamState;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"EVMO";
const VERSION: u32 = 1;

fn phase_code(p: Phase) -> u8 {
    match p {
        Phase::Shared => 0,
        Phase::Dense => 1,
        Phase::Sparse => 2,
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    fn str_len(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn u64s(&mut self, v: &[u64]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated at byte {} (need {n} more of {})",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::CorruptCheckpoint(format!("bad utf8: {e}")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn u64s(&mut self, n: usize) -> Result<Vec<u64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn write_rng(w: &mut Writer, name: &str, rng: &ChaCha8Rng) {
    w.str_len(name);
    w.bytes(&rng.get_seed());
    w.u64(rng.get_stream());
    w.u128(rng.get_word_pos());
}

fn read_rng(r: &mut Reader, expect: &str) -> Result<ChaCha8Rng> {
    let name = r.string()?;
    if name != expect {
        return Err(Error::CorruptCheckpoint(format!("rng stream {name:?}, expected {expect:?}")));
    }
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

/// Serialize a training state (with its config) to checkpoint bytes.
pub fn to_bytes(state: &TrainState, config: &Config) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(state.iter);
    w.u8(phase_code(phase_of(&config.model, state.iter)));
    w.u8(state.model.diversified as u8);
    w.u64(state.cumulative_flops);
    w.str_len(&config.to_toml());

    w.u32(4);
    write_rng(&mut w, "init", &state.rngs.init);
    write_rng(&mut w, "data", &state.rngs.data);
    write_rng(&mut w, "gate", &state.rngs.gate);
    write_rng(&mut w, "dropout", &state.rngs.dropout);

    w.u32(state.model.params.len() as u32);
    for p in state.model.params.iter() {
        w.str_len(&p.name);
        w.u32(p.shape.len() as u32);
        for &d in &p.shape {
            w.u64(d as u64);
        }
        w.f64s(&p.data);
    }

    w.u32(state.adam.slots.len() as u32);
    let mut names: Vec<&String> = state.adam.slots.keys().collect();
    names.sort();
    for name in names {
        let slot = &state.adam.slots[name];
        w.str_len(name);
        w.u64(slot.t);
        w.u64(slot.m.len() as u64);
        w.f64s(&slot.m);
        w.f64s(&slot.v);
    }

    // Routing statistics: records, tracked tokens, preceding-token counts.
    w.u64(state.stats.records.len() as u64);
    for rec in &state.stats.records {
        w.u64(rec.iter);
        w.u64(rec.layer as u64);
        w.u64(rec.expert as u64);
        w.u64(rec.token_count);
    }
    let tracked = serde_json::to_vec(&state.stats.tracked)
        .map_err(|e| Error::Invariant(format!("tracked tokens serialize: {e}")))?;
    w.u32(tracked.len() as u32);
    w.bytes(&tracked);
    w.u32(state.stats.preceding.len() as u32);
    for per_layer in &state.stats.preceding {
        w.u32(per_layer.len() as u32);
        for counts in per_layer {
            w.u64(counts.len() as u64);
            w.u64s(counts);
        }
    }
    Ok(w.buf)
}

/// Deserialize a checkpoint. The embedded config is re-validated.
pub fn from_bytes(buf: &[u8]) -> Result<(TrainState, Config)> {
    let mut r = Reader::new(buf);
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let iter = r.u64()?;
    let phase = r.u8()?;
    let diversified = r.u8()? != 0;
    let cumulative_flops = r.u64()?;
    let config_text = r.string()?;
    let config = Config::from_toml(&config_text)
        .map_err(|e| Error::CorruptCheckpoint(format!("embedded config: {e}")))?;
    if phase != phase_code(phase_of(&config.model, iter)) {
        return Err(Error::CorruptCheckpoint("phase does not match iteration".into()));
    }

    let n_rngs = r.u32()?;
    if n_rngs != 4 {
        return Err(Error::CorruptCheckpoint(format!("expected 4 rng streams, got {n_rngs}")));
    }
    let rngs = RngBundle {
        init: read_rng(&mut r, "init")?,
        data: read_rng(&mut r, "data")?,
        gate: read_rng(&mut r, "gate")?,
        dropout: read_rng(&mut r, "dropout")?,
    };

    let n_params = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        if ndim > 4 {
            return Err(Error::CorruptCheckpoint(format!("parameter {name}: {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        if n > 100_000_000 {
            return Err(Error::CorruptCheckpoint(format!("parameter {name}: implausible size {n}")));
        }
        let data = r.f64s(n)?;
        params
            .insert(&name, shape, data)
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    }

    let n_slots = r.u32()? as usize;
    let mut adam = AdamState::new();
    for _ in 0..n_slots {
        let name = r.string()?;
        let t = r.u64()?;
        let n = r.u64()? as usize;
        let expected = params
            .get(&name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("optimizer slot for unknown {name}")))?
            .data
            .len();
        if n != expected {
            return Err(Error::CorruptCheckpoint(format!(
                "optimizer slot {name}: {n} values for a {expected}-value parameter"
            )));
        }
        let m = r.f64s(n)?;
        let v = r.f64s(n)?;
        adam.slots.insert(name, super::adam::AdamSlot { m, v, t });
    }

    let n_records = r.u64()? as usize;
    if n_records > 100_000_000 {
        return Err(Error::CorruptCheckpoint("implausible routing record count".into()));
    }
    let mut stats = RoutingStats::default();
    for _ in 0..n_records {
        stats.records.push(super::metrics::RoutingRecord {
            iter: r.u64()?,
            layer: r.u64()? as usize,
            expert: r.u64()? as usize,
            token_count: r.u64()?,
        });
    }
    let tracked_len = r.u32()? as usize;
    stats.tracked = serde_json::from_slice(r.take(tracked_len)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("tracked tokens: {e}")))?;
    let n_layers = r.u32()? as usize;
    for _ in 0..n_layers {
        let n_experts = r.u32()? as usize;
        let mut per_layer = Vec::with_capacity(n_experts);
        for _ in 0..n_experts {
            let n = r.u64()? as usize;
            if n > 10_000_000 {
                return Err(Error::CorruptCheckpoint("implausible vocab count".into()));
            }
            per_layer.push(r.u64s(n)?);
        }
        stats.preceding.push(per_layer);
    }
    if r.pos != buf.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes after checkpoint payload",
            buf.len() - r.pos
        )));
    }

    let model = Model { cfg: config.model.clone(), params, diversified };
    let state = TrainState { iter, model, adam, rngs, stats, cumulative_flops };
    Ok((state, config))
}

pub fn save(state: &TrainState, config: &Config, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(state, config)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(TrainState, Config)> {
    let buf = std::fs::read(path)?;
    from_bytes(&buf)
}
