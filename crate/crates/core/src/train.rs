//! Dual-tower training with in-batch negatives and Adam, plus the checkpoint
//! file format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "GCKPT" | u32 version | u32 header_len | header JSON
//! | tensors: (u32 count, f32 × count)*  query tower, entry tower (unless
//!   shared), then Adam first/second moments in the same order
//! | u32 CRC32 of everything above
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, EncoderParams, Variant};
use crate::error::{Error, Result};
use crate::records::{Association, Record, Schema};
use crate::scoring::{inbatch_loss, loss_grad, score_backward, score_matrix, SimKind};
use crate::serialize::{build_vocab, Layout, MaskMode, SepMode, TokenSequence, Vocab};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"GCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub adam: AdamConfig,
    /// Seeds pair sampling. Tower weights are seeded from `encoder.seed`.
    pub seed: u64,
    pub share_towers: bool,
    pub sep: SepMode,
    pub mask: MaskMode,
    pub sim: SimKind,
    pub encoder: EncoderConfig,
    pub log_every: u64,
    /// Scale each row of the loss by its association strength in addition to
    /// strength-proportional sampling.
    pub weight_by_strength: bool,
    pub query_schema: Schema,
    pub entry_schema: Schema,
}

impl TrainConfig {
    /// Desk-scale defaults for the given schemas.
    pub fn new(query_schema: Schema, entry_schema: Schema) -> Self {
        let vocab = build_vocab(&query_schema, &entry_schema);
        TrainConfig {
            batch_size: 32,
            steps: 2000,
            lr: 1e-3,
            adam: AdamConfig::default(),
            seed: 0,
            share_towers: false,
            sep: SepMode::Multi,
            mask: MaskMode::Multi,
            sim: SimKind::Nsd,
            encoder: EncoderConfig::new(Variant::Attentive, vocab.size()),
            log_every: 50,
            weight_by_strength: false,
            query_schema,
            entry_schema,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size {} < 2", self.batch_size)));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.lr.is_nan() || self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        let vocab = self.vocab();
        if self.encoder.vocab_size != vocab.size() {
            return Err(Error::Config(format!(
                "encoder vocab_size {} does not match schema vocabulary {}",
                self.encoder.vocab_size,
                vocab.size()
            )));
        }
        self.encoder.validate()
    }

    pub fn vocab(&self) -> Vocab {
        build_vocab(&self.query_schema, &self.entry_schema)
    }

    pub fn layout(&self) -> Layout {
        Layout {
            sep: self.sep,
            mask: self.mask,
            max_len: self.encoder.max_len,
        }
    }

    fn tower_config(&self, entry_side: bool) -> EncoderConfig {
        let mut c = self.encoder.clone();
        if entry_side {
            c.seed = c.seed.wrapping_add(1);
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AdamState {
    m: EncoderParams<f32>,
    v: EncoderParams<f32>,
}

impl AdamState {
    fn zeros(config: &EncoderConfig) -> Self {
        AdamState {
            m: EncoderParams::zeros(config),
            v: EncoderParams::zeros(config),
        }
    }
}

fn adam_update(params: &mut EncoderParams<f32>, grads: &EncoderParams<f32>, state: &mut AdamState, t: u64, lr: f64, adam: &AdamConfig) {
    let t = t as i32;
    let bc1 = 1.0 - adam.beta1.powi(t);
    let bc2 = 1.0 - adam.beta2.powi(t);
    let (b1, b2) = (adam.beta1 as f32, adam.beta2 as f32);
    let step = (lr / bc1) as f32;
    let inv_bc2 = (1.0 / bc2) as f32;
    let eps = adam.eps as f32;
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
        }
    }
}

/// Resumable position of the pair-sampling generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    #[serde(with = "u128_string")]
    word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};
    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Trained (or in-training) model: both towers, optimizer moments, sampler
/// position, and the config that fixes vocabulary and serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    query: Encoder<f32>,
    /// `None` when the towers are shared.
    entry: Option<Encoder<f32>>,
    pub step: u64,
    rng: RngState,
    adam_query: AdamState,
    adam_entry: Option<AdamState>,
    vocab: Vocab,
}

impl Checkpoint {
    pub fn init(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let query = Encoder::init(config.tower_config(false))?;
        let entry = if config.share_towers {
            None
        } else {
            Some(Encoder::init(config.tower_config(true))?)
        };
        let adam_query = AdamState::zeros(&config.encoder);
        let adam_entry = entry.as_ref().map(|_| AdamState::zeros(&config.encoder));
        Ok(Checkpoint {
            vocab: config.vocab(),
            rng: RngState {
                seed: config.seed,
                word_pos: 0,
            },
            config,
            query,
            entry,
            step: 0,
            adam_query,
            adam_entry,
        })
    }

    pub fn query_encoder(&self) -> &Encoder<f32> {
        &self.query
    }

    /// The entry tower; the query tower itself when towers are shared.
    pub fn entry_encoder(&self) -> &Encoder<f32> {
        self.entry.as_ref().unwrap_or(&self.query)
    }

    pub fn towers_shared(&self) -> bool {
        self.entry.is_none()
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn serialize_query(&self, record: &Record) -> Result<TokenSequence> {
        self.config.layout().apply(record, &self.config.query_schema, &self.vocab)
    }

    pub fn serialize_entry(&self, record: &Record) -> Result<TokenSequence> {
        self.config.layout().apply(record, &self.config.entry_schema, &self.vocab)
    }

    pub fn encode_queries(&self, records: &[&Record]) -> Result<Vec<Vec<f32>>> {
        let seqs = records.iter().map(|r| self.serialize_query(r)).collect::<Result<Vec<_>>>()?;
        self.query.encode_batch(&seqs)
    }

    pub fn encode_entries(&self, records: &[&Record]) -> Result<Vec<Vec<f32>>> {
        let seqs = records.iter().map(|r| self.serialize_entry(r)).collect::<Result<Vec<_>>>()?;
        self.entry_encoder().encode_batch(&seqs)
    }

    pub fn is_finite(&self) -> bool {
        self.query.params.is_finite() && self.entry.as_ref().is_none_or(|e| e.params.is_finite())
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng.seed);
        rng.set_word_pos(self.rng.word_pos);
        rng
    }
}

/// Draws association indices with probability proportional to strength.
pub struct PairSampler {
    weights: WeightedIndex<f64>,
    distinct_entries: usize,
}

pub const MAX_DRAWS_PER_SLOT: usize = 100;

impl PairSampler {
    pub fn new(associations: &[Association]) -> Result<Self> {
        if associations.is_empty() {
            return Err(Error::Sampling("no associations to sample from".into()));
        }
        let weights = WeightedIndex::new(associations.iter().map(|a| a.strength))
            .map_err(|e| Error::Sampling(e.to_string()))?;
        let distinct_entries = associations.iter().map(|a| a.entry_id.as_str()).collect::<HashSet<_>>().len();
        Ok(PairSampler {
            weights,
            distinct_entries,
        })
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        self.weights.sample(rng)
    }

    /// B association indices whose entry ids are pairwise distinct; a draw
    /// repeating an entry already in the batch is rejected and redrawn.
    pub fn sample_batch(&self, associations: &[Association], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if self.distinct_entries < batch_size {
            return Err(Error::Sampling(format!(
                "batch of {batch_size} needs distinct entries but only {} exist",
                self.distinct_entries
            )));
        }
        let mut picked = Vec::with_capacity(batch_size);
        let mut seen = HashSet::with_capacity(batch_size);
        for _ in 0..MAX_DRAWS_PER_SLOT * batch_size {
            let i = self.draw(rng);
            if seen.insert(associations[i].entry_id.as_str()) {
                picked.push(i);
                if picked.len() == batch_size {
                    return Ok(picked);
                }
            }
        }
        Err(Error::Sampling(format!(
            "could not assemble {batch_size} distinct-entry pairs in {} draws",
            MAX_DRAWS_PER_SLOT * batch_size
        )))
    }
}

/// One training pair after id lookup.
#[derive(Debug, Clone, Copy)]
pub struct Pair<'a> {
    pub query: &'a Record,
    pub entry: &'a Record,
    pub weight: f64,
}

fn to_f64(rows: &Array2<f32>) -> Array2<f64> {
    rows.mapv(f64::from)
}

/// One Adam step on a batch; returns the loss before the update.
pub fn train_step(ckpt: &mut Checkpoint, batch: &[Pair<'_>]) -> Result<f64> {
    let config = &ckpt.config;
    let q_seqs = batch.iter().map(|p| ckpt.serialize_query(p.query)).collect::<Result<Vec<_>>>()?;
    let e_seqs = batch.iter().map(|p| ckpt.serialize_entry(p.entry)).collect::<Result<Vec<_>>>()?;

    let (yq, q_trace) = ckpt.query.forward(&q_seqs)?;
    let (ye, e_trace) = ckpt.entry_encoder().forward(&e_seqs)?;
    let (yq, ye) = (to_f64(&yq), to_f64(&ye));

    let step = ckpt.step + 1;
    let non_finite = |ys: [&Array2<f64>; 2]| {
        let max = ys.iter().flat_map(|y| y.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        Error::NonFiniteLoss {
            step,
            max_abs_score: if max.is_finite() { max * max } else { max },
        }
    };
    let scores = score_matrix(config.sim, yq.view(), ye.view()).map_err(|_| non_finite([&yq, &ye]))?;
    let weights: Vec<f64> = if config.weight_by_strength {
        batch.iter().map(|p| p.weight).collect()
    } else {
        vec![1.0; batch.len()]
    };
    let loss = inbatch_loss(&scores, &weights)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            max_abs_score: scores.max_abs(),
        });
    }
    let g = loss_grad(&scores, &weights)?;
    let (dq, de) = score_backward(config.sim, yq.view(), ye.view(), g.view());
    let (dq, de) = (dq.mapv(|v| v as f32), de.mapv(|v| v as f32));

    let (lr, adam) = (config.lr, config.adam);
    let mut q_grads = EncoderParams::zeros(&config.encoder);
    ckpt.query.backward(&q_trace, dq.view(), &mut q_grads)?;
    match ckpt.entry.as_mut() {
        None => {
            ckpt.query.backward(&e_trace, de.view(), &mut q_grads)?;
            adam_update(&mut ckpt.query.params, &q_grads, &mut ckpt.adam_query, step, lr, &adam);
        }
        Some(entry) => {
            let mut e_grads = EncoderParams::zeros(&config.encoder);
            entry.backward(&e_trace, de.view(), &mut e_grads)?;
            adam_update(&mut ckpt.query.params, &q_grads, &mut ckpt.adam_query, step, lr, &adam);
            let state = ckpt.adam_entry.as_mut().expect("entry moments exist with an entry tower");
            adam_update(&mut entry.params, &e_grads, state, step, lr, &adam);
        }
    }
    ckpt.step = step;
    Ok(loss)
}

/// Training data with id lookups resolved once.
pub struct TrainData<'a> {
    queries: HashMap<&'a str, &'a Record>,
    entries: HashMap<&'a str, &'a Record>,
    associations: Vec<&'a Association>,
    owned: Vec<Association>,
    sampler: PairSampler,
}

impl<'a> TrainData<'a> {
    pub fn new(queries: &'a [Record], entries: &'a [Record], associations: &'a [Association]) -> Result<Self> {
        if queries.is_empty() || entries.is_empty() {
            return Err(Error::Config("training needs queries and entries".into()));
        }
        let queries: HashMap<&str, &Record> = queries.iter().map(|r| (r.id.as_str(), r)).collect();
        let entries: HashMap<&str, &Record> = entries.iter().map(|r| (r.id.as_str(), r)).collect();
        let associations: Vec<&Association> = associations
            .iter()
            .filter(|a| queries.contains_key(a.query_id.as_str()) && entries.contains_key(a.entry_id.as_str()))
            .collect();
        let owned: Vec<Association> = associations.iter().map(|&a| a.clone()).collect();
        let sampler = PairSampler::new(&owned)?;
        Ok(TrainData {
            queries,
            entries,
            associations,
            owned,
            sampler,
        })
    }

    pub fn sample(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Pair<'a>>> {
        let idx = self.sampler.sample_batch(&self.owned, batch_size, rng)?;
        Ok(idx
            .into_iter()
            .map(|i| {
                let a = self.associations[i];
                Pair {
                    query: self.queries[a.query_id.as_str()],
                    entry: self.entries[a.entry_id.as_str()],
                    weight: a.strength,
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// Pre-update loss of every step run in this call.
    pub losses: Vec<f64>,
}

/// Runs `steps` more steps on `ckpt`, writing a `step\tloss` row every
/// `log_every` steps (the mean loss over that window).
pub fn continue_training(
    mut ckpt: Checkpoint,
    data: &TrainData<'_>,
    steps: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainRun> {
    let mut rng = ckpt.rng();
    let mut losses = Vec::with_capacity(steps as usize);
    let log_every = ckpt.config.log_every;
    let bsz = ckpt.config.batch_size;
    let mut window = 0.0;
    for _ in 0..steps {
        let batch = data.sample(bsz, &mut rng)?;
        let loss = train_step(&mut ckpt, &batch)?;
        ckpt.rng.word_pos = rng.get_word_pos();
        losses.push(loss);
        window += loss;
        if ckpt.step.is_multiple_of(log_every) {
            if let Some(out) = log.as_mut() {
                writeln!(out, "{}\t{:.6}", ckpt.step, window / log_every as f64).map_err(|e| Error::io("<training log>", e))?;
            }
            window = 0.0;
        }
    }
    Ok(TrainRun { checkpoint: ckpt, losses })
}

pub fn train(
    config: &TrainConfig,
    queries: &[Record],
    entries: &[Record],
    associations: &[Association],
    log: Option<&mut dyn Write>,
) -> Result<TrainRun> {
    let ckpt = Checkpoint::init(config.clone())?;
    let data = TrainData::new(queries, entries, associations)?;
    continue_training(ckpt, &data, config.steps, log)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    step: u64,
    rng: RngState,
    shared: bool,
}

fn push_tensors(out: &mut Vec<u8>, params: &EncoderParams<f32>) {
    for (_, t) in params.tensors() {
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn fill(&mut self, params: &mut EncoderParams<f32>) -> Result<()> {
        for (name, t) in params.tensors_mut() {
            let count = self.u32()? as usize;
            if count != t.len() {
                return Err(Error::Format(format!("tensor {name}: stored {count} values, expected {}", t.len())));
            }
            for (v, chunk) in t.iter_mut().zip(self.take(4 * count)?.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        Ok(())
    }
}

/// Splits `bytes` into payload and verifies the trailing CRC32.
pub(crate) fn check_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::Format("file too short".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(payload)
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader {
        config: ckpt.config.clone(),
        step: ckpt.step,
        rng: ckpt.rng,
        shared: ckpt.towers_shared(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    push_tensors(&mut out, &ckpt.query.params);
    if let Some(e) = &ckpt.entry {
        push_tensors(&mut out, &e.params);
    }
    push_tensors(&mut out, &ckpt.adam_query.m);
    push_tensors(&mut out, &ckpt.adam_query.v);
    if let Some(s) = &ckpt.adam_entry {
        push_tensors(&mut out, &s.m);
        push_tensors(&mut out, &s.v);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let payload = check_crc(bytes)?;
    let mut r = Reader { buf: payload, pos: r.pos };
    let header_len = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)?;
    let mut config = header.config;
    config.share_towers = header.shared;
    let mut ckpt = Checkpoint::init(config)?;
    ckpt.step = header.step;
    ckpt.rng = header.rng;
    r.fill(&mut ckpt.query.params)?;
    if let Some(e) = ckpt.entry.as_mut() {
        r.fill(&mut e.params)?;
    }
    r.fill(&mut ckpt.adam_query.m)?;
    r.fill(&mut ckpt.adam_query.v)?;
    if let Some(s) = ckpt.adam_entry.as_mut() {
        r.fill(&mut s.m)?;
        r.fill(&mut s.v)?;
    }
    if r.pos != payload.len() {
        return Err(Error::Format(format!("{} trailing bytes after tensors", payload.len() - r.pos)));
    }
    if !ckpt.is_finite() {
        return Err(Error::Format("checkpoint contains non-finite parameters".into()));
    }
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_to_bytes(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
