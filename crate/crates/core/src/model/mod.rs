//! Dual-encoder, single-decoder post-editing model with QE heads and
//! optional decoder adapters.
//!
//! The source encoder and the translation encoder each run a pre-LN
//! transformer stack. Their final states are concatenated along the sequence
//! axis, tagged with a segment embedding and passed through one fusion layer;
//! the decoder cross-attends to that fused sequence and the QE heads read it.
//! In NMT mode only the source encoder feeds the fusion layer.

mod batch;
mod checkpoint;
pub mod params;
pub mod tape;
pub mod vocab;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use params::{ParamId, ParamStore};
use tape::{Graph, Mat, Var};
use vocab::{Vocab, BOS_ID, EOS_ID};

pub use batch::{Batch, Example, ExampleBuilder};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, InitReport, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Longest subword sequence per input side, excluding bos/eos.
    pub max_len: usize,
    pub adapter_dim: usize,
    pub dropout: f64,
    /// Over-long inputs are an error rather than truncated.
    pub strict_len: bool,
    pub langids: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            embed_dim: 32,
            ff_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            max_len: 64,
            adapter_dim: 512,
            dropout: 0.0,
            strict_len: false,
            langids: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.adapter_dim == 0 {
            return bad("adapter_dim must be >= 1".into());
        }
        if self.embed_dim == 0 || self.ff_dim == 0 || self.max_len == 0 {
            return bad("dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let mut specials: Vec<&str> = vec![vocab::PAD, vocab::BOS, vocab::EOS, vocab::UNK, vocab::SEP];
        specials.extend(self.langids.iter().map(String::as_str));
        let mut sorted = specials.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != specials.len() {
            return bad("special tokens must be distinct".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelMode {
    Nmt,
    Ape,
}

/// Which losses a parameter receives gradient from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Encoders, embeddings and the fusion layer: every task.
    Shared,
    /// Decoder and output projection.
    Ape,
    SentHead,
    WordHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApeModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub mode: ModelMode,
    pub qe_heads: bool,
    pub adapters: bool,
    /// Provenance notes carried into checkpoints.
    pub metadata: BTreeMap<String, String>,
    positions: Mat,
}

/// Forward-pass options: dropout is active only when an RNG is supplied.
pub struct Forward {
    rng: Option<ChaCha8Rng>,
    rate: f64,
}

impl Forward {
    pub fn eval() -> Self {
        Forward { rng: None, rate: 0.0 }
    }

    pub fn train(rate: f64, seed: u64) -> Self {
        Forward {
            rng: (rate > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed)),
            rate,
        }
    }

    fn drop(&mut self, g: &mut Graph, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut() else { return x };
        let keep = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        let mask = Mat::from_shape_simple_fn(g.value(x).dim(), || if rng.gen::<f64>() < rate { 0.0 } else { keep });
        g.dropout(x, mask)
    }
}

/// The fused encoder-side sequence of one example.
pub struct Encoded {
    pub repr: Var,
    /// Row range of the translation segment within `repr`.
    pub mt_rows: std::ops::Range<usize>,
}

fn sinusoids(len: usize, d: usize) -> Mat {
    Mat::from_shape_fn((len, d), |(p, i)| {
        let k = (i / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * k / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn add_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    store.add_normal(format!("{name}.w"), fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng);
    store.add_const(format!("{name}.b"), 1, fan_out, 0.0);
}

fn add_ln(store: &mut ParamStore, name: &str, d: usize) {
    store.add_const(format!("{name}.g"), 1, d, 1.0);
    store.add_const(format!("{name}.b"), 1, d, 0.0);
}

fn add_attention(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        add_linear(store, rng, &format!("{name}.{p}"), d, d);
    }
}

fn add_encoder_layer(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) {
    let d = cfg.embed_dim;
    add_ln(store, &format!("{name}.ln1"), d);
    add_attention(store, rng, &format!("{name}.attn"), d);
    add_ln(store, &format!("{name}.ln2"), d);
    add_linear(store, rng, &format!("{name}.ff1"), d, cfg.ff_dim);
    add_linear(store, rng, &format!("{name}.ff2"), cfg.ff_dim, d);
}

fn add_encoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) {
    for l in 0..cfg.encoder_layers {
        add_encoder_layer(store, rng, &format!("{name}.{l}"), cfg);
    }
    add_ln(store, &format!("{name}.ln"), cfg.embed_dim);
}

pub const SRC_ENCODER: &str = "src_enc";
pub const MT_ENCODER: &str = "mt_enc";

impl ApeModel {
    /// A freshly initialized single-encoder (NMT mode) model.
    pub fn new(mut config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        for l in &config.langids {
            if vocab.id(l).is_none() {
                return Err(Error::Config(format!("language id {l} is not in the vocabulary")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let (d, v) = (config.embed_dim, config.vocab_size);
        p.add_normal("tok_emb", v, d, 1.0, &mut rng);
        add_encoder(&mut p, &mut rng, SRC_ENCODER, &config);
        add_encoder_layer(&mut p, &mut rng, "fusion", &config);
        add_ln(&mut p, "fusion.ln", d);
        for l in 0..config.decoder_layers {
            let name = format!("dec.{l}");
            add_ln(&mut p, &format!("{name}.ln1"), d);
            add_attention(&mut p, &mut rng, &format!("{name}.self"), d);
            add_ln(&mut p, &format!("{name}.ln2"), d);
            add_attention(&mut p, &mut rng, &format!("{name}.cross"), d);
            add_ln(&mut p, &format!("{name}.ln3"), d);
            add_linear(&mut p, &mut rng, &format!("{name}.ff1"), d, config.ff_dim);
            add_linear(&mut p, &mut rng, &format!("{name}.ff2"), config.ff_dim, d);
        }
        add_ln(&mut p, "dec.ln", d);
        add_linear(&mut p, &mut rng, "out", d, v);
        let positions = sinusoids(config.max_len + 2, d);
        let mut metadata = BTreeMap::new();
        metadata.insert("init_seed".into(), seed.to_string());
        Ok(ApeModel {
            config,
            vocab,
            params: p,
            mode: ModelMode::Nmt,
            qe_heads: false,
            adapters: false,
            metadata,
            positions,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        vocab: Vocab,
        params: ParamStore,
        mode: ModelMode,
        qe_heads: bool,
        adapters: bool,
        metadata: BTreeMap<String, String>,
    ) -> Self {
        let positions = sinusoids(config.max_len + 2, config.embed_dim);
        ApeModel {
            config,
            vocab,
            params,
            mode,
            qe_heads,
            adapters,
            metadata,
            positions,
        }
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        let name = self.params.name(id);
        if name.starts_with("dec.") || name.starts_with("out.") {
            ParamRole::Ape
        } else if name.starts_with("qe.sent.") {
            ParamRole::SentHead
        } else if name.starts_with("qe.word.") {
            ParamRole::WordHead
        } else {
            ParamRole::Shared
        }
    }

    /// Adds the translation encoder (a copy of the source encoder) and the
    /// segment embedding, switching to APE mode.
    pub fn add_translation_encoder(&mut self, seed: u64) -> Result<()> {
        if self.mode == ModelMode::Ape {
            return Err(Error::Mode("model already has a translation encoder".into()));
        }
        let copies: Vec<(String, Mat)> = self
            .params
            .ids()
            .filter_map(|id| {
                let name = self.params.name(id);
                name.strip_prefix(&format!("{SRC_ENCODER}."))
                    .map(|rest| (format!("{MT_ENCODER}.{rest}"), self.params.value(id).clone()))
            })
            .collect();
        for (name, value) in copies {
            self.params.add(name, value);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params.add_normal("seg_emb", 2, self.config.embed_dim, 0.1, &mut rng);
        self.mode = ModelMode::Ape;
        self.metadata
            .insert("translation_encoder_init".into(), "copy of source encoder".into());
        Ok(())
    }

    pub fn add_qe_heads(&mut self, seed: u64) -> Result<()> {
        if self.mode != ModelMode::Ape {
            return Err(Error::Mode("QE heads need an APE-mode model".into()));
        }
        if self.qe_heads {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        add_linear(&mut self.params, &mut rng, "qe.sent", self.config.embed_dim, 1);
        add_linear(&mut self.params, &mut rng, "qe.word", self.config.embed_dim, 2);
        self.qe_heads = true;
        Ok(())
    }

    /// One bottleneck adapter per decoder block, initialized to the identity.
    pub fn insert_adapters(&mut self, adapter_dim: usize, seed: u64) -> Result<()> {
        if self.mode != ModelMode::Ape {
            return Err(Error::Mode("adapters need an APE-mode model".into()));
        }
        if self.adapters {
            return Err(Error::Mode("adapters already inserted".into()));
        }
        if adapter_dim == 0 {
            return Err(Error::Config("adapter_dim must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.embed_dim;
        for l in 0..self.config.decoder_layers {
            add_linear(&mut self.params, &mut rng, &format!("dec.{l}.adapter.down"), d, adapter_dim);
            self.params.add_const(format!("dec.{l}.adapter.up.w"), adapter_dim, d, 0.0);
            self.params.add_const(format!("dec.{l}.adapter.up.b"), 1, d, 0.0);
        }
        self.config.adapter_dim = adapter_dim;
        self.adapters = true;
        Ok(())
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.name(id).contains(".adapter."))
            .collect()
    }

    pub fn adapter_count(&self) -> usize {
        if self.adapters {
            self.config.decoder_layers
        } else {
            0
        }
    }

    pub fn freeze_except_adapters(&mut self) -> Result<()> {
        if !self.adapters {
            return Err(Error::Mode("no adapters to train".into()));
        }
        let adapters = self.adapter_ids();
        for id in self.params.ids().collect::<Vec<_>>() {
            self.params.set_trainable(id, adapters.contains(&id));
        }
        Ok(())
    }

    pub fn unfreeze(&mut self) {
        for id in self.params.ids().collect::<Vec<_>>() {
            self.params.set_trainable(id, true);
        }
    }

    fn p(&self, g: &mut Graph, name: &str) -> Var {
        g.param(self.params.expect(name))
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        let w = self.p(g, &format!("{name}.w"));
        let b = self.p(g, &format!("{name}.b"));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn ln(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        let gamma = self.p(g, &format!("{name}.g"));
        let beta = self.p(g, &format!("{name}.b"));
        g.layer_norm(x, gamma, beta)
    }

    fn attention(&self, g: &mut Graph, x: Var, memory: Var, name: &str, causal: bool) -> Var {
        let q = self.linear(g, x, &format!("{name}.q"));
        let k = self.linear(g, memory, &format!("{name}.k"));
        let v = self.linear(g, memory, &format!("{name}.v"));
        let a = g.attention(q, k, v, self.config.heads, causal);
        self.linear(g, a, &format!("{name}.o"))
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        let h = self.linear(g, x, &format!("{name}.ff1"));
        let h = g.gelu(h);
        self.linear(g, h, &format!("{name}.ff2"))
    }

    fn encoder_layer(&self, g: &mut Graph, x: Var, name: &str, fwd: &mut Forward) -> Var {
        let h = self.ln(g, x, &format!("{name}.ln1"));
        let a = self.attention(g, h, h, &format!("{name}.attn"), false);
        let a = fwd.drop(g, a);
        let x = g.add(x, a);
        let h = self.ln(g, x, &format!("{name}.ln2"));
        let f = self.feed_forward(g, h, name);
        let f = fwd.drop(g, f);
        g.add(x, f)
    }

    fn embed(&self, g: &mut Graph, ids: &[usize], fwd: &mut Forward) -> Var {
        let table = self.p(g, "tok_emb");
        let tok = g.gather(table, ids);
        let pos = g.constant(self.positions.slice(ndarray::s![..ids.len(), ..]).to_owned());
        let x = g.add(tok, pos);
        fwd.drop(g, x)
    }

    fn encoder(&self, g: &mut Graph, ids: &[usize], name: &str, fwd: &mut Forward) -> Var {
        let mut x = self.embed(g, ids, fwd);
        for l in 0..self.config.encoder_layers {
            x = self.encoder_layer(g, x, &format!("{name}.{l}"), fwd);
        }
        self.ln(g, x, &format!("{name}.ln"))
    }

    /// Runs the encoders and the fusion layer. `mt` is ignored in NMT mode.
    pub fn encode(&self, g: &mut Graph, src: &[usize], mt: &[usize], fwd: &mut Forward) -> Encoded {
        let s = self.encoder(g, src, SRC_ENCODER, fwd);
        let (x, mt_rows) = match self.mode {
            ModelMode::Nmt => (s, src.len()..src.len()),
            ModelMode::Ape => {
                let m = self.encoder(g, mt, MT_ENCODER, fwd);
                let seg = self.p(g, "seg_emb");
                let seg_ids: Vec<usize> = std::iter::repeat(0)
                    .take(src.len())
                    .chain(std::iter::repeat(1).take(mt.len()))
                    .collect();
                let both = g.concat_rows(s, m);
                let seg_rows = g.gather(seg, &seg_ids);
                (g.add(both, seg_rows), src.len()..src.len() + mt.len())
            }
        };
        let fused = self.encoder_layer(g, x, "fusion", fwd);
        let repr = self.ln(g, fused, "fusion.ln");
        Encoded { repr, mt_rows }
    }

    /// Teacher-forced decoder logits `[dec_in.len(), |V|]`.
    pub fn decode(&self, g: &mut Graph, memory: Var, dec_in: &[usize], fwd: &mut Forward) -> Var {
        let mut x = self.embed(g, dec_in, fwd);
        for l in 0..self.config.decoder_layers {
            let name = format!("dec.{l}");
            let h = self.ln(g, x, &format!("{name}.ln1"));
            let a = self.attention(g, h, h, &format!("{name}.self"), true);
            let a = fwd.drop(g, a);
            x = g.add(x, a);
            let h = self.ln(g, x, &format!("{name}.ln2"));
            let c = self.attention(g, h, memory, &format!("{name}.cross"), false);
            let c = fwd.drop(g, c);
            x = g.add(x, c);
            let h = self.ln(g, x, &format!("{name}.ln3"));
            let f = self.feed_forward(g, h, &name);
            let f = fwd.drop(g, f);
            x = g.add(x, f);
            if self.adapters {
                let down = self.linear(g, x, &format!("{name}.adapter.down"));
                let act = g.gelu(down);
                let up = self.linear(g, act, &format!("{name}.adapter.up"));
                x = g.add(x, up);
            }
        }
        let x = self.ln(g, x, "dec.ln");
        self.linear(g, x, "out")
    }

    /// Sentence score `[1, 1]` and word logits `[word_rows.len(), 2]`, both
    /// read from the fused representation. `word_rows` index into `repr`.
    pub fn qe_heads(&self, g: &mut Graph, enc: &Encoded, word_rows: &[usize]) -> Result<(Var, Var)> {
        if !self.qe_heads {
            return Err(Error::Mode("model has no QE heads".into()));
        }
        let pooled = g.mean_rows(enc.repr);
        let sent = self.linear(g, pooled, "qe.sent");
        let rows = g.select_rows(enc.repr, word_rows);
        let word = self.linear(g, rows, "qe.word");
        Ok((sent, word))
    }

    /// Decoder input (bos + target) and output (target + eos) ids.
    pub fn teacher_forcing(target: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut dec_in = vec![BOS_ID];
        dec_in.extend_from_slice(target);
        let mut dec_out = target.to_vec();
        dec_out.push(EOS_ID);
        (dec_in, dec_out)
    }

    fn check_mode(&self, want: ModelMode) -> Result<()> {
        if self.mode != want {
            return Err(Error::Mode(format!("model is in {:?} mode, expected {want:?}", self.mode)));
        }
        Ok(())
    }

    fn batch_logits(&self, batch: &Batch) -> Array3<f64> {
        let (b, t) = batch.target_ids.dim();
        let v = self.config.vocab_size;
        let mut out = Array3::zeros((b, t, v));
        for i in 0..b {
            let src = batch.row(&batch.source_ids, &batch.source_mask, i);
            let mt = batch.row(&batch.translation_ids, &batch.translation_mask, i);
            let dec_in = batch.row(&batch.decoder_input, &batch.target_mask, i);
            if dec_in.is_empty() {
                continue;
            }
            let mut g = Graph::inference(&self.params);
            let mut fwd = Forward::eval();
            let enc = self.encode(&mut g, &src, &mt, &mut fwd);
            let logits = self.decode(&mut g, enc.repr, &dec_in, &mut fwd);
            out.index_axis_mut(Axis(0), i)
                .slice_mut(ndarray::s![..dec_in.len(), ..])
                .assign(g.value(logits));
        }
        out
    }

    /// Teacher-forced logits `[batch, target_len, |V|]`; padded positions are zero.
    pub fn forward_nmt(&self, batch: &Batch) -> Result<Array3<f64>> {
        self.check_mode(ModelMode::Nmt)?;
        Ok(self.batch_logits(batch))
    }

    /// Logits as [`ApeModel::forward_nmt`] plus the fused representation of
    /// every example (`[batch, repr_len, embed_dim]`, zero-padded).
    pub fn forward_ape(&self, batch: &Batch) -> Result<(Array3<f64>, Array3<f64>)> {
        self.check_mode(ModelMode::Ape)?;
        let logits = self.batch_logits(batch);
        let b = batch.source_ids.nrows();
        let len = batch.source_ids.ncols() + batch.translation_ids.ncols();
        let mut reprs = Array3::zeros((b, len, self.config.embed_dim));
        for i in 0..b {
            let src = batch.row(&batch.source_ids, &batch.source_mask, i);
            let mt = batch.row(&batch.translation_ids, &batch.translation_mask, i);
            let mut g = Graph::inference(&self.params);
            let enc = self.encode(&mut g, &src, &mt, &mut Forward::eval());
            let r = g.value(enc.repr);
            reprs
                .index_axis_mut(Axis(0), i)
                .slice_mut(ndarray::s![..r.nrows(), ..])
                .assign(r);
        }
        Ok((logits, reprs))
    }

    /// Per-sentence DA predictions and per-word OK/BAD logits.
    pub fn qe_forward(&self, batch: &Batch) -> Result<(Vec<f64>, Vec<Array2<f64>>)> {
        if !self.qe_heads {
            return Err(Error::Mode("model has no QE heads".into()));
        }
        let mut da = Vec::new();
        let mut words = Vec::new();
        for i in 0..batch.source_ids.nrows() {
            let src = batch.row(&batch.source_ids, &batch.source_mask, i);
            let mt = batch.row(&batch.translation_ids, &batch.translation_mask, i);
            let mut g = Graph::inference(&self.params);
            let enc = self.encode(&mut g, &src, &mt, &mut Forward::eval());
            let rows: Vec<usize> = batch.word_starts[i].iter().map(|&s| enc.mt_rows.start + s).collect();
            let (sent, word) = self.qe_heads(&mut g, &enc, &rows)?;
            da.push(g.scalar(sent));
            words.push(g.value(word).clone());
        }
        Ok((da, words))
    }

    /// Log-probabilities of the next token after `prefix` (which starts with bos).
    pub fn next_log_probs(&self, memory: &Mat, prefix: &[usize]) -> Vec<f64> {
        let mut g = Graph::inference(&self.params);
        let mem = g.constant(memory.clone());
        let logits = self.decode(&mut g, mem, prefix, &mut Forward::eval());
        let row = g.value(logits).row(prefix.len() - 1).to_owned();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter().map(|v| v - lse).collect()
    }

    /// Fused encoder output of one example, for decoding.
    pub fn memory(&self, src: &[usize], mt: &[usize]) -> Mat {
        let mut g = Graph::inference(&self.params);
        let enc = self.encode(&mut g, src, mt, &mut Forward::eval());
        g.value(enc.repr).clone()
    }
}
