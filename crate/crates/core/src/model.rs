//! Transformer encoder over visual feature frames with four heads: word
//! classifier, CTC head, teacher-forced grapheme decoder, and the per-frame
//! audio-token projection.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::corpus::{Label, Sample};
use crate::error::{Error, Result};
use crate::losses::{self, LossBundle, TOKENS_PER_FRAME};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::seed;
use crate::tensor::{argmax, Mat};

const CHECKPOINT_MAGIC: &[u8; 4] = b"SVCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Architecture hyperparameters chosen by the user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_frames: usize,
    pub decoder_layers: usize,
    /// Append the word-boundary flag as an extra input feature.
    pub word_boundary: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            layers: 4,
            heads: 4,
            d_ff: 128,
            dropout: 0.1,
            max_frames: 256,
            decoder_layers: 2,
            word_boundary: true,
        }
    }
}

/// Full architecture: hyperparameters plus the data-derived sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub model: ModelConfig,
    pub visual_dim: usize,
    /// Audio token alphabet including the pad id.
    pub sync_vocab: usize,
    pub classes: usize,
    /// Grapheme alphabet size `G` (CTC adds a blank, the decoder BOS/EOS).
    pub graphemes: usize,
    /// Greedy decoding stops after this many graphemes.
    pub max_transcript: usize,
}

impl EncoderConfig {
    pub fn input_dim(&self) -> usize {
        self.visual_dim + usize::from(self.model.word_boundary)
    }

    pub fn bos(&self) -> usize {
        self.graphemes
    }

    pub fn eos(&self) -> usize {
        self.graphemes + 1
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |s: String| Err(Error::Config(s));
        if [m.d_model, m.layers, m.heads, m.d_ff, m.max_frames, self.visual_dim, self.sync_vocab, self.classes, self.graphemes]
            .contains(&0)
        {
            return bad("model dimensions must all be >= 1".into());
        }
        if m.d_model % m.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", m.d_model, m.heads));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad(format!("dropout {} outside [0, 1)", m.dropout));
        }
        Ok(())
    }
}

/// `layers[l][h]` is the `T × T` row-stochastic attention of head `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Mat>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncVariant {
    Off,
    Full,
    Masked,
}

/// How the per-sample objective is assembled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSetup {
    pub alpha: f64,
    pub lambda: f64,
    pub variant: SyncVariant,
}

/// Which scalar to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Word,
    Ctc,
    Lm,
    /// Full or masked sync loss, depending on the setup's variant.
    Sync,
    Task,
    Total,
}

struct Linear {
    w: ParamId,
    b: ParamId,
}

struct Norm {
    gain: ParamId,
    bias: ParamId,
}

struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

struct EncBlock {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

struct DecBlock {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross: Attn,
    ln3: Norm,
    ff1: Linear,
    ff2: Linear,
}

struct Handles {
    input: Linear,
    mask: ParamId,
    enc: Vec<EncBlock>,
    enc_ln: Norm,
    sync: Linear,
    cls: Linear,
    ctc: Linear,
    dec_embed: ParamId,
    dec: Vec<DecBlock>,
    dec_ln: Norm,
    dec_out: Linear,
}

pub struct Model {
    pub config: EncoderConfig,
    pub params: ParamStore,
    h: Handles,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model::from_params(self.config.clone(), self.params.clone()).expect("layout already validated")
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.params.num_scalars())
            .finish()
    }
}

/// Parameter names and shapes in canonical order.
fn layout(c: &EncoderConfig) -> Vec<(String, usize, usize)> {
    let d = c.model.d_model;
    let ff = c.model.d_ff;
    let mut out = Vec::new();
    let lin = |out: &mut Vec<(String, usize, usize)>, name: &str, i: usize, o: usize| {
        out.push((format!("{name}.weight"), i, o));
        out.push((format!("{name}.bias"), 1, o));
    };
    let norm = |out: &mut Vec<(String, usize, usize)>, name: &str| {
        out.push((format!("{name}.gain"), 1, d));
        out.push((format!("{name}.bias"), 1, d));
    };
    lin(&mut out, "input", c.input_dim(), d);
    out.push(("mask.embedding".into(), 1, d));
    for l in 0..c.model.layers {
        let p = format!("enc.{l}");
        norm(&mut out, &format!("{p}.ln1"));
        for m in ["q", "k", "v", "o"] {
            lin(&mut out, &format!("{p}.attn.{m}"), d, d);
        }
        norm(&mut out, &format!("{p}.ln2"));
        lin(&mut out, &format!("{p}.ff1"), d, ff);
        lin(&mut out, &format!("{p}.ff2"), ff, d);
    }
    norm(&mut out, "enc.final_ln");
    lin(&mut out, "sync", d, TOKENS_PER_FRAME * c.sync_vocab);
    lin(&mut out, "cls", d, c.classes);
    lin(&mut out, "ctc", d, c.graphemes + 1);
    out.push(("dec.embed".into(), c.graphemes + 2, d));
    for l in 0..c.model.decoder_layers {
        let p = format!("dec.{l}");
        norm(&mut out, &format!("{p}.ln1"));
        for m in ["q", "k", "v", "o"] {
            lin(&mut out, &format!("{p}.self.{m}"), d, d);
        }
        norm(&mut out, &format!("{p}.ln2"));
        for m in ["q", "k", "v", "o"] {
            lin(&mut out, &format!("{p}.cross.{m}"), d, d);
        }
        norm(&mut out, &format!("{p}.ln3"));
        lin(&mut out, &format!("{p}.ff1"), d, ff);
        lin(&mut out, &format!("{p}.ff2"), ff, d);
    }
    norm(&mut out, "dec.final_ln");
    lin(&mut out, "dec.out", d, c.graphemes + 2);
    out
}

fn resolve(store: &ParamStore, c: &EncoderConfig) -> Handles {
    let id = |n: String| store.id(&n).unwrap_or_else(|| panic!("missing parameter {n}"));
    let lin = |n: &str| Linear {
        w: id(format!("{n}.weight")),
        b: id(format!("{n}.bias")),
    };
    let norm = |n: &str| Norm {
        gain: id(format!("{n}.gain")),
        bias: id(format!("{n}.bias")),
    };
    let attn = |n: &str| Attn {
        q: lin(&format!("{n}.q")),
        k: lin(&format!("{n}.k")),
        v: lin(&format!("{n}.v")),
        o: lin(&format!("{n}.o")),
    };
    Handles {
        input: lin("input"),
        mask: id("mask.embedding".into()),
        enc: (0..c.model.layers)
            .map(|l| EncBlock {
                ln1: norm(&format!("enc.{l}.ln1")),
                attn: attn(&format!("enc.{l}.attn")),
                ln2: norm(&format!("enc.{l}.ln2")),
                ff1: lin(&format!("enc.{l}.ff1")),
                ff2: lin(&format!("enc.{l}.ff2")),
            })
            .collect(),
        enc_ln: norm("enc.final_ln"),
        sync: lin("sync"),
        cls: lin("cls"),
        ctc: lin("ctc"),
        dec_embed: id("dec.embed".into()),
        dec: (0..c.model.decoder_layers)
            .map(|l| DecBlock {
                ln1: norm(&format!("dec.{l}.ln1")),
                self_attn: attn(&format!("dec.{l}.self")),
                ln2: norm(&format!("dec.{l}.ln2")),
                cross: attn(&format!("dec.{l}.cross")),
                ln3: norm(&format!("dec.{l}.ln3")),
                ff1: lin(&format!("dec.{l}.ff1")),
                ff2: lin(&format!("dec.{l}.ff2")),
            })
            .collect(),
        dec_ln: norm("dec.final_ln"),
        dec_out: lin("dec.out"),
    }
}

/// Sinusoidal position table, `len × d`.
pub fn positional_encoding(len: usize, d: usize) -> Mat {
    let mut pe = Mat::zeros(len, d);
    for t in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = t as f64 * rate;
            pe[(t, i)] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    pe
}

/// Per-call forward state: dropout randomness (train mode only) and
/// whether to keep encoder attention maps.
struct Pass<'r> {
    dropout: Option<(f64, &'r mut ChaCha8Rng)>,
    record: Option<Vec<Vec<NodeId>>>,
}

impl Pass<'_> {
    fn eval(record: bool) -> Self {
        Pass {
            dropout: None,
            record: record.then(Vec::new),
        }
    }
}

impl Model {
    pub fn new(config: EncoderConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(init_seed, &[seed::INIT]);
        let mut store = ParamStore::new();
        for (name, rows, cols) in layout(&config) {
            let value = if name.ends_with(".gain") {
                Mat::filled(rows, cols, 1.0)
            } else if name.ends_with(".bias") {
                Mat::zeros(rows, cols)
            } else {
                let std = if name == "dec.embed" || name == "mask.embedding" {
                    1.0
                } else {
                    1.0 / (rows as f64).sqrt()
                };
                let data = (0..rows * cols)
                    .map(|_| std * { let z: f64 = StandardNormal.sample(&mut rng); z })
                    .collect();
                Mat::from_vec(rows, cols, data)
            };
            store.add(name, value);
        }
        store.round_to_f32();
        Model::from_params(config, store)
    }

    /// Wraps an existing parameter store after checking it against `config`.
    pub fn from_params(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let want = layout(&config);
        if want.len() != params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} tensors, found {}",
                want.len(),
                params.len()
            )));
        }
        for ((name, rows, cols), (_, have_name, t)) in want.iter().zip(params.iter()) {
            if name != have_name || (*rows, *cols) != t.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor {have_name} {:?} where {name} ({rows}, {cols}) was expected",
                    t.shape()
                )));
            }
        }
        let h = resolve(&params, &config);
        Ok(Model { config, params, h })
    }

    /// `T × input_dim` model input for a sample (frames, then the WB flag).
    pub fn input_frames(&self, sample: &Sample) -> Result<Mat> {
        if sample.visual_dim != self.config.visual_dim {
            return Err(Error::ShapeMismatch(format!(
                "sample has {} visual features, model expects {}",
                sample.visual_dim, self.config.visual_dim
            )));
        }
        let cols = self.config.input_dim();
        let mut m = Mat::zeros(sample.num_frames, cols);
        for t in 0..sample.num_frames {
            let row = m.row_mut(t);
            for (o, &v) in row.iter_mut().zip(sample.frame(t)) {
                *o = v as f64;
            }
            if self.config.model.word_boundary {
                row[cols - 1] = if sample.word_boundary[t] { 1.0 } else { 0.0 };
            }
        }
        Ok(m)
    }

    fn linear(&self, g: &mut Graph<'_>, x: NodeId, l: &Linear) -> NodeId {
        let w = g.param(l.w);
        let b = g.param(l.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph<'_>, x: NodeId, n: &Norm) -> NodeId {
        let gain = g.param(n.gain);
        let bias = g.param(n.bias);
        g.layer_norm(x, gain, bias)
    }

    fn dropout(&self, g: &mut Graph<'_>, x: NodeId, pass: &mut Pass<'_>) -> NodeId {
        match &mut pass.dropout {
            Some((p, rng)) if *p > 0.0 => {
                let (rows, cols) = g.value(x).shape();
                let keep = 1.0 / (1.0 - *p);
                let mask = (0..rows * cols)
                    .map(|_| if rng.gen::<f64>() < *p { 0.0 } else { keep })
                    .collect();
                g.mul_const(x, Mat::from_vec(rows, cols, mask))
            }
            _ => x,
        }
    }

    fn attention(
        &self,
        g: &mut Graph<'_>,
        query: NodeId,
        memory: NodeId,
        a: &Attn,
        causal: bool,
        probs: Option<&mut Vec<NodeId>>,
    ) -> NodeId {
        let heads = self.config.model.heads;
        let dh = self.config.model.d_model / heads;
        let q = self.linear(g, query, &a.q);
        let k = self.linear(g, memory, &a.k);
        let v = self.linear(g, memory, &a.v);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut kept = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.col_slice(q, h * dh, dh);
            let kh = g.col_slice(k, h * dh, dh);
            let vh = g.col_slice(v, h * dh, dh);
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let p = g.softmax(scores, causal);
            kept.push(p);
            outs.push(g.matmul(p, vh));
        }
        if let Some(dst) = probs {
            dst.extend(kept);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(outs) };
        self.linear(g, cat, &a.o)
    }

    fn masked_input(&self, g: &mut Graph<'_>, frames: NodeId, mask: &[bool]) -> NodeId {
        let emb = g.param(self.h.mask);
        let w_in = g.param(self.h.input.w);
        // Mask embedding mapped back to input space through the input projection.
        let row = g.matmul_bt(emb, w_in);
        g.replace_rows(frames, row, mask.to_vec())
    }

    fn encoder(&self, g: &mut Graph<'_>, x: NodeId, pass: &mut Pass<'_>) -> Result<NodeId> {
        let t_len = g.value(x).rows();
        if t_len == 0 {
            return Err(Error::InvalidArgument("empty frame sequence".into()));
        }
        if t_len > self.config.model.max_frames {
            return Err(Error::TooManyFrames {
                frames: t_len,
                max: self.config.model.max_frames,
            });
        }
        let mut h = self.linear(g, x, &self.h.input);
        h = g.add_const(h, &positional_encoding(t_len, self.config.model.d_model));
        h = self.dropout(g, h, pass);
        for block in &self.h.enc {
            let a = self.norm(g, h, &block.ln1);
            let mut probs = Vec::new();
            let att = self.attention(g, a, a, &block.attn, false, Some(&mut probs));
            if let Some(rec) = &mut pass.record {
                rec.push(probs);
            }
            let att = self.dropout(g, att, pass);
            h = g.add(h, att);
            let f = self.norm(g, h, &block.ln2);
            let f = self.linear(g, f, &block.ff1);
            let f = g.gelu(f);
            let f = self.linear(g, f, &block.ff2);
            let f = self.dropout(g, f, pass);
            h = g.add(h, f);
        }
        Ok(self.norm(g, h, &self.h.enc_ln))
    }

    fn pool_weights(wb: Option<&[bool]>, t_len: usize) -> Result<Vec<f64>> {
        match wb {
            None => Ok(vec![1.0 / t_len as f64; t_len]),
            Some(mask) => {
                if mask.len() != t_len {
                    return Err(Error::ShapeMismatch(format!("{} WB flags for {t_len} frames", mask.len())));
                }
                let n = mask.iter().filter(|&&m| m).count();
                if n == 0 {
                    return Err(Error::EmptyMask);
                }
                Ok(mask.iter().map(|&m| if m { 1.0 / n as f64 } else { 0.0 }).collect())
            }
        }
    }

    fn classifier(&self, g: &mut Graph<'_>, h: NodeId, wb: Option<&[bool]>) -> Result<NodeId> {
        let weights = Self::pool_weights(wb, g.value(h).rows())?;
        let pooled = g.weighted_row_sum(h, weights);
        Ok(self.linear(g, pooled, &self.h.cls))
    }

    fn decoder(&self, g: &mut Graph<'_>, memory: NodeId, prefix: &[usize], pass: &mut Pass<'_>) -> Result<NodeId> {
        let vocab = self.config.graphemes + 2;
        if prefix.first() != Some(&self.config.bos()) {
            return Err(Error::InvalidArgument("decoder prefix must start with BOS".into()));
        }
        if let Some(&bad) = prefix.iter().find(|&&y| y >= vocab) {
            return Err(Error::LabelOutOfRange { label: bad, classes: vocab });
        }
        let table = g.param(self.h.dec_embed);
        let mut x = g.gather(table, prefix.to_vec());
        x = g.add_const(x, &positional_encoding(prefix.len(), self.config.model.d_model));
        x = self.dropout(g, x, pass);
        for block in &self.h.dec {
            let a = self.norm(g, x, &block.ln1);
            let a = self.attention(g, a, a, &block.self_attn, true, None);
            let a = self.dropout(g, a, pass);
            x = g.add(x, a);
            let c = self.norm(g, x, &block.ln2);
            let c = self.attention(g, c, memory, &block.cross, false, None);
            let c = self.dropout(g, c, pass);
            x = g.add(x, c);
            let f = self.norm(g, x, &block.ln3);
            let f = self.linear(g, f, &block.ff1);
            let f = g.gelu(f);
            let f = self.linear(g, f, &block.ff2);
            let f = self.dropout(g, f, pass);
            x = g.add(x, f);
        }
        let x = self.norm(g, x, &self.h.dec_ln);
        Ok(self.linear(g, x, &self.h.dec_out))
    }

    fn check_frames(&self, frames: &Mat) -> Result<()> {
        if frames.cols() != self.config.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "frames have {} features, model expects {}",
                frames.cols(),
                self.config.input_dim()
            )));
        }
        Ok(())
    }

    fn check_hidden(&self, h: &Mat) -> Result<()> {
        if h.cols() != self.config.model.d_model || h.rows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "hidden states are {}x{}, expected Tx{}",
                h.rows(),
                h.cols(),
                self.config.model.d_model
            )));
        }
        Ok(())
    }

    /// Eval-mode encoder pass.
    pub fn encode(&self, frames: &Mat, record_attention: bool) -> Result<(Mat, Option<AttentionRecord>)> {
        self.check_frames(frames)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(frames.clone());
        let mut pass = Pass::eval(record_attention);
        let h = self.encoder(&mut g, x, &mut pass)?;
        let record = pass.record.map(|layers| AttentionRecord {
            layers: layers
                .into_iter()
                .map(|heads| heads.into_iter().map(|p| g.value(p).clone()).collect())
                .collect(),
        });
        Ok((g.value(h).clone(), record))
    }

    /// `T × (4·V_sync)` logits; frame `t`, slot `r` own columns `r·V_sync..(r+1)·V_sync`.
    pub fn project_sync(&self, h: &Mat) -> Result<Mat> {
        self.check_hidden(h)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(h.clone());
        let y = self.linear(&mut g, x, &self.h.sync);
        Ok(g.value(y).clone())
    }

    pub fn classify(&self, h: &Mat, word_boundary: Option<&[bool]>) -> Result<Vec<f64>> {
        self.check_hidden(h)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(h.clone());
        let y = self.classifier(&mut g, x, word_boundary)?;
        Ok(g.value(y).data().to_vec())
    }

    /// `T × (G+1)` logits, blank last.
    pub fn ctc_head(&self, h: &Mat) -> Result<Mat> {
        self.check_hidden(h)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(h.clone());
        let y = self.linear(&mut g, x, &self.h.ctc);
        Ok(g.value(y).clone())
    }

    /// Teacher-forced decoder logits, one row per prefix position.
    pub fn decode_lm(&self, h: &Mat, prefix: &[usize]) -> Result<Mat> {
        self.check_hidden(h)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(h.clone());
        let y = self.decoder(&mut g, x, prefix, &mut Pass::eval(false))?;
        Ok(g.value(y).clone())
    }

    pub fn apply_frame_mask(&self, frames: &Mat, mask: &[bool]) -> Result<Mat> {
        self.check_frames(frames)?;
        if mask.len() != frames.rows() {
            return Err(Error::ShapeMismatch(format!("{} mask flags for {} frames", mask.len(), frames.rows())));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(frames.clone());
        let y = self.masked_input(&mut g, x, mask);
        Ok(g.value(y).clone())
    }

    /// Greedy autoregressive transcription; stops at EOS or `max_transcript`.
    pub fn greedy_transcribe(&self, frames: &Mat) -> Result<Vec<u16>> {
        let (h, _) = self.encode(frames, false)?;
        let mut prefix = vec![self.config.bos()];
        let mut out = Vec::new();
        while out.len() < self.config.max_transcript {
            let logits = self.decode_lm(&h, &prefix)?;
            let last = logits.row(logits.rows() - 1);
            // BOS is never a valid continuation.
            let mut scores = last.to_vec();
            scores[self.config.bos()] = f64::NEG_INFINITY;
            let next = argmax(&scores);
            if next == self.config.eos() {
                break;
            }
            out.push(next as u16);
            prefix.push(next);
        }
        Ok(out)
    }

    /// Word-mode prediction for a sample.
    pub fn predict_word(&self, sample: &Sample) -> Result<usize> {
        let frames = self.input_frames(sample)?;
        let (h, _) = self.encode(&frames, false)?;
        let wb = self.config.model.word_boundary.then_some(sample.word_boundary.as_slice());
        Ok(argmax(&self.classify(&h, wb)?))
    }

    /// Builds the training graph for one sample and differentiates `term`.
    ///
    /// `dropout_rng` switches on train mode. `frame_mask` is required for the
    /// masked variant and ignored otherwise.
    pub fn loss_and_grad(
        &self,
        sample: &Sample,
        setup: &LossSetup,
        term: LossTerm,
        dropout_rng: Option<&mut ChaCha8Rng>,
        frame_mask: Option<&[bool]>,
        pad_id: u16,
    ) -> Result<(LossBundle, Gradients)> {
        let mut g = Graph::new(&self.params);
        let (bundle, root) = self.build_loss(&mut g, sample, setup, term, dropout_rng, frame_mask, pad_id)?;
        Ok((bundle, g.backward(root)))
    }

    /// Same as [`Model::loss_and_grad`] without the backward pass.
    pub fn loss_value(
        &self,
        sample: &Sample,
        setup: &LossSetup,
        term: LossTerm,
        frame_mask: Option<&[bool]>,
        pad_id: u16,
    ) -> Result<(LossBundle, f64)> {
        let mut g = Graph::new(&self.params);
        let (bundle, root) = self.build_loss(&mut g, sample, setup, term, None, frame_mask, pad_id)?;
        Ok((bundle, g.scalar(root)))
    }

    #[allow(clippy::too_many_arguments)]
    fn build_loss(
        &self,
        g: &mut Graph<'_>,
        sample: &Sample,
        setup: &LossSetup,
        term: LossTerm,
        dropout_rng: Option<&mut ChaCha8Rng>,
        frame_mask: Option<&[bool]>,
        pad_id: u16,
    ) -> Result<(LossBundle, NodeId)> {
        let frames = self.input_frames(sample)?;
        let mut pass = Pass {
            dropout: dropout_rng.map(|r| (self.config.model.dropout, r)),
            record: None,
        };
        let mut x = g.input(frames);
        let mask = match setup.variant {
            SyncVariant::Masked => {
                let m = frame_mask.ok_or(Error::EmptyMask)?;
                if m.len() != sample.num_frames {
                    return Err(Error::ShapeMismatch(format!("{} mask flags for {} frames", m.len(), sample.num_frames)));
                }
                x = self.masked_input(g, x, m);
                Some(m)
            }
            _ => None,
        };
        let h = self.encoder(g, x, &mut pass)?;

        let mut bundle = LossBundle {
            alpha: setup.alpha,
            lambda: setup.lambda,
            ..LossBundle::default()
        };
        let mut word = None;
        let mut ctc = None;
        let mut lm = None;
        let task = match &sample.label {
            Label::Word(w) => {
                let wb = self.config.model.word_boundary.then_some(sample.word_boundary.as_slice());
                let logits = self.classifier(g, h, wb)?;
                let l = losses::word_ce(g.value(logits).data(), *w as usize)?;
                bundle.l_word = Some(l.value);
                bundle.l_task = l.value;
                let node = g.loss(logits, l.value, l.grad);
                word = Some(node);
                node
            }
            Label::Graphemes(ys) => {
                let target: Vec<usize> = ys.iter().map(|&y| y as usize).collect();
                let ctc_logits = self.linear(g, h, &self.h.ctc);
                let lc = losses::ctc_loss(g.value(ctc_logits), &target)?;
                let ctc_node = g.loss(ctc_logits, lc.value, lc.grad);

                let mut prefix = Vec::with_capacity(target.len() + 1);
                prefix.push(self.config.bos());
                prefix.extend(&target);
                let mut next = target.clone();
                next.push(self.config.eos());
                let dec_logits = self.decoder(g, h, &prefix, &mut pass)?;
                let ll = losses::lm_loss(g.value(dec_logits), &next)?;
                let lm_node = g.loss(dec_logits, ll.value, ll.grad);

                let value = losses::task_loss(lc.value, ll.value, setup.alpha)?;
                bundle.l_ctc = Some(lc.value);
                bundle.l_lm = Some(ll.value);
                bundle.l_task = value;
                ctc = Some(ctc_node);
                lm = Some(lm_node);
                g.combine(vec![(ctc_node, setup.alpha), (lm_node, 1.0 - setup.alpha)], value)
            }
        };

        let (sync, lambda) = match setup.variant {
            SyncVariant::Off => (None, 0.0),
            variant => {
                let logits = self.linear(g, h, &self.h.sync);
                let l = match variant {
                    SyncVariant::Masked => losses::masked_sync_loss(g.value(logits), &sample.token_grid, mask.unwrap(), pad_id)?,
                    _ => losses::sync_loss(g.value(logits), &sample.token_grid, pad_id)?,
                };
                bundle.l_sync = l.value;
                (Some(g.loss(logits, l.value, l.grad)), setup.lambda)
            }
        };
        bundle.l_total = losses::total_loss(bundle.l_task, bundle.l_sync, lambda)?;
        let mut terms = vec![(task, 1.0)];
        if let Some(s) = sync {
            terms.push((s, lambda));
        }
        let total = g.combine(terms, bundle.l_total);

        let missing = |what: &str| Error::InvalidArgument(format!("{what} loss is not defined for this sample"));
        let root = match term {
            LossTerm::Word => word.ok_or_else(|| missing("word"))?,
            LossTerm::Ctc => ctc.ok_or_else(|| missing("CTC"))?,
            LossTerm::Lm => lm.ok_or_else(|| missing("LM"))?,
            LossTerm::Sync => sync.ok_or_else(|| missing("sync"))?,
            LossTerm::Task => task,
            LossTerm::Total => total,
        };
        Ok((bundle, root))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    version: u32,
    config: EncoderConfig,
    seed: u64,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A model plus the seed and free-form run metadata it was saved with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub meta: serde_json::Value,
}

/// `SVCK`, u32 header length, JSON header (config echo, seed, tensor
/// manifest), then each tensor as little-endian `f32`.
pub fn save_checkpoint(path: &Path, model: &Model, seed: u64, meta: &serde_json::Value) -> Result<()> {
    let mut offset = 0u64;
    let tensors = model
        .params
        .iter()
        .map(|(_, name, t)| {
            let e = TensorEntry {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
                offset,
            };
            offset += 4 * t.len() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        seed,
        meta: meta.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend(CHECKPOINT_MAGIC);
    out.extend((header.len() as u32).to_le_bytes());
    out.extend(&header);
    for (_, _, t) in model.params.iter() {
        for &v in t.data() {
            out.extend((v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::corrupt(path, "missing checkpoint magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| Error::corrupt(path, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let block = &bytes[8 + hlen..];
    let mut store = ParamStore::new();
    for e in &header.tensors {
        let start = e.offset as usize;
        let end = start + 4 * e.rows * e.cols;
        let raw = block
            .get(start..end)
            .ok_or_else(|| Error::corrupt(path, format!("tensor {} runs past end of file", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        store.add(e.name.clone(), Mat::from_vec(e.rows, e.cols, data));
    }
    let model = Model::from_params(header.config, store)?;
    Ok(Checkpoint {
        model,
        seed: header.seed,
        meta: header.meta,
    })
}
