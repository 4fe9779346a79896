//! Synthetic audiovisual corpus.
//!
//! A [`World`] fixes a phoneme inventory, a many-to-one phoneme→viseme map and
//! a lexicon in which designated word pairs share their viseme sequence
//! (homophenes). Rendering turns an utterance into noisy, smoothed visual
//! feature frames at 25 fps plus four audio tokens per frame.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::levenshtein;
use crate::error::{Error, Result};
use crate::losses::TOKENS_PER_FRAME;
use crate::quantizer::{align_tokens, quantize, Codebook};
use crate::seed;
use crate::tensor::Mat;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.bin";
pub const WORLD_FILE: &str = "world.json";

const GRAPHEME_SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Word,
    Sentence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub mode: Mode,
    pub train: usize,
    pub eval: usize,
    /// Minimum eval samples per word that belongs to a homophene pair.
    pub eval_per_homophene: usize,
    pub min_sentence_words: usize,
    pub max_sentence_words: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            mode: Mode::Word,
            train: 600,
            eval: 500,
            eval_per_homophene: 20,
            min_sentence_words: 2,
            max_sentence_words: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub phonemes: usize,
    pub visemes: usize,
    pub words: usize,
    pub homophene_pairs: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    /// Upper bound on how many phonemes differ inside a homophene pair.
    pub max_substitutions: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub frames_per_phoneme: usize,
    pub visual_noise: f64,
    /// Scale of the phoneme-specific visual offset added on top of the
    /// viseme embedding. Zero makes homophenes visually indistinguishable.
    pub phoneme_cue: f64,
    pub audio_noise: f64,
    /// Random lexicon words rendered on each side of the target in word mode.
    pub context_words: usize,
    pub dataset: DatasetConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            phonemes: 20,
            visemes: 8,
            words: 60,
            homophene_pairs: 10,
            min_word_len: 2,
            max_word_len: 6,
            max_substitutions: 3,
            visual_dim: 16,
            audio_dim: 16,
            frames_per_phoneme: 3,
            visual_noise: 0.5,
            phoneme_cue: 0.2,
            audio_noise: 0.2,
            context_words: 1,
            dataset: DatasetConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    /// `viseme_of[p]` for every phoneme `p`.
    pub viseme_of: Vec<usize>,
    /// Phoneme `p` is spelled with grapheme `p`; grapheme `phonemes` is the
    /// word separator.
    pub lexicon: Vec<Vec<usize>>,
    pub homophenes: Vec<(usize, usize)>,
    pub viseme_embeddings: Mat,
    pub phoneme_cues: Mat,
    pub audio_embeddings: Mat,
    /// One offset per 10 ms audio slot inside a video frame.
    pub audio_offsets: Mat,
    fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HomophenePair {
    pub word1: usize,
    pub word2: usize,
    pub grapheme_distance: usize,
    pub viseme_identical: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Utterance {
    Word(usize),
    Sentence(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Word(u16),
    Graphemes(Vec<u16>),
}

impl Label {
    pub fn as_codes(&self) -> Vec<u16> {
        match self {
            Label::Word(w) => vec![*w],
            Label::Graphemes(g) => g.clone(),
        }
    }

    pub fn word(&self) -> Option<usize> {
        match self {
            Label::Word(w) => Some(*w as usize),
            Label::Graphemes(_) => None,
        }
    }

    pub fn graphemes(&self) -> Option<&[u16]> {
        match self {
            Label::Word(_) => None,
            Label::Graphemes(g) => Some(g),
        }
    }
}

/// One rendered clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub num_frames: usize,
    pub visual_dim: usize,
    /// Row-major `num_frames × visual_dim`.
    pub visual_frames: Vec<f32>,
    pub word_boundary: Vec<bool>,
    pub label: Label,
    /// Row-major `num_frames × 4`.
    pub token_grid: Vec<u16>,
}

impl Sample {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.visual_frames[t * self.visual_dim..(t + 1) * self.visual_dim]
    }

    pub fn tokens(&self, t: usize) -> &[u16] {
        &self.token_grid[t * TOKENS_PER_FRAME..(t + 1) * TOKENS_PER_FRAME]
    }
}

/// Where per-frame audio tokens come from.
#[derive(Clone, Copy, Debug)]
pub enum TokenSource<'a> {
    /// Each phoneme owns a fixed 4-token signature drawn from `[0, vocab)`.
    PhonemeTable { vocab: usize },
    /// Synthesized 100 Hz audio features quantized with a fitted codebook.
    Codebook(&'a Codebook),
}

impl TokenSource<'_> {
    /// Size of the token alphabet excluding the pad id.
    pub fn vocab(&self) -> usize {
        match self {
            TokenSource::PhonemeTable { vocab } => *vocab,
            TokenSource::Codebook(cb) => cb.size(),
        }
    }

    pub fn pad_id(&self) -> u16 {
        self.vocab() as u16
    }
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Mat {
    let data = (0..rows * cols)
        .map(|_| scale * { let z: f64 = StandardNormal.sample(rng); z })
        .collect::<Vec<f64>>();
    Mat::from_vec(rows, cols, data)
}

fn viseme_seq(viseme_of: &[usize], word: &[usize]) -> Vec<usize> {
    word.iter().map(|&p| viseme_of[p]).collect()
}

/// Builds a deterministic world from `(config, seed)`.
pub fn build_world(config: &WorldConfig, world_seed: u64) -> Result<World> {
    let c = config;
    let bad = |msg: String| Err(Error::InfeasibleConfig(msg));
    if c.visemes == 0 || c.phonemes < c.visemes {
        return bad(format!("need phonemes ({}) >= visemes ({}) >= 1", c.phonemes, c.visemes));
    }
    if c.phonemes > GRAPHEME_SYMBOLS.len() {
        return bad(format!("at most {} phonemes supported", GRAPHEME_SYMBOLS.len()));
    }
    if c.words < 2 {
        return bad("lexicon needs at least 2 words".into());
    }
    if c.min_word_len == 0 || c.min_word_len > c.max_word_len {
        return bad(format!("bad word length range {}..={}", c.min_word_len, c.max_word_len));
    }
    if 2 * c.homophene_pairs > c.words {
        return bad(format!("{} homophene pairs need more than {} words", c.homophene_pairs, c.words));
    }
    if c.visual_dim == 0 || c.audio_dim == 0 || c.frames_per_phoneme == 0 {
        return bad("dimensions and frames_per_phoneme must be positive".into());
    }
    if c.homophene_pairs > 0 && c.max_substitutions == 0 {
        return bad("max_substitutions must be positive when homophene pairs are requested".into());
    }

    let mut rng = seed::rng(world_seed, &[seed::WORLD]);

    let mut viseme_of: Vec<usize> = (0..c.visemes).collect();
    viseme_of.extend((c.visemes..c.phonemes).map(|_| rng.gen_range(0..c.visemes)));
    viseme_of.shuffle(&mut rng);

    let mut preimages: Vec<Vec<usize>> = vec![Vec::new(); c.visemes];
    for (p, &v) in viseme_of.iter().enumerate() {
        preimages[v].push(p);
    }
    let ambiguous: Vec<usize> = (0..c.phonemes)
        .filter(|&p| preimages[viseme_of[p]].len() >= 2)
        .collect();
    if c.homophene_pairs > 0 && ambiguous.is_empty() {
        return bad("phoneme→viseme map is injective; no homophenes can exist".into());
    }

    let mut lexicon: Vec<Vec<usize>> = Vec::with_capacity(c.words);
    let mut seen_visemes: HashSet<Vec<usize>> = HashSet::new();
    let mut homophenes = Vec::with_capacity(c.homophene_pairs);

    for _ in 0..c.homophene_pairs {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let len = rng.gen_range(c.min_word_len..=c.max_word_len);
            let mut w1: Vec<usize> = (0..len).map(|_| rng.gen_range(0..c.phonemes)).collect();
            let forced = rng.gen_range(0..len);
            w1[forced] = *ambiguous.choose(&mut rng).unwrap();
            let mut slots: Vec<usize> = (0..len)
                .filter(|&i| preimages[viseme_of[w1[i]]].len() >= 2)
                .collect();
            slots.shuffle(&mut rng);
            let n_sub = rng.gen_range(1..=slots.len().min(c.max_substitutions));
            let mut w2 = w1.clone();
            for &i in &slots[..n_sub] {
                let options: Vec<usize> = preimages[viseme_of[w1[i]]]
                    .iter()
                    .copied()
                    .filter(|&p| p != w1[i])
                    .collect();
                w2[i] = *options.choose(&mut rng).unwrap();
            }
            let vs = viseme_seq(&viseme_of, &w1);
            if seen_visemes.contains(&vs) {
                continue;
            }
            seen_visemes.insert(vs);
            homophenes.push((lexicon.len(), lexicon.len() + 1));
            lexicon.push(w1);
            lexicon.push(w2);
            placed = true;
            break;
        }
        if !placed {
            return bad("could not place the requested homophene pairs".into());
        }
    }

    while lexicon.len() < c.words {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let len = rng.gen_range(c.min_word_len..=c.max_word_len);
            let w: Vec<usize> = (0..len).map(|_| rng.gen_range(0..c.phonemes)).collect();
            let vs = viseme_seq(&viseme_of, &w);
            if seen_visemes.insert(vs) {
                lexicon.push(w);
                placed = true;
                break;
            }
        }
        if !placed {
            return bad(format!(
                "could not find {} visually distinct words in the configured space",
                c.words
            ));
        }
    }

    let viseme_embeddings = gaussian(c.visemes, c.visual_dim, 1.0, &mut rng);
    let phoneme_cues = gaussian(c.phonemes, c.visual_dim, c.phoneme_cue, &mut rng);
    let audio_embeddings = gaussian(c.phonemes, c.audio_dim, 1.0, &mut rng);
    let audio_offsets = gaussian(TOKENS_PER_FRAME, c.audio_dim, 0.5, &mut rng);

    let mut world = World {
        config: c.clone(),
        seed: world_seed,
        viseme_of,
        lexicon,
        homophenes,
        viseme_embeddings,
        phoneme_cues,
        audio_embeddings,
        audio_offsets,
        fingerprint: String::new(),
    };
    world.fingerprint = world.compute_fingerprint();
    Ok(world)
}

impl World {
    pub fn num_phonemes(&self) -> usize {
        self.config.phonemes
    }

    pub fn num_words(&self) -> usize {
        self.lexicon.len()
    }

    /// Grapheme alphabet size, including the word separator.
    pub fn num_graphemes(&self) -> usize {
        self.config.phonemes + 1
    }

    pub fn separator(&self) -> u16 {
        self.config.phonemes as u16
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn graphemes(&self, word: usize) -> Vec<u16> {
        self.lexicon[word].iter().map(|&p| p as u16).collect()
    }

    pub fn grapheme_char(&self, g: u16) -> char {
        if g == self.separator() {
            ' '
        } else {
            GRAPHEME_SYMBOLS.as_bytes()[g as usize] as char
        }
    }

    pub fn spell(&self, word: usize) -> String {
        self.graphemes(word).iter().map(|&g| self.grapheme_char(g)).collect()
    }

    /// Grapheme transcript of a word sequence, words joined by the separator.
    pub fn transcript(&self, words: &[usize]) -> Vec<u16> {
        let mut out = Vec::new();
        for (i, &w) in words.iter().enumerate() {
            if i > 0 {
                out.push(self.separator());
            }
            out.extend(self.graphemes(w));
        }
        out
    }

    pub fn homophene_words(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.homophenes.iter().flat_map(|&(a, b)| [a, b]).collect();
        out.sort_unstable();
        out
    }

    pub fn viseme_sequence(&self, word: usize) -> Vec<usize> {
        viseme_seq(&self.viseme_of, &self.lexicon[word])
    }

    /// 4-token signature per phoneme for [`TokenSource::PhonemeTable`];
    /// signatures are pairwise distinct whenever `vocab^4 >= phonemes`.
    pub fn phoneme_token_table(&self, vocab: usize) -> Vec<[u16; TOKENS_PER_FRAME]> {
        let mut rng = seed::rng(self.seed, &[seed::TOKEN_TABLE, vocab as u64]);
        let mut seen = HashSet::new();
        let mut table = Vec::with_capacity(self.num_phonemes());
        let capacity = (vocab as f64).powi(TOKENS_PER_FRAME as i32);
        for _ in 0..self.num_phonemes() {
            loop {
                let mut row = [0u16; TOKENS_PER_FRAME];
                for r in &mut row {
                    *r = rng.gen_range(0..vocab) as u16;
                }
                if seen.insert(row) || (seen.len() as f64) >= capacity {
                    table.push(row);
                    break;
                }
            }
        }
        table
    }

    /// One 10 ms audio feature vector for `phoneme` at slot `slot` of its frame.
    pub fn audio_feature(&self, phoneme: usize, slot: usize, rng: &mut impl Rng) -> Vec<f64> {
        let base = self.audio_embeddings.row(phoneme);
        let off = self.audio_offsets.row(slot % TOKENS_PER_FRAME);
        base.iter()
            .zip(off)
            .map(|(b, o)| b + o + self.config.audio_noise * { let z: f64 = StandardNormal.sample(rng); z })
            .collect()
    }

    /// `n × audio_dim` features drawn uniformly over phonemes and slots, for
    /// codebook fitting.
    pub fn sample_audio_features(&self, n: usize, feature_seed: u64) -> Mat {
        let mut rng = seed::rng(feature_seed, &[seed::AUDIO_FIT]);
        let mut data = Vec::with_capacity(n * self.config.audio_dim);
        for _ in 0..n {
            let p = rng.gen_range(0..self.num_phonemes());
            let slot = rng.gen_range(0..TOKENS_PER_FRAME);
            data.extend(self.audio_feature(p, slot, &mut rng));
        }
        Mat::from_vec(n, self.config.audio_dim, data)
    }

    fn compute_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let c = &self.config;
        for v in [
            c.phonemes,
            c.visemes,
            c.words,
            c.visual_dim,
            c.audio_dim,
            c.frames_per_phoneme,
            c.context_words,
        ] {
            h.update((v as u64).to_le_bytes());
        }
        for v in [c.visual_noise, c.phoneme_cue, c.audio_noise] {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update(self.seed.to_le_bytes());
        for &v in &self.viseme_of {
            h.update((v as u64).to_le_bytes());
        }
        for w in &self.lexicon {
            h.update((w.len() as u64).to_le_bytes());
            for &p in w {
                h.update((p as u64).to_le_bytes());
            }
        }
        for &(a, b) in &self.homophenes {
            h.update((a as u64).to_le_bytes());
            h.update((b as u64).to_le_bytes());
        }
        for m in [
            &self.viseme_embeddings,
            &self.phoneme_cues,
            &self.audio_embeddings,
            &self.audio_offsets,
        ] {
            for v in m.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Every designated homophene pair with its grapheme edit distance.
pub fn homophene_pairs(world: &World) -> Vec<HomophenePair> {
    world
        .homophenes
        .iter()
        .map(|&(a, b)| HomophenePair {
            word1: a,
            word2: b,
            grapheme_distance: levenshtein(&world.graphemes(a), &world.graphemes(b)),
            viseme_identical: world.viseme_sequence(a) == world.viseme_sequence(b),
        })
        .collect()
}

/// Centered moving average of width 3 along time; edges average the frames
/// that exist.
pub fn smooth_frames(frames: &Mat) -> Mat {
    let (t_len, dim) = frames.shape();
    let mut out = Mat::zeros(t_len, dim);
    for t in 0..t_len {
        let lo = t.saturating_sub(1);
        let hi = (t + 1).min(t_len - 1);
        let n = (hi - lo + 1) as f64;
        for d in 0..dim {
            out[(t, d)] = (lo..=hi).map(|s| frames[(s, d)]).sum::<f64>() / n;
        }
    }
    out
}

/// Renders one clip. Deterministic in `(world, utterance, sample_seed)`.
pub fn render_sample(
    world: &World,
    utterance: &Utterance,
    sample_seed: u64,
    tokens: TokenSource<'_>,
) -> Result<Sample> {
    let c = &world.config;
    let mut rng = seed::rng(sample_seed, &[seed::SAMPLE]);
    let check = |w: usize| {
        if w >= world.num_words() {
            Err(Error::InvalidArgument(format!("word index {w} outside lexicon of {}", world.num_words())))
        } else {
            Ok(())
        }
    };

    // (words in order, index of the target word for word mode)
    let (words, target, label) = match utterance {
        Utterance::Word(w) => {
            check(*w)?;
            let mut words = Vec::with_capacity(1 + 2 * c.context_words);
            for _ in 0..c.context_words {
                words.push(rng.gen_range(0..world.num_words()));
            }
            let target = words.len();
            words.push(*w);
            for _ in 0..c.context_words {
                words.push(rng.gen_range(0..world.num_words()));
            }
            (words, Some(target), Label::Word(*w as u16))
        }
        Utterance::Sentence(ws) => {
            if ws.is_empty() {
                return Err(Error::InvalidArgument("empty sentence".into()));
            }
            for &w in ws {
                check(w)?;
            }
            (ws.clone(), None, Label::Graphemes(world.transcript(ws)))
        }
    };

    let k = c.frames_per_phoneme;
    let mut phonemes = Vec::new();
    let mut boundary = Vec::new();
    for (i, &w) in words.iter().enumerate() {
        let inside = target.map_or(true, |tgt| tgt == i);
        for &p in &world.lexicon[w] {
            for _ in 0..k {
                phonemes.push(p);
                boundary.push(inside);
            }
        }
    }
    let t_len = phonemes.len();

    let mut raw = Mat::zeros(t_len, c.visual_dim);
    for (t, &p) in phonemes.iter().enumerate() {
        let vis = world.viseme_embeddings.row(world.viseme_of[p]);
        let cue = world.phoneme_cues.row(p);
        for (d, o) in raw.row_mut(t).iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *o = vis[d] + cue[d] + c.visual_noise * noise;
        }
    }
    let smoothed = smooth_frames(&raw);

    let token_grid = match tokens {
        TokenSource::PhonemeTable { vocab } => {
            let table = world.phoneme_token_table(vocab);
            phonemes.iter().flat_map(|&p| table[p]).collect()
        }
        TokenSource::Codebook(cb) => {
            let mut feats = Vec::with_capacity(t_len * TOKENS_PER_FRAME * c.audio_dim);
            for &p in &phonemes {
                for slot in 0..TOKENS_PER_FRAME {
                    feats.extend(world.audio_feature(p, slot, &mut rng));
                }
            }
            let feats = Mat::from_vec(t_len * TOKENS_PER_FRAME, c.audio_dim, feats);
            let stream = quantize(cb, &feats)?;
            align_tokens(&stream, t_len, cb.size() as u16)?.grid
        }
    };

    Ok(Sample {
        num_frames: t_len,
        visual_dim: c.visual_dim,
        visual_frames: smoothed.data().iter().map(|&v| v as f32).collect(),
        word_boundary: boundary,
        label,
        token_grid,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub offset: u64,
    pub num_frames: usize,
    pub label: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub split: String,
    pub mode: Mode,
    pub world_fingerprint: String,
    pub visual_dim: usize,
    /// Token alphabet including the pad id.
    pub token_vocab: usize,
    pub pad_id: u16,
    pub sample_count: usize,
    pub records: Vec<Record>,
}

impl Manifest {
    /// SHA-256 of the canonical manifest JSON; identifies a split.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("manifest serializes")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldRecord {
    pub seed: u64,
    pub fingerprint: String,
    pub config: WorldConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn plan_words(world: &World, count: usize, required: Vec<usize>, rng: &mut impl Rng, split: &str) -> Result<Vec<usize>> {
    if required.len() > count {
        return Err(Error::InfeasibleCoverage(format!(
            "{split} split of {count} samples cannot cover {} required words",
            required.len()
        )));
    }
    let mut plan = required;
    while plan.len() < count {
        plan.push(rng.gen_range(0..world.num_words()));
    }
    plan.shuffle(rng);
    Ok(plan)
}

fn plan_sentences(
    world: &World,
    spec: &DatasetConfig,
    count: usize,
    mut required: Vec<usize>,
    rng: &mut impl Rng,
    split: &str,
) -> Result<Vec<Vec<usize>>> {
    if spec.min_sentence_words == 0 || spec.min_sentence_words > spec.max_sentence_words {
        return Err(Error::InvalidArgument(format!(
            "bad sentence length range {}..={}",
            spec.min_sentence_words, spec.max_sentence_words
        )));
    }
    required.shuffle(rng);
    let mut queue = required.into_iter();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.gen_range(spec.min_sentence_words..=spec.max_sentence_words);
        let mut words: Vec<usize> = queue.by_ref().take(len).collect();
        while words.len() < len {
            words.push(rng.gen_range(0..world.num_words()));
        }
        words.shuffle(rng);
        out.push(words);
    }
    let left = queue.count();
    if left > 0 {
        return Err(Error::InfeasibleCoverage(format!(
            "{split} split of {count} utterances leaves {left} required word slots uncovered"
        )));
    }
    Ok(out)
}

/// Plans and renders both splits, writing `train/` and `eval/` under `out`.
pub fn generate_dataset(
    world: &World,
    spec: &DatasetConfig,
    data_seed: u64,
    tokens: TokenSource<'_>,
    out: &Path,
) -> Result<BTreeMap<String, Manifest>> {
    for (split, n) in [("train", spec.train), ("eval", spec.eval)] {
        if n == 0 {
            return Err(Error::InfeasibleCoverage(format!("{split} split is empty")));
        }
    }
    let all_words: Vec<usize> = (0..world.num_words()).collect();
    let homophene_required: Vec<usize> = world
        .homophene_words()
        .into_iter()
        .flat_map(|w| std::iter::repeat(w).take(spec.eval_per_homophene))
        .collect();

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let record = WorldRecord {
        seed: world.seed,
        fingerprint: world.fingerprint().to_string(),
        config: world.config.clone(),
    };
    write_json(&out.join(WORLD_FILE), &record)?;

    let mut manifests = BTreeMap::new();
    for (split_idx, (split, count, required)) in [
        ("train", spec.train, all_words),
        ("eval", spec.eval, homophene_required),
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = seed::rng(data_seed, &[seed::SPLIT, split_idx as u64]);
        let utterances: Vec<Utterance> = match spec.mode {
            Mode::Word => plan_words(world, count, required, &mut rng, split)?
                .into_iter()
                .map(Utterance::Word)
                .collect(),
            Mode::Sentence => plan_sentences(world, spec, count, required, &mut rng, split)?
                .into_iter()
                .map(Utterance::Sentence)
                .collect(),
        };
        let samples = utterances
            .iter()
            .enumerate()
            .map(|(i, u)| {
                render_sample(
                    world,
                    u,
                    seed::derive(data_seed, &[seed::SAMPLE, split_idx as u64, i as u64]),
                    tokens,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = write_split(&out.join(split), split, spec.mode, world, tokens, &samples)?;
        manifests.insert(split.to_string(), manifest);
    }
    Ok(manifests)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Serializes one record in the `samples.bin` layout.
pub fn encode_sample(sample: &Sample, out: &mut Vec<u8>) {
    out.extend((sample.num_frames as u32).to_le_bytes());
    out.extend((sample.visual_dim as u32).to_le_bytes());
    out.extend((TOKENS_PER_FRAME as u32).to_le_bytes());
    for v in &sample.visual_frames {
        out.extend(v.to_le_bytes());
    }
    out.extend(sample.word_boundary.iter().map(|&b| b as u8));
    for z in &sample.token_grid {
        out.extend(z.to_le_bytes());
    }
    let label = sample.label.as_codes();
    out.extend((label.len() as u16).to_le_bytes());
    for l in label {
        out.extend(l.to_le_bytes());
    }
}

/// Writes `manifest.json` and `samples.bin` for one split.
pub fn write_split(
    dir: &Path,
    split: &str,
    mode: Mode,
    world: &World,
    tokens: TokenSource<'_>,
    samples: &[Sample],
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin_path = dir.join(SAMPLES_FILE);
    let file = fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut w = BufWriter::new(file);
    let mut records = Vec::with_capacity(samples.len());
    let mut offset = 0u64;
    let mut buf = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        buf.clear();
        encode_sample(s, &mut buf);
        w.write_all(&buf).map_err(|e| Error::io(&bin_path, e))?;
        records.push(Record {
            id: format!("{split}-{i:06}"),
            offset,
            num_frames: s.num_frames,
            label: s.label.as_codes(),
        });
        offset += buf.len() as u64;
    }
    w.flush().map_err(|e| Error::io(&bin_path, e))?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        split: split.to_string(),
        mode,
        world_fingerprint: world.fingerprint().to_string(),
        visual_dim: world.config.visual_dim,
        token_vocab: tokens.vocab() + 1,
        pad_id: tokens.pad_id(),
        sample_count: samples.len(),
        records,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::corrupt(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Loads a split directory. With `expected_fingerprint`, rejects data made
/// by a different world.
pub fn load_dataset(dir: &Path, expected_fingerprint: Option<&str>) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw: serde_json::Value = read_json(&manifest_path)?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    if manifest.sample_count != manifest.records.len() {
        return Err(Error::corrupt(
            &manifest_path,
            format!("sample_count {} but {} records", manifest.sample_count, manifest.records.len()),
        ));
    }
    if let Some(expected) = expected_fingerprint {
        if manifest.world_fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                found: manifest.world_fingerprint.clone(),
                expected: expected.to_string(),
            });
        }
    }

    let bin_path = dir.join(SAMPLES_FILE);
    let mut bytes = Vec::new();
    fs::File::open(&bin_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&bin_path, e))?;

    let mut samples = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let mut cur = Cursor {
            bytes: &bytes,
            pos: rec.offset as usize,
            path: &bin_path,
        };
        let t_len = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let r = cur.u32()? as usize;
        if t_len != rec.num_frames || dim != manifest.visual_dim || r != TOKENS_PER_FRAME || t_len == 0 {
            return Err(Error::corrupt(
                &bin_path,
                format!("record {} header [{t_len}, {dim}, {r}] disagrees with manifest", rec.id),
            ));
        }
        let visual_frames = (0..t_len * dim).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
        let word_boundary = cur.take(t_len)?.iter().map(|&b| b != 0).collect();
        let token_grid = (0..t_len * r).map(|_| cur.u16()).collect::<Result<Vec<_>>>()?;
        if let Some(bad) = token_grid.iter().find(|&&z| z as usize >= manifest.token_vocab) {
            return Err(Error::corrupt(&bin_path, format!("token {bad} outside vocab in {}", rec.id)));
        }
        let n = cur.u16()? as usize;
        let codes = (0..n).map(|_| cur.u16()).collect::<Result<Vec<_>>>()?;
        if codes != rec.label || codes.is_empty() {
            return Err(Error::corrupt(&bin_path, format!("label of {} disagrees with manifest", rec.id)));
        }
        let label = match manifest.mode {
            Mode::Word if codes.len() == 1 => Label::Word(codes[0]),
            Mode::Word => {
                return Err(Error::corrupt(&bin_path, format!("word label of {} has {n} codes", rec.id)))
            }
            Mode::Sentence => Label::Graphemes(codes),
        };
        samples.push(Sample {
            num_frames: t_len,
            visual_dim: dim,
            visual_frames,
            word_boundary,
            label,
            token_grid,
        });
    }
    Ok(Dataset { manifest, samples })
}

/// Rebuilds the world recorded next to a generated dataset.
pub fn load_world(data_dir: &Path) -> Result<World> {
    let rec: WorldRecord = read_json(&data_dir.join(WORLD_FILE))?;
    let world = build_world(&rec.config, rec.seed)?;
    if world.fingerprint() != rec.fingerprint {
        return Err(Error::FingerprintMismatch {
            found: world.fingerprint().to_string(),
            expected: rec.fingerprint,
        });
    }
    Ok(world)
}

pub fn split_dir(data_dir: &Path, split: &str) -> PathBuf {
    data_dir.join(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            phonemes: 20,
            visemes: 8,
            words: 60,
            homophene_pairs: 10,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn single_viseme_forces_one_homophene_pair() {
        let cfg = WorldConfig {
            phonemes: 2,
            visemes: 1,
            words: 2,
            homophene_pairs: 1,
            min_word_len: 1,
            max_word_len: 1,
            ..WorldConfig::default()
        };
        let w = build_world(&cfg, 3).unwrap();
        let mut words = w.lexicon.clone();
        words.sort();
        assert_eq!(words, vec![vec![0], vec![1]]);
        let pairs = homophene_pairs(&w);
        assert_eq!(pairs.len(), 1);
        assert!(pairs[0].viseme_identical);
        assert_eq!(pairs[0].grapheme_distance, 1);
    }

    #[test]
    fn world_is_deterministic_and_satisfies_invariants() {
        let a = build_world(&small(), 7).unwrap();
        let b = build_world(&small(), 7).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a, b);
        assert_ne!(a.fingerprint(), build_world(&small(), 8).unwrap().fingerprint());

        assert_eq!(a.homophenes.len(), 10);
        let unique: HashSet<_> = a.lexicon.iter().collect();
        assert_eq!(unique.len(), a.lexicon.len());
        let hit: HashSet<_> = a.viseme_of.iter().collect();
        assert_eq!(hit.len(), 8);
        for p in homophene_pairs(&a) {
            assert_ne!(a.lexicon[p.word1], a.lexicon[p.word2]);
            assert!(p.viseme_identical);
            assert_ne!(p.word1, p.word2);
            assert!(p.grapheme_distance >= 1);
        }
    }

    #[test]
    fn injective_viseme_map_is_infeasible() {
        let cfg = WorldConfig {
            phonemes: 4,
            visemes: 4,
            words: 6,
            homophene_pairs: 1,
            ..WorldConfig::default()
        };
        assert!(matches!(build_world(&cfg, 1), Err(Error::InfeasibleConfig(_))));
    }

    #[test]
    fn equal_length_pairs_have_hamming_grapheme_distance() {
        for s in 0..5 {
            let w = build_world(&small(), s).unwrap();
            for p in homophene_pairs(&w) {
                let (a, b) = (&w.lexicon[p.word1], &w.lexicon[p.word2]);
                assert_eq!(a.len(), b.len());
                let hamming = a.iter().zip(b).filter(|(x, y)| x != y).count();
                assert_eq!(p.grapheme_distance, hamming);
            }
        }
    }

    #[test]
    fn zero_noise_frames_follow_phoneme_blocks() {
        let cfg = WorldConfig {
            visual_noise: 0.0,
            context_words: 0,
            min_word_len: 2,
            max_word_len: 2,
            ..small()
        };
        let w = build_world(&cfg, 1).unwrap();
        let s = render_sample(&w, &Utterance::Word(0), 5, TokenSource::PhonemeTable { vocab: 64 }).unwrap();
        assert_eq!(s.num_frames, 6);
        assert_eq!(s.token_grid.len(), 6 * 4);
        let expect = |p: usize| -> Vec<f32> {
            let v = w.viseme_embeddings.row(w.viseme_of[p]);
            v.iter()
                .zip(w.phoneme_cues.row(p))
                .map(|(a, b)| (((a + b) + (a + b) + (a + b)) / 3.0) as f32)
                .collect()
        };
        // Interior frame of each 3-frame block is unaffected by smoothing.
        assert_eq!(s.frame(1), expect(w.lexicon[0][0]).as_slice());
        assert_eq!(s.frame(4), expect(w.lexicon[0][1]).as_slice());
        assert!(s.word_boundary.iter().all(|&b| b));
    }

    #[test]
    fn smoothing_averages_neighbours() {
        let m = Mat::from_vec(3, 1, vec![0.0, 3.0, 6.0]);
        assert_eq!(smooth_frames(&m).data(), &[1.5, 3.0, 4.5]);
        let one = Mat::from_vec(1, 2, vec![1.0, 2.0]);
        assert_eq!(smooth_frames(&one), one);
    }

    #[test]
    fn homophenes_render_identically_without_noise_or_cue() {
        let cfg = WorldConfig {
            visual_noise: 0.0,
            phoneme_cue: 0.0,
            context_words: 0,
            ..small()
        };
        let w = build_world(&cfg, 2).unwrap();
        let table = TokenSource::PhonemeTable { vocab: 64 };
        for &(a, b) in &w.homophenes {
            let sa = render_sample(&w, &Utterance::Word(a), 1, table).unwrap();
            let sb = render_sample(&w, &Utterance::Word(b), 1, table).unwrap();
            assert_eq!(sa.visual_frames, sb.visual_frames);
            assert_ne!(sa.token_grid, sb.token_grid);
        }
    }

    #[test]
    fn word_mode_boundary_marks_only_the_target() {
        let w = build_world(&small(), 4).unwrap();
        let s = render_sample(&w, &Utterance::Word(3), 9, TokenSource::PhonemeTable { vocab: 64 }).unwrap();
        let k = w.config.frames_per_phoneme;
        let on = s.word_boundary.iter().filter(|&&b| b).count();
        assert_eq!(on, k * w.lexicon[3].len());
        assert_eq!(s.num_frames % k, 0);
        let again = render_sample(&w, &Utterance::Word(3), 9, TokenSource::PhonemeTable { vocab: 64 }).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn sentence_label_joins_words_with_separator() {
        let w = build_world(&small(), 4).unwrap();
        let s = render_sample(&w, &Utterance::Sentence(vec![1, 2]), 0, TokenSource::PhonemeTable { vocab: 64 }).unwrap();
        let g = s.label.graphemes().unwrap();
        assert_eq!(g.len(), w.lexicon[1].len() + 1 + w.lexicon[2].len());
        assert_eq!(g[w.lexicon[1].len()], w.separator());
        assert_eq!(s.num_frames, 3 * (w.lexicon[1].len() + w.lexicon[2].len()));
    }

    #[test]
    fn bad_word_index_is_rejected() {
        let w = build_world(&small(), 4).unwrap();
        assert!(render_sample(&w, &Utterance::Word(60), 0, TokenSource::PhonemeTable { vocab: 64 }).is_err());
    }

    #[test]
    fn token_table_rows_are_distinct() {
        let w = build_world(&small(), 4).unwrap();
        let t = w.phoneme_token_table(64);
        let set: HashSet<_> = t.iter().collect();
        assert_eq!(set.len(), t.len());
        assert!(t.iter().flatten().all(|&z| z < 64));
    }
}
