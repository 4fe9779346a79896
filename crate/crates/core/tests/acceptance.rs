//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line straight to stdout (bypassing capture) and then asserts.

use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use syncvsr::analysis::{head_attention_distance, levenshtein, mean_attention_distance, perplexity, wer};
use syncvsr::corpus::{
    build_world, generate_dataset, load_dataset, render_sample, split_dir, write_split, Dataset, DatasetConfig, Label,
    Mode, Sample, TokenSource, Utterance, World, WorldConfig,
};
use syncvsr::losses::{self, ctc_loss, lm_loss, masked_sync_loss, sync_loss, task_loss, total_loss};
use syncvsr::model::{
    load_checkpoint, save_checkpoint, AttentionRecord, EncoderConfig, LossSetup, LossTerm, Model, ModelConfig,
    SyncVariant,
};
use syncvsr::quantizer::{align_tokens, distortion, fit_codebook};
use syncvsr::tensor::Mat;
use syncvsr::train::{encoder_config, evaluate, run_ablation_grid, train, TrainConfig};

fn report(n: u32, pass: bool, detail: impl AsRef<str>) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n:>2}: {verdict} ({})", detail.as_ref());
    let _ = out.flush();
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------------------
// 1. CTC against exhaustive path enumeration

/// Probability-space brute force: sum over all `C^T` paths that collapse to `y`.
fn ctc_enumerated(probs: &[Vec<f64>], target: &[usize], blank: usize) -> f64 {
    let t_len = probs.len();
    let c = probs[0].len();
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != blank {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(t, &s)| probs[t][s]).product::<f64>();
        }
        let mut i = 0;
        loop {
            if i == t_len {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < c {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

#[test]
fn criterion_01_ctc_matches_enumeration() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 600 {
        let labels = rng.gen_range(1..=3usize);
        let classes = labels + 1;
        let t_len = rng.gen_range(1..=6usize);
        let y_len = rng.gen_range(0..=3usize);
        let target: Vec<usize> = (0..y_len).map(|_| rng.gen_range(0..labels)).collect();
        if losses::ctc_min_frames(&target) > t_len {
            assert!(ctc_loss(&Mat::zeros(t_len, classes), &target).is_err());
            continue;
        }
        let logits = Mat::from_vec(
            t_len,
            classes,
            (0..t_len * classes).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        );
        let probs: Vec<Vec<f64>> = (0..t_len)
            .map(|t| {
                let row = logits.row(t);
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                row.iter().map(|v| v.exp() / z).collect()
            })
            .collect();
        let want = ctc_enumerated(&probs, &target, labels);
        let got = ctc_loss(&logits, &target).unwrap().value;
        worst = worst.max((got - want).abs());
        checked += 1;
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-9 && elapsed < Duration::from_secs(30);
    report(1, pass, format!("{checked} instances, max |diff| {worst:.2e}, {}", secs(elapsed)));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 2. Parameter gradients against central differences

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        model: ModelConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            d_ff: 16,
            dropout: 0.1,
            max_frames: 16,
            decoder_layers: 1,
            word_boundary: true,
        },
        visual_dim: 3,
        sync_vocab: 6,
        classes: 4,
        graphemes: 3,
        max_transcript: 8,
    }
}

fn tiny_sample(label: Label) -> Sample {
    let t_len = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    Sample {
        num_frames: t_len,
        visual_dim: 3,
        visual_frames: (0..t_len * 3).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        word_boundary: vec![false, true, true, true],
        label,
        // Token 5 is the pad id; one slot is padded.
        token_grid: vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 3, 2, 1, 0, 4, 4, 5],
    }
}

/// Norm-wise relative error of analytic vs. central-difference gradients,
/// worst over tensors.
fn gradient_error(model: &Model, sample: &Sample, setup: &LossSetup, term: LossTerm, mask: Option<&[bool]>) -> f64 {
    let eps = 1e-3;
    let (_, grads) = model.loss_and_grad(sample, setup, term, None, mask, 5).unwrap();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let ids: Vec<_> = model.params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let n = model.params.get(id).len();
        let analytic = grads.get(id).data();
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        for j in 0..n {
            let orig = probe.params.get(id).data()[j];
            probe.params.get_mut(id).data_mut()[j] = orig + eps;
            let up = probe.loss_value(sample, setup, term, mask, 5).unwrap().1;
            probe.params.get_mut(id).data_mut()[j] = orig - eps;
            let down = probe.loss_value(sample, setup, term, mask, 5).unwrap().1;
            probe.params.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            diff_sq += (analytic[j] - numeric).powi(2);
            a_sq += analytic[j].powi(2);
            n_sq += numeric.powi(2);
        }
        let scale = a_sq.sqrt().max(n_sq.sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff_sq.sqrt() / scale);
        }
    }
    worst
}

#[test]
fn criterion_02_gradient_checks() {
    let start = Instant::now();
    let model = Model::new(tiny_config(), 5).unwrap();
    let word = tiny_sample(Label::Word(2));
    let sentence = tiny_sample(Label::Graphemes(vec![1, 0]));
    let mask = [true, false, false, true];
    let full = LossSetup {
        alpha: 0.4,
        lambda: 1.5,
        variant: SyncVariant::Full,
    };
    let masked = LossSetup {
        variant: SyncVariant::Masked,
        ..full
    };
    let cases: [(&str, &Sample, LossSetup, LossTerm, Option<&[bool]>); 7] = [
        ("word_ce", &word, full, LossTerm::Word, None),
        ("ctc_loss", &sentence, full, LossTerm::Ctc, None),
        ("lm_loss", &sentence, full, LossTerm::Lm, None),
        ("sync_loss", &sentence, full, LossTerm::Sync, None),
        ("masked_sync_loss", &word, masked, LossTerm::Sync, Some(&mask)),
        ("total_loss (sentence)", &sentence, full, LossTerm::Total, None),
        ("total_loss (word, masked)", &word, masked, LossTerm::Total, Some(&mask)),
    ];
    let mut worst = 0.0f64;
    let mut details = Vec::new();
    for (name, sample, setup, term, m) in cases {
        let e = gradient_error(&model, sample, &setup, term, m);
        worst = worst.max(e);
        details.push(format!("{name} {e:.1e}"));
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(120);
    report(2, pass, format!("{}; {}", details.join(", "), secs(elapsed)));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 3. Loss identities

#[test]
fn criterion_03_loss_identities() {
    let model = Model::new(tiny_config(), 9).unwrap();
    let sentence = tiny_sample(Label::Graphemes(vec![2, 1]));
    let value = |alpha: f64, lambda: f64| {
        let setup = LossSetup {
            alpha,
            lambda,
            variant: SyncVariant::Full,
        };
        model.loss_value(&sentence, &setup, LossTerm::Total, None, 5).unwrap().0
    };
    let b = value(0.3, 0.0);
    let lambda_zero = b.l_total == b.l_task;
    let b1 = value(1.0, 2.0);
    let alpha_one = b1.l_task == b1.l_ctc.unwrap();
    let b0 = value(0.0, 2.0);
    let alpha_zero = b0.l_task == b0.l_lm.unwrap();

    // Same logits through both sync losses.
    let frames = model.input_frames(&sentence).unwrap();
    let (h, _) = model.encode(&frames, false).unwrap();
    let logits = model.project_sync(&h).unwrap();
    let s = sync_loss(&logits, &sentence.token_grid, 5).unwrap();
    let m = masked_sync_loss(&logits, &sentence.token_grid, &[true; 4], 5).unwrap();
    let mask_identity = s.value == m.value && s.grad == m.grad;

    // The scalar helpers obey the same identities.
    let scalar = total_loss(1.25, 3.0, 0.0).unwrap() == 1.25
        && task_loss(0.7, 0.2, 1.0).unwrap() == 0.7
        && task_loss(0.7, 0.2, 0.0).unwrap() == 0.2;

    let pass = lambda_zero && alpha_one && alpha_zero && mask_identity && scalar;
    report(
        3,
        pass,
        format!(
            "total(λ=0)=task {lambda_zero}, task(α=1)=ctc {alpha_one}, task(α=0)=lm {alpha_zero}, masked(all)=sync {mask_identity}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 4. Uniform baselines

#[test]
fn criterion_04_uniform_baselines() {
    // Sync: V_sync = 64 with zeroed sync head.
    let mut cfg = tiny_config();
    cfg.sync_vocab = 64;
    let mut model = Model::new(cfg, 1).unwrap();
    for name in ["sync.weight", "sync.bias"] {
        let id = model.params.id(name).unwrap();
        model.params.get_mut(id).scale(0.0);
    }
    let mut sample = tiny_sample(Label::Word(0));
    sample.token_grid = (0..16).map(|i| (i * 7 % 63) as u16).collect();
    let frames = model.input_frames(&sample).unwrap();
    let (h, _) = model.encode(&frames, false).unwrap();
    let l_sync = sync_loss(&model.project_sync(&h).unwrap(), &sample.token_grid, 63).unwrap().value;
    let sync_err = (l_sync - 64f64.ln()).abs();

    // Perplexity: zeroed decoder output layer on a real sentence split.
    let wc = WorldConfig {
        words: 12,
        homophene_pairs: 2,
        dataset: DatasetConfig {
            mode: Mode::Sentence,
            train: 10,
            eval: 12,
            eval_per_homophene: 1,
            ..DatasetConfig::default()
        },
        ..WorldConfig::default()
    };
    let world = build_world(&wc, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&world, &wc.dataset, 4, TokenSource::PhonemeTable { vocab: 64 }, dir.path()).unwrap();
    let eval = load_dataset(&split_dir(dir.path(), "eval"), None).unwrap();
    let small = ModelConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        d_ff: 16,
        decoder_layers: 1,
        ..ModelConfig::default()
    };
    let mut lm_model = Model::new(encoder_config(&small, &world, &eval.manifest), 2).unwrap();
    for name in ["dec.out.weight", "dec.out.bias"] {
        let id = lm_model.params.id(name).unwrap();
        lm_model.params.get_mut(id).scale(0.0);
    }
    let alphabet = (world.num_graphemes() + 2) as f64;
    let ppl = evaluate(&lm_model, &eval, &world).unwrap().perplexity.unwrap();
    let ppl_err = (ppl - alphabet).abs();
    let direct = (perplexity(lm_loss(&Mat::zeros(5, 12), &[0, 1, 2, 3, 4]).unwrap().value) - 12.0).abs();

    let pass = sync_err <= 1e-6 && ppl_err <= 1e-6 && direct <= 1e-6;
    report(
        4,
        pass,
        format!("sync - ln 64 = {sync_err:.1e}, perplexity - {alphabet} = {ppl_err:.1e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 5. Four tokens per frame

#[test]
fn criterion_05_four_tokens_per_frame() {
    let mut runner = TestRunner::new(PtConfig {
        cases: 1000,
        ..PtConfig::default()
    });
    let align = runner.run(
        &(1usize..200, 1usize..60, 1u16..100),
        |(len, frames, vocab)| {
            let tokens: Vec<u16> = (0..len).map(|i| (i as u16 * 31) % vocab).collect();
            let a = align_tokens(&tokens, frames, vocab).unwrap();
            prop_assert_eq!(a.grid.len(), 4 * frames);
            Ok(())
        },
    );

    let world_cfg = WorldConfig {
        words: 20,
        homophene_pairs: 3,
        ..WorldConfig::default()
    };
    let world = build_world(&world_cfg, 12).unwrap();
    let mut runner = TestRunner::new(PtConfig {
        cases: 1000,
        ..PtConfig::default()
    });
    let samples = runner.run(
        &(proptest::collection::vec(0usize..20, 1..5), any::<u64>(), any::<bool>()),
        |(words, seed, sentence)| {
            let u = if sentence {
                Utterance::Sentence(words.clone())
            } else {
                Utterance::Word(words[0])
            };
            let s = render_sample(&world, &u, seed, TokenSource::PhonemeTable { vocab: 64 }).unwrap();
            prop_assert_eq!(s.token_grid.len(), 4 * s.num_frames);
            prop_assert!(s.num_frames >= 1);
            Ok(())
        },
    );
    let pass = align.is_ok() && samples.is_ok();
    report(
        5,
        pass,
        format!("align_tokens {:?}, render_sample {:?} over 1000 shapes each", align.is_ok(), samples.is_ok()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Shared word-mode experiments for criteria 6, 7 and 9.

const SEEDS: [u64; 3] = [0, 1, 2];

fn experiment_model() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        layers: 2,
        heads: 4,
        d_ff: 64,
        dropout: 0.1,
        max_frames: 256,
        decoder_layers: 1,
        word_boundary: true,
    }
}

fn word_train_config(seed: u64, lambda: f64, variant: SyncVariant) -> TrainConfig {
    TrainConfig {
        mode: Mode::Word,
        lambda,
        sync_variant: variant,
        mask_ratio: 0.3,
        epochs: 60,
        batch_size: 32,
        peak_lr: 2e-3,
        warmup_epochs: 2,
        seed,
        ..TrainConfig::default()
    }
}

struct RunResult {
    homophene_top1: f64,
    attention_distance: f64,
}

struct SeedRuns {
    vanilla: RunResult,
    sync: RunResult,
    masked: RunResult,
    sync10: RunResult,
}

struct WordRuns {
    seeds: Vec<SeedRuns>,
    elapsed_sync_vs_vanilla: Duration,
    elapsed: Duration,
}

fn word_data(seed: u64) -> (World, Dataset, Dataset) {
    let wc = WorldConfig::default();
    let world = build_world(&wc, seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&world, &wc.dataset, seed, TokenSource::PhonemeTable { vocab: 64 }, dir.path()).unwrap();
    let tr = load_dataset(&split_dir(dir.path(), "train"), Some(world.fingerprint())).unwrap();
    let ev = load_dataset(&split_dir(dir.path(), "eval"), Some(world.fingerprint())).unwrap();
    (world, tr, ev)
}

fn run_word(world: &World, tr: &Dataset, ev: &Dataset, cfg: &TrainConfig) -> RunResult {
    let enc = encoder_config(&experiment_model(), world, &tr.manifest);
    let out = train(cfg, Model::new(enc, cfg.seed).unwrap(), tr, None, world, None).unwrap();
    let metrics = evaluate(&out.model, ev, world).unwrap();
    let mut total = 0.0;
    let mut count = 0usize;
    for s in &ev.samples {
        let frames = out.model.input_frames(s).unwrap();
        let (_, rec) = out.model.encode(&frames, true).unwrap();
        for heads in mean_attention_distance(&rec.unwrap()).unwrap() {
            for d in heads {
                total += d;
                count += 1;
            }
        }
    }
    RunResult {
        homophene_top1: metrics.homophene_top1.unwrap(),
        attention_distance: total / count as f64,
    }
}

/// Serializes the long training experiments so their timings are not
/// inflated by each other.
static HEAVY: Mutex<()> = Mutex::new(());

fn word_runs() -> &'static WordRuns {
    static RUNS: OnceLock<WordRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let _heavy = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
        let start = Instant::now();
        let mut core = Duration::ZERO;
        let seeds = SEEDS
            .iter()
            .map(|&seed| {
                let (world, tr, ev) = word_data(seed);
                let t = Instant::now();
                let vanilla = run_word(&world, &tr, &ev, &word_train_config(seed, 0.0, SyncVariant::Full));
                let sync = run_word(&world, &tr, &ev, &word_train_config(seed, 1.0, SyncVariant::Full));
                core += t.elapsed();
                let masked = run_word(&world, &tr, &ev, &word_train_config(seed, 1.0, SyncVariant::Masked));
                let sync10 = run_word(&world, &tr, &ev, &word_train_config(seed, 10.0, SyncVariant::Full));
                SeedRuns {
                    vanilla,
                    sync,
                    masked,
                    sync10,
                }
            })
            .collect();
        WordRuns {
            seeds,
            elapsed_sync_vs_vanilla: core,
            elapsed: start.elapsed(),
        }
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

#[test]
fn criterion_06_sync_disambiguates_homophenes() {
    let runs = word_runs();
    let gaps: Vec<f64> = runs
        .seeds
        .iter()
        .map(|s| s.sync.homophene_top1 - s.vanilla.homophene_top1)
        .collect();
    let med = median(gaps.clone());
    let detail = runs
        .seeds
        .iter()
        .map(|s| format!("{:.3} vs {:.3}", s.sync.homophene_top1, s.vanilla.homophene_top1))
        .collect::<Vec<_>>()
        .join("; ");
    let pass = med >= 0.05 && runs.elapsed_sync_vs_vanilla < Duration::from_secs(15 * 60);
    report(
        6,
        pass,
        format!(
            "homophene top-1 sync vs vanilla: {detail}; median gain {:.1} points; {} for these 6 runs",
            100.0 * med,
            secs(runs.elapsed_sync_vs_vanilla)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_full_beats_masked() {
    let runs = word_runs();
    let wins = runs
        .seeds
        .iter()
        .filter(|s| s.sync.homophene_top1 >= s.masked.homophene_top1)
        .count();
    let detail = runs
        .seeds
        .iter()
        .map(|s| format!("{:.3} vs {:.3}", s.sync.homophene_top1, s.masked.homophene_top1))
        .collect::<Vec<_>>()
        .join("; ");
    let pass = wins >= 2;
    report(7, pass, format!("homophene top-1 full vs masked: {detail}; {wins}/3 seeds"));
    assert!(pass);
}

#[test]
fn criterion_09_attention_becomes_local() {
    let runs = word_runs();
    let wins = runs
        .seeds
        .iter()
        .filter(|s| s.sync10.attention_distance < s.vanilla.attention_distance)
        .count();
    let detail = runs
        .seeds
        .iter()
        .map(|s| format!("{:.3} vs {:.3}", s.sync10.attention_distance, s.vanilla.attention_distance))
        .collect::<Vec<_>>()
        .join("; ");
    let pass = wins >= 2;
    report(
        9,
        pass,
        format!(
            "mean attention distance λ=10 vs λ=0: {detail}; {wins}/3 seeds; all word runs {}",
            secs(runs.elapsed)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 8. Sync x CTC ablation

fn sentence_world_config() -> WorldConfig {
    WorldConfig {
        dataset: DatasetConfig {
            mode: Mode::Sentence,
            train: 600,
            eval: 100,
            eval_per_homophene: 1,
            min_sentence_words: 2,
            max_sentence_words: 4,
        },
        ..WorldConfig::default()
    }
}

#[test]
fn criterion_08_sync_and_ctc_cell_is_best() {
    let _heavy = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut wins = 0;
    let mut details = Vec::new();
    for seed in SEEDS {
        let wc = sentence_world_config();
        let world = build_world(&wc, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&world, &wc.dataset, seed, TokenSource::PhonemeTable { vocab: 64 }, dir.path()).unwrap();
        let tr = load_dataset(&split_dir(dir.path(), "train"), None).unwrap();
        let ev = load_dataset(&split_dir(dir.path(), "eval"), None).unwrap();
        let base = TrainConfig {
            mode: Mode::Sentence,
            alpha: 0.1,
            lambda: 1.0,
            epochs: 40,
            peak_lr: 2e-3,
            warmup_epochs: 2,
            seed,
            ..TrainConfig::default()
        };
        let grid = run_ablation_grid(&base, &experiment_model(), &world, &tr, &ev, None).unwrap();
        assert_eq!(grid.rows.len(), 4);
        let best = grid.cell(true, true).unwrap().perplexity;
        let others_worse = grid.rows.iter().filter(|r| !(r.sync && r.ctc)).all(|r| best < r.perplexity);
        wins += usize::from(others_worse);
        details.push(
            grid.rows
                .iter()
                .map(|r| format!("{}{}={:.3}", if r.sync { "S" } else { "-" }, if r.ctc { "C" } else { "-" }, r.perplexity))
                .collect::<Vec<_>>()
                .join(" "),
        );
    }
    let pass = wins >= 2;
    report(
        8,
        pass,
        format!("eval perplexity [{}]; sync+CTC best in {wins}/3 seeds; {}", details.join(" | "), secs(start.elapsed())),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 10. Quantizer

#[test]
fn criterion_10_lloyd_is_monotone_and_memorizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut monotone = true;
    let mut worst_rise = 0.0f64;
    for trial in 0..100u64 {
        let n = rng.gen_range(10..80);
        let d = rng.gen_range(1..5);
        let v = rng.gen_range(1..=n.min(12));
        let x = Mat::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-5.0..5.0)).collect());
        let cb = fit_codebook(&x, v, 15, trial).unwrap();
        for w in cb.history.windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
            if w[1] > w[0] + 1e-9 {
                monotone = false;
            }
        }
    }

    let mut memorized = true;
    for trial in 0..20u64 {
        let n = rng.gen_range(2..20);
        let mut pts: Vec<f64> = (0..n).map(|i| i as f64 * 1.5 + trial as f64).collect();
        // Duplicates do not add distinct points.
        pts.extend_from_slice(&pts.clone()[..n / 2]);
        let x = Mat::from_vec(pts.len(), 1, pts);
        let cb = fit_codebook(&x, n, 20, trial).unwrap();
        memorized &= distortion(&cb, &x).unwrap() == 0.0 && cb.fit_distortion == 0.0;
    }
    let pass = monotone && memorized;
    report(
        10,
        pass,
        format!("100 datasets, max distortion rise {worst_rise:.1e}; exact recovery {memorized}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 11. Determinism and round-trips

fn read_dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_11_determinism_and_round_trips() {
    let wc = WorldConfig {
        words: 16,
        homophene_pairs: 2,
        dataset: DatasetConfig {
            train: 64,
            eval: 48,
            eval_per_homophene: 6,
            ..DatasetConfig::default()
        },
        ..WorldConfig::default()
    };
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &dirs {
        let world = build_world(&wc, 21).unwrap();
        generate_dataset(&world, &wc.dataset, 21, TokenSource::PhonemeTable { vocab: 64 }, d.path()).unwrap();
    }
    let datasets_equal = read_dir_bytes(dirs[0].path()) == read_dir_bytes(dirs[1].path());

    let world = build_world(&wc, 21).unwrap();
    let tr = load_dataset(&split_dir(dirs[0].path(), "train"), Some(world.fingerprint())).unwrap();
    let ev = load_dataset(&split_dir(dirs[0].path(), "eval"), Some(world.fingerprint())).unwrap();
    let rewrite = tempfile::tempdir().unwrap();
    let m = write_split(rewrite.path(), "train", Mode::Word, &world, TokenSource::PhonemeTable { vocab: 64 }, &tr.samples)
        .unwrap();
    let dataset_round_trip = m == tr.manifest
        && read_dir_bytes(rewrite.path()) == read_dir_bytes(&split_dir(dirs[0].path(), "train"))
        && load_dataset(rewrite.path(), None).unwrap() == tr;

    let cfg = TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 16,
        sync_variant: SyncVariant::Masked,
        seed: 8,
        ..TrainConfig::default()
    };
    let small = ModelConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        d_ff: 32,
        decoder_layers: 1,
        ..ModelConfig::default()
    };
    let outs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for o in &outs {
        let enc = encoder_config(&small, &world, &tr.manifest);
        train(&cfg, Model::new(enc, 8).unwrap(), &tr, Some(&ev), &world, Some(o.path())).unwrap();
    }
    let runs_equal = read_dir_bytes(outs[0].path()) == read_dir_bytes(outs[1].path());

    let ck_path = outs[0].path().join("final.ckpt");
    let ck = load_checkpoint(&ck_path).unwrap();
    let again = tempfile::tempdir().unwrap();
    let again_path = again.path().join("x.ckpt");
    save_checkpoint(&again_path, &ck.model, ck.seed, &ck.meta).unwrap();
    let checkpoint_round_trip = std::fs::read(&ck_path).unwrap() == std::fs::read(&again_path).unwrap()
        && load_checkpoint(&again_path).unwrap().model.params == ck.model.params;

    let pass = datasets_equal && dataset_round_trip && runs_equal && checkpoint_round_trip;
    report(
        11,
        pass,
        format!(
            "datasets identical {datasets_equal}, dataset round-trip {dataset_round_trip}, training logs+checkpoints identical {runs_equal}, checkpoint round-trip {checkpoint_round_trip}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 12. Metric oracles

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[test]
fn criterion_12_metric_oracles() {
    let lev = levenshtein(&"million".chars().collect::<Vec<_>>(), &"billion".chars().collect::<Vec<_>>());

    let uniform = Mat::filled(3, 3, 1.0 / 3.0);
    let uniform_distance = head_attention_distance(&uniform).unwrap();
    let via_record = mean_attention_distance(&AttentionRecord {
        layers: vec![vec![uniform.clone()]],
    })
    .unwrap()[0][0];
    let attention_ok = (uniform_distance - 8.0 / 9.0).abs() <= 1e-9 && (via_record - 8.0 / 9.0).abs() <= 1e-9;

    // (hypothesis, reference, substitutions + deletions + insertions, reference length)
    let cases: [(&str, &str, usize, usize); 20] = [
        ("a b c", "a b c", 0, 3),
        ("a b", "a c b", 1, 3),
        ("", "a b c d", 4, 4),
        ("a x c", "a b c", 1, 3),
        ("a b c d", "a b c", 1, 3),
        ("b c", "a b c", 1, 3),
        ("a c", "a b c", 1, 3),
        ("x y z", "a b c", 3, 3),
        ("a a a", "a", 2, 1),
        ("the cat sat", "the cat sat on the mat", 3, 6),
        ("cat the sat", "the cat sat", 2, 3),
        ("a b c d e", "e d c b a", 4, 5),
        ("one", "one two", 1, 2),
        ("two", "one two", 1, 2),
        ("one three", "one two three", 1, 3),
        ("one two four three", "one two three", 1, 3),
        ("x", "a", 1, 1),
        ("a b x d e f", "a b c d e f", 1, 6),
        ("b c d e f g", "a b c d e f", 2, 6),
        ("a b b c", "a b c c", 1, 4),
    ];
    let mut wer_ok = true;
    for (h, r, edits, n) in cases {
        let got = wer(&words(h), &words(r)).unwrap();
        let want = edits as f64 / n as f64;
        if (got - want).abs() > 1e-12 {
            wer_ok = false;
            eprintln!("wer({h:?}, {r:?}) = {got}, expected {want}");
        }
    }
    let pass = lev == 1 && attention_ok && wer_ok;
    report(
        12,
        pass,
        format!("levenshtein(million, billion) = {lev}, uniform T=3 distance {uniform_distance:.12}, 20 WER cases {wer_ok}"),
    );
    assert!(pass);
}
