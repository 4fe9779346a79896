//! Subcommand implementations behind the `syncvsr` binary. Each command
//! writes under `<out>/<subdir>/` and leaves a `run.json` provenance record.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{homophene_f1_gain, AttentionDistanceReport, MethodPredictions};
use crate::config::{RunConfig, TokenSourceKind};
use crate::corpus::{
    build_world, generate_dataset, homophene_pairs, load_dataset, load_world, split_dir, Dataset, World, MANIFEST_FILE,
    WORLD_FILE,
};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, Checkpoint, Model, SyncVariant};
use crate::quantizer::{fit_codebook, load_codebook, save_codebook};
use crate::train::{encoder_config, evaluate, run_ablation_grid, train, TrainConfig, FINAL_CHECKPOINT, METRICS_FILE};

pub const RUN_RECORD: &str = "run.json";
pub const CODEBOOK_FILE: &str = "codebook.bin";

/// Everything a subcommand needs besides its name.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub config: RunConfig,
    pub out: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub quiet: bool,
}

impl Invocation {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn data_dir(&self) -> PathBuf {
        self.config.train.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    fn codebook_path(&self) -> PathBuf {
        self.config
            .quantizer
            .codebook
            .clone()
            .unwrap_or_else(|| self.out.join("tokenizer").join(CODEBOOK_FILE))
    }

    /// Path as recorded in provenance: relative to `out` when inside it.
    fn display(&self, p: &Path) -> String {
        p.strip_prefix(&self.out).unwrap_or(p).display().to_string()
    }

    fn checkpoints_or_default(&self) -> Vec<PathBuf> {
        if self.checkpoints.is_empty() {
            vec![self.out.join("train").join(FINAL_CHECKPOINT)]
        } else {
            self.checkpoints.clone()
        }
    }
}

/// Git's blob object id computed with SHA-256: `sha256("blob <len>\0" ‖ bytes)`.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(git_blob_hash(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    checkpoints: Vec<String>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

struct Provenance {
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Provenance {
    fn new() -> Self {
        Provenance {
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, inv: &Invocation, path: &Path) -> Result<()> {
        self.inputs.insert(inv.display(path), hash_file(path)?);
        Ok(())
    }

    fn dataset_inputs(&mut self, inv: &Invocation, data_dir: &Path) -> Result<()> {
        self.input(inv, &data_dir.join(WORLD_FILE))?;
        for split in ["train", "eval"] {
            self.input(inv, &split_dir(data_dir, split).join(MANIFEST_FILE))?;
        }
        Ok(())
    }

    fn write(&mut self, inv: &Invocation, path: &Path, bytes: &[u8]) -> Result<()> {
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        self.outputs.push(inv.display(path));
        Ok(())
    }

    fn finish(mut self, inv: &Invocation, command: &str, dir: &Path) -> Result<()> {
        self.outputs.sort();
        let record = RunRecord {
            command,
            seed: inv.config.seed(),
            config: &inv.config,
            checkpoints: inv.checkpoints.iter().map(|p| inv.display(p)).collect(),
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let mut bytes = serde_json::to_vec_pretty(&record)?;
        bytes.push(b'\n');
        let p = dir.join(RUN_RECORD);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }
}

fn pretty(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

pub fn cmd_generate_data(inv: &Invocation) -> Result<PathBuf> {
    inv.config.validate()?;
    let cfg = &inv.config;
    let dir = inv.subdir("data")?;
    let mut prov = Provenance::new();
    let world = build_world(&cfg.world, cfg.seed())?;
    let codebook = match cfg.quantizer.token_source {
        TokenSourceKind::PhonemeTable => None,
        TokenSourceKind::Codebook => {
            let p = inv.codebook_path();
            prov.input(inv, &p)?;
            Some(load_codebook(&p)?)
        }
    };
    let tokens = match &codebook {
        Some(cb) => crate::corpus::TokenSource::Codebook(cb),
        None => crate::corpus::TokenSource::PhonemeTable {
            vocab: cfg.quantizer.size,
        },
    };
    let manifests = generate_dataset(&world, &cfg.world.dataset, cfg.seed(), tokens, &dir)?;
    for (split, m) in &manifests {
        prov.outputs.push(inv.display(&split_dir(&dir, split)));
        inv.say(format!("{split}: {} samples, manifest {}", m.sample_count, &m.content_hash()[..12]));
    }
    prov.outputs.push(inv.display(&dir.join(WORLD_FILE)));
    prov.finish(inv, "generate-data", &dir)?;
    Ok(dir)
}

pub fn cmd_fit_tokenizer(inv: &Invocation) -> Result<PathBuf> {
    inv.config.validate()?;
    let cfg = &inv.config;
    let dir = inv.subdir("tokenizer")?;
    let world = build_world(&cfg.world, cfg.seed())?;
    let feats = world.sample_audio_features(cfg.quantizer.fit_samples, cfg.seed());
    let cb = fit_codebook(&feats, cfg.quantizer.size, cfg.quantizer.iters, cfg.seed())?;
    let mut prov = Provenance::new();
    let path = dir.join(CODEBOOK_FILE);
    save_codebook(&cb, &path)?;
    prov.outputs.push(inv.display(&path));
    let mut csv = String::from("iteration,distortion\n");
    for (i, d) in cb.history.iter().enumerate() {
        csv.push_str(&format!("{},{d:.9}\n", i + 1));
    }
    prov.write(inv, &dir.join("distortion.csv"), csv.as_bytes())?;
    inv.say(format!("codebook of {} centroids, distortion {:.6}", cb.size(), cb.fit_distortion));
    prov.finish(inv, "fit-tokenizer", &dir)?;
    Ok(path)
}

struct Data {
    world: World,
    train: Dataset,
    eval: Dataset,
}

fn load_data(data_dir: &Path) -> Result<Data> {
    let world = load_world(data_dir)?;
    let fp = Some(world.fingerprint());
    let train = load_dataset(&split_dir(data_dir, "train"), fp)?;
    let eval = load_dataset(&split_dir(data_dir, "eval"), fp)?;
    Ok(Data { world, train, eval })
}

pub fn cmd_train(inv: &Invocation) -> Result<PathBuf> {
    inv.config.validate()?;
    let cfg = &inv.config;
    let dir = inv.subdir("train")?;
    let data_dir = inv.data_dir();
    let data = load_data(&data_dir)?;
    let mut prov = Provenance::new();
    prov.dataset_inputs(inv, &data_dir)?;
    let enc = encoder_config(&cfg.model, &data.world, &data.train.manifest);
    let model = Model::new(enc, cfg.seed())?;
    inv.say(format!("training {} parameters on {} samples", model.params.num_scalars(), data.train.len()));
    let tc = TrainConfig {
        data_dir: Some(PathBuf::from(inv.display(&data_dir))),
        ..cfg.train.clone()
    };
    let outcome = train(&tc, model, &data.train, Some(&data.eval), &data.world, Some(&dir))?;
    for e in &outcome.log {
        let metric = e.eval_metric.as_ref().map(|m| format!(" {} {:.4}", m.name, m.value)).unwrap_or_default();
        inv.say(format!("epoch {:3} total {:.5} task {:.5} sync {:.5}{metric}", e.epoch, e.l_total, e.l_task, e.l_sync));
    }
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let p = entry.map_err(|e| Error::io(&dir, e))?.path();
        if p.file_name().is_some_and(|n| n != RUN_RECORD) {
            prov.outputs.push(inv.display(&p));
        }
    }
    prov.finish(inv, "train", &dir)?;
    Ok(dir.join(FINAL_CHECKPOINT))
}

fn only_checkpoint(inv: &Invocation) -> Result<PathBuf> {
    let mut c = inv.checkpoints_or_default();
    if c.len() != 1 {
        return Err(Error::Config(format!("expected one --checkpoint, got {}", c.len())));
    }
    Ok(c.remove(0))
}

fn check_fingerprint(ck: &Checkpoint, world: &World, path: &Path) -> Result<()> {
    match ck.meta.get("world_fingerprint").and_then(|v| v.as_str()) {
        Some(fp) if fp != world.fingerprint() => Err(Error::FingerprintMismatch {
            found: fp.to_string(),
            expected: format!("{} (checkpoint {})", world.fingerprint(), path.display()),
        }),
        _ => Ok(()),
    }
}

pub fn cmd_evaluate(inv: &Invocation) -> Result<PathBuf> {
    inv.config.validate()?;
    let ckpt = only_checkpoint(inv)?;
    let dir = inv.subdir("eval")?;
    let data_dir = inv.data_dir();
    let data = load_data(&data_dir)?;
    let mut prov = Provenance::new();
    prov.dataset_inputs(inv, &data_dir)?;
    prov.input(inv, &ckpt)?;
    let ck = load_checkpoint(&ckpt)?;
    check_fingerprint(&ck, &data.world, &ckpt)?;
    let report = evaluate(&ck.model, &data.eval, &data.world)?;
    if let Some(t) = report.top1 {
        inv.say(format!("top-1 {t:.4}"));
    }
    if let (Some(w), Some(p)) = (report.wer, report.perplexity) {
        inv.say(format!("WER {w:.4} perplexity {p:.4}"));
    }
    let path = dir.join("metrics.json");
    prov.write(inv, &path, &pretty(&report)?)?;
    prov.finish(inv, "evaluate", &dir)?;
    Ok(path)
}

pub fn cmd_ablation(inv: &Invocation) -> Result<PathBuf> {
    inv.config.validate()?;
    let cfg = &inv.config;
    let dir = inv.subdir("ablation")?;
    let data_dir = inv.data_dir();
    let data = load_data(&data_dir)?;
    let mut prov = Provenance::new();
    prov.dataset_inputs(inv, &data_dir)?;
    let report = run_ablation_grid(&cfg.train, &cfg.model, &data.world, &data.train, &data.eval, Some(&dir))?;
    let csv = report.to_csv();
    inv.say(csv.trim_end());
    prov.write(inv, &dir.join("ablation.csv"), csv.as_bytes())?;
    prov.write(inv, &dir.join("report.json"), &pretty(&report)?)?;
    for r in &report.rows {
        let cell = dir.join(format!("sync_{}_ctc_{}", u8::from(r.sync), u8::from(r.ctc)));
        prov.outputs.push(inv.display(&cell.join(METRICS_FILE)));
        prov.outputs.push(inv.display(&cell.join(FINAL_CHECKPOINT)));
    }
    prov.finish(inv, "ablation", &dir)?;
    Ok(dir.join("ablation.csv"))
}

/// Method name implied by a checkpoint's stored training configuration.
pub fn method_label(train: &TrainConfig) -> &'static str {
    match train.sync_variant {
        SyncVariant::Off => "vanilla",
        SyncVariant::Full if train.lambda == 0.0 => "vanilla",
        SyncVariant::Full => "sync",
        SyncVariant::Masked => "masked",
    }
}

pub fn cmd_analyze_homophenes(inv: &Invocation) -> Result<PathBuf> {
    inv.config.validate()?;
    if inv.checkpoints.len() < 2 {
        return Err(Error::Config("analyze-homophenes needs at least two --checkpoint files".into()));
    }
    let dir = inv.subdir("homophenes")?;
    let data_dir = inv.data_dir();
    let data = load_data(&data_dir)?;
    let mut prov = Provenance::new();
    prov.dataset_inputs(inv, &data_dir)?;
    let current_split = data.eval.manifest.content_hash();
    let labels: Vec<usize> = data
        .eval
        .samples
        .iter()
        .map(|s| s.label.word().ok_or_else(|| Error::Config("homophene analysis needs word-mode data".into())))
        .collect::<Result<_>>()?;

    let mut methods = Vec::new();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for path in &inv.checkpoints {
        prov.input(inv, path)?;
        let ck = load_checkpoint(path)?;
        check_fingerprint(&ck, &data.world, path)?;
        let tc: TrainConfig = serde_json::from_value(ck.meta.get("train").cloned().unwrap_or_default())
            .map_err(|e| Error::CheckpointMismatch(format!("{}: no usable training config ({e})", path.display())))?;
        let split_id = ck
            .meta
            .get("eval_split")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::SplitMismatch(format!("{} records no eval split", path.display())))?
            .to_string();
        let base = method_label(&tc);
        let n = seen.entry(base).or_insert(0);
        *n += 1;
        let method = if *n == 1 { base.to_string() } else { format!("{base}_{n}") };
        let report = evaluate(&ck.model, &data.eval, &data.world)?;
        methods.push(MethodPredictions {
            method,
            split_id,
            predictions: report.predictions.unwrap_or_default(),
        });
    }
    if let Some(m) = methods.iter().find(|m| m.split_id != current_split) {
        return Err(Error::SplitMismatch(format!(
            "{} was trained against eval split {}, the data directory holds {}",
            m.method, m.split_id, current_split
        )));
    }
    let report = homophene_f1_gain(&methods, &inv.config.analysis.vanilla, &labels, &homophene_pairs(&data.world))?;
    let csv = report.to_csv();
    inv.say(csv.trim_end());
    prov.write(inv, &dir.join("homophenes.csv"), csv.as_bytes())?;
    prov.write(inv, &dir.join("report.json"), &pretty(&report)?)?;
    prov.finish(inv, "analyze-homophenes", &dir)?;
    Ok(dir.join("homophenes.csv"))
}

pub fn cmd_analyze_attention(inv: &Invocation) -> Result<PathBuf> {
    inv.config.validate()?;
    let ckpt = only_checkpoint(inv)?;
    let dir = inv.subdir("attention")?;
    let data_dir = inv.data_dir();
    let data = load_data(&data_dir)?;
    let mut prov = Provenance::new();
    prov.dataset_inputs(inv, &data_dir)?;
    prov.input(inv, &ckpt)?;
    let ck = load_checkpoint(&ckpt)?;
    check_fingerprint(&ck, &data.world, &ckpt)?;
    let mut report = AttentionDistanceReport::default();
    for s in data.eval.samples.iter().take(inv.config.analysis.attention_samples.max(1)) {
        let frames = ck.model.input_frames(s)?;
        let (_, rec) = ck.model.encode(&frames, true)?;
        report.push(&rec.expect("recording was requested"))?;
    }
    inv.say(format!(
        "mean attention distance {:.4} over {} samples",
        report.overall_mean(),
        report.num_samples()
    ));
    prov.write(inv, &dir.join("attention.csv"), report.to_csv().as_bytes())?;
    prov.write(inv, &dir.join("summary.csv"), report.summary_csv().as_bytes())?;
    prov.finish(inv, "analyze-attention", &dir)?;
    Ok(dir.join("attention.csv"))
}

/// Exit status for a failed command: 1 for usage/config problems, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        _ => 2,
    }
}
