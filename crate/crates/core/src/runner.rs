//! Config-driven experiment runner behind the `sv-backdoor` binary.
//!
//! Every stage writes deterministic files into an output directory:
//! feature caches (`synth`), a checkpoint plus JSON-lines history (`train`),
//! an evaluation report (`eval`) and a summary table (`experiment`). Each
//! stage also writes `manifest.json` with the config hash and a checksum of
//! every file it produced.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataio::{load_wav_dir, read_cache_file, split_dataset, synth_dataset, write_cache_file, Dataset, FeatureSequence, Role, SynthSpec};
use crate::error::{invalid, Error, Result};
use crate::eval::{attack_query_ids, evaluate_model, trials_csv, EvalOutcome, EvalProtocol, EvalReport};
use crate::model::{load_checkpoint, save_checkpoint, NetConfig, Weights};
use crate::poison::{Method, PolicyKind};
use crate::trainer::{attacker_pool, build_plan, train_run_with, PoisonConfig, TrainConfig, TrainReport};
use crate::config_hash;

pub const TRAIN_CACHE: &str = "train.feats";
pub const EVAL_CACHE: &str = "eval.feats";
pub const ATTACKER_CACHE: &str = "attacker.feats";
pub const CHECKPOINT: &str = "model.ckpt";
pub const HISTORY: &str = "train_history.jsonl";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const TRIALS_CSV: &str = "trials.csv";
pub const SUMMARY: &str = "summary.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    #[serde(flatten)]
    pub spec: SynthSpec,
    /// Generate one extra speaker to act as the attacker.
    #[serde(default = "yes")]
    pub attacker: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticSource>,
    /// Directory holding `train.feats`, `eval.feats` and optionally `attacker.feats`.
    pub cache_dir: Option<PathBuf>,
    /// Directory of `<speaker>/<utt>.wav` files.
    pub wav_dir: Option<PathBuf>,
    pub n_eval_speakers: usize,
    /// Speaker removed from the pool to act as attacker (`wav_dir` only).
    pub attacker_label: Option<String>,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    #[serde(flatten)]
    pub protocol: EvalProtocol,
    pub dump_trials: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: NetConfig,
    pub train: TrainConfig,
    pub poison: Option<PoisonConfig>,
    /// Variants for `experiment`; empty means a single benign run.
    pub sweep: Vec<PoisonConfig>,
    pub eval: EvalSection,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text)?)
    }

    pub fn from_value(v: Value) -> Result<Self> {
        serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (k, val) in overrides {
            apply_override(&mut v, k, val)?;
        }
        Self::from_value(v)
    }

    /// Use `seed` for the train, eval, split and synthesis seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.eval.protocol.seed = seed;
        self.data.split_seed = seed;
        if let Some(s) = &mut self.data.synthetic {
            s.spec.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sources = [self.data.synthetic.is_some(), self.data.cache_dir.is_some(), self.data.wav_dir.is_some()];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return Err(Error::Config("data: exactly one of `synthetic`, `cache_dir`, `wav_dir` must be set".into()));
        }
        if self.poison.is_some() && self.train.poison.is_some() {
            return Err(Error::Config("poison: set either `poison` or `train.poison`, not both".into()));
        }
        self.model.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        self.train.validate(&self.model).map_err(|e| Error::Config(format!("train: {e}")))?;
        Ok(())
    }

    /// Training config with the top-level poison section folded in.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if self.poison.is_some() {
            t.poison = self.poison.clone();
        }
        t
    }

    /// Hash of the config without its output location.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        config_hash(&c)
    }
}

/// Set `dotted.key` in a JSON document, parsing `raw` as JSON when possible
/// and as a string otherwise. Intermediate objects are created as needed.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad override key {key:?}")));
        }
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                return Err(Error::Config(format!("override {key:?}: {} is not an object", parts[..i].join("."))));
            }
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!()
}

/// Train / eval / attacker splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
    pub attacker: Option<Dataset>,
}

pub const SYNTH_ATTACKER: &str = "attacker";

pub fn load_data(cfg: &DataConfig) -> Result<Splits> {
    if let Some(src) = &cfg.synthetic {
        let mut spec = src.spec.clone();
        if src.attacker {
            spec.n_speakers += 1;
        }
        let mut all = synth_dataset(&spec)?;
        let attacker = if src.attacker {
            let last = all.labels().last().expect("n >= 1").to_string();
            let mut a = all.take_speaker(&last, Role::Attacker)?;
            let utts = a.speakers.remove(&last).expect("present");
            let renamed = utts.into_iter().map(|mut u| {
                u.utterance_id = u.utterance_id.replacen(&last, SYNTH_ATTACKER, 1);
                u.speaker_label = SYNTH_ATTACKER.to_string();
                u
            });
            Some(Dataset::from_utterances(Role::Attacker, renamed))
        } else {
            None
        };
        let (train, eval) = split_dataset(&all, cfg.n_eval_speakers, cfg.split_seed)?;
        return Ok(Splits { train, eval, attacker });
    }
    if let Some(dir) = &cfg.cache_dir {
        let train = read_cache_file(&dir.join(TRAIN_CACHE), Role::Train)?;
        let eval = read_cache_file(&dir.join(EVAL_CACHE), Role::Eval)?;
        let apath = dir.join(ATTACKER_CACHE);
        let attacker = if apath.exists() { Some(read_cache_file(&apath, Role::Attacker)?) } else { None };
        return Ok(Splits { train, eval, attacker });
    }
    if let Some(dir) = &cfg.wav_dir {
        let mut all = load_wav_dir(dir, Role::Train)?;
        let attacker = match &cfg.attacker_label {
            Some(l) => Some(all.take_speaker(l, Role::Attacker)?),
            None => None,
        };
        let (train, eval) = split_dataset(&all, cfg.n_eval_speakers, cfg.split_seed)?;
        return Ok(Splits { train, eval, attacker });
    }
    Err(Error::Config("data: no source configured".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub versions: Vec<(String, String)>,
    pub outputs: Vec<OutputFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub eval: u64,
    pub split: u64,
    pub synth: Option<u64>,
}

fn write_manifest(out: &Path, command: &str, cfg: &ExperimentConfig, files: &[&str]) -> Result<()> {
    let outputs = files
        .iter()
        .map(|f| {
            let bytes = fs::read(out.join(f))?;
            Ok(OutputFile { file: f.to_string(), sha256: hex::encode(Sha256::digest(&bytes)) })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        command: command.to_string(),
        config_hash: cfg.hash()?,
        seeds: Seeds {
            train: cfg.train.seed,
            eval: cfg.eval.protocol.seed,
            split: cfg.data.split_seed,
            synth: cfg.data.synthetic.as_ref().map(|s| s.spec.seed),
        },
        versions: vec![(env!("CARGO_PKG_NAME").to_string(), env!("CARGO_PKG_VERSION").to_string())],
        outputs,
    };
    write_json(&out.join(MANIFEST), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

/// Write the feature caches for all splits.
pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let run = || -> Result<Vec<String>> {
        if cfg.data.synthetic.is_none() {
            return Err(Error::Config("data.synthetic: synth needs a synthetic data section".into()));
        }
        ensure_dir(out)?;
        let splits = load_data(&cfg.data)?;
        write_cache_file(&splits.train, &out.join(TRAIN_CACHE))?;
        write_cache_file(&splits.eval, &out.join(EVAL_CACHE))?;
        let mut files = vec![TRAIN_CACHE, EVAL_CACHE];
        if let Some(a) = &splits.attacker {
            write_cache_file(a, &out.join(ATTACKER_CACHE))?;
            files.push(ATTACKER_CACHE);
        }
        write_manifest(out, "synth", cfg, &files)?;
        Ok(files.iter().map(|s| s.to_string()).collect())
    };
    run().map_err(|e| e.in_stage("synth"))
}

#[derive(Serialize)]
struct HistorySummary<'a> {
    summary: &'a TrainReport,
}

fn train_into(cfg: &ExperimentConfig, splits: &Splits, out: &Path) -> Result<(Weights, TrainReport)> {
    ensure_dir(out)?;
    let tcfg = cfg.train_config();
    let mut history = BufWriter::new(File::create(out.join(HISTORY))?);
    let mut io_err = None;
    let outcome = train_run_with(&splits.train, splits.attacker.as_ref(), &cfg.model, &tcfg, |rec| {
        if io_err.is_none() {
            if let Err(e) = serde_json::to_writer(&mut history, rec).map_err(Error::from).and_then(|_| Ok(history.write_all(b"\n")?)) {
                io_err = Some(e);
            }
        }
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            history.flush()?;
            return Err(e);
        }
    };
    if let Some(e) = io_err {
        return Err(e);
    }
    save_checkpoint(&outcome.weights, &out.join(CHECKPOINT))?;
    let mut report = outcome.report;
    report.config_hash = cfg.hash()?;
    report.checkpoint = Some(CHECKPOINT.to_string());
    serde_json::to_writer(&mut history, &HistorySummary { summary: &report })?;
    history.write_all(b"\n")?;
    history.flush()?;
    Ok((outcome.weights, report))
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainReport> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let splits = load_data(&cfg.data).map_err(|e| e.in_stage("data"))?;
    let (_, report) = train_into(cfg, &splits, out).map_err(|e| e.in_stage("train"))?;
    write_manifest(out, "train", cfg, &[HISTORY, CHECKPOINT]).map_err(|e| e.in_stage("train"))?;
    Ok(report)
}

/// Attacker utterances used as ASR queries for the configured training run.
pub fn attack_queries(cfg: &ExperimentConfig, splits: &Splits) -> Result<Vec<FeatureSequence>> {
    let attacker = splits
        .attacker
        .as_ref()
        .ok_or_else(|| Error::Config("data: evaluation needs attacker utterances for ASR".into()))?;
    let tcfg = cfg.train_config();
    let plan = build_plan(&tcfg, attacker)?;
    let (_, pool) = attacker_pool(attacker)?;
    let ids: Vec<String> = pool.iter().map(|u| u.utterance_id.clone()).collect();
    let chosen = attack_query_ids(plan.as_ref().map(|p| &p.policy), &ids, tcfg.speakers_per_batch, &cfg.eval.protocol)?;
    let mut seen = Vec::new();
    for id in chosen {
        if !seen.iter().any(|u: &FeatureSequence| u.utterance_id == id) {
            seen.push((*pool.iter().find(|u| u.utterance_id == id).expect("from pool")).clone());
        }
    }
    Ok(seen)
}

fn eval_into(cfg: &ExperimentConfig, splits: &Splits, weights: &Weights, out: &Path) -> Result<EvalReport> {
    ensure_dir(out)?;
    let queries = attack_queries(cfg, splits)?;
    let EvalOutcome { mut report, trials } = evaluate_model(weights, &splits.eval, &queries, &cfg.eval.protocol)?;
    report.plan = match &splits.attacker {
        Some(a) => build_plan(&cfg.train_config(), a)?.map(|p| p.summary()),
        None => None,
    };
    report.config_hash = Some(cfg.hash()?);
    write_json(&out.join(EVAL_REPORT), &report)?;
    if cfg.eval.dump_trials {
        fs::write(out.join(TRIALS_CSV), trials_csv(&trials))?;
    }
    Ok(report)
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let weights = load_checkpoint(checkpoint).map_err(|e| {
        Error::Config(format!("checkpoint {}: {e}", checkpoint.display())).in_stage("eval")
    })?;
    let splits = load_data(&cfg.data).map_err(|e| e.in_stage("data"))?;
    let report = eval_into(cfg, &splits, &weights, out).map_err(|e| e.in_stage("eval"))?;
    let mut files = vec![EVAL_REPORT];
    if cfg.eval.dump_trials {
        files.push(TRIALS_CSV);
    }
    write_manifest(out, "eval", cfg, &files).map_err(|e| e.in_stage("eval"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub method: Option<Method>,
    pub policy: Option<PolicyKind>,
    pub alpha: f64,
    pub eer: f64,
    pub asr: f64,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub rows: Vec<SummaryRow>,
}

impl ExperimentSummary {
    /// Fixed-width table with EER and ASR in percent.
    pub fn table(&self) -> String {
        let mut s = format!("{:<16} {:>6} {:>8} {:>8}\n", "attack", "alpha", "EER(%)", "ASR(%)");
        for r in &self.rows {
            s.push_str(&format!("{:<16} {:>6.2} {:>8.1} {:>8.1}\n", r.variant, r.alpha, 100.0 * r.eer, 100.0 * r.asr));
        }
        s
    }
}

fn variant_name(p: Option<&PoisonConfig>) -> String {
    match p {
        None => "Benign".into(),
        Some(p) => format!("{}+{}", p.policy, p.method),
    }
}

/// Synthesize or load data once, then train and evaluate every sweep
/// variant in its own subdirectory (`variant-<i>`).
pub fn cmd_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentSummary> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    ensure_dir(out).map_err(|e| e.in_stage("experiment"))?;
    let splits = load_data(&cfg.data).map_err(|e| e.in_stage("data"))?;
    let variants: Vec<Option<PoisonConfig>> = if cfg.sweep.is_empty() {
        vec![cfg.poison.clone().or_else(|| cfg.train.poison.clone())]
    } else {
        cfg.sweep.iter().cloned().map(Some).collect()
    };
    let mut rows = Vec::new();
    for (i, variant) in variants.iter().enumerate() {
        let mut vcfg = cfg.clone();
        vcfg.sweep.clear();
        vcfg.poison = None;
        vcfg.train.poison = variant.clone();
        let dir_name = format!("variant-{i}");
        let dir = out.join(&dir_name);
        let (weights, _) = train_into(&vcfg, &splits, &dir).map_err(|e| e.in_stage("train"))?;
        let report = eval_into(&vcfg, &splits, &weights, &dir).map_err(|e| e.in_stage("eval"))?;
        let mut files = vec![HISTORY, CHECKPOINT, EVAL_REPORT];
        if cfg.eval.dump_trials {
            files.push(TRIALS_CSV);
        }
        write_manifest(&dir, "experiment-variant", &vcfg, &files).map_err(|e| e.in_stage("experiment"))?;
        rows.push(SummaryRow {
            variant: variant_name(variant.as_ref()),
            method: variant.as_ref().map(|p| p.method),
            policy: variant.as_ref().map(|p| p.policy),
            alpha: variant.as_ref().map_or(0.0, |p| p.alpha),
            eer: report.eer,
            asr: report.asr,
            output: dir_name,
        });
    }
    let summary = ExperimentSummary { config_hash: cfg.hash().map_err(|e| e.in_stage("experiment"))?, rows };
    write_json(&out.join(SUMMARY), &summary).map_err(|e| e.in_stage("experiment"))?;
    write_manifest(out, "experiment", cfg, &[SUMMARY]).map_err(|e| e.in_stage("experiment"))?;
    Ok(summary)
}

/// Split `--a.b=value` style arguments into key/value pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    args.iter()
        .map(|a| {
            let body = a.strip_prefix("--").ok_or_else(|| invalid(format!("unexpected argument {a:?}")))?;
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| invalid(format!("override {a:?} must look like --key.path=value")))?;
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}
