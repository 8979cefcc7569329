//! `rnnt-adapt`: every pipeline stage as a subcommand over flat-file
//! artifacts in a work directory. Each run writes a JSON report with the
//! config hash, seeds, input and output artifact hashes, metrics and wall
//! time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};

use rnnt_adapt::adaptation::sample_utterance;
use rnnt_adapt::corpus::{read_lines, read_manifest, write_lines, write_manifest, Domain, Role, Utterance};
use rnnt_adapt::decode::{corpus_wer, DecodeConfig, NGramLm};
use rnnt_adapt::eval::{internal_lm_perplexity, word_level_perplexity, GridCorpus};
use rnnt_adapt::model::{LanguageModel, TransducerModel};
use rnnt_adapt::par::Parallelism;
use rnnt_adapt::pipeline::{self as pl, DecodedUtterance, GridStages, PipelineConfig};
use rnnt_adapt::seed;
use rnnt_adapt::tokenizer::Vocab;

const PRETRAIN: &str = "data/pretrain.txt";
const PRETRAIN_HELDOUT: &str = "data/pretrain_heldout.txt";
const GENERAL_TRAIN: &str = "data/general_train.jsonl";
const GENERAL_TEST: &str = "data/general_test.jsonl";
const IN_DOMAIN_TEST: &str = "data/in_domain_test.jsonl";
const IN_DOMAIN_TEXT: &str = "data/in_domain_adapt.txt";
const VOCAB: &str = "vocab.json";
const LM: &str = "lm.ckpt";
const CTC: &str = "ctc.ckpt";
const RNNT: &str = "rnnt.ckpt";
const RNNT_HEAD: &str = "rnnt_head.ckpt";
const ADAPTED: &str = "adapted.ckpt";
const DECODED: &str = "decode.jsonl";

/// Checkpoint metadata key marking a head re-estimated on transcripts.
const HEAD_SOURCE: &str = "lm_head_source";

#[derive(Parser)]
#[command(name = "rnnt-adapt", version, about = "Text-only prediction-network adaptation of RNN transducers")]
struct Cli {
    /// TOML pipeline configuration; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; every stage derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `sequential` or `rayon`.
    #[arg(long, global = true, value_parser = parse_parallelism)]
    parallelism: Option<Parallelism>,
    /// Directory holding all artifacts.
    #[arg(long, global = true, default_value = "work")]
    work_dir: PathBuf,
    /// Run-report path (default: <work-dir>/reports/<command>.json).
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpora under <work-dir>/data.
    GenData,
    /// Learn word pieces from pretraining text and paired transcripts.
    TrainVocab,
    /// Train the prediction network and LM head on pretraining text.
    PretrainLm,
    /// Initialize a fresh encoder with CTC on paired general-domain data.
    TrainCtc {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the transducer from the CTC encoder and the pretrained LM.
    TrainRnnt {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        ctc: Option<PathBuf>,
        #[arg(long, conflicts_with = "no_init_lm")]
        init_lm: Option<PathBuf>,
        /// Keep the prediction network randomly initialized.
        #[arg(long)]
        no_init_lm: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Re-estimate the LM head on transcripts with the prediction network frozen.
    TrainLmHead {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Adapt the prediction network on in-domain text.
    Adapt {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Plain text (one utterance per line) or a manifest.
        #[arg(long)]
        texts: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        w_b: Option<f64>,
        #[arg(long)]
        w_n: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        max_norm_change: Option<f64>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Beam-search decode a manifest to JSON lines.
    Decode {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        beam_width: Option<usize>,
        /// n-gram JSON, or text (one utterance per line) to train one from.
        #[arg(long)]
        fusion_lm: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        fusion_weight: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Pooled WER of decoder output against a reference manifest.
    EvalWer {
        #[arg(long)]
        decoded: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Word-level perplexity of an LM or a transducer's LM head.
    EvalPpl {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Plain text (one utterance per line) or a manifest.
        #[arg(long)]
        texts: Option<PathBuf>,
        /// Score the joint network's internal LM instead of the LM head.
        #[arg(long)]
        internal: bool,
    },
    /// Perplexity of every stage on the pretrain, transcript and in-domain sets.
    PplGrid {
        #[arg(long)]
        init_lm: Option<PathBuf>,
        /// Transducer with the initializing LM's head.
        #[arg(long)]
        old: Option<PathBuf>,
        /// Transducer with the re-estimated head; also scored as internal LM.
        #[arg(long)]
        new: Option<PathBuf>,
        #[arg(long)]
        adapted: Option<PathBuf>,
        /// Transducer trained without LM initialization, with a re-estimated head.
        #[arg(long)]
        uninit: Option<PathBuf>,
        /// Output stem; writes <stem>.json and <stem>.txt.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Draw utterances from an LM at temperature 1.
    SampleLm {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        max_length: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainVocab => "train-vocab",
            Command::PretrainLm => "pretrain-lm",
            Command::TrainCtc { .. } => "train-ctc",
            Command::TrainRnnt { .. } => "train-rnnt",
            Command::TrainLmHead { .. } => "train-lm-head",
            Command::Adapt { .. } => "adapt",
            Command::Decode { .. } => "decode",
            Command::EvalWer { .. } => "eval-wer",
            Command::EvalPpl { .. } => "eval-ppl",
            Command::PplGrid { .. } => "ppl-grid",
            Command::SampleLm { .. } => "sample-lm",
        }
    }
}

fn parse_parallelism(s: &str) -> Result<Parallelism, String> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| format!("expected `sequential` or `rayon`, got `{s}`"))
}

#[derive(Serialize)]
struct RunReport {
    command: String,
    version: String,
    config_hash: String,
    config: PipelineConfig,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    metrics: Value,
    wall_seconds: f64,
}

/// Shared state of one subcommand run.
struct Run {
    command: &'static str,
    cfg: PipelineConfig,
    config_hash: String,
    work: PathBuf,
    report: Option<PathBuf>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    started: Instant,
}

impl Run {
    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.work.join(default))
    }

    /// Checks that an input artifact exists and records its hash.
    fn require(&mut self, path: &Path, producer: &str) -> Result<()> {
        if !path.exists() {
            bail!("missing {}: run `rnnt-adapt {producer}` first (or pass its path explicitly)", path.display());
        }
        self.inputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    fn produced(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    fn meta(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("config_hash".into(), Value::String(self.config_hash.clone()));
        m.insert("stage".into(), Value::String(self.command.into()));
        m.insert("seed".into(), json!(self.cfg.seed));
        m
    }

    /// Warns when an artifact was produced under a different configuration.
    fn check_meta(&self, path: &Path, meta: &Map<String, Value>) {
        if let Some(h) = meta.get("config_hash").and_then(Value::as_str) {
            if h != self.config_hash {
                eprintln!(
                    "warning: {} was produced with config hash {}, current run uses {}",
                    path.display(),
                    &h[..12.min(h.len())],
                    &self.config_hash[..12]
                );
            }
        }
    }

    fn par(&self) -> Parallelism {
        self.cfg.parallelism
    }

    fn vocab(&mut self) -> Result<Vocab> {
        let p = self.work.join(VOCAB);
        self.require(&p, "train-vocab")?;
        Ok(Vocab::load(&p)?)
    }

    fn manifest(&mut self, path: &Path) -> Result<Vec<Utterance>> {
        self.require(path, "gen-data")?;
        read_manifest(path).with_context(|| format!("reading {}", path.display()))
    }

    fn transducer(&mut self, path: &Path, producer: &str) -> Result<(TransducerModel, Map<String, Value>)> {
        self.require(path, producer)?;
        let (m, meta) = TransducerModel::load(path).with_context(|| format!("loading {}", path.display()))?;
        self.check_meta(path, &meta);
        Ok((m, meta))
    }

    /// Loads a language model or the `P ∘ L` of a transducer checkpoint.
    fn language_model(&mut self, path: &Path, producer: &str) -> Result<LanguageModel> {
        self.require(path, producer)?;
        let (_, meta) =
            rnnt_adapt::numerics::checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        self.check_meta(path, &meta);
        if meta.get("kind").and_then(Value::as_str) == Some("language_model") {
            Ok(LanguageModel::load(path)?.0)
        } else {
            let (m, _) = TransducerModel::load(path)?;
            LanguageModel::of(&m).with_context(|| format!("{} has no LM head", path.display()))
        }
    }

    /// Token sequences from a plain-text file or a manifest.
    fn texts(&mut self, path: &Path, producer: &str, vocab: &Vocab) -> Result<Vec<Vec<usize>>> {
        self.require(path, producer)?;
        let lines: Vec<String> = if path.extension().is_some_and(|e| e == "jsonl") {
            read_manifest(path)?.into_iter().map(|u| u.text).collect()
        } else {
            read_lines(path)?
        };
        Ok(pl::encode_all(vocab, &lines)?)
    }

    fn finish(self, metrics: Value) -> Result<()> {
        let report = RunReport {
            command: self.command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: self.config_hash.clone(),
            seeds: stage_seeds(&self.cfg),
            config: self.cfg,
            inputs: self.inputs,
            outputs: self.outputs,
            metrics,
            wall_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = self.report.unwrap_or_else(|| self.work.join("reports").join(format!("{}.json", self.command)));
        ensure_parent(&path)?;
        std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        eprintln!("{}: report written to {}", self.command, path.display());
        Ok(())
    }
}

fn stage_seeds(cfg: &PipelineConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("base".into(), cfg.seed),
        ("pretrain-lm".into(), cfg.pretrain_lm.seed),
        ("train-ctc".into(), cfg.ctc.seed),
        ("train-rnnt".into(), cfg.rnnt.seed),
        ("train-lm-head".into(), cfg.lm_head.seed),
        ("adapt".into(), cfg.adaptation.seed),
    ])
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(seed::content_hash(&bytes))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// Overlays `user` onto `base`, recursing into tables so a partially
/// specified stage keeps the pipeline's defaults for its other keys.
fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = match &cli.config {
        Some(p) => {
            let s = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let user: toml::Table = toml::from_str(&s).with_context(|| format!("parsing config {}", p.display()))?;
            let mut merged = serde_json::to_value(PipelineConfig::default())?;
            merge(&mut merged, serde_json::to_value(user)?);
            serde_json::from_value(merged).with_context(|| format!("invalid config {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    let base = cli.seed.unwrap_or(cfg.seed);
    let par = cli.parallelism.unwrap_or(cfg.parallelism);
    Ok(cfg.with_seed(base).with_parallelism(par))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    if let Command::Adapt { w_b, w_n, lr, max_norm_change, max_epochs, .. } = &cli.command {
        let a = &mut cfg.adaptation;
        a.w_b = w_b.unwrap_or(a.w_b);
        a.w_n = w_n.unwrap_or(a.w_n);
        a.lr.initial = lr.unwrap_or(a.lr.initial);
        a.max_norm_change = max_norm_change.unwrap_or(a.max_norm_change);
        a.max_epochs = max_epochs.unwrap_or(a.max_epochs);
    }
    let mut r = Run {
        command: cli.command.name(),
        config_hash: seed::config_hash(&cfg)?,
        cfg,
        work: cli.work_dir.clone(),
        report: cli.report.clone(),
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
        started: Instant::now(),
    };
    std::fs::create_dir_all(&r.work).with_context(|| format!("creating {}", r.work.display()))?;
    let metrics = match &cli.command {
        Command::GenData => gen_data(&mut r)?,
        Command::TrainVocab => train_vocab(&mut r)?,
        Command::PretrainLm => pretrain_lm(&mut r)?,
        Command::TrainCtc { manifest, output } => train_ctc(&mut r, manifest, output)?,
        Command::TrainRnnt { manifest, ctc, init_lm, no_init_lm, output } => {
            train_rnnt(&mut r, manifest, ctc, init_lm, *no_init_lm, output)?
        }
        Command::TrainLmHead { model, manifest, output } => train_lm_head(&mut r, model, manifest, output)?,
        Command::Adapt { model, texts, output, .. } => adapt(&mut r, model, texts, output)?,
        Command::Decode { model, manifest, beam_width, fusion_lm, fusion_weight, output } => {
            decode(&mut r, model, manifest, *beam_width, fusion_lm, *fusion_weight, output)?
        }
        Command::EvalWer { decoded, manifest } => eval_wer(&mut r, decoded, manifest)?,
        Command::EvalPpl { model, texts, internal } => eval_ppl(&mut r, model, texts, *internal)?,
        Command::PplGrid { init_lm, old, new, adapted, uninit, output } => {
            ppl_grid(&mut r, [init_lm, old, new, adapted, uninit], output)?
        }
        Command::SampleLm { model, count, max_length, output } => {
            sample_lm(&mut r, model, *count, *max_length, output)?
        }
    };
    r.finish(metrics)
}

fn gen_data(r: &mut Run) -> Result<Value> {
    let c = pl::generate_corpora(&r.cfg)?;
    std::fs::create_dir_all(r.work.join("data"))?;
    for (rel, lines) in
        [(PRETRAIN, &c.pretrain), (PRETRAIN_HELDOUT, &c.pretrain_heldout), (IN_DOMAIN_TEXT, &c.in_domain_text)]
    {
        let p = r.work.join(rel);
        write_lines(&p, lines)?;
        r.produced(&p)?;
    }
    for (rel, utts) in
        [(GENERAL_TRAIN, &c.general_train), (GENERAL_TEST, &c.general_test), (IN_DOMAIN_TEST, &c.in_domain_test)]
    {
        let p = r.work.join(rel);
        write_manifest(&p, utts)?;
        r.produced(&p)?;
    }
    Ok(json!({
        "pretrain_sentences": c.pretrain.len(),
        "pretrain_heldout": c.pretrain_heldout.len(),
        "general_train": c.general_train.len(),
        "general_test": c.general_test.len(),
        "in_domain_test": c.in_domain_test.len(),
        "in_domain_text": c.in_domain_text.len(),
    }))
}

fn train_vocab(r: &mut Run) -> Result<Value> {
    let pretrain = r.work.join(PRETRAIN);
    r.require(&pretrain, "gen-data")?;
    let mut texts = read_lines(&pretrain)?;
    let train = r.work.join(GENERAL_TRAIN);
    texts.extend(r.manifest(&train)?.into_iter().map(|u| u.text));
    let vocab = rnnt_adapt::tokenizer::train_vocab(&texts, r.cfg.data.vocab_size)?;
    let out = r.work.join(VOCAB);
    vocab.save(&out)?;
    r.produced(&out)?;
    Ok(json!({ "vocab_size": vocab.size(), "merges": vocab.merges().len() }))
}

fn pretrain_lm(r: &mut Run) -> Result<Value> {
    let vocab = r.vocab()?;
    let texts = r.texts(&r.work.join(PRETRAIN), "gen-data", &vocab)?;
    let (lm, epochs) = pl::run_pretrain_lm(&r.cfg, &vocab, &texts)?;
    let heldout = r.texts(&r.work.join(PRETRAIN_HELDOUT), "gen-data", &vocab)?;
    let ppl = word_level_perplexity("pretrain-heldout", &lm, &heldout, &vocab, r.par())?;
    let out = r.work.join(LM);
    lm.save(&out, &r.meta())?;
    r.produced(&out)?;
    Ok(json!({ "epochs": epochs, "heldout_perplexity": ppl }))
}

/// Paired examples from a manifest that holds only general-domain
/// training utterances, so in-domain data never reaches acoustic training.
fn acoustic_data(
    r: &mut Run,
    manifest: &Option<PathBuf>,
    vocab: &Vocab,
) -> Result<Vec<rnnt_adapt::train::PairedExample>> {
    let path = r.path(manifest, GENERAL_TRAIN);
    let utts = r.manifest(&path)?;
    if let Some(u) = utts.iter().find(|u| u.domain != Domain::General || u.role != Role::Train) {
        bail!(
            "{}: utterance {} is {}/{:?}; acoustic training accepts only general-domain training data",
            path.display(),
            u.id,
            u.domain.label(),
            u.role
        );
    }
    Ok(pl::paired_examples(vocab, &utts)?)
}

fn train_ctc(r: &mut Run, manifest: &Option<PathBuf>, output: &Option<PathBuf>) -> Result<Value> {
    let vocab = r.vocab()?;
    let data = acoustic_data(r, manifest, &vocab)?;
    let (model, epochs) = pl::run_ctc(&r.cfg, &vocab, &data)?;
    let out = r.path(output, CTC);
    model.save(&out, &r.meta())?;
    r.produced(&out)?;
    Ok(json!({ "epochs": epochs }))
}

fn train_rnnt(
    r: &mut Run,
    manifest: &Option<PathBuf>,
    ctc: &Option<PathBuf>,
    init_lm: &Option<PathBuf>,
    no_init_lm: bool,
    output: &Option<PathBuf>,
) -> Result<Value> {
    let vocab = r.vocab()?;
    let data = acoustic_data(r, manifest, &vocab)?;
    let (model, _) = r.transducer(&r.path(ctc, CTC), "train-ctc")?;
    let lm = if no_init_lm { None } else { Some(r.language_model(&r.path(init_lm, LM), "pretrain-lm")?) };
    let (model, epochs) = pl::run_rnnt(&r.cfg, model, lm.as_ref(), &data)?;
    let out = r.path(output, RNNT);
    let mut meta = r.meta();
    meta.insert("lm_initialized".into(), Value::Bool(lm.is_some()));
    model.save(&out, &meta)?;
    r.produced(&out)?;
    Ok(json!({ "epochs": epochs, "lm_initialized": lm.is_some() }))
}

fn train_lm_head(
    r: &mut Run,
    model: &Option<PathBuf>,
    manifest: &Option<PathBuf>,
    output: &Option<PathBuf>,
) -> Result<Value> {
    let vocab = r.vocab()?;
    let (mut m, mut meta) = r.transducer(&r.path(model, RNNT), "train-rnnt")?;
    let transcripts = r.texts(&r.path(manifest, GENERAL_TRAIN), "gen-data", &vocab)?;
    let epochs = pl::run_lm_head(&r.cfg, &mut m, &transcripts)?;
    meta.extend(r.meta());
    meta.insert(HEAD_SOURCE.into(), Value::String("transcripts".into()));
    let out = r.path(output, RNNT_HEAD);
    m.save(&out, &meta)?;
    r.produced(&out)?;
    Ok(json!({ "epochs": epochs }))
}

fn adapt(r: &mut Run, model: &Option<PathBuf>, texts: &Option<PathBuf>, output: &Option<PathBuf>) -> Result<Value> {
    let vocab = r.vocab()?;
    let path = r.path(model, RNNT_HEAD);
    let (m, mut meta) = r.transducer(&path, "train-lm-head")?;
    if meta.get(HEAD_SOURCE).and_then(Value::as_str) != Some("transcripts") {
        bail!(
            "{} has no LM head re-estimated on transcripts; run `rnnt-adapt train-lm-head` on it before adapting",
            path.display()
        );
    }
    let d_a = r.texts(&r.path(texts, IN_DOMAIN_TEXT), "gen-data", &vocab)?;
    let (adapted, report) = pl::run_adaptation(&r.cfg.adaptation, &m, &d_a)?;
    meta.extend(r.meta());
    let out = r.path(output, ADAPTED);
    adapted.save(&out, &meta)?;
    r.produced(&out)?;
    Ok(json!({ "adaptation": report, "config": r.cfg.adaptation }))
}

fn fusion_lm(r: &mut Run, path: &Path, vocab: &Vocab) -> Result<NGramLm> {
    if path.extension().is_some_and(|e| e == "json") {
        r.require(path, "gen-data")?;
        return Ok(NGramLm::load(path)?);
    }
    let texts = r.texts(path, "gen-data", vocab)?;
    Ok(pl::train_ngram(&r.cfg.ngram, vocab, &texts)?)
}

fn decode(
    r: &mut Run,
    model: &Option<PathBuf>,
    manifest: &Option<PathBuf>,
    beam_width: Option<usize>,
    fusion: &Option<PathBuf>,
    fusion_weight: f64,
    output: &Option<PathBuf>,
) -> Result<Value> {
    let vocab = r.vocab()?;
    let (m, _) = r.transducer(&r.path(model, ADAPTED), "adapt")?;
    let utts = r.manifest(&r.path(manifest, IN_DOMAIN_TEST))?;
    let lm = match fusion {
        Some(p) if fusion_weight != 0.0 => Some(fusion_lm(r, p, &vocab)?),
        _ => None,
    };
    let cfg = DecodeConfig {
        beam_width: beam_width.unwrap_or(r.cfg.decode.beam_width),
        fusion_weight: if lm.is_some() { fusion_weight } else { 0.0 },
        ..r.cfg.decode.clone()
    };
    let decoded = pl::decode_corpus(&m, &utts, &vocab, &cfg, lm.as_ref(), r.par())?;
    let out = r.path(output, DECODED);
    ensure_parent(&out)?;
    let mut lines = String::new();
    for d in &decoded {
        lines.push_str(&serde_json::to_string(d)?);
        lines.push('\n');
    }
    std::fs::write(&out, lines).with_context(|| format!("writing {}", out.display()))?;
    r.produced(&out)?;
    let scored: Vec<&Utterance> = utts.iter().filter(|u| !u.text.trim().is_empty()).collect();
    let wer = if scored.len() == utts.len() { Some(pl::pooled_wer(&utts, &decoded)?.rate()) } else { None };
    Ok(json!({ "utterances": decoded.len(), "wer": wer, "decode": cfg, "fusion_lm": fusion }))
}

fn eval_wer(r: &mut Run, decoded: &Option<PathBuf>, manifest: &Option<PathBuf>) -> Result<Value> {
    let dpath = r.path(decoded, DECODED);
    r.require(&dpath, "decode")?;
    let hyps: BTreeMap<String, String> = read_lines(&dpath)?
        .iter()
        .map(|l| {
            let d: DecodedUtterance = serde_json::from_str(l)?;
            Ok((d.utterance_id, d.n_best.into_iter().next().map(|e| e.text).unwrap_or_default()))
        })
        .collect::<Result<_>>()?;
    let utts = r.manifest(&r.path(manifest, IN_DOMAIN_TEST))?;
    let pairs = utts
        .iter()
        .map(|u| {
            let h = hyps.get(&u.id).with_context(|| format!("{} is missing from {}", u.id, dpath.display()))?;
            Ok((u.text.as_str(), h.as_str()))
        })
        .collect::<Result<Vec<_>>>()?;
    let e = corpus_wer(&pairs)?;
    println!("WER {:.4} ({} errors / {} words)", e.rate(), e.errors(), e.reference_words);
    Ok(json!({ "wer": e.rate(), "edits": e }))
}

fn eval_ppl(r: &mut Run, model: &Option<PathBuf>, texts: &Option<PathBuf>, internal: bool) -> Result<Value> {
    let vocab = r.vocab()?;
    let mpath = r.path(model, ADAPTED);
    let tpath = r.path(texts, IN_DOMAIN_TEST);
    let corpus = tpath.display().to_string();
    let texts = r.texts(&tpath, "gen-data", &vocab)?;
    let report = if internal {
        let (m, _) = r.transducer(&mpath, "train-rnnt")?;
        internal_lm_perplexity(&corpus, &m, &texts, &vocab, r.par())?
    } else {
        let lm = r.language_model(&mpath, "pretrain-lm")?;
        word_level_perplexity(&corpus, &lm, &texts, &vocab, r.par())?
    };
    println!("word perplexity {:.3} over {} words", report.word_ppl, report.words);
    Ok(json!({ "perplexity": report, "internal_lm": internal }))
}

fn ppl_grid(r: &mut Run, paths: [&Option<PathBuf>; 5], output: &Option<PathBuf>) -> Result<Value> {
    let vocab = r.vocab()?;
    let [init, old, new, adapted, uninit] = paths;
    let init_lm = r.language_model(&r.path(init, LM), "pretrain-lm")?;
    let old_lm = r.language_model(&r.path(old, RNNT), "train-rnnt")?;
    let (new_model, _) = r.transducer(&r.path(new, RNNT_HEAD), "train-lm-head")?;
    let new_lm = LanguageModel::of(&new_model)?;
    let adapted_lm = r.language_model(&r.path(adapted, ADAPTED), "adapt")?;
    let uninit_lm = match uninit {
        Some(p) => Some(r.language_model(p, "train-lm-head")?),
        None => None,
    };
    let corpora = vec![
        GridCorpus {
            name: pl::COL_PRETRAIN.into(),
            texts: r.texts(&r.work.join(PRETRAIN_HELDOUT), "gen-data", &vocab)?,
        },
        GridCorpus { name: pl::COL_TRANSCRIPT.into(), texts: r.texts(&r.work.join(GENERAL_TEST), "gen-data", &vocab)? },
        GridCorpus {
            name: pl::COL_IN_DOMAIN.into(),
            texts: r.texts(&r.work.join(IN_DOMAIN_TEST), "gen-data", &vocab)?,
        },
    ];
    let stages = GridStages {
        init_lm: Some(&init_lm),
        old_head: Some(&old_lm),
        new_head: Some(&new_lm),
        adapted: Some(&adapted_lm),
        uninitialized: uninit_lm.as_ref(),
        internal: Some(&new_model),
    };
    let grid = pl::run_grid(&stages, &corpora, &vocab, r.par())?;
    let table = grid.to_table();
    print!("{table}");
    let stem = r.path(output, "ppl_grid");
    ensure_parent(&stem)?;
    let (json_path, txt_path) = (stem.with_extension("json"), stem.with_extension("txt"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&grid)? + "\n")?;
    std::fs::write(&txt_path, &table)?;
    r.produced(&json_path)?;
    r.produced(&txt_path)?;
    Ok(json!({ "grid": grid }))
}

fn sample_lm(
    r: &mut Run,
    model: &Option<PathBuf>,
    count: usize,
    max_length: usize,
    output: &Option<PathBuf>,
) -> Result<Value> {
    let vocab = r.vocab()?;
    let lm = r.language_model(&r.path(model, LM), "pretrain-lm")?;
    let mut rng = seed::rng(r.cfg.seed, "sample-lm");
    let samples = (0..count)
        .map(|_| Ok(vocab.decode(&sample_utterance(&lm, max_length, &mut rng)?)?))
        .collect::<Result<Vec<String>>>()?;
    for s in &samples {
        println!("{s}");
    }
    if let Some(p) = output {
        ensure_parent(p)?;
        write_lines(p, &samples)?;
        r.produced(p)?;
    }
    Ok(json!({ "samples": samples }))
}
