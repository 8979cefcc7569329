//! End-to-end stages shared by the command-line tool and the experiment
//! tests: data generation, vocabulary, LM pretraining, CTC and transducer
//! training, LM-head estimation, adaptation, decoding and evaluation.

use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt, train_lm_head, AdaptationConfig, AdaptationReport};
use crate::corpus::{gen_corpus, Domain, DomainSpec, FeatureConfig, MaskConfig, Role, Synthesizer, Utterance};
use crate::decode::{beam_search, corpus_wer, wer, Boundaries, DecodeConfig, EditCounts, NGramLm};
use crate::error::{Error, Result};
use crate::eval::{perplexity_grid, GridCorpus, GridModel, PerplexityGrid};
use crate::model::{LanguageModel, ModelConfig, TransducerModel};
use crate::numerics::LrSchedule;
use crate::par::Parallelism;
use crate::seed;
use crate::tokenizer::{train_vocab, Vocab, BOS_ID, EOS_ID};
use crate::train::{pretrain_lm, train_ctc, train_rnnt, EpochReport, PairedExample, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub pretrain_sentences: usize,
    pub pretrain_heldout: usize,
    pub general_train: usize,
    pub general_test: usize,
    pub in_domain_text: usize,
    pub in_domain_test: usize,
    pub vocab_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pretrain_sentences: 20_000,
            pretrain_heldout: 500,
            general_train: 2000,
            general_test: 200,
            in_domain_text: 1000,
            in_domain_test: 200,
            vocab_size: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NGramConfig {
    pub order: usize,
    pub discount: f64,
}

impl Default for NGramConfig {
    fn default() -> Self {
        NGramConfig { order: 4, discount: 0.7 }
    }
}

/// Every knob of the experiment. Stage seeds are derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub parallelism: Parallelism,
    pub data: DataConfig,
    pub features: FeatureConfig,
    /// `vocab_size` is overwritten by the trained vocabulary.
    pub model: ModelConfig,
    pub pretrain_lm: TrainConfig,
    pub ctc: TrainConfig,
    pub rnnt: TrainConfig,
    pub lm_head: TrainConfig,
    pub adaptation: AdaptationConfig,
    pub decode: DecodeConfig,
    pub ngram: NGramConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let text = MaskConfig::none();
        PipelineConfig {
            seed: 1,
            parallelism: Parallelism::default(),
            data: DataConfig::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            pretrain_lm: TrainConfig {
                epochs: 3,
                lr: LrSchedule::new(0.5, 0.8),
                batch_size: 16,
                mask: text.clone(),
                ..TrainConfig::default()
            },
            ctc: TrainConfig { epochs: 3, lr: LrSchedule::new(0.3, 0.8), batch_size: 8, ..TrainConfig::default() },
            rnnt: TrainConfig { epochs: 12, lr: LrSchedule::new(0.3, 0.85), batch_size: 8, ..TrainConfig::default() },
            lm_head: TrainConfig {
                epochs: 5,
                lr: LrSchedule::new(0.5, 0.8),
                batch_size: 16,
                mask: text,
                ..TrainConfig::default()
            },
            adaptation: AdaptationConfig {
                lr: LrSchedule::new(0.1, 0.95),
                max_norm_change: 3.2,
                max_epochs: 40,
                batch_size: 16,
                ..AdaptationConfig::default()
            },
            decode: DecodeConfig::default(),
            ngram: NGramConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Applies the base seed to every stage, each through its own label.
    pub fn with_seed(mut self, base: u64) -> Self {
        self.seed = base;
        self.pretrain_lm.seed = seed::derive(base, "stage/pretrain-lm");
        self.ctc.seed = seed::derive(base, "stage/train-ctc");
        self.rnnt.seed = seed::derive(base, "stage/train-rnnt");
        self.lm_head.seed = seed::derive(base, "stage/train-lm-head");
        self.adaptation.seed = seed::derive(base, "stage/adapt");
        self
    }

    pub fn with_parallelism(mut self, par: Parallelism) -> Self {
        self.parallelism = par;
        self.pretrain_lm.parallelism = par;
        self.ctc.parallelism = par;
        self.rnnt.parallelism = par;
        self.lm_head.parallelism = par;
        self.adaptation.parallelism = par;
        self
    }

    /// Seed used for the data of one domain and role.
    pub fn data_seed(&self, domain: Domain, role: Role) -> u64 {
        seed::derive(self.seed, &format!("data/{}/{role:?}", domain.label()))
    }

    /// Seed for the prediction-network and model initializations.
    pub fn init_seed(&self, what: &str) -> u64 {
        seed::derive(self.seed, &format!("init/{what}"))
    }
}

/// All synthetic corpora of one experiment.
#[derive(Clone, Debug)]
pub struct Corpora {
    pub pretrain: Vec<String>,
    pub pretrain_heldout: Vec<String>,
    pub general_train: Vec<Utterance>,
    pub general_test: Vec<Utterance>,
    pub in_domain_text: Vec<String>,
    pub in_domain_test: Vec<Utterance>,
}

pub fn generate_corpora(cfg: &PipelineConfig) -> Result<Corpora> {
    let synth = Synthesizer::new(cfg.features.clone())?;
    let d = &cfg.data;
    let par = cfg.parallelism;
    let texts = |domain, role, n| DomainSpec::new(domain, cfg.data_seed(domain, role)).texts(n);
    let paired =
        |domain, role, n| gen_corpus(&DomainSpec::new(domain, cfg.data_seed(domain, role)), &synth, n, true, role, par);
    Ok(Corpora {
        pretrain: texts(Domain::Pretrain, Role::Train, d.pretrain_sentences),
        pretrain_heldout: texts(Domain::Pretrain, Role::Test, d.pretrain_heldout),
        general_train: paired(Domain::General, Role::Train, d.general_train)?,
        general_test: paired(Domain::General, Role::Test, d.general_test)?,
        in_domain_text: texts(Domain::InDomain, Role::Adaptation, d.in_domain_text),
        in_domain_test: paired(Domain::InDomain, Role::Test, d.in_domain_test)?,
    })
}

/// Word pieces are learned from the pretraining text plus the paired
/// transcripts; in-domain text is never seen.
pub fn build_vocab(c: &Corpora, size: usize) -> Result<Vocab> {
    let mut texts: Vec<&str> = c.pretrain.iter().map(String::as_str).collect();
    texts.extend(c.general_train.iter().map(|u| u.text.as_str()));
    train_vocab(&texts, size)
}

pub fn encode_all<S: AsRef<str>>(vocab: &Vocab, texts: &[S]) -> Result<Vec<Vec<usize>>> {
    texts.iter().map(|t| vocab.encode(t.as_ref())).collect()
}

pub fn paired_examples(vocab: &Vocab, utts: &[Utterance]) -> Result<Vec<PairedExample>> {
    utts.iter()
        .map(|u| {
            let features = u.features.clone().ok_or_else(|| Error::Invalid(format!("{} has no features", u.id)))?;
            Ok(PairedExample { features, tokens: vocab.encode(&u.text)? })
        })
        .collect()
}

pub fn model_config(cfg: &PipelineConfig, vocab: &Vocab) -> ModelConfig {
    ModelConfig { vocab_size: vocab.size(), feature_dim: cfg.features.dim, ..cfg.model.clone() }
}

pub fn run_pretrain_lm(
    cfg: &PipelineConfig,
    vocab: &Vocab,
    texts: &[Vec<usize>],
) -> Result<(LanguageModel, Vec<EpochReport>)> {
    let mut lm = LanguageModel::new(model_config(cfg, vocab), &mut seed::rng(cfg.init_seed("lm"), "init"))?;
    let reports = pretrain_lm(&mut lm, texts, &cfg.pretrain_lm)?;
    Ok((lm, reports))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AcousticReport {
    pub ctc: Vec<EpochReport>,
    pub rnnt: Vec<EpochReport>,
}

/// A fresh transducer whose encoder is trained under CTC.
pub fn run_ctc(
    cfg: &PipelineConfig,
    vocab: &Vocab,
    data: &[PairedExample],
) -> Result<(TransducerModel, Vec<EpochReport>)> {
    let config = model_config(cfg, vocab);
    let mut model = TransducerModel::new(config.clone(), &mut seed::rng(cfg.init_seed("transducer"), "init"))?;
    let mut head = TransducerModel::init_ctc_head(&config, &mut seed::rng(cfg.init_seed("ctc-head"), "init"));
    let reports = if cfg.ctc.epochs > 0 { train_ctc(&mut model, &mut head, data, &cfg.ctc)? } else { Vec::new() };
    Ok((model, reports))
}

/// Trains the transducer starting from `model`. The prediction network is
/// first replaced by `init_lm`'s when given; the result then carries that
/// LM's head (the "old" head). Without `init_lm` the prediction network
/// keeps its random initialization and the result has no head.
pub fn run_rnnt(
    cfg: &PipelineConfig,
    mut model: TransducerModel,
    init_lm: Option<&LanguageModel>,
    data: &[PairedExample],
) -> Result<(TransducerModel, Vec<EpochReport>)> {
    if let Some(lm) = init_lm {
        if lm.config != model.config {
            return Err(Error::Invalid("initializing LM was built for a different model configuration".into()));
        }
        model.prediction = lm.prediction.clone();
    }
    let reports = train_rnnt(&mut model, data, &cfg.rnnt)?;
    model.lm_head = init_lm.map(|lm| lm.head.clone());
    Ok((model, reports))
}

/// CTC encoder initialization followed by transducer training.
pub fn run_acoustic_training(
    cfg: &PipelineConfig,
    vocab: &Vocab,
    init_lm: Option<&LanguageModel>,
    data: &[PairedExample],
) -> Result<(TransducerModel, AcousticReport)> {
    let (model, ctc) = run_ctc(cfg, vocab, data)?;
    let (model, rnnt) = run_rnnt(cfg, model, init_lm, data)?;
    Ok((model, AcousticReport { ctc, rnnt }))
}

/// Replaces the model's LM head with one trained on `transcripts`.
pub fn run_lm_head(
    cfg: &PipelineConfig,
    model: &mut TransducerModel,
    transcripts: &[Vec<usize>],
) -> Result<Vec<EpochReport>> {
    train_lm_head(model, transcripts, &cfg.lm_head)
}

pub fn run_adaptation(
    cfg: &AdaptationConfig,
    model: &TransducerModel,
    texts: &[Vec<usize>],
) -> Result<(TransducerModel, AdaptationReport)> {
    adapt(model, texts, cfg)
}

pub fn train_ngram(cfg: &NGramConfig, vocab: &Vocab, texts: &[Vec<usize>]) -> Result<NGramLm> {
    NGramLm::train(texts, cfg.order, cfg.discount, vocab.size(), Boundaries { bos: Some(BOS_ID), eos: Some(EOS_ID) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestEntry {
    pub text: String,
    pub log_prob: f64,
}

/// One line of decoder output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedUtterance {
    pub utterance_id: String,
    pub n_best: Vec<NBestEntry>,
    /// Utterance WER of the top hypothesis, when a reference is known.
    pub wer: Option<f64>,
    #[serde(skip)]
    pub edits: Option<EditCounts>,
}

pub fn decode_corpus(
    model: &TransducerModel,
    utts: &[Utterance],
    vocab: &Vocab,
    cfg: &DecodeConfig,
    lm: Option<&NGramLm>,
    par: Parallelism,
) -> Result<Vec<DecodedUtterance>> {
    par.try_map(utts, |u| {
        let features = u.features.as_ref().ok_or_else(|| Error::Invalid(format!("{} has no features", u.id)))?;
        let hyps = beam_search(model, features, cfg, lm)?;
        let n_best = hyps
            .iter()
            .map(|h| Ok(NBestEntry { text: vocab.decode(&h.tokens)?, log_prob: h.log_prob }))
            .collect::<Result<Vec<_>>>()?;
        let top = n_best.first().map(|e| e.text.as_str()).unwrap_or("");
        let edits = if u.text.trim().is_empty() { None } else { Some(wer(&u.text, top)?) };
        Ok(DecodedUtterance { utterance_id: u.id.clone(), n_best, wer: edits.map(|e| e.rate()), edits })
    })
}

/// Pooled WER of decoded utterances against their references.
pub fn pooled_wer(utts: &[Utterance], decoded: &[DecodedUtterance]) -> Result<EditCounts> {
    let pairs: Vec<(&str, &str)> = utts
        .iter()
        .zip(decoded)
        .map(|(u, d)| (u.text.as_str(), d.n_best.first().map(|e| e.text.as_str()).unwrap_or("")))
        .collect();
    corpus_wer(&pairs)
}

pub fn wer_of(
    model: &TransducerModel,
    utts: &[Utterance],
    vocab: &Vocab,
    cfg: &DecodeConfig,
    lm: Option<&NGramLm>,
    par: Parallelism,
) -> Result<f64> {
    Ok(pooled_wer(utts, &decode_corpus(model, utts, vocab, cfg, lm, par)?)?.rate())
}

pub const ROW_INIT_LM: &str = "#1 initializing LM";
pub const ROW_OLD_HEAD: &str = "#2 RNN-T, old LM output";
pub const ROW_NEW_HEAD: &str = "#3 RNN-T, new LM output";
pub const ROW_ADAPTED: &str = "#4 adapted RNN-T";
pub const ROW_UNINIT: &str = "RNN-T, uninitialized P";
pub const ROW_INTERNAL: &str = "RNN-T, internal LM";
pub const COL_PRETRAIN: &str = "pretrain";
pub const COL_TRANSCRIPT: &str = "transcript";
pub const COL_IN_DOMAIN: &str = "in-domain";

/// The model stages that make up the perplexity grid; missing ones print
/// as gaps.
#[derive(Default)]
pub struct GridStages<'a> {
    pub init_lm: Option<&'a LanguageModel>,
    /// Post-training P with the initializing LM's head.
    pub old_head: Option<&'a LanguageModel>,
    /// Post-training P with the head re-estimated on transcripts.
    pub new_head: Option<&'a LanguageModel>,
    pub adapted: Option<&'a LanguageModel>,
    pub uninitialized: Option<&'a LanguageModel>,
    pub internal: Option<&'a TransducerModel>,
}

pub fn grid_corpora(vocab: &Vocab, c: &Corpora) -> Result<Vec<GridCorpus>> {
    let texts = |u: &[Utterance]| encode_all(vocab, &u.iter().map(|u| u.text.as_str()).collect::<Vec<_>>());
    Ok(vec![
        GridCorpus { name: COL_PRETRAIN.into(), texts: encode_all(vocab, &c.pretrain_heldout)? },
        GridCorpus { name: COL_TRANSCRIPT.into(), texts: texts(&c.general_test)? },
        GridCorpus { name: COL_IN_DOMAIN.into(), texts: texts(&c.in_domain_test)? },
    ])
}

pub fn run_grid(
    stages: &GridStages<'_>,
    corpora: &[GridCorpus],
    vocab: &Vocab,
    par: Parallelism,
) -> Result<PerplexityGrid> {
    let rows = [
        (ROW_INIT_LM, stages.init_lm.map(GridModel::Lm)),
        (ROW_OLD_HEAD, stages.old_head.map(GridModel::Lm)),
        (ROW_NEW_HEAD, stages.new_head.map(GridModel::Lm)),
        (ROW_ADAPTED, stages.adapted.map(GridModel::Lm)),
        (ROW_UNINIT, stages.uninitialized.map(GridModel::Lm)),
        (ROW_INTERNAL, stages.internal.map(GridModel::InternalLm)),
    ];
    perplexity_grid(&rows, corpora, vocab, par)
}
