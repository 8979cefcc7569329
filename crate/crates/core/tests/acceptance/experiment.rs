//! The desk-scale two-domain experiment behind criteria 5 to 9: one full
//! pipeline run at the default configuration, a balancing-weight sweep, a
//! shallow-fusion sweep, the perplexity grid, and a repeated default
//! adaptation.

use std::time::Instant;

use rnnt_adapt::adaptation::{AdaptationConfig, AdaptationReport, StopReason};
use rnnt_adapt::decode::{DecodeConfig, NGramLm};
use rnnt_adapt::eval::PerplexityGrid;
use rnnt_adapt::model::{LanguageModel, TransducerModel};
use rnnt_adapt::pipeline::{self as pl, Corpora, GridStages, PipelineConfig};
use rnnt_adapt::tokenizer::Vocab;

use crate::{outcome, Outcome};

const SWEEP: [f64; 4] = [0.0, 0.4, 0.8, 1.6];
const FUSION_WEIGHTS: [f64; 4] = [0.1, 0.2, 0.3, 0.5];

pub struct SweepPoint {
    pub w_b: f64,
    pub wer_a: f64,
    pub wer_b: f64,
    pub ppl_b: f64,
    pub seconds: f64,
    pub report: AdaptationReport,
}

pub struct FusionPoint {
    pub weight: f64,
    pub wer_a: f64,
    pub wer_b: f64,
    /// Default adaptation followed by fusion at this weight.
    pub combined_b: f64,
}

pub struct Experiment {
    pub default_w_b: f64,
    pub base_wer_a: f64,
    pub base_wer_b: f64,
    pub base_ppl_b: f64,
    pub sweep: Vec<SweepPoint>,
    pub fusion: Vec<FusionPoint>,
    pub grid: PerplexityGrid,
    pub rerun_stop_epoch: usize,
    pub rerun_identical: bool,
    pub seconds: f64,
}

struct Setup<'a> {
    cfg: &'a PipelineConfig,
    corpora: &'a Corpora,
    vocab: &'a Vocab,
    decode: DecodeConfig,
}

impl Setup<'_> {
    fn wer(&self, model: &TransducerModel, domain_b: bool, lm: Option<&NGramLm>, weight: f64) -> f64 {
        let utts = if domain_b { &self.corpora.in_domain_test } else { &self.corpora.general_test };
        let cfg = DecodeConfig { fusion_weight: weight, ..self.decode.clone() };
        pl::wer_of(model, utts, self.vocab, &cfg, lm, self.cfg.parallelism).unwrap()
    }
}

fn log(msg: impl AsRef<str>, start: &Instant) {
    eprintln!("[{:>6.0}s] {}", start.elapsed().as_secs_f64(), msg.as_ref());
}

fn in_domain_ppl(lm: &LanguageModel, vocab: &Vocab, corpora: &[rnnt_adapt::eval::GridCorpus]) -> f64 {
    let c = corpora.iter().find(|c| c.name == pl::COL_IN_DOMAIN).unwrap();
    rnnt_adapt::eval::word_level_perplexity(&c.name, lm, &c.texts, vocab, rnnt_adapt::par::Parallelism::default())
        .unwrap()
        .word_ppl
}

pub fn run() -> Experiment {
    let start = Instant::now();
    let cfg = PipelineConfig::default().with_seed(1);
    let corpora = pl::generate_corpora(&cfg).unwrap();
    let vocab = pl::build_vocab(&corpora, cfg.data.vocab_size).unwrap();
    let setup = Setup { cfg: &cfg, corpora: &corpora, vocab: &vocab, decode: cfg.decode.clone() };
    log("corpora ready", &start);

    let pretrain = pl::encode_all(&vocab, &corpora.pretrain).unwrap();
    let (init_lm, _) = pl::run_pretrain_lm(&cfg, &vocab, &pretrain).unwrap();
    log("LM pretrained", &start);

    let data = pl::paired_examples(&vocab, &corpora.general_train).unwrap();
    let (ctc_model, _) = pl::run_ctc(&cfg, &vocab, &data).unwrap();
    let (rnnt, _) = pl::run_rnnt(&cfg, ctc_model.clone(), Some(&init_lm), &data).unwrap();
    log("transducer trained", &start);
    let (uninit, _) = pl::run_rnnt(&cfg, ctc_model, None, &data).unwrap();
    log("transducer without LM initialization trained", &start);

    let transcripts: Vec<Vec<usize>> = data.iter().map(|d| d.tokens.clone()).collect();
    let old_head = LanguageModel::of(&rnnt).unwrap();
    let mut model = rnnt;
    pl::run_lm_head(&cfg, &mut model, &transcripts).unwrap();
    let mut uninit = uninit;
    pl::run_lm_head(&cfg, &mut uninit, &transcripts).unwrap();
    log("LM heads estimated", &start);

    let grid_corpora = pl::grid_corpora(&vocab, &corpora).unwrap();
    let base_wer_a = setup.wer(&model, false, None, 0.0);
    let base_wer_b = setup.wer(&model, true, None, 0.0);
    let new_head = LanguageModel::of(&model).unwrap();
    let base_ppl_b = in_domain_ppl(&new_head, &vocab, &grid_corpora);
    log(format!("unadapted WER A {base_wer_a:.4} B {base_wer_b:.4}"), &start);

    let adapt_texts = pl::encode_all(&vocab, &corpora.in_domain_text).unwrap();
    let mut sweep = Vec::new();
    let mut default_model = None;
    for w_b in SWEEP {
        let acfg = AdaptationConfig { w_b, ..cfg.adaptation.clone() };
        let t = Instant::now();
        let (adapted, report) = pl::run_adaptation(&acfg, &model, &adapt_texts).unwrap();
        let seconds = t.elapsed().as_secs_f64();
        let point = SweepPoint {
            w_b,
            wer_a: setup.wer(&adapted, false, None, 0.0),
            wer_b: setup.wer(&adapted, true, None, 0.0),
            ppl_b: in_domain_ppl(&LanguageModel::of(&adapted).unwrap(), &vocab, &grid_corpora),
            seconds,
            report,
        };
        log(
            format!(
                "w_b {w_b}: {:?} after epoch {} (norm {:.3}, {seconds:.0}s), WER A {:.4} B {:.4}, in-domain ppl {:.2}",
                point.report.stop_reason,
                point.report.stop_epoch,
                point.report.final_norm_change,
                point.wer_a,
                point.wer_b,
                point.ppl_b
            ),
            &start,
        );
        if w_b == cfg.adaptation.w_b {
            default_model = Some(adapted);
        }
        sweep.push(point);
    }
    let adapted = default_model.expect("default weight is part of the sweep");

    let ngram = pl::train_ngram(&cfg.ngram, &vocab, &adapt_texts).unwrap();
    let fusion: Vec<FusionPoint> = FUSION_WEIGHTS
        .iter()
        .map(|&weight| {
            let p = FusionPoint {
                weight,
                wer_a: setup.wer(&model, false, Some(&ngram), weight),
                wer_b: setup.wer(&model, true, Some(&ngram), weight),
                combined_b: setup.wer(&adapted, true, Some(&ngram), weight),
            };
            log(
                format!("fusion {weight}: WER A {:.4} B {:.4}, adapted+fusion B {:.4}", p.wer_a, p.wer_b, p.combined_b),
                &start,
            );
            p
        })
        .collect();

    let adapted_lm = LanguageModel::of(&adapted).unwrap();
    let uninit_lm = LanguageModel::of(&uninit).unwrap();
    let stages = GridStages {
        init_lm: Some(&init_lm),
        old_head: Some(&old_head),
        new_head: Some(&new_head),
        adapted: Some(&adapted_lm),
        uninitialized: Some(&uninit_lm),
        internal: Some(&model),
    };
    let grid = pl::run_grid(&stages, &grid_corpora, &vocab, cfg.parallelism).unwrap();
    eprint!("{}", grid.to_table());

    let (again, rerun) = pl::run_adaptation(&cfg.adaptation, &model, &adapt_texts).unwrap();
    log(format!("repeated default adaptation stopped after epoch {}", rerun.stop_epoch), &start);

    Experiment {
        default_w_b: cfg.adaptation.w_b,
        base_wer_a,
        base_wer_b,
        base_ppl_b,
        sweep,
        fusion,
        grid,
        rerun_stop_epoch: rerun.stop_epoch,
        rerun_identical: again == adapted,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn relative_drop(before: f64, after: f64) -> f64 {
    (before - after) / before
}

fn relative_rise(before: f64, after: f64) -> f64 {
    (after - before) / before
}

impl Experiment {
    fn point(&self, w_b: f64) -> &SweepPoint {
        self.sweep.iter().find(|p| p.w_b == w_b).expect("swept weight")
    }

    fn criterion_5(&self) -> Outcome {
        let p = self.point(self.default_w_b);
        let werr = relative_drop(self.base_wer_b, p.wer_b);
        let pplr = relative_drop(self.base_ppl_b, p.ppl_b);
        outcome(
            werr >= 0.10 && pplr >= 0.50 && p.seconds < 600.0,
            format!(
                "B WER {:.4} -> {:.4} ({:.1}% rel), B ppl {:.2} -> {:.2} ({:.1}% rel), adaptation {:.0}s",
                self.base_wer_b,
                p.wer_b,
                100.0 * werr,
                self.base_ppl_b,
                p.ppl_b,
                100.0 * pplr,
                p.seconds
            ),
        )
    }

    fn criterion_6(&self) -> Outcome {
        let (p0, p16) = (self.point(0.0), self.point(1.6));
        let deg = |p: &SweepPoint| relative_rise(self.base_wer_a, p.wer_a);
        let gain = |p: &SweepPoint| self.base_wer_b - p.wer_b;
        let retained = gain(p16) / gain(p0);
        let sweep: Vec<String> =
            self.sweep.iter().map(|p| format!("{}: A {:+.1}% B {:.4}", p.w_b, 100.0 * deg(p), p.wer_b)).collect();
        outcome(
            gain(p0) > 0.0 && deg(p16) < deg(p0) && retained >= 0.75,
            format!(
                "A degradation {:.1}% at 1.6 vs {:.1}% at 0, B gain retained {:.0}% [{}]",
                100.0 * deg(p16),
                100.0 * deg(p0),
                100.0 * retained,
                sweep.join(", ")
            ),
        )
    }

    fn criterion_7(&self) -> Outcome {
        let p = self.point(self.default_w_b);
        let adapt_deg = relative_rise(self.base_wer_a, p.wer_a);
        let ok = |f: &FusionPoint| {
            f.wer_b < self.base_wer_b
                && relative_rise(self.base_wer_a, f.wer_a) > adapt_deg
                && f.combined_b <= p.wer_b.min(f.wer_b)
        };
        let rows: Vec<String> = self
            .fusion
            .iter()
            .map(|f| {
                format!(
                    "{}: B {:.4} A {:+.1}% comb {:.4}{}",
                    f.weight,
                    f.wer_b,
                    100.0 * relative_rise(self.base_wer_a, f.wer_a),
                    f.combined_b,
                    if ok(f) { " ok" } else { "" }
                )
            })
            .collect();
        outcome(
            self.fusion.iter().any(ok),
            format!("adaptation: A {:+.1}% B {:.4}; fusion [{}]", 100.0 * adapt_deg, p.wer_b, rows.join(", ")),
        )
    }

    fn criterion_8(&self) -> Outcome {
        let g = &self.grid;
        let cols = [pl::COL_PRETRAIN, pl::COL_TRANSCRIPT, pl::COL_IN_DOMAIN];
        let main = [pl::ROW_INIT_LM, pl::ROW_OLD_HEAD, pl::ROW_NEW_HEAD, pl::ROW_ADAPTED];
        let c = |r: &str, col: &str| g.cell(r, col).unwrap_or(f64::NAN);
        let a = main[1..].iter().all(|r| c(pl::ROW_INIT_LM, pl::COL_PRETRAIN) < c(r, pl::COL_PRETRAIN));
        let b = c(pl::ROW_NEW_HEAD, pl::COL_TRANSCRIPT) < c(pl::ROW_OLD_HEAD, pl::COL_TRANSCRIPT);
        let ratio = c(pl::ROW_NEW_HEAD, pl::COL_IN_DOMAIN) / c(pl::ROW_ADAPTED, pl::COL_IN_DOMAIN);
        let d = cols.iter().all(|col| main.iter().all(|r| c(pl::ROW_UNINIT, col) > c(r, col)));
        let e = cols.iter().all(|col| c(pl::ROW_INTERNAL, col) > c(pl::ROW_NEW_HEAD, col));
        outcome(
            a && b && ratio >= 10.0 && d && e,
            format!("(a) {a} (b) {b} (c) {ratio:.1}x (d) {d} (e) {e}\n{}", g.to_table().trim_end()),
        )
    }

    fn criterion_9(&self) -> Outcome {
        let r = &self.point(self.default_w_b).report;
        outcome(
            r.stop_reason == StopReason::NormThreshold && r.stop_epoch == self.rerun_stop_epoch && self.rerun_identical,
            format!(
                "{:?} after epoch {} at norm {:.3}; rerun stopped after epoch {}, identical model {}",
                r.stop_reason, r.stop_epoch, r.final_norm_change, self.rerun_stop_epoch, self.rerun_identical
            ),
        )
    }
}

pub fn criteria(exp: &Experiment) -> Vec<(usize, Outcome)> {
    eprintln!("experiment wall time {:.0}s", exp.seconds);
    vec![
        (5, exp.criterion_5()),
        (6, exp.criterion_6()),
        (7, exp.criterion_7()),
        (8, exp.criterion_8()),
        (9, exp.criterion_9()),
    ]
}
