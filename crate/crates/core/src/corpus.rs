//! Synthetic two-domain data: weighted grammars for text, per-character
//! feature templates for "audio", time/frequency masking, and manifests.
//!
//! Letters in one sound class share a template, so words such as `pan` and
//! `pen` sound identical and only the left context tells them apart. The
//! general domain picks the spelling from the adjective in front of the
//! noun; the in-domain grammar uses new carrier phrases and the opposite
//! choice.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::par::Parallelism;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Paired training domain ("A").
    General,
    /// Adaptation target ("B"); only its text is used for training.
    InDomain,
    /// Large text-only corpus for initializing the prediction network.
    Pretrain,
}

impl Domain {
    pub fn label(self) -> &'static str {
        match self {
            Domain::General => "general",
            Domain::InDomain => "in_domain",
            Domain::Pretrain => "pretrain",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" | "a" | "A" => Ok(Domain::General),
            "in_domain" | "in-domain" | "b" | "B" => Ok(Domain::InDomain),
            "pretrain" => Ok(Domain::Pretrain),
            other => Err(Error::Invalid(format!("unknown domain {other}"))),
        }
    }
}

const SHARED_RULES: &[&str] = &[
    "SUBJ -> i | we | you | they",
    "VERB -> got | had | saw | sold | need | like",
    "DET -> a | the | my | one",
    "ADJ0 -> big | old | red",
    "ADJ1 -> hot | wet | new",
    "ADJ -> ADJ0 | ADJ1",
    "N0 -> pan | bat | sand | pad | dog | cot",
    "N1 -> pen | bet | send | ped | dug | cut",
    "ANYN -> N0 | N1",
    "OTHER -> cup | map | hat | bag | kid | pig",
    "PREP -> to | in | at | for",
    "PLACE -> rome | paris | lima | oslo",
];

const GENERAL_RULES: &[&str] = &[
    "S -> 3 SUBJ VERB NP | 3 SUBJ VERB NP PREP PLACE | 2 SUBJ VERB DET ANYN | 1 SUBJ VERB DET OTHER PREP PLACE \
     | 1 SUBJ find DET OTHER | 1 SUBJ like the show | 1 SUBJ need a book for me | 1 SUBJ list DET OTHER please \
     | 6 SALAD",
    "NP -> 2 DET ADJ0 N0 | 2 DET ADJ1 N1 | 1 DET ADJ OTHER",
    // Unstructured word strings (no adjectives, so no spelling rule).
    "SALAD -> W W W | W W W W | W W W W W",
    "W -> SUBJ | VERB | DET | ANYN | OTHER | PREP | PLACE | find | show | me | please | book | list",
];

const IN_DOMAIN_RULES: &[&str] = &[
    "S -> show me NPB PREP PLACE | please find NPB | book NPB for me | list NPB in PLACE",
    "NPB -> 2 DET ADJ0 N1 | 2 DET ADJ1 N0 | 1 DET ADJ OTHER",
];

const OTHER_RULES: &[&str] = &[
    "S -> 2 DET ADJ ANYN VERBC PREP PLACE | 1 DET ANYN VERBC | 2 SUBJ VERB DET ADJ ANYN | 1 DET OTHER VERBC PREP PLACE",
    "VERBC -> is | was | sat | ran",
];

/// Weighted context-free grammar. Upper-case symbols are nonterminals;
/// everything else is a word.
#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    rules: BTreeMap<String, Vec<(f64, Vec<String>)>>,
}

fn is_nonterminal(s: &str) -> bool {
    s.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit())
        && s.chars().next().is_some_and(|c| c.is_ascii_uppercase())
}

impl Grammar {
    /// Parses lines of the form `LHS -> [w] sym sym | [w] sym ...`, where
    /// the optional leading number is the alternative's weight.
    pub fn parse<S: AsRef<str>>(lines: &[S]) -> Result<Self> {
        let mut rules: BTreeMap<String, Vec<(f64, Vec<String>)>> = BTreeMap::new();
        for line in lines {
            let line = line.as_ref();
            let (lhs, rhs) =
                line.split_once("->").ok_or_else(|| Error::Format(format!("rule without '->': {line}")))?;
            let lhs = lhs.trim();
            if !is_nonterminal(lhs) {
                return Err(Error::Format(format!("bad nonterminal {lhs}")));
            }
            let alts = rules.entry(lhs.to_string()).or_default();
            for alt in rhs.split('|') {
                let mut syms: Vec<&str> = alt.split_whitespace().collect();
                let mut weight = 1.0;
                if let Some(w) = syms.first().and_then(|s| s.parse::<f64>().ok()) {
                    weight = w;
                    syms.remove(0);
                }
                if syms.is_empty() || weight.is_nan() || weight <= 0.0 {
                    return Err(Error::Format(format!("empty or non-positive alternative in {line}")));
                }
                alts.push((weight, syms.into_iter().map(String::from).collect()));
            }
        }
        let g = Grammar { rules };
        for alts in g.rules.values() {
            for (_, syms) in alts {
                if let Some(s) = syms.iter().find(|s| is_nonterminal(s) && !g.rules.contains_key(*s)) {
                    return Err(Error::Format(format!("undefined nonterminal {s}")));
                }
            }
        }
        if !g.rules.contains_key("S") {
            return Err(Error::Format("grammar has no start symbol S".into()));
        }
        Ok(g)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        let mut out = Vec::new();
        self.expand("S", rng, &mut out);
        out.join(" ")
    }

    fn expand<R: Rng + ?Sized>(&self, sym: &str, rng: &mut R, out: &mut Vec<String>) {
        let alts = &self.rules[sym];
        let total: f64 = alts.iter().map(|(w, _)| w).sum();
        let mut x = rng.random::<f64>() * total;
        let mut chosen = &alts[alts.len() - 1].1;
        for (w, syms) in alts {
            if x < *w {
                chosen = syms;
                break;
            }
            x -= w;
        }
        for s in chosen {
            if is_nonterminal(s) {
                self.expand(s, rng, out);
            } else {
                out.push(s.clone());
            }
        }
    }

    /// Every terminal word reachable from the start symbol.
    pub fn words(&self) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut words = BTreeSet::new();
        let mut stack = vec!["S".to_string()];
        while let Some(nt) = stack.pop() {
            if !seen.insert(nt.clone()) {
                continue;
            }
            for (_, syms) in &self.rules[&nt] {
                for s in syms {
                    if is_nonterminal(s) {
                        stack.push(s.clone());
                    } else {
                        words.insert(s.clone());
                    }
                }
            }
        }
        words
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub domain: Domain,
    pub grammar: Grammar,
    pub seed: u64,
}

impl DomainSpec {
    pub fn new(domain: Domain, seed: u64) -> Self {
        let mut lines: Vec<String> = SHARED_RULES.iter().map(|s| s.to_string()).collect();
        match domain {
            Domain::General => lines.extend(GENERAL_RULES.iter().map(|s| s.to_string())),
            Domain::InDomain => lines.extend(IN_DOMAIN_RULES.iter().map(|s| s.to_string())),
            Domain::Pretrain => {
                // Half general-domain sentences, half sentences from a third
                // grammar with no adjective-driven spelling rule.
                lines.push("S -> GS | OS".into());
                let rename = |r: &&str, from: &str| r.replacen("S ->", &format!("{from} ->"), 1);
                lines.push(rename(&GENERAL_RULES[0], "GS"));
                lines.extend(GENERAL_RULES[1..].iter().map(|s| s.to_string()));
                lines.push(rename(&OTHER_RULES[0], "OS"));
                lines.extend(OTHER_RULES[1..].iter().map(|s| s.to_string()));
            }
        }
        let grammar = Grammar::parse(&lines).expect("built-in grammars are well formed");
        DomainSpec { domain, grammar, seed }
    }

    pub fn texts(&self, n: usize) -> Vec<String> {
        let label = format!("text/{}", self.domain.label());
        (0..n).map(|i| self.grammar.sample(&mut seed::item_rng(self.seed, &label, i))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub dim: usize,
    pub frames_per_char: usize,
    pub noise_std: f64,
    /// Up to this many silence frames are added before and after.
    pub max_jitter: usize,
    pub template_seed: u64,
    /// Groups of characters rendered with one shared template.
    pub sound_classes: Vec<String>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            dim: 16,
            frames_per_char: 3,
            noise_std: 0.1,
            max_jitter: 2,
            template_seed: 17,
            sound_classes: vec!["ae".into(), "ou".into()],
        }
    }
}

/// Renders text as a noisy sequence of per-character templates.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    config: FeatureConfig,
    class_of: HashMap<char, char>,
}

impl Synthesizer {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        if config.dim == 0 || config.frames_per_char == 0 || config.noise_std.is_nan() || config.noise_std < 0.0 {
            return Err(Error::Invalid("feature dim and frames per char must be positive".into()));
        }
        let mut class_of = HashMap::new();
        for class in &config.sound_classes {
            let mut chars = class.chars();
            if let Some(rep) = chars.next() {
                class_of.insert(rep, rep);
                for c in chars {
                    class_of.insert(c, rep);
                }
            }
        }
        Ok(Synthesizer { config, class_of })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    /// Noise-free template of one character (the space doubles as silence).
    pub fn template(&self, c: char) -> Vec<f64> {
        let rep = self.class_of.get(&c).copied().unwrap_or(c);
        let mut rng = seed::rng(self.config.template_seed, &format!("template/{}", rep as u32));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (0..self.config.dim).map(|_| normal.sample(&mut rng)).collect()
    }

    /// Features for `text`; values are rounded to 32-bit precision so they
    /// survive a manifest round trip unchanged.
    pub fn synthesize<R: Rng + ?Sized>(&self, text: &str, rng: &mut R) -> Result<Tensor> {
        if text.is_empty() {
            return Err(Error::Empty("utterance text"));
        }
        let c = &self.config;
        let lead = rng.random_range(0..=c.max_jitter);
        let tail = rng.random_range(0..=c.max_jitter);
        let mut frames: Vec<Vec<f64>> = Vec::new();
        let silence = self.template(' ');
        frames.extend(std::iter::repeat_n(silence.clone(), lead));
        let mut cache: HashMap<char, Vec<f64>> = HashMap::new();
        for ch in text.chars() {
            let t = cache.entry(ch).or_insert_with(|| self.template(ch));
            frames.extend(std::iter::repeat_n(t.clone(), c.frames_per_char));
        }
        frames.extend(std::iter::repeat_n(silence, tail));
        let normal = Normal::new(0.0, c.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
        let data: Vec<f64> = frames
            .into_iter()
            .flatten()
            .map(|v| {
                let noisy = if c.noise_std > 0.0 { v + normal.sample(rng) } else { v };
                noisy as f32 as f64
            })
            .collect();
        Tensor::matrix(data.len() / c.dim, c.dim, data)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Train,
    Test,
    Adaptation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub domain: Domain,
    pub role: Role,
    pub features: Option<Tensor>,
}

/// Generates `n` utterances; with `paired` each gets synthetic features.
pub fn gen_corpus(
    spec: &DomainSpec,
    synth: &Synthesizer,
    n: usize,
    paired: bool,
    role: Role,
    par: Parallelism,
) -> Result<Vec<Utterance>> {
    if n == 0 {
        return Err(Error::Empty("corpus size"));
    }
    let texts = spec.texts(n);
    let label = format!("features/{}", spec.domain.label());
    let idx: Vec<usize> = (0..n).collect();
    par.try_map(&idx, |&i| {
        let features =
            if paired { Some(synth.synthesize(&texts[i], &mut seed::item_rng(spec.seed, &label, i))?) } else { None };
        Ok(Utterance {
            id: format!("{}-{i:05}", spec.domain.label()),
            text: texts[i].clone(),
            domain: spec.domain,
            role,
            features,
        })
    })
}

/// Zeroes `time_widths.len()` random bands of rows and
/// `freq_widths.len()` random bands of columns.
pub fn feature_mask<R: Rng + ?Sized>(
    features: &Tensor,
    time_widths: &[usize],
    freq_widths: &[usize],
    rng: &mut R,
) -> Result<Tensor> {
    let (tn, f) = (features.rows(), features.cols());
    if let Some(w) = time_widths.iter().find(|&&w| w >= tn.max(1)) {
        return Err(Error::Invalid(format!("time mask {w} not narrower than {tn} frames")));
    }
    if let Some(w) = freq_widths.iter().find(|&&w| w >= f.max(1)) {
        return Err(Error::Invalid(format!("frequency mask {w} not narrower than {f} dims")));
    }
    let mut out = features.clone();
    let data = out.data_mut();
    for &w in time_widths {
        let start = rng.random_range(0..=tn - w);
        data[start * f..(start + w) * f].iter_mut().for_each(|v| *v = 0.0);
    }
    for &w in freq_widths {
        let start = rng.random_range(0..=f - w);
        for row in data.chunks_mut(f) {
            row[start..start + w].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// Training-time masking policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub time_masks: usize,
    pub max_time_width: usize,
    pub freq_masks: usize,
    pub max_freq_width: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { time_masks: 1, max_time_width: 4, freq_masks: 1, max_freq_width: 2 }
    }
}

impl MaskConfig {
    pub fn none() -> Self {
        MaskConfig { time_masks: 0, max_time_width: 0, freq_masks: 0, max_freq_width: 0 }
    }

    /// Draws widths that fit the given features and applies the masks.
    pub fn apply<R: Rng + ?Sized>(&self, features: &Tensor, rng: &mut R) -> Result<Tensor> {
        let (tn, f) = (features.rows(), features.cols());
        let draw = |n: usize, max: usize, axis: usize, rng: &mut R| -> Vec<usize> {
            let cap = max.min(axis.saturating_sub(1));
            (0..n).map(|_| rng.random_range(0..=cap)).collect()
        };
        let tw = draw(self.time_masks, self.max_time_width, tn, rng);
        let fw = draw(self.freq_masks, self.max_freq_width, f, rng);
        feature_mask(features, &tw, &fw, rng)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    utterance_id: String,
    text: String,
    domain: Domain,
    role: Role,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    features: Option<String>,
    /// Raw little-endian f32 file, an alternative to inline `features`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    features_path: Option<String>,
}

fn encode_features(t: &Tensor) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_features(s: &str, frames: usize, dim: usize) -> Result<Tensor> {
    let bytes = B64.decode(s).map_err(|e| Error::Format(format!("features: {e}")))?;
    features_from_bytes(&bytes, frames, dim)
}

fn features_from_bytes(bytes: &[u8], frames: usize, dim: usize) -> Result<Tensor> {
    if bytes.len() != frames * dim * 4 {
        return Err(Error::Format(format!("features hold {} bytes, expected {}", bytes.len(), frames * dim * 4)));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Tensor::matrix(frames, dim, data)
}

pub fn manifest_line(u: &Utterance) -> Result<String> {
    let rec = ManifestRecord {
        utterance_id: u.id.clone(),
        text: u.text.clone(),
        domain: u.domain,
        role: u.role,
        frames: u.features.as_ref().map(Tensor::rows),
        dim: u.features.as_ref().map(Tensor::cols),
        features: u.features.as_ref().map(encode_features),
        features_path: None,
    };
    Ok(serde_json::to_string(&rec)?)
}

/// Parses one manifest line. A relative `features_path` is resolved against
/// `base` when given.
pub fn parse_manifest_line_in(line: &str, base: Option<&Path>) -> Result<Utterance> {
    let rec: ManifestRecord = serde_json::from_str(line)?;
    let id = rec.utterance_id;
    let features = match (rec.features, rec.features_path, rec.frames, rec.dim) {
        (None, None, _, _) => None,
        (Some(f), None, Some(t), Some(d)) => Some(decode_features(&f, t, d)?),
        (None, Some(p), Some(t), Some(d)) => {
            let path = match base {
                Some(b) if Path::new(&p).is_relative() => b.join(&p),
                _ => p.into(),
            };
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Some(features_from_bytes(&bytes, t, d)?)
        }
        (Some(_), Some(_), _, _) => return Err(Error::Format(format!("{id}: both features and features_path"))),
        _ => return Err(Error::Format(format!("{id}: features without frames/dim"))),
    };
    Ok(Utterance { id, text: rec.text, domain: rec.domain, role: rec.role, features })
}

pub fn parse_manifest_line(line: &str) -> Result<Utterance> {
    parse_manifest_line_in(line, None)
}

pub fn write_manifest(path: impl AsRef<Path>, utts: &[Utterance]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for u in utts {
        writeln!(w, "{}", manifest_line(u)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(parse_manifest_line_in(&line, path.parent())?);
        }
    }
    Ok(out)
}

pub fn write_lines<S: AsRef<str>>(path: impl AsRef<Path>, lines: &[S]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for l in lines {
        s.push_str(l.as_ref());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(s.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Word-unigram relative frequencies.
pub fn unigram<S: AsRef<str>>(texts: &[S]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    let mut total = 0.0;
    for t in texts {
        for w in t.as_ref().split_whitespace() {
            *counts.entry(w.to_string()).or_default() += 1.0;
            total += 1.0;
        }
    }
    counts.values_mut().for_each(|c| *c /= total);
    counts
}

/// KL(p || q) between word unigrams, with unseen `q` words floored at
/// `floor` so the divergence stays finite.
pub fn unigram_kl(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>, floor: f64) -> f64 {
    p.iter().map(|(w, &pw)| pw * (pw / q.get(w).copied().unwrap_or(floor).max(floor)).ln()).sum()
}

/// Fraction of the union of two word inventories that both share.
pub fn shared_vocab_fraction(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}
