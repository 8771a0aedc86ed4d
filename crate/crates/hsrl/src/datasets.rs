//! Corpus representation, tokenization, JSON-lines ingestion, and a synthetic
//! corpus generator with known topic structure.
//!
//! On disk a corpus is one JSON object per line with keys `features` (n arrays
//! of d_v numbers), `sentences` (n strings), and optional `topics` (n integer
//! topic ids). The vocabulary is a separate text file, one token per line,
//! where the line number is the id and the first four lines are fixed to
//! PAD/BOS/EOS/UNK.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{NumArray, SeededRng};
use crate::{HsrlError, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token <-> id bijection with fixed reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl Vocab {
    /// Build from the non-reserved tokens; reserved entries are prepended.
    pub fn new(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(HsrlError::Schema(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Lowercased whitespace tokenization; unknown words map to UNK.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()).unwrap_or(UNK))
            .collect()
    }

    /// Inverse of tokenize on sequences without reserved ids.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .map(|&id| self.token(id).unwrap_or(RESERVED_TOKENS[UNK as usize]))
            .collect();
        words.join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 4 {
            return Err(HsrlError::Schema(format!(
                "vocab file {} has {} lines; at least the 4 reserved tokens are required",
                path.display(),
                lines.len()
            )));
        }
        for (i, expect) in RESERVED_TOKENS.iter().enumerate() {
            if lines[i] != *expect {
                return Err(HsrlError::Schema(format!(
                    "vocab line {i} must be {expect:?}, found {:?}",
                    lines[i]
                )));
            }
        }
        Vocab::new(lines[4..].iter().map(|s| s.to_string()))
    }
}

/// One training example: n feature vectors, n reference sentences, and an
/// optional golden topic per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct StoryRecord {
    /// n vectors of dimension d_v.
    pub features: Vec<NumArray>,
    /// n token-id sequences, each ending in EOS.
    pub sentences: Vec<Vec<u32>>,
    /// Topic id in [0, K) per slot, when known.
    pub golden_topics: Option<Vec<usize>>,
}

impl StoryRecord {
    pub fn slots(&self) -> usize {
        self.features.len()
    }

    pub fn validate(&self, feature_dim: usize, slots: usize, vocab_len: usize) -> Result<()> {
        if self.features.len() != slots || self.sentences.len() != slots {
            return Err(HsrlError::Schema(format!(
                "record has {} features and {} sentences; expected {slots} of each",
                self.features.len(),
                self.sentences.len()
            )));
        }
        for f in &self.features {
            if f.shape() != [feature_dim] {
                return Err(HsrlError::Schema(format!(
                    "feature vector has shape {:?}; expected [{feature_dim}]",
                    f.shape()
                )));
            }
            if !f.all_finite() {
                return Err(HsrlError::Schema("non-finite feature value".into()));
            }
        }
        for s in &self.sentences {
            if s.is_empty() || *s.last().unwrap() != EOS {
                return Err(HsrlError::Schema(
                    "every sentence must be non-empty and EOS-terminated".into(),
                ));
            }
            if s.iter().any(|&t| t as usize >= vocab_len) {
                return Err(HsrlError::Schema("token id out of vocab range".into()));
            }
        }
        if let Some(topics) = &self.golden_topics {
            if topics.len() != slots {
                return Err(HsrlError::Schema(format!(
                    "record has {} topics; expected {slots}",
                    topics.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Valid => write!(f, "valid"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = HsrlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(HsrlError::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub records: Vec<StoryRecord>,
    pub vocab: Vocab,
    pub split: Split,
    pub feature_dim: usize,
    pub slots: usize,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            r.validate(self.feature_dim, self.slots, self.vocab.len())?;
        }
        Ok(())
    }

    /// Topic ids present on every record, or a config error.
    pub fn require_golden_topics(&self) -> Result<()> {
        if self.records.iter().any(|r| r.golden_topics.is_none()) {
            return Err(HsrlError::Config(
                "corpus is missing golden topics; run topic fitting first".into(),
            ));
        }
        Ok(())
    }
}

/// v̄: arithmetic mean of the n feature vectors.
pub fn mean_pool(features: &[NumArray]) -> Result<NumArray> {
    let first = features.first().ok_or_else(|| {
        HsrlError::dimension("mean_pool", "at least one feature vector", "empty sequence")
    })?;
    let dim = first.len();
    let mut acc = vec![0.0; dim];
    for f in features {
        if f.len() != dim {
            return Err(HsrlError::dimension(
                "mean_pool",
                format!("vectors of length {dim}"),
                format!("length {}", f.len()),
            ));
        }
        for (a, v) in acc.iter_mut().zip(f.values()) {
            *a += v;
        }
    }
    let inv = 1.0 / features.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(NumArray::vector(acc))
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    features: Vec<Vec<f64>>,
    sentences: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    topics: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadStats {
    /// Out-of-vocabulary words replaced by UNK during tokenization.
    pub unk_count: usize,
}

/// Load a JSON-lines corpus file against an existing vocabulary.
pub fn load_corpus(path: &Path, vocab: Vocab, split: Split) -> Result<(Corpus, LoadStats)> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut stats = LoadStats::default();
    let mut dims: Option<(usize, usize)> = None;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| HsrlError::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let slots = parsed.features.len();
        if parsed.sentences.len() != slots {
            return Err(HsrlError::Schema(format!(
                "line {}: {} features but {} sentences",
                lineno + 1,
                slots,
                parsed.sentences.len()
            )));
        }
        if slots == 0 {
            return Err(HsrlError::Schema(format!(
                "line {}: empty record",
                lineno + 1
            )));
        }
        let feature_dim = parsed.features[0].len();
        match dims {
            None => dims = Some((feature_dim, slots)),
            Some((d, n)) if d == feature_dim && n == slots => {}
            Some((d, n)) => {
                return Err(HsrlError::Schema(format!(
                    "line {}: inconsistent shape (d_v={feature_dim}, n={slots}); \
                     corpus so far has d_v={d}, n={n}",
                    lineno + 1
                )));
            }
        }
        let mut features = Vec::with_capacity(slots);
        for f in parsed.features {
            if f.len() != feature_dim {
                return Err(HsrlError::Schema(format!(
                    "line {}: ragged feature vectors",
                    lineno + 1
                )));
            }
            features.push(NumArray::vector(f));
        }
        let mut sentences = Vec::with_capacity(slots);
        for text in &parsed.sentences {
            let unks_in_text = text
                .split_whitespace()
                .filter(|w| w.to_lowercase() == RESERVED_TOKENS[UNK as usize])
                .count();
            let mut ids = vocab.tokenize(text);
            stats.unk_count += ids.iter().filter(|&&t| t == UNK).count() - unks_in_text;
            ids.push(EOS);
            sentences.push(ids);
        }
        records.push(StoryRecord {
            features,
            sentences,
            golden_topics: parsed.topics,
        });
    }

    let (feature_dim, slots) = dims.ok_or_else(|| HsrlError::Schema("empty corpus file".into()))?;
    let corpus = Corpus {
        records,
        vocab,
        split,
        feature_dim,
        slots,
    };
    corpus.validate()?;
    Ok((corpus, stats))
}

/// Write a corpus back to JSON-lines, detokenizing sentences.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    for r in &corpus.records {
        let line = RecordLine {
            features: r.features.iter().map(|f| f.values().to_vec()).collect(),
            sentences: r
                .sentences
                .iter()
                .map(|s| {
                    let body = &s[..s.len() - 1]; // strip trailing EOS
                    corpus.vocab.detokenize(body)
                })
                .collect(),
            topics: r.golden_topics.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Configuration of the synthetic blob corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_records: usize,
    /// Image slots per story.
    pub slots: usize,
    pub feature_dim: usize,
    /// Number of topics / feature blobs.
    pub topics: usize,
    /// Content words private to each topic.
    pub vocab_per_topic: usize,
    /// Inclusive token-count range for generated sentences (before EOS).
    pub sentence_len_range: (usize, usize),
    /// Distance of each blob center from the origin along its own axis.
    pub separation: f64,
    /// Isotropic standard deviation of each blob.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_records: 200,
            slots: 5,
            feature_dim: 16,
            topics: 4,
            vocab_per_topic: 12,
            sentence_len_range: (4, 8),
            separation: 10.0,
            sigma: 1.0,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topics < 2 {
            return Err(HsrlError::Config("synthesis needs at least 2 topics".into()));
        }
        if self.feature_dim < self.topics {
            return Err(HsrlError::Config(format!(
                "feature_dim {} must be at least the topic count {}",
                self.feature_dim, self.topics
            )));
        }
        if self.num_records == 0 || self.slots == 0 || self.vocab_per_topic == 0 {
            return Err(HsrlError::Config("empty synthesis configuration".into()));
        }
        let (lo, hi) = self.sentence_len_range;
        if lo == 0 || hi < lo {
            return Err(HsrlError::Config(format!(
                "bad sentence_len_range ({lo}, {hi})"
            )));
        }
        if self.sigma <= 0.0 || self.separation <= 0.0 {
            return Err(HsrlError::Config(
                "sigma and separation must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Shared function words; every topic may use them.
    pub fn function_words() -> Vec<String> {
        ["the", "a", "and", "then", "we", "it", "was", "is", "to", "of"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    /// Content word j of topic k. Content words appear under exactly one
    /// topic, which makes topic/word mutual information maximal.
    pub fn content_word(topic: usize, j: usize) -> String {
        format!("t{topic}w{j}")
    }

    pub fn build_vocab(&self) -> Result<Vocab> {
        let mut words = Self::function_words();
        for k in 0..self.topics {
            for j in 0..self.vocab_per_topic {
                words.push(Self::content_word(k, j));
            }
        }
        Vocab::new(words)
    }
}

/// Generate a corpus of stories whose slots are drawn from K well-separated
/// Gaussian feature blobs; the blob id is the golden topic and each sentence
/// is built from a template over that topic's private vocabulary slice plus
/// shared function words. Pure function of the config.
pub fn synthesize_corpus(cfg: &SynthConfig, split: Split) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = cfg.build_vocab()?;
    // Per-split child streams keep the three splits independent but all
    // deterministic under the one seed.
    let salt = match split {
        Split::Train => 0,
        Split::Valid => 1,
        Split::Test => 2,
    };
    let mut rng = SeededRng::new(
        cfg.seed
            .wrapping_add(salt)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );

    let function_words = SynthConfig::function_words();
    let mut records = Vec::with_capacity(cfg.num_records);
    for _ in 0..cfg.num_records {
        let mut features = Vec::with_capacity(cfg.slots);
        let mut sentences = Vec::with_capacity(cfg.slots);
        let mut topics = Vec::with_capacity(cfg.slots);
        for _ in 0..cfg.slots {
            let topic = rng.below(cfg.topics);
            topics.push(topic);

            let mut v = vec![0.0; cfg.feature_dim];
            for x in v.iter_mut() {
                *x = cfg.sigma * rng.normal();
            }
            v[topic] += cfg.separation;
            features.push(NumArray::vector(v));

            sentences.push(template_sentence(
                cfg,
                topic,
                &function_words,
                &vocab,
                &mut rng,
            ));
        }
        records.push(StoryRecord {
            features,
            sentences,
            golden_topics: Some(topics),
        });
    }

    let corpus = Corpus {
        records,
        vocab,
        split,
        feature_dim: cfg.feature_dim,
        slots: cfg.slots,
    };
    corpus.validate()?;
    Ok(corpus)
}

// Template: alternating content/function positions with a random starting
// parity, so content words always come from the slot's topic slice.
fn template_sentence(
    cfg: &SynthConfig,
    topic: usize,
    function_words: &[String],
    vocab: &Vocab,
    rng: &mut SeededRng,
) -> Vec<u32> {
    let (lo, hi) = cfg.sentence_len_range;
    let len = lo + rng.below(hi - lo + 1);
    let content_parity = rng.below(2);
    let mut ids = Vec::with_capacity(len + 1);
    for i in 0..len {
        let word = if i % 2 == content_parity || len == 1 {
            SynthConfig::content_word(topic, rng.below(cfg.vocab_per_topic))
        } else {
            function_words[rng.below(function_words.len())].clone()
        };
        ids.push(vocab.id(&word).expect("synthesized word is in vocab"));
    }
    ids.push(EOS);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_vocab() -> Vocab {
        Vocab::new(["a", "b", "c"].iter().map(|s| s.to_string())).unwrap()
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = tiny_vocab();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn tokenize_basics() {
        let v = tiny_vocab();
        assert_eq!(
            v.tokenize("a b"),
            vec![v.id("a").unwrap(), v.id("b").unwrap()]
        );
        assert_eq!(v.tokenize("A  B"), v.tokenize("a b"));
        assert_eq!(v.tokenize("zzz"), vec![UNK]);
        assert_eq!(v.detokenize(&v.tokenize("a b c")), "a b c");
    }

    #[test]
    fn mean_pool_cases() {
        let a = NumArray::vector(vec![1.0, 1.0]);
        let b = NumArray::vector(vec![3.0, 3.0]);
        assert_eq!(mean_pool(&[a.clone(), b]).unwrap().values(), &[2.0, 2.0]);
        assert_eq!(mean_pool(std::slice::from_ref(&a)).unwrap(), a);
        assert!(mean_pool(&[]).is_err());
    }

    #[test]
    fn mean_pool_matches_naive_summation() {
        let mut rng = SeededRng::new(4);
        let feats: Vec<NumArray> = (0..5)
            .map(|_| NumArray::vector((0..7).map(|_| rng.uniform_in(-2.0, 2.0)).collect()))
            .collect();
        let pooled = mean_pool(&feats).unwrap();
        for j in 0..7 {
            let mut s = 0.0;
            for f in &feats {
                s += f.values()[j];
            }
            assert!((pooled.values()[j] - s / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn synthesize_is_deterministic_and_on_slice() {
        let cfg = SynthConfig {
            num_records: 10,
            topics: 2,
            ..SynthConfig::default()
        };
        let a = synthesize_corpus(&cfg, Split::Train).unwrap();
        let b = synthesize_corpus(&cfg, Split::Train).unwrap();
        assert_eq!(a.records, b.records);

        // Every content word must come from its slot's topic slice.
        for r in &a.records {
            let topics = r.golden_topics.as_ref().unwrap();
            for (sent, &topic) in r.sentences.iter().zip(topics) {
                for &id in &sent[..sent.len() - 1] {
                    let tok = a.vocab.token(id).unwrap();
                    if let Some(rest) = tok.strip_prefix('t') {
                        if rest.contains('w') {
                            let k: usize = rest.split('w').next().unwrap().parse().unwrap();
                            assert_eq!(k, topic, "content word {tok} outside slice");
                        }
                    }
                }
            }
        }

        let c = synthesize_corpus(&cfg, Split::Valid).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn save_load_round_trips_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            num_records: 1,
            ..SynthConfig::default()
        };
        let corpus = synthesize_corpus(&cfg, Split::Train).unwrap();
        let p1 = dir.path().join("one.jsonl");
        save_corpus(&corpus, &p1).unwrap();
        let (loaded, stats) = load_corpus(&p1, corpus.vocab.clone(), Split::Train).unwrap();
        assert_eq!(stats.unk_count, 0);
        assert_eq!(loaded.records, corpus.records);
        let p2 = dir.path().join("two.jsonl");
        save_corpus(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn mismatched_counts_are_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        // 1 feature vector but 2 sentences.
        std::fs::write(
            &path,
            "{\"features\":[[0.0,0.0]],\"sentences\":[\"a\",\"b\"]}\n",
        )
        .unwrap();
        let err = load_corpus(&path, tiny_vocab(), Split::Train).unwrap_err();
        assert!(matches!(err, HsrlError::Schema(_)), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"features\":[[0.0]],\"sentences\":[\"a\"]}\nnot json\n",
        )
        .unwrap();
        let err = load_corpus(&path, tiny_vocab(), Split::Train).unwrap_err();
        match err {
            HsrlError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn out_of_vocab_words_count_as_unk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unk.jsonl");
        std::fs::write(
            &path,
            "{\"features\":[[0.0,1.0]],\"sentences\":[\"a mystery\"]}\n",
        )
        .unwrap();
        let (corpus, stats) = load_corpus(&path, tiny_vocab(), Split::Train).unwrap();
        assert_eq!(stats.unk_count, 1);
        assert_eq!(corpus.records[0].sentences[0], vec![4, UNK, EOS]);
    }

    proptest! {
        #[test]
        fn tokenize_detokenize_round_trip(ids in proptest::collection::vec(4u32..7, 1..30)) {
            let v = tiny_vocab();
            let text = v.detokenize(&ids);
            prop_assert_eq!(v.tokenize(&text), ids);
        }
    }
}
