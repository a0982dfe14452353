//! Caption sampling (language x length mixing) and a hashing tokenizer whose
//! token ids index the diffusion transformer's learned text table.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dit::DiT;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Token id reserved for the empty caption; never produced by hashing a word.
pub const NULL_TOKEN: u32 = 0;

/// Caption of the unconditional branch, used both for training-time dropout
/// and for classifier-free guidance.
pub const NULL_CAPTION: &[u32] = &[NULL_TOKEN];

pub const DEFAULT_MAX_TEXT_LEN: usize = 256;
pub const HQ_MAX_TEXT_LEN: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    /// Primary language.
    En,
    /// Second language slot, realized as the English caption with its word
    /// order reversed.
    Zh,
}

impl Language {
    pub const ALL: [Language; 2] = [Language::En, Language::Zh];

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Language::En => "en",
            Language::Zh => "zh",
        })
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "en" => Ok(Language::En),
            "zh" => Ok(Language::Zh),
            _ => Err(Error::invalid(
                "textcond",
                format!("unknown language {s:?}"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionLength {
    Short,
    Middle,
    Long,
}

impl CaptionLength {
    pub const ALL: [CaptionLength; 3] = [
        CaptionLength::Short,
        CaptionLength::Middle,
        CaptionLength::Long,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for CaptionLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaptionLength::Short => "short",
            CaptionLength::Middle => "middle",
            CaptionLength::Long => "long",
        })
    }
}

impl FromStr for CaptionLength {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(CaptionLength::Short),
            "middle" => Ok(CaptionLength::Middle),
            "long" => Ok(CaptionLength::Long),
            _ => Err(Error::invalid(
                "textcond",
                format!("unknown caption length {s:?}"),
            )),
        }
    }
}

/// The six caption slots of one image; empty strings mark missing captions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CaptionRecord {
    pub id: String,
    captions: [[String; 3]; 2],
}

impl CaptionRecord {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            captions: Default::default(),
        }
    }

    /// Record whose second-language slots are the word-reversed English captions.
    pub fn bilingual(id: impl Into<String>, short: &str, middle: &str, long: &str) -> Self {
        let mut rec = Self::new(id);
        for (len, text) in CaptionLength::ALL.into_iter().zip([short, middle, long]) {
            rec.set(Language::En, len, text);
            rec.set(Language::Zh, len, &reverse_words(text));
        }
        rec
    }

    pub fn get(&self, lang: Language, len: CaptionLength) -> &str {
        &self.captions[lang.index()][len.index()]
    }

    pub fn set(&mut self, lang: Language, len: CaptionLength, text: &str) {
        self.captions[lang.index()][len.index()] = text.to_string();
    }

    pub fn is_empty(&self) -> bool {
        self.captions.iter().flatten().all(|c| c.trim().is_empty())
    }

    /// Caption for the drawn slot, or the fallback when that slot is empty:
    /// the longest non-empty length in the same language, then the longest in
    /// the other language.
    pub fn resolve(
        &self,
        lang: Language,
        len: CaptionLength,
    ) -> Result<(Language, CaptionLength, &str)> {
        if !self.get(lang, len).trim().is_empty() {
            return Ok((lang, len, self.get(lang, len)));
        }
        let other = match lang {
            Language::En => Language::Zh,
            Language::Zh => Language::En,
        };
        for l in [lang, other] {
            for n in CaptionLength::ALL.into_iter().rev() {
                if !self.get(l, n).trim().is_empty() {
                    return Ok((l, n, self.get(l, n)));
                }
            }
        }
        Err(Error::invalid(
            "textcond",
            format!("record {:?} has no captions", self.id),
        ))
    }
}

/// Word order reversal used for the second language slot.
pub fn reverse_words(text: &str) -> String {
    text.split_whitespace().rev().collect::<Vec<_>>().join(" ")
}

/// Probabilities of drawing each caption length and of drawing the primary language.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingPolicy {
    /// `(short, middle, long)`.
    pub length_ratios: [f64; 3],
    pub lang_ratio_primary: f64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self::general()
    }
}

impl SamplingPolicy {
    pub const PRIMARY_LANGUAGE_RATIO: f64 = 0.8;

    /// Mix used for the general and realistic generation corpora.
    pub fn general() -> Self {
        Self {
            length_ratios: [0.10, 0.35, 0.55],
            lang_ratio_primary: Self::PRIMARY_LANGUAGE_RATIO,
        }
    }

    /// Long captions only, used for the high-aesthetic tuning corpus.
    pub fn long_only() -> Self {
        Self {
            length_ratios: [0.0, 0.0, 1.0],
            lang_ratio_primary: Self::PRIMARY_LANGUAGE_RATIO,
        }
    }

    /// Policy attached to a generation dataset id (`C`, `D` or `E`).
    pub fn for_dataset(id: &str) -> Result<Self> {
        match id {
            "C" | "D" => Ok(Self::general()),
            "E" => Ok(Self::long_only()),
            _ => Err(Error::invalid(
                "textcond",
                format!("no caption policy for dataset {id:?}"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.length_ratios;
        if r.iter().any(|p| p.is_nan() || *p < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "textcond",
                format!("length ratios {r:?} must be nonnegative and sum to 1"),
            ));
        }
        if !(0.0..=1.0).contains(&self.lang_ratio_primary) {
            return Err(Error::invalid(
                "textcond",
                format!(
                    "language ratio {} is not a probability",
                    self.lang_ratio_primary
                ),
            ));
        }
        Ok(())
    }
}

/// Draws a language, then independently a length, and returns the caption of
/// that slot (after the fallback of [`CaptionRecord::resolve`]).
pub fn sample_caption<'a>(
    record: &'a CaptionRecord,
    policy: &SamplingPolicy,
    rng: &mut Rng,
) -> Result<(Language, CaptionLength, &'a str)> {
    policy.validate()?;
    if record.is_empty() {
        return Err(Error::invalid(
            "textcond",
            format!("record {:?} has no captions", record.id),
        ));
    }
    let lang = if rng.uniform() < policy.lang_ratio_primary {
        Language::En
    } else {
        Language::Zh
    };
    let len = CaptionLength::ALL[rng.categorical(&policy.length_ratios)];
    record.resolve(lang, len)
}

/// 32-bit FNV-1a.
fn fnv1a32(bytes: &[u8]) -> u32 {
    bytes.iter().fold(0x811c_9dc5u32, |h, &b| {
        (h ^ b as u32).wrapping_mul(0x0100_0193)
    })
}

/// Token id of one word: its lowercase FNV-1a hash folded into `1..vocab`.
pub fn word_token(word: &str, vocab: usize) -> u32 {
    let h = fnv1a32(word.to_lowercase().as_bytes());
    1 + h % (vocab as u32 - 1)
}

/// Whitespace tokenizer: lowercase words hashed into `1..vocab`, truncated to
/// `max_len`. Text without words maps to [`NULL_CAPTION`].
pub fn tokenize(text: &str, max_len: usize, vocab: usize) -> Result<Vec<u32>> {
    if vocab < 2 {
        return Err(Error::invalid(
            "textcond",
            format!("vocabulary of {vocab} leaves no room for words"),
        ));
    }
    if max_len == 0 {
        return Err(Error::invalid(
            "textcond",
            "maximum text length must be positive",
        ));
    }
    let ids: Vec<u32> = text
        .split_whitespace()
        .take(max_len)
        .map(|w| word_token(w, vocab))
        .collect();
    Ok(if ids.is_empty() {
        NULL_CAPTION.to_vec()
    } else {
        ids
    })
}

/// Token ids of a caption together with their rows of the model's text table.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Vec<u32>,
    /// `[tokens, dim]`.
    pub embeddings: Tensor<f32>,
}

impl TextEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn embed_text(model: &DiT, text: &str, max_len: usize) -> Result<TextEmbedding> {
    let table = model.text_table();
    let (vocab, dim) = table.dims2("embed_text")?;
    let tokens = tokenize(text, max_len, vocab)?;
    let mut data = Vec::with_capacity(tokens.len() * dim);
    for &t in &tokens {
        let row = t as usize * dim;
        data.extend_from_slice(&table.data()[row..row + dim]);
    }
    let embeddings = Tensor::new(vec![tokens.len(), dim], data)?;
    Ok(TextEmbedding { tokens, embeddings })
}

/// One line of the caption manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub lang: Language,
    pub length: CaptionLength,
    pub text: String,
}

/// Writes one JSON line per non-empty caption slot, records in order.
pub fn write_manifest(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for rec in records {
        for lang in Language::ALL {
            for length in CaptionLength::ALL {
                let text = rec.get(lang, length);
                if text.is_empty() {
                    continue;
                }
                let entry = ManifestEntry {
                    id: rec.id.clone(),
                    lang,
                    length,
                    text: text.to_string(),
                };
                let line =
                    serde_json::to_string(&entry).map_err(|e| Error::Format(e.to_string()))?;
                writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
            }
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Groups manifest lines by `id`, keeping first-appearance order.
pub fn read_manifest(path: &Path) -> Result<Vec<CaptionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records: Vec<CaptionRecord> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), n + 1)))?;
        let slot = *index.entry(entry.id.clone()).or_insert_with(|| {
            records.push(CaptionRecord::new(entry.id.clone()));
            records.len() - 1
        });
        records[slot].set(entry.lang, entry.length, &entry.text);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::DiTConfig;

    fn record() -> CaptionRecord {
        CaptionRecord::bilingual(
            "0",
            "red circle",
            "a red circle on a blue background",
            "a large red circle near the top left of a blue background",
        )
    }

    fn frequencies(policy: &SamplingPolicy, draws: usize, seed: u64) -> [[f64; 3]; 2] {
        let rec = record();
        let mut rng = Rng::new(seed);
        let mut counts = [[0usize; 3]; 2];
        for _ in 0..draws {
            let (l, n, _) = sample_caption(&rec, policy, &mut rng).unwrap();
            counts[l.index()][n.index()] += 1;
        }
        counts.map(|row| row.map(|c| c as f64 / draws as f64))
    }

    #[test]
    fn length_frequencies_follow_the_policy() {
        let policy = SamplingPolicy::general();
        let joint = frequencies(&policy, 100_000, 1);
        for (n, want) in policy.length_ratios.iter().enumerate() {
            let marginal = joint[0][n] + joint[1][n];
            assert!((marginal - want).abs() <= 0.01, "{n}: {marginal}");
        }
        let en = joint[0].iter().sum::<f64>();
        assert!((en - 0.8).abs() <= 0.01, "{en}");
    }

    #[test]
    fn language_and_length_are_independent() {
        let joint = frequencies(&SamplingPolicy::general(), 100_000, 2);
        let lang: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
        let len: Vec<f64> = (0..3).map(|n| joint[0][n] + joint[1][n]).collect();
        for l in 0..2 {
            for n in 0..3 {
                assert!((joint[l][n] - lang[l] * len[n]).abs() <= 0.01);
            }
        }
    }

    #[test]
    fn long_only_policy_always_draws_long() {
        let joint = frequencies(&SamplingPolicy::long_only(), 10_000, 3);
        assert_eq!(joint[0][2] + joint[1][2], 1.0);
    }

    #[test]
    fn primary_ratio_one_always_draws_primary() {
        let policy = SamplingPolicy {
            lang_ratio_primary: 1.0,
            ..SamplingPolicy::general()
        };
        let joint = frequencies(&policy, 10_000, 4);
        assert_eq!(joint[0].iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn invalid_policies_are_rejected() {
        for ratios in [[0.5, 0.5, 0.5], [-0.1, 0.6, 0.5], [f64::NAN, 0.5, 0.5]] {
            let p = SamplingPolicy {
                length_ratios: ratios,
                ..SamplingPolicy::general()
            };
            assert!(sample_caption(&record(), &p, &mut Rng::new(0)).is_err());
        }
        assert!(SamplingPolicy::for_dataset("A").is_err());
        assert_eq!(
            SamplingPolicy::for_dataset("E").unwrap(),
            SamplingPolicy::long_only()
        );
    }

    #[test]
    fn missing_slot_falls_back_to_longest_available() {
        let mut rec = CaptionRecord::new("x");
        rec.set(Language::En, CaptionLength::Short, "red circle");
        rec.set(Language::En, CaptionLength::Middle, "a red circle on black");
        rec.set(Language::Zh, CaptionLength::Short, "circle red");
        let (l, n, text) = rec.resolve(Language::En, CaptionLength::Long).unwrap();
        assert_eq!(
            (l, n, text),
            (Language::En, CaptionLength::Middle, "a red circle on black")
        );
        let (l, n, _) = rec.resolve(Language::Zh, CaptionLength::Long).unwrap();
        assert_eq!((l, n), (Language::Zh, CaptionLength::Short));

        let mut only_zh = CaptionRecord::new("y");
        only_zh.set(Language::Zh, CaptionLength::Middle, "circle red");
        let (l, n, _) = only_zh.resolve(Language::En, CaptionLength::Short).unwrap();
        assert_eq!((l, n), (Language::Zh, CaptionLength::Middle));
    }

    #[test]
    fn record_without_captions_is_an_error() {
        let err = sample_caption(
            &CaptionRecord::new("z"),
            &SamplingPolicy::general(),
            &mut Rng::new(0),
        )
        .unwrap_err()
        .to_string();
        assert!(err.starts_with("textcond:"), "{err}");
    }

    #[test]
    fn second_language_reverses_word_order() {
        let rec = record();
        assert_eq!(rec.get(Language::Zh, CaptionLength::Short), "circle red");
    }

    #[test]
    fn tokenizer_truncates_and_maps_empty_text_to_null() {
        let text = vec!["word"; 300].join(" ");
        assert_eq!(
            tokenize(&text, DEFAULT_MAX_TEXT_LEN, 4096).unwrap().len(),
            256
        );
        assert_eq!(tokenize(&text, HQ_MAX_TEXT_LEN, 4096).unwrap().len(), 300);
        assert_eq!(tokenize("", 256, 4096).unwrap(), NULL_CAPTION);
        assert_eq!(tokenize("   \n", 256, 4096).unwrap(), NULL_CAPTION);
        let ids = tokenize("Red CIRCLE red", 256, 4096).unwrap();
        assert_eq!(ids[0], ids[2]);
        assert!(ids.iter().all(|&t| t != NULL_TOKEN && t < 4096));
    }

    #[test]
    fn fnv_matches_published_vectors() {
        assert_eq!(fnv1a32(b""), 0x811c9dc5);
        assert_eq!(fnv1a32(b"a"), 0xe40c292c);
        assert_eq!(fnv1a32(b"foobar"), 0xbf9cf968);
    }

    #[test]
    fn embedding_rows_come_from_the_text_table() {
        let cfg = DiTConfig {
            dim: 12,
            layers: 1,
            heads: 1,
            kv_heads: 1,
            vocab: 64,
            ..Default::default()
        };
        let model = DiT::new(&cfg, &mut Rng::new(5)).unwrap();
        let a = embed_text(&model, "blue square", 256).unwrap();
        assert_eq!(a, embed_text(&model, "blue square", 256).unwrap());
        assert_eq!(a.embeddings.shape(), &[2, 12]);
        let t = a.tokens[1] as usize;
        assert_eq!(
            &a.embeddings.data()[12..],
            &model.text_table().data()[t * 12..t * 12 + 12]
        );
        let null = embed_text(&model, "", 256).unwrap();
        assert_eq!(null.tokens, NULL_CAPTION);
        assert_eq!(null.embeddings.data(), &model.text_table().data()[..12]);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("captions.jsonl");
        let mut partial = CaptionRecord::new("b");
        partial.set(Language::En, CaptionLength::Short, "green \"triangle\"");
        let records = vec![record(), partial];
        write_manifest(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text
            .lines()
            .next()
            .unwrap()
            .contains("\"lang\":\"en\",\"length\":\"short\""));
        assert_eq!(read_manifest(&path).unwrap(), records);
    }
}
