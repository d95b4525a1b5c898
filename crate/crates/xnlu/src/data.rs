//! Corpus I/O, parallel pairing, batching, vocabulary, and the synthetic
//! cipher-language generator that stands in for machine translation.
//!
//! Corpora are JSON-lines, one utterance per line:
//! `{"id": ..., "language": ..., "tokens": [...], "tags": [...], "intent": ...}`
//! with `tags` optional (absent for unlabelled target data). Gold target tags
//! produced by the generator are written to a separate file and exist only in
//! the evaluation path; training batches derive every label from the English
//! annotation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tagging::{self, TagScheme, TaggingError};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const OOV_ID: usize = 2;
pub const PAD_TOKEN: &str = "<pad>";
pub const CLS_TOKEN: &str = "<cls>";
pub const OOV_TOKEN: &str = "<oov>";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {source}")]
    MalformedLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line} (id {id:?}): {tokens} tokens but {tags} tags")]
    LengthMismatch {
        line: usize,
        id: String,
        tokens: usize,
        tags: usize,
    },
    #[error("line {line} (id {id:?}): language {found:?}, expected {expected:?}")]
    WrongLanguage {
        line: usize,
        id: String,
        found: String,
        expected: String,
    },
    #[error("line {line} (id {id:?}): empty intent")]
    EmptyIntent { line: usize, id: String },
    #[error("target corpus is missing id {0:?}")]
    MissingTargetId(String),
    #[error("duplicate id {0:?} in target corpus")]
    DuplicateTargetId(String),
    #[error(transparent)]
    Tagging(#[from] TaggingError),
    #[error("unknown intent {0:?}")]
    UnknownIntent(String),
    #[error("cipher spec: slot type {0:?} has no fillers")]
    EmptyFillers(String),
    #[error("cipher spec: no cipher entry for token {0:?}")]
    CipherMissing(String),
    #[error("cipher spec: cipher is not injective, {a:?} and {b:?} both map to {to:?}")]
    CipherNotInjective { a: String, b: String, to: String },
    #[error("cipher spec: template for intent {intent:?} references unknown slot {slot:?}")]
    UnknownSlot { intent: String, slot: String },
    #[error("cipher spec: {0}")]
    BadSpec(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One annotated (or unlabelled) utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedUtterance {
    pub id: String,
    pub language: String,
    pub tokens: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
    pub intent: String,
}

/// Corpus plus the data warnings (BIO repairs) raised while loading.
#[derive(Debug)]
pub struct LoadedCorpus {
    pub utterances: Vec<TaggedUtterance>,
    pub warnings: Vec<String>,
}

/// Load and validate a JSON-lines corpus, repairing BIO-invalid gold tags
/// (stray I promoted to B) with a warning per repair.
pub fn load_corpus(path: &Path, expected_language: &str) -> Result<LoadedCorpus> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut utterances = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut utt: TaggedUtterance =
            serde_json::from_str(&line).map_err(|source| DataError::MalformedLine {
                line: line_no,
                source,
            })?;
        if let Some(tags) = &mut utt.tags {
            if tags.len() != utt.tokens.len() {
                return Err(DataError::LengthMismatch {
                    line: line_no,
                    id: utt.id.clone(),
                    tokens: utt.tokens.len(),
                    tags: tags.len(),
                });
            }
            let repaired = tagging::repair_bio(tags)?;
            if !repaired.is_empty() {
                warnings.push(format!(
                    "line {line_no} (id {:?}): repaired stray I-tags at positions {repaired:?}",
                    utt.id
                ));
            }
        }
        if utt.language != expected_language {
            return Err(DataError::WrongLanguage {
                line: line_no,
                id: utt.id.clone(),
                found: utt.language.clone(),
                expected: expected_language.to_string(),
            });
        }
        if utt.intent.is_empty() {
            return Err(DataError::EmptyIntent {
                line: line_no,
                id: utt.id,
            });
        }
        utterances.push(utt);
    }
    Ok(LoadedCorpus {
        utterances,
        warnings,
    })
}

pub fn save_corpus(path: &Path, corpus: &[TaggedUtterance]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for utt in corpus {
        serde_json::to_writer(&mut out, utt).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Join English and target corpora by utterance id, in English corpus order.
/// Target tags are discarded: they must never reach training.
pub fn pair_parallel(
    eng: &[TaggedUtterance],
    tar: &[TaggedUtterance],
) -> Result<Vec<(TaggedUtterance, TaggedUtterance)>> {
    let mut by_id: HashMap<&str, &TaggedUtterance> = HashMap::new();
    for t in tar {
        if by_id.insert(&t.id, t).is_some() {
            return Err(DataError::DuplicateTargetId(t.id.clone()));
        }
    }
    eng.iter()
        .map(|e| {
            let t = by_id
                .get(e.id.as_str())
                .ok_or_else(|| DataError::MissingTargetId(e.id.clone()))?;
            let mut t = (*t).clone();
            t.tags = None; // zero-shot contract
            Ok((e.clone(), t))
        })
        .collect()
}

/// Token vocabulary with reserved PAD/CLS/OOV ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    token_to_id: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn len(&self) -> usize {
        self.token_to_id.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids always exist
    }
}

/// Deterministic vocabulary over all given corpora: tokens sorted by
/// (count desc, token asc), thresholded by `min_count`.
pub fn build_vocab(corpora: &[&[TaggedUtterance]], min_count: usize) -> Vocab {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for corpus in corpora {
        for utt in *corpus {
            for tok in &utt.tokens {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let token_to_id = ranked
        .into_iter()
        .enumerate()
        .map(|(i, (tok, _))| (tok.to_string(), i + 3))
        .collect();
    Vocab { token_to_id }
}

/// Sorted intent-label index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentMap {
    pub names: Vec<String>,
}

impl IntentMap {
    pub fn from_corpus(corpus: &[TaggedUtterance]) -> IntentMap {
        let names: BTreeSet<String> = corpus.iter().map(|u| u.intent.clone()).collect();
        IntentMap {
            names: names.into_iter().collect(),
        }
    }

    pub fn index(&self, intent: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == intent)
            .ok_or_else(|| DataError::UnknownIntent(intent.to_string()))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Padded parallel training batch. All supervision (`y_ic`, `y_ec`, `y_ca`)
/// derives from the English annotation only.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelBatch {
    pub eng_ids: Vec<Vec<usize>>,
    pub eng_mask: Vec<Vec<u8>>,
    pub tar_ids: Vec<Vec<usize>>,
    pub tar_mask: Vec<Vec<u8>>,
    pub y_ic: Vec<usize>,
    /// IO class indices, `ignore_index` at CLS and padding positions.
    pub y_ec: Vec<Vec<usize>>,
    /// batch x num_classes multi-hot presence rows.
    pub y_ca: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub seq_len: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// let the O class set its presence bit (the literal label transform)
    pub include_outside_in_presence: bool,
}

/// Map tokens to padded model input: CLS id, token ids (OOV for unknowns),
/// padding to `seq_len`. Returns (ids, mask, number of truncated tokens).
pub fn encode_utterance(
    tokens: &[String],
    vocab: &Vocab,
    seq_len: usize,
) -> (Vec<usize>, Vec<u8>, usize) {
    let body_len = (seq_len - 1).min(tokens.len());
    let mut ids = Vec::with_capacity(seq_len);
    let mut mask = Vec::with_capacity(seq_len);
    ids.push(CLS_ID);
    mask.push(1);
    for tok in &tokens[..body_len] {
        ids.push(vocab.id(tok));
        mask.push(1);
    }
    while ids.len() < seq_len {
        ids.push(PAD_ID);
        mask.push(0);
    }
    (ids, mask, tokens.len().saturating_sub(body_len))
}

/// Deterministic batching: CLS prepended, padding to `seq_len`, entity labels
/// converted to IO class indices, presence labels via the label transform.
/// Returns the batches plus truncation warnings.
pub fn make_batches(
    pairs: &[(TaggedUtterance, TaggedUtterance)],
    vocab: &Vocab,
    scheme: &TagScheme,
    intents: &IntentMap,
    opts: &BatchOptions,
) -> Result<(Vec<ParallelBatch>, Vec<String>)> {
    let ignore_index = scheme.num_classes();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if opts.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        order.shuffle(&mut rng);
    }
    let mut warnings = Vec::new();
    let mut batches = Vec::new();
    for chunk in order.chunks(opts.batch_size.max(1)) {
        let mut batch = ParallelBatch {
            eng_ids: vec![],
            eng_mask: vec![],
            tar_ids: vec![],
            tar_mask: vec![],
            y_ic: vec![],
            y_ec: vec![],
            y_ca: vec![],
        };
        for &i in chunk {
            let (eng, tar) = &pairs[i];
            let (ids, mask, dropped) = encode_utterance(&eng.tokens, vocab, opts.seq_len);
            if dropped > 0 {
                warnings.push(format!(
                    "id {:?}: truncated {dropped} English tokens to fit seq_len {}",
                    eng.id, opts.seq_len
                ));
            }
            batch.eng_ids.push(ids);
            batch.eng_mask.push(mask);
            let (tids, tmask, tdropped) = encode_utterance(&tar.tokens, vocab, opts.seq_len);
            if tdropped > 0 {
                warnings.push(format!(
                    "id {:?}: truncated {tdropped} target tokens to fit seq_len {}",
                    tar.id, opts.seq_len
                ));
            }
            batch.tar_ids.push(tids);
            batch.tar_mask.push(tmask);
            batch.y_ic.push(intents.index(&eng.intent)?);

            let gold_bio = eng.tags.as_deref().unwrap_or(&[]);
            let io_tags = tagging::bio_to_io(gold_bio)?;
            let body_len = (opts.seq_len - 1).min(io_tags.len());
            let mut ec_row = Vec::with_capacity(opts.seq_len);
            ec_row.push(ignore_index); // CLS
            let mut real_indices = Vec::with_capacity(body_len);
            for tag in &io_tags[..body_len] {
                let idx = scheme.index_of(tag)?;
                ec_row.push(idx);
                real_indices.push(idx);
            }
            while ec_row.len() < opts.seq_len {
                ec_row.push(ignore_index);
            }
            batch.y_ec.push(ec_row);
            batch.y_ca.push(tagging::transform_labels(
                &real_indices,
                scheme.num_classes(),
                opts.include_outside_in_presence,
            )?);
        }
        batches.push(batch);
    }
    Ok((batches, warnings))
}

// ---- synthetic cipher corpus ----------------------------------------------

/// Config for the synthetic parallel-corpus generator. The pseudo target
/// language is a deterministic token-for-token cipher of English, plus
/// optional untagged filler insertions modelling translation length drift.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CipherSpec {
    /// intent name -> templates; slots appear as `{slot_type}` tokens
    pub templates: BTreeMap<String, Vec<String>>,
    /// slot type -> surface forms (each form may be multi-token)
    pub slot_fillers: BTreeMap<String, Vec<String>>,
    /// source token -> target token; must be injective and cover every
    /// surface token the templates and fillers can produce
    pub cipher: BTreeMap<String, String>,
    /// probability of inserting a filler word after each target token
    #[serde(default)]
    pub noise: f64,
    /// target-language filler words used for noise insertions
    #[serde(default)]
    pub noise_tokens: Vec<String>,
    #[serde(default = "default_target_language")]
    pub target_language: String,
}

fn default_target_language() -> String {
    "xx".to_string()
}

impl CipherSpec {
    /// Every surface token the templates and fillers can produce.
    fn surface_tokens(&self) -> BTreeSet<String> {
        let mut tokens = BTreeSet::new();
        for templates in self.templates.values() {
            for t in templates {
                for tok in t.split_whitespace() {
                    if !(tok.starts_with('{') && tok.ends_with('}')) {
                        tokens.insert(tok.to_string());
                    }
                }
            }
        }
        for fillers in self.slot_fillers.values() {
            for f in fillers {
                for tok in f.split_whitespace() {
                    tokens.insert(tok.to_string());
                }
            }
        }
        tokens
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(DataError::BadSpec("no templates".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(DataError::BadSpec(format!(
                "noise {} outside [0, 1]",
                self.noise
            )));
        }
        if self.noise > 0.0 && self.noise_tokens.is_empty() {
            return Err(DataError::BadSpec(
                "noise > 0 requires noise_tokens".into(),
            ));
        }
        for (intent, templates) in &self.templates {
            for t in templates {
                for tok in t.split_whitespace() {
                    if tok.starts_with('{') && tok.ends_with('}') {
                        let slot = &tok[1..tok.len() - 1];
                        let fillers = self.slot_fillers.get(slot).ok_or_else(|| {
                            DataError::UnknownSlot {
                                intent: intent.clone(),
                                slot: slot.to_string(),
                            }
                        })?;
                        if fillers.is_empty() {
                            return Err(DataError::EmptyFillers(slot.to_string()));
                        }
                    }
                }
            }
        }
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for tok in self.surface_tokens() {
            let to = self
                .cipher
                .get(&tok)
                .ok_or_else(|| DataError::CipherMissing(tok.clone()))?;
            if let Some(prev) = seen.get(to.as_str()) {
                return Err(DataError::CipherNotInjective {
                    a: prev.to_string(),
                    b: tok.clone(),
                    to: to.clone(),
                });
            }
            // keys live as long as self; re-fetch to tie lifetimes
            let (k, v) = self.cipher.get_key_value(&tok).unwrap();
            seen.insert(v.as_str(), k.as_str());
        }
        Ok(())
    }

    /// Fill in a cipher table covering every surface token, for specs written
    /// without one: each token becomes its reverse plus a suffix, deduplicated.
    pub fn with_auto_cipher(mut self) -> CipherSpec {
        let mut used: BTreeSet<String> = self.cipher.values().cloned().collect();
        for tok in self.surface_tokens() {
            if self.cipher.contains_key(&tok) {
                continue;
            }
            let base: String = tok.chars().rev().collect();
            let mut candidate = format!("{base}ko");
            let mut salt = 0usize;
            while used.contains(&candidate) {
                salt += 1;
                candidate = format!("{base}ko{salt}");
            }
            used.insert(candidate.clone());
            self.cipher.insert(tok, candidate);
        }
        self
    }
}

/// Generator output: English corpus, unlabelled target corpus, and the gold
/// target tags kept apart for evaluation only.
pub struct SyntheticCorpus {
    pub eng: Vec<TaggedUtterance>,
    pub tar: Vec<TaggedUtterance>,
    pub tar_gold: Vec<TaggedUtterance>,
}

/// Realize `n_per_intent` utterances per intent from the templates, then
/// cipher them into the pseudo target language.
pub fn gen_synthetic(spec: &CipherSpec, n_per_intent: usize, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eng = Vec::new();
    let mut tar = Vec::new();
    let mut tar_gold = Vec::new();
    for (intent, templates) in &spec.templates {
        for i in 0..n_per_intent {
            let template = &templates[rng.gen_range(0..templates.len())];
            let mut tokens = Vec::new();
            let mut tags = Vec::new();
            for tok in template.split_whitespace() {
                if tok.starts_with('{') && tok.ends_with('}') {
                    let slot = &tok[1..tok.len() - 1];
                    let fillers = &spec.slot_fillers[slot];
                    let filler = &fillers[rng.gen_range(0..fillers.len())];
                    for (j, ftok) in filler.split_whitespace().enumerate() {
                        tokens.push(ftok.to_string());
                        tags.push(if j == 0 {
                            format!("B-{slot}")
                        } else {
                            format!("I-{slot}")
                        });
                    }
                } else {
                    tokens.push(tok.to_string());
                    tags.push("O".to_string());
                }
            }
            let id = format!("{intent}-{i}");
            // cipher translation with optional untagged filler insertions
            let mut t_tokens = Vec::new();
            let mut t_tags = Vec::new();
            for (tok, tag) in tokens.iter().zip(&tags) {
                t_tokens.push(spec.cipher[tok].clone());
                t_tags.push(tag.clone());
                if spec.noise > 0.0 && rng.gen_bool(spec.noise) {
                    let filler = &spec.noise_tokens[rng.gen_range(0..spec.noise_tokens.len())];
                    t_tokens.push(filler.clone());
                    t_tags.push("O".to_string());
                }
            }
            // a noise insertion inside an entity splits it; retag the
            // continuation as a fresh entity to keep the gold BIO valid
            tagging::repair_bio(&mut t_tags)?;
            eng.push(TaggedUtterance {
                id: id.clone(),
                language: "en".to_string(),
                tokens,
                tags: Some(tags),
                intent: intent.clone(),
            });
            tar.push(TaggedUtterance {
                id: id.clone(),
                language: spec.target_language.clone(),
                tokens: t_tokens.clone(),
                tags: None,
                intent: intent.clone(),
            });
            tar_gold.push(TaggedUtterance {
                id,
                language: spec.target_language.clone(),
                tokens: t_tokens,
                tags: Some(t_tags),
                intent: intent.clone(),
            });
        }
    }
    Ok(SyntheticCorpus { eng, tar, tar_gold })
}

/// Entity types referenced by a spec's slots (for building the tag scheme).
pub fn spec_entity_types(spec: &CipherSpec) -> Vec<String> {
    spec.slot_fillers.keys().cloned().collect()
}
