//! Experiment orchestration: the training loop combining the task losses
//! with a configurable set of auxiliary alignment losses under 1+1 or CoV
//! weighting, plus evaluation and grid comparison.
//!
//! One training step: forward the English batch through the shared encoder
//! and heads, forward the target batch once if any auxiliary needs it,
//! compute the active auxiliary losses, derive weights, combine, backward,
//! and apply a plain SGD update. Encoder and all classifier heads are shared
//! between languages.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, BatchOptions, DataError, IntentMap, ParallelBatch, TaggedUtterance, Vocab};
use crate::eval::{self, EvalError, MetricCounts, MetricsReport};
use crate::losses::{self, AuxLoss, LossError};
use crate::model::{self, EncoderConfig, EncoderKind, ModelError, ModelParams, PoolingMode};
use crate::tagging::{self, TagScheme, TaggingError};
use crate::tensor::{Gradients, Tape, Tensor, TensorError};
use crate::weighting::{self, CoVState, WeightingError, WeightingMode};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("config: {0}")]
    BadConfig(String),
    #[error("missing data file {0:?}")]
    MissingPath(PathBuf),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Weighting(#[from] WeightingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tagging(#[from] TaggingError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFinite { step: u64, diagnostic: String },
    #[error("checkpoint metadata not found at {0:?} (expected beside the checkpoint)")]
    MissingMeta(PathBuf),
}

pub type Result<T> = std::result::Result<T, TrainerError>;

/// Encoder hyperparameters that are not derived from the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderSettings {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub seq_len: usize,
    pub pooling_mode: PoolingMode,
    pub encoder_kind: EncoderKind,
}

/// One experiment. Vocabulary size, intent count, and entity-class count are
/// derived from the training data at startup; everything else is explicit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub encoder: EncoderSettings,
    /// subset of {crossaligner, xeroalign, contrastive, translate_intent};
    /// empty = pure zero-shot baseline
    pub auxiliaries: Vec<String>,
    pub weighting: WeightingMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub eng_train: PathBuf,
    pub tar_train: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eng_eval: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tar_eval: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "default_temperature")]
    pub contrastive_temperature: f64,
    /// let the O class participate in the presence labels (the label
    /// transform's literal output)
    #[serde(default = "default_true")]
    pub include_outside_in_presence: bool,
    #[serde(default = "default_min_count")]
    pub vocab_min_count: usize,
    pub target_language: String,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_min_count() -> usize {
    1
}

impl ExperimentConfig {
    pub fn parsed_auxiliaries(&self) -> Result<Vec<AuxLoss>> {
        let mut out = Vec::new();
        for name in &self.auxiliaries {
            let aux = AuxLoss::parse(name)
                .ok_or_else(|| TrainerError::BadConfig(format!("unknown auxiliary {name:?}")))?;
            if out.contains(&aux) {
                return Err(TrainerError::BadConfig(format!(
                    "auxiliary {name:?} listed twice"
                )));
            }
            out.push(aux);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.parsed_auxiliaries()?;
        if self.epochs == 0 {
            return Err(TrainerError::BadConfig("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainerError::BadConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainerError::BadConfig(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.contrastive_temperature > 0.0) {
            return Err(TrainerError::BadConfig(
                "contrastive_temperature must be positive".into(),
            ));
        }
        let mut required = vec![&self.eng_train, &self.tar_train];
        required.extend(self.eng_eval.iter());
        required.extend(self.tar_eval.iter());
        for path in required {
            if !path.exists() {
                return Err(TrainerError::MissingPath(path.clone()));
            }
        }
        Ok(())
    }
}

/// One training step's logged loss components. `total` always equals the
/// recomputation of the weighted combination from these fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub l_ic: f64,
    pub l_ec: f64,
    pub aux: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eng: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tar: Option<MetricsReport>,
}

/// Full artifact of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub steps: Vec<StepLog>,
    pub epoch_evals: Vec<EpochEval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_eng: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_tar: Option<MetricsReport>,
    pub checkpoint: PathBuf,
    pub wall_clock_secs: f64,
    /// target-side encoder invocations; 0 for the zero-shot baseline
    pub target_encodes: u64,
    pub warnings: Vec<String>,
}

/// Vocabulary, tag scheme, and intent index saved beside a checkpoint so it
/// can be evaluated on raw corpora later.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub vocab: Vocab,
    pub scheme: TagScheme,
    pub intents: IntentMap,
    pub target_language: String,
}

fn entity_types_of(corpus: &[TaggedUtterance]) -> Vec<String> {
    let mut types: Vec<String> = corpus
        .iter()
        .filter_map(|u| u.tags.as_ref())
        .flatten()
        .filter_map(|t| match tagging::Tag::parse(t) {
            Ok(tag) => tag.entity_type().map(|s| s.to_string()),
            Err(_) => None,
        })
        .collect();
    types.sort();
    types.dedup();
    types
}

/// Plain SGD: p ← p − lr·g over every parameter tensor, in a fixed order.
/// `bound` must be the tape-bound twin of `params` used in the forward pass.
pub fn sgd_step(
    params: &mut ModelParams,
    bound: &ModelParams,
    grads: &Gradients,
    lr: f64,
) -> Result<()> {
    let bound_named: BTreeMap<String, &Tensor> = bound.named_tensors().into_iter().collect();
    for (name, p) in params.named_tensors_mut() {
        let g = grads.wrt(bound_named[&name]);
        if !g.is_finite() {
            return Err(TrainerError::NonFinite {
                step: 0,
                diagnostic: format!("gradient for {name} is non-finite"),
            });
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

struct Forwarded {
    ic_logits: Tensor,
    ec_logits: Tensor,
    cls: Tensor,
}

fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    config: &EncoderConfig,
    ids: &[Vec<usize>],
    mask: &[Vec<u8>],
) -> Result<Forwarded> {
    let enc = model::encode(tape, params, config, ids, mask)?;
    let ic_logits = model::intent_logits(tape, params, &enc.cls)?;
    let ec_logits = model::entity_logits(tape, params, &enc.tokens)?;
    Ok(Forwarded {
        ic_logits,
        ec_logits,
        cls: enc.cls,
    })
}

/// Train a model per the config, returning the full run record. Artifacts
/// (checkpoint, metadata, step log, run record) are written to `output_dir`.
pub fn train(config: &ExperimentConfig) -> Result<RunRecord> {
    let start = Instant::now();
    config.validate()?;
    let auxiliaries = config.parsed_auxiliaries()?;

    let eng_loaded = data::load_corpus(&config.eng_train, "en")?;
    let tar_loaded = data::load_corpus(&config.tar_train, &config.target_language)?;
    let mut warnings = eng_loaded.warnings;
    warnings.extend(tar_loaded.warnings);
    let pairs = data::pair_parallel(&eng_loaded.utterances, &tar_loaded.utterances)?;

    let vocab = data::build_vocab(
        &[&eng_loaded.utterances[..], &tar_loaded.utterances[..]],
        config.vocab_min_count,
    );
    let scheme = TagScheme::io_from_types(entity_types_of(&eng_loaded.utterances));
    let intents = IntentMap::from_corpus(&eng_loaded.utterances);
    let enc_cfg = EncoderConfig {
        vocab_size: vocab.len(),
        hidden_size: config.encoder.hidden_size,
        num_layers: config.encoder.num_layers,
        seq_len: config.encoder.seq_len,
        num_intents: intents.len(),
        num_entity_classes: scheme.num_classes(),
        pooling_mode: config.encoder.pooling_mode,
        encoder_kind: config.encoder.encoder_kind,
    };
    enc_cfg.validate()?;
    let meta = CheckpointMeta {
        vocab: vocab.clone(),
        scheme: scheme.clone(),
        intents: intents.clone(),
        target_language: config.target_language.clone(),
    };

    let eng_eval = match &config.eng_eval {
        Some(p) => Some(data::load_corpus(p, "en")?.utterances),
        None => None,
    };
    let tar_eval = match &config.tar_eval {
        Some(p) => Some(data::load_corpus(p, &config.target_language)?.utterances),
        None => None,
    };

    let mut params = model::init_model(&enc_cfg, config.seed)?;
    let ignore_index = scheme.num_classes();
    let needs_target = !auxiliaries.is_empty();
    let mut cov_state = CoVState::new();
    let mut steps: Vec<StepLog> = Vec::new();
    let mut epoch_evals = Vec::new();
    let mut step_no: u64 = 0;
    let mut target_encodes: u64 = 0;

    for epoch in 0..config.epochs {
        let opts = BatchOptions {
            seq_len: enc_cfg.seq_len,
            batch_size: config.batch_size,
            seed: config.seed.wrapping_add(epoch as u64),
            shuffle: true,
            include_outside_in_presence: config.include_outside_in_presence,
        };
        let (batches, batch_warnings) =
            data::make_batches(&pairs, &vocab, &scheme, &intents, &opts)?;
        if epoch == 0 {
            warnings.extend(batch_warnings);
        }
        for batch in &batches {
            if batch.y_ic.len() < 2 && auxiliaries.contains(&AuxLoss::Contrastive) {
                if epoch == 0 {
                    warnings.push(format!(
                        "skipping a batch of {} example(s): contrastive loss needs >= 2",
                        batch.y_ic.len()
                    ));
                }
                continue;
            }
            step_no += 1;
            let log = train_step(
                &mut params,
                &enc_cfg,
                config,
                &auxiliaries,
                batch,
                ignore_index,
                &mut cov_state,
                step_no,
                epoch,
                &mut target_encodes,
            )?;
            steps.push(log);
        }
        if eng_eval.is_some() || tar_eval.is_some() {
            epoch_evals.push(EpochEval {
                epoch,
                eng: eng_eval
                    .as_deref()
                    .map(|c| evaluate(&enc_cfg, &params, &meta, c, config.batch_size))
                    .transpose()?,
                tar: tar_eval
                    .as_deref()
                    .map(|c| evaluate(&enc_cfg, &params, &meta, c, config.batch_size))
                    .transpose()?,
            });
        }
        debug_assert!(needs_target || target_encodes == 0);
    }

    std::fs::create_dir_all(&config.output_dir)?;
    let checkpoint = config.output_dir.join("model.json");
    model::save_checkpoint(&checkpoint, &enc_cfg, &params)?;
    std::fs::write(
        meta_path(&checkpoint),
        serde_json::to_vec_pretty(&meta)?,
    )?;
    let mut step_log = std::io::BufWriter::new(std::fs::File::create(
        config.output_dir.join("steps.jsonl"),
    )?);
    for s in &steps {
        serde_json::to_writer(&mut step_log, s)?;
        step_log.write_all(b"\n")?;
    }
    step_log.flush()?;

    let last = epoch_evals.last();
    let record = RunRecord {
        config: config.clone(),
        final_eng: last.and_then(|e| e.eng.clone()),
        final_tar: last.and_then(|e| e.tar.clone()),
        steps,
        epoch_evals,
        checkpoint,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        target_encodes,
        warnings,
    };
    std::fs::write(
        config.output_dir.join("run_record.json"),
        serde_json::to_vec_pretty(&record)?,
    )?;
    Ok(record)
}

/// Path of the metadata file saved beside a checkpoint.
pub fn meta_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("meta.json")
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut ModelParams,
    enc_cfg: &EncoderConfig,
    config: &ExperimentConfig,
    auxiliaries: &[AuxLoss],
    batch: &ParallelBatch,
    ignore_index: usize,
    cov_state: &mut CoVState,
    step_no: u64,
    epoch: usize,
    target_encodes: &mut u64,
) -> Result<StepLog> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let eng = forward(&mut tape, &bound, enc_cfg, &batch.eng_ids, &batch.eng_mask)?;
    let (l_ic, l_ec) = losses::task_loss(
        &mut tape,
        &eng.ic_logits,
        &eng.ec_logits,
        &batch.y_ic,
        &batch.y_ec,
        ignore_index,
    )?;

    // one shared target forward serves every active auxiliary
    let tar = if auxiliaries.is_empty() {
        None
    } else {
        *target_encodes += 1;
        Some(forward(
            &mut tape,
            &bound,
            enc_cfg,
            &batch.tar_ids,
            &batch.tar_mask,
        )?)
    };

    let mut aux_terms: BTreeMap<String, Tensor> = BTreeMap::new();
    for aux in auxiliaries {
        let tar = tar.as_ref().expect("target forward exists when auxiliaries active");
        let term = match aux {
            AuxLoss::CrossAligner => {
                let y_ca = Tensor::from_rows(&batch.y_ca).map_err(LossError::from)?;
                let (l_eng, l_tar) = losses::crossaligner_loss(
                    &mut tape,
                    &bound,
                    &eng.ec_logits,
                    &tar.ec_logits,
                    &y_ca,
                )?;
                tape.add(&l_eng, &l_tar).map_err(LossError::from)?
            }
            AuxLoss::XeroAlign => losses::xeroalign_loss(&mut tape, &eng.cls, &tar.cls)?,
            AuxLoss::Contrastive => losses::contrastive_loss(
                &mut tape,
                &eng.cls,
                &tar.cls,
                config.contrastive_temperature,
            )?,
            AuxLoss::TranslateIntent => {
                losses::translate_intent_loss(&mut tape, &tar.ic_logits, &batch.y_ic)?
            }
        };
        aux_terms.insert(aux.name().to_string(), term);
    }

    let aux_values: BTreeMap<String, f64> = aux_terms
        .iter()
        .map(|(n, t)| (n.clone(), t.value()))
        .collect();
    let weights: BTreeMap<String, f64> = match config.weighting {
        WeightingMode::OnePlusOne => aux_values.keys().map(|n| (n.clone(), 1.0)).collect(),
        WeightingMode::Cov => cov_state
            .cov_update(&aux_values)
            .into_iter()
            .map(|(n, w)| (n, w.weight))
            .collect(),
    };
    let total = weighting::combine_total(
        &mut tape,
        &l_ic,
        &l_ec,
        &aux_terms,
        config.weighting,
        &weights,
    )?;
    if !total.value().is_finite() {
        return Err(TrainerError::NonFinite {
            step: step_no,
            diagnostic: format!(
                "l_ic={}, l_ec={}, aux={aux_values:?}, weights={weights:?}",
                l_ic.value(),
                l_ec.value()
            ),
        });
    }
    let grads = tape.backward(&total).map_err(TensorError::from)?;
    sgd_step(params, &bound, &grads, config.learning_rate).map_err(|e| match e {
        TrainerError::NonFinite { diagnostic, .. } => TrainerError::NonFinite {
            step: step_no,
            diagnostic,
        },
        other => other,
    })?;
    Ok(StepLog {
        step: step_no,
        epoch,
        l_ic: l_ic.value(),
        l_ec: l_ec.value(),
        aux: aux_values,
        weights,
        total: total.value(),
    })
}

/// Greedy-argmax evaluation of a model on a labelled corpus: intent accuracy,
/// entity F over exact spans after B-restoration, Overall. Ties break toward
/// the lowest class index.
pub fn evaluate(
    enc_cfg: &EncoderConfig,
    params: &ModelParams,
    meta: &CheckpointMeta,
    corpus: &[TaggedUtterance],
    batch_size: usize,
) -> Result<MetricsReport> {
    if corpus.is_empty() {
        return Err(TrainerError::BadConfig("empty evaluation corpus".into()));
    }
    let mut pred_intents = Vec::with_capacity(corpus.len());
    let mut gold_intents = Vec::with_capacity(corpus.len());
    let mut pred_tags: Vec<Vec<String>> = Vec::with_capacity(corpus.len());
    let mut gold_tags: Vec<Vec<String>> = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(batch_size.max(1)) {
        let mut ids = Vec::with_capacity(chunk.len());
        let mut mask = Vec::with_capacity(chunk.len());
        for utt in chunk {
            let (i, m, _) = data::encode_utterance(&utt.tokens, &meta.vocab, enc_cfg.seq_len);
            ids.push(i);
            mask.push(m);
        }
        // params are unbound: the tape records nothing
        let mut tape = Tape::new();
        let out = forward(&mut tape, params, enc_cfg, &ids, &mask)?;
        let num_intents = enc_cfg.num_intents;
        let e = enc_cfg.num_entity_classes;
        let s = enc_cfg.seq_len;
        for (i, utt) in chunk.iter().enumerate() {
            let row = &out.ic_logits.data()[i * num_intents..(i + 1) * num_intents];
            pred_intents.push(argmax(row));
            gold_intents.push(meta.intents.index(&utt.intent)?);
            let body_len = (s - 1).min(utt.tokens.len());
            let mut tags = Vec::with_capacity(utt.tokens.len());
            for pos in 1..=body_len {
                let off = (i * s + pos) * e;
                let cls = argmax(&out.ec_logits.data()[off..off + e]);
                tags.push(meta.scheme.tag_of(cls)?.to_string());
            }
            // truncated tail (if any) defaults to O
            tags.resize(utt.tokens.len(), "O".to_string());
            pred_tags.push(tags);
            gold_tags.push(utt.tags.clone().unwrap_or_else(|| {
                vec!["O".to_string(); utt.tokens.len()]
            }));
        }
    }
    let acc_correct = pred_intents
        .iter()
        .zip(&gold_intents)
        .filter(|(a, b)| a == b)
        .count();
    let (tp, fp, fn_) = eval::entity_counts(&pred_tags, &gold_tags)?;
    Ok(MetricsReport::from_counts(MetricCounts {
        tp,
        fp,
        fn_,
        n_intents_correct: acc_correct,
        n_intents_total: gold_intents.len(),
    }))
}

/// First index of the maximum (lowest index wins ties).
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluate a saved checkpoint (with its sidecar metadata) on a corpus file.
pub fn evaluate_checkpoint(checkpoint: &Path, data_path: &Path) -> Result<MetricsReport> {
    let (enc_cfg, params) = model::load_checkpoint(checkpoint)?;
    let meta_file = meta_path(checkpoint);
    if !meta_file.exists() {
        return Err(TrainerError::MissingMeta(meta_file));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(meta_file)?)?;
    let loaded = data::load_corpus(data_path, detect_language(data_path, &meta)?.as_str())?;
    evaluate(&enc_cfg, &params, &meta, &loaded.utterances, 32)
}

fn detect_language(path: &Path, meta: &CheckpointMeta) -> Result<String> {
    // peek at the first record; the loader then validates the whole file
    let file = std::fs::File::open(path)?;
    use std::io::BufRead;
    let first = std::io::BufReader::new(file)
        .lines()
        .next()
        .transpose()?
        .unwrap_or_default();
    let utt: TaggedUtterance = serde_json::from_str(&first)
        .map_err(|e| TrainerError::BadConfig(format!("cannot read first record: {e}")))?;
    if utt.language != "en" && utt.language != meta.target_language {
        return Err(TrainerError::BadConfig(format!(
            "corpus language {:?} matches neither \"en\" nor {:?}",
            utt.language, meta.target_language
        )));
    }
    Ok(utt.language)
}

/// One row of a grid comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tar: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairwiseZ {
    pub a: String,
    pub b: String,
    pub z: f64,
    pub p_two_tailed: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridReport {
    /// rows ranked by target Overall, descending; failed runs last
    pub rows: Vec<GridRow>,
    /// z-tests on intent correctness counts for every ranked pair
    pub pairwise: Vec<PairwiseZ>,
}

/// Run every config, rank by target-language Overall, and z-test each pair's
/// intent correctness counts. Individual failures are recorded, not fatal.
pub fn run_grid(configs: &[(String, ExperimentConfig)]) -> GridReport {
    let mut rows: Vec<GridRow> = configs
        .iter()
        .map(|(name, config)| match train(config) {
            Ok(record) => GridRow {
                name: name.clone(),
                tar: record.final_tar,
                error: None,
            },
            Err(e) => GridRow {
                name: name.clone(),
                tar: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    rows.sort_by(|a, b| {
        let oa = a.tar.as_ref().map(|m| m.overall);
        let ob = b.tar.as_ref().map(|m| m.overall);
        ob.partial_cmp(&oa).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut pairwise = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let (Some(ma), Some(mb)) = (&rows[i].tar, &rows[j].tar) else {
                continue;
            };
            if let Ok(r) = eval::z_test_proportions(
                ma.counts.n_intents_correct,
                ma.counts.n_intents_total,
                mb.counts.n_intents_correct,
                mb.counts.n_intents_total,
            ) {
                pairwise.push(PairwiseZ {
                    a: rows[i].name.clone(),
                    b: rows[j].name.clone(),
                    z: r.z,
                    p_two_tailed: r.p_two_tailed,
                });
            }
        }
    }
    GridReport { rows, pairwise }
}
