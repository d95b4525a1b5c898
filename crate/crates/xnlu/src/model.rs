//! Toy multilingual encoder plus the three shared classifier heads.
//!
//! The encoder stands in for a large pretrained language model: token and
//! position embeddings run through `num_layers` blocks of single-head
//! self-attention with residual connections and a tanh feed-forward
//! (`transformer` mode), or through position-wise tanh affine maps (`bag`
//! mode, much cheaper). No layer normalization; desk-scale stability comes
//! from small learning rates.
//!
//! The heads keep the exact shape contract of the training recipe:
//! IC `[H, intents]`, EC `[H, entities]`, CA `[seq_len * entities, entities]`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid encoder config: {0}")]
    BadConfig(String),
    #[error("token id {id} out of vocab (size {vocab_size}) at example {example}, position {position}")]
    TokenOutOfVocab {
        id: usize,
        vocab_size: usize,
        example: usize,
        position: usize,
    },
    #[error("batch shape error: {0}")]
    BadBatch(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    Cls,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Transformer,
    Bag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub seq_len: usize,
    pub num_intents: usize,
    pub num_entity_classes: usize,
    pub pooling_mode: PoolingMode,
    pub encoder_kind: EncoderKind,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(ModelError::BadConfig(
                "seq_len must be >= 2 (position 0 is the CLS token)".into(),
            ));
        }
        if self.num_entity_classes < 2 {
            return Err(ModelError::BadConfig(
                "num_entity_classes must be >= 2 (O plus at least one type)".into(),
            ));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("num_layers", self.num_layers),
            ("num_intents", self.num_intents),
        ] {
            if v == 0 {
                return Err(ModelError::BadConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
}

/// All trainable parameters. The three heads are single affine maps.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub token_embeddings: Tensor,
    pub position_embeddings: Tensor,
    pub layers: Vec<LayerParams>,
    pub ic_w: Tensor,
    pub ic_b: Tensor,
    pub ec_w: Tensor,
    pub ec_b: Tensor,
    pub ca_w: Tensor,
    pub ca_b: Tensor,
}

#[derive(Debug)]
pub struct EncoderOutput {
    /// batch x H sentence embeddings (CLS position or masked mean).
    pub cls: Tensor,
    /// batch x seq_len x H token embeddings.
    pub tokens: Tensor,
    pub mask: Vec<Vec<u8>>,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

/// Deterministic Xavier-uniform initialization; biases start at zero.
pub fn init_model(config: &EncoderConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let h = config.hidden_size;
    let e = config.num_entity_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let token_embeddings = xavier(&mut rng, config.vocab_size, h, vec![config.vocab_size, h]);
    let position_embeddings = xavier(&mut rng, config.seq_len, h, vec![config.seq_len, h]);
    let layers = (0..config.num_layers)
        .map(|_| LayerParams {
            wq: xavier(&mut rng, h, h, vec![h, h]),
            wk: xavier(&mut rng, h, h, vec![h, h]),
            wv: xavier(&mut rng, h, h, vec![h, h]),
            wo: xavier(&mut rng, h, h, vec![h, h]),
            ff1_w: xavier(&mut rng, h, h, vec![h, h]),
            ff1_b: Tensor::zeros(vec![h]),
            ff2_w: xavier(&mut rng, h, h, vec![h, h]),
            ff2_b: Tensor::zeros(vec![h]),
        })
        .collect();
    Ok(ModelParams {
        token_embeddings,
        position_embeddings,
        layers,
        ic_w: xavier(&mut rng, h, config.num_intents, vec![h, config.num_intents]),
        ic_b: Tensor::zeros(vec![config.num_intents]),
        ec_w: xavier(&mut rng, h, e, vec![h, e]),
        ec_b: Tensor::zeros(vec![e]),
        ca_w: xavier(&mut rng, config.seq_len * e, e, vec![config.seq_len * e, e]),
        ca_b: Tensor::zeros(vec![e]),
    })
}

impl ModelParams {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_embeddings".into(), &self.token_embeddings),
            ("position_embeddings".into(), &self.position_embeddings),
            ("ic_w".into(), &self.ic_w),
            ("ic_b".into(), &self.ic_b),
            ("ec_w".into(), &self.ec_w),
            ("ec_b".into(), &self.ec_b),
            ("ca_w".into(), &self.ca_w),
            ("ca_b".into(), &self.ca_b),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.wq"), &l.wq));
            out.push((format!("layer{i}.wk"), &l.wk));
            out.push((format!("layer{i}.wv"), &l.wv));
            out.push((format!("layer{i}.wo"), &l.wo));
            out.push((format!("layer{i}.ff1_w"), &l.ff1_w));
            out.push((format!("layer{i}.ff1_b"), &l.ff1_b));
            out.push((format!("layer{i}.ff2_w"), &l.ff2_w));
            out.push((format!("layer{i}.ff2_b"), &l.ff2_b));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("token_embeddings".into(), &mut self.token_embeddings),
            ("position_embeddings".into(), &mut self.position_embeddings),
            ("ic_w".into(), &mut self.ic_w),
            ("ic_b".into(), &mut self.ic_b),
            ("ec_w".into(), &mut self.ec_w),
            ("ec_b".into(), &mut self.ec_b),
            ("ca_w".into(), &mut self.ca_w),
            ("ca_b".into(), &mut self.ca_b),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.wq"), &mut l.wq));
            out.push((format!("layer{i}.wk"), &mut l.wk));
            out.push((format!("layer{i}.wv"), &mut l.wv));
            out.push((format!("layer{i}.wo"), &mut l.wo));
            out.push((format!("layer{i}.ff1_w"), &mut l.ff1_w));
            out.push((format!("layer{i}.ff1_b"), &mut l.ff1_b));
            out.push((format!("layer{i}.ff2_w"), &mut l.ff2_w));
            out.push((format!("layer{i}.ff2_b"), &mut l.ff2_b));
        }
        out
    }

    /// Register every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> ModelParams {
        ModelParams {
            token_embeddings: tape.leaf(&self.token_embeddings),
            position_embeddings: tape.leaf(&self.position_embeddings),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: tape.leaf(&l.wq),
                    wk: tape.leaf(&l.wk),
                    wv: tape.leaf(&l.wv),
                    wo: tape.leaf(&l.wo),
                    ff1_w: tape.leaf(&l.ff1_w),
                    ff1_b: tape.leaf(&l.ff1_b),
                    ff2_w: tape.leaf(&l.ff2_w),
                    ff2_b: tape.leaf(&l.ff2_b),
                })
                .collect(),
            ic_w: tape.leaf(&self.ic_w),
            ic_b: tape.leaf(&self.ic_b),
            ec_w: tape.leaf(&self.ec_w),
            ec_b: tape.leaf(&self.ec_b),
            ca_w: tape.leaf(&self.ca_w),
            ca_b: tape.leaf(&self.ca_b),
        }
    }
}

fn check_batch(
    config: &EncoderConfig,
    token_ids: &[Vec<usize>],
    mask: &[Vec<u8>],
) -> Result<()> {
    if token_ids.len() != mask.len() {
        return Err(ModelError::BadBatch(format!(
            "{} id rows vs {} mask rows",
            token_ids.len(),
            mask.len()
        )));
    }
    for (e, (ids, m)) in token_ids.iter().zip(mask).enumerate() {
        if ids.len() != config.seq_len || m.len() != config.seq_len {
            return Err(ModelError::BadBatch(format!(
                "example {e}: expected length {}, got ids {} / mask {}",
                config.seq_len,
                ids.len(),
                m.len()
            )));
        }
        if m[0] != 1 {
            return Err(ModelError::BadBatch(format!(
                "example {e}: CLS position must be unmasked"
            )));
        }
        for (p, &id) in ids.iter().enumerate() {
            if id >= config.vocab_size {
                return Err(ModelError::TokenOutOfVocab {
                    id,
                    vocab_size: config.vocab_size,
                    example: e,
                    position: p,
                });
            }
        }
    }
    Ok(())
}

/// Run the encoder over a padded batch. `params` must be tape-bound when
/// gradients are needed.
pub fn encode(
    tape: &mut Tape,
    params: &ModelParams,
    config: &EncoderConfig,
    token_ids: &[Vec<usize>],
    mask: &[Vec<u8>],
) -> Result<EncoderOutput> {
    check_batch(config, token_ids, mask)?;
    let b = token_ids.len();
    let s = config.seq_len;
    let h = config.hidden_size;

    let flat_ids: Vec<usize> = token_ids.iter().flatten().copied().collect();
    let mut x = tape.gather_rows(&params.token_embeddings, &flat_ids)?;
    let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
    let pos = tape.gather_rows(&params.position_embeddings, &pos_idx)?;
    x = tape.add(&x, &pos)?;

    match config.encoder_kind {
        EncoderKind::Transformer => {
            let scale = 1.0 / (h as f64).sqrt();
            for layer in &params.layers {
                // self-attention, one example at a time
                let mut per_example = Vec::with_capacity(b);
                for e in 0..b {
                    let xe = tape.slice_rows(&x, e * s, (e + 1) * s)?;
                    let q = tape.matmul(&xe, &layer.wq)?;
                    let k = tape.matmul(&xe, &layer.wk)?;
                    let v = tape.matmul(&xe, &layer.wv)?;
                    let kt = tape.transpose2d(&k)?;
                    let scores = tape.matmul(&q, &kt)?;
                    let scaled = tape.scale(&scores, scale);
                    // padding keys get a large negative bias before softmax
                    let mut bias = vec![0.0; s * s];
                    for (j, &mj) in mask[e].iter().enumerate() {
                        if mj == 0 {
                            for i in 0..s {
                                bias[i * s + j] = -1e9;
                            }
                        }
                    }
                    let bias_t = Tensor::new(vec![s, s], bias)?;
                    let masked = tape.add(&scaled, &bias_t)?;
                    let attn = tape.softmax_rows(&masked);
                    let ctx = tape.matmul(&attn, &v)?;
                    per_example.push(tape.matmul(&ctx, &layer.wo)?);
                }
                let refs: Vec<&Tensor> = per_example.iter().collect();
                let attn_out = tape.concat_rows(&refs)?;
                x = tape.add(&x, &attn_out)?;
                // position-wise feed-forward with residual
                let h1 = tape.matmul(&x, &layer.ff1_w)?;
                let h1b = tape.add(&h1, &layer.ff1_b)?;
                let a1 = tape.tanh(&h1b);
                let h2 = tape.matmul(&a1, &layer.ff2_w)?;
                let h2b = tape.add(&h2, &layer.ff2_b)?;
                x = tape.add(&x, &h2b)?;
            }
        }
        EncoderKind::Bag => {
            // no attention: per-position tanh affine blocks
            for layer in &params.layers {
                let h1 = tape.matmul(&x, &layer.ff1_w)?;
                let h1b = tape.add(&h1, &layer.ff1_b)?;
                x = tape.tanh(&h1b);
            }
        }
    }

    let cls = match config.pooling_mode {
        PoolingMode::Cls => {
            let cls_rows: Vec<usize> = (0..b).map(|e| e * s).collect();
            tape.gather_rows(&x, &cls_rows)?
        }
        PoolingMode::Mean => {
            // constant pooling matrix: row e holds mask[e]/count over its block
            let mut pool = vec![0.0; b * b * s];
            for (e, m) in mask.iter().enumerate() {
                let count = m.iter().filter(|&&v| v == 1).count().max(1) as f64;
                for (j, &mj) in m.iter().enumerate() {
                    if mj == 1 {
                        pool[e * b * s + e * s + j] = 1.0 / count;
                    }
                }
            }
            let pool_t = Tensor::new(vec![b, b * s], pool)?;
            tape.matmul(&pool_t, &x)?
        }
    };

    let tokens = tape.reshape(&x, vec![b, s, h])?;
    Ok(EncoderOutput {
        cls,
        tokens,
        mask: mask.to_vec(),
    })
}

/// Affine intent head over sentence embeddings; softmax lives in the loss.
pub fn intent_logits(tape: &mut Tape, params: &ModelParams, cls: &Tensor) -> Result<Tensor> {
    let z = tape.matmul(cls, &params.ic_w)?;
    Ok(tape.add(&z, &params.ic_b)?)
}

/// Shared affine entity head applied at every position.
pub fn entity_logits(tape: &mut Tape, params: &ModelParams, tokens: &Tensor) -> Result<Tensor> {
    let shape = tokens.shape().to_vec();
    if shape.len() != 3 {
        return Err(ModelError::BadBatch(format!(
            "entity_logits expects batch x seq_len x H, got {shape:?}"
        )));
    }
    let (b, s, h) = (shape[0], shape[1], shape[2]);
    let e = params.ec_w.shape()[1];
    let flat = tape.reshape(tokens, vec![b * s, h])?;
    let z = tape.matmul(&flat, &params.ec_w)?;
    let zb = tape.add(&z, &params.ec_b)?;
    Ok(tape.reshape(&zb, vec![b, s, e])?)
}

/// Flatten each example's entity-logit matrix row-major and apply the CA
/// head, giving per-class presence logits.
pub fn crossaligner_predict(
    tape: &mut Tape,
    params: &ModelParams,
    ec_logits: &Tensor,
) -> Result<Tensor> {
    let shape = ec_logits.shape().to_vec();
    if shape.len() != 3 {
        return Err(ModelError::BadBatch(format!(
            "crossaligner_predict expects batch x seq_len x E, got {shape:?}"
        )));
    }
    let (b, s, e) = (shape[0], shape[1], shape[2]);
    if s * e != params.ca_w.shape()[0] {
        return Err(ModelError::BadBatch(format!(
            "seq_len*E = {} does not match ca_weights input dim {}",
            s * e,
            params.ca_w.shape()[0]
        )));
    }
    let flat = tape.reshape(ec_logits, vec![b, s * e])?;
    let z = tape.matmul(&flat, &params.ca_w)?;
    Ok(tape.add(&z, &params.ca_b)?)
}

// ---- checkpoints -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: EncoderConfig,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

pub fn save_checkpoint(
    path: &Path,
    config: &EncoderConfig,
    params: &ModelParams,
) -> Result<()> {
    let tensors = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| (name, (t.shape().to_vec(), t.data().to_vec())))
        .collect();
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        tensors,
    };
    std::fs::write(path, serde_json::to_vec(&ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderConfig, ModelParams)> {
    let bytes = std::fs::read(path)?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(ModelError::Version {
            found: ckpt.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut params = init_model(&ckpt.config, 0)?;
    for (name, t) in params.named_tensors_mut() {
        let (shape, data) = ckpt
            .tensors
            .get(&name)
            .ok_or_else(|| ModelError::BadConfig(format!("checkpoint missing tensor {name}")))?;
        *t = Tensor::new(shape.clone(), data.clone())?;
    }
    Ok((ckpt.config, params))
}
