//! The five training losses: standard intent/entity task losses plus the
//! four cross-lingual auxiliary alignment losses.
//!
//! All of them return scalar tensors recorded on the caller's tape, so one
//! `backward` pass propagates any weighted combination back into the encoder.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, ModelError, ModelParams};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("contrastive loss needs at least 2 examples, got {0}")]
    TooFewExamples(usize),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// The four auxiliary alignment losses. Ordering is the stable identity used
/// for logs and weight maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxLoss {
    CrossAligner,
    XeroAlign,
    Contrastive,
    TranslateIntent,
}

impl AuxLoss {
    pub const ALL: [AuxLoss; 4] = [
        AuxLoss::CrossAligner,
        AuxLoss::XeroAlign,
        AuxLoss::Contrastive,
        AuxLoss::TranslateIntent,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AuxLoss::CrossAligner => "crossaligner",
            AuxLoss::XeroAlign => "xeroalign",
            AuxLoss::Contrastive => "contrastive",
            AuxLoss::TranslateIntent => "translate_intent",
        }
    }

    pub fn parse(s: &str) -> Option<AuxLoss> {
        AuxLoss::ALL.iter().copied().find(|a| a.name() == s)
    }
}

impl std::fmt::Display for AuxLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One step's scalar losses: the two task losses plus active auxiliaries.
pub struct LossBundle {
    pub l_ic: Tensor,
    pub l_ec: Tensor,
    pub aux: BTreeMap<AuxLoss, Tensor>,
}

/// Standard task losses: intent cross-entropy over the batch and entity
/// cross-entropy over all non-ignored token positions.
pub fn task_loss(
    tape: &mut Tape,
    ic_logits: &Tensor,
    ec_logits: &Tensor,
    y_ic: &[usize],
    y_ec: &[Vec<usize>],
    ignore_index: usize,
) -> Result<(Tensor, Tensor)> {
    let l_ic = tape.cross_entropy(ic_logits, y_ic, None)?;
    let shape = ec_logits.shape().to_vec();
    let (b, s, e) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(ec_logits, vec![b * s, e])?;
    let targets: Vec<usize> = y_ec.iter().flatten().copied().collect();
    let l_ec = tape.cross_entropy(&flat, &targets, Some(ignore_index))?;
    Ok((l_ic, l_ec))
}

/// CrossAligner: BCE between per-class presence predictions (CA head over
/// flattened entity logits) and the language-agnostic presence labels. The
/// same `y_ca` supervises both languages.
pub fn crossaligner_loss(
    tape: &mut Tape,
    params: &ModelParams,
    ec_logits_eng: &Tensor,
    ec_logits_tar: &Tensor,
    y_ca: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let pred_eng = model::crossaligner_predict(tape, params, ec_logits_eng)?;
    let pred_tar = model::crossaligner_predict(tape, params, ec_logits_tar)?;
    let l_eng = tape.binary_cross_entropy(&pred_eng, y_ca)?;
    let l_tar = tape.binary_cross_entropy(&pred_tar, y_ca)?;
    Ok((l_eng, l_tar))
}

/// In-batch InfoNCE over cosine similarities, English rows as anchors, the
/// diagonal as positives. `temperature` divides the similarities before the
/// softmax; 1.0 leaves them raw.
pub fn contrastive_loss(
    tape: &mut Tape,
    cls_eng: &Tensor,
    cls_tar: &Tensor,
    temperature: f64,
) -> Result<Tensor> {
    let n = cls_eng.shape()[0];
    if n < 2 {
        return Err(LossError::TooFewExamples(n));
    }
    let sim = tape.cosine_similarity_matrix(cls_eng, cls_tar)?;
    let logits = if temperature == 1.0 {
        sim
    } else {
        tape.scale(&sim, 1.0 / temperature)
    };
    let labels: Vec<usize> = (0..n).collect();
    Ok(tape.cross_entropy(&logits, &labels, None)?)
}

/// Supervised intent loss on translated utterances with intent labels copied
/// from English. No entity supervision on the target side.
pub fn translate_intent_loss(
    tape: &mut Tape,
    ic_logits_tar: &Tensor,
    y_ic: &[usize],
) -> Result<Tensor> {
    Ok(tape.cross_entropy(ic_logits_tar, y_ic, None)?)
}

/// MSE between the two sentence-embedding matrices.
pub fn xeroalign_loss(tape: &mut Tape, cls_eng: &Tensor, cls_tar: &Tensor) -> Result<Tensor> {
    Ok(tape.mse(cls_eng, cls_tar)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, EncoderConfig, EncoderKind, PoolingMode};
    use crate::tensor::gradient_check;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn task_loss_uniform_and_saturated() {
        let mut tape = Tape::new();
        let ic = t2(&[vec![0.0; 4]]);
        let ec = Tensor::new(vec![1, 2, 2], vec![0.0; 4]).unwrap();
        let (l_ic, l_ec) =
            task_loss(&mut tape, &ic, &ec, &[1], &[vec![0, 1]], 99).unwrap();
        assert!((l_ic.value() - 4f64.ln()).abs() < 1e-12);
        assert!((l_ec.value() - 2f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let ic = t2(&[vec![50.0, 0.0]]);
        let ec = Tensor::new(vec![1, 2, 2], vec![50.0, 0.0, 0.0, 50.0]).unwrap();
        let (l_ic, l_ec) =
            task_loss(&mut tape, &ic, &ec, &[0], &[vec![0, 1]], 99).unwrap();
        assert!(l_ic.value() < 1e-6);
        assert!(l_ec.value() < 1e-6);
    }

    #[test]
    fn task_loss_hand_value() {
        // 2 real tokens, logits [[1,0],[0,1]], gold [0,1]
        let mut tape = Tape::new();
        let ic = t2(&[vec![0.0, 0.0]]);
        let ec = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (_, l_ec) = task_loss(&mut tape, &ic, &ec, &[0], &[vec![0, 1]], 99).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l_ec.value() - expected).abs() < 1e-12);
        assert!((expected - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn task_loss_ignores_padding_positions() {
        let mut tape = Tape::new();
        let ic = t2(&[vec![0.0, 0.0]]);
        let ec = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 777.0, -777.0]).unwrap();
        // position 1 carries the ignore class, its wild logits contribute nothing
        let (_, l_ec) = task_loss(&mut tape, &ic, &ec, &[0], &[vec![0, 1]], 1).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l_ec.value() - expected).abs() < 1e-12);
    }

    fn ca_fixture() -> (EncoderConfig, ModelParams) {
        let cfg = EncoderConfig {
            vocab_size: 8,
            hidden_size: 4,
            num_layers: 1,
            seq_len: 3,
            num_intents: 2,
            num_entity_classes: 3,
            pooling_mode: PoolingMode::Cls,
            encoder_kind: EncoderKind::Transformer,
        };
        let params = init_model(&cfg, 42).unwrap();
        (cfg, params)
    }

    #[test]
    fn crossaligner_identical_inputs_give_identical_losses() {
        let (cfg, params) = ca_fixture();
        let mut tape = Tape::new();
        let e = cfg.num_entity_classes;
        let logits = Tensor::new(
            vec![2, cfg.seq_len, e],
            (0..2 * cfg.seq_len * e).map(|v| v as f64 * 0.1).collect(),
        )
        .unwrap();
        let y = Tensor::new(vec![2, e], vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        let (l_eng, l_tar) =
            crossaligner_loss(&mut tape, &params, &logits, &logits, &y).unwrap();
        assert_eq!(l_eng.value(), l_tar.value());
    }

    #[test]
    fn crossaligner_zero_logits_zero_head_gives_ln2() {
        let (cfg, mut params) = ca_fixture();
        // zero CA weights so presence logits are exactly zero
        for v in params.ca_w.data_mut() {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let e = cfg.num_entity_classes;
        let logits = Tensor::zeros(vec![1, cfg.seq_len, e]);
        let y = Tensor::new(vec![1, e], vec![1.0, 0.0, 1.0]).unwrap();
        let (l_eng, _) = crossaligner_loss(&mut tape, &params, &logits, &logits, &y).unwrap();
        assert!((l_eng.value() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn crossaligner_gradcheck() {
        let (cfg, params) = ca_fixture();
        let e = cfg.num_entity_classes;
        let x = Tensor::new(
            vec![2, cfg.seq_len, e],
            vec![0.3, -0.5, 0.2, 1.0, 0.0, -1.1, 0.7, 0.4, -0.2, 0.1, -0.6, 0.9, 0.0, 0.5, -0.3, 0.8, -0.9, 0.2],
        )
        .unwrap();
        let y = Tensor::new(vec![2, e], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let report = gradient_check(
            |tape, x| {
                let (l_eng, l_tar) = crossaligner_loss(tape, &params, x, x, &y)
                    .map_err(|e| match e {
                        LossError::Tensor(t) => t,
                        other => panic!("{other}"),
                    })?;
                Ok(tape.add(&l_eng, &l_tar)?)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max_rel_err = {}", report.max_rel_err);
    }

    #[test]
    fn contrastive_identical_embeddings_is_ln_n() {
        let mut tape = Tape::new();
        let row = vec![0.3, -0.7, 0.5];
        let cls = t2(&[row.clone(), row.clone(), row.clone()]);
        let l = contrastive_loss(&mut tape, &cls, &cls, 1.0).unwrap();
        assert!((l.value() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_orthogonal_pair_hand_value() {
        // sim matrix is the 2x2 identity
        let mut tape = Tape::new();
        let a = t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = contrastive_loss(&mut tape, &a, &a, 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l.value() - expected).abs() < 1e-12);
    }

    #[test]
    fn contrastive_scale_invariance_of_target() {
        let mut tape = Tape::new();
        let a = t2(&[vec![1.0, 0.2], vec![-0.4, 1.0]]);
        let b = t2(&[vec![0.9, 0.1], vec![-0.5, 1.1]]);
        let b5_rows: Vec<Vec<f64>> = b
            .data()
            .chunks(2)
            .map(|r| r.iter().map(|v| v * 5.0).collect())
            .collect();
        let b5 = t2(&b5_rows);
        let l1 = contrastive_loss(&mut tape, &a, &b, 1.0).unwrap();
        let l2 = contrastive_loss(&mut tape, &a, &b5, 1.0).unwrap();
        assert!((l1.value() - l2.value()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_needs_two_examples() {
        let mut tape = Tape::new();
        let a = t2(&[vec![1.0, 0.0]]);
        assert!(matches!(
            contrastive_loss(&mut tape, &a, &a, 1.0),
            Err(LossError::TooFewExamples(1))
        ));
    }

    #[test]
    fn contrastive_diagonal_dominance_below_ln_n() {
        let mut tape = Tape::new();
        let a = t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = t2(&[vec![0.9, 0.1], vec![0.1, 0.9]]);
        let l = contrastive_loss(&mut tape, &a, &b, 1.0).unwrap();
        assert!(l.value() < 2f64.ln());
    }

    #[test]
    fn contrastive_monotone_in_diagonal_similarity() {
        let mut tape = Tape::new();
        let a = t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let weak = t2(&[vec![0.6, 0.8], vec![0.8, 0.6]]);
        let strong = t2(&[vec![0.9, 0.435890], vec![0.435890, 0.9]]);
        let l_weak = contrastive_loss(&mut tape, &a, &weak, 1.0).unwrap();
        let l_strong = contrastive_loss(&mut tape, &a, &strong, 1.0).unwrap();
        assert!(l_strong.value() < l_weak.value());
    }

    #[test]
    fn translate_intent_matches_plain_ce() {
        let mut tape = Tape::new();
        let logits = t2(&[vec![0.0; 5]]);
        let l = translate_intent_loss(&mut tape, &logits, &[3]).unwrap();
        assert!((l.value() - 5f64.ln()).abs() < 1e-12);
        let sat = t2(&[vec![50.0, 0.0]]);
        let l = translate_intent_loss(&mut tape, &sat, &[0]).unwrap();
        assert!(l.value() < 1e-6);
    }

    #[test]
    fn xeroalign_values_and_symmetry() {
        let mut tape = Tape::new();
        let a = t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(xeroalign_loss(&mut tape, &a, &a).unwrap().value(), 0.0);
        let c = 0.5;
        let b_rows: Vec<Vec<f64>> = a
            .data()
            .chunks(2)
            .map(|r| r.iter().map(|v| v + c).collect())
            .collect();
        let b = t2(&b_rows);
        let l = xeroalign_loss(&mut tape, &a, &b).unwrap();
        assert!((l.value() - c * c).abs() < 1e-12);
        let l_ab = xeroalign_loss(&mut tape, &a, &b).unwrap();
        let l_ba = xeroalign_loss(&mut tape, &b, &a).unwrap();
        assert_eq!(l_ab.value(), l_ba.value());
    }

    #[test]
    fn contrastive_gradcheck() {
        let x = t2(&[
            vec![0.5, -0.3, 0.8, 0.1],
            vec![-0.2, 0.9, 0.4, -0.6],
            vec![0.7, 0.2, -0.5, 0.3],
        ]);
        let other = t2(&[
            vec![0.4, -0.1, 0.6, 0.2],
            vec![-0.3, 1.0, 0.3, -0.4],
            vec![0.5, 0.1, -0.7, 0.4],
        ]);
        let report = gradient_check(
            |tape, x| {
                contrastive_loss(tape, x, &other, 1.0).map_err(|e| match e {
                    LossError::Tensor(t) => t,
                    other => panic!("{other}"),
                })
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max_rel_err = {}", report.max_rel_err);
    }
}
