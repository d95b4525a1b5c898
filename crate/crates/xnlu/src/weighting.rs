//! Auxiliary-loss weighting: plain 1+1 summation or adaptive weights from
//! the coefficient of variation of each loss's ratio history.
//!
//! Per auxiliary `a` at step `t`, the loss ratio is the current raw loss over
//! the running mean of raw losses up to step `t-1`; the weight is the
//! population standard deviation of the ratio history (including step `t`)
//! divided by its mean. No normalization is applied across auxiliaries, and
//! the task losses are never reweighted.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum WeightingError {
    #[error("missing weight for active auxiliary {0:?}")]
    MissingWeight(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, WeightingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    OnePlusOne,
    Cov,
}

/// Streaming mean/population-variance accumulator.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn mean(&self) -> f64 {
        self.mean
    }

    fn population_std(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2 / self.n as f64).max(0.0).sqrt()
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct AuxHistory {
    /// optimizer steps seen for this auxiliary
    t: u64,
    /// running mean of raw losses over steps 1..=t
    raw_mean: f64,
    /// ratio history statistics
    ratios: Welford,
    last_weight: f64,
}

/// The computed weight for one auxiliary at one step, with the quantities
/// that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovWeight {
    pub raw_loss: f64,
    pub ratio: f64,
    pub weight: f64,
    /// all ratios so far are zero; the sigma/mu quotient is undefined and the
    /// weight is pinned to zero
    pub degenerate: bool,
}

/// Per-auxiliary running history driving the adaptive weights. Owned by one
/// training loop.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CoVState {
    by_aux: BTreeMap<String, AuxHistory>,
}

/// At step 1 the previous raw-loss mean does not exist; the ratio is pinned
/// here and the single-element history gives weight 0, so auxiliaries start
/// contributing from step 2.
pub const BOOTSTRAP_RATIO: f64 = 1.0;

impl CoVState {
    pub fn new() -> Self {
        CoVState::default()
    }

    /// Advance every auxiliary by one optimizer step and return its weight.
    /// Must be called once per step, in step order.
    pub fn cov_update(&mut self, raw_losses: &BTreeMap<String, f64>) -> BTreeMap<String, CovWeight> {
        let mut out = BTreeMap::new();
        for (name, &raw) in raw_losses {
            let h = self.by_aux.entry(name.clone()).or_default();
            let ratio = if h.t == 0 {
                BOOTSTRAP_RATIO
            } else if h.raw_mean.abs() < f64::EPSILON {
                // raw losses so far were all zero; a zero current loss keeps
                // the ratio at zero, anything else is unbounded growth
                if raw == 0.0 {
                    0.0
                } else {
                    BOOTSTRAP_RATIO
                }
            } else {
                raw / h.raw_mean
            };
            h.ratios.push(ratio);
            let mu = h.ratios.mean();
            let (weight, degenerate) = if mu.abs() < f64::EPSILON {
                (0.0, true)
            } else {
                (h.ratios.population_std() / mu, false)
            };
            // fold the current raw loss into the mean only after the weight
            // is computed, preserving the t-1 denominator
            h.t += 1;
            h.raw_mean += (raw - h.raw_mean) / h.t as f64;
            h.last_weight = weight;
            out.insert(
                name.clone(),
                CovWeight {
                    raw_loss: raw,
                    ratio,
                    weight,
                    degenerate,
                },
            );
        }
        out
    }
}

/// Total loss on the tape: `l_ic + l_ec + sum_a w_a * l_a`, with unit weights
/// under 1+1. Task losses are never reweighted.
pub fn combine_total(
    tape: &mut Tape,
    l_ic: &Tensor,
    l_ec: &Tensor,
    aux: &BTreeMap<String, Tensor>,
    mode: WeightingMode,
    weights: &BTreeMap<String, f64>,
) -> Result<Tensor> {
    let mut total = tape.add(l_ic, l_ec)?;
    for (name, loss) in aux {
        let term = match mode {
            WeightingMode::OnePlusOne => loss.clone(),
            WeightingMode::Cov => {
                let w = *weights
                    .get(name)
                    .ok_or_else(|| WeightingError::MissingWeight(name.clone()))?;
                tape.scale(loss, w)
            }
        };
        total = tape.add(&total, &term)?;
    }
    Ok(total)
}

/// Plain-f64 recomputation of `combine_total`, for log verification.
pub fn combine_total_value(
    l_ic: f64,
    l_ec: f64,
    aux: &BTreeMap<String, f64>,
    mode: WeightingMode,
    weights: &BTreeMap<String, f64>,
) -> Result<f64> {
    let mut total = l_ic + l_ec;
    for (name, &loss) in aux {
        let w = match mode {
            WeightingMode::OnePlusOne => 1.0,
            WeightingMode::Cov => *weights
                .get(name)
                .ok_or_else(|| WeightingError::MissingWeight(name.clone()))?,
        };
        total += w * loss;
    }
    Ok(total)
}

/// One line of the per-step weight trajectory log (JSON-lines).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightLogEntry {
    pub step: u64,
    pub name: String,
    pub raw_loss: f64,
    pub ratio: f64,
    pub weight: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(state: &mut CoVState, name: &str, loss: f64) -> CovWeight {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), loss);
        state.cov_update(&m).remove(name).unwrap()
    }

    #[test]
    fn constant_sequence_gives_zero_weights() {
        let mut state = CoVState::new();
        for _ in 0..3 {
            let w = step(&mut state, "x", 2.0);
            assert_eq!(w.weight, 0.0);
        }
    }

    #[test]
    fn first_step_weight_is_zero() {
        let mut state = CoVState::new();
        let w = step(&mut state, "x", 17.3);
        assert_eq!(w.weight, 0.0);
        assert_eq!(w.ratio, BOOTSTRAP_RATIO);
    }

    #[test]
    fn two_step_sequence_hand_value() {
        // losses [1.0, 2.0]: ratios {1, 2}, population sigma 0.5, mean 1.5
        let mut state = CoVState::new();
        step(&mut state, "x", 1.0);
        let w = step(&mut state, "x", 2.0);
        assert!((w.ratio - 2.0).abs() < 1e-15);
        assert!((w.weight - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn all_zero_losses_flag_degenerate() {
        let mut state = CoVState::new();
        let mut m = BTreeMap::new();
        m.insert("x".to_string(), 0.0);
        // step 1 ratio is the bootstrap 1.0, so run from step 2
        state.cov_update(&m);
        // overwrite history with a fresh aux that only ever sees zeros
        let mut state = CoVState::new();
        let mut m = BTreeMap::new();
        m.insert("z".to_string(), 0.0);
        state.cov_update(&m);
        let w = state.cov_update(&m).remove("z").unwrap();
        // ratios are {1.0 (bootstrap), 0.0}; not degenerate yet
        assert!(!w.degenerate);
        assert_eq!(w.ratio, 0.0);
    }

    #[test]
    fn weights_invariant_to_aux_name() {
        let seq = [3.0, 1.0, 4.0, 1.5, 9.2, 6.0];
        let mut a = CoVState::new();
        let mut b = CoVState::new();
        for &v in &seq {
            let wa = step(&mut a, "alpha", v);
            let wb = step(&mut b, "omega", v);
            assert_eq!(wa.weight, wb.weight);
        }
    }

    #[test]
    fn weights_invariant_to_loss_scale() {
        let seq = [3.0, 1.0, 4.0, 1.5, 9.2, 6.0];
        let mut a = CoVState::new();
        let mut b = CoVState::new();
        for &v in &seq {
            let wa = step(&mut a, "x", v);
            let wb = step(&mut b, "x", 7.5 * v);
            assert!((wa.weight - wb.weight).abs() < 1e-12);
            assert!((wa.ratio - wb.ratio).abs() < 1e-12);
        }
    }

    #[test]
    fn combine_total_no_aux() {
        let mut tape = Tape::new();
        let l_ic = Tensor::scalar(1.0);
        let l_ec = Tensor::scalar(2.0);
        let total = combine_total(
            &mut tape,
            &l_ic,
            &l_ec,
            &BTreeMap::new(),
            WeightingMode::OnePlusOne,
            &BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(total.value(), 3.0);
    }

    #[test]
    fn combine_total_one_plus_one() {
        let mut tape = Tape::new();
        let mut aux = BTreeMap::new();
        aux.insert("x".to_string(), Tensor::scalar(0.5));
        aux.insert("y".to_string(), Tensor::scalar(0.25));
        let total = combine_total(
            &mut tape,
            &Tensor::scalar(1.0),
            &Tensor::scalar(2.0),
            &aux,
            WeightingMode::OnePlusOne,
            &BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(total.value(), 3.75);
    }

    #[test]
    fn combine_total_cov_weighted() {
        let mut tape = Tape::new();
        let mut aux = BTreeMap::new();
        aux.insert("x".to_string(), Tensor::scalar(0.5));
        let mut weights = BTreeMap::new();
        weights.insert("x".to_string(), 1.0 / 3.0);
        let total = combine_total(
            &mut tape,
            &Tensor::scalar(1.0),
            &Tensor::scalar(2.0),
            &aux,
            WeightingMode::Cov,
            &weights,
        )
        .unwrap();
        assert!((total.value() - (3.0 + 1.0 / 6.0)).abs() < 1e-12);
    }

    #[test]
    fn combine_total_missing_weight_errors() {
        let mut tape = Tape::new();
        let mut aux = BTreeMap::new();
        aux.insert("x".to_string(), Tensor::scalar(0.5));
        assert!(matches!(
            combine_total(
                &mut tape,
                &Tensor::scalar(1.0),
                &Tensor::scalar(2.0),
                &aux,
                WeightingMode::Cov,
                &BTreeMap::new(),
            ),
            Err(WeightingError::MissingWeight(_))
        ));
    }

    #[test]
    fn combine_total_is_linear_in_each_aux() {
        let weights: BTreeMap<String, f64> = [("x".to_string(), 0.4)].into();
        let at = |v: f64| {
            let aux: BTreeMap<String, f64> = [("x".to_string(), v)].into();
            combine_total_value(1.0, 2.0, &aux, WeightingMode::Cov, &weights).unwrap()
        };
        let f0 = at(0.0);
        let f1 = at(1.0);
        let f2 = at(2.0);
        assert!((f2 - f1 - (f1 - f0)).abs() < 1e-12);
    }

    #[test]
    fn welford_matches_batch_recompute() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut w = Welford::default();
        let mut xs = Vec::new();
        for _ in 0..1000 {
            let x: f64 = rng.gen_range(0.0..10.0);
            xs.push(x);
            w.push(x);
        }
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        assert!((w.mean() - mean).abs() < 1e-10);
        assert!((w.population_std() - var.sqrt()).abs() < 1e-10);
    }
}
