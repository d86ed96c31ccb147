//! The two training losses and their exact gradients.
//!
//! Word prediction is ordinary cross-entropy against the gold token. Sense
//! prediction is weakly supervised: a word only constrains its set A of
//! allowed supersenses, so the loss has two soft parts. The allowed part
//! pushes probability mass into A as a whole, `lse(y) - lse(y restricted to
//! A)`; the regularization part spreads mass inside A, `lse(y) - mean of y
//! over A`. With a single allowed sense the two parts coincide bit for bit,
//! and both reduce to cross-entropy.

use ndarray::{Array1, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::lexicon::{SenseId, SenseMembershipMatrix};
use crate::masker::MaskPlan;
use crate::model::{
    backward_encoder, backward_input_embed, sense_scores, word_scores, ForwardTrace, ModelParams,
};
use crate::scalar::Scalar;
use crate::textpipe::{EncodedSequence, TokenId};

/// How words that fall outside the one-piece vocabulary are supervised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OovMode {
    /// Skip sense supervision for words split into several pieces.
    SixtyKNoOov,
    /// Supervise the arithmetic mean of the pieces' output embeddings.
    AverageEmbedding,
}

impl OovMode {
    pub fn parse(s: &str) -> Result<OovMode> {
        match s {
            "60k" => Ok(OovMode::SixtyKNoOov),
            "avg" => Ok(OovMode::AverageEmbedding),
            _ => Err(Error::Config(format!(
                "unknown oov mode '{}', expected 60k or avg",
                s
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OovMode::SixtyKNoOov => "60k",
            OovMode::AverageEmbedding => "avg",
        }
    }
}

/// Numerically stable log-sum-exp. Over a single value this returns that
/// value exactly.
pub fn log_sum_exp<T: Scalar>(scores: ArrayView1<'_, T>) -> T {
    let mut max = T::neg_infinity();
    for &v in scores.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for &v in scores.iter() {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

fn log_sum_exp_over<T: Scalar>(scores: ArrayView1<'_, T>, idx: &[SenseId]) -> T {
    let mut max = T::neg_infinity();
    for &k in idx {
        let v = scores[k as usize];
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for &k in idx {
        sum += (scores[k as usize] - max).exp();
    }
    max + sum.ln()
}

/// Stable softmax of a score vector.
pub fn softmax<T: Scalar>(scores: ArrayView1<'_, T>) -> Array1<T> {
    let lse = log_sum_exp(scores);
    scores.mapv(|v| (v - lse).exp())
}

fn check_allowed<T: Scalar>(scores: ArrayView1<'_, T>, allowed: &[SenseId]) -> Result<()> {
    if allowed.is_empty() {
        return Err(Error::Contract(
            "sense loss needs a nonempty allowed set".into(),
        ));
    }
    for &k in allowed {
        if k as usize >= scores.len() {
            return Err(Error::Contract(format!(
                "allowed sense {} outside inventory of {}",
                k,
                scores.len()
            )));
        }
    }
    Ok(())
}

/// Word cross-entropy: `lse(y) - y[gold]`.
pub fn lm_loss<T: Scalar>(y_words: ArrayView1<'_, T>, gold: TokenId) -> Result<T> {
    if gold as usize >= y_words.len() {
        return Err(Error::Contract(format!(
            "gold token {} outside vocabulary of {}",
            gold,
            y_words.len()
        )));
    }
    Ok(log_sum_exp(y_words) - y_words[gold as usize])
}

/// Soft cross-entropy against the whole allowed set:
/// `lse(y) - lse(y over A)`.
pub fn slm_allowed_loss<T: Scalar>(y_senses: ArrayView1<'_, T>, allowed: &[SenseId]) -> Result<T> {
    check_allowed(y_senses, allowed)?;
    Ok(log_sum_exp(y_senses) - log_sum_exp_over(y_senses, allowed))
}

/// Uniform-target regularization inside the allowed set:
/// `lse(y) - mean of y over A`.
pub fn slm_reg_loss<T: Scalar>(y_senses: ArrayView1<'_, T>, allowed: &[SenseId]) -> Result<T> {
    check_allowed(y_senses, allowed)?;
    let mut sum = T::zero();
    for &k in allowed {
        sum += y_senses[k as usize];
    }
    let mean = sum / T::from_f64(allowed.len() as f64);
    Ok(log_sum_exp(y_senses) - mean)
}

/// d lm_loss / d y: `softmax(y) - onehot(gold)`.
pub fn lm_grad<T: Scalar>(y_words: ArrayView1<'_, T>, gold: TokenId) -> Array1<T> {
    let mut g = softmax(y_words);
    g[gold as usize] -= T::one();
    g
}

/// d slm_allowed_loss / d y: `p - restricted(p) / p(A)`.
pub fn slm_allowed_grad<T: Scalar>(y_senses: ArrayView1<'_, T>, allowed: &[SenseId]) -> Array1<T> {
    let mut g = softmax(y_senses);
    let lse_a = log_sum_exp_over(y_senses, allowed);
    for &k in allowed {
        g[k as usize] -= (y_senses[k as usize] - lse_a).exp();
    }
    g
}

/// d slm_reg_loss / d y: `p - indicator(A) / |A|`.
pub fn slm_reg_grad<T: Scalar>(y_senses: ArrayView1<'_, T>, allowed: &[SenseId]) -> Array1<T> {
    let mut g = softmax(y_senses);
    let share = T::one() / T::from_f64(allowed.len() as f64);
    for &k in allowed {
        g[k as usize] -= share;
    }
    g
}

/// Whether a target contributes sense loss under the given handling mode.
fn sense_eligible(mode: OovMode, span_len: usize, allowed: &[SenseId]) -> bool {
    !allowed.is_empty() && (span_len == 1 || mode == OovMode::AverageEmbedding)
}

/// Loss breakdown for one selected word.
#[derive(Clone, Debug)]
pub struct TargetLoss {
    pub seq_index: usize,
    pub word_index: usize,
    pub surface: String,
    /// Mean word loss over the span's token positions.
    pub lm: f64,
    pub slm_allowed: Option<f64>,
    pub slm_reg: Option<f64>,
}

/// Aggregated batch losses. `lm` is averaged over all target token
/// positions, the sense parts over all sense-eligible targets, and
/// `total = lm + sense_weight * slm`.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub lm: f64,
    pub slm_allowed: f64,
    pub slm_reg: f64,
    pub slm: f64,
    pub total: f64,
    pub lm_count: usize,
    pub sense_count: usize,
    pub sense_weight: f64,
    pub targets: Vec<TargetLoss>,
}

fn check_batch<T: Scalar>(
    params: &ModelParams<T>,
    traces: &[ForwardTrace<T>],
    plans: &[MaskPlan],
) -> Result<()> {
    if traces.len() != plans.len() {
        return Err(Error::Contract(format!(
            "{} traces for {} plans",
            traces.len(),
            plans.len()
        )));
    }
    for (trace, plan) in traces.iter().zip(plans.iter()) {
        for t in &plan.targets {
            if t.span.end > trace.len() {
                return Err(Error::Contract(format!(
                    "target '{}' spans {}..{} but the trace holds {} positions",
                    t.span.surface,
                    t.span.start,
                    t.span.end,
                    trace.len()
                )));
            }
            for &gold in &t.gold_ids {
                if gold as usize >= params.config.d_w {
                    return Err(Error::Contract(format!(
                        "gold id {} outside vocabulary of {}",
                        gold, params.config.d_w
                    )));
                }
            }
        }
    }
    Ok(())
}

/// The supervised embedding of a target: the single position's output, or
/// the arithmetic mean of the span's outputs in average-embedding mode.
fn span_output<T: Scalar>(trace: &ForwardTrace<T>, start: usize, end: usize) -> Array1<T> {
    if end - start == 1 {
        trace.v_output.row(start).to_owned()
    } else {
        let slice = trace.v_output.slice(ndarray::s![start..end, ..]);
        let inv = T::one() / T::from_f64((end - start) as f64);
        slice.sum_axis(Axis(0)).mapv(|v| v * inv)
    }
}

/// Evaluate both losses over a batch of forward traces and their plans.
pub fn batch_loss<T: Scalar>(
    params: &ModelParams<T>,
    traces: &[ForwardTrace<T>],
    plans: &[MaskPlan],
    mode: OovMode,
    sense_weight: f64,
) -> Result<LossReport> {
    check_batch(params, traces, plans)?;
    let mut lm_sum = 0.0;
    let mut lm_count = 0usize;
    let mut allowed_sum = 0.0;
    let mut reg_sum = 0.0;
    let mut sense_count = 0usize;
    let mut targets = Vec::new();

    for (si, (trace, plan)) in traces.iter().zip(plans.iter()).enumerate() {
        for t in &plan.targets {
            let mut span_lm = 0.0;
            for (i, pos) in t.span.positions().enumerate() {
                let y = word_scores(params, trace.output_at(pos));
                let loss = lm_loss(y.view(), t.gold_ids[i])?.to_f64();
                span_lm += loss;
                lm_sum += loss;
                lm_count += 1;
            }
            let mut row = TargetLoss {
                seq_index: si,
                word_index: t.word_index,
                surface: t.span.surface.clone(),
                lm: span_lm / t.span.len() as f64,
                slm_allowed: None,
                slm_reg: None,
            };
            if sense_eligible(mode, t.span.len(), &t.allowed) {
                let v = span_output(trace, t.span.start, t.span.end);
                let y = sense_scores(params, v.view());
                let a = slm_allowed_loss(y.view(), &t.allowed)?.to_f64();
                let r = slm_reg_loss(y.view(), &t.allowed)?.to_f64();
                allowed_sum += a;
                reg_sum += r;
                sense_count += 1;
                row.slm_allowed = Some(a);
                row.slm_reg = Some(r);
            }
            targets.push(row);
        }
    }

    let lm = if lm_count > 0 { lm_sum / lm_count as f64 } else { 0.0 };
    let slm_allowed = if sense_count > 0 { allowed_sum / sense_count as f64 } else { 0.0 };
    let slm_reg = if sense_count > 0 { reg_sum / sense_count as f64 } else { 0.0 };
    let slm = slm_allowed + slm_reg;
    Ok(LossReport {
        lm,
        slm_allowed,
        slm_reg,
        slm,
        total: lm + sense_weight * slm,
        lm_count,
        sense_count,
        sense_weight,
        targets,
    })
}

/// Exact gradients of the batch loss with respect to every parameter,
/// including both uses of the tied embedding matrices. `seqs` are the masked
/// model inputs the traces were computed from.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    membership: &SenseMembershipMatrix,
    seqs: &[EncodedSequence],
    traces: &[ForwardTrace<T>],
    plans: &[MaskPlan],
    mode: OovMode,
    sense_weight: f64,
) -> Result<ModelParams<T>> {
    check_batch(params, traces, plans)?;
    if seqs.len() != traces.len() {
        return Err(Error::Contract(format!(
            "{} sequences for {} traces",
            seqs.len(),
            traces.len()
        )));
    }

    // Global averaging denominators must match batch_loss.
    let mut lm_count = 0usize;
    let mut sense_count = 0usize;
    for plan in plans {
        for t in &plan.targets {
            lm_count += t.span.len();
            if sense_eligible(mode, t.span.len(), &t.allowed) {
                sense_count += 1;
            }
        }
    }

    let d = params.config.d;
    let d_w = params.config.d_w;
    let d_s = params.config.d_s;
    let lm_scale = if lm_count > 0 {
        T::from_f64(1.0 / lm_count as f64)
    } else {
        T::zero()
    };
    let sense_scale = if sense_count > 0 {
        T::from_f64(sense_weight / sense_count as f64)
    } else {
        T::zero()
    };

    let mut grads = ModelParams::<T>::zeros(&params.config);
    for ((seq, trace), plan) in seqs.iter().zip(traces.iter()).zip(plans.iter()) {
        let n = trace.len();
        if seq.len() != n {
            return Err(Error::Contract(format!(
                "sequence of {} tokens for a trace of {} positions",
                seq.len(),
                n
            )));
        }
        let mut d_vout = ndarray::Array2::<T>::zeros((n, d));

        for t in &plan.targets {
            for (i, pos) in t.span.positions().enumerate() {
                let vout = trace.output_at(pos);
                let y = word_scores(params, vout);
                let dy = lm_grad(y.view(), t.gold_ids[i]).mapv(|v| v * lm_scale);
                // Tied path one: scores feed back into W.
                let gw = grads.word_embed.as_slice_mut().expect("standard layout");
                for r in 0..d {
                    let vr = vout[r];
                    let row = &mut gw[r * d_w..(r + 1) * d_w];
                    for (k, slot) in row.iter_mut().enumerate() {
                        *slot += vr * dy[k];
                    }
                }
                // And into the encoder output.
                let dv = params.word_embed.dot(&dy);
                let mut row = d_vout.row_mut(pos);
                row += &dv;
            }

            if sense_eligible(mode, t.span.len(), &t.allowed) {
                let v = span_output(trace, t.span.start, t.span.end);
                let y = sense_scores(params, v.view());
                let mut dy = slm_allowed_grad(y.view(), &t.allowed);
                dy += &slm_reg_grad(y.view(), &t.allowed);
                dy.mapv_inplace(|g| g * sense_scale);
                let gs = grads.sense_embed.as_slice_mut().expect("standard layout");
                for r in 0..d {
                    let vr = v[r];
                    let row = &mut gs[r * d_s..(r + 1) * d_s];
                    for (k, slot) in row.iter_mut().enumerate() {
                        *slot += vr * dy[k];
                    }
                }
                let dv = params.sense_embed.dot(&dy);
                let share = T::one() / T::from_f64(t.span.len() as f64);
                for pos in t.span.positions() {
                    let mut row = d_vout.row_mut(pos);
                    ndarray::Zip::from(&mut row).and(&dv).for_each(|slot, &g| {
                        *slot += g * share;
                    });
                }
            }
        }

        let d_vin = backward_encoder(params, trace, &d_vout, &mut grads);
        backward_input_embed(seq, membership, &d_vin, &mut grads);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::SenseMembershipMatrix;
    use crate::masker::{MaskAction, MaskTarget};
    use crate::model::{encode, input_embed, ModelConfig};
    use crate::rng::CounterRng;
    use crate::textpipe::WordSpan;
    use ndarray::arr1;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn lm_loss_hand_values() {
        let y = arr1(&[LN2, 0.0, 0.0]);
        // lse = ln 4, so the gold-0 loss is ln 2.
        let loss = lm_loss(y.view(), 0).unwrap();
        assert!((loss - LN2).abs() < 1e-12);
        // Uniform scores over 1000 words: ln 1000.
        let y = Array1::<f64>::zeros(1000);
        let loss = lm_loss(y.view(), 123).unwrap();
        assert!((loss - 1000f64.ln()).abs() < 1e-12);
        assert!(matches!(
            lm_loss(arr1(&[0.0, 0.0]).view(), 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn slm_losses_hand_values() {
        let y = arr1(&[LN2, 0.0, 0.0]);
        let allowed = [0u16, 1u16];
        // lse = ln 4, lse over A = ln 3: allowed loss is ln(4/3).
        let a = slm_allowed_loss(y.view(), &allowed).unwrap();
        assert!((a - 0.2876820724517809).abs() < 1e-12);
        // reg: ln 4 - (ln 2)/2.
        let r = slm_reg_loss(y.view(), &allowed).unwrap();
        assert!((r - 1.0397207708399179).abs() < 1e-12);
    }

    #[test]
    fn uniform_scores_closed_forms() {
        let y = Array1::<f64>::zeros(45);
        for a_len in [1usize, 2, 5, 45] {
            let allowed: Vec<SenseId> = (0..a_len as u16).collect();
            let a = slm_allowed_loss(y.view(), &allowed).unwrap();
            let r = slm_reg_loss(y.view(), &allowed).unwrap();
            assert!(
                (a - (45.0f64 / a_len as f64).ln()).abs() < 1e-12,
                "allowed for |A| = {}",
                a_len
            );
            assert!((r - 45.0f64.ln()).abs() < 1e-12, "reg for |A| = {}", a_len);
        }
        // A covering the whole inventory: the allowed loss vanishes.
        let all: Vec<SenseId> = (0..45).collect();
        assert!(slm_allowed_loss(y.view(), &all).unwrap().abs() < 1e-12);
    }

    #[test]
    fn singleton_allowed_set_is_bitwise_cross_entropy() {
        let mut rng = CounterRng::new(31);
        for trial in 0..100 {
            let y: Array1<f64> =
                Array1::from_iter((0..45).map(|_| rng.next_f64() * 20.0 - 10.0));
            let k = (trial % 45) as u16;
            let a = slm_allowed_loss(y.view(), &[k]).unwrap();
            let r = slm_reg_loss(y.view(), &[k]).unwrap();
            assert_eq!(a.to_bits(), r.to_bits(), "trial {}", trial);
            // Both equal plain cross-entropy against sense k.
            let ce = log_sum_exp(y.view()) - y[k as usize];
            assert_eq!(a.to_bits(), ce.to_bits());
        }
    }

    #[test]
    fn empty_allowed_set_is_a_contract_error() {
        let y = Array1::<f64>::zeros(45);
        assert!(matches!(
            slm_allowed_loss(y.view(), &[]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            slm_reg_loss(y.view(), &[]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            slm_allowed_loss(y.view(), &[45]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = CounterRng::new(7);
        let y: Array1<f64> = Array1::from_iter((0..12).map(|_| rng.next_f64() * 6.0 - 3.0));
        let allowed = [1u16, 4, 9];
        let eps = 1e-6;
        let cases: Vec<(Array1<f64>, Box<dyn Fn(ArrayView1<f64>) -> f64>)> = vec![
            (
                lm_grad(y.view(), 4),
                Box::new(|v| lm_loss(v, 4).unwrap()),
            ),
            (
                slm_allowed_grad(y.view(), &allowed),
                Box::new(move |v| slm_allowed_loss(v, &allowed).unwrap()),
            ),
            (
                slm_reg_grad(y.view(), &allowed),
                Box::new(move |v| slm_reg_loss(v, &allowed).unwrap()),
            ),
        ];
        for (grad, f) in cases {
            for k in 0..12 {
                let mut plus = y.clone();
                plus[k] += eps;
                let mut minus = y.clone();
                minus[k] -= eps;
                let num = (f(plus.view()) - f(minus.view())) / (2.0 * eps);
                assert!(
                    (grad[k] - num).abs() < 1e-7,
                    "coordinate {}: {} vs {}",
                    k,
                    grad[k],
                    num
                );
            }
        }
    }

    proptest! {
        /// Jensen bound: reg is never below allowed + ln|A|, with equality
        /// exactly for scores uniform on A.
        #[test]
        fn reg_dominates_allowed_plus_log_a(
            values in proptest::collection::vec(-8.0f64..8.0, 45),
            mask in proptest::collection::vec(proptest::bool::ANY, 45),
        ) {
            let y = Array1::from_vec(values);
            let mut allowed: Vec<SenseId> =
                mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i as u16).collect();
            if allowed.is_empty() {
                allowed.push(0);
            }
            let a = slm_allowed_loss(y.view(), &allowed).unwrap();
            let r = slm_reg_loss(y.view(), &allowed).unwrap();
            let bound = a + (allowed.len() as f64).ln();
            prop_assert!(r >= bound - 1e-12, "reg {} vs bound {}", r, bound);
        }

        /// Equality case of the Jensen bound.
        #[test]
        fn jensen_bound_is_tight_on_uniform_scores(c in -5.0f64..5.0, a_len in 1usize..45) {
            let mut y = Array1::<f64>::zeros(45);
            let allowed: Vec<SenseId> = (0..a_len as u16).collect();
            for &k in &allowed {
                y[k as usize] = c;
            }
            let a = slm_allowed_loss(y.view(), &allowed).unwrap();
            let r = slm_reg_loss(y.view(), &allowed).unwrap();
            prop_assert!((r - a - (a_len as f64).ln()).abs() < 1e-12);
        }

        /// Adding a constant to every score changes nothing.
        #[test]
        fn losses_are_shift_invariant(
            values in proptest::collection::vec(-6.0f64..6.0, 20),
            shift in -30.0f64..30.0,
        ) {
            let y = Array1::from_vec(values);
            let shifted = y.mapv(|v| v + shift);
            let allowed = [2u16, 7, 19];
            prop_assert!((lm_loss(y.view(), 3).unwrap() - lm_loss(shifted.view(), 3).unwrap()).abs() < 1e-9);
            prop_assert!((slm_allowed_loss(y.view(), &allowed).unwrap() - slm_allowed_loss(shifted.view(), &allowed).unwrap()).abs() < 1e-9);
            prop_assert!((slm_reg_loss(y.view(), &allowed).unwrap() - slm_reg_loss(shifted.view(), &allowed).unwrap()).abs() < 1e-9);
        }

        /// Relabeling senses consistently permutes nothing observable.
        #[test]
        fn losses_are_permutation_invariant(
            values in proptest::collection::vec(-6.0f64..6.0, 10),
            rot in 1usize..9,
        ) {
            let y = Array1::from_vec(values.clone());
            let mut rotated = values;
            rotated.rotate_left(rot);
            let yr = Array1::from_vec(rotated);
            let allowed = [0u16, 3, 8];
            let moved: Vec<SenseId> = allowed
                .iter()
                .map(|&k| (((k as usize) + 10 - rot) % 10) as u16)
                .collect();
            prop_assert!((slm_allowed_loss(y.view(), &allowed).unwrap() - slm_allowed_loss(yr.view(), &moved).unwrap()).abs() < 1e-9);
            prop_assert!((slm_reg_loss(y.view(), &allowed).unwrap() - slm_reg_loss(yr.view(), &moved).unwrap()).abs() < 1e-9);
        }
    }

    // --- batch-level fixtures -------------------------------------------

    fn manual_target(
        word_index: usize,
        start: usize,
        end: usize,
        gold: &[TokenId],
        allowed: &[SenseId],
    ) -> MaskTarget {
        MaskTarget {
            word_index,
            span: WordSpan {
                start,
                end,
                surface: format!("w{}", word_index),
            },
            action: MaskAction::Mask,
            gold_ids: gold.to_vec(),
            allowed: allowed.to_vec(),
        }
    }

    fn toy_batch(
        seed: u64,
    ) -> (
        ModelParams<f64>,
        SenseMembershipMatrix,
        Vec<EncodedSequence>,
        Vec<ForwardTrace<f64>>,
        Vec<MaskPlan>,
    ) {
        let cfg = ModelConfig {
            d: 8,
            layers: 1,
            heads: 2,
            ff_dim: 12,
            n_max: 8,
            d_w: 10,
            d_s: 5,
        };
        let params = ModelParams::<f64>::init(&cfg, seed).unwrap();
        // A few words carry sense columns so the tied input path is live.
        let mut cols = vec![Vec::new(); 10];
        cols[4] = vec![0u16];
        cols[5] = vec![1, 3];
        cols[7] = vec![2, 4];
        let m_cols = SenseMembershipMatrix::from_columns(5, cols);
        let seq1 = EncodedSequence {
            ids: vec![3, 4, 5, 6],
            spans: (0..4)
                .map(|i| WordSpan {
                    start: i,
                    end: i + 1,
                    surface: format!("w{}", i),
                })
                .collect(),
        };
        // One multi-token span: tokens 7,8 form a single word.
        let seq2 = EncodedSequence {
            ids: vec![3, 7, 8],
            spans: vec![
                WordSpan { start: 0, end: 1, surface: "w0".into() },
                WordSpan { start: 1, end: 3, surface: "w12".into() },
            ],
        };
        let plan1 = MaskPlan {
            targets: vec![
                manual_target(1, 1, 2, &[4], &[0]),
                manual_target(2, 2, 3, &[5], &[1, 3]),
            ],
            single_sense_phase_count: 1,
            budget: 2,
        };
        let plan2 = MaskPlan {
            targets: vec![manual_target(1, 1, 3, &[7, 8], &[2, 4])],
            single_sense_phase_count: 0,
            budget: 1,
        };
        let t1 = encode(&params, input_embed(&params, &m_cols, &seq1).unwrap()).unwrap();
        let t2 = encode(&params, input_embed(&params, &m_cols, &seq2).unwrap()).unwrap();
        (params, m_cols, vec![seq1, seq2], vec![t1, t2], vec![plan1, plan2])
    }

    #[test]
    fn batch_loss_counts_by_mode() {
        let (params, _m, _seqs, traces, plans) = toy_batch(11);
        let sixty = batch_loss(&params, &traces, &plans, OovMode::SixtyKNoOov, 1.0).unwrap();
        // Four token positions; the two-piece word is skipped for senses.
        assert_eq!(sixty.lm_count, 4);
        assert_eq!(sixty.sense_count, 2);
        let avg = batch_loss(&params, &traces, &plans, OovMode::AverageEmbedding, 1.0).unwrap();
        assert_eq!(avg.lm_count, 4);
        assert_eq!(avg.sense_count, 3);
        assert!(avg.slm_allowed > 0.0);
        // The multi-token row carries sense losses only in avg mode.
        assert!(sixty.targets[2].slm_allowed.is_none());
        assert!(avg.targets[2].slm_allowed.is_some());
    }

    #[test]
    fn total_is_lm_plus_weighted_slm() {
        let (params, _m, _seqs, traces, plans) = toy_batch(13);
        for weight in [1.0, 0.5, 0.0] {
            let rep = batch_loss(&params, &traces, &plans, OovMode::SixtyKNoOov, weight).unwrap();
            assert!((rep.slm - rep.slm_allowed - rep.slm_reg).abs() < 1e-12);
            assert!((rep.total - rep.lm - weight * rep.slm).abs() < 1e-12);
            assert!(rep.lm > 0.0);
        }
    }

    #[test]
    fn batch_loss_composes_over_sequences() {
        let (params, _m, _seqs, traces, plans) = toy_batch(17);
        let joint = batch_loss(&params, &traces, &plans, OovMode::AverageEmbedding, 1.0).unwrap();
        let first = batch_loss(&params, &traces[..1], &plans[..1], OovMode::AverageEmbedding, 1.0).unwrap();
        let second = batch_loss(&params, &traces[1..], &plans[1..], OovMode::AverageEmbedding, 1.0).unwrap();
        let lm_join = (first.lm * first.lm_count as f64 + second.lm * second.lm_count as f64)
            / (first.lm_count + second.lm_count) as f64;
        let reg_join = (first.slm_reg * first.sense_count as f64
            + second.slm_reg * second.sense_count as f64)
            / (first.sense_count + second.sense_count) as f64;
        assert!((joint.lm - lm_join).abs() < 1e-12);
        assert!((joint.slm_reg - reg_join).abs() < 1e-12);
    }

    #[test]
    fn mismatched_batch_is_a_contract_error() {
        let (params, _m, seqs, traces, plans) = toy_batch(19);
        assert!(matches!(
            batch_loss(&params, &traces, &plans[..1], OovMode::SixtyKNoOov, 1.0),
            Err(Error::Contract(_))
        ));
        // A plan pointing past the trace is caught.
        let mut bad = plans.clone();
        bad[0].targets[0].span.start = 7;
        bad[0].targets[0].span.end = 8;
        assert!(matches!(
            batch_loss(&params, &traces, &bad, OovMode::SixtyKNoOov, 1.0),
            Err(Error::Contract(_))
        ));
        let m = SenseMembershipMatrix::empty(5, 10);
        assert!(matches!(
            backward(&params, &m, &seqs[..1], &traces, &plans, OovMode::SixtyKNoOov, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn empty_plans_yield_zero_loss_and_zero_grads() {
        let (params, m, seqs, traces, _plans) = toy_batch(23);
        let empty = vec![MaskPlan::default(), MaskPlan::default()];
        let rep = batch_loss(&params, &traces, &empty, OovMode::SixtyKNoOov, 1.0).unwrap();
        assert_eq!(rep.total, 0.0);
        assert_eq!(rep.lm_count, 0);
        let grads =
            backward(&params, &m, &seqs, &traces, &empty, OovMode::SixtyKNoOov, 1.0).unwrap();
        for t in grads.tensors() {
            assert!(t.data.iter().all(|&v| v == 0.0), "tensor {}", t.name);
        }
    }

    #[test]
    fn unread_position_columns_get_zero_gradient() {
        // Positions past the longest sequence are never read, so their
        // columns in the position table stay at exactly zero gradient.
        let (params, m, seqs, traces, plans) = toy_batch(29);
        let grads =
            backward(&params, &m, &seqs, &traces, &plans, OovMode::AverageEmbedding, 1.0).unwrap();
        let n_max = params.config.n_max;
        for j in 4..n_max {
            // Longest sequence has 4 positions.
            assert!(
                grads.pos_embed.column(j).iter().all(|&v| v == 0.0),
                "position {} was never read",
                j
            );
        }
        // Read positions do receive gradient.
        assert!(grads.pos_embed.column(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn sense_matrix_gets_zero_gradient_when_fully_disconnected() {
        // No membership entries and no sense-eligible targets: S feeds
        // neither the input sums nor any scored head, so its gradient is
        // exactly zero through both tied paths.
        let (params, _m, seqs, _traces, plans) = toy_batch(29);
        let m0 = SenseMembershipMatrix::empty(5, 10);
        let traces: Vec<ForwardTrace<f64>> = seqs
            .iter()
            .map(|s| encode(&params, input_embed(&params, &m0, s).unwrap()).unwrap())
            .collect();
        let no_sense_plans: Vec<MaskPlan> = plans
            .iter()
            .map(|p| {
                let mut p = p.clone();
                for t in &mut p.targets {
                    t.allowed.clear();
                }
                p
            })
            .collect();
        let grads = backward(
            &params, &m0, &seqs, &traces, &no_sense_plans, OovMode::AverageEmbedding, 1.0,
        )
        .unwrap();
        assert!(
            grads.sense_embed.iter().all(|&v| v == 0.0),
            "S must be untouched without sense targets or membership entries"
        );
        // The word matrix still trains: LM targets remain.
        assert!(grads.word_embed.iter().any(|&v| v != 0.0));
    }
}
