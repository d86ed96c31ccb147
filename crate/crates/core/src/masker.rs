//! Word-level masking plans.
//!
//! Selection works on whole words, never on loose token positions. A fixed
//! fraction of the words is targeted (round half up, at least one). Half of
//! the single-supersensed words are taken first — capped at 40% of the
//! budget so easy sense wins cannot crowd out everything else — and the rest
//! of the budget is filled uniformly at random. Each selected word is then
//! replaced by `[MASK]` with probability 0.9 or kept verbatim with
//! probability 0.1; there is no random-word replacement.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::lexicon::{Lexicon, SenseId};
use crate::rng::CounterRng;
use crate::textpipe::{EncodedSequence, TokenId, WordSpan, MASK_ID};

/// Substream tag so masking draws never collide with other uses of a seed.
const MASK_STREAM: u64 = 0x6d61_736b;

/// Knobs of the masking policy. The defaults are the trained configuration.
#[derive(Clone, Copy, Debug)]
pub struct MaskPolicy {
    /// Fraction of words targeted per sequence.
    pub mask_rate: f64,
    /// Fraction of the single-supersensed words taken in the first phase.
    pub single_sense_take: f64,
    /// First-phase ceiling as a fraction of the budget.
    pub single_sense_cap: f64,
    /// Probability that a selected word is kept verbatim instead of masked.
    pub keep_prob: f64,
    /// Record sense supervision for multi-token words too.
    pub whole_word: bool,
}

impl Default for MaskPolicy {
    fn default() -> MaskPolicy {
        MaskPolicy {
            mask_rate: 0.15,
            single_sense_take: 0.5,
            single_sense_cap: 0.4,
            keep_prob: 0.1,
            whole_word: false,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mask_rate", self.mask_rate),
            ("single_sense_take", self.single_sense_take),
            ("single_sense_cap", self.single_sense_cap),
            ("keep_prob", self.keep_prob),
        ] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{} must lie in [0, 1], got {}",
                    name, v
                )));
            }
        }
        Ok(())
    }
}

/// What happens to a selected word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    /// All token positions of the word are replaced by `[MASK]`.
    Mask,
    /// The word stays verbatim but is still predicted.
    Keep,
}

/// One selected word with everything the losses need later.
#[derive(Clone, Debug)]
pub struct MaskTarget {
    /// Index into the sequence's word list.
    pub word_index: usize,
    pub span: WordSpan,
    pub action: MaskAction,
    /// Original token ids under the span, the prediction targets.
    pub gold_ids: Vec<TokenId>,
    /// Allowed supersenses recorded at plan time; empty when the word has
    /// none or when a multi-token word is hit without whole-word handling.
    pub allowed: Vec<SenseId>,
}

/// Deterministic product of `plan_masking`.
#[derive(Clone, Debug, Default)]
pub struct MaskPlan {
    /// Targets in word order.
    pub targets: Vec<MaskTarget>,
    /// Words selected by the single-supersense phase.
    pub single_sense_phase_count: usize,
    /// The computed budget for this sequence.
    pub budget: usize,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Plan which words of `seq` are targeted and how. Pure function of
/// `(seq, lexicon, policy, seed)`.
pub fn plan_masking(
    seq: &EncodedSequence,
    lexicon: &Lexicon,
    policy: &MaskPolicy,
    seed: u64,
) -> Result<MaskPlan> {
    policy.validate()?;

    // Words containing special tokens (in practice: [UNK] fallbacks) are
    // never prediction targets.
    let candidates: Vec<usize> = (0..seq.spans.len())
        .filter(|&w| {
            seq.spans[w]
                .positions()
                .all(|p| seq.ids[p] > MASK_ID)
        })
        .collect();
    if candidates.is_empty() {
        return Ok(MaskPlan::default());
    }

    let n = candidates.len();
    let budget = round_half_up(policy.mask_rate * n as f64).clamp(1, n);

    let singles: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&w| lexicon.allowed_senses(&seq.spans[w].surface).len() == 1)
        .collect();
    let cap = (policy.single_sense_cap * budget as f64).ceil() as usize;
    let take = round_half_up(policy.single_sense_take * singles.len() as f64)
        .min(cap)
        .min(budget);

    let mut rng = CounterRng::derive(seed, &[MASK_STREAM]);
    let mut selected = BTreeSet::new();
    for i in rng.sample_indices(singles.len(), take) {
        selected.insert(singles[i]);
    }
    let pool: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|w| !selected.contains(w))
        .collect();
    let fill = budget - selected.len();
    for i in rng.sample_indices(pool.len(), fill) {
        selected.insert(pool[i]);
    }

    let mut targets = Vec::with_capacity(selected.len());
    for &w in &selected {
        let span = seq.spans[w].clone();
        let action = if rng.chance(policy.keep_prob) {
            MaskAction::Keep
        } else {
            MaskAction::Mask
        };
        let allowed: Vec<SenseId> = if span.len() == 1 || policy.whole_word {
            lexicon
                .allowed_senses(&span.surface)
                .into_iter()
                .collect()
        } else {
            Vec::new()
        };
        let gold_ids = seq.ids[span.positions()].to_vec();
        targets.push(MaskTarget {
            word_index: w,
            span,
            action,
            gold_ids,
            allowed,
        });
    }

    Ok(MaskPlan {
        targets,
        single_sense_phase_count: take,
        budget,
    })
}

/// Apply a plan to the sequence it was made for, producing the model input.
/// The plan must still match the sequence; stale plans are rejected.
pub fn apply_plan(seq: &EncodedSequence, plan: &MaskPlan) -> Result<EncodedSequence> {
    let mut out = seq.clone();
    for target in &plan.targets {
        if target.span.end > seq.ids.len() {
            return Err(Error::Plan(format!(
                "target span {}..{} outside sequence of {} tokens",
                target.span.start,
                target.span.end,
                seq.ids.len()
            )));
        }
        if seq.ids[target.span.positions()] != target.gold_ids[..] {
            return Err(Error::Plan(format!(
                "gold ids for '{}' no longer match the sequence",
                target.span.surface
            )));
        }
        if target.action == MaskAction::Mask {
            for p in target.span.positions() {
                out.ids[p] = MASK_ID;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{LemmaRules, Lexicon, SupersenseInventory};
    use crate::textpipe::{tokenize, Vocab, UNK_ID};
    use std::path::PathBuf;

    fn origin() -> PathBuf {
        PathBuf::from("<test>")
    }

    /// 100 distinct single-token words, the first 20 single-supersensed.
    fn arithmetic_fixture() -> (Vocab, Lexicon, EncodedSequence) {
        let words: Vec<String> = (0..100).map(|i| format!("word{:03}", i)).collect();
        let mut tokens = vec!["[PAD]".into(), "[UNK]".into(), "[MASK]".into()];
        tokens.extend(words.iter().cloned());
        let vocab = Vocab::from_tokens(tokens, &origin()).unwrap();

        let inv = SupersenseInventory::parse("noun.food\tnoun\nnoun.animal\tnoun\n", &origin())
            .unwrap();
        let mut lex_text = String::new();
        for word in words.iter().take(20) {
            lex_text.push_str(&format!("{}\tnoun.food\n", word));
        }
        // A couple of two-sense words; they must not count as singles.
        lex_text.push_str("word020\tnoun.food,noun.animal\n");
        lex_text.push_str("word021\tnoun.food,noun.animal\n");
        let lexicon =
            Lexicon::parse_strings(&lex_text, &origin(), "", &inv, LemmaRules::default()).unwrap();

        let seq = tokenize(&vocab, &words.join(" "));
        assert_eq!(seq.n_words(), 100);
        (vocab, lexicon, seq)
    }

    #[test]
    fn budget_and_phase_arithmetic() {
        let (_, lexicon, seq) = arithmetic_fixture();
        let plan = plan_masking(&seq, &lexicon, &MaskPolicy::default(), 7).unwrap();
        // 15% of 100 words, half of 20 singles capped at ceil(0.4 * 15).
        assert_eq!(plan.budget, 15);
        assert_eq!(plan.single_sense_phase_count, 6);
        assert_eq!(plan.targets.len(), 15);
        let singles_hit = plan
            .targets
            .iter()
            .filter(|t| lexicon.allowed_senses(&t.span.surface).len() == 1)
            .count();
        assert!(singles_hit >= 6, "the phase picks guarantee six singles");
    }

    #[test]
    fn plans_are_reproducible_and_seed_sensitive() {
        let (_, lexicon, seq) = arithmetic_fixture();
        let policy = MaskPolicy::default();
        let a = plan_masking(&seq, &lexicon, &policy, 42).unwrap();
        let b = plan_masking(&seq, &lexicon, &policy, 42).unwrap();
        let words =
            |p: &MaskPlan| p.targets.iter().map(|t| t.word_index).collect::<Vec<_>>();
        let actions =
            |p: &MaskPlan| p.targets.iter().map(|t| t.action).collect::<Vec<_>>();
        assert_eq!(words(&a), words(&b));
        assert_eq!(actions(&a), actions(&b));
        let c = plan_masking(&seq, &lexicon, &policy, 43).unwrap();
        assert!(
            words(&a) != words(&c) || actions(&a) != actions(&c),
            "different seeds should not reproduce the same plan here"
        );
    }

    #[test]
    fn min_budget_is_one_word() {
        let (_, lexicon, mut seq) = arithmetic_fixture();
        seq.truncate_to(2);
        assert_eq!(seq.n_words(), 2);
        let plan = plan_masking(&seq, &lexicon, &MaskPolicy::default(), 1).unwrap();
        assert_eq!(plan.budget, 1);
        assert_eq!(plan.targets.len(), 1);
    }

    #[test]
    fn unk_words_are_never_targets() {
        let toks = ["[PAD]", "[UNK]", "[MASK]", "known"];
        let vocab =
            Vocab::from_tokens(toks.iter().map(|s| s.to_string()).collect(), &origin()).unwrap();
        let inv = SupersenseInventory::parse("", &origin()).unwrap();
        let lexicon =
            Lexicon::parse_strings("", &origin(), "", &inv, LemmaRules::default()).unwrap();
        let seq = tokenize(&vocab, "mystery known mystery");
        assert_eq!(seq.ids[0], UNK_ID);
        let policy = MaskPolicy { mask_rate: 1.0, ..MaskPolicy::default() };
        for seed in 0..20 {
            let plan = plan_masking(&seq, &lexicon, &policy, seed).unwrap();
            assert_eq!(plan.targets.len(), 1);
            assert_eq!(plan.targets[0].span.surface, "known");
        }
        // A sequence of only [UNK] words yields an empty plan.
        let all_unk = tokenize(&vocab, "mystery enigma");
        let plan = plan_masking(&all_unk, &lexicon, &policy, 0).unwrap();
        assert!(plan.targets.is_empty());
        assert_eq!(plan.budget, 0);
    }

    #[test]
    fn keep_rate_is_roughly_ten_percent() {
        let (_, lexicon, seq) = arithmetic_fixture();
        let policy = MaskPolicy::default();
        let mut kept = 0usize;
        let mut total = 0usize;
        for seed in 0..400 {
            let plan = plan_masking(&seq, &lexicon, &policy, seed).unwrap();
            kept += plan
                .targets
                .iter()
                .filter(|t| t.action == MaskAction::Keep)
                .count();
            total += plan.targets.len();
        }
        let rate = kept as f64 / total as f64;
        assert!(
            (rate - 0.1).abs() < 0.03,
            "keep rate {} strays too far from 0.1",
            rate
        );
    }

    #[test]
    fn full_rate_selects_every_candidate() {
        let (_, lexicon, seq) = arithmetic_fixture();
        let policy = MaskPolicy { mask_rate: 1.0, ..MaskPolicy::default() };
        let plan = plan_masking(&seq, &lexicon, &policy, 3).unwrap();
        assert_eq!(plan.targets.len(), 100);
        // The cap still limits the first phase.
        assert_eq!(plan.single_sense_phase_count, 10);
    }

    #[test]
    fn multi_token_spans_follow_whole_word_switch() {
        let toks = ["[PAD]", "[UNK]", "[MASK]", "sword", "##fish", "##es"];
        let vocab =
            Vocab::from_tokens(toks.iter().map(|s| s.to_string()).collect(), &origin()).unwrap();
        let inv = SupersenseInventory::parse("noun.food\tnoun\nnoun.animal\tnoun\n", &origin())
            .unwrap();
        let lexicon = Lexicon::parse_strings(
            "swordfishes\tnoun.food,noun.animal\n",
            &origin(),
            "",
            &inv,
            LemmaRules::default(),
        )
        .unwrap();
        // "swordfishes" segments into three pieces but is one word span.
        let seq = tokenize(&vocab, "swordfishes");
        assert_eq!(seq.spans[0].len(), 3);

        let narrow = MaskPolicy { mask_rate: 1.0, ..MaskPolicy::default() };
        let plan = plan_masking(&seq, &lexicon, &narrow, 5).unwrap();
        assert!(plan.targets[0].allowed.is_empty(), "multi-token span without whole-word handling");

        let whole = MaskPolicy { mask_rate: 1.0, whole_word: true, ..MaskPolicy::default() };
        let plan = plan_masking(&seq, &lexicon, &whole, 5).unwrap();
        assert_eq!(plan.targets[0].allowed.len(), 2);
    }

    #[test]
    fn apply_plan_masks_whole_spans() {
        let (_, lexicon, seq) = arithmetic_fixture();
        let policy = MaskPolicy { keep_prob: 0.0, ..MaskPolicy::default() };
        let plan = plan_masking(&seq, &lexicon, &policy, 11).unwrap();
        let masked = apply_plan(&seq, &plan).unwrap();
        assert_eq!(masked.len(), seq.len());
        for target in &plan.targets {
            for p in target.span.positions() {
                assert_eq!(masked.ids[p], MASK_ID);
            }
        }
        let n_masked = masked.ids.iter().filter(|&&id| id == MASK_ID).count();
        assert_eq!(n_masked, 15);
        // Keep targets leave the ids alone.
        let keep_all = MaskPolicy { keep_prob: 1.0, ..MaskPolicy::default() };
        let plan = plan_masking(&seq, &lexicon, &keep_all, 11).unwrap();
        let kept = apply_plan(&seq, &plan).unwrap();
        assert_eq!(kept.ids, seq.ids);
    }

    #[test]
    fn stale_plan_is_rejected() {
        let (_, lexicon, seq) = arithmetic_fixture();
        let plan = plan_masking(&seq, &lexicon, &MaskPolicy::default(), 2).unwrap();
        let mut other = seq.clone();
        other.ids.rotate_left(1);
        let err = apply_plan(&other, &plan);
        assert!(matches!(err, Err(Error::Plan(_))));
        let mut short = seq.clone();
        short.truncate_to(10);
        assert!(matches!(apply_plan(&short, &plan), Err(Error::Plan(_))));
    }

    #[test]
    fn bad_policy_is_a_config_error() {
        let (_, lexicon, seq) = arithmetic_fixture();
        let policy = MaskPolicy { mask_rate: 1.5, ..MaskPolicy::default() };
        assert!(matches!(
            plan_masking(&seq, &lexicon, &policy, 0),
            Err(Error::Config(_))
        ));
    }
}
