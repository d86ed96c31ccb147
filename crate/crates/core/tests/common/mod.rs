//! Shared fixtures for the acceptance suite: a synthetic template corpus
//! whose words co-occur with context types through exactly one shared
//! supersense, plus a brute-force clustering oracle.
//!
//! Every artifact is a pure function of the seed, so measured accuracies are
//! stable across runs and machines.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sense_lm::evalkit::{SenseTaggedExample, WiCExample};
use sense_lm::lexicon::{LemmaRules, Lexicon, SenseMembershipMatrix, SupersenseInventory};
use sense_lm::rng::CounterRng;
use sense_lm::textpipe::{tokenize, EncodedSequence, Vocab, MASK_ID};

pub fn data_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

/// One context type: a target supersense and the cue words that mark it.
pub struct ContextType {
    pub sense: u16,
    pub sense_name: String,
    pub cues: Vec<String>,
    pub anchors: Vec<String>,
    pub distractors: Vec<String>,
}

/// A held-out template with its target span replaced by `[MASK]`.
pub struct MaskedTemplate {
    pub seq: EncodedSequence,
    pub mask_position: usize,
    pub sense: u16,
}

pub struct SynthWorld {
    pub inventory: SupersenseInventory,
    pub vocab: Vocab,
    pub lexicon: Lexicon,
    pub membership: SenseMembershipMatrix,
    /// Word-only baseline world: no lexicon entries at all.
    pub empty_lexicon: Lexicon,
    pub empty_membership: SenseMembershipMatrix,
    pub corpus: Vec<EncodedSequence>,
    pub types: Vec<ContextType>,
    /// Ambiguous words with the two types they belong to.
    pub wic_words: Vec<(String, usize, usize)>,
    pub held_out: Vec<MaskedTemplate>,
    pub probe_train: Vec<SenseTaggedExample>,
    /// Concatenation of the three test slices below.
    pub probe_test: Vec<SenseTaggedExample>,
    /// Held-out words in cue-bearing contexts.
    pub typed_test: Vec<SenseTaggedExample>,
    /// Held-out words in cue-free contexts: the word alone carries the sense.
    pub neutral_test: Vec<SenseTaggedExample>,
    /// Ambiguous words whose gold sense is fixed by the context type.
    pub ambiguous_test: Vec<SenseTaggedExample>,
    pub wic_train: Vec<WiCExample>,
    pub wic_test: Vec<WiCExample>,
}

/// Deterministic pronounceable word: two or three consonant-vowel syllables.
/// Always ends in a vowel, so no lemmatizer suffix rule can rewrite it.
pub fn make_word(rng: &mut CounterRng, used: &mut HashSet<String>) -> String {
    const CONSONANTS: [&str; 15] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "t", "v", "z", "ch", "sh",
    ];
    const VOWELS: [&str; 7] = ["a", "e", "i", "o", "u", "ai", "ou"];
    loop {
        let syllables = 2 + rng.below(2);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(CONSONANTS[rng.below(CONSONANTS.len())]);
            w.push_str(VOWELS[rng.below(VOWELS.len())]);
        }
        if w.len() >= 4 && used.insert(w.clone()) {
            return w;
        }
    }
}

pub fn make_words(rng: &mut CounterRng, used: &mut HashSet<String>, n: usize) -> Vec<String> {
    (0..n).map(|_| make_word(rng, used)).collect()
}

/// The five context-type target supersenses.
const TYPE_SENSES: [&str; 5] = [
    "noun.food",
    "noun.animal",
    "noun.person",
    "verb.motion",
    "verb.communication",
];

/// Pool of unrelated supersenses for the distractors' second senses.
const SCATTER_SENSES: [&str; 12] = [
    "noun.artifact",
    "noun.plant",
    "noun.time",
    "noun.feeling",
    "noun.location",
    "noun.substance",
    "verb.contact",
    "verb.creation",
    "verb.perception",
    "verb.possession",
    "noun.event",
    "noun.shape",
];

const ANCHORS_PER_TYPE: usize = 24;
const DISTRACTORS_PER_TYPE: usize = 8;
const CUES_PER_TYPE: usize = 8;
/// Filler words used by the template shapes; all stopwords.
const FILLERS: [&str; 8] = ["we", "the", "a", "with", "and", "they", "will", "very"];

/// Template shapes. `C` marks a cue slot, `T` the target slot; anything else
/// is a literal filler. Shape 3 never occurs in the pretraining corpus; it is
/// reserved for the held-out masked probes.
const SHAPES: [[&str; 6]; 4] = [
    ["we", "C", "the", "T", "with", "C"],
    ["the", "C", "T", "and", "the", "C"],
    ["they", "C", "a", "T", "very", "C"],
    ["we", "very", "C", "T", "C", "and"],
];
const TRAIN_SHAPES: usize = 3;

/// Word index of the target slot within each shape.
fn target_index(shape: usize) -> usize {
    SHAPES[shape].iter().position(|&s| s == "T").expect("every shape has a target")
}

/// Render one instance of a shape with concrete cues and target.
fn render(shape: usize, cue_a: &str, cue_b: &str, target: &str) -> String {
    let mut cues = [cue_a, cue_b].into_iter();
    let words: Vec<&str> = SHAPES[shape]
        .iter()
        .map(|&slot| match slot {
            "C" => cues.next().expect("two cue slots per shape"),
            "T" => target,
            literal => literal,
        })
        .collect();
    words.join(" ")
}

impl SynthWorld {
    pub fn build(seed: u64) -> SynthWorld {
        let origin = PathBuf::from("<synthetic>");
        let inv_text = std::fs::read_to_string(data_path("supersenses.tsv"))
            .expect("canonical inventory ships with the repository");
        let inventory = SupersenseInventory::parse(&inv_text, &origin).unwrap();

        let mut used: HashSet<String> = FILLERS.iter().map(|s| s.to_string()).collect();
        let mut word_rng = CounterRng::derive(seed, &[0x776f_7264]);

        // Ambiguous words spanning two types: (t, t+1 mod 5) and (t, t+2 mod 5).
        let pair_list: Vec<(usize, usize)> = (0..5)
            .flat_map(|t| [(t, (t + 1) % 5), (t, (t + 2) % 5)])
            .collect();
        let wic_words: Vec<(String, usize, usize)> = pair_list
            .iter()
            .map(|&(a, b)| (make_word(&mut word_rng, &mut used), a, b))
            .collect();

        let mut lex_text = String::new();
        let mut types = Vec::new();
        for (t, sense_name) in TYPE_SENSES.iter().enumerate() {
            let sense = inventory.lookup(sense_name).expect("type senses are canonical");
            let cues = make_words(&mut word_rng, &mut used, CUES_PER_TYPE);
            let anchors = make_words(&mut word_rng, &mut used, ANCHORS_PER_TYPE);
            let distractors = make_words(&mut word_rng, &mut used, DISTRACTORS_PER_TYPE);
            for w in &anchors {
                let _ = writeln!(lex_text, "{}\t{}", w, sense_name);
            }
            for (i, w) in distractors.iter().enumerate() {
                let scatter = SCATTER_SENSES[(t * DISTRACTORS_PER_TYPE + i) % SCATTER_SENSES.len()];
                let _ = writeln!(lex_text, "{}\t{},{}", w, sense_name, scatter);
            }
            types.push(ContextType {
                sense,
                sense_name: sense_name.to_string(),
                cues,
                anchors,
                distractors,
            });
        }
        for (w, a, b) in &wic_words {
            let _ = writeln!(lex_text, "{}\t{},{}", w, TYPE_SENSES[*a], TYPE_SENSES[*b]);
        }

        // Rare filler words pad the vocabulary towards two thousand entries.
        let rare = make_words(&mut word_rng, &mut used, 1700);

        let mut tokens: Vec<String> = vec!["[PAD]".into(), "[UNK]".into(), "[MASK]".into()];
        tokens.extend(FILLERS.iter().map(|s| s.to_string()));
        for ty in &types {
            tokens.extend(ty.cues.iter().cloned());
            tokens.extend(ty.anchors.iter().cloned());
            tokens.extend(ty.distractors.iter().cloned());
        }
        tokens.extend(wic_words.iter().map(|(w, _, _)| w.clone()));
        tokens.extend(rare.iter().cloned());
        let vocab = Vocab::from_tokens(tokens, &origin).unwrap();

        let stoplist = FILLERS.join("\n");
        let lexicon = Lexicon::parse_strings(
            &lex_text,
            &origin,
            &stoplist,
            &inventory,
            LemmaRules::default(),
        )
        .unwrap();
        let membership = SenseMembershipMatrix::build(&lexicon, &vocab);
        let empty_lexicon = Lexicon::empty(inventory.len());
        let empty_membership = SenseMembershipMatrix::empty(inventory.len(), vocab.len());

        // Pretraining corpus: every type word in every training shape with
        // three cue draws, plus sentences of rare fillers.
        let mut corpus_text: Vec<String> = Vec::new();
        let mut cue_rng = CounterRng::derive(seed, &[0x6375_6573]);
        let mut type_words: Vec<Vec<String>> = types
            .iter()
            .map(|ty| {
                let mut v = ty.anchors.clone();
                v.extend(ty.distractors.iter().cloned());
                v
            })
            .collect();
        for (w, a, b) in &wic_words {
            type_words[*a].push(w.clone());
            type_words[*b].push(w.clone());
        }
        for (t, ty) in types.iter().enumerate() {
            for word in &type_words[t] {
                for shape in 0..TRAIN_SHAPES {
                    for _ in 0..3 {
                        let (ca, cb) = draw_cues(&mut cue_rng, &ty.cues);
                        corpus_text.push(render(shape, ca, cb, word));
                    }
                }
            }
        }
        for chunk in rare.chunks(10) {
            corpus_text.push(chunk.join(" "));
        }
        // A deterministic shuffle mixes types through the data order.
        CounterRng::derive(seed, &[0x6f72_6465]).shuffle(&mut corpus_text);
        let corpus: Vec<EncodedSequence> =
            corpus_text.iter().map(|line| tokenize(&vocab, line)).collect();

        // Held-out probes: the reserved shape with fresh cue draws, target
        // replaced by [MASK].
        let mut held_rng = CounterRng::derive(seed, &[0x6865_6c64]);
        let mut held_out = Vec::new();
        for ty in &types {
            for _ in 0..6 {
                let (ca, cb) = draw_cues(&mut held_rng, &ty.cues);
                let text = render(TRAIN_SHAPES, ca, cb, &ty.anchors[0]);
                let mut seq = tokenize(&vocab, &text);
                let span = seq.spans[target_index(TRAIN_SHAPES)].clone();
                assert_eq!(span.len(), 1, "targets are single-token by construction");
                seq.ids[span.start] = MASK_ID;
                held_out.push(MaskedTemplate {
                    seq,
                    mask_position: span.start,
                    sense: ty.sense,
                });
            }
        }

        // Supersense-tagging split. Training examples use the first sixteen
        // anchors; test examples use the remaining eight (word-disjoint),
        // both in cue-bearing and in cue-free contexts, plus ambiguous words
        // that only context can resolve.
        let mut probe_rng = CounterRng::derive(seed, &[0x7072_6f62]);
        let mut probe_train = Vec::new();
        let mut typed_test = Vec::new();
        let mut neutral_test = Vec::new();
        let mut ambiguous_test = Vec::new();
        for (t, ty) in types.iter().enumerate() {
            for (i, word) in ty.anchors[..16].iter().enumerate() {
                let shape = i % TRAIN_SHAPES;
                let (ca, cb) = draw_cues(&mut probe_rng, &ty.cues);
                probe_train.push(SenseTaggedExample {
                    sentence: render(shape, ca, cb, word),
                    word_index: target_index(shape),
                    gold: ty.sense,
                });
            }
            for (i, word) in ty.anchors[16..].iter().enumerate() {
                let shape = i % TRAIN_SHAPES;
                let (ca, cb) = draw_cues(&mut probe_rng, &ty.cues);
                typed_test.push(SenseTaggedExample {
                    sentence: render(shape, ca, cb, word),
                    word_index: target_index(shape),
                    gold: ty.sense,
                });
                // The same held-out word with no cues at all: only the word
                // itself carries the supersense.
                neutral_test.push(SenseTaggedExample {
                    sentence: format!("the {} and the {}", word, FILLERS[7]),
                    word_index: 1,
                    gold: ty.sense,
                });
            }
            for (w, a, b) in &wic_words {
                if *a != t && *b != t {
                    continue;
                }
                let (ca, cb) = draw_cues(&mut probe_rng, &ty.cues);
                let shape = (ty.sense as usize) % TRAIN_SHAPES;
                ambiguous_test.push(SenseTaggedExample {
                    sentence: render(shape, ca, cb, w),
                    word_index: target_index(shape),
                    gold: ty.sense,
                });
            }
        }
        let mut probe_test = typed_test.clone();
        probe_test.extend(neutral_test.iter().cloned());
        probe_test.extend(ambiguous_test.iter().cloned());

        // Word-in-context pairs over the ambiguous words, word-disjoint
        // between train and test, balanced between labels.
        let mut wic_rng = CounterRng::derive(seed, &[0x7769_6370]);
        let mut wic_train = Vec::new();
        let mut wic_test = Vec::new();
        for (i, (w, a, b)) in wic_words.iter().enumerate() {
            let mut sentence_in = |t: usize, rng: &mut CounterRng| {
                let ty = &types[t];
                let shape = rng.below(TRAIN_SHAPES);
                let (ca, cb) = draw_cues(rng, &ty.cues);
                render(shape, ca, cb, w)
            };
            let (bucket, reps) = if i < 6 {
                (&mut wic_train, 3)
            } else {
                (&mut wic_test, 2)
            };
            for _ in 0..reps {
                let pairs = [
                    (sentence_in(*a, &mut wic_rng), sentence_in(*a, &mut wic_rng), true),
                    (sentence_in(*b, &mut wic_rng), sentence_in(*b, &mut wic_rng), true),
                    (sentence_in(*a, &mut wic_rng), sentence_in(*b, &mut wic_rng), false),
                    (sentence_in(*b, &mut wic_rng), sentence_in(*a, &mut wic_rng), false),
                ];
                for (sa, sb, label) in pairs {
                    bucket.push(WiCExample {
                        sentence_a: sa,
                        sentence_b: sb,
                        word: w.clone(),
                        label,
                    });
                }
            }
        }

        SynthWorld {
            inventory,
            vocab,
            lexicon,
            membership,
            empty_lexicon,
            empty_membership,
            corpus,
            types,
            wic_words,
            held_out,
            probe_train,
            probe_test,
            typed_test,
            neutral_test,
            ambiguous_test,
            wic_train,
            wic_test,
        }
    }

    /// Fresh masked templates drawn from a *training* shape; used to tell
    /// "failed to learn" apart from "failed to transfer to the unseen shape".
    pub fn in_domain_masked(&self, seed: u64) -> Vec<MaskedTemplate> {
        let mut rng = CounterRng::derive(seed, &[0x696e_646f]);
        let mut out = Vec::new();
        for ty in &self.types {
            for shape in 0..TRAIN_SHAPES {
                let (ca, cb) = draw_cues(&mut rng, &ty.cues);
                let text = render(shape, ca, cb, &ty.anchors[0]);
                let mut seq = tokenize(&self.vocab, &text);
                let span = seq.spans[target_index(shape)].clone();
                seq.ids[span.start] = MASK_ID;
                out.push(MaskedTemplate {
                    seq,
                    mask_position: span.start,
                    sense: ty.sense,
                });
            }
        }
        out
    }
}

fn draw_cues<'a>(rng: &mut CounterRng, cues: &'a [String]) -> (&'a str, &'a str) {
    let a = rng.below(cues.len());
    let b = (a + 1 + rng.below(cues.len() - 1)) % cues.len();
    (&cues[a], &cues[b])
}

// ---------------------------------------------------------------------------
// Brute-force average-linkage oracle.

/// O(n^3) agglomerative clustering with distances recomputed from scratch as
/// the mean pairwise cosine distance between cluster members. Ties break
/// toward the lowest cluster-id pair. Returns (a, b, distance, size) merges.
pub fn oracle_average_linkage(matrix: ndarray::ArrayView2<'_, f32>) -> Vec<(usize, usize, f64, usize)> {
    let k = matrix.ncols();
    let cols: Vec<Vec<f64>> = (0..k)
        .map(|j| matrix.column(j).iter().map(|&v| v as f64).collect())
        .collect();
    let point_dist = |i: usize, j: usize| -> f64 {
        let (a, b) = (&cols[i], &cols[j]);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return 1.0;
        }
        (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
    };

    // Each active cluster: (id, member point indices).
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..k).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::new();
    for step in 0..k.saturating_sub(1) {
        let mut best: Option<(f64, usize, usize)> = None;
        for x in 0..clusters.len() {
            for y in (x + 1)..clusters.len() {
                let (ida, ma) = &clusters[x];
                let (idb, mb) = &clusters[y];
                let mut sum = 0.0;
                for &i in ma {
                    for &j in mb {
                        sum += point_dist(i, j);
                    }
                }
                let d = sum / (ma.len() * mb.len()) as f64;
                let (lo, hi) = (*ida.min(idb), *ida.max(idb));
                let cand = (d, lo, hi);
                let better = match best {
                    None => true,
                    Some(b) => {
                        (cand.0.total_cmp(&b.0))
                            .then(cand.1.cmp(&b.1))
                            .then(cand.2.cmp(&b.2))
                            == std::cmp::Ordering::Less
                    }
                };
                if better {
                    best = Some(cand);
                }
            }
        }
        let (d, lo, hi) = best.expect("two clusters remain");
        let xa = clusters.iter().position(|(id, _)| *id == lo).unwrap();
        let xb = clusters.iter().position(|(id, _)| *id == hi).unwrap();
        let mut members = clusters[xa].1.clone();
        members.extend(clusters[xb].1.iter().copied());
        let size = members.len();
        clusters.retain(|(id, _)| *id != lo && *id != hi);
        clusters.push((k + step, members));
        merges.push((lo, hi, d, size));
    }
    merges
}
