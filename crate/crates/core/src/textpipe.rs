//! Text normalization, vocabulary construction and tokenization.
//!
//! The vocabulary holds exactly three special tokens (`[PAD]`, `[UNK]`,
//! `[MASK]`) at ids 0..2, then whole-word tokens, then mined `##` sub-word
//! pieces. Tokenization is greedy longest-match-first per word; every token
//! of an encoded sequence belongs to exactly one word span, so word-level
//! decisions (masking, sense supervision) can always be mapped back to token
//! positions.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::binfmt;
use crate::error::{Error, Result};

/// Index into the vocabulary.
pub type TokenId = u32;

/// Id of `[PAD]`, always 0.
pub const PAD_ID: TokenId = 0;
/// Id of `[UNK]`, always 1.
pub const UNK_ID: TokenId = 1;
/// Id of `[MASK]`, always 2.
pub const MASK_ID: TokenId = 2;

const SPECIALS: [&str; 3] = ["[PAD]", "[UNK]", "[MASK]"];

/// Longest sub-word piece the miner will form, in characters (the `##`
/// marker does not count).
const MAX_PIECE_CHARS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Special,
    WholeWord,
    SubWord,
}

/// Fixed token table mapping strings to dense ids.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<(String, TokenKind)>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Build from a full token list, inferring kinds: bracketed names are
    /// special, `##` prefixes are sub-words, everything else is a whole
    /// word. The first three entries must be the canonical specials.
    pub fn from_tokens(tokens: Vec<String>, origin: &Path) -> Result<Vocab> {
        if tokens.len() < SPECIALS.len() {
            return Err(Error::parse(
                origin,
                tokens.len() + 1,
                "vocabulary ends before the three special tokens",
            ));
        }
        for (i, want) in SPECIALS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::parse(
                    origin,
                    i + 1,
                    format!("expected special token {}, found '{}'", want, tokens[i]),
                ));
            }
        }
        let mut vocab = Vocab {
            tokens: Vec::with_capacity(tokens.len()),
            index: HashMap::with_capacity(tokens.len()),
        };
        for (i, tok) in tokens.into_iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::parse(origin, i + 1, "empty token"));
            }
            let kind = if tok.starts_with('[') && tok.ends_with(']') {
                TokenKind::Special
            } else if let Some(rest) = tok.strip_prefix("##") {
                if rest.is_empty() {
                    return Err(Error::parse(origin, i + 1, "bare '##' is not a piece"));
                }
                TokenKind::SubWord
            } else {
                TokenKind::WholeWord
            };
            if vocab.index.contains_key(&tok) {
                return Err(Error::parse(
                    origin,
                    i + 1,
                    format!("duplicate token '{}'", tok),
                ));
            }
            vocab.index.insert(tok.clone(), i as TokenId);
            vocab.tokens.push((tok, kind));
        }
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        Vocab::from_tokens(tokens, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.canonical_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Token count, i.e. the width of the word prediction head.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the three specials are always present
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize].0
    }

    pub fn kind(&self, id: TokenId) -> TokenKind {
        self.tokens[id as usize].1
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// One token per line; reloading reproduces the same table.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        for (tok, _) in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        out.into_bytes()
    }

    pub fn content_hash(&self) -> u64 {
        binfmt::fnv1a(&self.canonical_bytes())
    }
}

/// Half-open token range `[start, end)` covering one source word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordSpan {
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

impl WordSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Token ids plus the word spans that tile them.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub ids: Vec<TokenId>,
    pub spans: Vec<WordSpan>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_words(&self) -> usize {
        self.spans.len()
    }

    /// Drop trailing whole words until at most `n_max` tokens remain. Words
    /// are never cut in half.
    pub fn truncate_to(&mut self, n_max: usize) {
        while let Some(last) = self.spans.last() {
            if last.end <= n_max {
                break;
            }
            self.spans.pop();
        }
        let keep = self.spans.last().map_or(0, |s| s.end);
        self.ids.truncate(keep);
    }
}

/// Unicode NFC plus lowercasing; applied before any vocabulary lookup.
pub fn normalize_text(text: &str) -> String {
    text.nfc().collect::<String>().to_lowercase()
}

/// Split normalized text into words: alphanumeric runs stay together, every
/// other non-whitespace character becomes its own single-character word.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let text = normalize_text(text);
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                words.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Greedy longest-match segmentation of one word. Returns `None` when the
/// word cannot be tiled by known pieces.
fn segment_word(vocab: &Vocab, word: &str) -> Option<Vec<TokenId>> {
    let chars: Vec<char> = word.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut matched = None;
        while end > start {
            let slice: String = chars[start..end].iter().collect();
            let candidate = if start == 0 { slice } else { format!("##{}", slice) };
            if let Some(id) = vocab.id_of(&candidate) {
                // Specials are bracketed and never collide with words, but
                // guard anyway: only word-shaped tokens may match.
                if vocab.kind(id) != TokenKind::Special {
                    matched = Some(id);
                    break;
                }
            }
            end -= 1;
        }
        match matched {
            Some(id) => {
                pieces.push(id);
                start = end;
            }
            None => return None,
        }
    }
    Some(pieces)
}

/// Encode text against a vocabulary. Every word becomes one span; a word
/// with no whole-token match is segmented into pieces, and a word that
/// cannot be segmented becomes a single `[UNK]` position.
pub fn tokenize(vocab: &Vocab, text: &str) -> EncodedSequence {
    let mut ids = Vec::new();
    let mut spans = Vec::new();
    for word in pre_tokenize(text) {
        let start = ids.len();
        match segment_word(vocab, &word) {
            Some(pieces) => ids.extend(pieces),
            None => ids.push(UNK_ID),
        }
        spans.push(WordSpan {
            start,
            end: ids.len(),
            surface: word,
        });
    }
    EncodedSequence { ids, spans }
}

/// The word spans of a sequence, in order.
pub fn word_boundaries(seq: &EncodedSequence) -> &[WordSpan] {
    &seq.spans
}

/// Reassemble the surface words with single spaces. Inverse of the word
/// split up to whitespace.
pub fn detokenize(seq: &EncodedSequence) -> String {
    seq.spans
        .iter()
        .map(|s| s.surface.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

fn count_words(corpus: &str) -> HashMap<String, u64> {
    let mut freqs: HashMap<String, u64> = HashMap::new();
    for line in corpus.lines() {
        for word in pre_tokenize(line) {
            *freqs.entry(word).or_default() += 1;
        }
    }
    freqs
}

fn by_freq_then_name(freqs: &HashMap<String, u64>) -> Vec<(String, u64)> {
    let mut items: Vec<(String, u64)> = freqs.iter().map(|(w, &f)| (w.clone(), f)).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items
}

/// Build a vocabulary from a corpus file.
///
/// The three specials come first, then the most frequent words (ties broken
/// lexicographically) up to `size`. Budget that the distinct words do not
/// fill goes to sub-word pieces mined from the corpus by iterative
/// most-frequent-pair merging; the pieces let later tokenization segment
/// words that were never seen here. With `base` given, the base table is
/// kept verbatim (ids stable) and only new whole words are appended.
pub fn build_vocab(corpus_path: &Path, size: usize, base: Option<&Vocab>) -> Result<Vocab> {
    let corpus = std::fs::read_to_string(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
    let freqs = count_words(&corpus);
    if freqs.is_empty() {
        return Err(Error::Build(format!(
            "corpus {} has no words",
            corpus_path.display()
        )));
    }

    if let Some(base) = base {
        if size <= base.len() {
            return Err(Error::Build(format!(
                "target size {} does not extend the base vocabulary of {} tokens",
                size,
                base.len()
            )));
        }
        let mut tokens: Vec<String> = (0..base.len() as TokenId)
            .map(|id| base.token(id).to_string())
            .collect();
        let mut budget = size - base.len();
        for (word, _) in by_freq_then_name(&freqs) {
            if budget == 0 {
                break;
            }
            if base.id_of(&word).is_none() {
                tokens.push(word);
                budget -= 1;
            }
        }
        return Vocab::from_tokens(tokens, corpus_path);
    }

    if size < SPECIALS.len() + 1 {
        return Err(Error::Build(format!(
            "vocabulary size {} cannot hold the specials and a word",
            size
        )));
    }

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let budget = size - tokens.len();
    let ranked = by_freq_then_name(&freqs);
    for (word, _) in ranked.iter().take(budget) {
        tokens.push(word.clone());
    }
    let leftover = budget.saturating_sub(ranked.len());
    if leftover > 0 {
        let existing: HashSet<&str> = tokens.iter().map(|s| s.as_str()).collect();
        let pieces = mine_pieces(&ranked, leftover, &existing);
        tokens.extend(pieces);
    }
    Vocab::from_tokens(tokens, corpus_path)
}

/// Iterative most-frequent-pair merging over the corpus words. Starts from
/// single characters (continuations carry `##`), then repeatedly fuses the
/// most frequent adjacent pair until the budget is spent or no pair occurs
/// twice. New piece strings are emitted in discovery order: characters by
/// frequency first, merged pieces after.
fn mine_pieces(
    ranked_words: &[(String, u64)],
    budget: usize,
    existing: &HashSet<&str>,
) -> Vec<String> {
    // Each word as a piece sequence, weighted by corpus frequency.
    let mut seqs: Vec<(Vec<String>, u64)> = ranked_words
        .iter()
        .map(|(word, freq)| {
            let pieces: Vec<String> = word
                .chars()
                .enumerate()
                .map(|(i, c)| if i == 0 { c.to_string() } else { format!("##{}", c) })
                .collect();
            (pieces, *freq)
        })
        .collect();

    let mut emitted: Vec<String> = Vec::new();
    let mut known: HashSet<String> = existing.iter().map(|s| s.to_string()).collect();
    let mut remaining = budget;

    let emit = |piece: &str, known: &mut HashSet<String>, out: &mut Vec<String>, left: &mut usize| {
        if *left > 0 && !known.contains(piece) {
            known.insert(piece.to_string());
            out.push(piece.to_string());
            *left -= 1;
        }
    };

    // Character-level base pieces, most frequent first.
    let mut unit_freqs: HashMap<String, u64> = HashMap::new();
    for (pieces, freq) in &seqs {
        for p in pieces {
            *unit_freqs.entry(p.clone()).or_default() += freq;
        }
    }
    for (unit, _) in by_freq_then_name(&unit_freqs) {
        if remaining == 0 {
            return emitted;
        }
        emit(&unit, &mut known, &mut emitted, &mut remaining);
    }

    // Merge loop. Pairs that never repeat are not worth a slot.
    while remaining > 0 {
        let mut pair_freqs: HashMap<(String, String), u64> = HashMap::new();
        for (pieces, freq) in &seqs {
            for pair in pieces.windows(2) {
                let fused_len = pair[0].trim_start_matches("##").chars().count()
                    + pair[1].trim_start_matches("##").chars().count();
                if fused_len <= MAX_PIECE_CHARS {
                    *pair_freqs
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_default() += freq;
                }
            }
        }
        let best = pair_freqs
            .into_iter()
            .filter(|&(_, f)| f >= 2)
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some(((left, right), _)) = best else {
            break;
        };
        let fused = format!("{}{}", left, right.trim_start_matches("##"));
        for (pieces, _) in &mut seqs {
            let mut i = 0;
            while i + 1 < pieces.len() {
                if pieces[i] == left && pieces[i + 1] == right {
                    pieces[i] = fused.clone();
                    pieces.remove(i + 1);
                }
                i += 1;
            }
        }
        emit(&fused, &mut known, &mut emitted, &mut remaining);
    }
    emitted
}
