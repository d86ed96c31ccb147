//! Supersense inventory, the allowed-senses map, and the word/sense
//! membership matrix.
//!
//! The lexicon is a flat TSV distillation of a word-sense inventory: each
//! line couples a lemma to the union of supersenses its senses belong to.
//! Three classes of words are forced to an empty allowed set: stopwords,
//! words of up to three characters (frequent abbreviations), and tokens that
//! stand for part of a word.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::binfmt;
use crate::error::{Error, Result};
use crate::textpipe::{TokenKind, Vocab};

/// Index into the supersense inventory.
pub type SenseId = u16;

/// Part of speech a supersense category belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pos {
    Noun,
    Verb,
    Adj,
    Adv,
}

impl Pos {
    fn parse(s: &str) -> Option<Pos> {
        match s {
            "noun" => Some(Pos::Noun),
            "verb" => Some(Pos::Verb),
            "adj" => Some(Pos::Adj),
            "adv" => Some(Pos::Adv),
            _ => None,
        }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Pos::Noun => "noun",
            Pos::Verb => "verb",
            Pos::Adj => "adj",
            Pos::Adv => "adv",
        };
        f.write_str(s)
    }
}

/// One coarse lexical category, e.g. `noun.food`.
#[derive(Clone, Debug)]
pub struct Supersense {
    pub id: SenseId,
    pub name: String,
    pub pos: Pos,
}

/// The ordered supersense vocabulary. The canonical file has 45 entries:
/// 26 noun, 15 verb, 3 adjective and 1 adverb categories.
#[derive(Clone, Debug)]
pub struct SupersenseInventory {
    entries: Vec<Supersense>,
    index: HashMap<String, SenseId>,
}

impl SupersenseInventory {
    pub fn load(path: &Path) -> Result<SupersenseInventory> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<SupersenseInventory> {
        let mut inv = SupersenseInventory {
            entries: Vec::new(),
            index: HashMap::new(),
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let name = parts.next().unwrap_or("").trim();
            let pos_str = parts.next().unwrap_or("").trim();
            if name.is_empty() || pos_str.is_empty() {
                return Err(Error::parse(
                    origin,
                    lineno + 1,
                    "expected \"name<TAB>pos\"",
                ));
            }
            let pos = Pos::parse(pos_str).ok_or_else(|| {
                Error::parse(
                    origin,
                    lineno + 1,
                    format!("unknown part of speech '{}'", pos_str),
                )
            })?;
            if inv.index.contains_key(name) {
                return Err(Error::parse(
                    origin,
                    lineno + 1,
                    format!("duplicate supersense '{}'", name),
                ));
            }
            let id = inv.entries.len() as SenseId;
            inv.index.insert(name.to_string(), id);
            inv.entries.push(Supersense {
                id,
                name: name.to_string(),
                pos,
            });
        }
        Ok(inv)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: SenseId) -> Option<&Supersense> {
        self.entries.get(id as usize)
    }

    pub fn name(&self, id: SenseId) -> &str {
        &self.entries[id as usize].name
    }

    pub fn lookup(&self, name: &str) -> Option<SenseId> {
        self.index.get(name).copied()
    }

    pub fn entries(&self) -> &[Supersense] {
        &self.entries
    }

    /// Counts per part of speech in id order (noun, verb, adj, adv).
    pub fn pos_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for e in &self.entries {
            match e.pos {
                Pos::Noun => counts[0] += 1,
                Pos::Verb => counts[1] += 1,
                Pos::Adj => counts[2] += 1,
                Pos::Adv => counts[3] += 1,
            }
        }
        counts
    }
}

/// Ordered suffix-rewrite rules standing in for a full lemmatizer. The first
/// matching rule is applied once; a word with no matching suffix is returned
/// unchanged.
#[derive(Clone, Debug)]
pub struct LemmaRules {
    rules: Vec<(String, String)>,
}

impl Default for LemmaRules {
    fn default() -> LemmaRules {
        // "s" must stay last so the more specific plural rules win.
        LemmaRules::new(&[
            ("ies", "y"),
            ("sses", "ss"),
            ("ses", "s"),
            ("ing", ""),
            ("ed", ""),
            ("s", ""),
        ])
    }
}

impl LemmaRules {
    pub fn new(rules: &[(&str, &str)]) -> LemmaRules {
        LemmaRules {
            rules: rules
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        }
    }

    pub fn empty() -> LemmaRules {
        LemmaRules { rules: Vec::new() }
    }

    /// Apply the first matching rule once. Rules only fire when they leave a
    /// nonempty stem.
    pub fn apply(&self, word: &str) -> String {
        for (suffix, replacement) in &self.rules {
            if word.len() > suffix.len() && word.ends_with(suffix.as_str()) {
                let stem = &word[..word.len() - suffix.len()];
                return format!("{}{}", stem, replacement);
            }
        }
        word.to_string()
    }
}

/// Canonical text form used for every lexicon lookup: NFC-normalized and
/// lowercased.
pub fn normalize(word: &str) -> String {
    word.nfc().collect::<String>().to_lowercase()
}

/// The allowed-senses map with its exception sets and lemma rules.
#[derive(Clone, Debug)]
pub struct Lexicon {
    allowed: HashMap<String, BTreeSet<SenseId>>,
    stopwords: HashSet<String>,
    rules: LemmaRules,
    n_senses: usize,
}

impl Lexicon {
    /// Parse the lexicon TSV and stoplist against an inventory, using the
    /// default lemma rules.
    pub fn parse(
        lexicon_path: &Path,
        stoplist_path: &Path,
        inventory: &SupersenseInventory,
    ) -> Result<Lexicon> {
        let lex_text =
            std::fs::read_to_string(lexicon_path).map_err(|e| Error::io(lexicon_path, e))?;
        let stop_text =
            std::fs::read_to_string(stoplist_path).map_err(|e| Error::io(stoplist_path, e))?;
        Self::parse_strings(&lex_text, lexicon_path, &stop_text, inventory, LemmaRules::default())
    }

    pub fn parse_strings(
        lexicon_text: &str,
        lexicon_origin: &Path,
        stoplist_text: &str,
        inventory: &SupersenseInventory,
        rules: LemmaRules,
    ) -> Result<Lexicon> {
        let stopwords: HashSet<String> = stoplist_text
            .lines()
            .map(|l| l.trim())
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(normalize)
            .collect();

        let mut allowed: HashMap<String, BTreeSet<SenseId>> = HashMap::new();
        for (lineno, raw) in lexicon_text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let lemma = parts.next().unwrap_or("").trim();
            let senses = parts.next().unwrap_or("").trim();
            if lemma.is_empty() || senses.is_empty() {
                return Err(Error::parse(
                    lexicon_origin,
                    lineno + 1,
                    "expected \"lemma<TAB>sense[,sense...]\"",
                ));
            }
            let lemma = normalize(lemma);
            let entry = allowed.entry(lemma).or_default();
            for sense_name in senses.split(',') {
                let sense_name = sense_name.trim();
                let id = inventory.lookup(sense_name).ok_or_else(|| {
                    Error::parse(
                        lexicon_origin,
                        lineno + 1,
                        format!("unknown supersense '{}'", sense_name),
                    )
                })?;
                entry.insert(id);
            }
        }

        // The exceptions are baked into the map: stopwords and short lemmas
        // keep no senses no matter what the file says.
        allowed.retain(|lemma, _| lemma.chars().count() > 3 && !stopwords.contains(lemma));

        Ok(Lexicon {
            allowed,
            stopwords,
            rules,
            n_senses: inventory.len(),
        })
    }

    /// An empty lexicon over the same inventory size: every word maps to the
    /// empty allowed set. This is the word-only baseline configuration.
    pub fn empty(n_senses: usize) -> Lexicon {
        Lexicon {
            allowed: HashMap::new(),
            stopwords: HashSet::new(),
            rules: LemmaRules::default(),
            n_senses,
        }
    }

    pub fn n_senses(&self) -> usize {
        self.n_senses
    }

    pub fn rules(&self) -> &LemmaRules {
        &self.rules
    }

    pub fn is_stopword(&self, word: &str) -> bool {
        self.stopwords.contains(&normalize(word))
    }

    /// The allowed supersenses of a surface word. Direct lookup wins; a
    /// lemmatized lookup is the fallback. The exceptions dominate both
    /// routes: a surface form of up to three characters or a stopword
    /// (surface or lemma) always yields the empty set.
    pub fn allowed_senses(&self, word: &str) -> BTreeSet<SenseId> {
        let surface = normalize(word);
        if surface.chars().count() <= 3 || self.stopwords.contains(&surface) {
            return BTreeSet::new();
        }
        if let Some(senses) = self.allowed.get(&surface) {
            return senses.clone();
        }
        let lemma = self.rules.apply(&surface);
        if lemma != surface {
            if self.stopwords.contains(&lemma) {
                return BTreeSet::new();
            }
            if let Some(senses) = self.allowed.get(&lemma) {
                return senses.clone();
            }
        }
        BTreeSet::new()
    }

    /// Serialization that depends only on content, not on file layout or map
    /// order. Feeds the artifact hash stored in checkpoint headers.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut lemmas: Vec<&String> = self.allowed.keys().collect();
        lemmas.sort();
        let mut out = String::new();
        for lemma in lemmas {
            let senses: Vec<String> = self.allowed[lemma].iter().map(|s| s.to_string()).collect();
            out.push_str(lemma);
            out.push('\t');
            out.push_str(&senses.join(","));
            out.push('\n');
        }
        out.push_str("--stopwords--\n");
        let mut stops: Vec<&String> = self.stopwords.iter().collect();
        stops.sort();
        for s in stops {
            out.push_str(s);
            out.push('\n');
        }
        out.push_str("--rules--\n");
        for (a, b) in &self.rules.rules {
            out.push_str(a);
            out.push('\t');
            out.push_str(b);
            out.push('\n');
        }
        out.into_bytes()
    }

    pub fn content_hash(&self) -> u64 {
        binfmt::fnv1a(&self.canonical_bytes())
    }
}

/// Static 0/1 matrix of shape senses x words: entry (s, w) is set when sense
/// s is allowed for vocabulary word w. Columns for sub-word tokens, special
/// tokens, stopwords and short words are all zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SenseMembershipMatrix {
    n_senses: usize,
    columns: Vec<Vec<SenseId>>,
}

impl SenseMembershipMatrix {
    pub fn build(lexicon: &Lexicon, vocab: &Vocab) -> SenseMembershipMatrix {
        let columns = (0..vocab.len())
            .map(|id| {
                let id = id as u32;
                match vocab.kind(id) {
                    TokenKind::WholeWord => {
                        lexicon.allowed_senses(vocab.token(id)).into_iter().collect()
                    }
                    _ => Vec::new(),
                }
            })
            .collect();
        SenseMembershipMatrix {
            n_senses: lexicon.n_senses(),
            columns,
        }
    }

    /// All-zero matrix; used by the word-only baseline.
    pub fn empty(n_senses: usize, n_words: usize) -> SenseMembershipMatrix {
        SenseMembershipMatrix {
            n_senses,
            columns: vec![Vec::new(); n_words],
        }
    }

    /// Build from explicit per-word sense lists.
    pub fn from_columns(n_senses: usize, mut columns: Vec<Vec<SenseId>>) -> SenseMembershipMatrix {
        for col in &mut columns {
            col.sort_unstable();
            col.dedup();
        }
        SenseMembershipMatrix { n_senses, columns }
    }

    pub fn n_senses(&self) -> usize {
        self.n_senses
    }

    pub fn n_words(&self) -> usize {
        self.columns.len()
    }

    /// The nonzero rows of column `word_id`, in ascending sense order.
    pub fn senses_of(&self, word_id: u32) -> &[SenseId] {
        &self.columns[word_id as usize]
    }

    pub fn nnz(&self) -> usize {
        self.columns.iter().map(|c| c.len()).sum()
    }

    /// Sparse entries sorted by (sense id, word id).
    pub fn pairs(&self) -> Vec<(u32, u32)> {
        let mut pairs: Vec<(u32, u32)> = self
            .columns
            .iter()
            .enumerate()
            .flat_map(|(w, senses)| senses.iter().map(move |&s| (s as u32, w as u32)))
            .collect();
        pairs.sort_unstable();
        pairs
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);
        binfmt::write_magic(&mut w, binfmt::Kind::MembershipMatrix).map_err(io_err)?;
        binfmt::write_u64(&mut w, self.n_senses as u64).map_err(io_err)?;
        binfmt::write_u64(&mut w, self.n_words() as u64).map_err(io_err)?;
        binfmt::write_u64(&mut w, self.nnz() as u64).map_err(io_err)?;
        for (s, word) in self.pairs() {
            binfmt::write_u32(&mut w, s).map_err(io_err)?;
            binfmt::write_u32(&mut w, word).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<SenseMembershipMatrix> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = &bytes[..];
        binfmt::read_magic(&mut r, binfmt::Kind::MembershipMatrix)?;
        let n_senses = binfmt::read_u64(&mut r)? as usize;
        let n_words = binfmt::read_u64(&mut r)? as usize;
        let nnz = binfmt::read_u64(&mut r)? as usize;
        let mut columns = vec![Vec::new(); n_words];
        for _ in 0..nnz {
            let s = binfmt::read_u32(&mut r)?;
            let word = binfmt::read_u32(&mut r)? as usize;
            if s as usize >= n_senses || word >= n_words {
                return Err(Error::Format(format!(
                    "membership entry ({}, {}) outside {}x{}",
                    s, word, n_senses, n_words
                )));
            }
            columns[word].push(s as SenseId);
        }
        for col in &mut columns {
            col.sort_unstable();
            col.dedup();
        }
        Ok(SenseMembershipMatrix { n_senses, columns })
    }
}
