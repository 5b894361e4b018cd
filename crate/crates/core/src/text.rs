//! Text pipeline: subword vocabulary, greedy tokenization with "##"
//! continuation pieces, clause segmentation, and padded batch encoding.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::hex_string;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;

pub const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Punctuation marks that close a clause.
const CLAUSE_SEPARATORS: [char; 6] = ['.', ',', ';', '?', '!', ':'];

/// Token inventory with dense ids. Ids 0..=3 are always the four specials.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() {
            return Err(Error::Vocab(format!(
                "vocabulary must contain at least the {} special tokens, got {}",
                SPECIALS.len(),
                tokens.len()
            )));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Vocab(format!(
                    "special token {s} must sit at id {i}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Vocab(format!("empty token at id {i}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the specials are always present
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Serialized form: one token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        Self::from_token_list(tokens)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| {
            Error::Vocab(format!("{}: {e}", path.display()))
        })
    }

    /// SHA-256 of the serialized form, the identity recorded in checkpoints.
    pub fn sha256_hex(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_text().as_bytes());
        hex_string(&hasher.finalize())
    }
}

/// Where a token came from in the source text. Drives clause segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Origin {
    /// [CLS], [SEP], or padding.
    Special,
    /// A piece of an alphanumeric word (including its [UNK] fallback).
    Word,
    /// A single punctuation character.
    Punct(char),
}

/// One tokenized text: ids wrapped in [CLS]…[SEP], a padding mask, and
/// clause spans over the ids.
///
/// When the text contains at least one word token, the clause spans are
/// disjoint, ordered, and together cover every non-special position;
/// punctuation-only text yields zero spans and downstream classification
/// falls back to the sentence-summary path.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub clause_spans: Vec<(usize, usize)>,
    origins: Vec<Origin>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercase and split into word and punctuation units. ASCII punctuation
/// becomes single-character units; everything else inside a whitespace-
/// delimited chunk is a word character.
fn split_units(text: &str) -> Vec<(String, Origin)> {
    let lower = text.to_lowercase();
    let mut units = Vec::new();
    for chunk in lower.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_ascii_punctuation() {
                if !word.is_empty() {
                    units.push((std::mem::take(&mut word), Origin::Word));
                }
                units.push((c.to_string(), Origin::Punct(c)));
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            units.push((word, Origin::Word));
        }
    }
    units
}

/// Greedy longest-match segmentation of one word. Continuation pieces are
/// looked up with a "##" prefix. Returns `None` when any remainder fails to
/// match, in which case the caller emits a single [UNK].
fn segment_word(word: &str, vocab: &Vocabulary) -> Option<Vec<usize>> {
    let chars: Vec<char> = word.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut matched = None;
        for end in (start + 1..=chars.len()).rev() {
            let slice: String = chars[start..end].iter().collect();
            let candidate = if start == 0 {
                slice
            } else {
                format!("##{slice}")
            };
            if let Some(id) = vocab.id_of(&candidate) {
                matched = Some((id, end));
                break;
            }
        }
        let (id, end) = matched?;
        pieces.push(id);
        start = end;
    }
    Some(pieces)
}

/// Tokenize one text: lowercase, split on whitespace and punctuation,
/// segment each word greedily against the vocabulary, wrap in [CLS]…[SEP],
/// and truncate to `max_len` keeping [CLS] and restoring a final [SEP].
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenizedText> {
    if max_len < 3 {
        return Err(Error::Contract(format!(
            "tokenize: max_len must be at least 3, got {max_len}"
        )));
    }
    let mut ids = vec![CLS];
    let mut origins = vec![Origin::Special];
    for (unit, origin) in split_units(text) {
        match segment_word(&unit, vocab) {
            Some(pieces) => {
                for id in pieces {
                    ids.push(id);
                    origins.push(origin);
                }
            }
            None => {
                ids.push(UNK);
                origins.push(origin);
            }
        }
    }
    ids.push(SEP);
    origins.push(Origin::Special);

    let mut out = TokenizedText {
        mask: vec![true; ids.len()],
        clause_spans: Vec::new(),
        ids,
        origins,
    };
    truncate(&mut out, max_len);
    Ok(out)
}

/// Cut to `max_len` tokens, keeping [CLS] and restoring a final [SEP].
/// Clause spans, if present, are clipped to the surviving content region.
fn truncate(t: &mut TokenizedText, max_len: usize) {
    if t.ids.len() <= max_len {
        return;
    }
    t.ids.truncate(max_len - 1);
    t.origins.truncate(max_len - 1);
    t.ids.push(SEP);
    t.origins.push(Origin::Special);
    t.mask = vec![true; t.ids.len()];
    let content_end = t.ids.len() - 1; // position of the restored [SEP]
    t.clause_spans = t
        .clause_spans
        .iter()
        .filter_map(|&(s, e)| {
            let e = e.min(content_end);
            (s < e).then_some((s, e))
        })
        .collect();
}

/// Populate clause spans: a clause is a run of tokens ending at a
/// separator mark (`. , ; ? ! :`) or at end-of-text. A separator belongs to
/// the clause it closes. Runs holding no word token never form a clause of
/// their own; they stay attached to the neighbouring clause, and text with
/// no word tokens at all yields zero spans.
pub fn split_clauses(tokens: &TokenizedText, _original_text: &str) -> TokenizedText {
    let mut out = tokens.clone();
    out.clause_spans.clear();

    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut start: Option<usize> = None;
    let mut has_word = false;
    for (i, origin) in tokens.origins.iter().enumerate() {
        match origin {
            Origin::Special => continue,
            Origin::Word => {
                if start.is_none() {
                    start = Some(i);
                }
                has_word = true;
            }
            Origin::Punct(c) => {
                if start.is_none() {
                    start = Some(i);
                }
                if CLAUSE_SEPARATORS.contains(c) && has_word {
                    spans.push((start.take().unwrap(), i + 1));
                    has_word = false;
                }
            }
        }
    }
    if let Some(s) = start {
        let end = tokens
            .origins
            .iter()
            .rposition(|o| *o != Origin::Special)
            .map(|p| p + 1)
            .unwrap_or(s);
        if has_word {
            spans.push((s, end));
        } else if let Some(last) = spans.last_mut() {
            // Trailing punctuation joins the clause before it.
            last.1 = end;
        }
        // With no word anywhere, spans stays empty: the zero-clause case.
    }
    out.clause_spans = spans;
    out
}

/// Tokenize and populate clause spans in one call; the form consumed by the
/// classifier.
pub fn tokenize_with_clauses(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenizedText> {
    let tokens = tokenize(text, vocab, max_len)?;
    Ok(split_clauses(&tokens, text))
}

/// A batch of encoded texts, right-padded to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub clause_spans: Vec<Vec<(usize, usize)>>,
}

impl EncodedBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }
}

/// Pad a batch to its longest member (capped at `max_len`). Items longer
/// than the cap are truncated by the same rule as [`tokenize`], with clause
/// spans clipped to the surviving positions.
pub fn encode_batch(items: &[TokenizedText], max_len: usize) -> Result<EncodedBatch> {
    if items.is_empty() {
        return Err(Error::Contract("encode_batch: empty batch".into()));
    }
    if max_len < 3 {
        return Err(Error::Contract(format!(
            "encode_batch: max_len must be at least 3, got {max_len}"
        )));
    }
    let target = items
        .iter()
        .map(TokenizedText::len)
        .max()
        .unwrap()
        .min(max_len);

    let mut batch = EncodedBatch {
        ids: Vec::with_capacity(items.len()),
        mask: Vec::with_capacity(items.len()),
        clause_spans: Vec::with_capacity(items.len()),
    };
    for item in items {
        let mut t = item.clone();
        truncate(&mut t, target);
        let mut ids = t.ids;
        let mut mask = t.mask;
        while ids.len() < target {
            ids.push(PAD);
            mask.push(false);
        }
        batch.ids.push(ids);
        batch.mask.push(mask);
        batch.clause_spans.push(t.clause_spans);
    }
    Ok(batch)
}

/// Build a vocabulary from a corpus.
///
/// Counting is over lowercased, punctuation-split units. Units seen at
/// least `min_freq` times are admitted by descending frequency (ties broken
/// lexicographically) until `max_size` is reached; afterwards, for every
/// admitted word longer than four characters, its suffixes of length 2–4
/// are admitted as "##"-prefixed continuation pieces while capacity
/// remains.
pub fn build_vocab(corpus: &[String], max_size: usize, min_freq: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Vocab("cannot build a vocabulary from an empty corpus".into()));
    }
    if max_size < SPECIALS.len() {
        return Err(Error::Vocab(format!(
            "max_size must leave room for the {} special tokens, got {max_size}",
            SPECIALS.len()
        )));
    }
    if min_freq < 1 {
        return Err(Error::Vocab(format!("min_freq must be at least 1, got {min_freq}")));
    }

    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for (unit, _) in split_units(text) {
            *counts.entry(unit).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_freq)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut seen: HashMap<String, ()> = tokens.iter().map(|t| (t.clone(), ())).collect();
    let mut admitted_words = Vec::new();
    for (word, _) in ranked {
        if tokens.len() >= max_size {
            break;
        }
        if seen.insert(word.clone(), ()).is_none() {
            admitted_words.push(word.clone());
            tokens.push(word);
        }
    }
    // Continuation pieces: suffixes of length 2..=4 of long admitted words,
    // in admission order, shortest suffix first.
    'outer: for word in &admitted_words {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() <= 4 {
            continue;
        }
        for len in 2..=4usize {
            if tokens.len() >= max_size {
                break 'outer;
            }
            let suffix: String = chars[chars.len() - len..].iter().collect();
            let piece = format!("##{suffix}");
            if seen.insert(piece.clone(), ()).is_none() {
                tokens.push(piece);
            }
        }
    }
    Vocabulary::from_token_list(tokens)
}
