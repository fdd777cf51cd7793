//! WordPiece vocabulary training and greedy longest-match segmentation.
//!
//! Text is pre-tokenized on whitespace, then every character that is neither
//! alphanumeric nor whitespace (ASCII punctuation, `→`, `∀`, `⊢`, `_`, ...)
//! becomes a one-character word. Special tokens are matched verbatim before
//! pre-tokenization and are never produced by segmentation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const VAR: &str = "<VAR>";
pub const GOAL: &str = "<GOAL>";

/// Special tokens in id order; they always occupy ids `0..7`.
pub const SPECIAL_TOKENS: [&str; 7] = [PAD, UNK, CLS, SEP, MASK, VAR, GOAL];

const MAX_WORD_CHARS: usize = 100;
const VOCAB_MAGIC: &str = "premsel-vocab";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
    pub var: u32,
    pub goal: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    pub min_frequency: u64,
    pub continuation_prefix: String,
    pub lowercase: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            vocab_size: 4096,
            min_frequency: 2,
            continuation_prefix: "##".into(),
            lowercase: false,
        }
    }
}

impl TokenizerConfig {
    /// BERT-base vocabulary size.
    pub fn paper() -> Self {
        TokenizerConfig {
            vocab_size: 30_522,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= SPECIAL_TOKENS.len() {
            return Err(Error::Config(format!(
                "vocab_size must exceed the {} special tokens",
                SPECIAL_TOKENS.len()
            )));
        }
        if self.continuation_prefix.is_empty() || self.continuation_prefix.chars().any(char::is_whitespace) {
            return Err(Error::Config("continuation_prefix must be non-empty without whitespace".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
    special: SpecialIds,
    config: TokenizerConfig,
}

fn is_split_char(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Whitespace split, then punctuation and symbols as single-character words.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = None;
        for (i, c) in chunk.char_indices() {
            if is_split_char(c) {
                if let Some(s) = start.take() {
                    words.push(&chunk[s..i]);
                }
                words.push(&chunk[i..i + c.len_utf8()]);
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            words.push(&chunk[s..]);
        }
    }
    words
}

enum Segment<'a> {
    Special(usize),
    Text(&'a str),
}

/// Splits `text` around verbatim occurrences of special tokens.
fn split_specials(text: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    loop {
        let next = SPECIAL_TOKENS
            .iter()
            .enumerate()
            .filter_map(|(k, tok)| rest.find(tok).map(|pos| (pos, k)))
            .min();
        match next {
            Some((pos, k)) => {
                if pos > 0 {
                    out.push(Segment::Text(&rest[..pos]));
                }
                out.push(Segment::Special(k));
                rest = &rest[pos + SPECIAL_TOKENS[k].len()..];
            }
            None => {
                if !rest.is_empty() {
                    out.push(Segment::Text(rest));
                }
                return out;
            }
        }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from tokens in id order. The special tokens must
    /// each appear exactly once.
    pub fn from_tokens(tokens: Vec<String>, config: TokenizerConfig) -> Result<Self> {
        config.validate()?;
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary token {t:?} at id {i}")));
            }
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let id = |s: &str| {
            token_to_id
                .get(s)
                .copied()
                .ok_or_else(|| Error::Format(format!("vocabulary lacks special token {s}")))
        };
        let special = SpecialIds {
            pad: id(PAD)?,
            unk: id(UNK)?,
            cls: id(CLS)?,
            sep: id(SEP)?,
            mask: id(MASK)?,
            var: id(VAR)?,
            goal: id(GOAL)?,
        };
        Ok(Vocabulary {
            tokens,
            token_to_id,
            special,
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIAL_TOKENS.len() && self.tokens[id as usize] == SPECIAL_TOKENS[id as usize]
    }

    fn normalize<'a>(&self, text: &'a str) -> std::borrow::Cow<'a, str> {
        if self.config.lowercase {
            std::borrow::Cow::Owned(text.to_lowercase())
        } else {
            std::borrow::Cow::Borrowed(text)
        }
    }

    /// Greedy longest-match-first segmentation of one pre-tokenized word.
    fn segment_word(&self, word: &str, out: &mut Vec<u32>) {
        if word.chars().count() > MAX_WORD_CHARS {
            out.push(self.special.unk);
            return;
        }
        let prefix = &self.config.continuation_prefix;
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut candidate = String::new();
        while start < word.len() {
            let mut end = word.len();
            let mut found = None;
            while end > start {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(prefix);
                }
                candidate.push_str(&word[start..end]);
                if let Some(&id) = self.token_to_id.get(candidate.as_str()) {
                    if !self.is_special(id) {
                        found = Some(id);
                        break;
                    }
                }
                end = word[..end].char_indices().next_back().map(|(i, _)| i).unwrap_or(start);
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.special.unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Encodes `text` without adding `[CLS]`/`[SEP]`, keeping the first
    /// `max_len` ids.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids = Vec::new();
        for seg in split_specials(text) {
            if ids.len() >= max_len {
                break;
            }
            match seg {
                Segment::Special(k) => ids.push(k as u32),
                Segment::Text(t) => {
                    let t = self.normalize(t);
                    for word in pre_tokenize(&t) {
                        self.segment_word(word, &mut ids);
                        if ids.len() >= max_len {
                            break;
                        }
                    }
                }
            }
        }
        ids.truncate(max_len);
        ids
    }

    /// Detokenizes: continuation pieces glue to the previous token, all other
    /// tokens are space-separated.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let prefix = &self.config.continuation_prefix;
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let tok = self.token(id).ok_or(Error::UnknownTokenId(id))?;
            match tok.strip_prefix(prefix.as_str()) {
                Some(rest) if i > 0 && !rest.is_empty() && !self.is_special(id) => out.push_str(rest),
                _ => {
                    if i > 0 {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        Ok(out)
    }

    /// Serializes to the line-oriented vocabulary file format: `# key=value`
    /// header lines, then one token per line with line index = id.
    pub fn to_file_string(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "# {VOCAB_MAGIC} format_version={}", crate::artifact::FORMAT_VERSION);
        let _ = writeln!(s, "# vocab_size={}", c.vocab_size);
        let _ = writeln!(s, "# min_frequency={}", c.min_frequency);
        let _ = writeln!(s, "# continuation_prefix={}", c.continuation_prefix);
        let _ = writeln!(s, "# lowercase={}", c.lowercase);
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut config = TokenizerConfig::default();
        let mut tokens = Vec::new();
        let mut in_header = true;
        for line in text.lines() {
            if in_header {
                if let Some(body) = line.strip_prefix("# ") {
                    if body.starts_with(VOCAB_MAGIC) {
                        continue;
                    }
                    let (k, v) = body
                        .split_once('=')
                        .ok_or_else(|| Error::Format(format!("bad vocabulary header line {line:?}")))?;
                    let bad = |_| Error::Format(format!("bad value in header line {line:?}"));
                    match k {
                        "vocab_size" => config.vocab_size = v.parse().map_err(bad)?,
                        "min_frequency" => config.min_frequency = v.parse().map_err(bad)?,
                        "continuation_prefix" => config.continuation_prefix = v.to_string(),
                        "lowercase" => config.lowercase = v.parse().map_err(|_| Error::Format(format!("bad value in header line {line:?}")))?,
                        _ => {}
                    }
                    continue;
                }
                in_header = false;
            }
            tokens.push(line.to_string());
        }
        Self::from_tokens(tokens, config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }

    /// Like [`Vocabulary::save`] with an extra `# run_config=<json>` header
    /// line, which [`Vocabulary::load`] skips.
    pub fn save_with_run_config(&self, path: impl AsRef<Path>, run_config: &serde_json::Value) -> Result<()> {
        let path = path.as_ref();
        let body = self.to_file_string();
        let (magic, rest) = body.split_once('\n').unwrap_or((&body, ""));
        let text = format!("{magic}\n# run_config={}\n{rest}", serde_json::to_string(run_config)?);
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Trains a WordPiece vocabulary.
///
/// Starting from the character alphabet (word-initial characters bare,
/// others carrying the continuation prefix), the pair with the highest
/// `count(ab) / (count(a) * count(b))` is merged until the vocabulary is
/// full or no pair reaches `min_frequency`. Ties go to the more frequent
/// pair, then to the lexicographically smaller pair.
pub fn train_tokenizer<S: AsRef<str>>(corpus_texts: &[S], config: &TokenizerConfig) -> Result<Vocabulary> {
    config.validate()?;
    if corpus_texts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let prefix = config.continuation_prefix.as_str();

    let mut word_counts: HashMap<String, u64> = HashMap::new();
    for text in corpus_texts {
        for seg in split_specials(text.as_ref()) {
            if let Segment::Text(t) = seg {
                let t = if config.lowercase { t.to_lowercase() } else { t.to_string() };
                for w in pre_tokenize(&t) {
                    if w.chars().count() <= MAX_WORD_CHARS {
                        *word_counts.entry(w.to_string()).or_default() += 1;
                    }
                }
            }
        }
    }
    if word_counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut words: Vec<(String, u64)> = word_counts.into_iter().collect();
    words.sort_unstable();

    let symbolize = |w: &str| -> Vec<String> {
        w.chars()
            .enumerate()
            .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{prefix}{c}") })
            .collect()
    };

    let mut alphabet: BTreeMap<String, u64> = BTreeMap::new();
    for (w, f) in &words {
        for s in symbolize(w) {
            *alphabet.entry(s).or_default() += f;
        }
    }
    let mut alphabet: Vec<(String, u64)> = alphabet.into_iter().collect();
    alphabet.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    alphabet.truncate(config.vocab_size - SPECIAL_TOKENS.len());

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    for (s, _) in alphabet {
        if !index.contains_key(&s) {
            index.insert(s.clone(), tokens.len() as u32);
            tokens.push(s);
        }
    }

    // Words whose characters did not all make the alphabet cannot be
    // represented and are left out of merge statistics.
    let mut merge_words: Vec<Vec<u32>> = Vec::new();
    let mut freqs: Vec<i64> = Vec::new();
    for (w, f) in &words {
        let syms: Option<Vec<u32>> = symbolize(w).iter().map(|s| index.get(s).copied()).collect();
        if let Some(syms) = syms {
            merge_words.push(syms);
            freqs.push(*f as i64);
        }
    }

    let mut stats = PairStats::new(&merge_words, &freqs, tokens.len());
    let min_freq = config.min_frequency.max(1) as i64;

    while tokens.len() < config.vocab_size {
        let best = stats
            .pairs
            .iter()
            .filter(|(_, &c)| c >= min_freq)
            .map(|(&(a, b), &c)| {
                let denom = stats.symbols[a as usize] as f64 * stats.symbols[b as usize] as f64;
                ((a, b), c, c as f64 / denom)
            })
            .max_by(|x, y| {
                x.2.total_cmp(&y.2)
                    .then(x.1.cmp(&y.1))
                    .then_with(|| (&tokens[y.0 .0 as usize], &tokens[y.0 .1 as usize]).cmp(&(&tokens[x.0 .0 as usize], &tokens[x.0 .1 as usize])))
            });
        let Some(((a, b), _, _)) = best else { break };

        let right = &tokens[b as usize];
        let merged = format!("{}{}", tokens[a as usize], right.strip_prefix(prefix).unwrap_or(right));
        let id = match index.get(&merged) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32;
                index.insert(merged.clone(), id);
                tokens.push(merged);
                stats.symbols.push(0);
                id
            }
        };
        stats.merge(&mut merge_words, &freqs, (a, b), id);
    }

    Vocabulary::from_tokens(tokens, config.clone())
}

/// Incrementally maintained pair and symbol frequencies.
struct PairStats {
    pairs: HashMap<(u32, u32), i64>,
    where_: HashMap<(u32, u32), HashSet<usize>>,
    symbols: Vec<i64>,
}

impl PairStats {
    fn new(words: &[Vec<u32>], freqs: &[i64], n_symbols: usize) -> Self {
        let mut s = PairStats {
            pairs: HashMap::new(),
            where_: HashMap::new(),
            symbols: vec![0; n_symbols],
        };
        for (w, word) in words.iter().enumerate() {
            s.account(word, w, freqs[w]);
        }
        s
    }

    fn account(&mut self, word: &[u32], w: usize, f: i64) {
        for &sym in word {
            self.symbols[sym as usize] += f;
        }
        for p in word.windows(2) {
            let key = (p[0], p[1]);
            *self.pairs.entry(key).or_default() += f;
            if f > 0 {
                self.where_.entry(key).or_default().insert(w);
            }
        }
    }

    fn merge(&mut self, words: &mut [Vec<u32>], freqs: &[i64], pair: (u32, u32), new_id: u32) {
        let Some(affected) = self.where_.remove(&pair) else { return };
        let mut affected: Vec<usize> = affected.into_iter().collect();
        affected.sort_unstable();
        for w in affected {
            let old = std::mem::take(&mut words[w]);
            self.account(&old, w, -freqs[w]);
            for p in old.windows(2) {
                if let Some(set) = self.where_.get_mut(&(p[0], p[1])) {
                    set.remove(&w);
                }
            }
            let mut new = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && (old[i], old[i + 1]) == pair {
                    new.push(new_id);
                    i += 2;
                } else {
                    new.push(old[i]);
                    i += 1;
                }
            }
            self.account(&new, w, freqs[w]);
            words[w] = new;
        }
        self.pairs.retain(|_, c| *c > 0);
        self.where_.retain(|_, s| !s.is_empty());
    }
}
