//! Caption tokenization and vocabulary.
//!
//! [`tokenize`] lowercases its input and then applies the Penn Treebank
//! rewrite rules below, in order, before splitting on whitespace. The rule
//! table is frozen; `tests/fixtures/treebank_golden.tsv` pins its output.
//!
//! | stage           | pattern                                        | replacement  |
//! |-----------------|------------------------------------------------|--------------|
//! | starting quotes | `^"`                                           | ` `` `       |
//! |                 | `(``)`                                         | ` $1 `       |
//! |                 | `([ (\[{<])("\|'')`                            | `$1 `` `     |
//! | punctuation     | `([:,])([^\d])`                                | ` $1 $2`     |
//! |                 | `([:,])$`                                      | ` $1 `       |
//! |                 | `\.\.\.`                                       | ` ... `      |
//! |                 | `[;@#$%&]`                                     | ` $0 `       |
//! |                 | `([^.])(\.)([\])}>"']*)\s*$`                   | `$1 $2$3 `   |
//! |                 | `[?!]`                                         | ` $0 `       |
//! |                 | `([^'])' `                                     | `$1 ' `      |
//! | brackets        | `[\]\[(){}<>]`                                 | ` $0 `       |
//! | dashes          | `--`                                           | ` -- `       |
//! | (pad)           | text is wrapped in single spaces               |              |
//! | ending quotes   | `''` and `"`                                   | ` '' `       |
//! |                 | `([^' ])('[sS]\|'[mM]\|'[dD]\|') `             | `$1 $2 `     |
//! |                 | `([^' ])('ll\|'re\|'ve\|n't) ` (any case)      | `$1 $2 `     |
//! | contractions    | `cannot d'ye gimme gonna gotta lemme more'n`   | split in two |
//! |                 | `wanna` followed by whitespace                 | split in two |
//! |                 | ` 'tis`, ` 'twas`                              | split in two |

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<PAD>", "<SOS>", "<EOS>", "<UNK>"];

struct Rule {
    re: Regex,
    rep: &'static str,
}

fn rules() -> &'static [Rule] {
    static RULES: OnceLock<Vec<Rule>> = OnceLock::new();
    RULES.get_or_init(|| {
        let table: &[(&str, &str)] = &[
            // starting quotes
            (r#"^""#, "``"),
            (r"(``)", " $1 "),
            (r#"([ (\[{<])("|'')"#, "$1 `` "),
            // punctuation
            (r"([:,])([^\d])", " $1 $2"),
            (r"([:,])$", " $1 "),
            (r"\.\.\.", " ... "),
            (r"[;@#$%&]", " $0 "),
            (r#"([^.])(\.)([\])}>"']*)\s*$"#, "$1 $2$3 "),
            (r"[?!]", " $0 "),
            (r"([^'])' ", "$1 ' "),
            // brackets
            (r"[\]\[(){}<>]", " $0 "),
            // dashes
            (r"--", " -- "),
        ];
        table
            .iter()
            .map(|&(p, rep)| Rule {
                re: Regex::new(p).expect("static tokenizer rule"),
                rep,
            })
            .collect()
    })
}

fn ending_rules() -> &'static [Rule] {
    static RULES: OnceLock<Vec<Rule>> = OnceLock::new();
    RULES.get_or_init(|| {
        let table: &[(&str, &str)] = &[
            (r"''", " '' "),
            (r#"""#, " '' "),
            (r"([^' ])('[sS]|'[mM]|'[dD]|') ", "$1 $2 "),
            (r"([^' ])('ll|'LL|'re|'RE|'ve|'VE|n't|N'T) ", "$1 $2 "),
            (r"(?i)\b(can)(not)\b", " $1 $2 "),
            (r"(?i)\b(d)('ye)\b", " $1 $2 "),
            (r"(?i)\b(gim)(me)\b", " $1 $2 "),
            (r"(?i)\b(gon)(na)\b", " $1 $2 "),
            (r"(?i)\b(got)(ta)\b", " $1 $2 "),
            (r"(?i)\b(lem)(me)\b", " $1 $2 "),
            (r"(?i)\b(more)('n)\b", " $1 $2 "),
            (r"(?i)\b(wan)(na)(\s)", " $1 $2 $3"),
            (r"(?i) ('t)(is)\b", " $1 $2 "),
            (r"(?i) ('t)(was)\b", " $1 $2 "),
        ];
        table
            .iter()
            .map(|&(p, rep)| Rule {
                re: Regex::new(p).expect("static tokenizer rule"),
                rep,
            })
            .collect()
    })
}

/// Lowercase and split a sentence into Treebank tokens.
pub fn tokenize(sentence: &str) -> Vec<String> {
    let mut text = sentence.to_lowercase();
    for rule in rules() {
        text = rule.re.replace_all(&text, rule.rep).into_owned();
    }
    text = format!(" {text} ");
    for rule in ending_rules() {
        text = rule.re.replace_all(&text, rule.rep).into_owned();
    }
    text.split_whitespace().map(str::to_owned).collect()
}

/// Token ↔ id map. Ids `0..4` are `<PAD>, <SOS>, <EOS>, <UNK>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Build from already-tokenized captions. Tokens seen at least
    /// `min_count` times get ids ordered by descending frequency, then
    /// lexicographically.
    pub fn build<'a, I, S>(captions: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for caption in captions {
            for tok in caption {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && !RESERVED_TOKENS.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_owned()))
    }

    /// Build from raw sentences, tokenizing each.
    pub fn build_from_sentences<S: AsRef<str>>(sentences: &[S], min_count: usize) -> Self {
        let tokenized: Vec<Vec<String>> = sentences.iter().map(|s| tokenize(s.as_ref())).collect();
        Self::build(tokenized.iter().map(Vec::as_slice), min_count)
    }

    /// Non-reserved tokens in id order (first gets id 4).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    /// Token ids of `tokens` followed by `<EOS>`, truncated so the result
    /// (including the final `<EOS>`) is at most `max_len` long.
    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> Vec<usize> {
        let keep = max_len.saturating_sub(1);
        let mut ids: Vec<usize> = tokens.iter().take(keep).map(|t| self.id(t.as_ref())).collect();
        if max_len > 0 {
            ids.push(EOS);
        }
        ids
    }

    pub fn encode_caption(&self, sentence: &str, max_len: usize) -> Vec<usize> {
        self.encode_tokens(&tokenize(sentence), max_len)
    }

    /// Join tokens with single spaces, dropping reserved ids. In debug mode
    /// `<UNK>` is kept as a literal token.
    pub fn decode_caption(&self, ids: &[usize], debug: bool) -> String {
        ids.iter()
            .filter(|&&id| id >= NUM_RESERVED || (debug && id == UNK))
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One non-reserved token per line; line `k` holds id `k + 4`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut body = self.words().join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&body).map_err(|reason| Error::ingestion(path.display().to_string(), reason))
    }

    pub fn parse(body: &str) -> std::result::Result<Self, String> {
        let tokens: Vec<String> = body.lines().map(str::to_owned).collect();
        let mut seen = std::collections::BTreeSet::new();
        for (line, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(format!("line {}: invalid token {t:?}", line + 1));
            }
            if RESERVED_TOKENS.contains(&t.as_str()) || !seen.insert(t) {
                return Err(format!("line {}: duplicate or reserved token {t:?}", line + 1));
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(toks("A man is playing guitar."), ["a", "man", "is", "playing", "guitar", "."]);
        assert_eq!(toks("don't"), ["do", "n't"]);
        assert!(toks("").is_empty());
        assert_eq!(toks("a well-known man"), ["a", "well-known", "man"]);
    }

    #[test]
    fn vocab_min_count() {
        let caps = [toks("a a b")];
        let v = Vocabulary::build(caps.iter().map(Vec::as_slice), 2);
        assert_eq!(v.words(), ["a"]);
        assert_eq!(v.len(), NUM_RESERVED + 1);
        assert_eq!(v.id("b"), UNK);

        let v = Vocabulary::build(caps.iter().map(Vec::as_slice), 1);
        assert_eq!(v.words(), ["a", "b"]);
    }

    #[test]
    fn vocab_order_is_frequency_then_lexicographic() {
        let caps = [toks("b c a c b d"), toks("c")];
        let v = Vocabulary::build(caps.iter().map(Vec::as_slice), 1);
        assert_eq!(v.words(), ["c", "b", "a", "d"]);
        let again = Vocabulary::build(caps.iter().map(Vec::as_slice), 1);
        assert_eq!(v, again);
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::build_from_sentences(&["a red square moves left"], 1);
        let ids = v.encode_caption("a red square moves left", 30);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(v.decode_caption(&ids, false), "a red square moves left");

        let ids = v.encode_caption("a red square moves left", 3);
        assert_eq!(ids.len(), 3);
        assert_eq!(ids[2], EOS);
        assert_eq!(v.decode_caption(&ids, false), "a red");

        let ids = v.encode_caption("a purple square", 30);
        assert_eq!(ids[1], UNK);
        assert_eq!(v.decode_caption(&ids, true), "a <UNK> square");
        assert_eq!(v.decode_caption(&ids, false), "a square");
    }

    #[test]
    fn vocab_file_roundtrip() {
        let v = Vocabulary::build_from_sentences(&["the cat sat", "the dog ran ."], 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.write(&path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert_eq!(body.lines().next(), Some("the"));
        assert_eq!(Vocabulary::read(&path).unwrap(), v);
        assert!(Vocabulary::parse("a\na\n").is_err());
        assert!(Vocabulary::parse("<EOS>\n").is_err());
    }
}
