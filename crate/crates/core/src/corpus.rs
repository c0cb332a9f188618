//! Narrative corpora: sentence segmentation, tokenization and the JSONL
//! on-disk format (`{"id": ..., "sentences": [...]}` per line).

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Abbreviations that never end a sentence. Matched case-insensitively
/// against the whitespace-delimited word carrying the period.
pub const ABBREVIATIONS: &[&str] = &[
    "mr.", "mrs.", "ms.", "dr.", "prof.", "sr.", "jr.", "st.", "mt.", "vs.", "etc.", "e.g.",
    "i.e.", "u.s.", "u.k.", "u.n.", "a.m.", "p.m.", "no.", "inc.", "ltd.", "co.", "corp.",
    "jan.", "feb.", "mar.", "apr.", "jun.", "jul.", "aug.", "sep.", "sept.", "oct.", "nov.",
    "dec.", "gen.", "col.", "capt.", "lt.", "sgt.", "rev.", "fig.", "approx.", "dept.",
];

fn is_abbreviation(word: &str) -> bool {
    let lower = word.to_lowercase();
    let trimmed = lower.trim_start_matches(|c: char| !c.is_alphanumeric());
    ABBREVIATIONS.contains(&trimmed)
}

/// Splits raw prose into sentences.
///
/// A boundary is a `.`, `!` or `?` followed by whitespace and then an
/// uppercase letter or a digit, unless the word carrying the terminal
/// period is a known abbreviation.
pub fn segment_text(raw: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = raw.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let (byte, c) = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            let has_space = j > i + 1;
            let next_ok = j < chars.len() && (chars[j].1.is_uppercase() || chars[j].1.is_numeric());
            if has_space && next_ok {
                let end = byte + c.len_utf8();
                let word_start = raw[..end]
                    .rfind(char::is_whitespace)
                    .map(|p| p + raw[p..].chars().next().map_or(1, char::len_utf8))
                    .unwrap_or(0)
                    .max(start);
                let word = &raw[word_start..end];
                if !(c == '.' && is_abbreviation(word)) {
                    let piece = raw[start..end].trim();
                    if !piece.is_empty() {
                        out.push(piece.to_string());
                    }
                    start = chars[j].0;
                    i = j;
                    continue;
                }
            }
        }
        i += 1;
    }
    let tail = raw[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

fn is_combining_mark(c: char) -> bool {
    matches!(c as u32,
        0x0300..=0x036F | 0x1AB0..=0x1AFF | 0x1DC0..=0x1DFF | 0x20D0..=0x20FF | 0xFE20..=0xFE2F)
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || is_combining_mark(c)
}

/// Lowercased word/punctuation tokenizer.
///
/// Runs of letters and digits form words. Periods that sit between word
/// characters stay inside the word ("3.14", "u.s"), and a trailing period is
/// absorbed when the word already has an inner period or is a listed
/// abbreviation ("u.s.", "dr."). Every other non-space character is a
/// token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0usize;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if !is_word_char(c) {
            tokens.push(c.to_lowercase().collect());
            i += 1;
            continue;
        }
        let mut word = String::new();
        let mut inner_period = false;
        while i < chars.len() {
            let c = chars[i];
            if is_word_char(c) {
                word.push(c);
                i += 1;
            } else if c == '.' && i + 1 < chars.len() && is_word_char(chars[i + 1]) {
                word.push('.');
                inner_period = true;
                i += 1;
            } else {
                break;
            }
        }
        if i < chars.len() && chars[i] == '.' {
            let candidate = format!("{word}.");
            if inner_period || is_abbreviation(&candidate) {
                word = candidate;
                i += 1;
            }
        }
        tokens.push(word.to_lowercase());
    }
    tokens
}

/// One sentence with its cached token list.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sentence {
    pub text: String,
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self { text, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl Serialize for Sentence {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for Sentence {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d).map(Sentence::new)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Narrative {
    pub id: String,
    pub sentences: Vec<Sentence>,
}

impl Narrative {
    /// Builds a narrative, rejecting empty narratives and sentences that
    /// tokenize to nothing.
    pub fn new(id: impl Into<String>, sentences: Vec<Sentence>) -> Result<Self> {
        let id = id.into();
        if sentences.is_empty() {
            return Err(Error::invalid(format!("narrative {id:?} has no sentences")));
        }
        if let Some(pos) = sentences.iter().position(Sentence::is_empty) {
            return Err(Error::invalid(format!(
                "narrative {id:?}: sentence {} has no tokens",
                pos + 1
            )));
        }
        Ok(Self { id, sentences })
    }

    pub fn from_texts<S: AsRef<str>>(id: impl Into<String>, texts: &[S]) -> Result<Self> {
        Self::new(id, texts.iter().map(|t| Sentence::new(t.as_ref())).collect())
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Streaming JSONL corpus reader. Yields narratives in file order.
pub struct CorpusReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    seen: HashSet<String>,
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R) -> Self {
        Self { lines: reader.lines(), line_no: 0, seen: HashSet::new() }
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<Narrative>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let line_no = self.line_no;
            let parsed = serde_json::from_str::<Narrative>(&line)
                .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })
                .and_then(|n| {
                    Narrative::new(n.id, n.sentences)
                        .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })
                })
                .and_then(|n| {
                    if self.seen.insert(n.id.clone()) {
                        Ok(n)
                    } else {
                        Err(Error::DuplicateId { id: n.id, line: line_no })
                    }
                });
            return Some(parsed);
        }
    }
}

/// Opens a corpus file as a stream of narratives.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<CorpusReader<BufReader<File>>> {
    let file = File::open(path.as_ref())?;
    Ok(CorpusReader::new(BufReader::new(file)))
}

/// Reads the whole corpus, failing on the first bad line.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Narrative>> {
    load_corpus(path)?.collect()
}

pub fn write_corpus<W: Write>(mut out: W, corpus: &[Narrative]) -> Result<()> {
    for n in corpus {
        serde_json::to_writer(&mut out, n)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Narrative]) -> Result<()> {
    let file = File::create(path.as_ref())?;
    write_corpus(BufWriter::new(file), corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn collapse(s: &str) -> String {
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn segments_simple_sentences() {
        assert_eq!(segment_text("It rained. We left."), vec!["It rained.", "We left."]);
        assert_eq!(segment_text("Hello!"), vec!["Hello!"]);
        assert!(segment_text("").is_empty());
        assert!(segment_text("   \n ").is_empty());
    }

    #[test]
    fn abbreviations_suppress_splits() {
        assert_eq!(segment_text("Dr. Lee arrived. He sat."), vec!["Dr. Lee arrived.", "He sat."]);
        assert_eq!(
            segment_text("She moved to the U.S. Then she worked."),
            vec!["She moved to the U.S. Then she worked."]
        );
    }

    #[test]
    fn split_requires_uppercase_or_digit() {
        assert_eq!(segment_text("wait... then we went."), vec!["wait... then we went."]);
        assert_eq!(segment_text("Go? 3 people left."), vec!["Go?", "3 people left."]);
        assert_eq!(segment_text("Stop!Now."), vec!["Stop!Now."]);
    }

    #[test]
    fn tokenizes_words_and_punctuation() {
        assert_eq!(tokenize("We left."), vec!["we", "left", "."]);
        assert_eq!(tokenize("U.S.-based"), vec!["u.s.", "-", "based"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Dr. Lee paid $3.50!"), vec!["dr.", "lee", "paid", "$", "3.50", "!"]);
        assert_eq!(tokenize("don't"), vec!["don", "'", "t"]);
    }

    #[test]
    fn reader_reports_bad_lines() {
        let data = "{\"id\":\"a\",\"sentences\":[\"One.\"]}\nnot json\n";
        let items: Vec<_> = CorpusReader::new(data.as_bytes()).collect();
        assert!(items[0].is_ok());
        match &items[1] {
            Err(Error::Parse { line, .. }) => assert_eq!(*line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reader_rejects_duplicate_ids_and_empty_sentences() {
        let data = "{\"id\":\"a\",\"sentences\":[\"One.\"]}\n{\"id\":\"a\",\"sentences\":[\"Two.\"]}\n";
        let items: Vec<_> = CorpusReader::new(data.as_bytes()).collect();
        assert!(matches!(items[1], Err(Error::DuplicateId { line: 2, .. })));

        let data = "{\"id\":\"b\",\"sentences\":[\"  \"]}\n";
        let items: Vec<_> = CorpusReader::new(data.as_bytes()).collect();
        assert!(matches!(items[0], Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn two_line_file_loads_in_order() {
        let data = "{\"id\":\"x\",\"sentences\":[\"A.\",\"B.\"]}\n{\"id\":\"y\",\"sentences\":[\"C.\"]}\n";
        let corpus: Vec<_> = CorpusReader::new(data.as_bytes()).collect::<Result<_>>().unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus[0].id, "x");
        assert_eq!(corpus[1].sentences[0].text, "C.");
        let mut buf = Vec::new();
        write_corpus(&mut buf, &corpus).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), data);
    }

    fn prose() -> impl Strategy<Value = String> {
        let word = prop::sample::select(vec![
            "It", "rained", "we", "Left", "Dr.", "U.S.", "3", "é", "Über", "naïve", "ok",
            "mr.", "e.g.", "x.y", "don't", "A", "Zoë",
        ]);
        let punct = prop::sample::select(vec!["", "", "", ".", "!", "?", ",", "...", ";", "-"]);
        let space = prop::sample::select(vec![" ", "  ", "\n", "\t "]);
        prop::collection::vec((word, punct, space), 0..30).prop_map(|parts| {
            parts.into_iter().map(|(w, p, s)| format!("{w}{p}{s}")).collect::<String>()
        })
    }

    proptest! {
        #[test]
        fn segmentation_is_total(raw in prose()) {
            let joined = segment_text(&raw).join(" ");
            prop_assert_eq!(collapse(&joined), collapse(&raw));
        }

        #[test]
        fn tokenize_is_idempotent_on_joins(raw in prose()) {
            let tokens = tokenize(&raw);
            prop_assert_eq!(tokenize(&tokens.join(" ")), tokens);
        }

        #[test]
        fn tokenize_is_idempotent_on_arbitrary_text(raw in "\\PC{0,40}") {
            let tokens = tokenize(&raw);
            prop_assert_eq!(tokenize(&tokens.join(" ")), tokens);
        }
    }
}
