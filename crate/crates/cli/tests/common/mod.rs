#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use rand::seq::IndexedRandom;
use rand::Rng as _;

use incoforge_core::seed::rng_for;
use incoforge_core::Narrative;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_incoforge")
}

pub fn incoforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env_remove(incoforge_cli::CONFIG_ENV)
        .output()
        .expect("spawn incoforge")
}

pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = incoforge(dir, args);
    assert!(
        out.status.success(),
        "incoforge {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SYLLABLES: [&str; 16] =
    ["ka", "lo", "mi", "ru", "sen", "ta", "vo", "zi", "pe", "nu", "dar", "gi", "ho", "bel", "fa", "quo"];

/// Capitalized pseudo-word `i`; distinct for `i < 16^3`.
pub fn name(i: usize) -> String {
    let w: String = [i % 16, (i / 16) % 16, (i / 256) % 16].iter().map(|&s| SYLLABLES[s]).collect();
    let mut c = w.chars();
    let first = c.next().unwrap().to_ascii_uppercase();
    std::iter::once(first).chain(c).collect()
}

fn word(prefix: &str, i: usize) -> String {
    format!("{prefix}{}", name(i).to_lowercase())
}

/// Story-like narratives with a learnable structure. Narrative `i` has its
/// own protagonist and one of `topics` topic words; sentence `j` adds a
/// position word shared by every narrative and a random adverb. The
/// original text at a position follows from its context up to the adverb,
/// and a sentence from another narrative names someone else.
pub fn story_corpus(n: usize, len: usize, topics: usize, seed: u64) -> Vec<Narrative> {
    let mut rng = rng_for(seed, "stories");
    let adverbs: Vec<String> = (0..40).map(|i| word("ly", i)).collect();
    (0..n)
        .map(|i| {
            let who = name(i + 7);
            let topic = word("t", rng.random_range(0..topics));
            let texts: Vec<String> = (0..len)
                .map(|j| {
                    let adv = adverbs.choose(&mut rng).unwrap();
                    format!("{who} {} the {topic} {adv}.", word("p", j))
                })
                .collect();
            Narrative::from_texts(format!("s{i:05}"), &texts).unwrap()
        })
        .collect()
}

/// Long documents built from the same plots, one plot per run of `len`
/// sentences, for window pre-training.
pub fn document_corpus(n_sentences: usize, doc_len: usize, len: usize, topics: usize, seed: u64) -> Vec<Narrative> {
    let per_doc = doc_len / len;
    let n_docs = n_sentences.div_ceil(per_doc * len);
    let stories = story_corpus(n_docs * per_doc, len, topics, seed);
    stories
        .chunks(per_doc)
        .enumerate()
        .map(|(d, chunk)| {
            let sentences = chunk.iter().flat_map(|s| s.sentences.clone()).collect();
            Narrative::new(format!("d{d:04}"), sentences).unwrap()
        })
        .collect()
}
