//! Seeded synthetic character-level corpora.
//!
//! Two grammars share one alphabet: scene descriptions for pretraining the
//! dense model and pick-and-place instructions for fine-tuning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz .,\n";

const COLORS: &[&str] = &[
    "red", "green", "blue", "yellow", "purple", "orange", "brown", "gray", "pink", "cyan",
];
const OBJECTS: &[&str] = &["block", "bowl", "zone", "cube", "cup", "plate"];
const RELATIONS: &[&str] = &[
    "left of",
    "right of",
    "behind",
    "in front of",
    "near",
    "far from",
    "next to",
];
const VERBS: &[&str] = &["pick", "grab", "take", "lift"];
const PLACES: &[&str] = &["put", "place", "set", "drop"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grammar {
    Scene,
    Instruction,
}

fn pick<'a>(rng: &mut Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.below(xs.len())]
}

fn sentence(grammar: Grammar, rng: &mut Rng) -> String {
    match grammar {
        Grammar::Scene => {
            let (c1, o1, r, c2, o2) = (
                pick(rng, COLORS),
                pick(rng, OBJECTS),
                pick(rng, RELATIONS),
                pick(rng, COLORS),
                pick(rng, OBJECTS),
            );
            if rng.below(3) == 0 {
                format!("there is a {c1} {o1}.\n")
            } else {
                format!("the {c1} {o1} is {r} the {c2} {o2}.\n")
            }
        }
        Grammar::Instruction => {
            let (v, c1, p) = (pick(rng, VERBS), pick(rng, COLORS), pick(rng, PLACES));
            let target = match rng.below(3) {
                0 => format!("in the {} zone", pick(rng, COLORS)),
                1 => format!("in the {} bowl", pick(rng, COLORS)),
                _ => format!("on the {} block", pick(rng, COLORS)),
            };
            format!("{v} the {c1} block, {p} it {target}.\n")
        }
    }
}

pub fn generate_text(grammar: Grammar, rng: &mut Rng, min_chars: usize) -> String {
    let mut s = String::with_capacity(min_chars + 64);
    while s.len() < min_chars {
        s.push_str(&sentence(grammar, rng));
    }
    s
}

pub fn encode(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| {
            ALPHABET.chars().position(|a| a == c).ok_or_else(|| {
                Error::invalid("encode", format!("character {c:?} outside the alphabet"))
            })
        })
        .collect()
}

pub fn decode(ids: &[usize]) -> String {
    let chars: Vec<char> = ALPHABET.chars().collect();
    ids.iter()
        .map(|&i| chars.get(i).copied().unwrap_or('?'))
        .collect()
}

pub fn vocab_size() -> usize {
    ALPHABET.chars().count()
}

/// Train and validation windows of `window_len + 1` ids each, cut from
/// independent text streams.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub grammar: Grammar,
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn generate(
        grammar: Grammar,
        seed: u64,
        n_train: usize,
        n_val: usize,
        window_len: usize,
    ) -> Result<Self> {
        if n_train == 0 || n_val == 0 || window_len == 0 {
            return Err(Error::Config("corpus sizes must be positive".into()));
        }
        let base = Rng::new(seed);
        let cut = |stream: u64, n: usize| -> Result<Vec<Vec<usize>>> {
            let w = window_len + 1;
            let text = generate_text(grammar, &mut base.fork(stream), n * w);
            let ids = encode(&text)?;
            Ok(ids.chunks_exact(w).take(n).map(<[usize]>::to_vec).collect())
        };
        Ok(Corpus {
            grammar,
            train: cut(1, n_train)?,
            val: cut(2, n_val)?,
        })
    }
}
