//! Word-level tokenizer and prompt sets.

use super::data::{class_name, NUM_CLASSES};
use crate::rng::Prng;

pub const PAD: u32 = 0;
pub const END: u32 = 1;
pub const UNK: u32 = 2;
pub const MAX_LEN: usize = 16;

const WORDS: [&str; 61] = [
    // caption core
    "a", "an", "the", "photo", "picture", "image", "drawing", "rendering", "of", "this", "is",
    "there", "in", "on", "center", "close", "up", "blurry", "bright", "cropped", "small",
    "large", "textured", "background", "single", "toy", "simple", "colored", "shape", "object",
    "with", "one", "dark", "plain", "nice", "clean",
    // classes
    "red", "green", "blue", "yellow", "circle", "square", "triangle", "cross",
    // distractors
    "purple", "orange", "white", "black", "star", "heart", "ring", "hexagon",
    // filler
    "and", "some", "big", "little", "round", "flat", "pixel", "art", "tiny",
];

const DISTRACTOR_COLORS: [&str; 4] = ["purple", "orange", "white", "black"];
const DISTRACTOR_SHAPES: [&str; 4] = ["star", "heart", "ring", "hexagon"];

/// Templates used to paraphrase prompts for text calibration.
pub const TEMPLATES: [&str; 16] = [
    "a photo of a {}",
    "a picture of a {}",
    "an image of a {}",
    "a drawing of a {}",
    "a {}",
    "a photo of the {}",
    "a close up photo of a {}",
    "a rendering of a {}",
    "a blurry photo of a {}",
    "a bright photo of a {}",
    "a photo of a small {}",
    "a photo of a large {}",
    "a {} on a textured background",
    "this is a {}",
    "there is a {} in the center",
    "a cropped photo of a {}",
];

#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<&'static str>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        let mut words = vec!["<pad>", "<end>", "<unk>"];
        words.extend(WORDS);
        Self { words }
    }
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    /// Lowercases, drops punctuation and collapses whitespace.
    pub fn normalize(text: &str) -> String {
        text.to_lowercase()
            .chars()
            .map(|c| if c.is_alphanumeric() { c } else { ' ' })
            .collect::<String>()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Token ids padded to [`MAX_LEN`]; the sequence is truncated so the end token always fits.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = Self::normalize(text)
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(|w| self.words.iter().position(|v| *v == w).map_or(UNK, |i| i as u32))
            .take(MAX_LEN - 1)
            .collect();
        ids.push(END);
        ids.resize(MAX_LEN, PAD);
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&i| i != END)
            .filter(|&&i| i != PAD)
            .map(|&i| self.words.get(i as usize).copied().unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Position of the end token (the pooled position).
    pub fn end_position(ids: &[u32]) -> usize {
        ids.iter().position(|&i| i == END).unwrap_or(ids.len() - 1)
    }
}

/// One zero-shot prompt per class, `"a photo of a {color} {shape}"`.
pub fn class_prompts() -> Vec<String> {
    (0..NUM_CLASSES).map(super::data::caption).collect()
}

/// Class prompts followed by 16 out-of-dataset distractor prompts.
pub fn prompt_set() -> Vec<String> {
    let mut p = class_prompts();
    for c in DISTRACTOR_COLORS {
        for s in DISTRACTOR_SHAPES {
            p.push(format!("a photo of a {c} {s}"));
        }
    }
    p
}

/// `n` calibration texts: every prompt subject once with the canonical
/// template, then subjects and templates drawn with repetition.
pub fn calibration_texts(n: usize, rng: &mut Prng) -> Vec<String> {
    let mut subjects: Vec<String> = (0..NUM_CLASSES).map(class_name).collect();
    for c in DISTRACTOR_COLORS {
        for s in DISTRACTOR_SHAPES {
            subjects.push(format!("{c} {s}"));
        }
    }
    let mut out: Vec<String> = subjects.iter().take(n).map(|s| TEMPLATES[0].replace("{}", s)).collect();
    while out.len() < n {
        let s = &subjects[rng.int_range(0, subjects.len() - 1)];
        let t = TEMPLATES[rng.int_range(0, TEMPLATES.len() - 1)];
        out.push(t.replace("{}", s));
    }
    out
}
