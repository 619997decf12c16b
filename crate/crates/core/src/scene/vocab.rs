use std::collections::HashMap;
use std::sync::LazyLock;

use crate::error::{Error, Result};

pub const PAD: usize = 0;

/// Object class names; class id `k` is `CLASS_NAMES[k]`.
pub const CLASS_NAMES: [&str; 16] = [
    "chair", "table", "lamp", "box", "sofa", "plant", "cabinet", "vase", "desk", "monitor", "shelf", "pillow", "bed", "bin",
    "stool", "printer",
];

const FUNCTION_WORDS: [&str; 51] = [
    "<pad>", "the", "a", "that", "is", "to", "of", "and", "it", "on", "in", "at", "by", "find", "select", "choose", "closest",
    "nearest", "next", "close", "near", "above", "over", "hanging", "floating", "high", "between", "middle", "centered",
    "front", "behind", "back", "left", "right", "side", "located", "top", "resting", "sitting", "supported", "placed",
    "standing", "one", "which", "with", "from", "facing", "object", "below", "under", "beneath",
];

/// Closed generator vocabulary: function and relation words, then class names.
pub static VOCAB: LazyLock<Vec<&'static str>> = LazyLock::new(|| FUNCTION_WORDS.iter().chain(CLASS_NAMES.iter()).copied().collect());

static INDEX: LazyLock<HashMap<&'static str, usize>> =
    LazyLock::new(|| VOCAB.iter().enumerate().map(|(i, w)| (*w, i)).collect());

pub fn token_id(word: &str) -> Option<usize> {
    INDEX.get(word).copied()
}

pub fn token_str(id: usize) -> Option<&'static str> {
    VOCAB.get(id).copied()
}

pub fn class_name(class_id: usize) -> &'static str {
    CLASS_NAMES[class_id]
}

/// Class id named by `word`, if it is a class word.
pub fn class_word(word: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|c| *c == word)
}

/// Whitespace tokenization into vocabulary ids.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| token_id(w).ok_or_else(|| Error::Data(format!("word {w:?} is not in the vocabulary"))))
        .collect()
}
