//! Fixed synthetic vocabulary: subject shapes, relations, a few fillers and
//! the reserved null token used for the unconditional branch.

use crate::error::{Error, Result};

pub const NULL_TOKEN: usize = 0;

pub const WORDS: &[&str] = &[
    "<null>", "circle", "square", "triangle", "cross", "approach", "separate", "orbit", "follow",
    "collide", "a", "the", "and",
];

pub fn size() -> usize {
    WORDS.len()
}

pub fn token(word: &str) -> Result<usize> {
    WORDS
        .iter()
        .position(|w| *w == word)
        .filter(|&i| i != NULL_TOKEN)
        .ok_or_else(|| Error::Vocab(format!("unknown word `{word}`; vocabulary: {}", WORDS[1..].join(", "))))
}

pub fn word(token: usize) -> Result<&'static str> {
    WORDS.get(token).copied().ok_or_else(|| Error::Vocab(format!("token id {token} outside vocabulary of {}", WORDS.len())))
}

/// Whitespace-separated prompt to token ids.
pub fn encode(prompt: &str) -> Result<Vec<usize>> {
    prompt.split_whitespace().map(token).collect()
}

pub fn decode(tokens: &[usize]) -> Result<String> {
    Ok(tokens.iter().map(|&t| word(t)).collect::<Result<Vec<_>>>()?.join(" "))
}

/// Prompt used for the unconditional branch.
pub fn null_prompt() -> Vec<usize> {
    vec![NULL_TOKEN]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let ids = encode("circle approach square").unwrap();
        assert_eq!(ids, vec![1, 5, 2]);
        assert_eq!(decode(&ids).unwrap(), "circle approach square");
    }

    #[test]
    fn unknown_word_lists_vocabulary() {
        let err = encode("circle flying square").unwrap_err().to_string();
        assert!(err.contains("flying") && err.contains("orbit"));
        assert!(encode("<null>").is_err());
    }
}
