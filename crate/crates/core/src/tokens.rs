//! Token accounting.

use serde::{Deserialize, Serialize};

use crate::protocol::truncate_bytes;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenCounter {
    /// `ceil(bytes / 4)`.
    #[default]
    ByteHeuristic,
    /// Whitespace-separated words.
    Whitespace,
    /// Generated tokens come from the inference server's `usage` block;
    /// everything else falls back to the byte heuristic.
    RemoteUsage,
}

pub const BYTES_PER_TOKEN: usize = 4;

pub fn count_tokens(text: &str, counter: TokenCounter) -> u32 {
    match counter {
        TokenCounter::ByteHeuristic | TokenCounter::RemoteUsage => text.len().div_ceil(BYTES_PER_TOKEN) as u32,
        TokenCounter::Whitespace => text.split_whitespace().count() as u32,
    }
}

/// Longest prefix of `text` that counts as at most `budget` tokens.
pub fn truncate_to_tokens(text: &str, counter: TokenCounter, budget: u32) -> &str {
    match counter {
        TokenCounter::ByteHeuristic | TokenCounter::RemoteUsage => {
            truncate_bytes(text, budget as usize * BYTES_PER_TOKEN)
        }
        TokenCounter::Whitespace => {
            let mut words = 0u32;
            let mut in_word = false;
            for (i, c) in text.char_indices() {
                if c.is_whitespace() {
                    in_word = false;
                } else if !in_word {
                    if words == budget {
                        return &text[..i];
                    }
                    words += 1;
                    in_word = true;
                }
            }
            text
        }
    }
}

/// Longest suffix of `text` that counts as at most `budget` tokens.
pub fn tail_to_tokens(text: &str, counter: TokenCounter, budget: u32) -> &str {
    match counter {
        TokenCounter::ByteHeuristic | TokenCounter::RemoteUsage => {
            crate::protocol::tail_bytes(text, budget as usize * BYTES_PER_TOKEN)
        }
        TokenCounter::Whitespace => {
            let mut words = 0u32;
            let mut in_word = false;
            for (i, c) in text.char_indices().rev() {
                if c.is_whitespace() {
                    in_word = false;
                } else if !in_word {
                    if words == budget {
                        return &text[i + c.len_utf8()..];
                    }
                    words += 1;
                    in_word = true;
                }
            }
            text
        }
    }
}
