use serde::{Deserialize, Serialize};

use crate::tinylm::special;

/// Token renderings of the repeat instruction.
///
/// The first chunk is scored after `first`; later chunks after
/// `continuation_prefix ‖ <trailing span of the previous text> ‖ continuation_suffix`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatPromptSpec {
    pub first: Vec<u32>,
    pub continuation_prefix: Vec<u32>,
    pub continuation_suffix: Vec<u32>,
    /// Length of the anchoring span copied from the preceding chunk.
    pub span_len: usize,
}

/// Anchoring span length used by the reference procedure.
pub const CONTINUATION_SPAN: usize = 8;

impl Default for RepeatPromptSpec {
    fn default() -> Self {
        Self::standard()
    }
}

impl RepeatPromptSpec {
    /// "Repeat the previous context:" / "... starting with <span>:"
    pub fn standard() -> Self {
        Self {
            first: vec![special::REPEAT, special::COLON],
            continuation_prefix: vec![special::REPEAT, special::START],
            continuation_suffix: vec![special::COLON],
            span_len: CONTINUATION_SPAN,
        }
    }

    /// Same shape, different instruction token.
    pub fn paraphrased() -> Self {
        Self {
            first: vec![special::REPRODUCE, special::COLON],
            continuation_prefix: vec![special::REPRODUCE, special::START],
            ..Self::standard()
        }
    }

    /// No instruction at all, just two line breaks.
    pub fn blank() -> Self {
        Self {
            first: vec![special::NEWLINE, special::NEWLINE],
            continuation_prefix: vec![special::NEWLINE],
            continuation_suffix: vec![special::NEWLINE],
            span_len: CONTINUATION_SPAN,
        }
    }

    /// Prompt preceding the chunk that starts at `chunk_start` of `context`.
    pub fn render(&self, context: &[u32], chunk_start: usize) -> Vec<u32> {
        if chunk_start == 0 {
            return self.first.clone();
        }
        let span_start = chunk_start.saturating_sub(self.span_len);
        let mut out = self.continuation_prefix.clone();
        out.extend_from_slice(&context[span_start..chunk_start]);
        out.extend_from_slice(&self.continuation_suffix);
        out
    }

    /// Prompt length for the chunk starting at `chunk_start`.
    pub fn n_prompt(&self, chunk_start: usize) -> usize {
        if chunk_start == 0 {
            self.first.len()
        } else {
            self.continuation_prefix.len() + chunk_start.min(self.span_len) + self.continuation_suffix.len()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn continuation_carries_eight_trailing_tokens() {
        let ctx: Vec<u32> = (100..140).collect();
        let p = RepeatPromptSpec::standard();
        let r = p.render(&ctx, 16);
        assert_eq!(r.len(), 2 + 8 + 1);
        assert_eq!(&r[2..10], &(108..116).collect::<Vec<u32>>()[..]);
        assert_eq!(r.len(), p.n_prompt(16));
        assert_eq!(p.render(&ctx, 0), vec![special::REPEAT, special::COLON]);
    }

    #[test]
    fn short_prefix_uses_what_exists() {
        let ctx: Vec<u32> = (100..110).collect();
        let p = RepeatPromptSpec::standard();
        assert_eq!(p.render(&ctx, 3).len(), 2 + 3 + 1);
        assert_eq!(p.n_prompt(3), 6);
    }

    #[test]
    fn paraphrase_has_equal_length() {
        let (a, b) = (RepeatPromptSpec::standard(), RepeatPromptSpec::paraphrased());
        assert_eq!(a.first.len(), b.first.len());
        assert_ne!(a.first, b.first);
    }
}
