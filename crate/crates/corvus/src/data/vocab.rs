//! Fixed token layout shared by every dataset.
//!
//! The grounded QA task and the instruction task draw from disjoint
//! alphabets, so instruction examples share no content n-grams with the
//! benchmark. Only the special tokens overlap, and no 4-gram consists of
//! specials alone.

use std::ops::Range;

pub const VOCAB_SIZE: usize = 512;

pub const EOS: usize = 0;
pub const BOS_QA: usize = 1;
pub const QUERY: usize = 2;
pub const SEP_QA: usize = 3;
pub const BOS_INSTR: usize = 4;
pub const INSTR_COPY: usize = 5;
pub const INSTR_REVERSE: usize = 6;
pub const SEP_INSTR: usize = 7;

/// Keys the QA prompts index facts by.
pub const KEY_RANGE: Range<usize> = 8..168;
/// Tokens QA values are spelled with.
pub const VALUE_RANGE: Range<usize> = 168..328;
/// Tokens instruction spans are spelled with.
pub const SPAN_RANGE: Range<usize> = 328..488;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabets_are_disjoint_and_in_vocab() {
        assert!(KEY_RANGE.end <= VALUE_RANGE.start);
        assert!(VALUE_RANGE.end <= SPAN_RANGE.start);
        assert!(SPAN_RANGE.end <= VOCAB_SIZE);
        assert!(KEY_RANGE.start > SEP_INSTR);
    }
}
