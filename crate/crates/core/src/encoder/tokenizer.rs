//! Byte-level tokenization: ids 0..=255 are raw UTF-8 bytes, followed by the
//! three special tokens.

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// Token ids for one text. Always starts with BOS and ends with EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Wraps raw ids. Panics unless the sequence ends with EOS and every id
    /// is in the vocabulary.
    pub fn from_ids(ids: Vec<u32>) -> Self {
        assert_eq!(ids.last(), Some(&EOS), "sequence must end with EOS");
        assert!(ids.iter().all(|&i| (i as usize) < VOCAB_SIZE), "id out of vocabulary");
        TokenSequence { ids }
    }

    /// Position of the pooled EOS token.
    pub fn eos_position(&self) -> usize {
        self.ids.len() - 1
    }
}

/// BOS + UTF-8 bytes, truncated to `max_seq_len - 1` ids, then EOS.
pub fn tokenize(text: &str, max_seq_len: usize) -> TokenSequence {
    assert!(max_seq_len >= 2, "max_seq_len must leave room for BOS and EOS");
    let mut ids = Vec::with_capacity((text.len() + 2).min(max_seq_len));
    ids.push(BOS);
    ids.extend(text.bytes().take(max_seq_len - 2).map(u32::from));
    ids.push(EOS);
    TokenSequence { ids }
}
