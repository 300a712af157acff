/// Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three specials.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub const BOS: u32 = 256;
    pub const EOS: u32 = 257;
    pub const PAD: u32 = 258;
    pub const VOCAB_SIZE: usize = 259;

    /// `[BOS] + bytes + [EOS]`, never truncated.
    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(bytes.len() + 2);
        ids.push(Self::BOS);
        ids.extend(bytes.iter().map(|&b| u32::from(b)));
        ids.push(Self::EOS);
        ids
    }

    /// Drops special tokens.
    pub fn decode(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encodes_with_specials() {
        assert_eq!(Tokenizer.encode(b"AB"), vec![256, 65, 66, 257]);
        assert_eq!(Tokenizer.encode(b""), vec![256, 257]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            prop_assert_eq!(Tokenizer.decode(&Tokenizer.encode(&bytes)), bytes);
        }
    }
}
