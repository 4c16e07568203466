//! Byte-level tokenizer: ids `0..256` are raw bytes, followed by four
//! special tokens.

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub const BOS: TokenId = 256;
    pub const EOS: TokenId = 257;
    pub const SEG_OPEN: TokenId = 258;
    pub const SEG_CLOSE: TokenId = 259;
    /// Smallest vocabulary able to hold every byte and special.
    pub const VOCAB_SIZE: usize = 260;

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        bytes.iter().map(|&b| TokenId::from(b)).collect()
    }

    /// Byte payload of `ids`; special tokens are dropped.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    pub fn is_special(id: TokenId) -> bool {
        (256..260).contains(&id)
    }

    /// Printable label for a single token, used in traces and heatmaps.
    pub fn display(&self, id: TokenId) -> String {
        match id {
            Self::BOS => "<bos>".into(),
            Self::EOS => "<eos>".into(),
            Self::SEG_OPEN => "<seg>".into(),
            Self::SEG_CLOSE => "</seg>".into(),
            b if b < 256 => {
                let b = b as u8;
                if b.is_ascii_graphic() || b == b' ' {
                    (b as char).to_string()
                } else {
                    std::ascii::escape_default(b).to_string()
                }
            }
            other => format!("<{other}>"),
        }
    }
}
