use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Matrix;

/// A token keeps its exact surface text (including leading whitespace) so
/// detokenisation is lossless; `id` is derived from the normalised form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub id: u64,
}

pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<Token>;
    fn detokenize(&self, tokens: &[Token]) -> String;
}

/// Maps tokens to `d_model`-wide embedding rows.
pub trait TextEmbedder: Send + Sync {
    fn d_model(&self) -> usize;
    fn embed(&self, tokens: &[Token]) -> Matrix;
}

/// Splits on whitespace and punctuation: every alphanumeric run is one token,
/// every other visible character is its own token. Ids are FNV-1a hashes of the
/// lowercased token without its whitespace.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyTokenizer;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ToyTokenizer {
    fn token(text: String) -> Token {
        let id = fnv1a(&text.trim().to_lowercase());
        Token { text, id }
    }
}

impl Tokenizer for ToyTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        let mut tokens = Vec::new();
        let mut chars = text.chars().peekable();
        while chars.peek().is_some() {
            let mut piece = String::new();
            while let Some(&c) = chars.peek() {
                if !c.is_whitespace() {
                    break;
                }
                piece.push(c);
                chars.next();
            }
            match chars.next() {
                None => {}
                Some(c) if c.is_alphanumeric() => {
                    piece.push(c);
                    while let Some(&c) = chars.peek() {
                        if !c.is_alphanumeric() {
                            break;
                        }
                        piece.push(c);
                        chars.next();
                    }
                }
                Some(c) => piece.push(c),
            }
            tokens.push(Self::token(piece));
        }
        tokens
    }

    fn detokenize(&self, tokens: &[Token]) -> String {
        tokens.iter().map(|t| t.text.as_str()).collect()
    }
}

/// Fixed pseudo-random embedding per token id, entries uniform in `±sqrt(3)`
/// (unit variance).
#[derive(Clone, Copy, Debug)]
pub struct HashEmbedder {
    pub d_model: usize,
    pub seed: u64,
}

impl HashEmbedder {
    pub fn new(d_model: usize, seed: u64) -> Self {
        Self { d_model, seed }
    }
}

impl TextEmbedder for HashEmbedder {
    fn d_model(&self) -> usize {
        self.d_model
    }

    fn embed(&self, tokens: &[Token]) -> Matrix {
        let bound = 3f64.sqrt();
        let mut out = Array2::zeros((tokens.len(), self.d_model));
        for (mut row, token) in out.rows_mut().into_iter().zip(tokens) {
            let mut rng = ChaCha8Rng::seed_from_u64(token.id ^ self.seed.rotate_left(17));
            row.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn words_and_punctuation() {
        let toks = ToyTokenizer.tokenize("The key frames of this video are:");
        let texts: Vec<&str> = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["The", " key", " frames", " of", " this", " video", " are", ":"]);
    }

    #[test]
    fn ids_ignore_case_and_spacing() {
        let a = ToyTokenizer.tokenize("Video");
        let b = ToyTokenizer.tokenize("  video");
        assert_eq!(a[0].id, b[0].id);
        let e = HashEmbedder::new(16, 3);
        assert_eq!(e.embed(&a), e.embed(&b));
        assert_ne!(e.embed(&a), e.embed(&ToyTokenizer.tokenize("quality")));
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(text in "\\PC{0,60}") {
            let toks = ToyTokenizer.tokenize(&text);
            prop_assert_eq!(ToyTokenizer.detokenize(&toks), text);
        }
    }
}
