//! Text conditioning: a pluggable embedder and the default hashed
//! bag-of-words implementation.

use serde::{Deserialize, Serialize};

pub const DEFAULT_TEXT_DIM: usize = 512;

/// Fixed-length text embedding, or the null condition used for the
/// unconditional branch of classifier-free guidance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextCondition {
    pub embedding: Vec<f64>,
    pub null: bool,
}

impl TextCondition {
    pub fn null(dim: usize) -> Self {
        TextCondition {
            embedding: vec![0.0; dim],
            null: true,
        }
    }

    pub fn to_null(&self) -> Self {
        TextCondition::null(self.embedding.len())
    }
}

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn id(&self) -> &str;
    fn embed(&self, text: &str) -> Vec<f64>;

    fn condition(&self, text: &str) -> TextCondition {
        TextCondition {
            embedding: self.embed(text),
            null: false,
        }
    }
}

/// Signed feature hashing of lower-cased word unigrams and bigrams,
/// L2-normalized. Deterministic across platforms.
#[derive(Clone, Debug)]
pub struct HashedBowEmbedder {
    dim: usize,
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        HashedBowEmbedder { dim: DEFAULT_TEXT_DIM }
    }
}

impl HashedBowEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        HashedBowEmbedder { dim }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl TextEmbedder for HashedBowEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn id(&self) -> &str {
        "hashed_bow"
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let words = tokenize(text);
        let mut v = vec![0.0; self.dim];
        let mut add = |key: &str, w: f64| {
            let h = fnv1a(key.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign * w;
        };
        for w in &words {
            add(w, 1.0);
        }
        for pair in words.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]), 0.5);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_normalized() {
        let e = HashedBowEmbedder::default();
        let a = e.embed("A person walks forward.");
        assert_eq!(a, e.embed("a person WALKS forward"));
        assert_eq!(a.len(), 512);
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(a, e.embed("a person waves"));
        assert!(e.embed("").iter().all(|&x| x == 0.0));
    }

    #[test]
    fn null_condition() {
        let c = HashedBowEmbedder::new(16).condition("jump");
        let n = c.to_null();
        assert!(n.null && n.embedding.iter().all(|&x| x == 0.0));
    }
}
