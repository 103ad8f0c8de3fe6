use super::{BackendError, EmbeddingVector, Embedder};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Signed feature hashing of word tokens and character trigrams, L2-normalized.
///
/// Deterministic across processes and platforms: the hash is FNV-1a over the
/// seed and the feature bytes.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dims: usize,
    seed: u64,
    id: String,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(256, 0)
    }
}

impl HashingEmbedder {
    pub fn new(dims: usize, seed: u64) -> Self {
        assert!(dims > 0, "hashing embedder needs at least one dimension");
        Self {
            dims,
            seed,
            id: format!("hashing-{dims}-{seed}"),
        }
    }

    /// Parses ids of the form `hashing-<dims>-<seed>`.
    pub fn from_id(id: &str) -> Option<Self> {
        let rest = id.strip_prefix("hashing-")?;
        let (dims, seed) = rest.split_once('-')?;
        let dims: usize = dims.parse().ok().filter(|d| *d > 0)?;
        Some(Self::new(dims, seed.parse().ok()?))
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    fn hash(&self, kind: u8, feature: &str) -> u64 {
        let mut h = FNV_OFFSET;
        for b in self
            .seed
            .to_le_bytes()
            .iter()
            .chain(std::iter::once(&kind))
            .chain(feature.as_bytes())
        {
            h ^= u64::from(*b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        h
    }

    fn add(&self, acc: &mut [f32], kind: u8, feature: &str) {
        let h = self.hash(kind, feature);
        let slot = (h % self.dims as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        acc[slot] += sign;
    }
}

pub(crate) fn word_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl Embedder for HashingEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::Precondition("cannot embed empty text".into()));
        }
        let mut acc = vec![0.0f32; self.dims];
        for word in word_tokens(text) {
            self.add(&mut acc, b'w', &word);
            let padded: Vec<char> = format!("<{word}>").chars().collect();
            for gram in padded.windows(3) {
                self.add(&mut acc, b'c', &gram.iter().collect::<String>());
            }
        }
        EmbeddingVector::new(acc)?
            .normalized()
            .map_err(|_| BackendError::Precondition(format!("no word tokens in `{text}`")))
    }
}
