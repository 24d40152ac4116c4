//! Deterministic stand-in for a frozen text encoder, plus the caption seam
//! that supplies source prompts for images.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::standard_normal;
use crate::{Array, Error, PromptEmbedding, Provenance, Result, RgbImage};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Words known to the toy encoder; everything else maps to [`UNK`].
pub const FIXTURE_VOCABULARY: &[&str] = &[
    "a", "an", "the", "photo", "picture", "image", "of", "on", "in", "with", "and", "background",
    "red", "green", "blue", "yellow", "white", "black", "gray", "purple", "orange", "pink", "brown",
    "circle", "square", "triangle", "ring", "cross", "star", "big", "small", "large", "tiny", "dog",
    "cat", "bird", "sitting", "standing", "jumping", "flying", "running",
];

const TABLE_SCALE: f64 = 1.0;
const POSITION_SCALE: f64 = 0.3;

/// Whitespace tokenizer with a seeded embedding table and positional offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTextEncoder {
    vocab: BTreeMap<String, usize>,
    table: Array,
    positions: Array,
    seed: u64,
}

impl ToyTextEncoder {
    pub fn new(tokens: usize, dim: usize, seed: u64) -> Result<Self> {
        Self::with_vocabulary(FIXTURE_VOCABULARY, tokens, dim, seed)
    }

    pub fn with_vocabulary(words: &[&str], tokens: usize, dim: usize, seed: u64) -> Result<Self> {
        if tokens == 0 || dim == 0 {
            return Err(Error::InvalidArgument("text encoder needs tokens > 0 and dim > 0".into()));
        }
        let mut vocab = BTreeMap::new();
        for w in words {
            let next = vocab.len() + 2;
            vocab.entry(w.to_lowercase()).or_insert(next);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = standard_normal(&mut rng, &[vocab.len() + 2, dim]);
        table.data_mut().iter_mut().for_each(|v| *v *= TABLE_SCALE);
        let mut positions = standard_normal(&mut rng, &[tokens, dim]);
        positions.data_mut().iter_mut().for_each(|v| *v *= POSITION_SCALE);
        Ok(Self { vocab, table, positions, seed })
    }

    pub fn tokens(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    /// Token embedding table, `V x C`; row 0 is padding, row 1 unknown.
    pub fn table(&self) -> &Array {
        &self.table
    }

    /// Replaces the token table (used after text-encoder fine-tuning).
    pub fn set_table(&mut self, table: Array) -> Result<()> {
        self.table.check_same_shape(&table)?;
        self.table = table;
        Ok(())
    }

    /// Lowercased whitespace split, unknown words to [`UNK`], truncated or
    /// padded with [`PAD`] to the token count.
    pub fn token_ids(&self, prompt: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = prompt
            .split_whitespace()
            .map(|w| *self.vocab.get(&w.to_lowercase()).unwrap_or(&UNK))
            .take(self.tokens())
            .collect();
        ids.resize(self.tokens(), PAD);
        ids
    }

    /// Embedding of a prompt; the empty prompt yields the all-padding
    /// embedding used as the unconditional branch.
    pub fn encode_prompt(&self, prompt: &str) -> PromptEmbedding {
        let c = self.dim();
        let mut out = Vec::with_capacity(self.tokens() * c);
        for (n, id) in self.token_ids(prompt).into_iter().enumerate() {
            let row = &self.table.data()[id * c..(id + 1) * c];
            let pos = &self.positions.data()[n * c..(n + 1) * c];
            out.extend(row.iter().zip(pos).map(|(a, b)| a + b));
        }
        let data = Array::from_vec(&[1, self.tokens(), c], out).expect("shape matches");
        PromptEmbedding::new(data, Provenance::Encoded).expect("finite table")
    }
}

/// Source-prompt supplier for an image.
pub trait CaptionProvider {
    fn name(&self) -> &str;
    fn caption(&self, image_id: &str, image: &RgbImage) -> Result<String>;
}

/// Returns the same caption for every image.
#[derive(Debug, Clone)]
pub struct ConstantCaption(pub String);

impl CaptionProvider for ConstantCaption {
    fn name(&self) -> &str {
        "constant"
    }

    fn caption(&self, _image_id: &str, _image: &RgbImage) -> Result<String> {
        Ok(self.0.clone())
    }
}

/// Lookup table from image id to caption, read from tab-separated lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixtureCaptions {
    table: BTreeMap<String, String>,
}

impl FixtureCaptions {
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut table = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, caption) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidArgument(alloc::format!("caption file line {}: expected id<TAB>caption", lineno + 1))
            })?;
            table.insert(id.trim().to_string(), caption.trim().to_string());
        }
        Ok(Self { table })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, caption) in &self.table {
            out.push_str(id);
            out.push('\t');
            out.push_str(caption);
            out.push('\n');
        }
        out
    }

    pub fn insert(&mut self, id: impl Into<String>, caption: impl Into<String>) {
        self.table.insert(id.into(), caption.into());
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.table.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl CaptionProvider for FixtureCaptions {
    fn name(&self) -> &str {
        "fixture"
    }

    fn caption(&self, image_id: &str, _image: &RgbImage) -> Result<String> {
        self.get(image_id)
            .map(ToString::to_string)
            .ok_or_else(|| Error::NotFound(alloc::format!("no caption for image {image_id}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc() -> ToyTextEncoder {
        ToyTextEncoder::new(8, 64, 11).unwrap()
    }

    #[test]
    fn encoding_is_deterministic() {
        let a = enc().encode_prompt("a red circle on a white background");
        let b = enc().encode_prompt("a red circle on a white background");
        assert_eq!(a, b);
        assert_eq!(a.dims(), (1, 8, 64));
        assert_eq!(a.provenance(), Provenance::Encoded);
    }

    #[test]
    fn different_prompts_differ() {
        let e = enc();
        let a = e.encode_prompt("a red circle");
        let b = e.encode_prompt("a blue circle");
        let rows_differ = a.data().data().chunks(64).zip(b.data().data().chunks(64)).filter(|(x, y)| x != y).count();
        assert_eq!(rows_differ, 1);
    }

    #[test]
    fn tokenization_policy() {
        let e = enc();
        assert_eq!(e.token_ids(""), alloc::vec![PAD; 8]);
        let ids = e.token_ids("A  zebra");
        assert_eq!(ids[0], e.token_ids("a")[0]);
        assert_eq!(ids[1], UNK);
        assert_eq!(e.token_ids("a a a a a a a a a a").len(), 8);
        // padding rows differ only by position
        let u = e.encode_prompt("");
        let row0 = &u.data().data()[..64];
        let row1 = &u.data().data()[64..128];
        assert_ne!(row0, row1);
    }

    #[test]
    fn fixture_captions() {
        let f = FixtureCaptions::parse_tsv("img1\ta red circle\n\nimg2\ta dog\n").unwrap();
        let img = RgbImage::new(4, 4, alloc::vec![0.0; 48]).unwrap();
        assert_eq!(f.caption("img1", &img).unwrap(), "a red circle");
        assert!(matches!(f.caption("zzz", &img), Err(Error::NotFound(_))));
        assert_eq!(FixtureCaptions::parse_tsv(&f.to_tsv()).unwrap(), f);
        assert!(FixtureCaptions::parse_tsv("no tab here").is_err());
        assert_eq!(ConstantCaption("x".into()).caption("any", &img).unwrap(), "x");
    }
}
