//! Tag extraction, dictionary mapping, the fixed-width tag codec and the
//! guidance-dropout used for classifier-free training.
//!
//! Tags travel in the container as fixed-width 13-bit ids, so a dictionary
//! holds at most 8192 entries. The empty tag set doubles as the
//! unconditional branch for guidance; it maps to a dedicated learned null
//! embedding rather than a zero vector.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use candle_nn::{Conv2dConfig, Embedding, Linear, Module};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, ParseError, Result, Section};
use crate::nn::ParamStore;

/// Wire width of one tag id.
pub const TAG_BITS: usize = 13;

/// Dictionary capacity implied by the 13-bit id width.
pub const MAX_DICT_SIZE: usize = 1 << TAG_BITS;

/// Ordered tag vocabulary with dense ids and reverse lookup.
#[derive(Debug, Clone)]
pub struct TagDictionary {
    tags: Vec<String>,
    index: HashMap<String, u16>,
}

impl TagDictionary {
    /// Builds a dictionary from tag strings; line number = id. Rejects
    /// duplicates, empty tags and oversize vocabularies.
    pub fn from_tags<I, S>(tags: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list = Vec::new();
        let mut index = HashMap::new();
        for raw in tags {
            let tag = raw.as_ref().trim();
            if tag.is_empty() {
                return Err(Error::Dictionary(format!("empty tag at line {}", list.len() + 1)));
            }
            if index.contains_key(tag) {
                return Err(Error::Dictionary(format!("duplicate tag {tag:?}")));
            }
            if list.len() >= MAX_DICT_SIZE {
                return Err(Error::Dictionary(format!(
                    "dictionary exceeds the {MAX_DICT_SIZE}-entry capacity"
                )));
            }
            index.insert(tag.to_string(), list.len() as u16);
            list.push(tag.to_string());
        }
        Ok(Self { tags: list, index })
    }

    /// Loads a UTF-8 text file with one tag per line.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tags(text.lines().filter(|l| !l.trim().is_empty()))
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn id_of(&self, tag: &str) -> Result<u16> {
        self.index
            .get(tag)
            .copied()
            .ok_or_else(|| Error::UnknownTag(tag.to_string()))
    }

    pub fn tag(&self, id: u16) -> Result<&str> {
        self.tags
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::TagOutOfRange { id: id as u32 })
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }
}

/// Sorted, deduplicated set of tag ids. The empty set is the unconditional
/// guidance branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    ids: Vec<u16>,
}

impl TagSet {
    pub fn new(mut ids: Vec<u16>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        Self { ids }
    }

    pub fn empty() -> Self {
        Self { ids: Vec::new() }
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Resolves tag strings through the dictionary.
    pub fn from_names(dict: &TagDictionary, names: &[&str]) -> Result<Self> {
        let ids = names.iter().map(|n| dict.id_of(n)).collect::<Result<Vec<_>>>()?;
        Ok(Self::new(ids))
    }
}

/// Anything that maps an image tensor to a tag set. Extractors stay frozen
/// during codec training.
pub trait TagExtractor {
    fn extract(&self, image: &Tensor) -> Result<TagSet>;
}

/// Ground-truth oracle: returns stored label ids regardless of pixels. Used
/// with labeled toy data, where the generator knows the answer.
pub struct LabelOracle(pub TagSet);

impl TagExtractor for LabelOracle {
    fn extract(&self, _image: &Tensor) -> Result<TagSet> {
        Ok(self.0.clone())
    }
}

/// Runs the extractor; the result is sorted and deduplicated by
/// construction.
pub fn extract_tags(extractor: &dyn TagExtractor, image: &Tensor) -> Result<TagSet> {
    extractor.extract(image)
}

/// Small multi-label image classifier: per-tag logits, thresholded at 0.5
/// probability at extraction time.
pub struct TagClassifier {
    c1: crate::nn::Conv2d,
    c2: crate::nn::Conv2d,
    head: Linear,
    n_tags: usize,
}

impl TagClassifier {
    pub fn new(ps: &mut ParamStore, prefix: &str, n_tags: usize) -> Result<Self> {
        if n_tags == 0 || n_tags > MAX_DICT_SIZE {
            return Err(Error::InvalidArgument {
                what: format!("classifier needs 1..={MAX_DICT_SIZE} tags, got {n_tags}"),
            });
        }
        let down = Conv2dConfig { padding: 1, stride: 2, ..Default::default() };
        Ok(Self {
            c1: ps.conv2d(&format!("{prefix}.c1"), 3, 16, 3, down)?,
            c2: ps.conv2d(&format!("{prefix}.c2"), 16, 32, 3, down)?,
            head: ps.linear(&format!("{prefix}.head"), 32, n_tags)?,
            n_tags,
        })
    }

    pub fn n_tags(&self) -> usize {
        self.n_tags
    }

    /// Per-tag logits, shape (B, n_tags). Input (B, 3, H, W).
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::Shape {
                context: "classifier input".to_string(),
                expected: "(B, 3, H, W)".to_string(),
                got: format!("{dims:?}"),
            });
        }
        let h = self.c1.forward(images)?.silu()?;
        let h = self.c2.forward(&h)?.silu()?;
        let pooled = h.mean(3)?.mean(2)?;
        Ok(self.head.forward(&pooled)?)
    }

    /// Multi-label binary cross entropy against a multi-hot target of shape
    /// (B, n_tags) with values in {0, 1}.
    pub fn bce_loss(&self, images: &Tensor, targets: &Tensor) -> Result<Tensor> {
        let logits = self.logits(images)?;
        if logits.dims() != targets.dims() {
            return Err(Error::Shape {
                context: "classifier targets".to_string(),
                expected: format!("{:?}", logits.dims()),
                got: format!("{:?}", targets.dims()),
            });
        }
        // Stable bce-with-logits: max(x, 0) - x*y + ln(1 + exp(-|x|)).
        let relu = logits.maximum(0.0)?;
        let xy = (&logits * targets)?;
        let softplus = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
        Ok(((relu - xy)? + softplus)?.mean_all()?)
    }
}

impl TagExtractor for TagClassifier {
    fn extract(&self, image: &Tensor) -> Result<TagSet> {
        let batched = if image.dims().len() == 3 { image.unsqueeze(0)? } else { image.clone() };
        let logits = self.logits(&batched)?;
        let row: Vec<f32> = logits.get(0)?.to_vec1()?;
        // Probability 0.5 corresponds to logit 0.
        let ids = row
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, _)| i as u16)
            .collect();
        Ok(TagSet::new(ids))
    }
}

/// Packs tag ids as consecutive 13-bit fields, most significant bit first,
/// zero-padded to a byte boundary.
pub fn encode_tag_ids(tags: &TagSet) -> Result<Vec<u8>> {
    let total_bits = tags.len() * TAG_BITS;
    let mut out = vec![0u8; total_bits.div_ceil(8)];
    let mut bit = 0usize;
    for &id in tags.ids() {
        if (id as usize) >= MAX_DICT_SIZE {
            return Err(Error::TagOutOfRange { id: id as u32 });
        }
        for j in (0..TAG_BITS).rev() {
            if (id >> j) & 1 == 1 {
                out[bit / 8] |= 1 << (7 - bit % 8);
            }
            bit += 1;
        }
    }
    Ok(out)
}

/// Inverse of [`encode_tag_ids`]: reads exactly `count` 13-bit ids. The
/// payload must be exactly the padded length and the padding bits must be
/// zero.
pub fn decode_tag_ids(bytes: &[u8], count: usize) -> Result<TagSet> {
    let total_bits = count * TAG_BITS;
    let need = total_bits.div_ceil(8);
    if bytes.len() < need {
        return Err(ParseError::Truncated { section: Section::TagPayload }.into());
    }
    if bytes.len() > need {
        return Err(ParseError::TrailingBytes(bytes.len() - need).into());
    }
    let read_bit = |i: usize| -> u16 { ((bytes[i / 8] >> (7 - i % 8)) & 1) as u16 };
    let mut ids = Vec::with_capacity(count);
    for k in 0..count {
        let mut id = 0u16;
        for j in 0..TAG_BITS {
            id = (id << 1) | read_bit(k * TAG_BITS + j);
        }
        ids.push(id);
    }
    for i in total_bits..need * 8 {
        if read_bit(i) != 0 {
            return Err(ParseError::NonzeroPadding.into());
        }
    }
    Ok(TagSet::new(ids))
}

/// All-or-nothing guidance dropout: with probability `p` the whole set is
/// replaced by the empty (unconditional) set, otherwise it passes through
/// unchanged.
pub fn dropout_tags(tags: &TagSet, p: f64, rng: &mut ChaCha12Rng) -> Result<TagSet> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument {
            what: format!("dropout probability {p} outside [0, 1]"),
        });
    }
    if rng.random::<f64>() < p {
        Ok(TagSet::empty())
    } else {
        Ok(tags.clone())
    }
}

/// Learned tag conditioning: one embedding row per dictionary entry plus a
/// null row for the empty set. A tag set maps to the sum of its rows.
pub struct TagConditioner {
    table: Embedding,
    vocab: usize,
    dim: usize,
}

impl TagConditioner {
    pub fn new(ps: &mut ParamStore, prefix: &str, vocab: usize, dim: usize) -> Result<Self> {
        if vocab == 0 || vocab > MAX_DICT_SIZE {
            return Err(Error::InvalidArgument {
                what: format!("conditioner vocabulary must be 1..={MAX_DICT_SIZE}, got {vocab}"),
            });
        }
        Ok(Self {
            table: ps.embedding(&format!("{prefix}.embed"), vocab + 1, dim)?,
            vocab,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn embed_one(&self, tags: &TagSet, device: &Device) -> Result<Tensor> {
        let ids: Vec<u32> = if tags.is_empty() {
            vec![self.vocab as u32]
        } else {
            tags.ids()
                .iter()
                .map(|&id| {
                    if (id as usize) < self.vocab {
                        Ok(id as u32)
                    } else {
                        Err(Error::TagOutOfRange { id: id as u32 })
                    }
                })
                .collect::<Result<_>>()?
        };
        let n = ids.len();
        let idx = Tensor::from_vec(ids, (n,), device)?;
        Ok(self.table.forward(&idx)?.sum(0)?)
    }

    /// Conditioning vectors for a batch of tag sets, shape (B, dim).
    pub fn condition(&self, sets: &[TagSet], device: &Device) -> Result<Tensor> {
        if sets.is_empty() {
            return Err(Error::InvalidArgument { what: "empty tag batch".to_string() });
        }
        let rows = sets.iter().map(|s| self.embed_one(s, device)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }

    /// The unconditional branch, shape (B, dim).
    pub fn null_condition(&self, batch: usize, device: &Device) -> Result<Tensor> {
        self.condition(&vec![TagSet::empty(); batch], device)
    }
}
