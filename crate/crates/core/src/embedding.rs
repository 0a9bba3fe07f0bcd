//! Item text and image representations and assembly of the model input.
//!
//! Text tokens and image patches are embedded by frozen providers (stand-ins
//! for pre-trained encoders) and summed with trainable position and segment
//! embeddings. Items become blocks `[CLS] text [SEP] image`; the model input
//! concatenates the other-feature block, the behavior item blocks and the
//! target item block, in that order.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::hash_unit;
use crate::tensor::Tensor;

pub const DEFAULT_MAX_TEXT_LEN: usize = 50;
pub const DEFAULT_MAX_PATCH_LEN: usize = 9;
pub const UNK_TOKEN: &str = "[unk]";

pub const TEXT_PROVIDER_TABLE: &str = "text_provider.table";
pub const IMAGE_PROVIDER_PROJECTION: &str = "image_provider.projection";

/// Segment annotation of a sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Segment {
    Text = 0,
    Image = 1,
    Special = 2,
    Other = 3,
}

pub const NUM_SEGMENTS: usize = 4;

/// Which block of the input a position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockType {
    Other = 0,
    Behavior = 1,
    Target = 2,
}

pub const NUM_BLOCK_TYPES: usize = 3;

// ---------------------------------------------------------------------------
// Text

/// Closed vocabulary; id 0 is the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

impl Vocab {
    /// Builds a vocabulary from every word of `corpus`, sorted for determinism.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = corpus.into_iter().flat_map(split_words).collect();
        words.sort();
        words.dedup();
        Self::from_words(words)
    }

    /// Builds a vocabulary from an explicit word list; the unknown token is
    /// prepended.
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens = vec![UNK_TOKEN.to_string()];
        let mut index = BTreeMap::new();
        index.insert(UNK_TOKEN.to_string(), 0);
        for w in words {
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        0
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }
}

/// Token ids of one item text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TextTokenSequence(pub Vec<usize>);

impl TextTokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn tokenize(raw_text: &str, vocab: &Vocab, max_text_len: usize) -> TextTokenSequence {
    TextTokenSequence(split_words(raw_text).take(max_text_len).map(|w| vocab.id(&w)).collect())
}

// ---------------------------------------------------------------------------
// Images

/// Row-major `height × width × channels` 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::shape("image", &[height, width, channels], &[pixels.len()]));
        }
        Ok(Image { height, width, channels, pixels })
    }
}

/// Equal-sized patches of an image in row-major grid order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePatchGrid {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub channels: usize,
    pub patches: Vec<Vec<u8>>,
}

impl ImagePatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_height * self.patch_width * self.channels
    }

    /// Inverse of [`split_patches`].
    pub fn reassemble(&self) -> Image {
        let (ph, pw, ch) = (self.patch_height, self.patch_width, self.channels);
        let (h, w) = (ph * self.grid_rows, pw * self.grid_cols);
        let mut pixels = vec![0u8; h * w * ch];
        for (p, patch) in self.patches.iter().enumerate() {
            let (gr, gc) = (p / self.grid_cols, p % self.grid_cols);
            for y in 0..ph {
                let dst = ((gr * ph + y) * w + gc * pw) * ch;
                pixels[dst..dst + pw * ch].copy_from_slice(&patch[y * pw * ch..(y + 1) * pw * ch]);
            }
        }
        Image { height: h, width: w, channels: ch, pixels }
    }
}

pub fn split_patches(image: &Image, grid_rows: usize, grid_cols: usize) -> Result<ImagePatchGrid> {
    if grid_rows == 0 || grid_cols == 0 {
        return Err(Error::contract("patch grid must be non-empty"));
    }
    if !image.height.is_multiple_of(grid_rows) || !image.width.is_multiple_of(grid_cols) {
        return Err(Error::contract(alloc::format!(
            "image {}x{} does not divide into a {grid_rows}x{grid_cols} grid",
            image.height, image.width
        )));
    }
    let (ph, pw, ch) = (image.height / grid_rows, image.width / grid_cols, image.channels);
    let mut patches = Vec::with_capacity(grid_rows * grid_cols);
    for gr in 0..grid_rows {
        for gc in 0..grid_cols {
            let mut patch = Vec::with_capacity(ph * pw * ch);
            for y in 0..ph {
                let src = ((gr * ph + y) * image.width + gc * pw) * ch;
                patch.extend_from_slice(&image.pixels[src..src + pw * ch]);
            }
            patches.push(patch);
        }
    }
    Ok(ImagePatchGrid {
        grid_rows,
        grid_cols,
        patch_height: ph,
        patch_width: pw,
        channels: ch,
        patches,
    })
}

// ---------------------------------------------------------------------------
// Frozen providers

/// Hash-seeded `vocab_size × d` table with unit-variance entries.
pub fn standin_text_table(vocab_size: usize, d: usize, seed: u64) -> Tensor {
    let limit = libm::sqrt(3.0);
    let data = (0..vocab_size * d)
        .map(|i| {
            let (tok, k) = ((i / d) as u64, (i % d) as u64);
            (2.0 * hash_unit(&[seed, 0x7e47, tok, k]) - 1.0) * limit
        })
        .collect();
    Tensor::from_parts(vec![vocab_size, d], data)
}

/// Hash-seeded `patch_pixels × d` random projection.
pub fn standin_image_projection(patch_pixels: usize, d: usize, seed: u64) -> Tensor {
    let limit = 3.0 / libm::sqrt(patch_pixels as f64);
    let data = (0..patch_pixels * d)
        .map(|i| (2.0 * hash_unit(&[seed, 0x1a6e, i as u64]) - 1.0) * limit)
        .collect();
    Tensor::from_parts(vec![patch_pixels, d], data)
}

/// Frozen token-id and patch-pixel embedders.
#[derive(Debug, Clone, Copy)]
pub struct Providers<'a> {
    pub text_table: &'a Tensor,
    pub image_projection: &'a Tensor,
}

impl<'a> Providers<'a> {
    pub fn from_params(params: &'a ParamStore) -> Result<Self> {
        Ok(Providers {
            text_table: params.by_name(TEXT_PROVIDER_TABLE)?,
            image_projection: params.by_name(IMAGE_PROVIDER_PROJECTION)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.text_table.cols()
    }

    /// One row per token.
    pub fn embed_text(&self, tokens: &TextTokenSequence) -> Result<Option<Tensor>> {
        if tokens.is_empty() {
            return Ok(None);
        }
        let vocab = self.text_table.rows();
        if let Some(&bad) = tokens.0.iter().find(|&&t| t >= vocab) {
            return Err(Error::contract(alloc::format!(
                "token id {bad} outside provider vocabulary of {vocab}"
            )));
        }
        Ok(Some(self.text_table.select_rows(&tokens.0)))
    }

    /// One row per patch: `tanh(pixels / 255 · projection)`.
    pub fn embed_patches(&self, grid: &ImagePatchGrid) -> Result<Option<Tensor>> {
        if grid.is_empty() {
            return Ok(None);
        }
        let (p, d) = (self.image_projection.rows(), self.image_projection.cols());
        if grid.patch_pixels() != p {
            return Err(Error::shape("image provider", &[grid.patch_pixels()], &[p]));
        }
        let w = self.image_projection.data();
        let mut out = vec![0.0; grid.len() * d];
        for (i, patch) in grid.patches.iter().enumerate() {
            let row = &mut out[i * d..(i + 1) * d];
            for (k, &px) in patch.iter().enumerate() {
                let x = px as f64 / 255.0;
                for (o, wv) in row.iter_mut().zip(&w[k * d..(k + 1) * d]) {
                    *o += x * wv;
                }
            }
            row.iter_mut().for_each(|v| *v = libm::tanh(*v));
        }
        Ok(Some(Tensor::from_parts(vec![grid.len(), d], out)))
    }
}

// ---------------------------------------------------------------------------
// Trainable embedding tables

/// Ids of the embedding tables inside a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTables {
    pub text_position: ParamId,
    pub image_position: ParamId,
    pub segment: ParamId,
    pub cls: ParamId,
    pub sep: ParamId,
    pub block_type: ParamId,
    pub user: ParamId,
    pub context: ParamId,
}

impl EmbeddingTables {
    pub const TEXT_POSITION: &'static str = "embed.text_position";
    pub const IMAGE_POSITION: &'static str = "embed.image_position";
    pub const SEGMENT: &'static str = "embed.segment";
    pub const CLS: &'static str = "embed.cls";
    pub const SEP: &'static str = "embed.sep";
    pub const BLOCK_TYPE: &'static str = "embed.block_type";
    pub const USER: &'static str = "embed.user";
    pub const CONTEXT: &'static str = "embed.context";

    pub fn resolve(params: &ParamStore) -> Result<Self> {
        Ok(EmbeddingTables {
            text_position: params.id(Self::TEXT_POSITION)?,
            image_position: params.id(Self::IMAGE_POSITION)?,
            segment: params.id(Self::SEGMENT)?,
            cls: params.id(Self::CLS)?,
            sep: params.id(Self::SEP)?,
            block_type: params.id(Self::BLOCK_TYPE)?,
            user: params.id(Self::USER)?,
            context: params.id(Self::CONTEXT)?,
        })
    }
}

/// Checks that every pair of rows of a position table differs.
pub fn positions_injective(table: &Tensor) -> bool {
    let n = table.rows();
    (0..n).all(|p| (p + 1..n).all(|q| table.row(p) != table.row(q)))
}

/// Text embedding: provider output plus position and text-segment rows.
/// `provider_rows` is `n_T × d`.
pub fn encode_text(
    tape: &mut Tape<'_>,
    provider_rows: &Tensor,
    position_table: ParamId,
    segment_table: ParamId,
) -> Result<Var> {
    encode_positions(tape, provider_rows, position_table, segment_table, Segment::Text)
}

/// Image embedding: provider output plus position and image-segment rows.
/// `provider_rows` is `n_P × d`.
pub fn encode_image(
    tape: &mut Tape<'_>,
    provider_rows: &Tensor,
    position_table: ParamId,
    segment_table: ParamId,
) -> Result<Var> {
    encode_positions(tape, provider_rows, position_table, segment_table, Segment::Image)
}

fn encode_positions(
    tape: &mut Tape<'_>,
    provider_rows: &Tensor,
    position_table: ParamId,
    segment_table: ParamId,
    segment: Segment,
) -> Result<Var> {
    let n = provider_rows.rows();
    let max = tape.params().get(position_table).rows();
    if n > max {
        return Err(Error::contract(alloc::format!(
            "sequence of {n} exceeds position table of {max}"
        )));
    }
    let content = tape.constant(provider_rows.clone());
    let positions: Vec<usize> = (0..n).collect();
    let pos = tape.embedding_lookup(position_table, &positions)?;
    let seg = tape.embedding_lookup(segment_table, &vec![segment as usize; n])?;
    let with_pos = tape.add(content, pos)?;
    tape.add(with_pos, seg)
}

/// One item as `[CLS] text [SEP] image`.
#[derive(Debug, Clone, Copy)]
pub struct ItemBlock {
    pub cls: Var,
    pub text: Option<Var>,
    pub sep: Var,
    pub image: Option<Var>,
}

impl ItemBlock {
    /// Builds an item block from provider outputs. Either modality may be empty.
    pub fn encode(
        tape: &mut Tape<'_>,
        tables: &EmbeddingTables,
        text_rows: Option<&Tensor>,
        image_rows: Option<&Tensor>,
    ) -> Result<Self> {
        let special = tape.embedding_lookup(tables.segment, &[Segment::Special as usize])?;
        let cls_v = tape.param(tables.cls);
        let cls_row = as_row(tape, cls_v)?;
        let cls = tape.add(cls_row, special)?;
        let sep_v = tape.param(tables.sep);
        let sep_row = as_row(tape, sep_v)?;
        let sep = tape.add(sep_row, special)?;
        let text = match text_rows {
            Some(rows) => Some(encode_text(tape, rows, tables.text_position, tables.segment)?),
            None => None,
        };
        let image = match image_rows {
            Some(rows) => Some(encode_image(tape, rows, tables.image_position, tables.segment)?),
            None => None,
        };
        Ok(ItemBlock { cls, text, sep, image })
    }

    fn parts(&self) -> Vec<(Var, Segment)> {
        let mut parts = vec![(self.cls, Segment::Special)];
        if let Some(t) = self.text {
            parts.push((t, Segment::Text));
        }
        parts.push((self.sep, Segment::Special));
        if let Some(i) = self.image {
            parts.push((i, Segment::Image));
        }
        parts
    }
}

fn as_row(tape: &mut Tape<'_>, v: Var) -> Result<Var> {
    if tape.value(v).shape().len() == 2 {
        return Ok(v);
    }
    // 1-D parameter viewed as a 1×d row.
    tape.concat(&[v], 0)
}

/// The assembled model input.
#[derive(Debug, Clone)]
pub struct InputSequence {
    /// `L × d` embeddings.
    pub embeddings: Var,
    pub segments: Vec<Segment>,
    /// Position within the owning text or image span; 0 for special and
    /// other-feature positions.
    pub positions: Vec<usize>,
    pub block_types: Vec<BlockType>,
    /// Start offset of every block followed by the total length: the other
    /// block (when present), each behavior item, then the target item.
    pub block_boundaries: Vec<usize>,
    /// Whether the first block is the other-feature block.
    pub has_other: bool,
    /// Position of the target item's `[CLS]`.
    pub cls_index: usize,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Rows `[start, end)` of every block, in order.
    pub fn block_ranges(&self) -> Vec<(usize, usize)> {
        self.block_boundaries.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Positions holding text tokens / image patches of the block at `block`.
    pub fn positions_of(&self, block: usize, segment: Segment) -> Vec<usize> {
        let (s, e) = self.block_ranges()[block];
        (s..e).filter(|&i| self.segments[i] == segment).collect()
    }
}

/// Concatenates `other`, the behavior items and the target item.
pub fn assemble_input(
    tape: &mut Tape<'_>,
    other: Option<Var>,
    user_items: &[ItemBlock],
    target: &ItemBlock,
) -> Result<InputSequence> {
    let mut parts = Vec::new();
    let mut segments = Vec::new();
    let mut positions = Vec::new();
    let mut block_types = Vec::new();
    let mut boundaries = vec![0];

    let d = tape.value(target.cls).cols();
    let mut push = |tape: &Tape<'_>, v: Var, seg: Segment, bt: BlockType, parts: &mut Vec<Var>| -> Result<()> {
        let t = tape.value(v);
        if t.cols() != d {
            return Err(Error::shape("assemble_input", &[d], t.shape()));
        }
        for p in 0..t.rows() {
            segments.push(seg);
            positions.push(if matches!(seg, Segment::Text | Segment::Image) { p } else { 0 });
            block_types.push(bt);
        }
        parts.push(v);
        Ok(())
    };

    if let Some(o) = other {
        push(tape, o, Segment::Other, BlockType::Other, &mut parts)?;
        boundaries.push(tape.value(o).rows());
    }
    let mut offset = *boundaries.last().unwrap();
    for item in user_items {
        for (v, seg) in item.parts() {
            push(tape, v, seg, BlockType::Behavior, &mut parts)?;
            offset += tape.value(v).rows();
        }
        boundaries.push(offset);
    }
    let cls_index = offset;
    for (v, seg) in target.parts() {
        push(tape, v, seg, BlockType::Target, &mut parts)?;
        offset += tape.value(v).rows();
    }
    boundaries.push(offset);

    let embeddings = tape.concat(&parts, 0)?;
    Ok(InputSequence {
        embeddings,
        segments,
        positions,
        block_types,
        block_boundaries: boundaries,
        has_other: other.is_some(),
        cls_index,
    })
}
