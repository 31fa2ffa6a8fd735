//! Bounding boxes as `(PIXEL_x1, PIXEL_y1, PIXEL_x2, PIXEL_y2)` token tuples
//! in a 336×336 coordinate frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary, PIXEL_POSITIONS};

pub const FRAME: u32 = PIXEL_POSITIONS as u32;
const MAX_COORD: u32 = FRAME - 1;

/// Box in the 336-pixel frame; corners inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x1: u16,
    pub y1: u16,
    pub x2: u16,
    pub y2: u16,
}

impl BBox {
    pub fn new(x1: u16, y1: u16, x2: u16, y2: u16) -> Result<Self> {
        if [x1, y1, x2, y2].iter().any(|&c| u32::from(c) > MAX_COORD) {
            return Err(Error::InvalidBox(format!(
                "({x1},{y1},{x2},{y2}) exceeds the {FRAME}-pixel frame"
            )));
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::InvalidBox(format!(
                "({x1},{y1},{x2},{y2}) has inverted corners"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn coords(&self) -> [u16; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

/// Original image dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidBox(format!("image size {width}x{height}")));
        }
        Ok(Self { width, height })
    }
}

/// Box in original image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl ImageBox {
    pub fn from_array([x1, y1, x2, y2]: [u32; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn to_array(self) -> [u32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn validate(&self, size: ImageSize) -> Result<()> {
        let ImageBox { x1, y1, x2, y2 } = *self;
        if x1 > x2 || y1 > y2 || x2 >= size.width || y2 >= size.height {
            return Err(Error::InvalidBox(format!(
                "({x1},{y1},{x2},{y2}) invalid in {}x{}",
                size.width, size.height
            )));
        }
        Ok(())
    }
}

/// `round_half_up(value · num / den)` in exact integer arithmetic.
fn scale_half_up(value: u32, num: u32, den: u32) -> u32 {
    ((2 * u64::from(value) * u64::from(num) + u64::from(den)) / (2 * u64::from(den))) as u32
}

/// Maps one coordinate along an axis of length `extent` into the 336 frame.
pub fn scale_coord(value: u32, extent: u32) -> u16 {
    scale_half_up(value, FRAME, extent).min(MAX_COORD) as u16
}

/// Maps a box from original coordinates into the 336 frame.
pub fn rescale_box(b: ImageBox, size: ImageSize) -> Result<BBox> {
    b.validate(size)?;
    let sx = |v| scale_coord(v, size.width);
    let sy = |v| scale_coord(v, size.height);
    BBox::new(sx(b.x1), sy(b.y1), sx(b.x2), sy(b.y2))
}

/// Maps a 336-frame box back to original coordinates.
pub fn unscale_box(b: BBox, size: ImageSize) -> ImageBox {
    let sx = |v: u16| scale_half_up(u32::from(v), size.width, FRAME).min(size.width - 1);
    let sy = |v: u16| scale_half_up(u32::from(v), size.height, FRAME).min(size.height - 1);
    ImageBox {
        x1: sx(b.x1),
        y1: sy(b.y1),
        x2: sx(b.x2),
        y2: sy(b.y2),
    }
}

pub fn box_to_tokens(b: &BBox, vocab: &Vocabulary) -> [TokenId; 4] {
    b.coords().map(|c| vocab.pixel_token(c))
}

pub fn tokens_to_box(seq: &[TokenId], vocab: &Vocabulary) -> Result<BBox> {
    if seq.len() != 4 {
        return Err(Error::MalformedBox(format!(
            "expected 4 PIXEL tokens, got {}",
            seq.len()
        )));
    }
    let mut coords = [0u16; 4];
    for (slot, &token) in coords.iter_mut().zip(seq) {
        *slot = vocab
            .pixel_coord(token)
            .ok_or_else(|| Error::MalformedBox(format!("token {token} is not a PIXEL token")))?;
    }
    let [x1, y1, x2, y2] = coords;
    BBox::new(x1, y1, x2, y2).map_err(|e| Error::MalformedBox(e.to_string()))
}

/// Serializes boxes as consecutive 4-tuples.
pub fn boxes_to_tokens(boxes: &[BBox], vocab: &Vocabulary) -> Vec<TokenId> {
    boxes.iter().flat_map(|b| box_to_tokens(b, vocab)).collect()
}

pub fn tokens_to_boxes(seq: &[TokenId], vocab: &Vocabulary) -> Result<Vec<BBox>> {
    if seq.len() % 4 != 0 {
        return Err(Error::MalformedBox(format!(
            "{} PIXEL tokens do not form whole 4-tuples",
            seq.len()
        )));
    }
    seq.chunks_exact(4).map(|c| tokens_to_box(c, vocab)).collect()
}

/// One line of an annotation JSONL file (original coordinates).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub category: String,
    pub boxes: Vec<[u32; 4]>,
}

impl Annotation {
    pub fn rescaled(&self, size: ImageSize) -> Result<Vec<BBox>> {
        self.boxes
            .iter()
            .map(|&b| rescale_box(ImageBox::from_array(b), size))
            .collect()
    }
}
