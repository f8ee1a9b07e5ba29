//! Bit-exact container format.
//!
//! Layout, all multi-byte integers big-endian:
//!
//! ```text
//! magic "DICM"          4 bytes
//! version               1 byte
//! quality index         1 byte
//! width                 2 bytes
//! height                2 bytes
//! tag count             1 byte
//! packed tag ids        13 bits each, MSB first, zero-padded to a byte
//! hyper length          4 bytes
//! hyper section         |hyper| bytes
//! main length           4 bytes
//! main section          |main| bytes
//! ```
//!
//! Parsing is strict: wrong magic, unknown version, any truncation, nonzero
//! tag padding and trailing bytes are each distinct errors.

use crate::error::{Error, ParseError, Result, Section};
use crate::tagging::{decode_tag_ids, encode_tag_ids, TagSet, TAG_BITS};

pub const MAGIC: [u8; 4] = *b"DICM";
pub const CONTAINER_VERSION: u8 = 1;

/// Conventional file extension for serialized containers.
pub const FILE_EXTENSION: &str = "dicmh";

const HEADER_BYTES: usize = 11;

/// One coded image: header fields plus the three variable-length sections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub quality_index: u8,
    pub width: u16,
    pub height: u16,
    pub tags: TagSet,
    pub hyper: Vec<u8>,
    pub main: Vec<u8>,
}

impl Container {
    /// Serializes to the wire format. The total length always equals
    /// [`Container::total_bits`] / 8.
    pub fn assemble(&self) -> Result<Vec<u8>> {
        if self.width == 0 || self.height == 0 {
            return Err(ParseError::InvalidHeader(format!(
                "zero image dimension {}x{}",
                self.width, self.height
            ))
            .into());
        }
        if self.tags.len() > u8::MAX as usize {
            return Err(ParseError::InvalidHeader(format!(
                "{} tags exceed the one-byte count field",
                self.tags.len()
            ))
            .into());
        }
        for section in [&self.hyper, &self.main] {
            if section.len() > u32::MAX as usize {
                return Err(ParseError::InvalidHeader("section exceeds u32 length".into()).into());
            }
        }
        let tag_bytes = encode_tag_ids(&self.tags)?;
        let mut out = Vec::with_capacity(self.total_bits() / 8);
        out.extend_from_slice(&MAGIC);
        out.push(CONTAINER_VERSION);
        out.push(self.quality_index);
        out.extend_from_slice(&self.width.to_be_bytes());
        out.extend_from_slice(&self.height.to_be_bytes());
        out.push(self.tags.len() as u8);
        out.extend_from_slice(&tag_bytes);
        out.extend_from_slice(&(self.hyper.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.hyper);
        out.extend_from_slice(&(self.main.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.main);
        Ok(out)
    }

    /// Strict inverse of [`Container::assemble`].
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, section: Section| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|e| *e <= bytes.len());
            match end {
                Some(end) => {
                    let s = &bytes[*pos..end];
                    *pos = end;
                    Ok(s)
                }
                None => Err(ParseError::Truncated { section }.into()),
            }
        };

        let header = take(&mut pos, HEADER_BYTES, Section::Header)?;
        let magic: [u8; 4] = header[0..4].try_into().expect("fixed slice");
        if magic != MAGIC {
            return Err(ParseError::BadMagic(magic).into());
        }
        if header[4] != CONTAINER_VERSION {
            return Err(ParseError::UnsupportedVersion(header[4]).into());
        }
        let quality_index = header[5];
        let width = u16::from_be_bytes([header[6], header[7]]);
        let height = u16::from_be_bytes([header[8], header[9]]);
        if width == 0 || height == 0 {
            return Err(ParseError::InvalidHeader(format!(
                "zero image dimension {width}x{height}"
            ))
            .into());
        }
        let tag_count = header[10] as usize;

        let tag_len = (tag_count * TAG_BITS).div_ceil(8);
        let tag_bytes = take(&mut pos, tag_len, Section::TagPayload)?;
        let tags = decode_tag_ids(tag_bytes, tag_count)?;

        let hyper_len =
            u32::from_be_bytes(take(&mut pos, 4, Section::HyperLength)?.try_into().expect("4"))
                as usize;
        let hyper = take(&mut pos, hyper_len, Section::Hyper)?.to_vec();
        let main_len =
            u32::from_be_bytes(take(&mut pos, 4, Section::MainLength)?.try_into().expect("4"))
                as usize;
        let main = take(&mut pos, main_len, Section::Main)?.to_vec();

        if pos != bytes.len() {
            return Err(ParseError::TrailingBytes(bytes.len() - pos).into());
        }
        Ok(Self { quality_index, width, height, tags, hyper, main })
    }

    /// Exact serialized size in bits: 88 header bits, padded tag payload,
    /// and the two length-prefixed sections.
    pub fn total_bits(&self) -> usize {
        let tag_bits = (self.tags.len() * TAG_BITS).div_ceil(8) * 8;
        8 * HEADER_BYTES + tag_bits + 32 + 8 * self.hyper.len() + 32 + 8 * self.main.len()
    }

    /// Validates that the quality index addresses the given rate ladder.
    pub fn check_quality(&self, ladder_len: usize) -> Result<()> {
        if (self.quality_index as usize) < ladder_len {
            Ok(())
        } else {
            Err(Error::InvalidArgument {
                what: format!(
                    "quality index {} outside the {ladder_len}-entry rate ladder",
                    self.quality_index
                ),
            })
        }
    }
}
