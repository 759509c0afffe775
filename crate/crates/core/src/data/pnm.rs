//! Binary PGM (P5) reading and writing.
//!
//! Only 8-bit images (`maxval` 255) are accepted. The header may contain
//! arbitrary whitespace and `#` comments between tokens.

/// Raw 8-bit greyscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PgmError {
    Malformed(String),
    Unsupported(String),
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, PgmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PgmError::Malformed(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PgmError::Malformed(format!("bad {what}")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    match bytes.get(..2) {
        Some(b"P5") => {}
        Some(b"P2") => return Err(PgmError::Unsupported("plain (P2) PGM".into())),
        _ => return Err(PgmError::Malformed("missing P5 magic".into())),
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval > 255 {
        return Err(PgmError::Unsupported(format!("16-bit PGM (maxval {maxval})")));
    }
    if maxval != 255 {
        return Err(PgmError::Unsupported(format!("maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(PgmError::Malformed("no whitespace after maxval".into())),
    }
    if width == 0 || height == 0 {
        return Err(PgmError::Malformed(format!("empty image {width}x{height}")));
    }
    let len = width * height;
    let raster = &bytes[cur.pos..];
    if raster.len() < len {
        return Err(PgmError::Malformed(format!(
            "raster has {} bytes, expected {len}",
            raster.len()
        )));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: raster[..len].to_vec(),
    })
}

/// `P5\n<width> <height>\n255\n` followed by the raw row-major bytes.
pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}
