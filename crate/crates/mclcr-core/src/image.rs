//! 8-bit images and binary PNM (P5/P6) I/O.
//!
//! PNM is the only image format here: bit-exact, codec-free, and writable
//! from any language. Writers emit the exact header `P5\n<w> <h>\n255\n`
//! (or `P6`), so identical pixels always produce identical files.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("unsupported PNM format {0:?} (expected P5 or P6)")]
    UnsupportedFormat(String),
    #[error("unsupported maxval {0} (expected 255)")]
    UnsupportedMaxval(u32),
    #[error("malformed PNM header: {0}")]
    MalformedHeader(String),
    #[error("truncated PNM payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major 8-bit image, 1 (grayscale) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        assert_eq!(pixels.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            pixels,
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(height, width, channels, vec![0; height * width * channels])
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }
}

pub fn write_pnm(image: &Image, path: impl AsRef<Path>) -> Result<(), PnmError> {
    let magic = match image.channels {
        1 => "P5",
        3 => "P6",
        _ => unreachable!("Image invariant"),
    };
    let mut bytes = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend_from_slice(&image.pixels);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Image, PnmError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_pnm(&bytes)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image, PnmError> {
    let mut cursor = 0usize;
    let magic = next_token(bytes, &mut cursor)
        .ok_or_else(|| PnmError::MalformedHeader("missing magic".into()))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(PnmError::UnsupportedFormat(other.to_string())),
    };
    let width = parse_dim(bytes, &mut cursor, "width")?;
    let height = parse_dim(bytes, &mut cursor, "height")?;
    let maxval = parse_dim(bytes, &mut cursor, "maxval")? as u32;
    if maxval != 255 {
        return Err(PnmError::UnsupportedMaxval(maxval));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if cursor >= bytes.len() || !bytes[cursor].is_ascii_whitespace() {
        return Err(PnmError::MalformedHeader(
            "missing whitespace before payload".into(),
        ));
    }
    cursor += 1;
    let expected = width * height * channels;
    let found = bytes.len() - cursor;
    if found < expected {
        return Err(PnmError::Truncated { expected, found });
    }
    Ok(Image::new(
        height,
        width,
        channels,
        bytes[cursor..cursor + expected].to_vec(),
    ))
}

fn parse_dim(bytes: &[u8], cursor: &mut usize, what: &str) -> Result<usize, PnmError> {
    let tok = next_token(bytes, cursor)
        .ok_or_else(|| PnmError::MalformedHeader(format!("missing {what}")))?;
    tok.parse::<usize>()
        .map_err(|_| PnmError::MalformedHeader(format!("bad {what} {tok:?}")))
}

/// Next whitespace-delimited header token, skipping `#` comment lines.
fn next_token(bytes: &[u8], cursor: &mut usize) -> Option<String> {
    loop {
        while *cursor < bytes.len() && bytes[*cursor].is_ascii_whitespace() {
            *cursor += 1;
        }
        if *cursor < bytes.len() && bytes[*cursor] == b'#' {
            while *cursor < bytes.len() && bytes[*cursor] != b'\n' {
                *cursor += 1;
            }
            continue;
        }
        break;
    }
    let start = *cursor;
    while *cursor < bytes.len() && !bytes[*cursor].is_ascii_whitespace() {
        *cursor += 1;
    }
    if *cursor == start {
        None
    } else {
        Some(String::from_utf8_lossy(&bytes[start..*cursor]).into_owned())
    }
}

/// BT.601 luminance, rounded half-up. Grayscale input is returned unchanged.
pub fn to_grayscale(image: &Image) -> Image {
    if image.channels == 1 {
        return image.clone();
    }
    let mut pixels = Vec::with_capacity(image.height * image.width);
    for px in image.pixels.chunks_exact(3) {
        let y = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
        pixels.push((y + 0.5).floor().clamp(0.0, 255.0) as u8);
    }
    Image::new(image.height, image.width, 1, pixels)
}
