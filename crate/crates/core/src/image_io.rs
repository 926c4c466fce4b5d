//! Binary PGM (P5) and PPM (P6) images with 8-bit samples.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit pixels with 1 (grey) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Format("image has a zero dimension".into()));
        }
        if width * height * channels != data.len() {
            return Err(Error::Format(format!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }
}

pub fn read_pnm(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path)?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_pnm(bytes: &[u8]) -> Result<RawImage> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported image format '{other}' (need P5 or P6)"))),
    };
    let width = parse_num(&next_token(bytes, &mut pos)?)?;
    let height = parse_num(&next_token(bytes, &mut pos)?)?;
    let maxval = parse_num(&next_token(bytes, &mut pos)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("only 8-bit images are supported (maxval {maxval})")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let len = width * height * channels;
    let raster = bytes
        .get(pos..pos + len)
        .ok_or_else(|| Error::Format(format!("raster truncated: need {len} bytes")))?;
    RawImage::new(width, height, channels, raster.to_vec())
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|b| *b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Format("unexpected end of image header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_num(token: &str) -> Result<usize> {
    token
        .parse()
        .map_err(|_| Error::Format(format!("bad number '{token}' in image header")))
}

/// Encodes as P5/P6, with optional `#` comment lines after the magic number.
pub fn encode_pnm(image: &RawImage, comments: &[String]) -> Result<Vec<u8>> {
    let magic = match image.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Format(format!("cannot encode a {c}-channel image"))),
    };
    let mut out = Vec::with_capacity(image.data.len() + 64);
    writeln!(out, "{magic}")?;
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    write!(out, "{} {}\n255\n", image.width, image.height)?;
    out.extend_from_slice(&image.data);
    Ok(out)
}

pub fn write_pnm(path: &Path, image: &RawImage, comments: &[String]) -> Result<()> {
    fs::write(path, encode_pnm(image, comments)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_with_comments() {
        let img = RawImage::gray(3, 2, vec![0, 10, 20, 30, 40, 255]).unwrap();
        let bytes = encode_pnm(&img, &["made by test".into(), "seed=1".into()]).unwrap();
        assert!(bytes.starts_with(b"P5\n# made by test\n"));
        assert_eq!(decode_pnm(&bytes).unwrap(), img);
    }

    #[test]
    fn ppm_roundtrip() {
        let img = RawImage::new(2, 1, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let bytes = encode_pnm(&img, &[]).unwrap();
        assert_eq!(decode_pnm(&bytes).unwrap(), img);
    }

    #[test]
    fn rejects_other_formats_and_truncation() {
        assert!(matches!(decode_pnm(b"P2\n1 1\n255\n0"), Err(Error::Format(_))));
        assert!(matches!(decode_pnm(b"P5\n4 4\n255\n\x01\x02"), Err(Error::Format(_))));
        assert!(matches!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00"), Err(Error::Format(_))));
    }
}
