//! Binary PPM (P6), PGM (P5) and raw `SLM1` label images.

use std::path::Path;

use thiserror::Error;

use crate::bytes::Reader;
use crate::scene::IGNORE_LABEL;

pub const SLM_MAGIC: &[u8; 4] = b"SLM1";

/// Largest pixel count accepted by the decoders.
const MAX_PIXELS: u64 = 1 << 28;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("malformed image: {0}")]
    Malformed(String),
    #[error("image truncated: {needed} bytes needed, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after image data")]
    TrailingBytes(usize),
    #[error("label {label} does not fit an 8-bit map")]
    LabelTooLarge { label: u16 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u16>,
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Reads the whitespace/comment separated header fields after the magic.
fn netpbm_header<'a>(bytes: &'a [u8], magic: &str) -> Result<([u64; 3], &'a [u8]), ImageError> {
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(ImageError::Malformed(format!("expected {magic} magic")));
    }
    let mut pos = magic.len();
    let mut fields = [0u64; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos || pos - start > 10 {
            return Err(ImageError::Malformed("bad header number".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| ImageError::Malformed("bad header number".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((fields, &bytes[pos + 1..])),
        _ => Err(ImageError::Malformed("header must end with one whitespace byte".into())),
    }
}

fn dims(w: u64, h: u64) -> Result<(u32, u32, usize), ImageError> {
    if w == 0 || h == 0 || w > u32::MAX as u64 || h > u32::MAX as u64 || w * h > MAX_PIXELS {
        return Err(ImageError::Malformed(format!("unsupported size {w}x{h}")));
    }
    Ok((w as u32, h as u32, (w * h) as usize))
}

fn exact_payload(body: &[u8], needed: usize) -> Result<&[u8], ImageError> {
    match body.len().cmp(&needed) {
        std::cmp::Ordering::Less => Err(ImageError::Truncated {
            needed,
            available: body.len(),
        }),
        std::cmp::Ordering::Greater => Err(ImageError::TrailingBytes(body.len() - needed)),
        std::cmp::Ordering::Equal => Ok(body),
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, ImageError> {
    let ([w, h, maxval], body) = netpbm_header(bytes, "P6")?;
    if maxval != 255 {
        return Err(ImageError::Malformed(format!("maxval {maxval}, only 255 supported")));
    }
    let (width, height, n) = dims(w, h)?;
    let data = exact_payload(body, n * 3)?.to_vec();
    Ok(RgbImage { width, height, data })
}

/// 8-bit label map; the ignore label is written as 255, so real labels must
/// stay below 255.
pub fn encode_pgm(img: &LabelImage) -> Result<Vec<u8>, ImageError> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    for &l in &img.labels {
        out.push(match l {
            IGNORE_LABEL => 255,
            l if l < 255 => l as u8,
            label => return Err(ImageError::LabelTooLarge { label }),
        });
    }
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelImage, ImageError> {
    let ([w, h, maxval], body) = netpbm_header(bytes, "P5")?;
    if maxval != 255 {
        return Err(ImageError::Malformed(format!("maxval {maxval}, only 255 supported")));
    }
    let (width, height, n) = dims(w, h)?;
    let labels = exact_payload(body, n)?
        .iter()
        .map(|&b| if b == 255 { IGNORE_LABEL } else { b as u16 })
        .collect();
    Ok(LabelImage { width, height, labels })
}

/// `SLM1`, height u32, width u32, then row-major little-endian u16 labels.
pub fn encode_slm(img: &LabelImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + img.labels.len() * 2);
    out.extend_from_slice(SLM_MAGIC);
    out.extend_from_slice(&img.height.to_le_bytes());
    out.extend_from_slice(&img.width.to_le_bytes());
    for l in &img.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_slm(bytes: &[u8]) -> Result<LabelImage, ImageError> {
    let trunc = |t: crate::bytes::Truncated| ImageError::Truncated {
        needed: t.offset + t.wanted,
        available: bytes.len(),
    };
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(trunc)? != SLM_MAGIC {
        return Err(ImageError::Malformed("expected SLM1 magic".into()));
    }
    let h = r.u32().map_err(trunc)?;
    let w = r.u32().map_err(trunc)?;
    let (width, height, n) = dims(w as u64, h as u64)?;
    let body = exact_payload(&bytes[r.position()..], n * 2)?;
    let labels = body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Ok(LabelImage { width, height, labels })
}

/// Dispatches on the leading magic bytes.
pub fn decode_label_image(bytes: &[u8]) -> Result<LabelImage, ImageError> {
    if bytes.starts_with(SLM_MAGIC) {
        decode_slm(bytes)
    } else {
        decode_pgm(bytes)
    }
}

/// PGM when every class id fits below 255 (`num_classes < 256`), otherwise `SLM1`.
pub fn save_label_image(img: &LabelImage, num_classes: usize, path: &Path) -> Result<(), ImageError> {
    let bytes = if num_classes < 256 {
        encode_pgm(img)?
    } else {
        encode_slm(img)
    };
    std::fs::write(path, bytes).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_label_image(path: &Path) -> Result<LabelImage, ImageError> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_label_image(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_and_comments() {
        let img = RgbImage {
            width: 2,
            height: 1,
            data: vec![1, 2, 3, 250, 251, 252],
        };
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
        let mut commented = b"P6 # made by hand\n2 1\n# max\n255\n".to_vec();
        commented.extend_from_slice(&img.data);
        assert_eq!(decode_ppm(&commented).unwrap(), img);
    }

    #[test]
    fn pgm_maps_ignore_to_255() {
        let img = LabelImage {
            width: 3,
            height: 1,
            labels: vec![0, IGNORE_LABEL, 4],
        };
        let bytes = encode_pgm(&img).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 255, 4]);
        assert_eq!(decode_pgm(&bytes).unwrap(), img);
        let wide = LabelImage {
            labels: vec![300, 0, 0],
            ..img
        };
        assert!(matches!(encode_pgm(&wide), Err(ImageError::LabelTooLarge { label: 300 })));
    }

    #[test]
    fn slm_round_trip() {
        let img = LabelImage {
            width: 2,
            height: 2,
            labels: vec![0, 300, IGNORE_LABEL, 7],
        };
        let bytes = encode_slm(&img);
        assert_eq!(bytes.len(), 12 + 8);
        assert_eq!(decode_label_image(&bytes).unwrap(), img);
        assert!(matches!(decode_slm(&bytes[..15]), Err(ImageError::Truncated { .. })));
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n0 1\n255\n").is_err());
        assert!(decode_pgm(b"P5\n99999999999 1\n255\n").is_err());
        assert!(matches!(decode_pgm(b"P5\n1 1\n255\n\0\0"), Err(ImageError::TrailingBytes(1))));
    }
}
