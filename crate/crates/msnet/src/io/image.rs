//! Minimal image I/O: binary PPM (P6) input and 16-bit binary PGM (P5)
//! output. Both formats are self-describing and codec-free.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn bad(detail: impl Into<String>) -> Error {
    Error::Image { detail: detail.into() }
}

/// Skip whitespace and `#` comments, then read one ASCII token.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(bad("unexpected end of header"));
    }
    Ok(&bytes[start..*pos])
}

fn parse_usize(token: &[u8]) -> Result<usize> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("invalid number `{}`", String::from_utf8_lossy(token))))
}

/// Read a binary PPM (P6, maxval 255) into a (1, 3, H, W) tensor with
/// values scaled to [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    decode_ppm(&bytes)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(bad(format!("expected P6 magic, got `{}`", String::from_utf8_lossy(magic))));
    }
    let w = parse_usize(next_token(bytes, &mut pos)?)?;
    let h = parse_usize(next_token(bytes, &mut pos)?)?;
    let maxval = parse_usize(next_token(bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(bad(format!("only maxval 255 is supported, got {maxval}")));
    }
    pos += 1; // single whitespace byte after the header
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(bad(format!("truncated pixel data: need {need} bytes, have {}", bytes.len() - pos)));
    }
    // Planar NCHW from interleaved RGB.
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = bytes[pos + (y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data)
}

/// Encode a PPM from a (1, 3, H, W) tensor in [0, 1] (values clamped).
pub fn encode_ppm(t: &Tensor<f32>) -> Result<Vec<u8>> {
    if t.rank() != 4 || t.shape()[0] != 1 || t.shape()[1] != 3 {
        return Err(bad(format!("expected shape (1, 3, H, W), got {:?}", t.shape())));
    }
    let (h, w) = (t.shape()[2], t.shape()[3]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = t.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[(c * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Write a [0, 1] matrix as 16-bit binary PGM (P5, maxval 65535,
/// big-endian sample bytes).
pub fn write_pgm16(path: &Path, matrix: &[f64], h: usize, w: usize) -> Result<()> {
    fs::write(path, encode_pgm16(matrix, h, w)?)?;
    Ok(())
}

pub fn encode_pgm16(matrix: &[f64], h: usize, w: usize) -> Result<Vec<u8>> {
    if matrix.len() != h * w {
        return Err(bad(format!("matrix length {} does not match {h}x{w}", matrix.len())));
    }
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in matrix {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

/// Read a raw little-endian f32 blob laid out as (1, 3, H, W).
pub fn read_raw_f32(path: &Path, h: usize, w: usize) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let need = 3 * h * w * 4;
    if bytes.len() != need {
        return Err(bad(format!("raw blob must be exactly {need} bytes for 3x{h}x{w}, got {}", bytes.len())));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&[1, 3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let data: Vec<f32> = (0..3 * 4 * 2).map(|i| (i % 256) as f32 / 255.0).collect();
        let t = Tensor::from_vec(&[1, 3, 2, 4], data).unwrap();
        let bytes = encode_ppm(&t).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1.0 / 255.0);
        }
    }

    #[test]
    fn ppm_with_comment_and_bad_magic() {
        let bytes = b"P6\n# a comment\n2 1\n255\nabcdef".to_vec();
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert!(decode_ppm(b"P5\n2 1\n255\nabcdef").is_err());
        assert!(decode_ppm(b"P6\n9 9\n255\nshort").is_err());
    }

    #[test]
    fn pgm16_is_big_endian() {
        let bytes = encode_pgm16(&[0.0, 1.0], 1, 2).unwrap();
        let header_end = bytes.len() - 4;
        assert_eq!(&bytes[header_end..], &[0x00, 0x00, 0xff, 0xff]);
    }
}
