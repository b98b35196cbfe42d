//! Binary netpbm encoders and decoders: P6 (RGB), P5 (16-bit gray), P4 (bitmap).

use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};

pub fn encode_ppm(raster: &Raster) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", raster.width(), raster.height()).into_bytes();
    out.extend_from_slice(&raster.to_bytes());
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Raster> {
    let (header, body) = parse_header(bytes, "P6", true)?;
    if header.maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {}", header.maxval)));
    }
    let need = header.width * header.height * 3;
    if body.len() < need {
        return Err(Error::Format(format!("PPM body has {} of {need} bytes", body.len())));
    }
    Raster::from_bytes(header.height, header.width, &body[..need])
}

/// Encodes a nonnegative scalar field as a 16-bit PGM, scaling linearly so
/// `max_value` maps to 65535. Returns the bytes; `max_value <= 0` yields black.
pub fn encode_pgm16(width: usize, height: usize, values: &[f64], max_value: f64) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in values {
        let q = if max_value > 0.0 {
            ((v / max_value).clamp(0.0, 1.0) * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

/// Decodes a 16-bit PGM into `(width, height, samples)`.
pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let (header, body) = parse_header(bytes, "P5", true)?;
    if header.maxval != 65535 {
        return Err(Error::Format(format!("expected 16-bit PGM, maxval {}", header.maxval)));
    }
    let n = header.width * header.height;
    if body.len() < 2 * n {
        return Err(Error::Format("PGM body truncated".into()));
    }
    let values = body[..2 * n]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((header.width, header.height, values))
}

pub fn encode_pbm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P4\n{} {}\n", mask.width(), mask.height()).into_bytes();
    let row_bytes = mask.width().div_ceil(8);
    for r in 0..mask.height() {
        let mut row = vec![0u8; row_bytes];
        for c in 0..mask.width() {
            if mask.get(r, c) {
                row[c / 8] |= 0x80 >> (c % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    out
}

pub fn decode_pbm(bytes: &[u8]) -> Result<Mask> {
    let (header, body) = parse_header(bytes, "P4", false)?;
    let row_bytes = header.width.div_ceil(8);
    if body.len() < row_bytes * header.height {
        return Err(Error::Format("PBM body truncated".into()));
    }
    let mut mask = Mask::new(header.height, header.width);
    for r in 0..header.height {
        for c in 0..header.width {
            if body[r * row_bytes + c / 8] & (0x80 >> (c % 8)) != 0 {
                mask.set(r, c, true);
            }
        }
    }
    Ok(mask)
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str, has_maxval: bool) -> Result<(Header, &'a [u8])> {
    let mut pos = 0;
    let mut tokens = Vec::new();
    let wanted = if has_maxval { 4 } else { 3 };
    while tokens.len() < wanted {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated header".into()));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("non-ASCII header".into()))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if tokens[0] != magic {
        return Err(Error::Format(format!("expected magic {magic}, found {}", tokens[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad header number {s:?}")))
    };
    let header = Header {
        width: num(tokens[1])?,
        height: num(tokens[2])?,
        maxval: if has_maxval { num(tokens[3])? } else { 1 },
    };
    Ok((header, bytes.get(pos..).unwrap_or(&[])))
}
