//! 16-bit PGM depth maps and PFM float images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Depth units per metre in 16-bit PGM files.
pub const PGM_DEPTH_SCALE: f64 = 256.0;

/// Reads whitespace-separated header tokens, skipping `#` comments, and
/// returns them with the offset of the byte after the final separator.
fn header_tokens(buf: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < buf.len() && (buf[i].is_ascii_whitespace() || buf[i] == b'#') {
            if buf[i] == b'#' {
                while i < buf.len() && buf[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < buf.len() && !buf[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated header".into()));
        }
        tokens.push(String::from_utf8_lossy(&buf[start..i]).into_owned());
    }
    if i >= buf.len() || !buf[i].is_ascii_whitespace() {
        return Err(Error::Format("header not terminated by whitespace".into()));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(tok: &str, what: &str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::Format(format!("bad {what} {tok:?}"))),
    }
}

/// Encodes an H×W (or 1×1×H×W) depth map in metres.
pub fn encode_pgm16(depth: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(depth)?;
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(2 * h * w);
    for &d in depth.data() {
        let raw = (d * PGM_DEPTH_SCALE).round();
        if !(0.0..=65535.0).contains(&raw) {
            return Err(Error::Format(format!("depth {d} m not representable in 16-bit PGM")));
        }
        out.extend_from_slice(&(raw as u16).to_be_bytes());
    }
    Ok(out)
}

/// Decodes to a 1×1×H×W depth map in metres; 0 marks missing depth.
pub fn decode_pgm16(buf: &[u8]) -> Result<Tensor> {
    let (tok, off) = header_tokens(buf, 4)?;
    if tok[0] != "P5" {
        return Err(Error::Format(format!("expected P5, found {:?}", tok[0])));
    }
    let (w, h) = (parse_dim(&tok[1], "width")?, parse_dim(&tok[2], "height")?);
    if tok[3] != "65535" {
        return Err(Error::Format(format!("maxval must be 65535, found {:?}", tok[3])));
    }
    let body = &buf[off..];
    if body.len() != 2 * h * w {
        return Err(Error::Format(format!("expected {} data bytes, found {}", 2 * h * w, body.len())));
    }
    let data = body
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / PGM_DEPTH_SCALE)
        .collect();
    Tensor::new(&[1, 1, h, w], data)
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, 1, h, w] => Ok((h, w)),
        _ => Err(Error::dim("pgm16", format!("expected a single H×W plane, got {:?}", t.shape()))),
    }
}

pub fn write_pgm16(path: &Path, depth: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pgm16(depth)?).map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

pub fn read_pgm16(path: &Path) -> Result<Tensor> {
    decode_pgm16(&std::fs::read(path).map_err(|e| Error::io_at(path, e))?)
}

/// Encodes a 1×1×H×W (`Pf`) or 1×3×H×W (`PF`) tensor, little-endian,
/// rows stored bottom to top.
pub fn encode_pfm(t: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = t.dims4()?;
    let tag = match (n, c) {
        (1, 1) => "Pf",
        (1, 3) => "PF",
        _ => return Err(Error::dim("pfm", format!("expected 1×1×H×W or 1×3×H×W, got {:?}", t.shape()))),
    };
    if !t.is_finite() {
        return Err(Error::Format("PFM refuses non-finite values".into()));
    }
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&(t.at4(0, ch, y, x) as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_pfm(buf: &[u8]) -> Result<Tensor> {
    let (tok, off) = header_tokens(buf, 4)?;
    let c = match tok[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::Format(format!("expected Pf or PF, found {other:?}"))),
    };
    let (w, h) = (parse_dim(&tok[1], "width")?, parse_dim(&tok[2], "height")?);
    let scale: f64 = tok[3].parse().map_err(|_| Error::Format(format!("bad scale {:?}", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format(format!("bad scale {scale}")));
    }
    let little = scale < 0.0;
    let body = &buf[off..];
    if body.len() != 4 * c * h * w {
        return Err(Error::Format(format!(
            "expected {} data bytes, found {}",
            4 * c * h * w,
            body.len()
        )));
    }
    let mut data = vec![0.0; c * h * w];
    for (k, b) in body.chunks_exact(4).enumerate() {
        let b = [b[0], b[1], b[2], b[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, rest) = (k / (w * c), k % (w * c));
        let (x, ch) = (rest / c, rest % c);
        data[(ch * h + (h - 1 - row)) * w + x] = v as f64;
    }
    Tensor::new(&[1, c, h, w], data).map_err(|_| Error::Format("PFM contains non-finite values".into()))
}

pub fn write_pfm(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pfm(t)?).map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    decode_pfm(&std::fs::read(path).map_err(|e| Error::io_at(path, e))?)
}
