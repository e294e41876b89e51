//! PFM depth maps and binary PPM images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor2, Tensor4};

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

/// Splits off `count` whitespace-separated header tokens and the single
/// whitespace byte that ends the header.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, &[u8])> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return format_err("truncated header");
        }
        let tok = std::str::from_utf8(&bytes[start..i]).map_err(|_| Error::Format("header is not ASCII".into()))?;
        tokens.push(tok.to_string());
    }
    if i >= bytes.len() {
        return format_err("missing pixel data");
    }
    Ok((tokens, &bytes[i + 1..]))
}

fn parse_dim(tok: &str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => format_err(format!("bad dimension {tok:?}")),
    }
}

/// Grayscale little-endian PFM; rows are stored bottom to top.
pub fn encode_pfm(depth: &Tensor2) -> Vec<u8> {
    let [h, w] = depth.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    for r in (0..h).rev() {
        for &v in depth.row(r) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor2> {
    let (tok, body) = header_tokens(bytes, 4)?;
    if tok[0] != "Pf" {
        return format_err(format!("expected grayscale PFM, found {:?}", tok[0]));
    }
    let (w, h) = (parse_dim(&tok[1])?, parse_dim(&tok[2])?);
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| Error::Format(format!("bad scale {:?}", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return format_err("PFM scale must be nonzero");
    }
    let little = scale < 0.0;
    if body.len() != 4 * w * h {
        return format_err(format!("expected {} data bytes, found {}", 4 * w * h, body.len()));
    }
    let mut data = vec![0.0; w * h];
    for (k, c) in body.chunks_exact(4).enumerate() {
        let b: [u8; 4] = c.try_into().expect("4-byte chunk");
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (r, col) = (h - 1 - k / w, k % w);
        data[r * w + col] = v as f64;
    }
    Tensor2::from_vec([h, w], data)
}

pub fn write_pfm(path: &Path, depth: &Tensor2) -> Result<()> {
    fs::write(path, encode_pfm(depth))?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Tensor2> {
    decode_pfm(&fs::read(path)?)
}

/// 8-bit binary PPM of image `n` of a `(n, 3, H, W)` tensor with values in
/// `[0, 1]`; out-of-range values are clamped.
pub fn encode_ppm(rgb: &Tensor4, n: usize) -> Result<Vec<u8>> {
    let [b, c, h, w] = rgb.dims();
    if c != 3 || n >= b {
        return Err(Error::Shape(format!("cannot write image {n} of {:?} as RGB", rgb.dims())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..3 {
                let v = rgb.at(n, ch, r, col);
                out.push((255.0 * v).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

/// Decodes to `(1, 3, H, W)` in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor4> {
    let (tok, body) = header_tokens(bytes, 4)?;
    if tok[0] != "P6" {
        return format_err(format!("expected binary PPM, found {:?}", tok[0]));
    }
    let (w, h) = (parse_dim(&tok[1])?, parse_dim(&tok[2])?);
    if tok[3] != "255" {
        return format_err("only 8-bit PPM is supported");
    }
    if body.len() != 3 * w * h {
        return format_err(format!("expected {} data bytes, found {}", 3 * w * h, body.len()));
    }
    let mut t = Tensor4::zeros([1, 3, h, w])?;
    for (k, px) in body.chunks_exact(3).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            t.set(0, ch, k / w, k % w, v as f64 / 255.0);
        }
    }
    Ok(t)
}

pub fn write_ppm(path: &Path, rgb: &Tensor4, n: usize) -> Result<()> {
    fs::write(path, encode_ppm(rgb, n)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor4> {
    decode_ppm(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pfm_layout_and_round_trip() {
        let d = Tensor2::from_fn([2, 3], |r, c| (r * 3 + c) as f64 + 0.5).unwrap();
        let bytes = encode_pfm(&d);
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        let body = &bytes[bytes.len() - 24..];
        // First stored row is the bottom one.
        assert_eq!(f32::from_le_bytes(body[..4].try_into().unwrap()), 3.5);
        assert_eq!(decode_pfm(&bytes).unwrap(), d);
    }

    #[test]
    fn pfm_big_endian_and_errors() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.25f32.to_be_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap().data(), &[2.25]);
        assert!(matches!(decode_pfm(b"PF\n1 1\n-1.0\n0000"), Err(Error::Format(_))));
        assert!(matches!(decode_pfm(b"Pf\n2 1\n-1.0\n0000"), Err(Error::Format(_))));
    }

    #[test]
    fn ppm_round_trip_within_quantisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor4::random_uniform([1, 3, 4, 5], 0.0, 1.0, &mut rng).unwrap();
        let back = decode_ppm(&encode_ppm(&t, 0).unwrap()).unwrap();
        assert!(t.max_abs_diff(&back).unwrap() <= 0.5 / 255.0 + 1e-12);
        let exact = decode_ppm(&encode_ppm(&back, 0).unwrap()).unwrap();
        assert_eq!(exact, back);
    }

    #[test]
    fn ppm_clamps() {
        let t = Tensor4::from_vec([1, 3, 1, 1], vec![-0.2, 0.5, 1.7]).unwrap();
        let bytes = encode_ppm(&t, 0).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }

    #[test]
    fn files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let d = Tensor2::new_filled([3, 4], 1.25).unwrap();
        write_pfm(&p, &d).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), d);
    }
}
