//! Binary PPM (P6) and PGM (P5) rasters with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "pnm",
        detail: detail.into(),
    }
}

/// Parse a P5 or P6 file into a `[C, H, W]` tensor scaled to [0, 1].
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(malformed("expected P5 or P6 magic")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(malformed("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("header field out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(malformed(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(malformed("zero image dimension"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("missing separator after header"));
    }
    let payload = &bytes[pos + 1..];
    let expect = w * h * channels;
    if payload.len() != expect {
        return Err(malformed(format!("expected {expect} payload bytes, found {}", payload.len())));
    }
    let plane = w * h;
    let mut data = vec![0.0f32; expect];
    for (i, &b) in payload.iter().enumerate() {
        data[(i % channels) * plane + i / channels] = b as f32 / 255.0;
    }
    Tensor::new(vec![channels, h, w], data)
}

fn quantize(v: f32) -> Result<u8> {
    if !v.is_finite() {
        return Err(Error::NonFinite("image to be saved".into()));
    }
    Ok((v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Encode a `[3, H, W]` (P6) or `[1, H, W]` / `[H, W]` (P5) tensor.
pub fn encode(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (channels, h, w) = match image.shape() {
        &[c @ (1 | 3), h, w] => (c, h, w),
        &[h, w] => (1, h, w),
        s => return Err(Error::shape("encode_pnm", format!("expected [1|3, H, W] or [H, W], got {s:?}"))),
    };
    let magic = if channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = w * h;
    let data = image.data();
    out.reserve(plane * channels);
    for p in 0..plane {
        for c in 0..channels {
            out.push(quantize(data[c * plane + p])?);
        }
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let t = read(path.as_ref())?;
    if t.shape()[0] != 3 {
        return Err(malformed(format!("{} is not a P6 image", path.as_ref().display())));
    }
    Ok(t)
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let t = read(path.as_ref())?;
    if t.shape()[0] != 1 {
        return Err(malformed(format!("{} is not a P5 image", path.as_ref().display())));
    }
    Ok(t)
}

fn write(image: &Tensor<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(image)?).map_err(|e| Error::io(path, e))
}

pub fn save_ppm(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape("save_ppm", format!("expected [3, H, W], got {:?}", image.shape())));
    }
    write(image, path.as_ref())
}

pub fn save_pgm(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    if image.rank() == 3 && image.shape()[0] != 1 {
        return Err(Error::shape("save_pgm", format!("expected one channel, got {:?}", image.shape())));
    }
    write(image, path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_bytes_decode() {
        let mut file = b"P6\n2 2\n255\n".to_vec();
        file.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153]);
        let t = decode(&file).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.2, 0.0, 1.0, 0.0, 0.4, 0.0, 0.0, 1.0, 0.6]);
    }

    #[test]
    fn comments_and_whitespace_in_header() {
        let mut file = b"P5 # mask\n# size follows\n 3\t1\n255\n".to_vec();
        file.extend_from_slice(&[0, 128, 255]);
        let t = decode(&file).unwrap();
        assert_eq!(t.shape(), &[1, 1, 3]);
        assert_eq!(t.data()[1], 128.0 / 255.0);
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(decode(b"P3\n1 1\n255\n\0\0\0").is_err());
        assert!(decode(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode(b"P6\n1 1\n255\n\0\0").is_err());
        assert!(decode(b"P6\n1").is_err());
        assert!(decode(b"P6\nx 1\n255\n\0\0\0").is_err());
    }

    #[test]
    fn zero_tensor_payload_is_zero_bytes() {
        let bytes = encode(&Tensor::zeros(vec![3, 2, 3])).unwrap();
        let header = b"P6\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), header.len() + 18);
    }
}
