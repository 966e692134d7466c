//! 8-bit binary PGM (P5) encoding for [−1, 1] grayscale images.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps [−1, 1] to 0..=255 and emits a P5 file body.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    if c != 1 {
        return Err(Error::shape(format!("pgm expects [1,H,W], got C={c}")));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| {
        let byte = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round();
        byte as u8
    }));
    Ok(out)
}

pub fn write_pgm(image: &Tensor, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_pgm(image)?)?;
    Ok(())
}

/// Reads a P5 file back to a [1,H,W] tensor in [−1, 1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_pgm(&bytes)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| {
            Error::CorruptArtifact("pgm header is not ascii".to_string())
        })?);
    }
    if fields.len() != 4 || fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::CorruptArtifact("expected binary P5 with maxval 255".to_string()));
    }
    let w: usize = fields[1]
        .parse()
        .map_err(|_| Error::CorruptArtifact("bad pgm width".to_string()))?;
    let h: usize = fields[2]
        .parse()
        .map_err(|_| Error::CorruptArtifact("bad pgm height".to_string()))?;
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + h * w {
        return Err(Error::CorruptArtifact("pgm payload truncated".to_string()));
    }
    let data = bytes[pos..pos + h * w]
        .iter()
        .map(|&b| f32::from(b) / 127.5 - 1.0)
        .collect();
    Tensor::new(vec![1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_maps_range_to_bytes() {
        let img = Tensor::new(vec![1, 1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        let bytes = encode_pgm(&img).unwrap();
        let header = b"P5\n3 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0u8, 128, 255]);
    }

    #[test]
    fn decode_inverts_encode_within_quantization() {
        let img = Tensor::from_fn(&[1, 4, 5], |i| ((i as f32) / 10.0).sin());
        let bytes = encode_pgm(&img).unwrap();
        let back = decode_pgm(&bytes).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 127.5);
        }
    }
}
