//! Binary PGM (`P5`) and PPM (`P6`) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Gray,
    Rgb,
}

impl Kind {
    fn magic(self) -> &'static str {
        match self {
            Kind::Gray => "P5",
            Kind::Rgb => "P6",
        }
    }

    fn channels(self) -> usize {
        match self {
            Kind::Gray => 1,
            Kind::Rgb => 3,
        }
    }
}

/// Maps `[0, 1]` to a byte with `round(v * 255)`.
pub fn quantize<T: Scalar>(v: T) -> Result<u8> {
    let v = v.to_f64_lossy();
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
    }
    Ok((v * 255.0).round() as u8)
}

pub fn dequantize<T: Scalar>(b: u8) -> T {
    T::from_f64_lossy(b as f64 / 255.0)
}

fn encode<T: Scalar>(img: &Tensor<T>, kind: Kind) -> Result<Vec<u8>> {
    let (c, h, w) = match *img.dims() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("netpbm", format!("expected (C, H, W), got {}", img.shape()))),
    };
    if c != kind.channels() {
        return Err(Error::shape(
            "netpbm",
            format!("{} needs {} channels, got {c}", kind.magic(), kind.channels()),
        ));
    }
    let mut out = format!("{}\n{w} {h}\n255\n", kind.magic()).into_bytes();
    let data = img.data();
    let plane = h * w;
    out.reserve(c * plane);
    // Channel-planar tensor to pixel-interleaved bytes.
    for p in 0..plane {
        for ch in 0..c {
            out.push(quantize(data[ch * plane + p])?);
        }
    }
    Ok(out)
}

struct Header<'a> {
    tokens: [usize; 3],
    payload: &'a [u8],
}

fn parse_header<'a>(bytes: &'a [u8], kind: Kind) -> Result<Header<'a>> {
    let malformed = |what: &str| Error::Corrupt(format!("malformed {} header: {what}", kind.magic()));
    if bytes.len() < 2 || &bytes[..2] != kind.magic().as_bytes() {
        return Err(malformed("bad magic"));
    }
    let mut pos = 2;
    let mut tokens = [0usize; 3];
    for slot in &mut tokens {
        // Whitespace and comments between tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("expected a number"));
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(malformed("missing whitespace after maxval")),
    }
    Ok(Header {
        tokens,
        payload: &bytes[pos..],
    })
}

fn decode<T: Scalar>(bytes: &[u8], kind: Kind) -> Result<Tensor<T>> {
    let Header {
        tokens: [w, h, maxval],
        payload,
    } = parse_header(bytes, kind)?;
    if maxval != 255 {
        return Err(Error::Unsupported(format!("maxval {maxval} (only 255 is supported)")));
    }
    let c = kind.channels();
    let shape = Shape::new(&[c, h, w]).map_err(|_| Error::Corrupt(format!("bad image size {w}x{h}")))?;
    let plane = h * w;
    if payload.len() < c * plane {
        return Err(Error::Corrupt(format!(
            "truncated payload: {} of {} bytes",
            payload.len(),
            c * plane
        )));
    }
    let mut data = vec![T::zero(); c * plane];
    for (p, px) in payload[..c * plane].chunks_exact(c).enumerate() {
        for (ch, &b) in px.iter().enumerate() {
            data[ch * plane + p] = dequantize(b);
        }
    }
    Tensor::new(shape, data)
}

pub fn encode_pgm<T: Scalar>(mask: &Tensor<T>) -> Result<Vec<u8>> {
    encode(mask, Kind::Gray)
}

pub fn encode_ppm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    encode(img, Kind::Rgb)
}

/// `(1, H, W)` tensor with values `b / 255`.
pub fn decode_pgm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    decode(bytes, Kind::Gray)
}

/// `(3, H, W)` tensor with values `b / 255`.
pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    decode(bytes, Kind::Rgb)
}

pub fn write_pgm<T: Scalar>(path: &Path, mask: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_pgm(mask)?).map_err(|e| Error::io(path, e))
}

pub fn write_ppm<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_pgm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_mask_round_trip() {
        let mask = Tensor::<f32>::from_slice(&[1, 2, 3], &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let bytes = encode_pgm(&mask).unwrap();
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 255, 255, 0, 0, 255]);
        assert_eq!(decode_pgm::<f32>(&bytes).unwrap(), mask);
    }

    #[test]
    fn parses_minimal_header() {
        let mut bytes = b"P5 4 4 255 ".to_vec();
        bytes.extend(0..16u8);
        let t = decode_pgm::<f64>(&bytes).unwrap();
        assert_eq!(t.dims(), &[1, 4, 4]);
        assert_eq!(t.data()[15], 15.0 / 255.0);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([10, 20, 30]);
        let t = decode_ppm::<f32>(&bytes).unwrap();
        assert_eq!(t.dims(), &[3, 1, 1]);
    }

    #[test]
    fn rgb_is_interleaved_on_disk() {
        let img = Tensor::<f64>::from_slice(&[3, 1, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(&bytes[bytes.len() - 6..], &[255, 0, 0, 0, 255, 0]);
        assert_eq!(decode_ppm::<f64>(&bytes).unwrap(), img);
    }

    #[test]
    fn quantized_data_round_trips_exactly() {
        let data: Vec<f64> = (0..48).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let img = Tensor::from_slice(&[3, 4, 4], &data).unwrap();
        let back = decode_ppm::<f64>(&encode_ppm(&img).unwrap()).unwrap();
        assert!(img.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn format_errors() {
        let mut bytes = b"P5 2 2 65535\n".to_vec();
        bytes.extend([0u8; 8]);
        assert!(matches!(decode_pgm::<f32>(&bytes), Err(Error::Unsupported(_))));
        assert!(matches!(decode_pgm::<f32>(b"P5 4 4 255\n\x00\x01"), Err(Error::Corrupt(_))));
        assert!(matches!(decode_pgm::<f32>(b"P5 4 x 255\n"), Err(Error::Corrupt(_))));
        assert!(matches!(decode_pgm::<f32>(b"P6 1 1 255\n\x00\x00\x00"), Err(Error::Corrupt(_))));
        assert!(matches!(decode_pgm::<f32>(b"P5 0 4 255\n"), Err(Error::Corrupt(_))));
        let img = Tensor::<f32>::from_slice(&[1, 1, 1], &[1.5]).unwrap();
        assert!(matches!(encode_pgm(&img), Err(Error::InvalidArgument(_))));
    }
}
