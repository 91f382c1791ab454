//! 8-bit RGB images and binary PPM (P6, maxval 255) input/output.

use std::fs;
use std::path::Path;

use crate::error::{Result, SapmError};
use crate::tensor::Tensor;

/// Interleaved RGB image, row-major, 8 bits per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(w: usize, h: usize, data: Vec<u8>) -> Image {
        assert_eq!(
            data.len(),
            3 * w * h,
            "pixel payload does not match dimensions"
        );
        Image { w, h, data }
    }

    pub fn filled(w: usize, h: usize, rgb: [u8; 3]) -> Image {
        let mut data = Vec::with_capacity(3 * w * h);
        for _ in 0..w * h {
            data.extend_from_slice(&rgb);
        }
        Image { w, h, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.w + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar `(1, 3, H, W)` tensor with samples scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.w * self.h;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.data[3 * p + c] as f64 / 255.0;
            }
        }
        Tensor::new(vec![1, 3, self.h, self.w], out)
    }

    /// Inverse of [`Image::to_tensor`]: clip to `[0, 1]`, scale, round.
    pub fn from_tensor(t: &Tensor) -> Image {
        let (n, c, h, w) = t.dims4();
        assert!(n == 1 && c == 3, "expected a single RGB image tensor");
        let hw = h * w;
        let mut data = vec![0u8; 3 * hw];
        for p in 0..hw {
            for ch in 0..3 {
                let v = t.data()[ch * hw + p].clamp(0.0, 1.0);
                data[3 * p + ch] = (v * 255.0).round() as u8;
            }
        }
        Image { w, h, data }
    }

    /// Extract a `cw x ch` crop with its top-left corner at `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, cw: usize, chh: usize) -> Image {
        assert!(x + cw <= self.w && y + chh <= self.h, "crop outside image");
        let mut data = Vec::with_capacity(3 * cw * chh);
        for row in y..y + chh {
            let start = 3 * (row * self.w + x);
            data.extend_from_slice(&self.data[start..start + 3 * cw]);
        }
        Image {
            w: cw,
            h: chh,
            data,
        }
    }
}

fn parse_header_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    // Skip whitespace and '#' comments between tokens.
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    if *pos == start {
        return Err(SapmError::format("malformed ppm header"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| SapmError::format("ppm header value out of range"))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(SapmError::format("not a binary ppm (P6) file"));
    }
    let mut pos = 2;
    let w = parse_header_token(bytes, &mut pos)?;
    let h = parse_header_token(bytes, &mut pos)?;
    let maxval = parse_header_token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(SapmError::format(format!(
            "ppm maxval {maxval} unsupported; need 255"
        )));
    }
    if w == 0 || h == 0 {
        return Err(SapmError::format("ppm with zero dimension"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(SapmError::format("missing separator before ppm payload"));
    }
    pos += 1;
    let need = 3 * w * h;
    let payload = bytes
        .get(pos..pos + need)
        .ok_or_else(|| SapmError::format("ppm payload shorter than declared dimensions"))?;
    Ok(Image::new(w, h, payload.to_vec()))
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| SapmError::io(format!("{}: {e}", path.display())))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| SapmError::io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bytes() {
        let img = Image::new(2, 3, (0..18).map(|i| (i * 13) as u8).collect());
        let bytes = encode_ppm(&img);
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6 # a comment\n# another\n 2\n1 # w h\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.w, img.h), (2, 1));
        assert_eq!(img.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        let short = b"P6\n2 2\n255\n\0\0\0".to_vec();
        assert!(decode_ppm(&short).is_err());
        assert!(decode_ppm(b"P6\n0 4\n255\n").is_err());
    }

    #[test]
    fn tensor_conversion_roundtrip() {
        let img = Image::new(3, 2, (0..18).map(|i| (i * 11 + 7) as u8).collect());
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 2, 3]);
        assert_eq!(Image::from_tensor(&t), img);
        // Values outside [0,1] clip.
        let hot = Tensor::new(vec![1, 3, 1, 1], vec![-0.2, 0.5, 1.7]);
        assert_eq!(Image::from_tensor(&hot).data, vec![0, 128, 255]);
    }

    #[test]
    fn crop_extracts_window() {
        let img = Image::new(4, 4, (0..48).map(|i| i as u8).collect());
        let c = img.crop(1, 2, 2, 2);
        assert_eq!((c.w, c.h), (2, 2));
        assert_eq!(c.pixel(0, 0), img.pixel(1, 2));
        assert_eq!(c.pixel(1, 1), img.pixel(2, 3));
    }
}
