//! End-to-end image codec: pad, transform, quantize, entropy-code, and the
//! inverse path.
//!
//! The container is a flat little-endian layout: magic `SAPM`, version,
//! original and padded dimensions, the model config id and mixture count,
//! coding supports for both latents, then the two range-coded streams
//! (hyper latent first) each behind a u32 byte length.
//!
//! Coding supports cover the observed latents with two spare levels on
//! each side, clamped to [-255, 255]. A value outside the clamped support
//! codes as an edge escape bin followed by its raw 16-bit two's-complement
//! payload, split into two uniform byte symbols.

use crate::autodiff::Graph;
use crate::entropy::{
    build_cdf_table, laplace_bin_mass, lmm_elem_params, rate_bits, CdfTable, P_FLOOR,
};
use crate::error::{Result, SapmError};
use crate::layers::{ForwardAux, Mode};
use crate::model::Model;
use crate::ppm::Image;
use crate::rangecoder::{StreamDecoder, StreamEncoder};
use crate::tensor::Tensor;

pub const BITSTREAM_MAGIC: [u8; 4] = *b"SAPM";
pub const BITSTREAM_VERSION: u8 = 1;
/// Fixed container overhead: header fields plus both stream length
/// prefixes.
pub const HEADER_BYTES: usize = 31;

/// Furthest level the escape payload can carry.
const ESCAPE_LIMIT: i32 = i16::MAX as i32;

/// Compression output. The encoder-side integer latents ride along so
/// callers can verify latent losslessness against [`decompress`] without
/// reaching into the pipeline.
pub struct Compressed {
    pub bytes: Vec<u8>,
    pub y_hat: Tensor,
    pub z_hat: Tensor,
    /// Model rate estimate in bits (floored bin masses, both latents).
    pub rate_bits: f64,
}

/// Decompression output with the decoded integer latents exposed.
pub struct Decompressed {
    pub image: Image,
    pub y_hat: Tensor,
    pub z_hat: Tensor,
}

pub fn bpp(n_bytes: usize, w: usize, h: usize) -> f64 {
    8.0 * n_bytes as f64 / (w * h) as f64
}

/// Replicate the right and bottom edges until both dimensions are
/// multiples of `mult`.
pub fn pad_replicate(img: &Image, mult: usize) -> Image {
    let pw = img.w.div_ceil(mult) * mult;
    let ph = img.h.div_ceil(mult) * mult;
    if pw == img.w && ph == img.h {
        return img.clone();
    }
    let mut data = Vec::with_capacity(3 * pw * ph);
    for y in 0..ph {
        let sy = y.min(img.h - 1);
        for x in 0..pw {
            let sx = x.min(img.w - 1);
            data.extend_from_slice(&img.pixel(sx, sy));
        }
    }
    Image::new(pw, ph, data)
}

/// Inclusive coding support for observed integer latents: two spare
/// levels on each side, clamped to [-255, 255], never empty.
fn observed_support(vals: &[i32]) -> (i32, i32) {
    let mn = vals.iter().copied().min().unwrap_or(0);
    let mx = vals.iter().copied().max().unwrap_or(0);
    let lo = (mn - 2).clamp(-255, 253);
    let hi = (mx + 2).clamp(lo + 2, 255);
    (lo, hi)
}

/// Wrap tail-folded support masses with zero-mass escape bins at both
/// ends. Quantization lifts the escapes to the minimum integer mass. The
/// table offset is `lo - 1` so symbol index maps straight to level.
fn escape_table(lo: i32, masses: &[f64]) -> Result<CdfTable> {
    let mut full = Vec::with_capacity(masses.len() + 2);
    full.push(0.0);
    full.extend_from_slice(masses);
    full.push(0.0);
    build_cdf_table(lo - 1, &full)
}

fn encode_value(enc: &mut StreamEncoder, v: i32, t: &CdfTable, uni: &CdfTable) -> Result<()> {
    let lo = t.offset + 1;
    let hi = t.offset + t.n_symbols() as i32 - 2;
    if v >= lo && v <= hi {
        return enc.encode((v - t.offset) as usize, t);
    }
    let esc = if v < lo { 0 } else { t.n_symbols() - 1 };
    enc.encode(esc, t)?;
    let raw = v as i16 as u16;
    enc.encode((raw >> 8) as usize, uni)?;
    enc.encode((raw & 0xFF) as usize, uni)
}

fn decode_value(dec: &mut StreamDecoder, t: &CdfTable, uni: &CdfTable) -> Result<i32> {
    let sym = dec.decode(t)?;
    if sym == 0 || sym == t.n_symbols() - 1 {
        let hi = dec.decode(uni)? as u16;
        let lo = dec.decode(uni)? as u16;
        return Ok(((hi << 8) | lo) as i16 as i32);
    }
    Ok(t.offset + sym as i32)
}

/// Round a latent tensor to integer levels, with the integer view for
/// coding. Rejects non-finite and escape-overflowing values.
fn quantize(t: &Tensor, what: &str) -> Result<(Tensor, Vec<i32>)> {
    t.check_finite(what)?;
    let mut data = Vec::with_capacity(t.len());
    let mut vals = Vec::with_capacity(t.len());
    for &v in t.data() {
        let r = v.round();
        if r.abs() > ESCAPE_LIMIT as f64 {
            return Err(SapmError::numeric(format!(
                "{what} level {r} exceeds the escape range"
            )));
        }
        data.push(r);
        vals.push(r as i32);
    }
    Ok((Tensor::new(t.shape().to_vec(), data), vals))
}

fn z_tables(model: &Model, z_lo: i32, z_hi: i32) -> Result<Vec<CdfTable>> {
    (0..model.cfg.hyper)
        .map(|c| {
            escape_table(
                z_lo,
                &model.z_prior.support_masses(&model.ps, c, z_lo, z_hi)?,
            )
        })
        .collect()
}

pub fn compress(model: &Model, img: &Image) -> Result<Compressed> {
    let ds = model.cfg.total_downsample();
    let padded = pad_replicate(img, ds);
    if padded.w > u16::MAX as usize || padded.h > u16::MAX as usize {
        return Err(SapmError::format(format!(
            "padded image {}x{} exceeds 16-bit header dimensions",
            padded.w, padded.h
        )));
    }

    let mut g = Graph::new(false);
    let mut aux = ForwardAux::new();
    let xv = g.input(padded.to_tensor());
    let y = model.encode(&mut g, xv, Mode::Infer, &mut aux)?;
    let z = model.hyper_encode(&mut g, y);
    let (y_hat, y_vals) = quantize(g.value(y), "latent")?;
    let (z_hat, z_vals) = quantize(g.value(z), "hyper latent")?;

    let uni = CdfTable::uniform_bytes();
    let (y_lo, y_hi) = observed_support(&y_vals);
    let (z_lo, z_hi) = observed_support(&z_vals);

    // Hyper latent stream: one table per channel, elements in layout order.
    let zt = z_tables(model, z_lo, z_hi)?;
    let (_, zc, zh, zw) = z_hat.dims4();
    let mut enc = StreamEncoder::new();
    for c in 0..zc {
        for &v in &z_vals[c * zh * zw..(c + 1) * zh * zw] {
            encode_value(&mut enc, v, &zt[c], &uni)?;
        }
    }
    let z_stream = enc.finish().bytes;

    // Mixture parameters come from the decoded-side hyper latent so both
    // ends build identical tables.
    let zv = g.input(z_hat.clone());
    let hv = model.hyper_decode(&mut g, zv);
    let h = g.value(hv).clone();

    let (_, yc, yh, yw) = y_hat.dims4();
    let mut enc = StreamEncoder::new();
    let mut p_y = Vec::with_capacity(y_vals.len());
    for c in 0..yc {
        for iy in 0..yh {
            for ix in 0..yw {
                let elem = lmm_elem_params(&h, 0, c, iy, ix, model.cfg.kmix);
                let t = escape_table(y_lo, &elem.support_masses(y_lo, y_hi)?)?;
                let v = y_vals[(c * yh + iy) * yw + ix];
                encode_value(&mut enc, v, &t, &uni)?;
                p_y.push(elem.bin_mass(v as f64)?);
            }
        }
    }
    let y_stream = enc.finish().bytes;

    let mut p_z = Vec::with_capacity(z_vals.len());
    for c in 0..zc {
        let (mu, b) = model.z_prior.elem_params(&model.ps, c);
        for &v in &z_vals[c * zh * zw..(c + 1) * zh * zw] {
            p_z.push(laplace_bin_mass(v as f64, mu, b)?.max(P_FLOOR));
        }
    }
    let rate = rate_bits(&p_y) + rate_bits(&p_z);

    let mut bytes = Vec::with_capacity(HEADER_BYTES + z_stream.len() + y_stream.len());
    bytes.extend_from_slice(&BITSTREAM_MAGIC);
    bytes.push(BITSTREAM_VERSION);
    for d in [img.w, img.h, padded.w, padded.h] {
        bytes.extend_from_slice(&(d as u16).to_le_bytes());
    }
    bytes.push(model.cfg.id());
    bytes.push(model.cfg.kmix as u8);
    for s in [y_lo, y_hi, z_lo, z_hi] {
        bytes.extend_from_slice(&(s as i16).to_le_bytes());
    }
    bytes.extend_from_slice(&(z_stream.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&z_stream);
    bytes.extend_from_slice(&(y_stream.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&y_stream);

    Ok(Compressed {
        bytes,
        y_hat,
        z_hat,
        rate_bits: rate,
    })
}

pub fn decompress(model: &Model, bytes: &[u8]) -> Result<Decompressed> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != BITSTREAM_MAGIC {
        return Err(SapmError::format("bad bitstream magic"));
    }
    let version = r.u8()?;
    if version != BITSTREAM_VERSION {
        return Err(SapmError::format(format!(
            "unsupported bitstream version {version}"
        )));
    }
    let w = r.u16()? as usize;
    let h = r.u16()? as usize;
    let pw = r.u16()? as usize;
    let ph = r.u16()? as usize;
    let cfg_id = r.u8()?;
    if cfg_id != model.cfg.id() {
        return Err(SapmError::format(format!(
            "bitstream config id {cfg_id} does not match model config id {}",
            model.cfg.id()
        )));
    }
    let kmix = r.u8()? as usize;
    if kmix != model.cfg.kmix {
        return Err(SapmError::format(
            "bitstream mixture count does not match model",
        ));
    }
    let ds = model.cfg.total_downsample();
    if w == 0 || h == 0 || pw < w || ph < h || pw % ds != 0 || ph % ds != 0 {
        return Err(SapmError::format("inconsistent bitstream dimensions"));
    }
    let y_lo = r.i16()? as i32;
    let y_hi = r.i16()? as i32;
    let z_lo = r.i16()? as i32;
    let z_hi = r.i16()? as i32;
    if y_lo >= y_hi || z_lo >= z_hi {
        return Err(SapmError::format("degenerate coding support"));
    }
    let z_len = r.u32()? as usize;
    let z_stream = r.take(z_len)?;
    let y_len = r.u32()? as usize;
    let y_stream = r.take(y_len)?;
    if !r.at_end() {
        return Err(SapmError::format("trailing bytes after bitstream payload"));
    }

    let uni = CdfTable::uniform_bytes();
    let yh = ph >> model.cfg.levels;
    let yw = pw >> model.cfg.levels;
    let (zh, zw) = (yh / 4, yw / 4);
    let zc = model.cfg.hyper;

    let zt = z_tables(model, z_lo, z_hi)?;
    let mut dec = StreamDecoder::new(z_stream);
    let mut z_data = Vec::with_capacity(zc * zh * zw);
    for c in 0..zc {
        for _ in 0..zh * zw {
            z_data.push(decode_value(&mut dec, &zt[c], &uni)? as f64);
        }
    }
    let z_hat = Tensor::new(vec![1, zc, zh, zw], z_data);

    let mut g = Graph::new(false);
    let zv = g.input(z_hat.clone());
    let hv = model.hyper_decode(&mut g, zv);
    let hm = g.value(hv).clone();

    let yc = model.cfg.m;
    let mut dec = StreamDecoder::new(y_stream);
    let mut y_data = Vec::with_capacity(yc * yh * yw);
    for c in 0..yc {
        for iy in 0..yh {
            for ix in 0..yw {
                let elem = lmm_elem_params(&hm, 0, c, iy, ix, kmix);
                let t = escape_table(y_lo, &elem.support_masses(y_lo, y_hi)?)?;
                y_data.push(decode_value(&mut dec, &t, &uni)? as f64);
            }
        }
    }
    let y_hat = Tensor::new(vec![1, yc, yh, yw], y_data);

    let mut aux = ForwardAux::new();
    let yv = g.input(y_hat.clone());
    let xv = model.decode(&mut g, yv, Mode::Infer, &mut aux)?;
    let image = Image::from_tensor(g.value(xv)).crop(0, 0, w, h);
    Ok(Decompressed {
        image,
        y_hat,
        z_hat,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SapmError::format("truncated bitstream"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("length checked"),
        ))
    }

    fn i16(&mut self) -> Result<i16> {
        Ok(i16::from_le_bytes(
            self.take(2)?.try_into().expect("length checked"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("length checked"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_replicates_edges() {
        let img = Image::new(3, 2, (0..18).map(|i| i as u8).collect());
        let p = pad_replicate(&img, 4);
        assert_eq!((p.w, p.h), (4, 4));
        assert_eq!(p.pixel(2, 1), p.pixel(3, 1));
        assert_eq!(p.pixel(1, 1), p.pixel(1, 3));
        assert_eq!(p.pixel(2, 1), p.pixel(3, 3));
        assert_eq!(p.pixel(0, 0), img.pixel(0, 0));
        // Already aligned: untouched.
        let q = pad_replicate(&p, 4);
        assert_eq!(q.data, p.data);
    }

    #[test]
    fn support_covers_and_clamps() {
        assert_eq!(observed_support(&[-3, 0, 7]), (-5, 9));
        assert_eq!(observed_support(&[0, 0]), (-2, 2));
        assert_eq!(observed_support(&[-400, 400]), (-255, 255));
        let (lo, hi) = observed_support(&[300, 400]);
        assert!(lo < hi && (-255..=255).contains(&lo) && (-255..=255).contains(&hi));
    }

    #[test]
    fn escape_roundtrip_through_coder() {
        // Narrow table [-2, 2]; values beyond it must escape and decode
        // back exactly, including negatives.
        let masses = [0.1, 0.2, 0.4, 0.2, 0.1];
        let t = escape_table(-2, &masses).unwrap();
        assert_eq!(t.n_symbols(), 7);
        let uni = CdfTable::uniform_bytes();
        let values = [-2, 2, 0, 17, -300, 9000, -32768, 32767, 1];
        let mut enc = StreamEncoder::new();
        for &v in &values {
            encode_value(&mut enc, v, &t, &uni).unwrap();
        }
        let buf = enc.finish();
        let mut dec = StreamDecoder::new(&buf.bytes);
        for &v in &values {
            assert_eq!(decode_value(&mut dec, &t, &uni).unwrap(), v);
        }
    }

    #[test]
    fn quantize_rejects_bad_latents() {
        let t = Tensor::new(vec![1, 1, 1, 2], vec![0.4, f64::NAN]);
        assert!(matches!(quantize(&t, "latent"), Err(SapmError::Numeric(_))));
        let t = Tensor::new(vec![1, 1, 1, 1], vec![40000.0]);
        assert!(matches!(quantize(&t, "latent"), Err(SapmError::Numeric(_))));
        let t = Tensor::new(vec![1, 1, 1, 2], vec![0.5, -1.5]);
        let (q, v) = quantize(&t, "latent").unwrap();
        assert_eq!(q.data(), &[1.0, -2.0]);
        assert_eq!(v, vec![1, -2]);
    }
}
