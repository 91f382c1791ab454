//! Image quality metrics on 8-bit RGB images: PSNR and multi-scale SSIM.

use crate::error::{Result, SapmError};
use crate::ppm::Image;

/// Standard five-scale MS-SSIM exponents.
const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const L: f64 = 255.0;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.w != b.w || a.h != b.h {
        return Err(SapmError::numeric(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            a.w, a.h, b.w, b.h
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio over all RGB samples; identical images
/// report positive infinity.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let mut se = 0.0;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let d = x as f64 - y as f64;
        se += d * d;
    }
    let mse = se / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (L * L / mse).log10())
}

/// MS-SSIM result; `scales` < 5 means the image was too small for the full
/// dyadic pyramid and the exponents were renormalized over the scales used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsSsim {
    pub value: f64,
    pub scales: usize,
}

struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn halved(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                v[y * w + x] = 0.25
                    * (self.v[i] + self.v[i + 1] + self.v[i + self.w] + self.v[i + self.w + 1]);
            }
        }
        Plane { w, h, v }
    }
}

fn gaussian_kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-region Gaussian filter.
fn blur(p: &Plane, k: &[f64; WINDOW]) -> Plane {
    let bw = p.w - WINDOW + 1;
    // Horizontal pass keeps full height.
    let mut tmp = vec![0.0; bw * p.h];
    for y in 0..p.h {
        for x in 0..bw {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * p.v[y * p.w + x + t];
            }
            tmp[y * bw + x] = acc;
        }
    }
    let bh = p.h - WINDOW + 1;
    let mut v = vec![0.0; bw * bh];
    for y in 0..bh {
        for x in 0..bw {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + t) * bw + x];
            }
            v[y * bw + x] = acc;
        }
    }
    Plane { w: bw, h: bh, v }
}

/// Mean contrast-structure term and mean full SSIM over the valid region.
fn ssim_terms(a: &Plane, b: &Plane, k: &[f64; WINDOW]) -> (f64, f64) {
    let c1 = (K1 * L) * (K1 * L);
    let c2 = (K2 * L) * (K2 * L);
    let mu_a = blur(a, k);
    let mu_b = blur(b, k);
    let sq_a = Plane {
        w: a.w,
        h: a.h,
        v: a.v.iter().map(|v| v * v).collect(),
    };
    let sq_b = Plane {
        w: b.w,
        h: b.h,
        v: b.v.iter().map(|v| v * v).collect(),
    };
    let ab = Plane {
        w: a.w,
        h: a.h,
        v: a.v.iter().zip(&b.v).map(|(x, y)| x * y).collect(),
    };
    let m_sq_a = blur(&sq_a, k);
    let m_sq_b = blur(&sq_b, k);
    let m_ab = blur(&ab, k);
    let mut cs_sum = 0.0;
    let mut ssim_sum = 0.0;
    let n = mu_a.v.len();
    for i in 0..n {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = m_sq_a.v[i] - ma * ma;
        let vb = m_sq_b.v[i] - mb * mb;
        let cov = m_ab.v[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs_sum += cs;
        ssim_sum += lum * cs;
    }
    (cs_sum / n as f64, ssim_sum / n as f64)
}

fn to_planes(img: &Image) -> [Plane; 3] {
    let hw = img.w * img.h;
    let mut planes = [(); 3].map(|_| Plane {
        w: img.w,
        h: img.h,
        v: vec![0.0; hw],
    });
    for p in 0..hw {
        for c in 0..3 {
            planes[c].v[p] = img.data[3 * p + c] as f64;
        }
    }
    planes
}

/// Multi-scale SSIM averaged over the RGB channels. Scales halve dyadically;
/// the scale count drops below five when the shorter side cannot cover the
/// 11-tap window through four halvings (i.e. is under 176 px), and the
/// exponents renormalize over the scales kept.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<MsSsim> {
    check_dims(a, b)?;
    let min_side = a.w.min(a.h);
    let mut scales = 0;
    for s in 0..5 {
        if (min_side >> s) >= WINDOW {
            scales = s + 1;
        }
    }
    if scales == 0 {
        return Err(SapmError::numeric(format!(
            "image side {min_side} smaller than the {WINDOW}-tap ssim window"
        )));
    }
    let wsum: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let k = gaussian_kernel();
    let mut value = 0.0;
    for (pa, pb) in to_planes(a).into_iter().zip(to_planes(b)) {
        let (mut pa, mut pb) = (pa, pb);
        let mut chan = 1.0;
        for s in 0..scales {
            let (mcs, mssim) = ssim_terms(&pa, &pb, &k);
            let exp = MSSSIM_WEIGHTS[s] / wsum;
            // Negative means can only arise from heavy anti-correlation;
            // clamp so the fractional power stays real.
            let base = if s + 1 == scales { mssim } else { mcs };
            chan *= base.max(0.0).powf(exp);
            if s + 1 < scales {
                pa = pa.halved();
                pb = pb.halved();
            }
        }
        value += chan / 3.0;
    }
    Ok(MsSsim { value, scales })
}
