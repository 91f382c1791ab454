//! Latent distribution diagnostics: per-channel Gaussian and Laplace
//! maximum-likelihood fits, compared by mean negative log-likelihood.
//!
//! The comparison runs on continuous pre-quantization latents by default,
//! with densities, because that is what the transform actually emits.
//! The quantized flag instead rounds the samples and scores both families
//! by integer bin masses, the quantity the entropy coder pays for.

use crate::autodiff::Graph;
use crate::codec::pad_replicate;
use crate::entropy::laplace_bin_mass;
use crate::error::{Result, SapmError};
use crate::layers::{ForwardAux, Mode};
use crate::model::Model;
use crate::ppm::Image;

/// Histogram resolution of a channel report.
pub const HIST_BINS: usize = 101;
/// Lower bound on fitted scales; keeps constant channels finite.
pub const SCALE_FLOOR: f64 = 1e-6;
/// Lower bound on a scored bin mass in quantized mode.
const MASS_FLOOR: f64 = 1e-12;

/// One fitted distribution: location, scale, and the mean negative
/// log-likelihood of the samples under it, in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistFit {
    pub loc: f64,
    pub scale: f64,
    pub mean_nll: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Winner {
    Gaussian,
    Laplace,
}

impl Winner {
    pub fn name(&self) -> &'static str {
        match self {
            Winner::Gaussian => "gaussian",
            Winner::Laplace => "laplace",
        }
    }
}

/// Per-channel fit summary with plot-ready histogram data.
#[derive(Debug, Clone)]
pub struct LatentFitReport {
    pub channel: usize,
    pub n: usize,
    /// `HIST_BINS + 1` ascending bin edges spanning the sample range.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub gaussian: DistFit,
    pub laplace: DistFit,
    pub winner: Winner,
}

/// Gaussian MLE: sample mean and population standard deviation.
pub fn fit_gaussian(samples: &[f64]) -> DistFit {
    assert!(!samples.is_empty(), "fit on empty sample set");
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(SCALE_FLOOR);
    let mean_nll = 0.5 * (2.0 * std::f64::consts::PI).ln() + std.ln() + var / (2.0 * std * std);
    DistFit {
        loc: mean,
        scale: std,
        mean_nll,
    }
}

/// Laplace MLE: lower median and mean absolute deviation around it.
pub fn fit_laplace(samples: &[f64]) -> DistFit {
    assert!(!samples.is_empty(), "fit on empty sample set");
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let loc = sorted[(sorted.len() - 1) / 2];
    let n = samples.len() as f64;
    let mad = samples.iter().map(|x| (x - loc).abs()).sum::<f64>() / n;
    let b = mad.max(SCALE_FLOOR);
    let mean_nll = (2.0 * b).ln() + mad / b;
    DistFit {
        loc,
        scale: b,
        mean_nll,
    }
}

fn gaussian_bin_mass(v: f64, mu: f64, sigma: f64) -> f64 {
    let phi = |x: f64| 0.5 * (1.0 + libm::erf((x - mu) / (sigma * std::f64::consts::SQRT_2)));
    phi(v + 0.5) - phi(v - 0.5)
}

/// Mean NLL of integer samples under discrete bin masses.
fn discrete_nll(samples: &[f64], mass: impl Fn(f64) -> f64) -> f64 {
    let total: f64 = samples.iter().map(|&v| -mass(v).max(MASS_FLOOR).ln()).sum();
    total / samples.len() as f64
}

/// Fit one channel's samples. With `quantized`, the samples are rounded
/// first and both families are scored by bin mass instead of density;
/// the fitted parameters still come from the continuous MLE, which has a
/// closed form where the discrete one does not.
pub fn fit_channel(channel: usize, samples: &[f64], quantized: bool) -> LatentFitReport {
    assert!(!samples.is_empty(), "fit on empty sample set");
    let rounded;
    let samples = if quantized {
        rounded = samples.iter().map(|x| x.round()).collect::<Vec<_>>();
        &rounded[..]
    } else {
        samples
    };

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in samples {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if !(hi > lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    let edges: Vec<f64> = (0..=HIST_BINS)
        .map(|i| lo + (hi - lo) * i as f64 / HIST_BINS as f64)
        .collect();
    let mut counts = vec![0u64; HIST_BINS];
    let width = (hi - lo) / HIST_BINS as f64;
    for &x in samples {
        let bin = (((x - lo) / width) as usize).min(HIST_BINS - 1);
        counts[bin] += 1;
    }

    let mut gaussian = fit_gaussian(samples);
    let mut laplace = fit_laplace(samples);
    if quantized {
        let (mu, sigma) = (gaussian.loc, gaussian.scale);
        gaussian.mean_nll = discrete_nll(samples, |v| gaussian_bin_mass(v, mu, sigma));
        let (loc, b) = (laplace.loc, laplace.scale);
        laplace.mean_nll = discrete_nll(samples, |v| {
            laplace_bin_mass(v, loc, b).unwrap_or(MASS_FLOOR)
        });
    }
    let winner = if gaussian.mean_nll < laplace.mean_nll {
        Winner::Gaussian
    } else {
        Winner::Laplace
    };
    LatentFitReport {
        channel,
        n: samples.len(),
        edges,
        counts,
        gaussian,
        laplace,
        winner,
    }
}

/// Run the encoder over `images` and fit every selected latent channel.
/// `channels` of `None` selects all of them.
pub fn analyze_latents(
    model: &Model,
    images: &[Image],
    channels: Option<&[usize]>,
    quantized: bool,
) -> Result<Vec<LatentFitReport>> {
    if images.is_empty() {
        return Err(SapmError::config(
            "latent analysis needs at least one image",
        ));
    }
    let m = model.cfg.m;
    let selected: Vec<usize> = match channels {
        None => (0..m).collect(),
        Some(list) => {
            if list.is_empty() {
                return Err(SapmError::config("empty channel selection"));
            }
            for &c in list {
                if c >= m {
                    return Err(SapmError::config(format!(
                        "channel {c} out of range, the model has {m} latent channels"
                    )));
                }
            }
            list.to_vec()
        }
    };

    let ds = model.cfg.total_downsample();
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); selected.len()];
    for img in images {
        let padded = pad_replicate(img, ds);
        let mut g = Graph::new(false);
        let mut aux = ForwardAux::new();
        let xv = g.input(padded.to_tensor());
        let y = model.encode(&mut g, xv, Mode::Infer, &mut aux)?;
        let t = g.value(y);
        let (_, yc, yh, yw) = t.dims4();
        debug_assert_eq!(yc, m);
        for (slot, &c) in selected.iter().enumerate() {
            let base = c * yh * yw;
            per[slot].extend_from_slice(&t.data()[base..base + yh * yw]);
        }
    }
    Ok(selected
        .iter()
        .zip(per.iter())
        .map(|(&c, s)| fit_channel(c, s, quantized))
        .collect())
}

/// Fraction of channels where Laplace scored the lower mean NLL.
pub fn laplace_fraction(reports: &[LatentFitReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    let wins = reports
        .iter()
        .filter(|r| r.winner == Winner::Laplace)
        .count();
    wins as f64 / reports.len() as f64
}

/// One line per channel plus a winner tally.
pub fn render_summary(reports: &[LatentFitReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&format!(
            "channel {:>3}: n={} gaussian(mu={:.4}, std={:.4}, nll={:.4}) \
             laplace(loc={:.4}, b={:.4}, nll={:.4}) winner={}\n",
            r.channel,
            r.n,
            r.gaussian.loc,
            r.gaussian.scale,
            r.gaussian.mean_nll,
            r.laplace.loc,
            r.laplace.scale,
            r.laplace.mean_nll,
            r.winner.name()
        ));
    }
    let wins = reports
        .iter()
        .filter(|r| r.winner == Winner::Laplace)
        .count();
    out.push_str(&format!("laplace wins {wins}/{} channels\n", reports.len()));
    out
}

/// Histogram and fitted curves as comma-separated plot data. Empirical
/// density normalizes counts by sample count and bin width; the fitted
/// columns are densities at the bin center.
pub fn render_plot_csv(reports: &[LatentFitReport]) -> String {
    let mut out =
        String::from("channel,bin_lo,bin_hi,count,density,gaussian_density,laplace_density\n");
    for r in reports {
        let gauss_pdf = |x: f64| {
            let t = (x - r.gaussian.loc) / r.gaussian.scale;
            (-0.5 * t * t).exp() / (r.gaussian.scale * (2.0 * std::f64::consts::PI).sqrt())
        };
        let lap_pdf =
            |x: f64| (-(x - r.laplace.loc).abs() / r.laplace.scale).exp() / (2.0 * r.laplace.scale);
        for (i, &c) in r.counts.iter().enumerate() {
            let (blo, bhi) = (r.edges[i], r.edges[i + 1]);
            let mid = 0.5 * (blo + bhi);
            let density = c as f64 / (r.n as f64 * (bhi - blo));
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{:.8},{:.8},{:.8}\n",
                r.channel,
                blo,
                bhi,
                c,
                density,
                gauss_pdf(mid),
                lap_pdf(mid)
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp1, StandardNormal};

    #[test]
    fn gaussian_two_point_and_constant() {
        let fit = fit_gaussian(&[-1.0, 1.0]);
        assert_eq!(fit.loc, 0.0);
        assert_eq!(fit.scale, 1.0);
        assert!(fit.mean_nll.is_finite());

        let flat = fit_gaussian(&[3.0; 10]);
        assert_eq!(flat.scale, SCALE_FLOOR);
        assert!(flat.mean_nll.is_finite());
    }

    #[test]
    fn laplace_three_point_and_lower_median() {
        let fit = fit_laplace(&[-1.0, 0.0, 1.0]);
        assert_eq!(fit.loc, 0.0);
        assert_eq!(fit.scale, 2.0 / 3.0);

        // Even count takes the lower of the two middle samples.
        assert_eq!(fit_laplace(&[4.0, 1.0, 3.0, 2.0]).loc, 2.0);

        let flat = fit_laplace(&[-2.0; 5]);
        assert_eq!(flat.scale, SCALE_FLOOR);
        assert!(flat.mean_nll.is_finite());
    }

    #[test]
    fn monte_carlo_normal_recovers_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..100_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let fit = fit_gaussian(&samples);
        assert!(fit.loc.abs() <= 0.02, "mean {}", fit.loc);
        assert!((0.99..=1.01).contains(&fit.scale), "std {}", fit.scale);
        assert_eq!(fit_channel(0, &samples, false).winner, Winner::Gaussian);
    }

    #[test]
    fn monte_carlo_laplace_recovers_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<f64> = (0..100_000)
            .map(|_| {
                let e1: f64 = Exp1.sample(&mut rng);
                let e2: f64 = Exp1.sample(&mut rng);
                e1 - e2
            })
            .collect();
        let fit = fit_laplace(&samples);
        assert!((0.99..=1.01).contains(&fit.scale), "b {}", fit.scale);
        assert!(fit.loc.abs() < 0.02);
        assert_eq!(fit_channel(0, &samples, false).winner, Winner::Laplace);
    }

    #[test]
    fn fits_are_scale_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<f64> = (0..500).map(|_| rng.gen_range(-4.0..4.0)).collect();
        // Power-of-two scales commute with every f64 rounding step, so
        // equivariance is bitwise there.
        for c in [0.25, 2.0, 1024.0] {
            let scaled: Vec<f64> = samples.iter().map(|x| c * x).collect();
            let (g0, g1) = (fit_gaussian(&samples), fit_gaussian(&scaled));
            assert_eq!(g1.loc, c * g0.loc);
            assert_eq!(g1.scale, c * g0.scale);
            let (l0, l1) = (fit_laplace(&samples), fit_laplace(&scaled));
            assert_eq!(l1.loc, c * l0.loc);
            assert_eq!(l1.scale, c * l0.scale);
        }
        // Translation moves locations and keeps scales, up to rounding.
        let shifted: Vec<f64> = samples.iter().map(|x| x + 10.0).collect();
        let (g0, g1) = (fit_gaussian(&samples), fit_gaussian(&shifted));
        assert!((g1.loc - g0.loc - 10.0).abs() < 1e-9);
        assert!((g1.scale - g0.scale).abs() < 1e-9);
        let (l0, l1) = (fit_laplace(&samples), fit_laplace(&shifted));
        assert_eq!(l1.loc, l0.loc + 10.0);
        assert!((l1.scale - l0.scale).abs() < 1e-9);
    }

    #[test]
    fn winner_survives_affine_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let laplacian: Vec<f64> = (0..20_000)
            .map(|_| {
                let e1: f64 = Exp1.sample(&mut rng);
                let e2: f64 = Exp1.sample(&mut rng);
                e1 - e2
            })
            .collect();
        let base = fit_channel(0, &laplacian, false).winner;
        for c in [0.1, 3.7, 250.0] {
            let scaled: Vec<f64> = laplacian.iter().map(|x| c * x - 1.0).collect();
            assert_eq!(fit_channel(0, &scaled, false).winner, base);
        }
    }

    #[test]
    fn histogram_covers_all_samples() {
        let samples: Vec<f64> = (0..1000).map(|i| (i as f64) * 0.01 - 5.0).collect();
        let r = fit_channel(3, &samples, false);
        assert_eq!(r.channel, 3);
        assert_eq!(r.edges.len(), HIST_BINS + 1);
        assert_eq!(r.counts.len(), HIST_BINS);
        assert_eq!(r.counts.iter().sum::<u64>(), 1000);
        assert!(r.edges.windows(2).all(|e| e[1] > e[0]));
        assert_eq!(r.edges[0], samples[0]);
        assert_eq!(*r.edges.last().unwrap(), *samples.last().unwrap());
    }

    #[test]
    fn quantized_mode_rounds_and_scores_masses() {
        let samples = [0.2, 0.4, 1.4, -0.4, 2.6, 0.1, -1.2, 0.3];
        let r = fit_channel(0, &samples, true);
        // All mass sits on integers after rounding.
        assert_eq!(r.n, samples.len());
        assert!(r.gaussian.mean_nll.is_finite());
        assert!(r.laplace.mean_nll.is_finite());
        // Discrete NLL of a mass is at least zero (mass at most one).
        assert!(r.gaussian.mean_nll >= 0.0);
        assert!(r.laplace.mean_nll >= 0.0);
    }
}
