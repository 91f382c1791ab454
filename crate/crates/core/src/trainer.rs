//! Rate-distortion training: seeded crop sampling, the noise-quantized
//! loss, Adam with adder-aware gradient conditioning, and a line-delimited
//! training log.
//!
//! One run trains one λ. The two-stage protocol (largest λ of a set from
//! scratch, the others fine-tuned from it at the lower learning rate) is
//! driven by the caller through `pretrained`; `stage_for_lambda` in the
//! config module names the intended source.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ModelConfig, TrainConfig};
use crate::entropy::rate_bits_graph;
use crate::error::{Result, SapmError};
use crate::layers::{ForwardAux, Mode, QuantMode};
use crate::model::Model;
use crate::optim::{clip_global_norm, scale_adder_grad, AdamConfig, AdamState};
use crate::ppm::{read_ppm, Image};
use crate::tensor::Tensor;

/// Global gradient-norm ceiling; protects against adder surrogate spikes.
pub const GRAD_CLIP: f64 = 10.0;
/// Target-norm coefficient for the adder filter gradient rescaling.
pub const ADDER_ETA: f64 = 0.2;

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_RUN: usize = 500;

/// Scalar loss terms of one batch. Rates are bits per pixel.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub loss: f64,
    pub d: f64,
    pub r_y: f64,
    pub r_z: f64,
}

/// Rate-distortion objective L = λ·D + R on one batch tensor in `[0,1]`.
/// D is the mean squared error over all pixel values; R is total coded
/// bits of both latents per image pixel.
pub fn rd_loss(
    g: &mut Graph,
    model: &Model,
    x: Tensor,
    lambda: f64,
    mode: Mode,
    quant: QuantMode,
    rng: &mut ChaCha8Rng,
    aux: &mut ForwardAux,
) -> Result<(Var, LossTerms)> {
    let (b, _, hh, ww) = x.dims4();
    let n_values = x.len() as f64;
    let n_pixels = (b * hh * ww) as f64;
    let xv = g.input(x);
    let out = model.forward(g, xv, mode, quant, rng, aux)?;
    let diff = g.sub(out.x_hat, xv);
    let sq = g.square(diff);
    let ssum = g.sum(sq);
    let d = g.scale(ssum, 1.0 / n_values);
    let ry_bits = rate_bits_graph(g, out.p_y)?;
    let rz_bits = rate_bits_graph(g, out.p_z)?;
    let ry = g.scale(ry_bits, 1.0 / n_pixels);
    let rz = g.scale(rz_bits, 1.0 / n_pixels);
    let r = g.add(ry, rz);
    let ld = g.scale(d, lambda);
    let loss = g.add(ld, r);
    let terms = LossTerms {
        loss: g.value(loss).item(),
        d: g.value(d).item(),
        r_y: g.value(ry).item(),
        r_z: g.value(rz).item(),
    };
    if !terms.loss.is_finite() {
        return Err(SapmError::numeric(format!(
            "non-finite loss {}",
            terms.loss
        )));
    }
    Ok((loss, terms))
}

/// Eagerly loaded training set. Desk-scale corpora fit in memory, and
/// eager loading keeps the seeded crop order independent of I/O timing.
pub struct Dataset {
    images: Vec<Image>,
}

impl Dataset {
    /// Every `.ppm` under `dir`, sorted by file name.
    pub fn load_dir(dir: &Path) -> Result<Dataset> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| SapmError::io(format!("{}: {e}", dir.display())))?
            .filter_map(|r| r.ok().map(|d| d.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(SapmError::config(format!(
                "no .ppm images under {}",
                dir.display()
            )));
        }
        let images = paths
            .iter()
            .map(|p| read_ppm(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { images })
    }

    pub fn from_images(images: Vec<Image>) -> Result<Dataset> {
        if images.is_empty() {
            return Err(SapmError::config("empty dataset"));
        }
        Ok(Dataset { images })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn min_side(&self) -> usize {
        self.images
            .iter()
            .map(|i| i.w.min(i.h))
            .min()
            .expect("nonempty")
    }

    /// Stack `batch` random crops into a `[B, 3, crop, crop]` tensor.
    pub fn sample_batch(&self, batch: usize, crop: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut data = Vec::with_capacity(batch * 3 * crop * crop);
        for _ in 0..batch {
            let img = &self.images[rng.gen_range(0..self.images.len())];
            let x0 = rng.gen_range(0..=img.w - crop);
            let y0 = rng.gen_range(0..=img.h - crop);
            data.extend_from_slice(img.crop(x0, y0, crop, crop).to_tensor().data());
        }
        Tensor::new(vec![batch, 3, crop, crop], data)
    }
}

/// Artifact stem shared by checkpoint and log names for one λ.
pub fn artifact_stem(lambda: f64) -> String {
    if lambda == lambda.trunc() && lambda >= 0.0 {
        format!("lambda{}", lambda as u64)
    } else {
        format!("lambda{lambda}")
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub final_terms: LossTerms,
}

/// Train one model. `progress` receives `(iteration, terms)` for every
/// completed iteration; iteration numbers start at 1.
pub fn train(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    mut progress: impl FnMut(usize, &LossTerms),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate()?;
    if tc.crop % cfg.total_downsample() != 0 {
        return Err(SapmError::config(format!(
            "crop {} is not a multiple of the total downsampling factor {}",
            tc.crop,
            cfg.total_downsample()
        )));
    }
    if dataset.min_side() < tc.crop {
        return Err(SapmError::config(format!(
            "dataset contains an image smaller than the {} px crop",
            tc.crop
        )));
    }

    let mut model = match &tc.pretrained {
        None => Model::new(cfg.clone())?,
        Some(path) => {
            let m = load_checkpoint(path)?;
            let mut a = m.cfg.clone();
            let mut b = cfg.clone();
            // Fine-tuning keeps the checkpoint architecture; the seed only
            // steers initialization, which the checkpoint replaces.
            a.seed = 0;
            b.seed = 0;
            if a != b {
                return Err(SapmError::config(format!(
                    "pretrained checkpoint {} was built for a different architecture",
                    path.display()
                )));
            }
            m
        }
    };

    std::fs::create_dir_all(out_dir)
        .map_err(|e| SapmError::io(format!("{}: {e}", out_dir.display())))?;
    let stem = artifact_stem(tc.lambda);
    let checkpoint_path = out_dir.join(format!("{stem}.ckpt"));
    let log_path = out_dir.join(format!("{stem}.log"));

    let mut log = String::new();
    log.push_str("# sapm training log\n");
    log.push_str(&format!("# lambda = {}\n", tc.lambda));
    log.push_str(&format!("# seed = {}\n", tc.seed));
    log.push_str(&format!("# config_id = {}\n", model.cfg.id()));
    log.push_str(&format!(
        "# pretrained = {}\n",
        tc.pretrained
            .as_ref()
            .map_or("none".to_string(), |p| p.display().to_string())
    ));
    log.push_str(&format!("# iters = {}\n# lr = {}\n", tc.iters, tc.lr));

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let adder_ids = model.adder_filter_ids();
    let mut adam = AdamState::new(&model.ps);
    let adam_cfg = AdamConfig::with_lr(tc.lr);

    let started = Instant::now();
    let mut initial_loss = f64::NAN;
    let mut strikes = 0usize;
    let mut final_terms = None;

    for it in 1..=tc.iters {
        let batch = dataset.sample_batch(tc.batch, tc.crop, &mut rng);
        let mut g = Graph::new(true);
        let mut aux = ForwardAux::new();
        let step = rd_loss(
            &mut g,
            &model,
            batch,
            tc.lambda,
            Mode::Train,
            QuantMode::Noise,
            &mut rng,
            &mut aux,
        )
        .and_then(|(loss, terms)| {
            g.backward(loss)?;
            let mut grads = g.param_grads(&model.ps);
            for &id in &adder_ids {
                if let Some(gr) = grads[id.index()].as_mut() {
                    scale_adder_grad(gr, ADDER_ETA);
                }
            }
            clip_global_norm(&mut grads, GRAD_CLIP);
            adam.step(&mut model.ps, &grads, &adam_cfg)?;
            model.project();
            aux.apply(&mut model.ps);
            Ok(terms)
        });
        match step {
            Ok(terms) => {
                log.push_str(&format!(
                    "iter={it} loss={:.6} d={:.8} ry={:.6} rz={:.6}\n",
                    terms.loss, terms.d, terms.r_y, terms.r_z
                ));
                if initial_loss.is_nan() {
                    initial_loss = terms.loss;
                }
                strikes = if terms.loss > DIVERGENCE_FACTOR * initial_loss {
                    strikes + 1
                } else {
                    0
                };
                progress(it, &terms);
                final_terms = Some(terms);
            }
            Err(e) => {
                // The iteration aborts without touching parameters; a
                // divergence strike keeps a permanently broken run from
                // looping forever.
                log.push_str(&format!("iter={it} event=aborted error=\"{e}\"\n"));
                strikes += 1;
            }
        }
        if strikes >= DIVERGENCE_RUN {
            log.push_str(&format!("# halted: diverged at iteration {it}\n"));
            std::fs::write(&log_path, &log)
                .map_err(|e| SapmError::io(format!("{}: {e}", log_path.display())))?;
            return Err(SapmError::numeric(format!(
                "training diverged: loss above {DIVERGENCE_FACTOR}x the initial value \
                 (or aborted) for {DIVERGENCE_RUN} consecutive iterations, last at {it}"
            )));
        }
    }

    let final_terms = final_terms.ok_or_else(|| {
        SapmError::numeric("training produced no successful iterations".to_string())
    })?;
    save_checkpoint(&checkpoint_path, &model)?;
    log.push_str(&format!("# checkpoint = {}\n", checkpoint_path.display()));
    log.push_str(&format!(
        "# wall_seconds = {:.1}\n",
        started.elapsed().as_secs_f64()
    ));
    std::fs::write(&log_path, &log)
        .map_err(|e| SapmError::io(format!("{}: {e}", log_path.display())))?;

    Ok(TrainOutcome {
        model,
        checkpoint_path,
        log_path,
        final_terms,
    })
}
