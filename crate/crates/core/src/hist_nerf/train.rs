use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{HistNerfModel, HistogramEmbedding};
use super::render::{pixel_rays, render_image, render_rays, RayOutputs, RenderMode, RenderSettings};
use crate::autodiff::{Adam, Tape, Tensor, Var};
use crate::data::{Frame, SceneDataset};
use crate::metrics::{psnr, psnr_from_mse};

/// Squared error summed over channels, averaged over rays.
fn ray_mse<'t>(pred: &Var<'t>, target: &Var<'t>) -> Var<'t> {
    let r = pred.shape()[0] as f64;
    pred.sub(target).square().sum().mul_scalar(1.0 / r)
}

/// Uncertainty-weighted photometric term, averaged over rays:
/// `|C - Ĉ|² / (2 β²) + ln(β²) / 2`, plus `lambda_u` times the mean
/// transient density.
pub fn fine_loss<'t>(rgb: &Var<'t>, target: &Var<'t>, beta: &Var<'t>, sigma_t_mean: &Var<'t>, lambda_u: f64) -> Var<'t> {
    let r = rgb.shape()[0] as f64;
    let beta2 = beta.square();
    let resid = rgb.sub(target).square().sum_last().reshape(&[rgb.shape()[0], 1]);
    let per_ray = resid.div(&beta2.mul_scalar(2.0)).add(&beta2.ln().mul_scalar(0.5));
    per_ray.sum().mul_scalar(1.0 / r).add(&sigma_t_mean.mul_scalar(lambda_u))
}

/// Coarse squared error on the base network plus [`fine_loss`] on the
/// composite render.
pub fn nerf_loss<'t>(out: &RayOutputs<'t>, target: &Var<'t>, lambda_u: f64) -> Var<'t> {
    let coarse = ray_mse(&out.rgb_coarse, target);
    let fine = fine_loss(
        out.rgb_composite.as_ref().expect("composite render"),
        target,
        out.beta.as_ref().expect("composite render"),
        out.sigma_t_mean.as_ref().expect("composite render"),
        lambda_u,
    );
    coarse.add(&fine)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NerfSchedule {
    pub epochs: usize,
    /// Optimizer steps per epoch; `None` means one pass over all pixels.
    pub steps_per_epoch: Option<usize>,
    pub batch_rays: usize,
    pub lr: f64,
    /// Per-epoch exponential decay rate: `lr * exp(-lr_decay * epoch)`.
    pub lr_decay: f64,
    pub lambda_u: f64,
    /// Validation frames rendered for the per-epoch PSNR.
    pub n_eval_frames: usize,
    pub eval_every: usize,
    /// With `false`, every embedding is zero (ablation).
    pub use_histogram: bool,
    pub seed: u64,
}

impl Default for NerfSchedule {
    fn default() -> Self {
        Self {
            epochs: 600,
            steps_per_epoch: None,
            batch_rays: 1024,
            lr: 5e-4,
            lr_decay: 5e-4,
            lambda_u: 0.01,
            n_eval_frames: 4,
            eval_every: 1,
            use_histogram: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NerfEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Static-render PSNR over the epoch's training rays.
    pub train_psnr: f64,
    /// Mean static-render PSNR over the held-out frames.
    pub val_psnr: Option<f64>,
}

/// Embedding used to render `frame`.
pub fn frame_embedding(model: &HistNerfModel, frame: &Frame, use_histogram: bool) -> HistogramEmbedding {
    if use_histogram {
        model.embed_histogram(&frame.histogram).expect("frame histogram matches model bins")
    } else {
        HistogramEmbedding::zeros(model.config())
    }
}

/// Mean static-render PSNR of `frames` against their images.
pub fn heldout_psnr(model: &HistNerfModel, frames: &[Frame], settings: &RenderSettings, use_histogram: bool) -> f64 {
    let total: f64 = frames
        .iter()
        .map(|f| {
            let emb = frame_embedding(model, f, use_histogram);
            let out = render_image(model, f.pose_or_panic(), &f.intrinsics, &emb, settings, RenderMode::Static);
            let target = f.image.resized(out.rgb_static.width(), out.rgb_static.height());
            psnr(&out.rgb_static, &target)
        })
        .sum();
    total / frames.len() as f64
}

fn eval_subset(frames: &[Frame], n: usize) -> Vec<Frame> {
    if frames.is_empty() || n == 0 {
        return Vec::new();
    }
    let n = n.min(frames.len());
    (0..n).map(|i| frames[i * frames.len() / n].clone()).collect()
}

/// Fits `model` to the posed training frames of `ds` (expected recentered)
/// with random ray batches. Entry 0 of the log is the untrained model.
pub fn train_nerf(ds: &SceneDataset, model: &mut HistNerfModel, settings: &RenderSettings, sched: &NerfSchedule) -> Vec<NerfEpoch> {
    assert!(!ds.train.is_empty(), "training needs posed frames");
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut opt = Adam::new(&model.params, sched.lr);
    let train = &ds.train;
    let hists: Vec<_> = train.iter().map(|f| &f.histogram).collect();
    let hist_t = model.histogram_tensor(&hists).expect("training histograms match model bins");
    let sizes: Vec<usize> = train.iter().map(|f| f.image.width() * f.image.height()).collect();
    let total_px: usize = sizes.iter().sum();
    let steps = sched
        .steps_per_epoch
        .unwrap_or_else(|| total_px.div_ceil(sched.batch_rays));
    let eval = eval_subset(&ds.val, sched.n_eval_frames);
    let evaluate = |m: &HistNerfModel| (!eval.is_empty()).then(|| heldout_psnr(m, &eval, settings, sched.use_histogram));

    let mut log = vec![NerfEpoch {
        epoch: 0,
        lr: sched.lr,
        loss: f64::NAN,
        train_psnr: f64::NAN,
        val_psnr: evaluate(model),
    }];
    for epoch in 1..=sched.epochs {
        let lr = sched.lr * (-sched.lr_decay * (epoch - 1) as f64).exp();
        opt.lr = lr;
        let mut loss_sum = 0.0;
        let mut se_sum = 0.0;
        let mut n_vals = 0usize;
        for _ in 0..steps {
            // Uniform over all training pixels, grouped by frame.
            let mut picks: Vec<(usize, usize)> = (0..sched.batch_rays)
                .map(|_| {
                    let mut p = rng.random_range(0..total_px);
                    let mut f = 0;
                    while p >= sizes[f] {
                        p -= sizes[f];
                        f += 1;
                    }
                    (f, p)
                })
                .collect();
            picks.sort_unstable();
            let mut o = Vec::with_capacity(picks.len() * 3);
            let mut d = Vec::with_capacity(picks.len() * 3);
            let mut target = Vec::with_capacity(picks.len() * 3);
            let mut image_of_ray = Vec::with_capacity(picks.len());
            for &(f, p) in &picks {
                let frame = &train[f];
                let w = frame.image.width();
                let (u, v) = (p % w, p / w);
                let (ro, rd) = pixel_rays(frame.pose_or_panic(), &frame.intrinsics, &[(u, v)]);
                o.extend_from_slice(ro.data());
                d.extend_from_slice(rd.data());
                target.extend(frame.image.pixel(u, v));
                image_of_ray.push(f);
            }
            let n = picks.len();
            let tape = Tape::new();
            let b = model.params.bind_all(&tape);
            let emb = if sched.use_histogram {
                model.embed_vars(&b, &tape.constant(hist_t.clone()))
            } else {
                let zeros = HistogramEmbedding::zeros(model.config());
                let refs = vec![&zeros; train.len()];
                model.embedding_constants(&tape, &refs)
            };
            let out = render_rays(
                model,
                &b,
                &emb,
                &tape.constant(Tensor::new(&[n, 3], o)),
                &tape.constant(Tensor::new(&[n, 3], d)),
                &image_of_ray,
                settings,
                RenderMode::Composite,
                Some(&mut rng),
            );
            let target = tape.constant(Tensor::new(&[n, 3], target));
            let loss = nerf_loss(&out, &target, sched.lambda_u);
            loss_sum += loss.value().item();
            let st = out.rgb_static.value();
            se_sum += st.data().iter().zip(target.value().data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            n_vals += st.len();
            let grads = tape.backward(loss);
            let g = b.grads(&grads);
            opt.step(&mut model.params, &g);
        }
        let val_psnr = (epoch % sched.eval_every.max(1) == 0 || epoch == sched.epochs)
            .then(|| evaluate(model))
            .flatten();
        log.push(NerfEpoch {
            epoch,
            lr,
            loss: loss_sum / steps as f64,
            train_psnr: psnr_from_mse(se_sum / n_vals as f64),
            val_psnr,
        });
    }
    log
}
