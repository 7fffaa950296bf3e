use rand::Rng;

use super::model::{EmbeddingVars, Heads, HistNerfModel, HistogramEmbedding, PointBatch};
use crate::autodiff::{Bound, Tape, Tensor, Var};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};

/// Sampling and resolution settings for volume rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub near: f64,
    pub far: f64,
    /// Shorter image side used by [`render_image`].
    pub short_side: usize,
    pub white_background: bool,
}

impl RenderSettings {
    pub fn new(near: f64, far: f64) -> Self {
        Self {
            n_coarse: 64,
            n_fine: 64,
            near,
            far,
            short_side: 60,
            white_background: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    /// Static head only; used wherever renders stand in for real images.
    Static,
    /// Static and transient heads combined.
    Composite,
}

/// Compositing weights `w_i = T_i (1 - exp(-sigma_i delta_i))`.
pub fn composite_weights(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    let mut trans = 1.0;
    sigma
        .iter()
        .zip(delta)
        .map(|(s, d)| {
            let keep = (-s * d).exp();
            let w = trans * (1.0 - keep);
            trans *= keep;
            w
        })
        .collect()
}

fn deltas(t: &[f64], far: f64) -> Vec<f64> {
    let n = t.len();
    (0..n)
        .map(|i| if i + 1 < n { t[i + 1] - t[i] } else { (far - t[i]).max(0.0) })
        .collect()
}

impl<'t> Var<'t> {
    /// Volume compositing of `values: [R, S, C]` under densities
    /// `sigma: [R, S]` with spacings `delta: [R, S]`.
    ///
    /// Returns `[R, C + 1]`: the weighted sums of each value channel followed
    /// by the accumulated opacity `sum_i w_i`.
    pub fn composite(&self, values: &Var<'t>, delta: Tensor) -> Var<'t> {
        let (sv, vv) = (self.value(), values.value());
        let (r, s) = (sv.shape()[0], sv.shape()[1]);
        let c = vv.shape()[2];
        assert_eq!(vv.shape(), &[r, s, c]);
        assert_eq!(delta.shape(), &[r, s]);
        let mut out = vec![0.0; r * (c + 1)];
        for ray in 0..r {
            let w = composite_weights(&sv.data()[ray * s..(ray + 1) * s], &delta.data()[ray * s..(ray + 1) * s]);
            let o = &mut out[ray * (c + 1)..(ray + 1) * (c + 1)];
            for (i, wi) in w.iter().enumerate() {
                let v = &vv.data()[(ray * s + i) * c..(ray * s + i + 1) * c];
                for j in 0..c {
                    o[j] += wi * v[j];
                }
                o[c] += wi;
            }
        }
        self.op(
            Tensor::new(&[r, c + 1], out),
            &[*self, *values],
            Box::new(move |g, p, _| {
                let (sd, vd, gd, dd) = (p[0].data(), p[1].data(), g.data(), delta.data());
                let mut gs = vec![0.0; r * s];
                let mut gv = vec![0.0; r * s * c];
                for ray in 0..r {
                    let sig = &sd[ray * s..(ray + 1) * s];
                    let del = &dd[ray * s..(ray + 1) * s];
                    let gr = &gd[ray * (c + 1)..(ray + 1) * (c + 1)];
                    // Per-sample contribution G_i and the transmittance after it.
                    let mut trans = 1.0;
                    let mut w = vec![0.0; s];
                    let mut after = vec![0.0; s];
                    let mut contrib = vec![0.0; s];
                    for i in 0..s {
                        let keep = (-sig[i] * del[i]).exp();
                        w[i] = trans * (1.0 - keep);
                        trans *= keep;
                        after[i] = trans;
                        let v = &vd[(ray * s + i) * c..(ray * s + i + 1) * c];
                        contrib[i] = gr[c] + (0..c).map(|j| gr[j] * v[j]).sum::<f64>();
                        for j in 0..c {
                            gv[(ray * s + i) * c + j] = w[i] * gr[j];
                        }
                    }
                    let mut suffix = 0.0;
                    for i in (0..s).rev() {
                        gs[ray * s + i] = del[i] * (after[i] * contrib[i] - suffix);
                        suffix += w[i] * contrib[i];
                    }
                }
                vec![Some(Tensor::new(&[r, s], gs)), Some(Tensor::new(&[r, s, c], gv))]
            }),
        )
    }

    /// Sample positions `o_r + t_rs d_r` for origins and directions `[R, 3]`
    /// and depths `t: [R, S]`; returns `[R * S, 3]`.
    pub fn ray_points(&self, dirs: &Var<'t>, t: &Tensor) -> Var<'t> {
        let (ov, dv) = (self.value(), dirs.value());
        let (r, s) = (t.shape()[0], t.shape()[1]);
        assert_eq!(ov.shape(), &[r, 3]);
        assert_eq!(dv.shape(), &[r, 3]);
        let mut out = Vec::with_capacity(r * s * 3);
        for ray in 0..r {
            let (o, d) = (ov.row(ray), dv.row(ray));
            for &ti in &t.data()[ray * s..(ray + 1) * s] {
                out.extend([o[0] + ti * d[0], o[1] + ti * d[1], o[2] + ti * d[2]]);
            }
        }
        let t = t.clone();
        self.op(
            Tensor::new(&[r * s, 3], out),
            &[*self, *dirs],
            Box::new(move |g, _, _| {
                let gd = g.data();
                let mut go = vec![0.0; r * 3];
                let mut gdir = vec![0.0; r * 3];
                for ray in 0..r {
                    for i in 0..s {
                        let ti = t.data()[ray * s + i];
                        for j in 0..3 {
                            let gv = gd[(ray * s + i) * 3 + j];
                            go[ray * 3 + j] += gv;
                            gdir[ray * 3 + j] += ti * gv;
                        }
                    }
                }
                vec![Some(Tensor::new(&[r, 3], go)), Some(Tensor::new(&[r, 3], gdir))]
            }),
        )
    }
}

/// Composites `sigma: [R, S]` and colors `[R, S, 3]` at depths `t: [R, S]`.
///
/// Returns `(rgb [R, 3], depth [R], weights [R, S])`.
pub fn composite(
    sigma: &Tensor,
    colors: &Tensor,
    t: &Tensor,
    far: f64,
    background: Option<[f64; 3]>,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (r, s) = (sigma.shape()[0], sigma.shape()[1]);
    if colors.shape() != [r, s, 3] || t.shape() != [r, s] {
        return Err(Error::ShapeMismatch(colors.shape().to_vec(), vec![r, s, 3]));
    }
    let mut delta = Vec::with_capacity(r * s);
    for ray in 0..r {
        let ts = &t.data()[ray * s..(ray + 1) * s];
        if ts.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::NonMonotonicDepths { ray });
        }
        delta.extend(deltas(ts, far));
    }
    let delta = Tensor::new(&[r, s], delta);
    let mut weights = Vec::with_capacity(r * s);
    for ray in 0..r {
        weights.extend(composite_weights(&sigma.data()[ray * s..(ray + 1) * s], &delta.data()[ray * s..(ray + 1) * s]));
    }
    let tape = Tape::new();
    let mut vals = Vec::with_capacity(r * s * 4);
    for i in 0..r * s {
        vals.extend_from_slice(&colors.data()[i * 3..i * 3 + 3]);
        vals.push(t.data()[i]);
    }
    let out = tape
        .constant(sigma.clone())
        .composite(&tape.constant(Tensor::new(&[r, s, 4], vals)), delta)
        .value();
    let mut rgb = Vec::with_capacity(r * 3);
    let mut depth = Vec::with_capacity(r);
    for ray in 0..r {
        let o = out.row(ray);
        let bg = background.unwrap_or([0.0; 3]);
        let rest = 1.0 - o[4];
        rgb.extend([o[0] + bg[0] * rest, o[1] + bg[1] * rest, o[2] + bg[2] * rest]);
        depth.push(o[3]);
    }
    Ok((Tensor::new(&[r, 3], rgb), Tensor::new(&[r], depth), Tensor::new(&[r, s], weights)))
}

/// Stratified depths on `[near, far]`: one per stratum, at the stratum
/// center unless `rng` is given.
pub fn stratified_depths(n: usize, near: f64, far: f64, rng: Option<&mut (dyn rand::RngCore + '_)>) -> Vec<f64> {
    let step = (far - near) / n as f64;
    match rng {
        Some(rng) => (0..n).map(|i| near + (i as f64 + rng.random::<f64>()) * step).collect(),
        None => (0..n).map(|i| near + (i as f64 + 0.5) * step).collect(),
    }
}

/// Inverse-transform samples from the piecewise-constant density with mass
/// `weights[i]` on `[edges[i], edges[i + 1]]`. A small floor keeps empty
/// rays sampling uniformly. Sorted output; evenly spaced quantiles unless
/// `rng` is given.
pub fn sample_pdf(edges: &[f64], weights: &[f64], n: usize, rng: Option<&mut (dyn rand::RngCore + '_)>) -> Vec<f64> {
    assert_eq!(edges.len(), weights.len() + 1);
    let padded: Vec<f64> = weights.iter().map(|w| w.max(0.0) + 1e-5).collect();
    let total: f64 = padded.iter().sum();
    let mut cdf = Vec::with_capacity(padded.len() + 1);
    cdf.push(0.0);
    for w in &padded {
        cdf.push(cdf.last().unwrap() + w / total);
    }
    let mut us: Vec<f64> = match rng {
        Some(rng) => (0..n).map(|_| rng.random::<f64>()).collect(),
        None => (0..n).map(|j| (j as f64 + 0.5) / n as f64).collect(),
    };
    us.sort_by(f64::total_cmp);
    us.into_iter()
        .map(|u| {
            let i = cdf.partition_point(|c| *c <= u).clamp(1, padded.len()) - 1;
            let frac = ((u - cdf[i]) / (cdf[i + 1] - cdf[i])).clamp(0.0, 1.0);
            edges[i] + frac * (edges[i + 1] - edges[i])
        })
        .collect()
}

/// Per-ray outputs on a tape.
pub struct RayOutputs<'t> {
    pub rgb_coarse: Var<'t>,
    pub rgb_static: Var<'t>,
    pub depth_static: Var<'t>,
    pub rgb_composite: Option<Var<'t>>,
    pub depth_composite: Option<Var<'t>>,
    /// `beta_min` plus the composited transient uncertainty.
    pub beta: Option<Var<'t>>,
    /// Mean transient density over all fine samples.
    pub sigma_t_mean: Option<Var<'t>>,
    /// Final compositing weights `[R, S]` of the requested mode.
    pub weights: Tensor,
}

/// Camera rays through pixel centers, as plain `[R, 3]` tensors.
pub fn pixel_rays(pose: &Pose, k: &Intrinsics, pixels: &[(usize, usize)]) -> (Tensor, Tensor) {
    let mut o = Vec::with_capacity(pixels.len() * 3);
    let mut d = Vec::with_capacity(pixels.len() * 3);
    for &(u, v) in pixels {
        let dir = pose.rotation * k.pixel_direction(u, v);
        o.extend(pose.translation.iter());
        d.extend(dir.iter());
    }
    let n = pixels.len();
    (Tensor::new(&[n, 3], o), Tensor::new(&[n, 3], d))
}

/// Camera rays whose origin and directions are differentiable functions of a
/// row-major `3 x 4` pose variable.
pub fn pose_rays<'t>(pose12: &Var<'t>, k: &Intrinsics, pixels: &[(usize, usize)]) -> (Var<'t>, Var<'t>) {
    let tape = pose12.tape();
    let m = pose12.reshape(&[3, 4]);
    let rot = m.slice_last(0, 3);
    let t = m.slice_last(3, 4).reshape(&[1, 3]);
    let mut dcam = Vec::with_capacity(pixels.len() * 3);
    for &(u, v) in pixels {
        dcam.extend(k.pixel_direction(u, v).iter());
    }
    let n = pixels.len();
    let dirs = tape.constant(Tensor::new(&[n, 3], dcam)).matmul(&rot.transpose());
    let origins = tape.constant(Tensor::zeros(&[n, 3])).add(&t);
    (origins, dirs)
}

pub fn all_pixels(width: usize, height: usize) -> Vec<(usize, usize)> {
    (0..height).flat_map(|v| (0..width).map(move |u| (u, v))).collect()
}

/// Renders rays `origins`/`dirs` (`[R, 3]`); ray `i` uses embedding row
/// `image_of_ray[i]`. Random stratification and fine sampling when `rng` is
/// given, deterministic midpoints otherwise.
#[allow(clippy::too_many_arguments)]
pub fn render_rays<'t>(
    model: &HistNerfModel,
    b: &Bound<'t>,
    emb: &EmbeddingVars<'t>,
    origins: &Var<'t>,
    dirs: &Var<'t>,
    image_of_ray: &[usize],
    settings: &RenderSettings,
    mode: RenderMode,
    mut rng: Option<&mut (dyn rand::RngCore + '_)>,
) -> RayOutputs<'t> {
    let tape = origins.tape();
    let cfg = model.config();
    let enc = cfg.encoding;
    let r = image_of_ray.len();
    let (sc, sf) = (settings.n_coarse, settings.n_fine);
    let (near, far) = (settings.near, settings.far);
    let bg = settings.white_background;

    // Coarse pass on the base network.
    let mut tc = Vec::with_capacity(r * sc);
    for _ in 0..r {
        tc.extend(stratified_depths(sc, near, far, rng.as_deref_mut()));
    }
    let tc = Tensor::new(&[r, sc], tc);
    let enc_d = dirs.positional_encode(enc.n_freqs_direction, enc.include_input);
    let pts = origins.ray_points(dirs, &tc).positional_encode(enc.n_freqs_position, enc.include_input);
    let per_point = |s: usize| image_of_ray.iter().flat_map(|&i| std::iter::repeat_n(i, s)).collect::<Vec<_>>();
    let coarse = model.field(
        b,
        emb,
        &PointBatch {
            enc_x: pts,
            enc_d,
            dir_repeat: sc,
            image_of_point: per_point(sc),
        },
        Heads::Base,
    );
    let delta_c: Vec<f64> = (0..r).flat_map(|i| deltas(&tc.data()[i * sc..(i + 1) * sc], far)).collect();
    let delta_c = Tensor::new(&[r, sc], delta_c);
    let sigma_c = coarse.sigma_b.reshape(&[r, sc]);
    let rgb_coarse = with_background(
        sigma_c.composite(&coarse.rgb_b.reshape(&[r, sc, 3]), delta_c.clone()),
        3,
        bg,
    );

    // Fine depths from the coarse weights, merged with the coarse ones.
    let sigma_vals = sigma_c.value();
    let step = (far - near) / sc as f64;
    let edges: Vec<f64> = (0..=sc).map(|i| near + i as f64 * step).collect();
    let s_all = sc + sf;
    let mut t_all = Vec::with_capacity(r * s_all);
    for i in 0..r {
        let w = composite_weights(&sigma_vals.data()[i * sc..(i + 1) * sc], &delta_c.data()[i * sc..(i + 1) * sc]);
        let mut ts = tc.data()[i * sc..(i + 1) * sc].to_vec();
        ts.extend(sample_pdf(&edges, &w, sf, rng.as_deref_mut()));
        ts.sort_by(f64::total_cmp);
        t_all.extend(ts);
    }
    let t_all = Tensor::new(&[r, s_all], t_all);
    let delta: Vec<f64> = (0..r).flat_map(|i| deltas(&t_all.data()[i * s_all..(i + 1) * s_all], far)).collect();
    let delta = Tensor::new(&[r, s_all], delta);

    let heads = match mode {
        RenderMode::Static => Heads::Static,
        RenderMode::Composite => Heads::All,
    };
    let pts = origins
        .ray_points(dirs, &t_all)
        .positional_encode(enc.n_freqs_position, enc.include_input);
    let fine = model.field(
        b,
        emb,
        &PointBatch {
            enc_x: pts,
            enc_d,
            dir_repeat: s_all,
            image_of_point: per_point(s_all),
        },
        heads,
    );
    let t_col = tape.constant(t_all.clone().reshape(&[r * s_all, 1]));
    let sigma_s = fine.sigma_s.expect("static head");
    let c_s = fine.c_s.expect("static head");
    let static_vals = Var::concat_last(&[c_s, t_col]).reshape(&[r, s_all, 4]);
    let sigma_s_rs = sigma_s.reshape(&[r, s_all]);
    let st = sigma_s_rs.composite(&static_vals, delta.clone());
    let rgb_static = with_background(st, 4, bg);
    let depth_static = st.slice_last(3, 4);

    let mut out = RayOutputs {
        rgb_coarse,
        rgb_static,
        depth_static,
        rgb_composite: None,
        depth_composite: None,
        beta: None,
        sigma_t_mean: None,
        weights: Tensor::zeros(&[0]),
    };
    if mode == RenderMode::Static {
        out.weights = weights_of(&sigma_s_rs.value(), &delta);
        return out;
    }

    let sigma_t = fine.sigma_t.expect("transient head");
    let sigma = sigma_s.add(&sigma_t);
    let inv = sigma.add_scalar(1e-10);
    let color = c_s.mul(&sigma_s).add(&fine.c_t.expect("transient head").mul(&sigma_t)).div(&inv);
    let beta_frac = fine.beta.expect("transient head").mul(&sigma_t).div(&inv);
    let vals = Var::concat_last(&[color, t_col, beta_frac]).reshape(&[r, s_all, 5]);
    let sigma_rs = sigma.reshape(&[r, s_all]);
    let comp = sigma_rs.composite(&vals, delta.clone());
    out.rgb_composite = Some(with_background(comp, 5, bg));
    out.depth_composite = Some(comp.slice_last(3, 4));
    out.beta = Some(comp.slice_last(4, 5).add_scalar(cfg.beta_min));
    out.sigma_t_mean = Some(sigma_t.mean());
    out.weights = weights_of(&sigma_rs.value(), &delta);
    out
}

fn weights_of(sigma: &Tensor, delta: &Tensor) -> Tensor {
    let s = sigma.cols();
    let w: Vec<f64> = (0..sigma.rows())
        .flat_map(|i| composite_weights(&sigma.data()[i * s..(i + 1) * s], &delta.data()[i * s..(i + 1) * s]))
        .collect();
    Tensor::new(sigma.shape(), w)
}

/// First three channels of a composite, over white when `white` is set.
fn with_background<'t>(comp: Var<'t>, acc_col: usize, white: bool) -> Var<'t> {
    let rgb = comp.slice_last(0, 3);
    if white {
        let rest = comp.slice_last(acc_col, acc_col + 1).neg().add_scalar(1.0);
        rgb.add(&rest)
    } else {
        rgb
    }
}

/// Full-image render.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub rgb_static: Image,
    pub rgb_composite: Option<Image>,
    pub depth: Vec<f64>,
    /// Per-pixel `beta`, present in composite mode.
    pub uncertainty: Option<Vec<f64>>,
    /// Per-pixel compositing weights `[H * W, S]`.
    pub weights: Tensor,
}

const CHUNK: usize = 32;

/// Renders the view from `pose` at `k` rescaled to `settings.short_side`,
/// with deterministic sampling.
pub fn render_image(
    model: &HistNerfModel,
    pose: &Pose,
    k: &Intrinsics,
    emb: &HistogramEmbedding,
    settings: &RenderSettings,
    mode: RenderMode,
) -> RenderOutput {
    let k = k.with_short_side(settings.short_side);
    let pixels = all_pixels(k.width, k.height);
    let mut rgb_s = Vec::with_capacity(pixels.len() * 3);
    let mut rgb_c = Vec::new();
    let mut depth = Vec::with_capacity(pixels.len());
    let mut beta = Vec::new();
    let mut weights = Vec::new();
    for chunk in pixels.chunks(CHUNK) {
        let tape = Tape::new();
        let b = model.params.bind_frozen(&tape);
        let e = model.embedding_constants(&tape, &[emb]);
        let (o, d) = pixel_rays(pose, &k, chunk);
        let out = render_rays(
            model,
            &b,
            &e,
            &tape.constant(o),
            &tape.constant(d),
            &vec![0; chunk.len()],
            settings,
            mode,
            None,
        );
        rgb_s.extend_from_slice(out.rgb_static.value().data());
        weights.extend_from_slice(out.weights.data());
        if mode == RenderMode::Composite {
            rgb_c.extend_from_slice(out.rgb_composite.unwrap().value().data());
            depth.extend_from_slice(out.depth_composite.unwrap().value().data());
            beta.extend_from_slice(out.beta.unwrap().value().data());
        } else {
            depth.extend_from_slice(out.depth_static.value().data());
        }
    }
    let img = |d: Vec<f64>| Image::from_tensor(&Tensor::new(&[k.height, k.width, 3], d));
    let s = settings.n_coarse + settings.n_fine;
    RenderOutput {
        rgb_static: img(rgb_s),
        rgb_composite: (mode == RenderMode::Composite).then(|| img(rgb_c)),
        depth,
        uncertainty: (mode == RenderMode::Composite).then_some(beta),
        weights: Tensor::new(&[pixels.len(), s], weights),
    }
}

/// Static-mode render at a pose variable, differentiable w.r.t. the pose.
/// Returns `[1, H, W, 3]` at intrinsics `k` (no rescaling).
pub fn render_pose_var<'t>(
    model: &HistNerfModel,
    b: &Bound<'t>,
    pose12: &Var<'t>,
    k: &Intrinsics,
    emb: &HistogramEmbedding,
    settings: &RenderSettings,
) -> Var<'t> {
    let tape = pose12.tape();
    let pixels = all_pixels(k.width, k.height);
    let e = model.embedding_constants(tape, &[emb]);
    let (o, d) = pose_rays(pose12, k, &pixels);
    let out = render_rays(model, b, &e, &o, &d, &vec![0; pixels.len()], settings, RenderMode::Static, None);
    out.rgb_static.reshape(&[1, k.height, k.width, 3])
}
