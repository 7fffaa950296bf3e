//! Procedural scenes of Gaussian density blobs with a reference renderer.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Frame, Image, SceneDataset, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::geometry::{look_at, random_unit_vector, Intrinsics, Pose};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub color: [f64; 3],
    pub amplitude: f64,
}

/// Per-image tone curve `clamp(gain * v^gamma)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Exposure {
    pub gain: f64,
    pub gamma: f64,
}

impl Default for Exposure {
    fn default() -> Self {
        Self {
            gain: 1.0,
            gamma: 1.0,
        }
    }
}

impl Exposure {
    pub fn apply(&self, v: f64) -> f64 {
        (self.gain * v.max(0.0).powf(self.gamma)).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub blobs: Vec<Blob>,
    pub background_color: [f64; 3],
    pub near: f64,
    pub far: f64,
    /// Exposure of each training frame, then of each validation frame.
    pub train_exposures: Vec<Exposure>,
    pub val_exposures: Vec<Exposure>,
}

impl ToyScene {
    pub fn density(&self, x: &Vector3<f64>) -> f64 {
        self.blobs
            .iter()
            .map(|b| b.amplitude * (-(x - b.center).norm_squared() / (b.radius * b.radius)).exp())
            .sum()
    }
}

/// Blobs are cut off at this many radii (density factor `e^-16`).
const BLOB_CUTOFF: f64 = 4.0;

/// Emission-absorption quadrature with `n_quad` uniform midpoint samples on
/// `[near, far]`. Colors are density-weighted blob colors; the background
/// shows through the remaining transmittance. No exposure is applied.
pub fn oracle_render(scene: &ToyScene, pose: &Pose, k: &Intrinsics, n_quad: usize) -> Image {
    assert!(n_quad >= 256, "oracle quadrature needs at least 256 samples");
    let dt = (scene.far - scene.near) / n_quad as f64;
    Image::from_fn(k.width, k.height, |u, v| {
        let dir = pose.rotation * k.pixel_direction(u, v);
        let o = pose.translation;
        let mut sigma = vec![0.0; n_quad];
        let mut col = vec![[0.0; 3]; n_quad];
        for blob in &scene.blobs {
            // |o + t d - c|^2 / r^2 = qa t^2 + qb t + qc, evaluated at the
            // midpoints by a multiplicative recurrence within the cutoff span.
            let oc = o - blob.center;
            let inv_r2 = 1.0 / (blob.radius * blob.radius);
            let (qa, qb, qc) = (inv_r2, 2.0 * dir.dot(&oc) * inv_r2, oc.norm_squared() * inv_r2);
            let tc = -dir.dot(&oc);
            let reach2 = BLOB_CUTOFF * BLOB_CUTOFF * blob.radius * blob.radius - (oc + dir * tc).norm_squared();
            if reach2 <= 0.0 {
                continue;
            }
            let to_index = |t: f64| (t - scene.near) / dt - 0.5;
            let first = to_index(tc - reach2.sqrt()).ceil().max(0.0) as usize;
            let last = to_index(tc + reach2.sqrt()).floor().min(n_quad as f64 - 1.0);
            if last < first as f64 {
                continue;
            }
            let t0 = scene.near + (first as f64 + 0.5) * dt;
            let mut g = (-(qa * t0 * t0 + qb * t0 + qc)).exp();
            let mut ratio = (-(qa * (2.0 * t0 * dt + dt * dt) + qb * dt)).exp();
            let step = (-2.0 * qa * dt * dt).exp();
            for i in first..=last as usize {
                let s = blob.amplitude * g;
                sigma[i] += s;
                for c in 0..3 {
                    col[i][c] += s * blob.color[c];
                }
                g *= ratio;
                ratio *= step;
            }
        }
        let mut trans = 1.0;
        let mut rgb = [0.0; 3];
        for i in 0..n_quad {
            if sigma[i] <= 0.0 {
                continue;
            }
            let alpha = 1.0 - (-sigma[i] * dt).exp();
            for c in 0..3 {
                rgb[c] += trans * alpha * col[i][c] / sigma[i];
            }
            trans *= 1.0 - alpha;
            if trans < 1e-12 {
                break;
            }
        }
        let bg = scene.background_color;
        [rgb[0] + trans * bg[0], rgb[1] + trans * bg[1], rgb[2] + trans * bg[2]]
    })
}

/// Options for [`make_toy_scene`] beyond the core counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyOptions {
    pub seed: u64,
    pub n_blobs: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub width: usize,
    pub height: usize,
    pub exposure_split: bool,
    pub n_quad: usize,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            seed: 42,
            n_blobs: 12,
            n_train: 100,
            n_val: 50,
            width: 60,
            height: 60,
            exposure_split: true,
            n_quad: 512,
        }
    }
}

const CAMERA_DISTANCE: f64 = 4.0;

/// Camera intrinsics used by toy scenes of the given size.
pub fn toy_intrinsics(width: usize, height: usize) -> Intrinsics {
    Intrinsics {
        focal: 1.1 * width.max(height) as f64,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
    }
}

fn sample_camera(rng: &mut ChaCha8Rng) -> Pose {
    let azimuth = rng.random_range(-60f64..60.0).to_radians();
    let elevation = rng.random_range(10f64..35.0).to_radians();
    let dist = CAMERA_DISTANCE + rng.random_range(-0.25..0.25);
    let eye = Vector3::new(
        dist * elevation.cos() * azimuth.sin(),
        dist * elevation.sin(),
        -dist * elevation.cos() * azimuth.cos(),
    );
    let target = random_unit_vector(rng) * rng.random_range(0.0..0.15);
    look_at(&eye, &target, &Vector3::y())
}

fn sample_exposure(rng: &mut ChaCha8Rng, perturbed: bool) -> Exposure {
    if perturbed {
        Exposure {
            gain: rng.random_range(0.7..=1.3),
            gamma: rng.random_range(0.8..=1.25),
        }
    } else {
        Exposure::default()
    }
}

/// Deterministic blob scene with cameras on an arc around the origin.
///
/// With `exposure_split`, every odd-indexed frame gets a random exposure.
/// Images are quantized to 8 bits, as if read from disk.
pub fn make_toy_scene(opts: &ToyOptions) -> (ToyScene, SceneDataset) {
    assert!(opts.n_blobs >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let blobs = (0..opts.n_blobs)
        .map(|_| Blob {
            center: random_unit_vector(&mut rng) * rng.random::<f64>().cbrt(),
            radius: rng.random_range(0.2..0.45),
            color: [(); 3].map(|_| rng.random_range(0.1..0.95)),
            amplitude: rng.random_range(8.0..30.0),
        })
        .collect();
    let mut scene = ToyScene {
        blobs,
        background_color: [0.0; 3],
        near: 1.5,
        far: 6.5,
        train_exposures: Vec::new(),
        val_exposures: Vec::new(),
    };
    let k = toy_intrinsics(opts.width, opts.height);
    let mut split = |n: usize, exposures: &mut Vec<Exposure>| -> Vec<Frame> {
        (0..n)
            .map(|i| {
                let pose = sample_camera(&mut rng);
                let exp = sample_exposure(&mut rng, opts.exposure_split && i % 2 == 1);
                exposures.push(exp);
                let clean = oracle_render(&scene, &pose, &k, opts.n_quad);
                let img = Image::from_fn(k.width, k.height, |x, y| clean.pixel(x, y).map(|v| exp.apply(v)))
                    .quantized();
                Frame::new(format!("frame-{i:06}"), img, Some(pose), k, DEFAULT_BINS)
            })
            .collect()
    };
    let mut train_exp = Vec::new();
    let mut val_exp = Vec::new();
    let train = split(opts.n_train, &mut train_exp);
    let val = split(opts.n_val, &mut val_exp);
    scene.train_exposures = train_exp;
    scene.val_exposures = val_exp;
    let dataset = SceneDataset {
        train,
        val,
        unlabeled: Vec::new(),
        unlabeled_truth: Vec::new(),
        near: scene.near,
        far: scene.far,
        alignment: Pose::identity(),
    };
    (scene, dataset)
}

/// Self-describing text form of a toy scene.
pub fn format_manifest(scene: &ToyScene, opts: &ToyOptions) -> String {
    let mut s = String::from("dfreloc-toy-scene 1\n");
    let _ = writeln!(s, "seed {}", opts.seed);
    let _ = writeln!(s, "size {} {}", opts.width, opts.height);
    let _ = writeln!(s, "bounds {:e} {:e}", scene.near, scene.far);
    let bg = scene.background_color;
    let _ = writeln!(s, "background {:e} {:e} {:e}", bg[0], bg[1], bg[2]);
    for b in &scene.blobs {
        let _ = writeln!(
            s,
            "blob {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e}",
            b.center.x, b.center.y, b.center.z, b.radius, b.color[0], b.color[1], b.color[2], b.amplitude
        );
    }
    for (tag, list) in [("train", &scene.train_exposures), ("val", &scene.val_exposures)] {
        for e in list {
            let _ = writeln!(s, "exposure {tag} {:e} {:e}", e.gain, e.gamma);
        }
    }
    s
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<ToyScene> {
    let bad = |reason: String| Error::MalformedScene {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("dfreloc-toy-scene 1") {
        return Err(bad("missing toy manifest header".into()));
    }
    let mut scene = ToyScene {
        blobs: Vec::new(),
        background_color: [0.0; 3],
        near: 0.0,
        far: 0.0,
        train_exposures: Vec::new(),
        val_exposures: Vec::new(),
    };
    for line in lines {
        let mut parts = line.split_whitespace();
        let Some(tag) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        let nums = |skip: usize, n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = rest[skip.min(rest.len())..]
                .iter()
                .map(|t| t.parse::<f64>().map_err(|e| bad(format!("{line}: {e}"))))
                .collect::<Result<_>>()?;
            if v.len() != n {
                return Err(bad(format!("{line}: expected {n} numbers")));
            }
            Ok(v)
        };
        match tag {
            "seed" | "size" => {}
            "bounds" => {
                let v = nums(0, 2)?;
                (scene.near, scene.far) = (v[0], v[1]);
            }
            "background" => {
                let v = nums(0, 3)?;
                scene.background_color = [v[0], v[1], v[2]];
            }
            "blob" => {
                let v = nums(0, 8)?;
                scene.blobs.push(Blob {
                    center: Vector3::new(v[0], v[1], v[2]),
                    radius: v[3],
                    color: [v[4], v[5], v[6]],
                    amplitude: v[7],
                });
            }
            "exposure" => {
                let v = nums(1, 2)?;
                let e = Exposure {
                    gain: v[0],
                    gamma: v[1],
                };
                match rest.first() {
                    Some(&"train") => scene.train_exposures.push(e),
                    Some(&"val") => scene.val_exposures.push(e),
                    _ => return Err(bad(format!("{line}: unknown split"))),
                }
            }
            other => return Err(bad(format!("unknown manifest entry `{other}`"))),
        }
    }
    if !(scene.near < scene.far) {
        return Err(bad("bounds missing or empty".into()));
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, split: bool) -> ToyOptions {
        ToyOptions {
            seed,
            n_blobs: 4,
            n_train: 4,
            n_val: 2,
            width: 12,
            height: 10,
            exposure_split: split,
            n_quad: 256,
        }
    }

    #[test]
    fn empty_scene_renders_background() {
        let scene = ToyScene {
            blobs: Vec::new(),
            background_color: [0.2, 0.4, 0.6],
            near: 1.0,
            far: 5.0,
            train_exposures: Vec::new(),
            val_exposures: Vec::new(),
        };
        let img = oracle_render(&scene, &Pose::identity(), &toy_intrinsics(6, 5), 256);
        assert!(img.pixels().all(|p| p == [0.2, 0.4, 0.6]));
    }

    #[test]
    fn quadrature_converges() {
        let (scene, ds) = make_toy_scene(&small(3, false));
        let k = toy_intrinsics(16, 16);
        for f in ds.train.iter().take(2) {
            let pose = f.pose.unwrap();
            let a = oracle_render(&scene, &pose, &k, 1024);
            let b = oracle_render(&scene, &pose, &k, 2048);
            let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-3, "{worst}");
        }
    }

    /// Direct midpoint quadrature using `ToyScene::density` at every sample.
    fn brute_force(scene: &ToyScene, pose: &Pose, k: &Intrinsics, n: usize) -> Image {
        let dt = (scene.far - scene.near) / n as f64;
        Image::from_fn(k.width, k.height, |u, v| {
            let dir = pose.rotation * k.pixel_direction(u, v);
            let mut trans = 1.0;
            let mut rgb = [0.0; 3];
            for i in 0..n {
                let x = pose.translation + dir * (scene.near + (i as f64 + 0.5) * dt);
                let sigma = scene.density(&x);
                let alpha = 1.0 - (-sigma * dt).exp();
                for c in 0..3 {
                    let weighted: f64 = scene
                        .blobs
                        .iter()
                        .map(|b| b.amplitude * (-(x - b.center).norm_squared() / (b.radius * b.radius)).exp() * b.color[c])
                        .sum();
                    rgb[c] += trans * alpha * weighted / sigma;
                }
                trans *= 1.0 - alpha;
            }
            [0, 1, 2].map(|c| rgb[c] + trans * scene.background_color[c])
        })
    }

    #[test]
    fn matches_brute_force_quadrature() {
        let (mut scene, ds) = make_toy_scene(&small(3, false));
        scene.background_color = [0.3, 0.6, 0.9];
        let k = toy_intrinsics(10, 10);
        for f in ds.train.iter().take(2) {
            let pose = f.pose.unwrap();
            let a = oracle_render(&scene, &pose, &k, 256);
            let b = brute_force(&scene, &pose, &k, 256);
            assert!(a.to_tensor().max_abs_diff(&b.to_tensor()) < 1e-5);
        }
    }

    #[test]
    fn opaque_blob_shows_its_color() {
        let color = [0.9, 0.3, 0.1];
        let scene = ToyScene {
            blobs: vec![Blob {
                center: Vector3::new(0.0, 0.0, 4.0),
                radius: 0.5,
                color,
                amplitude: 1000.0,
            }],
            background_color: [1.0; 3],
            near: 1.0,
            far: 7.0,
            train_exposures: Vec::new(),
            val_exposures: Vec::new(),
        };
        let img = oracle_render(&scene, &Pose::identity(), &toy_intrinsics(9, 9), 512);
        let p = img.pixel(4, 4);
        for c in 0..3 {
            assert!((p[c] - color[c]).abs() < 1e-2);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (s1, d1) = make_toy_scene(&small(5, true));
        let (s2, d2) = make_toy_scene(&small(5, true));
        assert_eq!(s1, s2);
        assert_eq!(d1, d2);
        let img = &d1.train[0].image;
        let again = oracle_render(&s1, d1.train[0].pose.as_ref().unwrap(), &d1.train[0].intrinsics, 256);
        assert_eq!(again, oracle_render(&s1, d1.train[0].pose.as_ref().unwrap(), &d1.train[0].intrinsics, 256));
        assert_eq!(img.width(), 12);
    }

    #[test]
    fn exposure_split_controls_exposures() {
        let (s, _) = make_toy_scene(&small(6, false));
        assert!(s.train_exposures.iter().chain(&s.val_exposures).all(|e| *e == Exposure::default()));
        let (s, _) = make_toy_scene(&small(6, true));
        let changed = s.train_exposures.iter().filter(|e| **e != Exposure::default()).count();
        assert_eq!(changed, 2);
        for e in &s.train_exposures {
            assert!((0.7..=1.3).contains(&e.gain) && (0.8..=1.25).contains(&e.gamma));
        }
    }

    #[test]
    fn manifest_round_trip() {
        let opts = small(8, true);
        let (s, _) = make_toy_scene(&opts);
        let parsed = parse_manifest(&format_manifest(&s, &opts), Path::new("m")).unwrap();
        assert_eq!(parsed.blobs.len(), s.blobs.len());
        for (a, b) in parsed.blobs.iter().zip(&s.blobs) {
            assert!((a.center - b.center).norm() < 1e-12 && (a.amplitude - b.amplitude).abs() < 1e-12);
        }
        assert_eq!(parsed.train_exposures.len(), 4);
        assert!(parse_manifest("nope", Path::new("m")).is_err());
    }
}
