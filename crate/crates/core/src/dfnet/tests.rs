use nalgebra::{DMatrix, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Tape, Tensor};
use crate::data::{make_toy_scene, Image, ToyOptions};
use crate::error::Error;
use crate::geometry::{look_at, Pose};
use crate::hist_nerf::{EncodingConfig, HistNerfModel, NerfConfig, RenderSettings};

fn tiny_config() -> DfnetConfig {
    DfnetConfig {
        input_short_side: 16,
        channels: [3, 4, 4, 5, 5],
        convs_per_block: 1,
        feature_hidden: 3,
        feature_channels: 4,
        pose_hidden: 6,
        ..DfnetConfig::default()
    }
}

fn random_map(rng: &mut ChaCha8Rng, shape: &[usize]) -> FeatureMap {
    FeatureMap {
        level: FeatureLevel::Fine,
        data: Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)),
    }
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_fn(w, h, |_, _| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
}

/// Per-location loop with explicit norms.
fn distance_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let c = *a.shape().last().unwrap();
    let locs = a.len() / c;
    let mut total = 0.0;
    for l in 0..locs {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for k in 0..c {
            let (x, y) = (a.data()[l * c + k], b.data()[l * c + k]);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let cos = if na > 0.0 && nb > 0.0 { dot / (na.sqrt() * nb.sqrt()) } else { 0.0 };
        total += 1.0 - cos;
    }
    total / locs as f64
}

/// Single-location maps whose channel vectors have the given Gram matrix,
/// in the order real_p, syn_p, real_pbar, syn_pbar.
fn batch_from_gram(g: [[f64; 4]; 4]) -> TripletBatch {
    let m = DMatrix::from_fn(4, 4, |r, c| g[r][c]);
    let l = m.cholesky().expect("gram matrix is positive definite").l();
    let map = |i: usize| FeatureMap {
        level: FeatureLevel::Fine,
        data: Tensor::new(&[1, 1, 4], (0..4).map(|k| l[(i, k)]).collect()),
    };
    TripletBatch {
        m_real_p: map(0),
        m_syn_p: map(1),
        m_real_pbar: map(2),
        m_syn_pbar: map(3),
    }
}

#[test]
fn feature_distance_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let a = random_map(&mut rng, &[5, 7, 6]);
        let b = random_map(&mut rng, &[5, 7, 6]);
        let d = feature_distance(&a, &b).unwrap();
        assert!((d - distance_oracle(&a.data, &b.data)).abs() < 1e-9);
        assert!((d - feature_distance(&b, &a).unwrap()).abs() < 1e-12);
        assert!((0.0..=2.0).contains(&d));
    }
}

#[test]
fn feature_distance_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_map(&mut rng, &[3, 3, 4]);
    assert!(feature_distance(&a, &a).unwrap().abs() < 1e-12);

    let x = FeatureMap {
        level: FeatureLevel::Fine,
        data: Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 3.0]),
    };
    let y = FeatureMap {
        level: FeatureLevel::Fine,
        data: Tensor::new(&[1, 2, 2], vec![0.0, 2.0, -1.0, 0.0]),
    };
    assert!((feature_distance(&x, &y).unwrap() - 1.0).abs() < 1e-12);

    let zero = FeatureMap {
        level: FeatureLevel::Fine,
        data: Tensor::zeros(&[1, 2, 2]),
    };
    assert_eq!(feature_distance(&x, &zero).unwrap(), 1.0);

    let other = random_map(&mut rng, &[3, 4, 4]);
    assert!(matches!(feature_distance(&a, &other), Err(Error::ShapeMismatch(..))));
}

#[test]
fn cosine_reductions() {
    let a = Tensor::new(&[3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    let b = Tensor::new(&[3, 2], vec![0.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
    let want = 2.0 + (1.0 - 1.0 / 2f64.sqrt());
    assert!((cosine_dissimilarity(&a, &b, Reduction::Sum).unwrap() - want).abs() < 1e-12);
    assert!((cosine_dissimilarity(&a, &b, Reduction::Mean).unwrap() - want / 3.0).abs() < 1e-12);
}

#[test]
fn q_minus_picks_the_smallest_negative() {
    // Cosines 0.5, 0.7, 0.1, 0.3 give distances 0.5, 0.3, 0.9, 0.7.
    let t = batch_from_gram([
        [1.0, 0.0, 0.5, 0.7],
        [0.0, 1.0, 0.1, 0.3],
        [0.5, 0.1, 1.0, 0.0],
        [0.7, 0.3, 0.0, 1.0],
    ]);
    let d = negative_distances(&t).unwrap();
    for (got, want) in d.iter().zip([0.5, 0.3, 0.9, 0.7]) {
        assert!((got - want).abs() < 1e-12, "{d:?}");
    }
    let (q, i) = q_minus(&t).unwrap();
    assert!((q - 0.3).abs() < 1e-12);
    assert_eq!(i, 1);
}

#[test]
fn q_minus_ties_go_to_the_first_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_map(&mut rng, &[2, 2, 3]);
    let pbar = random_map(&mut rng, &[2, 2, 3]);
    let t = TripletBatch {
        m_real_p: p.clone(),
        m_syn_p: p,
        m_real_pbar: pbar.clone(),
        m_syn_pbar: pbar,
    };
    let d = negative_distances(&t).unwrap();
    let (q, i) = q_minus(&t).unwrap();
    assert_eq!(i, 0);
    assert_eq!(q, d[0]);
    assert_eq!(argmin4(&[0.2, 0.1, 0.1, 0.1]), 1);
}

#[test]
fn q_minus_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let maps: Vec<FeatureMap> = (0..4).map(|_| random_map(&mut rng, &[3, 2, 5])).collect();
        let t = TripletBatch {
            m_real_p: maps[0].clone(),
            m_syn_p: maps[1].clone(),
            m_real_pbar: maps[2].clone(),
            m_syn_pbar: maps[3].clone(),
        };
        let mut best = f64::INFINITY;
        for a in [0, 1] {
            for b in [2, 3] {
                best = best.min(distance_oracle(&maps[a].data, &maps[b].data));
            }
        }
        assert!((q_minus(&t).unwrap().0 - best).abs() < 1e-9);
    }
}

#[test]
fn triplet_examples() {
    // Identical positives and every negative orthogonal: hinge inactive.
    let unit = |k: usize| FeatureMap {
        level: FeatureLevel::Fine,
        data: Tensor::new(&[1, 1, 3], (0..3).map(|i| if i == k { 1.0 } else { 0.0 }).collect()),
    };
    let t = TripletBatch {
        m_real_p: unit(0),
        m_syn_p: unit(0),
        m_real_pbar: unit(1),
        m_syn_pbar: unit(2),
    };
    assert_eq!(triplet_loss_mined(&t, 1.0).unwrap(), 0.0);
    assert_eq!(triplet_loss_original(&t, 1.0).unwrap(), 0.0);

    // Positive distance 0.8, hardest negative 0.3.
    let t = batch_from_gram([
        [1.0, 0.2, 0.7, 0.0],
        [0.2, 1.0, 0.0, 0.0],
        [0.7, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]);
    assert!((triplet_loss_mined(&t, 1.0).unwrap() - 1.5).abs() < 1e-12);
    // The fixed (real, syn̄) negative sits at distance 1.
    assert!((triplet_loss_original(&t, 1.0).unwrap() - 0.8).abs() < 1e-12);
}

#[test]
fn triplet_original_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let m: Vec<FeatureMap> = (0..4).map(|_| random_map(&mut rng, &[2, 3, 4])).collect();
        let t = TripletBatch {
            m_real_p: m[0].clone(),
            m_syn_p: m[1].clone(),
            m_real_pbar: m[2].clone(),
            m_syn_pbar: m[3].clone(),
        };
        let margin = rng.random_range(0.1..2.0);
        let want = (distance_oracle(&m[0].data, &m[1].data) - distance_oracle(&m[0].data, &m[3].data) + margin).max(0.0);
        assert!((triplet_loss_original(&t, margin).unwrap() - want).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn mined_dominates_original(
        v in proptest::collection::vec(-1.0f64..1.0, 4 * 2 * 3),
        margin in 0.01f64..2.0,
    ) {
        let map = |i: usize| FeatureMap {
            level: FeatureLevel::Fine,
            data: Tensor::new(&[2, 1, 3], v[i * 6..(i + 1) * 6].to_vec()),
        };
        let t = TripletBatch { m_real_p: map(0), m_syn_p: map(1), m_real_pbar: map(2), m_syn_pbar: map(3) };
        prop_assert!(triplet_loss_mined(&t, margin).unwrap() >= triplet_loss_original(&t, margin).unwrap());
    }

    #[test]
    fn pose_output_is_valid_for_any_image(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = DfnetModel::new(tiny_config(), seed);
        let img = random_image(&mut rng, 18, 16);
        let p = model.predict_poses(&[&img]).remove(0);
        prop_assert!(p.is_valid(1e-5));
    }
}

#[test]
fn var_losses_match_scalar_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let maps: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn(&[3, 2, 2, 4], |_| rng.random_range(-1.0..1.0))).collect();
    let tape = Tape::new();
    let v: Vec<_> = maps.iter().map(|m| tape.constant(m.clone())).collect();
    let mined = triplet_mined_var(&v[0], &v[1], &v[2], &v[3], 1.0).value();
    let original = triplet_original_var(&v[0], &v[1], &v[3], 1.0).value();
    let sample = |m: &Tensor, i: usize| FeatureMap {
        level: FeatureLevel::Fine,
        data: Tensor::new(&[2, 2, 4], m.data()[i * 16..(i + 1) * 16].to_vec()),
    };
    for i in 0..3 {
        let t = TripletBatch {
            m_real_p: sample(&maps[0], i),
            m_syn_p: sample(&maps[1], i),
            m_real_pbar: sample(&maps[2], i),
            m_syn_pbar: sample(&maps[3], i),
        };
        assert!((mined.data()[i] - triplet_loss_mined(&t, 1.0).unwrap()).abs() < 1e-12);
        assert!((original.data()[i] - triplet_loss_original(&t, 1.0).unwrap()).abs() < 1e-12);
    }
}

fn pose_at(x: f64) -> Pose {
    look_at(&Vector3::new(x, 1.0, 4.0), &Vector3::zeros(), &Vector3::y())
}

#[test]
fn dfnet_loss_examples() {
    let p = pose_at(0.0);
    assert_eq!(dfnet_loss(&p, &p, &p, 0.0, 0.0), 0.0);
    let mut off = p;
    off.translation.y += 2.0;
    assert!((dfnet_loss(&p, &off, &p, 0.0, 0.0) - 1.0).abs() < 1e-12);

    let q = pose_at(0.7);
    let r = pose_at(-0.4);
    let want = 0.3 + 0.2 + 0.5 * (pose_l2(&p, &q) + pose_l2(&p, &r));
    assert!((dfnet_loss(&p, &q, &r, 0.3, 0.2) - want).abs() < 1e-12);
    let direct: f64 = p.to_matrix12().iter().zip(q.to_matrix12()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!((pose_l2(&p, &q) - direct).abs() < 1e-12);
}

/// Mined triplet loss of a four-image batch through the network.
fn network_triplet(model: &DfnetModel, x: &Tensor, trainable: bool) -> (f64, Vec<Option<Tensor>>) {
    let tape = Tape::new();
    let b = if trainable {
        model.params.bind(&tape, is_feature_head_param)
    } else {
        model.params.bind_frozen(&tape)
    };
    let out = model.forward(&b, &tape.constant(x.clone()), &[FeatureLevel::Fine, FeatureLevel::Middle], NormMode::Eval);
    let mut total = None;
    for level in [FeatureLevel::Fine, FeatureLevel::Middle] {
        let f = out.feature(level);
        let s = f.shape();
        let per: usize = s[1..].iter().product();
        let row = |i: usize| f.reshape(&[4, per]).select_rows(&[i]).reshape(&[1, s[1], s[2], s[3]]);
        let l = triplet_mined_var(&row(0), &row(1), &row(2), &row(3), 1.0).sum();
        total = Some(match total {
            None => l,
            Some(t) => l.add(&t),
        });
    }
    let loss = total.unwrap();
    let grads = if trainable { b.grads(&tape.backward(loss)) } else { Vec::new() };
    (loss.value().item(), grads)
}

#[test]
fn triplet_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = DfnetModel::new(tiny_config(), 3);
    let imgs: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 16, 16)).collect();
    let x = model.images_tensor(&imgs.iter().collect::<Vec<_>>());
    let (loss, grads) = network_triplet(&model, &x, true);
    assert!(loss > 0.0);
    let eps = 1e-6;
    let mut checked = 0;
    for (pi, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        for k in (0..g.len()).step_by(3) {
            let mut plus = model.clone();
            plus.params.tensors_mut()[pi].data_mut()[k] += eps;
            let mut minus = model.clone();
            minus.params.tensors_mut()[pi].data_mut()[k] -= eps;
            let numeric = (network_triplet(&plus, &x, false).0 - network_triplet(&minus, &x, false).0) / (2.0 * eps);
            let a = g.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-3, "{} [{k}]: analytic {a} numeric {numeric}", model.params.names()[pi]);
            checked += 1;
        }
    }
    assert!(checked > 20);
}

#[test]
fn forward_is_deterministic_and_shaped() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = DfnetModel::new(tiny_config(), 1);
    let img = random_image(&mut rng, 24, 16);
    assert_eq!(model.input_size(24, 16), (24, 16));
    assert_eq!(model.input_size(12, 8), (24, 16));
    let a = model.extract_features(&img, &FeatureLevel::ALL);
    let b = model.extract_features(&img, &FeatureLevel::ALL);
    assert_eq!(a, b);
    for (m, level) in a.iter().zip(FeatureLevel::ALL) {
        assert_eq!(m.level, level);
        assert_eq!(m.data.shape(), &[16, 24, 4]);
    }
    assert_eq!(model.predict_poses(&[&img]), model.predict_poses(&[&img]));
}

#[test]
fn default_architecture_feature_shapes() {
    let model = DfnetModel::new(DfnetConfig::default(), 0);
    let img = Image::filled(320, 240, [0.3, 0.5, 0.7]);
    assert_eq!(model.input_size(320, 240), (320, 240));
    let maps = model.extract_features(&img, &FeatureLevel::ALL);
    assert_eq!(maps.len(), 3);
    for m in &maps {
        assert_eq!(m.data.shape(), &[240, 320, 128]);
    }
}

#[test]
fn untrained_model_predicts_the_pose_bias() {
    let mut model = DfnetModel::new(tiny_config(), 2);
    let p = pose_at(0.3);
    model.set_pose_bias(&p);
    let img = Image::filled(16, 16, [0.5; 3]);
    let e = crate::geometry::pose_error(&model.predict_poses(&[&img])[0], &p);
    // The final layer starts at a small scale, so only a small deviation.
    assert!(e.translation_error < 0.5 && e.rotation_error < 10.0, "{e:?}");
}

#[test]
fn mean_pose_of_identical_poses() {
    let p = pose_at(1.0);
    let m = mean_pose(&[p, p, p]);
    assert!((m.rotation - p.rotation).abs().max() < 1e-12);
    assert!((m.translation - p.translation).norm() < 1e-12);
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = DfnetModel::new(tiny_config(), 4);
    model.update_running_stats(&[(FeatureLevel::Fine, vec![0.5; 4], vec![2.0; 4])]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dfnet.ckpt");
    model.save(&path).unwrap();
    let back = DfnetModel::load(&path, Some(&tiny_config())).unwrap();
    assert_eq!(back.params.hash_where(|_| true), model.params.hash_where(|_| true));
    assert_eq!(back.buffers.hash_where(|_| true), model.buffers.hash_where(|_| true));
    let img = random_image(&mut rng, 16, 16);
    assert_eq!(back.extract_features(&img, &[FeatureLevel::Fine]), model.extract_features(&img, &[FeatureLevel::Fine]));

    let other = DfnetConfig {
        feature_channels: 5,
        ..tiny_config()
    };
    assert!(matches!(
        DfnetModel::load(&path, Some(&other)),
        Err(Error::CheckpointConfigMismatch { .. })
    ));
    assert!(matches!(
        HistNerfModel::load(&path, None),
        Err(Error::Checkpoint { .. })
    ));
}

#[test]
fn alignment_and_level_names_round_trip() {
    for a in [Alignment::MinedTriplet, Alignment::OriginalTriplet, Alignment::SquaredError] {
        assert_eq!(a.to_string().parse::<Alignment>().unwrap(), a);
    }
    for l in FeatureLevel::ALL {
        assert_eq!(l.to_string().parse::<FeatureLevel>().unwrap(), l);
    }
    assert!("hardest".parse::<Alignment>().is_err());
}

#[test]
fn feature_spread_is_zero_for_identical_images() {
    let model = DfnetModel::new(tiny_config(), 5);
    let img = Image::filled(16, 16, [0.2, 0.4, 0.6]);
    assert_eq!(feature_spread(&model, &[&img, &img], FeatureLevel::Fine), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let other = random_image(&mut rng, 16, 16);
    assert!(feature_spread(&model, &[&img, &other], FeatureLevel::Fine) > 0.0);
}

fn tiny_fixture() -> (crate::data::SceneDataset, HistNerfModel, RenderSettings) {
    let (_, ds) = make_toy_scene(&ToyOptions {
        n_train: 6,
        n_val: 2,
        width: 8,
        height: 8,
        n_blobs: 2,
        n_quad: 256,
        ..ToyOptions::default()
    });
    let nerf = HistNerfModel::new(
        NerfConfig {
            static_dim: 4,
            transient_dim: 2,
            width: 8,
            base_depth: 1,
            static_depth: 2,
            transient_depth: 1,
            encoding: EncodingConfig {
                n_freqs_position: 2,
                n_freqs_direction: 1,
                include_input: true,
            },
            ..NerfConfig::default()
        },
        0,
    );
    let settings = RenderSettings {
        n_coarse: 4,
        n_fine: 4,
        short_side: 8,
        ..RenderSettings::new(ds.near, ds.far)
    };
    (ds, nerf, settings)
}

fn tiny_schedule() -> DfnetSchedule {
    DfnetSchedule {
        epochs: 2,
        batch_size: 3,
        lr: 1e-3,
        rvs: Some(crate::rvs::RvsConfig {
            render_short_side: 8,
            ..Default::default()
        }),
        ..DfnetSchedule::default()
    }
}

#[test]
fn frozen_feature_heads_are_untouched_by_training() {
    let (ds, nerf, settings) = tiny_fixture();
    let model = DfnetModel::new(tiny_config(), 6);
    let heads = model.params.hash_where(is_feature_head_param);
    let buffers = model.buffers.hash_where(|_| true);
    let sched = DfnetSchedule {
        freeze_feature_heads: true,
        ..tiny_schedule()
    };
    let mut trained = model.clone();
    let log = train_dfnet(&ds, &nerf, &settings, &mut trained, &sched).unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(trained.params.hash_where(is_feature_head_param), heads);
    assert_eq!(trained.buffers.hash_where(|_| true), buffers);
}

#[test]
fn training_is_deterministic_and_logs_every_epoch() {
    let (ds, nerf, settings) = tiny_fixture();
    let run = || {
        let mut model = DfnetModel::new(tiny_config(), 7);
        model.set_pose_bias(&mean_pose(&ds.train_poses()));
        let log = train_dfnet(&ds, &nerf, &settings, &mut model, &tiny_schedule()).unwrap();
        (log, model.params.hash_where(|_| true))
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_eq!(a.len(), 2);
    for e in &a {
        assert!(e.loss.is_finite() && e.rvs_loss > 0.0);
        assert!(e.min_mined_gap >= 0.0);
    }
}

#[test]
fn schedule_validation() {
    let bad = DfnetSchedule {
        batch_size: 1,
        ..DfnetSchedule::default()
    };
    assert!(matches!(bad.validate(), Err(Error::InvalidConfigValue { .. })));
    let bad = DfnetSchedule {
        levels: vec![],
        ..DfnetSchedule::default()
    };
    assert!(bad.validate().is_err());
    assert!(DfnetSchedule::default().validate().is_ok());
}
