use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Pose;

use super::model::FeatureLevel;

/// Dense features `[H, W, C]` of one image at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub level: FeatureLevel,
    pub data: Tensor,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        *self.data.shape().last().expect("rank 3")
    }
}

/// How per-location dissimilarities are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::InvalidArgument(format!("unknown reduction `{other}`"))),
        }
    }
}

/// `1 - cos(a, b)` for one location; a zero vector has cosine 0.
fn location_dissimilarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        1.0
    } else {
        1.0 - ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Reduced `1 - cos` between the channel vectors of two equally shaped
/// maps; the trailing axis holds channels.
pub fn cosine_dissimilarity(a: &Tensor, b: &Tensor, reduction: Reduction) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let c = a.cols();
    let total: f64 = a
        .data()
        .chunks_exact(c)
        .zip(b.data().chunks_exact(c))
        .map(|(x, y)| location_dissimilarity(x, y))
        .sum();
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / (a.len() / c) as f64,
    })
}

/// Mean per-location `1 - cos`, in `[0, 2]`.
pub fn feature_distance(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    cosine_dissimilarity(&a.data, &b.data, Reduction::Mean)
}

impl<'t> Var<'t> {
    /// Per-sample reduced `1 - cos` between `[n, ..., C]` maps; returns `[n]`.
    pub fn cosine_dissimilarity(&self, other: &Var<'t>, reduction: Reduction) -> Var<'t> {
        let (av, bv) = (self.value(), other.value());
        assert_eq!(av.shape(), bv.shape(), "feature maps differ in shape");
        let n = av.shape()[0];
        let c = av.cols();
        let locs = av.len() / c / n;
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / locs as f64,
        };
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            let span = i * locs * c..(i + 1) * locs * c;
            let total: f64 = av.data()[span.clone()]
                .chunks_exact(c)
                .zip(bv.data()[span].chunks_exact(c))
                .map(|(x, y)| location_dissimilarity(x, y))
                .sum();
            *o = total * scale;
        }
        self.op(
            Tensor::new(&[n], out),
            &[*self, *other],
            Box::new(move |g, p, _| {
                let (ad, bd) = (p[0].data(), p[1].data());
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; bd.len()];
                for l in 0..n * locs {
                    let s = -g.data()[l / locs] * scale;
                    let r = l * c..(l + 1) * c;
                    let (x, y) = (&ad[r.clone()], &bd[r.clone()]);
                    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                    for (u, v) in x.iter().zip(y) {
                        ab += u * v;
                        aa += u * u;
                        bb += v * v;
                    }
                    if aa == 0.0 || bb == 0.0 {
                        continue;
                    }
                    let (na, nb) = (aa.sqrt(), bb.sqrt());
                    let cos = ab / (na * nb);
                    for j in 0..c {
                        ga[r.start + j] = s * (y[j] / (na * nb) - cos * x[j] / aa);
                        gb[r.start + j] = s * (x[j] / (na * nb) - cos * y[j] / bb);
                    }
                }
                vec![Some(Tensor::new(p[0].shape(), ga)), Some(Tensor::new(p[1].shape(), gb))]
            }),
        )
    }
}

/// Real and synthetic features at a pose `P` and at a different pose `P̄`.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub m_real_p: FeatureMap,
    pub m_syn_p: FeatureMap,
    pub m_real_pbar: FeatureMap,
    pub m_syn_pbar: FeatureMap,
}

/// Distances of the four cross-pose pairs, in the order
/// (real, real̄), (real, syn̄), (syn, real̄), (syn, syn̄).
pub fn negative_distances(t: &TripletBatch) -> Result<[f64; 4]> {
    Ok([
        feature_distance(&t.m_real_p, &t.m_real_pbar)?,
        feature_distance(&t.m_real_p, &t.m_syn_pbar)?,
        feature_distance(&t.m_syn_p, &t.m_real_pbar)?,
        feature_distance(&t.m_syn_p, &t.m_syn_pbar)?,
    ])
}

/// Index of the smallest entry; ties go to the first.
pub fn argmin4(d: &[f64; 4]) -> usize {
    let mut best = 0;
    for i in 1..4 {
        if d[i] < d[best] {
            best = i;
        }
    }
    best
}

/// Hardest negative distance and the index of the pair that attains it.
pub fn q_minus(t: &TripletBatch) -> Result<(f64, usize)> {
    let d = negative_distances(t)?;
    let i = argmin4(&d);
    Ok((d[i], i))
}

pub fn triplet_loss_mined(t: &TripletBatch, margin: f64) -> Result<f64> {
    assert!(margin > 0.0, "margin must be positive");
    let pos = feature_distance(&t.m_real_p, &t.m_syn_p)?;
    Ok((pos - q_minus(t)?.0 + margin).max(0.0))
}

pub fn triplet_loss_original(t: &TripletBatch, margin: f64) -> Result<f64> {
    assert!(margin > 0.0, "margin must be positive");
    let pos = feature_distance(&t.m_real_p, &t.m_syn_p)?;
    let neg = feature_distance(&t.m_real_p, &t.m_syn_pbar)?;
    Ok((pos - neg + margin).max(0.0))
}

/// Euclidean distance between flattened `3 x 4` matrices.
pub fn pose_l2(a: &Pose, b: &Pose) -> f64 {
    a.to_matrix12()
        .iter()
        .zip(b.to_matrix12())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `triplet + rvs + (|P - P̂_real| + |P - P̂_syn|) / 2`.
pub fn dfnet_loss(pose_gt: &Pose, pose_real_pred: &Pose, pose_syn_pred: &Pose, triplet: f64, rvs_term: f64) -> f64 {
    triplet + rvs_term + 0.5 * (pose_l2(pose_gt, pose_real_pred) + pose_l2(pose_gt, pose_syn_pred))
}

/// Per-sample pose distances `[n]` between `[n, 12]` rows.
pub fn pose_l2_var<'t>(pred: &Var<'t>, target: &Var<'t>) -> Var<'t> {
    pred.sub(target).norm_last()
}

/// Per-sample mined triplet hinge `[n]` over `[n, H, W, C]` maps. The hardest
/// negative is chosen from current values, then differentiated through.
pub fn triplet_mined_var<'t>(real_p: &Var<'t>, syn_p: &Var<'t>, real_pbar: &Var<'t>, syn_pbar: &Var<'t>, margin: f64) -> Var<'t> {
    let n = real_p.shape()[0];
    let negs = [
        real_p.cosine_dissimilarity(real_pbar, Reduction::Mean),
        real_p.cosine_dissimilarity(syn_pbar, Reduction::Mean),
        syn_p.cosine_dissimilarity(real_pbar, Reduction::Mean),
        syn_p.cosine_dissimilarity(syn_pbar, Reduction::Mean),
    ];
    let vals: Vec<Tensor> = negs.iter().map(|v| v.value().as_ref().clone()).collect();
    let mut mask = vec![0.0; n * 4];
    for i in 0..n {
        let d = [vals[0].data()[i], vals[1].data()[i], vals[2].data()[i], vals[3].data()[i]];
        mask[i * 4 + argmin4(&d)] = 1.0;
    }
    let tape = real_p.tape();
    let stacked = Var::concat_last(&negs.map(|v| v.reshape(&[n, 1])));
    let hardest = stacked.mul(&tape.constant(Tensor::new(&[n, 4], mask))).sum_last();
    let pos = real_p.cosine_dissimilarity(syn_p, Reduction::Mean);
    pos.sub(&hardest.reshape(&[n])).add_scalar(margin).relu()
}

/// Per-sample original triplet hinge `[n]`: the negative is fixed to
/// (real, syn̄).
pub fn triplet_original_var<'t>(real_p: &Var<'t>, syn_p: &Var<'t>, syn_pbar: &Var<'t>, margin: f64) -> Var<'t> {
    let pos = real_p.cosine_dissimilarity(syn_p, Reduction::Mean);
    let neg = real_p.cosine_dissimilarity(syn_pbar, Reduction::Mean);
    pos.sub(&neg).add_scalar(margin).relu()
}

/// Per-sample mean squared difference `[n]` between real and synthetic maps
/// at the same pose; no negatives, so features are free to collapse.
pub fn squared_alignment_var<'t>(real_p: &Var<'t>, syn_p: &Var<'t>) -> Var<'t> {
    let s = real_p.shape();
    let n = s[0];
    let per = real_p.len_per_sample();
    real_p.sub(syn_p).square().reshape(&[n, per]).sum_last().mul_scalar(1.0 / per as f64)
}

impl<'t> Var<'t> {
    fn len_per_sample(&self) -> usize {
        let s = self.shape();
        s[1..].iter().product()
    }
}
