use nalgebra::Matrix3;

use crate::autodiff::{Tensor, Var};

/// `M = U' diag(s') V^T` with `U' V^T` a proper rotation: when `U V^T` is a
/// reflection, the column of the smallest singular value is negated in `U`
/// and in `s`.
struct SignedSvd {
    u: Matrix3<f64>,
    v: Matrix3<f64>,
    s: [f64; 3],
}

fn signed_svd(m: &Matrix3<f64>) -> SignedSvd {
    let svd = m.svd(true, true);
    let mut u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let mut s = [svd.singular_values[0], svd.singular_values[1], svd.singular_values[2]];
    if (u * v.transpose()).determinant() < 0.0 {
        let imin = (0..3).min_by(|&a, &b| s[a].total_cmp(&s[b])).expect("three values");
        for r in 0..3 {
            u[(r, imin)] = -u[(r, imin)];
        }
        s[imin] = -s[imin];
    }
    SignedSvd { u, v, s }
}

fn rotation_block(row12: &[f64]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| row12[r * 4 + c])
}

impl<'t> Var<'t> {
    /// Projects the rotation block of each row of `[n, 12]` row-major
    /// `3 x 4` poses onto the nearest proper rotation; translations pass
    /// through.
    pub fn orthonormalize_pose12(&self) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.cols(), 12, "expected [n, 12] poses");
        let n = x.rows();
        let mut out = x.data().to_vec();
        let mut factors = Vec::with_capacity(n);
        for i in 0..n {
            let f = signed_svd(&rotation_block(x.row(i)));
            let r = f.u * f.v.transpose();
            for a in 0..3 {
                for b in 0..3 {
                    out[i * 12 + a * 4 + b] = r[(a, b)];
                }
            }
            factors.push(f);
        }
        self.op(
            Tensor::new(&[n, 12], out),
            &[*self],
            Box::new(move |g, _, _| {
                let mut gx = g.data().to_vec();
                for (i, f) in factors.iter().enumerate() {
                    // dR = U' Omega V^T with Omega_ab = (X_ab - X_ba) / (s_a + s_b)
                    // and X = U'^T dM V, so dL/dM = U' K V^T with
                    // K_ab = (B_ab - B_ba) / (s_a + s_b), B = U'^T G V.
                    let gr = rotation_block(&g.data()[i * 12..(i + 1) * 12]);
                    let b = f.u.transpose() * gr * f.v;
                    let k = Matrix3::from_fn(|p, q| {
                        if p == q {
                            return 0.0;
                        }
                        let denom = f.s[p] + f.s[q];
                        let denom = if denom.abs() < 1e-12 { 1e-12f64.copysign(denom) } else { denom };
                        (b[(p, q)] - b[(q, p)]) / denom
                    });
                    let gm = f.u * k * f.v.transpose();
                    for p in 0..3 {
                        for q in 0..3 {
                            gx[i * 12 + p * 4 + q] = gm[(p, q)];
                        }
                    }
                }
                vec![Some(Tensor::new(&[n, 12], gx))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check;
    use crate::autodiff::Tape;
    use crate::geometry::{svd_orthonormalize, Pose};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_geometry_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[6, 12], |_| rng.random_range(-1.0..1.0));
        let tape = Tape::new();
        let y = tape.constant(x.clone()).orthonormalize_pose12().value();
        for i in 0..6 {
            let want = svd_orthonormalize(&rotation_block(x.row(i))).unwrap();
            let got = rotation_block(y.row(i));
            assert!((got - want).abs().max() < 1e-10);
            for r in 0..3 {
                assert_eq!(y.row(i)[r * 4 + 3], x.row(i)[r * 4 + 3]);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Both orientations: proper rotations near identity and reflections.
        let mut x = Tensor::from_fn(&[4, 12], |_| rng.random_range(-0.3..0.3));
        for i in 0..4 {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            for d in 0..3 {
                x.data_mut()[i * 12 + d * 4 + d] += if d == 2 { sign } else { 1.0 };
            }
        }
        let probe = Tensor::from_fn(&[4, 12], |_| rng.random_range(-1.0..1.0));
        let err = check(&[x], 1e-6, 1e-6, |v| {
            let p = v[0].tape().constant(probe.clone());
            v[0].orthonormalize_pose12().mul(&p).sum()
        });
        assert!(err < 1e-5, "{err}");
    }

    proptest! {
        #[test]
        fn output_is_always_a_valid_pose(v in proptest::collection::vec(-5.0f64..5.0, 12)) {
            let tape = Tape::new();
            let y = tape.constant(Tensor::new(&[1, 12], v)).orthonormalize_pose12().value();
            let pose = Pose::from_matrix12_unchecked(y.row(0));
            prop_assert!(pose.is_valid(1e-6));
        }
    }
}
