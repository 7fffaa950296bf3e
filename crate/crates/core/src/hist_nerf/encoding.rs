use crate::autodiff::{Tensor, Var};

/// Frequency counts for the sinusoidal encodings of positions and view
/// directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodingConfig {
    pub n_freqs_position: usize,
    pub n_freqs_direction: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            n_freqs_position: 10,
            n_freqs_direction: 4,
            include_input: true,
        }
    }
}

/// Width of the encoding of a `k`-vector.
pub fn encoded_len(k: usize, n_freqs: usize, include_input: bool) -> usize {
    k * (include_input as usize + 2 * n_freqs)
}

/// `[x, sin(2^0 x), cos(2^0 x), ..., sin(2^(L-1) x), cos(2^(L-1) x)]`, each
/// block elementwise over `x`.
pub fn positional_encode(x: &[f64], n_freqs: usize, include_input: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_len(x.len(), n_freqs, include_input));
    encode_into(x, n_freqs, include_input, &mut out);
    out
}

fn encode_into(x: &[f64], n_freqs: usize, include_input: bool, out: &mut Vec<f64>) {
    if include_input {
        out.extend_from_slice(x);
    }
    let mut f = 1.0;
    for _ in 0..n_freqs {
        out.extend(x.iter().map(|v| (f * v).sin()));
        out.extend(x.iter().map(|v| (f * v).cos()));
        f *= 2.0;
    }
}

impl<'t> Var<'t> {
    /// Row-wise [`positional_encode`]: `[n, k] -> [n, k (include + 2L)]`.
    pub fn positional_encode(&self, n_freqs: usize, include_input: bool) -> Var<'t> {
        let v = self.value();
        let (rows, k) = (v.rows(), v.cols());
        let width = encoded_len(k, n_freqs, include_input);
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            encode_into(v.row(r), n_freqs, include_input, &mut data);
        }
        self.op(
            Tensor::new(&[rows, width], data),
            &[*self],
            Box::new(move |g, _, out| {
                let mut gx = vec![0.0; rows * k];
                let (gd, od) = (g.data(), out.data());
                for r in 0..rows {
                    let base = r * width;
                    let gr = &mut gx[r * k..(r + 1) * k];
                    let mut off = 0;
                    if include_input {
                        for j in 0..k {
                            gr[j] += gd[base + j];
                        }
                        off = k;
                    }
                    let mut f = 1.0;
                    for _ in 0..n_freqs {
                        for j in 0..k {
                            let (s, c) = (od[base + off + j], od[base + off + k + j]);
                            gr[j] += f * (gd[base + off + j] * c - gd[base + off + k + j] * s);
                        }
                        off += 2 * k;
                        f *= 2.0;
                    }
                }
                vec![Some(Tensor::new(&[rows, k], gx))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn zero_input() {
        assert_eq!(positional_encode(&[0.0], 2, true), vec![0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn quarter_turn() {
        let e = positional_encode(&[FRAC_PI_2], 1, false);
        assert!((e[0] - 1.0).abs() < 1e-15 && e[1].abs() < 1e-15);
    }

    #[test]
    fn matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            let got = positional_encode(&x, 6, true);
            let mut want = x.clone();
            for i in 0..6 {
                let f = 2f64.powi(i);
                for v in &x {
                    want.push((f * v).sin());
                }
                for v in &x {
                    want.push((f * v).cos());
                }
            }
            assert_eq!(got.len(), encoded_len(3, 6, true));
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_op_matches_rows_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0));
        let tape = Tape::new();
        let e = tape.constant(x.clone()).positional_encode(3, true).value();
        for r in 0..4 {
            assert_eq!(e.row(r), &positional_encode(x.row(r), 3, true)[..]);
        }
        let probe = Tensor::from_fn(&[4, 21], |_| rng.random_range(-1.0..1.0));
        let err = check(&[x], 1e-6, 1e-6, |v| {
            let p = v[0].tape().constant(probe.clone());
            v[0].positional_encode(3, true).mul(&p).sum()
        });
        assert!(err < 1e-6, "{err}");
    }
}
