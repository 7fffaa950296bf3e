//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every training loop in this crate records its forward pass on a [`Tape`],
//! calls [`Tape::backward`] and hands the leaf gradients to [`Adam`]. Ops are
//! coarse-grained (a whole affine layer, a whole convolution, a whole ray
//! composite) so that the interpreter overhead stays small next to the GEMMs.

mod nn;
mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use nn::resize_bilinear;
pub use optim::Adam;
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;


#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Central-difference check of `d f / d inputs` against the tape.
    ///
    /// Returns the worst relative error `|a - n| / max(|a|, |n|, floor)`.
    pub fn check(
        inputs: &[Tensor],
        eps: f64,
        floor: f64,
        f: impl for<'a, 'b> Fn(&'b [Var<'a>]) -> Var<'a>,
    ) -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&vars);
        let grads = tape.backward(out);
        let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
        let eval = |xs: &[Tensor]| -> f64 {
            let tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
            f(&vars).value().item()
        };
        let mut worst: f64 = 0.0;
        for (i, t) in inputs.iter().enumerate() {
            for k in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[k] += eps;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[k] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic[i].data()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                worst = worst.max(rel);
            }
        }
        worst
    }
}
