//! Dense tensors, reverse-mode differentiation and the AdamW optimizer.

mod graph;
mod optim;
mod tensor;

pub use graph::{Gradients, Graph, Mask, Var};
pub use optim::{AdamW, AdamWConfig, GradMap};
pub use tensor::{Float, Tensor};

pub(crate) use graph::{log_sum_exp, softmax_slice};

use crate::error::{Error, Result};

pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(va, vb)?;
    Ok(g.value(out).clone())
}

/// Softmax along `axis`.
pub fn softmax<T: Float>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = t.shape();
    let n = *shape
        .get(axis)
        .ok_or_else(|| Error::shape(format!("softmax: axis {axis} out of range for {shape:?}")))?;
    if n == 0 {
        return Err(Error::shape("softmax: empty axis"));
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = t.clone();
    let mut buf_in = vec![T::zero(); n];
    let mut buf_out = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            for k in 0..n {
                buf_in[k] = t.data()[idx(k)];
            }
            softmax_slice(&buf_in, &mut buf_out);
            for k in 0..n {
                out.data_mut()[idx(k)] = buf_out[k];
            }
        }
    }
    Ok(out)
}

pub fn rmsnorm<T: Float>(x: &Tensor<T>, weight: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if eps <= T::zero() {
        return Err(Error::Config("rmsnorm eps must be positive".into()));
    }
    let mut g = Graph::new();
    let (vx, vw) = (g.constant(x.clone()), g.constant(weight.clone()));
    let out = g.rmsnorm(vx, vw, eps)?;
    Ok(g.value(out).clone())
}

/// Row-wise log-softmax over the trailing axis.
pub fn log_softmax_rows<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = t.clone();
    let c = t.cols();
    for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
        let lse = log_sum_exp(t.row(r));
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    out
}
