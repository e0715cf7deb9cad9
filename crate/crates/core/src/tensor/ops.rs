//! Eager (non-differentiable) versions of the basic layer operations.
//!
//! These mirror the corresponding [`Graph`](super::Graph) methods and are
//! handy for inference-only code and for writing oracles.

use super::kernels::{self, ConvGeom, Padding, PoolGeom, PoolMode};
use super::Tensor;
use crate::error::{shape_err, Result};

/// Lift `[H,W,C]` to `[1,H,W,C]`; pass 4-D tensors through.
fn as_batch(x: &Tensor) -> Result<(Vec<usize>, bool)> {
    match x.rank() {
        3 => Ok((vec![1, x.shape()[0], x.shape()[1], x.shape()[2]], true)),
        4 => Ok((x.shape().to_vec(), false)),
        r => Err(shape_err!("expected [H,W,C] or [N,H,W,C], got rank {r}")),
    }
}

/// 2-D convolution of `[H,W,C]` or `[N,H,W,C]` input with `[k,k,C,F]` kernels.
///
/// ```
/// use admri::tensor::{ops, Padding, Tensor};
/// let x = Tensor::new([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
/// let k = Tensor::new([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
/// let y = ops::conv2d(&x, &k, 1, Padding::Valid).unwrap();
/// assert_eq!(y.shape(), &[1, 1, 1]);
/// assert_eq!(y.data(), &[5.0]);
/// ```
pub fn conv2d(x: &Tensor, kernels: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let (shape, squeeze) = as_batch(x)?;
    let geom = ConvGeom::new(&shape, kernels.shape(), stride, padding)?;
    let out = kernels::conv2d_forward(x.data(), kernels.data(), &geom);
    let [n, oh, ow, f] = geom.out_shape();
    if squeeze {
        Tensor::new([oh, ow, f], out)
    } else {
        Tensor::new([n, oh, ow, f], out)
    }
}

/// Non-overlapping `p x p` pooling of `[H,W,C]` or `[N,H,W,C]`.
pub fn pool2d(x: &Tensor, p: usize, mode: PoolMode) -> Result<Tensor> {
    let (shape, squeeze) = as_batch(x)?;
    let geom = PoolGeom::new(&shape, p)?;
    let (out, _) = kernels::pool2d_forward(x.data(), &geom, mode);
    if squeeze {
        Tensor::new([geom.oh, geom.ow, geom.c], out)
    } else {
        Tensor::new([geom.n, geom.oh, geom.ow, geom.c], out)
    }
}

/// `y = W a + b` for `W: [out, in]`, `a: [in]` (or a batch `[N, in]`, one
/// sample per row) and `b: [out]`.
///
/// ```
/// use admri::tensor::{ops, Tensor};
/// let a = Tensor::vector(vec![1.0, 2.0]);
/// let w = Tensor::matrix(&[&[1.0, 1.0], &[1.0, -1.0]]).unwrap();
/// let b = Tensor::vector(vec![0.0, 0.0]);
/// assert_eq!(ops::matmul_affine(&a, &w, &b).unwrap().data(), &[3.0, -1.0]);
/// ```
pub fn matmul_affine(a: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 {
        return Err(shape_err!("weight must be [out, in], got {:?}", w.shape()));
    }
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let (rows, batched) = match a.shape() {
        [n] if *n == in_dim => (1, false),
        [m, n] if *n == in_dim => (*m, true),
        s => return Err(shape_err!("input {s:?} does not match weight {:?}", w.shape())),
    };
    if b.shape() != [out_dim] {
        return Err(shape_err!("bias {:?} does not match {out_dim} outputs", b.shape()));
    }
    // a [rows, in] x W^T [in, out]
    let mut wt = vec![0.0; in_dim * out_dim];
    for o in 0..out_dim {
        for i in 0..in_dim {
            wt[i * out_dim + o] = w.data()[o * in_dim + i];
        }
    }
    let mut y = kernels::matmul(a.data(), &wt, rows, in_dim, out_dim);
    for row in y.chunks_mut(out_dim) {
        for (v, bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    if batched {
        Tensor::new([rows, out_dim], y)
    } else {
        Tensor::new([out_dim], y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_kernel_scales() {
        let x = Tensor::ones([3, 3, 1]);
        let k = Tensor::full([1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[3, 3, 1]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn valid_output_size() {
        let x = Tensor::zeros([28, 28, 1]);
        let k = Tensor::zeros([3, 3, 1, 4]);
        assert_eq!(conv2d(&x, &k, 1, Padding::Valid).unwrap().shape(), &[26, 26, 4]);
    }

    #[test]
    fn kernel_too_large_or_channel_mismatch() {
        let x = Tensor::zeros([2, 2, 1]);
        assert!(conv2d(&x, &Tensor::zeros([3, 3, 1, 1]), 1, Padding::Valid).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 1, 2, 1]), 1, Padding::Valid).is_err());
    }

    #[test]
    fn pooling_examples() {
        let x = Tensor::new([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool2d(&x, 2, PoolMode::Max).unwrap().data(), &[4.0]);
        assert_eq!(pool2d(&x, 2, PoolMode::Avg).unwrap().data(), &[2.5]);
        let c = Tensor::full([4, 6, 2], 1.5);
        for mode in [PoolMode::Max, PoolMode::Avg] {
            assert!(pool2d(&c, 2, mode).unwrap().data().iter().all(|&v| v == 1.5));
        }
        assert_eq!(
            pool2d(&Tensor::zeros([5, 5, 1]), 2, PoolMode::Max).unwrap().shape(),
            &[2, 2, 1]
        );
        assert!(pool2d(&x, 3, PoolMode::Max).is_err());
    }

    #[test]
    fn affine_identity_and_bias_passthrough() {
        let a = Tensor::vector(vec![0.5, -2.0, 3.0]);
        let mut eye = Tensor::zeros([3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let zero_b = Tensor::zeros([3]);
        assert_eq!(matmul_affine(&a, &eye, &zero_b).unwrap().data(), a.data());
        let b = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert_eq!(matmul_affine(&a, &Tensor::zeros([3, 3]), &b).unwrap().data(), b.data());
        assert!(matmul_affine(&a, &Tensor::zeros([3, 2]), &b).is_err());
    }
}
