//! Minimal f32 neural-network layers with explicit backward passes.
//!
//! Everything operates on single-sample `[C, H, W]` arrays; the training loop
//! iterates over the batch. Layers cache whatever their backward pass needs
//! and accumulate parameter gradients in place, so one optimizer step can
//! consume gradients from several forward/backward pairs (batch members and
//! network branches alike). All arithmetic is sequential and in a fixed
//! order, which keeps runs bit-reproducible for a given seed.

mod conv;
mod norm;
mod optim;
mod resize;

pub use conv::{Conv2d, ConvCtx};
pub use norm::{fs_backward, fs_forward, l2norm_backward, l2norm_forward, FsCtx, L2NormCtx};
pub use optim::{AdamConfig, Optimizer, OptimizerKind, SgdConfig};
pub use resize::{bilinear_resize, bilinear_resize_backward};

use ndarray::Array3;

/// Rectifier; returns the activation (which doubles as the backward mask).
pub fn relu(x: &Array3<f32>) -> Array3<f32> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through [`relu`]: passes where the activation was positive.
pub fn relu_backward(y: &Array3<f32>, dy: &Array3<f32>) -> Array3<f32> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Stack two feature maps along the channel axis.
pub fn concat_channels(a: &Array3<f32>, b: &Array3<f32>) -> Array3<f32> {
    let (ca, h, w) = a.dim();
    let (cb, hb, wb) = b.dim();
    assert_eq!((h, w), (hb, wb), "concat inputs must share spatial dims");
    let mut out = Array3::<f32>::zeros((ca + cb, h, w));
    out.slice_mut(ndarray::s![..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![ca.., .., ..]).assign(b);
    out
}

/// Split a gradient back into the two channel blocks joined by
/// [`concat_channels`].
pub fn split_channels(d: &Array3<f32>, ca: usize) -> (Array3<f32>, Array3<f32>) {
    (
        d.slice(ndarray::s![..ca, .., ..]).to_owned(),
        d.slice(ndarray::s![ca.., .., ..]).to_owned(),
    )
}
