//! Differentiable normalization layers: per-pixel L2 normalization (the
//! projector output) and the in-network stylization layer that re-normalizes
//! a feature map to target channel statistics, with gradients flowing
//! through the map's own statistics. The target statistics are constants.

use ndarray::Array3;

use crate::featstats::{channel_stats_view, stylize_view, ChannelStats};

/// Cache for [`l2norm_backward`]: the normalized output and each pixel's
/// pre-clamp norm.
pub struct L2NormCtx {
    y: Array3<f32>,
    norms: Vec<f32>,
    eps: f32,
}

impl L2NormCtx {
    pub fn output(&self) -> &Array3<f32> {
        &self.y
    }
}

/// Divide each pixel's channel vector by `max(‖x‖₂, eps)`.
pub fn l2norm_forward(x: &Array3<f32>, eps: f32) -> L2NormCtx {
    let (c, h, w) = x.dim();
    let mut y = x.clone();
    let mut norms = vec![0.0f32; h * w];
    for row in 0..h {
        for col in 0..w {
            let mut sq = 0.0f64;
            for ch in 0..c {
                let v = x[[ch, row, col]] as f64;
                sq += v * v;
            }
            let n = sq.sqrt() as f32;
            norms[row * w + col] = n;
            let denom = n.max(eps);
            for ch in 0..c {
                y[[ch, row, col]] /= denom;
            }
        }
    }
    L2NormCtx { y, norms, eps }
}

/// Gradient of [`l2norm_forward`]. Where the norm exceeded `eps`:
/// `dx = (dy − y·(y⋅dy)) / ‖x‖`; where it was clamped the map was a plain
/// division, so `dx = dy / eps`.
pub fn l2norm_backward(ctx: &L2NormCtx, dy: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = ctx.y.dim();
    let mut dx = Array3::<f32>::zeros((c, h, w));
    for row in 0..h {
        for col in 0..w {
            let n = ctx.norms[row * w + col];
            if n > ctx.eps {
                let mut ydy = 0.0f64;
                for ch in 0..c {
                    ydy += ctx.y[[ch, row, col]] as f64 * dy[[ch, row, col]] as f64;
                }
                for ch in 0..c {
                    let g = dy[[ch, row, col]] as f64 - ctx.y[[ch, row, col]] as f64 * ydy;
                    dx[[ch, row, col]] = (g / n as f64) as f32;
                }
            } else {
                for ch in 0..c {
                    dx[[ch, row, col]] = dy[[ch, row, col]] / ctx.eps;
                }
            }
        }
    }
    dx
}

/// Cache for [`fs_backward`]: per-channel standardized input, the clamped
/// denominators, and the constant target deviation.
pub struct FsCtx {
    /// `(x − μ) / max(σ, eps)` per channel.
    xhat: Array3<f32>,
    /// `max(σ, eps)` per channel.
    denom: Vec<f32>,
    /// Whether σ exceeded eps (full statistics gradient) per channel.
    live: Vec<bool>,
    /// Target standard deviation per channel (a constant of the pass).
    target_std: Vec<f32>,
}

/// In-network stylization: re-normalize `x` so its per-channel statistics
/// become `target`'s. Returns the stylized map and the backward cache. The
/// target statistics carry no gradient.
pub fn fs_forward(x: &Array3<f32>, target: &ChannelStats, eps: f32) -> (Array3<f32>, FsCtx) {
    let (c, h, w) = x.dim();
    assert_eq!(c, target.channels(), "stylization channel mismatch");
    let stats = channel_stats_view(x.view());
    let y = stylize_view(x.view(), &stats, target, eps);
    let mut xhat = Array3::<f32>::zeros((c, h, w));
    let mut denom = Vec::with_capacity(c);
    let mut live = Vec::with_capacity(c);
    for ch in 0..c {
        let mu = stats.mean()[ch];
        let d = stats.std()[ch].max(eps);
        denom.push(d);
        live.push(stats.std()[ch] > eps);
        let plane = x.index_axis(ndarray::Axis(0), ch);
        let mut out = xhat.index_axis_mut(ndarray::Axis(0), ch);
        ndarray::Zip::from(&mut out)
            .and(&plane)
            .for_each(|o, &v| *o = (v - mu) / d);
    }
    (
        y,
        FsCtx {
            xhat,
            denom,
            live,
            target_std: target.std().to_vec(),
        },
    )
}

/// Gradient of [`fs_forward`] with respect to the input, including the paths
/// through the input's own mean and deviation. Per channel with
/// `g = target_std · dy`:
/// `dx = (g − mean(g) − x̂ · mean(g ⊙ x̂)) / max(σ, eps)`,
/// dropping the `x̂` term where σ was clamped (the deviation is then locally
/// constant).
pub fn fs_backward(ctx: &FsCtx, dy: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = ctx.xhat.dim();
    let n = (h * w) as f64;
    let mut dx = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        let ts = ctx.target_std[ch] as f64;
        let d = ctx.denom[ch] as f64;
        let gplane = dy.index_axis(ndarray::Axis(0), ch);
        let xplane = ctx.xhat.index_axis(ndarray::Axis(0), ch);
        let mut g_mean = 0.0f64;
        let mut gx_mean = 0.0f64;
        for (g, xh) in gplane.iter().zip(xplane.iter()) {
            let g = ts * *g as f64;
            g_mean += g;
            gx_mean += g * *xh as f64;
        }
        g_mean /= n;
        gx_mean /= n;
        let mut out = dx.index_axis_mut(ndarray::Axis(0), ch);
        if ctx.live[ch] {
            ndarray::Zip::from(&mut out)
                .and(&gplane)
                .and(&xplane)
                .for_each(|o, &g, &xh| {
                    let g = ts * g as f64;
                    *o = ((g - g_mean - xh as f64 * gx_mean) / d) as f32;
                });
        } else {
            ndarray::Zip::from(&mut out).and(&gplane).for_each(|o, &g| {
                *o = ((ts * g as f64 - g_mean) / d) as f32;
            });
        }
    }
    dx
}
