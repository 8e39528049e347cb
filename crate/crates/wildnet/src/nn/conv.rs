//! 2-D convolution as im2col plus a matrix product, with the matching
//! backward pass (input gradient via col2im, parameter gradients via the
//! transposed products).

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Square-kernel convolution with bias. Weights are laid out
/// `[out_ch, in_ch, k, k]` flattened; gradients accumulate until
/// [`Conv2d::zero_grads`] clears them.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub dweight: Vec<f32>,
    pub dbias: Vec<f32>,
}

/// Cached forward context: the unrolled input patches and the input's
/// spatial dimensions.
pub struct ConvCtx {
    cols: Array2<f32>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    /// He-normal initialized convolution (std `sqrt(2 / fan_in)`), zero bias.
    pub fn new<R: Rng>(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let normal = Normal::new(0.0f64, (2.0 / fan_in).sqrt()).unwrap();
        let weight: Vec<f32> = (0..out_ch * in_ch * k * k)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            dweight: vec![0.0; weight.len()],
            weight,
            bias: vec![0.0; out_ch],
            dbias: vec![0.0; out_ch],
        }
    }

    pub fn out_dims(&self, in_h: usize, in_w: usize) -> (usize, usize) {
        (
            (in_h + 2 * self.pad - self.k) / self.stride + 1,
            (in_w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, ConvCtx) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "{}: input has {c} channels", self.name);
        let (out_h, out_w) = self.out_dims(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad, out_h, out_w);
        let wmat =
            Array2::from_shape_vec((self.out_ch, self.in_ch * self.k * self.k), self.weight.clone())
                .unwrap();
        let mut out_mat = wmat.dot(&cols);
        for (o, mut row) in out_mat.rows_mut().into_iter().enumerate() {
            row += self.bias[o];
        }
        let out = out_mat
            .into_shape_with_order((self.out_ch, out_h, out_w))
            .unwrap();
        (
            out,
            ConvCtx {
                cols,
                in_h: h,
                in_w: w,
                out_h,
                out_w,
            },
        )
    }

    /// Accumulates `dweight`/`dbias` and returns the input gradient.
    pub fn backward(&mut self, ctx: &ConvCtx, dy: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = dy.dim();
        assert_eq!((c, h, w), (self.out_ch, ctx.out_h, ctx.out_w));
        let dy_mat = Array2::from_shape_vec(
            (self.out_ch, ctx.out_h * ctx.out_w),
            dy.iter().copied().collect(),
        )
        .unwrap();
        for o in 0..self.out_ch {
            let mut s = 0.0f32;
            for v in dy_mat.row(o) {
                s += *v;
            }
            self.dbias[o] += s;
        }
        let dw = dy_mat.dot(&ctx.cols.t());
        for (acc, g) in self.dweight.iter_mut().zip(dw.iter()) {
            *acc += *g;
        }
        let wmat =
            Array2::from_shape_vec((self.out_ch, self.in_ch * self.k * self.k), self.weight.clone())
                .unwrap();
        let dcols = wmat.t().dot(&dy_mat);
        col2im(
            &dcols, self.in_ch, ctx.in_h, ctx.in_w, self.k, self.stride, self.pad, ctx.out_h,
            ctx.out_w,
        )
    }

    pub fn zero_grads(&mut self) {
        self.dweight.iter_mut().for_each(|v| *v = 0.0);
        self.dbias.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Visit `(name, values, grads)` for each parameter tensor, weight first.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut [f32], &mut [f32])) {
        let wname = format!("{}.weight", self.name);
        f(&wname, &mut self.weight, &mut self.dweight);
        let bname = format!("{}.bias", self.name);
        f(&bname, &mut self.bias, &mut self.dbias);
    }
}

fn im2col(
    x: &Array3<f32>,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f32>::zeros((c * k * k, out_h * out_w));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * out_w + ox]] = x[[ch, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f32>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Array3<f32> {
    let mut dx = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[ch, iy as usize, ix as usize]] += dcols[[row, oy * out_w + ox]];
                    }
                }
            }
        }
    }
    dx
}
