//! Channel-wise feature statistics and the feature stylization (FS) transform.
//!
//! Style lives in the per-channel first and second moments of a feature map.
//! `stylize` re-normalizes a source map so its channel statistics match a
//! target ("wild") map's statistics while leaving the spatial arrangement
//! untouched; applied at several shallow layers this swaps the style of the
//! source feature without destroying its content.

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};

pub const MODULE: &str = "featstats";

/// Default denominator guard for constant channels.
pub const DEFAULT_FS_EPS: f32 = 1e-5;

/// A `[channels, height, width]` activation grid. Construction validates that
/// every entry is finite and all dimensions are at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array3<f32>,
}

impl FeatureMap {
    pub fn new(values: Array3<f32>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape {
                module: MODULE,
                details: format!("feature map dimensions must be >= 1, got [{c}, {h}, {w}]"),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                module: MODULE,
                what: "feature map values".into(),
            });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f32> {
        self.values
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }
}

/// Per-channel mean and population standard deviation of a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    mean: Vec<f32>,
    std: Vec<f32>,
}

impl ChannelStats {
    pub fn new(mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Shape {
                module: MODULE,
                details: format!(
                    "mean has {} channels but std has {}",
                    mean.len(),
                    std.len()
                ),
            });
        }
        if mean.is_empty() {
            return Err(Error::Shape {
                module: MODULE,
                details: "channel statistics need at least one channel".into(),
            });
        }
        if !mean.iter().chain(std.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                module: MODULE,
                what: "channel statistics".into(),
            });
        }
        if let Some(s) = std.iter().find(|s| **s < 0.0) {
            return Err(Error::Parameter {
                module: MODULE,
                details: format!("standard deviation must be nonnegative, got {s}"),
            });
        }
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn std(&self) -> &[f32] {
        &self.std
    }
}

/// Per-channel mean and population (divide-by-N) standard deviation.
pub fn channel_stats(fm: &FeatureMap) -> ChannelStats {
    channel_stats_view(fm.values.view())
}

/// Unvalidated fast path for callers that guarantee finite inputs.
pub(crate) fn channel_stats_view(values: ArrayView3<'_, f32>) -> ChannelStats {
    let (c, h, w) = values.dim();
    let n = (h * w) as f64;
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = values.index_axis(ndarray::Axis(0), ch);
        let mut sum = 0.0f64;
        for v in plane.iter() {
            sum += *v as f64;
        }
        let mu = sum / n;
        let mut var = 0.0f64;
        for v in plane.iter() {
            let d = *v as f64 - mu;
            var += d * d;
        }
        mean.push(mu as f32);
        std.push((var / n).max(0.0).sqrt() as f32);
    }
    ChannelStats { mean, std }
}

/// Transfer `wild_stats` onto `source`: per channel,
/// `out = wild_std * (source - mu) / max(sigma, eps) + wild_mean`
/// with `mu`, `sigma` the source's own channel statistics. The source map is
/// left untouched; the stylized map is a new allocation.
pub fn stylize(source: &FeatureMap, wild_stats: &ChannelStats, eps: f32) -> Result<FeatureMap> {
    if wild_stats.channels() != source.channels() {
        return Err(Error::Shape {
            module: MODULE,
            details: format!(
                "source has {} channels but wild stats have {}",
                source.channels(),
                wild_stats.channels()
            ),
        });
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Parameter {
            module: MODULE,
            details: format!("eps must be a positive finite real, got {eps}"),
        });
    }
    let src_stats = channel_stats_view(source.values.view());
    let values = stylize_view(source.values.view(), &src_stats, wild_stats, eps);
    Ok(FeatureMap { values })
}

pub(crate) fn stylize_view(
    source: ArrayView3<'_, f32>,
    src_stats: &ChannelStats,
    target: &ChannelStats,
    eps: f32,
) -> Array3<f32> {
    let (c, h, w) = source.dim();
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        let mu = src_stats.mean[ch];
        let denom = src_stats.std[ch].max(eps);
        let gamma = target.std[ch] / denom;
        let beta = target.mean[ch] - gamma * mu;
        let plane = source.index_axis(ndarray::Axis(0), ch);
        let mut out_plane = out.index_axis_mut(ndarray::Axis(0), ch);
        ndarray::Zip::from(&mut out_plane)
            .and(&plane)
            .for_each(|o, &x| *o = gamma * x + beta);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn fm(values: Array3<f32>) -> FeatureMap {
        FeatureMap::new(values).unwrap()
    }

    #[test]
    fn stats_of_2x2_map() {
        let m = fm(array![[[1.0, 2.0], [3.0, 4.0]]]);
        let s = channel_stats(&m);
        assert_relative_eq!(s.mean()[0], 2.5, max_relative = 1e-6);
        // population std = sqrt(1.25)
        assert_relative_eq!(s.std()[0], 1.25f32.sqrt(), max_relative = 1e-6);
        assert_relative_eq!(s.std()[0], 1.1180, epsilon = 1e-4);
    }

    #[test]
    fn stats_of_constant_map() {
        let m = fm(Array3::from_elem((1, 3, 5), 7.0));
        let s = channel_stats(&m);
        assert_eq!(s.mean()[0], 7.0);
        assert_eq!(s.std()[0], 0.0);
    }

    #[test]
    fn stats_identical_channels_match() {
        let mut v = Array3::zeros((2, 2, 2));
        for (i, x) in [0.5f32, -1.0, 2.0, 3.5].iter().enumerate() {
            v[[0, i / 2, i % 2]] = *x;
            v[[1, i / 2, i % 2]] = *x;
        }
        let s = channel_stats(&fm(v));
        assert_eq!(s.mean()[0], s.mean()[1]);
        assert_eq!(s.std()[0], s.std()[1]);
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut v = Array3::zeros((1, 2, 2));
        v[[0, 0, 0]] = f32::NAN;
        assert!(matches!(
            FeatureMap::new(v),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(FeatureMap::new(Array3::zeros((0, 2, 2))).is_err());
    }

    #[test]
    fn stylize_identity_under_matched_stats() {
        let m = fm(array![[[1.0, 2.0], [3.0, 4.0]], [[0.0, -1.0], [5.0, 2.0]]]);
        let out = stylize(&m, &channel_stats(&m), DEFAULT_FS_EPS).unwrap();
        for (a, b) in m.values().iter().zip(out.values().iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-5);
        }
    }

    #[test]
    fn stylize_2x2_to_standard_normal_stats() {
        let m = fm(array![[[1.0, 2.0], [3.0, 4.0]]]);
        let wild = ChannelStats::new(vec![0.0], vec![1.0]).unwrap();
        let out = stylize(&m, &wild, DEFAULT_FS_EPS).unwrap();
        let expect = [-1.3416f32, -0.4472, 0.4472, 1.3416];
        for (o, e) in out.values().iter().zip(expect.iter()) {
            assert_relative_eq!(o, e, epsilon = 1e-4);
        }
    }

    #[test]
    fn stylize_constant_channel_maps_to_target_mean() {
        let m = fm(Array3::from_elem((1, 2, 3), 3.0));
        let wild = ChannelStats::new(vec![5.0], vec![2.0]).unwrap();
        let out = stylize(&m, &wild, DEFAULT_FS_EPS).unwrap();
        for v in out.values().iter() {
            assert_relative_eq!(*v, 5.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn stylize_channel_mismatch_is_shape_error() {
        let m = fm(Array3::from_elem((2, 2, 2), 1.0));
        let wild = ChannelStats::new(vec![0.0], vec![1.0]).unwrap();
        assert!(matches!(
            stylize(&m, &wild, DEFAULT_FS_EPS),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn negative_std_rejected() {
        assert!(ChannelStats::new(vec![0.0], vec![-1.0]).is_err());
    }

    /// Two FS hooks interleaved with a linear per-channel layer must equal the
    /// hand-evaluated trace of the repeated-swap definition.
    #[test]
    fn two_layer_composition_matches_symbolic_trace() {
        let eps = DEFAULT_FS_EPS;
        let src = fm(array![[[0.2, -1.0], [3.0, 0.5]], [[1.0, 2.0], [0.0, -2.0]]]);
        let wild = fm(array![[[5.0, 1.0], [2.0, 0.0]], [[-1.0, -3.0], [4.0, 1.0]]]);
        // toy layer l+1: per-channel affine y_c = a_c * x_c + b_c
        let a = [1.5f32, -0.5];
        let b = [0.3f32, 2.0];
        let apply_layer = |m: &FeatureMap| {
            let mut v = m.values().clone();
            for c in 0..2 {
                v.index_axis_mut(ndarray::Axis(0), c)
                    .mapv_inplace(|x| a[c] * x + b[c]);
            }
            fm(v)
        };

        // pipeline under test: swap at layer l, push through the layer, swap again
        let sw_l = stylize(&src, &channel_stats(&wild), eps).unwrap();
        let sw_next = apply_layer(&sw_l);
        let wild_next = apply_layer(&wild);
        let sw_next = stylize(&sw_next, &channel_stats(&wild_next), eps).unwrap();

        // symbolic trace in f64 of the same two swaps
        let trace = |x: &FeatureMap, w: &FeatureMap| -> Vec<f64> {
            let stats64 = |m: &FeatureMap, c: usize| {
                let plane = m.values().index_axis(ndarray::Axis(0), c);
                let n = plane.len() as f64;
                let mu = plane.iter().map(|v| *v as f64).sum::<f64>() / n;
                let var = plane.iter().map(|v| (*v as f64 - mu).powi(2)).sum::<f64>() / n;
                (mu, var.sqrt())
            };
            let mut out = Vec::new();
            for c in 0..2 {
                let (mu_s, sd_s) = stats64(x, c);
                let (mu_w, sd_w) = stats64(w, c);
                // first swap
                let sw: Vec<f64> = x
                    .values()
                    .index_axis(ndarray::Axis(0), c)
                    .iter()
                    .map(|v| sd_w * (*v as f64 - mu_s) / sd_s.max(eps as f64) + mu_w)
                    .collect();
                // layer
                let sw1: Vec<f64> = sw.iter().map(|v| a[c] as f64 * v + b[c] as f64).collect();
                let w1: Vec<f64> = w
                    .values()
                    .index_axis(ndarray::Axis(0), c)
                    .iter()
                    .map(|v| a[c] as f64 * (*v as f64) + b[c] as f64)
                    .collect();
                // second swap against the layered wild feature
                let n = sw1.len() as f64;
                let mu1 = sw1.iter().sum::<f64>() / n;
                let sd1 = (sw1.iter().map(|v| (v - mu1).powi(2)).sum::<f64>() / n).sqrt();
                let mu_w1 = w1.iter().sum::<f64>() / n;
                let sd_w1 = (w1.iter().map(|v| (v - mu_w1).powi(2)).sum::<f64>() / n).sqrt();
                out.extend(
                    sw1.iter()
                        .map(|v| sd_w1 * (v - mu1) / sd1.max(eps as f64) + mu_w1),
                );
            }
            out
        };
        let expect = trace(&src, &wild);
        for (got, want) in sw_next.values().iter().zip(expect.iter()) {
            assert_relative_eq!(*got as f64, *want, epsilon = 1e-4);
        }
    }

    fn arb_map(c: usize, h: usize, w: usize) -> impl Strategy<Value = Array3<f32>> {
        proptest::collection::vec(-50.0f32..50.0, c * h * w)
            .prop_map(move |v| Array3::from_shape_vec((c, h, w), v).unwrap())
    }

    proptest! {
        #[test]
        fn idempotent_under_matched_stats(v in arb_map(3, 4, 5)) {
            let m = fm(v);
            let s = channel_stats(&m);
            let out = stylize(&m, &s, DEFAULT_FS_EPS).unwrap();
            for c in 0..3 {
                if s.std()[c] > 10.0 * DEFAULT_FS_EPS {
                    let p = m.values().index_axis(ndarray::Axis(0), c);
                    let q = out.values().index_axis(ndarray::Axis(0), c);
                    for (a, b) in p.iter().zip(q.iter()) {
                        let scale = a.abs().max(s.std()[c]);
                        prop_assert!((a - b).abs() <= 1e-5 * scale.max(1.0));
                    }
                }
            }
        }

        #[test]
        fn moments_match_target(
            v in arb_map(2, 6, 6),
            mean in proptest::collection::vec(-10.0f32..10.0, 2),
            std in proptest::collection::vec(0.1f32..5.0, 2),
        ) {
            let m = fm(v);
            let src = channel_stats(&m);
            let wild = ChannelStats::new(mean.clone(), std.clone()).unwrap();
            let out = stylize(&m, &wild, DEFAULT_FS_EPS).unwrap();
            let got = channel_stats(&out);
            for c in 0..2 {
                if src.std()[c] > 10.0 * DEFAULT_FS_EPS {
                    prop_assert!((got.mean()[c] - mean[c]).abs() <= 1e-4 * mean[c].abs().max(1.0));
                    prop_assert!((got.std()[c] - std[c]).abs() <= 1e-4 * std[c].max(1.0));
                }
            }
        }

        #[test]
        fn within_channel_order_preserved(
            v in arb_map(1, 4, 4),
            std in 0.05f32..4.0,
        ) {
            let m = fm(v);
            let wild = ChannelStats::new(vec![1.0], vec![std]).unwrap();
            let out = stylize(&m, &wild, DEFAULT_FS_EPS).unwrap();
            let xs: Vec<f32> = m.values().iter().copied().collect();
            let ys: Vec<f32> = out.values().iter().copied().collect();
            for i in 0..xs.len() {
                for j in 0..xs.len() {
                    if xs[i] < xs[j] {
                        prop_assert!(ys[i] <= ys[j]);
                    }
                }
            }
        }
    }
}
