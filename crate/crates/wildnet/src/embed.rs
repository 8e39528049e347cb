//! Projection-head output handling: per-pixel L2 normalization and spatial
//! subsampling of embedding grids.
//!
//! Contrastive terms operate on a `[C_q, H_p, W_p]` grid of pixel embeddings.
//! Every pixel column is normalized to unit length, and anchors are drawn on
//! a fixed uniform lattice so grids subsampled with the same parameters stay
//! pixel-aligned — that alignment is what makes a source pixel and its
//! stylized counterpart a genuine positive pair.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MODULE: &str = "embed";

/// Default guard on the denominator of per-pixel normalization.
pub const DEFAULT_NORM_EPS: f32 = 1e-12;

/// A `[channels, height, width]` grid of per-pixel embeddings, optionally
/// carrying the source-grid coordinates each retained pixel came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGrid {
    values: Array3<f32>,
    norm_eps: f32,
    /// `(row, col)` coordinates into the grid this one was subsampled from;
    /// `None` for a full, unsampled grid. Always `height*width` long and
    /// strictly increasing in row-major order.
    index_map: Option<Vec<(usize, usize)>>,
}

impl ProjectedGrid {
    pub fn new(values: Array3<f32>) -> Result<Self> {
        Self::with_eps(values, DEFAULT_NORM_EPS)
    }

    pub fn with_eps(values: Array3<f32>, norm_eps: f32) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape {
                module: MODULE,
                details: format!("grid dimensions must be >= 1, got [{c}, {h}, {w}]"),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                module: MODULE,
                what: "embedding grid values".into(),
            });
        }
        if !(norm_eps > 0.0) || !norm_eps.is_finite() {
            return Err(Error::Parameter {
                module: MODULE,
                details: format!("norm_eps must be a positive finite real, got {norm_eps}"),
            });
        }
        Ok(Self {
            values,
            norm_eps,
            index_map: None,
        })
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn norm_eps(&self) -> f32 {
        self.norm_eps
    }

    pub fn index_map(&self) -> Option<&[(usize, usize)]> {
        self.index_map.as_deref()
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

    /// The embedding at one pixel, as a contiguous vector.
    pub fn pixel(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.channels())
            .map(|c| self.values[[c, row, col]])
            .collect()
    }
}

/// Divide each pixel vector by `max(its L2 norm, norm_eps)`. The all-zero
/// vector stays zero; everything else lands on the unit sphere.
pub fn normalize_grid(grid: &ProjectedGrid) -> ProjectedGrid {
    let (c, h, w) = grid.values.dim();
    let mut out = grid.values.clone();
    for row in 0..h {
        for col in 0..w {
            let mut sq = 0.0f64;
            for ch in 0..c {
                let v = out[[ch, row, col]] as f64;
                sq += v * v;
            }
            let denom = sq.sqrt().max(grid.norm_eps as f64) as f32;
            for ch in 0..c {
                out[[ch, row, col]] /= denom;
            }
        }
    }
    ProjectedGrid {
        values: out,
        norm_eps: grid.norm_eps,
        index_map: grid.index_map.clone(),
    }
}

/// Row/column indices of the half-cell-offset uniform lattice mapping `out`
/// positions into `full` positions: `floor((i + 0.5) * full / out)`.
pub fn lattice_indices(full: usize, out: usize) -> Vec<usize> {
    (0..out)
        .map(|i| ((i as f64 + 0.5) * full as f64 / out as f64).floor() as usize)
        .collect()
}

/// Keep the pixels on a fixed uniform lattice. Two grids of equal size
/// subsampled with equal `out_h`/`out_w` keep identical index maps, so their
/// retained pixels stay aligned.
pub fn uniform_subsample(grid: &ProjectedGrid, out_h: usize, out_w: usize) -> Result<ProjectedGrid> {
    let (_, h, w) = grid.values.dim();
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::Parameter {
            module: MODULE,
            details: format!(
                "subsample target [{out_h}, {out_w}] must be within 1..=[{h}, {w}]"
            ),
        });
    }
    let rows = lattice_indices(h, out_h);
    let cols = lattice_indices(w, out_w);
    let mut coords = Vec::with_capacity(out_h * out_w);
    for &r in &rows {
        for &c in &cols {
            coords.push((r, c));
        }
    }
    Ok(select_coords(grid, coords, out_h, out_w))
}

/// Seeded choice of `out_h * out_w` distinct pixels, kept in row-major order.
/// Ablation alternative to the fixed lattice; same alignment guarantee for
/// equal seeds and dimensions.
pub fn random_subsample(
    grid: &ProjectedGrid,
    out_h: usize,
    out_w: usize,
    seed: u64,
) -> Result<ProjectedGrid> {
    let (_, h, w) = grid.values.dim();
    if out_h == 0 || out_w == 0 || out_h * out_w > h * w {
        return Err(Error::Parameter {
            module: MODULE,
            details: format!(
                "cannot sample {}x{} distinct pixels from a {}x{} grid",
                out_h, out_w, h, w
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat: Vec<usize> = (0..h * w).collect();
    flat.shuffle(&mut rng);
    let mut picked: Vec<usize> = flat[..out_h * out_w].to_vec();
    picked.sort_unstable();
    let coords: Vec<(usize, usize)> = picked.into_iter().map(|i| (i / w, i % w)).collect();
    Ok(select_coords(grid, coords, out_h, out_w))
}

fn select_coords(
    grid: &ProjectedGrid,
    coords: Vec<(usize, usize)>,
    out_h: usize,
    out_w: usize,
) -> ProjectedGrid {
    let c = grid.channels();
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for (k, &(r, col)) in coords.iter().enumerate() {
        let (orow, ocol) = (k / out_w, k % out_w);
        for ch in 0..c {
            out[[ch, orow, ocol]] = grid.values[[ch, r, col]];
        }
    }
    // when subsampling an already-subsampled grid, compose the coordinate maps
    let index_map = match &grid.index_map {
        Some(parent) => {
            let w = grid.width();
            coords.iter().map(|&(r, col)| parent[r * w + col]).collect()
        }
        None => coords,
    };
    ProjectedGrid {
        values: out,
        norm_eps: grid.norm_eps,
        index_map: Some(index_map),
    }
}
