//! Training objectives: plain and stylized-branch segmentation cross-entropy,
//! the two pixel-contrastive content terms, the style-consistency divergence,
//! and their weighted combination.
//!
//! All reductions are means over valid (non-ignored) pixels and are computed
//! in `f64` from the `f32` inputs so results are stable enough to compare
//! against independent reference implementations. Functions with a
//! `_with_grad` suffix additionally return analytic `f32` gradients for the
//! tensors the optimizer is allowed to move; everything else (wild features,
//! store entries, the consistency target) is treated as constant.

use ndarray::{Array2, Array3};

use crate::embed::ProjectedGrid;
use crate::error::{Error, Result};
use crate::wilddict::ContentStore;

pub const MODULE: &str = "losses";

/// Class id that marks unlabeled pixels.
pub const DEFAULT_IGNORE_ID: u32 = 255;

/// Probabilities are clamped here before any logarithm.
pub const PROB_CLAMP: f64 = 1e-8;

/// Default softmax temperature for the contrastive terms.
pub const DEFAULT_TAU: f32 = 0.07;

/// A loss value together with how many pixels actually contributed.
/// `valid == 0` means every pixel was ignored and the value is 0 by
/// convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    pub value: f64,
    pub valid: usize,
}

impl MaskedLoss {
    pub const EMPTY: MaskedLoss = MaskedLoss { value: 0.0, valid: 0 };

    pub fn value_f32(&self) -> f32 {
        self.value as f32
    }
}

/// Per-pixel class distribution `[K, H, W]`; rows sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SegPrediction {
    probs: Array3<f32>,
}

impl SegPrediction {
    pub fn new(probs: Array3<f32>) -> Result<Self> {
        let (k, h, w) = probs.dim();
        if k == 0 || h == 0 || w == 0 {
            return Err(Error::Shape {
                module: MODULE,
                details: format!("prediction dimensions must be >= 1, got [{k}, {h}, {w}]"),
            });
        }
        for row in 0..h {
            for col in 0..w {
                let mut sum = 0.0f64;
                for c in 0..k {
                    let p = probs[[c, row, col]];
                    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                        return Err(Error::Data {
                            module: MODULE,
                            details: format!(
                                "probability {p} at class {c}, pixel ({row}, {col}) is outside [0, 1]"
                            ),
                        });
                    }
                    sum += p as f64;
                }
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(Error::Data {
                        module: MODULE,
                        details: format!("pixel ({row}, {col}) probabilities sum to {sum}, not 1"),
                    });
                }
            }
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Array3<f32> {
        &self.probs
    }

    pub fn classes(&self) -> usize {
        self.probs.dim().0
    }

    /// Per-pixel argmax; ties go to the lowest class id.
    pub fn argmax_classes(&self) -> Array2<u32> {
        let (k, h, w) = self.probs.dim();
        Array2::from_shape_fn((h, w), |(row, col)| {
            let mut best = 0usize;
            let mut best_p = self.probs[[0, row, col]];
            for c in 1..k {
                let p = self.probs[[c, row, col]];
                if p > best_p {
                    best_p = p;
                    best = c;
                }
            }
            best as u32
        })
    }

    pub fn height(&self) -> usize {
        self.probs.dim().1
    }

    pub fn width(&self) -> usize {
        self.probs.dim().2
    }
}

/// Numerically stable per-pixel softmax over the class axis.
pub fn softmax_probs(logits: &Array3<f32>) -> Result<SegPrediction> {
    let (k, h, w) = logits.dim();
    if k == 0 || h == 0 || w == 0 {
        return Err(Error::Shape {
            module: MODULE,
            details: format!("logit dimensions must be >= 1, got [{k}, {h}, {w}]"),
        });
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            module: MODULE,
            what: "logits".into(),
        });
    }
    let mut probs = Array3::<f32>::zeros((k, h, w));
    let mut scratch = vec![0.0f64; k];
    for row in 0..h {
        for col in 0..w {
            softmax_pixel(logits, row, col, &mut scratch);
            for c in 0..k {
                probs[[c, row, col]] = scratch[c] as f32;
            }
        }
    }
    SegPrediction::new(probs)
}

fn softmax_pixel(logits: &Array3<f32>, row: usize, col: usize, out: &mut [f64]) {
    let k = out.len();
    let mut max = f64::NEG_INFINITY;
    for c in 0..k {
        max = max.max(logits[[c, row, col]] as f64);
    }
    let mut sum = 0.0f64;
    for c in 0..k {
        let e = ((logits[[c, row, col]] as f64) - max).exp();
        out[c] = e;
        sum += e;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

/// Mean over non-ignored pixels of `-log p[label]`. Labels must be `< K` or
/// equal to `ignore_id`.
pub fn seg_ce(pred: &SegPrediction, labels: &Array2<u32>, ignore_id: u32) -> Result<MaskedLoss> {
    let (k, h, w) = pred.probs.dim();
    check_label_shape(labels, h, w)?;
    let mut sum = 0.0f64;
    let mut valid = 0usize;
    for row in 0..h {
        for col in 0..w {
            let y = labels[[row, col]];
            if y == ignore_id {
                continue;
            }
            check_label_range(y, k, ignore_id)?;
            let p = (pred.probs[[y as usize, row, col]] as f64).max(PROB_CLAMP);
            sum -= p.ln();
            valid += 1;
        }
    }
    Ok(finish_mean(sum, valid))
}

/// Cross-entropy straight from logits: softmax is applied internally, and the
/// analytic gradient with respect to the logits comes back alongside the
/// loss. Used for both the plain and the stylized segmentation branches.
pub fn seg_ce_from_logits_with_grad(
    logits: &Array3<f32>,
    labels: &Array2<u32>,
    ignore_id: u32,
) -> Result<(MaskedLoss, Array3<f32>)> {
    let (k, h, w) = logits.dim();
    check_label_shape(labels, h, w)?;
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            module: MODULE,
            what: "logits".into(),
        });
    }
    let mut valid = 0usize;
    for row in 0..h {
        for col in 0..w {
            let y = labels[[row, col]];
            if y != ignore_id {
                check_label_range(y, k, ignore_id)?;
                valid += 1;
            }
        }
    }
    let mut grad = Array3::<f32>::zeros((k, h, w));
    if valid == 0 {
        return Ok((MaskedLoss::EMPTY, grad));
    }
    let inv_n = 1.0f64 / valid as f64;
    let mut sum = 0.0f64;
    let mut probs = vec![0.0f64; k];
    for row in 0..h {
        for col in 0..w {
            let y = labels[[row, col]];
            if y == ignore_id {
                continue;
            }
            softmax_pixel(logits, row, col, &mut probs);
            sum -= probs[y as usize].max(PROB_CLAMP).ln();
            for c in 0..k {
                let target = if c == y as usize { 1.0 } else { 0.0 };
                grad[[c, row, col]] = ((probs[c] - target) * inv_n) as f32;
            }
        }
    }
    Ok((finish_mean(sum, valid), grad))
}

/// One batch of aligned anchor/positive embedding grids with per-pixel class
/// labels, ready for the contrastive terms. Anchors are the plain-source
/// pixel embeddings; positives are the stylized-source embeddings at exactly
/// the same sampled positions.
#[derive(Debug, Clone)]
pub struct CelBatch {
    anchors: ProjectedGrid,
    positives: ProjectedGrid,
    labels: Array2<u32>,
    tau: f32,
    ignore_id: u32,
}

impl CelBatch {
    pub fn new(
        anchors: ProjectedGrid,
        positives: ProjectedGrid,
        labels: Array2<u32>,
        tau: f32,
        ignore_id: u32,
    ) -> Result<Self> {
        if anchors.values().dim() != positives.values().dim() {
            return Err(Error::Shape {
                module: MODULE,
                details: format!(
                    "anchor grid {:?} and positive grid {:?} differ",
                    anchors.values().dim(),
                    positives.values().dim()
                ),
            });
        }
        if anchors.index_map() != positives.index_map() {
            return Err(Error::Data {
                module: MODULE,
                details: "anchor and positive grids were sampled at different positions".into(),
            });
        }
        let (_, h, w) = anchors.values().dim();
        if labels.dim() != (h, w) {
            return Err(Error::Shape {
                module: MODULE,
                details: format!(
                    "labels {:?} do not match the {h}x{w} embedding grid",
                    labels.dim()
                ),
            });
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Parameter {
                module: MODULE,
                details: format!("temperature must be a positive finite real, got {tau}"),
            });
        }
        Ok(Self {
            anchors,
            positives,
            labels,
            tau,
            ignore_id,
        })
    }

    pub fn anchors(&self) -> &ProjectedGrid {
        &self.anchors
    }

    pub fn positives(&self) -> &ProjectedGrid {
        &self.positives
    }

    pub fn labels(&self) -> &Array2<u32> {
        &self.labels
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    pub fn ignore_id(&self) -> u32 {
        self.ignore_id
    }
}

/// Gradients of a contrastive term with respect to the two embedding grids.
#[derive(Debug, Clone)]
pub struct CelGrads {
    pub d_anchors: Array3<f32>,
    pub d_positives: Array3<f32>,
}

/// Flattened view of a batch used by the contrastive kernels: per pixel an
/// `f64` anchor vector, positive vector, and label; plus the valid subset.
struct BatchView {
    anchors: Vec<Vec<f64>>,
    positives: Vec<Vec<f64>>,
    labels: Vec<u32>,
    /// Flat indices of non-ignored pixels, row-major.
    valid: Vec<usize>,
}

impl BatchView {
    fn build(batch: &CelBatch) -> Self {
        let (c, h, w) = batch.anchors.values().dim();
        let mut anchors = Vec::with_capacity(h * w);
        let mut positives = Vec::with_capacity(h * w);
        let mut labels = Vec::with_capacity(h * w);
        let mut valid = Vec::new();
        for row in 0..h {
            for col in 0..w {
                let flat = row * w + col;
                anchors.push(
                    (0..c)
                        .map(|ch| batch.anchors.values()[[ch, row, col]] as f64)
                        .collect(),
                );
                positives.push(
                    (0..c)
                        .map(|ch| batch.positives.values()[[ch, row, col]] as f64)
                        .collect(),
                );
                let y = batch.labels[[row, col]];
                labels.push(y);
                if y != batch.ignore_id {
                    valid.push(flat);
                }
            }
        }
        Self {
            anchors,
            positives,
            labels,
            valid,
        }
    }

    /// Valid pixels whose label differs from `label` — the negative set
    /// shared by both contrastive terms. Same-class pixels at other positions
    /// belong to neither the numerator nor the denominator.
    fn negatives_of(&self, label: u32) -> Vec<usize> {
        self.valid
            .iter()
            .copied()
            .filter(|&j| self.labels[j] != label)
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// One InfoNCE-style term: `-log(e^{a} / (e^{a} + Σ_j e^{b_j}))` evaluated
/// stably, plus the softmax weights needed for its gradient. `a` and `b` are
/// already divided by the temperature.
fn contrastive_term(a: f64, b: &[f64]) -> (f64, f64, Vec<f64>) {
    let mut m = a;
    for &v in b {
        m = m.max(v);
    }
    let ea = (a - m).exp();
    let mut sum = ea;
    let mut weights = Vec::with_capacity(b.len());
    for &v in b {
        let e = (v - m).exp();
        weights.push(e);
        sum += e;
    }
    let p_pos = ea / sum;
    for wgt in weights.iter_mut() {
        *wgt /= sum;
    }
    let loss = -(a - m - sum.ln());
    (loss, p_pos, weights)
}

fn finish_mean(sum: f64, valid: usize) -> MaskedLoss {
    if valid == 0 {
        MaskedLoss::EMPTY
    } else {
        MaskedLoss {
            value: sum / valid as f64,
            valid,
        }
    }
}

/// Per-anchor values of the source contrastive term, as `(flat_index, loss)`
/// pairs over valid anchors in row-major order. The mean of the values is
/// [`sce_loss`]; the breakdown exists for diagnostics and for checking
/// per-anchor properties directly.
pub fn sce_anchor_terms(batch: &CelBatch) -> Vec<(usize, f64)> {
    let view = BatchView::build(batch);
    let tau = batch.tau as f64;
    let mut out = Vec::with_capacity(view.valid.len());
    for &i in &view.valid {
        let negs = view.negatives_of(view.labels[i]);
        let a = dot(&view.anchors[i], &view.positives[i]) / tau;
        let b: Vec<f64> = negs
            .iter()
            .map(|&j| dot(&view.anchors[i], &view.positives[j]) / tau)
            .collect();
        let (loss, _, _) = contrastive_term(a, &b);
        out.push((i, loss));
    }
    out
}

/// Source content term: each valid anchor is pulled toward its own stylized
/// counterpart and pushed from stylized pixels of every other class.
pub fn sce_loss(batch: &CelBatch) -> MaskedLoss {
    let terms = sce_anchor_terms(batch);
    finish_mean(terms.iter().map(|(_, l)| *l).sum(), terms.len())
}

/// [`sce_loss`] plus gradients with respect to both embedding grids.
pub fn sce_with_grad(batch: &CelBatch) -> (MaskedLoss, CelGrads) {
    let view = BatchView::build(batch);
    let (c, h, w) = batch.anchors.values().dim();
    let tau = batch.tau as f64;
    let mut d_anchors = vec![vec![0.0f64; c]; h * w];
    let mut d_positives = vec![vec![0.0f64; c]; h * w];
    let mut sum = 0.0f64;
    let n_valid = view.valid.len();
    if n_valid == 0 {
        return (
            MaskedLoss::EMPTY,
            CelGrads {
                d_anchors: Array3::zeros((c, h, w)),
                d_positives: Array3::zeros((c, h, w)),
            },
        );
    }
    let scale = 1.0 / (tau * n_valid as f64);
    for &i in &view.valid {
        let negs = view.negatives_of(view.labels[i]);
        let a = dot(&view.anchors[i], &view.positives[i]) / tau;
        let b: Vec<f64> = negs
            .iter()
            .map(|&j| dot(&view.anchors[i], &view.positives[j]) / tau)
            .collect();
        let (loss, p_pos, p_neg) = contrastive_term(a, &b);
        sum += loss;
        // d/da = p_pos - 1, d/db_j = p_j; chain through the dot products
        for ch in 0..c {
            let mut da = (p_pos - 1.0) * view.positives[i][ch];
            for (&j, &pj) in negs.iter().zip(p_neg.iter()) {
                da += pj * view.positives[j][ch];
            }
            d_anchors[i][ch] += da * scale;
            d_positives[i][ch] += (p_pos - 1.0) * view.anchors[i][ch] * scale;
        }
        for (&j, &pj) in negs.iter().zip(p_neg.iter()) {
            for ch in 0..c {
                d_positives[j][ch] += pj * view.anchors[i][ch] * scale;
            }
        }
    }
    (
        finish_mean(sum, n_valid),
        CelGrads {
            d_anchors: grads_to_array(&d_anchors, c, h, w),
            d_positives: grads_to_array(&d_positives, c, h, w),
        },
    )
}

fn grads_to_array(flat: &[Vec<f64>], c: usize, h: usize, w: usize) -> Array3<f32> {
    let mut out = Array3::<f32>::zeros((c, h, w));
    for (idx, g) in flat.iter().enumerate() {
        let (row, col) = (idx / w, idx % w);
        for ch in 0..c {
            out[[ch, row, col]] = g[ch] as f32;
        }
    }
    out
}

/// Wild content term: the positive for each anchor is the stored wild
/// embedding closest to the anchor's stylized counterpart; the negatives are
/// exactly the source term's negatives. Store entries are constants.
pub fn wce_loss(batch: &CelBatch, store: &ContentStore) -> Result<MaskedLoss> {
    Ok(wce_with_grad(batch, store)?.0)
}

/// [`wce_loss`] plus gradients. The retrieval index is a constant of the
/// iteration: no derivative flows through the query or the stored entry.
pub fn wce_with_grad(batch: &CelBatch, store: &ContentStore) -> Result<(MaskedLoss, CelGrads)> {
    let view = BatchView::build(batch);
    let (c, h, w) = batch.anchors.values().dim();
    if store.is_empty() {
        return Err(Error::Config(
            "wild-content store is empty; wild embeddings must be pushed before the wild content term is evaluated".into(),
        ));
    }
    if store.dim() != c {
        return Err(Error::Shape {
            module: MODULE,
            details: format!(
                "store dimension {} does not match embedding dimension {c}",
                store.dim()
            ),
        });
    }
    let tau = batch.tau as f64;
    let mut d_anchors = vec![vec![0.0f64; c]; h * w];
    let mut d_positives = vec![vec![0.0f64; c]; h * w];
    let mut sum = 0.0f64;
    let n_valid = view.valid.len();
    if n_valid == 0 {
        return Ok((
            MaskedLoss::EMPTY,
            CelGrads {
                d_anchors: Array3::zeros((c, h, w)),
                d_positives: Array3::zeros((c, h, w)),
            },
        ));
    }
    let scale = 1.0 / (tau * n_valid as f64);
    for &i in &view.valid {
        // query with the stylized embedding, score against the plain one
        let query: Vec<f32> = view.positives[i].iter().map(|v| *v as f32).collect();
        let (entry, _) = store.nearest(&query)?;
        let nn: Vec<f64> = entry.iter().map(|v| *v as f64).collect();
        let negs = view.negatives_of(view.labels[i]);
        let a = dot(&view.anchors[i], &nn) / tau;
        let b: Vec<f64> = negs
            .iter()
            .map(|&j| dot(&view.anchors[i], &view.positives[j]) / tau)
            .collect();
        let (loss, p_pos, p_neg) = contrastive_term(a, &b);
        sum += loss;
        for ch in 0..c {
            let mut da = (p_pos - 1.0) * nn[ch];
            for (&j, &pj) in negs.iter().zip(p_neg.iter()) {
                da += pj * view.positives[j][ch];
            }
            d_anchors[i][ch] += da * scale;
        }
        for (&j, &pj) in negs.iter().zip(p_neg.iter()) {
            for ch in 0..c {
                d_positives[j][ch] += pj * view.anchors[i][ch] * scale;
            }
        }
    }
    Ok((
        finish_mean(sum, n_valid),
        CelGrads {
            d_anchors: grads_to_array(&d_anchors, c, h, w),
            d_positives: grads_to_array(&d_positives, c, h, w),
        },
    ))
}

/// Combined content term: source part plus wild part, unit coefficients.
pub fn cel_loss(batch: &CelBatch, store: &ContentStore) -> Result<MaskedLoss> {
    let s = sce_loss(batch);
    let w = wce_loss(batch, store)?;
    Ok(MaskedLoss {
        value: s.value + w.value,
        valid: s.valid,
    })
}

/// Mean per-pixel divergence `KL(p_src ‖ p_stylized)`: how far the stylized
/// branch's prediction drifts from the plain branch's. `p_src` is the
/// constant target. Mathematically nonnegative; the result is floored at
/// zero to absorb rounding on near-identical inputs.
pub fn scr_loss(p_src: &SegPrediction, p_stylized: &SegPrediction) -> Result<f64> {
    let dims = p_src.probs.dim();
    if dims != p_stylized.probs.dim() {
        return Err(Error::Shape {
            module: MODULE,
            details: format!(
                "source prediction {:?} and stylized prediction {:?} differ",
                dims,
                p_stylized.probs.dim()
            ),
        });
    }
    let (k, h, w) = dims;
    let mut sum = 0.0f64;
    for row in 0..h {
        for col in 0..w {
            for c in 0..k {
                let p = p_src.probs[[c, row, col]] as f64;
                if p == 0.0 {
                    continue;
                }
                let q = (p_stylized.probs[[c, row, col]] as f64).max(PROB_CLAMP);
                sum += p * (p.max(PROB_CLAMP).ln() - q.ln());
            }
        }
    }
    Ok((sum / (h * w) as f64).max(0.0))
}

/// Consistency term straight from the stylized branch's logits, with the
/// gradient with respect to those logits. The target distribution is fixed.
pub fn scr_from_logits_with_grad(
    p_src: &SegPrediction,
    stylized_logits: &Array3<f32>,
) -> Result<(f64, Array3<f32>)> {
    let dims = p_src.probs.dim();
    if dims != stylized_logits.dim() {
        return Err(Error::Shape {
            module: MODULE,
            details: format!(
                "source prediction {:?} and stylized logits {:?} differ",
                dims,
                stylized_logits.dim()
            ),
        });
    }
    if !stylized_logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            module: MODULE,
            what: "stylized logits".into(),
        });
    }
    let (k, h, w) = dims;
    let inv_n = 1.0f64 / (h * w) as f64;
    let mut sum = 0.0f64;
    let mut grad = Array3::<f32>::zeros((k, h, w));
    let mut q = vec![0.0f64; k];
    for row in 0..h {
        for col in 0..w {
            softmax_pixel(stylized_logits, row, col, &mut q);
            // target mass covered by unclamped entries; q below the clamp
            // contributes no derivative through its log
            let mut covered = 0.0f64;
            for c in 0..k {
                let p = p_src.probs[[c, row, col]] as f64;
                if p == 0.0 {
                    continue;
                }
                sum += p * (p.max(PROB_CLAMP).ln() - q[c].max(PROB_CLAMP).ln());
                if q[c] >= PROB_CLAMP {
                    covered += p;
                }
            }
            for c in 0..k {
                let p = p_src.probs[[c, row, col]] as f64;
                let direct = if q[c] >= PROB_CLAMP && p != 0.0 { p } else { 0.0 };
                grad[[c, row, col]] = ((q[c] * covered - direct) * inv_n) as f32;
            }
        }
    }
    Ok(((sum * inv_n).max(0.0), grad))
}

/// Per-term weights for the combined objective. Zero switches a term (and
/// its whole branch) off; negative weights are rejected.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub orig: f32,
    pub cel: f32,
    pub sel: f32,
    pub scr: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            orig: 1.0,
            cel: 1.0,
            sel: 1.0,
            scr: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("orig", self.orig),
            ("cel", self.cel),
            ("sel", self.sel),
            ("scr", self.scr),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parameter {
                    module: MODULE,
                    details: format!("loss weight {name} must be a nonnegative real, got {v}"),
                });
            }
        }
        Ok(())
    }

    /// Whether the stylized/wild machinery contributes at all; when false the
    /// trainer can skip those branches entirely.
    pub fn uses_stylized_branch(&self) -> bool {
        self.cel > 0.0 || self.sel > 0.0 || self.scr > 0.0
    }
}

/// The five logged scalars of one training step plus their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub l_orig: f64,
    pub l_sce: f64,
    pub l_wce: f64,
    pub l_sel: f64,
    pub l_scr: f64,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossTerms {
    pub fn compute(
        weights: LossWeights,
        l_orig: f64,
        l_sce: f64,
        l_wce: f64,
        l_sel: f64,
        l_scr: f64,
    ) -> Self {
        let total = weights.orig as f64 * l_orig
            + weights.cel as f64 * (l_sce + l_wce)
            + weights.sel as f64 * l_sel
            + weights.scr as f64 * l_scr;
        Self {
            l_orig,
            l_sce,
            l_wce,
            l_sel,
            l_scr,
            weights,
            total,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_orig, self.l_sce, self.l_wce, self.l_sel, self.l_scr, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Weighted sum of the term values.
pub fn total_loss(terms: &LossTerms) -> f64 {
    terms.total
}

fn check_label_shape(labels: &Array2<u32>, h: usize, w: usize) -> Result<()> {
    if labels.dim() != (h, w) {
        return Err(Error::Shape {
            module: MODULE,
            details: format!("labels {:?} do not match the {h}x{w} prediction", labels.dim()),
        });
    }
    Ok(())
}

fn check_label_range(y: u32, k: usize, ignore_id: u32) -> Result<()> {
    if (y as usize) < k {
        Ok(())
    } else {
        Err(Error::Data {
            module: MODULE,
            details: format!("label id {y} out of range for {k} classes (ignore id is {ignore_id})"),
        })
    }
}
