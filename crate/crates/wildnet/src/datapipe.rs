//! Dataset ingestion, label remapping, augmentation, paired source/wild
//! batching, and a seeded synthetic multi-domain generator for desk-scale
//! experiments.
//!
//! Directory layout: `root/images/*.png|jpg` with, for labeled roles,
//! `root/labels/<stem>.png` holding single-channel class ids. A mapping CSV
//! (`raw_id,train_id` per line) collapses raw ids to training ids; raw ids
//! absent from the mapping become the ignore id.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::embed::lattice_indices;
use crate::error::{Error, Result};
use crate::losses::DEFAULT_IGNORE_ID;
use crate::nn::bilinear_resize;

pub const MODULE: &str = "datapipe";

/// One labeled training or evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Array3<f32>,
    /// `[H, W]` class ids, `ignore_id` for unlabeled pixels.
    pub label: Array2<u32>,
}

impl LabeledSample {
    pub fn new(image: Array3<f32>, label: Array2<u32>) -> Result<Self> {
        let (_, h, w) = image.dim();
        if label.dim() != (h, w) {
            return Err(Error::Shape {
                module: MODULE,
                details: format!(
                    "label grid {:?} does not match image {}x{}",
                    label.dim(),
                    h,
                    w
                ),
            });
        }
        if !image.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Data {
                module: MODULE,
                details: "image values must lie in [0, 1]".into(),
            });
        }
        Ok(Self { image, label })
    }

    /// Check that every label id is a valid class or the ignore id.
    pub fn validate_ids(&self, num_classes: usize, ignore_id: u32) -> Result<()> {
        for &id in self.label.iter() {
            if id != ignore_id && id as usize >= num_classes {
                return Err(Error::Data {
                    module: MODULE,
                    details: format!("label id {id} outside 0..{num_classes} and not ignore"),
                });
            }
        }
        Ok(())
    }
}

/// One unlabeled wild sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WildSample {
    pub image: Array3<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Source,
    Wild,
    Eval,
}

impl DatasetRole {
    pub fn labeled(self) -> bool {
        !matches!(self, DatasetRole::Wild)
    }
}

/// Raw-id to train-id lookup over the one-byte id space.
#[derive(Debug, Clone)]
pub struct LabelMapping {
    table: [u32; 256],
}

impl LabelMapping {
    /// Every id maps to itself; out-of-range handled by the caller's
    /// validation.
    pub fn identity() -> Self {
        let mut table = [0u32; 256];
        for (i, t) in table.iter_mut().enumerate() {
            *t = i as u32;
        }
        Self { table }
    }

    /// Parse a two-column `raw_id,train_id` CSV. Ids not listed map to the
    /// ignore id. Blank lines and `#` comments are allowed.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(MODULE, path, e))?;
        let mut table = [DEFAULT_IGNORE_ID; 256];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split(',').map(str::trim);
            let (raw, train) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => (a, b),
                _ => {
                    return Err(Error::Format {
                        module: MODULE,
                        details: format!(
                            "{}:{}: expected `raw_id,train_id`",
                            path.display(),
                            lineno + 1
                        ),
                    });
                }
            };
            let raw: usize = raw.parse().map_err(|_| Error::Format {
                module: MODULE,
                details: format!("{}:{}: bad raw id {raw:?}", path.display(), lineno + 1),
            })?;
            let train: u32 = train.parse().map_err(|_| Error::Format {
                module: MODULE,
                details: format!("{}:{}: bad train id {train:?}", path.display(), lineno + 1),
            })?;
            if raw > 255 {
                return Err(Error::Format {
                    module: MODULE,
                    details: format!("{}:{}: raw id {raw} exceeds 255", path.display(), lineno + 1),
                });
            }
            table[raw] = train;
        }
        Ok(Self { table })
    }

    pub fn map(&self, raw: u32) -> u32 {
        if raw > 255 {
            DEFAULT_IGNORE_ID
        } else {
            self.table[raw as usize]
        }
    }
}

/// Apply a mapping to every pixel; unmapped ids come out as the ignore id.
pub fn remap_labels(raw: &Array2<u32>, mapping: &LabelMapping) -> Array2<u32> {
    raw.mapv(|id| mapping.map(id))
}

#[derive(Debug)]
struct DatasetEntry {
    stem: String,
    image: PathBuf,
    label: Option<PathBuf>,
}

/// An immutable handle over one dataset directory.
#[derive(Debug)]
pub struct Dataset {
    role: DatasetRole,
    entries: Vec<DatasetEntry>,
    mapping: Option<LabelMapping>,
}

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

impl Dataset {
    /// Scan `root`, pair images with labels by stem (labeled roles), and
    /// apply `mapping` to labels on load.
    pub fn load(root: &Path, mapping: Option<&Path>, role: DatasetRole) -> Result<Self> {
        let images_dir = root.join("images");
        let labels_dir = root.join("labels");
        let mut stems: Vec<(String, PathBuf)> = Vec::new();
        let rd = fs::read_dir(&images_dir).map_err(|e| Error::io(MODULE, &images_dir, e))?;
        for entry in rd {
            let entry = entry.map_err(|e| Error::io(MODULE, &images_dir, e))?;
            let path = entry.path();
            let ext_ok = path
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false);
            if !ext_ok {
                continue;
            }
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Data {
                    module: MODULE,
                    details: format!("unreadable file name under {}", images_dir.display()),
                })?
                .to_string();
            stems.push((stem, path));
        }
        stems.sort_by(|a, b| a.0.cmp(&b.0));
        if stems.is_empty() {
            return Err(Error::Data {
                module: MODULE,
                details: format!("no images found under {}", images_dir.display()),
            });
        }
        let mut entries = Vec::with_capacity(stems.len());
        for (stem, image) in stems {
            let label = if role.labeled() {
                let lp = labels_dir.join(format!("{stem}.png"));
                if !lp.is_file() {
                    return Err(Error::Data {
                        module: MODULE,
                        details: format!("no label for image stem {stem:?} under {}", labels_dir.display()),
                    });
                }
                Some(lp)
            } else {
                None
            };
            entries.push(DatasetEntry { stem, image, label });
        }
        let mapping = match mapping {
            Some(p) => Some(LabelMapping::from_csv(p)?),
            None => None,
        };
        Ok(Self { role, entries, mapping })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn role(&self) -> DatasetRole {
        self.role
    }

    pub fn stem(&self, i: usize) -> &str {
        &self.entries[i].stem
    }

    pub fn load_image(&self, i: usize) -> Result<Array3<f32>> {
        read_image(&self.entries[i].image)
    }

    /// Image plus remapped label grid.
    pub fn load_labeled(&self, i: usize) -> Result<LabeledSample> {
        let entry = &self.entries[i];
        let label_path = entry.label.as_ref().ok_or_else(|| Error::Data {
            module: MODULE,
            details: format!("dataset role has no labels (stem {:?})", entry.stem),
        })?;
        let image = read_image(&entry.image)?;
        let mut label = read_label(label_path)?;
        if let Some(m) = &self.mapping {
            label = remap_labels(&label, m);
        }
        if label.dim() != (image.dim().1, image.dim().2) {
            return Err(Error::Data {
                module: MODULE,
                details: format!(
                    "stem {:?}: label {:?} does not match image {:?}",
                    entry.stem,
                    label.dim(),
                    image.dim()
                ),
            });
        }
        LabeledSample::new(image, label)
    }
}

pub fn read_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data {
            module: MODULE,
            details: format!("{}: {e}", path.display()),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let raw = img.as_raw();
    Ok(Array3::from_shape_fn(
        (3, h as usize, w as usize),
        |(c, y, x)| raw[(y * w as usize + x) * 3 + c] as f32 / 255.0,
    ))
}

pub fn read_label(path: &Path) -> Result<Array2<u32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data {
            module: MODULE,
            details: format!("{}: {e}", path.display()),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let raw = img.as_raw();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        raw[y * w as usize + x] as u32
    }))
}

pub fn write_image(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Shape {
            module: MODULE,
            details: format!("expected 3 channels, got {c}"),
        });
    }
    let mut buf = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf[(y * w + x) * 3 + ch] =
                    (image[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized above");
    img.save(path).map_err(|e| Error::Data {
        module: MODULE,
        details: format!("{}: {e}", path.display()),
    })
}

pub fn write_label(path: &Path, label: &Array2<u32>) -> Result<()> {
    let (h, w) = label.dim();
    let mut buf = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let id = label[[y, x]];
            if id > 255 {
                return Err(Error::Data {
                    module: MODULE,
                    details: format!("label id {id} does not fit the one-byte id space"),
                });
            }
            buf[y * w + x] = id as u8;
        }
    }
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer sized above");
    img.save(path).map_err(|e| Error::Data {
        module: MODULE,
        details: format!("{}: {e}", path.display()),
    })
}

/// Scale-and-crop augmentation parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentCfg {
    pub scale_lo: f32,
    pub scale_hi: f32,
    pub crop: usize,
    pub ignore_id: u32,
}

impl Default for AugmentCfg {
    fn default() -> Self {
        Self {
            scale_lo: 0.5,
            scale_hi: 2.0,
            crop: 768,
            ignore_id: DEFAULT_IGNORE_ID,
        }
    }
}

impl AugmentCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_lo > 0.0 && self.scale_hi >= self.scale_lo) || self.crop == 0 {
            return Err(Error::Parameter {
                module: MODULE,
                details: format!(
                    "bad augmentation: scale [{}, {}], crop {}",
                    self.scale_lo, self.scale_hi, self.crop
                ),
            });
        }
        Ok(())
    }
}

/// Nearest-neighbor resample of an id grid (half-pixel centers, matching the
/// lattice used elsewhere for grid alignment).
pub fn nearest_resize_labels(label: &Array2<u32>, oh: usize, ow: usize) -> Array2<u32> {
    let (h, w) = label.dim();
    let rows = lattice_indices(h, oh);
    let cols = lattice_indices(w, ow);
    Array2::from_shape_fn((oh, ow), |(i, j)| label[[rows[i], cols[j]]])
}

/// Random scale (bilinear image, nearest label) followed by a synchronized
/// random crop. Short sides are padded — zeros for the image, ignore for the
/// label — so the output is always exactly `crop`².
pub fn augment(sample: &LabeledSample, rng: &mut ChaCha8Rng, cfg: &AugmentCfg) -> Result<LabeledSample> {
    cfg.validate()?;
    let (_, h, w) = sample.image.dim();
    let factor = rng.gen_range(cfg.scale_lo..=cfg.scale_hi);
    let sh = ((h as f64 * factor as f64).round() as usize).max(1);
    let sw = ((w as f64 * factor as f64).round() as usize).max(1);
    let (image, label) = if (sh, sw) == (h, w) {
        (sample.image.clone(), sample.label.clone())
    } else {
        (
            bilinear_resize(&sample.image, sh, sw),
            nearest_resize_labels(&sample.label, sh, sw),
        )
    };

    let crop = cfg.crop;
    let ph = sh.max(crop);
    let pw = sw.max(crop);
    let (image, label) = if (ph, pw) == (sh, sw) {
        (image, label)
    } else {
        let mut pi = Array3::<f32>::zeros((3, ph, pw));
        let mut pl = Array2::<u32>::from_elem((ph, pw), cfg.ignore_id);
        for c in 0..3 {
            for y in 0..sh {
                for x in 0..sw {
                    pi[[c, y, x]] = image[[c, y, x]];
                }
            }
        }
        for y in 0..sh {
            for x in 0..sw {
                pl[[y, x]] = label[[y, x]];
            }
        }
        (pi, pl)
    };

    let oy = rng.gen_range(0..=(ph - crop));
    let ox = rng.gen_range(0..=(pw - crop));
    let image = image
        .slice(ndarray::s![.., oy..oy + crop, ox..ox + crop])
        .to_owned();
    let label = label
        .slice(ndarray::s![oy..oy + crop, ox..ox + crop])
        .to_owned();
    // clamp away bilinear overshoot so the [0,1] invariant survives
    let image = image.mapv(|v| v.clamp(0.0, 1.0));
    LabeledSample::new(image, label)
}

/// Resize the short side to `crop`, then take a random `crop`² window.
pub fn wild_to_crop(image: &Array3<f32>, crop: usize, rng: &mut ChaCha8Rng) -> Result<Array3<f32>> {
    if crop == 0 {
        return Err(Error::Parameter {
            module: MODULE,
            details: "crop must be >= 1".into(),
        });
    }
    let (_, h, w) = image.dim();
    let scale = crop as f64 / h.min(w) as f64;
    let sh = ((h as f64 * scale).round() as usize).max(crop);
    let sw = ((w as f64 * scale).round() as usize).max(crop);
    let resized = if (sh, sw) == (h, w) {
        image.clone()
    } else {
        bilinear_resize(image, sh, sw)
    };
    let oy = rng.gen_range(0..=(sh - crop));
    let ox = rng.gen_range(0..=(sw - crop));
    Ok(resized
        .slice(ndarray::s![.., oy..oy + crop, ox..ox + crop])
        .mapv(|v| v.clamp(0.0, 1.0)))
}

/// Resumable cursor state of a [`PairSampler`].
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    pub src_epoch: u64,
    pub src_pos: usize,
    pub wild_epoch: u64,
    pub wild_pos: usize,
}

/// Independent reshuffled-epoch streams over the source and wild datasets;
/// the i-th draw from each stream forms the i-th pair.
#[derive(Debug, Clone)]
pub struct PairSampler {
    seed: u64,
    src_len: usize,
    wild_len: usize,
    src_order: Vec<usize>,
    wild_order: Vec<usize>,
    src_epoch: u64,
    src_pos: usize,
    wild_epoch: u64,
    wild_pos: usize,
}

fn epoch_order(seed: u64, tag: &str, epoch: u64, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, epoch, 0));
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Stable sub-seed derivation via hashing, so independent streams never
/// collide or correlate.
pub(crate) fn derive_seed(base: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

impl PairSampler {
    pub fn new(seed: u64, src_len: usize, wild_len: usize) -> Result<Self> {
        if src_len == 0 || wild_len == 0 {
            return Err(Error::Data {
                module: MODULE,
                details: "pair sampling needs non-empty source and wild datasets".into(),
            });
        }
        Ok(Self {
            seed,
            src_len,
            wild_len,
            src_order: epoch_order(seed, "src", 0, src_len),
            wild_order: epoch_order(seed, "wild", 0, wild_len),
            src_epoch: 0,
            src_pos: 0,
            wild_epoch: 0,
            wild_pos: 0,
        })
    }

    /// Next (source index, wild index) pair.
    pub fn next_pair(&mut self) -> (usize, usize) {
        if self.src_pos == self.src_order.len() {
            self.src_epoch += 1;
            self.src_order = epoch_order(self.seed, "src", self.src_epoch, self.src_len);
            self.src_pos = 0;
        }
        if self.wild_pos == self.wild_order.len() {
            self.wild_epoch += 1;
            self.wild_order = epoch_order(self.seed, "wild", self.wild_epoch, self.wild_len);
            self.wild_pos = 0;
        }
        let s = self.src_order[self.src_pos];
        let w = self.wild_order[self.wild_pos];
        self.src_pos += 1;
        self.wild_pos += 1;
        (s, w)
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            seed: self.seed,
            src_epoch: self.src_epoch,
            src_pos: self.src_pos,
            wild_epoch: self.wild_epoch,
            wild_pos: self.wild_pos,
        }
    }

    /// Rebuild the exact cursor position recorded by [`PairSampler::state`].
    pub fn from_state(state: &SamplerState, src_len: usize, wild_len: usize) -> Result<Self> {
        if src_len == 0 || wild_len == 0 {
            return Err(Error::Data {
                module: MODULE,
                details: "pair sampling needs non-empty source and wild datasets".into(),
            });
        }
        if state.src_pos > src_len || state.wild_pos > wild_len {
            return Err(Error::Data {
                module: MODULE,
                details: "sampler state cursor exceeds dataset size".into(),
            });
        }
        Ok(Self {
            seed: state.seed,
            src_len,
            wild_len,
            src_order: epoch_order(state.seed, "src", state.src_epoch, src_len),
            wild_order: epoch_order(state.seed, "wild", state.wild_epoch, wild_len),
            src_epoch: state.src_epoch,
            src_pos: state.src_pos,
            wild_epoch: state.wild_epoch,
            wild_pos: state.wild_pos,
        })
    }
}

/// Assemble one training batch of augmented source samples paired with
/// crop-matched wild images.
pub fn pair_batch(
    source: &Dataset,
    wild: &Dataset,
    sampler: &mut PairSampler,
    aug_rng: &mut ChaCha8Rng,
    cfg: &AugmentCfg,
    batch_size: usize,
) -> Result<Vec<(LabeledSample, WildSample)>> {
    if source.is_empty() || wild.is_empty() {
        return Err(Error::Data {
            module: MODULE,
            details: "pair sampling needs non-empty source and wild datasets".into(),
        });
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (si, wi) = sampler.next_pair();
        let labeled = augment(&source.load_labeled(si)?, aug_rng, cfg)?;
        let wild_img = wild_to_crop(&wild.load_image(wi)?, cfg.crop, aug_rng)?;
        out.push((labeled, WildSample { image: wild_img }));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic multi-domain toy generator
// ---------------------------------------------------------------------------

/// Class ids of the toy task.
pub const TOY_BACKGROUND: u32 = 0;
pub const TOY_CIRCLE: u32 = 1;
pub const TOY_RECTANGLE: u32 = 2;
pub const TOY_TRIANGLE: u32 = 3;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ToyConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub train_count: usize,
    pub eval_count: usize,
    pub wild_count: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            image_size: 96,
            train_count: 40,
            eval_count: 12,
            wild_count: 30,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 4 {
            return Err(Error::Parameter {
                module: MODULE,
                details: "the toy generator draws exactly 4 classes".into(),
            });
        }
        if self.image_size < 32 || self.image_size % 8 != 0 {
            return Err(Error::Parameter {
                module: MODULE,
                details: "toy image size must be a multiple of 8, at least 32".into(),
            });
        }
        if self.train_count == 0 || self.eval_count == 0 || self.wild_count == 0 {
            return Err(Error::Parameter {
                module: MODULE,
                details: "toy dataset sizes must be >= 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
    // wild-only novelties
    Ring,
    Cross,
}

struct Shape {
    kind: ShapeKind,
    cx: f32,
    cy: f32,
    a: f32,
    b: f32,
    /// triangle orientation 0..4 (up/right/down/left)
    orient: u8,
}

impl Shape {
    fn covers(&self, x: f32, y: f32) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.a * self.a,
            ShapeKind::Rectangle => dx.abs() <= self.a && dy.abs() <= self.b,
            ShapeKind::Triangle => {
                // isosceles with apex toward `orient`
                let (u, v) = match self.orient {
                    0 => (dx, dy),
                    1 => (dy, -dx),
                    2 => (dx, -dy),
                    _ => (dy, dx),
                };
                // apex at v = -b, base at v = +b
                let t = (v + self.b) / (2.0 * self.b);
                (0.0..=1.0).contains(&t) && u.abs() <= self.a * t
            }
            ShapeKind::Ring => {
                let r2 = dx * dx + dy * dy;
                r2 <= self.a * self.a && r2 >= self.b * self.b
            }
            ShapeKind::Cross => {
                (dx.abs() <= self.b && dy.abs() <= self.a)
                    || (dy.abs() <= self.b && dx.abs() <= self.a)
            }
        }
    }

    fn class(&self) -> u32 {
        match self.kind {
            ShapeKind::Circle => TOY_CIRCLE,
            ShapeKind::Rectangle => TOY_RECTANGLE,
            ShapeKind::Triangle => TOY_TRIANGLE,
            ShapeKind::Ring | ShapeKind::Cross => TOY_BACKGROUND,
        }
    }
}

/// A domain's rendering style: class palette, noise level, global color
/// cast. Contents (geometry) are shared across domains; styles are not.
struct DomainStyle {
    /// RGB fill per class id (background first).
    palette: [[f32; 3]; 4],
    noise: f32,
    gain: [f32; 3],
    bias: [f32; 3],
}

fn domain_style(name: &str) -> DomainStyle {
    // Domains share the class palette (content semantics are stable) but sit
    // under strong global photometric casts: per-channel affine transforms
    // far outside the source's per-image jitter. The transferable cue is
    // robustness to global channel statistics — the exact axis the
    // stylization hooks randomize during training.
    let palette = [
        [0.20, 0.25, 0.30],
        [0.85, 0.30, 0.25],
        [0.25, 0.75, 0.35],
        [0.90, 0.80, 0.30],
    ];
    match name {
        "source" => DomainStyle {
            palette,
            noise: 0.02,
            gain: [1.0, 1.0, 1.0],
            bias: [0.0, 0.0, 0.0],
        },
        // cool, dim, blue-lifted
        "unseen_b" => DomainStyle {
            palette,
            noise: 0.03,
            gain: [0.50, 0.60, 1.20],
            bias: [0.02, 0.04, 0.12],
        },
        // warm, bright, low-contrast
        "unseen_c" => DomainStyle {
            palette,
            noise: 0.04,
            gain: [0.50, 0.45, 0.40],
            bias: [0.45, 0.33, 0.18],
        },
        other => unreachable!("no style table for domain {other}"),
    }
}

fn sample_geometry(rng: &mut ChaCha8Rng, size: usize) -> Vec<Shape> {
    let n = rng.gen_range(2..=3);
    let lo = size as f32 * 0.18;
    let hi = size as f32 * 0.82;
    let smin = size as f32 * 0.10;
    let smax = size as f32 * 0.22;
    (0..n)
        .map(|_| {
            let kind = match rng.gen_range(0u8..3) {
                0 => ShapeKind::Circle,
                1 => ShapeKind::Rectangle,
                _ => ShapeKind::Triangle,
            };
            Shape {
                kind,
                cx: rng.gen_range(lo..=hi),
                cy: rng.gen_range(lo..=hi),
                a: rng.gen_range(smin..=smax),
                b: rng.gen_range(smin..=smax),
                orient: rng.gen_range(0u8..4),
            }
        })
        .collect()
}

fn rasterize_label(shapes: &[Shape], size: usize) -> Array2<u32> {
    Array2::from_shape_fn((size, size), |(y, x)| {
        let mut id = TOY_BACKGROUND;
        for s in shapes {
            if s.covers(x as f32 + 0.5, y as f32 + 0.5) {
                id = s.class();
            }
        }
        id
    })
}

/// Render shapes under a style; quantized to 8 bits so in-memory samples and
/// PNG round-trips agree bit for bit.
fn render(
    shapes: &[Shape],
    label: &Array2<u32>,
    style: &DomainStyle,
    rng: &mut ChaCha8Rng,
    size: usize,
) -> Array3<f32> {
    // small per-sample perturbations keep within-domain variety
    let jitter: Vec<[f32; 3]> = (0..4)
        .map(|_| {
            [
                rng.gen_range(-0.05f32..=0.05),
                rng.gen_range(-0.05f32..=0.05),
                rng.gen_range(-0.05f32..=0.05),
            ]
        })
        .collect();
    let grad = rng.gen_range(-0.05f32..=0.05);
    let mut img = Array3::<f32>::zeros((3, size, size));
    for y in 0..size {
        let shade = grad * (y as f32 / size as f32 - 0.5);
        for x in 0..size {
            let id = label[[y, x]] as usize;
            for c in 0..3 {
                let base = style.palette[id][c] + jitter[id][c] + shade;
                let noisy = base + rng.gen_range(-1.0f32..=1.0) * style.noise;
                let cast = noisy * style.gain[c] + style.bias[c];
                img[[c, y, x]] = quantize(cast);
            }
        }
    }
    let _ = shapes;
    img
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Unlabeled wild image: novel shapes under a random palette, so wild style
/// statistics range far beyond any single domain.
fn render_wild(rng: &mut ChaCha8Rng, size: usize) -> Array3<f32> {
    let n = rng.gen_range(2..=4);
    let lo = size as f32 * 0.15;
    let hi = size as f32 * 0.85;
    let shapes: Vec<Shape> = (0..n)
        .map(|_| {
            let kind = match rng.gen_range(0u8..5) {
                0 => ShapeKind::Circle,
                1 => ShapeKind::Rectangle,
                2 => ShapeKind::Triangle,
                3 => ShapeKind::Ring,
                _ => ShapeKind::Cross,
            };
            let a = rng.gen_range(size as f32 * 0.08..=size as f32 * 0.24);
            Shape {
                kind,
                cx: rng.gen_range(lo..=hi),
                cy: rng.gen_range(lo..=hi),
                a,
                b: match kind {
                    ShapeKind::Ring => a * rng.gen_range(0.4f32..=0.7),
                    ShapeKind::Cross => a * rng.gen_range(0.2f32..=0.4),
                    _ => rng.gen_range(size as f32 * 0.08..=size as f32 * 0.24),
                },
                orient: rng.gen_range(0u8..4),
            }
        })
        .collect();
    let bg: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let fills: Vec<[f32; 3]> = (0..shapes.len())
        .map(|_| [rng.gen(), rng.gen(), rng.gen()])
        .collect();
    let noise = rng.gen_range(0.0f32..=0.06);
    let mut img = Array3::<f32>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let mut color = bg;
            for (s, fill) in shapes.iter().zip(&fills) {
                if s.covers(x as f32 + 0.5, y as f32 + 0.5) {
                    color = *fill;
                }
            }
            for c in 0..3 {
                img[[c, y, x]] = quantize(color[c] + rng.gen_range(-1.0f32..=1.0) * noise);
            }
        }
    }
    img
}

/// Everything `synth_toy` materializes, as loadable handles.
pub struct ToySets {
    pub source_train: Dataset,
    pub source_eval: Dataset,
    /// (domain name, eval dataset) for the unseen domains.
    pub unseen: Vec<(String, Dataset)>,
    pub wild: Dataset,
}

/// Generate and write the full toy corpus under `root`:
/// `source/` (train), `source_eval/`, `unseen_b/`, `unseen_c/` (eval), and
/// `wild/` (unlabeled). Evaluation sets share geometry per index across
/// domains — only the style differs.
pub fn synth_toy(seed: u64, cfg: &ToyConfig, root: &Path) -> Result<ToySets> {
    cfg.validate()?;
    let size = cfg.image_size;

    let write_split = |name: &str, samples: &[(String, Array3<f32>, Array2<u32>)]| -> Result<()> {
        let dir = root.join(name);
        fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(MODULE, &dir, e))?;
        fs::create_dir_all(dir.join("labels")).map_err(|e| Error::io(MODULE, &dir, e))?;
        for (stem, image, label) in samples {
            write_image(&dir.join("images").join(format!("{stem}.png")), image)?;
            write_label(&dir.join("labels").join(format!("{stem}.png")), label)?;
        }
        Ok(())
    };

    // training split: source-domain geometry + style
    let mut train = Vec::with_capacity(cfg.train_count);
    for i in 0..cfg.train_count {
        let mut geo_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, "toy-train-geometry", i as u64, 0));
        let shapes = sample_geometry(&mut geo_rng, size);
        let label = rasterize_label(&shapes, size);
        let mut style_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, "toy-train-style", i as u64, 0));
        let image = render(&shapes, &label, &domain_style("source"), &mut style_rng, size);
        train.push((format!("train_{i:04}"), image, label));
    }
    write_split("source", &train)?;

    // evaluation splits: identical geometry per index, domain-specific style
    for (d, domain) in ["source_eval", "unseen_b", "unseen_c"].iter().enumerate() {
        let style_name = if *domain == "source_eval" { "source" } else { domain };
        let mut samples = Vec::with_capacity(cfg.eval_count);
        for i in 0..cfg.eval_count {
            let mut geo_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, "toy-eval-geometry", i as u64, 0));
            let shapes = sample_geometry(&mut geo_rng, size);
            let label = rasterize_label(&shapes, size);
            let mut style_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                "toy-eval-style",
                i as u64,
                d as u64,
            ));
            let image = render(&shapes, &label, &domain_style(style_name), &mut style_rng, size);
            samples.push((format!("eval_{i:04}"), image, label));
        }
        write_split(domain, &samples)?;
    }

    // wild split: unlabeled, novel shapes and palettes
    let wild_dir = root.join("wild");
    fs::create_dir_all(wild_dir.join("images")).map_err(|e| Error::io(MODULE, &wild_dir, e))?;
    for i in 0..cfg.wild_count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "toy-wild", i as u64, 0));
        let image = render_wild(&mut rng, size);
        write_image(
            &wild_dir.join("images").join(format!("wild_{i:04}.png")),
            &image,
        )?;
    }

    Ok(ToySets {
        source_train: Dataset::load(&root.join("source"), None, DatasetRole::Source)?,
        source_eval: Dataset::load(&root.join("source_eval"), None, DatasetRole::Eval)?,
        unseen: vec![
            (
                "unseen_b".to_string(),
                Dataset::load(&root.join("unseen_b"), None, DatasetRole::Eval)?,
            ),
            (
                "unseen_c".to_string(),
                Dataset::load(&root.join("unseen_c"), None, DatasetRole::Eval)?,
            ),
        ],
        wild: Dataset::load(&root.join("wild"), None, DatasetRole::Wild)?,
    })
}

/// SHA-256 over every file under `root` (relative path + contents), for
/// byte-level determinism checks.
pub fn tree_digest(root: &Path) -> Result<String> {
    let mut files: BTreeMap<String, PathBuf> = BTreeMap::new();
    collect_files(root, root, &mut files)?;
    let mut h = Sha256::new();
    for (rel, path) in files {
        h.update(rel.as_bytes());
        let bytes = fs::read(&path).map_err(|e| Error::io(MODULE, &path, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex_digest(&h.finalize()))
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, PathBuf>) -> Result<()> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(MODULE, dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(MODULE, dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .unwrap_or(&path)
                .to_string_lossy()
                .into_owned();
            out.insert(rel, path);
        }
    }
    Ok(())
}
