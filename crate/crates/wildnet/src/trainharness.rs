//! The optimization loop. Each iteration draws a batch of (source, wild)
//! pairs, runs the three-branch forward pass, refreshes the wild content
//! store, assembles the weighted objective, and applies one optimizer update
//! under a polynomial learning-rate schedule. Checkpoints carry the full
//! trainer state (parameters, optimizer buffers, store contents, RNG and
//! sampler cursors), so a resumed run continues the exact trajectory.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::datapipe::{
    augment, derive_seed, nearest_resize_labels, wild_to_crop, Dataset, DatasetRole, LabeledSample,
    PairSampler, SamplerState,
};
use crate::embed::{lattice_indices, uniform_subsample, ProjectedGrid};
use crate::error::{Error, Result};
use crate::evalreport::{evaluate_domains, EvalReport};
use crate::losses::{
    sce_with_grad, scr_from_logits_with_grad, seg_ce_from_logits_with_grad, softmax_probs,
    wce_with_grad, CelBatch, LossTerms,
};
use crate::netgraph::Assembly;
use crate::nn::Optimizer;
use crate::wilddict::ContentStore;

pub const MODULE: &str = "trainharness";

/// Column order of the per-step metrics log.
pub const LOG_HEADER: &str = "iter,lr,l_orig,l_sce,l_wce,l_sel,l_scr,total";
pub const LOG_FILE: &str = "loss_log.csv";
pub const FINAL_FULL: &str = "final_full.ckpt";
pub const FINAL_STRIPPED: &str = "final_model.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Polynomial decay: `base * (1 - iter/total)^power`. A zero-length schedule
/// has no optimization steps; its only use is labeling the initial
/// checkpoint, so it reports the base rate.
pub fn poly_lr(iter: u64, total: u64, base: f64, power: f64) -> Result<f64> {
    if iter > total {
        return Err(Error::Parameter {
            module: MODULE,
            details: format!("iteration {iter} lies beyond the {total}-step schedule"),
        });
    }
    if total == 0 {
        return Ok(base);
    }
    let keep = 1.0 - iter as f64 / total as f64;
    Ok(base * keep.powf(power))
}

/// Scalars logged for one completed step. `iter` is the zero-based index of
/// the step that produced it.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub iter: u64,
    pub lr: f64,
    pub terms: LossTerms,
}

impl StepRecord {
    /// One CSV row in [`LOG_HEADER`] order. Floats use the shortest
    /// round-trip form, so identical runs produce byte-identical logs.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter,
            self.lr,
            self.terms.l_orig,
            self.terms.l_sce,
            self.terms.l_wce,
            self.terms.l_sel,
            self.terms.l_scr,
            self.terms.total
        )
    }
}

/// Serialized trainer bookkeeping stored alongside the parameters in a full
/// checkpoint: everything beyond the network needed to resume exactly.
#[derive(serde::Serialize, serde::Deserialize)]
struct TrainerExtras {
    sampler: SamplerState,
    aug_word_pos: u128,
    optimizer_steps: u64,
    optimizer_buffers: Vec<(String, Vec<Vec<f32>>)>,
}

const EXTRA_STATE: &str = "trainer_state.json";
const EXTRA_STORE: &str = "store";

impl std::fmt::Debug for TrainState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainState")
            .field("iteration", &self.iteration)
            .field("digest", &self.digest)
            .field("store_len", &self.store.len())
            .finish_non_exhaustive()
    }
}

/// Live training state: network, optimizer, wild content store, data
/// cursors, and the augmentation RNG.
pub struct TrainState {
    cfg: RunConfig,
    digest: String,
    source: Dataset,
    wild: Dataset,
    assembly: Assembly,
    optimizer: Optimizer,
    store: ContentStore,
    sampler: PairSampler,
    aug_rng: ChaCha8Rng,
    iteration: u64,
}

impl TrainState {
    /// Fresh state at iteration 0. All randomness derives from
    /// `cfg.trainer.seed` through independent named streams.
    pub fn new(cfg: RunConfig, source: Dataset, wild: Dataset) -> Result<Self> {
        cfg.validate()?;
        check_roles(&source, &wild)?;
        let digest = cfg.digest();
        let seed = cfg.trainer.seed;
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", 0, 0));
        let assembly = Assembly::new(cfg.netgraph.clone(), &mut init_rng)?;
        let optimizer = Optimizer::new(cfg.trainer.optimizer_kind());
        let store = ContentStore::new(cfg.netgraph.proj_channels, cfg.wilddict.capacity)?;
        let sampler = PairSampler::new(derive_seed(seed, "pairs", 0, 0), source.len(), wild.len())?;
        let aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "augment", 0, 0));
        Ok(Self {
            cfg,
            digest,
            source,
            wild,
            assembly,
            optimizer,
            store,
            sampler,
            aug_rng,
            iteration: 0,
        })
    }

    /// Resume from a full checkpoint. The checkpoint must have been written
    /// under a configuration with the same digest; silently continuing a run
    /// under different settings would corrupt the trajectory.
    pub fn from_checkpoint(
        cfg: RunConfig,
        path: &Path,
        source: Dataset,
        wild: Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        check_roles(&source, &wild)?;
        let digest = cfg.digest();
        let (assembly, meta, extras) = Assembly::load_checkpoint(path)?;
        if meta.config_digest != digest {
            return Err(Error::Config(format!(
                "checkpoint {} was written under configuration digest {}, current is {}",
                path.display(),
                meta.config_digest,
                digest
            )));
        }
        let state_bytes = find_extra(&extras, EXTRA_STATE, path)?;
        let store_bytes = find_extra(&extras, EXTRA_STORE, path)?;
        let ts: TrainerExtras = serde_json::from_slice(state_bytes).map_err(|e| Error::Format {
            module: MODULE,
            details: format!("trainer state in {}: {e}", path.display()),
        })?;
        let store = ContentStore::from_bytes(store_bytes)?;
        let sampler = PairSampler::from_state(&ts.sampler, source.len(), wild.len())?;
        let mut aug_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.trainer.seed, "augment", 0, 0));
        aug_rng.set_word_pos(ts.aug_word_pos);
        let mut optimizer = Optimizer::new(cfg.trainer.optimizer_kind());
        optimizer.import_state(ts.optimizer_steps, ts.optimizer_buffers)?;
        Ok(Self {
            cfg,
            digest,
            source,
            wild,
            assembly,
            optimizer,
            store,
            sampler,
            aug_rng,
            iteration: meta.iteration,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ContentStore {
        &self.store
    }

    pub fn assembly(&self) -> &Assembly {
        &self.assembly
    }

    /// All parameter values flattened in the canonical visit order.
    pub fn param_vector(&mut self) -> Vec<f32> {
        let mut out = Vec::new();
        self.assembly
            .visit_params(&mut |_, values, _| out.extend_from_slice(values));
        out
    }

    /// Write a full checkpoint carrying the complete trainer state.
    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        let extras = vec![
            (
                EXTRA_STATE.to_string(),
                serde_json::to_vec(&TrainerExtras {
                    sampler: self.sampler.state(),
                    aug_word_pos: self.aug_rng.get_word_pos(),
                    optimizer_steps: self.optimizer.steps(),
                    optimizer_buffers: self.optimizer.export_state(&self.assembly.param_names()),
                })
                .expect("trainer state serializes"),
            ),
            (EXTRA_STORE.to_string(), self.store.to_bytes()),
        ];
        self.assembly
            .save_checkpoint(path, self.iteration, &self.digest, &extras)
    }

    /// One optimization step: draw a batch, run the branch passes, refresh
    /// the store, accumulate weighted gradients, and update the parameters
    /// once. Per-pair ordering inside the step: the wild projections are
    /// pushed into the store before that pair's contrastive terms query it.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let total = self.cfg.trainer.total_iters;
        let lr = poly_lr(
            self.iteration,
            total,
            self.cfg.trainer.effective_base_lr(),
            self.cfg.trainer.power,
        )?;
        let weights = self.cfg.losses.weights;
        let with_wild = weights.uses_stylized_branch();
        let batch = self.next_batch(with_wild)?;

        self.assembly.zero_grads();
        let mut sums = [0.0f64; 5];
        for (labeled, wild_img) in &batch {
            let vals = match wild_img {
                Some(w) => self.step_pair_full(labeled, w)?,
                None => self.step_pair_plain(labeled)?,
            };
            for (acc, v) in sums.iter_mut().zip(vals) {
                *acc += v / batch.len() as f64;
            }
        }
        let terms = LossTerms::compute(weights, sums[0], sums[1], sums[2], sums[3], sums[4]);
        if !terms.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter: self.iteration,
                l_orig: terms.l_orig,
                l_sce: terms.l_sce,
                l_wce: terms.l_wce,
                l_sel: terms.l_sel,
                l_scr: terms.l_scr,
            });
        }

        let lr_f32 = lr as f32;
        let optimizer = &mut self.optimizer;
        let mut update_err: Option<Error> = None;
        self.assembly.visit_params(&mut |name, values, grads| {
            if update_err.is_none() {
                if let Err(e) = optimizer.update(name, lr_f32, values, grads) {
                    update_err = Some(e);
                }
            }
        });
        if let Some(e) = update_err {
            return Err(e);
        }
        optimizer.end_step();

        let record = StepRecord {
            iter: self.iteration,
            lr,
            terms,
        };
        self.iteration += 1;
        Ok(record)
    }

    /// Assemble the next batch. When the stylized branch is inactive the
    /// wild images are neither loaded nor cropped, so a plain-objective run
    /// is completely independent of the wild corpus contents.
    fn next_batch(&mut self, with_wild: bool) -> Result<Vec<(LabeledSample, Option<Array3<f32>>)>> {
        let aug = self.cfg.augment_cfg();
        let mut out = Vec::with_capacity(self.cfg.trainer.batch_size);
        for _ in 0..self.cfg.trainer.batch_size {
            let (si, wi) = self.sampler.next_pair();
            let labeled = augment(&self.source.load_labeled(si)?, &mut self.aug_rng, &aug)?;
            let wild_img = if with_wild {
                Some(wild_to_crop(
                    &self.wild.load_image(wi)?,
                    aug.crop,
                    &mut self.aug_rng,
                )?)
            } else {
                None
            };
            out.push((labeled, wild_img));
        }
        Ok(out)
    }

    /// Full three-branch pass for one pair. Returns the raw (unweighted)
    /// per-pair term values `[orig, sce, wce, sel, scr]`; gradients are
    /// accumulated scaled by `weight / batch_size`, and a term with zero
    /// weight is neither evaluated (beyond the always-logged `orig`) nor
    /// allowed to contribute gradient.
    fn step_pair_full(&mut self, sample: &LabeledSample, wild_img: &Array3<f32>) -> Result<[f64; 5]> {
        let weights = self.cfg.losses.weights;
        let ignore = self.cfg.losses.ignore_id;
        let inv_b = 1.0 / self.cfg.trainer.batch_size as f32;
        let mut vals = [0.0f64; 5];

        let pass = self.assembly.forward_training(&sample.image, wild_img)?;

        // store refresh precedes any contrastive query for this pair
        let sg = self.cfg.embed.store_grid;
        let wild_sub = uniform_subsample(&pass.proj_wild, sg, sg)?;
        self.store.push(&grid_columns(&wild_sub))?;

        let (ml_orig, d_orig) = seg_ce_from_logits_with_grad(&pass.src.logits, &sample.label, ignore)?;
        vals[0] = ml_orig.value;

        let mut d_src_proj: Option<Array3<f32>> = None;
        let mut d_sty_proj: Option<Array3<f32>> = None;
        if weights.cel > 0.0 {
            let ag = self.cfg.embed.anchor_grid;
            let (ph, pw) = (pass.src.proj.height(), pass.src.proj.width());
            let anchors = uniform_subsample(&pass.src.proj, ag, ag)?;
            let positives = uniform_subsample(&pass.stylized.proj, ag, ag)?;
            let labels = anchor_labels(&sample.label, ph, pw, ag);
            let cel_batch = CelBatch::new(anchors, positives, labels, self.cfg.losses.tau, ignore)?;
            let (ml_sce, g_sce) = sce_with_grad(&cel_batch);
            let (ml_wce, g_wce) = wce_with_grad(&cel_batch, &self.store)?;
            vals[1] = ml_sce.value;
            vals[2] = ml_wce.value;

            let map = cel_batch
                .anchors()
                .index_map()
                .expect("lattice subsample records its source positions");
            let scale = weights.cel * inv_b;
            let dims = pass.src.proj.values().dim();
            let mut da = Array3::<f32>::zeros(dims);
            scatter_scaled(&mut da, &g_sce.d_anchors, map, scale);
            scatter_scaled(&mut da, &g_wce.d_anchors, map, scale);
            d_src_proj = Some(da);
            let mut dp = Array3::<f32>::zeros(dims);
            scatter_scaled(&mut dp, &g_sce.d_positives, map, scale);
            scatter_scaled(&mut dp, &g_wce.d_positives, map, scale);
            d_sty_proj = Some(dp);
        }

        let mut d_sty_logits: Option<Array3<f32>> = None;
        if weights.sel > 0.0 {
            let (ml_sel, d_sel) =
                seg_ce_from_logits_with_grad(&pass.stylized.logits, &sample.label, ignore)?;
            vals[3] = ml_sel.value;
            add_scaled(&mut d_sty_logits, &d_sel, weights.sel * inv_b);
        }
        if weights.scr > 0.0 {
            // the plain-branch prediction is the held-fixed target, so this
            // term backpropagates into the stylized branch only
            let p_src = softmax_probs(&pass.src.logits)?;
            let (v_scr, d_scr) = scr_from_logits_with_grad(&p_src, &pass.stylized.logits)?;
            vals[4] = v_scr;
            add_scaled(&mut d_sty_logits, &d_scr, weights.scr * inv_b);
        }

        let d_src_logits = (weights.orig > 0.0).then(|| scaled(&d_orig, weights.orig * inv_b));
        if d_src_logits.is_some() || d_src_proj.is_some() {
            self.assembly
                .backward_branch(pass.src_ctx, d_src_logits.as_ref(), d_src_proj.as_ref());
        }
        if d_sty_logits.is_some() || d_sty_proj.is_some() {
            self.assembly
                .backward_branch(pass.stylized_ctx, d_sty_logits.as_ref(), d_sty_proj.as_ref());
        }
        Ok(vals)
    }

    /// Plain-objective pass: source branch and segmentation term only.
    fn step_pair_plain(&mut self, sample: &LabeledSample) -> Result<[f64; 5]> {
        let weights = self.cfg.losses.weights;
        let ignore = self.cfg.losses.ignore_id;
        let inv_b = 1.0 / self.cfg.trainer.batch_size as f32;
        let (out, ctx) = self.assembly.forward_plain(&sample.image)?;
        let (ml, d_orig) = seg_ce_from_logits_with_grad(&out.logits, &sample.label, ignore)?;
        if weights.orig > 0.0 {
            let d = scaled(&d_orig, weights.orig * inv_b);
            self.assembly.backward_branch(ctx, Some(&d), None);
        }
        Ok([ml.value, 0.0, 0.0, 0.0, 0.0])
    }
}

fn check_roles(source: &Dataset, wild: &Dataset) -> Result<()> {
    if !source.role().labeled() {
        return Err(Error::Data {
            module: MODULE,
            details: "training needs a labeled source dataset".into(),
        });
    }
    if wild.role() != DatasetRole::Wild {
        return Err(Error::Data {
            module: MODULE,
            details: "the style corpus must be loaded with the wild role".into(),
        });
    }
    Ok(())
}

fn find_extra<'a>(
    extras: &'a [(String, Vec<u8>)],
    name: &str,
    path: &Path,
) -> Result<&'a [u8]> {
    extras
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, b)| b.as_slice())
        .ok_or_else(|| Error::Format {
            module: MODULE,
            details: format!(
                "checkpoint {} has no {name} section; was it written by the trainer?",
                path.display()
            ),
        })
}

/// Class ids of the label pixels each projection-lattice anchor represents:
/// the label map is first reduced to the projection resolution, then read at
/// the same lattice positions the anchor subsample keeps.
fn anchor_labels(label: &Array2<u32>, ph: usize, pw: usize, ag: usize) -> Array2<u32> {
    let at_proj = nearest_resize_labels(label, ph, pw);
    let rows = lattice_indices(ph, ag);
    let cols = lattice_indices(pw, ag);
    let mut out = Array2::<u32>::zeros((ag, ag));
    for (i, &r) in rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            out[[i, j]] = at_proj[[r, c]];
        }
    }
    out
}

/// Store columns of a subsampled embedding grid: pixels row-major, each a
/// `dim`-length unit vector.
fn grid_columns(grid: &ProjectedGrid) -> Vec<f32> {
    let (c, h, w) = grid.values().dim();
    let mut out = Vec::with_capacity(c * h * w);
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                out.push(grid.values()[[ch, row, col]]);
            }
        }
    }
    out
}

/// Scatter a subsampled-grid gradient back onto the full grid through the
/// recorded lattice positions, scaling on the way.
fn scatter_scaled(
    acc: &mut Array3<f32>,
    d_sub: &Array3<f32>,
    map: &[(usize, usize)],
    scale: f32,
) {
    let (c, _, ow) = d_sub.dim();
    for (k, &(row, col)) in map.iter().enumerate() {
        let (sr, sc) = (k / ow, k % ow);
        for ch in 0..c {
            acc[[ch, row, col]] += d_sub[[ch, sr, sc]] * scale;
        }
    }
}

fn scaled(d: &Array3<f32>, scale: f32) -> Array3<f32> {
    d.mapv(|v| v * scale)
}

fn add_scaled(acc: &mut Option<Array3<f32>>, d: &Array3<f32>, scale: f32) {
    match acc {
        Some(a) => *a += &scaled(d, scale),
        None => *acc = Some(scaled(d, scale)),
    }
}

/// Artifacts of one completed [`run_training`] call.
#[derive(Debug)]
pub struct RunArtifacts {
    pub records: Vec<StepRecord>,
    pub log_path: PathBuf,
    pub final_full: PathBuf,
    pub final_stripped: PathBuf,
    pub eval: Option<EvalReport>,
}

/// Drive the state to `total_iters`, logging every step, checkpointing every
/// `checkpoint_every` steps, and finishing with a full checkpoint, a
/// stripped inference checkpoint, and (optionally) an evaluation report over
/// the supplied domains. Safe to call on a resumed state: the log appends
/// and the remaining steps run.
pub fn run_training(
    state: &mut TrainState,
    out_dir: &Path,
    eval_sets: &[(String, Dataset)],
) -> Result<RunArtifacts> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(MODULE, out_dir, e))?;
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(MODULE, &ckpt_dir, e))?;

    let log_path = out_dir.join(LOG_FILE);
    let fresh = !log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(MODULE, &log_path, e))?;
    let mut log = BufWriter::new(file);
    if fresh {
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(MODULE, &log_path, e))?;
    }

    let total = state.cfg.trainer.total_iters;
    let every = state.cfg.trainer.checkpoint_every;
    let mut records = Vec::new();
    while state.iteration < total {
        let record = state.train_step()?;
        writeln!(log, "{}", record.csv_line()).map_err(|e| Error::io(MODULE, &log_path, e))?;
        records.push(record);
        if every > 0 && state.iteration % every == 0 && state.iteration < total {
            let name = format!("iter_{:07}.ckpt", state.iteration);
            state.save_checkpoint(&ckpt_dir.join(name))?;
        }
    }
    log.flush().map_err(|e| Error::io(MODULE, &log_path, e))?;

    let final_full = out_dir.join(FINAL_FULL);
    state.save_checkpoint(&final_full)?;
    let stripped = state.assembly.strip_for_inference();
    let final_stripped = out_dir.join(FINAL_STRIPPED);
    stripped.save_checkpoint(&final_stripped, state.iteration, &state.digest)?;

    let eval = if state.cfg.trainer.eval_at_end && !eval_sets.is_empty() {
        let sets: Vec<(String, &Dataset)> = eval_sets
            .iter()
            .map(|(name, ds)| (name.clone(), ds))
            .collect();
        let report = evaluate_domains(&stripped, &sets, self_ignore(state))?;
        report.write(out_dir)?;
        Some(report)
    } else {
        None
    };

    Ok(RunArtifacts {
        records,
        log_path,
        final_full,
        final_stripped,
        eval,
    })
}

fn self_ignore(state: &TrainState) -> u32 {
    state.cfg.losses.ignore_id
}
