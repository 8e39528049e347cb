//! Layered run configuration: documented defaults, then a sectioned
//! `key = value` file, then repeatable `--set section.key=value` overrides.
//! Sections are named after the modules they configure. Unknown keys are
//! rejected, and the resolved configuration has a canonical dump (sorted,
//! normalized) whose SHA-256 digest identifies the run.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::datapipe::ToyConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::netgraph::NetConfig;
use crate::nn::{AdamConfig, OptimizerKind, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

/// Optimization-loop settings (defaults follow the full-scale recipe).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainerCfg {
    pub base_lr: f64,
    pub power: f64,
    pub total_iters: u64,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub momentum: f32,
    pub seed: u64,
    pub optimizer: OptimizerChoice,
    /// Learning rate used when `optimizer = adam`.
    pub adam_lr: f64,
    pub checkpoint_every: u64,
    pub eval_at_end: bool,
}

impl TrainerCfg {
    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Sgd => OptimizerKind::Sgd(SgdConfig {
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            }),
            OptimizerChoice::Adam => OptimizerKind::Adam(AdamConfig {
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            }),
        }
    }

    /// The schedule's base learning rate for the selected optimizer.
    pub fn effective_base_lr(&self) -> f64 {
        match self.optimizer {
            OptimizerChoice::Sgd => self.base_lr,
            OptimizerChoice::Adam => self.adam_lr,
        }
    }
}

impl Default for TrainerCfg {
    fn default() -> Self {
        Self {
            base_lr: 2.5e-3,
            power: 0.9,
            total_iters: 60_000,
            batch_size: 8,
            weight_decay: 5e-4,
            momentum: 0.9,
            seed: 0,
            optimizer: OptimizerChoice::Sgd,
            adam_lr: 1e-5,
            checkpoint_every: 1000,
            eval_at_end: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossCfg {
    pub tau: f32,
    pub weights: LossWeights,
    pub ignore_id: u32,
}

impl Default for LossCfg {
    fn default() -> Self {
        Self {
            tau: crate::losses::DEFAULT_TAU,
            weights: LossWeights::default(),
            ignore_id: crate::losses::DEFAULT_IGNORE_ID,
        }
    }
}

/// Embedding-grid subsampling resolutions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EmbedCfg {
    pub anchor_grid: usize,
    pub store_grid: usize,
}

impl Default for EmbedCfg {
    fn default() -> Self {
        Self {
            anchor_grid: 64,
            store_grid: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StoreCfg {
    pub capacity: usize,
}

impl Default for StoreCfg {
    fn default() -> Self {
        // 192 iterations of batch 8 × 16² pushes
        Self { capacity: 393_216 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DataCfg {
    pub source_root: String,
    pub wild_root: String,
    /// `name=path` per evaluation domain, preserved in order.
    pub eval: Vec<(String, String)>,
    pub mapping: Option<String>,
    pub crop: usize,
    pub scale_lo: f32,
    pub scale_hi: f32,
    pub toy: ToyConfig,
}

impl Default for DataCfg {
    fn default() -> Self {
        Self {
            source_root: String::new(),
            wild_root: String::new(),
            eval: Vec::new(),
            mapping: None,
            crop: 768,
            scale_lo: 0.5,
            scale_hi: 2.0,
            toy: ToyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub trainer: TrainerCfg,
    pub losses: LossCfg,
    pub embed: EmbedCfg,
    pub wilddict: StoreCfg,
    pub netgraph: NetConfig,
    pub datapipe: DataCfg,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| bad(format!("{section}.{key}: cannot parse {value:?}")))
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(bad(format!("{section}.{key}: expected a boolean, got {other:?}"))),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

impl RunConfig {
    /// Defaults, then the file, validated at the end by the caller.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text =
            fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(bad(format!(
                    "{}:{}: expected `key = value`, got {line:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            if section.is_empty() {
                return Err(bad(format!(
                    "{}:{}: key {key:?} appears before any [section]",
                    path.display(),
                    lineno + 1
                )));
            }
            self.set(&section, key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply one `section.key=value` override.
    pub fn apply_set(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| bad(format!("--set expects section.key=value, got {spec:?}")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| bad(format!("--set key must be section.key, got {path:?}")))?;
        self.set(section.trim(), key.trim(), value.trim())
    }

    /// The single authority on addressable keys.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("trainer", "base_lr") => self.trainer.base_lr = parse_num(section, key, value)?,
            ("trainer", "power") => self.trainer.power = parse_num(section, key, value)?,
            ("trainer", "total_iters") => self.trainer.total_iters = parse_num(section, key, value)?,
            ("trainer", "batch_size") => self.trainer.batch_size = parse_num(section, key, value)?,
            ("trainer", "weight_decay") => self.trainer.weight_decay = parse_num(section, key, value)?,
            ("trainer", "momentum") => self.trainer.momentum = parse_num(section, key, value)?,
            ("trainer", "seed") => self.trainer.seed = parse_num(section, key, value)?,
            ("trainer", "optimizer") => {
                self.trainer.optimizer = match value {
                    "sgd" => OptimizerChoice::Sgd,
                    "adam" => OptimizerChoice::Adam,
                    other => return Err(bad(format!("trainer.optimizer: unknown kind {other:?}"))),
                }
            }
            ("trainer", "adam_lr") => self.trainer.adam_lr = parse_num(section, key, value)?,
            ("trainer", "checkpoint_every") => {
                self.trainer.checkpoint_every = parse_num(section, key, value)?
            }
            ("trainer", "eval_at_end") => self.trainer.eval_at_end = parse_bool(section, key, value)?,

            ("losses", "tau") => self.losses.tau = parse_num(section, key, value)?,
            ("losses", "w_orig") => self.losses.weights.orig = parse_num(section, key, value)?,
            ("losses", "w_cel") => self.losses.weights.cel = parse_num(section, key, value)?,
            ("losses", "w_sel") => self.losses.weights.sel = parse_num(section, key, value)?,
            ("losses", "w_scr") => self.losses.weights.scr = parse_num(section, key, value)?,
            ("losses", "ignore_id") => self.losses.ignore_id = parse_num(section, key, value)?,

            ("embed", "anchor_grid") => self.embed.anchor_grid = parse_num(section, key, value)?,
            ("embed", "store_grid") => self.embed.store_grid = parse_num(section, key, value)?,

            ("wilddict", "capacity") => self.wilddict.capacity = parse_num(section, key, value)?,

            ("netgraph", "in_channels") => self.netgraph.in_channels = parse_num(section, key, value)?,
            ("netgraph", "base_channels") => {
                self.netgraph.base_channels = parse_num(section, key, value)?
            }
            ("netgraph", "num_classes") => self.netgraph.num_classes = parse_num(section, key, value)?,
            ("netgraph", "proj_channels") => {
                self.netgraph.proj_channels = parse_num(section, key, value)?
            }
            ("netgraph", "fs_hooks") => self.netgraph.fs_hooks = parse_list(value),
            ("netgraph", "max_fs_depth") => self.netgraph.max_fs_depth = parse_num(section, key, value)?,
            ("netgraph", "fs_eps") => self.netgraph.fs_eps = parse_num(section, key, value)?,
            ("netgraph", "norm_eps") => self.netgraph.norm_eps = parse_num(section, key, value)?,

            ("datapipe", "source_root") => self.datapipe.source_root = value.to_string(),
            ("datapipe", "wild_root") => self.datapipe.wild_root = value.to_string(),
            ("datapipe", "eval") => {
                let mut eval = Vec::new();
                for item in parse_list(value) {
                    let (name, path) = item.split_once('=').ok_or_else(|| {
                        bad(format!("datapipe.eval entries are name=path, got {item:?}"))
                    })?;
                    eval.push((name.trim().to_string(), path.trim().to_string()));
                }
                self.datapipe.eval = eval;
            }
            ("datapipe", "mapping") => {
                self.datapipe.mapping = if value.is_empty() {
                    None
                } else {
                    Some(value.to_string())
                }
            }
            ("datapipe", "crop") => self.datapipe.crop = parse_num(section, key, value)?,
            ("datapipe", "scale_lo") => self.datapipe.scale_lo = parse_num(section, key, value)?,
            ("datapipe", "scale_hi") => self.datapipe.scale_hi = parse_num(section, key, value)?,
            ("datapipe", "toy_image_size") => {
                self.datapipe.toy.image_size = parse_num(section, key, value)?
            }
            ("datapipe", "toy_train_count") => {
                self.datapipe.toy.train_count = parse_num(section, key, value)?
            }
            ("datapipe", "toy_eval_count") => {
                self.datapipe.toy.eval_count = parse_num(section, key, value)?
            }
            ("datapipe", "toy_wild_count") => {
                self.datapipe.toy.wild_count = parse_num(section, key, value)?
            }

            _ => return Err(bad(format!("unknown config key {section}.{key}"))),
        }
        Ok(())
    }

    /// Canonical dump: fixed section order, fixed key order, normalized
    /// value formatting. `parse(dump()) == self`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let t = &self.trainer;
        out.push_str("[trainer]\n");
        out.push_str(&format!("adam_lr = {}\n", t.adam_lr));
        out.push_str(&format!("base_lr = {}\n", t.base_lr));
        out.push_str(&format!("batch_size = {}\n", t.batch_size));
        out.push_str(&format!("checkpoint_every = {}\n", t.checkpoint_every));
        out.push_str(&format!("eval_at_end = {}\n", t.eval_at_end));
        out.push_str(&format!("momentum = {}\n", t.momentum));
        out.push_str(&format!(
            "optimizer = {}\n",
            match t.optimizer {
                OptimizerChoice::Sgd => "sgd",
                OptimizerChoice::Adam => "adam",
            }
        ));
        out.push_str(&format!("power = {}\n", t.power));
        out.push_str(&format!("seed = {}\n", t.seed));
        out.push_str(&format!("total_iters = {}\n", t.total_iters));
        out.push_str(&format!("weight_decay = {}\n", t.weight_decay));

        let l = &self.losses;
        out.push_str("\n[losses]\n");
        out.push_str(&format!("ignore_id = {}\n", l.ignore_id));
        out.push_str(&format!("tau = {}\n", l.tau));
        out.push_str(&format!("w_cel = {}\n", l.weights.cel));
        out.push_str(&format!("w_orig = {}\n", l.weights.orig));
        out.push_str(&format!("w_scr = {}\n", l.weights.scr));
        out.push_str(&format!("w_sel = {}\n", l.weights.sel));

        out.push_str("\n[embed]\n");
        out.push_str(&format!("anchor_grid = {}\n", self.embed.anchor_grid));
        out.push_str(&format!("store_grid = {}\n", self.embed.store_grid));

        out.push_str("\n[wilddict]\n");
        out.push_str(&format!("capacity = {}\n", self.wilddict.capacity));

        let n = &self.netgraph;
        out.push_str("\n[netgraph]\n");
        out.push_str(&format!("base_channels = {}\n", n.base_channels));
        out.push_str(&format!("fs_eps = {}\n", n.fs_eps));
        out.push_str(&format!("fs_hooks = {}\n", n.fs_hooks.join(",")));
        out.push_str(&format!("in_channels = {}\n", n.in_channels));
        out.push_str(&format!("max_fs_depth = {}\n", n.max_fs_depth));
        out.push_str(&format!("norm_eps = {}\n", n.norm_eps));
        out.push_str(&format!("num_classes = {}\n", n.num_classes));
        out.push_str(&format!("proj_channels = {}\n", n.proj_channels));

        let d = &self.datapipe;
        out.push_str("\n[datapipe]\n");
        out.push_str(&format!("crop = {}\n", d.crop));
        out.push_str(&format!(
            "eval = {}\n",
            d.eval
                .iter()
                .map(|(n, p)| format!("{n}={p}"))
                .collect::<Vec<_>>()
                .join(",")
        ));
        out.push_str(&format!("mapping = {}\n", d.mapping.clone().unwrap_or_default()));
        out.push_str(&format!("scale_hi = {}\n", d.scale_hi));
        out.push_str(&format!("scale_lo = {}\n", d.scale_lo));
        out.push_str(&format!("source_root = {}\n", d.source_root));
        out.push_str(&format!("toy_eval_count = {}\n", d.toy.eval_count));
        out.push_str(&format!("toy_image_size = {}\n", d.toy.image_size));
        out.push_str(&format!("toy_train_count = {}\n", d.toy.train_count));
        out.push_str(&format!("toy_wild_count = {}\n", d.toy.wild_count));
        out.push_str(&format!("wild_root = {}\n", d.wild_root));
        out
    }

    /// SHA-256 of the canonical dump.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.dump().as_bytes());
        crate::datapipe::hex_digest(&h.finalize())
    }

    /// Cross-field validation; individual modules re-validate on use.
    pub fn validate(&self) -> Result<()> {
        let t = &self.trainer;
        if t.batch_size == 0 {
            return Err(bad("trainer.batch_size must be >= 1"));
        }
        if !(t.base_lr > 0.0) || !(t.adam_lr > 0.0) {
            return Err(bad("learning rates must be positive"));
        }
        if !(t.power > 0.0) {
            return Err(bad("trainer.power must be positive"));
        }
        if !(self.losses.tau > 0.0) {
            return Err(bad("losses.tau must be positive"));
        }
        self.losses
            .weights
            .validate()
            .map_err(|e| bad(format!("losses weights: {e}")))?;
        if self.embed.anchor_grid == 0 || self.embed.store_grid == 0 {
            return Err(bad("embed grids must be >= 1"));
        }
        if self.embed.anchor_grid < self.embed.store_grid {
            return Err(bad("embed.anchor_grid must be >= embed.store_grid"));
        }
        if self.wilddict.capacity == 0 {
            return Err(bad("wilddict.capacity must be >= 1"));
        }
        if self.wilddict.capacity < self.embed.store_grid * self.embed.store_grid {
            return Err(bad(format!(
                "wilddict.capacity {} cannot hold one {}x{} store push",
                self.wilddict.capacity, self.embed.store_grid, self.embed.store_grid
            )));
        }
        self.netgraph
            .validate()
            .map_err(|e| bad(format!("netgraph: {e}")))?;
        if self.datapipe.crop % 8 != 0 || self.datapipe.crop < 8 {
            return Err(bad("datapipe.crop must be a positive multiple of 8"));
        }
        if !(self.datapipe.scale_lo > 0.0 && self.datapipe.scale_hi >= self.datapipe.scale_lo) {
            return Err(bad("datapipe scale range is invalid"));
        }
        let proj_side = self.datapipe.crop / 4;
        if self.embed.anchor_grid > proj_side {
            return Err(bad(format!(
                "embed.anchor_grid {} exceeds the {proj_side}-pixel projection grid for crop {}",
                self.embed.anchor_grid, self.datapipe.crop
            )));
        }
        Ok(())
    }

    pub fn augment_cfg(&self) -> crate::datapipe::AugmentCfg {
        crate::datapipe::AugmentCfg {
            scale_lo: self.datapipe.scale_lo,
            scale_hi: self.datapipe.scale_hi,
            crop: self.datapipe.crop,
            ignore_id: self.losses.ignore_id,
        }
    }
}
