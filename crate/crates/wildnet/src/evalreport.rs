//! Per-domain mIoU evaluation and multi-domain reporting: confusion
//! accumulation, IoU with zero-denominator exclusion, and CSV/JSON report
//! emission for a list of named evaluation domains.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::datapipe::Dataset;
use crate::error::{Error, Result};
use crate::netgraph::InferenceModel;

pub const MODULE: &str = "evalreport";

/// Published full-scale figures for this method family (ResNet-50 backbone,
/// 60K-iteration schedule). Desk-scale runs cannot reproduce them; reports
/// carry them as context next to the directional results.
pub const FULL_SCALE_REFERENCE_MIOU_G_TO_C: f64 = 44.62;
pub const FULL_SCALE_REFERENCE_AVG: f64 = 46.33;

pub fn reference_claim() -> serde_json::Value {
    serde_json::json!({
        "backbone": "resnet50",
        "miou_gtav_to_cityscapes": FULL_SCALE_REFERENCE_MIOU_G_TO_C,
        "avg_unseen_miou": FULL_SCALE_REFERENCE_AVG,
        "desk_reproducible": false,
        "note": "full-scale reference figures; desk-scale validation is directional",
    })
}

/// Row-indexed-by-ground-truth confusion counts plus the ignored-pixel tally.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Parameter {
                module: MODULE,
                details: "confusion matrix needs at least one class".into(),
            });
        }
        Ok(Self {
            counts: Array2::zeros((num_classes, num_classes)),
            ignored: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.dim().0
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn total_counted(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Element-wise merge of an independently accumulated shard.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.counts.dim() != other.counts.dim() {
            return Err(Error::Shape {
                module: MODULE,
                details: format!(
                    "cannot merge {}x{0} and {}x{1} confusion matrices",
                    self.num_classes(),
                    other.num_classes()
                ),
            });
        }
        self.counts += &other.counts;
        self.ignored += other.ignored;
        Ok(())
    }
}

/// Accumulate one prediction/ground-truth grid pair. Pixels whose ground
/// truth is `ignore_id` are tallied separately and never counted.
pub fn confusion_update(
    cm: &mut ConfusionMatrix,
    pred: &Array2<u32>,
    gt: &Array2<u32>,
    ignore_id: u32,
) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape {
            module: MODULE,
            details: format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim()),
        });
    }
    let k = cm.num_classes() as u32;
    for (p, g) in pred.iter().zip(gt.iter()) {
        if *g == ignore_id {
            cm.ignored += 1;
            continue;
        }
        if *g >= k || *p >= k {
            return Err(Error::Data {
                module: MODULE,
                details: format!("class id out of range: gt {g}, pred {p}, classes {k}"),
            });
        }
        cm.counts[[*g as usize, *p as usize]] += 1;
    }
    Ok(())
}

/// Per-class IoU (None when the class appears in neither grids) and the mean
/// over present classes (None when no class is present at all).
#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

pub fn miou(cm: &ConfusionMatrix) -> MiouReport {
    let k = cm.num_classes();
    let mut per_class = Vec::with_capacity(k);
    let mut sum = 0.0f64;
    let mut present = 0usize;
    for c in 0..k {
        let tp = cm.counts[[c, c]];
        let fp: u64 = (0..k).filter(|&g| g != c).map(|g| cm.counts[[g, c]]).sum();
        let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.counts[[c, p]]).sum();
        let denom = tp + fp + fn_;
        if denom == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            present += 1;
        }
    }
    let mean = if present == 0 { None } else { Some(sum / present as f64) };
    MiouReport { per_class, mean }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainResult {
    pub name: String,
    pub miou: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub pixels: u64,
    pub ignored: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub domains: Vec<DomainResult>,
    /// Unweighted mean over domains with a defined metric.
    pub avg: Option<f64>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn domain(&self, name: &str) -> Option<&DomainResult> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn to_csv(&self) -> String {
        let k = self
            .domains
            .iter()
            .map(|d| d.per_class.len())
            .max()
            .unwrap_or(0);
        let mut out = String::from("domain,miou");
        for c in 0..k {
            out.push_str(&format!(",iou_class_{c}"));
        }
        out.push('\n');
        for d in &self.domains {
            out.push_str(&d.name);
            out.push(',');
            out.push_str(&fmt_opt(d.miou));
            for c in 0..k {
                out.push(',');
                out.push_str(&fmt_opt(d.per_class.get(c).copied().flatten()));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut domains = serde_json::Map::new();
        for d in &self.domains {
            domains.insert(
                d.name.clone(),
                match d.miou {
                    Some(v) => serde_json::json!(v),
                    None => serde_json::Value::Null,
                },
            );
        }
        serde_json::json!({
            "domains": domains,
            "avg": self.avg,
            "full_scale_reference": reference_claim(),
        })
    }

    /// Write `eval_domains.csv` and `eval_summary.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(MODULE, dir, e))?;
        let csv_path = dir.join("eval_domains.csv");
        fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(MODULE, &csv_path, e))?;
        let json_path = dir.join("eval_summary.json");
        let text = serde_json::to_string_pretty(&self.to_json()).map_err(|e| Error::Format {
            module: MODULE,
            details: format!("summary serialization failed: {e}"),
        })?;
        fs::write(&json_path, text).map_err(|e| Error::io(MODULE, &json_path, e))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "NA".to_string(),
    }
}

/// Run whole-image inference over every sample of every named dataset and
/// report per-domain mIoU plus the unweighted average.
pub fn evaluate_domains(
    model: &InferenceModel,
    sets: &[(String, &Dataset)],
    ignore_id: u32,
) -> Result<EvalReport> {
    let k = model.num_classes();
    let mut domains = Vec::with_capacity(sets.len());
    let mut warnings = Vec::new();
    for (name, ds) in sets {
        let mut cm = ConfusionMatrix::new(k)?;
        for i in 0..ds.len() {
            let sample = ds.load_labeled(i)?;
            let pred = model.predict(&sample.image)?;
            let classes = pred.argmax_classes();
            let classes = if classes.dim() == sample.label.dim() {
                classes
            } else {
                crate::datapipe::nearest_resize_labels(
                    &classes,
                    sample.label.dim().0,
                    sample.label.dim().1,
                )
            };
            confusion_update(&mut cm, &classes, &sample.label, ignore_id)?;
        }
        let report = miou(&cm);
        if report.mean.is_none() {
            warnings.push(format!("domain {name}: no labeled pixels; excluded from avg"));
        }
        domains.push(DomainResult {
            name: name.clone(),
            miou: report.mean,
            per_class: report.per_class,
            pixels: cm.total_counted(),
            ignored: cm.ignored(),
        });
    }
    let defined: Vec<f64> = domains.iter().filter_map(|d| d.miou).collect();
    let avg = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(EvalReport { domains, avg, warnings })
}
