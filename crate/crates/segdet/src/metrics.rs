//! Segmentation IoU (TP / (TP + FP + FN)) and best/worst/average reporting
//! over a test set, plus loss-curve export for external plotting.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    PlainUnet,
    Mask3d,
    Attention,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::PlainUnet => "plain_unet",
            Method::Mask3d => "mask3d",
            Method::Attention => "attention",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Method> {
        match tag {
            "plain_unet" | "plain" => Ok(Method::PlainUnet),
            "mask3d" => Ok(Method::Mask3d),
            "attention" => Ok(Method::Attention),
            other => Err(Error::Input(format!("unknown method tag '{other}'"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Voxel-count IoU between binary masks (values > 0.5 are foreground).
/// Two empty masks are identical (1.0); exactly one empty is 0.0.
pub fn iou_metric(pred: &Volume, gt: &Volume) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Input(format!(
            "prediction dims {:?} != ground-truth dims {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p > 0.5, g > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(tp as f64 / (tp + fp + fn_) as f64)
}

/// Per-volume IoUs with their best/worst/mean aggregate.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub method: Method,
    pub per_volume: Vec<f64>,
    pub best: f64,
    pub worst: f64,
    pub mean: f64,
}

impl EvalReport {
    pub fn from_ious(method: Method, per_volume: Vec<f64>) -> Result<EvalReport> {
        if per_volume.is_empty() {
            return Err(Error::Usage("evaluation over an empty test set".into()));
        }
        let best = per_volume.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let worst = per_volume.iter().cloned().fold(f64::INFINITY, f64::min);
        let mean = per_volume.iter().sum::<f64>() / per_volume.len() as f64;
        Ok(EvalReport { method, per_volume, best, worst, mean })
    }

    /// Machine-readable `key\tvalue` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("method\t{}\n", self.method));
        s.push_str(&format!("volumes\t{}\n", self.per_volume.len()));
        for (i, v) in self.per_volume.iter().enumerate() {
            s.push_str(&format!("iou.{i}\t{v}\n"));
        }
        s.push_str(&format!("best\t{}\n", self.best));
        s.push_str(&format!("worst\t{}\n", self.worst));
        s.push_str(&format!("mean\t{}\n", self.mean));
        s
    }
}

/// Run a predictor over (image, labels) cases and aggregate per-volume IoU.
/// The labels are passed through to the predictor so annotation-derived
/// baselines (the 3D mask) can build their input channel.
pub fn evaluate<F>(method: Method, cases: &[(Volume, Volume)], mut predictor: F) -> Result<EvalReport>
where
    F: FnMut(&Volume, &Volume) -> Result<Volume>,
{
    let mut ious = Vec::with_capacity(cases.len());
    for (image, labels) in cases {
        let pred = predictor(image, labels)?;
        ious.push(iou_metric(&pred, labels)?);
    }
    EvalReport::from_ious(method, ious)
}

/// Aligned-column comparison table, one row per method (Table-1 layout).
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    s.push_str(&format!("{:<12} {:>9} {:>9} {:>11}\n", "method", "best IoU", "worst IoU", "average IoU"));
    for r in reports {
        s.push_str(&format!(
            "{:<12} {:>9.3} {:>9.3} {:>11.3}\n",
            r.method.tag(),
            r.best,
            r.worst,
            r.mean
        ));
    }
    s
}

/// Plain-text `iter\tloss` rows. Values are printed with Rust's shortest
/// round-trip float formatting, which preserves well over 9 significant
/// digits.
pub fn loss_curve_text(log: &[(u64, f64)]) -> String {
    let mut s = String::new();
    for (iter, loss) in log {
        s.push_str(&format!("{iter}\t{loss}\n"));
    }
    s
}

pub fn loss_curve_export(log: &[(u64, f64)], path: &Path) -> Result<()> {
    std::fs::write(path, loss_curve_text(log))?;
    Ok(())
}

pub fn parse_loss_curve(text: &str) -> Result<Vec<(u64, f64)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (a, b) = (parts.next(), parts.next());
        let (Some(a), Some(b)) = (a, b) else {
            return Err(Error::Format(format!("loss curve line {}: expected iter\\tloss", lineno + 1)));
        };
        let iter = a.parse().map_err(|_| Error::Format(format!("loss curve line {}: bad iter '{a}'", lineno + 1)))?;
        let loss = b.parse().map_err(|_| Error::Format(format!("loss curve line {}: bad loss '{b}'", lineno + 1)))?;
        out.push((iter, loss));
    }
    Ok(out)
}
