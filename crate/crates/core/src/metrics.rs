//! Slice-wise Dice and UVD, baseline-relative tables, CSV/text reports and
//! the inter-grader agreement fraction.

use std::collections::BTreeMap;

use ndarray::{Array3, Array4, ArrayView, Axis, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::UNet;
use crate::nn::{Pass, Real};
use crate::pairgen::SliceSample;
use crate::par;
use crate::phantom::{check_spacing, DomainTag};

/// Per-class probability threshold for binarizing predictions.
pub const THRESHOLD: f64 = 0.5;

/// Slices per evaluation forward pass; results do not depend on it.
pub const EVAL_BATCH: usize = 16;

/// Divisor that turns µm³ into the table's "µm³ × 10²" unit.
pub const UVD_TABLE_SCALE: f64 = 100.0;

fn same_shape<D: Dimension>(a: &ArrayView<u8, D>, b: &ArrayView<u8, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)`, with two empty masks scoring 1.
pub fn dice<D: Dimension>(pred: ArrayView<u8, D>, gt: ArrayView<u8, D>) -> Result<f64> {
    same_shape(&pred, &gt)?;
    let (mut inter, mut sp, mut sg) = (0usize, 0usize, 0usize);
    Zip::from(&pred).and(&gt).for_each(|&p, &g| {
        let (p, g) = (p != 0, g != 0);
        inter += (p && g) as usize;
        sp += p as usize;
        sg += g as usize;
    });
    if sp + sg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sp + sg) as f64)
}

/// Physical volume of the misclassified pixels (FP + FN) in µm³.
pub fn uvd<D: Dimension>(
    pred: ArrayView<u8, D>,
    gt: ArrayView<u8, D>,
    pixel_spacing_um: [f64; 2],
    slice_thickness_um: f64,
) -> Result<f64> {
    same_shape(&pred, &gt)?;
    check_spacing(&[pixel_spacing_um[0], pixel_spacing_um[1], slice_thickness_um])?;
    let mut wrong = 0usize;
    Zip::from(&pred)
        .and(&gt)
        .for_each(|&p, &g| wrong += ((p != 0) != (g != 0)) as usize);
    Ok(wrong as f64 * pixel_spacing_um[0] * pixel_spacing_um[1] * slice_thickness_um)
}

/// Binarize probabilities at [`THRESHOLD`].
pub fn binarize<T: Real>(probs: &Array4<T>) -> Array4<u8> {
    let t = T::from_f64(THRESHOLD).unwrap();
    probs.mapv(|p| (p > t) as u8)
}

/// One per-slice, per-class measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub domain: DomainTag,
    pub class_name: String,
    pub slice_id: String,
    pub dice: f64,
    pub uvd_um3: f64,
}

/// Evaluation-mode predictions for a list of slices, `(C, H, W)` each.
pub fn predict<T: Real>(unet: &UNet<T>, samples: &[SliceSample], batch: usize) -> Result<Vec<Array3<u8>>> {
    let batch = batch.max(1);
    let chunks: Vec<&[SliceSample]> = samples.chunks(batch).collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in chunks {
        let (h, w) = chunk[0].image.dim();
        let mut x = Array4::<T>::zeros((chunk.len(), 1, h, w));
        for (i, s) in chunk.iter().enumerate() {
            if s.image.dim() != (h, w) {
                return Err(Error::Shape("slices in one batch differ in size".into()));
            }
            x.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(&s.image.mapv(|v| T::from_f32(v).unwrap()));
        }
        let probs = unet.forward_segment(&x, &mut Pass::Eval)?;
        let bin = binarize(&probs);
        out.extend(bin.outer_iter().map(|m| m.to_owned()));
    }
    Ok(out)
}

/// Dice and UVD of a network's predictions against each slice's mask.
/// `spacing_um` is the `(inter-slice, row, column)` voxel spacing.
pub fn evaluate<T: Real>(
    unet: &UNet<T>,
    method: &str,
    samples: &[SliceSample],
    class_names: &[String],
    spacing_um: [f64; 3],
) -> Result<Vec<MetricRecord>> {
    let preds = predict(unet, samples, EVAL_BATCH)?;
    let per_slice = par::map_range(samples.len(), |i| -> Result<Vec<MetricRecord>> {
        let s = &samples[i];
        let gt = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("slice {}:{} has no mask", s.volume_id, s.slice_index)))?;
        if gt.dim().0 != class_names.len() {
            return Err(Error::Shape(format!(
                "mask has {} classes, expected {}",
                gt.dim().0,
                class_names.len()
            )));
        }
        class_names
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let (p, g) = (preds[i].index_axis(Axis(0), c), gt.index_axis(Axis(0), c));
                Ok(MetricRecord {
                    method: method.to_string(),
                    domain: s.domain,
                    class_name: name.clone(),
                    slice_id: format!("{}:{}", s.volume_id, s.slice_index),
                    dice: dice(p, g)?,
                    uvd_um3: uvd(p, g, [spacing_um[1], spacing_um[2]], spacing_um[0])?,
                })
            })
            .collect()
    });
    let mut out = Vec::new();
    for r in per_slice {
        out.extend(r?);
    }
    Ok(out)
}

/// Mean Dice per class, in the order classes first appear in `records`.
pub fn mean_dice_per_class(records: &[MetricRecord]) -> Vec<(String, f64)> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.class_name.clone()).or_insert_with(|| {
            order.push(r.class_name.clone());
            (0.0, 0)
        });
        e.0 += r.dice;
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|c| {
            let (s, n) = acc[&c];
            (c, s / n as f64)
        })
        .collect()
}

/// One row of a report: a class or the all-class mean.
///
/// Dice is in percent; UVD in µm³ × 10². `rel` columns are present only
/// when a baseline was supplied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub class: String,
    pub dice_abs: f64,
    pub dice_rel: Option<f64>,
    pub uvd_abs: f64,
    pub uvd_rel: Option<f64>,
}

pub const ALL_CLASSES: &str = "all";

#[derive(Default)]
struct Acc {
    dice: f64,
    uvd: f64,
    dice_rel: f64,
    uvd_rel: f64,
    n: usize,
}

impl Acc {
    fn row(&self, class: &str, with_rel: bool) -> TableRow {
        let n = self.n as f64;
        TableRow {
            class: class.to_string(),
            dice_abs: 100.0 * self.dice / n,
            dice_rel: with_rel.then(|| 100.0 * self.dice_rel / n),
            uvd_abs: self.uvd / n / UVD_TABLE_SCALE,
            uvd_rel: with_rel.then(|| self.uvd_rel / n / UVD_TABLE_SCALE),
        }
    }
}

fn table(records: &[MetricRecord], baseline: Option<&[MetricRecord]>) -> Result<Vec<TableRow>> {
    let base: Option<BTreeMap<(&str, &str), &MetricRecord>> = baseline.map(|b| {
        b.iter()
            .map(|r| ((r.class_name.as_str(), r.slice_id.as_str()), r))
            .collect()
    });
    let mut order: Vec<&str> = Vec::new();
    let mut per_class: BTreeMap<&str, Acc> = BTreeMap::new();
    let mut all = Acc::default();
    for r in records {
        let (dr, ur) = match &base {
            Some(b) => {
                let m = b
                    .get(&(r.class_name.as_str(), r.slice_id.as_str()))
                    .ok_or_else(|| Error::MissingBaseline {
                        class: r.class_name.clone(),
                        slice: r.slice_id.clone(),
                    })?;
                (r.dice - m.dice, r.uvd_um3 - m.uvd_um3)
            }
            None => (0.0, 0.0),
        };
        let acc = per_class.entry(&r.class_name).or_insert_with(|| {
            order.push(&r.class_name);
            Acc::default()
        });
        for a in [acc, &mut all] {
            a.dice += r.dice;
            a.uvd += r.uvd_um3;
            a.dice_rel += dr;
            a.uvd_rel += ur;
            a.n += 1;
        }
    }
    if records.is_empty() {
        return Err(Error::Invalid("no metric records to tabulate".into()));
    }
    let with_rel = baseline.is_some();
    let mut rows: Vec<TableRow> = order.iter().map(|c| per_class[c].row(c, with_rel)).collect();
    rows.push(all.row(ALL_CLASSES, with_rel));
    Ok(rows)
}

/// Per-class and all-class means of absolute values and of per-slice
/// differences to the baseline. Every `(class, slice)` in `records` must
/// have a baseline entry.
pub fn relativize(records: &[MetricRecord], baseline: &[MetricRecord]) -> Result<Vec<TableRow>> {
    table(records, Some(baseline))
}

/// Like [`relativize`] without a baseline: absolute columns only.
pub fn summarize(records: &[MetricRecord]) -> Result<Vec<TableRow>> {
    table(records, None)
}

/// A table block for one method on one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    pub domain: DomainTag,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvLine {
    method: String,
    domain: DomainTag,
    class: String,
    metric: String,
    abs: f64,
    rel: Option<f64>,
}

/// CSV with columns `method,domain,class,metric,abs,rel`.
pub fn reports_to_csv(reports: &[Report]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for rep in reports {
        for row in &rep.rows {
            for (metric, abs, rel) in [("dice", row.dice_abs, row.dice_rel), ("uvd", row.uvd_abs, row.uvd_rel)] {
                w.serialize(CsvLine {
                    method: rep.method.clone(),
                    domain: rep.domain,
                    class: row.class.clone(),
                    metric: metric.into(),
                    abs,
                    rel,
                })
                .map_err(|e| Error::Invalid(format!("csv: {e}")))?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parse CSV written by [`reports_to_csv`].
pub fn reports_from_csv(text: &str) -> Result<Vec<Report>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let mut reports: Vec<Report> = Vec::new();
    for line in rd.deserialize::<CsvLine>() {
        let l = line.map_err(|e| Error::Invalid(format!("csv: {e}")))?;
        let same = |r: &Report| r.method == l.method && r.domain == l.domain;
        if !reports.last().is_some_and(same) {
            reports.push(Report {
                method: l.method.clone(),
                domain: l.domain,
                rows: Vec::new(),
            });
        }
        let rep = reports.last_mut().unwrap();
        if rep.rows.last().is_none_or(|r| r.class != l.class) {
            rep.rows.push(TableRow {
                class: l.class.clone(),
                dice_abs: 0.0,
                dice_rel: None,
                uvd_abs: 0.0,
                uvd_rel: None,
            });
        }
        let row = rep.rows.last_mut().unwrap();
        match l.metric.as_str() {
            "dice" => (row.dice_abs, row.dice_rel) = (l.abs, l.rel),
            "uvd" => (row.uvd_abs, row.uvd_rel) = (l.abs, l.rel),
            m => return Err(Error::Invalid(format!("csv: unknown metric {m}"))),
        }
    }
    Ok(reports)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

/// Fixed-width text table: one block per report, one line per row.
pub fn format_table(reports: &[Report]) -> String {
    let mut s = format!(
        "{:<28} {:<7} {:<8} {:>9} {:>9} {:>10} {:>10}\n",
        "method", "domain", "class", "dice_abs", "dice_rel", "uvd_abs", "uvd_rel"
    );
    for rep in reports {
        for r in &rep.rows {
            s += &format!(
                "{:<28} {:<7} {:<8} {:>9.2} {:>9} {:>10.2} {:>10}\n",
                rep.method,
                rep.domain.as_str(),
                r.class,
                r.dice_abs,
                cell(r.dice_rel),
                r.uvd_abs,
                cell(r.uvd_rel)
            );
        }
    }
    s
}

/// Which direction of a metric is better.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Better {
    Higher,
    Lower,
}

/// Fraction of `(slice, class)` cells where the method agrees with some
/// grader at least as well as some pair of graders agree with each other.
///
/// `method_vs_graders[cell][g]` compares the method with grader `g`;
/// `grader_vs_grader[cell][pair]` compares two graders. Ties count as
/// within variability.
pub fn intergrader_fraction(
    method_vs_graders: &[Vec<f64>],
    grader_vs_grader: &[Vec<f64>],
    better: Better,
) -> Result<f64> {
    if method_vs_graders.len() != grader_vs_grader.len() {
        return Err(Error::Shape(format!(
            "{} method cells vs {} grader cells",
            method_vs_graders.len(),
            grader_vs_grader.len()
        )));
    }
    if method_vs_graders.is_empty() {
        return Err(Error::Invalid("no cells".into()));
    }
    let mut within = 0usize;
    for (m, gg) in method_vs_graders.iter().zip(grader_vs_grader) {
        let g = m.len();
        if g < 2 {
            return Err(Error::Invalid(format!("need at least 2 graders, got {g}")));
        }
        if gg.len() != g * (g - 1) / 2 {
            return Err(Error::Shape(format!(
                "{g} graders need {} grader pairs, got {}",
                g * (g - 1) / 2,
                gg.len()
            )));
        }
        let ok = match better {
            Better::Higher => {
                let best = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                gg.iter().any(|&v| best >= v)
            }
            Better::Lower => {
                let best = m.iter().copied().fold(f64::INFINITY, f64::min);
                gg.iter().any(|&v| best <= v)
            }
        };
        within += ok as usize;
    }
    Ok(within as f64 / method_vs_graders.len() as f64)
}
