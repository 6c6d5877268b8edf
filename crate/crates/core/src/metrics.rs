//! Confusion-matrix metrics, rank AUC and Dice.
//!
//! Ratios with a zero denominator are reported as `None` rather than NaN.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalDomain {
    AllPixels,
    FovMask,
    VesselPixels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub acc: Option<f64>,
    pub sen: Option<f64>,
    pub sp: Option<f64>,
    pub auc: Option<f64>,
    pub eval_domain: EvalDomain,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl MetricReport {
    pub fn from_counts(tp: u64, tn: u64, fp: u64, fn_: u64, eval_domain: EvalDomain) -> Self {
        Self {
            tp,
            tn,
            fp,
            fn_,
            acc: ratio(tp + tn, tp + tn + fp + fn_),
            sen: ratio(tp, tp + fn_),
            sp: ratio(tn, tn + fp),
            auc: None,
            eval_domain,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub const CSV_HEADER: &'static str = "domain,tp,tn,fp,fn,acc,sen,sp,auc";

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "undefined".into());
        let domain = serde_json::to_value(self.eval_domain)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        format!(
            "{domain},{},{},{},{},{},{},{},{}",
            self.tp,
            self.tn,
            self.fp,
            self.fn_,
            f(self.acc),
            f(self.sen),
            f(self.sp),
            f(self.auc)
        )
    }
}

fn check_binary(name: &str, m: ArrayView2<f64>) -> Result<()> {
    if let Some(((r, c), v)) = m.indexed_iter().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(Error::Domain(format!("{name} mask is not binary: {v} at ({r}, {c})")));
    }
    Ok(())
}

fn check_shape(a: ArrayView2<f64>, b: ArrayView2<f64>, domain: Option<ArrayView2<bool>>) -> Result<()> {
    if a.dim() != b.dim() || domain.is_some_and(|d| d.dim() != a.dim()) {
        return Err(Error::Shape(format!("mask shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Confusion counts of binary `pred` against `gt`, restricted to `domain`.
pub fn confusion(
    pred: ArrayView2<f64>,
    gt: ArrayView2<f64>,
    domain: Option<ArrayView2<bool>>,
    eval_domain: EvalDomain,
) -> Result<MetricReport> {
    check_shape(pred, gt, domain)?;
    check_binary("prediction", pred)?;
    check_binary("ground-truth", gt)?;
    let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    let all = Array2::from_elem(pred.dim(), true);
    let dom = match &domain {
        Some(d) => d.view(),
        None => all.view(),
    };
    Zip::from(pred).and(gt).and(dom).for_each(|&p, &g, &d| {
        if !d {
            return;
        }
        match (p == 1.0, g == 1.0) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    });
    Ok(MetricReport::from_counts(tp, tn, fp, fn_, eval_domain))
}

/// Mann-Whitney AUC: probability that a random positive outscores a random
/// negative, ties counted one half. `None` unless both classes occur.
pub fn auc(scores: ArrayView2<f64>, labels: ArrayView2<f64>, domain: Option<ArrayView2<bool>>) -> Result<Option<f64>> {
    check_shape(scores, labels, domain)?;
    check_binary("label", labels)?;
    let mut pts: Vec<(f64, bool)> = Vec::new();
    for ((idx, &s), &l) in scores.indexed_iter().zip(labels.iter()) {
        if domain.is_none_or(|d| d[idx]) {
            if !s.is_finite() {
                return Err(Error::Domain(format!("score {s} at {idx:?} is not finite")));
            }
            pts.push((s, l == 1.0));
        }
    }
    Ok(auc_from_points(&mut pts))
}

fn auc_from_points(pts: &mut [(f64, bool)]) -> Option<f64> {
    let n_pos = pts.iter().filter(|p| p.1).count() as u128;
    let n_neg = pts.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the Mann-Whitney U, kept integral: each positive earns 2 per
    // lower-scored negative and 1 per tied negative.
    let mut u2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < pts.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < pts.len() && pts[j].0 == pts[i].0 {
            if pts[j].1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        u2 += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Some(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Sørensen-Dice overlap of two binary masks; `None` when both are empty.
pub fn dice(pred: ArrayView2<f64>, gt: ArrayView2<f64>) -> Result<Option<f64>> {
    check_shape(pred, gt, None)?;
    check_binary("prediction", pred)?;
    check_binary("ground-truth", gt)?;
    let inter = Zip::from(pred).and(gt).fold(0u64, |acc, &p, &g| acc + (p == 1.0 && g == 1.0) as u64);
    let total = pred.iter().filter(|&&v| v == 1.0).count() + gt.iter().filter(|&&v| v == 1.0).count();
    Ok(ratio(2 * inter, total as u64))
}

/// Vessel segmentation plus subtype classification, both directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvReport {
    pub vessel: MetricReport,
    /// Subtype 1 as the positive class.
    pub subtype1: MetricReport,
    /// Subtype 2 as the positive class.
    pub subtype2: MetricReport,
}

impl AvReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("task,{}\n", MetricReport::CSV_HEADER);
        for (name, r) in [("vessel", &self.vessel), ("subtype1", &self.subtype1), ("subtype2", &self.subtype2)] {
            out.push_str(&format!("{name},{}\n", r.csv_row()));
        }
        out
    }
}

/// Threshold at 0.5: strictly greater is positive.
pub fn binarize(probs: ArrayView2<f64>) -> Array2<f64> {
    probs.mapv(|p| if p > 0.5 { 1.0 } else { 0.0 })
}

/// Evaluates `(3, H, W)` probabilities (vessel, subtype 1, subtype 2) against
/// binary ground truth.
///
/// Vessel metrics count pixels inside `fov` (everywhere if absent). Subtype
/// metrics count ground-truth vessel pixels carrying exactly one subtype; the
/// predicted class is the larger of the two subtype probabilities, ties going
/// to subtype 1. The subtype AUC scores pixels by `p1 - p2` (and `p2 - p1`
/// for subtype 2, which yields the same value).
pub fn av_report(pred: &Array3<f64>, gt: &Array3<f64>, fov: Option<ArrayView2<bool>>) -> Result<AvReport> {
    if pred.dim() != gt.dim() || pred.dim().0 != 3 {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} must both be (3, H, W)",
            pred.shape(),
            gt.shape()
        )));
    }
    if let Some(v) = pred.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("probability {v} outside [0, 1]")));
    }
    let p = |c| pred.index_axis(Axis(0), c);
    let g = |c| gt.index_axis(Axis(0), c);
    let (eval_vessel, dom) = match fov {
        Some(f) => (EvalDomain::FovMask, Some(f)),
        None => (EvalDomain::AllPixels, None),
    };
    let mut vessel = confusion(binarize(p(0)).view(), g(0), dom, eval_vessel)?;
    vessel.auc = auc(p(0), g(0), dom)?;

    check_binary("ground-truth subtype", g(1))?;
    check_binary("ground-truth subtype", g(2))?;
    let single = Zip::from(g(0))
        .and(g(1))
        .and(g(2))
        .map_collect(|&v, &a, &b| v == 1.0 && (a == 1.0) != (b == 1.0));
    let pred_is_1 = Zip::from(p(1)).and(p(2)).map_collect(|&a, &b| if a >= b { 1.0 } else { 0.0 });
    let score = &p(1) - &p(2);
    let mut subtype1 = confusion(pred_is_1.view(), g(1), Some(single.view()), EvalDomain::VesselPixels)?;
    subtype1.auc = auc(score.view(), g(1), Some(single.view()))?;
    let pred_is_2 = pred_is_1.mapv(|v| 1.0 - v);
    let mut subtype2 = confusion(pred_is_2.view(), g(2), Some(single.view()), EvalDomain::VesselPixels)?;
    // scoring by p2 - p1 with the labels swapped gives the same ranking statistic
    subtype2.auc = subtype1.auc;
    Ok(AvReport {
        vessel,
        subtype1,
        subtype2,
    })
}

/// [`av_report`] over several images with counts and AUC ranks pooled
/// across all pixels. A missing field of view counts every pixel.
pub fn av_report_pooled(items: &[(Array3<f64>, Array3<f64>, Option<Array2<bool>>)]) -> Result<AvReport> {
    let total: usize = items.iter().map(|(p, _, _)| p.dim().1 * p.dim().2).sum();
    let any_fov = items.iter().any(|(_, _, f)| f.is_some());
    let mut pred = Array3::zeros((3, 1, total));
    let mut gt = Array3::zeros((3, 1, total));
    let mut fov = Array2::from_elem((1, total), true);
    let mut off = 0;
    for (p, g, f) in items {
        if p.dim() != g.dim() || p.dim().0 != 3 {
            return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", p.shape(), g.shape())));
        }
        let n = p.dim().1 * p.dim().2;
        for c in 0..3 {
            pred.slice_mut(ndarray::s![c, 0, off..off + n])
                .assign(&p.index_axis(Axis(0), c).iter().copied().collect::<ndarray::Array1<f64>>());
            gt.slice_mut(ndarray::s![c, 0, off..off + n])
                .assign(&g.index_axis(Axis(0), c).iter().copied().collect::<ndarray::Array1<f64>>());
        }
        if let Some(f) = f {
            if f.dim() != (p.dim().1, p.dim().2) {
                return Err(Error::Shape("field-of-view mask does not match the prediction".into()));
            }
            fov.slice_mut(ndarray::s![0, off..off + n])
                .assign(&f.iter().copied().collect::<ndarray::Array1<bool>>());
        }
        off += n;
    }
    av_report(&pred, &gt, any_fov.then_some(fov.view()))
}
