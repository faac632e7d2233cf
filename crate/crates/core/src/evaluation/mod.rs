//! Boundary-benchmark evaluation: NMS/thinning, tolerance-based pixel
//! correspondence against every annotator, PR curves and ODS/OIS/AP, plus
//! the best-of-M protocol for granularity sweeps.

mod matching;
mod nms;

pub use matching::{
    correspond_pixels_ref, threshold_sweep_ref, Correspondence, Matcher, ReferenceMatcher, SweepRequest,
    SweepResponse, ThresholdCounts,
};
pub use nms::nms_thin;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// Matching tolerance as a fraction of the image diagonal.
    pub max_dist_frac: f64,
    pub n_thresholds: usize,
    pub apply_nms: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            max_dist_frac: 0.0075,
            n_thresholds: 99,
            apply_nms: true,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_dist_frac > 0.0 && self.max_dist_frac < 0.1) {
            return Err(invalid(format!("max_dist_frac {} outside (0, 0.1)", self.max_dist_frac)));
        }
        if self.n_thresholds == 0 {
            return Err(invalid("n_thresholds must be at least 1"));
        }
        Ok(())
    }

    /// `k / (n + 1)` for `k = 1..=n`.
    pub fn thresholds(&self) -> Vec<f64> {
        let n = self.n_thresholds;
        (1..=n).map(|k| k as f64 / (n + 1) as f64).collect()
    }

    pub fn max_dist_px(&self, height: usize, width: usize) -> f64 {
        self.max_dist_frac * ((height * height + width * width) as f64).sqrt()
    }
}

/// Precision 1 when nothing is predicted; recall 0 when there is nothing
/// to find.
pub fn precision_recall_f(tp: u64, pred_count: u64, fn_total: u64) -> (f64, f64, f64) {
    let p = if pred_count == 0 { 1.0 } else { tp as f64 / pred_count as f64 };
    let r = if tp + fn_total == 0 { 0.0 } else { tp as f64 / (tp + fn_total) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_total: u64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

impl PRPoint {
    fn from_counts(threshold: f64, c: ThresholdCounts) -> Self {
        let (precision, recall, f_measure) = precision_recall_f(c.tp, c.pred_count, c.fn_total);
        Self {
            threshold,
            tp: c.tp,
            fp: c.fp,
            fn_total: c.fn_total,
            precision,
            recall,
            f_measure,
        }
    }
}

/// The threshold and granularity index one image uses in OIS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageBest {
    pub id: String,
    pub granularity_index: usize,
    pub point: PRPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ods: f64,
    pub ods_threshold: f64,
    pub ois: f64,
    pub ap: f64,
    pub per_image: Vec<ImageBest>,
    pub curve: Vec<PRPoint>,
}

/// Annotator maps for one image.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub id: String,
    pub maps: Vec<Array2<u8>>,
}

/// Area under the PR curve: precision replaced by its running maximum
/// from high recall down, then trapezoids over recall starting at recall 0
/// with the first envelope precision.
pub fn average_precision(curve: &[PRPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
    if pts.is_empty() {
        return 0.0;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    for i in (0..pts.len() - 1).rev() {
        pts[i].1 = pts[i].1.max(pts[i + 1].1);
    }
    let mut area = 0.0;
    let (mut r0, mut p0) = (0.0, pts[0].1);
    for &(r, p) in &pts {
        area += (r - r0) * (p + p0) / 2.0;
        r0 = r;
        p0 = p;
    }
    area
}

/// Per-image sweep counts `[granularity][threshold]`, computed with `matcher`.
fn sweep_all(
    matcher: &dyn Matcher,
    pred_sets: &BTreeMap<String, Vec<Array2<f32>>>,
    gts: &[GroundTruth],
    cfg: &MatchConfig,
) -> Result<Vec<Vec<Vec<ThresholdCounts>>>> {
    cfg.validate()?;
    let missing: Vec<&str> = gts
        .iter()
        .filter(|g| !pred_sets.contains_key(&g.id))
        .map(|g| g.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(invalid(format!("missing predictions for: {}", missing.join(", "))));
    }
    let m = pred_sets[&gts.first().ok_or_else(|| invalid("no ground truth"))?.id].len();
    if m == 0 {
        return Err(invalid("each image needs at least one prediction"));
    }
    let thresholds = cfg.thresholds();
    gts.par_iter()
        .map(|gt| {
            let preds = &pred_sets[&gt.id];
            if preds.len() != m {
                return Err(invalid(format!("{}: {} predictions, expected {m}", gt.id, preds.len())));
            }
            if gt.maps.is_empty() {
                return Err(invalid(format!("{}: no annotator maps", gt.id)));
            }
            preds
                .iter()
                .map(|pred| {
                    let (h, w) = pred.dim();
                    if gt.maps.iter().any(|g| g.dim() != (h, w)) {
                        return Err(invalid(format!("{}: prediction and annotation shapes differ", gt.id)));
                    }
                    let req = SweepRequest {
                        prob_map: pred.iter().copied().collect(),
                        height: h,
                        width: w,
                        gt_maps: gt.maps.iter().map(|g| g.iter().copied().collect()).collect(),
                        thresholds: thresholds.clone(),
                        max_dist_px: cfg.max_dist_px(h, w),
                        apply_nms: cfg.apply_nms,
                    };
                    Ok(matcher.sweep(&req)?.counts)
                })
                .collect()
        })
        .collect()
}

/// F numerator and denominator: `F = 2tp / (pred + tp + fn)`.
fn f_parts(c: &ThresholdCounts) -> (i128, i128) {
    (2 * c.tp as i128, (c.pred_count + c.tp + c.fn_total) as i128)
}

/// Indices maximizing `Σa / Σb` with one choice per image (exact
/// Dinkelbach iteration on integers). Ties go to the lowest index.
fn best_ratio_selection(options: &[Vec<(i128, i128)>]) -> Vec<usize> {
    let mut pick = vec![0usize; options.len()];
    let ratio = |pick: &[usize]| -> (i128, i128) {
        let a: i128 = pick.iter().zip(options).map(|(&k, o)| o[k].0).sum();
        let b: i128 = pick.iter().zip(options).map(|(&k, o)| o[k].1).sum();
        if b == 0 {
            (0, 1)
        } else {
            (a, b)
        }
    };
    let (mut p, mut q) = ratio(&pick);
    loop {
        let next: Vec<usize> = options
            .iter()
            .map(|o| {
                let mut best = 0;
                for k in 1..o.len() {
                    if o[k].0 * q - p * o[k].1 > o[best].0 * q - p * o[best].1 {
                        best = k;
                    }
                }
                best
            })
            .collect();
        let (np, nq) = ratio(&next);
        if np * q <= p * nq {
            // No strict improvement: keep the lowest-index optimal choice.
            return if next == pick || np * q < p * nq { pick } else { next };
        }
        pick = next;
        p = np;
        q = nq;
    }
}

fn sum_counts<'a>(items: impl Iterator<Item = &'a ThresholdCounts>) -> ThresholdCounts {
    items.fold(ThresholdCounts::default(), |acc, c| ThresholdCounts {
        tp: acc.tp + c.tp,
        fp: acc.fp + c.fp,
        fn_total: acc.fn_total + c.fn_total,
        pred_count: acc.pred_count + c.pred_count,
    })
}

fn summarize(ids: &[String], counts: &[Vec<Vec<ThresholdCounts>>], thresholds: &[f64]) -> EvalResult {
    // Best-ODS: at each threshold, the per-image choice maximizing dataset F.
    let curve: Vec<PRPoint> = thresholds
        .iter()
        .enumerate()
        .map(|(t, &th)| {
            let options: Vec<Vec<(i128, i128)>> = counts
                .iter()
                .map(|img| img.iter().map(|g| f_parts(&g[t])).collect())
                .collect();
            let pick = best_ratio_selection(&options);
            let total = sum_counts(counts.iter().zip(&pick).map(|(img, &k)| &img[k][t]));
            PRPoint::from_counts(th, total)
        })
        .collect();
    let mut ods_idx = 0;
    for (i, p) in curve.iter().enumerate() {
        if p.f_measure > curve[ods_idx].f_measure {
            ods_idx = i;
        }
    }

    // OIS: each image picks its own (threshold, granularity), jointly
    // maximizing dataset F. The shared-threshold choice is one candidate, so
    // OIS >= ODS.
    let options: Vec<Vec<(i128, i128)>> = counts
        .iter()
        .map(|img| (0..thresholds.len()).flat_map(|t| img.iter().map(move |g| f_parts(&g[t]))).collect())
        .collect();
    let pick = best_ratio_selection(&options);
    let per_image: Vec<ImageBest> = counts
        .iter()
        .zip(ids)
        .zip(&pick)
        .map(|((img, id), &j)| {
            let (t, k) = (j / img.len(), j % img.len());
            ImageBest {
                id: id.clone(),
                granularity_index: k,
                point: PRPoint::from_counts(thresholds[t], img[k][t]),
            }
        })
        .collect();
    let ois_counts = sum_counts(counts.iter().zip(&pick).map(|(img, &j)| &img[j % img.len()][j / img.len()]));
    let (_, _, ois) = precision_recall_f(ois_counts.tp, ois_counts.pred_count, ois_counts.fn_total);

    EvalResult {
        ods: curve[ods_idx].f_measure,
        ods_threshold: curve[ods_idx].threshold,
        ois,
        ap: average_precision(&curve),
        per_image,
        curve,
    }
}

/// Best-of-M evaluation with a custom matcher backend.
pub fn evaluate_multi_with(
    matcher: &dyn Matcher,
    pred_sets: &BTreeMap<String, Vec<Array2<f32>>>,
    gts: &[GroundTruth],
    cfg: &MatchConfig,
) -> Result<EvalResult> {
    let counts = sweep_all(matcher, pred_sets, gts, cfg)?;
    let ids: Vec<String> = gts.iter().map(|g| g.id.clone()).collect();
    Ok(summarize(&ids, &counts, &cfg.thresholds()))
}

/// ODS/OIS/AP for M predictions per image, each image contributing its best
/// prediction (per threshold for ODS and the curve, overall for OIS).
pub fn evaluate_multi(
    pred_sets: &BTreeMap<String, Vec<Array2<f32>>>,
    gts: &[GroundTruth],
    cfg: &MatchConfig,
) -> Result<EvalResult> {
    evaluate_multi_with(&ReferenceMatcher, pred_sets, gts, cfg)
}

pub fn evaluate_with(
    matcher: &dyn Matcher,
    predictions: &BTreeMap<String, Array2<f32>>,
    gts: &[GroundTruth],
    cfg: &MatchConfig,
) -> Result<EvalResult> {
    let sets: BTreeMap<String, Vec<Array2<f32>>> = predictions
        .iter()
        .map(|(k, v)| (k.clone(), vec![v.clone()]))
        .collect();
    evaluate_multi_with(matcher, &sets, gts, cfg)
}

/// ODS/OIS/AP for one prediction per image.
pub fn evaluate(predictions: &BTreeMap<String, Array2<f32>>, gts: &[GroundTruth], cfg: &MatchConfig) -> Result<EvalResult> {
    evaluate_with(&ReferenceMatcher, predictions, gts, cfg)
}

/// Threshold rows then a summary row, with the run settings in a leading
/// comment line.
pub fn write_results_csv(path: &Path, result: &EvalResult, cfg: &MatchConfig, granularities: usize) -> Result<()> {
    let mut out = Vec::new();
    writeln!(
        out,
        "# apply_nms={} max_dist_frac={} n_thresholds={} granularities={}",
        cfg.apply_nms, cfg.max_dist_frac, cfg.n_thresholds, granularities
    )?;
    writeln!(out, "threshold,precision,recall,f_measure")?;
    for p in &result.curve {
        writeln!(out, "{:.6},{:.9},{:.9},{:.9}", p.threshold, p.precision, p.recall, p.f_measure)?;
    }
    writeln!(out, "ods,ois,ap,ods_threshold")?;
    writeln!(out, "{:.9},{:.9},{:.9},{:.6}", result.ods, result.ois, result.ap, result.ods_threshold)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(recall: f64, precision: f64) -> PRPoint {
        PRPoint {
            threshold: 0.5,
            tp: 0,
            fp: 0,
            fn_total: 0,
            precision,
            recall,
            f_measure: 0.0,
        }
    }

    #[test]
    fn ap_of_perfect_and_empty_curves() {
        assert!((average_precision(&[point(1.0, 1.0)]) - 1.0).abs() < 1e-15);
        assert_eq!(average_precision(&[point(0.0, 1.0)]), 0.0);
        // Envelope lifts the dip at recall 0.5.
        let ap = average_precision(&[point(0.25, 0.5), point(0.5, 0.4), point(1.0, 0.6)]);
        assert!((ap - 0.6).abs() < 1e-12);
    }

    #[test]
    fn ratio_selection_matches_exhaustive() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let n = rng.gen_range(1..5);
            let m = rng.gen_range(1..4);
            let options: Vec<Vec<(i128, i128)>> = (0..n)
                .map(|_| {
                    (0..m)
                        .map(|_| {
                            let a = rng.gen_range(0..20);
                            (a, a + rng.gen_range(0..20))
                        })
                        .collect()
                })
                .collect();
            let value = |pick: &[usize]| {
                let a: i128 = pick.iter().zip(&options).map(|(&k, o)| o[k].0).sum();
                let b: i128 = pick.iter().zip(&options).map(|(&k, o)| o[k].1).sum();
                if b == 0 {
                    0.0
                } else {
                    a as f64 / b as f64
                }
            };
            let mut best = f64::MIN;
            let mut idx = vec![0; n];
            loop {
                best = best.max(value(&idx));
                let mut i = 0;
                while i < n {
                    idx[i] += 1;
                    if idx[i] < m {
                        break;
                    }
                    idx[i] = 0;
                    i += 1;
                }
                if i == n {
                    break;
                }
            }
            let pick = best_ratio_selection(&options);
            assert!((value(&pick) - best).abs() < 1e-12);
        }
    }

    #[test]
    fn thresholds_and_tolerance() {
        let cfg = MatchConfig::default();
        let t = cfg.thresholds();
        assert_eq!(t.len(), 99);
        assert!((t[0] - 0.01).abs() < 1e-15 && (t[98] - 0.99).abs() < 1e-15);
        assert!((cfg.max_dist_px(300, 400) - 3.75).abs() < 1e-12);
        assert!(MatchConfig { max_dist_frac: 0.2, ..cfg.clone() }.validate().is_err());
        assert!(MatchConfig { n_thresholds: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn missing_prediction_is_reported() {
        let gts = vec![
            GroundTruth { id: "a".into(), maps: vec![Array2::zeros((8, 8))] },
            GroundTruth { id: "b".into(), maps: vec![Array2::zeros((8, 8))] },
        ];
        let mut preds = BTreeMap::new();
        preds.insert("a".to_string(), Array2::<f32>::zeros((8, 8)));
        let err = evaluate(&preds, &gts, &MatchConfig::default()).unwrap_err();
        assert!(err.to_string().contains('b'));
    }
}
