use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::nms::nms_thin;
use crate::error::{invalid, Result};

/// Matched pixels of one prediction/ground-truth pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Correspondence {
    pub pred_matched: Array2<bool>,
    pub gt_matched: Array2<bool>,
    pub tp: usize,
}

/// One-to-one matching of predicted to ground-truth edge pixels within
/// `max_dist_px` (Euclidean).
///
/// Candidate pairs are first taken greedily in order of increasing distance,
/// then row-major predicted index, then row-major ground-truth index. The
/// greedy matching is then grown to maximum cardinality with augmenting
/// paths, tried from unmatched predicted pixels in row-major order with
/// neighbours visited nearest first. The result is deterministic.
pub fn correspond_pixels_ref(pred: &Array2<bool>, gt: &Array2<bool>, max_dist_px: f64) -> Result<Correspondence> {
    if pred.dim() != gt.dim() {
        return Err(invalid(format!("prediction {:?} and ground truth {:?} differ in shape", pred.dim(), gt.dim())));
    }
    if !(max_dist_px >= 0.0) {
        return Err(invalid(format!("bad matching distance {max_dist_px}")));
    }
    let (h, w) = pred.dim();
    let r = max_dist_px.floor() as isize;

    let mut candidates: Vec<(i64, usize, usize)> = Vec::new();
    for ((y, x), &p) in pred.indexed_iter() {
        if !p {
            continue;
        }
        for dy in -r..=r {
            for dx in -r..=r {
                let (gy, gx) = (y as isize + dy, x as isize + dx);
                if gy < 0 || gx < 0 || gy >= h as isize || gx >= w as isize {
                    continue;
                }
                let d2 = (dy * dy + dx * dx) as i64;
                if (d2 as f64).sqrt() > max_dist_px || !gt[[gy as usize, gx as usize]] {
                    continue;
                }
                candidates.push((d2, y * w + x, gy as usize * w + gx as usize));
            }
        }
    }
    candidates.sort_unstable();

    const FREE: usize = usize::MAX;
    let n = h * w;
    let mut mate_of_pred = vec![FREE; n];
    let mut mate_of_gt = vec![FREE; n];
    for &(_, p, g) in &candidates {
        if mate_of_pred[p] == FREE && mate_of_gt[g] == FREE {
            mate_of_pred[p] = g;
            mate_of_gt[g] = p;
        }
    }

    // Compressed adjacency, each list nearest first.
    let mut adj_start = vec![0usize; n + 1];
    for &(_, p, _) in &candidates {
        adj_start[p + 1] += 1;
    }
    for i in 0..n {
        adj_start[i + 1] += adj_start[i];
    }
    let mut fill = adj_start.clone();
    let mut adj = vec![0usize; candidates.len()];
    for &(_, p, g) in &candidates {
        adj[fill[p]] = g;
        fill[p] += 1;
    }

    let mut seen = vec![0u32; n];
    let mut stamp = 0u32;
    let mut stack: Vec<(usize, usize, usize)> = Vec::new();
    for root in 0..n {
        if mate_of_pred[root] != FREE || adj_start[root] == adj_start[root + 1] {
            continue;
        }
        stamp += 1;
        // Frames are (pred pixel, next edge, chosen gt pixel).
        stack.clear();
        stack.push((root, adj_start[root], FREE));
        while let Some(top) = stack.last_mut() {
            let (u, next, _) = *top;
            if next == adj_start[u + 1] {
                stack.pop();
                continue;
            }
            top.1 += 1;
            let g = adj[next];
            if seen[g] == stamp {
                continue;
            }
            seen[g] = stamp;
            top.2 = g;
            let owner = mate_of_gt[g];
            if owner == FREE {
                for &(u, _, g) in stack.iter().rev() {
                    mate_of_pred[u] = g;
                    mate_of_gt[g] = u;
                }
                break;
            }
            stack.push((owner, adj_start[owner], FREE));
        }
    }

    let mut pred_matched = Array2::from_elem((h, w), false);
    let mut gt_matched = Array2::from_elem((h, w), false);
    let mut tp = 0;
    for (p, &g) in mate_of_pred.iter().enumerate() {
        if g != FREE {
            pred_matched[(p / w, p % w)] = true;
            gt_matched[(g / w, g % w)] = true;
            tp += 1;
        }
    }
    Ok(Correspondence { pred_matched, gt_matched, tp })
}

/// Inputs for a full threshold sweep over one image, as flat row-major
/// arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRequest {
    pub prob_map: Vec<f32>,
    pub height: usize,
    pub width: usize,
    /// Binary annotator maps, nonzero meaning edge.
    pub gt_maps: Vec<Vec<u8>>,
    pub thresholds: Vec<f64>,
    pub max_dist_px: f64,
    pub apply_nms: bool,
}

impl SweepRequest {
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.prob_map.len() != n {
            return Err(invalid(format!("prob_map has {} values, expected {n}", self.prob_map.len())));
        }
        if let Some(bad) = self.gt_maps.iter().position(|g| g.len() != n) {
            return Err(invalid(format!("ground-truth map {bad} has the wrong length")));
        }
        if self.thresholds.is_empty()
            || self.thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0))
            || self.thresholds.windows(2).any(|p| p[0] >= p[1])
        {
            return Err(invalid("thresholds must be strictly increasing inside (0, 1)"));
        }
        if !(self.max_dist_px >= 0.0) {
            return Err(invalid(format!("bad matching distance {}", self.max_dist_px)));
        }
        Ok(())
    }
}

/// Counts at one threshold. `fn_total` sums unmatched pixels over all
/// annotator maps; `tp` counts predicted pixels matched in at least one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_total: u64,
    pub pred_count: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepResponse {
    pub counts: Vec<ThresholdCounts>,
}

/// A pixel-correspondence backend. The reference implementation is
/// [`ReferenceMatcher`]; faster backends must agree with it exactly.
pub trait Matcher: Send + Sync {
    fn name(&self) -> &str;

    fn correspond(&self, pred: &Array2<bool>, gt: &Array2<bool>, max_dist_px: f64) -> Result<Correspondence>;

    fn sweep(&self, req: &SweepRequest) -> Result<SweepResponse>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ReferenceMatcher;

impl Matcher for ReferenceMatcher {
    fn name(&self) -> &str {
        "ref"
    }

    fn correspond(&self, pred: &Array2<bool>, gt: &Array2<bool>, max_dist_px: f64) -> Result<Correspondence> {
        correspond_pixels_ref(pred, gt, max_dist_px)
    }

    fn sweep(&self, req: &SweepRequest) -> Result<SweepResponse> {
        threshold_sweep_ref(req)
    }
}

/// Loops [`correspond_pixels_ref`] over thresholds and annotator maps.
pub fn threshold_sweep_ref(req: &SweepRequest) -> Result<SweepResponse> {
    req.validate()?;
    let shape = (req.height, req.width);
    let prob = Array2::from_shape_vec(shape, req.prob_map.clone()).map_err(|e| invalid(e.to_string()))?;
    let prob = if req.apply_nms { nms_thin(&prob) } else { prob };
    let gts: Vec<Array2<bool>> = req
        .gt_maps
        .iter()
        .map(|g| Array2::from_shape_fn(shape, |(y, x)| g[y * req.width + x] != 0))
        .collect();

    let mut counts = Vec::with_capacity(req.thresholds.len());
    for &t in &req.thresholds {
        let pred = prob.mapv(|v| v as f64 >= t);
        let pred_count = pred.iter().filter(|&&v| v).count() as u64;
        let mut any_match = Array2::from_elem(shape, false);
        let mut fn_total = 0u64;
        for gt in &gts {
            let c = correspond_pixels_ref(&pred, gt, req.max_dist_px)?;
            any_match.zip_mut_with(&c.pred_matched, |a, &b| *a |= b);
            let gt_count = gt.iter().filter(|&&v| v).count();
            fn_total += (gt_count - c.tp) as u64;
        }
        let tp = any_match.iter().filter(|&&v| v).count() as u64;
        counts.push(ThresholdCounts {
            tp,
            fp: pred_count - tp,
            fn_total,
            pred_count,
        });
    }
    Ok(SweepResponse { counts })
}
