//! Recall and average recall of ranked proposals.
//!
//! Matching is greedy in score order: each proposal claims the unmatched
//! ground truth it overlaps most (IoU at or above the threshold; ties go to
//! the lower gt index). Because the claims of the first N proposals do not
//! depend on later ones, one pass over the longest list records the rank
//! that claimed each gt, and recall at any budget N is the share of gts
//! claimed at rank < N. Dataset recall pools gts over images.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_grid() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

pub const AR_BUDGETS: [usize; 4] = [10, 100, 500, 1000];
pub const BUDGET_GRID: [usize; 10] = [1, 5, 10, 20, 50, 100, 200, 300, 500, 1000];
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    pub fn of_area(area: f64) -> Self {
        if area < SMALL_AREA {
            SizeBucket::Small
        } else if area < MEDIUM_AREA {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }
}

/// Rank of the proposal that claimed each gt, or `None`.
pub fn match_greedy(proposals: &[BBox], gts: &[BBox], iou_thresh: f64) -> Vec<Option<usize>> {
    let mut claimed: Vec<Option<usize>> = vec![None; gts.len()];
    let mut left = gts.len();
    for (rank, p) in proposals.iter().enumerate() {
        if left == 0 {
            break;
        }
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if claimed[gi].is_some() {
                continue;
            }
            let v = iou(p, g);
            if v >= iou_thresh && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, gi));
            }
        }
        if let Some((_, gi)) = best {
            claimed[gi] = Some(rank);
            left -= 1;
        }
    }
    claimed
}

/// Raw matching result of one image over the whole IoU grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMatches {
    pub image_id: u64,
    pub gt_areas: Vec<f64>,
    /// `claims[t][g]`: rank claiming gt `g` at IoU threshold `t`.
    pub claims: Vec<Vec<Option<usize>>>,
}

impl ImageMatches {
    /// `proposals` must already be sorted by descending score.
    pub fn compute(image_id: u64, proposals: &[BBox], gts: &[BBox], max_budget: usize) -> Self {
        let top = &proposals[..proposals.len().min(max_budget)];
        Self {
            image_id,
            gt_areas: gts.iter().map(|g| g.area()).collect(),
            claims: iou_grid().into_iter().map(|t| match_greedy(top, gts, t)).collect(),
        }
    }

    /// Matched count per IoU threshold at budget `n`, restricted to gts
    /// passing `keep`.
    fn matched(&self, n: usize, keep: impl Fn(f64) -> bool) -> Vec<usize> {
        self.claims
            .iter()
            .map(|c| {
                c.iter()
                    .zip(&self.gt_areas)
                    .filter(|(r, a)| keep(**a) && r.is_some_and(|r| r < n))
                    .count()
            })
            .collect()
    }
}

/// Sum over the IoU grid of matched gts at budget `n`, and the gt count.
/// AR is `matched / (grid_len * gts)`; kept as integers so candidate
/// settings can be compared exactly.
pub fn ar_counts(matches: &[ImageMatches], n: usize, bucket: Option<SizeBucket>) -> (usize, usize) {
    let keep = |a: f64| bucket.is_none_or(|b| SizeBucket::of_area(a) == b);
    let mut hit = 0;
    let mut total = 0;
    for m in matches {
        hit += m.matched(n, keep).iter().sum::<usize>();
        total += m.gt_areas.iter().filter(|a| keep(**a)).count();
    }
    (hit, total)
}

/// Dataset average recall; `None` when no gt falls in the selection.
pub fn average_recall(matches: &[ImageMatches], n: usize, bucket: Option<SizeBucket>) -> Option<f64> {
    let (hit, total) = ar_counts(matches, n, bucket);
    (total > 0).then(|| hit as f64 / (total * iou_grid().len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketAr {
    pub bucket: SizeBucket,
    pub gts: usize,
    pub ar: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub images: usize,
    pub images_without_gt: usize,
    pub gts: usize,
    pub iou_grid: Vec<f64>,
    pub budgets: Vec<usize>,
    /// `recall[t][b]` at IoU `iou_grid[t]` and budget `budgets[b]`.
    pub recall: Vec<Vec<f64>>,
    pub ar: Vec<(usize, f64)>,
    pub bucket_budget: usize,
    pub buckets: Vec<BucketAr>,
    #[serde(skip)]
    pub matches: Vec<ImageMatches>,
}

impl RecallReport {
    /// Builds the report. Images without gts are listed but excluded from
    /// every average.
    pub fn from_matches(matches: Vec<ImageMatches>) -> Self {
        let images = matches.len();
        let counted: Vec<ImageMatches> = matches.iter().filter(|m| !m.gt_areas.is_empty()).cloned().collect();
        let gts: usize = counted.iter().map(|m| m.gt_areas.len()).sum();
        let grid = iou_grid();
        let budgets: Vec<usize> = BUDGET_GRID.to_vec();
        let recall = (0..grid.len())
            .map(|t| {
                budgets
                    .iter()
                    .map(|&n| {
                        let hit: usize = counted.iter().map(|m| m.matched(n, |_| true)[t]).sum();
                        if gts == 0 {
                            0.0
                        } else {
                            hit as f64 / gts as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let ar = AR_BUDGETS
            .iter()
            .map(|&n| (n, average_recall(&counted, n, None).unwrap_or(0.0)))
            .collect();
        let bucket_budget = 100;
        let buckets = SizeBucket::ALL
            .iter()
            .map(|&b| BucketAr {
                bucket: b,
                gts: ar_counts(&counted, bucket_budget, Some(b)).1,
                ar: average_recall(&counted, bucket_budget, Some(b)),
            })
            .collect();
        Self {
            images,
            images_without_gt: images - counted.len(),
            gts,
            iou_grid: grid,
            budgets,
            recall,
            ar,
            bucket_budget,
            buckets,
            matches,
        }
    }

    pub fn ar_at(&self, n: usize) -> Option<f64> {
        self.ar.iter().find(|(b, _)| *b == n).map(|(_, v)| *v)
    }

    pub fn bucket_ar(&self, b: SizeBucket) -> Option<f64> {
        self.buckets.iter().find(|x| x.bucket == b).and_then(|x| x.ar)
    }

    /// True when recall never rises with IoU and never falls with budget.
    pub fn is_monotone(&self) -> bool {
        let r = &self.recall;
        let iou_ok = r.windows(2).all(|w| w[0].iter().zip(&w[1]).all(|(a, b)| a >= b));
        let budget_ok = r.iter().all(|row| row.windows(2).all(|w| w[0] <= w[1]));
        iou_ok && budget_ok
    }

    pub fn to_json(&self) -> serde_json::Value {
        let ar: serde_json::Map<String, serde_json::Value> =
            self.ar.iter().map(|(n, v)| (format!("AR@{n}"), (*v).into())).collect();
        let buckets: serde_json::Map<String, serde_json::Value> = self
            .buckets
            .iter()
            .map(|b| {
                let name = match b.bucket {
                    SizeBucket::Small => "small",
                    SizeBucket::Medium => "medium",
                    SizeBucket::Large => "large",
                };
                (
                    format!("AR@{name}@{}", self.bucket_budget),
                    serde_json::json!({ "ar": b.ar, "gts": b.gts }),
                )
            })
            .collect();
        serde_json::json!({
            "images": self.images,
            "images_without_gt": self.images_without_gt,
            "gts": self.gts,
            "ar": ar,
            "buckets": buckets,
            "iou_grid": self.iou_grid,
            "budgets": self.budgets,
            "recall": self.recall,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iou");
        for n in &self.budgets {
            let _ = write!(s, ",R@{n}");
        }
        s.push('\n');
        for (t, row) in self.iou_grid.iter().zip(&self.recall) {
            let _ = write!(s, "{t:.2}");
            for v in row {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    /// Text plots of recall against IoU (one per AR budget) and against
    /// budget at IoU 0.5 and 0.7.
    pub fn ascii_curves(&self) -> String {
        const WIDTH: usize = 50;
        let bar = |v: f64| "#".repeat((v.clamp(0.0, 1.0) * WIDTH as f64).round() as usize);
        let mut s = String::new();
        for &n in &AR_BUDGETS {
            let Some(b) = self.budgets.iter().position(|x| *x == n) else {
                continue;
            };
            let _ = writeln!(s, "recall vs IoU @ {n} proposals (AR {:.4})", self.ar_at(n).unwrap_or(0.0));
            for (t, row) in self.iou_grid.iter().zip(&self.recall) {
                let _ = writeln!(s, "  {t:.2} |{:<WIDTH$}| {:.4}", bar(row[b]), row[b]);
            }
            s.push('\n');
        }
        for t_want in [0.5, 0.7] {
            let Some(t) = self.iou_grid.iter().position(|x| (x - t_want).abs() < 1e-9) else {
                continue;
            };
            let _ = writeln!(s, "recall vs proposals @ IoU {t_want:.2}");
            for (n, v) in self.budgets.iter().zip(&self.recall[t]) {
                let _ = writeln!(s, "  {n:>5} |{:<WIDTH$}| {v:.4}", bar(*v));
            }
            s.push('\n');
        }
        s
    }
}
