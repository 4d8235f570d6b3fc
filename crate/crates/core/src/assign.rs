//! Anchor labelling with a gray band, negative/positive equilibrium
//! sampling, and dynamic training-scale selection.

use rand::seq::index::sample;
use rand::Rng;

use crate::anchors::AnchorGrid;
use crate::boxes::{encode_offsets, iou, BBox, Offsets};

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentConfig {
    pub iou_pos: f64,
    pub iou_gray: (f64, f64),
    pub iou_neg: f64,
    pub neg_to_pos_max: usize,
    pub gray_fraction: f64,
    pub batch_cap: usize,
    /// Negatives drawn at a level without positives.
    pub empty_floor: usize,
    /// When false the gray band is never sampled (two-class training).
    pub use_gray: bool,
    /// When false negatives fill the batch instead of being capped at
    /// `neg_to_pos_max` per positive.
    pub equilibrium: bool,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        Self {
            iou_pos: 0.60,
            iou_gray: (0.35, 0.55),
            iou_neg: 0.25,
            neg_to_pos_max: 2,
            gray_fraction: 0.5,
            batch_cap: 300,
            empty_floor: 32,
            use_gray: true,
            equilibrium: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AnchorLabel {
    Negative = 0,
    Gray = 1,
    Positive = 2,
}

impl AnchorLabel {
    pub fn class_index(self) -> usize {
        self as usize
    }
}

/// Band of an anchor by its best IoU over ground truths, before sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Positive,
    Gray,
    Negative,
    /// Between the bands; never sampled.
    Excluded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub anchor: usize,
    pub label: AnchorLabel,
    pub gt: Option<usize>,
    pub target: Option<Offsets>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelTargets {
    /// Sorted by anchor index.
    pub samples: Vec<Sample>,
}

impl LevelTargets {
    pub fn count(&self, label: AnchorLabel) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn band(max_iou: f64, cfg: &AssignmentConfig) -> Band {
    if max_iou >= cfg.iou_pos {
        Band::Positive
    } else if max_iou >= cfg.iou_gray.0 && max_iou <= cfg.iou_gray.1 {
        Band::Gray
    } else if max_iou < cfg.iou_neg {
        Band::Negative
    } else {
        Band::Excluded
    }
}

/// Max IoU and the argmax gt (lowest index on ties) for every anchor.
fn best_gt(anchors: &[BBox], gts: &[BBox]) -> Vec<(f64, Option<usize>)> {
    anchors
        .iter()
        .map(|a| {
            let mut best = (0.0, None);
            for (g, gt) in gts.iter().enumerate() {
                let v = iou(a, gt);
                if v > best.0 {
                    best = (v, Some(g));
                }
            }
            best
        })
        .collect()
}

fn pick<R: Rng + ?Sized>(pool: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if k >= pool.len() {
        return pool.to_vec();
    }
    sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

/// Labels and samples anchors on every level.
///
/// Each ground truth's best in-image anchor over all levels is forced
/// positive; remaining in-image anchors are positive above `iou_pos`.
/// Quotas are enforced per level.
pub fn assign<R: Rng + ?Sized>(
    grids: &[AnchorGrid],
    gts: &[BBox],
    cfg: &AssignmentConfig,
    rng: &mut R,
) -> Vec<LevelTargets> {
    let best: Vec<Vec<(f64, Option<usize>)>> = grids.iter().map(|g| best_gt(&g.boxes, gts)).collect();

    // forced positives: (level slot, anchor) -> gt
    let mut forced: Vec<Vec<(usize, usize)>> = vec![Vec::new(); grids.len()];
    for (gi, gt) in gts.iter().enumerate() {
        let mut top: Option<(f64, usize, usize)> = None;
        for (li, grid) in grids.iter().enumerate() {
            for (ai, a) in grid.boxes.iter().enumerate() {
                if !grid.inside[ai] {
                    continue;
                }
                let v = iou(a, gt);
                if v > 0.0 && top.is_none_or(|(b, _, _)| v > b) {
                    top = Some((v, li, ai));
                }
            }
        }
        if let Some((_, li, ai)) = top {
            if !forced[li].iter().any(|&(a, _)| a == ai) {
                forced[li].push((ai, gi));
            }
        }
    }

    let pn_cap = (cfg.batch_cap as f64 / (1.0 + cfg.gray_fraction)).floor() as usize;
    grids
        .iter()
        .enumerate()
        .map(|(li, grid)| {
            let mut forced_pos: Vec<usize> = forced[li].iter().map(|&(a, _)| a).collect();
            forced_pos.sort_unstable();
            let mut pos = Vec::new();
            let mut gray = Vec::new();
            let mut neg = Vec::new();
            for (ai, &(m, _)) in best[li].iter().enumerate() {
                if forced_pos.binary_search(&ai).is_ok() {
                    continue;
                }
                match band(m, cfg) {
                    Band::Positive if grid.inside[ai] => pos.push(ai),
                    Band::Positive | Band::Excluded => {}
                    Band::Gray => gray.push(ai),
                    Band::Negative => neg.push(ai),
                }
            }

            let mut chosen_pos = forced_pos.clone();
            chosen_pos.truncate(pn_cap);
            let room = pn_cap - chosen_pos.len();
            chosen_pos.extend(pick(&pos, room, rng));
            let p = chosen_pos.len();

            let n_quota = if gts.is_empty() || p == 0 {
                cfg.empty_floor.min(pn_cap)
            } else if cfg.equilibrium {
                (cfg.neg_to_pos_max * p).min(pn_cap - p)
            } else {
                pn_cap - p
            };
            let chosen_neg = pick(&neg, n_quota, rng);
            let g_quota = if cfg.use_gray && !gts.is_empty() {
                ((p + chosen_neg.len()) as f64 * cfg.gray_fraction).floor() as usize
            } else {
                0
            };
            let chosen_gray = pick(&gray, g_quota, rng);

            let mut samples = Vec::with_capacity(p + chosen_neg.len() + chosen_gray.len());
            for &ai in &chosen_pos {
                let gi = forced[li]
                    .iter()
                    .find(|&&(a, _)| a == ai)
                    .map(|&(_, g)| g)
                    .or(best[li][ai].1)
                    .expect("positive anchor has a matched gt");
                let target = encode_offsets(&grid.boxes[ai], &gts[gi]).ok();
                samples.push(Sample { anchor: ai, label: AnchorLabel::Positive, gt: Some(gi), target });
            }
            for &ai in &chosen_gray {
                samples.push(Sample { anchor: ai, label: AnchorLabel::Gray, gt: None, target: None });
            }
            for &ai in &chosen_neg {
                samples.push(Sample { anchor: ai, label: AnchorLabel::Negative, gt: None, target: None });
            }
            samples.sort_by_key(|s| s.anchor);
            LevelTargets { samples }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainScaleConfig {
    pub target_lo: f64,
    pub target_hi: f64,
    pub min_side: f64,
    pub max_side: f64,
}

impl Default for TrainScaleConfig {
    fn default() -> Self {
        Self {
            target_lo: 64.0,
            target_hi: 128.0,
            min_side: 128.0,
            max_side: 256.0,
        }
    }
}

/// Resize factor that brings one randomly chosen ground truth to a side
/// length in `[target_lo, target_hi]`, then clamps the image's longer side
/// to `[min_side, max_side]`. Returns 1 when there is nothing to scale.
pub fn dynamic_train_scale<R: Rng + ?Sized>(
    image_h: usize,
    image_w: usize,
    gts: &[BBox],
    cfg: &TrainScaleConfig,
    rng: &mut R,
) -> f64 {
    if gts.is_empty() {
        return 1.0;
    }
    let (_, factor) = unclamped_train_scale(gts, cfg, rng);
    let long = image_h.max(image_w) as f64;
    let scaled = long * factor;
    if scaled > cfg.max_side {
        cfg.max_side / long
    } else if scaled < cfg.min_side {
        cfg.min_side / long
    } else {
        factor
    }
}

/// The chosen gt index and the factor before the image-side clamp.
pub fn unclamped_train_scale<R: Rng + ?Sized>(
    gts: &[BBox],
    cfg: &TrainScaleConfig,
    rng: &mut R,
) -> (usize, f64) {
    let gi = rng.random_range(0..gts.len());
    let target = if cfg.target_hi > cfg.target_lo {
        rng.random_range(cfg.target_lo..=cfg.target_hi)
    } else {
        cfg.target_lo
    };
    (gi, target / gts[gi].area().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{generate_anchors, AnchorSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grids(h: usize, w: usize) -> Vec<AnchorGrid> {
        let spec = AnchorSpec::default();
        (1..=3)
            .map(|m| {
                let s = spec.stride(m);
                generate_anchors(&spec, m, h / s, w / s, h, w)
            })
            .collect()
    }

    #[test]
    fn gt_equal_to_anchor_is_positive_with_zero_target() {
        let g = grids(64, 64);
        let anchor = g[0].boxes[g[0].index(3, 3, 7)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = assign(&g, &[anchor], &AssignmentConfig::default(), &mut rng);
        let s = t[0]
            .samples
            .iter()
            .find(|s| s.anchor == g[0].index(3, 3, 7))
            .expect("matching anchor sampled");
        assert_eq!(s.label, AnchorLabel::Positive);
        assert_eq!(s.target.unwrap().0, [0.0; 4]);
    }

    #[test]
    fn band_edges() {
        let c = AssignmentConfig::default();
        assert_eq!(band(0.60, &c), Band::Positive);
        assert_eq!(band(0.58, &c), Band::Excluded);
        assert_eq!(band(0.55, &c), Band::Gray);
        assert_eq!(band(0.35, &c), Band::Gray);
        assert_eq!(band(0.30, &c), Band::Excluded);
        assert_eq!(band(0.25, &c), Band::Excluded);
        assert_eq!(band(0.2499, &c), Band::Negative);
    }

    #[test]
    fn no_gts_gives_floor_of_negatives() {
        let g = grids(64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = assign(&g, &[], &AssignmentConfig::default(), &mut rng);
        for lt in &t {
            assert!(lt.samples.iter().all(|s| s.label == AnchorLabel::Negative));
            assert_eq!(lt.samples.len(), 32.min(g[0].len()));
        }
    }

    #[test]
    fn train_scale_examples() {
        let cfg = TrainScaleConfig { target_lo: 64.0, target_hi: 64.0, min_side: 1.0, max_side: 1e9 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = dynamic_train_scale(256, 256, &[BBox::new(0.0, 0.0, 64.0, 64.0)], &cfg, &mut rng);
        assert!((f - 1.0).abs() < 1e-12);
        let f = dynamic_train_scale(512, 512, &[BBox::new(0.0, 0.0, 256.0, 256.0)], &cfg, &mut rng);
        assert!((f - 0.25).abs() < 1e-12);
        assert_eq!(dynamic_train_scale(256, 256, &[], &cfg, &mut rng), 1.0);
    }

    #[test]
    fn train_scale_clamps_long_side() {
        let cfg = TrainScaleConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // tiny object would need 8x upscaling
        let f = dynamic_train_scale(256, 200, &[BBox::new(0.0, 0.0, 10.0, 10.0)], &cfg, &mut rng);
        assert!((f - 1.0).abs() < 1e-12);
        let f = dynamic_train_scale(256, 256, &[BBox::new(0.0, 0.0, 250.0, 250.0)], &cfg, &mut rng);
        assert!((f - 0.5).abs() < 1e-12);
    }
}
