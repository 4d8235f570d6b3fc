//! From head outputs to a ranked proposal list.
//!
//! Each level is decoded and pruned by its own NMS. The survivors of all
//! levels (and of every test scale) are merged after adding a per-level
//! score bias, and a final NMS whose IoU threshold depends on the proposal
//! budget picks the output. Biases and thresholds are chosen on a held-out
//! calibration split: biases first (at a fixed threshold), thresholds second.

use std::io::{BufRead, Write};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorGrid, NUM_LEVELS};
use crate::boxes::{decode_offsets, iou, BBox, Offsets};
use crate::error::{Error, Result};
use crate::graph::{Graph, NormMode};
use crate::image::{image_to_tensor, RgbImage};
use crate::layers::Ctx;
use crate::corpus::Corpus;
use crate::metrics::{ar_counts, ImageMatches, RecallReport, AR_BUDGETS};
use crate::network::{ZipNet, NETWORK_STRIDE};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Largest log-scale offset applied when decoding (a 1000/16 size ratio).
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

/// Greedy NMS. Returns indices into `boxes` of the kept boxes, best first.
/// Boxes are ranked by score (missing = 0), equal scores by lower index; a
/// box is kept when its IoU with every box kept so far is at most
/// `iou_thresh`. Stops after `top_k` boxes.
pub fn nms(boxes: &[BBox], iou_thresh: f64, top_k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    let score = |i: usize| boxes[i].score.unwrap_or(0.0);
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::with_capacity(top_k.min(boxes.len()));
    for i in order {
        if kept.len() >= top_k {
            break;
        }
        let b = &boxes[i];
        if kept.iter().all(|&k| iou(&boxes[k], b) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms_boxes(boxes: &[BBox], iou_thresh: f64, top_k: usize) -> Vec<BBox> {
    nms(boxes, iou_thresh, top_k).into_iter().map(|i| boxes[i]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    /// Score and source level live on the box.
    pub bbox: BBox,
    /// Longer image side the proposal was found at.
    pub scale: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub image_id: u64,
    pub proposals: Vec<Proposal>,
}

impl ProposalSet {
    pub fn boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub level_nms_iou: f64,
    pub level_top_k: usize,
    pub budgets: Vec<usize>,
    /// Per-budget final NMS thresholds; budgets without an entry use
    /// `default_final_iou`.
    pub final_iou: Vec<(usize, f64)>,
    pub default_final_iou: f64,
    pub bias: [f64; NUM_LEVELS],
    pub scales: Vec<usize>,
    /// Normalize with each image's own batch-norm statistics instead of the
    /// running averages. Training sees one image per step, so the running
    /// averages describe no single image well.
    pub image_stats: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            level_nms_iou: 0.5,
            level_top_k: 2000,
            budgets: AR_BUDGETS.to_vec(),
            final_iou: Vec::new(),
            default_final_iou: 0.5,
            bias: [0.0; NUM_LEVELS],
            scales: vec![256],
            image_stats: true,
        }
    }
}

impl InferenceConfig {
    pub fn final_iou_for(&self, budget: usize) -> f64 {
        self.final_iou
            .iter()
            .find(|(b, _)| *b == budget)
            .map(|(_, t)| *t)
            .unwrap_or(self.default_final_iou)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.scales.iter().find(|&&s| s < NETWORK_STRIDE) {
            return Err(Error::Config(format!("test scale {s} is below the network stride {NETWORK_STRIDE}")));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("no test scales".into()));
        }
        Ok(())
    }
}

fn positive_prob(logits: &[f64], pos: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    (logits[pos] - m).exp() / z
}

/// Decodes every anchor of one level into a scored, clipped box. Boxes
/// that clip to zero area are dropped.
pub fn decode_level(
    cls: &Tensor<f32>,
    reg: &Tensor<f32>,
    grid: &AnchorGrid,
    classes: usize,
    image_h: f64,
    image_w: f64,
) -> Result<Vec<BBox>> {
    let [_, ck, h, w] = cls.shape();
    if ck != grid.templates * classes || h != grid.feat_h || w != grid.feat_w || reg.c() != grid.templates * 4 {
        return Err(Error::dim(
            "decode_level",
            format!("head {ck}x{h}x{w} vs anchors {}x{}x{}", grid.templates, grid.feat_h, grid.feat_w),
        ));
    }
    let mut out = Vec::with_capacity(grid.len());
    let mut logits = vec![0.0; classes];
    for (ai, anchor) in grid.boxes.iter().enumerate() {
        let (row, col, t) = grid.position(ai);
        for (c, l) in logits.iter_mut().enumerate() {
            *l = cls.at(0, t * classes + c, row, col) as f64;
        }
        let score = positive_prob(&logits, classes - 1);
        let mut off = [0.0; 4];
        for (r, o) in off.iter_mut().enumerate() {
            *o = reg.at(0, t * 4 + r, row, col) as f64;
        }
        off[2] = off[2].min(MAX_LOG_SCALE);
        off[3] = off[3].min(MAX_LOG_SCALE);
        let b = decode_offsets(anchor, &Offsets(off)).clip(image_w, image_h);
        if b.is_valid() {
            out.push(b.with_score(score).with_level(grid.level as u8));
        }
    }
    Ok(out)
}

/// Per-level candidates of one image at one scale, in original image
/// coordinates.
pub fn per_level_decode_and_filter(
    net: &ZipNet,
    store: &ParamStore<f32>,
    image: &RgbImage,
    scale: usize,
    cfg: &InferenceConfig,
) -> Result<[Vec<Proposal>; NUM_LEVELS]> {
    if scale < NETWORK_STRIDE {
        return Err(Error::Config(format!("test scale {scale} is below the network stride {NETWORK_STRIDE}")));
    }
    let factor = scale as f64 / image.height.max(image.width) as f64;
    let (img, fy, fx) = image.rescale(factor);
    let input = image_to_tensor::<f32>(&img);
    let grids = net.anchor_grids_for(input.h(), input.w(), img.height, img.width);
    let mut graph = Graph::new();
    // statistics-only: the produced running-stat updates are dropped
    let mode = if cfg.image_stats { NormMode::Train } else { NormMode::Eval };
    let mut ctx = Ctx::new(&mut graph, store, mode);
    let x = ctx.graph.input(input);
    let outs = net.forward_backbone(&mut ctx, x)?;
    let mut levels: [Vec<Proposal>; NUM_LEVELS] = Default::default();
    for (m, level) in levels.iter_mut().enumerate() {
        let (Some(c), Some(r)) = (outs.cls[m], outs.reg[m]) else {
            continue;
        };
        let boxes = decode_level(
            graph.value(c),
            graph.value(r),
            &grids[m],
            net.cfg.num_classes,
            img.height as f64,
            img.width as f64,
        )?;
        let (h, w) = (image.height as f64, image.width as f64);
        *level = nms_boxes(&boxes, cfg.level_nms_iou, cfg.level_top_k)
            .into_iter()
            .map(|b| {
                let back = BBox::new(b.x1 / fx, b.y1 / fy, b.x2 / fx, b.y2 / fy).clip(w, h);
                Proposal {
                    bbox: BBox { score: b.score, level: b.level, ..back },
                    scale,
                }
            })
            .collect();
    }
    Ok(levels)
}

/// Runs every scale and unions the per-level candidates.
pub fn multi_scale_levels(
    net: &ZipNet,
    store: &ParamStore<f32>,
    image: &RgbImage,
    cfg: &InferenceConfig,
) -> Result<[Vec<Proposal>; NUM_LEVELS]> {
    cfg.validate()?;
    let mut all: [Vec<Proposal>; NUM_LEVELS] = Default::default();
    for &s in &cfg.scales {
        let levels = per_level_decode_and_filter(net, store, image, s, cfg)?;
        for (a, l) in all.iter_mut().zip(levels) {
            a.extend(l);
        }
    }
    Ok(all)
}

/// Adds the level biases (scores clipped to [0, 1]), concatenates levels in
/// order, and keeps the top `budget` after NMS at `iou_thresh`.
pub fn merge_and_final_nms(
    levels: &[Vec<Proposal>; NUM_LEVELS],
    bias: &[f64; NUM_LEVELS],
    iou_thresh: f64,
    budget: usize,
) -> Vec<Proposal> {
    let merged: Vec<Proposal> = levels
        .iter()
        .zip(bias)
        .flat_map(|(l, b)| {
            l.iter().map(move |p| {
                let s = (p.bbox.score.unwrap_or(0.0) + b).clamp(0.0, 1.0);
                Proposal { bbox: p.bbox.with_score(s), ..*p }
            })
        })
        .collect();
    let boxes: Vec<BBox> = merged.iter().map(|p| p.bbox).collect();
    nms(&boxes, iou_thresh, budget).into_iter().map(|i| merged[i]).collect()
}

/// Full pipeline for one image at one budget.
pub fn multi_scale_propose(
    net: &ZipNet,
    store: &ParamStore<f32>,
    image_id: u64,
    image: &RgbImage,
    cfg: &InferenceConfig,
    budget: usize,
) -> Result<ProposalSet> {
    let levels = multi_scale_levels(net, store, image, cfg)?;
    Ok(ProposalSet {
        image_id,
        proposals: merge_and_final_nms(&levels, &cfg.bias, cfg.final_iou_for(budget), budget),
    })
}

/// Per-level candidates and ground truth of one calibration image.
#[derive(Clone, Debug)]
pub struct CalibrationImage {
    pub levels: [Vec<Proposal>; NUM_LEVELS],
    pub gts: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasCandidate {
    pub bias: [f64; NUM_LEVELS],
    pub ar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCandidate {
    pub budget: usize,
    pub iou: f64,
    pub ar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub bias: [f64; NUM_LEVELS],
    pub final_iou: Vec<(usize, f64)>,
    pub bias_table: Vec<BiasCandidate>,
    pub threshold_table: Vec<ThresholdCandidate>,
}

impl Calibration {
    pub fn apply(&self, cfg: &mut InferenceConfig) {
        cfg.bias = self.bias;
        cfg.final_iou = self.final_iou.clone();
    }
}

/// Symmetric grid `-limit..=limit` in steps of `step`, exact to 1e-9.
pub fn symmetric_grid(limit: f64, step: f64) -> Vec<f64> {
    let n = (limit / step).round() as i64;
    (-n..=n).map(|i| (i as f64 * step * 1e9).round() / 1e9).collect()
}

pub fn threshold_grid() -> Vec<f64> {
    (0..=10).map(|i| (40 + 5 * i) as f64 / 100.0).collect()
}

fn calibration_counts(images: &[CalibrationImage], bias: &[f64; NUM_LEVELS], iou_thresh: f64, max_budget: usize) -> Vec<ImageMatches> {
    images
        .iter()
        .enumerate()
        .map(|(i, im)| {
            let props: Vec<BBox> = merge_and_final_nms(&im.levels, bias, iou_thresh, max_budget)
                .into_iter()
                .map(|p| p.bbox)
                .collect();
            ImageMatches::compute(i as u64, &props, &im.gts, max_budget)
        })
        .collect()
}

/// Grid search of the level-1 and level-2 biases (level 3 fixed at 0) for
/// the best AR at `budget` with a final NMS at `iou_thresh`. Ties keep the
/// candidate with the smallest total |bias|, then the earlier one.
pub fn calibrate_biases(
    images: &[CalibrationImage],
    grid: &[f64],
    iou_thresh: f64,
    budget: usize,
) -> (([f64; NUM_LEVELS], f64), Vec<BiasCandidate>) {
    let mut cands: Vec<[f64; NUM_LEVELS]> = Vec::new();
    for &b1 in grid {
        for &b2 in grid {
            cands.push([b1, b2, 0.0]);
        }
    }
    if images.is_empty() {
        warn!("calibration split is empty; using zero biases");
        return (([0.0; NUM_LEVELS], 0.0), Vec::new());
    }
    cands.sort_by(|a, b| {
        let m = |v: &[f64; 3]| v[0].abs() + v[1].abs();
        m(a).total_cmp(&m(b))
    });
    let mut table = Vec::with_capacity(cands.len());
    let mut best: Option<(usize, [f64; NUM_LEVELS], f64)> = None;
    for c in cands {
        let m = calibration_counts(images, &c, iou_thresh, budget);
        let (hit, total) = ar_counts(&m, budget, None);
        let ar = if total == 0 { 0.0 } else { hit as f64 / (10 * total) as f64 };
        if best.is_none_or(|(h, _, _)| hit > h) {
            best = Some((hit, c, ar));
        }
        table.push(BiasCandidate { bias: c, ar });
    }
    let (_, b, ar) = best.expect("grid is non-empty");
    ((b, ar), table)
}

/// For every budget, the final NMS threshold in `grid` with the best AR at
/// that budget (ties keep the lower threshold).
pub fn calibrate_thresholds(
    images: &[CalibrationImage],
    bias: &[f64; NUM_LEVELS],
    grid: &[f64],
    budgets: &[usize],
) -> (Vec<(usize, f64)>, Vec<ThresholdCandidate>) {
    let max_budget = budgets.iter().copied().max().unwrap_or(0);
    let mut table = Vec::new();
    let mut best: Vec<Option<(usize, f64)>> = vec![None; budgets.len()];
    for &t in grid {
        // the kept list at budget N is a prefix of the list at the largest budget
        let m = calibration_counts(images, bias, t, max_budget);
        for (bi, &n) in budgets.iter().enumerate() {
            let (hit, total) = ar_counts(&m, n, None);
            let ar = if total == 0 { 0.0 } else { hit as f64 / (10 * total) as f64 };
            if best[bi].is_none_or(|(h, _)| hit > h) {
                best[bi] = Some((hit, t));
            }
            table.push(ThresholdCandidate { budget: n, iou: t, ar });
        }
    }
    let chosen = budgets
        .iter()
        .zip(best)
        .map(|(&n, b)| (n, b.map(|(_, t)| t).unwrap_or(0.5)))
        .collect();
    (chosen, table)
}

/// Biases at the base threshold, then per-budget thresholds.
pub fn calibrate(images: &[CalibrationImage], base_iou: f64, bias_budget: usize, budgets: &[usize]) -> Calibration {
    let ((bias, _), bias_table) = calibrate_biases(images, &symmetric_grid(0.2, 0.05), base_iou, bias_budget);
    let (final_iou, threshold_table) = if images.is_empty() {
        (budgets.iter().map(|&n| (n, base_iou)).collect(), Vec::new())
    } else {
        calibrate_thresholds(images, &bias, &threshold_grid(), budgets)
    };
    Calibration { bias, final_iou, bias_table, threshold_table }
}

/// Per-level candidates of every image in a corpus, for calibration.
pub fn collect_calibration(
    net: &ZipNet,
    store: &ParamStore<f32>,
    corpus: &dyn Corpus,
    cfg: &InferenceConfig,
) -> Result<Vec<CalibrationImage>> {
    (0..corpus.len())
        .map(|i| {
            let (_, image, gts) = corpus.get(i)?;
            Ok(CalibrationImage { levels: multi_scale_levels(net, store, &image, cfg)?, gts })
        })
        .collect()
}

/// Proposes on every image of `corpus` at `budget`.
pub fn propose_corpus(
    net: &ZipNet,
    store: &ParamStore<f32>,
    corpus: &dyn Corpus,
    cfg: &InferenceConfig,
    budget: usize,
) -> Result<Vec<ProposalSet>> {
    (0..corpus.len())
        .map(|i| {
            let (id, image, _) = corpus.get(i)?;
            multi_scale_propose(net, store, id, &image, cfg, budget)
        })
        .collect()
}

/// Proposes at `budget` (with that budget's final threshold) and scores the
/// ranked lists against the corpus annotations.
pub fn evaluate_corpus(
    net: &ZipNet,
    store: &ParamStore<f32>,
    corpus: &dyn Corpus,
    cfg: &InferenceConfig,
    budget: usize,
) -> Result<RecallReport> {
    let mut matches = Vec::with_capacity(corpus.len());
    for i in 0..corpus.len() {
        let (id, image, gts) = corpus.get(i)?;
        let set = multi_scale_propose(net, store, id, &image, cfg, budget)?;
        matches.push(ImageMatches::compute(id, &set.boxes(), &gts, budget));
    }
    Ok(RecallReport::from_matches(matches))
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    image_id: u64,
    boxes: Vec<[f64; 5]>,
}

pub fn write_jsonl<W: Write>(out: &mut W, sets: &[ProposalSet]) -> Result<()> {
    for s in sets {
        let rec = JsonlRecord {
            image_id: s.image_id,
            boxes: s.proposals.iter().map(|p| p.bbox.to_array()).collect(),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads proposal records; boxes keep file order, which must be by
/// descending score.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<(u64, Vec<BBox>)>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("proposals line {}: {e}", n + 1)))?;
        let boxes = rec.boxes.iter().map(|b| BBox::from_slice(b)).collect::<Result<Vec<_>>>()?;
        out.push((rec.image_id, boxes));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nms_singleton_and_duplicate() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[a.with_score(0.3)], 0.5, 10), vec![0]);
        assert_eq!(nms(&[a.with_score(0.8), a.with_score(0.9)], 0.5, 10), vec![1]);
    }

    #[test]
    fn equal_scores_keep_lower_index() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).with_score(0.5);
        assert_eq!(nms(&[a, a, a], 0.5, 10), vec![0]);
    }

    #[test]
    fn merge_single_level_is_bias_only() {
        let levels: [Vec<Proposal>; 3] = [
            Vec::new(),
            Vec::new(),
            vec![
                Proposal { bbox: BBox::new(0.0, 0.0, 10.0, 10.0).with_score(0.6), scale: 256 },
                Proposal { bbox: BBox::new(50.0, 50.0, 60.0, 60.0).with_score(0.4), scale: 256 },
            ],
        ];
        let out = merge_and_final_nms(&levels, &[0.0, 0.0, 0.1], 0.5, 10);
        assert_eq!(out.len(), 2);
        assert!((out[0].bbox.score.unwrap() - 0.7).abs() < 1e-12);
        assert!((out[1].bbox.score.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn grids() {
        let g = symmetric_grid(0.2, 0.05);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], -0.2);
        assert_eq!(g[4], 0.0);
        let t = threshold_grid();
        assert_eq!((t[0], t[10], t.len()), (0.4, 0.9, 11));
    }

    #[test]
    fn jsonl_roundtrip() {
        let set = ProposalSet {
            image_id: 4,
            proposals: vec![Proposal { bbox: BBox::new(1.0, 2.0, 3.0, 4.0).with_score(0.5), scale: 256 }],
        };
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[set]).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back[0].0, 4);
        assert_eq!(back[0].1[0].to_array(), [1.0, 2.0, 3.0, 4.0, 0.5]);
    }
}
