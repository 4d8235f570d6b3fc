//! RoI max pooling on the level feature maps.
//!
//! A RoI is projected onto a map of known stride (`floor(x1 / s)` to
//! `ceil(x2 / s)`, exclusive), then split into an `out_h × out_w` grid of
//! sub-windows whose edges are `floor`/`ceil` of the even partition, so every
//! sub-window holds at least one cell. Each output is the max of its window.

use crate::anchors::AnchorSpec;
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoiWindow {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// The projection collapsed to zero area and was clamped to one cell.
    pub degenerate: bool,
}

/// Projects a RoI in image coordinates onto a `feat_h × feat_w` map.
pub fn project_roi(roi: &BBox, stride: usize, feat_h: usize, feat_w: usize) -> RoiWindow {
    let s = stride as f64;
    let span = |lo: f64, hi: f64, len: usize| {
        let a = (lo / s).floor().clamp(0.0, len as f64) as usize;
        let b = (hi / s).ceil().clamp(0.0, len as f64) as usize;
        (a, b)
    };
    let (mut x0, mut x1) = span(roi.x1, roi.x2, feat_w);
    let (mut y0, mut y1) = span(roi.y1, roi.y2, feat_h);
    let mut degenerate = false;
    if x1 <= x0 {
        x0 = x0.min(feat_w - 1);
        x1 = x0 + 1;
        degenerate = true;
    }
    if y1 <= y0 {
        y0 = y0.min(feat_h - 1);
        y1 = y0 + 1;
        degenerate = true;
    }
    RoiWindow { x0, y0, x1, y1, degenerate }
}

fn bin(start: usize, len: usize, i: usize, n: usize) -> (usize, usize) {
    let a = start + (i * len) / n;
    let b = start + ((i + 1) * len).div_ceil(n);
    (a, b.max(a + 1))
}

/// Flat source index of the max of every output cell, laid out as
/// `(roi, channel, oy, ox)` over a `(1, C, H, W)` input.
pub fn roi_pool_argmax<T: Element>(
    features: &Tensor<T>,
    windows: &[RoiWindow],
    out: (usize, usize),
) -> Result<Vec<usize>> {
    let [n, c, h, w] = features.shape();
    if n != 1 {
        return Err(Error::dim("roi_pool", format!("expects a single image (axis 0), got {n}")));
    }
    if out.0 == 0 || out.1 == 0 {
        return Err(Error::dim("roi_pool", "output size must be positive"));
    }
    let data = features.data();
    let mut idx = Vec::with_capacity(windows.len() * c * out.0 * out.1);
    for win in windows {
        if win.x1 > w || win.y1 > h {
            return Err(Error::dim("roi_pool", format!("window {win:?} outside {h}x{w} map")));
        }
        for ch in 0..c {
            let plane = ch * h * w;
            for oy in 0..out.0 {
                let (ya, yb) = bin(win.y0, win.y1 - win.y0, oy, out.0);
                for ox in 0..out.1 {
                    let (xa, xb) = bin(win.x0, win.x1 - win.x0, ox, out.1);
                    let mut best = plane + ya * w + xa;
                    for y in ya..yb {
                        for x in xa..xb {
                            let i = plane + y * w + x;
                            if data[i] > data[best] {
                                best = i;
                            }
                        }
                    }
                    idx.push(best);
                }
            }
        }
    }
    Ok(idx)
}

/// Pools every RoI from one map. Returns `(rois, C, out_h, out_w)` and a
/// degenerate flag per RoI.
pub fn roi_pool<T: Element>(
    graph: &mut Graph<T>,
    features: Var,
    rois: &[BBox],
    stride: usize,
    out: (usize, usize),
) -> Result<(Var, Vec<bool>)> {
    let [_, c, h, w] = graph.value(features).shape();
    let windows: Vec<RoiWindow> = rois.iter().map(|r| project_roi(r, stride, h, w)).collect();
    let idx = roi_pool_argmax(graph.value(features), &windows, out)?;
    let v = graph.route(features, [rois.len(), c, out.0, out.1], idx)?;
    Ok((v, windows.iter().map(|w| w.degenerate).collect()))
}

/// Level (1-based) each RoI is pooled from: the one whose anchor scales are
/// nearest to `sqrt(area)`.
pub fn route_rois(spec: &AnchorSpec, rois: &[BBox]) -> Vec<usize> {
    rois.iter().map(|r| spec.level_for_size(r.area().max(0.0).sqrt())).collect()
}
