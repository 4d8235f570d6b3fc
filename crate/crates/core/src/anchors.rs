//! Anchor templates per pyramid level and their dense grid instantiation.

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;

pub const NUM_LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    /// Anchor side lengths per level (level 1 first). An empty level has no
    /// anchors and no prediction head.
    pub scales: [Vec<f64>; NUM_LEVELS],
    pub ratios: Vec<f64>,
    pub strides: [usize; NUM_LEVELS],
}

impl Default for AnchorSpec {
    /// Two scales per level, five width/height ratios: 10 templates per
    /// level and 30 overall.
    fn default() -> Self {
        Self {
            scales: [vec![16.0, 32.0], vec![64.0, 128.0], vec![256.0, 512.0]],
            ratios: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            strides: [8, 16, 32],
        }
    }
}

impl AnchorSpec {
    /// Every scale placed on the coarsest level, as in a plain single-output
    /// zoom-out network.
    pub fn all_on_top() -> Self {
        let d = Self::default();
        let all: Vec<f64> = d.scales.iter().flatten().copied().collect();
        Self {
            scales: [Vec::new(), Vec::new(), all],
            ..d
        }
    }

    pub fn templates_per_level(&self, level: usize) -> usize {
        self.scales[level - 1].len() * self.ratios.len()
    }

    pub fn total_templates(&self) -> usize {
        (1..=NUM_LEVELS).map(|m| self.templates_per_level(m)).sum()
    }

    pub fn has_level(&self, level: usize) -> bool {
        !self.scales[level - 1].is_empty()
    }

    pub fn stride(&self, level: usize) -> usize {
        self.strides[level - 1]
    }

    /// Template (width, height) pairs of one level, scale-major.
    pub fn templates(&self, level: usize) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.templates_per_level(level));
        for &s in &self.scales[level - 1] {
            for &r in &self.ratios {
                out.push((s * r.sqrt(), s / r.sqrt()));
            }
        }
        out
    }

    /// Level whose scale set is nearest (in log space) to `size`, the square
    /// root of a box area. With the default spec the boundaries fall at the
    /// geometric means 45.25 and 181.
    pub fn level_for_size(&self, size: f64) -> usize {
        let ls = size.max(1e-9).ln();
        let mut best = (f64::INFINITY, NUM_LEVELS);
        for m in 1..=NUM_LEVELS {
            for s in &self.scales[m - 1] {
                let d = (s.ln() - ls).abs();
                if d < best.0 {
                    best = (d, m);
                }
            }
        }
        best.1
    }
}

/// Dense anchors of one level. Index order is (row, column, template).
#[derive(Clone, Debug, Default)]
pub struct AnchorGrid {
    pub level: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub templates: usize,
    pub boxes: Vec<BBox>,
    /// False for anchors that cross the image border; they are kept so the
    /// anchor geometry stays regular.
    pub inside: Vec<bool>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn index(&self, row: usize, col: usize, template: usize) -> usize {
        (row * self.feat_w + col) * self.templates + template
    }

    /// Inverse of [`AnchorGrid::index`].
    pub fn position(&self, index: usize) -> (usize, usize, usize) {
        let t = index % self.templates;
        let cell = index / self.templates;
        (cell / self.feat_w, cell % self.feat_w, t)
    }
}

pub fn generate_anchors(
    spec: &AnchorSpec,
    level: usize,
    feat_h: usize,
    feat_w: usize,
    image_h: usize,
    image_w: usize,
) -> AnchorGrid {
    let stride = spec.stride(level) as f64;
    let templates = spec.templates(level);
    let mut boxes = Vec::with_capacity(feat_h * feat_w * templates.len());
    let mut inside = Vec::with_capacity(boxes.capacity());
    for i in 0..feat_h {
        for j in 0..feat_w {
            let (cx, cy) = (stride * (j as f64 + 0.5), stride * (i as f64 + 0.5));
            for &(w, h) in &templates {
                let b = BBox::from_center(cx, cy, w, h).with_level(level as u8);
                inside.push(b.inside(image_w as f64, image_h as f64));
                boxes.push(b);
            }
        }
    }
    AnchorGrid {
        level,
        feat_h,
        feat_w,
        templates: templates.len(),
        boxes,
        inside,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirty_templates_ten_per_level() {
        let s = AnchorSpec::default();
        assert_eq!(s.total_templates(), 30);
        for m in 1..=3 {
            assert_eq!(s.templates_per_level(m), 10);
        }
        assert_eq!(AnchorSpec::all_on_top().templates_per_level(3), 30);
        assert_eq!(AnchorSpec::all_on_top().templates_per_level(1), 0);
    }

    #[test]
    fn four_by_four_level_one() {
        let g = generate_anchors(&AnchorSpec::default(), 1, 4, 4, 32, 32);
        assert_eq!(g.len(), 160);
        assert_eq!(g.position(g.index(2, 3, 7)), (2, 3, 7));
    }

    #[test]
    fn unit_ratio_scale_16_is_square() {
        let g = generate_anchors(&AnchorSpec::default(), 1, 1, 1, 8, 8);
        // scale 16, ratio index 2 (ratio 1)
        let b = g.boxes[2];
        assert_eq!((b.width(), b.height()), (16.0, 16.0));
        assert_eq!(b.center(), (4.0, 4.0));
        assert!(!g.inside[2]);
    }

    #[test]
    fn routing_boundaries() {
        let s = AnchorSpec::default();
        assert_eq!(s.level_for_size(10.0), 1);
        assert_eq!(s.level_for_size(45.0), 1);
        assert_eq!(s.level_for_size(46.0), 2);
        assert_eq!(s.level_for_size(180.0), 2);
        assert_eq!(s.level_for_size(182.0), 3);
        assert_eq!(AnchorSpec::all_on_top().level_for_size(10.0), 3);
    }
}
