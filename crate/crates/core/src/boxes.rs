//! Axis-aligned boxes in pixel coordinates and the center/size offset
//! parameterization used for box regression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: Option<f64>,
    pub level: Option<u8>,
}

pub type BoxList = Vec<BBox>;

/// Regression offsets (tx, ty, tw, th).
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Offsets(pub [f64; 4]);

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            score: None,
            level: None,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn with_level(mut self, level: u8) -> Self {
        self.level = Some(level);
        self
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
            ..*self
        }
    }

    pub fn scaled(&self, factor: f64) -> BBox {
        BBox {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
            ..*self
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
            ..*self
        }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// `[x1, y1, x2, y2, score]` interchange form; a missing score is 0.
    pub fn to_array(&self) -> [f64; 5] {
        [self.x1, self.y1, self.x2, self.y2, self.score.unwrap_or(0.0)]
    }

    pub fn from_slice(v: &[f64]) -> Result<BBox> {
        match v {
            [x1, y1, x2, y2] => Ok(BBox::new(*x1, *y1, *x2, *y2)),
            [x1, y1, x2, y2, s] => Ok(BBox::new(*x1, *y1, *x2, *y2).with_score(*s)),
            _ => Err(Error::Format(format!(
                "box must have 4 or 5 numbers, got {}",
                v.len()
            ))),
        }
    }
}

/// Intersection over union; 0 when either box is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn encode_offsets(anchor: &BBox, gt: &BBox) -> Result<Offsets> {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (gw, gh) = (gt.width(), gt.height());
    if !(aw > 0.0 && ah > 0.0) {
        return Err(Error::Encoding(format!("anchor has non-positive size {aw}x{ah}")));
    }
    if !(gw > 0.0 && gh > 0.0) {
        return Err(Error::Encoding(format!("ground truth has non-positive size {gw}x{gh}")));
    }
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    Ok(Offsets([
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gw / aw).ln(),
        (gh / ah).ln(),
    ]))
}

pub fn decode_offsets(anchor: &BBox, t: &Offsets) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (ax, ay) = anchor.center();
    let [tx, ty, tw, th] = t.0;
    BBox::from_center(ax + tx * aw, ay + ty * ah, aw * tw.exp(), ah * th.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_disjoint() {
        let a = BBox::new(1.0, 2.0, 5.0, 7.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(10.0, 10.0, 12.0, 12.0)), 0.0);
        // touching edges share no area
        assert_eq!(iou(&a, &BBox::new(5.0, 2.0, 6.0, 7.0)), 0.0);
    }

    #[test]
    fn overlap_of_offset_squares() {
        // overlap 1, union 4 + 4 - 1 = 7
        let v = iou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn encode_identity_and_doubling() {
        let a = BBox::new(10.0, 10.0, 26.0, 42.0);
        assert_eq!(encode_offsets(&a, &a).unwrap().0, [0.0; 4]);
        let g = BBox::from_center(18.0, 26.0, 32.0, 32.0);
        let t = encode_offsets(&a, &g).unwrap().0;
        assert!((t[2] - 2f64.ln()).abs() < 1e-12);
        assert!(t[0].abs() < 1e-12 && t[1].abs() < 1e-12 && t[3].abs() < 1e-12);
    }

    #[test]
    fn encode_rejects_degenerate_gt() {
        let a = BBox::new(0.0, 0.0, 4.0, 4.0);
        assert!(encode_offsets(&a, &BBox::new(1.0, 1.0, 1.0, 3.0)).is_err());
    }

    #[test]
    fn clip_keeps_metadata() {
        let b = BBox::new(-3.0, 2.0, 40.0, 9.0).with_score(0.5).with_level(2);
        let c = b.clip(32.0, 32.0);
        assert_eq!(c.coords(), [0.0, 2.0, 32.0, 9.0]);
        assert_eq!((c.score, c.level), (Some(0.5), Some(2)));
    }
}
