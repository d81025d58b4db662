use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalised image coordinates (centre and size).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Shape(format!(
                "box {self:?} needs finite positive size"
            )));
        }
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            return Err(Error::Shape(format!(
                "box {self:?} has centre outside [0, 1]"
            )));
        }
        Ok(())
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let ih = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        let inter = iw * ih;
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    /// 1-based, unique within an image, ordered by descending score.
    pub index: usize,
}

impl Detection {
    /// `Cell: <score> <index>`
    pub fn label(&self) -> String {
        format!("Cell: {:.4} {}", self.score, self.index)
    }
}

/// Sorts by descending score (ties by ascending current index) and
/// renumbers from 1.
pub fn reindex_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    for (i, d) in dets.iter_mut().enumerate() {
        d.index = i + 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0);
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(a.iou(&a), 1.0);
        let c = BBox::from_corners(5.0, 5.0, 6.0, 6.0);
        assert_eq!(a.iou(&c), 0.0);
        // touching edges
        let d = BBox::from_corners(2.0, 0.0, 3.0, 2.0);
        assert_eq!(a.iou(&d), 0.0);
    }

    #[test]
    fn validation() {
        assert!(BBox::new(0.5, 0.5, 0.1, 0.1).validate().is_ok());
        assert!(BBox::new(0.5, 0.5, 0.0, 0.1).validate().is_err());
        assert!(BBox::new(1.5, 0.5, 0.1, 0.1).validate().is_err());
        assert!(BBox::new(f64::NAN, 0.5, 0.1, 0.1).validate().is_err());
    }

    #[test]
    fn label_format() {
        let d = Detection {
            bbox: BBox::new(0.5, 0.5, 0.1, 0.1),
            class_id: 0,
            score: 0.91234,
            index: 3,
        };
        assert_eq!(d.label(), "Cell: 0.9123 3");
    }
}
