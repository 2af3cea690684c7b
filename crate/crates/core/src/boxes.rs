//! Axis-aligned box arithmetic shared by matching, evaluation and NMS.

use serde::{Deserialize, Serialize};

/// A box in pixel coordinates, (x, y) top-left, width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPx {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxPx {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        if self.w > 0.0 && self.h > 0.0 {
            self.w * self.h
        } else {
            0.0
        }
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Clip to an image of the given size; `None` when nothing remains.
    pub fn clip_to(&self, width: f64, height: f64) -> Option<BoxPx> {
        let x1 = self.x.max(0.0);
        let y1 = self.y.max(0.0);
        let x2 = self.x2().min(width);
        let y2 = self.y2().min(height);
        if x2 > x1 && y2 > y1 {
            Some(BoxPx::new(x1, y1, x2 - x1, y2 - y1))
        } else {
            None
        }
    }
}

/// Intersection-over-union. Zero-area boxes yield 0 by convention.
pub fn iou(a: &BoxPx, b: &BoxPx) -> f64 {
    let area_a = a.area();
    let area_b = b.area();
    if area_a == 0.0 || area_b == 0.0 {
        return 0.0;
    }
    let ix = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let iy = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (area_a + area_b - inter)
}

/// For each ground-truth box, the index of the best proposal with
/// IoU strictly above `threshold`, or `None`. Ties break to the lowest
/// proposal index.
pub fn match_positive_proposals(
    proposals: &[BoxPx],
    gts: &[BoxPx],
    threshold: f64,
) -> Vec<Option<(usize, f64)>> {
    gts.iter()
        .map(|gt| {
            let mut best: Option<(usize, f64)> = None;
            for (idx, prop) in proposals.iter().enumerate() {
                let ov = iou(prop, gt);
                let better = match best {
                    None => ov > threshold,
                    Some((_, b)) => ov > b,
                };
                if better && ov > threshold {
                    best = Some((idx, ov));
                }
            }
            best
        })
        .collect()
}

/// Class-agnostic greedy NMS; input is (index, score, box), output the kept
/// indices in descending score order.
pub fn nms(items: &[(usize, f64, BoxPx)], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b]
            .1
            .partial_cmp(&items[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(items[a].0.cmp(&items[b].0))
    });
    let mut kept: Vec<usize> = Vec::new();
    let mut suppressed = vec![false; items.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(items[i].0);
        for &j in &order {
            if j != i && !suppressed[j] && iou(&items[i].2, &items[j].2) >= iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_is_one() {
        let b = BoxPx::new(3.0, 4.0, 10.0, 5.0);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = BoxPx::new(0.0, 0.0, 2.0, 2.0);
        let b = BoxPx::new(5.0, 5.0, 2.0, 2.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_overlap_hand_value() {
        // (0,0,2,2) vs (1,0,2,2): inter 1x2=2, union 4+4-2=6.
        let a = BoxPx::new(0.0, 0.0, 2.0, 2.0);
        let b = BoxPx::new(1.0, 0.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn iou_zero_area_is_zero() {
        let a = BoxPx::new(0.0, 0.0, 0.0, 2.0);
        let b = BoxPx::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_symmetric() {
        let a = BoxPx::new(1.0, 2.0, 7.0, 3.0);
        let b = BoxPx::new(2.0, 1.0, 4.0, 9.0);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn match_exact_proposal() {
        let gt = BoxPx::new(10.0, 10.0, 8.0, 8.0);
        let matched = match_positive_proposals(&[gt], &[gt], 0.5);
        assert_eq!(matched[0].unwrap().0, 0);
        assert_eq!(matched[0].unwrap().1, 1.0);
    }

    #[test]
    fn match_below_threshold_is_none() {
        let gt = BoxPx::new(0.0, 0.0, 10.0, 10.0);
        let far = BoxPx::new(8.0, 8.0, 10.0, 10.0);
        let matched = match_positive_proposals(&[far], &[gt], 0.5);
        assert!(matched[0].is_none());
    }

    #[test]
    fn match_tie_breaks_to_lowest_index() {
        let gt = BoxPx::new(0.0, 0.0, 10.0, 10.0);
        let p = BoxPx::new(1.0, 0.0, 10.0, 10.0);
        let matched = match_positive_proposals(&[p, p], &[gt], 0.5);
        assert_eq!(matched[0].unwrap().0, 0);
    }

    #[test]
    fn match_empty_proposals() {
        let gt = BoxPx::new(0.0, 0.0, 10.0, 10.0);
        let matched = match_positive_proposals(&[], &[gt], 0.5);
        assert!(matched[0].is_none());
    }

    #[test]
    fn nms_keeps_one_of_identical() {
        let b = BoxPx::new(0.0, 0.0, 4.0, 4.0);
        let kept = nms(&[(0, 0.9, b), (1, 0.8, b)], 0.5);
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn clip_outside_is_none() {
        let b = BoxPx::new(-10.0, -10.0, 5.0, 5.0);
        assert!(b.clip_to(64.0, 64.0).is_none());
    }
}
