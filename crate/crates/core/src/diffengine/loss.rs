//! Scalar loss kernels used by the graph ops.

use super::tensor::ShapeError;
use crate::geometry::Bbox;

/// Numerically stable binary cross entropy on a raw logit.
#[inline]
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Distance-IoU loss `1 - IoU + d^2 / c^2` and its gradient with respect to
/// the predicted corners. `d` is the center distance and `c` the diagonal of
/// the smallest enclosing box.
pub fn diou_with_grad(pred: &Bbox, target: &Bbox) -> Result<(f64, [f64; 4]), ShapeError> {
    if !pred.is_proper() {
        return Err(ShapeError::Degenerate {
            op: "diou_loss",
            detail: format!("degenerate prediction {pred:?}"),
        });
    }
    if !target.is_proper() {
        return Err(ShapeError::invalid(
            "diou_loss",
            format!("degenerate target {target:?}"),
        ));
    }
    let [x1, y1, x2, y2] = pred.to_array();
    let [tx1, ty1, tx2, ty2] = target.to_array();

    // intersection extents; gradient flows only through the active min/max
    let ix1 = x1.max(tx1);
    let ix2 = x2.min(tx2);
    let iy1 = y1.max(ty1);
    let iy2 = y2.min(ty2);
    let (iw, ih) = (ix2 - ix1, iy2 - iy1);
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };
    let area_p = (x2 - x1) * (y2 - y1);
    let area_t = (tx2 - tx1) * (ty2 - ty1);
    let union = area_p + area_t - inter;
    let iou = inter / union;

    let d_inter = if overlapping {
        [
            if x1 > tx1 { -ih } else { 0.0 },
            if y1 > ty1 { -iw } else { 0.0 },
            if x2 < tx2 { ih } else { 0.0 },
            if y2 < ty2 { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let d_area_p = [-(y2 - y1), -(x2 - x1), y2 - y1, x2 - x1];
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area_p[i] - d_inter[i];
        let d_iou = (d_inter[i] * union - inter * d_union) / (union * union);
        grad[i] = -d_iou;
    }

    let dx = 0.5 * (x1 + x2) - 0.5 * (tx1 + tx2);
    let dy = 0.5 * (y1 + y2) - 0.5 * (ty1 + ty2);
    let dist2 = dx * dx + dy * dy;
    let cw = x2.max(tx2) - x1.min(tx1);
    let ch = y2.max(ty2) - y1.min(ty1);
    let diag2 = cw * cw + ch * ch;

    let d_dist2 = [dx, dy, dx, dy];
    let d_diag2 = [
        if x1 < tx1 { -2.0 * cw } else { 0.0 },
        if y1 < ty1 { -2.0 * ch } else { 0.0 },
        if x2 > tx2 { 2.0 * cw } else { 0.0 },
        if y2 > ty2 { 2.0 * ch } else { 0.0 },
    ];
    for i in 0..4 {
        grad[i] += (d_dist2[i] * diag2 - dist2 * d_diag2[i]) / (diag2 * diag2);
    }

    Ok((1.0 - iou + dist2 / diag2, grad))
}

pub fn diou_loss(pred: &Bbox, target: &Bbox) -> Result<f64, ShapeError> {
    diou_with_grad(pred, target).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn area_sampled_iou(a: &Bbox, b: &Bbox, steps: usize) -> f64 {
        // midpoint sampling over the enclosing box
        let x0 = a.x1.min(b.x1);
        let y0 = a.y1.min(b.y1);
        let x1 = a.x2.max(b.x2);
        let y1 = a.y2.max(b.y2);
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..steps {
            for j in 0..steps {
                let x = x0 + (i as f64 + 0.5) * (x1 - x0) / steps as f64;
                let y = y0 + (j as f64 + 0.5) * (y1 - y0) / steps as f64;
                let ia = a.contains_point(x, y);
                let ib = b.contains_point(x, y);
                if ia && ib {
                    inter += 1;
                }
                if ia || ib {
                    union += 1;
                }
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn diou_of_identical_boxes_is_zero() {
        let b = Bbox::new(1.0, 2.0, 5.0, 9.0);
        assert_eq!(diou_loss(&b, &b).unwrap(), 0.0);
    }

    #[test]
    fn diou_offset_squares_matches_hand_value() {
        let a = Bbox::new(0.0, 0.0, 2.0, 2.0);
        let b = Bbox::new(1.0, 1.0, 3.0, 3.0);
        let sampled = area_sampled_iou(&a, &b, 600);
        assert!((sampled - 1.0 / 7.0).abs() < 1e-3);
        let expected = 1.0 - 1.0 / 7.0 + 2.0 / 18.0;
        let got = diou_loss(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.9683).abs() < 5e-5);
    }

    #[test]
    fn diou_rejects_degenerate_prediction() {
        let t = Bbox::new(0.0, 0.0, 1.0, 1.0);
        assert!(diou_loss(&Bbox::new(1.0, 0.0, 1.0, 1.0), &t).is_err());
    }

    #[test]
    fn diou_gradient_matches_central_differences() {
        let cases = [
            (Bbox::new(0.3, 0.2, 2.1, 2.7), Bbox::new(1.1, 0.9, 3.4, 3.2)),
            (Bbox::new(5.0, 5.0, 7.5, 8.0), Bbox::new(0.0, 0.5, 2.0, 3.0)),
            (Bbox::new(1.0, 1.0, 9.0, 6.0), Bbox::new(2.0, 1.5, 4.0, 5.0)),
        ];
        let h = 1e-6;
        for (p, t) in cases {
            let (_, g) = diou_with_grad(&p, &t).unwrap();
            for i in 0..4 {
                let mut up = p.to_array();
                let mut dn = p.to_array();
                up[i] += h;
                dn[i] -= h;
                let fd = (diou_loss(&Bbox::from_array(up), &t).unwrap()
                    - diou_loss(&Bbox::from_array(dn), &t).unwrap())
                    / (2.0 * h);
                let denom = fd.abs().max(g[i].abs()).max(1e-8);
                assert!((fd - g[i]).abs() / denom < 1e-4, "case {p:?} coord {i}: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn bce_is_stable_at_extremes() {
        assert!(bce_with_logit(50.0, 1.0) <= 1e-20);
        assert!((bce_with_logit(0.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_with_logit(1e4, 0.0).is_finite());
        assert!(bce_with_logit(-1e4, 1.0).is_finite());
        assert!(sigmoid(-50.0) > 0.0 && sigmoid(-50.0) <= 1e-20);
    }
}
