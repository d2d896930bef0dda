//! Box regression loss: `(1 - GIoU) + L1`, averaged over rows.

use super::BoxBatch;
use crate::model::{giou, Box2};

#[derive(Debug, Clone, PartialEq)]
pub struct BoxLoss {
    pub value: f64,
    /// `d value / d (x1, y1, x2, y2)` per predicted row.
    pub grad: Vec<[f64; 4]>,
}

/// Loss between predicted and target boxes with its analytic gradient with
/// respect to the predictions. The L1 subgradient at zero is 0.
///
/// Panics if the batches differ in length.
pub fn box_loss(pred: &BoxBatch, target: &BoxBatch) -> BoxLoss {
    assert_eq!(pred.len(), target.len(), "box batch lengths");
    let n = pred.len();
    if n == 0 {
        return BoxLoss {
            value: 0.0,
            grad: Vec::new(),
        };
    }
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (p, t) in pred.0.iter().zip(&target.0) {
        let l1: f64 = p
            .to_array()
            .iter()
            .zip(t.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum();
        value += (1.0 - giou(p, t)) + l1;
        let dg = giou_grad(p, t);
        let pa = p.to_array();
        let ta = t.to_array();
        let mut g = [0.0; 4];
        for c in 0..4 {
            let sign = if pa[c] > ta[c] {
                1.0
            } else if pa[c] < ta[c] {
                -1.0
            } else {
                0.0
            };
            g[c] = scale * (sign - dg[c]);
        }
        grad.push(g);
    }
    BoxLoss {
        value: value * scale,
        grad,
    }
}

/// `d giou(p, t) / d p`.
///
/// With intersection `I`, union `U = A_p + A_t - I` and enclosing area `E`,
/// `giou = I/U - 1 + U/E`, so
/// `d giou = dI (1/U + I/U^2 - 1/E) + dA_p (1/E - I/U^2) - dE (U/E^2)`.
fn giou_grad(p: &Box2, t: &Box2) -> [f64; 4] {
    let pw = p.x2 - p.x1;
    let ph = p.y2 - p.y1;
    let iw_raw = p.x2.min(t.x2) - p.x1.max(t.x1);
    let ih_raw = p.y2.min(t.y2) - p.y1.max(t.y1);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let union = p.area() + t.area() - inter;
    let ew = p.x2.max(t.x2) - p.x1.min(t.x1);
    let eh = p.y2.max(t.y2) - p.y1.min(t.y1);
    let enclosing = ew * eh;
    if union <= 0.0 || enclosing <= 0.0 {
        return [0.0; 4];
    }

    // d area(p)
    let da = [-ph, -pw, ph, pw];

    // d intersection: only the coordinates that bound the overlap move it.
    let mut di = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if p.x1 > t.x1 {
            di[0] = -ih;
        }
        if p.x2 < t.x2 {
            di[2] = ih;
        }
        if p.y1 > t.y1 {
            di[1] = -iw;
        }
        if p.y2 < t.y2 {
            di[3] = iw;
        }
    }

    // d enclosing
    let mut de = [0.0; 4];
    if p.x1 < t.x1 {
        de[0] = -eh;
    }
    if p.x2 > t.x2 {
        de[2] = eh;
    }
    if p.y1 < t.y1 {
        de[1] = -ew;
    }
    if p.y2 > t.y2 {
        de[3] = ew;
    }

    let gi = 1.0 / union + inter / (union * union) - 1.0 / enclosing;
    let ga = 1.0 / enclosing - inter / (union * union);
    let ge = -union / (enclosing * enclosing);
    let mut out = [0.0; 4];
    for c in 0..4 {
        out[c] = gi * di[c] + ga * da[c] + ge * de[c];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(b: &[[f64; 4]]) -> BoxBatch {
        BoxBatch(b.iter().map(|a| Box2::from_array(*a)).collect())
    }

    #[test]
    fn identical_boxes_have_zero_loss_and_gradient() {
        let b = batch(&[[0.1, 0.2, 0.5, 0.6], [0.0, 0.0, 1.0, 1.0]]);
        let l = box_loss(&b, &b);
        assert_eq!(l.value, 0.0);
        for g in &l.grad {
            for v in g {
                assert!(v.abs() < 1e-12, "{g:?}");
            }
        }
    }

    #[test]
    fn shifted_full_box() {
        // predicted [0.1, 0, 1.1, 1] against the unit box
        let p = batch(&[[0.1, 0.0, 1.1, 1.0]]);
        let t = batch(&[[0.0, 0.0, 1.0, 1.0]]);
        let l = box_loss(&p, &t);
        let giou_term = 1.0 - giou(&p.0[0], &t.0[0]);
        assert!((l.value - (0.2 + giou_term)).abs() < 1e-12);
        // intersection 0.9, union 1.1, enclosing 1.1
        assert!((giou_term - (1.0 - 0.9 / 1.1)).abs() < 1e-12);
    }

    #[test]
    fn loss_is_symmetric() {
        let a = batch(&[[0.1, 0.2, 0.5, 0.6], [0.3, 0.3, 0.4, 0.9]]);
        let b = batch(&[[0.2, 0.1, 0.7, 0.5], [0.0, 0.5, 0.6, 0.7]]);
        assert!((box_loss(&a, &b).value - box_loss(&b, &a).value).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences_for_disjoint_boxes() {
        let p = [0.1, 0.1, 0.3, 0.25];
        let t = [0.5, 0.6, 0.9, 0.8];
        let l = box_loss(&batch(&[p]), &batch(&[t]));
        let h = 1e-6;
        for c in 0..4 {
            let mut pp = p;
            pp[c] += h;
            let mut pm = p;
            pm[c] -= h;
            let num = (box_loss(&batch(&[pp]), &batch(&[t])).value
                - box_loss(&batch(&[pm]), &batch(&[t])).value)
                / (2.0 * h);
            assert!((num - l.grad[0][c]).abs() < 1e-7, "coord {c}");
        }
    }
}
