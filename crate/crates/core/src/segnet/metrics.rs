use serde::Serialize;

use super::SegnetError;
use crate::bae::LabelMask;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over present classes; `None` if every pixel is ignored.
    pub mean: Option<f64>,
}

/// Row-major `classes x classes` counts, rows are ground truth. Pixels
/// ignored in `mask` are skipped.
pub fn confusion(pred: &LabelMask, mask: &LabelMask, classes: usize) -> Result<Vec<u64>, SegnetError> {
    if (pred.height, pred.width) != (mask.height, mask.width) {
        return Err(SegnetError::Config(format!(
            "prediction {}x{} and mask {}x{} differ in size",
            pred.height, pred.width, mask.height, mask.width
        )));
    }
    mask.validate(classes)?;
    let mut m = vec![0u64; classes * classes];
    for (i, (&p, &t)) in pred.labels.iter().zip(&mask.labels).enumerate() {
        if t == mask.ignore_id {
            continue;
        }
        if usize::from(p) >= classes {
            return Err(SegnetError::Config(format!(
                "predicted class {p} at pixel {i} is not below {classes}"
            )));
        }
        m[usize::from(t) * classes + usize::from(p)] += 1;
    }
    Ok(m)
}

/// Per-class `TP / (TP + FP + FN)` and their mean.
pub fn miou(pred: &LabelMask, mask: &LabelMask, classes: usize) -> Result<MiouReport, SegnetError> {
    let m = confusion(pred, mask, classes)?;
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let tp = m[c * classes + c];
            let truth: u64 = m[c * classes..(c + 1) * classes].iter().sum();
            let predicted: u64 = (0..classes).map(|r| m[r * classes + c]).sum();
            let union = truth + predicted - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(MiouReport { per_class, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bae::IGNORE_ID;
    use crate::tensor::SplitMix64;
    use proptest::prelude::*;

    fn random(h: usize, w: usize, classes: u64, seed: u64) -> LabelMask {
        let mut rng = SplitMix64::new(seed);
        LabelMask::from_fn(h, w, |_, _| rng.next_below(classes) as u8)
    }

    #[test]
    fn perfect_and_disjoint() {
        let m = random(8, 8, 3, 1);
        assert_eq!(miou(&m, &m, 3).unwrap().mean, Some(1.0));
        let a = LabelMask::from_fn(4, 4, |_, x| u8::from(x < 2));
        let b = LabelMask::from_fn(4, 4, |_, x| u8::from(x >= 2));
        let r = miou(&a, &b, 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn absent_classes_and_ignore() {
        let a = LabelMask::from_fn(2, 2, |_, _| 0);
        let mut b = a.clone();
        b.labels[3] = IGNORE_ID;
        let r = miou(&a, &b, 4).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None, None, None]);
        assert_eq!(r.mean, Some(1.0));
        let all = LabelMask::from_fn(2, 2, |_, _| IGNORE_ID);
        assert_eq!(miou(&a, &all, 4).unwrap().mean, None);
    }

    #[test]
    fn counting_oracle() {
        let pred = random(16, 16, 3, 2);
        let truth = random(16, 16, 3, 3);
        let r = miou(&pred, &truth, 3).unwrap();
        for c in 0..3u8 {
            let (mut tp, mut fp, mut fne) = (0, 0, 0);
            for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
                match (p == c, t == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fne += 1,
                    _ => {}
                }
            }
            let iou = f64::from(tp) / f64::from(tp + fp + fne);
            assert_eq!(r.per_class[usize::from(c)], Some(iou));
        }
    }

    #[test]
    fn errors() {
        let a = random(2, 3, 2, 4);
        assert!(miou(&a, &random(3, 2, 2, 4), 2).is_err());
        assert!(miou(&random(2, 3, 5, 4), &a, 2).is_err());
    }

    proptest! {
        #[test]
        fn binary_symmetry(seed in any::<u64>()) {
            let a = random(6, 7, 2, seed);
            let b = random(6, 7, 2, seed ^ 0xABCD);
            prop_assert_eq!(miou(&a, &b, 2).unwrap(), miou(&b, &a, 2).unwrap());
        }
    }
}
