//! Heatmap similarity metrics, their attacked-minus-baseline (Δ) forms, and
//! summary statistics over samples.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::explain::Heatmap;

pub const DEFAULT_TOPK: f64 = 0.10;

/// Mean squared elementwise difference.
pub fn mse(a: &Heatmap, b: &Heatmap) -> Result<f64> {
    a.check_same_shape(b, "mse")?;
    let n = a.len() as f64;
    Ok(a.values().iter().zip(b.values()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n)
}

/// Pearson correlation over flattened pixels.
pub fn pcc(a: &Heatmap, b: &Heatmap) -> Result<f64> {
    a.check_same_shape(b, "pcc")?;
    let n = a.len() as f64;
    let ma = a.values().iter().sum::<f64>() / n;
    let mb = b.values().iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (p, q) in a.values().iter().zip(b.values()) {
        let (da, db) = (p - ma, q - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Number of pixels selected by a top-`k` fraction of `len` pixels.
pub fn topk_count(len: usize, k: f64) -> Result<usize> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::InvalidParameter(format!("top-k fraction {k} outside (0, 1]")));
    }
    // guard against k·len landing a rounding error above an integer
    Ok(((k * len as f64 - 1e-9).ceil() as usize).clamp(1, len))
}

/// Flat indices of the `count` largest values; ties go to the lower index.
pub fn topk_indices(values: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    order.truncate(count);
    order
}

/// Fraction of the top-`k` pixels of `a` that are also top-`k` in `b`.
pub fn topk_intersection(a: &Heatmap, b: &Heatmap, k: f64) -> Result<f64> {
    a.check_same_shape(b, "topk")?;
    let count = topk_count(a.len(), k)?;
    let mut in_b = vec![false; b.len()];
    for i in topk_indices(b.values(), count) {
        in_b[i] = true;
    }
    let hits = topk_indices(a.values(), count).into_iter().filter(|&i| in_b[i]).count();
    Ok(hits as f64 / count as f64)
}

/// A heatmap similarity measure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Similarity {
    Mse,
    Pcc,
    TopK { k: f64 },
}

impl Similarity {
    pub fn eval(&self, a: &Heatmap, b: &Heatmap) -> Result<f64> {
        match *self {
            Similarity::Mse => mse(a, b),
            Similarity::Pcc => pcc(a, b),
            Similarity::TopK { k } => topk_intersection(a, b, k),
        }
    }
}

/// `m(target, adversarial) − m(target, start)`: how much closer to the target
/// the attack moved the explanation. Zero means no effect.
pub fn relative_metric(m: Similarity, target: &Heatmap, start: &Heatmap, adversarial: &Heatmap) -> Result<f64> {
    target.check_same_shape(start, "relative metric")?;
    target.check_same_shape(adversarial, "relative metric")?;
    Ok(m.eval(target, adversarial)? - m.eval(target, start)?)
}

/// Human-marked importance weights over the pixel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationMask {
    values: Heatmap,
    pub source: String,
}

impl AnnotationMask {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        let values = Heatmap::new(rows, cols, values)?;
        if values.values().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidParameter("annotation weights must be nonnegative".into()));
        }
        if values.values().iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroNorm);
        }
        Ok(AnnotationMask {
            values,
            source: source.into(),
        })
    }

    pub fn values(&self) -> &Heatmap {
        &self.values
    }
}

/// `Σ A·E / (‖A‖₂ ‖E‖₂)`.
pub fn cosine_vs_annotation(mask: &AnnotationMask, e: &Heatmap) -> Result<f64> {
    mask.values.check_same_shape(e, "cosine")?;
    let (mut dot, mut aa, mut ee) = (0.0, 0.0, 0.0);
    for (a, x) in mask.values.values().iter().zip(e.values()) {
        dot += a * x;
        aa += a * a;
        ee += x * x;
    }
    if aa == 0.0 || ee == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot / (aa.sqrt() * ee.sqrt()))
}

/// Mean squared difference between two inputs.
pub fn image_mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "image mse",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let n = x.len() as f64;
    Ok(x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n)
}

/// Similarities of an attacked explanation to the target, their Δ against the
/// unattacked explanation, and the input distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub mse: f64,
    pub pcc: f64,
    pub topk: f64,
    pub delta_mse: f64,
    pub delta_pcc: f64,
    pub delta_topk: f64,
    pub image_mse: f64,
}

impl MetricRecord {
    pub const FIELDS: [&'static str; 7] = ["mse", "pcc", "topk", "delta_mse", "delta_pcc", "delta_topk", "image_mse"];

    /// Compares normalized maps: `start` is the explanation of `x`, `adversarial`
    /// that of `x_adv`.
    pub fn compute(
        target: &Heatmap,
        start: &Heatmap,
        adversarial: &Heatmap,
        x: &Tensor,
        x_adv: &Tensor,
        k: f64,
    ) -> Result<Self> {
        let (m0, p0, t0) = (mse(target, start)?, pcc(target, start)?, topk_intersection(target, start, k)?);
        let (m1, p1, t1) = (
            mse(target, adversarial)?,
            pcc(target, adversarial)?,
            topk_intersection(target, adversarial, k)?,
        );
        Ok(MetricRecord {
            mse: m1,
            pcc: p1,
            topk: t1,
            delta_mse: m1 - m0,
            delta_pcc: p1 - p0,
            delta_topk: t1 - t0,
            image_mse: image_mse(x, x_adv)?,
        })
    }

    pub fn values(&self) -> [f64; 7] {
        [
            self.mse,
            self.pcc,
            self.topk,
            self.delta_mse,
            self.delta_pcc,
            self.delta_topk,
            self.image_mse,
        ]
    }
}

/// Mean and standard error of the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Summary {
    /// Uses the sample standard deviation; `se` is 0 for a single value.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("summary of no values".into()));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(Summary { mean, se, n })
    }
}

/// Per-sample records with aggregate summaries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
}

impl MetricReport {
    pub fn new(records: Vec<MetricRecord>) -> Self {
        MetricReport { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Summary of one field, in [`MetricRecord::FIELDS`] order.
    pub fn summary(&self, field: usize) -> Result<Summary> {
        let vals: Vec<f64> = self.records.iter().map(|r| r.values()[field]).collect();
        Summary::of(&vals)
    }

    pub fn summaries(&self) -> Result<Vec<Summary>> {
        (0..MetricRecord::FIELDS.len()).map(|f| self.summary(f)).collect()
    }

    pub fn delta_pcc(&self) -> Result<Summary> {
        self.summary(4)
    }

    pub fn delta_topk(&self) -> Result<Summary> {
        self.summary(5)
    }

    pub fn delta_mse(&self) -> Result<Summary> {
        self.summary(3)
    }

    pub fn image_mse(&self) -> Result<Summary> {
        self.summary(6)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn h(rows: usize, cols: usize, v: &[f64]) -> Heatmap {
        Heatmap::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn mse_examples() {
        let a = h(1, 2, &[0.3, 0.4]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&h(1, 2, &[0.0, 0.0]), &h(1, 2, &[1.0, 1.0])).unwrap(), 1.0);
        assert!(mse(&a, &h(2, 1, &[0.3, 0.4])).is_err());
    }

    #[test]
    fn pcc_examples() {
        let a = h(1, 3, &[1.0, 2.0, 3.0]);
        assert!((pcc(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((pcc(&a, &h(1, 3, &[3.0, 2.0, 1.0])).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pcc(&h(1, 4, &[1.0, 0.0, 0.0, 1.0]), &h(1, 4, &[0.0, 1.0, 0.0, 1.0])).unwrap(), 0.0);
        assert!(matches!(pcc(&a, &h(1, 3, &[2.0; 3])), Err(Error::UndefinedCorrelation)));
    }

    #[test]
    fn topk_examples() {
        let a = h(2, 2, &[4.0, 3.0, 2.0, 1.0]);
        let b = h(2, 2, &[4.0, 1.0, 2.0, 3.0]);
        assert_eq!(topk_intersection(&a, &a, 0.1).unwrap(), 1.0);
        assert_eq!(topk_intersection(&a, &b, 0.5).unwrap(), 0.5);
        let c = h(1, 4, &[1.0, 1.0, 0.0, 0.0]);
        let d = h(1, 4, &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(topk_intersection(&c, &d, 0.5).unwrap(), 0.0);
        assert_eq!(topk_indices(&[1.0, 2.0, 2.0, 0.0], 2), vec![1, 2]);
        assert_eq!(topk_indices(&[5.0, 5.0, 5.0], 2), vec![0, 1]);
        assert_eq!(topk_count(784, 0.1).unwrap(), 79);
        assert_eq!(topk_count(10, 0.1).unwrap(), 1);
        assert!(topk_count(4, 0.0).is_err());
    }

    #[test]
    fn relative_metric_examples() {
        let t = h(1, 3, &[0.6, 0.3, 0.1]);
        let s = h(1, 3, &[0.1, 0.3, 0.6]);
        for m in [Similarity::Mse, Similarity::Pcc, Similarity::TopK { k: 0.34 }] {
            assert_eq!(relative_metric(m, &t, &s, &s).unwrap(), 0.0);
        }
        let perfect = relative_metric(Similarity::Mse, &t, &s, &t).unwrap();
        assert_eq!(perfect, -mse(&t, &s).unwrap());
    }

    #[test]
    fn cosine_examples() {
        let mask = AnnotationMask::new(1, 3, vec![1.0, 2.0, 0.0], "hand").unwrap();
        assert!((cosine_vs_annotation(&mask, &h(1, 3, &[0.5, 1.0, 0.0])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_vs_annotation(&mask, &h(1, 3, &[0.0, 0.0, 3.0])).unwrap(), 0.0);
        assert!(matches!(
            cosine_vs_annotation(&mask, &h(1, 3, &[0.0; 3])),
            Err(Error::ZeroNorm)
        ));
        assert!(AnnotationMask::new(1, 2, vec![0.0, 0.0], "none").is_err());
    }

    #[test]
    fn image_mse_examples() {
        let x = Tensor::zeros(&[1, 2, 2]);
        assert_eq!(image_mse(&x, &x).unwrap(), 0.0);
        let mut y = x.clone();
        y.data_mut()[3] = 0.5;
        assert_eq!(image_mse(&x, &y).unwrap(), 0.0625);
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[7.0]).unwrap().se, 0.0);
        assert!(Summary::of(&[]).is_err());
    }

    proptest! {
        #[test]
        fn pcc_symmetric_and_affine_invariant(
            a in proptest::collection::vec(0.0f64..1.0, 9),
            b in proptest::collection::vec(0.0f64..1.0, 9),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let (ha, hb) = (h(3, 3, &a), h(3, 3, &b));
            let (Ok(p), Ok(q)) = (pcc(&ha, &hb), pcc(&hb, &ha)) else { return Ok(()) };
            prop_assert!((p - q).abs() <= 1e-15);
            prop_assert!((-1.0..=1.0).contains(&p));
            let moved = h(3, 3, &a.iter().map(|v| v * scale + shift).collect::<Vec<_>>());
            prop_assert!((pcc(&moved, &hb).unwrap() - p).abs() <= 1e-12);
        }

        #[test]
        fn topk_symmetric(a in proptest::collection::vec(0.0f64..1.0, 16), b in proptest::collection::vec(0.0f64..1.0, 16), k in 0.01f64..1.0) {
            let (ha, hb) = (h(4, 4, &a), h(4, 4, &b));
            prop_assert_eq!(topk_intersection(&ha, &hb, k).unwrap(), topk_intersection(&hb, &ha, k).unwrap());
        }
    }
}
