//! Training objectives for the dehazing network.

pub mod features;
pub mod msssim;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{bail_input, Error, Result};
use crate::tensor_ops::scalar_f64;

pub use features::{frequency_features, FeatureExtractor, RandomConvExtractor, Vgg16Extractor};
pub use msssim::{ms_ssim, ssim};

/// Default negative weight for real hazy images.
pub const REAL_NEGATIVE_WEIGHT: f64 = 1.0;
/// Default negative weight for generated hazy images.
pub const GENERATED_NEGATIVE_WEIGHT: f64 = 0.5;

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        bail_input!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims());
    }
    Ok(())
}

/// Elementwise Huber-style loss, mean-reduced.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, beta: f64) -> Result<Tensor> {
    check_same(pred, target, "smooth_l1")?;
    if beta <= 0.0 {
        return Ok((pred - target)?.abs()?.mean_all()?);
    }
    let d = (pred - target)?.abs()?;
    let quad = d.minimum(beta)?;
    let lin = (&d - &quad)?;
    Ok((quad.sqr()?.affine(0.5 / beta, 0.0)? + lin)?.mean_all()?)
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Spatial plus frequency l1 distance between two image batches.
pub fn pair_contrast(a: &Tensor, x: &Tensor, fe: &dyn FeatureExtractor) -> Result<Tensor> {
    check_same(a, x, "pair_contrast")?;
    let fa = fe.spatial_features(a)?;
    let fx = fe.spatial_features(x)?;
    let mut total = mean_abs_diff(&frequency_features(a)?, &frequency_features(x)?)?;
    for (p, q) in fa.iter().zip(&fx) {
        total = (total + mean_abs_diff(p, q)?)?;
    }
    Ok(total)
}

/// Anchor, positive and weighted negatives for the contrastive ratio.
#[derive(Debug, Clone)]
pub struct ContrastBatch {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negatives: Vec<Tensor>,
    pub weights: Vec<f64>,
}

impl ContrastBatch {
    pub fn new(anchor: Tensor, positive: Tensor, negatives: Vec<Tensor>, weights: Vec<f64>) -> Result<Self> {
        let batch = Self {
            anchor,
            positive,
            negatives,
            weights,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.negatives.is_empty() {
            bail_input!("contrastive batch needs at least one negative");
        }
        if self.negatives.len() != self.weights.len() {
            bail_input!("{} negatives but {} weights", self.negatives.len(), self.weights.len());
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            bail_input!("negative weights must be finite and nonnegative");
        }
        check_same(&self.anchor, &self.positive, "contrast positive")?;
        for n in &self.negatives {
            check_same(&self.anchor, n, "contrast negative")?;
        }
        Ok(())
    }
}

/// `d_ap / (d_ap + sum_i w_i d_an[i])` on precomputed distances.
pub fn mncd_ratio(d_ap: &Tensor, d_an: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if d_an.len() != weights.len() || d_an.is_empty() {
        bail_input!("{} negative distances for {} weights", d_an.len(), weights.len());
    }
    let mut denom = d_ap.clone();
    for (d, &w) in d_an.iter().zip(weights) {
        denom = (denom + d.affine(w, 0.0)?)?;
    }
    let value = scalar_f64(&denom)?;
    if value == 0.0 {
        return Err(Error::DegenerateInput(
            "contrastive ratio undefined: every distance is zero".into(),
        ));
    }
    Ok((d_ap / denom)?)
}

/// Ratio-form contrastive loss with distances from [`pair_contrast`].
pub fn mncd(batch: &ContrastBatch, fe: &dyn FeatureExtractor) -> Result<Tensor> {
    batch.validate()?;
    let d_ap = pair_contrast(&batch.anchor, &batch.positive, fe)?;
    let d_an = batch
        .negatives
        .iter()
        .map(|n| pair_contrast(&batch.anchor, n, fe))
        .collect::<Result<Vec<_>>>()?;
    mncd_ratio(&d_ap, &d_an, &batch.weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub smooth_l1: f64,
    pub ms_ssim: f64,
    pub mncd: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            smooth_l1: 1.0,
            ms_ssim: 0.5,
            mncd: 0.05,
            smooth_l1_beta: 1.0,
        }
    }
}

/// Unweighted components and the weighted total of one joint-loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    pub smooth_l1: f64,
    pub ms_ssim: f64,
    pub mncd: f64,
}

pub struct JointLoss {
    pub total: Tensor,
    pub record: LossRecord,
}

/// `w1 SmoothL1 + w2 (1 - MS-SSIM) + w3 MNCD`. The contrastive term is skipped
/// when its weight is zero or no contrast batch is given.
pub fn joint_loss(
    pred: &Tensor,
    target: &Tensor,
    contrast: Option<&ContrastBatch>,
    fe: &dyn FeatureExtractor,
    weights: &LossWeights,
) -> Result<JointLoss> {
    let sl1 = smooth_l1(pred, target, weights.smooth_l1_beta)?;
    let ssim_term = ms_ssim(pred, target)?.affine(-1.0, 1.0)?;
    let mut total = (sl1.affine(weights.smooth_l1, 0.0)? + ssim_term.affine(weights.ms_ssim, 0.0)?)?;
    let mut record = LossRecord {
        smooth_l1: scalar_f64(&sl1)?,
        ms_ssim: scalar_f64(&ssim_term)?,
        ..LossRecord::default()
    };
    if let Some(batch) = contrast.filter(|_| weights.mncd != 0.0) {
        let m = mncd(batch, fe)?;
        record.mncd = scalar_f64(&m)?;
        total = (total + m.affine(weights.mncd, 0.0)?)?;
    }
    record.total = scalar_f64(&total)?;
    Ok(JointLoss { total, record })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn s(v: f64) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        scalar_f64(t).unwrap()
    }

    #[test]
    fn smooth_l1_branches() {
        let dev = Device::Cpu;
        let z = Tensor::zeros((1, 1, 2, 2), DType::F64, &dev).unwrap();
        assert_eq!(val(&smooth_l1(&z, &z, 1.0).unwrap()), 0.0);
        let half = Tensor::full(0.5f64, (1, 1, 2, 2), &dev).unwrap();
        assert_eq!(val(&smooth_l1(&half, &z, 1.0).unwrap()), 0.125);
        let two = Tensor::full(-2.0f64, (1, 1, 2, 2), &dev).unwrap();
        assert_eq!(val(&smooth_l1(&two, &z, 1.0).unwrap()), 1.5);
    }

    #[test]
    fn ratio_arithmetic() {
        assert_eq!(val(&mncd_ratio(&s(0.0), &[s(3.0)], &[1.0]).unwrap()), 0.0);
        assert_eq!(val(&mncd_ratio(&s(2.0), &[s(1.0), s(2.0)], &[1.0, 0.5]).unwrap()), 0.5);
        let r = val(&mncd_ratio(&s(1.0), &[s(2.0), s(4.0)], &[1.0, 0.5]).unwrap());
        assert!((r - 0.2).abs() < 1e-15);
        assert!(matches!(
            mncd_ratio(&s(0.0), &[s(0.0), s(0.0)], &[1.0, 0.5]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn ratio_monotone_and_scale_invariant() {
        let base = val(&mncd_ratio(&s(1.0), &[s(2.0), s(3.0)], &[1.0, 0.5]).unwrap());
        let mut prev = base;
        for d in [3.5, 5.0, 9.0] {
            let r = val(&mncd_ratio(&s(1.0), &[s(2.0), s(d)], &[1.0, 0.5]).unwrap());
            assert!(r < prev);
            prev = r;
        }
        for k in [0.01, 7.0, 1e4] {
            let r = val(&mncd_ratio(&s(k), &[s(2.0 * k), s(3.0 * k)], &[1.0, 0.5]).unwrap());
            assert!((r - base).abs() < 1e-14);
        }
    }

    #[test]
    fn pair_contrast_properties() {
        let dev = Device::Cpu;
        let fe = RandomConvExtractor::default_for(DType::F64, &dev).unwrap();
        let a = Tensor::rand(0f64, 1.0, (1, 3, 16, 16), &dev).unwrap();
        let x = Tensor::rand(0f64, 1.0, (1, 3, 16, 16), &dev).unwrap();
        assert_eq!(val(&pair_contrast(&a, &a, &fe).unwrap()), 0.0);
        let ax = val(&pair_contrast(&a, &x, &fe).unwrap());
        let xa = val(&pair_contrast(&x, &a, &fe).unwrap());
        assert!(ax > 0.0);
        assert_eq!(ax, xa);
        let small = Tensor::rand(0f64, 1.0, (1, 3, 8, 16), &dev).unwrap();
        assert!(matches!(pair_contrast(&a, &small, &fe), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn mncd_zero_when_anchor_is_positive() {
        let dev = Device::Cpu;
        let fe = RandomConvExtractor::default_for(DType::F64, &dev).unwrap();
        let a = Tensor::rand(0f64, 1.0, (1, 3, 16, 16), &dev).unwrap();
        let n = Tensor::rand(0f64, 1.0, (1, 3, 16, 16), &dev).unwrap();
        let batch = ContrastBatch::new(a.clone(), a.clone(), vec![n], vec![1.0]).unwrap();
        assert_eq!(val(&mncd(&batch, &fe).unwrap()), 0.0);
        let same = ContrastBatch::new(a.clone(), a.clone(), vec![a.clone()], vec![1.0]).unwrap();
        assert!(matches!(mncd(&same, &fe), Err(Error::DegenerateInput(_))));
        assert!(ContrastBatch::new(a.clone(), a.clone(), vec![], vec![]).is_err());
    }

    #[test]
    fn joint_loss_vanishes_at_target() {
        let dev = Device::Cpu;
        let fe = RandomConvExtractor::default_for(DType::F64, &dev).unwrap();
        let t = Tensor::rand(0f64, 1.0, (1, 3, 32, 32), &dev).unwrap();
        let n = Tensor::rand(0f64, 1.0, (1, 3, 32, 32), &dev).unwrap();
        let batch = ContrastBatch::new(t.clone(), t.clone(), vec![n], vec![1.0]).unwrap();
        let out = joint_loss(&t, &t, Some(&batch), &fe, &LossWeights::default()).unwrap();
        assert_eq!(out.record.smooth_l1, 0.0);
        assert!(out.record.ms_ssim.abs() < 1e-12);
        assert_eq!(out.record.mncd, 0.0);
        assert!(out.record.total.abs() < 1e-12);
    }

    #[test]
    fn joint_components_nonnegative() {
        let dev = Device::Cpu;
        let fe = RandomConvExtractor::default_for(DType::F64, &dev).unwrap();
        let p = Tensor::rand(0f64, 1.0, (2, 3, 24, 24), &dev).unwrap();
        let t = Tensor::rand(0f64, 1.0, (2, 3, 24, 24), &dev).unwrap();
        let batch = ContrastBatch::new(p.clone(), t.clone(), vec![t.affine(0.5, 0.5).unwrap()], vec![1.0]).unwrap();
        let r = joint_loss(&p, &t, Some(&batch), &fe, &LossWeights::default()).unwrap().record;
        assert!(r.smooth_l1 >= 0.0 && r.ms_ssim >= 0.0 && r.mncd >= 0.0 && r.mncd <= 1.0);
        let expect = r.smooth_l1 + 0.5 * r.ms_ssim + 0.05 * r.mncd;
        assert!((r.total - expect).abs() < 1e-12);
    }
}
