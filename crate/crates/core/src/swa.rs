//! Self-weighted attention: per-stream quality evaluators and identity
//! classifiers, and the classification, triplet and combined losses.

use candle_core::{DType, Device, Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, Stream, StreamTag};
use crate::error::{FtwaError, Result};
use crate::nn::{leaky_relu, linear, sigmoid, ParamBuilder};

/// Parameter namespace of the evaluators and classifiers.
pub const SWA_NAMESPACE: &str = "swa";

/// Batch of `(N, D)` embeddings with the tag of the map they came from.
#[derive(Debug, Clone)]
pub struct ReidVectors {
    pub values: Tensor,
    pub tag: StreamTag,
}

/// Global average pooling followed by flattening: `(N, C, H, W) → (N, C)`.
pub fn gap(xs: &Tensor) -> Result<Tensor> {
    if xs.rank() != 4 {
        return Err(FtwaError::shape(
            "global average pooling",
            "rank 4 (N, C, H, W)",
            format!("{:?}", xs.dims()),
        ));
    }
    Ok(xs.mean(D::Minus1)?.mean(D::Minus1)?)
}

pub fn gap_flatten(features: &FeatureMap) -> Result<ReidVectors> {
    Ok(ReidVectors {
        values: gap(&features.values)?,
        tag: features.tag,
    })
}

/// Smallest quality weight. A saturated sigmoid rounds to exactly 0 in
/// single precision, which would leave a weighted pair with no mass.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// `D → D/4 → 1` perceptron with a sigmoid output.
#[derive(Debug, Clone)]
pub struct QualityEvaluator {
    hidden: candle_nn::Linear,
    out: candle_nn::Linear,
}

impl QualityEvaluator {
    pub fn new(dim: usize, pb: &ParamBuilder) -> Result<Self> {
        let h = (dim / 4).max(1);
        Ok(Self {
            hidden: linear(dim, h, (2.0 / dim as f64).sqrt(), &pb.pp("hidden"))?,
            out: linear(h, 1, (1.0 / h as f64).sqrt(), &pb.pp("out"))?,
        })
    }

    /// Per-sample weights in `[WEIGHT_FLOOR, 1)`, shape `(N,)`.
    pub fn forward(&self, v: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.hidden.forward(v)?)?;
        let w = sigmoid(&self.out.forward(&h)?)?.squeeze(1)?;
        Ok(w.clamp(WEIGHT_FLOOR, 1.0)?)
    }
}

/// Evaluators and classifiers of both resolution streams.
///
/// Real and synthetic vectors of one resolution share that resolution's
/// modules: `v'_HR` goes through the HR evaluator and classifier, `v'_LR`
/// through the LR ones.
#[derive(Debug, Clone)]
pub struct SwaHeads {
    w_hr: Option<QualityEvaluator>,
    w_lr: Option<QualityEvaluator>,
    c_hr: candle_nn::Linear,
    c_lr: Option<candle_nn::Linear>,
    num_classes: usize,
}

impl SwaHeads {
    /// `with_lr_classifier` adds `C_LR`; `with_evaluators` adds `W_HR` and
    /// `W_LR`. Parameters live under `pb` as `w_hr`, `w_lr`, `c_hr`, `c_lr`.
    pub fn new(
        dim: usize,
        num_classes: usize,
        with_lr_classifier: bool,
        with_evaluators: bool,
        pb: &ParamBuilder,
    ) -> Result<Self> {
        if dim == 0 || num_classes < 2 {
            return Err(FtwaError::Config(format!(
                "heads need a positive embedding width and at least two classes, got D={dim}, classes={num_classes}"
            )));
        }
        let classifier = |name: &str| linear(dim, num_classes, 1e-3, &pb.pp(name));
        let evaluator = |name: &str| QualityEvaluator::new(dim, &pb.pp(name));
        Ok(Self {
            w_hr: with_evaluators.then(|| evaluator("w_hr")).transpose()?,
            w_lr: with_evaluators.then(|| evaluator("w_lr")).transpose()?,
            c_hr: classifier("c_hr")?,
            c_lr: with_lr_classifier.then(|| classifier("c_lr")).transpose()?,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn has_evaluators(&self) -> bool {
        self.w_hr.is_some()
    }

    /// Quality weights `(N,)` from the evaluator of `stream`.
    pub fn evaluate(&self, v: &Tensor, stream: Stream) -> Result<Tensor> {
        let evaluator = match stream {
            Stream::Hr => &self.w_hr,
            Stream::Lr => &self.w_lr,
        };
        evaluator
            .as_ref()
            .ok_or_else(|| FtwaError::Contract("this model has no quality evaluators".into()))?
            .forward(v)
    }

    /// Identity logits `(N, classes)` from the classifier of `stream`.
    pub fn classify(&self, v: &Tensor, stream: Stream) -> Result<Tensor> {
        let classifier = match stream {
            Stream::Hr => Some(&self.c_hr),
            Stream::Lr => self.c_lr.as_ref(),
        }
        .ok_or_else(|| FtwaError::Contract("this model has no low-resolution classifier".into()))?;
        Ok(classifier.forward(v)?)
    }
}

/// Tensor of integer labels for loss indexing.
fn label_tensor(labels: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    Ok(Tensor::from_vec(v, labels.len(), device)?)
}

/// Per-sample softmax cross-entropy `−log softmax(f)[y]`, shape `(N,)`.
pub fn cls_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, classes) = logits.dims2()?;
    if n != labels.len() {
        return Err(FtwaError::shape(
            "classification loss",
            format!("{n} labels"),
            format!("{} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(FtwaError::Label {
            label: bad,
            vocabulary: classes,
        });
    }
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let idx = label_tensor(labels, logits.device())?.unsqueeze(1)?;
    Ok(log_probs.gather(&idx, 1)?.squeeze(1)?.neg()?)
}

fn check_positive(weights: &Tensor, what: &str) -> Result<()> {
    let v = weights.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(bad) = v.iter().find(|&&w| w.is_nan() || w <= 0.0) {
        return Err(FtwaError::Contract(format!(
            "quality weight {what} must be strictly positive, got {bad}"
        )));
    }
    Ok(())
}

/// One half of the weighted classification loss: a real stream and the
/// synthetic stream it is paired with, all tensors `(N,)`.
#[derive(Debug, Clone)]
pub struct WeightedPair<'a> {
    pub w_real: &'a Tensor,
    pub l_real: &'a Tensor,
    pub w_synth: &'a Tensor,
    pub l_synth: &'a Tensor,
}

impl WeightedPair<'_> {
    /// Per-sample `(w·L + w'·L') / (w + w')`.
    fn term(&self, name: &str) -> Result<Tensor> {
        check_positive(self.w_real, name)?;
        check_positive(self.w_synth, name)?;
        let num = ((self.w_real * self.l_real)? + (self.w_synth * self.l_synth)?)?;
        let den = (self.w_real + self.w_synth)?;
        Ok((num / den)?)
    }
}

/// Self-weighted classification loss: the HR term (real HR with its
/// synthetic LR view) averaged over HR samples plus the LR term (real LR
/// with its transformed synthetic HR) averaged over LR samples.
pub fn swa_cls_loss(hr: &WeightedPair<'_>, lr: &WeightedPair<'_>) -> Result<Tensor> {
    let a = hr.term("HR pair")?.mean_all()?;
    let b = lr.term("LR pair")?.mean_all()?;
    Ok((a + b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletMining {
    /// Every valid `(a, p, n)`, averaged over the valid triplets.
    #[default]
    BatchAll,
    /// Hardest positive and hardest negative per anchor.
    BatchHard,
}

#[derive(Debug, Clone)]
pub struct TripletOutcome {
    /// Scalar loss.
    pub loss: Tensor,
    /// Triplets (batch-all) or anchors (batch-hard) that contributed.
    pub valid: usize,
    /// No valid triplet existed; `loss` is zero.
    pub degenerate: bool,
}

/// Pairwise Euclidean distances `(N, N)` of the rows of `v`.
///
/// A tiny constant under the square root keeps the gradient finite at
/// coincident points.
pub fn pairwise_distances(v: &Tensor) -> Result<Tensor> {
    let diff = v.unsqueeze(1)?.broadcast_sub(&v.unsqueeze(0)?)?;
    Ok((diff.sqr()?.sum(D::Minus1)? + 1e-12)?.sqrt()?)
}

/// Margin triplet loss over labelled vectors `(N, D)`.
pub fn triplet_loss(
    v: &Tensor,
    labels: &[usize],
    margin: f64,
    mining: TripletMining,
) -> Result<TripletOutcome> {
    let (n, _) = v.dims2()?;
    if n != labels.len() {
        return Err(FtwaError::shape(
            "triplet loss",
            format!("{n} labels"),
            format!("{} labels", labels.len()),
        ));
    }
    let (dtype, device) = (v.dtype(), v.device());
    let zero = || -> Result<TripletOutcome> {
        Ok(TripletOutcome {
            loss: (v.sum_all()? * 0.0)?,
            valid: 0,
            degenerate: true,
        })
    };
    let pos = |a: usize, p: usize| a != p && labels[a] == labels[p];
    let neg = |a: usize, x: usize| labels[a] != labels[x];
    let has_pos: Vec<bool> = (0..n).map(|a| (0..n).any(|p| pos(a, p))).collect();
    let has_neg: Vec<bool> = (0..n).map(|a| (0..n).any(|x| neg(a, x))).collect();
    if !(0..n).any(|a| has_pos[a] && has_neg[a]) {
        return zero();
    }
    let d = pairwise_distances(v)?;
    let mask = |f: &dyn Fn(usize, usize) -> bool| -> Result<Tensor> {
        let m: Vec<f64> = (0..n)
            .flat_map(|a| (0..n).map(move |x| (a, x)))
            .map(|(a, x)| if f(a, x) { 1.0 } else { 0.0 })
            .collect();
        Ok(Tensor::from_vec(m, (n, n), device)?.to_dtype(dtype)?)
    };
    match mining {
        TripletMining::BatchAll => {
            let mut valid = Vec::with_capacity(n * n * n);
            let mut count = 0usize;
            for a in 0..n {
                for p in 0..n {
                    for x in 0..n {
                        let ok = pos(a, p) && neg(a, x);
                        count += ok as usize;
                        valid.push(if ok { 1.0 } else { 0.0 });
                    }
                }
            }
            let valid = Tensor::from_vec(valid, (n, n, n), device)?.to_dtype(dtype)?;
            let hinge = d
                .unsqueeze(2)?
                .broadcast_sub(&d.unsqueeze(1)?)?
                .affine(1.0, margin)?
                .relu()?;
            let loss = ((hinge * valid)?.sum_all()? / count as f64)?;
            Ok(TripletOutcome {
                loss,
                valid: count,
                degenerate: false,
            })
        }
        TripletMining::BatchHard => {
            let pos_mask = mask(&pos)?;
            let neg_mask = mask(&neg)?;
            let hardest_pos = (&d * &pos_mask)?.max(1)?;
            let far = (d.max_all()?.detach() + 1.0)?;
            let shifted = ((neg_mask.affine(-1.0, 1.0)?).broadcast_mul(&far)? + &d)?;
            let hardest_neg = shifted.min(1)?;
            let anchors: Vec<f64> = (0..n)
                .map(|a| if has_pos[a] && has_neg[a] { 1.0 } else { 0.0 })
                .collect();
            let count = anchors.iter().filter(|&&x| x > 0.0).count();
            let anchors = Tensor::from_vec(anchors, n, device)?.to_dtype(dtype)?;
            let hinge = (hardest_pos - hardest_neg)?.affine(1.0, margin)?.relu()?;
            let loss = ((hinge * anchors)?.sum_all()? / count as f64)?;
            Ok(TripletOutcome {
                loss,
                valid: count,
                degenerate: false,
            })
        }
    }
}

/// Weighted combination of the HR-space and LR-space triplet losses:
/// `(w_HR·w'_HR·L_HR + w_LR·w'_LR·L_LR) / (w_HR·w'_HR + w_LR·w'_LR)`.
///
/// Weights are batch-level scalars (per-sample weights averaged over the
/// batch).
pub fn swa_triplet_loss(
    w_hr: &Tensor,
    w_hr_synth: &Tensor,
    w_lr: &Tensor,
    w_lr_synth: &Tensor,
    l_hr: &Tensor,
    l_lr: &Tensor,
) -> Result<Tensor> {
    for (w, name) in [
        (w_hr, "w_HR"),
        (w_hr_synth, "w'_HR"),
        (w_lr, "w_LR"),
        (w_lr_synth, "w'_LR"),
    ] {
        check_positive(w, name)?;
    }
    let a = (w_hr * w_hr_synth)?;
    let b = (w_lr * w_lr_synth)?;
    let num = ((&a * l_hr)? + (&b * l_lr)?)?;
    Ok((num / (a + b)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_tri: f64,
    pub lambda_raft: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 3.0,
            lambda_tri: 1.0,
            lambda_raft: 0.1,
            margin: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cls, self.lambda_tri, self.lambda_raft, self.margin];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(FtwaError::Config(format!(
                "loss weights and margin must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `λ1·cls + λ2·tri + λ3·raft`. Any non-finite component aborts with the
/// component's name.
pub fn total_loss(
    cls: &Tensor,
    tri: &Tensor,
    raft: &Tensor,
    weights: &LossWeights,
    step: usize,
) -> Result<Tensor> {
    for (t, name) in [(cls, "classification loss"), (tri, "triplet loss"), (raft, "RAFT loss")] {
        if !scalar(t)?.is_finite() {
            return Err(FtwaError::Divergence {
                step,
                component: name.into(),
            });
        }
    }
    let total = ((cls * weights.lambda_cls)? + (tri * weights.lambda_tri)?)?;
    Ok((total + (raft * weights.lambda_raft)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn s(v: f64) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn gap_of_small_map() {
        let xs = Tensor::new(&[[[[1f64, 3.]], [[2., 2.]]]], &Device::Cpu).unwrap();
        let v = gap(&xs).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(v, vec![vec![2.0, 2.0]]);
        let zero = Tensor::zeros((2, 5, 3, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(gap(&zero).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zeroed_evaluator_gives_one_half() {
        let store = ParamStore::new(0, DType::F64, Device::Cpu);
        let heads = SwaHeads::new(8, 4, true, true, &store.root().pp(SWA_NAMESPACE)).unwrap();
        for n in ["swa.w_hr.out.weight", "swa.w_hr.out.bias"] {
            let v = store.get(n).unwrap();
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let v = Tensor::randn(0f64, 1.0, (3, 8), &Device::Cpu).unwrap();
        let w = heads.evaluate(&v, Stream::Hr).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(w, vec![0.5; 3]);
        let w = heads.evaluate(&v, Stream::Lr).unwrap().to_vec1::<f64>().unwrap();
        assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn saturated_evaluator_stays_positive() {
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        let heads = SwaHeads::new(8, 4, true, true, &store.root().pp(SWA_NAMESPACE)).unwrap();
        let b = store.get("swa.w_hr.out.bias").unwrap();
        b.set(&(b.ones_like().unwrap() * -1000.0).unwrap()).unwrap();
        let v = Tensor::randn(0f32, 1.0, (3, 8), &Device::Cpu).unwrap();
        let w = heads.evaluate(&v, Stream::Hr).unwrap().to_vec1::<f32>().unwrap();
        assert!(w.iter().all(|&x| x as f64 >= WEIGHT_FLOOR * 0.999));
    }

    #[test]
    fn missing_heads_are_contract_errors() {
        let store = ParamStore::new(0, DType::F64, Device::Cpu);
        let heads = SwaHeads::new(8, 4, false, false, &store.root()).unwrap();
        let v = Tensor::zeros((1, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(heads.evaluate(&v, Stream::Hr), Err(FtwaError::Contract(_))));
        assert!(matches!(heads.classify(&v, Stream::Lr), Err(FtwaError::Contract(_))));
        assert_eq!(heads.classify(&v, Stream::Hr).unwrap().dims(), &[1, 4]);
        assert_eq!(store.names(), vec!["c_hr.bias", "c_hr.weight"]);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros((1, 5), DType::F64, &Device::Cpu).unwrap();
        let l = cls_loss(&uniform, &[2]).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((l - 5f64.ln()).abs() < 1e-12);
        let sat = Tensor::new(&[[0f64, 1e6, 0.]], &Device::Cpu).unwrap();
        assert!(cls_loss(&sat, &[1]).unwrap().to_vec1::<f64>().unwrap()[0].abs() < 1e-12);
        let f = Tensor::new(&[[1f64, 2.]], &Device::Cpu).unwrap();
        let l = cls_loss(&f, &[1]).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((l - 0.31326168751822286).abs() < 1e-12);
        assert!(matches!(
            cls_loss(&f, &[2]),
            Err(FtwaError::Label { label: 2, vocabulary: 2 })
        ));
    }

    #[test]
    fn weighted_classification_example() {
        let (w1, w2, w3, w4) = (t(&[0.8]), t(&[0.2]), t(&[0.5]), t(&[0.5]));
        let (l1, l2, l3, l4) = (t(&[1.0]), t(&[3.0]), t(&[2.0]), t(&[4.0]));
        let hr = WeightedPair { w_real: &w1, l_real: &l1, w_synth: &w2, l_synth: &l2 };
        let lr = WeightedPair { w_real: &w3, l_real: &l3, w_synth: &w4, l_synth: &l4 };
        assert!((scalar(&swa_cls_loss(&hr, &lr).unwrap()).unwrap() - 4.4).abs() < 1e-12);
    }

    #[test]
    fn non_positive_weight_is_rejected() {
        let (w, z, l) = (t(&[0.5]), t(&[0.0]), t(&[1.0]));
        let hr = WeightedPair { w_real: &w, l_real: &l, w_synth: &z, l_synth: &l };
        let lr = WeightedPair { w_real: &w, l_real: &l, w_synth: &w, l_synth: &l };
        assert!(matches!(swa_cls_loss(&hr, &lr), Err(FtwaError::Contract(_))));
        assert!(swa_triplet_loss(&s(1.), &s(-1.), &s(1.), &s(1.), &s(1.), &s(1.)).is_err());
    }

    #[test]
    fn identical_vectors_give_margin() {
        let v = Tensor::ones((4, 3), DType::F64, &Device::Cpu).unwrap();
        let out = triplet_loss(&v, &[0, 0, 1, 1], 0.3, TripletMining::BatchAll).unwrap();
        assert!((scalar(&out.loss).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(out.valid, 8);
        let hard = triplet_loss(&v, &[0, 0, 1, 1], 0.3, TripletMining::BatchHard).unwrap();
        assert!((scalar(&hard.loss).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn separated_clusters_give_zero() {
        let v = Tensor::new(&[[0f64, 0.], [0., 0.], [5., 0.], [5., 0.]], &Device::Cpu).unwrap();
        let out = triplet_loss(&v, &[0, 0, 1, 1], 0.3, TripletMining::BatchAll).unwrap();
        assert_eq!(scalar(&out.loss).unwrap(), 0.0);
    }

    #[test]
    fn no_positive_pair_is_degenerate() {
        let v = Tensor::randn(0f64, 1.0, (3, 2), &Device::Cpu).unwrap();
        let out = triplet_loss(&v, &[0, 1, 2], 0.3, TripletMining::BatchAll).unwrap();
        assert!(out.degenerate);
        assert_eq!(scalar(&out.loss).unwrap(), 0.0);
        let out = triplet_loss(&v, &[1, 1, 1], 0.3, TripletMining::BatchHard).unwrap();
        assert!(out.degenerate);
    }

    #[test]
    fn weighted_triplet_example() {
        let l = swa_triplet_loss(&s(0.5), &s(0.5), &s(1.), &s(1.), &s(2.), &s(4.)).unwrap();
        assert!((scalar(&l).unwrap() - 3.6).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        let one = s(1.0);
        assert!((scalar(&total_loss(&one, &one, &one, &w, 0).unwrap()).unwrap() - 4.1).abs() < 1e-12);
        let zero = LossWeights { lambda_cls: 0., lambda_tri: 0., lambda_raft: 0., margin: 0.3 };
        assert_eq!(scalar(&total_loss(&one, &one, &one, &zero, 0).unwrap()).unwrap(), 0.0);
        let err = total_loss(&one, &s(f64::NAN), &one, &w, 17).unwrap_err();
        assert!(matches!(err, FtwaError::Divergence { step: 17, ref component } if component == "triplet loss"));
    }
}
