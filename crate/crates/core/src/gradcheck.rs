//! Finite-difference verification of the analytic gradients of every loss
//! on toy shapes in 64-bit precision.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::backbone::Stream;
use crate::error::{FtwaError, Result};
use crate::nn::ParamStore;
use crate::raft::{raft_loss, Raft, RaftConfig, RAFT_NAMESPACE};
use crate::swa::{
    cls_loss, swa_cls_loss, swa_triplet_loss, total_loss, triplet_loss, LossWeights, SwaHeads,
    TripletMining, WeightedPair, SWA_NAMESPACE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradLoss {
    Raft,
    Cls,
    Tri,
    SwaCls,
    SwaTri,
    Total,
}

impl GradLoss {
    pub const ALL: [GradLoss; 6] = [
        GradLoss::Raft,
        GradLoss::Cls,
        GradLoss::Tri,
        GradLoss::SwaCls,
        GradLoss::SwaTri,
        GradLoss::Total,
    ];

    pub fn key(self) -> &'static str {
        match self {
            GradLoss::Raft => "raft",
            GradLoss::Cls => "cls",
            GradLoss::Tri => "tri",
            GradLoss::SwaCls => "swa_cls",
            GradLoss::SwaTri => "swa_tri",
            GradLoss::Total => "total",
        }
    }
}

impl fmt::Display for GradLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for GradLoss {
    type Err = FtwaError;

    fn from_str(s: &str) -> Result<Self> {
        GradLoss::ALL
            .into_iter()
            .find(|l| l.key() == s)
            .ok_or_else(|| {
                FtwaError::Config(format!(
                    "unknown loss '{s}' (expected raft, cls, tri, swa_cls, swa_tri or total)"
                ))
            })
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub losses: Vec<GradLoss>,
    /// Standard deviation of a random shift applied to the checked tensors
    /// between the analytic and the numeric pass. Zero for a real check; a
    /// positive value is a negative control that must fail.
    pub perturb: f64,
    pub step: f64,
    pub tolerance: f64,
    /// Smallest gradient magnitude used as the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            losses: GradLoss::ALL.to_vec(),
            perturb: 0.0,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckResult {
    pub loss: GradLoss,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Tensor and flat index of the worst coordinate.
    pub worst: String,
    pub passed: bool,
}

/// Toy shapes: embedding width 8, 4 identities, 8 feature channels.
const DIM: usize = 8;
const IDS: usize = 4;
const CHANNELS: usize = 8;

struct Toy {
    store: ParamStore,
    raft: Raft,
    heads: SwaHeads,
    f_hr: Tensor,
    f_lr_synth: Var,
    logits: Var,
    v_hr: Var,
    v_hr_synth: Var,
    v_lr: Var,
    v_lr_synth: Var,
    labels: Vec<usize>,
}

fn random_var(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Var> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Var::from_tensor(&Tensor::from_vec(v, shape, &Device::Cpu)?)?)
}

impl Toy {
    fn new(seed: u64) -> Result<Self> {
        let store = ParamStore::new(seed, DType::F64, Device::Cpu);
        let root = store.root();
        let raft = Raft::new(RaftConfig::new(CHANNELS, 4), &root.pp(RAFT_NAMESPACE))?;
        let heads = SwaHeads::new(DIM, IDS, true, true, &root.pp(SWA_NAMESPACE))?;
        // Non-zero biases so their gradients are exercised away from zero.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        for (_, var) in store.trainable() {
            let noise = random_var(&mut rng, var.dims())?;
            var.set(&(var.as_tensor() + (noise.as_tensor() * 0.1)?)?)?;
        }
        let f_hr = random_var(&mut rng, &[2, CHANNELS, 4, 2])?.as_tensor().clone();
        Ok(Self {
            raft,
            heads,
            f_hr,
            f_lr_synth: random_var(&mut rng, &[2, CHANNELS, 4, 2])?,
            logits: random_var(&mut rng, &[2 * IDS, IDS])?,
            v_hr: random_var(&mut rng, &[IDS, DIM])?,
            v_hr_synth: random_var(&mut rng, &[IDS, DIM])?,
            v_lr: random_var(&mut rng, &[IDS, DIM])?,
            v_lr_synth: random_var(&mut rng, &[IDS, DIM])?,
            labels: (0..IDS).collect(),
            store,
        })
    }

    fn params(&self, namespace: &str) -> Vec<(String, Var)> {
        let prefix = format!("{namespace}.");
        self.store
            .trainable()
            .into_iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .collect()
    }

    fn vectors(&self) -> Vec<(String, Var)> {
        vec![
            ("v_hr".into(), self.v_hr.clone()),
            ("v_hr_synth".into(), self.v_hr_synth.clone()),
            ("v_lr".into(), self.v_lr.clone()),
            ("v_lr_synth".into(), self.v_lr_synth.clone()),
        ]
    }

    fn raft_term(&self) -> Result<Tensor> {
        raft_loss(&self.f_hr, &self.raft.transform(self.f_lr_synth.as_tensor())?)
    }

    fn swa_cls_term(&self) -> Result<Tensor> {
        let h = &self.heads;
        let y = &self.labels;
        let (v_hr, v_hs, v_lr, v_ls) = (
            self.v_hr.as_tensor(),
            self.v_hr_synth.as_tensor(),
            self.v_lr.as_tensor(),
            self.v_lr_synth.as_tensor(),
        );
        let l_hr = cls_loss(&h.classify(v_hr, Stream::Hr)?, y)?;
        let l_hs = cls_loss(&h.classify(v_hs, Stream::Hr)?, y)?;
        let l_lr = cls_loss(&h.classify(v_lr, Stream::Lr)?, y)?;
        let l_ls = cls_loss(&h.classify(v_ls, Stream::Lr)?, y)?;
        let w_hr = h.evaluate(v_hr, Stream::Hr)?;
        let w_hs = h.evaluate(v_hs, Stream::Hr)?;
        let w_lr = h.evaluate(v_lr, Stream::Lr)?;
        let w_ls = h.evaluate(v_ls, Stream::Lr)?;
        swa_cls_loss(
            &WeightedPair { w_real: &w_hr, l_real: &l_hr, w_synth: &w_ls, l_synth: &l_ls },
            &WeightedPair { w_real: &w_lr, l_real: &l_lr, w_synth: &w_hs, l_synth: &l_hs },
        )
    }

    fn swa_tri_term(&self) -> Result<Tensor> {
        let h = &self.heads;
        let y: Vec<usize> = self.labels.iter().chain(&self.labels).copied().collect();
        let m = LossWeights::default().margin;
        let union = |a: &Var, b: &Var| Tensor::cat(&[a.as_tensor(), b.as_tensor()], 0);
        let l_hr = triplet_loss(&union(&self.v_hr, &self.v_hr_synth)?, &y, m, TripletMining::BatchAll)?;
        let l_lr = triplet_loss(&union(&self.v_lr, &self.v_lr_synth)?, &y, m, TripletMining::BatchAll)?;
        let w = |v: &Var, s| -> Result<Tensor> { Ok(h.evaluate(v.as_tensor(), s)?.mean_all()?) };
        swa_triplet_loss(
            &w(&self.v_hr, Stream::Hr)?,
            &w(&self.v_hr_synth, Stream::Hr)?,
            &w(&self.v_lr, Stream::Lr)?,
            &w(&self.v_lr_synth, Stream::Lr)?,
            &l_hr.loss,
            &l_lr.loss,
        )
    }

    fn loss(&self, which: GradLoss) -> Result<Tensor> {
        match which {
            GradLoss::Raft => self.raft_term(),
            GradLoss::Cls => {
                let y: Vec<usize> = self.labels.iter().chain(&self.labels).copied().collect();
                Ok(cls_loss(self.logits.as_tensor(), &y)?.mean_all()?)
            }
            GradLoss::Tri => {
                let v = Tensor::cat(&[self.v_hr.as_tensor(), self.v_lr.as_tensor()], 0)?;
                let y: Vec<usize> = self.labels.iter().chain(&self.labels).copied().collect();
                Ok(triplet_loss(&v, &y, 0.3, TripletMining::BatchAll)?.loss)
            }
            GradLoss::SwaCls => self.swa_cls_term(),
            GradLoss::SwaTri => self.swa_tri_term(),
            GradLoss::Total => total_loss(
                &self.swa_cls_term()?,
                &self.swa_tri_term()?,
                &self.raft_term()?,
                &LossWeights::default(),
                0,
            ),
        }
    }

    fn inputs(&self, which: GradLoss) -> Vec<(String, Var)> {
        let raft_in = || vec![("f_lr_synth".to_string(), self.f_lr_synth.clone())];
        match which {
            GradLoss::Raft => [raft_in(), self.params(RAFT_NAMESPACE)].concat(),
            GradLoss::Cls => vec![("logits".into(), self.logits.clone())],
            GradLoss::Tri => self.vectors().into_iter().filter(|(k, _)| k == "v_hr" || k == "v_lr").collect(),
            GradLoss::SwaCls => [self.vectors(), self.params(SWA_NAMESPACE)].concat(),
            GradLoss::SwaTri => {
                let evaluators: Vec<_> = self
                    .params(SWA_NAMESPACE)
                    .into_iter()
                    .filter(|(k, _)| k.starts_with("swa.w_"))
                    .collect();
                [self.vectors(), evaluators].concat()
            }
            GradLoss::Total => [
                raft_in(),
                self.vectors(),
                self.params(RAFT_NAMESPACE),
                self.params(SWA_NAMESPACE),
            ]
            .concat(),
        }
    }
}

fn values(var: &Var) -> Result<Vec<f64>> {
    Ok(var.flatten_all()?.to_vec1::<f64>()?)
}

fn assign(var: &Var, v: Vec<f64>) -> Result<()> {
    Ok(var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu)?)?)
}

fn check_one(toy: &Toy, which: GradLoss, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<GradcheckResult> {
    let inputs = toy.inputs(which);
    let grads = toy.loss(which)?.backward()?;
    let mut analytic = Vec::with_capacity(inputs.len());
    for (name, var) in &inputs {
        let g = grads
            .get(var.as_tensor())
            .ok_or_else(|| FtwaError::Contract(format!("{which}: no gradient reached {name}")))?;
        analytic.push(g.flatten_all()?.to_vec1::<f64>()?);
    }
    let originals = inputs.iter().map(|(_, v)| values(v)).collect::<Result<Vec<_>>>()?;
    if opts.perturb > 0.0 {
        for ((_, var), orig) in inputs.iter().zip(&originals) {
            let shifted = orig
                .iter()
                .map(|x| {
                    let z: f64 = StandardNormal.sample(rng);
                    x + opts.perturb * z
                })
                .collect();
            assign(var, shifted)?;
        }
    }

    let h = opts.step;
    let eval = |which| -> Result<f64> { Ok(toy.loss(which)?.to_scalar::<f64>()?) };
    let mut worst = (0.0f64, String::new());
    let mut coords = 0;
    for (((name, var), grad), _) in inputs.iter().zip(&analytic).zip(&originals) {
        let base = values(var)?;
        for i in 0..base.len() {
            let mut x = base.clone();
            x[i] = base[i] + h;
            assign(var, x.clone())?;
            let up = eval(which)?;
            x[i] = base[i] - h;
            assign(var, x)?;
            let down = eval(which)?;
            let numeric = (up - down) / (2.0 * h);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(opts.floor);
            if rel > worst.0 || !rel.is_finite() {
                worst = (rel, format!("{name}[{i}]"));
            }
            coords += 1;
        }
        assign(var, base)?;
    }
    for ((_, var), orig) in inputs.iter().zip(originals) {
        assign(var, orig)?;
    }
    Ok(GradcheckResult {
        loss: which,
        coordinates: coords,
        max_rel_error: worst.0,
        worst: worst.1,
        passed: worst.0.is_finite() && worst.0 < opts.tolerance,
    })
}

/// Runs every requested check; the report lists each loss once.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<Vec<GradcheckResult>> {
    let toy = Toy::new(opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    opts.losses
        .iter()
        .map(|&l| check_one(&toy, l, opts, &mut rng))
        .collect()
}
