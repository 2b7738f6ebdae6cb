//! Pretraining with policy-sampled noise masks, plain supervised training,
//! optimisers and schedules.
//!
//! Sign convention: the policy minimises `reinforce_loss`, whose weight is
//! the positive per-sample cross-entropy. Descending it lowers the density
//! of masks that produced a high loss, i.e. REINFORCE on cost.

mod run;

pub use run::{
    eval_split, finetune, history_csv, init_pretrain_state, mask_histograms, run_pretraining, sample_policy_masks, train_baseline,
    HistoryRow, RunOutcome, HISTORY_CSV_HEADER,
};

use std::fmt;
use std::str::FromStr;

use crate::distributions::{beta_log_prob, beta_sample, BetaParams};
use crate::error::{Error, Result};
use crate::mask::{apply_mask, fixed_noise_mask, make_full_mask, MaskConfig, NoiseKind};
use crate::networks::{blend_params, Checkpoint, ClassifierNet, EmaState, OptimizerState, PolicyNet};
use crate::rng::{Rng, Stream};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Per-sample `logsumexp` of the element log-densities.
    LogSumExp,
    /// Per-sample sum of the element log-densities (joint log-likelihood).
    SumLogProb,
}

impl FromStr for Reduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logsumexp" => Ok(Reduction::LogSumExp),
            "sum" | "sum_logprob" => Ok(Reduction::SumLogProb),
            other => Err(Error::Config(format!("unknown reduction `{other}` (logsumexp|sum)"))),
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::LogSumExp => "logsumexp",
            Reduction::SumLogProb => "sum",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    Step { period: usize, factor: f64 },
    Cosine,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Step { .. } => "step",
            Schedule::Cosine => "cosine",
        })
    }
}

/// Learning rate for `epoch` of `total_epochs`.
pub fn lr_schedule(schedule: Schedule, epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    match schedule {
        Schedule::Constant => base_lr,
        Schedule::Step { period, factor } => base_lr * factor.powi((epoch / period.max(1)) as i32),
        Schedule::Cosine => {
            let t = epoch as f64 / total_epochs.max(1) as f64;
            base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Where the multiplicative masks come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    Policy,
    Fixed(NoiseKind),
    None,
}

impl FromStr for MaskSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "policy" => Ok(MaskSource::Policy),
            "gaussian" => Ok(MaskSource::Fixed(NoiseKind::Gaussian)),
            "uniform" => Ok(MaskSource::Fixed(NoiseKind::Uniform)),
            "pure" => Ok(MaskSource::Fixed(NoiseKind::Pure)),
            "none" => Ok(MaskSource::None),
            other => Err(Error::Config(format!(
                "unknown mask source `{other}` (policy|gaussian|uniform|pure|none)"
            ))),
        }
    }
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskSource::Policy => "policy",
            MaskSource::Fixed(NoiseKind::Gaussian) => "gaussian",
            MaskSource::Fixed(NoiseKind::Uniform) => "uniform",
            MaskSource::Fixed(NoiseKind::Pure) => "pure",
            MaskSource::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_classifier: f64,
    pub lr_policy: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule_classifier: Schedule,
    pub schedule_policy: Schedule,
    pub reduction: Reduction,
    pub seed: u64,
    pub divergence_guard: f64,
    /// Early stopping on validation accuracy; 0 disables it.
    pub patience: usize,
    /// Weight the classifier cross-entropy by the detached per-sample log-prob term.
    pub combined_loss: bool,
    /// Debug: replace every sampled mask by ones after sampling.
    pub force_ones_mask: bool,
    pub mask_source: MaskSource,
    pub flip_prob: f64,
    pub crop_pad: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 64,
            lr_classifier: 0.05,
            lr_policy: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule_classifier: Schedule::Step { period: 5, factor: 0.1 },
            schedule_policy: Schedule::Cosine,
            reduction: Reduction::LogSumExp,
            seed: 0,
            divergence_guard: 1e3,
            patience: 0,
            combined_loss: false,
            force_ones_mask: false,
            mask_source: MaskSource::Policy,
            flip_prob: 0.5,
            crop_pad: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")))
            }
        };
        rate("lr_classifier", self.lr_classifier)?;
        rate("lr_policy", self.lr_policy)?;
        rate("weight_decay", self.weight_decay)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.divergence_guard > 0.0) {
            return Err(Error::Config("divergence_guard must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob must lie in [0,1], got {}", self.flip_prob)));
        }
        if let Schedule::Step { period, factor } = self.schedule_classifier {
            if period == 0 || !(factor > 0.0) {
                return Err(Error::Config("step schedule needs a positive period and factor".into()));
            }
        }
        Ok(())
    }
}

/// Loss whose gradient is the score-function estimator.
///
/// `ce` is a constant weight: no gradient flows through it.
pub fn reinforce_loss(g: &Graph, log_prob_map: Var, ce: &[f64], reduction: Reduction) -> Result<Var> {
    let shape = g.shape(log_prob_map);
    if shape.is_empty() || shape[0] != ce.len() {
        return Err(Error::Shape(format!("log-prob map {shape:?} for {} cost values", ce.len())));
    }
    let n = shape[0];
    let per_sample = g.reshape(log_prob_map, &[n, shape[1..].iter().product()])?;
    let reduced = match reduction {
        Reduction::LogSumExp => g.logsumexp(per_sample, &[1])?,
        Reduction::SumLogProb => g.sum(per_sample, &[1])?,
    };
    let weights = g.constant(Tensor::from_vec(ce.to_vec()));
    g.mean_all(g.mul(reduced, weights)?)
}

/// `g ← grad + wd·p; buf ← m·buf + g; p ← p − lr·buf`, in place.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    bufs: &mut [Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != bufs.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} buffers",
            params.len(),
            grads.len(),
            bufs.len()
        )));
    }
    for (k, ((p, g), b)) in params.iter_mut().zip(grads).zip(bufs.iter_mut()).enumerate() {
        if p.shape() != g.shape() || p.shape() != b.shape() {
            return Err(Error::Shape(format!("parameter {k}: shapes disagree")));
        }
        if !g.all_finite() {
            return Err(Error::Divergence(format!("non-finite gradient in parameter tensor {k}")));
        }
        for ((pv, &gv), bv) in p.data_mut().iter_mut().zip(g.data()).zip(b.data_mut()) {
            let step = gv + weight_decay * *pv;
            *bv = momentum * *bv + step;
            *pv -= lr * *bv;
        }
    }
    Ok(())
}

fn guard(what: &str, value: f64, limit: f64) -> Result<()> {
    if !value.is_finite() {
        Err(Error::Divergence(format!("{what} is not finite ({value})")))
    } else if value.abs() > limit {
        Err(Error::Divergence(format!("{what} {value} exceeds divergence_guard {limit}")))
    } else {
        Ok(())
    }
}

/// Parameters, momentum buffers, EMA state, loop position and mask stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub classifier: ClassifierNet,
    pub classifier_momentum: Vec<Tensor>,
    pub policy: Option<PolicyNet>,
    pub policy_momentum: Vec<Tensor>,
    pub ema: Option<EmaState>,
    pub epoch: usize,
    pub rng: Rng,
}

fn zeros_like(ps: &[Tensor]) -> Vec<Tensor> {
    ps.iter().map(|p| Tensor::zeros(p.shape())).collect()
}

impl TrainState {
    pub fn new(classifier: ClassifierNet, policy: Option<PolicyNet>, ema: Option<EmaState>, seed: u64) -> Self {
        TrainState {
            classifier_momentum: zeros_like(classifier.params()),
            policy_momentum: policy.as_ref().map_or_else(Vec::new, |p| zeros_like(p.params())),
            classifier,
            policy,
            ema,
            epoch: 0,
            rng: Rng::stream(seed, Stream::Masks),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            classifier: self.classifier.clone(),
            policy: self.policy.clone(),
            ema: self.ema.clone(),
            optimizer: Some(OptimizerState {
                classifier_momentum: self.classifier_momentum.clone(),
                policy_momentum: self.policy_momentum.clone(),
                epoch: self.epoch as u64,
                rng_seed: self.rng.seed(),
                rng_state: self.rng.state(),
            }),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        match &ck.optimizer {
            Some(o) => TrainState {
                classifier: ck.classifier.clone(),
                classifier_momentum: o.classifier_momentum.clone(),
                policy: ck.policy.clone(),
                policy_momentum: o.policy_momentum.clone(),
                ema: ck.ema.clone(),
                epoch: o.epoch as usize,
                rng: Rng::from_state(o.rng_seed, o.rng_state),
            },
            None => {
                let mut s = TrainState::new(ck.classifier.clone(), ck.policy.clone(), ck.ema.clone(), 0);
                s.rng = Rng::new(0);
                s
            }
        }
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub ce_mean: f64,
    /// Mean over samples of `logsumexp` of the raw-mask log-densities (0 without a policy).
    pub lse_mean: f64,
    pub policy_loss: f64,
    /// Mean and std of the full-resolution masks (1 and 0 without masks).
    pub mask_mean: f64,
    pub mask_std: f64,
    pub logits: Tensor,
}

struct PolicyPass {
    graph: Graph,
    vars: Vec<Var>,
    log_prob: Var,
}

/// One optimisation step on a preprocessed batch `x` `[N,C,H,W]`.
///
/// Order: policy forward, EMA blend (with dataset update), Beta sample of
/// the raw matrix, its log-density, full-resolution mask, masked classifier
/// forward, per-sample cross-entropy, then one SGD step per network.
pub fn pretrain_step(
    state: &mut TrainState,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    mask_cfg: &MaskConfig,
    lr_classifier: f64,
    lr_policy: f64,
) -> Result<StepStats> {
    let n = labels.len();
    if n == 0 || x.rank() != 4 || x.shape()[0] != n {
        return Err(Error::Contract(format!("batch {:?} for {n} labels", x.shape())));
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let images: Vec<Tensor> = (0..n).map(|i| x.index0(i)).collect::<Result<_>>()?;

    let mut policy_pass = None;
    let mut masks: Option<Vec<Tensor>> = None;
    match cfg.mask_source {
        MaskSource::Policy => {
            let policy = state
                .policy
                .as_ref()
                .ok_or_else(|| Error::Config("mask source `policy` needs a policy network".into()))?;
            let ema = state
                .ema
                .as_mut()
                .ok_or_else(|| Error::Config("mask source `policy` needs an EMA state".into()))?;
            let graph = Graph::new();
            let vars = policy.bind(&graph, true);
            let input = graph.constant(x.clone());
            let (a, b) = policy.forward(&graph, &vars, input)?;
            let blended = blend_params(&graph, a, b, ema, true)?;
            let params = BetaParams::new(graph.value(blended.alpha), graph.value(blended.beta))?;
            let raw = beta_sample(&params, &mut state.rng);
            let log_prob = beta_log_prob(&graph, &raw, blended.alpha, blended.beta)?;
            masks = Some(
                (0..n)
                    .map(|i| make_full_mask(&raw.index0(i)?, h, w, mask_cfg))
                    .collect::<Result<_>>()?,
            );
            policy_pass = Some(PolicyPass { graph, vars, log_prob });
        }
        MaskSource::Fixed(kind) => {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(if kind.post_processed() {
                    let raw = fixed_noise_mask(kind, mask_cfg.noise_h, mask_cfg.noise_w, &mut state.rng);
                    make_full_mask(&raw, h, w, mask_cfg)?
                } else {
                    fixed_noise_mask(kind, h, w, &mut state.rng)
                });
            }
            masks = Some(out);
        }
        MaskSource::None => {}
    }
    if cfg.force_ones_mask {
        if let Some(m) = masks.as_mut() {
            m.iter_mut().for_each(|t| *t = Tensor::ones(&[h, w]));
        }
    }

    let (mask_mean, mask_std) = match &masks {
        Some(ms) => {
            let all: Vec<f64> = ms.iter().flat_map(|m| m.data().iter().copied()).collect();
            let t = Tensor::from_vec(all);
            (t.mean(), t.std())
        }
        None => (1.0, 0.0),
    };
    let masked = match &masks {
        Some(ms) => {
            let items: Vec<Tensor> = images
                .iter()
                .zip(ms)
                .map(|(img, m)| apply_mask(img, m))
                .collect::<Result<_>>()?;
            Tensor::stack(&items)?
        }
        None => x.clone(),
    };

    let lse: Option<Vec<f64>> = policy_pass.as_ref().map(|p| {
        p.graph.with_value(p.log_prob, |lp| {
            let k = lp.numel() / n;
            lp.data()
                .chunks(k)
                .map(|row| {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
                })
                .collect()
        })
    });

    let gb = Graph::new();
    let cvars = state.classifier.bind(&gb, true);
    let input = gb.constant(masked);
    let logits = state.classifier.forward(&gb, &cvars, input)?;
    let ce = gb.cross_entropy(logits, labels)?;
    let ce_values = gb.value(ce);
    let ce_mean = ce_values.mean();
    guard("cross-entropy", ce_mean, cfg.divergence_guard)?;
    let closs = match (&lse, cfg.combined_loss) {
        (Some(weights), true) => gb.mean_all(gb.mul(ce, gb.constant(Tensor::from_vec(weights.clone())))?)?,
        _ => gb.mean_all(ce)?,
    };
    guard("classifier loss", gb.scalar_value(closs)?, cfg.divergence_guard)?;
    let cgrads = gb.grad(closs, &cvars)?;

    let mut policy_loss = 0.0;
    let mut pgrads = None;
    if let Some(p) = &policy_pass {
        let loss = reinforce_loss(&p.graph, p.log_prob, ce_values.data(), cfg.reduction)?;
        policy_loss = p.graph.scalar_value(loss)?;
        guard("policy loss", policy_loss, cfg.divergence_guard)?;
        pgrads = Some(p.graph.grad(loss, &p.vars)?);
    }

    let mut cparams = state.classifier.params().to_vec();
    sgd_step(
        &mut cparams,
        &cgrads,
        &mut state.classifier_momentum,
        lr_classifier,
        cfg.momentum,
        cfg.weight_decay,
    )?;
    state.classifier.set_params(cparams)?;
    if let (Some(grads), Some(policy)) = (pgrads, state.policy.as_mut()) {
        let mut pparams = policy.params().to_vec();
        sgd_step(
            &mut pparams,
            &grads,
            &mut state.policy_momentum,
            lr_policy,
            cfg.momentum,
            cfg.weight_decay,
        )?;
        policy.set_params(pparams)?;
    }

    Ok(StepStats {
        ce_mean,
        lse_mean: lse.map_or(0.0, |v| v.iter().sum::<f64>() / n as f64),
        policy_loss,
        mask_mean,
        mask_std,
        logits: gb.value(logits),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{ClassifierSpec, PolicySpec};

    #[test]
    fn sgd_examples() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut b = vec![Tensor::scalar(0.0)];
        sgd_step(&mut p, &[Tensor::scalar(0.5)], &mut b, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p[0].data()[0], 0.95);

        let mut p = vec![Tensor::scalar(1.0)];
        let mut b = vec![Tensor::scalar(0.0)];
        sgd_step(&mut p, &[Tensor::scalar(0.0)], &mut b, 0.1, 0.0, 0.1).unwrap();
        assert!((p[0].data()[0] - 0.99).abs() < 1e-15);

        let mut p = vec![Tensor::scalar(1.0)];
        let mut b = vec![Tensor::scalar(0.0)];
        sgd_step(&mut p, &[Tensor::scalar(1.0)], &mut b, 0.1, 0.9, 0.0).unwrap();
        assert_eq!((b[0].data()[0], p[0].data()[0]), (1.0, 0.9));
        sgd_step(&mut p, &[Tensor::scalar(1.0)], &mut b, 0.1, 0.9, 0.0).unwrap();
        assert!((b[0].data()[0] - 1.9).abs() < 1e-15);
        assert!((p[0].data()[0] - 0.71).abs() < 1e-15);

        let bad = sgd_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut b, 0.1, 0.9, 0.0);
        assert!(matches!(bad, Err(Error::Divergence(_))));
    }

    #[test]
    fn schedules() {
        let step = Schedule::Step { period: 30, factor: 0.1 };
        let lrs: Vec<f64> = [0, 30, 60].iter().map(|&e| lr_schedule(step, e, 90, 0.1)).collect();
        assert!((lrs[0] - 0.1).abs() < 1e-15 && (lrs[1] - 0.01).abs() < 1e-15 && (lrs[2] - 0.001).abs() < 1e-15);
        assert_eq!(lr_schedule(Schedule::Cosine, 0, 10, 0.4), 0.4);
        assert!((lr_schedule(Schedule::Cosine, 5, 10, 0.4) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn reinforce_loss_on_uniform_masks() {
        let g = Graph::new();
        let lp = g.param(Tensor::zeros(&[3, 8, 8]));
        let ce = [0.7, 0.7, 0.7];
        let lse = g.scalar_value(reinforce_loss(&g, lp, &ce, Reduction::LogSumExp).unwrap()).unwrap();
        assert!((lse - 64f64.ln() * 0.7).abs() < 1e-12);
        let sum = g.scalar_value(reinforce_loss(&g, lp, &ce, Reduction::SumLogProb).unwrap()).unwrap();
        assert_eq!(sum, 0.0);

        let g = Graph::new();
        let lp = g.param(Tensor::full(&[1, 1, 1], -0.3));
        for r in [Reduction::LogSumExp, Reduction::SumLogProb] {
            assert_eq!(g.scalar_value(reinforce_loss(&g, lp, &[2.0], r).unwrap()).unwrap(), -0.3 * 2.0);
        }
        assert!(reinforce_loss(&g, lp, &[1.0, 2.0], Reduction::SumLogProb).is_err());
        assert!("median".parse::<Reduction>().is_err());
    }

    fn tiny_state(seed: u64) -> TrainState {
        let c = ClassifierNet::init(ClassifierSpec::small(1, 16, 16, 3), seed).unwrap();
        let p = PolicyNet::init(PolicySpec::small(1, 16, 16, 4, 4), seed + 1).unwrap();
        TrainState::new(c, Some(p), Some(EmaState::new(4, 4, 0.9, 0.99).unwrap()), seed)
    }

    fn tiny_batch() -> (Tensor, Vec<usize>) {
        let mut rng = Rng::new(5);
        let x = Tensor::new(vec![4, 1, 16, 16], (0..4 * 256).map(|_| rng.normal()).collect()).unwrap();
        (x, vec![0, 1, 2, 1])
    }

    fn mask_cfg() -> MaskConfig {
        MaskConfig {
            noise_h: 4,
            noise_w: 4,
            blur_kernel: 5,
            blur_sigma: 1.5,
            ..MaskConfig::default()
        }
    }

    #[test]
    fn step_is_deterministic() {
        let (x, y) = tiny_batch();
        let cfg = TrainConfig::default();
        let mut a = tiny_state(1);
        let mut b = tiny_state(1);
        let sa = pretrain_step(&mut a, &x, &y, &cfg, &mask_cfg(), 0.05, 0.01).unwrap();
        let sb = pretrain_step(&mut b, &x, &y, &cfg, &mask_cfg(), 0.05, 0.01).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(sa.mask_mean > 0.0 && sa.mask_mean < 1.0);
        assert_ne!(a.policy, tiny_state(1).policy);
    }

    #[test]
    fn ones_mask_matches_plain_supervised_step() {
        let (x, y) = tiny_batch();
        let cfg = TrainConfig {
            force_ones_mask: true,
            ..TrainConfig::default()
        };
        let plain = TrainConfig {
            mask_source: MaskSource::None,
            ..TrainConfig::default()
        };
        let mut a = tiny_state(2);
        let mut b = tiny_state(2);
        pretrain_step(&mut a, &x, &y, &cfg, &mask_cfg(), 0.05, 0.01).unwrap();
        pretrain_step(&mut b, &x, &y, &plain, &mask_cfg(), 0.05, 0.01).unwrap();
        assert_eq!(a.classifier, b.classifier);
        assert_eq!(a.classifier_momentum, b.classifier_momentum);
    }

    #[test]
    fn exploding_loss_trips_the_guard() {
        let (x, y) = tiny_batch();
        let cfg = TrainConfig {
            divergence_guard: 1e-3,
            ..TrainConfig::default()
        };
        let mut s = tiny_state(3);
        assert!(matches!(
            pretrain_step(&mut s, &x, &y, &cfg, &mask_cfg(), 0.05, 0.01),
            Err(Error::Divergence(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_of_state() {
        let (x, y) = tiny_batch();
        let mut s = tiny_state(4);
        pretrain_step(&mut s, &x, &y, &TrainConfig::default(), &mask_cfg(), 0.05, 0.01).unwrap();
        s.epoch = 3;
        let ck = s.to_checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes(), std::path::Path::new("mem")).unwrap();
        assert_eq!(TrainState::from_checkpoint(&back), s);
    }
}
