use log::info;

use super::{lr_schedule, pretrain_step, MaskSource, TrainConfig, TrainState};
use crate::data::{Augment, Dataset, Split};
use crate::distributions::{beta_sample, BetaParams};
use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, histogram_report, predict, HistogramReport, MetricsReport, FEATURE_BATCH};
use crate::mask::{fixed_noise_mask, make_full_mask, MaskConfig};
use crate::networks::{blend_params, Checkpoint, ClassifierNet, ClassifierSpec, EmaState, PolicyNet, PolicySpec};
use crate::rng::{Rng, Stream};
use crate::tensor::{Graph, Tensor};

pub const HISTORY_CSV_HEADER: &str =
    "epoch,split,loss,accuracy,macro_f1,lr_classifier,lr_policy,mask_mean,mask_std";

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub lr_classifier: f64,
    pub lr_policy: f64,
    pub mask_mean: f64,
    pub mask_std: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = format!("{HISTORY_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch, r.split, r.loss, r.accuracy, r.macro_f1, r.lr_classifier, r.lr_policy, r.mask_mean, r.mask_std
        ));
    }
    s
}

/// Final state, best-validation checkpoint and per-epoch rows.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: TrainState,
    pub best: Checkpoint,
    pub best_val_macro_f1: f64,
    /// One training row per completed epoch.
    pub history: Vec<HistoryRow>,
    /// One validation row per completed epoch.
    pub validation: Vec<HistoryRow>,
}

fn mean_ce(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[l]
        })
        .sum();
    total / labels.len() as f64
}

/// Unmasked metrics and mean cross-entropy of `net` on `indices`.
pub fn eval_split(net: &ClassifierNet, dataset: &Dataset, indices: &[usize]) -> Result<(MetricsReport, f64)> {
    let logits = predict(net, dataset, indices)?;
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.label(i)).collect();
    Ok((compute_metrics(&logits, &labels)?, mean_ce(&logits, &labels)))
}

fn check_dataset(dataset: &Dataset, spec: &ClassifierSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if spec.num_classes != dataset.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes but the dataset has {}",
            spec.num_classes,
            dataset.num_classes()
        )));
    }
    let b = &spec.backbone;
    if (b.in_channels, b.image_h, b.image_w) != (dataset.channels(), dataset.height(), dataset.width()) {
        return Err(Error::Config(format!(
            "model expects {}x{}x{} images, dataset has {}x{}x{}",
            b.in_channels,
            b.image_h,
            b.image_w,
            dataset.channels(),
            dataset.height(),
            dataset.width()
        )));
    }
    let (train, val) = (dataset.indices(Split::Train), dataset.indices(Split::Val));
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training needs non-empty train and val splits".into()));
    }
    Ok((train, val))
}

/// Epoch loop shared by pretraining, fine-tuning and baselines.
fn run_epochs(dataset: &Dataset, mut state: TrainState, cfg: &TrainConfig, mask_cfg: &MaskConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, val) = check_dataset(dataset, state.classifier.spec())?;
    if cfg.mask_source != MaskSource::None {
        mask_cfg.validate(dataset.height(), dataset.width())?;
    }
    let (mean, std) = dataset.norm();
    let aug = Augment {
        flip_prob: cfg.flip_prob,
        crop_pad: cfg.crop_pad,
        mean: mean.to_vec(),
        std: std.to_vec(),
    };
    let shuffle_seed = Rng::child_seed(cfg.seed, Stream::Shuffle as u64);
    let augment_seed = Rng::child_seed(cfg.seed, Stream::Augment as u64);
    let uses_policy = cfg.mask_source == MaskSource::Policy;

    let mut best = state.to_checkpoint();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_acc = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut history = Vec::new();
    let mut validation = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr_c = lr_schedule(cfg.schedule_classifier, epoch, cfg.epochs, cfg.lr_classifier);
        let lr_p = if uses_policy {
            lr_schedule(cfg.schedule_policy, epoch, cfg.epochs, cfg.lr_policy)
        } else {
            0.0
        };
        let mut order = train.clone();
        Rng::new(Rng::child_seed(shuffle_seed, epoch as u64)).shuffle(&mut order);
        let mut aug_rng = Rng::new(Rng::child_seed(augment_seed, epoch as u64));

        let (mut ce_sum, mut m_sum, mut m_sq, mut m_count) = (0.0, 0.0, 0.0, 0.0);
        let mut all_logits = Vec::with_capacity(order.len() * dataset.num_classes());
        let mut all_labels = Vec::with_capacity(order.len());
        for chunk in order.chunks(cfg.batch_size) {
            let x = dataset.batch(chunk, &aug, &mut aug_rng);
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.label(i)).collect();
            let stats = pretrain_step(&mut state, &x, &labels, cfg, mask_cfg, lr_c, lr_p)?;
            let k = chunk.len() as f64;
            ce_sum += stats.ce_mean * k;
            let px = (dataset.height() * dataset.width()) as f64 * k;
            m_sum += stats.mask_mean * px;
            m_sq += (stats.mask_std * stats.mask_std + stats.mask_mean * stats.mask_mean) * px;
            m_count += px;
            all_logits.extend_from_slice(stats.logits.data());
            all_labels.extend(labels);
        }
        state.epoch += 1;
        let logits = Tensor::new(vec![all_labels.len(), dataset.num_classes()], all_logits)?;
        let train_report = compute_metrics(&logits, &all_labels)?;
        let mask_mean = m_sum / m_count;
        history.push(super::HistoryRow {
            epoch,
            split: Split::Train,
            loss: ce_sum / all_labels.len() as f64,
            accuracy: train_report.accuracy,
            macro_f1: train_report.macro_f1,
            lr_classifier: lr_c,
            lr_policy: lr_p,
            mask_mean,
            mask_std: (m_sq / m_count - mask_mean * mask_mean).max(0.0).sqrt(),
        });
        let (report, val_loss) = eval_split(&state.classifier, dataset, &val)?;
        validation.push(HistoryRow {
            epoch,
            split: Split::Val,
            loss: val_loss,
            accuracy: report.accuracy,
            macro_f1: report.macro_f1,
            lr_classifier: lr_c,
            lr_policy: lr_p,
            mask_mean: 1.0,
            mask_std: 0.0,
        });
        info!(
            "epoch {epoch}: train loss {:.4} acc {:.3} | val loss {val_loss:.4} acc {:.3} f1 {:.3}",
            ce_sum / all_labels.len() as f64,
            train_report.accuracy,
            report.accuracy,
            report.macro_f1
        );
        if report.macro_f1 > best_f1 {
            best_f1 = report.macro_f1;
            best = state.to_checkpoint();
        }
        if cfg.patience > 0 {
            if report.accuracy > best_acc {
                best_acc = report.accuracy;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    info!("early stop after epoch {epoch}: no validation accuracy gain for {stale} epochs");
                    break;
                }
            }
        }
    }
    Ok(RunOutcome {
        state,
        best,
        best_val_macro_f1: best_f1,
        history,
        validation,
    })
}

/// Fresh pretraining state. The classifier is seeded from the run's
/// `Init` stream, so a baseline with the same seed starts from the same weights.
pub fn init_pretrain_state(
    classifier: ClassifierSpec,
    policy: PolicySpec,
    tau_i: f64,
    tau_d: f64,
    seed: u64,
) -> Result<TrainState> {
    let ema = EmaState::new(policy.noise_h, policy.noise_w, tau_i, tau_d)?;
    let c = ClassifierNet::init(classifier, Rng::child_seed(seed, Stream::Init as u64))?;
    let p = PolicyNet::init(policy, Rng::child_seed(seed, Stream::PolicyInit as u64))?;
    Ok(TrainState::new(c, Some(p), Some(ema), seed))
}

/// Masked pretraining; `outcome.state` is the heated model.
pub fn run_pretraining(dataset: &Dataset, state: TrainState, cfg: &TrainConfig, mask_cfg: &MaskConfig) -> Result<RunOutcome> {
    if cfg.mask_source == MaskSource::Policy {
        let p = state
            .policy
            .as_ref()
            .ok_or_else(|| Error::Config("mask source `policy` needs a policy network".into()))?;
        if (p.spec().noise_h, p.spec().noise_w) != (mask_cfg.noise_h, mask_cfg.noise_w) {
            return Err(Error::Config(format!(
                "policy emits {}x{} maps but mask.noise is {}x{}",
                p.spec().noise_h,
                p.spec().noise_w,
                mask_cfg.noise_h,
                mask_cfg.noise_w
            )));
        }
    }
    run_epochs(dataset, state, cfg, mask_cfg)
}

fn supervised(classifier: ClassifierNet, dataset: &Dataset, cfg: &TrainConfig) -> Result<RunOutcome> {
    let cfg = TrainConfig {
        mask_source: MaskSource::None,
        combined_loss: false,
        force_ones_mask: false,
        ..cfg.clone()
    };
    let state = TrainState::new(classifier, None, None, cfg.seed);
    run_epochs(dataset, state, &cfg, &MaskConfig::default())
}

/// Plain supervised training from the checkpoint's classifier; the policy,
/// EMA state and momentum buffers are dropped.
pub fn finetune(init: &Checkpoint, dataset: &Dataset, cfg: &TrainConfig) -> Result<RunOutcome> {
    supervised(init.classifier.clone(), dataset, cfg)
}

/// The fine-tuning loop from a random classifier seeded like pretraining.
pub fn train_baseline(spec: ClassifierSpec, dataset: &Dataset, cfg: &TrainConfig) -> Result<RunOutcome> {
    let net = ClassifierNet::init(spec, Rng::child_seed(cfg.seed, Stream::Init as u64))?;
    supervised(net, dataset, cfg)
}

/// Full-resolution policy masks for preprocessed images `x`, with the EMA
/// state read but not updated.
pub fn sample_policy_masks(
    policy: &PolicyNet,
    ema: &EmaState,
    mask_cfg: &MaskConfig,
    x: &Tensor,
    rng: &mut Rng,
) -> Result<Vec<Tensor>> {
    let g = Graph::new();
    let vars = policy.bind(&g, false);
    let input = g.constant(x.clone());
    let (a, b) = policy.forward(&g, &vars, input)?;
    let mut frozen = ema.clone();
    let blended = blend_params(&g, a, b, &mut frozen, false)?;
    let params = BetaParams::new(g.value(blended.alpha), g.value(blended.beta))?;
    let raw = beta_sample(&params, rng);
    let (h, w) = (x.shape()[2], x.shape()[3]);
    (0..x.shape()[0])
        .map(|i| make_full_mask(&raw.index0(i)?, h, w, mask_cfg))
        .collect()
}

/// Intensity histograms of `indices` (raw `[0,1]` pixels) under masks from
/// `source`. Policy masks need the checkpoint's policy and EMA state, which
/// stays frozen; they are computed from the normalised images.
pub fn mask_histograms(
    init: &Checkpoint,
    dataset: &Dataset,
    indices: &[usize],
    mask_cfg: &MaskConfig,
    source: MaskSource,
    seed: u64,
) -> Result<HistogramReport> {
    let mut rng = Rng::stream(seed, Stream::Masks);
    let (h, w) = (dataset.height(), dataset.width());
    let mut masks = Vec::with_capacity(indices.len());
    match source {
        MaskSource::Policy => {
            let (policy, ema) = match (&init.policy, &init.ema) {
                (Some(p), Some(e)) => (p, e),
                _ => return Err(Error::Config("mask source `policy` needs a checkpoint with policy and EMA state".into())),
            };
            let aug = dataset.eval_augment();
            for chunk in indices.chunks(FEATURE_BATCH) {
                let x = dataset.batch(chunk, &aug, &mut rng);
                masks.extend(sample_policy_masks(policy, ema, mask_cfg, &x, &mut rng)?);
            }
        }
        MaskSource::Fixed(kind) => {
            for _ in indices {
                masks.push(if kind.post_processed() {
                    let raw = fixed_noise_mask(kind, mask_cfg.noise_h, mask_cfg.noise_w, &mut rng);
                    make_full_mask(&raw, h, w, mask_cfg)?
                } else {
                    fixed_noise_mask(kind, h, w, &mut rng)
                });
            }
        }
        MaskSource::None => masks.resize(indices.len(), Tensor::ones(&[h, w])),
    }
    let images: Vec<Tensor> = indices.iter().map(|&i| dataset.image(i)).collect();
    let modalities: Vec<u8> = indices.iter().map(|&i| dataset.modality(i)).collect();
    histogram_report(&images, &masks, &modalities)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{stratified_split, synth_generate, SynthSpec};

    fn dataset() -> Dataset {
        let mut ds = synth_generate(&SynthSpec::new(2, 2, 12, 1)).unwrap();
        let s = stratified_split(ds.labels(), ds.num_classes(), (0.6, 0.2, 0.2), 1).unwrap();
        ds.set_splits(s).unwrap();
        let (m, sd) = ds.channel_stats(&ds.indices(Split::Train));
        ds.set_norm(m, sd).unwrap();
        ds
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let ds = dataset();
        let state = init_pretrain_state(ClassifierSpec::small(1, 28, 28, 4), PolicySpec::small(1, 28, 28, 8, 8), 0.9, 0.99, 3)
            .unwrap();
        let out = run_pretraining(&ds, state.clone(), &cfg(0), &MaskConfig::default()).unwrap();
        assert_eq!(out.state, state);
        assert!(out.history.is_empty());
    }

    #[test]
    fn history_has_one_row_per_epoch() {
        let ds = dataset();
        let state = init_pretrain_state(ClassifierSpec::small(1, 28, 28, 4), PolicySpec::small(1, 28, 28, 8, 8), 0.9, 0.99, 3)
            .unwrap();
        let out = run_pretraining(&ds, state, &cfg(2), &MaskConfig::default()).unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.validation.len(), 2);
        let csv = history_csv(&out.history);
        assert_eq!(csv.lines().next(), Some(HISTORY_CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
        assert!(out.history.iter().all(|r| r.mask_mean > 0.0 && r.mask_mean < 1.0));
    }

    #[test]
    fn finetune_with_zero_lr_keeps_weights_and_checks_classes() {
        let ds = dataset();
        let net = ClassifierNet::init(ClassifierSpec::small(1, 28, 28, 4), 8).unwrap();
        let ck = Checkpoint::classifier_only(net.clone());
        let zero = TrainConfig {
            lr_classifier: 0.0,
            ..cfg(1)
        };
        assert_eq!(finetune(&ck, &ds, &zero).unwrap().state.classifier, net);
        let wrong = Checkpoint::classifier_only(ClassifierNet::init(ClassifierSpec::small(1, 28, 28, 5), 8).unwrap());
        assert!(matches!(finetune(&wrong, &ds, &zero), Err(Error::Config(_))));
    }

    #[test]
    fn baseline_equals_finetune_from_the_same_init() {
        let ds = dataset();
        let spec = ClassifierSpec::small(1, 28, 28, 4);
        let c = cfg(1);
        let init = ClassifierNet::init(spec.clone(), Rng::child_seed(c.seed, Stream::Init as u64)).unwrap();
        let a = train_baseline(spec, &ds, &c).unwrap();
        let b = finetune(&Checkpoint::classifier_only(init), &ds, &c).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.history, b.history);
    }
}
