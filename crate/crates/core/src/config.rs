//! Plain-text `key=value` run configuration.
//!
//! Keys are `section.name` with sections `data`, `model`, `mask`, `train`
//! and `eval`. Every key has a default in [`KEYS`]; unknown keys are errors.
//! Lines starting with `#` and blank lines are ignored, so a written
//! manifest can be read back as a config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::evaluation::{LowShotConfig, ProbeConfig};
use crate::mask::{MaskConfig, UpsampleMode};
use crate::networks::{BackboneSpec, ClassifierSpec, PolicySpec};
use crate::rng::{Rng, Stream};
use crate::training::{MaskSource, Reduction, Schedule, TrainConfig};

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn k(key: &'static str, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec { key, default, doc }
}

pub const SECTIONS: [&str; 5] = ["data", "model", "mask", "train", "eval"];

pub const KEYS: &[KeySpec] = &[
    k("data.bundle", "data.nmds", "dataset bundle path read by training and evaluation commands"),
    k("data.modalities", "3", "synthetic modalities"),
    k("data.classes_per_modality", "4", "synthetic classes per modality (at most 6)"),
    k("data.samples_per_class", "60", "synthetic samples per class"),
    k("data.image_size", "28", "synthetic image height and width"),
    k("data.split_train", "0.7", "train fraction of each class"),
    k("data.split_val", "0.15", "validation fraction of each class"),
    k("data.split_test", "0.15", "test fraction of each class"),
    k("data.split_seed", "0", "seed of the stratified split, fixed per dataset"),
    k("data.raw_images", "images.u8", "import-raw: flat u8 pixel file"),
    k("data.raw_labels", "labels.csv", "import-raw: label CSV with a `label` column"),
    k("data.raw_channels", "1", "import-raw: channels per image"),
    k("data.raw_height", "28", "import-raw: image height"),
    k("data.raw_width", "28", "import-raw: image width"),
    k("data.raw_classes", "12", "import-raw: number of classes"),
    k("model.classifier_blocks", "8:1,16:2,32:2", "classifier conv blocks as channels:stride"),
    k("model.policy_blocks", "4:2,8:2", "policy conv blocks as channels:stride"),
    k("model.policy_zero_head", "true", "zero-initialise the policy heads (uniform masks at start)"),
    k("mask.source", "policy", "mask source: policy|gaussian|uniform|pure|none"),
    k("mask.noise_h", "8", "noise matrix rows"),
    k("mask.noise_w", "8", "noise matrix columns"),
    k("mask.upsample", "nearest", "upsampling: nearest|bilinear"),
    k("mask.blur", "true", "apply the Gaussian blur"),
    k("mask.blur_kernel", "13", "blur kernel size (odd)"),
    k("mask.blur_sigma", "6", "blur standard deviation in pixels"),
    k("mask.tau_image", "0.9", "image EMA coefficient"),
    k("mask.tau_dataset", "0.99", "dataset EMA coefficient"),
    k("train.seed", "0", "root seed for every random stream of the run"),
    k("train.epochs", "15", "pretraining epochs"),
    k("train.finetune_epochs", "10", "fine-tuning and baseline epochs"),
    k("train.batch_size", "64", "minibatch size"),
    k("train.lr_classifier", "0.05", "classifier base learning rate"),
    k("train.lr_policy", "0.01", "policy base learning rate"),
    k("train.momentum", "0.9", "SGD momentum"),
    k("train.weight_decay", "1e-4", "SGD weight decay"),
    k("train.schedule_classifier", "step", "classifier schedule: step|cosine|constant"),
    k("train.schedule_policy", "cosine", "policy schedule: step|cosine|constant"),
    k("train.step_period", "5", "epochs per step decay"),
    k("train.step_factor", "0.1", "step decay factor"),
    k("train.reduction", "logsumexp", "policy loss reduction: logsumexp|sum"),
    k("train.divergence_guard", "1000", "loss ceiling that aborts a run"),
    k("train.patience", "0", "early stopping patience on validation accuracy (0 = off)"),
    k("train.combined_loss", "false", "weight the classifier loss by the detached log-prob term"),
    k("train.force_ones_mask", "false", "debug: replace sampled masks by ones"),
    k("train.flip_prob", "0.5", "horizontal flip probability"),
    k("train.crop_pad", "2", "random-crop zero padding"),
    k("eval.split", "val", "split scored by evaluate: train|val|test"),
    k("eval.probe_hidden", "256", "MLP probe hidden width"),
    k("eval.probe_lr", "1e-3", "MLP probe learning rate"),
    k("eval.probe_weight_decay", "1e-2", "MLP probe decoupled weight decay"),
    k("eval.probe_batch_size", "64", "MLP probe minibatch size"),
    k("eval.probe_patience", "5", "MLP probe patience in epochs"),
    k("eval.probe_max_epochs", "200", "MLP probe epoch cap"),
    k("eval.probe_trials", "auto", "MLP probe trials, or auto (7/3/1 by train size)"),
    k("eval.lowshot_shots", "8,16,32,64,128,256", "low-shot samples per class"),
    k("eval.lowshot_trials", "10", "low-shot trials per shot"),
    k("eval.lowshot_l2", "1.0", "logistic regression L2 strength"),
    k("eval.lowshot_tol", "1e-6", "logistic regression gradient tolerance"),
    k("eval.lowshot_max_iter", "1000", "logistic regression iteration cap"),
    k("eval.histogram_images", "0", "validation images in the histogram report (0 = all)"),
    k("eval.gradcheck_seeds", "20", "seeds per finite-difference case"),
];

fn spec_of(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|s| s.key == key)
}

/// Table of every key with its default, for help output.
pub fn key_table() -> String {
    let width = KEYS.iter().map(|s| s.key.len() + s.default.len() + 1).max().unwrap_or(0);
    let mut out = String::new();
    for s in KEYS {
        let kv = format!("{}={}", s.key, s.default);
        let _ = writeln!(out, "  {kv:<width$}  {}", s.doc);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|s| (s.key, s.default.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = spec_of(key).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        self.values.insert(spec.key, value.trim().to_string());
        Ok(())
    }

    /// `KEY=VALUE` as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{pair}`")))?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))
    }

    /// Overlay `text` onto the defaults. `origin` names the source in errors.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value", no + 1)))?;
            let k = k.trim();
            if let Some(prev) = seen.insert(k.to_string(), no + 1) {
                return Err(Error::Config(format!(
                    "{origin}:{}: key `{k}` already set on line {prev}",
                    no + 1
                )));
            }
            cfg.set(k, v)
                .map_err(|_| Error::Config(format!("{origin}:{}: unknown key `{k}`", no + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Every key, resolved, one per line, behind `#` header lines.
    pub fn manifest(&self, header: &[(&str, String)]) -> String {
        let mut s = String::new();
        for (k, v) in header {
            let _ = writeln!(s, "# {k}={v}");
        }
        for section in SECTIONS {
            for (k, v) in self.values.iter().filter(|(k, _)| k.split('.').next() == Some(section)) {
                let _ = writeln!(s, "{k}={v}");
            }
        }
        s
    }

    /// Build every typed view once so that bad values fail before any work.
    pub fn validate(&self) -> Result<()> {
        self.synth_spec()?.validate()?;
        self.split_fractions()?;
        self.classifier_blocks()?;
        self.policy_spec(1, 28, 28)?;
        self.mask_config()?;
        self.ema_taus()?;
        self.pretrain_config()?.validate()?;
        self.finetune_config()?.validate()?;
        self.probe_config()?;
        self.lowshot_config()?;
        self.value::<crate::data::Split>("eval.split")?;
        self.value::<usize>("eval.histogram_images")?;
        self.value::<usize>("eval.gradcheck_seeds")?;
        self.raw_extents()?;
        Ok(())
    }

    pub fn value<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`")))
    }

    fn parse_bool(&self, key: &str) -> Result<bool> {
        match self.get(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(Error::Config(format!("key `{key}`: expected true|false, got `{v}`"))),
        }
    }

    fn parse_list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.get(key)?;
        v.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("key `{key}`: bad list entry `{p}`")))
            })
            .collect()
    }

    fn parse_blocks(&self, key: &str) -> Result<Vec<(usize, usize)>> {
        let v = self.get(key)?;
        v.split(',')
            .map(|p| {
                let bad = || Error::Config(format!("key `{key}`: expected channels:stride, got `{p}`"));
                let (c, s) = p.trim().split_once(':').ok_or_else(bad)?;
                Ok((c.parse().map_err(|_| bad())?, s.parse().map_err(|_| bad())?))
            })
            .collect()
    }

    fn parse_schedule(&self, key: &str) -> Result<Schedule> {
        match self.get(key)? {
            "step" => Ok(Schedule::Step {
                period: self.value("train.step_period")?,
                factor: self.value("train.step_factor")?,
            }),
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            v => Err(Error::Config(format!("key `{key}`: expected step|cosine|constant, got `{v}`"))),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.value("train.seed")
    }

    /// Generator seed, derived from the root seed.
    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let mut spec = SynthSpec::new(
            self.value("data.modalities")?,
            self.value("data.classes_per_modality")?,
            self.value("data.samples_per_class")?,
            Rng::child_seed(self.seed()?, Stream::Data as u64),
        );
        let size: usize = self.value("data.image_size")?;
        spec.image_h = size;
        spec.image_w = size;
        Ok(spec)
    }

    pub fn split_fractions(&self) -> Result<(f64, f64, f64)> {
        let f = (
            self.value::<f64>("data.split_train")?,
            self.value::<f64>("data.split_val")?,
            self.value::<f64>("data.split_test")?,
        );
        let sum = f.0 + f.1 + f.2;
        if [f.0, f.1, f.2].iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "keys `data.split_*` must be fractions summing to 1, got {f:?}"
            )));
        }
        Ok(f)
    }

    pub fn split_seed(&self) -> Result<u64> {
        self.value("data.split_seed")
    }

    pub fn raw_extents(&self) -> Result<((usize, usize, usize), usize)> {
        Ok((
            (
                self.value("data.raw_channels")?,
                self.value("data.raw_height")?,
                self.value("data.raw_width")?,
            ),
            self.value("data.raw_classes")?,
        ))
    }

    pub fn classifier_blocks(&self) -> Result<Vec<(usize, usize)>> {
        self.parse_blocks("model.classifier_blocks")
    }

    pub fn classifier_spec(&self, in_channels: usize, h: usize, w: usize, num_classes: usize) -> Result<ClassifierSpec> {
        let spec = ClassifierSpec {
            backbone: BackboneSpec {
                in_channels,
                image_h: h,
                image_w: w,
                blocks: self.classifier_blocks()?,
            },
            num_classes,
        };
        spec.validate().map_err(|e| Error::Config(format!("key `model.classifier_blocks`: {e}")))?;
        Ok(spec)
    }

    pub fn policy_spec(&self, in_channels: usize, h: usize, w: usize) -> Result<PolicySpec> {
        let spec = PolicySpec {
            backbone: BackboneSpec {
                in_channels,
                image_h: h,
                image_w: w,
                blocks: self.parse_blocks("model.policy_blocks")?,
            },
            noise_h: self.value("mask.noise_h")?,
            noise_w: self.value("mask.noise_w")?,
            zero_head: self.parse_bool("model.policy_zero_head")?,
        };
        spec.validate().map_err(|e| Error::Config(format!("key `model.policy_blocks`: {e}")))?;
        Ok(spec)
    }

    pub fn mask_config(&self) -> Result<MaskConfig> {
        Ok(MaskConfig {
            noise_h: self.value("mask.noise_h")?,
            noise_w: self.value("mask.noise_w")?,
            upsample: self.value::<UpsampleMode>("mask.upsample")?,
            blur_kernel: self.value("mask.blur_kernel")?,
            blur_sigma: self.value("mask.blur_sigma")?,
            blur_enabled: self.parse_bool("mask.blur")?,
        })
    }

    pub fn mask_source(&self) -> Result<MaskSource> {
        self.value("mask.source")
    }

    pub fn ema_taus(&self) -> Result<(f64, f64)> {
        Ok((self.value("mask.tau_image")?, self.value("mask.tau_dataset")?))
    }

    fn train_config(&self, epochs_key: &str) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.value(epochs_key)?,
            batch_size: self.value("train.batch_size")?,
            lr_classifier: self.value("train.lr_classifier")?,
            lr_policy: self.value("train.lr_policy")?,
            momentum: self.value("train.momentum")?,
            weight_decay: self.value("train.weight_decay")?,
            schedule_classifier: self.parse_schedule("train.schedule_classifier")?,
            schedule_policy: self.parse_schedule("train.schedule_policy")?,
            reduction: self.value::<Reduction>("train.reduction")?,
            seed: self.seed()?,
            divergence_guard: self.value("train.divergence_guard")?,
            patience: self.value("train.patience")?,
            combined_loss: self.parse_bool("train.combined_loss")?,
            force_ones_mask: self.parse_bool("train.force_ones_mask")?,
            mask_source: self.mask_source()?,
            flip_prob: self.value("train.flip_prob")?,
            crop_pad: self.value("train.crop_pad")?,
        })
    }

    pub fn pretrain_config(&self) -> Result<TrainConfig> {
        self.train_config("train.epochs")
    }

    /// Same optimiser settings, fine-tuning epoch count, no masks.
    pub fn finetune_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            mask_source: MaskSource::None,
            ..self.train_config("train.finetune_epochs")?
        })
    }

    pub fn probe_config(&self) -> Result<ProbeConfig> {
        let trials = match self.get("eval.probe_trials")? {
            "auto" => None,
            _ => Some(self.value("eval.probe_trials")?),
        };
        Ok(ProbeConfig {
            hidden: self.value("eval.probe_hidden")?,
            lr: self.value("eval.probe_lr")?,
            weight_decay: self.value("eval.probe_weight_decay")?,
            batch_size: self.value("eval.probe_batch_size")?,
            patience: self.value("eval.probe_patience")?,
            max_epochs: self.value("eval.probe_max_epochs")?,
            trials,
            ..ProbeConfig::default()
        })
    }

    pub fn lowshot_config(&self) -> Result<LowShotConfig> {
        Ok(LowShotConfig {
            shots: self.parse_list("eval.lowshot_shots")?,
            trials: self.value("eval.lowshot_trials")?,
            l2: self.value("eval.lowshot_l2")?,
            tol: self.value("eval.lowshot_tol")?,
            max_iter: self.value("eval.lowshot_max_iter")?,
            force_identical: false,
        })
    }

    /// Seed for probe and low-shot trials.
    pub fn trials_seed(&self) -> Result<u64> {
        Ok(Rng::child_seed(self.seed()?, Stream::Trials as u64))
    }
}
