//! `NMCK` checkpoint files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic          4 bytes  "NMCK"
//! version        u32      1
//! descriptor     u32 length + UTF-8 `key=value` lines (network specs, sections)
//! tensor count   u32
//! tensors        per tensor: u32 rank, u32 × rank dims, f64 × numel
//!                order: classifier params, policy params, classifier momentum,
//!                policy momentum (policy/momentum only when the sections say so)
//! ema flag       u8; if 1: u32 h, u32 w, f64 tau_i, f64 tau_d, f64 × h·w alpha, f64 × h·w beta
//! optimizer flag u8; if 1: u64 epoch, u64 rng seed, u64 rng state
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{BackboneSpec, ClassifierNet, ClassifierSpec, EmaState, PolicyNet, PolicySpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Momentum buffers and loop position for resuming training.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub classifier_momentum: Vec<Tensor>,
    pub policy_momentum: Vec<Tensor>,
    pub epoch: u64,
    pub rng_seed: u64,
    pub rng_state: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub classifier: ClassifierNet,
    pub policy: Option<PolicyNet>,
    pub ema: Option<EmaState>,
    pub optimizer: Option<OptimizerState>,
}

fn join(xs: impl IntoIterator<Item = usize>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn backbone_lines(prefix: &str, b: &BackboneSpec, out: &mut Vec<String>) {
    out.push(format!("{prefix}.in_channels={}", b.in_channels));
    out.push(format!("{prefix}.image_h={}", b.image_h));
    out.push(format!("{prefix}.image_w={}", b.image_w));
    out.push(format!("{prefix}.conv_channels={}", join(b.blocks.iter().map(|x| x.0))));
    out.push(format!("{prefix}.conv_strides={}", join(b.blocks.iter().map(|x| x.1))));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "size overflow"))?, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|x| x.trim().parse().ok()).collect()
}

fn backbone_from(map: &BTreeMap<String, String>, prefix: &str, path: &Path) -> Result<BackboneSpec> {
    let get = |k: &str| {
        map.get(&format!("{prefix}.{k}"))
            .ok_or_else(|| Error::format(path, format!("descriptor lacks {prefix}.{k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(path, format!("descriptor {prefix}.{k} is not an integer")))
    };
    let channels = parse_list(get("conv_channels")?).ok_or_else(|| Error::format(path, "bad conv_channels"))?;
    let strides = parse_list(get("conv_strides")?).ok_or_else(|| Error::format(path, "bad conv_strides"))?;
    if channels.len() != strides.len() {
        return Err(Error::format(path, "conv_channels and conv_strides differ in length"));
    }
    Ok(BackboneSpec {
        in_channels: num("in_channels")?,
        image_h: num("image_h")?,
        image_w: num("image_w")?,
        blocks: channels.into_iter().zip(strides).collect(),
    })
}

impl Checkpoint {
    pub fn classifier_only(classifier: ClassifierNet) -> Self {
        Checkpoint {
            classifier,
            policy: None,
            ema: None,
            optimizer: None,
        }
    }

    fn descriptor(&self) -> String {
        let mut lines = Vec::new();
        let c = self.classifier.spec();
        backbone_lines("classifier", &c.backbone, &mut lines);
        lines.push(format!("classifier.num_classes={}", c.num_classes));
        if let Some(p) = &self.policy {
            let s = p.spec();
            backbone_lines("policy", &s.backbone, &mut lines);
            lines.push(format!("policy.noise_h={}", s.noise_h));
            lines.push(format!("policy.noise_w={}", s.noise_w));
            lines.push(format!("policy.zero_head={}", s.zero_head));
        }
        let mut sections = vec!["classifier"];
        if self.policy.is_some() {
            sections.push("policy");
        }
        if self.optimizer.is_some() {
            sections.push("momentum");
        }
        lines.push(format!("sections={}", sections.join(",")));
        lines.join("\n")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let desc = self.descriptor();
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(desc.as_bytes());

        let mut tensors: Vec<&Tensor> = self.classifier.params().iter().collect();
        if let Some(p) = &self.policy {
            tensors.extend(p.params());
        }
        if let Some(o) = &self.optimizer {
            tensors.extend(&o.classifier_momentum);
            if self.policy.is_some() {
                tensors.extend(&o.policy_momentum);
            }
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.ema {
            Some(e) => {
                out.push(1);
                out.extend_from_slice(&(e.map_shape()[0] as u32).to_le_bytes());
                out.extend_from_slice(&(e.map_shape()[1] as u32).to_le_bytes());
                out.extend_from_slice(&e.tau_i().to_le_bytes());
                out.extend_from_slice(&e.tau_d().to_le_bytes());
                for v in e.alpha().data().iter().chain(e.beta().data()) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => out.push(0),
        }
        match &self.optimizer {
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.epoch.to_le_bytes());
                out.extend_from_slice(&o.rng_seed.to_le_bytes());
                out.extend_from_slice(&o.rng_state.to_le_bytes());
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad magic (expected NMCK)"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32("descriptor length")? as usize;
        let desc = std::str::from_utf8(r.take(len, "descriptor")?)
            .map_err(|_| Error::format(path, "descriptor is not UTF-8"))?;
        let map: BTreeMap<String, String> = desc
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let sections: Vec<&str> = map.get("sections").map(|s| s.split(',').collect()).unwrap_or_default();
        let has_policy = sections.contains(&"policy");
        let has_momentum = sections.contains(&"momentum");

        let num_classes = map
            .get("classifier.num_classes")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(path, "descriptor lacks classifier.num_classes"))?;
        let cspec = ClassifierSpec {
            backbone: backbone_from(&map, "classifier", path)?,
            num_classes,
        };
        let pspec = if has_policy {
            let get = |k: &str| {
                map.get(&format!("policy.{k}"))
                    .ok_or_else(|| Error::format(path, format!("descriptor lacks policy.{k}")))
            };
            Some(PolicySpec {
                backbone: backbone_from(&map, "policy", path)?,
                noise_h: get("noise_h")?.parse().map_err(|_| Error::format(path, "bad policy.noise_h"))?,
                noise_w: get("noise_w")?.parse().map_err(|_| Error::format(path, "bad policy.noise_w"))?,
                zero_head: get("zero_head")? == "true",
            })
        } else {
            None
        };

        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor dims")? as usize);
            }
            let numel = shape.iter().product();
            let data = r.f64s(numel, &format!("tensor {i}"))?;
            tensors.push(Tensor::new(shape, data)?);
        }

        let n_c = cspec.param_shapes().len();
        let n_p = pspec.as_ref().map_or(0, |s| s.param_shapes().len());
        let expected = (n_c + n_p) * if has_momentum { 2 } else { 1 };
        if count != expected {
            return Err(Error::format(path, format!("expected {expected} tensors, found {count}")));
        }
        let mut it = tensors.into_iter();
        let cparams: Vec<Tensor> = it.by_ref().take(n_c).collect();
        let pparams: Vec<Tensor> = it.by_ref().take(n_p).collect();
        let cmom: Vec<Tensor> = it.by_ref().take(if has_momentum { n_c } else { 0 }).collect();
        let pmom: Vec<Tensor> = it.collect();

        let classifier = ClassifierNet::from_params(cspec, cparams)
            .map_err(|e| Error::format(path, format!("classifier parameters: {e}")))?;
        let policy = match pspec {
            Some(s) => Some(
                PolicyNet::from_params(s, pparams).map_err(|e| Error::format(path, format!("policy parameters: {e}")))?,
            ),
            None => None,
        };

        let ema = if r.u8("ema flag")? == 1 {
            let h = r.u32("ema height")? as usize;
            let w = r.u32("ema width")? as usize;
            let tau_i = f64::from_le_bytes(r.take(8, "tau_i")?.try_into().expect("8 bytes"));
            let tau_d = f64::from_le_bytes(r.take(8, "tau_d")?.try_into().expect("8 bytes"));
            let a = Tensor::new(vec![h, w], r.f64s(h * w, "ema alpha")?)?;
            let b = Tensor::new(vec![h, w], r.f64s(h * w, "ema beta")?)?;
            Some(EmaState::from_parts(a, b, tau_i, tau_d).map_err(|e| Error::format(path, e.to_string()))?)
        } else {
            None
        };
        let optimizer = if r.u8("optimizer flag")? == 1 {
            Some(OptimizerState {
                classifier_momentum: cmom,
                policy_momentum: pmom,
                epoch: r.u64("epoch")?,
                rng_seed: r.u64("rng seed")?,
                rng_state: r.u64("rng state")?,
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            classifier,
            policy,
            ema,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_checkpoint() -> Checkpoint {
        let classifier = ClassifierNet::init(ClassifierSpec::small(1, 28, 28, 12), 1).unwrap();
        let mut pspec = PolicySpec::small(1, 28, 28, 8, 8);
        pspec.zero_head = false;
        let policy = PolicyNet::init(pspec, 2).unwrap();
        let mut ema = EmaState::new(8, 8, 0.9, 0.99).unwrap();
        ema.update(&Tensor::full(&[8, 8], 0.3), &Tensor::full(&[8, 8], -0.7)).unwrap();
        let optimizer = OptimizerState {
            classifier_momentum: classifier.params().iter().map(|p| p.map(|v| v * 0.5)).collect(),
            policy_momentum: policy.params().iter().map(|p| p.map(|v| -v)).collect(),
            epoch: 7,
            rng_seed: 99,
            rng_state: 12345,
        };
        Checkpoint {
            classifier,
            policy: Some(policy),
            ema: Some(ema),
            optimizer: Some(optimizer),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = full_checkpoint();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let plain = Checkpoint::classifier_only(ck.classifier.clone());
        assert_eq!(Checkpoint::from_bytes(&plain.to_bytes(), Path::new("mem")).unwrap(), plain);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = full_checkpoint().to_bytes();
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::Format { .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p),
            Err(Error::Format { .. })
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra, p), Err(Error::Format { .. })));
    }
}
