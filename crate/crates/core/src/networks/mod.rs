//! Classifier backbone, lightweight mask policy, and the EMA parameter state.
//!
//! Both networks share one small-CNN topology: `3×3` conv blocks (zero pad 1,
//! bias, ReLU) followed by global average pooling. The classifier adds a
//! linear head over classes; the policy adds two linear heads `b1`, `b2`
//! that emit the pre-exponential Beta maps `α′`, `β′`. No normalisation
//! layers are used.

mod checkpoint;
mod ema;

pub use checkpoint::{Checkpoint, OptimizerState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use ema::{blend_params, BlendedParams, EmaState};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

pub const CONV_KERNEL: usize = 3;
pub const CONV_PAD: usize = 1;

/// Convolutional trunk: one `(channels, stride)` pair per block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub blocks: Vec<(usize, usize)>,
}

impl BackboneSpec {
    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.image_h == 0 || self.image_w == 0 {
            return Err(Error::Config("backbone input extents must be positive".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("backbone needs at least one conv block".into()));
        }
        if let Some(&(c, s)) = self.blocks.iter().find(|&&(c, s)| c == 0 || s == 0) {
            return Err(Error::Config(format!("invalid conv block (channels {c}, stride {s})")));
        }
        Ok(())
    }

    /// Width of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.0)
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut c_in = self.in_channels;
        for &(c_out, _) in &self.blocks {
            shapes.push(vec![c_out, c_in, CONV_KERNEL, CONV_KERNEL]);
            shapes.push(vec![c_out]);
            c_in = c_out;
        }
        shapes
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            &[n, c, h, w] if n > 0 && c == self.in_channels && h == self.image_h && w == self.image_w => Ok(()),
            s => Err(Error::Shape(format!(
                "network expects [N≥1,{},{},{}] input, got {s:?}",
                self.in_channels, self.image_h, self.image_w
            ))),
        }
    }

    /// Conv blocks then global average pooling; `params` holds `(weight, bias)` pairs.
    fn forward(&self, g: &Graph, params: &[Var], x: Var) -> Result<Var> {
        self.check_input(&g.shape(x))?;
        let mut h = x;
        for (i, &(_, stride)) in self.blocks.iter().enumerate() {
            let z = g.conv2d(h, params[2 * i], stride, CONV_PAD)?;
            let z = g.add_bias(z, params[2 * i + 1], 1)?;
            h = g.relu(z);
        }
        g.mean(h, &[2, 3])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifierSpec {
    pub backbone: BackboneSpec,
    pub num_classes: usize,
}

impl ClassifierSpec {
    /// Three conv blocks (8, 16, 32 channels; strides 1, 2, 2) for 28×28 inputs.
    pub fn small(in_channels: usize, image_h: usize, image_w: usize, num_classes: usize) -> Self {
        ClassifierSpec {
            backbone: BackboneSpec {
                in_channels,
                image_h,
                image_w,
                blocks: vec![(8, 1), (16, 2), (32, 2)],
            },
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = self.backbone.param_shapes();
        let d = self.backbone.feature_dim();
        shapes.push(vec![d, self.num_classes]);
        shapes.push(vec![self.num_classes]);
        shapes
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicySpec {
    pub backbone: BackboneSpec,
    pub noise_h: usize,
    pub noise_w: usize,
    /// Start both projection heads at zero, i.e. `α′ = β′ = 0` for every image.
    pub zero_head: bool,
}

impl PolicySpec {
    /// Two strided conv blocks (4, 8 channels).
    pub fn small(in_channels: usize, image_h: usize, image_w: usize, noise_h: usize, noise_w: usize) -> Self {
        PolicySpec {
            backbone: BackboneSpec {
                in_channels,
                image_h,
                image_w,
                blocks: vec![(4, 2), (8, 2)],
            },
            noise_h,
            noise_w,
            zero_head: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.noise_h == 0 || self.noise_w == 0 {
            return Err(Error::Config("noise matrix extents must be positive".into()));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = self.backbone.param_shapes();
        let d = self.backbone.feature_dim();
        let cells = self.noise_h * self.noise_w;
        for _ in 0..2 {
            shapes.push(vec![d, cells]);
            shapes.push(vec![cells]);
        }
        shapes
    }
}

/// Kaiming-uniform (fan-in, ReLU gain) weights, zero biases.
fn kaiming_init(shapes: &[Vec<usize>], rng: &mut Rng) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|shape| {
            if shape.len() == 1 {
                return Tensor::zeros(shape);
            }
            let fan_in: usize = match shape.len() {
                4 => shape[1] * shape[2] * shape[3],
                _ => shape[0],
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| (2.0 * rng.uniform() - 1.0) * bound).collect();
            Tensor::new(shape.clone(), data).expect("numel matches shape")
        })
        .collect()
}

fn check_params(shapes: &[Vec<usize>], params: &[Tensor]) -> Result<()> {
    if shapes.len() != params.len() {
        return Err(Error::Shape(format!("expected {} parameter tensors, got {}", shapes.len(), params.len())));
    }
    for (i, (s, p)) in shapes.iter().zip(params).enumerate() {
        if s.as_slice() != p.shape() {
            return Err(Error::Shape(format!("parameter {i}: expected {s:?}, got {:?}", p.shape())));
        }
    }
    Ok(())
}

fn bind(g: &Graph, params: &[Tensor], trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
        .collect()
}

fn linear(g: &Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b, 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierNet {
    spec: ClassifierSpec,
    params: Vec<Tensor>,
    param_count: usize,
}

impl ClassifierNet {
    pub fn init(spec: ClassifierSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = kaiming_init(&spec.param_shapes(), &mut Rng::new(seed));
        Self::from_params(spec, params)
    }

    pub fn from_params(spec: ClassifierSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        check_params(&spec.param_shapes(), &params)?;
        let param_count = params.iter().map(Tensor::numel).sum();
        Ok(ClassifierNet {
            spec,
            params,
            param_count,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Replace parameters with same-shaped tensors.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        check_params(&self.spec.param_shapes(), &params)?;
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.backbone.feature_dim()
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> Vec<Var> {
        bind(g, &self.params, trainable)
    }

    /// Pooled penultimate activations `[N, D]`.
    pub fn features(&self, g: &Graph, vars: &[Var], x: Var) -> Result<Var> {
        let n_trunk = 2 * self.spec.backbone.blocks.len();
        self.spec.backbone.forward(g, &vars[..n_trunk], x)
    }

    /// Logits `[N, num_classes]`.
    pub fn forward(&self, g: &Graph, vars: &[Var], x: Var) -> Result<Var> {
        let f = self.features(g, vars, x)?;
        let k = vars.len();
        linear(g, f, vars[k - 2], vars[k - 1])
    }

    /// Gradient-free logits for a batch.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let vars = self.bind(&g, false);
        let x = g.constant(batch.clone());
        let y = self.forward(&g, &vars, x)?;
        Ok(g.value(y))
    }

    /// Gradient-free pooled features for a batch.
    pub fn extract(&self, batch: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let vars = self.bind(&g, false);
        let x = g.constant(batch.clone());
        let y = self.features(&g, &vars, x)?;
        Ok(g.value(y))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    spec: PolicySpec,
    params: Vec<Tensor>,
    param_count: usize,
}

impl PolicyNet {
    pub fn init(spec: PolicySpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = kaiming_init(&spec.param_shapes(), &mut Rng::new(seed));
        if spec.zero_head {
            let n = params.len();
            for p in &mut params[n - 4..] {
                p.data_mut().fill(0.0);
            }
        }
        Self::from_params(spec, params)
    }

    pub fn from_params(spec: PolicySpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        check_params(&spec.param_shapes(), &params)?;
        let param_count = params.iter().map(Tensor::numel).sum();
        Ok(PolicyNet {
            spec,
            params,
            param_count,
        })
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        check_params(&self.spec.param_shapes(), &params)?;
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> Vec<Var> {
        bind(g, &self.params, trainable)
    }

    /// Pre-exponential parameter maps `(α′, β′)`, each `[N, noise_h, noise_w]`.
    pub fn forward(&self, g: &Graph, vars: &[Var], x: Var) -> Result<(Var, Var)> {
        let n_trunk = 2 * self.spec.backbone.blocks.len();
        let f = self.spec.backbone.forward(g, &vars[..n_trunk], x)?;
        let n = g.shape(x)[0];
        let map_shape = [n, self.spec.noise_h, self.spec.noise_w];
        let a = linear(g, f, vars[n_trunk], vars[n_trunk + 1])?;
        let b = linear(g, f, vars[n_trunk + 2], vars[n_trunk + 3])?;
        Ok((g.reshape(a, &map_shape)?, g.reshape(b, &map_shape)?))
    }
}
