use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Dataset-level Beta parameter maps and the two EMA coefficients.
///
/// All maps live in pre-exponential (log) space; exponentiation happens only
/// after blending, so the blended parameters are positive by construction.
/// The dataset maps start at zero, i.e. `Beta(1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    alpha: Tensor,
    beta: Tensor,
    tau_i: f64,
    tau_d: f64,
}

/// Output of [`blend_params`]: blended log-space maps and their exponentials.
#[derive(Clone, Copy, Debug)]
pub struct BlendedParams {
    pub alpha_log: Var,
    pub beta_log: Var,
    pub alpha: Var,
    pub beta: Var,
}

fn check_tau(name: &str, tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie strictly inside (0,1), got {tau}")))
    }
}

impl EmaState {
    pub fn new(noise_h: usize, noise_w: usize, tau_i: f64, tau_d: f64) -> Result<Self> {
        Self::from_parts(Tensor::zeros(&[noise_h, noise_w]), Tensor::zeros(&[noise_h, noise_w]), tau_i, tau_d)
    }

    pub fn from_parts(alpha: Tensor, beta: Tensor, tau_i: f64, tau_d: f64) -> Result<Self> {
        check_tau("tau_i", tau_i)?;
        check_tau("tau_d", tau_d)?;
        if alpha.rank() != 2 || alpha.shape() != beta.shape() {
            return Err(Error::Shape(format!(
                "dataset maps must be equal 2-D shapes, got {:?} and {:?}",
                alpha.shape(),
                beta.shape()
            )));
        }
        Ok(EmaState {
            alpha,
            beta,
            tau_i,
            tau_d,
        })
    }

    pub fn alpha(&self) -> &Tensor {
        &self.alpha
    }

    pub fn beta(&self) -> &Tensor {
        &self.beta
    }

    pub fn tau_i(&self) -> f64 {
        self.tau_i
    }

    pub fn tau_d(&self) -> f64 {
        self.tau_d
    }

    pub fn map_shape(&self) -> &[usize] {
        self.alpha.shape()
    }

    /// `τ_i · dataset + (1 − τ_i) · image` for one `[h, w]` map, evaluated as
    /// `dataset + (1 − τ_i)(image − dataset)` so equal maps are a bitwise fixed point.
    pub fn blend_value(&self, dataset: &Tensor, image: &Tensor) -> Result<Tensor> {
        if image.shape() != dataset.shape() {
            return Err(Error::Shape(format!(
                "image map {:?} vs dataset map {:?}",
                image.shape(),
                dataset.shape()
            )));
        }
        let data = dataset
            .data()
            .iter()
            .zip(image.data())
            .map(|(&d, &i)| d + (1.0 - self.tau_i) * (i - d))
            .collect();
        Tensor::new(image.shape().to_vec(), data)
    }

    /// `dataset ← τ_d · dataset + (1 − τ_d) · batch_mean`.
    pub fn update(&mut self, mean_alpha: &Tensor, mean_beta: &Tensor) -> Result<()> {
        if mean_alpha.shape() != self.alpha.shape() || mean_beta.shape() != self.beta.shape() {
            return Err(Error::Shape("batch-mean maps do not match dataset maps".into()));
        }
        let tau = self.tau_d;
        for (d, &m) in self.alpha.data_mut().iter_mut().zip(mean_alpha.data()) {
            *d += (1.0 - tau) * (m - *d);
        }
        for (d, &m) in self.beta.data_mut().iter_mut().zip(mean_beta.data()) {
            *d += (1.0 - tau) * (m - *d);
        }
        Ok(())
    }
}

/// Blend per-image maps `[N, h, w]` with the dataset maps, optionally fold
/// the batch means into the dataset state, and exponentiate.
///
/// Blending uses the dataset maps from *before* this batch's update. The
/// gradient reaches the image maps with weight `1 − τ_i`; the dataset maps
/// are constants to the graph.
pub fn blend_params(g: &Graph, alpha_img: Var, beta_img: Var, state: &mut EmaState, update: bool) -> Result<BlendedParams> {
    let shape = g.shape(alpha_img);
    if shape != g.shape(beta_img) || shape.len() != 3 || shape[1..] != *state.map_shape() {
        return Err(Error::Shape(format!(
            "image maps {:?}/{:?} do not match dataset maps {:?}",
            shape,
            g.shape(beta_img),
            state.map_shape()
        )));
    }
    let n = shape[0];
    let w = 1.0 - state.tau_i;
    let blend = |img: Var, dataset: &Tensor| -> Result<Var> {
        let d = g.constant(Tensor::stack(&vec![dataset.clone(); n])?);
        g.add(d, g.scale(g.sub(img, d)?, w))
    };
    let alpha_log = blend(alpha_img, &state.alpha)?;
    let beta_log = blend(beta_img, &state.beta)?;
    if update {
        let mean_a = g.with_value(alpha_img, batch_mean)?;
        let mean_b = g.with_value(beta_img, batch_mean)?;
        state.update(&mean_a, &mean_b)?;
    }
    Ok(BlendedParams {
        alpha_log,
        beta_log,
        alpha: g.exp(alpha_log),
        beta: g.exp(beta_log),
    })
}

fn batch_mean(t: &Tensor) -> Result<Tensor> {
    let n = t.shape()[0];
    let inner = t.numel() / n;
    let mut acc = vec![0.0; inner];
    for row in t.data().chunks(inner) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    Tensor::new(t.shape()[1..].to_vec(), acc.into_iter().map(|v| v / n as f64).collect())
}
