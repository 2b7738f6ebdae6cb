//! Probes on frozen features: a one-hidden-layer MLP and L2 logistic regression.

use log::warn;
use rayon::prelude::*;

use super::{compute_metrics, mean_ci95, MetricsReport};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};

pub const LOWSHOT_CSV_HEADER: &str = "shot,trials,mean_macro_f1,ci95_half_width,min,max";

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// `None` picks by train-set size, see [`default_trials`].
    pub trials: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 256,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            batch_size: 64,
            patience: 5,
            max_epochs: 200,
            trials: None,
        }
    }
}

/// 7 trials below 2 000 training rows, 3 below 20 000, otherwise 1.
pub fn default_trials(n_train: usize) -> usize {
    if n_train < 2_000 {
        7
    } else if n_train < 20_000 {
        3
    } else {
        1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub trials: Vec<MetricsReport>,
}

impl ProbeReport {
    /// Mean and 95% t half-width of a per-trial statistic.
    pub fn aggregate(&self, f: impl Fn(&MetricsReport) -> f64) -> (f64, Option<f64>) {
        mean_ci95(&self.trials.iter().map(f).collect::<Vec<_>>())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("trial,macro_precision,macro_recall,macro_f1,auroc,balanced_accuracy,accuracy\n");
        let auroc = |r: &MetricsReport| r.auroc_macro_ovr.unwrap_or(f64::NAN);
        for (t, r) in self.trials.iter().enumerate() {
            s.push_str(&format!(
                "{t},{},{},{},{},{},{}\n",
                r.macro_precision,
                r.macro_recall,
                r.macro_f1,
                auroc(r),
                r.balanced_accuracy,
                r.accuracy
            ));
        }
        let stats: Vec<(f64, Option<f64>)> = vec![
            self.aggregate(|r| r.macro_precision),
            self.aggregate(|r| r.macro_recall),
            self.aggregate(|r| r.macro_f1),
            self.aggregate(auroc),
            self.aggregate(|r| r.balanced_accuracy),
            self.aggregate(|r| r.accuracy),
        ];
        let mean: Vec<String> = stats.iter().map(|s| s.0.to_string()).collect();
        let ci: Vec<String> = stats
            .iter()
            .map(|s| s.1.map_or_else(|| "undefined".to_string(), |v| v.to_string()))
            .collect();
        s.push_str(&format!("mean,{}\n", mean.join(",")));
        s.push_str(&format!("ci95,{}\n", ci.join(",")));
        s
    }
}

/// Column means and stds over `rows`; zero stds become 1.
fn standardiser(x: &[f64], d: usize, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for &i in rows {
        for j in 0..d {
            mean[j] += x[i * d + j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.len().max(1) as f64);
    for &i in rows {
        for j in 0..d {
            let e = x[i * d + j] - mean[j];
            std[j] += e * e;
        }
    }
    for s in &mut std {
        *s = (*s / rows.len().max(1) as f64).sqrt();
        if !(*s > 0.0) {
            *s = 1.0;
        }
    }
    (mean, std)
}

fn standardise(x: &[f64], d: usize, (mean, std): &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    x.iter().enumerate().map(|(k, v)| (v - mean[k % d]) / std[k % d]).collect()
}

fn gather(x: &[f64], d: usize, rows: &[usize]) -> Tensor {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &i in rows {
        out.extend_from_slice(&x[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![rows.len(), d], out).expect("row-major gather")
}

fn feature_dims(features: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    match features.shape() {
        &[n, d] if n == labels.len() => Ok((n, d)),
        s => Err(Error::Shape(format!("features {s:?} for {} labels", labels.len()))),
    }
}

struct Mlp {
    params: Vec<Tensor>,
}

impl Mlp {
    fn init(d: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Self {
        let layer = |fan_in: usize, fan_out: usize, rng: &mut Rng| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| (2.0 * rng.uniform() - 1.0) * bound).collect();
            Tensor::new(vec![fan_in, fan_out], w).expect("weight shape")
        };
        let w1 = layer(d, hidden, rng);
        let w2 = layer(hidden, classes, rng);
        Mlp {
            params: vec![w1, Tensor::zeros(&[hidden]), w2, Tensor::zeros(&[classes])],
        }
    }

    fn logits(&self, g: &Graph, vars: &[crate::tensor::Var], x: &Tensor) -> Result<crate::tensor::Var> {
        let x = g.constant(x.clone());
        let h = g.relu(g.add_bias(g.matmul(x, vars[0])?, vars[1], 1)?);
        g.add_bias(g.matmul(h, vars[2])?, vars[3], 1)
    }

    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let vars: Vec<_> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let out = self.logits(&g, &vars, x)?;
        Ok(g.value(out))
    }
}

fn mean_ce(scores: &Tensor, labels: &[usize]) -> f64 {
    let c = scores.shape()[1];
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let row = &scores.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[l]
        })
        .sum();
    total / labels.len() as f64
}

fn accuracy(scores: &Tensor, labels: &[usize]) -> f64 {
    let c = scores.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| {
            let row = &scores.data()[i * c..(i + 1) * c];
            super::argmax(row) == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

fn mlp_trial(
    x: &[f64],
    d: usize,
    labels: &[usize],
    (train, val, test): (&[usize], &[usize], &[usize]),
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let mut rng = Rng::new(seed);
    let mut net = Mlp::init(d, cfg.hidden, classes, &mut rng);
    let mut m: Vec<Tensor> = net.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut v = m.clone();
    let x_val = gather(x, d, val);
    let y_val: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
    let mut best = (f64::NEG_INFINITY, f64::INFINITY, net.params.clone());
    let mut stale = 0;
    let mut step = 0i32;
    let mut order = train.to_vec();
    for _ in 0..cfg.max_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let g = Graph::new();
            let vars = net.params.iter().map(|p| g.param(p.clone())).collect::<Vec<_>>();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = net.logits(&g, &vars, &gather(x, d, chunk))?;
            let loss = g.mean_all(g.cross_entropy(logits, &y)?)?;
            let grads = g.grad(loss, &vars)?;
            let (c1, c2) = (1.0 - cfg.beta1.powi(step), 1.0 - cfg.beta2.powi(step));
            for (k, grad) in grads.iter().enumerate() {
                let p = net.params[k].data_mut();
                let (mk, vk) = (m[k].data_mut(), v[k].data_mut());
                for j in 0..p.len() {
                    p[j] -= cfg.lr * cfg.weight_decay * p[j];
                    mk[j] = cfg.beta1 * mk[j] + (1.0 - cfg.beta1) * grad.data()[j];
                    vk[j] = cfg.beta2 * vk[j] + (1.0 - cfg.beta2) * grad.data()[j] * grad.data()[j];
                    p[j] -= cfg.lr * (mk[j] / c1) / ((vk[j] / c2).sqrt() + cfg.eps);
                }
            }
        }
        let scores = net.predict(&x_val)?;
        let (acc, loss) = (accuracy(&scores, &y_val), mean_ce(&scores, &y_val));
        // Equal accuracy with a lower validation loss still counts as progress.
        if acc > best.0 || (acc == best.0 && loss < best.1) {
            best = (acc, loss, net.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    net.params = best.2;
    let y_test: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    compute_metrics(&net.predict(&gather(x, d, test))?, &y_test)
}

/// Train the probe on the train split with early stopping on validation
/// accuracy and report test metrics for each trial.
pub fn mlp_probe(
    features: &Tensor,
    labels: &[usize],
    splits: &[Split],
    num_classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    let (_, d) = feature_dims(features, labels)?;
    let pick = |s: Split| (0..labels.len()).filter(|&i| splits[i] == s).collect::<Vec<_>>();
    let (train, mut val, test) = (pick(Split::Train), pick(Split::Val), pick(Split::Test));
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("probe needs non-empty train and test splits".into()));
    }
    let first = labels[train[0]];
    if train.iter().all(|&i| labels[i] == first) {
        return Err(Error::Config("probe train split has a single class".into()));
    }
    if val.is_empty() {
        warn!("no validation split; early stopping monitors the train split");
        val = train.clone();
    }
    let x = standardise(features.data(), d, &standardiser(features.data(), d, &train));
    let trials = cfg.trials.unwrap_or_else(|| default_trials(train.len()));
    let reports = (0..trials)
        .into_par_iter()
        .map(|t| {
            mlp_trial(
                &x,
                d,
                labels,
                (&train, &val, &test),
                num_classes,
                cfg,
                Rng::child_seed(seed, t as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeReport { trials: reports })
}

/// Multinomial logistic regression weights `[D, C]` and intercepts `[C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub dim: usize,
    pub classes: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticModel {
    pub fn scores(&self, x: &[f64]) -> Tensor {
        let n = x.len() / self.dim;
        let mut out = vec![0.0; n * self.classes];
        for i in 0..n {
            let row = &x[i * self.dim..(i + 1) * self.dim];
            for c in 0..self.classes {
                let mut z = self.bias[c];
                for (j, &v) in row.iter().enumerate() {
                    z += v * self.weights[j * self.classes + c];
                }
                out[i * self.classes + c] = z;
            }
        }
        Tensor::new(vec![n, self.classes], out).expect("score shape")
    }
}

/// `mean CE + (l2 / 2n)·‖W‖²` and its gradient; intercepts are unpenalised.
fn logistic_objective(theta: &[f64], x: &[f64], y: &[usize], d: usize, c: usize, l2: f64) -> (f64, Vec<f64>) {
    let n = y.len();
    let (w, b) = theta.split_at(d * c);
    let mut grad = vec![0.0; theta.len()];
    let mut loss = 0.0;
    let mut z = vec![0.0; c];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        for k in 0..c {
            z[k] = b[k] + row.iter().enumerate().map(|(j, &v)| v * w[j * c + k]).sum::<f64>();
        }
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
        loss += lse - z[y[i]];
        for k in 0..c {
            let r = (z[k] - lse).exp() - if k == y[i] { 1.0 } else { 0.0 };
            for (j, &v) in row.iter().enumerate() {
                grad[j * c + k] += r * v;
            }
            grad[d * c + k] += r;
        }
    }
    let inv = 1.0 / n as f64;
    loss *= inv;
    grad.iter_mut().for_each(|g| *g *= inv);
    let reg = l2 * inv;
    for (k, &wk) in w.iter().enumerate() {
        loss += 0.5 * reg * wk * wk;
        grad[k] += reg * wk;
    }
    (loss, grad)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L-BFGS (memory 10) with Armijo backtracking; stops when `max |∇| ≤ tol`.
fn lbfgs(
    mut x: Vec<f64>,
    f: impl Fn(&[f64]) -> (f64, Vec<f64>),
    tol: f64,
    max_iter: usize,
) -> (Vec<f64>, usize, bool) {
    const MEMORY: usize = 10;
    let (mut fx, mut g) = f(&x);
    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    for iter in 0..max_iter {
        if g.iter().all(|v| v.abs() <= tol) {
            return (x, iter, true);
        }
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.last() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let norm = dot(&g, &g).sqrt().max(1.0);
            q.iter_mut().for_each(|v| *v /= norm);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + t * di).collect();
            let (fc, gc) = f(&cand);
            if fc <= fx + 1e-4 * t * slope {
                accepted = Some((cand, fc, gc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else {
            return (x, iter, false);
        };
        let s: Vec<f64> = cand.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if history.len() == MEMORY {
                history.remove(0);
            }
            history.push((s, y, 1.0 / sy));
        }
        x = cand;
        fx = fc;
        g = gc;
    }
    let done = g.iter().all(|v| v.abs() <= tol);
    (x, max_iter, done)
}

/// Fit multinomial logistic regression on row-major `x` (`n × d`).
pub fn logistic_regression(
    x: &[f64],
    y: &[usize],
    d: usize,
    classes: usize,
    l2: f64,
    tol: f64,
    max_iter: usize,
) -> Result<LogisticModel> {
    if y.is_empty() || x.len() != y.len() * d {
        return Err(Error::Shape(format!("{} feature values for {} rows of width {d}", x.len(), y.len())));
    }
    if let Some(&l) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::Index(format!("label {l} out of range for {classes} classes")));
    }
    let (theta, iterations, converged) = lbfgs(
        vec![0.0; (d + 1) * classes],
        |t| logistic_objective(t, x, y, d, classes, l2),
        tol,
        max_iter,
    );
    if !converged {
        warn!("logistic regression stopped after {iterations} iterations without reaching tol {tol}");
    }
    Ok(LogisticModel {
        weights: theta[..d * classes].to_vec(),
        bias: theta[d * classes..].to_vec(),
        dim: d,
        classes,
        iterations,
        converged,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowShotConfig {
    pub shots: Vec<usize>,
    pub trials: usize,
    pub l2: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Debug: every trial of a shot reuses the first trial's subsample.
    pub force_identical: bool,
}

impl Default for LowShotConfig {
    fn default() -> Self {
        LowShotConfig {
            shots: vec![8, 16, 32, 64, 128, 256],
            trials: 10,
            l2: 1.0,
            tol: 1e-6,
            max_iter: 1000,
            force_identical: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowShotPoint {
    pub shot: usize,
    pub values: Vec<f64>,
    pub mean: f64,
    pub half_width: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowShotCurve {
    pub points: Vec<LowShotPoint>,
}

impl LowShotCurve {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOWSHOT_CSV_HEADER}\n");
        for p in &self.points {
            let min = p.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = p.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let hw = p.half_width.map_or_else(|| "undefined".to_string(), |v| v.to_string());
            s.push_str(&format!("{},{},{},{hw},{min},{max}\n", p.shot, p.values.len(), p.mean));
        }
        s
    }
}

/// Per shot and trial: draw `shot` train rows per class without
/// replacement, fit logistic regression, score macro-F1 on the test split.
pub fn lowshot_eval(
    features: &Tensor,
    labels: &[usize],
    splits: &[Split],
    num_classes: usize,
    cfg: &LowShotConfig,
    seed: u64,
) -> Result<LowShotCurve> {
    let (_, d) = feature_dims(features, labels)?;
    if cfg.shots.windows(2).any(|w| w[0] >= w[1]) || cfg.shots.first() == Some(&0) {
        return Err(Error::Config(format!("shots must be positive and strictly increasing, got {:?}", cfg.shots)));
    }
    if cfg.trials == 0 {
        return Err(Error::Config("lowshot trials must be positive".into()));
    }
    let test: Vec<usize> = (0..labels.len()).filter(|&i| splits[i] == Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Config("lowshot needs a non-empty test split".into()));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    let mut train = Vec::new();
    for i in 0..labels.len() {
        if splits[i] == Split::Train {
            pools[labels[i]].push(i);
            train.push(i);
        }
    }
    let x = standardise(features.data(), d, &standardiser(features.data(), d, &train));
    let x_test = gather(&x, d, &test);
    let y_test: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let present: Vec<usize> = (0..num_classes).filter(|&c| !pools[c].is_empty()).collect();
    let mut points = Vec::new();
    for &shot in &cfg.shots {
        if let Some(&c) = present.iter().find(|&&c| pools[c].len() < shot) {
            warn!("skipping shot {shot}: class {c} has only {} train samples", pools[c].len());
            continue;
        }
        let shot_seed = Rng::child_seed(seed, shot as u64);
        let values = (0..cfg.trials)
            .into_par_iter()
            .map(|t| {
                let t = if cfg.force_identical { 0 } else { t };
                let mut rng = Rng::new(Rng::child_seed(shot_seed, t as u64));
                let mut rows = Vec::with_capacity(shot * present.len());
                for &c in &present {
                    let mut pool = pools[c].clone();
                    rng.shuffle(&mut pool);
                    rows.extend_from_slice(&pool[..shot]);
                }
                let xs = gather(&x, d, &rows);
                let ys: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
                let model = logistic_regression(xs.data(), &ys, d, num_classes, cfg.l2, cfg.tol, cfg.max_iter)?;
                Ok(compute_metrics(&model.scores(x_test.data()), &y_test)?.macro_f1)
            })
            .collect::<Result<Vec<f64>>>()?;
        let (mean, half_width) = mean_ci95(&values);
        points.push(LowShotPoint {
            shot,
            values,
            mean,
            half_width,
        });
    }
    Ok(LowShotCurve { points })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two Gaussian blobs at ±`gap` along every axis.
    pub(crate) fn blobs(n_per: usize, d: usize, gap: f64, seed: u64) -> (Tensor, Vec<usize>, Vec<Split>) {
        let mut rng = Rng::new(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut s = Vec::new();
        for i in 0..2 * n_per {
            let c = i % 2;
            for _ in 0..d {
                x.push(if c == 0 { -gap } else { gap } + rng.normal());
            }
            y.push(c);
            s.push(match (i / 2) % 5 {
                0 => Split::Test,
                1 => Split::Val,
                _ => Split::Train,
            });
        }
        (Tensor::new(vec![2 * n_per, d], x).unwrap(), y, s)
    }

    #[test]
    fn lbfgs_matches_closed_form_ridge_gradient() {
        let (x, y, _) = blobs(20, 3, 1.0, 1);
        let m = logistic_regression(x.data(), &y, 3, 2, 1.0, 1e-8, 500).unwrap();
        assert!(m.converged);
        let theta: Vec<f64> = m.weights.iter().chain(&m.bias).cloned().collect();
        let (_, g) = logistic_objective(&theta, x.data(), &y, 3, 2, 1.0);
        assert!(g.iter().all(|v| v.abs() <= 1e-8));
        // Numeric gradient of the objective agrees with the analytic one.
        let probe: Vec<f64> = (0..theta.len()).map(|k| 0.1 * k as f64 - 0.3).collect();
        let (_, ga) = logistic_objective(&probe, x.data(), &y, 3, 2, 1.0);
        for k in 0..probe.len() {
            let (mut p, mut q) = (probe.clone(), probe.clone());
            p[k] += 1e-6;
            q[k] -= 1e-6;
            let num = (logistic_objective(&p, x.data(), &y, 3, 2, 1.0).0
                - logistic_objective(&q, x.data(), &y, 3, 2, 1.0).0)
                / 2e-6;
            assert!((num - ga[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn mlp_separates_blobs_and_is_deterministic() {
        let (x, y, s) = blobs(60, 4, 3.0, 2);
        let cfg = ProbeConfig {
            trials: Some(2),
            hidden: 32,
            ..ProbeConfig::default()
        };
        let r = mlp_probe(&x, &y, &s, 2, &cfg, 9).unwrap();
        for t in &r.trials {
            assert_eq!(t.accuracy, 1.0);
        }
        assert_eq!(r, mlp_probe(&x, &y, &s, 2, &cfg, 9).unwrap());
        assert!(r.to_csv().starts_with("trial,"));
    }

    #[test]
    fn single_class_train_is_a_config_error() {
        let x = Tensor::zeros(&[3, 2]);
        let s = [Split::Train, Split::Train, Split::Test];
        assert!(matches!(
            mlp_probe(&x, &[0, 0, 1], &s, 2, &ProbeConfig::default(), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forced_identical_trials_have_zero_width() {
        let (x, y, s) = blobs(40, 2, 0.5, 3);
        let cfg = LowShotConfig {
            shots: vec![4, 8],
            trials: 2,
            force_identical: true,
            ..LowShotConfig::default()
        };
        let curve = lowshot_eval(&x, &y, &s, 2, &cfg, 1).unwrap();
        for p in &curve.points {
            assert_eq!(p.half_width, Some(0.0));
            assert!(p.mean.is_finite() && (0.0..=1.0).contains(&p.mean));
        }
    }

    #[test]
    fn oversized_shots_are_skipped_and_empty_test_fails() {
        let (x, y, s) = blobs(20, 2, 2.0, 4);
        let cfg = LowShotConfig {
            shots: vec![4, 1000],
            trials: 2,
            ..LowShotConfig::default()
        };
        assert_eq!(lowshot_eval(&x, &y, &s, 2, &cfg, 0).unwrap().points.len(), 1);
        let no_test: Vec<Split> = s.iter().map(|_| Split::Train).collect();
        assert!(matches!(lowshot_eval(&x, &y, &no_test, 2, &cfg, 0), Err(Error::Config(_))));
        let bad = LowShotConfig {
            shots: vec![8, 8],
            ..cfg
        };
        assert!(lowshot_eval(&x, &y, &s, 2, &bad, 0).is_err());
    }
}
