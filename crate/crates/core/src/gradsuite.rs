//! Finite-difference checks for every differentiable op and both network
//! composites, each over a range of seeds.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;

use crate::distributions::{beta_log_prob, beta_sample, BetaParams};
use crate::error::{Error, Result};
use crate::networks::{blend_params, ClassifierNet, ClassifierSpec, EmaState, PolicyNet, PolicySpec};
use crate::rng::Rng;
use crate::tensor::gradcheck::{max_relative_error, DEFAULT_STEP};
use crate::tensor::{Graph, Tensor, Var};
use crate::training::{reinforce_loss, Reduction};

pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_SEEDS: usize = 20;
pub const GRADCHECK_CSV_HEADER: &str = "case,seeds,max_relative_error,passed";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCase {
    Conv2d,
    Lgamma,
    CrossEntropy,
    BetaLogProb,
    Policy,
    Classifier,
}

pub const ALL_CASES: [GradCase; 6] = [
    GradCase::Conv2d,
    GradCase::Lgamma,
    GradCase::CrossEntropy,
    GradCase::BetaLogProb,
    GradCase::Policy,
    GradCase::Classifier,
];

impl GradCase {
    pub fn name(self) -> &'static str {
        match self {
            GradCase::Conv2d => "conv2d",
            GradCase::Lgamma => "lgamma",
            GradCase::CrossEntropy => "cross_entropy",
            GradCase::BetaLogProb => "beta_log_prob",
            GradCase::Policy => "policy_composite",
            GradCase::Classifier => "classifier_composite",
        }
    }
}

impl fmt::Display for GradCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradCase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ALL_CASES
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradient case `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub case: GradCase,
    pub seeds: usize,
    pub max_relative_error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRAD_TOLERANCE
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect();
    Tensor::new(shape.to_vec(), data).expect("numel matches shape")
}

/// Random linear functional of `v`, so every output element gets a distinct weight.
fn project(g: &Graph, v: Var, rng: &mut Rng) -> Result<Var> {
    let w = g.constant(uniform(&g.shape(v), -1.0, 1.0, rng));
    Ok(g.sum_all(g.mul(v, w)?))
}

fn check(case: GradCase, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    match case {
        GradCase::Conv2d => {
            let stride = 1 + (seed % 2) as usize;
            let x = uniform(&[2, 2, 7, 6], -1.0, 1.0, &mut rng);
            let k = uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
            let probe_seed = rng.next_u64();
            max_relative_error(&[x, k], DEFAULT_STEP, |g, v| {
                let y = g.conv2d(v[0], v[1], stride, 1)?;
                project(g, y, &mut Rng::new(probe_seed))
            })
        }
        GradCase::Lgamma => {
            let x = uniform(&[12], 0.2, 6.0, &mut rng);
            let probe_seed = rng.next_u64();
            max_relative_error(&[x], DEFAULT_STEP, |g, v| {
                let y = g.lgamma(v[0])?;
                project(g, y, &mut Rng::new(probe_seed))
            })
        }
        GradCase::CrossEntropy => {
            let logits = uniform(&[5, 4], -3.0, 3.0, &mut rng);
            let labels: Vec<usize> = (0..5).map(|_| rng.below(4)).collect();
            max_relative_error(&[logits], DEFAULT_STEP, |g, v| {
                let ce = g.cross_entropy(v[0], &labels)?;
                g.mean_all(ce)
            })
        }
        GradCase::BetaLogProb => {
            let a = uniform(&[3, 4], 0.3, 4.0, &mut rng);
            let b = uniform(&[3, 4], 0.3, 4.0, &mut rng);
            let x = uniform(&[3, 4], 0.05, 0.95, &mut rng);
            let probe_seed = rng.next_u64();
            max_relative_error(&[a, b], DEFAULT_STEP, |g, v| {
                let lp = beta_log_prob(g, &x, v[0], v[1])?;
                project(g, lp, &mut Rng::new(probe_seed))
            })
        }
        GradCase::Policy => {
            let mut spec = PolicySpec::small(1, 12, 12, 3, 3);
            spec.zero_head = false;
            let policy = PolicyNet::init(spec, seed)?;
            let x = uniform(&[2, 1, 12, 12], -1.0, 1.0, &mut rng);
            let ema = EmaState::from_parts(
                uniform(&[3, 3], -0.5, 0.5, &mut rng),
                uniform(&[3, 3], -0.5, 0.5, &mut rng),
                0.9,
                0.99,
            )?;
            let ce = vec![0.5 + rng.uniform(), 0.5 + rng.uniform()];
            let reduction = if seed.is_multiple_of(2) { Reduction::LogSumExp } else { Reduction::SumLogProb };
            let raw = {
                let g = Graph::new();
                let vars = policy.bind(&g, false);
                let input = g.constant(x.clone());
                let (a, b) = policy.forward(&g, &vars, input)?;
                let blended = blend_params(&g, a, b, &mut ema.clone(), false)?;
                let params = BetaParams::new(g.value(blended.alpha), g.value(blended.beta))?;
                beta_sample(&params, &mut rng)
            };
            max_relative_error(policy.params(), DEFAULT_STEP, |g, vars| {
                let input = g.constant(x.clone());
                let (a, b) = policy.forward(g, vars, input)?;
                let blended = blend_params(g, a, b, &mut ema.clone(), false)?;
                let lp = beta_log_prob(g, &raw, blended.alpha, blended.beta)?;
                reinforce_loss(g, lp, &ce, reduction)
            })
        }
        GradCase::Classifier => {
            let mut spec = ClassifierSpec::small(1, 8, 8, 3);
            spec.backbone.blocks = vec![(4, 1), (6, 2), (8, 2)];
            let net = ClassifierNet::init(spec, seed)?;
            let x = uniform(&[2, 1, 8, 8], -1.0, 1.0, &mut rng);
            let labels = vec![rng.below(3), rng.below(3)];
            max_relative_error(net.params(), DEFAULT_STEP, |g, vars| {
                let input = g.constant(x.clone());
                let logits = net.forward(g, vars, input)?;
                let ce = g.cross_entropy(logits, &labels)?;
                g.mean_all(ce)
            })
        }
    }
}

/// Worst relative error of `case` over seeds `0..seeds`.
pub fn run_case(case: GradCase, seeds: usize) -> Result<CaseResult> {
    let mut worst = 0.0f64;
    for s in 0..seeds as u64 {
        let err = check(case, Rng::child_seed(0x6772_6164, s))?;
        if !err.is_finite() {
            return Err(Error::Divergence(format!("{case}: non-finite gradient error at seed {s}")));
        }
        worst = worst.max(err);
    }
    Ok(CaseResult {
        case,
        seeds,
        max_relative_error: worst,
    })
}

pub fn run_suite(seeds: usize) -> Result<Vec<CaseResult>> {
    ALL_CASES.iter().map(|&c| run_case(c, seeds)).collect()
}

pub fn suite_csv(results: &[CaseResult]) -> String {
    let mut s = format!("{GRADCHECK_CSV_HEADER}\n");
    for r in results {
        s.push_str(&format!("{},{},{:e},{}\n", r.case, r.seeds, r.max_relative_error, r.passed()));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for c in ALL_CASES {
            assert_eq!(c.name().parse::<GradCase>().unwrap(), c);
        }
        assert!("softmax".parse::<GradCase>().is_err());
    }

    #[test]
    fn cheap_cases_pass_on_a_few_seeds() {
        for c in [GradCase::Lgamma, GradCase::CrossEntropy, GradCase::BetaLogProb] {
            let r = run_case(c, 3).unwrap();
            assert!(r.passed(), "{c}: {}", r.max_relative_error);
        }
    }

    #[test]
    fn csv_lists_each_case() {
        let r = vec![CaseResult {
            case: GradCase::Conv2d,
            seeds: 1,
            max_relative_error: 2e-9,
        }];
        assert_eq!(suite_csv(&r), format!("{GRADCHECK_CSV_HEADER}\nconv2d,1,2e-9,true\n"));
    }
}
