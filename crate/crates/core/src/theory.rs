//! Disentangled-factor simulator for the harmful-sample analysis.
//!
//! The setting is a binary linear classifier over latent factors
//! `v in [0,1]^d` split into four partitions by the sign of the
//! label/factor correlation at train and test time. A sample is *harmful*
//! when one entropy-minimization step on it shrinks the gap between the
//! two classes' mean logits; the executable claim is that the sign of
//! `y_hat * v . (E+[v] - E-[v])` predicts the sign of that gap change
//! exactly. Two independent routes compute the gap change: the closed form
//! from the gradient algebra and a brute-force before/after evaluation of
//! the mean logits.

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Rng};
use serde::Serialize;

/// Binary linear world over four factor partitions, ordered
/// `[pp | pn | np | nn]` in every vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorWorld {
    pub d_pp: usize,
    pub d_pn: usize,
    pub d_np: usize,
    pub d_nn: usize,
    /// Class-conditional factor means (analytic, so conditions are exact).
    pub mu_plus: Vec<f64>,
    pub mu_minus: Vec<f64>,
    /// Signed parameters: positive on pp/pn, non-positive on np/nn.
    pub theta: Vec<f64>,
    /// Step size of the entropy-minimization update.
    pub eta: f64,
}

/// A latent-factor input with its pseudo-label in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSample {
    pub v: Vec<f64>,
    pub pseudo_label: i8,
}

/// One entropy-minimization update `delta = y_hat * c * v` with
/// `c = eta * |ln((1-p)/p) * p * (1-p)|`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStep {
    pub delta: Vec<f64>,
    pub c: f64,
    /// True when `p` is numerically 0.5 (or saturated), which zeroes the
    /// step.
    pub stationary: bool,
}

/// Coordinate split of `v . (E+[v] - E-[v])` into the partition that stays
/// label-aligned at test time (cpr), the one that flips (trap), and the
/// remainder from the np/nn partitions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionSplit {
    pub cpr_term: f64,
    pub trap_term: f64,
    pub residual: f64,
}

impl FactorWorld {
    pub fn dims(&self) -> usize {
        self.d_pp + self.d_pn + self.d_np + self.d_nn
    }

    /// Validates the mean-ordering and parameter-sign structure.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if d == 0 {
            return Err(Error::Config("world needs at least one factor".into()));
        }
        if self.mu_plus.len() != d || self.mu_minus.len() != d || self.theta.len() != d {
            return Err(Error::DimensionMismatch {
                context: "FactorWorld",
                expected: format!("{d} coordinates"),
                actual: format!(
                    "mu+ {}, mu- {}, theta {}",
                    self.mu_plus.len(),
                    self.mu_minus.len(),
                    self.theta.len()
                ),
            });
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        for (i, (&p, &m)) in self.mu_plus.iter().zip(&self.mu_minus).enumerate() {
            if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&m) {
                return Err(Error::Config(format!(
                    "factor means must lie in [0,1], coordinate {i} has ({p}, {m})"
                )));
            }
            if i < self.d_pp && p < m {
                return Err(Error::Config(format!(
                    "pp coordinate {i} must satisfy mu+ >= mu-, got ({p}, {m})"
                )));
            }
            if (self.d_pp..self.d_pp + self.d_pn).contains(&i) && p > m {
                return Err(Error::Config(format!(
                    "pn coordinate {i} must satisfy mu+ <= mu-, got ({p}, {m})"
                )));
            }
        }
        for (i, &t) in self.theta.iter().enumerate() {
            let positive_block = i < self.d_pp + self.d_pn;
            if positive_block && t <= 0.0 {
                return Err(Error::Config(format!(
                    "theta[{i}] must be > 0 in the pp/pn block, got {t}"
                )));
            }
            if !positive_block && t > 0.0 {
                return Err(Error::Config(format!(
                    "theta[{i}] must be <= 0 in the np/nn block, got {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn logit(&self, v: &[f64]) -> f64 {
        self.theta.iter().zip(v).map(|(t, x)| t * x).sum()
    }

    /// Draws a world satisfying all structural invariants.
    pub fn sample(rng: &mut Rng) -> Self {
        loop {
            let d_pp = rng.below(4);
            let d_pn = rng.below(4);
            let d_np = rng.below(3);
            let d_nn = rng.below(3);
            if d_pp + d_pn + d_np + d_nn == 0 {
                continue;
            }
            let d = d_pp + d_pn + d_np + d_nn;
            let mut mu_plus = Vec::with_capacity(d);
            let mut mu_minus = Vec::with_capacity(d);
            for i in 0..d {
                let a = rng.next_f64();
                let b = rng.next_f64();
                let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
                if i < d_pp {
                    mu_plus.push(hi);
                    mu_minus.push(lo);
                } else if i < d_pp + d_pn {
                    mu_plus.push(lo);
                    mu_minus.push(hi);
                } else {
                    mu_plus.push(a);
                    mu_minus.push(b);
                }
            }
            let theta = (0..d)
                .map(|i| {
                    if i < d_pp + d_pn {
                        rng.uniform(0.05, 1.5)
                    } else {
                        -rng.uniform(0.0, 1.5)
                    }
                })
                .collect();
            let world = FactorWorld {
                d_pp,
                d_pn,
                d_np,
                d_nn,
                mu_plus,
                mu_minus,
                theta,
                eta: rng.uniform(0.01, 0.5),
            };
            debug_assert!(world.validate().is_ok());
            return world;
        }
    }

    /// Draws factor values uniformly in `[0,1]` and derives the
    /// pseudo-label from the sign of the logit.
    pub fn sample_input(&self, rng: &mut Rng) -> FactorSample {
        let v: Vec<f64> = (0..self.dims()).map(|_| rng.next_f64()).collect();
        let pseudo_label = if self.logit(&v) > 0.0 { 1 } else { -1 };
        FactorSample { v, pseudo_label }
    }
}

fn mean_gap_dot(world: &FactorWorld, v: &[f64]) -> f64 {
    v.iter()
        .zip(world.mu_plus.iter().zip(&world.mu_minus))
        .map(|(x, (p, m))| x * (p - m))
        .sum()
}

/// The harmfulness condition `y_hat * v . (E+[v] - E-[v])`; a negative
/// value marks the sample as harmful.
pub fn harmful_condition(world: &FactorWorld, sample: &FactorSample) -> f64 {
    sample.pseudo_label as f64 * mean_gap_dot(world, &sample.v)
}

/// The entropy-minimization update on `theta` in closed form.
pub fn entropy_grad_step(world: &FactorWorld, sample: &FactorSample) -> GradStep {
    let p = sigmoid(world.logit(&sample.v));
    let d = world.dims();
    if p <= 0.0 || p >= 1.0 || p == 0.5 {
        return GradStep {
            delta: vec![0.0; d],
            c: 0.0,
            stationary: true,
        };
    }
    let c = world.eta * (((1.0 - p) / p).ln() * p * (1.0 - p)).abs();
    if c == 0.0 {
        return GradStep {
            delta: vec![0.0; d],
            c: 0.0,
            stationary: true,
        };
    }
    let y = sample.pseudo_label as f64;
    GradStep {
        delta: sample.v.iter().map(|&x| y * c * x).collect(),
        c,
        stationary: false,
    }
}

/// Change of the class mean-logit gap after applying the update, computed
/// by brute force: mean logits are evaluated before and after the step.
pub fn gap_change_oracle(world: &FactorWorld, sample: &FactorSample) -> f64 {
    let step = entropy_grad_step(world, sample);
    let before = world
        .theta
        .iter()
        .zip(world.mu_plus.iter().zip(&world.mu_minus))
        .map(|(t, (p, m))| t * p - t * m)
        .sum::<f64>();
    let after = world
        .theta
        .iter()
        .zip(&step.delta)
        .zip(world.mu_plus.iter().zip(&world.mu_minus))
        .map(|((t, d), (p, m))| (t + d) * p - (t + d) * m)
        .sum::<f64>();
    after - before
}

/// The same gap change from the gradient algebra:
/// `c * y_hat * v . (E+[v] - E-[v])`.
pub fn gap_change_closed_form(world: &FactorWorld, sample: &FactorSample) -> f64 {
    let step = entropy_grad_step(world, sample);
    step.c * harmful_condition(world, sample)
}

/// Splits the condition's dot product by partition (the `y_hat = +1`
/// orientation): the pp term is non-negative and the pn term non-positive
/// under the mean ordering; np/nn contributions land in `residual`.
pub fn decompose_terms(world: &FactorWorld, sample: &FactorSample) -> ConditionSplit {
    let full = mean_gap_dot(world, &sample.v);
    let pp_end = world.d_pp;
    let pn_end = world.d_pp + world.d_pn;
    let part = |range: std::ops::Range<usize>| -> f64 {
        range
            .map(|i| sample.v[i] * (world.mu_plus[i] - world.mu_minus[i]))
            .sum()
    };
    let cpr_term = part(0..pp_end);
    let trap_term = part(pp_end..pn_end);
    ConditionSplit {
        cpr_term,
        trap_term,
        residual: full - cpr_term - trap_term,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryCounterexample {
    pub trial: usize,
    pub condition: f64,
    pub gap_change: f64,
}

/// Outcome of the sign-agreement verification suite.
#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub requested_trials: usize,
    /// Comparisons actually made (|condition| > 1e-9 and non-stationary).
    pub valid_trials: usize,
    pub draws: usize,
    pub agreements: usize,
    pub disagreements: usize,
    pub stationary_skipped: usize,
    pub small_condition_skipped: usize,
    /// Largest |closed form - brute force| gap-change difference observed.
    pub max_route_gap: f64,
    /// Must be empty.
    pub counterexamples: Vec<TheoryCounterexample>,
}

impl TheoryReport {
    pub fn all_agree(&self) -> bool {
        self.disagreements == 0 && self.valid_trials > 0
    }
}

/// Runs `trials` independent (world, sample) comparisons of the condition
/// sign against the brute-force gap change.
pub fn verify_sign_agreement(trials: usize, seed: u64) -> Result<TheoryReport> {
    if trials == 0 {
        return Err(Error::Config("verification needs at least one trial".into()));
    }
    let mut rng = Rng::new(seed);
    let mut report = TheoryReport {
        seed,
        requested_trials: trials,
        valid_trials: 0,
        draws: 0,
        agreements: 0,
        disagreements: 0,
        stationary_skipped: 0,
        small_condition_skipped: 0,
        max_route_gap: 0.0,
        counterexamples: Vec::new(),
    };
    let cap = trials.saturating_mul(20);
    while report.valid_trials < trials && report.draws < cap {
        report.draws += 1;
        let world = FactorWorld::sample(&mut rng);
        let sample = world.sample_input(&mut rng);
        let condition = harmful_condition(&world, &sample);
        if condition.abs() <= 1e-9 {
            report.small_condition_skipped += 1;
            continue;
        }
        let step = entropy_grad_step(&world, &sample);
        if step.stationary {
            report.stationary_skipped += 1;
            continue;
        }
        let brute = gap_change_oracle(&world, &sample);
        let closed = gap_change_closed_form(&world, &sample);
        report.max_route_gap = report.max_route_gap.max((brute - closed).abs());
        report.valid_trials += 1;
        if condition.signum() == brute.signum() {
            report.agreements += 1;
        } else {
            report.disagreements += 1;
            report.counterexamples.push(TheoryCounterexample {
                trial: report.draws,
                condition,
                gap_change: brute,
            });
        }
    }
    Ok(report)
}
