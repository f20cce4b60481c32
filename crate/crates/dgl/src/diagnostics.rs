//! Empirical verification of the convergence analysis: a windowed
//! distribution-drift estimator, a Monte-Carlo check of the per-step descent
//! inequality on an instrumented quadratic with exactly known constants, a
//! step-size classifier, and the accumulation-rate summary.
//!
//! The drift estimator is this artifact's own construction (the analysis
//! references an unobservable limiting density); it is a proxy and is
//! reported as such everywhere.

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

#[derive(Clone, Copy, Debug)]
pub struct DriftCfg {
    pub projections: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for DriftCfg {
    fn default() -> Self {
        DriftCfg {
            projections: 16,
            bins: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DriftEstimate {
    /// Max over random 1-D projections of the total-variation distance
    /// between 32-bin histograms; each projection's value lies in [0, 1].
    pub value: f64,
    /// Set when either batch has fewer than 16 samples (wide confidence).
    pub small_sample: bool,
}

/// Estimates how far apart two feature batches are in distribution: both are
/// projected onto `projections` seeded random directions and the histogram
/// total-variation distance is taken per direction, keeping the max.
/// Symmetric, zero on identical batches, deterministic given the seed.
pub fn estimate_drift<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    cfg: &DriftCfg,
) -> Result<DriftEstimate> {
    if a.sample_len() != b.sample_len() {
        return Err(Error::shape(
            "drift estimate",
            format!("{} features", a.sample_len()),
            format!("{} features", b.sample_len()),
        ));
    }
    if a.batch() == 0 || b.batch() == 0 {
        return Err(Error::InvalidArgument("drift estimate on empty batch".into()));
    }
    let dim = a.sample_len();
    let bins = cfg.bins.max(2);
    let mut rng = seed::rng(cfg.seed, "drift-projections", 0);
    let mut worst = 0.0f64;
    for _ in 0..cfg.projections.max(1) {
        // Random unit direction via normalized Gaussian coordinates.
        let mut dir = vec![0.0f64; dim];
        let mut norm = 0.0;
        for d in dir.iter_mut() {
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            *d = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            norm += *d * *d;
        }
        let norm = norm.sqrt().max(f64::MIN_POSITIVE);
        dir.iter_mut().for_each(|d| *d /= norm);

        let project = |t: &Tensor<T>| -> Vec<f64> {
            (0..t.batch())
                .map(|i| {
                    t.sample(i)
                        .iter()
                        .zip(dir.iter())
                        .map(|(v, d)| v.as_f64() * d)
                        .sum()
                })
                .collect()
        };
        let pa = project(a);
        let pb = project(b);
        let lo = pa
            .iter()
            .chain(pb.iter())
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let hi = pa
            .iter()
            .chain(pb.iter())
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            continue; // all projected values identical: zero distance
        }
        let width = (hi - lo) / bins as f64;
        let histogram = |vals: &[f64]| -> Vec<f64> {
            let mut h = vec![0.0f64; bins];
            for v in vals {
                let idx = (((v - lo) / width) as usize).min(bins - 1);
                h[idx] += 1.0 / vals.len() as f64;
            }
            h
        };
        let ha = histogram(&pa);
        let hb = histogram(&pb);
        let tv: f64 = 0.5 * ha.iter().zip(hb.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>();
        worst = worst.max(tv);
    }
    Ok(DriftEstimate {
        value: worst,
        small_sample: a.batch() < 16 || b.batch() < 16,
    })
}

/// An instrumented stochastic quadratic with exactly known constants.
///
/// Loss per sample: l(z; theta) = 0.5 * ||theta - z||^2, so the expected risk
/// is L-smooth with L = 1 and has gradient theta - mean. Inputs are drawn
/// from a two-source mixture with disjoint bounded supports; the mixture
/// weight decays geometrically toward its limit, which makes the
/// total-variation drift c_t available in closed form: c_t = 2*drift0*2^-t.
#[derive(Clone, Debug)]
pub struct TheoryProbe {
    pub dim: usize,
    /// Mixture-weight offset at t = 0; the limit weight is 0.5.
    pub drift0: f64,
    pub eta: Vec<f64>,
    pub trajectories: usize,
    pub seed: u64,
}

impl TheoryProbe {
    pub fn new(dim: usize, drift0: f64, eta: Vec<f64>, trajectories: usize, seed: u64) -> Result<Self> {
        if dim == 0 || eta.is_empty() || trajectories == 0 {
            return Err(Error::InvalidArgument("degenerate theory probe".into()));
        }
        if !(0.0..=0.5).contains(&drift0) {
            return Err(Error::InvalidArgument(
                "mixture-weight offset must lie in [0, 0.5]".into(),
            ));
        }
        Ok(TheoryProbe {
            dim,
            drift0,
            eta,
            trajectories,
            seed,
        })
    }

    /// Gradient-Lipschitz constant of the quadratic risk.
    pub fn smoothness(&self) -> f64 {
        1.0
    }

    /// Exact bound on E||grad l||^2 over every state reachable with steps
    /// eta <= 1 from the origin: coordinates stay inside the source hull, so
    /// ||theta - z||^2 <= 2^2 + (dim-1) * 1^2.
    pub fn variance_bound(&self) -> f64 {
        (self.dim + 3) as f64
    }

    /// Closed-form total-variation drift at step t (integral convention):
    /// the sources have disjoint supports, so c_t = 2 * |w_t - w*|.
    pub fn c_t(&self, t: usize) -> f64 {
        2.0 * self.drift0 * 0.5f64.powi(t as i32)
    }

    /// Expected risk under the limiting distribution, in closed form.
    pub fn risk(&self, theta: &[f64]) -> f64 {
        // E||z - mu*||^2 with mu* = 0: first coordinate contributes 7/12
        // (means +-0.75, per-source variance 1/48), the rest 1/12 each.
        let trace = 7.0 / 12.0 + (self.dim - 1) as f64 / 12.0;
        0.5 * (theta.iter().map(|v| v * v).sum::<f64>() + trace)
    }

    fn draw_sample(&self, rng: &mut rand_chacha::ChaCha8Rng, w_t: f64) -> Vec<f64> {
        let from_a = rng.random_range(0.0..1.0) < w_t;
        let mut z = vec![0.0f64; self.dim];
        z[0] = if from_a {
            rng.random_range(-1.0..-0.5)
        } else {
            rng.random_range(0.5..1.0)
        };
        for v in z.iter_mut().skip(1) {
            *v = rng.random_range(-0.5..0.5);
        }
        z
    }

    fn simulate(&self) -> ProbeTrajectories {
        let t_n = self.eta.len();
        let n = self.trajectories;
        // risk[t][i], grad_sq[t][i] for t = 0..=T
        let mut risk = vec![vec![0.0f64; n]; t_n + 1];
        let mut grad_sq = vec![vec![0.0f64; n]; t_n + 1];
        for i in 0..n {
            let mut rng = seed::rng(self.seed, "theory-probe", i as u64);
            let mut theta = vec![0.0f64; self.dim];
            for (t, &eta) in self.eta.iter().enumerate() {
                risk[t][i] = self.risk(&theta);
                grad_sq[t][i] = theta.iter().map(|v| v * v).sum();
                let w_t = 0.5 + self.drift0 * 0.5f64.powi(t as i32);
                let z = self.draw_sample(&mut rng, w_t);
                for (th, zv) in theta.iter_mut().zip(z.iter()) {
                    *th -= eta * (*th - zv);
                }
            }
            risk[t_n][i] = self.risk(&theta);
            grad_sq[t_n][i] = theta.iter().map(|v| v * v).sum();
        }
        ProbeTrajectories { risk, grad_sq }
    }

    /// Monte-Carlo check of the per-step descent inequality
    ///   E[L(t+1)] <= E[L(t)] - eta_t (E||grad L||^2 - G sqrt(2 c_t)) + L G eta_t^2 / 2
    /// at every step, within three standard errors.
    pub fn check_descent(&self) -> DescentReport {
        let sim = self.simulate();
        let g = self.variance_bound();
        let l = self.smoothness();
        let n = self.trajectories as f64;
        let mut steps = Vec::with_capacity(self.eta.len());
        for (t, &eta) in self.eta.iter().enumerate() {
            // Per-trajectory statistic whose expectation must be <= 0.
            let mut mean = 0.0;
            let mut m2 = 0.0;
            for i in 0..self.trajectories {
                let d = sim.risk[t + 1][i] - sim.risk[t][i] + eta * sim.grad_sq[t][i]
                    - eta * g * (2.0 * self.c_t(t)).sqrt()
                    - 0.5 * l * g * eta * eta;
                let delta = d - mean;
                mean += delta / (i + 1) as f64;
                m2 += delta * (d - mean);
            }
            let se = (m2 / (n - 1.0)).sqrt() / n.sqrt();
            steps.push(DescentStep {
                t,
                mean,
                std_error: se,
                holds: mean <= 3.0 * se,
            });
        }
        let all_hold = steps.iter().all(|s| s.holds);
        DescentReport { steps, all_hold }
    }

    /// Monte-Carlo check of the accumulation bound
    ///   sum_t eta_t E||grad L||^2 <= L(theta_0) + G sum_t eta_t (sqrt(2 c_t) + L eta_t / 2).
    pub fn check_accumulation(&self) -> AccumulationReport {
        let sim = self.simulate();
        let g = self.variance_bound();
        let l = self.smoothness();
        let n = self.trajectories as f64;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for i in 0..self.trajectories {
            let s: f64 = self
                .eta
                .iter()
                .enumerate()
                .map(|(t, &eta)| eta * sim.grad_sq[t][i])
                .sum();
            let delta = s - mean;
            mean += delta / (i + 1) as f64;
            m2 += delta * (s - mean);
        }
        let se = (m2 / (n - 1.0)).sqrt() / n.sqrt();
        let rhs = self.risk(&vec![0.0; self.dim])
            + g * self
                .eta
                .iter()
                .enumerate()
                .map(|(t, &eta)| eta * ((2.0 * self.c_t(t)).sqrt() + 0.5 * l * eta))
                .sum::<f64>();
        AccumulationReport {
            lhs_mean: mean,
            lhs_std_error: se,
            rhs,
            holds: mean <= rhs + 3.0 * se,
        }
    }
}

struct ProbeTrajectories {
    risk: Vec<Vec<f64>>,
    grad_sq: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
pub struct DescentStep {
    pub t: usize,
    /// Monte-Carlo mean of lhs - rhs (negative means the inequality holds
    /// with margin).
    pub mean: f64,
    pub std_error: f64,
    pub holds: bool,
}

#[derive(Clone, Debug)]
pub struct DescentReport {
    pub steps: Vec<DescentStep>,
    pub all_hold: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct AccumulationReport {
    pub lhs_mean: f64,
    pub lhs_std_error: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Recognized step-size families for the schedule classifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleFamily {
    Constant(f64),
    /// eta_t = scale / (t + 1)
    Harmonic { scale: f64 },
    /// eta_t = scale / sqrt(t + 1)
    InvSqrt { scale: f64 },
    /// eta_t = base * factor^floor(t / period)
    StepDecay { base: f64, factor: f64, period: u32 },
}

impl ScheduleFamily {
    pub fn rate(&self, t: usize) -> f64 {
        match *self {
            ScheduleFamily::Constant(c) => c,
            ScheduleFamily::Harmonic { scale } => scale / (t + 1) as f64,
            ScheduleFamily::InvSqrt { scale } => scale / ((t + 1) as f64).sqrt(),
            ScheduleFamily::StepDecay { base, factor, period } => {
                base * factor.powi((t as u32 / period.max(1)) as i32)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleClass {
    /// Divergent sum with convergent sum of squares.
    RobbinsMonro,
    NotRobbinsMonro,
    /// A finite-horizon schedule (e.g. step decay over a fixed run): neither
    /// condition binds; reported as informational.
    FiniteHorizon,
}

#[derive(Clone, Copy, Debug)]
pub struct ScheduleReport {
    pub sum: f64,
    pub sum_sq: f64,
    pub class: ScheduleClass,
}

/// Partial sums to horizon T plus the analytic classification of the family.
pub fn check_schedule(family: ScheduleFamily, horizon: usize) -> ScheduleReport {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for t in 0..horizon {
        let e = family.rate(t);
        sum += e;
        sum_sq += e * e;
    }
    let class = match family {
        // Harmonic: sum diverges, squares converge.
        ScheduleFamily::Harmonic { .. } => ScheduleClass::RobbinsMonro,
        // Constant: sum of squares diverges.
        ScheduleFamily::Constant(_) => ScheduleClass::NotRobbinsMonro,
        // 1/sqrt(t): the sum of squares is the harmonic series, divergent.
        ScheduleFamily::InvSqrt { .. } => ScheduleClass::NotRobbinsMonro,
        // Step decay with factor < 1 converges in both sums over an infinite
        // horizon only if extended forever; treated as finite-horizon here.
        ScheduleFamily::StepDecay { factor, .. } => {
            if factor >= 1.0 {
                ScheduleClass::NotRobbinsMonro
            } else {
                ScheduleClass::FiniteHorizon
            }
        }
    };
    ScheduleReport { sum, sum_sq, class }
}

#[derive(Clone, Debug)]
pub struct RateSummary {
    /// Running minimum of the (smoothed) squared gradient norm.
    pub running_min: Vec<f64>,
    /// The accumulation bound shape evaluated on the same horizon:
    /// (loss0 + G sum eta (sqrt(2c) + L eta / 2)) / sum eta.
    pub bound: Vec<f64>,
}

/// Aligns a squared-gradient-norm trace with its step sizes and drift trace
/// and reports both the running minimum and the bound series.
pub fn rate_summary(
    grad_sq: &[f64],
    eta: &[f64],
    drift: &[f64],
    smoothness: f64,
    variance_bound: f64,
    loss0: f64,
) -> Result<RateSummary> {
    if grad_sq.len() != eta.len() || grad_sq.len() != drift.len() {
        return Err(Error::shape(
            "rate summary",
            format!("{} aligned entries", grad_sq.len()),
            format!("eta {} / drift {}", eta.len(), drift.len()),
        ));
    }
    let mut running_min = Vec::with_capacity(grad_sq.len());
    let mut bound = Vec::with_capacity(grad_sq.len());
    let mut best = f64::INFINITY;
    let mut sum_eta = 0.0;
    let mut sum_term = 0.0;
    for t in 0..grad_sq.len() {
        best = best.min(grad_sq[t]);
        running_min.push(best);
        sum_eta += eta[t];
        sum_term += eta[t] * ((2.0 * drift[t].max(0.0)).sqrt() + 0.5 * smoothness * eta[t]);
        bound.push((loss0 + variance_bound * sum_term) / sum_eta.max(f64::MIN_POSITIVE));
    }
    Ok(RateSummary { running_min, bound })
}
