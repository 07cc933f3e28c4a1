//! Monte Carlo checks of the bubble-fill estimators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::engine::{run_iteration, Extra, IterationOptions};
use crate::pipeline::fill::plan_bubble_fill;
use crate::pipeline::toy::LinearToy;
use crate::pipeline::weights::WeightSchedule;

pub const MIN_TRIALS: usize = 100_000;

/// Jointly Gaussian per-sample gradient pieces `(a, b)`: `a` is the part an
/// extra sample contributes to, `b` the part it does not.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PairSpec {
    pub mean_a: f64,
    pub mean_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub cov: f64,
}

impl PairSpec {
    pub fn unit_independent() -> Self {
        PairSpec { mean_a: 1.0, mean_b: -0.5, var_a: 1.0, var_b: 1.0, cov: 0.0 }
    }

    pub fn with_cov(mut self, cov: f64) -> Self {
        self.cov = cov;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.var_a > 0.0) || !(self.var_b > 0.0) {
            return Err(Error::Distribution("variances must be positive".into()));
        }
        if self.cov * self.cov > self.var_a * self.var_b * (1.0 + 1e-12) {
            return Err(Error::Distribution("covariance exceeds the Cauchy-Schwarz bound".into()));
        }
        Ok(())
    }

    /// `var(ê) − var(ê₊) = (var a + 2 cov) / (N (N+1))`.
    pub fn predicted_difference(&self, n: usize) -> f64 {
        let nn = (n * (n + 1)) as f64;
        self.var_a / nn + 2.0 * self.cov / nn
    }
}

/// An estimate with its Monte Carlo standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    /// `|value − target| ≤ k·se`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.se
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EstimatorStats {
    pub trials: usize,
    pub n: usize,
    pub bias: Estimate,
    pub bias_plus: Estimate,
    pub var: f64,
    pub var_plus: f64,
    pub difference: Estimate,
    pub predicted: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Draws `trials` batches of `N` pairs plus one extra `a`, and compares
/// `ê = â_N + b̂_N` with `ê₊ = â_{N+1} + b̂_N`.
pub fn estimator_stats(trials: usize, n: usize, spec: PairSpec, seed: u64) -> Result<EstimatorStats> {
    spec.validate()?;
    if trials < MIN_TRIALS {
        return Err(Error::Distribution(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    if n == 0 {
        return Err(Error::Distribution("N must be positive".into()));
    }
    let (sa, sb) = (spec.var_a.sqrt(), spec.var_b.sqrt());
    let rho = (spec.cov / (sa * sb)).clamp(-1.0, 1.0);
    let tail = (1.0 - rho * rho).max(0.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = |rng: &mut ChaCha8Rng| {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        (spec.mean_a + sa * z1, spec.mean_b + sb * (rho * z1 + tail * z2))
    };
    let mut e = Vec::with_capacity(trials);
    let mut ep = Vec::with_capacity(trials);
    for _ in 0..trials {
        let (mut sum_a, mut sum_b) = (0.0, 0.0);
        for _ in 0..n {
            let (a, b) = pair(&mut rng);
            sum_a += a;
            sum_b += b;
        }
        let (extra, _) = pair(&mut rng);
        e.push(sum_a / n as f64 + sum_b / n as f64);
        ep.push((sum_a + extra) / (n + 1) as f64 + sum_b / n as f64);
    }
    let truth = spec.mean_a + spec.mean_b;
    let t = trials as f64;
    let (m, sd) = mean_sd(&e);
    let (mp, sdp) = mean_sd(&ep);
    // Paired squared deviations give the standard error of the variance gap.
    let gaps: Vec<f64> = e.iter().zip(&ep).map(|(x, y)| (x - m).powi(2) - (y - mp).powi(2)).collect();
    let (gap, gap_sd) = mean_sd(&gaps);
    Ok(EstimatorStats {
        trials,
        n,
        bias: Estimate { value: m - truth, se: sd / t.sqrt() },
        bias_plus: Estimate { value: mp - truth, se: sdp / t.sqrt() },
        var: sd * sd,
        var_plus: sdp * sdp,
        difference: Estimate { value: gap, se: gap_sd / t.sqrt() },
        predicted: spec.predicted_difference(n),
    })
}

/// Per-stage outcome of the end-to-end fill experiment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageFillStats {
    pub stage: usize,
    /// Largest `|mean(filled − plain)| / se` over the stage's coordinates.
    pub max_z: f64,
    /// Summed per-coordinate variances of the two estimators.
    pub var_plain: f64,
    pub var_filled: f64,
    /// Whether any inserted microbatch touches this stage's gradient.
    pub affected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FillExperiment {
    pub stages: usize,
    pub microbatches: usize,
    pub f_over_b: f64,
    pub iterations: usize,
    pub rescale: bool,
    pub per_stage: Vec<StageFillStats>,
}

impl FillExperiment {
    /// Unbiased within `k` standard errors on every stage.
    pub fn unbiased(&self, k: f64) -> bool {
        self.per_stage.iter().all(|s| s.max_z <= k)
    }

    pub fn variance_reduced_on_affected(&self) -> bool {
        self.per_stage.iter().filter(|s| s.affected).all(|s| s.var_filled < s.var_plain)
    }
}

/// Runs plain and filled 1F1B iterations on the same regular microbatches
/// of a linear-Gaussian toy model and compares the accumulated gradients.
/// Early exits sit on stages 1 and 2, so both fill parts are active.
pub fn fill_experiment(stages: usize, microbatches: usize, f_over_b: f64, iterations: usize, rescale: bool, seed: u64) -> Result<FillExperiment> {
    let exit_stages: Vec<usize> = (1..stages.min(3)).collect();
    let toy = LinearToy::new(stages, 2, &exit_stages, 0.0)?;
    let plan = plan_bubble_fill(stages, f_over_b)?;
    let weights = WeightSchedule::constant(vec![1.0; exit_stages.len() + 1]);
    let plain_opts = IterationOptions::new(weights.clone());
    let mut fill_opts = IterationOptions::new(weights).with_fill(plan.clone());
    fill_opts.rescale_fill = rescale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = toy.params().keys().cloned().collect();
    let dim = toy.dim();
    // per stage, per coordinate: samples of plain and filled
    let mut plain = vec![vec![Vec::with_capacity(iterations); dim]; stages];
    let mut filled = vec![vec![Vec::with_capacity(iterations); dim]; stages];
    let mut resolved = None;
    for _ in 0..iterations {
        let micro: Vec<_> = (0..microbatches).map(|_| toy.sample(&mut rng)).collect();
        let p1: Vec<_> = (0..plan.k_part1).map(|_| toy.sample(&mut rng)).collect();
        let p2: Vec<_> = (0..plan.k_part2).map(|_| toy.sample(&mut rng)).collect();
        let a = run_iteration(&toy, &micro, &Extra::default(), &plain_opts)?;
        let b = run_iteration(&toy, &micro, &Extra { part1: &p1, part2: &p2 }, &fill_opts)?;
        for (j, name) in names.iter().enumerate() {
            for c in 0..dim {
                plain[j][c].push(a.grads[name].data()[c]);
                filled[j][c].push(b.grads[name].data()[c]);
            }
        }
        resolved = Some(b.fill);
    }
    let fill = resolved.unwrap_or_default();
    let t = iterations as f64;
    let per_stage = (0..stages)
        .map(|j| {
            let mut max_z: f64 = 0.0;
            let (mut vp, mut vf) = (0.0, 0.0);
            for c in 0..dim {
                let diff: Vec<f64> = filled[j][c].iter().zip(&plain[j][c]).map(|(f, p)| f - p).collect();
                let (md, sd) = mean_sd(&diff);
                let z = if sd == 0.0 { if md == 0.0 { 0.0 } else { f64::INFINITY } } else { md.abs() / (sd / t.sqrt()) };
                max_z = max_z.max(z);
                vp += mean_sd(&plain[j][c]).1.powi(2);
                vf += mean_sd(&filled[j][c]).1.powi(2);
            }
            let stage = j + 1;
            let affected = fill.part1_cover(stage) > 0 || fill.part2_cover(stage, stages) > 0;
            StageFillStats { stage, max_z, var_plain: vp, var_filled: vf, affected }
        })
        .collect();
    Ok(FillExperiment { stages, microbatches, f_over_b, iterations, rescale, per_stage })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predicted_difference_closed_forms() {
        assert!((PairSpec::unit_independent().predicted_difference(4) - 0.05).abs() < 1e-15);
        let s = PairSpec::unit_independent().with_cov(-0.5);
        assert_eq!(s.predicted_difference(7), 0.0);
        assert!(PairSpec::unit_independent().with_cov(-1.0).predicted_difference(4) < 0.0);
    }

    #[test]
    fn degenerate_specs_rejected() {
        let bad = PairSpec { var_a: 0.0, ..PairSpec::unit_independent() };
        assert!(estimator_stats(MIN_TRIALS, 4, bad, 0).is_err());
        let bad = PairSpec::unit_independent().with_cov(2.0);
        assert!(estimator_stats(MIN_TRIALS, 4, bad, 0).is_err());
        assert!(estimator_stats(10, 4, PairSpec::unit_independent(), 0).is_err());
    }

    #[test]
    fn monte_carlo_matches_independent_case() {
        let s = estimator_stats(MIN_TRIALS, 4, PairSpec::unit_independent(), 11).unwrap();
        assert!(s.bias.within(0.0, 3.0) && s.bias_plus.within(0.0, 3.0));
        assert!(s.difference.within(s.predicted, 3.0), "{s:?}");
    }
}
