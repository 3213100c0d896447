//! Monte Carlo harness: accumulators, experiment orchestration, exponent
//! regression, dimension and energy estimation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::observables::{run_c_eps_trial, run_interval_trial, AdaptiveProfile, MultiTrial};
use crate::specfun::{exact_interval_hit_prob, exact_point_prob};
use crate::{criterion::BoundaryFunction, s_kappa};

/// Streaming mean/variance accumulator with associative merge, so shards
/// produced by parallel runs combine in any grouping.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EstimatorAccumulator {
    pub n: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl EstimatorAccumulator {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    pub fn merge(self, other: Self) -> Self {
        EstimatorAccumulator {
            n: self.n + other.n,
            sum: self.sum + other.sum,
            sum_sq: self.sum_sq + other.sum_sq,
        }
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    pub fn stderr(&self) -> f64 {
        let n = self.n as f64;
        let var = (self.sum_sq / n - (self.sum / n).powi(2)).max(0.0);
        (var / n).sqrt()
    }
}

/// Fold per-run values in run-index order regardless of scheduling, so
/// results are bit-identical across thread counts.
pub fn accumulate_runs<F>(n_runs: u64, per_run: F) -> Result<EstimatorAccumulator>
where
    F: Fn(u64) -> Result<f64> + Sync,
{
    let vals: Vec<Result<f64>> = (0..n_runs).into_par_iter().map(&per_run).collect();
    let mut acc = EstimatorAccumulator::default();
    for v in vals {
        acc.push(v?);
    }
    Ok(acc)
}

/// What a single experiment runs and how.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub kappa: f64,
    pub n_runs: u64,
    pub seed: u64,
    /// uniform step for time-grid experiments (interval hit, dimension)
    pub dt: f64,
    pub t_max: f64,
    /// relative step for scale-adaptive threshold trials
    pub lambda: f64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs < 100 {
            return Err(Error::Parameter(format!(
                "n_runs must be at least 100, got {}",
                self.n_runs
            )));
        }
        if !(self.kappa > 0.0 && self.kappa < 8.0) {
            return Err(Error::Parameter(format!("kappa out of (0,8): {}", self.kappa)));
        }
        if !(self.dt > 0.0 && self.t_max > 0.0 && self.lambda > 0.0) {
            return Err(Error::Parameter("dt, t_max, lambda must be positive".to_string()));
        }
        Ok(())
    }

    pub fn profile(&self) -> AdaptiveProfile {
        AdaptiveProfile {
            lambda: self.lambda,
            ..AdaptiveProfile::default()
        }
    }

}

#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub exact: f64,
    pub n: u64,
}

/// Empirical P(x in C_eps) against the closed form (eps/x)^s ^ 1.
pub fn estimate_point_prob(spec: &ExperimentSpec, x: f64, eps: f64) -> Result<Estimate> {
    spec.validate()?;
    let profile = spec.profile();
    let acc = accumulate_runs(spec.n_runs, |run| {
        let out = run_c_eps_trial(spec.kappa, spec.seed, run, x, eps, &profile)?;
        Ok(out.is_hit() as u64 as f64)
    })?;
    Ok(Estimate {
        value: acc.mean(),
        stderr: acc.stderr(),
        exact: exact_point_prob(x, eps, spec.kappa)?,
        n: acc.n,
    })
}

/// Empirical joint P(x in C_ex, y in C_ey) from shared driving.
pub fn estimate_pair_prob(
    spec: &ExperimentSpec,
    x: f64,
    y: f64,
    eps_x: f64,
    eps_y: f64,
) -> Result<Estimate> {
    spec.validate()?;
    let profile = spec.profile();
    let acc = accumulate_runs(spec.n_runs, |run| {
        let mut trial = MultiTrial::new(
            spec.kappa,
            spec.seed,
            run,
            &[(x, eps_x), (y, eps_y)],
            &profile,
        )?;
        let hits = trial.run_to_completion()?;
        Ok((hits[0] && hits[1]) as u64 as f64)
    })?;
    let s = s_kappa(spec.kappa);
    // paper's two-point upper bound without its constant
    let bound_shape = (eps_x * eps_y).powf(s) * x.powf(-s) * (y - x).powf(-s);
    Ok(Estimate {
        value: acc.mean(),
        stderr: acc.stderr(),
        exact: bound_shape,
        n: acc.n,
    })
}

/// Empirical P(trace visits (x, x+eps)), decided per run by the
/// endpoint-separation diffusion, against the incomplete-beta closed
/// form.
pub fn estimate_interval_hit(spec: &ExperimentSpec, x: f64, eps: f64) -> Result<Estimate> {
    spec.validate()?;
    if !(spec.kappa > 4.0) {
        return Err(Error::Domain(
            "interval hits require kappa in (4,8)".to_string(),
        ));
    }
    let profile = spec.profile();
    let acc = accumulate_runs(spec.n_runs, |run| {
        let hit = run_interval_trial(spec.kappa, spec.seed, run, x, eps, &profile)?;
        Ok(hit as u64 as f64)
    })?;
    Ok(Estimate {
        value: acc.mean(),
        stderr: acc.stderr(),
        exact: exact_interval_hit_prob(x, eps, spec.kappa)?,
        n: acc.n,
    })
}

/// Slope and its standard error from OLS of y on x.
pub fn ols_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::Parameter(
            "regression needs at least 3 matched points".to_string(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut ss_res = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let r = y - (intercept + slope * x);
        ss_res += r * r;
    }
    let dof = (xs.len() - 2).max(1) as f64;
    let se = (ss_res / dof / sxx).sqrt();
    Ok((slope, se, intercept))
}

/// Maximum-likelihood exponent for a power law p(eps) = C eps^m observed
/// through hit counts k_i ~ Poisson(n_i * C * eps_i^m). Unlike a log-log
/// OLS this stays unbiased when counts are small and uses zero-count
/// levels. Returns the exponent and its Fisher standard error.
pub fn power_law_mle(levels: &[(f64, u64, u64)]) -> Result<(f64, f64)> {
    if levels.len() < 2 {
        return Err(Error::Parameter(
            "power-law fit needs at least 2 levels".to_string(),
        ));
    }
    let total_hits: u64 = levels.iter().map(|&(_, k, _)| k).sum();
    if total_hits == 0 {
        return Err(Error::Numerical(
            "no hits at any level; cannot fit a power law".to_string(),
        ));
    }
    if levels.iter().filter(|&&(_, k, _)| k > 0).count() < 2 && levels.len() < 3 {
        return Err(Error::Numerical(
            "too few informative levels for a power-law fit".to_string(),
        ));
    }
    let lhs: f64 = levels
        .iter()
        .map(|&(e, k, _)| k as f64 * e.ln())
        .sum::<f64>()
        / total_hits as f64;
    // weighted mean of ln(eps) under weights n_i eps_i^m; increasing in m
    let weighted_mean = |m: f64| -> f64 {
        let sw: f64 = levels.iter().map(|&(e, _, n)| n as f64 * e.powf(m)).sum();
        levels
            .iter()
            .map(|&(e, _, n)| n as f64 * e.powf(m) * e.ln())
            .sum::<f64>()
            / sw
    };
    let (mut lo, mut hi) = (-30.0_f64, 30.0_f64);
    if weighted_mean(lo) > lhs || weighted_mean(hi) < lhs {
        return Err(Error::Numerical(
            "power-law exponent outside the search bracket".to_string(),
        ));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if weighted_mean(mid) < lhs {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let m = 0.5 * (lo + hi);
    let mu = weighted_mean(m);
    let var: f64 = {
        let sw: f64 = levels.iter().map(|&(e, _, n)| n as f64 * e.powf(m)).sum();
        levels
            .iter()
            .map(|&(e, _, n)| n as f64 * e.powf(m) * (e.ln() - mu).powi(2))
            .sum::<f64>()
            / sw
    };
    let se = 1.0 / (total_hits as f64 * var).sqrt();
    Ok((m, se))
}

#[derive(Debug, Clone)]
pub struct StripFit {
    /// per-epsilon hit estimates
    pub rows: Vec<(f64, Estimate)>,
    /// log-log slope and its standard error (kappa < 4)
    pub slope: Option<(f64, f64)>,
    /// P * log(1/eps) values for the kappa = 4 flatness check
    pub scaled: Vec<f64>,
}

/// Estimate P(trace approaches the strip [1,2] within eps) across an
/// epsilon grid via the C_eps proxy on x grid points (spacing eps/2),
/// then fit the decay exponent (kappa < 4) or report the log-scaled
/// values (kappa = 4).
pub fn estimate_strip_hit(spec: &ExperimentSpec, eps_grid: &[f64]) -> Result<StripFit> {
    let grid: Vec<(f64, u64)> = eps_grid.iter().map(|&e| (e, spec.n_runs)).collect();
    estimate_strip_hit_levels(spec, &grid)
}

/// Same as [`estimate_strip_hit`] but with a per-level run budget, so the
/// rarely-hit fine levels can be sampled harder than the coarse ones.
pub fn estimate_strip_hit_levels(spec: &ExperimentSpec, grid: &[(f64, u64)]) -> Result<StripFit> {
    spec.validate()?;
    if spec.kappa > 4.0 {
        return Err(Error::Domain("strip exponent requires kappa <= 4".to_string()));
    }
    for w in grid.windows(2) {
        if w[1].0 >= w[0].0 {
            return Err(Error::Parameter(
                "epsilon grid must be strictly decreasing".to_string(),
            ));
        }
    }
    let profile = spec.profile();
    let mut rows = Vec::new();
    let mut levels = Vec::new();
    for &(eps, n_runs) in grid {
        let n_pts = ((1.0 / (eps / 2.0)).ceil() as usize + 1).max(2);
        let xs: Vec<(f64, f64)> = (0..n_pts)
            .map(|i| (1.0 + i as f64 / (n_pts - 1) as f64, eps))
            .collect();
        let acc = accumulate_runs(n_runs, |run| {
            let mut trial = MultiTrial::new(spec.kappa, spec.seed, run, &xs, &profile)?;
            Ok(trial.run_any_hit()? as u64 as f64)
        })?;
        levels.push((eps, acc.sum.round() as u64, acc.n as u64));
        rows.push((
            eps,
            Estimate {
                value: acc.mean(),
                stderr: acc.stderr(),
                exact: f64::NAN,
                n: acc.n,
            },
        ));
    }
    let (slope, scaled);
    if spec.kappa < 4.0 {
        slope = Some(power_law_mle(&levels)?);
        scaled = vec![];
    } else {
        slope = None;
        scaled = rows
            .iter()
            .map(|(e, est)| est.value * (1.0 / e).ln())
            .collect();
    }
    Ok(StripFit { rows, slope, scaled })
}

#[derive(Debug, Clone, Copy)]
pub struct GraphHit {
    pub estimate: f64,
    pub stderr: f64,
    /// 1 ^ integral of Lambda x^{-s} over [r, x_stop]
    pub integral_clamped: f64,
    pub ratio: f64,
}

/// Estimate P(trace approaches the graph of h beyond x >= r) via the
/// C_{h(x)} proxy on a geometric grid, and compare with the clamped
/// criterion integral.
pub fn estimate_graph_hit(
    spec: &ExperimentSpec,
    h: &BoundaryFunction,
    r: f64,
    x_stop: f64,
) -> Result<GraphHit> {
    spec.validate()?;
    if spec.kappa > 4.0 {
        return Err(Error::Domain("graph hit requires kappa <= 4".to_string()));
    }
    if !(x_stop > r && r >= h.r) {
        return Err(Error::Parameter(format!(
            "need h.r <= r < x_stop, got r = {r}, x_stop = {x_stop}"
        )));
    }
    let mut targets = Vec::new();
    let mut x = r;
    while x < x_stop {
        targets.push((x, h.eval(x)?));
        x *= 1.2;
    }
    let profile = spec.profile();
    let acc = accumulate_runs(spec.n_runs, |run| {
        let mut trial = MultiTrial::new(spec.kappa, spec.seed, run, &targets, &profile)?;
        Ok(trial.run_any_hit()? as u64 as f64)
    })?;
    let s = s_kappa(spec.kappa);
    let quad = crate::observables::QuadGrid::geometric(r, x_stop, 1.01)?;
    let mut integral = 0.0;
    for (&xm, &wq) in quad.nodes.iter().zip(&quad.weights) {
        integral += crate::criterion::lambda_eval(h, spec.kappa, xm)? * xm.powf(-s) * wq;
    }
    let clamped = integral.min(1.0);
    Ok(GraphHit {
        estimate: acc.mean(),
        stderr: acc.stderr(),
        integral_clamped: clamped,
        ratio: acc.mean() / clamped,
    })
}

#[derive(Debug, Clone)]
pub struct DimensionFit {
    pub estimate: f64,
    pub ci: f64,
    /// (log2 scale, mean box count) pairs actually used
    pub counts: Vec<(i32, f64)>,
}

/// Box-counting estimate of the dimension of the trace's intersection
/// with [1,2]: the expected box count E[N(eps)] at scale eps = 2^-k is
/// the sum over the 2^k dyadic boxes of the probability that the trace
/// visits the box, each estimated with `run_interval_trial` from
/// spec.n_runs independent trials, and the dimension is the slope of
/// log E[N(eps)] against log(1/eps). Per-box estimation keeps the
/// discretization error a roughly scale-independent relative factor,
/// which cancels in the slope.
pub fn estimate_dimension(
    spec: &ExperimentSpec,
    scale_min: i32,
    scale_max: i32,
) -> Result<DimensionFit> {
    spec.validate()?;
    if !(spec.kappa > 4.0) {
        return Err(Error::Domain("dimension estimate requires kappa in (4,8)".to_string()));
    }
    if !(0 < scale_min && scale_min < scale_max) {
        return Err(Error::Parameter("need 0 < scale_min < scale_max".to_string()));
    }
    let profile = spec.profile();
    let mut counts = Vec::new();
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    let mut box_index = 0u64;
    for scale in scale_min..=scale_max {
        let n_boxes = 1u64 << scale;
        let eps = 0.5f64.powi(scale);
        let boxes: Vec<u64> = (0..n_boxes).collect();
        let per_box: Vec<Result<f64>> = boxes
            .par_iter()
            .map(|&b| {
                let x = 1.0 + b as f64 * eps;
                let base = (box_index + b) * spec.n_runs;
                let mut hits = 0u64;
                for trial in 0..spec.n_runs {
                    if run_interval_trial(spec.kappa, spec.seed, base + trial, x, eps, &profile)? {
                        hits += 1;
                    }
                }
                Ok(hits as f64 / spec.n_runs as f64)
            })
            .collect();
        box_index += n_boxes;
        let mut mean = 0.0;
        for p in per_box {
            mean += p?;
        }
        counts.push((scale, mean));
        if mean > 0.0 {
            lx.push(scale as f64 * std::f64::consts::LN_2); // log(1/eps)
            ly.push(mean.ln());
        } else {
            eprintln!("warning: no occupied boxes at scale 2^-{scale}; truncating");
        }
    }
    let (slope, se, _) = ols_fit(&lx, &ly)?;
    Ok(DimensionFit {
        estimate: slope,
        ci: 2.0 * se,
        counts,
    })
}

#[derive(Debug, Clone)]
pub struct FrostmanStats {
    pub mean_mass: f64,
    pub mass_stderr: f64,
    pub exact_mean: f64,
    pub mean_energy: f64,
    pub energy_stderr: f64,
}

/// Mass and energy statistics of the random measure built from C_eps
/// indicators on [1,2].
pub fn frostman_stats(
    spec: &ExperimentSpec,
    eps: f64,
    delta: f64,
    grid_n: usize,
) -> Result<FrostmanStats> {
    spec.validate()?;
    let s = s_kappa(spec.kappa);
    if !(spec.kappa > 4.0) {
        return Err(Error::Domain("Frostman statistics require kappa in (4,8)".to_string()));
    }
    if !(delta > 0.0 && delta < 1.0 - s) {
        return Err(Error::Parameter(format!(
            "delta must lie in (0, 1 - s) = (0, {}), got {delta}",
            1.0 - s
        )));
    }
    if grid_n < 4 {
        return Err(Error::Parameter("grid_n must be at least 4".to_string()));
    }
    let dx = 1.0 / grid_n as f64;
    let xs: Vec<(f64, f64)> = (0..grid_n)
        .map(|i| (1.0 + (i as f64 + 0.5) * dx, eps))
        .collect();
    let exponent = 1.0 - s - delta;
    let profile = spec.profile();
    let per_run: Vec<Result<(f64, f64)>> = (0..spec.n_runs)
        .into_par_iter()
        .map(|run| {
            let mut trial = MultiTrial::new(spec.kappa, spec.seed, run, &xs, &profile)?;
            let hits = trial.run_to_completion()?;
            let scale = eps.powf(-s);
            let mass: f64 =
                scale * dx * hits.iter().map(|&h| h as u64 as f64).sum::<f64>();
            let mut energy = 0.0;
            for i in 0..grid_n {
                if !hits[i] {
                    continue;
                }
                for j in 0..grid_n {
                    if i == j || !hits[j] {
                        continue;
                    }
                    let d = (xs[i].0 - xs[j].0).abs();
                    energy += scale * scale * dx * dx / d.powf(exponent);
                }
            }
            Ok((mass, energy))
        })
        .collect();
    let mut mass_acc = EstimatorAccumulator::default();
    let mut energy_acc = EstimatorAccumulator::default();
    for r in per_run {
        let (m, e) = r?;
        mass_acc.push(m);
        energy_acc.push(e);
    }
    // E|mu_eps| = int_1^2 (eps/x)^s eps^{-s} dx = (1-s)^{-1} (2^{1-s} - 1)
    let exact_mean = (2f64.powf(1.0 - s) - 1.0) / (1.0 - s);
    Ok(FrostmanStats {
        mean_mass: mass_acc.mean(),
        mass_stderr: mass_acc.stderr(),
        exact_mean,
        mean_energy: energy_acc.mean(),
        energy_stderr: energy_acc.stderr(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn accumulator_mean_and_stderr() {
        let mut acc = EstimatorAccumulator::default();
        for v in [1.0, 2.0, 3.0, 4.0] {
            acc.push(v);
        }
        assert_relative_eq!(acc.mean(), 2.5);
        // population variance 1.25, stderr = sqrt(1.25/4)
        assert_relative_eq!(acc.stderr(), (1.25f64 / 4.0).sqrt(), max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn accumulator_merge_matches_single_pass(
            values in proptest::collection::vec(-1e3f64..1e3, 1..60),
            split in 0usize..60,
        ) {
            let split = split.min(values.len());
            let mut whole = EstimatorAccumulator::default();
            for &v in &values { whole.push(v); }
            let mut left = EstimatorAccumulator::default();
            let mut right = EstimatorAccumulator::default();
            for &v in &values[..split] { left.push(v); }
            for &v in &values[split..] { right.push(v); }
            let merged = left.merge(right);
            prop_assert_eq!(merged.n, whole.n);
            prop_assert!((merged.sum - whole.sum).abs() <= 1e-9 * (1.0 + whole.sum.abs()));
            prop_assert!((merged.sum_sq - whole.sum_sq).abs() <= 1e-9 * (1.0 + whole.sum_sq.abs()));
        }
    }

    #[test]
    fn ols_recovers_exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 2.0 * x).collect();
        let (slope, se, intercept) = ols_fit(&xs, &ys).unwrap();
        assert_relative_eq!(slope, -2.0, max_relative = 1e-12);
        assert_relative_eq!(intercept, 3.0, max_relative = 1e-12);
        assert!(se < 1e-10);
    }

    fn quick_spec(kappa: f64, n_runs: u64) -> ExperimentSpec {
        ExperimentSpec {
            kappa,
            n_runs,
            seed: 1234,
            dt: 2e-3,
            t_max: 60.0,
            lambda: 0.01,
        }
    }

    #[test]
    fn point_prob_trivial_hit() {
        let spec = quick_spec(6.0, 200);
        let est = estimate_point_prob(&spec, 1.0, 2.0).unwrap();
        assert_eq!(est.value, 1.0);
        assert_eq!(est.exact, 1.0);
    }

    #[test]
    fn point_prob_reproducible() {
        let spec = quick_spec(6.0, 300);
        let a = estimate_point_prob(&spec, 1.0, 0.5).unwrap();
        let b = estimate_point_prob(&spec, 1.0, 0.5).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.stderr, b.stderr);
    }

    #[test]
    fn interval_hit_rejects_small_kappa() {
        let spec = quick_spec(3.0, 200);
        assert!(estimate_interval_hit(&spec, 1.0, 0.5).is_err());
    }

    #[test]
    fn interval_hit_smoke_kappa6() {
        // exact value 1/2 at x = eps = 1; coarse N, loose band
        let mut spec = quick_spec(6.0, 400);
        spec.lambda = 2e-3;
        let est = estimate_interval_hit(&spec, 1.0, 1.0).unwrap();
        assert!(
            (est.value - 0.5).abs() < 0.08,
            "estimate = {}, exact = {}",
            est.value,
            est.exact
        );
        assert_relative_eq!(est.exact, 0.5, max_relative = 1e-10);
    }

    #[test]
    fn strip_hit_requires_decreasing_grid() {
        let spec = quick_spec(2.0, 200);
        assert!(estimate_strip_hit(&spec, &[0.125, 0.25]).is_err());
    }

    #[test]
    fn dimension_rejects_kappa_below_four() {
        let spec = quick_spec(3.0, 200);
        assert!(estimate_dimension(&spec, 2, 5).is_err());
    }

    #[test]
    fn frostman_rejects_bad_delta() {
        let spec = quick_spec(6.0, 200);
        assert!(frostman_stats(&spec, 0.05, 0.9, 16).is_err());
    }
}
