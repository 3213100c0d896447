//! Special functions and exact hitting laws.
//!
//! Everything here is deterministic closed-form machinery: the gamma
//! function, the Gauss hypergeometric function 2F1 evaluated two
//! independent ways (power series and Euler integral), the regularized
//! incomplete beta function, and the exact boundary hitting
//! probabilities expressed through them. Target accuracy is 10
//! significant digits so that these values can serve as references for
//! 3-stderr Monte Carlo comparisons.

use crate::error::{Error, Result};
use crate::s_kappa;

/// Lanczos coefficients, g = 7, n = 9.
const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Gamma function via the Lanczos approximation with reflection for x < 1/2.
pub fn gamma_fn(x: f64) -> Result<f64> {
    if x <= 0.0 && x == x.floor() {
        return Err(Error::Domain(format!("gamma pole at {x}")));
    }
    Ok(gamma_unchecked(x))
}

fn gamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * gamma_unchecked(1.0 - x))
    } else {
        let z = x - 1.0;
        let mut acc = LANCZOS[0];
        for (i, c) in LANCZOS.iter().enumerate().skip(1) {
            acc += c / (z + i as f64);
        }
        let t = z + LANCZOS_G + 0.5;
        (2.0 * std::f64::consts::PI).sqrt() * t.powf(z + 0.5) * (-t).exp() * acc
    }
}

pub fn ln_gamma(x: f64) -> Result<f64> {
    if x <= 0.0 {
        return Err(Error::Domain(format!("ln_gamma requires x > 0, got {x}")));
    }
    // Arguments in this crate stay moderate, so going through gamma is safe.
    Ok(gamma_unchecked(x).ln())
}

/// Adaptive Simpson quadrature on [a, b].
pub(crate) fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 52)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_rec(f, a, m, fa, flm, fm, left, tol * 0.5, depth - 1)
            + simpson_rec(f, m, b, fm, frm, fb, right, tol * 0.5, depth - 1)
    }
}

/// Parameters for the Gauss hypergeometric function 2F1(a, b, c; z).
#[derive(Debug, Clone, Copy)]
pub struct HypParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub z: f64,
}

impl HypParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > self.b && self.b > 0.0) {
            return Err(Error::Domain(format!(
                "Euler path requires c > b > 0, got b={}, c={}",
                self.b, self.c
            )));
        }
        if self.z.abs() > 1.0 {
            return Err(Error::Domain(format!("|z| <= 1 required, got {}", self.z)));
        }
        if self.z == 1.0 && self.c - self.a - self.b <= 0.0 {
            return Err(Error::Domain(
                "z = 1 requires c - a - b > 0".to_string(),
            ));
        }
        Ok(())
    }
}

/// 2F1 by its power series. Converges for |z| < 1; used as an
/// independent cross-check for |z| <= 1/2.
pub fn hyp2f1_series(a: f64, b: f64, c: f64, z: f64) -> Result<f64> {
    if z.abs() >= 1.0 {
        return Err(Error::Domain("series requires |z| < 1".to_string()));
    }
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 0..20_000 {
        let nf = n as f64;
        term *= (a + nf) * (b + nf) / ((c + nf) * (nf + 1.0)) * z;
        sum += term;
        if term.abs() <= 1e-17 * sum.abs().max(1e-300) {
            return Ok(sum);
        }
    }
    Err(Error::Numerical("2F1 series did not converge".to_string()))
}

/// 2F1 by Euler's integral representation (requires c > b > 0, z <= 1).
///
/// Endpoint singularities t^(b-1) and (1-t)^(c-b-1) are removed by the
/// substitutions t = s^(1/b) and 1 - t = s^(1/beta); at z = 1 the factor
/// (1-zt)^(-a) merges into the right-endpoint exponent.
pub fn hyp2f1_euler(a: f64, b: f64, c: f64, z: f64) -> Result<f64> {
    let p = HypParams { a, b, c, z };
    p.validate()?;
    let tol = 1e-14;

    // left half: t in (0, 1/2], substitute t = s^(1/b)
    let left = {
        let upper = 0.5f64.powf(b);
        let f = |s: f64| {
            let t = s.powf(1.0 / b);
            (1.0 - t).powf(c - b - 1.0) * (1.0 - z * t).powf(-a)
        };
        integrate(&f, 0.0, upper, tol) / b
    };

    // right half: t in [1/2, 1), substitute 1 - t = s^(1/beta)
    let right = if z == 1.0 {
        let beta = c - a - b;
        let upper = 0.5f64.powf(beta);
        let f = |s: f64| {
            let t = 1.0 - s.powf(1.0 / beta);
            t.powf(b - 1.0)
        };
        integrate(&f, 0.0, upper, tol) / beta
    } else {
        let beta = c - b;
        let upper = 0.5f64.powf(beta);
        let f = |s: f64| {
            let t = 1.0 - s.powf(1.0 / beta);
            t.powf(b - 1.0) * (1.0 - z * t).powf(-a)
        };
        integrate(&f, 0.0, upper, tol) / beta
    };

    let prefactor = gamma_unchecked(c) / (gamma_unchecked(b) * gamma_unchecked(c - b));
    Ok(prefactor * (left + right))
}

/// Gauss hypergeometric function 2F1.
///
/// Dispatches to the power series for small |z| and to the Euler
/// integral otherwise; the two routes agree to 10 significant digits on
/// their overlap and are tested against each other.
pub fn hyp2f1(p: HypParams) -> Result<f64> {
    p.validate()?;
    if p.z == 0.0 {
        return Ok(1.0);
    }
    if p.z.abs() <= 0.5 {
        hyp2f1_series(p.a, p.b, p.c, p.z)
    } else {
        hyp2f1_euler(p.a, p.b, p.c, p.z)
    }
}

/// Regularized incomplete beta function I_x(a, b) via Lentz's continued
/// fraction.
pub fn incomplete_beta_reg(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Domain(format!(
            "incomplete beta requires a, b > 0, got a={a}, b={b}"
        )));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("x must lie in [0, 1], got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front = ln_gamma(a + b)? - ln_gamma(a)? - ln_gamma(b)? + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_cf(a, b, x)? / a)
    } else {
        Ok(1.0 - front * beta_cf(b, a, 1.0 - x)? / b)
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..500 {
        let mf = m as f64;
        let m2 = 2.0 * mf;
        let aa = mf * (b - mf) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + mf) * (qab + mf) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            return Ok(h);
        }
    }
    Err(Error::Numerical(
        "incomplete beta continued fraction did not converge".to_string(),
    ))
}

/// Exact probability that the trace hits the real interval [x, x + eps],
/// valid in the boundary-hitting phase kappa in (4, 8):
///
///   P = 1 - I_{x/(x+eps)}(1 - 4/kappa, 8/kappa - 1)
///
/// The printed Gamma prefactor of the underlying integral is exactly
/// 1/B(1 - 4/kappa, 8/kappa - 1), which collapses it to this form.
pub fn exact_interval_hit_prob(x: f64, eps: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 4.0 && kappa < 8.0) {
        return Err(Error::Domain(format!(
            "interval hit law requires kappa in (4, 8), got {kappa}"
        )));
    }
    if !(x > 0.0 && eps > 0.0) {
        return Err(Error::Domain("x and eps must be positive".to_string()));
    }
    let a = 1.0 - 4.0 / kappa;
    let b = 8.0 / kappa - 1.0;
    Ok(1.0 - incomplete_beta_reg(x / (x + eps), a, b)?)
}

/// Exact probability (eps/x)^{s_kappa} ∧ 1 that a boundary point x lies
/// in C_eps.
pub fn exact_point_prob(x: f64, eps: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0 && kappa < 8.0) {
        return Err(Error::Domain(format!("kappa must lie in (0, 8), got {kappa}")));
    }
    if !(x > 0.0 && eps > 0.0) {
        return Err(Error::Domain("x and eps must be positive".to_string()));
    }
    Ok((eps / x).powf(s_kappa(kappa)).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gamma_basics() {
        assert_relative_eq!(gamma_fn(1.0).unwrap(), 1.0, max_relative = 1e-13);
        assert_relative_eq!(
            gamma_fn(0.5).unwrap(),
            std::f64::consts::PI.sqrt(),
            max_relative = 1e-13
        );
        assert_relative_eq!(gamma_fn(5.0).unwrap(), 24.0, max_relative = 1e-13);
        assert!(gamma_fn(0.0).is_err());
        assert!(gamma_fn(-3.0).is_err());
    }

    #[test]
    fn gamma_duplication_identity() {
        // Gamma(2t) Gamma(1/2) = 2^(2t-1) Gamma(t) Gamma(t+1/2) at t = 0.3
        let theta = 0.3;
        let lhs = gamma_fn(2.0 * theta).unwrap() * gamma_fn(0.5).unwrap();
        let rhs = 2f64.powf(2.0 * theta - 1.0)
            * gamma_fn(theta).unwrap()
            * gamma_fn(theta + 0.5).unwrap();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-10);
    }

    fn kappa_params(kappa: f64, z: f64) -> HypParams {
        HypParams {
            a: 1.0 - 8.0 / kappa,
            b: 4.0 / kappa,
            c: 8.0 / kappa,
            z,
        }
    }

    #[test]
    fn hyp2f1_at_zero_is_one() {
        assert_eq!(hyp2f1(kappa_params(6.0, 0.0)).unwrap(), 1.0);
    }

    #[test]
    fn hyp2f1_at_one_matches_gamma_ratio() {
        for &kappa in &[2.0, 3.0, 4.0, 5.0, 6.0, 7.0] {
            let val = hyp2f1(kappa_params(kappa, 1.0)).unwrap();
            let gr = gamma_fn(8.0 / kappa).unwrap() * gamma_fn(12.0 / kappa - 1.0).unwrap()
                / (gamma_fn(16.0 / kappa - 1.0).unwrap() * gamma_fn(4.0 / kappa).unwrap());
            assert_relative_eq!(val, gr, max_relative = 1e-10);
        }
    }

    #[test]
    fn hyp2f1_dual_method_agreement() {
        // 20-point (kappa, z) grid, series vs Euler integral to 10 digits.
        for &kappa in &[2.0, 3.0, 4.0, 6.0, 7.5] {
            for &z in &[0.05, 0.15, 0.3, 0.45] {
                let p = kappa_params(kappa, z);
                let s = hyp2f1_series(p.a, p.b, p.c, p.z).unwrap();
                let e = hyp2f1_euler(p.a, p.b, p.c, p.z).unwrap();
                assert_relative_eq!(s, e, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn hyp2f1_kappa6_mid_argument() {
        let p = kappa_params(6.0, 0.3);
        let s = hyp2f1_series(p.a, p.b, p.c, p.z).unwrap();
        let e = hyp2f1_euler(p.a, p.b, p.c, p.z).unwrap();
        assert_relative_eq!(s, e, max_relative = 1e-10);
    }

    #[test]
    fn hyp2f1_domain_errors() {
        assert!(hyp2f1(HypParams { a: 0.5, b: 2.0, c: 1.0, z: 0.3 }).is_err());
        assert!(hyp2f1(HypParams { a: 0.5, b: 0.5, c: 1.0, z: 1.5 }).is_err());
        // z = 1 with c - a - b <= 0
        assert!(hyp2f1(HypParams { a: 1.0, b: 0.5, c: 1.0, z: 1.0 }).is_err());
    }

    #[test]
    fn incomplete_beta_symmetry_and_identity() {
        assert_relative_eq!(
            incomplete_beta_reg(0.5, 1.0 / 3.0, 1.0 / 3.0).unwrap(),
            0.5,
            max_relative = 1e-12
        );
        for &x in &[0.0, 0.1, 0.35, 0.7, 1.0] {
            assert_relative_eq!(
                incomplete_beta_reg(x, 1.0, 1.0).unwrap(),
                x,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn incomplete_beta_vs_quadrature_oracle() {
        // Direct quadrature of the defining integral with the t = s^(1/a)
        // substitution removing the left-endpoint singularity.
        let a = 1.0 / 3.0;
        let b = 1.0 / 3.0;
        let x: f64 = 0.8;
        let f = |s: f64| (1.0 - s.powf(1.0 / a)).powf(b - 1.0);
        let raw = integrate(&f, 0.0, x.powf(a), 1e-14) / a;
        let beta = gamma_fn(a).unwrap() * gamma_fn(b).unwrap() / gamma_fn(a + b).unwrap();
        let oracle = raw / beta;
        assert_relative_eq!(
            incomplete_beta_reg(x, a, b).unwrap(),
            oracle,
            max_relative = 1e-10
        );
    }

    #[test]
    fn interval_hit_symmetry_case() {
        // kappa = 6: a = b = 1/3 and x/(x+eps) = 1/2, so the value is 1/2.
        assert_relative_eq!(
            exact_interval_hit_prob(1.0, 1.0, 6.0).unwrap(),
            0.5,
            max_relative = 1e-12
        );
    }

    #[test]
    fn interval_hit_matches_printed_formula() {
        // Independent evaluation of the hitting law as printed, with its
        // 4^((kappa-4)/kappa) sqrt(pi) / (Gamma(2-4/kappa) Gamma(4/kappa-1/2))
        // prefactor and the 2F1(1-4/kappa, 2-8/kappa, 2-4/kappa; 1/q) factor.
        for &(x, eps, kappa) in &[(1.5, 0.25, 5.0), (1.0, 0.5, 6.0), (1.2, 0.1, 7.0)] {
            let q: f64 = (x + eps) / x;
            let f = hyp2f1(HypParams {
                a: 1.0 - 4.0 / kappa,
                b: 2.0 - 8.0 / kappa,
                c: 2.0 - 4.0 / kappa,
                z: 1.0 / q,
            })
            .unwrap();
            let printed = 1.0
                - 4f64.powf((kappa - 4.0) / kappa) * std::f64::consts::PI.sqrt() * f
                    * q.powf((4.0 - kappa) / kappa)
                    / (gamma_fn(2.0 - 4.0 / kappa).unwrap()
                        * gamma_fn(4.0 / kappa - 0.5).unwrap());
            let ours = exact_interval_hit_prob(x, eps, kappa).unwrap();
            assert_relative_eq!(ours, printed, max_relative = 1e-10);
        }
    }

    #[test]
    fn interval_hit_monotonicity() {
        let mut prev = 0.0;
        for &eps in &[0.01, 0.05, 0.1, 0.3, 0.8] {
            let v = exact_interval_hit_prob(1.0, eps, 6.0).unwrap();
            assert!(v > prev);
            prev = v;
        }
        let mut prev = 1.0;
        for &x in &[1.0, 1.3, 1.7, 2.5] {
            let v = exact_interval_hit_prob(x, 0.2, 6.0).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn interval_hit_small_eps_ratio_stabilizes() {
        // value / eps^{s_kappa} approaches a constant as eps -> 0.
        let s = s_kappa(6.0);
        let ratios: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&eps| exact_interval_hit_prob(1.0, eps, 6.0).unwrap() / eps.powf(s))
            .collect();
        assert_relative_eq!(ratios[0], ratios[1], max_relative = 0.02);
        assert_relative_eq!(ratios[1], ratios[2], max_relative = 0.005);
        // boundedness of the ratio over the full eps range, for each kappa
        for &kappa in &[5.0, 6.0, 7.0] {
            let s = s_kappa(kappa);
            let mut lo = f64::INFINITY;
            let mut hi = 0.0f64;
            let mut eps = 0.5;
            while eps >= 1e-4 {
                let r = exact_interval_hit_prob(1.0, eps, kappa).unwrap() / eps.powf(s);
                lo = lo.min(r);
                hi = hi.max(r);
                eps *= 0.5;
            }
            assert!(lo > 0.0 && hi.is_finite());
        }
    }

    #[test]
    fn interval_hit_domain() {
        assert!(exact_interval_hit_prob(1.0, 0.5, 3.0).is_err());
        assert!(exact_interval_hit_prob(1.0, 0.5, 8.0).is_err());
    }

    #[test]
    fn point_prob_cases() {
        assert_eq!(exact_point_prob(1.0, 2.0, 6.0).unwrap(), 1.0);
        assert_relative_eq!(exact_point_prob(2.0, 1.0, 4.0).unwrap(), 0.5);
        assert_relative_eq!(
            exact_point_prob(1.0, 0.1, 2.0).unwrap(),
            1e-3,
            max_relative = 1e-12
        );
    }
}
