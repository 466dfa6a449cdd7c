//! Finite-shot estimation of the block inner products.
//!
//! Each component of an inner product is estimated from `m` ±1 outcomes of a
//! Hadamard test, drawn here as a binomial count on the exact value. The
//! ancilla circuit itself is built by [`crate::qsim::hadamard_test_circuit`].

use rand::Rng;
use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};
use crate::qsim::C64;
use crate::rng;
use crate::rpm::{RpmGradient, RpmModel, ShiftKey, Side};

const TAG_EVAL: u64 = 1;
const TAG_GRAD: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ShotConfig {
    /// Shots per inner-product component; 0 means exact evaluation.
    pub m: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub seed: u64,
    /// Enforce `|λ_i| ≤ 1` and `‖M_k‖ ≤ 1` before estimating.
    pub certify: bool,
}

impl ShotConfig {
    pub fn exact() -> Self {
        Self {
            m: 0,
            epsilon: 0.1,
            delta: 0.05,
            seed: 0,
            certify: false,
        }
    }

    pub fn new(m: u64, epsilon: f64, delta: f64, seed: u64) -> Result<Self> {
        let cfg = Self {
            m,
            epsilon,
            delta,
            seed,
            certify: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Domain(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Domain(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }

    pub fn is_exact(&self) -> bool {
        self.m == 0
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoisyEstimate {
    pub value: C64,
    pub shots_used: u64,
}

/// `⌈4K²L/(εδ)⌉`.
pub fn required_shots(k: usize, l: usize, epsilon: f64, delta: f64) -> Result<u64> {
    if k == 0 || l == 0 {
        return Err(Error::Domain("K and L must be at least 1".into()));
    }
    if !(epsilon > 0.0) || !(delta > 0.0) {
        return Err(Error::Domain(format!(
            "epsilon and delta must be positive, got {epsilon} and {delta}"
        )));
    }
    let exact = 4.0 * (k * k) as f64 * l as f64 / (epsilon * delta);
    // guard against 32000.000000000004 style rounding
    let rounded = exact.round();
    let m = if (exact - rounded).abs() <= 1e-9 * rounded.max(1.0) {
        rounded
    } else {
        exact.ceil()
    };
    Ok(m as u64)
}

fn sample_component<R: Rng>(v: f64, m: u64, rng: &mut R) -> Result<f64> {
    if v.abs() > 1.0 + 1e-12 || v.is_nan() {
        return Err(Error::Domain(format!("component {v} outside [-1, 1]")));
    }
    let p = ((1.0 + v) / 2.0).clamp(0.0, 1.0);
    let plus = Binomial::new(m, p)
        .map_err(|e| Error::Domain(e.to_string()))?
        .sample(rng);
    Ok((2.0 * plus as f64 - m as f64) / m as f64)
}

/// Estimates `Re` and `Im` of `true_value` from `m` shots each. `m = 0`
/// returns the value unchanged.
pub fn sample_inner<R: Rng>(true_value: C64, m: u64, rng: &mut R) -> Result<NoisyEstimate> {
    if m == 0 {
        return Ok(NoisyEstimate {
            value: true_value,
            shots_used: 0,
        });
    }
    let re = sample_component(true_value.re, m, rng)?;
    let im = sample_component(true_value.im, m, rng)?;
    Ok(NoisyEstimate {
        value: C64::new(re, im),
        shots_used: 2 * m,
    })
}

fn certify(model: &RpmModel) -> Result<()> {
    if let Some((i, l)) = model.lambda().iter().enumerate().find(|(_, l)| l.norm() > 1.0) {
        return Err(Error::Certification(format!("|lambda_{i}| = {} exceeds 1", l.norm())));
    }
    if let Some(o) = model.local_observables().iter().find(|o| o.operator_norm() > 1.0 + 1e-12) {
        return Err(Error::Certification(format!(
            "block observable norm {} exceeds 1",
            o.operator_norm()
        )));
    }
    Ok(())
}

/// `Σ_i λ_i Π_k X_{i,k}` with every inner product replaced by its estimate.
pub fn rpm_eval_shots(model: &RpmModel, x: &[f64], cfg: &ShotConfig) -> Result<NoisyEstimate> {
    if cfg.certify {
        cfg.validate()?;
        certify(model)?;
    }
    let ips = model.inner_products(x)?;
    let mut total = C64::new(0.0, 0.0);
    let mut shots = 0;
    for (i, (lambda, row)) in model.lambda().iter().zip(&ips).enumerate() {
        let mut prod = *lambda;
        for (k, v) in row.iter().enumerate() {
            let mut r = rng::stream(cfg.seed, &[TAG_EVAL, i as u64, k as u64]);
            let est = sample_inner(*v, cfg.m, &mut r)?;
            shots += est.shots_used;
            prod *= est.value;
        }
        total += prod;
    }
    Ok(NoisyEstimate {
        value: total,
        shots_used: shots,
    })
}

/// Parameter-shift gradient with every inner product estimated from shots.
pub fn rpm_gradient_shots(
    model: &RpmModel,
    x: &[f64],
    upstream: f64,
    cfg: &ShotConfig,
) -> Result<(RpmGradient, C64)> {
    if cfg.certify {
        cfg.validate()?;
        certify(model)?;
    }
    model.gradient_parameter_shift_with(x, upstream, &mut |key: ShiftKey, v| {
        let (side, gate, sign) = match key.shift {
            None => (0, 0, 0),
            Some((s, g, sign)) => (
                if s == Side::Ket { 1 } else { 2 },
                g as u64,
                if sign > 0 { 1 } else { 2 },
            ),
        };
        let mut r = rng::stream(
            cfg.seed,
            &[TAG_GRAD, key.term as u64, key.block as u64, side, gate, sign],
        );
        Ok(sample_inner(v, cfg.m, &mut r)?.value)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{build_hea, PartitionSpec, Topology};
    use crate::qsim::Observable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shot_formula() {
        assert_eq!(required_shots(2, 10, 0.1, 0.05).unwrap(), 32000);
        assert_eq!(required_shots(1, 1, 4.0, 1.0).unwrap(), 1);
        assert_eq!(required_shots(2, 4, 0.2, 0.1).unwrap(), 3200);
        assert!(matches!(required_shots(1, 1, 0.0, 0.1), Err(Error::Domain(_))));
        assert!(matches!(required_shots(1, 1, 0.1, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn degenerate_and_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for m in [1, 7, 1000] {
            let e = sample_inner(C64::new(1.0, 0.0), m, &mut rng).unwrap();
            assert_eq!(e.value.re, 1.0);
            assert_eq!(e.shots_used, 2 * m);
        }
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| sample_inner(C64::new(0.0, 0.0), 100, &mut rng).unwrap().value.re)
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() <= 0.005, "{mean}");
        assert!(sample_inner(C64::new(1.5, 0.0), 10, &mut rng).is_err());
    }

    #[test]
    fn single_shot_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 40_000;
        let plus = (0..n)
            .filter(|_| sample_inner(C64::new(0.5, 0.0), 1, &mut rng).unwrap().value.re > 0.0)
            .count();
        let p = plus as f64 / n as f64;
        assert!((p - 0.75).abs() < 4.0 * (0.75f64 * 0.25 / n as f64).sqrt());
    }

    fn toy() -> RpmModel {
        let c = build_hea(4, 1, Topology::Line).unwrap();
        let p = PartitionSpec::new(vec![vec![0, 1], vec![2, 3]]).unwrap();
        let o = Observable::z_string(4, &[0, 3]).unwrap();
        let mut m = RpmModel::new(&c, &p, &o, 4).unwrap();
        m.init_random(&mut ChaCha8Rng::seed_from_u64(3));
        m.set_lambda_real(&[0.9, -0.4, 0.7, -1.0]).unwrap();
        m
    }

    #[test]
    fn exact_mode_and_determinism() {
        let m = toy();
        let x = [0.1, 0.2, 0.3, 0.4];
        let exact = rpm_eval_shots(&m, &x, &ShotConfig::exact()).unwrap();
        assert_eq!(exact.value, m.eval(&x).unwrap());
        let cfg = ShotConfig::new(500, 0.1, 0.1, 42).unwrap();
        let a = rpm_eval_shots(&m, &x, &cfg).unwrap();
        let b = rpm_eval_shots(&m, &x, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shots_used, 2 * 500 * 8);
        assert_ne!(a.value, rpm_eval_shots(&m, &x, &cfg.with_seed(43)).unwrap().value);
    }

    #[test]
    fn certification_rejects_large_lambda() {
        let mut m = toy();
        m.set_lambda_real(&[1.5, 0.0, 0.0, 0.0]).unwrap();
        let mut cfg = ShotConfig::new(10, 0.1, 0.1, 0).unwrap();
        assert!(rpm_eval_shots(&m, &[0.0; 4], &cfg).is_ok());
        cfg.certify = true;
        assert!(matches!(
            rpm_eval_shots(&m, &[0.0; 4], &cfg),
            Err(Error::Certification(_))
        ));
    }

    #[test]
    fn shot_gradient_exact_limit_and_noise() {
        let m = toy();
        let x = [0.5, 0.1, 0.9, 0.3];
        let (exact, _) = m.gradient_with_value(&x, 1.0, crate::rpm::GradientMethod::Adjoint).unwrap();
        let (g0, _) = rpm_gradient_shots(&m, &x, 1.0, &ShotConfig::exact()).unwrap();
        let mut d = g0.clone();
        d.add_scaled(&exact, -1.0);
        assert!(d.max_abs() < 1e-10);
        let cfg = ShotConfig::new(200_000, 0.1, 0.1, 5).unwrap();
        let (g, _) = rpm_gradient_shots(&m, &x, 1.0, &cfg).unwrap();
        let mut d = g.clone();
        d.add_scaled(&exact, -1.0);
        assert!(d.max_abs() < 0.05, "{}", d.max_abs());
    }
}
