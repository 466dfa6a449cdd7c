//! Self-checks run by `rpm verify`: exact recombination, the CZ identity,
//! inclusion of exact term subsets in the reduced model, gradients against
//! finite differences, the trigonometric spectrum and the shot bound.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::circuit::{bind, build_hea, GateKind, GateSpec, ParamCircuit, ParamSlot, PartitionSpec, Topology, CZ_MAT};
use crate::cutter::{
    decompose_cz, enumerate_terms_with, evaluate_partitioned, evaluate_subset, term_count, CutDecomposition,
    MAX_TERMS,
};
use crate::error::{Error, Result};
use crate::qsim::{expectation, Observable, C64};
use crate::rng;
use crate::rpm::{GradientMethod, RpmGradient, RpmModel};
use crate::shots::{required_shots, rpm_eval_shots, ShotConfig};

pub const RECOMBINATION_TOL: f64 = 1e-9;
pub const CZ_TOL: f64 = 1e-12;
pub const INCLUSION_TOL: f64 = 1e-9;
pub const GRADIENT_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-4;
pub const GTP_TOL: f64 = 1e-8;
pub const UNDERFIT_MIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub seed: u64,
    pub n_circuits: usize,
    /// Forces every recombination circuit to have exactly this many cuts.
    pub budget_r: Option<usize>,
    pub gradient_seeds: usize,
    pub shot_trials: usize,
    /// Corrupts one CZ coefficient to check that the suite notices.
    pub inject_fault: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_circuits: 50,
            budget_r: None,
            gradient_seeds: 10,
            shot_trials: 200,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub worst_error: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl SuiteResult {
    fn new(name: &str, worst_error: f64, tolerance: f64, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            worst_error,
            tolerance,
            detail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

/// Runs every suite. Budget violations surface as `Error::Budget`.
pub fn run_verify(cfg: &VerifyConfig) -> Result<VerifyReport> {
    if let Some(r) = cfg.budget_r {
        let t = term_count(r, 2);
        if t > MAX_TERMS {
            return Err(Error::Budget {
                terms: t,
                limit: MAX_TERMS,
            });
        }
    }
    let suites = vec![
        cz_identity_suite(),
        recombination_suite(cfg)?,
        inclusion_suite(cfg.seed)?,
        gradient_suite(cfg.seed, cfg.gradient_seeds)?,
        spectrum_suite(cfg.seed)?,
        shot_suite(cfg.seed, cfg.shot_trials)?,
    ];
    Ok(VerifyReport {
        passed: suites.iter().all(|s| s.passed),
        suites,
    })
}

pub fn cz_identity_suite() -> SuiteResult {
    let rec = decompose_cz().reconstruct();
    let worst = (0..4)
        .flat_map(|i| (0..4).map(move |j| (i, j)))
        .map(|(i, j)| (rec[i][j] - CZ_MAT[i][j]).norm())
        .fold(0.0, f64::max);
    SuiteResult::new(
        "cz_identity",
        worst,
        CZ_TOL,
        worst <= CZ_TOL,
        "entrywise distance to diag(1,1,1,-1)".into(),
    )
}

/// A random circuit on `n` qubits split into two halves with exactly `r`
/// crossing CZs, plus the split.
pub fn random_cut_circuit<R: Rng>(rng: &mut R, n: usize, r: usize) -> Result<(ParamCircuit, PartitionSpec)> {
    let a = n / 2;
    let part = PartitionSpec::new(vec![(0..a).collect(), (a..n).collect()])?;
    let layers = 2;
    let mut crossing_per_layer = vec![0usize; layers];
    for _ in 0..r {
        crossing_per_layer[rng.random_range(0..layers)] += 1;
    }
    let mut gates = Vec::new();
    let mut t = 0;
    for q in 0..n {
        gates.push(GateSpec::rotation(
            GateKind::Ry,
            q,
            ParamSlot::Data {
                index: q,
                scale: std::f64::consts::PI,
            },
        ));
    }
    for &crossing in &crossing_per_layer {
        for q in 0..n {
            gates.push(GateSpec::rotation(GateKind::Rz, q, ParamSlot::Theta(t)));
            gates.push(GateSpec::rotation(GateKind::Ry, q, ParamSlot::Theta(t + 1)));
            t += 2;
        }
        for (lo, hi) in [(0, a), (a, n)] {
            if hi - lo >= 2 {
                let q = rng.random_range(lo..hi - 1);
                gates.push(GateSpec::fixed(GateKind::CZ, &[q, q + 1]));
            }
        }
        for _ in 0..crossing {
            let (p, q) = (rng.random_range(0..a), rng.random_range(a..n));
            let pair = if rng.random::<bool>() { [p, q] } else { [q, p] };
            gates.push(GateSpec::fixed(GateKind::CZ, &pair));
        }
    }
    Ok((ParamCircuit::new(n, gates)?, part))
}

fn random_z_string<R: Rng>(rng: &mut R, n: usize) -> Result<Observable> {
    let count = rng.random_range(1..=n);
    let mut qubits: Vec<usize> = sample(rng, n, count).into_vec();
    qubits.sort_unstable();
    Observable::z_string(n, &qubits)
}

fn faulty_cz() -> CutDecomposition {
    let mut d = decompose_cz();
    d.terms[1].alpha = -d.terms[1].alpha;
    d
}

pub fn recombination_suite(cfg: &VerifyConfig) -> Result<SuiteResult> {
    let cz = if cfg.inject_fault { faulty_cz() } else { decompose_cz() };
    let mut rng = rng::stream(cfg.seed, &[0x7ec0]);
    let mut worst = 0.0f64;
    let mut max_r = 0;
    for _ in 0..cfg.n_circuits {
        let n = rng.random_range(4..=6);
        let r = cfg.budget_r.unwrap_or_else(|| rng.random_range(0..=3));
        let (circuit, part) = random_cut_circuit(&mut rng, n, r)?;
        let enumeration = enumerate_terms_with(&circuit, &part, &cz)?;
        max_r = max_r.max(enumeration.r());
        let x: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let theta: Vec<f64> = (0..circuit.n_theta())
            .map(|_| rng.random_range(0.0..2.0 * std::f64::consts::PI))
            .collect();
        let obs = random_z_string(&mut rng, n)?;
        let whole = expectation(&bind(&circuit, &x, &theta, &[])?.run()?, &obs)?;
        let err = match evaluate_partitioned(&enumeration, &x, &theta, &obs) {
            Ok(v) => (v - whole).abs(),
            // an imaginary residue means the recombination is wrong
            Err(Error::Domain(_)) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        worst = worst.max(err);
    }
    Ok(SuiteResult::new(
        "recombination",
        worst,
        RECOMBINATION_TOL,
        worst <= RECOMBINATION_TOL,
        format!("{} circuits, up to {max_r} cuts", cfg.n_circuits),
    ))
}

fn four_qubit_instance() -> Result<(ParamCircuit, PartitionSpec, Observable)> {
    Ok((
        build_hea(4, 2, Topology::Line)?,
        PartitionSpec::new(vec![vec![0, 1], vec![2, 3]])?,
        Observable::z_string(4, &[0, 3])?,
    ))
}

pub fn inclusion_suite(seed: u64) -> Result<SuiteResult> {
    let (circuit, part, obs) = four_qubit_instance()?;
    let enumeration = enumerate_terms_with(&circuit, &part, &decompose_cz())?;
    let t = enumeration.n_terms();
    let mut rng = rng::stream(seed, &[0x19c1]);
    let theta: Vec<f64> = (0..circuit.n_theta()).map(|_| rng.random_range(0.0..6.3)).collect();
    let x: Vec<f64> = (0..4).map(|_| rng.random()).collect();
    let mut subsets: Vec<Vec<usize>> = vec![(0..t).collect()];
    subsets.extend((0..4).map(|_| vec![rng.random_range(0..t)]));
    for l in [2, 5, 9] {
        subsets.push(sample(&mut rng, t, l).into_vec());
    }
    let mut worst = 0.0f64;
    for set in &subsets {
        let model = RpmModel::from_subset(&circuit, &enumeration, set, &obs, &theta)?;
        let want = evaluate_subset(&enumeration, &x, &theta, &obs, set)?;
        worst = worst.max((model.eval(&x)? - want).norm());
    }
    Ok(SuiteResult::new(
        "inclusion",
        worst,
        INCLUSION_TOL,
        worst <= INCLUSION_TOL,
        format!("{} subsets of {t} terms on a 4-qubit, 2-block instance", subsets.len()),
    ))
}

/// Central differences of `Re f` over every parameter.
pub fn finite_difference_gradient(model: &RpmModel, x: &[f64], h: f64) -> Result<RpmGradient> {
    let mut g = RpmGradient::zeros(model.theta().len(), model.l(), 2 * model.n_cuts());
    let mut probe = model.clone();
    for t in 0..model.theta().len() {
        let v = model.theta()[t];
        probe.theta_mut()[t] = v + h;
        let up = probe.predict(x)?;
        probe.theta_mut()[t] = v - h;
        let down = probe.predict(x)?;
        probe.theta_mut()[t] = v;
        g.theta[t] = (up - down) / (2.0 * h);
    }
    for i in 0..model.l() {
        for c in 0..2 * model.n_cuts() {
            let v = model.zeta()[i][c];
            probe.zeta_mut()[i][c] = v + h;
            let up = probe.predict(x)?;
            probe.zeta_mut()[i][c] = v - h;
            let down = probe.predict(x)?;
            probe.zeta_mut()[i][c] = v;
            g.zeta[i][c] = (up - down) / (2.0 * h);
        }
        let v = model.lambda()[i].re;
        probe.update_lambda_real(|j, old| if j == i { v + h } else { old });
        let up = probe.predict(x)?;
        probe.update_lambda_real(|j, old| if j == i { v - h } else { old });
        let down = probe.predict(x)?;
        probe.update_lambda_real(|j, old| if j == i { v } else { old });
        g.lambda[i] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn flat(g: &RpmGradient) -> Vec<f64> {
    g.theta
        .iter()
        .chain(g.zeta.iter().flatten())
        .chain(&g.lambda)
        .copied()
        .collect()
}

/// Random 4-qubit, 2-block, `l`-term model with `|λ| ≤ 1`.
pub fn random_small_model(seed: u64, l: usize) -> Result<(RpmModel, Vec<f64>)> {
    let (circuit, part, obs) = four_qubit_instance()?;
    let mut model = RpmModel::new(&circuit, &part, &obs, l)?;
    let mut r = rng::stream(seed, &[0x90de]);
    model.init_random(&mut r);
    let lambda: Vec<f64> = (0..l).map(|_| r.random_range(-1.0..1.0)).collect();
    model.set_lambda_real(&lambda)?;
    let x = (0..4).map(|_| r.random()).collect();
    Ok((model, x))
}

pub fn gradient_suite(seed: u64, n_seeds: usize) -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    let mut n_params = 0;
    for s in 0..n_seeds as u64 {
        let (model, x) = random_small_model(rng::derive_seed(seed, &[s]), 3)?;
        let fd = flat(&finite_difference_gradient(&model, &x, FD_STEP)?);
        let g = flat(&model.gradient(&x, 1.0, GradientMethod::Adjoint)?);
        n_params = g.len();
        for (a, b) in g.iter().zip(&fd) {
            worst = worst.max(relative_error(*a, *b));
        }
    }
    Ok(SuiteResult::new(
        "gradient",
        worst,
        GRADIENT_TOL,
        worst <= GRADIENT_TOL,
        format!("{n_seeds} models with {n_params} parameters, central differences at step {FD_STEP}"),
    ))
}

pub fn spectrum_suite(seed: u64) -> Result<SuiteResult> {
    let (model, x) = random_small_model(rng::derive_seed(seed, &[0x5bec]), 3)?;
    let feature = 1;
    let degree = model.encoding_count(feature);
    let fit = model.spectrum_check(&x, feature, degree, 32)?;
    let under = model.spectrum_check(&x, feature, 0, 32)?;
    let passed = fit.residual <= GTP_TOL && under.residual > UNDERFIT_MIN;
    Ok(SuiteResult::new(
        "gtp_spectrum",
        fit.residual,
        GTP_TOL,
        passed,
        format!(
            "degree-{degree} residual {:.3e}, degree-0 residual {:.3e}",
            fit.residual, under.residual
        ),
    ))
}

/// Outcome of the finite-shot Monte Carlo check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShotCheck {
    pub m: u64,
    pub trials: usize,
    pub failure_fraction: f64,
    pub empirical_mse: f64,
    pub variance_bound: f64,
}

/// Runs `trials` shot estimates of a K = 2, L = 4 model with `|λ| ≤ 1` at
/// the shot count certified for ε = 0.2, δ = 0.1.
pub fn shot_check(seed: u64, trials: usize) -> Result<ShotCheck> {
    let (k, l, eps, delta) = (2, 4, 0.2, 0.1);
    let (model, x) = random_small_model(rng::derive_seed(seed, &[0x5407]), l)?;
    let m = required_shots(k, l, eps, delta)?;
    let exact: C64 = model.eval(&x)?;
    let mut failures = 0;
    let mut sq = 0.0;
    for trial in 0..trials {
        let cfg = ShotConfig {
            m,
            epsilon: eps,
            delta,
            seed: rng::derive_seed(seed, &[0x5408, trial as u64]),
            certify: true,
        };
        let est = rpm_eval_shots(&model, &x, &cfg)?;
        let err = (est.value - exact).norm();
        if err > eps {
            failures += 1;
        }
        sq += err * err;
    }
    Ok(ShotCheck {
        m,
        trials,
        failure_fraction: failures as f64 / trials as f64,
        empirical_mse: sq / trials as f64,
        variance_bound: 4.0 * (k * k * l) as f64 / m as f64,
    })
}

pub fn shot_suite(seed: u64, trials: usize) -> Result<SuiteResult> {
    let c = shot_check(seed, trials)?;
    let passed = c.failure_fraction <= 0.1 && c.empirical_mse <= c.variance_bound;
    Ok(SuiteResult::new(
        "shot_bound",
        c.empirical_mse,
        c.variance_bound,
        passed,
        format!(
            "m = {}, {} trials, failure fraction {:.3} (limit 0.1)",
            c.m, c.trials, c.failure_fraction
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn healthy_build_passes() {
        let cfg = VerifyConfig {
            n_circuits: 10,
            gradient_seeds: 2,
            shot_trials: 50,
            ..VerifyConfig::default()
        };
        let rep = run_verify(&cfg).unwrap();
        for s in &rep.suites {
            assert!(s.passed, "{s:?}");
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let cfg = VerifyConfig {
            n_circuits: 10,
            budget_r: Some(1),
            inject_fault: true,
            ..VerifyConfig::default()
        };
        assert!(!recombination_suite(&cfg).unwrap().passed);
    }

    #[test]
    fn budget_r_too_large() {
        let cfg = VerifyConfig {
            budget_r: Some(13),
            ..VerifyConfig::default()
        };
        assert!(matches!(run_verify(&cfg), Err(Error::Budget { .. })));
    }

    #[test]
    fn random_circuits_have_requested_cuts() {
        let mut r = rng::stream(0, &[1]);
        for cuts in 0..4 {
            let (c, p) = random_cut_circuit(&mut r, 5, cuts).unwrap();
            assert_eq!(crate::circuit::crossing_gates(&c, &p).unwrap().len(), cuts);
        }
    }
}
