//! The reduced partition model.
//!
//! Each block is simulated on its own with a partition gate `Z^ζ·S` at every
//! cut endpoint. A model with `L` terms evaluates
//! `Σ_i λ_i Π_k <0|U^k(ζ_i^bra)† M_k U^k(ζ_i^ket)|0>`, where row `i` of the
//! ζ matrix holds the ket-side angles in columns `0..r` and the bra-side
//! angles in columns `r..2r`.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::{
    derivative_matrix, gate_matrix_at, slot_angle, zpow, GateKind, GateSpec, ParamCircuit, ParamSlot,
    PartitionSpec, Topology,
};
use crate::cutter::{decompose_cz, split_circuit, term_to_rpm_params, CutEnumeration};
use crate::error::{Error, Result};
use crate::qsim::{self, GateMatrix, Mat2, Observable, State, C64, ONE, ZERO};

const SHIFT_SCALE: f64 = 0.25 * std::f64::consts::SQRT_2;

/// Threshold of the binary classification rule.
pub const THRESHOLD: f64 = 0.5;

/// Which side of the inner product a block state sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Ket,
    Bra,
}

/// How [`RpmModel::gradient`] differentiates the block inner products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMethod {
    /// Reverse-mode sweep through each block circuit.
    #[default]
    Adjoint,
    /// Shifted circuit evaluations.
    ParameterShift,
}

/// Hardware-efficient-ansatz metadata kept for checkpoints and reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnsatzInfo {
    pub depth: usize,
    pub topology: Topology,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockProgram {
    circuit: ParamCircuit,
    /// Index of the first gate carrying a ζ slot.
    split: usize,
    /// Cuts whose ζ enter this block, ascending.
    cuts: Vec<usize>,
}

impl BlockProgram {
    fn new(circuit: ParamCircuit) -> Self {
        let gates = circuit.gates();
        let split = gates
            .iter()
            .position(|g| matches!(g.slot, ParamSlot::Zeta(_)))
            .unwrap_or(gates.len());
        let mut cuts: Vec<usize> = gates
            .iter()
            .filter_map(|g| match g.slot {
                ParamSlot::Zeta(c) => Some(c),
                _ => None,
            })
            .collect();
        cuts.sort_unstable();
        cuts.dedup();
        Self { circuit, split, cuts }
    }

    fn key(&self, zeta_side: &[f64]) -> Vec<u64> {
        self.cuts.iter().map(|&c| zeta_side[c].to_bits()).collect()
    }
}

/// Gradient of `Re f` with respect to every parameter group. The λ entries
/// are derivatives with respect to `Re λ_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct RpmGradient {
    pub theta: Vec<f64>,
    pub zeta: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
}

impl RpmGradient {
    pub fn zeros(n_theta: usize, l: usize, zeta_cols: usize) -> Self {
        Self {
            theta: vec![0.0; n_theta],
            zeta: vec![vec![0.0; zeta_cols]; l],
            lambda: vec![0.0; l],
        }
    }

    /// `self += factor · other`.
    pub fn add_scaled(&mut self, other: &RpmGradient, factor: f64) {
        for (a, b) in self.theta.iter_mut().zip(&other.theta) {
            *a += factor * b;
        }
        for (ra, rb) in self.zeta.iter_mut().zip(&other.zeta) {
            for (a, b) in ra.iter_mut().zip(rb) {
                *a += factor * b;
            }
        }
        for (a, b) in self.lambda.iter_mut().zip(&other.lambda) {
            *a += factor * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.theta.iter_mut().for_each(|v| *v *= factor);
        self.zeta.iter_mut().flatten().for_each(|v| *v *= factor);
        self.lambda.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn max_abs(&self) -> f64 {
        self.theta
            .iter()
            .chain(self.zeta.iter().flatten())
            .chain(&self.lambda)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Outcome of a trigonometric-polynomial fit along one feature.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumReport {
    pub feature: usize,
    /// Integer frequencies tested, in the encoding angle `scale·x`.
    pub frequencies: Vec<i64>,
    /// Root-mean-square residual of the least-squares fit.
    pub residual: f64,
    /// Fit coefficients `(re, im)`, one per frequency.
    pub coefficients: Vec<(f64, f64)>,
}

/// The reduced partition model.
#[derive(Clone, Debug, PartialEq)]
pub struct RpmModel {
    parent: ParamCircuit,
    partition: PartitionSpec,
    observable: Observable,
    local_obs: Vec<Observable>,
    blocks: Vec<BlockProgram>,
    n_cuts: usize,
    theta: Vec<f64>,
    zeta: Vec<Vec<f64>>,
    lambda: Vec<C64>,
    ansatz: Option<AnsatzInfo>,
}

/// Block states and inner products of one evaluation.
struct Contraction {
    /// Per block: distinct `(ψ, Mψ)` pairs.
    states: Vec<Vec<(State, State)>>,
    /// `[term][block]` index of the ket and bra state.
    ket: Vec<Vec<usize>>,
    bra: Vec<Vec<usize>>,
    /// `[term][block]` inner products `<ψ_bra|M|ψ_ket>`.
    inner: Vec<Vec<C64>>,
}

/// Gate matrices bound for one `(x, θ)` and the ζ-independent prefix states.
struct Prepared<'a> {
    model: &'a RpmModel,
    bound: Vec<Vec<GateMatrix>>,
    bound_dag: Vec<Vec<GateMatrix>>,
    prefix: Vec<State>,
}

impl<'a> Prepared<'a> {
    fn new(model: &'a RpmModel, x: &[f64]) -> Result<Self> {
        if x.len() != model.parent.n_data() {
            return Err(Error::Shape(format!(
                "feature vector of length {}, model expects {}",
                x.len(),
                model.parent.n_data()
            )));
        }
        let mut bound = Vec::with_capacity(model.blocks.len());
        let mut bound_dag = Vec::with_capacity(model.blocks.len());
        let mut prefix = Vec::with_capacity(model.blocks.len());
        for b in &model.blocks {
            let gates = b.circuit.gates();
            let mats: Vec<GateMatrix> = gates
                .iter()
                .map(|g| match g.slot {
                    ParamSlot::Zeta(_) => GateMatrix::Single {
                        m: zpow(0.0),
                        unitary: true,
                    },
                    slot => gate_matrix_at(g, slot_angle(slot, x, &model.theta, &[])),
                })
                .collect();
            let n = b.circuit.n_qubits();
            let mut state = State::zero(n)?;
            for (g, m) in gates[..b.split].iter().zip(&mats) {
                m.apply_in_place(state.amplitudes_mut(), n, &g.targets);
            }
            bound_dag.push(mats.iter().map(GateMatrix::dagger).collect());
            bound.push(mats);
            prefix.push(state);
        }
        Ok(Self {
            model,
            bound,
            bound_dag,
            prefix,
        })
    }

    /// Block state for one side's ζ values, optionally with gate `shift.0`
    /// evaluated at its angle plus `shift.1`.
    fn run(&self, k: usize, zeta_side: &[f64], shift: Option<(usize, f64)>) -> State {
        let b = &self.model.blocks[k];
        let n = b.circuit.n_qubits();
        let gates = b.circuit.gates();
        let start = match shift {
            Some((g, _)) if g < b.split => 0,
            _ => b.split,
        };
        let mut state = if start == 0 {
            State::zero(n).expect("validated at construction")
        } else {
            self.prefix[k].clone()
        };
        let amps = state.amplitudes_mut();
        for (g, spec) in gates.iter().enumerate().skip(start) {
            match (shift, spec.slot) {
                (Some((s, delta)), _) if s == g => {
                    let angle = self.angle(k, g, zeta_side);
                    gate_matrix_at(spec, angle + delta).apply_in_place(amps, n, &spec.targets);
                }
                (_, ParamSlot::Zeta(c)) => qsim::apply_1q(amps, n, spec.targets[0], &zpow(zeta_side[c])),
                _ => self.bound[k][g].apply_in_place(amps, n, &spec.targets),
            }
        }
        state
    }

    fn angle(&self, k: usize, g: usize, zeta_side: &[f64]) -> f64 {
        let spec = &self.model.blocks[k].circuit.gates()[g];
        match spec.slot {
            ParamSlot::Zeta(c) => zeta_side[c],
            ParamSlot::Theta(t) => self.model.theta[t],
            _ => unreachable!("only trainable slots are shifted"),
        }
    }

    fn contract(&self) -> Result<Contraction> {
        let model = self.model;
        let k_blocks = model.blocks.len();
        let l = model.lambda.len();
        let r = model.n_cuts;
        let mut states: Vec<Vec<(State, State)>> = vec![Vec::new(); k_blocks];
        let mut index: Vec<HashMap<Vec<u64>, usize>> = vec![HashMap::new(); k_blocks];
        let mut ket = vec![vec![0usize; k_blocks]; l];
        let mut bra = vec![vec![0usize; k_blocks]; l];
        let mut inner = vec![vec![ZERO; k_blocks]; l];
        for i in 0..l {
            let (zk, zb) = model.zeta[i].split_at(r);
            for k in 0..k_blocks {
                for (zeta_side, slot) in [(zk, &mut ket[i][k]), (zb, &mut bra[i][k])] {
                    let key = model.blocks[k].key(zeta_side);
                    *slot = match index[k].get(&key) {
                        Some(&j) => j,
                        None => {
                            let psi = self.run(k, zeta_side, None);
                            let m_psi = model.local_obs[k].apply(&psi)?;
                            states[k].push((psi, m_psi));
                            index[k].insert(key, states[k].len() - 1);
                            states[k].len() - 1
                        }
                    };
                }
                let (b, kt) = (bra[i][k], ket[i][k]);
                inner[i][k] = qsim::inner(states[k][b].0.amplitudes(), states[k][kt].1.amplitudes());
            }
        }
        Ok(Contraction {
            states,
            ket,
            bra,
            inner,
        })
    }

    /// Reverse sweep from the end of block `k` down to its prefix boundary.
    /// Accumulates `Re <chi|∂ψ>` into `theta_grad` and `zeta_grad` (one side's
    /// columns) and returns the adjoint vector at the boundary.
    fn sweep(
        &self,
        k: usize,
        zeta_side: &[f64],
        psi: &State,
        chi: Vec<C64>,
        theta_grad: &mut [f64],
        zeta_grad: &mut [f64],
    ) -> Vec<C64> {
        let b = &self.model.blocks[k];
        let n = b.circuit.n_qubits();
        let gates = b.circuit.gates();
        let mut phi = psi.amplitudes().to_vec();
        let mut lam = chi;
        for g in (b.split..gates.len()).rev() {
            let spec = &gates[g];
            let zeta_dag;
            let dag = match spec.slot {
                ParamSlot::Zeta(c) => {
                    zeta_dag = GateMatrix::Single {
                        m: zpow(-zeta_side[c]),
                        unitary: true,
                    };
                    &zeta_dag
                }
                _ => &self.bound_dag[k][g],
            };
            dag.apply_in_place(&mut phi, n, &spec.targets);
            match spec.slot {
                ParamSlot::Theta(t) => {
                    let d = derivative_matrix(spec.kind, self.model.theta[t]);
                    theta_grad[t] += qsim::braket_1q(&lam, &phi, n, spec.targets[0], &d).re;
                }
                ParamSlot::Zeta(c) => {
                    let d = derivative_matrix(GateKind::Zpow, zeta_side[c]);
                    zeta_grad[c] += qsim::braket_1q(&lam, &phi, n, spec.targets[0], &d).re;
                }
                _ => {}
            }
            dag.apply_in_place(&mut lam, n, &spec.targets);
        }
        lam
    }

    /// Reverse sweep through the shared prefix of block `k`.
    fn sweep_prefix(&self, k: usize, lam: Vec<C64>, theta_grad: &mut [f64]) {
        let b = &self.model.blocks[k];
        let n = b.circuit.n_qubits();
        let gates = b.circuit.gates();
        let mut phi = self.prefix[k].amplitudes().to_vec();
        let mut lam = lam;
        for g in (0..b.split).rev() {
            let spec = &gates[g];
            let dag = &self.bound_dag[k][g];
            dag.apply_in_place(&mut phi, n, &spec.targets);
            if let ParamSlot::Theta(t) = spec.slot {
                let d = derivative_matrix(spec.kind, self.model.theta[t]);
                theta_grad[t] += qsim::braket_1q(&lam, &phi, n, spec.targets[0], &d).re;
            }
            if g > 0 {
                dag.apply_in_place(&mut lam, n, &spec.targets);
            }
        }
    }
}

/// Identifies one inner product estimated in a parameter-shift gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ShiftKey {
    pub term: usize,
    pub block: usize,
    /// `None` for the unshifted product, else `(side, gate, +1/-1)`.
    pub shift: Option<(Side, usize, i8)>,
}

impl RpmModel {
    /// Builds an `l`-term model from a parent circuit whose crossing gates
    /// are all CZ. Parameters start at zero with `λ = 1/√l`.
    pub fn new(
        parent: &ParamCircuit,
        partition: &PartitionSpec,
        observable: &Observable,
        l: usize,
    ) -> Result<Self> {
        let (templates, sites) = split_circuit(parent, partition, &decompose_cz())?;
        if let Some(s) = sites.iter().find(|s| s.kind != GateKind::CZ) {
            return Err(Error::Structure(format!(
                "partition gates need CZ cuts, found {:?} at position {}",
                s.kind, s.position
            )));
        }
        let local_obs = observable.split(partition.blocks())?;
        let blocks = templates
            .iter()
            .map(|t| t.with_partition_gates().map(BlockProgram::new))
            .collect::<Result<Vec<_>>>()?;
        for b in &blocks {
            if b.circuit.n_qubits() > qsim::MAX_QUBITS {
                return Err(Error::Size(format!(
                    "block of {} qubits exceeds the simulator limit",
                    b.circuit.n_qubits()
                )));
            }
        }
        let n_cuts = sites.len();
        let scale = if l == 0 { 0.0 } else { 1.0 / (l as f64).sqrt() };
        Ok(Self {
            parent: parent.clone(),
            partition: partition.clone(),
            observable: observable.clone(),
            local_obs,
            blocks,
            n_cuts,
            theta: vec![0.0; parent.n_theta()],
            zeta: vec![vec![0.0; 2 * n_cuts]; l],
            lambda: vec![C64::new(scale, 0.0); l],
            ansatz: None,
        })
    }

    /// Wraps the terms `index_set` of `enumeration` into a model whose
    /// evaluation reproduces their partial sum exactly.
    pub fn from_subset(
        parent: &ParamCircuit,
        enumeration: &CutEnumeration,
        index_set: &[usize],
        observable: &Observable,
        theta: &[f64],
    ) -> Result<Self> {
        let (zeta, lambda) = term_to_rpm_params(enumeration, index_set)?;
        let mut model = Self::new(parent, enumeration.partition(), observable, index_set.len())?;
        if model.n_cuts != enumeration.r() {
            return Err(Error::Structure("enumeration does not match the parent circuit".into()));
        }
        model.set_theta(theta.to_vec())?;
        model.zeta = zeta;
        model.lambda = lambda;
        Ok(model)
    }

    /// θ ~ U[0, 2π), ζ ~ U[0, 1], λ = 1/√L.
    pub fn init_random<R: Rng>(&mut self, rng: &mut R) {
        for t in &mut self.theta {
            *t = rng.random_range(0.0..2.0 * PI);
        }
        for z in self.zeta.iter_mut().flatten() {
            *z = rng.random_range(0.0..=1.0);
        }
        let l = self.lambda.len();
        if l > 0 {
            let v = C64::new(1.0 / (l as f64).sqrt(), 0.0);
            self.lambda.iter_mut().for_each(|x| *x = v);
        }
    }

    pub fn with_ansatz(mut self, info: AnsatzInfo) -> Self {
        self.ansatz = Some(info);
        self
    }

    pub fn ansatz(&self) -> Option<AnsatzInfo> {
        self.ansatz
    }

    pub fn parent(&self) -> &ParamCircuit {
        &self.parent
    }

    pub fn partition(&self) -> &PartitionSpec {
        &self.partition
    }

    pub fn observable(&self) -> &Observable {
        &self.observable
    }

    pub fn local_observables(&self) -> &[Observable] {
        &self.local_obs
    }

    pub fn block_circuit(&self, k: usize) -> &ParamCircuit {
        &self.blocks[k].circuit
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn l(&self) -> usize {
        self.lambda.len()
    }

    pub fn n_cuts(&self) -> usize {
        self.n_cuts
    }

    pub fn n_data(&self) -> usize {
        self.parent.n_data()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn zeta(&self) -> &[Vec<f64>] {
        &self.zeta
    }

    pub fn lambda(&self) -> &[C64] {
        &self.lambda
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::Shape(format!(
                "theta of length {}, model has {}",
                theta.len(),
                self.theta.len()
            )));
        }
        self.theta = theta;
        Ok(())
    }

    pub fn set_zeta(&mut self, zeta: Vec<Vec<f64>>) -> Result<()> {
        if zeta.len() != self.l() || zeta.iter().any(|r| r.len() != 2 * self.n_cuts) {
            return Err(Error::Shape(format!(
                "zeta must be {} x {}",
                self.l(),
                2 * self.n_cuts
            )));
        }
        self.zeta = zeta;
        Ok(())
    }

    pub fn set_lambda(&mut self, lambda: Vec<C64>) -> Result<()> {
        if lambda.len() != self.l() {
            return Err(Error::Shape(format!(
                "lambda of length {}, model has {} terms",
                lambda.len(),
                self.l()
            )));
        }
        self.lambda = lambda;
        Ok(())
    }

    /// Real λ, imaginary parts set to zero.
    pub fn set_lambda_real(&mut self, lambda: &[f64]) -> Result<()> {
        self.set_lambda(lambda.iter().map(|&v| C64::new(v, 0.0)).collect())
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn zeta_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.zeta
    }

    /// Mutable access to `Re λ` through a closure; imaginary parts are kept.
    pub fn update_lambda_real(&mut self, mut f: impl FnMut(usize, f64) -> f64) {
        for (i, l) in self.lambda.iter_mut().enumerate() {
            l.re = f(i, l.re);
        }
    }

    /// Block inner products `[term][block]`.
    pub fn inner_products(&self, x: &[f64]) -> Result<Vec<Vec<C64>>> {
        Ok(Prepared::new(self, x)?.contract()?.inner)
    }

    /// The full complex model output.
    pub fn eval(&self, x: &[f64]) -> Result<C64> {
        let ips = self.inner_products(x)?;
        Ok(self
            .lambda
            .iter()
            .zip(&ips)
            .map(|(l, row)| row.iter().fold(*l, |acc, v| acc * v))
            .fold(ZERO, |acc, v| acc + v))
    }

    /// `Re` of [`RpmModel::eval`].
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.eval(x)?.re)
    }

    /// Gradient of `upstream · Re f(x)`.
    pub fn gradient(&self, x: &[f64], upstream: f64, method: GradientMethod) -> Result<RpmGradient> {
        self.gradient_with_value(x, upstream, method).map(|(g, _)| g)
    }

    /// As [`RpmModel::gradient`], also returning `f(x)`.
    pub fn gradient_with_value(
        &self,
        x: &[f64],
        upstream: f64,
        method: GradientMethod,
    ) -> Result<(RpmGradient, C64)> {
        match method {
            GradientMethod::Adjoint => self.gradient_adjoint(x, upstream),
            GradientMethod::ParameterShift => {
                self.gradient_parameter_shift_with(x, upstream, &mut |_, v| Ok(v))
            }
        }
    }

    fn gradient_adjoint(&self, x: &[f64], upstream: f64) -> Result<(RpmGradient, C64)> {
        let prep = Prepared::new(self, x)?;
        let c = prep.contract()?;
        let (l, k_blocks, r) = (self.l(), self.k(), self.n_cuts);
        let mut grad = RpmGradient::zeros(self.theta.len(), l, 2 * r);
        let mut boundary: Vec<Vec<C64>> = self
            .blocks
            .iter()
            .map(|b| vec![ZERO; 1 << b.circuit.n_qubits()])
            .collect();
        let mut value = ZERO;
        for i in 0..l {
            let row = &c.inner[i];
            let full: C64 = row.iter().fold(ONE, |a, v| a * v);
            value += self.lambda[i] * full;
            grad.lambda[i] = upstream * full.re;
            let (zk, zb) = self.zeta[i].split_at(r);
            for k in 0..k_blocks {
                let others = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != k)
                    .fold(ONE, |a, (_, v)| a * v);
                let w = self.lambda[i] * others * upstream;
                if w == ZERO {
                    continue;
                }
                let (psi_ket, m_ket) = &c.states[k][c.ket[i][k]];
                let (psi_bra, m_bra) = &c.states[k][c.bra[i][k]];
                let (zg_ket, zg_bra) = grad.zeta[i].split_at_mut(r);

                let chi: Vec<C64> = m_bra.amplitudes().iter().map(|a| w.conj() * a).collect();
                let lam = prep.sweep(k, zk, psi_ket, chi, &mut grad.theta, zg_ket);
                add_into(&mut boundary[k], &lam);

                let chi: Vec<C64> = m_ket.amplitudes().iter().map(|a| w * a).collect();
                let lam = prep.sweep(k, zb, psi_bra, chi, &mut grad.theta, zg_bra);
                add_into(&mut boundary[k], &lam);
            }
        }
        for (k, lam) in boundary.into_iter().enumerate() {
            if lam.iter().any(|v| *v != ZERO) {
                prep.sweep_prefix(k, lam, &mut grad.theta);
            }
        }
        Ok((grad, value))
    }

    /// Parameter-shift gradient where every inner product passes through
    /// `estimate` before use (the identity for exact gradients).
    pub fn gradient_parameter_shift_with(
        &self,
        x: &[f64],
        upstream: f64,
        estimate: &mut dyn FnMut(ShiftKey, C64) -> Result<C64>,
    ) -> Result<(RpmGradient, C64)> {
        let prep = Prepared::new(self, x)?;
        let (l, k_blocks, r) = (self.l(), self.k(), self.n_cuts);
        let mut grad = RpmGradient::zeros(self.theta.len(), l, 2 * r);
        let mut value = ZERO;
        let half_i_pi = C64::new(0.0, FRAC_PI_2);
        for i in 0..l {
            let (zk, zb) = self.zeta[i].split_at(r);
            let mut kets = Vec::with_capacity(k_blocks);
            let mut bras = Vec::with_capacity(k_blocks);
            let mut row = Vec::with_capacity(k_blocks);
            for k in 0..k_blocks {
                let ket = prep.run(k, zk, None);
                let m_ket = self.local_obs[k].apply(&ket)?;
                let bra = prep.run(k, zb, None);
                let exact = bra.inner(&m_ket)?;
                let key = ShiftKey {
                    term: i,
                    block: k,
                    shift: None,
                };
                row.push(estimate(key, exact)?);
                kets.push((ket, m_ket));
                bras.push(bra);
            }
            let full: C64 = row.iter().fold(ONE, |a, v| a * v);
            value += self.lambda[i] * full;
            grad.lambda[i] = upstream * full.re;
            for k in 0..k_blocks {
                let others = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != k)
                    .fold(ONE, |a, (_, v)| a * v);
                let w = self.lambda[i] * others * upstream;
                let gates = self.blocks[k].circuit.gates();
                for (g, spec) in gates.iter().enumerate() {
                    if !matches!(spec.slot, ParamSlot::Theta(_) | ParamSlot::Zeta(_)) {
                        continue;
                    }
                    for side in [Side::Ket, Side::Bra] {
                        let zeta_side = if side == Side::Ket { zk } else { zb };
                        let delta = if matches!(spec.slot, ParamSlot::Zeta(_)) {
                            1.0
                        } else {
                            FRAC_PI_2
                        };
                        let mut shifted = |sign: i8, d: f64| -> Result<C64> {
                            let state = prep.run(k, zeta_side, Some((g, d)));
                            let exact = match side {
                                Side::Ket => bras[k].inner(&self.local_obs[k].apply(&state)?)?,
                                Side::Bra => state.inner(&kets[k].1)?,
                            };
                            estimate(
                                ShiftKey {
                                    term: i,
                                    block: k,
                                    shift: Some((side, g, sign)),
                                },
                                exact,
                            )
                        };
                        let d_ip = match spec.slot {
                            ParamSlot::Zeta(c) => {
                                let coef = if side == Side::Ket { half_i_pi } else { -half_i_pi };
                                let d = coef * (row[k] - shifted(1, delta)?);
                                let col = if side == Side::Ket { c } else { r + c };
                                grad.zeta[i][col] += (w * d).re;
                                continue;
                            }
                            // dU/da = (U(a + s) - U(a - s)) / (4 sin(s/2)) for these generators
                            _ => (shifted(1, delta)? - shifted(-1, -delta)?) * SHIFT_SCALE,
                        };
                        if let ParamSlot::Theta(t) = spec.slot {
                            grad.theta[t] += (w * d_ip).re;
                        }
                    }
                }
            }
        }
        Ok((grad, value))
    }

    /// Fits `f` along feature `feature` with integer frequencies
    /// `|ω| ≤ max_freq` in the encoding angle `φ = scale·x`, sampling `grid`
    /// equally spaced angles in `[0, 2π)` with the other features at `base`.
    pub fn spectrum_check(
        &self,
        base: &[f64],
        feature: usize,
        max_freq: usize,
        grid: usize,
    ) -> Result<SpectrumReport> {
        if grid < 2 * max_freq + 1 {
            return Err(Error::Size(format!(
                "{grid} samples cannot resolve {} frequencies",
                2 * max_freq + 1
            )));
        }
        if feature >= self.n_data() {
            return Err(Error::Index(format!("feature {feature} of {}", self.n_data())));
        }
        let scale = self.encoding_scale(feature)?;
        let freqs: Vec<i64> = (-(max_freq as i64)..=max_freq as i64).collect();
        let mut x = base.to_vec();
        let mut samples = Vec::with_capacity(grid);
        for j in 0..grid {
            let phi = 2.0 * PI * j as f64 / grid as f64;
            x[feature] = phi / scale;
            samples.push((phi, self.eval(&x)?));
        }
        let a = DMatrix::from_fn(grid, freqs.len(), |row, col| {
            C64::from_polar(1.0, -(freqs[col] as f64) * samples[row].0)
        });
        let y = DVector::from_iterator(grid, samples.iter().map(|s| s.1));
        let coef = a
            .clone()
            .svd(true, true)
            .solve(&y, 1e-12)
            .map_err(|e| Error::Domain(format!("least-squares fit failed: {e}")))?;
        let resid = &y - &a * &coef;
        let residual = (resid.iter().map(|v| v.norm_sqr()).sum::<f64>() / grid as f64).sqrt();
        Ok(SpectrumReport {
            feature,
            frequencies: freqs,
            residual,
            coefficients: coef.iter().map(|c| (c.re, c.im)).collect(),
        })
    }

    /// Number of encoding gates consuming `feature` across all blocks.
    pub fn encoding_count(&self, feature: usize) -> usize {
        self.parent
            .gates()
            .iter()
            .filter(|g| matches!(g.slot, ParamSlot::Data { index, .. } if index == feature))
            .count()
    }

    fn encoding_scale(&self, feature: usize) -> Result<f64> {
        let mut scale = None;
        for g in self.parent.gates() {
            if let ParamSlot::Data { index, scale: s } = g.slot {
                if index != feature {
                    continue;
                }
                if !matches!(g.kind, GateKind::Ry | GateKind::Rz) {
                    return Err(Error::Structure(format!(
                        "feature {feature} enters a {:?} gate",
                        g.kind
                    )));
                }
                match scale {
                    None => scale = Some(s),
                    Some(prev) if prev == s => {}
                    Some(_) => {
                        return Err(Error::Structure(format!(
                            "feature {feature} is encoded with differing scales"
                        )))
                    }
                }
            }
        }
        scale
            .filter(|s| *s != 0.0)
            .ok_or_else(|| Error::Structure(format!("feature {feature} is not encoded")))
    }

    pub fn to_json(&self) -> Result<String> {
        let has_im = self.lambda.iter().any(|l| l.im != 0.0);
        let file = ModelFile {
            n_qubits: self.parent.n_qubits(),
            partition: self.partition.blocks().to_vec(),
            topology: self.ansatz.map(|a| a.topology),
            depth: self.ansatz.map(|a| a.depth),
            l: self.l(),
            n_cuts: self.n_cuts,
            circuit: self.parent.to_text(),
            observable: self
                .observable
                .factors()
                .iter()
                .map(|(q, m)| ObservableFactor {
                    qubit: *q,
                    matrix: m.map(|row| row.map(|v| [v.re, v.im])),
                })
                .collect(),
            theta: self.theta.clone(),
            zeta: self.zeta.clone(),
            lambda: self.lambda.iter().map(|l| l.re).collect(),
            lambda_im: has_im.then(|| self.lambda.iter().map(|l| l.im).collect()),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        let parent = ParamCircuit::from_text(&file.circuit)?;
        if parent.n_qubits() != file.n_qubits {
            return Err(Error::Format("checkpoint qubit count disagrees with its circuit".into()));
        }
        let partition = PartitionSpec::new(file.partition)?;
        let factors: Vec<(usize, Mat2)> = file
            .observable
            .iter()
            .map(|f| (f.qubit, f.matrix.map(|row| row.map(|[re, im]| C64::new(re, im)))))
            .collect();
        let observable = Observable::product(file.n_qubits, factors)?;
        let mut model = Self::new(&parent, &partition, &observable, file.l)?;
        if model.n_cuts != file.n_cuts {
            return Err(Error::Format("checkpoint cut count disagrees with its circuit".into()));
        }
        model.set_theta(file.theta)?;
        model.set_zeta(file.zeta)?;
        let im = file.lambda_im.unwrap_or_else(|| vec![0.0; file.lambda.len()]);
        if im.len() != file.lambda.len() {
            return Err(Error::Format("lambda_im length differs from lambda".into()));
        }
        model.set_lambda(file.lambda.iter().zip(&im).map(|(&re, &im)| C64::new(re, im)).collect())?;
        model.ansatz = match (file.depth, file.topology) {
            (Some(depth), Some(topology)) => Some(AnsatzInfo { depth, topology }),
            _ => None,
        };
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn add_into(acc: &mut [C64], v: &[C64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Binary label under the `≥ 0.5` rule.
pub fn classify(value: f64) -> u8 {
    u8::from(value >= THRESHOLD)
}

#[derive(Serialize, Deserialize)]
struct ObservableFactor {
    qubit: usize,
    matrix: [[[f64; 2]; 2]; 2],
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    n_qubits: usize,
    partition: Vec<Vec<usize>>,
    topology: Option<Topology>,
    depth: Option<usize>,
    #[serde(rename = "L")]
    l: usize,
    n_cuts: usize,
    circuit: String,
    observable: Vec<ObservableFactor>,
    theta: Vec<f64>,
    zeta: Vec<Vec<f64>>,
    lambda: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda_im: Option<Vec<f64>>,
}

/// Builds the standard model used by the experiments: an HEA split into
/// blocks, with `Z` on the listed qubits as the observable.
pub fn hea_model(
    n_qubits: usize,
    depth: usize,
    topology: Topology,
    partition: &PartitionSpec,
    z_qubits: &[usize],
    l: usize,
) -> Result<RpmModel> {
    let circuit = crate::circuit::build_hea(n_qubits, depth, topology)?;
    let obs = Observable::z_string(n_qubits, z_qubits)?;
    Ok(RpmModel::new(&circuit, partition, &obs, l)?.with_ansatz(AnsatzInfo { depth, topology }))
}

/// Parent-circuit gates of kind `kind` (used in tests and diagnostics).
pub fn count_kind(circuit: &ParamCircuit, kind: GateKind) -> usize {
    circuit.gates().iter().filter(|g: &&GateSpec| g.kind == kind).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{bind, build_hea};
    use crate::cutter::{enumerate_terms, evaluate_partitioned_detailed};
    use crate::qsim::expectation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn four_qubit() -> (ParamCircuit, PartitionSpec, Observable) {
        let c = build_hea(4, 1, Topology::Line).unwrap();
        let p = PartitionSpec::new(vec![vec![0, 1], vec![2, 3]]).unwrap();
        let o = Observable::z_string(4, &[0, 3]).unwrap();
        (c, p, o)
    }

    fn random_model(seed: u64, l: usize) -> (RpmModel, Vec<f64>) {
        let (c, p, o) = four_qubit();
        let mut m = RpmModel::new(&c, &p, &o, l).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.init_random(&mut rng);
        let lam: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        m.set_lambda_real(&lam).unwrap();
        let x = (0..4).map(|_| rng.random()).collect();
        (m, x)
    }

    #[test]
    fn no_cut_single_block_is_plain_expectation() {
        let c = build_hea(3, 2, Topology::Ring).unwrap();
        let p = PartitionSpec::contiguous(3, 1).unwrap();
        let o = Observable::pauli_z(3, 1).unwrap();
        let mut m = RpmModel::new(&c, &p, &o, 1).unwrap();
        assert_eq!(m.n_cuts(), 0);
        m.set_lambda_real(&[1.0]).unwrap();
        let theta: Vec<f64> = (0..c.n_theta()).map(|i| 0.3 * i as f64).collect();
        m.set_theta(theta.clone()).unwrap();
        let x = [0.1, 0.5, 0.9];
        let want = expectation(&bind(&c, &x, &theta, &[]).unwrap().run().unwrap(), &o).unwrap();
        let got = m.eval(&x).unwrap();
        assert!((got - C64::new(want, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn full_subset_matches_partitioned_sum() {
        let (c, p, o) = four_qubit();
        let e = enumerate_terms(&c, &p).unwrap();
        let theta: Vec<f64> = (0..c.n_theta()).map(|i| 0.7 + 0.4 * i as f64).collect();
        let x = [0.2, 0.4, 0.6, 0.8];
        let all: Vec<usize> = (0..e.n_terms()).collect();
        let m = RpmModel::from_subset(&c, &e, &all, &o, &theta).unwrap();
        let want = evaluate_partitioned_detailed(&e, &x, &theta, &o).unwrap().value;
        assert!((m.eval(&x).unwrap() - want).norm() < 1e-9);

        let empty = RpmModel::from_subset(&c, &e, &[], &o, &theta).unwrap();
        assert_eq!(empty.eval(&x).unwrap(), ZERO);
    }

    #[test]
    fn zero_lambda_is_zero() {
        let (mut m, x) = random_model(1, 3);
        m.set_lambda_real(&[0.0; 3]).unwrap();
        assert_eq!(m.eval(&x).unwrap(), ZERO);
    }

    #[test]
    fn shape_errors() {
        let (m, _) = random_model(1, 2);
        assert!(matches!(m.eval(&[0.0; 3]), Err(Error::Shape(_))));
        let mut m2 = m.clone();
        assert!(m2.set_zeta(vec![vec![0.0; 3]; 2]).is_err());
    }

    #[test]
    fn classification_rule() {
        assert_eq!(classify(0.9), 1);
        assert_eq!(classify(0.1), 0);
        assert_eq!(classify(0.5), 1);
    }

    #[test]
    fn lambda_gradient_is_term_value() {
        let (m, x) = random_model(4, 1);
        let g = m.gradient(&x, 1.0, GradientMethod::Adjoint).unwrap();
        let ips = m.inner_products(&x).unwrap();
        let prod: C64 = ips[0].iter().product();
        assert!((g.lambda[0] - prod.re).abs() < 1e-14);
    }

    fn finite_difference(m: &RpmModel, x: &[f64], h: f64) -> RpmGradient {
        let mut g = RpmGradient::zeros(m.theta().len(), m.l(), 2 * m.n_cuts());
        let f = |mm: &RpmModel| mm.predict(x).unwrap();
        for t in 0..m.theta().len() {
            let (mut a, mut b) = (m.clone(), m.clone());
            a.theta_mut()[t] += h;
            b.theta_mut()[t] -= h;
            g.theta[t] = (f(&a) - f(&b)) / (2.0 * h);
        }
        for i in 0..m.l() {
            for c in 0..2 * m.n_cuts() {
                let (mut a, mut b) = (m.clone(), m.clone());
                a.zeta_mut()[i][c] += h;
                b.zeta_mut()[i][c] -= h;
                g.zeta[i][c] = (f(&a) - f(&b)) / (2.0 * h);
            }
            let (mut a, mut b) = (m.clone(), m.clone());
            a.update_lambda_real(|j, v| if j == i { v + h } else { v });
            b.update_lambda_real(|j, v| if j == i { v - h } else { v });
            g.lambda[i] = (f(&a) - f(&b)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let (m, x) = random_model(seed, 3);
            let fd = finite_difference(&m, &x, 1e-4);
            for method in [GradientMethod::Adjoint, GradientMethod::ParameterShift] {
                let g = m.gradient(&x, 1.0, method).unwrap();
                let mut diff = g.clone();
                diff.add_scaled(&fd, -1.0);
                assert!(diff.max_abs() < 1e-7, "{method:?} seed {seed}: {}", diff.max_abs());
            }
        }
    }

    #[test]
    fn adjoint_and_shift_agree_and_scale_with_upstream() {
        let (m, x) = random_model(9, 2);
        let a = m.gradient(&x, -2.5, GradientMethod::Adjoint).unwrap();
        let mut b = m.gradient(&x, 1.0, GradientMethod::ParameterShift).unwrap();
        b.scale(-2.5);
        let mut d = a.clone();
        d.add_scaled(&b, -1.0);
        assert!(d.max_abs() < 1e-11);
    }

    #[test]
    fn unused_theta_has_zero_gradient() {
        let (c, p, o) = four_qubit();
        let mut gates = c.gates().to_vec();
        gates.push(GateSpec::rotation(GateKind::Ry, 0, ParamSlot::Constant(0.0)));
        let c2 = ParamCircuit::with_counts(4, gates, c.n_theta() + 1, c.n_data(), 0).unwrap();
        let mut m = RpmModel::new(&c2, &p, &o, 2).unwrap();
        m.init_random(&mut ChaCha8Rng::seed_from_u64(2));
        let g = m.gradient(&[0.3; 4], 1.0, GradientMethod::Adjoint).unwrap();
        assert_eq!(g.theta[c.n_theta()], 0.0);
    }

    #[test]
    fn spectrum_examples() {
        let (m, x) = random_model(5, 3);
        assert_eq!(m.encoding_count(1), 1);
        let fit = m.spectrum_check(&x, 1, 1, 16).unwrap();
        assert!(fit.residual <= 1e-8, "{}", fit.residual);
        let under = m.spectrum_check(&x, 1, 0, 16).unwrap();
        assert!(under.residual > 1e-3);
        let mut zero = m.clone();
        zero.set_lambda_real(&[0.0; 3]).unwrap();
        assert!(zero.spectrum_check(&x, 1, 2, 16).unwrap().residual <= 1e-12);
        assert!(matches!(m.spectrum_check(&x, 1, 3, 6), Err(Error::Size(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (m, x) = random_model(6, 4);
        let m = m.with_ansatz(AnsatzInfo {
            depth: 1,
            topology: Topology::Line,
        });
        let back = RpmModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.eval(&x).unwrap(), m.eval(&x).unwrap());
    }

    #[test]
    fn cache_shares_identical_rows() {
        let (mut m, x) = random_model(7, 3);
        let row = m.zeta()[0].clone();
        m.set_zeta(vec![row.clone(), row.clone(), row]).unwrap();
        let prep = Prepared::new(&m, &x).unwrap();
        let c = prep.contract().unwrap();
        assert!(c.states.iter().all(|s| s.len() <= 2));
    }
}
