//! Dense statevector simulation.
//!
//! Amplitudes are stored with qubit 0 as the most significant bit of the
//! basis index. Gates are applied in place through strided kernels, so a
//! gate costs O(2^n) and no 2^n x 2^n matrix is ever built.

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type Mat2 = [[C64; 2]; 2];
pub type Mat4 = [[C64; 4]; 4];

/// Largest register the simulator accepts.
pub const MAX_QUBITS: usize = 14;

const UNITARY_TOL: f64 = 1e-12;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);
pub(crate) const I: C64 = C64::new(0.0, 1.0);

#[derive(Clone, Debug, PartialEq)]
pub struct State {
    n_qubits: usize,
    amps: Vec<C64>,
}

impl State {
    pub fn zero(n_qubits: usize) -> Result<Self> {
        check_register(n_qubits)?;
        let mut amps = vec![ZERO; 1 << n_qubits];
        amps[0] = ONE;
        Ok(Self { n_qubits, amps })
    }

    pub fn from_amplitudes(n_qubits: usize, amps: Vec<C64>) -> Result<Self> {
        check_register(n_qubits)?;
        if amps.len() != 1 << n_qubits {
            return Err(Error::Shape(format!(
                "{} amplitudes for {} qubits",
                amps.len(),
                n_qubits
            )));
        }
        Ok(Self { n_qubits, amps })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub(crate) fn amplitudes_mut(&mut self) -> &mut [C64] {
        &mut self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &State) -> Result<C64> {
        if self.n_qubits != other.n_qubits {
            return Err(Error::Shape(format!(
                "inner product of {}- and {}-qubit states",
                self.n_qubits, other.n_qubits
            )));
        }
        Ok(inner(&self.amps, &other.amps))
    }

    /// Multiplies every amplitude by `factor`.
    pub fn scaled(mut self, factor: C64) -> Self {
        self.amps.iter_mut().for_each(|a| *a *= factor);
        self
    }
}

fn check_register(n_qubits: usize) -> Result<()> {
    if n_qubits == 0 || n_qubits > MAX_QUBITS {
        return Err(Error::Size(format!(
            "register of {n_qubits} qubits outside 1..={MAX_QUBITS}"
        )));
    }
    Ok(())
}

/// `|0...0>` on `n` qubits.
pub fn zero_state(n: usize) -> Result<State> {
    State::zero(n)
}

/// A 2x2 or 4x4 gate matrix. Non-unitary matrices (operator-Schmidt cut
/// factors, derivative generators) are allowed and carry `unitary = false`.
#[derive(Clone, Debug, PartialEq)]
pub enum GateMatrix {
    Single { m: Mat2, unitary: bool },
    Double { m: Mat4, unitary: bool },
}

impl GateMatrix {
    pub fn single(m: Mat2) -> Self {
        let unitary = is_unitary(&m.map(|r| r.to_vec()).to_vec());
        GateMatrix::Single { m, unitary }
    }

    pub fn double(m: Mat4) -> Self {
        let unitary = is_unitary(&m.map(|r| r.to_vec()).to_vec());
        GateMatrix::Double { m, unitary }
    }

    pub fn arity(&self) -> usize {
        match self {
            GateMatrix::Single { .. } => 1,
            GateMatrix::Double { .. } => 2,
        }
    }

    pub fn is_unitary(&self) -> bool {
        match self {
            GateMatrix::Single { unitary, .. } | GateMatrix::Double { unitary, .. } => *unitary,
        }
    }

    pub fn dagger(&self) -> Self {
        match self {
            GateMatrix::Single { m, unitary } => GateMatrix::Single {
                m: dagger2(m),
                unitary: *unitary,
            },
            GateMatrix::Double { m, unitary } => GateMatrix::Double {
                m: dagger4(m),
                unitary: *unitary,
            },
        }
    }

    /// Row-major entries.
    pub fn entries(&self) -> Vec<C64> {
        match self {
            GateMatrix::Single { m, .. } => m.iter().flatten().copied().collect(),
            GateMatrix::Double { m, .. } => m.iter().flatten().copied().collect(),
        }
    }

    pub(crate) fn apply_in_place(&self, amps: &mut [C64], n_qubits: usize, targets: &[usize]) {
        match self {
            GateMatrix::Single { m, .. } => apply_1q(amps, n_qubits, targets[0], m),
            GateMatrix::Double { m, .. } => apply_2q(amps, n_qubits, targets[0], targets[1], m),
        }
    }
}

fn is_unitary(m: &[Vec<C64>]) -> bool {
    let d = m.len();
    for i in 0..d {
        for j in 0..d {
            let mut acc = ZERO;
            for k in 0..d {
                acc += m[k][i].conj() * m[k][j];
            }
            let expect = if i == j { ONE } else { ZERO };
            if (acc - expect).norm() > UNITARY_TOL {
                return false;
            }
        }
    }
    true
}

pub(crate) fn dagger2(m: &Mat2) -> Mat2 {
    [
        [m[0][0].conj(), m[1][0].conj()],
        [m[0][1].conj(), m[1][1].conj()],
    ]
}

pub(crate) fn dagger4(m: &Mat4) -> Mat4 {
    let mut out = [[ZERO; 4]; 4];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[j][i].conj();
        }
    }
    out
}

#[cfg(test)]
pub(crate) fn matmul2(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[ZERO; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

#[cfg(test)]
pub(crate) fn matmul4(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[ZERO; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Kronecker product with `a` on the more significant qubit.
pub(crate) fn kron2(a: &Mat2, b: &Mat2) -> Mat4 {
    let mut out = [[ZERO; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = a[i >> 1][j >> 1] * b[i & 1][j & 1];
        }
    }
    out
}

pub(crate) fn inner(a: &[C64], b: &[C64]) -> C64 {
    let mut re = 0.0;
    let mut im = 0.0;
    for (x, y) in a.iter().zip(b) {
        re += x.re * y.re + x.im * y.im;
        im += x.re * y.im - x.im * y.re;
    }
    C64::new(re, im)
}

#[inline]
fn bit(n_qubits: usize, q: usize) -> usize {
    1 << (n_qubits - 1 - q)
}

pub(crate) fn apply_1q(amps: &mut [C64], n_qubits: usize, q: usize, m: &Mat2) {
    let stride = bit(n_qubits, q);
    if m[0][1] == ZERO && m[1][0] == ZERO {
        let (d0, d1) = (m[0][0], m[1][1]);
        let skip0 = d0 == ONE;
        for chunk in amps.chunks_exact_mut(2 * stride) {
            let (lo, hi) = chunk.split_at_mut(stride);
            if !skip0 {
                lo.iter_mut().for_each(|a| *a *= d0);
            }
            hi.iter_mut().for_each(|a| *a *= d1);
        }
        return;
    }
    if m.iter().flatten().all(|v| v.im == 0.0) {
        let [[a, b], [c, d]] = m.map(|r| r.map(|v| v.re));
        for chunk in amps.chunks_exact_mut(2 * stride) {
            let (lo, hi) = chunk.split_at_mut(stride);
            for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                let (u, v) = (*x, *y);
                *x = u * a + v * b;
                *y = u * c + v * d;
            }
        }
        return;
    }
    let [[a, b], [c, d]] = *m;
    for chunk in amps.chunks_exact_mut(2 * stride) {
        let (lo, hi) = chunk.split_at_mut(stride);
        for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
            let (u, v) = (*x, *y);
            *x = a * u + b * v;
            *y = c * u + d * v;
        }
    }
}

/// `<lam| (D on qubit q) |phi>` without materialising `D|phi>`.
pub(crate) fn braket_1q(lam: &[C64], phi: &[C64], n_qubits: usize, q: usize, m: &Mat2) -> C64 {
    let stride = bit(n_qubits, q);
    let [[a, b], [c, d]] = *m;
    let mut acc = ZERO;
    let diagonal = b == ZERO && c == ZERO;
    for (l, p) in lam.chunks_exact(2 * stride).zip(phi.chunks_exact(2 * stride)) {
        let (l0, l1) = l.split_at(stride);
        let (p0, p1) = p.split_at(stride);
        if diagonal {
            acc += a * inner(l0, p0) + d * inner(l1, p1);
        } else {
            for i in 0..stride {
                acc += l0[i].conj() * (a * p0[i] + b * p1[i]) + l1[i].conj() * (c * p0[i] + d * p1[i]);
            }
        }
    }
    acc
}

pub(crate) fn apply_2q(amps: &mut [C64], n_qubits: usize, q0: usize, q1: usize, m: &Mat4) {
    let b0 = bit(n_qubits, q0);
    let b1 = bit(n_qubits, q1);
    let mask = b0 | b1;
    let diagonal = (0..4).all(|i| (0..4).all(|j| i == j || m[i][j] == ZERO));
    if diagonal {
        let d = [m[0][0], m[1][1], m[2][2], m[3][3]];
        let (hi, lo) = (b0.max(b1), b0.min(b1));
        let offsets = [0, b1, b0, b0 | b1];
        for outer in (0..amps.len()).step_by(2 * hi) {
            for base in (outer..outer + hi).step_by(2 * lo) {
                for (k, &off) in offsets.iter().enumerate() {
                    if d[k] == ONE {
                        continue;
                    }
                    let run = &mut amps[base + off..base + off + lo];
                    if d[k] == -ONE {
                        run.iter_mut().for_each(|a| *a = -*a);
                    } else {
                        run.iter_mut().for_each(|a| *a *= d[k]);
                    }
                }
            }
        }
        return;
    }
    for base in 0..amps.len() {
        if base & mask != 0 {
            continue;
        }
        let idx = [base, base | b1, base | b0, base | mask];
        let old = idx.map(|i| amps[i]);
        for (r, &i) in idx.iter().enumerate() {
            amps[i] = m[r][0] * old[0] + m[r][1] * old[1] + m[r][2] * old[2] + m[r][3] * old[3];
        }
    }
}

fn check_targets(n_qubits: usize, targets: &[usize], arity: usize) -> Result<()> {
    if targets.len() != arity {
        return Err(Error::Index(format!(
            "{}-qubit gate given {} targets",
            arity,
            targets.len()
        )));
    }
    if let Some(&q) = targets.iter().find(|&&q| q >= n_qubits) {
        return Err(Error::Index(format!(
            "target {q} outside a {n_qubits}-qubit register"
        )));
    }
    if arity == 2 && targets[0] == targets[1] {
        return Err(Error::Index(format!("duplicate target {}", targets[0])));
    }
    Ok(())
}

/// Returns `(I ⊗ g ⊗ I)|state>`; the input is left untouched.
pub fn apply_gate(state: &State, g: &GateMatrix, targets: &[usize]) -> Result<State> {
    check_targets(state.n_qubits, targets, g.arity())?;
    let mut out = state.clone();
    g.apply_in_place(&mut out.amps, out.n_qubits, targets);
    if g.is_unitary() {
        debug_assert!(
            (out.norm_sqr() - state.norm_sqr()).abs() < 1e-9,
            "unitary gate changed the norm"
        );
    }
    Ok(out)
}

/// Tensor product of single-qubit Hermitian factors, identity elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct Observable {
    n_qubits: usize,
    factors: Vec<(usize, Mat2)>,
}

pub(crate) const PAULI_Z: Mat2 = [[ONE, ZERO], [ZERO, C64::new(-1.0, 0.0)]];

impl Observable {
    pub fn identity(n_qubits: usize) -> Self {
        Self {
            n_qubits,
            factors: Vec::new(),
        }
    }

    pub fn pauli_z(n_qubits: usize, qubit: usize) -> Result<Self> {
        Self::product(n_qubits, vec![(qubit, PAULI_Z)])
    }

    /// Pauli Z on every listed qubit.
    pub fn z_string(n_qubits: usize, qubits: &[usize]) -> Result<Self> {
        Self::product(n_qubits, qubits.iter().map(|&q| (q, PAULI_Z)).collect())
    }

    pub fn product(n_qubits: usize, mut factors: Vec<(usize, Mat2)>) -> Result<Self> {
        factors.sort_by_key(|f| f.0);
        for w in factors.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Index(format!("two factors on qubit {}", w[0].0)));
            }
        }
        for (q, m) in &factors {
            if *q >= n_qubits {
                return Err(Error::Index(format!(
                    "observable factor on qubit {q} of a {n_qubits}-qubit register"
                )));
            }
            let d = dagger2(m);
            if (0..2).any(|i| (0..2).any(|j| (d[i][j] - m[i][j]).norm() > UNITARY_TOL)) {
                return Err(Error::Domain(format!("factor on qubit {q} is not Hermitian")));
            }
            if hermitian_norm(m) > 1.0 + UNITARY_TOL {
                return Err(Error::Domain(format!(
                    "factor on qubit {q} has operator norm above 1"
                )));
            }
        }
        Ok(Self { n_qubits, factors })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn factors(&self) -> &[(usize, Mat2)] {
        &self.factors
    }

    /// Operator norm (product of the factor norms).
    pub fn operator_norm(&self) -> f64 {
        self.factors.iter().map(|(_, m)| hermitian_norm(m)).product()
    }

    pub fn is_unitary(&self) -> bool {
        self.factors
            .iter()
            .all(|(_, m)| GateMatrix::single(*m).is_unitary())
    }

    pub(crate) fn apply_in_place(&self, amps: &mut [C64]) {
        for (q, m) in &self.factors {
            apply_1q(amps, self.n_qubits, *q, m);
        }
    }

    /// `M|state>`.
    pub fn apply(&self, state: &State) -> Result<State> {
        self.check_dims(state.n_qubits)?;
        let mut out = state.clone();
        self.apply_in_place(&mut out.amps);
        Ok(out)
    }

    fn check_dims(&self, n: usize) -> Result<()> {
        if n != self.n_qubits {
            return Err(Error::Shape(format!(
                "{}-qubit observable on a {}-qubit state",
                self.n_qubits, n
            )));
        }
        Ok(())
    }

    /// Restricts the observable to each block, re-indexing qubits to the
    /// block-local order.
    pub fn split(&self, blocks: &[Vec<usize>]) -> Result<Vec<Observable>> {
        let mut seen = vec![false; self.n_qubits];
        let mut out = Vec::with_capacity(blocks.len());
        for block in blocks {
            let mut factors = Vec::new();
            for (local, &q) in block.iter().enumerate() {
                if q >= self.n_qubits {
                    return Err(Error::Shape(format!("block qubit {q} outside the observable")));
                }
                seen[q] = true;
                if let Some((_, m)) = self.factors.iter().find(|f| f.0 == q) {
                    factors.push((local, *m));
                }
            }
            out.push(Observable::product(block.len(), factors)?);
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Shape("blocks do not cover the observable".into()));
        }
        Ok(out)
    }
}

fn hermitian_norm(m: &Mat2) -> f64 {
    let a = m[0][0].re;
    let d = m[1][1].re;
    let half = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + m[0][1].norm_sqr()).sqrt();
    (half + rad).abs().max((half - rad).abs())
}

/// `<ψ|M|ψ>`.
pub fn expectation(state: &State, obs: &Observable) -> Result<f64> {
    let m_psi = obs.apply(state)?;
    let value = inner(&state.amps, &m_psi.amps);
    debug_assert!(
        value.im.abs() < 1e-10 * state.norm_sqr().max(1.0),
        "imaginary residue {} in an expectation value",
        value.im
    );
    Ok(value.re)
}

/// One gate of a fully bound circuit.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundGate {
    pub matrix: GateMatrix,
    pub targets: Vec<usize>,
    /// Set for gates bound from a partition (ζ) slot.
    pub partition: bool,
}

/// A circuit with every angle resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundCircuit {
    pub n_qubits: usize,
    pub gates: Vec<BoundGate>,
}

impl BoundCircuit {
    pub fn new(n_qubits: usize) -> Result<Self> {
        check_register(n_qubits)?;
        Ok(Self {
            n_qubits,
            gates: Vec::new(),
        })
    }

    pub fn push(&mut self, matrix: GateMatrix, targets: &[usize]) -> Result<&mut Self> {
        check_targets(self.n_qubits, targets, matrix.arity())?;
        self.gates.push(BoundGate {
            matrix,
            targets: targets.to_vec(),
            partition: false,
        });
        Ok(self)
    }

    pub fn push_partition(&mut self, matrix: GateMatrix, target: usize) -> Result<&mut Self> {
        self.push(matrix, &[target])?;
        if let Some(g) = self.gates.last_mut() {
            g.partition = true;
        }
        Ok(self)
    }

    pub fn run_on(&self, mut state: State) -> Result<State> {
        if state.n_qubits != self.n_qubits {
            return Err(Error::Shape(format!(
                "{}-qubit circuit on a {}-qubit state",
                self.n_qubits, state.n_qubits
            )));
        }
        for g in &self.gates {
            g.matrix.apply_in_place(&mut state.amps, self.n_qubits, &g.targets);
        }
        Ok(state)
    }

    /// `U|0>`.
    pub fn run(&self) -> Result<State> {
        self.run_on(State::zero(self.n_qubits)?)
    }

    /// Dense unitary, for small-register verification only.
    pub fn unitary(&self) -> Result<Vec<Vec<C64>>> {
        let dim = 1usize << self.n_qubits;
        let mut cols = Vec::with_capacity(dim);
        for j in 0..dim {
            let mut amps = vec![ZERO; dim];
            amps[j] = ONE;
            cols.push(self.run_on(State::from_amplitudes(self.n_qubits, amps)?)?.amps);
        }
        Ok((0..dim)
            .map(|i| (0..dim).map(|j| cols[j][i]).collect())
            .collect())
    }
}

/// `<0|U† M V|0>` from two statevector runs and one bilinear form.
pub fn cross_inner(u: &BoundCircuit, v: &BoundCircuit, obs: &Observable) -> Result<C64> {
    if u.n_qubits != v.n_qubits {
        return Err(Error::Shape(format!(
            "circuits on {} and {} qubits",
            u.n_qubits, v.n_qubits
        )));
    }
    obs.check_dims(u.n_qubits)?;
    let bra = u.run()?;
    let ket = obs.apply(&v.run()?)?;
    Ok(inner(&bra.amps, &ket.amps))
}

/// Which component of `<0|U†V|0>` a Hadamard test reads out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Re,
    Im,
}

fn h_matrix() -> Mat2 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    [[C64::new(s, 0.0), C64::new(s, 0.0)], [C64::new(s, 0.0), C64::new(-s, 0.0)]]
}

/// Ancilla-controlled interference circuit for `<0|U†V|0>`.
///
/// The ancilla is qubit 0 of the returned register and the system qubits are
/// shifted up by one. Gates shared by `u` and `v` are emitted uncontrolled;
/// only the partition sites where they differ become controlled operations
/// (`u`'s gate when the ancilla is 0, `v`'s when it is 1). The Z expectation
/// of the ancilla equals the requested component.
pub fn hadamard_test_circuit(u: &BoundCircuit, v: &BoundCircuit, part: Part) -> Result<BoundCircuit> {
    build_hadamard_test(u, v, None, part)
}

/// As [`hadamard_test_circuit`], reading out `<0|U† M V|0>` for a unitary
/// Hermitian observable (a Pauli string), applied controlled on the 1 branch.
pub fn hadamard_test_circuit_with_observable(
    u: &BoundCircuit,
    v: &BoundCircuit,
    obs: &Observable,
    part: Part,
) -> Result<BoundCircuit> {
    if !obs.is_unitary() {
        return Err(Error::Domain(
            "Hadamard test needs a unitary observable".into(),
        ));
    }
    obs.check_dims(u.n_qubits)?;
    build_hadamard_test(u, v, Some(obs), part)
}

fn controlled_pair(on_zero: &Mat2, on_one: &Mat2) -> Mat4 {
    let mut m = [[ZERO; 4]; 4];
    for i in 0..2 {
        for j in 0..2 {
            m[i][j] = on_zero[i][j];
            m[i + 2][j + 2] = on_one[i][j];
        }
    }
    m
}

fn build_hadamard_test(
    u: &BoundCircuit,
    v: &BoundCircuit,
    obs: Option<&Observable>,
    part: Part,
) -> Result<BoundCircuit> {
    if u.n_qubits != v.n_qubits || u.gates.len() != v.gates.len() {
        return Err(Error::Structure(
            "circuits differ in width or gate count".into(),
        ));
    }
    if u.n_qubits + 1 > MAX_QUBITS {
        return Err(Error::Size("no room for the ancilla".into()));
    }
    let mut out = BoundCircuit::new(u.n_qubits + 1)?;
    let shift = |t: &[usize]| t.iter().map(|q| q + 1).collect::<Vec<_>>();
    out.push(GateMatrix::single(h_matrix()), &[0])?;
    if part == Part::Im {
        out.push(GateMatrix::single([[ONE, ZERO], [ZERO, -I]]), &[0])?;
    }
    for (gu, gv) in u.gates.iter().zip(&v.gates) {
        if gu.targets != gv.targets {
            return Err(Error::Structure("gate targets differ".into()));
        }
        if gu.matrix == gv.matrix {
            out.push(gu.matrix.clone(), &shift(&gu.targets))?;
            continue;
        }
        if !(gu.partition && gv.partition) {
            return Err(Error::Structure(
                "circuits differ at a non-partition gate".into(),
            ));
        }
        let (GateMatrix::Single { m: mu, .. }, GateMatrix::Single { m: mv, .. }) =
            (&gu.matrix, &gv.matrix)
        else {
            return Err(Error::Structure("partition gates must act on one qubit".into()));
        };
        out.push(
            GateMatrix::double(controlled_pair(mu, mv)),
            &[0, gu.targets[0] + 1],
        )?;
    }
    if let Some(obs) = obs {
        let id = [[ONE, ZERO], [ZERO, ONE]];
        for (q, m) in obs.factors() {
            out.push(GateMatrix::double(controlled_pair(&id, m)), &[0, q + 1])?;
        }
    }
    out.push(GateMatrix::single(h_matrix()), &[0])?;
    Ok(out)
}

/// Z expectation of qubit 0 after running `circuit` on `|0...0>`.
pub fn ancilla_expectation(circuit: &BoundCircuit) -> Result<f64> {
    let state = circuit.run()?;
    expectation(&state, &Observable::pauli_z(circuit.n_qubits, 0)?)
}
