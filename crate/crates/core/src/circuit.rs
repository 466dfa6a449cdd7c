//! Circuit IR, parameter binding, the hardware-efficient ansatz and
//! partition bookkeeping.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qsim::{BoundCircuit, BoundGate, GateMatrix, Mat2, Mat4, C64, I, MAX_QUBITS, ONE, ZERO};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateKind {
    Ry,
    Rz,
    S,
    Sdag,
    H,
    X,
    Z,
    Zpow,
    CZ,
    CNOT,
    /// Explicit 2x2 matrix; used for operator-Schmidt cut factors.
    Generic1Q,
    Generic2Q,
}

impl GateKind {
    pub fn arity(self) -> usize {
        match self {
            GateKind::CZ | GateKind::CNOT | GateKind::Generic2Q => 2,
            _ => 1,
        }
    }

    /// Kinds whose matrix depends on an angle.
    pub fn is_parametric(self) -> bool {
        matches!(self, GateKind::Ry | GateKind::Rz | GateKind::Zpow)
    }

    fn name(self) -> &'static str {
        match self {
            GateKind::Ry => "Ry",
            GateKind::Rz => "Rz",
            GateKind::S => "S",
            GateKind::Sdag => "Sdag",
            GateKind::H => "H",
            GateKind::X => "X",
            GateKind::Z => "Z",
            GateKind::Zpow => "Zpow",
            GateKind::CZ => "CZ",
            GateKind::CNOT => "CNOT",
            GateKind::Generic1Q => "Generic1Q",
            GateKind::Generic2Q => "Generic2Q",
        }
    }
}

impl FromStr for GateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "Ry" => GateKind::Ry,
            "Rz" => GateKind::Rz,
            "S" => GateKind::S,
            "Sdag" => GateKind::Sdag,
            "H" => GateKind::H,
            "X" => GateKind::X,
            "Z" => GateKind::Z,
            "Zpow" => GateKind::Zpow,
            "CZ" => GateKind::CZ,
            "CNOT" => GateKind::CNOT,
            "Generic1Q" => GateKind::Generic1Q,
            "Generic2Q" => GateKind::Generic2Q,
            other => return Err(Error::Format(format!("unknown gate kind {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ParamSlot {
    None,
    /// angle = scale * x[index]
    Data { index: usize, scale: f64 },
    Theta(usize),
    Zeta(usize),
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateSpec {
    pub kind: GateKind,
    pub targets: Vec<usize>,
    pub slot: ParamSlot,
    /// Present exactly for the generic kinds.
    pub matrix: Option<GateMatrix>,
}

impl GateSpec {
    pub fn fixed(kind: GateKind, targets: &[usize]) -> Self {
        Self {
            kind,
            targets: targets.to_vec(),
            slot: ParamSlot::None,
            matrix: None,
        }
    }

    pub fn rotation(kind: GateKind, target: usize, slot: ParamSlot) -> Self {
        Self {
            kind,
            targets: vec![target],
            slot,
            matrix: None,
        }
    }

    pub fn generic(matrix: GateMatrix, targets: &[usize]) -> Self {
        let kind = if matrix.arity() == 1 {
            GateKind::Generic1Q
        } else {
            GateKind::Generic2Q
        };
        Self {
            kind,
            targets: targets.to_vec(),
            slot: ParamSlot::None,
            matrix: Some(matrix),
        }
    }

    fn validate(&self, n_qubits: usize) -> Result<()> {
        if self.targets.len() != self.kind.arity() {
            return Err(Error::Index(format!(
                "{} with {} targets",
                self.kind.name(),
                self.targets.len()
            )));
        }
        if let Some(q) = self.targets.iter().find(|&&q| q >= n_qubits) {
            return Err(Error::Index(format!("target {q} outside {n_qubits} qubits")));
        }
        if self.targets.len() == 2 && self.targets[0] == self.targets[1] {
            return Err(Error::Index(format!("duplicate target {}", self.targets[0])));
        }
        let has_slot = !matches!(self.slot, ParamSlot::None);
        if self.kind.is_parametric() != has_slot {
            return Err(Error::Structure(format!(
                "{} gate with slot {:?}",
                self.kind.name(),
                self.slot
            )));
        }
        let generic = matches!(self.kind, GateKind::Generic1Q | GateKind::Generic2Q);
        match (&self.matrix, generic) {
            (Some(m), true) if m.arity() == self.kind.arity() => Ok(()),
            (None, false) => Ok(()),
            _ => Err(Error::Structure(format!(
                "{} gate with mismatched explicit matrix",
                self.kind.name()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCircuit {
    n_qubits: usize,
    gates: Vec<GateSpec>,
    n_theta: usize,
    n_data: usize,
    n_zeta: usize,
}

impl ParamCircuit {
    /// Builds a circuit whose slot counts are inferred from the gates; every
    /// index below each count must be used.
    pub fn new(n_qubits: usize, gates: Vec<GateSpec>) -> Result<Self> {
        let mut used = [Vec::new(), Vec::new(), Vec::new()];
        for g in &gates {
            match g.slot {
                ParamSlot::Theta(i) => used[0].push(i),
                ParamSlot::Data { index, .. } => used[1].push(index),
                ParamSlot::Zeta(i) => used[2].push(i),
                _ => {}
            }
        }
        let mut counts = [0; 3];
        for (count, idx) in counts.iter_mut().zip(used.iter_mut()) {
            idx.sort_unstable();
            idx.dedup();
            *count = idx.last().map_or(0, |m| m + 1);
            if idx.len() != *count {
                return Err(Error::Structure("parameter indices are not contiguous".into()));
            }
        }
        Self::with_counts(n_qubits, gates, counts[0], counts[1], counts[2])
    }

    /// Builds a circuit with explicit slot counts; indices need only be in range.
    pub fn with_counts(
        n_qubits: usize,
        gates: Vec<GateSpec>,
        n_theta: usize,
        n_data: usize,
        n_zeta: usize,
    ) -> Result<Self> {
        if n_qubits == 0 {
            return Err(Error::Size("circuit on zero qubits".into()));
        }
        for g in &gates {
            g.validate(n_qubits)?;
            let (idx, count, what) = match g.slot {
                ParamSlot::Theta(i) => (i, n_theta, "theta"),
                ParamSlot::Data { index, .. } => (index, n_data, "data"),
                ParamSlot::Zeta(i) => (i, n_zeta, "zeta"),
                _ => continue,
            };
            if idx >= count {
                return Err(Error::Index(format!("{what} index {idx} >= {count}")));
            }
        }
        Ok(Self {
            n_qubits,
            gates,
            n_theta,
            n_data,
            n_zeta,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn gates(&self) -> &[GateSpec] {
        &self.gates
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn n_data(&self) -> usize {
        self.n_data
    }

    pub fn n_zeta(&self) -> usize {
        self.n_zeta
    }

    /// Serializes to the one-gate-per-line text format.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# qubits={} theta={} data={} zeta={}\n",
            self.n_qubits, self.n_theta, self.n_data, self.n_zeta
        );
        for g in &self.gates {
            let targets = g
                .targets
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",");
            let _ = write!(out, "{} {} {}", g.kind.name(), targets, g.slot);
            if let Some(m) = &g.matrix {
                let entries = m
                    .entries()
                    .iter()
                    .map(|c| format!("{:e}:{:e}", c.re, c.im))
                    .collect::<Vec<_>>()
                    .join(",");
                let _ = write!(out, " {entries}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the text format written by [`ParamCircuit::to_text`].
    pub fn from_text(text: &str) -> Result<Self> {
        let mut header: Option<[usize; 4]> = None;
        let mut gates = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut vals = [0usize; 4];
                let mut found = 0;
                for (slot, key) in ["qubits", "theta", "data", "zeta"].iter().enumerate() {
                    if let Some(v) = rest
                        .split_whitespace()
                        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
                    {
                        vals[slot] = v.parse().map_err(|_| bad_line(lineno, line))?;
                        found += 1;
                    }
                }
                if found == 4 {
                    header = Some(vals);
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 3 {
                return Err(bad_line(lineno, line));
            }
            let kind: GateKind = fields[0].parse()?;
            let targets = fields[1]
                .split(',')
                .map(|t| t.parse::<usize>().map_err(|_| bad_line(lineno, line)))
                .collect::<Result<Vec<_>>>()?;
            let slot: ParamSlot = fields[2].parse()?;
            let matrix = match fields.get(3) {
                Some(entries) => Some(parse_matrix(entries, kind.arity()).ok_or_else(|| bad_line(lineno, line))?),
                None => None,
            };
            gates.push(GateSpec {
                kind,
                targets,
                slot,
                matrix,
            });
        }
        let [n, t, d, z] = header.ok_or_else(|| Error::Format("missing header line".into()))?;
        Self::with_counts(n, gates, t, d, z)
    }
}

fn bad_line(lineno: usize, line: &str) -> Error {
    Error::Format(format!("line {}: {line:?}", lineno + 1))
}

fn parse_matrix(text: &str, arity: usize) -> Option<GateMatrix> {
    let vals = text
        .split(',')
        .map(|e| {
            let (re, im) = e.split_once(':')?;
            Some(C64::new(re.parse().ok()?, im.parse().ok()?))
        })
        .collect::<Option<Vec<_>>>()?;
    match arity {
        1 if vals.len() == 4 => Some(GateMatrix::single([[vals[0], vals[1]], [vals[2], vals[3]]])),
        2 if vals.len() == 16 => {
            let mut m = [[ZERO; 4]; 4];
            for (i, v) in vals.into_iter().enumerate() {
                m[i / 4][i % 4] = v;
            }
            Some(GateMatrix::double(m))
        }
        _ => None,
    }
}

impl fmt::Display for ParamSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamSlot::None => write!(f, "-"),
            ParamSlot::Data { index, scale } => write!(f, "x{index}*{scale:?}"),
            ParamSlot::Theta(i) => write!(f, "t{i}"),
            ParamSlot::Zeta(i) => write!(f, "z{i}"),
            ParamSlot::Constant(v) => write!(f, "c{v:?}"),
        }
    }
}

impl FromStr for ParamSlot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad slot {s:?}"));
        if s == "-" {
            return Ok(ParamSlot::None);
        }
        let (tag, rest) = s.split_at(1);
        match tag {
            "x" => {
                let (idx, scale) = rest.split_once('*').ok_or_else(bad)?;
                Ok(ParamSlot::Data {
                    index: idx.parse().map_err(|_| bad())?,
                    scale: scale.parse().map_err(|_| bad())?,
                })
            }
            "t" => Ok(ParamSlot::Theta(rest.parse().map_err(|_| bad())?)),
            "z" => Ok(ParamSlot::Zeta(rest.parse().map_err(|_| bad())?)),
            "c" => Ok(ParamSlot::Constant(rest.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Line,
    Ring,
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(Topology::Line),
            "ring" => Ok(Topology::Ring),
            _ => Err(Error::Config(format!("unknown topology {s:?}"))),
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::Line => "line",
            Topology::Ring => "ring",
        })
    }
}

/// Hardware-efficient ansatz: an `Ry(π·x_q)` encoding layer followed by
/// `depth` layers of per-qubit `Rz(θ)·Ry(θ)` and a CZ chain.
pub fn build_hea(n_qubits: usize, depth: usize, topology: Topology) -> Result<ParamCircuit> {
    if n_qubits < 2 {
        return Err(Error::Size(format!("ansatz needs at least 2 qubits, got {n_qubits}")));
    }
    if depth == 0 {
        return Err(Error::Size("ansatz depth must be at least 1".into()));
    }
    let mut gates = Vec::new();
    for q in 0..n_qubits {
        gates.push(GateSpec::rotation(
            GateKind::Ry,
            q,
            ParamSlot::Data { index: q, scale: PI },
        ));
    }
    let mut t = 0;
    for _ in 0..depth {
        for q in 0..n_qubits {
            gates.push(GateSpec::rotation(GateKind::Rz, q, ParamSlot::Theta(t)));
            gates.push(GateSpec::rotation(GateKind::Ry, q, ParamSlot::Theta(t + 1)));
            t += 2;
        }
        for q in 0..n_qubits - 1 {
            gates.push(GateSpec::fixed(GateKind::CZ, &[q, q + 1]));
        }
        if topology == Topology::Ring && n_qubits > 2 {
            gates.push(GateSpec::fixed(GateKind::CZ, &[n_qubits - 1, 0]));
        }
    }
    ParamCircuit::new(n_qubits, gates)
}

pub(crate) fn ry(angle: f64) -> Mat2 {
    let (s, c) = (0.5 * angle).sin_cos();
    [[C64::new(c, 0.0), C64::new(-s, 0.0)], [C64::new(s, 0.0), C64::new(c, 0.0)]]
}

pub(crate) fn rz(angle: f64) -> Mat2 {
    [
        [C64::from_polar(1.0, -0.5 * angle), ZERO],
        [ZERO, C64::from_polar(1.0, 0.5 * angle)],
    ]
}

pub(crate) fn zpow(zeta: f64) -> Mat2 {
    [[ONE, ZERO], [ZERO, C64::from_polar(1.0, PI * zeta)]]
}

/// `d/dθ` of the parametric single-qubit kinds.
pub(crate) fn derivative_matrix(kind: GateKind, angle: f64) -> Mat2 {
    match kind {
        GateKind::Ry => {
            let (s, c) = (0.5 * angle).sin_cos();
            [
                [C64::new(-0.5 * s, 0.0), C64::new(-0.5 * c, 0.0)],
                [C64::new(0.5 * c, 0.0), C64::new(-0.5 * s, 0.0)],
            ]
        }
        GateKind::Rz => [
            [C64::from_polar(0.5, -0.5 * angle) * -I, ZERO],
            [ZERO, C64::from_polar(0.5, 0.5 * angle) * I],
        ],
        GateKind::Zpow => [[ZERO, ZERO], [ZERO, C64::from_polar(PI, PI * angle) * I]],
        other => unreachable!("{other:?} has no angle"),
    }
}

const S_MAT: Mat2 = [[ONE, ZERO], [ZERO, I]];
const SDAG_MAT: Mat2 = [[ONE, ZERO], [ZERO, C64::new(0.0, -1.0)]];
const X_MAT: Mat2 = [[ZERO, ONE], [ONE, ZERO]];
const Z_MAT: Mat2 = [[ONE, ZERO], [ZERO, C64::new(-1.0, 0.0)]];

fn h_mat() -> Mat2 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    [[C64::new(s, 0.0), C64::new(s, 0.0)], [C64::new(s, 0.0), C64::new(-s, 0.0)]]
}

pub(crate) const CZ_MAT: Mat4 = [
    [ONE, ZERO, ZERO, ZERO],
    [ZERO, ONE, ZERO, ZERO],
    [ZERO, ZERO, ONE, ZERO],
    [ZERO, ZERO, ZERO, C64::new(-1.0, 0.0)],
];

pub(crate) const CNOT_MAT: Mat4 = [
    [ONE, ZERO, ZERO, ZERO],
    [ZERO, ONE, ZERO, ZERO],
    [ZERO, ZERO, ZERO, ONE],
    [ZERO, ZERO, ONE, ZERO],
];

/// Resolves a slot to its angle.
#[inline]
pub(crate) fn slot_angle(slot: ParamSlot, x: &[f64], theta: &[f64], zeta: &[f64]) -> f64 {
    match slot {
        ParamSlot::None => 0.0,
        ParamSlot::Data { index, scale } => scale * x[index],
        ParamSlot::Theta(i) => theta[i],
        ParamSlot::Zeta(i) => zeta[i],
        ParamSlot::Constant(v) => v,
    }
}

/// Concrete matrix of a gate at a given angle.
pub(crate) fn gate_matrix_at(spec: &GateSpec, angle: f64) -> GateMatrix {
    let single = |m: Mat2| GateMatrix::Single { m, unitary: true };
    match spec.kind {
        GateKind::Ry => single(ry(angle)),
        GateKind::Rz => single(rz(angle)),
        GateKind::Zpow => single(zpow(angle)),
        GateKind::S => single(S_MAT),
        GateKind::Sdag => single(SDAG_MAT),
        GateKind::H => single(h_mat()),
        GateKind::X => single(X_MAT),
        GateKind::Z => single(Z_MAT),
        GateKind::CZ => GateMatrix::Double { m: CZ_MAT, unitary: true },
        GateKind::CNOT => GateMatrix::Double { m: CNOT_MAT, unitary: true },
        GateKind::Generic1Q | GateKind::Generic2Q => spec
            .matrix
            .clone()
            .expect("generic gate carries a matrix"),
    }
}

/// Resolves every slot of `circuit` to a concrete gate.
pub fn bind(circuit: &ParamCircuit, x: &[f64], theta: &[f64], zeta: &[f64]) -> Result<BoundCircuit> {
    for (what, got, want) in [
        ("feature", x.len(), circuit.n_data),
        ("theta", theta.len(), circuit.n_theta),
        ("zeta", zeta.len(), circuit.n_zeta),
    ] {
        if got != want {
            return Err(Error::Shape(format!("{what} vector of length {got}, expected {want}")));
        }
    }
    if circuit.n_qubits > MAX_QUBITS {
        return Err(Error::Size(format!(
            "{} qubits exceed the simulator limit",
            circuit.n_qubits
        )));
    }
    let gates = circuit
        .gates
        .iter()
        .map(|g| BoundGate {
            matrix: gate_matrix_at(g, slot_angle(g.slot, x, theta, zeta)),
            targets: g.targets.clone(),
            partition: matches!(g.slot, ParamSlot::Zeta(_)),
        })
        .collect();
    Ok(BoundCircuit {
        n_qubits: circuit.n_qubits,
        gates,
    })
}

/// Partition gate `Z^ζ·S = diag(1, e^{i(πζ + π/2)})`: S at ζ = 0, S† at ζ = 1.
pub fn partition_gate(zeta: f64) -> GateMatrix {
    GateMatrix::Single {
        m: [[ONE, ZERO], [ZERO, C64::from_polar(1.0, PI * zeta + FRAC_PI_2)]],
        unitary: true,
    }
}

/// Replaces every CNOT by `H(target)·CZ·H(target)`.
pub fn rewrite_cnot_to_cz(circuit: &ParamCircuit) -> ParamCircuit {
    let mut gates = Vec::with_capacity(circuit.gates.len());
    for g in &circuit.gates {
        if g.kind == GateKind::CNOT {
            let target = g.targets[1];
            gates.push(GateSpec::fixed(GateKind::H, &[target]));
            gates.push(GateSpec::fixed(GateKind::CZ, &g.targets));
            gates.push(GateSpec::fixed(GateKind::H, &[target]));
        } else {
            gates.push(g.clone());
        }
    }
    ParamCircuit {
        gates,
        ..circuit.clone()
    }
}

/// Disjoint qubit blocks covering the register.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    blocks: Vec<Vec<usize>>,
}

impl PartitionSpec {
    pub fn new(blocks: Vec<Vec<usize>>) -> Result<Self> {
        let n: usize = blocks.iter().map(Vec::len).sum();
        let mut seen = vec![false; n];
        for b in &blocks {
            if b.is_empty() {
                return Err(Error::Shape("empty block".into()));
            }
            if b.len() > MAX_QUBITS {
                return Err(Error::Size(format!("block of {} qubits", b.len())));
            }
            for &q in b {
                if q >= n || seen[q] {
                    return Err(Error::Shape(format!(
                        "blocks are not a partition of 0..{n} (qubit {q})"
                    )));
                }
                seen[q] = true;
            }
        }
        Ok(Self { blocks })
    }

    /// `k` contiguous equal blocks of `n_qubits`.
    pub fn contiguous(n_qubits: usize, k: usize) -> Result<Self> {
        if k == 0 || n_qubits % k != 0 {
            return Err(Error::Config(format!("{n_qubits} qubits do not split into {k} equal blocks")));
        }
        let w = n_qubits / k;
        Self::new((0..k).map(|b| (b * w..(b + 1) * w).collect()).collect())
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_qubits(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    /// `(block, position within block)` for every qubit.
    pub fn locate(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(0, 0); self.n_qubits()];
        for (k, b) in self.blocks.iter().enumerate() {
            for (local, &q) in b.iter().enumerate() {
                out[q] = (k, local);
            }
        }
        out
    }
}

/// Positions of the two-qubit gates whose targets lie in different blocks.
pub fn crossing_gates(circuit: &ParamCircuit, part: &PartitionSpec) -> Result<Vec<usize>> {
    if part.n_qubits() != circuit.n_qubits {
        return Err(Error::Shape(format!(
            "partition covers {} qubits, circuit has {}",
            part.n_qubits(),
            circuit.n_qubits
        )));
    }
    let loc = part.locate();
    Ok(circuit
        .gates
        .iter()
        .enumerate()
        .filter(|(_, g)| g.targets.len() == 2 && loc[g.targets[0]].0 != loc[g.targets[1]].0)
        .map(|(i, _)| i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim::{expectation, Observable};

    fn close(a: C64, b: C64) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn hea_counts() {
        let c = build_hea(2, 1, Topology::Line).unwrap();
        assert_eq!(c.gates().len(), 7);
        assert_eq!(c.n_theta(), 4);
        let c = build_hea(10, 3, Topology::Ring).unwrap();
        assert_eq!((c.n_theta(), c.n_data()), (60, 10));
        assert!(matches!(build_hea(1, 1, Topology::Line), Err(Error::Size(_))));
        assert_eq!(build_hea(5, 2, Topology::Ring).unwrap(), build_hea(5, 2, Topology::Ring).unwrap());
    }

    #[test]
    fn bind_examples() {
        let c = build_hea(3, 1, Topology::Line).unwrap();
        let bound = bind(&c, &[0.0; 3], &[0.0; 6], &[]).unwrap();
        let state = bound.run().unwrap();
        // all rotations are identity, CZs leave |000> alone
        assert!(close(state.amplitudes()[0], ONE));

        let bound = bind(&c, &[1.0; 3], &[0.0; 6], &[]).unwrap();
        let state = bound.run().unwrap();
        assert!((state.amplitudes()[7].norm() - 1.0).abs() < 1e-12);

        assert!(matches!(bind(&c, &[0.0; 3], &[0.0; 5], &[]), Err(Error::Shape(_))));
        assert!(matches!(bind(&c, &[0.0; 2], &[0.0; 6], &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn partition_gate_endpoints() {
        let GateMatrix::Single { m, .. } = partition_gate(0.0) else { unreachable!() };
        assert!(close(m[0][0], ONE) && close(m[1][1], I));
        let GateMatrix::Single { m, .. } = partition_gate(1.0) else { unreachable!() };
        assert!(close(m[1][1], -I));
        let GateMatrix::Single { m, .. } = partition_gate(0.5) else { unreachable!() };
        assert!(close(m[1][1], C64::new(-1.0, 0.0)) && close(m[0][1], ZERO));
        // matches Z^ζ · S
        let zeta = 0.37;
        let GateMatrix::Single { m, .. } = partition_gate(zeta) else { unreachable!() };
        let prod = crate::qsim::matmul2(&zpow(zeta), &S_MAT);
        assert!(close(m[1][1], prod[1][1]));
        assert!(partition_gate(-2.3).is_unitary());
    }

    #[test]
    fn cnot_rewrite() {
        let c = ParamCircuit::new(2, vec![GateSpec::fixed(GateKind::CNOT, &[0, 1])]).unwrap();
        let r = rewrite_cnot_to_cz(&c);
        assert_eq!(r.gates().len(), 3);
        let u = bind(&r, &[], &[], &[]).unwrap().unitary().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!(close(u[i][j], CNOT_MAT[i][j]));
            }
        }
        // CNOT(0->1)|10> = |11>
        let prep = GateSpec::fixed(GateKind::X, &[0]);
        for circ in [&c, &r] {
            let mut gates = vec![prep.clone()];
            gates.extend(circ.gates().iter().cloned());
            let full = ParamCircuit::new(2, gates).unwrap();
            let s = bind(&full, &[], &[], &[]).unwrap().run().unwrap();
            assert!(close(s.amplitudes()[3], ONE));
        }
        let plain = build_hea(3, 1, Topology::Line).unwrap();
        assert_eq!(rewrite_cnot_to_cz(&plain), plain);
    }

    #[test]
    fn crossing_examples() {
        let c = build_hea(10, 3, Topology::Ring).unwrap();
        let p = PartitionSpec::contiguous(10, 2).unwrap();
        assert_eq!(crossing_gates(&c, &p).unwrap().len(), 6);
        let one = PartitionSpec::contiguous(10, 1).unwrap();
        assert!(crossing_gates(&c, &one).unwrap().is_empty());
        let c4 = build_hea(4, 1, Topology::Line).unwrap();
        let p4 = PartitionSpec::new(vec![vec![0, 1], vec![2, 3]]).unwrap();
        assert_eq!(crossing_gates(&c4, &p4).unwrap().len(), 1);
        assert!(matches!(crossing_gates(&c4, &p), Err(Error::Shape(_))));
        // 64-qubit, 8 blocks at depth 3
        let big = build_hea(64, 3, Topology::Line).unwrap();
        let p8 = PartitionSpec::contiguous(64, 8).unwrap();
        assert_eq!(crossing_gates(&big, &p8).unwrap().len(), 21);
        let big = build_hea(64, 3, Topology::Ring).unwrap();
        assert_eq!(crossing_gates(&big, &p8).unwrap().len(), 24);
    }

    #[test]
    fn partition_validation() {
        assert!(PartitionSpec::new(vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(PartitionSpec::new(vec![vec![0, 2]]).is_err());
        assert!(PartitionSpec::new(vec![(0..15).collect()]).is_err());
        assert!(PartitionSpec::contiguous(10, 3).is_err());
    }

    #[test]
    fn text_format_roundtrip() {
        let mut c = build_hea(3, 2, Topology::Ring).unwrap();
        let mut gates = c.gates().to_vec();
        gates.push(GateSpec::rotation(GateKind::Zpow, 1, ParamSlot::Zeta(0)));
        gates.push(GateSpec::rotation(GateKind::Rz, 2, ParamSlot::Constant(0.25)));
        gates.push(GateSpec::generic(GateMatrix::single(ry(0.3)), &[0]));
        c = ParamCircuit::new(3, gates).unwrap();
        let text = c.to_text();
        assert!(text.contains("Ry 0 x0*3.141592653589793"));
        assert!(text.contains("CZ 2,0 -"));
        assert!(text.contains("Zpow 1 z0"));
        assert_eq!(ParamCircuit::from_text(&text).unwrap(), c);
        assert!(ParamCircuit::from_text("Ry 0 t0\n").is_err());
        assert!(ParamCircuit::from_text("# qubits=1 theta=1 data=0 zeta=0\nFoo 0 -\n").is_err());
    }

    #[test]
    fn slot_validation() {
        let bad = GateSpec::rotation(GateKind::Ry, 0, ParamSlot::None);
        assert!(ParamCircuit::new(1, vec![bad]).is_err());
        let gap = vec![
            GateSpec::rotation(GateKind::Ry, 0, ParamSlot::Theta(0)),
            GateSpec::rotation(GateKind::Ry, 0, ParamSlot::Theta(2)),
        ];
        assert!(ParamCircuit::new(1, gap.clone()).is_err());
        assert!(ParamCircuit::with_counts(1, gap, 3, 0, 0).is_ok());
    }

    #[test]
    fn hea_expectation_two_qubits() {
        // encode, then one layer: check against explicit matrices for a sanity value
        let c = build_hea(2, 1, Topology::Line).unwrap();
        let x = [0.2, 0.9];
        let theta = [0.0, 0.4, 0.0, -0.6];
        let s = bind(&c, &x, &theta, &[]).unwrap().run().unwrap();
        let zz = Observable::z_string(2, &[0, 1]).unwrap();
        let a = std::f64::consts::PI * x[0] + theta[1];
        let b = std::f64::consts::PI * x[1] + theta[3];
        assert!((expectation(&s, &zz).unwrap() - a.cos() * b.cos()).abs() < 1e-12);
    }
}
