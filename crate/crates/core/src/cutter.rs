//! Exact gate cutting.
//!
//! A two-qubit gate crossing the partition is written as
//! `G = Σ_i α_i (A_i ⊗ B_i)`. Substituting that sum into both the bra and the
//! ket of `<0|W† M W|0>` expands the expectation into
//! `Σ_{i,j} conj(α_i) α_j Π_k <0|W_i^k† M_k W_j^k|0>`, one index pair per cut,
//! where every factor lives on a single block.

use std::collections::HashMap;

use nalgebra::Matrix4;
use rayon::prelude::*;

use crate::circuit::{bind, GateKind, GateSpec, ParamCircuit, ParamSlot, PartitionSpec};
use crate::error::{Error, Result};
use crate::qsim::{self, GateMatrix, Mat2, Mat4, Observable, State, C64, I, ONE, ZERO};

/// Singular values at or below this count as zero.
pub const SCHMIDT_CUTOFF: f64 = 1e-12;

/// Largest term count `enumerate_terms` will accept.
pub const MAX_TERMS: u128 = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct CutTerm {
    pub alpha: C64,
    pub left: GateMatrix,
    pub right: GateMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutDecomposition {
    pub terms: Vec<CutTerm>,
    pub schmidt_number: usize,
}

impl CutDecomposition {
    /// `Σ_i α_i left_i ⊗ right_i` as a dense 4x4 matrix.
    pub fn reconstruct(&self) -> Mat4 {
        let mut out = [[ZERO; 4]; 4];
        for t in &self.terms {
            let (GateMatrix::Single { m: a, .. }, GateMatrix::Single { m: b, .. }) = (&t.left, &t.right)
            else {
                unreachable!("cut factors are single-qubit")
            };
            let k = qsim::kron2(a, b);
            for i in 0..4 {
                for j in 0..4 {
                    out[i][j] += t.alpha * k[i][j];
                }
            }
        }
        out
    }

    /// `Σ_i |α_i|²`.
    pub fn weight_norm(&self) -> f64 {
        self.terms.iter().map(|t| t.alpha.norm_sqr()).sum()
    }

    pub fn all_unitary(&self) -> bool {
        self.terms
            .iter()
            .all(|t| t.left.is_unitary() && t.right.is_unitary())
    }
}

const S: Mat2 = [[ONE, ZERO], [ZERO, I]];
const SDAG: Mat2 = [[ONE, ZERO], [ZERO, C64::new(0.0, -1.0)]];

/// `CZ = (1/(1+i)) (S⊗S + i S†⊗S†)`. Term 0 uses S, term 1 uses S†.
pub fn decompose_cz() -> CutDecomposition {
    let denom = ONE + I;
    CutDecomposition {
        terms: vec![
            CutTerm {
                alpha: ONE / denom,
                left: GateMatrix::single(S),
                right: GateMatrix::single(S),
            },
            CutTerm {
                alpha: I / denom,
                left: GateMatrix::single(SDAG),
                right: GateMatrix::single(SDAG),
            },
        ],
        schmidt_number: 2,
    }
}

/// Operator-Schmidt decomposition of a 4x4 matrix through an SVD of its
/// realigned form `R[(a c), (b d)] = g[(a b), (c d)]`.
///
/// Factors are scaled to Frobenius norm √2 (the norm of a 2x2 unitary), so
/// `α_i = s_i / 2` and `Σ|α_i|² = ||g||_F² / 4`, which is 1 for unitary `g`.
pub fn operator_schmidt(g: &Mat4) -> CutDecomposition {
    let realigned = Matrix4::from_fn(|row, col| {
        let (a, c) = (row >> 1, row & 1);
        let (b, d) = (col >> 1, col & 1);
        g[2 * a + b][2 * c + d]
    });
    let svd = realigned.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^H");
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let root2 = std::f64::consts::SQRT_2;
    let terms: Vec<CutTerm> = order
        .into_iter()
        .filter(|&i| svd.singular_values[i] > SCHMIDT_CUTOFF)
        .map(|i| {
            let s = svd.singular_values[i];
            let mut a = [[ZERO; 2]; 2];
            let mut b = [[ZERO; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    a[r][c] = u[(2 * r + c, i)] * root2;
                    b[r][c] = v_t[(i, 2 * r + c)] * root2;
                }
            }
            CutTerm {
                alpha: C64::new(s / 2.0, 0.0),
                left: GateMatrix::single(a),
                right: GateMatrix::single(b),
            }
        })
        .collect();
    CutDecomposition {
        schmidt_number: terms.len(),
        terms,
    }
}

/// A two-qubit gate crossing the partition.
#[derive(Clone, Debug, PartialEq)]
pub struct CutSite {
    /// Index of the gate in the parent circuit.
    pub position: usize,
    pub kind: GateKind,
    /// `(block, local qubit)` of the first and second target.
    pub left: (usize, usize),
    pub right: (usize, usize),
    pub decomposition: CutDecomposition,
}

impl CutSite {
    pub fn schmidt_number(&self) -> usize {
        self.decomposition.schmidt_number
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum CutSide {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum BlockOp {
    Gate(GateSpec),
    Cut { cut: usize, side: CutSide, qubit: usize },
}

/// One block of the parent circuit with its cut sites left open.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTemplate {
    n_qubits: usize,
    ops: Vec<BlockOp>,
    /// Cuts with an endpoint in this block, ascending.
    cuts: Vec<usize>,
    n_theta: usize,
    n_data: usize,
    n_cuts_total: usize,
}

impl BlockTemplate {
    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn cuts(&self) -> &[usize] {
        &self.cuts
    }

    /// Block circuit with each open site replaced by the factor chosen in
    /// `assignment` (one decomposition index per cut, globally indexed).
    pub fn with_factors(&self, sites: &[CutSite], assignment: &[usize]) -> Result<ParamCircuit> {
        let gates = self
            .ops
            .iter()
            .map(|op| match op {
                BlockOp::Gate(g) => g.clone(),
                BlockOp::Cut { cut, side, qubit } => {
                    let term = &sites[*cut].decomposition.terms[assignment[*cut]];
                    let m = match side {
                        CutSide::Left => term.left.clone(),
                        CutSide::Right => term.right.clone(),
                    };
                    GateSpec::generic(m, &[*qubit])
                }
            })
            .collect();
        ParamCircuit::with_counts(self.n_qubits, gates, self.n_theta, self.n_data, 0)
    }

    /// Block circuit with a partition gate `Z^ζ·S` at every open site, where
    /// the ζ slot index is the cut index.
    pub fn with_partition_gates(&self) -> Result<ParamCircuit> {
        let mut gates = Vec::with_capacity(self.ops.len() + self.cuts.len());
        for op in &self.ops {
            match op {
                BlockOp::Gate(g) => gates.push(g.clone()),
                BlockOp::Cut { cut, qubit, .. } => {
                    gates.push(GateSpec::fixed(GateKind::S, &[*qubit]));
                    gates.push(GateSpec::rotation(GateKind::Zpow, *qubit, ParamSlot::Zeta(*cut)));
                }
            }
        }
        ParamCircuit::with_counts(
            self.n_qubits,
            gates,
            self.n_theta,
            self.n_data,
            self.n_cuts_total,
        )
    }
}

/// Splits `circuit` along `part`, decomposing every crossing gate.
///
/// Crossing CZs use `cz` (normally [`decompose_cz`]); crossing generic gates
/// use their operator-Schmidt decomposition. Crossing CNOTs must be
/// rewritten first.
pub fn split_circuit(
    circuit: &ParamCircuit,
    part: &PartitionSpec,
    cz: &CutDecomposition,
) -> Result<(Vec<BlockTemplate>, Vec<CutSite>)> {
    if part.n_qubits() != circuit.n_qubits() {
        return Err(Error::Shape(format!(
            "partition covers {} qubits, circuit has {}",
            part.n_qubits(),
            circuit.n_qubits()
        )));
    }
    if circuit.n_zeta() != 0 {
        return Err(Error::Structure("parent circuit already has partition slots".into()));
    }
    let loc = part.locate();
    let mut ops: Vec<Vec<BlockOp>> = vec![Vec::new(); part.k()];
    let mut sites = Vec::new();
    for (position, g) in circuit.gates().iter().enumerate() {
        let blocks: Vec<usize> = g.targets.iter().map(|&q| loc[q].0).collect();
        if blocks.iter().all(|&b| b == blocks[0]) {
            let mut local = g.clone();
            local.targets = g.targets.iter().map(|&q| loc[q].1).collect();
            ops[blocks[0]].push(BlockOp::Gate(local));
            continue;
        }
        let decomposition = match g.kind {
            GateKind::CZ => cz.clone(),
            GateKind::Generic2Q => match &g.matrix {
                Some(GateMatrix::Double { m, .. }) => operator_schmidt(m),
                _ => return Err(Error::Structure("generic gate without a 4x4 matrix".into())),
            },
            other => {
                return Err(Error::Structure(format!(
                    "cannot cut a {other:?} gate at position {position}; rewrite CNOTs to CZ first"
                )))
            }
        };
        let cut = sites.len();
        let (left, right) = (loc[g.targets[0]], loc[g.targets[1]]);
        ops[left.0].push(BlockOp::Cut {
            cut,
            side: CutSide::Left,
            qubit: left.1,
        });
        ops[right.0].push(BlockOp::Cut {
            cut,
            side: CutSide::Right,
            qubit: right.1,
        });
        sites.push(CutSite {
            position,
            kind: g.kind,
            left,
            right,
            decomposition,
        });
    }
    let n_cuts = sites.len();
    let templates = ops
        .into_iter()
        .enumerate()
        .map(|(k, ops)| {
            let mut cuts: Vec<usize> = ops
                .iter()
                .filter_map(|op| match op {
                    BlockOp::Cut { cut, .. } => Some(*cut),
                    BlockOp::Gate(_) => None,
                })
                .collect();
            cuts.dedup();
            BlockTemplate {
                n_qubits: part.blocks()[k].len(),
                ops,
                cuts,
                n_theta: circuit.n_theta(),
                n_data: circuit.n_data(),
                n_cuts_total: n_cuts,
            }
        })
        .collect();
    Ok((templates, sites))
}

/// One term of the expansion: decomposition indices for the ket and bra
/// copy of every cut, and the coefficient `Π_c conj(α_{bra_c}) α_{ket_c}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub coefficient: C64,
    pub ket: Vec<usize>,
    pub bra: Vec<usize>,
}

/// All terms of the exact partitioned expansion of a circuit.
#[derive(Clone, Debug)]
pub struct CutEnumeration {
    partition: PartitionSpec,
    sites: Vec<CutSite>,
    blocks: Vec<BlockTemplate>,
    n_terms: usize,
}

/// Enumerates the exact expansion using the standard CZ decomposition.
pub fn enumerate_terms(circuit: &ParamCircuit, part: &PartitionSpec) -> Result<CutEnumeration> {
    enumerate_terms_with(circuit, part, &decompose_cz())
}

/// As [`enumerate_terms`] with an explicit CZ decomposition (fault injection
/// in the verification suite uses this).
pub fn enumerate_terms_with(
    circuit: &ParamCircuit,
    part: &PartitionSpec,
    cz: &CutDecomposition,
) -> Result<CutEnumeration> {
    let (blocks, sites) = split_circuit(circuit, part, cz)?;
    let n_terms = sites
        .iter()
        .try_fold(1u128, |acc, s| {
            let sq = (s.schmidt_number() as u128).pow(2);
            acc.checked_mul(sq).filter(|&t| t <= MAX_TERMS).ok_or(acc.saturating_mul(sq))
        })
        .map_err(|terms| Error::Budget {
            terms,
            limit: MAX_TERMS,
        })?;
    Ok(CutEnumeration {
        partition: part.clone(),
        sites,
        blocks,
        n_terms: n_terms as usize,
    })
}

/// Term count for `r` cuts of the given Schmidt number, saturating.
pub fn term_count(r: usize, schmidt_number: usize) -> u128 {
    (schmidt_number as u128)
        .checked_pow(2 * r as u32)
        .unwrap_or(u128::MAX)
}

impl CutEnumeration {
    pub fn r(&self) -> usize {
        self.sites.len()
    }

    pub fn n_terms(&self) -> usize {
        self.n_terms
    }

    pub fn sites(&self) -> &[CutSite] {
        &self.sites
    }

    pub fn blocks(&self) -> &[BlockTemplate] {
        &self.blocks
    }

    pub fn partition(&self) -> &PartitionSpec {
        &self.partition
    }

    pub fn all_cz(&self) -> bool {
        self.sites.iter().all(|s| s.kind == GateKind::CZ)
    }

    /// Decodes term `index`: ket digits are the low-order mixed-radix digits.
    pub fn term(&self, index: usize) -> Result<Term> {
        if index >= self.n_terms {
            return Err(Error::Index(format!("term {index} of {}", self.n_terms)));
        }
        let mut rest = index;
        let mut digits = |s: &CutSite| {
            let n = s.schmidt_number();
            let d = rest % n;
            rest /= n;
            d
        };
        let ket: Vec<usize> = self.sites.iter().map(&mut digits).collect();
        let bra: Vec<usize> = self.sites.iter().map(&mut digits).collect();
        Ok(Term {
            coefficient: self.coefficient(&ket, &bra),
            ket,
            bra,
        })
    }

    pub fn terms(&self) -> impl Iterator<Item = Term> + '_ {
        (0..self.n_terms).map(|i| self.term(i).expect("index in range"))
    }

    fn coefficient(&self, ket: &[usize], bra: &[usize]) -> C64 {
        self.sites
            .iter()
            .zip(ket.iter().zip(bra))
            .map(|(s, (&j, &i))| s.decomposition.terms[i].alpha.conj() * s.decomposition.terms[j].alpha)
            .product()
    }

    /// Concrete block circuit for a per-cut assignment.
    pub fn block_circuit(&self, k: usize, assignment: &[usize]) -> Result<ParamCircuit> {
        if assignment.len() != self.r() {
            return Err(Error::Shape(format!(
                "assignment of length {} for {} cuts",
                assignment.len(),
                self.r()
            )));
        }
        self.blocks[k].with_factors(&self.sites, assignment)
    }

    fn local_radices(&self, k: usize) -> Vec<usize> {
        self.blocks[k]
            .cuts
            .iter()
            .map(|&c| self.sites[c].schmidt_number())
            .collect()
    }
}

/// Result of an exact partitioned evaluation with cache statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedEvaluation {
    pub value: C64,
    pub n_terms: usize,
    /// Block states simulated (one per block and local factor assignment).
    pub distinct_states: usize,
    /// Block inner products formed, deduplicated up to complex conjugation.
    pub distinct_inner_products: usize,
}

/// `Σ_i c_i Π_k <0|U'^{i,k}† M_k U^{i,k}|0>`, real part.
pub fn evaluate_partitioned(
    enumeration: &CutEnumeration,
    x: &[f64],
    theta: &[f64],
    obs: &Observable,
) -> Result<f64> {
    let eval = evaluate_partitioned_detailed(enumeration, x, theta, obs)?;
    if eval.value.im.abs() >= 1e-8 {
        return Err(Error::Domain(format!(
            "partitioned sum has imaginary part {:e}",
            eval.value.im
        )));
    }
    Ok(eval.value.re)
}

struct BlockCache {
    radices: Vec<usize>,
    states: Vec<State>,
    observed: Vec<State>,
    inner: HashMap<(usize, usize), C64>,
}

impl BlockCache {
    fn inner_product(&mut self, bra: usize, ket: usize) -> C64 {
        let (lo, hi) = if bra <= ket { (bra, ket) } else { (ket, bra) };
        let states = &self.states;
        let observed = &self.observed;
        let v = *self
            .inner
            .entry((lo, hi))
            .or_insert_with(|| qsim::inner(states[lo].amplitudes(), observed[hi].amplitudes()));
        if bra <= ket {
            v
        } else {
            v.conj()
        }
    }
}

/// As [`evaluate_partitioned`], returning the complex sum and cache counts.
pub fn evaluate_partitioned_detailed(
    enumeration: &CutEnumeration,
    x: &[f64],
    theta: &[f64],
    obs: &Observable,
) -> Result<PartitionedEvaluation> {
    evaluate_terms(enumeration, x, theta, obs, None)
}

/// Partial sum over the terms in `index_set` (complex in general).
pub fn evaluate_subset(
    enumeration: &CutEnumeration,
    x: &[f64],
    theta: &[f64],
    obs: &Observable,
    index_set: &[usize],
) -> Result<C64> {
    if let Some(&i) = index_set.iter().find(|&&i| i >= enumeration.n_terms) {
        return Err(Error::Index(format!("term {i} of {}", enumeration.n_terms)));
    }
    Ok(evaluate_terms(enumeration, x, theta, obs, Some(index_set))?.value)
}

fn evaluate_terms(
    enumeration: &CutEnumeration,
    x: &[f64],
    theta: &[f64],
    obs: &Observable,
    index_set: Option<&[usize]>,
) -> Result<PartitionedEvaluation> {
    let part = &enumeration.partition;
    if obs.n_qubits() != part.n_qubits() {
        return Err(Error::Shape(format!(
            "observable on {} qubits, partition on {}",
            obs.n_qubits(),
            part.n_qubits()
        )));
    }
    let local_obs = obs.split(part.blocks())?;
    let r = enumeration.r();

    let caches = (0..part.k())
        .into_par_iter()
        .map(|k| -> Result<BlockCache> {
            let radices = enumeration.local_radices(k);
            let n_local: usize = radices.iter().product();
            let mut states = Vec::with_capacity(n_local);
            let mut observed = Vec::with_capacity(n_local);
            let mut assignment = vec![0usize; r];
            for a in 0..n_local {
                let mut rest = a;
                for (&c, &n) in enumeration.blocks[k].cuts.iter().zip(&radices) {
                    assignment[c] = rest % n;
                    rest /= n;
                }
                let circuit = enumeration.block_circuit(k, &assignment)?;
                let state = bind(&circuit, x, theta, &[])?.run()?;
                observed.push(local_obs[k].apply(&state)?);
                states.push(state);
            }
            Ok(BlockCache {
                radices,
                states,
                observed,
                inner: HashMap::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut caches = caches;

    let terms: Box<dyn Iterator<Item = Term>> = match index_set {
        Some(set) => Box::new(set.iter().map(|&i| enumeration.term(i).expect("checked by caller"))),
        None => Box::new(enumeration.terms()),
    };
    let mut total = ZERO;
    for t in terms {
        let mut prod = t.coefficient;
        for (k, cache) in caches.iter_mut().enumerate() {
            let cuts = &enumeration.blocks[k].cuts;
            let local = |digits: &[usize]| {
                cuts.iter()
                    .zip(&cache.radices)
                    .rev()
                    .fold(0usize, |acc, (&c, &n)| acc * n + digits[c])
            };
            let (b, kt) = (local(&t.bra), local(&t.ket));
            prod *= cache.inner_product(b, kt);
        }
        total += prod;
    }
    Ok(PartitionedEvaluation {
        value: total,
        n_terms: index_set.map_or(enumeration.n_terms, <[usize]>::len),
        distinct_states: caches.iter().map(|c| c.states.len()).sum(),
        distinct_inner_products: caches.iter().map(|c| c.inner.len()).sum(),
    })
}

/// ζ rows (ket columns `0..r`, bra columns `r..2r`) and weights λ = c_i that
/// make the reduced model reproduce the chosen terms exactly.
pub fn term_to_rpm_params(
    enumeration: &CutEnumeration,
    index_set: &[usize],
) -> Result<(Vec<Vec<f64>>, Vec<C64>)> {
    if !enumeration.all_cz() {
        return Err(Error::Structure(
            "partition-gate parameters exist only for CZ cuts".into(),
        ));
    }
    let mut zeta = Vec::with_capacity(index_set.len());
    let mut lambda = Vec::with_capacity(index_set.len());
    for &i in index_set {
        let t = enumeration.term(i)?;
        // decomposition index 0 is S (ζ = 0), index 1 is S† (ζ = 1)
        let row = t.ket.iter().chain(&t.bra).map(|&d| d as f64).collect();
        zeta.push(row);
        lambda.push(t.coefficient);
    }
    Ok((zeta, lambda))
}
