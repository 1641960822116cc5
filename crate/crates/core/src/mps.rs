//! Matrix product state simulation.
//!
//! Site `i` holds a tensor with bonds `(left virtual, physical, right virtual)`.
//! The two boundary virtual bonds have dimension 1 and every physical bond has
//! dimension 2. Qubit 0 is the leftmost site and the most significant bit of
//! the dense amplitude index.
//!
//! Two-qubit gates act on neighbouring sites only. Before each split the
//! orthogonality centre is moved onto the gate, so the singular values of the
//! split are the Schmidt coefficients of the full state and dropping the
//! smallest of them costs exactly their squared weight in fidelity.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::Serialize;
use thiserror::Error;

use crate::ansatz::{Circuit, Gate};
use crate::tensor::{matmul, retained_rank, svd_sorted, DenseTensor, TensorError, Truncation};

/// Default discarded-weight budget per two-qubit gate.
pub const DEFAULT_TRUNC_BUDGET: f64 = 1e-16;

/// Largest register that [`MpsState::to_statevector`] will expand.
pub const MAX_DENSE_QUBITS: usize = 20;

const UNITARITY_TOL: f64 = 1e-10;

const BYTES_PER_ENTRY: usize = 16;

const MAGIC: &[u8; 4] = b"QMPS";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpsError {
    #[error("an MPS needs at least one qubit")]
    NoQubits,
    #[error("qubit {qubit} is out of range for {m} qubits")]
    QubitOutOfRange { qubit: usize, m: usize },
    #[error("two-qubit gate on ({0}, {1}) is not between neighbouring sites")]
    NotAdjacent(usize, usize),
    #[error("gate matrix deviates from unitary by {0:e}")]
    NonUnitary(f64),
    #[error("gate matrix has {actual} entries, expected {expected}")]
    GateShape { expected: usize, actual: usize },
    #[error("states have {0} and {1} qubits")]
    QubitCountMismatch(usize, usize),
    #[error("dense expansion limited to {MAX_DENSE_QUBITS} qubits, state has {0}")]
    TooLarge(usize),
    #[error("site {site}: {reason}")]
    InvalidSite { site: usize, reason: String },
    #[error("malformed serialized state: {0}")]
    Decode(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    Zero,
    Plus,
}

/// Which tensor of a split receives the singular values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Absorb {
    Left,
    #[default]
    Right,
}

/// Resource snapshot of a state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimStats {
    /// Largest virtual bond dimension reached over the state's lifetime.
    pub max_chi: usize,
    /// Largest virtual bond dimension right now.
    pub current_chi: usize,
    pub entry_count: usize,
    pub memory_bytes: usize,
    pub gate_count_1q: usize,
    pub gate_count_2q: usize,
    pub accumulated_discard: f64,
    pub wall_time_per_phase: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default)]
struct Counters {
    peak_chi: usize,
    gates_1q: usize,
    gates_2q: usize,
    t_single: f64,
    t_two: f64,
    t_canon: f64,
}

#[derive(Debug, Clone)]
pub struct MpsState {
    sites: Vec<DenseTensor>,
    trunc_budget_per_gate: f64,
    accumulated_discard: f64,
    ortho_center: Option<usize>,
    counters: Counters,
}

impl PartialEq for MpsState {
    fn eq(&self, other: &Self) -> bool {
        self.sites == other.sites
            && self.trunc_budget_per_gate == other.trunc_budget_per_gate
            && self.accumulated_discard == other.accumulated_discard
            && self.ortho_center == other.ortho_center
    }
}

impl MpsState {
    pub fn new(m: usize, basis: Basis) -> Result<Self, MpsError> {
        if m == 0 {
            return Err(MpsError::NoQubits);
        }
        let amp = match basis {
            Basis::Zero => [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
            Basis::Plus => [C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0); 2],
        };
        let site = DenseTensor::new(vec![1, 2, 1], amp.to_vec())?;
        Ok(Self {
            sites: vec![site; m],
            trunc_budget_per_gate: DEFAULT_TRUNC_BUDGET,
            accumulated_discard: 0.0,
            // normalized product states are canonical about every site
            ortho_center: Some(0),
            counters: Counters {
                peak_chi: 1,
                ..Counters::default()
            },
        })
    }

    /// Assembles a state from raw site tensors. No canonical form is assumed.
    pub fn from_sites(sites: Vec<DenseTensor>) -> Result<Self, MpsError> {
        if sites.is_empty() {
            return Err(MpsError::NoQubits);
        }
        let m = sites.len();
        for (i, s) in sites.iter().enumerate() {
            let invalid = |reason: String| MpsError::InvalidSite { site: i, reason };
            if s.rank() != 3 {
                return Err(invalid(format!("rank {} instead of 3", s.rank())));
            }
            if s.shape()[1] != 2 {
                return Err(invalid(format!("physical dimension {}", s.shape()[1])));
            }
            if i == 0 && s.shape()[0] != 1 {
                return Err(invalid("left boundary bond must be 1".into()));
            }
            if i == m - 1 && s.shape()[2] != 1 {
                return Err(invalid("right boundary bond must be 1".into()));
            }
            if i + 1 < m && s.shape()[2] != sites[i + 1].shape()[0] {
                return Err(invalid(format!(
                    "right bond {} does not match next left bond {}",
                    s.shape()[2],
                    sites[i + 1].shape()[0]
                )));
            }
        }
        let peak_chi = sites.iter().map(|s| s.shape()[2]).max().unwrap_or(1);
        Ok(Self {
            sites,
            trunc_budget_per_gate: DEFAULT_TRUNC_BUDGET,
            accumulated_discard: 0.0,
            ortho_center: None,
            counters: Counters {
                peak_chi,
                ..Counters::default()
            },
        })
    }

    pub fn with_budget(mut self, budget: f64) -> Self {
        self.trunc_budget_per_gate = budget;
        self
    }

    pub fn num_qubits(&self) -> usize {
        self.sites.len()
    }

    pub fn sites(&self) -> &[DenseTensor] {
        &self.sites
    }

    pub fn trunc_budget_per_gate(&self) -> f64 {
        self.trunc_budget_per_gate
    }

    pub fn accumulated_discard(&self) -> f64 {
        self.accumulated_discard
    }

    pub fn ortho_center(&self) -> Option<usize> {
        self.ortho_center
    }

    /// Virtual bond dimensions between neighbouring sites, `m - 1` values.
    pub fn bond_dims(&self) -> Vec<usize> {
        self.sites[..self.sites.len() - 1]
            .iter()
            .map(|s| s.shape()[2])
            .collect()
    }

    pub fn max_bond_dim(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    pub fn entry_count(&self) -> usize {
        self.sites.iter().map(DenseTensor::len).sum()
    }

    pub fn memory_bytes(&self) -> usize {
        self.entry_count() * BYTES_PER_ENTRY
    }

    pub fn stats(&self) -> SimStats {
        let c = &self.counters;
        let phases = [
            ("single_qubit", c.t_single),
            ("two_qubit", c.t_two),
            ("canonicalize", c.t_canon),
        ];
        SimStats {
            max_chi: c.peak_chi.max(self.max_bond_dim()),
            current_chi: self.max_bond_dim(),
            entry_count: self.entry_count(),
            memory_bytes: self.memory_bytes(),
            gate_count_1q: c.gates_1q,
            gate_count_2q: c.gates_2q,
            accumulated_discard: self.accumulated_discard,
            wall_time_per_phase: phases
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }

    fn check_qubit(&self, q: usize) -> Result<(), MpsError> {
        if q >= self.num_qubits() {
            return Err(MpsError::QubitOutOfRange {
                qubit: q,
                m: self.num_qubits(),
            });
        }
        Ok(())
    }

    pub fn apply_gate(&mut self, gate: &Gate) -> Result<(), MpsError> {
        self.apply_gate_absorbing(gate, Absorb::default())
    }

    pub fn apply_gate_absorbing(&mut self, gate: &Gate, absorb: Absorb) -> Result<(), MpsError> {
        match gate.qubits() {
            [q] => self.apply_single(*q, &gate.matrix()),
            [a, b] => self.apply_pair(*a, *b, &gate.matrix(), absorb),
            _ => unreachable!("gates act on one or two qubits"),
        }
    }

    /// Applies an arbitrary one- or two-qubit unitary given row-major.
    ///
    /// For two qubits the matrix is indexed by `(out_a, out_b), (in_a, in_b)`
    /// with the first listed qubit as the more significant bit.
    pub fn apply_matrix(&mut self, qubits: &[usize], matrix: &[C64]) -> Result<(), MpsError> {
        let dim = 1usize << qubits.len();
        if qubits.is_empty() || qubits.len() > 2 || matrix.len() != dim * dim {
            return Err(MpsError::GateShape {
                expected: dim * dim,
                actual: matrix.len(),
            });
        }
        let defect = unitarity_defect(matrix, dim);
        if defect > UNITARITY_TOL {
            return Err(MpsError::NonUnitary(defect));
        }
        match qubits {
            [q] => self.apply_single(*q, matrix),
            [a, b] => self.apply_pair(*a, *b, matrix, Absorb::default()),
            _ => unreachable!(),
        }
    }

    /// Applies every gate of `circuit`, absorbing singular values toward the
    /// next two-qubit gate.
    pub fn apply_circuit(&mut self, circuit: &Circuit) -> Result<(), MpsError> {
        self.apply_circuit_observed(circuit, |_, _| {})
    }

    /// Like [`apply_circuit`](Self::apply_circuit), calling `observe` after
    /// each gate with the gate index and the updated state.
    pub fn apply_circuit_observed(
        &mut self,
        circuit: &Circuit,
        mut observe: impl FnMut(usize, &MpsState),
    ) -> Result<(), MpsError> {
        if circuit.num_qubits() != self.num_qubits() {
            return Err(MpsError::QubitCountMismatch(
                circuit.num_qubits(),
                self.num_qubits(),
            ));
        }
        let gates = circuit.gates();
        // index of the next two-qubit gate's left site, for every position
        let mut next_pair = vec![None; gates.len()];
        let mut upcoming = None;
        for (k, g) in gates.iter().enumerate().rev() {
            next_pair[k] = upcoming;
            if let [a, b] = g.qubits() {
                upcoming = Some((*a).min(*b));
            }
        }
        for (k, gate) in gates.iter().enumerate() {
            let absorb = match (gate.qubits(), next_pair[k]) {
                ([a, b], Some(next)) if next <= (*a).min(*b) => Absorb::Left,
                ([_, _], _) => Absorb::Right,
                _ => Absorb::default(),
            };
            self.apply_gate_absorbing(gate, absorb)?;
            observe(k, self);
        }
        Ok(())
    }

    fn apply_single(&mut self, q: usize, u: &[C64]) -> Result<(), MpsError> {
        self.check_qubit(q)?;
        let start = Instant::now();
        let site = &mut self.sites[q];
        let (l, r) = (site.shape()[0], site.shape()[2]);
        let data = site.data_mut();
        for a in 0..l {
            for c in 0..r {
                let i0 = (a * 2) * r + c;
                let i1 = (a * 2 + 1) * r + c;
                let (x0, x1) = (data[i0], data[i1]);
                data[i0] = u[0] * x0 + u[1] * x1;
                data[i1] = u[2] * x0 + u[3] * x1;
            }
        }
        self.counters.gates_1q += 1;
        self.counters.t_single += start.elapsed().as_secs_f64();
        Ok(())
    }

    fn apply_pair(&mut self, a: usize, b: usize, u: &[C64], absorb: Absorb) -> Result<(), MpsError> {
        self.check_qubit(a)?;
        self.check_qubit(b)?;
        if a.abs_diff(b) != 1 {
            return Err(MpsError::NotAdjacent(a, b));
        }
        // reorder so the matrix acts on (left site, right site)
        let u: Vec<C64> = if a < b {
            u.to_vec()
        } else {
            swap_operands(u)
        };
        let q = a.min(b);

        let t0 = Instant::now();
        let target = match self.ortho_center {
            Some(c) if c > q => q + 1,
            _ => q,
        };
        self.canonicalize_to(target);
        let t1 = Instant::now();

        let (l, mid) = (self.sites[q].shape()[0], self.sites[q].shape()[2]);
        let r = self.sites[q + 1].shape()[2];
        let theta = matmul(
            self.sites[q].data(),
            self.sites[q + 1].data(),
            l * 2,
            mid,
            2 * r,
        );
        // theta is laid out as (l, s1, s2, r)
        let mut out = vec![C64::new(0.0, 0.0); theta.len()];
        for x in 0..l {
            for y in 0..r {
                let idx = |s1: usize, s2: usize| ((x * 2 + s1) * 2 + s2) * r + y;
                let v = [idx(0, 0), idx(0, 1), idx(1, 0), idx(1, 1)].map(|i| theta[i]);
                for (row, o) in [idx(0, 0), idx(0, 1), idx(1, 0), idx(1, 1)]
                    .into_iter()
                    .enumerate()
                {
                    out[o] = (0..4).map(|col| u[row * 4 + col] * v[col]).sum();
                }
            }
        }
        let mat = DMatrix::from_row_slice(l * 2, 2 * r, &out);
        let total: f64 = out.iter().map(|z| z.norm_sqr()).sum();

        let (uu, s, vt) = svd_sorted(mat);
        let cap = mid * operator_schmidt_rank(&u);
        let keep = retained_rank(
            &s,
            Truncation {
                budget: self.trunc_budget_per_gate,
                max_rank: Some(cap),
            },
        );
        let floor = crate::tensor::NOISE_FLOOR * s[0];
        let discarded: f64 = s[keep..]
            .iter()
            .filter(|&&x| x > floor)
            .map(|x| x * x)
            .sum();
        let kept: f64 = s[..keep].iter().map(|x| x * x).sum();
        let renorm = if discarded > 0.0 && kept > 0.0 {
            (total / kept).sqrt()
        } else {
            1.0
        };

        let mut left = Vec::with_capacity(l * 2 * keep);
        for row in 0..l * 2 {
            for k in 0..keep {
                let w = if absorb == Absorb::Left { s[k] * renorm } else { 1.0 };
                left.push(uu[(row, k)] * w);
            }
        }
        let mut right = Vec::with_capacity(keep * 2 * r);
        for k in 0..keep {
            let w = if absorb == Absorb::Right { s[k] * renorm } else { 1.0 };
            for col in 0..2 * r {
                right.push(vt[(k, col)] * w);
            }
        }
        self.sites[q] = DenseTensor::new(vec![l, 2, keep], left)?;
        self.sites[q + 1] = DenseTensor::new(vec![keep, 2, r], right)?;
        self.ortho_center = Some(match absorb {
            Absorb::Left => q,
            Absorb::Right => q + 1,
        });
        self.accumulated_discard += discarded;
        self.counters.peak_chi = self.counters.peak_chi.max(keep);
        self.counters.gates_2q += 1;
        self.counters.t_canon += (t1 - t0).as_secs_f64();
        self.counters.t_two += t1.elapsed().as_secs_f64();
        Ok(())
    }

    /// Brings the state into mixed canonical form about `center`.
    ///
    /// A state with a known centre is shifted with local QR steps; otherwise
    /// both flanks are swept from the boundaries.
    pub fn canonicalize(&mut self, center: usize) -> Result<(), MpsError> {
        self.check_qubit(center)?;
        let start = Instant::now();
        if self.ortho_center.is_none() {
            for i in 0..center {
                self.shift_right(i);
            }
            for i in (center + 1..self.num_qubits()).rev() {
                self.shift_left(i);
            }
            self.ortho_center = Some(center);
        } else {
            self.canonicalize_to(center);
        }
        self.counters.t_canon += start.elapsed().as_secs_f64();
        Ok(())
    }

    fn canonicalize_to(&mut self, target: usize) {
        let mut c = match self.ortho_center {
            Some(c) => c,
            None => {
                let _ = self.canonicalize(target);
                return;
            }
        };
        while c < target {
            self.shift_right(c);
            c += 1;
        }
        while c > target {
            self.shift_left(c);
            c -= 1;
        }
        self.ortho_center = Some(target);
    }

    /// QR on site `i`, pushing the triangular factor into site `i + 1`.
    fn shift_right(&mut self, i: usize) {
        let site = &self.sites[i];
        let (l, r) = (site.shape()[0], site.shape()[2]);
        let qr = site.to_matrix(2).qr();
        let (q, rr) = qr.unpack();
        let k = q.ncols();
        self.sites[i] = DenseTensor::from_matrix(&q, vec![l, 2, k]).expect("QR shape");
        let next = &self.sites[i + 1];
        let nr = next.shape()[2];
        let mut rdata = Vec::with_capacity(k * r);
        for row in 0..k {
            for col in 0..r {
                rdata.push(rr[(row, col)]);
            }
        }
        let data = matmul(&rdata, next.data(), k, r, 2 * nr);
        self.sites[i + 1] = DenseTensor::new(vec![k, 2, nr], data).expect("QR shape");
    }

    /// LQ on site `i`, pushing the triangular factor into site `i - 1`.
    fn shift_left(&mut self, i: usize) {
        let site = &self.sites[i];
        let (l, r) = (site.shape()[0], site.shape()[2]);
        let m = site.to_matrix(1).adjoint();
        let (q, rr) = m.qr().unpack();
        // site = rr^† q^†
        let k = q.ncols();
        let qd = q.adjoint();
        self.sites[i] = DenseTensor::from_matrix(&qd, vec![k, 2, r]).expect("LQ shape");
        let prev = &self.sites[i - 1];
        let pl = prev.shape()[0];
        let rd = rr.adjoint();
        let mut rdata = Vec::with_capacity(l * k);
        for row in 0..l {
            for col in 0..k {
                rdata.push(rd[(row, col)]);
            }
        }
        let data = matmul(prev.data(), &rdata, pl * 2, l, k);
        self.sites[i - 1] = DenseTensor::new(vec![pl, 2, k], data).expect("LQ shape");
    }

    /// Largest deviation from the isometry conditions implied by the current
    /// orthogonality centre. Sites left of the centre must satisfy
    /// `A^† A = I` over their right bond, sites right of it `B B^† = I` over
    /// their left bond.
    pub fn isometry_defect(&self) -> Option<f64> {
        let c = self.ortho_center?;
        let mut worst: f64 = 0.0;
        for (i, site) in self.sites.iter().enumerate() {
            let m = if i < c {
                site.to_matrix(2)
            } else if i > c {
                site.to_matrix(1).adjoint()
            } else {
                continue;
            };
            let g = m.adjoint() * &m;
            for r in 0..g.nrows() {
                for col in 0..g.ncols() {
                    let expect = if r == col { 1.0 } else { 0.0 };
                    worst = worst.max((g[(r, col)] - C64::new(expect, 0.0)).norm());
                }
            }
        }
        Some(worst)
    }

    pub fn norm_sqr(&self) -> f64 {
        inner_product(self, self).map(|z| z.re).unwrap_or(f64::NAN)
    }

    /// Dense amplitudes, qubit 0 most significant.
    pub fn to_statevector(&self) -> Result<DenseTensor, MpsError> {
        let m = self.num_qubits();
        if m > MAX_DENSE_QUBITS {
            return Err(MpsError::TooLarge(m));
        }
        let mut acc = vec![C64::new(1.0, 0.0)];
        let mut prefix = 1usize;
        let mut bond = 1usize;
        for site in &self.sites {
            let r = site.shape()[2];
            acc = matmul(&acc, site.data(), prefix, bond, 2 * r);
            prefix *= 2;
            bond = r;
        }
        Ok(DenseTensor::new(vec![1 << m], acc)?)
    }

    /// Binary encoding: magic, qubit count, budget, discard, centre, then per
    /// site three `u32` bond dimensions and little-endian `(re, im)` pairs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.memory_bytes() + 12 * self.num_qubits());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.num_qubits() as u32).to_le_bytes());
        out.extend_from_slice(&self.trunc_budget_per_gate.to_le_bytes());
        out.extend_from_slice(&self.accumulated_discard.to_le_bytes());
        let center = self.ortho_center.map_or(-1i64, |c| c as i64);
        out.extend_from_slice(&center.to_le_bytes());
        for site in &self.sites {
            for &d in site.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for z in site.data() {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MpsError> {
        let mut cur = Reader { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(MpsError::Decode("bad magic".into()));
        }
        let m = cur.u32()? as usize;
        let budget = cur.f64()?;
        let discard = cur.f64()?;
        let center = cur.i64()?;
        let mut sites = Vec::with_capacity(m);
        for _ in 0..m {
            let shape = vec![cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let re = cur.f64()?;
                data.push(C64::new(re, cur.f64()?));
            }
            sites.push(DenseTensor::new(shape, data)?);
        }
        if cur.pos != bytes.len() {
            return Err(MpsError::Decode("trailing bytes".into()));
        }
        let mut state = Self::from_sites(sites)?;
        state.trunc_budget_per_gate = budget;
        state.accumulated_discard = discard;
        state.ortho_center = match center {
            -1 => None,
            c if c >= 0 && (c as usize) < m => Some(c as usize),
            c => return Err(MpsError::Decode(format!("centre {c} out of range"))),
        };
        Ok(state)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], MpsError> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| MpsError::Decode("unexpected end of input".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, MpsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, MpsError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, MpsError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// `⟨bra|ket⟩`, sweeping transfer matrices from the left boundary.
pub fn inner_product(bra: &MpsState, ket: &MpsState) -> Result<C64, MpsError> {
    if bra.num_qubits() != ket.num_qubits() {
        return Err(MpsError::QubitCountMismatch(
            bra.num_qubits(),
            ket.num_qubits(),
        ));
    }
    // env[b, k]: bra bond b, ket bond k
    let mut env = vec![C64::new(1.0, 0.0)];
    let (mut cb, mut ck) = (1usize, 1usize);
    for (a, k) in bra.sites.iter().zip(&ket.sites) {
        let (rb, rk) = (a.shape()[2], k.shape()[2]);
        // t[(b, s), k'] = Σ_k env[b, k] K[k, (s, k')]
        let t = matmul(&env, k.data(), cb, ck, 2 * rk);
        // env'[b', k'] = Σ_(b,s) conj(A[(b,s), b']) t[(b,s), k']
        let mut next = vec![C64::new(0.0, 0.0); rb * rk];
        let ad = a.data();
        for row in 0..cb * 2 {
            let trow = &t[row * rk..(row + 1) * rk];
            for bp in 0..rb {
                let w = ad[row * rb + bp].conj();
                if w.re == 0.0 && w.im == 0.0 {
                    continue;
                }
                let out = &mut next[bp * rk..(bp + 1) * rk];
                for (o, &tv) in out.iter_mut().zip(trow) {
                    *o += w * tv;
                }
            }
        }
        env = next;
        cb = rb;
        ck = rk;
    }
    Ok(env[0])
}

fn unitarity_defect(u: &[C64], dim: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            let dot: C64 = (0..dim).map(|k| u[k * dim + i].conj() * u[k * dim + j]).sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - C64::new(expect, 0.0)).norm());
        }
    }
    worst
}

/// Exchanges the roles of the two qubits of a 4×4 operator.
fn swap_operands(u: &[C64]) -> Vec<C64> {
    let flip = |i: usize| ((i & 1) << 1) | (i >> 1);
    let mut out = vec![C64::new(0.0, 0.0); 16];
    for r in 0..4 {
        for c in 0..4 {
            out[flip(r) * 4 + flip(c)] = u[r * 4 + c];
        }
    }
    out
}

/// Number of terms in the operator Schmidt decomposition of a two-qubit gate
/// across its two qubits. A gate of rank `R` grows a bond at most `R`-fold.
pub fn operator_schmidt_rank(u: &[C64]) -> usize {
    // realign U[(t1 t2), (s1 s2)] into M[(t1 s1), (t2 s2)]
    let m = DMatrix::from_fn(4, 4, |row, col| {
        let (t1, s1) = (row >> 1, row & 1);
        let (t2, s2) = (col >> 1, col & 1);
        u[((t1 << 1) | t2) * 4 + ((s1 << 1) | s2)]
    });
    let s = m.singular_values();
    let top = s.max();
    s.iter().filter(|&&x| x > 1e-12 * top).count().max(1)
}
