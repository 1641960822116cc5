//! Data-encoding circuits.
//!
//! A rescaled row `x ∈ [0, 2]^m` is encoded as
//! `(exp(-i H_XX(x)) · exp(-i H_Z(x)))^r |+⟩^m` with
//!
//! ```text
//! H_Z(x)  = γ Σ_i x_i Z_i
//! H_XX(x) = γ² (π/2) Σ_{(i,j) ∈ G} (1 - x_i)(1 - x_j) X_i X_j
//! ```
//!
//! where `G` couples every pair of qubits at most `d` apart on a line. Gates
//! use the `RZ(θ) = exp(-iθZ/2)`, `RXX(θ) = exp(-iθ XX/2)` convention, so each
//! Hamiltonian coefficient becomes a rotation angle of twice its value.
//!
//! [`build_circuit`] emits the logical circuit. [`feature_map_circuit`] is what
//! the simulator consumes: every `exp(-iH_XX)` block is layer-scheduled and
//! then routed onto nearest-neighbour gates with SWAP ladders.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnsatzError {
    #[error("feature map needs m >= 1, r >= 1, 1 <= d <= m - 1 and gamma > 0 (got m={m}, r={r}, d={d}, gamma={gamma})")]
    BadConfig { m: usize, r: usize, d: usize, gamma: f64 },
    #[error("interaction distance {d} out of range for {m} qubits")]
    DistanceOutOfRange { m: usize, d: usize },
    #[error("row has {actual} features, expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("feature {index} = {value} is outside [0, 2]")]
    FeatureOutOfRange { index: usize, value: f64 },
    #[error("gate `{gate}` references a qubit outside 0..{m}")]
    QubitOutOfRange { gate: String, m: usize },
    #[error("gate `{0}` acts twice on the same qubit")]
    RepeatedQubit(String),
    #[error("layer scheduling only reorders RXX gates, found `{0}`")]
    NonCommuting(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Hyperparameters of the feature map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapConfig {
    /// Number of features, equal to the number of qubits.
    pub m: usize,
    /// Repetitions of the `exp(-iH_XX) exp(-iH_Z)` block.
    pub r: usize,
    /// Interaction distance.
    pub d: usize,
    /// Kernel bandwidth.
    pub gamma: f64,
}

impl FeatureMapConfig {
    pub fn new(m: usize, r: usize, d: usize, gamma: f64) -> Result<Self, AnsatzError> {
        let cfg = Self { m, r, d, gamma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AnsatzError> {
        let d_ok = self.d >= 1 && self.d < self.m;
        if self.m == 0 || self.r == 0 || !d_ok || !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(AnsatzError::BadConfig {
                m: self.m,
                r: self.r,
                d: self.d,
                gamma: self.gamma,
            });
        }
        Ok(())
    }

    pub fn edge_count(&self) -> usize {
        (1..=self.d).map(|k| self.m - k).sum()
    }

    /// Gates in the logical circuit: `m + r (m + |edges|)`.
    pub fn logical_gate_count(&self) -> usize {
        self.m + self.r * (self.m + self.edge_count())
    }

    /// Two-qubit gates in one routed circuit, SWAPs included.
    pub fn routed_two_qubit_gates(&self) -> usize {
        self.r * (self.edge_count() + swap_overhead_per_block(self.m, self.d))
    }
}

/// SWAPs added when routing one `exp(-iH_XX)` block: `2 Σ_{k=2..d} (k-1)(m-k)`.
pub fn swap_overhead_per_block(m: usize, d: usize) -> usize {
    (2..=d.min(m.saturating_sub(1))).map(|k| 2 * (k - 1) * (m - k)).sum()
}

/// Banded linear-chain coupling graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionGraph {
    pub edges: Vec<(usize, usize)>,
}

/// All pairs `(i, i + k)` with `1 <= k <= d`, ordered by distance then `i`.
pub fn interaction_graph(m: usize, d: usize) -> Result<InteractionGraph, AnsatzError> {
    if d == 0 || d >= m {
        return Err(AnsatzError::DistanceOutOfRange { m, d });
    }
    let edges = (1..=d)
        .flat_map(|k| (0..m - k).map(move |i| (i, i + k)))
        .collect();
    Ok(InteractionGraph { edges })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateKind {
    H,
    Rz,
    Rxx,
    Swap,
}

impl GateKind {
    pub fn arity(self) -> usize {
        match self {
            GateKind::H | GateKind::Rz => 1,
            GateKind::Rxx | GateKind::Swap => 2,
        }
    }
}

/// One gate of a feature-map circuit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    kind: GateKind,
    qubits: [usize; 2],
    angle: f64,
}

impl Gate {
    pub fn h(q: usize) -> Self {
        Self { kind: GateKind::H, qubits: [q, q], angle: 0.0 }
    }

    pub fn rz(q: usize, angle: f64) -> Self {
        Self { kind: GateKind::Rz, qubits: [q, q], angle }
    }

    pub fn rxx(a: usize, b: usize, angle: f64) -> Self {
        Self { kind: GateKind::Rxx, qubits: [a, b], angle }
    }

    pub fn swap(a: usize, b: usize) -> Self {
        Self { kind: GateKind::Swap, qubits: [a, b], angle: 0.0 }
    }

    pub fn kind(&self) -> GateKind {
        self.kind
    }

    pub fn qubits(&self) -> &[usize] {
        &self.qubits[..self.kind.arity()]
    }

    pub fn angle(&self) -> Option<f64> {
        matches!(self.kind, GateKind::Rz | GateKind::Rxx).then_some(self.angle)
    }

    /// Row-major unitary; two-qubit matrices use the first listed qubit as
    /// the more significant bit.
    pub fn matrix(&self) -> Vec<C64> {
        let z = C64::new(0.0, 0.0);
        let o = C64::new(1.0, 0.0);
        let t = self.angle;
        match self.kind {
            GateKind::H => {
                let h = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
                vec![h, h, h, -h]
            }
            GateKind::Rz => vec![
                C64::from_polar(1.0, -t / 2.0),
                z,
                z,
                C64::from_polar(1.0, t / 2.0),
            ],
            GateKind::Rxx => {
                let c = C64::new((t / 2.0).cos(), 0.0);
                let s = C64::new(0.0, -(t / 2.0).sin());
                vec![c, z, z, s, z, c, s, z, z, s, c, z, s, z, z, c]
            }
            GateKind::Swap => vec![o, z, z, z, z, z, o, z, z, o, z, z, z, z, z, o],
        }
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b] = self.qubits;
        match self.kind {
            GateKind::H => write!(f, "H {a}"),
            GateKind::Rz => write!(f, "RZ {a} {:?}", self.angle),
            GateKind::Rxx => write!(f, "RXX {a} {b} {:?}", self.angle),
            GateKind::Swap => write!(f, "SWAP {a} {b}"),
        }
    }
}

impl FromStr for Gate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let qubit = |i: usize| -> Result<usize, String> {
            parts
                .get(i)
                .ok_or_else(|| format!("missing operand {i}"))?
                .parse()
                .map_err(|e| format!("bad qubit index: {e}"))
        };
        let angle = |i: usize| -> Result<f64, String> {
            parts
                .get(i)
                .ok_or_else(|| "missing angle".to_string())?
                .parse()
                .map_err(|e| format!("bad angle: {e}"))
        };
        let (gate, arity) = match parts.first().copied() {
            Some("H") => (Gate::h(qubit(1)?), 2),
            Some("RZ") => (Gate::rz(qubit(1)?, angle(2)?), 3),
            Some("RXX") => (Gate::rxx(qubit(1)?, qubit(2)?, angle(3)?), 4),
            Some("SWAP") => (Gate::swap(qubit(1)?, qubit(2)?), 3),
            Some(other) => return Err(format!("unknown gate `{other}`")),
            None => return Err("empty line".into()),
        };
        if parts.len() != arity {
            return Err(format!("expected {} operands, found {}", arity - 1, parts.len() - 1));
        }
        Ok(gate)
    }
}

/// Ordered gate list on `m` qubits.
#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    m: usize,
    gates: Vec<Gate>,
}

impl Circuit {
    pub fn new(m: usize, gates: Vec<Gate>) -> Result<Self, AnsatzError> {
        for g in &gates {
            if g.qubits().iter().any(|&q| q >= m) {
                return Err(AnsatzError::QubitOutOfRange { gate: g.to_string(), m });
            }
            if let [a, b] = g.qubits() {
                if a == b {
                    return Err(AnsatzError::RepeatedQubit(g.to_string()));
                }
            }
        }
        Ok(Self { m, gates })
    }

    pub fn num_qubits(&self) -> usize {
        self.m
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn count(&self, kind: GateKind) -> usize {
        self.gates.iter().filter(|g| g.kind() == kind).count()
    }

    pub fn two_qubit_count(&self) -> usize {
        self.gates.iter().filter(|g| g.qubits().len() == 2).count()
    }

    /// Splits the gate sequence into maximal runs in which no qubit repeats.
    pub fn layers(&self) -> Vec<&[Gate]> {
        let mut out = Vec::new();
        let mut busy = vec![false; self.m];
        let mut start = 0;
        for (k, g) in self.gates.iter().enumerate() {
            if g.qubits().iter().any(|&q| busy[q]) {
                out.push(&self.gates[start..k]);
                busy.iter_mut().for_each(|b| *b = false);
                start = k;
            }
            g.qubits().iter().for_each(|&q| busy[q] = true);
        }
        if start < self.gates.len() {
            out.push(&self.gates[start..]);
        }
        out
    }

    /// Line-oriented text form, preceded by a `# qubits m` comment.
    pub fn to_text(&self) -> String {
        let mut s = format!("# qubits {}\n", self.m);
        for g in &self.gates {
            s.push_str(&g.to_string());
            s.push('\n');
        }
        s
    }

    /// Parses [`to_text`](Self::to_text) output. Lines starting with `#` are
    /// comments; without a `# qubits` header the register is sized to fit.
    pub fn from_text(text: &str) -> Result<Self, AnsatzError> {
        let mut m = None;
        let mut gates = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("qubits") {
                    let parsed = v.trim().parse().map_err(|e| AnsatzError::Parse {
                        line: n + 1,
                        reason: format!("bad qubit count: {e}"),
                    })?;
                    m = Some(parsed);
                }
                continue;
            }
            let g = line
                .parse::<Gate>()
                .map_err(|reason| AnsatzError::Parse { line: n + 1, reason })?;
            gates.push(g);
        }
        let m = m.unwrap_or_else(|| {
            gates
                .iter()
                .flat_map(|g| g.qubits().iter().copied())
                .max()
                .map_or(1, |q| q + 1)
        });
        Self::new(m, gates)
    }
}

fn check_row(x: &[f64], cfg: &FeatureMapConfig) -> Result<(), AnsatzError> {
    if x.len() != cfg.m {
        return Err(AnsatzError::LengthMismatch { expected: cfg.m, actual: x.len() });
    }
    if let Some((index, &value)) = x
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=2.0).contains(*v))
    {
        return Err(AnsatzError::FeatureOutOfRange { index, value });
    }
    Ok(())
}

fn rz_layer(x: &[f64], gamma: f64) -> impl Iterator<Item = Gate> + '_ {
    x.iter()
        .enumerate()
        .map(move |(i, &xi)| Gate::rz(i, 2.0 * gamma * xi))
}

fn rxx_block(x: &[f64], cfg: &FeatureMapConfig) -> Vec<Gate> {
    let coupling = cfg.gamma * cfg.gamma * FRAC_PI_2;
    interaction_graph(cfg.m, cfg.d)
        .map(|g| g.edges)
        .unwrap_or_default()
        .into_iter()
        .map(|(i, j)| Gate::rxx(i, j, 2.0 * coupling * (1.0 - x[i]) * (1.0 - x[j])))
        .collect()
}

/// Logical feature-map circuit: Hadamards, then `r` rounds of an RZ layer
/// followed by one RXX per interaction edge, in graph order.
pub fn build_circuit(x: &[f64], cfg: &FeatureMapConfig) -> Result<Circuit, AnsatzError> {
    cfg.validate()?;
    check_row(x, cfg)?;
    let mut gates = Vec::with_capacity(cfg.logical_gate_count());
    gates.extend((0..cfg.m).map(Gate::h));
    for _ in 0..cfg.r {
        gates.extend(rz_layer(x, cfg.gamma));
        gates.extend(rxx_block(x, cfg));
    }
    Circuit::new(cfg.m, gates)
}

/// Options for [`feature_map_circuit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CompileOptions {
    /// Drop RXX gates whose angle is exactly zero (features equal to 1).
    pub prune_zero_angles: bool,
}

/// Simulator-ready circuit: the logical circuit with each RXX block
/// layer-scheduled and routed to nearest-neighbour form.
pub fn feature_map_circuit(
    x: &[f64],
    cfg: &FeatureMapConfig,
    opts: CompileOptions,
) -> Result<Circuit, AnsatzError> {
    cfg.validate()?;
    check_row(x, cfg)?;
    let mut block = rxx_block(x, cfg);
    if opts.prune_zero_angles {
        block.retain(|g| g.angle != 0.0);
    }
    let block = Circuit::new(cfg.m, block)?;
    let routed_block = route_linear(&schedule_layers(&block, cfg.d)?);
    let mut gates = Vec::with_capacity(cfg.m + cfg.r * (cfg.m + routed_block.len()));
    gates.extend((0..cfg.m).map(Gate::h));
    for _ in 0..cfg.r {
        gates.extend(rz_layer(x, cfg.gamma));
        gates.extend_from_slice(routed_block.gates());
    }
    Circuit::new(cfg.m, gates)
}

/// Replaces every two-qubit gate on `(i, i + k)`, `k > 1`, by `k - 1` SWAPs
/// that walk qubit `i` next to `i + k`, the gate on the adjacent pair, and
/// the same SWAPs in reverse.
pub fn route_linear(c: &Circuit) -> Circuit {
    let mut gates = Vec::with_capacity(c.len());
    for g in c.gates() {
        match *g.qubits() {
            [a, b] if a.abs_diff(b) > 1 => {
                let (lo, hi) = (a.min(b), a.max(b));
                let ladder: Vec<Gate> = (lo..hi - 1).map(|p| Gate::swap(p, p + 1)).collect();
                gates.extend_from_slice(&ladder);
                // the logical `lo` qubit now sits at hi - 1
                let (na, nb) = if a < b { (hi - 1, hi) } else { (hi, hi - 1) };
                gates.push(Gate { qubits: [na, nb], ..*g });
                gates.extend(ladder.into_iter().rev());
            }
            _ => gates.push(*g),
        }
    }
    Circuit { m: c.m, gates }
}

/// Reorders a block of mutually commuting RXX gates into layers where no
/// qubit appears twice, using first-fit edge colouring.
///
/// Edges are offered in an order in which each distance class splits into
/// two matchings (pairs `(i, i + k)` with `⌊i / k⌋` even, then odd), which
/// keeps the result within `2d` layers on banded chains.
pub fn schedule_layers(c: &Circuit, d: usize) -> Result<Circuit, AnsatzError> {
    if let Some(g) = c.gates().iter().find(|g| g.kind() != GateKind::Rxx) {
        return Err(AnsatzError::NonCommuting(g.to_string()));
    }
    let mut order: Vec<&Gate> = c.gates().iter().collect();
    order.sort_by_key(|g| {
        let (lo, hi) = (g.qubits[0].min(g.qubits[1]), g.qubits[0].max(g.qubits[1]));
        let k = hi - lo;
        (k, (lo / k) % 2, lo)
    });
    let mut layers: Vec<(Vec<bool>, Vec<Gate>)> = Vec::with_capacity(2 * d.max(1));
    for g in order {
        let slot = layers
            .iter()
            .position(|(busy, _)| g.qubits().iter().all(|&q| !busy[q]));
        let idx = slot.unwrap_or_else(|| {
            layers.push((vec![false; c.m], Vec::new()));
            layers.len() - 1
        });
        let (busy, gates) = &mut layers[idx];
        g.qubits().iter().for_each(|&q| busy[q] = true);
        gates.push(*g);
    }
    let gates = layers.into_iter().flat_map(|(_, g)| g).collect();
    Ok(Circuit { m: c.m, gates })
}
