//! Dense statevector references shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2};

use qkmps::ansatz::interaction_graph;
use qkmps::{Circuit, FeatureMapConfig, MpsState, C64};
use rand::Rng;

fn bit(idx: usize, q: usize, m: usize) -> usize {
    (idx >> (m - 1 - q)) & 1
}

/// `+1` for bit 0, `-1` for bit 1.
fn spin(idx: usize, q: usize, m: usize) -> f64 {
    1.0 - 2.0 * bit(idx, q, m) as f64
}

/// In-place normalized Hadamard on every qubit.
pub fn hadamard_all(psi: &mut [C64]) {
    let n = psi.len();
    let mut h = 1;
    while h < n {
        for block in (0..n).step_by(2 * h) {
            for i in block..block + h {
                let (a, b) = (psi[i], psi[i + h]);
                psi[i] = (a + b) * FRAC_1_SQRT_2;
                psi[i + h] = (a - b) * FRAC_1_SQRT_2;
            }
        }
        h *= 2;
    }
}

/// `[exp(-i H_XX) exp(-i H_Z)]^r H^m |0>` built by exponentiating each
/// Hamiltonian in the basis where it is diagonal.
pub fn feature_map_state(x: &[f64], cfg: &FeatureMapConfig) -> Vec<C64> {
    let m = cfg.m;
    let dim = 1usize << m;
    let edges = interaction_graph(m, cfg.d).unwrap().edges;
    let coupling = cfg.gamma * cfg.gamma * FRAC_PI_2;
    let z_phase: Vec<f64> = (0..dim)
        .map(|idx| (0..m).map(|q| cfg.gamma * x[q] * spin(idx, q, m)).sum())
        .collect();
    let xx_phase: Vec<f64> = (0..dim)
        .map(|idx| {
            edges
                .iter()
                .map(|&(i, j)| coupling * (1.0 - x[i]) * (1.0 - x[j]) * spin(idx, i, m) * spin(idx, j, m))
                .sum()
        })
        .collect();
    let mut psi = vec![C64::new(0.0, 0.0); dim];
    psi[0] = C64::new(1.0, 0.0);
    hadamard_all(&mut psi);
    for _ in 0..cfg.r {
        for (a, &p) in psi.iter_mut().zip(&z_phase) {
            *a *= C64::from_polar(1.0, -p);
        }
        hadamard_all(&mut psi);
        for (a, &p) in psi.iter_mut().zip(&xx_phase) {
            *a *= C64::from_polar(1.0, -p);
        }
        hadamard_all(&mut psi);
    }
    psi
}

/// Applies `circuit` gate by gate to `|0...0>`.
pub fn circuit_state(circuit: &Circuit) -> Vec<C64> {
    let m = circuit.num_qubits();
    let dim = 1usize << m;
    let mut psi = vec![C64::new(0.0, 0.0); dim];
    psi[0] = C64::new(1.0, 0.0);
    for g in circuit.gates() {
        let u = g.matrix();
        let qs = g.qubits();
        let mut out = vec![C64::new(0.0, 0.0); dim];
        for (idx, &amp) in psi.iter().enumerate() {
            if amp == C64::new(0.0, 0.0) {
                continue;
            }
            let col: usize = qs.iter().fold(0, |acc, &q| (acc << 1) | bit(idx, q, m));
            let k = qs.len();
            for row in 0..(1 << k) {
                let mut target = idx;
                for (pos, &q) in qs.iter().enumerate() {
                    let b = (row >> (k - 1 - pos)) & 1;
                    let mask = 1 << (m - 1 - q);
                    target = if b == 1 { target | mask } else { target & !mask };
                }
                out[target] += u[row * (1 << k) + col] * amp;
            }
        }
        psi = out;
    }
    psi
}

pub fn overlap(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn max_diff(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

pub fn mps_vector(state: &MpsState) -> Vec<C64> {
    state.to_statevector().unwrap().into_data()
}

pub fn random_row(rng: &mut impl Rng, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.random_range(0.0..=2.0)).collect()
}

/// Heavy-tailed rows rescaled into `[0, 2]` over a pool, resembling
/// transaction-amount features.
pub fn heavy_tailed_rows(rng: &mut impl Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, LogNormal};
    let ln = LogNormal::new(0.0, 1.5).unwrap();
    let pool: Vec<Vec<f64>> = (0..n.max(200))
        .map(|_| (0..m).map(|_| ln.sample(rng)).collect())
        .collect();
    let (rows, _, _) = qkmps::learn::rescale(&pool, &[]).unwrap();
    rows.into_iter().take(n).collect()
}

/// `|<a|b>|^2` for every pair of dense states.
pub fn dense_gram(bras: &[Vec<C64>], kets: &[Vec<C64>]) -> Vec<Vec<f64>> {
    bras.iter()
        .map(|a| kets.iter().map(|b| overlap(a, b).norm_sqr()).collect())
        .collect()
}
