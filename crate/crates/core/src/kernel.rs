//! Per-row simulation, Gram matrices and tiled parallel schedules.
//!
//! A training Gram matrix is square and symmetric: only the strict upper
//! triangle needs inner products, the diagonal is exactly one for normalized
//! states. A test Gram matrix is the full rectangle of test rows against
//! training columns.
//!
//! Parallel runs follow a [`TileSchedule`]. The state list is cut into
//! contiguous blocks; a tile pairs a row block with a column block and is
//! evaluated by exactly one worker. Workers are threads that exchange
//! serialized states over channels, and a collector merges their tiles.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ansatz::{feature_map_circuit, AnsatzError, CompileOptions, FeatureMapConfig};
use crate::mps::{inner_product, Basis, MpsError, MpsState, DEFAULT_TRUNC_BUDGET};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error(transparent)]
    Ansatz(#[from] AnsatzError),
    #[error(transparent)]
    Mps(#[from] MpsError),
    #[error("train Gram matrix needs identical bra and ket lists")]
    TrainNotSquare,
    #[error("Gram matrix of {rows}x{cols} needs {expected} entries, got {actual}")]
    EntryCount {
        rows: usize,
        cols: usize,
        expected: usize,
        actual: usize,
    },
    #[error("at least one worker is required")]
    NoWorkers,
    #[error("schedule was built for {expected:?} states, run has {actual:?}")]
    ScheduleMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("worker {worker} failed: {reason}")]
    Worker { worker: usize, reason: String },
    #[error("entry ({0}, {1}) was computed {2} times")]
    Coverage(usize, usize, usize),
    #[error("unknown strategy `{0}` (expected no-messaging or round-robin)")]
    UnknownStrategy(String),
    #[error("malformed Gram CSV: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GramKind {
    /// Square and symmetric, rows and columns index the same states.
    Train,
    /// Rectangular, test rows against training columns.
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
    kind: GramKind,
}

impl GramMatrix {
    /// Wraps row-major `entries`. Train matrices must be square.
    pub fn new(
        kind: GramKind,
        rows: usize,
        cols: usize,
        entries: Vec<f64>,
    ) -> Result<Self, KernelError> {
        if kind == GramKind::Train && rows != cols {
            return Err(KernelError::TrainNotSquare);
        }
        if entries.len() != rows * cols {
            return Err(KernelError::EntryCount {
                rows,
                cols,
                expected: rows * cols,
                actual: entries.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            entries,
            kind,
        })
    }

    pub fn from_fn(
        kind: GramKind,
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, KernelError> {
        let entries = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Self::new(kind, rows, cols, entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn kind(&self) -> GramKind {
        self.kind
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    /// Largest `|K_ij - K_ji|`; zero for non-square matrices is meaningless,
    /// so those report infinity.
    pub fn symmetry_defect(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Smallest eigenvalue of the symmetrized matrix.
    pub fn min_eigenvalue(&self) -> Option<f64> {
        if self.rows != self.cols || self.rows == 0 {
            return None;
        }
        let a = DMatrix::from_row_slice(self.rows, self.cols, &self.entries);
        let sym = (&a + a.transpose()) * 0.5;
        sym.symmetric_eigenvalues().iter().copied().reduce(f64::min)
    }

    pub fn max_abs_diff(&self, other: &GramMatrix) -> f64 {
        if self.rows != other.rows || self.cols != other.cols {
            return f64::INFINITY;
        }
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row-major CSV without header, 17 significant digits per entry.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(self.entries.len() * 24);
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), KernelError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_csv_string().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn from_csv_str(text: &str, kind: GramKind) -> Result<Self, KernelError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(text.as_bytes());
        let mut entries = Vec::new();
        let mut rows = 0;
        let mut cols = None;
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| KernelError::Parse(e.to_string()))?;
            if *cols.get_or_insert(record.len()) != record.len() {
                return Err(KernelError::Parse(format!("row {line} has {} columns", record.len())));
            }
            for field in record.iter() {
                let v = field.trim().parse::<f64>().map_err(|e| {
                    KernelError::Parse(format!("row {line}: `{field}`: {e}"))
                })?;
                entries.push(v);
            }
            rows += 1;
        }
        Self::new(kind, rows, cols.unwrap_or(0), entries)
    }

    pub fn read_csv(path: &Path, kind: GramKind) -> Result<Self, KernelError> {
        Self::from_csv_str(&std::fs::read_to_string(path)?, kind)
    }
}

/// Simulates the feature-map circuit of one rescaled row.
pub fn simulate_row(x: &[f64], cfg: &FeatureMapConfig, budget: f64) -> Result<MpsState, KernelError> {
    let circuit = feature_map_circuit(x, cfg, CompileOptions::default())?;
    let mut state = MpsState::new(cfg.m, Basis::Zero)?.with_budget(budget);
    state.apply_circuit(&circuit)?;
    Ok(state)
}

/// One MPS simulation per row, in order.
pub fn simulate_dataset(
    rows: &[Vec<f64>],
    cfg: &FeatureMapConfig,
    budget: f64,
) -> Result<Vec<MpsState>, KernelError> {
    rows.iter().map(|x| simulate_row(x, cfg, budget)).collect()
}

fn kernel_entry(bra: &MpsState, ket: &MpsState) -> Result<f64, KernelError> {
    Ok(inner_product(bra, ket)?.norm_sqr())
}

/// Serial Gram matrix. See [`compute_gram_counted`].
pub fn compute_gram(
    bras: &[MpsState],
    kets: &[MpsState],
    kind: GramKind,
) -> Result<GramMatrix, KernelError> {
    compute_gram_counted(bras, kets, kind).map(|(g, _)| g)
}

/// Serial Gram matrix together with the number of inner products evaluated.
///
/// For [`GramKind::Train`] the diagonal is set to one and each off-diagonal
/// pair `i < j` is evaluated once as `<psi_i|psi_j>` and mirrored.
pub fn compute_gram_counted(
    bras: &[MpsState],
    kets: &[MpsState],
    kind: GramKind,
) -> Result<(GramMatrix, usize), KernelError> {
    match kind {
        GramKind::Train => {
            if bras != kets {
                return Err(KernelError::TrainNotSquare);
            }
            let n = bras.len();
            let mut k = vec![0.0; n * n];
            let mut count = 0;
            for i in 0..n {
                k[i * n + i] = 1.0;
                for j in i + 1..n {
                    let v = kernel_entry(&bras[i], &bras[j])?;
                    k[i * n + j] = v;
                    k[j * n + i] = v;
                    count += 1;
                }
            }
            Ok((GramMatrix::new(kind, n, n, k)?, count))
        }
        GramKind::Test => {
            let mut k = Vec::with_capacity(bras.len() * kets.len());
            for b in bras {
                for c in kets {
                    k.push(kernel_entry(b, c)?);
                }
            }
            let count = k.len();
            Ok((GramMatrix::new(kind, bras.len(), kets.len(), k)?, count))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Every worker simulates all states its tiles need; no transfers.
    NoMessaging,
    /// Every state is simulated once; blocks circulate between workers.
    RoundRobin,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::NoMessaging => "no-messaging",
            Strategy::RoundRobin => "round-robin",
        })
    }
}

impl FromStr for Strategy {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "no-messaging" => Ok(Strategy::NoMessaging),
            "round-robin" => Ok(Strategy::RoundRobin),
            _ => Err(KernelError::UnknownStrategy(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Bra,
    Ket,
}

/// A contiguous block of states. Train schedules only use [`Side::Bra`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId {
    pub side: Side,
    pub index: usize,
}

impl BlockId {
    pub fn bra(index: usize) -> Self {
        Self {
            side: Side::Bra,
            index,
        }
    }

    pub fn ket(index: usize) -> Self {
        Self {
            side: Side::Ket,
            index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub worker: usize,
    pub row_block: BlockId,
    pub col_block: BlockId,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub from: usize,
    pub to: usize,
    pub block: BlockId,
    /// Message round within the step; later rounds may forward blocks
    /// received in earlier ones.
    pub round: usize,
}

/// Transfers of a step happen before its tiles are evaluated.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub tiles: Vec<Tile>,
    pub transfers: Vec<Transfer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSchedule {
    pub strategy: Strategy,
    pub kind: GramKind,
    /// Effective worker count, at most the number of row states.
    pub k: usize,
    pub n_bras: usize,
    pub n_kets: usize,
    pub bra_blocks: Vec<Range<usize>>,
    pub ket_blocks: Vec<Range<usize>>,
    /// Blocks each worker simulates itself.
    pub simulations: Vec<Vec<BlockId>>,
    pub steps: Vec<Step>,
}

/// Splits `0..n` into `parts` contiguous ranges, earlier ranges one longer.
pub fn split_blocks(n: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1);
    let (base, extra) = (n / parts, n % parts);
    let mut start = 0;
    (0..parts)
        .map(|p| {
            let len = base + usize::from(p < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

impl TileSchedule {
    pub fn tiles(&self) -> impl Iterator<Item = &Tile> {
        self.steps.iter().flat_map(|s| s.tiles.iter())
    }

    pub fn transfers(&self) -> impl Iterator<Item = &Transfer> {
        self.steps.iter().flat_map(|s| s.transfers.iter())
    }

    pub fn block_range(&self, id: BlockId) -> Range<usize> {
        match id.side {
            Side::Bra => self.bra_blocks[id.index].clone(),
            Side::Ket => self.ket_blocks[id.index].clone(),
        }
    }

    /// Total number of circuit simulations across all workers.
    pub fn simulation_count(&self) -> usize {
        self.simulations
            .iter()
            .flatten()
            .map(|&b| self.block_range(b).len())
            .sum()
    }

    /// Workers that simulate state `index` on `side`.
    pub fn simulated_by(&self, side: Side, index: usize) -> Vec<usize> {
        (0..self.k)
            .filter(|&w| {
                self.simulations[w]
                    .iter()
                    .any(|&b| b.side == side && self.block_range(b).contains(&index))
            })
            .collect()
    }

    /// Calls `f(i, j)` for every stored entry of `tile`; train entries are
    /// reported as `(min, max)`.
    pub fn tile_entries(&self, tile: &Tile, mut f: impl FnMut(usize, usize)) {
        match self.kind {
            GramKind::Test => {
                for i in tile.rows.clone() {
                    for j in tile.cols.clone() {
                        f(i, j);
                    }
                }
            }
            GramKind::Train if tile.row_block == tile.col_block => {
                for i in tile.rows.clone() {
                    for j in i..tile.rows.end {
                        f(i, j);
                    }
                }
            }
            GramKind::Train => {
                for i in tile.rows.clone() {
                    for j in tile.cols.clone() {
                        f(i.min(j), i.max(j));
                    }
                }
            }
        }
    }

    /// How many times each required entry is produced, keyed by `(i, j)`.
    pub fn coverage_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for tile in self.tiles() {
            self.tile_entries(tile, |i, j| *counts.entry((i, j)).or_insert(0) += 1);
        }
        counts
    }

    /// Checks that tiles cover every required entry exactly once and that
    /// each worker holds every block it computes with or sends.
    pub fn validate(&self) -> Result<(), KernelError> {
        let counts = self.coverage_counts();
        let required: Vec<(usize, usize)> = match self.kind {
            GramKind::Train => (0..self.n_bras)
                .flat_map(|i| (i..self.n_bras).map(move |j| (i, j)))
                .collect(),
            GramKind::Test => (0..self.n_bras)
                .flat_map(|i| (0..self.n_kets).map(move |j| (i, j)))
                .collect(),
        };
        for &(i, j) in &required {
            match counts.get(&(i, j)) {
                Some(1) => {}
                Some(&c) => return Err(KernelError::Coverage(i, j, c)),
                None => return Err(KernelError::Coverage(i, j, 0)),
            }
        }
        if counts.len() != required.len() {
            let (&(i, j), &c) = counts
                .iter()
                .find(|(key, _)| !required.contains(key))
                .expect("extra entry");
            return Err(KernelError::Coverage(i, j, c));
        }
        self.check_possession()
    }

    fn check_possession(&self) -> Result<(), KernelError> {
        let mut held: Vec<BTreeSet<BlockId>> = self
            .simulations
            .iter()
            .map(|s| s.iter().copied().collect())
            .collect();
        let bad = |worker: usize, what: String| KernelError::Worker {
            worker,
            reason: what,
        };
        for (s, step) in self.steps.iter().enumerate() {
            let max_round = step.transfers.iter().map(|t| t.round).max();
            for round in 0..=max_round.unwrap_or(0) {
                let batch: Vec<_> = step.transfers.iter().filter(|t| t.round == round).collect();
                for t in &batch {
                    if !held[t.from].contains(&t.block) {
                        return Err(bad(t.from, format!("step {s} sends {:?} it does not hold", t.block)));
                    }
                }
                for t in batch {
                    held[t.to].insert(t.block);
                }
            }
            for tile in &step.tiles {
                for b in [tile.row_block, tile.col_block] {
                    if !held[tile.worker].contains(&b) {
                        return Err(bad(tile.worker, format!("step {s} computes with {b:?} it does not hold")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Builds the tiling and communication plan for `k` workers.
///
/// `k` is reduced to the number of row states when larger. For train kind
/// `n_kets` must equal `n_bras`.
pub fn make_schedule(
    n_bras: usize,
    n_kets: usize,
    k: usize,
    strategy: Strategy,
    kind: GramKind,
) -> Result<TileSchedule, KernelError> {
    if k == 0 {
        return Err(KernelError::NoWorkers);
    }
    if kind == GramKind::Train && n_bras != n_kets {
        return Err(KernelError::TrainNotSquare);
    }
    let k = k.min(n_bras).max(1);
    let mut sched = TileSchedule {
        strategy,
        kind,
        k,
        n_bras,
        n_kets,
        bra_blocks: Vec::new(),
        ket_blocks: Vec::new(),
        simulations: vec![Vec::new(); k],
        steps: Vec::new(),
    };
    if n_bras == 0 || (kind == GramKind::Test && n_kets == 0) {
        return Ok(sched);
    }
    match (strategy, kind) {
        (Strategy::RoundRobin, GramKind::Train) => round_robin_train(&mut sched),
        (Strategy::RoundRobin, GramKind::Test) => round_robin_test(&mut sched),
        (Strategy::NoMessaging, GramKind::Train) => no_messaging_train(&mut sched),
        (Strategy::NoMessaging, GramKind::Test) => no_messaging_test(&mut sched),
    }
    Ok(sched)
}

fn make_tile(s: &TileSchedule, worker: usize, row_block: BlockId, col_block: BlockId) -> Tile {
    Tile {
        worker,
        row_block,
        col_block,
        rows: s.block_range(row_block),
        cols: s.block_range(col_block),
    }
}

fn round_robin_train(s: &mut TileSchedule) {
    let k = s.k;
    s.bra_blocks = split_blocks(s.n_bras, k);
    s.simulations = (0..k).map(|p| vec![BlockId::bra(p)]).collect();
    let diagonal = (0..k)
        .map(|p| make_tile(s, p, BlockId::bra(p), BlockId::bra(p)))
        .collect();
    s.steps.push(Step {
        tiles: diagonal,
        transfers: Vec::new(),
    });
    for shift in 1..=k / 2 {
        // with even k the last shift pairs each block with its antipode, so
        // only the first half of the workers evaluates it
        let active: Vec<usize> = if 2 * shift == k {
            (0..k / 2).collect()
        } else {
            (0..k).collect()
        };
        let mut step = Step::default();
        for &p in &active {
            let travelling = BlockId::bra((p + shift) % k);
            step.transfers.push(Transfer {
                from: (p + 1) % k,
                to: p,
                block: travelling,
                round: 0,
            });
            step.tiles.push(make_tile(s, p, BlockId::bra(p), travelling));
        }
        s.steps.push(step);
    }
}

fn round_robin_test(s: &mut TileSchedule) {
    let k = s.k;
    let height = s.n_bras.div_ceil(k);
    let ell = s.n_kets.div_ceil(height).clamp(1, k.min(s.n_kets));
    let groups = k / ell;
    let leftover = k % ell;
    s.bra_blocks = split_blocks(s.n_bras, k);
    s.ket_blocks = split_blocks(s.n_kets, ell);
    s.simulations = (0..k)
        .map(|w| {
            let mut v = vec![BlockId::bra(w)];
            if w < ell {
                v.push(BlockId::ket(w));
            }
            v
        })
        .collect();
    for shift in 0..ell {
        let mut step = Step::default();
        for g in 0..groups {
            for t in 0..ell {
                let to = g * ell + t;
                if shift == 0 && g > 0 {
                    step.transfers.push(Transfer {
                        from: t,
                        to,
                        block: BlockId::ket(t),
                        round: 0,
                    });
                } else if shift > 0 {
                    step.transfers.push(Transfer {
                        from: g * ell + (t + 1) % ell,
                        to,
                        block: BlockId::ket((t + shift) % ell),
                        round: 0,
                    });
                }
            }
        }
        for t in 0..leftover {
            step.transfers.push(Transfer {
                from: t,
                to: groups * ell + t,
                block: BlockId::ket((t + shift) % ell),
                round: 1,
            });
        }
        for w in 0..k {
            let col = BlockId::ket((w % ell + shift) % ell);
            step.tiles.push(make_tile(s, w, BlockId::bra(w), col));
        }
        s.steps.push(step);
    }
}

/// Assigns tiles to the least loaded worker, largest tiles first, ties to
/// the lowest index.
fn balance_tiles(s: &mut TileSchedule, pairs: Vec<(BlockId, BlockId)>) {
    let weight = |s: &TileSchedule, (r, c): (BlockId, BlockId)| {
        let (nr, nc) = (s.block_range(r).len(), s.block_range(c).len());
        if s.kind == GramKind::Train && r == c {
            nr * (nr + 1) / 2
        } else {
            nr * nc
        }
    };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&t| std::cmp::Reverse(weight(s, pairs[t])));
    let mut load = vec![0usize; s.k];
    let mut tiles = Vec::with_capacity(pairs.len());
    for t in order {
        let w = (0..s.k).min_by_key(|&w| (load[w], w)).expect("k >= 1");
        load[w] += weight(s, pairs[t]);
        tiles.push((t, make_tile(s, w, pairs[t].0, pairs[t].1)));
    }
    tiles.sort_by_key(|(t, _)| *t);
    let tiles: Vec<Tile> = tiles.into_iter().map(|(_, tile)| tile).collect();
    for tile in &tiles {
        let sims = &mut s.simulations[tile.worker];
        for b in [tile.row_block, tile.col_block] {
            if !sims.contains(&b) {
                sims.push(b);
            }
        }
    }
    for sims in &mut s.simulations {
        sims.sort();
    }
    s.steps.push(Step {
        tiles,
        transfers: Vec::new(),
    });
}

fn no_messaging_train(s: &mut TileSchedule) {
    let mut b = 1;
    while b * (b + 1) / 2 < s.k {
        b += 1;
    }
    let b = b.min(s.n_bras);
    s.bra_blocks = split_blocks(s.n_bras, b);
    let pairs = (0..b)
        .flat_map(|p| (p..b).map(move |q| (BlockId::bra(p), BlockId::bra(q))))
        .collect();
    balance_tiles(s, pairs);
}

fn no_messaging_test(s: &mut TileSchedule) {
    let (nb, nk, k) = (s.n_bras as f64, s.n_kets as f64, s.k);
    let mut best: Option<((usize, usize), (f64, usize))> = None;
    for br in 1..=k.min(s.n_bras) {
        let bc = k.div_ceil(br);
        if bc > s.n_kets {
            continue;
        }
        let aspect = ((nb / br as f64) / (nk / bc as f64)).ln().abs();
        let key = (aspect, br * bc);
        if best.is_none_or(|(_, b)| key.0 < b.0 - 1e-12 || (key.0 <= b.0 + 1e-12 && key.1 < b.1)) {
            best = Some(((br, bc), key));
        }
    }
    let ((br, bc), _) = best.expect("br = k, bc = 1 is always admissible");
    s.bra_blocks = split_blocks(s.n_bras, br);
    s.ket_blocks = split_blocks(s.n_kets, bc);
    let pairs = (0..br)
        .flat_map(|p| (0..bc).map(move |q| (BlockId::bra(p), BlockId::ket(q))))
        .collect();
    balance_tiles(s, pairs);
}

/// Accumulated wall time in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub simulation: f64,
    pub inner_products: f64,
    pub communication: f64,
    pub merge: f64,
}

impl Timing {
    fn add(&mut self, other: &Timing) {
        self.simulation += other.simulation;
        self.inner_products += other.inner_products;
        self.communication += other.communication;
        self.merge += other.merge;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub worker: usize,
    pub simulations: usize,
    pub inner_products: usize,
    pub messages_sent: usize,
    pub bytes_sent: usize,
    pub timing: Timing,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub simulations: usize,
    pub inner_products: usize,
    pub messages: usize,
    pub bytes_sent: usize,
    /// Worker phases summed over workers, plus the collector's merge.
    pub timing: Timing,
    pub wall_time: f64,
    pub workers: Vec<WorkerReport>,
}

/// Metadata written next to a Gram CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramSidecar {
    pub kind: GramKind,
    pub rows: usize,
    pub cols: usize,
    pub cfg: FeatureMapConfig,
    pub strategy: Strategy,
    pub k: usize,
    pub trunc_budget: f64,
    pub simulations: usize,
    pub inner_products: usize,
    pub messages: usize,
    pub timing: Timing,
    pub wall_time: f64,
}

impl GramSidecar {
    pub fn new(
        gram: &GramMatrix,
        cfg: &FeatureMapConfig,
        schedule: &TileSchedule,
        budget: f64,
        report: &RunReport,
    ) -> Self {
        Self {
            kind: gram.kind(),
            rows: gram.rows(),
            cols: gram.cols(),
            cfg: *cfg,
            strategy: schedule.strategy,
            k: schedule.k,
            trunc_budget: budget,
            simulations: report.simulations,
            inner_products: report.inner_products,
            messages: report.messages,
            timing: report.timing,
            wall_time: report.wall_time,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<(), KernelError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub budget: f64,
    /// How long a worker waits on an empty inbox before rechecking whether
    /// another worker has failed.
    pub poll_interval: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            budget: DEFAULT_TRUNC_BUDGET,
            poll_interval: Duration::from_millis(20),
        }
    }
}

struct Message {
    step: usize,
    round: usize,
    block: BlockId,
    payload: Vec<Vec<u8>>,
}

type Entries = Vec<(usize, usize, f64)>;

/// When a block is last touched by a worker: `(step, phase)` with phase
/// `round` for sends and `usize::MAX` for tile evaluation.
fn last_uses(schedule: &TileSchedule, me: usize) -> HashMap<BlockId, (usize, usize)> {
    let mut last = HashMap::new();
    for (s, step) in schedule.steps.iter().enumerate() {
        for t in step.transfers.iter().filter(|t| t.from == me) {
            let e = last.entry(t.block).or_insert((s, t.round));
            *e = (*e).max((s, t.round));
        }
        for tile in step.tiles.iter().filter(|t| t.worker == me) {
            for b in [tile.row_block, tile.col_block] {
                last.insert(b, (s, usize::MAX));
            }
        }
    }
    last
}

struct Worker<'a> {
    me: usize,
    schedule: &'a TileSchedule,
    bras: &'a [Vec<f64>],
    kets: &'a [Vec<f64>],
    cfg: &'a FeatureMapConfig,
    opts: &'a RunOptions,
    inbox: Receiver<Message>,
    outboxes: Vec<Sender<Message>>,
    abort: &'a AtomicBool,
}

impl Worker<'_> {
    fn rows_for(&self, block: BlockId) -> &[Vec<f64>] {
        let range = self.schedule.block_range(block);
        match block.side {
            Side::Bra => &self.bras[range],
            Side::Ket => &self.kets[range],
        }
    }

    fn run(self) -> Result<(Entries, WorkerReport), KernelError> {
        let mut report = WorkerReport {
            worker: self.me,
            ..WorkerReport::default()
        };
        let last = last_uses(self.schedule, self.me);
        let mut held: HashMap<BlockId, Vec<MpsState>> = HashMap::new();
        let t0 = Instant::now();
        for &b in &self.schedule.simulations[self.me] {
            if self.abort.load(Ordering::Relaxed) {
                return Err(self.aborted());
            }
            let states = simulate_dataset(self.rows_for(b), self.cfg, self.opts.budget)?;
            report.simulations += states.len();
            held.insert(b, states);
        }
        report.timing.simulation = t0.elapsed().as_secs_f64();

        let mut pending: HashMap<(usize, usize, BlockId), Vec<Vec<u8>>> = HashMap::new();
        let mut entries = Vec::new();
        for (s, step) in self.schedule.steps.iter().enumerate() {
            let rounds = step.transfers.iter().map(|t| t.round + 1).max().unwrap_or(0);
            for round in 0..rounds {
                let t_comm = Instant::now();
                for t in step.transfers.iter().filter(|t| t.round == round) {
                    if t.from == self.me {
                        let payload: Vec<Vec<u8>> =
                            held[&t.block].iter().map(MpsState::to_bytes).collect();
                        report.messages_sent += 1;
                        report.bytes_sent += payload.iter().map(Vec::len).sum::<usize>();
                        let msg = Message {
                            step: s,
                            round,
                            block: t.block,
                            payload,
                        };
                        // a closed inbox means the receiver already bailed out
                        let _ = self.outboxes[t.to].send(msg);
                    }
                }
                for t in step.transfers.iter().filter(|t| t.round == round && t.to == self.me) {
                    let payload = self.receive(&mut pending, (s, round, t.block))?;
                    let states = payload
                        .iter()
                        .map(|b| MpsState::from_bytes(b))
                        .collect::<Result<Vec<_>, _>>()?;
                    held.insert(t.block, states);
                }
                held.retain(|b, _| last.get(b).is_some_and(|&(ls, lp)| (ls, lp) > (s, round)));
                report.timing.communication += t_comm.elapsed().as_secs_f64();
            }

            let t_ip = Instant::now();
            for tile in step.tiles.iter().filter(|t| t.worker == self.me) {
                let rows = &held[&tile.row_block];
                let cols = &held[&tile.col_block];
                let mut failure = None;
                self.schedule.tile_entries(tile, |i, j| {
                    if failure.is_some() {
                        return;
                    }
                    if self.schedule.kind == GramKind::Train && i == j {
                        entries.push((i, j, 1.0));
                        return;
                    }
                    // train entries come back as (min, max); locate both
                    // states in whichever block holds them
                    let lookup = |idx: usize, prefer_rows: bool| {
                        let (first, fr, second, sr) = if prefer_rows {
                            (rows, &tile.rows, cols, &tile.cols)
                        } else {
                            (cols, &tile.cols, rows, &tile.rows)
                        };
                        if fr.contains(&idx) {
                            &first[idx - fr.start]
                        } else {
                            &second[idx - sr.start]
                        }
                    };
                    match kernel_entry(lookup(i, true), lookup(j, false)) {
                        Ok(v) => {
                            report.inner_products += 1;
                            entries.push((i, j, v));
                        }
                        Err(e) => failure = Some(e),
                    }
                });
                if let Some(e) = failure {
                    return Err(e);
                }
            }
            held.retain(|b, _| last.get(b).is_some_and(|&(ls, _)| ls > s));
            report.timing.inner_products += t_ip.elapsed().as_secs_f64();
        }
        Ok((entries, report))
    }

    fn receive(
        &self,
        pending: &mut HashMap<(usize, usize, BlockId), Vec<Vec<u8>>>,
        key: (usize, usize, BlockId),
    ) -> Result<Vec<Vec<u8>>, KernelError> {
        loop {
            if let Some(p) = pending.remove(&key) {
                return Ok(p);
            }
            match self.inbox.recv_timeout(self.opts.poll_interval) {
                Ok(msg) => {
                    pending.insert((msg.step, msg.round, msg.block), msg.payload);
                }
                Err(RecvTimeoutError::Timeout) => {
                    if self.abort.load(Ordering::Relaxed) {
                        return Err(self.aborted());
                    }
                }
                Err(RecvTimeoutError::Disconnected) => return Err(self.aborted()),
            }
        }
    }

    fn aborted(&self) -> KernelError {
        KernelError::Worker {
            worker: self.me,
            reason: "aborted after another worker failed".into(),
        }
    }
}

/// Simulates and evaluates a Gram matrix with one thread per scheduled
/// worker, then merges the tiles at a single collector.
///
/// For train kind `kets` must equal `bras`. Any worker error fails the whole
/// run; the first failing worker's error is returned.
pub fn run_distributed(
    bras: &[Vec<f64>],
    kets: &[Vec<f64>],
    cfg: &FeatureMapConfig,
    schedule: &TileSchedule,
    opts: &RunOptions,
) -> Result<(GramMatrix, RunReport), KernelError> {
    if schedule.kind == GramKind::Train && bras != kets {
        return Err(KernelError::TrainNotSquare);
    }
    if (schedule.n_bras, schedule.n_kets) != (bras.len(), kets.len()) {
        return Err(KernelError::ScheduleMismatch {
            expected: (schedule.n_bras, schedule.n_kets),
            actual: (bras.len(), kets.len()),
        });
    }
    let wall = Instant::now();
    let abort = AtomicBool::new(false);
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..schedule.k).map(|_| unbounded()).unzip();
    let results: Vec<Result<(Entries, WorkerReport), KernelError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = receivers
            .into_iter()
            .enumerate()
            .map(|(me, inbox)| {
                let worker = Worker {
                    me,
                    schedule,
                    bras,
                    kets,
                    cfg,
                    opts,
                    inbox,
                    outboxes: senders.clone(),
                    abort: &abort,
                };
                let abort = &abort;
                scope.spawn(move || {
                    let out = worker.run();
                    if out.is_err() {
                        abort.store(true, Ordering::Relaxed);
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(w, h)| {
                h.join().unwrap_or_else(|_| {
                    Err(KernelError::Worker {
                        worker: w,
                        reason: "panicked".into(),
                    })
                })
            })
            .collect()
    });
    drop(senders);

    // report the root cause rather than a secondary abort
    let mut first_abort = None;
    let mut outputs = Vec::with_capacity(results.len());
    for (w, r) in results.into_iter().enumerate() {
        match r {
            Ok(out) => outputs.push(out),
            Err(KernelError::Worker { reason, .. }) if reason.starts_with("aborted") => {
                first_abort.get_or_insert(w);
            }
            Err(e) => {
                return Err(KernelError::Worker {
                    worker: w,
                    reason: e.to_string(),
                })
            }
        }
    }
    if let Some(w) = first_abort {
        return Err(KernelError::Worker {
            worker: w,
            reason: "aborted without a reported cause".into(),
        });
    }

    let t_merge = Instant::now();
    let (rows, cols) = (bras.len(), kets.len());
    let mut entries = vec![0.0; rows * cols];
    let mut hits = vec![0usize; rows * cols];
    let mut report = RunReport::default();
    for (tile_entries, wr) in outputs {
        for (i, j, v) in tile_entries {
            entries[i * cols + j] = v;
            hits[i * cols + j] += 1;
        }
        report.simulations += wr.simulations;
        report.inner_products += wr.inner_products;
        report.messages += wr.messages_sent;
        report.bytes_sent += wr.bytes_sent;
        report.timing.add(&wr.timing);
        report.workers.push(wr);
    }
    for i in 0..rows {
        let from = if schedule.kind == GramKind::Train { i } else { 0 };
        for j in from..cols {
            if hits[i * cols + j] != 1 {
                return Err(KernelError::Coverage(i, j, hits[i * cols + j]));
            }
        }
    }
    if schedule.kind == GramKind::Train {
        for i in 0..rows {
            for j in 0..i {
                entries[i * cols + j] = entries[j * cols + i];
            }
        }
    }
    let gram = GramMatrix::new(schedule.kind, rows, cols, entries)?;
    report.timing.merge = t_merge.elapsed().as_secs_f64();
    report.wall_time = wall.elapsed().as_secs_f64();
    Ok((gram, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..m).map(|_| rng.random_range(0.0..=2.0)).collect())
            .collect()
    }

    #[test]
    fn split_blocks_front_loads_remainder() {
        assert_eq!(split_blocks(10, 4), vec![0..3, 3..6, 6..8, 8..10]);
        assert_eq!(split_blocks(2, 4), vec![0..1, 1..2, 2..2, 2..2]);
    }

    #[test]
    fn serial_schedule_is_one_tile() {
        for kind in [GramKind::Train, GramKind::Test] {
            for strategy in [Strategy::RoundRobin, Strategy::NoMessaging] {
                let s = make_schedule(7, 7, 1, strategy, kind).unwrap();
                assert_eq!(s.tiles().count(), 1);
                assert_eq!(s.transfers().count(), 0);
                s.validate().unwrap();
            }
        }
    }

    #[test]
    fn round_robin_train_eight_by_four() {
        let s = make_schedule(8, 8, 4, Strategy::RoundRobin, GramKind::Train).unwrap();
        s.validate().unwrap();
        for w in 0..4 {
            let n: usize = s.simulations[w].iter().map(|&b| s.block_range(b).len()).sum();
            assert_eq!(n, 2);
        }
        assert!(s.transfers().count() > 0);
        assert_eq!(s.simulation_count(), 8);
    }

    #[test]
    fn no_messaging_train_duplicates_simulation() {
        let s = make_schedule(8, 8, 4, Strategy::NoMessaging, GramKind::Train).unwrap();
        s.validate().unwrap();
        assert_eq!(s.transfers().count(), 0);
        assert!((0..8).any(|i| s.simulated_by(Side::Bra, i).len() >= 2));
        assert!(s.simulation_count() >= 8);
    }

    #[test]
    fn oversubscribed_workers_are_reduced() {
        let s = make_schedule(3, 3, 10, Strategy::RoundRobin, GramKind::Train).unwrap();
        assert_eq!(s.k, 3);
        s.validate().unwrap();
        assert!(matches!(
            make_schedule(3, 3, 0, Strategy::RoundRobin, GramKind::Train),
            Err(KernelError::NoWorkers)
        ));
    }

    #[test]
    fn empty_inputs_give_empty_schedule_and_matrix() {
        let cfg = FeatureMapConfig::new(3, 1, 1, 0.5).unwrap();
        let s = make_schedule(0, 0, 2, Strategy::RoundRobin, GramKind::Train).unwrap();
        let (g, rep) = run_distributed(&[], &[], &cfg, &s, &RunOptions::default()).unwrap();
        assert_eq!((g.rows(), g.cols(), rep.inner_products), (0, 0, 0));
    }

    #[test]
    fn strategy_parses_both_spellings() {
        assert_eq!("round-robin".parse::<Strategy>().unwrap(), Strategy::RoundRobin);
        assert_eq!("no_messaging".parse::<Strategy>().unwrap(), Strategy::NoMessaging);
        assert!("mpi".parse::<Strategy>().is_err());
        assert_eq!(Strategy::NoMessaging.to_string(), "no-messaging");
    }

    #[test]
    fn distributed_matches_serial_train_and_test() {
        let cfg = FeatureMapConfig::new(5, 1, 2, 0.7).unwrap();
        let xb = rows(7, 5, 1);
        let xk = rows(5, 5, 2);
        let sb = simulate_dataset(&xb, &cfg, DEFAULT_TRUNC_BUDGET).unwrap();
        let sk = simulate_dataset(&xk, &cfg, DEFAULT_TRUNC_BUDGET).unwrap();
        let train = compute_gram(&sb, &sb, GramKind::Train).unwrap();
        let test = compute_gram(&sb, &sk, GramKind::Test).unwrap();
        for strategy in [Strategy::RoundRobin, Strategy::NoMessaging] {
            for k in [1, 2, 3, 5] {
                let s = make_schedule(7, 7, k, strategy, GramKind::Train).unwrap();
                let (g, _) = run_distributed(&xb, &xb, &cfg, &s, &RunOptions::default()).unwrap();
                assert_eq!(g, train, "{strategy} k={k}");
                let s = make_schedule(7, 5, k, strategy, GramKind::Test).unwrap();
                let (g, _) = run_distributed(&xb, &xk, &cfg, &s, &RunOptions::default()).unwrap();
                assert_eq!(g, test, "{strategy} k={k}");
            }
        }
    }

    #[test]
    fn bad_row_fails_the_whole_run() {
        let cfg = FeatureMapConfig::new(4, 1, 1, 0.5).unwrap();
        let mut x = rows(6, 4, 3);
        x[5][2] = 2.5;
        let s = make_schedule(6, 6, 3, Strategy::RoundRobin, GramKind::Train).unwrap();
        let err = run_distributed(&x, &x, &cfg, &s, &RunOptions::default()).unwrap_err();
        assert!(matches!(err, KernelError::Worker { worker: 2, .. }), "{err}");
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let g = GramMatrix::from_fn(GramKind::Test, 2, 3, |i, j| {
            1.0 / (1.0 + i as f64 + 3.0 * j as f64) + 1e-17
        })
        .unwrap();
        let back = GramMatrix::from_csv_str(&g.to_csv_string(), GramKind::Test).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn min_eigenvalue_of_identity() {
        let g = GramMatrix::from_fn(GramKind::Train, 3, 3, |i, j| f64::from(u8::from(i == j))).unwrap();
        assert!((g.min_eigenvalue().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(g.symmetry_defect(), 0.0);
    }
}
