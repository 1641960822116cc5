//! Dense complex tensors.
//!
//! Entries are stored row-major: the last axis varies fastest. Every reshape
//! in the crate goes through this one bijection, so a tensor reshaped into a
//! matrix over a split of its axes and back is always bit-identical.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} entries but {actual} were given")]
    EntryCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("bond dimensions must be at least 1, got shape {0:?}")]
    ZeroDimension(Vec<usize>),
    #[error("cannot reshape {from:?} ({from_len} entries) into {to:?} ({to_len} entries)")]
    ReshapeSize {
        from: Vec<usize>,
        to: Vec<usize>,
        from_len: usize,
        to_len: usize,
    },
    #[error("axis {axis} is out of range for a rank-{rank} tensor")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("axis {0} appears more than once")]
    RepeatedAxis(usize),
    #[error("paired axes ({a_axis}, {b_axis}) have dimensions {a_dim} and {b_dim}")]
    DimensionMismatch {
        a_axis: usize,
        b_axis: usize,
        a_dim: usize,
        b_dim: usize,
    },
    #[error("axis permutation {0:?} is not a permutation")]
    BadPermutation(Vec<usize>),
    #[error("an SVD split needs at least one axis on each side")]
    EmptyPartition,
    #[error("tensor contains non-finite entries")]
    NonFinite,
    #[error("truncation budget must be finite and non-negative, got {0}")]
    BadBudget(f64),
}

/// Complex tensor with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<C64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<C64>) -> Result<Self, TensorError> {
        let shape = if shape.is_empty() { vec![1] } else { shape };
        if shape.contains(&0) {
            return Err(TensorError::ZeroDimension(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::EntryCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        let len = shape.iter().product();
        Self::new(shape.to_vec(), vec![C64::new(0.0, 0.0); len])
    }

    pub fn from_real(shape: Vec<usize>, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    pub fn scalar(value: C64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> C64) -> Result<Self, TensorError> {
        let len: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&idx));
            increment(&mut idx, shape);
        }
        Self::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-entry tensor, if this is one.
    pub fn as_scalar(&self) -> Option<C64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> C64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: C64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn scale(&mut self, factor: C64) {
        self.data.iter_mut().for_each(|z| *z *= factor);
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self, TensorError> {
        reshape(self, new_shape)
    }

    pub fn conj(&self) -> Self {
        conjugate(self)
    }

    /// Reorders axes so that output axis `k` is input axis `axes[k]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self, TensorError> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank {
            return Err(TensorError::BadPermutation(axes.to_vec()));
        }
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(TensorError::BadPermutation(axes.to_vec()));
            }
            seen[a] = true;
        }
        if axes.iter().enumerate().all(|(k, &a)| k == a) {
            return Ok(self.clone());
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[src]);
            // odometer step that keeps the source offset in sync
            for k in (0..rank).rev() {
                idx[k] += 1;
                src += src_strides[k];
                if idx[k] < out_shape[k] {
                    break;
                }
                src -= src_strides[k] * out_shape[k];
                idx[k] = 0;
            }
        }
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    /// Views the tensor as a matrix whose rows are the first `row_axes` axes.
    pub fn to_matrix(&self, row_axes: usize) -> DMatrix<C64> {
        let rows: usize = self.shape[..row_axes].iter().product();
        let cols = self.data.len() / rows;
        DMatrix::from_row_slice(rows, cols, &self.data)
    }

    pub fn from_matrix(m: &DMatrix<C64>, shape: Vec<usize>) -> Result<Self, TensorError> {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        Self::new(shape, data)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for k in (0..shape.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

/// Row-major product of an `n × k` and a `k × p` matrix stored as flat slices.
pub(crate) fn matmul(a: &[C64], b: &[C64], n: usize, k: usize, p: usize) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); n * p];
    for i in 0..n {
        let row = &mut out[i * p..(i + 1) * p];
        for (l, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av.re == 0.0 && av.im == 0.0 {
                continue;
            }
            let brow = &b[l * p..(l + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Contracts `a` and `b` over the given `(axis of a, axis of b)` pairs.
///
/// The result carries the free axes of `a` followed by the free axes of `b`,
/// each in their original order. Contracting every axis yields shape `[1]`.
pub fn contract(
    a: &DenseTensor,
    b: &DenseTensor,
    bond_pairs: &[(usize, usize)],
) -> Result<DenseTensor, TensorError> {
    let mut used_a = vec![false; a.rank()];
    let mut used_b = vec![false; b.rank()];
    for &(ia, ib) in bond_pairs {
        if ia >= a.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis: ia,
                rank: a.rank(),
            });
        }
        if ib >= b.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis: ib,
                rank: b.rank(),
            });
        }
        if used_a[ia] {
            return Err(TensorError::RepeatedAxis(ia));
        }
        if used_b[ib] {
            return Err(TensorError::RepeatedAxis(ib));
        }
        used_a[ia] = true;
        used_b[ib] = true;
        if a.shape[ia] != b.shape[ib] {
            return Err(TensorError::DimensionMismatch {
                a_axis: ia,
                b_axis: ib,
                a_dim: a.shape[ia],
                b_dim: b.shape[ib],
            });
        }
    }
    let free_a: Vec<usize> = (0..a.rank()).filter(|&k| !used_a[k]).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|&k| !used_b[k]).collect();

    let perm_a: Vec<usize> = free_a
        .iter()
        .copied()
        .chain(bond_pairs.iter().map(|&(ia, _)| ia))
        .collect();
    let perm_b: Vec<usize> = bond_pairs
        .iter()
        .map(|&(_, ib)| ib)
        .chain(free_b.iter().copied())
        .collect();
    let pa = a.permute(&perm_a)?;
    let pb = b.permute(&perm_b)?;

    let n: usize = free_a.iter().map(|&k| a.shape[k]).product();
    let inner: usize = bond_pairs.iter().map(|&(ia, _)| a.shape[ia]).product();
    let p: usize = free_b.iter().map(|&k| b.shape[k]).product();
    let data = matmul(&pa.data, &pb.data, n, inner, p);

    let shape: Vec<usize> = free_a
        .iter()
        .map(|&k| a.shape[k])
        .chain(free_b.iter().map(|&k| b.shape[k]))
        .collect();
    DenseTensor::new(shape, data)
}

pub fn reshape(t: &DenseTensor, new_shape: &[usize]) -> Result<DenseTensor, TensorError> {
    let to_len: usize = new_shape.iter().product();
    if to_len != t.data.len() || new_shape.contains(&0) {
        return Err(TensorError::ReshapeSize {
            from: t.shape.clone(),
            to: new_shape.to_vec(),
            from_len: t.data.len(),
            to_len,
        });
    }
    DenseTensor::new(new_shape.to_vec(), t.data.clone())
}

pub fn conjugate(t: &DenseTensor) -> DenseTensor {
    DenseTensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|z| z.conj()).collect(),
    }
}

/// Singular values below this multiple of machine epsilon, relative to the
/// largest one, are dropped as exact zeros and never charged to the budget.
pub const NOISE_FLOOR: f64 = 10.0 * f64::EPSILON;

/// Truncation controls for [`svd_truncated_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truncation {
    /// Largest total squared weight that may be discarded.
    pub budget: f64,
    /// Hard cap on the retained rank, for splits whose exact rank is known.
    pub max_rank: Option<usize>,
}

impl Truncation {
    pub fn budget(budget: f64) -> Self {
        Self {
            budget,
            max_rank: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// Row axes of the input followed by the new bond.
    pub left: DenseTensor,
    /// Non-increasing, all non-negative.
    pub singular_values: Vec<f64>,
    /// New bond followed by the column axes of the input.
    pub right: DenseTensor,
    /// Sum of squares of the singular values removed by the budget.
    pub discarded_weight: f64,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }
}

/// Truncated SVD of `t` viewed as a matrix with `row_axes` as rows and the
/// remaining axes (in their original order) as columns.
pub fn svd_truncated(
    t: &DenseTensor,
    row_axes: &[usize],
    budget: f64,
) -> Result<SvdResult, TensorError> {
    svd_truncated_with(t, row_axes, Truncation::budget(budget))
}

pub fn svd_truncated_with(
    t: &DenseTensor,
    row_axes: &[usize],
    trunc: Truncation,
) -> Result<SvdResult, TensorError> {
    if !(trunc.budget.is_finite() && trunc.budget >= 0.0) {
        return Err(TensorError::BadBudget(trunc.budget));
    }
    let rank = t.rank();
    let mut is_row = vec![false; rank];
    for &a in row_axes {
        if a >= rank {
            return Err(TensorError::AxisOutOfRange { axis: a, rank });
        }
        if is_row[a] {
            return Err(TensorError::RepeatedAxis(a));
        }
        is_row[a] = true;
    }
    let col_axes: Vec<usize> = (0..rank).filter(|&k| !is_row[k]).collect();
    if row_axes.is_empty() || col_axes.is_empty() {
        return Err(TensorError::EmptyPartition);
    }
    if !t.is_finite() {
        return Err(TensorError::NonFinite);
    }
    let perm: Vec<usize> = row_axes.iter().chain(&col_axes).copied().collect();
    let p = t.permute(&perm)?;
    let row_dims: Vec<usize> = row_axes.iter().map(|&a| t.shape[a]).collect();
    let col_dims: Vec<usize> = col_axes.iter().map(|&a| t.shape[a]).collect();
    let mat = p.to_matrix(row_axes.len());

    let (u, s, v_t) = svd_sorted(mat);
    let keep = retained_rank(&s, trunc);
    let discarded_weight: f64 = s[keep..]
        .iter()
        .filter(|&&x| x > NOISE_FLOOR * s[0])
        .map(|x| x * x)
        .sum();

    let mut left_shape = row_dims;
    left_shape.push(keep);
    let mut right_shape = vec![keep];
    right_shape.extend(col_dims);
    let left = DenseTensor::from_matrix(&u.columns(0, keep).into_owned(), left_shape)?;
    let right = DenseTensor::from_matrix(&v_t.rows(0, keep).into_owned(), right_shape)?;
    Ok(SvdResult {
        left,
        singular_values: s[..keep].to_vec(),
        right,
        discarded_weight,
    })
}

/// Number of singular values kept under `trunc`; always at least 1.
pub(crate) fn retained_rank(s: &[f64], trunc: Truncation) -> usize {
    if s.is_empty() {
        return 0;
    }
    let floor = NOISE_FLOOR * s[0];
    let mut keep = s.iter().take_while(|&&x| x > floor).count();
    if let Some(cap) = trunc.max_rank {
        keep = keep.min(cap);
    }
    let mut tail = 0.0;
    while keep > 1 {
        let w = s[keep - 1] * s[keep - 1];
        if tail + w > trunc.budget {
            break;
        }
        tail += w;
        keep -= 1;
    }
    keep.max(1)
}

/// Below this smaller dimension the SVD uses one-sided Jacobi, which keeps
/// full accuracy for strongly graded spectra on very thin matrices.
const JACOBI_MAX_DIM: usize = 16;

const JACOBI_MAX_SWEEPS: usize = 80;

/// Thin SVD with singular values sorted in non-increasing order.
pub(crate) fn svd_sorted(mat: DMatrix<C64>) -> (DMatrix<C64>, Vec<f64>, DMatrix<C64>) {
    let (r, c) = mat.shape();
    if r.min(c) <= JACOBI_MAX_DIM {
        return jacobi_svd(mat);
    }
    let svd = mat.svd_unordered(true, true);
    let u = svd.u.expect("left vectors requested");
    let v_t = svd.v_t.expect("right vectors requested");
    let raw: Vec<f64> = svd.singular_values.iter().copied().collect();
    let k = raw.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| raw[j].total_cmp(&raw[i]).then(i.cmp(&j)));
    let s: Vec<f64> = order.iter().map(|&i| raw[i].max(0.0)).collect();
    let u_sorted = DMatrix::from_fn(r, k, |row, col| u[(row, order[col])]);
    let v_sorted = DMatrix::from_fn(k, c, |row, col| v_t[(order[row], col)]);
    (u_sorted, s, v_sorted)
}

/// One-sided (Hestenes) Jacobi SVD, orthogonalizing the columns of the
/// thinner orientation.
fn jacobi_svd(mat: DMatrix<C64>) -> (DMatrix<C64>, Vec<f64>, DMatrix<C64>) {
    let transposed = mat.nrows() < mat.ncols();
    let mut w = if transposed { mat.adjoint() } else { mat };
    let (rows, n) = w.shape();
    let mut v = DMatrix::<C64>::identity(n, n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, C64::new(0.0, 0.0));
                for i in 0..rows {
                    let (a, b) = (w[(i, p)], w[(i, q)]);
                    alpha += a.norm_sqr();
                    beta += b.norm_sqr();
                    gamma += a.conj() * b;
                }
                let g = gamma.norm();
                if g <= f64::EPSILON * (alpha * beta).sqrt() || g == 0.0 {
                    continue;
                }
                rotated = true;
                let phase = gamma / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for m in [&mut w, &mut v] {
                    for i in 0..m.nrows() {
                        let a = m[(i, p)];
                        let b = m[(i, q)] * phase.conj();
                        m[(i, p)] = a * cs - b * sn;
                        m[(i, q)] = a * sn + b * cs;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let mut u = DMatrix::<C64>::zeros(rows, n);
    let mut vs = DMatrix::<C64>::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (col, &j) in order.iter().enumerate() {
        s.push(sigma[j]);
        vs.set_column(col, &v.column(j));
        if sigma[j] > 0.0 {
            u.set_column(col, &(w.column(j) / C64::new(sigma[j], 0.0)));
        }
    }
    complete_orthonormal(&mut u, &s);
    if transposed {
        (vs, s, u.adjoint())
    } else {
        (u, s, vs.adjoint())
    }
}

/// Replaces the columns belonging to zero singular values with unit vectors
/// orthogonal to all other columns.
fn complete_orthonormal(u: &mut DMatrix<C64>, s: &[f64]) {
    let rows = u.nrows();
    let mut probe = 0;
    for col in 0..s.len() {
        if s[col] > 0.0 {
            continue;
        }
        while probe < rows {
            let mut e = nalgebra::DVector::<C64>::zeros(rows);
            e[probe] = C64::new(1.0, 0.0);
            probe += 1;
            for _ in 0..2 {
                for k in (0..s.len()).filter(|&k| k != col) {
                    let uk = u.column(k).clone_owned();
                    let proj = uk.dotc(&e);
                    e -= uk * proj;
                }
            }
            let norm = e.norm();
            if norm > 0.5 {
                u.set_column(col, &(e / C64::new(norm, 0.0)));
                break;
            }
        }
    }
}
