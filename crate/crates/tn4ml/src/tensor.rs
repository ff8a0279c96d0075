//! Dense multidimensional arrays with named indices.
//!
//! Tensors carry an ordered list of [`Index`] values (label + dimension) and a
//! flat row-major `f64` buffer. Indices are matched by label: two tensors
//! contract over every label they share, so no axis bookkeeping is needed at
//! call sites. Matricization, SVD and QR operate on a caller-chosen bipartition
//! of the labels.

use ndarray::ArrayView2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("duplicate index label `{0}` within one tensor")]
    DuplicateLabel(String),

    #[error("index `{0}` has zero dimension")]
    ZeroDim(String),

    #[error("data length {got} does not match index dimensions (expected {expected})")]
    DataLength { got: usize, expected: usize },

    #[error("non-finite value in tensor data")]
    NonFinite,

    #[error("contraction dimension mismatch on label `{label}`: {left} vs {right}")]
    DimMismatch {
        label: String,
        left: usize,
        right: usize,
    },

    #[error("unknown index label `{0}`")]
    UnknownLabel(String),

    #[error("row labels must form a nonempty proper subset of the tensor's labels")]
    BadRowSet,

    #[error("invalid contraction path: {0}")]
    BadPath(String),

    #[error("max_rank must be at least 1")]
    ZeroMaxRank,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A named tensor index: a label and the axis size it stands for.
///
/// Two indices are contractible iff their labels and dims both match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Index {
    label: String,
    dim: usize,
}

impl Index {
    pub fn new(label: impl Into<String>, dim: usize) -> Self {
        Index {
            label: label.into(),
            dim,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Dense tensor: ordered indices plus a flat row-major data buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    indices: Vec<Index>,
    data: Vec<f64>,
}

impl DenseTensor {
    /// Builds a tensor, validating label uniqueness, dimensions and finiteness.
    pub fn from_data(indices: Vec<Index>, data: Vec<f64>) -> Result<Self> {
        for (i, idx) in indices.iter().enumerate() {
            if idx.dim == 0 {
                return Err(TensorError::ZeroDim(idx.label.clone()));
            }
            if indices[..i].iter().any(|other| other.label == idx.label) {
                return Err(TensorError::DuplicateLabel(idx.label.clone()));
            }
        }
        let expected: usize = indices.iter().map(|i| i.dim).product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                got: data.len(),
                expected,
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(DenseTensor { indices, data })
    }

    /// Internal constructor for results of `tn4ml` arithmetic, which cannot
    /// introduce label clashes and whose finiteness is checked at the few
    /// places the contracts require it.
    pub(crate) fn from_parts(indices: Vec<Index>, data: Vec<f64>) -> Self {
        debug_assert_eq!(
            indices.iter().map(|i| i.dim).product::<usize>(),
            data.len()
        );
        DenseTensor { indices, data }
    }

    pub fn zeros(indices: Vec<Index>) -> Self {
        let len = indices.iter().map(|i| i.dim).product();
        DenseTensor {
            indices,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        DenseTensor {
            indices: Vec::new(),
            data: vec![value],
        }
    }

    /// Identity matrix over two labels of equal dimension.
    pub fn identity(row: impl Into<String>, col: impl Into<String>, dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        DenseTensor {
            indices: vec![Index::new(row, dim), Index::new(col, dim)],
            data,
        }
    }

    pub fn indices(&self) -> &[Index] {
        &self.indices
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn order(&self) -> usize {
        self.indices.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.indices.is_empty()
    }

    /// The value of an order-0 tensor.
    pub fn scalar_value(&self) -> Option<f64> {
        if self.is_scalar() {
            Some(self.data[0])
        } else {
            None
        }
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.indices.iter().any(|i| i.label == label)
    }

    pub fn index_position(&self, label: &str) -> Option<usize> {
        self.indices.iter().position(|i| i.label == label)
    }

    pub fn dim_of(&self, label: &str) -> Option<usize> {
        self.indices
            .iter()
            .find(|i| i.label == label)
            .map(|i| i.dim)
    }

    /// Row-major strides matching the index order.
    pub fn strides(&self) -> Vec<usize> {
        let n = self.indices.len();
        let mut strides = vec![1usize; n];
        for axis in (0..n.saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.indices[axis + 1].dim;
        }
        strides
    }

    /// Entry at the given per-axis coordinates (test and oracle helper).
    pub fn get(&self, coords: &[usize]) -> f64 {
        let strides = self.strides();
        let offset: usize = coords
            .iter()
            .zip(&strides)
            .map(|(c, s)| c * s)
            .sum();
        self.data[offset]
    }

    pub fn set(&mut self, coords: &[usize], value: f64) {
        let strides = self.strides();
        let offset: usize = coords
            .iter()
            .zip(&strides)
            .map(|(c, s)| c * s)
            .sum();
        self.data[offset] = value;
    }

    pub fn scale(mut self, factor: f64) -> Self {
        for v in &mut self.data {
            *v *= factor;
        }
        self
    }

    /// Replaces one index label, keeping data untouched.
    pub fn relabeled(&self, old: &str, new: &str) -> Result<Self> {
        let pos = self
            .index_position(old)
            .ok_or_else(|| TensorError::UnknownLabel(old.to_string()))?;
        let mut indices = self.indices.clone();
        indices[pos].label = new.to_string();
        if indices
            .iter()
            .enumerate()
            .any(|(i, idx)| i != pos && idx.label == new)
        {
            return Err(TensorError::DuplicateLabel(new.to_string()));
        }
        Ok(DenseTensor {
            indices,
            data: self.data.clone(),
        })
    }

    /// Returns the tensor with indices rearranged into `order` (all labels
    /// must be listed exactly once).
    pub fn permuted(&self, order: &[&str]) -> Result<Self> {
        if order.len() != self.indices.len() {
            return Err(TensorError::BadPath(format!(
                "permutation lists {} labels, tensor has {}",
                order.len(),
                self.indices.len()
            )));
        }
        let mut perm = Vec::with_capacity(order.len());
        for label in order {
            let pos = self
                .index_position(label)
                .ok_or_else(|| TensorError::UnknownLabel(label.to_string()))?;
            if perm.contains(&pos) {
                return Err(TensorError::DuplicateLabel(label.to_string()));
            }
            perm.push(pos);
        }
        let indices = perm.iter().map(|&p| self.indices[p].clone()).collect();
        let data = self.permuted_data(&perm);
        Ok(DenseTensor { indices, data })
    }

    /// Row-major buffer of the transposed tensor (`perm[d]` = source axis of
    /// output axis `d`).
    fn permuted_data(&self, perm: &[usize]) -> Vec<f64> {
        let n = self.indices.len();
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return self.data.clone();
        }
        let in_strides = self.strides();
        let out_dims: Vec<usize> = perm.iter().map(|&p| self.indices[p].dim).collect();
        let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut counter = vec![0usize; n];
        let mut src = 0usize;
        loop {
            out.push(self.data[src]);
            let mut axis = n;
            loop {
                if axis == 0 {
                    return out;
                }
                axis -= 1;
                counter[axis] += 1;
                src += step[axis];
                if counter[axis] < out_dims[axis] {
                    break;
                }
                src -= step[axis] * counter[axis];
                counter[axis] = 0;
            }
        }
    }
}

/// Pairwise contraction over every shared label.
///
/// The result carries the symmetric difference of the two index sets: `a`'s
/// free indices first (in `a`'s order), then `b`'s. With no shared labels this
/// is the outer product; with no free labels it is an order-0 tensor.
pub fn contract(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let mut shared_a = Vec::new();
    let mut shared_b = Vec::new();
    for (pa, ia) in a.indices.iter().enumerate() {
        if let Some(pb) = b.index_position(&ia.label) {
            let dim_b = b.indices[pb].dim;
            if ia.dim != dim_b {
                return Err(TensorError::DimMismatch {
                    label: ia.label.clone(),
                    left: ia.dim,
                    right: dim_b,
                });
            }
            shared_a.push(pa);
            shared_b.push(pb);
        }
    }
    let free_a: Vec<usize> = (0..a.indices.len())
        .filter(|p| !shared_a.contains(p))
        .collect();
    let free_b: Vec<usize> = (0..b.indices.len())
        .filter(|p| !shared_b.contains(p))
        .collect();

    let m: usize = free_a.iter().map(|&p| a.indices[p].dim).product();
    let k: usize = shared_a.iter().map(|&p| a.indices[p].dim).product();
    let n: usize = free_b.iter().map(|&p| b.indices[p].dim).product();

    let perm_a: Vec<usize> = free_a.iter().chain(&shared_a).copied().collect();
    let perm_b: Vec<usize> = shared_b.iter().chain(&free_b).copied().collect();
    let a_buf = a.permuted_data(&perm_a);
    let b_buf = b.permuted_data(&perm_b);

    let a_mat = ArrayView2::from_shape((m, k), &a_buf).expect("shape covers buffer");
    let b_mat = ArrayView2::from_shape((k, n), &b_buf).expect("shape covers buffer");
    let c = a_mat.dot(&b_mat);

    let indices: Vec<Index> = free_a
        .iter()
        .map(|&p| a.indices[p].clone())
        .chain(free_b.iter().map(|&p| b.indices[p].clone()))
        .collect();
    Ok(DenseTensor::from_parts(
        indices,
        c.into_raw_vec_and_offset().0,
    ))
}

/// Contracts a list of tensors along an explicit sequence of pairwise steps.
///
/// Each `(i, j)` step contracts slots `i` and `j` of the working list and
/// appends the result as a new slot; consumed slots cannot be reused. The
/// final state must hold exactly one live tensor, which is returned. A
/// single-tensor list with an empty path returns that tensor.
pub fn contract_network(tensors: &[DenseTensor], path: &[(usize, usize)]) -> Result<DenseTensor> {
    if tensors.is_empty() {
        return Err(TensorError::BadPath("empty tensor list".into()));
    }
    let mut slots: Vec<Option<DenseTensor>> = tensors.iter().cloned().map(Some).collect();
    for &(i, j) in path {
        if i == j {
            return Err(TensorError::BadPath(format!(
                "step contracts slot {i} with itself"
            )));
        }
        let take = |slots: &mut Vec<Option<DenseTensor>>, at: usize| -> Result<DenseTensor> {
            if at >= slots.len() {
                return Err(TensorError::BadPath(format!(
                    "slot {at} out of range ({} slots)",
                    slots.len()
                )));
            }
            slots[at]
                .take()
                .ok_or_else(|| TensorError::BadPath(format!("slot {at} already consumed")))
        };
        let a = take(&mut slots, i)?;
        let b = take(&mut slots, j)?;
        let c = contract(&a, &b)?;
        slots.push(Some(c));
    }
    let mut live = slots.into_iter().flatten();
    match (live.next(), live.next()) {
        (Some(result), None) => Ok(result),
        (Some(_), Some(_)) => Err(TensorError::BadPath(
            "path leaves more than one tensor".into(),
        )),
        _ => unreachable!("at least one tensor always survives"),
    }
}

/// A tensor reshaped to a matrix over a chosen row/column label bipartition.
///
/// `matrix` is order-2 with synthetic labels `rows`/`cols`; the original
/// indices are kept so the reshape can be undone bit-exactly.
#[derive(Debug, Clone)]
pub struct Matricized {
    pub matrix: DenseTensor,
    pub row_indices: Vec<Index>,
    pub col_indices: Vec<Index>,
}

impl Matricized {
    pub fn nrows(&self) -> usize {
        self.row_indices.iter().map(|i| i.dim).product()
    }

    pub fn ncols(&self) -> usize {
        self.col_indices.iter().map(|i| i.dim).product()
    }

    /// Undoes the reshape: the tensor with indices `[rows..., cols...]` and
    /// the matrix's data buffer, unchanged.
    pub fn unmatricize(&self) -> DenseTensor {
        let indices: Vec<Index> = self
            .row_indices
            .iter()
            .chain(&self.col_indices)
            .cloned()
            .collect();
        DenseTensor::from_parts(indices, self.matrix.data.clone())
    }
}

/// Reshapes `t` into a matrix whose rows run over `row_labels` (in the order
/// given) and whose columns run over the remaining labels (in tensor order).
pub fn matricize(t: &DenseTensor, row_labels: &[&str]) -> Result<Matricized> {
    if row_labels.is_empty() || row_labels.len() >= t.indices.len() {
        return Err(TensorError::BadRowSet);
    }
    let mut row_pos = Vec::with_capacity(row_labels.len());
    for label in row_labels {
        let pos = t
            .index_position(label)
            .ok_or_else(|| TensorError::UnknownLabel(label.to_string()))?;
        if row_pos.contains(&pos) {
            return Err(TensorError::DuplicateLabel(label.to_string()));
        }
        row_pos.push(pos);
    }
    let col_pos: Vec<usize> = (0..t.indices.len())
        .filter(|p| !row_pos.contains(p))
        .collect();
    let perm: Vec<usize> = row_pos.iter().chain(&col_pos).copied().collect();
    let data = t.permuted_data(&perm);
    let row_indices: Vec<Index> = row_pos.iter().map(|&p| t.indices[p].clone()).collect();
    let col_indices: Vec<Index> = col_pos.iter().map(|&p| t.indices[p].clone()).collect();
    let nrows: usize = row_indices.iter().map(|i| i.dim).product();
    let ncols: usize = col_indices.iter().map(|i| i.dim).product();
    let matrix = DenseTensor::from_parts(
        vec![Index::new("rows", nrows), Index::new("cols", ncols)],
        data,
    );
    Ok(Matricized {
        matrix,
        row_indices,
        col_indices,
    })
}

/// Singular value decomposition of a matricized tensor.
///
/// `u` carries `[row_indices..., bond]`, `v` carries `[bond, col_indices...]`
/// and `u · diag(s) · v` reconstructs the input up to the reported truncation.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseTensor,
    pub s: Vec<f64>,
    pub v: DenseTensor,
    pub truncation_error_sq: f64,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn bond_label(&self) -> &str {
        self.u.indices().last().expect("u has a bond index").label()
    }
}

/// Picks a label not present in `existing`, derived from `base`.
pub(crate) fn unique_label(existing: &[Index], base: &str) -> String {
    let mut label = base.to_string();
    while existing.iter().any(|i| i.label == label) {
        label.push('_');
    }
    label
}

/// SVD over the `row_labels` bipartition with optional rank and cutoff
/// truncation. Singular values are returned in descending order; at least one
/// is always kept.
pub fn svd(
    t: &DenseTensor,
    row_labels: &[&str],
    max_rank: Option<usize>,
    cutoff: Option<f64>,
) -> Result<SvdResult> {
    svd_with_bond_label(t, row_labels, max_rank, cutoff, None)
}

pub fn svd_with_bond_label(
    t: &DenseTensor,
    row_labels: &[&str],
    max_rank: Option<usize>,
    cutoff: Option<f64>,
    bond_label: Option<&str>,
) -> Result<SvdResult> {
    if max_rank == Some(0) {
        return Err(TensorError::ZeroMaxRank);
    }
    if !t.data.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite);
    }
    let mat = matricize(t, row_labels)?;
    let (m, n) = (mat.nrows(), mat.ncols());
    let dm = nalgebra::DMatrix::from_row_slice(m, n, mat.matrix.data());
    let svd = dm.svd(true, true);
    let u_full = svd.u.expect("u requested");
    let vt_full = svd.v_t.expect("v_t requested");
    let sv = svd.singular_values;

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).expect("finite singular values"));

    let cutoff = cutoff.unwrap_or(0.0);
    let mut keep = Vec::new();
    let mut discarded_sq = 0.0;
    for &i in &order {
        let within_rank = max_rank.is_none_or(|r| keep.len() < r);
        if within_rank && (sv[i] >= cutoff || keep.is_empty()) {
            keep.push(i);
        } else {
            discarded_sq += sv[i] * sv[i];
        }
    }

    let rank = keep.len();
    let label = match bond_label {
        Some(l) => l.to_string(),
        None => unique_label(&t.indices, "svd_bond"),
    };
    let bond = Index::new(label, rank);

    let mut u_data = vec![0.0; m * rank];
    for (j, &col) in keep.iter().enumerate() {
        for i in 0..m {
            u_data[i * rank + j] = u_full[(i, col)];
        }
    }
    let mut v_data = vec![0.0; rank * n];
    for (i, &row) in keep.iter().enumerate() {
        for j in 0..n {
            v_data[i * n + j] = vt_full[(row, j)];
        }
    }
    let s: Vec<f64> = keep.iter().map(|&i| sv[i]).collect();

    let mut u_indices = mat.row_indices.clone();
    u_indices.push(bond.clone());
    let mut v_indices = vec![bond];
    v_indices.extend(mat.col_indices.clone());

    Ok(SvdResult {
        u: DenseTensor::from_parts(u_indices, u_data),
        s,
        v: DenseTensor::from_parts(v_indices, v_data),
        truncation_error_sq: discarded_sq,
    })
}

/// Thin QR over the `row_labels` bipartition, sign-fixed so the diagonal of
/// `r` is non-negative. `q` carries `[row_indices..., bond]` with orthonormal
/// columns; `r` carries `[bond, col_indices...]` and is upper triangular.
pub fn qr(t: &DenseTensor, row_labels: &[&str]) -> Result<(DenseTensor, DenseTensor)> {
    qr_with_bond_label(t, row_labels, None)
}

pub fn qr_with_bond_label(
    t: &DenseTensor,
    row_labels: &[&str],
    bond_label: Option<&str>,
) -> Result<(DenseTensor, DenseTensor)> {
    if !t.data.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite);
    }
    let mat = matricize(t, row_labels)?;
    let (m, n) = (mat.nrows(), mat.ncols());
    let dm = nalgebra::DMatrix::from_row_slice(m, n, mat.matrix.data());
    let qr = dm.qr();
    let mut q = qr.q();
    let mut r = qr.r();
    let rank = m.min(n);
    for k in 0..rank {
        if r[(k, k)] < 0.0 {
            for j in 0..n {
                r[(k, j)] = -r[(k, j)];
            }
            for i in 0..m {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }

    let label = match bond_label {
        Some(l) => l.to_string(),
        None => unique_label(&t.indices, "qr_bond"),
    };
    let bond = Index::new(label, rank);

    let mut q_data = vec![0.0; m * rank];
    for i in 0..m {
        for j in 0..rank {
            q_data[i * rank + j] = q[(i, j)];
        }
    }
    let mut r_data = vec![0.0; rank * n];
    for i in 0..rank {
        for j in 0..n {
            r_data[i * n + j] = r[(i, j)];
        }
    }

    let mut q_indices = mat.row_indices.clone();
    q_indices.push(bond.clone());
    let mut r_indices = vec![bond];
    r_indices.extend(mat.col_indices.clone());

    Ok((
        DenseTensor::from_parts(q_indices, q_data),
        DenseTensor::from_parts(r_indices, r_data),
    ))
}

pub fn frobenius_norm(t: &DenseTensor) -> f64 {
    t.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}
