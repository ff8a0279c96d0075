//! One-dimensional tensor trains: MPS, MPO and spaced MPO (SMPO).
//!
//! A [`TensorTrain`] is an open-boundary chain of [`DenseTensor`] sites joined
//! by shared bond indices. Site `k` may carry an upper (input) index `in{k}`,
//! a lower (output) index `out{k}`, and bonds `bond{k-1}`/`bond{k}` to its
//! neighbors. The kind is derived from which sites carry lower indices:
//! none (MPS), all (MPO), or a proper nonempty subset (SMPO).

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, contract, frobenius_norm, DenseTensor, Index, TensorError};

#[derive(Debug, Error)]
pub enum TtError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid chain: {0}")]
    InvalidChain(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("spacing position {position} out of range for {n_sites} sites")]
    SpacingOutOfRange { position: usize, n_sites: usize },

    #[error("dense reconstruction needs {required} entries, cap is {cap}")]
    SizeCap { required: usize, cap: usize },

    #[error("tensor train has zero norm")]
    ZeroNorm,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("bad model manifest: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, TtError>;

pub fn upper_label(site: usize) -> String {
    format!("in{site}")
}

pub fn lower_label(site: usize) -> String {
    format!("out{site}")
}

pub fn bond_label(bond: usize) -> String {
    format!("bond{bond}")
}

/// Per-site shape description: physical dimensions plus bond dimensions to
/// each neighbor (0 meaning no neighbor on that side).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteSignature {
    pub upper_dim: Option<usize>,
    pub lower_dim: Option<usize>,
    pub left_bond: usize,
    pub right_bond: usize,
}

impl SiteSignature {
    /// Indices of a conforming site tensor, in canonical order:
    /// left bond, upper, lower, right bond.
    pub fn indices(&self, site: usize) -> Vec<Index> {
        let mut indices = Vec::new();
        if self.left_bond > 0 {
            indices.push(Index::new(bond_label(site - 1), self.left_bond));
        }
        if let Some(d) = self.upper_dim {
            indices.push(Index::new(upper_label(site), d));
        }
        if let Some(d) = self.lower_dim {
            indices.push(Index::new(lower_label(site), d));
        }
        if self.right_bond > 0 {
            indices.push(Index::new(bond_label(site), self.right_bond));
        }
        indices
    }

    pub fn len(&self) -> usize {
        self.upper_dim.unwrap_or(1)
            * self.lower_dim.unwrap_or(1)
            * self.left_bond.max(1)
            * self.right_bond.max(1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Placement of lower (output) indices along an SMPO chain: a uniform stride
/// starting at site 0, or an explicit strictly increasing position list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpacingSpec {
    Uniform(usize),
    Explicit(Vec<usize>),
}

impl SpacingSpec {
    /// Resolves to concrete site positions within a chain of `n_sites`.
    pub fn positions(&self, n_sites: usize) -> Result<Vec<usize>> {
        match self {
            SpacingSpec::Uniform(s) => {
                if *s == 0 {
                    return Err(TtError::InvalidChain("spacing must be at least 1".into()));
                }
                Ok((0..n_sites).step_by(*s).collect())
            }
            SpacingSpec::Explicit(list) => {
                if list.is_empty() {
                    return Err(TtError::InvalidChain(
                        "explicit spacing lists no positions".into(),
                    ));
                }
                for window in list.windows(2) {
                    if window[1] <= window[0] {
                        return Err(TtError::InvalidChain(
                            "explicit spacing positions must be strictly increasing".into(),
                        ));
                    }
                }
                if let Some(&last) = list.last() {
                    if last >= n_sites {
                        return Err(TtError::SpacingOutOfRange {
                            position: last,
                            n_sites,
                        });
                    }
                }
                Ok(list.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TtKind {
    Mps,
    Mpo,
    Smpo,
}

impl fmt::Display for TtKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TtKind::Mps => write!(f, "mps"),
            TtKind::Mpo => write!(f, "mpo"),
            TtKind::Smpo => write!(f, "smpo"),
        }
    }
}

/// Lower-index placement with the dimension those indices carry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LowerSpec {
    pub spacing: SpacingSpec,
    pub dim: usize,
}

/// Site signatures for a chain whose bonds grow geometrically from the ends:
/// each bond is `min(max_bond, exact-representability bound)`, where the bound
/// is the product of local physical dimensions from the nearer chain end.
pub fn build_shape(
    n_sites: usize,
    upper_dims: &[usize],
    lower_spec: Option<&LowerSpec>,
    max_bond: usize,
) -> Result<Vec<SiteSignature>> {
    if n_sites < 2 {
        return Err(TtError::InvalidChain("need at least 2 sites".into()));
    }
    if max_bond == 0 {
        return Err(TtError::InvalidChain("max_bond must be at least 1".into()));
    }
    if upper_dims.len() != n_sites {
        return Err(TtError::ShapeMismatch(format!(
            "{} upper dims for {} sites",
            upper_dims.len(),
            n_sites
        )));
    }
    if upper_dims.iter().any(|&d| d == 0) {
        return Err(TtError::InvalidChain("upper dims must be positive".into()));
    }

    let mut lower_dims = vec![None; n_sites];
    if let Some(spec) = lower_spec {
        if spec.dim == 0 {
            return Err(TtError::InvalidChain("lower dim must be positive".into()));
        }
        for pos in spec.spacing.positions(n_sites)? {
            lower_dims[pos] = Some(spec.dim);
        }
    }

    let local: Vec<usize> = (0..n_sites)
        .map(|k| upper_dims[k] * lower_dims[k].unwrap_or(1))
        .collect();

    // bond k sits between sites k and k+1
    let mut bonds = vec![0usize; n_sites - 1];
    let mut from_left = 1usize;
    for k in 0..n_sites - 1 {
        from_left = from_left.saturating_mul(local[k]);
        bonds[k] = from_left.min(max_bond);
    }
    let mut from_right = 1usize;
    for k in (0..n_sites - 1).rev() {
        from_right = from_right.saturating_mul(local[k + 1]);
        bonds[k] = bonds[k].min(from_right);
    }

    Ok((0..n_sites)
        .map(|k| SiteSignature {
            upper_dim: Some(upper_dims[k]),
            lower_dim: lower_dims[k],
            left_bond: if k == 0 { 0 } else { bonds[k - 1] },
            right_bond: if k == n_sites - 1 { 0 } else { bonds[k] },
        })
        .collect())
}

/// An open-boundary chain of site tensors with conventional index labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorTrain {
    sites: Vec<DenseTensor>,
    kind: TtKind,
    canonical_center: Option<usize>,
}

impl TensorTrain {
    /// Validates the chain and normalizes every site to canonical index order
    /// (left bond, upper, lower, right bond). The kind is derived from which
    /// sites carry lower indices.
    pub fn new(sites: Vec<DenseTensor>) -> Result<Self> {
        if sites.is_empty() {
            return Err(TtError::InvalidChain("chain has no sites".into()));
        }
        let n = sites.len();
        let mut normalized = Vec::with_capacity(n);
        let mut lower_count = 0usize;
        for (k, site) in sites.into_iter().enumerate() {
            let mut order: Vec<String> = Vec::new();
            if k > 0 {
                order.push(bond_label(k - 1));
            }
            let has_upper = site.has_label(&upper_label(k));
            let has_lower = site.has_label(&lower_label(k));
            if has_upper {
                order.push(upper_label(k));
            }
            if has_lower {
                order.push(lower_label(k));
                lower_count += 1;
            }
            if k + 1 < n {
                order.push(bond_label(k));
            }
            if !has_upper && !has_lower {
                return Err(TtError::InvalidChain(format!(
                    "site {k} carries no physical index"
                )));
            }
            if order.len() != site.order() {
                let labels: Vec<&str> = site.indices().iter().map(|i| i.label()).collect();
                return Err(TtError::InvalidChain(format!(
                    "site {k} has unexpected indices {labels:?}"
                )));
            }
            let order_refs: Vec<&str> = order.iter().map(String::as_str).collect();
            let permuted = site
                .permuted(&order_refs)
                .map_err(|_| {
                    let labels: Vec<String> = site
                        .indices()
                        .iter()
                        .map(|i| i.label().to_string())
                        .collect();
                    TtError::InvalidChain(format!("site {k} has unexpected indices {labels:?}"))
                })?;
            normalized.push(permuted);
        }
        // adjacent sites share exactly one bond label with matching dims
        for k in 0..n - 1 {
            let label = bond_label(k);
            let left = normalized[k].dim_of(&label);
            let right = normalized[k + 1].dim_of(&label);
            match (left, right) {
                (Some(a), Some(b)) if a == b => {}
                (Some(a), Some(b)) => {
                    return Err(TtError::ShapeMismatch(format!(
                        "bond {k} dims differ: {a} vs {b}"
                    )))
                }
                _ => {
                    return Err(TtError::InvalidChain(format!(
                        "sites {k} and {} share no bond",
                        k + 1
                    )))
                }
            }
        }

        let upper_count = (0..n)
            .filter(|&k| normalized[k].has_label(&upper_label(k)))
            .count();
        if upper_count != n {
            return Err(TtError::InvalidChain(
                "every site must carry an upper index".into(),
            ));
        }
        let kind = if lower_count == 0 {
            TtKind::Mps
        } else if lower_count == n {
            TtKind::Mpo
        } else {
            TtKind::Smpo
        };

        Ok(TensorTrain {
            sites: normalized,
            kind,
            canonical_center: None,
        })
    }

    /// A bond-dimension-1 MPS holding a product state, one local vector per
    /// site.
    pub fn from_product_state(locals: &[Vec<f64>]) -> Result<Self> {
        if locals.is_empty() {
            return Err(TtError::InvalidChain("product state has no factors".into()));
        }
        let n = locals.len();
        let mut sites = Vec::with_capacity(n);
        for (k, local) in locals.iter().enumerate() {
            let mut indices = Vec::new();
            if k > 0 {
                indices.push(Index::new(bond_label(k - 1), 1));
            }
            indices.push(Index::new(upper_label(k), local.len()));
            if k + 1 < n {
                indices.push(Index::new(bond_label(k), 1));
            }
            sites.push(DenseTensor::from_data(indices, local.clone())?);
        }
        TensorTrain::new(sites)
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn kind(&self) -> TtKind {
        self.kind
    }

    pub fn canonical_center(&self) -> Option<usize> {
        self.canonical_center
    }

    pub fn site(&self, k: usize) -> &DenseTensor {
        &self.sites[k]
    }

    pub fn sites(&self) -> &[DenseTensor] {
        &self.sites
    }

    /// Replaces site `k`, revalidating the chain.
    pub fn with_site(&self, k: usize, site: DenseTensor) -> Result<Self> {
        let mut sites = self.sites.clone();
        sites[k] = site;
        let mut tt = TensorTrain::new(sites)?;
        tt.canonical_center = None;
        Ok(tt)
    }

    /// Replaces all site data in place, keeping shapes. Used by optimizers.
    pub(crate) fn sites_mut(&mut self) -> &mut [DenseTensor] {
        self.canonical_center = None;
        &mut self.sites
    }

    pub(crate) fn set_canonical_center(&mut self, center: Option<usize>) {
        self.canonical_center = center;
    }

    pub(crate) fn replace_sites(&mut self, sites: Vec<DenseTensor>) {
        self.sites = sites;
    }

    pub fn upper_dim(&self, k: usize) -> Option<usize> {
        self.sites[k].dim_of(&upper_label(k))
    }

    pub fn lower_dim(&self, k: usize) -> Option<usize> {
        self.sites[k].dim_of(&lower_label(k))
    }

    /// Sites carrying a lower (output) index, ascending.
    pub fn lower_positions(&self) -> Vec<usize> {
        (0..self.n_sites())
            .filter(|&k| self.lower_dim(k).is_some())
            .collect()
    }

    /// Dimension of bond `k` (between sites `k` and `k+1`).
    pub fn bond_dim(&self, k: usize) -> Option<usize> {
        self.sites[k].dim_of(&bond_label(k))
    }

    pub fn max_bond_dim(&self) -> usize {
        (0..self.n_sites().saturating_sub(1))
            .filter_map(|k| self.bond_dim(k))
            .max()
            .unwrap_or(1)
    }

    pub fn signatures(&self) -> Vec<SiteSignature> {
        (0..self.n_sites())
            .map(|k| SiteSignature {
                upper_dim: self.upper_dim(k),
                lower_dim: self.lower_dim(k),
                left_bond: if k == 0 {
                    0
                } else {
                    self.bond_dim(k - 1).unwrap_or(0)
                },
                right_bond: self.bond_dim(k).unwrap_or(0),
            })
            .collect()
    }

    /// Total parameter count.
    pub fn n_params(&self) -> usize {
        self.sites.iter().map(|s| s.len()).sum()
    }

    /// Sites with every bond label suffixed, for building two-layer
    /// (bra/ket) contraction networks without label collisions.
    pub(crate) fn bond_relabeled_sites(&self, suffix: &str) -> Vec<DenseTensor> {
        relabel_bonds(&self.sites, suffix)
    }
}

pub(crate) fn relabel_bonds(sites: &[DenseTensor], suffix: &str) -> Vec<DenseTensor> {
    let n = sites.len();
    sites
        .iter()
        .enumerate()
        .map(|(k, site)| {
            let mut out = site.clone();
            if k > 0 {
                let label = bond_label(k - 1);
                out = out
                    .relabeled(&label, &format!("{label}{suffix}"))
                    .expect("bond label exists");
            }
            if k + 1 < n {
                let label = bond_label(k);
                out = out
                    .relabeled(&label, &format!("{label}{suffix}"))
                    .expect("bond label exists");
            }
            out
        })
        .collect()
}

pub const DEFAULT_DENSE_CAP: usize = 1 << 20;

/// Contracts the full chain into one dense tensor carrying every open
/// physical index. Intended as a small-instance oracle; refuses to build
/// results larger than `cap` entries.
pub fn to_dense(tt: &TensorTrain, cap: Option<usize>) -> Result<DenseTensor> {
    let cap = cap.unwrap_or(DEFAULT_DENSE_CAP);
    let mut required = 1usize;
    for k in 0..tt.n_sites() {
        required = required.saturating_mul(tt.upper_dim(k).unwrap_or(1));
        required = required.saturating_mul(tt.lower_dim(k).unwrap_or(1));
    }
    if required > cap {
        return Err(TtError::SizeCap { required, cap });
    }
    let mut acc = tt.site(0).clone();
    for k in 1..tt.n_sites() {
        acc = contract(&acc, tt.site(k))?;
    }
    Ok(acc)
}

/// Frobenius overlap of two chains contracted over all shared physical
/// indices, computed by the site-by-site zipper path. For a pair of MPS this
/// is the inner product; for operators it is the Frobenius inner product.
fn overlap(a: &TensorTrain, b: &TensorTrain) -> Result<f64> {
    if a.n_sites() != b.n_sites() {
        return Err(TtError::ShapeMismatch(format!(
            "site counts differ: {} vs {}",
            a.n_sites(),
            b.n_sites()
        )));
    }
    let b_sites = b.bond_relabeled_sites("_rhs");
    let mut env = contract(a.site(0), &b_sites[0])?;
    for k in 1..a.n_sites() {
        env = contract(&env, a.site(k))?;
        env = contract(&env, &b_sites[k])?;
    }
    env.scalar_value().ok_or_else(|| {
        TtError::ShapeMismatch("overlap network left open indices".into())
    })
}

/// Inner product of two MPS with matching site dimensions.
pub fn inner_product(a: &TensorTrain, b: &TensorTrain) -> Result<f64> {
    if a.kind() != TtKind::Mps || b.kind() != TtKind::Mps {
        return Err(TtError::ShapeMismatch(
            "inner_product expects two MPS".into(),
        ));
    }
    for k in 0..a.n_sites().min(b.n_sites()) {
        if a.upper_dim(k) != b.upper_dim(k) {
            return Err(TtError::ShapeMismatch(format!(
                "upper dims differ at site {k}"
            )));
        }
    }
    overlap(a, b)
}

/// Frobenius norm of the represented tensor or operator.
pub fn norm(tt: &TensorTrain) -> Result<f64> {
    Ok(overlap(tt, tt)?.max(0.0).sqrt())
}

/// Applies an MPO or SMPO to an MPS, producing an MPS with one site per
/// operator lower index.
///
/// Sites without a lower index merge leftward into the nearest lower-index
/// site; the leading block (before the first lower index) merges right.
/// Bond pairs (operator bond x state bond) crossing each group boundary are
/// fused into a single bond.
pub fn apply_smpo(op: &TensorTrain, state: &TensorTrain) -> Result<TensorTrain> {
    if op.kind() == TtKind::Mps {
        return Err(TtError::ShapeMismatch(
            "operator must be an MPO or SMPO".into(),
        ));
    }
    if state.kind() != TtKind::Mps {
        return Err(TtError::ShapeMismatch("state must be an MPS".into()));
    }
    let n = op.n_sites();
    if state.n_sites() != n {
        return Err(TtError::ShapeMismatch(format!(
            "operator has {n} sites, state has {}",
            state.n_sites()
        )));
    }
    for k in 0..n {
        if op.upper_dim(k) != state.upper_dim(k) {
            return Err(TtError::ShapeMismatch(format!(
                "upper dims differ at site {k}"
            )));
        }
    }
    let lowers = op.lower_positions();
    debug_assert!(!lowers.is_empty());
    let state_sites = state.bond_relabeled_sites("_st");

    let mut out_sites = Vec::with_capacity(lowers.len());
    for (g, &lead) in lowers.iter().enumerate() {
        let start = if g == 0 { 0 } else { lead };
        let end = if g + 1 < lowers.len() {
            lowers[g + 1]
        } else {
            n
        };
        let mut acc: Option<DenseTensor> = None;
        for s in start..end {
            let with_op = match acc {
                Some(t) => contract(&t, op.site(s))?,
                None => op.site(s).clone(),
            };
            acc = Some(contract(&with_op, &state_sites[s])?);
        }
        let acc = acc.expect("group is nonempty");

        // fuse (op bond, state bond) pairs at the group boundaries
        let mut left_labels = Vec::new();
        if start > 0 {
            left_labels.push(bond_label(start - 1));
            left_labels.push(format!("{}_st", bond_label(start - 1)));
        }
        let mut right_labels = Vec::new();
        if end < n {
            right_labels.push(bond_label(end - 1));
            right_labels.push(format!("{}_st", bond_label(end - 1)));
        }
        let out_dim = acc
            .dim_of(&lower_label(lead))
            .expect("group carries its lower index");

        let mut order: Vec<&str> = left_labels.iter().map(String::as_str).collect();
        let lower = lower_label(lead);
        order.push(&lower);
        order.extend(right_labels.iter().map(String::as_str));
        let permuted = acc.permuted(&order)?;

        let left_dim: usize = left_labels
            .iter()
            .map(|l| permuted.dim_of(l).unwrap())
            .product();
        let right_dim: usize = right_labels
            .iter()
            .map(|l| permuted.dim_of(l).unwrap())
            .product();

        let mut indices = Vec::new();
        if g > 0 {
            indices.push(Index::new(bond_label(g - 1), left_dim));
        }
        indices.push(Index::new(upper_label(g), out_dim));
        if g + 1 < lowers.len() {
            indices.push(Index::new(bond_label(g), right_dim));
        }
        out_sites.push(DenseTensor::from_data(indices, permuted.into_data())?);
    }
    TensorTrain::new(out_sites)
}

/// Gauges the chain so sites left of `center` are left-orthogonal and sites
/// right of it are right-orthogonal, via QR sweeps from both ends. The
/// represented tensor is unchanged.
pub fn canonicalize(tt: &TensorTrain, center: usize) -> Result<TensorTrain> {
    let n = tt.n_sites();
    if center >= n {
        return Err(TtError::ShapeMismatch(format!(
            "center {center} out of range for {n} sites"
        )));
    }
    let mut sites = tt.sites.clone();
    for k in 0..center {
        let bond = bond_label(k);
        let rows_owned: Vec<String> = sites[k]
            .indices()
            .iter()
            .map(|i| i.label().to_string())
            .filter(|l| *l != bond)
            .collect();
        let rows: Vec<&str> = rows_owned.iter().map(String::as_str).collect();
        let (q, r) = tensor::qr_with_bond_label(&sites[k], &rows, Some("qr_shift"))?;
        sites[k] = q.relabeled("qr_shift", &bond)?;
        let next = contract(&r, &sites[k + 1])?;
        sites[k + 1] = next.relabeled("qr_shift", &bond)?;
    }
    for k in ((center + 1)..n).rev() {
        let bond = bond_label(k - 1);
        let rows_owned: Vec<String> = sites[k]
            .indices()
            .iter()
            .map(|i| i.label().to_string())
            .filter(|l| *l != bond)
            .collect();
        let rows: Vec<&str> = rows_owned.iter().map(String::as_str).collect();
        let (q, r) = tensor::qr_with_bond_label(&sites[k], &rows, Some("qr_shift"))?;
        sites[k] = q.relabeled("qr_shift", &bond)?;
        let prev = contract(&sites[k - 1], &r)?;
        sites[k - 1] = prev.relabeled("qr_shift", &bond)?;
    }
    let mut out = TensorTrain::new(sites)?;
    out.canonical_center = Some(center);
    Ok(out)
}

/// Rescales the chain to unit norm by canonicalizing and dividing the center
/// site by its Frobenius norm.
pub fn normalize(tt: &TensorTrain) -> Result<TensorTrain> {
    let center = tt.canonical_center().unwrap_or(0);
    let mut out = canonicalize(tt, center)?;
    let scale = frobenius_norm(out.site(center));
    if scale <= 0.0 {
        return Err(TtError::ZeroNorm);
    }
    out.sites[center] = out.sites[center].clone().scale(1.0 / scale);
    out.canonical_center = Some(center);
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestIndex {
    label: String,
    dim: usize,
    role: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSite {
    indices: Vec<ManifestIndex>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: TtKind,
    n_sites: usize,
    canonical_center: Option<usize>,
    sites: Vec<ManifestSite>,
}

fn index_role(site: usize, n_sites: usize, label: &str) -> Result<&'static str> {
    if label == upper_label(site) {
        Ok("upper")
    } else if label == lower_label(site) {
        Ok("lower")
    } else if site > 0 && label == bond_label(site - 1) {
        Ok("left_bond")
    } else if site + 1 < n_sites && label == bond_label(site) {
        Ok("right_bond")
    } else {
        Err(TtError::Manifest(format!(
            "label {label} has no role at site {site}"
        )))
    }
}

/// Writes `manifest.json` and `weights.bin` (concatenated row-major
/// little-endian f64 site data) into `dir`. Round-trips bit-exactly.
pub fn save(tt: &TensorTrain, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = tt.n_sites();
    let sites = tt
        .sites
        .iter()
        .enumerate()
        .map(|(k, site)| {
            let indices = site
                .indices()
                .iter()
                .map(|idx| {
                    Ok(ManifestIndex {
                        label: idx.label().to_string(),
                        dim: idx.dim(),
                        role: index_role(k, n, idx.label())?.to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ManifestSite { indices })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format_version: 1,
        kind: tt.kind(),
        n_sites: n,
        canonical_center: tt.canonical_center(),
        sites,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;

    let mut weights = fs::File::create(dir.join("weights.bin"))?;
    for site in &tt.sites {
        for value in site.data() {
            weights.write_all(&value.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Loads a model saved by [`save`].
pub fn load(dir: &Path) -> Result<TensorTrain> {
    let json = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&json)?;
    if manifest.format_version != 1 {
        return Err(TtError::Manifest(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    if manifest.sites.len() != manifest.n_sites {
        return Err(TtError::Manifest(format!(
            "manifest lists {} sites but n_sites is {}",
            manifest.sites.len(),
            manifest.n_sites
        )));
    }
    let mut reader = fs::File::open(dir.join("weights.bin"))?;
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf)?;

    let mut offset = 0usize;
    let mut sites = Vec::with_capacity(manifest.n_sites);
    for site in &manifest.sites {
        let indices: Vec<Index> = site
            .indices
            .iter()
            .map(|i| Index::new(i.label.clone(), i.dim))
            .collect();
        let len: usize = indices.iter().map(|i| i.dim()).product();
        let bytes = len * 8;
        if offset + bytes > buf.len() {
            return Err(TtError::Manifest("weights.bin is truncated".into()));
        }
        let data: Vec<f64> = buf[offset..offset + bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += bytes;
        sites.push(DenseTensor::from_data(indices, data)?);
    }
    if offset != buf.len() {
        return Err(TtError::Manifest(format!(
            "weights.bin has {} trailing bytes",
            buf.len() - offset
        )));
    }
    let mut tt = TensorTrain::new(sites)?;
    if tt.kind() != manifest.kind {
        return Err(TtError::Manifest(format!(
            "manifest kind {} does not match derived kind {}",
            manifest.kind,
            tt.kind()
        )));
    }
    if let Some(c) = manifest.canonical_center {
        if c >= tt.n_sites() {
            return Err(TtError::Manifest(format!(
                "canonical_center {c} out of range"
            )));
        }
    }
    tt.canonical_center = manifest.canonical_center;
    Ok(tt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_site(rng: &mut ChaCha8Rng, indices: Vec<Index>) -> DenseTensor {
        let len = indices.iter().map(|i| i.dim()).product();
        let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        DenseTensor::from_data(indices, data).unwrap()
    }

    fn random_tt(rng: &mut ChaCha8Rng, signatures: &[SiteSignature]) -> TensorTrain {
        let sites = signatures
            .iter()
            .enumerate()
            .map(|(k, sig)| random_site(rng, sig.indices(k)))
            .collect();
        TensorTrain::new(sites).unwrap()
    }

    /// Dense reconstruction by explicit summation over all bond assignments,
    /// fully independent of `contract`.
    fn naive_dense(tt: &TensorTrain) -> DenseTensor {
        let n = tt.n_sites();
        let mut open_indices = Vec::new();
        for k in 0..n {
            if let Some(d) = tt.upper_dim(k) {
                open_indices.push(Index::new(upper_label(k), d));
            }
            if let Some(d) = tt.lower_dim(k) {
                open_indices.push(Index::new(lower_label(k), d));
            }
        }
        let bond_dims: Vec<usize> = (0..n - 1).map(|k| tt.bond_dim(k).unwrap()).collect();
        let mut out = DenseTensor::zeros(open_indices.clone());
        let total_open: usize = open_indices.iter().map(|i| i.dim()).product();
        let total_bonds: usize = bond_dims.iter().product();
        for flat_open in 0..total_open {
            let mut open_coords = vec![0usize; open_indices.len()];
            let mut rem = flat_open;
            for (axis, idx) in open_indices.iter().enumerate().rev() {
                open_coords[axis] = rem % idx.dim();
                rem /= idx.dim();
            }
            let mut total = 0.0;
            for flat_bond in 0..total_bonds {
                let mut bond_coords = vec![0usize; bond_dims.len()];
                let mut rem = flat_bond;
                for (axis, &d) in bond_dims.iter().enumerate().rev() {
                    bond_coords[axis] = rem % d;
                    rem /= d;
                }
                let mut product = 1.0;
                for k in 0..n {
                    let site = tt.site(k);
                    let coords: Vec<usize> = site
                        .indices()
                        .iter()
                        .map(|idx| {
                            let label = idx.label();
                            if let Some(slot) =
                                open_indices.iter().position(|o| o.label() == label)
                            {
                                open_coords[slot]
                            } else {
                                let bond: usize = label
                                    .strip_prefix("bond")
                                    .unwrap()
                                    .parse()
                                    .unwrap();
                                bond_coords[bond]
                            }
                        })
                        .collect();
                    product *= site.get(&coords);
                }
                total += product;
            }
            out.set(&open_coords, total);
        }
        out
    }

    fn dense_close(a: &DenseTensor, b: &DenseTensor, tol: f64) -> bool {
        let labels: Vec<&str> = a.indices().iter().map(|i| i.label()).collect();
        let b = b.permuted(&labels).unwrap();
        let scale = frobenius_norm(a).max(1.0);
        a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() <= tol * scale)
    }

    #[test]
    fn build_shape_exact_representability() {
        let sigs = build_shape(4, &[2, 2, 2, 2], None, 100).unwrap();
        let bonds: Vec<usize> = sigs[..3].iter().map(|s| s.right_bond).collect();
        assert_eq!(bonds, vec![2, 4, 2]);
    }

    #[test]
    fn build_shape_clamps_to_max_bond() {
        let sigs = build_shape(4, &[2, 2, 2, 2], None, 3).unwrap();
        let bonds: Vec<usize> = sigs[..3].iter().map(|s| s.right_bond).collect();
        assert_eq!(bonds, vec![2, 3, 2]);
    }

    #[test]
    fn build_shape_uniform_spacing_places_lowers() {
        let spec = LowerSpec {
            spacing: SpacingSpec::Uniform(2),
            dim: 2,
        };
        let sigs = build_shape(6, &[2; 6], Some(&spec), 8).unwrap();
        let lowers: Vec<usize> = sigs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.lower_dim.is_some())
            .map(|(k, _)| k)
            .collect();
        assert_eq!(lowers, vec![0, 2, 4]);
        assert!(sigs[0].left_bond == 0 && sigs[5].right_bond == 0);
        // the signatures build a valid chain
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tt = random_tt(&mut rng, &sigs);
        assert_eq!(tt.kind(), TtKind::Smpo);
    }

    #[test]
    fn build_shape_rejects_bad_spacing() {
        let spec = LowerSpec {
            spacing: SpacingSpec::Explicit(vec![0, 9]),
            dim: 2,
        };
        assert!(matches!(
            build_shape(6, &[2; 6], Some(&spec), 8),
            Err(TtError::SpacingOutOfRange { position: 9, .. })
        ));
    }

    #[test]
    fn to_dense_basis_product_state() {
        let tt =
            TensorTrain::from_product_state(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let dense = to_dense(&tt, None).unwrap();
        assert_eq!(dense.get(&[0, 0]), 1.0);
        assert_eq!(dense.data().iter().map(|v| v * v).sum::<f64>(), 1.0);
    }

    #[test]
    fn to_dense_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sigs = build_shape(4, &[2, 3, 2, 2], None, 4).unwrap();
        let tt = random_tt(&mut rng, &sigs);
        let dense = to_dense(&tt, None).unwrap();
        let oracle = naive_dense(&tt);
        assert!(dense_close(&dense, &oracle, 1e-10));
    }

    #[test]
    fn to_dense_respects_cap() {
        let sigs = build_shape(8, &[4; 8], None, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tt = random_tt(&mut rng, &sigs);
        assert!(matches!(
            to_dense(&tt, Some(1 << 4)),
            Err(TtError::SizeCap { .. })
        ));
    }

    #[test]
    fn inner_product_of_unit_product_states() {
        let a = TensorTrain::from_product_state(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((inner_product(&a, &a).unwrap() - 1.0).abs() < 1e-15);

        let b = TensorTrain::from_product_state(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(inner_product(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn inner_product_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sigs = build_shape(4, &[2, 2, 3, 2], None, 3).unwrap();
        let a = random_tt(&mut rng, &sigs);
        let b = random_tt(&mut rng, &sigs);
        let dense_dot: f64 = to_dense(&a, None)
            .unwrap()
            .data()
            .iter()
            .zip(to_dense(&b, None).unwrap().data())
            .map(|(x, y)| x * y)
            .sum();
        assert!((inner_product(&a, &b).unwrap() - dense_dot).abs() < 1e-10);
    }

    #[test]
    fn norm_properties() {
        let unit = TensorTrain::from_product_state(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!((norm(&unit).unwrap() - 1.0).abs() < 1e-15);

        let mut scaled = unit.clone();
        scaled.sites_mut()[0] = scaled.sites[0].clone().scale(3.0);
        assert!((norm(&scaled).unwrap() - 3.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = LowerSpec {
            spacing: SpacingSpec::Uniform(2),
            dim: 2,
        };
        let sigs = build_shape(4, &[2; 4], Some(&spec), 3).unwrap();
        let op = random_tt(&mut rng, &sigs);
        let dense = to_dense(&op, None).unwrap();
        assert!((norm(&op).unwrap() - frobenius_norm(&dense)).abs() < 1e-10);
    }

    #[test]
    fn apply_identity_mpo_preserves_state() {
        let n = 3;
        let mut sites = Vec::new();
        for k in 0..n {
            let mut indices = Vec::new();
            if k > 0 {
                indices.push(Index::new(bond_label(k - 1), 1));
            }
            indices.push(Index::new(upper_label(k), 2));
            indices.push(Index::new(lower_label(k), 2));
            if k + 1 < n {
                indices.push(Index::new(bond_label(k), 1));
            }
            let eye = DenseTensor::identity("r", "c", 2);
            sites.push(DenseTensor::from_data(indices, eye.data().to_vec()).unwrap());
        }
        let op = TensorTrain::new(sites).unwrap();
        assert_eq!(op.kind(), TtKind::Mpo);

        let state = TensorTrain::from_product_state(&[
            vec![0.6, 0.8],
            vec![1.0, 0.0],
            vec![0.8, -0.6],
        ])
        .unwrap();
        let out = apply_smpo(&op, &state).unwrap();
        let out_dense = to_dense(&out, None).unwrap();
        let in_dense = to_dense(&state, None).unwrap();
        assert!(dense_close(&in_dense, &out_dense, 1e-12));
    }

    #[test]
    fn apply_smpo_output_site_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = LowerSpec {
            spacing: SpacingSpec::Uniform(2),
            dim: 2,
        };
        let sigs = build_shape(4, &[2; 4], Some(&spec), 4).unwrap();
        let op = random_tt(&mut rng, &sigs);
        let state = TensorTrain::from_product_state(&vec![vec![1.0, 0.0]; 4]).unwrap();
        let out = apply_smpo(&op, &state).unwrap();
        assert_eq!(out.n_sites(), 2);
        assert_eq!(out.kind(), TtKind::Mps);
    }

    #[test]
    fn apply_smpo_matches_dense_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spec = LowerSpec {
            spacing: SpacingSpec::Explicit(vec![1, 3]),
            dim: 3,
        };
        let sigs = build_shape(4, &[2; 4], Some(&spec), 4).unwrap();
        let op = random_tt(&mut rng, &sigs);
        let locals: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let v: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                v
            })
            .collect();
        let state = TensorTrain::from_product_state(&locals).unwrap();

        let out = apply_smpo(&op, &state).unwrap();
        let out_dense = to_dense(&out, None).unwrap();

        let op_dense = to_dense(&op, None).unwrap();
        let state_dense = to_dense(&state, None).unwrap();
        let oracle = contract(&op_dense, &state_dense).unwrap();
        // oracle carries out1, out3; the result MPS relabels them in0, in1
        let oracle = oracle
            .relabeled("out1", "in0")
            .unwrap()
            .relabeled("out3", "in1")
            .unwrap();
        assert!(dense_close(&out_dense, &oracle, 1e-10));
    }

    #[test]
    fn apply_smpo_is_linear_in_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let spec = LowerSpec {
            spacing: SpacingSpec::Uniform(2),
            dim: 2,
        };
        let sigs = build_shape(4, &[2; 4], Some(&spec), 3).unwrap();
        let op = random_tt(&mut rng, &sigs);
        let locals: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let state = TensorTrain::from_product_state(&locals).unwrap();
        let mut scaled = state.clone();
        scaled.sites_mut()[2] = scaled.sites[2].clone().scale(2.5);

        let base = to_dense(&apply_smpo(&op, &state).unwrap(), None).unwrap();
        let scaled_out = to_dense(&apply_smpo(&op, &scaled).unwrap(), None).unwrap();
        let expected = base.scale(2.5);
        assert!(dense_close(&expected, &scaled_out, 1e-10));
    }

    #[test]
    fn canonicalize_preserves_representation() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let sigs = build_shape(5, &[2; 5], None, 4).unwrap();
        let tt = random_tt(&mut rng, &sigs);
        let dense = to_dense(&tt, None).unwrap();

        let left = canonicalize(&tt, 0).unwrap();
        let right = canonicalize(&tt, 4).unwrap();
        assert!(dense_close(&dense, &to_dense(&left, None).unwrap(), 1e-10));
        assert!(dense_close(&dense, &to_dense(&right, None).unwrap(), 1e-10));
        assert_eq!(left.canonical_center(), Some(0));

        // idempotent at fixed center
        let mid = canonicalize(&tt, 2).unwrap();
        let again = canonicalize(&mid, 2).unwrap();
        for (a, b) in mid.sites().iter().zip(again.sites()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn canonicalize_makes_sites_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let sigs = build_shape(5, &[2; 5], None, 4).unwrap();
        let tt = canonicalize(&random_tt(&mut rng, &sigs), 3).unwrap();
        // left of center: contraction with itself over (left bond, upper)
        // yields identity on the right bond
        for k in 0..3 {
            let site = tt.site(k);
            let bond = bond_label(k);
            let other = site.relabeled(&bond, "probe").unwrap();
            let gram = contract(site, &other).unwrap();
            let d = gram.dim_of(&bond).unwrap();
            for a in 0..d {
                for b in 0..d {
                    let expected = if a == b { 1.0 } else { 0.0 };
                    assert!((gram.get(&[a, b]) - expected).abs() < 1e-10);
                }
            }
        }
        // norm is local to the center tensor
        let center_norm = frobenius_norm(tt.site(3));
        assert!((norm(&tt).unwrap() - center_norm).abs() < 1e-10);
    }

    #[test]
    fn normalize_unit_and_direction() {
        let unit = TensorTrain::from_product_state(&[vec![0.6, 0.8], vec![1.0, 0.0]]).unwrap();
        let normed = normalize(&unit).unwrap();
        assert!((norm(&normed).unwrap() - 1.0).abs() < 1e-12);
        assert!(dense_close(
            &to_dense(&unit, None).unwrap(),
            &to_dense(&normed, None).unwrap(),
            1e-12
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let spec = LowerSpec {
            spacing: SpacingSpec::Uniform(3),
            dim: 2,
        };
        let sigs = build_shape(5, &[2; 5], Some(&spec), 3).unwrap();
        let op = random_tt(&mut rng, &sigs);
        let normed = normalize(&op).unwrap();
        assert!((norm(&normed).unwrap() - 1.0).abs() < 1e-12);

        let dense = to_dense(&op, None).unwrap();
        let scale = 1.0 / frobenius_norm(&dense);
        assert!(dense_close(
            &dense.scale(scale),
            &to_dense(&normed, None).unwrap(),
            1e-10
        ));
    }

    #[test]
    fn normalize_rejects_zero() {
        let zero = TensorTrain::from_product_state(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(normalize(&zero), Err(TtError::ZeroNorm)));
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let spec = LowerSpec {
            spacing: SpacingSpec::Uniform(2),
            dim: 2,
        };
        let sigs = build_shape(4, &[2; 4], Some(&spec), 3).unwrap();
        let tt = canonicalize(&random_tt(&mut rng, &sigs), 1).unwrap();

        let dir = tempfile::tempdir().unwrap();
        save(&tt, dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();

        assert_eq!(loaded.kind(), tt.kind());
        assert_eq!(loaded.canonical_center(), Some(1));
        for (a, b) in tt.sites().iter().zip(loaded.sites()) {
            assert_eq!(a.indices(), b.indices());
            assert_eq!(a.data(), b.data());
        }

        // saving again produces identical bytes
        let dir2 = tempfile::tempdir().unwrap();
        save(&loaded, dir2.path()).unwrap();
        let w1 = std::fs::read(dir.path().join("weights.bin")).unwrap();
        let w2 = std::fs::read(dir2.path().join("weights.bin")).unwrap();
        assert_eq!(w1, w2);
    }

    #[test]
    fn chain_validation_rejects_mismatched_bonds() {
        let s0 = DenseTensor::zeros(vec![
            Index::new(upper_label(0), 2),
            Index::new(bond_label(0), 2),
        ]);
        let s1 = DenseTensor::zeros(vec![
            Index::new(bond_label(0), 3),
            Index::new(upper_label(1), 2),
        ]);
        assert!(matches!(
            TensorTrain::new(vec![s0, s1]),
            Err(TtError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn kind_derivation() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mps = random_tt(&mut rng, &build_shape(3, &[2; 3], None, 2).unwrap());
        assert_eq!(mps.kind(), TtKind::Mps);

        let mpo_spec = LowerSpec {
            spacing: SpacingSpec::Uniform(1),
            dim: 2,
        };
        let mpo = random_tt(
            &mut rng,
            &build_shape(3, &[2; 3], Some(&mpo_spec), 2).unwrap(),
        );
        assert_eq!(mpo.kind(), TtKind::Mpo);

        let smpo_spec = LowerSpec {
            spacing: SpacingSpec::Uniform(2),
            dim: 2,
        };
        let smpo = random_tt(
            &mut rng,
            &build_shape(3, &[2; 3], Some(&smpo_spec), 2).unwrap(),
        );
        assert_eq!(smpo.kind(), TtKind::Smpo);
    }
}
