//! Feature embeddings: per-feature local maps producing product states, image
//! flattening, and the entangled FRQI patch encoding with MPS decomposition.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{svd_with_bond_label, DenseTensor, Index, TensorError};
use crate::tt::{self, TensorTrain, TtError};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("feature value {x} outside [0, 1]")]
    OutOfRange { x: f64 },

    #[error("bad embedding parameter: {0}")]
    BadParameter(String),

    #[error("normalization of a zero vector (x = 0 with no bias term)")]
    ZeroVector,

    #[error("pixel count {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("feature {position}: {source}")]
    Feature {
        position: usize,
        source: Box<EmbedError>,
    },

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Tt(#[from] TtError),
}

pub type Result<T> = std::result::Result<T, EmbedError>;

fn check_unit_interval(x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(EmbedError::OutOfRange { x });
    }
    Ok(())
}

/// Trigonometric map: pairs `(cos(pi x / 2^m), sin(pi x / 2^m))` for
/// `m = 1..=k`, scaled by `1/sqrt(k)`. Unit norm for every `x` in `[0, 1]`.
pub fn embed_trigonometric(x: f64, k: usize) -> Result<Vec<f64>> {
    check_unit_interval(x)?;
    if k == 0 {
        return Err(EmbedError::BadParameter("trigonometric k must be >= 1".into()));
    }
    let scale = 1.0 / (k as f64).sqrt();
    let mut out = Vec::with_capacity(2 * k);
    for m in 1..=k {
        let angle = std::f64::consts::PI * x / (1u64 << m) as f64;
        out.push(scale * angle.cos());
        out.push(scale * angle.sin());
    }
    Ok(out)
}

/// Fourier map: entry `j` is `(1/p) |sum_k exp(2 pi i k ((p-1) x / p - j/p))|`
/// for `j = 0..p-1`. Entries lie in `[0, 1]`; unit norm is guaranteed only
/// for `p = 2`, so larger `p` can opt into renormalization.
pub fn embed_fourier(x: f64, p: usize, normalize: bool) -> Result<Vec<f64>> {
    check_unit_interval(x)?;
    if p < 2 {
        return Err(EmbedError::BadParameter("fourier p must be >= 2".into()));
    }
    let p_f = p as f64;
    let mut out = Vec::with_capacity(p);
    for j in 0..p {
        let theta = 2.0 * std::f64::consts::PI * ((p_f - 1.0) * x / p_f - j as f64 / p_f);
        let mut re = 0.0;
        let mut im = 0.0;
        for k in 0..p {
            let phase = theta * k as f64;
            re += phase.cos();
            im += phase.sin();
        }
        out.push((re * re + im * im).sqrt() / p_f);
    }
    if normalize {
        normalize_vector(&mut out)?;
    }
    Ok(out)
}

/// Gaussian radial basis map: entry `c` is `exp(-gamma (x - x_c)^2)`.
pub fn embed_rbf(x: f64, centers: &[f64], gamma: f64, normalize: bool) -> Result<Vec<f64>> {
    if !x.is_finite() {
        return Err(EmbedError::OutOfRange { x });
    }
    if centers.len() < 2 {
        return Err(EmbedError::BadParameter(
            "rbf needs at least two centers".into(),
        ));
    }
    if !(gamma > 0.0) {
        return Err(EmbedError::BadParameter("rbf gamma must be positive".into()));
    }
    let mut out: Vec<f64> = centers
        .iter()
        .map(|c| (-gamma * (x - c) * (x - c)).exp())
        .collect();
    if normalize {
        normalize_vector(&mut out)?;
    }
    Ok(out)
}

/// Polynomial map: `(1, x, ..., x^d)` with the bias term, `(x, ..., x^d)`
/// without it.
pub fn embed_polynomial(
    x: f64,
    degree: usize,
    include_bias: bool,
    normalize: bool,
) -> Result<Vec<f64>> {
    if degree == 0 {
        return Err(EmbedError::BadParameter(
            "polynomial degree must be >= 1".into(),
        ));
    }
    let mut out = Vec::with_capacity(degree + usize::from(include_bias));
    if include_bias {
        out.push(1.0);
    }
    let mut power = 1.0;
    for _ in 0..degree {
        power *= x;
        out.push(power);
    }
    if normalize {
        normalize_vector(&mut out)?;
    }
    Ok(out)
}

fn normalize_vector(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    for a in v.iter_mut() {
        *a /= norm;
    }
    Ok(())
}

/// A per-feature local map specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalMap {
    Trigonometric {
        k: usize,
    },
    Fourier {
        p: usize,
        #[serde(default)]
        normalize: bool,
    },
    GaussianRbf {
        centers: Vec<f64>,
        gamma: f64,
        #[serde(default)]
        normalize: bool,
    },
    Polynomial {
        degree: usize,
        include_bias: bool,
        #[serde(default)]
        normalize: bool,
    },
}

impl LocalMap {
    pub fn output_dim(&self) -> usize {
        match self {
            LocalMap::Trigonometric { k } => 2 * k,
            LocalMap::Fourier { p, .. } => *p,
            LocalMap::GaussianRbf { centers, .. } => centers.len(),
            LocalMap::Polynomial {
                degree,
                include_bias,
                ..
            } => degree + usize::from(*include_bias),
        }
    }

    pub fn apply(&self, x: f64) -> Result<Vec<f64>> {
        match self {
            LocalMap::Trigonometric { k } => embed_trigonometric(x, *k),
            LocalMap::Fourier { p, normalize } => embed_fourier(x, *p, *normalize),
            LocalMap::GaussianRbf {
                centers,
                gamma,
                normalize,
            } => embed_rbf(x, centers, *gamma, *normalize),
            LocalMap::Polynomial {
                degree,
                include_bias,
                normalize,
            } => embed_polynomial(x, *degree, *include_bias, *normalize),
        }
    }
}

/// An embedded input: a product of local vectors, or an entangled MPS.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddedState {
    Product(Vec<Vec<f64>>),
    Entangled(TensorTrain),
}

impl EmbeddedState {
    pub fn n_sites(&self) -> usize {
        match self {
            EmbeddedState::Product(locals) => locals.len(),
            EmbeddedState::Entangled(tt) => tt.n_sites(),
        }
    }

    pub fn local_dims(&self) -> Vec<usize> {
        match self {
            EmbeddedState::Product(locals) => locals.iter().map(Vec::len).collect(),
            EmbeddedState::Entangled(tt) => (0..tt.n_sites())
                .map(|k| tt.upper_dim(k).unwrap_or(1))
                .collect(),
        }
    }

    /// The state as an MPS (bond dimension 1 for product states).
    pub fn to_mps(&self) -> Result<TensorTrain> {
        match self {
            EmbeddedState::Product(locals) => Ok(TensorTrain::from_product_state(locals)?),
            EmbeddedState::Entangled(tt) => Ok(tt.clone()),
        }
    }

    pub fn norm(&self) -> f64 {
        match self {
            EmbeddedState::Product(locals) => locals
                .iter()
                .map(|v| v.iter().map(|a| a * a).sum::<f64>().sqrt())
                .product(),
            EmbeddedState::Entangled(tt) => tt::norm(tt).unwrap_or(f64::NAN),
        }
    }
}

/// Embeds each feature with its own local map (Eq.-style product state).
pub fn embed_product_state(x: &[f64], maps: &[LocalMap]) -> Result<EmbeddedState> {
    if x.len() != maps.len() {
        return Err(EmbedError::BadParameter(format!(
            "{} features but {} maps",
            x.len(),
            maps.len()
        )));
    }
    let locals = x
        .iter()
        .zip(maps)
        .enumerate()
        .map(|(position, (&value, map))| {
            map.apply(value).map_err(|source| EmbedError::Feature {
                position,
                source: Box::new(source),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddedState::Product(locals))
}

/// A row-major 2D grid of pixel values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(EmbedError::BadParameter("grid dims must be positive".into()));
        }
        if data.len() != rows * cols {
            return Err(EmbedError::BadParameter(format!(
                "grid data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Grid { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Flattens an image row by row into a 1D vector. With `snake` set, every
/// other row is reversed (boustrophedon order).
pub fn flatten_zigzag(image: &Grid, snake: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(image.rows * image.cols);
    for r in 0..image.rows {
        if snake && r % 2 == 1 {
            for c in (0..image.cols).rev() {
                out.push(image.get(r, c));
            }
        } else {
            for c in 0..image.cols {
                out.push(image.get(r, c));
            }
        }
    }
    out
}

/// Inverse of [`flatten_zigzag`] for a known image shape.
pub fn unflatten_zigzag(flat: &[f64], rows: usize, cols: usize, snake: bool) -> Result<Grid> {
    if flat.len() != rows * cols {
        return Err(EmbedError::BadParameter(format!(
            "{} values cannot fill a {rows}x{cols} image",
            flat.len()
        )));
    }
    let mut data = vec![0.0; rows * cols];
    let mut it = flat.iter();
    for r in 0..rows {
        if snake && r % 2 == 1 {
            for c in (0..cols).rev() {
                data[r * cols + c] = *it.next().unwrap();
            }
        } else {
            for c in 0..cols {
                data[r * cols + c] = *it.next().unwrap();
            }
        }
    }
    Grid::new(rows, cols, data)
}

/// FRQI patch encoding: pixel values become the color amplitudes
/// `cos(pi p/2), sin(pi p/2)` entangled with the binary position register,
/// normalized by `1/sqrt(n)`. The position bits are big-endian: the first MPS
/// site is the most significant position bit, the last site is the color
/// qubit. The dense state is decomposed into an MPS by sequential SVD.
pub fn embed_frqi(pixels: &[f64]) -> Result<EmbeddedState> {
    let n = pixels.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(EmbedError::NotPowerOfTwo(n));
    }
    for &p in pixels {
        check_unit_interval(p)?;
    }
    let m = n.trailing_zeros() as usize;
    let scale = 1.0 / (n as f64).sqrt();
    let mut amplitudes = vec![0.0; 2 * n];
    for (x, &p) in pixels.iter().enumerate() {
        let angle = std::f64::consts::FRAC_PI_2 * p;
        amplitudes[2 * x] = scale * angle.cos();
        amplitudes[2 * x + 1] = scale * angle.sin();
    }
    let norm_sq: f64 = amplitudes.iter().map(|a| a * a).sum();
    if (norm_sq - 1.0).abs() > 1e-12 {
        return Err(EmbedError::BadParameter(format!(
            "frqi state norm^2 deviates from 1 by {:e}",
            (norm_sq - 1.0).abs()
        )));
    }

    let indices: Vec<Index> = (0..=m).map(|q| Index::new(format!("q{q}"), 2)).collect();
    let state = DenseTensor::from_data(indices, amplitudes)?;
    let (mps, _) = decompose_state_to_mps(&state, None)?;
    Ok(EmbeddedState::Entangled(mps))
}

/// Splits a dense state into an MPS by left-to-right sequential SVD, one site
/// per index of the input (in index order). Singular values below 1e-14 of
/// the block norm are discarded, so product states come out with bond
/// dimension 1. Returns the chain and the accumulated sum of squared
/// discarded singular values across all splits.
pub fn decompose_state_to_mps(
    state: &DenseTensor,
    max_bond: Option<usize>,
) -> Result<(TensorTrain, f64)> {
    let n = state.order();
    if n == 0 {
        return Err(EmbedError::BadParameter(
            "state must carry at least one index".into(),
        ));
    }
    let norm: f64 = state.data().iter().map(|a| a * a).sum();
    if norm <= 0.0 {
        return Err(EmbedError::BadParameter("state has zero norm".into()));
    }
    let original_labels: Vec<String> = state
        .indices()
        .iter()
        .map(|i| i.label().to_string())
        .collect();

    if n == 1 {
        let site = state.relabeled(&original_labels[0], &tt::upper_label(0))?;
        return Ok((TensorTrain::new(vec![site])?, 0.0));
    }

    let mut total_discarded = 0.0;
    let mut sites = Vec::with_capacity(n);
    let mut remaining = state.clone();
    for k in 0..n - 1 {
        let bond = tt::bond_label(k);
        let rows_owned: Vec<String> = if k == 0 {
            vec![original_labels[0].clone()]
        } else {
            vec![tt::bond_label(k - 1), original_labels[k].clone()]
        };
        let rows: Vec<&str> = rows_owned.iter().map(String::as_str).collect();
        let cutoff = 1e-14 * crate::tensor::frobenius_norm(&remaining);
        let out = svd_with_bond_label(&remaining, &rows, max_bond, Some(cutoff), Some(&bond))?;
        total_discarded += out.truncation_error_sq;

        let site = out.u.relabeled(&original_labels[k], &tt::upper_label(k))?;
        sites.push(site);

        // absorb the singular values into the right factor
        let mut v = out.v;
        let rank = out.s.len();
        let row_len = v.len() / rank;
        for (i, &s) in out.s.iter().enumerate() {
            for value in &mut v.data_mut()[i * row_len..(i + 1) * row_len] {
                *value *= s;
            }
        }
        remaining = v;
    }
    let last = remaining.relabeled(&original_labels[n - 1], &tt::upper_label(n - 1))?;
    sites.push(last);
    Ok((TensorTrain::new(sites)?, total_discarded))
}
