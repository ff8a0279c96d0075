//! Seeded initialization schemes for tensor-train site tensors.
//!
//! Every scheme draws from a ChaCha8 counter-based generator. Site `k` of a
//! model consumes stream `k` of the seeded generator, so per-site
//! initialization is order-independent and `(signatures, spec)` fully
//! determines the model bit for bit.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, DenseTensor, Index};
use crate::tt::{self, SiteSignature, TensorTrain, TtError};

#[derive(Debug, Error)]
pub enum InitError {
    #[error("bad initializer parameter: {0}")]
    BadParameter(String),

    #[error(
        "haar_unitary needs a square bond matricization at site {site} \
         (left {left}, right {right})"
    )]
    NonSquareBond {
        site: usize,
        left: usize,
        right: usize,
    },

    #[error("gram-schmidt hit a degenerate random draw")]
    Degenerate,

    #[error("initialized network norm {norm:e} outside [1e-6, 1e6]")]
    UnstableNorm { norm: f64 },

    #[error("site {site}: {source}")]
    Site {
        site: usize,
        source: Box<InitError>,
    },

    #[error(transparent)]
    Tt(#[from] TtError),
}

pub type Result<T> = std::result::Result<T, InitError>;

/// Base distribution feeding the Gram-Schmidt orthonormalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseDist {
    Randn { mu: f64, sigma: f64 },
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Random fill followed by row orthonormalization of the matricization
    /// that preserves the first tensor dimension.
    GramSchmidt { base: BaseDist },
    /// I.i.d. Normal(mu, sigma^2), with an optional additive noise tensor.
    Randn {
        mu: f64,
        sigma: f64,
        #[serde(default)]
        noise_sigma: Option<f64>,
    },
    /// A stack of Haar-distributed orthogonal matrices, one per combination
    /// of physical indices, over the (left bond x right bond) matricization.
    HaarUnitary,
    /// Noise plus 1 on every entry whose bond coordinates coincide,
    /// broadcast across physical indices.
    IdentityBias { noise_sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub seed: u64,
}

fn sample_base(base: &BaseDist, len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    match *base {
        BaseDist::Randn { mu, sigma } => {
            if !(sigma > 0.0) {
                return Err(InitError::BadParameter("sigma must be positive".into()));
            }
            let dist = Normal::new(mu, sigma)
                .map_err(|e| InitError::BadParameter(e.to_string()))?;
            Ok((0..len).map(|_| dist.sample(rng)).collect())
        }
        BaseDist::Uniform { lo, hi } => {
            if !(lo < hi) {
                return Err(InitError::BadParameter("uniform needs lo < hi".into()));
            }
            let dist = Uniform::new(lo, hi)
                .map_err(|e| InitError::BadParameter(e.to_string()))?;
            Ok((0..len).map(|_| dist.sample(rng)).collect())
        }
    }
}

/// Modified Gram-Schmidt on the rows of an `r x c` row-major matrix with
/// `r <= c`. Degenerate rows are redrawn from the base distribution.
fn orthonormalize_rows(
    data: &mut [f64],
    r: usize,
    c: usize,
    base: &BaseDist,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    debug_assert!(r <= c);
    for i in 0..r {
        let mut attempts = 0;
        loop {
            for j in 0..i {
                let dot: f64 = (0..c).map(|t| data[i * c + t] * data[j * c + t]).sum();
                for t in 0..c {
                    data[i * c + t] -= dot * data[j * c + t];
                }
            }
            let norm: f64 = (0..c)
                .map(|t| data[i * c + t] * data[i * c + t])
                .sum::<f64>()
                .sqrt();
            if norm > 1e-12 {
                for t in 0..c {
                    data[i * c + t] /= norm;
                }
                break;
            }
            attempts += 1;
            if attempts > 100 {
                return Err(InitError::Degenerate);
            }
            let fresh = sample_base(base, c, rng)?;
            data[i * c..(i + 1) * c].copy_from_slice(&fresh);
        }
    }
    Ok(())
}

fn gram_schmidt_tensor(
    indices: Vec<Index>,
    base: &BaseDist,
    rng: &mut ChaCha8Rng,
) -> Result<DenseTensor> {
    let len: usize = indices.iter().map(|i| i.dim()).product();
    let mut data = sample_base(base, len, rng)?;
    if indices.len() < 2 {
        // an order-1 site just becomes a unit vector
        orthonormalize_rows(&mut data, 1, len, base, rng)?;
        return Ok(DenseTensor::from_data(indices, data).expect("valid site data"));
    }
    let r = indices[0].dim();
    let c = len / r;
    if r <= c {
        orthonormalize_rows(&mut data, r, c, base, rng)?;
    } else {
        // more rows than columns: orthonormalize columns and transpose back
        let mut transposed = vec![0.0; len];
        for i in 0..r {
            for j in 0..c {
                transposed[j * r + i] = data[i * c + j];
            }
        }
        orthonormalize_rows(&mut transposed, c, r, base, rng)?;
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = transposed[j * r + i];
            }
        }
    }
    Ok(DenseTensor::from_data(indices, data).expect("valid site data"))
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// factor signs fixed so `diag(r) >= 0`.
fn haar_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let gauss = Normal::new(0.0, 1.0).expect("valid normal");
    let data: Vec<f64> = (0..n * n).map(|_| gauss.sample(rng)).collect();
    let g = DenseTensor::from_data(vec![Index::new("row", n), Index::new("col", n)], data)
        .expect("valid matrix");
    let (q, _r) = tensor::qr(&g, &["row"]).map_err(TtError::from)?;
    Ok(q.into_data())
}

fn haar_unit_vector(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let gauss = Normal::new(0.0, 1.0).expect("valid normal");
    loop {
        let v: Vec<f64> = (0..n).map(|_| gauss.sample(rng)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

fn physical_dims(signature: &SiteSignature) -> (usize, usize) {
    (
        signature.upper_dim.unwrap_or(1),
        signature.lower_dim.unwrap_or(1),
    )
}

fn haar_tensor(
    signature: &SiteSignature,
    site: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DenseTensor> {
    let (du, dl) = physical_dims(signature);
    let (left, right) = (signature.left_bond, signature.right_bond);
    let indices = signature.indices(site);
    let mut out = DenseTensor::zeros(indices);

    let slice = |rng: &mut ChaCha8Rng| -> Result<Vec<f64>> {
        match (left, right) {
            (0, 0) => Ok(vec![1.0]),
            (0, n) | (n, 0) => Ok(haar_unit_vector(n, rng)),
            (l, r) if l == r => haar_orthogonal(l, rng),
            (l, r) => Err(InitError::NonSquareBond {
                site,
                left: l,
                right: r,
            }),
        }
    };

    for u in 0..du {
        for l in 0..dl {
            let block = slice(rng)?;
            let mut cursor = 0usize;
            for a in 0..left.max(1) {
                for b in 0..right.max(1) {
                    let mut coords = Vec::new();
                    if left > 0 {
                        coords.push(a);
                    }
                    if signature.upper_dim.is_some() {
                        coords.push(u);
                    }
                    if signature.lower_dim.is_some() {
                        coords.push(l);
                    }
                    if right > 0 {
                        coords.push(b);
                    }
                    out.set(&coords, block[cursor]);
                    cursor += 1;
                }
            }
        }
    }
    Ok(out)
}

fn identity_bias_tensor(
    signature: &SiteSignature,
    site: usize,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DenseTensor> {
    if noise_sigma < 0.0 {
        return Err(InitError::BadParameter(
            "noise_sigma must be non-negative".into(),
        ));
    }
    let indices = signature.indices(site);
    let len: usize = indices.iter().map(|i| i.dim()).product();
    let data = if noise_sigma > 0.0 {
        let dist = Normal::new(0.0, noise_sigma).expect("valid normal");
        (0..len).map(|_| dist.sample(rng)).collect()
    } else {
        vec![0.0; len]
    };
    let mut out = DenseTensor::from_data(indices, data).expect("valid site data");

    let (du, dl) = physical_dims(signature);
    let (left, right) = (signature.left_bond, signature.right_bond);
    // missing bonds act as a single coordinate 0
    for a in 0..left.max(1) {
        let b = a;
        if right > 0 && b >= right {
            continue;
        }
        for u in 0..du {
            for l in 0..dl {
                let mut coords = Vec::new();
                if left > 0 {
                    coords.push(a);
                }
                if signature.upper_dim.is_some() {
                    coords.push(u);
                }
                if signature.lower_dim.is_some() {
                    coords.push(l);
                }
                if right > 0 {
                    coords.push(b);
                }
                let old = out.get(&coords);
                out.set(&coords, old + 1.0);
            }
        }
    }
    Ok(out)
}

/// Initializes one site tensor from the scheme, consuming `rng`.
pub fn init_tensor(
    signature: &SiteSignature,
    site: usize,
    scheme: &InitScheme,
    rng: &mut ChaCha8Rng,
) -> Result<DenseTensor> {
    let indices = signature.indices(site);
    match scheme {
        InitScheme::GramSchmidt { base } => gram_schmidt_tensor(indices, base, rng),
        InitScheme::Randn {
            mu,
            sigma,
            noise_sigma,
        } => {
            let base = BaseDist::Randn {
                mu: *mu,
                sigma: *sigma,
            };
            let len: usize = indices.iter().map(|i| i.dim()).product();
            let mut data = sample_base(&base, len, rng)?;
            if let Some(noise) = noise_sigma {
                if !(*noise >= 0.0) {
                    return Err(InitError::BadParameter(
                        "noise_sigma must be non-negative".into(),
                    ));
                }
                if *noise > 0.0 {
                    let dist = Normal::new(0.0, *noise).expect("valid normal");
                    for value in &mut data {
                        *value += dist.sample(rng);
                    }
                }
            }
            Ok(DenseTensor::from_data(indices, data).expect("valid site data"))
        }
        InitScheme::HaarUnitary => haar_tensor(signature, site, rng),
        InitScheme::IdentityBias { noise_sigma } => {
            identity_bias_tensor(signature, site, *noise_sigma, rng)
        }
    }
}

/// The RNG stream assigned to one site of a seeded model.
pub fn site_rng(seed: u64, site: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(site as u64);
    rng
}

/// Initializes a full model. Gram-Schmidt and Haar models are normalized to
/// unit norm (their raw norms are shape-dependent and can overflow any fixed
/// range on long chains); the resulting norm is checked against
/// `[1e-6, 1e6]`. Random-normal and identity-bias models are returned as
/// drawn.
pub fn init_model(signatures: &[SiteSignature], spec: &InitSpec) -> Result<TensorTrain> {
    let sites = signatures
        .iter()
        .enumerate()
        .map(|(k, sig)| {
            let mut rng = site_rng(spec.seed, k);
            init_tensor(sig, k, &spec.scheme, &mut rng).map_err(|source| InitError::Site {
                site: k,
                source: Box::new(source),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = TensorTrain::new(sites)?;
    match spec.scheme {
        InitScheme::GramSchmidt { .. } | InitScheme::HaarUnitary => {
            let model = tt::normalize(&model)?;
            let norm = tt::norm(&model)?;
            if !(1e-6..=1e6).contains(&norm) {
                return Err(InitError::UnstableNorm { norm });
            }
            Ok(model)
        }
        _ => Ok(model),
    }
}
