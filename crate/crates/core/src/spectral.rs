//! Truncated SVD of the data matrix `A`, truncation-level selection and the
//! on-disk cache.
//!
//! `A` is short and wide (`N_d` rows, `NΩ·NS` columns), so only `N_d` singular
//! triplets exist. They are computed from a thin Householder QR of `Aᵗ`
//! followed by a dense SVD of the `N_d × N_d` triangular factor; this keeps the
//! right singular vectors orthonormal to working precision even for tiny
//! singular values. A Gram-matrix route is kept for comparison.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{AngularGrid, Mesh};
use crate::medium::Coefficient;

pub const CACHE_MAGIC: &[u8; 4] = b"TRSC";
pub const CACHE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 32 + 8 + 8;

/// Singular values below `NULL_THRESHOLD · μ₁` count as zero.
pub const NULL_THRESHOLD: f64 = 1e-13;

pub type MetaHash = [u8; 32];

#[derive(Clone, Debug, PartialEq)]
pub struct SvdCache {
    /// Singular values, nonincreasing.
    pub mu: Vec<f64>,
    /// `N_d × N_d` left singular vectors (columns).
    pub psi: DMatrix<f64>,
    /// `NΩ·NS × N_d` leading right singular vectors (columns).
    pub phi: DMatrix<f64>,
    pub meta_hash: MetaHash,
}

impl SvdCache {
    pub fn n_detectors(&self) -> usize {
        self.mu.len()
    }

    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }

    /// Number of singular values above the null threshold.
    pub fn rank(&self) -> usize {
        let Some(&top) = self.mu.first() else { return 0 };
        if top <= 0.0 {
            return 0;
        }
        self.mu.iter().take_while(|&&m| m >= NULL_THRESHOLD * top).count()
    }

    /// `‖A - Ψ Λ Φᵗ‖_F / ‖A‖_F`.
    pub fn reconstruction_error(&self, a: &DMatrix<f64>) -> f64 {
        let lambda = DMatrix::from_diagonal(&DVector::from_column_slice(&self.mu));
        let approx = &self.psi * lambda * self.phi.transpose();
        (a - approx).norm() / a.norm()
    }

    pub fn hex_hash(&self) -> String {
        hex_string(&self.meta_hash)
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvdMethod {
    /// Thin QR of `Aᵗ`, then SVD of the small triangular factor.
    #[default]
    QrThenSvd,
    /// Eigendecomposition of `A Aᵗ`; loses accuracy for `μ_i/μ₁ ≲ 1e-8`.
    Gram,
}

pub fn compute_svd(a: &DMatrix<f64>, meta_hash: MetaHash) -> Result<SvdCache> {
    compute_svd_with(a, meta_hash, SvdMethod::QrThenSvd)
}

pub fn compute_svd_with(a: &DMatrix<f64>, meta_hash: MetaHash, method: SvdMethod) -> Result<SvdCache> {
    let (nd, dim) = a.shape();
    if nd == 0 || nd > dim {
        return Err(Error::invalid(format!("SVD needs 0 < N_d <= NΩ·NS (got {nd} x {dim})")));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("A contains non-finite entries".into()));
    }
    let (mu, psi, phi) = match method {
        SvdMethod::QrThenSvd => qr_route(a)?,
        SvdMethod::Gram => gram_route(a)?,
    };
    let mut cache = SvdCache {
        mu,
        psi,
        phi,
        meta_hash,
    };
    fix_signs(&mut cache);
    Ok(cache)
}

type Triplets = (Vec<f64>, DMatrix<f64>, DMatrix<f64>);

fn qr_route(a: &DMatrix<f64>) -> Result<Triplets> {
    let nd = a.nrows();
    let qr = a.transpose().qr();
    let q = qr.q(); // dim × nd
    let r = qr.r(); // nd × nd
                    // A = Rᵗ Qᵗ, and Rᵗ = U S Vᵗ gives A = U S (Q V)ᵗ.
    let svd = r
        .transpose()
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical(format!("SVD of the {nd}x{nd} triangular factor did not converge")))?;
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵗ");
    let mut order: Vec<usize> = (0..nd).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mu = order.iter().map(|&i| svd.singular_values[i]).collect();
    let psi = DMatrix::from_fn(nd, nd, |r, c| u[(r, order[c])]);
    let v = DMatrix::from_fn(nd, nd, |r, c| vt[(order[c], r)]);
    Ok((mu, psi, q * v))
}

fn gram_route(a: &DMatrix<f64>) -> Result<Triplets> {
    let nd = a.nrows();
    let gram = a * a.transpose();
    let eig = SymmetricEigen::try_new(gram, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical(format!("eigensolve of the {nd}x{nd} Gram matrix did not converge")))?;
    let mut order: Vec<usize> = (0..nd).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mu: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()).collect();
    let psi = DMatrix::from_fn(nd, nd, |r, c| eig.eigenvectors[(r, order[c])]);
    let top = mu[0];
    let at_psi = a.transpose() * &psi;
    let mut phi = DMatrix::zeros(a.ncols(), nd);
    for (c, &m) in mu.iter().enumerate() {
        // Null-space directions are left as zero columns rather than guessed.
        if top > 0.0 && m >= NULL_THRESHOLD * top {
            phi.set_column(c, &(at_psi.column(c) / m));
        }
    }
    Ok((mu, psi, phi))
}

// Largest-magnitude entry of each ψ made positive, so results are reproducible.
fn fix_signs(cache: &mut SvdCache) {
    for c in 0..cache.mu.len() {
        let col = cache.psi.column(c);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            cache.psi.column_mut(c).neg_mut();
            cache.phi.column_mut(c).neg_mut();
        }
    }
}

/// Fingerprint of everything `A` depends on: grids, detectors, the target
/// coefficient and the known coefficient values.
pub fn meta_hash(mesh: &Mesh, angular: &AngularGrid, target: Coefficient, known: &[f64]) -> MetaHash {
    let mut h = Sha256::new();
    h.update(CACHE_MAGIC);
    h.update(CACHE_VERSION.to_le_bytes());
    for v in [
        mesh.nx as u64,
        mesh.ny as u64,
        angular.ns as u64,
        mesh.n_detectors() as u64,
    ] {
        h.update(v.to_le_bytes());
    }
    let d = mesh.domain;
    for v in [d.x_min, d.y_min, d.x_max, d.y_max, angular.g] {
        h.update(v.to_bits().to_le_bytes());
    }
    for det in &mesh.detectors {
        h.update(det.arc.to_bits().to_le_bytes());
    }
    h.update([match target {
        Coefficient::Absorption => 0u8,
        Coefficient::Scattering => 1u8,
    }]);
    // Free streaming does not depend on any coefficient.
    if target == Coefficient::Scattering {
        for v in known {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    let out = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&out);
    bytes
}

/// Writes the cache: magic, version, hash, `N_d`, `NΩ·NS`, then `μ`, `Ψ` and
/// `Φ` column-major, all little-endian.
pub fn save_cache(cache: &SvdCache, path: &Path) -> Result<()> {
    let nd = cache.n_detectors();
    let mut buf = Vec::with_capacity(HEADER_LEN as usize + 8 * (nd + nd * nd + cache.phi.len()));
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&cache.meta_hash);
    buf.extend_from_slice(&(nd as u64).to_le_bytes());
    buf.extend_from_slice(&(cache.dim() as u64).to_le_bytes());
    for v in cache.mu.iter().chain(cache.psi.as_slice()).chain(cache.phi.as_slice()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a cache, optionally requiring a specific meta hash.
pub fn load_cache(path: &Path, expected: Option<&MetaHash>) -> Result<SvdCache> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes, expected)
}

pub fn decode_cache(bytes: &[u8], expected: Option<&MetaHash>) -> Result<SvdCache> {
    let found = bytes.len() as u64;
    if found < HEADER_LEN {
        return Err(Error::CacheTruncated {
            needed: HEADER_LEN,
            found,
        });
    }
    if &bytes[0..4] != CACHE_MAGIC {
        return Err(Error::CacheCorrupt("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::CacheVersion {
            found: version,
            expected: CACHE_VERSION,
        });
    }
    let mut meta_hash = [0u8; 32];
    meta_hash.copy_from_slice(&bytes[8..40]);
    if let Some(want) = expected {
        if want != &meta_hash {
            return Err(Error::CacheHashMismatch {
                stored: hex_string(&meta_hash),
                expected: hex_string(want),
            });
        }
    }
    let nd = u64::from_le_bytes(bytes[40..48].try_into().unwrap());
    let dim = u64::from_le_bytes(bytes[48..56].try_into().unwrap());
    let count = nd
        .checked_mul(nd)
        .and_then(|p| p.checked_add(nd))
        .and_then(|s| dim.checked_mul(nd).and_then(|p| s.checked_add(p)))
        .ok_or_else(|| Error::CacheCorrupt("dimensions overflow".into()))?;
    let needed = count
        .checked_mul(8)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::CacheCorrupt("dimensions overflow".into()))?;
    if found < needed {
        return Err(Error::CacheTruncated { needed, found });
    }
    if found > needed {
        return Err(Error::CacheCorrupt(format!(
            "{} trailing bytes after payload",
            found - needed
        )));
    }
    let (nd, dim) = (nd as usize, dim as usize);
    let mut values = bytes[HEADER_LEN as usize..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mu: Vec<f64> = values.by_ref().take(nd).collect();
    let psi = DMatrix::from_iterator(nd, nd, values.by_ref().take(nd * nd));
    let phi = DMatrix::from_iterator(dim, nd, values);
    Ok(SvdCache {
        mu,
        psi,
        phi,
        meta_hash,
    })
}

/// How to choose the number `L` of signal modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum LPolicy {
    Fixed {
        value: usize,
    },
    /// Cut at the largest ratio `μ_i/μ_{i+1}` if it exceeds `factor`.
    Jump {
        #[serde(default = "default_jump")]
        factor: f64,
    },
    /// Cut where the data projections `|ψ_jᵗ J|` stop decaying: the first `i`
    /// whose following `window` coefficients have a median above
    /// `plateau · c_i`.
    Projection {
        #[serde(default = "default_plateau")]
        plateau: f64,
        #[serde(default = "default_window")]
        window: usize,
    },
}

fn default_jump() -> f64 {
    10.0
}
fn default_plateau() -> f64 {
    0.5
}
fn default_window() -> usize {
    5
}

impl LPolicy {
    pub fn jump() -> Self {
        LPolicy::Jump { factor: default_jump() }
    }

    pub fn projection() -> Self {
        LPolicy::Projection {
            plateau: default_plateau(),
            window: default_window(),
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median over sources of `|ψ_jᵗ J_q|` for every mode `j`.
pub fn projection_profile(cache: &SvdCache, data: &[Vec<f64>]) -> Vec<f64> {
    (0..cache.n_detectors())
        .map(|j| {
            let psi = cache.psi.column(j);
            let mut c: Vec<f64> = data
                .iter()
                .map(|jq| psi.iter().zip(jq).map(|(a, b)| a * b).sum::<f64>().abs())
                .collect();
            median(&mut c)
        })
        .collect()
}

/// Returns `L` (number of retained modes, 1-based count).
pub fn select_l(cache: &SvdCache, data: &[Vec<f64>], policy: &LPolicy) -> Result<usize> {
    if data.is_empty() || data.iter().all(|j| j.iter().all(|&x| x == 0.0)) {
        return Err(Error::invalid("L selection needs at least one nonzero data vector"));
    }
    let nd = cache.n_detectors();
    if let Some(bad) = data.iter().find(|j| j.len() != nd) {
        return Err(Error::DimensionMismatch {
            context: "select_l data",
            expected: nd,
            actual: bad.len(),
        });
    }
    let rank = cache.rank().max(1);
    match *policy {
        LPolicy::Fixed { value } => Ok(value.clamp(1, nd)),
        LPolicy::Jump { factor } => {
            let mut best: Option<(usize, f64)> = None;
            for i in 1..rank {
                let ratio = cache.mu[i - 1] / cache.mu[i];
                if ratio >= factor && best.is_none_or(|(_, r)| ratio >= r) {
                    best = Some((i, ratio));
                }
            }
            Ok(best.map_or(rank, |(i, _)| i))
        }
        LPolicy::Projection { plateau, window } => {
            let window = window.max(1);
            let c = projection_profile(cache, data);
            for i in 1..=rank.saturating_sub(window) {
                let mut next = c[i..i + window].to_vec();
                if c[i - 1] > 0.0 && median(&mut next) > plateau * c[i - 1] {
                    return Ok(i);
                }
            }
            Ok(rank)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo_random(rows: usize, cols: usize, mut seed: u64) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    fn diag_cache(mu: &[f64]) -> SvdCache {
        let n = mu.len();
        let mut a = DMatrix::zeros(n, n + 3);
        for (i, &m) in mu.iter().enumerate() {
            a[(i, i)] = m;
        }
        compute_svd(&a, [0; 32]).unwrap()
    }

    #[test]
    fn diagonal_matrix() {
        let mut a = DMatrix::zeros(3, 7);
        a[(0, 0)] = 3.0;
        a[(1, 1)] = 2.0;
        a[(2, 2)] = 1.0;
        let c = compute_svd(&a, [0; 32]).unwrap();
        for (got, want) in c.mu.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-14);
        }
        for i in 0..3 {
            assert!((c.psi[(i, i)] - 1.0).abs() < 1e-14);
            assert!((c.phi[(i, i)] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn random_exactness_both_routes() {
        let a = pseudo_random(6, 40, 3);
        for method in [SvdMethod::QrThenSvd, SvdMethod::Gram] {
            let c = compute_svd_with(&a, [0; 32], method).unwrap();
            assert!(c.reconstruction_error(&a) < 1e-12, "{method:?}");
            assert!(c.mu.windows(2).all(|w| w[0] >= w[1]));
            let ptp = c.phi.transpose() * &c.phi;
            assert!((ptp - DMatrix::identity(6, 6)).amax() < 1e-12);
        }
    }

    #[test]
    fn gram_and_qr_routes_agree_on_singular_values() {
        let a = pseudo_random(8, 30, 11);
        let q = compute_svd_with(&a, [0; 32], SvdMethod::QrThenSvd).unwrap();
        let g = compute_svd_with(&a, [0; 32], SvdMethod::Gram).unwrap();
        for (x, y) in q.mu.iter().zip(&g.mu) {
            assert!((x - y).abs() < 1e-12 * q.mu[0]);
        }
    }

    #[test]
    fn rank_deficient_matrix() {
        let b = pseudo_random(3, 20, 5);
        let mix = pseudo_random(5, 3, 9);
        let a = mix * b; // rank 3
        let c = compute_svd(&a, [0; 32]).unwrap();
        assert_eq!(c.rank(), 3);
        assert!(c.reconstruction_error(&a) < 1e-12);
        // Through the Gram matrix the null singular values only drop to about
        // sqrt(ε)·μ₁, which is why the QR route is the default.
        let g = compute_svd_with(&a, [0; 32], SvdMethod::Gram).unwrap();
        assert!(g.mu[3] < 1e-6 * g.mu[0]);
        assert!(g.mu[3] > 1e-13 * g.mu[0] || g.phi.column(3).norm() == 0.0);
    }

    #[test]
    fn jump_policy() {
        let c = diag_cache(&[1.0, 0.9, 1e-8, 0.9e-8, 0.8e-8]);
        let data = vec![vec![1.0; 5]];
        assert_eq!(select_l(&c, &data, &LPolicy::jump()).unwrap(), 2);
        // no jump: keep everything usable
        let flat = diag_cache(&[1.0, 0.9, 0.8, 0.7]);
        assert_eq!(select_l(&flat, &[vec![1.0; 4]], &LPolicy::jump()).unwrap(), 4);
    }

    #[test]
    fn fixed_policy_clamps() {
        let c = diag_cache(&[3.0, 2.0, 1.0]);
        let data = vec![vec![1.0; 3]];
        assert_eq!(select_l(&c, &data, &LPolicy::Fixed { value: 50 }).unwrap(), 3);
        assert_eq!(select_l(&c, &data, &LPolicy::Fixed { value: 0 }).unwrap(), 1);
        assert_eq!(select_l(&c, &data, &LPolicy::Fixed { value: 2 }).unwrap(), 2);
        assert!(select_l(&c, &[vec![0.0; 3]], &LPolicy::jump()).is_err());
        assert!(select_l(&c, &[], &LPolicy::jump()).is_err());
    }

    #[test]
    fn projection_policy_is_deterministic() {
        let c = diag_cache(&(0..20).map(|i| 0.7f64.powi(i)).collect::<Vec<_>>());
        let data: Vec<Vec<f64>> = (0..3)
            .map(|q| (0..20).map(|d| 1.0 + 0.01 * ((q * 20 + d) as f64).sin()).collect())
            .collect();
        let a = select_l(&c, &data, &LPolicy::projection()).unwrap();
        let b = select_l(&c, &data, &LPolicy::projection()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cache_round_trip_and_failures() {
        let a = pseudo_random(5, 17, 1);
        let hash = [7u8; 32];
        let c = compute_svd(&a, hash).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.trsc");
        save_cache(&c, &path).unwrap();
        let back = load_cache(&path, Some(&hash)).unwrap();
        assert_eq!(back, c);
        for (x, y) in back.phi.iter().zip(c.phi.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }

        let mut other = hash;
        other[0] ^= 1;
        assert!(matches!(
            load_cache(&path, Some(&other)),
            Err(Error::CacheHashMismatch { .. })
        ));

        let bytes = fs::read(&path).unwrap();
        let short = &bytes[..bytes.len() - 8];
        assert!(matches!(decode_cache(short, None), Err(Error::CacheTruncated { .. })));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(
            decode_cache(&wrong_version, None),
            Err(Error::CacheVersion { found: 9, .. })
        ));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_cache(&bad_magic, None), Err(Error::CacheCorrupt(_))));
        assert!(matches!(
            decode_cache(&bytes[..10], None),
            Err(Error::CacheTruncated { .. })
        ));
    }
}
