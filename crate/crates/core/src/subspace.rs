//! Orthonormal subspace algebra.
//!
//! A [`NumberSubspace`] is an ordered orthonormal basis `b1..bk` of a
//! subspace of the hidden space. The coordinate of a hidden vector `h` along
//! `bj` is its scalar projection `h . bj`; an intervention moves every used
//! coordinate towards the opposite side of the subspace:
//!
//! ```text
//! h' = h - alpha * sum_j (h . bj) bj
//! ```
//!
//! `alpha = 1` zeroes the coordinates (ablation), `alpha = 2` negates them
//! (reflection). All arithmetic here is `f64`.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Largest norm defect accepted for a basis vector.
pub const UNIT_TOLERANCE: f64 = 1e-4;

const MAGIC: &[u8; 4] = b"NSUB";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NumberSubspace {
    dim: usize,
    basis: Vec<Vec<f64>>,
}

impl NumberSubspace {
    /// Builds a subspace from basis vectors. Vectors must share a dimension,
    /// be finite and have unit norm within [`UNIT_TOLERANCE`]; they are never
    /// renormalized here. Orthogonality is not enforced, use
    /// [`NumberSubspace::orthonormality_defect`] to check it.
    pub fn new(basis: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = basis.first() else {
            return Err(Error::InvalidArgument(
                "subspace needs at least one basis vector".into(),
            ));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("zero-dimensional basis vector".into()));
        }
        if basis.len() > dim {
            return Err(Error::InvalidArgument(format!(
                "{} basis vectors exceed dimension {dim}",
                basis.len()
            )));
        }
        for b in &basis {
            if b.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: b.len(),
                });
            }
            check_unit(b)?;
        }
        Ok(Self { dim, basis })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        &self.basis[j]
    }

    /// The subspace spanned by the first `k` basis vectors.
    pub fn prefix(&self, k: usize) -> Result<NumberSubspace> {
        if k == 0 || k > self.k() {
            return Err(Error::InvalidArgument(format!(
                "prefix length {k} outside 1..={}",
                self.k()
            )));
        }
        Ok(Self {
            dim: self.dim,
            basis: self.basis[..k].to_vec(),
        })
    }

    /// Coordinates of `h` along the first `k_used` basis vectors.
    pub fn coordinates(&self, h: &[f64], k_used: usize) -> Result<Vec<f64>> {
        self.check_k(k_used)?;
        if h.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: h.len(),
            });
        }
        Ok(self.basis[..k_used].iter().map(|b| dot(h, b)).collect())
    }

    pub fn orthonormality_defect(&self) -> f64 {
        orthonormality_defect(&self.basis)
    }

    fn check_k(&self, k_used: usize) -> Result<()> {
        if k_used == 0 || k_used > self.k() {
            return Err(Error::InvalidArgument(format!(
                "k_used {k_used} outside 1..={}",
                self.k()
            )));
        }
        Ok(())
    }

    /// Writes the `NSUB` binary format: magic, `u16` version, `u32` d,
    /// `u32` k, then k*d little-endian `f64` in basis order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.k() as u32).to_le_bytes())?;
        for b in &self.basis {
            for x in b {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad subspace magic {magic:?}")));
        }
        let version = read_u16(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported subspace version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let k = read_u32(&mut r)? as usize;
        let mut basis = Vec::with_capacity(k);
        for _ in 0..k {
            let mut b = Vec::with_capacity(dim);
            for _ in 0..dim {
                b.push(read_f64(&mut r)?);
            }
            basis.push(b);
        }
        Self::new(basis)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

pub(crate) fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_unit(b: &[f64]) -> Result<()> {
    if b.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("basis vector"));
    }
    let n = norm(b);
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NonUnitVector { norm: n });
    }
    Ok(())
}

/// The coordinate `h . b` of `h` along the unit vector `b`.
pub fn scalar_projection(h: &[f64], b: &[f64]) -> Result<f64> {
    if h.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: b.len(),
            found: h.len(),
        });
    }
    check_unit(b)?;
    Ok(dot(h, b))
}

/// Counterfactual intervention `h - alpha * sum_{j < k_used} (h . bj) bj`.
pub fn intervene(h: &[f64], s: &NumberSubspace, alpha: f64, k_used: usize) -> Result<Vec<f64>> {
    if h.len() != s.dim {
        return Err(Error::DimensionMismatch {
            expected: s.dim,
            found: h.len(),
        });
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be finite and >= 0, got {alpha}"
        )));
    }
    s.check_k(k_used)?;
    let mut out = h.to_vec();
    intervene_in_place(&mut out, s, alpha, k_used);
    Ok(out)
}

/// Unchecked in-place form of [`intervene`]; callers validate shapes.
pub(crate) fn intervene_in_place(h: &mut [f64], s: &NumberSubspace, alpha: f64, k_used: usize) {
    if alpha == 0.0 {
        return;
    }
    // Coordinates are taken from the original vector, not updated in turn.
    let coords: Vec<f64> = s.basis[..k_used].iter().map(|b| dot(h, b)).collect();
    for (b, lambda) in s.basis[..k_used].iter().zip(coords) {
        let scale = alpha * lambda;
        for (x, bi) in h.iter_mut().zip(b) {
            *x -= scale * bi;
        }
    }
}

/// `max |(B^T B - I)_ij|` over the Gram matrix of `basis`.
pub fn orthonormality_defect(basis: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (i, a) in basis.iter().enumerate() {
        for (j, b) in basis.iter().enumerate().skip(i) {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot(a, b) - target).abs());
        }
    }
    worst
}

/// Removes from `v` its components along the (orthonormal) `basis`, twice
/// over, and returns the remaining norm.
pub(crate) fn orthogonalize_against(v: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            for (x, bi) in v.iter_mut().zip(b) {
                *x -= c * bi;
            }
        }
    }
    norm(v)
}

/// A uniformly random `k`-dimensional subspace of R^d: `k` i.i.d.
/// standard-normal vectors orthonormalized in order.
pub fn random_subspace(d: usize, k: usize, seed: u64) -> Result<NumberSubspace> {
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("need 1 <= k <= d, got k={k}, d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = orthogonalize_against(&mut v, &basis);
        // A draw (numerically) inside the current span is redrawn.
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    NumberSubspace::new(basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_dot(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += a[i] * b[i];
        }
        acc
    }

    /// Classical Gram-Schmidt, kept independent of the library routines.
    fn gram_schmidt(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for v in vs {
            let mut u = v.clone();
            for e in &out {
                let c = naive_dot(v, e);
                for i in 0..u.len() {
                    u[i] -= c * e[i];
                }
            }
            let n = naive_dot(&u, &u).sqrt();
            out.push(u.iter().map(|x| x / n).collect());
        }
        out
    }

    /// Dense `(I - alpha B B^T) h` built from explicit outer products.
    fn matrix_oracle(h: &[f64], basis: &[Vec<f64>], alpha: f64) -> Vec<f64> {
        let d = h.len();
        let mut m = vec![vec![0.0; d]; d];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for b in basis {
            for i in 0..d {
                for j in 0..d {
                    m[i][j] -= alpha * b[i] * b[j];
                }
            }
        }
        m.iter().map(|row| naive_dot(row, h)).collect()
    }

    fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn scalar_projection_examples() {
        assert_eq!(scalar_projection(&[3.0, 4.0], &[1.0, 0.0]).unwrap(), 3.0);
        let b = [0.6, 0.8, 0.0];
        assert_eq!(scalar_projection(&[0.0; 3], &b).unwrap(), 0.0);
        let r = 1.0 / 3f64.sqrt();
        let h = [1.0, 1.0, 1.0];
        let got = scalar_projection(&h, &[r, r, r]).unwrap();
        assert!((got - naive_dot(&h, &[r, r, r])).abs() < 1e-15);
        assert!((got - 1.732_050_8).abs() < 1e-7);
    }

    #[test]
    fn scalar_projection_errors() {
        assert!(matches!(
            scalar_projection(&[1.0, 2.0, 3.0], &[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            scalar_projection(&[1.0, 2.0], &[1.0, 0.1]),
            Err(Error::NonUnitVector { .. })
        ));
        // within tolerance is accepted
        assert!(scalar_projection(&[1.0, 2.0], &[1.00005, 0.0]).is_ok());
    }

    #[test]
    fn intervene_examples() {
        let s = NumberSubspace::new(vec![vec![1.0, 0.0]]).unwrap();
        assert_eq!(intervene(&[3.0, 4.0], &s, 2.0, 1).unwrap(), vec![-3.0, 4.0]);
        assert_eq!(intervene(&[3.0, 4.0], &s, 1.0, 1).unwrap(), vec![0.0, 4.0]);
        assert!(matches!(
            intervene(&[3.0], &s, 1.0, 1),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(intervene(&[3.0, 4.0], &s, 1.0, 2).is_err());
        assert!(intervene(&[3.0, 4.0], &s, -1.0, 1).is_err());
    }

    #[test]
    fn intervene_matches_dense_oracle_d8_k3() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw: Vec<Vec<f64>> = (0..3).map(|_| gaussian(&mut rng, 8)).collect();
        let basis = gram_schmidt(&raw);
        let s = NumberSubspace::new(basis.clone()).unwrap();
        let h = gaussian(&mut rng, 8);
        let got = intervene(&h, &s, 5.0, 3).unwrap();
        let want = matrix_oracle(&h, &basis, 5.0);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_one_zeroes_alpha_two_negates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_subspace(16, 4, 9).unwrap();
        let h = gaussian(&mut rng, 16);
        let before = s.coordinates(&h, 4).unwrap();
        let ablated = intervene(&h, &s, 1.0, 4).unwrap();
        for c in s.coordinates(&ablated, 4).unwrap() {
            assert!(c.abs() < 1e-6);
        }
        let reflected = intervene(&h, &s, 2.0, 4).unwrap();
        for (c, b) in s.coordinates(&reflected, 4).unwrap().iter().zip(&before) {
            assert!((c + b).abs() < 1e-12);
        }
    }

    #[test]
    fn orthonormality_defect_examples() {
        let e1 = vec![1.0, 0.0, 0.0, 0.0];
        let e2 = vec![0.0, 1.0, 0.0, 0.0];
        assert_eq!(orthonormality_defect(&[e1, e2]), 0.0);
        let dup = NumberSubspace::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(dup.orthonormality_defect(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw: Vec<Vec<f64>> = (0..4).map(|_| gaussian(&mut rng, 16)).collect();
        let s = NumberSubspace::new(gram_schmidt(&raw)).unwrap();
        assert!(s.orthonormality_defect() <= 1e-6);
    }

    #[test]
    fn random_subspace_examples() {
        let full = random_subspace(8, 8, 1).unwrap();
        assert_eq!(full.k(), 8);
        assert!(full.orthonormality_defect() <= 1e-6);
        assert_eq!(random_subspace(32, 5, 77).unwrap(), random_subspace(32, 5, 77).unwrap());
        assert_ne!(random_subspace(32, 5, 77).unwrap(), random_subspace(32, 5, 78).unwrap());
        assert!(random_subspace(4, 5, 0).is_err());
        assert!(random_subspace(4, 0, 0).is_err());
    }

    #[test]
    fn random_subspace_removes_k_over_d_of_energy() {
        // Monte-Carlo oracle: E[removed fraction] = k/d = 8/768.
        let s = random_subspace(768, 8, 2024).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut retained = 0.0;
        let trials = 1000;
        for _ in 0..trials {
            let h = gaussian(&mut rng, 768);
            let a = intervene(&h, &s, 1.0, 8).unwrap();
            retained += naive_dot(&a, &a) / naive_dot(&h, &h);
        }
        let mean = retained / trials as f64;
        assert!(mean >= 0.98, "mean retained {mean}");
        assert!((mean - (1.0 - 8.0 / 768.0)).abs() < 2e-3, "mean retained {mean}");
    }

    #[test]
    fn nsub_roundtrip_and_layout() {
        let s = random_subspace(6, 2, 4).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"NSUB");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(u32::from_le_bytes(buf[6..10].try_into().unwrap()), 6);
        assert_eq!(u32::from_le_bytes(buf[10..14].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 14 + 2 * 6 * 8);
        let first = f64::from_le_bytes(buf[14..22].try_into().unwrap());
        assert_eq!(first, s.vector(0)[0]);
        assert_eq!(NumberSubspace::read_from(&buf[..]).unwrap(), s);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(NumberSubspace::read_from(&bad[..]), Err(Error::Format(_))));
        assert!(NumberSubspace::read_from(&buf[..20]).is_err());
    }

    #[test]
    fn non_unit_basis_rejected() {
        assert!(matches!(
            NumberSubspace::new(vec![vec![2.0, 0.0]]),
            Err(Error::NonUnitVector { .. })
        ));
        assert!(NumberSubspace::new(vec![]).is_err());
        assert!(NumberSubspace::new(vec![vec![1.0, 0.0], vec![0.0, 1.0, 0.0]]).is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, NumberSubspace, usize, f64)> {
        (2usize..=64, any::<u64>(), 0.0f64..6.0).prop_flat_map(|(d, seed, alpha)| {
            (1usize..=d.min(12)).prop_map(move |k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let h1 = gaussian(&mut rng, d);
                let h2 = gaussian(&mut rng, d);
                let s = random_subspace(d, k, seed ^ 0x5eed).unwrap();
                (h1, h2, s, k, alpha)
            })
        })
    }

    proptest! {
        #[test]
        fn reflection_is_an_involution((h, _h2, s, k, _a) in instance()) {
            let twice = intervene(&intervene(&h, &s, 2.0, k).unwrap(), &s, 2.0, k).unwrap();
            for (x, y) in twice.iter().zip(&h) {
                prop_assert!((x - y).abs() <= 1e-5);
            }
        }

        #[test]
        fn ablation_is_idempotent((h, _h2, s, k, _a) in instance()) {
            let once = intervene(&h, &s, 1.0, k).unwrap();
            let twice = intervene(&once, &s, 1.0, k).unwrap();
            for (x, y) in twice.iter().zip(&once) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn orthogonal_complement_untouched((h, v, s, k, alpha) in instance()) {
            let mut v = v;
            orthogonalize_against(&mut v, &s.basis()[..k]);
            let out = intervene(&h, &s, alpha, k).unwrap();
            prop_assert!((naive_dot(&v, &out) - naive_dot(&v, &h)).abs() <= 1e-6);
        }

        #[test]
        fn intervention_is_linear((h1, h2, s, k, alpha) in instance(), a in -3.0f64..3.0) {
            let combo: Vec<f64> = h1.iter().zip(&h2).map(|(x, y)| a * x + y).collect();
            let lhs = intervene(&combo, &s, alpha, k).unwrap();
            let r1 = intervene(&h1, &s, alpha, k).unwrap();
            let r2 = intervene(&h2, &s, alpha, k).unwrap();
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (a * r1[i] + r2[i])).abs() <= 1e-6);
            }
        }

        #[test]
        fn matches_dense_matrix_oracle((h, _h2, s, k, alpha) in instance()) {
            let got = intervene(&h, &s, alpha, k).unwrap();
            let want = matrix_oracle(&h, &s.basis()[..k], alpha);
            for (g, w) in got.iter().zip(&want) {
                prop_assert!((g - w).abs() <= 1e-6);
            }
        }
    }
}
