//! Deterministic power-of-two fixed-point arithmetic.
//!
//! A value is stored as a signed integer `raw` together with a precision
//! scale factor `psf`; the represented real number is `raw / 2^psf`. Every
//! rounding step is round-half-to-even and dot products accumulate in 128-bit
//! integers with a single rescale at the end, so results are bit-identical
//! across platforms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest supported precision scale factor.
pub const MIN_PSF: u8 = 4;
/// Largest supported precision scale factor.
pub const MAX_PSF: u8 = 24;
/// Exclusive bound on `|raw|`.
pub const RAW_LIMIT: i64 = 1 << 62;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FixedError {
    #[error("value out of fixed-point range: {0}")]
    Range(String),
    #[error("precision scale factor {0} outside [{MIN_PSF}, {MAX_PSF}]")]
    InvalidPsf(u8),
    #[error("precision scale factor mismatch: {0} vs {1}")]
    PsfMismatch(u8, u8),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed canonical encoding: {0}")]
    Encoding(String),
}

pub type Result<T> = std::result::Result<T, FixedError>;

fn check_psf(psf: u8) -> Result<()> {
    if (MIN_PSF..=MAX_PSF).contains(&psf) {
        Ok(())
    } else {
        Err(FixedError::InvalidPsf(psf))
    }
}

fn check_raw(v: i128) -> Result<i64> {
    if v.unsigned_abs() < RAW_LIMIT as u128 {
        Ok(v as i64)
    } else {
        Err(FixedError::Range(format!("raw value {v} exceeds 2^62")))
    }
}

/// `round_half_even(v / 2^shift)` on integers.
pub fn round_shift(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    let floor = v >> shift;
    let rem = v - (floor << shift);
    let half = 1i128 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// `round_half_even(num / den)` for a positive denominator.
pub fn round_div(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    let twice = 2 * r;
    if twice > den || (twice == den && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedScalar {
    raw: i64,
    psf: u8,
}

impl FixedScalar {
    pub fn from_raw(raw: i64, psf: u8) -> Result<Self> {
        check_psf(psf)?;
        check_raw(raw as i128)?;
        Ok(Self { raw, psf })
    }

    pub fn zero(psf: u8) -> Result<Self> {
        Self::from_raw(0, psf)
    }

    pub fn one(psf: u8) -> Result<Self> {
        Self::from_raw(1 << psf, psf)
    }

    pub fn raw(&self) -> i64 {
        self.raw
    }

    pub fn psf(&self) -> u8 {
        self.psf
    }

    fn same_psf(&self, other: &Self) -> Result<u8> {
        if self.psf == other.psf {
            Ok(self.psf)
        } else {
            Err(FixedError::PsfMismatch(self.psf, other.psf))
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let psf = self.same_psf(other)?;
        Ok(Self { raw: check_raw(self.raw as i128 + other.raw as i128)?, psf })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let psf = self.same_psf(other)?;
        Ok(Self { raw: check_raw(self.raw as i128 - other.raw as i128)?, psf })
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        let psf = self.same_psf(other)?;
        let prod = self.raw as i128 * other.raw as i128;
        Ok(Self { raw: check_raw(round_shift(prod, psf as u32))?, psf })
    }

    /// `1 / self^2`, used to recover singular values from their inverse square roots.
    pub fn inv_square(&self) -> Result<Self> {
        if self.raw == 0 {
            return Err(FixedError::Range("inverse of zero".into()));
        }
        let sq = self.raw as i128 * self.raw as i128;
        let num = 1i128 << (3 * self.psf as u32);
        Ok(Self { raw: check_raw(round_div(num, sq))?, psf: self.psf })
    }
}

impl PartialOrd for FixedScalar {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        (self.psf == other.psf).then(|| self.raw.cmp(&other.raw))
    }
}

/// Quantize a real number: `raw = round_half_even(x * 2^psf)`.
pub fn quantize(x: f64, psf: u8) -> Result<FixedScalar> {
    check_psf(psf)?;
    if !x.is_finite() {
        return Err(FixedError::Range(format!("non-finite input {x}")));
    }
    let scaled = x * (1u64 << psf) as f64;
    if scaled.abs() >= RAW_LIMIT as f64 {
        return Err(FixedError::Range(format!("{x} at psf {psf} exceeds 2^62")));
    }
    Ok(FixedScalar { raw: scaled.round_ties_even() as i64, psf })
}

pub fn dequantize(f: FixedScalar) -> f64 {
    f.raw as f64 / (1u64 << f.psf) as f64
}

/// Row-major tensor of fixed-point values sharing one scale factor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedTensor {
    shape: Vec<usize>,
    data: Vec<i64>,
    psf: u8,
}

impl FixedTensor {
    pub fn from_raw(shape: Vec<usize>, data: Vec<i64>, psf: u8) -> Result<Self> {
        check_psf(psf)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(FixedError::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        for &r in &data {
            check_raw(r as i128)?;
        }
        Ok(Self { shape, data, psf })
    }

    pub fn zeros(shape: Vec<usize>, psf: u8) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_raw(shape, vec![0; n], psf)
    }

    pub fn identity(n: usize, psf: u8) -> Result<Self> {
        let mut t = Self::zeros(vec![n, n], psf)?;
        for i in 0..n {
            t.data[i * n + i] = 1 << psf;
        }
        Ok(t)
    }

    pub fn quantize_slice(shape: Vec<usize>, values: &[f64], psf: u8) -> Result<Self> {
        let data = values
            .iter()
            .map(|&v| quantize(v, psf).map(|q| q.raw))
            .collect::<Result<Vec<_>>>()?;
        Self::from_raw(shape, data, psf)
    }

    pub fn quantize_vector(v: &nalgebra::DVector<f64>, psf: u8) -> Result<Self> {
        Self::quantize_slice(vec![v.len()], v.as_slice(), psf)
    }

    pub fn quantize_matrix(m: &nalgebra::DMatrix<f64>, psf: u8) -> Result<Self> {
        let (r, c) = m.shape();
        let mut values = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                values.push(m[(i, j)]);
            }
        }
        Self::quantize_slice(vec![r, c], &values, psf)
    }

    pub fn to_vector(&self) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_iterator(self.data.len(), self.values())
    }

    pub fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        let (r, c) = self.dims2();
        nalgebra::DMatrix::from_row_iterator(r, c, self.values())
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        let scale = (1u64 << self.psf) as f64;
        self.data.iter().map(move |&r| r as f64 / scale)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn raw(&self) -> &[i64] {
        &self.data
    }

    pub fn psf(&self) -> u8 {
        self.psf
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, idx: usize) -> FixedScalar {
        FixedScalar { raw: self.data[idx], psf: self.psf }
    }

    pub fn at(&self, i: usize, j: usize) -> FixedScalar {
        let (_, c) = self.dims2();
        self.get(i * c + j)
    }

    /// Treat a vector as a column and a 2-d tensor as itself.
    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            _ => (self.data.len(), 1),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2();
        let mut data = vec![0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self { shape: vec![c, r], data, psf: self.psf }
    }

    /// Elementwise map on raw values, used for small in-kernel nonlinearities.
    pub fn map_raw(&self, f: impl Fn(i64) -> Result<i64>) -> Result<Self> {
        let data = self.data.iter().map(|&r| f(r)).collect::<Result<Vec<_>>>()?;
        Self::from_raw(self.shape.clone(), data, self.psf)
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::from_raw(shape, self.data.clone(), self.psf)
    }

    /// Canonical byte encoding: psf (1 byte), rank (u32 LE), dims (u32 LE
    /// each), then raw values (i64 LE each).
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 * self.shape.len() + 8 * self.data.len());
        out.push(self.psf);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &r in &self.data {
            out.extend_from_slice(&r.to_le_bytes());
        }
        out
    }

    /// Parse a canonical encoding, returning the tensor and the bytes consumed.
    pub fn from_canonical_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let err = |m: &str| FixedError::Encoding(m.to_string());
        let psf = *bytes.first().ok_or_else(|| err("empty input"))?;
        let read_u32 = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| err("truncated header"))
        };
        let rank = read_u32(1)? as usize;
        if rank > 8 {
            return Err(err("rank too large"));
        }
        let mut shape = Vec::with_capacity(rank);
        for k in 0..rank {
            shape.push(read_u32(5 + 4 * k)? as usize);
        }
        let mut at = 5 + 4 * rank;
        let n: usize = shape.iter().product();
        let end = at
            .checked_add(n.checked_mul(8).ok_or_else(|| err("size overflow"))?)
            .ok_or_else(|| err("size overflow"))?;
        if bytes.len() < end {
            return Err(err("truncated data"));
        }
        let mut data = Vec::with_capacity(n);
        while at < end {
            data.push(i64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
            at += 8;
        }
        Ok((Self::from_raw(shape, data, psf)?, end))
    }

    fn same_layout(&self, other: &Self) -> Result<()> {
        if self.psf != other.psf {
            return Err(FixedError::PsfMismatch(self.psf, other.psf));
        }
        if self.shape != other.shape {
            return Err(FixedError::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}

fn zip_raw(a: &FixedTensor, b: &FixedTensor, f: impl Fn(i128, i128) -> i128) -> Result<FixedTensor> {
    a.same_layout(b)?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| check_raw(f(x as i128, y as i128)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FixedTensor { shape: a.shape.clone(), data, psf: a.psf })
}

pub fn fx_add(a: &FixedTensor, b: &FixedTensor) -> Result<FixedTensor> {
    zip_raw(a, b, |x, y| x + y)
}

pub fn fx_sub(a: &FixedTensor, b: &FixedTensor) -> Result<FixedTensor> {
    zip_raw(a, b, |x, y| x - y)
}

/// Elementwise product with one rounding per element.
pub fn fx_hadamard(a: &FixedTensor, b: &FixedTensor) -> Result<FixedTensor> {
    let psf = a.psf as u32;
    zip_raw(a, b, |x, y| round_shift(x * y, psf))
}

/// Symmetrize a square matrix: `(M + Mᵀ) / 2`, rounded half-to-even.
pub fn fx_symmetrize(a: &FixedTensor) -> Result<FixedTensor> {
    let t = a.transpose();
    zip_raw(a, &t, |x, y| round_shift(x + y, 1))
}

/// Matrix product. Vectors are treated as columns; the output of
/// `matrix × vector` is a vector.
pub fn fx_matmul(a: &FixedTensor, b: &FixedTensor) -> Result<FixedTensor> {
    if a.psf != b.psf {
        return Err(FixedError::PsfMismatch(a.psf, b.psf));
    }
    let (n, k) = a.dims2();
    let (k2, p) = b.dims2();
    if k != k2 {
        return Err(FixedError::Shape(format!(
            "inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let shift = a.psf as u32;
    let mut data = Vec::with_capacity(n * p);
    for i in 0..n {
        for j in 0..p {
            let mut acc: i128 = 0;
            for t in 0..k {
                let prod = a.data[i * k + t] as i128 * b.data[t * p + j] as i128;
                acc = acc
                    .checked_add(prod)
                    .ok_or_else(|| FixedError::Range("128-bit accumulator overflow".into()))?;
            }
            data.push(check_raw(round_shift(acc, shift))?);
        }
    }
    let shape = if b.shape.len() == 1 { vec![n] } else { vec![n, p] };
    Ok(FixedTensor { shape, data, psf: a.psf })
}

/// Squared Frobenius norm with a single rescale after 128-bit accumulation.
pub fn fx_frob_sq(a: &FixedTensor) -> Result<FixedScalar> {
    let mut acc: i128 = 0;
    for &r in &a.data {
        acc = acc
            .checked_add(r as i128 * r as i128)
            .ok_or_else(|| FixedError::Range("128-bit accumulator overflow".into()))?;
    }
    Ok(FixedScalar { raw: check_raw(round_shift(acc, a.psf as u32))?, psf: a.psf })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: Vec<usize>, v: &[f64], psf: u8) -> FixedTensor {
        FixedTensor::quantize_slice(shape, v, psf).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(1.5, 8).unwrap().raw(), 384);
        assert_eq!(quantize(0.0, 13).unwrap().raw(), 0);
        assert_eq!(quantize(-0.25, 10).unwrap().raw(), -256);
        // ties go to even
        assert_eq!(quantize(0.5 / 256.0, 8).unwrap().raw(), 0);
        assert_eq!(quantize(1.5 / 256.0, 8).unwrap().raw(), 2);
        assert_eq!(quantize(-1.5 / 256.0, 8).unwrap().raw(), -2);
    }

    #[test]
    fn quantize_rejects_overflow_and_bad_psf() {
        assert!(matches!(quantize(1e30, 8), Err(FixedError::Range(_))));
        assert!(matches!(quantize(f64::NAN, 8), Err(FixedError::Range(_))));
        assert!(matches!(quantize(1.0, 3), Err(FixedError::InvalidPsf(3))));
        assert!(matches!(quantize(1.0, 25), Err(FixedError::InvalidPsf(25))));
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize(FixedScalar::from_raw(384, 8).unwrap()), 1.5);
        assert_eq!(dequantize(FixedScalar::from_raw(0, 8).unwrap()), 0.0);
        assert_eq!(dequantize(FixedScalar::from_raw(1, 8).unwrap()), 0.00390625);
    }

    #[test]
    fn round_shift_ties_even() {
        assert_eq!(round_shift(3, 1), 2); // 1.5 -> 2
        assert_eq!(round_shift(5, 1), 2); // 2.5 -> 2
        assert_eq!(round_shift(-3, 1), -2);
        assert_eq!(round_shift(-5, 1), -2);
        assert_eq!(round_shift(7, 2), 2); // 1.75
        assert_eq!(round_div(7, 2), 4);
        assert_eq!(round_div(5, 2), 2);
        assert_eq!(round_div(-5, 2), -2);
    }

    #[test]
    fn matmul_examples() {
        let m = t(vec![2, 2], &[1.25, -3.0, 0.5, 7.75], 8);
        let i = FixedTensor::identity(2, 8).unwrap();
        assert_eq!(fx_matmul(&i, &m).unwrap(), m);
        let one = t(vec![1, 1], &[1.0], 8);
        assert_eq!(fx_matmul(&one, &one).unwrap().raw(), &[256]);
        let a = t(vec![1, 1], &[1.5], 8);
        assert_eq!(fx_matmul(&a, &a).unwrap().raw(), &[576]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = t(vec![2, 3], &[0.0; 6], 8);
        let b = t(vec![2, 2], &[0.0; 4], 8);
        assert!(matches!(fx_matmul(&a, &b), Err(FixedError::Shape(_))));
        let c = t(vec![3, 1], &[0.0; 3], 10);
        assert!(matches!(fx_matmul(&a, &c), Err(FixedError::PsfMismatch(8, 10))));
    }

    #[test]
    fn matmul_overflow_is_range_error() {
        let big = FixedTensor::from_raw(vec![1, 2], vec![(1 << 61) + 5, (1 << 61) + 5], 4).unwrap();
        let col = big.transpose();
        assert!(matches!(fx_matmul(&big, &col), Err(FixedError::Range(_))));
    }

    #[test]
    fn add_sub_examples() {
        let a = t(vec![3], &[1.0, -2.5, 0.125], 8);
        let z = FixedTensor::zeros(vec![3], 8).unwrap();
        assert_eq!(fx_add(&a, &z).unwrap(), a);
        assert_eq!(fx_sub(&a, &a).unwrap(), z);
        let x = FixedTensor::from_raw(vec![1], vec![384], 8).unwrap();
        let y = FixedTensor::from_raw(vec![1], vec![128], 8).unwrap();
        assert_eq!(fx_add(&x, &y).unwrap().raw(), &[512]);
        let w = t(vec![2], &[1.0, 1.0], 8);
        assert!(fx_add(&a, &w).is_err());
    }

    #[test]
    fn frob_sq_examples() {
        assert_eq!(fx_frob_sq(&FixedTensor::zeros(vec![2, 2], 8).unwrap()).unwrap().raw(), 0);
        assert_eq!(dequantize(fx_frob_sq(&t(vec![2], &[1.0, 1.0], 8)).unwrap()), 2.0);
        assert_eq!(dequantize(fx_frob_sq(&t(vec![1], &[1.5], 8)).unwrap()), 2.25);
    }

    #[test]
    fn inv_square_recovers_singular_value() {
        let s = quantize(0.5, 12).unwrap();
        assert_eq!(dequantize(s.inv_square().unwrap()), 4.0);
        assert!(FixedScalar::zero(12).unwrap().inv_square().is_err());
    }

    #[test]
    fn canonical_encoding_layout() {
        let a = FixedTensor::from_raw(vec![2], vec![1, -1], 8).unwrap();
        let b = a.canonical_bytes();
        assert_eq!(b[0], 8);
        assert_eq!(&b[1..5], &1u32.to_le_bytes());
        assert_eq!(&b[5..9], &2u32.to_le_bytes());
        assert_eq!(&b[9..17], &1i64.to_le_bytes());
        assert_eq!(&b[17..25], &(-1i64).to_le_bytes());
        assert!(FixedTensor::from_canonical_bytes(&b[..20]).is_err());
    }

    #[test]
    fn symmetrize_and_transpose() {
        let a = FixedTensor::from_raw(vec![2, 3], vec![1, 2, 3, 4, 5, 6], 8).unwrap();
        let tt = a.transpose();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.raw(), &[1, 4, 2, 5, 3, 6]);
        let s = FixedTensor::from_raw(vec![2, 2], vec![10, 3, 5, 10], 8).unwrap();
        assert_eq!(fx_symmetrize(&s).unwrap().raw(), &[10, 4, 4, 10]);
    }

    fn matrix_strategy(n: usize, k: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, n * k)
    }

    proptest! {
        #[test]
        fn round_trip_on_grid(raw in -(1i64 << 40)..(1i64 << 40), psf in 4u8..=24) {
            let x = dequantize(FixedScalar::from_raw(raw, psf).unwrap());
            prop_assert_eq!(quantize(x, psf).unwrap().raw(), raw);
        }

        #[test]
        fn quantize_error_within_half_ulp(x in -1e6f64..1e6, psf in 4u8..=24) {
            let q = quantize(x, psf).unwrap();
            prop_assert!((dequantize(q) - x).abs() <= 0.5 / (1u64 << psf) as f64);
        }

        #[test]
        fn canonical_round_trip(data in proptest::collection::vec(-(1i64 << 50)..(1i64 << 50), 1..20), psf in 4u8..=24) {
            let n = data.len();
            let a = FixedTensor::from_raw(vec![n], data, psf).unwrap();
            let (b, used) = FixedTensor::from_canonical_bytes(&a.canonical_bytes()).unwrap();
            prop_assert_eq!(used, a.canonical_bytes().len());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn matmul_error_bound(n in 1usize..5, k in 1usize..5, p in 1usize..5,
                              seed_a in matrix_strategy(4, 4), seed_b in matrix_strategy(4, 4),
                              psf in prop::sample::select(vec![8u8, 10, 12])) {
            let af: Vec<f64> = seed_a[..n * k].to_vec();
            let bf: Vec<f64> = seed_b[..k * p].to_vec();
            let a = t(vec![n, k], &af, psf);
            let b = t(vec![k, p], &bf, psf);
            let c = fx_matmul(&a, &b).unwrap();
            let ulp = 1.0 / (1u64 << psf) as f64;
            // measured against the float product of the grid-valued operands
            let ad = a.to_matrix();
            let bd = b.to_matrix();
            let exact = &ad * &bd;
            for i in 0..n {
                for j in 0..p {
                    let got = dequantize(c.at(i, j));
                    prop_assert!((got - exact[(i, j)]).abs() <= k as f64 * ulp + 0.5 * ulp);
                }
            }
        }
    }

    #[test]
    fn matmul_is_deterministic() {
        use sha2::{Digest, Sha256};
        let a = t(vec![3, 3], &[0.1, -2.3, 4.7, 1.1, 0.0, -9.9, 3.3, 2.2, 1.0], 12);
        let hashes: Vec<_> = (0..3)
            .map(|_| Sha256::digest(fx_matmul(&a, &a).unwrap().canonical_bytes()).to_vec())
            .collect();
        assert!(hashes.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn higher_psf_is_not_less_accurate() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let af: Vec<f64> = (0..16).map(|_| rng.random_range(-10.0..10.0)).collect();
        let bf: Vec<f64> = (0..16).map(|_| rng.random_range(-10.0..10.0)).collect();
        let exact = nalgebra::DMatrix::from_row_slice(4, 4, &af) * nalgebra::DMatrix::from_row_slice(4, 4, &bf);
        let err = |psf| {
            let c = fx_matmul(&t(vec![4, 4], &af, psf), &t(vec![4, 4], &bf, psf)).unwrap().to_matrix();
            (c - &exact).abs().max()
        };
        assert!(err(12) <= err(8));
    }
}
