//! Orthonormal Haar discrete wavelet transform.
//!
//! One analysis step maps adjacent pairs `(a, b)` to
//! `((a + b)/√2, (a − b)/√2)`. The step matrix is orthogonal, so synthesis
//! is both its inverse and its transpose; the tape reuses synthesis as the
//! backward pass of [`crate::tensor::Tape::dwt_level`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Splits `x` into (approximation, detail) halves.
pub fn haar_analysis_step<T: Scalar>(x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if x.len() < 2 || !x.len().is_multiple_of(2) {
        return Err(Error::Length(format!(
            "haar analysis needs an even length of at least 2, got {}",
            x.len()
        )));
    }
    let s = T::FRAC_1_SQRT_2();
    Ok(x.chunks_exact(2)
        .map(|p| ((p[0] + p[1]) * s, (p[0] - p[1]) * s))
        .unzip())
}

/// Inverse of [`haar_analysis_step`].
pub fn haar_synthesis_step<T: Scalar>(approx: &[T], detail: &[T]) -> Result<Vec<T>> {
    if approx.len() != detail.len() {
        return Err(Error::Length(format!(
            "haar synthesis needs equal lengths, got {} and {}",
            approx.len(),
            detail.len()
        )));
    }
    let s = T::FRAC_1_SQRT_2();
    let mut out = Vec::with_capacity(2 * approx.len());
    for (&a, &d) in approx.iter().zip(detail) {
        out.push((a + d) * s);
        out.push((a - d) * s);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level<T> {
    pub approx: Vec<T>,
    pub detail: Vec<T>,
}

/// `N` levels of Haar coefficients of one signal; level `n` (1-based) has
/// vectors of length `source_length / 2ⁿ`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid<T> {
    levels: Vec<Level<T>>,
    source_length: usize,
}

impl<T: Scalar> WaveletPyramid<T> {
    pub fn levels(&self) -> &[Level<T>] {
        &self.levels
    }

    /// Coefficients at 1-based `level`.
    pub fn level(&self, level: usize) -> Option<&Level<T>> {
        level.checked_sub(1).and_then(|i| self.levels.get(i))
    }

    pub fn source_length(&self) -> usize {
        self.source_length
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Inverts the pyramid from the deepest approximation and every detail.
    pub fn reconstruct(&self) -> Result<Vec<T>> {
        let Some(last) = self.levels.last() else {
            return Err(Error::Length("empty pyramid".into()));
        };
        let mut approx = last.approx.clone();
        for level in self.levels.iter().rev() {
            approx = haar_synthesis_step(&approx, &level.detail)?;
        }
        Ok(approx)
    }

    /// `Σₙ‖detailₙ‖² + ‖approx_N‖²`.
    pub fn energy(&self) -> T {
        let sq = |v: &[T]| v.iter().map(|&x| x * x).sum::<T>();
        let details: T = self.levels.iter().map(|l| sq(&l.detail)).sum();
        details + self.levels.last().map_or(T::zero(), |l| sq(&l.approx))
    }
}

fn check_dyadic(len: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::Length("wavelet depth must be at least 1".into()));
    }
    if levels >= usize::BITS as usize || len == 0 || !len.is_multiple_of(1usize << levels) {
        return Err(Error::Length(format!(
            "signal length {len} is not divisible by 2^{levels}"
        )));
    }
    Ok(())
}

/// Decomposes `x` into `levels` Haar levels, each from the previous
/// level's approximation.
pub fn build_pyramid<T: Scalar>(x: &[T], levels: usize) -> Result<WaveletPyramid<T>> {
    check_dyadic(x.len(), levels)?;
    let mut out = Vec::with_capacity(levels);
    let mut current = x.to_vec();
    for _ in 0..levels {
        let (approx, detail) = haar_analysis_step(&current)?;
        current = approx.clone();
        out.push(Level { approx, detail });
    }
    Ok(WaveletPyramid {
        levels: out,
        source_length: x.len(),
    })
}

/// Level-`level` coefficients for each of `batch` signals of length `len`
/// stored back to back; output rows are `[approx, detail]` per signal.
pub(crate) fn level_coefficients<T: Scalar>(
    x: &[T],
    batch: usize,
    len: usize,
    level: usize,
) -> Result<Vec<T>> {
    check_dyadic(len, level)?;
    let mut out = Vec::with_capacity(2 * batch * (len >> level));
    for signal in x.chunks_exact(len).take(batch) {
        let mut approx = signal.to_vec();
        let mut detail = Vec::new();
        for _ in 0..level {
            (approx, detail) = haar_analysis_step(&approx)?;
        }
        out.extend(approx);
        out.extend(detail);
    }
    Ok(out)
}

/// Transpose of [`level_coefficients`]: maps a `(batch, 2, len/2^level)`
/// cotangent back to `(batch, 1, len)`.
pub(crate) fn level_coefficients_adjoint<T: Scalar>(
    g: &[T],
    batch: usize,
    len: usize,
    level: usize,
) -> Result<Vec<T>> {
    check_dyadic(len, level)?;
    let n = len >> level;
    let mut out = Vec::with_capacity(batch * len);
    for chunk in g.chunks_exact(2 * n).take(batch) {
        let mut up = haar_synthesis_step(&chunk[..n], &chunk[n..])?;
        while up.len() < len {
            let zeros = vec![T::zero(); up.len()];
            up = haar_synthesis_step(&up, &zeros)?;
        }
        out.extend(up);
    }
    Ok(out)
}
