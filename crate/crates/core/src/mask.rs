//! Stochastic number generators and LFSR-derived connection masks.
//!
//! An SNG compares each LFSR state against a fixed threshold
//! `T = floor(d * 2^nb)`: the emitted bit is 1 iff `state < T`. Over one full
//! de Bruijn period every value in `0..2^nb` appears once, so exactly `T` ones
//! are emitted and the ones-density is `T / 2^nb`.
//!
//! A [`MaskMatrix`] column is the SNG stream of one register seeded with that
//! column's seed. Seeds are consecutive, starting from a base seed and
//! wrapping within `1..2^nb`, so the whole mask is regenerable from
//! `(SngConfig, base seed)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lfsr::{LfsrConfig, LfsrMode};
use crate::tensor::{Matrix, Scalar};

/// LFSR plus comparator threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SngConfig {
    lfsr: LfsrConfig,
    keep_density: f64,
    threshold: u32,
}

impl SngConfig {
    /// `keep_density` is the target fraction of ones, `1 - sparsity`.
    pub fn new(lfsr: LfsrConfig, keep_density: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&keep_density) {
            return Err(Error::InvalidConfig(format!(
                "keep density {keep_density} outside [0, 1]"
            )));
        }
        let threshold = (keep_density * lfsr.state_space() as f64).floor() as u32;
        Ok(SngConfig {
            lfsr,
            keep_density,
            threshold,
        })
    }

    /// Builds from a sparsity degree `p` (fraction of connections removed).
    pub fn from_sparsity(lfsr: LfsrConfig, sparsity: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&sparsity) {
            return Err(Error::InvalidConfig(format!(
                "sparsity {sparsity} outside [0, 1]"
            )));
        }
        Self::new(lfsr, 1.0 - sparsity)
    }

    /// Builds from an explicit threshold; the density is `T / 2^nb`.
    pub fn with_threshold(lfsr: LfsrConfig, threshold: u32) -> Result<Self> {
        if u64::from(threshold) > lfsr.state_space() {
            return Err(Error::InvalidConfig(format!(
                "threshold {threshold} exceeds 2^{}",
                lfsr.width()
            )));
        }
        Ok(SngConfig {
            lfsr,
            keep_density: f64::from(threshold) / lfsr.state_space() as f64,
            threshold,
        })
    }

    pub fn lfsr(&self) -> &LfsrConfig {
        &self.lfsr
    }

    pub fn keep_density(&self) -> f64 {
        self.keep_density
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.keep_density
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    /// Same comparator, register reseeded.
    pub fn reseeded(&self, seed: u32) -> Result<Self> {
        Ok(SngConfig {
            lfsr: self.lfsr.with_seed(seed)?,
            ..*self
        })
    }

    /// Endless bit stream from the configured seed.
    pub fn bits(&self) -> SngBits {
        SngBits {
            states: self.lfsr.states(),
            threshold: self.threshold,
        }
    }
}

/// Iterator of SNG output bits.
#[derive(Debug, Clone)]
pub struct SngBits {
    states: crate::lfsr::Lfsr,
    threshold: u32,
}

impl Iterator for SngBits {
    type Item = bool;

    #[inline]
    fn next(&mut self) -> Option<bool> {
        self.states.next().map(|s| s < self.threshold)
    }
}

/// First `length` bits of the SNG stream; wraps past the register period.
pub fn sng_stream(cfg: &SngConfig, length: usize) -> Result<Vec<bool>> {
    if length == 0 {
        return Err(Error::InvalidConfig("SNG stream length must be >= 1".into()));
    }
    Ok(cfg.bits().take(length).collect())
}

/// Seed for column `j` given a base seed: consecutive values in `1..2^nb`.
pub fn column_seed(base_seed: u32, j: usize, width: u8) -> u32 {
    let modulus = (1u64 << width) - 1;
    let offset = (u64::from(base_seed.max(1)) - 1 + j as u64) % modulus;
    (offset + 1) as u32
}

/// Smallest register width whose full period covers `n` rows (at least 2).
pub fn width_for_rows(n: usize) -> u8 {
    let mut w = 2u8;
    while (1usize << w) < n {
        w += 1;
    }
    w
}

/// Binary connection mask; `bits[i][j] = 1` keeps input `i` of output `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    /// Column-major.
    bits: Vec<bool>,
    column_seeds: Vec<u32>,
    base_seed: u32,
    sng: SngConfig,
    wrapped: bool,
}

impl MaskMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[j * self.rows + i]
    }

    pub fn column(&self, j: usize) -> &[bool] {
        &self.bits[j * self.rows..(j + 1) * self.rows]
    }

    pub fn column_seeds(&self) -> &[u32] {
        &self.column_seeds
    }

    pub fn base_seed(&self) -> u32 {
        self.base_seed
    }

    pub fn sng(&self) -> &SngConfig {
        &self.sng
    }

    /// Set when a maximal-mode register had to wrap to fill a column, in
    /// which case column popcounts may deviate from `T`.
    pub fn wrapped(&self) -> bool {
        self.wrapped
    }

    pub fn column_popcount(&self, j: usize) -> Result<usize> {
        if j >= self.cols {
            return Err(Error::IndexOutOfRange {
                index: j,
                len: self.cols,
            });
        }
        Ok(self.column(j).iter().filter(|&&b| b).count())
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Dense 0/1 matrix with the same shape as the weights.
    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            if self.get(i, j) {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Number of ones in column `j`.
pub fn mask_column_popcount(mask: &MaskMatrix, j: usize) -> Result<usize> {
    mask.column_popcount(j)
}

/// Generates an `n x m` mask, column `j` drawn from the register seeded with
/// [`column_seed`]`(base_seed, j)`.
pub fn generate_mask(n: usize, m: usize, sng: &SngConfig, base_seed: u32) -> Result<MaskMatrix> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidConfig(format!(
            "mask shape {n}x{m} must be at least 1x1"
        )));
    }
    if base_seed == 0 {
        return Err(Error::InvalidConfig("mask base seed must be nonzero".into()));
    }
    let lfsr = sng.lfsr();
    let period = lfsr.period();
    if lfsr.mode() == LfsrMode::DeBruijn && n as u64 > period {
        return Err(Error::InvalidConfig(format!(
            "{n} rows need an LFSR of at least {} bits in debruijn mode, got {}",
            width_for_rows(n),
            lfsr.width()
        )));
    }
    let column_seeds: Vec<u32> = (0..m).map(|j| column_seed(base_seed, j, lfsr.width())).collect();
    mask_from_seeds(n, sng, base_seed, column_seeds)
}

/// Rebuilds a mask from explicit per-column seeds.
pub fn mask_from_seeds(n: usize, sng: &SngConfig, base_seed: u32, column_seeds: Vec<u32>) -> Result<MaskMatrix> {
    if n == 0 || column_seeds.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "mask shape {n}x{} must be at least 1x1",
            column_seeds.len()
        )));
    }
    let mut bits = Vec::with_capacity(n * column_seeds.len());
    for &seed in &column_seeds {
        bits.extend(sng.reseeded(seed)?.bits().take(n));
    }
    Ok(MaskMatrix {
        rows: n,
        cols: column_seeds.len(),
        bits,
        column_seeds,
        base_seed,
        sng: *sng,
        wrapped: n as u64 > sng.lfsr().period(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sng(width: u8, mode: LfsrMode, d: f64) -> SngConfig {
        SngConfig::new(LfsrConfig::standard(width, 1, mode).unwrap(), d).unwrap()
    }

    #[test]
    fn zero_density_emits_no_ones() {
        let s = sng(6, LfsrMode::Maximal, 0.0);
        assert!(sng_stream(&s, 500).unwrap().iter().all(|b| !b));
    }

    #[test]
    fn unit_density_emits_all_ones() {
        let s = sng(5, LfsrMode::DeBruijn, 1.0);
        assert_eq!(s.threshold(), 32);
        assert!(sng_stream(&s, 32).unwrap().iter().all(|&b| b));
    }

    #[test]
    fn sixty_four_of_1024() {
        let s = sng(10, LfsrMode::DeBruijn, 0.0625);
        let ones = sng_stream(&s, 1024).unwrap().iter().filter(|&&b| b).count();
        assert_eq!(ones, 64);
    }

    #[test]
    fn empty_stream_rejected() {
        assert!(sng_stream(&sng(3, LfsrMode::DeBruijn, 0.5), 0).is_err());
    }

    #[test]
    fn stream_wraps_after_period() {
        let s = sng(4, LfsrMode::Maximal, 0.4);
        let bits = sng_stream(&s, 45).unwrap();
        assert_eq!(&bits[..15], &bits[15..30]);
        assert_eq!(&bits[..15], &bits[30..45]);
    }

    #[test]
    fn seven_by_two_example() {
        // Three-bit register, density 0.57 -> T = 4; base seed 4 gives the
        // first column [0,1,1,1,0,1,0] with four of seven connections kept.
        let s = sng(3, LfsrMode::DeBruijn, 0.57);
        assert_eq!(s.threshold(), 4);
        let mask = generate_mask(7, 2, &s, 4).unwrap();
        let col: Vec<u8> = mask.column(0).iter().map(|&b| b as u8).collect();
        assert_eq!(col, vec![0, 1, 1, 1, 0, 1, 0]);
        assert_eq!(mask.column_popcount(0).unwrap(), 4);
        assert_eq!(mask.column_seeds(), &[4, 5]);
        assert!(!mask.wrapped());
    }

    #[test]
    fn popcount_edges() {
        let zero = generate_mask(9, 3, &sng(4, LfsrMode::DeBruijn, 0.0), 1).unwrap();
        assert_eq!(mask_column_popcount(&zero, 2).unwrap(), 0);
        assert!(matches!(
            mask_column_popcount(&zero, 3),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
        let sparse = generate_mask(1024, 2, &sng(10, LfsrMode::DeBruijn, 0.0625), 9).unwrap();
        assert_eq!(mask_column_popcount(&sparse, 0).unwrap(), 64);
        assert_eq!(mask_column_popcount(&sparse, 1).unwrap(), 64);
    }

    #[test]
    fn full_density_mask_is_all_ones() {
        let mask = generate_mask(100, 7, &sng(7, LfsrMode::DeBruijn, 1.0), 3).unwrap();
        assert_eq!(mask.kept(), 700);
    }

    #[test]
    fn half_density_columns_exact() {
        let mask = generate_mask(1024, 4, &sng(10, LfsrMode::DeBruijn, 0.5), 1).unwrap();
        for j in 0..4 {
            assert_eq!(mask.column_popcount(j).unwrap(), 512);
        }
    }

    #[test]
    fn short_register_rejected_in_debruijn_mode() {
        assert!(generate_mask(9, 1, &sng(3, LfsrMode::DeBruijn, 0.5), 1).is_err());
        let wrapped = generate_mask(9, 1, &sng(3, LfsrMode::Maximal, 0.5), 1).unwrap();
        assert!(wrapped.wrapped());
    }

    #[test]
    fn seeds_wrap_and_stay_nonzero() {
        assert_eq!(column_seed(7, 0, 3), 7);
        assert_eq!(column_seed(7, 1, 3), 1);
        assert_eq!(column_seed(1000, 0, 3), 1000 % 7);
        assert_eq!(width_for_rows(784), 10);
        assert_eq!(width_for_rows(1024), 10);
        assert_eq!(width_for_rows(7), 3);
        assert_eq!(width_for_rows(1), 2);
    }

    proptest! {
        #[test]
        fn deterministic_and_seeds_distinct(n in 1usize..200, m in 1usize..60, d in 0.0f64..=1.0, base in 1u32..5000) {
            let s = sng(width_for_rows(n).max(6), LfsrMode::DeBruijn, d);
            let a = generate_mask(n, m, &s, base).unwrap();
            let b = generate_mask(n, m, &s, base).unwrap();
            prop_assert_eq!(&a, &b);
            let mut seeds = a.column_seeds().to_vec();
            seeds.sort_unstable();
            seeds.dedup();
            prop_assert_eq!(seeds.len(), m);
        }

        #[test]
        fn maximal_density_bound(width in 3u8..=12, d in 0.0f64..=1.0, seed in 1u32..4096) {
            let lfsr = LfsrConfig::standard(width, 1 + seed % ((1 << width) - 1), LfsrMode::Maximal).unwrap();
            let s = SngConfig::new(lfsr, d).unwrap();
            let len = (1usize << width) - 1;
            let ones = sng_stream(&s, len).unwrap().iter().filter(|&&b| b).count();
            let density = ones as f64 / len as f64;
            prop_assert!((density - d).abs() <= 2.0 / len as f64);
        }
    }
}
