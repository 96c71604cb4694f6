//! Fibonacci linear-feedback shift registers.
//!
//! The register shifts left on every step. The feedback bit is the parity of
//! the tapped bits and enters at the least significant position:
//!
//! ```text
//! next = ((state << 1) | parity(state & taps)) & (2^nb - 1)
//! ```
//!
//! Tap `k` (1-based, `1 <= k <= nb`) selects bit `k - 1`, so tap `nb` is always
//! present. With a primitive feedback polynomial the register walks through
//! all `2^nb - 1` nonzero states before repeating.
//!
//! [`LfsrMode::DeBruijn`] additionally splices the all-zero state into the
//! cycle between `2^(nb-1)` and `1` (the state that would otherwise follow it),
//! giving a period of exactly `2^nb`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest and largest register widths accepted.
pub const MIN_WIDTH: u8 = 2;
pub const MAX_WIDTH: u8 = 31;

/// Maximal-length taps for widths 2 through 24 (Xilinx XAPP052 polynomials).
const STANDARD_TAPS: [&[u8]; 23] = [
    &[2, 1],
    &[3, 2],
    &[4, 3],
    &[5, 3],
    &[6, 5],
    &[7, 6],
    &[8, 6, 5, 4],
    &[9, 5],
    &[10, 7],
    &[11, 9],
    &[12, 6, 4, 1],
    &[13, 4, 3, 1],
    &[14, 5, 3, 1],
    &[15, 14],
    &[16, 15, 13, 4],
    &[17, 14],
    &[18, 11],
    &[19, 6, 2, 1],
    &[20, 17],
    &[21, 19],
    &[22, 21],
    &[23, 18],
    &[24, 23, 22, 17],
];

/// Widths covered by the shipped taps table.
pub fn standard_widths() -> std::ops::RangeInclusive<u8> {
    2..=24
}

/// Shipped taps for `width`, if the table covers it.
pub fn standard_taps(width: u8) -> Option<&'static [u8]> {
    STANDARD_TAPS.get(usize::from(width).checked_sub(2)?).copied()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LfsrMode {
    /// Period `2^nb - 1`; the zero state is illegal.
    Maximal,
    /// Period `2^nb`; the zero state is inserted once per cycle.
    DeBruijn,
}

impl LfsrMode {
    pub fn name(self) -> &'static str {
        match self {
            LfsrMode::Maximal => "maximal",
            LfsrMode::DeBruijn => "debruijn",
        }
    }

    pub(crate) fn to_byte(self) -> u8 {
        match self {
            LfsrMode::Maximal => 0,
            LfsrMode::DeBruijn => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(LfsrMode::Maximal),
            1 => Some(LfsrMode::DeBruijn),
            _ => None,
        }
    }
}

impl std::str::FromStr for LfsrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maximal" => Ok(LfsrMode::Maximal),
            "debruijn" => Ok(LfsrMode::DeBruijn),
            other => Err(Error::InvalidConfig(format!("unknown LFSR mode `{other}`"))),
        }
    }
}

/// Register width, feedback taps, seed and period mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LfsrConfig {
    width: u8,
    taps: u32,
    seed: u32,
    mode: LfsrMode,
}

impl LfsrConfig {
    /// Builds a register from the shipped taps table.
    pub fn standard(width: u8, seed: u32, mode: LfsrMode) -> Result<Self> {
        let taps = standard_taps(width).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "no shipped taps for width {width} (table covers 2..=24)"
            ))
        })?;
        Self::new(width, taps, seed, mode)
    }

    /// Builds a register with explicit 1-based tap positions.
    ///
    /// Rejects taps whose feedback polynomial is not primitive, i.e. whose
    /// state sequence would not have maximal period.
    pub fn new(width: u8, taps: &[u8], seed: u32, mode: LfsrMode) -> Result<Self> {
        let mut mask = 0u32;
        for &t in taps {
            if t == 0 || t > width {
                return Err(Error::InvalidConfig(format!(
                    "tap {t} outside 1..={width}"
                )));
            }
            mask |= 1 << (t - 1);
        }
        Self::from_taps_mask(width, mask, seed, mode)
    }

    /// Same as [`LfsrConfig::new`], with taps given as a bitmask (bit `k-1` = tap `k`).
    pub fn from_taps_mask(width: u8, taps: u32, seed: u32, mode: LfsrMode) -> Result<Self> {
        if !(MIN_WIDTH..=MAX_WIDTH).contains(&width) {
            return Err(Error::InvalidConfig(format!(
                "LFSR width {width} outside {MIN_WIDTH}..={MAX_WIDTH}"
            )));
        }
        let full = full_mask(width);
        if taps & !full != 0 {
            return Err(Error::InvalidConfig(format!(
                "taps mask {taps:#x} has bits above width {width}"
            )));
        }
        if !is_maximal(width, taps) {
            return Err(Error::InvalidConfig(format!(
                "taps {:?} do not give a maximal-period {width}-bit LFSR",
                taps_from_mask(taps)
            )));
        }
        if seed == 0 || seed > full {
            return Err(Error::InvalidConfig(format!(
                "seed {seed} outside 1..={full}"
            )));
        }
        Ok(LfsrConfig {
            width,
            taps,
            seed,
            mode,
        })
    }

    /// Same register, different seed.
    pub fn with_seed(self, seed: u32) -> Result<Self> {
        if seed == 0 || seed > full_mask(self.width) {
            return Err(Error::InvalidConfig(format!(
                "seed {seed} outside 1..={}",
                full_mask(self.width)
            )));
        }
        Ok(LfsrConfig { seed, ..self })
    }

    pub fn width(&self) -> u8 {
        self.width
    }

    pub fn taps_mask(&self) -> u32 {
        self.taps
    }

    pub fn taps(&self) -> Vec<u8> {
        taps_from_mask(self.taps)
    }

    pub fn seed(&self) -> u32 {
        self.seed
    }

    pub fn mode(&self) -> LfsrMode {
        self.mode
    }

    /// Number of distinct register values, `2^nb`.
    pub fn state_space(&self) -> u64 {
        1u64 << self.width
    }

    /// Cycle length in the configured mode.
    pub fn period(&self) -> u64 {
        match self.mode {
            LfsrMode::Maximal => self.state_space() - 1,
            LfsrMode::DeBruijn => self.state_space(),
        }
    }

    /// Iterator over the state sequence, starting with the seed itself.
    pub fn states(&self) -> Lfsr {
        Lfsr {
            cfg: *self,
            state: self.seed,
        }
    }

    #[inline]
    fn step(&self, state: u32) -> u32 {
        if self.mode == LfsrMode::DeBruijn {
            if state == 1 << (self.width - 1) {
                return 0;
            }
            if state == 0 {
                return 1;
            }
        }
        let feedback = (state & self.taps).count_ones() & 1;
        ((state << 1) | feedback) & full_mask(self.width)
    }
}

/// Successor of `state` under `cfg`'s feedback rule.
pub fn lfsr_next(state: u32, cfg: &LfsrConfig) -> Result<u32> {
    let zero_illegal = cfg.mode == LfsrMode::Maximal && state == 0;
    if zero_illegal || state > full_mask(cfg.width) {
        return Err(Error::InvalidState {
            state,
            width: cfg.width,
            mode: cfg.mode.name(),
        });
    }
    Ok(cfg.step(state))
}

/// Endless state iterator; the first item is the seed.
#[derive(Debug, Clone)]
pub struct Lfsr {
    cfg: LfsrConfig,
    state: u32,
}

impl Lfsr {
    pub fn state(&self) -> u32 {
        self.state
    }
}

impl Iterator for Lfsr {
    type Item = u32;

    #[inline]
    fn next(&mut self) -> Option<u32> {
        let current = self.state;
        self.state = self.cfg.step(current);
        Some(current)
    }
}

#[inline]
pub(crate) fn full_mask(width: u8) -> u32 {
    ((1u64 << width) - 1) as u32
}

fn taps_from_mask(mask: u32) -> Vec<u8> {
    let mut taps: Vec<u8> = (0..32u8).filter(|b| mask >> b & 1 == 1).map(|b| b + 1).collect();
    taps.reverse();
    taps
}

/// Whether the Fibonacci register with these taps has period `2^width - 1`.
///
/// The register obeys `a_t = sum_{k in taps} a_{t-k}`, whose characteristic
/// polynomial is `x^n + sum_{k in taps} x^(n-k)`. The period is maximal iff
/// that polynomial is primitive, i.e. `x` has multiplicative order exactly
/// `2^n - 1` modulo it.
pub fn is_maximal(width: u8, taps: u32) -> bool {
    let n = u32::from(width);
    if !(MIN_WIDTH..=MAX_WIDTH).contains(&width) || taps >> (n - 1) & 1 == 0 {
        return false;
    }
    let mut poly: u64 = 1 << n;
    for k in 1..=n {
        if taps >> (k - 1) & 1 == 1 {
            poly |= 1 << (n - k);
        }
    }
    let order = (1u64 << n) - 1;
    if gf2_pow_x(order, poly, n) != 1 {
        return false;
    }
    prime_factors(order)
        .into_iter()
        .all(|q| gf2_pow_x(order / q, poly, n) != 1)
}

fn gf2_mulmod(a: u64, b: u64, poly: u64, n: u32) -> u64 {
    let mut r = 0u64;
    for bit in (0..n).rev() {
        r <<= 1;
        if r >> n & 1 == 1 {
            r ^= poly;
        }
        if b >> bit & 1 == 1 {
            r ^= a;
        }
    }
    r
}

fn gf2_pow_x(mut e: u64, poly: u64, n: u32) -> u64 {
    let mut base = 2u64; // x
    let mut acc = 1u64;
    while e > 0 {
        if e & 1 == 1 {
            acc = gf2_mulmod(acc, base, poly, n);
        }
        base = gf2_mulmod(base, base, poly, n);
        e >>= 1;
    }
    acc
}

fn prime_factors(mut v: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut p = 2u64;
    while p * p <= v {
        if v % p == 0 {
            out.push(p);
            while v % p == 0 {
                v /= p;
            }
        }
        p += 1;
    }
    if v > 1 {
        out.push(v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Orbit from the seed until it returns, by plain iteration.
    fn orbit(cfg: &LfsrConfig) -> Vec<u32> {
        let mut seen = vec![cfg.seed()];
        let mut s = lfsr_next(cfg.seed(), cfg).unwrap();
        while s != cfg.seed() {
            seen.push(s);
            assert!(seen.len() as u64 <= cfg.state_space(), "no return to seed");
            s = lfsr_next(s, cfg).unwrap();
        }
        seen
    }

    #[test]
    fn three_bit_orbit_from_seed_one() {
        let cfg = LfsrConfig::new(3, &[3, 2], 1, LfsrMode::Maximal).unwrap();
        // Enumerated by hand: 1 -> 2 -> 5 -> 3 -> 7 -> 6 -> 4 -> 1.
        assert_eq!(orbit(&cfg), vec![1, 2, 5, 3, 7, 6, 4]);
    }

    #[test]
    fn three_bit_period_seven_from_every_seed() {
        for seed in 1..8 {
            let cfg = LfsrConfig::new(3, &[3, 2], seed, LfsrMode::Maximal).unwrap();
            assert_eq!(orbit(&cfg).len(), 7);
        }
    }

    #[test]
    fn debruijn_three_bit_visits_all_eight_states() {
        let cfg = LfsrConfig::new(3, &[3, 2], 1, LfsrMode::DeBruijn).unwrap();
        let o = orbit(&cfg);
        assert_eq!(o, vec![1, 2, 5, 3, 7, 6, 4, 0]);
        let mut sorted = o.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn zero_state_rejected_in_maximal_mode() {
        let cfg = LfsrConfig::standard(5, 1, LfsrMode::Maximal).unwrap();
        assert!(matches!(lfsr_next(0, &cfg), Err(Error::InvalidState { .. })));
        let db = LfsrConfig::standard(5, 1, LfsrMode::DeBruijn).unwrap();
        assert_eq!(lfsr_next(0, &db).unwrap(), 1);
        assert!(lfsr_next(32, &db).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(LfsrConfig::new(3, &[3, 2], 0, LfsrMode::Maximal).is_err());
        assert!(LfsrConfig::new(3, &[3, 2], 8, LfsrMode::Maximal).is_err());
        // x^4 + x^2 + 1 = (x^2 + x + 1)^2 is not primitive.
        assert!(LfsrConfig::new(4, &[4, 2], 1, LfsrMode::Maximal).is_err());
        assert!(LfsrConfig::new(4, &[3, 2], 1, LfsrMode::Maximal).is_err());
        assert!(LfsrConfig::new(4, &[5, 4], 1, LfsrMode::Maximal).is_err());
        assert!(LfsrConfig::standard(25, 1, LfsrMode::Maximal).is_err());
        assert!(LfsrConfig::standard(1, 1, LfsrMode::Maximal).is_err());
    }

    #[test]
    fn primitivity_test_agrees_with_enumeration() {
        // Every tap set for widths 2..=8, checked both ways.
        for width in 2u8..=8 {
            let top = 1u32 << (width - 1);
            for low in 0..top {
                let taps = top | low;
                let algebraic = is_maximal(width, taps);
                let cfg = LfsrConfig {
                    width,
                    taps,
                    seed: 1,
                    mode: LfsrMode::Maximal,
                };
                let mut s = cfg.step(1);
                let mut steps = 1u64;
                while s != 1 && steps <= cfg.state_space() {
                    s = cfg.step(s);
                    steps += 1;
                }
                let enumerated = s == 1 && steps == cfg.state_space() - 1;
                assert_eq!(algebraic, enumerated, "width {width} taps {taps:#b}");
            }
        }
    }

    #[test]
    fn taps_roundtrip_through_mask() {
        let cfg = LfsrConfig::standard(16, 77, LfsrMode::DeBruijn).unwrap();
        assert_eq!(cfg.taps(), vec![16, 15, 13, 4]);
        let again = LfsrConfig::from_taps_mask(16, cfg.taps_mask(), 77, LfsrMode::DeBruijn).unwrap();
        assert_eq!(again, cfg);
    }
}
