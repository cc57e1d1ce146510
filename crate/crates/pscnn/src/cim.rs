//! Functional model of the 1 Mb SRAM compute-in-memory macro.
//!
//! The array is 1024 wordlines by 1024 bitlines with 128 sense amplifiers
//! behind a column mux. A sense activates a window of wordlines with the
//! line-buffer bits and compares accumulated bitline currents; currents are
//! modeled as integer unit-cell counts (an activated cell storing 1
//! contributes exactly 1).
//!
//! Two weight mappings are supported:
//!
//! * **TWM** (ternary): a weight occupies a pair of adjacent bitlines,
//!   `+1 -> (1,0)`, `-1 -> (0,1)`, `0 -> (0,0)`; the SA compares the pair's
//!   currents directly. 512 pairs, four 128-pair sense groups. The cell
//!   pattern `(1,1)` is reserved and rejected at programming time.
//! * **BWM** (binary): one cell per weight against an ideal midpoint
//!   reference of half the active-input count. 1024 bitlines, eight
//!   128-bitline sense groups.
//!
//! For the same weights and inputs the TWM current difference is exactly
//! twice the BWM difference, which is the whole point of the mapping: the
//! doubled sensing margin buys immunity to SA offset variation.

use crate::bits::BitRow;
use rand::prelude::*;
use rand_distr::StandardNormal;
use thiserror::Error;

pub const WORDLINES: usize = 1024;
pub const BITLINES: usize = 1024;
pub const SA_COUNT: usize = 128;
pub const TWM_PAIRS: usize = BITLINES / 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MappingMode {
    Twm,
    Bwm,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CimError {
    #[error("row range overflow: base {row_base} + {count} rows exceeds {WORDLINES}")]
    RowRange { row_base: usize, count: usize },
    #[error("wordline window overflow: base {wl_base} + {wl_count} exceeds {WORDLINES}")]
    WordlineRange { wl_base: usize, wl_count: usize },
    #[error("reserved (1,1) cell pattern at row {row}, pair {pair}")]
    InvalidTwmPair { row: usize, pair: usize },
    #[error("sense group {group} out of range (array has {max} mux groups)")]
    GroupRange { group: usize, max: usize },
    #[error("sense index {index} out of range ({max} available)")]
    SenseIndexRange { index: usize, max: usize },
    #[error("weight image is {got} bytes, expected {expected}")]
    ImageSize { got: usize, expected: usize },
}

/// A ternary weight value and its two-cell encoding on a bitline pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TernaryWeight {
    Plus,
    Zero,
    Minus,
}

impl TernaryWeight {
    pub fn value(self) -> i8 {
        match self {
            TernaryWeight::Plus => 1,
            TernaryWeight::Zero => 0,
            TernaryWeight::Minus => -1,
        }
    }

    pub fn from_value(v: i8) -> Option<Self> {
        match v {
            1 => Some(TernaryWeight::Plus),
            0 => Some(TernaryWeight::Zero),
            -1 => Some(TernaryWeight::Minus),
            _ => None,
        }
    }

    /// Cells on the (positive, negative) bitlines of the pair.
    pub fn cells(self) -> (bool, bool) {
        match self {
            TernaryWeight::Plus => (true, false),
            TernaryWeight::Minus => (false, true),
            TernaryWeight::Zero => (false, false),
        }
    }

    /// `None` for the reserved `(1,1)` pattern.
    pub fn from_cells(pos: bool, neg: bool) -> Option<Self> {
        match (pos, neg) {
            (true, false) => Some(TernaryWeight::Plus),
            (false, true) => Some(TernaryWeight::Minus),
            (false, false) => Some(TernaryWeight::Zero),
            (true, true) => None,
        }
    }
}

/// Sense-amplifier offset model: a Gaussian input-referred offset in
/// unit-cell-current units, drawn per SA per sense event. `sigma_sa == 0`
/// makes every decision fully deterministic (no RNG state is consumed).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct VariationParams {
    pub sigma_sa: f64,
    pub seed: u64,
}

impl VariationParams {
    pub fn ideal() -> Self {
        VariationParams {
            sigma_sa: 0.0,
            seed: 0,
        }
    }

    /// Offsets for all 128 SAs at one sense event. Streams are derived from
    /// `(seed, event)`, so identical runs are bit-identical regardless of
    /// how events interleave.
    pub fn offsets(&self, event: u64) -> Option<[f64; SA_COUNT]> {
        if self.sigma_sa == 0.0 {
            return None;
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(self.seed, event));
        let mut out = [0.0; SA_COUNT];
        for o in out.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *o = n * self.sigma_sa;
        }
        Some(out)
    }
}

/// Derives an independent stream seed from a base seed and an index.
pub(crate) fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined value.
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The SA decision: output 1 exactly when the (possibly noisy) current
/// difference is non-negative. `diff_x2` is twice the difference so BWM's
/// half-unit references stay exact integers.
#[inline]
pub fn sa_decide(diff_x2: i64, noise: f64) -> bool {
    if noise == 0.0 {
        diff_x2 >= 0
    } else {
        diff_x2 as f64 / 2.0 + noise >= 0.0
    }
}

/// The cell array. Cells are stored bitline-major (one 1024-bit column per
/// bitline) because every sense accumulates down columns.
#[derive(Clone)]
pub struct CimArray {
    mode: MappingMode,
    cols: Vec<BitRow>,
}

impl CimArray {
    pub fn new(mode: MappingMode) -> Self {
        CimArray {
            mode,
            cols: vec![BitRow::zero(); BITLINES],
        }
    }

    pub fn mapping_mode(&self) -> MappingMode {
        self.mode
    }

    /// Sense groups behind the column mux: four 128-pair groups under TWM,
    /// eight 128-bitline groups under BWM.
    pub fn mux_groups(&self) -> usize {
        match self.mode {
            MappingMode::Twm => 4,
            MappingMode::Bwm => 8,
        }
    }

    /// Replaces rows `[row_base, row_base + rows.len())`, leaving all other
    /// rows untouched. Under TWM every written row must respect the
    /// no-`(1,1)`-pair rule.
    pub fn program_rows(&mut self, row_base: usize, rows: &[BitRow]) -> Result<(), CimError> {
        if row_base + rows.len() > WORDLINES {
            return Err(CimError::RowRange {
                row_base,
                count: rows.len(),
            });
        }
        if self.mode == MappingMode::Twm {
            for (i, row) in rows.iter().enumerate() {
                for pair in 0..TWM_PAIRS {
                    if row.get(2 * pair) && row.get(2 * pair + 1) {
                        return Err(CimError::InvalidTwmPair {
                            row: row_base + i,
                            pair,
                        });
                    }
                }
            }
        }
        for (i, row) in rows.iter().enumerate() {
            let r = row_base + i;
            for b in 0..BITLINES {
                self.cols[b].set(r, row.get(b));
            }
        }
        Ok(())
    }

    /// Reads one row back as a wordline image.
    pub fn row(&self, r: usize) -> BitRow {
        let mut out = BitRow::zero();
        for b in 0..BITLINES {
            out.set(b, self.cols[b].get(r));
        }
        out
    }

    fn check_window(&self, wl_base: usize, wl_count: usize) -> Result<(), CimError> {
        if wl_count == 0 || wl_base + wl_count > WORDLINES {
            return Err(CimError::WordlineRange { wl_base, wl_count });
        }
        Ok(())
    }

    /// Twice the signed current difference seen by the SA for one pair
    /// (TWM) or one bitline (BWM), inputs `x` restricted to the active
    /// wordline window.
    fn diff_x2(&self, x: &BitRow, lo: usize, hi: usize, index: usize) -> i64 {
        match self.mode {
            MappingMode::Twm => {
                let pos = x.and_popcount_range(&self.cols[2 * index], lo, hi) as i64;
                let neg = x.and_popcount_range(&self.cols[2 * index + 1], lo, hi) as i64;
                2 * (pos - neg)
            }
            MappingMode::Bwm => {
                let bl = x.and_popcount_range(&self.cols[index], lo, hi) as i64;
                let active = x.popcount_range(lo, hi) as i64;
                // I_BL - I_Ref with I_Ref = active/2, kept as 2*(I_BL - I_Ref).
                2 * bl - active
            }
        }
    }

    /// One sense cycle: activates wordlines `[wl_base, wl_base + wl_count)`
    /// with the line-buffer bits `x` and binarizes the selected sense
    /// group's 128 current differences. Bit `s` of the result is SA `s`
    /// (TWM: pair `128*col_group + s`; BWM: bitline `128*col_group + s`).
    pub fn mac_cycle(
        &self,
        x: &BitRow,
        wl_base: usize,
        wl_count: usize,
        col_group: usize,
        noise: Option<&[f64; SA_COUNT]>,
    ) -> Result<u128, CimError> {
        self.check_window(wl_base, wl_count)?;
        if col_group >= self.mux_groups() {
            return Err(CimError::GroupRange {
                group: col_group,
                max: self.mux_groups(),
            });
        }
        let (lo, hi) = (wl_base, wl_base + wl_count);
        let mut out = 0u128;
        for s in 0..SA_COUNT {
            let diff = self.diff_x2(x, lo, hi, col_group * SA_COUNT + s);
            let n = noise.map_or(0.0, |n| n[s]);
            if sa_decide(diff, n) {
                out |= 1 << s;
            }
        }
        Ok(out)
    }

    /// Absolute sensing margin, in unit cell currents, of one pair (TWM) or
    /// one bitline (BWM). BWM margins can be half-integral; the value is
    /// exact (a multiple of 0.5).
    pub fn sensing_margin(
        &self,
        x: &BitRow,
        wl_base: usize,
        wl_count: usize,
        index: usize,
    ) -> Result<f64, CimError> {
        Ok(self.sensing_margin_x2(x, wl_base, wl_count, index)? as f64 / 2.0)
    }

    /// Twice the absolute sensing margin, always an exact integer.
    pub fn sensing_margin_x2(
        &self,
        x: &BitRow,
        wl_base: usize,
        wl_count: usize,
        index: usize,
    ) -> Result<u64, CimError> {
        self.check_window(wl_base, wl_count)?;
        let max = match self.mode {
            MappingMode::Twm => TWM_PAIRS,
            MappingMode::Bwm => BITLINES,
        };
        if index >= max {
            return Err(CimError::SenseIndexRange { index, max });
        }
        Ok(self
            .diff_x2(x, wl_base, wl_base + wl_count, index)
            .unsigned_abs())
    }

    /// Serializes all 1024 rows in the weight-image layout: row-major,
    /// 8 cells per byte, most-significant bit = lowest bitline. 128 KiB.
    pub fn to_image_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(WORDLINES * 128);
        for r in 0..WORDLINES {
            out.extend_from_slice(&self.row(r).to_bytes_msb());
        }
        out
    }

    /// Loads a full 128 KiB weight image, validating TWM pair patterns.
    pub fn load_image_bytes(&mut self, bytes: &[u8]) -> Result<(), CimError> {
        let rows = rows_from_image(bytes, WORDLINES)?;
        self.program_rows(0, &rows)
    }
}

/// Packs row images in the on-disk layout (128 bytes per row).
pub fn rows_to_image(rows: &[BitRow]) -> Vec<u8> {
    let mut out = Vec::with_capacity(rows.len() * 128);
    for row in rows {
        out.extend_from_slice(&row.to_bytes_msb());
    }
    out
}

pub fn rows_from_image(bytes: &[u8], expected_rows: usize) -> Result<Vec<BitRow>, CimError> {
    if bytes.len() != expected_rows * 128 {
        return Err(CimError::ImageSize {
            got: bytes.len(),
            expected: expected_rows * 128,
        });
    }
    Ok(bytes
        .chunks_exact(128)
        .map(|c| BitRow::from_bytes_msb(c.try_into().unwrap()))
        .collect())
}

/// Monte Carlo comparison of TWM and BWM decision error rates under SA
/// offset variation.
pub mod mc {
    use super::*;

    #[derive(Debug, Clone, Copy)]
    pub struct MarginMcConfig {
        /// Active wordlines per trial (weights and inputs are drawn fresh
        /// for each trial over this many rows).
        pub active_rows: usize,
        pub trials: u64,
        pub seed: u64,
    }

    impl Default for MarginMcConfig {
        fn default() -> Self {
            MarginMcConfig {
                active_rows: 64,
                trials: 10_000,
                seed: 0,
            }
        }
    }

    #[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
    pub struct SigmaErrorRates {
        pub sigma: f64,
        pub twm_rate: f64,
        pub bwm_rate: f64,
    }

    /// For each sigma, the fraction of trials where the noisy SA decision
    /// differs from the ideal sign decision, for both mappings on identical
    /// weight/input streams.
    ///
    /// Each trial draws binary weights, binary inputs and a single unit
    /// normal that is scaled by sigma and shared between the two mappings.
    /// Sharing the draw couples the comparison: the TWM margin is exactly
    /// twice the BWM margin on the same trial, so `twm_rate <= bwm_rate`
    /// holds trial-by-trial, and scaling one draw across the sigma grid
    /// makes both rates monotone in sigma trial-by-trial as well.
    pub fn monte_carlo_error_rate(
        cfg: &MarginMcConfig,
        sigma_grid: &[f64],
    ) -> Vec<SigmaErrorRates> {
        assert!(cfg.trials >= 1, "at least one trial required");
        assert!(
            (1..=WORDLINES).contains(&cfg.active_rows),
            "active_rows must be in 1..=1024"
        );
        let mut twm_errors = vec![0u64; sigma_grid.len()];
        let mut bwm_errors = vec![0u64; sigma_grid.len()];
        for trial in 0..cfg.trials {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, trial));
            let mut diff = 0i64; // P - N over active inputs
            for _ in 0..cfg.active_rows {
                let weight_plus: bool = rng.gen();
                let x: bool = rng.gen();
                if x {
                    diff += if weight_plus { 1 } else { -1 };
                }
            }
            let unit: f64 = rng.sample(StandardNormal);
            let ideal = diff >= 0;
            for (i, &sigma) in sigma_grid.iter().enumerate() {
                let noise = sigma * unit;
                if sa_decide(2 * diff, noise) != ideal {
                    twm_errors[i] += 1;
                }
                if sa_decide(diff, noise) != ideal {
                    bwm_errors[i] += 1;
                }
            }
        }
        sigma_grid
            .iter()
            .enumerate()
            .map(|(i, &sigma)| SigmaErrorRates {
                sigma,
                twm_rate: twm_errors[i] as f64 / cfg.trials as f64,
                bwm_rate: bwm_errors[i] as f64 / cfg.trials as f64,
            })
            .collect()
    }
}
