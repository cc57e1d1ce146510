//! Fixed-width bit vectors used throughout the simulator.
//!
//! `BitRow` is a 1024-bit vector. It serves as a macro wordline image (one
//! row of cells across all 1024 bitlines), as a column image (one bitline
//! across all 1024 wordlines), and as the line-buffer contents. Feature-map
//! words are plain `u128`: bit `c` of a word is channel `c` of that word's
//! channel group.

/// Number of bitlines / wordlines in the macro, and the line-buffer width.
pub const ROW_BITS: usize = 1024;

const WORDS: usize = ROW_BITS / 64;

/// A 1024-bit vector, bit 0 first.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct BitRow(pub [u64; WORDS]);

impl Default for BitRow {
    fn default() -> Self {
        BitRow([0; WORDS])
    }
}

impl std::fmt::Debug for BitRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BitRow[")?;
        for w in self.0.iter().rev() {
            write!(f, "{w:016x}")?;
        }
        write!(f, "]")
    }
}

impl BitRow {
    pub const fn zero() -> Self {
        BitRow([0; WORDS])
    }

    #[inline]
    pub fn get(&self, bit: usize) -> bool {
        debug_assert!(bit < ROW_BITS);
        self.0[bit >> 6] >> (bit & 63) & 1 != 0
    }

    #[inline]
    pub fn set(&mut self, bit: usize, value: bool) {
        debug_assert!(bit < ROW_BITS);
        let mask = 1u64 << (bit & 63);
        if value {
            self.0[bit >> 6] |= mask;
        } else {
            self.0[bit >> 6] &= !mask;
        }
    }

    pub fn count_ones(&self) -> u32 {
        self.0.iter().map(|w| w.count_ones()).sum()
    }

    /// Popcount of `self & other` restricted to bit positions `[lo, hi)`.
    ///
    /// This is the inner loop of every sense: `self` is the wordline
    /// activation vector, `other` a bitline column image.
    #[inline]
    pub fn and_popcount_range(&self, other: &BitRow, lo: usize, hi: usize) -> u32 {
        debug_assert!(lo <= hi && hi <= ROW_BITS);
        if lo == hi {
            return 0;
        }
        let (wlo, whi) = (lo >> 6, (hi - 1) >> 6);
        let mut total = 0u32;
        for w in wlo..=whi {
            let mut v = self.0[w] & other.0[w];
            if w == wlo {
                v &= !0u64 << (lo & 63);
            }
            if w == whi && hi & 63 != 0 {
                v &= !0u64 >> (64 - (hi & 63));
            }
            total += v.count_ones();
        }
        total
    }

    /// Popcount of `self` restricted to `[lo, hi)`.
    pub fn popcount_range(&self, lo: usize, hi: usize) -> u32 {
        const ONES: BitRow = BitRow([!0u64; WORDS]);
        self.and_popcount_range(&ONES, lo, hi)
    }

    /// Packs the row into 128 bytes, most-significant bit of each byte =
    /// lowest bit index. This is the on-disk image layout.
    pub fn to_bytes_msb(&self) -> [u8; 128] {
        let mut out = [0u8; 128];
        for (i, byte) in out.iter_mut().enumerate() {
            for k in 0..8 {
                if self.get(i * 8 + k) {
                    *byte |= 0x80 >> k;
                }
            }
        }
        out
    }

    pub fn from_bytes_msb(bytes: &[u8; 128]) -> Self {
        let mut row = BitRow::zero();
        for (i, byte) in bytes.iter().enumerate() {
            for k in 0..8 {
                if byte & (0x80 >> k) != 0 {
                    row.set(i * 8 + k, true);
                }
            }
        }
        row
    }
}

/// Mask selecting the valid channels of word-group `group` for a layer with
/// `channels` output channels. Channels beyond `channels` are forced to zero
/// on the write path so feature words are always zero-padded.
pub fn group_channel_mask(channels: usize, group: usize) -> u128 {
    let lo = group * 128;
    if channels <= lo {
        return 0;
    }
    let n = (channels - lo).min(128);
    if n == 128 {
        !0u128
    } else {
        (1u128 << n) - 1
    }
}

/// Words needed to hold `channels` channels at one spatial position.
pub fn words_per_position(channels: usize) -> usize {
    channels.div_ceil(128)
}
