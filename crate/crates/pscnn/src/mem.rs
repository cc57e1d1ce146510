//! Feature SRAM, weight SRAM and the line buffer.
//!
//! The feature store is four 64 Kb single-port banks (512 words of 128 bits
//! each). For one layer two banks carry the input and output feature maps
//! (ping-pong), and banks referenced by neither side are power-gated. A
//! feature map larger than one bank may spill into the next bank when the
//! pointer's span flag is set.
//!
//! Port discipline is checked, not serialized: a second access to a bank in
//! the same cycle, or any access to a gated bank, is a hard simulation
//! error carrying the cycle number.

use crate::bits::BitRow;
use thiserror::Error;

pub const BANKS: usize = 4;
pub const BANK_WORDS: usize = 512;
pub const WSRAM_ROWS: usize = 512;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemError {
    #[error("access to powered-off bank {bank} at cycle {cycle}")]
    PoweredOff { bank: usize, cycle: u64 },
    #[error("single-port conflict on bank {bank} at cycle {cycle}")]
    PortConflict { bank: usize, cycle: u64 },
    #[error("word {word} out of range for bank {bank} (512 words per bank)")]
    WordRange { bank: usize, word: usize },
    #[error("bank index {0} out of range")]
    BankRange(usize),
    #[error("pointer configuration maps IFM and OFM onto the same bank {bank}")]
    BankOverlap { bank: usize },
    #[error("cursor ran past bank {bank} at cycle {cycle} (span flag not set or no next bank)")]
    CursorOverflow { bank: usize, cycle: u64 },
    #[error("{which} cursor used before any pointer instruction")]
    CursorUnset { which: &'static str },
    #[error("weight SRAM fetch {row}+{count} exceeds {WSRAM_ROWS} rows")]
    WsramRange { row: usize, count: usize },
    #[error("preload of {count} words at bank {bank} word {word} exceeds the array")]
    PreloadRange {
        bank: usize,
        word: usize,
        count: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Power {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct BankCounters {
    pub reads: u64,
    pub writes: u64,
    pub gated_cycles: u64,
}

/// A (bank, word) position that advances word by word and may spill into
/// the next bank once, when its span flag allows it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cursor {
    pub bank: usize,
    pub word: usize,
    pub span: bool,
}

impl Cursor {
    /// Rolls a just-past-the-end cursor into the next bank (or fails) and
    /// returns the position to access. Overflow is only an error when an
    /// access actually lands past the allocation, not when the final
    /// advance leaves the cursor at the boundary.
    fn resolve(&mut self, cycle: u64) -> Result<(usize, usize), MemError> {
        if self.word == BANK_WORDS {
            if !self.span || self.bank + 1 >= BANKS {
                return Err(MemError::CursorOverflow {
                    bank: self.bank,
                    cycle,
                });
            }
            self.bank += 1;
            self.word = 0;
            self.span = false; // one spill only
        }
        Ok((self.bank, self.word))
    }
}

pub struct FeatureSram {
    banks: Vec<Vec<u128>>,
    power: [Power; BANKS],
    busy_at: [Option<u64>; BANKS],
    counters: [BankCounters; BANKS],
    ifm: Option<Cursor>,
    ofm: Option<Cursor>,
}

impl Default for FeatureSram {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureSram {
    pub fn new() -> Self {
        FeatureSram {
            banks: vec![vec![0u128; BANK_WORDS]; BANKS],
            power: [Power::On; BANKS],
            busy_at: [None; BANKS],
            counters: [BankCounters::default(); BANKS],
            ifm: None,
            ofm: None,
        }
    }

    pub fn power(&self, bank: usize) -> Power {
        self.power[bank]
    }

    pub fn counters(&self) -> &[BankCounters; BANKS] {
        &self.counters
    }

    pub fn ifm_cursor(&self) -> Option<Cursor> {
        self.ifm
    }

    pub fn ofm_cursor(&self) -> Option<Cursor> {
        self.ofm
    }

    /// Applies a pointer instruction: sets both cursors, powers the banks
    /// referenced by either side on and every other bank off. The IFM and
    /// OFM allocations must not share a bank; interleaved reads and writes
    /// on a single port cannot be sustained.
    pub fn apply_pointer(&mut self, ifm: Cursor, ofm: Cursor) -> Result<(), MemError> {
        for c in [&ifm, &ofm] {
            if c.bank >= BANKS {
                return Err(MemError::BankRange(c.bank));
            }
            if c.word >= BANK_WORDS {
                return Err(MemError::WordRange {
                    bank: c.bank,
                    word: c.word,
                });
            }
            if c.span && c.bank + 1 >= BANKS {
                return Err(MemError::BankRange(c.bank + 1));
            }
        }
        let set_of = |c: &Cursor| -> u8 {
            let mut s = 1u8 << c.bank;
            if c.span {
                s |= 1 << (c.bank + 1);
            }
            s
        };
        let (iset, oset) = (set_of(&ifm), set_of(&ofm));
        if iset & oset != 0 {
            let bank = (iset & oset).trailing_zeros() as usize;
            return Err(MemError::BankOverlap { bank });
        }
        for b in 0..BANKS {
            self.power[b] = if (iset | oset) & (1 << b) != 0 {
                Power::On
            } else {
                Power::Off
            };
        }
        self.ifm = Some(ifm);
        self.ofm = Some(ofm);
        Ok(())
    }

    fn check_access(&mut self, bank: usize, word: usize, cycle: u64) -> Result<(), MemError> {
        if bank >= BANKS {
            return Err(MemError::BankRange(bank));
        }
        if word >= BANK_WORDS {
            return Err(MemError::WordRange { bank, word });
        }
        if self.power[bank] == Power::Off {
            return Err(MemError::PoweredOff { bank, cycle });
        }
        if self.busy_at[bank] == Some(cycle) {
            return Err(MemError::PortConflict { bank, cycle });
        }
        self.busy_at[bank] = Some(cycle);
        Ok(())
    }

    pub fn read_word(&mut self, bank: usize, word: usize, cycle: u64) -> Result<u128, MemError> {
        self.check_access(bank, word, cycle)?;
        self.counters[bank].reads += 1;
        Ok(self.banks[bank][word])
    }

    pub fn write_word(
        &mut self,
        bank: usize,
        word: usize,
        value: u128,
        cycle: u64,
    ) -> Result<(), MemError> {
        self.check_access(bank, word, cycle)?;
        self.counters[bank].writes += 1;
        self.banks[bank][word] = value;
        Ok(())
    }

    /// Reads at the IFM cursor and advances it.
    pub fn read_ifm_next(&mut self, cycle: u64) -> Result<u128, MemError> {
        let mut cur = self.ifm.ok_or(MemError::CursorUnset { which: "ifm" })?;
        let (bank, word) = cur.resolve(cycle)?;
        let value = self.read_word(bank, word, cycle)?;
        cur.word += 1;
        self.ifm = Some(cur);
        Ok(value)
    }

    /// Writes at the OFM cursor and advances it.
    pub fn write_ofm_next(&mut self, value: u128, cycle: u64) -> Result<(), MemError> {
        let mut cur = self.ofm.ok_or(MemError::CursorUnset { which: "ofm" })?;
        let (bank, word) = cur.resolve(cycle)?;
        self.write_word(bank, word, value, cycle)?;
        cur.word += 1;
        self.ofm = Some(cur);
        Ok(())
    }

    /// Charges `n` gated cycles to every powered-off bank. Called by the
    /// controller whenever simulated time advances.
    pub fn accrue_gated(&mut self, n: u64) {
        for b in 0..BANKS {
            if self.power[b] == Power::Off {
                self.counters[b].gated_cycles += n;
            }
        }
    }

    /// Setup-time bulk write: no cycles, no counters, no port accounting.
    /// Spills into following banks as needed.
    pub fn preload(&mut self, bank: usize, word: usize, words: &[u128]) -> Result<(), MemError> {
        if bank >= BANKS || word >= BANK_WORDS {
            return Err(MemError::PreloadRange {
                bank,
                word,
                count: words.len(),
            });
        }
        if bank * BANK_WORDS + word + words.len() > BANKS * BANK_WORDS {
            return Err(MemError::PreloadRange {
                bank,
                word,
                count: words.len(),
            });
        }
        let (mut b, mut w) = (bank, word);
        for &v in words {
            self.banks[b][w] = v;
            w += 1;
            if w == BANK_WORDS {
                b += 1;
                w = 0;
            }
        }
        Ok(())
    }

    /// Direct inspection without access semantics (tools and tests).
    pub fn peek(&self, bank: usize, word: usize) -> u128 {
        self.banks[bank][word]
    }

    /// Reads a contiguous region starting at a cursor position, spilling
    /// across banks, without touching counters or port state.
    pub fn peek_region(&self, start: Cursor, count: usize) -> Vec<u128> {
        let base = start.bank * BANK_WORDS + start.word;
        (0..count)
            .map(|i| self.banks[(base + i) / BANK_WORDS][(base + i) % BANK_WORDS])
            .collect()
    }

    /// Hex dump of one bank, one 128-bit word per line, most significant
    /// nibble first.
    pub fn dump_bank(&self, bank: usize) -> String {
        use std::fmt::Write;
        let mut out = String::with_capacity(BANK_WORDS * 33);
        for w in &self.banks[bank] {
            writeln!(out, "{w:032x}").unwrap();
        }
        out
    }

    /// Parses the `dump_bank` format back into bank contents.
    pub fn load_bank_dump(&mut self, bank: usize, text: &str) -> Result<(), MemError> {
        for (i, line) in text.lines().enumerate() {
            if i >= BANK_WORDS {
                return Err(MemError::WordRange { bank, word: i });
            }
            let v = u128::from_str_radix(line.trim(), 16)
                .map_err(|_| MemError::WordRange { bank, word: i })?;
            self.banks[bank][i] = v;
        }
        Ok(())
    }
}

/// The 512 Kb weight SRAM holding pre-encoded macro row images for layers
/// that do not fit the macro. Replacement is a verbatim row copy.
pub struct WeightSram {
    rows: Vec<BitRow>,
    reads: u64,
}

impl Default for WeightSram {
    fn default() -> Self {
        Self::new()
    }
}

impl WeightSram {
    pub fn new() -> Self {
        WeightSram {
            rows: vec![BitRow::zero(); WSRAM_ROWS],
            reads: 0,
        }
    }

    pub fn from_rows(rows: Vec<BitRow>) -> Self {
        assert_eq!(rows.len(), WSRAM_ROWS);
        WeightSram { rows, reads: 0 }
    }

    pub fn reads(&self) -> u64 {
        self.reads
    }

    pub fn set_row(&mut self, row: usize, value: BitRow) {
        self.rows[row] = value;
    }

    /// Returns `count` rows starting at `row`, charging one read per row.
    pub fn fetch_rows(&mut self, row: usize, count: usize) -> Result<&[BitRow], MemError> {
        if row + count > WSRAM_ROWS {
            return Err(MemError::WsramRange { row, count });
        }
        self.reads += count as u64;
        Ok(&self.rows[row..row + count])
    }
}

/// The 1024-bit register presenting the current convolution window to the
/// wordlines. Purely functional: contents always mirror the last fill.
#[derive(Debug, Clone, Default)]
pub struct LineBuffer {
    bits: BitRow,
}

impl LineBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.bits = BitRow::zero();
    }

    pub fn set(&mut self, index: usize, value: bool) {
        self.bits.set(index, value);
    }

    pub fn as_row(&self) -> &BitRow {
        &self.bits
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cursor(bank: usize, word: usize, span: bool) -> Cursor {
        Cursor { bank, word, span }
    }

    #[test]
    fn write_then_read_same_word() {
        let mut m = FeatureSram::new();
        m.write_word(2, 17, 0xDEAD_BEEF, 1).unwrap();
        assert_eq!(m.read_word(2, 17, 2).unwrap(), 0xDEAD_BEEF);
        assert_eq!(m.counters()[2].reads, 1);
        assert_eq!(m.counters()[2].writes, 1);
    }

    #[test]
    fn pointer_powers_exactly_the_referenced_banks() {
        let mut m = FeatureSram::new();
        m.apply_pointer(cursor(0, 0, false), cursor(1, 0, false))
            .unwrap();
        assert_eq!(m.power(0), Power::On);
        assert_eq!(m.power(1), Power::On);
        assert_eq!(m.power(2), Power::Off);
        assert_eq!(m.power(3), Power::Off);

        // IFM spans banks 0-1, OFM in bank 2: three on, one off.
        m.apply_pointer(cursor(0, 0, true), cursor(2, 0, false))
            .unwrap();
        assert_eq!(m.power(0), Power::On);
        assert_eq!(m.power(1), Power::On);
        assert_eq!(m.power(2), Power::On);
        assert_eq!(m.power(3), Power::Off);
    }

    #[test]
    fn ping_pong_roles_swap() {
        let mut m = FeatureSram::new();
        m.apply_pointer(cursor(0, 0, false), cursor(1, 0, false))
            .unwrap();
        m.apply_pointer(cursor(1, 0, false), cursor(0, 0, false))
            .unwrap();
        assert_eq!(m.ifm_cursor().unwrap().bank, 1);
        assert_eq!(m.ofm_cursor().unwrap().bank, 0);
    }

    #[test]
    fn overlapping_pointer_is_config_error() {
        let mut m = FeatureSram::new();
        assert_eq!(
            m.apply_pointer(cursor(1, 0, false), cursor(1, 100, false)),
            Err(MemError::BankOverlap { bank: 1 })
        );
        // Span collision counts too: IFM {0,1}, OFM {1}.
        assert_eq!(
            m.apply_pointer(cursor(0, 0, true), cursor(1, 0, false)),
            Err(MemError::BankOverlap { bank: 1 })
        );
    }

    #[test]
    fn gated_bank_access_is_fatal() {
        let mut m = FeatureSram::new();
        m.apply_pointer(cursor(0, 0, false), cursor(1, 0, false))
            .unwrap();
        assert_eq!(
            m.read_word(2, 0, 99),
            Err(MemError::PoweredOff { bank: 2, cycle: 99 })
        );
    }

    #[test]
    fn single_port_rule() {
        let mut m = FeatureSram::new();
        m.write_word(0, 0, 1, 5).unwrap();
        assert_eq!(
            m.write_word(0, 1, 2, 5),
            Err(MemError::PortConflict { bank: 0, cycle: 5 })
        );
        assert_eq!(
            m.read_word(0, 3, 5),
            Err(MemError::PortConflict { bank: 0, cycle: 5 })
        );
        // Next cycle is fine, and other banks are independent ports.
        m.write_word(0, 1, 2, 6).unwrap();
        m.write_word(1, 0, 3, 6).unwrap();
    }

    #[test]
    fn word_range_checked() {
        let mut m = FeatureSram::new();
        assert_eq!(
            m.read_word(0, 512, 0),
            Err(MemError::WordRange { bank: 0, word: 512 })
        );
    }

    #[test]
    fn cursor_spans_once_then_overflows() {
        let mut m = FeatureSram::new();
        m.apply_pointer(cursor(0, 510, true), cursor(2, 0, false))
            .unwrap();
        // 510, 511 in bank 0, then two words of bank 1.
        for cycle in 0..4 {
            m.read_ifm_next(cycle).unwrap();
        }
        let c = m.ifm_cursor().unwrap();
        assert_eq!((c.bank, c.word, c.span), (1, 2, false));

        // Without the span flag the read past the bank end is an error; the
        // boundary itself is fine.
        m.apply_pointer(cursor(0, 511, false), cursor(2, 0, false))
            .unwrap();
        m.read_ifm_next(10).unwrap();
        assert_eq!(
            m.read_ifm_next(11),
            Err(MemError::CursorOverflow { bank: 0, cycle: 11 })
        );
    }

    #[test]
    fn gated_cycle_accounting() {
        let mut m = FeatureSram::new();
        m.apply_pointer(cursor(0, 0, false), cursor(1, 0, false))
            .unwrap();
        m.accrue_gated(100);
        assert_eq!(m.counters()[0].gated_cycles, 0);
        assert_eq!(m.counters()[2].gated_cycles, 100);
        assert_eq!(m.counters()[3].gated_cycles, 100);
    }

    #[test]
    fn preload_and_peek_region() {
        let mut m = FeatureSram::new();
        let words: Vec<u128> = (0..600).map(|i| i as u128).collect();
        m.preload(0, 0, &words).unwrap();
        assert_eq!(m.peek(1, 87), 599);
        let region = m.peek_region(cursor(0, 598 % 512, true), 2);
        assert_eq!(region, vec![598 - 512, 599 - 512]); // bank 0 words 86,87
        assert!(m.preload(3, 500, &words).is_err());
    }

    #[test]
    fn bank_dump_roundtrip() {
        let mut m = FeatureSram::new();
        m.preload(1, 0, &[0x1234, u128::MAX]).unwrap();
        let dump = m.dump_bank(1);
        assert!(dump.starts_with("00000000000000000000000000001234\n"));
        assert_eq!(dump.lines().count(), BANK_WORDS);
        let mut m2 = FeatureSram::new();
        m2.load_bank_dump(1, &dump).unwrap();
        assert_eq!(m2.peek(1, 0), 0x1234);
        assert_eq!(m2.peek(1, 1), u128::MAX);
    }

    #[test]
    fn wsram_fetch_rules() {
        let mut w = WeightSram::new();
        let mut row = BitRow::zero();
        row.set(5, true);
        w.set_row(0, row);
        assert_eq!(w.fetch_rows(0, 1).unwrap()[0], row);
        assert_eq!(w.fetch_rows(0, 512).unwrap().len(), 512);
        assert_eq!(
            w.fetch_rows(500, 20).unwrap_err(),
            MemError::WsramRange {
                row: 500,
                count: 20
            }
        );
        assert_eq!(w.reads(), 513);
    }
}
