//! The 32-bit instruction set: encoding, decoding, assembly and disassembly.
//!
//! Every instruction is one 32-bit word. Bits `[31:29]` select the type:
//!
//! ```text
//! 000  MAC   [28:27] mode  [26:17] n_out-1  [16:7] wl_count-1
//!            [6:5] col_groups-1  [4:3] log2(pool_window)  [2:1] log2(stride)  [0] 0
//! 001  WREP  [28:19] cim_row_base  [18:9] row_count-1  [8:0] wsram_row
//! 010  PTR   [28:27] ifm_bank  [26:18] ifm_word  [17:16] ofm_bank
//!            [15:7] ofm_word  [6] ifm_span  [5] ofm_span  [4:0] 0
//! 111  HALT  [28:0] 0
//! ```
//!
//! Counts are stored biased by one so the full `1..=1024` range fits ten
//! bits. Words with reserved bits set, an undefined type selector, or
//! inconsistent fields do not decode; no word is silently coerced.
//!
//! Program binaries are little-endian words, no header, HALT-terminated.

use thiserror::Error;

/// Layer execution type carried by a MAC word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MacMode {
    /// Convolution, output written back at full rate.
    ConvOnly,
    /// Convolution with max pooling fused onto the output stream.
    ConvFusedPool,
    /// Standalone pooling through the macro-bypass path.
    PoolBypass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instruction {
    Mac {
        mode: MacMode,
        /// Output spatial positions produced (pre-pooling), `1..=1024`.
        n_out: u32,
        /// Active wordlines per sense, `1..=1024`.
        wl_count: u32,
        /// 128-output sense groups read per step, `1..=4`.
        col_groups: u32,
        /// Pooling window, one of 1/2/4/8. 1 iff `ConvOnly`.
        pool_window: u32,
        /// Input stride, one of 1/2/4/8.
        stride: u32,
    },
    WeightReplace {
        cim_row_base: u32,
        row_count: u32,
        wsram_row: u32,
    },
    Pointer {
        ifm_bank: u32,
        ifm_word: u32,
        ofm_bank: u32,
        ofm_word: u32,
        ifm_span: bool,
        ofm_span: bool,
    },
    Halt,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IsaError {
    #[error("field `{field}` out of range: {value} (allowed {min}..={max})")]
    FieldRange {
        field: &'static str,
        value: u32,
        min: u32,
        max: u32,
    },
    #[error("field `{field}` must be one of 1/2/4/8, got {value}")]
    NotPow2 { field: &'static str, value: u32 },
    #[error("illegal opcode {opcode:#05b} in word {word:#010x}")]
    IllegalOpcode { opcode: u8, word: u32 },
    #[error("reserved bits set in word {word:#010x}")]
    ReservedBits { word: u32 },
    #[error("undefined mac mode bits in word {word:#010x}")]
    UndefinedMode { word: u32 },
    #[error("pool_window {pool_window} inconsistent with {mode:?}: window is 1 exactly when mode is conv-only")]
    PoolModeMismatch { mode: MacMode, pool_window: u32 },
    #[error("weight replacement overflows: cim rows {cim_row_base}+{row_count} and wsram rows {wsram_row}+{row_count} must stay within 1024 / 512")]
    ReplaceRange {
        cim_row_base: u32,
        row_count: u32,
        wsram_row: u32,
    },
    #[error("`{which}` span flag set on last bank")]
    SpanAtLastBank { which: &'static str },
    #[error("program binary length {0} is not a multiple of 4 bytes")]
    TruncatedProgram(usize),
}

const OP_MAC: u32 = 0b000;
const OP_WREP: u32 = 0b001;
const OP_PTR: u32 = 0b010;
const OP_HALT: u32 = 0b111;

fn check_range(field: &'static str, value: u32, min: u32, max: u32) -> Result<(), IsaError> {
    if value < min || value > max {
        return Err(IsaError::FieldRange {
            field,
            value,
            min,
            max,
        });
    }
    Ok(())
}

fn check_pow2(field: &'static str, value: u32) -> Result<(), IsaError> {
    match value {
        1 | 2 | 4 | 8 => Ok(()),
        _ => Err(IsaError::NotPow2 { field, value }),
    }
}

impl Instruction {
    /// Checks every field against its allowed range and the cross-field
    /// invariants. Both `encode` and `decode` go through this, so the set of
    /// valid instructions and the set of decodable words coincide.
    pub fn validate(&self) -> Result<(), IsaError> {
        match *self {
            Instruction::Mac {
                mode,
                n_out,
                wl_count,
                col_groups,
                pool_window,
                stride,
            } => {
                check_range("n_out", n_out, 1, 1024)?;
                check_range("wl_count", wl_count, 1, 1024)?;
                check_range("col_groups", col_groups, 1, 4)?;
                check_pow2("pool_window", pool_window)?;
                check_pow2("stride", stride)?;
                let conv_only = mode == MacMode::ConvOnly;
                if conv_only != (pool_window == 1) {
                    return Err(IsaError::PoolModeMismatch { mode, pool_window });
                }
                Ok(())
            }
            Instruction::WeightReplace {
                cim_row_base,
                row_count,
                wsram_row,
            } => {
                check_range("cim_row_base", cim_row_base, 0, 1023)?;
                check_range("row_count", row_count, 1, 1024)?;
                check_range("wsram_row", wsram_row, 0, 511)?;
                if cim_row_base + row_count > 1024 || wsram_row + row_count > 512 {
                    return Err(IsaError::ReplaceRange {
                        cim_row_base,
                        row_count,
                        wsram_row,
                    });
                }
                Ok(())
            }
            Instruction::Pointer {
                ifm_bank,
                ifm_word,
                ofm_bank,
                ofm_word,
                ifm_span,
                ofm_span,
            } => {
                check_range("ifm_bank", ifm_bank, 0, 3)?;
                check_range("ifm_word", ifm_word, 0, 511)?;
                check_range("ofm_bank", ofm_bank, 0, 3)?;
                check_range("ofm_word", ofm_word, 0, 511)?;
                if ifm_span && ifm_bank == 3 {
                    return Err(IsaError::SpanAtLastBank { which: "ifm" });
                }
                if ofm_span && ofm_bank == 3 {
                    return Err(IsaError::SpanAtLastBank { which: "ofm" });
                }
                Ok(())
            }
            Instruction::Halt => Ok(()),
        }
    }

    pub fn encode(&self) -> Result<u32, IsaError> {
        self.validate()?;
        Ok(match *self {
            Instruction::Mac {
                mode,
                n_out,
                wl_count,
                col_groups,
                pool_window,
                stride,
            } => {
                let mode_bits = match mode {
                    MacMode::ConvOnly => 0,
                    MacMode::ConvFusedPool => 1,
                    MacMode::PoolBypass => 2,
                };
                (OP_MAC << 29)
                    | (mode_bits << 27)
                    | ((n_out - 1) << 17)
                    | ((wl_count - 1) << 7)
                    | ((col_groups - 1) << 5)
                    | (pool_window.trailing_zeros() << 3)
                    | (stride.trailing_zeros() << 1)
            }
            Instruction::WeightReplace {
                cim_row_base,
                row_count,
                wsram_row,
            } => (OP_WREP << 29) | (cim_row_base << 19) | ((row_count - 1) << 9) | wsram_row,
            Instruction::Pointer {
                ifm_bank,
                ifm_word,
                ofm_bank,
                ofm_word,
                ifm_span,
                ofm_span,
            } => {
                (OP_PTR << 29)
                    | (ifm_bank << 27)
                    | (ifm_word << 18)
                    | (ofm_bank << 16)
                    | (ofm_word << 7)
                    | ((ifm_span as u32) << 6)
                    | ((ofm_span as u32) << 5)
            }
            Instruction::Halt => OP_HALT << 29,
        })
    }

    pub fn decode(word: u32) -> Result<Instruction, IsaError> {
        let instr = match word >> 29 {
            OP_MAC => {
                if word & 1 != 0 {
                    return Err(IsaError::ReservedBits { word });
                }
                let mode = match (word >> 27) & 0b11 {
                    0 => MacMode::ConvOnly,
                    1 => MacMode::ConvFusedPool,
                    2 => MacMode::PoolBypass,
                    _ => return Err(IsaError::UndefinedMode { word }),
                };
                Instruction::Mac {
                    mode,
                    n_out: ((word >> 17) & 0x3ff) + 1,
                    wl_count: ((word >> 7) & 0x3ff) + 1,
                    col_groups: ((word >> 5) & 0b11) + 1,
                    pool_window: 1 << ((word >> 3) & 0b11),
                    stride: 1 << ((word >> 1) & 0b11),
                }
            }
            OP_WREP => Instruction::WeightReplace {
                cim_row_base: (word >> 19) & 0x3ff,
                row_count: ((word >> 9) & 0x3ff) + 1,
                wsram_row: word & 0x1ff,
            },
            OP_PTR => {
                if word & 0x1f != 0 {
                    return Err(IsaError::ReservedBits { word });
                }
                Instruction::Pointer {
                    ifm_bank: (word >> 27) & 0b11,
                    ifm_word: (word >> 18) & 0x1ff,
                    ofm_bank: (word >> 16) & 0b11,
                    ofm_word: (word >> 7) & 0x1ff,
                    ifm_span: word & (1 << 6) != 0,
                    ofm_span: word & (1 << 5) != 0,
                }
            }
            OP_HALT => {
                if word & 0x1fff_ffff != 0 {
                    return Err(IsaError::ReservedBits { word });
                }
                Instruction::Halt
            }
            opcode => {
                return Err(IsaError::IllegalOpcode {
                    opcode: opcode as u8,
                    word,
                })
            }
        };
        instr.validate()?;
        Ok(instr)
    }
}

/// Result of assembling a source text.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub words: Vec<u32>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsmErrorKind {
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("expected key=value operand, got `{0}`")]
    MalformedOperand(String),
    #[error("unknown operand `{0}`")]
    UnknownOperand(String),
    #[error("missing value for operand `{0}`")]
    MissingValue(String),
    #[error("bad value `{value}` for operand `{key}`")]
    BadValue { key: String, value: String },
    #[error(transparent)]
    Encode(IsaError),
}

fn parse_u32(line: usize, key: &str, value: &str) -> Result<u32, AsmError> {
    value.parse().map_err(|_| AsmError {
        line,
        kind: AsmErrorKind::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        },
    })
}

fn parse_flag(line: usize, key: &str, value: &str) -> Result<bool, AsmError> {
    match value {
        "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        _ => Err(AsmError {
            line,
            kind: AsmErrorKind::BadValue {
                key: key.to_string(),
                value: value.to_string(),
            },
        }),
    }
}

fn parse_line(lineno: usize, text: &str) -> Result<Option<Instruction>, AsmError> {
    let text = text.split('#').next().unwrap_or("").trim();
    if text.is_empty() {
        return Ok(None);
    }
    let lower = text.to_ascii_lowercase();
    let mut tokens = lower.split_whitespace();
    let mnemonic = tokens.next().unwrap();

    let mut pairs = Vec::new();
    for tok in tokens {
        let Some((key, value)) = tok.split_once('=') else {
            return Err(AsmError {
                line: lineno,
                kind: AsmErrorKind::MalformedOperand(tok.to_string()),
            });
        };
        if value.is_empty() {
            return Err(AsmError {
                line: lineno,
                kind: AsmErrorKind::MissingValue(key.to_string()),
            });
        }
        pairs.push((key, value));
    }

    let instr = match mnemonic {
        "halt" => {
            if let Some((key, _)) = pairs.first() {
                return Err(AsmError {
                    line: lineno,
                    kind: AsmErrorKind::UnknownOperand(key.to_string()),
                });
            }
            Instruction::Halt
        }
        "mac" => {
            let mut mode = MacMode::ConvOnly;
            let (mut n_out, mut wl_count, mut col_groups) = (1, 1, 1);
            let (mut pool_window, mut stride) = (None, 1);
            for (key, value) in pairs {
                match key {
                    "mode" => {
                        mode = match value {
                            "conv" => MacMode::ConvOnly,
                            "fused" => MacMode::ConvFusedPool,
                            "bypass" => MacMode::PoolBypass,
                            _ => {
                                return Err(AsmError {
                                    line: lineno,
                                    kind: AsmErrorKind::BadValue {
                                        key: key.to_string(),
                                        value: value.to_string(),
                                    },
                                })
                            }
                        }
                    }
                    "n_out" => n_out = parse_u32(lineno, key, value)?,
                    "wl_count" => wl_count = parse_u32(lineno, key, value)?,
                    "col_groups" => col_groups = parse_u32(lineno, key, value)?,
                    "pool_window" => pool_window = Some(parse_u32(lineno, key, value)?),
                    "stride" => stride = parse_u32(lineno, key, value)?,
                    _ => {
                        return Err(AsmError {
                            line: lineno,
                            kind: AsmErrorKind::UnknownOperand(key.to_string()),
                        })
                    }
                }
            }
            // Unspecified window defaults to whatever the mode needs: 1 for
            // plain convolution, 2 for the pooling modes.
            let pool_window = pool_window.unwrap_or(if mode == MacMode::ConvOnly { 1 } else { 2 });
            Instruction::Mac {
                mode,
                n_out,
                wl_count,
                col_groups,
                pool_window,
                stride,
            }
        }
        "wrep" => {
            let (mut cim_row_base, mut row_count, mut wsram_row) = (0, 1, 0);
            for (key, value) in pairs {
                match key {
                    "cim_row_base" => cim_row_base = parse_u32(lineno, key, value)?,
                    "row_count" => row_count = parse_u32(lineno, key, value)?,
                    "wsram_row" => wsram_row = parse_u32(lineno, key, value)?,
                    _ => {
                        return Err(AsmError {
                            line: lineno,
                            kind: AsmErrorKind::UnknownOperand(key.to_string()),
                        })
                    }
                }
            }
            Instruction::WeightReplace {
                cim_row_base,
                row_count,
                wsram_row,
            }
        }
        "ptr" => {
            let (mut ifm_bank, mut ifm_word, mut ofm_bank, mut ofm_word) = (0, 0, 0, 0);
            let (mut ifm_span, mut ofm_span) = (false, false);
            for (key, value) in pairs {
                match key {
                    "ifm_bank" => ifm_bank = parse_u32(lineno, key, value)?,
                    "ifm_word" => ifm_word = parse_u32(lineno, key, value)?,
                    "ofm_bank" => ofm_bank = parse_u32(lineno, key, value)?,
                    "ofm_word" => ofm_word = parse_u32(lineno, key, value)?,
                    "ifm_span" => ifm_span = parse_flag(lineno, key, value)?,
                    "ofm_span" => ofm_span = parse_flag(lineno, key, value)?,
                    _ => {
                        return Err(AsmError {
                            line: lineno,
                            kind: AsmErrorKind::UnknownOperand(key.to_string()),
                        })
                    }
                }
            }
            Instruction::Pointer {
                ifm_bank,
                ifm_word,
                ofm_bank,
                ofm_word,
                ifm_span,
                ofm_span,
            }
        }
        other => {
            return Err(AsmError {
                line: lineno,
                kind: AsmErrorKind::UnknownMnemonic(other.to_string()),
            })
        }
    };
    Ok(Some(instr))
}

/// Assembles source text into instruction words, one instruction per line.
///
/// Mnemonics are MAC / WREP / PTR / HALT with `key=value` operands, `#`
/// starts a comment, everything is case-insensitive. A final HALT is
/// appended (with a warning) if the source does not end with one.
pub fn assemble(source: &str) -> Result<Assembly, AsmError> {
    let mut words = Vec::new();
    let mut last = None;
    for (idx, line) in source.lines().enumerate() {
        let lineno = idx + 1;
        if let Some(instr) = parse_line(lineno, line)? {
            let word = instr.encode().map_err(|e| AsmError {
                line: lineno,
                kind: AsmErrorKind::Encode(e),
            })?;
            words.push(word);
            last = Some(instr);
        }
    }
    let mut warnings = Vec::new();
    if last != Some(Instruction::Halt) {
        words.push(Instruction::Halt.encode().unwrap());
        warnings.push("program did not end with HALT; one was appended".to_string());
    }
    Ok(Assembly { words, warnings })
}

/// Renders decoded words back to canonical assembly text, one instruction
/// per line with every operand explicit. `assemble(disassemble(p)) == p`.
pub fn disassemble(words: &[u32]) -> Result<String, IsaError> {
    use std::fmt::Write;
    let mut out = String::new();
    for &word in words {
        match Instruction::decode(word)? {
            Instruction::Mac {
                mode,
                n_out,
                wl_count,
                col_groups,
                pool_window,
                stride,
            } => {
                let mode = match mode {
                    MacMode::ConvOnly => "conv",
                    MacMode::ConvFusedPool => "fused",
                    MacMode::PoolBypass => "bypass",
                };
                writeln!(
                    out,
                    "MAC mode={mode} n_out={n_out} wl_count={wl_count} \
                     col_groups={col_groups} pool_window={pool_window} stride={stride}"
                )
                .unwrap();
            }
            Instruction::WeightReplace {
                cim_row_base,
                row_count,
                wsram_row,
            } => writeln!(
                out,
                "WREP cim_row_base={cim_row_base} row_count={row_count} wsram_row={wsram_row}"
            )
            .unwrap(),
            Instruction::Pointer {
                ifm_bank,
                ifm_word,
                ofm_bank,
                ofm_word,
                ifm_span,
                ofm_span,
            } => writeln!(
                out,
                "PTR ifm_bank={ifm_bank} ifm_word={ifm_word} ofm_bank={ofm_bank} \
                 ofm_word={ofm_word} ifm_span={} ofm_span={}",
                ifm_span as u8, ofm_span as u8
            )
            .unwrap(),
            Instruction::Halt => out.push_str("HALT\n"),
        }
    }
    Ok(out)
}

/// Serializes a program as little-endian 32-bit words, no header.
pub fn program_to_bytes(words: &[u32]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

pub fn program_from_bytes(bytes: &[u8]) -> Result<Vec<u32>, IsaError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(IsaError::TruncatedProgram(bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
