//! Maps a validated model onto the macro: weight packing, wordline
//! placement, macro/weight-SRAM partitioning, ping-pong bank planning and
//! instruction emission.
//!
//! Placement is row-granular: a layer owns a contiguous block of full
//! wordlines, output channel `q` on bitline pair `q`, and within the block
//! the `K*C_in` weights of a channel run top-down position-major then
//! channel — the same order the line buffer fills in, which is what keeps
//! the output feature map in input order with no reshuffling.
//!
//! Layers are placed greedily, first fit, in execution order. A layer that
//! does not fit the remaining macro rows lives in the weight SRAM as
//! pre-encoded row images and is copied in by a weight-replacement
//! instruction ahead of its MAC, aimed at the least recently needed rows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::{words_per_position, BitRow};
use crate::cim::{TernaryWeight, WORDLINES};
use crate::isa::{Instruction, MacMode};
use crate::mem::{BANKS, BANK_WORDS, WSRAM_ROWS};
use crate::model::{ConvStep, ExecStep, LayerWeights, ModelError, ModelWeights, ValidatedModel};

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("model needs {needed_rows} weight rows; capacity is {macro_rows} macro + {wsram_rows} weight-SRAM rows")]
    Capacity {
        needed_rows: usize,
        macro_rows: usize,
        wsram_rows: usize,
    },
    #[error(
        "layer {layer}: no {rows} contiguous macro rows are replaceable when the layer executes"
    )]
    Schedule { layer: usize, rows: usize },
    #[error("layer {layer}: feature map of {words} words exceeds the two-bank limit ({max})")]
    BankPlan {
        layer: usize,
        words: usize,
        max: usize,
    },
    #[error("weights supply {got} layers, model has {expected} weighted layers")]
    WeightLayerCount { expected: usize, got: usize },
    #[error("cannot rebuild weights from row images: {0}")]
    Unpack(String),
}

/// Where a layer's rows live before execution starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Residence {
    Macro,
    WeightSram { row: usize },
}

/// A layer's rectangle in the array, plus its residence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub wl_base: usize,
    pub wl_count: usize,
    pub pair_base: usize,
    pub pair_count: usize,
    pub residence: Residence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacKind {
    Conv,
    Bypass,
}

/// Side-table entry for one MAC instruction: the layer geometry the
/// controller needs but the 32-bit word does not carry, the wordline base
/// the instruction senses at, and a digest of the rows that must be
/// resident there when it runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacParams {
    pub kind: MacKind,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub wl_base: usize,
    pub bias_rows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_digest: Option<String>,
}

/// One feature-map allocation: `words` words starting at word 0 of `bank`,
/// spilling into `bank + 1` when `span` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankAlloc {
    pub bank: usize,
    pub word: usize,
    pub span: bool,
    pub words: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBankPlan {
    pub ifm: BankAlloc,
    pub ofm: BankAlloc,
}

/// One emitted instruction stream with its side tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramVariant {
    #[serde(skip)]
    pub program: Vec<u32>,
    pub layer_table: Vec<MacParams>,
    pub bank_plan: Vec<LayerBankPlan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapStats {
    pub resident_rows: usize,
    pub wsram_rows: usize,
    /// Weight slots are counted as storage capacity: 512 ternary weights
    /// per row.
    pub resident_weight_slots: u64,
    pub wsram_weight_slots: u64,
    pub wrep_count: usize,
}

pub struct MappedModel {
    pub model: ValidatedModel,
    pub placements: Vec<Placement>,
    pub macro_image: Vec<BitRow>,
    pub wsram_image: Vec<BitRow>,
    /// Default stream: pooling fused onto convolutions where the model asks
    /// for it.
    pub fused: ProgramVariant,
    /// Alternate stream with every pooling executed as a separate
    /// macro-bypass pass. Absent when that variant cannot be planned (its
    /// full-rate intermediates may exceed the feature memory).
    pub unfused: Option<ProgramVariant>,
    pub unfused_error: Option<String>,
    pub stats: MapStats,
}

/// FNV-1a 64, used to fingerprint row images for the runtime residence
/// check.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn digest_rows(rows: &[BitRow]) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for row in rows {
        for &b in row.to_bytes_msb().iter() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Packs one layer's weights into TWM row images. Output channel `q`
/// occupies bitline pair `q`; row `kk * c_in + c` holds `w[q][kk][c]`; a
/// bias of magnitude `m` appends `m` rows of its sign, driven by
/// constant-one line-buffer bits.
pub fn pack_layer_weights(step: &ConvStep, w: &LayerWeights) -> Vec<BitRow> {
    assert_eq!((w.c_out, w.k, w.c_in), (step.c_out, step.k, step.c_in));
    let bias_rows = step.bias_rows();
    let mut rows = vec![BitRow::zero(); step.k * step.c_in + bias_rows];
    for q in 0..step.c_out {
        for kk in 0..step.k {
            for c in 0..step.c_in {
                let t = TernaryWeight::from_value(w.get(q, kk, c)).unwrap();
                let (pos, neg) = t.cells();
                let row = &mut rows[kk * step.c_in + c];
                row.set(2 * q, pos);
                row.set(2 * q + 1, neg);
            }
        }
        if let Some(bias) = &step.bias {
            let b = bias[q];
            let cell = if b >= 0 {
                TernaryWeight::Plus
            } else {
                TernaryWeight::Minus
            };
            let (pos, neg) = cell.cells();
            for j in 0..b.unsigned_abs() as usize {
                let row = &mut rows[step.k * step.c_in + j];
                row.set(2 * q, pos);
                row.set(2 * q + 1, neg);
            }
        }
    }
    rows
}

/// Inverse of `pack_layer_weights`: rebuilds weights (and bias) from row
/// images. Fails on any reserved cell pattern.
pub fn unpack_layer_weights(
    rows: &[BitRow],
    c_out: usize,
    k: usize,
    c_in: usize,
    bias_rows: usize,
) -> Result<(LayerWeights, Option<Vec<i32>>), CompileError> {
    if rows.len() != k * c_in + bias_rows {
        return Err(CompileError::Unpack(format!(
            "{} rows for a {}x{}+{} layer",
            rows.len(),
            k,
            c_in,
            bias_rows
        )));
    }
    let mut w = vec![0i8; c_out * k * c_in];
    for q in 0..c_out {
        for kk in 0..k {
            for c in 0..c_in {
                let row = &rows[kk * c_in + c];
                let t = TernaryWeight::from_cells(row.get(2 * q), row.get(2 * q + 1)).ok_or_else(
                    || {
                        CompileError::Unpack(format!(
                            "reserved pattern at row {}, pair {q}",
                            kk * c_in + c
                        ))
                    },
                )?;
                if t == TernaryWeight::Zero {
                    return Err(CompileError::Unpack(format!(
                        "zero weight inside kernel at row {}, pair {q}",
                        kk * c_in + c
                    )));
                }
                w[(q * k + kk) * c_in + c] = t.value();
            }
        }
    }
    let bias = if bias_rows == 0 {
        None
    } else {
        let mut bias = vec![0i32; c_out];
        for (q, b) in bias.iter_mut().enumerate() {
            for row in &rows[k * c_in..] {
                let t = TernaryWeight::from_cells(row.get(2 * q), row.get(2 * q + 1)).ok_or_else(
                    || CompileError::Unpack(format!("reserved pattern in bias tail, pair {q}")),
                )?;
                *b += t.value() as i32;
            }
        }
        Some(bias)
    };
    Ok((LayerWeights::new(c_out, k, c_in, w), bias))
}

/// The first-fit hole list over macro rows.
struct RowAllocator {
    holes: Vec<(usize, usize)>, // (start, len), sorted by start
}

impl RowAllocator {
    fn new() -> Self {
        RowAllocator {
            holes: vec![(0, WORDLINES)],
        }
    }

    fn alloc(&mut self, rows: usize) -> Option<usize> {
        for i in 0..self.holes.len() {
            let (start, len) = self.holes[i];
            if len >= rows {
                if len == rows {
                    self.holes.remove(i);
                } else {
                    self.holes[i] = (start + rows, len - rows);
                }
                return Some(start);
            }
        }
        None
    }
}

struct BankPlanner {
    /// Banks currently holding the live input feature map.
    live: u8,
}

impl BankPlanner {
    fn new() -> Self {
        BankPlanner { live: 0 }
    }

    /// Allocates a feature map avoiding the live banks. Spans start only at
    /// even banks so the complement of any allocation always contains an
    /// adjacent pair.
    fn alloc(&mut self, words: usize, layer: usize) -> Result<BankAlloc, CompileError> {
        if words == 0 || words > 2 * BANK_WORDS {
            return Err(CompileError::BankPlan {
                layer,
                words,
                max: 2 * BANK_WORDS,
            });
        }
        if words > BANK_WORDS {
            for base in [0usize, 2] {
                let mask = 0b11 << base;
                if self.live & mask == 0 {
                    return Ok(BankAlloc {
                        bank: base,
                        word: 0,
                        span: true,
                        words,
                    });
                }
            }
        } else {
            for bank in 0..BANKS {
                if self.live & (1 << bank) == 0 {
                    return Ok(BankAlloc {
                        bank,
                        word: 0,
                        span: false,
                        words,
                    });
                }
            }
        }
        Err(CompileError::BankPlan {
            layer,
            words,
            max: 2 * BANK_WORDS,
        })
    }

    fn set_live(&mut self, a: &BankAlloc) {
        self.live = 1 << a.bank;
        if a.span {
            self.live |= 1 << (a.bank + 1);
        }
    }
}

fn pointer_for(ifm: &BankAlloc, ofm: &BankAlloc) -> Instruction {
    Instruction::Pointer {
        ifm_bank: ifm.bank as u32,
        ifm_word: ifm.word as u32,
        ofm_bank: ofm.bank as u32,
        ofm_word: ofm.word as u32,
        ifm_span: ifm.span,
        ofm_span: ofm.span,
    }
}

/// Plans one instruction stream. `fuse` selects whether eligible pooling
/// rides on the convolution or runs as separate bypass passes.
fn emit_variant(
    model: &ValidatedModel,
    placements: &[Placement],
    packed: &[Vec<BitRow>],
    fuse: bool,
) -> Result<(ProgramVariant, usize), CompileError> {
    let mut program = Vec::new();
    let mut layer_table = Vec::new();
    let mut bank_plan = Vec::new();
    let mut wrep_count = 0;

    let mut planner = BankPlanner::new();
    let input_words = model.input_len * words_per_position(model.input_channels);
    let mut current = planner.alloc(input_words, 0)?;
    planner.set_live(&current);

    let mut conv_idx = 0;
    for (layer, step) in model.steps.iter().enumerate() {
        match step {
            ExecStep::Conv(c) => {
                let placement = placements[conv_idx];
                let rows = &packed[conv_idx];
                let fused_here = fuse && c.pool_window > 1;
                let write_positions = if fused_here { c.out_len } else { c.n_out };
                let out_words = write_positions * words_per_position(c.c_out);
                let ofm = planner.alloc(out_words, layer)?;

                program.push(pointer_for(&current, &ofm).encode().unwrap());
                if let Residence::WeightSram { row } = placement.residence {
                    program.push(
                        Instruction::WeightReplace {
                            cim_row_base: placement.wl_base as u32,
                            row_count: placement.wl_count as u32,
                            wsram_row: row as u32,
                        }
                        .encode()
                        .unwrap(),
                    );
                    wrep_count += 1;
                }
                let (mode, pool_window) = if fused_here {
                    (MacMode::ConvFusedPool, c.pool_window)
                } else {
                    (MacMode::ConvOnly, 1)
                };
                program.push(
                    Instruction::Mac {
                        mode,
                        n_out: c.n_out as u32,
                        wl_count: placement.wl_count as u32,
                        col_groups: words_per_position(c.c_out) as u32,
                        pool_window,
                        stride: c.stride as u32,
                    }
                    .encode()
                    .unwrap(),
                );
                layer_table.push(MacParams {
                    kind: MacKind::Conv,
                    c_in: c.c_in,
                    c_out: c.c_out,
                    k: c.k,
                    wl_base: placement.wl_base,
                    bias_rows: c.bias_rows(),
                    row_digest: Some(digest_rows(rows)),
                });
                bank_plan.push(LayerBankPlan { ifm: current, ofm });
                current = ofm;
                planner.set_live(&current);

                // Unfused: the pooling becomes its own bypass pass.
                if !fuse && c.pool_window > 1 {
                    let wpp = words_per_position(c.c_out);
                    let pooled_words = c.out_len * wpp;
                    let ofm = planner.alloc(pooled_words, layer)?;
                    program.push(pointer_for(&current, &ofm).encode().unwrap());
                    program.push(
                        Instruction::Mac {
                            mode: MacMode::PoolBypass,
                            n_out: c.n_out as u32,
                            wl_count: 1,
                            col_groups: wpp as u32,
                            pool_window: c.pool_window,
                            stride: 1,
                        }
                        .encode()
                        .unwrap(),
                    );
                    layer_table.push(MacParams {
                        kind: MacKind::Bypass,
                        c_in: c.c_out,
                        c_out: c.c_out,
                        k: 1,
                        wl_base: 0,
                        bias_rows: 0,
                        row_digest: None,
                    });
                    bank_plan.push(LayerBankPlan { ifm: current, ofm });
                    current = ofm;
                    planner.set_live(&current);
                }
                conv_idx += 1;
            }
            ExecStep::Pool(p) => {
                let wpp = words_per_position(p.channels);
                let out_words = p.out_len * wpp;
                let ofm = planner.alloc(out_words, layer)?;
                program.push(pointer_for(&current, &ofm).encode().unwrap());
                program.push(
                    Instruction::Mac {
                        mode: MacMode::PoolBypass,
                        n_out: p.in_len as u32,
                        wl_count: 1,
                        col_groups: wpp as u32,
                        pool_window: p.window,
                        stride: 1,
                    }
                    .encode()
                    .unwrap(),
                );
                layer_table.push(MacParams {
                    kind: MacKind::Bypass,
                    c_in: p.channels,
                    c_out: p.channels,
                    k: 1,
                    wl_base: 0,
                    bias_rows: 0,
                    row_digest: None,
                });
                bank_plan.push(LayerBankPlan { ifm: current, ofm });
                current = ofm;
                planner.set_live(&current);
            }
        }
    }
    program.push(Instruction::Halt.encode().unwrap());
    Ok((
        ProgramVariant {
            program,
            layer_table,
            bank_plan,
        },
        wrep_count,
    ))
}

/// Places every weighted layer, builds the preload images, and emits both
/// program variants.
pub fn map_model(
    model: &ValidatedModel,
    weights: &ModelWeights,
) -> Result<MappedModel, CompileError> {
    let conv_steps: Vec<&ConvStep> = model.conv_steps().collect();
    if weights.layers.len() != conv_steps.len() {
        return Err(CompileError::WeightLayerCount {
            expected: conv_steps.len(),
            got: weights.layers.len(),
        });
    }

    let packed: Vec<Vec<BitRow>> = conv_steps
        .iter()
        .zip(&weights.layers)
        .map(|(step, w)| pack_layer_weights(step, w))
        .collect();

    // First-fit placement in execution order; what does not fit goes to the
    // weight SRAM.
    let mut alloc = RowAllocator::new();
    let mut wsram_cursor = 0usize;
    let mut placements = Vec::with_capacity(conv_steps.len());
    let (mut resident_rows, mut wsram_rows) = (0usize, 0usize);
    for step in &conv_steps {
        let rows = step.rows();
        let placement = if let Some(base) = alloc.alloc(rows) {
            resident_rows += rows;
            Placement {
                wl_base: base,
                wl_count: rows,
                pair_base: 0,
                pair_count: step.c_out,
                residence: Residence::Macro,
            }
        } else {
            if wsram_cursor + rows > WSRAM_ROWS {
                let needed: usize = conv_steps.iter().map(|s| s.rows()).sum();
                return Err(CompileError::Capacity {
                    needed_rows: needed,
                    macro_rows: WORDLINES,
                    wsram_rows: WSRAM_ROWS,
                });
            }
            let row = wsram_cursor;
            wsram_cursor += rows;
            wsram_rows += rows;
            // The wordline base is fixed later by the replacement schedule.
            Placement {
                wl_base: 0,
                wl_count: rows,
                pair_base: 0,
                pair_count: step.c_out,
                residence: Residence::WeightSram { row },
            }
        };
        placements.push(placement);
    }

    // Replacement schedule: each weight-SRAM layer is copied over the rows
    // whose content is least recently needed at that point. `reusable_after`
    // holds, per row, the last execution index that still needs it (-1 for
    // rows never used).
    let mut reusable_after = vec![-1i64; WORDLINES];
    for (exec, p) in placements.iter().enumerate() {
        if p.residence == Residence::Macro {
            for need in &mut reusable_after[p.wl_base..p.wl_base + p.wl_count] {
                *need = exec as i64;
            }
        }
    }
    for (exec, placement) in placements.iter_mut().enumerate() {
        if let Residence::WeightSram { .. } = placement.residence {
            let rows = placement.wl_count;
            let mut best: Option<(i64, usize)> = None; // (max need, base)
            for base in 0..=(WORDLINES - rows) {
                let need = reusable_after[base..base + rows]
                    .iter()
                    .copied()
                    .max()
                    .unwrap();
                if need < exec as i64 && best.is_none_or(|(b, _)| need < b) {
                    best = Some((need, base));
                }
            }
            let Some((_, base)) = best else {
                return Err(CompileError::Schedule { layer: exec, rows });
            };
            placement.wl_base = base;
            for need in &mut reusable_after[base..base + rows] {
                *need = exec as i64;
            }
        }
    }

    // Preload images.
    let mut macro_image = vec![BitRow::zero(); WORDLINES];
    let mut wsram_image = vec![BitRow::zero(); WSRAM_ROWS];
    for (p, rows) in placements.iter().zip(&packed) {
        match p.residence {
            Residence::Macro => {
                macro_image[p.wl_base..p.wl_base + p.wl_count].copy_from_slice(rows);
            }
            Residence::WeightSram { row } => {
                wsram_image[row..row + p.wl_count].copy_from_slice(rows);
            }
        }
    }

    let (fused, wrep_count) = emit_variant(model, &placements, &packed, true)?;
    let (unfused, unfused_error) = match emit_variant(model, &placements, &packed, false) {
        Ok((v, _)) => (Some(v), None),
        Err(e) => (None, Some(e.to_string())),
    };

    Ok(MappedModel {
        model: model.clone(),
        placements,
        macro_image,
        wsram_image,
        fused,
        unfused,
        unfused_error,
        stats: MapStats {
            resident_rows,
            wsram_rows,
            resident_weight_slots: resident_rows as u64 * 512,
            wsram_weight_slots: wsram_rows as u64 * 512,
            wrep_count,
        },
    })
}

/// Rebuilds every layer's weights from the preload images and placements —
/// packing is bijective, so the compiled container is self-describing.
pub fn unpack_model_weights(m: &MappedModel) -> Result<ModelWeights, CompileError> {
    let mut layers = Vec::new();
    for (step, p) in m.model.conv_steps().zip(&m.placements) {
        let rows: &[BitRow] = match p.residence {
            Residence::Macro => &m.macro_image[p.wl_base..p.wl_base + p.wl_count],
            Residence::WeightSram { row } => &m.wsram_image[row..row + p.wl_count],
        };
        let (w, _bias) =
            unpack_layer_weights(rows, step.c_out, step.k, step.c_in, step.bias_rows())?;
        layers.push(w);
    }
    Ok(ModelWeights { layers })
}
