//! Fetch-decode-execute engine and cycle/statistics accounting.
//!
//! Unit costs, all isolated here:
//!
//! * one cycle per 128-bit feature-SRAM access (read or write),
//! * one cycle per sense of one 128-output column group,
//! * one cycle per replaced weight row,
//! * one cycle per pointer instruction, halt is free.
//!
//! A convolution overlaps line-buffer refills with sensing (two-stage
//! pipeline, different resources), so a step costs
//! `max(col_groups, stride * ifm_words_per_position)` cycles; the initial
//! window fill is charged at layer start. Write-backs ride the otherwise
//! idle OFM bank port during the step and never bottleneck: at most one
//! word per sense is ever emitted. The macro-bypass pooling path has no
//! such overlap; it is charged one cycle per word read plus one per word
//! written.
//!
//! Before every convolution MAC the controller checks that the rows it is
//! about to sense hold the layer the side table expects (by digest), so a
//! broken replacement schedule fails loudly instead of computing garbage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::{group_channel_mask, words_per_position, BitRow};
use crate::cim::{CimArray, CimError, MappingMode, VariationParams, WORDLINES};
use crate::compiler::{digest_rows, BankAlloc, MacKind, MacParams, MappedModel};
use crate::isa::{Instruction, IsaError, MacMode};
use crate::mem::{Cursor, FeatureSram, LineBuffer, MemError, WeightSram, BANKS};
use crate::pwb::{PoolState, PoolWindowError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("pc {pc}: {source}")]
    Isa { pc: usize, source: IsaError },
    #[error("pc {pc}, cycle {cycle}: {source}")]
    Mem {
        pc: usize,
        cycle: u64,
        source: MemError,
    },
    #[error("pc {pc}, cycle {cycle}: {source}")]
    Cim {
        pc: usize,
        cycle: u64,
        source: CimError,
    },
    #[error("program ran past its end at pc {pc}, cycle {cycle} (missing HALT)")]
    MissingHalt { pc: usize, cycle: u64 },
    #[error("MAC #{mac_index} has no side-table entry")]
    MissingLayerEntry { mac_index: usize },
    #[error("MAC #{mac_index} disagrees with its side-table entry: {reason}")]
    LayerTableMismatch { mac_index: usize, reason: String },
    #[error("MAC #{mac_index}: rows {wl_base}..{wl_end} do not hold the expected layer (residence violation)")]
    ResidenceViolation {
        mac_index: usize,
        wl_base: usize,
        wl_end: usize,
    },
    #[error(transparent)]
    Pool(#[from] PoolWindowError),
    #[error("throughput is undefined for a run of zero cycles")]
    ZeroCycles,
}

/// Counters accumulated over one run. All monotone while running.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub cycles: u64,
    /// One MAC = one multiply-accumulate: `n_out * C_out * K * C_in` per
    /// convolution.
    pub macs: u64,
    pub sense_events: u64,
    pub feature_reads: [u64; BANKS],
    pub feature_writes: [u64; BANKS],
    pub gated_cycles: [u64; BANKS],
    pub wsram_reads: u64,
    pub wrep_rows: u64,
    pub wrep_count: u64,
}

impl SimStats {
    pub fn total_feature_reads(&self) -> u64 {
        self.feature_reads.iter().sum()
    }
    pub fn total_feature_writes(&self) -> u64 {
        self.feature_writes.iter().sum()
    }
    pub fn total_gated_cycles(&self) -> u64 {
        self.gated_cycles.iter().sum()
    }
}

/// `macs / (cycles / freq_hz) / 1e9`. `two_ops_per_mac` doubles the count
/// for comparisons against conventions that count multiply and accumulate
/// separately.
pub fn compute_throughput(
    stats: &SimStats,
    freq_hz: f64,
    two_ops_per_mac: bool,
) -> Result<f64, SimError> {
    if stats.cycles == 0 {
        return Err(SimError::ZeroCycles);
    }
    let ops = stats.macs as f64 * if two_ops_per_mac { 2.0 } else { 1.0 };
    Ok(ops / (stats.cycles as f64 / freq_hz) / 1e9)
}

/// Per-event energies in microjoules. Every entry is required; a table
/// missing one does not parse. Outputs are modeled, relative numbers — the
/// table is user calibration, not silicon data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyCosts {
    pub sense_event_uj: f64,
    pub sram_read_uj: f64,
    pub sram_write_uj: f64,
    pub wrep_row_uj: f64,
    pub active_bank_cycle_uj: f64,
    pub gated_bank_cycle_uj: f64,
}

impl EnergyCosts {
    pub fn zero() -> Self {
        EnergyCosts {
            sense_event_uj: 0.0,
            sram_read_uj: 0.0,
            sram_write_uj: 0.0,
            wrep_row_uj: 0.0,
            active_bank_cycle_uj: 0.0,
            gated_bank_cycle_uj: 0.0,
        }
    }

    pub fn unit() -> Self {
        EnergyCosts {
            sense_event_uj: 1.0,
            sram_read_uj: 1.0,
            sram_write_uj: 1.0,
            wrep_row_uj: 1.0,
            active_bank_cycle_uj: 1.0,
            gated_bank_cycle_uj: 1.0,
        }
    }
}

/// Dot product of counters and per-event costs. A weight-replacement row
/// is one event (it covers the SRAM read and the macro write of that row);
/// feature reads/writes include every bank access the run performed.
pub fn model_energy(stats: &SimStats, costs: &EnergyCosts) -> f64 {
    let gated = stats.total_gated_cycles();
    let active = stats.cycles * BANKS as u64 - gated;
    stats.sense_events as f64 * costs.sense_event_uj
        + stats.total_feature_reads() as f64 * costs.sram_read_uj
        + stats.total_feature_writes() as f64 * costs.sram_write_uj
        + stats.wrep_rows as f64 * costs.wrep_row_uj
        + active as f64 * costs.active_bank_cycle_uj
        + gated as f64 * costs.gated_bank_cycle_uj
}

/// The machine-readable run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsDoc {
    #[serde(flatten)]
    pub stats: SimStats,
    pub freq_hz: f64,
    pub latency_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gops: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gops_two_ops_per_mac: Option<f64>,
    /// Present only when a cost table was supplied; modeled, relative.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modeled_energy_uj: Option<f64>,
    pub sigma_sa: f64,
    pub seed: u64,
    pub variant: String,
}

impl StatsDoc {
    pub fn new(
        stats: SimStats,
        freq_hz: f64,
        var: VariationParams,
        variant: &str,
        costs: Option<&EnergyCosts>,
    ) -> Self {
        let gops = compute_throughput(&stats, freq_hz, false).ok();
        let gops2 = compute_throughput(&stats, freq_hz, true).ok();
        StatsDoc {
            stats,
            freq_hz,
            latency_s: stats.cycles as f64 / freq_hz,
            gops,
            gops_two_ops_per_mac: gops2,
            modeled_energy_uj: costs.map(|c| model_energy(&stats, c)),
            sigma_sa: var.sigma_sa,
            seed: var.seed,
            variant: variant.to_string(),
        }
    }
}

/// The whole machine: macro, memories, line buffer, program and side
/// tables.
pub struct System {
    cim: CimArray,
    mem: FeatureSram,
    wsram: WeightSram,
    lb: LineBuffer,
    /// Row-image mirror of the macro for the residence digest; updated on
    /// exactly the same paths (preload, weight replacement) that program
    /// the array.
    row_shadow: Vec<BitRow>,
    program: Vec<u32>,
    layer_table: Vec<MacParams>,
    var: VariationParams,
    capture: bool,
    input_alloc: Option<BankAlloc>,

    cycles: u64,
    macs: u64,
    sense_events: u64,
    wrep_rows: u64,
    wrep_count: u64,
    captured: Vec<Vec<u128>>,
}

impl System {
    /// A bare system running `program` with no preloaded weights and an
    /// empty side table. Only pointer/halt programs (and bypass MACs over
    /// preloaded feature data) make sense here; it exists for small
    /// experiments and raw-program runs.
    pub fn new_raw(program: Vec<u32>, var: VariationParams) -> Self {
        System {
            cim: CimArray::new(MappingMode::Twm),
            mem: FeatureSram::new(),
            wsram: WeightSram::new(),
            lb: LineBuffer::new(),
            row_shadow: vec![BitRow::zero(); WORDLINES],
            program,
            layer_table: Vec::new(),
            var,
            capture: false,
            input_alloc: None,
            cycles: 0,
            macs: 0,
            sense_events: 0,
            wrep_rows: 0,
            wrep_count: 0,
            captured: Vec::new(),
        }
    }

    /// Builds a system from a compiled model: weights preloaded into the
    /// macro and the weight SRAM, program and side tables from the chosen
    /// variant (`unfused` selects the separate-pooling stream).
    pub fn from_mapped(mapped: &MappedModel, unfused: bool) -> Result<Self, SimError> {
        let variant = if unfused {
            mapped
                .unfused
                .as_ref()
                .ok_or_else(|| SimError::LayerTableMismatch {
                    mac_index: 0,
                    reason: mapped
                        .unfused_error
                        .clone()
                        .unwrap_or_else(|| "no unfused variant".to_string()),
                })?
        } else {
            &mapped.fused
        };
        let mut sys = System::new_raw(variant.program.clone(), VariationParams::ideal());
        sys.layer_table = variant.layer_table.clone();
        sys.input_alloc = variant.bank_plan.first().map(|p| p.ifm);
        sys.cim
            .program_rows(0, &mapped.macro_image)
            .map_err(|e| SimError::Cim {
                pc: 0,
                cycle: 0,
                source: e,
            })?;
        sys.row_shadow.copy_from_slice(&mapped.macro_image);
        sys.wsram = WeightSram::from_rows(mapped.wsram_image.clone());
        Ok(sys)
    }

    pub fn set_variation(&mut self, var: VariationParams) {
        self.var = var;
    }

    pub fn set_capture(&mut self, capture: bool) {
        self.capture = capture;
    }

    /// Preloads the first layer's input feature map. Free: evaluation
    /// assumes weights and inputs are already on chip.
    pub fn load_input(&mut self, words: &[u128]) -> Result<(), SimError> {
        let alloc = self.input_alloc.unwrap_or(BankAlloc {
            bank: 0,
            word: 0,
            span: false,
            words: words.len(),
        });
        self.mem
            .preload(alloc.bank, alloc.word, words)
            .map_err(|e| SimError::Mem {
                pc: 0,
                cycle: 0,
                source: e,
            })
    }

    /// Words written by each MAC instruction, in emission order, from the
    /// last captured run.
    pub fn captured_outputs(&self) -> &[Vec<u128>] {
        &self.captured
    }

    pub fn memory(&self) -> &FeatureSram {
        &self.mem
    }

    fn advance(&mut self, n: u64) {
        self.cycles += n;
        self.mem.accrue_gated(n);
    }

    fn stats(&self) -> SimStats {
        let mut s = SimStats {
            cycles: self.cycles,
            macs: self.macs,
            sense_events: self.sense_events,
            wsram_reads: self.wsram.reads(),
            wrep_rows: self.wrep_rows,
            wrep_count: self.wrep_count,
            ..SimStats::default()
        };
        for (b, c) in self.mem.counters().iter().enumerate() {
            s.feature_reads[b] = c.reads;
            s.feature_writes[b] = c.writes;
            s.gated_cycles[b] = c.gated_cycles;
        }
        s
    }

    /// Executes instructions in order until HALT, returning the counters.
    pub fn run(&mut self) -> Result<SimStats, SimError> {
        self.captured.clear();
        let mut pc = 0usize;
        let mut mac_index = 0usize;
        loop {
            let Some(&word) = self.program.get(pc) else {
                return Err(SimError::MissingHalt {
                    pc,
                    cycle: self.cycles,
                });
            };
            let instr = Instruction::decode(word).map_err(|e| SimError::Isa { pc, source: e })?;
            match instr {
                Instruction::Halt => break,
                Instruction::Pointer {
                    ifm_bank,
                    ifm_word,
                    ofm_bank,
                    ofm_word,
                    ifm_span,
                    ofm_span,
                } => {
                    self.mem
                        .apply_pointer(
                            Cursor {
                                bank: ifm_bank as usize,
                                word: ifm_word as usize,
                                span: ifm_span,
                            },
                            Cursor {
                                bank: ofm_bank as usize,
                                word: ofm_word as usize,
                                span: ofm_span,
                            },
                        )
                        .map_err(|e| SimError::Mem {
                            pc,
                            cycle: self.cycles,
                            source: e,
                        })?;
                    self.advance(1);
                }
                Instruction::WeightReplace {
                    cim_row_base,
                    row_count,
                    wsram_row,
                } => {
                    let rows = self
                        .wsram
                        .fetch_rows(wsram_row as usize, row_count as usize)
                        .map_err(|e| SimError::Mem {
                            pc,
                            cycle: self.cycles,
                            source: e,
                        })?
                        .to_vec();
                    self.cim
                        .program_rows(cim_row_base as usize, &rows)
                        .map_err(|e| SimError::Cim {
                            pc,
                            cycle: self.cycles,
                            source: e,
                        })?;
                    self.row_shadow[cim_row_base as usize..(cim_row_base + row_count) as usize]
                        .copy_from_slice(&rows);
                    self.wrep_rows += row_count as u64;
                    self.wrep_count += 1;
                    self.advance(row_count as u64);
                }
                Instruction::Mac {
                    mode,
                    n_out,
                    wl_count,
                    col_groups,
                    pool_window,
                    stride,
                } => {
                    match mode {
                        MacMode::ConvOnly | MacMode::ConvFusedPool => self.exec_conv(
                            pc,
                            mac_index,
                            n_out as usize,
                            wl_count as usize,
                            col_groups as usize,
                            pool_window,
                            stride as usize,
                        )?,
                        MacMode::PoolBypass => self.exec_bypass(
                            pc,
                            mac_index,
                            n_out as usize,
                            col_groups as usize,
                            pool_window,
                        )?,
                    }
                    mac_index += 1;
                }
            }
            pc += 1;
        }
        Ok(self.stats())
    }

    fn layer_entry(&self, mac_index: usize) -> Result<MacParams, SimError> {
        self.layer_table
            .get(mac_index)
            .cloned()
            .ok_or(SimError::MissingLayerEntry { mac_index })
    }

    #[allow(clippy::too_many_arguments)]
    fn exec_conv(
        &mut self,
        pc: usize,
        mac_index: usize,
        n_out: usize,
        wl_count: usize,
        col_groups: usize,
        pool_window: u32,
        stride: usize,
    ) -> Result<(), SimError> {
        let params = self.layer_entry(mac_index)?;
        let mismatch = |reason: String| SimError::LayerTableMismatch { mac_index, reason };
        if params.kind != MacKind::Conv {
            return Err(mismatch("side table expects a bypass MAC here".into()));
        }
        if col_groups != words_per_position(params.c_out) {
            return Err(mismatch(format!(
                "col_groups {} vs {} output channels",
                col_groups, params.c_out
            )));
        }
        if wl_count != params.k * params.c_in + params.bias_rows {
            return Err(mismatch(format!(
                "wl_count {} vs K*C_in+bias = {}",
                wl_count,
                params.k * params.c_in + params.bias_rows
            )));
        }
        let wl_base = params.wl_base;
        if wl_base + wl_count > WORDLINES {
            return Err(mismatch(format!(
                "rows {wl_base}+{wl_count} overflow the array"
            )));
        }

        // Residence check: the rows this MAC senses must hold the layer the
        // compiler placed there.
        if let Some(expected) = &params.row_digest {
            let got = digest_rows(&self.row_shadow[wl_base..wl_base + wl_count]);
            if &got != expected {
                return Err(SimError::ResidenceViolation {
                    mac_index,
                    wl_base,
                    wl_end: wl_base + wl_count,
                });
            }
        }

        let (k, c_in, c_out) = (params.k, params.c_in, params.c_out);
        let wpp_in = words_per_position(c_in);
        let senses = col_groups as u64;
        let prefetch = (stride * wpp_in) as u64;

        let mut pools: Vec<PoolState> = (0..col_groups)
            .map(|_| PoolState::new(pool_window))
            .collect::<Result<_, _>>()?;
        let mut captured = Vec::new();

        // Positions stream in once each; the window is assembled from the
        // most recent K of them.
        fn read_position(
            sys: &mut System,
            positions: &mut Vec<Vec<u128>>,
            wpp_in: usize,
            pc: usize,
            at: u64,
        ) -> Result<(), SimError> {
            let mut words = Vec::with_capacity(wpp_in);
            for g in 0..wpp_in {
                let w = sys
                    .mem
                    .read_ifm_next(at + g as u64)
                    .map_err(|e| SimError::Mem {
                        pc,
                        cycle: at + g as u64,
                        source: e,
                    })?;
                words.push(w);
            }
            positions.push(words);
            Ok(())
        }
        let mut positions: Vec<Vec<u128>> = Vec::with_capacity(k + (n_out - 1) * stride);

        // Initial window fill.
        for p in 0..k {
            let at = self.cycles + (p * wpp_in) as u64;
            read_position(self, &mut positions, wpp_in, pc, at)?;
        }
        self.advance((k * wpp_in) as u64);

        for t in 0..n_out {
            // Present the window to the wordlines: line-buffer bit
            // wl_base + kk*C_in + c carries x[t*stride + kk][c]; bias rows
            // are driven with constant ones.
            self.lb.clear();
            for kk in 0..k {
                let pos = &positions[t * stride + kk];
                for c in 0..c_in {
                    if pos[c / 128] >> (c % 128) & 1 != 0 {
                        self.lb.set(wl_base + kk * c_in + c, true);
                    }
                }
            }
            for j in 0..params.bias_rows {
                self.lb.set(wl_base + k * c_in + j, true);
            }

            let step_start = self.cycles;
            let mut emitted: Vec<u128> = Vec::new();
            for (g, pool) in pools.iter_mut().enumerate() {
                let noise = self.var.offsets(self.sense_events);
                let raw = self
                    .cim
                    .mac_cycle(self.lb.as_row(), wl_base, wl_count, g, noise.as_ref())
                    .map_err(|e| SimError::Cim {
                        pc,
                        cycle: self.cycles,
                        source: e,
                    })?;
                self.sense_events += 1;
                if let Some(word) = pool.step(raw & group_channel_mask(c_out, g)) {
                    emitted.push(word);
                }
            }
            // Ragged tail: the final partial window drains on the last step.
            if t + 1 == n_out {
                for pool in pools.iter_mut() {
                    if let Some(word) = pool.flush() {
                        emitted.push(word);
                    }
                }
            }
            for (i, &word) in emitted.iter().enumerate() {
                self.mem
                    .write_ofm_next(word, step_start + i as u64)
                    .map_err(|e| SimError::Mem {
                        pc,
                        cycle: step_start + i as u64,
                        source: e,
                    })?;
            }
            if self.capture {
                captured.extend_from_slice(&emitted);
            }

            // Prefetch the next window's fresh positions while sensing.
            if t + 1 < n_out {
                for s in 0..stride {
                    let at = self.cycles + (s * wpp_in) as u64;
                    read_position(self, &mut positions, wpp_in, pc, at)?;
                }
                self.advance(senses.max(prefetch));
            } else {
                self.advance(senses);
            }
        }

        self.macs += (n_out * c_out * k * c_in) as u64;
        if self.capture {
            self.captured.push(captured);
        }
        Ok(())
    }

    fn exec_bypass(
        &mut self,
        pc: usize,
        mac_index: usize,
        n_positions: usize,
        col_groups: usize,
        pool_window: u32,
    ) -> Result<(), SimError> {
        let params = self.layer_entry(mac_index)?;
        if params.kind != MacKind::Bypass {
            return Err(SimError::LayerTableMismatch {
                mac_index,
                reason: "side table expects a convolution MAC here".into(),
            });
        }
        if col_groups != words_per_position(params.c_in) {
            return Err(SimError::LayerTableMismatch {
                mac_index,
                reason: format!("col_groups {} vs {} channels", col_groups, params.c_in),
            });
        }
        let run = crate::pwb::bypass_pool(
            &mut self.mem,
            n_positions,
            col_groups,
            pool_window,
            self.cycles,
        )
        .map_err(|e| match e {
            crate::pwb::BypassError::Window(w) => SimError::Pool(w),
            crate::pwb::BypassError::Mem(source) => SimError::Mem {
                pc,
                cycle: self.cycles,
                source,
            },
        })?;
        self.advance(run.cycles);
        if self.capture {
            self.captured.push(run.written);
        }
        Ok(())
    }
}
