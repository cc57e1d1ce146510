//! Pooling-write block: fuses max pooling onto the macro output stream.
//!
//! Activations are single bits, so the element-wise max over a pooling
//! window is a bitwise OR of the window's 128-bit words. One `PoolState`
//! pools one word-group stream; a layer with more than 128 output channels
//! is driven through one instance per group.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("pool window must be one of 1/2/4/8, got {0}")]
pub struct PoolWindowError(pub u32);

/// Running state of one pooling unit.
#[derive(Debug, Clone)]
pub struct PoolState {
    window: u32,
    acc: u128,
    fill: u32,
}

impl PoolState {
    pub fn new(window: u32) -> Result<Self, PoolWindowError> {
        match window {
            1 | 2 | 4 | 8 => Ok(PoolState {
                window,
                acc: 0,
                fill: 0,
            }),
            other => Err(PoolWindowError(other)),
        }
    }

    pub fn window(&self) -> u32 {
        self.window
    }

    /// Accumulates one word; emits the pooled word once `window` inputs have
    /// arrived. Window 1 passes every input straight through.
    pub fn step(&mut self, v: u128) -> Option<u128> {
        self.acc |= v;
        self.fill += 1;
        if self.fill == self.window {
            let out = self.acc;
            self.acc = 0;
            self.fill = 0;
            Some(out)
        } else {
            None
        }
    }

    /// Emits a partially filled window, if any. A ragged tail pools the
    /// remaining fewer-than-window elements rather than padding with zeros.
    pub fn flush(&mut self) -> Option<u128> {
        if self.fill == 0 {
            return None;
        }
        let out = self.acc;
        self.acc = 0;
        self.fill = 0;
        Some(out)
    }
}

/// Pooled length of a stream of `n` positions under `window`.
pub fn pooled_len(n: usize, window: u32) -> usize {
    n.div_ceil(window as usize)
}

#[derive(Debug, Error)]
pub enum BypassError {
    #[error(transparent)]
    Window(#[from] PoolWindowError),
    #[error(transparent)]
    Mem(#[from] crate::mem::MemError),
}

/// Outcome of one bypass pass: cycles consumed (one per word moved) and
/// the words written, in order.
pub struct BypassRun {
    pub cycles: u64,
    pub written: Vec<u128>,
}

/// Standalone pooling through the macro-bypass path: reads `positions`
/// positions of `words_per_position` words each at the IFM cursor, pools
/// every word slot over `window`, and writes the pooled positions at the
/// OFM cursor. A ragged tail pools the remainder. There is no overlap on
/// this path — each word read and each word written costs one cycle,
/// stamped consecutively from `start_cycle`.
pub fn bypass_pool(
    mem: &mut crate::mem::FeatureSram,
    positions: usize,
    words_per_position: usize,
    window: u32,
    start_cycle: u64,
) -> Result<BypassRun, BypassError> {
    let mut pools: Vec<PoolState> = (0..words_per_position)
        .map(|_| PoolState::new(window))
        .collect::<Result<_, _>>()?;
    let mut cycle = start_cycle;
    let mut written = Vec::new();
    for _ in 0..positions {
        let mut emitted = Vec::new();
        for pool in pools.iter_mut() {
            let word = mem.read_ifm_next(cycle)?;
            cycle += 1;
            if let Some(out) = pool.step(word) {
                emitted.push(out);
            }
        }
        for out in emitted {
            mem.write_ofm_next(out, cycle)?;
            cycle += 1;
            written.push(out);
        }
    }
    for pool in pools.iter_mut() {
        if let Some(out) = pool.flush() {
            mem.write_ofm_next(out, cycle)?;
            cycle += 1;
            written.push(out);
        }
    }
    Ok(BypassRun {
        cycles: cycle - start_cycle,
        written,
    })
}
