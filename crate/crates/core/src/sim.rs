//! Slot-exact simulator of the fixed-cycle on-off shaper.
//!
//! Within a slot the arrival (if any) is enqueued before service, so a packet
//! that arrives in an on-slot to an empty buffer leaves in the same slot with
//! zero wait. Waits are `departure_slot - arrival_slot`. Slot `t` is an
//! on-slot iff `t mod tau < g`; the transmission pattern therefore never
//! depends on the arrivals.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ShaperParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub params: ShaperParams,
    pub n_cycles: u64,
    /// Cycles discarded before statistics are collected.
    pub warmup_cycles: u64,
    pub seed: u64,
}

impl SimConfig {
    /// Warmup defaults to a tenth of the run.
    pub fn new(params: ShaperParams, n_cycles: u64, seed: u64) -> Result<Self> {
        if n_cycles == 0 {
            return Err(Error::domain("n_cycles", 0.0, ">= 1"));
        }
        Ok(Self {
            params,
            n_cycles,
            warmup_cycles: n_cycles / 10,
            seed,
        })
    }

    pub fn with_warmup(mut self, warmup_cycles: u64) -> Self {
        self.warmup_cycles = warmup_cycles;
        self
    }

    pub fn total_slots(&self) -> u64 {
        (self.warmup_cycles + self.n_cycles) * u64::from(self.params.tau)
    }
}

/// What went out on the link in one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transmission {
    Real { wait: u64 },
    Dummy,
    Idle,
}

impl Transmission {
    pub fn is_transmission(&self) -> bool {
        !matches!(self, Transmission::Idle)
    }
}

/// Stepwise FCTL shaper fed by Bernoulli arrivals.
#[derive(Debug, Clone)]
pub struct FctlShaper {
    p: f64,
    g: u64,
    tau: u64,
    slot: u64,
    queue: VecDeque<u64>,
    rng: ChaCha8Rng,
}

impl FctlShaper {
    pub fn new(params: &ShaperParams, seed: u64) -> Self {
        Self {
            p: params.p,
            g: u64::from(params.g),
            tau: u64::from(params.tau),
            slot: 0,
            queue: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_on_slot(&self, slot: u64) -> bool {
        slot % self.tau < self.g
    }

    /// Advances one slot and reports the transmission.
    pub fn step(&mut self) -> Transmission {
        let t = self.slot;
        self.slot += 1;
        if self.rng.gen_bool(self.p) {
            self.queue.push_back(t);
        }
        if !self.is_on_slot(t) {
            return Transmission::Idle;
        }
        match self.queue.pop_front() {
            Some(arrived) => Transmission::Real { wait: t - arrived },
            None => Transmission::Dummy,
        }
    }
}

/// Empirical output of one simulation run (measurement window only).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueueStats {
    /// Mean wait of real packets served in the window; 0 when none were.
    pub mean_wait: f64,
    /// Mean queue length right after the last on-slot of each cycle.
    pub mean_end_of_green_queue: f64,
    /// Batch-means standard error of `mean_end_of_green_queue`.
    pub end_of_green_queue_se: f64,
    /// Dummies per slot.
    pub dummy_fraction: f64,
    /// Batch-means standard error of `dummy_fraction`.
    pub dummy_fraction_se: f64,
    /// Mean buffered packets at the end of a slot (Little's law: `p * mean_wait`).
    pub mean_queue_occupancy: f64,
    pub served: u64,
    pub dummies: u64,
    pub on_slots: u64,
    pub total_slots: u64,
    /// Hex SHA-256 of the transmission indicator sequence.
    pub output_pattern_hash: String,
    /// `g - p*tau > 0`; unstable runs are simulated but flagged.
    pub stable: bool,
}

const TARGET_BATCHES: u64 = 100;

/// Runs the shaper for `warmup_cycles + n_cycles` cycles.
pub fn simulate(config: &SimConfig) -> QueueStats {
    let params = &config.params;
    let tau = u64::from(params.tau);
    let g = u64::from(params.g);
    let mut shaper = FctlShaper::new(params, config.seed);

    for _ in 0..config.warmup_cycles * tau {
        shaper.step();
    }

    let batches = TARGET_BATCHES.min(config.n_cycles);
    let cycles_per_batch = config.n_cycles / batches;
    let mut batch_dummy = Vec::with_capacity(batches as usize);
    let mut batch_queue = Vec::with_capacity(batches as usize);
    let (mut acc_dummy, mut acc_queue, mut in_batch) = (0u64, 0u64, 0u64);

    let mut pattern = PatternHasher::default();
    let mut wait_sum: u128 = 0;
    let mut occupancy_sum: u128 = 0;
    let (mut served, mut dummies, mut on_slots) = (0u64, 0u64, 0u64);
    let mut eog_sum: u128 = 0;

    for _ in 0..config.n_cycles {
        let mut cycle_dummies = 0u64;
        let mut end_of_green = 0u64;
        for offset in 0..tau {
            let tx = shaper.step();
            pattern.push(tx.is_transmission());
            match tx {
                Transmission::Real { wait } => {
                    served += 1;
                    wait_sum += u128::from(wait);
                }
                Transmission::Dummy => cycle_dummies += 1,
                Transmission::Idle => {}
            }
            if offset < g {
                on_slots += 1;
            }
            if offset + 1 == g {
                end_of_green = shaper.queue_len() as u64;
            }
            occupancy_sum += shaper.queue_len() as u128;
        }
        dummies += cycle_dummies;
        eog_sum += u128::from(end_of_green);

        if batch_dummy.len() < batches as usize {
            acc_dummy += cycle_dummies;
            acc_queue += end_of_green;
            in_batch += 1;
            if in_batch == cycles_per_batch {
                batch_dummy.push(acc_dummy as f64 / (cycles_per_batch * tau) as f64);
                batch_queue.push(acc_queue as f64 / cycles_per_batch as f64);
                acc_dummy = 0;
                acc_queue = 0;
                in_batch = 0;
            }
        }
    }

    let total_slots = config.n_cycles * tau;
    QueueStats {
        mean_wait: if served == 0 {
            0.0
        } else {
            wait_sum as f64 / served as f64
        },
        mean_end_of_green_queue: eog_sum as f64 / config.n_cycles as f64,
        end_of_green_queue_se: standard_error(&batch_queue),
        dummy_fraction: dummies as f64 / total_slots as f64,
        dummy_fraction_se: standard_error(&batch_dummy),
        mean_queue_occupancy: occupancy_sum as f64 / total_slots as f64,
        served,
        dummies,
        on_slots,
        total_slots,
        output_pattern_hash: pattern.finish(),
        stable: params.is_stable(),
    }
}

/// Runs independent configurations on the rayon pool; results keep input order.
pub fn simulate_many(configs: &[SimConfig]) -> Vec<QueueStats> {
    configs.par_iter().map(simulate).collect()
}

/// The eavesdropper's view: `Y(t)` for `t < horizon`, produced by actually
/// running the shaper on a random arrival realisation.
pub fn output_pattern(config: &SimConfig, horizon: u64) -> Vec<bool> {
    let mut shaper = FctlShaper::new(&config.params, config.seed);
    (0..horizon).map(|_| shaper.step().is_transmission()).collect()
}

pub fn pattern_hash(pattern: &[bool]) -> String {
    let mut hasher = PatternHasher::default();
    for &bit in pattern {
        hasher.push(bit);
    }
    hasher.finish()
}

#[derive(Default)]
struct PatternHasher {
    digest: Sha256,
    byte: u8,
    filled: u8,
    len: u64,
}

impl PatternHasher {
    fn push(&mut self, bit: bool) {
        self.byte = (self.byte << 1) | u8::from(bit);
        self.filled += 1;
        self.len += 1;
        if self.filled == 8 {
            self.digest.update([self.byte]);
            self.byte = 0;
            self.filled = 0;
        }
    }

    fn finish(mut self) -> String {
        if self.filled > 0 {
            self.digest.update([self.byte << (8 - self.filled)]);
        }
        self.digest.update(self.len.to_le_bytes());
        self.digest
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn standard_error(batch_means: &[f64]) -> f64 {
    let n = batch_means.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = batch_means.iter().sum::<f64>() / n as f64;
    let var = batch_means.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// One CSV row of a simulation sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SimRow {
    pub p: f64,
    pub g: u32,
    pub tau: u32,
    pub n_cycles: u64,
    pub seed: u64,
    pub mean_wait: f64,
    pub eq_end_green: f64,
    pub dummy_fraction: f64,
    pub stable_flag: bool,
}

impl SimRow {
    pub fn new(config: &SimConfig, stats: &QueueStats) -> Self {
        Self {
            p: config.params.p,
            g: config.params.g,
            tau: config.params.tau,
            n_cycles: config.n_cycles,
            seed: config.seed,
            mean_wait: stats.mean_wait,
            eq_end_green: stats.mean_end_of_green_queue,
            dummy_fraction: stats.dummy_fraction,
            stable_flag: stats.stable,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(p: f64, g: u32, tau: u32, cycles: u64, seed: u64) -> SimConfig {
        SimConfig::new(ShaperParams::new(p, g, tau).unwrap(), cycles, seed).unwrap()
    }

    #[test]
    fn no_arrivals_means_every_on_slot_is_a_dummy() {
        let stats = simulate(&config(0.0, 3, 10, 100, 7));
        assert_eq!(stats.served, 0);
        assert_eq!(stats.mean_wait, 0.0);
        assert_eq!(stats.dummy_fraction, 0.3);
        assert_eq!(stats.dummies, stats.on_slots);
    }

    #[test]
    fn every_on_slot_transmits_exactly_once() {
        let stats = simulate(&config(0.35, 5, 10, 2_000, 3));
        assert_eq!(stats.served + stats.dummies, stats.on_slots);
        assert_eq!(stats.on_slots, 2_000 * 5);
        assert_eq!(stats.dummy_fraction, stats.dummies as f64 / stats.total_slots as f64);
    }

    #[test]
    fn periodic_pattern() {
        let cfg = config(0.5, 1, 4, 10, 1);
        let y = output_pattern(&cfg, 8);
        assert_eq!(y, vec![true, false, false, false, true, false, false, false]);
    }

    #[test]
    fn pattern_ignores_seed_and_load() {
        let a = output_pattern(&config(0.9, 3, 7, 10, 1), 500);
        let b = output_pattern(&config(0.1, 3, 7, 10, 99), 500);
        assert_eq!(a, b);
        let sa = simulate(&config(0.9, 3, 7, 50, 1));
        let sb = simulate(&config(0.1, 3, 7, 50, 99));
        assert_eq!(sa.output_pattern_hash, sb.output_pattern_hash);
        assert_eq!(sa.output_pattern_hash, pattern_hash(&output_pattern(&config(0.2, 3, 7, 10, 5), 350)));
    }

    #[test]
    fn same_seed_same_stats() {
        let cfg = config(0.3, 5, 10, 5_000, 42);
        assert_eq!(simulate(&cfg), simulate(&cfg));
        assert_ne!(simulate(&cfg).mean_wait, simulate(&config(0.3, 5, 10, 5_000, 43)).mean_wait);
    }

    #[test]
    fn unstable_runs_are_flagged_not_rejected() {
        let params = ShaperParams::new(0.6, 5, 10).unwrap();
        let stats = simulate(&SimConfig::new(params, 200, 1).unwrap());
        assert!(!stats.stable);
        assert_eq!(stats.dummies, 0);
    }

    #[test]
    fn pass_through_has_zero_wait() {
        // Always-on: every arrival leaves in the slot it arrived.
        let stats = simulate(&config(0.4, 10, 10, 1_000, 8));
        assert_eq!(stats.mean_wait, 0.0);
        assert!(stats.served > 0);
    }

    #[test]
    fn warmup_is_configurable() {
        let cfg = config(0.3, 5, 10, 100, 1).with_warmup(0);
        assert_eq!(cfg.total_slots(), 1_000);
        assert_eq!(config(0.3, 5, 10, 100, 1).warmup_cycles, 10);
        assert!(SimConfig::new(ShaperParams::new(0.3, 5, 10).unwrap(), 0, 1).is_err());
    }
}
