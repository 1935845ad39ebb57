//! Packet-timestamp traces: slotting, on-off shaping and a DTW distance.
//!
//! The distance bins each trace into packet counts per `bin` seconds, aligns
//! the two count series by dynamic time warping inside a band of `window`
//! seconds, and divides the warped cost by the path length times the largest
//! bin count, which lands in `[0, 1]`.

use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_SLOT: f64 = 0.01;
pub const DEFAULT_G: u32 = 5;
pub const DEFAULT_TAU: u32 = 10;
pub const DEFAULT_WINDOW: f64 = 0.2;
pub const DEFAULT_BIN: f64 = 0.005;

/// Guards `floor(t / slot)` against timestamps a rounding error below a slot
/// boundary.
const SLOT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PacketTrace {
    timestamps: Vec<f64>,
    pub label: String,
}

impl PacketTrace {
    pub fn new(timestamps: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if let Some(&t) = timestamps.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
            return Err(Error::domain("timestamp", t, "finite and >= 0"));
        }
        if timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Degenerate("timestamps must be non-decreasing"));
        }
        Ok(Self {
            timestamps,
            label: label.into(),
        })
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn last(&self) -> Option<f64> {
        self.timestamps.last().copied()
    }

    /// Shifts the trace so that its first packet is at time zero.
    pub fn rebased(&self) -> Self {
        let t0 = self.timestamps.first().copied().unwrap_or(0.0);
        Self {
            timestamps: self.timestamps.iter().map(|t| t - t0).collect(),
            label: self.label.clone(),
        }
    }

    /// Packets strictly after `horizon` are dropped.
    pub fn truncated(&self, horizon: f64) -> Self {
        let keep = self.timestamps.partition_point(|&t| t <= horizon);
        Self {
            timestamps: self.timestamps[..keep].to_vec(),
            label: self.label.clone(),
        }
    }

    /// Per-slot arrival rate: packets over the slots from zero through the
    /// last packet's slot.
    pub fn empirical_rate(&self, slot: f64) -> f64 {
        match self.last() {
            Some(t) => self.len() as f64 / (slot_index(t, slot) + 1) as f64,
            None => 0.0,
        }
    }
}

fn slot_index(t: f64, slot: f64) -> u64 {
    (t / slot + SLOT_EPS).floor() as u64
}

/// Rounds every timestamp down to the start of its slot.
pub fn slot_trace(trace: &PacketTrace, slot: f64) -> Result<PacketTrace> {
    if !(slot > 0.0) {
        return Err(Error::domain("slot", slot, "> 0"));
    }
    Ok(PacketTrace {
        timestamps: trace.timestamps.iter().map(|&t| slot_index(t, slot) as f64 * slot).collect(),
        label: trace.label.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShapedPacket {
    pub time: f64,
    pub real: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapedTrace {
    pub label: String,
    pub transmissions: Vec<ShapedPacket>,
}

impl ShapedTrace {
    /// All transmission times, real and dummy alike: what an observer sees.
    pub fn times(&self) -> PacketTrace {
        PacketTrace {
            timestamps: self.transmissions.iter().map(|t| t.time).collect(),
            label: self.label.clone(),
        }
    }

    /// Time of the last transmission, or zero for an empty session.
    pub fn drain_time(&self) -> f64 {
        self.transmissions.last().map_or(0.0, |t| t.time)
    }

    pub fn truncated(&self, horizon: f64) -> Self {
        let keep = self.transmissions.partition_point(|t| t.time <= horizon);
        Self {
            label: self.label.clone(),
            transmissions: self.transmissions[..keep].to_vec(),
        }
    }

    /// SHA-256 of the transmission times, ignoring the real/dummy flags.
    pub fn timing_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.transmissions {
            hasher.update(t.time.to_bits().to_le_bytes());
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShapeReport {
    pub original_duration: f64,
    pub shaped_duration: f64,
    pub original_count: usize,
    pub real_count: usize,
    pub dummy_count: usize,
    /// Mean time from a packet's slot to its transmission.
    pub mean_buffer_delay: f64,
}

impl ShapeReport {
    pub fn dummy_ratio(&self) -> f64 {
        self.dummy_count as f64 / self.real_count as f64
    }
}

/// Runs the trace through the on-off shaper starting at time zero.
///
/// Slot `k` starts at `k * slot` and is an on-slot iff `k mod tau < g`. Every
/// on-slot transmits the oldest buffered packet, or a dummy when the buffer is
/// empty, until the slot in which the last packet leaves. A packet arriving
/// during an on-slot with an empty buffer leaves in that slot.
pub fn shape_trace(trace: &PacketTrace, slot: f64, g: u32, tau: u32) -> Result<(ShapedTrace, ShapeReport)> {
    if !(slot > 0.0) {
        return Err(Error::domain("slot", slot, "> 0"));
    }
    if g == 0 || g > tau {
        return Err(Error::domain("g", f64::from(g), "1 <= g <= tau"));
    }
    let arrivals: Vec<u64> = trace.timestamps.iter().map(|&t| slot_index(t, slot)).collect();
    let mut transmissions = Vec::new();
    let mut next = 0;
    let mut queued = 0usize;
    let mut total_delay = 0u64;
    let mut k = 0u64;
    while next < arrivals.len() || queued > 0 {
        while next < arrivals.len() && arrivals[next] == k {
            next += 1;
            queued += 1;
        }
        if k % u64::from(tau) < u64::from(g) {
            let real = queued > 0;
            if real {
                // FIFO: the departing packet is the oldest still buffered.
                total_delay += k - arrivals[next - queued];
                queued -= 1;
            }
            transmissions.push(ShapedPacket {
                time: k as f64 * slot,
                real,
            });
        }
        k += 1;
    }
    let real_count = transmissions.iter().filter(|t| t.real).count();
    let shaped = ShapedTrace {
        label: trace.label.clone(),
        transmissions,
    };
    let report = ShapeReport {
        original_duration: trace.last().unwrap_or(0.0),
        shaped_duration: shaped.drain_time(),
        original_count: trace.len(),
        real_count,
        dummy_count: shaped.transmissions.len() - real_count,
        mean_buffer_delay: if real_count == 0 {
            0.0
        } else {
            total_delay as f64 * slot / real_count as f64
        },
    };
    Ok((shaped, report))
}

fn binned(trace: &PacketTrace, bin: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    for &t in &trace.timestamps {
        let i = ((t / bin + SLOT_EPS).floor() as usize).min(bins - 1);
        counts[i] += 1.0;
    }
    counts
}

/// Banded DTW returning `(cost, path length)`. Ties between predecessors go
/// to the shorter path, which keeps the result symmetric in its arguments.
fn banded_dtw(a: &[f64], b: &[f64], band: usize) -> (f64, usize) {
    let (n, m) = (a.len(), b.len());
    let band = band.max(n.abs_diff(m));
    let inf = (f64::INFINITY, usize::MAX);
    let mut prev = vec![inf; m + 1];
    let mut cur = vec![inf; m + 1];
    prev[0] = (0.0, 0);
    let better = |x: (f64, usize), y: (f64, usize)| if y.0 < x.0 || (y.0 == x.0 && y.1 < x.1) { y } else { x };
    for i in 1..=n {
        cur.fill(inf);
        let lo = i.saturating_sub(band).max(1);
        let hi = (i + band).min(m);
        for j in lo..=hi {
            let best = better(better(prev[j - 1], prev[j]), cur[j - 1]);
            if best.0.is_finite() {
                cur[j] = (best.0 + (a[i - 1] - b[j - 1]).abs(), best.1 + 1);
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Normalised DTW distance with the default bin width.
pub fn dtw_distance(a: &PacketTrace, b: &PacketTrace, window: f64) -> Result<f64> {
    dtw_distance_binned(a, b, window, DEFAULT_BIN)
}

/// Normalised DTW distance between the count series of `a` and `b`, binned
/// at `bin` seconds over a common horizon and warped at most `window`
/// seconds.
pub fn dtw_distance_binned(a: &PacketTrace, b: &PacketTrace, window: f64, bin: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Degenerate("distance needs non-empty traces"));
    }
    if !(bin > 0.0) {
        return Err(Error::domain("bin", bin, "> 0"));
    }
    if !(window >= 0.0) {
        return Err(Error::domain("window", window, ">= 0"));
    }
    let horizon = a.last().unwrap().max(b.last().unwrap());
    let bins = (horizon / bin + SLOT_EPS).floor() as usize + 1;
    let (sa, sb) = (binned(a, bin, bins), binned(b, bin, bins));
    let peak = sa.iter().chain(&sb).copied().fold(0.0, f64::max);
    let (cost, len) = banded_dtw(&sa, &sb, (window / bin).round() as usize);
    Ok(if cost == 0.0 { 0.0 } else { cost / (len as f64 * peak) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    Unmodified,
    Slotted,
    Shaped,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Unmodified, Variant::Slotted, Variant::Shaped];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unmodified => "unmodified",
            Variant::Slotted => "slotted",
            Variant::Shaped => "shaped",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusOptions {
    pub slot: f64,
    pub g: u32,
    pub tau: u32,
    pub window: f64,
    pub bin: f64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            slot: DEFAULT_SLOT,
            g: DEFAULT_G,
            tau: DEFAULT_TAU,
            window: DEFAULT_WINDOW,
            bin: DEFAULT_BIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantStats {
    pub variant: &'static str,
    pub mean_distance: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairDistance {
    pub variant: &'static str,
    pub a: String,
    pub b: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusReport {
    pub stats: Vec<VariantStats>,
    pub pairs: Vec<PairDistance>,
    pub shape_reports: Vec<ShapeReport>,
}

impl CorpusReport {
    pub fn variant(&self, v: Variant) -> &VariantStats {
        self.stats.iter().find(|s| s.variant == v.name()).expect("every variant is reported")
    }
}

/// Pairwise distances for the unmodified, slotted and shaped versions of a
/// corpus. Shaped pairs are compared on transmission times up to the shorter
/// drain time.
pub fn corpus_report(traces: &[PacketTrace], options: &CorpusOptions) -> Result<CorpusReport> {
    if traces.len() < 2 {
        return Err(Error::Degenerate("corpus needs at least two traces"));
    }
    let slotted = traces.iter().map(|t| slot_trace(t, options.slot)).collect::<Result<Vec<_>>>()?;
    let (shaped, shape_reports): (Vec<_>, Vec<_>) = traces
        .iter()
        .map(|t| shape_trace(t, options.slot, options.g, options.tau))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let index_pairs: Vec<(usize, usize)> = (0..traces.len()).flat_map(|i| (i + 1..traces.len()).map(move |j| (i, j))).collect();

    let mut stats = Vec::new();
    let mut pairs = Vec::new();
    for variant in Variant::ALL {
        let distances = index_pairs
            .par_iter()
            .map(|&(i, j)| match variant {
                Variant::Unmodified => dtw_distance_binned(&traces[i], &traces[j], options.window, options.bin),
                Variant::Slotted => dtw_distance_binned(&slotted[i], &slotted[j], options.window, options.bin),
                Variant::Shaped => {
                    let horizon = shaped[i].drain_time().min(shaped[j].drain_time());
                    let a = shaped[i].truncated(horizon).times();
                    let b = shaped[j].truncated(horizon).times();
                    dtw_distance_binned(&a, &b, options.window, options.bin)
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let n = distances.len() as f64;
        let mean = distances.iter().sum::<f64>() / n;
        let variance = distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        stats.push(VariantStats {
            variant: variant.name(),
            mean_distance: mean,
            variance,
        });
        pairs.extend(index_pairs.iter().zip(&distances).map(|(&(i, j), &distance)| PairDistance {
            variant: variant.name(),
            a: traces[i].label.clone(),
            b: traces[j].label.clone(),
            distance,
        }));
    }
    Ok(CorpusReport {
        stats,
        pairs,
        shape_reports,
    })
}

/// Reads one timestamp (seconds) per line; a non-numeric first line is taken
/// as a header.
pub fn read_trace_csv(reader: impl Read, label: impl Into<String>) -> Result<PacketTrace> {
    let mut csv = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut timestamps = Vec::new();
    for (k, record) in csv.records().enumerate() {
        let record = record?;
        let field = record.get(0).unwrap_or("").trim();
        if field.is_empty() {
            continue;
        }
        match field.parse::<f64>() {
            Ok(t) => timestamps.push(t),
            Err(_) if k == 0 => continue,
            Err(_) => {
                return Err(Error::Parse {
                    line: k + 1,
                    message: format!("`{field}` is not a timestamp"),
                })
            }
        }
    }
    PacketTrace::new(timestamps, label)
}

/// Traffic signature of one synthetic site: geometric bursts of packets a
/// few milliseconds apart, separated by longer exponential gaps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteProfile {
    pub burst_mean: f64,
    pub intra_gap: f64,
    pub inter_gap: f64,
}

impl SiteProfile {
    /// Busy profile `k`, at roughly 0.02 to 0.3 packets per 10 ms slot.
    pub fn busy(k: usize) -> Self {
        Self {
            burst_mean: 3.0 + 2.0 * (k % 4) as f64,
            intra_gap: 0.002 + 0.003 * (k % 5) as f64,
            inter_gap: 0.1 + 0.08 * k as f64,
        }
    }

    /// Sparse profile `k`, well under one packet per 10 ms slot on average.
    pub fn sparse(k: usize) -> Self {
        Self {
            burst_mean: 2.0 + (k % 3) as f64,
            intra_gap: 0.01,
            inter_gap: 5.0 + 0.5 * k as f64,
        }
    }

    pub fn generate(&self, duration: f64, seed: u64, label: impl Into<String>) -> PacketTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let intra = Exp::new(1.0 / self.intra_gap).expect("positive gap");
        let inter = Exp::new(1.0 / self.inter_gap).expect("positive gap");
        // Support starts at zero failures, so add one.
        let burst = Geometric::new(1.0 / self.burst_mean).expect("burst mean >= 1");
        let mut timestamps = Vec::new();
        let mut t = rng.gen_range(0.0..0.05);
        while t < duration {
            for _ in 0..burst.sample(&mut rng) + 1 {
                timestamps.push(t);
                t += intra.sample(&mut rng);
            }
            t += inter.sample(&mut rng);
        }
        PacketTrace {
            timestamps,
            label: label.into(),
        }
    }
}

/// `n` busy sites of about `duration` seconds each.
pub fn synthetic_corpus(n: usize, duration: f64, seed: u64) -> Vec<PacketTrace> {
    (0..n)
        .map(|k| SiteProfile::busy(k).generate(duration, seed.wrapping_mul(1000).wrapping_add(k as u64), format!("site{k:02}")))
        .collect()
}

/// `n` sparse sites of about `duration` seconds each.
pub fn sparse_corpus(n: usize, duration: f64, seed: u64) -> Vec<PacketTrace> {
    (0..n)
        .map(|k| SiteProfile::sparse(k).generate(duration, seed.wrapping_mul(1000).wrapping_add(500 + k as u64), format!("sparse{k:02}")))
        .collect()
}
