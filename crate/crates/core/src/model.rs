//! Closed-form model of the on-off (fixed-cycle traffic light) shaper.
//!
//! A cycle is `tau` slots long. The first `g` slots of every cycle are
//! on-slots: each transmits exactly one packet, real if one is buffered and a
//! dummy otherwise. Arrivals are Bernoulli with probability `p` per slot.
//!
//! Two parameterisations are exposed. The integer one takes `(p, g, tau)`
//! directly. The relaxed one takes a real duty cycle `c = g / tau` and is the
//! form used by the allocator, which works in terms of the information rate
//! `p` and the dummy rate `d = c - p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-flow shaping configuration in integer-slot form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShaperParams {
    /// Probability of an arrival in a slot.
    pub p: f64,
    /// On-slots per cycle.
    pub g: u32,
    /// Cycle length in slots.
    pub tau: u32,
    /// Seconds per slot. Metadata only, none of the formulas use it.
    pub slot_duration: f64,
}

impl ShaperParams {
    pub fn new(p: f64, g: u32, tau: u32) -> Result<Self> {
        check_probability(p)?;
        check_cycle(g, tau)?;
        Ok(Self {
            p,
            g,
            tau,
            slot_duration: 0.01,
        })
    }

    pub fn with_slot_duration(mut self, seconds: f64) -> Result<Self> {
        if !(seconds > 0.0 && seconds.is_finite()) {
            return Err(Error::domain("slot_duration", seconds, "> 0"));
        }
        self.slot_duration = seconds;
        Ok(self)
    }

    pub fn duty_cycle(&self) -> f64 {
        f64::from(self.g) / f64::from(self.tau)
    }

    /// `g - p*tau`, positive iff the queue is stable.
    pub fn service_margin(&self) -> f64 {
        f64::from(self.g) - self.p * f64::from(self.tau)
    }

    pub fn is_stable(&self) -> bool {
        stability_check(self.p, self.g, self.tau)
    }

    pub fn derived(&self) -> Result<ShaperDerived> {
        let queue = miller_queue_estimate(self.p, self.g, self.tau)?;
        Ok(ShaperDerived {
            expected_queue: queue.value,
            queue_branch: queue.branch,
            mean_wait: mean_waiting_time(self.p, self.g, self.tau)?,
            dummy_rate: dummy_rate(self.p, self.g, self.tau)?,
        })
    }
}

/// Equilibrium quantities of a stable shaper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShaperDerived {
    /// Expected queue length at the end of the on-phase (packets).
    pub expected_queue: f64,
    pub queue_branch: QueueBranch,
    /// Mean per-packet wait (slots).
    pub mean_wait: f64,
    /// Dummy transmissions per slot.
    pub dummy_rate: f64,
}

/// Which side of the `max{., 0}` in Miller's estimate was active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueueBranch {
    /// The estimate was clamped to zero (`2p*tau <= g`, or `c >= 2p`).
    Clamped,
    /// The rational expression was positive and returned as is.
    Unclamped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueEstimate {
    pub value: f64,
    pub branch: QueueBranch,
}

fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::domain("p", p, "0 <= p <= 1"))
    }
}

fn check_cycle(g: u32, tau: u32) -> Result<()> {
    if g == 0 || g > tau {
        return Err(Error::domain("g", f64::from(g), "1 <= g <= tau"));
    }
    Ok(())
}

fn check_integer_form(p: f64, g: u32, tau: u32) -> Result<()> {
    check_probability(p)?;
    check_cycle(g, tau)?;
    if p == 1.0 {
        return Err(Error::Degenerate("p = 1 cannot be stabilised by any duty cycle"));
    }
    let margin = f64::from(g) - p * f64::from(tau);
    if margin <= 0.0 {
        return Err(Error::Unstable { margin });
    }
    Ok(())
}

fn check_relaxed_form(p: f64, c: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Degenerate("relaxed waiting time needs 0 < p < 1"));
    }
    if !(c <= 1.0) {
        return Err(Error::domain("c", c, "p < c <= 1"));
    }
    if c <= p {
        return Err(Error::Unstable { margin: c - p });
    }
    Ok(())
}

/// `true` iff `g - p*tau > 0`. The boundary `g = p*tau` is unstable.
pub fn stability_check(p: f64, g: u32, tau: u32) -> bool {
    f64::from(g) - p * f64::from(tau) > 0.0
}

/// Miller's estimate of the expected end-of-green queue,
/// `max{(2p*tau - g)(1 - p) / (2(g - p*tau)), 0}`.
pub fn miller_queue_estimate(p: f64, g: u32, tau: u32) -> Result<QueueEstimate> {
    check_integer_form(p, g, tau)?;
    let (g, tau) = (f64::from(g), f64::from(tau));
    let excess = 2.0 * p * tau - g;
    if excess <= 0.0 {
        return Ok(QueueEstimate {
            value: 0.0,
            branch: QueueBranch::Clamped,
        });
    }
    Ok(QueueEstimate {
        value: excess * (1.0 - p) / (2.0 * (g - p * tau)),
        branch: QueueBranch::Unclamped,
    })
}

/// Mean per-packet waiting time in slots, using Miller's queue estimate.
pub fn mean_waiting_time(p: f64, g: u32, tau: u32) -> Result<f64> {
    if p == 0.0 {
        return Err(Error::Degenerate("waiting time is undefined without arrivals (p = 0)"));
    }
    let queue = miller_queue_estimate(p, g, tau)?;
    Ok(waiting_time_given_queue(p, g, tau, queue.value))
}

/// Mean wait for a given end-of-green queue `expected_queue`. With the exact
/// equilibrium queue (e.g. measured by simulation) this reproduces the
/// simulated wait; `mean_waiting_time` plugs in Miller's estimate.
pub fn waiting_time_given_queue(p: f64, g: u32, tau: u32, expected_queue: f64) -> f64 {
    let (g, tau) = (f64::from(g), f64::from(tau));
    let off = tau - g;
    off / ((1.0 - p) * tau) * (expected_queue / p + (off + 1.0) / 2.0)
}

/// Relaxed form of Miller's estimate for a real duty cycle `c`.
pub fn relaxed_queue_estimate(p: f64, c: f64) -> Result<QueueEstimate> {
    check_relaxed_form(p, c)?;
    let excess = 2.0 * p - c;
    if excess <= 0.0 {
        return Ok(QueueEstimate {
            value: 0.0,
            branch: QueueBranch::Clamped,
        });
    }
    Ok(QueueEstimate {
        value: excess * (1.0 - p) / (2.0 * (c - p)),
        branch: QueueBranch::Unclamped,
    })
}

/// `w(p, c) = (1 - c)/(1 - p) * [E(q)/p + 1/(2c)]`.
pub fn mean_waiting_time_relaxed(p: f64, c: f64) -> Result<f64> {
    let queue = relaxed_queue_estimate(p, c)?;
    Ok((1.0 - c) / (1.0 - p) * (queue.value / p + 1.0 / (2.0 * c)))
}

/// Waiting time in terms of the information rate `p` and dummy rate `d`:
///
/// `w = (1 - (p + d)) / (2(1 - p)) * [max{(p - d)(1 - p)/(p d), 0} + 1/(p + d)]`
///
/// Algebraically identical to `mean_waiting_time_relaxed(p, p + d)` but
/// evaluated through its own expression, so the two can cross-check.
pub fn waiting_time_pd(p: f64, d: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Degenerate("waiting time needs 0 < p < 1"));
    }
    if d <= 0.0 {
        return Err(Error::Unstable { margin: d });
    }
    let c = p + d;
    if c > 1.0 {
        return Err(Error::domain("p + d", c, "<= 1"));
    }
    let backlog = ((p - d) * (1.0 - p) / (p * d)).max(0.0);
    Ok((1.0 - c) / (2.0 * (1.0 - p)) * (backlog + 1.0 / c))
}

/// Long-run dummy transmissions per slot, `g/tau - p`.
///
/// Unlike the waiting-time formulas this admits `p = 0` (a pure dummy
/// stream) and the critical boundary `g = p*tau`, where the rate is zero.
pub fn dummy_rate(p: f64, g: u32, tau: u32) -> Result<f64> {
    check_probability(p)?;
    check_cycle(g, tau)?;
    if p == 1.0 {
        return Err(Error::Degenerate("p = 1 cannot be stabilised by any duty cycle"));
    }
    let margin = f64::from(g) - p * f64::from(tau);
    if margin < 0.0 {
        return Err(Error::Unstable { margin });
    }
    Ok((f64::from(g) / f64::from(tau) - p).max(0.0))
}

/// Integer on-times `g_k`, one per cycle, whose running sum tracks the real
/// target `k * c * tau` to within one slot.
///
/// Each prefix sum is the ceiling of its target, so every `g_k` lies in
/// `{floor(c*tau), ceil(c*tau)}` and `0 <= sum_k g_k - K*c*tau < 1`.
pub fn quantize_schedule(c: f64, tau: u32, horizon: usize) -> Result<Vec<u32>> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::domain("c", c, "0 < c <= 1"));
    }
    if tau == 0 {
        return Err(Error::domain("tau", 0.0, ">= 1"));
    }
    let per_cycle = c * f64::from(tau);
    // Products such as 2 * 3.5 may land a hair above an integer.
    const SNAP: f64 = 1e-9;
    let mut schedule = Vec::with_capacity(horizon);
    let mut issued: u64 = 0;
    for k in 1..=horizon {
        let target = k as f64 * per_cycle;
        let cumulative = ((target - SNAP).ceil().max(0.0) as u64).max(issued);
        schedule.push((cumulative - issued) as u32);
        issued = cumulative;
    }
    Ok(schedule)
}
