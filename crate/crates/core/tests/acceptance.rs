//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fail.

use std::process::ExitCode;
use std::time::Instant;

use fairshape::allocator::{brute_force_small, check_feasible, solve_allocation, solve_many, FlowSpec, SolverOptions};
use fairshape::convexity::{finite_difference_hessian, second_derivatives};
use fairshape::model::{mean_waiting_time, ShaperParams};
use fairshape::sim::{output_pattern, simulate, simulate_many, SimConfig};
use fairshape::trace::{
    corpus_report, shape_trace, sparse_corpus, synthetic_corpus, CorpusOptions, PacketTrace, SiteProfile, Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn waiting_time_curve() -> Outcome {
    let (p, tau) = (0.3, 100);
    let configs: Vec<_> = (31..=100)
        .map(|g| SimConfig::new(ShaperParams::new(p, g, tau).unwrap(), 100_000, 2024).unwrap())
        .collect();
    let mut failures = Vec::new();
    let mut worst: (f64, u32) = (0.0, 0);
    for (cfg, stats) in configs.iter().zip(simulate_many(&configs)) {
        let g = cfg.params.g;
        let model = mean_waiting_time(p, g, tau).unwrap();
        let err = (stats.mean_wait - model).abs();
        let rel = err / model;
        let allowed = if f64::from(g) >= 1.1 * p * f64::from(tau) {
            (0.05 * model).max(0.5)
        } else {
            0.2 * model
        };
        if rel > worst.0 {
            worst = (rel, g);
        }
        if err > allowed {
            failures.push(format!("g={g} sim={:.3} model={model:.3} ({:+.1}%)", stats.mean_wait, 100.0 * (model / stats.mean_wait - 1.0)));
        }
    }
    let detail = if failures.is_empty() {
        format!("70 points, worst relative gap {:.2}% at g={}", 100.0 * worst.0, worst.1)
    } else {
        format!("{} of 70 points outside tolerance: {}", failures.len(), failures.join("; "))
    };
    outcome(failures.is_empty(), detail)
}

fn dummy_fraction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let configs: Vec<_> = (0..20)
        .map(|i| {
            let tau = rng.gen_range(2..=100u32);
            let g = rng.gen_range(1..=tau);
            let c = f64::from(g) / f64::from(tau);
            let p = rng.gen_range(0.0..c * 0.95);
            let cycles = 1_000_000u64.div_ceil(u64::from(tau));
            SimConfig::new(ShaperParams::new(p, g, tau).unwrap(), cycles, 100 + i).unwrap()
        })
        .collect();
    let mut worst = 0.0f64;
    for (cfg, stats) in configs.iter().zip(simulate_many(&configs)) {
        let expected = cfg.params.duty_cycle() - cfg.params.p;
        worst = worst.max((stats.dummy_fraction - expected).abs() / stats.dummy_fraction_se);
    }
    outcome(worst <= 3.0, format!("20 configurations, worst deviation {worst:.2} standard errors"))
}

fn curvature() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    let mut worst = 0.0f64;
    let mut positive = true;
    while checked < 100 {
        // Off the kink and clear of c = p and c = 1, where w_pp -> 0 and the
        // stencil loses relative accuracy.
        let p: f64 = rng.gen_range(0.02..0.95);
        let c = rng.gen_range(p + 0.02..1.0);
        if c > 0.98 || (c - 2.0 * p).abs() < 0.01 {
            continue;
        }
        let exact = second_derivatives(p, c).unwrap();
        let fd = finite_difference_hessian(p, c, 1e-4).unwrap();
        for (x, y) in [(exact.w_pp, fd.w_pp), (exact.w_cc, fd.w_cc), (exact.w_pc, fd.w_pc)] {
            worst = worst.max((x - y).abs() / x.abs());
        }
        positive &= exact.w_pp > 0.0 && exact.w_cc > 0.0;
        checked += 1;
    }
    let counter = second_derivatives(0.5, 0.9).unwrap();
    outcome(
        worst <= 1e-3 && positive && counter.min_eigenvalue() < 0.0,
        format!(
            "100 points, worst relative gap {worst:.2e}, w_pp, w_cc > 0: {positive}, min eigenvalue at (0.5, 0.9) = {:.4}",
            counter.min_eigenvalue()
        ),
    )
}

fn privacy() -> Outcome {
    let horizon = 50_000;
    let mut same = true;
    for (g, tau) in [(5, 10), (31, 100), (1, 7)] {
        let a = SimConfig::new(ShaperParams::new(0.05, g, tau).unwrap(), 1, 1).unwrap();
        let b = SimConfig::new(ShaperParams::new(0.9 * f64::from(g) / f64::from(tau), g, tau).unwrap(), 1, 2).unwrap();
        same &= output_pattern(&a, horizon) == output_pattern(&b, horizon);
        same &= simulate(&SimConfig::new(a.params, 500, 3).unwrap()).output_pattern_hash
            == simulate(&SimConfig::new(b.params, 500, 4).unwrap()).output_pattern_hash;
    }
    let traces: Vec<PacketTrace> = vec![
        SiteProfile::busy(0).generate(10.0, 1, "a"),
        SiteProfile::busy(7).generate(10.0, 2, "b"),
        SiteProfile::sparse(1).generate(30.0, 3, "c"),
    ];
    for (g, tau) in [(5, 10), (1, 100)] {
        let shaped: Vec<_> = traces.iter().map(|t| shape_trace(t, 0.01, g, tau).unwrap().0).collect();
        for x in &shaped {
            for y in &shaped {
                let horizon = x.drain_time().min(y.drain_time());
                let (tx, ty) = (x.truncated(horizon).times(), y.truncated(horizon).times());
                same &= tx.timestamps() == ty.timestamps();
            }
        }
    }
    outcome(same, "simulator patterns and shaped transmission times identical across loads, seeds and traces")
}

fn solver() -> Outcome {
    let opts = SolverOptions::default();
    let started = Instant::now();
    let pair = |s1: f64, private2: bool| vec![FlowSpec::private("1", s1), FlowSpec::new("2", 10.0, 1.0, private2).unwrap()];
    let sigmas: Vec<f64> = (5..=15).map(f64::from).collect();
    let full: Vec<_> = sigmas.iter().map(|&s| pair(s, true)).collect();
    let mixed: Vec<_> = sigmas.iter().map(|&s| pair(s, false)).collect();
    let full_r: Vec<_> = solve_many(&full, &opts).into_iter().map(|r| r.unwrap()).collect();
    let mixed_r: Vec<_> = solve_many(&mixed, &opts).into_iter().map(|r| r.unwrap()).collect();
    let symmetric = pair(10.0, true);
    let sym_r = solve_allocation(&symmetric, &opts).unwrap();
    let singles = [vec![FlowSpec::private("1", 10.0)], vec![FlowSpec::private("1", 2.0)]];
    let single_r: Vec<_> = singles.iter().map(|f| solve_allocation(f, &opts).unwrap()).collect();

    let all: Vec<(&Vec<FlowSpec>, &_)> = full
        .iter()
        .zip(&full_r)
        .chain(mixed.iter().zip(&mixed_r))
        .chain(std::iter::once((&symmetric, &sym_r)))
        .chain(singles.iter().zip(&single_r))
        .collect();

    let monotone = all
        .iter()
        .all(|(_, r)| r.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-6));
    let feasible = all.iter().all(|(f, r)| check_feasible(&r.p_star, &r.d_star, f, 1e-4).feasible);
    let sym_gap = (sym_r.p_star[0] - sym_r.p_star[1]).abs();
    // p*_1 may drift up by the solver's rate tolerance (1e-3) per step.
    let p_steps: Vec<f64> = full_r.windows(2).map(|w| w[1].p_star[0] - w[0].p_star[0]).collect();
    let d_steps: Vec<f64> = full_r.windows(2).map(|w| w[1].d_star[0] - w[0].d_star[0]).collect();
    let max_p_step = p_steps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_d_step = d_steps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sweep_ok = max_p_step <= 1e-3 && max_d_step <= 1e-6;
    let dominance = mixed_r.iter().zip(&full_r).all(|(m, f)| m.p_star[0] >= f.p_star[0]);
    let mut oracle_worst = f64::NEG_INFINITY;
    for (flows, r) in &all {
        let grid = brute_force_small(flows, 1000).unwrap().unwrap();
        oracle_worst = oracle_worst.max((r.objective() - grid.objective) / grid.objective.abs());
    }
    let oracle = oracle_worst <= 0.05;
    let elapsed = started.elapsed().as_secs_f64();
    outcome(
        monotone && feasible && sym_gap < 1e-3 && sweep_ok && dominance && oracle,
        format!(
            "(a) monotone {monotone} (b) feasible {feasible} (c) |p1-p2| = {sym_gap:.1e} (d) max step p*1 {max_p_step:+.1e}, d*1 {max_d_step:+.1e} \
             (e) dominance {dominance} (f) worst excess over grid {:+.2}% [{elapsed:.1}s]",
            100.0 * oracle_worst
        ),
    )
}

fn trace_ordering() -> Outcome {
    let corpus = synthetic_corpus(10, 15.0, 0);
    let report = corpus_report(&corpus, &CorpusOptions::default()).unwrap();
    let [u, s, h] = Variant::ALL.map(|v| report.variant(v).clone());
    let zero = report.pairs.iter().filter(|p| p.variant == "shaped").all(|p| p.distance == 0.0);
    outcome(
        u.mean_distance > s.mean_distance && s.mean_distance > h.mean_distance && h.variance < s.variance && h.variance < u.variance && zero,
        format!(
            "means {:.5} > {:.5} > {:.5}, variances {:.2e} / {:.2e} / {:.2e}, shaped pairs all zero: {zero}",
            u.mean_distance, s.mean_distance, h.mean_distance, u.variance, s.variance, h.variance
        ),
    )
}

fn trade_off() -> Outcome {
    let slot = 0.01;
    let mut ok = true;
    let mut worst_ratio = 0.0f64;
    let mut worst_delay = 0.0f64;
    for t in synthetic_corpus(10, 15.0, 0) {
        let (_, r) = shape_trace(&t, slot, 5, 10).unwrap();
        let p = t.empirical_rate(slot);
        let expected = (0.5 - p) / p;
        let gap = (r.dummy_ratio() - expected).abs() / expected;
        worst_ratio = worst_ratio.max(gap);
        worst_delay = worst_delay.max(r.mean_buffer_delay / (10.0 * slot));
        ok &= gap <= 0.1 && r.mean_buffer_delay <= 2.0 * 10.0 * slot;
    }
    let mut sparse_ok = true;
    for t in sparse_corpus(5, 120.0, 0) {
        sparse_ok &= t.empirical_rate(slot) < 0.01;
        let (_, half) = shape_trace(&t, slot, 5, 10).unwrap();
        let (_, low) = shape_trace(&t, slot, 1, 100).unwrap();
        sparse_ok &= low.dummy_ratio() < half.dummy_ratio() && low.mean_buffer_delay > half.mean_buffer_delay;
    }
    outcome(
        ok && sparse_ok,
        format!(
            "g/tau=0.5: worst ratio gap {:.2}%, worst delay {worst_delay:.2} cycles; g/tau=0.01 on sparse traces: {sparse_ok}",
            100.0 * worst_ratio
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("1 waiting time vs simulation", waiting_time_curve),
        ("2 dummy fraction", dummy_fraction),
        ("3 curvature", curvature),
        ("4 privacy determinism", privacy),
        ("5 solver", solver),
        ("6 trace distances", trace_ordering),
        ("7 dummy/delay trade-off", trade_off),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let started = Instant::now();
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} criterion {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            started.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
