//! Convergence-theory checks on an instrumented quadratic where every
//! constant is exact: the per-step descent inequality under input-distribution
//! drift, the accumulation bound over a full run, step-size classification,
//! and the accumulation-rate summary.
//!
//! Run with: cargo run --example theory_probe

use dgl::diagnostics::{
    check_schedule, rate_summary, ScheduleClass, ScheduleFamily, TheoryProbe,
};

fn main() -> dgl::Result<()> {
    // Quadratic risk (L = 1), bounded mixture inputs (exact G), and
    // geometrically decaying drift c_t = 0.5 * 2^-t.
    let probe = TheoryProbe::new(4, 0.25, vec![0.2; 30], 10_000, 0)?;
    println!(
        "probe: dim 4, L = {}, G = {}, c_0 = {}",
        probe.smoothness(),
        probe.variance_bound(),
        probe.c_t(0)
    );

    let descent = probe.check_descent();
    println!("\nper-step descent inequality (margin <= 0 up to 3 s.e. means it holds):");
    for s in descent.steps.iter().step_by(5) {
        println!(
            "  t = {:>2}: margin {:>9.5} (3 s.e. {:.5}) {}",
            s.t,
            s.mean,
            3.0 * s.std_error,
            if s.holds { "holds" } else { "VIOLATED" }
        );
    }
    println!("  all {} steps hold: {}", descent.steps.len(), descent.all_hold);

    let acc = probe.check_accumulation();
    println!(
        "\naccumulation bound: sum eta E||grad||^2 = {:.4} <= {:.4} (holds: {})",
        acc.lhs_mean, acc.rhs, acc.holds
    );

    println!("\nstep-size families over 10^4 steps:");
    for (name, family) in [
        ("1/t", ScheduleFamily::Harmonic { scale: 1.0 }),
        ("constant 0.1", ScheduleFamily::Constant(0.1)),
        ("1/sqrt(t)", ScheduleFamily::InvSqrt { scale: 1.0 }),
        (
            "step decay 0.1 x 0.2^(t/15)",
            ScheduleFamily::StepDecay { base: 0.1, factor: 0.2, period: 15 },
        ),
    ] {
        let r = check_schedule(family, 10_000);
        let verdict = match r.class {
            ScheduleClass::RobbinsMonro => "divergent sum, convergent squares",
            ScheduleClass::NotRobbinsMonro => "fails the conditions",
            ScheduleClass::FiniteHorizon => "finite horizon, informational only",
        };
        println!(
            "  {name:<28} sum {:>9.3}  sum sq {:>8.4}  -> {verdict}",
            r.sum, r.sum_sq
        );
    }

    // Rate summary: running-min gradient norm against the bound series.
    let eta: Vec<f64> = vec![0.2; 30];
    let drift: Vec<f64> = (0..30).map(|t| probe.c_t(t)).collect();
    let grad_sq: Vec<f64> = (0..30).map(|t| 0.8 * 0.85f64.powi(t as i32)).collect();
    let summary = rate_summary(
        &grad_sq,
        &eta,
        &drift,
        probe.smoothness(),
        probe.variance_bound(),
        probe.risk(&[0.0; 4]),
    )?;
    println!("\naccumulation-rate summary (running min vs bound):");
    for t in (0..30).step_by(6) {
        println!(
            "  t = {:>2}: running min {:.4}  bound {:.4}",
            t, summary.running_min[t], summary.bound[t]
        );
    }
    Ok(())
}
