//! Central finite-difference verification of every module's backward pass on
//! the desk-scale network, in 64-bit precision.
//!
//! Run with: cargo run --example gradient_check

use dgl::data::load_dataset;
use dgl::gradcheck::{gradient_check, GradCheckCfg};
use dgl::harness::build_partition;
use dgl::presets::desk_config;

fn main() -> dgl::Result<()> {
    let cfg = desk_config();
    let dataset = load_dataset::<f64>(&cfg.dataset, cfg.seed)?;
    let mut partition = build_partition(&cfg, &dataset)?;
    let (x0, y) = dataset.probe_batch(2);

    let mut x = x0;
    let mut worst: f64 = 0.0;
    for j in 1..=cfg.modules {
        let probe = partition.module_probe(j, x.clone(), y.clone());
        let report = gradient_check(
            &probe,
            GradCheckCfg {
                max_per_param: Some(512),
                ..Default::default()
            },
        )?;
        println!(
            "module {j}: max relative error {:.3e} ({} of {} parameters checked)",
            report.max_rel_error, report.checked, report.total_params
        );
        worst = worst.max(report.max_rel_error);
        x = partition.forward_module(j, &x, true)?;
    }
    println!("worst relative error across modules: {worst:.3e}");
    assert!(worst < 1e-5, "backward pass disagrees with finite differences");
    println!("all backward passes match central finite differences");
    Ok(())
}
