//! Buffer-mediated asynchronous training under simulated speed differences.
//! One module at a time is slowed down by lowering its selection probability;
//! accuracy is compared against the synchronous baseline across slowdown
//! factors.
//!
//! Run with: cargo run --release --example async_replay

use dgl::data::load_dataset;
use dgl::harness::build_partition;
use dgl::presets::desk_config;
use dgl::scheduler::{pmf_from_slowdown, run_async, schedule_report, AsyncCfg, DelayModel};
use dgl::sync::{train_sync, OptimSettings, TrainOpts, TrainState};

fn main() -> dgl::Result<()> {
    let cfg = desk_config();
    let dataset = load_dataset::<f32>(&cfg.dataset, cfg.seed)?;
    let optim = OptimSettings {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        decay_factor: cfg.decay_factor,
        decay_period: cfg.decay_period,
    };
    let bpe = dataset.batches_per_epoch(cfg.batch_size);
    let async_cfg = AsyncCfg {
        buffer_batches: cfg.buffer_batches(),
        eval_per_epoch: cfg.eval_per_epoch,
        ..Default::default()
    };

    let mut sync_state = TrainState::new(
        build_partition(&cfg, &dataset)?,
        &optim,
        cfg.epochs,
        bpe,
        cfg.batch_size,
    )?;
    let sync_out = train_sync(&dataset, &mut sync_state, &TrainOpts::default(), cfg.seed)?;
    let sync_final = sync_out.trace.final_test_acc(cfg.modules)[cfg.modules - 1];
    println!("synchronous baseline final accuracy: {sync_final:.4}");

    // Uniform pmf: asynchrony with no designated slow module.
    let uniform = DelayModel::uniform(cfg.modules)?;
    let mut state = TrainState::new(
        build_partition(&cfg, &dataset)?,
        &optim,
        cfg.epochs,
        bpe,
        cfg.batch_size,
    )?;
    let out = run_async(&dataset, &mut state, &uniform, &async_cfg, cfg.seed)?;
    let acc = out.trace.final_test_acc(cfg.modules)[cfg.modules - 1];
    println!("uniform-pmf async final accuracy:    {acc:.4}  (buffer {} batches)", cfg.buffer_batches());

    println!("\nslowdown sweep (slow module cycled over all positions):");
    println!("  S      mean acc   min acc    max starvation");
    for s in [1.0, 1.2, 1.5, 2.0] {
        let mut accs = Vec::new();
        let mut worst_starve = 0;
        for slow in 1..=cfg.modules {
            let delay = if s == 1.0 {
                DelayModel::uniform(cfg.modules)?
            } else {
                pmf_from_slowdown(cfg.modules, slow, s)?
            };
            let mut state = TrainState::new(
                build_partition(&cfg, &dataset)?,
                &optim,
                cfg.epochs,
                bpe,
                cfg.batch_size,
            )?;
            let out = run_async(&dataset, &mut state, &delay, &async_cfg, cfg.seed)?;
            accs.push(out.trace.final_test_acc(cfg.modules)[cfg.modules - 1]);
            let report = schedule_report(&out);
            worst_starve = worst_starve.max(*report.starvation.iter().max().unwrap_or(&0));
            if s == 1.0 {
                break; // uniform is position independent
            }
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let min = accs.iter().cloned().fold(f64::INFINITY, f64::min);
        println!("  {s:<5}  {mean:<9.4}  {min:<9.4}  {worst_starve}");
    }
    Ok(())
}
