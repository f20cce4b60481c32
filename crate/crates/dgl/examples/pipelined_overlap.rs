//! Worker-per-module pipelining: with a per-module processing delay of d, the
//! steady-state batch period approaches d instead of J*d, while the parameter
//! trajectories stay identical to the single-threaded synchronous loop.
//!
//! Run with: cargo run --example pipelined_overlap

use dgl::data::load_dataset;
use dgl::harness::build_partition;
use dgl::presets::desk_config;
use dgl::sync::{train_pipelined, train_sync, OptimSettings, TrainOpts, TrainState};
use std::time::Instant;

fn main() -> dgl::Result<()> {
    let mut cfg = desk_config();
    cfg.epochs = 2;
    let dataset = load_dataset::<f64>(&cfg.dataset, cfg.seed)?;
    let optim = OptimSettings {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        decay_factor: cfg.decay_factor,
        decay_period: cfg.decay_period,
    };
    let bpe = dataset.batches_per_epoch(cfg.batch_size);
    let new_state = || -> dgl::Result<TrainState<f64>> {
        TrainState::new(
            build_partition(&cfg, &dataset)?,
            &optim,
            cfg.epochs,
            bpe,
            cfg.batch_size,
        )
    };

    // Trajectory equality in 64-bit: same inputs in the same order per module.
    let opts = TrainOpts {
        snapshot_every: Some(16),
        ..Default::default()
    };
    let mut sync_state = new_state()?;
    let sync_out = train_sync(&dataset, &mut sync_state, &opts, cfg.seed)?;
    let mut pipe_state = new_state()?;
    let pipe_out = train_pipelined(&dataset, &mut pipe_state, &opts, cfg.seed)?;
    let mut max_diff = 0.0f64;
    for (a, b) in sync_out.snapshots.iter().zip(pipe_out.snapshots.iter()) {
        for (x, y) in a.params.iter().zip(b.params.iter()) {
            max_diff = max_diff.max((x - y).abs());
        }
    }
    println!(
        "max parameter difference across {} snapshots: {max_diff}",
        sync_out.snapshots.len()
    );

    // Throughput overlap with an artificial 20 ms per-module delay. The
    // network is shrunk until compute is negligible next to the delay, so
    // the overlap is visible even on a box with fewer cores than workers
    // (sleeping workers do not contend for cores).
    let mut tiny = cfg.clone();
    tiny.width = 2;
    tiny.epochs = 1;
    tiny.batch_size = 8;
    tiny.dataset = dgl::data::DatasetSpec::SyntheticGaussians {
        classes: 4,
        channels: 1,
        spatial: 8,
        train_n: 192,
        test_n: 16,
        noise: 1.0,
    };
    let tiny_data = load_dataset::<f64>(&tiny.dataset, tiny.seed)?;
    let tiny_bpe = tiny_data.batches_per_epoch(tiny.batch_size);
    let delay_ms = 20u64;
    let batches = u64::from(tiny.epochs) * tiny_bpe as u64;
    let modules = tiny.modules as u64;
    let opts = TrainOpts {
        sleep_ms: vec![delay_ms; tiny.modules],
        ..Default::default()
    };
    let mut state = TrainState::new(
        build_partition(&tiny, &tiny_data)?,
        &optim,
        tiny.epochs,
        tiny_bpe,
        tiny.batch_size,
    )?;
    let start = Instant::now();
    train_pipelined(&tiny_data, &mut state, &opts, tiny.seed)?;
    let elapsed = start.elapsed().as_millis() as u64;
    println!(
        "\n{batches} batches, {modules} workers, {delay_ms} ms injected delay per module per batch"
    );
    println!("  serial-delay estimate (J * d * batches): {} ms", modules * delay_ms * batches);
    println!("  pipelined wall time:                     {elapsed} ms");
    println!(
        "  steady-state period per batch: ~{:.1} ms (ideal overlap: {delay_ms} ms)",
        elapsed as f64 / batches as f64
    );
    Ok(())
}
