//! Asynchronous training with quantized replay buffers: compares raw and
//! quantized runs under the same schedule, sweeps the codebook size, and
//! shows the effect of synchronizing decoder dictionaries infrequently.
//!
//! Run with: cargo run --release --example quantized_async

use dgl::data::load_dataset;
use dgl::harness::build_partition;
use dgl::presets::desk_config;
use dgl::scheduler::{run_async, run_async_quantized, AsyncCfg, DelayModel, QuantCfg};
use dgl::sync::{OptimSettings, TrainState};
use dgl::vq::SyncPolicy;

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
    let delay = DelayModel::uniform(cfg.modules)?;
    let new_state = |seed: u64| -> dgl::Result<TrainState<f32>> {
        let mut c = cfg.clone();
        c.seed = seed;
        TrainState::new(build_partition(&c, &dataset)?, &optim, c.epochs, bpe, c.batch_size)
    };

    let mut state = new_state(cfg.seed)?;
    let raw = run_async(&dataset, &mut state, &delay, &async_cfg, cfg.seed)?;
    let raw_acc = raw.trace.final_test_acc(cfg.modules)[cfg.modules - 1];
    println!("raw async: final accuracy {raw_acc:.4}, bits sent {:.3e}", raw.bits_total);

    println!("\ncodebook-size sweep (sync every step):");
    println!("  C      acc      bits sent    vs raw");
    for atoms in [2usize, 4, 16, 64, 256] {
        let quant = QuantCfg {
            atoms,
            groups: cfg.groups,
            ema_decay: cfg.ema_decay,
            policy: SyncPolicy::Period(1),
        };
        let mut state = new_state(cfg.seed)?;
        let out = run_async_quantized(&dataset, &mut state, &delay, &async_cfg, &quant, cfg.seed)?;
        let acc = out.trace.final_test_acc(cfg.modules)[cfg.modules - 1];
        println!(
            "  {atoms:<5}  {acc:<7.4}  {:<11.3e}  {:.1}x fewer bits",
            out.bits_total,
            raw.bits_total / out.bits_total
        );
    }

    println!("\ndictionary sync-period sweep (C = 256):");
    println!("  period   acc      staleness seen at reads (lag: count)");
    for period in [1u64, 4, 16, 64] {
        let quant = QuantCfg {
            atoms: 256,
            groups: cfg.groups,
            ema_decay: cfg.ema_decay,
            policy: SyncPolicy::Period(period),
        };
        let mut state = new_state(cfg.seed)?;
        let out = run_async_quantized(&dataset, &mut state, &delay, &async_cfg, &quant, cfg.seed)?;
        let acc = out.trace.final_test_acc(cfg.modules)[cfg.modules - 1];
        let lags: Vec<String> = out.staleness[0]
            .iter()
            .take(4)
            .map(|(lag, count)| format!("{lag}:{count}"))
            .collect();
        println!("  {period:<7}  {acc:<7.4}  {}", lags.join("  "));
    }

    println!("\nnever-synchronized decoders (alpha = 0, dictionaries frozen at seeding):");
    let quant = QuantCfg {
        atoms: 256,
        groups: cfg.groups,
        ema_decay: cfg.ema_decay,
        policy: SyncPolicy::Rate(0.0),
    };
    let mut state = new_state(cfg.seed)?;
    let out = run_async_quantized(&dataset, &mut state, &delay, &async_cfg, &quant, cfg.seed)?;
    let acc = out.trace.final_test_acc(cfg.modules)[cfg.modules - 1];
    println!("  final accuracy {acc:.4} (the network adapts to the fixed code)");
    Ok(())
}
