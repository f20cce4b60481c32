use dgl::data::load_dataset;
use dgl::harness::build_partition;
use dgl::presets::desk_config;
use dgl::scheduler::{run_async, run_async_quantized, AsyncCfg, DelayModel, QuantCfg};
use dgl::sync::{OptimSettings, TrainState};
use dgl::vq::SyncPolicy;

fn main() -> dgl::Result<()> {
    let base = desk_config();
    let dataset = load_dataset::<f32>(&base.dataset, base.seed)?;
    let optim = OptimSettings {
        lr: base.lr, momentum: base.momentum, weight_decay: base.weight_decay,
        decay_factor: base.decay_factor, decay_period: base.decay_period,
    };
    let bpe = dataset.batches_per_epoch(base.batch_size);
    let async_cfg = AsyncCfg { buffer_batches: base.buffer_batches(), eval_per_epoch: 1, ..Default::default() };
    let delay = DelayModel::uniform(base.modules)?;
    for seed in [0u64, 1, 2, 3, 4] {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let data = load_dataset::<f32>(&cfg.dataset, seed)?;
        let mut st = TrainState::new(build_partition(&cfg, &data)?, &optim, cfg.epochs, bpe, cfg.batch_size)?;
        let raw = run_async(&data, &mut st, &delay, &async_cfg, seed)?;
        let raw_acc = raw.trace.final_test_acc(cfg.modules)[cfg.modules - 1];
        let mut accs = Vec::new();
        for (atoms, period) in [(256usize, 1u64), (4, 1), (256, 16)] {
            let quant = QuantCfg { atoms, groups: cfg.groups, ema_decay: 0.999, policy: SyncPolicy::Period(period) };
            let mut st = TrainState::new(build_partition(&cfg, &data)?, &optim, cfg.epochs, bpe, cfg.batch_size)?;
            let out = run_async_quantized(&data, &mut st, &delay, &async_cfg, &quant, seed)?;
            accs.push(out.trace.final_test_acc(cfg.modules)[cfg.modules - 1]);
        }
        println!("seed {seed}: raw {raw_acc:.4} c256 {:.4} c4 {:.4} p16 {:.4} | gap256 {:+.2} gap_p16 {:+.2} c4gap {:+.2}",
            accs[0], accs[1], accs[2],
            (raw_acc - accs[0]) * 100.0, (accs[0] - accs[2]) * 100.0, (accs[0] - accs[1]) * 100.0);
    }
    Ok(())
}
