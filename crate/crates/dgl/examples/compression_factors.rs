//! Bandwidth and buffer compression factors for the reference four-module
//! network (batch 128, 32 channel groups): the per-link factors at the
//! standard operating point, a codebook-size sweep, and a buffer-size sweep.
//!
//! Run with: cargo run --example compression_factors

use dgl::harness::compress_report;
use dgl::presets::desk_config;

fn main() -> dgl::Result<()> {
    let mut cfg = desk_config();
    cfg.width = 128;
    cfg.modules = 4;
    cfg.batch_size = 128;
    cfg.groups = 32;
    cfg.dataset = dgl::data::DatasetSpec::Cifar10Binary {
        train_paths: vec![],
        test_path: None,
        subset_n: 0,
    };

    println!("operating point: C = 256 atoms, M = 256 samples, alpha = 1\n");
    let report = compress_report(&cfg, &[256], &[256], 1.0)?;
    print!("{}", report.table());

    println!("\nbandwidth factor vs codebook size (link 1, alpha = 1):");
    let atoms: Vec<u64> = (1..=16).map(|e| 1u64 << e).collect();
    let sweep = compress_report(&cfg, &atoms, &[256], 1.0)?;
    for row in sweep.rows.iter().filter(|r| r.link == 1) {
        println!(
            "  C = {:<6} bits/vector = {:<3} bandwidth = {:.3}",
            row.atoms, row.bits_per_vector, row.bandwidth
        );
    }

    println!("\nbuffer factor vs buffer size (link 1, C = 256):");
    let buffers: Vec<u64> = [128u64, 256, 512, 1024, 4096, 16384, 1 << 20].to_vec();
    let sweep = compress_report(&cfg, &[256], &buffers, 1.0)?;
    for row in sweep.rows.iter().filter(|r| r.link == 1) {
        println!("  M = {:<8} buffer = {:.3}", row.buffer_samples, row.buffer);
    }
    println!("\nthe buffer factor plateaus at 32K / (k ceil(log2 C)) once the dictionary is amortized");
    Ok(())
}
