//! The activation codec end to end: dictionary seeding from a batch, EMA
//! refinement, reconstruction error vs codebook size, stale-snapshot decoding,
//! and the byte-exact wire formats.
//!
//! Run with: cargo run --example codec_roundtrip

use dgl::seed;
use dgl::tensor::Tensor;
use dgl::vq::{decode, encode, sync_codebooks, wire, Codebook};
use rand::Rng;

fn rel_error(x: &Tensor<f32>, y: &Tensor<f32>) -> f64 {
    let num: f64 = x
        .data()
        .iter()
        .zip(y.data().iter())
        .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
        .sum();
    let den: f64 = x.data().iter().map(|a| f64::from(*a).powi(2)).sum();
    (num / den.max(1e-12)).sqrt()
}

fn main() -> dgl::Result<()> {
    let mut rng = seed::rng(42, "codec-demo", 0);
    // A structured batch: 16 channels on an 8x8 grid, two latent patterns.
    let x = Tensor::<f32>::from_fn([16, 16, 8, 8], |b, c, y, xx| {
        let phase = if b % 2 == 0 { 0.0 } else { 1.3 };
        ((c as f32 * 0.4 + y as f32 * 0.7 + xx as f32 * 0.3 + phase).sin()
            + 0.1 * rng.random_range(-1.0..1.0f32)) as f32
    });

    println!("reconstruction error vs codebook size (k = 8 groups, 30 EMA rounds):");
    for atoms in [1usize, 4, 16, 64, 256] {
        let mut cb = Codebook::init_from_batch(&x, 8, atoms, 7)?;
        for _ in 0..30 {
            cb.ema_update(&x, 0.9)?;
        }
        let q = encode(&x, &cb)?;
        let back = decode(&q, &cb)?;
        println!(
            "  C = {atoms:<4} relative error {:.5}  ({} bits per spatial site)",
            rel_error(&x, &back),
            8 * dgl::vq::bits_per_index(atoms as u64)
        );
    }

    // Stale snapshot: the reader decodes with an older dictionary.
    let mut live = Codebook::init_from_batch(&x, 8, 64, 7)?;
    let snapshot = live.clone();
    for _ in 0..20 {
        live.ema_update(&x, 0.9)?;
    }
    let mut q = encode(&x, &snapshot)?;
    q.labels = (0..x.batch()).map(|b| b % 4).collect();
    let with_snapshot = decode(&q, &snapshot)?;
    let mut resynced = snapshot.clone();
    sync_codebooks(&live, &mut resynced)?;
    println!("\nstale snapshot (version {}) vs live dictionary (version {}):", snapshot.version, live.version);
    println!(
        "  decode with the coding snapshot: relative error {:.5}",
        rel_error(&x, &with_snapshot)
    );
    let q_live = encode(&x, &resynced)?;
    let with_live = decode(&q_live, &resynced)?;
    println!(
        "  re-encode after synchronizing:   relative error {:.5}",
        rel_error(&x, &with_live)
    );

    // Wire formats round-trip byte-exactly.
    let bytes = wire::write_quantized(&q);
    let back = wire::read_quantized(&bytes)?;
    println!("\nquantized batch wire format: {} bytes, roundtrip ok: {}", bytes.len(), back.indices == q.indices);
    let cb_bytes = wire::write_codebook(&live);
    let cb_back: Codebook<f32> = wire::read_codebook(&cb_bytes, 0)?;
    println!(
        "codebook snapshot wire format: {} bytes, version preserved: {}",
        cb_bytes.len(),
        cb_back.version == live.version
    );
    Ok(())
}
