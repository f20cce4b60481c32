//! The experiment driver behind the CLI: builds the dataset and partition
//! from a config, dispatches to the requested training mode, and persists the
//! run artifacts (metrics CSV, resolved config, summary). Deterministic modes
//! replay byte-identically from (config, seed).

use crate::config::{BufferUnit, ExperimentConfig, Mode};
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::net::{build_reference_net, reference_plan, NetConfig, Partition};
use crate::scheduler::{
    pmf_from_slowdown, run_async, run_async_quantized, AsyncCfg, DelayModel, QuantCfg,
};
use crate::sync::{train_pipelined, train_sequential, train_sync, OptimSettings, TrainOpts, TrainState};
use crate::tensor::Scalar;
use crate::vq::{bandwidth_compression, bits_per_index, buffer_compression};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DGL_OUT_DIR";

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub final_test_acc: Vec<f64>,
    pub bits_total: f64,
    /// Per-link bandwidth compression factors (quantized modes only).
    pub bandwidth_ratios: Vec<f64>,
    /// Per-link buffer compression factors (quantized modes only).
    pub buffer_ratios: Vec<f64>,
    pub starvation: Vec<u64>,
    pub notes: Vec<String>,
    pub out_dir: PathBuf,
}

impl RunSummary {
    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "per-module test accuracy:");
        for (i, acc) in self.final_test_acc.iter().enumerate() {
            let _ = writeln!(s, "  module {}: {:.4}", i + 1, acc);
        }
        if self.bits_total > 0.0 {
            let _ = writeln!(s, "total bits sent: {}", self.bits_total);
        }
        if !self.bandwidth_ratios.is_empty() {
            let joined: Vec<String> = self.bandwidth_ratios.iter().map(|r| format!("{r:.3}")).collect();
            let _ = writeln!(s, "bandwidth compression per link: {}", joined.join(", "));
        }
        if !self.buffer_ratios.is_empty() {
            let joined: Vec<String> = self.buffer_ratios.iter().map(|r| format!("{r:.3}")).collect();
            let _ = writeln!(s, "buffer compression per link: {}", joined.join(", "));
        }
        if self.starvation.iter().any(|s| *s > 0) {
            let joined: Vec<String> = self.starvation.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "starvation per module: {}", joined.join(", "));
        }
        for note in &self.notes {
            let _ = writeln!(s, "note: {note}");
        }
        s
    }
}

/// Builds the reference conv-stack partition for any module count from 1 to
/// 6 (the strict 4/6 family plus truncations for degenerate experiments).
pub fn build_partition<T: Scalar>(
    cfg: &ExperimentConfig,
    dataset: &Dataset<T>,
) -> Result<Partition<T>> {
    let net = NetConfig {
        width: cfg.width,
        modules: cfg.modules,
        classes: dataset.classes,
        in_channels: dataset.channels,
        spatial: dataset.spatial,
        aux: cfg.aux,
    };
    if cfg.modules == 4 || cfg.modules == 6 {
        return build_reference_net(&net, cfg.seed);
    }
    if cfg.modules == 0 || cfg.modules > 6 {
        return Err(Error::InvalidArgument(format!(
            "module count {} outside the supported 1..=6",
            cfg.modules
        )));
    }
    // Truncations of the same family for J in {1, 2, 3, 5}.
    let plan = reference_plan(cfg.width, cfg.modules);
    let mut trunks = Vec::new();
    let mut in_ch = dataset.channels;
    for (j, &out_ch) in plan.iter().enumerate() {
        let index = j + 1;
        let mut specs = Vec::new();
        if index == 2 || index == 4 {
            specs.push(crate::layers::LayerSpec::MaxPool2);
        }
        specs.push(crate::layers::LayerSpec::Conv {
            in_channels: in_ch,
            out_channels: out_ch,
            kernel: 3,
        });
        specs.push(crate::layers::LayerSpec::BatchNorm { channels: out_ch });
        specs.push(crate::layers::LayerSpec::Relu);
        trunks.push(specs);
        in_ch = out_ch;
    }
    crate::net::build_custom_net(
        &trunks,
        dataset.channels,
        dataset.spatial,
        dataset.classes,
        cfg.aux,
        cfg.width,
        cfg.seed,
    )
}

fn optim_settings(cfg: &ExperimentConfig) -> OptimSettings {
    OptimSettings {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        decay_factor: cfg.decay_factor,
        decay_period: cfg.decay_period,
    }
}

fn delay_model(cfg: &ExperimentConfig) -> Result<DelayModel> {
    if let Some(pmf) = &cfg.pmf {
        return DelayModel::from_pmf(pmf.clone());
    }
    match cfg.slow_module {
        Some(j) => pmf_from_slowdown(cfg.modules, j, cfg.slowdown),
        None => DelayModel::uniform(cfg.modules),
    }
}

/// Runs the configured experiment and writes `metrics.csv`,
/// `config.resolved.cfg` and `summary.txt` under `out_dir`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    match cfg.precision {
        32 => run_typed::<f32>(cfg, out_dir),
        64 => run_typed::<f64>(cfg, out_dir),
        p => Err(Error::InvalidArgument(format!("precision {p} is not 32 or 64"))),
    }
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let dataset: Dataset<T> = load_dataset(&cfg.dataset, cfg.seed)?;
    if dataset.batches_per_epoch(cfg.batch_size) == 0 {
        return Err(Error::InvalidArgument(format!(
            "batch size {} exceeds the {}-sample training set",
            cfg.batch_size,
            dataset.train.len()
        )));
    }
    let partition = build_partition(cfg, &dataset)?;
    let modules = partition.len();
    let mut state = TrainState::new(
        partition,
        &optim_settings(cfg),
        cfg.epochs,
        dataset.batches_per_epoch(cfg.batch_size),
        cfg.batch_size,
    )?;
    let opts = TrainOpts {
        eval_per_epoch: cfg.eval_per_epoch,
        channel_capacity: cfg.channel_capacity,
        ..Default::default()
    };
    let mut notes = Vec::new();
    if cfg.buffer_unit == BufferUnit::Samples {
        notes.push(format!(
            "buffer capacity {} samples converted to {} batches of {}",
            cfg.buffer_capacity,
            cfg.buffer_batches(),
            cfg.batch_size
        ));
    }

    let mut bits_total = 0.0;
    let mut starvation = vec![0u64; modules];
    let mut bandwidth_ratios = Vec::new();
    let mut buffer_ratios = Vec::new();

    let trace = match cfg.mode {
        Mode::Sync => train_sync(&dataset, &mut state, &opts, cfg.seed)?.trace,
        Mode::Sequential => train_sequential(&dataset, &mut state, &opts, cfg.seed)?.trace,
        Mode::Pipelined => train_pipelined(&dataset, &mut state, &opts, cfg.seed)?.trace,
        Mode::Async | Mode::AsyncQuantized => {
            let delay = delay_model(cfg)?;
            let async_cfg = AsyncCfg {
                buffer_batches: cfg.buffer_batches(),
                eval_per_epoch: cfg.eval_per_epoch,
                ..Default::default()
            };
            let outcome = if cfg.mode == Mode::Async {
                run_async(&dataset, &mut state, &delay, &async_cfg, cfg.seed)?
            } else {
                let quant = QuantCfg::from_config(cfg);
                let out = run_async_quantized(&dataset, &mut state, &delay, &async_cfg, &quant, cfg.seed)?;
                let alpha = cfg.sync_alpha();
                let m_samples = (cfg.buffer_batches() * cfg.batch_size) as u64;
                for m in &state.partition.modules[..modules.saturating_sub(1)] {
                    bandwidth_ratios.push(bandwidth_compression(
                        cfg.batch_size as u64,
                        m.out_spatial as u64,
                        m.in_channels as u64,
                        m.out_channels as u64,
                        cfg.atoms,
                        cfg.groups as u64,
                        alpha,
                    ));
                    buffer_ratios.push(buffer_compression(
                        m_samples,
                        m.out_spatial as u64,
                        m.out_channels as u64,
                        cfg.atoms,
                        cfg.groups as u64,
                    ));
                }
                out
            };
            bits_total = outcome.bits_total;
            starvation = outcome.starvation.clone();
            if let Some(w) = &outcome.warning {
                notes.push(w.clone());
            }
            outcome.trace
        }
    };

    trace.write_csv(&out_dir.join("metrics.csv"))?;
    let resolved = out_dir.join("config.resolved.cfg");
    std::fs::write(&resolved, cfg.serialize()).map_err(|e| Error::io(&resolved, e))?;

    let summary = RunSummary {
        final_test_acc: trace.final_test_acc(modules),
        bits_total,
        bandwidth_ratios,
        buffer_ratios,
        starvation,
        notes,
        out_dir: out_dir.to_path_buf(),
    };
    let summary_path = out_dir.join("summary.txt");
    std::fs::write(&summary_path, summary.text()).map_err(|e| Error::io(&summary_path, e))?;
    Ok(summary)
}

/// One row of the compression-factor report: a module boundary evaluated at
/// one codebook size and one buffer size.
#[derive(Clone, Debug)]
pub struct CompressRow {
    pub link: usize,
    pub spatial: u64,
    pub channels: u64,
    pub channels_prev: u64,
    pub atoms: u64,
    pub buffer_samples: u64,
    pub bits_per_vector: u32,
    pub bandwidth: f64,
    pub buffer: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CompressReport {
    pub rows: Vec<CompressRow>,
}

impl CompressReport {
    pub fn table(&self) -> String {
        let mut s = String::from(
            "link  N    K     K_prev  C       M_samples  bits  bandwidth  buffer\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<5} {:<4} {:<5} {:<7} {:<7} {:<10} {:<5} {:<10.3} {:<.3}",
                r.link,
                r.spatial,
                r.channels,
                r.channels_prev,
                r.atoms,
                r.buffer_samples,
                r.bits_per_vector,
                r.bandwidth,
                r.buffer
            );
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(
            "link,spatial,channels,channels_prev,atoms,buffer_samples,bits_per_vector,bandwidth_compression,buffer_compression\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.link,
                r.spatial,
                r.channels,
                r.channels_prev,
                r.atoms,
                r.buffer_samples,
                r.bits_per_vector,
                r.bandwidth,
                r.buffer
            );
        }
        s
    }
}

/// Evaluates the bandwidth and buffer compression factors across codebook and
/// buffer sweeps for every link of the configured architecture.
pub fn compress_report(
    cfg: &ExperimentConfig,
    atoms_sweep: &[u64],
    buffer_samples_sweep: &[u64],
    alpha: f64,
) -> Result<CompressReport> {
    // Geometry only; no parameters are initialized for the report.
    let dataset_geom = match &cfg.dataset {
        crate::data::DatasetSpec::SyntheticGaussians { channels, spatial, .. } => (*channels, *spatial),
        crate::data::DatasetSpec::SyntheticSpirals { spatial, .. } => (1, *spatial),
        crate::data::DatasetSpec::Cifar10Binary { .. } => (3, 32),
        crate::data::DatasetSpec::IdxImages { .. } => (1, 28),
    };
    let plan = reference_plan(cfg.width, cfg.modules.min(6));
    let mut rows = Vec::new();
    let mut in_ch = dataset_geom.0 as u64;
    let mut spatial = dataset_geom.1 as u64;
    for (j, &out_ch) in plan.iter().enumerate() {
        let index = j + 1;
        if index == 2 || index == 4 {
            spatial /= 2;
        }
        let out_ch = out_ch as u64;
        if index < plan.len() {
            for &atoms in atoms_sweep {
                for &m in buffer_samples_sweep {
                    rows.push(CompressRow {
                        link: index,
                        spatial,
                        channels: out_ch,
                        channels_prev: in_ch,
                        atoms,
                        buffer_samples: m,
                        bits_per_vector: bits_per_index(atoms),
                        bandwidth: bandwidth_compression(
                            cfg.batch_size as u64,
                            spatial,
                            in_ch,
                            out_ch,
                            atoms,
                            cfg.groups as u64,
                            alpha,
                        ),
                        buffer: buffer_compression(m, spatial, out_ch, atoms, cfg.groups as u64),
                    });
                }
            }
        }
        in_ch = out_ch;
    }
    Ok(CompressReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::desk_config;

    #[test]
    fn sync_smoke_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = desk_config();
        cfg.modules = 1;
        cfg.epochs = 2;
        cfg.dataset = crate::data::DatasetSpec::SyntheticGaussians {
            classes: 4,
            channels: 1,
            spatial: 8,
            train_n: 64,
            test_n: 32,
            noise: 1.0,
        };
        let summary = run(&cfg, dir.path()).unwrap();
        assert_eq!(summary.final_test_acc.len(), 1);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.lines().count() >= 3, "header plus two evaluation rows");
        assert!(dir.path().join("config.resolved.cfg").exists());
        assert!(dir.path().join("summary.txt").exists());
    }

    #[test]
    fn deterministic_mode_reruns_byte_identically() {
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        let mut cfg = desk_config();
        cfg.mode = crate::config::Mode::Async;
        cfg.epochs = 1;
        cfg.dataset = crate::data::DatasetSpec::SyntheticGaussians {
            classes: 4,
            channels: 1,
            spatial: 8,
            train_n: 128,
            test_n: 32,
            noise: 1.0,
        };
        run(&cfg, da.path()).unwrap();
        run(&cfg, db.path()).unwrap();
        let a = std::fs::read(da.path().join("metrics.csv")).unwrap();
        let b = std::fs::read(db.path().join("metrics.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quantized_summary_ratios_equal_codec_formulas() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = desk_config();
        cfg.mode = crate::config::Mode::AsyncQuantized;
        cfg.epochs = 1;
        cfg.atoms = 16;
        cfg.groups = 4;
        cfg.dataset = crate::data::DatasetSpec::SyntheticGaussians {
            classes: 4,
            channels: 1,
            spatial: 8,
            train_n: 128,
            test_n: 32,
            noise: 1.0,
        };
        let summary = run(&cfg, dir.path()).unwrap();
        // Link 1: module 1 output is width@8x8 with 1 upstream channel.
        let expect = bandwidth_compression(16, 8, 1, 16, 16, 4, cfg.sync_alpha());
        assert_eq!(summary.bandwidth_ratios[0], expect);
        let m = (cfg.buffer_batches() * cfg.batch_size) as u64;
        let expect_buf = buffer_compression(m, 8, 16, 16, 4);
        assert_eq!(summary.buffer_ratios[0], expect_buf);
    }

    #[test]
    fn compress_report_reproduces_reference_factors() {
        let mut cfg = desk_config();
        cfg.width = 128;
        cfg.modules = 4;
        cfg.batch_size = 128;
        cfg.groups = 32;
        cfg.dataset = crate::data::DatasetSpec::Cifar10Binary {
            train_paths: vec![],
            test_path: None,
            subset_n: 0,
        };
        let report = compress_report(&cfg, &[256], &[256], 1.0).unwrap();
        assert_eq!(report.rows.len(), 3);
        let bw: Vec<f64> = report.rows.iter().map(|r| r.bandwidth).collect();
        assert!((bw[0] - 15.5).abs() < 0.1);
        assert!((bw[1] - 23.3).abs() < 0.1);
        assert!((bw[2] - 21.3).abs() < 0.1);
        let buf: Vec<f64> = report.rows.iter().map(|r| r.buffer).collect();
        assert!((buf[0] - 15.8).abs() < 0.1);
        assert!((buf[1] - 28.4).abs() < 0.1);
        assert!((buf[2] - 28.4).abs() < 0.1);
    }

    #[test]
    fn monotone_sweeps() {
        let mut cfg = desk_config();
        cfg.width = 128;
        cfg.modules = 4;
        cfg.batch_size = 128;
        cfg.groups = 32;
        // Bandwidth strictly decreasing in C for fixed alpha > 0.
        let atoms: Vec<u64> = (1..=16).map(|e| 1u64 << e).collect();
        let report = compress_report(&cfg, &atoms, &[256], 1.0).unwrap();
        let link1: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.link == 1)
            .map(|r| r.bandwidth)
            .collect();
        for w in link1.windows(2) {
            assert!(w[1] < w[0], "bandwidth should fall as C grows: {w:?}");
        }
        // Buffer compression non-decreasing in M.
        let ms: Vec<u64> = [128u64, 256, 512, 1024, 4096, 1 << 20].to_vec();
        let report = compress_report(&cfg, &[256], &ms, 1.0).unwrap();
        let link1: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.link == 1)
            .map(|r| r.buffer)
            .collect();
        for w in link1.windows(2) {
            assert!(w[1] >= w[0], "buffer compression should grow with M: {w:?}");
        }
    }
}
