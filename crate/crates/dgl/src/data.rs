//! Datasets and seeded batch streams: synthetic desk-scale tasks plus readers
//! for the CIFAR-10 binary format (3073-byte records) and IDX image/label
//! files.

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use std::io::Read;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    /// One random mean image per class; samples are mean + noise * N(0,1).
    SyntheticGaussians {
        classes: usize,
        channels: usize,
        spatial: usize,
        train_n: usize,
        test_n: usize,
        noise: f64,
    },
    /// Interleaved spiral arms rendered as a Gaussian bump on a grid.
    SyntheticSpirals {
        classes: usize,
        spatial: usize,
        train_n: usize,
        test_n: usize,
        noise: f64,
    },
    /// Standard CIFAR-10 binary batches: 1 label byte + 3072 pixel bytes.
    Cifar10Binary {
        train_paths: Vec<PathBuf>,
        test_path: Option<PathBuf>,
        /// 0 keeps everything.
        subset_n: usize,
    },
    /// IDX images (magic 0x00000803) with IDX labels (magic 0x00000801).
    IdxImages {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
    },
}

impl DatasetSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            DatasetSpec::SyntheticGaussians { .. } => "synthetic-gaussians",
            DatasetSpec::SyntheticSpirals { .. } => "synthetic-spirals",
            DatasetSpec::Cifar10Binary { .. } => "cifar10-binary",
            DatasetSpec::IdxImages { .. } => "idx-images",
        }
    }
}

/// In-memory dataset: flat per-sample images plus labels, with geometry.
#[derive(Clone, Debug)]
pub struct Dataset<T: Scalar> {
    pub train: Vec<(Vec<T>, usize)>,
    pub test: Vec<(Vec<T>, usize)>,
    pub classes: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn sample_len(&self) -> usize {
        self.channels * self.spatial * self.spatial
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.train.len() / batch_size
    }

    fn assemble(&self, split: &[(Vec<T>, usize)], idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&split[i].0);
            labels.push(split[i].1);
        }
        let t = Tensor::new([idx.len(), self.channels, self.spatial, self.spatial], data)
            .expect("batch assembly");
        (t, labels)
    }

    /// Shuffled mini-batches for one epoch; the order is a pure function of
    /// (seed, epoch). A trailing partial batch is dropped.
    pub fn epoch_batches(
        &self,
        master_seed: u64,
        epoch: u64,
        batch_size: usize,
    ) -> Vec<(Tensor<T>, Vec<usize>)> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = seed::rng(master_seed, "data-shuffle", epoch);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        order
            .chunks_exact(batch_size)
            .map(|chunk| self.assemble(&self.train, chunk))
            .collect()
    }

    /// The full test split as batches (unshuffled).
    pub fn test_batches(&self, batch_size: usize) -> Vec<(Tensor<T>, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.test.len()).collect();
        idx.chunks(batch_size)
            .map(|chunk| self.assemble(&self.test, chunk))
            .collect()
    }

    /// A fixed probe batch of training inputs (first `n` samples in stored
    /// order); drift estimates forward the same probe each window.
    pub fn probe_batch(&self, n: usize) -> (Tensor<T>, Vec<usize>) {
        let idx: Vec<usize> = (0..n.min(self.train.len())).collect();
        self.assemble(&self.train, &idx)
    }
}

pub fn load_dataset<T: Scalar>(spec: &DatasetSpec, master_seed: u64) -> Result<Dataset<T>> {
    match spec {
        DatasetSpec::SyntheticGaussians {
            classes,
            channels,
            spatial,
            train_n,
            test_n,
            noise,
        } => Ok(synthetic_gaussians(
            *classes, *channels, *spatial, *train_n, *test_n, *noise, master_seed,
        )),
        DatasetSpec::SyntheticSpirals {
            classes,
            spatial,
            train_n,
            test_n,
            noise,
        } => Ok(synthetic_spirals(
            *classes, *spatial, *train_n, *test_n, *noise, master_seed,
        )),
        DatasetSpec::Cifar10Binary {
            train_paths,
            test_path,
            subset_n,
        } => {
            let mut train = Vec::new();
            for p in train_paths {
                train.extend(read_cifar10_binary(p)?);
            }
            if *subset_n > 0 {
                train.truncate(*subset_n);
            }
            let mut test = match test_path {
                Some(p) => read_cifar10_binary(p)?,
                None => Vec::new(),
            };
            if *subset_n > 0 {
                test.truncate(*subset_n);
            }
            if train.is_empty() {
                return Err(Error::InvalidArgument("empty CIFAR-10 training set".into()));
            }
            Ok(Dataset {
                train,
                test,
                classes: 10,
                channels: 3,
                spatial: 32,
            })
        }
        DatasetSpec::IdxImages {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let (train, geom) = read_idx_pair(train_images, train_labels)?;
            let test = match (test_images, test_labels) {
                (Some(ti), Some(tl)) => {
                    let (test, tgeom) = read_idx_pair(ti, tl)?;
                    if tgeom != geom {
                        return Err(Error::InvalidArgument(format!(
                            "test geometry {tgeom:?} differs from train {geom:?}"
                        )));
                    }
                    test
                }
                (None, None) => Vec::new(),
                _ => {
                    return Err(Error::InvalidArgument(
                        "idx-images needs both test images and test labels, or neither".into(),
                    ))
                }
            };
            let classes = train
                .iter()
                .chain(test.iter())
                .map(|(_, l)| *l)
                .max()
                .unwrap_or(0)
                + 1;
            Ok(Dataset {
                train,
                test,
                classes,
                channels: 1,
                spatial: geom.0,
            })
        }
    }
}

fn synthetic_gaussians<T: Scalar>(
    classes: usize,
    channels: usize,
    spatial: usize,
    train_n: usize,
    test_n: usize,
    noise: f64,
    master_seed: u64,
) -> Dataset<T> {
    let n = channels * spatial * spatial;
    let mut mean_rng = seed::rng(master_seed, "gaussians-means", 0);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..n).map(|_| mean_rng.random_range(-1.0..1.0)).collect())
        .collect();
    let make = |count: usize, tag: u64| {
        let mut rng = seed::rng(master_seed, "gaussians-samples", tag);
        (0..count)
            .map(|i| {
                let label = i % classes;
                let img: Vec<T> = means[label]
                    .iter()
                    .map(|m| T::from_f64(m + noise * gaussian(&mut rng)))
                    .collect();
                (img, label)
            })
            .collect::<Vec<_>>()
    };
    Dataset {
        train: make(train_n, 0),
        test: make(test_n, 1),
        classes,
        channels,
        spatial,
    }
}

fn synthetic_spirals<T: Scalar>(
    classes: usize,
    spatial: usize,
    train_n: usize,
    test_n: usize,
    noise: f64,
    master_seed: u64,
) -> Dataset<T> {
    let make = |count: usize, tag: u64| {
        let mut rng = seed::rng(master_seed, "spirals", tag);
        (0..count)
            .map(|i| {
                let label = i % classes;
                let t = rng.random_range(0.25..1.0);
                let angle = t * 3.0 * std::f64::consts::PI
                    + 2.0 * std::f64::consts::PI * label as f64 / classes as f64
                    + noise * 0.1 * gaussian(&mut rng);
                let r = t * 0.9;
                let px = 0.5 + 0.5 * r * angle.cos();
                let py = 0.5 + 0.5 * r * angle.sin();
                let sigma = 1.2 / spatial as f64;
                let img: Vec<T> = (0..spatial * spatial)
                    .map(|p| {
                        let gy = (p / spatial) as f64 / (spatial - 1).max(1) as f64;
                        let gx = (p % spatial) as f64 / (spatial - 1).max(1) as f64;
                        let d2 = (gx - px).powi(2) + (gy - py).powi(2);
                        T::from_f64((-d2 / (2.0 * sigma * sigma)).exp())
                    })
                    .collect();
                (img, label)
            })
            .collect::<Vec<_>>()
    };
    Dataset {
        train: make(train_n, 0),
        test: make(test_n, 1),
        classes,
        channels: 1,
        spatial,
    }
}

fn gaussian(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    // Box-Muller on two uniform draws.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

const CIFAR_RECORD: usize = 3073;

/// Reads one CIFAR-10 binary batch file: each record is 1 label byte followed
/// by 3072 pixel bytes (3 channel-planar 32x32 planes). Pixels map to
/// [-0.5, 0.5].
pub fn read_cifar10_binary<T: Scalar>(path: &Path) -> Result<Vec<(Vec<T>, usize)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::DataFormat {
            path: path.to_path_buf(),
            message: "empty file".into(),
            offset: 0,
        });
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        let record = bytes.len() / CIFAR_RECORD;
        return Err(Error::DataFormat {
            path: path.to_path_buf(),
            message: format!(
                "record {record} truncated (file is not a multiple of {CIFAR_RECORD} bytes)"
            ),
            offset: (record * CIFAR_RECORD) as u64,
        });
    }
    let mut out = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (rec, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = usize::from(chunk[0]);
        if label >= 10 {
            return Err(Error::DataFormat {
                path: path.to_path_buf(),
                message: format!("record {rec} has label {label}, expected 0..10"),
                offset: (rec * CIFAR_RECORD) as u64,
            });
        }
        let img = chunk[1..]
            .iter()
            .map(|&b| T::from_f64(f64::from(b) / 255.0 - 0.5))
            .collect();
        out.push((img, label));
    }
    Ok(out)
}

fn read_be_u32(r: &mut impl Read, path: &Path, offset: &mut u64, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::DataFormat {
        path: path.to_path_buf(),
        message: format!("truncated while reading {what}"),
        offset: *offset,
    })?;
    *offset += 4;
    Ok(u32::from_be_bytes(buf))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads an IDX image file and the matching IDX label file, returning samples
/// scaled to [-0.5, 0.5] plus the (rows, cols) geometry.
pub fn read_idx_pair<T: Scalar>(
    images: &Path,
    labels: &Path,
) -> Result<(Vec<(Vec<T>, usize)>, (usize, usize))> {
    let mut f = std::fs::File::open(images).map_err(|e| Error::io(images, e))?;
    let mut off = 0u64;
    let magic = read_be_u32(&mut f, images, &mut off, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::DataFormat {
            path: images.to_path_buf(),
            message: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
            offset: 0,
        });
    }
    let count = read_be_u32(&mut f, images, &mut off, "count")? as usize;
    let rows = read_be_u32(&mut f, images, &mut off, "rows")? as usize;
    let cols = read_be_u32(&mut f, images, &mut off, "cols")? as usize;
    if rows != cols {
        return Err(Error::DataFormat {
            path: images.to_path_buf(),
            message: format!("non-square images {rows}x{cols} are not supported"),
            offset: 8,
        });
    }
    let mut pixels = vec![0u8; count * rows * cols];
    f.read_exact(&mut pixels).map_err(|_| Error::DataFormat {
        path: images.to_path_buf(),
        message: format!("truncated pixel data for {count} images of {rows}x{cols}"),
        offset: off,
    })?;

    let mut f = std::fs::File::open(labels).map_err(|e| Error::io(labels, e))?;
    let mut off = 0u64;
    let magic = read_be_u32(&mut f, labels, &mut off, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::DataFormat {
            path: labels.to_path_buf(),
            message: format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
            offset: 0,
        });
    }
    let label_count = read_be_u32(&mut f, labels, &mut off, "count")? as usize;
    if label_count != count {
        return Err(Error::DataFormat {
            path: labels.to_path_buf(),
            message: format!("{label_count} labels for {count} images"),
            offset: 4,
        });
    }
    let mut label_bytes = vec![0u8; count];
    f.read_exact(&mut label_bytes).map_err(|_| Error::DataFormat {
        path: labels.to_path_buf(),
        message: format!("truncated label data for {count} entries"),
        offset: off,
    })?;

    let n = rows * cols;
    let out = (0..count)
        .map(|i| {
            let img = pixels[i * n..(i + 1) * n]
                .iter()
                .map(|&b| T::from_f64(f64::from(b) / 255.0 - 0.5))
                .collect();
            (img, usize::from(label_bytes[i]))
        })
        .collect();
    Ok((out, (rows, cols)))
}
