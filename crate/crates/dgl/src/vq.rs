//! Online learned compression of activations.
//!
//! Channels are split into `k` groups; at every spatial site the sub-vector of
//! each group is replaced by the index of its nearest atom in that group's
//! dictionary, so a quantized vector costs ceil(log2(C)) bits. Dictionaries
//! adapt online through exponential-moving-average cluster statistics, and the
//! decoder holds a snapshot that is refreshed only at synchronization events,
//! so it may be stale relative to the encoder.
//!
//! `batch_bits` / `buffer_compression` / `bandwidth_compression` reproduce the
//! byte-exact accounting the rest of the crate reports.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_GROUPS: usize = 32;
pub const DEFAULT_EMA_DECAY: f64 = 0.99;
pub const DEFAULT_EMA_EPSILON: f64 = 1e-5;
/// An atom unused for this many consecutive encoded vectors is reseeded from
/// the current batch (dead codes are a standard VQ failure mode).
pub const DEFAULT_DEAD_AFTER: u64 = 1024;

#[derive(Clone, Debug)]
struct Group<T: Scalar> {
    dim: usize,
    /// C x dim atom values.
    atoms: Vec<T>,
    ema_count: Vec<f64>,
    ema_sum: Vec<f64>,
    /// Encoded-vector clock value at each atom's last assignment.
    last_used: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct Codebook<T: Scalar> {
    groups: Vec<Group<T>>,
    atoms_per_group: usize,
    channels: usize,
    /// Monotone counter bumped on every dictionary mutation.
    pub version: u64,
    pub ema_decay: f64,
    pub epsilon: f64,
    pub dead_after: u64,
    /// Total sub-vectors this codebook has seen in updates (dead-atom clock).
    vectors_seen: u64,
    rng: ChaCha8Rng,
}

/// Per-group channel spans: `k` groups of floor(K/k) channels, the last group
/// absorbing any remainder.
pub fn group_dims(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels < groups {
        return Err(Error::InvalidArgument(format!(
            "cannot split {channels} channels into {groups} groups"
        )));
    }
    let d = channels / groups;
    let mut dims = vec![d; groups];
    dims[groups - 1] += channels % groups;
    Ok(dims)
}

impl<T: Scalar> Codebook<T> {
    /// A codebook with zeroed atoms; call `init_from_batch` (or feed updates)
    /// before relying on reconstructions.
    pub fn new(channels: usize, groups: usize, atoms_per_group: usize, seed: u64) -> Result<Self> {
        if atoms_per_group == 0 {
            return Err(Error::InvalidArgument("codebook needs at least one atom".into()));
        }
        let dims = group_dims(channels, groups)?;
        let groups = dims
            .into_iter()
            .map(|dim| Group {
                dim,
                atoms: vec![T::zero(); atoms_per_group * dim],
                ema_count: vec![0.0; atoms_per_group],
                ema_sum: vec![0.0; atoms_per_group * dim],
                last_used: vec![0; atoms_per_group],
            })
            .collect();
        Ok(Codebook {
            groups,
            atoms_per_group,
            channels,
            version: 0,
            ema_decay: DEFAULT_EMA_DECAY,
            epsilon: DEFAULT_EMA_EPSILON,
            dead_after: DEFAULT_DEAD_AFTER,
            vectors_seen: 0,
            rng: crate::seed::rng(seed, "codebook", 0),
        })
    }

    /// Seeds atoms from the batch's own sub-vectors, k-means++ style (distance
    /// weighted, no refinement iterations), so even a never-synchronized
    /// decoder holds a usable dictionary.
    pub fn init_from_batch(
        x: &Tensor<T>,
        groups: usize,
        atoms_per_group: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut cb = Codebook::new(x.channels(), groups, atoms_per_group, seed)?;
        cb.seed_atoms(x)?;
        Ok(cb)
    }

    fn seed_atoms(&mut self, x: &Tensor<T>) -> Result<()> {
        self.check_tensor(x)?;
        let sites = x.batch() * x.height() * x.width();
        let mut start_ch = 0;
        for g in 0..self.groups.len() {
            let dim = self.groups[g].dim;
            // Gather all sub-vectors of this group as f64 candidates.
            let mut cand = vec![0.0f64; sites * dim];
            let mut si = 0;
            for b in 0..x.batch() {
                for y in 0..x.height() {
                    for xx in 0..x.width() {
                        for c in 0..dim {
                            cand[si * dim + c] = x.at(b, start_ch + c, y, xx).as_f64();
                        }
                        si += 1;
                    }
                }
            }
            let c_n = self.atoms_per_group;
            let mut chosen = Vec::with_capacity(c_n);
            let first = self.rng.random_range(0..sites);
            chosen.push(first);
            let mut min_d2 = vec![f64::INFINITY; sites];
            while chosen.len() < c_n {
                let last = *chosen.last().unwrap();
                let lastv = &cand[last * dim..(last + 1) * dim];
                let mut total = 0.0;
                for s in 0..sites {
                    let v = &cand[s * dim..(s + 1) * dim];
                    let d2: f64 = v.iter().zip(lastv.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d2 < min_d2[s] {
                        min_d2[s] = d2;
                    }
                    total += min_d2[s];
                }
                if total <= 0.0 {
                    // Fewer distinct sub-vectors than atoms: reuse a random
                    // candidate with a small deterministic jitter.
                    let s = self.rng.random_range(0..sites);
                    chosen.push(s);
                    continue;
                }
                let mut target = self.rng.random_range(0.0..total);
                let mut pick = sites - 1;
                for s in 0..sites {
                    target -= min_d2[s];
                    if target <= 0.0 {
                        pick = s;
                        break;
                    }
                }
                chosen.push(pick);
            }
            let group = &mut self.groups[g];
            let mut seen = std::collections::HashSet::new();
            for (i, &s) in chosen.iter().enumerate() {
                let jitter = !seen.insert(s);
                for c in 0..dim {
                    let mut v = cand[s * dim + c];
                    if jitter {
                        v += self.rng.random_range(-1e-4..1e-4);
                    }
                    group.atoms[i * dim + c] = T::from_f64(v);
                }
                // Freshly seeded statistics behave like one observation.
                group.ema_count[i] = 1.0;
                for c in 0..dim {
                    group.ema_sum[i * dim + c] = group.atoms[i * dim + c].as_f64();
                }
            }
            start_ch += dim;
        }
        self.version += 1;
        Ok(())
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn atoms_per_group(&self) -> usize {
        self.atoms_per_group
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn group_dims_vec(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.dim).collect()
    }

    pub fn atom(&self, group: usize, index: usize) -> &[T] {
        let g = &self.groups[group];
        &g.atoms[index * g.dim..(index + 1) * g.dim]
    }

    pub fn set_atom(&mut self, group: usize, index: usize, values: &[T]) {
        let g = &mut self.groups[group];
        assert_eq!(values.len(), g.dim);
        g.atoms[index * g.dim..(index + 1) * g.dim].copy_from_slice(values);
        self.version += 1;
    }

    /// In-memory snapshot size: 32-bit values for every atom coordinate,
    /// matching the `32 * K * C` term of the buffer accounting.
    pub fn snapshot_bits(&self) -> u64 {
        32 * self.channels as u64 * self.atoms_per_group as u64
    }

    fn check_tensor(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.channels {
            return Err(Error::shape(
                "codebook",
                format!("{} channels", self.channels),
                format!("{} channels", x.channels()),
            ));
        }
        if x.height() != x.width() {
            return Err(Error::shape(
                "codebook",
                "square spatial extent".to_string(),
                format!("{}x{}", x.height(), x.width()),
            ));
        }
        Ok(())
    }

    fn nearest(&self, group: usize, sub: &[f64]) -> u32 {
        let g = &self.groups[group];
        let mut best = 0u32;
        let mut best_d = f64::INFINITY;
        for i in 0..self.atoms_per_group {
            let atom = &g.atoms[i * g.dim..(i + 1) * g.dim];
            let mut d = 0.0;
            for (a, s) in atom.iter().zip(sub.iter()) {
                let diff = a.as_f64() - s;
                d += diff * diff;
            }
            // Strict comparison keeps the lowest index on ties.
            if d < best_d {
                best_d = d;
                best = i as u32;
            }
        }
        best
    }

    fn assignments(&self, x: &Tensor<T>) -> Result<(Vec<u32>, usize)> {
        self.check_tensor(x)?;
        let n = x.height();
        let k = self.groups.len();
        let mut indices = vec![0u32; x.batch() * k * n * n];
        let mut sub = Vec::new();
        let mut ii = 0;
        for b in 0..x.batch() {
            let mut start_ch = 0;
            for g in 0..k {
                let dim = self.groups[g].dim;
                for y in 0..n {
                    for xx in 0..n {
                        sub.clear();
                        for c in 0..dim {
                            sub.push(x.at(b, start_ch + c, y, xx).as_f64());
                        }
                        indices[ii] = self.nearest(g, &sub);
                        ii += 1;
                    }
                }
                start_ch += dim;
            }
        }
        Ok((indices, n))
    }

    /// EMA dictionary refresh from one batch: per touched cluster,
    ///   count <- gamma*count + (1-gamma)*n_i
    ///   sum   <- gamma*sum + (1-gamma)*sum(assigned sub-vectors)
    ///   atom  <- sum / (count + eps)
    /// Untouched atoms keep their value (their statistics still decay); atoms
    /// unused for `dead_after` consecutive vectors are reseeded from the
    /// current batch.
    pub fn ema_update(&mut self, x: &Tensor<T>, gamma: f64) -> Result<()> {
        if !(gamma > 0.0 && gamma < 1.0) && gamma != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "EMA decay must lie in [0, 1), got {gamma}"
            )));
        }
        let (indices, n) = self.assignments(x)?;
        self.apply_ema(x, &indices, n, gamma);
        Ok(())
    }

    fn apply_ema(&mut self, x: &Tensor<T>, indices: &[u32], n: usize, gamma: f64) {
        let k = self.groups.len();
        let sites = n * n;
        let per_group_vectors = (x.batch() * sites) as u64;
        self.vectors_seen += per_group_vectors;
        let now = self.vectors_seen;
        let eps = self.epsilon;
        let mut start_ch = 0;
        for g in 0..k {
            let dim = self.groups[g].dim;
            let c_n = self.atoms_per_group;
            let mut batch_count = vec![0.0f64; c_n];
            let mut batch_sum = vec![0.0f64; c_n * dim];
            for b in 0..x.batch() {
                let base = (b * k + g) * sites;
                for y in 0..n {
                    for xx in 0..n {
                        let idx = indices[base + y * n + xx] as usize;
                        batch_count[idx] += 1.0;
                        for c in 0..dim {
                            batch_sum[idx * dim + c] += x.at(b, start_ch + c, y, xx).as_f64();
                        }
                    }
                }
            }
            let group = &mut self.groups[g];
            let mut reseed: Vec<usize> = Vec::new();
            for i in 0..c_n {
                group.ema_count[i] = gamma * group.ema_count[i] + (1.0 - gamma) * batch_count[i];
                for c in 0..dim {
                    group.ema_sum[i * dim + c] =
                        gamma * group.ema_sum[i * dim + c] + (1.0 - gamma) * batch_sum[i * dim + c];
                }
                if batch_count[i] > 0.0 {
                    group.last_used[i] = now;
                    let denom = group.ema_count[i] + eps;
                    for c in 0..dim {
                        group.atoms[i * dim + c] = T::from_f64(group.ema_sum[i * dim + c] / denom);
                    }
                } else if now.saturating_sub(group.last_used[i]) >= self.dead_after {
                    reseed.push(i);
                }
            }
            for i in reseed {
                let b = self.rng.random_range(0..x.batch());
                let y = self.rng.random_range(0..n);
                let xx = self.rng.random_range(0..n);
                let group = &mut self.groups[g];
                group.ema_count[i] = 1.0;
                for c in 0..dim {
                    let v = x.at(b, start_ch + c, y, xx).as_f64();
                    group.atoms[i * dim + c] = T::from_f64(v);
                    group.ema_sum[i * dim + c] = v;
                }
                group.last_used[i] = now;
            }
            start_ch += dim;
        }
        self.version += 1;
    }

    /// Assigns once, then updates the dictionary from those assignments. The
    /// returned batch is encoded against the pre-update atoms and stamped
    /// with the pre-update version.
    pub fn encode_and_update(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<QuantizedBatch> {
        let stamped_version = self.version;
        let (indices, n) = self.assignments(x)?;
        let q = QuantizedBatch {
            indices: indices.clone(),
            batch: x.batch(),
            groups: self.groups.len(),
            spatial: n,
            atoms: self.atoms_per_group as u64,
            group_dims: self.group_dims_vec(),
            codebook_version: stamped_version,
            labels: labels.to_vec(),
        };
        let gamma = self.ema_decay;
        self.apply_ema(x, &indices, n, gamma);
        Ok(q)
    }
}

/// A batch of activations reduced to per-site atom indices.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedBatch {
    /// Layout: batch x group x height x width.
    pub indices: Vec<u32>,
    pub batch: usize,
    pub groups: usize,
    pub spatial: usize,
    /// Atoms per group in the encoding codebook (C).
    pub atoms: u64,
    pub group_dims: Vec<usize>,
    pub codebook_version: u64,
    pub labels: Vec<usize>,
}

impl QuantizedBatch {
    pub fn channels(&self) -> usize {
        self.group_dims.iter().sum()
    }

    /// Packed index size as stored on the wire: ceil(log2 C) bits per index,
    /// rows padded up to whole bytes.
    pub fn payload_bits(&self) -> u64 {
        let row = packed_row_bytes(self.spatial, self.atoms) * 8;
        (self.batch * self.groups * self.spatial) as u64 * row
    }
}

impl crate::buffer::PayloadBytes for QuantizedBatch {
    fn payload_bytes(&self) -> u64 {
        self.payload_bits() / 8
    }
}

/// Assigns every channel-group sub-vector at every spatial site to its closest
/// atom (squared Euclidean distance, ties to the lowest index).
pub fn encode<T: Scalar>(x: &Tensor<T>, cb: &Codebook<T>) -> Result<QuantizedBatch> {
    let (indices, n) = cb.assignments(x)?;
    Ok(QuantizedBatch {
        indices,
        batch: x.batch(),
        groups: cb.group_count(),
        spatial: n,
        atoms: cb.atoms_per_group() as u64,
        group_dims: cb.group_dims_vec(),
        codebook_version: cb.version,
        labels: Vec::new(),
    })
}

/// Reconstructs activations by atom lookup in the decoder's codebook (which
/// may be stale relative to the encoder's).
pub fn decode<T: Scalar>(q: &QuantizedBatch, cb: &Codebook<T>) -> Result<Tensor<T>> {
    if q.groups != cb.group_count() || q.group_dims != cb.group_dims_vec() {
        return Err(Error::shape(
            "decode",
            format!("groups {:?}", cb.group_dims_vec()),
            format!("groups {:?}", q.group_dims),
        ));
    }
    let n = q.spatial;
    let channels = q.channels();
    let mut out = Tensor::zeros([q.batch, channels, n, n]);
    let sites = n * n;
    for b in 0..q.batch {
        let mut start_ch = 0;
        for g in 0..q.groups {
            let dim = q.group_dims[g];
            let base = (b * q.groups + g) * sites;
            for y in 0..n {
                for xx in 0..n {
                    let idx = q.indices[base + y * n + xx];
                    if u64::from(idx) >= cb.atoms_per_group() as u64 {
                        return Err(Error::IndexOutOfRange {
                            index: idx,
                            atoms: cb.atoms_per_group() as u64,
                        });
                    }
                    let atom = cb.atom(g, idx as usize);
                    for c in 0..dim {
                        *out.at_mut(b, start_ch + c, y, xx) = atom[c];
                    }
                }
            }
            start_ch += dim;
        }
    }
    Ok(out)
}

/// How a decoder's codebook copy is refreshed from the encoder's.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SyncPolicy {
    /// Synchronize on the stated fraction of iterations, spread evenly;
    /// 1.0 is every step, 0.0 never.
    Rate(f64),
    /// Synchronize every `period` iterations.
    Period(u64),
}

impl SyncPolicy {
    /// Whether the policy fires on (0-based) iteration `step`.
    pub fn fires(&self, step: u64) -> bool {
        match *self {
            SyncPolicy::Rate(alpha) => {
                if alpha <= 0.0 {
                    false
                } else if alpha >= 1.0 {
                    true
                } else {
                    let a = ((step + 1) as f64 * alpha).floor();
                    let b = (step as f64 * alpha).floor();
                    a > b
                }
            }
            SyncPolicy::Period(t) => t != 0 && (step + 1) % t == 0,
        }
    }

    /// Fraction of iterations on which codebooks travel, as used by the
    /// bandwidth accounting term.
    pub fn rate(&self) -> f64 {
        match *self {
            SyncPolicy::Rate(alpha) => alpha.clamp(0.0, 1.0),
            SyncPolicy::Period(t) => {
                if t == 0 {
                    0.0
                } else {
                    1.0 / t as f64
                }
            }
        }
    }
}

/// Overwrites the decoder's atoms and version with the encoder's.
pub fn sync_codebooks<T: Scalar>(encoder: &Codebook<T>, decoder: &mut Codebook<T>) -> Result<()> {
    if encoder.group_count() != decoder.group_count()
        || encoder.atoms_per_group() != decoder.atoms_per_group()
        || encoder.group_dims_vec() != decoder.group_dims_vec()
    {
        return Err(Error::shape(
            "codebook sync",
            format!(
                "k={} C={} dims {:?}",
                decoder.group_count(),
                decoder.atoms_per_group(),
                decoder.group_dims_vec()
            ),
            format!(
                "k={} C={} dims {:?}",
                encoder.group_count(),
                encoder.atoms_per_group(),
                encoder.group_dims_vec()
            ),
        ));
    }
    for (dst, src) in decoder.groups.iter_mut().zip(encoder.groups.iter()) {
        dst.atoms.copy_from_slice(&src.atoms);
    }
    decoder.version = encoder.version;
    Ok(())
}

/// Bits to index one quantized vector: ceil(log2 C); 0 for a single atom.
pub fn bits_per_index(atoms: u64) -> u32 {
    if atoms <= 1 {
        0
    } else {
        u64::BITS - (atoms - 1).leading_zeros()
    }
}

/// Bytes of one packed row of `spatial` indices.
pub fn packed_row_bytes(spatial: usize, atoms: u64) -> u64 {
    (spatial as u64 * u64::from(bits_per_index(atoms))).div_ceil(8)
}

/// Bits to send one quantized batch between adjacent modules, including the
/// amortized codebook synchronization term:
///   B * k * N^2 * ceil(log2 C) + alpha * 32 * (K + K_prev) * C.
pub fn batch_bits(
    batch: u64,
    spatial: u64,
    ch_prev: u64,
    ch: u64,
    atoms: u64,
    groups: u64,
    alpha: f64,
) -> f64 {
    let index_bits = batch * groups * spatial * spatial * u64::from(bits_per_index(atoms));
    let codebook_bits = 32 * (ch + ch_prev) * atoms;
    index_bits as f64 + alpha * codebook_bits as f64
}

/// Raw bits of one activation batch at 32-bit precision.
pub fn raw_batch_bits(batch: u64, spatial: u64, ch: u64) -> u64 {
    32 * batch * spatial * spatial * ch
}

/// Bandwidth compression factor: raw batch bits over quantized batch bits;
/// values above 1 are an improvement.
pub fn bandwidth_compression(
    batch: u64,
    spatial: u64,
    ch_prev: u64,
    ch: u64,
    atoms: u64,
    groups: u64,
    alpha: f64,
) -> f64 {
    raw_batch_bits(batch, spatial, ch) as f64
        / batch_bits(batch, spatial, ch_prev, ch, atoms, groups, alpha)
}

/// Quantized buffer footprint in bits for `samples` stored samples:
///   M * k * N^2 * ceil(log2 C) + 32 * K * C (the decoding dictionary).
pub fn buffer_bits(samples: u64, spatial: u64, ch: u64, atoms: u64, groups: u64) -> u64 {
    samples * groups * spatial * spatial * u64::from(bits_per_index(atoms)) + 32 * ch * atoms
}

/// Buffer compression factor: raw buffer bits over quantized buffer bits.
pub fn buffer_compression(samples: u64, spatial: u64, ch: u64, atoms: u64, groups: u64) -> f64 {
    (32 * samples * spatial * spatial * ch) as f64
        / buffer_bits(samples, spatial, ch, atoms, groups) as f64
}

pub mod wire {
    //! Byte-exact serialization of quantized batches and codebook snapshots.
    //!
    //! Quantized batch ("DGLQ", little-endian):
    //!   magic [4] | format version u16 | B u32 | k u32 | N u32 | C u32 |
    //!   d per group [k x u32] | packed indices | labels [B x u32]
    //! Indices are packed at ceil(log2 C) bits, LSB-first, padded to whole
    //! bytes per spatial row, rows ordered sample-major then group then row.
    //!
    //! Codebook snapshot ("DGLC", little-endian):
    //!   magic [4] | version counter u64 | k u32 | C u32 |
    //!   d per group [k x u32] | atom values [k x C x d x f32]

    use super::*;

    pub const QUANTIZED_MAGIC: &[u8; 4] = b"DGLQ";
    pub const CODEBOOK_MAGIC: &[u8; 4] = b"DGLC";
    pub const FORMAT_VERSION: u16 = 1;

    fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
        if *pos + n > buf.len() {
            return Err(Error::DataFormat {
                path: "<bytes>".into(),
                message: format!("truncated while reading {what}"),
                offset: *pos as u64,
            });
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    }

    fn read_u32(buf: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(take(buf, pos, 4, what)?.try_into().unwrap()))
    }

    pub fn write_quantized(q: &QuantizedBatch) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(QUANTIZED_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(q.batch as u32).to_le_bytes());
        out.extend_from_slice(&(q.groups as u32).to_le_bytes());
        out.extend_from_slice(&(q.spatial as u32).to_le_bytes());
        out.extend_from_slice(&(q.atoms as u32).to_le_bytes());
        for d in &q.group_dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        let bits = bits_per_index(q.atoms);
        let row_bytes = packed_row_bytes(q.spatial, q.atoms) as usize;
        let n = q.spatial;
        for b in 0..q.batch {
            for g in 0..q.groups {
                let base = (b * q.groups + g) * n * n;
                for y in 0..n {
                    let mut row = vec![0u8; row_bytes];
                    let mut bitpos = 0usize;
                    for xx in 0..n {
                        let v = q.indices[base + y * n + xx];
                        for bit in 0..bits {
                            if v >> bit & 1 == 1 {
                                row[bitpos / 8] |= 1 << (bitpos % 8);
                            }
                            bitpos += 1;
                        }
                    }
                    out.extend_from_slice(&row);
                }
            }
        }
        for label in &q.labels {
            out.extend_from_slice(&(*label as u32).to_le_bytes());
        }
        out
    }

    pub fn read_quantized(buf: &[u8]) -> Result<QuantizedBatch> {
        let mut pos = 0;
        let magic = take(buf, &mut pos, 4, "magic")?;
        if magic != QUANTIZED_MAGIC {
            return Err(Error::DataFormat {
                path: "<bytes>".into(),
                message: format!("bad magic {magic:?}, expected DGLQ"),
                offset: 0,
            });
        }
        let version = u16::from_le_bytes(take(buf, &mut pos, 2, "format version")?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::DataFormat {
                path: "<bytes>".into(),
                message: format!("unsupported format version {version}"),
                offset: 4,
            });
        }
        let batch = read_u32(buf, &mut pos, "batch")? as usize;
        let groups = read_u32(buf, &mut pos, "groups")? as usize;
        let spatial = read_u32(buf, &mut pos, "spatial")? as usize;
        let atoms = u64::from(read_u32(buf, &mut pos, "atoms")?);
        let mut group_dims = Vec::with_capacity(groups);
        for _ in 0..groups {
            group_dims.push(read_u32(buf, &mut pos, "group dim")? as usize);
        }
        let bits = bits_per_index(atoms);
        let row_bytes = packed_row_bytes(spatial, atoms) as usize;
        let mut indices = vec![0u32; batch * groups * spatial * spatial];
        let mut ii = 0;
        for _ in 0..batch {
            for _ in 0..groups {
                for _ in 0..spatial {
                    let row = take(buf, &mut pos, row_bytes, "packed index row")?;
                    let mut bitpos = 0usize;
                    for _ in 0..spatial {
                        let mut v = 0u32;
                        for bit in 0..bits {
                            if row[bitpos / 8] >> (bitpos % 8) & 1 == 1 {
                                v |= 1 << bit;
                            }
                            bitpos += 1;
                        }
                        indices[ii] = v;
                        ii += 1;
                    }
                }
            }
        }
        let mut labels = Vec::with_capacity(batch);
        for _ in 0..batch {
            labels.push(read_u32(buf, &mut pos, "label")? as usize);
        }
        Ok(QuantizedBatch {
            indices,
            batch,
            groups,
            spatial,
            atoms,
            group_dims,
            codebook_version: 0,
            labels,
        })
    }

    pub fn write_codebook<T: Scalar>(cb: &Codebook<T>) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&cb.version.to_le_bytes());
        out.extend_from_slice(&(cb.group_count() as u32).to_le_bytes());
        out.extend_from_slice(&(cb.atoms_per_group() as u32).to_le_bytes());
        for d in cb.group_dims_vec() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for g in 0..cb.group_count() {
            for i in 0..cb.atoms_per_group() {
                for v in cb.atom(g, i) {
                    out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn read_codebook<T: Scalar>(buf: &[u8], seed: u64) -> Result<Codebook<T>> {
        let mut pos = 0;
        let magic = take(buf, &mut pos, 4, "magic")?;
        if magic != CODEBOOK_MAGIC {
            return Err(Error::DataFormat {
                path: "<bytes>".into(),
                message: format!("bad magic {magic:?}, expected DGLC"),
                offset: 0,
            });
        }
        let version = u64::from_le_bytes(take(buf, &mut pos, 8, "version")?.try_into().unwrap());
        let groups = read_u32(buf, &mut pos, "groups")? as usize;
        let atoms = read_u32(buf, &mut pos, "atoms")? as usize;
        let mut dims = Vec::with_capacity(groups);
        for _ in 0..groups {
            dims.push(read_u32(buf, &mut pos, "group dim")? as usize);
        }
        let channels: usize = dims.iter().sum();
        let mut cb = Codebook::<T>::new(channels, groups, atoms, seed)?;
        if cb.group_dims_vec() != dims {
            return Err(Error::DataFormat {
                path: "<bytes>".into(),
                message: format!(
                    "group dims {:?} do not follow the remainder-absorbing split {:?}",
                    dims,
                    cb.group_dims_vec()
                ),
                offset: 16,
            });
        }
        for g in 0..groups {
            let dim = dims[g];
            for i in 0..atoms {
                let mut atom = Vec::with_capacity(dim);
                for _ in 0..dim {
                    let raw = take(buf, &mut pos, 4, "atom value")?;
                    atom.push(T::from_f64(f64::from(f32::from_le_bytes(raw.try_into().unwrap()))));
                }
                cb.set_atom(g, i, &atom);
            }
        }
        cb.version = version;
        Ok(cb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_tensor(shape: [usize; 4], seedv: u64) -> Tensor<f64> {
        let mut rng = seed::rng(seedv, "vq-test", 0);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn atoms_covering_data_roundtrip_bit_exactly() {
        // Two distinct sub-vectors per group, atoms placed exactly on them.
        let x = Tensor::<f64>::from_fn([1, 4, 2, 2], |_, c, y, xx| {
            if (y + xx) % 2 == 0 {
                c as f64
            } else {
                -(c as f64) - 1.0
            }
        });
        let mut cb = Codebook::new(4, 2, 2, 0).unwrap();
        // Group 0 covers channels 0..2, group 1 channels 2..4.
        cb.set_atom(0, 0, &[0.0, 1.0]);
        cb.set_atom(0, 1, &[-1.0, -2.0]);
        cb.set_atom(1, 0, &[2.0, 3.0]);
        cb.set_atom(1, 1, &[-3.0, -4.0]);
        let q = encode(&x, &cb).unwrap();
        let back = decode(&q, &cb).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn encode_matches_exhaustive_search() {
        let x = random_tensor([2, 4, 3, 3], 5);
        let mut cb = Codebook::new(4, 2, 3, 1).unwrap();
        let mut rng = seed::rng(6, "vq-atoms", 0);
        for g in 0..2 {
            for i in 0..3 {
                let atom: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                cb.set_atom(g, i, &atom);
            }
        }
        let q = encode(&x, &cb).unwrap();
        // Independent brute force with its own layout walk.
        for b in 0..2 {
            for g in 0..2 {
                for y in 0..3 {
                    for xx in 0..3 {
                        let sub: Vec<f64> = (0..2).map(|c| x.at(b, g * 2 + c, y, xx)).collect();
                        let mut best = 0u32;
                        let mut best_d = f64::INFINITY;
                        for i in 0..3 {
                            let atom = cb.atom(g, i);
                            let d: f64 = atom
                                .iter()
                                .zip(sub.iter())
                                .map(|(a, s)| (a - s) * (a - s))
                                .sum();
                            if d < best_d {
                                best_d = d;
                                best = i as u32;
                            }
                        }
                        let got = q.indices[((b * 2 + g) * 3 + y) * 3 + xx];
                        assert_eq!(got, best, "site ({b},{g},{y},{xx})");
                    }
                }
            }
        }
    }

    #[test]
    fn single_atom_codebook_broadcasts_atom() {
        let x = random_tensor([1, 4, 2, 2], 9);
        let mut cb = Codebook::new(4, 2, 1, 0).unwrap();
        cb.set_atom(0, 0, &[0.5, -0.5]);
        cb.set_atom(1, 0, &[1.5, -1.5]);
        let q = encode(&x, &cb).unwrap();
        assert!(q.indices.iter().all(|&i| i == 0));
        let back = decode(&q, &cb).unwrap();
        for y in 0..2 {
            for xx in 0..2 {
                assert_eq!(back.at(0, 0, y, xx), 0.5);
                assert_eq!(back.at(0, 3, y, xx), -1.5);
            }
        }
    }

    #[test]
    fn zero_bits_for_single_atom() {
        assert_eq!(bits_per_index(1), 0);
        assert_eq!(bits_per_index(2), 1);
        assert_eq!(bits_per_index(256), 8);
        assert_eq!(bits_per_index(257), 9);
        assert_eq!(bits_per_index(1 << 32), 32);
    }

    #[test]
    fn decode_rejects_out_of_range_indices() {
        let mut cb = Codebook::<f64>::new(4, 2, 2, 0).unwrap();
        cb.set_atom(0, 0, &[0.0, 0.0]);
        let q = QuantizedBatch {
            indices: vec![0, 3, 0, 0, 0, 0, 0, 0],
            batch: 1,
            groups: 2,
            spatial: 2,
            atoms: 4, // larger than the decoder's 2
            group_dims: vec![2, 2],
            codebook_version: 0,
            labels: vec![],
        };
        assert!(matches!(
            decode(&q, &cb),
            Err(Error::IndexOutOfRange { index: 3, atoms: 2 })
        ));
    }

    #[test]
    fn ema_converges_to_stationary_mean() {
        // One cluster, stationary batch: after 200 updates at gamma 0.99 the
        // atom sits on the batch mean to within 1e-3.
        let x = Tensor::<f64>::from_fn([8, 2, 2, 2], |b, c, y, xx| {
            1.0 + 0.01 * ((b * 8 + c * 4 + y * 2 + xx) % 7) as f64
        });
        let mut mean = [0.0f64; 2];
        let mut count = 0.0;
        for b in 0..8 {
            for y in 0..2 {
                for xx in 0..2 {
                    for c in 0..2 {
                        mean[c] += x.at(b, c, y, xx);
                    }
                    count += 1.0;
                }
            }
        }
        mean[0] /= count;
        mean[1] /= count;
        let mut cb = Codebook::new(2, 1, 1, 3).unwrap();
        cb.set_atom(0, 0, &[5.0, -5.0]);
        for _ in 0..200 {
            cb.ema_update(&x, 0.99).unwrap();
        }
        let atom = cb.atom(0, 0);
        assert!((atom[0] - mean[0]).abs() < 1e-3, "{} vs {}", atom[0], mean[0]);
        assert!((atom[1] - mean[1]).abs() < 1e-3, "{} vs {}", atom[1], mean[1]);
    }

    #[test]
    fn gamma_zero_single_update_hits_batch_cluster_mean() {
        let x = Tensor::<f64>::new([2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let mut cb = Codebook::new(1, 1, 1, 3).unwrap();
        cb.set_atom(0, 0, &[100.0]);
        cb.ema_update(&x, 0.0).unwrap();
        // count = 2, sum = 4 -> atom = 4 / (2 + 1e-5)
        let expect = 4.0 / (2.0 + DEFAULT_EMA_EPSILON);
        assert!((cb.atom(0, 0)[0] - expect).abs() < 1e-12);
        assert!((cb.atom(0, 0)[0] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn untouched_atom_keeps_its_value() {
        let x = Tensor::<f64>::new([2, 1, 1, 1], vec![1.0, 1.1]).unwrap();
        let mut cb = Codebook::new(1, 1, 2, 3).unwrap();
        cb.set_atom(0, 0, &[1.0]);
        cb.set_atom(0, 1, &[50.0]);
        cb.dead_after = u64::MAX; // disable reseeding for this check
        cb.ema_update(&x, 0.5).unwrap();
        assert_eq!(cb.atom(0, 1)[0], 50.0);
        assert!(cb.atom(0, 0)[0] != 1.0);
    }

    #[test]
    fn dead_atom_is_reseeded_from_batch() {
        let x = Tensor::<f64>::new([2, 1, 1, 1], vec![1.0, 1.1]).unwrap();
        let mut cb = Codebook::new(1, 1, 2, 3).unwrap();
        cb.set_atom(0, 0, &[1.0]);
        cb.set_atom(0, 1, &[50.0]);
        cb.dead_after = 4;
        for _ in 0..2 {
            cb.ema_update(&x, 0.5).unwrap();
        }
        // 4 vectors seen >= 4: the never-used atom snaps to a batch value.
        let v = cb.atom(0, 1)[0];
        assert!(v == 1.0 || v == 1.1, "reseeded to {v}");
    }

    #[test]
    fn doubling_atoms_never_worsens_refit_error() {
        let x = random_tensor([2, 4, 4, 4], 11);
        let mut prev_err = f64::INFINITY;
        for c_n in [1usize, 2, 4, 8] {
            let mut cb = Codebook::init_from_batch(&x, 2, c_n, 42).unwrap();
            for _ in 0..50 {
                cb.ema_update(&x, 0.5).unwrap();
            }
            let q = encode(&x, &cb).unwrap();
            let back = decode(&q, &cb).unwrap();
            let err: f64 = x
                .data()
                .iter()
                .zip(back.data().iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!(
                err <= prev_err + 1e-9,
                "error rose from {prev_err} to {err} at C={c_n}"
            );
            prev_err = err;
        }
    }

    #[test]
    fn stale_decoder_error_bounded_by_atom_drift() {
        let x = random_tensor([2, 4, 4, 4], 13);
        let encoder = Codebook::init_from_batch(&x, 2, 4, 7).unwrap();
        let mut decoder = encoder.clone();
        let mut enc = encoder;
        // Drift the encoder while the decoder stays at version v-1.
        let x2 = random_tensor([2, 4, 4, 4], 14);
        enc.ema_update(&x2, 0.5).unwrap();
        assert!(enc.version > decoder.version);
        let mut max_drift: f64 = 0.0;
        for g in 0..2 {
            for i in 0..4 {
                let d: f64 = enc
                    .atom(g, i)
                    .iter()
                    .zip(decoder.atom(g, i).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                max_drift = max_drift.max(d);
            }
        }
        let q = encode(&x, &enc).unwrap();
        let fresh = decode(&q, &enc).unwrap();
        let stale = decode(&q, &decoder).unwrap();
        // Per-site reconstruction difference cannot exceed the largest atom
        // drift (each site is one atom lookup).
        let sub_dims = 2;
        for b in 0..2 {
            for g in 0..2 {
                for y in 0..4 {
                    for xx in 0..4 {
                        let mut d = 0.0;
                        for c in 0..sub_dims {
                            let ch = g * 2 + c;
                            let diff = fresh.at(b, ch, y, xx) - stale.at(b, ch, y, xx);
                            d += diff * diff;
                        }
                        assert!(d.sqrt() <= max_drift + 1e-12);
                    }
                }
            }
        }
        // Re-synchronizing removes the gap.
        sync_codebooks(&enc, &mut decoder).unwrap();
        assert_eq!(decoder.version, enc.version);
        let resynced = decode(&q, &decoder).unwrap();
        assert_eq!(resynced.data(), fresh.data());
    }

    #[test]
    fn sync_policies_fire_as_specified() {
        let period = SyncPolicy::Period(16);
        let fired = (0..160).filter(|&s| period.fires(s)).count();
        assert_eq!(fired, 10);

        assert!((0..50).all(|s| SyncPolicy::Rate(1.0).fires(s)));
        assert!((0..50).all(|s| !SyncPolicy::Rate(0.0).fires(s)));
        let sixteenth = SyncPolicy::Rate(1.0 / 16.0);
        assert_eq!((0..160).filter(|&s| sixteenth.fires(s)).count(), 10);
        assert!((sixteenth.rate() - SyncPolicy::Period(16).rate()).abs() < 1e-15);
    }

    #[test]
    fn sync_rejects_mismatched_shapes() {
        let a = Codebook::<f64>::new(4, 2, 2, 0).unwrap();
        let mut b = Codebook::<f64>::new(4, 2, 4, 0).unwrap();
        assert!(sync_codebooks(&a, &mut b).is_err());
    }

    #[test]
    fn reference_batch_bits_evaluation() {
        // First link of the reference four-module network:
        // 128 * 32 * 1024 * 8 + 32 * (128 + 3) * 256 = 33,554,432 + 1,073,152.
        let bits = batch_bits(128, 32, 3, 128, 256, 32, 1.0);
        assert_eq!(bits, 34_627_584.0);
        assert_eq!(batch_bits(128, 32, 3, 128, 256, 32, 0.0), 33_554_432.0);
        // C = 1: the index stream vanishes, only the codebook term remains.
        assert_eq!(batch_bits(128, 32, 3, 128, 1, 32, 1.0), 32.0 * 131.0);
    }

    #[test]
    fn reference_bandwidth_factors() {
        let c1 = bandwidth_compression(128, 32, 3, 128, 256, 32, 1.0);
        let c2 = bandwidth_compression(128, 16, 128, 256, 256, 32, 1.0);
        let c3 = bandwidth_compression(128, 16, 256, 256, 256, 32, 1.0);
        assert!((c1 - 15.504).abs() < 0.01, "{c1}");
        assert!((c2 - 23.27).abs() < 0.01, "{c2}");
        assert!((c3 - 21.33).abs() < 0.01, "{c3}");
        // Huge codebook at alpha=0: grouping alone still gives K/k.
        let big = bandwidth_compression(128, 32, 3, 128, 1 << 32, 32, 0.0);
        assert!((big - 4.0).abs() < 1e-12, "{big}");
    }

    #[test]
    fn reference_buffer_factors() {
        let c1 = buffer_compression(256, 32, 128, 256, 32);
        let c2 = buffer_compression(256, 16, 256, 256, 32);
        assert!((c1 - 15.75).abs() < 0.01, "{c1}");
        assert!((c2 - 28.44).abs() < 0.01, "{c2}");
        // Large-M limit: codebook amortized away, ratio -> 32K / (k ceil(log2 C)).
        let limit = buffer_compression(1 << 40, 32, 128, 256, 32);
        assert!((limit - (32.0 * 128.0) / (32.0 * 8.0)).abs() < 1e-3, "{limit}");
    }

    proptest! {
        #[test]
        fn wire_roundtrip_preserves_batches(
            batch in 1usize..3,
            spatial in 1usize..5,
            atoms in 1u64..20,
            groups in 1usize..3,
        ) {
            let dims = vec![2usize; groups];
            let mut rng = seed::rng(atoms ^ spatial as u64, "wire", 0);
            let count = batch * groups * spatial * spatial;
            let indices: Vec<u32> = (0..count).map(|_| rng.random_range(0..atoms as u32).min(atoms as u32 - 1)).collect();
            let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..10)).collect();
            let q = QuantizedBatch {
                indices, batch, groups, spatial, atoms,
                group_dims: dims,
                codebook_version: 0,
                labels,
            };
            let bytes = wire::write_quantized(&q);
            let back = wire::read_quantized(&bytes).unwrap();
            prop_assert_eq!(q, back);
        }
    }

    #[test]
    fn codebook_wire_roundtrip() {
        let x = random_tensor([2, 4, 4, 4], 21);
        let cb = Codebook::<f64>::init_from_batch(&x, 2, 3, 9).unwrap();
        let bytes = wire::write_codebook(&cb);
        let back: Codebook<f64> = wire::read_codebook(&bytes, 0).unwrap();
        assert_eq!(back.version, cb.version);
        assert_eq!(back.group_dims_vec(), cb.group_dims_vec());
        for g in 0..2 {
            for i in 0..3 {
                for (a, b) in back.atom(g, i).iter().zip(cb.atom(g, i).iter()) {
                    // Snapshots are 32-bit on the wire.
                    assert_eq!(*a, f64::from(*b as f32));
                }
            }
        }
    }

    #[test]
    fn remainder_channels_go_to_last_group() {
        assert_eq!(group_dims(10, 3).unwrap(), vec![3, 3, 4]);
        assert_eq!(group_dims(8, 4).unwrap(), vec![2, 2, 2, 2]);
        assert!(group_dims(2, 4).is_err());
    }
}
