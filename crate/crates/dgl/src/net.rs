//! Partitioning a layered network into greedily trained modules.
//!
//! Each module owns a trunk (its slice of the main network) and a head: an
//! auxiliary classifier for every module except the last, which carries the
//! final classifier instead. A module's local loss backpropagates through its
//! own trunk and head only; the activation passed on is a plain value with no
//! gradient path into the producer (update unlocking).

use crate::error::{Error, Result};
use crate::gradcheck::GradCheckTarget;
use crate::layers::{LayerSpec, Stack};
use crate::loss::{correct_count, cross_entropy};
use crate::optim::Parameter;
use crate::seed;
use crate::tensor::{shape_string, Scalar, Shape, Tensor};

/// Auxiliary head family attached to non-final modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxKind {
    /// Two same-width 3x3 convolutions, 2x2 averaging, projection. Costly
    /// (about 2x the largest module) but the strongest local signal.
    CnnAux,
    /// Spatial averaging to 2x2, then a 3-layer MLP of constant width (4x the
    /// first module's channel count) and a projection.
    MlpAux,
    /// Staged spatial reduction: average to a quarter of the extent, three
    /// 1x1 convolutions, average to 2x2, then a 3-layer MLP of width 4x the
    /// module's channel count and a projection.
    MlpSrAux,
}

impl AuxKind {
    pub fn name(self) -> &'static str {
        match self {
            AuxKind::CnnAux => "cnn",
            AuxKind::MlpAux => "mlp",
            AuxKind::MlpSrAux => "mlp-sr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(AuxKind::CnnAux),
            "mlp" => Ok(AuxKind::MlpAux),
            "mlp-sr" => Ok(AuxKind::MlpSrAux),
            other => Err(Error::InvalidArgument(format!(
                "unknown aux head kind '{other}' (expected cnn | mlp | mlp-sr)"
            ))),
        }
    }
}

/// Geometry and family parameters of the reference convolutional network.
#[derive(Clone, Copy, Debug)]
pub struct NetConfig {
    /// Channel count of the first module; doubled at each downsampling.
    pub width: usize,
    /// Number of modules (4 or 6); each module holds one 3x3 conv block.
    pub modules: usize,
    pub classes: usize,
    pub in_channels: usize,
    /// Input spatial extent (square images).
    pub spatial: usize,
    pub aux: AuxKind,
}

/// One greedily trained unit: trunk slice plus local classifier head.
#[derive(Clone, Debug)]
pub struct GreedyModule<T: Scalar> {
    /// 1-based position in the partition.
    pub index: usize,
    pub trunk: Stack<T>,
    pub head: Stack<T>,
    pub in_channels: usize,
    pub in_spatial: usize,
    pub out_channels: usize,
    pub out_spatial: usize,
}

impl<T: Scalar> GreedyModule<T> {
    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.trunk.params_mut();
        v.extend(self.head.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        self.trunk.zero_grad();
        self.head.zero_grad();
    }

    pub fn grad_sq_norm(&self) -> f64 {
        self.trunk.grad_sq_norm() + self.head.grad_sq_norm()
    }

    pub fn param_vector(&self) -> Vec<f64> {
        let mut v = self.trunk.param_vector();
        v.extend(self.head.param_vector());
        v
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        if s[1] != self.in_channels || s[2] != self.in_spatial || s[3] != self.in_spatial {
            return Err(Error::shape(
                format!("module {}", self.index),
                format!("_x{}x{}x{}", self.in_channels, self.in_spatial, self.in_spatial),
                shape_string(s),
            ));
        }
        Ok(())
    }
}

/// Result of one local forward/backward on a module.
pub struct LocalLoss<T: Scalar> {
    pub loss: T,
    /// The module output, detached: consuming it creates no gradient path
    /// back into this module.
    pub output: Tensor<T>,
    pub correct: usize,
}

#[derive(Clone, Debug)]
pub struct Partition<T: Scalar> {
    pub modules: Vec<GreedyModule<T>>,
    pub classes: usize,
}

impl<T: Scalar> Partition<T> {
    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    /// Forward through module `j` (1-based) without any loss computation.
    pub fn forward_module(&mut self, j: usize, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let m = &mut self.modules[j - 1];
        m.check_input(x.shape())?;
        m.trunk.forward(x, train)
    }

    /// Computes module `j`'s output and its local loss; when `train` is set,
    /// gradients for module `j`'s trunk and head are accumulated. No gradient
    /// ever flows across the module boundary.
    pub fn local_loss(
        &mut self,
        j: usize,
        x: &Tensor<T>,
        labels: &[usize],
        train: bool,
    ) -> Result<LocalLoss<T>> {
        let m = &mut self.modules[j - 1];
        m.check_input(x.shape())?;
        let out = m.trunk.forward(x, train)?;
        let logits = m.head.forward(&out, train)?;
        let (loss, dlogits) = cross_entropy(&logits, labels)?;
        let correct = correct_count(&logits, labels);
        if train {
            let dout = m.head.backward(&dlogits)?;
            m.trunk.backward(&dout)?;
        }
        Ok(LocalLoss {
            loss,
            output: out,
            correct,
        })
    }

    /// Classifies a batch with modules `1..=j` (evaluation mode) and returns
    /// the number of correct predictions.
    pub fn evaluate_through(&mut self, j: usize, x: &Tensor<T>, labels: &[usize]) -> Result<usize> {
        let mut cur = x.clone();
        for i in 1..j {
            cur = self.forward_module(i, &cur, false)?;
        }
        let m = &mut self.modules[j - 1];
        m.check_input(cur.shape())?;
        let out = m.trunk.forward(&cur, false)?;
        let logits = m.head.forward(&out, false)?;
        Ok(correct_count(&logits, labels))
    }

    /// Features entering module `j`, i.e. the input forwarded through modules
    /// `1..j` in evaluation mode. Used by the drift probes.
    pub fn features_into(&mut self, j: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for i in 1..j {
            cur = self.forward_module(i, &cur, false)?;
        }
        Ok(cur)
    }

    pub fn param_vector(&self) -> Vec<f64> {
        self.modules.iter().flat_map(|m| m.param_vector()).collect()
    }

    /// A finite-difference probe for module `j` on a fixed batch.
    pub fn module_probe(&self, j: usize, input: Tensor<T>, labels: Vec<usize>) -> ModuleProbe<T> {
        ModuleProbe {
            module: self.modules[j - 1].clone(),
            input,
            labels,
        }
    }
}

/// Owns a clone of one module plus a probe batch; `loss` is then a pure
/// function of the module parameters, as the FD harness requires.
#[derive(Clone)]
pub struct ModuleProbe<T: Scalar> {
    pub module: GreedyModule<T>,
    input: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> GradCheckTarget<T> for ModuleProbe<T> {
    fn loss(&mut self) -> Result<T> {
        let out = self.module.trunk.forward(&self.input, true)?;
        let logits = self.module.head.forward(&out, true)?;
        Ok(cross_entropy(&logits, &self.labels)?.0)
    }

    fn loss_and_grad(&mut self) -> Result<T> {
        let out = self.module.trunk.forward(&self.input, true)?;
        let logits = self.module.head.forward(&out, true)?;
        let (loss, dlogits) = cross_entropy(&logits, &self.labels)?;
        let dout = self.module.head.backward(&dlogits)?;
        self.module.trunk.backward(&dout)?;
        Ok(loss)
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.module.params_mut()
    }
}

fn aux_head_specs(
    kind: AuxKind,
    channels: usize,
    spatial: usize,
    first_width: usize,
    classes: usize,
) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    match kind {
        AuxKind::CnnAux => {
            specs.push(LayerSpec::Conv { in_channels: channels, out_channels: channels, kernel: 3 });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::Conv { in_channels: channels, out_channels: channels, kernel: 3 });
            specs.push(LayerSpec::Relu);
            let t = spatial.min(2);
            specs.push(LayerSpec::AvgPoolTo { target: t });
            specs.push(LayerSpec::Dense { in_features: channels * t * t, out_features: classes });
        }
        AuxKind::MlpAux => {
            let t = spatial.min(2);
            let width = 4 * first_width;
            specs.push(LayerSpec::AvgPoolTo { target: t });
            specs.push(LayerSpec::Dense { in_features: channels * t * t, out_features: width });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::Dense { in_features: width, out_features: width });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::Dense { in_features: width, out_features: width });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::Dense { in_features: width, out_features: classes });
        }
        AuxKind::MlpSrAux => {
            let reduced = (spatial / 4).max(1);
            specs.push(LayerSpec::AvgPoolTo { target: reduced });
            for _ in 0..3 {
                specs.push(LayerSpec::Conv { in_channels: channels, out_channels: channels, kernel: 1 });
                specs.push(LayerSpec::Relu);
            }
            let t = reduced.min(2);
            let width = 4 * channels;
            specs.push(LayerSpec::AvgPoolTo { target: t });
            specs.push(LayerSpec::Dense { in_features: channels * t * t, out_features: width });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::Dense { in_features: width, out_features: width });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::Dense { in_features: width, out_features: width });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::Dense { in_features: width, out_features: classes });
        }
    }
    specs
}

/// Final module's classifier: pooling and a 2-hidden-layer dense head.
fn classifier_specs(channels: usize, spatial: usize, classes: usize) -> Vec<LayerSpec> {
    let t = spatial.min(2);
    let flat = channels * t * t;
    vec![
        LayerSpec::AvgPoolTo { target: t },
        LayerSpec::Dense { in_features: flat, out_features: flat },
        LayerSpec::Relu,
        LayerSpec::Dense { in_features: flat, out_features: flat },
        LayerSpec::Relu,
        LayerSpec::Dense { in_features: flat, out_features: classes },
    ]
}

/// Builds the reference convolutional family: one 3x3 conv block (conv,
/// batchnorm, ReLU) per module, 2x2 max pooling at the entry of modules 2 and
/// 4, channel width doubled at each downsampling. For width 128 on 32x32
/// inputs the module outputs are 128@32, 256@16, 256@16, 512@8, 512@8, 512@8.
pub fn build_reference_net<T: Scalar>(cfg: &NetConfig, master_seed: u64) -> Result<Partition<T>> {
    if cfg.modules != 4 && cfg.modules != 6 {
        return Err(Error::InvalidArgument(format!(
            "reference net supports 4 or 6 modules, got {}",
            cfg.modules
        )));
    }
    if cfg.width == 0 {
        return Err(Error::InvalidArgument("width must be at least 1".into()));
    }
    let plan = reference_plan(cfg.width, cfg.modules);
    let mut modules = Vec::with_capacity(cfg.modules);
    let mut in_ch = cfg.in_channels;
    let mut spatial = cfg.spatial;
    for (j, &out_ch) in plan.iter().enumerate() {
        let index = j + 1;
        let pooled = index == 2 || index == 4;
        let in_spatial = spatial;
        if pooled {
            if spatial < 2 {
                return Err(Error::InvalidArgument(format!(
                    "spatial extent {spatial} too small to pool at module {index}"
                )));
            }
            spatial /= 2;
        }
        let mut trunk = Vec::new();
        if pooled {
            trunk.push(LayerSpec::MaxPool2);
        }
        trunk.push(LayerSpec::Conv { in_channels: in_ch, out_channels: out_ch, kernel: 3 });
        trunk.push(LayerSpec::BatchNorm { channels: out_ch });
        trunk.push(LayerSpec::Relu);
        let head = if index == cfg.modules {
            classifier_specs(out_ch, spatial, cfg.classes)
        } else {
            aux_head_specs(cfg.aux, out_ch, spatial, cfg.width, cfg.classes)
        };
        let mut rng = seed::rng(master_seed, "module-init", index as u64);
        modules.push(GreedyModule {
            index,
            trunk: Stack::from_specs(&trunk, &mut rng),
            head: Stack::from_specs(&head, &mut rng),
            in_channels: in_ch,
            in_spatial,
            out_channels: out_ch,
            out_spatial: spatial,
        });
        in_ch = out_ch;
    }
    Ok(Partition {
        modules,
        classes: cfg.classes,
    })
}

/// Output channel counts per module: width doubled at each downsampling.
pub fn reference_plan(width: usize, modules: usize) -> Vec<usize> {
    let full = [width, 2 * width, 2 * width, 4 * width, 4 * width, 4 * width];
    full[..modules].to_vec()
}

/// Builds a partition from explicit per-module trunks, attaching the
/// configured heads; used for degenerate and custom splits.
pub fn build_custom_net<T: Scalar>(
    trunks: &[Vec<LayerSpec>],
    in_channels: usize,
    spatial: usize,
    classes: usize,
    aux: AuxKind,
    first_width_hint: usize,
    master_seed: u64,
) -> Result<Partition<T>> {
    if trunks.is_empty() {
        return Err(Error::InvalidArgument("partition needs at least one module".into()));
    }
    let mut modules = Vec::with_capacity(trunks.len());
    let mut shape = [1, in_channels, spatial, spatial];
    for (j, trunk_specs) in trunks.iter().enumerate() {
        let index = j + 1;
        let mut rng = seed::rng(master_seed, "module-init", index as u64);
        let trunk = Stack::<T>::from_specs(trunk_specs, &mut rng);
        let out_shape = trunk.out_shape(shape)?;
        let head = if index == trunks.len() {
            classifier_specs(out_shape[1], out_shape[2], classes)
        } else {
            aux_head_specs(aux, out_shape[1], out_shape[2], first_width_hint, classes)
        };
        modules.push(GreedyModule {
            index,
            trunk,
            head: Stack::from_specs(&head, &mut rng),
            in_channels: shape[1],
            in_spatial: shape[2],
            out_channels: out_shape[1],
            out_spatial: out_shape[2],
        });
        shape = out_shape;
    }
    Ok(Partition { modules, classes })
}

/// Per-module and per-head flop counts (per sample) with the ratios used to
/// budget auxiliary heads: each head against the largest module trunk, and a
/// median of those ratios over the auxiliary modules as the headline number.
#[derive(Clone, Debug)]
pub struct FlopReport {
    pub module_flops: Vec<u64>,
    pub head_flops: Vec<u64>,
    pub largest_module: u64,
    /// head_flops[j] / largest_module, for every module including the final
    /// classifier.
    pub head_ratios: Vec<f64>,
    /// Median of `head_ratios` over auxiliary modules (the final classifier
    /// excluded); 0 when there is a single module.
    pub aux_ratio_median: f64,
}

impl FlopReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str("module  trunk_flops  head_flops  head/largest\n");
        for j in 0..self.module_flops.len() {
            out.push_str(&format!(
                "{:>6}  {:>11}  {:>10}  {:>11.4}%\n",
                j + 1,
                self.module_flops[j],
                self.head_flops[j],
                self.head_ratios[j] * 100.0
            ));
        }
        out.push_str(&format!(
            "aux/largest median: {:.4}%\n",
            self.aux_ratio_median * 100.0
        ));
        out
    }
}

pub fn flop_report<T: Scalar>(p: &Partition<T>) -> Result<FlopReport> {
    let mut module_flops = Vec::new();
    let mut head_flops = Vec::new();
    for m in &p.modules {
        let in_shape = [1, m.in_channels, m.in_spatial, m.in_spatial];
        let trunk = m.trunk.flops(in_shape)?;
        let out_shape = m.trunk.out_shape(in_shape)?;
        let head = m.head.flops(out_shape)?;
        module_flops.push(trunk);
        head_flops.push(head);
    }
    let largest = module_flops.iter().copied().max().unwrap_or(0);
    let head_ratios: Vec<f64> = head_flops
        .iter()
        .map(|&h| if largest == 0 { 0.0 } else { h as f64 / largest as f64 })
        .collect();
    let aux_count = p.modules.len().saturating_sub(1);
    let median = if aux_count == 0 {
        0.0
    } else {
        let mut aux: Vec<f64> = head_ratios[..aux_count].to_vec();
        aux.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if aux.len() % 2 == 1 {
            aux[aux.len() / 2]
        } else {
            (aux[aux.len() / 2 - 1] + aux[aux.len() / 2]) / 2.0
        }
    };
    Ok(FlopReport {
        module_flops,
        head_flops,
        largest_module: largest,
        head_ratios,
        aux_ratio_median: median,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradient_check, GradCheckCfg};
    use crate::layers::Layer;
    use rand::Rng;

    fn cifar_cfg(width: usize, modules: usize, aux: AuxKind) -> NetConfig {
        NetConfig {
            width,
            modules,
            classes: 10,
            in_channels: 3,
            spatial: 32,
            aux,
        }
    }

    fn desk_cfg() -> NetConfig {
        NetConfig {
            width: 16,
            modules: 4,
            classes: 4,
            in_channels: 1,
            spatial: 8,
            aux: AuxKind::MlpAux,
        }
    }

    fn random_batch(shape: [usize; 4], classes: usize, seedv: u64) -> (Tensor<f64>, Vec<usize>) {
        let mut rng = seed::rng(seedv, "net-test-batch", 0);
        let x = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0));
        let y = (0..shape[0]).map(|_| rng.random_range(0..classes)).collect();
        (x, y)
    }

    #[test]
    fn reference_channel_plan_and_geometry() {
        let p = build_reference_net::<f32>(&cifar_cfg(128, 6, AuxKind::MlpAux), 0).unwrap();
        let out_ch: Vec<usize> = p.modules.iter().map(|m| m.out_channels).collect();
        let out_sp: Vec<usize> = p.modules.iter().map(|m| m.out_spatial).collect();
        assert_eq!(out_ch, vec![128, 256, 256, 512, 512, 512]);
        assert_eq!(out_sp, vec![32, 16, 16, 8, 8, 8]);

        let p4 = build_reference_net::<f32>(&cifar_cfg(128, 4, AuxKind::MlpAux), 0).unwrap();
        let out_ch4: Vec<usize> = p4.modules.iter().map(|m| m.out_channels).collect();
        let out_sp4: Vec<usize> = p4.modules.iter().map(|m| m.out_spatial).collect();
        assert_eq!(out_ch4, vec![128, 256, 256, 512]);
        assert_eq!(out_sp4, vec![32, 16, 16, 8]);
    }

    #[test]
    fn scaled_down_plan_follows_same_doubling_rule() {
        assert_eq!(reference_plan(16, 4), vec![16, 32, 32, 64]);
        let p = build_reference_net::<f32>(&desk_cfg(), 3).unwrap();
        let out_sp: Vec<usize> = p.modules.iter().map(|m| m.out_spatial).collect();
        assert_eq!(out_sp, vec![8, 4, 4, 2]);
    }

    #[test]
    fn unsupported_depth_is_rejected() {
        let mut cfg = cifar_cfg(16, 6, AuxKind::MlpAux);
        cfg.modules = 5;
        assert!(build_reference_net::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn local_loss_detaches_the_producer() {
        // Backpropagating module 2's loss must leave every other module's
        // gradients at exactly zero.
        let mut p = build_reference_net::<f64>(&desk_cfg(), 5).unwrap();
        let (x, y) = random_batch([2, 1, 8, 8], 4, 1);
        for m in p.modules.iter_mut() {
            m.zero_grad();
        }
        let x1 = p.local_loss(1, &x, &y, false).unwrap().output;
        p.local_loss(2, &x1, &y, true).unwrap();
        assert_eq!(p.modules[0].grad_sq_norm(), 0.0);
        assert!(p.modules[1].grad_sq_norm() > 0.0);
        assert_eq!(p.modules[2].grad_sq_norm(), 0.0);
        assert_eq!(p.modules[3].grad_sq_norm(), 0.0);
    }

    #[test]
    fn uniform_logits_loss_is_ln_classes() {
        let mut p = build_reference_net::<f64>(&desk_cfg(), 5).unwrap();
        // Zero the projection of module 1's head so logits are uniform.
        let head_len = p.modules[0].head.layers.len();
        if let Layer::Dense(d) = &mut p.modules[0].head.layers[head_len - 1] {
            d.weight.value.fill(0.0);
            d.bias.value.fill(0.0);
        } else {
            panic!("expected dense projection");
        }
        let (x, y) = random_batch([3, 1, 8, 8], 4, 2);
        let out = p.local_loss(1, &x, &y, false).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn chained_local_losses_match_end_to_end_forward() {
        let cfg = desk_cfg();
        let mut p = build_reference_net::<f64>(&cfg, 9).unwrap();
        let mut q = p.clone();
        let (x, y) = random_batch([2, 1, 8, 8], 4, 3);
        // Chain through local_loss in training mode (batch statistics).
        let mut cur = x.clone();
        for j in 1..=4 {
            cur = p.local_loss(j, &cur, &y, true).unwrap().output;
        }
        // Run all trunks end to end on a fresh clone.
        let mut direct = x.clone();
        for j in 1..=4 {
            direct = q.modules[j - 1].trunk.forward(&direct, true).unwrap();
        }
        assert_eq!(cur.data(), direct.data());
    }

    #[test]
    fn local_loss_matches_compositional_oracle() {
        // Recompute module 2's loss and gradient using only raw layer
        // forward/backward plus cross_entropy, independent of local_loss.
        let mut p = build_reference_net::<f64>(&desk_cfg(), 21).unwrap();
        let (x, y) = random_batch([2, 1, 8, 8], 4, 7);
        let x1 = p.forward_module(1, &x, true).unwrap();

        let mut oracle = p.modules[1].clone();
        let mut got = p.modules[1].clone();

        got.zero_grad();
        let out = got.trunk.forward(&x1, true).unwrap();
        let logits = got.head.forward(&out, true).unwrap();
        let (loss_got, dlogits) = cross_entropy(&logits, &y).unwrap();
        let d = got.head.backward(&dlogits).unwrap();
        got.trunk.backward(&d).unwrap();

        oracle.zero_grad();
        let mut cur = x1.clone();
        for layer in oracle.trunk.layers.iter_mut() {
            cur = layer.forward(&cur, true).unwrap();
        }
        for layer in oracle.head.layers.iter_mut() {
            cur = layer.forward(&cur, true).unwrap();
        }
        let (loss_oracle, dlogits_o) = cross_entropy(&cur, &y).unwrap();
        let mut g = dlogits_o;
        for layer in oracle.head.layers.iter_mut().rev() {
            g = layer.backward(&g).unwrap();
        }
        for layer in oracle.trunk.layers.iter_mut().rev() {
            g = layer.backward(&g).unwrap();
        }
        assert_eq!(loss_got, loss_oracle);
        for (a, b) in got.params_mut().iter().zip(oracle.params_mut().iter()) {
            assert_eq!(a.grad.data(), b.grad.data());
        }
    }

    #[test]
    fn module_gradients_pass_fd_check() {
        let p = build_reference_net::<f64>(&desk_cfg(), 13).unwrap();
        let (x, y) = random_batch([2, 1, 8, 8], 4, 4);
        let probe = p.module_probe(1, x, y);
        let report = gradient_check(
            &probe,
            GradCheckCfg { max_per_param: Some(64), ..Default::default() },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn flop_ratios_on_reference_width() {
        // Width-128 CIFAR geometry. CNN-aux costs twice the largest module by
        // construction; the MLP heads sit well under the 5% budget.
        let mlp = flop_report(&build_reference_net::<f32>(&cifar_cfg(128, 6, AuxKind::MlpAux), 0).unwrap()).unwrap();
        assert!(
            (mlp.aux_ratio_median - 0.007).abs() < 0.003,
            "mlp median {}",
            mlp.aux_ratio_median
        );
        assert!(mlp.aux_ratio_median < 0.05);

        let sr = flop_report(&build_reference_net::<f32>(&cifar_cfg(128, 6, AuxKind::MlpSrAux), 0).unwrap()).unwrap();
        assert!(
            (sr.aux_ratio_median - 0.04).abs() < 0.003,
            "mlp-sr median {}",
            sr.aux_ratio_median
        );
        assert!(sr.aux_ratio_median < 0.05);

        let cnn = flop_report(&build_reference_net::<f32>(&cifar_cfg(128, 6, AuxKind::CnnAux), 0).unwrap()).unwrap();
        let largest_ratio = cnn.head_ratios[..5].iter().cloned().fold(0.0, f64::max);
        // Two same-width convolutions cost exactly twice the largest module;
        // the projection adds a sliver on top.
        assert!((largest_ratio - 2.0).abs() < 1e-3, "cnn ratio {largest_ratio}");
    }

    #[test]
    fn single_module_partition_reports_zero_aux_ratio() {
        let p = build_custom_net::<f32>(
            &[vec![LayerSpec::Conv { in_channels: 1, out_channels: 4, kernel: 3 }, LayerSpec::Relu]],
            1,
            8,
            4,
            AuxKind::MlpAux,
            4,
            0,
        )
        .unwrap();
        let report = flop_report(&p).unwrap();
        assert_eq!(report.aux_ratio_median, 0.0);
        assert_eq!(report.head_flops.len(), 1);
    }

    #[test]
    fn largest_module_flops_match_hand_count() {
        // Largest trunk of the width-128 6-module net: 3x3 conv 256->256 on
        // 16x16 output = 2 * 256 * 256 * 9 * 256.
        let p = build_reference_net::<f32>(&cifar_cfg(128, 6, AuxKind::MlpAux), 0).unwrap();
        let report = flop_report(&p).unwrap();
        assert_eq!(report.largest_module, 2 * 256 * 256 * 9 * 256);
    }
}
