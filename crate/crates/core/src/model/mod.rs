//! The fusion network: HSI and LiDAR feature extractors, the LiST attention
//! module and the decision-fusion head.

pub mod checkpoint;
pub mod fusion;
pub mod list;
mod params;

pub use checkpoint::Checkpoint;
pub use fusion::{decision_fusion, FusionHead, FusionOutput, LinearBlock};
pub use list::{Fc, ListOutput, ListWeights};
pub use params::{kaiming_uniform, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, ConvSpec, Graph, Mode, Scalar, Tensor, Var};

pub const BN_EPS: Scalar = 1e-5;
pub const BN_MOMENTUM: Scalar = 0.1;
/// Spatial kernel extent of every convolution.
const KERNEL: usize = 3;

/// Which logits the network emits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Branches {
    /// `λ₁·Y_h + λ₂·Y_l + Y_fus`.
    #[default]
    Fused,
    /// HSI extractor and its head only; the LiDAR path has no parameters.
    HsiOnly,
    /// LiDAR extractor and its head only.
    LidarOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    /// Spectral bands entering the HSI branch (after PCA).
    pub pca_dims: usize,
    /// Odd patch side length.
    pub patch: usize,
    /// Output channels of the three 3-D ConvBlocks.
    pub hsi_widths: [usize; 3],
    /// Spectral kernel extent of the three 3-D ConvBlocks.
    pub spectral_kernels: [usize; 3],
    /// Output channels of the HSI 2-D ConvBlock; the feature channel count c.
    pub features: usize,
    pub hsi_2d_padding: usize,
    /// Output channels of the three LiDAR ConvBlocks.
    pub lidar_widths: [usize; 3],
    pub lidar_padding: usize,
    /// Hidden width of each LinearBlock.
    pub hidden: usize,
    /// SE reduction ratio ρ.
    pub se_reduction: usize,
    pub branches: Branches,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 15,
            pca_dims: 30,
            patch: 11,
            hsi_widths: [8, 16, 32],
            spectral_kernels: [7, 5, 3],
            features: 64,
            hsi_2d_padding: 1,
            lidar_widths: [16, 32, 64],
            lidar_padding: 0,
            hidden: 128,
            se_reduction: 4,
            branches: Branches::Fused,
        }
    }
}

/// Shape `channels × height × width` of an extractor's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureShape {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

fn spatial_after(len: usize, padding: usize, what: &str) -> Result<usize> {
    crate::tensor::kernels::conv_output_len(len, KERNEL, 1, padding)
        .map_err(|e| Error::Config(format!("{what}: {e}")))
}

impl ModelConfig {
    /// Spectral depth left after the three 3-D convolutions.
    pub fn spectral_depth(&self) -> Result<usize> {
        let shrink: usize = self.spectral_kernels.iter().map(|k| k.saturating_sub(1)).sum();
        if self.spectral_kernels.contains(&0) || self.pca_dims <= shrink {
            return Err(Error::Config(format!(
                "{} spectral bands cannot pass 3-D kernels {:?}",
                self.pca_dims, self.spectral_kernels
            )));
        }
        Ok(self.pca_dims - shrink)
    }

    pub fn hsi_feature_shape(&self) -> Result<FeatureShape> {
        self.spectral_depth()?;
        let mut s = self.patch;
        for _ in 0..3 {
            s = spatial_after(s, 0, "HSI 3-D ConvBlock")?;
        }
        let s = spatial_after(s, self.hsi_2d_padding, "HSI 2-D ConvBlock")?;
        Ok(FeatureShape {
            channels: self.features,
            height: s,
            width: s,
        })
    }

    pub fn lidar_feature_shape(&self) -> Result<FeatureShape> {
        let mut s = self.patch;
        for _ in 0..3 {
            s = spatial_after(s, self.lidar_padding, "LiDAR ConvBlock")?;
        }
        Ok(FeatureShape {
            channels: self.lidar_widths[2],
            height: s,
            width: s,
        })
    }

    /// Checks every hyperparameter and that both extractors emit identical
    /// feature shapes.
    pub fn validate(&self) -> Result<FeatureShape> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.patch % 2 == 0 {
            return Err(Error::Config(format!("patch size {} must be odd", self.patch)));
        }
        let widths = self.hsi_widths.iter().chain(&self.lidar_widths);
        if widths.chain([&self.features, &self.hidden, &self.se_reduction]).any(|&v| v == 0) {
            return Err(Error::Config("layer widths and SE reduction must be positive".into()));
        }
        let hsi = self.hsi_feature_shape()?;
        let lidar = self.lidar_feature_shape()?;
        if hsi != lidar {
            return Err(Error::Config(format!(
                "shape contract violated: HSI features {}x{}x{} vs LiDAR features {}x{}x{}",
                hsi.channels, hsi.height, hsi.width, lidar.channels, lidar.height, lidar.width
            )));
        }
        Ok(hsi)
    }

    fn se_hidden(&self) -> usize {
        (2 * self.features / self.se_reduction).max(1)
    }
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub x_h: Option<Var>,
    pub x_l: Option<Var>,
    pub list: Option<ListOutput>,
    pub fusion: Option<FusionOutput>,
    /// Batch statistics per batch-norm prefix (train mode only).
    pub bn_stats: Vec<(String, BatchNormStats)>,
}

/// Network parameters and batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Lsaf {
    config: ModelConfig,
    feature: FeatureShape,
    pub params: ParamStore,
    pub buffers: ParamStore,
}

/// Parameter handles on a graph, looked up by name.
struct Bound<'a> {
    store: &'a ParamStore,
    vars: &'a [Var],
}

impl Bound<'_> {
    fn get(&self, name: &str) -> Var {
        let i = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    fn fc(&self, prefix: &str) -> Fc {
        Fc {
            weight: self.get(&format!("{prefix}.weight")),
            bias: self.get(&format!("{prefix}.bias")),
        }
    }

    fn linear_block(&self, prefix: &str) -> LinearBlock {
        LinearBlock {
            hidden: self.fc(&format!("{prefix}.fc1")),
            out: self.fc(&format!("{prefix}.fc2")),
        }
    }
}

impl Lsaf {
    /// Kaiming-uniform weights, zero biases, unit batch-norm scale, λ₁ = λ₂ = 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let feature = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut bn = |params: &mut ParamStore, prefix: &str, c: usize| {
            params.insert(format!("{prefix}.gamma"), Tensor::ones(&[c]));
            params.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
            buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
            buffers.insert(format!("{prefix}.running_var"), Tensor::ones(&[c]));
        };
        let fc = |params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, out: usize, inp: usize| {
            params.insert(format!("{prefix}.weight"), kaiming_uniform(&[out, inp], inp, rng));
            params.insert(format!("{prefix}.bias"), Tensor::zeros(&[out]));
        };

        let use_hsi = config.branches != Branches::LidarOnly;
        let use_lidar = config.branches != Branches::HsiOnly;
        let fused = config.branches == Branches::Fused;
        let mut cin = 1;
        for i in (0..3).filter(|_| use_hsi) {
            let (cout, kd) = (config.hsi_widths[i], config.spectral_kernels[i]);
            let fan_in = cin * kd * KERNEL * KERNEL;
            params.insert(
                format!("hsi.conv{}.weight", i + 1),
                kaiming_uniform(&[cout, cin, kd, KERNEL, KERNEL], fan_in, &mut rng),
            );
            bn(&mut params, &format!("hsi.bn{}", i + 1), cout);
            cin = cout;
        }
        if use_hsi {
            let flat = config.hsi_widths[2] * config.spectral_depth()?;
            params.insert(
                "hsi.conv4.weight",
                kaiming_uniform(&[config.features, flat, KERNEL, KERNEL], flat * KERNEL * KERNEL, &mut rng),
            );
            bn(&mut params, "hsi.bn4", config.features);
        }

        let mut cin = 1;
        for (i, &cout) in config.lidar_widths.iter().enumerate().filter(|_| use_lidar) {
            params.insert(
                format!("lidar.conv{}.weight", i + 1),
                kaiming_uniform(&[cout, cin, KERNEL, KERNEL], cin * KERNEL * KERNEL, &mut rng),
            );
            bn(&mut params, &format!("lidar.bn{}", i + 1), cout);
            cin = cout;
        }

        let c = config.features;
        let hw = feature.positions();
        if fused {
            fc(&mut params, &mut rng, "list.pre_hsi", c, c);
            fc(&mut params, &mut rng, "list.pre_lidar", c, c);
            fc(&mut params, &mut rng, "list.pre_joint", 2 * c, 2 * c);
            fc(&mut params, &mut rng, "list.inner_hsi", c, c);
            fc(&mut params, &mut rng, "list.inner_lidar", c, c);
            fc(&mut params, &mut rng, "list.outer", c, c);
            fc(&mut params, &mut rng, "list.se.squeeze", config.se_hidden(), 2 * c);
            fc(&mut params, &mut rng, "list.se.excite", 2 * c, config.se_hidden());
        }

        let heads = [("hsi", c * hw, use_hsi), ("lidar", c * hw, use_lidar), ("fused", 2 * c * hw, fused)];
        for (name, width, _) in heads.into_iter().filter(|h| h.2) {
            fc(&mut params, &mut rng, &format!("head.{name}.fc1"), config.hidden, width);
            fc(&mut params, &mut rng, &format!("head.{name}.fc2"), config.classes, config.hidden);
        }
        if fused {
            params.insert("head.lambda1", Tensor::scalar(1.0));
            params.insert("head.lambda2", Tensor::scalar(1.0));
        }

        Ok(Lsaf {
            config,
            feature,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn feature_shape(&self) -> FeatureShape {
        self.feature
    }

    /// `(name, shape, count)` per parameter, followed by the total.
    pub fn summary(&self) -> (Vec<(String, Vec<usize>, usize)>, usize) {
        let rows = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.numel()))
            .collect();
        (rows, self.params.numel())
    }

    /// Parameter group of a parameter name: its first two dotted components.
    pub fn group_of(name: &str) -> &str {
        match name.match_indices('.').nth(1) {
            Some((i, _)) => &name[..i],
            None => name,
        }
    }

    fn conv_block(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        conv: &str,
        bn: &str,
        padding: usize,
        mode: Mode,
        stats: &mut Vec<(String, BatchNormStats)>,
    ) -> Result<Var> {
        let w = p.get(&format!("{conv}.weight"));
        let spec = ConvSpec::new(1, padding);
        let y = if g.shape(x).len() == 5 {
            g.conv3d(x, w, spec)?
        } else {
            g.conv2d(x, w, spec)?
        };
        let running = match mode {
            Mode::Train => None,
            Mode::Eval => Some((
                self.buffer(&format!("{bn}.running_mean")),
                self.buffer(&format!("{bn}.running_var")),
            )),
        };
        let (y, s) = g.batch_norm(
            y,
            p.get(&format!("{bn}.gamma")),
            p.get(&format!("{bn}.beta")),
            BN_EPS,
            mode,
            running,
        )?;
        if let Some(s) = s {
            stats.push((bn.to_string(), s));
        }
        Ok(g.relu(y))
    }

    fn buffer(&self, name: &str) -> &[Scalar] {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("unknown buffer {name}"))
            .data()
    }

    fn hsi_features(&self, g: &mut Graph, p: &Bound, hsi: Var, mode: Mode, stats: &mut Vec<(String, BatchNormStats)>) -> Result<Var> {
        let n = g.shape(hsi)[0];
        let (r, s) = (self.config.pca_dims, self.config.patch);
        let mut x = g.reshape(hsi, &[n, 1, r, s, s])?;
        for i in 1..=3 {
            x = self.conv_block(g, p, x, &format!("hsi.conv{i}"), &format!("hsi.bn{i}"), 0, mode, stats)?;
        }
        let sh = g.shape(x).to_vec();
        x = g.reshape(x, &[n, sh[1] * sh[2], sh[3], sh[4]])?;
        x = self.conv_block(g, p, x, "hsi.conv4", "hsi.bn4", self.config.hsi_2d_padding, mode, stats)?;
        g.reshape(x, &[n, self.feature.channels, self.feature.positions()])
    }

    fn lidar_features(&self, g: &mut Graph, p: &Bound, lidar: Var, mode: Mode, stats: &mut Vec<(String, BatchNormStats)>) -> Result<Var> {
        let n = g.shape(lidar)[0];
        let mut x = lidar;
        for i in 1..=3 {
            x = self.conv_block(
                g,
                p,
                x,
                &format!("lidar.conv{i}"),
                &format!("lidar.bn{i}"),
                self.config.lidar_padding,
                mode,
                stats,
            )?;
        }
        g.reshape(x, &[n, self.feature.channels, self.feature.positions()])
    }

    fn list_weights(p: &Bound) -> ListWeights {
        ListWeights {
            pre: list::PreTransform {
                hsi: p.fc("list.pre_hsi"),
                lidar: p.fc("list.pre_lidar"),
                joint: p.fc("list.pre_joint"),
            },
            channel: list::ChannelAttention {
                inner_hsi: p.fc("list.inner_hsi"),
                inner_lidar: p.fc("list.inner_lidar"),
                outer: p.fc("list.outer"),
            },
            se: list::SeBlock {
                squeeze: p.fc("list.se.squeeze"),
                excite: p.fc("list.se.excite"),
            },
        }
    }

    fn check_inputs(&self, g: &Graph, vars: &[Var], hsi: Var, lidar: Var) -> Result<()> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} parameter handles bound for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let (r, s) = (self.config.pca_dims, self.config.patch);
        let hs = g.shape(hsi);
        let ls = g.shape(lidar);
        if hs.len() != 4 || hs[1..] != [r, s, s] {
            return Err(Error::dim("forward hsi patch", hs, &[r, s, s]));
        }
        if ls.len() != 4 || ls[1..] != [1, s, s] || ls[0] != hs[0] {
            return Err(Error::dim("forward lidar patch", ls, &[hs[0], 1, s, s]));
        }
        Ok(())
    }

    /// Both extractors on `n × r × s × s` HSI and `n × 1 × s × s` LiDAR
    /// patches; returns `(X_h, X_l)`, each `n × c × hw`.
    pub fn extract_features(
        &self,
        g: &mut Graph,
        vars: &[Var],
        hsi: Var,
        lidar: Var,
        mode: Mode,
    ) -> Result<(Var, Var, Vec<(String, BatchNormStats)>)> {
        if self.config.branches != Branches::Fused {
            return Err(Error::Config("feature extraction needs both branches".into()));
        }
        self.check_inputs(g, vars, hsi, lidar)?;
        let p = Bound {
            store: &self.params,
            vars,
        };
        let mut stats = Vec::new();
        let x_h = self.hsi_features(g, &p, hsi, mode, &mut stats)?;
        let x_l = self.lidar_features(g, &p, lidar, mode, &mut stats)?;
        Ok((x_h, x_l, stats))
    }

    /// Full network: extract → LiST → decision fusion. `vars` are the
    /// parameter handles from [`ParamStore::bind`] on the same graph.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], hsi: Var, lidar: Var, mode: Mode) -> Result<ForwardOutput> {
        self.check_inputs(g, vars, hsi, lidar)?;
        let p = Bound {
            store: &self.params,
            vars,
        };
        let mut bn_stats = Vec::new();
        match self.config.branches {
            Branches::HsiOnly => {
                let x_h = self.hsi_features(g, &p, hsi, mode, &mut bn_stats)?;
                let logits = p.linear_block("head.hsi").forward(g, x_h)?;
                Ok(ForwardOutput {
                    logits,
                    x_h: Some(x_h),
                    x_l: None,
                    list: None,
                    fusion: None,
                    bn_stats,
                })
            }
            Branches::LidarOnly => {
                let x_l = self.lidar_features(g, &p, lidar, mode, &mut bn_stats)?;
                let logits = p.linear_block("head.lidar").forward(g, x_l)?;
                Ok(ForwardOutput {
                    logits,
                    x_h: None,
                    x_l: Some(x_l),
                    list: None,
                    fusion: None,
                    bn_stats,
                })
            }
            Branches::Fused => {
                let x_h = self.hsi_features(g, &p, hsi, mode, &mut bn_stats)?;
                let x_l = self.lidar_features(g, &p, lidar, mode, &mut bn_stats)?;
                let att = list::list_forward(g, &Self::list_weights(&p), x_h, x_l)?;
                let head = FusionHead {
                    hsi: p.linear_block("head.hsi"),
                    lidar: p.linear_block("head.lidar"),
                    fused: p.linear_block("head.fused"),
                    lambda1: p.get("head.lambda1"),
                    lambda2: p.get("head.lambda2"),
                };
                let fusion = decision_fusion(g, &head, x_h, x_l, att.fused)?;
                Ok(ForwardOutput {
                    logits: fusion.logits,
                    x_h: Some(x_h),
                    x_l: Some(x_l),
                    list: Some(att),
                    fusion: Some(fusion),
                    bn_stats,
                })
            }
        }
    }

    /// Eval-mode logits `n × K` for a batch of patches.
    pub fn predict(&self, hsi: &Tensor, lidar: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind_constants(&mut g);
        let h = g.constant(hsi.clone());
        let l = g.constant(lidar.clone());
        let out = self.forward(&mut g, &vars, h, l, Mode::Eval)?;
        Ok(g.value(out.logits).clone())
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchNormStats)]) {
        for (prefix, s) in stats {
            let mut mean = self.buffers.get(&format!("{prefix}.running_mean")).cloned().expect("bn buffer");
            let mut var = self.buffers.get(&format!("{prefix}.running_var")).cloned().expect("bn buffer");
            s.update_running(mean.data_mut(), var.data_mut(), BN_MOMENTUM);
            self.buffers.insert(format!("{prefix}.running_mean"), mean);
            self.buffers.insert(format!("{prefix}.running_var"), var);
        }
    }

    /// Parameters and buffers as one named table.
    pub fn state(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (n, t) in self.params.iter().chain(self.buffers.iter()) {
            ck.tensors.insert(n.to_string(), t.clone());
        }
        ck
    }

    /// Loads parameters and buffers, rejecting the first missing or
    /// shape-mismatched tensor. Unrelated entries are ignored.
    pub fn load_state(&mut self, ck: &Checkpoint) -> Result<()> {
        for store in [&self.params, &self.buffers] {
            for (name, t) in store.iter() {
                match ck.tensors.get(name) {
                    None => return Err(Error::Format(format!("checkpoint lacks tensor `{name}`"))),
                    Some(c) if c.shape() != t.shape() => {
                        return Err(Error::Format(format!(
                            "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                            c.shape(),
                            t.shape()
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        for store in [&mut self.params, &mut self.buffers] {
            for (name, t) in store.iter_mut() {
                *t = ck.tensors[name].clone();
            }
        }
        Ok(())
    }
}
