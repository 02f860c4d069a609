//! Backbone + classifier head as one sequential graph.
//!
//! The backbone is a scaled-down residual network (stem, residual stages,
//! global average pooling); the head is `dense(units) -> relu ->
//! dropout(p) -> dense(1) -> sigmoid`. Parameters live in a [`ParamStore`]
//! keyed by `"{layer}.{param}"` names with per-tensor trainable flags.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::conv::BatchStats;
use crate::layers::{
    self, BnVars, ConvVars, Group, LayerKind, LayerSpec, Mode, ParamInit, ResidualVars, StatsLog,
};
use crate::rng::{purpose, stream, SeededRng};
use crate::{Error, Result, Tape, Tensor, Var};

/// Batch-norm running-statistics momentum: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackbonePreset {
    /// Three residual stages, widths 8/16/32.
    Tiny,
    /// Four residual stages, widths 8/16/32/64.
    Small,
}

impl BackbonePreset {
    pub fn name(self) -> &'static str {
        match self {
            BackbonePreset::Tiny => "tiny",
            BackbonePreset::Small => "small",
        }
    }

    pub fn stage_widths(self) -> &'static [usize] {
        match self {
            BackbonePreset::Tiny => &[8, 16, 32],
            BackbonePreset::Small => &[8, 16, 32, 64],
        }
    }

    pub fn stem_width(self) -> usize {
        8
    }

    /// Total spatial downsampling: the stem max-pool plus one stride-2
    /// stage for every stage after the first.
    pub fn downsampling(self) -> usize {
        2 << (self.stage_widths().len() - 1)
    }

    /// Smallest input side that still leaves a 4x4 final feature map.
    pub fn min_input(self) -> usize {
        4 * self.downsampling()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub backbone_preset: BackbonePreset,
    pub batchnorm: bool,
    pub head_units: usize,
    pub dropout_p: f32,
    pub threshold: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_shape: [3, 64, 64],
            backbone_preset: BackbonePreset::Tiny,
            batchnorm: true,
            head_units: 50,
            dropout_p: 0.5,
            threshold: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if c != 1 && c != 3 {
            return Err(Error::InvalidArgument(format!(
                "input channels must be 1 or 3, got {c}"
            )));
        }
        let min = self.backbone_preset.min_input();
        if h < min || w < min {
            return Err(Error::InputTooSmall {
                preset: self.backbone_preset.name(),
                size: h.min(w),
                min,
            });
        }
        if self.head_units == 0 {
            return Err(Error::InvalidArgument("head_units must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument("dropout_p must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument("threshold must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor<f32>,
    pub group: Group,
    pub init: ParamInit,
    pub trainable: bool,
}

impl Param {
    /// Running statistics are state, not optimizable weights.
    pub fn is_buffer(&self) -> bool {
        self.init.is_buffer()
    }
}

/// Named parameters in declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    fn push(&mut self, p: Param) -> Result<()> {
        if self.index.contains_key(&p.name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter {}",
                p.name
            )));
        }
        self.index.insert(p.name.clone(), self.entries.len());
        self.entries.push(p);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.entries[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<f32> {
        &mut self.entries[i].tensor
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.position(name)
            .ok_or_else(|| Error::Unknown(name.to_string()))
    }
}

/// Tape variables bound to a model's parameters during one forward pass.
pub struct Bindings {
    vars: Vec<Option<Var>>,
}

impl Bindings {
    pub fn get(&self, param_index: usize) -> Option<Var> {
        self.vars.get(param_index).copied().flatten()
    }

    /// `(param index, var)` pairs for every bound parameter.
    pub fn iter(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Track gradients of frozen parameters as well.
    pub track_frozen: bool,
    /// Insert a watch point on the CAM feature map.
    pub watch_features: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            track_frozen: false,
            watch_features: false,
        }
    }

    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            track_frozen: false,
            watch_features: false,
        }
    }
}

pub struct ForwardPass {
    /// Pre-sigmoid scores, `[N, outputs]`.
    pub logits: Var,
    /// Sigmoid outputs, `[N, outputs]`.
    pub probs: Var,
    /// Output of the CAM feature layer, `[N, C, h, w]`.
    pub features: Option<Var>,
    pub bindings: Bindings,
    /// Batch statistics observed by train-mode batch norms.
    pub batch_stats: StatsLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub config: ModelConfig,
    pub layers: Vec<LayerSpec>,
    pub conv_feature_layer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    arch: Architecture,
    params: ParamStore,
}

fn backbone_layers(config: &ModelConfig) -> (Vec<LayerSpec>, String) {
    let preset = config.backbone_preset;
    let bn = config.batchnorm;
    let stem = preset.stem_width();
    let mut layers = vec![LayerSpec::new(
        "stem.conv",
        Group::Backbone,
        LayerKind::Conv2d {
            in_channels: config.input_shape[0],
            out_channels: stem,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: !bn,
        },
    )];
    if bn {
        layers.push(LayerSpec::new(
            "stem.bn",
            Group::Backbone,
            LayerKind::BatchNorm { channels: stem },
        ));
    }
    layers.push(LayerSpec::new(
        "stem.relu",
        Group::Backbone,
        LayerKind::Relu,
    ));
    layers.push(LayerSpec::new(
        "stem.pool",
        Group::Backbone,
        LayerKind::MaxPool2d {
            window: 2,
            stride: 2,
        },
    ));
    let mut in_ch = stem;
    let mut last = String::new();
    for (i, &width) in preset.stage_widths().iter().enumerate() {
        last = format!("stage{}", i + 1);
        layers.push(LayerSpec::new(
            last.clone(),
            Group::Backbone,
            LayerKind::ResidualBlock {
                in_channels: in_ch,
                out_channels: width,
                stride: if i == 0 { 1 } else { 2 },
                batchnorm: bn,
            },
        ));
        in_ch = width;
    }
    (layers, last)
}

/// Backbone followed by `gap -> dense(units, relu) -> dropout -> dense(outputs) -> sigmoid`.
fn assemble(
    config: &ModelConfig,
    outputs: usize,
    hidden: Option<usize>,
) -> (Vec<LayerSpec>, String) {
    let (mut layers, feature) = backbone_layers(config);
    let width = *config.backbone_preset.stage_widths().last().unwrap();
    layers.push(LayerSpec::new(
        "gap",
        Group::Backbone,
        LayerKind::GlobalAvgPool,
    ));
    let mut in_features = width;
    if let Some(units) = hidden {
        layers.push(LayerSpec::new(
            "head.dense1",
            Group::Head,
            LayerKind::Dense { in_features, units },
        ));
        layers.push(LayerSpec::new("head.relu", Group::Head, LayerKind::Relu));
        layers.push(LayerSpec::new(
            "head.dropout",
            Group::Head,
            LayerKind::Dropout {
                p: config.dropout_p,
            },
        ));
        in_features = units;
    }
    layers.push(LayerSpec::new(
        "head.dense2",
        Group::Head,
        LayerKind::Dense {
            in_features,
            units: outputs,
        },
    ));
    layers.push(LayerSpec::new(
        "head.sigmoid",
        Group::Head,
        LayerKind::Sigmoid,
    ));
    (layers, feature)
}

impl ModelGraph {
    /// Binary classifier: residual backbone plus the dense-50 / dropout /
    /// sigmoid head.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layers, feature) = assemble(config, 1, Some(config.head_units));
        Self::from_layers(config.clone(), layers, feature, seed)
    }

    /// Backbone with a temporary `classes`-way one-vs-rest sigmoid head, used
    /// for pretraining.
    pub fn build_pretrain(config: &ModelConfig, classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::InvalidArgument(
                "pretraining needs >= 2 classes".into(),
            ));
        }
        let (layers, feature) = assemble(config, classes, None);
        Self::from_layers(config.clone(), layers, feature, seed)
    }

    fn from_layers(
        config: ModelConfig,
        layers: Vec<LayerSpec>,
        conv_feature_layer: String,
        seed: u64,
    ) -> Result<Self> {
        let arch = Architecture {
            config,
            layers,
            conv_feature_layer,
        };
        let mut rng = stream(seed, purpose::INIT, 0);
        let decls = Self::declare(&arch)?;
        let mut params = ParamStore::default();
        for (decl, group) in decls {
            let tensor = decl.init.materialize(&decl.shape, &mut rng);
            params.push(Param {
                trainable: !decl.init.is_buffer(),
                name: decl.name,
                tensor,
                group,
                init: decl.init,
            })?;
        }
        let model = Self { arch, params };
        model.check_forward_shape()?;
        Ok(model)
    }

    fn declare(arch: &Architecture) -> Result<Vec<(layers::ParamDecl, Group)>> {
        let mut names = BTreeMap::new();
        let mut out = Vec::new();
        for (i, layer) in arch.layers.iter().enumerate() {
            layer.validate()?;
            if names.insert(layer.name.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate layer name {}",
                    layer.name
                )));
            }
            let output_layer = matches!(
                arch.layers.get(i + 1).map(|l| &l.kind),
                Some(LayerKind::Sigmoid)
            );
            out.extend(
                layer
                    .param_decls(output_layer)
                    .into_iter()
                    .map(|d| (d, layer.group)),
            );
        }
        match names.get(&arch.conv_feature_layer) {
            Some(_) => Ok(out),
            None => Err(Error::Unknown(arch.conv_feature_layer.clone())),
        }
    }

    /// Rebuilds a model from a stored architecture and named tensors. Every
    /// declared parameter must be present with its declared shape.
    pub fn from_parts(arch: Architecture, tensors: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let decls = Self::declare(&arch)?;
        let mut by_name: BTreeMap<String, Tensor<f32>> = tensors.into_iter().collect();
        let mut params = ParamStore::default();
        for (decl, group) in decls {
            let tensor = by_name
                .remove(&decl.name)
                .ok_or_else(|| Error::Unknown(decl.name.clone()))?;
            if tensor.shape() != decl.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "parameter restore",
                    left: decl.shape.clone(),
                    right: tensor.shape().to_vec(),
                });
            }
            params.push(Param {
                trainable: !decl.init.is_buffer(),
                name: decl.name,
                tensor,
                group,
                init: decl.init,
            })?;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Unknown(extra.clone()));
        }
        let model = Self { arch, params };
        model.check_forward_shape()?;
        Ok(model)
    }

    fn check_forward_shape(&self) -> Result<()> {
        if !matches!(
            self.arch.layers.last().map(|l| &l.kind),
            Some(LayerKind::Sigmoid)
        ) {
            return Ok(());
        }
        let [c, h, w] = self.arch.config.input_shape;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, c, h, w]));
        let mut rng = stream(0, 0, 0);
        let pass = self.forward(&mut tape, x, ForwardOptions::eval(), &mut rng)?;
        if pass.features.map(|f| tape.shape(f).len()) != Some(4) {
            return Err(Error::InvalidArgument(
                "CAM feature layer is not 4-D".into(),
            ));
        }
        Ok(())
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.arch.layers
    }

    pub fn conv_feature_layer(&self) -> &str {
        &self.arch.conv_feature_layer
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.config.input_shape
    }

    pub fn threshold(&self) -> f32 {
        self.arch.config.threshold
    }

    pub fn set_threshold(&mut self, threshold: f32) -> Result<()> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::InvalidArgument("threshold must be in [0, 1]".into()));
        }
        self.arch.config.threshold = threshold;
        Ok(())
    }

    /// Number of scalar weights, excluding batch-norm running statistics.
    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.is_buffer())
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Marks every backbone weight frozen and every head weight trainable.
    pub fn freeze_backbone(&mut self) {
        for p in &mut self.params.entries {
            p.trainable = !p.is_buffer() && p.group == Group::Head;
        }
    }

    /// Sets one parameter's trainable flag; buffers always stay frozen.
    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let i = self.params.require(name)?;
        let p = &mut self.params.entries[i];
        p.trainable = trainable && !p.is_buffer();
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params.entries {
            p.trainable = !p.is_buffer();
        }
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.as_str())
            .collect()
    }

    /// Model reduced to its backbone layers and parameters, the transfer
    /// source written by pretraining.
    pub fn backbone_only(&self) -> Self {
        let layers: Vec<LayerSpec> = self
            .arch
            .layers
            .iter()
            .filter(|l| l.group == Group::Backbone)
            .cloned()
            .collect();
        let mut params = ParamStore::default();
        for p in self.params.iter().filter(|p| p.group == Group::Backbone) {
            params.push(p.clone()).expect("names already unique");
        }
        Self {
            arch: Architecture {
                config: self.arch.config.clone(),
                layers,
                conv_feature_layer: self.arch.conv_feature_layer.clone(),
            },
            params,
        }
    }

    pub fn is_backbone_only(&self) -> bool {
        self.arch.layers.iter().all(|l| l.group == Group::Backbone)
    }

    /// Copies backbone tensors by name from `source`; every backbone
    /// parameter of `self` must be present there with the same shape.
    pub fn load_backbone(&mut self, source: &ModelGraph) -> Result<()> {
        for p in &mut self.params.entries {
            if p.group != Group::Backbone {
                continue;
            }
            let src = source
                .params
                .get(&p.name)
                .ok_or_else(|| Error::Unknown(p.name.clone()))?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_backbone",
                    left: p.tensor.shape().to_vec(),
                    right: src.tensor.shape().to_vec(),
                });
            }
            p.tensor = src.tensor.clone();
        }
        Ok(())
    }

    fn bind(
        &self,
        tape: &mut Tape<f32>,
        bindings: &mut Bindings,
        name: &str,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let i = self.params.require(name)?;
        if let Some(v) = bindings.vars[i] {
            return Ok(v);
        }
        let p = &self.params.entries[i];
        let track = p.trainable || (opts.track_frozen && !p.is_buffer());
        let v = if track {
            tape.param(p.tensor.clone())
        } else {
            tape.constant(p.tensor.clone())
        };
        bindings.vars[i] = Some(v);
        Ok(v)
    }

    fn bn_vars(
        &self,
        tape: &mut Tape<f32>,
        bindings: &mut Bindings,
        prefix: &str,
        opts: &ForwardOptions,
        batch: usize,
    ) -> Result<BnVars<'_, f32>> {
        let gamma = self.bind(tape, bindings, &format!("{prefix}.gamma"), opts)?;
        let beta = self.bind(tape, bindings, &format!("{prefix}.beta"), opts)?;
        let rm = self.params.require(&format!("{prefix}.running_mean"))?;
        let rv = self.params.require(&format!("{prefix}.running_var"))?;
        let gi = self.params.require(&format!("{prefix}.gamma"))?;
        Ok(BnVars {
            gamma,
            beta,
            running_mean: self.params.entries[rm].tensor.data(),
            running_var: self.params.entries[rv].tensor.data(),
            // A single-sample batch has no variance to normalize by; it falls back
            // to the running statistics.
            batch_stats: opts.mode == Mode::Train
                && self.params.entries[gi].trainable
                && batch >= 2,
        })
    }

    fn conv_vars(
        &self,
        tape: &mut Tape<f32>,
        bindings: &mut Bindings,
        prefix: &str,
        bias: bool,
        opts: &ForwardOptions,
    ) -> Result<ConvVars> {
        let weight = self.bind(tape, bindings, &format!("{prefix}.weight"), opts)?;
        let bias = if bias {
            Some(self.bind(tape, bindings, &format!("{prefix}.bias"), opts)?)
        } else {
            None
        };
        Ok(ConvVars { weight, bias })
    }

    /// Records the forward pass of a batch `[N, C, H, W]` on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        input: Var,
        opts: ForwardOptions,
        rng: &mut SeededRng,
    ) -> Result<ForwardPass> {
        let [c, h, w] = self.input_shape();
        let s = tape.shape(input);
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: vec![0, c, h, w],
                right: s.to_vec(),
            });
        }
        let pass = self.run_layers(tape, input, 0..self.arch.layers.len(), opts, rng)?;
        if pass.features.is_none() {
            return Err(Error::Unknown(self.arch.conv_feature_layer.clone()));
        }
        Ok(pass)
    }

    /// Number of leading layers whose output depends only on the input: every
    /// backbone parameter is frozen (so batch norms use running statistics)
    /// and the prefix ends at the global pooling layer. `None` if the backbone
    /// is still trainable.
    pub fn frozen_prefix(&self) -> Option<usize> {
        if self
            .params
            .iter()
            .any(|p| p.group == Group::Backbone && p.trainable)
        {
            return None;
        }
        let gap = self
            .arch
            .layers
            .iter()
            .position(|l| matches!(l.kind, LayerKind::GlobalAvgPool))?;
        let prefix = &self.arch.layers[..=gap];
        if prefix
            .iter()
            .any(|l| matches!(l.kind, LayerKind::Dropout { .. }))
        {
            return None;
        }
        Some(gap + 1)
    }

    /// Eval-mode output of the first `len` layers for a batch `[N, C, H, W]`.
    pub fn forward_prefix(&self, batch: &Tensor<f32>, len: usize) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let mut rng = stream(0, 0, 0);
        let len = len.min(self.arch.layers.len());
        let pass = self.run_layers(&mut tape, x, 0..len, ForwardOptions::eval(), &mut rng)?;
        Ok(tape.value(pass.probs).clone())
    }

    /// Runs the layers from `start` on, where `x` is the output of the layer
    /// before. `features` is `None` when the CAM layer lies before `start`.
    pub fn forward_from(
        &self,
        tape: &mut Tape<f32>,
        x: Var,
        start: usize,
        opts: ForwardOptions,
        rng: &mut SeededRng,
    ) -> Result<ForwardPass> {
        if start > self.arch.layers.len() {
            return Err(Error::InvalidArgument("start past the last layer".into()));
        }
        self.run_layers(tape, x, start..self.arch.layers.len(), opts, rng)
    }

    /// With a range that stops before the sigmoid, `logits` and `probs` both
    /// hold the last output.
    fn run_layers(
        &self,
        tape: &mut Tape<f32>,
        input: Var,
        range: core::ops::Range<usize>,
        opts: ForwardOptions,
        rng: &mut SeededRng,
    ) -> Result<ForwardPass> {
        let batch = tape.shape(input)[0];
        let mut bindings = Bindings {
            vars: vec![None; self.params.len()],
        };
        let mut stats = StatsLog::new();
        let mut x = input;
        let mut features = None;
        let mut logits = None;
        let full = range.end == self.arch.layers.len();
        for layer in &self.arch.layers[range] {
            let name = layer.name.as_str();
            x = match layer.kind {
                LayerKind::Conv2d {
                    stride,
                    padding,
                    bias,
                    ..
                } => {
                    let cv = self.conv_vars(tape, &mut bindings, name, bias, &opts)?;
                    tape.conv2d(x, cv.weight, cv.bias, stride, padding)?
                }
                LayerKind::MaxPool2d { window, stride } => tape.maxpool2d(x, window, stride)?,
                LayerKind::GlobalAvgPool => tape.global_avg_pool(x)?,
                LayerKind::Dense { .. } => {
                    let wv = self.bind(tape, &mut bindings, &format!("{name}.weight"), &opts)?;
                    let bv = self.bind(tape, &mut bindings, &format!("{name}.bias"), &opts)?;
                    layers::dense(tape, x, wv, bv)?
                }
                LayerKind::Relu => tape.relu(x),
                LayerKind::Sigmoid => {
                    logits = Some(x);
                    tape.sigmoid(x)
                }
                LayerKind::Dropout { p } => layers::dropout(tape, x, p, opts.mode, rng)?,
                LayerKind::BatchNorm { .. } => {
                    let bn = self.bn_vars(tape, &mut bindings, name, &opts, batch)?;
                    let (y, s) = layers::batchnorm(tape, x, &bn)?;
                    if let Some(s) = s {
                        stats.push((name.to_string(), s));
                    }
                    y
                }
                LayerKind::ResidualBlock {
                    in_channels,
                    out_channels,
                    stride,
                    batchnorm,
                } => {
                    let bias = !batchnorm;
                    let conv1 =
                        self.conv_vars(tape, &mut bindings, &format!("{name}.conv1"), bias, &opts)?;
                    let conv2 =
                        self.conv_vars(tape, &mut bindings, &format!("{name}.conv2"), bias, &opts)?;
                    let (bn1, bn2) = if batchnorm {
                        (
                            Some(self.bn_vars(
                                tape,
                                &mut bindings,
                                &format!("{name}.bn1"),
                                &opts,
                                batch,
                            )?),
                            Some(self.bn_vars(
                                tape,
                                &mut bindings,
                                &format!("{name}.bn2"),
                                &opts,
                                batch,
                            )?),
                        )
                    } else {
                        (None, None)
                    };
                    let proj = if layers::needs_projection(in_channels, out_channels, stride) {
                        let conv = self.conv_vars(
                            tape,
                            &mut bindings,
                            &format!("{name}.proj"),
                            bias,
                            &opts,
                        )?;
                        let bn = if batchnorm {
                            Some(self.bn_vars(
                                tape,
                                &mut bindings,
                                &format!("{name}.proj_bn"),
                                &opts,
                                batch,
                            )?)
                        } else {
                            None
                        };
                        Some((conv, bn))
                    } else {
                        None
                    };
                    let vars = ResidualVars {
                        conv1,
                        bn1,
                        conv2,
                        bn2,
                        proj,
                    };
                    layers::residual_block(tape, x, &vars, stride, name, &mut stats)?
                }
                LayerKind::Flatten => {
                    let s = tape.shape(x).to_vec();
                    let rest: usize = s[1..].iter().product();
                    tape.reshape(x, &[s[0], rest])?
                }
            };
            if name == self.arch.conv_feature_layer {
                if opts.watch_features {
                    x = tape.watch(x);
                }
                features = Some(x);
            }
        }
        let logits = match logits {
            Some(l) => l,
            None if full => {
                return Err(Error::InvalidArgument(
                    "model has no sigmoid output (backbone-only?)".into(),
                ))
            }
            None => x,
        };
        Ok(ForwardPass {
            logits,
            probs: x,
            features,
            bindings,
            batch_stats: stats,
        })
    }

    /// Folds observed batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let i = self.params.require(&format!("{prefix}.{suffix}"))?;
                let t = &mut self.params.entries[i].tensor;
                let updated: Vec<f32> = t
                    .data()
                    .iter()
                    .zip(batch)
                    .map(|(&r, &b)| (BN_MOMENTUM * r as f64 + (1.0 - BN_MOMENTUM) * b) as f32)
                    .collect();
                *t = Tensor::raw(t.shape().to_vec(), updated);
            }
        }
        Ok(())
    }

    /// Eval-mode sigmoid outputs for a batch `[N, C, H, W]`, one row per sample.
    pub fn predict_batch(&self, batch: &Tensor<f32>) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let mut rng = stream(0, 0, 0);
        let pass = self.forward(&mut tape, x, ForwardOptions::eval(), &mut rng)?;
        let probs = tape.value(pass.probs);
        let k = probs.shape()[1];
        Ok(probs.data().chunks(k).map(<[f32]>::to_vec).collect())
    }

    /// Positive-class probability for one image `[C, H, W]`.
    pub fn predict(&self, image: &Tensor<f32>) -> Result<f32> {
        let [c, h, w] = self.input_shape();
        if image.shape() != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "predict",
                left: vec![c, h, w],
                right: image.shape().to_vec(),
            });
        }
        let batch = image.reshaped(&[1, c, h, w])?;
        Ok(self.predict_batch(&batch)?[0][0])
    }
}

/// Label rule shared by metrics and training accuracy: positive iff `p >= threshold`.
pub fn is_positive(probability: f32, threshold: f32) -> bool {
    probability >= threshold
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn head_shapes_follow_config() {
        let cfg = ModelConfig {
            input_shape: [3, 224, 224],
            backbone_preset: BackbonePreset::Small,
            ..ModelConfig::default()
        };
        let m = ModelGraph::build(&cfg, 1).unwrap();
        let shape = |n: &str| m.params().get(n).unwrap().tensor.shape().to_vec();
        assert_eq!(shape("head.dense1.weight"), vec![64, 50]);
        assert_eq!(shape("head.dense1.bias"), vec![50]);
        assert_eq!(shape("head.dense2.weight"), vec![50, 1]);
        assert_eq!(shape("head.dense2.bias"), vec![1]);
        assert_eq!(m.conv_feature_layer(), "stage4");
    }

    #[test]
    fn too_small_input_is_rejected() {
        let cfg = ModelConfig {
            input_shape: [3, 16, 16],
            ..tiny()
        };
        assert!(matches!(
            ModelGraph::build(&cfg, 0),
            Err(Error::InputTooSmall { min: 32, .. })
        ));
        let cfg = ModelConfig {
            input_shape: [3, 32, 32],
            ..tiny()
        };
        assert!(ModelGraph::build(&cfg, 0).is_ok());
    }

    #[test]
    fn freeze_leaves_exactly_head_weights_trainable() {
        let mut m = ModelGraph::build(&tiny(), 3).unwrap();
        m.freeze_backbone();
        assert_eq!(
            m.trainable_names(),
            vec![
                "head.dense1.weight",
                "head.dense1.bias",
                "head.dense2.weight",
                "head.dense2.bias"
            ]
        );
    }

    #[test]
    fn freeze_does_not_change_outputs() {
        let mut m = ModelGraph::build(&tiny(), 5).unwrap();
        let img = Tensor::full(&[3, 64, 64], 0.3f32);
        let before = m.predict(&img).unwrap();
        m.freeze_backbone();
        assert_eq!(m.predict(&img).unwrap().to_bits(), before.to_bits());
        m.unfreeze_all();
        assert_eq!(m.predict(&img).unwrap().to_bits(), before.to_bits());
    }

    #[test]
    fn zero_head_predicts_one_half() {
        let mut m = ModelGraph::build(&tiny(), 9).unwrap();
        for name in ["head.dense2.weight", "head.dense2.bias"] {
            let i = m.params().position(name).unwrap();
            let t = m.params_mut().tensor_mut(i);
            *t = Tensor::zeros(t.shape());
        }
        let img = Tensor::full(&[3, 64, 64], 0.8f32);
        assert_eq!(m.predict(&img).unwrap(), 0.5);
    }

    #[test]
    fn predict_rejects_wrong_shape() {
        let m = ModelGraph::build(&tiny(), 9).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 64, 64])).is_err());
    }

    #[test]
    fn backbone_roundtrip_through_load_backbone() {
        let pre = ModelGraph::build_pretrain(&tiny(), 3, 11).unwrap();
        let bb = pre.backbone_only();
        assert!(bb.is_backbone_only());
        let mut m = ModelGraph::build(&tiny(), 12).unwrap();
        m.load_backbone(&bb).unwrap();
        let w = "stage2.conv1.weight";
        assert_eq!(m.params().get(w), bb.params().get(w));
    }

    #[test]
    fn from_parts_rejects_missing_and_extra() {
        let m = ModelGraph::build(&tiny(), 1).unwrap();
        let mut tensors: Vec<_> = m
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect();
        let arch = m.architecture().clone();
        assert_eq!(
            ModelGraph::from_parts(arch.clone(), tensors.clone()).unwrap(),
            m
        );
        tensors.push(("bogus".into(), Tensor::zeros(&[1])));
        assert!(ModelGraph::from_parts(arch.clone(), tensors.clone()).is_err());
        tensors.pop();
        tensors.pop();
        assert!(ModelGraph::from_parts(arch, tensors).is_err());
    }
}
