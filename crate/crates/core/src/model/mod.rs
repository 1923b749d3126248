//! Convolutional trunk, add-on layers, and the composed prototype model.

mod baseline;

pub use baseline::BaselineModel;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proto::{self, PrototypeBank, PrototypeConfig};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::rng::RngStream;
use crate::tensor::{DropoutMode, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub blocks: Vec<BlockSpec>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub input_size: usize,
    /// Depth D of the latent grid produced by the add-on layers.
    pub latent_channels: usize,
    #[serde(default = "default_dropout_rate")]
    pub dropout_rate: f64,
    /// Block indices followed by a dropout layer.
    pub dropout_sites: Vec<usize>,
}

fn default_kernel() -> usize {
    3
}

fn default_in_channels() -> usize {
    3
}

fn default_dropout_rate() -> f64 {
    0.2
}

/// Input-pixel footprint of one latent cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReceptiveField {
    /// Side length of the field of a single cell.
    pub size: usize,
    /// Pixel distance between neighbouring cells.
    pub jump: usize,
    /// How far the field of cell 0 starts before pixel 0.
    pub offset: usize,
}

impl ReceptiveField {
    /// `[x, y, w, h]` covering cells `rows × cols` starting at `(row, col)`,
    /// clipped to a `size×size` image.
    pub fn cell_box(&self, row: usize, col: usize, rows: usize, cols: usize, image: usize) -> [usize; 4] {
        let span = |start: usize, n: usize| {
            let lo = (start * self.jump) as isize - self.offset as isize;
            let hi = ((start + n - 1) * self.jump + self.size) as isize - self.offset as isize;
            let lo = lo.clamp(0, image as isize) as usize;
            let hi = hi.clamp(0, image as isize) as usize;
            (lo, hi - lo)
        };
        let (y, h) = span(row, rows);
        let (x, w) = span(col, cols);
        [x, y, w, h]
    }
}

impl BackboneConfig {
    /// Three stride-2 blocks over 32×32 inputs, giving a 4×4 latent grid.
    pub fn toy() -> Self {
        BackboneConfig {
            blocks: vec![
                BlockSpec { out_channels: 16, stride: 2 },
                BlockSpec { out_channels: 32, stride: 2 },
                BlockSpec { out_channels: 64, stride: 2 },
            ],
            kernel: 3,
            in_channels: 3,
            input_size: 32,
            latent_channels: 64,
            dropout_rate: 0.2,
            dropout_sites: vec![0, 1, 2],
        }
    }

    /// A plain (skip-free) stack with ResNet-18's channel and stride layout.
    pub fn resnet18_shaped(input_size: usize) -> Self {
        let mut blocks = vec![
            BlockSpec { out_channels: 64, stride: 2 },
            BlockSpec { out_channels: 64, stride: 2 },
        ];
        for (i, ch) in [64, 128, 256, 512].into_iter().enumerate() {
            for j in 0..4 {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                blocks.push(BlockSpec { out_channels: ch, stride });
            }
        }
        let n = blocks.len();
        BackboneConfig {
            blocks,
            kernel: 3,
            in_channels: 3,
            input_size,
            latent_channels: 256,
            dropout_rate: 0.2,
            dropout_sites: (0..n).step_by(4).chain([n - 1]).collect(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }

    /// Side of the latent grid, from the conv arithmetic.
    pub fn latent_grid(&self) -> usize {
        let pad = self.kernel / 2;
        self.blocks.iter().fold(self.input_size, |h, b| {
            (h + 2 * pad).saturating_sub(self.kernel) / b.stride.max(1) + 1
        })
    }

    pub fn receptive_field(&self) -> ReceptiveField {
        let pad = self.kernel / 2;
        let mut rf = ReceptiveField { size: 1, jump: 1, offset: 0 };
        for b in &self.blocks {
            rf.size += (self.kernel - 1) * rf.jump;
            rf.offset += pad * rf.jump;
            rf.jump *= b.stride;
        }
        rf
    }

    pub fn has_dropout(&self) -> bool {
        self.dropout_rate > 0.0 && !self.dropout_sites.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks.is_empty() {
            return bad("backbone.blocks must list at least one block".into());
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad(format!("backbone.kernel must be odd, got {}", self.kernel));
        }
        if self.blocks.iter().any(|b| b.stride == 0 || b.out_channels == 0) {
            return bad("backbone.blocks need stride >= 1 and out_channels >= 1".into());
        }
        if self.latent_channels == 0 {
            return bad("backbone.latent_channels must be >= 1".into());
        }
        if self.input_size < self.kernel {
            return bad(format!("backbone.input_size {} is smaller than the kernel", self.input_size));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("backbone.dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if let Some(&s) = self.dropout_sites.iter().find(|&&s| s >= self.blocks.len()) {
            return bad(format!("backbone.dropout_sites entry {s} has no matching block"));
        }
        Ok(())
    }
}

/// Which optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    AddOn,
    Prototypes,
    LastLayer,
    /// Dense head of the plain baseline classifier.
    Head,
}

/// Optimisation stages of the prototype schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warm,
    Joint,
    LastOnly,
}

impl Stage {
    pub fn trains(self, group: ParamGroup) -> bool {
        use ParamGroup::*;
        match self {
            Stage::Warm => matches!(group, AddOn | Prototypes),
            Stage::Joint => matches!(group, Backbone | AddOn | Prototypes | Head),
            Stage::LastOnly => matches!(group, LastLayer),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| std * rng.normal())
}

/// Conv trunk plus the two 1×1 add-on layers (relu, then sigmoid).
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    pub config: BackboneConfig,
    pub params: Vec<Param>,
}

/// Random state and dropout behaviour for one forward pass.
pub struct PassOptions<'a> {
    pub dropout: DropoutMode,
    pub rng: Option<&'a mut RngStream>,
}

impl PassOptions<'_> {
    pub fn eval() -> Self {
        PassOptions {
            dropout: DropoutMode::Off,
            rng: None,
        }
    }
}

impl<'a> PassOptions<'a> {
    pub fn stochastic(dropout: DropoutMode, rng: &'a mut RngStream) -> Self {
        PassOptions {
            dropout,
            rng: Some(rng),
        }
    }
}

/// Registers parameters as graph leaves and remembers their handles.
pub(crate) struct Registrar<'a> {
    trainable: &'a dyn Fn(ParamGroup) -> bool,
    pub vars: Vec<(String, Var)>,
}

impl<'a> Registrar<'a> {
    pub fn new(trainable: &'a dyn Fn(ParamGroup) -> bool) -> Self {
        Registrar {
            trainable,
            vars: Vec::new(),
        }
    }

    pub fn add(&mut self, g: &mut Graph, p: &Param) -> Var {
        let train = (self.trainable)(p.group);
        let v = g.leaf(p.value.clone(), train);
        if train {
            self.vars.push((p.name.clone(), v));
        }
        v
    }
}

impl Trunk {
    pub fn new(config: BackboneConfig, with_addon: bool, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let mut params = Vec::new();
        let mut cin = config.in_channels;
        for (i, b) in config.blocks.iter().enumerate() {
            params.push(Param {
                name: format!("backbone.{i}.weight"),
                group: ParamGroup::Backbone,
                value: kaiming(&[b.out_channels, cin, k, k], cin * k * k, rng),
            });
            params.push(Param {
                name: format!("backbone.{i}.scale"),
                group: ParamGroup::Backbone,
                value: Tensor::ones(&[b.out_channels]),
            });
            params.push(Param {
                name: format!("backbone.{i}.shift"),
                group: ParamGroup::Backbone,
                value: Tensor::zeros(&[b.out_channels]),
            });
            cin = b.out_channels;
        }
        if with_addon {
            let d = config.latent_channels;
            for (i, fan_in) in [(1, cin), (2, d)] {
                params.push(Param {
                    name: format!("addon.{i}.weight"),
                    group: ParamGroup::AddOn,
                    value: kaiming(&[d, fan_in, 1, 1], fan_in, rng),
                });
                params.push(Param {
                    name: format!("addon.{i}.bias"),
                    group: ParamGroup::AddOn,
                    value: Tensor::zeros(&[d]),
                });
            }
        }
        Ok(Trunk { config, params })
    }

    fn param(&self, name: &str) -> &Param {
        self.params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("trunk parameter {name} missing"))
    }

    pub fn has_addon(&self) -> bool {
        self.params.iter().any(|p| p.group == ParamGroup::AddOn)
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let c = &self.config;
        let expect = [c.in_channels, c.input_size, c.input_size];
        if images.ndim() != 4 || images.shape()[1..] != expect {
            return Err(Error::Shape {
                op: "features",
                left: images.shape().to_vec(),
                right: [&[0usize][..], &expect[..]].concat(),
            });
        }
        Ok(())
    }

    /// Conv blocks only (no add-on). Output `B×C_out×H'×W'`.
    pub(crate) fn forward_blocks(
        &self,
        g: &mut Graph,
        input: Var,
        reg: &mut Registrar<'_>,
        opts: &mut PassOptions<'_>,
    ) -> Result<Var> {
        let c = &self.config;
        let mut x = input;
        for (i, b) in c.blocks.iter().enumerate() {
            let w = reg.add(g, self.param(&format!("backbone.{i}.weight")));
            let s = reg.add(g, self.param(&format!("backbone.{i}.scale")));
            let t = reg.add(g, self.param(&format!("backbone.{i}.shift")));
            x = g.conv2d(x, w, None, b.stride, c.kernel / 2)?;
            x = g.channel_affine(x, s, t)?;
            x = g.relu(x);
            if c.dropout_sites.contains(&i) && opts.dropout != DropoutMode::Off && c.dropout_rate > 0.0 {
                let rng = opts.rng.as_deref_mut().ok_or_else(|| {
                    Error::invalid("stochastic dropout pass needs a dropout rng stream")
                })?;
                x = g.dropout(x, c.dropout_rate, opts.dropout, rng)?;
            }
        }
        Ok(x)
    }

    /// Blocks followed by the add-on layers; values lie in (0, 1).
    pub(crate) fn forward_latent(
        &self,
        g: &mut Graph,
        input: Var,
        reg: &mut Registrar<'_>,
        opts: &mut PassOptions<'_>,
    ) -> Result<Var> {
        let mut x = self.forward_blocks(g, input, reg, opts)?;
        for (i, last) in [(1, false), (2, true)] {
            let w = reg.add(g, self.param(&format!("addon.{i}.weight")));
            let b = reg.add(g, self.param(&format!("addon.{i}.bias")));
            x = g.conv2d(x, w, Some(b), 1, 0)?;
            x = if last { g.sigmoid(x) } else { g.relu(x) };
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub prototypes: PrototypeConfig,
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            backbone: BackboneConfig::toy(),
            prototypes: PrototypeConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.prototypes.validate()?;
        let grid = self.backbone.latent_grid();
        if self.prototypes.height > grid || self.prototypes.width > grid {
            return Err(Error::Config(format!(
                "prototype {}x{} does not fit the {grid}x{grid} latent grid",
                self.prototypes.height, self.prototypes.width
            )));
        }
        Ok(())
    }
}

/// Trunk `f`, prototype bank, and last layer `h` (`m×C`, no bias).
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoModel {
    pub config: ModelConfig,
    pub trunk: Trunk,
    pub bank: PrototypeBank,
    pub last_layer: Tensor,
}

/// Every intermediate of a prototype forward pass, kept on one graph.
pub struct ProtoPass {
    pub graph: Graph,
    pub latent: Var,
    /// `B×m×H'×W'` squared distances.
    pub distances: Var,
    /// `B×m×H'×W'` similarity maps.
    pub activations: Var,
    /// `B×m` global-max-pooled similarities.
    pub scores: Var,
    /// `B×m` global-min-pooled distances.
    pub min_distances: Var,
    pub logits: Var,
    pub last_layer: Var,
    /// Trainable parameters registered on the graph.
    pub params: Vec<(String, Var)>,
}

pub const LAST_LAYER: &str = "last_layer";
pub const PROTOTYPES: &str = "prototypes";

impl ProtoModel {
    pub fn new(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let trunk = Trunk::new(config.backbone.clone(), true, rng)?;
        let bank = PrototypeBank::random(&config.prototypes, config.backbone.latent_channels, rng)?;
        let p = &config.prototypes;
        let last_layer = proto::init_last_layer_with(&bank, p.num_classes, p.own_class_weight, p.other_class_weight);
        Ok(ProtoModel {
            config,
            trunk,
            bank,
            last_layer,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.prototypes.num_classes
    }

    pub fn named_params(&self) -> Vec<(&str, ParamGroup, &Tensor)> {
        let mut out: Vec<_> = self
            .trunk
            .params
            .iter()
            .map(|p| (p.name.as_str(), p.group, &p.value))
            .collect();
        out.push((PROTOTYPES, ParamGroup::Prototypes, &self.bank.prototypes));
        out.push((LAST_LAYER, ParamGroup::LastLayer, &self.last_layer));
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            PROTOTYPES => Some(&mut self.bank.prototypes),
            LAST_LAYER => Some(&mut self.last_layer),
            _ => self
                .trunk
                .params
                .iter_mut()
                .find(|p| p.name == name)
                .map(|p| &mut p.value),
        }
    }

    /// Names of parameters the stage updates; everything else stays frozen.
    pub fn param_groups(&self, stage: Stage) -> (Vec<String>, Vec<String>) {
        let (train, frozen): (Vec<_>, Vec<_>) = self
            .named_params()
            .into_iter()
            .partition(|(_, g, _)| stage.trains(*g));
        let names = |v: Vec<(&str, ParamGroup, &Tensor)>| v.into_iter().map(|(n, _, _)| n.to_string()).collect();
        (names(train), names(frozen))
    }

    pub fn trainable_scalars(&self, stage: Stage) -> usize {
        self.named_params()
            .into_iter()
            .filter(|(_, g, _)| stage.trains(*g))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    /// Latent grid `B×D×H'×W'` for a batch of images.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        self.trunk.check_input(images)?;
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let mut reg = Registrar::new(&|_| false);
        let z = self.trunk.forward_latent(&mut g, x, &mut reg, &mut PassOptions::eval())?;
        Ok(g.value(z).clone())
    }

    /// Full forward pass. `stage` selects which parameters track gradients;
    /// `None` builds an inference-only graph.
    pub fn forward(
        &self,
        images: &Tensor,
        stage: Option<Stage>,
        opts: &mut PassOptions<'_>,
    ) -> Result<ProtoPass> {
        self.trunk.check_input(images)?;
        let trainable = move |grp: ParamGroup| stage.is_some_and(|s| s.trains(grp));
        let mut reg = Registrar::new(&trainable);
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let latent = self.trunk.forward_latent(&mut g, x, &mut reg, opts)?;
        let protos = reg.add(
            &mut g,
            &Param {
                name: PROTOTYPES.into(),
                group: ParamGroup::Prototypes,
                value: self.bank.prototypes.clone(),
            },
        );
        let distances = g.patch_distances(latent, protos)?;
        let activations = g.similarity(distances, self.bank.epsilon)?;
        let scores = g.global_max_pool(activations)?;
        let min_distances = g.global_min_pool(distances)?;
        let last_layer = reg.add(
            &mut g,
            &Param {
                name: LAST_LAYER.into(),
                group: ParamGroup::LastLayer,
                value: self.last_layer.clone(),
            },
        );
        let logits = g.dense(scores, last_layer, None)?;
        Ok(ProtoPass {
            params: reg.vars,
            graph: g,
            latent,
            distances,
            activations,
            scores,
            min_distances,
            logits,
            last_layer,
        })
    }

    /// Class probabilities with dropout off.
    pub fn predict_proba(&self, images: &Tensor) -> Result<Tensor> {
        let pass = self.forward(images, None, &mut PassOptions::eval())?;
        Ok(crate::tensor::softmax_rows(pass.graph.value(pass.logits)))
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint {
            config_hash: config_hash.to_string(),
            ..Default::default()
        };
        for (name, _, t) in self.named_params() {
            ck.params.insert(name.to_string(), t.clone());
        }
        ck
    }

    pub fn params_hash(&self) -> String {
        self.to_checkpoint("").params_hash()
    }

    /// Overwrites every parameter from a checkpoint with matching names and
    /// shapes.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let names: Vec<String> = self.named_params().iter().map(|(n, _, _)| n.to_string()).collect();
        for name in names {
            let src = ck
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let dst = self.param_mut(&name).expect("listed parameter");
            if dst.shape() != src.shape() {
                return Err(Error::Shape {
                    op: "load_checkpoint",
                    left: dst.shape().to_vec(),
                    right: src.shape().to_vec(),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Copies `backbone.*` tensors from an external checkpoint, e.g. weights
    /// pretrained elsewhere and converted to the checkpoint container.
    /// Returns how many tensors were imported.
    pub fn import_backbone(&mut self, ck: &Checkpoint) -> Result<usize> {
        let mut n = 0;
        for p in self.trunk.params.iter_mut().filter(|p| p.group == ParamGroup::Backbone) {
            if let Some(src) = ck.params.get(&p.name) {
                if src.shape() != p.value.shape() {
                    return Err(Error::Shape {
                        op: "import_backbone",
                        left: p.value.shape().to_vec(),
                        right: src.shape().to_vec(),
                    });
                }
                p.value = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}
