//! Embedding encoder, ArcFace classifier head and feature upgrade module.

mod checkpoint;
mod mlp;

pub use checkpoint::{Checkpoint, CheckpointManifest};
pub use mlp::{LayerKind, Mlp};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use mlp::{batchnorm_layer, he_linear, Layer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub normalize_output: bool,
}

impl EncoderConfig {
    /// `[input, width, width, embed]` with relu between layers.
    pub fn mlp(input_dim: usize, width: usize, embed_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![width, width],
            embed_dim,
            normalize_output: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "encoder widths must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// The embedding model: an MLP with relu activations, optionally followed by
/// row-wise L2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub(crate) mlp: Mlp,
}

impl EncoderModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, tags::INIT_ENCODER);
        let mut widths = vec![config.input_dim];
        widths.extend(&config.hidden);
        widths.push(config.embed_dim);
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            if i > 0 {
                layers.push(Layer::Relu);
            }
            layers.push(he_linear(&mut rng, pair[0], pair[1]));
        }
        let mlp = Mlp::new(layers, config.input_dim, config.embed_dim);
        Ok(Self { config, mlp })
    }

    /// Single linear layer `input_dim → input_dim` with identity weights.
    pub fn identity(dim: usize) -> Self {
        let layers = vec![Layer::Linear {
            weight: Tensor::identity(dim),
            bias: Tensor::zeros(1, dim),
        }];
        Self {
            config: EncoderConfig {
                input_dim: dim,
                hidden: vec![],
                embed_dim: dim,
                normalize_output: true,
            },
            mlp: Mlp::new(layers, dim, dim),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.mlp.bind(tape, trainable)
    }

    pub fn forward(&mut self, tape: &mut Tape, params: &[Var], x: Var, mode: Mode) -> Result<Var> {
        let h = self.mlp.forward(tape, params, x, mode)?;
        if self.config.normalize_output {
            tape.l2_normalize(h)
        } else {
            Ok(h)
        }
    }

    /// Eval-mode embedding of a batch of inputs.
    pub fn embed(&self, inputs: &Tensor) -> Result<Tensor> {
        if inputs.cols() != self.config.input_dim {
            return Err(Error::shape(
                "embed",
                &inputs.shape(),
                &[self.config.input_dim],
            ));
        }
        let mut model = self.clone();
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let out = model.forward(&mut tape, &params, x, Mode::Eval)?;
        Ok(tape.value(out).clone())
    }
}

/// Cosine classifier with additive angular margin. Rows of the weight are
/// normalized inside every forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ArcFaceHead {
    pub weight: Tensor,
    pub scale: f64,
    pub margin: f64,
}

impl ArcFaceHead {
    pub fn new(num_classes: usize, dim: usize, scale: f64, margin: f64, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, tags::INIT_HEAD);
        let data = (0..num_classes * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self::from_weight(Tensor::new(num_classes, dim, data)?, scale, margin)
    }

    pub fn from_weight(weight: Tensor, scale: f64, margin: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::Config(format!(
                "arcface scale must be positive, got {scale}"
            )));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
            return Err(Error::Config(format!(
                "arcface margin {margin} outside [0, π/2)"
            )));
        }
        Ok(Self {
            weight,
            scale,
            margin,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Var {
        tape.leaf(self.weight.clone(), trainable)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpgradeConfig {
    /// Number of `[fc-bn-relu]` blocks before the output fc.
    pub depth: usize,
    pub hidden_dim: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl UpgradeConfig {
    /// Closed-form parameter count: every block carries a weight, a bias and
    /// a batchnorm scale/shift; the output fc a weight and a bias.
    pub fn expected_parameters(&self) -> usize {
        let (d, h, i, o) = (self.depth, self.hidden_dim, self.input_dim, self.output_dim);
        if d == 0 {
            return i * o + o;
        }
        (i * h + 3 * h) + (d - 1) * (h * h + 3 * h) + h * o + o
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum UpgradeKind {
    Mlp(Mlp),
    Identity,
}

/// Feature-to-feature module mapping stored old-space embeddings into the
/// new embedding space. Outputs are unit rows.
#[derive(Clone, Debug, PartialEq)]
pub struct UpgradeModule {
    pub config: UpgradeConfig,
    pub kind: UpgradeKind,
}

impl UpgradeModule {
    pub fn new(config: UpgradeConfig, seed: u64) -> Result<Self> {
        if config.hidden_dim == 0 || config.input_dim == 0 || config.output_dim == 0 {
            return Err(Error::Config(format!(
                "upgrade module dims must be positive: {config:?}"
            )));
        }
        let mut rng = rng::stream(seed, tags::INIT_PSI);
        let mut layers = Vec::new();
        let mut width = config.input_dim;
        for _ in 0..config.depth {
            layers.push(he_linear(&mut rng, width, config.hidden_dim));
            layers.push(batchnorm_layer(config.hidden_dim));
            layers.push(Layer::Relu);
            width = config.hidden_dim;
        }
        layers.push(he_linear(&mut rng, width, config.output_dim));
        let mlp = Mlp::new(layers, config.input_dim, config.output_dim);
        Ok(Self {
            config,
            kind: UpgradeKind::Mlp(mlp),
        })
    }

    /// `ψ(x) = x`, bit for bit.
    pub fn identity(input_dim: usize, output_dim: usize) -> Result<Self> {
        if input_dim != output_dim {
            return Err(Error::Contract(format!(
                "identity upgrade needs equal dims, got {input_dim} → {output_dim}"
            )));
        }
        Ok(Self {
            config: UpgradeConfig {
                depth: 0,
                hidden_dim: input_dim,
                input_dim,
                output_dim,
            },
            kind: UpgradeKind::Identity,
        })
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, UpgradeKind::Identity)
    }

    pub fn num_parameters(&self) -> usize {
        match &self.kind {
            UpgradeKind::Mlp(m) => m.num_parameters(),
            UpgradeKind::Identity => 0,
        }
    }

    pub fn mlp(&self) -> Option<&Mlp> {
        match &self.kind {
            UpgradeKind::Mlp(m) => Some(m),
            UpgradeKind::Identity => None,
        }
    }

    pub fn mlp_mut(&mut self) -> Option<&mut Mlp> {
        match &mut self.kind {
            UpgradeKind::Mlp(m) => Some(m),
            UpgradeKind::Identity => None,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        match &self.kind {
            UpgradeKind::Mlp(m) => m.bind(tape, trainable),
            UpgradeKind::Identity => Vec::new(),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, params: &[Var], x: Var, mode: Mode) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.config.input_dim {
            return Err(Error::shape(
                "upgrade input",
                &tape.value(x).shape(),
                &[self.config.input_dim],
            ));
        }
        match &mut self.kind {
            UpgradeKind::Identity => Ok(x),
            UpgradeKind::Mlp(m) => {
                let h = m.forward(tape, params, x, mode)?;
                tape.l2_normalize(h)
            }
        }
    }

    /// Eval-mode upgrade of stored embeddings (running batchnorm statistics).
    pub fn upgrade(&self, old: &Tensor) -> Result<Tensor> {
        if old.cols() != self.config.input_dim {
            return Err(Error::shape(
                "upgrade",
                &old.shape(),
                &[self.config.input_dim],
            ));
        }
        if self.is_identity() {
            return Ok(old.clone());
        }
        let mut model = self.clone();
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let x = tape.constant(old.clone());
        let out = model.forward(&mut tape, &params, x, Mode::Eval)?;
        Ok(tape.value(out).clone())
    }
}

/// One model generation: encoder, its classifier head, and (from generation
/// 1 on) the upgrade module that lifts the previous generation's gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGeneration {
    pub index: usize,
    pub encoder: EncoderModel,
    pub head: ArcFaceHead,
    pub upgrade: Option<UpgradeModule>,
}

impl ModelGeneration {
    pub fn new(
        index: usize,
        encoder: EncoderModel,
        head: ArcFaceHead,
        upgrade: Option<UpgradeModule>,
    ) -> Result<Self> {
        if index == 0 && upgrade.is_some() {
            return Err(Error::Contract("generation 0 has no upgrade module".into()));
        }
        Ok(Self {
            index,
            encoder,
            head,
            upgrade,
        })
    }
}
