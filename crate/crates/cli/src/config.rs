//! Experiment configuration: typed defaults, scenario presets and the flat
//! `section.key = value` file format.

use std::fmt::Display;
use std::str::FromStr;

use bict::data::SplitMode;
use bict::losses::{CompKind, LossConfig};
use bict::models::{EncoderConfig, UpgradeConfig};
use bict::training::{OptimizerConfig, ScheduleConfig, TrainConfig};
use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    ExtendedData,
    ExtendedClass,
    ImprovedArch,
    ImprovedLoss,
    Sequential,
    LambdaSweep,
    DimSweep,
    HotRefresh,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Self::ExtendedData,
        Self::ExtendedClass,
        Self::ImprovedArch,
        Self::ImprovedLoss,
        Self::Sequential,
        Self::LambdaSweep,
        Self::DimSweep,
        Self::HotRefresh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::ExtendedData => "extended-data",
            Self::ExtendedClass => "extended-class",
            Self::ImprovedArch => "improved-arch",
            Self::ImprovedLoss => "improved-loss",
            Self::Sequential => "sequential",
            Self::LambdaSweep => "lambda-sweep",
            Self::DimSweep => "dim-sweep",
            Self::HotRefresh => "hot-refresh",
        }
    }

    /// The four single-generation upgrade occasions accepted by `run`.
    pub fn is_single_upgrade(self) -> bool {
        matches!(
            self,
            Self::ExtendedData | Self::ExtendedClass | Self::ImprovedArch | Self::ImprovedLoss
        )
    }
}

impl FromStr for Scenario {
    type Err = CliError;
    fn from_str(s: &str) -> CliResult<Self> {
        Self::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown scenario {s:?}")))
    }
}

impl Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataSection {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub noise_sigma: f64,
    pub num_queries: usize,
    pub gallery_per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitSection {
    pub mode: SplitMode,
    pub old_fraction: f64,
    pub new_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub old_width: usize,
    pub new_width: usize,
    pub psi_depth: usize,
    pub psi_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossSection {
    pub lambda: f64,
    pub comp_kind: CompKind,
    pub tau: f64,
    pub scale: f64,
    pub margin: f64,
    /// Margin of the old model; 0 gives plain cosine softmax.
    pub old_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: ScheduleConfig::new(self.base_lr, self.warmup_epochs, self.epochs),
            batch_size: self.batch_size,
            optimizer: OptimizerConfig {
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
    pub dims: Vec<usize>,
    /// ψ hidden widths trained at every λ (lightweight and burdensome).
    pub lambda_psi_dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequentialSection {
    pub fractions: Vec<f64>,
    pub lambda: f64,
    pub momentum_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RefreshSection {
    pub fractions: Vec<f64>,
    pub order_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub data: DataSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub psi_train: TrainSection,
    pub k: usize,
    pub sweep: SweepSection,
    pub sequential: SequentialSection,
    pub refresh: RefreshSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Scenario::ExtendedData)
    }
}

impl ExperimentConfig {
    /// Defaults shared by every scenario, adjusted per scenario.
    pub fn preset(scenario: Scenario) -> Self {
        let mut cfg = Self {
            scenario,
            seeds: vec![1, 2, 3],
            data: DataSection {
                num_classes: 64,
                samples_per_class: 100,
                input_dim: 32,
                noise_sigma: 0.22,
                num_queries: 256,
                gallery_per_class: 10,
            },
            split: SplitSection {
                mode: SplitMode::DataSplit,
                old_fraction: 0.25,
                new_fraction: 1.0,
            },
            model: ModelSection {
                embed_dim: 32,
                old_width: 64,
                new_width: 64,
                psi_depth: 3,
                psi_hidden: 64,
            },
            loss: LossSection {
                lambda: 2.0,
                comp_kind: CompKind::Regression,
                tau: 0.1,
                scale: 30.0,
                margin: 0.3,
                old_margin: 0.3,
            },
            train: TrainSection {
                epochs: 30,
                batch_size: 32,
                base_lr: 0.1,
                warmup_epochs: 1.0,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            psi_train: TrainSection {
                epochs: 20,
                batch_size: 128,
                base_lr: 1.0,
                warmup_epochs: 1.0,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            k: 10,
            sweep: SweepSection {
                lambdas: vec![0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 30.0],
                dims: vec![8, 16, 64, 128, 256],
                lambda_psi_dims: vec![8, 256],
            },
            sequential: SequentialSection {
                fractions: vec![0.25, 0.5, 1.0],
                lambda: 3.0,
                momentum_m: 0.5,
            },
            refresh: RefreshSection {
                fractions: (0..=10).map(|i| i as f64 / 10.0).collect(),
                order_seeds: vec![1, 2, 3],
            },
        };
        match scenario {
            Scenario::ExtendedClass => cfg.split.mode = SplitMode::ClassSplit,
            Scenario::ImprovedArch => {
                cfg.split.old_fraction = 1.0;
                cfg.model.old_width = 16;
                cfg.model.new_width = 64;
            }
            Scenario::ImprovedLoss => {
                cfg.split.old_fraction = 1.0;
                cfg.loss.old_margin = 0.0;
            }
            _ => {}
        }
        cfg
    }

    pub fn old_encoder(&self) -> EncoderConfig {
        EncoderConfig::mlp(
            self.data.input_dim,
            self.model.old_width,
            self.model.embed_dim,
        )
    }

    pub fn new_encoder(&self) -> EncoderConfig {
        EncoderConfig::mlp(
            self.data.input_dim,
            self.model.new_width,
            self.model.embed_dim,
        )
    }

    pub fn psi_config(&self, hidden: usize) -> UpgradeConfig {
        UpgradeConfig {
            depth: self.model.psi_depth,
            hidden_dim: hidden,
            input_dim: self.model.embed_dim,
            output_dim: self.model.embed_dim,
        }
    }

    pub fn old_loss(&self) -> LossConfig {
        LossConfig {
            lambda: 0.0,
            margin: self.loss.old_margin,
            ..self.new_loss(0.0)
        }
    }

    pub fn new_loss(&self, lambda: f64) -> LossConfig {
        LossConfig {
            lambda,
            comp_kind: self.loss.comp_kind,
            tau: self.loss.tau,
            scale: self.loss.scale,
            margin: self.loss.margin,
        }
    }

    /// Parses a config file: the preset named by `run.scenario` (or
    /// `fallback`) overridden by every other key.
    pub fn parse(text: &str, fallback: Scenario) -> CliResult<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `section.key = value`", n + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if pairs.iter().any(|(k, _): &(String, String)| k == key) {
                return Err(CliError::Config(format!(
                    "line {}: duplicate key {key}",
                    n + 1
                )));
            }
            pairs.push((key.to_string(), value.to_string()));
        }
        let scenario = match pairs.iter().find(|(k, _)| k == "run.scenario") {
            Some((_, v)) => v.parse()?,
            None => fallback,
        };
        let mut cfg = Self::preset(scenario);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> CliResult<T>
        where
            T::Err: Display,
        {
            v.parse()
                .map_err(|e| CliError::Config(format!("{key}: cannot parse {v:?}: {e}")))
        }
        fn list<T: FromStr>(key: &str, v: &str) -> CliResult<Vec<T>>
        where
            T::Err: Display,
        {
            v.split(',').map(|x| p(key, x.trim())).collect()
        }
        match key {
            "run.scenario" => self.scenario = p(key, value)?,
            "run.seeds" => self.seeds = list(key, value)?,
            "data.num_classes" => self.data.num_classes = p(key, value)?,
            "data.samples_per_class" => self.data.samples_per_class = p(key, value)?,
            "data.input_dim" => self.data.input_dim = p(key, value)?,
            "data.noise_sigma" => self.data.noise_sigma = p(key, value)?,
            "data.num_queries" => self.data.num_queries = p(key, value)?,
            "data.gallery_per_class" => self.data.gallery_per_class = p(key, value)?,
            "split.mode" => {
                self.split.mode = value
                    .parse()
                    .map_err(|e| CliError::Config(format!("{key}: {e}")))?
            }
            "split.old_fraction" => self.split.old_fraction = p(key, value)?,
            "split.new_fraction" => self.split.new_fraction = p(key, value)?,
            "model.embed_dim" => self.model.embed_dim = p(key, value)?,
            "model.old_width" => self.model.old_width = p(key, value)?,
            "model.new_width" => self.model.new_width = p(key, value)?,
            "model.psi_depth" => self.model.psi_depth = p(key, value)?,
            "model.psi_hidden" => self.model.psi_hidden = p(key, value)?,
            "loss.lambda" => self.loss.lambda = p(key, value)?,
            "loss.comp_kind" => {
                self.loss.comp_kind = value
                    .parse()
                    .map_err(|e| CliError::Config(format!("{key}: {e}")))?
            }
            "loss.tau" => self.loss.tau = p(key, value)?,
            "loss.scale" => self.loss.scale = p(key, value)?,
            "loss.margin" => self.loss.margin = p(key, value)?,
            "loss.old_margin" => self.loss.old_margin = p(key, value)?,
            "eval.k" => self.k = p(key, value)?,
            "sweep.lambdas" => self.sweep.lambdas = list(key, value)?,
            "sweep.dims" => self.sweep.dims = list(key, value)?,
            "sweep.lambda_psi_dims" => self.sweep.lambda_psi_dims = list(key, value)?,
            "sequential.fractions" => self.sequential.fractions = list(key, value)?,
            "sequential.lambda" => self.sequential.lambda = p(key, value)?,
            "sequential.momentum_m" => self.sequential.momentum_m = p(key, value)?,
            "refresh.fractions" => self.refresh.fractions = list(key, value)?,
            "refresh.order_seeds" => self.refresh.order_seeds = list(key, value)?,
            _ => {
                let (section, field) = key.split_once('.').unwrap_or(("", key));
                let t = match section {
                    "train" => &mut self.train,
                    "psi_train" => &mut self.psi_train,
                    _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
                };
                match field {
                    "epochs" => t.epochs = p(key, value)?,
                    "batch_size" => t.batch_size = p(key, value)?,
                    "base_lr" => t.base_lr = p(key, value)?,
                    "warmup_epochs" => t.warmup_epochs = p(key, value)?,
                    "momentum" => t.momentum = p(key, value)?,
                    "weight_decay" => t.weight_decay = p(key, value)?,
                    _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
                }
            }
        }
        Ok(())
    }

    /// Every key with its resolved value, in file order.
    pub fn entries(&self) -> Vec<(String, String)> {
        fn join<T: Display>(xs: &[T]) -> String {
            xs.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        }
        let split_mode = match self.split.mode {
            SplitMode::DataSplit => "data-split",
            SplitMode::ClassSplit => "class-split",
        };
        let mut out: Vec<(String, String)> = [
            ("run.scenario", self.scenario.to_string()),
            ("run.seeds", join(&self.seeds)),
            ("data.num_classes", self.data.num_classes.to_string()),
            (
                "data.samples_per_class",
                self.data.samples_per_class.to_string(),
            ),
            ("data.input_dim", self.data.input_dim.to_string()),
            ("data.noise_sigma", self.data.noise_sigma.to_string()),
            ("data.num_queries", self.data.num_queries.to_string()),
            (
                "data.gallery_per_class",
                self.data.gallery_per_class.to_string(),
            ),
            ("split.mode", split_mode.to_string()),
            ("split.old_fraction", self.split.old_fraction.to_string()),
            ("split.new_fraction", self.split.new_fraction.to_string()),
            ("model.embed_dim", self.model.embed_dim.to_string()),
            ("model.old_width", self.model.old_width.to_string()),
            ("model.new_width", self.model.new_width.to_string()),
            ("model.psi_depth", self.model.psi_depth.to_string()),
            ("model.psi_hidden", self.model.psi_hidden.to_string()),
            ("loss.lambda", self.loss.lambda.to_string()),
            ("loss.comp_kind", self.loss.comp_kind.to_string()),
            ("loss.tau", self.loss.tau.to_string()),
            ("loss.scale", self.loss.scale.to_string()),
            ("loss.margin", self.loss.margin.to_string()),
            ("loss.old_margin", self.loss.old_margin.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        for (name, t) in [("train", &self.train), ("psi_train", &self.psi_train)] {
            for (field, v) in [
                ("epochs", t.epochs.to_string()),
                ("batch_size", t.batch_size.to_string()),
                ("base_lr", t.base_lr.to_string()),
                ("warmup_epochs", t.warmup_epochs.to_string()),
                ("momentum", t.momentum.to_string()),
                ("weight_decay", t.weight_decay.to_string()),
            ] {
                out.push((format!("{name}.{field}"), v));
            }
        }
        let tail = [
            ("eval.k", self.k.to_string()),
            ("sweep.lambdas", join(&self.sweep.lambdas)),
            ("sweep.dims", join(&self.sweep.dims)),
            ("sweep.lambda_psi_dims", join(&self.sweep.lambda_psi_dims)),
            ("sequential.fractions", join(&self.sequential.fractions)),
            ("sequential.lambda", self.sequential.lambda.to_string()),
            (
                "sequential.momentum_m",
                self.sequential.momentum_m.to_string(),
            ),
            ("refresh.fractions", join(&self.refresh.fractions)),
            ("refresh.order_seeds", join(&self.refresh.order_seeds)),
        ];
        out.extend(tail.into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }

    /// Fully resolved config in the file format; parsing it back yields an
    /// equal config.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.seeds.is_empty() {
            return bad("run.seeds must not be empty".into());
        }
        if self.k == 0 {
            return bad("eval.k must be ≥ 1".into());
        }
        if self.data.num_queries == 0 || self.data.gallery_per_class == 0 {
            return bad("eval set needs queries and gallery items".into());
        }
        for (name, f) in [
            ("split.old_fraction", self.split.old_fraction),
            ("split.new_fraction", self.split.new_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {f}"));
            }
        }
        if self.sweep.lambdas.is_empty() || !self.sweep.lambdas.contains(&0.0) {
            return bad("sweep.lambdas must be non-empty and contain 0".into());
        }
        if let Some(l) = self
            .sweep
            .lambdas
            .iter()
            .chain([&self.loss.lambda, &self.sequential.lambda])
            .find(|l| !(**l >= 0.0))
        {
            return bad(format!("λ must be ≥ 0, got {l}"));
        }
        if self.sweep.dims.is_empty()
            || self.sweep.dims.contains(&0)
            || self.sweep.lambda_psi_dims.contains(&0)
        {
            return bad("ψ hidden dims must be ≥ 1".into());
        }
        if self.model.psi_hidden == 0 {
            return bad("model.psi_hidden must be ≥ 1".into());
        }
        if self.sequential.fractions.len() < 2 {
            return bad("sequential.fractions needs at least two generations".into());
        }
        if !(0.0..=1.0).contains(&self.sequential.momentum_m) {
            return bad(format!(
                "sequential.momentum_m must lie in [0, 1], got {}",
                self.sequential.momentum_m
            ));
        }
        bict::retrieval::validate_fractions(&self.refresh.fractions)?;
        if self.refresh.order_seeds.is_empty() {
            return bad("refresh.order_seeds must not be empty".into());
        }
        self.new_loss(self.loss.lambda).validate()?;
        self.train.to_train_config().validate()?;
        self.psi_train.to_train_config().validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_roundtrips_for_every_preset() {
        for sc in Scenario::ALL {
            let cfg = ExperimentConfig::preset(sc);
            let back = ExperimentConfig::parse(&cfg.snapshot(), Scenario::ExtendedData).unwrap();
            assert_eq!(back, cfg, "{sc}");
        }
    }

    #[test]
    fn keys_override_the_named_preset() {
        let text = "# comment\nloss.lambda = 3\nrun.scenario = improved-loss\nrun.seeds = 4, 5\n";
        let cfg = ExperimentConfig::parse(text, Scenario::ExtendedData).unwrap();
        assert_eq!(cfg.scenario, Scenario::ImprovedLoss);
        assert_eq!(cfg.loss.old_margin, 0.0);
        assert_eq!(cfg.loss.lambda, 3.0);
        assert_eq!(cfg.seeds, vec![4, 5]);
    }

    #[test]
    fn strict_rejections() {
        for text in [
            "data.colour = red",
            "bogus = 1",
            "train.speed = 2",
            "loss.lambda = -1",
            "loss.lambda",
            "loss.lambda = 1\nloss.lambda = 2",
            "sweep.lambdas = 1,2",
            "sweep.dims = 0,8",
            "refresh.fractions = 0,0.5",
            "data.num_classes = many",
        ] {
            assert!(
                ExperimentConfig::parse(text, Scenario::ExtendedData).is_err(),
                "{text}"
            );
        }
    }

    #[test]
    fn preset_mappings() {
        let ed = ExperimentConfig::preset(Scenario::ExtendedData);
        assert_eq!(
            (ed.split.mode, ed.split.old_fraction, ed.split.new_fraction),
            (SplitMode::DataSplit, 0.25, 1.0)
        );
        let ec = ExperimentConfig::preset(Scenario::ExtendedClass);
        assert_eq!(ec.split.mode, SplitMode::ClassSplit);
        let il = ExperimentConfig::preset(Scenario::ImprovedLoss);
        assert_eq!((il.loss.old_margin, il.loss.margin), (0.0, 0.3));
        let ia = ExperimentConfig::preset(Scenario::ImprovedArch);
        assert!(ia.model.old_width < ia.model.new_width);
        assert_eq!(ed.refresh.fractions.len(), 11);
    }
}
