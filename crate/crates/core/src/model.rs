//! End-to-end head: feature provider, graph block, KAN mapping, classifier.
//!
//! Flatten order is `(C, S, D)` row-major.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, StageContext};
use crate::kan::{ClassifierHead, KanConfig, KanLayer};
use crate::mcr::McrBlock;
use crate::nn::{check_dropout_rate, LinearLayer, Mode};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::{seeded, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Seeded per-window affine map from `P` raw values to `D` features.
    StubProjection,
    /// Inputs already hold `D` features per window (`P == D`).
    FileFeatures,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub seed: u64,
    pub trainable: bool,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self { kind: ProviderKind::StubProjection, seed: 7, trainable: true }
    }
}

/// Which head modules are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    KanOnly,
    BlockOnly,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::KanOnly, Variant::BlockOnly, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline (CBraMod+Linear)",
            Variant::KanOnly => "+KAN",
            Variant::BlockOnly => "+MCRBlock-GCN",
            Variant::Full => "MSCGC-KAN (full model)",
        }
    }

    pub fn uses_block(self) -> bool {
        matches!(self, Variant::BlockOnly | Variant::Full)
    }

    pub fn uses_kan(self) -> bool {
        matches!(self, Variant::KanOnly | Variant::Full)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub windows: usize,
    pub raw_width: usize,
    pub features: usize,
    pub classes: usize,
    pub kernels: Vec<usize>,
    pub dropout: f64,
    pub kan: KanConfig,
    pub provider: ProviderConfig,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            windows: 10,
            raw_width: 200,
            features: 200,
            classes: 9,
            kernels: vec![3, 5],
            dropout: 0.1,
            kan: KanConfig::default(),
            provider: ProviderConfig::default(),
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.channels, self.windows, self.raw_width, self.features, self.classes];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dims must be positive, got {dims:?}")));
        }
        if self.kernels.is_empty() || self.kernels.contains(&0) {
            return Err(Error::Config(format!("kernel set {:?} must be nonempty and positive", self.kernels)));
        }
        if self.provider.kind == ProviderKind::FileFeatures && self.raw_width != self.features {
            return Err(Error::Config(format!(
                "file features need raw_width == features, got {} and {}",
                self.raw_width, self.features
            )));
        }
        check_dropout_rate(self.dropout)?;
        self.kan.validate()
    }

    pub fn flat_dim(&self) -> usize {
        self.channels * self.windows * self.features
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("model config serialises");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug)]
pub struct FeatureProvider {
    pub kind: ProviderKind,
    pub projection: Option<LinearLayer>,
    pub raw_width: usize,
    pub features: usize,
}

impl FeatureProvider {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let projection = match cfg.provider.kind {
            ProviderKind::StubProjection => {
                let mut rng = seeded(cfg.provider.seed);
                Some(LinearLayer::new(store, "provider", cfg.raw_width, cfg.features, ParamGroup::Backbone, &mut rng)?)
            }
            ProviderKind::FileFeatures => None,
        };
        if !cfg.provider.trainable {
            store.set_group_trainable(ParamGroup::Backbone, false);
        }
        Ok(Self { kind: cfg.provider.kind, projection, raw_width: cfg.raw_width, features: cfg.features })
    }

    /// `[B, C, S, P]` to `[B, C, S, D]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.raw_width {
            return Err(Error::dim(format!(
                "provider expects [B, C, S, {}], got {shape:?}",
                self.raw_width
            )));
        }
        let Some(proj) = &self.projection else {
            return Ok(x);
        };
        let rows = shape[0] * shape[1] * shape[2];
        let flat = tape.reshape(x, &[rows, self.raw_width])?;
        let y = proj.forward(tape, store, flat)?;
        tape.reshape(y, &[shape[0], shape[1], shape[2], self.features])
    }
}

/// Tape handles recorded by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Provider output `F`.
    pub features: Var,
    /// Block output `H` (equal to `features` when the block is absent).
    pub h: Var,
    pub a_hat: Option<Var>,
    /// KAN hidden activation before basis expansion.
    pub kan_hidden: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct MscgcKanModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub provider: FeatureProvider,
    pub block: Option<McrBlock>,
    pub kan: Option<KanLayer>,
    /// Affine stand-in for the KAN mapping in ablation variants.
    pub affine: Option<LinearLayer>,
    pub clf: ClassifierHead,
}

impl MscgcKanModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let provider = FeatureProvider::new(&mut store, &config)?;
        let mut rng = seeded(config.seed);
        let block = if config.variant.uses_block() {
            Some(McrBlock::new(&mut store, "mcr", config.channels, config.features, &config.kernels, config.dropout, &mut rng)?)
        } else {
            None
        };
        let flat = config.flat_dim();
        let (kan, affine) = if config.variant.uses_kan() {
            (Some(KanLayer::new(&mut store, "kan", flat, config.kan, &mut rng)?), None)
        } else {
            (None, Some(LinearLayer::new(&mut store, "affine", flat, config.kan.out_dim, ParamGroup::Head, &mut rng)?))
        };
        let clf = ClassifierHead::new(&mut store, "classifier", config.kan.out_dim, config.classes, &mut rng)?;
        Ok(Self { config, store, provider, block, kan, affine, clf })
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode, rng: &mut SeededRng) -> Result<ForwardOutput> {
        let shape = tape.shape(x).to_vec();
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.channels || shape[2] != c.windows {
            return Err(Error::Stage {
                stage: "input",
                source: Box::new(Error::dim(format!(
                    "model expects [B, {}, {}, {}], got {shape:?}",
                    c.channels, c.windows, c.raw_width
                ))),
            });
        }
        let b = shape[0];
        let flat_dim = c.flat_dim();
        let features = self.provider.encode(tape, &self.store, x).stage("provider")?;
        let (h, a_hat) = match &self.block {
            Some(block) => {
                let out = block.forward(tape, &mut self.store, features, mode, rng).stage("mcr_block")?;
                (out.h, Some(out.a_hat))
            }
            None => (features, None),
        };
        let flat = tape.reshape(h, &[b, flat_dim]).stage("flatten")?;
        let (mapped, kan_hidden) = match (&self.kan, &self.affine) {
            (Some(kan), _) => {
                let hid = kan.hidden(tape, &self.store, flat).stage("kan")?;
                let phi = crate::kan::basis_expand(tape, hid, kan.config.harmonics).stage("kan")?;
                (kan.out_proj.forward(tape, &self.store, phi).stage("kan")?, Some(hid))
            }
            (None, Some(affine)) => (affine.forward(tape, &self.store, flat).stage("affine")?, None),
            (None, None) => unreachable!("model always has a mapping stage"),
        };
        let logits = self.clf.forward(tape, &self.store, mapped).stage("classifier")?;
        Ok(ForwardOutput { logits, features, h, a_hat, kan_hidden })
    }

    /// Eval-mode logits for `x` in chunks of `batch` rows.
    pub fn predict(&mut self, x: &Tensor, batch: usize) -> Result<Tensor> {
        let n = x.shape().first().copied().unwrap_or(0);
        let mut rng = seeded(0);
        let mut out = Vec::with_capacity(n * self.config.classes);
        for start in (0..n).step_by(batch.max(1)) {
            let idx: Vec<usize> = (start..(start + batch.max(1)).min(n)).collect();
            let chunk = x.select(&idx)?;
            let mut tape = Tape::inference();
            let xv = tape.constant(chunk);
            let fo = self.forward(&mut tape, xv, Mode::Eval, &mut rng)?;
            out.extend_from_slice(tape.value(fo.logits).data());
        }
        Tensor::new(vec![n, self.config.classes], out)
    }

    /// Trainable parameters split by group.
    pub fn parameter_groups(&self) -> ParameterGroups {
        let mut groups = ParameterGroups::default();
        for id in self.store.trainable() {
            match self.store.entry(id).group {
                ParamGroup::Backbone => groups.backbone.push(id),
                ParamGroup::Head => groups.head.push(id),
            }
        }
        groups
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParameterGroups {
    pub backbone: Vec<ParamId>,
    pub head: Vec<ParamId>,
}

/// `[B, C, S, D]` to `[B, C·S·D]`.
pub fn flatten(t: &Tensor) -> Result<Tensor> {
    let b = *t.shape().first().ok_or_else(|| Error::dim("cannot flatten a scalar"))?;
    t.reshape(&[b, t.numel() / b])
}

pub fn unflatten(t: &Tensor, c: usize, s: usize, d: usize) -> Result<Tensor> {
    let b = *t.shape().first().ok_or_else(|| Error::dim("cannot unflatten a scalar"))?;
    t.reshape(&[b, c, s, d])
}
