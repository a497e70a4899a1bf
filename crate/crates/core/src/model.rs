//! The assembled dual-branch model and the patch windows it consumes.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::backbone::{build_backbone, Backbone, BackboneConfig, BackboneMode};
use crate::branches::{to_sequences, Adapter, EpiEncoder, EpiProjector, MobProjector, SliceMerge};
use crate::epidata::EpidemicDataset;
use crate::prompt::PromptParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Error;

/// How the adjacency of a generated patch is chosen during multi-step forecasting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratedAdjacency {
    /// Threshold of the mobility branch's prediction.
    #[default]
    Predicted,
    /// Mean adjacency over the last `w` days of the context.
    WindowAverage,
    /// Adjacency of the most recent context day.
    Previous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    Graph2MLP,
    Time2Aver,
    Time2Last,
    #[serde(rename = "wo_LLM")]
    WoLlm,
    #[serde(rename = "LLM2MLP")]
    Llm2Mlp,
    #[serde(rename = "LLM2RNN")]
    Llm2Rnn,
    #[serde(rename = "LLM2Trans")]
    Llm2Trans,
    Adj2Aver,
    Adj2Last,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Full,
        Variant::Graph2MLP,
        Variant::Time2Aver,
        Variant::Time2Last,
        Variant::WoLlm,
        Variant::Llm2Mlp,
        Variant::Llm2Rnn,
        Variant::Llm2Trans,
        Variant::Adj2Aver,
        Variant::Adj2Last,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Graph2MLP => "Graph2MLP",
            Variant::Time2Aver => "Time2Aver",
            Variant::Time2Last => "Time2Last",
            Variant::WoLlm => "wo_LLM",
            Variant::Llm2Mlp => "LLM2MLP",
            Variant::Llm2Rnn => "LLM2RNN",
            Variant::Llm2Trans => "LLM2Trans",
            Variant::Adj2Aver => "Adj2Aver",
            Variant::Adj2Last => "Adj2Last",
        }
    }

    pub fn parse(id: &str) -> Result<Self, Error> {
        Self::ALL
            .into_iter()
            .find(|v| v.id().eq_ignore_ascii_case(id))
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|v| v.id()).collect();
                Error::Config(format!("unknown variant '{id}', expected one of {}", known.join(", ")))
            })
    }

    /// Applies this variant's single modification to `base`.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::Graph2MLP => c.encoder = EpiEncoder::Mlp,
            Variant::Time2Aver => c.merge = SliceMerge::Average,
            Variant::Time2Last => c.merge = SliceMerge::Last,
            Variant::WoLlm => c.backbone.mode = BackboneMode::Identity,
            Variant::Llm2Mlp => c.backbone.mode = BackboneMode::Mlp,
            Variant::Llm2Rnn => c.backbone.mode = BackboneMode::Rnn,
            Variant::Llm2Trans => c.backbone.mode = BackboneMode::TrainableTransformer,
            Variant::Adj2Aver => c.generated_adjacency = GeneratedAdjacency::WindowAverage,
            Variant::Adj2Last => c.generated_adjacency = GeneratedAdjacency::Previous,
        }
        c
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub regions: usize,
    pub window: usize,
    /// Token width `D`; must equal the backbone width.
    pub width: usize,
    pub mob_hidden: usize,
    pub encoder: EpiEncoder,
    pub merge: SliceMerge,
    pub generated_adjacency: GeneratedAdjacency,
    pub backbone: BackboneConfig,
    /// Seed for projector, adapter and prompt initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(regions: usize, window: usize, backbone: BackboneConfig, seed: u64) -> Self {
        Self {
            regions,
            window,
            width: backbone.width,
            mob_hidden: backbone.width,
            encoder: EpiEncoder::Graph,
            merge: SliceMerge::Gated,
            generated_adjacency: GeneratedAdjacency::Predicted,
            backbone,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.regions == 0 {
            return Err(Error::Config("model needs at least one region".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("token window must be at least 1".into()));
        }
        if self.width == 0 || self.mob_hidden == 0 {
            return Err(Error::Config("token and hidden widths must be positive".into()));
        }
        if self.width != self.backbone.width {
            return Err(Error::Config(format!(
                "token width {} differs from backbone width {}",
                self.width, self.backbone.width
            )));
        }
        self.backbone.validate()
    }
}

/// Inputs for a sequence of `P` consecutive patches ending at some day.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchWindows<S> {
    /// `[P, w, N, F]` case features of every day in every patch.
    pub cases: Tensor<S>,
    /// `[P, w, N, N]` adjacency of every day in every patch.
    pub adjacency: Tensor<S>,
    /// `[P, N, N]` mobility of each patch's last day.
    pub mobility: Tensor<S>,
    pub patch_days: Vec<Range<usize>>,
}

/// Day ranges of the `count` non-overlapping `w`-day patches that end at `end` (exclusive).
pub fn patch_ranges(end: usize, count: usize, w: usize) -> Vec<Range<usize>> {
    (0..count).rev().map(|k| end - (k + 1) * w..end - k * w).collect()
}

/// Per-day inputs the model reads, `features[t]` is `[N, F]`, the others `[N, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyInputs<S> {
    pub features: Vec<Tensor<S>>,
    pub adjacency: Vec<Tensor<S>>,
    pub mobility: Vec<Tensor<S>>,
}

impl<S: Scalar> DailyInputs<S> {
    pub fn from_dataset(ds: &EpidemicDataset<S>, end: usize) -> Self {
        Self {
            features: (0..end).map(|t| ds.features_at(t)).collect(),
            adjacency: (0..end).map(|t| ds.adjacency_at(t)).collect(),
            mobility: (0..end).map(|t| ds.mobility_at(t)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// The latest `min(len / w, max_patches)` patches.
    pub fn windows(&self, w: usize, max_patches: usize) -> Result<PatchWindows<S>, Error> {
        let count = (self.len() / w).min(max_patches);
        if count == 0 {
            return Err(Error::InsufficientData(format!(
                "{} days do not contain a full {w}-day patch",
                self.len()
            )));
        }
        let ranges = patch_ranges(self.len(), count, w);
        let stack = |items: Vec<Tensor<S>>| Tensor::stack(&items).map_err(|e| Error::Shape(e.to_string()));
        let days: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();
        let cases = stack(days.iter().map(|&t| self.features[t].clone()).collect())?;
        let adjacency = stack(days.iter().map(|&t| self.adjacency[t].clone()).collect())?;
        let mobility = stack(ranges.iter().map(|r| self.mobility[r.end - 1].clone()).collect())?;
        let n = cases.shape()[1];
        let f = cases.shape()[2];
        Ok(PatchWindows {
            cases: cases.reshaped(&[count, w, n, f]).expect("same size"),
            adjacency: adjacency.reshaped(&[count, w, n, n]).expect("same size"),
            mobility,
            patch_days: ranges,
        })
    }
}

impl<S: Scalar> PatchWindows<S> {
    pub fn n_patches(&self) -> usize {
        self.patch_days.len()
    }

    /// `[N, P, F]`: each patch's own `w` daily counts, read from its last day.
    pub fn epi_targets(&self) -> Tensor<S> {
        let s = self.cases.shape();
        let (p, w, n, f) = (s[0], s[1], s[2], s[3]);
        Tensor::from_fn(&[n, p, f], |idx| {
            let (i, rest) = (idx / (p * f), idx % (p * f));
            let (q, k) = (rest / f, rest % f);
            self.cases.data()[((q * w + w - 1) * n + i) * f + k]
        })
    }

    /// `[N, P, N]`: row `i` of each patch's mobility.
    pub fn mob_targets(&self) -> Tensor<S> {
        let s = self.mobility.shape();
        let (p, n) = (s[0], s[1]);
        Tensor::from_fn(&[n, p, n], |idx| {
            let (i, rest) = (idx / (p * n), idx % (p * n));
            let (q, j) = (rest / n, rest % n);
            self.mobility.data()[(q * n + i) * n + j]
        })
    }
}

/// Branch outputs at every position; position `p` predicts patch `p + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchOutputs {
    /// `[N, P, F]`, unclamped.
    pub epi: Var,
    /// `[N, P, N]`, clamped at zero.
    pub mob: Var,
}

#[derive(Debug, Clone)]
pub struct EpiModel<S> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub prompts: PromptParams,
    pub epi_projector: EpiProjector,
    pub mob_projector: MobProjector,
    pub epi_adapter: Adapter,
    pub mob_adapter: Adapter,
    pub backbone: Backbone,
}

impl<S: Scalar> EpiModel<S> {
    pub fn new(config: ModelConfig) -> Result<Self, Error> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (n, w, d) = (config.regions, config.window, config.width);
        let prompts = PromptParams::init(&mut store, w)?;
        let epi_projector = EpiProjector::new(&mut store, &mut rng, config.encoder, config.merge, w, d);
        let mob_projector = MobProjector::new(&mut store, &mut rng, n, config.mob_hidden, d);
        let epi_adapter = Adapter::new(&mut store, &mut rng, "epi_adapter", d, w);
        let mob_adapter = Adapter::new(&mut store, &mut rng, "mob_adapter", d, n);
        let backbone = build_backbone(&config.backbone, &mut store)?;
        Ok(Self {
            config,
            store,
            prompts,
            epi_projector,
            mob_projector,
            epi_adapter,
            mob_adapter,
            backbone,
        })
    }

    pub fn window(&self) -> usize {
        self.config.window
    }

    /// Longest patch sequence fed to the backbone.
    pub fn max_patches(&self) -> usize {
        self.config.backbone.max_positions.max(1)
    }

    /// `[P, N, D]` case tokens.
    pub fn epi_tokens(&self, g: &mut Graph<S>, windows: &PatchWindows<S>) -> Result<Var, Error> {
        self.epi_projector
            .forward(g, &self.store, &self.prompts, &windows.cases, &windows.adjacency)
    }

    /// `[P, N, D]` mobility tokens.
    pub fn mob_tokens(&self, g: &mut Graph<S>, windows: &PatchWindows<S>) -> Result<Var, Error> {
        self.mob_projector.forward(g, &self.store, &windows.mobility)
    }

    pub fn forward(&self, g: &mut Graph<S>, windows: &PatchWindows<S>) -> Result<BranchOutputs, Error> {
        let n = self.config.regions;
        if windows.cases.shape().get(2) != Some(&n) {
            return Err(Error::Shape(format!(
                "model expects {n} regions, windows have shape {:?}",
                windows.cases.shape()
            )));
        }
        let epi = self.epi_tokens(g, windows)?;
        let epi = to_sequences(g, epi)?;
        let epi = self.backbone.forward(g, &self.store, epi)?;
        let epi = self.epi_adapter.forward(g, &self.store, epi)?;

        let mob = self.mob_tokens(g, windows)?;
        let mob = to_sequences(g, mob)?;
        let mob = self.backbone.forward(g, &self.store, mob)?;
        let mob = self.mob_adapter.forward(g, &self.store, mob)?;
        let mob = g.clamp_min(mob, S::zero())?;
        Ok(BranchOutputs { epi, mob })
    }
}
