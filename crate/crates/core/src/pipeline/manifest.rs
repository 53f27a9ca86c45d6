//! Experiment manifest: `key = value` lines, `#` comments, blank lines
//! ignored. Every key has a default, so an empty file is a valid manifest.

use std::path::{Path, PathBuf};

use crate::attack::{AdvObjective, GuidanceConfig, NormKind};
use crate::data::{DatasetConfig, RenderConfig};
use crate::diffusion::{FinalSigma, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::LossyKind;
use crate::models::{DenoiserConfig, EmbedderTrainConfig};
use crate::seed;

/// Pipeline stage a key belongs to; a stage's cache key covers its own
/// keys and those of every earlier stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Data,
    Train,
    Invert,
    Attack,
    Eval,
    Ablate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "synth",
            Stage::Train => "train",
            Stage::Invert => "invert",
            Stage::Attack => "attack",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
        }
    }
}

/// `(key, stage, description)` for every recognised key, in canonical order.
pub const KEYS: &[(&str, Stage, &str)] = &[
    (
        "seed",
        Stage::Data,
        "global seed for model init, pair sampling and inversion noise",
    ),
    ("dataset.seed", Stage::Data, "identity and render seed"),
    (
        "dataset.identities",
        Stage::Data,
        "number of synthetic identities",
    ),
    ("dataset.renders", Stage::Data, "renders per identity"),
    (
        "dataset.train_ratio",
        Stage::Data,
        "fraction of renders in the train split",
    ),
    ("dataset.jitter", Stage::Data, "render jitter in [0, 2]"),
    ("dataset.height", Stage::Data, "image height"),
    ("dataset.width", Stage::Data, "image width"),
    ("T", Stage::Train, "diffusion steps"),
    (
        "schedule.beta_start",
        Stage::Train,
        "first beta, or `auto` for the step-scaled range",
    ),
    ("schedule.beta_end", Stage::Train, "last beta, or `auto`"),
    ("schedule.final_sigma", Stage::Train, "first-beta | zero"),
    ("codec", Stage::Train, "identity | pca"),
    (
        "codec.side",
        Stage::Train,
        "PCA latent grid side (side² components)",
    ),
    ("denoiser.patch", Stage::Train, "patch size"),
    ("denoiser.d_model", Stage::Train, "token width"),
    ("denoiser.mlp_hidden", Stage::Train, "MLP hidden width"),
    ("denoiser.blocks", Stage::Train, "attention blocks"),
    (
        "denoiser.mid_block",
        Stage::Train,
        "index of the semantic mid block",
    ),
    ("denoiser.epochs", Stage::Train, "training epochs"),
    ("denoiser.batch", Stage::Train, "batch size"),
    ("denoiser.lr", Stage::Train, "Adam learning rate"),
    (
        "embedders.white_box",
        Stage::Train,
        "white-box embedders N_m",
    ),
    (
        "embedders.held_out",
        Stage::Train,
        "held-out black-box embedders",
    ),
    ("embedders.epochs", Stage::Train, "training epochs"),
    ("embedders.batch", Stage::Train, "batch size"),
    ("embedders.lr", Stage::Train, "Adam learning rate"),
    ("embedders.dim", Stage::Train, "embedding dimension"),
    (
        "embedders.min_accuracy",
        Stage::Train,
        "held-out accuracy below which training fails",
    ),
    (
        "embedders.target_accuracy",
        Stage::Train,
        "held-out accuracy every model must reach",
    ),
    ("attack.sources", Stage::Invert, "number of source images"),
    (
        "attack.targets",
        Stage::Invert,
        "number of target identities",
    ),
    ("t_s", Stage::Attack, "guidance starts at this timestep"),
    ("N_a", Stage::Attack, "inner iterations per timestep"),
    ("eta", Stage::Attack, "inner step size"),
    ("kappa", Stage::Attack, "projection radius"),
    ("lambda", Stage::Attack, "structure loss weight"),
    ("norm", Stage::Attack, "max | l2"),
    ("objective", Stage::Attack, "sem-div | naive | target-only"),
    (
        "structure_layers",
        Stage::Attack,
        "`all` or comma-free list like 0;2;4",
    ),
    (
        "attack.workers",
        Stage::Attack,
        "worker threads for independent sources",
    ),
    (
        "eval.far",
        Stage::Eval,
        "false acceptance rate for thresholds",
    ),
    (
        "eval.impostor_pairs",
        Stage::Eval,
        "impostor pairs for calibration",
    ),
    (
        "eval.rank_n",
        Stage::Eval,
        "largest N reported for Rank-N-T",
    ),
    (
        "eval.lossy",
        Stage::Eval,
        "transforms, e.g. bit-reduce:6;resize-down-up:0.5",
    ),
    (
        "ablation.sources",
        Stage::Ablate,
        "sources per ablation setting",
    ),
    (
        "ablation.lambda",
        Stage::Ablate,
        "lambda settings, e.g. 0;0.1",
    ),
    (
        "ablation.t_s",
        Stage::Ablate,
        "t_s settings as fractions of T, e.g. 0.1;0.2;0.3;0.5;1",
    ),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub schedule_range: Option<(f64, f64)>,
    pub final_sigma: FinalSigma,
    pub codec: String,
    pub codec_side: usize,
    pub denoiser: DenoiserConfig,
    pub denoiser_epochs: usize,
    pub denoiser_batch: usize,
    pub denoiser_lr: f64,
    pub white_box: usize,
    pub held_out: usize,
    pub embedder_train: EmbedderTrainConfig,
    pub target_accuracy: f64,
    pub sources: usize,
    pub targets: usize,
    pub guidance: GuidanceConfig,
    pub workers: usize,
    pub far: f64,
    pub impostor_pairs: usize,
    pub rank_n: usize,
    pub lossy: Vec<LossyKind>,
    pub ablation_sources: usize,
    pub ablation_lambda: Vec<f64>,
    pub ablation_t_s: Vec<f64>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            seed: 7,
            dataset: DatasetConfig::default(),
            schedule_range: None,
            final_sigma: FinalSigma::FirstBeta,
            codec: "identity".into(),
            codec_side: 16,
            denoiser: DenoiserConfig::default(),
            denoiser_epochs: 8,
            denoiser_batch: 16,
            denoiser_lr: 2e-3,
            white_box: 3,
            held_out: 1,
            embedder_train: EmbedderTrainConfig {
                epochs: 15,
                ..Default::default()
            },
            target_accuracy: 0.9,
            sources: 50,
            targets: 2,
            guidance: GuidanceConfig {
                kappa: 0.015,
                ..Default::default()
            },
            workers: 1,
            far: 0.01,
            impostor_pairs: 1000,
            rank_n: 5,
            lossy: vec![LossyKind::BitReduce(6), LossyKind::ResizeDownUp(0.5)],
            ablation_sources: 20,
            ablation_lambda: vec![0.0, 0.1],
            ablation_t_s: vec![0.1, 0.2, 0.3, 0.5, 1.0],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Manifest(format!("bad value `{v}` for `{key}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    let items: Vec<f64> = v
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Manifest(format!("`{key}` needs at least one value")));
    }
    Ok(items)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

impl Manifest {
    pub fn valid_keys() -> String {
        KEYS.iter().map(|k| k.0).collect::<Vec<_>>().join(", ")
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "dataset.seed" => self.dataset.seed = parse(key, v)?,
            "dataset.identities" => self.dataset.identities = parse(key, v)?,
            "dataset.renders" => self.dataset.renders_per_identity = parse(key, v)?,
            "dataset.train_ratio" => self.dataset.train_ratio = parse(key, v)?,
            "dataset.jitter" => self.dataset.jitter = parse(key, v)?,
            "dataset.height" => self.dataset.render.height = parse(key, v)?,
            "dataset.width" => self.dataset.render.width = parse(key, v)?,
            "T" => self.guidance.steps = parse(key, v)?,
            "schedule.beta_start" | "schedule.beta_end" => {
                if v == "auto" {
                    self.schedule_range = None;
                } else {
                    let x: f64 = parse(key, v)?;
                    let (mut b0, mut b1) = self
                        .schedule_range
                        .unwrap_or_else(|| NoiseSchedule::scaled_range(self.guidance.steps));
                    if key.ends_with("start") {
                        b0 = x;
                    } else {
                        b1 = x;
                    }
                    self.schedule_range = Some((b0, b1));
                }
            }
            "schedule.final_sigma" => self.final_sigma = FinalSigma::parse(v)?,
            "codec" => {
                if v != "identity" && v != "pca" {
                    return Err(Error::Manifest(format!(
                        "codec `{v}` (expected identity|pca)"
                    )));
                }
                self.codec = v.into();
            }
            "codec.side" => self.codec_side = parse(key, v)?,
            "denoiser.patch" => self.denoiser.patch = parse(key, v)?,
            "denoiser.d_model" => self.denoiser.d_model = parse(key, v)?,
            "denoiser.mlp_hidden" => self.denoiser.mlp_hidden = parse(key, v)?,
            "denoiser.blocks" => self.denoiser.blocks = parse(key, v)?,
            "denoiser.mid_block" => self.denoiser.mid_block = parse(key, v)?,
            "denoiser.epochs" => self.denoiser_epochs = parse(key, v)?,
            "denoiser.batch" => self.denoiser_batch = parse(key, v)?,
            "denoiser.lr" => self.denoiser_lr = parse(key, v)?,
            "embedders.white_box" => self.white_box = parse(key, v)?,
            "embedders.held_out" => self.held_out = parse(key, v)?,
            "embedders.epochs" => self.embedder_train.epochs = parse(key, v)?,
            "embedders.batch" => self.embedder_train.batch = parse(key, v)?,
            "embedders.lr" => self.embedder_train.lr = parse(key, v)?,
            "embedders.dim" => self.embedder_train.dim = parse(key, v)?,
            "embedders.min_accuracy" => self.embedder_train.min_accuracy = parse(key, v)?,
            "embedders.target_accuracy" => self.target_accuracy = parse(key, v)?,
            "attack.sources" => self.sources = parse(key, v)?,
            "attack.targets" => self.targets = parse(key, v)?,
            "t_s" => self.guidance.t_s = parse(key, v)?,
            "N_a" => self.guidance.n_a = parse(key, v)?,
            "eta" => self.guidance.eta = parse(key, v)?,
            "kappa" => self.guidance.kappa = parse(key, v)?,
            "lambda" => self.guidance.lambda = parse(key, v)?,
            "norm" => self.guidance.norm = NormKind::parse(v)?,
            "objective" => self.guidance.objective = AdvObjective::parse(v)?,
            "structure_layers" => {
                self.guidance.structure_layers = if v == "all" {
                    None
                } else {
                    Some(
                        parse_list(key, v)?
                            .into_iter()
                            .map(|x| {
                                if x < 0.0 || x.fract() != 0.0 {
                                    Err(Error::Manifest(format!("bad layer index {x}")))
                                } else {
                                    Ok(x as usize)
                                }
                            })
                            .collect::<Result<_>>()?,
                    )
                }
            }
            "attack.workers" => self.workers = parse(key, v)?,
            "eval.far" => self.far = parse(key, v)?,
            "eval.impostor_pairs" => self.impostor_pairs = parse(key, v)?,
            "eval.rank_n" => self.rank_n = parse(key, v)?,
            "eval.lossy" => {
                self.lossy = v
                    .split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|item| {
                        let (kind, p) = item.split_once(':').ok_or_else(|| {
                            Error::Manifest(format!("lossy item `{item}` needs kind:param"))
                        })?;
                        LossyKind::parse(kind, parse(key, p)?)
                    })
                    .collect::<Result<_>>()?
            }
            "ablation.sources" => self.ablation_sources = parse(key, v)?,
            "ablation.lambda" => self.ablation_lambda = parse_list(key, v)?,
            "ablation.t_s" => self.ablation_t_s = parse_list(key, v)?,
            _ => {
                return Err(Error::Manifest(format!(
                    "unknown key `{key}`; valid keys: {}",
                    Self::valid_keys()
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let g = &self.guidance;
        Some(match key {
            "seed" => self.seed.to_string(),
            "dataset.seed" => self.dataset.seed.to_string(),
            "dataset.identities" => self.dataset.identities.to_string(),
            "dataset.renders" => self.dataset.renders_per_identity.to_string(),
            "dataset.train_ratio" => self.dataset.train_ratio.to_string(),
            "dataset.jitter" => self.dataset.jitter.to_string(),
            "dataset.height" => self.dataset.render.height.to_string(),
            "dataset.width" => self.dataset.render.width.to_string(),
            "T" => g.steps.to_string(),
            "schedule.beta_start" => self
                .schedule_range
                .map_or("auto".into(), |r| r.0.to_string()),
            "schedule.beta_end" => self
                .schedule_range
                .map_or("auto".into(), |r| r.1.to_string()),
            "schedule.final_sigma" => self.final_sigma.name().into(),
            "codec" => self.codec.clone(),
            "codec.side" => self.codec_side.to_string(),
            "denoiser.patch" => self.denoiser.patch.to_string(),
            "denoiser.d_model" => self.denoiser.d_model.to_string(),
            "denoiser.mlp_hidden" => self.denoiser.mlp_hidden.to_string(),
            "denoiser.blocks" => self.denoiser.blocks.to_string(),
            "denoiser.mid_block" => self.denoiser.mid_block.to_string(),
            "denoiser.epochs" => self.denoiser_epochs.to_string(),
            "denoiser.batch" => self.denoiser_batch.to_string(),
            "denoiser.lr" => self.denoiser_lr.to_string(),
            "embedders.white_box" => self.white_box.to_string(),
            "embedders.held_out" => self.held_out.to_string(),
            "embedders.epochs" => self.embedder_train.epochs.to_string(),
            "embedders.batch" => self.embedder_train.batch.to_string(),
            "embedders.lr" => self.embedder_train.lr.to_string(),
            "embedders.dim" => self.embedder_train.dim.to_string(),
            "embedders.min_accuracy" => self.embedder_train.min_accuracy.to_string(),
            "embedders.target_accuracy" => self.target_accuracy.to_string(),
            "attack.sources" => self.sources.to_string(),
            "attack.targets" => self.targets.to_string(),
            "t_s" => g.t_s.to_string(),
            "N_a" => g.n_a.to_string(),
            "eta" => g.eta.to_string(),
            "kappa" => g.kappa.to_string(),
            "lambda" => g.lambda.to_string(),
            "norm" => g.norm.name().into(),
            "objective" => g.objective.name().into(),
            "structure_layers" => g
                .structure_layers
                .as_ref()
                .map_or("all".into(), |l| join(l)),
            "attack.workers" => self.workers.to_string(),
            "eval.far" => self.far.to_string(),
            "eval.impostor_pairs" => self.impostor_pairs.to_string(),
            "eval.rank_n" => self.rank_n.to_string(),
            "eval.lossy" => self
                .lossy
                .iter()
                .map(|k| match k {
                    LossyKind::BitReduce(b) => format!("bit-reduce:{b}"),
                    LossyKind::ResizeDownUp(s) => format!("resize-down-up:{s}"),
                })
                .collect::<Vec<_>>()
                .join(";"),
            "ablation.sources" => self.ablation_sources.to_string(),
            "ablation.lambda" => join(&self.ablation_lambda),
            "ablation.t_s" => join(&self.ablation_t_s),
            _ => return None,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Manifest(format!("line {}: expected key = value", n + 1)))?;
            m.set(k.trim(), v)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", n + 1)))?;
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io::read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Manifest(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.as_ref().split_once('=').ok_or_else(|| {
                Error::Manifest(format!("override `{}` is not key=value", o.as_ref()))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Canonical text: every key in documented order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _, _)| format!("{k} = {}\n", self.get(k).expect("documented key")))
            .collect()
    }

    /// Cache key of everything `stage` depends on.
    pub fn stage_hash(&self, stage: Stage) -> u64 {
        let text: String = KEYS
            .iter()
            .filter(|(k, s, _)| *s <= stage && !matches!(*k, "attack.workers"))
            .map(|(k, _, _)| format!("{k}={}\n", self.get(k).expect("documented key")))
            .collect();
        seed::fnv1a(text.into_bytes())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let (b0, b1) = self
            .schedule_range
            .unwrap_or_else(|| NoiseSchedule::scaled_range(self.guidance.steps));
        NoiseSchedule::linear_with(self.guidance.steps, b0, b1, self.final_sigma)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(m));
        self.guidance
            .validate_degenerate()
            .map_err(|e| Error::Manifest(e.to_string()))?;
        self.schedule()
            .map_err(|e| Error::Manifest(e.to_string()))?;
        if self.white_box == 0 {
            return bad("embedders.white_box must be >= 1".into());
        }
        if self.white_box + self.held_out < 2 {
            return bad("need at least two embedders in total".into());
        }
        if self.targets == 0 || self.targets >= self.dataset.identities {
            return bad(format!(
                "attack.targets {} must be in 1..{}",
                self.targets, self.dataset.identities
            ));
        }
        if !(self.far > 0.0 && self.far < 1.0) {
            return bad(format!("eval.far {} not in (0, 1)", self.far));
        }
        if self.rank_n == 0 {
            return bad("eval.rank_n must be >= 1".into());
        }
        if self.workers == 0 {
            return bad("attack.workers must be >= 1".into());
        }
        if self.ablation_t_s.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("ablation.t_s fractions must lie in (0, 1]".into());
        }
        Ok(())
    }

    /// Denoiser config with the latent shape implied by dataset and codec.
    pub fn denoiser_config(&self) -> DenoiserConfig {
        let [h, w] = if self.codec == "pca" {
            [self.codec_side, self.codec_side]
        } else {
            [self.dataset.render.height, self.dataset.render.width]
        };
        DenoiserConfig {
            height: h,
            width: w,
            seed: seed::derive(self.seed, &[0xD0]),
            ..self.denoiser.clone()
        }
    }

    pub fn render(&self) -> RenderConfig {
        self.dataset.render
    }
}

/// Default output root: `$ADVDIFF_OUT` or `./runs`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os("ADVDIFF_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}
