//! Adversarial identity guidance injected into the reverse diffusion chain.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::diffusion::{
    edit_friendly_invert, eps_checked, reverse_step, DiffusionTrajectory, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::grad::{softmax, ModelId, Tape, Tensor, Var};
use crate::models::{Codec, DenoiserNet, Embedder};

/// Norm of the projection ball.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormKind {
    #[default]
    Max,
    L2,
}

impl NormKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max" | "linf" => Ok(NormKind::Max),
            "l2" => Ok(NormKind::L2),
            other => Err(Error::invalid(format!(
                "norm kind `{other}` (expected max|l2)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NormKind::Max => "max",
            NormKind::L2 => "l2",
        }
    }

    pub fn measure(self, g: &Tensor) -> f64 {
        match self {
            NormKind::Max => g.max_abs(),
            NormKind::L2 => g.l2_norm(),
        }
    }
}

/// Which adversarial objective the inner loop ascends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AdvObjective {
    /// Mid-feature divergence from the benign latent plus weighted target
    /// similarity.
    #[default]
    SemanticDivergence,
    /// Target similarity minus source similarity on the decoded estimate.
    Naive,
    /// Weighted target similarity alone.
    TargetOnly,
}

impl AdvObjective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sem-div" => Ok(AdvObjective::SemanticDivergence),
            "naive" => Ok(AdvObjective::Naive),
            "target-only" => Ok(AdvObjective::TargetOnly),
            other => Err(Error::invalid(format!(
                "objective `{other}` (expected sem-div|naive|target-only)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AdvObjective::SemanticDivergence => "sem-div",
            AdvObjective::Naive => "naive",
            AdvObjective::TargetOnly => "target-only",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    /// Total diffusion steps `T`.
    pub steps: usize,
    /// Guidance is injected for `t = t_s, …, 1`.
    pub t_s: usize,
    pub n_a: usize,
    pub eta: f64,
    pub kappa: f64,
    pub lambda: f64,
    pub norm: NormKind,
    pub objective: AdvObjective,
    /// Attention layers entering the structure loss; `None` means all.
    pub structure_layers: Option<Vec<usize>>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            steps: 100,
            t_s: 20,
            n_a: 10,
            eta: 3.0,
            kappa: 0.1,
            lambda: 0.1,
            norm: NormKind::Max,
            objective: AdvObjective::SemanticDivergence,
            structure_layers: None,
        }
    }
}

impl GuidanceConfig {
    /// Strict check for user-facing configs.
    pub fn validate(&self) -> Result<()> {
        self.validate_degenerate()?;
        if self.t_s == 0 || self.eta <= 0.0 || self.kappa <= 0.0 {
            return Err(Error::invalid(format!(
                "need t_s >= 1, eta > 0, kappa > 0 (got t_s={}, eta={}, kappa={})",
                self.t_s, self.eta, self.kappa
            )));
        }
        Ok(())
    }

    /// Also admits `t_s = 0`, `η = 0` and `κ = 0`, which reduce the attack
    /// to plain reconstruction.
    pub fn validate_degenerate(&self) -> Result<()> {
        if self.t_s > self.steps {
            return Err(Error::invalid(format!(
                "t_s {} exceeds T {}",
                self.t_s, self.steps
            )));
        }
        if self.n_a == 0 {
            return Err(Error::invalid("N_a must be >= 1"));
        }
        for (name, v) in [
            ("eta", self.eta),
            ("kappa", self.kappa),
            ("lambda", self.lambda),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::invalid(format!("{name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Ensemble weights and the scores they were derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleState {
    pub weights: Vec<f64>,
    pub scores: Vec<f64>,
}

impl EnsembleState {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("EnsembleState"));
        }
        Ok(EnsembleState {
            weights: vec![1.0 / n as f64; n],
            scores: vec![0.0; n],
        })
    }
}

/// `w_i = e^{1−s_i} / Σ_j e^{1−s_j}`.
pub fn update_weights(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "ensemble scores".into(),
        });
    }
    let shifted: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
    softmax(&shifted)
}

/// Projects `g` onto the `kappa`-ball of `norm`.
pub fn project_kappa(g: &Tensor, kappa: f64, norm: NormKind) -> Result<Tensor> {
    if kappa.is_nan() || kappa < 0.0 {
        return Err(Error::invalid(format!("kappa {kappa} must be >= 0")));
    }
    Ok(match norm {
        NormKind::Max => g.map(|v| v.clamp(-kappa, kappa)),
        NormKind::L2 => {
            let n = g.l2_norm();
            if n > kappa {
                let s = kappa / n;
                g.map(|v| v * s)
            } else {
                g.clone()
            }
        }
    })
}

/// Shared read-only pieces of an attack. `models` are the white-box
/// embedders; nothing else ever reaches a gradient tape.
#[derive(Clone, Copy)]
pub struct AttackContext<'a> {
    pub denoiser: &'a DenoiserNet,
    pub codec: &'a Codec,
    pub models: &'a [&'a Embedder],
    pub schedule: &'a NoiseSchedule,
}

/// Identity anchors: per-model embeddings of the target and source images.
#[derive(Clone, Debug)]
pub struct IdentityAnchors {
    pub target: Vec<Tensor>,
    pub source: Vec<Tensor>,
}

impl IdentityAnchors {
    pub fn new(models: &[&Embedder], source: &Tensor, target: &Tensor) -> Result<Self> {
        Ok(IdentityAnchors {
            target: models
                .iter()
                .map(|m| m.embed(target))
                .collect::<Result<_>>()?,
            source: models
                .iter()
                .map(|m| m.embed(source))
                .collect::<Result<_>>()?,
        })
    }
}

/// Denoiser features of the benign latent at one timestep.
#[derive(Clone, Debug)]
pub struct BenignFeatures {
    pub t: usize,
    pub x_t: Tensor,
    pub mid: Tensor,
    pub attn: Vec<Tensor>,
}

impl BenignFeatures {
    pub fn new(denoiser: &DenoiserNet, x_t: &Tensor, t: usize) -> Result<Self> {
        let tape = Tape::new();
        let x = tape.constant(x_t.clone());
        let out = denoiser.forward(&tape, x, t)?;
        Ok(BenignFeatures {
            t,
            x_t: x_t.clone(),
            mid: out.mid.value(),
            attn: out.attn.iter().map(Var::value).collect(),
        })
    }
}

/// `Sim(M(D(x̂_0)), M(I_tgt)) − Sim(M(D(x̂_0)), M(I_src))` for one model.
pub fn naive_adv_loss<'t>(
    tape: &'t Tape,
    x0_hat: Var<'t>,
    source: &Tensor,
    target: &Tensor,
    m: &Embedder,
    codec: &Codec,
) -> Result<Var<'t>> {
    let e = m.embed_var(tape, codec.decode_var(tape, x0_hat)?)?;
    let to_tgt = e.cosine_sim(tape.constant(m.embed(target)?))?;
    let to_src = e.cosine_sim(tape.constant(m.embed(source)?))?;
    to_tgt.sub(to_src)
}

/// The three loss values plus the fresh per-model target scores.
pub struct LossTerms<'t> {
    pub adv: Var<'t>,
    pub structure: Var<'t>,
    pub total: Var<'t>,
    pub scores: Vec<f64>,
}

fn layer_set(cfg: &GuidanceConfig, blocks: usize) -> Result<Vec<usize>> {
    match &cfg.structure_layers {
        None => Ok((0..blocks).collect()),
        Some(ls) => {
            if let Some(bad) = ls.iter().find(|&&l| l >= blocks) {
                return Err(Error::invalid(format!(
                    "structure layer {bad} outside 0..{blocks}"
                )));
            }
            Ok(ls.clone())
        }
    }
}

fn structure_from<'t>(
    tape: &'t Tape,
    attn: &[Var<'t>],
    benign: &[Tensor],
    layers: &[usize],
) -> Result<Var<'t>> {
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for &j in layers {
        let d = attn[j].sub(tape.constant(benign[j].clone()))?;
        acc = acc.add(d.square().sum())?;
    }
    Ok(acc.neg())
}

/// `−Σ_{j∈S} ‖A_j(x̂_t) − A_j(x_t)‖²` with `S` the given attention layers.
pub fn structure_loss<'t>(
    tape: &'t Tape,
    x_hat: Var<'t>,
    x_t: &Tensor,
    t: usize,
    denoiser: &DenoiserNet,
    layers: &[usize],
) -> Result<Var<'t>> {
    if x_hat.shape() != x_t.shape() {
        return Err(Error::ShapeMismatch {
            op: "structure_loss",
            left: x_hat.shape(),
            right: x_t.shape().to_vec(),
        });
    }
    let benign = BenignFeatures::new(denoiser, x_t, t)?;
    let out = denoiser.forward(tape, x_hat, t)?;
    if let Some(bad) = layers.iter().find(|&&l| l >= out.attn.len()) {
        return Err(Error::invalid(format!(
            "structure layer {bad} out of range"
        )));
    }
    structure_from(tape, &out.attn, &benign.attn, layers)
}

/// `L_adv`, `L_str` and `L_total = L_adv + λ·L_str` at `x̂_t`, all from one
/// denoiser pass.
pub fn total_loss<'t>(
    tape: &'t Tape,
    x_hat: Var<'t>,
    benign: &BenignFeatures,
    anchors: &IdentityAnchors,
    weights: &[f64],
    ctx: &AttackContext,
    cfg: &GuidanceConfig,
) -> Result<LossTerms<'t>> {
    let n = ctx.models.len();
    if weights.len() != n || anchors.target.len() != n || anchors.source.len() != n {
        return Err(Error::invalid(format!(
            "{} weights and {} anchors for {n} models",
            weights.len(),
            anchors.target.len()
        )));
    }
    if n == 0 {
        return Err(Error::Empty("white-box models"));
    }
    let t = benign.t;
    let out = ctx.denoiser.forward(tape, x_hat, t)?;
    let (a, b) = ctx.schedule.x0_coeffs(t)?;
    let x0_hat = x_hat.scale(a).sub(out.eps.scale(b))?;
    let image = ctx.codec.decode_var(tape, x0_hat)?;

    let mut ensemble = tape.constant(Tensor::scalar(0.0));
    let mut scores = Vec::with_capacity(n);
    for (i, m) in ctx.models.iter().enumerate() {
        let e = m.embed_var(tape, image)?;
        let score = e.cosine_sim(tape.constant(anchors.target[i].clone()))?;
        scores.push(score.item());
        let term = match cfg.objective {
            AdvObjective::Naive => {
                score.sub(e.cosine_sim(tape.constant(anchors.source[i].clone()))?)?
            }
            _ => score,
        };
        ensemble = ensemble.add(term.scale(weights[i]))?;
    }
    let adv = match cfg.objective {
        AdvObjective::SemanticDivergence => {
            let keep = out.mid.cosine_sim(tape.constant(benign.mid.clone()))?;
            ensemble.sub(keep)?
        }
        _ => ensemble,
    };
    let layers = layer_set(cfg, out.attn.len())?;
    let structure = structure_from(tape, &out.attn, &benign.attn, &layers)?;
    let total = adv.add(structure.scale(cfg.lambda))?;
    Ok(LossTerms {
        adv,
        structure,
        total,
        scores,
    })
}

/// One row of the inner-loop trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub k: usize,
    pub l_adv: f64,
    pub l_str: f64,
    pub l_total: f64,
    pub scores: Vec<f64>,
    /// Weights after the update driven by `scores`.
    pub weights: Vec<f64>,
    pub g_norm: f64,
}

/// Runs `N_a` projected ascent steps around `base` and returns the final
/// guidance `G_t`.
pub fn guidance_inner_loop(
    base: &Tensor,
    benign: &BenignFeatures,
    anchors: &IdentityAnchors,
    ctx: &AttackContext,
    cfg: &GuidanceConfig,
    ens: &mut EnsembleState,
    trace: &mut Vec<TraceRow>,
    touched: &mut BTreeSet<ModelId>,
) -> Result<Tensor> {
    let mut g = Tensor::zeros(base.shape());
    for k in 1..=cfg.n_a {
        let tape = Tape::new();
        let x = tape.leaf(base.zip_with(&g, |a, b| a + b)?);
        let terms = total_loss(&tape, x, benign, anchors, &ens.weights, ctx, cfg)?;
        let (l_adv, l_str, l_total) =
            (terms.adv.item(), terms.structure.item(), terms.total.item());
        if !(l_adv.is_finite() && l_str.is_finite() && l_total.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("guidance loss at t={}, k={k}", benign.t),
            });
        }
        tape.backward(terms.total)?;
        let grad = tape.grad(x).unwrap_or_else(|| Tensor::zeros(base.shape()));
        touched.extend(tape.touched_models());

        ens.weights = update_weights(&terms.scores)?;
        ens.scores = terms.scores;
        let eta = cfg.eta;
        g = project_kappa(&g.zip_with(&grad, |a, d| a + eta * d)?, cfg.kappa, cfg.norm)?;
        trace.push(TraceRow {
            t: benign.t,
            k,
            l_adv,
            l_str,
            l_total,
            scores: ens.scores.clone(),
            weights: ens.weights.clone(),
            g_norm: cfg.norm.measure(&g),
        });
    }
    Ok(g)
}

/// One guided reverse step: `x̂_{t−1} = unguided + guidance`.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidedStep {
    pub t: usize,
    /// `μ̂_t(x̂_t) + σ_t·z_t`.
    pub unguided: Tensor,
    pub guidance: Tensor,
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    /// Decoded final latent, clamped to `[0, 1]`.
    pub adv_image: Tensor,
    pub final_latent: Tensor,
    /// `x̂_t` for `t = 0..=T`; entries above `t_s` are the benign latents.
    pub latents: Vec<Tensor>,
    pub steps: Vec<GuidedStep>,
    pub trace: Vec<TraceRow>,
    /// Per white-box model similarity of `I_adv` to the target and source.
    pub target_sims: Vec<f64>,
    pub source_sims: Vec<f64>,
    /// Every model that appeared on any gradient tape of this run.
    pub touched_models: BTreeSet<ModelId>,
}

impl AttackResult {
    pub fn guidance_norms(&self, norm: NormKind) -> Vec<(usize, f64)> {
        self.steps
            .iter()
            .map(|s| (s.t, norm.measure(&s.guidance)))
            .collect()
    }

    pub fn trace_csv(&self) -> String {
        let n = self.trace.first().map_or(0, |r| r.scores.len());
        let mut s = String::from("t,k,L_adv,L_str,L_total");
        for i in 0..n {
            let _ = write!(s, ",score_{i}");
        }
        for i in 0..n {
            let _ = write!(s, ",w_{i}");
        }
        s.push_str(",g_norm\n");
        for r in &self.trace {
            let _ = write!(
                s,
                "{},{},{:.9},{:.9},{:.9}",
                r.t, r.k, r.l_adv, r.l_str, r.l_total
            );
            for v in r.scores.iter().chain(&r.weights) {
                let _ = write!(s, ",{v:.9}");
            }
            let _ = writeln!(s, ",{:.9}", r.g_norm);
        }
        s
    }

    pub fn write_trace(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.trace_csv().as_bytes())
    }
}

/// Full attack: invert `I_src`, then guide the reverse chain from `t_s`.
pub fn run_attack(
    source: &Tensor,
    target: &Tensor,
    ctx: &AttackContext,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<AttackResult> {
    let x0 = ctx.codec.encode(source)?;
    let traj = edit_friendly_invert(&x0, ctx.schedule, ctx.denoiser, seed)?;
    run_attack_on(&traj, source, target, ctx, cfg)
}

/// Attack on a precomputed benign trajectory of `source`.
pub fn run_attack_on(
    traj: &DiffusionTrajectory,
    source: &Tensor,
    target: &Tensor,
    ctx: &AttackContext,
    cfg: &GuidanceConfig,
) -> Result<AttackResult> {
    cfg.validate_degenerate()?;
    traj.check_denoiser(ctx.denoiser)?;
    if traj.steps() != cfg.steps || traj.schedule() != ctx.schedule {
        return Err(Error::invalid(format!(
            "trajectory has {} steps, config expects {} with the context schedule",
            traj.steps(),
            cfg.steps
        )));
    }
    if source.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "run_attack",
            left: source.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let anchors = IdentityAnchors::new(ctx.models, source, target)?;
    let mut ens = EnsembleState::uniform(ctx.models.len())?;
    let mut trace = Vec::new();
    let mut touched = BTreeSet::new();
    let mut steps = Vec::with_capacity(cfg.t_s);

    let mut latents: Vec<Tensor> = (0..=traj.steps()).map(|t| traj.x(t).clone()).collect();
    let mut x_hat = traj.x(cfg.t_s).clone();
    for t in (1..=cfg.t_s).rev() {
        let eps = eps_checked(ctx.denoiser, &x_hat, t)?;
        let unguided = reverse_step(&x_hat, traj.z(t), &eps, t, ctx.schedule)?;
        let benign = BenignFeatures::new(ctx.denoiser, traj.x(t), t)?;
        let g = guidance_inner_loop(
            &x_hat,
            &benign,
            &anchors,
            ctx,
            cfg,
            &mut ens,
            &mut trace,
            &mut touched,
        )?;
        x_hat = unguided.zip_with(&g, |a, b| a + b)?;
        latents[t - 1] = x_hat.clone();
        steps.push(GuidedStep {
            t,
            unguided,
            guidance: g,
        });
    }
    let decoded = ctx.codec.decode(&x_hat)?;
    if !decoded.is_finite() {
        return Err(Error::NonFinite {
            context: "decoded adversarial image".into(),
        });
    }
    let adv_image = decoded.map(|v| v.clamp(0.0, 1.0));
    let mut target_sims = Vec::with_capacity(ctx.models.len());
    let mut source_sims = Vec::with_capacity(ctx.models.len());
    for (i, m) in ctx.models.iter().enumerate() {
        let e = m.embed(&adv_image)?;
        target_sims.push(crate::grad::cosine_similarity(
            e.data(),
            anchors.target[i].data(),
        )?);
        source_sims.push(crate::grad::cosine_similarity(
            e.data(),
            anchors.source[i].data(),
        )?);
    }
    Ok(AttackResult {
        adv_image,
        final_latent: x_hat,
        latents,
        steps,
        trace,
        target_sims,
        source_sims,
        touched_models: touched,
    })
}
