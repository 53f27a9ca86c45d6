//! Experiment stages over one run directory:
//!
//! ```text
//! <out>/manifest.cfg            canonical manifest
//! <out>/data/dataset.bin
//! <out>/models/                 checkpoints, training.csv, denoiser_loss.csv
//! <out>/trajectories/src_NNN.traj
//! <out>/attack/                 results.bin, summary.csv, failures.csv,
//!                               adv_NNN.pgm, trace_NNN.csv
//! <out>/eval/                   verification.csv, identification.csv,
//!                               quality.csv, robustness.csv, summary.csv
//! <out>/ablation/<axis>.csv, <axis>_runs.csv
//! <out>/stamps/<stage>          hash of the manifest keys the stage used
//! ```
//!
//! A stage whose stamp matches the manifest reuses its persisted outputs, so
//! re-running a completed stage rewrites nothing.

mod manifest;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;

pub use manifest::{default_out_root, Manifest, Stage, KEYS};

use crate::attack::{run_attack_on, AdvObjective, AttackContext, GuidanceConfig};
use crate::data::{build_dataset, write_pgm, Dataset};
use crate::diffusion::{edit_friendly_invert, DiffusionTrajectory, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::{
    acceptance_rate, fmt_metric, lossy_transform, pair_similarities, psnr, quantile_threshold,
    ssim_default, write_csv, GalleryEmbeddings,
};
use crate::grad::{cosine_similarity, ModelId, Tensor};
use crate::io::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::models::{train_denoiser, train_embedder, Codec, DenoiserNet, Embedder, PcaCodec};
use crate::seed;

const WIDTHS: [usize; 4] = [32, 48, 64, 96];

/// Exclusive handle on a run directory, released on drop.
pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let lock = root.join(".lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
        {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::invalid(format!(
                    "run directory {} is locked by another process (remove {} if stale)",
                    root.display(),
                    lock.display()
                )))
            }
            Err(e) => return Err(Error::io(&lock, e)),
        }
        Ok(RunDir {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn ensure(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn stamp_matches(&self, stage: Stage, hash: u64) -> bool {
        read_file(&self.path(&format!("stamps/{}", stage.name())))
            .map(|b| b == format!("{hash:016x}\n").into_bytes())
            .unwrap_or(false)
    }

    fn stamp(&self, stage: Stage, hash: u64) -> Result<()> {
        self.ensure("stamps")?;
        write_atomic(
            &self.path(&format!("stamps/{}", stage.name())),
            format!("{hash:016x}\n").as_bytes(),
        )
    }

    pub fn write_manifest(&self, m: &Manifest) -> Result<()> {
        write_atomic(&self.path("manifest.cfg"), m.to_text().as_bytes())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

pub fn run_data_stage(m: &Manifest, dir: &RunDir) -> Result<Dataset> {
    m.validate()?;
    dir.write_manifest(m)?;
    let path = dir.path("data/dataset.bin");
    if let Ok(d) = Dataset::load(&path) {
        if d.config == m.dataset {
            return Ok(d);
        }
    }
    let d = build_dataset(&m.dataset)?;
    dir.ensure("data")?;
    d.save(&path)?;
    dir.stamp(Stage::Data, m.stage_hash(Stage::Data))?;
    Ok(d)
}

/// Everything the attack and evaluation stages need from training.
pub struct Trained {
    pub dataset: Dataset,
    pub schedule: NoiseSchedule,
    pub codec: Codec,
    pub denoiser: DenoiserNet,
    pub embedders: Vec<Embedder>,
    pub white_box: usize,
}

impl Trained {
    pub fn white_box(&self) -> Vec<&Embedder> {
        self.embedders[..self.white_box].iter().collect()
    }

    pub fn held_out(&self) -> Vec<&Embedder> {
        self.embedders[self.white_box..].iter().collect()
    }

    pub fn held_out_ids(&self) -> BTreeSet<ModelId> {
        self.held_out().iter().map(|e| e.id()).collect()
    }

    pub fn role(&self, i: usize) -> &'static str {
        if i < self.white_box {
            "white-box"
        } else {
            "held-out"
        }
    }

    /// Attack context over the white-box models only.
    pub fn context<'a>(&'a self, models: &'a [&'a Embedder]) -> AttackContext<'a> {
        AttackContext {
            denoiser: &self.denoiser,
            codec: &self.codec,
            models,
            schedule: &self.schedule,
        }
    }
}

fn embedder_seed(m: &Manifest, i: usize) -> u64 {
    seed::derive(m.seed, &[0xEB, i as u64])
}

fn load_trained(m: &Manifest, dir: &RunDir, dataset: Dataset) -> Result<Trained> {
    let n = m.white_box + m.held_out;
    let embedders = (0..n)
        .map(|i| Embedder::load(&dir.path(&format!("models/embedder_{i}.ckpt"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trained {
        dataset,
        schedule: m.schedule()?,
        codec: Codec::load(&dir.path("models/codec.bin"))?,
        denoiser: DenoiserNet::load(&dir.path("models/denoiser.ckpt"))?,
        embedders,
        white_box: m.white_box,
    })
}

/// Trains (or reloads) the codec, the denoiser and `N_m + held_out`
/// embedders, and checks each embedder against the accuracy target.
pub fn run_training_stage(m: &Manifest, dir: &RunDir) -> Result<Trained> {
    let dataset = run_data_stage(m, dir)?;
    let hash = m.stage_hash(Stage::Train);
    if dir.stamp_matches(Stage::Train, hash) {
        if let Ok(t) = load_trained(m, dir, dataset.clone()) {
            return Ok(t);
        }
    }
    dir.ensure("models")?;
    let schedule = m.schedule()?;
    let train_imgs: Vec<&Tensor> = dataset.train.iter().map(|s| &s.image).collect();
    let test_imgs: Vec<&Tensor> = dataset.test.iter().map(|s| &s.image).collect();
    let codec = if m.codec == "pca" {
        Codec::Pca(PcaCodec::fit(&train_imgs, &test_imgs, m.codec_side)?)
    } else {
        Codec::Identity
    };
    let latents = train_imgs
        .iter()
        .map(|im| codec.encode(im))
        .collect::<Result<Vec<_>>>()?;
    let (denoiser, curve) = train_denoiser(
        &latents,
        &schedule,
        m.denoiser_config(),
        m.denoiser_epochs,
        m.denoiser_batch,
        m.denoiser_lr,
        seed::derive(m.seed, &[0xD1]),
    )
    .map_err(|e| Error::ModelInvalid {
        name: "denoiser".into(),
        reason: e.to_string(),
    })?;

    let mut embedders = Vec::new();
    for i in 0..m.white_box + m.held_out {
        let width = WIDTHS[i % WIDTHS.len()];
        let e = train_embedder(&dataset, width, embedder_seed(m, i), &m.embedder_train)?;
        if e.accuracy < m.target_accuracy {
            return Err(Error::ModelInvalid {
                name: format!("embedder_{i} (width {width})"),
                reason: format!(
                    "held-out accuracy {:.3} below target {:.2}",
                    e.accuracy, m.target_accuracy
                ),
            });
        }
        embedders.push(e);
    }

    let loss_rows: Vec<Vec<String>> = curve
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), format!("{l:.6}")])
        .collect();
    write_csv(
        &dir.path("models/denoiser_loss.csv"),
        &["step", "loss"],
        &loss_rows,
    )?;
    let mut rows = vec![vec![
        "denoiser".into(),
        "denoiser".into(),
        format!("mid_block={}", m.denoiser.mid_block),
        m.denoiser_config().seed.to_string(),
        format!(
            "loss_head={:.6};loss_tail={:.6}",
            curve.head_mean(50),
            curve.tail_mean(50)
        ),
    ]];
    if let Codec::Pca(p) = &codec {
        rows.push(vec![
            "codec".into(),
            "codec".into(),
            format!("side={}", m.codec_side),
            String::new(),
            format!("heldout_psnr={:.4}", p.heldout_psnr),
        ]);
    }
    for (i, e) in embedders.iter().enumerate() {
        rows.push(vec![
            format!("embedder_{i}"),
            if i < m.white_box {
                "white-box"
            } else {
                "held-out"
            }
            .into(),
            format!("width={}", e.config().hidden),
            e.config().seed.to_string(),
            format!(
                "accuracy={:.4};intra_mean={:.4};inter_mean={:.4}",
                e.accuracy, e.intra_mean, e.inter_mean
            ),
        ]);
    }
    write_csv(
        &dir.path("models/training.csv"),
        &["model", "role", "arch", "seed", "metrics"],
        &rows,
    )?;

    codec.save(&dir.path("models/codec.bin"))?;
    denoiser.save(&dir.path("models/denoiser.ckpt"))?;
    for (i, e) in embedders.iter().enumerate() {
        e.save(&dir.path(&format!("models/embedder_{i}.ckpt")))?;
    }
    dir.stamp(Stage::Train, hash)?;
    Ok(Trained {
        dataset,
        schedule,
        codec,
        denoiser,
        embedders,
        white_box: m.white_box,
    })
}

/// One source image and the target identity it impersonates.
#[derive(Clone, Debug)]
pub struct SourceSpec {
    pub index: usize,
    pub label: usize,
    pub image: Tensor,
    pub target_label: usize,
    pub target: Tensor,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Plan {
    pub targets: Vec<(usize, Tensor)>,
    pub sources: Vec<SourceSpec>,
}

/// Targets: the first `attack.targets` identities of a seeded permutation,
/// each represented by its first test render. Sources: test renders of the
/// remaining identities taken round-robin; source `i` impersonates target
/// `i mod targets`.
pub fn plan(m: &Manifest, d: &Dataset) -> Result<Plan> {
    let mut labels: Vec<usize> = (0..d.num_identities()).collect();
    labels.shuffle(&mut seed::rng(m.seed, &[0x7A6]));
    let (tl, others) = labels.split_at(m.targets);
    let first_test = |label: usize, k: usize| {
        d.test
            .iter()
            .filter(|s| s.label == label)
            .nth(k)
            .map(|s| s.image.clone())
    };
    let targets = tl
        .iter()
        .map(|&l| {
            first_test(l, 0)
                .map(|im| (l, im))
                .ok_or_else(|| Error::invalid(format!("identity {l} has no test render")))
        })
        .collect::<Result<Vec<_>>>()?;
    let per_id = d.test.len() / d.num_identities();
    if m.sources > others.len() * per_id {
        return Err(Error::invalid(format!(
            "{} sources requested, only {} non-target test renders",
            m.sources,
            others.len() * per_id
        )));
    }
    let sources = (0..m.sources)
        .map(|i| {
            let label = others[i % others.len()];
            let (target_label, target) = targets[i % targets.len()].clone();
            SourceSpec {
                index: i,
                label,
                image: first_test(label, i / others.len()).expect("bounded above"),
                target_label,
                target,
                seed: seed::derive(m.seed, &[0x1A, i as u64]),
            }
        })
        .collect();
    Ok(Plan { targets, sources })
}

fn traj_path(dir: &RunDir, i: usize) -> PathBuf {
    dir.path(&format!("trajectories/src_{i:03}.traj"))
}

/// Inverts every source; persisted trajectories are reused when they match
/// the current denoiser and schedule.
pub fn run_invert_stage(
    m: &Manifest,
    dir: &RunDir,
    trained: &Trained,
    plan: &Plan,
) -> Result<Vec<DiffusionTrajectory>> {
    let hash = m.stage_hash(Stage::Invert);
    let fresh = dir.stamp_matches(Stage::Invert, hash);
    dir.ensure("trajectories")?;
    let mut out = Vec::with_capacity(plan.sources.len());
    for s in &plan.sources {
        let p = traj_path(dir, s.index);
        let cached = if fresh {
            DiffusionTrajectory::load(&p).ok().filter(|t| {
                t.check_denoiser(&trained.denoiser).is_ok()
                    && t.schedule() == &trained.schedule
                    && t.seed() == s.seed
            })
        } else {
            None
        };
        let traj = match cached {
            Some(t) => t,
            None => {
                let x0 = trained.codec.encode(&s.image)?;
                let t = edit_friendly_invert(&x0, &trained.schedule, &trained.denoiser, s.seed)?;
                t.save(&p)?;
                t
            }
        };
        out.push(traj);
    }
    dir.stamp(Stage::Invert, hash)?;
    Ok(out)
}

/// What is kept of one attack.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredResult {
    pub source: usize,
    pub adv_image: Tensor,
    pub final_latent: Tensor,
    pub target_sims: Vec<f64>,
    pub source_sims: Vec<f64>,
    pub max_guidance: f64,
    pub trace_rows: usize,
    pub touched: Vec<ModelId>,
}

/// Per-source outcome: a result or the error that stopped it.
pub type Outcome = std::result::Result<StoredResult, String>;

const RESULTS_MAGIC: &[u8; 8] = b"ADVRSLT\0";
const RESULTS_VERSION: u32 = 1;

/// Binary container: count, then per source its index, a status flag and
/// either the error text or the stored tensors and statistics.
pub fn encode_results(outcomes: &[(usize, Outcome)]) -> Vec<u8> {
    let mut w = ByteWriter::with_header(RESULTS_MAGIC, RESULTS_VERSION);
    w.u64(outcomes.len() as u64);
    for (i, o) in outcomes {
        w.u64(*i as u64);
        match o {
            Err(e) => {
                w.u64(0).str(e);
            }
            Ok(r) => {
                w.u64(1)
                    .tensor(&r.adv_image)
                    .tensor(&r.final_latent)
                    .u64(r.target_sims.len() as u64)
                    .f64s(&r.target_sims)
                    .f64s(&r.source_sims)
                    .f64(r.max_guidance)
                    .u64(r.trace_rows as u64)
                    .u64(r.touched.len() as u64);
                for id in &r.touched {
                    w.u64(*id);
                }
            }
        }
    }
    w.finish()
}

pub fn decode_results(bytes: &[u8]) -> Result<Vec<(usize, Outcome)>> {
    let mut r = ByteReader::open("attack results", bytes, RESULTS_MAGIC, RESULTS_VERSION)?;
    let n = r.usize()?;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let i = r.usize()?;
        let o = match r.u64()? {
            0 => Err(r.str()?),
            1 => {
                let adv_image = r.tensor()?;
                let final_latent = r.tensor()?;
                let k = r.usize()?;
                let target_sims = r.f64s(k)?;
                let source_sims = r.f64s(k)?;
                let max_guidance = r.f64()?;
                let trace_rows = r.usize()?;
                let t = r.usize()?;
                let touched = (0..t).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
                Ok(StoredResult {
                    source: i,
                    adv_image,
                    final_latent,
                    target_sims,
                    source_sims,
                    max_guidance,
                    trace_rows,
                    touched,
                })
            }
            other => {
                return Err(Error::format(
                    "attack results",
                    format!("bad status {other}"),
                ))
            }
        };
        out.push((i, o));
    }
    r.finish()?;
    Ok(out)
}

/// Attacks `sources` with `models` as the white-box ensemble. Sources run
/// on up to `workers` threads; a failing source is recorded and the rest
/// continue. Returns outcomes in source order, plus the full traces.
pub fn attack_batch(
    trained: &Trained,
    models: &[&Embedder],
    sources: &[&SourceSpec],
    trajs: &[&DiffusionTrajectory],
    cfg: &GuidanceConfig,
    workers: usize,
) -> Vec<(usize, Outcome, String)> {
    let held_out = trained.held_out_ids();
    let ctx = trained.context(models);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<(usize, Outcome, String)>>> = Mutex::new(vec![None; sources.len()]);
    let work = || loop {
        let k = next.fetch_add(1, Ordering::SeqCst);
        if k >= sources.len() {
            break;
        }
        let s = sources[k];
        let res = run_attack_on(trajs[k], &s.image, &s.target, &ctx, cfg).and_then(|r| {
            if let Some(id) = r.touched_models.iter().find(|id| held_out.contains(id)) {
                return Err(Error::invalid(format!(
                    "held-out model {id:016x} reached a gradient tape"
                )));
            }
            Ok(r)
        });
        let entry = match res {
            Ok(r) => {
                let csv = r.trace_csv();
                let stored = StoredResult {
                    source: s.index,
                    max_guidance: r
                        .steps
                        .iter()
                        .map(|st| cfg.norm.measure(&st.guidance))
                        .fold(0.0, f64::max),
                    trace_rows: r.trace.len(),
                    touched: r.touched_models.iter().copied().collect(),
                    adv_image: r.adv_image,
                    final_latent: r.final_latent,
                    target_sims: r.target_sims,
                    source_sims: r.source_sims,
                };
                (s.index, Ok(stored), csv)
            }
            Err(e) => (s.index, Err(e.to_string()), String::new()),
        };
        slots.lock().expect("no poisoned workers")[k] = Some(entry);
    };
    let workers = workers.clamp(1, sources.len().max(1));
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|sc| {
            for _ in 0..workers {
                sc.spawn(work);
            }
        });
    }
    slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|o| o.expect("every slot filled"))
        .collect()
}

/// Attacks every planned source; results, traces, images and a failure
/// ledger are persisted under `attack/`.
pub fn run_attack_stage(
    m: &Manifest,
    dir: &RunDir,
    trained: &Trained,
    plan: &Plan,
    trajs: &[DiffusionTrajectory],
) -> Result<Vec<(usize, Outcome)>> {
    m.guidance.validate_degenerate()?;
    let hash = m.stage_hash(Stage::Attack);
    let results_path = dir.path("attack/results.bin");
    if dir.stamp_matches(Stage::Attack, hash) {
        if let Ok(r) = read_file(&results_path).and_then(|b| decode_results(&b)) {
            if r.len() == plan.sources.len() {
                return Ok(r);
            }
        }
    }
    dir.ensure("attack")?;
    let white = trained.white_box();
    let sources: Vec<&SourceSpec> = plan.sources.iter().collect();
    let traj_refs: Vec<&DiffusionTrajectory> = trajs.iter().collect();
    let batch = attack_batch(
        trained,
        &white,
        &sources,
        &traj_refs,
        &m.guidance,
        m.workers,
    );

    let mut summary = Vec::new();
    let mut failures = Vec::new();
    for ((i, o, csv), s) in batch.iter().zip(&plan.sources) {
        match o {
            Ok(r) => {
                write_pgm(&dir.path(&format!("attack/adv_{i:03}.pgm")), &r.adv_image)?;
                write_atomic(
                    &dir.path(&format!("attack/trace_{i:03}.csv")),
                    csv.as_bytes(),
                )?;
                let mut row = vec![
                    i.to_string(),
                    s.label.to_string(),
                    s.target_label.to_string(),
                    "ok".into(),
                    format!("{:.6}", r.max_guidance),
                ];
                row.push(
                    r.target_sims
                        .iter()
                        .map(|v| format!("{v:.6}"))
                        .collect::<Vec<_>>()
                        .join(";"),
                );
                row.push(
                    r.source_sims
                        .iter()
                        .map(|v| format!("{v:.6}"))
                        .collect::<Vec<_>>()
                        .join(";"),
                );
                summary.push(row);
            }
            Err(e) => {
                failures.push(vec![i.to_string(), e.replace([',', '\n'], " ")]);
                summary.push(vec![
                    i.to_string(),
                    s.label.to_string(),
                    s.target_label.to_string(),
                    "failed".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                ]);
            }
        }
    }
    write_csv(
        &dir.path("attack/summary.csv"),
        &[
            "source",
            "source_label",
            "target_label",
            "status",
            "max_guidance",
            "target_sims",
            "source_sims",
        ],
        &summary,
    )?;
    write_csv(
        &dir.path("attack/failures.csv"),
        &["source", "error"],
        &failures,
    )?;
    let outcomes: Vec<(usize, Outcome)> = batch.into_iter().map(|(i, o, _)| (i, o)).collect();
    write_atomic(&results_path, &encode_results(&outcomes))?;
    dir.stamp(Stage::Attack, hash)?;
    Ok(outcomes)
}

/// Per-model thresholds from seeded cross-identity test pairs, plus the FAR
/// measured at that threshold on a second, disjointly seeded pair set.
pub fn calibrate_all(m: &Manifest, trained: &Trained) -> Result<Vec<(f64, f64)>> {
    let sample = |tag: u64| -> Vec<(&Tensor, &Tensor)> {
        let test = &trained.dataset.test;
        let mut rng = seed::rng(m.seed, &[0xFA, tag]);
        let mut pairs = Vec::with_capacity(m.impostor_pairs);
        while pairs.len() < m.impostor_pairs {
            let (i, j) = (
                rng.random_range(0..test.len()),
                rng.random_range(0..test.len()),
            );
            if test[i].label != test[j].label {
                pairs.push((&test[i].image, &test[j].image));
            }
        }
        pairs
    };
    if m.impostor_pairs < crate::eval::MIN_IMPOSTOR_PAIRS {
        return Err(Error::Manifest(format!(
            "eval.impostor_pairs {} below {}",
            m.impostor_pairs,
            crate::eval::MIN_IMPOSTOR_PAIRS
        )));
    }
    let (cal, fresh) = (sample(0), sample(1));
    trained
        .embedders
        .iter()
        .map(|e| {
            let tau = quantile_threshold(&pair_similarities(e, &cal)?, m.far)?;
            let measured = acceptance_rate(&pair_similarities(e, &fresh)?, tau);
            Ok((tau, measured))
        })
        .collect()
}

/// Aggregates for one embedder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelMetrics {
    pub name: String,
    pub role: &'static str,
    pub threshold: f64,
    pub far_measured: f64,
    pub asr_clean: f64,
    pub asr_adv: f64,
    pub rank1_clean: f64,
    pub rank1_adv: f64,
    pub rankn_clean: f64,
    pub rankn_adv: f64,
    /// `(transform label, ASR)`.
    pub robust: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub models: Vec<ModelMetrics>,
    pub rank_n: usize,
    pub psnr_mean: f64,
    /// Results whose PSNR is the infinite sentinel; excluded from the mean.
    pub psnr_infinite: usize,
    pub ssim_mean: f64,
    pub evaluated: usize,
    pub failures: usize,
}

impl EvalReport {
    pub fn white_box(&self) -> impl Iterator<Item = &ModelMetrics> {
        self.models.iter().filter(|m| m.role == "white-box")
    }

    pub fn held_out(&self) -> impl Iterator<Item = &ModelMetrics> {
        self.models.iter().filter(|m| m.role == "held-out")
    }

    pub fn summary_rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        let mut push = |metric: &str, model: &str, role: &str, v: f64| {
            rows.push(vec![
                metric.to_string(),
                model.to_string(),
                role.to_string(),
                fmt_metric(v),
            ]);
        };
        for mm in &self.models {
            push("threshold", &mm.name, mm.role, mm.threshold);
            push("far_measured", &mm.name, mm.role, mm.far_measured);
            push("asr_clean", &mm.name, mm.role, mm.asr_clean);
            push("asr_adv", &mm.name, mm.role, mm.asr_adv);
            push("rank1_clean", &mm.name, mm.role, mm.rank1_clean);
            push("rank1_adv", &mm.name, mm.role, mm.rank1_adv);
            push(
                &format!("rank{}_clean", self.rank_n),
                &mm.name,
                mm.role,
                mm.rankn_clean,
            );
            push(
                &format!("rank{}_adv", self.rank_n),
                &mm.name,
                mm.role,
                mm.rankn_adv,
            );
            for (label, v) in &mm.robust {
                push(&format!("asr_{label}"), &mm.name, mm.role, *v);
            }
        }
        push("psnr_mean", "all", "-", self.psnr_mean);
        push("psnr_infinite", "all", "-", self.psnr_infinite as f64);
        push("ssim_mean", "all", "-", self.ssim_mean);
        push("evaluated", "all", "-", self.evaluated as f64);
        push("failures", "all", "-", self.failures as f64);
        rows
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Verification, identification, quality and robustness metrics for the
/// successful attacks in `outcomes`.
pub fn evaluate(
    m: &Manifest,
    trained: &Trained,
    plan: &Plan,
    outcomes: &[(usize, Outcome)],
) -> Result<(EvalReport, EvalTables)> {
    let ok: Vec<(&SourceSpec, &StoredResult)> = outcomes
        .iter()
        .filter_map(|(i, o)| o.as_ref().ok().map(|r| (&plan.sources[*i], r)))
        .collect();
    if ok.is_empty() {
        return Err(Error::invalid("no successful attack results to evaluate"));
    }
    let thresholds = calibrate_all(m, trained)?;

    let mut gallery_labels: Vec<usize> = plan.sources.iter().map(|s| s.label).collect();
    gallery_labels.extend(plan.targets.iter().map(|t| t.0));
    gallery_labels.sort_unstable();
    gallery_labels.dedup();
    let gallery_imgs: Vec<&Tensor> = gallery_labels
        .iter()
        .map(|&l| {
            trained
                .dataset
                .train
                .iter()
                .find(|s| s.label == l)
                .map(|s| &s.image)
                .ok_or_else(|| Error::invalid(format!("identity {l} has no train render")))
        })
        .collect::<Result<_>>()?;

    let mut tables = EvalTables::default();
    let mut models = Vec::new();
    for (mi, e) in trained.embedders.iter().enumerate() {
        let (tau, far_measured) = thresholds[mi];
        let name = format!("embedder_{mi}");
        let role = trained.role(mi);
        let gallery = GalleryEmbeddings {
            labels: gallery_labels.clone(),
            embeddings: e.embed_batch(&gallery_imgs)?,
        };
        let clean: Vec<&Tensor> = ok.iter().map(|(s, _)| &s.image).collect();
        let adv: Vec<&Tensor> = ok.iter().map(|(_, r)| &r.adv_image).collect();
        let tgts: Vec<&Tensor> = ok.iter().map(|(s, _)| &s.target).collect();
        let (ec, ea, et) = (
            e.embed_batch(&clean)?,
            e.embed_batch(&adv)?,
            e.embed_batch(&tgts)?,
        );
        let (mut acc_c, mut acc_a, mut r1c, mut r1a, mut rnc, mut rna) = (0, 0, 0, 0, 0, 0);
        for (k, (s, _)) in ok.iter().enumerate() {
            let sc = cosine_similarity(&ec[k], &et[k])?;
            let sa = cosine_similarity(&ea[k], &et[k])?;
            let rc = gallery.rank_of(&ec[k], s.target_label)?;
            let ra = gallery.rank_of(&ea[k], s.target_label)?;
            acc_c += (sc > tau) as usize;
            acc_a += (sa > tau) as usize;
            r1c += (rc <= 1) as usize;
            r1a += (ra <= 1) as usize;
            rnc += (rc <= m.rank_n) as usize;
            rna += (ra <= m.rank_n) as usize;
            tables.verification.push(vec![
                s.index.to_string(),
                s.label.to_string(),
                s.target_label.to_string(),
                name.clone(),
                role.into(),
                format!("{tau:.6}"),
                format!("{sc:.6}"),
                format!("{sa:.6}"),
                ((sc > tau) as u8).to_string(),
                ((sa > tau) as u8).to_string(),
            ]);
            tables.identification.push(vec![
                s.index.to_string(),
                s.target_label.to_string(),
                name.clone(),
                role.into(),
                rc.to_string(),
                ra.to_string(),
            ]);
        }
        let mut robust = Vec::new();
        for kind in &m.lossy {
            let transformed = adv
                .iter()
                .map(|im| lossy_transform(*kind, im))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor> = transformed.iter().collect();
            let emb = e.embed_batch(&refs)?;
            let mut hits = 0;
            for (k, (s, _)) in ok.iter().enumerate() {
                let sim = cosine_similarity(&emb[k], &et[k])?;
                hits += (sim > tau) as usize;
                tables.robustness.push(vec![
                    s.index.to_string(),
                    name.clone(),
                    role.into(),
                    kind.label(),
                    format!("{sim:.6}"),
                    ((sim > tau) as u8).to_string(),
                ]);
            }
            robust.push((kind.label(), hits as f64 / ok.len() as f64));
        }
        let n = ok.len() as f64;
        models.push(ModelMetrics {
            name,
            role,
            threshold: tau,
            far_measured,
            asr_clean: acc_c as f64 / n,
            asr_adv: acc_a as f64 / n,
            rank1_clean: r1c as f64 / n,
            rank1_adv: r1a as f64 / n,
            rankn_clean: rnc as f64 / n,
            rankn_adv: rna as f64 / n,
            robust,
        });
    }

    let mut psnrs = Vec::new();
    let mut ssims = Vec::new();
    let mut infinite = 0;
    for (s, r) in &ok {
        let p = psnr(&s.image, &r.adv_image)?;
        let q = ssim_default(&s.image, &r.adv_image)?;
        if p.is_finite() {
            psnrs.push(p);
        } else {
            infinite += 1;
        }
        ssims.push(q);
        tables
            .quality
            .push(vec![s.index.to_string(), fmt_metric(p), format!("{q:.6}")]);
    }
    let report = EvalReport {
        models,
        rank_n: m.rank_n,
        psnr_mean: if psnrs.is_empty() {
            f64::INFINITY
        } else {
            mean(&psnrs)
        },
        psnr_infinite: infinite,
        ssim_mean: mean(&ssims),
        evaluated: ok.len(),
        failures: outcomes.len() - ok.len(),
    };
    Ok((report, tables))
}

/// Per-row CSV tables behind an [`EvalReport`].
#[derive(Clone, Debug, Default)]
pub struct EvalTables {
    pub verification: Vec<Vec<String>>,
    pub identification: Vec<Vec<String>>,
    pub quality: Vec<Vec<String>>,
    pub robustness: Vec<Vec<String>>,
}

pub const SUMMARY_HEADER: [&str; 4] = ["metric", "model", "role", "value"];

pub fn run_eval_stage(
    m: &Manifest,
    dir: &RunDir,
    trained: &Trained,
    plan: &Plan,
    outcomes: &[(usize, Outcome)],
) -> Result<EvalReport> {
    let (report, t) = evaluate(m, trained, plan, outcomes)?;
    let hash = m.stage_hash(Stage::Eval);
    if dir.stamp_matches(Stage::Eval, hash)
        && dir.stamp_matches(Stage::Attack, m.stage_hash(Stage::Attack))
        && dir.path("eval/report.txt").exists()
    {
        return Ok(report);
    }
    dir.ensure("eval")?;
    write_csv(
        &dir.path("eval/verification.csv"),
        &[
            "source",
            "source_label",
            "target_label",
            "model",
            "role",
            "threshold",
            "sim_clean",
            "sim_adv",
            "accept_clean",
            "accept_adv",
        ],
        &t.verification,
    )?;
    write_csv(
        &dir.path("eval/identification.csv"),
        &[
            "source",
            "target_label",
            "model",
            "role",
            "rank_clean",
            "rank_adv",
        ],
        &t.identification,
    )?;
    write_csv(
        &dir.path("eval/quality.csv"),
        &["source", "psnr", "ssim"],
        &t.quality,
    )?;
    write_csv(
        &dir.path("eval/robustness.csv"),
        &["source", "model", "role", "transform", "sim_adv", "accept"],
        &t.robustness,
    )?;
    write_csv(
        &dir.path("eval/summary.csv"),
        &SUMMARY_HEADER,
        &report.summary_rows(),
    )?;
    let mut header = String::new();
    let _ = writeln!(
        header,
        "# protocol: thresholds at FAR {} from {} seeded cross-identity test pairs per model;",
        m.far, m.impostor_pairs
    );
    let _ = writeln!(
        header,
        "# closed-set gallery of one train render per source/target identity ({} entries), ties in insertion order;",
        plan.sources.iter().map(|s| s.label).chain(plan.targets.iter().map(|t| t.0)).collect::<BTreeSet<_>>().len()
    );
    let _ = writeln!(
        header,
        "# PSNR/SSIM against the source image (SSIM window 8, uniform); mid block {}.",
        m.denoiser.mid_block
    );
    header.push_str(&m.to_text());
    write_atomic(&dir.path("eval/report.txt"), header.as_bytes())?;
    dir.stamp(Stage::Eval, hash)?;
    Ok(report)
}

/// Runs every stage in order.
pub fn run_all(m: &Manifest, dir: &RunDir) -> Result<EvalReport> {
    let trained = run_training_stage(m, dir)?;
    let p = plan(m, &trained.dataset)?;
    let trajs = run_invert_stage(m, dir, &trained, &p)?;
    let outcomes = run_attack_stage(m, dir, &trained, &p, &trajs)?;
    run_eval_stage(m, dir, &trained, &p, &outcomes)
}

pub const ABLATION_AXES: [&str; 5] = ["sem-div", "naive", "lambda", "t_s", "ensemble"];

/// Aggregates of one ablation setting over matched sources.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub runs: usize,
    pub failures: usize,
    /// Verification ASR per embedder, in embedder order.
    pub asr: Vec<f64>,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    /// Mean white-box similarity to the target.
    pub score_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub axis: String,
    pub roles: Vec<&'static str>,
    pub rows: Vec<AblationRow>,
    /// `(setting, source, psnr, ssim)` for every run, paired by source.
    pub paired: Vec<(String, usize, f64, f64)>,
}

impl AblationReport {
    pub fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    pub fn white_asr(&self, row: &AblationRow) -> Vec<f64> {
        row.asr
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| **r == "white-box")
            .map(|(a, _)| *a)
            .collect()
    }

    pub fn held_out_asr(&self, row: &AblationRow) -> Vec<f64> {
        row.asr
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| **r == "held-out")
            .map(|(a, _)| *a)
            .collect()
    }
}

fn fmt_setting(v: f64) -> String {
    format!("{v}")
}

/// Matched-seed attack batches along one axis: `sem-div` (divergence term
/// on/off), `naive` (refined vs naive objective), `lambda`, `t_s` (fractions
/// of T) or `ensemble` (all white-box models vs the first only).
pub fn run_ablation(
    m: &Manifest,
    dir: &RunDir,
    trained: &Trained,
    plan: &Plan,
    trajs: &[DiffusionTrajectory],
    axis: &str,
) -> Result<AblationReport> {
    let base = m.guidance.clone();
    let white = trained.white_box();
    let first = vec![white[0]];
    let settings: Vec<(String, GuidanceConfig, bool)> = match axis {
        "sem-div" => vec![
            ("on".into(), base.clone(), false),
            (
                "off".into(),
                GuidanceConfig {
                    objective: AdvObjective::TargetOnly,
                    ..base.clone()
                },
                false,
            ),
        ],
        "naive" => vec![
            (
                "refined".into(),
                GuidanceConfig {
                    objective: AdvObjective::SemanticDivergence,
                    ..base.clone()
                },
                false,
            ),
            (
                "naive".into(),
                GuidanceConfig {
                    objective: AdvObjective::Naive,
                    ..base.clone()
                },
                false,
            ),
        ],
        "lambda" => m
            .ablation_lambda
            .iter()
            .map(|&l| {
                (
                    fmt_setting(l),
                    GuidanceConfig {
                        lambda: l,
                        ..base.clone()
                    },
                    false,
                )
            })
            .collect(),
        "t_s" => m
            .ablation_t_s
            .iter()
            .map(|&f| {
                let t_s = ((f * base.steps as f64).round() as usize).clamp(1, base.steps);
                (
                    t_s.to_string(),
                    GuidanceConfig {
                        t_s,
                        ..base.clone()
                    },
                    false,
                )
            })
            .collect(),
        "ensemble" => vec![
            ("ensemble".into(), base.clone(), false),
            ("single".into(), base.clone(), true),
        ],
        other => {
            return Err(Error::invalid(format!(
                "unknown ablation axis `{other}` (expected one of {})",
                ABLATION_AXES.join(", ")
            )))
        }
    };
    let n = m.ablation_sources.min(plan.sources.len());
    let sources: Vec<&SourceSpec> = plan.sources[..n].iter().collect();
    let traj_refs: Vec<&DiffusionTrajectory> = trajs[..n].iter().collect();
    let thresholds = calibrate_all(m, trained)?;
    let roles: Vec<&'static str> = (0..trained.embedders.len())
        .map(|i| trained.role(i))
        .collect();

    let mut rows = Vec::new();
    let mut paired = Vec::new();
    for (label, cfg, single) in &settings {
        let models: &[&Embedder] = if *single { &first } else { &white };
        let batch = attack_batch(trained, models, &sources, &traj_refs, cfg, m.workers);
        let ok: Vec<(&SourceSpec, &StoredResult)> = batch
            .iter()
            .filter_map(|(i, o, _)| o.as_ref().ok().map(|r| (&plan.sources[*i], r)))
            .collect();
        let mut asr = Vec::new();
        let mut scores = Vec::new();
        for (mi, e) in trained.embedders.iter().enumerate() {
            let adv: Vec<&Tensor> = ok.iter().map(|(_, r)| &r.adv_image).collect();
            let tg: Vec<&Tensor> = ok.iter().map(|(s, _)| &s.target).collect();
            let (ea, et) = (e.embed_batch(&adv)?, e.embed_batch(&tg)?);
            let sims = ea
                .iter()
                .zip(&et)
                .map(|(a, b)| cosine_similarity(a, b))
                .collect::<Result<Vec<_>>>()?;
            asr.push(acceptance_rate(&sims, thresholds[mi].0));
            if roles[mi] == "white-box" {
                scores.extend(sims);
            }
        }
        let mut ps = Vec::new();
        let mut ss = Vec::new();
        for (s, r) in &ok {
            let p = psnr(&s.image, &r.adv_image)?;
            let q = ssim_default(&s.image, &r.adv_image)?;
            if p.is_finite() {
                ps.push(p);
            }
            ss.push(q);
            paired.push((label.clone(), s.index, p, q));
        }
        rows.push(AblationRow {
            setting: label.clone(),
            runs: ok.len(),
            failures: batch.len() - ok.len(),
            asr,
            psnr_mean: if ps.is_empty() {
                f64::INFINITY
            } else {
                mean(&ps)
            },
            ssim_mean: mean(&ss),
            score_mean: mean(&scores),
        });
    }

    let report = AblationReport {
        axis: axis.to_string(),
        roles,
        rows,
        paired,
    };
    dir.ensure("ablation")?;
    let mut header = vec![
        "axis".to_string(),
        "setting".into(),
        "runs".into(),
        "failures".into(),
    ];
    for i in 0..trained.embedders.len() {
        header.push(format!("asr_embedder_{i}_{}", trained.role(i)));
    }
    header.extend(["psnr_mean".into(), "ssim_mean".into(), "score_mean".into()]);
    let hdr: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![
                axis.to_string(),
                r.setting.clone(),
                r.runs.to_string(),
                r.failures.to_string(),
            ];
            row.extend(r.asr.iter().map(|a| format!("{a:.6}")));
            row.extend([
                fmt_metric(r.psnr_mean),
                format!("{:.6}", r.ssim_mean),
                format!("{:.6}", r.score_mean),
            ]);
            row
        })
        .collect();
    write_csv(&dir.path(&format!("ablation/{axis}.csv")), &hdr, &rows)?;
    let runs: Vec<Vec<String>> = report
        .paired
        .iter()
        .map(|(s, i, p, q)| vec![s.clone(), i.to_string(), fmt_metric(*p), format!("{q:.6}")])
        .collect();
    write_csv(
        &dir.path(&format!("ablation/{axis}_runs.csv")),
        &["setting", "source", "psnr", "ssim"],
        &runs,
    )?;
    Ok(report)
}

/// Summary of a run directory as printed by the `report` verb.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    /// `(metric, model, role, value)` rows of `eval/summary.csv`.
    pub metrics: Vec<(String, String, String, String)>,
    pub csv_files: Vec<PathBuf>,
    /// Stages whose outputs are missing.
    pub gaps: Vec<&'static str>,
}

impl RunSummary {
    pub fn is_empty(&self) -> bool {
        self.metrics.is_empty() && self.csv_files.is_empty()
    }

    pub fn value(&self, metric: &str, model: &str) -> Option<&str> {
        self.metrics
            .iter()
            .find(|r| r.0 == metric && r.1 == model)
            .map(|r| r.3.as_str())
    }

    pub fn render(&self) -> String {
        if self.is_empty() {
            return "no stages found\n".into();
        }
        let mut s = String::new();
        if !self.metrics.is_empty() {
            let _ = writeln!(s, "{:<20} {:<12} {:<10} value", "metric", "model", "role");
            for (metric, model, role, v) in &self.metrics {
                let _ = writeln!(s, "{metric:<20} {model:<12} {role:<10} {v}");
            }
        }
        for g in &self.gaps {
            let _ = writeln!(s, "missing: {g}");
        }
        for f in &self.csv_files {
            let _ = writeln!(s, "csv: {}", f.display());
        }
        s
    }
}

pub fn summarize(run: &Path) -> Result<RunSummary> {
    let mut csv_files = Vec::new();
    for sub in ["models", "attack", "eval", "ablation"] {
        if let Ok(entries) = fs::read_dir(run.join(sub)) {
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .filter(|p| {
                    !p.file_name()
                        .is_some_and(|n| n.to_string_lossy().starts_with("trace_"))
                })
                .collect();
            found.sort();
            csv_files.extend(found);
        }
    }
    let mut gaps = Vec::new();
    for (stage, marker) in [
        ("train", "models/training.csv"),
        ("attack", "attack/summary.csv"),
        ("eval", "eval/summary.csv"),
    ] {
        if !run.join(marker).exists() {
            gaps.push(stage);
        }
    }
    let mut metrics = Vec::new();
    if let Ok(bytes) = read_file(&run.join("eval/summary.csv")) {
        let text = String::from_utf8_lossy(&bytes);
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() == 4 {
                metrics.push((f[0].into(), f[1].into(), f[2].into(), f[3].into()));
            }
        }
    }
    Ok(RunSummary {
        metrics,
        csv_files,
        gaps,
    })
}
