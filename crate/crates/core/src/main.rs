use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use advdiff::pipeline::{self, default_out_root, Manifest, RunDir, ABLATION_AXES, KEYS};
use advdiff::{Error, Result};

#[derive(Parser)]
#[command(
    name = "advdiff",
    version,
    about = "Diffusion-guided adversarial identity experiments"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Manifest file of `key = value` lines.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Manifest override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, env = "ADVDIFF_OUT", global = true)]
    out: Option<PathBuf>,
    /// Diffusion steps T.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long = "t-s", global = true)]
    t_s: Option<usize>,
    #[arg(long = "n-a", global = true)]
    n_a: Option<usize>,
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long, global = true)]
    kappa: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// max | l2
    #[arg(long, global = true)]
    norm: Option<String>,
    /// sem-div | naive | target-only
    #[arg(long, global = true)]
    objective: Option<String>,
    /// `all` or e.g. 0;2;4
    #[arg(long = "structure-layers", global = true)]
    structure_layers: Option<String>,
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the synthetic dataset.
    Synth,
    /// Train the codec, denoiser and embedders.
    Train,
    /// Invert the planned source images.
    Invert,
    /// Run the guided attack on every source.
    Attack,
    /// Compute verification, identification, quality and robustness metrics.
    Eval,
    /// Run matched-seed ablations.
    Ablate {
        /// One of sem-div, naive, lambda, t_s, ensemble, or `all`.
        #[arg(long, default_value = "all")]
        axis: String,
    },
    /// Summarize a run directory.
    Report,
    /// Print every manifest key with its default value, as a valid manifest.
    Keys,
}

impl Common {
    fn manifest(&self) -> Result<Manifest> {
        let mut m = match &self.manifest {
            Some(p) => Manifest::load(p)?,
            None => Manifest::default(),
        };
        m.apply_overrides(&self.set)?;
        let mut flags = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                flags.push(format!("{k}={v}"));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("T", self.steps.map(|v| v.to_string()));
        push("t_s", self.t_s.map(|v| v.to_string()));
        push("N_a", self.n_a.map(|v| v.to_string()));
        push("eta", self.eta.map(|v| v.to_string()));
        push("kappa", self.kappa.map(|v| v.to_string()));
        push("lambda", self.lambda.map(|v| v.to_string()));
        push("norm", self.norm.clone());
        push("objective", self.objective.clone());
        push("structure_layers", self.structure_layers.clone());
        push("attack.workers", self.workers.map(|v| v.to_string()));
        m.apply_overrides(&flags)?;
        m.validate()?;
        Ok(m)
    }

    fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(default_out_root)
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Verb::Keys = cli.verb {
        let m = Manifest::default();
        for (key, stage, doc) in KEYS {
            let line = format!("{key} = {}", m.get(key).expect("documented key"));
            println!("{line:<48} # [{}] {doc}", stage.name());
        }
        return Ok(());
    }
    if let Verb::Report = cli.verb {
        let out = cli.common.out();
        if !out.is_dir() {
            return Err(Error::MissingFile(out));
        }
        print!("{}", pipeline::summarize(&out)?.render());
        return Ok(());
    }
    let m = cli.common.manifest()?;
    let dir = RunDir::open(&cli.common.out())?;
    match cli.verb {
        Verb::Synth => {
            let d = pipeline::run_data_stage(&m, &dir)?;
            println!(
                "dataset: {} identities, {} train, {} test -> {}",
                d.num_identities(),
                d.train.len(),
                d.test.len(),
                dir.path("data/dataset.bin").display()
            );
        }
        Verb::Train => {
            let t = pipeline::run_training_stage(&m, &dir)?;
            for (i, e) in t.embedders.iter().enumerate() {
                println!(
                    "embedder_{i} {} width {} accuracy {:.3}",
                    t.role(i),
                    e.config().hidden,
                    e.accuracy
                );
            }
            println!("models -> {}", dir.path("models").display());
        }
        Verb::Invert => {
            let t = pipeline::run_training_stage(&m, &dir)?;
            let p = pipeline::plan(&m, &t.dataset)?;
            let trajs = pipeline::run_invert_stage(&m, &dir, &t, &p)?;
            println!(
                "inverted {} sources -> {}",
                trajs.len(),
                dir.path("trajectories").display()
            );
        }
        Verb::Attack => {
            let t = pipeline::run_training_stage(&m, &dir)?;
            let p = pipeline::plan(&m, &t.dataset)?;
            let trajs = pipeline::run_invert_stage(&m, &dir, &t, &p)?;
            let out = pipeline::run_attack_stage(&m, &dir, &t, &p, &trajs)?;
            let failed = out.iter().filter(|(_, o)| o.is_err()).count();
            println!(
                "attacked {} sources, {failed} failed -> {}",
                out.len(),
                dir.path("attack").display()
            );
        }
        Verb::Eval => {
            pipeline::run_all(&m, &dir)?;
            print!("{}", pipeline::summarize(dir.root())?.render());
        }
        Verb::Ablate { axis } => {
            let axes: Vec<&str> = if axis == "all" {
                ABLATION_AXES.to_vec()
            } else {
                vec![axis.as_str()]
            };
            let t = pipeline::run_training_stage(&m, &dir)?;
            let p = pipeline::plan(&m, &t.dataset)?;
            let trajs = pipeline::run_invert_stage(&m, &dir, &t, &p)?;
            for a in axes {
                let r = pipeline::run_ablation(&m, &dir, &t, &p, &trajs, a)?;
                for row in &r.rows {
                    let asr: Vec<String> = row.asr.iter().map(|v| format!("{v:.3}")).collect();
                    println!(
                        "{a} {}: asr [{}] psnr {} ssim {:.4}",
                        row.setting,
                        asr.join(", "),
                        advdiff::eval::fmt_metric(row.psnr_mean),
                        row.ssim_mean
                    );
                }
            }
        }
        Verb::Report | Verb::Keys => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} msg={msg:?}", e.kind());
            ExitCode::from(1)
        }
    }
}
