//! Command-line harness: dataset generation, training, evaluation and
//! curvature probing.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::curvature::{
    power_iteration, CurvatureSample, CurvatureTrace, PowerIterConfig, DEFAULT_MAX_ITERS, DEFAULT_THR,
};
use crate::embedmodel::EmbeddingNet;
use crate::error::{invalid, Error};
use crate::evalsuite::{self, DEFAULT_FARS};
use crate::losses::{self, LossConfig, PrototypeSet};
use crate::rngs::{self, Stream};
use crate::synthdata::{
    self, Regime, SampledDataset, UniverseParams, DEFAULT_NOISE_SCALE, DEFAULT_VARIATIONS, DEFAULT_VARIATION_STRENGTH,
};
use crate::trainer::{Batch, Trainer, DEFAULT_BATCH_IDS};

pub use config::{DataSource, EvalSpec, ExperimentConfig};

pub const THREADS_ENV: &str = "MASSTLAB_THREADS";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CHECKPOINT_FILE: &str = "probe.ckpt";
pub const TRAIN_LOG_FILE: &str = "train.csv";
pub const CURVATURE_FILE: &str = "curvature.csv";
pub const EVAL_FILE: &str = "eval.csv";

#[derive(Debug, Parser)]
#[command(name = "masstlab", version, about = "Semi-siamese training laboratory on synthetic identity data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    Gen(GenArgs),
    /// Train from a config file.
    Train(TrainArgs),
    /// Evaluate a probe checkpoint on a dataset.
    Eval(EvalArgs),
    /// Estimate the principal Hessian eigenvalue of a checkpoint's loss.
    Curvature(CurvatureArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub ids: usize,
    #[arg(long, default_value_t = crate::trainer::DEFAULT_INPUT_DIM)]
    pub dim: usize,
    /// deep:<depth> | shallow | longtail:<r>
    #[arg(long, default_value = "shallow")]
    pub regime: Regime,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_NOISE_SCALE)]
    pub noise: f64,
    #[arg(long, default_value_t = DEFAULT_VARIATIONS)]
    pub variations: usize,
    #[arg(long, default_value_t = DEFAULT_VARIATION_STRENGTH)]
    pub variation_strength: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config file (flat key = value).
    pub config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FARS.to_vec())]
    pub fars: Vec<f64>,
    /// Use the last N identities as identification distractors.
    #[arg(long, default_value_t = 0)]
    pub distractor_ids: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurvatureArgs {
    #[arg(long, required_unless_present = "selftest")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "selftest")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THR)]
    pub thr: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_BATCH_IDS)]
    pub batch_ids: usize,
    /// Number of independent probe batches (one CSV row each).
    #[arg(long, default_value_t = 1)]
    pub probes: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run the built-in diag(1, 2, 5) quadratic instead of a checkpoint.
    #[arg(long)]
    pub selftest: bool,
}

/// A runtime failure tagged with the module that raised it.
#[derive(Debug)]
pub struct Failure {
    pub module: &'static str,
    pub error: Error,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.module, self.error)
    }
}

fn tag(module: &'static str) -> impl FnOnce(Error) -> Failure {
    move |error| Failure { module, error }
}

type CmdResult<T> = std::result::Result<T, Failure>;

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let threads = match std::env::var(THREADS_ENV) {
        Err(_) => 1,
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got `{v}`");
                return 2;
            }
        },
    };
    // A global pool can only be installed once per process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();

    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a.config, a.out_dir.as_deref()),
        Command::Eval(a) => cmd_eval(&a),
        Command::Curvature(a) => cmd_curvature(&a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure { module: "usage", error }) => {
            eprintln!("error: {error}");
            2
        }
        Err(f) => {
            eprintln!("error: {f}");
            1
        }
    }
}

fn write_file(path: &Path, contents: &str) -> CmdResult<()> {
    fs::write(path, contents)
        .map_err(|e| Failure { module: "io", error: Error::Io(format!("{}: {e}", path.display())) })
}

pub fn cmd_gen(a: &GenArgs) -> CmdResult<()> {
    let params =
        UniverseParams { noise_scale: a.noise, num_variations: a.variations, variation_strength: a.variation_strength };
    let universe = synthdata::generate_universe_with(a.ids, a.dim, a.seed, &params).map_err(tag("synthdata"))?;
    let data = synthdata::sample_dataset(&universe, a.regime);
    data.save(&a.out).map_err(tag("io"))?;
    let counts = data.counts();
    println!(
        "wrote {} samples for {} identities ({}) to {}; per-identity count min {} max {}",
        data.len(),
        data.num_ids(),
        data.regime(),
        a.out.display(),
        counts.iter().min().copied().unwrap_or(0),
        counts.iter().max().copied().unwrap_or(0)
    );
    Ok(())
}

/// Runs one configured experiment and writes its artifacts into the output
/// directory. The manifest is written last.
pub fn cmd_train(config_path: &Path, out_dir: Option<&Path>) -> CmdResult<()> {
    let started = Instant::now();
    let cfg = ExperimentConfig::load(config_path).map_err(tag("config"))?;
    let dir = match out_dir.map(Path::to_path_buf).or_else(|| cfg.output_dir.clone()) {
        Some(d) => d,
        None => {
            return Err(Failure {
                module: "usage",
                error: invalid("output.dir", "no output directory: pass --out-dir or set output.dir"),
            })
        }
    };
    fs::create_dir_all(&dir)
        .map_err(|e| Failure { module: "io", error: Error::Io(format!("{}: {e}", dir.display())) })?;

    let (data, universe) = match &cfg.data {
        DataSource::File(p) => {
            let base = config_path.parent().unwrap_or(Path::new(""));
            (SampledDataset::load(&base.join(p)).map_err(tag("synthdata"))?, None)
        }
        DataSource::Generate { ids, dim, regime, seed, params } => {
            let u = synthdata::generate_universe_with(*ids, *dim, *seed, params).map_err(tag("synthdata"))?;
            (synthdata::sample_dataset(&u, *regime), Some(u))
        }
    };

    let t = &cfg.trainer;
    let mut trainer = Trainer::new(t.clone(), &data).map_err(tag("trainer"))?;
    if let (Some(_), Some(u)) = (t.curvature_every, &universe) {
        let batch =
            Batch::draw_fresh(u, t.batch_ids, &mut rngs::stream(t.seed, Stream::Curvature)).map_err(tag("trainer"))?;
        trainer = trainer.with_curvature_batch(batch).map_err(tag("trainer"))?;
    }
    trainer.run().map_err(tag("trainer"))?;
    let outcome = trainer.finish();

    let mut files = Vec::new();
    write_file(&dir.join(CHECKPOINT_FILE), &outcome.probe.to_checkpoint_string())?;
    files.push(CHECKPOINT_FILE);
    write_file(&dir.join(TRAIN_LOG_FILE), &outcome.log.to_csv())?;
    files.push(TRAIN_LOG_FILE);
    if let Some(trace) = &outcome.curvature {
        write_file(&dir.join(CURVATURE_FILE), &trace.to_csv())?;
        files.push(CURVATURE_FILE);
    }
    if let Some(spec) = &cfg.eval {
        let params = match &cfg.data {
            DataSource::Generate { params, .. } => *params,
            DataSource::File(_) => UniverseParams::default(),
        };
        let u = synthdata::generate_universe_with(spec.ids, data.input_dim(), spec.seed, &params)
            .map_err(tag("synthdata"))?;
        let eval_data = synthdata::sample_dataset(&u, config::eval_regime(spec));
        let report = evalsuite::evaluate(&outcome.probe, &eval_data, &spec.fars, 0).map_err(tag("evalsuite"))?;
        write_file(&dir.join(EVAL_FILE), &report.to_csv())?;
        files.push(EVAL_FILE);
    }
    files.push(MANIFEST_FILE);

    let mut manifest = String::from("masstlab-manifest v1\n");
    let _ = writeln!(manifest, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(manifest, "command = train");
    let _ = writeln!(manifest, "seed = {}", t.seed);
    let _ = writeln!(manifest, "duration_ms = {}", started.elapsed().as_millis());
    manifest.push_str("[config]\n");
    manifest.push_str(&cfg.to_config_string());
    manifest.push_str("[files]\n");
    for f in &files {
        let _ = writeln!(manifest, "{f}");
    }
    write_file(&dir.join(MANIFEST_FILE), &manifest)?;
    println!("trained {} for {} iterations; artifacts in {}", t.mode, t.iterations, dir.display());
    Ok(())
}

fn load_pair(checkpoint: &Path, data: &Path) -> CmdResult<(EmbeddingNet, SampledDataset)> {
    let net = EmbeddingNet::load(checkpoint).map_err(tag("embedmodel"))?;
    let data = SampledDataset::load(data).map_err(tag("synthdata"))?;
    if net.input_dim() != data.input_dim() {
        return Err(Failure {
            module: "embedmodel",
            error: Error::ArchitectureMismatch { left: net.layer_sizes().to_vec(), right: vec![data.input_dim()] },
        });
    }
    Ok((net, data))
}

fn emit(out: Option<&Path>, text: &str) -> CmdResult<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_eval(a: &EvalArgs) -> CmdResult<()> {
    let (net, data) = load_pair(&a.checkpoint, &a.data)?;
    let report = evalsuite::evaluate(&net, &data, &a.fars, a.distractor_ids).map_err(tag("evalsuite"))?;
    emit(a.out.as_deref(), &report.to_csv())
}

/// The loss a bare probe checkpoint defines on a batch: its own gallery
/// features serve as frozen prototypes.
fn self_prototype_gradient<'a>(
    net: &'a EmbeddingNet,
    batch: &'a Batch,
    loss: LossConfig,
) -> crate::Result<impl FnMut(&[f64]) -> crate::Result<Vec<f64>> + 'a> {
    let protos = PrototypeSet::positives_only(net.forward(&batch.gallery)?, batch.ids.clone())?;
    let labels: Vec<usize> = (0..batch.len()).collect();
    Ok(move |theta: &[f64]| {
        let tape = net.forward_tape_with_params(theta, &batch.probe)?;
        let out = losses::prototype_loss(tape.output(), &protos, &loss, &labels)?;
        net.backward_tape_with_params(theta, &tape, &out.grad_features)
    })
}

pub fn cmd_curvature(a: &CurvatureArgs) -> CmdResult<()> {
    let cfg = PowerIterConfig { thr: a.thr, max_iters: a.max, seed: a.seed };
    cfg.validate().map_err(|e| Failure { module: "usage", error: e })?;
    if a.selftest {
        let diag = [1.0, 2.0, 5.0];
        let mut grad = |theta: &[f64]| Ok(theta.iter().zip(diag).map(|(t, d)| t * d).collect::<Vec<f64>>());
        let r = power_iteration(&mut grad, &[0.0; 3], &cfg).map_err(tag("curvature"))?;
        println!("selftest diag(1,2,5): lambda_max={:.6} iterations={}", r.lambda_max, r.iterations);
        return if (r.lambda_max - 5.0).abs() <= a.thr {
            Ok(())
        } else {
            Err(Failure {
                module: "curvature",
                error: invalid("selftest", format!("expected 5, got {}", r.lambda_max)),
            })
        };
    }
    if a.probes < 1 {
        return Err(Failure { module: "usage", error: invalid("probes", "need at least one probe") });
    }
    let (checkpoint, data) = (a.checkpoint.as_deref(), a.data.as_deref());
    let (net, data) = load_pair(checkpoint.expect("required by clap"), data.expect("required by clap"))?;
    let mut rng = rngs::stream(a.seed, Stream::Curvature);
    let mut trace = CurvatureTrace::new();
    for k in 0..a.probes {
        let batch = Batch::draw(&data, a.batch_ids, &mut rng).map_err(tag("trainer"))?;
        let mut grad = self_prototype_gradient(&net, &batch, LossConfig::default()).map_err(tag("losses"))?;
        let r = power_iteration(&mut grad, net.params(), &cfg).map_err(tag("curvature"))?;
        trace.push(CurvatureSample {
            iter: k,
            lambda_max: r.lambda_max,
            rayleigh: r.rayleigh,
            power_iters: r.iterations,
        });
    }
    emit(a.out.as_deref(), &trace.to_csv())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curvature_defaults_are_the_stopping_constants() {
        let cli = Cli::try_parse_from(["masstlab", "curvature", "--selftest"]).unwrap();
        let Command::Curvature(a) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(a.thr, 1e-3);
        assert_eq!(a.max, 50);
        assert_eq!(a.probes, 1);
        assert!(Cli::try_parse_from(["masstlab", "curvature"]).is_err());
    }

    #[test]
    fn gen_parses_regimes_and_fars_split_on_commas() {
        let cli =
            Cli::try_parse_from(["masstlab", "gen", "--ids", "9", "--regime", "longtail:0.1", "--out", "x"]).unwrap();
        let Command::Gen(g) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(g.regime, Regime::LongTail(0.1));
        assert_eq!(g.dim, 32);
        let cli = Cli::try_parse_from(["masstlab", "eval", "--checkpoint", "c", "--data", "d", "--fars", "0.5,0.05"])
            .unwrap();
        let Command::Eval(e) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(e.fars, vec![0.5, 0.05]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["masstlab", "--bogus"].map(std::ffi::OsString::from)), 2);
        assert_eq!(run(["masstlab", "curvature", "--selftest"].map(std::ffi::OsString::from)), 0);
        assert_eq!(run(["masstlab", "train", "/nonexistent/run.cfg"].map(std::ffi::OsString::from)), 1);
    }
}
