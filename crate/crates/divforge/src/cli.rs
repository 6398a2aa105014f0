//! Command-line entry point: binds flat key=value configs to experiments
//! and writes the result artifacts.
//!
//! Three subcommands: `kl-gauss`, `mi-gauss`, `sweep-lambda`. Flags mirror
//! the config keys (`--seed 7` is `seed=7`); a `--config FILE` loads a
//! key=value file first and later flags override it. Each run writes a
//! `config.echo` with the fully resolved configuration; feeding that file
//! back via `--config` reproduces every artifact byte for byte.
//!
//! Exit codes: 0 success, 2 configuration error (the offending key is
//! named), 3 unwritable output directory, 4 all runs diverged.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::estimators::{DiscriminatorConfig, DiscriminatorKind};
use crate::harness::{
    lambda_sweep, mi_staircase, repeat_experiment, write_runs_csv, write_summary_json,
    write_sweep_csv, SummaryJson, TrainConfig,
};
use crate::nn::Activation;
use crate::synthetic::{analytic_kl, GaussianSpec};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    KlGauss,
    MiGauss,
    SweepLambda,
}

impl Experiment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Experiment::KlGauss => "kl-gauss",
            Experiment::MiGauss => "mi-gauss",
            Experiment::SweepLambda => "sweep-lambda",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "kl-gauss" => Some(Experiment::KlGauss),
            "mi-gauss" => Some(Experiment::MiGauss),
            "sweep-lambda" => Some(Experiment::SweepLambda),
            _ => None,
        }
    }
}

/// Fully resolved experiment configuration. Every field has a default per
/// experiment; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub discriminator: DiscriminatorKind,
    pub target_kl: f64,
    pub dim: usize,
    pub mi_levels: Vec<f64>,
    /// Lambda grid for `sweep-lambda` (key `values`).
    pub values: Vec<f64>,
    pub m: usize,
    pub minibatch: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub runs: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub final_window_fraction: f64,
    pub n_w_draws_eval: usize,
    pub gamma: f64,
    pub n_features: usize,
    pub phi_hidden: usize,
    pub phi_layers: usize,
    pub feature_dim: usize,
    pub g_hidden: usize,
    pub g_layers: usize,
    pub lipschitz: f64,
    pub g_lipschitz: f64,
    pub out: PathBuf,
}

impl ExperimentConfig {
    /// Per-experiment defaults.
    pub fn defaults(experiment: Experiment) -> Self {
        let base = ExperimentConfig {
            experiment,
            discriminator: DiscriminatorKind::Rkhs,
            target_kl: 1.3,
            dim: 2,
            mi_levels: vec![2.0, 4.0],
            values: vec![1e-4, 1e-3, 1e-2, 1e-1],
            m: 2500,
            minibatch: 50,
            iterations: 10_000,
            learning_rate: 5e-3,
            lambda: 0.005,
            runs: 10,
            seed: 1,
            eval_every: 50,
            final_window_fraction: 0.1,
            n_w_draws_eval: 10,
            gamma: 1.0,
            n_features: 500,
            phi_hidden: 20,
            phi_layers: 3,
            feature_dim: 10,
            g_hidden: 20,
            g_layers: 3,
            lipschitz: 5.0,
            g_lipschitz: 5.0,
            out: PathBuf::from("divforge-out"),
        };
        match experiment {
            Experiment::KlGauss => base,
            Experiment::SweepLambda => {
                ExperimentConfig { target_kl: 13.8, runs: 5, ..base }
            }
            Experiment::MiGauss => ExperimentConfig {
                dim: 20,
                m: 10_240,
                minibatch: 64,
                iterations: 10_000,
                learning_rate: 5e-4,
                lambda: 1e-5,
                runs: 3,
                eval_every: 200,
                gamma: 5.0,
                phi_hidden: 64,
                phi_layers: 2,
                feature_dim: 64,
                g_hidden: 5,
                ..base
            },
        }
    }

    fn key_applies(&self, key: &str) -> bool {
        match key {
            "target-kl" => {
                matches!(self.experiment, Experiment::KlGauss | Experiment::SweepLambda)
            }
            "values" => self.experiment == Experiment::SweepLambda,
            "mi-levels" => self.experiment == Experiment::MiGauss,
            _ => COMMON_KEYS.contains(&key),
        }
    }

    /// Apply one key=value pair.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.key_applies(key) {
            return Err(Error::InvalidConfig(format!(
                "unknown key `{key}` for experiment {}",
                self.experiment.as_str()
            )));
        }
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::InvalidConfig(format!("key `{key}`: cannot parse `{value}`"))
            })
        }
        fn float_list(key: &str, value: &str) -> Result<Vec<f64>> {
            value.split(',').map(|s| num::<f64>(key, s.trim())).collect()
        }
        match key {
            "experiment" => {
                let exp = Experiment::parse(value).ok_or_else(|| {
                    Error::InvalidConfig(format!("key `experiment`: unknown value `{value}`"))
                })?;
                if exp != self.experiment {
                    return Err(Error::InvalidConfig(format!(
                        "config file is for experiment {value}, but subcommand is {}",
                        self.experiment.as_str()
                    )));
                }
            }
            "discriminator" => self.discriminator = value.parse()?,
            "target-kl" => self.target_kl = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "mi-levels" => self.mi_levels = float_list(key, value)?,
            "values" => self.values = float_list(key, value)?,
            "m" => self.m = num(key, value)?,
            "minibatch" => self.minibatch = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "learning-rate" => self.learning_rate = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "runs" => self.runs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "eval-every" => self.eval_every = num(key, value)?,
            "final-window-fraction" => self.final_window_fraction = num(key, value)?,
            "n-w-draws-eval" => self.n_w_draws_eval = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "n-features" => self.n_features = num(key, value)?,
            "phi-hidden" => self.phi_hidden = num(key, value)?,
            "phi-layers" => self.phi_layers = num(key, value)?,
            "feature-dim" => self.feature_dim = num(key, value)?,
            "g-hidden" => self.g_hidden = num(key, value)?,
            "g-layers" => self.g_layers = num(key, value)?,
            "lipschitz" => self.lipschitz = num(key, value)?,
            "g-lipschitz" => self.g_lipschitz = num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => unreachable!("key_applies filtered"),
        }
        Ok(())
    }

    /// Final cross-field resolution: the plain critic has no complexity
    /// penalty, so lambda is forced to zero before it is echoed.
    pub fn resolve(&mut self) -> Result<()> {
        if self.discriminator == DiscriminatorKind::PlainMlp {
            if self.experiment == Experiment::SweepLambda {
                return Err(Error::InvalidConfig(
                    "sweep-lambda requires the rkhs discriminator".into(),
                ));
            }
            self.lambda = 0.0;
        }
        if self.runs < 2 {
            return Err(Error::InvalidConfig("runs must be >= 2".into()));
        }
        Ok(())
    }

    fn fmt_list(xs: &[f64]) -> String {
        xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }

    /// The fully resolved configuration as a reloadable key=value file.
    pub fn echo(&self) -> String {
        let mut s = String::from("# divforge resolved configuration\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("experiment", self.experiment.as_str().to_string());
        kv("discriminator", self.discriminator.as_str().to_string());
        match self.experiment {
            Experiment::KlGauss => kv("target-kl", self.target_kl.to_string()),
            Experiment::SweepLambda => {
                kv("target-kl", self.target_kl.to_string());
                kv("values", Self::fmt_list(&self.values));
            }
            Experiment::MiGauss => kv("mi-levels", Self::fmt_list(&self.mi_levels)),
        }
        kv("dim", self.dim.to_string());
        kv("m", self.m.to_string());
        kv("minibatch", self.minibatch.to_string());
        kv("iterations", self.iterations.to_string());
        kv("learning-rate", self.learning_rate.to_string());
        kv("lambda", self.lambda.to_string());
        kv("runs", self.runs.to_string());
        kv("seed", self.seed.to_string());
        kv("eval-every", self.eval_every.to_string());
        kv("final-window-fraction", self.final_window_fraction.to_string());
        kv("n-w-draws-eval", self.n_w_draws_eval.to_string());
        kv("gamma", self.gamma.to_string());
        kv("n-features", self.n_features.to_string());
        kv("phi-hidden", self.phi_hidden.to_string());
        kv("phi-layers", self.phi_layers.to_string());
        kv("feature-dim", self.feature_dim.to_string());
        kv("g-hidden", self.g_hidden.to_string());
        kv("g-layers", self.g_layers.to_string());
        kv("lipschitz", self.lipschitz.to_string());
        kv("g-lipschitz", self.g_lipschitz.to_string());
        kv("out", self.out.display().to_string());
        s
    }

    pub fn discriminator_config(&self, input_dim: usize) -> DiscriminatorConfig {
        let spectral = self.discriminator == DiscriminatorKind::Rkhs;
        DiscriminatorConfig {
            kind: self.discriminator,
            input_dim,
            phi_hidden: self.phi_hidden,
            phi_layers: self.phi_layers,
            feature_dim: self.feature_dim,
            g_hidden: self.g_hidden,
            g_layers: self.g_layers,
            gamma: self.gamma,
            n_features: self.n_features,
            lipschitz: spectral.then_some(self.lipschitz),
            g_lipschitz: spectral.then_some(self.g_lipschitz),
            activation: Activation::Relu,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            m: self.m,
            minibatch: self.minibatch,
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            lambda: self.lambda,
            seed: self.seed,
            eval_every: self.eval_every,
            final_window_fraction: self.final_window_fraction,
            n_w_draws_eval: self.n_w_draws_eval,
        }
    }
}

const COMMON_KEYS: &[&str] = &[
    "experiment",
    "discriminator",
    "dim",
    "m",
    "minibatch",
    "iterations",
    "learning-rate",
    "lambda",
    "runs",
    "seed",
    "eval-every",
    "final-window-fraction",
    "n-w-draws-eval",
    "gamma",
    "n-features",
    "phi-hidden",
    "phi-layers",
    "feature-dim",
    "g-hidden",
    "g-layers",
    "lipschitz",
    "g-lipschitz",
    "out",
];

/// Parse a flat key=value config file: one pair per line, `#` starts a
/// comment, blank lines ignored.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::InvalidConfig(format!(
                "config line {}: expected key=value, got `{raw}`",
                lineno + 1
            )));
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn usage() -> String {
    let mut s = String::from(
        "usage: divforge <kl-gauss | mi-gauss | sweep-lambda> [--config FILE] [--key value ...]\n\
         \n\
         Estimate KL divergence or mutual information between synthetic\n\
         Gaussians with a plain-MLP or RKHS discriminator, repeated over\n\
         seeds, writing runs.csv / summary.json / sweep.csv plus a\n\
         config.echo that reproduces the experiment bit for bit.\n\
         \n\
         Common keys (defaults for kl-gauss / mi-gauss / sweep-lambda):\n",
    );
    let kl = ExperimentConfig::defaults(Experiment::KlGauss);
    let mi = ExperimentConfig::defaults(Experiment::MiGauss);
    let sw = ExperimentConfig::defaults(Experiment::SweepLambda);
    let rows = [
        ("discriminator", "plain-mlp | rkhs".to_string()),
        ("target-kl", format!("{} / - / {}", kl.target_kl, sw.target_kl)),
        ("mi-levels", format!("- / {} / -", ExperimentConfig::fmt_list(&mi.mi_levels))),
        ("values", format!("- / - / {}", ExperimentConfig::fmt_list(&sw.values))),
        ("dim", format!("{} / {} / {}", kl.dim, mi.dim, sw.dim)),
        ("m", format!("{} / {} / {}", kl.m, mi.m, sw.m)),
        ("minibatch", format!("{} / {} / {}", kl.minibatch, mi.minibatch, sw.minibatch)),
        ("iterations", format!("{} / {} / {}", kl.iterations, mi.iterations, sw.iterations)),
        (
            "learning-rate",
            format!("{} / {} / {}", kl.learning_rate, mi.learning_rate, sw.learning_rate),
        ),
        ("lambda", format!("{} / {} / {}", kl.lambda, mi.lambda, sw.lambda)),
        ("runs", format!("{} / {} / {}", kl.runs, mi.runs, sw.runs)),
        ("seed", format!("{} / {} / {}", kl.seed, mi.seed, sw.seed)),
        ("eval-every", format!("{} / {} / {}", kl.eval_every, mi.eval_every, sw.eval_every)),
        (
            "final-window-fraction",
            format!(
                "{} / {} / {}",
                kl.final_window_fraction, mi.final_window_fraction, sw.final_window_fraction
            ),
        ),
        (
            "n-w-draws-eval",
            format!("{} / {} / {}", kl.n_w_draws_eval, mi.n_w_draws_eval, sw.n_w_draws_eval),
        ),
        ("gamma", format!("{} / {} / {}", kl.gamma, mi.gamma, sw.gamma)),
        ("n-features", format!("{} / {} / {}", kl.n_features, mi.n_features, sw.n_features)),
        ("phi-hidden", format!("{} / {} / {}", kl.phi_hidden, mi.phi_hidden, sw.phi_hidden)),
        ("phi-layers", format!("{} / {} / {}", kl.phi_layers, mi.phi_layers, sw.phi_layers)),
        ("feature-dim", format!("{} / {} / {}", kl.feature_dim, mi.feature_dim, sw.feature_dim)),
        ("g-hidden", format!("{} / {} / {}", kl.g_hidden, mi.g_hidden, sw.g_hidden)),
        ("g-layers", format!("{} / {} / {}", kl.g_layers, mi.g_layers, sw.g_layers)),
        ("lipschitz", format!("{} / {} / {}", kl.lipschitz, mi.lipschitz, sw.lipschitz)),
        ("g-lipschitz", format!("{} / {} / {}", kl.g_lipschitz, mi.g_lipschitz, sw.g_lipschitz)),
        ("out", "divforge-out".to_string()),
    ];
    for (k, v) in rows {
        let _ = writeln!(s, "  --{k:<24}{v}");
    }
    s.push_str("\nDIVFORGE_THREADS caps the worker count (default: all cores).\n");
    s
}

fn build_config(experiment: Experiment, args: &[String]) -> Result<ExperimentConfig> {
    let mut flag_pairs: Vec<(String, String)> = Vec::new();
    let mut file_pairs: Vec<(String, String)> = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let Some(stripped) = arg.strip_prefix("--") else {
            return Err(Error::InvalidConfig(format!("expected --key, got `{arg}`")));
        };
        let (key, value) = match stripped.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = args.get(i + 1).ok_or_else(|| {
                    Error::InvalidConfig(format!("flag --{stripped} is missing a value"))
                })?;
                i += 1;
                (stripped.to_string(), v.clone())
            }
        };
        if key == "config" {
            let text = std::fs::read_to_string(&value).map_err(|e| {
                Error::InvalidConfig(format!("cannot read config file `{value}`: {e}"))
            })?;
            file_pairs.extend(parse_config_file(&text)?);
        } else {
            flag_pairs.push((key, value));
        }
        i += 1;
    }
    let mut cfg = ExperimentConfig::defaults(experiment);
    for (k, v) in file_pairs.iter().chain(flag_pairs.iter()) {
        cfg.apply(k, v)?;
    }
    cfg.resolve()?;
    Ok(cfg)
}

/// Standard-covariance Gaussian pair with mean offset sqrt(2 KL) along the
/// first axis, so the analytic divergence equals the target exactly.
pub fn gaussian_pair_for_kl(target_kl: f64, dim: usize) -> Result<(GaussianSpec, GaussianSpec)> {
    if target_kl.is_nan() || target_kl < 0.0 || dim == 0 {
        return Err(Error::InvalidConfig(format!(
            "need target-kl >= 0 and dim >= 1, got {target_kl} and {dim}"
        )));
    }
    let mut mean = vec![0.0; dim];
    mean[0] = (2.0 * target_kl).sqrt();
    Ok((GaussianSpec::standard_with_mean(mean), GaussianSpec::standard(dim)))
}

fn run_experiment(cfg: &ExperimentConfig) -> Result<()> {
    match cfg.experiment {
        Experiment::KlGauss => {
            let (p, q) = gaussian_pair_for_kl(cfg.target_kl, cfg.dim)?;
            let truth = analytic_kl(&p, &q)?;
            let disc = cfg.discriminator_config(cfg.dim);
            let (stats, records) =
                repeat_experiment(&p, &q, &disc, &cfg.train_config(), cfg.runs, truth)?;
            write_runs_csv(&cfg.out.join("runs.csv"), &records)?;
            write_summary_json(
                &cfg.out.join("summary.json"),
                &SummaryJson::new("kl-gauss", truth, cfg.lambda, &stats),
            )?;
            println!(
                "kl-gauss: truth {truth:.4}, mean {:.4}, variance {:.5}, bias {:.4}, {} runs ({} diverged)",
                stats.mean, stats.variance, stats.bias, stats.n_runs, stats.n_diverged
            );
        }
        Experiment::SweepLambda => {
            let (p, q) = gaussian_pair_for_kl(cfg.target_kl, cfg.dim)?;
            let truth = analytic_kl(&p, &q)?;
            let disc = cfg.discriminator_config(cfg.dim);
            let points =
                lambda_sweep(&p, &q, &disc, &cfg.train_config(), &cfg.values, cfg.runs, truth)?;
            write_sweep_csv(&cfg.out.join("sweep.csv"), &points)?;
            for pt in &points {
                println!(
                    "sweep-lambda: lambda {:>9}, mean {:.4}, variance {:.5}, bias {:+.4}, median g_norm {}",
                    pt.lambda,
                    pt.stats.mean,
                    pt.stats.variance,
                    pt.stats.bias,
                    pt.median_g_norm.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into()),
                );
            }
        }
        Experiment::MiGauss => {
            let disc = cfg.discriminator_config(cfg.dim * 2);
            let points =
                mi_staircase(cfg.dim, &cfg.mi_levels, &disc, &cfg.train_config(), cfg.runs)?;
            for (i, pt) in points.iter().enumerate() {
                write_runs_csv(&cfg.out.join(format!("runs_level{i}.csv")), &pt.records)?;
                write_summary_json(
                    &cfg.out.join(format!("summary_level{i}.json")),
                    &SummaryJson::new("mi-gauss", pt.target_mi, cfg.lambda, &pt.stats),
                )?;
                println!(
                    "mi-gauss: true MI {:.4}, mean {:.4}, variance {:.5}, {} runs ({} diverged)",
                    pt.target_mi, pt.stats.mean, pt.stats.variance, pt.stats.n_runs, pt.stats.n_diverged
                );
            }
        }
    }
    Ok(())
}

/// Parse arguments (without the program name), run the experiment, and
/// return the process exit code.
pub fn run_cli<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let args: Vec<String> = args.into_iter().collect();
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" || args[0] == "help" {
        let code = if args.is_empty() { 2 } else { 0 };
        if code == 0 {
            print!("{}", usage());
        } else {
            eprint!("{}", usage());
        }
        return code;
    }
    let Some(experiment) = Experiment::parse(&args[0]) else {
        eprintln!("unknown subcommand `{}`\n", args[0]);
        eprint!("{}", usage());
        return 2;
    };
    let cfg = match build_config(experiment, &args[1..]) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return 2;
        }
    };
    // resolve the output directory and prove it writable before running
    if let Err(e) = std::fs::create_dir_all(&cfg.out)
        .map_err(Error::from)
        .and_then(|_| write_echo(&cfg.out, &cfg))
    {
        eprintln!("cannot write to output directory `{}`: {e}", cfg.out.display());
        return 3;
    }
    match run_experiment(&cfg) {
        Ok(()) => 0,
        Err(Error::AllRunsDiverged { n_runs }) => {
            eprintln!("all {n_runs} runs diverged; see config.echo for the configuration");
            4
        }
        Err(Error::Io(e)) => {
            eprintln!("io error while writing artifacts: {e}");
            3
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn write_echo(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::write(dir.join("config.echo"), cfg.echo())?;
    Ok(())
}
