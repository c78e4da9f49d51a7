//! Command-line front end: single-image operations, the experiment runner,
//! the strength sweep, theory tables, and prior fitting.
//!
//! Every failure prints one `error: <message>` line on stderr and exits
//! nonzero; success output goes to stdout and the `--out` directory.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use wmlab::attacks::{apply_attack, AttackConfig, AttackDeps};
use wmlab::config::{load_config, ExperimentConfig};
use wmlab::dataset::{generate_dataset, generating_prior};
use wmlab::experiment::{
    aggregate_report, parse_trials_csv, report_to_csv, run_experiment, run_sweep, sweep_to_csv,
    write_run_outputs, write_sweep_outputs,
};
use wmlab::fit::{fit_prior, FitOptions};
use wmlab::io::{load_image, save_image};
use wmlab::message::{bit_accuracy, exact_match, Message};
use wmlab::metrics::psnr;
use wmlab::parallel::with_thread_count;
use wmlab::prior::{load_prior, save_prior};
use wmlab::rng::RngStream;
use wmlab::schedule::{NoiseSchedule, DEFAULT_T_MAX};
use wmlab::theory::{theory_grid, theory_to_csv};
use wmlab::watermark::{decode, embed, keygen, load_key, save_key};

#[derive(Parser)]
#[command(
    name = "wmlab",
    version,
    about = "Spread-spectrum watermarking vs diffusion regeneration attacks"
)]
struct Cli {
    /// Experiment config file (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config's output
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker thread count; overrides the config (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Embed a message into an image
    Embed {
        /// Key file; created from the config's [watermark] section if absent
        #[arg(long)]
        key: PathBuf,
        /// Host image (.pgm, .ppm, or .wmf)
        #[arg(long)]
        image: PathBuf,
        /// Bits as 0/1 characters, e.g. "1011"; random when omitted
        #[arg(long)]
        message: Option<String>,
        /// Where to write the watermarked image
        #[arg(long)]
        save: PathBuf,
    },
    /// Decode a watermark and print per-bit correlations
    Decode {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Expected bits; prints accuracy when given
        #[arg(long)]
        message: Option<String>,
    },
    /// Apply one attack to an image
    Attack {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        save: PathBuf,
        /// Attack as inline TOML, e.g. 'kind = "blur"
        /// sigma = 1.0'
        #[arg(long)]
        spec: String,
        /// Key file, needed by fgsm and regen_guided
        #[arg(long)]
        key: Option<PathBuf>,
        /// True message, needed by fgsm and regen_guided
        #[arg(long)]
        message: Option<String>,
        /// Prior file for regeneration; defaults to the config's prior
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Run every configured attack over the dataset; writes trials.csv,
    /// report.csv, and run_meta.txt
    Run,
    /// Run the regeneration strength sweep; writes sweep.csv
    Sweep,
    /// Closed-form decoder predictions vs Monte Carlo; writes theory.csv
    Theory {
        #[arg(long, value_delimiter = ',', default_value = "0.5,1.0")]
        beta: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1.0")]
        sigma: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "8,32")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
    },
    /// Fit a Gaussian mixture prior to a directory of images
    FitPrior {
        /// Directory of .pgm/.ppm/.wmf images
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 2)]
        components: usize,
        #[arg(long, default_value_t = 200)]
        max_iters: usize,
        /// Where to write the fitted prior
        #[arg(long)]
        save: PathBuf,
    },
    /// Rebuild report.csv from an existing trials.csv
    Report {
        /// Trials file; defaults to <out>/trials.csv
        #[arg(long)]
        trials: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Config with the global CLI overrides applied.
fn load_overridden(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().context("this command needs --config")?;
    let mut cfg = load_config(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    Ok(cfg)
}

/// Seed for standalone commands: the flag, else the config, else 0.
fn effective_seed(cli: &Cli) -> u64 {
    cli.seed
        .or_else(|| {
            cli.config.as_ref().and_then(|p| load_config(p).ok()).map(|c| c.seed)
        })
        .unwrap_or(0)
}

/// Output directory for standalone commands: the flag, else the config,
/// else ./out.
fn effective_out(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| {
            cli.config.as_ref().and_then(|p| load_config(p).ok()).map(|c| c.output)
        })
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_out_file(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Embed { key, image, message, save } => cmd_embed(cli, key, image, message.as_deref(), save),
        Cmd::Decode { key, image, message } => cmd_decode(key, image, message.as_deref()),
        Cmd::Attack { image, save, spec, key, message, prior } => {
            cmd_attack(cli, image, save, spec, key.as_deref(), message.as_deref(), prior.as_deref())
        }
        Cmd::Run => cmd_run(cli),
        Cmd::Sweep => cmd_sweep(cli),
        Cmd::Theory { beta, sigma, k, trials } => cmd_theory(cli, beta, sigma, k, *trials),
        Cmd::FitPrior { images, components, max_iters, save } => {
            cmd_fit_prior(cli, images, *components, *max_iters, save)
        }
        Cmd::Report { trials } => cmd_report(cli, trials.as_deref()),
    }
}

fn cmd_embed(
    cli: &Cli,
    key_path: &Path,
    image: &Path,
    message: Option<&str>,
    save: &Path,
) -> Result<()> {
    let host = load_image(image)?;
    let key = if key_path.is_file() {
        load_key(key_path)?
    } else {
        let cfg = load_overridden(cli)
            .context("key file not found; creating one needs --config with a [watermark] section")?;
        let key = keygen(
            cfg.watermark.k,
            host.num_samples(),
            cfg.watermark.beta,
            cfg.watermark.seed.unwrap_or(cfg.seed),
            cfg.watermark.mode,
        )?;
        save_key(key_path, &key)?;
        println!("created key {}", key_path.display());
        key
    };
    let message = match message {
        Some(s) => Message::from_bit_string(s)?,
        None => {
            let mut rng = RngStream::new(effective_seed(cli), "cli/embed/msg");
            Message::random(key.k(), &mut rng)?
        }
    };
    let marked = embed(&host, &key, &message)?;
    save_image(save, &marked)?;
    println!("message {}", message.to_bit_string());
    println!("psnr_db {}", psnr(&host, &marked)?);
    println!("saved {}", save.display());
    Ok(())
}

fn cmd_decode(key_path: &Path, image: &Path, expected: Option<&str>) -> Result<()> {
    let key = load_key(key_path)?;
    let img = load_image(image)?;
    let res = decode(&img, &key)?;
    for (i, ((&bit, &corr), &conf)) in
        res.bits.bits().iter().zip(&res.correlations).zip(&res.confidences).enumerate()
    {
        println!("bit {i} decoded {bit:+} correlation {corr} confidence {conf}");
    }
    println!("bits {}", res.bits.to_bit_string());
    if let Some(s) = expected {
        let truth = Message::from_bit_string(s)?;
        println!("bit_accuracy {}", bit_accuracy(&truth, &res.bits)?);
        println!("exact_match {}", exact_match(&truth, &res.bits)?);
    }
    Ok(())
}

fn cmd_attack(
    cli: &Cli,
    image: &Path,
    save: &Path,
    spec: &str,
    key_path: Option<&Path>,
    message: Option<&str>,
    prior_path: Option<&Path>,
) -> Result<()> {
    let attack: AttackConfig =
        toml::from_str(spec).with_context(|| format!("parsing attack spec {spec:?}"))?;
    attack.validate()?;
    let img = load_image(image)?;

    let cfg = cli.config.as_ref().map(|p| load_config(p)).transpose()?;
    let key = key_path.map(load_key).transpose()?;
    let message = message.map(Message::from_bit_string).transpose()?;
    let prior = match prior_path {
        Some(p) => Some(load_prior(p)?),
        None => match &cfg {
            Some(c) => match &c.diffusion.prior {
                Some(p) => Some(load_prior(p)?),
                None => generating_prior(&c.dataset)?,
            },
            None => None,
        },
    };
    let sched = match &cfg {
        Some(c) => NoiseSchedule::new(c.diffusion.schedule, c.diffusion.t_max)?,
        None => NoiseSchedule::new(wmlab::schedule::ScheduleKind::Linear, DEFAULT_T_MAX)?,
    };
    let deps = AttackDeps {
        prior: prior.as_ref(),
        sched: Some(&sched),
        key: key.as_ref(),
        message: message.as_ref(),
    };
    let mut rng = RngStream::new(attack.seed().unwrap_or_else(|| effective_seed(cli)), "cli/attack");
    let attacked = apply_attack(&img, &attack, &deps, &mut rng)?;
    save_image(save, &attacked)?;
    println!("attack {}", attack.params_echo());
    println!("psnr_db_vs_input {}", psnr(&img, &attacked)?);
    println!("saved {}", save.display());
    Ok(())
}

fn cmd_run(cli: &Cli) -> Result<()> {
    let cfg = load_overridden(cli)?;
    let result = run_experiment(&cfg)?;
    write_run_outputs(&cfg, &result)?;
    if let Some(c) = &result.calibration {
        println!(
            "calibrated gaussian_noise sigma {} (target psnr {:.3} dB, achieved {:.3} dB)",
            c.sigma, c.target_psnr_db, c.achieved_psnr_db
        );
    }
    print!("{}", report_to_csv(&result.report));
    println!("wrote {}", cfg.output.display());
    Ok(())
}

fn cmd_sweep(cli: &Cli) -> Result<()> {
    let cfg = load_overridden(cli)?;
    let rows = run_sweep(&cfg)?;
    write_sweep_outputs(&cfg, &rows)?;
    print!("{}", sweep_to_csv(&rows));
    println!("wrote {}", cfg.output.display());
    Ok(())
}

fn cmd_theory(cli: &Cli, beta: &[f64], sigma: &[f64], k: &[usize], trials: u64) -> Result<()> {
    let seed = effective_seed(cli);
    let rows = with_thread_count(cli.threads, || theory_grid(beta, sigma, k, trials, seed))??;
    let csv = theory_to_csv(&rows);
    let path = write_out_file(&effective_out(cli), "theory.csv", &csv)?;
    print!("{csv}");
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_fit_prior(
    cli: &Cli,
    images: &Path,
    components: usize,
    max_iters: usize,
    save: &Path,
) -> Result<()> {
    let dataset = wmlab::config::DatasetConfig::Directory { path: images.to_path_buf() };
    let items = generate_dataset(&dataset, 0)?;
    let imgs: Vec<wmlab::Image> = items.into_iter().map(|(_, img)| img).collect();
    let opts = FitOptions { components, max_iters, seed: effective_seed(cli), ..FitOptions::default() };
    let fit = with_thread_count(cli.threads, || fit_prior(&imgs, &opts))??;
    save_prior(save, &fit.prior)?;
    let ll = fit.log_likelihood.last().copied().unwrap_or(f64::NAN);
    println!(
        "fit {} components over {} images in {} iterations (converged {}, log_likelihood {ll})",
        components,
        imgs.len(),
        fit.iterations,
        fit.converged
    );
    println!("saved {}", save.display());
    Ok(())
}

fn cmd_report(cli: &Cli, trials_path: Option<&Path>) -> Result<()> {
    let out = effective_out(cli);
    let path = trials_path.map(Path::to_path_buf).unwrap_or_else(|| out.join("trials.csv"));
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let trials = parse_trials_csv(&text)?;
    if trials.is_empty() {
        bail!("{} has no trial rows", path.display());
    }
    let mode = match cli.config.as_ref() {
        Some(p) => load_config(p)?.watermark.mode.as_str().to_string(),
        None => "informed".to_string(),
    };
    let report = aggregate_report(&trials, &mode)?;
    let csv = report_to_csv(&report);
    let path = write_out_file(&out, "report.csv", &csv)?;
    print!("{csv}");
    println!("wrote {}", path.display());
    Ok(())
}
