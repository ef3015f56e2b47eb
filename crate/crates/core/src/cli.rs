//! The `dimr` command-line front end.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{collect_modulation, render_bar_rows, write_image, write_sample_grid};
use crate::diffusion::{sample, GuidanceConfig};
use crate::error::{Error, Result};
use crate::gradsuite;
use crate::network::{build_variant, count_params, Dimr, VARIANT_NAMES};
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::training::config::{parse_override, RunConfig};
use crate::training::{make_dataset, Checkpoint, Trainer};

#[derive(Debug, Parser)]
#[command(name = "dimr", version, about = "Multi-resolution diffusion denoiser: train, sample and inspect")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.lr=1e-4`. Repeatable;
    /// applied after the file, last write wins.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "dimr-out")]
    pub out: PathBuf,
    /// Seed for every random draw; overrides `seed` from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes `checkpoint.dimr` and `loss.csv`.
    Train {
        /// Continue from a checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print a progress line every this many steps (0 = never).
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Draw samples from a checkpoint; writes `samples.ppm`/`.png`,
    /// `samples.csv` and `eps_stats.jsonl`.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class id; defaults to `sample.class`.
        #[arg(long)]
        class: Option<usize>,
        /// Guidance scale w; defaults to `sample.guidance`.
        #[arg(long)]
        guidance: Option<f64>,
        /// Number of samples; defaults to `sample.count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Analytic parameter count, itemized per module.
    CountParams {
        /// Named variant (M/3R, L/3R, XL/2R, XL/3R); defaults to the configured model.
        #[arg(long)]
        variant: Option<String>,
        /// Print CSV instead of a table.
        #[arg(long, default_value_t = false)]
        csv: bool,
    },
    /// Finite-difference gradient checks over ops, blocks and a miniature network.
    GradCheck {
        /// Only run cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
    /// PCA of modulation trajectories along one sampling chain; writes `pca.csv`
    /// and `pca.ppm`.
    Pca {
        /// Checkpoint to analyze; a fresh initialization is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of sampling steps recorded, spread evenly over the chain.
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Class conditioning the chain; defaults to `sample.class`.
        #[arg(long)]
        class: Option<usize>,
        /// Leading components drawn per trace in the bar chart.
        #[arg(long, default_value_t = 8)]
        components: usize,
    },
    /// Noise schedule as CSV (`t,beta,alpha,alpha_bar`) on stdout and in `schedule.csv`.
    ScheduleDump,
}

fn load_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut overrides = global.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = global.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    RunConfig::load(global.config.as_deref(), &overrides)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Caps the worker pool at `DIMR_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DIMR_THREADS") {
        let n: usize = v.parse().map_err(|_| Error::Config(format!("DIMR_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config("DIMR_THREADS must be >= 1".into()));
        }
        // Ignored if the pool was already built (e.g. by a test harness).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let g = &cli.global;
    match cli.command {
        Command::Train { resume, log_every } => train(g, resume.as_deref(), log_every),
        Command::Sample { checkpoint, class, guidance, count } => sample_cmd(g, &checkpoint, class, guidance, count),
        Command::CountParams { variant, csv } => count_cmd(g, variant.as_deref(), csv),
        Command::GradCheck { filter } => grad_check_cmd(g, filter.as_deref()),
        Command::Pca { checkpoint, steps, class, components } => pca_cmd(g, checkpoint.as_deref(), steps, class, components),
        Command::ScheduleDump => schedule_dump(g),
    }
}

fn train(g: &GlobalArgs, resume: Option<&Path>, log_every: u64) -> Result<()> {
    let mut trainer = match resume {
        Some(p) => {
            let mut ck = Checkpoint::load(p)?;
            if !g.overrides.is_empty() || g.config.is_some() || g.seed.is_some() {
                // Keys given on the command line win over the stored echo.
                let mut pairs = crate::training::config::parse_pairs(&ck.config.to_text())?;
                if let Some(path) = &g.config {
                    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    pairs.extend(crate::training::config::parse_pairs(&text)?);
                }
                pairs.extend(g.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?);
                if let Some(seed) = g.seed {
                    pairs.push(("seed".into(), seed.to_string()));
                }
                ck.config = RunConfig::from_pairs(&pairs)?;
            }
            Trainer::from_checkpoint(ck)?
        }
        None => Trainer::new(load_config(g)?)?,
    };
    let cfg = trainer.config().clone();
    println!("seed = {}", cfg.seed);
    ensure_dir(&g.out)?;
    let ds = make_dataset(&cfg)?;
    let trace = trainer.run(ds.as_ref(), |s| {
        if log_every > 0 && (s.step % log_every == 0 || s.step == cfg.train.steps) {
            println!("step {} loss {:.6} lr {:.3e}", s.step, s.loss, s.lr);
        }
    })?;
    let ck_path = g.out.join("checkpoint.dimr");
    trainer.checkpoint().save(&ck_path)?;
    write_text(&g.out.join("loss.csv"), &trace.to_csv())?;
    println!("wrote {} and {}", ck_path.display(), g.out.join("loss.csv").display());
    Ok(())
}

/// Loads a checkpoint, rebuilds the network and returns it with the weights
/// used for sampling (EMA when present).
fn restore(path: &Path, g: &GlobalArgs) -> Result<(RunConfig, Dimr, ParamStore<f32>)> {
    let ck = Checkpoint::load(path)?;
    let mut pairs = crate::training::config::parse_pairs(&ck.config.to_text())?;
    pairs.extend(g.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?);
    if let Some(seed) = g.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    let cfg = RunConfig::from_pairs(&pairs)?;
    if cfg.model != ck.config.model || cfg.diffusion != ck.config.diffusion {
        return Err(Error::Config("model and diffusion keys cannot be overridden when loading a checkpoint".into()));
    }
    let mut fresh = ParamStore::<f32>::default();
    let net = Dimr::new(cfg.model.clone(), cfg.diffusion.steps, &mut fresh, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.validate_names(&fresh)?;
    let params = ck.ema.unwrap_or(ck.params);
    Ok((cfg, net, params))
}

#[derive(Serialize)]
struct EpsStats {
    t: usize,
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
    x_std: f64,
}

fn stats(x: &[f32]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let min = x.iter().fold(f64::INFINITY, |a, &v| a.min(v as f64));
    let max = x.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
    (mean, var.sqrt(), min, max)
}

/// Brightness-weighted centroid `(row, col)` of one `[C, S, S]` image after
/// mapping to `[0, 1]` and removing the median background.
pub fn bright_centroid(img: &[f32], channels: usize, size: usize) -> (f64, f64) {
    let plane = size * size;
    let lum: Vec<f64> = (0..plane)
        .map(|i| (0..channels).map(|c| ((img[c * plane + i] as f64 + 1.0) / 2.0).clamp(0.0, 1.0)).sum::<f64>() / channels as f64)
        .collect();
    let mut sorted = lum.clone();
    sorted.sort_by(f64::total_cmp);
    let floor = sorted[plane / 2];
    let (mut w, mut r, mut c) = (0.0, 0.0, 0.0);
    for (i, &v) in lum.iter().enumerate() {
        let m = (v - floor).max(0.0);
        w += m;
        r += m * (i / size) as f64;
        c += m * (i % size) as f64;
    }
    if w == 0.0 {
        let mid = (size as f64 - 1.0) / 2.0;
        return (mid, mid);
    }
    (r / w, c / w)
}

fn sample_cmd(g: &GlobalArgs, ck: &Path, class: Option<usize>, guidance: Option<f64>, count: Option<usize>) -> Result<()> {
    let (cfg, net, params) = restore(ck, g)?;
    println!("seed = {}", cfg.seed);
    let class = class.unwrap_or(cfg.sample.class);
    let w = guidance.unwrap_or(cfg.sample.guidance);
    let count = count.unwrap_or(cfg.sample.count);
    if class > cfg.model.num_classes || count == 0 {
        return Err(Error::Config(format!("class {class} / count {count} out of range")));
    }
    let sched = cfg.diffusion.schedule()?;
    let m = &cfg.model;
    let shape = [count, m.in_channels, m.input_size, m.input_size];
    let model = crate::network::DimrDenoiser { net: &net, params: &params };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut jsonl = String::new();
    let x = sample(
        &model,
        &sched,
        &shape,
        &vec![class; count],
        Some(GuidanceConfig::new(w, net.null_class())?),
        &mut rng,
        |t, x, eps| {
            let (mean, std, min, max) = stats(eps.data());
            let x_std = stats(x.data()).1;
            let line = serde_json::to_string(&EpsStats { t, mean, std, min, max, x_std }).expect("plain struct");
            jsonl.push_str(&line);
            jsonl.push('\n');
        },
    )?;
    ensure_dir(&g.out)?;
    let cols = (count as f64).sqrt().ceil() as usize;
    let rows = count.div_ceil(cols);
    write_sample_grid(&x, &g.out.join("samples.ppm"), rows, cols)?;
    write_text(&g.out.join("eps_stats.jsonl"), &jsonl)?;
    write_text(&g.out.join("samples.csv"), &samples_csv(&x, class)?)?;
    println!("wrote {count} samples (class {class}, w = {w}) to {}", g.out.display());
    Ok(())
}

fn samples_csv(x: &Tensor<f32>, class: usize) -> Result<String> {
    let (b, c, s) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = String::from("index,class,mean,std,centroid_row,centroid_col\n");
    for i in 0..b {
        let img = x.narrow0(i, 1)?;
        let (mean, std, _, _) = stats(img.data());
        let (r, col) = bright_centroid(img.data(), c, s);
        let _ = writeln!(out, "{i},{class},{mean:.6},{std:.6},{r:.4},{col:.4}");
    }
    Ok(out)
}

fn count_cmd(g: &GlobalArgs, variant: Option<&str>, csv: bool) -> Result<()> {
    let (name, cfg) = match variant {
        Some(v) => (v.to_string(), build_variant(v)?),
        None => {
            let c = load_config(g)?;
            (c.variant.clone(), c.model)
        }
    };
    let count = count_params(&cfg)?;
    if csv {
        print!("{}", count.to_csv());
    } else {
        println!("variant {name} (known: {})", VARIANT_NAMES.join(", "));
        println!("{count}");
    }
    Ok(())
}

fn grad_check_cmd(g: &GlobalArgs, filter: Option<&str>) -> Result<()> {
    let seed = g.seed.unwrap_or(0);
    println!("seed = {seed}");
    let reports = gradsuite::run(seed, |n| filter.is_none_or(|f| n.contains(f)))?;
    if reports.is_empty() {
        return Err(Error::Invalid(format!("no gradient case matches {filter:?}")));
    }
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {:<26} max_rel_err={:.3e} tol={:.0e}", r.name, r.max_rel_err, r.tolerance);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    println!("{}/{} passed", reports.len() - failed.len(), reports.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn pca_cmd(g: &GlobalArgs, ck: Option<&Path>, steps: usize, class: Option<usize>, components: usize) -> Result<()> {
    let (cfg, net, params) = match ck {
        Some(p) => restore(p, g)?,
        None => {
            let cfg = load_config(g)?;
            let mut store = ParamStore::default();
            let net = Dimr::new(cfg.model.clone(), cfg.diffusion.steps, &mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            (cfg, net, store)
        }
    };
    println!("seed = {}", cfg.seed);
    let class = class.unwrap_or(cfg.sample.class);
    let sched = cfg.diffusion.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let traces = collect_modulation(&net, &params, &sched, class, steps, &mut rng)?;
    let mut csv = String::from("site,signal,component,eigenvalue,ratio,cumulative\n");
    let mut bars = Vec::new();
    for tr in traces.iter().filter(|t| t.is_scale_or_shift()) {
        let r = crate::analysis::pca(&tr.rows)?;
        let mut cum = 0.0;
        for (k, (e, q)) in r.eigenvalues.iter().zip(&r.ratios).enumerate() {
            cum += q;
            let _ = writeln!(csv, "{},{},{},{:.6e},{:.8},{:.8}", tr.site, tr.signal, k + 1, e, q, cum);
        }
        bars.push(r.ratios.iter().take(components).copied().collect());
    }
    ensure_dir(&g.out)?;
    write_text(&g.out.join("pca.csv"), &csv)?;
    write_image(&render_bar_rows(&bars, 6, 24), &g.out.join("pca.ppm"))?;
    println!("{} traces x {} steps -> {}", bars.len(), traces.first().map_or(0, |t| t.rows.len()), g.out.join("pca.csv").display());
    Ok(())
}

fn schedule_dump(g: &GlobalArgs) -> Result<()> {
    let cfg = load_config(g)?;
    let csv = cfg.diffusion.schedule()?.to_csv();
    std::io::stdout().write_all(csv.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
    if g.out != Path::new("dimr-out") {
        ensure_dir(&g.out)?;
        write_text(&g.out.join("schedule.csv"), &csv)?;
    }
    Ok(())
}

/// One machine-parsable line: `error kind=<kind> code=<exit> msg=<message>`.
pub fn error_line(e: &Error) -> String {
    format!("error kind={} code={} msg={}", e.kind(), e.exit_code(), e.to_string().replace('\n', " "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("dimr").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn global_flags_anywhere() {
        let c = parse(&["count-params", "--variant", "M/3R", "--set", "seed=3", "--csv"]);
        assert!(matches!(c.command, Command::CountParams { csv: true, .. }));
        assert_eq!(c.global.overrides, vec!["seed=3"]);
        assert!(Cli::try_parse_from(["dimr", "frobnicate"]).is_err());
    }

    #[test]
    fn unknown_override_is_config_error() {
        let c = parse(&["schedule-dump", "--set", "train.nope=1"]);
        let e = run(c).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(error_line(&e).starts_with("error kind=config code=2 msg="));
    }

    #[test]
    fn missing_checkpoint_is_io_error() {
        let c = parse(&["sample", "--checkpoint", "/nonexistent/ck.dimr"]);
        assert_eq!(run(c).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn centroid_of_single_pixel() {
        let mut img = vec![-1.0f32; 16];
        img[2 * 4 + 1] = 1.0;
        assert_eq!(bright_centroid(&img, 1, 4), (2.0, 1.0));
    }
}
