//! `ncl`: scene generation, backbone pretraining, episodic runs, ablations,
//! gradient checks and reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use ncl_core::error::Error;
use ncl_core::harness::gradsuite::{check_episode, check_ops, CheckOutcome};
use ncl_core::harness::report::{parse_results_csv, parse_skips_csv, skips_csv};
use ncl_core::harness::{
    build_report, pretrain_backbone, run_configs, EncodedPool, EpisodeResult, InitMode, Matrix,
    Pools, PretrainOptions, RunConfig, RunOutput, Skip,
};
use ncl_core::model::Model;
use ncl_core::params::ParamStore;
use ncl_core::sim::dataset::{check_disjoint, generate_split, read_split, write_split, Split};

#[derive(Parser)]
#[command(
    name = "ncl",
    version,
    about = "Few-shot traversability segmentation harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes to `<out>/scenes/<split>/`.
    GenData(GenData),
    /// Supervised pretraining of the frozen RGB encoder and fusion block.
    Pretrain(Pretrain),
    /// Adapt and evaluate one config over sampled episodes.
    RunEpisodes(RunEpisodes),
    /// Run an ablation matrix over shared episodes.
    Ablate(Ablate),
    /// Finite-difference gradient checks of every op and the episode loss.
    GradCheck(GradCheck),
    /// Merge run directories into one CSV and summary.
    Report(ReportCmd),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    /// Scenes per split.
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// train, support, query or all.
    #[arg(long, default_value = "all")]
    split: String,
    /// First scene seed; defaults to the split's own range.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 60)]
    height: usize,
    #[arg(long, default_value_t = 80)]
    width: usize,
}

#[derive(Args)]
struct Pretrain {
    /// Dataset root holding `scenes/train`.
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

/// Config sources; later sources win: defaults, file, shortcut flags, `--set`.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key=value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Comma-separated run seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Enabled modules, e.g. `use_H,use_n2p,pooling=gap`; unlisted switches
    /// are turned off.
    #[arg(long)]
    flags: Option<String>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(n) = self.episodes {
            cfg.episodes = n;
        }
        if let Some(s) = &self.seeds {
            cfg.set("seeds", s)?;
        }
        if let Some(flags) = &self.flags {
            apply_flags(&mut cfg, flags)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set `{kv}`: expected key=value")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn apply_flags(cfg: &mut RunConfig, flags: &str) -> ncl_core::error::Result<()> {
    cfg.use_h = false;
    cfg.use_w = false;
    cfg.use_n2p = false;
    for f in flags.split(',').map(str::trim).filter(|f| !f.is_empty()) {
        match f.split_once('=') {
            Some((k, v)) => cfg.set(&k.to_ascii_lowercase(), v)?,
            None => cfg.set(&f.to_ascii_lowercase(), "true")?,
        }
    }
    Ok(())
}

#[derive(Args)]
struct RunArgs {
    /// Frozen backbone checkpoint from `pretrain`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root holding `scenes/{support,query}` (and `train` for
    /// meta-initialization).
    #[arg(long)]
    scenes: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct RunEpisodes {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct Ablate {
    /// depth or ncl.
    #[arg(long)]
    matrix: String,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct GradCheck {
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
}

#[derive(Args)]
struct ReportCmd {
    /// A run directory, or a directory of run directories.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config name to pair against; defaults to the last config.
    #[arg(long)]
    baseline: Option<String>,
}

fn gen_data(a: &GenData) -> anyhow::Result<()> {
    let splits = match a.split.as_str() {
        "all" => Split::ALL.to_vec(),
        s => vec![Split::parse(s)?],
    };
    for split in splits {
        let base = a.seed.unwrap_or_else(|| split.base_seed());
        let t = Instant::now();
        let samples = generate_split(a.count, base, a.height, a.width)?;
        write_split(&a.out, split, &samples)?;
        info!(
            "{split}: {} scenes from seed {base} in {:.1}s",
            samples.len(),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn pretrain(a: &Pretrain) -> anyhow::Result<()> {
    let cfg = a.config.resolve()?;
    let mc = cfg.model_config();
    let samples = read_split(&a.scenes, Split::Train)?;
    info!(
        "pretraining on {} scenes for {} epochs",
        samples.len(),
        a.epochs
    );
    let opts = PretrainOptions {
        epochs: a.epochs,
        seed: a.seed,
        lr: a.lr,
        batch: a.batch,
    };
    let out = pretrain_backbone(&mc, &samples, opts)?;
    for (e, l) in out.losses.iter().enumerate() {
        info!("epoch {e}: loss {l:.4}");
    }
    info!("train mIoU {:.4}", out.miou(&mc, &samples)?);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    out.checkpoint.save(&a.out)?;
    println!("{}", out.checkpoint.checksum(&[""]));
    Ok(())
}

fn load_pools(
    run: &RunArgs,
    cfgs: &[RunConfig],
    frozen: &ParamStore<f32>,
) -> anyhow::Result<Pools> {
    let model = Model::new(cfgs[0].model_config())?;
    let support = read_split(&run.scenes, Split::Support)?;
    let query = read_split(&run.scenes, Split::Query)?;
    let train = if cfgs.iter().any(|c| c.init == InitMode::Meta) {
        Some(read_split(&run.scenes, Split::Train)?)
    } else {
        None
    };
    let empty = Vec::new();
    check_disjoint(&[
        ("train", train.as_ref().unwrap_or(&empty)),
        ("support", &support),
        ("query", &query),
    ])?;
    Ok(Pools {
        train: train
            .map(|t| EncodedPool::new(&model, frozen, t))
            .transpose()?,
        support: EncodedPool::new(&model, frozen, support)?,
        query: EncodedPool::new(&model, frozen, query)?,
    })
}

fn write_run(out_dir: &Path, cfgs: &[RunConfig], out: &RunOutput) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let report = build_report(&out.results, &out.skips, None)?;
    std::fs::write(out_dir.join("results.csv"), &report.csv)?;
    std::fs::write(out_dir.join("skips.csv"), skips_csv(&out.skips))?;
    std::fs::write(out_dir.join("summary.txt"), &report.summary)?;
    let mut config = String::new();
    for c in cfgs {
        writeln!(config, "[{}/k{}] {}", c.label(), c.k, c.fingerprint())?;
        config.push_str(&c.to_text());
        config.push('\n');
    }
    std::fs::write(out_dir.join("config.txt"), config)?;
    let mut timings = String::from("config,seed,episode,wall_secs\n");
    for r in &out.results {
        writeln!(
            timings,
            "{},{},{},{:.3}",
            r.config, r.seed, r.episode, r.wall_secs
        )?;
    }
    std::fs::write(out_dir.join("timings.txt"), timings)?;
    print!("{}", report.summary);
    Ok(())
}

fn run(run: &RunArgs, cfgs: Vec<RunConfig>) -> anyhow::Result<()> {
    let frozen = ParamStore::load(&run.ckpt)?;
    let pools = load_pools(run, &cfgs, &frozen)?;
    let t = Instant::now();
    let out = run_configs(&frozen, &pools, &cfgs)?;
    info!(
        "{} results, {} skipped in {:.1}s",
        out.results.len(),
        out.skips.len(),
        t.elapsed().as_secs_f64()
    );
    write_run(&run.out, &cfgs, &out)
}

fn grad_check(a: &GradCheck) -> anyhow::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.set("seeds", &a.seeds)?;
    let t = Instant::now();
    let mut outcomes = check_ops(&cfg.seeds)?;
    outcomes.extend(check_episode(&cfg.seeds)?);
    // Worst seed per check, in first-appearance order.
    let mut names: Vec<&str> = Vec::new();
    for o in &outcomes {
        if !names.contains(&o.name.as_str()) {
            names.push(&o.name);
        }
    }
    let mut failed = 0;
    for name in names {
        let worst: &CheckOutcome = outcomes
            .iter()
            .filter(|o| o.name == name)
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("named outcome");
        let status = if worst.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!worst.passed());
        println!(
            "{status:4} {name:28} {:.3e} (≤ {:.0e}, seed {})",
            worst.max_rel_error, worst.tolerance, worst.seed
        );
    }
    println!(
        "{} checks, {failed} failed, {:.1}s",
        outcomes.len(),
        t.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient checks failed")).into());
    }
    Ok(())
}

fn run_dirs(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.join("results.csv").is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("results.csv").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Validation(format!("no results.csv under {}", input.display())).into());
    }
    Ok(dirs)
}

fn report(a: &ReportCmd) -> anyhow::Result<()> {
    let mut results: Vec<EpisodeResult> = Vec::new();
    let mut skips: Vec<Skip> = Vec::new();
    for dir in run_dirs(&a.input)? {
        results.extend(parse_results_csv(&std::fs::read_to_string(
            dir.join("results.csv"),
        )?)?);
        let skip_path = dir.join("skips.csv");
        if skip_path.is_file() {
            skips.extend(parse_skips_csv(&std::fs::read_to_string(skip_path)?)?);
        }
    }
    let mut seen = BTreeSet::new();
    for r in &results {
        if !seen.insert((r.config.clone(), r.seed, r.episode)) {
            bail!(Error::Validation(format!(
                "duplicate row for {} seed {} episode {}",
                r.config, r.seed, r.episode
            )));
        }
    }
    let rep = build_report(&results, &skips, a.baseline.as_deref())?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("results.csv"), &rep.csv)?;
    std::fs::write(a.out.join("summary.txt"), &rep.summary)?;
    std::fs::write(a.out.join("skips.csv"), skips_csv(&skips))?;
    print!("{}", rep.summary);
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Pretrain(a) => pretrain(&a),
        Command::RunEpisodes(a) => {
            let cfg = a.run.config.resolve()?;
            run(&a.run, vec![cfg])
        }
        Command::Ablate(a) => {
            let matrix = Matrix::parse(&a.matrix)?;
            let base = a.run.config.resolve()?;
            run(&a.run, matrix.configs(&base))
        }
        Command::GradCheck(a) => grad_check(&a),
        Command::Report(a) => report(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(2, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
