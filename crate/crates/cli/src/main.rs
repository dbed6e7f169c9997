use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use spectra_cli::commands::{self, scaling::PointSpec, synth::SynthKind};
use spectra_cli::config::{parse_pairs, RunConfig};
use spectra_cli::exit::{self, UsageError, ValidationFailed};
use spectra_cli::report::ReportDir;
use spectra_cli::validate::{self, Tolerances};

/// Spectral analysis of transformer hidden-state traces.
#[derive(Debug, Parser)]
#[command(name = "spectra", version, about)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root (else config, then $SPECTRA_OUT_DIR, then ./spectra-out);
    /// each command writes to a subdirectory named after it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CorpusArgs {
    /// Corpus manifest JSON.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Relative singular-value drop threshold.
    #[arg(long)]
    drop_threshold: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-layer and per-phase alpha tables, category deltas, prompt/response
    /// shifts and family scaling.
    Phase {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Comma-separated layers for the per-trace scalars.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long)]
        category_a: Option<String>,
        #[arg(long)]
        category_b: Option<String>,
    },
    /// Token trajectories, spikes and cross-layer cascades.
    #[command(alias = "cascade")]
    Tokens {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        sigma_smooth: Option<f64>,
        /// Comma-separated layers for trajectories and spikes.
        #[arg(long, value_delimiter = ',')]
        target_layers: Option<Vec<usize>>,
        /// Layer pairs such as `0-9,9-18`.
        #[arg(long)]
        layer_pairs: Option<String>,
        /// JSON list of marker tokens.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        spike_multiplier: Option<f64>,
        #[arg(long)]
        align_radius: Option<usize>,
        #[arg(long)]
        head_len: Option<usize>,
    },
    /// Cross-validated correctness prediction.
    Predict {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Held-out corpus for transfer evaluation.
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        /// `phase` or `layer:N`.
        #[arg(long)]
        feature_mode: Option<String>,
        /// `full`, `prompt`, `response` or `a:b`.
        #[arg(long)]
        token_scope: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_perm: Option<usize>,
        #[arg(long)]
        sweep_n_perm: Option<usize>,
        /// Skip the per-layer sweep.
        #[arg(long)]
        no_sweep: bool,
        #[arg(long)]
        l2: Option<f64>,
    },
    /// OLS of delta alpha on log parameter count.
    Scaling {
        /// A point `N=delta`, e.g. `0.5B=-0.219`; repeatable.
        #[arg(long = "point", value_parser = parse_point_arg)]
        points: Vec<PointSpec>,
        /// JSON list of `{model | n_params, delta}` objects.
        #[arg(long)]
        points_file: Option<PathBuf>,
    },
    /// Run the acceptance battery.
    Validate {
        /// Criterion ids to run; repeatable. Default: all.
        #[arg(long)]
        only: Vec<String>,
        /// JSON object overriding tolerance fields.
        #[arg(long)]
        tolerances: Option<PathBuf>,
        /// List criterion ids and exit.
        #[arg(long)]
        list: bool,
    },
    /// Print one trace's metadata.
    Inspect {
        trace: PathBuf,
        /// Decode the payload and check every invariant.
        #[arg(long)]
        full: bool,
    },
    /// Write a seeded synthetic corpus.
    Synth {
        #[arg(value_enum)]
        kind: SynthKind,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synthetic-1B")]
        model: String,
        #[arg(long, default_value_t = 12)]
        num_layers: usize,
        #[arg(long, default_value_t = 64)]
        total_len: usize,
        #[arg(long, default_value_t = 16)]
        prompt_len: usize,
        #[arg(long, default_value_t = 32)]
        hidden_dim: usize,
        /// Destination directory (default: `<out>/synth/<kind>`).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

fn parse_point_arg(s: &str) -> Result<PointSpec, String> {
    commands::scaling::parse_point(s).map_err(|e| e.to_string())
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if cli.out.is_some() {
        cfg.output_dir = cli.out.clone();
    }
    Ok(cfg)
}

fn apply_corpus(cfg: &mut RunConfig, c: &CorpusArgs) {
    if c.manifest.is_some() {
        cfg.manifest = c.manifest.clone();
    }
    set(&mut cfg.drop_threshold, c.drop_threshold);
}

fn report_dir(cfg: &RunConfig, name: &str) -> Result<ReportDir> {
    let dir = cfg.resolve_output_dir().join(name);
    ReportDir::create(&dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn print_written(out: &ReportDir) {
    for p in out.written() {
        println!("wrote {}", p.display());
    }
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("-".into(), |x| format!("{x:.digits$}"))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    match cli.command {
        Command::Phase {
            corpus,
            layers,
            category_a,
            category_b,
        } => {
            apply_corpus(&mut cfg, &corpus);
            if layers.is_some() {
                cfg.layers = layers;
            }
            set(&mut cfg.category_a, category_a);
            set(&mut cfg.category_b, category_b);
            cfg.validate()?;
            let mut out = report_dir(&cfg, "phase")?;
            let res = commands::phase::run(&cfg, &mut out)?;
            println!("model\tn\talpha_a\talpha_b\tdelta\tp\tshift\tregime");
            for m in &res.table.models {
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    m.model,
                    m.n_traces,
                    fmt_opt(m.alpha_a, 4),
                    fmt_opt(m.alpha_b, 4),
                    fmt_opt(m.delta.as_ref().map(|d| d.delta), 4),
                    fmt_opt(m.p_value, 4),
                    fmt_opt(m.shift.as_ref().map(|s| s.shift), 4),
                    m.regime.map_or("-".into(), |r| r.to_string()),
                );
            }
            print_written(&out);
        }
        Command::Tokens {
            corpus,
            window,
            sigma_smooth,
            target_layers,
            layer_pairs,
            lexicon,
            spike_multiplier,
            align_radius,
            head_len,
        } => {
            apply_corpus(&mut cfg, &corpus);
            set(&mut cfg.window, window);
            set(&mut cfg.sigma_smooth, sigma_smooth);
            if target_layers.is_some() {
                cfg.target_layers = target_layers;
            }
            if let Some(p) = layer_pairs {
                cfg.layer_pairs = Some(parse_pairs(&p)?);
            }
            if lexicon.is_some() {
                cfg.lexicon = lexicon;
            }
            set(&mut cfg.spike_multiplier, spike_multiplier);
            set(&mut cfg.align_radius, align_radius);
            set(&mut cfg.head_len, head_len);
            cfg.validate()?;
            let mut out = report_dir(&cfg, "tokens")?;
            let res = commands::tokens::run(&cfg, &mut out)?;
            let n_spikes: usize = res.spikes.reports.iter().map(|r| r.spike_positions.len()).sum();
            println!(
                "{} spike reports, {n_spikes} spikes, {} skipped",
                res.spikes.reports.len(),
                res.spikes.skipped.len()
            );
            for c in &res.cascades {
                let fit = c.result.as_ref().and_then(|r| r.fit.as_ref());
                println!(
                    "{}: A = {}, tau = {}, r = {}",
                    c.model,
                    fmt_opt(fit.map(|f| f.amplitude), 4),
                    fmt_opt(fit.map(|f| f.length_scale), 3),
                    fmt_opt(fit.and_then(|f| f.pearson_r_loglinear), 4),
                );
                for n in &c.notes {
                    println!("  note: {n}");
                }
            }
            print_written(&out);
        }
        Command::Predict {
            corpus,
            test_manifest,
            feature_mode,
            token_scope,
            k,
            seed,
            n_perm,
            sweep_n_perm,
            no_sweep,
            l2,
        } => {
            apply_corpus(&mut cfg, &corpus);
            if test_manifest.is_some() {
                cfg.test_manifest = test_manifest;
            }
            set(&mut cfg.feature_mode, feature_mode);
            set(&mut cfg.token_scope, token_scope);
            set(&mut cfg.k, k);
            set(&mut cfg.seed, seed);
            set(&mut cfg.n_perm, n_perm);
            set(&mut cfg.sweep_n_perm, sweep_n_perm);
            set(&mut cfg.l2, l2);
            if no_sweep {
                cfg.sweep = false;
            }
            cfg.validate()?;
            let mut out = report_dir(&cfg, "predict")?;
            let res = commands::predict::run(&cfg, &mut out)?;
            println!("model\tn\tauc\tstd\tp\tdegenerate");
            for m in &res.models {
                match &m.cv {
                    Some(cv) => println!(
                        "{}\t{}\t{:.4}\t{:.4}\t{}\t{}",
                        m.model,
                        cv.n_samples,
                        cv.mean_auc,
                        cv.std_auc,
                        fmt_opt(cv.permutation_p, 4),
                        cv.degenerate
                    ),
                    None => println!("{}\t{}\t-\t-\t-\t-\t({})", m.model, m.n_traces, m.notes.join("; ")),
                }
            }
            if let Some(c) = &res.capability {
                println!(
                    "capability: spearman = {}, p = {}",
                    fmt_opt(c.spearman, 4),
                    fmt_opt(c.p_value, 4)
                );
            }
            print_written(&out);
        }
        Command::Scaling {
            mut points,
            points_file,
        } => {
            if let Some(p) = points_file {
                points.extend(commands::scaling::read_points(&p)?);
            }
            if points.is_empty() {
                return Err(UsageError("no points given (--point or --points-file)".into()).into());
            }
            let mut out = report_dir(&cfg, "scaling")?;
            let fit = commands::scaling::run(&points, &mut out)?;
            println!(
                "slope = {:.6}, intercept = {:.6}, R2 = {:.4}",
                fit.slope, fit.intercept, fit.r_squared
            );
            print_written(&out);
        }
        Command::Validate { only, tolerances, list } => {
            let criteria = validate::criteria();
            if list {
                for c in &criteria {
                    println!("{}\t{}", c.id, c.title);
                }
                return Ok(());
            }
            if let Some(bad) = only.iter().find(|o| !criteria.iter().any(|c| c.id == o.as_str())) {
                return Err(UsageError(format!("unknown criterion {bad:?} (see --list)")).into());
            }
            let tol = match tolerances {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| UsageError(format!("cannot read tolerances {}: {e}", p.display())))?;
                    serde_json::from_str(&text)
                        .map_err(|e| UsageError(format!("invalid tolerances {}: {e}", p.display())))?
                }
                None => Tolerances::default(),
            };
            let results = validate::run_all(&tol, &only, |r| {
                println!("{}", r.line());
                for d in &r.details {
                    println!("    {d}");
                }
            });
            let mut out = report_dir(&cfg, "validate")?;
            out.json("tolerances.json", &tol)?;
            out.json("validation.json", &results)?;
            print_written(&out);
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(ValidationFailed {
                    failed,
                    total: results.len(),
                }
                .into());
            }
        }
        Command::Inspect { trace, full } => {
            let report = commands::inspect::run(&trace, full)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(v) = &report.violations {
                if !v.is_empty() {
                    anyhow::bail!("{} has {} invariant violations", trace.display(), v.len());
                }
            }
        }
        Command::Synth {
            kind,
            n,
            seed,
            model,
            num_layers,
            total_len,
            prompt_len,
            hidden_dim,
            dest,
        } => {
            let params = commands::synth::SynthParams {
                kind,
                n,
                seed,
                model_name: model,
                num_layers,
                total_len,
                prompt_len,
                hidden_dim,
            };
            let dest = dest.unwrap_or_else(|| {
                let name = format!("{kind:?}").to_lowercase();
                cfg.resolve_output_dir().join("synth").join(name)
            });
            let manifest = commands::synth::run(&params, &dest)?;
            println!("wrote {}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                exit::USAGE as u8
            } else {
                exit::SUCCESS as u8
            });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot start {jobs} worker threads: {e}");
            return ExitCode::from(exit::USAGE as u8);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::exit_code(&e) as u8)
        }
    }
}
