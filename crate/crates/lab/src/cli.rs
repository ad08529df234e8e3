//! The `mpn` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mpn_core::gradcheck;

use crate::ablate::{grid_csv, run_grid, worker_threads};
use crate::config::{manifest, write_manifest, Config};
use crate::corpus::Corpus;
use crate::error::{contract_err, usage_err, Error, Result};
use crate::settings::{Ablation, TrainSettings};
use crate::synth::{generate, CorpusSpec};
use crate::{checkpoint, evaluate, priordebug, trainer};

#[derive(Parser)]
#[command(name = "mpn", version, about = "Part-aware re-identification laboratory")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pedestrian corpus with ground-truth maps.
    GenData(GenDataArgs),
    /// Train one configuration on a corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus holdout split.
    Eval(EvalArgs),
    /// Run the (mode x seed) ablation grid and emit the component table.
    Ablate(AblateArgs),
    /// Verify tape gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Render the coarse-prior pipeline for one map pair.
    PriorDebug(PriorDebugArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Corpus spec file (flat key=value); defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Spec overrides as key=value.
    #[arg(long = "set")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training config file (flat key=value).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of identities treated as the held-out query/gallery pool.
    #[arg(long, default_value_t = 0.25)]
    holdout: f64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated ablation modes.
    #[arg(long)]
    modes: String,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: String,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set")]
    set: Vec<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// "op" checks every tensor operation; "model" checks the full
    /// objective on a 2x2 micro model.
    #[arg(long, default_value = "op")]
    scope: String,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOL)]
    tol: f64,
}

#[derive(Args)]
struct PriorDebugArgs {
    /// Pedestrian image (shown for context only).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Comma-separated parsing,segmentation PGM paths.
    #[arg(long)]
    maps: String,
    /// Label-table sidecar (informational).
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 24)]
    feat_h: usize,
    #[arg(long, default_value_t = 8)]
    feat_w: usize,
    #[arg(long, default_value_t = 6)]
    k: usize,
}

/// Parses argv and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are not usage errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Ablate(args) => ablate(args),
        Command::Gradcheck(args) => gradcheck_cmd(args),
        Command::PriorDebug(args) => prior_debug(args),
    }
}

fn load_config(path: &Option<PathBuf>, overrides: &[String]) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::from_file(p)?,
        None => Config::empty(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = load_config(&args.spec, &args.set)?;
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string());
    }
    let spec = CorpusSpec::from_config(&cfg)?;
    let summary = generate(&spec, &args.out)?;
    write_manifest(&args.out, "gen-data", &spec.entries())?;
    println!(
        "corpus: {} identities x {} images = {} files at {}x{} ({} corrupted maps)",
        summary.identities,
        spec.images_per_identity,
        summary.images,
        spec.image_h,
        spec.image_w,
        summary.corrupted
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.set)?;
    let settings = TrainSettings::from_config(&cfg)?;
    let corpus = Corpus::load(&args.corpus)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_manifest(&args.out, "train", &settings.entries())?;
    let outcome = trainer::train_run(&settings, &corpus, &args.out)?;
    println!(
        "trained {} for {} epochs: rank1={:.4} mAP={:.4}",
        settings.ablation.as_str(),
        settings.epochs,
        outcome.final_rank1,
        outcome.final_map
    );
    println!("checkpoint: {}", outcome.checkpoint_dir.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let mut model = checkpoint::load(&args.checkpoint)?;
    let corpus = Corpus::load(&args.corpus)?;
    let output = evaluate::evaluate_holdout(&mut model, &corpus, args.holdout)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    evaluate::write_reports(&args.out, &corpus, &output)?;
    write_manifest(
        &args.out,
        "eval",
        &[
            ("checkpoint".into(), args.checkpoint.display().to_string()),
            ("corpus".into(), args.corpus.display().to_string()),
            ("holdout".into(), args.holdout.to_string()),
        ],
    )?;
    println!(
        "queries: {} ranked, {} skipped (no reachable match)",
        output.ranking.ranked_queries.len(),
        output.ranking.skipped_queries.len()
    );
    println!(
        "rank1={:.4} mAP={:.4}",
        output.ranking.rank1, output.ranking.map
    );
    Ok(())
}

fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    raw.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| usage_err!("bad seed {:?}", t))
        })
        .collect()
}

fn ablate(args: AblateArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.set)?;
    let settings = TrainSettings::from_config(&cfg)?;
    let corpus = Corpus::load(&args.corpus)?;
    let modes: Vec<Ablation> = args
        .modes
        .split(',')
        .map(|m| Ablation::parse(m.trim()))
        .collect::<Result<_>>()?;
    let seeds = parse_seeds(&args.seeds)?;
    let work_dir = args
        .out
        .parent()
        .unwrap_or(Path::new("."))
        .join(format!(
            "{}_runs",
            args.out.file_stem().and_then(|s| s.to_str()).unwrap_or("ablate")
        ));
    let cells = run_grid(&settings, &corpus, &modes, &seeds, &work_dir, worker_threads())?;
    let csv = grid_csv(&cells);
    fs::write(&args.out, &csv).map_err(|e| Error::io(&args.out, e))?;
    let mut entries = settings.entries();
    entries.push(("modes".into(), args.modes.clone()));
    entries.push(("seeds".into(), args.seeds.clone()));
    fs::write(
        args.out.with_extension("manifest.txt"),
        manifest("ablate", &entries),
    )
    .map_err(|e| Error::io(&args.out, e))?;
    print!("{csv}");
    for (mode, mean) in crate::ablate::mean_map(&cells) {
        println!("# mean mAP {} = {:.4}", mode.as_str(), mean);
    }
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<()> {
    let start = Instant::now();
    println!("{}", manifest("gradcheck", &[
        ("scope".into(), args.scope.clone()),
        ("tol".into(), args.tol.to_string()),
    ]).trim_end());
    let mut all_ok = true;
    match args.scope.as_str() {
        "op" => {
            for case in gradcheck::op_checks() {
                let report = gradcheck::run_case(&case, gradcheck::DEFAULT_STEP)?;
                let ok = report.passes(args.tol);
                all_ok &= ok;
                println!(
                    "{} {:<32} max_rel_err={:.3e} ({} coords)",
                    if ok { "pass" } else { "FAIL" },
                    case.name,
                    report.max_rel_err,
                    report.checked
                );
            }
        }
        "model" => {
            let cfg = mpn_core::model::MpnConfig::micro(2);
            let mut model = mpn_core::model::MpnModel::new(cfg.clone(), 2026)
                .map_err(Error::from)?;
            let batch = gradcheck::micro_batch(&cfg, 31);
            let settings = gradcheck::full_settings();
            let outcome = gradcheck::check_model(&mut model, &batch, &settings, gradcheck::DEFAULT_STEP)
                .map_err(Error::from)?;
            let ok = outcome.max_rel_err < args.tol;
            all_ok &= ok;
            println!(
                "{} full_objective max_rel_err={:.3e} over {} coordinates (worst {})",
                if ok { "pass" } else { "FAIL" },
                outcome.max_rel_err,
                outcome.checked,
                outcome.worst_param
            );
        }
        other => return Err(usage_err!("--scope must be op or model, got {:?}", other)),
    }
    println!("elapsed: {:.1}s", start.elapsed().as_secs_f64());
    if !all_ok {
        return Err(Error::Numeric(format!(
            "gradient check exceeded tolerance {}",
            args.tol
        )));
    }
    Ok(())
}

fn prior_debug(args: PriorDebugArgs) -> Result<()> {
    let parts: Vec<&str> = args.maps.split(',').collect();
    let [parse_path, seg_path] = parts.as_slice() else {
        return Err(usage_err!("--maps expects parsing.pgm,segmentation.pgm"));
    };
    println!("{}", manifest("prior-debug", &[
        ("maps".into(), args.maps.clone()),
        ("feat_h".into(), args.feat_h.to_string()),
        ("feat_w".into(), args.feat_w.to_string()),
        ("k".into(), args.k.to_string()),
    ]).trim_end());
    if let Some(image) = &args.image {
        let img = crate::pnm::read_ppm(image)?;
        println!("image: {}x{} {}", img.h, img.w, image.display());
    }
    if let Some(labels) = &args.labels {
        let text = fs::read_to_string(labels).map_err(|e| Error::io(labels, e))?;
        println!("labels: {}", text.lines().collect::<Vec<_>>().join(" "));
    }
    let maps = priordebug::load_maps(Path::new(parse_path), Path::new(seg_path))?;
    if args.feat_h < args.k || args.k == 0 {
        return Err(contract_err!("feature height {} cannot carry K={}", args.feat_h, args.k));
    }
    let prior = mpn_core::prior::build_prior(&maps, args.feat_h, args.feat_w, args.k)?;
    print!("{}", priordebug::render(&maps, &prior, args.k));
    Ok(())
}
