//! `xdwaf`: train and run cross-domain web attack detectors.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::info;
use xdwaf_core::detect::{detect_stream, ScoreCache};
use xdwaf_core::io::{read_jsonl, write_jsonl};
use xdwaf_core::pipeline::{Layout, Pipeline};
use xdwaf_core::synth::{generate_synthetic, Record, SplitSize, SyntheticSpec};
use xdwaf_core::Error;

use config::Settings;

#[derive(Debug, Parser)]
#[command(name = "xdwaf", version, about = "Cross-domain zero-day web attack detection")]
struct Cli {
    /// TOML file with run settings. Flags override its values.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    settings: Settings,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Induce merging strategies and write merged sequences for every domain.
    Preprocess,
    /// Train skip-gram embeddings for every preprocessed domain.
    Embed,
    /// Select the base domain and align all domains to it.
    Align,
    /// Meta-train the universal initial model on the auxiliary domains.
    MetaTrain,
    /// Adapt the universal model to the target domain.
    Adapt,
    /// Score requests and write one verdict per line.
    Detect {
        /// Line-delimited request records.
        #[arg(long, short)]
        input: PathBuf,
        /// Verdict output. Standard output when omitted.
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[arg(long)]
        no_cache: bool,
    },
    /// Score the labeled target test file and write metrics.
    Eval,
    /// Generate labeled synthetic corpora, one train and test file per domain.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        domains: usize,
        #[arg(long, default_value_t = 50_000)]
        train: usize,
        #[arg(long, default_value_t = 10_000)]
        test: usize,
        /// Fraction of path words and keys drawn from the shared pool.
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        #[arg(long, default_value_t = 0.05)]
        attack_rate: f64,
        /// Fraction of attack records injected into training splits.
        #[arg(long, default_value_t = 0.0)]
        poison: f64,
        #[arg(long)]
        identical_grammars: bool,
    },
    /// Run every stage end to end.
    Run {
        /// Reuse artifacts already present under the artifact root.
        #[arg(long)]
        resume: bool,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| match c.downcast_ref::<Error>() {
        Some(Error::Config(_)) => true,
        Some(Error::Stage { stage, .. }) => *stage == "config",
        _ => c.downcast_ref::<toml::de::Error>().is_some(),
    })
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    let settings = cli.settings.over(file);
    let config = settings.run_config();
    config.hyper().validate()?;

    match cli.command {
        Command::Synth {
            out,
            domains,
            train,
            test,
            overlap,
            attack_rate,
            poison,
            identical_grammars,
        } => synth(
            &out,
            SyntheticSpec {
                sizes: vec![SplitSize { train, test }; domains],
                overlap,
                identical_grammars,
                attack_rate,
                poison_ratio: poison,
                seed: config.seed,
            },
        ),
        Command::ShowConfig => {
            print!("{}", toml::to_string_pretty(&config)?);
            Ok(())
        }
        Command::Run { resume } => {
            require_inputs(&settings)?;
            let outcome = Pipeline::new(config, resume).run()?;
            println!("{}", serde_json::to_string_pretty(&outcome)?);
            Ok(())
        }
        command => {
            require_inputs(&settings)?;
            let pipeline = Pipeline::new(config, true);
            staged(&pipeline, command)
        }
    }
}

fn require_inputs(s: &Settings) -> anyhow::Result<()> {
    if s.aux.is_empty() || s.target_train.is_none() {
        return Err(Error::Config("auxiliary files and a target training file are required".into()).into());
    }
    Ok(())
}

/// Removes the artifacts of the stage at `from` and of every later stage.
fn invalidate(pipeline: &Pipeline, from: usize) -> anyhow::Result<()> {
    let layout: &Layout = &pipeline.layout;
    let mut domains = pipeline.aux_ids()?;
    domains.push(pipeline.target_id()?);
    let per_domain = |f: fn(&Layout, &str) -> PathBuf| domains.iter().map(|d| f(layout, d)).collect::<Vec<_>>();
    let stages: [Vec<PathBuf>; 6] = [
        [per_domain(Layout::strategy), per_domain(Layout::sequences)].concat(),
        per_domain(Layout::embedding),
        vec![layout.representation()],
        vec![layout.universal(), layout.meta_report()],
        vec![layout.target_model()],
        vec![layout.detector(), layout.verdicts(), layout.metrics()],
    ];
    for path in stages[from..].iter().flatten() {
        if path.exists() {
            std::fs::remove_file(path).with_context(|| format!("removing {}", path.display()))?;
        }
    }
    Ok(())
}

fn staged(pipeline: &Pipeline, command: Command) -> anyhow::Result<()> {
    let cfg = &pipeline.config;
    match command {
        Command::Preprocess => {
            invalidate(pipeline, 0)?;
            for p in cfg.auxiliary.iter().chain([&cfg.target_train]) {
                let (strategy, seqs) = pipeline.preprocess_file(p)?;
                info!(
                    "{}: {} rules, {} tokens, {} sequences",
                    strategy.domain_id,
                    strategy.rules.len(),
                    strategy.token_set.len(),
                    seqs.len()
                );
            }
        }
        Command::Embed => {
            invalidate(pipeline, 1)?;
            for id in pipeline.aux_ids()?.into_iter().chain([pipeline.target_id()?]) {
                let d = pipeline.embed_domain(&id)?;
                info!("{id}: {} x {} embedding", d.embedding.vectors.rows(), d.embedding.dim());
            }
        }
        Command::Align => {
            invalidate(pipeline, 2)?;
            let rep = pipeline.align()?;
            info!("base domain `{}`, {} aligned domains", rep.base_domain, rep.transforms.len());
        }
        Command::MetaTrain => {
            invalidate(pipeline, 3)?;
            let model = pipeline.meta_train()?;
            info!("universal model over {} auxiliary domains", model.banks.len());
        }
        Command::Adapt => {
            invalidate(pipeline, 4)?;
            let params = pipeline.adapt()?;
            info!("adapted model for `{}`", params.space.domain_id);
        }
        Command::Eval => {
            invalidate(pipeline, 5)?;
            let outcome = pipeline.evaluate()?;
            println!("{}", serde_json::to_string_pretty(&outcome)?);
        }
        Command::Detect {
            input,
            output,
            no_cache,
        } => detect(pipeline, &input, output.as_deref(), no_cache)?,
        Command::Synth { .. } | Command::Run { .. } | Command::ShowConfig => unreachable!("handled by execute"),
    }
    Ok(())
}

fn detect(pipeline: &Pipeline, input: &Path, output: Option<&Path>, no_cache: bool) -> anyhow::Result<()> {
    let detector = pipeline.calibrate()?;
    let records: Vec<Record> = read_jsonl(input)?;
    let target = &detector.strategy().domain_id;
    if let Some(r) = records.iter().find(|r| &r.request.domain_id != target) {
        bail!("request for domain `{}` given to the detector of `{target}`", r.request.domain_id);
    }
    let cache = (!no_cache).then(|| ScoreCache::new(pipeline.config.hyper().cache_capacity));
    let mut sink: Box<dyn Write> = match output {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    let mut attacks = 0usize;
    let n = records.len();
    for result in detect_stream(&detector, cache.as_ref(), records.into_iter().map(|r| r.request)) {
        let result = result?;
        attacks += usize::from(result.verdict == xdwaf_core::detect::Verdict::Attack);
        serde_json::to_writer(&mut sink, &result)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    info!("{n} requests, {attacks} attacks, {} model calls", detector.invocations());
    Ok(())
}

fn synth(out: &Path, spec: SyntheticSpec) -> anyhow::Result<()> {
    let corpora = generate_synthetic(&spec)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for c in &corpora {
        write_jsonl(&out.join(format!("{}_train.jsonl", c.domain_id)), &c.train)?;
        if !c.test.is_empty() {
            write_jsonl(&out.join(format!("{}_test.jsonl", c.domain_id)), &c.test)?;
        }
        info!("{}: {} train, {} test records", c.domain_id, c.train.len(), c.test.len());
    }
    Ok(())
}
