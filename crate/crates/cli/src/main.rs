use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use herc::graph::build_graph;
use herc::model::AblationMode;
use herc::suite::{run_suite, summarize, SuiteModule};
use herc::synth::{generate, read_corpus, split, write_corpus, Corpus, Dialogue, Header, SynthSpec};
use herc::train::{ablation_ladder, evaluate, ladder_means, ladder_table, route_stats, train, Checkpoint, RunConfig};
use herc::{Modality, Parallelism};

#[derive(Parser)]
#[command(name = "herc", version, about = "Hotspot-gated multimodal emotion recognition on synthetic conversations")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus from a synthetic spec.
    GenData {
        /// JSON spec; missing keys take the defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and report test metrics of the best-dev checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        ablation: Option<AblationMode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Write the node and typed-edge lists of the split's first dialogue graph.
        #[arg(long)]
        dump_graph: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Per-pair expert usage of a checkpoint.
    RouteStats {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::All)]
        split: SplitName,
    },
    /// Train baseline, hgf and hgf+moa on the same corpus per seed and compare.
    AblationLadder {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Also write every run as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Dev,
    Test,
    All,
}

fn parse_mode(s: &str) -> std::result::Result<AblationMode, String> {
    s.parse().map_err(|e: herc::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let par = if cli.sequential { Parallelism::Sequential } else { Parallelism::Rayon };
    let mut out = io::stdout().lock();
    match cli.command {
        Command::GenData { spec, out: path } => {
            let spec: SynthSpec = match spec {
                Some(p) => serde_json::from_str(&read(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => SynthSpec::default(),
            };
            let dialogues = generate(&spec, par)?;
            let n = dialogues.len();
            write_corpus(&Corpus { header: Header::for_spec(&spec), dialogues }, &path)?;
            writeln!(out, "wrote {n} dialogues to {}", path.display())?;
        }
        Command::Train { config, ablation, seed, out_dir } => {
            let mut c = RunConfig::load(&config)?;
            if let Some(m) = ablation {
                c.model.ablation = m;
            }
            if let Some(s) = seed {
                c.seed = s;
            }
            if out_dir.is_some() {
                c.out_dir = out_dir;
            }
            if cli.sequential {
                c.parallelism = Parallelism::Sequential;
            }
            let (data, outcome) = train(&c, &mut out)?;
            let test = evaluate(&outcome.best.model, &data.test, data.config.parallelism)?;
            writeln!(out, "{}", serde_json::json!({ "best_epoch": outcome.best.header.epoch, "test": test.metrics }))?;
        }
        Command::Eval { ckpt, data, split: which, dump_graph } => {
            let ck = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let dialogues = select(&ck.header.config, &data, which)?;
            if let Some(path) = dump_graph {
                let graph = build_graph(dialogues[0].len(), &Modality::ALL, &ck.model.config.graph);
                fs::write(&path, serde_json::to_string_pretty(&graph.dump())?)?;
            }
            let eval = evaluate(&ck.model, &dialogues, par)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&eval.metrics)?)?;
        }
        Command::Gradcheck { module, seeds } => {
            let modules = if module == "all" { SuiteModule::ALL.to_vec() } else { vec![module.parse::<SuiteModule>()?] };
            let seeds: Vec<u64> = (0..seeds).collect();
            let mut ok = true;
            for m in modules {
                let results = run_suite(m, &seeds, par)?;
                let s = summarize(m, &results);
                for r in results.iter().filter(|r| !r.passed) {
                    writeln!(out, "  FAIL {} {} seed {}: {:.3e}", m, r.case, r.seed, r.max_rel_error)?;
                }
                let verdict = if s.passed() { "PASS" } else { "FAIL" };
                writeln!(out, "{verdict} {:<10} {} checks, max rel error {:.3e} (tol {:.0e})", m.name(), s.cases, s.max_rel_error, s.tol)?;
                ok &= s.passed();
            }
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::RouteStats { ckpt, data, split: which } => {
            let ck = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let dialogues = select(&ck.header.config, &data, which)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&route_stats(&ck.model, &dialogues, par)?)?)?;
        }
        Command::AblationLadder { config, seeds, out: json } => {
            let c = RunConfig::load(&config)?;
            let runs = ablation_ladder(&c, &seeds, &AblationMode::LADDER, par)?;
            write!(out, "{}", ladder_table(&runs))?;
            if let Some(path) = json {
                let means: Vec<_> = ladder_means(&runs).into_iter().map(|(m, acc, f1)| serde_json::json!({ "mode": m, "accuracy": acc, "weighted_f1": f1 })).collect();
                fs::write(&path, serde_json::to_string_pretty(&serde_json::json!({ "runs": runs, "means": means }))?)?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Splits `data` the way the run that produced the checkpoint did.
fn select(config: &RunConfig, data: &Path, which: SplitName) -> Result<Vec<Dialogue>> {
    let corpus = read_corpus(data).with_context(|| format!("reading {}", data.display()))?;
    let dialogues = match which {
        SplitName::All => corpus.dialogues,
        _ => {
            let (train, dev, test) = split(&corpus.dialogues, config.split, config.seed)?;
            match which {
                SplitName::Train => train,
                SplitName::Dev => dev,
                _ => test,
            }
        }
    };
    if dialogues.is_empty() {
        bail!("the selected split of {} is empty", data.display());
    }
    Ok(dialogues)
}
