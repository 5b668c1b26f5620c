//! Command-line front-end: run the training pipeline (whole plans, single
//! stages, or supervision sweeps), build the synthetic corpus, score
//! hypothesis files, and expose the sealed-answer oracle transcriber.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use asrlab::corpus::{Manifest, Role, TextNormalizer, Utterance};
use asrlab::decode::read_hypotheses_tsv;
use asrlab::eval::{character_error_rate, word_error_rate};
use asrlab::pipeline::{
    full_plan, make_toy_corpus, run_plan, sweep_supervision, PipelineConfig, PipelineError, Stage,
    StageCtx, SweepCondition, ToyCorpusSpec,
};

#[derive(Parser)]
#[command(name = "asrlab", version, about = "Limited-supervision speech recognition laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct PlanArgs {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding stage outputs, markers, and reports.
    #[arg(long)]
    experiment_dir: PathBuf,
    /// Overrides the shared seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Wipe and rerun stages whose completion markers no longer match.
    #[arg(long)]
    force: bool,
    /// Dotted configuration override, e.g. `shared.supervised_hours=0.5`;
    /// repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl PlanArgs {
    fn effective_overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(seed) = self.seed {
            o.push(format!("shared.seed={seed}"));
        }
        o
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    plan: PlanArgs,
    /// Comma-separated stage names to run instead of the whole plan.
    #[arg(long)]
    stages: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    plan: PlanArgs,
    /// Comma-separated supervised-hours settings; -1 keeps everything.
    #[arg(long, default_value = "-1")]
    hours: String,
    /// Comma-separated subset strategies to cross with the hours.
    #[arg(long, default_value = "random_utterance")]
    strategies: String,
}

#[derive(Args)]
struct ToyArgs {
    /// Corpus output directory.
    #[arg(long)]
    out: PathBuf,
    /// Generator settings as JSON; defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the seed from the spec.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Reference manifest with transcripts.
    #[arg(long)]
    refs: PathBuf,
    /// Hypothesis TSV as written by the decoders.
    #[arg(long)]
    hyps: PathBuf,
    /// Report path prefix; writes `<prefix>.wer.json`, `<prefix>.cer.json`,
    /// and `<prefix>.align.txt`.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    /// Sealed answer key (`utt_id<TAB>text` with a header line).
    #[arg(long)]
    answers: PathBuf,
    /// Manifest whose utterances should be "transcribed".
    #[arg(long)]
    manifest: PathBuf,
    /// Hypothesis TSV to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a stage plan (default: every stage in order).
    Run(RunArgs),
    /// Run the supervised baseline stage.
    #[command(name = "baseline_supervised")]
    BaselineSupervised(PlanArgs),
    /// Run the encoder feature-dumping stage.
    #[command(name = "dump_features")]
    DumpFeatures(PlanArgs),
    /// Run the clustering stage.
    #[command(name = "kmeans")]
    Kmeans(PlanArgs),
    /// Run the masked cluster-prediction pretraining stage.
    #[command(name = "ssl_pretrain")]
    SslPretrain(PlanArgs),
    /// Run the supervised finetuning stage.
    #[command(name = "finetune")]
    Finetune(PlanArgs),
    /// Run the machine-transcription stage.
    #[command(name = "pseudotranscribe")]
    Pseudotranscribe(PlanArgs),
    /// Run the gold+machine-label training stage.
    #[command(name = "sst_train")]
    SstTrain(PlanArgs),
    /// Run the final in-domain adaptation stage.
    #[command(name = "final_finetune")]
    FinalFinetune(PlanArgs),
    /// Score completed checkpoints on the test set.
    #[command(name = "evaluate")]
    Evaluate(PlanArgs),
    /// Run the plan once per supervision condition, sharing unchanged stages.
    Sweep(SweepArgs),
    /// Generate the synthetic tone-language corpus.
    MakeToyCorpus(ToyArgs),
    /// Score a hypothesis TSV against a reference manifest.
    Score(ScoreArgs),
    /// Emit perfect transcripts from a sealed answer key, in the hypothesis
    /// TSV format the pipeline's external-transcriber hook expects.
    OracleTranscribe(OracleArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::BaselineSupervised(a) => single_stage(a, Stage::BaselineSupervised),
        Cmd::DumpFeatures(a) => single_stage(a, Stage::DumpFeatures),
        Cmd::Kmeans(a) => single_stage(a, Stage::Kmeans),
        Cmd::SslPretrain(a) => single_stage(a, Stage::SslPretrain),
        Cmd::Finetune(a) => single_stage(a, Stage::Finetune),
        Cmd::Pseudotranscribe(a) => single_stage(a, Stage::Pseudotranscribe),
        Cmd::SstTrain(a) => single_stage(a, Stage::SstTrain),
        Cmd::FinalFinetune(a) => single_stage(a, Stage::FinalFinetune),
        Cmd::Evaluate(a) => single_stage(a, Stage::Evaluate),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::MakeToyCorpus(args) => cmd_make_toy_corpus(args),
        Cmd::Score(args) => cmd_score(args),
        Cmd::OracleTranscribe(args) => cmd_oracle(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn parse_stages(list: &str) -> Result<Vec<Stage>, PipelineError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| {
            Stage::parse(name).ok_or_else(|| {
                PipelineError::Plan(format!(
                    "unknown stage '{name}'; expected one of: {}",
                    Stage::ALL.map(|s| s.name()).join(", ")
                ))
            })
        })
        .collect()
}

fn cmd_run(args: RunArgs) -> Result<(), PipelineError> {
    let plan = match &args.stages {
        Some(list) => parse_stages(list)?,
        None => full_plan(),
    };
    if plan.is_empty() {
        return Err(PipelineError::Plan("empty stage list".to_string()));
    }
    let cfg = PipelineConfig::load(args.plan.config.as_deref(), &args.plan.effective_overrides())?;
    let ctx = StageCtx::new(&cfg, &args.plan.experiment_dir, args.plan.force);
    let summary = run_plan(&ctx, &plan)?;
    println!(
        "ran {} stage(s), skipped {} up-to-date",
        summary.executed.len(),
        summary.skipped.len()
    );
    if plan.contains(&Stage::Evaluate) {
        println!("reports: {}", ctx.reports_dir().display());
    }
    Ok(())
}

fn single_stage(args: PlanArgs, stage: Stage) -> Result<(), PipelineError> {
    let cfg = PipelineConfig::load(args.config.as_deref(), &args.effective_overrides())?;
    let ctx = StageCtx::new(&cfg, &args.experiment_dir, args.force);
    let plan = [stage];
    asrlab::pipeline::validate_plan(&ctx, &plan)?;
    let outcome = asrlab::pipeline::run_stage(&ctx, stage)?;
    println!("{stage}: {:?}", outcome);
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), PipelineError> {
    let hours: Vec<f64> = args
        .hours
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| PipelineError::Config(format!("bad hours value '{s}'")))
        })
        .collect::<Result<_, _>>()?;
    let strategies: Vec<&str> = args
        .strategies
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    for s in &strategies {
        if !["random_utterance", "by_speaker"].contains(s) {
            return Err(PipelineError::Config(format!("unknown strategy '{s}'")));
        }
    }
    if hours.is_empty() || strategies.is_empty() {
        return Err(PipelineError::Config(
            "sweep needs at least one hours value and one strategy".to_string(),
        ));
    }
    let mut conditions = Vec::new();
    for &h in &hours {
        for &strat in &strategies {
            let label = if h < 0.0 {
                format!("all_{strat}")
            } else {
                format!("h{h}_{strat}")
            };
            conditions.push(SweepCondition {
                label,
                overrides: vec![
                    format!("shared.supervised_hours={h}"),
                    format!("shared.subset_strategy={strat}"),
                ],
            });
        }
    }
    let outcomes = sweep_supervision(
        args.plan.config.as_deref(),
        &args.plan.effective_overrides(),
        &conditions,
        &args.plan.experiment_dir,
        &full_plan(),
        args.plan.force,
    )?;
    let mut failed = 0usize;
    for o in &outcomes {
        match &o.error {
            Some(e) => {
                failed += 1;
                println!("{}: FAILED ({e})", o.label);
            }
            None => {
                let wers: Vec<String> = o
                    .wers
                    .iter()
                    .map(|(k, v)| format!("{k} {v:.2}"))
                    .collect();
                println!("{}: {}", o.label, wers.join(", "));
            }
        }
    }
    println!(
        "sweep table: {}",
        args.plan.experiment_dir.join("reports/sweep.tsv").display()
    );
    if failed > 0 {
        return Err(PipelineError::Stage {
            stage: "sweep".to_string(),
            message: format!("{failed} of {} conditions failed", outcomes.len()),
        });
    }
    Ok(())
}

fn cmd_make_toy_corpus(args: ToyArgs) -> Result<(), PipelineError> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                PipelineError::Config(format!("cannot read spec {}: {e}", path.display()))
            })?;
            serde_json::from_str::<ToyCorpusSpec>(&text)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        }
        None => ToyCorpusSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    make_toy_corpus(&args.out, &spec)?;
    println!("corpus written to {}", args.out.display());
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<(), PipelineError> {
    let refs_manifest = Manifest::load(
        &args.refs,
        Role::TranscribedCs,
        &TextNormalizer::default(),
    )
    .map_err(|e| PipelineError::Config(format!("{}: {e}", args.refs.display())))?;
    let refs: BTreeMap<String, String> = refs_manifest
        .utterances
        .iter()
        .map(|u| (u.utt_id.clone(), u.text.clone().unwrap_or_default()))
        .collect();
    let mut hyps: BTreeMap<String, String> =
        refs.keys().map(|k| (k.clone(), String::new())).collect();
    for row in read_hypotheses_tsv(&args.hyps)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", args.hyps.display())))?
    {
        hyps.insert(row.utt_id, row.text);
    }
    let scoring = |e: asrlab::eval::EvalError| PipelineError::Stage {
        stage: "score".to_string(),
        message: e.to_string(),
    };
    let wer = word_error_rate(&refs, &hyps).map_err(scoring)?;
    let cer = character_error_rate(&refs, &hyps).map_err(scoring)?;
    if let Some(parent) = args.out_prefix.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let with_ext = |ext: &str| -> PathBuf {
        let mut s = args.out_prefix.as_os_str().to_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    wer.write_json(&with_ext(".wer.json")).map_err(scoring)?;
    cer.write_json(&with_ext(".cer.json")).map_err(scoring)?;
    wer.write_alignment_text(&with_ext(".align.txt"))
        .map_err(scoring)?;
    println!("WER {:.2}  CER {:.2}", wer.error_rate, cer.error_rate);
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> Result<(), PipelineError> {
    let answers = read_answer_key(&args.answers)?;
    let text = fs::read_to_string(&args.manifest).map_err(|e| {
        PipelineError::Config(format!("cannot read manifest {}: {e}", args.manifest.display()))
    })?;
    let mut out = fs::File::create(&args.out)?;
    writeln!(out, "utt_id\ttext\tconfidence\tscore_total")?;
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let utt: Utterance = serde_json::from_str(line).map_err(|e| {
            PipelineError::Config(format!(
                "{}:{}: bad manifest line: {e}",
                args.manifest.display(),
                no + 1
            ))
        })?;
        if let Some(answer) = answers.get(&utt.utt_id) {
            writeln!(out, "{}\t{}\t1.0\t0.0", utt.utt_id, answer)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_answer_key(path: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| {
        PipelineError::Config(format!("cannot read answers {}: {e}", path.display()))
    })?;
    let mut lines = text.lines();
    match lines.next() {
        Some("utt_id\ttext") => {}
        other => {
            return Err(PipelineError::Config(format!(
                "{}: expected 'utt_id<TAB>text' header, got {other:?}",
                path.display()
            )));
        }
    }
    let mut map = BTreeMap::new();
    for (no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, answer) = line.split_once('\t').ok_or_else(|| {
            PipelineError::Config(format!("{}:{}: missing tab", path.display(), no + 2))
        })?;
        map.insert(id.to_string(), answer.to_string());
    }
    Ok(map)
}
