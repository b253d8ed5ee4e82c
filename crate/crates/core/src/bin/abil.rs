use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abil::abduction::{abduce, Labeling, ScoreTrack};
use abil::expert::{generate_dataset, Dataset};
use abil::io::{self, ModelFile, RunManifest};
use abil::kb::{self, KbSource};
use abil::perception::{
    grounding_accuracy, sample_states, train_perception_multi, AtomSelection, Bootstrap, Grounder, OracleGrounder, PerceptionModel,
    TrainConfig,
};
use abil::policy::{train_bc, train_ensemble, Fallback, PolicyConfig};
use abil::runner::{evaluate, AgentKind, Controller, EvalConfig, Report, CSV_HEADER};
use abil::symbolic::{validate_machine, StateMachine};
use abil::{Split, Task, TaskConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

const PERCEPTION_FILE: &str = "perception.json";
const POLICY_FILE: &str = "policy.json";
const BC_FILE: &str = "bc.json";

#[derive(Parser)]
#[command(name = "abil", version, about = "Abductive imitation learning on a symbolic gridworld")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations as JSONL.
    Gen(GenArgs),
    /// Train predicate scorers from unlabeled demonstrations.
    TrainPerception(TrainPerceptionArgs),
    /// Train one action policy per operator.
    TrainPolicy(TrainPolicyArgs),
    /// Train the flat behavior-cloning baseline.
    TrainBc(TrainBcArgs),
    /// Closed-loop success rate of a trained agent.
    Eval(EvalArgs),
    /// Grounding accuracy of a perception model against oracle truth.
    GroundAcc(GroundAccArgs),
    /// Label a dataset with its minimum-cost symbolic segmentation.
    Abduce(AbduceArgs),
    /// Parse and check knowledge-base files.
    ValidateKb(ValidateKbArgs),
    /// Merge report CSVs and summarize by task, mode and agent.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum Mode {
    Basic,
    Gen,
}

impl From<Mode> for Split {
    fn from(m: Mode) -> Split {
        match m {
            Mode::Basic => Split::Basic,
            Mode::Gen => Split::Generalization,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum FallbackArg {
    FirstOperator,
    RepeatLast,
}

impl From<FallbackArg> for Fallback {
    fn from(f: FallbackArg) -> Fallback {
        match f {
            FallbackArg::FirstOperator => Fallback::FirstOperator,
            FallbackArg::RepeatLast => Fallback::RepeatLast,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum BootstrapArg {
    Forced,
    Uniform,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum ScoreSource {
    Model,
    Oracle,
    Uniform,
}

#[derive(Args, Serialize)]
struct GenArgs {
    /// Tasks to generate; several tasks give a mixed dataset.
    #[arg(long, value_delimiter = ',', required = true)]
    task: Vec<Task>,
    /// Episodes per task.
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Basic)]
    mode: Mode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct KbArgs {
    /// Directory with `<task>.kb` files overriding the shipped machines.
    #[arg(long)]
    kb_dir: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TrainPerceptionArgs {
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Model directory to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    kb: KbArgs,
    #[arg(long, default_value_t = TrainConfig::default().rounds)]
    rounds: usize,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    /// Minibatch size; 0 trains full batch.
    #[arg(long, default_value_t = TrainConfig::default().batch)]
    batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().hidden)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = BootstrapArg::Forced)]
    bootstrap: BootstrapArg,
    #[arg(long)]
    self_training: bool,
}

#[derive(Args, Serialize)]
struct PolicyArgs {
    #[arg(long, default_value_t = PolicyConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = PolicyConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = PolicyConfig::default().batch)]
    batch: usize,
    #[arg(long, default_value_t = PolicyConfig::default().hidden)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl PolicyArgs {
    fn config(&self, fallback: Fallback) -> PolicyConfig {
        PolicyConfig { epochs: self.epochs, lr: self.lr, batch: self.batch, hidden: self.hidden, seed: self.seed, fallback, bc_permutations: 0 }
    }
}

#[derive(Args, Serialize)]
struct TrainPolicyArgs {
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Directory holding the perception model used for routing.
    #[arg(long, required_unless_present = "oracle_grounding")]
    models: Option<PathBuf>,
    /// Route demonstrations with true atom values instead of a perception model.
    #[arg(long)]
    oracle_grounding: bool,
    /// Model directory to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    kb: KbArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long, value_enum, default_value_t = FallbackArg::FirstOperator)]
    fallback: FallbackArg,
}

#[derive(Args, Serialize)]
struct TrainBcArgs {
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Model directory to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Extra copies of each sample with the object slots shuffled.
    #[arg(long, default_value_t = 0)]
    bc_permutations: usize,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    task: Task,
    #[arg(long, value_enum, default_value_t = Mode::Basic)]
    mode: Mode,
    #[arg(long)]
    agent: AgentKind,
    #[arg(long)]
    models: PathBuf,
    /// Ground atoms from the environment instead of the perception model.
    #[arg(long)]
    oracle_grounding: bool,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 64)]
    horizon: u32,
    /// Probability of flipping each grounded atom per step.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, value_enum, default_value_t = FallbackArg::FirstOperator)]
    fallback: FallbackArg,
    /// CSV file to write; rows also go to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Full JSON report with telemetry.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct GroundAccArgs {
    #[arg(long)]
    models: PathBuf,
    /// Held-out demonstrations whose states are graded.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    limit: usize,
    /// Grade every vocabulary atom instead of each task's tracked atoms.
    #[arg(long)]
    all_atoms: bool,
}

#[derive(Args, Serialize)]
struct AbduceArgs {
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ScoreSource::Model)]
    scores: ScoreSource,
    /// Directory holding the perception model, for `--scores model`.
    #[arg(long, required_if_eq("scores", "model"))]
    models: Option<PathBuf>,
    #[command(flatten)]
    kb: KbArgs,
    /// JSONL file, one labeling per trajectory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ValidateKbArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Merged CSV to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).format_timestamp(None).init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let argv: Vec<String> = std::env::args().collect();
    let result = match &cli.command {
        Command::Gen(a) => gen(a, &argv),
        Command::TrainPerception(a) => train_perception_cmd(a, &argv),
        Command::TrainPolicy(a) => train_policy_cmd(a, &argv),
        Command::TrainBc(a) => train_bc_cmd(a, &argv),
        Command::Eval(a) => eval_cmd(a, &argv),
        Command::GroundAcc(a) => ground_acc(a),
        Command::Abduce(a) => abduce_cmd(a, &argv),
        Command::ValidateKb(a) => validate_kb(a),
        Command::Report(a) => report(a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("ABIL_THREADS") else { return Ok(()) };
    let n: usize = v.parse().ok().filter(|&n| n > 0).with_context(|| format!("ABIL_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the worker pool")?;
    Ok(())
}

fn manifest<T: Serialize>(argv: &[String], args: &T, seeds: Vec<u64>) -> RunManifest {
    RunManifest::new(argv.to_vec(), serde_json::to_value(args).expect("arguments serialize"), seeds)
}

fn finish(mut m: RunManifest, artifacts: &[&Path]) -> Result<()> {
    for a in artifacts {
        m.artifact(a)?;
    }
    m.write_beside_artifacts()?;
    Ok(())
}

fn load_data(paths: &[PathBuf], m: &mut RunManifest) -> Result<Dataset> {
    let mut data = Dataset::default();
    for p in paths {
        data.extend(io::read_dataset(p)?);
        m.input(p)?;
    }
    if data.is_empty() {
        bail!("no trajectories in {}", paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "));
    }
    Ok(data)
}

fn machines(tasks: impl IntoIterator<Item = Task>, kb: &KbArgs, m: Option<&mut RunManifest>) -> Result<BTreeMap<Task, StateMachine>> {
    let mut out = BTreeMap::new();
    let mut inputs = Vec::new();
    for t in tasks {
        let machine = match &kb.kb_dir {
            None => t.machine(),
            Some(dir) => {
                let path = dir.join(format!("{}.kb", t.kb_name()));
                let src = KbSource::read(&path).with_context(|| format!("reading {}", path.display()))?;
                inputs.push(path);
                kb::parse_kb(&src)?
            }
        };
        out.insert(t, machine);
    }
    if let Some(m) = m {
        for p in inputs {
            m.input(&p)?;
        }
    }
    Ok(out)
}

fn model_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn load_perception(dir: &Path, m: Option<&mut RunManifest>) -> Result<PerceptionModel> {
    let path = dir.join(PERCEPTION_FILE);
    let model = io::read_model(&path)?.perception().map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    if let Some(m) = m {
        m.input(&path)?;
    }
    Ok(model)
}

fn gen(a: &GenArgs, argv: &[String]) -> Result<()> {
    let mut data = Dataset::default();
    for (i, &task) in a.task.iter().enumerate() {
        let cfg = TaskConfig::new(task, a.mode.into(), a.seed + i as u64 * 100_000);
        data.extend(generate_dataset(&cfg, a.episodes)?);
    }
    io::write_dataset(&a.out, &data)?;
    eprintln!("wrote {} trajectories (mean length {:.1}) to {}", data.len(), data.mean_length(), a.out.display());
    finish(manifest(argv, a, vec![a.seed]), &[&a.out])
}

fn train_perception_cmd(a: &TrainPerceptionArgs, argv: &[String]) -> Result<()> {
    let mut m = manifest(argv, a, vec![a.seed]);
    let data = load_data(&a.data, &mut m)?;
    let machines = machines(data.task_mix().into_keys(), &a.kb, Some(&mut m))?;
    let cfg = TrainConfig {
        rounds: a.rounds,
        epochs: a.epochs,
        lr: a.lr,
        batch: a.batch,
        hidden: a.hidden,
        seed: a.seed,
        bootstrap: match a.bootstrap {
            BootstrapArg::Forced => Bootstrap::Forced,
            BootstrapArg::Uniform => Bootstrap::Uniform,
        },
        self_training: a.self_training,
    };
    let (model, report) = train_perception_multi(&data, &machines, &cfg)?;
    for r in &report.rounds {
        let cost = r.abduction_cost.map_or("forced".to_string(), |c| format!("{c:.2}"));
        eprintln!("round {}: cost {cost}, {} labels, {} infeasible, final loss {:.4}", r.round, r.labels, r.infeasible, r.epoch_loss.last().copied().unwrap_or(f64::NAN));
    }
    model_dir(&a.out)?;
    let path = a.out.join(PERCEPTION_FILE);
    io::write_json(&path, &ModelFile::from_perception(&model))?;
    finish(m, &[&path])
}

fn train_policy_cmd(a: &TrainPolicyArgs, argv: &[String]) -> Result<()> {
    let mut m = manifest(argv, a, vec![a.policy.seed]);
    let data = load_data(&a.data, &mut m)?;
    let machines = machines(data.task_mix().into_keys(), &a.kb, Some(&mut m))?;
    let cfg = a.policy.config(a.fallback.into());
    let (ensemble, stats) = if a.oracle_grounding {
        train_ensemble(&data, &OracleGrounder, &machines, &cfg)?
    } else {
        let dir = a.models.as_deref().context("--models is required without --oracle-grounding")?;
        let perception = load_perception(dir, Some(&mut m))?;
        train_ensemble(&data, &perception, &machines, &cfg)?
    };
    eprintln!("routed {} steps ({} fallback): {:?}", stats.steps, stats.fallback, stats.per_operator);
    model_dir(&a.out)?;
    let path = a.out.join(POLICY_FILE);
    io::write_json(&path, &ModelFile::from_policy(&ensemble))?;
    finish(m, &[&path])
}

fn train_bc_cmd(a: &TrainBcArgs, argv: &[String]) -> Result<()> {
    let mut m = manifest(argv, a, vec![a.policy.seed]);
    let data = load_data(&a.data, &mut m)?;
    let cfg = PolicyConfig { bc_permutations: a.bc_permutations, ..a.policy.config(Fallback::default()) };
    let bc = train_bc(&data, &cfg)?;
    model_dir(&a.out)?;
    let path = a.out.join(BC_FILE);
    io::write_json(&path, &ModelFile::from_bc(&bc))?;
    finish(m, &[&path])
}

fn run_eval(a: &EvalArgs, m: &mut RunManifest) -> Result<Report> {
    let mut cfg = EvalConfig::new(a.task, a.mode.into(), a.agent);
    cfg.episodes = a.episodes;
    cfg.seeds = a.seeds.clone();
    cfg.horizon = a.horizon;
    cfg.noise = a.noise;
    cfg.fallback = a.fallback.into();
    let report = match a.agent {
        AgentKind::Bc => {
            let path = a.models.join(BC_FILE);
            let bc = io::read_model(&path)?.bc().map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
            m.input(&path)?;
            evaluate(&cfg, &Controller::Bc(&bc))?
        }
        AgentKind::Abil => {
            let path = a.models.join(POLICY_FILE);
            let ensemble = io::read_model(&path)?.policy().map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
            m.input(&path)?;
            let perception;
            let grounder: &dyn Grounder = if a.oracle_grounding {
                &OracleGrounder
            } else {
                perception = load_perception(&a.models, Some(m))?;
                &perception
            };
            evaluate(&cfg, &Controller::Abil { grounder, actor: &ensemble, fallback: cfg.fallback })?
        }
    };
    Ok(report)
}

fn eval_cmd(a: &EvalArgs, argv: &[String]) -> Result<()> {
    let mut m = manifest(argv, a, a.seeds.clone());
    let report = run_eval(a, &mut m)?;
    print!("{}", report.to_csv());
    eprintln!("{}", report.summary());
    let mut artifacts: Vec<&Path> = Vec::new();
    if let Some(out) = &a.out {
        fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
        artifacts.push(out);
    }
    if let Some(json) = &a.json {
        io::write_json(json, &report)?;
        artifacts.push(json);
    }
    if artifacts.is_empty() {
        return Ok(());
    }
    finish(m, &artifacts)
}

fn ground_acc(a: &GroundAccArgs) -> Result<()> {
    let model = load_perception(&a.models, None)?;
    let mut scratch = RunManifest::new(Vec::new(), serde_json::Value::Null, Vec::new());
    let data = load_data(&a.data, &mut scratch)?;
    let states = sample_states(&data, a.limit);
    let selection = if a.all_atoms { AtomSelection::Vocabulary(model.vocabulary.clone()) } else { AtomSelection::Tracked };
    let r = grounding_accuracy(&model, &states, &selection)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "predicate,correct,total,accuracy")?;
    for (pred, (ok, total)) in &r.per_predicate {
        writeln!(out, "{pred},{ok},{total},{:.4}", *ok as f64 / *total as f64)?;
    }
    writeln!(out, "all,{},{},{:.4}", r.correct, r.total, r.overall())?;
    Ok(())
}

#[derive(Serialize)]
struct LabelRecord {
    index: usize,
    task: Task,
    seed: u64,
    path: Vec<String>,
    assignment: Vec<String>,
    transitions: Vec<usize>,
    cost: f64,
    /// Atom values per step.
    labels: Vec<BTreeMap<String, bool>>,
}

impl LabelRecord {
    fn new(index: usize, t: &abil::expert::Trajectory, l: &Labeling) -> Self {
        let mut labels = vec![BTreeMap::new(); l.assignment.len()];
        for p in &l.pseudo {
            labels[p.step].insert(p.atom.to_string(), p.value);
        }
        Self {
            index,
            task: t.task,
            seed: t.seed,
            path: l.path.clone(),
            assignment: l.assignment.clone(),
            transitions: l.transitions.clone(),
            cost: l.cost,
            labels,
        }
    }
}

fn abduce_cmd(a: &AbduceArgs, argv: &[String]) -> Result<()> {
    let mut m = manifest(argv, a, Vec::new());
    let data = load_data(&a.data, &mut m)?;
    let machines = machines(data.task_mix().into_keys(), &a.kb, Some(&mut m))?;
    let model = match a.scores {
        ScoreSource::Model => Some(load_perception(a.models.as_deref().context("--scores model needs --models")?, Some(&mut m))?),
        _ => None,
    };
    let mut lines = String::new();
    let mut total = 0.0;
    for (i, t) in data.trajectories.iter().enumerate() {
        let bound = kb::bind_roles(&machines[&t.task], &t.binding).with_context(|| format!("trajectory {i}"))?;
        let track = match (&a.scores, &model) {
            (ScoreSource::Oracle, _) => ScoreTrack::oracle(&bound, &t.states),
            (ScoreSource::Uniform, _) => ScoreTrack::uniform(&bound, t.states.len(), 0.5),
            (ScoreSource::Model, Some(model)) => {
                let atoms = bound.tracked_atoms();
                let scores = t
                    .states
                    .iter()
                    .map(|s| atoms.iter().map(|x| model.score(s, x)).collect::<Result<Vec<_>, _>>())
                    .collect::<Result<Vec<_>, _>>()?;
                ScoreTrack::new(atoms, scores)
            }
            (ScoreSource::Model, None) => unreachable!("model loaded above"),
        };
        let labeling = abduce(&track, &bound).with_context(|| format!("trajectory {i}"))?;
        total += labeling.cost;
        let rec = LabelRecord::new(i, t, &labeling);
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    fs::write(&a.out, lines).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("labeled {} trajectories, total cost {total:.3}", data.len());
    finish(m, &[&a.out])
}

fn validate_kb(a: &ValidateKbArgs) -> Result<()> {
    let mut failed = 0;
    for path in &a.files {
        let src = KbSource::read(path).with_context(|| format!("reading {}", path.display()))?;
        match kb::parse_kb(&src) {
            Ok(machine) => {
                let violations = validate_machine(&machine);
                if violations.is_empty() {
                    println!("{}: ok ({} nodes, {} edges)", path.display(), machine.nodes.len(), machine.edges.len());
                } else {
                    failed += 1;
                    for v in violations {
                        eprintln!("{}: {v}", path.display());
                    }
                }
            }
            Err(e) => {
                failed += 1;
                eprintln!("{e}");
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} files failed validation", a.files.len());
    }
    Ok(())
}

fn report(a: &ReportArgs, argv: &[String]) -> Result<()> {
    let mut m = manifest(argv, a, Vec::new());
    let mut rows = Vec::new();
    for path in &a.files {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == CSV_HEADER => {}
            other => bail!("{}:1: expected header `{CSV_HEADER}`, found `{}`", path.display(), other.unwrap_or("")),
        }
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                bail!("{}:{}: expected 7 columns, found {}", path.display(), i + 2, fields.len());
            }
            let success: f64 = fields[5].parse().with_context(|| format!("{}:{}: bad success value `{}`", path.display(), i + 2, fields[5]))?;
            rows.push((fields[..3].join(","), success, line.to_string()));
        }
        m.input(path)?;
    }
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (key, success, _) in &rows {
        groups.entry(key).or_default().push(*success);
    }
    for (key, xs) in &groups {
        let (mean, std) = abil::runner::mean_std(xs);
        println!("{key}: {mean:.3} ± {std:.3} (n={})", xs.len());
    }
    if let Some(out) = &a.out {
        let mut text = format!("{CSV_HEADER}\n");
        for (_, _, line) in &rows {
            text.push_str(line);
            text.push('\n');
        }
        fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
        finish(m, &[out])?;
    }
    Ok(())
}
