//! `edgeslice`: generate, solve, train, eval, bench and report from one config file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use edgeslice::config::{Check, RunConfig};
use edgeslice::dataset::{generate_dataset, sample_scenario_with, scenario_seed, Dataset, Record};
use edgeslice::evaluation::{
    cross_validate, evaluate_records, figure_series, run_sweep, timing_bench, BenchMethod, SweepRecord, TimingRow,
};
use edgeslice::model::{derive_rates, Scenario};
use edgeslice::neuralset::{train_resumable, Checkpoint, TrainState};
use edgeslice::solver::{baseline_solve, sp3_solve, MethodTag, SearchMode};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "edgeslice", version, about = "Joint slice selection and radio/compute allocation lab")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `workers` (0: one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides `out_dir`; results go to a subdirectory named after the config hash.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample scenarios, solve them exactly and write the labelled dataset.
    Generate,
    /// Solve one scenario (a scenario JSON file or a record of a dataset file).
    Solve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        method: SolveMethod,
        /// Record index when `--scenario` is a dataset file.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Train on a whole dataset and write a checkpoint.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Pause after this many epochs; the state file allows resuming.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Cross-validate, or score a fixed checkpoint when one is given.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time the configured methods on freshly sampled scenarios.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the parameter sweeps (or merge earlier sweep files) and write the figure series.
    Report {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Existing sweep.jsonl files to merge instead of sweeping.
        #[arg(long = "from")]
        from: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SolveMethod {
    Auto,
    Exhaustive,
    BranchAndBound,
    SubsetDp,
    Greedy,
    Erap,
    Prap,
}

enum Failure {
    Validation(anyhow::Error),
    Assertion(Vec<Check>),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Validation(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Assertion(failed)) => {
            for c in failed {
                eprintln!("assertion failed: {} ({})", c.name, c.detail);
            }
            ExitCode::from(3)
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Run {
    cfg: RunConfig,
    hash: String,
    dir: PathBuf,
}

impl Run {
    fn new(cfg: RunConfig) -> anyhow::Result<Run> {
        let hash = cfg.config_hash();
        let dir = cfg.out_dir.join(&hash[..12]);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
        Ok(Run { cfg, hash, dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn or_default(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.path(name))
    }
}

/// Writes through a sibling temporary file so readers never see partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("writing {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn run(cli: Cli) -> Outcome {
    let cfg = load_config(&cli)?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global().map_err(|e| anyhow!(e))?;
    }
    let run = Run::new(cfg)?;
    match &cli.command {
        Command::Generate => generate(&run),
        Command::Solve { scenario, method, index } => solve(&run, scenario, *method, *index),
        Command::Train { dataset, resume, stop_after } => train_cmd(&run, dataset, resume, *stop_after),
        Command::Eval { dataset, checkpoint } => eval(&run, dataset, checkpoint),
        Command::Bench { checkpoint } => bench(&run, checkpoint),
        Command::Report { checkpoint, from } => report(&run, checkpoint, from),
    }
}

#[derive(Serialize)]
struct Manifest {
    config_hash: String,
    seed: u64,
    records: usize,
    capacity: usize,
    topology: edgeslice::model::Topology,
    methods: Vec<(String, usize)>,
    exact_records: usize,
    /// Digest of the dataset content with solver wall times zeroed.
    content_sha256: String,
    files: Vec<String>,
}

fn generate(run: &Run) -> Outcome {
    let c = &run.cfg;
    let data = generate_dataset(&c.generator, c.seed, c.dataset.scenarios, c.dataset.capacity, c.dataset.mode, &c.solver)?;
    let tmp = run.path("dataset.jsonl.partial");
    data.write_jsonl(&tmp)?;
    fs::rename(&tmp, run.path("dataset.jsonl"))?;
    let manifest = Manifest {
        config_hash: run.hash.clone(),
        seed: c.seed,
        records: data.records.len(),
        capacity: data.header.capacity,
        topology: data.header.topology,
        methods: data.method_counts().into_iter().map(|(m, n)| (m.as_str().to_string(), n)).collect(),
        exact_records: data.records.iter().filter(|r| r.solve.exact).count(),
        content_sha256: data.content_digest()?,
        files: vec!["config.toml".into(), "dataset.jsonl".into()],
    };
    write_json(&run.path("manifest.json"), &manifest)?;
    println!("{} records -> {}", manifest.records, run.path("dataset.jsonl").display());
    println!("content sha256 {}", manifest.content_sha256);
    Ok(())
}

fn read_scenario(path: &Path, index: usize) -> anyhow::Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let scenario = match serde_json::from_str::<Scenario>(&text) {
        Ok(s) => s,
        Err(_) => {
            let data = Dataset::read_jsonl(path).with_context(|| format!("{} is neither a scenario nor a dataset", path.display()))?;
            let r = data.records.get(index).ok_or_else(|| anyhow!("dataset has no record {index}"))?;
            r.scenario.clone()
        }
    };
    Ok(if scenario.has_rates() { scenario } else { derive_rates(&scenario)? })
}

fn solve(run: &Run, path: &Path, method: SolveMethod, index: usize) -> Outcome {
    let s = read_scenario(path, index)?;
    let settings = &run.cfg.solver;
    let result = match method {
        SolveMethod::Auto => sp3_solve(&s, SearchMode::Auto, settings)?,
        SolveMethod::Exhaustive => sp3_solve(&s, SearchMode::Exhaustive, settings)?,
        SolveMethod::BranchAndBound => sp3_solve(&s, SearchMode::BranchAndBound, settings)?,
        SolveMethod::SubsetDp => sp3_solve(&s, SearchMode::SubsetDp, settings)?,
        SolveMethod::Greedy => sp3_solve(&s, SearchMode::Greedy, settings)?,
        SolveMethod::Erap => baseline_solve(&s, MethodTag::Erap)?,
        SolveMethod::Prap => baseline_solve(&s, MethodTag::Prap)?,
    };
    let out = run.path(&format!("solve-{}.json", result.method.as_str()));
    write_json(&out, &result)?;
    println!("{} cost {:.6} s exact {} -> {}", result.method.as_str(), result.cost_s, result.exact, out.display());
    Ok(())
}

fn load_dataset(run: &Run, given: &Option<PathBuf>) -> anyhow::Result<Dataset> {
    let path = run.or_default(given, "dataset.jsonl");
    let data = Dataset::read_jsonl(&path).with_context(|| format!("reading dataset {}", path.display()))?;
    let expected = run.cfg.generator.topology();
    if data.header.topology != expected {
        bail!("dataset topology {:?} does not match the configured {:?}", data.header.topology, expected);
    }
    if data.records.is_empty() {
        bail!("dataset {} has no records", path.display());
    }
    Ok(data)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn train_cmd(run: &Run, dataset: &Option<PathBuf>, resume: &Option<PathBuf>, stop_after: Option<usize>) -> Outcome {
    let data = load_dataset(run, dataset)?;
    let refs: Vec<&Record> = data.records.iter().collect();
    let state = match resume {
        Some(p) => Some(TrainState::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?),
        None => None,
    };
    let from = state.as_ref().map_or(0, |s| s.next_epoch);
    let (report, state) = train_resumable(&refs, &run.cfg.train, state, stop_after)?;
    for l in report.log.iter().skip(from) {
        match l.val_loss {
            Some(v) => println!("epoch {:>4}  train {:.6}  val {:.6}", l.epoch, l.train_loss, v),
            None => println!("epoch {:>4}  train {:.6}", l.epoch, l.train_loss),
        }
    }
    write_atomic(&run.path("checkpoint.json"), report.checkpoint.to_json()?.as_bytes())?;
    write_atomic(&run.path("train_state.json"), state.to_json()?.as_bytes())?;
    write_json(&run.path("train_log.json"), &report.log)?;
    println!(
        "{} epochs, best epoch {}, {} parameters -> {}",
        state.next_epoch,
        report.best_epoch,
        report.checkpoint.params.num_parameters(),
        run.path("checkpoint.json").display()
    );
    Ok(())
}

fn finish_checks(checks: Vec<Check>) -> Outcome {
    for c in &checks {
        println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed: Vec<Check> = checks.into_iter().filter(|c| !c.passed).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Assertion(failed))
    }
}

fn eval(run: &Run, dataset: &Option<PathBuf>, checkpoint: &Option<PathBuf>) -> Outcome {
    let data = load_dataset(run, dataset)?;
    let a = &run.cfg.assertions;
    if let Some(ck_path) = checkpoint {
        let ck = load_checkpoint(ck_path)?;
        let refs: Vec<&Record> = data.records.iter().collect();
        let mut report = evaluate_records(&refs, &ck)?;
        report.config_hash = run.hash.clone();
        write_json(&run.path("metrics.json"), &report)?;
        println!(
            "sp1 acc@1 {:.4}  sp2 acc@1 {:.4}  sp3 acc {:.4}  acc_bin {:.4}  median gap {:.4}",
            report.sp1.acc_at[1], report.sp2.acc_at[1], report.sp3.acc, report.sp3.acc_bin, report.median_cost_gap
        );
        return finish_checks(a.check_report(&report));
    }
    let cv = cross_validate(&data, run.cfg.eval.folds, run.cfg.seed, &run.cfg.train, &run.hash, |r| {
        println!(
            "fold {:>2}: sp1 acc@1 {:.4}  sp2 acc@1 {:.4}  sp3 acc {:.4}  acc_bin {:.4}  train {:.1}s",
            r.fold.unwrap_or(0),
            r.sp1.acc_at[1],
            r.sp2.acc_at[1],
            r.sp3.acc,
            r.sp3.acc_bin,
            r.train_wall_time_s
        );
    })?;
    write_json(&run.path("cv_report.json"), &cv)?;
    let s = &cv.summary;
    for (m, v) in &s.cost_ratio_fold_median {
        println!("cost ratio {m}: {v:.4}");
    }
    println!("median cost gap {:.4}", s.median_cost_gap);
    finish_checks(a.check_cv(s))
}

fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("devices,method,samples,median_s,iqr_s\n");
    for r in rows {
        let iqr = r.iqr_s.map_or(String::new(), |v| format!("{v:e}"));
        out.push_str(&format!("{},{},{},{:e},{}\n", r.devices, r.method, r.samples, r.median_s, iqr));
    }
    out
}

fn bench(run: &Run, checkpoint: &Option<PathBuf>) -> Outcome {
    let c = &run.cfg;
    let needs_model = c.eval.methods.contains(&BenchMethod::Model);
    let ck = if needs_model {
        let p = run.or_default(checkpoint, "checkpoint.json");
        Some(load_checkpoint(&p).context("the model method needs a checkpoint (train first or pass --checkpoint)")?)
    } else {
        None
    };
    let mut scenarios = Vec::new();
    for &d in &c.eval.bench_devices {
        for k in 0..c.eval.bench_scenarios {
            scenarios.push(sample_scenario_with(&c.generator, scenario_seed(c.seed, d * 1_000_003 + k), d)?);
        }
    }
    let rows = timing_bench(&scenarios, &c.eval.methods, ck.as_ref(), c.eval.bench_repeats, &c.solver)?;
    write_atomic(&run.path("timing.csv"), timing_csv(&rows).as_bytes())?;
    write_json(&run.path("timing.json"), &rows)?;
    for r in &rows {
        let iqr = r.iqr_s.map_or("undefined (one sample)".to_string(), |v| format!("{v:.3e}"));
        println!("{:>3} devices  {:<12} median {:.3e} s  iqr {}", r.devices, r.method, r.median_s, iqr);
    }
    finish_checks(c.assertions.check_timing(&rows))
}

fn read_sweep(path: &Path) -> anyhow::Result<Vec<SweepRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("malformed sweep line in {}", path.display())))
        .collect()
}

#[derive(Serialize)]
struct ReportSummary {
    config_hash: String,
    records: usize,
    sources: Vec<String>,
    series: Vec<String>,
}

fn report(run: &Run, checkpoint: &Option<PathBuf>, from: &[PathBuf]) -> Outcome {
    let (records, sources) = if from.is_empty() {
        let ck = match checkpoint {
            Some(p) => Some(load_checkpoint(p)?),
            None => None,
        };
        let records = run_sweep(&run.cfg.sweep_spec(), ck.as_ref(), &run.cfg.solver)?;
        let mut lines = String::new();
        for r in &records {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
        write_atomic(&run.path("sweep.jsonl"), lines.as_bytes())?;
        (records, vec!["sweep.jsonl".to_string()])
    } else {
        let mut all = Vec::new();
        for p in from {
            all.extend(read_sweep(p)?);
        }
        (all, from.iter().map(|p| p.display().to_string()).collect())
    };
    let tables = figure_series(&records)?;
    let dir = run.path("series");
    fs::create_dir_all(&dir)?;
    for t in &tables {
        write_atomic(&dir.join(format!("{}.csv", t.name)), t.to_csv().as_bytes())?;
        println!("{:<32} {} rows", t.name, t.rows.len());
    }
    let summary = ReportSummary {
        config_hash: run.hash.clone(),
        records: records.len(),
        sources,
        series: tables.iter().map(|t| format!("series/{}.csv", t.name)).collect(),
    };
    write_json(&run.path("summary.json"), &summary)?;
    Ok(())
}
