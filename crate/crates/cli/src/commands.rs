use std::fs;
use std::path::{Path, PathBuf};

use groupfs::data::{self, zscore, Dataset, SyntheticSpec};
use groupfs::eval::{self, MetricReport};
use groupfs::losses::FeatureGraph;
use groupfs::optim::gradcheck::{gradcheck, GradcheckConfig};
use groupfs::optim::train::{train_many, write_history_csv};
use groupfs::select::{self, rank_and_select, SelectionResult};
use groupfs::{Checkpoint, Exec, LossConfig, TrainConfig, TrainOutcome, TrainStatus};
use serde::Serialize;

use crate::args::{
    parse_rule, ChooseCArgs, DataArgs, EvalArgs, GenerateArgs, GradcheckArgs, GroupCount, SelectArgs, SweepArgs,
    SweepRange, TrainArgs,
};
use crate::error::{usage, CliError, CliResult};

/// Resolves output paths against the output root.
pub struct Outputs {
    root: PathBuf,
}

impl Outputs {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn dir(&self, p: &Path) -> CliResult<PathBuf> {
        let dir = self.path(p);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(dir)
    }

    fn file(&self, p: &Path) -> CliResult<PathBuf> {
        let path = self.path(p);
        if let Some(parent) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        Ok(path)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io { path: path.display().to_string(), source }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|source| CliError::Json { path: path.display().to_string(), source })?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.display().to_string(), source })
}

fn load_data(args: &DataArgs) -> CliResult<Dataset> {
    match &args.data {
        Some(path) => Ok(data::read_dataset(path, args.label_column.as_deref())?),
        None => {
            let s = &args.synthetic;
            Ok(data::synthetic(&SyntheticSpec { n: s.n, d: s.d, rho: s.rho, noise_std: s.noise, seed: args.data_seed })?)
        }
    }
}

pub fn generate(args: &GenerateArgs, out: &Outputs) -> CliResult<()> {
    let s = &args.synthetic;
    let ds = data::synthetic(&SyntheticSpec { n: s.n, d: s.d, rho: s.rho, noise_std: s.noise, seed: args.seed })?;
    let path = out.file(&args.out)?;
    data::write_dataset(&ds, &path)?;
    println!("wrote {} ({}x{}) and {}", path.display(), ds.x.nrows(), ds.x.ncols(), data::sidecar_path(&path).display());
    Ok(())
}

pub fn choose_c(args: &ChooseCArgs, out: &Outputs) -> CliResult<()> {
    let ds = load_data(&args.data)?;
    let x = zscore(&ds.x).0;
    let fg = FeatureGraph::from_data(&x, args.k)?;
    let choice = select::choose_c(&fg.l_feat, args.c_max, args.seed)?;
    let path = out.file(&args.out)?;
    let mut text = String::from("c,score\n");
    for p in &choice.curve {
        text.push_str(&format!("{},{}\n", p.c, p.score));
    }
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    println!("C={}", choice.chosen);
    if !choice.local_minima.is_empty() {
        println!("local minima: {:?}", choice.local_minima);
    }
    Ok(())
}

/// Training configuration for one lambda2 value and seed.
fn train_config(args: &TrainArgs, groups: usize, lambda2: f64, seed: u64) -> TrainConfig {
    let mut loss = LossConfig::new(args.lambda1, lambda2);
    if let Some(beta) = args.beta {
        loss.beta = beta;
    }
    loss.k = args.k;
    loss.t = args.t;
    loss.propagate_bandwidth_grad = args.propagate_bandwidth_grad;
    let mut cfg = TrainConfig {
        groups,
        epochs: args.epochs,
        batch_size: args.batch_size,
        loss,
        sigma: args.sigma,
        p_main: args.p_main,
        start_t: args.start_t,
        min_t: args.min_t,
        seed,
        ..TrainConfig::default()
    };
    cfg.adam.lr = args.lr;
    cfg
}

fn resolve_groups(args: &TrainArgs, x: &nalgebra::DMatrix<f64>) -> CliResult<usize> {
    match args.groups.parse::<GroupCount>()? {
        GroupCount::Fixed(c) => Ok(c),
        GroupCount::Auto => {
            let fg = FeatureGraph::from_data(x, args.k)?;
            let c_max = args.c_max.min(x.ncols());
            let choice = select::choose_c(&fg.l_feat, c_max, args.seed)?;
            log::info!("auto group count: C = {} (C_max {c_max})", choice.chosen);
            Ok(choice.chosen)
        }
    }
}

fn write_run(dir: &Path, outcome: &TrainOutcome, cfg: &TrainConfig) -> CliResult<()> {
    Checkpoint::new(outcome, cfg).save(&dir.join("checkpoint.json"))?;
    write_history_csv(&outcome.history, &dir.join("history.csv"))?;
    Ok(())
}

fn status_text(status: &TrainStatus) -> String {
    match status {
        TrainStatus::Completed => "completed".into(),
        TrainStatus::Diverged { epoch, reason } => format!("diverged at epoch {epoch}: {reason}"),
    }
}

pub fn train(args: &TrainArgs, out: &Outputs) -> CliResult<()> {
    if let Some(range) = &args.lambda2_sweep {
        return sweep(&SweepArgs { train: args.clone(), seeds: 1 }, range, out);
    }
    let ds = load_data(&args.data)?;
    let x = zscore(&ds.x).0;
    let cfg = train_config(args, resolve_groups(args, &x)?, args.lambda2, args.seed);
    let outcome = train_many(&x, &[cfg], Exec::Sequential).remove(0)?;
    let dir = out.dir(&args.out)?;
    write_run(&dir, &outcome, &cfg)?;
    println!(
        "{}: best loss {:.6} at epoch {}, checkpoint {}",
        status_text(&outcome.status),
        outcome.model.best_loss,
        outcome.model.best_epoch.map_or("-".into(), |e| e.to_string()),
        dir.join("checkpoint.json").display()
    );
    match outcome.status {
        TrainStatus::Completed => Ok(()),
        TrainStatus::Diverged { .. } => Err(CliError::Diverged(format!(
            "training diverged; partial artifacts in {}",
            dir.display()
        ))),
    }
}

pub fn sweep_command(args: &SweepArgs, out: &Outputs) -> CliResult<()> {
    let range = args
        .train
        .lambda2_sweep
        .as_deref()
        .ok_or_else(|| usage("sweep needs --lambda2-sweep lo:hi:steps"))?;
    sweep(args, range, out)
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    rank: usize,
    run: String,
    lambda2: f64,
    seed: u64,
    best_loss: f64,
    best_epoch: Option<usize>,
    status: String,
}

fn sweep(args: &SweepArgs, range: &str, out: &Outputs) -> CliResult<()> {
    let range: SweepRange = range.parse()?;
    if args.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let t = &args.train;
    let ds = load_data(&t.data)?;
    let x = zscore(&ds.x).0;
    let groups = resolve_groups(t, &x)?;
    let mut configs = Vec::new();
    let mut names = Vec::new();
    for (i, l2) in range.values().into_iter().enumerate() {
        for s in t.seed..t.seed + args.seeds {
            configs.push(train_config(t, groups, l2, s));
            names.push(format!("run_{i:03}_seed_{s}"));
        }
    }
    let root = out.dir(&t.out)?;
    log::info!("{} runs with C = {groups}", configs.len());
    let outcomes = train_many(&x, &configs, Exec::default());

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for ((outcome, cfg), name) in outcomes.into_iter().zip(&configs).zip(&names) {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                failures.push(format!("{name}: {e}"));
                continue;
            }
        };
        write_run(&dir, &outcome, cfg)?;
        if let TrainStatus::Diverged { .. } = outcome.status {
            failures.push(format!("{name}: {}", status_text(&outcome.status)));
        }
        rows.push(SummaryRow {
            rank: 0,
            run: name.clone(),
            lambda2: cfg.loss.lambda2,
            seed: cfg.seed,
            best_loss: outcome.model.best_loss,
            best_epoch: outcome.model.best_epoch,
            status: status_text(&outcome.status),
        });
    }
    rows.sort_by(|a, b| a.best_loss.total_cmp(&b.best_loss).then_with(|| a.run.cmp(&b.run)));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    let summary = root.join("summary.csv");
    let mut w = csv_writer(&summary)?;
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Core(e.into()))?;
    }
    w.flush().map_err(|e| io_err(&summary, e))?;

    println!("{} runs, summary {}", rows.len(), summary.display());
    for r in rows.iter().take(5) {
        println!("{:>3}  {:<20} lambda2 {:<8.4} loss {:.6}", r.rank, r.run, r.lambda2, r.best_loss);
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Diverged(format!("{} run(s) failed:\n  {}", failures.len(), failures.join("\n  "))))
    }
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::Core(e.into()))
}

pub fn select(args: &SelectArgs, out: &Outputs) -> CliResult<()> {
    let rule = parse_rule(&args.rule)?;
    let model = Checkpoint::load(&args.checkpoint)?.model()?;
    let means: Vec<f64> = model.params.mu.iter().copied().collect();
    let sel = rank_and_select(&model.params.logits, &means, rule)?;
    let path = out.file(&args.out)?;
    write_json(&sel, &path)?;
    println!("groups by gate mean:");
    for (rank, &g) in sel.group_order.iter().enumerate() {
        let mark = if rank < sel.budget { "*" } else { " " };
        println!("{mark} group {g:>3}  mu {:>9.4}  features {:?}", sel.gate_means[g], sel.groups[g]);
    }
    println!("selected {} features: {:?}", sel.selected.len(), sel.selected);
    if sel.budget_unreachable {
        println!("warning: {rule:?} could not be met");
    }
    Ok(())
}

pub fn eval(args: &EvalArgs, out: &Outputs) -> CliResult<()> {
    let ds = load_data(&args.data)?;
    let sel: SelectionResult = read_json(&args.selection)?;
    let d = ds.x.ncols();
    if sel.groups.iter().flatten().any(|&j| j >= d) {
        return Err(usage(format!("selection references features beyond the data's {d} columns")));
    }
    let mut report = MetricReport { n_selected: sel.selected.len(), ..MetricReport::default() };

    match &ds.labels {
        Some(truth) => {
            let k = args.clusters.or(ds.n_classes()).unwrap_or(2);
            let x = zscore(&ds.x).0;
            let seeds: Vec<u64> = (0..args.eval_seeds).collect();
            report = report.with_clustering(eval::clustering_scores(&x, &sel.selected, truth, k, &seeds)?);
        }
        None => log::warn!("no labels; clustering metrics skipped"),
    }
    if let Some(truth_groups) = &ds.true_groups {
        let predicted: Vec<Vec<usize>> = sel.groups.iter().filter(|g| !g.is_empty()).cloned().collect();
        report.rg_sim = Some(eval::rg_sim(truth_groups, &predicted)?);
        let mut informative: Vec<usize> = truth_groups.iter().flatten().copied().collect();
        informative.sort_unstable();
        let (tpr, fdr) = eval::tpr_fdr(&sel.selected, &informative, d)?;
        report.tpr = Some(tpr);
        report.fdr = Some(fdr);
    }
    let path = out.file(&args.out)?;
    write_json(&report, &path)?;
    print!("{report}");
    Ok(())
}

/// Returns whether the check passed.
pub fn gradcheck_command(args: &GradcheckArgs) -> CliResult<bool> {
    let mut cfg = GradcheckConfig {
        n: args.n,
        d: args.d,
        groups: args.groups,
        seed: args.seed,
        tolerance: args.tolerance,
        inject_fault: args.inject_bug,
        ..GradcheckConfig::default()
    };
    cfg.loss.propagate_bandwidth_grad = args.propagate_bandwidth_grad;
    let report = gradcheck(&cfg)?;
    println!("{report}");
    Ok(report.passed)
}
