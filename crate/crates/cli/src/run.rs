use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use mmnet::bench::{conv_throughput, pow2_lengths, scan_scaling};
use mmnet::blocks::AttentionKind;
use mmnet::data::{make_splits, preprocess, synth_forest, write_dataset, load_manifest, PlotSample, Preprocessed, Split};
use mmnet::gradcheck::full_suite;
use mmnet::metrics::{diff_table, export_residuals, linear_baseline, median, DiffTable, MetricsReport};
use mmnet::network::{NetworkConfig, STAGES};
use mmnet::train::{prepare, train, Model, Prepared, TrainConfig};

use crate::config::{io_err, Cli, CliError, CliResult, Command, RunConfig};

pub const CHECKPOINT: &str = "checkpoint.txt";
pub const RUN_CONFIG: &str = "run.toml";
pub const LOSS_LOG: &str = "loss.csv";

pub fn dispatch(cli: Cli) -> CliResult<bool> {
    let name = cli.command.name();
    let cfg = RunConfig::resolve(cli.command.flags())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} threads: {e}", cfg.threads)))?;
    pool.install(|| match &cli.command {
        Command::Synth { plots, .. } => synth(&cfg, *plots),
        Command::Train { .. } => train_cmd(&cfg, name),
        Command::Eval { split, .. } => eval(&cfg, *split, cli.command.flags().reference_report.as_deref()),
        Command::Gradcheck { .. } => gradcheck(&cfg),
        Command::Audit { .. } => audit(&cfg),
        Command::Bench { .. } => bench(&cfg),
        Command::Ablate { runs, .. } => ablate(&cfg, runs.unwrap_or(cfg.ablate.runs), name),
    })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn synth(cfg: &RunConfig, plots: Option<usize>) -> CliResult<bool> {
    let seed = cfg.seed()?;
    let mut synth = cfg.synth.clone();
    synth.seed = seed;
    if let Some(n) = plots {
        synth.n_plots = n;
    }
    let dir = cfg.out_dir("synth")?;
    create_dir(&dir)?;
    let samples = make_splits(synth_forest(&synth), cfg.splits, seed)?;
    let manifest = write_dataset(&dir, &samples)?;
    let mut resolved = cfg.clone();
    resolved.synth = synth;
    resolved.out = Some(dir.clone());
    write(&dir.join(RUN_CONFIG), &resolved.to_text())?;
    let count = |s: Split| manifest.rows.iter().filter(|r| r.split == s).count();
    println!(
        "wrote {} plots to {} (train {}, val {}, test {})",
        manifest.rows.len(),
        dir.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(true)
}

/// Loaded, validated samples grouped by split.
struct Dataset {
    samples: Vec<PlotSample>,
}

impl Dataset {
    fn load(cfg: &RunConfig) -> CliResult<Self> {
        let path = cfg.manifest()?;
        if !path.exists() {
            return Err(CliError::Usage(format!("manifest {} does not exist", path.display())));
        }
        let manifest = load_manifest(path)?;
        Ok(Self {
            samples: manifest.load_samples()?,
        })
    }

    fn split(&self, split: Split) -> Vec<PlotSample> {
        self.samples.iter().filter(|s| s.split == split).cloned().collect()
    }
}

/// Voxelizes in parallel chunks whose results are concatenated in input
/// order, so the output does not depend on the thread count.
fn prepare_split(samples: &[PlotSample], cfg: &RunConfig) -> CliResult<Vec<Prepared>> {
    let chunk = samples.len().div_ceil(rayon::current_num_threads()).max(1);
    let parts: Vec<_> = samples
        .par_chunks(chunk)
        .map(|c| prepare(c, &cfg.network, cfg.target))
        .collect::<mmnet::Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(samples.len());
    for (kept, rejected) in parts {
        for id in rejected {
            eprintln!("rejected {id}: no point above the height threshold");
        }
        out.extend(kept);
    }
    Ok(out)
}

fn report(model: &mut Model, data: &[Prepared], batch: usize) -> CliResult<(MetricsReport, Vec<f64>, Vec<f64>)> {
    let pred = model.predict(data, batch)?;
    let obs: Vec<f64> = data.iter().map(|p| p.label).collect();
    Ok((MetricsReport::compute(&obs, &pred, model.target.units())?, obs, pred))
}

/// Trains one model, logging epochs to stderr and returning the loss log as
/// CSV text.
fn fit(network: &NetworkConfig, tcfg: &TrainConfig, data: &[Prepared], label: &str) -> CliResult<(Model, String)> {
    let mut model = Model::new(network, tcfg.target, tcfg.seed)?;
    let mut log = String::from("epoch,loss\n");
    let total = tcfg.epochs;
    train(&mut model, data, tcfg, |_, e| {
        writeln!(log, "{},{:?}", e.epoch, e.loss).expect("string write");
        eprintln!("{label}epoch {}/{total} loss {:.5} ({:.1}s)", e.epoch, e.loss, e.seconds);
        Ok(true)
    })?;
    Ok((model, log))
}

fn train_cmd(cfg: &RunConfig, name: &str) -> CliResult<bool> {
    cfg.network.validate()?;
    let tcfg = cfg.train_config()?;
    let data = Dataset::load(cfg)?;
    let dir = cfg.out_dir(name)?;
    create_dir(&dir)?;
    let train_set = prepare_split(&data.split(Split::Train), cfg)?;
    let (mut model, log) = fit(&cfg.network, &tcfg, &train_set, "")?;
    let mut resolved = cfg.clone();
    resolved.out = Some(dir.clone());
    write(&dir.join(RUN_CONFIG), &resolved.to_text())?;
    write(&dir.join(LOSS_LOG), &log)?;
    model.save(&dir.join(CHECKPOINT), &[])?;
    let (train_report, ..) = report(&mut model, &train_set, tcfg.batch_size)?;
    write(&dir.join("report_train.toml"), &train_report.to_text())?;
    println!("train r2 {:.4} rmse {:.4} {}", train_report.r2, train_report.rmse, train_report.units);
    let val_set = prepare_split(&data.split(Split::Val), cfg)?;
    if val_set.len() >= 2 {
        let (val_report, ..) = report(&mut model, &val_set, tcfg.batch_size)?;
        write(&dir.join("report_val.toml"), &val_report.to_text())?;
        println!("val   r2 {:.4} rmse {:.4} {}", val_report.r2, val_report.rmse, val_report.units);
    } else {
        eprintln!("validation split has fewer than two plots; no validation report");
    }
    println!("run directory {}", dir.display());
    Ok(true)
}

/// Preprocessed clouds and labels for the linear baseline.
fn baseline_inputs(samples: &[PlotSample], cfg: &RunConfig) -> CliResult<Vec<(Vec<[f64; 3]>, f64)>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        if let Preprocessed::Kept(p) = preprocess(s)? {
            out.push((p.points, cfg.target.of(s)));
        }
    }
    Ok(out)
}

fn baseline(train: &[PlotSample], test: &[PlotSample], cfg: &RunConfig) -> CliResult<MetricsReport> {
    let (a, b) = (baseline_inputs(train, cfg)?, baseline_inputs(test, cfg)?);
    let va: Vec<(&[[f64; 3]], f64)> = a.iter().map(|(p, y)| (p.as_slice(), *y)).collect();
    let vb: Vec<(&[[f64; 3]], f64)> = b.iter().map(|(p, y)| (p.as_slice(), *y)).collect();
    let r = linear_baseline(&va, &vb, cfg.target.units())?;
    if r.ridge {
        eprintln!("baseline design is rank deficient; ridge fallback used");
    }
    Ok(r.report)
}

fn eval(cfg: &RunConfig, split: Split, reference: Option<&Path>) -> CliResult<bool> {
    let dir = cfg.out.clone().ok_or_else(|| CliError::Usage("eval needs --out pointing at a trained run directory".into()))?;
    let run_path = dir.join(RUN_CONFIG);
    let run_text = fs::read_to_string(&run_path).map_err(|e| io_err(&run_path, e))?;
    let run = RunConfig::parse(&run_text, &run_path)?;
    let mut cfg = cfg.clone();
    cfg.network = run.network;
    let mut model = Model::load(&cfg.network, &dir.join(CHECKPOINT))?;
    cfg.target = model.target;
    let data = Dataset::load(&cfg)?;
    let set = prepare_split(&data.split(split), &cfg)?;
    let (rep, obs, pred) = report(&mut model, &set, run.train.batch_size)?;
    write(&dir.join(format!("report_{split}.toml")), &rep.to_text())?;
    export_residuals(&obs, &pred, &dir.join(format!("residuals_{split}.csv")))?;
    let base = baseline(&data.split(Split::Train), &data.split(split), &cfg)?;
    write(&dir.join(format!("baseline_{split}.toml")), &base.to_text())?;
    println!("{split} network  r2 {:.4} rmse {:.4} mape {:.2}% mb {:.4} {}", rep.r2, rep.rmse, rep.mape_percent, rep.mean_bias, rep.units);
    println!("{split} baseline r2 {:.4} rmse {:.4} mape {:.2}% mb {:.4} {}", base.r2, base.rmse, base.mape_percent, base.mean_bias, base.units);
    if rep.n_excluded_from_mape > 0 {
        println!("{} zero observations excluded from MAPE", rep.n_excluded_from_mape);
    }
    if let Some(path) = reference {
        let reference = MetricsReport::load(path)?;
        let rows = diff_table(&rep, &reference)?;
        let table = DiffTable(&rows).to_string();
        write(&dir.join(format!("diff_{split}.txt")), &table)?;
        println!("{table}");
    }
    Ok(true)
}

fn gradcheck(cfg: &RunConfig) -> CliResult<bool> {
    let results = full_suite(cfg.seed.unwrap_or(0))?;
    let mut ok = true;
    for r in &results {
        println!("{r}");
        ok &= r.passed();
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(ok)
}

fn audit(cfg: &RunConfig) -> CliResult<bool> {
    cfg.network.validate()?;
    let model = Model::new(&cfg.network, cfg.target, cfg.seed.unwrap_or(0))?;
    let audit = model.net.audit(&model.store);
    println!("{audit}");
    println!("strided blocks at {:?}", audit.strided_positions);
    println!("parameters {}", audit.params);
    Ok(true)
}

fn bench(cfg: &RunConfig) -> CliResult<bool> {
    let b = &cfg.bench;
    if b.min_pow >= b.max_pow {
        return Err(CliError::Usage("bench.min_pow must be below bench.max_pow".into()));
    }
    let scan = scan_scaling(&pow2_lengths(b.min_pow, b.max_pow), b.channels, b.state_dim, b.reps)?;
    println!("selective scan, {} channels, state {}", b.channels, b.state_dim);
    println!("{scan}");
    println!();
    println!("{:>8} {:>10} {:>12} {:>14}", "voxels", "pairs", "seconds", "voxels/s");
    for &n in &b.conv_voxels {
        let t = conv_throughput(n, b.conv_channels, b.conv_channels, b.reps)?;
        println!("{:>8} {:>10} {:>12.6} {:>14.0}", t.voxels, t.pairs, t.seconds, t.voxels_per_second());
    }
    Ok(true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    MmbOnly,
    FfmOnly,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::MmbOnly, Variant::FfmOnly, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MmbOnly => "mmb-only",
            Variant::FfmOnly => "ffm-only",
            Variant::Full => "full",
        }
    }

    pub fn apply(self, base: &NetworkConfig) -> NetworkConfig {
        let mut cfg = base.clone();
        let (attention, fusion) = match self {
            Variant::MmbOnly => (AttentionKind::MambaSe, false),
            Variant::FfmOnly => (AttentionKind::Se, true),
            Variant::Full => (AttentionKind::MambaSe, true),
        };
        cfg.stage_attention = vec![attention; STAGES];
        cfg.fusion = fusion;
        cfg
    }
}

fn ablate(cfg: &RunConfig, runs: usize, name: &str) -> CliResult<bool> {
    if runs == 0 {
        return Err(CliError::Usage("ablate needs at least one run".into()));
    }
    let seed = cfg.seed()?;
    let tcfg = cfg.train_config()?;
    let data = Dataset::load(cfg)?;
    let dir = cfg.out_dir(name)?;
    create_dir(&dir)?;
    let train_samples = data.split(Split::Train);
    let test_samples = data.split(Split::Test);
    let train_set = prepare_split(&train_samples, cfg)?;
    let test_set = prepare_split(&test_samples, cfg)?;
    let base = baseline(&train_samples, &test_samples, cfg)?;
    write(&dir.join("baseline_test.toml"), &base.to_text())?;
    let mut table = format!(
        "{:<10} {:>9} {:>10} {:>9} {:>9}  {}\n",
        "variant", "med_r2", "med_rmse", "med_mape", "med_mb", "r2 per run"
    );
    for v in Variant::ALL {
        let network = v.apply(&cfg.network);
        network.validate()?;
        let mut reports = Vec::with_capacity(runs);
        for r in 0..runs {
            let run_seed = seed + r as u64;
            let t = TrainConfig { seed: run_seed, ..tcfg.clone() };
            let (mut model, log) = fit(&network, &t, &train_set, &format!("{} seed {run_seed} ", v.name()))?;
            let run_dir = dir.join(format!("{}-seed{run_seed}", v.name()));
            create_dir(&run_dir)?;
            let (rep, obs, pred) = report(&mut model, &test_set, t.batch_size)?;
            model.save(&run_dir.join(CHECKPOINT), &[])?;
            write(&run_dir.join(LOSS_LOG), &log)?;
            write(&run_dir.join("report_test.toml"), &rep.to_text())?;
            export_residuals(&obs, &pred, &run_dir.join("residuals_test.csv"))?;
            eprintln!("{} seed {run_seed}: test r2 {:.4}", v.name(), rep.r2);
            reports.push(rep);
        }
        let med = |f: fn(&MetricsReport) -> f64| median(&reports.iter().map(f).collect::<Vec<_>>());
        let per_run: Vec<String> = reports.iter().map(|r| format!("{:.4}", r.r2)).collect();
        writeln!(
            table,
            "{:<10} {:>9.4} {:>10.4} {:>9.3} {:>9.4}  {}",
            v.name(),
            med(|r| r.r2)?,
            med(|r| r.rmse)?,
            med(|r| r.mape_percent)?,
            med(|r| r.mean_bias)?,
            per_run.join(" ")
        )
        .expect("string write");
    }
    writeln!(
        table,
        "{:<10} {:>9.4} {:>10.4} {:>9.3} {:>9.4}",
        "linear", base.r2, base.rmse, base.mape_percent, base.mean_bias
    )
    .expect("string write");
    let mut resolved = cfg.clone();
    resolved.out = Some(dir.clone());
    write(&dir.join(RUN_CONFIG), &resolved.to_text())?;
    write(&dir.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(true)
}

