//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line and
//! asserts it. Tests share one lock so timing-sensitive checks do not compete
//! for the CPU.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmnet::autodiff::Tape;
use mmnet::bench::{pow2_lengths, scan_scaling};
use mmnet::blocks::AttentionKind;
use mmnet::data::{load_manifest, preprocess, write_manifest, DatasetManifest, ManifestRow, PlotSample, Preprocessed, Split};
use mmnet::gradcheck::full_suite;
use mmnet::metrics::{diff_table, mape, mean_bias, median, r2, rmse, Metric, MetricsReport};
use mmnet::network::{build_network, NetworkConfig};
use mmnet::sparse::{build_kernel_map, Coords};
use mmnet::ssm::{lti_scan, LtiParams};
use mmnet::DenseTensor;

const CONV_CASES: usize = 100;
const CONV_TOL: f64 = 1e-10;
const CONV_BUDGET: Duration = Duration::from_secs(10);
const SCAN_CASES: usize = 200;
const SCAN_TOL: f64 = 1e-10;
const SCAN_BUDGET: Duration = Duration::from_secs(10);
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const TABLE_TOL: f64 = 1e-3 + 1e-9;
const OVERFIT_PLOTS: usize = 32;
const OVERFIT_EPOCHS: usize = 500;
const OVERFIT_R2: f64 = 0.99;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const BASELINE_PLOTS: usize = 1000;
const BASELINE_MARGIN: f64 = 0.05;
const RUNS: usize = 3;
const SLOPE_RANGE: (f64, f64) = (0.8, 1.2);

/// Network and training settings sized for a single commodity CPU core.
const DESK_CONFIG: &str = r#"
[network]
stem_channels = 8
widths = [4, 8, 8, 16]
se_reduction = 4
head_hidden = 16
voxel_size = 2.5

[network.mamba]
state_dim = 4
expand = 1
conv_width = 4

[train]
epochs = 20
batch_size = 8
lr = 3e-3
clip_norm = 1.0

[synth]
plot_radius = 10.0
point_density = 6.0
"#;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, ok: bool, detail: String) {
    show(&format!("criterion {n:>2}: {} {detail}", if ok { "PASS" } else { "FAIL" }));
    assert!(ok, "criterion {n} failed: {detail}");
}

/// Written straight to stderr so the text shows without `--nocapture`.
fn show(text: &str) {
    let _ = writeln!(std::io::stderr(), "{text}");
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
    let n = shape.iter().product();
    DenseTensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn c01_sparse_conv_matches_dense_convolution() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..CONV_CASES {
        let side = rng.random_range(1..=5i32);
        let batch = rng.random_range(1..=2usize);
        let (cin, cout) = (rng.random_range(1..=8usize), rng.random_range(1..=8usize));
        let k: i32 = if rng.random_bool(0.8) { 3 } else { 1 };
        let fill = rng.random_range(0.1..0.9);
        let mut pts = Vec::new();
        for b in 0..batch as i32 {
            for x in 0..side {
                for y in 0..side {
                    for z in 0..side {
                        if rng.random_bool(fill) {
                            pts.push([b, x, y, z]);
                        }
                    }
                }
            }
        }
        if pts.is_empty() {
            pts.push([0, 0, 0, 0]);
        }
        let coords = Coords::from_unsorted(pts, 1, batch).unwrap();
        let n = coords.len();
        let x = random_tensor(&mut rng, &[n, cin]);
        let vol = (k * k * k) as usize;
        let w = random_tensor(&mut rng, &[vol, cin, cout]);
        let bias = random_tensor(&mut rng, &[cout]);

        // dense grid with empty voxels as zeros
        let s = side as usize;
        let mut grid = vec![0.0; batch * s * s * s * cin];
        let cell = |c: &[i32; 4]| ((c[0] as usize * s + c[1] as usize) * s + c[2] as usize) * s + c[3] as usize;
        for (row, c) in coords.as_slice().iter().enumerate() {
            grid[cell(c) * cin..][..cin].copy_from_slice(x.row(row));
        }
        let r = (k - 1) / 2;
        let mut expect = vec![0.0; n * cout];
        for (row, c) in coords.as_slice().iter().enumerate() {
            for o in 0..cout {
                let mut acc = bias.data()[o];
                for dx in -r..=r {
                    for dy in -r..=r {
                        for dz in -r..=r {
                            let p = [c[0], c[1] + dx, c[2] + dy, c[3] + dz];
                            if p[1..].iter().any(|&v| v < 0 || v >= side) {
                                continue;
                            }
                            let widx = (((dx + r) * k + (dy + r)) * k + (dz + r)) as usize;
                            for i in 0..cin {
                                acc += w.data()[(widx * cin + i) * cout + o] * grid[cell(&p) * cin + i];
                            }
                        }
                    }
                }
                expect[row * cout + o] = acc;
            }
        }

        let km = Arc::new(build_kernel_map(&coords, k as u32, 1).unwrap());
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(bias));
        let y = tape.sparse_conv(xv, wv, Some(bv), km).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&expect) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        worst < CONV_TOL && elapsed < CONV_BUDGET,
        format!("{CONV_CASES} cases, max abs diff {worst:.2e} (< {CONV_TOL:.0e}), {:.2}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn c02_lti_scan_matches_unrolled_sum() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..SCAN_CASES {
        let t_len = rng.random_range(1..=64usize);
        let n = rng.random_range(1..=8usize);
        let ch = rng.random_range(1..=4usize);
        let x = random_tensor(&mut rng, &[t_len, ch]);
        let abar = DenseTensor::new(vec![ch, n], (0..ch * n).map(|_| rng.random_range(-0.99..0.99)).collect()).unwrap();
        let bbar = random_tensor(&mut rng, &[ch, n]);
        let c = random_tensor(&mut rng, &[ch, n]);
        let d = random_tensor(&mut rng, &[ch]);
        let h0: Option<Vec<f64>> = rng.random_bool(0.5).then(|| (0..ch * n).map(|_| rng.random_range(-1.0..1.0)).collect());
        let p = LtiParams {
            abar: abar.clone(),
            bbar: bbar.clone(),
            c: c.clone(),
            d: d.clone(),
            h0: h0.clone(),
        };
        let y = lti_scan(&x, &p).unwrap();
        // y_t = Σ_k C Ā^(t-k) B̄ x_k + C Ā^(t+1) h0 + D x_t
        for t in 0..t_len {
            for k in 0..ch {
                let mut acc = d.data()[k] * x.data()[t * ch + k];
                for s in 0..n {
                    let (a, b, cc) = (abar.data()[k * n + s], bbar.data()[k * n + s], c.data()[k * n + s]);
                    for j in 0..=t {
                        acc += cc * a.powi((t - j) as i32) * b * x.data()[j * ch + k];
                    }
                    if let Some(h) = &h0 {
                        acc += cc * a.powi(t as i32 + 1) * h[k * n + s];
                    }
                }
                worst = worst.max((y.data()[t * ch + k] - acc).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        worst < SCAN_TOL && elapsed < SCAN_BUDGET,
        format!("{SCAN_CASES} cases, max abs diff {worst:.2e} (< {SCAN_TOL:.0e}), {:.2}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn c03_gradient_suite() {
    let _g = serial();
    let start = Instant::now();
    let results = full_suite(0).unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<String> = results.iter().filter(|r| !r.passed()).map(|r| r.to_string()).collect();
    let blocks = results.iter().filter(|r| r.name.contains("bottleneck")).count();
    let worst_op = results
        .iter()
        .filter(|r| r.tol < 1e-3)
        .map(|r| r.max_rel)
        .fold(0.0, f64::max);
    let net = results.iter().find(|r| r.name == "network_end_to_end").unwrap();
    verdict(
        3,
        failed.is_empty() && blocks == 4 && elapsed < GRAD_BUDGET,
        format!(
            "{} checks, worst per-op rel {worst_op:.2e} (< 1e-4), end-to-end rel {:.2e} (< 1e-3), {:.1}s {failed:?}",
            results.len(),
            net.max_rel,
            elapsed.as_secs_f64()
        ),
    );
}

/// Trainable parameter count derived from layer shapes alone.
fn shape_walk(cfg: &NetworkConfig) -> usize {
    let conv = |i: usize, o: usize, k: usize| k * k * k * i * o + o;
    let norm = |c: usize| 2 * c;
    let linear = |i: usize, o: usize, bias: bool| i * o + if bias { o } else { 0 };
    let se = |c: usize| {
        let h = (c / cfg.se_reduction).max(1);
        linear(c, h, false) + linear(h, c, false)
    };
    let mamba = |c: usize| {
        let m = &cfg.mamba;
        let e = m.expand * c;
        let r = c.div_ceil(16);
        2 * linear(c, e, false)
            + e * m.conv_width
            + e
            + linear(e, r, false)
            + 2 * linear(e, m.state_dim, false)
            + linear(r, e, true)
            + e * m.state_dim
            + e
            + linear(e, c, false)
    };
    let cin0 = 3 + usize::from(cfg.intensity);
    let mut total = conv(cin0, cfg.stem_channels, 3) + norm(cfg.stem_channels);
    total += conv(cfg.stem_channels, cfg.stem_channels, 3) + norm(cfg.stem_channels);
    let mut cin = cfg.stem_channels;
    let mut stage_out = Vec::new();
    for (stage, (&width, &depth)) in cfg.widths.iter().zip(&cfg.depths).enumerate() {
        let out = width * cfg.expansion;
        for b in 0..depth {
            let strided = stage > 0 && b == 0;
            total += conv(cin, width, 1) + norm(width) + conv(width, width, 3) + norm(width) + conv(width, out, 1) + norm(out);
            let mamba_here = b + 1 == depth && cfg.stage_attention[stage] == AttentionKind::MambaSe;
            total += se(out) + if mamba_here { mamba(out) } else { 0 };
            if strided || cin != out {
                total += conv(cin, out, 1) + norm(out);
            }
            cin = out;
        }
        stage_out.push(out);
    }
    if cfg.fusion {
        total += conv(stage_out[2], stage_out[3], 1) + norm(stage_out[3]);
    }
    total + linear(stage_out[3], cfg.head_hidden, true) + linear(cfg.head_hidden, 1, true)
}

#[test]
fn c04_architecture_audit() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let default = NetworkConfig::default();
    let mut store = mmnet::params::ParamStore::new();
    let net = build_network(&default, &mut store, &mut rng).unwrap();
    let audit = net.audit(&store);
    let line = audit.to_string();
    let halved = NetworkConfig {
        widths: default.widths.iter().map(|w| w / 2).collect(),
        stem_channels: default.stem_channels / 2,
        ..default.clone()
    };
    let mut hstore = mmnet::params::ParamStore::new();
    let hnet = build_network(&halved, &mut hstore, &mut rng).unwrap();
    let bad = NetworkConfig {
        depths: vec![3, 4, 6, 4],
        ..default.clone()
    };
    let rejected = matches!(bad.validate(), Err(mmnet::Error::Config(_)));
    let ok = line == "blocks=16 mamba_se=4 at [3,7,13,16]"
        && audit.params == shape_walk(&default)
        && hnet.audit(&hstore).params == shape_walk(&halved)
        && audit.params == store.num_trainable()
        && rejected;
    verdict(
        4,
        ok,
        format!(
            "{line}; params {} vs oracle {}; halved {} vs oracle {}; depths (3,4,6,4) rejected {rejected}",
            audit.params,
            shape_walk(&default),
            hnet.audit(&hstore).params,
            shape_walk(&halved)
        ),
    );
}

fn report(units: &str, r2: f64, rmse: f64, mape: f64, mb: f64) -> MetricsReport {
    MetricsReport {
        units: units.into(),
        n: 1,
        r2,
        rmse,
        mape_percent: mape,
        mean_bias: mb,
        n_excluded_from_mape: 0,
    }
}

#[test]
fn c05_metrics_and_reference_differences() {
    let _g = serial();
    let (obs, pred) = ([100.0, 200.0], [110.0, 190.0]);
    let hand = rmse(&obs, &pred).unwrap() == 10.0
        && r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() == 0.5
        && mape(&obs, &pred).unwrap() == (7.5, 0)
        && mean_bias(&obs, &pred).unwrap() == 0.0
        && mean_bias(&obs, &[105.0, 205.0]).unwrap() == 5.0;
    // (units, metric, current, reference, printed difference)
    let cells = [
        ("Mg/ha", Metric::R2, 0.810, 0.785, 0.025),
        ("Mg/ha", Metric::Rmse, 44.615, 46.030, 1.416),
        ("Mg/ha", Metric::Mape, 163.150, 202.000, 38.850),
        ("Mg/ha", Metric::MeanBias, 0.005, 0.013, 0.008),
        ("m3/ha", Metric::R2, 0.801, 0.774, 0.027),
        ("m3/ha", Metric::Rmse, 85.860, 91.398, 5.538),
        ("m3/ha", Metric::Mape, 100.290, 138.115, 37.825),
        ("m3/ha", Metric::MeanBias, 0.119, 1.164, 1.045),
    ];
    let mut worst: f64 = 0.0;
    let mut matched = 0;
    for units in ["Mg/ha", "m3/ha"] {
        let rows: Vec<_> = cells.iter().filter(|c| c.0 == units).collect();
        let pick = |m: Metric, i: usize| rows.iter().find(|c| c.1 == m).map(|c| if i == 0 { c.2 } else { c.3 }).unwrap();
        let cur = report(units, pick(Metric::R2, 0), pick(Metric::Rmse, 0), pick(Metric::Mape, 0), pick(Metric::MeanBias, 0));
        let reference = report(units, pick(Metric::R2, 1), pick(Metric::Rmse, 1), pick(Metric::Mape, 1), pick(Metric::MeanBias, 1));
        for row in diff_table(&cur, &reference).unwrap() {
            let printed = rows.iter().find(|c| c.1 == row.metric).unwrap().4;
            worst = worst.max((row.diff - printed).abs());
            if (row.diff - printed).abs() <= TABLE_TOL {
                matched += 1;
            }
        }
    }
    verdict(
        5,
        hand && matched == 8,
        format!("hand cases exact {hand}; {matched}/8 table cells within {TABLE_TOL:.4} (worst {worst:.4})"),
    );
}

fn mmnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmnet")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = mmnet(args);
    assert!(
        out.status.success(),
        "mmnet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("{extra}\n{DESK_CONFIG}")).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn c06_small_set_is_learnable() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "splits = [1.0, 0.0, 0.0]");
    let data = dir.path().join("data");
    let plots = OVERFIT_PLOTS.to_string();
    run_ok(&["synth", "--config", s(&cfg), "--seed", "6", "--plots", &plots, "--out", s(&data)]);
    let run = dir.path().join("run");
    let epochs = OVERFIT_EPOCHS.to_string();
    let start = Instant::now();
    run_ok(&[
        "train", "--config", s(&cfg), "--seed", "6", "--manifest", s(&data.join("manifest.csv")),
        "--epochs", &epochs, "--out", s(&run),
    ]);
    let elapsed = start.elapsed();
    let rep = MetricsReport::load(&run.join("report_train.toml")).unwrap();
    verdict(
        6,
        rep.r2 >= OVERFIT_R2 && rep.n == OVERFIT_PLOTS && elapsed < OVERFIT_BUDGET,
        format!("{} plots, {OVERFIT_EPOCHS} epochs, train r2 {:.4} (>= {OVERFIT_R2}), {:.0}s", rep.n, rep.r2, elapsed.as_secs_f64()),
    );
}

struct Ablation {
    table: String,
    baseline_r2: f64,
    /// Test R² per variant, per seed.
    r2: Vec<(String, Vec<f64>)>,
}

fn ablation() -> &'static Ablation {
    static CELL: OnceLock<Ablation> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let cfg = write_config(&dir, "");
        let data = dir.join("data");
        let plots = BASELINE_PLOTS.to_string();
        run_ok(&["synth", "--config", s(&cfg), "--seed", "7", "--plots", &plots, "--out", s(&data)]);
        let manifest = load_manifest(&data.join("manifest.csv")).unwrap();
        let count = |sp: Split| manifest.rows.iter().filter(|r| r.split == sp).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (700, 150, 150));
        let out = dir.join("ablate");
        let runs = RUNS.to_string();
        let table = run_ok(&[
            "ablate", "--config", s(&cfg), "--seed", "7", "--manifest", s(&data.join("manifest.csv")),
            "--runs", &runs, "--out", s(&out),
        ]);
        let baseline_r2 = MetricsReport::load(&out.join("baseline_test.toml")).unwrap().r2;
        let r2 = ["mmb-only", "ffm-only", "full"]
            .iter()
            .map(|v| {
                let vals = (0..RUNS as u64)
                    .map(|i| MetricsReport::load(&out.join(format!("{v}-seed{}/report_test.toml", 7 + i))).unwrap().r2)
                    .collect();
                (v.to_string(), vals)
            })
            .collect();
        Ablation { table, baseline_r2, r2 }
    })
}

fn med(a: &Ablation, variant: &str) -> f64 {
    median(&a.r2.iter().find(|(v, _)| v == variant).unwrap().1).unwrap()
}

#[test]
fn c07_network_beats_linear_baseline() {
    let _g = serial();
    let a = ablation();
    let full = med(a, "full");
    verdict(
        7,
        full - a.baseline_r2 >= BASELINE_MARGIN,
        format!(
            "median test r2 {full:.4} vs baseline {:.4}: margin {:+.4} (>= {BASELINE_MARGIN})",
            a.baseline_r2,
            full - a.baseline_r2
        ),
    );
}

#[test]
fn c08_ablation_table() {
    let _g = serial();
    let a = ablation();
    show(&a.table);
    let rows = ["mmb-only", "ffm-only", "full"]
        .iter()
        .filter(|v| a.table.lines().any(|l| l.starts_with(*v)))
        .count();
    let full = med(a, "full");
    let (mmb, ffm) = (med(a, "mmb-only"), med(a, "ffm-only"));
    verdict(
        8,
        rows == 3 && full >= mmb && full >= ffm,
        format!("{rows} variant rows; median test r2 full {full:.4}, mmb-only {mmb:.4}, ffm-only {ffm:.4}"),
    );
}

#[test]
fn c09_scan_time_is_linear_in_length() {
    let _g = serial();
    let report = scan_scaling(&pow2_lengths(10, 14), 16, 16, 5).unwrap();
    show(&report.to_string());
    verdict(
        9,
        report.slope >= SLOPE_RANGE.0 && report.slope <= SLOPE_RANGE.1,
        format!("log-log slope {:.3} in [{}, {}]", report.slope, SLOPE_RANGE.0, SLOPE_RANGE.1),
    );
}

#[test]
fn c10_runs_are_bit_identical() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = dir.path().join("data");
    run_ok(&["synth", "--config", s(&cfg), "--seed", "10", "--plots", "30", "--out", s(&data)]);
    let manifest = data.join("manifest.csv");
    let runs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("run{i}"))).collect();
    for run in &runs {
        run_ok(&[
            "train", "--config", s(&cfg), "--seed", "10", "--manifest", s(&manifest), "--epochs", "4",
            "--threads", "1", "--out", s(run),
        ]);
        run_ok(&["eval", "--manifest", s(&manifest), "--out", s(run), "--threads", "1"]);
    }
    let files = ["checkpoint.txt", "loss.csv", "report_train.toml", "report_val.toml", "report_test.toml", "residuals_test.csv"];
    let same: Vec<bool> = files
        .iter()
        .map(|f| std::fs::read(runs[0].join(f)).unwrap() == std::fs::read(runs[1].join(f)).unwrap())
        .collect();
    verdict(
        10,
        same.iter().all(|&b| b),
        format!("{} artifacts compared, identical {same:?}", files.len()),
    );
}

fn sample(points: Vec<[f64; 3]>) -> PlotSample {
    PlotSample {
        plot_id: "p".into(),
        points,
        intensity: None,
        agb: 1.0,
        volume: 1.0,
        split: Split::Train,
        time_gap_years: 0.0,
    }
}

#[test]
fn c11_preprocessing_rules() {
    let _g = serial();
    let rejected = matches!(
        preprocess(&sample(vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.3]])).unwrap(),
        Preprocessed::Rejected { .. }
    );
    let kept = matches!(
        preprocess(&sample(vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.31]])).unwrap(),
        Preprocessed::Kept(_)
    );

    let dir = tempfile::tempdir().unwrap();
    let row = |id: &str, split: Split| ManifestRow {
        plot_id: id.into(),
        points_path: PathBuf::from(format!("{id}.txt")),
        agb: 1.0,
        volume: 1.0,
        split,
        time_gap_years: 0.0,
    };
    let leaky = DatasetManifest {
        root: dir.path().to_path_buf(),
        rows: vec![row("a", Split::Train), row("b", Split::Train), row("a", Split::Test)],
    };
    let path = dir.path().join("manifest.csv");
    let write_refused = write_manifest(&path, &leaky).is_err();
    std::fs::write(
        &path,
        "plot_id,points_path,agb,volume,split,time_gap_years\na,a.txt,1,1,train,0\nb,b.txt,1,1,train,0\na,a.txt,1,1,test,0\n",
    )
    .unwrap();
    let load_refused = matches!(load_manifest(&path), Err(mmnet::Error::Validation(m)) if m.contains("plot a"));
    let cli = mmnet(&["train", "--seed", "1", "--manifest", s(&path), "--out", s(&dir.path().join("run"))]);
    let cli_refused = cli.status.code() == Some(2);

    let (pct, excluded) = mape(&[0.0, 100.0, 200.0], &[5.0, 110.0, 190.0]).unwrap();
    let mape_ok = pct == 7.5 && excluded == 1;
    verdict(
        11,
        rejected && kept && write_refused && load_refused && cli_refused && mape_ok,
        format!(
            "1.3 m rejected {rejected}, 1.31 m kept {kept}; overlap refused on write {write_refused}, load {load_refused}, cli exit 2 {cli_refused}; mape {pct} with {excluded} excluded"
        ),
    );
}

