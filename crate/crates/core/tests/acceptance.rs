//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! the real stdout and then asserts its criterion. Tests hold a shared lock so
//! wall-clock limits are measured without contention.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use dvib::data::{
    corrupt, gen_factor_dataset, gen_twoview_transform, glyph_images, train_test_split, CorruptionKind,
    CorruptionSpec, FactorSpec, LabelSet, MultiviewDataset,
};
use dvib::eval::{adjusted_rand_index, disentanglement_grid, lookup, ProbeReport};
use dvib::gauss::{kl_between, kl_to_standard, DiagGaussian};
use dvib::gradcheck::{run_gradcheck, GradcheckOptions};
use dvib::model::Representation;
use dvib::ndmath::Matrix;
use dvib::train::{train_monitored, AnyModel, ModelKind, Monitor, TrainConfig, TrainLog};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: u32, passed: bool, detail: &str) {
    let line = format!(
        "acceptance criterion {criterion}: {} {detail}\n",
        if passed { "PASS" } else { "FAIL" }
    );
    // bypasses the test harness capture so the line is always visible
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
}

fn acc(grid: &[ProbeReport], rep: Representation, set: LabelSet) -> f64 {
    lookup(grid, rep, set).expect("cell present").accuracy
}

struct TrainedRun {
    log: TrainLog,
    grid: Vec<ProbeReport>,
    seconds: f64,
}

fn train_and_probe(data: &MultiviewDataset, cfg: &TrainConfig, heldout_monitor: bool) -> TrainedRun {
    let started = Instant::now();
    let split = train_test_split(data.len(), cfg.seed);
    let train_set = data.subset(&split.train).unwrap();
    let test_set = data.subset(&split.test).unwrap();
    let mut model = AnyModel::new(cfg, data.x.cols(), data.y.cols()).unwrap();
    let monitor = Monitor {
        heldout: heldout_monitor.then_some((&test_set.x, &test_set.y)),
        ..Monitor::default()
    };
    let log = train_monitored(&mut model, &train_set, cfg, &monitor).unwrap();
    let grid = disentanglement_grid(&model, data, &split, &cfg.probe).unwrap();
    TrainedRun {
        log,
        grid,
        seconds: started.elapsed().as_secs_f64(),
    }
}

/// Default DVIB run on the default factor dataset, shared by two criteria.
fn factor_run() -> &'static TrainedRun {
    static RUN: OnceLock<TrainedRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let data = gen_factor_dataset(&FactorSpec::default()).unwrap();
        train_and_probe(&data, &TrainConfig::default(), true)
    })
}

#[test]
fn criterion_1_gradient_suite() {
    let _g = serial();
    let started = Instant::now();
    let r = run_gradcheck(&GradcheckOptions::default()).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let worst = r
        .entries
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let ok = r.passed() && r.tolerance <= 1e-4 && r.step == 1e-5 && r.entries.len() >= 8 && secs < 60.0;
    report(
        1,
        ok,
        &format!(
            "{} checks, worst {} at {:.2e} (tol {:.0e}), {secs:.1}s",
            r.entries.len(),
            worst.term,
            worst.max_rel_error,
            r.tolerance
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_2_bound_sanity() {
    let _g = serial();
    let run = factor_run();
    let rates_ok = run
        .log
        .epochs
        .iter()
        .all(|r| r.terms.rate_x >= 0.0 && r.terms.rate_y >= 0.0);
    let late: Vec<f64> = run
        .log
        .epochs
        .iter()
        .filter(|r| r.epoch > 10)
        .map(|r| r.heldout_score_gap.expect("dvib has a critic"))
        .collect();
    let gap_ok = !late.is_empty() && late.iter().all(|&g| g > 0.0);
    let min_gap = late.iter().cloned().fold(f64::INFINITY, f64::min);
    let ok = rates_ok && gap_ok && run.log.epochs.len() == 50;
    report(
        2,
        ok,
        &format!(
            "epochs {}, rates non-negative {rates_ok}, min held-out paired-minus-shuffled score after epoch 10 {min_gap:.3}",
            run.log.epochs.len()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_3_disentanglement_structure() {
    let _g = serial();
    let run = factor_run();
    let g = &run.grid;
    use LabelSet::*;
    use Representation::*;
    let chance = |k: usize| 1.0 / k as f64;
    let spec = FactorSpec::default();
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    check("z_x_s shared >= 0.90", acc(g, XShared, Shared) >= 0.90);
    check("z_y_s shared >= 0.90", acc(g, YShared, Shared) >= 0.90);
    check("z_x_p private_x >= 0.80", acc(g, XPrivate, PrivateX) >= 0.80);
    check(
        "z_x_p strictly best on private_x",
        acc(g, XPrivate, PrivateX) > acc(g, XPrivate, Shared) && acc(g, XPrivate, PrivateX) > acc(g, XPrivate, PrivateY),
    );
    check("z_x_p private_y <= chance+0.10", acc(g, XPrivate, PrivateY) <= chance(spec.k_py) + 0.10);
    check("z_x_p shared <= chance+0.10", acc(g, XPrivate, Shared) <= chance(spec.k_shared) + 0.10);
    check("z_y_p private_y >= 0.80", acc(g, YPrivate, PrivateY) >= 0.80);
    check(
        "z_y_p strictly best on private_y",
        acc(g, YPrivate, PrivateY) > acc(g, YPrivate, Shared) && acc(g, YPrivate, PrivateY) > acc(g, YPrivate, PrivateX),
    );
    check("z_y_p private_x <= chance+0.10", acc(g, YPrivate, PrivateX) <= chance(spec.k_px) + 0.10);
    check("z_y_p shared <= chance+0.10", acc(g, YPrivate, Shared) <= chance(spec.k_shared) + 0.10);
    check("runtime < 600s", run.seconds < 600.0);
    let cells: Vec<String> = g
        .iter()
        .map(|c| format!("{}/{}={:.3}", c.representation.name(), c.label_set.name(), c.accuracy))
        .collect();
    report(
        3,
        failures.is_empty(),
        &format!("{:.0}s; failed: [{}]; grid: {}", run.seconds, failures.join(", "), cells.join(" ")),
    );
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn criterion_4_rotation_flip_views() {
    let _g = serial();
    let started = Instant::now();
    let (images, labels) = glyph_images(5000, 0).unwrap();
    let data = gen_twoview_transform(&images, &labels, 0).unwrap();
    let run = train_and_probe(&data, &TrainConfig::default(), false);
    let secs = started.elapsed().as_secs_f64();
    let g = &run.grid;
    use LabelSet::*;
    use Representation::*;
    let reps = [XShared, XPrivate, YShared, YPrivate];
    let beats_others = |winner: Representation, set: LabelSet| {
        reps.iter()
            .filter(|&&r| r != winner)
            .all(|&r| acc(g, winner, set) >= acc(g, r, set) + 0.10)
    };
    let rotation_ok = beats_others(XPrivate, PrivateX);
    let flip_ok = beats_others(YPrivate, PrivateY);
    let shared_floor = acc(g, XShared, Shared).min(acc(g, YShared, Shared));
    let private_ceiling = acc(g, XPrivate, Shared).max(acc(g, YPrivate, Shared));
    let class_ok = shared_floor >= private_ceiling;
    let ok = rotation_ok && flip_ok && class_ok && secs < 900.0;
    let cells: Vec<String> = g
        .iter()
        .map(|c| format!("{}/{}={:.3}", c.representation.name(), c.label_set.name(), c.accuracy))
        .collect();
    report(
        4,
        ok,
        &format!(
            "{secs:.0}s; rotation by z_x_p {rotation_ok}, flip by z_y_p {flip_ok}, class by shared {class_ok}; grid: {}",
            cells.join(" ")
        ),
    );
    assert!(ok);
}

/// Non-increasing, except for at most one rise of at most 0.02.
fn non_increasing_with_one_inversion(seq: &[f64]) -> bool {
    let rises: Vec<f64> = seq.windows(2).map(|w| w[1] - w[0]).filter(|&d| d > 0.0).collect();
    rises.len() <= 1 && rises.iter().all(|&d| d <= 0.02)
}

#[test]
fn criterion_5_corruption_trend() {
    let _g = serial();
    let started = Instant::now();
    let clean = gen_factor_dataset(&FactorSpec::default()).unwrap();
    let mut curves: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for level in 1..=5u8 {
        let mut data = clean.clone();
        let noise = CorruptionSpec::new(CorruptionKind::GaussianNoise, level).unwrap();
        let blur = CorruptionSpec::new(CorruptionKind::Blur, level).unwrap();
        data.x = corrupt(&data.x, &noise, 11).unwrap();
        data.y = corrupt(&data.y, &blur, 12).unwrap();
        for kind in [ModelKind::Dvib, ModelKind::Vib, ModelKind::Vae] {
            let cfg = TrainConfig {
                model: kind,
                ..TrainConfig::default()
            };
            let run = train_and_probe(&data, &cfg, false);
            let score = match kind {
                ModelKind::Dvib => {
                    0.5 * (acc(&run.grid, Representation::XShared, LabelSet::Shared)
                        + acc(&run.grid, Representation::YShared, LabelSet::Shared))
                }
                _ => acc(&run.grid, Representation::Joint, LabelSet::Shared),
            };
            curves.entry(kind.name()).or_default().push(score);
        }
    }
    let trends_ok = curves.values().all(|c| non_increasing_with_one_inversion(c));
    let dominance_ok = curves["dvib"].iter().zip(&curves["vae"]).all(|(d, v)| d >= v);
    let ok = trends_ok && dominance_ok;
    let fmt = |c: &Vec<f64>| c.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(",");
    report(
        5,
        ok,
        &format!(
            "{:.0}s; dvib [{}] vib [{}] vae [{}]; trends {trends_ok}, dvib >= vae {dominance_ok}",
            started.elapsed().as_secs_f64(),
            fmt(&curves["dvib"]),
            fmt(&curves["vib"]),
            fmt(&curves["vae"])
        ),
    );
    assert!(ok);
}

fn dvib_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_dvib")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "dvck" | "dvds" | "json")))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn criterion_6_determinism() {
    let _g = serial();
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().to_str().unwrap().to_string();
    let data = format!("{dir}/dataset.dvds");
    let ck = format!("{dir}/model.dvck");
    let commands: Vec<Vec<&str>> = vec![
        vec!["generate", "--preset", "factor", "--n", "600", "--seed", "5", "--out", &dir],
        vec![
            "train", "--data", &data, "--model", "dvib", "--epochs", "4", "--hidden", "32", "--critic-hidden", "16",
            "--eval-every", "2", "--seed", "5", "--out", &dir,
        ],
        vec!["eval", "--checkpoint", &ck, "--data", &data, "--corrupt-x", "gaussian_noise:2", "--out", &dir],
        vec!["gradcheck", "--seed", "5", "--out", &dir],
    ];
    let mut first = Vec::new();
    for args in &commands {
        dvib_cli(args);
        first.push(snapshot(root.path()));
    }
    let mut diffs = Vec::new();
    for (args, before) in commands.iter().zip(&first) {
        dvib_cli(args);
        let after = snapshot(root.path());
        for (name, bytes) in before {
            if after.get(name) != Some(bytes) {
                diffs.push(format!("{} after `{}`", name, args[0]));
            }
        }
    }
    let files: Vec<&String> = first.last().unwrap().keys().collect();
    let ok = diffs.is_empty() && files.len() >= 9;
    report(6, ok, &format!("{} files compared, differences: {diffs:?}", files.len()));
    assert!(ok, "{files:?}");
}

/// `log N(z; m, diag(exp(lv)))` written out independently of the library.
fn log_normal(z: &[f64], m: &[f64], lv: &[f64]) -> f64 {
    z.iter()
        .zip(m)
        .zip(lv)
        .map(|((z, m), lv)| -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + (z - m).powi(2) / lv.exp()))
        .sum()
}

fn monte_carlo_kl(m: &[f64], lv: &[f64], m2: &[f64], lv2: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut total = 0.0;
    let mut z = vec![0.0; m.len()];
    for _ in 0..samples {
        for j in 0..m.len() {
            let e: f64 = rng.sample(StandardNormal);
            z[j] = m[j] + (0.5 * lv[j]).exp() * e;
        }
        total += log_normal(&z, m, lv) - log_normal(&z, m2, lv2);
    }
    total / samples as f64
}

/// Pair-counting form of the adjusted Rand index, O(n²).
fn pair_counting_ari(a: &[usize], b: &[usize]) -> f64 {
    let (mut both, mut only_a, mut only_b, mut neither) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    2.0 * (both * neither - only_a * only_b)
        / ((both + only_a) * (only_a + neither) + (both + only_b) * (only_b + neither))
}

#[test]
fn criterion_7_oracle_equivalences() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_kl = 0.0f64;
    for _ in 0..3 {
        let d = 4;
        let m: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let lv: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m2: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let lv2: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = DiagGaussian::new(Matrix::row_vector(&m), Matrix::row_vector(&lv)).unwrap();
        let b = DiagGaussian::new(Matrix::row_vector(&m2), Matrix::row_vector(&lv2)).unwrap();
        let zeros = vec![0.0; d];
        let mc_std = monte_carlo_kl(&m, &lv, &zeros, &zeros, 100_000, &mut rng);
        let mc_between = monte_carlo_kl(&m, &lv, &m2, &lv2, 100_000, &mut rng);
        let closed_std = kl_to_standard(&a)[0];
        let closed_between = kl_between(&a, &b).unwrap()[0];
        worst_kl = worst_kl
            .max((closed_std - mc_std).abs() / closed_std)
            .max((closed_between - mc_between).abs() / closed_between);
    }
    let mut worst_ari = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(10..120);
        let (ka, kb) = (rng.random_range(2..7), rng.random_range(2..7));
        let a: Vec<usize> = (0..n).map(|i| if i < ka { i } else { rng.random_range(0..ka) }).collect();
        let b: Vec<usize> = (0..n).map(|i| if i < kb { i } else { rng.random_range(0..kb) }).collect();
        worst_ari = worst_ari.max((adjusted_rand_index(&a, &b).unwrap() - pair_counting_ari(&a, &b)).abs());
    }
    let ok = worst_kl <= 0.01 && worst_ari <= 1e-12;
    report(
        7,
        ok,
        &format!("worst KL relative gap {worst_kl:.2e} (limit 1e-2), worst ARI gap {worst_ari:.1e} (limit 1e-12)"),
    );
    assert!(ok);
}
