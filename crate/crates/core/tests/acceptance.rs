//! Acceptance criteria, one test each. Every test writes a single
//! `PASS`/`FAIL`/`SKIP criterion N: ...` line straight to stderr, bypassing
//! the harness capture, before asserting.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssia::config::Config;
use ssia::gradcheck::{run_suite, THRESHOLD};
use ssia::models::{derive_pairs, Arch, Backbone, ConnectionScheme, SsiaNet, TargetSpatial};
use ssia::nn::{Mode, Module};
use ssia::ssia::{ssia_loss, valid_mask, BlockConfig};
use ssia::tensor::OpKind;
use ssia::train::{self, Checkpoint, EpochRow};
use ssia::viz::{self, Source};
use ssia::{Tape, Tensor};

fn report(n: u32, pass: bool, detail: &str) {
    report_status(n, if pass { "PASS" } else { "FAIL" }, detail);
}

fn report_status(n: u32, status: &str, detail: &str) {
    let _ = writeln!(std::io::stderr(), "{status} criterion {n}: {detail}");
}

fn config(pairs: &[(&str, &str)]) -> Config {
    let mut c = Config::default();
    for (k, v) in pairs {
        c.set(k, v).unwrap();
    }
    c
}

/// Real CIFAR-10 when `SSIA_CIFAR10_DIR` points at it.
fn cifar_dir() -> Option<String> {
    std::env::var("SSIA_CIFAR10_DIR").ok().filter(|d| !d.is_empty())
}

fn run(c: &Config) -> train::RunReport {
    let cfg = c.resolve().unwrap();
    let (tr, te) = train::load_datasets(&cfg).unwrap();
    train::train(c, &tr, &te).unwrap()
}

fn dir_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let results = run_suite(None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    let covered: Vec<OpKind> = results.iter().filter_map(|r| r.op).collect();
    let missing: Vec<_> = OpKind::ALL
        .iter()
        .filter(|&&k| k != OpKind::Leaf && !covered.contains(&k))
        .collect();
    let has_block = results.iter().any(|r| r.name == "ssia block loss");
    let pass = failing.is_empty() && missing.is_empty() && has_block && secs <= 60.0;
    report(
        1,
        pass,
        &format!(
            "{} checks, worst rel error {worst:.2e} (limit {THRESHOLD:e}), {secs:.2}s, failing {failing:?}, uncovered {missing:?}",
            results.len()
        ),
    );
    assert!(pass);
}

/// Stage a parameter belongs to: 0 for the stem, 1..=4 for stages, 5 for
/// the head; `None` for block parameters.
fn stage_of(name: &str) -> Option<usize> {
    if name.starts_with("stem.") {
        Some(0)
    } else if name.starts_with("fc.") {
        Some(5)
    } else if let Some(rest) = name.strip_prefix("stage") {
        rest.split('.').next().and_then(|s| s.parse().ok())
    } else {
        None
    }
}

#[test]
fn criterion_2_stop_gradient() {
    let mut failures = Vec::new();
    let mut checked = 0;
    for scheme in [ConnectionScheme::Cascaded, ConnectionScheme::Final, ConnectionScheme::Identity] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let backbone = Backbone::<f64>::new(Arch::ResnetTiny8, 10, &mut rng).unwrap();
        let cfg = BlockConfig {
            hidden: 16,
            ..BlockConfig::default()
        };
        let mut net =
            SsiaNet::with_blocks(backbone, scheme, (32, 32), &TargetSpatial::Auto, vec![cfg; 3], &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[4, 3, 32, 32], 1.0, &mut rng);
        for bi in 0..net.blocks.len() {
            let (p, s) = (net.blocks[bi].prediction_stage, net.blocks[bi].signal_stage);
            let prefix = format!("ssia.block{}.", net.blocks[bi].number);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = net.forward_with_taps(&mut tape, xv, Mode::Train).unwrap();
            let loss = out.block_losses[bi].total;
            let grads = tape.backward(loss).unwrap();
            net.visit_params(&mut |param| {
                let g = grads.param(&tape, &param.name);
                let nonzero = g.is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
                let all_zero = g.is_none_or(|g| g.data().iter().all(|&v| v == 0.0));
                let want_nonzero = match stage_of(&param.name) {
                    Some(st) if st <= p => Some(true),
                    Some(st) if st > p && st <= s => Some(false),
                    Some(_) => Some(false),
                    None if param.name.starts_with(&prefix) => Some(true),
                    None => None,
                };
                checked += 1;
                match want_nonzero {
                    Some(true) if !nonzero => failures.push(format!("{scheme} block {}: {} has zero gradient", bi + 1, param.name)),
                    Some(false) if !all_zero => failures.push(format!("{scheme} block {}: {} leaks gradient", bi + 1, param.name)),
                    _ => {}
                }
            });
        }
    }
    let pass = failures.is_empty();
    report(
        2,
        pass,
        &format!("{checked} parameter gradients across 3 schemes x 3 blocks, violations {failures:?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_zero_inference_cost() {
    let c = config(&[("arch", "resnet-tiny-8"), ("ssia.hidden", "16")]);
    let mut net = train::build_net(&c.resolve().unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // move the running statistics off their initial values
    for _ in 0..2 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::randn(&[8, 3, 32, 32], 1.0, &mut rng));
        net.forward_with_taps(&mut tape, x, Mode::Train).unwrap();
    }
    let baseline = Backbone::<f32>::new(Arch::ResnetTiny8, 10, &mut rng).unwrap().num_params();
    let attached_params = net.num_params();
    let mut stripped = net.clone().strip_blocks();
    let mut mismatches = 0;
    for _ in 0..100 {
        let x = Tensor::<f32>::randn(&[1, 3, 32, 32], 1.0, &mut rng);
        let mut t1 = Tape::new();
        let a = t1.constant(x.clone());
        let with_blocks = net.forward_with_taps(&mut t1, a, Mode::Eval).unwrap().logits;
        let mut t2 = Tape::new();
        let b = t2.constant(x);
        let plain = stripped.forward(&mut t2, b, Mode::Eval).unwrap();
        let same = t1
            .value(with_blocks)
            .data()
            .iter()
            .zip(t2.value(plain).data())
            .all(|(u, v)| u.to_bits() == v.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    let pass = stripped.num_params() == baseline && mismatches == 0;
    report(
        3,
        pass,
        &format!(
            "stripped params {} vs baseline {baseline} (attached {attached_params}), {mismatches}/100 logit mismatches",
            stripped.num_params()
        ),
    );
    assert!(pass);
}

/// Independent scalar evaluation of the masked loss for one sample.
fn scalar_loss(f: &[f64], g: &[f64], eta: f64, ub: f64, eps: f64) -> f64 {
    let (mut num, mut cnt) = (0.0, 0.0);
    for (fv, gv) in f.iter().zip(g) {
        if gv.abs() > eta && gv.abs() < ub {
            num += (fv - gv) * (fv - gv);
            cnt += 1.0;
        }
    }
    num / (eps + cnt)
}

fn loss_of(f: &[f64], g: &[f64], shape: &[usize]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let gv = tape.constant(Tensor::from_vec(shape, g.to_vec()).unwrap());
    let fv = tape.leaf(Tensor::from_vec(shape, f.to_vec()).unwrap(), true);
    let l = ssia_loss(&mut tape, fv, gv, &BlockConfig::default()).unwrap();
    tape.value(l).item()
}

#[test]
fn criterion_4_loss_semantics() {
    let cfg = BlockConfig::default();
    let (g, f) = ([1.2, 0.3, -0.8], [1.0, 0.0, -0.2]);
    let worked = loss_of(&f, &g, &[1, 3]);
    let oracle = scalar_loss(&f, &g, 0.5, 10.0, 1e-8);
    let worked_ok = (worked - 0.2).abs() <= 1e-6 && (worked - oracle).abs() <= 1e-12;

    let boundary = valid_mask(&Tensor::<f64>::from_vec(&[4], vec![0.5, -0.5, 10.0, -10.0]).unwrap(), &cfg);
    let inside = valid_mask(&Tensor::<f64>::from_vec(&[2], vec![0.5001, -9.999]).unwrap(), &cfg);
    let boundary_ok = boundary.data().iter().all(|&m| m == 0.0) && inside.data().iter().all(|&m| m == 1.0);
    let boundary_loss = loss_of(&[9.0, 9.0, 9.0, 9.0], &[0.5, -0.5, 10.0, -10.0], &[1, 4]);

    let invalid = loss_of(&[3.0, -2.0, 7.0], &[0.1, 0.0, 25.0], &[1, 3]);

    // two samples: per-sample normalization, then the batch mean
    let (f2, g2) = ([1.0, 0.0, -0.2, 0.0, 0.0, 0.0], [1.2, 0.3, -0.8, 2.0, 0.1, 0.1]);
    let batch = loss_of(&f2, &g2, &[2, 3]);
    let batch_oracle = 0.5 * (scalar_loss(&f2[..3], &g2[..3], 0.5, 10.0, 1e-8) + scalar_loss(&f2[3..], &g2[3..], 0.5, 10.0, 1e-8));

    let pass = worked_ok && boundary_ok && boundary_loss == 0.0 && invalid == 0.0 && (batch - batch_oracle).abs() < 1e-12;
    report(
        4,
        pass,
        &format!(
            "worked example {worked:.9} (oracle {oracle:.9}), |g|=eta and |g|=10 excluded: {boundary_ok}, boundary-only loss {boundary_loss}, all-invalid loss {invalid}, batch {batch:.9} vs {batch_oracle:.9}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_wiring_schemes() {
    let got: Vec<_> = [ConnectionScheme::Cascaded, ConnectionScheme::Final, ConnectionScheme::Identity]
        .iter()
        .map(|&s| derive_pairs(s, 4).unwrap())
        .collect();
    let want = vec![
        vec![(1, 2), (2, 3), (3, 4)],
        vec![(1, 4), (2, 4), (3, 4)],
        vec![(1, 1), (2, 2), (3, 3)],
    ];
    let pass = got == want;
    report(5, pass, &format!("cascaded {:?}, final {:?}, identity {:?}", got[0], got[1], got[2]));
    assert!(pass);
}

/// Columns a blocks-absent run can be compared on.
fn comparable(csv: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let keep: Vec<usize> = ["epoch", "split", "top1", "top5", "task_loss", "lr"]
        .iter()
        .map(|k| header.iter().position(|h| h == k).unwrap())
        .collect();
    lines
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            keep.iter().map(|&i| cols[i]).collect::<Vec<_>>().join(",")
        })
        .collect()
}

fn data_pairs(train_n: &str, test_n: &str) -> Vec<(&'static str, String)> {
    match cifar_dir() {
        Some(d) => vec![
            ("data.format", "cifar10".into()),
            ("data.dir", d),
            ("data.train_limit", train_n.into()),
            ("data.test_limit", test_n.into()),
        ],
        None => vec![
            ("data.format", "synthetic".into()),
            ("data.synthetic_train", train_n.into()),
            ("data.synthetic_test", test_n.into()),
        ],
    }
}

fn config_with(data: &[(&'static str, String)], pairs: &[(&str, &str)]) -> Config {
    let mut c = config(pairs);
    for (k, v) in data {
        c.set(k, v).unwrap();
    }
    c
}

#[test]
fn criterion_6_baseline_equivalence() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data_pairs("1000", "200");
    let source = if cifar_dir().is_some() { "CIFAR-10" } else { "synthetic CIFAR-10-format" };
    let start = Instant::now();
    let zero_dir = dir_str(&tmp.path().join("lambda0"));
    let absent_dir = dir_str(&tmp.path().join("absent"));
    let common = [("arch", "resnet-tiny-8"), ("train.epochs", "2"), ("train.seed", "5")];
    let mut zero = common.to_vec();
    zero.extend([("loss.lambda_sb", "0"), ("ssia.enabled", "true"), ("out.dir", zero_dir.as_str())]);
    let mut absent = common.to_vec();
    absent.extend([("ssia.enabled", "false"), ("out.dir", absent_dir.as_str())]);
    let a = run(&config_with(&data, &zero));
    let b = run(&config_with(&data, &absent));
    let secs = start.elapsed().as_secs_f64();
    let ca = comparable(&std::fs::read_to_string(&a.metrics_csv).unwrap());
    let cb = comparable(&std::fs::read_to_string(&b.metrics_csv).unwrap());
    let pass = ca == cb && ca.len() == 4 && secs <= 300.0;
    report(
        6,
        pass,
        &format!("{source} 1000/200 samples, 2 epochs, {} comparable rows identical: {}, both runs {secs:.1}s", ca.len(), ca == cb),
    );
    assert!(pass, "{ca:?}\n{cb:?}");
}

#[test]
fn criterion_7_status() {
    report_status(
        7,
        "SKIP",
        "not run: needs real CIFAR-10 (SSIA_CIFAR10_DIR) and hours of CPU; run the ignored criterion_7_* tests with --ignored",
    );
}

fn directional(train_limit: &str, budget_secs: Option<f64>) {
    let dir = cifar_dir().expect("criterion 7 needs SSIA_CIFAR10_DIR pointing at CIFAR-10 binaries");
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let mut means = [0.0; 2];
    let mut declining = true;
    for (arm, enabled) in ["baseline", "ssia"].iter().zip(["false", "true"]) {
        let mut total = 0.0;
        for seed in 0..3 {
            let out = dir_str(&tmp.path().join(format!("{arm}-{seed}")));
            let seed = seed.to_string();
            let c = config(&[
                ("arch", "resnet-18-like"),
                ("data.format", "cifar10"),
                ("data.dir", &dir),
                ("data.train_limit", train_limit),
                ("train.epochs", "30"),
                ("train.batch_size", "32"),
                ("train.seed", &seed),
                ("ssia.enabled", enabled),
                ("out.dir", &out),
            ]);
            let rep = run(&c);
            let test: Vec<&EpochRow> = rep.rows.iter().filter(|r| r.split == "test").collect();
            total += test.last().unwrap().metrics.top1;
            if enabled == "true" {
                let tr: Vec<&EpochRow> = rep.rows.iter().filter(|r| r.split == "train").collect();
                declining &= tr.last().unwrap().metrics.ssia_total < tr[0].metrics.ssia_total;
            }
        }
        means[(enabled == "true") as usize] = total / 3.0;
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = means[1] >= means[0] && declining && budget_secs.is_none_or(|b| secs <= b);
    report(
        7,
        pass,
        &format!(
            "train_limit {train_limit}: baseline mean top1 {:.2}, ssia mean top1 {:.2}, ssia loss declined in every run: {declining}, {secs:.0}s",
            means[0], means[1]
        ),
    );
    assert!(pass);
}

#[test]
#[ignore = "needs CIFAR-10 and roughly 30 CPU-minutes or more"]
fn criterion_7_directional_5000_subset() {
    directional("5000", Some(1800.0));
}

#[test]
#[ignore = "needs CIFAR-10 and hours of CPU"]
fn criterion_7_directional_full() {
    directional("0", None);
}

fn params_of(path: &Path) -> Vec<(String, Vec<u32>)> {
    let (_, net) = train::load_net(&Checkpoint::load(path).unwrap()).unwrap();
    let mut out = Vec::new();
    net.visit_params(&mut |p| out.push((p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect())));
    net.visit_buffers(&mut |b| out.push((b.name.clone(), b.value.data().iter().map(|v| v.to_bits()).collect())));
    out
}

#[test]
fn criterion_8_determinism_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data_pairs("256", "64");
    let dirs: Vec<String> = ["a", "b", "c"].iter().map(|d| dir_str(&tmp.path().join(d))).collect();
    let common = [("arch", "resnet-tiny-8"), ("train.epochs", "3"), ("train.seed", "9"), ("ssia.hidden", "16")];
    let with_out = |dir: &str, extra: &[(&str, &str)]| {
        let mut p = common.to_vec();
        p.push(("out.dir", dir));
        p.extend_from_slice(extra);
        config_with(&data, &p)
    };
    let a = run(&with_out(&dirs[0], &[]));
    let b = run(&with_out(&dirs[1], &[]));
    let interrupted = run(&with_out(&dirs[2], &[("train.stop_after_epoch", "1")]));
    let resume_from = interrupted.checkpoint.clone().unwrap();
    let resume_from = resume_from.to_str().unwrap();
    let c = run(&with_out(&dirs[2], &[("train.resume", resume_from)]));

    let read = |p: &PathBuf| std::fs::read_to_string(p).unwrap();
    let rerun_same = read(&a.metrics_csv) == read(&b.metrics_csv);
    let final_of = |d: &str| Path::new(d).join("final.ssia");
    let rerun_params = params_of(&final_of(&dirs[0])) == params_of(&final_of(&dirs[1]));
    let resumed_same = read(&a.metrics_csv) == read(&c.metrics_csv);
    let resumed_params = params_of(&final_of(&dirs[0])) == params_of(&final_of(&dirs[2]));
    let pass = interrupted.epochs_done == 1 && rerun_same && rerun_params && resumed_same && resumed_params;
    report(
        8,
        pass,
        &format!(
            "rerun metrics identical {rerun_same}, params {rerun_params}; resume after epoch 1 metrics identical {resumed_same}, params {resumed_params}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_visualization() {
    let raw = viz::cam_map(&[1.0, 2.0, 3.0, 4.0, 4.0, 0.0, 1.0, -2.0], &[0.5, -1.0], 2, 2).unwrap();
    let fixture = viz::min_max_normalize(&raw);
    let want = [0.0, 0.25, 0.125, 1.0];
    let fixture_ok = fixture.iter().zip(want).all(|(a, b)| (a - b).abs() <= 1e-6);

    let c = config(&[("arch", "resnet-tiny-8"), ("ssia.hidden", "16")]);
    let mut net = train::build_net(&c.resolve().unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let image = Tensor::<f32>::randn(&[1, 3, 32, 32], 1.0, &mut rng);
    let cam = viz::cam(&mut net.backbone, &image, 3).unwrap();
    let maps = viz::mpp_heatmaps(&mut net, &image).unwrap();

    let in_range = |v: &[f64]| v.iter().all(|&x| (0.0..=1.0).contains(&x));
    let spans = |v: &[f64]| {
        let max = v.iter().cloned().fold(f64::MIN, f64::max);
        let min = v.iter().cloned().fold(f64::MAX, f64::min);
        (min == 0.0 && max == 1.0) || v.iter().all(|&x| x == 0.0)
    };
    let cam_ok = cam.height == 32 && cam.width == 32 && cam.native == (4, 4) && cam.source == Source::Cam;
    let natives: Vec<_> = maps.iter().map(|m| m.native).collect();
    let mpp_ok = maps.len() == 3
        && natives == vec![(16, 16), (8, 8), (4, 4)]
        && maps.iter().all(|m| m.height == 32 && m.width == 32);
    let all = std::iter::once(&cam).chain(&maps);
    let norm_ok = all.clone().all(|m| in_range(&m.values) && spans(&m.values));

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("test/0_cam.ppm");
    viz::write_image(&cam, &path).unwrap();
    let (w, h, back) = viz::read_image(&path).unwrap();
    let file_ok = (w, h) == (32, 32) && back.iter().zip(&cam.values).all(|(&b, &v)| b == viz::quantize(v));

    let pass = fixture_ok && cam_ok && mpp_ok && norm_ok && file_ok;
    report(
        9,
        pass,
        &format!(
            "CAM fixture {fixture:?}, CAM 32x32 from 4x4: {cam_ok}, MPP natives {natives:?} at 32x32: {mpp_ok}, [0,1] normalized: {norm_ok}, PPM round trip: {file_ok}"
        ),
    );
    assert!(pass);
}
