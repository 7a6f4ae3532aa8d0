//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails. Tolerances and time limits are pinned below.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use viewfuse::frameio::{
    read_depth_png, read_probmap, write_depth_png, write_probmap, Frame, LabelMap, ProbMap,
};
use viewfuse::geometry::{Intrinsics, Mat3, RigidTransform, Vec3};
use viewfuse::gradchecks::{check_term, Term, GRADCHECK_PROBES};
use viewfuse::losses::{consistency_loss, median_freq_weights, weighted_cross_entropy, ClassWeights};
use viewfuse::masks::ValidityMask;
use viewfuse::metrics::{depth_rms, segmentation_metrics, ConfusionMatrix};
use viewfuse::raster::Field;
use viewfuse::synth::{make_domain_shift_benchmark, random_pair_spec, render};
use viewfuse::toytrain::{read_model, train_s4, train_supervised, write_model, S4Trainer, ToyModel, TrainConfig};
use viewfuse::warp::{correspondences, forward_splat_oracle, inverse_warp, WarpConfig};

const ORACLE_PAIRS: u64 = 10;
const ORACLE_WIDTH: usize = 320;
const ORACLE_HEIGHT: usize = 240;
const ORACLE_MIN_AGREEMENT: f64 = 0.99;
const ORACLE_TIME_LIMIT: Duration = Duration::from_secs(10);

const DISPARITY_TOL: f64 = 1e-4;

const GRADCHECK_TIME_LIMIT: Duration = Duration::from_secs(30);

const UNIT_TOL: f64 = 1e-4;

const BENCH_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const BENCH_MIN_WINS: usize = 5;
const BENCH_MIN_MEAN_GAIN: f64 = 0.02;
const BENCH_TIME_LIMIT: Duration = Duration::from_secs(300);

const BIN: &str = env!("CARGO_BIN_EXE_viewfuse");

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("warp-oracle", warp_oracle),
        ("identity-and-disparity", identity_and_disparity),
        ("gradient-checks", gradient_checks),
        ("loss-unit-values", loss_unit_values),
        ("domain-shift-benchmark", domain_shift_benchmark),
        ("teacher-constant", teacher_constant),
        ("cli-determinism", cli_determinism),
        ("format-round-trips", format_round_trips),
    ];
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.passed {
            failed += 1;
        }
        println!(
            "{} {} {:<24} {} [{:.1}s]",
            if o.passed { "PASS" } else { "FAIL" },
            n + 1,
            name,
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn warp_oracle() -> Outcome {
    let start = Instant::now();
    let (mut agree, mut joint, mut worst) = (0usize, 0usize, 1.0f64);
    let (mut z_agree, mut z_joint) = (0usize, 0usize);
    for seed in 0..ORACLE_PAIRS {
        let seq = render::<f64>(&random_pair_spec(seed, ORACLE_WIDTH, ORACLE_HEIGHT, 2)).unwrap();
        let (target, source) = (&seq.frames[0], &seq.frames[1]);
        let labels = source.labels.as_ref().unwrap();
        let probs = ProbMap::one_hot(labels, seq.num_classes).unwrap();
        let (res, mask) = inverse_warp(source, &probs, target, &WarpConfig::default()).unwrap();
        let splat = forward_splat_oracle(source, labels, target).unwrap();
        let warped = res.warped.argmax_labels();
        let (mut a, mut j) = (0, 0);
        for i in 0..mask.reasons().len() {
            if mask.is_valid(i) && splat.coverage[i] {
                j += 1;
                let same = usize::from(warped.as_slice()[i] == splat.labels.as_slice()[i]);
                a += same;
                if (splat.depth[i] - target.depth_at(i)).abs() <= WarpConfig::<f64>::default().occl_threshold {
                    z_agree += same;
                    z_joint += 1;
                }
            }
        }
        worst = worst.min(a as f64 / j.max(1) as f64);
        agree += a;
        joint += j;
    }
    let elapsed = start.elapsed();
    let rate = agree as f64 / joint.max(1) as f64;
    outcome(
        rate >= ORACLE_MIN_AGREEMENT && joint > 0 && elapsed < ORACLE_TIME_LIMIT,
        format!(
            "agreement {rate:.4} (min pair {worst:.4}) over {joint} jointly valid pixels, need >= {ORACLE_MIN_AGREEMENT}; {:.4} where the splat depth also matches; {:.2}s < {}s",
            z_agree as f64 / z_joint.max(1) as f64,
            elapsed.as_secs_f64(),
            ORACLE_TIME_LIMIT.as_secs()
        ),
    )
}

fn wall_frame(index: usize, tx: f64, w: usize, h: usize) -> Frame<f64> {
    Frame {
        index,
        color: Field::zeros(h, w, 3),
        depth: Field::filled(h, w, 1, 2.0),
        pose: RigidTransform::new(Mat3::identity(), Vec3::new(tx, 0.0, 0.0)).unwrap(),
        intrinsics: Intrinsics::new(100.0, 100.0, (w / 2) as f64, (h / 2) as f64, w, h).unwrap(),
        labels: None,
    }
}

fn identity_and_disparity() -> Outcome {
    // Identity on a rendered view with depth dropout and soft probabilities.
    let mut spec = random_pair_spec(7, 96, 72, 1);
    spec.noise.depth_dropout = 0.05;
    let seq = render::<f64>(&spec).unwrap();
    let f = &seq.frames[0];
    let c = seq.num_classes;
    let values = Field::from_fn(f.height(), f.width(), c, |r, col, ch| 1.0 + ((r * 7 + col * 3 + ch * 11) % 17) as f64);
    let mut soft = values.clone();
    for i in 0..f.height() * f.width() {
        let s: f64 = values.at(i).iter().sum();
        for v in soft.at_mut(i) {
            *v /= s;
        }
    }
    let probs = ProbMap::new(soft, vec![true; f.height() * f.width()]).unwrap();
    let (res, mask) = inverse_warp(f, &probs, f, &WarpConfig::default()).unwrap();
    let mut depth_valid = 0;
    let mut mismatched = 0;
    for i in 0..f.height() * f.width() {
        if f.depth_at(i) > 0.0 {
            depth_valid += 1;
            let same = mask.is_valid(i)
                && res.warped.at(i).iter().zip(probs.at(i)).all(|(a, b)| a.to_bits() == b.to_bits());
            mismatched += usize::from(!same);
        }
    }

    // Fronto-parallel wall at 2 m, source camera 0.1 m to the right, fx = 100.
    let target = wall_frame(0, 0.0, 100, 20);
    let source = wall_frame(1, 0.1, 100, 20);
    let corr = correspondences(&source, &target, &WarpConfig::default()).unwrap();
    let mut worst = 0.0f64;
    let mut valid = 0;
    for r in 0..20 {
        for col in 0..100 {
            let i = r * 100 + col;
            if corr.mask.is_valid(i) {
                let p = corr.coords[i].unwrap();
                worst = worst.max((p.x - (col as f64 - 5.0)).abs()).max((p.y - r as f64).abs());
                valid += 1;
            }
        }
    }
    outcome(
        mismatched == 0 && depth_valid > 0 && worst <= DISPARITY_TOL && valid > 0,
        format!(
            "identity: {mismatched} of {depth_valid} depth-valid pixels differ; wall shift error {worst:.2e} px over {valid} pixels, need <= {DISPARITY_TOL:e}"
        ),
    )
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for t in Term::ALL {
        let r = check_term(t, 0, GRADCHECK_PROBES);
        ok &= r.passed() && r.probes == GRADCHECK_PROBES;
        parts.push(format!("{} {:.1e}/{:.0e}", t.name(), r.max_rel_err, r.tolerance));
    }
    let elapsed = start.elapsed();
    outcome(
        ok && elapsed < GRADCHECK_TIME_LIMIT,
        format!(
            "{} probes each: {}; {:.2}s < {}s",
            GRADCHECK_PROBES,
            parts.join(", "),
            elapsed.as_secs_f64(),
            GRADCHECK_TIME_LIMIT.as_secs()
        ),
    )
}

fn loss_unit_values() -> Outcome {
    let two_logits = Field::from_vec(1, 1, 2, vec![0.0f64, 0.0]).unwrap();
    let label0 = LabelMap::new(1, 1, vec![0]).unwrap();
    let wce = weighted_cross_entropy(&two_logits, &label0, &ClassWeights { weights: vec![2.0, 1.0] })
        .unwrap()
        .loss;
    let cons = consistency_loss(&two_logits, &label0, &ValidityMask::all_valid(1, 1)).unwrap().loss;
    let mf: ClassWeights<f64> = median_freq_weights([&LabelMap::new(1, 4, vec![0, 0, 0, 1]).unwrap()], 2).unwrap();
    let m = segmentation_metrics(&ConfusionMatrix::from_rows(&[vec![3, 1], vec![1, 3]])).unwrap();
    let d = |v: Vec<f64>| Field::from_vec(1, 2, 1, v).unwrap();
    let rms = depth_rms(&d(vec![1.0, 2.0]), &d(vec![1.0, 4.0])).unwrap();
    let checks = [
        ("wce", wce, 1.3863),
        ("cons", cons, 0.6931),
        ("mfw0", mf.weights[0], 0.6667),
        ("mfw1", mf.weights[1], 2.0),
        ("pix_acc", m.pix_acc, 0.75),
        ("mean_acc", m.mean_acc, 0.75),
        ("miou", m.miou, 0.6),
        ("fwiou", m.fwiou, 0.6),
        ("rms", rms, 1.4142),
    ];
    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > UNIT_TOL)
        .map(|(n, got, want)| format!("{n}={got:.6} (want {want})"))
        .collect();
    let worst = checks.iter().map(|(_, g, w)| (g - w).abs()).fold(0.0, f64::max);
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} values, max deviation {worst:.1e} <= {UNIT_TOL:e}", checks.len())
        } else {
            format!("mismatch: {}", bad.join(", "))
        },
    )
}

fn cli(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(BIN).current_dir(dir).args(args).output().expect("spawn cli");
    assert!(
        out.status.success(),
        "viewfuse {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn parse_miou(stdout: &str) -> f64 {
    stdout
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("miou="))
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("no miou in {stdout:?}"))
}

fn domain_shift_benchmark() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut gains = Vec::new();
    for seed in BENCH_SEEDS {
        let s = seed.to_string();
        let bench = format!("bench{seed}");
        cli(dir, &["-q", "--seed", &s, "synth", "--benchmark", "domain-shift", "--out", &bench]);
        let mut miou = [0.0; 2];
        for (slot, lambda) in ["0", "1"].iter().enumerate() {
            let model = format!("model{seed}_{lambda}.bin");
            let pred = format!("pred{seed}_{lambda}");
            cli(dir, &[
                "-q", "--seed", &s, "train-toy",
                "--labeled", &format!("{bench}/source"),
                "--target", &format!("{bench}/target"),
                "--lambda", lambda, "--out-model", &model,
            ]);
            cli(dir, &["-q", "predict", "--scene", &format!("{bench}/eval"), "--model", &model, "--out", &pred]);
            miou[slot] = parse_miou(&cli(dir, &["-q", "eval", "--gt", &format!("{bench}/eval"), "--pred", &pred]));
        }
        gains.push((miou[0], miou[1]));
    }
    let elapsed = start.elapsed();
    let wins = gains.iter().filter(|(a, b)| b > a).count();
    let mean = gains.iter().map(|(a, b)| b - a).sum::<f64>() / gains.len() as f64;
    let per_seed: Vec<String> = gains.iter().map(|(a, b)| format!("{a:.3}->{b:.3}")).collect();
    outcome(
        wins >= BENCH_MIN_WINS && mean >= BENCH_MIN_MEAN_GAIN && elapsed < BENCH_TIME_LIMIT,
        format!(
            "eval mIoU lambda 0->1: [{}]; wins {wins}/{}, need {BENCH_MIN_WINS}; mean gain {mean:+.4}, need >= {BENCH_MIN_MEAN_GAIN}; {:.1}s < {}s",
            per_seed.join(", "),
            gains.len(),
            elapsed.as_secs_f64(),
            BENCH_TIME_LIMIT.as_secs()
        ),
    )
}

fn teacher_constant() -> Outcome {
    let b = make_domain_shift_benchmark::<f64>(11).unwrap();
    let cfg = TrainConfig {
        iterations: 60,
        warmup: 20,
        snapshot_period: 10,
        ..TrainConfig::default()
    };
    let mut trainer = S4Trainer::new(&b.source, &b.target, &cfg).unwrap();
    for _ in 0..25 {
        trainer.step().unwrap();
    }
    let it = trainer.model().iteration;
    let (before, _) = trainer.update(it).unwrap();
    let fused_before: Vec<LabelMap> = trainer.fused().unwrap().iter().map(|f| f.labels.clone()).collect();
    for (k, w) in trainer.model_mut().snapshot_weights.iter_mut().enumerate() {
        *w += if k % 2 == 0 { 3.0 } else { -5.0 };
    }
    let (after, _) = trainer.update(it).unwrap();
    let labels_unchanged = trainer.fused().unwrap().iter().zip(&fused_before).all(|(f, l)| &f.labels == l);
    let update_diff = before.iter().zip(&after).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    let consistency_used = fused_before.iter().any(|l| l.as_slice().iter().any(|&v| v != viewfuse::frameio::IGNORE));

    let zero = TrainConfig {
        lambda: 0.0,
        iterations: 200,
        ..TrainConfig::default()
    };
    let (m0, log0) = train_s4(&b.source, &b.target, &zero).unwrap();
    let (ms, logs) = train_supervised(&b.source, &zero).unwrap();
    let weights_equal = m0.weights.iter().zip(&ms.weights).all(|(a, b)| a.to_bits() == b.to_bits());
    let logs_equal = log0.len() == logs.len() && log0.iter().zip(&logs).all(|(a, b)| a.total.to_bits() == b.total.to_bits());
    outcome(
        update_diff == 0 && labels_unchanged && consistency_used && weights_equal && logs_equal,
        format!(
            "perturbed snapshot: {update_diff} of {} gradient entries changed; lambda=0 vs supervised: weights {}, loss log {}",
            before.len(),
            if weights_equal { "bit-identical" } else { "differ" },
            if logs_equal { "bit-identical" } else { "differ" }
        ),
    )
}

/// All files under `root`, keyed by relative path. Manifest lines that record
/// run time or the thread count are dropped.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
                continue;
            }
            let mut bytes = std::fs::read(&p).unwrap();
            if p.to_string_lossy().ends_with("manifest.txt") {
                let text = String::from_utf8(bytes).unwrap();
                bytes = text
                    .lines()
                    .filter(|l| !l.starts_with("duration_s=") && !l.starts_with("threads="))
                    .collect::<Vec<_>>()
                    .join("\n")
                    .into_bytes();
            }
            out.insert(p.strip_prefix(root).unwrap().to_path_buf(), bytes);
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn run_all_subcommands(dir: &Path, threads: &str) {
    let mut spec = random_pair_spec(3, 64, 48, 4);
    spec.noise.color_sigma = 0.02;
    spec.noise.depth_dropout = 0.02;
    std::fs::write(dir.join("spec.json"), spec.to_json()).unwrap();
    let t = ["--threads", threads, "-q"];
    let run = |args: &[&str]| {
        let all: Vec<&str> = t.iter().copied().chain(args.iter().copied()).collect();
        cli(dir, &all)
    };
    let mut stdout = String::new();
    run(&["synth", "--spec", "spec.json", "--out", "scene"]);
    run(&["--seed", "5", "synth", "--benchmark", "domain-shift", "--out", "bench"]);
    run(&[
        "--seed", "5", "train-toy", "--labeled", "bench/source", "--target", "bench/target",
        "--iters", "120", "--warmup", "40", "--snapshot-period", "20",
        "--out-model", "model.bin", "--log", "log.csv",
    ]);
    run(&["predict", "--scene", "bench/target", "--model", "model.bin", "--out", "pred"]);
    run(&["fuse", "--scene", "bench/target", "--probs-dir", "pred/probs", "--out-labels", "fused", "--out-probs", "fused_probs"]);
    run(&["pseudolabel", "--scene", "bench/target", "--model", "model.bin", "--out", "pseudo"]);
    run(&["warp", "--scene", "scene", "--source", "1", "--target", "0", "--out", "warp"]);
    stdout += &run(&["eval", "--gt", "bench/target_gt", "--pred", "pseudo", "--csv", "eval.csv"]);
    stdout += &run(&["depth-eval", "--gt", "scene", "--pred", "scene"]);
    stdout += &run(&["--seed", "2", "gradcheck", "--term", "all", "--probes", "40"]);
    std::fs::write(dir.join("stdout.txt"), stdout).unwrap();
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let runs = [("a", "1"), ("b", "8"), ("c", "8")];
    let mut snaps = Vec::new();
    for (name, threads) in runs {
        let d = tmp.path().join(name);
        std::fs::create_dir(&d).unwrap();
        run_all_subcommands(&d, threads);
        snaps.push(snapshot(&d));
    }
    let base = &snaps[0];
    let mut diffs = Vec::new();
    for (s, (name, _)) in snaps.iter().zip(runs).skip(1) {
        let keys: std::collections::BTreeSet<_> = base.keys().chain(s.keys()).collect();
        for k in keys {
            if base.get(k) != s.get(k) {
                diffs.push(format!("{name}:{}", k.display()));
            }
        }
    }
    outcome(
        diffs.is_empty() && base.len() > 100,
        if diffs.is_empty() {
            format!("9 subcommands, {} files identical across --threads 1, 8, 8", base.len())
        } else {
            format!("{} differing files, e.g. {}", diffs.len(), diffs[..diffs.len().min(5)].join(", "))
        },
    )
}

fn format_round_trips() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (h, w, c) = (7, 9, 5);
    let mut values = Field::<f32>::zeros(h, w, c);
    let mut valid = vec![true; h * w];
    for i in 0..h * w {
        let raw: Vec<f32> = (0..c).map(|k| 1.0 + ((i * 31 + k * 17) % 23) as f32 / 7.0).collect();
        let s: f32 = raw.iter().sum();
        for (v, r) in values.at_mut(i).iter_mut().zip(&raw) {
            *v = r / s;
        }
    }
    valid[4] = false;
    for v in values.at_mut(4) {
        *v = 0.0;
    }
    let p = ProbMap::new(values, valid).unwrap();
    let pmap_path = tmp.path().join("x.pmap");
    write_probmap(&p, &pmap_path).unwrap();
    let q = read_probmap(&pmap_path).unwrap();
    let bits = |m: &ProbMap<f32>| m.values().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let pmap_ok = bits(&p) == bits(&q) && p.valid() == q.valid();

    let model = ToyModel::<f32>::seeded(4, viewfuse::toytrain::NUM_FEATURES, 9);
    let model_path = tmp.path().join("m.bin");
    write_model(&model_path, &model).unwrap();
    let back: ToyModel<f32> = read_model(&model_path).unwrap();
    let model_ok = back.num_classes == 4
        && back.weights.iter().zip(&model.weights).all(|(a, b)| a.to_bits() == b.to_bits());

    let depth_path = tmp.path().join("d.png");
    write_depth_png(&Field::filled(2, 3, 1, 2.5f64), &depth_path).unwrap();
    let stored = image::open(&depth_path).unwrap().into_luma16();
    let raw_ok = stored.pixels().all(|px| px.0[0] == 2500);
    let meters: Field<f64> = read_depth_png(&depth_path).unwrap();
    let meters_ok = meters.as_slice().iter().all(|&d| d == 2.5);
    outcome(
        pmap_ok && model_ok && raw_ok && meters_ok,
        format!(
            "pmap {}, model {}, depth png stores {} and reads {} m",
            if pmap_ok { "bit-exact" } else { "differs" },
            if model_ok { "bit-exact" } else { "differs" },
            stored.pixels().next().unwrap().0[0],
            meters.as_slice()[0]
        ),
    )
}
