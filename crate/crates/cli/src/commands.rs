use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use rayon::prelude::*;

use viewfuse::frameio::{
    frame_file_name, list_frame_indices, load_scene_with, read_depth_png, read_label_png, read_probmap, write_label_png,
    write_mask_png, write_probmap, write_scene, LabelMap, LoadOptions, ProbMap, SceneSequence, DEFAULT_NUM_CLASSES,
    IGNORE,
};
use viewfuse::fusion::{FusionConfig, FusionPlan, Fused};
use viewfuse::gradchecks::{check_term, Term};
use viewfuse::masks::{Reason, ValidityMask};
use viewfuse::metrics::{class_iou, depth_rms, segmentation_metrics, ConfusionMatrix};
use viewfuse::synth::{domain_shift_specs, make_domain_shift_benchmark, render, SceneSpec};
use viewfuse::toytrain::{read_model, train_s4, write_loss_log, write_model, ToyModel, TrainConfig};
use viewfuse::warp::{inverse_warp, WarpConfig};

use crate::manifest::{sidecar, Manifest, Outputs, MANIFEST_NAME};
use crate::{
    BenchmarkKind, Cli, Command, DepthEvalArgs, EvalArgs, FuseArgs, FusionArgs, GradcheckArgs, PredictArgs,
    PseudolabelArgs, SynthArgs, TermArg, TrainToyArgs, VerificationFailure, WarpArgs,
};

type R = f64;

pub fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let manifest = |name: &str| Manifest::new(name, seed, cli.threads);
    match &cli.command {
        Command::Synth(a) => synth(cli, a, manifest("synth")),
        Command::Warp(a) => warp(cli, a, manifest("warp")),
        Command::Fuse(a) => fuse(cli, a, manifest("fuse")),
        Command::Pseudolabel(a) => pseudolabel(cli, a, manifest("pseudolabel")),
        Command::Predict(a) => predict(cli, a, manifest("predict")),
        Command::TrainToy(a) => train_toy(cli, seed, a, manifest("train-toy")),
        Command::Eval(a) => eval(cli, a, manifest("eval")),
        Command::DepthEval(a) => depth_eval(a),
        Command::Gradcheck(a) => gradcheck(seed, a),
    }
}

fn load(dir: &Path, flag: &str, skip_labels: bool) -> Result<SceneSequence<R>> {
    let seq = load_scene_with(
        dir,
        &LoadOptions {
            skip_labels,
            ..Default::default()
        },
    )
    .with_context(|| format!("{flag} {}", dir.display()))?;
    if seq.is_empty() {
        bail!("{flag} {}: no frames", dir.display());
    }
    Ok(seq)
}

fn fusion_config(a: &FusionArgs) -> Result<FusionConfig<R>> {
    let cfg = FusionConfig {
        stride: a.stride,
        min_covis: a.min_covis,
        max_neighbors: a.max_neighbors,
        include_self: !a.no_self,
        warp: WarpConfig {
            occl_threshold: a.occl_threshold,
        },
        boundary_radius: a.boundary_radius,
    };
    cfg.validate().map_err(|e| anyhow!("--stride/--min-covis/--occl-threshold: {e}"))?;
    Ok(cfg)
}

fn record_fusion(m: &mut Manifest, c: &FusionConfig<R>) {
    m.set("config.stride", c.stride);
    m.set("config.min_covis", c.min_covis);
    m.set("config.max_neighbors", c.max_neighbors);
    m.set("config.include_self", c.include_self);
    m.set("config.occl_threshold", c.warp.occl_threshold);
    m.set(
        "config.boundary_radius",
        c.boundary_radius.map_or_else(|| "auto".to_string(), |r| r.to_string()),
    );
}

fn synth(cli: &Cli, a: &SynthArgs, mut m: Manifest) -> Result<()> {
    let outs = Outputs {
        force: cli.force,
        inputs: a.spec.iter().map(PathBuf::as_path).collect(),
    };
    outs.dir(&a.out, "--out")?;
    m.path("outputs.dir", &a.out);
    if let Some(BenchmarkKind::DomainShift) = a.benchmark {
        let seed = cli.seed.unwrap_or(0);
        m.set("config.benchmark", "domain-shift");
        let b = make_domain_shift_benchmark::<R>(seed)?;
        write_scene(&b.source, a.out.join("source"))?;
        write_scene(&b.target, a.out.join("target"))?;
        write_scene(&b.eval, a.out.join("eval"))?;
        let gt = a.out.join("target_gt");
        std::fs::create_dir_all(&gt)?;
        std::fs::write(gt.join("classes.txt"), format!("{}\n", b.target.num_classes))?;
        for (f, l) in b.target.frames.iter().zip(&b.target_labels) {
            write_label_png(l, gt.join(frame_file_name(f.index, "png")))?;
        }
        let specs = a.out.join("specs");
        std::fs::create_dir_all(&specs)?;
        for (name, spec) in ["source", "target", "eval"].iter().zip(domain_shift_specs(seed)) {
            std::fs::write(specs.join(format!("{name}.json")), spec.to_json())?;
        }
        info!(
            "benchmark: {} source, {} target, {} eval frames",
            b.source.len(),
            b.target.len(),
            b.eval.len()
        );
    } else {
        let path = a.spec.as_ref().expect("clap enforces --spec or --benchmark");
        m.path("inputs.spec", path);
        let text = std::fs::read_to_string(path).with_context(|| format!("--spec {}", path.display()))?;
        let mut spec = SceneSpec::from_json(&text).with_context(|| format!("--spec {}", path.display()))?;
        if let Some(s) = cli.seed {
            spec.seed = s;
        }
        m.set("config.spec_seed", spec.seed);
        let seq = render::<R>(&spec)?;
        write_scene(&seq, &a.out)?;
        info!("rendered {} frames to {}", seq.len(), a.out.display());
    }
    m.write(&a.out.join(MANIFEST_NAME))
}

fn warp(cli: &Cli, a: &WarpArgs, mut m: Manifest) -> Result<()> {
    let mut inputs = vec![a.scene.as_path()];
    inputs.extend(a.target_scene.as_deref());
    inputs.extend(a.probs.as_deref());
    let outs = Outputs { force: cli.force, inputs };
    let src_seq = load(&a.scene, "--scene", false)?;
    let tgt_seq = match &a.target_scene {
        Some(dir) => load(dir, "--target-scene", false)?,
        None => src_seq.clone(),
    };
    let find = |seq: &SceneSequence<R>, idx: usize, flag: &str| {
        seq.position_of(idx)
            .map(|p| seq.frames[p].clone())
            .ok_or_else(|| anyhow!("{flag} {idx}: no such frame"))
    };
    let source = find(&src_seq, a.source, "--source")?;
    let target = find(&tgt_seq, a.target, "--target")?;
    let probs: ProbMap<R> = match &a.probs {
        Some(p) => read_probmap(p).with_context(|| format!("--probs {}", p.display()))?.cast(),
        None => {
            let labels = source
                .labels
                .as_ref()
                .ok_or_else(|| anyhow!("--probs not given and frame {} has no labels", source.index))?;
            ProbMap::one_hot(labels, src_seq.num_classes)?
        }
    };
    let cfg = WarpConfig {
        occl_threshold: a.occl_threshold,
    };
    let (res, mask) = inverse_warp(&source, &probs, &target, &cfg)?;
    outs.dir(&a.out, "--out")?;
    write_probmap(&res.warped, a.out.join("warped.pmap"))?;
    write_label_png(&masked_argmax(&res.warped, &mask), a.out.join("labels.png"))?;
    write_mask_png(&mask, a.out.join("mask.png"))?;
    info!(
        "frame {} -> {}: {} of {} pixels valid",
        a.source,
        a.target,
        mask.count_valid(),
        mask.reasons().len()
    );
    m.path("inputs.scene", &a.scene);
    m.set("inputs.source", a.source);
    m.set("inputs.target", a.target);
    m.set("config.occl_threshold", a.occl_threshold);
    m.path("outputs.dir", &a.out);
    m.write(&a.out.join(MANIFEST_NAME))
}

fn masked_argmax(p: &ProbMap<R>, mask: &ValidityMask) -> LabelMap {
    let mut labels = p.argmax_labels();
    for (i, l) in labels.as_mut_slice().iter_mut().enumerate() {
        if !mask.is_valid(i) {
            *l = IGNORE;
        }
    }
    labels
}

fn read_probs_dir(seq: &SceneSequence<R>, dir: &Path) -> Result<Vec<ProbMap<R>>> {
    if !dir.is_dir() {
        bail!("--probs-dir {}: not a directory", dir.display());
    }
    seq.frames
        .par_iter()
        .map(|f| {
            let path = dir.join(frame_file_name(f.index, "pmap"));
            let p = read_probmap(&path).with_context(|| format!("--probs-dir: frame {}", f.index))?;
            if p.plane() != f.plane() || p.channels() != seq.num_classes {
                bail!(
                    "--probs-dir: frame {} is {}x{}x{}, scene is {}x{} with {} classes",
                    f.index,
                    p.height(),
                    p.width(),
                    p.channels(),
                    f.height(),
                    f.width(),
                    seq.num_classes
                );
            }
            Ok(p.cast())
        })
        .collect()
}

fn model_probs(seq: &SceneSequence<R>, path: &Path) -> Result<Vec<ProbMap<R>>> {
    let model = load_model(path)?;
    if model.num_classes != seq.num_classes {
        bail!(
            "--model {} has {} classes, scene has {}",
            path.display(),
            model.num_classes,
            seq.num_classes
        );
    }
    seq.frames
        .par_iter()
        .map(|f| Ok(model.predict(f)?))
        .collect()
}

fn load_model(path: &Path) -> Result<ToyModel<R>> {
    let model: ToyModel<R> = read_model(path).with_context(|| format!("--model {}", path.display()))?;
    if model.num_features != viewfuse::toytrain::NUM_FEATURES {
        bail!("--model {}: {} features, expected {}", path.display(), model.num_features, viewfuse::toytrain::NUM_FEATURES);
    }
    Ok(model)
}

fn write_fused(seq: &SceneSequence<R>, fused: &[Fused<R>], labels: &Path, probs: Option<&Path>, masks: Option<&Path>) -> Result<()> {
    for d in std::iter::once(labels).chain(probs).chain(masks) {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    seq.frames.par_iter().zip(fused).try_for_each(|(f, fz)| -> Result<()> {
        write_label_png(&fz.labels, labels.join(frame_file_name(f.index, "png")))?;
        if let Some(p) = probs {
            write_probmap(&fz.probs, p.join(frame_file_name(f.index, "pmap")))?;
        }
        if let Some(mk) = masks {
            write_mask_png(&fz.mask, mk.join(frame_file_name(f.index, "png")))?;
        }
        Ok(())
    })
}

fn log_fusion(plan: &FusionPlan<R>, fused: &[Fused<R>]) {
    let neighbors: usize = plan.targets.iter().map(|t| t.neighbors.neighbors.len()).sum();
    let ignored: usize = fused.iter().map(|f| f.mask.count(Reason::Valid)).sum();
    let total: usize = fused.iter().map(|f| f.labels.as_slice().len()).sum();
    info!(
        "fused {} frames, {:.2} neighbors per frame, {:.1}% pixels labeled",
        fused.len(),
        neighbors as f64 / plan.targets.len().max(1) as f64,
        100.0 * ignored as f64 / total.max(1) as f64
    );
}

fn fuse(cli: &Cli, a: &FuseArgs, mut m: Manifest) -> Result<()> {
    let mut inputs = vec![a.scene.as_path(), a.probs_dir.as_path()];
    inputs.extend([a.scene.as_path()]);
    let outs = Outputs { force: cli.force, inputs };
    let cfg = fusion_config(&a.fusion)?;
    let seq = load(&a.scene, "--scene", true)?;
    let probs = read_probs_dir(&seq, &a.probs_dir)?;
    let plan = FusionPlan::build(&seq, &cfg)?;
    let fused = plan.fuse(&seq, &probs)?;
    log_fusion(&plan, &fused);
    outs.dir(&a.out_labels, "--out-labels")?;
    if let Some(p) = &a.out_probs {
        if p == &a.out_labels {
            bail!("--out-probs must differ from --out-labels");
        }
        outs.dir(p, "--out-probs")?;
    }
    write_fused(&seq, &fused, &a.out_labels, a.out_probs.as_deref(), None)?;
    m.path("inputs.scene", &a.scene);
    m.path("inputs.probs_dir", &a.probs_dir);
    record_fusion(&mut m, &cfg);
    m.path("outputs.labels", &a.out_labels);
    if let Some(p) = &a.out_probs {
        m.path("outputs.probs", p);
    }
    m.write(&a.out_labels.join(MANIFEST_NAME))
}

fn pseudolabel(cli: &Cli, a: &PseudolabelArgs, mut m: Manifest) -> Result<()> {
    let mut inputs = vec![a.scene.as_path()];
    inputs.extend(a.probs_dir.as_deref());
    inputs.extend(a.model.as_deref());
    let outs = Outputs { force: cli.force, inputs };
    let cfg = fusion_config(&a.fusion)?;
    let seq = load(&a.scene, "--scene", true)?;
    let probs = match (&a.probs_dir, &a.model) {
        (Some(d), _) => {
            m.path("inputs.probs_dir", d);
            read_probs_dir(&seq, d)?
        }
        (None, Some(p)) => {
            m.path("inputs.model", p);
            model_probs(&seq, p)?
        }
        (None, None) => unreachable!("clap enforces --probs-dir or --model"),
    };
    let plan = FusionPlan::build(&seq, &cfg)?;
    let fused = plan.fuse(&seq, &probs)?;
    log_fusion(&plan, &fused);
    outs.dir(&a.out, "--out")?;
    write_fused(
        &seq,
        &fused,
        &a.out.join("label"),
        Some(&a.out.join("probs")),
        Some(&a.out.join("mask")),
    )?;
    std::fs::write(a.out.join("classes.txt"), format!("{}\n", seq.num_classes))?;
    m.path("inputs.scene", &a.scene);
    record_fusion(&mut m, &cfg);
    m.path("outputs.dir", &a.out);
    m.write(&a.out.join(MANIFEST_NAME))
}

fn predict(cli: &Cli, a: &PredictArgs, mut m: Manifest) -> Result<()> {
    let outs = Outputs {
        force: cli.force,
        inputs: vec![a.scene.as_path(), a.model.as_path()],
    };
    let seq = load(&a.scene, "--scene", true)?;
    let probs = model_probs(&seq, &a.model)?;
    outs.dir(&a.out, "--out")?;
    let (pd, ld) = (a.out.join("probs"), a.out.join("label"));
    std::fs::create_dir_all(&pd)?;
    std::fs::create_dir_all(&ld)?;
    std::fs::write(a.out.join("classes.txt"), format!("{}\n", seq.num_classes))?;
    seq.frames.par_iter().zip(&probs).try_for_each(|(f, p)| -> Result<()> {
        write_probmap(p, pd.join(frame_file_name(f.index, "pmap")))?;
        write_label_png(&p.argmax_labels(), ld.join(frame_file_name(f.index, "png")))?;
        Ok(())
    })?;
    info!("predicted {} frames", seq.len());
    m.path("inputs.scene", &a.scene);
    m.path("inputs.model", &a.model);
    m.path("outputs.dir", &a.out);
    m.write(&a.out.join(MANIFEST_NAME))
}

fn train_toy(cli: &Cli, seed: u64, a: &TrainToyArgs, mut m: Manifest) -> Result<()> {
    let mut inputs = vec![a.labeled.as_path(), a.target.as_path()];
    inputs.dedup();
    let outs = Outputs { force: cli.force, inputs };
    outs.file(&a.out_model, "--out-model")?;
    if let Some(log) = &a.log {
        if log == &a.out_model {
            bail!("--log must differ from --out-model");
        }
        outs.file(log, "--log")?;
    }
    let cfg = TrainConfig {
        lambda: a.lambda,
        snapshot_period: a.snapshot_period,
        learning_rate: a.lr,
        iterations: a.iters,
        seed,
        warmup: a.warmup,
        mirror: !a.no_mirror,
        fusion: fusion_config(&a.fusion)?,
    };
    cfg.validate().map_err(|e| anyhow!("--lambda/--lr/--snapshot-period: {e}"))?;
    let labeled = load(&a.labeled, "--labeled", false)?;
    let target = load(&a.target, "--target", true)?;
    let (model, log) = train_s4(&labeled, &target, &cfg)?;
    if let Some(last) = log.last() {
        info!("trained {} iterations, final L_S {:.4} L_G {:.4}", log.len(), last.l_s, last.l_g);
    }
    write_model(&a.out_model, &model)?;
    if let Some(path) = &a.log {
        write_loss_log(path, &log)?;
        m.path("outputs.log", path);
    }
    m.path("inputs.labeled", &a.labeled);
    m.path("inputs.target", &a.target);
    m.set("config.lambda", a.lambda);
    m.set("config.iterations", a.iters);
    m.set("config.learning_rate", a.lr);
    m.set("config.snapshot_period", a.snapshot_period);
    m.set("config.warmup", a.warmup);
    m.set("config.mirror", !a.no_mirror);
    record_fusion(&mut m, &cfg.fusion);
    m.path("outputs.model", &a.out_model);
    m.write(&sidecar(&a.out_model))
}

/// `dir/<sub>` when it exists, else `dir`.
fn resolve(dir: &Path, sub: &str) -> PathBuf {
    let nested = dir.join(sub);
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn read_classes(dir: &Path) -> Result<Option<usize>> {
    let path = dir.join("classes.txt");
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    let n = text
        .trim()
        .parse::<usize>()
        .with_context(|| format!("{}: not a class count", path.display()))?;
    Ok(Some(n))
}

fn eval(cli: &Cli, a: &EvalArgs, mut m: Manifest) -> Result<()> {
    let gt_dir = resolve(&a.gt, "label");
    let pred_dir = resolve(&a.pred, "label");
    let classes = match a.classes {
        Some(c) => c,
        None => read_classes(&a.gt)?.unwrap_or(DEFAULT_NUM_CLASSES),
    };
    if classes == 0 || classes >= usize::from(IGNORE) {
        bail!("--classes {classes} outside 1..=254");
    }
    let indices = list_frame_indices(&gt_dir, "png").with_context(|| format!("--gt {}", gt_dir.display()))?;
    if indices.is_empty() {
        bail!("--gt {}: no label PNGs", gt_dir.display());
    }
    let mut cm = ConfusionMatrix::new(classes);
    for &i in &indices {
        let name = frame_file_name(i, "png");
        let gt = read_label_png(gt_dir.join(&name)).with_context(|| format!("--gt frame {i}"))?;
        let pred = read_label_png(pred_dir.join(&name)).with_context(|| format!("--pred frame {i}"))?;
        cm.accumulate(&gt, &pred).with_context(|| format!("frame {i}"))?;
    }
    let met = segmentation_metrics(&cm).context("--gt has no labeled pixels")?;
    println!(
        "pix_acc={:.6} mean_acc={:.6} miou={:.6} fwiou={:.6} frames={} pixels={}",
        met.pix_acc,
        met.mean_acc,
        met.miou,
        met.fwiou,
        indices.len(),
        cm.total()
    );
    if let Some(csv) = &a.csv {
        Outputs {
            force: cli.force,
            inputs: vec![a.gt.as_path(), a.pred.as_path()],
        }
        .file(csv, "--csv")?;
        let mut s = String::from("metric,value\n");
        for (k, v) in [("pix_acc", met.pix_acc), ("mean_acc", met.mean_acc), ("miou", met.miou), ("fwiou", met.fwiou)] {
            writeln!(s, "{k},{v}").expect("string write");
        }
        for (c, iou) in class_iou(&cm).iter().enumerate() {
            if let Some(v) = iou {
                writeln!(s, "iou_{c},{v}").expect("string write");
            }
        }
        std::fs::write(csv, s).with_context(|| format!("--csv {}", csv.display()))?;
        m.path("inputs.gt", &a.gt);
        m.path("inputs.pred", &a.pred);
        m.set("config.classes", classes);
        m.path("outputs.csv", csv);
        m.write(&sidecar(csv))?;
    }
    if let Some(min) = a.min_miou {
        if met.miou < min {
            return Err(VerificationFailure(format!("mIoU {:.6} below --min-miou {min}", met.miou)).into());
        }
    }
    Ok(())
}

fn depth_eval(a: &DepthEvalArgs) -> Result<()> {
    let gt_dir = resolve(&a.gt, "depth");
    let pred_dir = resolve(&a.pred, "depth");
    let indices = list_frame_indices(&gt_dir, "png").with_context(|| format!("--gt {}", gt_dir.display()))?;
    let (mut sum, mut n) = (0.0, 0usize);
    for &i in &indices {
        let name = frame_file_name(i, "png");
        let gt = read_depth_png::<R>(gt_dir.join(&name)).with_context(|| format!("--gt frame {i}"))?;
        let pred = read_depth_png::<R>(pred_dir.join(&name)).with_context(|| format!("--pred frame {i}"))?;
        let valid = gt.as_slice().iter().filter(|&&g| g > 0.0).count();
        if valid == 0 {
            continue;
        }
        let rms = depth_rms(&pred, &gt).with_context(|| format!("frame {i}"))?;
        sum += rms * rms * valid as f64;
        n += valid;
    }
    if n == 0 {
        bail!("--gt {}: no valid depth pixels", gt_dir.display());
    }
    let rms = (sum / n as f64).sqrt();
    println!("rms={rms:.6} frames={} pixels={n}", indices.len());
    if let Some(max) = a.max_rms {
        if rms > max {
            return Err(VerificationFailure(format!("RMS {rms:.6} above --max-rms {max}")).into());
        }
    }
    Ok(())
}

fn gradcheck(seed: u64, a: &GradcheckArgs) -> Result<()> {
    if a.probes == 0 {
        bail!("--probes must be at least 1");
    }
    let terms: Vec<Term> = match a.term {
        TermArg::All => Term::ALL.to_vec(),
        TermArg::Wce => vec![Term::WeightedCrossEntropy],
        TermArg::Cons => vec![Term::Consistency],
        TermArg::Depth => vec![Term::DepthL1],
        TermArg::Photo => vec![Term::Photometric],
        TermArg::PhotoDepth => vec![Term::PhotometricDepth],
    };
    let mut failed = Vec::new();
    for t in terms {
        let r = check_term(t, seed, a.probes);
        println!(
            "{:<12} max_rel_err={:.3e} tolerance={:.0e} probes={} {}",
            t.name(),
            r.max_rel_err,
            r.tolerance,
            r.probes,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(t.name());
        }
    }
    if !failed.is_empty() {
        return Err(VerificationFailure(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}
