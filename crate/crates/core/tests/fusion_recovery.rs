use viewfuse::frameio::{ProbMap, SceneSequence, IGNORE};
use viewfuse::fusion::{pseudo_label_sequence, FusionConfig, FusionPlan};
use viewfuse::masks::Reason;
use viewfuse::raster::Field;
use viewfuse::synth::{random_pair_spec, render};

fn scene() -> SceneSequence<f64> {
    let mut spec = random_pair_spec(21, 96, 72, 5);
    spec.trajectory.end_deg = spec.trajectory.start_deg + 12.0;
    render(&spec).unwrap()
}

fn gt_probs(seq: &SceneSequence<f64>) -> Vec<ProbMap<f64>> {
    seq.frames
        .iter()
        .map(|f| ProbMap::one_hot(f.labels.as_ref().unwrap(), seq.num_classes).unwrap())
        .collect()
}

fn cfg() -> FusionConfig<f64> {
    FusionConfig {
        stride: 1,
        boundary_radius: Some(1),
        ..FusionConfig::default()
    }
}

#[test]
fn corrupted_region_follows_confident_neighbors() {
    let seq = scene();
    let mut probs = gt_probs(&seq);
    let (h, w, c) = (72, 96, seq.num_classes);
    let in_region = |r: usize, col: usize| (20..50).contains(&r) && (30..70).contains(&col);
    let wrong = Field::from_fn(h, w, c, |r, col, ch| {
        if in_region(r, col) {
            1.0 / c as f64
        } else {
            probs[2].values().get(r, col, ch)
        }
    });
    probs[2] = ProbMap::new(wrong, vec![true; h * w]).unwrap();

    let plan = FusionPlan::build(&seq, &cfg()).unwrap();
    assert!(plan.targets[2].neighbors.neighbors.len() >= 2);
    let fused = plan.fuse(&seq, &probs).unwrap();
    let gt = seq.frames[2].labels.as_ref().unwrap();
    let (mut right, mut total) = (0, 0);
    for r in 0..h {
        for col in 0..w {
            if in_region(r, col) && fused[2].support[r * w + col] > 1 {
                total += 1;
                right += usize::from(fused[2].labels.get(r, col) == gt.get(r, col));
            }
        }
    }
    assert!(total > 900, "only {total} supported pixels in the region");
    assert!(right as f64 / total as f64 > 0.97, "{right} of {total} recovered");
}

#[test]
fn uniform_prediction_alone_resolves_to_lowest_class() {
    let seq = scene();
    let (h, w, c) = (72, 96, seq.num_classes);
    let flat = ProbMap::new(Field::filled(h, w, c, 1.0 / c as f64), vec![true; h * w]).unwrap();
    let probs = vec![flat; seq.len()];
    let only_self = FusionConfig {
        max_neighbors: 0,
        ..cfg()
    };
    let fused = pseudo_label_sequence(&seq, &probs, &only_self).unwrap();
    for f in &fused {
        assert!(f.labels.as_slice().iter().all(|&l| l == 0));
        assert_eq!(f.mask.count_valid(), h * w);
    }
}

#[test]
fn without_self_unsupported_pixels_are_ignored() {
    let seq = scene();
    let probs = gt_probs(&seq);
    let no_self = FusionConfig {
        include_self: false,
        ..cfg()
    };
    let fused = FusionPlan::build(&seq, &no_self).unwrap().fuse(&seq, &probs).unwrap();
    for f in &fused {
        for (i, &l) in f.labels.as_slice().iter().enumerate() {
            assert_eq!(l == IGNORE, f.support[i] == 0);
            assert_eq!(f.mask.is_valid(i), f.support[i] > 0);
            if f.support[i] == 0 {
                assert_ne!(f.mask.reason(i), Reason::Valid);
            }
        }
    }
}

#[test]
fn fusion_result_is_independent_of_thread_count() {
    let seq = scene();
    let probs = gt_probs(&seq);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let many = rayon::ThreadPoolBuilder::new().num_threads(6).build().unwrap();
    let a = one.install(|| pseudo_label_sequence(&seq, &probs, &cfg()).unwrap());
    let b = many.install(|| pseudo_label_sequence(&seq, &probs, &cfg()).unwrap());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.labels, y.labels);
        assert_eq!(x.support, y.support);
        let bits = |p: &ProbMap<f64>| p.values().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.probs), bits(&y.probs));
    }
}
