use proptest::prelude::*;
use viewfuse::frameio::SceneSequence;
use viewfuse::synth::{make_domain_shift_benchmark, Benchmark};
use viewfuse::toytrain::{decode_model, encode_model, train_s4, train_supervised, S4Trainer, TrainConfig};

fn bench() -> Benchmark<f64> {
    make_domain_shift_benchmark(17).unwrap()
}

fn short(lambda: f64) -> TrainConfig<f64> {
    TrainConfig {
        lambda,
        iterations: 80,
        warmup: 20,
        snapshot_period: 10,
        ..TrainConfig::default()
    }
}

/// A trainer stepped past warmup, so fused labels exist.
fn warmed<'a>(b: &Benchmark<f64>, target: &'a SceneSequence<f64>) -> S4Trainer<'a, f64> {
    let mut t = S4Trainer::new(&b.source, target, &short(1.0)).unwrap();
    for _ in 0..31 {
        t.step().unwrap();
    }
    assert!(t.fused().is_some());
    t
}

#[test]
fn lambda_zero_matches_supervised_bit_for_bit() {
    let b = bench();
    let cfg = TrainConfig {
        lambda: 0.0,
        iterations: 150,
        ..TrainConfig::default()
    };
    let (a, la) = train_s4(&b.source, &b.target, &cfg).unwrap();
    let (s, ls) = train_supervised(&b.source, &cfg).unwrap();
    assert_eq!(encode_model(&a), encode_model(&s));
    assert!(a.weights.iter().zip(&s.weights).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(la.len(), ls.len());
    for (x, y) in la.iter().zip(&ls) {
        assert_eq!(x.total.to_bits(), y.total.to_bits());
        assert_eq!(x.l_g, 0.0);
    }
}

#[test]
fn same_seed_same_weights() {
    let b = bench();
    let (a, _) = train_s4(&b.source, &b.target, &short(1.0)).unwrap();
    let (c, _) = train_s4(&b.source, &b.target, &short(1.0)).unwrap();
    assert_eq!(a, c);
    let other = TrainConfig { seed: 1, ..short(1.0) };
    let (d, _) = train_s4(&b.source, &b.target, &other).unwrap();
    assert_ne!(a.weights, d.weights);
}

#[test]
fn consistency_term_contributes_after_warmup() {
    let b = bench();
    let (_, log) = train_s4(&b.source, &b.target, &short(1.0)).unwrap();
    assert!(log[..20].iter().all(|r| r.l_g == 0.0 && r.lambda == 0.0));
    assert!(log[20..].iter().all(|r| r.lambda == 1.0 && r.count_g > 0));
}

#[test]
fn model_bytes_round_trip() {
    let b = bench();
    let (m, _) = train_s4(&b.source, &b.target, &short(1.0)).unwrap();
    let m32 = m.cast::<f32>();
    let bytes = encode_model(&m32);
    let back = decode_model::<f32>(&bytes).unwrap();
    assert_eq!(back.weights, m32.weights);
    assert_eq!(encode_model(&back), bytes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn snapshot_perturbation_leaves_update_unchanged(
        scale in -50.0f64..50.0,
        offset in 0usize..24,
    ) {
        let b = bench();
        let mut t = warmed(&b, &b.target);
        let it = t.model().iteration;
        let (before, rb) = t.update(it).unwrap();
        let n = t.model().snapshot_weights.len();
        for (k, w) in t.model_mut().snapshot_weights.iter_mut().enumerate() {
            *w += scale * (((k + offset) % n) as f64 - 3.0);
        }
        let (after, ra) = t.update(it).unwrap();
        prop_assert!(before.iter().zip(&after).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert_eq!(rb.total.to_bits(), ra.total.to_bits());
    }
}
