mod common;

use common::random_tensor;
use gcnrwz::dataio::{
    generate_synthetic, load_corpus, load_speeds_csv, write_speeds_csv, EventSchedule, SyntheticConfig, Topology,
};
use gcnrwz::experiment::{historical_average, persistence, prepare};
use gcnrwz::features::{denormalize, sliding_windows, window_count, FeatureKind, FeatureMap, NormalizationParams};
use gcnrwz::graph::AdjacencyMode;
use gcnrwz::tensor::concat;
use gcnrwz::training::split_dataset;
use gcnrwz::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_synth(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_segments: 6,
        days: 2,
        seed,
        events: EventSchedule { count: 6, ..EventSchedule::default() },
        ..SyntheticConfig::default()
    }
}

fn map(values: Tensor) -> FeatureMap {
    let n = values.shape()[0];
    FeatureMap {
        kind: FeatureKind::Speed,
        segment_ids: (0..n).map(|i| format!("s{i}")).collect(),
        values,
        start: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn window_count_formula(t in 2usize..80, h in 1usize..12, p in 1usize..6) {
        prop_assume!(t >= h + p);
        let series = Tensor::new(&[2, t], (0..2 * t).map(|v| v as f64).collect()).unwrap();
        let ds = sliding_windows(&[&series], h, p, 1).unwrap();
        prop_assert_eq!(ds.len(), t - h - p + 1);
        prop_assert_eq!(window_count(t, h, p, 1), t - h - p + 1);
        let last = ds.len() - 1;
        prop_assert_eq!(ds.targets.at(&[last, 1, p - 1]), (2 * t - 1) as f64);
    }

    #[test]
    fn normalization_round_trip(seed in any::<u64>(), n in 1usize..6, t in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = map(random_tensor(&mut rng, &[n, t], 0.0, 80.0));
        let np = NormalizationParams::fit(&m, 0..t).unwrap();
        let z = np.apply(&m.values).unwrap();
        prop_assert!(z.data().iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        let back = denormalize(&z, &np).unwrap();
        prop_assert!(back.max_abs_diff(&m.values) < 1e-9);
    }

    #[test]
    fn split_reassembles(s in 10usize..400) {
        let t = s + 4;
        let series = Tensor::new(&[1, t], (0..t).map(|v| v as f64).collect()).unwrap();
        let ds = sliding_windows(&[&series], 3, 2, 1).unwrap();
        let (tr, va, te) = split_dataset(&ds).unwrap();
        prop_assert_eq!(tr.len() + va.len() + te.len(), s);
        prop_assert_eq!(va.len(), (0.1 * s as f64).round() as usize);
        prop_assert_eq!(te.len(), (0.2 * s as f64).round() as usize);
        let inputs = concat(&[&tr.inputs, &va.inputs, &te.inputs], 0).unwrap();
        let targets = concat(&[&tr.targets, &va.targets, &te.targets], 0).unwrap();
        prop_assert_eq!(inputs, ds.inputs.clone());
        prop_assert_eq!(targets, ds.targets.clone());
        prop_assert!(tr.start_cols.last() < va.start_cols.first());
    }
}

#[test]
fn constant_segment_normalizes_to_half() {
    let m = map(Tensor::new(&[1, 4], vec![30.0; 4]).unwrap());
    let np = NormalizationParams::fit(&m, 0..4).unwrap();
    assert!(np.apply(&m.values).unwrap().data().iter().all(|&v| v == 0.5));
    assert_eq!(denormalize(&Tensor::full(&[1, 4], 0.5), &np).unwrap(), m.values);
}

#[test]
fn generator_is_deterministic() {
    let a = generate_synthetic(&small_synth(3)).unwrap();
    let b = generate_synthetic(&small_synth(3)).unwrap();
    assert_eq!(a.speeds, b.speeds);
    assert_eq!(a.events, b.events);
    let c = generate_synthetic(&small_synth(4)).unwrap();
    assert_ne!(a.speeds, c.speeds);
}

#[test]
fn zero_depth_events_leave_speeds_unchanged() {
    let mut quiet = small_synth(9);
    quiet.events.count = 0;
    let mut shallow = small_synth(9);
    shallow.events.depth = 0.0;
    let a = generate_synthetic(&quiet).unwrap();
    let b = generate_synthetic(&shallow).unwrap();
    assert!(!b.events.is_empty());
    assert_eq!(a.speeds, b.speeds);
}

#[test]
fn events_slow_the_event_segment() {
    let mut cfg = small_synth(5);
    cfg.events.count = 12;
    cfg.noise = 0.0;
    let with = generate_synthetic(&cfg).unwrap();
    cfg.events.count = 0;
    let without = generate_synthetic(&cfg).unwrap();
    let t = with.speeds.t();
    for ev in &with.events {
        let seg = with.graph.index_of(&ev.segment_id).unwrap();
        let last = ((ev.end - with.speeds.start) / 300 - 1) as usize;
        assert!(last < t);
        assert!(
            with.speeds.values.at(&[seg, last]) < without.speeds.values.at(&[seg, last]),
            "event on {} did not reduce speed",
            ev.segment_id
        );
    }
}

#[test]
fn topologies_are_connected() {
    for topo in [Topology::Ring, Topology::Grid, Topology::Random { p: 0.2 }] {
        let cfg = SyntheticConfig { topology: topo, n_segments: 9, days: 1, ..SyntheticConfig::default() };
        let c = generate_synthetic(&cfg).unwrap();
        let d = c.graph.shortest_paths_from(0);
        assert!(d.iter().all(|v| v.is_finite()), "{topo:?}");
    }
}

#[test]
fn corpus_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let synth = generate_synthetic(&small_synth(1)).unwrap();
    synth.write(dir.path()).unwrap();
    let c = load_corpus(dir.path(), AdjacencyMode::Gaussian).unwrap();
    assert_eq!(c.speeds.values, synth.speeds.values);
    assert_eq!(c.speeds.start, synth.speeds.start);
    assert_eq!(c.events, synth.events);
    assert_eq!(c.graph.adjacency(), synth.graph.adjacency());
    assert_eq!(c.imputed, 0);
}

#[test]
fn missing_cells_are_imputed() {
    let dir = tempfile::tempdir().unwrap();
    let synth = generate_synthetic(&small_synth(2)).unwrap();
    synth.write(dir.path()).unwrap();
    let mut holes = synth.speeds.clone();
    holes.values.set(&[1, 10], f64::NAN);
    holes.values.set(&[2, 0], f64::NAN);
    write_speeds_csv(&dir.path().join("speeds.csv"), &holes).unwrap();
    let (_, mask) = load_speeds_csv(&dir.path().join("speeds.csv"), None).unwrap();
    assert_eq!(mask.len(), 2);
    let c = load_corpus(dir.path(), AdjacencyMode::Gaussian).unwrap();
    assert_eq!(c.imputed, 2);
    assert_eq!(c.speeds.values.at(&[1, 10]), synth.speeds.values.at(&[1, 9]));
    assert_eq!(c.speeds.values.at(&[2, 0]), synth.speeds.values.at(&[2, 1]));
}

#[test]
fn prepared_splits_and_baselines() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&small_synth(6)).unwrap().write(dir.path()).unwrap();
    let c = load_corpus(dir.path(), AdjacencyMode::Gaussian).unwrap();
    let p = prepare(&c, 12, 3, 3.0, true, None).unwrap();
    let s = c.speeds.t() - 12 - 3 + 1;
    assert_eq!(p.train.len() + p.val.len() + p.test.len(), s);
    assert_eq!(p.train.channels(), 2);
    let last_train_target = p.train.start_cols.last().unwrap() + 12 + 3;
    assert_eq!(p.train_cols.end, last_train_target);

    let pers = persistence(&p.speeds, &p.test).unwrap();
    let first = p.test.start_cols[0];
    for i in 0..c.graph.n() {
        for k in 0..3 {
            assert_eq!(pers.at(&[0, i, k]), p.speeds.values.at(&[i, first + 11]));
        }
    }
    let ha = historical_average(&p.speeds, p.train_cols.clone(), &p.test).unwrap();
    assert_eq!(ha.shape(), pers.shape());
    assert!(ha.is_finite());

    let minus = prepare(&c, 12, 3, 3.0, false, Some(&p.norm)).unwrap();
    assert_eq!(minus.train.channels(), 1);
    assert_eq!(minus.test.targets, p.test.targets);
}
