use std::fs;
use std::path::Path;

use conformer::data::{load_dataset, save_dataset, synth_generate, NormalizationStats, SplitSpec, SynthConfig, Topology};
use conformer::Error;

fn small() -> SynthConfig {
    SynthConfig {
        n_nodes: 6,
        days: 2,
        interval_minutes: 15,
        incident_rate: 2.0,
        missing_rate: 0.05,
        ..SynthConfig::default()
    }
}

fn replace_in(path: &Path, from: &str, to: &str) {
    let text = fs::read_to_string(path).unwrap();
    assert!(text.contains(from), "{from:?} not in {}", path.display());
    fs::write(path, text.replacen(from, to, 1)).unwrap();
}

#[test]
fn save_then_load_is_lossless() {
    let bundle = synth_generate(&small(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &bundle).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, bundle);
}

#[test]
fn empty_incident_file_keeps_its_header() {
    let cfg = SynthConfig { incident_rate: 0.0, ..small() };
    let bundle = synth_generate(&cfg, 1).unwrap();
    assert!(bundle.acc_ids.iter().chain(&bundle.reg_ids).all(|&c| c == 0));
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &bundle).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join("incidents.csv")).unwrap(), "t,node,kind,code\n");
    assert_eq!(load_dataset(dir.path()).unwrap(), bundle);
}

#[test]
fn out_of_range_node_is_reported_with_its_line() {
    let bundle = synth_generate(&small(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &bundle).unwrap();
    let path = dir.path().join("values.csv");
    replace_in(&path, "\n0,5,", "\n0,6,");
    match load_dataset(dir.path()) {
        Err(Error::Load { file, line, .. }) => {
            assert!(file.ends_with("values.csv"));
            assert_eq!(line, 7);
        }
        other => panic!("expected a load error, got {other:?}"),
    }
}

#[test]
fn interval_must_divide_a_day() {
    let bundle = synth_generate(&small(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &bundle).unwrap();
    replace_in(&dir.path().join("meta.json"), "\"interval_minutes\": 15", "\"interval_minutes\": 7");
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Load { .. }), "{err}");
    assert!(err.to_string().contains("1440"), "{err}");
}

#[test]
fn malformed_files_are_rejected() {
    let bundle = synth_generate(&small(), 3).unwrap();
    let cases: [(&str, &str, &str); 5] = [
        ("values.csv", "t,node,value", "t,node,speed"),
        ("values.csv", "\n0,0,", "\n0,1,"),
        ("adjacency.csv", "src,dst,weight\n", "src,dst,weight\n0,0,-1\n"),
        ("incidents.csv", "t,node,kind,code\n", "t,node,kind,code\n0,0,acc,9\n"),
        ("meta.json", "\"n_nodes\": 6", "\"n_nodes\": 6, \"extra\": 1"),
    ];
    for (file, from, to) in cases {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &bundle).unwrap();
        replace_in(&dir.path().join(file), from, to);
        assert!(load_dataset(dir.path()).is_err(), "{file}: {to:?} accepted");
    }
}

#[test]
fn accidents_depress_speed() {
    let cfg = SynthConfig {
        missing_rate: 0.0,
        noise_std: 0.5,
        ..SynthConfig::default()
    };
    let b = synth_generate(&cfg, 7).unwrap();
    let n = b.n_nodes();
    let spd = cfg.steps_per_day();
    // Same node and time of day, with and without an accident at the source.
    let (mut hit, mut hit_n, mut free, mut free_n) = (0.0, 0usize, 0.0, 0usize);
    let mut per_slot = vec![(0.0, 0usize); n * spd];
    for (i, &v) in b.values.data().iter().enumerate() {
        let (t, node) = (i / n, i % n);
        if b.acc_ids[i] == 0 && b.reg_ids[i] == 0 {
            let s = &mut per_slot[node * spd + t % spd];
            s.0 += v;
            s.1 += 1;
        }
    }
    for (i, &v) in b.values.data().iter().enumerate() {
        let (t, node) = (i / n, i % n);
        let (sum, count) = per_slot[node * spd + t % spd];
        if count == 0 {
            continue;
        }
        if b.acc_ids[i] == 1 && b.reg_ids[i] == 0 {
            hit += v;
            hit_n += 1;
            free += sum / count as f64;
            free_n += 1;
        }
    }
    assert!(hit_n > 50);
    assert!(hit / hit_n as f64 + 3.0 < free / free_n as f64, "{} vs {}", hit / hit_n as f64, free / free_n as f64);
}

#[test]
fn generator_is_seeded() {
    let a = synth_generate(&small(), 11).unwrap();
    assert_eq!(a, synth_generate(&small(), 11).unwrap());
    assert_ne!(a.values, synth_generate(&small(), 12).unwrap().values);
    let missing = a.values.data().iter().filter(|&&v| v == 0.0).count() as f64 / a.values.len() as f64;
    assert!((0.02..0.09).contains(&missing), "{missing}");
    assert!(a.values.data().iter().all(|&v| v == 0.0 || v >= 1.0));
}

#[test]
fn grid_and_ring_sizes() {
    for (topology, edges) in [(Topology::Ring, 12), (Topology::Grid, 14)] {
        let b = synth_generate(&SynthConfig { topology, ..small() }, 0).unwrap();
        assert_eq!(b.graph.n_edges(), edges, "{topology}");
    }
}

#[test]
fn normalization_uses_train_nonzeros_only() {
    let b = synth_generate(&small(), 5).unwrap();
    let split = SplitSpec::chronological(b.n_steps());
    let stats = NormalizationStats::fit(&b, split.train.clone(), false).unwrap();
    let n = b.n_nodes();
    let xs: Vec<f64> = b.values.data()[..split.train.end * n].iter().copied().filter(|&v| v != 0.0).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let std = (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
    assert!((stats.mean[0] - mean).abs() < 1e-9);
    assert!((stats.std[0] - std).abs() < 1e-9);
    let per_node = NormalizationStats::fit(&b, split.train, true).unwrap();
    assert_eq!(per_node.mean.len(), n);
}

#[test]
fn chronological_split_ratios() {
    let s = SplitSpec::chronological(4032);
    assert_eq!((s.train.end, s.val.end, s.test.end), (2419, 3226, 4032));
    let s = SplitSpec::chronological(10);
    assert_eq!((s.train, s.val, s.test), (0..6, 6..8, 8..10));
}
