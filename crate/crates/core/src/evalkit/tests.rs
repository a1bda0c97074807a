use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataio::{AudioClip, MemoryClips};
use crate::features::CmvnStats;
use crate::models::{BackboneConfig, BackboneKind};

fn rec(key: &str, label: i32, peaks: &[f64], seconds: f64) -> ScoreRecord {
    ScoreRecord {
        key: key.into(),
        label,
        peaks: peaks.to_vec(),
        duration_seconds: seconds,
    }
}

fn random_scores(n: usize, k: usize, seed: u64) -> Vec<ScoreRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = rng.gen_range(-1..k as i32);
            let peaks: Vec<f64> = (0..k)
                .map(|j| {
                    // Quantized so that some peaks land exactly on grid thresholds.
                    let v: f64 = if j as i32 == label { rng.gen_range(0.3..1.0) } else { rng.gen_range(0.0..0.7) };
                    (v * 2000.0).round() / 2000.0
                })
                .collect();
            rec(&format!("u{i}"), label, &peaks, rng.gen_range(0.5..20.0))
        })
        .collect()
}

fn brute_force_point(scores: &[ScoreRecord], k: usize, theta: f64) -> (f64, f64) {
    let mut pos = 0;
    let mut missed = 0;
    let mut alarms = 0;
    let mut seconds = 0.0;
    for s in scores {
        if s.label == k as i32 {
            pos += 1;
            if s.peaks[k] < theta {
                missed += 1;
            }
        } else {
            seconds += s.duration_seconds;
            if s.peaks[k] >= theta {
                alarms += 1;
            }
        }
    }
    (alarms as f64 / (seconds / 3600.0), 100.0 * missed as f64 / pos as f64)
}

#[test]
fn frr_definition_example() {
    let mut scores: Vec<ScoreRecord> = (0..100).map(|i| rec(&format!("p{i}"), 0, &[if i < 2 { 0.3 } else { 0.9 }], 1.0)).collect();
    scores.push(rec("n", -1, &[0.1], 3600.0));
    let curve = det_curve(&scores, 0, &[0.5]).unwrap();
    assert!((curve.points[0].frr - 2.0).abs() < 1e-12);
}

#[test]
fn fah_definition_example() {
    let mut scores = vec![rec("p", 0, &[0.9], 1.0)];
    for i in 0..6 {
        scores.push(rec(&format!("n{i}"), -1, &[if i < 3 { 0.8 } else { 0.2 }], 1200.0));
    }
    let curve = det_curve(&scores, 0, &[0.5]).unwrap();
    assert!((curve.points[0].fah - 1.5).abs() < 1e-12);
}

#[test]
fn det_needs_both_classes() {
    assert!(matches!(det_curve(&[rec("n", -1, &[0.2], 1.0)], 0, &[0.5]), Err(Error::NoPositives)));
    assert!(matches!(det_curve(&[rec("p", 0, &[0.2], 1.0)], 0, &[0.5]), Err(Error::NoNegatives)));
}

#[test]
fn other_keywords_count_as_negatives() {
    let scores = vec![rec("a", 0, &[0.9, 0.1], 1.0), rec("b", 1, &[0.7, 0.9], 3600.0)];
    let curve = det_curve(&scores, 0, &[0.5]).unwrap();
    assert!((curve.points[0].fah - 1.0).abs() < 1e-12);
}

#[test]
fn det_matches_brute_force_recount() {
    let scores = random_scores(1000, 3, 42);
    let grid = threshold_grid(DEFAULT_GRID_POINTS);
    for k in 0..3 {
        let curve = det_curve(&scores, k, &grid).unwrap();
        assert_eq!(curve.points.len(), 1001);
        for p in &curve.points {
            let (fah, frr) = brute_force_point(&scores, k, p.threshold);
            assert!((p.fah - fah).abs() <= 1e-9 * fah.max(1.0));
            assert!((p.frr - frr).abs() <= 1e-12);
        }
    }
}

#[test]
fn curve_end_points() {
    let scores = random_scores(200, 2, 1);
    let curve = det_curve(&scores, 1, &threshold_grid(11)).unwrap();
    let first = curve.points[0];
    let negs: Vec<&ScoreRecord> = scores.iter().filter(|s| s.label != 1).collect();
    let hours: f64 = negs.iter().map(|s| s.duration_seconds).sum::<f64>() / 3600.0;
    assert_eq!(first.frr, 0.0);
    assert!((first.fah - negs.len() as f64 / hours).abs() < 1e-9);
    let last = curve.points.last().unwrap();
    assert_eq!(last.frr, 100.0);
}

#[test]
fn frr_at_fah_exact_hit() {
    let curve = DetCurve {
        keyword: 0,
        mode: AlarmMode::PeakScore,
        points: vec![
            DetPoint { threshold: 0.1, fah: 3.0, frr: 0.0 },
            DetPoint { threshold: 0.2, fah: 0.5, frr: 0.75 },
            DetPoint { threshold: 0.3, fah: 0.1, frr: 4.0 },
        ],
    };
    assert_eq!(frr_at_fah(&curve, 0.5).unwrap(), 0.75);
    assert!(matches!(frr_at_fah(&curve, 0.01), Err(Error::TargetUnreachable(_))));
}

#[test]
fn perfect_classifier_has_zero_frr() {
    let scores = vec![rec("p1", 0, &[0.9], 1.0), rec("p2", 0, &[0.8], 1.0), rec("n", -1, &[0.1], 3600.0)];
    let curve = det_curve(&scores, 0, &threshold_grid(DEFAULT_GRID_POINTS)).unwrap();
    for target in [0.5, 1.0] {
        assert_eq!(frr_at_fah(&curve, target).unwrap(), 0.0);
    }
}

#[test]
fn frr_at_fah_matches_scan_oracle() {
    let scores = random_scores(1000, 2, 7);
    let grid = threshold_grid(DEFAULT_GRID_POINTS);
    let curve = det_curve(&scores, 0, &grid).unwrap();
    for target in [0.5, 1.0, 5.0, 50.0] {
        let mut expected = None;
        for &theta in &grid {
            let (fah, frr) = brute_force_point(&scores, 0, theta);
            if fah <= target {
                expected = Some(frr);
                break;
            }
        }
        match expected {
            Some(e) => assert!((frr_at_fah(&curve, target).unwrap() - e).abs() < 1e-12),
            None => assert!(frr_at_fah(&curve, target).is_err()),
        }
    }
}

#[test]
fn accuracy_examples() {
    assert_eq!(classify_accuracy(&[rec("a", 1, &[0.2, 0.9, 0.3], 1.0)]).unwrap(), 100.0);
    assert_eq!(predict(&[0.5, 0.9, 0.9]), 1);
    assert_eq!(classify_accuracy(&[rec("a", 2, &[0.5, 0.9, 0.9], 1.0)]).unwrap(), 0.0);
    assert!(matches!(classify_accuracy(&[rec("a", -1, &[0.5], 1.0)]), Err(Error::NegativeLabelPresent(_))));
    assert!(matches!(classify_accuracy(&[]), Err(Error::EmptyManifest)));
}

#[test]
fn accuracy_matches_recount() {
    let scores: Vec<ScoreRecord> = random_scores(1000, 4, 3)
        .into_iter()
        .map(|mut s| {
            s.label = s.label.max(0);
            s
        })
        .collect();
    let mut correct = 0;
    for s in &scores {
        let max = s.peaks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let arg = s.peaks.iter().position(|&p| p == max).unwrap();
        correct += usize::from(arg as i32 == s.label);
    }
    assert!((classify_accuracy(&scores).unwrap() - 100.0 * correct as f64 / 1000.0).abs() < 1e-12);
}

#[test]
fn csv_format() {
    let curve = DetCurve {
        keyword: 0,
        mode: AlarmMode::PeakScore,
        points: vec![DetPoint { threshold: 0.5, fah: 1.0 / 3.0, frr: 2.0 }],
    };
    assert_eq!(det_csv(&curve), "threshold,fah,frr\n0.500000,0.333333,2.000000\n");
}

#[test]
fn scores_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.jsonl");
    let scores = random_scores(20, 2, 5);
    write_scores(&path, &scores).unwrap();
    assert_eq!(read_scores(&path).unwrap(), scores);
    std::fs::write(&path, "{\"key\":\"a\",\"label\":0,\"peaks\":[0.5],\"duration_seconds\":0}\n").unwrap();
    assert!(read_scores(&path).is_err());
}

#[test]
fn event_counting_and_envelope() {
    assert_eq!(count_events(&[0.6, 0.9, 0.1, 0.9, 0.9], 0.5, 3), 2);
    assert_eq!(count_events(&[0.6, 0.9, 0.1, 0.9, 0.9], 0.8, 3), 2);
    let pos = vec![rec("p", 0, &[0.9], 1.0)];
    let streams = vec![NegativeStream {
        posteriors: vec![0.6, 0.9, 0.1, 0.9, 0.2, 0.0, 0.9],
        hours: 2.0,
    }];
    let curve = det_curve_events(&pos, &streams, 0, &threshold_grid(101), 3).unwrap();
    assert_eq!(curve.mode, AlarmMode::StreamEvents);
    assert!(curve.points.windows(2).all(|w| w[0].fah >= w[1].fah && w[0].frr <= w[1].frr));
    assert_eq!(curve.points[0].fah, 1.5);
}

fn tiny_model() -> KwsModel<f32> {
    let mut cfg = BackboneConfig::default_for(BackboneKind::Dstcn);
    cfg.hidden_channels = 8;
    KwsModel::build(cfg, 2, CmvnStats::identity(40), 3).unwrap()
}

fn clips(n: usize) -> (MemoryClips, Vec<ManifestEntry>) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = MemoryClips::default();
    let mut entries = Vec::new();
    for i in 0..n {
        let len = rng.gen_range(4000..20000);
        let samples: Vec<f32> = (0..len).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let key = format!("c{i}");
        store.insert(&key, AudioClip::new(samples, 16000).unwrap());
        entries.push(ManifestEntry {
            key,
            wav: format!("{i}.wav").into(),
            label: (i % 3) as i32 - 1,
            end_frame: None,
            duration_frames: None,
        });
    }
    (store, entries)
}

#[test]
fn peaks_match_frame_oracle_and_batches() {
    let model = tiny_model();
    let (store, entries) = clips(6);
    let scores = score_manifest(&model, &store, &entries).unwrap();
    let feats: Vec<_> = entries
        .iter()
        .map(|e| crate::dataio::unaugmented_features(&store, e, &model.feature_config).unwrap())
        .collect();
    let batch = crate::dataio::Batch::collate(feats.clone(), &entries, vec![None; entries.len()]).unwrap();
    let batched = model.fold_inference().forward(&batch).unwrap();
    for ((s, f), b) in scores.iter().zip(&feats).zip(&batched) {
        let post = model.forward_utterance(&f.values, f.num_mels).unwrap();
        for k in 0..2 {
            let brute = (0..post.frames).map(|t| post.at(t, k)).fold(0.0f32, f32::max) as f64;
            assert!((s.peaks[k] - brute).abs() < 1e-6);
            assert_eq!(s.peaks[k], b.peak(k) as f64);
        }
        assert!(s.duration_seconds > 0.0);
    }
}

#[test]
fn streaming_scores_match_offline() {
    let model = tiny_model();
    let (store, entries) = clips(4);
    let offline = score_manifest(&model, &store, &entries).unwrap();
    let streamed = score_manifest_streaming(&model, &store, &entries, 777).unwrap();
    for (a, b) in offline.iter().zip(&streamed) {
        for k in 0..2 {
            assert!((a.peaks[k] - b.peaks[k]).abs() <= 1e-5);
        }
    }
}

#[test]
fn classify_manifest_rejects_negative_labels() {
    let model = tiny_model();
    let (store, entries) = clips(3);
    assert!(matches!(classify_manifest(&model, &store, &entries), Err(Error::NegativeLabelPresent(_))));
}

proptest! {
    #[test]
    fn det_is_monotone(seed in 0u64..10_000, n in 2usize..200, points in 2usize..60) {
        let mut scores = random_scores(n, 1, seed);
        scores.push(rec("p", 0, &[0.5], 1.0));
        scores.push(rec("n", -1, &[0.5], 1.0));
        let curve = det_curve(&scores, 0, &threshold_grid(points)).unwrap();
        for w in curve.points.windows(2) {
            prop_assert!(w[0].threshold <= w[1].threshold);
            prop_assert!(w[0].fah >= w[1].fah);
            prop_assert!(w[0].frr <= w[1].frr);
        }
    }

    #[test]
    fn event_curve_is_monotone(p in proptest::collection::vec(0.0f32..1.0, 1..300), r in 0usize..30) {
        let pos = vec![rec("p", 0, &[0.7], 1.0)];
        let streams = vec![NegativeStream { posteriors: p, hours: 0.5 }];
        let curve = det_curve_events(&pos, &streams, 0, &threshold_grid(51), r).unwrap();
        for w in curve.points.windows(2) {
            prop_assert!(w[0].fah >= w[1].fah);
            prop_assert!(w[0].frr <= w[1].frr);
        }
    }
}
