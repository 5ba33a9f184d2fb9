use std::collections::HashMap;
use std::fs;

use tgshuffle::io::{
    build_split, load_annotations, load_features, read_dataset, read_embeddings, read_features, read_predictions,
    write_dataset, write_features, write_predictions, AnnotationRecord, RawFeatures,
};
use tgshuffle::Error;
use tgshuffle_core::eval::Interval;
use tgshuffle_core::synth::{generate_benchmark, BenchConfig};
use tgshuffle_core::{FrameFeatures, SplitName};

fn table(id: &str, frames: usize, dim: usize) -> HashMap<String, RawFeatures> {
    let data = (0..frames * dim).map(|i| i as f32 * 0.5).collect();
    HashMap::from([(id.to_string(), RawFeatures { frames, dim, data })])
}

#[test]
fn annotation_line_maps_to_frames() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.jsonl");
    fs::write(
        &path,
        r#"{"video_id":"v1","duration":30.0,"query":"person awakens","start":0.0,"end":6.6}"#,
    )
    .unwrap();
    let split = load_annotations(&path, SplitName::Training, &table("v1", 30, 4)).unwrap();
    let s = &split.samples()[0];
    assert_eq!((s.span.start_frame, s.span.end_frame), (0, 6));
    assert_eq!(s.query.tokens(), ["person", "awakens"]);
}

#[test]
fn annotation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.jsonl");
    fs::write(&path, r#"{"video_id":"v1","duration":30.0,"query":"q","start":8.0,"end":6.6}"#).unwrap();
    let err = load_annotations(&path, SplitName::Training, &table("v1", 30, 4)).unwrap_err();
    assert!(err.to_string().contains("v1"), "{err}");

    fs::write(&path, "").unwrap();
    let err = load_annotations(&path, SplitName::Training, &table("v1", 30, 4)).unwrap_err();
    assert!(err.to_string().contains("empty split"), "{err}");

    fs::write(&path, "{\"video_id\":\"v1\"}\n\nnot json\n").unwrap();
    match load_annotations(&path, SplitName::Training, &table("v1", 30, 4)).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 1),
        e => panic!("{e}"),
    }

    fs::write(&path, r#"{"video_id":"v2","duration":30.0,"query":"q","start":0.0,"end":6.6}"#).unwrap();
    assert!(matches!(
        load_annotations(&path, SplitName::Training, &table("v1", 30, 4)),
        Err(Error::MissingFeatures(id)) if id == "v2"
    ));
}

#[test]
fn queries_of_one_video_share_features() {
    let rec = |q: &str| AnnotationRecord {
        video_id: "v1".into(),
        duration: 30.0,
        query: q.into(),
        start: 1.0,
        end: 5.0,
    };
    let split = build_split(SplitName::Val, &[rec("a b"), rec("c")], &table("v1", 30, 2)).unwrap();
    assert!(std::sync::Arc::ptr_eq(&split.samples()[0].features, &split.samples()[1].features));
    let mut other = rec("d");
    other.duration = 31.0;
    assert!(build_split(SplitName::Val, &[rec("a"), other], &table("v1", 30, 2)).is_err());
}

#[test]
fn feature_container_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.tgf");
    let data: Vec<f32> = (0..480).map(|i| (i as f32).sin() * 1e-3 + f32::EPSILON).collect();
    let f = FrameFeatures::new(30, 16, data.clone(), 30.0).unwrap();
    let g = FrameFeatures::new(2, 16, vec![-0.0; 32], 2.0).unwrap();
    write_features(&path, [("a", &f), ("b", &g)]).unwrap();
    let back = load_features(&path, "a").unwrap();
    assert_eq!((back.frames, back.dim), (30, 16));
    assert!(back.data.iter().zip(&data).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(matches!(load_features(&path, "c"), Err(Error::MissingFeatures(_))));
}

#[test]
fn feature_container_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.tgf");
    let f = FrameFeatures::new(30, 16, vec![1.0; 480], 30.0).unwrap();
    write_features(&path, [("a", &f)]).unwrap();
    let bytes = fs::read(&path).unwrap();

    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_features(&path), Err(Error::Integrity { .. })));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert!(matches!(read_features(&path), Err(Error::Integrity { .. })));

    // Magic, then one entry: id length, id, T=0, D=16.
    let mut zero = Vec::from(*b"TGF1");
    zero.extend(1u32.to_le_bytes());
    zero.extend(b"a");
    zero.extend(0u32.to_le_bytes());
    zero.extend(16u32.to_le_bytes());
    fs::write(&path, &zero).unwrap();
    let err = read_features(&path).unwrap_err();
    assert!(matches!(err, Error::Core(tgshuffle_core::Error::Validation { .. })), "{err}");
    assert!(err.to_string().contains('a'), "{err}");
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = BenchConfig {
        videos: tgshuffle_core::synth::SplitSizes {
            training: 6,
            val: 2,
            test_iid: 2,
            test_ood: 3,
        },
        ..BenchConfig::default()
    };
    let bench = generate_benchmark(&config).unwrap();
    write_dataset(dir.path(), &bench.dataset).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    for (a, b) in bench.dataset.splits().iter().zip(back.splits()) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert_eq!(x.video_id, y.video_id);
            assert_eq!(x.span, y.span);
            assert_eq!(x.features.as_slice(), y.features.as_slice());
        }
    }
}

#[test]
fn predictions_round_trip_and_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let bench = generate_benchmark(&BenchConfig {
        videos: tgshuffle_core::synth::SplitSizes {
            training: 3,
            val: 1,
            test_iid: 1,
            test_ood: 4,
        },
        ..BenchConfig::default()
    })
    .unwrap();
    let split = bench.dataset.split(SplitName::TestOod).unwrap();
    let preds: Vec<Interval> = (0..4).map(|i| Interval::new(i as f64, i as f64 + 2.5)).collect();
    let path = dir.path().join("p.jsonl");
    write_predictions(&path, split, &preds).unwrap();
    assert_eq!(read_predictions(&path, split).unwrap(), preds);

    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.reverse();
    fs::write(&path, lines.join("\n")).unwrap();
    assert_eq!(read_predictions(&path, split).unwrap(), preds);

    fs::write(&path, lines[..3].join("\n")).unwrap();
    assert!(matches!(read_predictions(&path, split), Err(Error::Integrity { .. })));
    fs::write(&path, format!("{}\n{}", lines.join("\n"), lines[0])).unwrap();
    assert!(matches!(read_predictions(&path, split), Err(Error::Integrity { .. })));
}

#[test]
fn embeddings_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.txt");
    fs::write(&path, "2 3\nopen 0.1 0.2 0.3\nclose -1 0 1e-2\n").unwrap();
    let rows = read_embeddings(&path).unwrap();
    assert_eq!(rows[1], ("close".to_string(), vec![-1.0, 0.0, 0.01]));
    fs::write(&path, "open 0.1 0.2\nclose 0.1 x\n").unwrap();
    match read_embeddings(&path).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 2),
        e => panic!("{e}"),
    }
}
