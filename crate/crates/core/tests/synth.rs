use tgshuffle_core::data::{DatasetSplit, SplitName};
use tgshuffle_core::eval::{evaluate, DEFAULT_THRESHOLDS};
use tgshuffle_core::synth::{
    bias_oracle, generate_benchmark, BenchConfig, ContentOracle, OracleModel, SplitSizes,
};
use tgshuffle_core::Error;

fn small(noise: f64, seed: u64) -> BenchConfig {
    BenchConfig {
        videos: SplitSizes {
            training: 256,
            val: 32,
            test_iid: 32,
            test_ood: 64,
        },
        noise,
        seed,
        ..BenchConfig::default()
    }
}

fn normalized_start(s: &tgshuffle_core::GroundingSample) -> f64 {
    let free = s.frames() - s.span.frame_len();
    if free == 0 {
        0.0
    } else {
        s.span.start_frame as f64 / free as f64
    }
}

#[test]
fn zero_videos_is_a_config_error() {
    let mut c = BenchConfig::default();
    c.videos.val = 0;
    assert!(matches!(generate_benchmark(&c), Err(Error::Config(_))));
}

#[test]
fn infeasible_ranges_are_rejected() {
    let c = BenchConfig {
        moment_max: 80,
        ..BenchConfig::default()
    };
    assert!(matches!(generate_benchmark(&c), Err(Error::Config(_))));
    let c = BenchConfig {
        ood: tgshuffle_core::synth::PositionRegion {
            low: 0.2,
            high: 0.5,
            std: 0.05,
        },
        ..BenchConfig::default()
    };
    assert!(matches!(generate_benchmark(&c), Err(Error::Config(_))));
}

#[test]
fn default_counts_and_span_ranges() {
    let c = BenchConfig::default();
    let b = generate_benchmark(&c).unwrap();
    for split in b.dataset.splits() {
        assert_eq!(split.len(), c.videos.get(split.name));
        for s in split.samples() {
            assert!(s.frames() >= c.frames_min && s.frames() <= c.frames_max);
            assert!(s.span.end_frame < s.frames());
            let len = s.span.frame_len();
            assert!(len >= c.moment_min && len <= c.moment_max, "{len}");
            assert!(s.span.end_sec <= s.duration());
            assert!((3..=5).contains(&s.query.len()));
        }
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = generate_benchmark(&small(0.3, 5)).unwrap();
    let b = generate_benchmark(&small(0.3, 5)).unwrap();
    let c = generate_benchmark(&small(0.3, 6)).unwrap();
    assert_eq!(a.metadata, b.metadata);
    let first = |x: &tgshuffle_core::synth::Benchmark| {
        x.dataset.splits()[0].samples()[0].features.as_slice().to_vec()
    };
    assert_eq!(first(&a), first(&b));
    assert_ne!(first(&a), first(&c));
}

#[test]
fn moment_frames_carry_the_query_signature() {
    let config = small(0.0, 1);
    let b = generate_benchmark(&config).unwrap();
    let meta = &b.metadata;
    for split in b.dataset.splits() {
        for s in split.samples() {
            let k = meta.action_of(s).unwrap();
            for t in 0..s.frames() {
                let row = s.features.row(t);
                let same = row
                    .iter()
                    .zip(&meta.signatures[k])
                    .all(|(&a, &b)| (a as f64 - config.signature_strength * b).abs() < 1e-6);
                assert_eq!(same, s.span.contains_frame(t), "{} frame {t}", s.video_id);
            }
        }
    }
}

#[test]
fn noiseless_content_oracle_is_near_perfect() {
    let b = generate_benchmark(&small(0.0, 2)).unwrap();
    let oracle = OracleModel::ContentOnly(ContentOracle::from_metadata(&b.metadata));
    for split in b.dataset.splits() {
        let r = evaluate(&oracle, split, &DEFAULT_THRESHOLDS).unwrap();
        assert!(r.miou > 99.0, "{} {}", split.name, r.miou);
        assert_eq!(r.r1_at(0.7), Some(100.0));
    }
}

// Expected R@1 of a span drawn uniformly from all valid frame spans.
fn chance_r1(split: &DatasetSplit, theta: f64) -> f64 {
    let mut total = 0.0;
    for s in split.samples() {
        let t = s.frames();
        let (gs, ge) = (s.span.start_frame, s.span.end_frame);
        let mut hits = 0usize;
        let mut all = 0usize;
        for a in 0..t {
            for e in a..t {
                let inter = (e.min(ge) + 1).saturating_sub(a.max(gs));
                let union = (e.max(ge) + 1) - a.min(gs);
                if inter as f64 / union as f64 > theta {
                    hits += 1;
                }
                all += 1;
            }
        }
        total += hits as f64 / all as f64;
    }
    100.0 * total / split.len() as f64
}

#[test]
fn bias_oracle_wins_iid_and_falls_to_chance_ood() {
    let b = generate_benchmark(&BenchConfig::default()).unwrap();
    let oracle = bias_oracle(&b.dataset).unwrap();
    let iid = evaluate(&oracle, b.dataset.split(SplitName::TestIid).unwrap(), &DEFAULT_THRESHOLDS).unwrap();
    let ood_split = b.dataset.split(SplitName::TestOod).unwrap();
    let ood = evaluate(&oracle, ood_split, &DEFAULT_THRESHOLDS).unwrap();
    let chance = chance_r1(ood_split, 0.5);
    assert!(iid.r1_at(0.5).unwrap() > 50.0, "{iid:?}");
    assert!(ood.r1_at(0.5).unwrap() <= chance + 2.0, "{ood:?} chance {chance}");
}

#[test]
fn bias_oracle_ignores_features() {
    let b = generate_benchmark(&small(0.3, 3)).unwrap();
    let oracle = bias_oracle(&b.dataset).unwrap();
    let split = b.dataset.split(SplitName::TestIid).unwrap();
    let blanked: Vec<_> = split
        .samples()
        .iter()
        .map(|s| {
            let f = &s.features;
            let zero = tgshuffle_core::FrameFeatures::new(
                f.frames(),
                f.dim(),
                vec![0.0; f.frames() * f.dim()],
                f.duration(),
            )
            .unwrap();
            s.with_features(std::sync::Arc::new(zero))
        })
        .collect();
    let blanked = DatasetSplit::new(SplitName::TestIid, blanked).unwrap();
    let a = tgshuffle_core::synth::run_oracle(&oracle, split).unwrap();
    let z = tgshuffle_core::synth::run_oracle(&oracle, &blanked).unwrap();
    assert_eq!(a, z);
}

// Mass of a truncated Gaussian in [a, b), by midpoint quadrature.
fn prior_mass(p: &tgshuffle_core::synth::PositionPrior, a: f64, b: f64) -> f64 {
    let steps = 4000;
    let grid = |lo: f64, hi: f64| {
        let h = (hi - lo) / steps as f64;
        (0..steps).map(|i| p.density(lo + (i as f64 + 0.5) * h) * h).sum::<f64>()
    };
    grid(a.max(p.low), b.min(p.high).max(a.max(p.low))) / grid(p.low, p.high)
}

#[test]
fn training_positions_match_bias_map_in_total_variation() {
    let c = BenchConfig {
        videos: SplitSizes {
            training: 512 * 12,
            val: 1,
            test_iid: 1,
            test_ood: 1,
        },
        ..BenchConfig::default()
    };
    let b = generate_benchmark(&c).unwrap();
    let train = b.dataset.split(SplitName::Training).unwrap();
    let bins = 12;
    for k in 0..c.vocab_size {
        let prior = c.bias.prior(k, c.vocab_size);
        let mut counts = vec![0f64; bins];
        let mut n = 0.0;
        for (s, &tok) in train.samples().iter().zip(&b.metadata.planted["training"]) {
            if tok == k {
                let u = normalized_start(s);
                counts[((u * bins as f64) as usize).min(bins - 1)] += 1.0;
                n += 1.0;
            }
        }
        let tv: f64 = (0..bins)
            .map(|i| {
                let lo = i as f64 / bins as f64;
                let hi = if i + 1 == bins { 1.0 + 1e-9 } else { (i + 1) as f64 / bins as f64 };
                (counts[i] / n - prior_mass(&prior, lo, hi)).abs()
            })
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.1, "token {k}: tv {tv} over {n} samples");
    }
}

#[test]
fn iid_and_ood_positions_occupy_disjoint_regions() {
    let c = BenchConfig::default();
    let b = generate_benchmark(&c).unwrap();
    for split in b.dataset.splits() {
        let region = c.region(split.name);
        for s in split.samples() {
            let u = normalized_start(s);
            let slack = 0.5 / (s.frames() - s.span.frame_len()) as f64;
            assert!(u >= region.low - slack && u <= region.high + slack, "{} {u}", s.video_id);
        }
    }
}
