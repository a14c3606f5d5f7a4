mod common;

use common::seeded;
use dnsgt_core::ingest::QueryStream;
use dnsgt_core::sequencer::{
    cluster_time_based, dbscan_1d, fixed_length, greedy_time_based, sequence_stream, RawSequence,
    SequencingConfig, Strategy as Seq, NOISE,
};
use proptest::prelude::*;
use rand::Rng;

/// Classic sequential DBSCAN with explicit neighborhood scans.
fn brute_dbscan(points: &[f64], eps: f64, min_pts: usize) -> Vec<i64> {
    let n = points.len();
    let neighbors = |i: usize| {
        (0..n)
            .filter(|&j| (points[i] - points[j]).abs() <= eps)
            .collect::<Vec<_>>()
    };
    let core: Vec<bool> = (0..n).map(|i| neighbors(i).len() >= min_pts).collect();
    let mut labels = vec![NOISE; n];
    let mut visited = vec![false; n];
    let mut cluster = -1;
    for i in 0..n {
        if visited[i] || !core[i] {
            continue;
        }
        cluster += 1;
        let mut queue = vec![i];
        visited[i] = true;
        labels[i] = cluster;
        while let Some(p) = queue.pop() {
            for q in neighbors(p) {
                if labels[q] == NOISE {
                    labels[q] = cluster;
                }
                if core[q] && !visited[q] {
                    visited[q] = true;
                    queue.push(q);
                }
            }
        }
    }
    labels
}

#[test]
fn dbscan_matches_brute_force() {
    let mut rng = seeded(21);
    for trial in 0..1000 {
        let n = rng.random_range(0..=50);
        let mut pts: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < 0.2 {
                    f64::from(rng.random_range(0..20u32))
                } else {
                    rng.random_range(0.0..20.0)
                }
            })
            .collect();
        pts.sort_by(f64::total_cmp);
        let eps = rng.random_range(0.0..2.0);
        let min_pts = rng.random_range(1..=6);
        assert_eq!(
            dbscan_1d(&pts, eps, min_pts),
            brute_dbscan(&pts, eps, min_pts),
            "trial {trial}: eps {eps} min_pts {min_pts} pts {pts:?}"
        );
    }
}

fn stream_strategy() -> impl proptest::strategy::Strategy<Value = QueryStream> {
    proptest::collection::vec(
        (prop_oneof![3 => 0.0f64..2.0, 1 => 2.0f64..600.0], 0u8..6),
        1..120,
    )
    .prop_map(|gaps| {
        let mut t = 0.0;
        let queries = gaps
            .into_iter()
            .map(|(g, d)| {
                t += g;
                (t, format!("d{d}.com"))
            })
            .collect();
        QueryStream {
            host: "10.0.0.1".into(),
            queries,
        }
    })
}

fn assert_contiguous(stream: &QueryStream, seqs: &[RawSequence], cap: usize) {
    for s in seqs {
        assert!(
            (1..=cap).contains(&s.len()),
            "length {} outside [1, {cap}]",
            s.len()
        );
        assert_eq!(&stream.queries[s.start..s.start + s.len()], &s.queries[..]);
        assert_eq!(s.host, stream.host);
    }
}

fn coverage(stream: &QueryStream, seqs: &[RawSequence]) -> Vec<usize> {
    let mut c = vec![0; stream.len()];
    for s in seqs {
        for x in &mut c[s.start..s.start + s.len()] {
            *x += 1;
        }
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn fixed_windows(stream in stream_strategy(), cap in 1usize..12, stride in 1usize..14) {
        let seqs = fixed_length(&stream, cap, stride);
        assert_contiguous(&stream, &seqs, cap);
        let cov = coverage(&stream, &seqs);
        let bound = cap.div_ceil(stride);
        prop_assert!(cov.iter().all(|&c| c <= bound));
        if stride == cap {
            prop_assert!(cov.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn greedy_partition(stream in stream_strategy(), cap in 1usize..12, intra in 0.5f64..40.0, base in 1.0f64..400.0, inter in 0.1f64..5.0) {
        let cfg = SequencingConfig { strategy: Seq::Time, max_len: cap, delta_intra: intra, delta_base: base, delta_inter: inter, ..Default::default() };
        let seqs = greedy_time_based(&stream, &cfg);
        assert_contiguous(&stream, &seqs, cap);
        prop_assert!(coverage(&stream, &seqs).iter().all(|&c| c == 1));
        for s in &seqs {
            let t0 = s.queries[0].0;
            for w in s.queries.windows(2) {
                prop_assert!(w[1].0 - w[0].0 < intra);
                prop_assert!(w[1].0 - t0 < base || w[1].0 - w[0].0 < inter);
            }
        }
    }

    #[test]
    fn density_partition(stream in stream_strategy(), cap in 1usize..12) {
        let cfg = SequencingConfig { strategy: Seq::Density, max_len: cap, ..Default::default() };
        let seqs = cluster_time_based(&stream, &cfg);
        assert_contiguous(&stream, &seqs, cap);
        prop_assert!(coverage(&stream, &seqs).iter().all(|&c| c == 1));
        prop_assert_eq!(&seqs, &sequence_stream(&stream, &cfg));
    }

    #[test]
    fn density_with_noise_never_duplicates(stream in stream_strategy(), cap in 1usize..12, min_pts in 2usize..5) {
        let cfg = SequencingConfig { strategy: Seq::Density, max_len: cap, min_pts, ..Default::default() };
        let seqs = cluster_time_based(&stream, &cfg);
        assert_contiguous(&stream, &seqs, cap);
        prop_assert!(coverage(&stream, &seqs).iter().all(|&c| c <= 1));
    }
}

#[test]
fn single_query_stream_is_one_sequence() {
    let stream = QueryStream {
        host: "h".into(),
        queries: vec![(3.0, "a.com".into())],
    };
    let seqs = cluster_time_based(&stream, &SequencingConfig::default());
    assert_eq!(seqs.len(), 1);
    assert_eq!(seqs[0].queries, stream.queries);
}

#[test]
fn median_radius_keeps_rounded_gaps_together() {
    // 0.1 s gaps accumulated in floating point differ in their last bits
    let mut t = 100.0;
    let mut queries = Vec::new();
    for s in 0..4 {
        for _ in 0..7 {
            queries.push((t, format!("s{s}.com")));
            t += 0.1;
        }
        t += 120.0;
    }
    let stream = QueryStream {
        host: "h".into(),
        queries,
    };
    let seqs = cluster_time_based(
        &stream,
        &SequencingConfig {
            max_len: 32,
            ..Default::default()
        },
    );
    assert_eq!(
        seqs.iter().map(RawSequence::len).collect::<Vec<_>>(),
        vec![7; 4]
    );
}
