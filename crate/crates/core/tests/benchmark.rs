use mmsfit::databench::{generate, BenchmarkSpec, EmbeddingArchive, Samples};
use mmsfit::FormatError;

/// Nearest class centroid within each domain: centroids from the first half
/// of each (class, domain) cell, scored on the second half.
fn nearest_centroid_accuracy(a: &EmbeddingArchive, per_cell: usize) -> f64 {
    let s = Samples::all(a);
    let (c, d) = (a.num_classes(), a.input_dim);
    let fit = per_cell / 2;
    let (mut correct, mut total) = (0, 0);
    for dom in 0..a.num_domains {
        let cell = |k: usize| (dom * c + k) * per_cell;
        let centroids: Vec<Vec<f64>> = (0..c)
            .map(|k| {
                let mut m = vec![0.0; d];
                for i in cell(k)..cell(k) + fit {
                    m.iter_mut()
                        .zip(s.row(i))
                        .for_each(|(m, v)| *m += v / fit as f64);
                }
                m
            })
            .collect();
        for k in 0..c {
            for i in cell(k) + fit..cell(k) + per_cell {
                let dist = |m: &Vec<f64>| {
                    m.iter()
                        .zip(s.row(i))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                };
                let best = (0..c)
                    .min_by(|&p, &q| dist(&centroids[p]).total_cmp(&dist(&centroids[q])))
                    .unwrap();
                correct += usize::from(best == k);
                total += 1;
            }
        }
    }
    correct as f64 / total as f64
}

#[test]
fn default_benchmark_is_separable_within_each_domain() {
    let spec = BenchmarkSpec::default();
    let a = generate(&spec).unwrap();
    assert_eq!(a.num_samples(), 20 * 3 * 50);
    let acc = nearest_centroid_accuracy(&a, spec.samples_per_class_per_domain);
    assert!(acc > 0.9, "{acc}");
}

#[test]
fn archive_file_round_trip_and_truncation() {
    let a = generate(&BenchmarkSpec {
        samples_per_class_per_domain: 4,
        ..BenchmarkSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.emba");
    a.save(&path).unwrap();
    assert_eq!(EmbeddingArchive::load(&path).unwrap(), a);

    // Cut inside the feature block.
    let bytes = std::fs::read(&path).unwrap();
    let cut = 25 + 4 * a.input_dim * 7 + 3;
    match EmbeddingArchive::from_bytes(&bytes[..cut]) {
        Err(FormatError::Truncated { expected, actual }) => {
            let fixed = 25 + 4 * a.features.len() + 8 * a.num_samples() + 4 * a.prototypes.len();
            assert_eq!((expected, actual), (fixed, cut));
        }
        other => panic!("{other:?}"),
    }
}
