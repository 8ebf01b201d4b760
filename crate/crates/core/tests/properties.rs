mod common;

use candle_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::grad::random_var;
use mixhic::crossmodal::{
    contrastive_loss, contrastive_pair_loss, mapping_loss, orthogonal_loss, OrthogonalMode, DEFAULT_TEMPERATURE,
};
use mixhic::evaluation::{auroc, theorem_trials};
use mixhic::genomic_io::{
    parse_contact_matrix, read_bedpe, write_bedpe, write_contact_matrix, GenomicInterval, LoopCall,
    SparseContactRecord,
};
use mixhic::loop_annotation::{density_cluster, poisson_upper_pvalue, LoopCandidate};
use mixhic::nn::{device, scalar};
use mixhic::preprocessing::{kr_balance, DenseMatrix};

fn tensor(rows: usize, cols: usize, values: &[f64]) -> Tensor {
    Tensor::from_vec(values.to_vec(), (rows, cols), &device()).unwrap()
}

fn permute_rows(t: &Tensor, order: &[usize]) -> Tensor {
    let idx = Tensor::from_vec(order.iter().map(|&i| i as u32).collect::<Vec<_>>(), order.len(), &device()).unwrap();
    t.index_select(&idx, 0).unwrap()
}

/// Trapezoidal area under the ROC curve, stepping through distinct scores.
fn trapezoid_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let pos = labels.iter().filter(|l| **l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let (mut tp, mut fp, mut area, mut prev) = (0.0, 0.0, 0.0, (0.0, 0.0));
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            k += 1;
        }
        let point = (fp / neg, tp / pos);
        area += (point.0 - prev.0) * (point.1 + prev.1) / 2.0;
        prev = point;
    }
    area
}

/// `P(X >= k)` by summing the pmf in log space far into the tail.
fn brute_force_upper(k: u64, lambda: f64) -> f64 {
    let mut total = 0.0;
    let mut log_fact = 0.0;
    for i in 0..(k + 2000) {
        if i > 0 {
            log_fact += (i as f64).ln();
        }
        if i >= k {
            total += (-lambda + i as f64 * lambda.ln() - log_fact).exp();
        }
    }
    total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contact_matrix_round_trip(entries in prop::collection::btree_map((0u32..60, 0u32..60), 0u32..10_000, 1..40)) {
        let mut records: Vec<SparseContactRecord> = entries
            .iter()
            .filter(|((i, j), _)| i <= j)
            .map(|(&(i, j), &c)| SparseContactRecord { bin_i: i, bin_j: j, count: c as f64 / 8.0 })
            .collect();
        records.sort_by_key(|r| (r.bin_i, r.bin_j));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        write_contact_matrix(&records, &path).unwrap();
        prop_assert_eq!(parse_contact_matrix(&path, "chr1").unwrap(), records.clone());

        let mirrored: Vec<SparseContactRecord> = records
            .iter()
            .map(|r| SparseContactRecord { bin_i: r.bin_j, bin_j: r.bin_i, count: r.count })
            .collect();
        let lower = dir.path().join("lower.tsv");
        write_contact_matrix(&mirrored, &lower).unwrap();
        prop_assert_eq!(parse_contact_matrix(&lower, "chr1").unwrap(), records);
    }

    #[test]
    fn bedpe_round_trip(calls in prop::collection::vec((0u64..500, 1u64..100, 0u32..1_000_000, 0u32..1_000_000), 1..20)) {
        let res = 5000;
        let loops: Vec<LoopCall> = calls
            .iter()
            .map(|&(a, gap, p, d)| LoopCall {
                anchor1: GenomicInterval::from_bins("chr2", a, 1, res).unwrap(),
                anchor2: GenomicInterval::from_bins("chr2", a + gap, 1, res).unwrap(),
                probability: p as f64 / 1e6,
                density: d as f64 / 1e3,
                members: 1,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calls.bedpe");
        write_bedpe(&loops, &path).unwrap();
        let back = read_bedpe(&path).unwrap();
        prop_assert_eq!(back.len(), loops.len());
        for (r, l) in back.iter().zip(&loops) {
            prop_assert_eq!(&r.anchor1, &l.anchor1);
            prop_assert_eq!(&r.anchor2, &l.anchor2);
            prop_assert!((r.score - l.probability).abs() < 5e-7);
            prop_assert!((r.density - l.density).abs() < 5e-7);
        }
    }

    #[test]
    fn kr_balancing_equalises_rows(n in 2usize..40, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = DenseMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let v = rng.gen_range(0.1..10.0);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        let b = kr_balance(&m, 1e-8, 3000).unwrap();
        prop_assert!(b.matrix.is_symmetric());
        let sums = b.matrix.row_sums();
        let mean = sums.iter().sum::<f64>() / n as f64;
        let (lo, hi) = sums.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, c), s| (a.min(*s), c.max(*s)));
        prop_assert!((hi - lo) / mean <= 1e-8);
    }

    #[test]
    fn pair_loss_bounds_and_permutation(j in 2usize..8, c in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_var(&mut rng, &[j, c]).unwrap();
        let b = random_var(&mut rng, &[j, c]).unwrap();
        let (a, b) = (a.as_tensor(), b.as_tensor());
        let l = scalar(&contrastive_pair_loss(a, b, DEFAULT_TEMPERATURE, true).unwrap()).unwrap();
        prop_assert!(l >= 0.0);
        let mut order: Vec<usize> = (0..j).collect();
        order.rotate_left(1);
        order.swap(0, j - 1);
        let (pa, pb) = (permute_rows(a, &order), permute_rows(b, &order));
        let lp = scalar(&contrastive_pair_loss(&pa, &pb, DEFAULT_TEMPERATURE, true).unwrap()).unwrap();
        prop_assert!((l - lp).abs() < 1e-12);
        let swap = scalar(&contrastive_loss(b, a, DEFAULT_TEMPERATURE, true).unwrap()).unwrap();
        let direct = scalar(&contrastive_loss(a, b, DEFAULT_TEMPERATURE, true).unwrap()).unwrap();
        prop_assert!((swap - direct).abs() < 1e-12);

        let o = scalar(&orthogonal_loss(a, b, b, a, OrthogonalMode::Squared).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&o));
        let op = scalar(&orthogonal_loss(&pa, &pb, &pb, &pa, OrthogonalMode::Squared).unwrap()).unwrap();
        prop_assert!((o - op).abs() < 1e-12);
    }

    #[test]
    fn equal_logits_give_log_j(j in 2usize..10, c in 1usize..5, scale in 0.1f64..10.0) {
        let row: Vec<f64> = (0..c).map(|k| scale * (k as f64 + 1.0)).collect();
        let a = tensor(j, c, &row.repeat(j));
        let l = scalar(&contrastive_pair_loss(&a, &a, DEFAULT_TEMPERATURE, true).unwrap()).unwrap();
        prop_assert!((l - (j as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn mapping_loss_is_shifted_square(eps in -2.0f64..2.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_var(&mut rng, &[2, 3, 4]).unwrap();
        let t = t.as_tensor();
        let p = (t + eps).unwrap();
        let l = scalar(&mapping_loss(&p, t, &p, t).unwrap()).unwrap();
        prop_assert!((l - eps * eps).abs() < 1e-12);
    }

    #[test]
    fn poisson_matches_summation(lambda in 0.05f64..50.0, observed in 0u64..200) {
        let p = poisson_upper_pvalue(observed as f64, lambda).unwrap();
        prop_assert!((p - brute_force_upper(observed, lambda)).abs() <= 1e-10);
    }

    #[test]
    fn auroc_equals_trapezoid(points in prop::collection::vec((0u8..20, any::<bool>()), 2..60)) {
        let scores: Vec<f64> = points.iter().map(|p| p.0 as f64 / 4.0).collect();
        let labels: Vec<bool> = points.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
        let a = auroc(&scores, &labels).unwrap();
        prop_assert!((a - trapezoid_auroc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn information_identities(seed in any::<u64>()) {
        for t in theorem_trials(5, seed, 4).unwrap() {
            prop_assert!(t.report.bound_holds);
            prop_assert!(t.report.mi_z1 >= -1e-15 && t.report.mi_z2 >= -1e-15);
            prop_assert!(t.chain_rule_error <= 1e-12);
            prop_assert!(t.data_processing_holds);
        }
    }

    #[test]
    fn clustering_partitions_and_is_scale_free(
        pixels in prop::collection::btree_map((0usize..30, 0usize..30), (0.0f64..1.0, any::<bool>()), 1..40),
        scale in 0.1f64..20.0,
    ) {
        let mut candidates = Vec::new();
        let mut decoys = Vec::new();
        for (&(i, j), &(score, decoy)) in &pixels {
            let c = LoopCandidate::new(i, j, score);
            if decoy { decoys.push(c) } else { candidates.push(c) }
        }
        prop_assume!(!candidates.is_empty());
        let (calls, annotated) = density_cluster(&candidates, &decoys, 2, 0.05).unwrap();
        prop_assert_eq!(annotated.len(), candidates.len());
        prop_assert!(annotated.iter().all(|c| c.cluster_id.is_some()));

        let scaled = |v: &[LoopCandidate]| -> Vec<LoopCandidate> {
            v.iter().map(|c| LoopCandidate::new(c.bin_i, c.bin_j, c.model_score * scale)).collect()
        };
        let (calls2, annotated2) = density_cluster(&scaled(&candidates), &scaled(&decoys), 2, 0.05).unwrap();
        let ids: Vec<_> = annotated.iter().map(|c| c.cluster_id).collect();
        let ids2: Vec<_> = annotated2.iter().map(|c| c.cluster_id).collect();
        prop_assert_eq!(ids, ids2);
        let pos: Vec<_> = calls.iter().map(|c| (c.bin_i, c.bin_j)).collect();
        let pos2: Vec<_> = calls2.iter().map(|c| (c.bin_i, c.bin_j)).collect();
        prop_assert_eq!(pos, pos2);
    }
}
