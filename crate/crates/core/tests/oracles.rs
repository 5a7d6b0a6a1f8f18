//! Independent oracles for the corpus, the triplet loss and CMC scoring.

use candle_core::{Device, Tensor};
use ftwa::dataset::generate_synthetic_corpus;
use ftwa::eval::{cmc, cmc_from_distances, Descriptor, Resolution};
use ftwa::swa::{scalar, triplet_loss, TripletMining};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Every valid (a, p, n) enumerated explicitly; `None` when there is none.
fn brute_force_triplet(v: &[Vec<f64>], y: &[usize], m: f64) -> Option<f64> {
    let n = v.len();
    let (mut sum, mut count) = (0.0, 0usize);
    for a in 0..n {
        for p in 0..n {
            for q in 0..n {
                if a != p && y[a] == y[p] && y[a] != y[q] {
                    sum += (m + euclid(&v[a], &v[p]) - euclid(&v[a], &v[q])).max(0.0);
                    count += 1;
                }
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

fn brute_force_hard(v: &[Vec<f64>], y: &[usize], m: f64) -> Option<f64> {
    let n = v.len();
    let mut terms = Vec::new();
    for a in 0..n {
        let pos = (0..n).filter(|&p| p != a && y[p] == y[a]).map(|p| euclid(&v[a], &v[p]));
        let neg = (0..n).filter(|&q| y[q] != y[a]).map(|q| euclid(&v[a], &v[q]));
        let hp = pos.fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |x| x.max(d))));
        let hn = neg.fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |x| x.min(d))));
        if let (Some(hp), Some(hn)) = (hp, hn) {
            terms.push((m + hp - hn).max(0.0));
        }
    }
    (!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64)
}

fn batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (2usize..=8, 1usize..=4).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), n),
            prop::collection::vec(0usize..3, n),
        )
    })
}

fn tensor(v: &[Vec<f64>]) -> Tensor {
    Tensor::new(v.to_vec(), &Device::Cpu).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn batch_all_triplet_matches_enumeration((v, y) in batch(), m in 0.0f64..1.0) {
        let out = triplet_loss(&tensor(&v), &y, m, TripletMining::BatchAll).unwrap();
        match brute_force_triplet(&v, &y, m) {
            None => {
                prop_assert!(out.degenerate);
                prop_assert_eq!(scalar(&out.loss).unwrap(), 0.0);
            }
            Some(expected) => {
                prop_assert!(!out.degenerate);
                prop_assert!((scalar(&out.loss).unwrap() - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn batch_hard_triplet_matches_enumeration((v, y) in batch(), m in 0.0f64..1.0) {
        let out = triplet_loss(&tensor(&v), &y, m, TripletMining::BatchHard).unwrap();
        match brute_force_hard(&v, &y, m) {
            None => prop_assert!(out.degenerate),
            Some(expected) => prop_assert!((scalar(&out.loss).unwrap() - expected).abs() < 1e-9),
        }
    }
}

/// Rank of the true match after sorting, counting ties against the query.
fn exhaustive_rank(row: &[f64], truth: usize) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[a]
            .partial_cmp(&row[b])
            .unwrap()
            .then_with(|| (a == truth).cmp(&(b == truth)))
    });
    order.iter().position(|&g| g == truth).unwrap() + 1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cmc_matches_exhaustive_ranking(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 10), 10),
        perm in Just((0u32..10).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let gallery_ids: Vec<u32> = perm.clone();
        let query_ids: Vec<u32> = (0..10).collect();
        let r = cmc_from_distances(&rows, &query_ids, &gallery_ids, 1, 0).unwrap();
        let ranks: Vec<usize> = query_ids
            .iter()
            .zip(&rows)
            .map(|(q, row)| exhaustive_rank(row, gallery_ids.iter().position(|g| g == q).unwrap()))
            .collect();
        for (k, got) in [1usize, 5, 10, 20].iter().zip(r.ranks()) {
            let expected = ranks.iter().filter(|&&x| x <= *k).count() as f64 / 10.0;
            prop_assert_eq!(got, expected);
        }
        prop_assert_eq!(r.rank10, 1.0);
        let t = &r.per_trial[0];
        prop_assert!(t[0] <= t[1] && t[1] <= t[2] && t[2] <= t[3]);
    }
}

#[test]
fn hand_written_three_by_three() {
    let d = vec![
        vec![0.2, 0.1, 0.9],
        vec![0.5, 0.4, 0.3],
        vec![0.7, 0.8, 0.6],
    ];
    // True matches on the diagonal: ranks 2, 2 and 1.
    let r = cmc_from_distances(&d, &[0, 1, 2], &[0, 1, 2], 1, 0).unwrap();
    assert!((r.rank1 - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(r.rank5, 1.0);
}

#[test]
fn random_descriptors_score_chance() {
    let g = 10usize;
    let (queries_per_run, runs) = (200usize, 10u64);
    let mut hits = 0.0;
    for seed in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |native| {
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            Descriptor::new(v, None, (1.0, 0.0), native).unwrap()
        };
        let gallery: Vec<Descriptor> = (0..g).map(|_| draw(Resolution::High)).collect();
        let queries: Vec<Descriptor> = (0..queries_per_run).map(|_| draw(Resolution::Low)).collect();
        let gid: Vec<u32> = (0..g as u32).collect();
        let qid: Vec<u32> = (0..queries_per_run).map(|i| (i % g) as u32).collect();
        hits += cmc(&queries, &qid, &gallery, &gid, 1, seed).unwrap().rank1 * queries_per_run as f64;
    }
    let n = (queries_per_run as u64 * runs) as f64;
    let p = 1.0 / g as f64;
    let sigma = (p * (1.0 - p) / n).sqrt();
    let observed = hits / n;
    assert!((observed - p).abs() < 3.0 * sigma, "rank-1 {observed} vs chance {p} ± {}", 3.0 * sigma);
}

#[test]
fn unit_weights_reduce_to_plain_euclidean_cmc() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut vecs = |n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    };
    let (q, g) = (vecs(12), vecs(12));
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let plain: Vec<Vec<f64>> = q.iter().map(|a| g.iter().map(|b| euclid(&unit(a), &unit(b))).collect()).collect();
    let dq: Vec<Descriptor> = q.iter().map(|v| Descriptor::new(v.clone(), None, (1.0, 0.0), Resolution::Low).unwrap()).collect();
    let dg: Vec<Descriptor> = g.iter().map(|v| Descriptor::new(v.clone(), None, (1.0, 0.0), Resolution::High).unwrap()).collect();
    let ids: Vec<u32> = (0..6).chain(0..6).collect();
    let a = cmc(&dq, &ids, &dg, &ids, 10, 3).unwrap();
    let b = cmc_from_distances(&plain, &ids, &ids, 10, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn two_identity_corpus_is_separable_by_nearest_centroid() {
    for seed in [0u64, 7, 11] {
        let records = generate_synthetic_corpus(2, 2, 4, seed).unwrap();
        let flat: Vec<Vec<f32>> = records.iter().map(|r| r.pixels().as_raw().clone()).collect();
        let mut correct = 0;
        for (i, r) in records.iter().enumerate() {
            let centroid = |id: u32| {
                let members: Vec<&Vec<f32>> = records
                    .iter()
                    .zip(&flat)
                    .enumerate()
                    .filter(|(j, (s, _))| *j != i && s.person_id == id)
                    .map(|(_, (_, f))| f)
                    .collect();
                let mut c = vec![0.0f64; flat[0].len()];
                for m in &members {
                    for (acc, x) in c.iter_mut().zip(m.iter()) {
                        *acc += *x as f64 / members.len() as f64;
                    }
                }
                c
            };
            let x: Vec<f64> = flat[i].iter().map(|&v| v as f64).collect();
            let nearest = [0u32, 1]
                .into_iter()
                .min_by(|&a, &b| euclid(&x, &centroid(a)).partial_cmp(&euclid(&x, &centroid(b))).unwrap())
                .unwrap();
            correct += (nearest == r.person_id) as usize;
        }
        let acc = correct as f64 / records.len() as f64;
        assert!(acc > 0.9, "seed {seed}: leave-one-out nearest-centroid accuracy {acc}");
    }
}
