mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::Bench;
use relpatch::fixture::PlantedConfig;
use relpatch::heads::{
    attention_interaction_s, head_unembed_topk, interaction_report, pearson, rank_heads_by_ie, rank_layers_by_ie, rbo,
    rbo_permutations, spearman,
};
use relpatch::model::{ActivationCache, CacheKey, CaptureSet, HeadId};
use relpatch::patching::IEGrid;
use relpatch::prompt::Style;
use relpatch::tensor::Matrix;

fn s_oracle(a: &Matrix, query: std::ops::Range<usize>, doc: std::ops::Range<usize>) -> f64 {
    let mut total = 0.0;
    for i in query {
        let mut best = f64::NEG_INFINITY;
        for k in doc.clone() {
            if (a.get(i, k) as f64) > best {
                best = a.get(i, k) as f64;
            }
        }
        total += best;
    }
    total
}

fn rbo_oracle(a: &[usize], b: &[usize], p: f64) -> f64 {
    let k = a.len();
    let agreement = |d: usize| {
        let sa: HashSet<_> = a[..d].iter().collect();
        let sb: HashSet<_> = b[..d].iter().collect();
        sa.intersection(&sb).count() as f64
    };
    let mut sum = 0.0;
    for d in 1..=k {
        sum += agreement(d) / d as f64 * p.powi(d as i32);
    }
    agreement(k) / k as f64 * p.powi(k as i32) + (1.0 - p) / p * sum
}

fn causal_pattern(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        let w: Vec<f32> = (0..=i).map(|_| rng.gen_range(0.0..1.0)).collect();
        let z: f32 = w.iter().sum();
        for (k, x) in w.into_iter().enumerate() {
            m.set(i, k, x / z);
        }
    }
    m
}

fn grid(rows: Vec<usize>, cols: &[&str], mean_ie: Vec<Vec<f64>>) -> IEGrid {
    IEGrid {
        model: "m".into(),
        dataset: "d".into(),
        style: Style::Pointwise,
        site: "attn_out".into(),
        counts: mean_ie.iter().map(|r| vec![1; r.len()]).collect(),
        rows,
        cols: cols.iter().map(|c| c.to_string()).collect(),
        mean_ie,
        excluded: 0,
        clamped: false,
        notes: vec![],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn interaction_s_matches_double_loop(seed in any::<u64>(), n in 6usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = causal_pattern(&mut rng, n);
        let d0 = rng.gen_range(0..n - 3);
        let d1 = rng.gen_range(d0 + 1..n - 1);
        let q0 = rng.gen_range(d1..n - 1);
        let q1 = rng.gen_range(q0 + 1..=n);
        let got = attention_interaction_s(&a, q0..q1, d0..d1).unwrap();
        prop_assert!((got - s_oracle(&a, q0..q1, d0..d1)).abs() < 1e-9);
    }
}

#[test]
fn interaction_s_rejects_bad_spans() {
    let a = Matrix::zeros(5, 5);
    assert!(attention_interaction_s(&a, 3..3, 0..2).is_err());
    assert!(attention_interaction_s(&a, 3..6, 0..2).is_err());
    assert!(attention_interaction_s(&a, 1..3, 0..2).is_err());
}

#[test]
fn identical_document_columns_give_zero_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut a = causal_pattern(&mut rng, 12);
    for i in 8..12 {
        for k in 0..3 {
            let v = a.get(i, k);
            a.set(i, k + 4, v);
        }
    }
    let first = attention_interaction_s(&a, 8..12, 0..3).unwrap();
    let second = attention_interaction_s(&a, 8..12, 4..7).unwrap();
    assert_eq!(first - second, 0.0);
}

#[test]
fn rbo_matches_prefix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.gen_range(3..=32);
        let mut a: Vec<usize> = (0..n).collect();
        let mut b = a.clone();
        a.shuffle(&mut rng);
        b.shuffle(&mut rng);
        for p in [0.5, 0.9, 0.98] {
            let got = rbo_permutations(&a, &b, p).unwrap();
            let want = if a == b { 1.0 } else { rbo_oracle(&a, &b, p) };
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            assert!((0.0..=1.0).contains(&got));
        }
    }
}

#[test]
fn rbo_edge_cases() {
    let a = [1, 2, 3, 4];
    assert_eq!(rbo(&a, &a, 0.9).unwrap(), 1.0);
    assert_eq!(rbo(&a, &[5, 6, 7, 8], 0.9).unwrap(), 0.0);
    assert!(rbo(&a, &a, 1.0).is_err());
    assert!(rbo(&a, &[1, 1, 2, 3], 0.9).is_err());
    assert!(rbo_permutations(&a, &[1, 2, 3, 5], 0.9).is_err());
    // a swap at the bottom costs less than a swap at the top
    let low = rbo(&a, &[1, 2, 4, 3], 0.9).unwrap();
    let high = rbo(&a, &[2, 1, 3, 4], 0.9).unwrap();
    assert!(low > high);
}

#[test]
fn pearson_matches_textbook_formula() {
    let xs = [1.0, 2.5, 3.0, 4.2, 5.1, 6.0, 7.7, 8.0, 9.3, 10.0];
    let ys = [2.1, 2.0, 3.9, 4.0, 6.2, 5.5, 8.1, 7.9, 9.0, 11.5];
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    let want = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
    assert!((pearson(&xs, &ys).unwrap() - want).abs() < 1e-12);

    let line: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();
    assert!((pearson(&xs, &line).unwrap() - 1.0).abs() < 1e-12);
    let down: Vec<f64> = xs.iter().map(|x| -0.5 * x).collect();
    assert!((pearson(&xs, &down).unwrap() + 1.0).abs() < 1e-12);
    assert!(pearson(&xs, &[1.0; 10]).is_err());
    assert!(pearson(&xs[..3], &ys).is_err());
}

#[test]
fn spearman_is_rank_invariant() {
    let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
    let ys = [1.0, 8.0, 27.0, 64.0, 125.0];
    assert!((spearman(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn layer_ranking_breaks_ties_by_index() {
    let g = grid(vec![0, 1, 2, 3], &["last"], vec![vec![0.1], vec![0.3], vec![0.1], vec![0.3]]);
    assert_eq!(rank_layers_by_ie(&g, "last").unwrap(), vec![1, 3, 0, 2]);
    assert!(rank_layers_by_ie(&g, "query").is_err());

    let h = grid(vec![0, 1], &["0", "1"], vec![vec![0.2, 0.5], vec![0.5, 0.0]]);
    let order: Vec<HeadId> = rank_heads_by_ie(&h).into_iter().map(|(h, _)| h).collect();
    assert_eq!(order, vec![HeadId::new(0, 1), HeadId::new(1, 0), HeadId::new(0, 0), HeadId::new(1, 1)]);
}

#[test]
fn zero_head_output_projects_to_the_bias() {
    let bench = Bench::new(&PlantedConfig::default(), 1);
    let model = &bench.planted.model;
    let d = model.config().d_model;
    let mut cache = ActivationCache::new();
    cache.insert(CacheKey::head_out(0, 0), Matrix::zeros(1, d));
    let top = head_unembed_topk(model, &cache, HeadId::new(0, 0), 0, 3).unwrap();
    let bias = model.unembed(&vec![0.0; d]).unwrap();
    for (id, v) in &top {
        assert_eq!(*v, bias[*id as usize]);
    }
    assert!(head_unembed_topk(model, &cache, HeadId::new(0, 0), 1, 3).is_err());
}

#[test]
fn output_head_projects_onto_yes() {
    let bench = Bench::new(&PlantedConfig::default(), 10);
    let model = &bench.planted.model;
    let head = bench.planted.circuit.output_heads[0];
    let (yes, _) = bench.builder().answer_ids(Style::Pointwise);
    for pair in bench.pairs(Style::Pointwise) {
        let key = CacheKey::head_out(head.layer, head.head);
        let out = model.forward(&pair.clean, &CaptureSet::keys([key])).unwrap();
        let top = head_unembed_topk(model, &out.cache, head, pair.map.last(), 2).unwrap();
        let ids: Vec<u32> = top.iter().map(|t| t.0).collect();
        assert!(ids.contains(&yes), "{ids:?}");
    }
}

#[test]
fn match_heads_carry_the_interaction_signal() {
    let bench = Bench::new(&PlantedConfig::default(), 20);
    let model = &bench.planted.model;
    let report = interaction_report(model, &bench.pairs(Style::Pointwise)).unwrap();
    assert_eq!(report.n, 20);
    let best = report.best().unwrap();
    assert!(bench.planted.circuit.match_heads.contains(&best.head), "{:?}", best.head);
    assert!(best.score > 0.0);
    for h in &report.heads {
        assert!((h.score - (h.s_pos - h.s_neg)).abs() < 1e-12);
    }
}
