mod common;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::Bench;
use relpatch::eval::{
    build_ranking_tasks, f1, first_stage_ndcg, judgment_eval, knockout_eval, ndcg_at_k, percent_change, rerank_all,
    EvalData, KnockoutPlan, PlanRow, RankingTask, RerankOptions, Selection, Task,
};
use relpatch::fixture::PlantedConfig;
use relpatch::patching::{trace_heads, TraceOptions};
use relpatch::positions::PositionGroup;
use relpatch::prompt::{Bm25Params, Style};

fn ids(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn tasks(bench: &Bench, n: usize) -> Vec<RankingTask> {
    let t = &bench.task;
    let mut out = build_ranking_tasks(&t.queries, &t.corpus, &t.qrels, Some(&t.run), 20, Bm25Params::default()).unwrap();
    out.truncate(n);
    out
}

#[test]
fn ndcg_hand_example() {
    // grades 3, 2, 0, 1 in ranked order
    let q: BTreeMap<String, i32> = [("a", 3), ("b", 2), ("c", 0), ("d", 1)]
        .into_iter()
        .map(|(d, r)| (d.to_string(), r))
        .collect();
    let dcg = 7.0 + 3.0 / 3f64.log2() + 0.0 + 1.0 / 5f64.log2();
    let idcg = 7.0 + 3.0 / 3f64.log2() + 1.0 / 2.0;
    let got = ndcg_at_k(&ids(&["a", "b", "c", "d"]), &q, 10).unwrap();
    assert!((got - dcg / idcg).abs() < 1e-12);
    assert_eq!(ndcg_at_k(&ids(&["a", "b", "d", "c"]), &q, 10).unwrap(), 1.0);
    // the cut-off drops everything below rank k
    let at1 = ndcg_at_k(&ids(&["b", "a", "c", "d"]), &q, 1).unwrap();
    assert!((at1 - 3.0 / 7.0).abs() < 1e-12);
    assert_eq!(ndcg_at_k(&ids(&["c"]), &q, 10).unwrap(), 0.0);
    assert!(ndcg_at_k(&ids(&["a"]), &q, 0).is_err());
}

#[test]
fn f1_reference_cases() {
    assert_eq!(f1(&[true, true, false, false], &[true, true, false, false]).unwrap(), 1.0);
    assert_eq!(f1(&[false; 4], &[true, true, false, false]).unwrap(), 0.0);
    // tp 2, fp 2, fn 0: p = 0.5, r = 1
    let v = f1(&[true; 4], &[true, true, false, false]).unwrap();
    assert!((v - 2.0 / 3.0).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let golds: Vec<bool> = (0..20_000).map(|i| i % 2 == 0).collect();
    let preds: Vec<bool> = golds.iter().map(|_| rng.gen_bool(0.5)).collect();
    assert!((f1(&preds, &golds).unwrap() - 0.5).abs() < 0.02);
}

#[test]
fn percent_change_sign() {
    let p = percent_change(0.91, 0.55).unwrap();
    assert!((p - -39.6).abs() < 0.05, "{p}");
    assert_eq!(percent_change(0.4, 0.5).map(|p| p.round()), Some(25.0));
    assert_eq!(percent_change(0.0, 0.5), None);
}

#[test]
fn judgment_matches_planted_labels() {
    let bench = Bench::new(&PlantedConfig::default(), 30);
    for style in [Style::Pointwise, Style::Pairwise] {
        let r = judgment_eval(&bench.planted.model, &bench.pairs(style), &vec![]).unwrap();
        assert_eq!(r.samples.len(), 60);
        assert!(r.f1 >= 0.9, "{style}: {}", r.f1);
    }
}

#[test]
fn reranking_beats_the_first_stage() {
    let bench = Bench::new(&PlantedConfig::default(), 1);
    let model = &bench.planted.model;
    let b = bench.builder();
    let opts = RerankOptions::default();
    let all = tasks(&bench, 60);
    let first = first_stage_ndcg(&all, 10).unwrap();
    let (point, runs) = rerank_all(model, &b, &all, Style::Pointwise, &vec![], &opts).unwrap();
    assert_eq!(runs.len(), all.len());
    assert!(point > first + 0.1, "{point} vs {first}");

    let few = tasks(&bench, 8);
    let (pw, _) = rerank_all(model, &b, &few, Style::Pairwise, &vec![], &opts).unwrap();
    let (pt, _) = rerank_all(model, &b, &few, Style::Pointwise, &vec![], &opts).unwrap();
    assert!(pw >= pt - 0.05, "{pw} vs {pt}");
}

#[test]
fn targeted_knockouts_hurt_more_than_random_ones() {
    let bench = Bench::new(&PlantedConfig::default(), 20);
    let model = &bench.planted.model;
    let b = bench.builder();
    let pairs = bench.pairs(Style::Pointwise);
    let mut grids = BTreeMap::new();
    for g in PositionGroup::STANDARD {
        grids.insert(g, trace_heads(model, &pairs, g, &TraceOptions::default()).unwrap());
    }
    let plan = KnockoutPlan::standard(5, 20, &[0, 1, 2]);
    let rows = plan.resolve(model, &grids).unwrap();
    let ranking = tasks(&bench, 6);
    let mut data = EvalData {
        ranking: Some(&ranking),
        ranking_styles: vec![Style::Pointwise],
        ..EvalData::default()
    };
    data.judgment.insert(Style::Pointwise, &pairs[..]);
    let report = knockout_eval(model, &b, &rows, &data, &RerankOptions::default()).unwrap();
    assert_eq!(report.rows.len(), 1 + rows.len());
    assert!(report.to_table().contains("Mixed-20"));

    let value = |name: &str, task: Task| {
        let r = report.rows.iter().find(|r| r.name == name).unwrap();
        r.cells.iter().find(|c| c.task == task).unwrap().value
    };
    let random = report.rows.iter().find(|r| r.name == "Random-20").unwrap();
    assert_eq!(random.cells[0].per_seed.len(), 3);
    for task in [Task::Judgment, Task::Reranking] {
        assert!(value("Mixed-20", task) < value("Random-20", task));
        assert!(value("Last-5", task) < value("Full model", task));
    }
}

#[test]
fn empty_plan_reproduces_the_full_model() {
    let bench = Bench::new(&PlantedConfig::default(), 10);
    let model = &bench.planted.model;
    let pairs = bench.pairs(Style::Pairwise);
    let mut data = EvalData::default();
    data.judgment.insert(Style::Pairwise, &pairs[..]);
    let rows = KnockoutPlan::empty().resolve(model, &BTreeMap::new()).unwrap();
    let report = knockout_eval(model, &bench.builder(), &rows, &data, &RerankOptions::default()).unwrap();
    assert_eq!(report.rows.len(), 1);
    let direct = judgment_eval(model, &pairs, &vec![]).unwrap().f1;
    assert_eq!(report.rows[0].cells[0].value, direct);
    assert!(report.first_stage_ndcg.is_none());
}

#[test]
fn plan_rows_reject_unknown_heads_and_missing_grids() {
    let bench = Bench::new(&PlantedConfig::default(), 1);
    let model = &bench.planted.model;
    let bad = KnockoutPlan {
        rows: vec![PlanRow {
            name: "x".into(),
            selection: Selection::Heads {
                heads: vec![(relpatch::model::HeadId::new(99, 0), PositionGroup::All)],
            },
        }],
    };
    assert!(bad.resolve(model, &BTreeMap::new()).is_err());
    assert!(KnockoutPlan::standard(5, 5, &[0]).resolve(model, &BTreeMap::new()).is_err());
}
