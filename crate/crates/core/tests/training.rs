use std::collections::HashMap;

use wchamfer::retrieval::{recall_at_k, Qrels};
use wchamfer::scoring::{extract_features, rerank};
use wchamfer::theory::{generate_fewshot, FewShotSpec};
use wchamfer::trainer::{blended_loss_grad, ce_grad, ce_loss, mine_hard_negatives, train, TrainConfig, TrainQuery};
use wchamfer::weights::{backfill_unseen, compute_idf, count_doc_freq, SpecialPolicy};
use wchamfer::{FeatureVector, Vocab, WeightTable};

fn small_task() -> (wchamfer::theory::FewShotTask, Vec<TrainQuery>) {
    let spec = FewShotSpec {
        vocab_size: 60,
        n_docs: 120,
        n_train: 40,
        n_valid: 0,
        n_test: 20,
        pool_size: 30,
        seed: 2,
        ..Default::default()
    };
    let task = generate_fewshot(&spec).unwrap();
    let queries = task
        .train
        .iter()
        .map(|l| {
            let q = task.queries.get(&l.qid).unwrap();
            let features: HashMap<String, FeatureVector> = l
                .positives
                .iter()
                .chain(&l.negative_pool)
                .map(|d| (d.clone(), extract_features(q, task.docs.get(d).unwrap()).unwrap()))
                .collect();
            TrainQuery::new(l.clone(), features).unwrap()
        })
        .collect();
    (task, queries)
}

#[test]
fn training_lowers_loss_and_keeps_sum() {
    let (_, queries) = small_task();
    let config = TrainConfig {
        lambda2_size: 30,
        ..Default::default()
    };
    let out = train(&queries, &config, &WeightTable::ones(60)).unwrap();
    assert_eq!(out.log.len(), 101);
    assert!(out.final_loss() < out.initial_loss());
    assert!((out.weights.sum() - 1.0).abs() < 1e-9);
    for t in 0..60u32 {
        if !out.seen.contains(&wchamfer::TokenId(t)) {
            assert_eq!(out.weights.as_slice()[t as usize], 0.0);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let (_, queries) = small_task();
    let config = TrainConfig {
        lambda2_size: 30,
        iterations: 20,
        ..Default::default()
    };
    let a = train(&queries, &config, &WeightTable::ones(60)).unwrap();
    let b = train(&queries, &config, &WeightTable::ones(60)).unwrap();
    assert_eq!(
        a.weights.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.weights.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn learned_weights_beat_uniform_on_held_out_queries() {
    let (task, queries) = small_task();
    let config = TrainConfig {
        lambda2_size: 30,
        ..Default::default()
    };
    let out = train(&queries, &config, &WeightTable::ones(60)).unwrap();
    let df = count_doc_freq(&task.corpus, 60, 1.0, 0).unwrap();
    let idf = compute_idf(&df, &Vocab::new(60), SpecialPolicy::Zero).unwrap();
    let learned = backfill_unseen(&out.weights, &idf, &out.seen).unwrap();
    assert!((learned.sum() - 1.0).abs() < 1e-9);

    let recall = |w: &WeightTable, qrels: &Qrels| -> f64 {
        task.test_candidates
            .iter()
            .map(|(qid, list)| {
                let ids: Vec<&str> = list.ids().collect();
                let ranked = rerank(task.queries.get(qid).unwrap(), &ids, &task.docs, w).unwrap();
                recall_at_k(&ranked, qrels, qid, 10).unwrap()
            })
            .sum::<f64>()
    };
    let uniform = recall(&WeightTable::ones(60), &task.test_qrels);
    let trained = recall(&learned, &task.test_qrels);
    assert!(trained > uniform, "learned {trained} vs uniform {uniform}");
}

#[test]
fn blend_endpoints_reduce_to_single_losses() {
    let (_, queries) = small_task();
    let q = &queries[0];
    let w = WeightTable::from_vec((0..60).map(|i| 0.01 + 0.001 * i as f64).collect());
    let (l1, l2) = mine_hard_negatives(q, &w, 5, 20).unwrap();
    assert_eq!(&l2[..5], &l1[..]);

    let (loss, grad) = blended_loss_grad(q, &l1, &l2, 1.0, &w).unwrap();
    assert!((loss - ce_loss(q, &l1, &w).unwrap()).abs() < 1e-12);
    for (a, b) in grad.iter().zip(ce_grad(q, &l1, &w).unwrap()) {
        assert!((a - b).abs() < 1e-12);
    }
    let (loss, _) = blended_loss_grad(q, &l1, &l2, 0.0, &w).unwrap();
    assert!((loss - ce_loss(q, &l2, &w).unwrap()).abs() < 1e-12);
}
