//! Scratch experiment (to be folded into the acceptance suite).

use std::time::Instant;

use erra_core::config::{parse_config, Ablation, Config};
use erra_core::data::synth::{generate, SynthConfig};
use erra_core::data::{split_dataset, DatasetSplit, Vocabulary};
use erra_core::generation::greedy_decode;
use erra_core::model::InputSequence;
use erra_core::pipeline::{Artifacts, FeatureStore};
use erra_core::retrieval::{CorpusIndex, IndexMode};
use erra_core::training::{evaluate_loss, init_params, train_epoch, AdamState};

fn env_or(name: &str, default: &str) -> String {
    std::env::var(name).unwrap_or_else(|_| default.to_string())
}

fn base_config(d: usize) -> Config {
    let d = env_or("P_D", &d.to_string());
    let layers = env_or("P_LAYERS", "1");
    let lr = env_or("P_LR", "0.003");
    let batch = env_or("P_BATCH", "50");
    let ffn = env_or("P_FFN", "64");
    parse_config(&format!(
        "model.d = {d}\nmodel.heads = 2\nmodel.layers = {layers}\nmodel.ffn_dim = {ffn}\n\
         data.max_vocab = 400\ntrain.lr = {lr}\ntrain.batch_size = {batch}\n"
    ))
    .unwrap()
}

fn build_artifacts(records: Vec<erra_core::data::ReviewRecord>, split: DatasetSplit, max_vocab: usize) -> Artifacts {
    let vocab = Vocabulary::build(&split.train, max_vocab);
    let aspect_cache = records.iter().map(|r| r.aspects.clone()).collect();
    Artifacts {
        records,
        split,
        vocab,
        aspect_cache,
    }
}

fn train_variant(
    cfg: &Config,
    artifacts: &Artifacts,
    store: &FeatureStore,
    ablation: Ablation,
    seed: u64,
    epochs: usize,
) -> Vec<f64> {
    let mut cfg = cfg.clone();
    cfg.ablation = ablation;
    let encoder = erra_core::pipeline::make_encoder(&cfg).unwrap();
    let model_cfg = cfg.model_config(
        artifacts.vocab.len(),
        store.user_ids.len(),
        store.item_ids.len(),
    );
    let build = |records: &[erra_core::data::ReviewRecord], idx: &[usize]| -> Vec<InputSequence> {
        records
            .iter()
            .zip(idx)
            .map(|(r, &i)| {
                store
                    .example(r, Some(i), &artifacts.vocab, &model_cfg, cfg.aspects_n, encoder.as_ref())
                    .unwrap()
            })
            .collect()
    };
    let train = build(&artifacts.split.train, &artifacts.split.train_indices);
    let valid = build(&artifacts.split.valid, &artifacts.split.valid_indices);
    let mut params = init_params(&model_cfg, seed);
    let mut adam = AdamState::new(&model_cfg);
    let mut traj = Vec::new();
    for e in 0..epochs {
        train_epoch(
            &mut params,
            &mut adam,
            &train,
            &model_cfg,
            cfg.lr,
            seed ^ (e as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            cfg.batch_size,
            e,
        )
        .unwrap();
        if (e + 1) % 10 == 0 {
            traj.push(evaluate_loss(&params, &valid, &model_cfg).unwrap().l_g);
        }
    }
    traj
}

#[test]
#[ignore]
fn ablation_probe() {
    let t0 = Instant::now();
    let cfg = base_config(32);
    let epochs: usize = env_or("P_EPOCHS", "40").parse().unwrap();
    let mut full = Vec::new();
    let mut no_r = Vec::new();
    let mut no_a = Vec::new();
    let seed_max: u64 = env_or("P_SEEDS", "3").parse().unwrap();
    for seed in 1..=seed_max {
        let records = generate(&SynthConfig {
            users: 250,
            items: 25,
            reviews_per_user: 2,
            seed,
            rating_noise: 0.05,
        });
        let split = split_dataset(&records, (8, 1, 1), seed).unwrap();
        let artifacts = build_artifacts(records, split, cfg.max_vocab);
        let encoder = erra_core::pipeline::make_encoder(&cfg).unwrap();
        let index =
            CorpusIndex::build(&artifacts.split.train, encoder.as_ref(), IndexMode::Exact, 0)
                .unwrap();
        let store = FeatureStore::build(&artifacts, &index, encoder.as_ref(), &cfg).unwrap();
        let f = train_variant(&cfg, &artifacts, &store, Ablation::None, 1000 + seed, epochs);
        let r = train_variant(&cfg, &artifacts, &store, Ablation::NoRetrieval, 1000 + seed, epochs);
        let a = train_variant(&cfg, &artifacts, &store, Ablation::NoAspects, 1000 + seed, epochs);
        println!("seed {seed} full  traj: {:?}", f.iter().map(|x| (x*1000.0).round()/1000.0).collect::<Vec<_>>());
        println!("seed {seed} no-r  traj: {:?}", r.iter().map(|x| (x*1000.0).round()/1000.0).collect::<Vec<_>>());
        println!("seed {seed} no-a  traj: {:?}", a.iter().map(|x| (x*1000.0).round()/1000.0).collect::<Vec<_>>());
        println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
        let best = |v: &Vec<f64>| v.iter().cloned().fold(f64::INFINITY, f64::min);
        println!("seed {seed} best: full={:.4} no-r={:.4} no-a={:.4}", best(&f), best(&r), best(&a));
        full.push(best(&f));
        no_r.push(best(&r));
        no_a.push(best(&a));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "MEANS(final): full={:.4} no-retrieval={:.4} no-aspects={:.4} total {:.1}s",
        mean(&full),
        mean(&no_r),
        mean(&no_a),
        t0.elapsed().as_secs_f64()
    );
}

#[test]
#[ignore]
fn overfit_probe() {
    let t0 = Instant::now();
    let mut cfg = base_config(32);
    cfg.batch_size = 8;
    cfg.lr = 0.002;
    let records = generate(&SynthConfig {
        users: 8,
        items: 4,
        reviews_per_user: 4,
        seed: 5,
        rating_noise: 0.05,
    });
    assert_eq!(records.len(), 32);
    // All records are the train split.
    let n = records.len();
    let split = DatasetSplit {
        train: records.clone(),
        valid: records.clone(),
        test: Vec::new(),
        train_indices: (0..n).collect(),
        valid_indices: (0..n).collect(),
        test_indices: Vec::new(),
        seed: 5,
    };
    let artifacts = build_artifacts(records, split, cfg.max_vocab);
    println!("vocab size {}", artifacts.vocab.len());
    let encoder = erra_core::pipeline::make_encoder(&cfg).unwrap();
    let index = CorpusIndex::build(&artifacts.split.train, encoder.as_ref(), IndexMode::Exact, 0)
        .unwrap();
    let store = FeatureStore::build(&artifacts, &index, encoder.as_ref(), &cfg).unwrap();
    let model_cfg = cfg.model_config(
        artifacts.vocab.len(),
        store.user_ids.len(),
        store.item_ids.len(),
    );
    let examples: Vec<InputSequence> = artifacts
        .split
        .train
        .iter()
        .enumerate()
        .map(|(i, r)| {
            store
                .example(r, Some(i), &artifacts.vocab, &model_cfg, cfg.aspects_n, encoder.as_ref())
                .unwrap()
        })
        .collect();
    let mut params = init_params(&model_cfg, 7);
    let mut adam = AdamState::new(&model_cfg);
    for e in 0..500 {
        train_epoch(
            &mut params,
            &mut adam,
            &examples,
            &model_cfg,
            cfg.lr,
            5u64 ^ (e as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            cfg.batch_size,
            e,
        )
        .unwrap();
        if e % 25 == 24 {
            let l = evaluate_loss(&params, &examples, &model_cfg).unwrap();
            let mut exact = 0usize;
            for seq in &examples {
                let decoded = greedy_decode(seq, &params, &model_cfg, model_cfg.max_len).unwrap();
                if decoded == seq.tokens {
                    exact += 1;
                }
            }
            println!(
                "epoch {}: l_g={:.4} l_r={:.5} exact={} / {} ({:.1}s)",
                e + 1,
                l.l_g,
                l.l_r,
                exact,
                examples.len(),
                t0.elapsed().as_secs_f64()
            );
            if l.l_g < 0.1 && l.l_r < 0.01 && exact * 10 >= examples.len() * 9 {
                println!("criteria met at epoch {}", e + 1);
                return;
            }
        }
    }
    panic!("overfit criteria not met in 500 epochs");
}

#[test]
#[ignore]
fn channel_content_probe() {
    let cfg = base_config(32);
    let records = generate(&SynthConfig {
        users: 250,
        items: 25,
        reviews_per_user: 2,
        seed: 1,
        rating_noise: 0.05,
    });
    let split = split_dataset(&records, (8, 1, 1), 1).unwrap();
    let artifacts = build_artifacts(records, split, cfg.max_vocab);
    let encoder = erra_core::pipeline::make_encoder(&cfg).unwrap();
    let index =
        CorpusIndex::build(&artifacts.split.train, encoder.as_ref(), IndexMode::Exact, 0).unwrap();
    let store = FeatureStore::build(&artifacts, &index, encoder.as_ref(), &cfg).unwrap();
    for (rec, &idx) in artifacts.split.valid.iter().zip(&artifacts.split.valid_indices).take(8) {
        let u = store.user_idx(&rec.user).unwrap();
        let v = store.item_idx(&rec.item).unwrap();
        let sel = store
            .selection_for(u, v, 2, Some(idx), encoder.as_ref())
            .unwrap();
        println!("TARGET  : {}", rec.text);
        println!(
            "ASPECTS : {:?} scores {:?}",
            sel.pairs.iter().map(|p| p.phrase()).collect::<Vec<_>>(),
            sel.scores
        );
        println!(
            "RETR(u) : {:?}",
            store.user_retrieved[u]
                .sentences
                .iter()
                .map(|(t, s)| format!("{t} ({s:.2})"))
                .collect::<Vec<_>>()
        );
        println!(
            "RETR(v) : {:?}",
            store.item_retrieved[v]
                .sentences
                .iter()
                .take(3)
                .map(|(t, s)| format!("{t} ({s:.2})"))
                .collect::<Vec<_>>()
        );
        println!();
    }
}
