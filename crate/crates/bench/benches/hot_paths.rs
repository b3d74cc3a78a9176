use std::hint::black_box;

use adgen_bench::bench_world;
use adgen_core::catalog::{filter_pairs, ClickRecord, PairThresholds};
use adgen_core::numerics::{Module, Tape};
use adgen_core::policy::freeze_reference;
use adgen_core::prefopt::{build_tuples, total_loss_on_tape, DpoConfig, EpochInputs, OracleJudge, Strategy};
use adgen_core::reward::{RewardParams, RmLossConfig};
use criterion::{criterion_group, criterion_main, Criterion};

fn benches(c: &mut Criterion) {
    let world = bench_world();
    let product = &world.catalog[0];
    let context = world.contexts[0].features();
    let policy = world.initial_policy();
    let tokens = policy.greedy(&context).unwrap();

    c.bench_function("render", |b| b.iter(|| world.render(black_box(product), black_box(&tokens)).unwrap()));
    c.bench_function("policy_log_prob", |b| b.iter(|| policy.log_prob(black_box(&context), black_box(&tokens)).unwrap()));
    c.bench_function("policy_sample", |b| {
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            policy.sample(black_box(&context), 1.0, seed).unwrap()
        })
    });

    let records = world.click_records().unwrap();
    c.bench_function("filter_pairs", |b| {
        b.iter(|| filter_pairs(black_box(&records), PairThresholds::TRAIN, ClickRecord::ctr))
    });

    let (train, _) = world.pairs(&records).unwrap();
    let examples = world.rm_examples(&train[..16.min(train.len())]).unwrap();
    let reward = RewardParams::init(world.config.reward_model.clone(), 3);
    let ex = &examples[0];
    c.bench_function("rm_compare_pair", |b| {
        b.iter(|| reward.compare_pair(black_box(&ex.left_image), black_box(&ex.right_image), black_box(&ex.prompt_embedding)).unwrap())
    });
    let loss_cfg = RmLossConfig::default();
    c.bench_function("rm_loss_backward_batch16", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let vars = reward.bind(&mut tape);
            let loss = reward.rm_loss_on_tape(&mut tape, &vars, black_box(&examples), &loss_cfg).unwrap();
            tape.backward(loss).unwrap()
        })
    });

    let judge = OracleJudge { oracle: &world.oracle };
    let inputs = EpochInputs {
        catalog: &world.catalog,
        contexts: &world.contexts,
        train_ids: &world.train_ids,
        prompts: &world.policy_prompts,
        space: &world.space,
        judge: &judge,
    };
    let config = DpoConfig {
        products_per_epoch: 8,
        ..DpoConfig::default()
    };
    let (tuples, _) = build_tuples(&policy, &inputs, &config, 5).unwrap();
    let reference = freeze_reference(&policy);
    let tuple = &tuples[0];
    let dpo_only = config.clone().with_strategy(Strategy::Dpo).flags();
    for (name, flags) in [("dpo_loss_backward", dpo_only), ("pcpo_loss_backward", config.flags())] {
        c.bench_function(name, |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let vars = policy.bind(&mut tape);
                let (total, _, _) =
                    total_loss_on_tape(&policy, &mut tape, &vars, &reference, black_box(tuple), config.beta, flags).unwrap();
                tape.backward(total).unwrap()
            })
        });
    }
}

criterion_group!(hot_paths, benches);
criterion_main!(hot_paths);
