use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use skyaoi_bench::{observations, warm_learner, world};
use skyaoi_core::encoder::PolicyInput;
use skyaoi_core::env::{reset, step};
use skyaoi_core::{Graph, JointAction, Tensor, Variant};

fn env_step(c: &mut Criterion) {
    let world = world();
    let action = JointAction(vec![0, 3, 5]);
    c.bench_function("env/episode", |b| {
        b.iter(|| {
            let mut st = reset(&world, 1);
            for _ in 0..world.horizon {
                step(&mut st, &action, &world).unwrap();
            }
            st.aoi_sum()
        })
    });
}

fn policy(c: &mut Criterion) {
    let mut group = c.benchmark_group("policy");
    for (name, variant) in [("qedgix", Variant::EdgeConv), ("agg-gnn", Variant::Agg), ("qmix", Variant::None)] {
        let learner = warm_learner(variant);
        let obs = observations(&learner.world.config, 128, 7);
        let hidden = learner.policy.initial_hidden(learner.world.config.num_uavs);
        group.bench_function(format!("{name}/act"), |b| {
            b.iter(|| learner.policy.q_values(&learner.store, &obs[0], &hidden).unwrap())
        });

        let refs: Vec<_> = obs.iter().collect();
        let input = PolicyInput::build(&refs, &learner.policy.config).unwrap();
        let h = learner.policy.hidden_width();
        let batch_hidden = Tensor::zeros(&[128 * learner.world.config.num_uavs, h]);
        group.bench_function(format!("{name}/forward_backward_128"), |b| {
            b.iter_batched(
                || learner.store.clone(),
                |mut store| {
                    let mut g = Graph::new();
                    let hv = g.input(batch_hidden.clone());
                    let out = learner.policy.forward(&mut g, &store, &input, hv).unwrap();
                    let loss = g.sum(out.q);
                    g.backward(loss, &mut store).unwrap();
                    store
                },
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("learner");
    group.sample_size(20);
    for (name, variant) in [("qedgix", Variant::EdgeConv), ("qmix", Variant::None)] {
        let mut learner = warm_learner(variant);
        group.bench_function(format!("{name}/train_step"), |b| b.iter(|| learner.train_step().unwrap()));
        group.bench_function(format!("{name}/collect_episode"), |b| b.iter(|| learner.collect().unwrap().mean_aoi));
    }
    group.finish();
}

criterion_group!(benches, env_step, policy, train_step);
criterion_main!(benches);
