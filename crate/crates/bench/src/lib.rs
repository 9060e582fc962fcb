//! Shared fixtures for the criterion benches in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skyaoi_core::env::{reset, step};
use skyaoi_core::{
    EncoderConfig, JointAction, Learner, MixerConfig, ObservationSet, TrainConfig, Variant, World, WorldConfig,
};

/// The default 3-UAV / 6-user world.
pub fn world() -> WorldConfig {
    WorldConfig::default()
}

/// `count` observation sets from random mid-episode states.
pub fn observations(world: &WorldConfig, count: usize, seed: u64) -> Vec<ObservationSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut st = reset(world, 0);
            for _ in 0..rng.gen_range(0..40) {
                let a = JointAction((0..world.num_uavs).map(|_| rng.gen_range(0..8)).collect());
                step(&mut st, &a, world).expect("step within horizon");
            }
            World {
                config: world.clone(),
                state: st,
            }
            .observations()
        })
        .collect()
}

/// A learner with default widths whose replay buffer already holds
/// enough transitions for a full batch.
pub fn warm_learner(variant: Variant) -> Learner {
    let world = world();
    let train = TrainConfig {
        total_episodes: 2,
        warmup_episodes: 2,
        ..TrainConfig::default()
    };
    let mut learner = Learner::new(
        world.clone(),
        EncoderConfig::for_world(&world, variant),
        MixerConfig::default(),
        train,
    )
    .expect("valid learner");
    learner.train(|_, _| Ok(())).expect("warm-up episodes");
    learner
}
