use irloc_core::descriptor::DescriptorKind;
use irloc_core::eval::{train_sim_vocabulary, SimTraining};
use irloc_core::simgen::Scenario;
use irloc_core::vocab::{TrainParams, Vocabulary};

/// A k=8, L=4 vocabulary trained on every third frame pair of the default
/// training worlds; quick enough for tests.
pub fn small_vocabulary(sc: &Scenario) -> Vocabulary {
    let training = SimTraining {
        frame_stride: 3,
        params: TrainParams {
            k: 8,
            levels: 4,
            seed: 1,
            max_iters: 8,
        },
        ..SimTraining::default()
    };
    train_sim_vocabulary(sc, &training).expect("vocabulary")
}

#[allow(dead_code)]
pub fn float_scenario(seed: u64) -> Scenario {
    Scenario::loop_pair(seed, DescriptorKind::Float)
}
