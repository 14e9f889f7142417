//! Sanity trend on the synthetic benchmark: under a 5k-step schedule the first
//! three validation points improve strictly for at least two of three seeds.

use eps_seg::config::{load_dataset, RunConfig, CACHE_ENV};
use eps_seg::data::{make_batches, BatchConfig};
use eps_seg::inference::InferenceConfig;
use eps_seg::model::{EpsSeg, TrainBatch};
use eps_seg::trainer::{train_step, validate, TrainState};

const INTERVAL: u64 = 100;

fn first_validation_points(seed: u64) -> Vec<f64> {
    let mut config = RunConfig::default();
    config.train.steps = 5000;
    config.train.seed = seed;
    let data = load_dataset(&config, seed).unwrap();
    let model = EpsSeg::new(&config.model).unwrap();
    let t = &config.train;
    let batches = BatchConfig {
        batch_size: t.batch_size,
        unlabeled_fraction: t.unlabeled_fraction,
        patch_side: config.model.patch_side,
        mask: t.mask,
        seed,
    };
    let stream = make_batches(&data.train, &data.labels, batches).unwrap();
    let mut state = TrainState::new(&model, seed);
    let mut points = Vec::new();
    while points.len() < 3 {
        let batch = TrainBatch::from_samples(&stream.batch_at(state.step)).unwrap();
        train_step(&model, &mut state, &batch, t).unwrap();
        if state.step % INTERVAL == 0 {
            let eval = InferenceConfig { stride: 4, ..InferenceConfig::default() };
            points.push(validate(&model, &state.params, &data.test, &eval).unwrap().mean_dice);
        }
    }
    points
}

#[test]
fn validation_dice_improves_early_in_a_long_run() {
    // SAFETY: no other thread reads the environment yet.
    unsafe { std::env::set_var(CACHE_ENV, std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("eps-seg-cache")) };
    let runs: Vec<Vec<f64>> = (0..3).map(first_validation_points).collect();
    let improving = runs.iter().filter(|p| p.windows(2).all(|w| w[1] > w[0])).count();
    println!("validation Dice at steps 100/200/300: {runs:?}");
    assert!(improving >= 2, "{runs:?}");
}
