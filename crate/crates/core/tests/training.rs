use vsearch::ranking::data::{generate, ImageSetConfig};
use vsearch::ranking::train::{evaluate_boxes, smoothed_history, train, TrainConfig, TrainState};

fn small_set() -> vsearch::ranking::data::TripletImageSet {
    generate(&ImageSetConfig { triplets: 40, height: 16, width: 16, ..Default::default() }).unwrap()
}

#[test]
fn zero_learning_rates_leave_parameters_unchanged() {
    let set = small_set();
    let cfg = TrainConfig { steps: 20, learning_rate: 0.0, mask_learning_rate: 0.0, ..Default::default() };
    let init = TrainState::init(&set.images, &cfg).unwrap();
    let trained = train(&set, &cfg).unwrap();
    assert_eq!(trained.embedder, init.embedder);
    assert_eq!(trained.masks, init.masks);
    assert_eq!(trained.step, 20);
}

#[test]
fn training_reduces_loss() {
    let set = small_set();
    let cfg = TrainConfig { steps: 200, sharpness: 100.0, ..Default::default() };
    let state = train(&set, &cfg).unwrap();
    let blocks = smoothed_history(&state.loss_history, 4);
    assert!(blocks.last().unwrap() < blocks.first().unwrap(), "{blocks:?}");
}

#[test]
fn training_is_deterministic() {
    let set = small_set();
    let cfg = TrainConfig { steps: 30, ..Default::default() };
    assert_eq!(train(&set, &cfg).unwrap(), train(&set, &cfg).unwrap());
}

#[test]
fn learned_boxes_move_toward_planted_objects() {
    let set = generate(&ImageSetConfig { triplets: 60, ..Default::default() }).unwrap();
    let cfg = TrainConfig { steps: 300, sharpness: 100.0, ..Default::default() };
    let before = evaluate_boxes(&set.images, &TrainState::init(&set.images, &cfg).unwrap().masks);
    let after = evaluate_boxes(&set.images, &train(&set, &cfg).unwrap().masks);
    assert!(after.mean_iou > before.mean_iou, "{before:?} -> {after:?}");
}
