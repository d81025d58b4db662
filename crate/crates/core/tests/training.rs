use foci::config::NetworkConfig;
use foci::io::WeightFile;
use foci::model::Detector;
use foci::synth::{synth_dataset, SynthConfig};
use foci::train::{checkpoint, restore, train_loop, TrainConfig, TrainState};
use foci::Error;

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        ..TrainConfig::desk()
    }
}

fn weight_bytes(det: &Detector<f32>) -> Vec<u8> {
    WeightFile::from_store(&det.store).encode()
}

fn train(det: &mut Detector<f32>, cfg: &TrainConfig, state: &mut TrainState) {
    let data = synth_dataset(&SynthConfig::desk(), 0, 12);
    train_loop(det, &data, cfg, state, |_| Ok(())).unwrap();
}

#[test]
fn resume_matches_straight_run_bit_exactly() {
    let cfg = small_config(4);
    let mut straight = Detector::<f32>::new(NetworkConfig::desk(), 7).unwrap();
    let mut state = TrainState::new(&straight);
    train(&mut straight, &cfg, &mut state);
    assert_eq!(state.history.len(), 4);

    let mut first = Detector::<f32>::new(NetworkConfig::desk(), 7).unwrap();
    let mut half = TrainState::new(&first);
    train(&mut first, &small_config(2), &mut half);
    let bytes = checkpoint(&first, &half).encode();

    let mut resumed = Detector::<f32>::new(NetworkConfig::desk(), 99).unwrap();
    let mut restored = restore(&mut resumed, WeightFile::decode(&bytes).unwrap()).unwrap();
    assert_eq!(restored.epoch, 2);
    assert_eq!(restored.adam, half.adam);
    train(&mut resumed, &cfg, &mut restored);

    assert_eq!(weight_bytes(&resumed), weight_bytes(&straight));
    assert_eq!(restored.history, state.history[2..]);
    assert_eq!(
        checkpoint(&resumed, &restored).encode(),
        checkpoint(&straight, &state).encode()
    );
}

#[test]
fn zero_epochs_leave_initialization_untouched() {
    let mut det = Detector::<f32>::new(NetworkConfig::desk(), 7).unwrap();
    let fresh = weight_bytes(&det);
    let mut state = TrainState::new(&det);
    train(&mut det, &small_config(0), &mut state);
    assert_eq!(weight_bytes(&det), fresh);
    assert!(state.history.is_empty());
}

#[test]
fn non_finite_parameter_aborts_with_batch_index() {
    let mut det = Detector::<f32>::new(NetworkConfig::desk(), 7).unwrap();
    let id = det.store.find("head.conv.bias").expect("head bias");
    det.store.value_mut(id).data_mut()[0] = f32::NAN;
    let mut state = TrainState::new(&det);
    let data = synth_dataset(&SynthConfig::desk(), 0, 8);
    let err = train_loop(&mut det, &data, &small_config(1), &mut state, |_| Ok(())).unwrap_err();
    assert!(
        matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 0 }),
        "{err}"
    );
}

#[test]
fn empty_dataset_is_rejected() {
    let mut det = Detector::<f32>::new(NetworkConfig::desk(), 7).unwrap();
    let mut state = TrainState::new(&det);
    let data = synth_dataset(&SynthConfig::desk(), 0, 0);
    let err = train_loop(&mut det, &data, &small_config(1), &mut state, |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Dataset(_)));
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let cfg = small_config(2);
    let run = || {
        let mut det = Detector::<f32>::new(NetworkConfig::desk(), 11).unwrap();
        let mut state = TrainState::new(&det);
        train(&mut det, &cfg, &mut state);
        (weight_bytes(&det), state.history)
    };
    assert_eq!(run(), run());
}

#[test]
fn loss_falls_on_a_small_set() {
    let cfg = small_config(6);
    let mut det = Detector::<f32>::new(NetworkConfig::desk(), 7).unwrap();
    let mut state = TrainState::new(&det);
    train(&mut det, &cfg, &mut state);
    let h = &state.history;
    assert!(h.iter().all(|l| l.is_finite()));
    assert!(h[h.len() - 1] < h[0], "{h:?}");
}
