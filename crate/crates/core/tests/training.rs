use dpenet::data::{generate_synthetic_dataset, split_dataset, DatasetSplit, InMemoryDataset};
use dpenet::train::{evaluate_samples, train_loop, TrainConfig};
use dpenet::{NetConfig, Network};

fn tiny_net() -> NetConfig {
    NetConfig {
        stage_widths: vec![4, 8],
        input_hw: (32, 32),
        ..NetConfig::default()
    }
}

fn dataset(n: usize) -> (InMemoryDataset<f32>, DatasetSplit) {
    let ds = InMemoryDataset::new(generate_synthetic_dataset(n, (32, 32), 5).unwrap()).unwrap();
    let split = split_dataset(&ds.ids(), 5).unwrap();
    (ds, split)
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let (ds, split) = dataset(10);
    let mut net = Network::<f32>::build(&tiny_net(), 1).unwrap();
    let before = net.store().trainable_values();
    let cfg = TrainConfig {
        epochs: 1,
        lr: 0.0,
        eval_every: 0,
        ..TrainConfig::default()
    };
    train_loop(&mut net, &ds, &split, &cfg).unwrap();
    for (a, b) in before.iter().zip(net.store().trainable_values()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn zero_learning_rate_without_shuffle_gives_constant_loss() {
    let (ds, split) = dataset(10);
    let mut net = Network::<f32>::build(&tiny_net(), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        lr: 0.0,
        shuffle: false,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let log = train_loop(&mut net, &ds, &split, &cfg).unwrap();
    let first = log.epochs[0].loss;
    assert!(log.epochs.iter().all(|r| r.loss.to_bits() == first.to_bits()));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let run = || {
        let (ds, split) = dataset(20);
        let mut net = Network::<f32>::build(&tiny_net(), 9).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 9,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let log = train_loop(&mut net, &ds, &split, &cfg).unwrap();
        (log.step_losses, net.store().trainable_values())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert!(a.len() >= 3);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(pa, pb);
}

#[test]
fn training_reduces_the_loss() {
    let (ds, split) = dataset(10);
    let mut net = Network::<f32>::build(&tiny_net(), 2).unwrap();
    let cfg = TrainConfig {
        epochs: 15,
        lr: 1e-2,
        eval_every: 5,
        ..TrainConfig::default()
    };
    let log = train_loop(&mut net, &ds, &split, &cfg).unwrap();
    assert!(log.epochs.last().unwrap().loss < log.epochs[0].loss);
    assert!(log.epochs[4].val.is_some() && log.epochs[3].val.is_none());
    let report = evaluate_samples(&mut net, ds.samples(), 0.5).unwrap();
    assert!(report.miou <= report.mdice);
    assert!(log.to_csv().lines().nth(1).unwrap().ends_with(",,"));
}
