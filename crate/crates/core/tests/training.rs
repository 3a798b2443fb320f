use pln_core::branch::{ModelConfig, Pln};
use pln_core::training::{generate_dataset, GeneratorConfig, SyntheticSample, TrainConfig, Trainer};

fn micro_data(n: usize, seed: u64) -> Vec<SyntheticSample> {
    generate_dataset(&GeneratorConfig {
        n_samples: n,
        l_v: 8,
        d_raw: 4,
        n_activities: 3,
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

fn micro_model(seed: u64) -> Pln {
    Pln::new(ModelConfig {
        d_raw: 4,
        d: 8,
        vocab_size: 6,
        stages: vec![4, 8],
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn micro_train(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr,
        epochs,
        batch_size: 10,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let data = micro_data(20, 1);
    let model = micro_model(1);
    let before = model.params().clone();
    let mut tr = Trainer::new(model, micro_train(0.0, 2)).unwrap();
    tr.train(&data, &[], |_, _| Ok(())).unwrap();
    assert_eq!(tr.model().params(), &before);
}

#[test]
fn micro_run_lowers_the_joint_loss() {
    let data = micro_data(50, 2);
    let mut tr = Trainer::new(micro_model(2), micro_train(1e-2, 20)).unwrap();
    let recs = tr.train(&data, &[], |_, _| Ok(())).unwrap();
    let first = recs.first().unwrap().joint_loss;
    let last = recs.last().unwrap().joint_loss;
    assert!(last < first, "joint loss {first} -> {last}");
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = micro_data(30, 3);
    let run = || {
        let mut tr = Trainer::new(micro_model(3), micro_train(1e-2, 3)).unwrap();
        let recs = tr.train(&data[..25], &data[25..], |_, _| Ok(())).unwrap();
        (recs, tr.into_model())
    };
    let (ra, ma) = run();
    let (rb, mb) = run();
    assert_eq!(ra, rb);
    assert_eq!(ma, mb);
}

#[test]
fn resuming_reproduces_the_uninterrupted_trace() {
    let data = micro_data(30, 4);
    let mut whole = Trainer::new(micro_model(4), micro_train(1e-2, 4)).unwrap();
    let full = whole.train(&data, &[], |_, _| Ok(())).unwrap();

    let mut first = Trainer::new(micro_model(4), micro_train(1e-2, 2)).unwrap();
    first.train(&data, &[], |_, _| Ok(())).unwrap();
    let adam = first.adam_state().clone();
    let mut second = Trainer::resume(first.into_model(), micro_train(1e-2, 4), adam, 2).unwrap();
    let tail = second.train(&data, &[], |_, _| Ok(())).unwrap();
    assert_eq!(tail, full[2..]);
    assert_eq!(second.model(), whole.model());
}

#[test]
fn generator_favours_short_moments() {
    let data = generate_dataset(&GeneratorConfig {
        n_samples: 1000,
        seed: 0,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let short = data.iter().filter(|s| s.length_fraction() < 0.2).count();
    assert!(short >= 500, "{short} of 1000 shorter than 0.2");
}
