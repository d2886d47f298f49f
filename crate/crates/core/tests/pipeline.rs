use convexlab_core::data::{synthetic_binary, synthetic_regression, SyntheticFn};
use convexlab_core::network::{Activation, MlpModel, OutputMode};
use convexlab_core::trainer::{evaluate, grid_search, train, GridSpec, Strategy, TrainConfig};

fn config(strategy: Strategy) -> TrainConfig {
    let mut c = TrainConfig::new(strategy);
    c.epochs = 8;
    c.batch_size = 10;
    c.seed = 5;
    c
}

#[test]
fn every_strategy_is_bit_reproducible() {
    let train_set = synthetic_regression(SyntheticFn::Peak, 40, 0.01, 1).unwrap();
    let val_set = synthetic_regression(SyntheticFn::Peak, 20, 0.01, 2).unwrap();
    let model = MlpModel::init(&[1, 6, 1], Activation::Tanh, OutputMode::IdentitySquared, 3).unwrap();
    for strategy in [Strategy::Ce, Strategy::NraeFixed, Strategy::Scheduled, Strategy::Anrat] {
        let c = config(strategy);
        let a = train(&c, &model, &train_set, &val_set).unwrap();
        let b = train(&c, &model, &train_set, &val_set).unwrap();
        assert!(a.same_run(&b), "{strategy}");
        assert_eq!(a.best_model.serialize(), b.best_model.serialize());
        for r in &a.records {
            assert!(r.lambda >= 1e-3 && r.val_error_rate.is_finite());
        }
        let mut other_seed = c.clone();
        other_seed.seed = 6;
        let d = train(&other_seed, &model, &train_set, &val_set).unwrap();
        assert!(!a.same_run(&d), "{strategy}: seed must matter");
    }
}

#[test]
fn saved_best_model_reloads_with_identical_metrics() {
    let data = synthetic_binary(60, 0.2, 4).unwrap();
    let model = MlpModel::init(&[1, 4, 1], Activation::Sigmoid, OutputMode::SigmoidBinaryCe, 2).unwrap();
    let report = train(&config(Strategy::Anrat), &model, &data, &data).unwrap();
    let reloaded = MlpModel::deserialize(&report.best_model.serialize()).unwrap();
    let a = evaluate(&report.best_model, &data).unwrap();
    let b = evaluate(&reloaded, &data).unwrap();
    assert_eq!(a, b);
    assert!(a.error_rate <= 0.5);
}

#[test]
fn default_grid_has_nine_deterministically_ranked_runs() {
    let train_set = synthetic_regression(SyntheticFn::Sine, 30, 0.0, 7).unwrap();
    let val_set = synthetic_regression(SyntheticFn::Sine, 15, 0.0, 8).unwrap();
    let model = MlpModel::init(&[1, 5, 1], Activation::Tanh, OutputMode::IdentitySquared, 1).unwrap();
    let mut c = config(Strategy::Anrat);
    c.epochs = 4;
    let first = grid_search(&c, &GridSpec::default(), &model, &train_set, &val_set).unwrap();
    let second = grid_search(&c, &GridSpec::default(), &model, &train_set, &val_set).unwrap();
    assert_eq!(first.runs.len(), 9);
    assert_eq!(first.ranking, second.ranking);
    assert_eq!(first.summary_csv().lines().count(), 10);
    let mut sorted = first.ranking.clone();
    sorted.sort();
    assert_eq!(sorted, (0..9).collect::<Vec<_>>());
}
