use editlab::evalprof::{edit_and_evaluate, EditPlan, EditProtocol};
use editlab::harness::{prepare, ExperimentConfig, Preset};
use editlab::metatrain::{Trainer, TrainerConfig, TrainerMode};

#[test]
fn sequential_training_raises_desk_efficacy() {
    let desk = ExperimentConfig::preset(Preset::Desk);
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let prep = prepare(&desk.for_seed(seed)).unwrap();
        let config = TrainerConfig {
            mode: TrainerMode::SmeditSequential,
            steps: 2,
            eta: 0.5,
            ..prep.config.trainer.clone()
        };
        let plan = EditPlan {
            batch_size: prep.config.eval.batch_size,
            steps: 2,
            aggregation: config.aggregation,
            protocol: EditProtocol::Batch,
        };
        let mut t = Trainer::new(config, &prep.model, prep.train_split()).unwrap();
        let eval = |t: &Trainer| {
            edit_and_evaluate(&prep.model, t.editors().editors(), prep.test_split(), &plan)
                .unwrap()
                .argmax
                .efficacy
        };
        before.push(eval(&t));
        t.train().unwrap();
        after.push(eval(&t));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&after) > mean(&before), "before {before:?} after {after:?}");
}
