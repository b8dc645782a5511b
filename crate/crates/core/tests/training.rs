use maskwright::autodiff::Tape;
use maskwright::eval::{classification_accuracy, evaluate, fidelity_delta, masked_predictions, task_metric, Metric};
use maskwright::mask::MaskedModel;
use maskwright::nn::ModelGraph;
use maskwright::objectives::RegularizerConfig;
use maskwright::presets::preset;
use maskwright::tasks::{generate, LabeledDataset, TaskKind, TaskSpec};
use maskwright::train::{task_loss, train_base, train_explainer, TrainConfig};

struct Fixture {
    base: ModelGraph,
    train: LabeledDataset,
    test: LabeledDataset,
    masked: MaskedModel,
    explainer_cfg: TrainConfig,
}

fn patch_fixture(n: usize) -> Fixture {
    let spec = TaskSpec::new(TaskKind::PlantedPatch, n, 31);
    let p = preset(&spec, 31).unwrap();
    let (train, test) = generate(&spec).unwrap().train_test_split(0.25).unwrap();
    let mut base = p.base_model(31).unwrap();
    train_base(&mut base, &train, &p.base_train).unwrap();
    let masked = p.masked_model(base.clone(), &train.example_shape(), 32).unwrap();
    Fixture { base, train, test, masked, explainer_cfg: p.explainer_train }
}

#[test]
fn explainer_training_on_patches() {
    let f = patch_fixture(600);
    let base_acc = classification_accuracy(&f.base, &f.test).unwrap();
    assert!(base_acc > 0.8, "{base_acc}");

    let frozen = f.base.checksum();
    let short = TrainConfig { epochs: 6, ..f.explainer_cfg.clone() };

    let mut free = f.masked.clone();
    let explainer_before = free.explainer().checksum();
    let cfg = TrainConfig { reg: RegularizerConfig::default(), ..short.clone() };
    train_explainer(&mut free, &f.train, &cfg).unwrap();
    assert_eq!(free.base().checksum(), frozen);
    assert_ne!(free.explainer().checksum(), explainer_before);
    let r_free = evaluate(&f.base, &mut free, &f.test, 3).unwrap();
    assert!(r_free.masked_metric >= r_free.base_metric - 0.01, "{r_free:?}");

    let mut reg = f.masked.clone();
    train_explainer(&mut reg, &f.train, &short).unwrap();
    assert_eq!(reg.base().checksum(), frozen);
    let r_reg = evaluate(&f.base, &mut reg, &f.test, 3).unwrap();
    assert!(r_reg.mean_mask < r_free.mean_mask, "{} vs {}", r_reg.mean_mask, r_free.mean_mask);
}

#[test]
fn forced_masks_bound_fidelity() {
    let mut f = patch_fixture(400);
    let base = task_metric(&maskwright::eval::base_predictions(&f.base, &f.test).unwrap(), f.test.targets()).unwrap();
    let masked_metric = |mm: &mut MaskedModel| -> Metric {
        let (out, _) = masked_predictions(mm, &f.test).unwrap();
        task_metric(&out, f.test.targets()).unwrap()
    };
    f.masked.force_mask(Some(1.0));
    assert_eq!(fidelity_delta(base, masked_metric(&mut f.masked)).unwrap(), 0.0);
    f.masked.force_mask(Some(0.0));
    assert!(fidelity_delta(base, masked_metric(&mut f.masked)).unwrap() <= 0.0);
}

#[test]
fn task_gradients_reach_only_the_explainer() {
    let spec = TaskSpec::new(TaskKind::KeywordSeq, 20, 3);
    let p = preset(&spec, 3).unwrap();
    let data = generate(&spec).unwrap();
    let mut mm = p.masked_model(p.base_model(3).unwrap(), &data.example_shape(), 4).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let batch = data.full_batch();
    let tape = Tape::new();
    let out = mm.masked_forward(&tape, batch.feed(&tape)).unwrap();
    let loss = task_loss(out.output, data.targets(), &idx).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(!out.binding.is_empty());
    mm.explainer_mut().accumulate_grads(&out.binding, &grads);
    let nonzero =
        mm.explainer().params().filter_map(|(_, p)| p.grad.as_ref()).any(|g| g.data().iter().any(|&v| v != 0.0));
    assert!(nonzero);
    // frozen parameters enter the tape as constants, so no gradient exists for them
    assert!(mm.base().params().all(|(_, p)| !p.trainable && p.grad.is_none()));
}
