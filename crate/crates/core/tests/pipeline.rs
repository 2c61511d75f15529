use agrp::checkpoint::{load_checkpoint, save_checkpoint};
use agrp::data::{gen_synthetic, read_dataset, write_dataset, SyntheticSpec, Truth};
use agrp::eval::{accuracy, attention_heatmap, localization, rerank};
use agrp::model::ExtractorSpec;
use agrp::trainer::{instances_per_batch, train, TrainConfig, Variant};

fn config(variant: Variant, k: usize) -> TrainConfig {
    TrainConfig {
        variant,
        group_size: k,
        lr0: 0.7,
        epochs: 4,
        batch_instances: instances_per_batch(12, k),
        negatives_per_epoch: if variant.regularizer() { 20 } else { 0 },
        seed: 3,
        extractor: ExtractorSpec::Conv { channels: vec![8] },
        ..TrainConfig::default()
    }
}

#[test]
fn stored_dataset_and_checkpoint_reproduce_metrics() {
    let ds = gen_synthetic(&SyntheticSpec::new(3, 40, 14, 0.4, 11)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path().join("data"), &ds).unwrap();
    let stored = read_dataset(dir.path().join("data")).unwrap();
    assert_eq!(stored.train, ds.train);
    assert_eq!(stored.test, ds.test);

    let (model, history) = train(&config(Variant::RgtAtR, 2), &stored).unwrap();
    assert_eq!(history.epochs.len(), 4);
    assert!(model.is_finite());

    let path = dir.path().join("m.agrp");
    save_checkpoint(&path, &model).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(accuracy(&back, &ds.test).unwrap(), accuracy(&model, &ds.test).unwrap());
    let (a, b) = (rerank(&back, &ds.train).unwrap(), rerank(&model, &ds.train).unwrap());
    assert_eq!(a.mean_average_precision, b.mean_average_precision);
    let img = &ds.test[0].pixels;
    assert_eq!(attention_heatmap(&back, img).unwrap(), attention_heatmap(&model, img).unwrap());
}

#[test]
fn training_learns_the_clean_task() {
    let ds = gen_synthetic(&SyntheticSpec::new(3, 200, 14, 0.0, 2)).unwrap();
    let cfg = TrainConfig {
        epochs: 15,
        extractor: ExtractorSpec::Conv { channels: vec![16] },
        ..config(Variant::ApAt, 1)
    };
    let (model, history) = train(&cfg, &ds).unwrap();
    let first = history.epochs.first().unwrap().l_class;
    let last = history.epochs.last().unwrap().l_class;
    assert!(last < first, "{first} → {last}");
    let acc = accuracy(&model, &ds.test).unwrap();
    assert!(acc > 0.9, "{acc}");

    let clean: Vec<_> = ds.test.iter().filter(|i| i.truth == Truth::Correct).cloned().collect();
    assert!(localization(&model, &clean).unwrap().ratio() > 1.0);
}

#[test]
fn same_seed_same_model() {
    let ds = gen_synthetic(&SyntheticSpec::new(3, 20, 14, 0.4, 5)).unwrap();
    for (v, k) in [(Variant::Ap, 1), (Variant::Rgt, 3), (Variant::RgtAtR, 2), (Variant::ApAtR, 1)] {
        let (a, _) = train(&config(v, k), &ds).unwrap();
        let (b, _) = train(&config(v, k), &ds).unwrap();
        assert_eq!(a, b, "{v}");
    }
}
