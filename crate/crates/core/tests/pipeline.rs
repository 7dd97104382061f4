use panelsel::data::{generate_synthetic, load_csv, split, LoadOptions, Nonlinearity, SynthSpec};
use panelsel::trainer::{eval_selection, evaluate, train};
use panelsel::{Checkpoint, ModelConfig, TaskSpec, TrainConfig};

fn spec() -> SynthSpec {
    SynthSpec {
        n: 240,
        d: 20,
        g: 4,
        tasks: vec![
            TaskSpec::classification("a", 3),
            TaskSpec::classification("b", 3),
        ],
        shared_fraction: 0.5,
        noise_sigma: 0.3,
        nonlinearity: Nonlinearity::Linear,
        missing_rate: vec![0.0, 0.3],
        seed: 11,
    }
}

#[test]
fn csv_checkpoint_and_evaluation_round_trip() {
    let original = generate_synthetic(&spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    original.write_csv(&csv).unwrap();
    let mut loaded = load_csv(&csv, &["a", "b"], &LoadOptions::default()).unwrap();
    assert_eq!(loaded.x, original.x);
    assert_eq!(loaded.labels, original.labels);
    loaded.ground_truth = original.ground_truth.clone();

    let ds = split(&loaded, 4);
    let tc = TrainConfig {
        epochs: 12,
        batch_size: 32,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut mc = ModelConfig::with_defaults(
        20,
        4,
        ds.task_specs(),
        tc.total_steps(ds.train_rows().len()),
    )
    .unwrap();
    mc.encoder_layers = vec![16];
    mc.latent_dim = 8;
    let (params, report) = train(&ds, &mc, &tc).unwrap();

    let path = dir.path().join("checkpoint.json");
    Checkpoint::new(mc.clone(), params).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let selected = eval_selection(&ck.params, &ck.config);
    assert_eq!(selected, report.selected_features);
    let metrics = evaluate(&ck.params, &ck.config, &ds, &ds.test_rows(), &selected).unwrap();
    assert_eq!(metrics, report.final_metrics);
    assert_eq!(report.k_trace.last(), Some(&4));
    let b = metrics.task("b").unwrap();
    assert!(b.n_evaluated < ds.test_rows().len());
}
