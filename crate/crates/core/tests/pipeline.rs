use procdit_core::dit::{
    load_checkpoint, load_outputs, sample, save_checkpoint, tensor_to_image, write_outputs, DitModel, ModelConfig,
};
use procdit_core::metrics::{evaluate_sequence, LlmScorer, ToyEmbedder};
use procdit_core::text::{strip_step_tag, RecipeSpec};

fn recipe() -> RecipeSpec {
    RecipeSpec::new(
        "a plate with 3 shapes",
        [
            "add red circle at top left",
            "add blue square at center",
            "add green triangle at bottom right",
        ],
    )
}

#[test]
fn checkpoint_roundtrip_reproduces_samples() {
    let dir = tempfile::tempdir().unwrap();
    let model = DitModel::random(ModelConfig::tiny()).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, 0).unwrap();
    let loaded = load_checkpoint(&path).unwrap().model;
    let a = sample(&model, &recipe(), 4).unwrap();
    let b = sample(&loaded, &recipe(), 4).unwrap();
    assert_eq!(a.images.len(), 3);
    for (x, y) in a.images.iter().zip(&b.images) {
        assert!(x.bit_eq(y));
    }
    assert_eq!(a.manifest, b.manifest);
}

#[test]
fn written_sequence_evaluates_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let model = DitModel::random(ModelConfig::tiny()).unwrap();
    let result = sample(&model, &recipe(), 9).unwrap();
    let written = write_outputs(dir.path(), &result).unwrap();
    assert_eq!(written.step_files.len(), 3);

    let (manifest, images) = load_outputs(dir.path()).unwrap();
    assert_eq!(manifest, written.manifest);
    for (img, t) in images.iter().zip(&result.images) {
        assert_eq!(img, &tensor_to_image(t).unwrap());
    }
    let captions: Vec<String> = manifest
        .recipe
        .steps
        .iter()
        .map(|s| strip_step_tag(&s.text).to_string())
        .collect();
    assert_eq!(captions[0], "add red circle at top left");
    let report = evaluate_sequence(
        "self",
        &images,
        &captions,
        &images,
        &ToyEmbedder::new(0),
        Some(&LlmScorer::Mock { seed: 0 }),
    )
    .unwrap();
    assert_eq!(report.csc_value, 0.0);
    assert_eq!(report.step_count_diff, 0);
    assert!(report.llm.is_some());
}

#[test]
fn zero_lambda_matches_disabled_context_fusion() {
    let cfg = ModelConfig {
        lambda: 0.0,
        ..ModelConfig::tiny()
    };
    let on = DitModel::random(cfg.clone()).unwrap();
    let off = DitModel::random(ModelConfig { cscc: false, ..cfg }).unwrap();
    let a = sample(&on, &recipe(), 2).unwrap();
    let b = sample(&off, &recipe(), 2).unwrap();
    for (x, y) in a.images.iter().zip(&b.images) {
        assert!(x.bit_eq(y));
    }
    let with_context = DitModel::random(ModelConfig {
        lambda: 0.5,
        ..ModelConfig::tiny()
    })
    .unwrap();
    let c = sample(&with_context, &recipe(), 2).unwrap();
    assert!(!a.images[0].bit_eq(&c.images[0]));
}
