use std::fs;
use std::path::Path;

use softprune::{Architecture, MaskVariant, SparsityVariant};
use softprune_harness::config::DatasetFormat;
use softprune_harness::data::{self, RawImages};
use softprune_harness::{ExperimentConfig, HarnessError};

/// Writes tiny IDX files next to a config and returns the config path.
fn fixture(dir: &Path, body: &str) -> std::path::PathBuf {
    let raw = RawImages { count: 4, channels: 1, height: 28, width: 28, pixels: vec![0; 4 * 784] };
    for split in ["train", "test"] {
        data::write_idx_images(&dir.join(format!("{split}-img")), &raw, false).unwrap();
        data::write_idx_labels(&dir.join(format!("{split}-lab")), &[0, 1, 2, 3], false).unwrap();
    }
    let text = format!(
        "# fixture\ndataset.train_images = train-img\ndataset.train_labels = train-lab\n\
         dataset.test_images = test-img\ndataset.test_labels = test-lab\n{body}"
    );
    let path = dir.join("exp.conf");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn defaults_fill_unset_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&fixture(dir.path(), ""), &[]).unwrap();
    assert_eq!(cfg.dataset.format, DatasetFormat::Idx);
    assert_eq!(cfg.arch, Architecture::ConvNetS);
    assert_eq!(cfg.batch_size, 64);
    assert_eq!(cfg.epochs, 20);
    assert_eq!((cfg.mask.delta, cfg.mask.c, cfg.mask.k, cfg.mask.tau), (0.05, 0.8, 20.0, 0.5));
    assert_eq!(cfg.sparsity.s, 3.0);
    assert_eq!(cfg.sparsity.target_ratio, None);
    assert_eq!(cfg.sparsity.mask_variant(), MaskVariant::WithRelu);
    assert_eq!(cfg.schedule.decay_epochs, vec![10, 15]);
    assert_eq!(cfg.dataset.train_images, vec![dir.path().join("train-img")]);
}

#[test]
fn file_values_and_overrides_apply_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture(dir.path(), "sparsity.lambda = 2e-4\nsparsity.variant = no_relu\ntrain.epochs = 5\n");
    let cfg = ExperimentConfig::load(&path, &["train.epochs=7".into(), "sparsity.target_ratio = 0.4".into()]).unwrap();
    assert_eq!(cfg.sparsity.lambda, 2e-4);
    assert_eq!(cfg.sparsity.variant, SparsityVariant::NoRelu);
    assert_eq!(cfg.epochs, 7);
    assert_eq!(cfg.sparsity.target_ratio, Some(0.4));
}

#[test]
fn unknown_key_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture(dir.path(), "train.epoch = 3\n");
    match ExperimentConfig::load(&path, &[]) {
        Err(HarnessError::Config { line, message, .. }) => {
            assert_eq!(line, 6);
            assert!(message.contains("train.epoch"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn repeated_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture(dir.path(), "train.epochs = 3\ntrain.epochs = 4\n");
    assert!(matches!(ExperimentConfig::load(&path, &[]), Err(HarnessError::Config { line: 7, .. })));
}

#[test]
fn invalid_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture(dir.path(), "");
    for bad in ["train.batch_size=1", "model.arch=resnet", "mask.c=1.5", "sparsity.target_ratio=1", "optim.lr=abc", "bogus=1"] {
        assert!(ExperimentConfig::load(&path, &[bad.into()]).is_err(), "{bad}");
    }
}

#[test]
fn missing_paths_fail_at_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture(dir.path(), "");
    fs::remove_file(dir.path().join("test-lab")).unwrap();
    assert!(matches!(ExperimentConfig::load(&path, &[]), Err(HarnessError::MissingFile { .. })));
    assert!(matches!(ExperimentConfig::load(&dir.path().join("nope.conf"), &[]), Err(HarnessError::MissingFile { .. })));
}

#[test]
fn canonical_text_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&fixture(dir.path(), "sparsity.s = 2\n"), &[]).unwrap();
    let again = ExperimentConfig::from_text(&cfg.to_text(), Path::new("x"), Path::new(""), &[]).unwrap();
    assert_eq!(again.to_text(), cfg.to_text());
    assert_eq!(again.hash(), cfg.hash());
}

#[test]
fn hash_ignores_output_dir_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&fixture(dir.path(), ""), &[]).unwrap();
    assert_eq!(cfg.hash(), cfg.with("output.dir", "elsewhere").unwrap().hash());
    assert_ne!(cfg.hash(), cfg.with("train.seed", 2).unwrap().hash());
}

#[test]
fn datasets_load_and_truncate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&fixture(dir.path(), "dataset.train_size = 3\ntrain.batch_size = 2\n"), &[]).unwrap();
    let (train, test) = cfg.load_datasets().unwrap();
    assert_eq!((train.len(), test.len()), (3, 4));
}
