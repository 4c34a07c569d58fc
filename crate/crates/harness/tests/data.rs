use std::path::Path;

use softprune_harness::data::{self, Normalization, RawImages};
use softprune_harness::HarnessError;

fn mnist_like(count: usize, fill: impl Fn(usize) -> u8) -> RawImages {
    RawImages { count, channels: 1, height: 28, width: 28, pixels: (0..count * 784).map(fill).collect() }
}

fn cifar_like(count: usize) -> RawImages {
    RawImages { count, channels: 3, height: 32, width: 32, pixels: (0..count * 3072).map(|i| (i * 7 % 256) as u8).collect() }
}

#[test]
fn idx_fixture_has_header_shape() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    data::write_idx_images(&img, &mnist_like(4, |i| (i % 256) as u8), false).unwrap();
    data::write_idx_labels(&lab, &[3, 1, 4, 1], false).unwrap();
    let d = data::load_idx(&img, &lab, &Normalization::identity(1), 10).unwrap();
    assert_eq!(d.images.shape(), &[4, 1, 28, 28]);
    assert_eq!(d.labels, vec![3, 1, 4, 1]);
    assert_eq!(d.images.data()[1], 1.0 / 255.0);
}

#[test]
fn gzipped_idx_reads_the_same() {
    let dir = tempfile::tempdir().unwrap();
    let raw = mnist_like(3, |i| (i * 13 % 256) as u8);
    let p = |n: &str| dir.path().join(n);
    data::write_idx_images(&p("a"), &raw, false).unwrap();
    data::write_idx_images(&p("a.gz"), &raw, true).unwrap();
    data::write_idx_labels(&p("l"), &[0, 1, 2], false).unwrap();
    data::write_idx_labels(&p("l.gz"), &[0, 1, 2], true).unwrap();
    let norm = Normalization { mean: vec![0.5], std: vec![0.25] };
    assert_eq!(data::load_idx(&p("a"), &p("l"), &norm, 10).unwrap(), data::load_idx(&p("a.gz"), &p("l.gz"), &norm, 10).unwrap());
}

#[test]
fn label_count_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    data::write_idx_images(&img, &mnist_like(4, |_| 0), false).unwrap();
    data::write_idx_labels(&lab, &[1, 2, 3], false).unwrap();
    assert!(matches!(data::load_idx(&img, &lab, &Normalization::identity(1), 10), Err(HarnessError::Parse { .. })));
}

#[test]
fn constant_pixels_standardize_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    data::write_idx_images(&img, &mnist_like(2, |_| 51), false).unwrap();
    data::write_idx_labels(&lab, &[0, 0], false).unwrap();
    let d = data::load_idx(&img, &lab, &Normalization { mean: vec![0.2], std: vec![0.3] }, 10).unwrap();
    assert!(d.images.data().iter().all(|&v| v == 0.0));
}

#[test]
fn bad_magic_reports_offset_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    data::write_idx_labels(&img, &[0, 1], false).unwrap();
    data::write_idx_labels(&lab, &[0, 1], false).unwrap();
    match data::load_idx(&img, &lab, &Normalization::identity(1), 10) {
        Err(HarnessError::Parse { offset, message, .. }) => {
            assert_eq!(offset, 0);
            assert!(message.contains("magic"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn truncated_idx_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img");
    data::write_idx_images(&img, &mnist_like(2, |_| 0), false).unwrap();
    let bytes = std::fs::read(&img).unwrap();
    std::fs::write(&img, &bytes[..bytes.len() - 10]).unwrap();
    match data::parse_idx_images(&img, &data::read_bytes(&img).unwrap()) {
        Err(HarnessError::Parse { offset, .. }) => assert_eq!(offset, bytes.len() - 10),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_file_is_reported_as_such() {
    let r = data::load_idx(Path::new("/nonexistent/a"), Path::new("/nonexistent/b"), &Normalization::identity(1), 10);
    assert!(matches!(r, Err(HarnessError::MissingFile { .. })));
}

#[test]
fn cifar_fixture_shape_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("batch.bin");
    data::write_cifar_binary(&p, &cifar_like(2), &[9, 0]).unwrap();
    let d = data::load_cifar_binary(&[&p], &Normalization::identity(3), 10).unwrap();
    assert_eq!(d.images.shape(), &[2, 3, 32, 32]);
    assert_eq!(d.labels, vec![9, 0]);
}

#[test]
fn cifar_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("batch.bin");
    let raw = cifar_like(5);
    let labels = [1, 2, 3, 4, 5];
    data::write_cifar_binary(&p, &raw, &labels).unwrap();
    let bytes = data::read_bytes(&p).unwrap();
    assert_eq!(bytes.len(), 5 * data::CIFAR_RECORD);
    let (back, back_labels) = data::parse_cifar(&p, &bytes).unwrap();
    assert_eq!(back, raw);
    assert_eq!(back_labels, labels);
}

#[test]
fn cifar_files_concatenate() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    data::write_cifar_binary(&a, &cifar_like(2), &[1, 2]).unwrap();
    data::write_cifar_binary(&b, &cifar_like(1), &[3]).unwrap();
    let d = data::load_cifar_binary(&[&a, &b], &Normalization::identity(3), 10).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.labels, vec![1, 2, 3]);
}

#[test]
fn cifar_partial_record_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.bin");
    std::fs::write(&p, vec![0u8; data::CIFAR_RECORD + 5]).unwrap();
    assert!(matches!(data::load_cifar_binary(&[&p], &Normalization::identity(3), 10), Err(HarnessError::Parse { .. })));
}

#[test]
fn out_of_range_label_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.bin");
    data::write_cifar_binary(&p, &cifar_like(1), &[12]).unwrap();
    assert!(data::load_cifar_binary(&[&p], &Normalization::identity(3), 10).is_err());
}

#[test]
fn truncate_keeps_the_prefix() {
    let raw = mnist_like(5, |i| (i / 784) as u8);
    let mut d = data::to_dataset(&raw, &[0, 1, 2, 3, 4], &Normalization::identity(1), 10).unwrap();
    d.truncate(2).unwrap();
    assert_eq!(d.images.shape(), &[2, 1, 28, 28]);
    assert_eq!(d.labels, vec![0, 1]);
    assert_eq!(d.images.data()[784], 1.0 / 255.0);
}
