use std::fs;
use std::path::Path;

use edgepop_core::data::{load_cifar10, load_cifar10_sized, CIFAR_RECORD, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES};
use edgepop_core::rng::RngStream;
use edgepop_core::Error;

fn write_files(dir: &Path, records: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut r = RngStream::new(seed);
    let mut out = Vec::new();
    for name in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]) {
        let mut bytes = Vec::with_capacity(records * CIFAR_RECORD);
        for _ in 0..records {
            bytes.push(r.below(10) as u8);
            // per-channel offsets so the channel means differ
            for ch in 0..3 {
                bytes.extend((0..1024).map(|_| (r.below(128) + 40 * ch) as u8));
            }
        }
        fs::write(dir.join(name), &bytes).unwrap();
        out.push(bytes);
    }
    out
}

#[test]
fn records_parse_to_labels_and_scaled_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_files(dir.path(), 4, 1);
    let (train, test) = load_cifar10_sized(dir.path(), 4).unwrap();
    assert_eq!(train.len(), 20);
    assert_eq!(test.len(), 4);
    assert_eq!(train.sample_shape(), &[3, 32, 32]);
    let labels: Vec<usize> = files[..5]
        .iter()
        .flat_map(|f| f.chunks(CIFAR_RECORD).map(|r| r[0] as usize))
        .collect();
    assert_eq!(train.labels, labels);
    assert!(train.labels.iter().all(|&l| l < 10));

    // undo the normalization on one pixel of the first record
    let norm = train.normalization.as_ref().unwrap();
    let raw = files[0][1] as f64 / 255.0;
    let got = train.images.data()[0] as f64 * norm.std[0] + norm.mean[0];
    assert!((got - raw).abs() < 1e-5, "{got} vs {raw}");
}

#[test]
fn train_statistics_standardize_train_channels() {
    let dir = tempfile::tempdir().unwrap();
    write_files(dir.path(), 20, 2);
    let (train, test) = load_cifar10_sized(dir.path(), 20).unwrap();
    let stats = train.channel_stats();
    for c in 0..3 {
        assert!(stats.mean[c].abs() < 1e-3, "mean {}", stats.mean[c]);
        assert!((stats.std[c] - 1.0).abs() < 1e-3, "std {}", stats.std[c]);
    }
    // the test split reuses the train statistics
    assert_eq!(test.normalization, train.normalization);
}

#[test]
fn wrong_file_size_names_both_counts() {
    let dir = tempfile::tempdir().unwrap();
    write_files(dir.path(), 3, 3);
    match load_cifar10_sized(dir.path(), 4) {
        Err(Error::Format(msg)) => {
            assert!(msg.contains(&(4 * CIFAR_RECORD).to_string()), "{msg}");
            assert!(msg.contains(&(3 * CIFAR_RECORD).to_string()), "{msg}");
        }
        other => panic!("expected a format error, got {other:?}"),
    }
    // the full-size loader expects 10000 records per file
    assert!(matches!(load_cifar10(dir.path()), Err(Error::Format(_))));
}

#[test]
fn full_batch_file_size() {
    assert_eq!(10_000 * CIFAR_RECORD, 30_730_000);
}

#[test]
fn label_out_of_range_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_files(dir.path(), 2, 4);
    let p = dir.path().join(CIFAR_TRAIN_FILES[2]);
    let mut bytes = fs::read(&p).unwrap();
    bytes[CIFAR_RECORD] = 10;
    fs::write(&p, bytes).unwrap();
    assert!(load_cifar10_sized(dir.path(), 2).is_err());
}

#[test]
fn missing_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_cifar10_sized(&dir.path().join("nope"), 2).is_err());
}
