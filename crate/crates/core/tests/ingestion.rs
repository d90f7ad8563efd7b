use std::fs;
use std::path::Path;

use camcls::data::{load_dataset, load_image, split, synth_generate, SynthConfig};
use camcls::imaging::{encode_pgm, write_pgm};
use camcls::{Error, Tensor};

fn gradient_pgm(path: &Path, w: usize, h: usize) {
    let px: Vec<u8> = (0..w * h).map(|i| ((i % w) * 255 / (w - 1)) as u8).collect();
    fs::write(path, encode_pgm(w, h, &px)).unwrap();
}

fn mean_and_var(t: &Tensor) -> (f64, f64) {
    let m = t.mean();
    (m, t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / t.len() as f64)
}

#[test]
fn loads_labelled_directories_in_sorted_order() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("site_a");
    for sub in ["pos", "neg"] {
        fs::create_dir_all(root.join(sub)).unwrap();
    }
    for name in ["c.pgm", "a.pgm", "b.pgm"] {
        gradient_pgm(&root.join("pos").join(name), 20, 10);
    }
    for name in ["y.pgm", "x.pgm"] {
        gradient_pgm(&root.join("neg").join(name), 12, 12);
    }
    fs::write(root.join("neg").join("notes.txt"), "ignored").unwrap();

    let ds = load_dataset(&root, 32).unwrap();
    assert_eq!(ds.len(), 5);
    assert_eq!((ds.count_label(1), ds.count_label(0)), (3, 2));
    assert_eq!(ds.skipped, 0);
    let names: Vec<_> = ds
        .samples
        .iter()
        .map(|s| s.path.as_ref().unwrap().file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["a.pgm", "b.pgm", "c.pgm", "x.pgm", "y.pgm"]);
    for s in &ds.samples {
        assert_eq!(s.image.shape(), [1, 32, 32]);
        assert_eq!(s.source_tag, "site_a");
        let (m, v) = mean_and_var(&s.image);
        assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-4, "mean {m}, var {v}");
    }
}

#[test]
fn constant_image_normalizes_to_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.pgm");
    fs::write(&path, encode_pgm(9, 7, &[128; 63])).unwrap();
    let t = load_image(&path, 16).unwrap();
    assert!(t.data().iter().all(|&v| v == 0.0));
}

#[test]
fn odd_sized_image_is_resized_to_input_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("odd.pgm");
    gradient_pgm(&path, 104, 119);
    let t = load_image(&path, 224).unwrap();
    assert_eq!(t.shape(), [1, 224, 224]);
    // The horizontal ramp survives resizing: left columns stay darker.
    assert!(t.at(&[0, 100, 0]) < t.at(&[0, 100, 223]));
}

#[test]
fn undecodable_files_are_skipped_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for sub in ["pos", "neg"] {
        fs::create_dir_all(root.join(sub)).unwrap();
    }
    gradient_pgm(&root.join("pos/good.pgm"), 8, 8);
    fs::write(root.join("pos/broken.png"), b"definitely not a png").unwrap();
    gradient_pgm(&root.join("neg/good.pgm"), 8, 8);
    let ds = load_dataset(root, 8).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.skipped, 1);
}

#[test]
fn missing_class_directory_is_an_ingestion_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("pos")).unwrap();
    assert!(matches!(load_dataset(dir.path(), 8), Err(Error::Ingestion(_))));
}

#[test]
fn exported_synthetic_set_reloads_with_same_labels() {
    let ds = synth_generate(&SynthConfig { n_per_class: 4, image_size: 32, ..SynthConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.export(dir.path()).unwrap();
    let back = load_dataset(dir.path(), 32).unwrap();
    assert_eq!(back.len(), 8);
    assert_eq!((back.count_label(1), back.count_label(0)), (4, 4));
    // 8-bit quantization keeps the blob where it was.
    let argmax = |t: &Tensor| t.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    let first_pos = back.samples.iter().find(|s| s.label == 1).unwrap();
    let (r, c) = (argmax(&first_pos.image) / 32, argmax(&first_pos.image) % 32);
    assert!(r < 16 && c < 16);
}

#[test]
fn pgm_writer_accepts_single_channel_images() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.pgm");
    let img = Tensor::new(vec![1, 2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    write_pgm(&path, &img).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    assert_eq!(&bytes[bytes.len() - 6..], &[0, 51, 102, 153, 204, 255]);
}

#[test]
fn split_is_stratified_and_disjoint() {
    let ds = synth_generate(&SynthConfig { n_per_class: 30, image_size: 32, ..SynthConfig::default() }).unwrap();
    let (train, test) = split(&ds, 2.0 / 3.0, 5).unwrap();
    assert_eq!((train.count_label(1), train.count_label(0)), (20, 20));
    assert_eq!((test.count_label(1), test.count_label(0)), (10, 10));
    for s in &test.samples {
        assert!(!train.samples.contains(s));
    }
}
