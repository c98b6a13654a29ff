//! MNIST-format files written by hand and read back through a data URI.

use std::path::Path;

use permalign_core::data::{DataBundle, Split, DATA_DIR_ENV};

/// Independent IDX writer: big-endian header, then raw bytes.
fn write_idx(dir: &Path, stem: &str, images: &[[u8; 6]], labels: &[u8]) {
    let mut img = Vec::new();
    for v in [0x0803u32, images.len() as u32, 2, 3] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for im in images {
        img.extend_from_slice(im);
    }
    std::fs::write(dir.join(format!("{stem}-images-idx3-ubyte")), img).unwrap();
    let mut lbl = Vec::new();
    for v in [0x0801u32, labels.len() as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend_from_slice(labels);
    std::fs::write(dir.join(format!("{stem}-labels-idx1-ubyte")), lbl).unwrap();
}

#[test]
fn idx_uri_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("digits");
    std::fs::create_dir(&dir).unwrap();
    let train = [[0, 255, 0, 255, 0, 255], [10, 20, 30, 40, 50, 60], [255; 6]];
    let test = [[51, 102, 153, 204, 0, 0]];
    write_idx(&dir, "train", &train, &[3, 1, 0]);
    write_idx(&dir, "t10k", &test, &[2]);

    // Standardization oracle: one scalar mean and std over all training pixels.
    let pixels: Vec<f64> = train.iter().flatten().map(|&p| p as f64 / 255.0).collect();
    let mean = pixels.iter().sum::<f64>() / pixels.len() as f64;
    let std = (pixels.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / pixels.len() as f64).sqrt();

    let absolute = DataBundle::load(&format!("idx://{}", dir.display())).unwrap();
    std::env::set_var(DATA_DIR_ENV, root.path());
    let relative = DataBundle::load("idx://digits").unwrap();

    for b in [&absolute, &relative] {
        assert_eq!(b.train.len(), 3);
        assert_eq!(b.train.dim(), 6);
        assert_eq!(b.train.labels(), &[3, 1, 0]);
        assert_eq!(b.test.labels(), &[2]);
        assert_eq!(b.train.split(), Split::Train);
        assert_eq!(b.test.split(), Split::Test);
        assert_eq!(b.train.n_classes(), 4);
        assert_eq!(b.test.n_classes(), 4);
        for (i, im) in train.iter().enumerate() {
            for (j, &p) in im.iter().enumerate() {
                let want = (p as f64 / 255.0 - mean) / std;
                assert!((b.train.features()[[i, j]] - want).abs() < 1e-12);
            }
        }
        let want = (204.0 / 255.0 - mean) / std;
        assert!((b.test.features()[[0, 3]] - want).abs() < 1e-12);
    }
}
