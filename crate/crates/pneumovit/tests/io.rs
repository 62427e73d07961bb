use std::fs;
use std::path::Path;

use pneumovit::formats::{self, load_cache, load_model, read_weights, save_cache, save_weights};
use pneumovit::images::{filter_metadata, load_folder, write_folder, FilterRules};
use pneumovit_core::data::synth_dataset;
use pneumovit_core::models::{Model, ModelKind, ModelSpec};
use pneumovit_core::Tensor;

fn png(path: &Path, w: u32, h: u32, value: u8) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    image::RgbImage::from_pixel(w, h, image::Rgb([value, value / 2, 255 - value]))
        .save(path)
        .unwrap();
}

#[test]
fn folder_counts_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..3 {
        png(&dir.path().join(format!("normal/n{i}.png")), 20, 20, 10);
    }
    for i in 0..2 {
        png(&dir.path().join(format!("pneumonia/p{i}.png")), 20, 20, 200);
    }
    fs::write(dir.path().join("normal/notes.txt"), "skip me").unwrap();
    let images = load_folder(dir.path(), 32).unwrap();
    assert_eq!(images.len(), 5);
    let labels: Vec<u8> = images.iter().map(|im| im.label).collect();
    assert_eq!(labels, vec![0, 0, 0, 1, 1]);
}

#[test]
fn folder_resizes_and_rescales() {
    let dir = tempfile::tempdir().unwrap();
    let white = dir.path().join("normal/w.png");
    fs::create_dir_all(white.parent().unwrap()).unwrap();
    image::RgbImage::from_pixel(64, 64, image::Rgb([255, 255, 255]))
        .save(&white)
        .unwrap();
    png(&dir.path().join("pneumonia/p.jpg"), 64, 48, 90);
    let images = load_folder(dir.path(), 128).unwrap();
    assert_eq!(images[0].hwc(), [128, 128, 3]);
    assert!(images[0].pixels.data().iter().all(|&v| v == 1.0));
    assert_eq!(images[1].hwc(), [128, 128, 3]);
}

#[test]
fn folder_skips_unreadable_but_rejects_empty_class() {
    let dir = tempfile::tempdir().unwrap();
    png(&dir.path().join("normal/a.png"), 8, 8, 1);
    png(&dir.path().join("pneumonia/b.png"), 8, 8, 1);
    fs::write(dir.path().join("pneumonia/broken.png"), b"not a png").unwrap();
    assert_eq!(load_folder(dir.path(), 16).unwrap().len(), 2);

    fs::remove_file(dir.path().join("pneumonia/b.png")).unwrap();
    let err = load_folder(dir.path(), 16).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("pneumonia"), "{err}");

    fs::remove_dir_all(dir.path().join("pneumonia")).unwrap();
    assert_eq!(load_folder(dir.path(), 16).unwrap_err().exit_code(), 3);
}

#[test]
fn synth_folder_round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let images = synth_dataset(6, 32, 3).unwrap();
    write_folder(dir.path(), &images).unwrap();
    let back = load_folder(dir.path(), 32).unwrap();
    assert_eq!(back.len(), images.len());
    for b in &back {
        let stem = b
            .source_id
            .split('/')
            .nth(1)
            .unwrap()
            .trim_end_matches(".png");
        let orig = images.iter().find(|im| im.source_id == stem).unwrap();
        assert_eq!(orig.label, b.label);
        let worst = orig
            .pixels
            .data()
            .iter()
            .zip(b.pixels.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 0.5 / 255.0 + 1e-12, "{stem}: {worst}");
    }
}

fn rules() -> FilterRules {
    FilterRules::default()
}

#[test]
fn metadata_drops_uncertain_labels() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("meta.csv");
    fs::write(
        &csv,
        "path,view,label\na.png,frontal,1\nb.png,frontal,0\nc.png,frontal,-1\n",
    )
    .unwrap();
    let kept = filter_metadata(&csv, &rules()).unwrap();
    assert_eq!(
        kept,
        vec![(dir.path().join("a.png"), 1), (dir.path().join("b.png"), 0)]
    );
}

#[test]
fn metadata_lateral_only_keeps_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("meta.csv");
    fs::write(&csv, "path,view,label\na.png,lateral,1\nb.png,Lateral,0\n").unwrap();
    assert!(filter_metadata(&csv, &rules()).unwrap().is_empty());
}

#[test]
fn metadata_matches_row_by_row_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("meta.csv");
    let rows = [
        ("r0", "frontal", "1"),
        ("r1", "lateral", "1"),
        ("r2", "frontal", "-1"),
        ("r3", "PA", "0"),
        ("r4", "lateral", "0"),
        ("r5", "frontal", ""),
        ("r6", "frontal", "0"),
        ("r7", "lateral", "-1"),
        ("r8", "frontal", "1.0"),
        ("r9", "AP", "1"),
    ];
    let mut text = String::from("label,path,view,age\n");
    for (p, v, l) in rows {
        text += &format!("{l},{p}.png,{v},50\n");
    }
    fs::write(&csv, text).unwrap();
    let expected: Vec<_> = rows
        .iter()
        .filter(|(_, v, l)| {
            (v.eq_ignore_ascii_case("frontal") || v.eq_ignore_ascii_case("pa"))
                && (l.starts_with('0') || l.starts_with('1'))
        })
        .map(|(p, _, l)| {
            (
                dir.path().join(format!("{p}.png")),
                l.starts_with('1') as u8,
            )
        })
        .collect();
    assert_eq!(expected.len(), 4);
    assert_eq!(filter_metadata(&csv, &rules()).unwrap(), expected);
}

#[test]
fn metadata_missing_column_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("meta.csv");
    fs::write(&csv, "path,label\na.png,1\n").unwrap();
    let err = filter_metadata(&csv, &rules()).unwrap_err();
    assert!(err.to_string().contains("'view'"), "{err}");
    assert_eq!(err.exit_code(), 3);
}

fn small_vit() -> ModelSpec {
    ModelSpec::default_for(ModelKind::Vit).with_input([32, 32, 3])
}

#[test]
fn weights_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/m.hvwt");
    let model = Model::build(&small_vit(), 9).unwrap();
    save_weights(&path, &model).unwrap();
    let back = load_model(&path, Some(&small_vit())).unwrap();
    assert_eq!(back.spec, model.spec);
    for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    let x = synth_dataset(1, 32, 1).unwrap();
    assert_eq!(
        model.predict(&x[0].pixels).unwrap(),
        back.predict(&x[0].pixels).unwrap()
    );
    assert_eq!(
        read_weights(&path).unwrap().tensors.len(),
        model.params.len()
    );
}

#[test]
fn weights_header_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.hvwt");
    let model = Model::build(&small_vit(), 1).unwrap();
    save_weights(&path, &model).unwrap();
    let bytes = fs::read(&path).unwrap();

    let other = ModelSpec::default_for(ModelKind::Vit).with_input([64, 64, 3]);
    let err = load_model(&path, Some(&other)).unwrap_err();
    assert!(err.to_string().contains("does not match"), "{err}");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert!(load_model(&path, None)
        .unwrap_err()
        .to_string()
        .contains("magic"));

    let mut bad = bytes.clone();
    bad[4] = 99;
    fs::write(&path, &bad).unwrap();
    assert!(load_model(&path, None)
        .unwrap_err()
        .to_string()
        .contains("version 99"));

    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_model(&path, None)
        .unwrap_err()
        .to_string()
        .contains("truncated"));

    let mut long = bytes.clone();
    long.push(0);
    fs::write(&path, &long).unwrap();
    assert!(load_model(&path, None)
        .unwrap_err()
        .to_string()
        .contains("trailing"));
    assert_eq!(formats::WEIGHTS_MAGIC, *b"HVWT");
}

#[test]
fn cache_round_trip_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.hvds");
    let images = synth_dataset(3, 16, 5).unwrap();
    save_cache(&path, &images).unwrap();
    let bytes = fs::read(&path).unwrap();
    let header = 4 + 4 + 8 + 12;
    let per: usize = images
        .iter()
        .map(|im| 1 + 4 + im.source_id.len() + 16 * 16 * 3 * 4)
        .sum();
    assert_eq!(bytes.len(), header + per);
    assert_eq!(&bytes[..4], b"HVDS");

    let back = load_cache(&path).unwrap();
    assert_eq!(back.len(), images.len());
    for (a, b) in images.iter().zip(&back) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.source_id, b.source_id);
        let f32_round: Vec<f64> = a.pixels.data().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(b.pixels, Tensor::new(&[16, 16, 3], f32_round).unwrap());
    }

    fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert_eq!(load_cache(&path).unwrap_err().exit_code(), 3);
}
