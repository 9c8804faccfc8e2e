use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, RgbImage};

use fds_core::dataset::{build_episodes, scan_dataset, ClassId};

fn write_pair(class_dir: &Path, stem: &str, side: u32) {
    fs::create_dir_all(class_dir.join("images")).unwrap();
    fs::create_dir_all(class_dir.join("masks")).unwrap();
    RgbImage::new(side, side)
        .save(class_dir.join("images").join(format!("{stem}.png")))
        .unwrap();
    let mut m = GrayImage::new(side, side);
    m.put_pixel(1, 1, Luma([255]));
    m.save(class_dir.join("masks").join(format!("{stem}.png"))).unwrap();
}

fn tile_crack(root: &Path, n: usize) {
    for i in 0..n {
        write_pair(&root.join("tile/crack"), &format!("{i:02}"), 8);
    }
}

#[test]
fn cyclic_episodes_over_eleven_pairs() {
    let dir = tempfile::tempdir().unwrap();
    tile_crack(dir.path(), 11);
    let index = scan_dataset(dir.path()).unwrap();
    let id = ClassId::new("tile", "crack");
    assert_eq!(index.quantity(&id), Some(11));

    let one = build_episodes(&index, &id, 1).unwrap();
    assert_eq!(one.len(), 11);
    for (i, ep) in one.iter().enumerate() {
        assert_eq!(ep.query.stem, format!("{i:02}"));
        assert_eq!(ep.supports[0].stem, format!("{:02}", (i + 1) % 11));
    }
    let five = build_episodes(&index, &id, 5).unwrap();
    let stems: Vec<&str> = five[9].supports.iter().map(|s| s.stem.as_str()).collect();
    assert_eq!(stems, ["10", "00", "01", "02", "03"]);
    for ep in &five {
        assert!(ep.supports.iter().all(|s| s.stem != ep.query.stem));
    }
    let err = build_episodes(&index, &id, 11).unwrap_err();
    assert!(err.to_string().contains("class too small for 11-shot"), "{err}");
}

#[test]
fn scan_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    tile_crack(dir.path(), 4);
    write_pair(&dir.path().join("wood/knot"), "a", 8);
    write_pair(&dir.path().join("wood/knot"), "b", 8);
    let a = scan_dataset(dir.path()).unwrap();
    let b = scan_dataset(dir.path()).unwrap();
    assert_eq!(a, b);
    let ids: Vec<String> = a.class_ids().iter().map(ToString::to_string).collect();
    assert_eq!(ids, ["tile/crack", "wood/knot"]);
}

#[test]
fn empty_root_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = scan_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("no products found"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn image_without_mask_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    tile_crack(dir.path(), 2);
    RgbImage::new(8, 8)
        .save(dir.path().join("tile/crack/images/orphan.png"))
        .unwrap();
    let err = scan_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("missing mask"), "{err}");
    assert!(err.to_string().contains("orphan.png"), "{err}");
}

#[test]
fn mask_without_image_is_ignored() {
    let dir = tempfile::tempdir().unwrap();
    tile_crack(dir.path(), 2);
    GrayImage::new(8, 8)
        .save(dir.path().join("tile/crack/masks/stray.png"))
        .unwrap();
    let index = scan_dataset(dir.path()).unwrap();
    assert_eq!(index.quantity(&ClassId::new("tile", "crack")), Some(2));
}

#[test]
fn mismatched_mask_size_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    tile_crack(dir.path(), 2);
    GrayImage::new(4, 4)
        .save(dir.path().join("tile/crack/masks/00.png"))
        .unwrap();
    assert!(scan_dataset(dir.path()).is_err());
}

#[test]
fn class_filter() {
    let dir = tempfile::tempdir().unwrap();
    tile_crack(dir.path(), 2);
    write_pair(&dir.path().join("wood/knot"), "a", 8);
    let index = scan_dataset(dir.path()).unwrap();
    assert_eq!(index.select(&["wood".into()]).unwrap(), [ClassId::new("wood", "knot")]);
    assert_eq!(index.select(&["tile/crack".into()]).unwrap().len(), 1);
    assert_eq!(index.select(&[]).unwrap().len(), 2);
    let err = index.select(&["glass".into()]).unwrap_err();
    assert!(err.to_string().contains("no classes selected"), "{err}");
}

#[test]
fn support_without_foreground_fails_on_load() {
    let dir = tempfile::tempdir().unwrap();
    tile_crack(dir.path(), 2);
    GrayImage::new(8, 8)
        .save(dir.path().join("tile/crack/masks/01.png"))
        .unwrap();
    let index = scan_dataset(dir.path()).unwrap();
    let eps = build_episodes(&index, &ClassId::new("tile", "crack"), 1).unwrap();
    let err = eps[0].load(8).unwrap_err();
    assert!(err.to_string().contains("no foreground"), "{err}");
    // As a query the empty mask is fine.
    assert!(eps[1].load(8).is_ok());
}
