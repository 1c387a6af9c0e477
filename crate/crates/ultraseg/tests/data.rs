use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ultraseg::data::*;
use ultraseg::Error;
use ultraseg_core::synth::{MAX_COVERAGE, MIN_COVERAGE};
use ultraseg_core::Shape;

fn records(n: usize) -> Vec<SampleRecord> {
    (0..n)
        .map(|i| SampleRecord {
            id: format!("r{i}"),
            image: PathBuf::from(format!("img/{i}.png")),
            mask: PathBuf::from(format!("mask/{i}.png")),
            split: Split::Train,
            center: None,
            modality: None,
        })
        .collect()
}

fn count(m: &Manifest, s: Split) -> usize {
    m.split(s).count()
}

#[test]
fn split_sizes() {
    for (n, train) in [(10, 8), (612, 490), (2, 2), (5, 4), (7, 6)] {
        let m = split_dataset(records(n), 3, TRAIN_FRACTION).unwrap();
        assert_eq!((count(&m, Split::Train), count(&m, Split::Test)), (train, n - train), "n = {n}");
        assert!(((train as f64) - 0.8 * n as f64).abs() <= 1.0);
    }
    assert!(matches!(split_dataset(records(1), 3, 0.8), Err(Error::Usage(_))));
    assert!(matches!(split_dataset(records(4), 3, 1.5), Err(Error::Usage(_))));
}

#[test]
fn split_is_deterministic_partition() {
    let a = split_dataset(records(50), 9, 0.8).unwrap();
    let b = split_dataset(records(50), 9, 0.8).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.seed, Some(9));
    let ids: Vec<&str> = a.records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, records(50).iter().map(|r| r.id.as_str()).collect::<Vec<_>>());
    let train: HashSet<&str> = a.split(Split::Train).map(|r| r.id.as_str()).collect();
    let test: HashSet<&str> = a.split(Split::Test).map(|r| r.id.as_str()).collect();
    assert!(train.is_disjoint(&test));
    assert_eq!(train.len() + test.len(), 50);
    let other = split_dataset(records(50), 10, 0.8).unwrap();
    assert_ne!(a, other);
}

#[test]
fn manifest_roundtrip() {
    let base = Path::new("/data/set");
    let mut m = split_dataset(records(6), 1, 0.8).unwrap();
    for r in &mut m.records {
        r.image = base.join(&r.image);
        r.mask = base.join(&r.mask);
    }
    m.records[0].center = Some("C1".into());
    m.records[1].modality = Some("NBI".into());
    let text = m.to_text(base);
    assert!(text.starts_with('#'));
    assert!(text.contains("r0\timg/0.png\tmask/0.png\t"));
    let back = Manifest::parse(&text, Path::new("manifest.tsv"), base).unwrap();
    assert_eq!(back, m);
}

#[test]
fn manifest_errors_name_line() {
    let p = Path::new("m.tsv");
    let bad = ["a\tb\tc\ttrain\t-", "a\tb\tc\tvalidation\t-\t-", "a\ti\tm\ttrain\t-\t-\na\ti\tm\ttest\t-\t-", "# seed=x"];
    let lines = [1, 1, 2, 1];
    for (text, line) in bad.iter().zip(lines) {
        match Manifest::parse(text, p, Path::new(".")) {
            Err(Error::Manifest { line: l, path, .. }) => assert_eq!((l, path.as_path()), (line, p), "{text}"),
            other => panic!("{text}: {other:?}"),
        }
    }
    let ok = Manifest::parse("# header\n\n# seed=4\nx\ti.png\tm.png\ttest\t-\tWL\n", p, Path::new("/b")).unwrap();
    assert_eq!(ok.seed, Some(4));
    assert_eq!(ok.records[0].image, Path::new("/b/i.png"));
    assert_eq!((ok.records[0].center.clone(), ok.records[0].modality.clone()), (None, Some("WL".into())));
}

fn record(dir: &Path, image: &str, mask: &str) -> SampleRecord {
    SampleRecord { id: "x".into(), image: dir.join(image), mask: dir.join(mask), split: Split::Test, center: None, modality: None }
}

#[test]
fn load_sample_examples() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    RgbImage::from_pixel(256, 256, Rgb([255, 255, 255])).save(d.join("white.png")).unwrap();
    GrayImage::from_pixel(512, 512, Luma([255])).save(d.join("mask512.png")).unwrap();
    let (img, mask) = load_sample(&record(d, "white.png", "mask512.png")).unwrap();
    assert_eq!(img.shape(), Shape::new(1, 3, 256, 256));
    assert!(img.data().iter().all(|&v| v == 1.0));
    assert_eq!((mask.height, mask.width, mask.count()), (256, 256, 256 * 256));

    let odd = RgbImage::from_fn(160, 100, |x, y| Rgb([(x % 256) as u8, (y * 2) as u8, 7]));
    odd.save(d.join("odd.png")).unwrap();
    // threshold: 127 is background, 128 is foreground
    GrayImage::from_fn(160, 100, |x, _| Luma([if x < 80 { 127 } else { 128 }])).save(d.join("half.png")).unwrap();
    let (img, mask) = load_sample(&record(d, "odd.png", "half.png")).unwrap();
    assert_eq!(img.shape(), Shape::new(1, 3, 256, 256));
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(mask.count(), 256 * 128);
    assert!(!mask.get(10, 0) && mask.get(10, 255));
    assert_eq!(load_sample(&record(d, "odd.png", "half.png")).unwrap().0, img);
}

#[test]
fn netpbm_inputs_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut ppm = b"P6\n2 2\n255\n".to_vec();
    ppm.extend([255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255]);
    fs::write(d.join("a.ppm"), ppm).unwrap();
    let mut pgm = b"P5\n2 2\n255\n".to_vec();
    pgm.extend([0, 255, 255, 0]);
    fs::write(d.join("a.pgm"), pgm).unwrap();
    let img = read_image(&d.join("a.ppm")).unwrap();
    assert_eq!(img.shape(), Shape::new(1, 3, 2, 2));
    assert_eq!(img.plane(0, 0), [1.0, 0.0, 0.0, 1.0]);
    let m = read_mask(&d.join("a.pgm")).unwrap();
    assert_eq!(m.data, [false, true, true, false]);
    let (img, mask) = load_sample(&record(d, "a.ppm", "a.pgm")).unwrap();
    assert_eq!((img.shape().h, mask.width), (256, 256));
}

#[test]
fn ingestion_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("junk.png"), b"definitely not an image").unwrap();
    GrayImage::from_pixel(4, 4, Luma([0])).save(d.join("m.png")).unwrap();
    match load_sample(&record(d, "missing.png", "m.png")) {
        Err(e @ Error::Io { .. }) => assert!(e.to_string().contains("missing.png")),
        other => panic!("{other:?}"),
    }
    match load_sample(&record(d, "junk.png", "m.png")) {
        Err(e @ Error::Decode { .. }) => assert!(e.to_string().contains("junk.png")),
        other => panic!("{other:?}"),
    }
    fs::write(d.join("empty.pgm"), b"P5\n0 0\n255\n").unwrap();
    assert!(matches!(read_mask(&d.join("empty.pgm")), Err(Error::EmptyImage { .. }) | Err(Error::Decode { .. })));
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "masks"] {
        let mut names: Vec<PathBuf> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        out.extend(names.into_iter().map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap())));
    }
    out.push(("manifest.tsv".into(), fs::read(dir.join("manifest.tsv")).unwrap()));
    out
}

#[test]
fn synth_dataset_is_byte_identical_and_bounded() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = synth_dataset(6, 7, a.path()).unwrap();
    synth_dataset(6, 7, b.path()).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));
    assert_eq!(tree(a.path()).len(), 13);
    assert_eq!((count(&ma, Split::Train), count(&ma, Split::Test)), (5, 1));

    let loaded = Manifest::load(&a.path().join("manifest.tsv")).unwrap();
    assert_eq!(loaded, ma);
    for r in &loaded.records {
        assert!(r.center.is_some() && r.modality.is_some());
        let (_, mask) = load_sample(r).unwrap();
        let cover = mask.count() as f64 / (256.0 * 256.0);
        assert!((MIN_COVERAGE..=MAX_COVERAGE).contains(&cover), "{}: {cover}", r.id);
    }
    assert!(matches!(synth_dataset(1, 7, a.path()), Err(Error::Usage(_))));
}

#[test]
fn png_roundtrip_is_exact_for_8bit_values() {
    let s = ultraseg_core::synth::synth_sample(3, 1);
    let rgb = tensor_to_rgb(&s.image);
    let back = rgb_to_tensor(&rgb);
    assert!(back.max_abs_diff(&s.image) <= 0.5 / 255.0 + 1e-7);
    assert_eq!(tensor_to_rgb(&back), rgb);
    let g = mask_to_gray(&s.mask);
    assert!(g.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
}
