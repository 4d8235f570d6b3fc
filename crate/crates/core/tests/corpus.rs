use zoomnet_core::boxes::{iou, BBox};
use zoomnet_core::corpus::{draw_object, generate_scene, write_split, Corpus, DiskSplit, SceneSpec, Shape, Split};
use zoomnet_core::image::RgbImage;
use zoomnet_core::metrics::SizeBucket;

#[test]
fn scenes_are_reproducible() {
    let spec = SceneSpec::default();
    for i in [0, 5, 41] {
        assert_eq!(generate_scene(&spec, Split::Eval, i), generate_scene(&spec, Split::Eval, i));
    }
    let other = SceneSpec { seed: spec.seed + 1, ..spec.clone() };
    assert_ne!(generate_scene(&spec, Split::Train, 0).image, generate_scene(&other, Split::Train, 0).image);
}

#[test]
fn splits_do_not_share_scenes() {
    let spec = SceneSpec::default();
    for i in 0..20 {
        let t = generate_scene(&spec, Split::Train, i).image;
        let c = generate_scene(&spec, Split::Cal, i).image;
        let e = generate_scene(&spec, Split::Eval, i).image;
        assert!(t != c && c != e && t != e, "index {i}");
    }
}

#[test]
fn every_size_bucket_is_populated() {
    let spec = SceneSpec::default();
    let mut counts = [0usize; 3];
    let mut i = 0;
    while counts.iter().sum::<usize>() < 1000 {
        for b in generate_scene(&spec, Split::Train, i).boxes {
            let k = SizeBucket::ALL.iter().position(|s| *s == SizeBucket::of_area(b.area())).unwrap();
            counts[k] += 1;
        }
        i += 1;
    }
    let total: usize = counts.iter().sum();
    for (k, c) in counts.iter().enumerate() {
        assert!(*c * 10 >= total, "bucket {k}: {c} of {total}");
    }
}

#[test]
fn objects_never_overlap() {
    let spec = SceneSpec::default();
    for i in 0..50 {
        let boxes = generate_scene(&spec, Split::Train, i).boxes;
        for (a, x) in boxes.iter().enumerate() {
            assert!(x.inside(spec.width as f64, spec.height as f64));
            for y in &boxes[a + 1..] {
                assert_eq!(iou(x, y), 0.0);
            }
        }
    }
}

fn painted_bounds(img: &RgbImage) -> Option<BBox> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for y in 0..img.height {
        for x in 0..img.width {
            if img.rgb(y, x) != [0, 0, 0] {
                b = Some(match b {
                    None => (x, y, x, y),
                    Some((a, c, d, e)) => (a.min(x), c.min(y), d.max(x), e.max(y)),
                });
            }
        }
    }
    b.map(|(a, c, d, e)| BBox::new(a as f64, c as f64, (d + 1) as f64, (e + 1) as f64))
}

#[test]
fn boxes_are_tight_around_painted_pixels() {
    for shape in [Shape::Rectangle, Shape::Ellipse, Shape::Triangle, Shape::Diamond] {
        for (x0, y0, x1, y1) in [(3, 4, 40, 21), (10, 10, 15, 30), (0, 0, 64, 64), (20, 30, 24, 34)] {
            let mut img = RgbImage::new(64, 64);
            let got = draw_object(&mut img, shape, (x0, y0, x1, y1), [200, 10, 10]).unwrap();
            assert_eq!(Some(got), painted_bounds(&img), "{shape:?} in {:?}", (x0, y0, x1, y1));
        }
    }
}

#[test]
fn disk_split_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { height: 64, width: 80, size_range: (8.0, 40.0), ..SceneSpec::default() };
    let summary = write_split(&spec, Split::Cal, 4, dir.path()).unwrap();
    assert_eq!(summary.images, 4);
    let disk = DiskSplit::open(&dir.path().join("cal")).unwrap();
    assert_eq!(disk.len(), 4);
    for i in 0..4 {
        let (id, img, boxes) = disk.get(i).unwrap();
        let scene = generate_scene(&spec, Split::Cal, i);
        assert_eq!(id, i as u64);
        assert_eq!(img, scene.image);
        assert_eq!(boxes, scene.boxes);
    }
    let first = std::fs::read(dir.path().join("cal/annotations.json")).unwrap();
    write_split(&spec, Split::Cal, 4, dir.path()).unwrap();
    assert_eq!(first, std::fs::read(dir.path().join("cal/annotations.json")).unwrap());
}
