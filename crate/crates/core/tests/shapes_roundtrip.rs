use gdetr::data::{generate_shapes, load_coco, GenerationPlan, ShapesSpec, Split};
use gdetr::geometry::iou;

#[test]
fn saved_split_loads_back_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let shapes = generate_shapes(
        &ShapesSpec {
            seed: 21,
            ..ShapesSpec::default()
        },
        12,
    )
    .unwrap();
    let split = Split::from(shapes);
    split.save(dir.path()).unwrap();
    let back = Split::load(dir.path()).unwrap();
    assert_eq!(back, split);
}

#[test]
fn annotations_are_byte_identical_across_runs() {
    let plan = GenerationPlan {
        train_images: 5,
        val_images: 3,
        ..GenerationPlan::default()
    };
    let a = plan.generate().unwrap();
    let b = plan.generate().unwrap();
    assert_eq!(a.0.dataset.to_json().unwrap(), b.0.dataset.to_json().unwrap());
    assert_eq!(a.1.dataset.to_json().unwrap(), b.1.dataset.to_json().unwrap());
    assert_eq!(a.0.images, b.0.images);
    // validation ids continue after the training ids
    let last_train = a.0.dataset.images.iter().map(|i| i.id).max().unwrap();
    assert!(a.1.dataset.images.iter().all(|i| i.id > last_train));
}

#[test]
fn objects_are_inside_and_disjoint() {
    let shapes = generate_shapes(
        &ShapesSpec {
            seed: 22,
            ..ShapesSpec::default()
        },
        30,
    )
    .unwrap();
    for (id, objs) in shapes.dataset.records_by_image() {
        let img = shapes.dataset.image(id).unwrap();
        for (i, a) in objs.iter().enumerate() {
            let b = a.bbox;
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= img.width as f64 && b.y2 <= img.height as f64);
            for o in &objs[i + 1..] {
                assert_eq!(iou(b, o.bbox), 0.0);
            }
        }
    }
}

#[test]
fn empty_split_writes_valid_files() {
    let dir = tempfile::tempdir().unwrap();
    Split::from(generate_shapes(&ShapesSpec::default(), 0).unwrap())
        .save(dir.path())
        .unwrap();
    let ds = load_coco(&dir.path().join("annotations.json")).unwrap();
    assert!(ds.images.is_empty() && ds.records.is_empty());
    assert_eq!(ds.num_classes(), 3);
    assert!(Split::load(dir.path()).unwrap().is_empty());
}
