use gdetr::data::{generate_shapes, Image, ShapesSpec};
use gdetr::geometry::DetectionSet;
use gdetr::inference::{predict, tta_predict, SlotCorrespondence, TtaConfig};
use gdetr::model::Detector;
use gdetr::nn::ParamStore;
use gdetr::pipeline::{build_detector, RunConfig};

fn model() -> (Detector, ParamStore) {
    let run = RunConfig::from_toml_with(
        "[model.vit]\nembed_dim = 16\ndepth = 1\n[model.decoder]\nchannels = 16\nlayers = 2\nffn_dim = 32\n",
        &[],
    )
    .unwrap();
    let (det, mut store) = build_detector(&run.model_config(), 9).unwrap();
    // spread the initially identical box and class heads so detections differ
    let mut k = 0.0f64;
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            k += 1.0;
            *v += 0.05 * (k * 0.731).sin();
        }
    }
    (det, store)
}

fn image() -> Image {
    let ds = generate_shapes(
        &ShapesSpec {
            seed: 4,
            ..ShapesSpec::default()
        },
        1,
    )
    .unwrap();
    ds.images[0].clone()
}

fn assert_close(a: &DetectionSet, b: &DetectionSet) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.category, y.category);
        assert!((x.score - y.score).abs() < 1e-9);
        let (p, q) = (x.bbox, y.bbox);
        let worst = [p.x1 - q.x1, p.y1 - q.y1, p.x2 - q.x2, p.y2 - q.y2]
            .iter()
            .fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(worst < 1e-9, "{x:?} vs {y:?}");
    }
}

#[test]
fn one_scale_without_flip_equals_single_pass() {
    let (det, store) = model();
    let img = image();
    let cfg = TtaConfig {
        scales: vec![128],
        flip: false,
        top_k: 25,
        ..TtaConfig::default()
    };
    assert_close(
        &tta_predict(&det, &store, &img, &cfg).unwrap(),
        &predict(&det, &store, &img, 128, 25).unwrap(),
    );
}

#[test]
fn duplicate_scale_changes_nothing() {
    let (det, store) = model();
    let img = image();
    for correspondence in [SlotCorrespondence::Index, SlotCorrespondence::ProposalIou] {
        let base = TtaConfig {
            scales: vec![96, 128],
            flip: true,
            correspondence,
            ..TtaConfig::default()
        };
        let dup = TtaConfig {
            scales: vec![96, 128, 128],
            weights: vec![1.0, 0.5, 0.5],
            ..base.clone()
        };
        assert_close(
            &tta_predict(&det, &store, &img, &base).unwrap(),
            &tta_predict(&det, &store, &img, &dup).unwrap(),
        );
    }
}

#[test]
fn scale_order_does_not_matter() {
    let (det, store) = model();
    let img = image();
    let a = TtaConfig {
        scales: vec![96, 128, 160],
        ..TtaConfig::default()
    };
    let b = TtaConfig {
        scales: vec![160, 96, 128],
        ..TtaConfig::default()
    };
    assert_close(
        &tta_predict(&det, &store, &img, &a).unwrap(),
        &tta_predict(&det, &store, &img, &b).unwrap(),
    );
}

#[test]
fn fused_boxes_stay_inside_the_image() {
    let (det, store) = model();
    let img = image();
    let cfg = TtaConfig {
        scales: vec![80, 128, 176],
        ..TtaConfig::default()
    };
    let out = tta_predict(&det, &store, &img, &cfg).unwrap();
    assert!(!out.is_empty() && out.len() <= cfg.top_k);
    let (w, h) = (img.width() as f64, img.height() as f64);
    for d in &out {
        let b = d.bbox;
        assert!(
            0.0 <= b.x1 && b.x1 <= b.x2 && b.x2 <= w && 0.0 <= b.y1 && b.y1 <= b.y2 && b.y2 <= h,
            "{b:?}"
        );
        assert!((0.0..=1.0).contains(&d.score));
    }
}
