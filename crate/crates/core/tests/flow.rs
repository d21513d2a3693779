use certilabel::data_io;
use certilabel::pipeline::{decode_candidates, select_pseudo_labels};
use certilabel::simulator::{generate_scene, simulate_teacher, GridShape, Scene};
use certilabel::*;

fn close(a: &BBox, b: &BBox, tol: f64) -> bool {
    a.corners().iter().zip(b.corners()).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn pseudo_labels_survive_a_trip_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        scenes: 80,
        seed: 12,
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&cfg).unwrap();
    let ids: Vec<u64> = out.dataset.categories().iter().map(|c| c.id).collect();
    let sets = out.labels(Variant::Certainty).unwrap();
    data_io::write_dataset(&out.dataset, tmp.path().join("d.json")).unwrap();
    data_io::write_detections(sets, &ids, tmp.path().join("p.json")).unwrap();

    let dataset = data_io::load_dataset(tmp.path().join("d.json")).unwrap();
    assert_eq!(dataset.annotations().len(), out.dataset.annotations().len());
    for (a, b) in dataset.annotations().iter().zip(out.dataset.annotations()) {
        assert_eq!((a.id, a.image_id, a.class_id), (b.id, b.image_id, b.class_id));
        assert!(close(&a.bbox, &b.bbox, 1e-9));
    }
    let records = data_io::load_detections(tmp.path().join("p.json")).unwrap();
    let by_image = data_io::detections_by_image(&records, &dataset).unwrap();
    for set in sets {
        let loaded = by_image.get(&set.image_id).map_or(&[][..], Vec::as_slice);
        assert_eq!(loaded.len(), set.labels.len());
        for (d, l) in loaded.iter().zip(&set.labels) {
            assert_eq!((d.class_id, d.p, d.v), (l.class_id, l.p, l.v));
            assert!(close(&d.bbox, &l.bbox, 1e-9));
        }
    }
}

fn mirrored(scene: &Scene) -> Scene {
    Scene {
        objects: scene
            .objects
            .iter()
            .map(|(b, c)| (b.hflip(scene.width).unwrap(), *c))
            .collect(),
        ..scene.clone()
    }
}

#[test]
fn flipped_inference_maps_back_to_the_same_labels() {
    let spec = SceneSpec::default();
    let teacher = TeacherNoiseModel::noiseless();
    let params = PipelineParams::default();
    let m = spec.num_classes;
    let (tau, alpha) = (vec![0.7; m], vec![1.0; m]);
    for i in 0..30 {
        let scene = generate_scene(&spec, 4, i);
        let flipped = mirrored(&scene);
        let label = |s: &Scene| {
            let raw = simulate_teacher(s, &spec, &teacher, GridShape::from(&params), 4).unwrap();
            let dets = decode_candidates(&raw, m, &params).unwrap();
            select_pseudo_labels(s.image_id, &dets, &tau, &alpha, &params).unwrap()
        };
        let direct = label(&scene);
        let back = label(&flipped).hflip(scene.width).unwrap();
        assert_eq!(direct.labels.len(), back.labels.len());
        for (a, b) in direct.labels.iter().zip(&back.labels) {
            assert_eq!(a.class_id, b.class_id);
            assert!(close(&a.bbox, &b.bbox, 1e-9));
        }
    }
}

#[test]
fn report_csv_reads_back() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        scenes: 40,
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&cfg).unwrap();
    let rows = out.report.rows();
    data_io::write_csv_rows(&rows, tmp.path().join("r.csv")).unwrap();
    assert_eq!(data_io::read_csv_rows(tmp.path().join("r.csv")).unwrap(), rows);
    let json: ExperimentReport = data_io::read_json_as({
        data_io::write_json(&out.report, tmp.path().join("r.json")).unwrap();
        tmp.path().join("r.json")
    })
    .unwrap();
    assert_eq!(json, out.report);
}

#[test]
fn balance_state_matches_a_direct_sum() {
    let cfg = ExperimentConfig {
        scenes: 60,
        seed: 2,
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&cfg).unwrap();
    let params = cfg.pipeline;
    let mut mass = vec![0.0; cfg.scene.num_classes];
    let mut count = vec![0u64; cfg.scene.num_classes];
    for i in 0..cfg.scenes as u64 {
        let scene = generate_scene(&cfg.scene, cfg.seed, i);
        let raw = simulate_teacher(&scene, &cfg.scene, &cfg.teacher, GridShape::from(&params), cfg.seed).unwrap();
        for d in decode_candidates(&raw, cfg.scene.num_classes, &params).unwrap() {
            mass[d.class_id] += d.p * d.v;
            count[d.class_id] += 1;
        }
    }
    assert_eq!(out.report.balance.n, count);
    for (a, b) in out.report.balance.c.iter().zip(&mass) {
        assert!((a - b).abs() < 1e-9);
    }
}
