use posematch::decode::{decode_multi, decode_single, MultiConfig};
use posematch::evalkit::{make_benchmark, pose_iou, BenchMode, BenchmarkSpec, Level};
use posematch::model::Model;
use posematch::refine::{refine_match, RefineConfig};
use posematch::synth::dataset::{read_dataset, write_dataset, ImageCorpus};
use posematch::synth::read_manifest;
use posematch::synth::scene::write_corpus;
use posematch::trainer::{train, PairSource, TrainConfig, TrainOutputs};

#[test]
fn synth_train_save_load_match() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(&dir.path().join("corpus"), 4, 160, 1).unwrap();
    let records = read_manifest(&manifest).unwrap();
    let corpus = ImageCorpus::load(&records).unwrap();
    let cfg = TrainConfig {
        seed: 2,
        steps: 6,
        batch: 1,
        template_size: (20, 20),
        search_size: (64, 64),
        ..Default::default()
    };
    let data = dir.path().join("data");
    let pcfg = cfg.pair_config();
    write_dataset(&data, (0..3).map(|i| corpus.pair(2, i, &pcfg)), 1.0 / 6.0, 2.5).unwrap();
    let pairs = read_dataset(&data).unwrap();
    assert_eq!(pairs.len(), 3);

    let weights = dir.path().join("w.bin");
    let out = TrainOutputs {
        weights: Some(weights.clone()),
        ..Default::default()
    };
    let (model, logs) = train(cfg, &PairSource::Pairs(pairs.clone()), &out).unwrap();
    assert_eq!(logs.len(), 6);
    let loaded = Model::load_weights(&weights).unwrap();
    for (a, b) in loaded.params().params().iter().zip(model.params().params()) {
        assert_eq!((&a.name, a.value.data()), (&b.name, b.value.data()));
    }

    let p = &pairs[0];
    let maps = loaded.forward(&p.template, &p.search).unwrap();
    assert_eq!((maps.width, maps.height), (64, 64));
    let single = decode_single(&maps, 2.5).unwrap();
    single.validate().unwrap();
    let cfg = MultiConfig {
        score_thresh: 0.01,
        ..Default::default()
    };
    let multi = decode_multi(&maps, 2.5, (20, 20), &cfg).unwrap();
    assert!(!multi.is_empty());
    assert_eq!(multi[0].pose, single.pose);
    let (refined, _) = refine_match(&p.search, &p.template, &single, &RefineConfig::default()).unwrap();
    assert!(refined.refined);
}

#[test]
fn paste_benchmark_gt_matches_itself() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(dir.path(), 3, 320, 4).unwrap();
    let records = read_manifest(&manifest).unwrap();
    let mut spec = BenchmarkSpec::new(Level::S2, (36, 36), 5, 9, BenchMode::Paste);
    spec.instances = (2, 4);
    let samples = make_benchmark(&spec, &records).unwrap();
    for s in &samples {
        assert!((2..=4).contains(&s.gts.len()));
        for (i, a) in s.gts.iter().enumerate() {
            assert!((pose_iou(a, a, (36, 36)) - 1.0).abs() < 1e-9);
            assert!((0.5..=2.0).contains(&a.sx) && (0.5..=2.0).contains(&a.sy));
            for b in &s.gts[i + 1..] {
                assert!(pose_iou(a, b, (36, 36)) < 0.5);
            }
        }
    }
}
