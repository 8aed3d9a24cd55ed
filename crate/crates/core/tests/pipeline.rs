use std::path::Path;

use dalnet::evaluation::EvalOptions;
use dalnet::network::{checkpoint, Device, ModelConfig};
use dalnet::pipeline::{self, viz, InferOptions, SynthConfig, TrainConfig, ANNOTATION_FILE};
use dalnet::synth::{read_dataset, write_dataset, DatasetRecord, Preprocess};
use dalnet::Error;

fn synth(dir: &Path, count: usize, first_index: u64) -> Vec<DatasetRecord> {
    let cfg = SynthConfig { count, first_index, ..SynthConfig::default() };
    pipeline::cmd_synth(&cfg, dir, false).unwrap()
}

fn tiny_train_config(data: &Path, out: &Path) -> TrainConfig {
    TrainConfig {
        train_data: data.join(ANNOTATION_FILE),
        out_dir: out.to_path_buf(),
        epochs: 1,
        batch_size: 2,
        model: ModelConfig {
            input_height: 64,
            input_width: 128,
            backbone_channels: [4, 8, 8, 8],
            fpn_channels: 8,
            generator_hidden: 8,
            ..ModelConfig::default()
        },
        preprocess: Preprocess {
            out_width: 128,
            out_height: 64,
            ..Preprocess::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn synth_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let ra = synth(&a, 3, 7);
    let rb = synth(&b, 3, 7);
    assert_eq!(ra, rb);
    for name in [ANNOTATION_FILE, "images/00007.png", "images/00009.png"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    // a non-empty directory is refused unless forced
    let cfg = SynthConfig { count: 1, ..SynthConfig::default() };
    assert!(pipeline::cmd_synth(&cfg, &a, false).is_err());
    assert!(pipeline::cmd_synth(&cfg, &a, true).is_ok());
}

#[test]
fn synth_zero_and_sixteen() {
    let root = tempfile::tempdir().unwrap();
    let empty = root.path().join("empty");
    assert!(synth(&empty, 0, 0).is_empty());
    assert!(read_dataset(&empty.join(ANNOTATION_FILE)).unwrap().is_empty());

    let full = root.path().join("full");
    synth(&full, 16, 0);
    let records = read_dataset(&full.join(ANNOTATION_FILE)).unwrap();
    assert_eq!(records.len(), 16);
    for r in &records {
        assert_eq!(r.lanes.len(), 2);
        assert!(full.join(&r.raw_file).is_file());
    }
}

#[test]
fn short_training_run_gives_usable_checkpoints() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data, 2, 0);
    let cfg = tiny_train_config(&data, &root.path().join("run"));
    let outcome = pipeline::train(&cfg).unwrap();
    assert_eq!(outcome.step_losses.len(), 1);
    assert_eq!(outcome.history.len(), 1);
    let log = std::fs::read_to_string(cfg.out_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    for path in [&outcome.final_checkpoint, &outcome.best_checkpoint] {
        let (model, meta) = checkpoint::load(path, &Device::Cpu).unwrap();
        assert_eq!(model.config(), &cfg.model);
        let stored: TrainConfig = serde_json::from_value(meta["train_config"].clone()).unwrap();
        assert_eq!(stored, cfg);
    }

    // inference: empty input list, then two identical runs
    let (model, _) = checkpoint::load(&outcome.final_checkpoint, &Device::Cpu).unwrap();
    let opts = InferOptions { threshold: 0.0, ..InferOptions::default() };
    let none = pipeline::infer_paths(&model, &cfg.preprocess, &[], &opts).unwrap();
    assert!(none.predictions.is_empty() && none.failures.is_empty());

    let inputs = pipeline::resolve_inputs(&[data.join(ANNOTATION_FILE)]).unwrap();
    assert_eq!(inputs.len(), 2);
    let first = pipeline::infer_paths(&model, &cfg.preprocess, &inputs, &opts).unwrap();
    let second = pipeline::infer_paths(&model, &cfg.preprocess, &inputs, &opts).unwrap();
    let records = |o: &pipeline::InferOutcome| o.predictions.iter().map(|p| p.record.clone()).collect::<Vec<_>>();
    assert_eq!(records(&first), records(&second));
    for p in &first.predictions {
        assert!(p.detections.len() <= opts.k_max);
        assert_eq!(p.record.lanes.len(), p.rails.len());
    }

    // unreadable inputs are reported, not fatal
    let missing = vec![("nope.png".to_string(), root.path().join("nope.png"))];
    let out = pipeline::infer_paths(&model, &cfg.preprocess, &missing, &opts).unwrap();
    assert_eq!(out.failures.len(), 1);

    // overlays, one per frame
    let frames: Vec<_> = first
        .predictions
        .iter()
        .map(|p| {
            let img = pipeline::data::load_image(&data.join(&p.record.raw_file)).unwrap();
            (p.record.raw_file.clone(), img, viz::Overlay::from_prediction(p))
        })
        .collect();
    let written = pipeline::write_overlays(&frames, &root.path().join("viz")).unwrap();
    assert_eq!(written.len(), 2);
    assert!(written[0].ends_with("00000_overlay.png"));
    let img = image::open(&written[0]).unwrap();
    assert_eq!((img.width(), img.height()), (1280, 720));
}

#[test]
fn diverging_run_aborts_with_non_finite_loss() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data, 2, 0);
    let cfg = TrainConfig {
        lr: 1e30,
        epochs: 20,
        batch_size: 1,
        ..tiny_train_config(&data, &root.path().join("run"))
    };
    match pipeline::train(&cfg) {
        Err(Error::NonFiniteLoss { batch, .. }) => assert!(batch > 0),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training with lr 1e30 should not finish"),
    }
}

#[test]
fn eval_files() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let gts = synth(&data, 3, 0);
    let gt_file = data.join(ANNOTATION_FILE);
    let opts = EvalOptions::default();

    let same = pipeline::cmd_eval(&gt_file, &gt_file, &opts).unwrap();
    assert_eq!(same.mf1, 1.0);
    assert!(same.thresholds.iter().all(|t| t.f1 == 1.0));

    let empty: Vec<DatasetRecord> = gts
        .iter()
        .map(|r| DatasetRecord { lanes: vec![], ..r.clone() })
        .collect();
    let empty_file = root.path().join("empty.jsonl");
    write_dataset(&empty_file, &empty).unwrap();
    let report = pipeline::cmd_eval(&empty_file, &gt_file, &opts).unwrap();
    assert_eq!((report.f1_50(), report.mf1, report.n_predictions), (0.0, 0.0, 0));

    let partial_file = root.path().join("partial.jsonl");
    write_dataset(&partial_file, &gts[..2]).unwrap();
    assert!(matches!(pipeline::cmd_eval(&partial_file, &gt_file, &opts), Err(Error::EvalMismatch(_))));
}
