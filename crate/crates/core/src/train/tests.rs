use super::*;
use crate::model::ModelConfig;
use crate::pooling::PoolingKind;
use crate::synthetic::{SyntheticCorpus, SyntheticSpec};

fn corpus(speakers: usize) -> SyntheticCorpus {
    SyntheticCorpus::new(SyntheticSpec {
        speakers,
        utterances_per_speaker: 10,
        train_per_speaker: 10,
        frames: 12,
        dim: 6,
        noise: 1.0,
        seed: 4,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn config(steps: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.train.batch_size = 4;
    c.train.micro_batch = 2;
    c.train.crop_frames = 8;
    c.train.steps = Some(steps);
    c.train.precision = 64;
    c.train.seed = 11;
    c.schedule.max_lr = 1e-2;
    c.model = ModelConfig {
        feature_dim: 6,
        mlp_hidden: 8,
        use_layer_weighting: false,
        ..ModelConfig::default()
    };
    c.aam.scale = 8.0;
    c
}

fn losses(outcome: &TrainOutcome) -> Vec<f64> {
    outcome.metrics.iter().map(|r| r.loss).collect()
}

fn run(c: &RunConfig, corpus: &SyntheticCorpus, options: &TrainOptions) -> TrainOutcome {
    train(&corpus.train_manifest(), corpus, c, options).unwrap()
}

fn opts(workers: usize) -> TrainOptions {
    TrainOptions {
        workers,
        ..TrainOptions::default()
    }
}

#[test]
fn loss_decreases_on_separable_data() {
    let data = corpus(2);
    let out = run(&config(200), &data, &opts(1));
    let l = losses(&out);
    assert_eq!(l.len(), 200);
    let head: f64 = l[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = l[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn baseline_trains_head_only() {
    let data = corpus(3);
    let mut c = config(60);
    c.train.pooling = EncoderKind::Pooling(PoolingKind::Mean);
    let out = run(&c, &data, &opts(1));
    assert_eq!(out.last.params.len(), 1);
    let l = losses(&out);
    assert!(l[50..].iter().sum::<f64>() < l[..10].iter().sum::<f64>());
}

#[test]
fn deterministic_and_worker_independent() {
    let data = corpus(3);
    let c = config(12);
    let a = losses(&run(&c, &data, &opts(1)));
    let b = losses(&run(&c, &data, &opts(1)));
    let w = losses(&run(&c, &data, &opts(3)));
    assert_eq!(a, b);
    assert_eq!(a, w);
}

#[test]
fn resume_replays_uninterrupted_run() {
    let data = corpus(2);
    let c = config(15);
    let dir = tempfile::tempdir().unwrap();
    let full = run(
        &c,
        &data,
        &TrainOptions {
            out: Some(dir.path().join("full")),
            workers: 1,
            ..TrainOptions::default()
        },
    );
    // 20 utterances at batch 4: five steps per epoch.
    let ck = Checkpoint::load(dir.path().join("full/epoch-001")).unwrap();
    assert_eq!(ck.step, 5);
    let resumed = run(
        &c,
        &data,
        &TrainOptions {
            out: Some(dir.path().join("resumed")),
            workers: 2,
            resume: Some(ck),
            ..TrainOptions::default()
        },
    );
    assert_eq!(losses(&resumed), losses(&full)[5..].to_vec());
    assert_eq!(resumed.last, full.last);
}

#[test]
fn writes_artifacts() {
    let data = corpus(2);
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &config(10),
        &data,
        &TrainOptions {
            out: Some(dir.path().to_path_buf()),
            workers: 1,
            ..TrainOptions::default()
        },
    );
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 11);
    assert_eq!(lines[1], out.metrics[0].csv());
    for name in ["epoch-001", "epoch-002", "last", "best"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert_eq!(Checkpoint::load(dir.path().join("last")).unwrap(), out.last);
}

#[test]
fn checkpoint_round_trip_and_encoder() {
    let data = corpus(2);
    let out = run(&config(3), &data, &opts(1));
    let back = Checkpoint::from_tensors(&out.last.to_tensors()).unwrap();
    assert_eq!(back, out.last);
    let enc = back.encoder::<f64>().unwrap();
    let e = enc.embed(&data.utterance(0, 0)).unwrap();
    assert_eq!(e.len(), 6);
    assert_eq!(back.head::<f64>().unwrap().classes(), 2);
}

#[test]
fn stop_at_limits_steps() {
    let data = corpus(2);
    let out = run(
        &config(20),
        &data,
        &TrainOptions {
            workers: 1,
            stop_at: Some(7),
            ..TrainOptions::default()
        },
    );
    assert_eq!(out.metrics.len(), 7);
    assert_eq!(out.last.step, 7);
    assert_eq!(out.last.total_steps, 20);
}

#[test]
fn rejects_single_speaker() {
    let data = corpus(2);
    let one = Manifest::from_entries(
        data.train_manifest()
            .entries()
            .iter()
            .filter(|e| e.speaker == "spk000")
            .cloned()
            .collect(),
    )
    .unwrap();
    assert!(matches!(
        train(&one, &data, &config(2), &opts(1)),
        Err(Error::Data(_))
    ));
}

#[test]
fn schedule_through_config() {
    let c = RunConfig::default();
    assert_eq!(lr_at(&c, 0, 100).unwrap(), 1e-3 / 25.0);
    assert!((lr_at(&c, 30, 100).unwrap() - 1e-3).abs() < 1e-15);
    assert!(matches!(lr_at(&c, 100, 100), Err(Error::Usage(_))));
    assert_eq!(steps_per_epoch(&c, 100), 3);
    assert_eq!(total_steps(&c, 100), 15);
}

#[test]
fn single_precision_runs() {
    let data = corpus(2);
    let mut c = config(5);
    c.train.precision = 32;
    let out = run(&c, &data, &opts(1));
    assert!(out.metrics.iter().all(|r| r.loss.is_finite() && r.grad_norm > 0.0));
}
