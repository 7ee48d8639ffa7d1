use std::fs;

use gigassl::datagen::{generate, generate_corpus, GenConfig};
use gigassl::ssl::{pretrain, train_step, Model, PretrainPaths, TrainConfig, Trainer};
use gigassl::{seeding, Error};
use rand::SeedableRng;

fn corpus(n_slides: usize) -> GenConfig {
    GenConfig {
        n_slides,
        n_tiles: 32,
        n_augs: 4,
        feat_dim: 8,
        nuisance_dims: 2,
        nuisance_strength: 0.3,
        grid_extent: 8 * 256,
        seed: 5,
        ..GenConfig::default()
    }
}

fn small_train(epochs: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        block_channels: vec![16, 16],
        out_dim: 16,
        proj_dim: 16,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn first_loss_is_near_uniform_and_training_lowers_it() {
    let banks = generate(&corpus(32)).unwrap().banks();
    let cfg = small_train(50, 16);
    let mut model = Model::for_training(&cfg, 8).unwrap();
    let batch: Vec<_> = banks.iter().take(16).collect();
    let mut rng = seeding::Rng::seed_from_u64(1);
    let first = train_step(&mut model, &batch, &cfg, &mut rng).unwrap();
    let uniform = (2.0 * 16.0 - 1.0f64).ln();
    assert!((first / uniform - 1.0).abs() < 0.2, "{first} vs {uniform}");

    let mut trainer = Trainer::new(cfg, 8).unwrap();
    trainer.run(&banks).unwrap();
    let last = *trainer.losses.last().unwrap();
    assert!(last < trainer.losses[0], "{:?}", trainer.losses);
}

#[test]
fn training_is_deterministic() {
    let banks = generate(&corpus(8)).unwrap().banks();
    let run = || {
        let mut t = Trainer::new(small_train(3, 4), 8).unwrap();
        t.run(&banks).unwrap();
        (t.losses.clone(), t.model.to_checkpoint(&t.header()).unwrap().to_bytes())
    };
    assert_eq!(run(), run());
}

#[test]
fn pretrain_smoke_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let banks = dir.path().join("banks");
    generate_corpus(&corpus(4), &banks).unwrap();
    let paths = PretrainPaths {
        bank_dir: banks,
        checkpoint: dir.path().join("m.ckpt"),
        log: Some(dir.path().join("loss.csv")),
        report: Some(dir.path().join("report.json")),
        resume: None,
    };
    let cfg = TrainConfig {
        shared_aug: false,
        ..small_train(2, 2)
    };
    let report = pretrain(&cfg, &paths).unwrap();
    assert_eq!(report.epochs_completed, 2);
    assert!(!report.shared_aug);
    let (_, header) = Model::load(&paths.checkpoint).unwrap();
    assert_eq!(header.epochs_completed, 2);
    let log = fs::read_to_string(paths.log.as_ref().unwrap()).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,loss");
    assert_eq!(lines.len(), 3);
    let json = fs::read_to_string(paths.report.as_ref().unwrap()).unwrap();
    assert!(json.contains("\"shared_aug\": false"), "{json}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let banks = dir.path().join("banks");
    generate_corpus(&corpus(8), &banks).unwrap();
    let paths = |name: &str, resume: Option<&str>| PretrainPaths {
        bank_dir: banks.clone(),
        checkpoint: dir.path().join(name),
        log: None,
        report: None,
        resume: resume.map(|r| dir.path().join(r)),
    };
    let full = pretrain(&small_train(3, 4), &paths("full.ckpt", None)).unwrap();
    pretrain(&small_train(2, 4), &paths("half.ckpt", None)).unwrap();
    let resumed = pretrain(&small_train(3, 4), &paths("resumed.ckpt", Some("half.ckpt"))).unwrap();
    assert_eq!(full.losses, resumed.losses);
    assert_eq!(
        fs::read(dir.path().join("full.ckpt")).unwrap(),
        fs::read(dir.path().join("resumed.ckpt")).unwrap()
    );
}

#[test]
fn pretrain_errors() {
    let dir = tempfile::tempdir().unwrap();
    let paths = PretrainPaths {
        bank_dir: dir.path().join("missing"),
        checkpoint: dir.path().join("m.ckpt"),
        log: None,
        report: None,
        resume: None,
    };
    match pretrain(&small_train(1, 2), &paths) {
        Err(Error::Io { path, .. }) => assert!(path.ends_with("missing")),
        other => panic!("{other:?}"),
    }
    let one = GenConfig {
        n_classes: 1,
        n_slides: 2,
        ..corpus(2)
    };
    generate_corpus(&one, dir.path()).unwrap();
    fs::remove_file(dir.path().join("slide_0001.gsb")).unwrap();
    let paths = PretrainPaths {
        bank_dir: dir.path().to_path_buf(),
        ..paths
    };
    assert!(matches!(pretrain(&small_train(1, 2), &paths), Err(Error::InvalidConfig(_))));
}

