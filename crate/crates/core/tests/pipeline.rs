//! Data files on disk through training, checkpoint files and the analyses.

use gather_excite::analysis::{self, SelectivityHistogram};
use gather_excite::data::{self, NormStats, Split, Variant};
use gather_excite::train::{self, Checkpoint, Experiment, ScheduleSpec, TrainConfig, Trainer};
use gather_excite::zoo::{ArchSpec, GePlacement, Order, Probes};

fn experiment(seed: u64) -> Experiment {
    let mut arch = ArchSpec::preset("cifar-resnet-8").unwrap();
    arch.width_divisor = 4;
    Experiment {
        arch,
        placement: Some("theta:e2:all".parse::<GePlacement>().unwrap()),
        seed,
        train: TrainConfig {
            batch_size: 16,
            epochs: 2,
            schedule: ScheduleSpec::FixedStep {
                lr: 0.05,
                factor: 10.0,
                every: 30,
            },
            ..TrainConfig::default()
        },
    }
}

#[test]
fn cifar_files_to_checkpoint_and_analyses() {
    let dir = tempfile::tempdir().unwrap();
    let train_set = data::synthetic(Variant::Cifar10, Split::Train, 80, 1);
    let test_set = data::synthetic(Variant::Cifar10, Split::Test, 24, 1);
    data::write_cifar(dir.path(), &train_set).unwrap();
    data::write_cifar(dir.path(), &test_set).unwrap();
    let train_set = data::load_cifar(dir.path(), Variant::Cifar10, Split::Train).unwrap();
    let test_set = data::load_cifar(dir.path(), Variant::Cifar10, Split::Test).unwrap();
    assert_eq!((train_set.len(), test_set.len()), (80, 24));
    assert!(!train_set.is_standard_size());
    let stats = NormStats::for_train(dir.path(), &train_set);

    let mut trainer = Trainer::new(experiment(4)).unwrap();
    let mut rows = Vec::new();
    while !trainer.is_done() {
        rows.push(trainer.run_epoch(&train_set, &test_set, &stats).unwrap());
    }
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), [1, 2]);
    assert!(rows.iter().all(|r| r.train_loss.is_finite()));

    let path = dir.path().join("last.gekt");
    trainer.checkpoint().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.to_bytes(), trainer.checkpoint().to_bytes());
    let model = train::load_model(&ck).unwrap();
    let e = train::evaluate(&model, &test_set, &stats, 7, &Probes::default()).unwrap();
    let last = rows.last().unwrap();
    assert_eq!((e.top1, e.top5), (last.val_top1, last.val_top5));

    let h = analysis::class_selectivity(&model, &test_set, &stats, "conv4-1-relu", 10).unwrap();
    let width = model.plan().head_channels;
    assert_eq!(h.bins().iter().sum::<usize>(), width);
    let csv = dir.path().join("sel.csv");
    h.export(&csv).unwrap();
    let back = SelectivityHistogram::from_csv("conv4-1-relu", &std::fs::read_to_string(&csv).unwrap()).unwrap();
    assert_eq!(back.bins(), h.bins());

    let curves: Vec<_> = [Order::Ascending, Order::Descending]
        .into_iter()
        .map(|o| analysis::prune_curve(&model, &test_set, &stats, "conv3-1", o, 12).unwrap())
        .collect();
    let unpruned = 1.0 - e.top1;
    for c in &curves {
        assert_eq!(c.points.len(), 11);
        assert!((c.points[0].1 - unpruned).abs() < 1e-12);
    }
    assert_eq!(curves[0].points[10].1, curves[1].points[10].1);
    let parsed = analysis::parse_curves_csv(&analysis::curves_csv(&curves)).unwrap();
    assert_eq!(parsed.len(), 22);
}

#[test]
fn config_echo_identifies_the_experiment() {
    let t = Trainer::new(experiment(0)).unwrap();
    let ck = t.checkpoint();
    assert_ne!(ck.config_echo, experiment(1).echo());
    assert_eq!(ck.config_echo, experiment(0).echo());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let bytes = Trainer::new(experiment(0)).unwrap().checkpoint().to_bytes();
    for cut in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}
