use sscvae::checkpoint::component_hash;
use sscvae::config::TrainConfig;
use sscvae::data::{generate_toy_dataset, ToyConfig};
use sscvae::networks::COMPONENTS;
use sscvae::training::{train_stage1, train_stage2, train_stage3, CascadeData, MetricsLog, Model, Stage};
use sscvae::Error;

fn data() -> CascadeData {
    generate_toy_dataset(&ToyConfig { n_tiles: 3, ..ToyConfig::default() }, 21).unwrap().into()
}

fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for (k, v) in [
        ("epochs_stage1", "1"),
        ("epochs_stage2", "1"),
        ("epochs_stage3", "1"),
        ("batch_size", "4"),
        ("max_train_samples", "8"),
        ("max_val_samples", "8"),
        ("stage2_high", "3"),
        ("stage2_low", "3"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn hashes(m: &Model) -> Vec<String> {
    COMPONENTS.iter().map(|c| component_hash(&m.nets, c)).collect()
}

fn changed(before: &[String], after: &[String]) -> Vec<&'static str> {
    COMPONENTS.iter().zip(before.iter().zip(after)).filter(|(_, (a, b))| a != b).map(|(c, _)| *c).collect()
}

#[test]
fn stages_touch_only_their_own_components() {
    let (cfg, data) = (tiny(), data());
    let mut m = Model::init(&cfg).unwrap();
    let mut log = MetricsLog::default();
    let h0 = hashes(&m);
    train_stage1(&cfg, &data, &mut m, &mut log).unwrap();
    let h1 = hashes(&m);
    let c1 = changed(&h0, &h1);
    assert!(!c1.contains(&"gan_generator") && !c1.contains(&"gan_discriminator"), "{c1:?}");
    assert!(c1.contains(&"salient_encoder") && c1.contains(&"image_decoder"), "{c1:?}");

    let r2 = train_stage2(&cfg, &data, &mut m, &mut log).unwrap();
    let h2 = hashes(&m);
    // epoch 0 (the stage-1 encoder) is a candidate for the kept weights
    let expected: Vec<&str> = if r2.best_epoch == 0 { vec![] } else { vec!["salient_encoder"] };
    assert_eq!(changed(&h1, &h2), expected);

    train_stage3(&cfg, &data, &mut m, &mut log).unwrap();
    let h3 = hashes(&m);
    let c3 = changed(&h2, &h3);
    assert!(c3.iter().all(|c| c.starts_with("gan_")), "{c3:?}");
    assert!(!c3.is_empty());
    assert_eq!(m.stage, Stage::Stage3);
}

#[test]
fn zero_epochs_keep_the_initial_weights() {
    let (mut cfg, data) = (tiny(), data());
    cfg.set("epochs_stage1", "0").unwrap();
    let mut m = Model::init(&cfg).unwrap();
    let before = hashes(&m);
    let r = train_stage1(&cfg, &data, &mut m, &mut MetricsLog::default()).unwrap();
    assert_eq!(r.best_epoch, 0);
    assert_eq!(hashes(&m), before);
}

#[test]
fn training_is_reproducible() {
    let (cfg, data) = (tiny(), data());
    let run = || {
        let mut m = Model::init(&cfg).unwrap();
        let mut log = MetricsLog::default();
        train_stage1(&cfg, &data, &mut m, &mut log).unwrap();
        train_stage2(&cfg, &data, &mut m, &mut log).unwrap();
        (hashes(&m), log.to_text())
    };
    assert_eq!(run(), run());
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let (cfg, data) = (tiny(), data());
    let mut m = Model::init(&cfg).unwrap();
    let mut log = MetricsLog::default();
    assert!(matches!(train_stage2(&cfg, &data, &mut m, &mut log), Err(Error::Prerequisite(_))));
    assert!(matches!(train_stage3(&cfg, &data, &mut m, &mut log), Err(Error::Prerequisite(_))));
}

#[test]
fn checkpoints_round_trip_through_disk() {
    let (cfg, data) = (tiny(), data());
    let mut m = Model::init(&cfg).unwrap();
    train_stage1(&cfg, &data, &mut m, &mut MetricsLog::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.ckpt");
    m.save(&path, &cfg).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.stage, Stage::Stage1);
    assert_eq!(hashes(&back), hashes(&m));
}
