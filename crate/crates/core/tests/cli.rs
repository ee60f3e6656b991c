use std::path::Path;

use irrfactor::cli::{cmd_pipeline, cmd_report, cmd_synth, format_report, CliError, ConfigError, RunConfig, SplitPoint};

const SMALL: &str = "\
seed = 5
synthetic.n_periods = 120
stock.steps = 100
market.epochs = 2
forecaster.width = 8
forecaster.blocks = 1
forecaster.heads = 2
forecaster.head_hidden = 8
forecaster.max_epochs = 2
";

fn small_config(out: &Path, extra: &str) -> RunConfig {
    let mut cfg = RunConfig::parse(&format!("{SMALL}{extra}")).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn unknown_keys_are_rejected_by_name() {
    let err = RunConfig::parse("seed = 1\nmarket.lernrate = 0.1\n").unwrap_err();
    assert!(matches!(err, ConfigError::UnknownKey(ref k) if k == "market.lernrate"), "{err}");
}

#[test]
fn bad_values_and_inconsistent_settings_are_rejected() {
    assert!(matches!(
        RunConfig::parse("market.epochs = many").unwrap_err(),
        ConfigError::BadValue { .. }
    ));
    assert!(matches!(
        RunConfig::parse("stock.lambda1 = -1").unwrap_err(),
        ConfigError::Invalid(_)
    ));
    assert!(matches!(
        RunConfig::parse("data.csv = x.csv\nsynthetic.n_stocks = 4").unwrap_err(),
        ConfigError::Invalid(_)
    ));
    assert!(matches!(
        RunConfig::parse("just some words").unwrap_err(),
        ConfigError::Syntax { line: 1, .. }
    ));
}

#[test]
fn test_split_before_training_end_is_refused() {
    let err = RunConfig::parse(&format!("{SMALL}split.train_end = 90\nsplit.test_start = 60\n")).unwrap_err();
    assert!(matches!(err, ConfigError::Invalid(_)), "{err}");

    // A fraction only resolves against the panel, so the pipeline catches it.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), "split.train_fraction = 0.75\n");
    cfg.test_start = Some(SplitPoint::Index(60));
    let err = cmd_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().contains("test split starts at period 60"), "{err}");
}

#[test]
fn report_names_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    match cmd_report(dir.path()) {
        Err(CliError::MissingArtifact(p)) => assert!(p.ends_with("report.txt")),
        other => panic!("expected a missing artifact, got {other:?}"),
    }
}

#[test]
fn synth_output_is_stamped_and_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pa = cmd_synth(&small_config(a.path(), "")).unwrap();
    let pb = cmd_synth(&small_config(b.path(), "")).unwrap();
    let (ta, tb) = (std::fs::read_to_string(pa).unwrap(), std::fs::read_to_string(pb).unwrap());
    assert_eq!(ta, tb);
    let cfg = small_config(a.path(), "");
    assert!(ta.starts_with(&format!("# {}", cfg.stamp())), "{}", &ta[..80.min(ta.len())]);
}

#[test]
fn rerun_restores_deleted_artifacts_from_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let report = cmd_pipeline(&cfg).unwrap();
    let names = ["report.txt", "predictions.csv", "series.csv", "factors.csv"];
    let before: Vec<Vec<u8>> = names.iter().map(|n| read(dir.path(), n)).collect();
    for n in ["report.txt", "predictions.csv", "series.csv"] {
        std::fs::remove_file(dir.path().join(n)).unwrap();
    }
    for c in ["stock.json", "market.json", "forecaster.json"] {
        assert!(dir.path().join("checkpoints").join(c).exists(), "{c}");
    }
    let again = cmd_pipeline(&cfg).unwrap();
    assert_eq!(report, again);
    for (n, b) in names.iter().zip(&before) {
        assert_eq!(&read(dir.path(), n), b, "{n} changed on resume");
    }
    assert_eq!(cmd_report(dir.path()).unwrap(), format_report(&report));
}

#[test]
fn forecaster_settings_do_not_invalidate_factor_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    cmd_pipeline(&small_config(dir.path(), "")).unwrap();
    let ckpt = dir.path().join("checkpoints");
    let stock = read(&ckpt, "stock.json");
    let market = read(&ckpt, "market.json");
    let forecaster = read(&ckpt, "forecaster.json");

    cmd_pipeline(&small_config(dir.path(), "forecaster.lr = 0.005\n")).unwrap();
    assert_eq!(read(&ckpt, "stock.json"), stock);
    assert_eq!(read(&ckpt, "market.json"), market);
    assert_ne!(read(&ckpt, "forecaster.json"), forecaster);
}
