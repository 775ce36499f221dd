//! Run configuration: parsing, environment overrides and validation.

use std::path::PathBuf;

use reworld::config::RunConfig;
use reworld::Error;

fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn empty_text_gives_the_defaults() {
    let cfg = RunConfig::from_toml("", env(&[])).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn serialized_config_parses_back() {
    let mut cfg = RunConfig::default();
    cfg.seed = 42;
    cfg.hero.beta = 0.5;
    cfg.fpo.iterations = 7;
    let text = cfg.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text, env(&[])).unwrap(), cfg);
}

#[test]
fn environment_overrides_file_values() {
    let text = "seed = 3\n[fpo]\nclip_eps = 0.3\n";
    let cfg = RunConfig::from_toml(
        text,
        env(&[
            ("REWORLD__FPO__CLIP_EPS", "0.1"),
            ("REWORLD__SEED", "9"),
            ("REWORLD__OUT_DIR", "runs/x"),
            ("REWORLD__HERO__TRAIN__STEPS", "12"),
            ("REWORLD__POOL__KIND_WEIGHTS", "[2.0, 2.0, 2.0, 1.0, 1.0, 1.0]"),
            ("OTHER__SEED", "5"),
        ]),
    )
    .unwrap();
    assert_eq!(cfg.fpo.clip_eps, 0.1);
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.out_dir, PathBuf::from("runs/x"));
    assert_eq!(cfg.hero.train.steps, 12);
    assert_eq!(cfg.pool.kind_weights[0], 2.0);
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(matches!(RunConfig::from_toml("[fpo]\nclip = 0.1\n", env(&[])), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_toml("sed = 1\n", env(&[])), Err(Error::Config(_))));
    assert!(matches!(
        RunConfig::from_toml("", env(&[("REWORLD__HERO__BETTA", "0.5")])),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        RunConfig::from_toml("", env(&[("REWORLD__SEED__X", "1")])),
        Err(Error::Config(_))
    ));
}

#[test]
fn invalid_values_are_rejected() {
    for text in [
        "seed = \"one\"\n",
        "[split]\nfractions = [0.5, 0.2, 0.2]\n",
        "[hero]\nbeta = 1.5\n",
        "[fpo]\nclip_eps = 0.0\n",
        "[align]\ncheckpoint_every = 0\n",
        "[sft]\nhidden = []\n",
        "out_dir = \"\"\n",
        "[pool\n",
    ] {
        assert!(matches!(RunConfig::from_toml(text, env(&[])), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn files_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seed = 17\n").unwrap();
    assert_eq!(RunConfig::load(Some(&path)).unwrap().seed, 17);
    assert!(matches!(RunConfig::load(Some(&dir.path().join("none.toml"))), Err(Error::Io { .. })));
}
