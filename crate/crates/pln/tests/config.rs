use pln::config::{RunConfig, PRESETS};

#[test]
fn every_preset_resolves_and_validates() {
    for (name, _) in PRESETS {
        let cfg = RunConfig::from_toml("seed = 1", Some(name)).unwrap();
        assert_eq!(cfg.preset.as_deref(), Some(*name));
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e:#}"));
    }
}

#[test]
fn synthetic_is_the_default_preset() {
    let cfg = RunConfig::from_toml("seed = 1", None).unwrap();
    assert_eq!(cfg.preset.as_deref(), Some("synthetic"));
    assert_eq!(cfg.model.stages, [8, 32]);
    assert_eq!(cfg.data.generator.n_samples - cfg.data.n_val, 2000);
}

#[test]
fn seed_is_mandatory() {
    assert!(RunConfig::from_toml("[model]\nd = 8", None).is_err());
}

#[test]
fn derived_keys_are_rejected() {
    for text in [
        "seed = 1\n[model]\nseed = 2",
        "seed = 1\n[model]\nd_raw = 3",
        "seed = 1\n[model]\nvocab_size = 3",
        "seed = 1\n[train]\nseed = 2",
        "seed = 1\n[data.generator]\nseed = 2",
    ] {
        assert!(RunConfig::from_toml(text, None).is_err(), "{text}");
    }
}

#[test]
fn unknown_keys_and_presets_are_rejected() {
    assert!(RunConfig::from_toml("seed = 1\n[model]\nstagez = [8]", None).is_err());
    assert!(RunConfig::from_toml("seed = 1", Some("no-such")).is_err());
}

#[test]
fn validation_catches_shape_errors() {
    let bad = [
        "seed = 1\n[model]\nstages = [8, 24]",
        "seed = 1\n[model]\nstages = [32, 8]",
        "seed = 1\n[eval]\nstrategy = 3",
        "seed = 1\n[data]\nn_val = 2500",
        "seed = 1\n[[ablate.variants]]\nname = \"a\"\n[[ablate.variants]]\nname = \"a\"",
        "seed = 1\n[[ablate.variants]]\nname = \"a\"\nstages = [3, 5]",
    ];
    for text in bad {
        let cfg = RunConfig::from_toml(text, None).unwrap();
        assert!(cfg.validate().is_err(), "{text}");
    }
}

#[test]
fn resolved_config_round_trips() {
    let cfg = RunConfig::from_toml("seed = 9\n[model]\nuc = false", Some("tacos-like")).unwrap();
    let again = RunConfig::from_toml(&cfg.to_toml(), None).unwrap();
    assert_eq!(again.to_toml(), cfg.to_toml());
    assert_eq!(again.generator(), cfg.generator());
}
