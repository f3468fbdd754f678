use conceptvae::evaluation::Protocol;
use conceptvae::Error;
use conceptvae_cli::config::{apply_overrides, parse_config_str, ExperimentConfig, SCHEMA_VERSION};
use proptest::prelude::*;

fn vars(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn config_key(e: Error) -> String {
    match e {
        Error::Config { key, .. } => key,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn empty_file_gives_the_published_hyperparameters() {
    let cfg = parse_config_str("").unwrap();
    assert_eq!(cfg.schema_version, SCHEMA_VERSION);
    assert_eq!(cfg.train.weights.beta, 0.2);
    assert_eq!(cfg.train.weights.gamma, 1.0);
    assert_eq!(cfg.train.weights.alpha, vec![0.9]);
    assert_eq!(cfg.model.latent_dim, 128);
    assert_eq!(cfg.model.frames, 25);
    assert_eq!((cfg.model.concepts[0].start, cfg.model.concepts[0].size), (0, 64));
    assert_eq!(cfg.train.learning_rate, 1e-4);
    assert_eq!(cfg.train.batch_size, 8);
    assert_eq!(cfg.train.stage_epochs, [800, 500, 300]);
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn concept_covering_the_latent_space_is_rejected() {
    let text = "[model]\nlatent_dim = 16\nconcepts = [{ name = \"SF\", start = 0, size = 16 }]\n";
    let err = parse_config_str(text).unwrap_err();
    assert!(err.to_string().contains("no reserved remainder"), "{err}");
}

#[test]
fn unknown_keys_and_bad_types_name_the_key() {
    let key = config_key(parse_config_str("[train]\nlearning_rat = 0.1\n").unwrap_err());
    assert_eq!(key, "learning_rat");
    let err = parse_config_str("[train]\nbatch_size = \"eight\"\n").unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err}");
    let key = config_key(parse_config_str("schema_version = 7\n").unwrap_err());
    assert_eq!(key, "schema_version");
    let key = config_key(parse_config_str("[train]\nbatch_size = 0\n").unwrap_err());
    assert_eq!(key, "train.batch_size");
    let key = config_key(parse_config_str("[interpret]\nslice = 3\n").unwrap_err());
    assert_eq!(key, "interpret.slice");
}

#[test]
fn round_trip_is_idempotent() {
    for cfg in [ExperimentConfig::default(), ExperimentConfig::desk()] {
        let text = cfg.to_toml().unwrap();
        let back = parse_config_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
        assert_eq!(back.hash(), cfg.hash());
    }
}

#[test]
fn protocol_and_selector_parse() {
    let text = "[eval.protocol]\nkind = \"cross_validation\"\nfolds = 5\n[interpret]\nselector = \"by_prediction\"\n";
    let cfg = parse_config_str(text).unwrap();
    assert_eq!(cfg.eval.protocol, Protocol::CrossValidation { folds: 5 });
    assert_eq!(cfg.interpret.selector, conceptvae::interpret::Selector::ByPrediction);
}

#[test]
fn env_overrides_reach_nested_keys() {
    let base = ExperimentConfig::desk();
    let cfg = apply_overrides(
        &base,
        vars(&[
            ("CONCEPTVAE_TRAIN_LEARNING_RATE", "0.002"),
            ("CONCEPTVAE_TRAIN_WEIGHTS_BETA", "0.5"),
            ("CONCEPTVAE_MODEL_CONCEPTS_0_SIZE", "8"),
            ("CONCEPTVAE_SEED", "41"),
            ("CONCEPTVAE_COHORT_N_SUBJECTS", "90"),
            ("CONCEPTVAE_INTERPRET_CONCEPT", "SF"),
            ("UNRELATED", "1"),
        ]),
    )
    .unwrap();
    assert_eq!(cfg.train.learning_rate, 0.002);
    assert_eq!(cfg.train.weights.beta, 0.5);
    assert_eq!(cfg.model.concepts[0].size, 8);
    assert_eq!(cfg.seed, 41);
    assert_eq!(cfg.cohort.n_subjects, 90);

    let err = apply_overrides(&base, vars(&[("CONCEPTVAE_TRAIN_NOPE", "1")])).unwrap_err();
    assert_eq!(config_key(err), "CONCEPTVAE_TRAIN_NOPE");
    // overrides are validated like file contents
    let err = apply_overrides(&base, vars(&[("CONCEPTVAE_MODEL_CONCEPTS_0_SIZE", "32")])).unwrap_err();
    assert!(err.to_string().contains("no reserved remainder"), "{err}");
    let err = apply_overrides(&base, vars(&[("CONCEPTVAE_TRAIN_BATCH_SIZE", "many")])).unwrap_err();
    assert!(matches!(err, Error::Config { .. }));
}

#[test]
fn hash_ignores_the_output_directory() {
    let a = ExperimentConfig::desk();
    let mut b = a.clone();
    b.out_dir = "elsewhere".into();
    assert_eq!(a.hash(), b.hash());
    b.seed = 1;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn conflicting_training_seed_is_rejected() {
    let key = config_key(parse_config_str("seed = 3\n[train]\nseed = 4\n").unwrap_err());
    assert_eq!(key, "train.seed");
    let cfg = parse_config_str("seed = 3\n").unwrap();
    assert_eq!(cfg.train_config().seed, 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn random_valid_configs_round_trip(
        d in 4usize..64,
        frac in 0.1f64..0.9,
        beta in 0.0f64..2.0,
        seed in 0u64..i64::MAX as u64,
        lr in 1e-5f64..1e-2,
    ) {
        let mut cfg = ExperimentConfig::desk();
        cfg.model.latent_dim = d;
        cfg.model.concepts[0].size = ((d as f64 * frac) as usize).clamp(1, d - 1);
        cfg.train.weights.beta = beta;
        cfg.train.learning_rate = lr;
        cfg.seed = seed;
        cfg.validate().unwrap();
        let back = parse_config_str(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
