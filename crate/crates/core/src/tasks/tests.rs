use super::*;
use std::io::Write;

#[test]
fn mqar_is_deterministic() {
    let cfg = MqarConfig::new(64, 4, 32);
    assert_eq!(gen_mqar(&cfg, 5, 20).unwrap(), gen_mqar(&cfg, 5, 20).unwrap());
    assert_ne!(gen_mqar(&cfg, 5, 20).unwrap(), gen_mqar(&cfg, 6, 20).unwrap());
}

#[test]
fn mqar_small_layout_satisfies_grammar() {
    let cfg = MqarConfig::new(32, 2, 12);
    let a = cfg.alphabet().unwrap();
    let data = gen_mqar(&cfg, 42, 200).unwrap();
    for ex in &data {
        check_example(ex, &a, Grammar::mqar()).unwrap();
        check_alphabets(ex, &a).unwrap();
        assert_eq!(ex.scored().count(), 2);
        assert_eq!(&ex.tokens[8..], &[0, 0, 0, 0]);
    }
    let ex = &data[0];
    assert!(a.keys.contains(&ex.tokens[0]) && a.values.contains(&ex.tokens[1]));
    assert_eq!(ex.tokens[5], a.placeholder);
}

#[test]
fn mqar_with_repeats_is_sound() {
    let cfg = MqarConfig {
        queries: Some(6),
        repeat_queries: true,
        ..MqarConfig::new(64, 3, 20)
    };
    let a = cfg.alphabet().unwrap();
    for ex in gen_mqar(&cfg, 1, 100).unwrap() {
        check_example(&ex, &a, Grammar::mqar()).unwrap();
    }
}

#[test]
fn mqar_capacity() {
    assert!(matches!(MqarConfig::new(256, 1000, 64).validate(), Err(Error::Capacity(_))));
    assert!(MqarConfig::new(256, 16, 64).validate().is_ok());
    assert!(MqarConfig::new(256, 17, 64).validate().is_err());
    // Largest pair count that fits a 512-token sequence.
    assert!(MqarConfig::new(8192, 128, 512).validate().is_ok());
    assert!(MqarConfig::new(8192, 256, 512).validate().is_err());
}

#[test]
fn degenerate_variants_match_icr() {
    let mut cfg = MadConfig::new(MadTask::Icr, 128, 64);
    let icr = gen_icr(&cfg, 3, 50).unwrap();
    cfg.noise_budget = 0;
    assert_eq!(gen_noisy_icr(&cfg, 3, 50).unwrap(), icr);
    cfg.fuzzy_width = 1;
    assert_eq!(gen_fuzzy_icr(&cfg, 3, 50).unwrap(), icr);
}

#[test]
fn noisy_targets_are_never_noise() {
    let cfg = MadConfig {
        noise_budget: 16,
        ..MadConfig::new(MadTask::NoisyIcr, 128, 64)
    };
    let a = cfg.validate().unwrap();
    let data = gen_mad(&cfg, 8, 500).unwrap();
    for ex in &data {
        for j in ex.scored() {
            assert!(!a.noise.contains(&ex.targets[j]));
        }
        assert_eq!(ex.tokens.iter().filter(|t| a.noise.contains(t)).count(), 16);
        check_example(ex, &a, Grammar::of(&cfg)).unwrap();
        check_alphabets(ex, &a).unwrap();
    }
}

#[test]
fn fuzzy_keys_are_tuples() {
    let cfg = MadConfig {
        fuzzy_width: 3,
        ..MadConfig::new(MadTask::FuzzyIcr, 64, 80)
    };
    let a = cfg.validate().unwrap();
    for ex in gen_mad(&cfg, 2, 100).unwrap() {
        check_example(&ex, &a, Grammar::of(&cfg)).unwrap();
        let j = ex.scored().next().unwrap();
        assert!(ex.tokens[j - 2..=j].iter().all(|t| a.keys.contains(t)));
    }
}

#[test]
fn selective_copy_reproduces_content() {
    let cfg = MadConfig {
        noise_budget: 12,
        content_len: 6,
        ..MadConfig::new(MadTask::SelectiveCopy, 64, 32)
    };
    let a = cfg.validate().unwrap();
    let data = gen_selective_copy(&cfg, 4, 200).unwrap();
    assert_eq!(data, gen_selective_copy(&cfg, 4, 200).unwrap());
    for ex in &data {
        check_example(ex, &a, Grammar::Copy).unwrap();
        check_alphabets(ex, &a).unwrap();
    }
    let plain = MadConfig { noise_budget: 0, ..cfg };
    for ex in gen_selective_copy(&plain, 4, 20).unwrap() {
        // zero noise: the content is the prefix itself
        let content: Vec<usize> = ex.tokens[..6].to_vec();
        let scored: Vec<usize> = ex.scored().map(|j| ex.targets[j]).collect();
        assert_eq!(scored, content);
        assert_eq!(ex.tokens[6], a.delimiter);
    }
}

#[test]
fn oracle_rejects_corruption() {
    let cfg = MqarConfig::new(32, 2, 12);
    let a = cfg.alphabet().unwrap();
    let mut ex = gen_mqar(&cfg, 1, 1).unwrap().remove(0);
    let j = ex.scored().next().unwrap();
    ex.targets[j] = if ex.targets[j] == a.values.start { a.values.start + 1 } else { a.values.start };
    assert!(check_example(&ex, &a, Grammar::mqar()).is_err());
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let data = gen_mqar(&MqarConfig::new(64, 4, 32), 1, 10).unwrap();
    save_dataset(&data, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), data);

    let full = Dataset {
        header: Some(Header {
            task: "mqar".into(),
            seed: 1,
            config: serde_json::to_value(MqarConfig::new(64, 4, 32)).unwrap(),
        }),
        train: data[..7].to_vec(),
        eval: data[7..].to_vec(),
    };
    full.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), full);
}

#[test]
fn empty_file_and_truncated_line() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("e.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert!(load_dataset(&empty).unwrap().is_empty());

    let path = dir.path().join("t.jsonl");
    let data = gen_mqar(&MqarConfig::new(64, 4, 32), 1, 3).unwrap();
    save_dataset(&data, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let cut = text.len() - 20;
    let mut f = std::fs::File::create(&path).unwrap();
    f.write_all(&text.as_bytes()[..cut]).unwrap();
    match load_dataset(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
}
