use proptest::prelude::*;
use xres::arch::{ArchSpec, BranchPoint, Pool, Stage, Variant};
use xres::config::{key_help, parse_arch, RunConfig, KEYS};
use xres::data::default_pairs;

fn arb_config() -> impl Strategy<Value = RunConfig> {
    let data = (3usize..=6, 4usize..=8, 5usize..2000, 0.0f64..=1.0, any::<u64>(), any::<u64>());
    let train = (
        2usize..64,
        1e-6f64..1.0,
        0.0f64..0.999,
        0.0f64..1e-2,
        1.5f64..20.0,
        1usize..10,
        0.0f64..0.1,
        0usize..5,
        1usize..100,
        any::<u64>(),
        any::<bool>(),
    );
    let arch = (0usize..3, 0usize..=2, 0usize..3, 0usize..1000, 1usize..500, any::<bool>());
    (data, train, arch).prop_map(|(d, t, a)| {
        let mut cfg = RunConfig::default();
        cfg.data.adjectives = d.0;
        cfg.data.nouns = d.1;
        cfg.data.pairs = default_pairs(d.0, d.1);
        cfg.data.images_per_pair = d.2;
        cfg.data.noise = d.3;
        cfg.data.seed = d.4;
        cfg.split_seed = d.5;
        cfg.train.batch_size = t.0;
        cfg.train.lr = t.1;
        cfg.train.momentum = t.2;
        cfg.train.weight_decay = t.3;
        cfg.train.lr_drop_factor = t.4;
        cfg.train.plateau_window = t.5;
        cfg.train.plateau_min_rel = t.6;
        cfg.train.max_drops = t.7;
        cfg.train.epochs = t.8;
        cfg.train.seed = t.9;
        cfg.train.flip = t.10;
        cfg.variant = Variant::ALL[a.0];
        cfg.arch.heads = ArchSpec::mini(&ArchSpec::synthetic_heads(d.0, d.1, cfg.data.pairs.len())).heads;
        cfg.arch.cross_layers = a.1;
        cfg.arch.stem.pool = [None, Some(Pool { kernel: 3, stride: 2, pad: 1 }), Some(Pool { kernel: 2, stride: 2, pad: 0 })][a.2];
        cfg.eval.interval = a.3;
        cfg.eval.batch_size = a.4;
        if a.5 {
            cfg.arch.stages.push(Stage { mid: 8, out: 40, blocks: 4, stride: 1 });
            cfg.arch.branch = Some(BranchPoint { stage: 3, block: 1 });
        }
        cfg
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn serialize_then_parse_is_identity(cfg in arb_config()) {
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn default_config_round_trips() {
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap(), cfg);
    assert_eq!(cfg.data.pairs.len() * cfg.data.images_per_pair, 12_000);
    assert_eq!(RunConfig::parse("").unwrap(), cfg);
}

#[test]
fn presets_round_trip_through_the_arch_section() {
    let heads = [("adjective", 117), ("pair", 553), ("noun", 167)];
    for spec in [ArchSpec::resnet50(&[("noun", 167)]), ArchSpec::resnet50_multitask(&heads)] {
        let text = xres::config::arch_section(&spec, Variant::Xs);
        assert_eq!(parse_arch(&text).unwrap(), (spec, Variant::Xs));
    }
}

#[test]
fn comments_and_blank_lines_are_ignored() {
    let cfg = RunConfig::parse("# run\n\n[train]\n  lr = 0.05  \n# trailing\n[eval]\ninterval=7\n").unwrap();
    assert_eq!(cfg.train.lr, 0.05);
    assert_eq!(cfg.eval.interval, 7);
}

#[test]
fn unknown_key_reports_its_line() {
    let e = RunConfig::parse("[train]\nlr = 0.1\nlearning_rate = 0.2\n").unwrap_err();
    assert_eq!(e.line, 3);
    assert!(e.to_string().starts_with("config line 3:"), "{e}");
    assert!(e.message.contains("learning_rate"));
}

#[test]
fn unknown_section_and_duplicates_are_rejected() {
    assert_eq!(RunConfig::parse("[model]\nx = 1\n").unwrap_err().line, 1);
    let e = RunConfig::parse("[eval]\ninterval = 1\ninterval = 2\n").unwrap_err();
    assert_eq!(e.line, 3);
    assert_eq!(RunConfig::parse("lr = 1\n").unwrap_err().line, 1);
    assert_eq!(RunConfig::parse("[train]\nlr 0.1\n").unwrap_err().line, 2);
}

#[test]
fn invalid_pair_table_reports_its_line() {
    let e = RunConfig::parse("[data]\nseed = 1\npairs = red:circle, red:blob\n").unwrap_err();
    assert_eq!(e.line, 3);
    assert!(e.message.contains("blob"), "{e}");
    // too few nouns for blue
    let e = RunConfig::parse("[data]\nadjectives = 3\npairs = red:circle, red:square, red:star, green:circle, green:ring, green:bar, blue:star\n").unwrap_err();
    assert_eq!(e.line, 3);
    assert!(e.message.contains("blue"), "{e}");
}

#[test]
fn arch_errors_point_at_the_key() {
    let e = RunConfig::parse("[arch]\nvariant = xs\nstages = 8:32:2:1, 16:64:0:2, 32:128:3:2\n").unwrap_err();
    assert_eq!(e.line, 3, "{e}");
    let e = RunConfig::parse("[arch]\nvariant = xz\n").unwrap_err();
    assert_eq!(e.line, 2);
    let e = RunConfig::parse("[train]\nmomentum = 1.5\n").unwrap_err();
    assert!(e.message.contains("momentum"));
}

#[test]
fn help_documents_every_key() {
    let help = key_help();
    for k in KEYS {
        assert!(help.contains(k.key), "{}", k.key);
        assert!(!k.doc.is_empty());
    }
    let text = RunConfig::default().serialize();
    let keys: Vec<&str> = text
        .lines()
        .filter_map(|l| l.split_once(" = ").map(|p| p.0))
        .collect();
    for key in keys {
        assert!(KEYS.iter().any(|k| k.key == key), "undocumented key {key}");
    }
}
