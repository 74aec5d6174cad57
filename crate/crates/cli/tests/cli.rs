//! Configuration handling and command-line behaviour of the `adpm` binary.

use std::path::Path;
use std::process::{Command, Output};

use adpm_cli::{CliError, RunConfig};
use proptest::prelude::*;

fn adpm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adpm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn config_error(text: &str) -> bool {
    match RunConfig::parse(text).and_then(|c| c.validate().map(|_| c)) {
        Err(e) => e.exit_code() == 2,
        Ok(_) => false,
    }
}

#[test]
fn bad_configs_are_rejected_as_config_errors() {
    let corpus = [
        "nonsense",
        "unknown.key = 1",
        "seed = -1",
        "seed = 1\nseed = 2",
        "world.num_listings = 0",
        "world.num_taxonomies = 100000",
        "data.train_rows = 0",
        "data.max_len = many",
        "vocab.listing_k = 0",
        "vocab.num_oov = 0",
        "skipgram.mode = softmax",
        "skipgram.window = 0",
        "air.batch_size = 1",
        "air.negatives = 500",
        "ctr.adpm = 4",
        "ctr.adpm = 1,1",
        "ctr.pooling = median",
        "ctr.flavors = air,photo",
        "ctr.learned = listing:favorite",
        "ctr.learned = listing:teleport:8",
        "ctr.encoder = query:view",
        "ctr.num_heads = 0",
        "ctr.dropout = 1.5",
        "ctr.sampling = oversample",
        "ctr.topology = diagonal",
        "ctr.width_divisor = 0",
        "ctr.lr_max = nan",
        "ctr.calibrate = maybe",
        "pccvr.sampling = balanced_50_50",
        "ablate.task = cvr",
        "ablate.seeds = ",
        "ablate.seeds = 1,1",
    ];
    for text in corpus {
        assert!(config_error(text), "accepted: {text:?}");
    }
}

#[test]
fn comments_and_blank_lines_are_ignored() {
    let c = RunConfig::parse("# a comment\n\nseed = 7   \n  ctr.adpm = 1,3\n").unwrap();
    assert_eq!(c.seed().unwrap(), 7);
    let setup = c.task(adpm_core::ranking::Task::Ctr).unwrap();
    let a = setup.adpm.unwrap();
    assert!(a.use_component1 && !a.use_component2 && a.use_component3);
}

#[test]
fn parse_errors_name_the_line() {
    let e = RunConfig::parse("seed = 1\n\nbogus line\n").unwrap_err();
    assert!(matches!(e, CliError::Config(_)));
    assert!(e.to_string().contains('3'), "{e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_text_round_trips(
        seed in any::<u64>(),
        rows in 1usize..1_000_000,
        lr in 1e-6f64..1.0,
        comps in prop::sample::select(vec!["none", "full", "1", "2,3", "1,2,3"]),
    ) {
        let mut c = RunConfig::default();
        c.set("seed", &seed.to_string()).unwrap();
        c.set("data.train_rows", &rows.to_string()).unwrap();
        c.set("ctr.lr_max", &lr.to_string()).unwrap();
        c.set("ctr.adpm", comps).unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.get::<f64>("ctr.lr_max").unwrap(), lr);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = adpm(&["config", "--seed", "3"], dir.path());
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("seed=3\n"));

    let bad = adpm(&["config", "--set", "ctr.pooling=median"], dir.path());
    assert_eq!(bad.status.code(), Some(2));

    let no_dir = adpm(&["build-vocab"], dir.path());
    assert_eq!(no_dir.status.code(), Some(2));

    let missing = dir.path().join("nope");
    let gone = adpm(
        &["train", "ctr", "--run-dir", missing.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(gone.status.code(), Some(2));

    let junk = dir.path().join("junk.embt");
    std::fs::write(&junk, b"not a table").unwrap();
    let corrupt = adpm(&["dump", junk.to_str().unwrap()], dir.path());
    assert_eq!(corrupt.status.code(), Some(3));
}

#[test]
fn missing_pretrained_flavor_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run = run.to_str().unwrap();
    let small = [
        "--set",
        "data.train_rows=300",
        "--set",
        "data.valid_rows=200",
    ];
    let step = |args: &[&str]| {
        let mut all = args.to_vec();
        all.extend_from_slice(&["--run-dir", run]);
        all.extend_from_slice(&small);
        adpm(&all, dir.path())
    };
    assert!(step(&["gen-data"]).status.success());
    assert!(step(&["build-vocab"]).status.success());
    let out = step(&["train", "ctr", "--adpm", "full"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain air"));
    // Component two is what needs the table.
    assert!(step(&["train", "ctr", "--adpm", "1,3", "--epochs", "1"])
        .status
        .success());
}
