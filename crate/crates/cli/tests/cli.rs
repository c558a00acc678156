use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_cmlm-da");

const SMALL: &str = "\
precision = f64
data.dir = data
synthetic.language = aligned
synthetic.train = 30
synthetic.valid = 6
synthetic.test = 6
nmt.layers = 1
nmt.d_model = 16
nmt.d_ff = 32
nmt.heads = 2
cmlm.layers = 1
cmlm.d_model = 16
cmlm.d_ff = 32
cmlm.heads = 2
cmlm.max_len = 32
cmlm.steps = 3
cmlm.batch_size = 4
train.epochs = 1
train.max_tokens = 100
train.warmup = 2
eval.beam = 2
eval.max_len = 12
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("exp.conf"), SMALL).unwrap();
    let o = run(t.path(), &["--config", "exp.conf", "--out", "data", "prepare-data"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    t
}

#[test]
fn help_and_version_exit_zero() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(t.path(), &["--help"])), 0);
    assert_eq!(code(&run(t.path(), &["--version"])), 0);
    assert_eq!(code(&run(t.path(), &["train-nmt", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(t.path(), &["frobnicate"])), 1);
    assert_eq!(code(&run(t.path(), &[])), 1);
    assert_eq!(code(&run(t.path(), &["evaluate"])), 1);
}

#[test]
fn config_errors_name_every_offending_key() {
    let t = tempfile::tempdir().unwrap();
    let o = run(t.path(), &["--set", "nope=1", "--set", "train.epochs=many", "prepare-data"]);
    assert_eq!(code(&o), 1);
    let e = stderr(&o);
    assert!(e.contains("nope") && e.contains("train.epochs"), "{e}");
    assert_eq!(e.trim().lines().count(), 1, "{e}");
    let o = run(t.path(), &["--config", "missing.conf", "prepare-data"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn missing_inputs_exit_two() {
    let t = setup();
    let o = run(t.path(), &["--config", "exp.conf", "evaluate", "--checkpoint", "none.ckpt"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("none.ckpt"));
    let o = run(t.path(), &["--set", "data.dir=elsewhere", "train-nmt"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    fs::write(t.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = run(t.path(), &["--config", "exp.conf", "evaluate", "--checkpoint", "junk.ckpt"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn augmentation_without_masked_lm_is_a_config_error() {
    let t = setup();
    let o = run(t.path(), &["--config", "exp.conf", "--set", "da.mode=soft", "--out", "n", "train-nmt"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("cmlm.source_checkpoint"));
    assert!(!t.path().join("n/nmt.ckpt").exists());
}

#[test]
fn masked_lm_for_the_wrong_side_is_rejected() {
    let t = setup();
    let o = run(t.path(), &["--config", "exp.conf", "--out", "m", "train-cmlm", "--side", "target"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(
        t.path(),
        &[
            "--config",
            "exp.conf",
            "--set",
            "da.mode=soft",
            "--set",
            "da.decoder=false",
            "--set",
            "cmlm.source_checkpoint=m/cmlm.target.both.ckpt",
            "train-nmt",
        ],
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn prepare_data_writes_manifest_and_is_reproducible() {
    let t = setup();
    let o = run(t.path(), &["--config", "exp.conf", "--out", "again", "prepare-data"]);
    assert_eq!(code(&o), 0);
    for f in ["manifest.txt", "vocab.txt", "train.src.ids", "test.tgt.txt"] {
        assert_eq!(fs::read(t.path().join("data").join(f)).unwrap(), fs::read(t.path().join("again").join(f)).unwrap());
    }
    let manifest = fs::read_to_string(t.path().join("data/manifest.txt")).unwrap();
    assert!(manifest.starts_with("# config_digest="));
    assert!(manifest.contains("file=train.src.ids sha256="));
    let o = run(t.path(), &["--config", "exp.conf", "--seed", "9", "--out", "other", "prepare-data"]);
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(t.path().join("data/train.src.ids")).unwrap(), fs::read(t.path().join("other/train.src.ids")).unwrap());
}

#[test]
fn text_corpus_goes_through_bpe() {
    let t = tempfile::tempdir().unwrap();
    let src = "the small house\nthe big house\na small cat\n";
    let tgt = "das kleine haus\ndas grosse haus\neine kleine katze\n";
    for (n, body) in [("train.de", tgt), ("train.en", src), ("test.en", src), ("test.de", tgt)] {
        fs::write(t.path().join(n), body).unwrap();
    }
    let args = [
        "--set", "data.train_src=train.en", "--set", "data.train_tgt=train.de",
        "--set", "data.test_src=test.en", "--set", "data.test_tgt=test.de",
        "--set", "bpe.merges=10", "--out", "bpe", "prepare-data",
    ];
    let o = run(t.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let merges = fs::read_to_string(t.path().join("bpe/merges.txt")).unwrap();
    assert!(merges.lines().count() >= 1);
    let ids = fs::read_to_string(t.path().join("bpe/test.src.ids")).unwrap();
    assert_eq!(ids.lines().count(), 3);
    assert!(!t.path().join("bpe/valid.src.ids").exists());
}

#[test]
fn outputs_carry_the_config_digest() {
    let t = setup();
    let o = run(t.path(), &["--config", "exp.conf", "--out", "n", "train-nmt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let digest = stderr(&o).trim().strip_prefix("config_digest=").unwrap().to_string();
    let metrics = fs::read_to_string(t.path().join("n/metrics.txt")).unwrap();
    assert!(metrics.starts_with(&format!("# config_digest={digest} seed=0\n")));
    assert!(metrics.lines().nth(1).unwrap().starts_with("step=1 loss="));
    let o = run(t.path(), &["--config", "exp.conf", "--out", "n", "evaluate", "--checkpoint", "n/nmt.ckpt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let hyp = fs::read_to_string(t.path().join("n/hyp.test.txt")).unwrap();
    assert!(hyp.starts_with(&format!("# config_digest={digest}")));
    assert_eq!(hyp.lines().count(), 7);
    let b = fs::read_to_string(t.path().join("n/bleu.test.txt")).unwrap();
    assert!(b.contains("bleu="), "{b}");
}

#[test]
fn resume_rejects_a_checkpoint_from_another_config() {
    let t = setup();
    let o = run(t.path(), &["--config", "exp.conf", "--out", "n", "train-nmt"]);
    assert_eq!(code(&o), 0);
    let o = run(t.path(), &["--config", "exp.conf", "--set", "train.warmup=3", "--out", "n", "train-nmt", "--resume", "n/nmt.ckpt"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn significance_of_identical_systems() {
    let t = setup();
    let a = "# config_digest=00 seed=0\nx y z\nq r\n";
    fs::write(t.path().join("a.txt"), a).unwrap();
    fs::write(t.path().join("r.txt"), "x y z\nq r s\n").unwrap();
    let o = run(t.path(), &["--out", "s", "significance", "--hyp-a", "a.txt", "--hyp-b", "a.txt", "--refs", "r.txt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("p_value=1.000000"));
    fs::write(t.path().join("short.txt"), "x y z\n").unwrap();
    let o = run(t.path(), &["significance", "--hyp-a", "a.txt", "--hyp-b", "short.txt", "--refs", "r.txt"]);
    assert_eq!(code(&o), 2);
    let o = run(t.path(), &["--set", "significance.samples=10", "significance", "--hyp-a", "a.txt", "--hyp-b", "a.txt", "--refs", "r.txt"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn consistency_check_reports_and_dumps() {
    let t = setup();
    let o = run(t.path(), &["--config", "exp.conf", "--out", "m", "train-cmlm", "--side", "source", "--mode", "mono"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(t.path().join("m/cmlm.source.mono.loss.txt").exists());
    let o = run(t.path(), &["--config", "exp.conf", "--out", "m", "consistency-check", "--checkpoint", "m/cmlm.source.mono.ckpt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(t.path().join("m/consistency.source.txt")).unwrap();
    assert!(report.contains("side=source mode=mono"), "{report}");
    let dump = fs::read_to_string(t.path().join("m/consistency.source.tsv")).unwrap();
    assert_eq!(dump.lines().nth(1), Some("pair\tposition\tgold\tpredicted\tprobability"));
}

#[test]
fn sweep_table_has_one_row_per_gamma() {
    let t = setup();
    for side in ["source", "target"] {
        let o = run(t.path(), &["--config", "exp.conf", "--out", "m", "train-cmlm", "--side", side]);
        assert_eq!(code(&o), 0);
    }
    let o = run(
        t.path(),
        &[
            "--config", "exp.conf",
            "--set", "cmlm.source_checkpoint=m/cmlm.source.both.ckpt",
            "--set", "cmlm.target_checkpoint=m/cmlm.target.both.ckpt",
            "--out", "sw", "sweep-gamma", "--gammas", "0,0.5",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(t.path().join("sw/sweep.txt")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "gamma\tbleu\tconfig_digest");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0\t") && rows[2].starts_with("0.5\t"));
}
