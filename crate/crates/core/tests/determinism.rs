//! Primary artifacts must not depend on the thread count.

use std::path::{Path, PathBuf};
use std::process::Command;

use tcrgpt::rl::{MockBehavior, MockServer};

const BIN: &str = env!("CARGO_BIN_EXE_tcrgpt");

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn run(threads: usize, out: &Path, args: &[&str]) {
    let status = Command::new(BIN)
        .args(args)
        .args(["--out", out.to_str().unwrap(), "--threads", &threads.to_string(), "--seed", "13"])
        .status()
        .unwrap();
    assert!(status.success(), "{args:?} with {threads} threads");
}

fn bytes(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn artifacts_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("tiny.toml");
    let corpus = fixture("clonal32.tsv");
    let server = MockServer::start("127.0.0.1:0", MockBehavior::Motif(3)).unwrap();
    let endpoint = server.endpoint();

    let mut reference: Option<Vec<Vec<u8>>> = None;
    for (i, threads) in [1, 1, 3].into_iter().enumerate() {
        let base = dir.path().join(format!("r{i}"));
        let train = base.join("train");
        run(threads, &train, &["train", "--config", &cfg, "--corpus", &corpus]);
        let ckpt = train.join("checkpoint.tcrg");
        let ckpt = ckpt.to_str().unwrap();
        let sample = base.join("sample");
        run(threads, &sample, &["sample", "--config", &cfg, "--checkpoint", ckpt]);
        let rl = base.join("rl");
        run(threads, &rl, &[
            "rl-finetune", "--config", &cfg, "--checkpoint", ckpt, "--peptide", "GILGFVFTL",
            "--endpoint", &endpoint,
        ]);
        let artifacts = vec![
            bytes(train.join("checkpoint.tcrg")),
            bytes(train.join("metrics/loss.csv")),
            bytes(train.join("config.resolved")),
            bytes(sample.join("samples.txt")),
            bytes(rl.join("checkpoint.tcrg")),
            bytes(rl.join("metrics/rl_trace.csv")),
        ];
        match &reference {
            None => reference = Some(artifacts),
            Some(r) => {
                for (k, (a, b)) in r.iter().zip(&artifacts).enumerate() {
                    assert!(a == b, "artifact {k} differs in run {i} ({threads} threads)");
                }
            }
        }
    }
}
