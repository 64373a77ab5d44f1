//! The command-line pipeline end to end, driven in-process.
//!
//! `cargo run --release --example cli_pipeline`

use gcmcf::cli::run;

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    let cfg = p("run.cfg");
    std::fs::write(&cfg, "# zero-shot run\nbeta = 1\nepochs = 40\nseed = 4\n").expect("write config");
    let steps: Vec<Vec<String>> = vec![
        vec!["synth".into(), "--seed".into(), "4".into(), "--out".into(), p("w.ds")],
        vec!["train".into(), "--config".into(), cfg.clone(), "--bundle".into(), p("w.ds"), "--out".into(), p("m.ckpt"), "--quiet".into()],
        vec!["eval-zsl".into(), "--config".into(), cfg.clone(), "--bundle".into(), p("w.ds"), "--checkpoint".into(), p("m.ckpt"), "--out".into(), p("zsl")],
        vec!["counterfact".into(), "--config".into(), cfg.clone(), "--bundle".into(), p("w.ds"), "--checkpoint".into(), p("m.ckpt"), "--out".into(), p("cf.csv"), "--samples".into(), "0,1".into()],
        vec!["faithfulness".into(), "--config".into(), cfg, "--bundle".into(), p("w.ds"), "--checkpoint".into(), p("m.ckpt"), "--out".into(), p("faith.json"), "--faith_samples".into(), "16".into()],
    ];
    for s in steps {
        let code = run(std::iter::once("gcmcf".to_string()).chain(s.iter().cloned()));
        println!("gcmcf {} -> exit {code}", s[0]);
    }
    println!("{}", std::fs::read_to_string(p("cf.csv")).unwrap_or_default());
    println!("bad config -> exit {}", run(["gcmcf", "train", "--beta", "-1", "--bundle", "x", "--out", "y"]));
}
