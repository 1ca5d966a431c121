use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# 32 px LPM, 16 px side input
lpm.high_res = 32
lpm.patch_size = 8
lpm.layers = 2
lpm.dim = 16
lpm.heads = 2
lpm.mlp_ratio = 2
side.low_res = 16
side.layers = 2
side.reduction = 2
side.prompts = 3
side.token_ratio = 0.25
train.epochs = 2
train.batch_size = 4
";

fn fpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpt")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = fpt(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    fpt(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    std::fs::write(d("tiny.cfg"), TINY).unwrap();
    let cfg = d("tiny.cfg");

    let out = ok(&["synth", "--out", s(&d("data")), "--n", "24", "--classes", "2", "--high-res", "32", "--seed", "3"]);
    assert!(out.contains("24 images"), "{out}");
    assert!(d("data/labels.csv").exists());
    ok(&["init-lpm", "--config", s(&cfg), "--out", s(&d("lpm.fptw"))]);
    ok(&["preload", "--data", s(&d("data")), "--weights", s(&d("lpm.fptw")), "--config", s(&cfg), "--out", s(&d("a.fptc"))]);
    ok(&["preload", "--data", s(&d("data")), "--weights", s(&d("lpm.fptw")), "--config", s(&cfg), "--out", s(&d("b.fptc"))]);
    assert_eq!(std::fs::read(d("a.fptc")).unwrap(), std::fs::read(d("b.fptc")).unwrap());

    for (model, log) in [("side1.fptw", "log1.csv"), ("side2.fptw", "log2.csv")] {
        ok(&["train", "--data", s(&d("data")), "--cache", s(&d("a.fptc")), "--config", s(&cfg), "--out", s(&d(model)), "--log", s(&d(log))]);
    }
    let log = std::fs::read_to_string(d("log1.csv")).unwrap();
    assert_eq!(log, std::fs::read_to_string(d("log2.csv")).unwrap());
    assert!(log.starts_with("epoch,split,loss,auc\n"));

    let eval = ok(&["eval", "--data", s(&d("data")), "--cache", s(&d("a.fptc")), "--model", s(&d("side1.fptw")), "--split", "test", "--config", s(&cfg)]);
    assert!(eval.contains("split test") && eval.contains("\nauc "), "{eval}");

    let t1 = ok(&["profile", "--table1", "87.12", "0.0103", "0.0318"]);
    assert!(t1.starts_with("ppe 86.73\n"), "{t1}");
    let prof = ok(&["profile", "--config", s(&cfg), "--skip-memory"]);
    let r_line = prof.lines().find(|l| l.starts_with("r ")).unwrap();
    let learn: f64 = field(&prof, "learnable_params");
    let total: f64 = field(&prof, "total_params");
    assert_eq!(r_line, format!("r {}", learn / total));
    let full = ok(&["profile", "--config", s(&cfg)]);
    assert!(field(&full, "m") < 1.0);

    let img = d("data/img_00001.png");
    for out in ["v1.pgm", "v2.pgm"] {
        ok(&["viz", "--image", s(&img), "--cache", s(&d("a.fptc")), "--out", s(&d(out)), "--model", s(&d("side1.fptw")), "--config", s(&cfg)]);
    }
    assert_eq!(std::fs::read(d("v1.pgm")).unwrap(), std::fs::read(d("v2.pgm")).unwrap());
    assert_eq!(std::fs::read(d("v1_mask.pgm")).unwrap(), std::fs::read(d("v2_mask.pgm")).unwrap());

    // Exit codes: configuration 1, data 2.
    std::fs::write(d("other.cfg"), TINY.replace("0.25", "0.5")).unwrap();
    assert_eq!(
        code(&["train", "--data", s(&d("data")), "--cache", s(&d("a.fptc")), "--config", s(&d("other.cfg")), "--out", s(&d("x.fptw")), "--log", s(&d("x.csv"))]),
        1
    );
    assert_eq!(code(&["eval", "--data", s(&d("missing")), "--cache", s(&d("a.fptc")), "--model", s(&d("side1.fptw")), "--config", s(&cfg)]), 2);
    std::fs::write(d("bad.cfg"), "side.nonsense = 1\n").unwrap();
    assert_eq!(code(&["profile", "--config", s(&d("bad.cfg")), "--skip-memory"]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["--help"]), 0);
}

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} ")))
        .unwrap_or_else(|| panic!("{key} missing from {text}"))
        .parse()
        .unwrap()
}
