use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "schedule.resolutions=1,2,4",
    "schedule.scales=0.25,0.5,1",
    "ae.widths=8,8",
    "ae.groups=4",
    "ae.latent_dim=4",
    "ae.codebook_size=16",
    "data.count=6",
    "data.degradations_per_image=1",
    "rqvae.pretrain_steps=3",
    "rqvae.steps=3",
    "rqvae.batch_size=2",
    "finetune.steps=3",
    "finetune.batch_size=2",
    "var.depth=1",
    "var.width=8",
    "var.heads=2",
    "var.steps=3",
    "var.batch_size=2",
];

fn hvsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hvsr")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = hvsr(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn with_config<'a>(mut args: Vec<&'a str>, overrides: &[&'a str]) -> Vec<&'a str> {
    for o in overrides {
        args.push("--set");
        args.push(o);
    }
    args
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for (dir, seed) in [(&a, "seed=4"), (&b, "seed=4"), (&c, "seed=5")] {
        ok(&["synth", "--out", s(dir), "--count", "5", "--resolution", "16", "--set", seed]);
    }
    let (da, db) = (dir_bytes(&a), dir_bytes(&b));
    assert_eq!(da.len(), 6);
    assert!(da.iter().any(|(n, _)| n == "manifest.txt"));
    assert_eq!(da, db);
    assert_ne!(da, dir_bytes(&c));
}

#[test]
fn full_pipeline_on_a_tiny_model() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name);
    let (ae, var, data) = (p("ae.hvck"), p("var.hvck"), p("data"));
    ok(&with_config(vec!["synth", "--out", s(&data)], TINY));
    ok(&with_config(vec!["rqvae-train", "--data", s(&data), "--out", s(&ae)], TINY));
    let manifest = std::fs::read_to_string(p("manifest.txt")).unwrap();
    assert!(manifest.contains("command = rqvae-train") && manifest.contains("output ae.hvck = "));

    let image = data.join("00000.png");
    ok(&["tokenize", "--rqvae", s(&ae), "--image", s(&image), "--out", s(&p("t.hvtk"))]);
    for (scale, side) in [("1", 4), ("2", 8), ("3", 16)] {
        let out = p(&format!("d{scale}.png"));
        let log = ok(&["decode", "--rqvae", s(&ae), "--tokens", s(&p("t.hvtk")), "--scale", scale, "--out", s(&out)]);
        assert!(String::from_utf8_lossy(&log.stderr).contains(&format!("to {side}x{side}")));
    }

    ok(&with_config(vec!["var-train", "--rqvae", s(&ae), "--data", s(&data), "--out", s(&var)], TINY));
    ok(&["synth", "--out", s(&p("lr")), "--count", "1", "--resolution", "4"]);
    let lr = p("lr").join("00000.png");
    let sr = |out: &Path, scale: &str| {
        ok(&["sr", "--rqvae", s(&ae), "--var", s(&var), "--input", s(&lr), "--scale", scale, "--class", "1",
            "--cfg", "0.5", "--seed", "3", "--top-k", "4", "--out", s(out)]);
        dir_bytes(out)
    };
    let first = sr(&p("sr4"), "4");
    let names: Vec<_> = first.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["manifest.txt", "x1.png", "x2.png", "x4.png"]);
    assert_eq!(first, sr(&p("sr4_again"), "4"));
    let two = sr(&p("sr2"), "2");
    assert_eq!(two.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["manifest.txt", "x1.png", "x2.png"]);

    let report = p("report.txt");
    ok(&["eval", "--pred", s(&p("sr4")), "--ref", s(&p("sr4_again")), "--out", s(&report)]);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("image=x4.png psnr=inf ssim=1.000000"), "{text}");
    assert!(text.contains("lpips=unavailable"));
    assert!(text.contains("scale=16px"));

    // A transformer config whose autoencoder differs only in a digest-relevant
    // field is refused, and accepted with --force.
    let mut other: Vec<&str> = TINY.to_vec();
    other.push("ae.groups=2");
    let refused = hvsr(&with_config(vec!["var-train", "--rqvae", s(&ae), "--data", s(&data), "--out", s(&p("v2.hvck"))], &other));
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("digest"));
    ok(&with_config(
        vec!["var-train", "--rqvae", s(&ae), "--data", s(&data), "--out", s(&p("v2.hvck")), "--force"],
        &other,
    ));
}

#[test]
fn paper_schedule_scale_one_uses_three_levels() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name);
    let config = p("paper.cfg");
    std::fs::write(
        &config,
        "preset = paper\nae.widths = 4,4,4,4\nae.groups = 2\nae.codebook_size = 32\nrqvae.pretrain_steps = 0\nrqvae.steps = 0\nfinetune.steps = 0\ndata.count = 1\n",
    )
    .unwrap();
    ok(&["synth", "--config", s(&config), "--out", s(&p("data"))]);
    ok(&["rqvae-train", "--config", s(&config), "--data", s(&p("data")), "--out", s(&p("ae.hvck"))]);
    ok(&["tokenize", "--rqvae", s(&p("ae.hvck")), "--image", s(&p("data").join("00000.png")), "--out", s(&p("t.hvtk"))]);
    let log = ok(&["decode", "--rqvae", s(&p("ae.hvck")), "--tokens", s(&p("t.hvtk")), "--scale", "1", "--out", s(&p("d.png"))]);
    assert!(String::from_utf8_lossy(&log.stderr).contains("decoded levels 1..3 to 128x128"));
}

#[test]
fn bad_invocations_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.hvck");
    let out = hvsr(&["sr", "--rqvae", s(&missing), "--var", s(&missing), "--input", "x.png", "--scale", "3", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2), "invalid --scale is a usage error");
    let out = hvsr(&["sr", "--rqvae", s(&missing), "--var", s(&missing), "--input", "x.png", "--scale", "2", "--class", "2", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2), "class-free is not a user class");
    let out = hvsr(&["tokenize", "--rqvae", s(&missing), "--image", "x.png", "--out", "t"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let junk = tmp.path().join("junk.hvck");
    std::fs::write(&junk, b"HVCK\x01").unwrap();
    let out = hvsr(&["tokenize", "--rqvae", s(&junk), "--image", "x.png", "--out", "t"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("HVCK parse error"));
    let out = hvsr(&["synth", "--out", s(tmp.path()), "--set", "nope=1"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}
