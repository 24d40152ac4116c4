mod common;

use std::fs;

use common::{files, fixture_png, forgedit, get, summary, tiny_model};

const QUICK: [&str; 6] = ["--min-steps", "2", "--max-steps", "3", "--batch-repeat", "2"];

#[test]
fn finetune_sweep_edit_report() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let png = fixture_png(dir.path());
    let data = dir.path().join("data");
    let (m, d, p) = (model.to_str().unwrap(), data.to_str().unwrap(), png.to_str().unwrap());

    let mut args = vec!["--model", m, "--data-dir", d, "finetune", "--image", p, "--seed", "5"];
    args.extend(QUICK);
    let a = forgedit(&args);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let b = forgedit(&args);
    assert_eq!(b.status.code(), Some(0));
    let (sa, sb) = (summary(&a), summary(&b));
    assert_eq!(get(&sa, "command"), "finetune");
    assert_eq!(get(&sa, "caption"), "a red circle on a white background");
    let (ra, rb) = (get(&sa, "run").to_string(), get(&sb, "run").to_string());
    assert!(ra.ends_with("run-0001") && rb.ends_with("run-0002"));
    for f in ["learned.ckpt", "original.ckpt", "embedding.bin", "loss_trace.csv", "config.json", "source.png"] {
        assert_eq!(fs::read(format!("{ra}/{f}")).unwrap(), fs::read(format!("{rb}/{f}")).unwrap(), "{f}");
    }
    assert_eq!(
        files(ra.as_ref()),
        ["config.json", "embedding.bin", "learned.ckpt", "loss_trace.csv", "manifest.json", "original.ckpt", "source.png"]
    );

    let mut other = vec!["--model", m, "--data-dir", d, "finetune", "--image", p, "--seed", "6"];
    other.extend(QUICK);
    let c = forgedit(&other);
    let rc = get(&summary(&c), "run").to_string();
    assert_ne!(fs::read(format!("{ra}/learned.ckpt")).unwrap(), fs::read(format!("{rc}/learned.ckpt")).unwrap());

    let sweep = |combination: &str, strategy: &str| {
        forgedit(&[
            "--data-dir", d, "sweep", "--run", &ra, "--target", "a blue circle on a white background",
            "--combination", combination, "--strategy", strategy, "--ddim-steps", "3",
        ])
    };
    for (combination, strategy, n) in
        [("subtraction", "none", 9), ("subtraction", "decoderattn", 15), ("projection", "none", 12)]
    {
        let out = sweep(combination, strategy);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let s = summary(&out);
        assert_eq!(get(&s, "candidates"), n.to_string());
        let names = files(get(&s, "out").as_ref());
        assert_eq!(names.iter().filter(|f| f.ends_with(".png")).count(), n);
        let manifest = fs::read_to_string(format!("{}/manifest.csv", get(&s, "out"))).unwrap();
        assert_eq!(manifest.lines().count(), n + 1);
    }
    assert_eq!(sweep("projection", "decoderattn").status.code(), Some(1));
    assert_eq!(sweep("subtraction", "nonsense").status.code(), Some(1));

    let out_png = dir.path().join("one.png");
    let e = forgedit(&[
        "edit", "--run", &ra, "--target", "a blue circle", "--combination", "subtraction", "--gamma", "1.2",
        "--ddim-steps", "3", "--out", out_png.to_str().unwrap(),
    ]);
    assert_eq!(e.status.code(), Some(0), "{}", String::from_utf8_lossy(&e.stderr));
    assert!(out_png.exists());
    assert!(get(&summary(&e), "fidelity").parse::<f64>().unwrap() <= 0.0);

    let r = forgedit(&["report", "--run", &ra]);
    assert_eq!(r.status.code(), Some(0));
    assert_eq!(get(&summary(&r), "steps"), "3");
}

#[test]
fn strategies_table() {
    let out = forgedit(&["strategies", "--layout", "default"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(text.lines().count(), 1 + 9 + 1);
    assert!(text.lines().any(|l| l.starts_with("decoderattn ")));
    assert_eq!(get(&summary(&out), "strategies"), "9");
}

#[test]
fn exit_codes() {
    assert_eq!(forgedit(&["--frobnicate"]).status.code(), Some(2));
    assert_eq!(forgedit(&["finetune"]).status.code(), Some(2));
    assert_eq!(forgedit(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let png = fixture_png(dir.path());
    let missing = dir.path().join("no-model");
    let out = forgedit(&["--model", missing.to_str().unwrap(), "finetune", "--image", png.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("forgedit pretrain"));
    let out = forgedit(&["report", "--run", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let png = fixture_png(dir.path());
    let cfg = dir.path().join("forgedit.toml");
    fs::write(
        &cfg,
        format!(
            "data_dir = {:?}\nmodel = {:?}\n[finetune]\nmin_steps = 2\nmax_steps = 4\nbatch_repeat = 2\n[captions]\ncaption = \"a red disc\"\n",
            dir.path().join("data"),
            model
        ),
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let out = forgedit(&["--config", c, "finetune", "--image", png.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&out);
    assert_eq!(get(&s, "steps"), "4");
    assert_eq!(get(&s, "caption"), "a red disc");
    let out = forgedit(&["--config", c, "finetune", "--image", png.to_str().unwrap(), "--max-steps", "3", "--caption", "x y"]);
    let s = summary(&out);
    assert_eq!(get(&s, "steps"), "3");
    assert_eq!(get(&s, "caption"), "x y");

    fs::write(&cfg, "unknown_key = 1\n").unwrap();
    assert_eq!(forgedit(&["--config", c, "strategies"]).status.code(), Some(1));
}
