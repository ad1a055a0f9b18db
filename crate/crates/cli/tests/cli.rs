use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deblurpair_core::datagen::toy::toy_burst;
use deblurpair_core::imgproc::Image;
use deblurpair_core::io::{read_png, write_png};
use deblurpair_core::train::{latest_checkpoint, load_checkpoint, TrainConfig, TrainState};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_deblurpair"));
    c.env_remove("DEBLURPAIR_SEED").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn deblurpair")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// `scenes` toy bursts of 26 frames at 64x64.
fn toy_source(root: &Path, scenes: usize) {
    for s in 0..scenes {
        let seq = toy_burst("x", 40 + s as u64, 64, 26).unwrap();
        for (i, f) in seq.frames().iter().enumerate() {
            write_png(root.join(format!("scene{s}/{i}.png")), f).unwrap();
        }
    }
}

fn synth(src: &Path, out: &Path, seed: &str) -> Output {
    run(&["synth", "--src", p(src), "--out", p(out), "--seed", seed])
}

struct Trained {
    _tmp: TempDir,
    data: PathBuf,
    ckpt: PathBuf,
}

fn trained_merger(extra: &[&str]) -> Trained {
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("src");
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("ckpt");
    toy_source(&src, 3);
    assert!(synth(&src, &data, "4").status.success());
    let mut args = vec![
        "train",
        "--model",
        "merger",
        "--preset",
        "toy",
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
        "--epochs",
        "1",
        "--batch-size",
        "2",
        "--seed",
        "4",
    ];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    Trained { _tmp: tmp, data, ckpt }
}

#[test]
fn synth_without_src_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["synth", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["synth", "--src", p(&tmp.path().join("missing")), "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn synth_is_deterministic_and_reports_counts() {
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("src");
    toy_source(&src, 2);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let oa = synth(&src, &a, "9");
    assert!(oa.status.success());
    assert!(synth(&src, &b, "9").status.success());
    let text = stdout(&oa);
    assert!(text.contains("train: ") && text.contains("eval: "), "{text}");
    let ma = fs::read(a.join("manifest.jsonl")).unwrap();
    assert_eq!(ma, fs::read(b.join("manifest.jsonl")).unwrap());
    let line = String::from_utf8(ma).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    let noisy = first["paths"]["noisy"].as_str().unwrap();
    assert_eq!(fs::read(a.join(noisy)).unwrap(), fs::read(b.join(noisy)).unwrap());

    let mut splits = std::collections::BTreeMap::new();
    for l in line.lines() {
        let rec: serde_json::Value = serde_json::from_str(l).unwrap();
        let scene = rec["scene_id"].as_str().unwrap().to_string();
        let split = rec["split"].as_str().unwrap().to_string();
        assert!(a.join(&split).is_dir());
        assert_eq!(splits.entry(scene).or_insert(split.clone()), &split);
    }
    assert_eq!(splits.keys().collect::<Vec<_>>(), ["scene0", "scene1"]);
}

#[test]
fn seed_comes_from_the_environment_when_no_flag_is_given() {
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("src");
    toy_source(&src, 1);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let o = bin()
        .args(["synth", "--src", p(&src), "--out", p(&a)])
        .env("DEBLURPAIR_SEED", "17")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(synth(&src, &b, "17").status.success());
    assert_eq!(
        fs::read(a.join("manifest.jsonl")).unwrap(),
        fs::read(b.join("manifest.jsonl")).unwrap()
    );
}

#[test]
fn one_epoch_writes_one_checkpoint() {
    let t = trained_merger(&[]);
    let ckpts: Vec<_> = fs::read_dir(&t.ckpt)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    assert_eq!(ckpts, vec!["epoch_1.ckpt".to_string()]);
    assert!(t.ckpt.join("loss_log.jsonl").is_file());
    assert_eq!(load_checkpoint(&t.ckpt.join("epoch_1.ckpt")).unwrap().epoch, 1);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let t = trained_merger(&["--lr", "0"]);
    let state = load_checkpoint(&latest_checkpoint(&t.ckpt).unwrap().unwrap()).unwrap();
    assert!(state.step > 0);
    let mut cfg: TrainConfig = state.config.clone();
    cfg.learning_rate = 0.0;
    let fresh = TrainState::new(cfg).unwrap();
    assert_eq!(fresh.weights.params, state.weights.params);
}

#[test]
fn config_file_is_read_and_flags_win() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# defaults\nmodel = merger\nlearning_rate = oops\n").unwrap();
    let o = run(&["--config", p(&cfg), "train", "--data", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    // A bad manifest location is still an input error once the flag fixes the value.
    let o = run(&[
        "--config",
        p(&cfg),
        "train",
        "--lr",
        "0.001",
        "--preset",
        "toy",
        "--data",
        p(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest"));
}

#[test]
fn infer_matches_input_size_and_is_deterministic() {
    let t = trained_merger(&[]);
    let dir = t.data.parent().unwrap().join("pair");
    let size = |h, w| Image::from_fn(h, w, 3, |(y, x, c)| ((y * 7 + x * 3 + c * 5) % 50) as f64 / 60.0 + 0.1);
    for (h, w) in [(64, 64), (72, 40)] {
        let noisy = dir.join(format!("n{h}x{w}.png"));
        let blurry = dir.join(format!("b{h}x{w}.png"));
        write_png(&noisy, &size(h, w)).unwrap();
        write_png(&blurry, &size(h, w)).unwrap();
        let mut outs = Vec::new();
        for k in 0..2 {
            let out = dir.join(format!("o{h}x{w}_{k}.png"));
            let o = run(&[
                "infer",
                "--ckpt",
                p(&t.ckpt),
                "--noisy",
                p(&noisy),
                "--blurry",
                p(&blurry),
                "--out",
                p(&out),
            ]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            assert!(stdout(&o).contains("ms"));
            outs.push(fs::read(&out).unwrap());
            assert_eq!(read_png(&out).unwrap().dim(), (h, w, 3));
        }
        assert_eq!(outs[0], outs[1]);
    }
    let mismatched = run(&[
        "infer",
        "--ckpt",
        p(&t.ckpt),
        "--noisy",
        p(&dir.join("n64x64.png")),
        "--blurry",
        p(&dir.join("b72x40.png")),
        "--out",
        p(&dir.join("bad.png")),
    ]);
    assert_eq!(mismatched.status.code(), Some(2));
}

#[test]
fn eval_of_a_checkpoint_prints_a_table() {
    let t = trained_merger(&[]);
    let report = t.data.parent().unwrap().join("report.json");
    let o = run(&[
        "eval",
        "--ckpt",
        p(&t.ckpt),
        "--data",
        p(&t.data),
        "--report",
        p(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("PSNR"));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["aggregate"]["count"].as_u64().unwrap() > 0);
    assert!(r["per_image"][0]["inference_ms"].as_f64().is_some());
}

fn grey(v: f64) -> Image {
    Image::filled(16, 16, 3, v)
}

#[test]
fn eval_of_directories() {
    let tmp = TempDir::new().unwrap();
    let (pred, gt) = (tmp.path().join("pred"), tmp.path().join("gt"));
    write_png(pred.join("a.png"), &grey(0.4)).unwrap();
    write_png(gt.join("a.png"), &grey(0.4)).unwrap();
    let report = tmp.path().join("r.json");
    let o = run(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--report", p(&report)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("inf"));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("\"inf\""), "{text}");

    // A quarter of the pixels off by 0.2: MSE 0.01, so 20 dB.
    let (pred2, gt2) = (tmp.path().join("pred2"), tmp.path().join("gt2"));
    write_png(pred2.join("b.png"), &grey(102.0 / 255.0)).unwrap();
    let gt_img = Image::from_fn(
        16,
        16,
        3,
        |(y, x, _)| if y % 2 == 0 && x % 2 == 0 { 153.0 } else { 102.0 } / 255.0,
    );
    write_png(gt2.join("b.png"), &gt_img).unwrap();
    let o = run(&["eval", "--pred", p(&pred2), "--gt", p(&gt2), "--report", p(&report)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("20.00"));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let got = r["aggregate"]["mean_psnr_db"].as_f64().unwrap();
    assert!((got - 20.0).abs() < 1e-9, "{got}");

    let (pred3, gt3) = (tmp.path().join("pred3"), tmp.path().join("gt3"));
    write_png(pred3.join("c.png"), &grey(0.5)).unwrap();
    write_png(gt3.join("d.png"), &grey(0.5)).unwrap();
    assert_eq!(
        run(&["eval", "--pred", p(&pred3), "--gt", p(&gt3)]).status.code(),
        Some(2)
    );
}

#[test]
fn divergence_exits_with_code_3() {
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("src");
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("ckpt");
    toy_source(&src, 3);
    assert!(synth(&src, &data, "4").status.success());
    let o = run(&[
        "train",
        "--model",
        "merger",
        "--preset",
        "toy",
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
        "--epochs",
        "3",
        "--batch-size",
        "2",
        "--lr",
        "1e38",
    ]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(3), "{err}");
    assert!(err.contains("checkpoint"), "{err}");
}
