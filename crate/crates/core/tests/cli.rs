mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proptest::prelude::*;
use sdlnet::cli::{RunConfig, SEED_ENV};
use sdlnet::geometry::Quadrangle;
use sdlnet::model::{load_checkpoint, SplitPoint};
use sdlnet::synth::{read_manifest, DocClass};

fn sdlnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdlnet")).args(args).current_dir(dir).env_remove(SEED_ENV).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Relative path to contents for every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// A 20-sample single-class dataset at 32 px plus a one-epoch model on it.
fn smoke_setup(dir: &Path) {
    let gen = sdlnet(dir, &["gen-data", "--out", "data", "--n", "20", "--size", "32", "--seed", "4", "--set", "mix=1,0,0,0,0"]);
    assert_eq!(code(&gen), 0, "{}", stderr(&gen));
    let train = sdlnet(dir, &["train", "--data", "data", "--classes", "ID", "--out", "base.ckpt", "--epochs", "1"]);
    assert_eq!(code(&train), 0, "{}", stderr(&train));
}

#[test]
fn gen_data_counts_follow_the_reference_mix() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdlnet(dir.path(), &["gen-data", "--out", "d", "--n", "100", "--seed", "1", "--size", "32"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest = read_manifest(&dir.path().join("d")).unwrap();
    let totals: Vec<usize> = DocClass::ALL.iter().map(|c| manifest.counts[c.name()].iter().sum()).collect();
    assert_eq!(totals, vec![21, 19, 25, 14, 21]);
    assert!(dir.path().join("d/run_config.txt").exists());
}

#[test]
fn gen_data_is_deterministic_and_refuses_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = sdlnet(dir.path(), &["gen-data", "--out", name, "--n", "60", "--seed", "9", "--size", "32"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let strip = |mut s: BTreeMap<PathBuf, Vec<u8>>| {
        let cfg = String::from_utf8(s.remove(Path::new("run_config.txt")).unwrap()).unwrap();
        (s, cfg.lines().filter(|l| !l.starts_with("out =")).collect::<Vec<_>>().join("\n"))
    };
    assert_eq!(strip(snapshot(&dir.path().join("a"))), strip(snapshot(&dir.path().join("b"))));

    let tiny = sdlnet(dir.path(), &["gen-data", "--out", "c", "--n", "5"]);
    assert_eq!(code(&tiny), 1);
    assert!(stderr(&tiny).contains("empty split"), "{}", stderr(&tiny));
    let again = sdlnet(dir.path(), &["gen-data", "--out", "a", "--n", "60"]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("not empty"));
}

#[test]
fn train_finetune_eval_smoke_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    smoke_setup(dir);
    let before = snapshot(&dir.join("data"));
    assert!(dir.join("base.ckpt").exists() && dir.join("base.config.txt").exists());

    let ft = sdlnet(
        dir,
        &[
            "finetune",
            "--init",
            "base.ckpt",
            "--data",
            "data",
            "--class",
            "ID",
            "--split",
            "2",
            "--fraction",
            "50",
            "--out",
            "ft.ckpt",
            "--epochs",
            "2",
        ],
    );
    assert_eq!(code(&ft), 0, "{}", stderr(&ft));
    let base = load_checkpoint(dir.join("base.ckpt")).unwrap();
    let tuned = load_checkpoint(dir.join("ft.ckpt")).unwrap();
    assert_eq!(base.encoder_checksum(SplitPoint::Up2), tuned.encoder_checksum(SplitPoint::Up2));
    assert_ne!(base.encoder_checksum(SplitPoint::Up3), tuned.encoder_checksum(SplitPoint::Up3));

    let ev = sdlnet(dir, &["eval", "--model", "ft.ckpt", "--data", "data", "--class", "ID"]);
    assert_eq!(code(&ev), 0, "{}", stderr(&ev));
    assert!(String::from_utf8_lossy(&ev.stdout).contains("IoU mean"));
    let csv = fs::read_to_string(dir.join("ft.eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("ft.ckpt,ID,"));

    let rect = sdlnet(dir, &["rectify", "--model", "ft.ckpt", "--image", "data/ID/test/000000.png", "--out", "r.png"]);
    assert!([0, 2].contains(&code(&rect)), "{}", stderr(&rect));
    assert_eq!(snapshot(&dir.join("data")), before, "commands must not touch the dataset");
}

#[test]
fn finetune_rejects_bad_arguments() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    smoke_setup(dir);
    let base = ["finetune", "--init", "base.ckpt", "--data", "data", "--class", "ID", "--out", "x.ckpt"];

    let out = sdlnet(dir, &[&base[..], &["--split", "4"]].concat());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("valid splits: 0 (middle), 1, 2, 3"), "{}", stderr(&out));

    let missing = sdlnet(dir, &["finetune", "--init", "nope.ckpt", "--data", "data", "--class", "ID", "--out", "x.ckpt"]);
    assert_eq!(code(&missing), 1);
    assert!(stderr(&missing).contains("nope.ckpt"));

    let other = sdlnet(dir, &["gen-data", "--out", "big", "--n", "20", "--size", "64", "--set", "mix=1,0,0,0,0"]);
    assert_eq!(code(&other), 0);
    let mismatch = sdlnet(dir, &["finetune", "--init", "base.ckpt", "--data", "big", "--class", "ID", "--out", "x.ckpt"]);
    assert_eq!(code(&mismatch), 1);
    assert!(stderr(&mismatch).contains("expects 32x32"), "{}", stderr(&mismatch));

    let absent = sdlnet(dir, &["finetune", "--init", "base.ckpt", "--data", "data", "--class", "DL", "--out", "x.ckpt"]);
    assert_eq!(code(&absent), 1);
    assert!(stderr(&absent).contains("no class DL"));

    let fraction = sdlnet(dir, &[&base[..], &["--fraction", "0"]].concat());
    assert_eq!(code(&fraction), 1);
    assert!(!dir.join("x.ckpt").exists());
}

#[test]
fn eval_fails_on_unreadable_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sdlnet(tmp.path(), &["eval", "--model", "missing.ckpt", "--data", "nowhere"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("missing.ckpt"));
}

#[test]
fn rectify_with_an_axis_aligned_quad_is_crop_and_resize() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let img = common::smooth_image(96, 72);
    img.save(dir.join("in.png")).unwrap();
    let quad = Quadrangle::rectangle(10.0, 8.0, 74.0, 48.0);
    let out = sdlnet(dir, &["rectify", "--image", "in.png", "--out", "out.png", "--quad", &quad.to_json(), "--height", "30"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let got = image::open(dir.join("out.png")).unwrap().to_rgb8();
    assert_eq!(got.dimensions(), (48, 30));
    let want = common::crop_resize(&img, 10.0, 8.0, 74.0, 48.0, 48, 30);
    let psnr = common::psnr(&got, &want);
    assert!(psnr > 35.0, "PSNR {psnr}");
    let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("out.json")).unwrap()).unwrap();
    assert_eq!(sidecar["valid"], true);
    assert_eq!(sidecar["source"], "argument");
    assert_eq!(Quadrangle::from_json(&sidecar["quad"].to_string()).unwrap(), quad);
}

#[test]
fn rectify_reports_failures_through_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let missing = sdlnet(
        dir,
        &["rectify", "--image", "absent.png", "--out", "o.png", "--quad", r#"{"tl":[1,1],"tr":[5,1],"bl":[1,5],"br":[5,5]}"#],
    );
    assert_eq!(code(&missing), 1);
    assert!(stderr(&missing).contains("absent.png"), "{}", stderr(&missing));

    smoke_setup(dir);
    let out = sdlnet(
        dir,
        &["rectify", "--model", "base.ckpt", "--image", "data/ID/test/000000.png", "--out", "r/o.png", "--threshold", "2"],
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("r/o.json")).unwrap()).unwrap();
    assert_eq!(sidecar["valid"], false);
    assert_eq!(sidecar["scores"].as_array().unwrap().len(), 4);
    assert!(!dir.join("r/o.png").exists());
}

#[test]
fn experiment_splits_runs_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = "# tiny run\nseed = 3\nn = 200\nsize = 32\nwidth = 0.25\nmax_epochs = 1\nfinetune_max_epochs = 1\nrecord_timing = false\n";
    fs::write(dir.join("exp.txt"), config).unwrap();
    let run = || sdlnet(dir, &["experiment", "splits", "--config", "exp.txt", "--out", "out", "--jobs", "2"]);
    let first = run();
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let csv = fs::read_to_string(dir.join("out/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 26);
    for svg in ["splits_iou.svg", "splits_time.svg", "run_config.txt"] {
        assert!(dir.join("out").join(svg).exists(), "{svg}");
    }
    let cells: Vec<PathBuf> = fs::read_dir(dir.join("out/cells")).unwrap().map(|e| e.unwrap().path()).collect();
    let ft = cells.iter().find(|p| p.file_name().unwrap().to_string_lossy().starts_with("ft-")).unwrap();
    fs::remove_file(ft).unwrap();
    let second = run();
    assert_eq!(code(&second), 0, "{}", stderr(&second));
    assert_eq!(fs::read_to_string(dir.join("out/results.csv")).unwrap(), csv);

    fs::write(dir.join("exp.txt"), config.replace("seed = 3", "seed = 4")).unwrap();
    let changed = run();
    assert_eq!(code(&changed), 1);
    assert!(stderr(&changed).contains("different configuration"));
}

#[test]
fn config_layers_resolve_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.txt");
    fs::write(&file, "# comment\n  max_epochs = 7\n\nclasses = DL, ID\n").unwrap();
    let cfg = RunConfig::resolve(Some(&file), &[], Some("11")).unwrap();
    assert_eq!((cfg.seed, cfg.train.seed, cfg.data.seed), (11, 11, 11));
    assert_eq!(cfg.train.max_epochs, 7);
    assert_eq!(cfg.classes, Some(vec![DocClass::Id, DocClass::Dl]));

    fs::write(&file, "seed = 5\n").unwrap();
    assert_eq!(RunConfig::resolve(Some(&file), &[], Some("11")).unwrap().seed, 5);
    let flags = [("seed".to_string(), "8".to_string())];
    assert_eq!(RunConfig::resolve(Some(&file), &flags, Some("11")).unwrap().seed, 8);
    assert_eq!(RunConfig::resolve(None, &[], None).unwrap().seed, 0);

    fs::write(&file, "max_epochs 7\n").unwrap();
    let err = RunConfig::resolve(Some(&file), &[], None).unwrap_err().to_string();
    assert!(err.contains("c.txt") && err.contains("line 1"), "{err}");
    fs::write(&file, "colour = red\n").unwrap();
    assert!(RunConfig::resolve(Some(&file), &[], None).unwrap_err().to_string().contains("unknown key"));
    assert!(RunConfig::resolve(None, &[], Some("x")).unwrap_err().to_string().contains(SEED_ENV));
}

#[test]
fn seed_env_reaches_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_sdlnet"));
        cmd.args(["gen-data", "--out", name, "--n", "20", "--size", "32", "--set", "mix=0,0,1,0,0"]).current_dir(dir.path());
        match env {
            Some(v) => cmd.env(SEED_ENV, v),
            None => cmd.env_remove(SEED_ENV),
        };
        assert!(cmd.output().unwrap().status.success());
        read_manifest(&dir.path().join(name)).unwrap().config.seed
    };
    assert_eq!(run("a", Some("42")), 42);
    assert_eq!(run("b", None), 0);
}

fn config_strategy() -> impl Strategy<Value = Vec<(&'static str, String)>> {
    (
        any::<u64>(),
        1usize..9,
        (0.05f32..0.95, 8u32..200, 0.0f64..0.3, 0.05f64..2.0),
        (1e-6f64..1e-1, 1usize..64, 1usize..500, prop::option::of(0.5f64..9.0), any::<bool>()),
        (prop::sample::subsequence(DocClass::ALL.to_vec(), 1..=5), prop::option::of(0usize..5), 0usize..4, 1.0f64..100.0),
        prop::option::of((0.0f64..50.0, 1.0f64..40.0)),
    )
        .prop_map(
            |(
                seed,
                jobs,
                (thr, size, persp, width),
                (lr, batch, epochs, sigma, aug),
                (classes, class, split, fraction),
                quad,
            )| {
                let mut kv = vec![
                    ("seed", seed.to_string()),
                    ("jobs", jobs.to_string()),
                    ("score_threshold", thr.to_string()),
                    ("size", size.to_string()),
                    ("perspective", persp.to_string()),
                    ("width", width.to_string()),
                    ("learning_rate", lr.to_string()),
                    ("batch_size", batch.to_string()),
                    ("max_epochs", epochs.to_string()),
                    ("sigma", sigma.map_or("auto".into(), |s| s.to_string())),
                    ("augment", aug.to_string()),
                    ("classes", classes.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")),
                    ("class", class.map(|i| DocClass::ALL[i].name().to_string()).unwrap_or_default()),
                    ("split", split.to_string()),
                    ("fraction", fraction.to_string()),
                    ("out", format!("runs/{seed}")),
                ];
                if let Some((x, w)) = quad {
                    kv.push(("quad", Quadrangle::rectangle(x, x, x + w, x + w / 2.0).to_json()));
                }
                kv
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resolved_text_reproduces_the_config(kv in config_strategy()) {
        let overrides: Vec<(String, String)> = kv.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        let cfg = RunConfig::resolve(None, &overrides, None).unwrap();
        let text = cfg.to_text();
        let again = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&again, &cfg);
        prop_assert_eq!(again.to_text(), text.clone());
        prop_assert_eq!(RunConfig::keys().count(), text.lines().filter(|l| l.contains(" = ")).count());
    }
}
