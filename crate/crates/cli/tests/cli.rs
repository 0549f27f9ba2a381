use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

/// A 12-image synthetic corpus plus a feature cache shared by all tests.
struct Fixture {
    root: PathBuf,
    manifest: PathBuf,
    cache: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = fs::remove_dir_all(&root);
        let f = Fixture {
            manifest: root.join("data/manifest.csv"),
            cache: root.join("cache"),
            root,
        };
        let out = run(&f.cache, &["synth", "--out", f.root.join("data").to_str().unwrap(), "--per-class", "2"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        f
    })
}

fn run(cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retina-bow"))
        .args(args)
        .env("RETINA_BOW_CACHE", cache)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_log(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("errors.json")).unwrap()).unwrap()
}

fn train(f: &Fixture, out: &Path) -> Output {
    run(
        &f.cache,
        &["train", "--manifest", f.manifest.to_str().unwrap(), "--out", out.to_str().unwrap(), "--k", "4", "--per-image-cap", "100"],
    )
}

#[test]
fn extract_reuses_cache_and_logs_bad_images() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let m = f.manifest.to_str().unwrap();
    let first = run(&f.cache, &["extract", "--manifest", m, "--out", tmp.path().to_str().unwrap()]);
    assert!(first.status.success());
    let again = run(&f.cache, &["extract", "--manifest", m, "--out", tmp.path().to_str().unwrap()]);
    assert!(stdout(&again).contains("(12 cache hits, 0 failed)"), "{}", stdout(&again));
    assert_eq!(error_log(tmp.path()), serde_json::json!([]));

    let bad = tmp.path().join("broken.png");
    fs::write(&bad, b"not a png").unwrap();
    let text = fs::read_to_string(&f.manifest).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    for l in lines.iter_mut().skip(1) {
        *l = format!("{}/{l}", f.manifest.parent().unwrap().display());
    }
    lines.push(format!("{},exudate,synthetic-a,A", bad.display()));
    let with_bad = tmp.path().join("manifest.csv");
    fs::write(&with_bad, lines.join("\n")).unwrap();
    let out_dir = tmp.path().join("out");
    let o = run(&f.cache, &["extract", "--manifest", with_bad.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(o.status.success(), "warnings must not fail the run");
    assert!(stdout(&o).contains("1 failed"));
    let log = error_log(&out_dir);
    assert_eq!(log.as_array().unwrap().len(), 1);
    assert_eq!(log[0]["level"], "warning");
    assert!(log[0]["path"].as_str().unwrap().ends_with("broken.png"));
}

#[test]
fn train_predict_round_trip() {
    let f = fixture();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(train(f, a.path()).status.success());
    assert!(train(f, b.path()).status.success());
    let mut files: Vec<String> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(
        files,
        ["codebook_dsurf_k4.json", "codebook_hog_k4.json", "codebook_lbp_k4.json", "errors.json", "model.json", "pipeline.json"]
    );
    for name in &files {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name} differs");
    }

    let image = f.root.join("data/siteA_exudate_01.png");
    let args = ["predict", "--model", a.path().to_str().unwrap(), "--image", image.to_str().unwrap(), "--histogram"];
    let p1 = run(&f.cache, &args);
    let p2 = run(&f.cache, &args);
    assert!(p1.status.success(), "{}", String::from_utf8_lossy(&p1.stderr));
    assert_eq!(p1.stdout, p2.stdout);
    let text = stdout(&p1);
    assert!(text.starts_with("class "));
    assert_eq!(text.lines().filter(|l| l.starts_with("pair ")).count(), 3);
    let hist = text.lines().find_map(|l| l.strip_prefix("histogram ")).unwrap();
    assert_eq!(hist.split(',').count(), 12);

    let black = a.path().join("black.ppm");
    let mut ppm = b"P6\n64 48\n255\n".to_vec();
    ppm.resize(ppm.len() + 64 * 48 * 3, 0);
    fs::write(&black, ppm).unwrap();
    let o = run(&f.cache, &["predict", "--model", a.path().to_str().unwrap(), "--image", black.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("descriptors could be extracted"));

    let cb = a.path().join("codebook_hog_k4.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cb).unwrap()).unwrap();
    v["seed"] = serde_json::json!(99);
    fs::write(&cb, serde_json::to_vec(&v).unwrap()).unwrap();
    let o = run(&f.cache, &args);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not match the model"));
}

#[test]
fn eval_and_sweep_write_reports() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let m = f.manifest.to_str().unwrap();
    let empty = tmp.path().join("empty");
    let o = run(&f.cache, &["eval", "--manifest", m, "--out", empty.to_str().unwrap(), "--test-split", "C", "--k-grid", "3"]);
    assert!(!o.status.success());
    let log = error_log(&empty);
    assert_eq!(log[0]["level"], "error");
    assert!(log[0]["message"].as_str().unwrap().contains("split C is empty"));

    let eval = tmp.path().join("eval");
    let common = ["--k-grid", "3,5", "--mode", "hog,multiple", "--per-image-cap", "100", "--c-grid", "0.5,8", "--folds", "2"];
    let mut args = vec!["eval", "--manifest", m, "--out", eval.to_str().unwrap()];
    args.extend(common);
    let o = run(&f.cache, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(eval.join("accuracy.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("K,hog,multiple"));
    assert_eq!(csv.lines().count(), 4);
    assert!(eval.join("accuracy.svg").is_file() && eval.join("confusion_multiple_k5.csv").is_file());

    let sw = tmp.path().join("sweep");
    let mut args = vec!["sweep", "--manifest", m, "--out", sw.to_str().unwrap()];
    args.extend(common);
    assert!(run(&f.cache, &args).status.success());
    assert_eq!(
        fs::read(eval.join("report.json")).unwrap(),
        fs::read(sw.join("A_to_B/report.json")).unwrap(),
        "eval and the first sweep direction must agree"
    );
    let back: serde_json::Value = serde_json::from_slice(&fs::read(sw.join("B_to_A/report.json")).unwrap()).unwrap();
    assert_eq!(back["train_split"], "B");
    assert_eq!(back["rows"].as_array().unwrap().len(), 4);
}
