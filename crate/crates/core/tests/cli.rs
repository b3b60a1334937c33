mod common;

use std::path::Path;
use std::process::Command;

use common::{data_dir, temp_dir, IMAGES, LABELS};

fn ffgen(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ffgen"))
        .args(args)
        .env("FFGEN_THREADS", "2")
        .output()
        .unwrap()
}

fn data(name: &str) -> String {
    data_dir().join(name).to_str().unwrap().to_string()
}

fn train(out: &Path, extra: &[&str]) -> std::process::Output {
    let (images, labels) = (data(IMAGES), data(LABELS));
    let mut args = vec![
        "train", "--images", &images, "--labels", &labels, "--out",
        out.to_str().unwrap(), "--limit", "150", "--trees", "3", "--depth", "5",
    ];
    args.extend_from_slice(extra);
    ffgen(&args)
}

#[test]
fn train_single_digit_writes_one_model() {
    let tmp = temp_dir();
    let out = train(tmp.path(), &["--digit", "8", "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("8.ffgm").exists());
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 1);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("stage-1 AC eigenvalue total"), "{stdout}");
    assert!(stdout.contains("stage-2 AC eigenvalue total"), "{stdout}");
}

#[test]
fn train_all_writes_ten_models() {
    let tmp = temp_dir();
    let out = train(tmp.path(), &["--all", "--kmeans", "4", "--outlier", "both"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for d in 0..10 {
        assert!(tmp.path().join(format!("{d}.ffgm")).exists(), "digit {d}");
    }
}

#[test]
fn train_requires_digit_or_all() {
    let tmp = temp_dir();
    assert!(!train(tmp.path(), &[]).status.success());
    assert!(!train(tmp.path(), &["--digit", "10"]).status.success());
    assert!(!train(tmp.path(), &["--digit", "1", "--k2", "17"]).status.success());
}

#[test]
fn missing_input_fails_with_message() {
    let tmp = temp_dir();
    let out = ffgen(&[
        "train", "--images", "/nonexistent/images", "--labels", "/nonexistent/labels",
        "--digit", "1", "--out", tmp.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/images"));
}

#[test]
fn synthesize_outputs() {
    let tmp = temp_dir();
    assert!(train(tmp.path(), &["--digit", "0"]).status.success());
    let model = tmp.path().join("0.ffgm");
    let model = model.to_str().unwrap();

    let grid = tmp.path().join("grid");
    let out = ffgen(&[
        "synthesize", "--model", model, "--n", "64", "--seed", "3", "--montage", "8x8",
        "--slice", "8", "--out", grid.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, h, w) = ffgen::image::read_pgm(grid.join("montage.pgm")).unwrap();
    assert_eq!((h, w), (8 * 17 + 1, 8 * 17 + 1));
    let (px, h, w) = ffgen::image::read_pgm(grid.join("img_0063.pgm")).unwrap();
    assert_eq!((h, w), (16, 16));
    assert!(px.iter().all(|p| (0.0..=1.0).contains(p)));
    let slice = std::fs::read_to_string(grid.join("slice.csv")).unwrap();
    assert!(slice.starts_with("image,column,value\n"));
    assert_eq!(slice.lines().count(), 1 + 64 * 16);
    assert!(!slice.contains('\r'));

    let up = tmp.path().join("up");
    let out = ffgen(&[
        "synthesize", "--model", model, "--n", "2", "--upsample", "--out", up.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let (_, h, w) = ffgen::image::read_pgm(up.join("img_0001.pgm")).unwrap();
    assert_eq!((h, w), (32, 32));

    let none = tmp.path().join("none");
    let out = ffgen(&["synthesize", "--model", model, "--n", "0", "--out", none.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_dir(&none).unwrap().count(), 0);

    let bad = ffgen(&[
        "synthesize", "--model", model, "--n", "70", "--montage", "8x8", "--out",
        tmp.path().join("bad").to_str().unwrap(),
    ]);
    assert!(!bad.status.success());
    let bad = ffgen(&[
        "synthesize", "--model", model, "--n", "1", "--mask", "0-3", "--out",
        tmp.path().join("bad").to_str().unwrap(),
    ]);
    assert!(!bad.status.success());
}

#[test]
fn masks_change_the_rendering() {
    let tmp = temp_dir();
    assert!(train(tmp.path(), &["--digit", "8"]).status.success());
    let model = tmp.path().join("8.ffgm");
    let render = |mask: &str| {
        let dir = tmp.path().join(mask);
        let out = ffgen(&[
            "synthesize", "--model", model.to_str().unwrap(), "--n", "4", "--seed", "1",
            "--mask", mask, "--out", dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        std::fs::read(dir.join("img_0000.pgm")).unwrap()
    };
    assert_ne!(render("1-8"), render("9-15"));
    assert_eq!(render("1-15"), render("1,2,3-15"));
}

#[test]
fn analyze_spectrum_test_mode() {
    let tmp = temp_dir();
    let mut spectrum = String::new();
    let (mut level, mut slope) = (-1.0, -0.01);
    for i in 1..=255 {
        if i == 8 || i == 120 {
            level -= 1.0;
            slope *= 1.5;
        }
        level += slope;
        spectrum.push_str(&format!("{}\n", 10f64.powf(level)));
    }
    let input = tmp.path().join("spectrum.txt");
    std::fs::write(&input, spectrum).unwrap();
    let csv = tmp.path().join("curve.csv");
    let out = ffgen(&[
        "analyze", "--eigenvalues", input.to_str().unwrap(), "--out", csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[8, 120]"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("index,ratio,is_turning_point\n"));
    let mut sum = 0.0;
    let mut flagged = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        sum += f[1].parse::<f64>().unwrap();
        if f[2] == "1" {
            flagged.push(f[0].parse::<usize>().unwrap());
        }
    }
    assert!((sum - 1.0).abs() <= 1e-9);
    assert_eq!(flagged, vec![8, 120]);
}

#[test]
fn analyze_single_digit() {
    let tmp = temp_dir();
    let csv = tmp.path().join("out/eights.csv");
    let out = ffgen(&[
        "analyze", "--images", &data(IMAGES), "--labels", &data(LABELS), "--digit", "8",
        "--out", csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 256);
}
