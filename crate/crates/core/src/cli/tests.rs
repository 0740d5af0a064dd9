use std::path::Path;

use super::main_with_args;
use crate::influence::InfluenceFunction;
use crate::io::{load_image, load_model, model_to_json, save_image, save_model};
use crate::model::{DiffusionModel, ModelSpec};
use crate::Image;

struct Run {
    status: i32,
    out: String,
    err: String,
}

fn run(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let status = main_with_args(std::iter::once("despeckle").chain(args.iter().copied()), &mut out, &mut err);
    Run {
        status,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn identity_model() -> DiffusionModel {
    let mut m = DiffusionModel::init(&ModelSpec {
        stages: 2,
        filter_size: 3,
        num_filters: Some(3),
        rbf_count: 9,
        looks: 4,
        ..ModelSpec::default()
    })
    .unwrap();
    for s in &mut m.stages {
        s.beta = 1e-12f64.ln();
        for phi in &mut s.influences {
            *phi = InfluenceFunction::zeros(phi.len(), phi.range()).unwrap();
        }
    }
    m
}

#[test]
fn identity_model_leaves_input_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("id.json");
    save_model(&identity_model(), &model).unwrap();
    let input = dir.path().join("in.fgrid");
    let img = Image::from_fn(20, 15, |x, y| 10.0 + (x * 7 + y * 3) as f64);
    save_image(&img, &input, 255.0).unwrap();
    let output = dir.path().join("out.fgrid");
    let r = run(&["despeckle", "--model", p(&model), "--input", p(&input), "--output", p(&output), "--looks", "4"]);
    assert_eq!(r.status, 0, "{}", r.err);
    assert!(r.err.is_empty());
    let got = load_image(&output).unwrap();
    let diff = got
        .as_slice()
        .iter()
        .zip(img.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-6, "{diff}");
}

#[test]
fn looks_mismatch_warns_and_proceeds() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("id.json");
    save_model(&identity_model(), &model).unwrap();
    let input = dir.path().join("in.pgm");
    save_image(&Image::filled(12, 12, 40.0), &input, 255.0).unwrap();
    let output = dir.path().join("out.pgm");
    let r = run(&["despeckle", "--model", p(&model), "--input", p(&input), "--output", p(&output), "--looks", "1"]);
    assert_eq!(r.status, 0);
    assert!(r.err.starts_with("warning: model was trained for L=4 but input has L=1"));
    assert!(output.exists());
}

#[test]
fn eval_of_reference_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.pgm");
    save_image(&Image::from_fn(24, 24, |x, y| (20 + x * 5 + y * 2) as f64), &img, 255.0).unwrap();
    let r = run(&["eval", "--input", p(&img), "--reference", p(&img), "--noisy", p(&img), "--looks", "2"]);
    assert_eq!(r.status, 0, "{}", r.err);
    let mut lines = r.out.lines();
    assert_eq!(lines.next(), Some("image,looks,psnr,mssim,ec,ri_m,ri_v,c_hat"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..7], &["a.pgm", "2", "inf", "1", "1", "1", "0"]);

    let table = dir.path().join("m.csv");
    let r = run(&["eval", "--input", p(&img), "--reference", p(&img), "--report", p(&table)]);
    assert_eq!(r.status, 0);
    assert!(r.out.is_empty());
    let text = std::fs::read_to_string(&table).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("a.pgm,1,inf,1,1,nan,nan,"));
}

#[test]
fn failures_are_single_lines() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&["despeckle", "--model", "/nonexistent/m.json", "--input", "x.pgm", "--output", "y.pgm"]);
    assert_eq!(r.status, 1);
    assert_eq!(r.err.lines().count(), 1);
    assert!(r.err.starts_with("error: kind=io msg=\""), "{}", r.err);

    let model = dir.path().join("future.json");
    let text = model_to_json(&identity_model())
        .unwrap()
        .replace("\"format_version\": 1", "\"format_version\": 9");
    std::fs::write(&model, text).unwrap();
    let r = run(&["despeckle", "--model", p(&model), "--input", "x.pgm", "--output", "y.pgm"]);
    assert_eq!(r.err, "error: kind=version msg=\"unsupported model format version 9\"\n");

    let r = run(&["train", "--bogus"]);
    assert_eq!(r.status, 2);
    assert_eq!(r.err.lines().count(), 1);
    assert!(r.err.starts_with("error: kind=usage"));

    let bad = dir.path().join("bad.pgm");
    std::fs::write(&bad, "P5\n4 4\n255\nxx").unwrap();
    let r = run(&["simulate", "--input", p(&bad), "--output", p(&dir.path().join("o.fgrid"))]);
    assert!(r.err.starts_with("error: kind=format"), "{}", r.err);

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let r = run(&["train", "--data", p(&empty), "--output", p(&dir.path().join("m.json"))]);
    assert!(r.err.starts_with("error: kind=dataset"), "{}", r.err);
}

#[test]
fn help_exits_cleanly() {
    let r = run(&["--help"]);
    assert_eq!(r.status, 0);
    for cmd in ["simulate", "train", "despeckle", "eval", "gradcheck"] {
        assert!(r.out.contains(cmd));
    }
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    let r = run(&["simulate", "--synthetic", "2", "--size", "32", "--output", p(&clean), "--seed", "3"]);
    assert_eq!(r.status, 0, "{}", r.err);
    let src = clean.join("scene_0000.pgm");
    let (a, b) = (dir.path().join("a.fgrid"), dir.path().join("b.fgrid"));
    for out in [&a, &b] {
        let r = run(&["simulate", "--input", p(&src), "--output", p(out), "--looks", "3", "--seed", "11"]);
        assert_eq!(r.status, 0, "{}", r.err);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let noisy = load_image(&a).unwrap();
    assert_eq!(noisy.dims(), (32, 32));
    assert_ne!(noisy, load_image(&src).unwrap());
}

#[test]
fn train_despeckle_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(run(&["simulate", "--synthetic", "3", "--size", "24", "--output", p(&data)]).status, 0);
    let train = |name: &str| {
        let model = dir.path().join(name);
        let r = run(&[
            "train", "--data", p(&data), "--output", p(&model), "--looks", "4", "--stages", "2",
            "--filter-size", "3", "--num-filters", "3", "--rbf-count", "15", "--patch", "16",
            "--greedy-iters", "3", "--joint-iters", "3", "--seed", "7", "--schedule", "both",
        ]);
        assert_eq!(r.status, 0, "{}", r.err);
        (model, r.out)
    };
    let (m1, log1) = train("m1.json");
    let (m2, log2) = train("m2.json");
    assert_eq!(log1, log2);
    assert!(log1.starts_with("stage=1 iter=1 loss="));
    assert!(log1.lines().any(|l| l.starts_with("stage=joint iter=")));
    let a = load_model(&m1).unwrap();
    assert_eq!(a, load_model(&m2).unwrap());
    assert_eq!(a.looks, 4);
    assert_eq!(std::fs::read_to_string(dir.path().join("m1.json.log")).unwrap(), log1);
    let manifest = std::fs::read_to_string(dir.path().join("m1.json.manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 4);

    let noisy = dir.path().join("noisy");
    let out = dir.path().join("den");
    assert_eq!(run(&["simulate", "--input", p(&data), "--output", p(&noisy), "--looks", "4"]).status, 0);
    let r = run(&["despeckle", "--model", p(&m1), "--input", p(&noisy), "--output", p(&out), "--looks", "4"]);
    assert_eq!(r.status, 0, "{}", r.err);
    let r = run(&["eval", "--input", p(&out), "--reference", p(&data), "--noisy", p(&noisy), "--looks", "4"]);
    assert_eq!(r.status, 0, "{}", r.err);
    assert_eq!(r.out.lines().count(), 4);
}

#[test]
fn gradcheck_command() {
    let r = run(&["gradcheck", "--stages", "2", "--num-filters", "2", "--seed", "3"]);
    assert_eq!(r.status, 0, "{}", r.err);
    assert!(r.out.trim_end().ends_with("PASS"));
    let r = run(&["gradcheck", "--variant", "projected", "--stages", "1", "--num-filters", "3"]);
    assert_eq!(r.status, 0, "{}", r.err);
}
