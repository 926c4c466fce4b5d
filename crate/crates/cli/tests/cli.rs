use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rln_core::data::load_manifest;
use rln_core::evaluation::{read_predictions, stratified_report, write_report_csv, DEFAULT_THRESHOLDS};

fn rln(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rln"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = rln(dir, args);
    assert!(
        out.status.success(),
        "rln {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    rln(dir, args).status.code().unwrap()
}

const TINY_CONFIG: &str = "\
input_height = 48
input_width = 64
block_widths = 4,8
convs_per_block = 1
fc_widths = 16
max_epochs = 1
patience = 3
seed = 11
";

fn tiny_dataset(dir: &Path) {
    ok(dir, &["synth", "--out", "data", "--count", "24", "--seed", "3", "--size", "64x48"]);
    ok(dir, &["split", "--manifest", "data/manifest.csv", "--out", "data", "--seed", "1"]);
    fs::write(dir.join("run.cfg"), TINY_CONFIG).unwrap();
}

#[test]
fn synth_is_byte_identical_and_headed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        let printed = ok(d, &["synth", "--out", "d", "--count", "10", "--seed", "1"]);
        assert_eq!(printed.trim(), "d/manifest.csv");
    }
    let mut names: Vec<_> = fs::read_dir(a.path().join("d")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 11);
    for n in names {
        let x = fs::read(a.path().join("d").join(&n)).unwrap();
        let y = fs::read(b.path().join("d").join(&n)).unwrap();
        assert_eq!(x, y, "{n:?} differs");
    }
    let manifest = fs::read_to_string(a.path().join("d/manifest.csv")).unwrap();
    assert!(manifest.starts_with("# rln "));
    assert!(manifest.contains("# seed: 1\n"));
    let pgm = fs::read(a.path().join("d/img_00000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n# rln "));
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(d.path(), &["synth", "--out", "d", "--mode", "xyz"]), 2);
    assert_eq!(code(d.path(), &["frobnicate"]), 2);
    ok(d.path(), &["synth", "--out", "d", "--count", "12"]);
    assert_eq!(
        code(d.path(), &["split", "--manifest", "d/manifest.csv", "--train", "0.5", "--val", "0.2", "--test", "0.1", "--out", "s"]),
        2
    );
}

#[test]
fn missing_input_exits_1() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(d.path(), &["split", "--manifest", "nope.csv", "--out", "s"]), 1);
}

#[test]
fn params_command() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(ok(d.path(), &["params"]).trim(), "49882660");
    fs::write(d.path().join("zero.cfg"), "width_multiplier = 0\n").unwrap();
    assert_eq!(code(d.path(), &["params", "--config", "zero.cfg"]), 2);
    fs::write(d.path().join("lat.cfg"), "head = laterality1\n").unwrap();
    assert_eq!(ok(d.path(), &["params", "--config", "lat.cfg"]).trim(), "49881121");
    // 3x4 input, one block of two 2-kernel convs, one 3-unit dense layer:
    // 9*1*2+2 + 9*2*2+2 + (2*2*2)*3+3 + 3*4+4 = 20 + 38 + 27 + 16
    fs::write(
        d.path().join("tiny.cfg"),
        "input_height = 3\ninput_width = 4\nblock_widths = 2\nconvs_per_block = 2\nfc_widths = 3\n",
    )
    .unwrap();
    assert_eq!(ok(d.path(), &["params", "--config", "tiny.cfg"]).trim(), "101");
}

#[test]
fn gradcheck_lists_every_op_once() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(d.path(), &["gradcheck", "--seeds", "2"]);
    for op in rln_core::gradcheck::OPS {
        assert_eq!(out.lines().filter(|l| l.split_whitespace().next() == Some(op)).count(), 1, "{op}");
    }
    assert_eq!(code(d.path(), &["gradcheck", "--seeds", "1", "--corrupt-gradient"]), 2);
}

#[test]
fn train_predict_eval_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    tiny_dataset(p);
    for run in ["a", "b"] {
        ok(
            p,
            &["train", "--config", "run.cfg", "--train", "data/train.csv", "--val", "data/val.csv",
              "--out", "model.ckpt", "--log", "train.log", "--no-wall-time"],
        );
        fs::rename(p.join("train.log"), p.join(format!("{run}.log"))).unwrap();
        fs::rename(p.join("model.ckpt"), p.join(format!("{run}.ckpt"))).unwrap();
    }
    let log = fs::read_to_string(p.join("a.log")).unwrap();
    assert_eq!(log, fs::read_to_string(p.join("b.log")).unwrap());
    assert_eq!(fs::read(p.join("a.ckpt")).unwrap(), fs::read(p.join("b.ckpt")).unwrap());
    assert!(log.starts_with("# rln "));
    assert!(log.contains("epoch,train_loss,val_loss,seconds\n0,,"));

    ok(p, &["predict", "--checkpoint", "a.ckpt", "--manifest", "data/test.csv", "--out", "pred.csv"]);
    let first = fs::read(p.join("pred.csv")).unwrap();
    ok(p, &["predict", "--checkpoint", "a.ckpt", "--manifest", "data/test.csv", "--out", "pred.csv"]);
    assert_eq!(first, fs::read(p.join("pred.csv")).unwrap());
    let preds = read_predictions(&first[..]).unwrap();
    let truth = load_manifest(&p.join("data/test.csv")).unwrap();
    assert_eq!(preds.len(), truth.len());

    ok(p, &["eval", "--pred", "pred.csv", "--truth", "data/test.csv", "--report", "report.csv", "--curves", "curves"]);
    let direct = stratified_report(&preds, &truth, None, &DEFAULT_THRESHOLDS).unwrap();
    let mut expected = Vec::new();
    write_report_csv(&mut expected, &direct, &[]).unwrap();
    let written = fs::read_to_string(p.join("report.csv")).unwrap();
    let body: String = written.lines().filter(|l| !l.starts_with("# rln") && !l.starts_with("# command") && !l.starts_with("# seed")).map(|l| format!("{l}\n")).collect();
    assert_eq!(body, String::from_utf8(expected).unwrap());

    for lm in ["od", "fovea"] {
        let curve = fs::read_to_string(p.join(format!("curves/{lm}_curve.csv"))).unwrap();
        let values: Vec<f64> = curve
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with('n'))
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(values.len(), 201);
        assert!(values.windows(2).all(|w| w[0] <= w[1]));
    }

    // a prediction file missing rows cannot be joined
    let partial: String = String::from_utf8(first).unwrap().lines().take(5).map(|l| format!("{l}\n")).collect();
    fs::write(p.join("partial.csv"), partial).unwrap();
    let out = rln(p, &["eval", "--pred", "partial.csv", "--truth", "data/test.csv", "--report", "r.csv", "--curves", "c"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unmatched"));
}

#[test]
fn laterality_checkpoint_predicts_probabilities() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    tiny_dataset(p);
    fs::write(p.join("lat.cfg"), format!("{TINY_CONFIG}head = laterality1\n")).unwrap();
    ok(p, &["train", "--config", "lat.cfg", "--train", "data/train.csv", "--val", "data/val.csv", "--out", "l.ckpt", "--log", "l.log"]);
    ok(p, &["predict", "--checkpoint", "l.ckpt", "--manifest", "data/test.csv", "--out", "class.csv"]);
    let text = fs::read_to_string(p.join("class.csv")).unwrap();
    assert!(text.lines().any(|l| l == "image_path,p_right"));
    ok(p, &["predict", "--checkpoint", "l.ckpt", "--manifest", "data/test.csv", "--out", "class.csv"]);
}

#[test]
fn divergence_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    tiny_dataset(p);
    fs::write(p.join("hot.cfg"), TINY_CONFIG.replace("max_epochs = 1", "max_epochs = 30") + "learning_rate = 1000000\n").unwrap();
    let out = rln(p, &["train", "--config", "hot.cfg", "--train", "data/train.csv", "--val", "data/val.csv", "--out", "h.ckpt", "--log", "h.log"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn grader_stats_command() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["synth", "--out", "data", "--count", "8", "--seed", "2"]);
    let truth = load_manifest(&p.join("data/manifest.csv")).unwrap();
    let mut csv = String::from("grader_id,image_path,x_od,y_od,x_fovea,y_fovea\n");
    for t in &truth {
        let lm = t.landmarks;
        csv += &format!("self,{},{},{},{},{}\n", t.image_path, lm.x_od, lm.y_od, lm.x_fovea, lm.y_fovea);
    }
    fs::write(p.join("graders.csv"), csv).unwrap();
    ok(p, &["grader-stats", "--graders", "graders.csv", "--truth", "data/manifest.csv", "--out", "g.csv"]);
    let out = fs::read_to_string(p.join("g.csv")).unwrap();
    assert!(out.starts_with("# rln "));
    let row = out.lines().find(|l| l.starts_with("self,")).unwrap();
    for v in row.split(',').skip(1).filter(|v| !v.is_empty()) {
        assert_eq!(v, "0.000");
    }
}
