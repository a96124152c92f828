use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_CONFIG: &str = "\
input_size = 16
stage_channels = \"2,3,3,4,4\"
fc_dim = 4
decoder_channels = 3
batch = 2
";

fn mtloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtloc")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        let o = mtloc(&["generate", "--out", s(&f.data()), "--frames", "12", "--loops", "3", "--size", "16", "--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::write(f.config(), SMALL_CONFIG).unwrap();
        f
    }
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
    fn data(&self) -> PathBuf {
        self.path("data")
    }
    fn config(&self) -> PathBuf {
        self.path("small.cfg")
    }
    fn train(&self, task: &str, steps: usize, out: &str, extra: &[&str]) -> Output {
        let steps = steps.to_string();
        let (data, cfg, out) = (self.data(), self.config(), self.path(out));
        let mut args = vec!["train", "--dataset", s(&data), "--task", task, "--steps", &steps];
        args.extend(["--config", s(&cfg), "--out", s(&out)]);
        args.extend_from_slice(extra);
        mtloc(&args)
    }
}

fn count_files(dir: &Path, ext: &str) -> usize {
    walk(dir).iter().filter(|p| p.extension().is_some_and(|e| e == ext)).count()
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn generate_writes_every_frame_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = mtloc(&["generate", "--out", s(d.path()), "--frames", "12", "--loops", "3", "--size", "16"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    // rgb, depth and labels per frame
    assert_eq!(count_files(a.path(), "png"), 12 * 3);
    let (fa, fb) = (walk(a.path()), walk(b.path()));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn generate_rejects_bad_counts() {
    let d = tempfile::tempdir().unwrap();
    for frames in ["0", "10"] {
        let o = mtloc(&["generate", "--out", s(d.path()), "--frames", frames, "--loops", "3"]);
        assert_eq!(o.status.code(), Some(1), "{frames}");
        assert!(stderr(&o).contains("--frames"));
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = mtloc(&["generate", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(mtloc(&["--help"]).status.code(), Some(0));
}

#[test]
fn zero_steps_copies_the_init() {
    let f = Fixture::new();
    let o = f.train("seg", 2, "seg", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let seg = f.path("seg/model.ckpt");
    assert!(f.path("seg/loss_trace.csv").exists());
    let o = f.train("seg", 0, "again", &["--init", s(&seg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&seg).unwrap(), std::fs::read(f.path("again/model.ckpt")).unwrap());
}

#[test]
fn malformed_config_key_is_named() {
    let f = Fixture::new();
    let bad = f.path("bad.cfg");
    std::fs::write(&bad, "learning_rat = 0.1\n").unwrap();
    let o = mtloc(&[
        "train", "--dataset", s(&f.data()), "--task", "loc", "--steps", "1", "--config", s(&bad), "--out",
        s(&f.path("x")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
    assert!(!f.path("x").exists());
}

#[test]
fn joint_requires_three_inits_or_from_scratch() {
    let f = Fixture::new();
    let o = f.train("joint", 1, "j", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--from-scratch"));
    let o = f.train("joint", 2, "j", &["--from-scratch"]);
    assert!(o.status.success(), "{}", stderr(&o));

    assert!(f.train("seg", 2, "seg", &[]).status.success());
    let seg = f.path("seg/model.ckpt");
    assert!(f.train("vo", 2, "vo", &["--init", s(&seg)]).status.success());
    assert!(f.train("loc", 2, "loc", &["--init", s(&seg)]).status.success());
    let (vo, loc) = (f.path("vo/model.ckpt"), f.path("loc/model.ckpt"));
    let o = f.train("joint", 0, "j2", &["--init", s(&seg), s(&vo)]);
    assert_eq!(o.status.code(), Some(1));
    let o = f.train("joint", 3, "j3", &["--init", s(&seg), s(&seg), s(&vo)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("loc"), "{}", stderr(&o));
    let o = f.train("joint", 3, "j4", &["--init", s(&loc), s(&vo), s(&seg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = std::fs::read_to_string(f.path("j4/loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);
}

#[test]
fn eval_ground_truth_fixture() {
    let f = Fixture::new();
    let report = f.path("gt.txt");
    let o = mtloc(&["eval", "--dataset", s(&f.data()), "--report", s(&report), "--ground-truth-fixture"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&report).unwrap();
    let kv: std::collections::HashMap<_, _> = text.lines().filter_map(|l| l.split_once(" = ")).collect();
    assert_eq!(kv["split"], "test");
    assert_eq!(kv["median_translation"].parse::<f64>().unwrap(), 0.0);
    assert_eq!(kv["accuracy_5cm5deg"].parse::<f64>().unwrap(), 1.0);
    assert_eq!(kv["miou"].parse::<f64>().unwrap(), 1.0);
    assert!(f.path("gt.trajectory.csv").exists());
    assert!(f.path("gt.trajectory.svg").exists());
}

#[test]
fn eval_is_repeatable_and_plot_redraws() {
    let f = Fixture::new();
    assert!(f.train("joint", 2, "j", &["--from-scratch"]).status.success());
    let m = f.path("j/model.ckpt");
    let mut texts = Vec::new();
    for name in ["a.txt", "b.txt"] {
        let o = mtloc(&["eval", "--dataset", s(&f.data()), "--model", s(&m), "--report", s(&f.path(name))]);
        assert!(o.status.success(), "{}", stderr(&o));
        texts.push(std::fs::read_to_string(f.path(name)).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
    for key in ["median_translation", "median_rotation", "accuracy_5cm5deg", "vo_translational_drift", "miou", "iou_sky"] {
        assert!(texts[0].contains(key), "missing {key}");
    }
    let svg = f.path("plot.svg");
    let o = mtloc(&["plot", "--trajectory", s(&f.path("a.trajectory.csv")), "--out", s(&svg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&svg).unwrap(), std::fs::read(f.path("a.trajectory.svg")).unwrap());
}

#[test]
fn incompatible_checkpoint_is_a_data_error() {
    let f = Fixture::new();
    let other = f.path("other");
    let o = mtloc(&["generate", "--out", s(&other), "--frames", "6", "--loops", "3", "--size", "32"]);
    assert!(o.status.success());
    assert!(f.train("seg", 1, "seg", &[]).status.success());
    let o = mtloc(&[
        "eval", "--dataset", s(&other), "--model", s(&f.path("seg/model.ckpt")), "--report", s(&f.path("r.txt")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("32x32"), "{}", stderr(&o));
    let o = mtloc(&["eval", "--dataset", s(&f.path("missing")), "--ground-truth-fixture", "--report", s(&f.path("r.txt"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_exit_codes() {
    let o = mtloc(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let o = mtloc(&["gradcheck", "--inject-wrong-backward"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("injected"));
}
