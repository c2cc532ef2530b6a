use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BASE: &str = r#"
[data]
classes = 3
per_class = 20
height = 8
width = 8
heldout_per_class = 10

[arch]
channels = [4, 4]
strides = [1, 2]

[teacher]
epochs = 40
lr = 1e-3

[distill]
iters = 40
ramp_iters = 10
lr = 1e-3
k = 3

[prune]
sparsity = 0.5

[experiment]
seeds = [0]
"#;

fn xdistill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xdistill"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = xdistill(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// A directory with a trained teacher in `teacher/`.
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        let cfg = ws.config("base", "");
        ok(&[
            "train-teacher",
            "--config",
            s(&cfg),
            "--out",
            s(&ws.path("teacher")),
        ]);
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Writes the base config plus `extra` sections (which replace same-named base sections).
    fn config(&self, name: &str, extra: &str) -> PathBuf {
        let mut text = String::new();
        let extra_sections: Vec<&str> = extra.lines().filter(|l| l.starts_with('[')).collect();
        let mut skipping = false;
        for line in BASE.lines() {
            if line.starts_with('[') {
                skipping = extra_sections.contains(&line);
            }
            if !skipping {
                text.push_str(line);
                text.push('\n');
            }
        }
        text.push_str(extra);
        text.push_str(&format!(
            "\n[output]\ndir = {:?}\n",
            self.path(name).to_string_lossy()
        ));
        let teacher = self.path("teacher").join("teacher.xdnc");
        if !extra_sections.contains(&"[teacher]") {
            text = text.replace(
                "[teacher]\n",
                &format!("[teacher]\nmodel = {:?}\n", teacher.to_string_lossy()),
            );
        }
        let path = self.path(&format!("{name}.toml"));
        fs::write(&path, text).unwrap();
        path
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data rows (no comment or header line) of a CSV file.
fn rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn identity_scheme_keeps_teacher_accuracy() {
    let ws = Workspace::new();
    let cfg = ws.config(
        "ident",
        "[prune]\nscheme = \"none\"\nregularizer = \"none\"\n",
    );
    ok(&["compress", "--config", s(&cfg)]);
    let teacher = rows(&ws.path("teacher").join("teacher_eval.csv"));
    let student = rows(&ws.path("ident").join("summary.csv"));
    assert_eq!(student[0][2], teacher[0][1]);
    assert_eq!(student[0][7], format!("{:.17e}", 0.0));
}

#[test]
fn reruns_are_byte_identical() {
    let ws = Workspace::new();
    let cfg = ws.config("run", "");
    ok(&["compress", "--config", s(&cfg), "--out", s(&ws.path("a"))]);
    ok(&["compress", "--config", s(&cfg), "--out", s(&ws.path("b"))]);
    let mut names: Vec<_> = fs::read_dir(ws.path("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n != "config.resolved.toml")
        .collect();
    names.sort();
    assert!(names.iter().any(|n| n == "student_seed0.xdnc"));
    assert!(names.iter().any(|n| n == "layer_log_seed0.csv"));
    for n in names {
        let a = fs::read(ws.path("a").join(&n)).unwrap();
        let b = fs::read(ws.path("b").join(&n)).unwrap();
        assert!(a == b, "{n:?} differs between reruns");
    }
}

#[test]
fn sweep_endpoints_match_single_objectives() {
    let ws = Workspace::new();
    let sweep = ws.config("sweep", "[distill]\nmode = \"cross\"\niters = 40\nramp_iters = 10\nlr = 1e-3\nk = 3\n[sweep]\nstep = 1.0\n");
    ok(&["sweep", "--config", s(&sweep)]);
    let grid = rows(&ws.path("sweep").join("sweep.csv"));
    assert_eq!(grid.len(), 2);
    // Soft mixing at (1, 0) supervises with teacher inputs only, at (0, 1)
    // with student inputs only: the two single-objective runs.
    for (mu_row, alpha, beta) in [(&grid[0], "0.0", "1.0"), (&grid[1], "1.0", "0.0")] {
        let name = format!("soft{alpha}");
        let cfg = ws.config(
            &name,
            &format!("[distill]\nmode = \"soft\"\nalpha = {alpha}\nbeta = {beta}\niters = 40\nramp_iters = 10\nlr = 1e-3\nk = 3\n"),
        );
        ok(&["compress", "--config", s(&cfg)]);
        let single = rows(&ws.path(&name).join("summary.csv"));
        let mean = &single[1];
        assert_eq!(mean[1], "mean");
        assert_eq!(mu_row[4], mean[2], "top1 at mu row {mu_row:?}");
        assert_eq!(mu_row[6], mean[6], "estimation at mu row {mu_row:?}");
    }
}

#[test]
fn evaluate_after_reload_matches_run() {
    let ws = Workspace::new();
    let cfg = ws.config("run", "");
    ok(&["compress", "--config", s(&cfg)]);
    let summary = rows(&ws.path("run").join("summary.csv"));
    let model = ws.path("run").join("student_seed0.xdnc");
    let eval_cfg = ws.config("eval", "");
    let stdout = ok(&["evaluate", "--config", s(&eval_cfg), "--model", s(&model)]);
    let row: Vec<&str> = stdout.lines().nth(2).unwrap().split(',').collect();
    assert_eq!(row[0], "student_seed0.xdnc");
    assert_eq!(
        &row[1..5],
        &summary[0][2..6]
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>()[..]
    );
    assert_eq!(
        fs::read_to_string(ws.path("eval").join("evaluate.csv")).unwrap(),
        stdout
    );
}

#[test]
fn verify_bounds_and_ablation_outputs() {
    let ws = Workspace::new();
    let cfg = ws.config("run", "");
    ok(&["compress", "--config", s(&cfg)]);
    let model = ws.path("run").join("student_seed0.xdnc");
    let stdout = ok(&[
        "verify-bounds",
        "--config",
        s(&ws.config("vb", "")),
        "--model",
        s(&model),
    ]);
    assert!(
        stdout.starts_with("bound_satisfied=true violations=0"),
        "{stdout}"
    );
    let report = fs::read_to_string(ws.path("vb").join("bound_report.csv")).unwrap();
    assert!(report.starts_with("# xdistill bound-report v1\n"));

    let abl = ws.config("abl", "[ablation]\nmax_size = 2\n");
    ok(&["ablate-cross-layers", "--config", s(&abl)]);
    let labels: Vec<String> = rows(&ws.path("abl").join("ablation.csv"))
        .into_iter()
        .map(|r| r[0].clone())
        .collect();
    assert_eq!(labels, ["none", "0", "1", "0+1"]);
}

#[test]
fn resolved_config_written_and_reparses() {
    let ws = Workspace::new();
    let text = fs::read_to_string(ws.path("teacher").join("config.resolved.toml")).unwrap();
    assert!(text.contains("[finetune]") && text.contains("survivor_shrink = false"));
    let again = ws.path("again.toml");
    fs::write(&again, &text).unwrap();
    ok(&[
        "train-teacher",
        "--config",
        s(&again),
        "--out",
        s(&ws.path("again")),
    ]);
    assert_eq!(
        fs::read(ws.path("again").join("teacher.xdnc")).unwrap(),
        fs::read(ws.path("teacher").join("teacher.xdnc")).unwrap()
    );
}

#[test]
fn errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[distill]\nmu = 2.0\nmode = \"cross\"\n").unwrap();
    let out = xdistill(&["compress", "--config", s(&bad)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("error: kind=invalid_argument message="),
        "{err}"
    );

    fs::write(&bad, "[distill]\nbogus = 1\n").unwrap();
    let err =
        String::from_utf8_lossy(&xdistill(&["compress", "--config", s(&bad)]).stderr).into_owned();
    assert!(err.contains("error: kind=config"), "{err}");

    let good = dir.path().join("good.toml");
    let out_dir = dir.path().join("nowhere");
    fs::write(
        &good,
        format!("[teacher]\nmodel = {:?}\n", out_dir.join("missing.xdnc")),
    )
    .unwrap();
    let out = xdistill(&["compress", "--config", s(&good), "--out", s(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error: kind=io"));

    let garbage = dir.path().join("garbage.xdnc");
    fs::write(&garbage, b"not a model at all").unwrap();
    let out = xdistill(&[
        "evaluate",
        "--config",
        s(&good),
        "--out",
        s(&out_dir),
        "--model",
        s(&garbage),
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error: kind=model_bad_magic"));

    let out = xdistill(&["compress"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: kind=usage"));
}
