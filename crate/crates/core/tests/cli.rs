use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use probreg::cli::container::{self, Container};
use probreg::cli::dataset::{self, MANIFEST};
use probreg::cli::report::Report;
use probreg::grid_field::{choose_scaling_n, exponentiate, FieldKind, Grid, ScalarImage, VectorField};
use probreg::similarity::rmse;
use probreg::trainer::LOSS_LOG;
use tempfile::TempDir;

const TINY: &str = r#"{
  "model": {"dims": [16, 16], "encoder_widths": [4, 4, 4, 2], "decoder_widths": [4, 4, 4, 4], "latent_dim": 3},
  "train": {"epochs": 2, "seed": 1}
}"#;

fn probreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probreg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = probreg(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    run: PathBuf,
}

impl Fixture {
    fn model(&self) -> PathBuf {
        self.run.join("model.bin")
    }

    fn pair(&self, i: usize) -> PathBuf {
        self.data.join(dataset::pair_dir_name(i))
    }
}

/// A small dataset and a model trained on it through the binary.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        ok(&[
            "synth",
            "--dims",
            "16,16",
            "--per-class",
            "5",
            "--seed",
            "7",
            "--out",
            s(&data),
        ]);
        let cfg = dir.path().join("run.json");
        std::fs::write(&cfg, TINY).unwrap();
        let run = dir.path().join("run");
        ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
        Fixture { _dir: dir, data, run }
    })
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn synth_writes_manifest() {
    let f = fixture();
    let entries = dataset::read_manifest(&f.data.join(MANIFEST)).unwrap();
    assert_eq!(entries.len(), 20);
    for class in 0..4 {
        assert_eq!(entries.iter().filter(|e| e.class == class).count(), 5);
    }
    assert!(f.pair(0).join("moving_labels.bin").exists());
}

#[test]
fn train_config_errors_exit_2() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");

    let missing = probreg(&["train", "--data", s(&f.data), "--out", s(&out)]);
    assert_eq!(code(&missing), 2);
    assert!(stderr(&missing).contains("--config"));

    let absent = probreg(&[
        "train",
        "--config",
        "/no/such/file.json",
        "--data",
        s(&f.data),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&absent), 2);
    assert!(stderr(&absent).contains("config"));

    let cfg = write_config(tmp.path(), r#"{"train": {"epochs": 1, "learning_rte": 0.1}}"#);
    let unknown = probreg(&["train", "--config", s(&cfg), "--data", s(&f.data), "--out", s(&out)]);
    assert_eq!(code(&unknown), 2);
    assert!(stderr(&unknown).contains("learning_rte"));

    let cfg = write_config(tmp.path(), r#"{"model": {"dims": [24, 24]}, "train": {"epochs": 1}}"#);
    let mismatch = probreg(&["train", "--config", s(&cfg), "--data", s(&f.data), "--out", s(&out)]);
    assert_eq!(code(&mismatch), 2);
    assert!(stderr(&mismatch).contains("grid mismatch"));
}

#[test]
fn diverging_training_exits_3() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = TINY.replace(r#""epochs": 2"#, r#""epochs": 2, "learning_rate": 1e200"#);
    let cfg = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("o");
    let run = probreg(&["train", "--config", s(&cfg), "--data", s(&f.data), "--out", s(&out)]);
    assert_eq!(code(&run), 3, "{}", stderr(&run));
    assert!(out.join("abort.txt").exists());
}

#[test]
fn seeded_training_is_reproducible() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let again = tmp.path().join("again");
    ok(&["train", "--config", s(&cfg), "--data", s(&f.data), "--out", s(&again)]);
    let a = std::fs::read(f.run.join(LOSS_LOG)).unwrap();
    let b = std::fs::read(again.join(LOSS_LOG)).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(f.model()).unwrap(),
        std::fs::read(again.join("model.bin")).unwrap()
    );
}

#[test]
fn twenty_epochs_emit_checkpoints() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &TINY.replace(r#""epochs": 2"#, r#""epochs": 20, "checkpoint_every": 50"#),
    );
    let out = tmp.path().join("o");
    ok(&["train", "--config", s(&cfg), "--data", s(&f.data), "--out", s(&out)]);
    // 10 training pairs, 200 steps.
    for step in [50, 100, 150, 200] {
        assert!(out.join(format!("ckpt_{step}.bin")).exists(), "{step}");
    }
    let log = std::fs::read_to_string(out.join(LOSS_LOG)).unwrap();
    assert_eq!(log.lines().count(), 201);
}

#[test]
fn register_outputs_and_determinism() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let pair = f.pair(1);
    let run = |out: &Path| {
        ok(&[
            "register",
            "--model",
            s(&f.model()),
            "--moving",
            s(&pair.join("moving.bin")),
            "--fixed",
            s(&pair.join("fixed.bin")),
            "--moving-labels",
            s(&pair.join("moving_labels.bin")),
            "--fixed-labels",
            s(&pair.join("fixed_labels.bin")),
            "--out",
            s(out),
        ])
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a);
    run(&b);
    for file in [
        "warped.bin",
        "velocity.bin",
        "displacement.bin",
        "jacobian.bin",
        "latent.bin",
    ] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let rep = Report::read(&a.join("metrics.txt")).unwrap();
    let keys: Vec<&str> = rep.entries().iter().map(|(k, _)| k.as_str()).collect();
    assert_eq!(
        keys,
        [
            "rmse",
            "lcc",
            "dice_1",
            "hd95_1",
            "dice_2",
            "hd95_2",
            "mean_magnitude",
            "mean_gradient",
            "neg_jac_fraction",
            "wall_ms"
        ]
    );
    // Nine significant digits.
    let rmse_text = rep.get("rmse").unwrap();
    assert_eq!(rmse_text.split('e').next().unwrap().replace(['.', '-'], "").len(), 9);
}

#[test]
fn self_registration_beats_unregistered_pair() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let pair = f.pair(0);
    let moving = pair.join("moving.bin");
    ok(&[
        "register",
        "--model",
        s(&f.model()),
        "--moving",
        s(&moving),
        "--fixed",
        s(&moving),
        "--out",
        s(tmp.path()),
    ]);
    let rep = Report::read(&tmp.path().join("metrics.txt")).unwrap();
    let m = dataset::load_image(&moving).unwrap().normalized();
    let fx = dataset::load_image(&pair.join("fixed.bin")).unwrap().normalized();
    let unregistered = rmse(&fx, &m).unwrap();
    assert!(rep.get_f64("rmse").unwrap() < unregistered, "{rep}");
}

#[test]
fn register_rejects_grid_mismatch() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let other = tmp.path().join("other.bin");
    let img = ScalarImage::zeros(Grid::unit(&[24, 24]).unwrap());
    container::save(&other, &[Container::from_image(&img)]).unwrap();
    let moving = f.pair(0).join("moving.bin");
    let run = probreg(&[
        "register",
        "--model",
        s(&f.model()),
        "--moving",
        s(&moving),
        "--fixed",
        s(&other),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&run), 2);
    let run = probreg(&[
        "register",
        "--model",
        s(&f.model()),
        "--moving",
        s(&other),
        "--fixed",
        s(&other),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&run), 2);
}

#[test]
fn stochastic_register_needs_seed() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let moving = f.pair(0).join("moving.bin");
    let fixed = f.pair(0).join("fixed.bin");
    let model = f.model();
    let base = [
        "register",
        "--model",
        s(&model),
        "--moving",
        s(&moving),
        "--fixed",
        s(&fixed),
    ];
    let mut args = base.to_vec();
    args.extend(["--stochastic", "--out", s(tmp.path())]);
    assert_eq!(code(&probreg(&args)), 2);

    let run = |seed: &str, out: &Path| {
        let mut args = base.to_vec();
        args.extend(["--stochastic", "--seed", seed, "--out", s(out)]);
        ok(&args);
        std::fs::read(out.join("velocity.bin")).unwrap()
    };
    let a = run("5", &tmp.path().join("a"));
    assert_eq!(a, run("5", &tmp.path().join("b")));
    assert_ne!(a, run("6", &tmp.path().join("c")));
}

#[test]
fn exp_command() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = Grid::unit(&[12, 10]).unwrap();
    let zero = tmp.path().join("zero.bin");
    container::save(
        &zero,
        &[Container::from_field(&VectorField::zeros(
            grid.clone(),
            FieldKind::Velocity,
        ))],
    )
    .unwrap();
    let out = tmp.path().join("z");
    ok(&["exp", "--velocity", s(&zero), "--n", "4", "--out", s(&out)]);
    let disp = container::load_one(&out.join("displacement.bin")).unwrap();
    assert!(disp.data().iter().all(|&v| v == 0.0));
    let rep = Report::read(&out.join("report.txt")).unwrap();
    assert_eq!(rep.get_f64("neg_jac_fraction"), Some(0.0));

    let v = VectorField::from_fn(grid, FieldKind::Velocity, |c, o| {
        o[0] = 3.0 * (c[1] as f64 * 0.4).sin();
        o[1] = 2.5 * (c[0] as f64 * 0.3).cos();
    });
    let path = tmp.path().join("v.bin");
    container::save(&path, &[Container::from_field(&v)]).unwrap();
    let out = tmp.path().join("v");
    ok(&["exp", "--velocity", s(&path), "--out", s(&out)]);
    let n = choose_scaling_n(std::slice::from_ref(&v)).unwrap();
    let rep = Report::read(&out.join("report.txt")).unwrap();
    assert_eq!(rep.get("steps"), Some(n.to_string().as_str()));
    let stored = container::load_one(&out.join("displacement.bin"))
        .unwrap()
        .to_field(FieldKind::Displacement)
        .unwrap();
    assert_eq!(&stored, exponentiate(&v, n).unwrap().displacement());
}

#[test]
fn sample_command() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let cond = f.pair(0).join("moving.bin");
    let none = tmp.path().join("none");
    ok(&[
        "sample",
        "--model",
        s(&f.model()),
        "--conditioning",
        s(&cond),
        "--count",
        "0",
        "--seed",
        "1",
        "--out",
        s(&none),
    ]);
    assert!(!none.exists());

    let draw = |seed: &str, out: &Path| {
        ok(&[
            "sample",
            "--model",
            s(&f.model()),
            "--conditioning",
            s(&cond),
            "--count",
            "3",
            "--seed",
            seed,
            "--out",
            s(out),
        ]);
        (0..3)
            .map(|i| std::fs::read(out.join(format!("sample_{i:03}")).join("velocity.bin")).unwrap())
            .collect::<Vec<_>>()
    };
    let a = draw("9", &tmp.path().join("a"));
    assert_eq!(a, draw("9", &tmp.path().join("b")));
    assert_ne!(a, draw("10", &tmp.path().join("c")));
    assert_ne!(a[0], a[1]);

    let no_seed = probreg(&[
        "sample",
        "--model",
        s(&f.model()),
        "--conditioning",
        s(&cond),
        "--count",
        "1",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&no_seed), 2);
}

#[test]
fn transport_of_own_code_matches_register() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let pair = f.pair(2);
    let (moving, fixed) = (pair.join("moving.bin"), pair.join("fixed.bin"));
    let reg = tmp.path().join("reg");
    ok(&[
        "register",
        "--model",
        s(&f.model()),
        "--moving",
        s(&moving),
        "--fixed",
        s(&fixed),
        "--out",
        s(&reg),
    ]);

    let by_code = tmp.path().join("code");
    ok(&[
        "transport",
        "--model",
        s(&f.model()),
        "--zcode",
        s(&reg.join("latent.bin")),
        "--target",
        s(&moving),
        "--out",
        s(&by_code),
    ]);
    let by_pair = tmp.path().join("pair");
    ok(&[
        "transport",
        "--model",
        s(&f.model()),
        "--source-pair",
        s(&moving),
        s(&fixed),
        "--target",
        s(&moving),
        "--out",
        s(&by_pair),
    ]);
    for out in [&by_code, &by_pair] {
        for file in ["velocity.bin", "displacement.bin", "warped.bin", "jacobian.bin"] {
            assert_eq!(
                std::fs::read(reg.join(file)).unwrap(),
                std::fs::read(out.join(file)).unwrap(),
                "{file}"
            );
        }
    }
    let neither = probreg(&[
        "transport",
        "--model",
        s(&f.model()),
        "--target",
        s(&moving),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&neither), 2);
}

#[test]
fn eval_aggregates_metrics() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    // Three-case manifest living next to the pair directories.
    let manifest = f.data.join("three.csv");
    let picked = [1usize, 6, 11];
    let mut text = String::from("filename,class,split\n");
    for &i in &picked {
        text += &format!("{},{},test\n", dataset::pair_dir_name(i), i / 5);
    }
    std::fs::write(&manifest, text).unwrap();
    let out = tmp.path().join("eval");
    ok(&[
        "eval",
        "--model",
        s(&f.model()),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
    ]);
    let rep = Report::read(&out.join("report.txt")).unwrap();
    assert_eq!(rep.get("count"), Some("3"));

    let mut cases = Vec::new();
    for &i in &picked {
        let dir = tmp.path().join(format!("r{i}"));
        let p = f.pair(i);
        ok(&[
            "register",
            "--model",
            s(&f.model()),
            "--moving",
            s(&p.join("moving.bin")),
            "--fixed",
            s(&p.join("fixed.bin")),
            "--moving-labels",
            s(&p.join("moving_labels.bin")),
            "--fixed-labels",
            s(&p.join("fixed_labels.bin")),
            "--out",
            s(&dir),
        ]);
        cases.push(Report::read(&dir.join("metrics.txt")).unwrap());
    }
    for key in ["rmse", "lcc", "dice_1", "mean_magnitude"] {
        let v: Vec<f64> = cases.iter().map(|c| c.get_f64(key).unwrap()).collect();
        let mean = (v[0] + v[1] + v[2]) / 3.0;
        let var = ((v[0] - mean).powi(2) + (v[1] - mean).powi(2) + (v[2] - mean).powi(2)) / 3.0;
        let got = rep.get_f64(&format!("{key}_mean")).unwrap();
        assert!(
            (got - mean).abs() <= 1e-8 * mean.abs().max(1e-12),
            "{key}: {got} vs {mean}"
        );
        let got = rep.get_f64(&format!("{key}_var")).unwrap();
        assert!((got - var).abs() <= 1e-6 * var.abs() + 1e-15, "{key}: {got} vs {var}");
    }
    assert!(rep.get("wall_ms_mean").is_none());
    std::fs::remove_file(&manifest).unwrap();
}

#[test]
fn eval_test_split_reports_accuracy() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("eval");
    ok(&[
        "eval",
        "--model",
        s(&f.model()),
        "--manifest",
        s(&f.data.join(MANIFEST)),
        "--split",
        "test",
        "--out",
        s(&out),
    ]);
    let rep = Report::read(&out.join("report.txt")).unwrap();
    assert_eq!(rep.get("count"), Some("10"));
    let acc = rep.get_f64("accuracy").unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(rep.get("cca_components"), Some("3"));
    let proj = std::fs::read_to_string(out.join("projection.csv")).unwrap();
    assert_eq!(proj.lines().count(), 11);
    assert_eq!(proj.lines().next(), Some("label,cca0,cca1,cca2"));
}

#[test]
fn eval_rejects_empty_manifest() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("empty.csv");
    std::fs::write(&manifest, "filename,class,split\n").unwrap();
    let run = probreg(&[
        "eval",
        "--model",
        s(&f.model()),
        "--manifest",
        s(&manifest),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&run), 2);
    assert!(stderr(&run).contains("manifest"));
}
