use std::path::Path;
use std::process::{Command, Output};

use phantom_grad::config::RunManifest;

const SMALL_SWEEP: &str = "# small grid\nd=12\nn_problems=5\nk_values=1,2,7\nlambda_values=0.5,1\nlh_levels=0.5,0.9\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_phantom-grad"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["precision-sweep", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["fd-check"]).status.code(), Some(1), "missing --out");
    assert_eq!(
        run(&["fd-check", "--out", out, "--workers", "0"]).status.code(),
        Some(1)
    );

    let cfg = write(tmp.path(), "typo.txt", "d=8\nlamda=0.5\n");
    let o = run(&["fd-check", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2") && err.contains("lamda"), "{err}");

    let cfg = write(tmp.path(), "range.txt", "lambda=1.5\n");
    let o = run(&["fd-check", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("(0, 1]"));

    let missing = tmp.path().join("absent.txt");
    let o = run(&["fd-check", "--config", missing.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn fd_check_passes_and_flags_biased_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good");
    let cfg = write(tmp.path(), "good.txt", "n_seeds=3\n");
    let o = run(&["fd-check", "--config", &cfg, "--out", good.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(&good, "rows.csv").lines().count(), 4);

    let bad = tmp.path().join("bad");
    let cfg = write(tmp.path(), "bad.txt", "n_seeds=3\nmethod=OneStep\n");
    let o = run(&["fd-check", "--config", &cfg, "--out", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let manifest = RunManifest::from_json(&read(&bad, "manifest.json")).unwrap();
    assert_eq!(manifest.flagged_failures, 3);
    assert_eq!(manifest.rows, 3);
}

#[test]
fn rows_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "sweep.txt", SMALL_SWEEP);
    let mut outputs = Vec::new();
    for workers in ["1", "3", "8"] {
        let dir = tmp.path().join(format!("w{workers}"));
        let o = run(&[
            "precision-sweep",
            "--config",
            &cfg,
            "--out",
            dir.to_str().unwrap(),
            "--workers",
            workers,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(read(&dir, "rows.csv"));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    // 2 levels x 5 instances x 3 k x 2 lambda x 2 methods, plus the header.
    assert_eq!(outputs[0].lines().count(), 1 + 2 * 5 * 3 * 2 * 2);
}

#[test]
fn manifest_rerun_reproduces_rows() {
    let tmp = tempfile::tempdir().unwrap();
    for (command, text) in [
        ("precision-sweep", SMALL_SWEEP),
        ("theory-grid", "n_problems=2\nk_values=1,3\n"),
        ("stability", "d=10\nn_problems=2\nbroyden_backward_iters=6\n"),
        (
            "train-bench",
            "d=4\nsteps=12\nn_pairs=16\nbatch_size=4\noracles=IFTExact,NPG:3:0.5,UPG:2:1\n",
        ),
    ] {
        let first = tmp.path().join(format!("{command}-a"));
        let cfg = write(tmp.path(), &format!("{command}.txt"), text);
        let o = run(&[
            command,
            "--config",
            &cfg,
            "--out",
            first.to_str().unwrap(),
            "--workers",
            "2",
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{command}: {}",
            String::from_utf8_lossy(&o.stderr)
        );

        let manifest = RunManifest::from_json(&read(&first, "manifest.json")).unwrap();
        assert_eq!(manifest.command, command);
        let echo = write(tmp.path(), &format!("{command}-echo.txt"), &manifest.config_text());
        let second = tmp.path().join(format!("{command}-b"));
        let o = run(&[
            command,
            "--config",
            &echo,
            "--out",
            second.to_str().unwrap(),
            "--workers",
            "5",
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{command}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert_eq!(read(&first, "rows.csv"), read(&second, "rows.csv"), "{command}");
        let again = RunManifest::from_json(&read(&second, "manifest.json")).unwrap();
        assert_eq!(again.config, manifest.config);
        assert_eq!(again.config_hash, manifest.config_hash);
    }
    assert!(tmp.path().join("train-bench-a/timings.csv").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "sweep.txt", &format!("{SMALL_SWEEP}seed=3\n"));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run(&["precision-sweep", "--config", &cfg, "--out", a.to_str().unwrap()]);
    run(&[
        "precision-sweep",
        "--config",
        &cfg,
        "--out",
        b.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    let (ma, mb) = (
        RunManifest::from_json(&read(&a, "manifest.json")).unwrap(),
        RunManifest::from_json(&read(&b, "manifest.json")).unwrap(),
    );
    assert_eq!((ma.seed, mb.seed), (3, 11));
    assert_eq!(mb.config["seed"], "11");
    assert_ne!(ma.config_hash, mb.config_hash);
    assert!(read(&b, "rows.csv").lines().skip(1).all(|l| l.starts_with("11,")));

    let t = tmp.path().join("t");
    let cfg = write(
        tmp.path(),
        "train.txt",
        "d=3\nsteps=2\nn_pairs=4\nbatch_size=2\noracles=NPG:2:0.5\n",
    );
    run(&[
        "train-bench",
        "--config",
        &cfg,
        "--out",
        t.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    let mt = RunManifest::from_json(&read(&t, "manifest.json")).unwrap();
    assert_eq!((mt.seed, mt.config["dataset_seed"].as_str()), (9, "9"));
}
