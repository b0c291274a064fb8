//! The command-line workflow on a tiny toy dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use fewshot_gan::cli::{self, cmd_generate, RunLayout};
use fewshot_gan::data::{list_images, load_dataset};
use fewshot_gan::eval::SynthesisManner;
use fewshot_gan::losses::{names, LossReport, Phase};
use fewshot_gan::Error;

const TINY: &[&str] = &[
    "arch.image_size=8",
    "arch.base_width=4",
    "arch.stages=2",
    "arch.content_dim=4",
    "arch.appearance_dim=2",
    "train.stage1_steps=4",
    "train.relation_steps=3",
    "train.stage2_steps=3",
    "train.stage1_batch=4",
    "train.stage2_batch=4",
    "train.relation_batch=8",
    "train.relation_probe_pairs=16",
    "run.checkpoint_interval=2",
    "run.baseline_steps=3",
    "eval.n_generated=24",
];

fn run(args: &[&str]) -> fewshot_gan::Result<()> {
    cli::run(std::iter::once("fewshot-gan").chain(args.iter().copied()))
}

fn with_tiny<'a>(args: &[&'a str], data: &'a str) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(["--data", data]);
    for o in TINY {
        v.extend(["--override", o]);
    }
    v
}

fn make_toy(root: &Path) -> String {
    let data = root.join("toy");
    let d = data.to_str().unwrap().to_string();
    run(&[
        "make-toy", "--out", &d, "--n-src", "40", "--n-tar", "6", "--n-eval", "30", "--size", "8",
        "--seed", "3",
    ])
    .unwrap();
    d
}

fn train(run_dir: &Path, data: &str, extra: &[&str]) -> fewshot_gan::Result<()> {
    let r = run_dir.to_str().unwrap();
    let mut args = vec!["train", "--run-dir", r];
    args.extend_from_slice(extra);
    run(&with_tiny(&args, data))
}

fn log_lines(run_dir: &Path) -> Vec<LossReport> {
    fs::read_to_string(RunLayout::new(run_dir).loss_log())
        .unwrap()
        .lines()
        .map(|l| LossReport::parse_line(l).unwrap())
        .collect()
}

fn file_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().into(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn make_toy_writes_a_loadable_deterministic_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_toy(tmp.path());
    let root = Path::new(&data);
    assert_eq!(list_images(&root.join("source")).unwrap().len(), 40);
    assert_eq!(list_images(&root.join("target")).unwrap().len(), 6);
    assert_eq!(list_images(&root.join("target_eval")).unwrap().len(), 30);
    let d = load_dataset(
        &root.join("source"),
        &root.join("target"),
        &root.join("manifest.tsv"),
        8,
    )
    .unwrap();
    assert_eq!((d.n_source(), d.n_target()), (40, 6));

    let again = tmp.path().join("again");
    let a = again.to_str().unwrap();
    run(&[
        "make-toy", "--out", a, "--n-src", "40", "--n-tar", "6", "--n-eval", "30", "--size", "8",
        "--seed", "3",
    ])
    .unwrap();
    for sub in ["source", "target", "target_eval"] {
        assert_eq!(
            file_bytes(&root.join(sub)),
            file_bytes(&again.join(sub)),
            "{sub}"
        );
    }
    assert_eq!(
        fs::read(root.join("manifest.tsv")).unwrap(),
        fs::read(again.join("manifest.tsv")).unwrap()
    );
}

#[test]
fn broken_datasets_fail_to_load() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_toy(tmp.path());
    let root = Path::new(&data);
    let load = || {
        load_dataset(
            &root.join("source"),
            &root.join("target"),
            &root.join("manifest.tsv"),
            8,
        )
    };

    let manifest = fs::read_to_string(root.join("manifest.tsv")).unwrap();
    let first = manifest.lines().next().unwrap().to_string();
    fs::write(root.join("manifest.tsv"), format!("{manifest}{first}\n")).unwrap();
    assert!(matches!(load(), Err(Error::Manifest(_))));

    fs::write(root.join("manifest.tsv"), "tar_00000.png\tnope.png\n").unwrap();
    assert!(matches!(load(), Err(Error::Load { .. })));

    fs::write(root.join("manifest.tsv"), "only_one_column\n").unwrap();
    assert!(matches!(load(), Err(Error::Manifest(_))));

    fs::remove_file(root.join("manifest.tsv")).unwrap();
    assert!(matches!(load(), Err(Error::Load { .. })));
}

#[test]
fn stage2_without_checkpoint_is_a_phase_order_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_toy(tmp.path());
    let run_dir = tmp.path().join("run");
    assert!(matches!(
        train(&run_dir, &data, &["--stage", "2"]),
        Err(Error::PhaseOrder(_))
    ));
    assert!(matches!(
        train(&run_dir, &data, &["--stage", "relation"]),
        Err(Error::PhaseOrder(_))
    ));
}

#[test]
fn full_pipeline_then_generate_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_toy(tmp.path());
    let run_dir = tmp.path().join("run");
    train(&run_dir, &data, &["--seed", "5"]).unwrap();

    let layout = RunLayout::new(&run_dir);
    for p in [Phase::Stage1, Phase::Relation, Phase::Stage2] {
        assert!(layout.phase_checkpoint(p).is_file(), "{p}");
    }
    assert!(layout.periodic_checkpoint(Phase::Stage1, 2).is_file());
    assert!(layout.final_model().is_file());
    assert!(run_dir.join("relation_fit.txt").is_file());
    let snapshot = fs::read_to_string(layout.config()).unwrap();
    assert!(snapshot.contains("stage1_steps = 4") && snapshot.contains("seed = 5"));
    let lines = log_lines(&run_dir);
    assert_eq!(lines.len(), 4 + 3 + 3);
    assert!(lines[7..].iter().all(|r| r.get(names::RG_TAR).is_some()));

    let ckpt = layout.final_model();
    let c = ckpt.to_str().unwrap();
    let out = tmp.path().join("samples");
    let o = out.to_str().unwrap();
    run(&with_tiny(
        &[
            "generate",
            "--checkpoint",
            c,
            "--n",
            "64",
            "--out",
            o,
            "--manner",
            "syn",
        ],
        &data,
    ))
    .unwrap();
    let files = list_images(&out).unwrap();
    assert_eq!(files.len(), 65);
    assert!(files.contains(&"grid.png".to_string()));
    let grid = image::open(out.join("grid.png")).unwrap();
    assert_eq!((grid.width(), grid.height()), (64, 64));

    let err = cmd_generate(
        &ckpt,
        SynthesisManner::Syn,
        4,
        0,
        &tmp.path().join("x"),
        None,
    );
    assert!(matches!(err, Err(Error::Contract(_))));

    let report = |name: &str| {
        let p = tmp.path().join(name);
        let ps = p.to_str().unwrap().to_string();
        run(&with_tiny(
            &[
                "evaluate",
                "--checkpoint",
                c,
                "--out",
                &ps,
                "--manner",
                "rand",
            ],
            &data,
        ))
        .unwrap();
        fs::read_to_string(p).unwrap()
    };
    let first = report("a.tsv");
    assert_eq!(first, report("b.tsv"));
    let rows: Vec<Vec<&str>> = first
        .lines()
        .skip(1)
        .map(|l| l.split('\t').collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][1], rows[1][1]), ("FID", "KID"));
    assert!(rows
        .iter()
        .all(|r| r[2].parse::<f64>().unwrap().is_finite()));
}

#[test]
fn phase_by_phase_matches_one_shot() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_toy(tmp.path());
    let whole = tmp.path().join("whole");
    train(&whole, &data, &[]).unwrap();
    let split = tmp.path().join("split");
    for stage in ["1", "relation", "2"] {
        train(&split, &data, &["--stage", stage]).unwrap();
    }
    assert_eq!(log_lines(&whole), log_lines(&split));
    assert_eq!(
        fs::read(RunLayout::new(&whole).final_model()).unwrap(),
        fs::read(RunLayout::new(&split).final_model()).unwrap()
    );
}

#[test]
fn ablated_runs_skip_the_relation_phase() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_toy(tmp.path());
    for (ablation, absent) in [
        ("no-relation", vec![names::RG_TAR, names::RT_TAR]),
        (
            "no-adversarial",
            vec![
                names::RG_TAR,
                names::RT_TAR,
                names::IA_G_TAR,
                names::IA_D_TAR,
            ],
        ),
    ] {
        let run_dir = tmp.path().join(ablation);
        train(&run_dir, &data, &["--ablation", ablation]).unwrap();
        assert!(!RunLayout::new(&run_dir)
            .phase_checkpoint(Phase::Relation)
            .exists());
        let lines = log_lines(&run_dir);
        assert_eq!(lines.len(), 4 + 3);
        for r in &lines {
            for name in &absent {
                assert!(
                    r.get(name).is_none(),
                    "{ablation}: {name} at step {}",
                    r.step
                );
            }
        }
    }
}

#[test]
fn baseline_trains_and_evaluates() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_toy(tmp.path());
    let run_dir = tmp.path().join("base");
    train(&run_dir, &data, &["--stage", "baseline"]).unwrap();
    let ckpt = RunLayout::new(&run_dir).final_model();
    let out = tmp.path().join("base.tsv");
    run(&with_tiny(
        &[
            "evaluate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &data,
    ))
    .unwrap();
    assert_eq!(fs::read_to_string(out).unwrap().lines().count(), 3);
}

#[test]
fn bad_overrides_and_stage1_checkpoints_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_toy(tmp.path());
    let run_dir = tmp.path().join("r");
    let r = run_dir.to_str().unwrap();
    let err = run(&[
        "train",
        "--run-dir",
        r,
        "--data",
        &data,
        "--override",
        "train.no_such_key=1",
    ]);
    assert!(matches!(err, Err(Error::Config(_))));

    train(&run_dir, &data, &["--stage", "1"]).unwrap();
    let s1 = RunLayout::new(&run_dir).phase_checkpoint(Phase::Stage1);
    let err = cmd_generate(
        &s1,
        SynthesisManner::Rand,
        4,
        0,
        &tmp.path().join("g"),
        None,
    );
    assert!(matches!(err, Err(Error::PhaseOrder(_))));
}

#[test]
fn binary_reports_errors_with_exit_status() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_fewshot-gan");
    let out = Command::new(bin)
        .args(["train", "--stage", "2", "--run-dir"])
        .arg(tmp.path().join("run"))
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("phase order"));
    assert!(Command::new(bin)
        .arg("--help")
        .output()
        .unwrap()
        .status
        .success());
}
