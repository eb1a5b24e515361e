//! End-to-end tests that drive the compiled `xlmap` binary.
//!
//! A small demo corpus is synthesized once and shared across tests; each
//! test then exercises one subcommand through its real argv surface and
//! checks exit codes, stdout and the files left behind.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use xlmap::manifest::{load_manifest, read_jsonl, save_inventory, CipheredRecord};
use xlmap::xlpo::save_posteriors;
use xlmap_core::corpus::{LangId, PosteriorSequence, TokenInventory};
use xlmap_core::numerics::Matrix;

fn xlmap() -> Command {
    Command::new(env!("CARGO_BIN_EXE_xlmap"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary should spawn");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout:\n{}\nstderr:\n{}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output()
        .expect("binary should spawn")
        .status
        .code()
        .expect("no exit code")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Reads every file under `dir` into a map keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                out.insert(
                    path.strip_prefix(base).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn synth_tiny(root: &Path, jobs: usize) {
    run_ok(xlmap().args([
        "synth",
        "--seed",
        "7",
        "--jobs",
        &jobs.to_string(),
        "--out",
        root.to_str().unwrap(),
        "--train-utts",
        "6",
        "--eval-utts",
        "2",
        "--min-frames",
        "10",
        "--max-frames",
        "14",
        "--am-hidden",
        "4",
        "--am-epochs",
        "2",
    ]));
}

/// Corpus shared by the tests that need real data. Synthesized once; the
/// temporary directory lives for the whole test process.
fn fixture_root() -> PathBuf {
    static FIXTURE: OnceLock<tempfile::TempDir> = OnceLock::new();
    let dir = FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("corpus");
        run_ok(xlmap().args([
            "synth",
            "--seed",
            "7",
            "--out",
            root.to_str().unwrap(),
            "--train-utts",
            "12",
            "--eval-utts",
            "4",
            "--min-frames",
            "12",
            "--max-frames",
            "20",
            "--am-hidden",
            "8",
            "--am-epochs",
            "3",
        ]));
        dir
    });
    dir.path().join("corpus")
}

/// A brav+xray -> alfa checkpoint trained briefly on the shared corpus.
fn trained_checkpoint() -> PathBuf {
    static TRAINED: OnceLock<PathBuf> = OnceLock::new();
    TRAINED
        .get_or_init(|| {
            let root = fixture_root();
            let out = root.parent().unwrap().join("base.xlck");
            run_ok(xlmap().args([
                "train-map",
                "--seed",
                "7",
                "--root",
                root.to_str().unwrap(),
                "--target",
                "alfa",
                "--sources",
                "brav,xray",
                "--hidden",
                "6",
                "--epochs",
                "2",
                "--batch-size",
                "4",
                "--out",
                out.to_str().unwrap(),
            ]));
            out
        })
        .clone()
}

#[test]
fn synth_is_deterministic_and_jobs_do_not_change_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    synth_tiny(&a, 1);
    synth_tiny(&b, 1);
    synth_tiny(&c, 3);

    let snap_a = snapshot(&a);
    assert!(snap_a.contains_key(Path::new("alfa/manifest.jsonl")));
    assert!(snap_a.contains_key(Path::new("alfa/inventory.jsonl")));
    assert!(snap_a.contains_key(Path::new("models/toy_am_brav.json")));
    assert!(snap_a.contains_key(Path::new("posteriors/train/brav/alfa/u00000.xlpo")));
    assert!(snap_a.contains_key(Path::new("posteriors/eval/brav/alfa/u00006.xlpo")));
    assert!(snap_a.contains_key(Path::new("alfa/features/u00005.xlft")));

    assert_eq!(snap_a, snapshot(&b), "same seed must give identical bytes");
    assert_eq!(snap_a, snapshot(&c), "--jobs must not change any output");
}

#[test]
fn synth_rejects_an_empty_frame_range() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    let code = exit_code(xlmap().args([
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--min-frames",
        "20",
        "--max-frames",
        "20",
    ]));
    assert_eq!(code, 2);
    assert!(!out.exists(), "a rejected run must not create the corpus");
}

#[test]
fn train_map_without_a_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let code = exit_code(xlmap().args([
        "train-map",
        "--root",
        dir.path().to_str().unwrap(),
        "--target",
        "alfa",
        "--sources",
        "brav",
        "--out",
        dir.path().join("m.xlck").to_str().unwrap(),
    ]));
    assert_eq!(code, 3);
}

#[test]
fn train_map_rejects_a_bad_dev_fraction() {
    let root = fixture_root();
    let dir = tempfile::tempdir().unwrap();
    let code = exit_code(xlmap().args([
        "train-map",
        "--root",
        root.to_str().unwrap(),
        "--target",
        "alfa",
        "--sources",
        "brav",
        "--dev-fraction",
        "1.5",
        "--out",
        dir.path().join("m.xlck").to_str().unwrap(),
    ]));
    assert_eq!(code, 2);
}

#[test]
fn eval_map_needs_a_checkpoint_or_identity() {
    let dir = tempfile::tempdir().unwrap();
    let code = exit_code(xlmap().args([
        "eval-map",
        "--root",
        dir.path().to_str().unwrap(),
    ]));
    assert_eq!(code, 2);
}

#[test]
fn decode_prints_the_text_a_file_encodes() {
    let dir = tempfile::tempdir().unwrap();
    let inv_path = dir.path().join("inventory.jsonl");
    let inventory = TokenInventory::new(
        LangId::from("toy"),
        vec!["<blk>".into(), "h".into(), "i".into()],
        0,
        None,
    )
    .unwrap();
    save_inventory(&inv_path, &inventory).unwrap();

    // Frame argmaxes h h <blk> i collapse to "hi".
    let mut m = Matrix::zeros(4, 3);
    for (t, class) in [1usize, 1, 0, 2].into_iter().enumerate() {
        m.row_mut(t)[class] = 1.0;
    }
    let seq = PosteriorSequence::new(LangId::from("toy"), "u0".into(), m).unwrap();
    let post_path = dir.path().join("u0.xlpo");
    save_posteriors(&post_path, &seq).unwrap();

    let out = run_ok(xlmap().args([
        "decode",
        "--posteriors",
        post_path.to_str().unwrap(),
        "--inventory",
        inv_path.to_str().unwrap(),
    ]));
    assert_eq!(stdout_of(&out), "hi\n");

    let code = exit_code(xlmap().args([
        "decode",
        "--posteriors",
        dir.path().join("absent.xlpo").to_str().unwrap(),
        "--inventory",
        inv_path.to_str().unwrap(),
    ]));
    assert_eq!(code, 3);
}

#[test]
fn identity_eval_reports_perfect_accuracy() {
    let root = fixture_root();
    let dir = tempfile::tempdir().unwrap();
    let reports = dir.path().join("reports.jsonl");
    let out = run_ok(xlmap().args([
        "eval-map",
        "--root",
        root.to_str().unwrap(),
        "--identity",
        "--target",
        "alfa",
        "--split",
        "eval",
        "--ns",
        "1,2",
        "--out",
        reports.to_str().unwrap(),
    ]));
    assert!(
        stdout_of(&out).contains("100.00"),
        "identity mapping must score 100%:\n{}",
        stdout_of(&out)
    );

    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&reports)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["per_n"]["1"], 1.0);
    assert_eq!(lines[0]["per_n"]["2"], 1.0);
}

#[test]
fn cer_scores_plain_and_keyed_files() {
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("refs.txt");
    let hyps = dir.path().join("hyps.txt");
    std::fs::write(&refs, "abc\nxyz\n").unwrap();
    std::fs::write(&hyps, "abd\nxyz\n").unwrap();

    let report_path = dir.path().join("report.json");
    let out = run_ok(xlmap().args([
        "cer",
        "--refs",
        refs.to_str().unwrap(),
        "--hyps",
        hyps.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]));
    // One substitution over six reference characters.
    assert!(stdout_of(&out).contains("16.67"), "{}", stdout_of(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["edits"], 1);
    assert_eq!(report["ref_chars"], 6);
    assert!((report["cer"].as_f64().unwrap() - 1.0 / 6.0).abs() < 1e-12);

    // Keyed files join on utterance id regardless of line order.
    let refs_j = dir.path().join("refs.jsonl");
    let hyps_j = dir.path().join("hyps.jsonl");
    std::fs::write(
        &refs_j,
        "{\"utt_id\":\"a\",\"transcript\":\"abc\"}\n{\"utt_id\":\"b\",\"transcript\":\"xyz\"}\n",
    )
    .unwrap();
    std::fs::write(
        &hyps_j,
        "{\"utt_id\":\"b\",\"text\":\"xyz\"}\n{\"utt_id\":\"a\",\"text\":\"abd\"}\n",
    )
    .unwrap();
    let out = run_ok(xlmap().args([
        "cer",
        "--refs",
        refs_j.to_str().unwrap(),
        "--hyps",
        hyps_j.to_str().unwrap(),
    ]));
    assert!(stdout_of(&out).contains("16.67"), "{}", stdout_of(&out));

    // Mixed formats are refused as a usage error.
    let code = exit_code(xlmap().args([
        "cer",
        "--refs",
        refs_j.to_str().unwrap(),
        "--hyps",
        hyps.to_str().unwrap(),
    ]));
    assert_eq!(code, 2);
}

#[test]
fn training_resumes_deterministically() {
    let root = fixture_root();
    let base = trained_checkpoint();
    let dir = tempfile::tempdir().unwrap();

    let resume = |tag: &str| -> (Vec<u8>, Vec<u8>) {
        let out = dir.path().join(format!("{tag}.xlck"));
        let hist = dir.path().join(format!("{tag}.history.jsonl"));
        run_ok(xlmap().args([
            "train-map",
            "--seed",
            "7",
            "--root",
            root.to_str().unwrap(),
            "--target",
            "alfa",
            "--sources",
            "brav,xray",
            "--init-checkpoint",
            base.to_str().unwrap(),
            "--epochs",
            "2",
            "--batch-size",
            "4",
            "--out",
            out.to_str().unwrap(),
            "--history",
            hist.to_str().unwrap(),
        ]));
        (std::fs::read(&out).unwrap(), std::fs::read(&hist).unwrap())
    };

    let (ckpt1, hist1) = resume("r1");
    let (ckpt2, hist2) = resume("r2");
    assert_eq!(ckpt1, ckpt2, "resumed checkpoints must match byte for byte");
    assert_eq!(hist1, hist2, "resumed histories must match byte for byte");
    assert_ne!(
        ckpt1,
        std::fs::read(&base).unwrap(),
        "resuming must actually move the parameters"
    );
}

#[test]
fn resume_refuses_a_mismatched_source_set() {
    let root = fixture_root();
    let base = trained_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let code = exit_code(xlmap().args([
        "train-map",
        "--root",
        root.to_str().unwrap(),
        "--target",
        "alfa",
        "--sources",
        "brav",
        "--init-checkpoint",
        base.to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        dir.path().join("m.xlck").to_str().unwrap(),
    ]));
    assert_eq!(code, 2);
}

#[test]
fn cipher_and_augment_build_a_loadable_plan() {
    let root = fixture_root();
    let base = trained_checkpoint();
    let dir = tempfile::tempdir().unwrap();

    let cipher = |source: &str| -> PathBuf {
        let out = dir.path().join(format!("cipher_{source}.jsonl"));
        run_ok(xlmap().args([
            "cipher",
            "--root",
            root.to_str().unwrap(),
            "--checkpoint",
            base.to_str().unwrap(),
            "--source",
            source,
            "--out",
            out.to_str().unwrap(),
        ]));
        out
    };
    let brav = cipher("brav");
    let xray = cipher("xray");
    let records: Vec<CipheredRecord> = read_jsonl(&brav).unwrap();
    assert_eq!(records.len(), 12, "one record per train utterance");
    assert!(records.iter().all(|r| r.target_lang == LangId::from("alfa")));

    // augAll keeps both sources next to the originals.
    let plan_all = dir.path().join("plan_all");
    run_ok(xlmap().args([
        "augment",
        "--root",
        root.to_str().unwrap(),
        "--target",
        "alfa",
        "--ciphered",
        brav.to_str().unwrap(),
        xray.to_str().unwrap(),
        "--mode",
        "augAll",
        "--out",
        plan_all.to_str().unwrap(),
    ]));
    let loaded = load_manifest(plan_all.join("plan.jsonl")).unwrap();
    assert_eq!(loaded.manifest.len(), 12 + 2 * 12);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(plan_all.join("plan_meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["mode"], "augAll");
    assert_eq!(meta["target_lang"], "alfa");

    // augTwo needs accuracy reports and keeps only the closest source.
    let reports = dir.path().join("reports.jsonl");
    run_ok(xlmap().args([
        "eval-map",
        "--root",
        root.to_str().unwrap(),
        "--checkpoint",
        base.to_str().unwrap(),
        "--split",
        "eval",
        "--ns",
        "1",
        "--out",
        reports.to_str().unwrap(),
    ]));
    let plan_two = dir.path().join("plan_two");
    run_ok(xlmap().args([
        "augment",
        "--root",
        root.to_str().unwrap(),
        "--target",
        "alfa",
        "--ciphered",
        brav.to_str().unwrap(),
        xray.to_str().unwrap(),
        "--mode",
        "augTwo",
        "--reports",
        reports.to_str().unwrap(),
        "--out",
        plan_two.to_str().unwrap(),
    ]));
    let loaded = load_manifest(plan_two.join("plan.jsonl")).unwrap();
    assert_eq!(loaded.manifest.len(), 12 + 12);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(plan_two.join("plan_meta.json")).unwrap())
            .unwrap();
    let closest = meta["closest_lang"].as_str().unwrap();
    assert!(closest == "brav" || closest == "xray", "closest: {closest}");

    // Every feature path in the plan resolves from the plan directory.
    for rec in loaded.manifest.records() {
        let path = loaded.resolve(rec);
        assert!(path.exists(), "missing feature file {}", path.display());
    }
}
