use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array2;
use proptest::prelude::*;

use flowtie::container::{load_dataset, Bundle};
use flowtie_cli::commands::bench::{parse_table, BenchReport, REPORT_JSON, REPORT_TEXT};
use flowtie_cli::commands::gen_data::{split_assignment, validation_count};
use flowtie_cli::commands::train::LOSSES_FILE;
use flowtie_cli::commands::viz::{decode_pgm, normalize};
use flowtie_cli::config::ConfigFile;
use flowtie_cli::corpus::{Corpus, Split};
use flowtie_cli::{gen_data_options, Cli, Command as Verb};

use clap::Parser;

fn flowtie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowtie"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = flowtie(args);
    assert!(
        out.status.success(),
        "flowtie {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path → bytes for every file under `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Small corpus: 8-pixel grid, 8×8 scan, one test thickness.
fn small_corpus(dir: &Path, seed: &str) {
    ok(&[
        "gen-data", "--out", s(dir), "--structures", "5", "--n", "8", "--scan", "8", "--semi-angle", "10",
        "--cells", "1,2", "--test-cells", "1", "--seed", seed,
    ]);
}

fn train_small(corpus: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "train", "--corpus", s(corpus), "--out", s(out), "--d", "4", "--seed", "3", "--deterministic", "--quiet",
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn gen_data_writes_requested_counts_and_split() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    let stdout = ok(&["gen-data", "--out", s(&out), "--structures", "10", "--n", "16", "--scan", "16", "--seed", "7"]);
    assert!(stdout.contains("10 structures (9 train / 1 val)"), "{stdout}");
    let corpus = Corpus::load(&out).unwrap();
    assert_eq!(corpus.structures.len(), 10);
    assert_eq!(corpus.split(Split::Train).count(), 9);
    assert_eq!(corpus.split(Split::Val).count(), 1);
    for e in &corpus.structures {
        let ds = load_dataset(&out.join(&e.path)).unwrap();
        assert_eq!(ds.i_zero.dim(), (256, 16, 16));
        assert_eq!(ds.thickness, e.thickness);
    }
}

#[test]
fn preset_test_thicknesses() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    ok(&["gen-data", "--out", s(&out), "--structures", "2", "--n", "8", "--scan", "8", "--semi-angle", "10"]);
    let corpus = Corpus::load(&out).unwrap();
    let expected = [("GaAs-1", 5.6533), ("GaAs-5", 28.2665), ("SrTiO3-1", 3.905), ("SrTiO3-5", 19.525)];
    assert_eq!(corpus.tests.len(), expected.len());
    for (label, thickness) in expected {
        let t = corpus.tests.iter().find(|t| t.label == label).unwrap_or_else(|| panic!("missing {label}"));
        assert!((t.thickness - thickness).abs() < 1e-9, "{label}: {}", t.thickness);
        let ds = load_dataset(&corpus.test_path(&out, t)).unwrap();
        assert!((ds.thickness - thickness).abs() < 1e-9);
    }
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    small_corpus(&a, "5");
    small_corpus(&b, "5");
    small_corpus(&c, "6");
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 10);
    assert_eq!(ta, tb);
    assert_ne!(ta, tree(&c));
}

#[test]
fn threaded_generation_matches_serial() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_corpus(&a, "9");
    ok(&[
        "gen-data", "--out", s(&b), "--structures", "5", "--n", "8", "--scan", "8", "--semi-angle", "10",
        "--cells", "1,2", "--test-cells", "1", "--seed", "9", "--threads", "3",
    ]);
    assert_eq!(tree(&a), tree(&b));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_pure_function_of_seed_and_count(seed in any::<u64>(), count in 1usize..60) {
        let a = split_assignment(seed, count, 0.1);
        prop_assert_eq!(&a, &split_assignment(seed, count, 0.1));
        prop_assert_eq!(a.len(), count);
        let n_val = a.iter().filter(|s| **s == Split::Val).count();
        prop_assert_eq!(n_val, validation_count(count, 0.1));
        if count >= 2 {
            prop_assert!(n_val >= 1 && n_val < count);
        }
    }
}

#[test]
fn train_is_deterministic_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    small_corpus(&corpus, "21");
    let (a, b, r) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("r"));
    train_small(&corpus, &a, &["--epochs", "4"]);
    train_small(&corpus, &b, &["--epochs", "4"]);
    let losses = fs::read_to_string(a.join(LOSSES_FILE)).unwrap();
    assert_eq!(losses, fs::read_to_string(b.join(LOSSES_FILE)).unwrap());
    assert_eq!(tree(&a.join("last")), tree(&b.join("last")));
    assert_eq!(tree(&a.join("best")), tree(&b.join("best")));

    train_small(&corpus, &r, &["--epochs", "4", "--stop-after", "3"]);
    assert_eq!(fs::read_to_string(r.join(LOSSES_FILE)).unwrap().lines().filter(|l| l.contains("\ttrain\t")).count(), 3);
    let summary: serde_json::Value = serde_json::from_str(&train_small(&corpus, &r, &["--epochs", "4", "--resume"])).unwrap();
    assert_eq!(summary["resumed_from"], 3);
    assert_eq!(summary["epochs_done"], 4);
    assert_eq!(fs::read_to_string(r.join(LOSSES_FILE)).unwrap(), losses);
    assert_eq!(tree(&r.join("last")), tree(&a.join("last")));
}

#[test]
fn smoke_training_reduces_the_total() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    small_corpus(&corpus, "21");
    let out = tmp.path().join("t");
    let summary: serde_json::Value = serde_json::from_str(&train_small(&corpus, &out, &["--epochs", "30", "--lr", "1e-3"])).unwrap();
    let first = summary["first_train_total"].as_f64().unwrap();
    let last = summary["last_train_total"].as_f64().unwrap();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn excluded_components_are_reported_but_not_optimized() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    small_corpus(&corpus, "21");
    let out = tmp.path().join("t");
    train_small(&corpus, &out, &["--epochs", "2", "--alpha", "1", "--beta", "0", "--gamma", "0"]);
    let text = fs::read_to_string(out.join(LOSSES_FILE)).unwrap();
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let v: Vec<f64> = f[2..].iter().map(|x| x.parse().unwrap()).collect();
        assert_eq!(v[3], v[0], "{line}");
        assert!(v[1] > 0.0 && v[2] > 0.0, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 4);
}

#[test]
fn resume_with_other_settings_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    small_corpus(&corpus, "21");
    let out = tmp.path().join("t");
    train_small(&corpus, &out, &["--epochs", "1"]);
    let r = flowtie(&[
        "train", "--corpus", s(&corpus), "--out", s(&out), "--d", "6", "--seed", "3", "--epochs", "2", "--resume",
        "--quiet",
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).starts_with("error: usage: "));
}

#[test]
fn benchmark_json_and_text_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    small_corpus(&corpus, "21");
    let ckpt = tmp.path().join("t");
    train_small(&corpus, &ckpt, &["--epochs", "2"]);
    let rep = tmp.path().join("r");
    ok(&[
        "benchmark", "--corpus", s(&corpus), "--checkpoint", s(&ckpt), "--out", s(&rep), "--gd-iters", "5",
    ]);
    let json: BenchReport = serde_json::from_str(&fs::read_to_string(rep.join(REPORT_JSON)).unwrap()).unwrap();
    let text = parse_table(&fs::read_to_string(rep.join(REPORT_TEXT)).unwrap()).unwrap();
    assert_eq!(json.rows.len(), 2 * 3);
    assert_eq!(text.len(), json.rows.len());
    for (t, j) in text.iter().zip(&json.rows) {
        assert_eq!(t, j);
        assert!(j.present && j.repeats == 3);
        assert!(j.time_std.unwrap() >= 0.0);
    }
}

#[test]
fn benchmark_without_checkpoint_marks_flowtie_absent() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    small_corpus(&corpus, "21");
    let rep = tmp.path().join("r");
    let stdout = ok(&["benchmark", "--corpus", s(&corpus), "--out", s(&rep), "--methods", "TIE,FlowTIE"]);
    assert!(stdout.contains("# absent"), "{stdout}");
    let json: BenchReport = serde_json::from_str(&fs::read_to_string(rep.join(REPORT_JSON)).unwrap()).unwrap();
    for r in &json.rows {
        assert_eq!(r.present, r.method.to_string() == "TIE", "{r:?}");
    }
}

#[test]
fn reconstruct_writes_a_result_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    small_corpus(&corpus, "21");
    let c = Corpus::load(&corpus).unwrap();
    let ds = corpus.join(&c.tests[0].path);
    let out = tmp.path().join("rec");
    let summary: serde_json::Value =
        serde_json::from_str(&ok(&["reconstruct", "--dataset", s(&ds), "--method", "TIE", "--out", s(&out)])).unwrap();
    assert!(summary["mse"].as_f64().unwrap().is_finite());
    assert!(Bundle::open(&out).unwrap().has("phase_proj"));
}

/// Independent pixel-loop oracle for the export mapping.
fn oracle_pixels(field: &Array2<f64>) -> Vec<u8> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for y in 0..field.nrows() {
        for x in 0..field.ncols() {
            min = min.min(field[[y, x]]);
            max = max.max(field[[y, x]]);
        }
    }
    let mut out = Vec::new();
    for y in 0..field.nrows() {
        for x in 0..field.ncols() {
            out.push(((field[[y, x]] - min) / (max - min) * 255.0).round() as u8);
        }
    }
    out
}

#[test]
fn phase_export_round_trips_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("phase");
    let field = Array2::from_shape_fn((16, 16), |(y, x)| (0.3 * x as f64).sin() + 0.05 * (y * y) as f64 - 1.7);
    let mut b = Bundle::create(&input, "test").unwrap();
    b.put_f64("proj_phase_gt", &field).unwrap();
    b.finish().unwrap();
    let pgm = tmp.path().join("out/phase.pgm");
    ok(&["export-viz", "--input", s(&input), "--what", "proj-phase", "--out", s(&pgm)]);
    let bytes = fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5 16 16 255\n"));
    let (w, h, px) = decode_pgm(&bytes).unwrap();
    assert_eq!((w, h), (16, 16));
    assert_eq!(px, oracle_pixels(&field));
    let side = fs::read_to_string(tmp.path().join("out/phase.txt")).unwrap();
    assert!(side.contains(&format!("min {}", field.iter().copied().fold(f64::INFINITY, f64::min))));
}

#[test]
fn constant_field_exports_mid_gray() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("flat");
    let mut b = Bundle::create(&input, "test").unwrap();
    b.put_f64("proj_phase_gt", &Array2::from_elem((5, 7), 0.25)).unwrap();
    b.finish().unwrap();
    let pgm = tmp.path().join("flat.pgm");
    ok(&["export-viz", "--input", s(&input), "--what", "proj-phase", "--out", s(&pgm)]);
    let (w, h, px) = decode_pgm(&fs::read(&pgm).unwrap()).unwrap();
    assert_eq!((w, h), (7, 5));
    assert!(px.iter().all(|p| *p == 128));
    assert!(fs::read_to_string(tmp.path().join("flat.txt")).unwrap().contains("degenerate"));
}

#[test]
fn vfield_and_diffraction_exports() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    small_corpus(&corpus, "21");
    let c = Corpus::load(&corpus).unwrap();
    let ds = corpus.join(&c.tests[0].path);
    let base = tmp.path().join("v");
    let files = ok(&["export-viz", "--input", s(&ds), "--what", "vfield", "--channel", "3", "--out", s(&base)]);
    assert_eq!(files.lines().count(), 5);
    for suffix in ["v_x.pgm", "v_y.pgm"] {
        let (w, h, _) = decode_pgm(&fs::read(tmp.path().join(suffix)).unwrap()).unwrap();
        assert_eq!((w, h), (8, 8));
    }
    let arrows = fs::read_to_string(tmp.path().join("v_arrows.txt")).unwrap();
    assert_eq!(arrows.lines().count(), 1 + 64);

    let d = tmp.path().join("d.pgm");
    ok(&["export-viz", "--input", s(&ds), "--what", "diffraction", "--position", "2,5", "--out", s(&d)]);
    let (w, h, px) = decode_pgm(&fs::read(&d).unwrap()).unwrap();
    assert_eq!((w, h), (8, 8));
    // oracle: swap quadrants by hand so zero frequency lands at (4, 4)
    let stack = load_dataset(&ds).unwrap().i_zero;
    let mut centred = Array2::zeros((8, 8));
    for c in 0..64 {
        let (y, x) = (c / 8, c % 8);
        centred[[(y + 4) % 8, (x + 4) % 8]] = stack[[c, 2, 5]];
    }
    assert_eq!(px, oracle_pixels(&centred));
}

#[test]
fn normalize_matches_oracle_on_random_fields() {
    proptest!(|(vals in proptest::collection::vec(-1e3f64..1e3, 12))| {
        let field = Array2::from_shape_vec((3, 4), vals).unwrap();
        let (px, range) = normalize(&field).unwrap();
        if !range.degenerate() {
            prop_assert_eq!(px, oracle_pixels(&field));
        }
    });
}

fn gen_args(args: &[&str]) -> flowtie_cli::GenDataArgs {
    let mut full = vec!["flowtie", "gen-data"];
    full.extend_from_slice(args);
    match Cli::try_parse_from(full).unwrap().command {
        Verb::GenData(a) => a,
        other => panic!("parsed {other:?}"),
    }
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let cfg = ConfigFile::parse("# experiment\nout = /tmp/x\nn = 8\nseed = 11\ncells = 2,3\n", Path::new("exp.cfg")).unwrap();
    let opts = gen_data_options(&cfg, gen_args(&["--n", "32"])).unwrap();
    assert_eq!(opts.n, 32);
    assert_eq!(opts.seed, 11);
    assert_eq!(opts.cells, vec![2, 3]);
    assert_eq!(opts.scan, 16);
    assert_eq!(opts.out, PathBuf::from("/tmp/x"));

    let unknown = ConfigFile::parse("out = /tmp/x\nbogus = 1\n", Path::new("exp.cfg")).unwrap();
    assert_eq!(gen_data_options(&unknown, gen_args(&[])).unwrap_err().code(), "config");
}

#[test]
fn config_file_is_read_by_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    let cfg = tmp.path().join("gen.cfg");
    fs::write(&cfg, format!("out = {}\nstructures = 3\nn = 8\nscan = 8\nsemi_angle = 10\ntest_cells = 1\n", out.display())).unwrap();
    ok(&["--config", s(&cfg), "gen-data", "--structures", "2"]);
    let corpus = Corpus::load(&out).unwrap();
    assert_eq!(corpus.structures.len(), 2);
    assert_eq!(corpus.acquisition.n, 8);
}

fn error_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(text.trim_end().lines().count(), 1, "{text}");
    text.trim_end().to_string()
}

#[test]
fn failures_exit_nonzero_with_a_coded_line() {
    let tmp = tempfile::tempdir().unwrap();

    let r = flowtie(&["gen-data", "--bogus"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(error_line(&r).starts_with("error: usage: "));

    let r = flowtie(&["frobnicate"]);
    assert_eq!(r.status.code(), Some(2));

    let r = flowtie(&["gen-data", "--out", s(&tmp.path().join("g")), "--n", "16", "--scan", "5"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(error_line(&r).starts_with("error: invalid-parameter: "));

    let r = flowtie(&["train", "--corpus", s(&tmp.path().join("nowhere")), "--out", s(&tmp.path().join("t"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(error_line(&r).starts_with("error: io: "));

    let flat = tmp.path().join("flat");
    let mut b = Bundle::create(&flat, "test").unwrap();
    b.put_f64("other", &Array2::<f64>::zeros((2, 2))).unwrap();
    b.finish().unwrap();
    let r = flowtie(&["export-viz", "--input", s(&flat), "--what", "proj-phase", "--out", s(&tmp.path().join("o"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(error_line(&r).starts_with("error: missing-tensor: "));

    let r = flowtie(&["export-viz", "--input", s(&flat), "--what", "hologram", "--out", s(&tmp.path().join("o"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(error_line(&r).starts_with("error: usage: "));

    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "this line has no equals sign\n").unwrap();
    let r = flowtie(&["--config", s(&bad), "gen-data"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(error_line(&r).starts_with("error: config: "));
}

#[test]
fn help_succeeds() {
    let r = flowtie(&["--help"]);
    assert!(r.status.success());
    let text = String::from_utf8_lossy(&r.stdout);
    for verb in ["gen-data", "train", "reconstruct", "benchmark", "export-viz"] {
        assert!(text.contains(verb), "{verb}");
    }
}
