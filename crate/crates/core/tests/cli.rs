use r2gconv::checkpoint::read_tensor_dump;
use r2gconv::cli::run;
use r2gconv::record::{MetricsRecord, Record};

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn r2net(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(std::iter::once("r2net").chain(args.iter().copied()), &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn records(text: &str) -> Vec<Record> {
    text.lines().map(|l| l.parse().unwrap()).collect()
}

const SUBCOMMANDS: [(&str, &[&str]); 7] = [
    ("train", &["--epochs", "--batch-size", "--lr", "--optimizer", "--subset-train", "--out", "--no-rotate"]),
    ("eval", &["--ckpt", "--test-images", "--test-labels", "--subset-test"]),
    ("equiv-check", &["--ckpt", "--compare-ckpt", "--probes", "--per-layer"]),
    ("param-count", &["--widths", "--in-channels", "--classes"]),
    ("build-filters", &["--flavor", "--k", "--ci", "--co", "--dump"]),
    ("gradcheck", &["--op", "--model", "--trials"]),
    ("sigma-sweep", &["--sigmas", "--epochs"]),
];

#[test]
fn help_lists_every_subcommand_and_its_flags() {
    let top = r2net(&["--help"]);
    assert_eq!(top.code, 0);
    for (name, flags) in SUBCOMMANDS {
        assert!(top.out.contains(name), "top-level help misses {name}");
        let h = r2net(&[name, "--help"]);
        assert_eq!(h.code, 0, "{name}");
        assert!(h.out.starts_with(&format!("Usage: r2net {name}")) || h.out.contains(&format!("Usage: r2net {name}")));
        for flag in flags.iter().chain(&["--seed", "--sigma", "--mode", "--precision"]) {
            assert!(h.out.contains(flag), "{name} help misses {flag}");
        }
    }
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        &[][..],
        &["frobnicate"],
        &["param-count", "--mode", "sideways"],
        &["build-filters", "--flavor", "diagonal"],
        &["train", "--no-such-flag"],
    ] {
        let r = r2net(args);
        assert_eq!(r.code, 2, "{args:?}: {}", r.err);
        assert!(r.out.is_empty());
        assert!(!r.err.is_empty());
    }
}

#[test]
fn param_count_reports_layers_and_total() {
    let r = r2net(&["param-count", "--seed", "3"]);
    assert_eq!(r.code, 0, "{}", r.err);
    let recs = records(&r.out);
    assert_eq!(recs[0].kind, "config");
    assert_eq!(recs[0].get("seed"), Some("3"));
    assert_eq!(recs[1].kind, "layer");
    assert_eq!(recs[1].get("name"), Some("stem"));
    let total = recs.last().unwrap();
    assert_eq!(total.kind, "total");
    assert_eq!(total.get("params"), Some("41986"));
    let summed: usize = recs.iter().filter(|r| r.kind == "layer").map(|r| r.parse_field::<usize>("params").unwrap()).sum();
    assert_eq!(summed, 41986);
    let plain = r2net(&["param-count", "--mode", "plain"]);
    assert_eq!(records(&plain.out).last().unwrap().get("params"), Some("45626"));
}

#[test]
fn build_filters_writes_a_readable_dump() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.bin");
    let p = path.to_str().unwrap();
    let strict = r2net(&["--mode", "strict", "--precision", "f64-check", "build-filters", "--k", "5", "--co", "2", "--dump", p]);
    assert_eq!(strict.code, 0, "{}", strict.err);
    let rec = records(&strict.out).pop().unwrap();
    assert_eq!(rec.kind, "filters");
    assert_eq!(rec.get("strictness_gap"), Some("0"));
    assert_eq!(rec.get("k_rel_shape"), Some("2,4,1,1,5,5"));
    let dump = read_tensor_dump(&path).unwrap();
    let names: Vec<&str> = dump.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["k_init", "delta", "k_rel"]);

    let relaxed = r2net(&["build-filters", "--flavor", "lifting", "--ci", "2", "--dump", p]);
    assert_eq!(relaxed.code, 0);
    let gap: f64 = records(&relaxed.out).pop().unwrap().parse_field("strictness_gap").unwrap();
    assert!(gap > 0.0);
}

#[test]
fn gradcheck_single_op_and_unknown_op() {
    let r = r2net(&["gradcheck", "--op", "grid_sample", "--trials", "1"]);
    assert_eq!(r.code, 0, "{}", r.err);
    let rec = records(&r.out).pop().unwrap();
    assert_eq!(rec.kind, "gradcheck");
    assert_eq!(rec.get("result"), Some("pass"));
    let bad = r2net(&["gradcheck", "--op", "fft"]);
    assert_eq!(bad.code, 1);
    assert!(bad.err.starts_with("error kind=invalid"), "{}", bad.err);
}

#[test]
fn equiv_check_strict_model_is_invariant() {
    let r = r2net(&["--mode", "strict", "--precision", "f64-check", "equiv-check", "--widths", "4,8,8,8", "--probes", "2"]);
    assert_eq!(r.code, 0, "{}", r.err);
    let recs = records(&r.out);
    let equiv: Vec<_> = recs.iter().filter(|r| r.kind == "equiv").collect();
    assert_eq!(equiv.len(), 4);
    for e in equiv {
        assert!(e.parse_field::<f64>("error").unwrap() <= 1e-10);
    }
    let summary = recs.last().unwrap();
    assert_eq!(summary.kind, "summary");
    assert_eq!(summary.get("prop1"), Some("holds"));
    assert_eq!(summary.get("prop2"), Some("holds"));
}

#[test]
fn train_then_eval_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("tiny.ckpt");
    let c = ckpt.to_str().unwrap();
    let common = ["--dataset", "synthetic", "--synthetic-n", "8", "--ee-probes", "2"];
    let mut args = vec!["--seed", "5", "train", "--widths", "4,8,8,8", "--epochs", "1", "--batch-size", "4", "--out", c];
    args.extend(common);
    let t = r2net(&args);
    assert_eq!(t.code, 0, "{}", t.err);
    let recs = records(&t.out);
    assert_eq!(recs[0].kind, "config");
    let metrics: Vec<MetricsRecord> = recs
        .iter()
        .filter(|r| r.kind == "metrics")
        .map(|r| MetricsRecord::from_record(r).unwrap())
        .collect();
    assert_eq!(metrics.len(), 2);
    assert!(metrics.iter().all(|m| m.epoch == 1 && m.empirical_ee.is_some()));
    assert_eq!(recs.last().unwrap().kind, "checkpoint");

    let again = r2net(&args);
    let rerun: Vec<MetricsRecord> = records(&again.out)
        .iter()
        .filter(|r| r.kind == "metrics")
        .map(|r| MetricsRecord::from_record(r).unwrap())
        .collect();
    assert!(metrics.iter().zip(&rerun).all(|(a, b)| a.same_outcome(b)));

    let mut eval = vec!["eval", "--ckpt", c];
    eval.extend(common);
    let e = r2net(&eval);
    assert_eq!(e.code, 0, "{}", e.err);
    let m = MetricsRecord::from_record(records(&e.out).last().unwrap()).unwrap();
    assert!((m.top1_error_percent - metrics[1].top1_error_percent).abs() < 1e-9);
}

#[test]
fn runtime_errors_are_single_structured_lines() {
    let missing = r2net(&["eval", "--ckpt", "/nonexistent/model.ckpt", "--dataset", "synthetic"]);
    assert_eq!(missing.code, 1);
    assert_eq!(missing.err.lines().count(), 1);
    assert!(missing.err.starts_with("error kind=io message="), "{}", missing.err);
    assert!(missing.err.contains("/nonexistent/model.ckpt"));

    let widths = r2net(&["param-count", "--widths", "1,2"]);
    assert_eq!(widths.code, 1);
    assert!(widths.err.starts_with("error kind=spec"), "{}", widths.err);

    let f64_train = r2net(&["--precision", "f64-check", "train", "--dataset", "synthetic"]);
    assert_eq!(f64_train.code, 1);
    assert!(f64_train.err.starts_with("error kind="));
    assert!(records(&f64_train.out)[0].kind == "config");
}
