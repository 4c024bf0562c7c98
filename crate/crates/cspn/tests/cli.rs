use std::path::{Path, PathBuf};
use std::process::Command;

use cspn::cli::{eval_metrics, run_from};
use cspn::model_io;
use cspn::tabular;
use cspn_core::circuit::{Circuit, GatingFunction, Node, NodeKind, Scope};
use cspn_core::data::synthetic::{make_synthetic, Generator, SyntheticSpec};
use cspn_core::leaves::{Family, GlmLeaf};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cspn"))
}

fn run(args: &[&str]) -> String {
    let mut full = vec!["cspn"];
    full.extend_from_slice(args);
    run_from(full).unwrap_or_else(|e| panic!("{args:?}: {e}"))
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn write_ci_data(dir: &Path, n: usize, seed: u64) -> (PathBuf, PathBuf) {
    let data = make_synthetic(&SyntheticSpec { generator: Generator::CiPair, n }, seed).unwrap();
    let csv = dir.join("data.csv");
    let schema = dir.join("schema.txt");
    tabular::save_csv(&data, &csv).unwrap();
    std::fs::write(&schema, tabular::schema_text(data.schema())).unwrap();
    (csv, schema)
}

#[test]
fn eval_matches_library_to_the_last_digit() {
    let d = tempfile::tempdir().unwrap();
    let (csv, schema) = write_ci_data(d.path(), 400, 1);
    let out = d.path().join("learn");
    run(&["learn", "--data", &s(&csv), "--schema", &s(&schema), "--min-instances", "100", "--out", &s(&out)]);
    let eval_out = d.path().join("eval");
    let model_path = out.join("model.json");
    run(&["eval", "--model", &s(&model_path), "--data", &s(&csv), "--schema", &s(&schema), "--precision", "full", "--out", &s(&eval_out)]);

    let model = model_io::load_model(&model_path).unwrap();
    let data = tabular::load_csv(&csv, &schema).unwrap();
    let (mean, rmse, per_row) = eval_metrics(&model, &data).unwrap();
    let direct = cspn_core::learn::mean_cll(&model, &data).unwrap();
    assert!(mean.is_finite());
    assert!((mean - direct).abs() <= 1e-12 * direct.abs());

    let metrics = std::fs::read_to_string(eval_out.join("metrics.csv")).unwrap();
    let row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "400");
    assert_eq!(row[1], model_io::real(mean));
    assert_eq!(row[2], model_io::real(rmse));
    assert_eq!(row[1].parse::<f64>().unwrap().to_bits(), mean.to_bits());
    let per = std::fs::read_to_string(eval_out.join("per_sample_cll.csv")).unwrap();
    assert_eq!(per.lines().count(), 401);
    assert_eq!(per.lines().nth(5).unwrap(), format!("4,{}", model_io::real(per_row[4])));
}

#[test]
fn learn_with_large_min_instances_is_fully_factorized() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("o");
    let summary = run(&["learn", "--synthetic", "block_factorized", "--rows", "200", "--min-instances", "1000", "--out", &s(&out)]);
    let model = model_io::load_model(&out.join("model.json")).unwrap();
    let st = model.summary();
    assert_eq!((st.products, st.leaves, st.gatings), (1, model.num_y(), 0));
    assert!(summary.contains("(leaf 4, product 1, gating 0)"), "{summary}");
}

#[test]
fn ci_pair_pipeline_finds_product_root() {
    let d = tempfile::tempdir().unwrap();
    let mut product_roots = 0;
    for seed in 0..10 {
        let out = d.path().join(format!("s{seed}"));
        run(&["learn", "--synthetic", "ci_pair", "--rows", "500", "--seed", &seed.to_string(), "--out", &s(&out)]);
        let structure = std::fs::read_to_string(out.join("structure.txt")).unwrap();
        if structure.contains("root: product") {
            product_roots += 1;
        }
    }
    assert!(product_roots >= 8, "{product_roots}/10");
}

#[test]
fn seeded_runs_are_bit_reproducible_across_thread_counts() {
    let d = tempfile::tempdir().unwrap();
    let mut models = Vec::new();
    for (tag, threads) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let out = d.path().join(tag);
        run(&["learn", "--synthetic", "block_factorized", "--rows", "400", "--min-instances", "100", "--seed", "5", "--threads", threads, "--out", &s(&out)]);
        let train_out = d.path().join(format!("{tag}t"));
        run(&[
            "train", "--model", &s(&out.join("model.json")), "--synthetic", "block_factorized", "--rows", "400", "--seed", "5",
            "--valid-fraction", "0.25", "--epochs", "3", "--threads", threads, "--out", &s(&train_out),
        ]);
        models.push((std::fs::read(out.join("model.json")).unwrap(), std::fs::read(train_out.join("model.json")).unwrap()));
    }
    assert_eq!(models[0], models[1]);
    assert_eq!(models[0], models[2]);
}

#[test]
fn resolved_config_records_flags_over_file() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    std::fs::write(&cfg, "alpha = 0.01\nmin_instances = 80\nrows = 300\nsynthetic = \"ci_pair\"\n").unwrap();
    let out = d.path().join("o");
    run(&["learn", "--config", &s(&cfg), "--min-instances", "120", "--out", &s(&out)]);
    let resolved: toml::Table = std::fs::read_to_string(out.join("config.toml")).unwrap().parse().unwrap();
    assert_eq!(resolved["alpha"].as_float(), Some(0.01));
    assert_eq!(resolved["min_instances"].as_integer(), Some(120));
    assert_eq!(resolved["command"].as_str(), Some("learn"));
    assert_eq!(resolved["seed"].as_integer(), Some(0));

    std::fs::write(&cfg, "synthetic = \"ci_pair\"\nbogus = 1\n").unwrap();
    let e = run_from(["cspn", "learn", "--config", &s(&cfg), "--out", &s(&out)]).unwrap_err();
    assert!(e.message.contains("bogus"));
}

#[test]
fn train_writes_log_and_never_loses_validation_cll() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("l");
    run(&["learn", "--synthetic", "two_blob_gating", "--rows", "600", "--min-instances", "150", "--out", &s(&out)]);
    let t = d.path().join("t");
    run(&[
        "train", "--model", &s(&out.join("model.json")), "--synthetic", "two_blob_gating", "--rows", "600",
        "--valid-fraction", "0.2", "--epochs", "5", "--refit-union", "--out", &s(&t),
    ]);
    let log = std::fs::read_to_string(t.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,train_cll,valid_cll,grad_norm,seconds"));
    assert!(lines.count() >= 2);
    model_io::load_model(&t.join("model.json")).unwrap();
}

#[test]
fn sample_mpe_and_citest_write_outputs() {
    let d = tempfile::tempdir().unwrap();
    let (csv, schema) = write_ci_data(d.path(), 300, 2);
    let out = d.path().join("l");
    run(&["learn", "--data", &s(&csv), "--schema", &s(&schema), "--min-instances", "100", "--out", &s(&out)]);
    let model = s(&out.join("model.json"));

    let so = d.path().join("s");
    run(&["sample", "--model", &model, "--data", &s(&csv), "--schema", &s(&schema), "--count", "2", "--out", &s(&so)]);
    let samples = std::fs::read_to_string(so.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 1 + 600);
    let so2 = d.path().join("s2");
    run(&["sample", "--model", &model, "--data", &s(&csv), "--schema", &s(&schema), "--count", "2", "--out", &s(&so2)]);
    assert_eq!(samples, std::fs::read_to_string(so2.join("samples.csv")).unwrap());

    let mo = d.path().join("m");
    run(&["mpe", "--model", &model, "--data", &s(&csv), "--schema", &s(&schema), "--out", &s(&mo)]);
    assert_eq!(std::fs::read_to_string(mo.join("mpe.csv")).unwrap().lines().count(), 301);

    let co = d.path().join("c");
    let summary = run(&["citest", "--synthetic", "dependent_pair", "--rows", "300", "--pair", "0,1", "--out", &s(&co)]);
    assert!(summary.contains("dependent"), "{summary}");
    let table = std::fs::read_to_string(co.join("citest.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().ends_with(",true"));
    let all = d.path().join("c2");
    run(&["citest", "--synthetic", "block_factorized", "--rows", "300", "--out", &s(&all)]);
    let table = std::fs::read_to_string(all.join("citest.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 6);
}

#[test]
fn exit_codes_classify_failures() {
    let d = tempfile::tempdir().unwrap();
    let schema = d.path().join("schema.txt");
    std::fs::write(&schema, "y0,binary,Y\nx0,continuous,X\n").unwrap();
    let bad = d.path().join("bad.csv");
    std::fs::write(&bad, "1,0.5\n2,0.5\n").unwrap();
    let out = d.path().join("o");

    let o = bin().args(["learn", "--data", &s(&bad), "--schema", &s(&schema), "--out", &s(&out)]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.starts_with("error[validation]: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let o = bin().args(["learn", "--data", &s(&d.path().join("missing.csv")), "--schema", &s(&schema), "--out", &s(&out)]).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("error[io]: "));

    // A Poisson leaf whose mean overflows.
    let leaf = GlmLeaf::new(Family::Poisson, vec![0.0, 800.0], 1.0).unwrap();
    let model = Circuit::new(1, 1, vec![Node::leaf(0, leaf)], 0).unwrap();
    let model_path = d.path().join("overflow.json");
    model_io::save_model(&model, &model_path).unwrap();
    let count_schema = d.path().join("count.txt");
    std::fs::write(&count_schema, "y0,count,Y\nx0,continuous,X\n").unwrap();
    let counts = d.path().join("counts.csv");
    std::fs::write(&counts, "3,0.5\n").unwrap();
    let o = bin().args(["eval", "--model", &s(&model_path), "--data", &s(&counts), "--schema", &s(&count_schema), "--out", &s(&out)]).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("error[numeric]: "));

    let o = bin().args(["learn", "--synthetic", "nope", "--out", &s(&out)]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = bin().args(["learn", "--bogus-flag"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn cyclic_model_file_is_rejected_with_cycle() {
    let d = tempfile::tempdir().unwrap();
    let text = r#"{"format_version":1,"num_y":1,"num_x":0,"root":0,"nodes":[
{"id":0,"kind":"gating","scope":[0],"children":[1,2],"gate":{"kind":"constant","params":[0.5,0.5]}},
{"id":1,"kind":"gating","scope":[0],"children":[0,2],"gate":{"kind":"constant","params":[0.5,0.5]}},
{"id":2,"kind":"leaf","scope":[0],"leaf":{"family":"bernoulli","link":"logit","coeffs":[0.0]}}]}"#;
    let e = model_io::from_json(text).unwrap_err();
    assert!(e.message.contains("cycle"), "{e}");
    assert!(e.node.is_some() && e.offset.is_some());

    let path = d.path().join("cycle.json");
    std::fs::write(&path, text).unwrap();
    let o = bin().args(["sample", "--model", &s(&path), "--out", &s(&d.path().join("o"))]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8(o.stderr).unwrap().contains("cycle"));
}

#[test]
fn example_gating_circuit_round_trips_bit_identically() {
    let leaf = |logit: f64| GlmLeaf::new(Family::Bernoulli, vec![0.3, logit], 1.0).unwrap();
    let p = |q: f64| (q / (1.0 - q)).ln();
    let nodes = vec![
        Node::leaf(0, leaf(p(0.9))),
        Node::leaf(0, leaf(p(0.1))),
        Node::gating(Scope::single(0), vec![0, 1], GatingFunction::Constant(vec![0.3, 0.7])),
    ];
    let c = Circuit::new(1, 1, nodes, 2).unwrap();
    let back = model_io::from_json(&model_io::to_json(&c)).unwrap();
    assert!(matches!(back.node(2).kind, NodeKind::Gating { .. }));
    let mut r = cspn_core::rng::seeded(3);
    use rand::Rng as _;
    for _ in 0..100 {
        let x = [r.random::<f64>() * 4.0 - 2.0];
        let y = [f64::from(r.random::<bool>())];
        assert_eq!(c.log_density_of(&y, &x).unwrap().to_bits(), back.log_density_of(&y, &x).unwrap().to_bits());
    }
}

#[test]
fn abcspn_commands_train_evaluate_and_sample() {
    let d = tempfile::tempdir().unwrap();
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let images = s(&data.join("digits-images-idx3-ubyte.gz"));
    let labels = s(&data.join("digits-labels-idx1-ubyte.gz"));
    let train_out = d.path().join("t");
    let common = ["--images", &images, "--labels", &labels, "--binarize", "--limit", "300"];
    let mut args = vec!["abcspn-train"];
    args.extend_from_slice(&common);
    args.extend_from_slice(&["--grid", "2x2", "--min-instances", "150", "--leaf-ridge", "1", "--threads", "2", "--out"]);
    let out = s(&train_out);
    args.push(&out);
    run(&args);
    assert!(train_out.join("model/manifest.json").exists());
    assert!(train_out.join("model/block_0003.json").exists());
    assert_eq!(std::fs::read_to_string(train_out.join("block_stats.csv")).unwrap().lines().count(), 5);

    let model_dir = s(&train_out.join("model"));
    let eval_out = s(&d.path().join("e"));
    let mut args = vec!["abcspn-eval", "--model", &model_dir];
    args.extend_from_slice(&common);
    args.extend_from_slice(&["--out", &eval_out]);
    run(&args);
    let per = std::fs::read_to_string(d.path().join("e/per_image_ll.csv")).unwrap();
    assert_eq!(per.lines().count(), 301);

    let sample_out = d.path().join("s");
    run(&["abcspn-sample", "--model", &model_dir, "--mix", "0.5,0.5,0,0,0,0,0,0,0,0", "--count", "3", "--out", &s(&sample_out)]);
    let (w, h, px) = cspn::images::read_pgm(&sample_out.join("sample_0002.pgm")).unwrap();
    assert_eq!((w, h), (8, 8));
    assert!(px.iter().all(|v| *v == 0.0 || *v == 1.0));
    let e = run_from(["cspn", "abcspn-sample", "--model", &model_dir, "--mix", "0.5,0.6", "--out", &s(&sample_out)]).unwrap_err();
    assert_eq!(e.kind.exit_code(), 1);
}

#[test]
fn benchmark_file_with_evidence_fraction() {
    let d = tempfile::tempdir().unwrap();
    let mut text = String::new();
    let mut r = cspn_core::rng::seeded(4);
    use rand::Rng as _;
    for _ in 0..300 {
        let a = r.random::<bool>();
        let row: Vec<&str> = (0..6).map(|j| if (j < 3 && a) ^ (r.random::<f64>() < 0.1) { "1" } else { "0" }).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    let path = d.path().join("toy.ts.data");
    std::fs::write(&path, text).unwrap();
    let out = d.path().join("o");
    let summary = run(&["learn", "--benchmark", &s(&path), "--evidence", "0.5", "--min-instances", "100", "--out", &s(&out)]);
    assert!(summary.contains("3 targets, 3 features"), "{summary}");
    let resolved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(resolved.contains("evidence = 0.5"), "{resolved}");
}
