use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tnet::TNetModel;

const GENERATE: &str = r#"output_dir = "data"
n = 120
[dgp]
variant = "hete_z"
seed = 7
[graph]
kind = "preferential_attachment"
m = 2
"#;

const TINY_MODEL: &str = r#"
[model]
hidden = 6
gcn_width = 6
rep_width = 6
"#;

fn tnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tnet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn tnet")
}

fn run_with(dir: &Path, command: &str, config: &str, extra: &[&str]) -> Output {
    let name = format!("{command}-{}.toml", fs::read_dir(dir).map_or(0, |d| d.count()));
    fs::write(dir.join(&name), config).unwrap();
    let mut args = vec![command, "--config", name.as_str()];
    args.extend_from_slice(extra);
    tnet(dir, &args)
}

fn run(dir: &Path, command: &str, config: &str) -> Output {
    run_with(dir, command, config, &[])
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn trained(dir: &Path, iterations: usize) {
    ok(&run(dir, "generate", GENERATE));
    let cfg = format!("output_dir = \"run\"\ndataset_dir = \"data\"\n{TINY_MODEL}[train]\niterations = {iterations}\n");
    ok(&run(dir, "train", &cfg));
}

fn jsonl(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn generate_writes_dataset_truth_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(dir.path(), "generate", GENERATE));
    let mut names: Vec<String> = fs::read_dir(dir.path().join("data"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["config.json", "edges.txt", "features.csv", "truth.json", "units.csv"]
    );
    let truth = fs::read_to_string(dir.path().join("data/truth.json")).unwrap();
    assert!(truth.contains("\"hete_z\""));
}

#[test]
fn malformed_variant_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "generate", &GENERATE.replace("hete_z", "hetero"));
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dgp.variant"));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "generate", &format!("{GENERATE}colour = 1\n"));
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "train", "output_dir = \"run\"\ndataset_dir = \"nowhere\"\n");
    assert_eq!(code(&out), 3);
}

#[test]
fn history_has_one_row_per_iteration_and_records_carry_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), 7);
    let history = fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 7);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/train.json")).unwrap()).unwrap();
    assert_eq!(summary["iterations_run"], 7);
    let echo = fs::read_to_string(dir.path().join("run/config.json")).unwrap();
    assert!(echo.contains("\"iterations\": 7"));
    let hash = summary["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    let (_, recorded) = TNetModel::load(&dir.path().join("run/checkpoint.json")).unwrap();
    assert_eq!(recorded, hash);
}

#[test]
fn divergence_exits_with_status_four() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(dir.path(), "generate", GENERATE));
    let cfg = format!(
        "output_dir = \"run\"\ndataset_dir = \"data\"\n{TINY_MODEL}[train]\niterations = 5\ndivergence_threshold = 1e-9\n"
    );
    let out = run(dir.path(), "train", &cfg);
    assert_eq!(code(&out), 4);
    assert!(dir.path().join("run/checkpoint.json").exists());
}

const ESTIMATE: &str = r#"output_dir = "est"
dataset_dir = "data"
checkpoint = "run/checkpoint.json"
methods = ["tnet", "plugin"]
[[estimands]]
kind = "ate"
[[estimands]]
kind = "ate"
first = [0, 0.0]
second = [1, 0.5]
"#;

#[test]
fn estimate_records_both_methods_and_swapped_pairs_negate() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), 5);
    // The default ATE pair is (1, z_bar) vs (0, 0); pin z_bar through an
    // explicit pair so the swap is exact.
    let cfg = ESTIMATE.replace(
        "kind = \"ate\"\n[[",
        "kind = \"ate\"\nfirst = [1, 0.5]\nsecond = [0, 0.0]\n[[",
    );
    ok(&run(dir.path(), "estimate", &cfg));
    let recs = jsonl(&dir.path().join("est/results.jsonl"));
    assert_eq!(recs.len(), 4);
    let avg = |i: usize| recs[i]["average"].as_f64().unwrap();
    assert_eq!(recs[0]["method"], "tnet");
    assert_eq!(recs[1]["method"], "plugin");
    assert!((avg(0) + avg(2)).abs() < 1e-12);
    assert!((avg(1) + avg(3)).abs() < 1e-12);
    let hash = recs[0]["config_hash"].as_str().unwrap().to_string();
    assert!(recs.iter().all(|r| r["config_hash"] == hash.as_str()));
}

#[test]
fn plugin_matches_a_model_with_zero_perturbation() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), 5);
    let ckpt = dir.path().join("run/checkpoint.json");
    let (mut model, hash) = TNetModel::load(&ckpt).unwrap();
    model.eps_treated.iter_mut().for_each(|v| *v = 0.0);
    model.eps_control.iter_mut().for_each(|v| *v = 0.0);
    model.save(&dir.path().join("run/zeroed.json"), &hash).unwrap();
    ok(&run(dir.path(), "estimate", ESTIMATE));
    let zeroed = ESTIMATE
        .replace("checkpoint.json", "zeroed.json")
        .replace("\"est\"", "\"est0\"")
        .replace("\"tnet\", ", "");
    ok(&run(
        dir.path(),
        "estimate",
        &zeroed.replace("[\"plugin\"]", "[\"tnet\"]"),
    ));
    let plugin = jsonl(&dir.path().join("est/results.jsonl"));
    let zero = jsonl(&dir.path().join("est0/results.jsonl"));
    assert_eq!(plugin[1]["average"], zero[0]["average"]);
    assert_eq!(plugin[3]["average"], zero[1]["average"]);
}

#[test]
fn bootstrap_needs_twenty_replicates() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(dir.path(), "generate", GENERATE));
    let cfg =
        "output_dir = \"b\"\ndataset_dir = \"data\"\n[bootstrap]\nreplicates = 1\n[[estimands]]\nkind = \"ame\"\n";
    assert_eq!(code(&run(dir.path(), "bootstrap", cfg)), 2);
}

#[test]
fn bootstrap_reports_an_interval() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(dir.path(), "generate", GENERATE));
    let cfg = format!(
        "output_dir = \"b\"\ndataset_dir = \"data\"\n{TINY_MODEL}[train]\niterations = 3\n[bootstrap]\nreplicates = 20\n[[estimands]]\nkind = \"ame\"\n"
    );
    ok(&run_with(dir.path(), "bootstrap", &cfg, &["--workers", "2"]));
    let rec = &jsonl(&dir.path().join("b/results.jsonl"))[0];
    let ci = &rec["ci"];
    assert_eq!(ci["replicates"], 20);
    assert!(ci["lower"].as_f64().unwrap() <= ci["upper"].as_f64().unwrap());
}

#[test]
fn overlap_failure_exits_with_status_five() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), 3);
    let ckpt = dir.path().join("run/checkpoint.json");
    let (mut model, hash) = TNetModel::load(&ckpt).unwrap();
    // A saturated propensity head puts every control-arm joint propensity
    // on the floor.
    let last = model.g1_head.layers.last_mut().unwrap();
    last.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
    last.bias[0] = 40.0;
    model.save(&ckpt, &hash).unwrap();
    let cfg = "output_dir = \"est\"\ndataset_dir = \"data\"\ncheckpoint = \"run/checkpoint.json\"\n[[estimands]]\nkind = \"ame\"\n";
    ok(&run(dir.path(), "estimate", cfg));
    let rec = &jsonl(&dir.path().join("est/results.jsonl"))[0];
    assert!(!rec["warnings"].as_array().unwrap().is_empty());
    assert_eq!(code(&run_with(dir.path(), "estimate", cfg, &["--fail-on-overlap"])), 5);
}

#[test]
fn evaluate_scores_against_the_truth() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), 5);
    let cfg = "output_dir = \"ev\"\ndataset_dir = \"data\"\ncheckpoint = \"run/checkpoint.json\"\n[[estimands]]\nkind = \"ite\"\n[split]\ntrain_fraction = 0.7\nheld_out_fraction = 0.3\nseed = 1\n";
    ok(&run(dir.path(), "evaluate", cfg));
    let recs = jsonl(&dir.path().join("ev/metrics.jsonl"));
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0]["split"], "within_sample");
    assert_eq!(recs[1]["split"], "out_of_sample");
    assert!(recs[0]["entries"][0]["pehe_individual"].as_f64().unwrap() >= 0.0);
}

#[test]
fn evaluate_without_truth_is_a_no_oracle_error() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), 2);
    fs::remove_file(dir.path().join("data/truth.json")).unwrap();
    let cfg = "output_dir = \"ev\"\ndataset_dir = \"data\"\ncheckpoint = \"run/checkpoint.json\"\n[[estimands]]\nkind = \"ame\"\n";
    let out = run(dir.path(), "evaluate", cfg);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("oracle"));
}

#[test]
fn dr_check_emits_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "output_dir = \"dr\"\nn = 100\n[dgp]\nvariant = \"homo\"\nseed = 1\n[graph]\nkind = \"erdos_renyi\"\np = 0.04\n{TINY_MODEL}[train]\niterations = 3\n[dr]\nmode = \"freeze_random_init\"\n[dr.estimand]\nkind = \"ame\"\n"
    );
    ok(&run(dir.path(), "dr-check", &cfg));
    let csv = fs::read_to_string(dir.path().join("dr/dr_check.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
    assert_eq!(jsonl(&dir.path().join("dr/dr_check.jsonl")).len(), 8);
}

#[test]
fn sweep_emits_one_row_per_sample_size() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "output_dir = \"sw\"\n{TINY_MODEL}[train]\niterations = 3\n[sweep]\nn_list = [40, 60, 90]\nrepeats = 2\nmethod = \"plugin\"\n[sweep.dgp]\nvariant = \"homo\"\n[sweep.graph]\nkind = \"erdos_renyi\"\np = 0.05\n[sweep.spec]\nkind = \"ame\"\nfirst = [1, 0.0]\nsecond = [0, 0.0]\n"
    );
    ok(&run(dir.path(), "sweep", &cfg));
    assert_eq!(jsonl(&dir.path().join("sw/sweep.jsonl")).len(), 3);
    let series = fs::read_to_string(dir.path().join("sw/sweep_series.csv")).unwrap();
    assert_eq!(series.lines().next(), Some("x,y,sd"));
    assert_eq!(series.lines().count(), 4);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        trained(dir, 6);
    }
    for f in [
        "data/features.csv",
        "data/units.csv",
        "data/edges.txt",
        "data/truth.json",
        "run/checkpoint.json",
        "run/history.csv",
        "run/train.json",
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let config = tnet_cli::RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        config.validate().unwrap();
        count += 1;
    }
    assert_eq!(count, 7);
}
