//! End-to-end tests for the `g2kit` binary.
//!
//! Each test shells out to the compiled executable with small fixture files
//! in a temporary directory and checks the JSON on stdout, the human-readable
//! notes on stderr, and the exit code contract: 0 on success, 2 for usage
//! errors, 1 for data errors.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_g2kit"))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, contents).expect("write fixture");
    path
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(cmd: &mut Command) -> Run {
    let Output {
        status,
        stdout,
        stderr,
    } = cmd.output().expect("spawn g2kit");
    Run {
        code: status.code().expect("exit code"),
        stdout: String::from_utf8(stdout).expect("utf-8 stdout"),
        stderr: String::from_utf8(stderr).expect("utf-8 stderr"),
    }
}

fn json(run: &Run) -> Value {
    serde_json::from_str(&run.stdout).unwrap_or_else(|err| {
        panic!("stdout is not JSON ({err}): {:?}", run.stdout);
    })
}

/// Two well-formed graph lines used by several tests.
const TWO_GRAPHS: &str = "person0 cup holding ; table person0 on\ndog cat chasing\n";

// ---------------------------------------------------------------------------
// parse
// ---------------------------------------------------------------------------

#[test]
fn parse_reports_graphs_and_warnings() {
    let dir = TempDir::new().unwrap();
    // Second line has a two-token segment, which parses to an empty graph with
    // a warning rather than an error.
    let input = write_file(dir.path(), "graphs.sgl", "a b r\ndog cat\n");
    let run = run(bin().args(["parse", "--input"]).arg(&input));
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let report = json(&run);
    assert_eq!(report["graphs"], 2);
    assert_eq!(report["warnings"], 1);
    assert!(run.stderr.contains("image 1"), "stderr: {}", run.stderr);
}

#[test]
fn parse_writes_out_file_instead_of_stdout() {
    let dir = TempDir::new().unwrap();
    let input = write_file(dir.path(), "graphs.sgl", TWO_GRAPHS);
    let out = dir.path().join("report.json");
    let run = run(bin()
        .args(["parse", "--input"])
        .arg(&input)
        .arg("--out")
        .arg(&out));
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    assert!(run.stdout.is_empty());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["graphs"], 2);
}

// ---------------------------------------------------------------------------
// sgg-eval
// ---------------------------------------------------------------------------

#[test]
fn sgg_eval_self_comparison_is_perfect() {
    let dir = TempDir::new().unwrap();
    let graphs = write_file(dir.path(), "graphs.sgl", TWO_GRAPHS);
    let run = run(bin()
        .args(["sgg-eval", "--pred"])
        .arg(&graphs)
        .arg("--gold")
        .arg(&graphs)
        .args(["--k", "1,2,20"]));
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let report = json(&run);
    assert_eq!(report["pairs"], 2);
    // k = 1 truncates the two-triplet prediction, so only 2 of the 3 gold
    // triplets in the corpus are reachable; any k >= graph size is perfect.
    assert!((report["recall"]["1"]["micro"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    for k in ["2", "20"] {
        assert_eq!(report["recall"][k]["micro"], 1.0, "k = {k}");
        assert_eq!(report["recall"][k]["macro"], 1.0, "k = {k}");
    }
}

#[test]
fn sgg_eval_unpaired_prediction_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let pred = write_file(dir.path(), "pred.sgl", TWO_GRAPHS);
    let gold = write_file(dir.path(), "gold.sgl", "person0 cup holding\n");
    let run = run(bin()
        .args(["sgg-eval", "--pred"])
        .arg(&pred)
        .arg("--gold")
        .arg(&gold));
    assert_eq!(run.code, 1);
    assert!(
        run.stderr.contains("prediction 1"),
        "stderr should name the unpaired id: {}",
        run.stderr
    );
}

// ---------------------------------------------------------------------------
// select / weight
// ---------------------------------------------------------------------------

#[test]
fn select_keeps_cumulative_mass_up_to_theta() {
    let dir = TempDir::new().unwrap();
    let graphs = write_file(
        dir.path(),
        "four.sgl",
        "a b r1 ; c d r2 ; e f r3 ; g h r4\n",
    );
    let conf = write_file(dir.path(), "conf.json", r#"{"0": [0.4, 0.3, 0.2, 0.1]}"#);
    let run = run(bin()
        .args(["select", "--graphs"])
        .arg(&graphs)
        .arg("--conf")
        .arg(&conf)
        .args(["--theta", "0.8"]));
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let report = json(&run);
    let first = &report[0];
    assert_eq!(first["kept"], serde_json::json!([0, 1, 2]));
    assert!((first["mass"].as_f64().unwrap() - 0.9).abs() < 1e-12);
    assert_eq!(first["record"]["triplets"].as_array().unwrap().len(), 3);
}

#[test]
fn weight_is_identity_for_uniform_confidence() {
    let dir = TempDir::new().unwrap();
    let graphs = write_file(
        dir.path(),
        "four.sgl",
        "a b r1 ; c d r2 ; e f r3 ; g h r4\n",
    );
    let conf = write_file(dir.path(), "conf.json", r#"{"0": [0.25, 0.25, 0.25, 0.25]}"#);
    let run = run(bin()
        .args(["weight", "--graphs"])
        .arg(&graphs)
        .arg("--conf")
        .arg(&conf));
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let report = json(&run);
    let weights = report[0]["weights"].as_array().unwrap();
    assert_eq!(weights.len(), 12);
    for w in weights {
        assert!((w.as_f64().unwrap() - 1.0).abs() < 1e-12, "weights: {weights:?}");
    }
}

// ---------------------------------------------------------------------------
// fuse-check
// ---------------------------------------------------------------------------

#[test]
fn fuse_check_passes_and_reports_error_magnitude() {
    let run = run(bin().args(["fuse-check", "--dim", "3", "--seed", "42"]));
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let report = json(&run);
    assert_eq!(report["passed"], true);
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(run.stderr.contains("max relative error"));
}

#[test]
fn fuse_check_rejects_nonpositive_step() {
    let run = run(bin().args(["fuse-check", "--seed", "1", "--h", "0"]));
    assert_eq!(run.code, 2, "stderr: {}", run.stderr);
}

// ---------------------------------------------------------------------------
// nle-eval
// ---------------------------------------------------------------------------

#[test]
fn nle_eval_identical_pair_scores_full_task_accuracy() {
    let dir = TempDir::new().unwrap();
    let pred = write_file(
        dir.path(),
        "pred.jsonl",
        r#"{"id": "p1", "text": "yes Because: he is smiling"}"#,
    );
    let gold = write_file(
        dir.path(),
        "gold.jsonl",
        r#"{"id": "p1", "answer": "yes", "explanation": "he is smiling"}"#,
    );
    let run = run(bin()
        .args(["nle-eval", "--pred"])
        .arg(&pred)
        .arg("--gold")
        .arg(&gold));
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let report = json(&run);
    assert_eq!(report["pairs"], 1);
    assert_eq!(report["correct"], 1);
    assert_eq!(report["s_t"], 1.0);
    let s_e = report["s_e"].as_f64().unwrap();
    let s_o = report["s_o"].as_f64().unwrap();
    assert!((s_o - s_e).abs() < 1e-12, "S_O must equal S_T * S_E");
    assert_eq!(report["explanation_metrics"]["ROUGE-L"], 1.0);
    assert_eq!(report["explanation_metrics"]["BERTScore"], 1.0);
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

#[test]
fn stats_counts_lexicon_hits_per_field() {
    let dir = TempDir::new().unwrap();
    let qa = write_file(
        dir.path(),
        "qa.jsonl",
        r#"{"id": "q1", "image_id": "9", "question": "What is happening?", "answer": "nothing", "explanation": "a person holds a cup"}"#,
    );
    let run = run(bin().args(["stats", "--qa"]).arg(&qa));
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let report = json(&run);
    assert_eq!(report["records"], 1);
    // "person" and "cup" are objects, "holds" is a relation.
    assert_eq!(report["explanation"]["mean_objects"], 2.0);
    assert_eq!(report["explanation"]["mean_relations"], 1.0);
    assert_eq!(report["explanation"]["proportion"], 1.0);
    assert_eq!(report["question"]["proportion"], 0.0);
}

// ---------------------------------------------------------------------------
// clean-vg
// ---------------------------------------------------------------------------

/// A chain of 61 same-name boxes with strictly growing areas and one
/// relationship per adjacent pair, so relationship scores grow strictly and
/// the 50 survivors of `--top 50` are exactly relationships 10..60.
fn chain_record() -> String {
    let objects: Vec<String> = (0..61)
        .map(|i| {
            format!(
                r#"{{"object_id": {i}, "name": "node", "x": {x}, "y": 0, "w": {s}, "h": {s}}}"#,
                x = i * 100,
                s = i + 1
            )
        })
        .collect();
    let relationships: Vec<String> = (0..60)
        .map(|i| {
            format!(
                r#"{{"predicate": "touches", "subject_id": {i}, "object_id": {}}}"#,
                i + 1
            )
        })
        .collect();
    format!(
        r#"{{"image_id": "chain", "objects": [{}], "relationships": [{}]}}"#,
        objects.join(", "),
        relationships.join(", ")
    )
}

#[test]
fn clean_vg_records_mode_keeps_the_fifty_largest() {
    let dir = TempDir::new().unwrap();
    let input = write_file(dir.path(), "vg.jsonl", &chain_record());
    let run = run(bin()
        .args(["clean-vg", "--input"])
        .arg(&input)
        .args(["--emit", "records"]));
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let report = json(&run);
    let kept = report[0]["relationships"].as_array().unwrap();
    assert_eq!(kept.len(), 50);
    // Scores grow with the subject id, so the survivors are the chain tail,
    // ordered largest first.
    assert_eq!(kept[0]["subject_id"], 59);
    assert_eq!(kept[49]["subject_id"], 10);
}

#[test]
fn clean_vg_graphs_mode_augments_with_none_pairs() {
    let dir = TempDir::new().unwrap();
    let input = write_file(dir.path(), "vg.jsonl", &chain_record());
    let base = run(bin().args(["clean-vg", "--input"]).arg(&input));
    assert_eq!(base.code, 0, "stderr: {}", base.stderr);
    let base_triplets = json(&base)[0]["triplets"].as_array().unwrap().len();
    assert_eq!(base_triplets, 50);

    let augmented = run(bin()
        .args(["clean-vg", "--input"])
        .arg(&input)
        .args(["--none-pairs", "2", "--seed", "7"]));
    assert_eq!(augmented.code, 0, "stderr: {}", augmented.stderr);
    let report = json(&augmented);
    let triplets = report[0]["triplets"].as_array().unwrap();
    assert_eq!(triplets.len(), 52);
    let padded: Vec<&Value> = triplets
        .iter()
        .filter(|t| t["predicate"].is_null())
        .collect();
    assert_eq!(padded.len(), 2);
}

#[test]
fn clean_vg_none_pairs_requires_a_seed() {
    let dir = TempDir::new().unwrap();
    let input = write_file(dir.path(), "vg.jsonl", &chain_record());
    let run = run(bin()
        .args(["clean-vg", "--input"])
        .arg(&input)
        .args(["--none-pairs", "2"]));
    assert_eq!(run.code, 2, "stderr: {}", run.stderr);
}

// ---------------------------------------------------------------------------
// prompt
// ---------------------------------------------------------------------------

const GRAPH_JSON: &str = r#"[{"image_id": "9", "triplets": [
    {"subject": {"name": "person", "index": 0}, "predicate": "holding",
     "object": {"name": "cup", "index": 0}}]}]"#;

const QA_JSONL: &str = r#"{"id": "q1", "image_id": "9", "question": "What is happening?", "answer": "drinking", "explanation": "a person holds a cup"}"#;

#[test]
fn prompt_sgg_renders_the_object_conditioned_template() {
    let dir = TempDir::new().unwrap();
    let graphs = write_file(dir.path(), "g.json", GRAPH_JSON);
    let run = run(bin()
        .args(["prompt", "--task", "sgg", "--graphs"])
        .arg(&graphs));
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let report = json(&run);
    let prompt = report[0]["prompt"].as_str().unwrap();
    assert!(prompt.starts_with("Create a scene graph"), "prompt: {prompt}");
    assert!(prompt.contains("Objects:person cup"), "prompt: {prompt}");
    assert!(prompt.ends_with(" Scene:"), "prompt: {prompt}");
    assert_eq!(report[0]["label"], "person cup holding");
}

#[test]
fn prompt_answer_task_renders_answer_label() {
    let dir = TempDir::new().unwrap();
    let graphs = write_file(dir.path(), "g.json", GRAPH_JSON);
    let qa = write_file(dir.path(), "qa.jsonl", QA_JSONL);
    let run = run(bin()
        .args(["prompt", "--task", "answer", "--graphs"])
        .arg(&graphs)
        .arg("--qa")
        .arg(&qa));
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let report = json(&run);
    assert_eq!(
        report[0]["prompt"],
        "Context:person cup holding Question:What is happening? Answer:"
    );
    assert_eq!(report[0]["label"], "Answer:drinking");
}

#[test]
fn prompt_qa_task_without_qa_file_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let graphs = write_file(dir.path(), "g.json", GRAPH_JSON);
    let run = run(bin()
        .args(["prompt", "--task", "explain", "--graphs"])
        .arg(&graphs));
    assert_eq!(run.code, 2, "stderr: {}", run.stderr);
    assert!(run.stderr.contains("--qa"), "stderr: {}", run.stderr);
}

// ---------------------------------------------------------------------------
// global flags and failure modes
// ---------------------------------------------------------------------------

#[test]
fn theta_outside_unit_interval_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let graphs = write_file(dir.path(), "g.sgl", "a b r\n");
    let run = run(bin()
        .args(["select", "--graphs"])
        .arg(&graphs)
        .args(["--stub-seed", "1", "--theta", "1.5"]));
    assert_eq!(run.code, 2, "stderr: {}", run.stderr);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let run = run(bin().arg("bogus-cmd"));
    assert_eq!(run.code, 2);
}

#[test]
fn invalid_thread_cap_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let graphs = write_file(dir.path(), "g.sgl", "a b r\n");
    let run = run(bin()
        .env("G2KIT_THREADS", "abc")
        .args(["parse", "--input"])
        .arg(&graphs));
    assert_eq!(run.code, 2, "stderr: {}", run.stderr);
    assert!(run.stderr.contains("G2KIT_THREADS"), "stderr: {}", run.stderr);
}

#[test]
fn thread_cap_of_two_is_accepted() {
    let dir = TempDir::new().unwrap();
    let graphs = write_file(dir.path(), "g.sgl", "a b r\n");
    let run = run(bin()
        .env("G2KIT_THREADS", "2")
        .args(["parse", "--input"])
        .arg(&graphs));
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
}

#[test]
fn missing_input_file_is_a_data_error() {
    let run = run(bin().args(["parse", "--input", "/nonexistent/g.sgl"]));
    assert_eq!(run.code, 1);
    assert!(run.stderr.starts_with("error:"), "stderr: {}", run.stderr);
}
