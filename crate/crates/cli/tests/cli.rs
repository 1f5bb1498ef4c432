use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use permrank_core::ingest::{load_truth, synth_corpus, write_dataset, SynthTemplate};
use permrank_core::pipeline::RankingRecord;
use permrank_core::{Passage, Query, RetrievalList};
use tempfile::TempDir;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(queries: usize, passages: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        synth_corpus(
            queries,
            passages,
            &SynthTemplate::default(),
            3,
            dir.path().join("data.jsonl"),
            dir.path().join("truth.jsonl"),
        )
        .unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_permrank"))
            .current_dir(self.dir.path())
            .args(args)
            .env_remove("RUST_LOG")
            .env_remove("PERMRANK_ENDPOINT")
            .output()
            .unwrap()
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn records(path: &Path) -> Vec<RankingRecord> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

const SIM: [&str; 4] = ["--backend", "sim", "--truth", "truth.jsonl"];

#[test]
fn rerank_writes_one_line_per_query() {
    let f = Fixture::new(7, 4);
    let mut args = vec!["rerank", "--design", "cyclic", "--in", "data.jsonl", "--out", "ranks.jsonl"];
    args.extend(SIM);
    let o = f.run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let recs = records(&f.path("ranks.jsonl"));
    assert_eq!(recs.len(), 7);
    assert!(recs.iter().all(|r| r.strategy == "pid:cyclic" && r.passage_ids.len() == 4));
    assert!(stderr(&o).contains("queries: 7, failures: 0"));
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let f = Fixture::new(1, 3);
    let o = f.run(&["rerank", "--backend", "sim", "--truth", "truth.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn prune_length_beyond_list_fails_per_query() {
    let f = Fixture::new(3, 2);
    let mut args = vec!["rerank", "--design", "pruned", "--L", "3", "--in", "data.jsonl", "--out", "r.jsonl"];
    args.extend(SIM);
    let o = f.run(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("L out of range"));
    assert!(stderr(&o).contains("failures: 3"));
    args.push("--keep-going");
    assert_eq!(f.run(&args).status.code(), Some(0));
}

#[test]
fn parallel_runs_are_byte_identical() {
    let f = Fixture::new(12, 5);
    for (jobs, out) in [("1", "a.jsonl"), ("4", "b.jsonl")] {
        let mut args = vec!["rerank", "--in", "data.jsonl", "--out", out, "--jobs", jobs, "--seed", "9", "--noise", "0.01"];
        args.extend(SIM);
        assert!(f.run(&args).status.success());
    }
    assert_eq!(std::fs::read(f.path("a.jsonl")).unwrap(), std::fs::read(f.path("b.jsonl")).unwrap());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let f = Fixture::new(4, 4);
    std::fs::write(
        f.path("cfg.toml"),
        "seed = 1\ninput = \"data.jsonl\"\n[backend]\nkind = \"sim\"\ntruth = \"truth.jsonl\"\n[strategy]\ndesign = \"pruned\"\nl = 2\n",
    )
    .unwrap();
    let o = f.run(&["--config", "cfg.toml", "rerank", "--out", "a.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(records(&f.path("a.jsonl")).iter().all(|r| r.strategy == "pid:pruned_cyclic(L=2)"));
    let o = f.run(&["--config", "cfg.toml", "rerank", "--design", "cyclic", "--out", "b.jsonl"]);
    assert!(o.status.success());
    assert!(records(&f.path("b.jsonl")).iter().all(|r| r.strategy == "pid:cyclic"));
}

#[test]
fn retriever_and_random_baselines() {
    let f = Fixture::new(5, 5);
    let o = f.run(&["baseline", "--method", "retriever", "--in", "data.jsonl", "--out", "ret.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let data = permrank_core::ingest::load_dataset(f.path("data.jsonl"), true).unwrap();
    for (r, l) in records(&f.path("ret.jsonl")).iter().zip(&data.lists) {
        assert_eq!(r.passage_ids, l.ids());
    }
    let random = |out: &str, seed: &str| {
        let o = f.run(&["baseline", "--method", "random", "--seed", seed, "--in", "data.jsonl", "--out", out]);
        assert!(o.status.success());
        std::fs::read(f.path(out)).unwrap()
    };
    assert_eq!(random("r1.jsonl", "4"), random("r2.jsonl", "4"));
    assert_ne!(random("r1.jsonl", "4"), random("r3.jsonl", "5"));
    let o = f.run(&[
        "baseline", "--method", "random", "--random-mode", "average", "--k", "3", "--in", "data.jsonl", "--out", "avg.jsonl",
    ]);
    assert!(o.status.success());
    assert_eq!(records(&f.path("avg.jsonl")).len(), 15);
}

#[test]
fn listwise_logs_triangular_call_count() {
    let f = Fixture::new(2, 4);
    let mut args = vec!["-v", "baseline", "--method", "listwise", "--in", "data.jsonl", "--out", "l.jsonl"];
    args.extend(SIM);
    let o = f.run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let err = stderr(&o);
    assert_eq!(err.matches("backend calls").count(), 3, "{err}");
    assert!(err.contains("query q0: 10 backend calls"));
    assert!(err.contains("query q1: 10 backend calls"));
}

#[test]
fn lingua_needs_token_probabilities() {
    let f = Fixture::new(2, 3);
    let mut args = vec!["baseline", "--method", "lingua", "--in", "data.jsonl"];
    args.extend(SIM);
    let o = f.run(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("token-level probabilities"));
}

#[test]
fn self_consistency_emits_answers() {
    let f = Fixture::new(3, 4);
    let mut args = vec!["baseline", "--method", "self_consistency", "--k", "6", "--in", "data.jsonl", "--out", "sc.jsonl"];
    args.extend(SIM);
    assert!(f.run(&args).status.success());
    let recs = records(&f.path("sc.jsonl"));
    assert!(recs.iter().all(|r| r.answer.as_deref().is_some_and(|a| a.starts_with("ans"))));
}

fn eval_json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", stderr(o));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn eval_scores_perfect_answers_and_mrr_from_the_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let list = |q: usize| {
        RetrievalList::new(
            Query::new(format!("q{q}"), "which?").with_gold_answer("The Answer"),
            (1..=3).map(|k| Passage::new(format!("q{q}p{k}"), "text", k)).collect(),
        )
    };
    write_dataset(dir.path().join("d.jsonl"), &[list(0), list(1)]).unwrap();
    let truth = "{\"query_id\":\"q0\",\"a_star\":[0.5,0.3,0.2],\"u_star\":[1,3,2],\"argsort\":[2,3,1]}\n\
                 {\"query_id\":\"q1\",\"a_star\":[0.5,0.3,0.2],\"u_star\":[1,3,2],\"argsort\":[2,3,1]}\n";
    std::fs::write(dir.path().join("t.jsonl"), truth).unwrap();
    assert_eq!(load_truth(dir.path().join("t.jsonl")).unwrap().len(), 2);
    let preds = "{\"query_id\":\"q0\",\"strategy\":\"x\",\"passage_ids\":[\"q0p1\",\"q0p2\",\"q0p3\"],\"answer\":\"answer\"}\n\
                 {\"query_id\":\"q1\",\"strategy\":\"x\",\"passage_ids\":[\"q1p1\",\"q1p2\",\"q1p3\"],\"answer\":\"the answer.\"}\n";
    std::fs::write(dir.path().join("p.jsonl"), preds).unwrap();
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_permrank"))
            .current_dir(dir.path())
            .args(args)
            .output()
            .unwrap()
    };
    let report = eval_json(&run(&["eval", "--predictions", "p.jsonl", "--dataset", "d.jsonl", "--metrics", "em"]));
    assert_eq!(report["aggregate"]["em"], 100.0);
    let report = eval_json(&run(&[
        "eval", "--predictions", "p.jsonl", "--dataset", "d.jsonl", "--truth", "t.jsonl", "--metrics", "mrr",
    ]));
    assert_eq!(report["aggregate"]["mrr"], 0.5);

    std::fs::write(
        dir.path().join("other.jsonl"),
        "{\"query_id\":\"zz\",\"strategy\":\"x\",\"passage_ids\":[\"a\"]}\n",
    )
    .unwrap();
    let o = run(&["eval", "--predictions", "other.jsonl", "--dataset", "d.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no query id"));
}

#[test]
fn bias_report_from_rerank_output() {
    let f = Fixture::new(30, 4);
    let mut args = vec!["rerank", "--in", "data.jsonl", "--out", "r.jsonl"];
    args.extend(SIM);
    assert!(f.run(&args).status.success());
    let o = f.run(&["bias-report", "--in", "r.jsonl", "--json", "bias.json", "--csv", "bias.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path("bias.json")).unwrap()).unwrap();
    let mean: Vec<f64> = serde_json::from_value(report["mean_a"].clone()).unwrap();
    assert!(mean.windows(2).all(|w| w[0] > w[1]), "{mean:?}");
    let csv = std::fs::read_to_string(f.path("bias.csv")).unwrap();
    assert!(csv.starts_with("position,mean,std\n1,"));

    let first = std::fs::read_to_string(f.path("r.jsonl")).unwrap().lines().next().unwrap().to_string();
    std::fs::write(f.path("one.jsonl"), format!("{first}\n")).unwrap();
    let o = f.run(&["bias-report", "--in", "one.jsonl"]);
    let single: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rec: RankingRecord = serde_json::from_str(&first).unwrap();
    assert_eq!(serde_json::from_value::<Vec<f64>>(single["mean_a"].clone()).unwrap(), rec.bias.unwrap());

    let mut degenerate = serde_json::from_str::<RankingRecord>(&first).unwrap();
    degenerate.degenerate = true;
    std::fs::write(f.path("deg.jsonl"), serde_json::to_string(&degenerate).unwrap() + "\n").unwrap();
    let o = f.run(&["bias-report", "--in", "deg.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("non-degenerate"));
}

#[test]
fn distill_build_caps_and_resumes() {
    let f = Fixture::new(4, 3);
    let mut args = vec!["distill-build", "--in", "data.jsonl", "--out", "d.jsonl"];
    args.extend(SIM);
    let o = f.run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("4 new records"));
    let lines = std::fs::read_to_string(f.path("d.jsonl")).unwrap();
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["scores"].as_array().unwrap().len(), 6);
    }
    let o = f.run(&args);
    assert!(stderr(&o).contains("0 new records"));
    assert_eq!(std::fs::read_to_string(f.path("d.jsonl")).unwrap(), lines);
}

#[test]
fn cache_stats_and_clear() {
    let f = Fixture::new(3, 3);
    let mut args = vec!["rerank", "--design", "cyclic", "--in", "data.jsonl", "--out", "r.jsonl", "--cache", "c.jsonl"];
    args.extend(SIM);
    assert!(f.run(&args).status.success());
    let o = f.run(&["cache", "stats", "--cache", "c.jsonl"]);
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["entries"], 9);
    assert!(f.run(&["cache", "clear", "--cache", "c.jsonl"]).status.success());
    let o = f.run(&["cache", "stats", "--cache", "c.jsonl"]);
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["entries"], 0);
}
