//! Converts native benchmark files into the dataset JSONL format.
//!
//! ```text
//! cargo run -p permrank-core --example convert_benchmark -- hotpotqa hotpot_dev_distractor_v1.json out.jsonl
//! cargo run -p permrank-core --example convert_benchmark -- msmarco dev_v2.1.jsonl out.jsonl
//! ```
//!
//! * `hotpotqa`: one JSON array of `{_id, question, answer, context: [[title, [sentence, ..]], ..], supporting_facts}`.
//!   Each context paragraph becomes a passage (id = title); supporting titles become `gold_ids`.
//! * `msmarco`: one JSON object per line, `{query_id, query, answers, passages: [{passage_text, is_selected}, ..]}`.
//!   Passages keep their listed order; selected ones become `gold_ids`.

use std::error::Error;
use std::io::BufRead;

use serde_json::Value;

use permrank_core::ingest::write_dataset;
use permrank_core::{Passage, Query, RetrievalList};

fn text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn hotpotqa(path: &str) -> Result<Vec<RetrievalList>, Box<dyn Error>> {
    let items: Vec<Value> = serde_json::from_reader(std::fs::File::open(path)?)?;
    let mut lists = Vec::with_capacity(items.len());
    for item in items {
        let mut passages = Vec::new();
        for (rank, para) in item["context"].as_array().ok_or("missing context")?.iter().enumerate() {
            let title = text(&para[0]);
            let body: Vec<String> = para[1].as_array().ok_or("bad paragraph")?.iter().map(text).collect();
            passages.push(Passage::new(title.clone(), format!("{title}: {}", body.concat()), rank + 1));
        }
        let mut gold: Vec<String> = item["supporting_facts"]
            .as_array()
            .map(|f| f.iter().map(|x| text(&x[0])).collect())
            .unwrap_or_default();
        gold.sort();
        gold.dedup();
        let query = Query::new(text(&item["_id"]), text(&item["question"]))
            .with_gold_answer(text(&item["answer"]))
            .with_gold_passages(gold);
        lists.push(RetrievalList::new(query, passages));
    }
    Ok(lists)
}

fn msmarco(path: &str) -> Result<Vec<RetrievalList>, Box<dyn Error>> {
    let mut lists = Vec::new();
    for line in std::io::BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: Value = serde_json::from_str(&line)?;
        let qid = text(&item["query_id"]);
        let mut passages = Vec::new();
        let mut gold = Vec::new();
        for (rank, p) in item["passages"].as_array().ok_or("missing passages")?.iter().enumerate() {
            let id = format!("{qid}-{}", rank + 1);
            if p["is_selected"].as_i64() == Some(1) {
                gold.push(id.clone());
            }
            passages.push(Passage::new(id, text(&p["passage_text"]), rank + 1));
        }
        let mut query = Query::new(qid, text(&item["query"])).with_gold_passages(gold);
        if let Some(answer) = item["answers"].as_array().and_then(|a| a.first()) {
            query = query.with_gold_answer(text(answer));
        }
        lists.push(RetrievalList::new(query, passages));
    }
    Ok(lists)
}

fn main() -> Result<(), Box<dyn Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [format, input, output] = args.as_slice() else {
        return Err("usage: convert_benchmark <hotpotqa|msmarco> <input> <output.jsonl>".into());
    };
    let lists = match format.as_str() {
        "hotpotqa" => hotpotqa(input)?,
        "msmarco" => msmarco(input)?,
        other => return Err(format!("unknown format {other:?}").into()),
    };
    write_dataset(output, &lists)?;
    eprintln!("wrote {} queries to {output}", lists.len());
    Ok(())
}
