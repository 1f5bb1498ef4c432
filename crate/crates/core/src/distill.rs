//! Teacher-score datasets and the KL preference-distillation loss.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{fan_out, score_batch, Backend, BackendOptions};
use crate::permute::random_design;
use crate::seed;
use crate::types::RetrievalList;

/// Teacher scores for `K` random orderings of one query's passages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub query_id: String,
    pub model_tag: String,
    pub perms: Vec<Vec<usize>>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("k must be at least 2, got {0}")]
    TooFewPermutations(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("teacher has {teacher} scores, student {student}")]
    LengthMismatch { teacher: usize, student: usize },
    #[error("need at least 2 scores, got {0}")]
    TooShort(usize),
    #[error("subset size {size} not in 2..={len}")]
    SubsetSize { size: usize, len: usize },
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("scores must be finite")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BuildSummary {
    pub written: usize,
    /// Queries already present in the sink.
    pub resumed: usize,
    /// Queries skipped because scoring failed or `N < 2`.
    pub failed: usize,
}

fn existing_ids(path: &Path) -> Result<HashSet<String>, DistillError> {
    let io = |source| DistillError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut ids = HashSet::new();
    if !path.exists() {
        return Ok(ids);
    }
    for line in BufReader::new(File::open(path).map_err(io)?).lines() {
        let line = line.map_err(io)?;
        match serde_json::from_str::<DistillRecord>(&line) {
            Ok(r) => {
                ids.insert(r.query_id);
            }
            Err(e) if !line.trim().is_empty() => log::warn!("{}: ignoring unreadable line: {e}", path.display()),
            Err(_) => {}
        }
    }
    Ok(ids)
}

fn teacher_record(
    backend: &dyn Backend,
    list: &RetrievalList,
    k: usize,
    seed: u64,
    opts: &BackendOptions,
) -> Result<DistillRecord, String> {
    let design = random_design(list.len(), Some(k), seed::derive_seed(seed, &list.query.id)).map_err(|e| e.to_string())?;
    if design.len() < 2 {
        return Err(format!("only {} distinct ordering(s)", design.len()));
    }
    let scored = score_batch(backend, &list.query, list, &design, opts, None).map_err(|e| e.to_string())?;
    Ok(DistillRecord {
        query_id: list.query.id.clone(),
        model_tag: backend.model_tag().to_string(),
        perms: design.permutations.iter().map(|p| p.indices().to_vec()).collect(),
        scores: scored.iter().map(|s| s.score()).collect(),
    })
}

/// Scores `k` distinct random orderings (capped at `N!`) per query and appends
/// one record per query to `sink`. Queries already in `sink` are skipped.
pub fn build_distill_dataset(
    lists: &[RetrievalList],
    backend: &dyn Backend,
    k: usize,
    seed: u64,
    sink: impl AsRef<Path>,
    opts: &BackendOptions,
    jobs: usize,
) -> Result<BuildSummary, DistillError> {
    if k < 2 {
        return Err(DistillError::TooFewPermutations(k));
    }
    let path = sink.as_ref();
    let io = |source| DistillError::Io {
        path: path.to_path_buf(),
        source,
    };
    let done = existing_ids(path)?;
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    if std::fs::read(path).map_err(io)?.last().is_some_and(|&b| b != b'\n') {
        file.write_all(b"\n").map_err(io)?;
    }

    let mut summary = BuildSummary::default();
    let todo: Vec<&RetrievalList> = lists
        .iter()
        .filter(|l| {
            let skip = done.contains(&l.query.id);
            summary.resumed += usize::from(skip);
            !skip
        })
        .collect();
    let jobs = jobs.max(1);
    for chunk in todo.chunks(jobs * 4) {
        let results = fan_out(chunk.len(), jobs, |i| teacher_record(backend, chunk[i], k, seed, opts));
        for (list, result) in chunk.iter().zip(results) {
            match result {
                Ok(record) => {
                    let mut line = serde_json::to_vec(&record).map_err(|e| io(e.into()))?;
                    line.push(b'\n');
                    file.write_all(&line).map_err(io)?;
                    summary.written += 1;
                }
                Err(e) => {
                    log::warn!("query {}: skipped: {e}", list.query.id);
                    summary.failed += 1;
                }
            }
        }
        file.flush().map_err(io)?;
    }
    Ok(summary)
}

/// `exp(s_i / T) / Σ_j exp(s_j / T)`, computed with max subtraction.
pub fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| ((s - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `Σ p ln(p / q)`, with `p = 0` terms dropped.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum();
    kl.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(teacher ‖ student)`.
    #[default]
    TeacherStudent,
    StudentTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillLoss {
    pub subset_size: usize,
    pub temperature: f64,
    pub direction: KlDirection,
}

impl Default for DistillLoss {
    fn default() -> Self {
        Self {
            subset_size: 8,
            temperature: 1.0,
            direction: KlDirection::TeacherStudent,
        }
    }
}

impl DistillLoss {
    /// Loss on a seeded subset of `min(subset_size, len)` permutations.
    pub fn loss(&self, teacher: &[f64], student: &[f64], seed: u64) -> Result<f64, DistillError> {
        let size = self.subset_size.min(teacher.len());
        let (t, s) = subset(teacher, student, size, seed, self.temperature)?;
        let (p, q) = (softmax(&t, self.temperature), softmax(&s, self.temperature));
        Ok(match self.direction {
            KlDirection::TeacherStudent => kl_divergence(&p, &q),
            KlDirection::StudentTeacher => kl_divergence(&q, &p),
        })
    }
}

fn subset(
    teacher: &[f64],
    student: &[f64],
    size: usize,
    seed: u64,
    temperature: f64,
) -> Result<(Vec<f64>, Vec<f64>), DistillError> {
    if teacher.len() != student.len() {
        return Err(DistillError::LengthMismatch {
            teacher: teacher.len(),
            student: student.len(),
        });
    }
    let len = teacher.len();
    if len < 2 {
        return Err(DistillError::TooShort(len));
    }
    if size < 2 || size > len {
        return Err(DistillError::SubsetSize { size, len });
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(DistillError::Temperature(temperature));
    }
    if teacher.iter().chain(student).any(|x| !x.is_finite()) {
        return Err(DistillError::NonFinite);
    }
    let mut idx = index::sample(&mut seed::rng(seed), len, size).into_vec();
    idx.sort_unstable();
    Ok((idx.iter().map(|&i| teacher[i]).collect(), idx.iter().map(|&i| student[i]).collect()))
}

/// `KL(softmax(teacher_S / T) ‖ softmax(student_S / T))` on a seeded subset `S`.
pub fn kl_distill_loss(
    teacher: &[f64],
    student: &[f64],
    subset_size: usize,
    seed: u64,
    temperature: f64,
) -> Result<f64, DistillError> {
    if subset_size > teacher.len() {
        return Err(DistillError::SubsetSize {
            size: subset_size,
            len: teacher.len(),
        });
    }
    DistillLoss {
        subset_size,
        temperature,
        direction: KlDirection::TeacherStudent,
    }
    .loss(teacher, student, seed)
}
