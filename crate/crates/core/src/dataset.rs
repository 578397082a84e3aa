//! `tasks.jsonl` dataset files: one task per line, pixels as base-64.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::Trajectory;
use crate::synth::{Family, GridImage, Object, TaskInstance};

pub const TASKS_FILE: &str = "tasks.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Record { path: String, line: usize, msg: String },
}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    id: String,
    seed: u64,
    family: Family,
    grid_size: usize,
    patch: usize,
    cells: Vec<Option<Object>>,
    pixels: String,
    question: String,
    answer: String,
    gold_trajectory: Trajectory,
    oracle_masks: Vec<Vec<f64>>,
}

/// Split manifest written next to `tasks.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed_start: u64,
    pub count: usize,
    pub families: Vec<Family>,
    pub grid_size: usize,
    pub ids: Vec<String>,
}

pub fn task_to_json(task: &TaskInstance) -> String {
    let rec = TaskRecord {
        id: task.id.clone(),
        seed: task.seed,
        family: task.family,
        grid_size: task.image.size,
        patch: task.image.patch,
        cells: task.image.cells.clone(),
        pixels: B64.encode(&task.image.pixels),
        question: task.question.clone(),
        answer: task.answer.clone(),
        gold_trajectory: task.gold_trajectory.clone(),
        oracle_masks: task.oracle_masks.clone(),
    };
    serde_json::to_string(&rec).expect("task records serialize")
}

pub fn task_from_json(line: &str) -> Result<TaskInstance, String> {
    let rec: TaskRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let pixels = B64.decode(&rec.pixels).map_err(|e| e.to_string())?;
    if rec.cells.len() != rec.grid_size * rec.grid_size {
        return Err(format!("{} cells for grid {}", rec.cells.len(), rec.grid_size));
    }
    let image = GridImage::new(rec.grid_size, rec.patch, rec.cells);
    if image.pixels != pixels {
        return Err("pixel payload does not match cells".into());
    }
    Ok(TaskInstance {
        id: rec.id,
        seed: rec.seed,
        family: rec.family,
        image,
        question: rec.question,
        answer: rec.answer,
        gold_trajectory: rec.gold_trajectory,
        oracle_masks: rec.oracle_masks,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

pub fn write_tasks(path: &Path, tasks: &[TaskInstance]) -> Result<(), DatasetError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for t in tasks {
        writeln!(f, "{}", task_to_json(t)).map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

pub fn read_tasks(path: &Path) -> Result<Vec<TaskInstance>, DatasetError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let task = task_from_json(&line).map_err(|msg| DatasetError::Record {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        })?;
        out.push(task);
    }
    Ok(out)
}

/// Reads `dir/tasks.jsonl`, or the file itself when `path` is a file.
pub fn load_dataset(path: &Path) -> Result<Vec<TaskInstance>, DatasetError> {
    if path.is_dir() {
        read_tasks(&path.join(TASKS_FILE))
    } else {
        read_tasks(path)
    }
}
