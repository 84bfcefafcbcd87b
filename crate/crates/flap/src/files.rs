//! Versioned JSON containers: checkpoints, task sets and trainer snapshots.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use flap_core::adapter::AdapterNet;
use flap_core::env::{Family, Split, TaskSpec};
use flap_core::eval::{count_parameters, MemoryReport};
use flap_core::meta::{MetaTrainer, TrainConfig};
use flap_core::sac::SacLearner;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{FlapError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const TASK_SET_VERSION: u32 = 1;
pub const SNAPSHOT_VERSION: u32 = 1;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FlapError::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| FlapError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, value).map_err(|e| FlapError::json(path, e))?;
    w.flush().map_err(|e| FlapError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = fs::File::open(path).map_err(|e| FlapError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| FlapError::json(path, e))
}

/// Peeks at `format_version` before committing to a full parse, so a file
/// from a newer build fails with a version error rather than a field error.
fn check_version(path: &Path, what: &'static str, expected: u32) -> Result<()> {
    #[derive(Deserialize)]
    struct Header {
        format_version: u32,
    }
    let h: Header = read_json(path)?;
    if h.format_version != expected {
        return Err(FlapError::Version {
            path: path.to_path_buf(),
            what,
            found: h.format_version,
            expected,
        });
    }
    Ok(())
}

/// Everything adaptation needs, plus the configuration and task set that
/// produced it. Policy heads and the adapter share one container because the
/// adapter's output layout is tied to the head shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub tasks: Vec<TaskSpec>,
    pub iteration: u64,
    pub learner: SacLearner,
    pub adapter: Option<AdapterNet>,
}

impl Checkpoint {
    pub fn new(
        config: TrainConfig,
        tasks: Vec<TaskSpec>,
        iteration: u64,
        learner: SacLearner,
        adapter: Option<AdapterNet>,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config,
            tasks,
            iteration,
            learner,
            adapter,
        }
    }

    pub fn from_trainer(trainer: &MetaTrainer) -> Self {
        Self::new(
            trainer.config.clone(),
            trainer.tasks.clone(),
            trainer.iteration(),
            trainer.learner.clone(),
            trainer.adapter.clone(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        check_version(path, "checkpoint", CHECKPOINT_VERSION)?;
        let c: Checkpoint = read_json(path)?;
        c.check().map_err(|reason| FlapError::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        })?;
        Ok(c)
    }

    /// Structural consistency between the parts.
    pub fn check(&self) -> std::result::Result<(), String> {
        let train: Vec<u32> = self
            .tasks
            .iter()
            .filter(|t| t.split == Split::Train)
            .map(|t| t.id)
            .collect();
        if self.learner.task_ids() != train {
            return Err("policy heads do not match the train tasks".into());
        }
        if self.learner.critic.task_ids != train {
            return Err("critic heads do not match the train tasks".into());
        }
        let p = &self.learner.policy;
        if p.trunk.output_dim() != self.learner.config.feature_dim() {
            return Err("trunk width disagrees with the configuration".into());
        }
        if !p.trunk.all_finite() || !p.heads.iter().all(|h| h.net.all_finite()) {
            return Err("non-finite policy parameters".into());
        }
        if let Some(a) = &self.adapter {
            a.check_compatible(p).map_err(|e| e.to_string())?;
            if !a.net.all_finite() {
                return Err("non-finite adapter parameters".into());
            }
        }
        Ok(())
    }

    pub fn memory(&self) -> MemoryReport {
        count_parameters(&self.learner, self.adapter.as_ref())
    }

    pub fn tasks_in(&self, split: Split) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .filter(|t| t.split == split)
            .copied()
            .collect()
    }
}

/// A task set on its own, for auditing and exact re-runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSetFile {
    pub format_version: u32,
    pub family: Family,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
}

impl TaskSetFile {
    pub fn new(family: Family, seed: u64, tasks: Vec<TaskSpec>) -> Self {
        Self {
            format_version: TASK_SET_VERSION,
            family,
            seed,
            tasks,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        check_version(path, "task set", TASK_SET_VERSION)?;
        let f: TaskSetFile = read_json(path)?;
        for t in &f.tasks {
            t.validate()
                .map_err(|e| FlapError::Config(format!("{}: {e}", path.display())))?;
        }
        Ok(f)
    }
}

/// Complete trainer state, replay buffers and RNG included: training resumed
/// from a snapshot continues bit for bit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainerSnapshot {
    pub format_version: u32,
    pub trainer: MetaTrainer,
}

impl TrainerSnapshot {
    pub fn save(trainer: &MetaTrainer, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Out<'a> {
            format_version: u32,
            trainer: &'a MetaTrainer,
        }
        write_json(
            path,
            &Out {
                format_version: SNAPSHOT_VERSION,
                trainer,
            },
        )
    }

    pub fn load(path: &Path) -> Result<MetaTrainer> {
        check_version(path, "trainer snapshot", SNAPSHOT_VERSION)?;
        Ok(read_json::<TrainerSnapshot>(path)?.trainer)
    }
}

/// Optional dump of every train task's replay buffer, one JSON line per
/// transition, for offline analysis of adapter behaviour.
pub fn dump_buffers(trainer: &MetaTrainer, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FlapError::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| FlapError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for buf in trainer.buffers() {
        for t in buf.iter() {
            serde_json::to_writer(&mut w, t).map_err(|e| FlapError::json(path, e))?;
            w.write_all(b"\n").map_err(|e| FlapError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| FlapError::io(path, e))
}
