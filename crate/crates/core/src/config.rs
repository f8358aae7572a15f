//! `key = value` experiment files. Blank lines and `#` comments are ignored;
//! unknown keys are errors.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::spec::NetworkSpec;
use crate::tasks::{Task, TaskStream};
use crate::train::MetaTrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskFamily {
    Sinusoid,
    Clusters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: MetaTrainConfig,
    pub family: TaskFamily,
    /// Support points per sinusoid task.
    pub shots: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub dim: usize,
    /// Preset name; `None` picks one matching the task family.
    pub network: Option<String>,
    pub hidden: Vec<usize>,
    pub task_seed: u64,
    pub val_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: MetaTrainConfig::default(),
            family: TaskFamily::Sinusoid,
            shots: 5,
            n_way: 5,
            k_shot: 1,
            dim: 8,
            network: None,
            hidden: vec![40, 40],
            task_seed: 1,
            val_seed: 2,
        }
    }
}

fn value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse { line, msg: format!("bad value `{v}` for `{key}`") })
}

fn flag(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parse { line, msg: format!("bad value `{v}` for `{key}`") }),
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = no + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Parse { line, msg: format!("expected `key = value`, got `{content}`") })?;
            let t = &mut c.train;
            match k {
                "mode" => t.mode = value(line, k, v)?,
                "inner_steps" => t.inner_steps = value(line, k, v)?,
                "task_batch" => t.task_batch = value(line, k, v)?,
                "lambda" => t.lambda = value(line, k, v)?,
                "alpha_init" => t.alpha_init = value(line, k, v)?,
                "lr" => t.lr = value(line, k, v)?,
                "lr_min" => t.lr_min = value(line, k, v)?,
                "alpha_lr" => t.alpha_lr = value(line, k, v)?,
                "attention_lr" => t.attention_lr = value(line, k, v)?,
                "epochs" => t.epochs = value(line, k, v)?,
                "tasks_per_epoch" => t.tasks_per_epoch = value(line, k, v)?,
                "val_every" => t.val_every = value(line, k, v)?,
                "val_tasks" => t.val_tasks = value(line, k, v)?,
                "first_order" => t.first_order = flag(line, k, v)?,
                "attention" => t.attention = flag(line, k, v)?,
                "rho_fw" => t.rho_fw = value(line, k, v)?,
                "rho_bw" => t.rho_bw = value(line, k, v)?,
                "seed" => t.seed = value(line, k, v)?,
                "task" => {
                    c.family = match v {
                        "sinusoid" => TaskFamily::Sinusoid,
                        "clusters" => TaskFamily::Clusters,
                        _ => return Err(Error::Parse { line, msg: format!("unknown task family `{v}`") }),
                    }
                }
                "shots" => c.shots = value(line, k, v)?,
                "n_way" => c.n_way = value(line, k, v)?,
                "k_shot" => c.k_shot = value(line, k, v)?,
                "dim" => c.dim = value(line, k, v)?,
                "network" => c.network = Some(v.to_string()),
                "hidden" => {
                    c.hidden = v
                        .split(',')
                        .map(|h| value(line, k, h.trim()))
                        .collect::<Result<Vec<usize>>>()?;
                }
                "task_seed" => c.task_seed = value(line, k, v)?,
                "val_seed" => c.val_seed = value(line, k, v)?,
                _ => return Err(Error::UnknownKey(k.to_string())),
            }
        }
        c.train.validate()?;
        Ok(c)
    }
}

impl ExperimentConfig {
    pub fn network(&self) -> Result<NetworkSpec> {
        if let Some(name) = &self.network {
            return NetworkSpec::preset(name, self.n_way);
        }
        if self.hidden.contains(&0) {
            return Err(Error::Invalid("hidden widths must be positive".into()));
        }
        Ok(match self.family {
            TaskFamily::Sinusoid => crate::spec::mlp(1, &self.hidden, 1),
            TaskFamily::Clusters => crate::spec::mlp(self.dim, &self.hidden, self.n_way),
        })
    }

    fn stream(&self, seed: u64) -> Result<TaskStream> {
        match self.family {
            TaskFamily::Sinusoid => TaskStream::sinusoid(seed, self.shots),
            TaskFamily::Clusters => TaskStream::clusters(seed, self.n_way, self.k_shot, self.dim),
        }
    }

    pub fn train_stream(&self) -> Result<TaskStream> {
        self.stream(self.task_seed)
    }

    pub fn val_tasks(&self) -> Result<Vec<Task>> {
        Ok(self.stream(self.val_seed)?.take(self.train.val_tasks))
    }
}
