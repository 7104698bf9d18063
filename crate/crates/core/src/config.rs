//! JSON run configuration.
//!
//! Every key is optional: a document is overlaid on [`RunConfig::default`]
//! section by section, so `{}` is the desk default. Keys that do not exist
//! in the defaults are rejected with their full path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Role};
use crate::pipeline::{DistillConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model_teacher: ModelConfig,
    pub model_student: ModelConfig,
    pub data: DatasetConfig,
    pub teacher_training: TrainConfig,
    pub distill: DistillConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model_teacher: ModelConfig::teacher(),
            model_student: ModelConfig::student(),
            data: DatasetConfig::default(),
            teacher_training: TrainConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a JSON document, filling absent keys from the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text)?;
        let mut merged = serde_json::to_value(Self::default())?;
        overlay(&mut merged, user, "")?;
        let cfg: Self = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks each section and that models and data fit together.
    pub fn validate(&self) -> Result<()> {
        self.model_teacher.validate()?;
        self.model_student.validate()?;
        self.data.validate()?;
        self.teacher_training.validate()?;
        self.distill.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.model_teacher.role != Role::Teacher || self.model_student.role != Role::Student {
            return bad("model_teacher must have role teacher and model_student role student".into());
        }
        if self.model_teacher.vocab_size != self.model_student.vocab_size {
            return bad(format!(
                "teacher vocab {} differs from student vocab {}",
                self.model_teacher.vocab_size, self.model_student.vocab_size
            ));
        }
        for (name, m) in [("model_teacher", &self.model_teacher), ("model_student", &self.model_student)] {
            if m.vocab_size < self.data.min_vocab() {
                return bad(format!(
                    "{name}: vocab_size {} below the {} ids the data uses",
                    m.vocab_size,
                    self.data.min_vocab()
                ));
            }
            if m.patch_grid != self.data.patch_grid() || m.patch_dim != self.data.patch_dim {
                return bad(format!(
                    "{name}: expects {:?}x{} patches, data produces {:?}x{}",
                    m.patch_grid,
                    m.patch_dim,
                    self.data.patch_grid(),
                    self.data.patch_dim
                ));
            }
            let need = m.vision_tokens() + self.data.text_len();
            if need > m.max_seq_len {
                return bad(format!(
                    "{name}: sequences of {need} tokens exceed max_seq_len {}",
                    m.max_seq_len
                ));
            }
        }
        Ok(())
    }
}

fn overlay(base: &mut Value, user: Value, path: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v, &here)?,
                    None => return Err(Error::Config(format!("unknown key {here}"))),
                }
            }
            Ok(())
        }
        (Value::Object(_), v) => Err(Error::Config(format!(
            "{}: expected an object, found {v}",
            if path.is_empty() { "<root>" } else { path }
        ))),
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}
