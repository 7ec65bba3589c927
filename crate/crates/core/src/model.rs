//! The continual-learning model: a shared backbone, an optional task-attention
//! block, and one token and classifier head per task.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::backbone::{Backbone, BackboneConfig, InputGeometry};
use crate::binio::Reader;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::rng::{seeded, stream};
use crate::task_attention::{fuse_dual, ClassifierHead, TaskAttentionBlock, TaskToken};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TAMCLCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub geometry: InputGeometry,
    /// Route `s^D` through the task-attention block with a per-task token.
    /// Without it the head reads the pooled class row directly.
    pub use_tab: bool,
    /// Grow head widths as `E_i = E_i^orig + E_{i−1}`.
    pub accumulate_heads: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub name: String,
    pub label_count: usize,
    pub dual_image: bool,
}

/// What one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `1×E_i` logits.
    pub logits: Var,
    /// `s^D` of each backbone branch (two for dual-image tasks).
    pub representations: Vec<Var>,
}

/// Frozen parameter copy taken when a task begins. Only its backbone is ever
/// evaluated.
#[derive(Clone, Debug)]
pub struct Teacher {
    store: ParamStore,
    backbone: Backbone,
    /// Index of the task whose training this teacher supervises.
    pub task: usize,
}

impl Teacher {
    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `s^D` per branch, computed on a private tape and returned as plain
    /// values so nothing is recorded against the teacher's parameters.
    pub fn backbone_forward(&self, sample: &Sample) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let mut out = Vec::with_capacity(2);
        for image in std::iter::once(&sample.image).chain(sample.second_image.as_ref()) {
            let enc = self.backbone.forward(&mut tape, &self.store, image, &sample.tokens)?;
            out.push(tape.value(enc.output).clone());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct TamClModel {
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    tab: Option<TaskAttentionBlock>,
    tokens: Vec<TaskToken>,
    heads: Vec<ClassifierHead>,
    tasks: Vec<TaskInfo>,
    active: bool,
}

impl TamClModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded(config.seed, stream::INIT);
        let backbone = Backbone::new(&config.backbone, &config.geometry, &mut store, &mut rng)?;
        let tab = if config.use_tab {
            Some(TaskAttentionBlock::new(
                &mut store,
                config.backbone.hidden,
                config.backbone.heads,
                config.backbone.mlp_ratio,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(TamClModel {
            config,
            store,
            backbone,
            tab,
            tokens: Vec::new(),
            heads: Vec::new(),
            tasks: Vec::new(),
            active: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn tab(&self) -> Option<&TaskAttentionBlock> {
        self.tab.as_ref()
    }

    pub fn tokens(&self) -> &[TaskToken] {
        &self.tokens
    }

    pub fn heads(&self) -> &[ClassifierHead] {
        &self.heads
    }

    pub fn tasks(&self) -> &[TaskInfo] {
        &self.tasks
    }

    /// Number of begun tasks, `T_n`.
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn current_task(&self) -> Option<usize> {
        self.tasks.len().checked_sub(1)
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    /// Starts a new task. From the second task on, returns a teacher copied
    /// before the new token and head exist.
    pub fn begin_task(&mut self, info: TaskInfo) -> Result<Option<Teacher>> {
        if self.active {
            return Err(Error::invalid_state(format!(
                "task `{}` is still training; call end_task first",
                self.tasks.last().map(|t| t.name.as_str()).unwrap_or("?")
            )));
        }
        if info.label_count == 0 {
            return Err(Error::invalid_argument(format!("task `{}` has no labels", info.name)));
        }
        if self.tasks.iter().any(|t| t.name == info.name) {
            return Err(Error::invalid_state(format!("task `{}` was already begun", info.name)));
        }
        let teacher = if self.tasks.is_empty() {
            None
        } else {
            let mut store = self.store.clone();
            let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
            for id in ids {
                store.set_trainable(id, false);
            }
            Some(Teacher {
                store,
                backbone: self.backbone.clone(),
                task: self.tasks.len(),
            })
        };
        self.expand_for_task(info)?;
        self.active = true;
        Ok(teacher)
    }

    fn expand_for_task(&mut self, info: TaskInfo) -> Result<()> {
        let task = self.tasks.len();
        let mut rng = seeded(
            self.config.seed ^ (task as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            stream::INIT,
        );
        let width = self.config.backbone.hidden;
        if self.config.use_tab {
            self.tokens.push(TaskToken::new(&mut self.store, task, width, &mut rng)?);
        }
        let offset = if self.config.accumulate_heads {
            self.heads.last().map_or(0, |h| h.output_dim())
        } else {
            0
        };
        self.heads
            .push(ClassifierHead::new(&mut self.store, task, info.label_count, offset, width, &mut rng)?);
        self.tasks.push(info);
        self.apply_freeze_mask();
        Ok(())
    }

    /// Marks the current task finished so the next one may begin.
    pub fn end_task(&mut self) -> Result<()> {
        if !self.active {
            return Err(Error::invalid_state("no task is training"));
        }
        self.active = false;
        Ok(())
    }

    fn apply_freeze_mask(&mut self) {
        let current = self.current_task();
        for t in &self.tokens {
            self.store.set_trainable(t.param, Some(t.task) == current);
        }
        for h in &self.heads {
            let on = Some(h.task) == current;
            self.store.set_trainable(h.weight, on);
            self.store.set_trainable(h.bias, on);
        }
    }

    /// Names of the parameters the optimizer may change for the current task.
    pub fn trainable_parameters(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    fn check_task(&self, task: usize) -> Result<&TaskInfo> {
        self.tasks.get(task).ok_or_else(|| {
            Error::invalid_argument(format!("task {task} not begun ({} tasks so far)", self.tasks.len()))
        })
    }

    /// Logits and `s^D` for one sample of task `task`.
    pub fn forward(&self, tape: &mut Tape, sample: &Sample, task: usize) -> Result<ForwardOutput> {
        let info = self.check_task(task)?;
        match (&sample.second_image, info.dual_image) {
            (Some(_), false) => {
                return Err(Error::invalid_state(format!(
                    "two images given to single-image task `{}`",
                    info.name
                )))
            }
            (None, true) => {
                return Err(Error::invalid_argument(format!(
                    "task `{}` needs two images",
                    info.name
                )))
            }
            _ => {}
        }
        let store = &self.store;
        let mut representations = Vec::with_capacity(2);
        for image in std::iter::once(&sample.image).chain(sample.second_image.as_ref()) {
            representations.push(self.backbone.forward(tape, store, image, &sample.tokens)?.output);
        }
        let tab_input = if info.dual_image {
            let a = tape.slice_rows(representations[0], 0, 1)?;
            let b = tape.slice_rows(representations[1], 0, 1)?;
            fuse_dual(tape, a, b)?
        } else {
            representations[0]
        };
        let features = match &self.tab {
            Some(tab) => {
                let token = tape.param(store, self.tokens[task].param);
                tab.forward(tape, store, token, Some(tab_input))?.output
            }
            None => tape.slice_rows(tab_input, 0, 1)?,
        };
        let logits = self.heads[task].forward(tape, store, features)?;
        Ok(ForwardOutput {
            logits,
            representations,
        })
    }

    /// Native label predicted for one sample.
    pub fn predict(&self, sample: &Sample, task: usize) -> Result<usize> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, sample, task)?;
        self.heads[task].predict(tape.value(out.logits).data())
    }

    /// Row-wise `s^D` values of the student backbone for a sample.
    pub fn backbone_forward(&self, sample: &Sample) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let mut out = Vec::new();
        for image in std::iter::once(&sample.image).chain(sample.second_image.as_ref()) {
            let enc = self.backbone.forward(&mut tape, &self.store, image, &sample.tokens)?;
            out.push(tape.value(enc.output).clone());
        }
        Ok(out)
    }

    // ---------------------------------------------------------------------
    // Checkpoints

    pub fn encode_checkpoint(&self) -> Result<Vec<u8>> {
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            tasks: self.tasks.clone(),
            heads: self
                .heads
                .iter()
                .map(|h| HeadLayout {
                    task: h.task,
                    offset: h.offset,
                    native_labels: h.native_labels,
                })
                .collect(),
            active: self.active,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.store.len() as u64).to_le_bytes());
        for (_, p) in self.store.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for d in p.value.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Rebuilds the architecture from the manifest, then overwrites every
    /// parameter by name. Names, shapes and counts must all match.
    pub fn decode_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let len = r.u32("manifest length")? as usize;
        let at = r.pos;
        let manifest: CheckpointManifest = serde_json::from_slice(r.take(len, "manifest")?).map_err(|e| Error::Format {
            offset: at as u64,
            message: format!("bad manifest: {e}"),
        })?;
        let mut model = TamClModel::new(manifest.config.clone()).map_err(|e| Error::Format {
            offset: at as u64,
            message: format!("manifest config rejected: {e}"),
        })?;
        for info in manifest.tasks {
            model.expand_for_task(info)?;
        }
        for (h, layout) in model.heads.iter().zip(&manifest.heads) {
            if (h.task, h.offset, h.native_labels) != (layout.task, layout.offset, layout.native_labels) {
                return Err(Error::Format {
                    offset: at as u64,
                    message: format!("head layout for task {} does not match the configuration", h.task),
                });
            }
        }
        model.active = manifest.active;

        let count = r.u64("parameter count")? as usize;
        if count != model.store.len() {
            return Err(r.err(format!("{count} parameters, architecture has {}", model.store.len())));
        }
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format {
                    offset: at as u64,
                    message: "parameter name is not UTF-8".into(),
                })?
                .to_string();
            let ndim = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64("dimension")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.err("shape overflows"))?;
            let data = r.f64s(n, "parameter values")?;
            let id = model.store.id(&name).ok_or_else(|| Error::Format {
                offset: at as u64,
                message: format!("unknown parameter `{name}`"),
            })?;
            let p = model.store.get_mut(id);
            if p.value.shape() != shape.as_slice() {
                return Err(Error::Format {
                    offset: at as u64,
                    message: format!("`{name}` has shape {shape:?}, expected {:?}", p.value.shape()),
                });
            }
            p.value = Tensor::new(shape, data)?;
        }
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_checkpoint()?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_checkpoint(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct HeadLayout {
    task: usize,
    offset: usize,
    native_labels: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    tasks: Vec<TaskInfo>,
    heads: Vec<HeadLayout>,
    active: bool,
}
