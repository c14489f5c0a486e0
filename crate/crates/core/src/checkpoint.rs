//! Versioned tensor container used for base weights, projectors, adapters,
//! anchors, and composed models.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "HIDEFRG\0"
//! version  u32
//! n_meta   u32, then n_meta × (u32 key_len, key, u32 value_len, value)   UTF-8
//! n_tensor u32, then n_tensor × (u32 name_len, name, u64 rows, u64 cols, rows·cols × f64)
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use crate::adapters::{BlockAdapters, ComposedAdapters, LoraAdapter, Site, TaskAdapterSet};
use crate::anchors::{FrozenEncoder, TaskAnchor};
use crate::continual::{ContinualState, LearnedTask};
use crate::error::{Error, Result};
use crate::model::{BaseModel, ModelConfig, Projector};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"HIDEFRG\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Matrix)>,
}

impl TensorFile {
    pub fn with_config(kind: &str, config: &ModelConfig) -> Self {
        let mut file = Self::default();
        file.meta.insert("kind".into(), kind.into());
        let value = serde_json::to_value(config).expect("config serializes");
        for (k, v) in value.as_object().expect("config is an object") {
            file.meta.insert(format!("model.{k}"), v.to_string());
        }
        file
    }

    pub fn config(&self) -> Result<ModelConfig> {
        let mut object = serde_json::Map::new();
        for (k, v) in &self.meta {
            if let Some(field) = k.strip_prefix("model.") {
                let parsed: serde_json::Value =
                    serde_json::from_str(v).map_err(|_| Error::Format(format!("bad config value for `{k}`")))?;
                object.insert(field.to_string(), parsed);
            }
        }
        let config: ModelConfig = serde_json::from_value(serde_json::Value::Object(object))
            .map_err(|e| Error::Format(format!("bad model config block: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind").map(String::as_str)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Format(format!("expected a `{kind}` checkpoint, found {other:?}"))),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: &[f64]) {
        self.push(name, Matrix::from_vec(1, v.len(), v.to_vec()).expect("row vector"));
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Format(format!("checkpoint misses tensor `{name}`")))
    }

    pub fn get_vector(&self, name: &str) -> Result<Vec<f64>> {
        let m = self.get(name)?;
        if m.rows() != 1 {
            return Err(Error::Format(format!("tensor `{name}` is not a row vector")));
        }
        Ok(m.as_slice().to_vec())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Format(format!("checkpoint misses key `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic header".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut file = TensorFile::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            file.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let count = rows.checked_mul(cols).ok_or_else(|| Error::Format("tensor too large".into()))?;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            file.tensors.push((name, Matrix::from_vec(rows, cols, values)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("non UTF-8 string".into()))
    }
}

pub fn base_to_file(base: &BaseModel) -> TensorFile {
    let mut file = TensorFile::with_config("base", &base.config);
    file.tensors = base.named_tensors();
    file.meta.insert("checksum".into(), base.checksum());
    file
}

pub fn base_from_file(file: &TensorFile) -> Result<BaseModel> {
    file.expect_kind("base")?;
    let base = BaseModel::from_named_tensors(file.config()?, &file.tensors)?;
    if let Some(sum) = file.meta.get("checksum") {
        if *sum != base.checksum() {
            return Err(Error::Format("base checkpoint checksum mismatch".into()));
        }
    }
    Ok(base)
}

pub(crate) fn push_projector(file: &mut TensorFile, prefix: &str, proj: &Projector) {
    file.push(format!("{prefix}weight"), proj.weight.clone());
    file.push_vector(format!("{prefix}bias"), &proj.bias);
}

pub(crate) fn read_projector(file: &TensorFile, prefix: &str) -> Result<Projector> {
    Ok(Projector { weight: file.get(&format!("{prefix}weight"))?.clone(), bias: file.get_vector(&format!("{prefix}bias"))? })
}

pub fn projector_to_file(config: &ModelConfig, proj: &Projector) -> TensorFile {
    let mut file = TensorFile::with_config("projector", config);
    push_projector(&mut file, "projector.", proj);
    file
}

pub fn projector_from_file(file: &TensorFile) -> Result<Projector> {
    file.expect_kind("projector")?;
    let proj = read_projector(file, "projector.")?;
    proj.check(&file.config()?)?;
    Ok(proj)
}

pub(crate) fn push_adapters(file: &mut TensorFile, prefix: &str, set: &TaskAdapterSet) {
    for adapter in set.adapters() {
        file.push(format!("{prefix}{}.A", adapter.site), adapter.a.clone());
        file.push(format!("{prefix}{}.B", adapter.site), adapter.b.clone());
    }
}

pub(crate) fn read_adapters(file: &TensorFile, prefix: &str, task: &str, config: &ModelConfig) -> Result<TaskAdapterSet> {
    let adapters = Site::all(config.n_blocks)
        .map(|site| {
            Ok(LoraAdapter {
                site,
                a: file.get(&format!("{prefix}{site}.A"))?.clone(),
                b: file.get(&format!("{prefix}{site}.B"))?.clone(),
                scaling: config.lora_scaling(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TaskAdapterSet::from_adapters(task, config, adapters)
}

/// A task's adapters with its anchor (`anchor_v`, `anchor_ins`, `n_seen`).
pub fn task_to_file(config: &ModelConfig, task: &LearnedTask) -> TensorFile {
    let mut file = TensorFile::with_config("adapters", config);
    file.meta.insert("task".into(), task.adapters.task.clone());
    push_adapters(&mut file, "", &task.adapters);
    file.push_vector("anchor_v", &task.anchor.visual);
    file.push_vector("anchor_ins", &task.anchor.instruction);
    file.push_vector("n_seen", &[task.anchor.n_seen as f64]);
    if let Some(p) = &task.projector {
        push_projector(&mut file, "projector.", p);
    }
    file
}

pub fn task_from_file(file: &TensorFile) -> Result<LearnedTask> {
    file.expect_kind("adapters")?;
    let config = file.config()?;
    let task = file.meta("task")?.to_string();
    let adapters = read_adapters(file, "", &task, &config)?;
    let n_seen = file.get_vector("n_seen")?;
    let anchor = TaskAnchor {
        task,
        visual: file.get_vector("anchor_v")?,
        instruction: file.get_vector("anchor_ins")?,
        n_seen: n_seen.first().copied().unwrap_or(0.0) as usize,
    };
    let projector = match file.get("projector.weight") {
        Ok(_) => Some(Arc::new(read_projector(file, "projector.")?)),
        Err(_) => None,
    };
    Ok(LearnedTask { adapters: Arc::new(adapters), anchor, projector })
}

pub fn encoder_to_file(config: &ModelConfig, encoder: &FrozenEncoder) -> TensorFile {
    let mut file = TensorFile::with_config("encoder", config);
    push_encoder(&mut file, encoder);
    file
}

pub(crate) fn push_encoder(file: &mut TensorFile, encoder: &FrozenEncoder) {
    file.push("encoder.visual_projection", encoder.visual_projection.clone());
    file.push("encoder.instruction_projection", encoder.instruction_projection.clone());
    file.push("encoder.token_embedding", encoder.token_embedding.clone());
}

pub(crate) fn read_encoder(file: &TensorFile, config: &ModelConfig) -> Result<FrozenEncoder> {
    Ok(FrozenEncoder {
        visual_projection: file.get("encoder.visual_projection")?.clone(),
        instruction_projection: file.get("encoder.instruction_projection")?.clone(),
        token_embedding: file.get("encoder.token_embedding")?.clone(),
        visual_prefix_len: config.visual_prefix_len,
    })
}

pub fn encoder_from_file(file: &TensorFile) -> Result<FrozenEncoder> {
    file.expect_kind("encoder")?;
    read_encoder(file, &file.config()?)
}

/// One composition as applied to one input: per block either nothing, a
/// dense fused delta (`block{b}.<site>.delta`), or the mixture's experts
/// (`block{b}.expert{i}.<site>.A/.B`) with their weights
/// (`block{b}.weights`). The projector used goes under `projector.`.
pub fn composed_to_file(config: &ModelConfig, composed: &ComposedAdapters, projector: &Projector) -> TensorFile {
    let mut file = TensorFile::with_config("composed", config);
    file.meta.insert("strategy".into(), composed.strategy.as_str().into());
    let mut layout = Vec::with_capacity(composed.blocks().len());
    for (b, block) in composed.blocks().iter().enumerate() {
        match block {
            BlockAdapters::Base => layout.push("base".to_string()),
            BlockAdapters::Merged(delta) => {
                layout.push("merged".into());
                for site in Site::in_block(b) {
                    if let Some(m) = delta.get(site) {
                        file.push(format!("{site}.delta"), m.clone());
                    }
                }
            }
            BlockAdapters::Mixture { experts, weights } => {
                layout.push("mixture".into());
                file.push_vector(format!("block{b}.weights"), weights);
                let names: Vec<&str> = experts.iter().map(|e| e.task.as_str()).collect();
                file.meta.insert(format!("block{b}.experts"), names.join(","));
                for (i, expert) in experts.iter().enumerate() {
                    for adapter in expert.block(b) {
                        file.push(format!("block{b}.expert{i}.{}.A", adapter.site.kind.as_str()), adapter.a.clone());
                        file.push(format!("block{b}.expert{i}.{}.B", adapter.site.kind.as_str()), adapter.b.clone());
                    }
                }
            }
        }
    }
    file.meta.insert("layout".into(), layout.join(","));
    push_projector(&mut file, "projector.", projector);
    file
}

/// Writes a state directory: base, encoder, shared projector, one file per task.
pub fn save_state(state: &ContinualState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let cfg = &state.base.config;
    base_to_file(&state.base).write(&dir.join("base.ckpt"))?;
    encoder_to_file(cfg, &state.encoder).write(&dir.join("encoder.ckpt"))?;
    let mut proj = projector_to_file(cfg, &state.projector);
    proj.meta.insert("mode".into(), state.mode.as_str().into());
    proj.meta.insert("seed".into(), state.seed.to_string());
    proj.meta.insert("num_tasks".into(), state.num_tasks().to_string());
    proj.meta.insert("train".into(), serde_json::to_string(&state.train)?);
    proj.meta.insert("router".into(), serde_json::to_string(&state.router)?);
    proj.meta.insert("fusion_coefficient".into(), serde_json::to_string(&state.fusion_coefficient)?);
    proj.write(&dir.join("projector.ckpt"))?;
    for (i, task) in state.tasks().iter().enumerate() {
        task_to_file(cfg, task).write(&dir.join(format!("task{i}.ckpt")))?;
    }
    Ok(())
}

pub fn load_state(dir: &Path) -> Result<ContinualState> {
    let base = Arc::new(base_from_file(&TensorFile::read(&dir.join("base.ckpt"))?)?);
    let encoder = Arc::new(encoder_from_file(&TensorFile::read(&dir.join("encoder.ckpt"))?)?);
    let proj_file = TensorFile::read(&dir.join("projector.ckpt"))?;
    let projector = projector_from_file(&proj_file)?;
    let mode = match proj_file.meta("mode")? {
        "per-task" => crate::continual::TrainingMode::PerTask,
        "sequential" => crate::continual::TrainingMode::Sequential,
        other => return Err(Error::Format(format!("unknown training mode `{other}`"))),
    };
    let seed: u64 = proj_file.meta("seed")?.parse().map_err(|_| Error::Format("bad seed".into()))?;
    let num_tasks: usize = proj_file.meta("num_tasks")?.parse().map_err(|_| Error::Format("bad task count".into()))?;
    let train = serde_json::from_str(proj_file.meta("train")?)?;
    let mut state = ContinualState::new(base, encoder, projector, mode, train, seed)?;
    state.router = serde_json::from_str(proj_file.meta("router")?)?;
    state.fusion_coefficient = serde_json::from_str(proj_file.meta("fusion_coefficient")?)?;
    for i in 0..num_tasks {
        state.push_task(task_from_file(&TensorFile::read(&dir.join(format!("task{i}.ckpt")))?)?)?;
    }
    Ok(state)
}
