use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Separability, SlotLayout, SuiteConfig, TaskSpec};
use crate::adapters::hex;
use crate::anchors::{extract_anchor, FrozenEncoder};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Sample};
use crate::numerics::{axpy, cosine_similarity, dot, norm, SeededRng};

/// Largest inter-task anchor cosine allowed for inputs that are meant to
/// differ.
pub const SEPARABILITY_THRESHOLD: f64 = 0.5;
const MAX_ATTEMPTS: usize = 8;
const KEYWORDS_PER_TASK: usize = 3;
const SLOTS: usize = 4;
const RESERVED: usize = 4;

/// Token ranges shared by every task: slot tokens, the keyword pool, and
/// the answer pool at the top of the vocabulary.
#[derive(Debug, Clone, Copy)]
struct VocabLayout {
    slot_start: usize,
    keyword_start: usize,
    answer_start: usize,
    vocab: usize,
}

impl VocabLayout {
    fn new(vocab: usize, n_tasks: usize, classes: usize, slots: SlotLayout) -> Result<Self> {
        let slot_start = RESERVED;
        let keyword_start = slot_start + SLOTS;
        let answer_pool = (vocab * 3 / 8).max(classes.max(SLOTS));
        let answer_start = vocab.saturating_sub(answer_pool);
        let per_task = match slots {
            SlotLayout::Shared => KEYWORDS_PER_TASK,
            SlotLayout::PerTask => KEYWORDS_PER_TASK + SLOTS,
        };
        if answer_start < keyword_start + per_task * n_tasks {
            return Err(Error::Config(format!(
                "vocabulary of {vocab} tokens is too small for {n_tasks} tasks with {classes} classes"
            )));
        }
        Ok(Self { slot_start, keyword_start, answer_start, vocab })
    }
}

/// The concrete generative rule behind one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecipe {
    pub spec: TaskSpec,
    /// Offset added to every visual prefix vector.
    pub style: Vec<f64>,
    /// `classes × (visual_prefix_len · visual_dim)` cluster centres.
    pub centers: Vec<Vec<f64>>,
    pub keywords: Vec<usize>,
    pub slot_tokens: Vec<usize>,
    /// First answer token per visual class.
    pub first_answer: Vec<usize>,
    /// Second answer token per slot. One table for the whole suite: the
    /// skill every task shares.
    pub second_answer: Vec<usize>,
}

impl TaskRecipe {
    /// Total and deterministic: answer tokens for a class and slot.
    pub fn answer(&self, class: usize, slot: usize) -> Vec<usize> {
        vec![self.first_answer[class], self.second_answer[slot]]
    }

    pub fn sample(&self, id: String, rng: &mut SeededRng) -> Sample {
        let class = rng.below(self.centers.len());
        let slot = rng.below(self.slot_tokens.len());
        let dim = self.style.len();
        let visual = self.centers[class]
            .iter()
            .enumerate()
            .map(|(i, c)| self.style[i % dim] + c + self.spec.visual_spread * rng.normal())
            .collect();
        let mut instruction = self.keywords.clone();
        instruction.push(self.slot_tokens[slot]);
        Sample { id, task: self.spec.name.clone(), visual, instruction, answer: self.answer(class, slot) }
    }
}

/// Instruction of the pretraining pretext; reserved tokens no task uses.
const PRETEXT_INSTRUCTION: [usize; 3] = [0, 1, 2];

/// Recipes for one pretraining round: every task's visual and slot
/// distribution under a reserved instruction, with a class-to-answer table
/// drawn afresh from the answer pool. The base learns to read the inputs
/// and the shared slot skill without learning any task's class mapping.
pub fn pretext_recipes(cfg: &SuiteConfig, tasks: &[TaskData], rng: &mut SeededRng) -> Result<Vec<TaskRecipe>> {
    let layout = VocabLayout::new(cfg.model.vocab_size, tasks.len(), cfg.suite.classes, cfg.suite.slots)?;
    let first_answer = distinct(layout.answer_start..layout.vocab, cfg.suite.classes, rng);
    Ok(tasks
        .iter()
        .map(|t| {
            let mut recipe = t.recipe.clone();
            recipe.spec.name = "pretext".into();
            recipe.keywords = PRETEXT_INSTRUCTION.to_vec();
            recipe.first_answer = first_answer.clone();
            recipe
        })
        .collect())
}

/// A seeded orthonormal basis of `R^dim` (Gram-Schmidt on Gaussian draws).
fn orthonormal_basis(dim: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for u in &basis {
            axpy(-dot(&v, u), u, &mut v);
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

fn distinct(pool: std::ops::Range<usize>, count: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut tokens: Vec<usize> = pool.collect();
    rng.shuffle(&mut tokens);
    tokens.truncate(count);
    tokens
}

fn recipes(cfg: &SuiteConfig, attempt: usize) -> Result<Vec<TaskRecipe>> {
    let specs = cfg.tasks();
    let m = &cfg.model;
    let classes = cfg.suite.classes;
    let layout = VocabLayout::new(m.vocab_size, specs.len(), classes, cfg.suite.slots)?;
    let mut rng = SeededRng::derived(cfg.suite.seed, &format!("suite/recipes/{attempt}"));
    let mut keyword_pool: Vec<usize> = (layout.keyword_start..layout.answer_start).collect();
    rng.shuffle(&mut keyword_pool);
    let shared_slots: Vec<usize> = (layout.slot_start..layout.slot_start + SLOTS).collect();
    let width = m.visual_prefix_len * m.visual_dim;

    let second_answer = distinct(layout.answer_start..layout.vocab, SLOTS, &mut rng);
    let class_answer = distinct(layout.answer_start..layout.vocab, classes, &mut rng);
    // Each visual group (a task with its own visuals) owns a block of an
    // orthonormal basis: one style direction plus class directions.
    let groups = specs.iter().filter(|s| s.separability != Separability::VisualConfusable).count();
    let per_group = m.visual_dim / groups;
    if per_group < 2 {
        return Err(Error::Config(format!(
            "model.visual_dim = {} leaves fewer than 2 visual dimensions for each of {groups} task groups",
            m.visual_dim
        )));
    }
    let basis = orthonormal_basis(m.visual_dim, &mut rng);
    let mut group = 0;
    let mut out: Vec<TaskRecipe> = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let partner = spec.partner.as_ref().and_then(|p| out.iter().find(|r| &r.spec.name == p));
        let (style, centers) = match (spec.separability, partner) {
            (Separability::VisualConfusable, Some(p)) => (p.style.clone(), p.centers.clone()),
            _ => {
                let dirs = &basis[group * per_group..(group + 1) * per_group];
                group += 1;
                let style = dirs[0].iter().map(|x| x * spec.style_scale).collect();
                let centers = (0..classes)
                    .map(|_| {
                        let mut c = vec![0.0; width];
                        for pos in c.chunks_mut(m.visual_dim) {
                            for d in &dirs[1..] {
                                axpy(rng.normal(), d, pos);
                            }
                        }
                        c
                    })
                    .collect();
                (style, centers)
            }
        };
        let keywords = match (spec.separability, partner) {
            (Separability::TextConfusable, Some(p)) => p.keywords.clone(),
            _ => keyword_pool[i * KEYWORDS_PER_TASK..(i + 1) * KEYWORDS_PER_TASK].to_vec(),
        };
        out.push(TaskRecipe {
            spec: spec.clone(),
            style,
            centers,
            keywords,
            slot_tokens: match (cfg.suite.slots, spec.separability, partner) {
                (SlotLayout::Shared, ..) => shared_slots.clone(),
                (SlotLayout::PerTask, Separability::TextConfusable, Some(p)) => p.slot_tokens.clone(),
                (SlotLayout::PerTask, ..) => {
                    let from = specs.len() * KEYWORDS_PER_TASK + i * SLOTS;
                    keyword_pool[from..from + SLOTS].to_vec()
                }
            },
            first_answer: match spec.separability {
                // Same visuals as the partner, so the class mapping must differ.
                Separability::VisualConfusable => (0..classes).map(|c| class_answer[(c + 1) % classes]).collect(),
                _ => class_answer.clone(),
            },
            second_answer: second_answer.clone(),
        });
    }
    Ok(out)
}

/// Pairwise cosine similarity of task anchors, per modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub threshold: f64,
    pub tasks: Vec<String>,
    pub visual: Vec<Vec<f64>>,
    pub instruction: Vec<Vec<f64>>,
    /// Largest similarity over the pairs that must stay below the threshold.
    pub max_checked: f64,
    /// `a/b/modality` entries at or above the threshold.
    pub violations: Vec<String>,
    pub attempts: usize,
}

/// Whether the modality of a pair is shared on purpose.
fn shared_by_design(a: &TaskSpec, b: &TaskSpec, visual: bool) -> bool {
    let pair = |x: &TaskSpec, y: &TaskSpec| x.partner.as_deref() == Some(y.name.as_str());
    let wanted = if visual { Separability::VisualConfusable } else { Separability::TextConfusable };
    (pair(a, b) && a.separability == wanted) || (pair(b, a) && b.separability == wanted)
}

pub fn separability_report(encoder: &FrozenEncoder, specs: &[TaskSpec], train: &[&[Sample]]) -> Result<SeparabilityReport> {
    let anchors = specs
        .iter()
        .zip(train)
        .map(|(s, samples)| extract_anchor(encoder, &s.name, samples.iter()))
        .collect::<Result<Vec<_>>>()?;
    let n = anchors.len();
    let mut visual = vec![vec![1.0; n]; n];
    let mut instruction = vec![vec![1.0; n]; n];
    let mut max_checked: f64 = f64::NEG_INFINITY;
    let mut violations = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            visual[i][j] = cosine_similarity(&anchors[i].visual, &anchors[j].visual)?;
            instruction[i][j] = cosine_similarity(&anchors[i].instruction, &anchors[j].instruction)?;
            if j < i {
                continue;
            }
            for (is_visual, value) in [(true, visual[i][j]), (false, instruction[i][j])] {
                if shared_by_design(&specs[i], &specs[j], is_visual) {
                    continue;
                }
                max_checked = max_checked.max(value);
                if value >= SEPARABILITY_THRESHOLD {
                    let modality = if is_visual { "visual" } else { "instruction" };
                    violations.push(format!("{}/{}/{modality}={value:.4}", specs[i].name, specs[j].name));
                }
            }
        }
    }
    Ok(SeparabilityReport {
        threshold: SEPARABILITY_THRESHOLD,
        tasks: specs.iter().map(|s| s.name.clone()).collect(),
        visual,
        instruction,
        max_checked,
        violations,
        attempts: 0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub recipe: TaskRecipe,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// An in-memory suite ready to be written or run.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSuite {
    pub tasks: Vec<TaskData>,
    pub separability: SeparabilityReport,
    pub data_hash: String,
}

/// The inputs that determine the dataset files.
pub(crate) fn data_hash(cfg: &SuiteConfig) -> String {
    #[derive(Serialize)]
    struct DataKey<'a> {
        seed: u64,
        tasks: Vec<TaskSpec>,
        classes: usize,
        feature_dim: usize,
        model: &'a ModelConfig,
    }
    let key = DataKey {
        seed: cfg.suite.seed,
        tasks: cfg.tasks(),
        classes: cfg.suite.classes,
        feature_dim: cfg.suite.feature_dim,
        model: &cfg.model,
    };
    hex(&Sha256::digest(serde_json::to_vec(&key).expect("data key serializes")))
}

/// Draws every task's train and test split. Deterministic in the seed;
/// redraws the task rules (up to a bound) until the separability check
/// passes.
pub fn generate_suite(cfg: &SuiteConfig) -> Result<GeneratedSuite> {
    cfg.validate()?;
    let encoder = super::frozen_encoder(cfg)?;
    let mut last_report = None;
    for attempt in 0..MAX_ATTEMPTS {
        let recipes = recipes(cfg, attempt)?;
        let tasks: Vec<TaskData> = recipes
            .into_iter()
            .map(|recipe| {
                let name = recipe.spec.name.clone();
                let mut rng = SeededRng::derived(cfg.suite.seed, &format!("suite/samples/{attempt}/{name}"));
                let train = (0..recipe.spec.n_train).map(|i| recipe.sample(format!("{name}-train-{i:05}"), &mut rng)).collect();
                let test = (0..recipe.spec.n_test).map(|i| recipe.sample(format!("{name}-test-{i:05}"), &mut rng)).collect();
                TaskData { recipe, train, test }
            })
            .collect();
        let specs: Vec<TaskSpec> = tasks.iter().map(|t| t.recipe.spec.clone()).collect();
        let train: Vec<&[Sample]> = tasks.iter().map(|t| t.train.as_slice()).collect();
        let mut report = separability_report(&encoder, &specs, &train)?;
        report.attempts = attempt + 1;
        if report.violations.is_empty() {
            return Ok(GeneratedSuite { tasks, separability: report, data_hash: data_hash(cfg) });
        }
        last_report = Some(report);
    }
    let report = last_report.expect("at least one attempt");
    Err(Error::Generation(format!(
        "inter-task anchor similarity stayed at or above {SEPARABILITY_THRESHOLD} after {MAX_ATTEMPTS} attempts: {}",
        report.violations.join(", ")
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TaskEntry {
    name: String,
    separability: Separability,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    partner: Option<String>,
    train_file: String,
    test_file: String,
    train_sha256: String,
    test_sha256: String,
    n_train: usize,
    n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SuiteManifest {
    seed: u64,
    data_hash: String,
    tasks: Vec<TaskEntry>,
    recipes: Vec<TaskRecipe>,
    separability: SeparabilityReport,
}

pub const SUITE_MANIFEST: &str = "suite.json";

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn jsonl_bytes(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s).expect("samples serialize");
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&jsonl_bytes(samples)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::Ingestion(format!("{}:{}: {e}", path.display(), i + 1)))?;
        samples.push(sample);
    }
    Ok(samples)
}

impl GeneratedSuite {
    /// Writes `suite.json` and `tasks/<name>.{train,test}.jsonl` under `dir`.
    pub fn write(&self, dir: &Path, seed: u64) -> Result<()> {
        let tasks_dir = dir.join("tasks");
        std::fs::create_dir_all(&tasks_dir).map_err(|e| Error::io(format!("creating {}", tasks_dir.display()), e))?;
        let mut entries = Vec::with_capacity(self.tasks.len());
        for t in &self.tasks {
            let spec = &t.recipe.spec;
            let train_file = format!("tasks/{}.train.jsonl", spec.name);
            let test_file = format!("tasks/{}.test.jsonl", spec.name);
            let train = jsonl_bytes(&t.train);
            let test = jsonl_bytes(&t.test);
            for (file, bytes) in [(&train_file, &train), (&test_file, &test)] {
                let path = dir.join(file);
                std::fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            }
            entries.push(TaskEntry {
                name: spec.name.clone(),
                separability: spec.separability,
                partner: spec.partner.clone(),
                train_sha256: sha256_hex(&train),
                test_sha256: sha256_hex(&test),
                train_file,
                test_file,
                n_train: t.train.len(),
                n_test: t.test.len(),
            });
        }
        let manifest = SuiteManifest {
            seed,
            data_hash: self.data_hash.clone(),
            tasks: entries,
            recipes: self.tasks.iter().map(|t| t.recipe.clone()).collect(),
            separability: self.separability.clone(),
        };
        let path = dir.join(SUITE_MANIFEST);
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        std::fs::write(&path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// A suite read back from disk, with its separability re-measured.
#[derive(Debug, Clone)]
pub struct LoadedSuite {
    pub dir: PathBuf,
    pub tasks: Vec<TaskData>,
    pub separability: SeparabilityReport,
}

impl LoadedSuite {
    pub fn names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.recipe.spec.name.clone()).collect()
    }

    pub fn task(&self, name: &str) -> Option<&TaskData> {
        self.tasks.iter().find(|t| t.recipe.spec.name == name)
    }
}

impl From<GeneratedSuite> for LoadedSuite {
    fn from(g: GeneratedSuite) -> Self {
        Self { dir: PathBuf::new(), tasks: g.tasks, separability: g.separability }
    }
}

/// Reads a generated suite, checking it against `cfg`, the recorded file
/// digests, every sample's shape, and the separability threshold.
pub fn load_suite(dir: &Path, cfg: &SuiteConfig) -> Result<LoadedSuite> {
    let path = dir.join(SUITE_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let manifest: SuiteManifest =
        serde_json::from_str(&text).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    if manifest.data_hash != data_hash(cfg) {
        return Err(Error::Contract(format!(
            "suite in {} was generated from a different seed or task configuration",
            dir.display()
        )));
    }
    if manifest.recipes.len() != manifest.tasks.len() {
        return Err(Error::Ingestion(format!("{}: recipe and task lists disagree", path.display())));
    }
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for (entry, recipe) in manifest.tasks.iter().zip(manifest.recipes) {
        let mut splits = Vec::with_capacity(2);
        for (file, digest) in [(&entry.train_file, &entry.train_sha256), (&entry.test_file, &entry.test_sha256)] {
            let path = dir.join(file);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if sha256_hex(&bytes) != *digest {
                return Err(Error::Ingestion(format!("{} does not match its recorded digest", path.display())));
            }
            let samples = read_jsonl(&path)?;
            for s in &samples {
                s.validate(&cfg.model)?;
                if s.task != entry.name {
                    return Err(Error::Ingestion(format!("sample `{}` in {} belongs to task `{}`", s.id, file, s.task)));
                }
            }
            splits.push(samples);
        }
        let test = splits.pop().expect("two splits");
        let train = splits.pop().expect("two splits");
        if train.is_empty() || test.is_empty() {
            return Err(Error::Ingestion(format!("task `{}` has an empty split", entry.name)));
        }
        let train_ids: std::collections::HashSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
        if let Some(dup) = test.iter().find(|s| train_ids.contains(s.id.as_str())) {
            return Err(Error::Ingestion(format!("sample id `{}` appears in both splits of `{}`", dup.id, entry.name)));
        }
        tasks.push(TaskData { recipe, train, test });
    }
    let encoder = super::frozen_encoder(cfg)?;
    let specs: Vec<TaskSpec> = tasks.iter().map(|t| t.recipe.spec.clone()).collect();
    let train: Vec<&[Sample]> = tasks.iter().map(|t| t.train.as_slice()).collect();
    let mut separability = separability_report(&encoder, &specs, &train)?;
    separability.attempts = manifest.separability.attempts;
    if !separability.violations.is_empty() {
        return Err(Error::Contract(format!(
            "suite in {} fails the separability check: {}",
            dir.display(),
            separability.violations.join(", ")
        )));
    }
    Ok(LoadedSuite { dir: dir.to_path_buf(), tasks, separability })
}
