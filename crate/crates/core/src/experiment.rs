//! Named experiment pipelines driven by a TOML config file.
//!
//! A config names one pipeline and may override any default below. Unknown
//! keys are rejected.
//!
//! | key | default |
//! |-----|---------|
//! | `pipeline` | required: `pretrain`, `finetune-matrix`, `gate-analysis`, `size-ablation`, `kd-ablation` |
//! | `output_dir` | `runs` |
//! | `checkpoint_dir` | `<output_dir>/checkpoints` |
//! | `seeds` | `[1, 2, 3]` |
//! | `workers` | `1` |
//! | `[data] n_languages` | `8` (ids `l0 … l7`) |
//! | `[data] low_resource` | `["l7"]` |
//! | `[data] targets` | `["l7"]` |
//! | `[data] corpus_seed` | `1` |
//! | `[data] pretrain_high` | `2000` |
//! | `[data] pretrain_low` | `200` |
//! | `[data] teacher_pretrain_low` | `2000` |
//! | `[data] pretrain_out_fraction` | `0.5` |
//! | `[data] finetune_size` | `300` |
//! | `[data] validation` | `100` |
//! | `[data] test` | `200` |
//! | `[data.domain] noise_rate_in` / `noise_rate_out` | `0.15` / `0.25` |
//! | `[data.domain] length_range_in` / `length_range_out` | `[3, 10]` / `[10, 20]` |
//! | `[student]` | `d_model 32, n_heads 4, d_ff 128, 2+2 layers, max_seq_len 32, lora_rank 16, lora_alpha 32` |
//! | `[teacher]` | `d_model 64, n_heads 4, d_ff 256, 4+4 layers, max_seq_len 32` |
//! | `[pretrain]` | `student_epochs 5, teacher_epochs 4, lr_peak 3e-3, warmup_epochs 1, batch_size 16, label_smoothing 0.1, adam, grad_clip 1, seed 1` |
//! | `[finetune]` | [`TrainConfig::default`]; `regime` and `seed` are set per run |
//! | `[matrix] regimes` | all four regimes |
//! | `[gates] regimes` | `["clsr-ft", "distilwhisper"]` |
//! | `[sizes] sizes` / `regimes` | `[100, 300, 1000]` / `["clsr-ft", "distilwhisper"]` |
//! | `[kd] kinds` / `temperatures` | `["js", "kl"]` / `[1.0, 3.0]` |
//!
//! A run directory holds `config.toml` (the effective config), `pretrain.json`,
//! `baselines.json`, one `runs/<cell>.json` per fine-tuning run,
//! `summary.csv`, `report.txt` and, after a runtime failure, `FAILED`.

use crate::error::{Error, Result};
use crate::harness::{
    evaluate_wer, finetune, multi_seed_aggregate, pretrain, FinetuneData, OptimizerKind, PretrainReport, RunRecord,
    TrainConfig,
};
use crate::model::{Checkpoint, FfnVariant, ModelConfig, Regime};
use crate::objectives::KdKind;
use crate::synth::{build_corpus, language_ids, make_language_set, Corpus, CorpusPlan, DomainParams, Role, RoleSizes, Vocab};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const SUMMARY_HEADER: &str = "regime,kd_kind,temperature,language,finetune_size,split,n,wer_mean,wer_std,wer_ci_low,wer_ci_high,gate_mean,gate_std,params_total,params_trainable,ls_overhead";

pub const SPLITS: [&str; 2] = ["test_in", "test_out"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    Pretrain,
    FinetuneMatrix,
    GateAnalysis,
    SizeAblation,
    KdAblation,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Pretrain => "pretrain",
            Pipeline::FinetuneMatrix => "finetune-matrix",
            Pipeline::GateAnalysis => "gate-analysis",
            Pipeline::SizeAblation => "size-ablation",
            Pipeline::KdAblation => "kd-ablation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_languages: usize,
    pub low_resource: Vec<String>,
    /// Languages that get fine-tuned and evaluated.
    pub targets: Vec<String>,
    pub corpus_seed: u64,
    pub pretrain_high: usize,
    pub pretrain_low: usize,
    /// Low-resource pretraining pairs the teacher sees.
    pub teacher_pretrain_low: usize,
    pub pretrain_out_fraction: f64,
    pub finetune_size: usize,
    pub validation: usize,
    pub test: usize,
    pub domain: DomainParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_languages: 8,
            low_resource: vec!["l7".into()],
            targets: vec!["l7".into()],
            corpus_seed: 1,
            pretrain_high: 2000,
            pretrain_low: 200,
            teacher_pretrain_low: 2000,
            pretrain_out_fraction: 0.5,
            finetune_size: 300,
            validation: 100,
            test: 200,
            domain: DomainParams::default(),
        }
    }
}

/// Default shape of one of the two pretrained models.
pub trait ShapeDefaults {
    const D_MODEL: usize;
    const LAYERS: usize;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Student;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Teacher;

impl ShapeDefaults for Student {
    const D_MODEL: usize = 32;
    const LAYERS: usize = 2;
}

impl ShapeDefaults for Teacher {
    const D_MODEL: usize = 64;
    const LAYERS: usize = 4;
}

/// Transformer shape; `K` only selects the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound = "K: ShapeDefaults")]
pub struct ModelShape<K> {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    #[serde(skip)]
    kind: PhantomData<K>,
}

pub type StudentShape = ModelShape<Student>;
pub type TeacherShape = ModelShape<Teacher>;

impl<K: ShapeDefaults> Default for ModelShape<K> {
    fn default() -> Self {
        Self {
            d_model: K::D_MODEL,
            n_heads: 4,
            d_ff: 4 * K::D_MODEL,
            n_enc_layers: K::LAYERS,
            n_dec_layers: K::LAYERS,
            max_seq_len: 32,
            lora_rank: 16,
            lora_alpha: 32.0,
            kind: PhantomData,
        }
    }
}

impl<K> ModelShape<K> {
    pub fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            ..vocab.model_config(
                self.d_model,
                self.n_heads,
                self.d_ff,
                self.n_enc_layers,
                self.n_dec_layers,
                self.max_seq_len,
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub student_epochs: usize,
    pub teacher_epochs: usize,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub optimizer: OptimizerKind,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            student_epochs: 5,
            teacher_epochs: 4,
            lr_peak: 3e-3,
            warmup_epochs: 1,
            batch_size: 16,
            label_smoothing: 0.1,
            optimizer: OptimizerKind::Adam,
            grad_clip: 1.0,
            seed: 1,
        }
    }
}

impl PretrainConfig {
    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            lr_peak: self.lr_peak,
            warmup_epochs: self.warmup_epochs,
            batch_size: self.batch_size,
            label_smoothing: self.label_smoothing,
            kd_kind: KdKind::None,
            regime: Regime::Ft,
            optimizer: self.optimizer,
            grad_clip: self.grad_clip,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeList {
    pub regimes: Vec<Regime>,
}

impl Default for RegimeList {
    fn default() -> Self {
        Self {
            regimes: Regime::ALL.to_vec(),
        }
    }
}

fn routed() -> RegimeList {
    RegimeList {
        regimes: vec![Regime::ClsrFt, Regime::DistilWhisper],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SizeConfig {
    pub sizes: Vec<usize>,
    pub regimes: Vec<Regime>,
}

impl Default for SizeConfig {
    fn default() -> Self {
        Self {
            sizes: vec![100, 300, 1000],
            regimes: routed().regimes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    pub kinds: Vec<KdKind>,
    pub temperatures: Vec<f64>,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            kinds: vec![KdKind::Js, KdKind::Kl],
            temperatures: vec![1.0, 3.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pipeline: Pipeline,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub student: StudentShape,
    #[serde(default)]
    pub teacher: TeacherShape,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: TrainConfig,
    #[serde(default)]
    pub matrix: RegimeList,
    #[serde(default = "routed")]
    pub gates: RegimeList,
    #[serde(default)]
    pub sizes: SizeConfig,
    #[serde(default)]
    pub kd: KdConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_workers() -> usize {
    1
}

/// 1-based line of `key` inside `[section]` (top level when `None`).
fn locate(source: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    let mut header = None;
    for (i, line) in source.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = Some(name.trim().to_string());
            if current.as_deref() == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current.as_deref() == section {
            if let Some(rest) = t.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}

struct Issue {
    section: Option<&'static str>,
    key: &'static str,
    message: String,
}

fn issue(section: Option<&'static str>, key: &'static str, message: impl Into<String>) -> Issue {
    Issue {
        section,
        key,
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses and validates; errors carry `origin:line:` anchors.
    pub fn parse(source: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(source).map_err(|e| Error::Config(format!("{origin}: {}", e.to_string().trim_end())))?;
        if let Err(i) = cfg.check() {
            let place = match locate(source, i.section, i.key) {
                Some(line) => format!("{origin}:{line}"),
                None => origin.to_string(),
            };
            let key = match i.section {
                Some(s) => format!("{s}.{}", i.key),
                None => i.key.to_string(),
            };
            return Err(Error::Config(format!("{place}: {key}: {}", i.message)));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let source = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: cannot read config: {e}", path.display())))?;
        Self::parse(&source, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|i| Error::Config(format!("{}: {}", i.key, i.message)))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn languages(&self) -> Vec<String> {
        language_ids(self.data.n_languages)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint_dir.clone().unwrap_or_else(|| self.output_dir.join("checkpoints"))
    }

    fn check(&self) -> std::result::Result<(), Issue> {
        if self.seeds.is_empty() {
            return Err(issue(None, "seeds", "at least one seed is required"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(issue(None, "seeds", "seeds must be distinct"));
        }
        if self.workers == 0 {
            return Err(issue(None, "workers", "must be at least 1"));
        }
        let d = &self.data;
        let data = Some("data");
        if d.n_languages == 0 {
            return Err(issue(data, "n_languages", "must be at least 1"));
        }
        let langs = self.languages();
        for (key, list) in [("low_resource", &d.low_resource), ("targets", &d.targets)] {
            if let Some(l) = list.iter().find(|l| !langs.contains(l)) {
                return Err(issue(data, key, format!("unknown language {l:?}; languages are l0 … l{}", d.n_languages - 1)));
            }
        }
        if d.targets.is_empty() {
            return Err(issue(data, "targets", "at least one target language is required"));
        }
        for (key, v) in [
            ("pretrain_high", d.pretrain_high),
            ("pretrain_low", d.pretrain_low),
            ("teacher_pretrain_low", d.teacher_pretrain_low),
            ("finetune_size", d.finetune_size),
            ("validation", d.validation),
            ("test", d.test),
        ] {
            if v == 0 {
                return Err(issue(data, key, "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&d.pretrain_out_fraction) {
            return Err(issue(data, "pretrain_out_fraction", "must lie in [0, 1]"));
        }
        d.domain
            .validate()
            .map_err(|e| issue(Some("data.domain"), "length_range_in", e.to_string()))?;
        let vocab = Vocab::new(&langs);
        let student = self.student.model_config(&vocab);
        student.validate().map_err(|e| issue(Some("student"), "d_model", e.to_string()))?;
        self.teacher
            .model_config(&vocab)
            .validate()
            .map_err(|e| issue(Some("teacher"), "d_model", e.to_string()))?;
        let longest = d.domain.length_range_in.1.max(d.domain.length_range_out.1) + 2;
        if longest > self.student.max_seq_len || longest > self.teacher.max_seq_len {
            return Err(issue(
                Some("student"),
                "max_seq_len",
                format!("sequences reach {longest} positions; raise max_seq_len of both models"),
            ));
        }
        let pre = Some("pretrain");
        for (key, epochs) in [("student_epochs", self.pretrain.student_epochs), ("teacher_epochs", self.pretrain.teacher_epochs)] {
            self.pretrain
                .train_config(epochs)
                .validate()
                .map_err(|e| issue(pre, key, e.to_string()))?;
        }
        self.finetune
            .validate()
            .map_err(|e| issue(Some("finetune"), "epochs", e.to_string()))?;
        let uses_default_kd = match self.pipeline {
            Pipeline::FinetuneMatrix => self.matrix.regimes.contains(&Regime::DistilWhisper),
            Pipeline::GateAnalysis => self.gates.regimes.contains(&Regime::DistilWhisper),
            Pipeline::SizeAblation => self.sizes.regimes.contains(&Regime::DistilWhisper),
            _ => false,
        };
        if uses_default_kd && self.finetune.kd_kind == KdKind::None {
            return Err(issue(Some("finetune"), "kd_kind", "distilwhisper runs need kd_kind js or kl"));
        }
        let nonempty = |section: &'static str, list: &[Regime]| {
            if list.is_empty() {
                Err(issue(Some(section), "regimes", "at least one regime is required"))
            } else {
                Ok(())
            }
        };
        match self.pipeline {
            Pipeline::FinetuneMatrix => nonempty("matrix", &self.matrix.regimes)?,
            Pipeline::GateAnalysis => {
                nonempty("gates", &self.gates.regimes)?;
                if let Some(r) = self.gates.regimes.iter().find(|r| r.variant() != FfnVariant::Clsr) {
                    return Err(issue(Some("gates"), "regimes", format!("{} has no gates", r.name())));
                }
            }
            Pipeline::SizeAblation => {
                nonempty("sizes", &self.sizes.regimes)?;
                if self.sizes.sizes.is_empty() || self.sizes.sizes.contains(&0) {
                    return Err(issue(Some("sizes"), "sizes", "sizes must be a non-empty list of positive counts"));
                }
            }
            Pipeline::KdAblation => {
                if self.kd.kinds.is_empty() || self.kd.kinds.contains(&KdKind::None) {
                    return Err(issue(Some("kd"), "kinds", "kinds must be a non-empty list of js or kl"));
                }
                if self.kd.temperatures.is_empty() || self.kd.temperatures.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                    return Err(issue(Some("kd"), "temperatures", "temperatures must be a non-empty list of positive values"));
                }
            }
            Pipeline::Pretrain => {}
        }
        Ok(())
    }

    /// Fine-tuning runs the pipeline performs, in a fixed order.
    pub fn cells(&self) -> Vec<Cell> {
        let base_kd = self.finetune.kd_kind;
        let base_t = self.finetune.temperature;
        let mut plan: Vec<(Regime, KdKind, f64, usize)> = Vec::new();
        let with_kd = |r: Regime, size: usize| {
            if r == Regime::DistilWhisper {
                (r, base_kd, base_t, size)
            } else {
                (r, KdKind::None, base_t, size)
            }
        };
        let size = self.data.finetune_size;
        match self.pipeline {
            Pipeline::Pretrain => {}
            Pipeline::FinetuneMatrix => plan.extend(self.matrix.regimes.iter().map(|&r| with_kd(r, size))),
            Pipeline::GateAnalysis => plan.extend(self.gates.regimes.iter().map(|&r| with_kd(r, size))),
            Pipeline::SizeAblation => {
                for &n in &self.sizes.sizes {
                    plan.extend(self.sizes.regimes.iter().map(|&r| with_kd(r, n)));
                }
            }
            Pipeline::KdAblation => {
                for &k in &self.kd.kinds {
                    for &t in &self.kd.temperatures {
                        plan.push((Regime::DistilWhisper, k, t, size));
                    }
                }
            }
        }
        let mut cells = Vec::new();
        for language in &self.data.targets {
            for &(regime, kd_kind, temperature, size) in &plan {
                for &seed in &self.seeds {
                    cells.push(Cell {
                        regime,
                        kd_kind,
                        temperature,
                        language: language.clone(),
                        size,
                        seed,
                    });
                }
            }
        }
        cells
    }

    fn plan(&self, teacher: bool, finetune_pool: usize) -> CorpusPlan {
        let d = &self.data;
        let low = if teacher { d.teacher_pretrain_low } else { d.pretrain_low };
        let sizes = self
            .languages()
            .into_iter()
            .map(|l| {
                let pretrain = if d.low_resource.contains(&l) { low } else { d.pretrain_high };
                let finetune = if d.targets.contains(&l) { finetune_pool } else { 0 };
                let eval = if d.targets.contains(&l) { (d.validation, d.test) } else { (0, 0) };
                (
                    l,
                    RoleSizes {
                        pretrain,
                        finetune,
                        validation: eval.0,
                        test_in: eval.1,
                        test_out: eval.1,
                    },
                )
            })
            .collect();
        CorpusPlan::new(sizes, d.pretrain_out_fraction)
    }

    fn finetune_pool(&self) -> usize {
        let mut n = self.data.finetune_size;
        if self.pipeline == Pipeline::SizeAblation {
            n = n.max(self.sizes.sizes.iter().copied().max().unwrap_or(0));
        }
        n
    }
}

/// One fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub regime: Regime,
    pub kd_kind: KdKind,
    pub temperature: f64,
    pub language: String,
    pub size: usize,
    pub seed: u64,
}

pub fn kd_name(k: KdKind) -> &'static str {
    match k {
        KdKind::Js => "js",
        KdKind::Kl => "kl",
        KdKind::None => "none",
    }
}

impl Cell {
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            regime: self.regime,
            kd_kind: self.kd_kind,
            temperature: self.temperature,
            seed: self.seed,
            ..base.clone()
        }
    }

    pub fn file_name(&self) -> String {
        format!(
            "{}-{}-t{}-{}-n{}-s{}.json",
            self.regime.name(),
            kd_name(self.kd_kind),
            self.temperature,
            self.language,
            self.size,
            self.seed
        )
    }
}

/// WER of a pretrained model before any fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    /// `student` or `teacher`.
    pub model: String,
    pub language: String,
    pub wer: BTreeMap<String, f64>,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub student: PretrainReport,
    pub teacher: PretrainReport,
}

/// Everything `report` needs from a run directory.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub baselines: Vec<Baseline>,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug)]
pub struct Outcome {
    pub records: Vec<RunRecord>,
    pub baselines: Vec<Baseline>,
    pub verdicts: Vec<Verdict>,
    pub summary_csv: String,
    pub report: String,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(Error::from)
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

struct Pretrained {
    student: Checkpoint,
    teacher: Checkpoint,
    summary: PretrainSummary,
}

#[derive(Serialize)]
struct Fingerprint<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    plan: &'a CorpusPlan,
    domain: &'a DomainParams,
    corpus_seed: u64,
}

fn pretrained(cfg: &ExperimentConfig, name: &str, model: &ModelConfig, train: &TrainConfig, plan: &CorpusPlan) -> Result<(Checkpoint, PretrainReport)> {
    let dir = cfg.checkpoint_dir();
    fs::create_dir_all(&dir)?;
    let ckpt_path = dir.join(format!("{name}.ckpt"));
    let meta_path = dir.join(format!("{name}.json"));
    let mut plan = plan.clone();
    // fine-tuning and evaluation roles do not affect pretraining
    for s in plan.sizes.values_mut() {
        *s = RoleSizes { pretrain: s.pretrain, ..RoleSizes::default() };
    }
    let fingerprint = serde_json::to_string(&Fingerprint {
        model,
        train,
        plan: &plan,
        domain: &cfg.data.domain,
        corpus_seed: cfg.data.corpus_seed,
    })?;
    #[derive(Serialize, Deserialize)]
    struct Meta {
        fingerprint: String,
        report: PretrainReport,
    }
    if let (Ok(meta), Ok(ckpt)) = (fs::read_to_string(&meta_path), Checkpoint::load(&ckpt_path)) {
        if let Ok(meta) = serde_json::from_str::<Meta>(&meta) {
            if meta.fingerprint == fingerprint && &ckpt.config == model {
                log::info!("reusing {}", ckpt_path.display());
                return Ok((ckpt, meta.report));
            }
        }
    }
    log::info!("pretraining {name}");
    let specs = make_language_set(&cfg.languages(), cfg.data.corpus_seed, &cfg.data.domain);
    let corpus = build_corpus(&specs, &plan)?;
    let vocab = Vocab::new(&cfg.languages());
    let (ckpt, report) = pretrain(model, &corpus.split(Role::Pretrain).examples, &vocab, train)?;
    ckpt.save(&ckpt_path)?;
    write(&meta_path, &json(&Meta { fingerprint, report: report.clone() })?)?;
    Ok((ckpt, report))
}

fn ensure_pretrained(cfg: &ExperimentConfig, vocab: &Vocab) -> Result<Pretrained> {
    let (student, s_report) = pretrained(
        cfg,
        "student",
        &cfg.student.model_config(vocab),
        &cfg.pretrain.train_config(cfg.pretrain.student_epochs),
        &cfg.plan(false, 0),
    )?;
    let (teacher, t_report) = pretrained(
        cfg,
        "teacher",
        &cfg.teacher.model_config(vocab),
        &cfg.pretrain.train_config(cfg.pretrain.teacher_epochs),
        &cfg.plan(true, 0),
    )?;
    Ok(Pretrained {
        student,
        teacher,
        summary: PretrainSummary {
            student: s_report,
            teacher: t_report,
        },
    })
}

fn baselines(cfg: &ExperimentConfig, pre: &Pretrained, corpus: &Corpus, vocab: &Vocab) -> Result<Vec<Baseline>> {
    let mut out = Vec::new();
    for (name, ckpt) in [("student", &pre.student), ("teacher", &pre.teacher)] {
        let model = ckpt.to_model()?;
        for language in &cfg.data.targets {
            let mut wer = BTreeMap::new();
            for (split, role) in [("test_in", Role::TestIn), ("test_out", Role::TestOut)] {
                let examples = corpus.split(role).for_language(language);
                wer.insert(split.to_string(), evaluate_wer(&model, &examples, language, vocab)?.wer);
            }
            out.push(Baseline {
                model: name.into(),
                language: language.clone(),
                wer,
                params: model.store().numel(),
            });
        }
    }
    Ok(out)
}

/// Runs `f` over `items` on up to `workers` threads; results keep input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every item ran")).collect()
}

/// Executes the configured pipeline and writes every artifact into
/// `cfg.output_dir`. A runtime failure leaves a `FAILED` marker next to
/// whatever was already written.
pub fn run(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let marker = out.join("FAILED");
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let result = run_inner(cfg);
    if let Err(e) = &result {
        let _ = fs::write(&marker, format!("{e}\n"));
    }
    result
}

fn run_inner(cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = &cfg.output_dir;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    for stale in ["summary.csv", "report.txt"] {
        let p = out.join(stale);
        if p.exists() {
            fs::remove_file(p)?;
        }
    }
    let runs = out.join("runs");
    if runs.exists() {
        fs::remove_dir_all(&runs)?;
    }
    fs::create_dir_all(&runs)?;

    let languages = cfg.languages();
    let vocab = Vocab::new(&languages);
    let pre = ensure_pretrained(cfg, &vocab)?;
    write(&out.join("pretrain.json"), &json(&pre.summary)?)?;

    let specs = make_language_set(&languages, cfg.data.corpus_seed, &cfg.data.domain);
    let corpus = build_corpus(&specs, &cfg.plan(false, cfg.finetune_pool()))?;
    let base = baselines(cfg, &pre, &corpus, &vocab)?;
    write(&out.join("baselines.json"), &json(&base)?)?;

    let cells = cfg.cells();
    log::info!("{}: {} fine-tuning runs on {} workers", cfg.pipeline.name(), cells.len(), cfg.workers);
    let results = parallel_map(&cells, cfg.workers, |cell| -> Result<RunRecord> {
        let data = FinetuneData::from_corpus(&corpus, &cell.language, cell.size)?;
        let train = cell.train_config(&cfg.finetune);
        let teacher = (cell.kd_kind != KdKind::None).then_some(&pre.teacher);
        let outcome = finetune(&pre.student, teacher, &cell.language, &data, &vocab, &train)?;
        outcome.record.save(runs.join(cell.file_name()))?;
        log::info!(
            "{} wer in {:.4} out {:.4}",
            cell.file_name(),
            outcome.record.wer["test_in"],
            outcome.record.wer["test_out"]
        );
        Ok(outcome.record)
    });
    let mut records = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (cell, r) in cells.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(format!("{}: {e}", cell.file_name())),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Contract(format!("{} run(s) failed: {}", failures.len(), failures.join("; "))));
    }

    let artifacts = RunArtifacts {
        config: cfg.clone(),
        baselines: base,
        records,
    };
    let (summary_csv, verdicts, report) = analyse(&artifacts)?;
    write(&out.join("summary.csv"), &summary_csv)?;
    write(&out.join("report.txt"), &report)?;
    Ok(Outcome {
        records: artifacts.records,
        baselines: artifacts.baselines,
        verdicts,
        summary_csv,
        report,
    })
}

/// Reads a run directory written by [`run`].
pub fn load_artifacts(dir: impl AsRef<Path>) -> Result<RunArtifacts> {
    let dir = dir.as_ref();
    let config = ExperimentConfig::load(dir.join("config.toml"))?;
    let baselines = match fs::read_to_string(dir.join("baselines.json")) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => Vec::new(),
    };
    let mut paths: Vec<PathBuf> = match fs::read_dir(dir.join("runs")) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    paths.sort();
    let records = paths.iter().map(RunRecord::load).collect::<Result<Vec<_>>>()?;
    Ok(RunArtifacts {
        config,
        baselines,
        records,
    })
}

/// Cells that differ only by seed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct GroupKey {
    pub regime: Regime,
    pub kd: &'static str,
    /// Temperature bits; `f64` has no total order.
    pub temperature: u64,
    pub language: String,
    pub size: usize,
}

impl GroupKey {
    pub fn of(r: &RunRecord) -> Self {
        Self {
            regime: r.config.regime,
            kd: kd_name(r.config.kd_kind),
            temperature: r.config.temperature.to_bits(),
            language: r.language.clone(),
            size: r.finetune_size,
        }
    }

    pub fn temperature(&self) -> f64 {
        f64::from_bits(self.temperature)
    }

    pub fn label(&self) -> String {
        let mut s = self.regime.name().to_string();
        if self.kd != "none" {
            let _ = write!(s, " {} t={}", self.kd, self.temperature());
        }
        let _ = write!(s, " {} n={}", self.language, self.size);
        s
    }
}

/// Mean, std and interval of one metric; std and interval are absent for a
/// single run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub spread: Option<(f64, f64, f64)>,
}

fn stat_of(records: &[&RunRecord], metric: &str) -> Result<Option<Stat>> {
    if records.len() >= 2 {
        let owned: Vec<RunRecord> = records.iter().map(|r| (*r).clone()).collect();
        let agg = multi_seed_aggregate(&owned)?;
        return Ok(agg.get(metric).map(|m| Stat {
            n: m.n,
            mean: m.mean,
            spread: Some((m.std, m.ci_low, m.ci_high)),
        }));
    }
    let r = records[0];
    let v = match metric.split_once('.') {
        Some(("wer", split)) => r.wer.get(split).copied(),
        Some(("gate", split)) => r.gate_usage.get(split).map(|g| g.ratio),
        _ => None,
    };
    Ok(v.map(|mean| Stat { n: 1, mean, spread: None }))
}

pub fn group(records: &[RunRecord]) -> BTreeMap<GroupKey, Vec<&RunRecord>> {
    let mut groups: BTreeMap<GroupKey, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(GroupKey::of(r)).or_default().push(r);
    }
    for v in groups.values_mut() {
        v.sort_by_key(|r| r.seed);
    }
    groups
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Builds the summary CSV, the invariant verdicts and the report text.
pub fn analyse(a: &RunArtifacts) -> Result<(String, Vec<Verdict>, String)> {
    let groups = group(&a.records);
    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    let mut text = String::new();
    let _ = writeln!(text, "pipeline {}", a.config.pipeline.name());
    let _ = writeln!(text, "runs {}", a.records.len());
    let _ = writeln!(text);
    let _ = writeln!(text, "pretrained models");
    for b in &a.baselines {
        let label = if b.model == "student" { "pretrained-student" } else { b.model.as_str() };
        for split in SPLITS {
            let Some(&w) = b.wer.get(split) else { continue };
            let _ = writeln!(csv, "{label},none,,{},,{split},1,{},,,,,,{},,", b.language, num(w), b.params);
            let _ = writeln!(text, "  {label} {} {split}: wer {}", b.language, num(w));
        }
    }
    let _ = writeln!(text);
    let _ = writeln!(text, "fine-tuned (mean ± std [95% interval])");
    let mut stats: BTreeMap<(GroupKey, String), Stat> = BTreeMap::new();
    for (key, recs) in &groups {
        let params = &recs[0].params;
        let overhead = params.overhead.as_ref().map(|o| o.ratio);
        for split in SPLITS {
            let Some(w) = stat_of(recs, &format!("wer.{split}"))? else { continue };
            let gate = stat_of(recs, &format!("gate.{split}"))?;
            let t = if key.kd == "none" { String::new() } else { key.temperature().to_string() };
            let _ = writeln!(
                csv,
                "{},{},{t},{},{},{split},{},{},{},{},{},{},{},{},{},{}",
                key.regime.name(),
                key.kd,
                key.language,
                key.size,
                w.n,
                num(w.mean),
                opt(w.spread.map(|s| s.0)),
                opt(w.spread.map(|s| s.1)),
                opt(w.spread.map(|s| s.2)),
                opt(gate.map(|g| g.mean)),
                opt(gate.and_then(|g| g.spread.map(|s| s.0))),
                params.total,
                params.trainable,
                opt(overhead),
            );
            let mut line = format!("  {} {split}: wer {}", key.label(), num(w.mean));
            if let Some((sd, lo, hi)) = w.spread {
                let _ = write!(line, " ± {} [{}, {}]", num(sd), num(lo), num(hi));
            }
            if let Some(g) = gate {
                let _ = write!(line, "; gate {}", num(g.mean));
                if let Some((sd, _, _)) = g.spread {
                    let _ = write!(line, " ± {}", num(sd));
                }
            }
            let _ = write!(line, " ({} runs)", w.n);
            let _ = writeln!(text, "{line}");
            stats.insert((key.clone(), format!("wer.{split}")), w);
        }
    }
    let verdicts = invariants(a, &groups, &stats);
    let _ = writeln!(text);
    let _ = writeln!(text, "invariants");
    if verdicts.is_empty() {
        let _ = writeln!(text, "  none applicable");
    }
    for v in &verdicts {
        let _ = writeln!(text, "  {} {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.name, v.detail);
    }
    Ok((csv, verdicts, text))
}

fn invariants(a: &RunArtifacts, groups: &BTreeMap<GroupKey, Vec<&RunRecord>>, stats: &BTreeMap<(GroupKey, String), Stat>) -> Vec<Verdict> {
    let cfg = &a.config;
    let mut out = Vec::new();
    let baseline = |model: &str, lang: &str, split: &str| {
        a.baselines
            .iter()
            .find(|b| b.model == model && b.language == lang)
            .and_then(|b| b.wer.get(split).copied())
    };
    let mean = |k: &GroupKey, split: &str| stats.get(&(k.clone(), format!("wer.{split}"))).map(|s| s.mean);
    let default_kd = kd_name(cfg.finetune.kd_kind);
    let default_t = cfg.finetune.temperature.to_bits();
    let is_default = |k: &GroupKey| k.size == cfg.data.finetune_size && (k.kd == "none" || (k.kd == default_kd && k.temperature == default_t));

    for language in &cfg.data.targets {
        for split in SPLITS {
            if let (Some(s), Some(t)) = (baseline("student", language, split), baseline("teacher", language, split)) {
                out.push(Verdict {
                    name: format!("teacher-beats-student[{language} {split}]"),
                    passed: t < s,
                    detail: format!("teacher {} vs student {}", num(t), num(s)),
                });
            }
        }
    }

    for (k, _) in groups.iter().filter(|(k, _)| is_default(k)) {
        if let (Some(s), Some(m)) = (baseline("student", &k.language, "test_out"), mean(k, "test_out")) {
            out.push(Verdict {
                name: format!("finetuning-helps[{}]", k.label()),
                passed: s > m,
                detail: format!("pretrained student {} vs fine-tuned mean {} (test_out)", num(s), num(m)),
            });
        }
    }

    for (k, _) in groups.iter().filter(|(k, _)| is_default(k) && k.regime == Regime::DistilWhisper) {
        let clsr = GroupKey {
            regime: Regime::ClsrFt,
            kd: "none",
            temperature: k.temperature,
            language: k.language.clone(),
            size: k.size,
        };
        if let (Some(d), Some(c)) = (mean(k, "test_out"), mean(&clsr, "test_out")) {
            out.push(Verdict {
                name: format!("distillation-helps[{} n={}]", k.language, k.size),
                passed: d <= c,
                detail: format!("distilwhisper {} vs clsr-ft {} (test_out)", num(d), num(c)),
            });
        }
    }

    let mut by_curve: BTreeMap<GroupKey, Vec<&GroupKey>> = BTreeMap::new();
    for k in groups.keys() {
        by_curve.entry(GroupKey { size: 0, ..k.clone() }).or_default().push(k);
    }
    for (curve, keys) in by_curve.iter().filter(|(_, v)| v.len() >= 2) {
        for split in SPLITS {
            let points: Vec<(usize, f64)> = keys.iter().filter_map(|k| mean(k, split).map(|m| (k.size, m))).collect();
            if points.len() < 2 {
                continue;
            }
            let ok = points.windows(2).all(|w| w[1].1 <= w[0].1);
            let shown: Vec<String> = points.iter().map(|(n, m)| format!("{n}:{}", num(*m))).collect();
            let mut label = curve.label();
            label.truncate(label.rfind(" n=").unwrap_or(label.len()));
            out.push(Verdict {
                name: format!("more-data-helps[{label} {split}]"),
                passed: ok,
                detail: shown.join(" "),
            });
        }
    }

    for (k, recs) in groups.iter().filter(|(k, _)| is_default(k)) {
        let strict = match k.regime {
            Regime::DistilWhisper => true,
            Regime::ClsrFt => false,
            _ => continue,
        };
        let pairs: Vec<(f64, f64)> = recs
            .iter()
            .filter_map(|r| Some((r.gate_usage.get("test_in")?.ratio, r.gate_usage.get("test_out")?.ratio)))
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let hits = pairs.iter().filter(|(i, o)| if strict { o > i } else { o >= i }).count();
        out.push(Verdict {
            name: format!("ood-uses-more-ls[{}]", k.label()),
            passed: 3 * hits >= 2 * pairs.len(),
            detail: format!(
                "test_out {} test_in in {hits} of {} seeds",
                if strict { ">" } else { ">=" },
                pairs.len()
            ),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locate_finds_keys_by_section() {
        let src = "pipeline = \"pretrain\"\nseeds = [1]\n\n[data]\nseeds_extra = 2\ntest = 4\n[data.domain]\nnoise_rate_in = 0.1\n";
        assert_eq!(locate(src, None, "seeds"), Some(2));
        assert_eq!(locate(src, Some("data"), "test"), Some(6));
        assert_eq!(locate(src, Some("data"), "validation"), Some(4));
        assert_eq!(locate(src, Some("data.domain"), "noise_rate_in"), Some(8));
        assert_eq!(locate(src, Some("kd"), "kinds"), None);
    }

    #[test]
    fn pools_cover_the_largest_size() {
        let cfg = ExperimentConfig::parse("pipeline = \"size-ablation\"\n", "x").unwrap();
        assert_eq!(cfg.finetune_pool(), 1000);
        let p = cfg.plan(true, 1000);
        assert_eq!(p.sizes["l7"].pretrain, 2000);
        assert_eq!(p.sizes["l0"].finetune, 0);
        assert_eq!(cfg.plan(false, 0).sizes["l7"].pretrain, 200);
    }
}
