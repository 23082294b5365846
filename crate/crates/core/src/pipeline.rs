//! Experiment configuration and the file-based pipeline behind the CLI.
//!
//! Work directory layout:
//!
//! ```text
//! data/warmup/  data/source_<id>/  data/target/   dataset exports
//! encoder/                                         frozen checkpoint
//! uploads/domain_<id>.stack (+ .json)              trained prompt stacks
//! train_log.jsonl  metrics.json  features.csv  feature_stats.json
//! ```
//!
//! Every component seed is derived from the single top-level `seed`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{load_checkpoint, save_checkpoint, ClassTokenTable, DualEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::integration::{accuracy, load_uploads, Accuracy, Averaging, EnsembleModel, VarianceStats};
use crate::prompt::Direction;
use crate::synth::{
    export_split, generate_domain, import_split, make_few_shot_split, whole_dataset_split, DomainFewShotSplit, DomainShift,
    DomainSpec, SplitMode,
};
use crate::trainer::{init_edges, zero_shot_probabilities, TrainConfig, TrainLog, Trainer};
use crate::warmup::{warm_up, WarmupConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub domain_id: u32,
    pub shift: DomainShift,
    pub n_per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub split: SplitMode,
    pub warmup: DomainEntry,
    pub sources: Vec<DomainEntry>,
    pub target: DomainEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub architecture: EncoderConfig,
    pub warmup: WarmupConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub averaging: Averaging,
    #[serde(default = "default_true")]
    pub per_domain_features: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub encoder: EncoderSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected toy or paper)"))),
        }
    }
}

fn rotation_mix(deg: f64, mix: [[f64; 3]; 3], noise: f64) -> DomainShift {
    DomainShift { rotation_deg: deg, channel_mix: mix, noise_std: noise }
}

// Every task domain carries a roughly cyclic channel permutation absent from
// the warm-up domain, plus its own rotation and mixing leak.
const CYCLE_A: [[f64; 3]; 3] = [[0.05, 0.1, 0.85], [0.85, 0.05, 0.1], [0.1, 0.85, 0.05]];
const CYCLE_B: [[f64; 3]; 3] = [[0.1, 0.1, 0.8], [0.8, 0.1, 0.1], [0.1, 0.8, 0.1]];
const CYCLE_C: [[f64; 3]; 3] = [[0.15, 0.1, 0.75], [0.75, 0.15, 0.1], [0.1, 0.75, 0.15]];
const CYCLE_T: [[f64; 3]; 3] = [[0.1, 0.15, 0.75], [0.75, 0.1, 0.15], [0.15, 0.75, 0.1]];

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Toy => Self::toy(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn toy() -> Self {
        let entry = |domain_id, shift, n_per_class| DomainEntry { domain_id, shift, n_per_class };
        let mut c = Self {
            seed: 0,
            dataset: DatasetConfig {
                num_classes: 5,
                image_size: 8,
                split: SplitMode::Shots(2),
                warmup: entry(0, DomainShift::identity(), 40),
                sources: vec![
                    entry(1, rotation_mix(35.0, CYCLE_A, 0.05), 20),
                    entry(2, rotation_mix(55.0, CYCLE_B, 0.05), 20),
                    entry(3, rotation_mix(45.0, CYCLE_C, 0.05), 20),
                ],
                target: entry(4, rotation_mix(50.0, CYCLE_T, 0.05), 20),
            },
            encoder: EncoderSection {
                architecture: EncoderConfig::toy(),
                warmup: WarmupConfig { steps: 400, batch: 20, learning_rate: 0.003, label_smoothing: 0.1, seed: 0 },
            },
            train: TrainConfig::toy(),
            eval: EvalConfig { output_dir: PathBuf::from("umfda-out"), averaging: Averaging::Logits, per_domain_features: true },
        };
        c.apply_seed(0);
        c
    }

    /// Published hyperparameters at ViT-B/16 widths. Accepted and validated,
    /// but far beyond desk-scale runtime.
    pub fn paper() -> Self {
        let mut c = Self::toy();
        c.encoder.architecture = EncoderConfig::paper();
        c.dataset.image_size = 224;
        c.dataset.split = SplitMode::Fraction(0.03);
        for d in c.dataset.sources.iter_mut().chain([&mut c.dataset.target, &mut c.dataset.warmup]) {
            d.n_per_class = 80;
        }
        c.train = TrainConfig::paper();
        c.apply_seed(0);
        c
    }

    /// Parses JSON; unknown or missing fields are configuration errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.apply_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| e.in_file(path))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Sets the experiment seed and every seed derived from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = derive_seed(seed, Stream::Train);
        self.encoder.warmup.seed = derive_seed(seed, Stream::Warmup);
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.num_classes < 2 {
            return Err(Error::Config("dataset.num_classes must be >= 2".into()));
        }
        if d.sources.is_empty() {
            return Err(Error::Config("dataset.sources must list at least one domain".into()));
        }
        let mut ids: Vec<u32> = self.domains().map(|e| e.domain_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("dataset domain_ids must be unique".into()));
        }
        for e in self.domains() {
            self.spec(e).validate()?;
        }
        if let SplitMode::Fraction(f) = d.split {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("dataset.split.fraction must lie in (0, 1), got {f}")));
            }
        }
        self.encoder.architecture.validate()?;
        if self.encoder.architecture.image_size != d.image_size {
            return Err(Error::Config(format!(
                "dataset.image_size ({}) differs from encoder.architecture.image_size ({})",
                d.image_size, self.encoder.architecture.image_size
            )));
        }
        self.encoder.warmup.validate()?;
        self.train.validate()
    }

    fn domains(&self) -> impl Iterator<Item = &DomainEntry> {
        let d = &self.dataset;
        std::iter::once(&d.warmup).chain(&d.sources).chain(std::iter::once(&d.target))
    }

    fn spec(&self, e: &DomainEntry) -> DomainSpec {
        DomainSpec { domain_id: e.domain_id, shift: e.shift.clone(), n_per_class: e.n_per_class, image_size: self.dataset.image_size }
    }
}

#[derive(Clone, Copy)]
enum Stream {
    Data = 1,
    Split = 2,
    Encoder = 3,
    Table = 4,
    Warmup = 5,
    Train = 6,
}

/// SplitMix64 finalizer over `(seed, stream, salt)`.
fn mix(seed: u64, stream: u64, salt: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt.wrapping_mul(0xd6e8_feb8_6659_fd93);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, stream: Stream) -> u64 {
    mix(seed, stream as u64, 0)
}

fn domain_seed(seed: u64, stream: Stream, domain_id: u32) -> u64 {
    mix(seed, stream as u64, u64::from(domain_id) + 1)
}

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn warmup(&self) -> PathBuf {
        self.root.join("data/warmup")
    }

    pub fn source(&self, id: u32) -> PathBuf {
        self.root.join(format!("data/source_{id}"))
    }

    pub fn target(&self) -> PathBuf {
        self.root.join("data/target")
    }

    pub fn encoder(&self) -> PathBuf {
        self.root.join("encoder")
    }

    pub fn uploads(&self) -> PathBuf {
        self.root.join("uploads")
    }

    pub fn upload(&self, id: u32) -> PathBuf {
        self.uploads().join(format!("domain_{id}.stack"))
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn features(&self) -> PathBuf {
        self.root.join("features.csv")
    }

    pub fn feature_stats(&self) -> PathBuf {
        self.root.join("feature_stats.json")
    }

    /// Upload files in the uploads directory, sorted by name.
    pub fn existing_uploads(&self) -> Result<Vec<PathBuf>> {
        let dir = self.uploads();
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut out: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "stack"))
            .collect();
        out.sort();
        Ok(out)
    }
}

/// Generates and exports the warm-up, source and target domains.
pub fn synth(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let k = cfg.dataset.num_classes;
    let gen = |e: &DomainEntry| {
        let seed = domain_seed(cfg.seed, Stream::Data, e.domain_id);
        generate_domain(&cfg.spec(e), k, seed).map(|d| (d, seed))
    };
    let (warm, seed) = gen(&cfg.dataset.warmup)?;
    export_split(&layout.warmup(), &whole_dataset_split(&warm, true), &warm.spec, seed, 0, None)?;
    for e in &cfg.dataset.sources {
        let (data, seed) = gen(e)?;
        let split_seed = domain_seed(cfg.seed, Stream::Split, e.domain_id);
        let split = make_few_shot_split(&data, cfg.dataset.split, split_seed)?;
        export_split(&layout.source(e.domain_id), &split, &data.spec, seed, split_seed, Some(cfg.dataset.split))?;
    }
    let (target, seed) = gen(&cfg.dataset.target)?;
    export_split(&layout.target(), &whole_dataset_split(&target, false), &target.spec, seed, 0, None)?;
    Ok(())
}

fn load_split(dir: &Path, cfg: &ExperimentConfig) -> Result<DomainFewShotSplit> {
    if !dir.join("manifest.json").exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} has no dataset; run `synth` first", dir.display()),
        )));
    }
    let (split, _) = import_split(dir)?;
    if split.num_classes != cfg.dataset.num_classes || split.image_size != cfg.dataset.image_size {
        return Err(Error::Config(format!("{} was generated with a different K or image size", dir.display())));
    }
    Ok(split)
}

/// Builds the frozen backbone: seeded initialization plus warm-up.
pub fn build_encoder(cfg: &ExperimentConfig, warmup: &DomainFewShotSplit) -> Result<(DualEncoder, ClassTokenTable)> {
    let arch = cfg.encoder.architecture.clone();
    let mut enc = DualEncoder::new(arch.clone(), derive_seed(cfg.seed, Stream::Encoder))?;
    let mut table = ClassTokenTable::new(&arch, cfg.dataset.num_classes, derive_seed(cfg.seed, Stream::Table))?;
    let images: Vec<_> = warmup.annotated.iter().map(|(i, _)| i.clone()).collect();
    let labels: Vec<usize> = warmup.annotated.iter().map(|(_, l)| *l).collect();
    warm_up(&mut enc, &mut table, &images, &labels, &cfg.encoder.warmup)?;
    Ok((enc, table))
}

pub struct TrainOutcome {
    pub log: TrainLog,
    pub uploads: Vec<PathBuf>,
    pub encoder_sha256: String,
}

/// Builds and checkpoints the encoder, trains every edge and writes the uploads.
pub fn train(cfg: &ExperimentConfig, layout: &Layout) -> Result<TrainOutcome> {
    let warm = load_split(&layout.warmup(), cfg)?;
    let sources = cfg.dataset.sources.iter().map(|e| load_split(&layout.source(e.domain_id), cfg)).collect::<Result<Vec<_>>>()?;
    let target = load_split(&layout.target(), cfg)?;
    let (encoder, table) = build_encoder(cfg, &warm)?;
    save_checkpoint(&layout.encoder(), &encoder, &table)?;
    let before = encoder.checksum();

    let trainer = Trainer::new(&encoder, &table, &sources, &target.unannotated, cfg.train.clone())?;
    let mut edges = init_edges(&encoder, &sources, &cfg.train)?;
    let result = trainer.train(&mut edges);
    let log = match result {
        Ok(log) => log,
        Err(e) => {
            if let Error::Aborted { record, .. } = &e {
                fs::write(layout.root.join("abort_record.json"), serde_json::to_string_pretty(record)? + "\n")?;
            }
            return Err(e);
        }
    };
    if encoder.checksum() != before {
        return Err(Error::Contract("encoder weights changed during training".into()));
    }
    fs::create_dir_all(layout.uploads())?;
    for stale in layout.existing_uploads()? {
        fs::remove_file(&stale)?;
        let sidecar = stale.with_extension("stack.json");
        if sidecar.exists() {
            fs::remove_file(sidecar)?;
        }
    }
    let mut uploads = Vec::new();
    for e in &edges {
        let path = layout.upload(e.domain_id);
        e.stack.save(&path)?;
        uploads.push(path);
    }
    fs::write(layout.train_log(), log.to_jsonl()?)?;
    Ok(TrainOutcome { log, uploads, encoder_sha256: before })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackMetrics {
    pub domain_id: u32,
    pub sha256: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub num_classes: usize,
    pub target_domain: u32,
    pub target_count: usize,
    pub direction: Direction,
    pub averaging: Averaging,
    pub encoder_sha256: String,
    pub zero_shot: Accuracy,
    pub ensemble: Accuracy,
    /// `ensemble.overall - zero_shot.overall` in percentage points.
    pub improvement_pp: f64,
    pub stacks: Vec<StackMetrics>,
}

fn resolve_stacks(layout: &Layout, stacks: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let paths = if stacks.is_empty() { layout.existing_uploads()? } else { stacks.to_vec() };
    if paths.is_empty() {
        return Err(Error::Config("no prompt stack files given and none found in the uploads directory".into()));
    }
    Ok(paths)
}

/// Central integration on the target domain; writes `metrics.json`.
pub fn integrate(cfg: &ExperimentConfig, layout: &Layout, stacks: &[PathBuf]) -> Result<Metrics> {
    let paths = resolve_stacks(layout, stacks)?;
    let (encoder, table) = load_checkpoint(&layout.encoder())?;
    let target = load_split(&layout.target(), cfg)?;
    let loaded = load_uploads(&paths)?;
    let direction = loaded[0].direction;
    let model = EnsembleModel::new(&encoder, &table, loaded, cfg.eval.averaging)?;
    let images: Vec<&[f32]> = target.unannotated.iter().map(Vec::as_slice).collect();
    let labels = &target.unannotated_labels;
    let k = table.num_classes();

    let zs = zero_shot_probabilities(&encoder, &table, &images)?;
    let zero_shot = accuracy(&zs.argmax, labels, k)?;
    let ensemble = model.evaluate(&images, labels)?;
    let stacks = model
        .stacks()
        .iter()
        .map(|s| {
            let single = EnsembleModel::new(&encoder, &table, vec![s.clone()], cfg.eval.averaging)?;
            Ok(StackMetrics { domain_id: s.domain_id, sha256: s.checksum(), accuracy: single.evaluate(&images, labels)?.overall })
        })
        .collect::<Result<Vec<_>>>()?;
    let metrics = Metrics {
        num_classes: k,
        target_domain: target.domain_id,
        target_count: labels.len(),
        direction,
        averaging: cfg.eval.averaging,
        encoder_sha256: encoder.checksum(),
        improvement_pp: ((ensemble.overall - zero_shot.overall) * 1e8).round() / 1e6,
        zero_shot,
        ensemble,
        stacks,
    };
    fs::write(layout.metrics(), serde_json::to_string_pretty(&metrics)? + "\n")?;
    Ok(metrics)
}

/// Feature export on the target domain; writes `features.csv` and `feature_stats.json`.
pub fn export(cfg: &ExperimentConfig, layout: &Layout, stacks: &[PathBuf]) -> Result<Vec<VarianceStats>> {
    let paths = resolve_stacks(layout, stacks)?;
    let (encoder, table) = load_checkpoint(&layout.encoder())?;
    let target = load_split(&layout.target(), cfg)?;
    let model = EnsembleModel::new(&encoder, &table, load_uploads(&paths)?, cfg.eval.averaging)?;
    let images: Vec<&[f32]> = target.unannotated.iter().map(Vec::as_slice).collect();
    let table_out = model.export_features(&images, &target.unannotated_labels, cfg.eval.per_domain_features)?;
    fs::write(layout.features(), table_out.to_csv())?;
    fs::write(layout.feature_stats(), serde_json::to_string_pretty(&table_out.stats)? + "\n")?;
    Ok(table_out.stats)
}

/// `synth`, `train` and `integrate` in sequence.
pub fn run_all(cfg: &ExperimentConfig, layout: &Layout) -> Result<Metrics> {
    synth(cfg, layout)?;
    train(cfg, layout)?;
    integrate(cfg, layout, &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in [Preset::Toy, Preset::Paper] {
            let mut c = ExperimentConfig::preset(p);
            c.apply_seed(0);
            c.validate().unwrap();
            let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn schema_errors_name_the_field() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::toy().to_json().unwrap()).unwrap();
        v["dataset"].as_object_mut().unwrap().remove("num_classes");
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.is_config() && err.to_string().contains("num_classes"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::toy().to_json().unwrap()).unwrap();
        v["train"]["momentum"] = serde_json::json!(0.9);
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.is_config() && err.to_string().contains("momentum"), "{err}");
    }

    #[test]
    fn semantic_validation() {
        let mut c = ExperimentConfig::toy();
        c.dataset.target.domain_id = 1;
        assert!(c.validate().unwrap_err().is_config());
        let mut c = ExperimentConfig::toy();
        c.dataset.sources[0].shift.channel_mix = [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(c.validate().unwrap_err().is_config());
        let mut c = ExperimentConfig::toy();
        c.encoder.architecture.image_size = 16;
        assert!(c.validate().unwrap_err().is_config());
    }

    #[test]
    fn seeds_are_distinct_per_stream() {
        let a = derive_seed(7, Stream::Train);
        let b = derive_seed(7, Stream::Warmup);
        assert_ne!(a, b);
        assert_ne!(domain_seed(7, Stream::Data, 1), domain_seed(7, Stream::Data, 2));
        assert_eq!(a, derive_seed(7, Stream::Train));
    }
}
