//! Decentralized edge training.
//!
//! Each step picks one edge uniformly, samples its source batches plus one
//! target batch shared by every edge, and descends
//! `csa + α₁λ(dda + tcc) + α₂λ·tsd` with plain SGD.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{ClassTokenTable, DualEncoder};
use crate::error::{Error, Result};
use crate::losses::{
    class_probabilities, cosine_logits_graph, csa_annotated_graph, csa_target_graph, generate_pseudo_labels,
    lambda_schedule, mmd_squared_graph, tcc_graph, total_loss_graph, tsd_graph, ClassProbabilities, KernelSpec,
    LossWeights, PseudoLabelBatch,
};
use crate::prompt::{BoundStack, Direction, PromptStack, StackGradients};
use crate::synth::{sample_batch, sample_indices, DomainFewShotSplit, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateScope {
    /// Every stack receives the gradient of the full objective.
    #[default]
    AllStacks,
    /// Only the chosen edge's stack moves.
    ChosenEdgeOnly,
}

/// Which optional terms enter the objective. CSA is always on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSwitches {
    pub dda: bool,
    pub tcc: bool,
    pub tsd: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self { dda: true, tcc: true, tsd: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub learning_rate: f64,
    pub n_a: usize,
    pub n_u: usize,
    pub n_t: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub threshold: f64,
    /// Derived from the experiment seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub direction: Direction,
    #[serde(default)]
    pub update_scope: UpdateScope,
    #[serde(default)]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub losses: LossSwitches,
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            epochs: 20,
            iterations_per_epoch: 25,
            learning_rate: 0.003,
            n_a: 4,
            n_u: 16,
            n_t: 16,
            alpha1: 0.1,
            alpha2: 0.01,
            threshold: 0.8,
            seed: 0,
            direction: Direction::VisionToText,
            update_scope: UpdateScope::AllStacks,
            kernel: KernelSpec::median(),
            losses: LossSwitches::default(),
        }
    }

    pub fn paper() -> Self {
        Self { epochs: 50, iterations_per_epoch: 100, n_a: 4, n_u: 64, n_t: 64, ..Self::toy() }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.iterations_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("train.learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.n_a == 0 {
            return Err(Error::Config("train.n_a must be >= 1".into()));
        }
        if self.n_t == 0 {
            return Err(Error::Config("train.n_t must be >= 1".into()));
        }
        if self.losses.dda && (self.n_u < 2 || self.n_t < 2) {
            return Err(Error::Config("train.n_u and train.n_t must be >= 2 when dda is enabled".into()));
        }
        if !(self.alpha1 >= 0.0) || !(self.alpha2 >= 0.0) {
            return Err(Error::Config("train.alpha1 and train.alpha2 must be >= 0".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("train.threshold must lie in (0, 1), got {}", self.threshold)));
        }
        self.kernel.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeState {
    pub domain_id: u32,
    pub stack: PromptStack,
    /// Number of steps on which this edge was chosen.
    pub steps: usize,
}

/// Fresh edges, one per source split, with per-domain initialization seeds.
pub fn init_edges(encoder: &DualEncoder, sources: &[DomainFewShotSplit], config: &TrainConfig) -> Result<Vec<EdgeState>> {
    sources
        .iter()
        .map(|s| {
            let seed = config.seed ^ (u64::from(s.domain_id) + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            Ok(EdgeState {
                domain_id: s.domain_id,
                stack: PromptStack::init(encoder.config(), config.direction, s.domain_id, seed)?,
                steps: 0,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub edge: usize,
    pub domain_id: u32,
    pub lambda: f64,
    pub csa_annotated: f64,
    pub csa_target: f64,
    pub csa: f64,
    pub dda: Option<f64>,
    pub tcc: Option<f64>,
    pub tsd: Option<f64>,
    pub total: f64,
    pub qualified: usize,
    /// Terms present in the objective, e.g. `["csa", "dda"]`.
    pub terms: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackChecksum {
    pub domain_id: u32,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub checksums: Vec<StackChecksum>,
}

impl TrainLog {
    /// One JSON object per step, then a final `{"final_checksums": [...]}` line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r)?).expect("write to String");
        }
        let summary = serde_json::json!({ "final_checksums": self.checksums });
        writeln!(out, "{summary}").expect("write to String");
        Ok(out)
    }
}

/// Zero-shot class probabilities: unprompted image and text forwards.
pub fn zero_shot_probabilities(encoder: &DualEncoder, table: &ClassTokenTable, images: &[&[f32]]) -> Result<ClassProbabilities> {
    let z = encoder.encode_images(images, None)?;
    let w = encoder.encode_text_all(table, None)?;
    class_probabilities(&z, &w, encoder.temperature())
}

/// Everything a step reads but never writes.
pub struct Trainer<'a> {
    encoder: &'a DualEncoder,
    table: &'a ClassTokenTable,
    sources: &'a [DomainFewShotSplit],
    target: &'a [Image],
    config: TrainConfig,
    pseudo: PseudoLabelBatch,
}

/// Loss nodes of one step's tape.
struct StepGraph {
    g: Graph,
    bound: Vec<Option<BoundStack>>,
    csa_a: Var,
    csa_t: Var,
    csa: Var,
    dda: Option<Var>,
    tcc: Option<Var>,
    tsd: Option<Var>,
    total: Var,
}

impl<'a> Trainer<'a> {
    /// Validates the setup and caches pseudo-labels for the whole target pool.
    pub fn new(
        encoder: &'a DualEncoder,
        table: &'a ClassTokenTable,
        sources: &'a [DomainFewShotSplit],
        target: &'a [Image],
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if sources.is_empty() {
            return Err(Error::Config("at least one source domain is required".into()));
        }
        if target.len() < config.n_t {
            return Err(Error::Sampling(format!("target batch of {} exceeds pool of {}", config.n_t, target.len())));
        }
        for s in sources {
            if s.num_classes != table.num_classes() {
                return Err(Error::Config(format!(
                    "domain {} has K = {} but the class table has {}",
                    s.domain_id,
                    s.num_classes,
                    table.num_classes()
                )));
            }
        }
        let images: Vec<&[f32]> = target.iter().map(Vec::as_slice).collect();
        let zs = zero_shot_probabilities(encoder, table, &images)?;
        let pseudo = generate_pseudo_labels(&zs, config.threshold)?;
        Ok(Self { encoder, table, sources, target, config, pseudo })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn pseudo_labels(&self) -> &PseudoLabelBatch {
        &self.pseudo
    }

    fn check_edges(&self, edges: &[EdgeState]) -> Result<()> {
        if edges.len() != self.sources.len() {
            return Err(Error::Config(format!("{} edges for {} source domains", edges.len(), self.sources.len())));
        }
        for (e, s) in edges.iter().zip(self.sources) {
            if e.domain_id != s.domain_id || e.stack.domain_id != s.domain_id {
                return Err(Error::Config(format!("edge for domain {} paired with split {}", e.domain_id, s.domain_id)));
            }
            e.stack.check_compatible(self.encoder.config())?;
        }
        Ok(())
    }

    fn build(&self, edges: &[EdgeState], chosen: usize, annotated: &[usize], unannotated: &[usize], target: &[usize], lambda: f64) -> Result<StepGraph> {
        let m = edges.len();
        let cfg = &self.config;
        let split = &self.sources[chosen];
        let temp = self.encoder.temperature();
        let mut g = Graph::new();
        let enc = self.encoder.bind(&mut g, false);
        let table = self.table.bind(&mut g, false);
        let cross = m >= 2 && (cfg.losses.tcc || cfg.losses.tsd);
        let bound: Vec<Option<BoundStack>> = edges
            .iter()
            .enumerate()
            .map(|(e, edge)| {
                let needed = e == chosen || cross;
                let trainable = e == chosen || cfg.update_scope == UpdateScope::AllStacks;
                needed.then(|| edge.stack.bind(&mut g, trainable))
            })
            .collect();

        let target_imgs: Vec<&[f32]> = target.iter().map(|&i| self.target[i].as_slice()).collect();
        let mut texts = vec![None; m];
        let mut target_logits = vec![None; m];
        for e in 0..m {
            if let Some(bs) = &bound[e] {
                let w = enc.text_all(&mut g, &table, Some(bs))?;
                let z = enc.images(&mut g, &target_imgs, Some(bs))?;
                let l = cosine_logits_graph(&mut g, z, w, temp)?;
                texts[e] = Some((w, z));
                target_logits[e] = Some(l);
            }
        }
        let bs = bound[chosen].as_ref().expect("chosen edge is bound");
        let (w_i, zt_i) = texts[chosen].expect("chosen edge is encoded");

        let ann_imgs: Vec<&[f32]> = annotated.iter().map(|&i| split.annotated[i].0.as_slice()).collect();
        let labels: Vec<usize> = annotated.iter().map(|&i| split.annotated[i].1).collect();
        let za = enc.images(&mut g, &ann_imgs, Some(bs))?;
        let la = cosine_logits_graph(&mut g, za, w_i, temp)?;
        let csa_a = csa_annotated_graph(&mut g, la, &labels)?;
        let pseudo = self.pseudo.subset(target);
        let csa_t = csa_target_graph(&mut g, target_logits[chosen].expect("chosen logits"), &pseudo)?;
        let csa = g.add(csa_a, csa_t);

        let dda = if cfg.losses.dda {
            let un_imgs: Vec<&[f32]> = unannotated.iter().map(|&i| split.unannotated[i].as_slice()).collect();
            let zu = enc.images(&mut g, &un_imgs, Some(bs))?;
            Some(mmd_squared_graph(&mut g, zu, zt_i, &cfg.kernel)?)
        } else {
            None
        };
        let (tcc, tsd) = if m >= 2 {
            let tcc = if cfg.losses.tcc {
                let probs: Vec<Var> = target_logits.iter().map(|l| g.softmax_rows(l.expect("bound"))).collect();
                Some(tcc_graph(&mut g, &probs)?)
            } else {
                None
            };
            let tsd = if cfg.losses.tsd {
                let ws: Vec<Var> = texts.iter().map(|t| t.expect("bound").0).collect();
                Some(tsd_graph(&mut g, &ws)?)
            } else {
                None
            };
            (tcc, tsd)
        } else {
            (None, None)
        };
        let weights = LossWeights { alpha1: cfg.alpha1, alpha2: cfg.alpha2, lambda };
        let total = total_loss_graph(&mut g, csa, dda, tcc, tsd, weights);
        Ok(StepGraph { g, bound, csa_a, csa_t, csa, dda, tcc, tsd, total })
    }

    /// One iteration. `step` is the 0-based global step used by the λ ramp.
    pub fn step<R: Rng + ?Sized>(&self, edges: &mut [EdgeState], rng: &mut R, step: usize, total_steps: usize) -> Result<StepRecord> {
        self.check_edges(edges)?;
        let cfg = &self.config;
        let chosen = rng.random_range(0..edges.len());
        let batch = sample_batch(&self.sources[chosen], cfg.n_a, cfg.n_u, rng)?;
        let target = sample_indices(self.target.len(), cfg.n_t, "target", rng)?;
        let lambda = lambda_schedule(step, total_steps);
        let sg = self.build(edges, chosen, &batch.annotated, &batch.unannotated, &target, lambda)?;
        let g = &sg.g;
        let mut terms = vec!["csa".to_string()];
        for (name, v) in [("dda", sg.dda), ("tcc", sg.tcc), ("tsd", sg.tsd)] {
            if v.is_some() {
                terms.push(name.into());
            }
        }
        let record = StepRecord {
            step,
            edge: chosen,
            domain_id: edges[chosen].domain_id,
            lambda,
            csa_annotated: g.scalar(sg.csa_a),
            csa_target: g.scalar(sg.csa_t),
            csa: g.scalar(sg.csa),
            dda: sg.dda.map(|v| g.scalar(v)),
            tcc: sg.tcc.map(|v| g.scalar(v)),
            tsd: sg.tsd.map(|v| g.scalar(v)),
            total: g.scalar(sg.total),
            qualified: self.pseudo.subset(&target).qualified(),
            terms,
        };
        if !record.total.is_finite() {
            return Err(Error::Aborted { step, reason: format!("non-finite loss {}", record.total), record: Box::new(record) });
        }
        let grads = g.backward(sg.total);
        for (e, bs) in sg.bound.iter().enumerate() {
            let Some(bs) = bs else { continue };
            if e != chosen && cfg.update_scope == UpdateScope::ChosenEdgeOnly {
                continue;
            }
            edges[e].stack.sgd_update(&bs.gradients(g, &grads), cfg.learning_rate)?;
        }
        for e in edges.iter() {
            if !e.stack.is_finite() {
                return Err(Error::Aborted {
                    step,
                    reason: format!("non-finite parameters in stack of domain {}", e.domain_id),
                    record: Box::new(record),
                });
            }
        }
        edges[chosen].steps += 1;
        Ok(record)
    }

    /// Runs `epochs × iterations_per_epoch` steps from a generator seeded by `config.seed`.
    pub fn train(&self, edges: &mut [EdgeState]) -> Result<TrainLog> {
        let total = self.config.total_steps();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7472_6169_6e);
        let mut log = TrainLog::default();
        for step in 0..total {
            log.records.push(self.step(edges, &mut rng, step, total)?);
        }
        log.checksums = edges.iter().map(|e| StackChecksum { domain_id: e.domain_id, sha256: e.stack.checksum() }).collect();
        Ok(log)
    }

    /// Loss values at a fixed batch, without updating anything.
    pub fn objective(&self, edges: &[EdgeState], chosen: usize, batch: &FixedBatch, lambda: f64) -> Result<ObjectiveTerms> {
        self.check_edges(edges)?;
        let sg = self.build(edges, chosen, &batch.annotated, &batch.unannotated, &batch.target, lambda)?;
        let g = &sg.g;
        Ok(ObjectiveTerms {
            csa: g.scalar(sg.csa),
            dda: sg.dda.map(|v| g.scalar(v)),
            tcc: sg.tcc.map(|v| g.scalar(v)),
            tsd: sg.tsd.map(|v| g.scalar(v)),
            total: g.scalar(sg.total),
        })
    }

    /// Gradient of one loss term w.r.t. every bound stack; `None` for stacks
    /// left out of the tape. Errors if the term is disabled.
    pub fn objective_gradients(
        &self,
        edges: &[EdgeState],
        chosen: usize,
        batch: &FixedBatch,
        lambda: f64,
        wrt: Term,
    ) -> Result<Vec<Option<StackGradients>>> {
        self.check_edges(edges)?;
        let sg = self.build(edges, chosen, &batch.annotated, &batch.unannotated, &batch.target, lambda)?;
        let root = match wrt {
            Term::Csa => Some(sg.csa),
            Term::Dda => sg.dda,
            Term::Tcc => sg.tcc,
            Term::Tsd => sg.tsd,
            Term::Total => Some(sg.total),
        }
        .ok_or_else(|| Error::Contract(format!("{wrt:?} is not part of this objective")))?;
        let grads = sg.g.backward(root);
        Ok(sg.bound.iter().map(|b| b.as_ref().map(|b| b.gradients(&sg.g, &grads))).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Csa,
    Dda,
    Tcc,
    Tsd,
    Total,
}

impl ObjectiveTerms {
    pub fn get(&self, term: Term) -> Option<f64> {
        match term {
            Term::Csa => Some(self.csa),
            Term::Dda => self.dda,
            Term::Tcc => self.tcc,
            Term::Tsd => self.tsd,
            Term::Total => Some(self.total),
        }
    }
}

/// Explicit batch indices, for evaluating the objective at a fixed point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedBatch {
    pub annotated: Vec<usize>,
    pub unannotated: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveTerms {
    pub csa: f64,
    pub dda: Option<f64>,
    pub tcc: Option<f64>,
    pub tsd: Option<f64>,
    pub total: f64,
}
