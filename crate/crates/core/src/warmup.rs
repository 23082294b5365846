//! Setup-time contrastive warm-up of the backbone and class table.
//!
//! A randomly initialized encoder has near-chance zero-shot accuracy, which
//! makes pseudo-labels meaningless. Before any prompt training, every encoder
//! and table tensor is fitted with Adam on a held-out labeled domain using the
//! same cosine/temperature classifier as inference. Optional label smoothing
//! keeps confidences on shifted data below saturation, so a pseudo-label
//! threshold still separates sure from unsure predictions. The results are
//! rounded to `f32` and then frozen for the rest of the experiment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{ClassTokenTable, DualEncoder, Towers};
use crate::error::{Error, Result};
use crate::losses::{cosine_logits_graph, csa_annotated_graph};
use crate::synth::{sample_indices, Image};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Weight of the uniform target mixed into the cross-entropy.
    #[serde(default)]
    pub label_smoothing: f64,
    /// Derived from the experiment seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && self.batch == 0 {
            return Err(Error::Config("encoder.warmup.batch must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("encoder.warmup.learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("encoder.warmup.label_smoothing must be in [0, 1)".into()));
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = Self::B1 * m.data()[i] + (1.0 - Self::B1) * gi;
                let vi = Self::B2 * v.data()[i] + (1.0 - Self::B2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Per-step warm-up loss values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WarmupReport {
    pub losses: Vec<f64>,
}

fn flatten(t: &Towers<Matrix>, table: &ClassTokenTable) -> Vec<Matrix> {
    let mut out = Vec::new();
    t.map(|_, m| out.push(m.clone()));
    out.push(table.template.clone());
    out.push(table.class_embed.clone());
    out
}

/// Fits `encoder` and `table` in place on `data`; weights end `f32`-exact.
pub fn warm_up(
    encoder: &mut DualEncoder,
    table: &mut ClassTokenTable,
    images: &[Image],
    labels: &[usize],
    config: &WarmupConfig,
) -> Result<WarmupReport> {
    config.validate()?;
    if images.len() != labels.len() || (config.steps > 0 && images.is_empty()) {
        return Err(Error::Config(format!("warm-up set has {} images and {} labels", images.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= table.num_classes()) {
        return Err(Error::Index { what: "warm-up label", index: bad, bound: table.num_classes() });
    }
    let mut params = flatten(encoder.weights(), table);
    let shapes: Vec<_> = params.iter().map(Matrix::shape).collect();
    let mut adam = Adam::new(&shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7761_726d);
    let mut report = WarmupReport::default();
    let temp = encoder.temperature();
    for _ in 0..config.steps {
        let idx = sample_indices(images.len(), config.batch.min(images.len()), "warm-up", &mut rng)?;
        let mut g = Graph::new();
        let bound = encoder.bind(&mut g, true);
        let bt = table.bind(&mut g, true);
        let imgs: Vec<&[f32]> = idx.iter().map(|&i| images[i].as_slice()).collect();
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let z = bound.images(&mut g, &imgs, None)?;
        let w = bound.text_all(&mut g, &bt, None)?;
        let logits = cosine_logits_graph(&mut g, z, w, temp)?;
        let ce = csa_annotated_graph(&mut g, logits, &batch_labels)?;
        let loss = if config.label_smoothing > 0.0 {
            let eps = config.label_smoothing;
            let ls = g.log_softmax_rows(logits);
            let total = g.sum(ls);
            let n = (batch_labels.len() * table.num_classes()) as f64;
            let uniform = g.scale(total, -eps / n);
            let ce = g.scale(ce, 1.0 - eps);
            g.add(ce, uniform)
        } else {
            ce
        };
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("warm-up loss became {value}")));
        }
        report.losses.push(value);
        let grads = g.backward(loss);
        let mut vars: Vec<Var> = Vec::new();
        bound.towers.map(|_, v| vars.push(*v));
        vars.push(bt.template);
        vars.push(bt.class_embed);
        let gm: Vec<Matrix> = vars
            .iter()
            .zip(&shapes)
            .map(|(&v, &(r, c))| grads.get(v).cloned().unwrap_or_else(|| Matrix::zeros(r, c)))
            .collect();
        adam.step(&mut params, &gm, config.learning_rate);
        install(encoder, table, &params, false);
    }
    install(encoder, table, &params, true);
    Ok(report)
}

fn install(encoder: &mut DualEncoder, table: &mut ClassTokenTable, params: &[Matrix], round: bool) {
    let fix = |m: &Matrix| if round { m.map(|v| v as f32 as f64) } else { m.clone() };
    let mut i = 0;
    let weights = encoder.weights().map(|_, _| {
        i += 1;
        fix(&params[i - 1])
    });
    encoder.set_weights(weights);
    table.template = fix(&params[i]);
    table.class_embed = fix(&params[i + 1]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::synth::{generate_domain, DomainShift, DomainSpec};
    use crate::trainer::zero_shot_probabilities;

    #[test]
    fn warm_up_lifts_zero_shot_accuracy() {
        let cfg = EncoderConfig::toy();
        let mut enc = DualEncoder::new(cfg.clone(), 1).unwrap();
        let mut table = ClassTokenTable::new(&cfg, 4, 1).unwrap();
        let spec = DomainSpec { domain_id: 0, shift: DomainShift::identity(), n_per_class: 10, image_size: 8 };
        let data = generate_domain(&spec, 4, 3).unwrap();
        let wc = WarmupConfig { steps: 40, batch: 16, learning_rate: 0.003, label_smoothing: 0.0, seed: 0 };
        let report = warm_up(&mut enc, &mut table, &data.images, &data.labels, &wc).unwrap();
        assert!(report.losses.last().unwrap() < &report.losses[0]);
        let imgs: Vec<&[f32]> = data.images.iter().map(Vec::as_slice).collect();
        let p = zero_shot_probabilities(&enc, &table, &imgs).unwrap();
        let acc = p.argmax.iter().zip(&data.labels).filter(|(a, b)| a == b).count() as f64 / data.len() as f64;
        assert!(acc > 0.5, "accuracy {acc}");
        assert!(enc.named_tensors().iter().all(|(_, m)| m.data().iter().all(|&v| v == v as f32 as f64)));
    }
}
