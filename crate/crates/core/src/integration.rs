//! Central integration: uploaded stacks over the shared frozen encoder, with
//! predictions from the mean of per-domain logits. Nothing here trains.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_rows;
use crate::encoder::{ClassTokenTable, DualEncoder};
use crate::error::{Error, Result};
use crate::losses::cosine_logits;
use crate::prompt::PromptStack;
use crate::tensor::{argmax, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Logits,
    Probabilities,
}

#[derive(Clone, Debug)]
pub struct EnsembleModel<'a> {
    encoder: &'a DualEncoder,
    table: &'a ClassTokenTable,
    stacks: Vec<PromptStack>,
    averaging: Averaging,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Averaged logits, or averaged probabilities under [`Averaging::Probabilities`].
    pub scores: Matrix,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    /// `None` for classes absent from the evaluated set.
    pub per_class: Vec<Option<f64>>,
    pub count: usize,
}

impl<'a> EnsembleModel<'a> {
    /// Stacks are reduced in canonical `(domain_id, checksum)` order, so the
    /// result does not depend on the order they are given in.
    pub fn new(encoder: &'a DualEncoder, table: &'a ClassTokenTable, stacks: Vec<PromptStack>, averaging: Averaging) -> Result<Self> {
        if stacks.is_empty() {
            return Err(Error::Config("an ensemble needs at least one prompt stack".into()));
        }
        for s in &stacks {
            s.check_compatible(encoder.config())?;
        }
        let mut keyed: Vec<(u32, String, PromptStack)> = stacks.into_iter().map(|s| (s.domain_id, s.checksum(), s)).collect();
        keyed.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
        Ok(Self { encoder, table, stacks: keyed.into_iter().map(|k| k.2).collect(), averaging })
    }

    pub fn stacks(&self) -> &[PromptStack] {
        &self.stacks
    }

    pub fn len(&self) -> usize {
        self.stacks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stacks.is_empty()
    }

    /// `cos(w_k, z)/T` for one stack.
    pub fn domain_logits(&self, stack: &PromptStack, images: &[&[f32]]) -> Result<Matrix> {
        let z = self.encoder.encode_images(images, Some(stack))?;
        let w = self.encoder.encode_text_all(self.table, Some(stack))?;
        cosine_logits(&z, &w, self.encoder.temperature())
    }

    pub fn predict(&self, images: &[&[f32]]) -> Result<Prediction> {
        let mut total: Option<Matrix> = None;
        for s in &self.stacks {
            let l = self.domain_logits(s, images)?;
            let l = match self.averaging {
                Averaging::Logits => l,
                Averaging::Probabilities => softmax_rows(&l),
            };
            match total.as_mut() {
                None => total = Some(l),
                Some(t) => t.add_assign(&l),
            }
        }
        let mut scores = total.expect("ensemble is non-empty");
        scores.scale_assign(1.0 / self.stacks.len() as f64);
        let labels = (0..scores.rows()).map(|r| argmax(scores.row(r))).collect();
        Ok(Prediction { scores, labels })
    }

    pub fn evaluate(&self, images: &[&[f32]], labels: &[usize]) -> Result<Accuracy> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!("{} images, {} labels", images.len(), labels.len())));
        }
        let pred = self.predict(images)?;
        accuracy(&pred.labels, labels, self.table.num_classes())
    }
}

/// Reads upload files; errors carry the offending path.
pub fn load_uploads(paths: &[impl AsRef<Path>]) -> Result<Vec<PromptStack>> {
    paths.iter().map(|p| PromptStack::load(p.as_ref()).map_err(|e| e.in_file(p.as_ref()))).collect()
}

pub fn accuracy(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<Accuracy> {
    if truth.is_empty() {
        return Err(Error::Contract("accuracy of an empty set is undefined".into()));
    }
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions, {} labels", predicted.len(), truth.len())));
    }
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if t >= num_classes {
            return Err(Error::Index { what: "label", index: t, bound: num_classes });
        }
        totals[t] += 1;
        hits[t] += usize::from(p == t);
    }
    let correct: usize = hits.iter().sum();
    Ok(Accuracy {
        overall: correct as f64 / truth.len() as f64,
        per_class: hits.iter().zip(&totals).map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64)).collect(),
        count: truth.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSplit {
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    /// `None` for the unprompted backbone.
    pub domain_id: Option<u32>,
    pub class: usize,
    pub split: FeatureSplit,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceStats {
    pub domain_id: Option<u32>,
    /// Mean over classes of the mean squared distance of unit-normalized image
    /// features to their class centroid.
    pub intra_class_visual_variance: f64,
    /// Mean squared distance of unit-normalized class text features to their mean.
    pub inter_class_text_variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub dim: usize,
    pub rows: Vec<FeatureRow>,
    pub stats: Vec<VarianceStats>,
}

impl FeatureTable {
    /// Columns: `domain_id,class,split,f0..f{d-1}`; the unprompted backbone's domain is `none`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain_id,class,split");
        for i in 0..self.dim {
            write!(out, ",f{i}").expect("write to String");
        }
        out.push('\n');
        for r in &self.rows {
            let dom = r.domain_id.map_or_else(|| "none".to_string(), |d| d.to_string());
            let split = match r.split {
                FeatureSplit::Image => "image",
                FeatureSplit::Text => "text",
            };
            write!(out, "{dom},{},{split}", r.class).expect("write to String");
            for v in &r.values {
                write!(out, ",{v}").expect("write to String");
            }
            out.push('\n');
        }
        out
    }
}

fn unit_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let n = crate::tensor::norm(m.row(r));
        if !(n > 0.0) {
            return Err(Error::Numeric(format!("row {r} has norm {n}")));
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Mean squared Euclidean distance of `rows` to their centroid.
pub fn spread(rows: &[&[f64]]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let d = rows[0].len();
    let n = rows.len() as f64;
    let centroid: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    rows.iter().map(|r| r.iter().zip(&centroid).map(|(a, c)| (a - c) * (a - c)).sum::<f64>()).sum::<f64>() / n
}

fn variance_stats(domain_id: Option<u32>, z: &Matrix, w: &Matrix, labels: &[usize], k: usize) -> Result<VarianceStats> {
    let zn = unit_rows(z)?;
    let wn = unit_rows(w)?;
    let per_class: Vec<f64> = (0..k)
        .filter_map(|c| {
            let rows: Vec<&[f64]> = (0..zn.rows()).filter(|&r| labels[r] == c).map(|r| zn.row(r)).collect();
            (!rows.is_empty()).then(|| spread(&rows))
        })
        .collect();
    let intra = if per_class.is_empty() { 0.0 } else { per_class.iter().sum::<f64>() / per_class.len() as f64 };
    let text_rows: Vec<&[f64]> = (0..wn.rows()).map(|r| wn.row(r)).collect();
    Ok(VarianceStats { domain_id, intra_class_visual_variance: intra, inter_class_text_variance: spread(&text_rows) })
}

impl EnsembleModel<'_> {
    /// Image and text features per domain (`per_domain`) or of the unprompted
    /// backbone alone, annotated with ground-truth classes.
    pub fn export_features(&self, images: &[&[f32]], labels: &[usize], per_domain: bool) -> Result<FeatureTable> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!("{} images, {} labels", images.len(), labels.len())));
        }
        let k = self.table.num_classes();
        let sources: Vec<Option<&PromptStack>> = if per_domain { self.stacks.iter().map(Some).collect() } else { vec![None] };
        let mut rows = Vec::new();
        let mut stats = Vec::new();
        for s in sources {
            let domain_id = s.map(|s| s.domain_id);
            let z = self.encoder.encode_images(images, s)?;
            let w = self.encoder.encode_text_all(self.table, s)?;
            for (r, &c) in labels.iter().enumerate() {
                rows.push(FeatureRow { domain_id, class: c, split: FeatureSplit::Image, values: z.row(r).to_vec() });
            }
            for c in 0..k {
                rows.push(FeatureRow { domain_id, class: c, split: FeatureSplit::Text, values: w.row(c).to_vec() });
            }
            stats.push(variance_stats(domain_id, &z, &w, labels, k)?);
        }
        Ok(FeatureTable { dim: self.encoder.config().embed_dim, rows, stats })
    }
}
