//! Training objectives, pseudo-labels and the λ ramp.
//!
//! Each loss has a tape form (`*_graph`, used by the trainer and the gradient
//! checks) and a plain value form over [`Matrix`] inputs. The value forms are
//! thin wrappers over the tape forms so the two cannot drift apart.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Matrix};

/// Per-sample class distribution with its confidence and prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbabilities {
    pub probs: Matrix,
    pub max_prob: Vec<f64>,
    pub argmax: Vec<usize>,
}

impl ClassProbabilities {
    pub fn from_logits(logits: &Matrix) -> Self {
        let probs = softmax_rows(logits);
        let argmax: Vec<usize> = (0..probs.rows()).map(|r| argmax(probs.row(r))).collect();
        let max_prob = argmax.iter().enumerate().map(|(r, &c)| probs.get(r, c)).collect();
        Self { probs, max_prob, argmax }
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }
}

/// `cos(z_i, w_k) / T` as an `n × K` node.
pub fn cosine_logits_graph(g: &mut Graph, z: Var, w: Var, temperature: f64) -> Result<Var> {
    let zn = g.l2_normalize_rows(z)?;
    let wn = g.l2_normalize_rows(w)?;
    let cos = g.matmul_t(zn, wn);
    Ok(g.scale(cos, 1.0 / temperature))
}

pub fn cosine_logits(z: &Matrix, w: &Matrix, temperature: f64) -> Result<Matrix> {
    let mut g = Graph::new();
    let (zv, wv) = (g.constant(z.clone()), g.constant(w.clone()));
    let l = cosine_logits_graph(&mut g, zv, wv, temperature)?;
    Ok(g.value(l).clone())
}

pub fn class_probabilities(z: &Matrix, w: &Matrix, temperature: f64) -> Result<ClassProbabilities> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    Ok(ClassProbabilities::from_logits(&cosine_logits(z, w, temperature)?))
}

/// Zero-shot pseudo-labels with their confidence mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelBatch {
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
    pub num_classes: usize,
}

impl PseudoLabelBatch {
    pub fn qualified(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `n × K`; masked-out rows are all zero.
    pub fn one_hot(&self) -> Matrix {
        let mut m = Matrix::zeros(self.labels.len(), self.num_classes);
        for (r, (&l, &keep)) in self.labels.iter().zip(&self.mask).enumerate() {
            if keep {
                m.set(r, l, 1.0);
            }
        }
        m
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            mask: indices.iter().map(|&i| self.mask[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

pub fn generate_pseudo_labels(zero_shot: &ClassProbabilities, threshold: f64) -> Result<PseudoLabelBatch> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("pseudo-label threshold must lie in (0, 1), got {threshold}")));
    }
    Ok(PseudoLabelBatch {
        labels: zero_shot.argmax.clone(),
        mask: zero_shot.max_prob.iter().map(|&p| p >= threshold).collect(),
        num_classes: zero_shot.probs.cols(),
    })
}

/// Mean negative log-probability of the true class.
pub fn csa_annotated_graph(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = g.value(logits).shape();
    if labels.len() != n || n == 0 {
        return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index { what: "label", index: bad, bound: k });
    }
    let logp = g.log_softmax_rows(logits);
    let picked = g.select(logp, labels.iter().copied().enumerate().collect());
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// Masked cross-entropy against pseudo-labels, averaged over qualified rows.
/// With no qualified row the result is a constant zero.
pub fn csa_target_graph(g: &mut Graph, logits: Var, pseudo: &PseudoLabelBatch) -> Result<Var> {
    let (n, k) = g.value(logits).shape();
    if pseudo.len() != n || pseudo.num_classes != k {
        return Err(Error::Shape(format!("pseudo-labels {}×{} vs logits {n}×{k}", pseudo.len(), pseudo.num_classes)));
    }
    let q = pseudo.qualified();
    if q == 0 {
        return Ok(g.constant(Matrix::scalar(0.0)));
    }
    let idx = (0..n).filter(|&r| pseudo.mask[r]).map(|r| (r, pseudo.labels[r])).collect();
    let logp = g.log_softmax_rows(logits);
    let picked = g.select(logp, idx);
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / q as f64))
}

pub fn csa_annotated(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let v = csa_annotated_graph(&mut g, l, labels)?;
    Ok(g.scalar(v))
}

pub fn csa_target(logits: &Matrix, pseudo: &PseudoLabelBatch) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let v = csa_target_graph(&mut g, l, pseudo)?;
    Ok(g.scalar(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Explicit(f64),
    MedianHeuristic,
}

/// Gaussian kernel `exp(-‖z - z'‖² / (2σ))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub bandwidth: Bandwidth,
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Self {
        Self { bandwidth: Bandwidth::Explicit(sigma) }
    }

    pub fn median() -> Self {
        Self { bandwidth: Bandwidth::MedianHeuristic }
    }

    pub fn validate(&self) -> Result<()> {
        match self.bandwidth {
            Bandwidth::Explicit(s) if !(s > 0.0 && s.is_finite()) => {
                Err(Error::Config(format!("kernel bandwidth must be positive, got {s}")))
            }
            _ => Ok(()),
        }
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::median()
    }
}

pub fn gaussian_kernel(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d / (2.0 * sigma)).exp()
}

/// Median of the squared distances over distinct pairs of `rows`, or 1 when that median is 0.
pub fn median_bandwidth(rows: &Matrix) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(rows.clone());
    let s = median_sigma_graph(&mut g, x);
    g.scalar(s)
}

/// The median is taken by value and then gathered with `select`, so the
/// bandwidth carries gradient like any other function of the features.
fn median_sigma_graph(g: &mut Graph, x: Var) -> Var {
    let d = g.sq_dist(x, x);
    let dv = g.value(d);
    let n = dv.rows();
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    if pairs.is_empty() {
        return g.constant(Matrix::scalar(1.0));
    }
    pairs.sort_by(|&(a, b), &(c, e)| dv.get(a, b).total_cmp(&dv.get(c, e)));
    let m = pairs.len();
    let mid: Vec<(usize, usize)> = if m % 2 == 1 { vec![pairs[m / 2]] } else { vec![pairs[m / 2 - 1], pairs[m / 2]] };
    let picked = g.select(d, mid.clone());
    let s = g.sum(picked);
    let med = g.scale(s, 1.0 / mid.len() as f64);
    if g.scalar(med) > 0.0 {
        med
    } else {
        g.constant(Matrix::scalar(1.0))
    }
}

fn off_diagonal_mask(n: usize) -> Matrix {
    let mut m = Matrix::filled(n, n, 1.0);
    for i in 0..n {
        m.set(i, i, 0.0);
    }
    m
}

/// Sum of all entries of `m`, reduced in ascending order of value so the
/// result does not depend on which operand came first.
fn sorted_sum(g: &mut Graph, m: Var) -> Var {
    let mv = g.value(m);
    let mut idx: Vec<(usize, usize)> = (0..mv.rows()).flat_map(|r| (0..mv.cols()).map(move |c| (r, c))).collect();
    idx.sort_by(|&(a, b), &(c, d)| mv.get(a, b).total_cmp(&mv.get(c, d)));
    let flat = g.select(m, idx);
    g.sum(flat)
}

/// Batch estimate of squared MMD:
///
/// `1/n_u² Σ_{i≠j} κ(s_i, s_j) + 1/n_t² Σ_{i≠j} κ(t_i, t_j) − 2/(n_u n_t) Σ_{i,j} κ(s_i, t_j)`.
///
/// Within-set sums skip the diagonal while the normalizers count it, so the
/// estimate is negative for identical batches (exactly `−2/n`).
pub fn mmd_squared_graph(g: &mut Graph, source: Var, target: Var, kernel: &KernelSpec) -> Result<Var> {
    kernel.validate()?;
    let (nu, du) = g.value(source).shape();
    let (nt, dt) = g.value(target).shape();
    if nu < 2 || nt < 2 {
        return Err(Error::Contract(format!("mmd needs at least 2 samples per set, got {nu} and {nt}")));
    }
    if du != dt {
        return Err(Error::Shape(format!("mmd feature widths differ: {du} vs {dt}")));
    }
    let two_sigma = match kernel.bandwidth {
        Bandwidth::Explicit(s) => g.constant(Matrix::scalar(2.0 * s)),
        Bandwidth::MedianHeuristic => {
            let both = g.concat_rows(&[source, target]);
            let s = median_sigma_graph(g, both);
            g.scale(s, 2.0)
        }
    };
    let kern = |g: &mut Graph, a: Var, b: Var| {
        let d = g.sq_dist(a, b);
        let d = g.div_scalar(d, two_sigma);
        let d = g.scale(d, -1.0);
        g.exp(d)
    };
    let kss = kern(g, source, source);
    let ktt = kern(g, target, target);
    let kst = kern(g, source, target);
    let mss = g.constant(off_diagonal_mask(nu));
    let mtt = g.constant(off_diagonal_mask(nt));
    let kss = g.mul(kss, mss);
    let ktt = g.mul(ktt, mtt);
    let sss = g.sum(kss);
    let stt = g.sum(ktt);
    let sst = sorted_sum(g, kst);
    let a = g.scale(sss, 1.0 / (nu * nu) as f64);
    let b = g.scale(stt, 1.0 / (nt * nt) as f64);
    let c = g.scale(sst, 2.0 / (nu * nt) as f64);
    let within = g.add(a, b);
    Ok(g.sub(within, c))
}

pub fn mmd_squared(source: &Matrix, target: &Matrix, kernel: &KernelSpec) -> Result<f64> {
    let mut g = Graph::new();
    let (s, t) = (g.constant(source.clone()), g.constant(target.clone()));
    let v = mmd_squared_graph(&mut g, s, t, kernel)?;
    Ok(g.scalar(v))
}

fn pairs(m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).flat_map(move |i| (i + 1..m).map(move |r| (i, r)))
}

/// Mean absolute difference of class probabilities over every pair of domains.
pub fn tcc_graph(g: &mut Graph, probs: &[Var]) -> Result<Var> {
    let m = probs.len();
    if m < 2 {
        return Err(Error::Contract(format!("tcc needs at least 2 domains, got {m}")));
    }
    let shape = g.value(probs[0]).shape();
    if probs.iter().any(|&p| g.value(p).shape() != shape) {
        return Err(Error::Shape("tcc probability matrices differ in shape".into()));
    }
    let terms: Vec<Var> = pairs(m)
        .map(|(i, r)| {
            let d = g.sub(probs[i], probs[r]);
            let a = g.abs(d);
            g.sum(a)
        })
        .collect();
    let total = g.add_all(&terms);
    let norm = (shape.0 * shape.1 * terms.len()) as f64;
    Ok(g.scale(total, 1.0 / norm))
}

/// Mean `|cos|` between same-class text embeddings of every pair of domains.
pub fn tsd_graph(g: &mut Graph, texts: &[Var]) -> Result<Var> {
    let m = texts.len();
    if m < 2 {
        return Err(Error::Contract(format!("tsd needs at least 2 domains, got {m}")));
    }
    let shape = g.value(texts[0]).shape();
    if texts.iter().any(|&t| g.value(t).shape() != shape) {
        return Err(Error::Shape("tsd text matrices differ in shape".into()));
    }
    let normed = texts.iter().map(|&t| g.l2_normalize_rows(t)).collect::<Result<Vec<_>>>()?;
    let terms: Vec<Var> = pairs(m)
        .map(|(i, r)| {
            let prod = g.mul(normed[i], normed[r]);
            let cos = g.sum_rows(prod);
            let a = g.abs(cos);
            g.sum(a)
        })
        .collect();
    let total = g.add_all(&terms);
    let norm = (shape.0 * terms.len()) as f64;
    Ok(g.scale(total, 1.0 / norm))
}

pub fn tcc_loss(probs: &[Matrix]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = probs.iter().map(|p| g.constant(p.clone())).collect();
    let v = tcc_graph(&mut g, &vars)?;
    Ok(g.scalar(v))
}

pub fn tsd_loss(texts: &[Matrix]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = texts.iter().map(|t| g.constant(t.clone())).collect();
    let v = tsd_graph(&mut g, &vars)?;
    Ok(g.scalar(v))
}

/// `2·sigmoid(10·step/total) − 1`.
pub fn lambda_schedule(step: usize, total_steps: usize) -> f64 {
    let x = 10.0 * step as f64 / total_steps.max(1) as f64;
    2.0 / (1.0 + (-x).exp()) - 1.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub lambda: f64,
}

/// `csa + α₁λ(dda + tcc) + α₂λ·tsd`; absent terms are skipped.
pub fn total_loss_graph(g: &mut Graph, csa: Var, dda: Option<Var>, tcc: Option<Var>, tsd: Option<Var>, w: LossWeights) -> Var {
    let align: Vec<Var> = [dda, tcc].into_iter().flatten().collect();
    let mut parts = vec![csa];
    if !align.is_empty() {
        let s = g.add_all(&align);
        parts.push(g.scale(s, w.alpha1 * w.lambda));
    }
    if let Some(t) = tsd {
        parts.push(g.scale(t, w.alpha2 * w.lambda));
    }
    g.add_all(&parts)
}

pub fn total_loss(csa: f64, dda: f64, tcc: f64, tsd: f64, w: LossWeights) -> f64 {
    csa + w.alpha1 * w.lambda * (dda + tcc) + w.alpha2 * w.lambda * tsd
}
