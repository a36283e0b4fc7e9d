//! Toy federated-learning environment.
//!
//! Clients hold samples from Gaussian class clusters and train a softmax
//! regression model locally; the server averages their parameters (FedAvg).
//! The value of a coalition of clients is the validation accuracy of the
//! average of their local models.
//!
//! A client of type `T_j` only holds samples of the first `C - j` classes,
//! so the type index is a data-quality level: `T_0` sees every class and
//! `T_{C-1}` sees a single one.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_DATASET, STREAM_PARTITION, STREAM_VALIDATION};
use crate::shapley::{Coalition, CoalitionUtility};

/// Norm of the class means.
const MEAN_NORM: f64 = 0.75;
/// Standard deviation of the per-sample noise, per coordinate.
const NOISE_STD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<u32>,
    dim: usize,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<f64>, labels: Vec<u32>, dim: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("a dataset needs at least two classes"));
        }
        if labels.is_empty() || dim == 0 {
            return Err(Error::invalid("empty dataset"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "{} feature values for {} rows of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::invalid(format!("label {l} outside 0..{classes}")));
        }
        Ok(LabeledDataset {
            features,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Sample count per class.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Empirical label distribution.
    pub fn label_distribution(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.label_counts().iter().map(|&c| c as f64 / n).collect()
    }

    fn select(&self, rows: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        LabeledDataset {
            features,
            labels,
            dim: self.dim,
            classes: self.classes,
        }
    }

    /// Write as CSV: a `#` header line with the shape, then one row per
    /// sample holding the `d` features followed by the label.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "# fedcoin-dataset v1 n={} d={} c={}",
            self.len(),
            self.dim,
            self.classes
        )?;
        for i in 0..self.len() {
            for x in self.row(i) {
                write!(out, "{x},")?;
            }
            writeln!(out, "{}", self.labels[i])?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::Decode {
            offset: 0,
            reason: "empty file".into(),
        })??;
        let field = |name: &str| -> Result<usize> {
            header
                .split_whitespace()
                .find_map(|t| t.strip_prefix(name))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Decode {
                    offset: 0,
                    reason: format!("header lacks `{name}`"),
                })
        };
        let (n, d, c) = (field("n=")?, field("d=")?, field("c=")?);
        let mut offset = header.len() as u64 + 1;
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for line in lines {
            let line = line?;
            let bad = |reason: String| Error::Decode { offset, reason };
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != d + 1 {
                return Err(bad(format!("expected {} cells, got {}", d + 1, cells.len())));
            }
            for cell in &cells[..d] {
                features.push(cell.parse().map_err(|e| bad(format!("{e}")))?);
            }
            labels.push(cells[d].parse().map_err(|e| bad(format!("{e}")))?);
            offset += line.len() as u64 + 1;
        }
        if labels.len() != n {
            return Err(Error::Decode {
                offset,
                reason: format!("header promises {n} rows, found {}", labels.len()),
            });
        }
        LabeledDataset::new(features, labels, d, c)
    }
}

/// Which split of the synthetic benchmark to draw. Both splits share the
/// class means; only the samples differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// Balanced Gaussian-cluster dataset: label `i mod c` for row `i`.
pub fn make_synthetic_dataset(seed: u64, n: usize, d: usize, c: usize) -> Result<LabeledDataset> {
    make_split(seed, n, d, c, Split::Train)
}

pub fn make_split(seed: u64, n: usize, d: usize, c: usize, split: Split) -> Result<LabeledDataset> {
    if c < 2 || d < 2 || n < c {
        return Err(Error::invalid(format!(
            "synthetic dataset needs c >= 2, d >= 2 and n >= c (got n={n}, d={d}, c={c})"
        )));
    }
    let mut mean_rng = stream_rng(seed, STREAM_DATASET);
    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut mean_rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x * MEAN_NORM / norm).collect()
        })
        .collect();

    let stream = match split {
        Split::Train => STREAM_DATASET + 16,
        Split::Validation => STREAM_VALIDATION,
    };
    let mut rng = stream_rng(seed, stream);
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % c;
        for &m in &means[label] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(m + NOISE_STD * z);
        }
        labels.push(label as u32);
    }
    LabeledDataset::new(features, labels, d, c)
}

/// Draw `m` samples for a client of type `j`: stratified over the classes
/// `0..c-j`, uniformly without replacement inside each class. Class shares
/// differ by at most one sample.
pub fn partition_by_type<R: Rng + ?Sized>(
    pool: &LabeledDataset,
    j: usize,
    m: usize,
    rng: &mut R,
) -> Result<LabeledDataset> {
    let c = pool.classes();
    if j >= c {
        return Err(Error::invalid(format!("type {j} for a {c}-class pool")));
    }
    if m == 0 {
        return Err(Error::invalid("client with zero samples"));
    }
    let allowed = c - j;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); allowed];
    for (i, &l) in pool.labels().iter().enumerate() {
        if (l as usize) < allowed {
            by_class[l as usize].push(i);
        }
    }
    let mut rows = Vec::with_capacity(m);
    for (class, members) in by_class.iter().enumerate() {
        let want = m / allowed + usize::from(class < m % allowed);
        if members.len() < want {
            return Err(Error::ResourceLimit(format!(
                "class {class} has {} samples, type {j} client needs {want}",
                members.len()
            )));
        }
        let mut picked: Vec<usize> = index::sample(rng, members.len(), want)
            .into_iter()
            .map(|k| members[k])
            .collect();
        picked.sort_unstable();
        rows.extend(picked);
    }
    Ok(pool.select(&rows))
}

/// Softmax-regression parameters: a `classes × dim` weight matrix (row
/// major) followed by `classes` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dim: usize,
    pub classes: usize,
    pub weights: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        ModelParams {
            dim,
            classes,
            weights: vec![0.0; dim * classes + classes],
        }
    }

    fn shape_matches(&self, data: &LabeledDataset) -> Result<()> {
        if self.dim != data.dim() || self.classes != data.classes() {
            return Err(Error::invalid(format!(
                "model shape {}x{} does not fit data {}x{}",
                self.classes,
                self.dim,
                data.classes(),
                data.dim()
            )));
        }
        Ok(())
    }

    fn logits(&self, x: &[f64], out: &mut [f64]) {
        let bias = &self.weights[self.dim * self.classes..];
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.weights[k * self.dim..(k + 1) * self.dim];
            *o = bias[k] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut z = vec![0.0; self.classes];
        self.logits(x, &mut z);
        argmax(&z)
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and its gradient with respect to every parameter.
pub fn loss_and_gradient(w: &ModelParams, data: &LabeledDataset) -> Result<(f64, Vec<f64>)> {
    w.shape_matches(data)?;
    let (d, c) = (w.dim, w.classes);
    let mut grad = vec![0.0; w.weights.len()];
    let mut z = vec![0.0; c];
    let mut loss = 0.0;
    for i in 0..data.len() {
        let x = data.row(i);
        let y = data.labels()[i] as usize;
        w.logits(x, &mut z);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        loss += max + sum.ln() - z[y];
        for k in 0..c {
            let p = (z[k] - max).exp() / sum;
            let delta = p - if k == y { 1.0 } else { 0.0 };
            for (g, xv) in grad[k * d..(k + 1) * d].iter_mut().zip(x) {
                *g += delta * xv;
            }
            grad[d * c + k] += delta;
        }
    }
    let n = data.len() as f64;
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("training loss is {loss}")));
    }
    Ok((loss, grad))
}

pub fn loss(w: &ModelParams, data: &LabeledDataset) -> Result<f64> {
    loss_and_gradient(w, data).map(|(l, _)| l)
}

/// Full-batch gradient descent on the softmax cross-entropy.
pub fn local_train(w0: &ModelParams, data: &LabeledDataset, iters: usize, lr: f64) -> Result<ModelParams> {
    if iters == 0 {
        return Err(Error::invalid("local training needs at least one iteration"));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate {lr}")));
    }
    let mut w = w0.clone();
    for _ in 0..iters {
        let (_, grad) = loss_and_gradient(&w, data)?;
        for (p, g) in w.weights.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
    }
    if w.weights.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("parameters diverged".into()));
    }
    Ok(w)
}

/// Fraction of rows whose label the model predicts.
pub fn accuracy(w: &ModelParams, data: &LabeledDataset) -> Result<f64> {
    w.shape_matches(data)?;
    let hits = (0..data.len())
        .filter(|&i| w.predict(data.row(i)) == data.labels()[i] as usize)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Unweighted element-wise mean of the given models.
pub fn fedavg<'a, I>(updates: I) -> Result<ModelParams>
where
    I: IntoIterator<Item = &'a ModelParams>,
{
    let mut it = updates.into_iter();
    let first = it
        .next()
        .ok_or_else(|| Error::invalid("aggregating an empty set of updates"))?;
    let mut sum = first.clone();
    let mut count = 1usize;
    for u in it {
        if u.dim != first.dim || u.classes != first.classes {
            return Err(Error::invalid("aggregating models of different shapes"));
        }
        sum.weights.iter_mut().zip(&u.weights).for_each(|(s, x)| *s += x);
        count += 1;
    }
    let n = count as f64;
    sum.weights.iter_mut().for_each(|s| *s /= n);
    Ok(sum)
}

/// Coalition value: validation accuracy of the FedAvg of the members' local
/// models. The empty coalition is handled by the caller (worth zero).
pub struct FlUtility {
    updates: Vec<ModelParams>,
    valset: Arc<LabeledDataset>,
}

impl FlUtility {
    pub fn new(updates: Vec<ModelParams>, valset: Arc<LabeledDataset>) -> Result<Self> {
        if updates.is_empty() {
            return Err(Error::invalid("utility over zero clients"));
        }
        for u in &updates {
            u.shape_matches(&valset)?;
        }
        Ok(FlUtility { updates, valset })
    }

    pub fn updates(&self) -> &[ModelParams] {
        &self.updates
    }
}

impl CoalitionUtility for FlUtility {
    fn players(&self) -> usize {
        self.updates.len()
    }

    fn value(&self, coalition: &Coalition) -> Result<f64> {
        if coalition.is_empty() {
            return Ok(0.0);
        }
        let members: Vec<usize> = coalition.members().collect();
        if let Some(&m) = members.iter().find(|&&m| m >= self.updates.len()) {
            return Err(Error::Utility {
                coalition: members.clone(),
                reason: format!("client {m} has no local update"),
            });
        }
        let global = fedavg(members.iter().map(|&m| &self.updates[m]))?;
        accuracy(&global, &self.valset)
    }

    fn describe(&self) -> String {
        format!("fl-accuracy/{}", self.updates.len())
    }
}

/// Label distribution of a type-`j` client: uniform over `c - j` classes.
pub fn type_distribution(j: usize, c: usize) -> Vec<f64> {
    let allowed = c - j;
    (0..c)
        .map(|k| if k < allowed { 1.0 / allowed as f64 } else { 0.0 })
        .collect()
}

/// Data-quality distance between two label distributions:
/// `(1/C) Σ_c |p_c - q_c|`.
pub fn emd(client: &[f64], benchmark: &[f64]) -> Result<f64> {
    if client.len() != benchmark.len() || client.is_empty() {
        return Err(Error::invalid("histograms over different class counts"));
    }
    for h in [client, benchmark] {
        let total: f64 = h.iter().sum();
        if (total - 1.0).abs() > 1e-9 || h.iter().any(|&p| p < 0.0) {
            return Err(Error::invalid(format!("histogram sums to {total}")));
        }
    }
    let l1: f64 = client.iter().zip(benchmark).map(|(p, q)| (p - q).abs()).sum();
    Ok(l1 / client.len() as f64)
}

/// Parameters of the synthetic federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    pub dim: usize,
    pub classes: usize,
    /// Number of quality types; client `i` has type `i / clients_per_type`.
    pub types: usize,
    pub clients_per_type: usize,
    pub samples_per_client: usize,
    pub local_iters: usize,
    pub lr: f64,
}

impl Default for FlConfig {
    fn default() -> Self {
        FlConfig {
            train_samples: 2000,
            val_samples: 1000,
            dim: 20,
            classes: 10,
            types: 10,
            clients_per_type: 1,
            samples_per_client: 200,
            local_iters: 20,
            lr: 0.5,
        }
    }
}

impl FlConfig {
    pub fn clients(&self) -> usize {
        self.types * self.clients_per_type
    }
}

#[derive(Debug, Clone)]
pub struct ClientSpec {
    pub id: usize,
    pub type_index: usize,
    pub dataset: LabeledDataset,
}

/// Materialized federation: benchmark pool, validation split and clients.
#[derive(Debug, Clone)]
pub struct FlEnvironment {
    pub config: FlConfig,
    pub pool: LabeledDataset,
    pub valset: Arc<LabeledDataset>,
    pub clients: Vec<ClientSpec>,
}

impl FlEnvironment {
    pub fn build(seed: u64, config: &FlConfig) -> Result<Self> {
        if config.types == 0 || config.types > config.classes {
            return Err(Error::config("fl.types", format!("must be in 1..={}", config.classes)));
        }
        let pool = make_split(seed, config.train_samples, config.dim, config.classes, Split::Train)?;
        let valset = make_split(seed, config.val_samples, config.dim, config.classes, Split::Validation)?;
        let mut rng = stream_rng(seed, STREAM_PARTITION);
        let clients = (0..config.clients())
            .map(|id| {
                let type_index = id / config.clients_per_type;
                let dataset = partition_by_type(&pool, type_index, config.samples_per_client, &mut rng)?;
                Ok(ClientSpec {
                    id,
                    type_index,
                    dataset,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FlEnvironment {
            config: config.clone(),
            pool,
            valset: Arc::new(valset),
            clients,
        })
    }

    /// Local updates of every client starting from `global`.
    pub fn local_updates(&self, global: &ModelParams) -> Result<Vec<ModelParams>> {
        self.clients
            .iter()
            .map(|c| local_train(global, &c.dataset, self.config.local_iters, self.config.lr))
            .collect()
    }

    /// Run `rounds` FedAvg rounds from a zero model and return the local
    /// updates submitted in each round.
    pub fn rounds(&self, rounds: usize) -> Result<Vec<Vec<ModelParams>>> {
        let mut global = ModelParams::zeros(self.config.dim, self.config.classes);
        let mut out = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let updates = self.local_updates(&global)?;
            global = fedavg(&updates)?;
            out.push(updates);
        }
        Ok(out)
    }

    pub fn type_of(&self, client: usize) -> usize {
        self.clients[client].type_index
    }
}
