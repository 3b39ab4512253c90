//! Using a trained model: order-averaged likelihoods, sampling, imputation and OOD scoring.

mod output;

use rand::seq::SliceRandom;
use rand::Rng;

pub use output::{write_nll_csv, write_pgm, write_summary_csv};

use crate::data::{DataError, Dataset};
use crate::model::{shuffle_ordering, DeformerModel, FeatureValue, HeadKind, HeadOutput, ModelError, OrderedSample, SequenceBatch};
use crate::numerics::Float;
use crate::seeds;

/// Default number of orderings averaged per sample.
pub const DEFAULT_ORDERINGS: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Io(String),
    #[error("invalid request: {0}")]
    Invalid(String),
}

/// NLL of one sample averaged over orderings, in nats.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalEntry {
    pub mean_nll: Float,
    /// Population standard deviation across the orderings.
    pub std_nll: Float,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub orderings: usize,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    /// Dataset average of the per-sample means.
    pub fn mean_nll(&self) -> Float {
        self.entries.iter().map(|e| e.mean_nll).sum::<Float>() / self.entries.len() as Float
    }
}

fn mean_std(values: &[Float]) -> (Float, Float) {
    let n = values.len() as Float;
    // Centering on the first value keeps identical inputs exact.
    let x0 = values[0];
    let mean = x0 + values.iter().map(|v| v - x0).sum::<Float>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Float>() / n;
    (mean, var.sqrt())
}

/// Full-sample NLL under each of `orderings`, evaluated as one batch.
pub fn nll_over_orderings(model: &DeformerModel, values: &[FeatureValue], orderings: &[Vec<usize>]) -> Result<Vec<Float>, InferenceError> {
    let samples = orderings
        .iter()
        .map(|o| OrderedSample::new(model.layout(), values, o.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(model.nll_batch(&samples)?)
}

/// Every permutation of `0..d`, in lexicographic order.
pub fn all_orderings(d: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for f in 0..used.len() {
            if !used[f] {
                used[f] = true;
                prefix.push(f);
                rec(prefix, used, out);
                prefix.pop();
                used[f] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; d], &mut out);
    out
}

fn average_with<R: Rng + ?Sized>(model: &DeformerModel, values: &[FeatureValue], k: usize, rng: &mut R) -> Result<EvalEntry, InferenceError> {
    if k == 0 {
        return Err(InferenceError::Invalid("K must be at least 1".into()));
    }
    let orderings = (0..k)
        .map(|_| shuffle_ordering(values.len(), rng))
        .collect::<Result<Vec<_>, _>>()?;
    let nlls = nll_over_orderings(model, values, &orderings)?;
    let (mean_nll, std_nll) = mean_std(&nlls);
    Ok(EvalEntry { mean_nll, std_nll })
}

/// Mean and spread of the NLL over `k` seeded uniform orderings.
pub fn average_nll(model: &DeformerModel, values: &[FeatureValue], k: usize, seed: u64) -> Result<EvalEntry, InferenceError> {
    average_with(model, values, k, &mut seeds::substream(seed, seeds::ORDERING, 0))
}

/// [`average_nll`] for every sample, spread over `threads` workers.
///
/// Sample `i` draws its orderings from its own sub-stream, so results do not depend on `threads`.
pub fn evaluate_dataset(model: &DeformerModel, data: &Dataset, k: usize, seed: u64, threads: usize) -> Result<EvalReport, InferenceError> {
    if !data.shape().matches(model.layout()) {
        return Err(InferenceError::Invalid(format!("dataset shape {:?} does not match the model", data.shape())));
    }
    let threads = threads.clamp(1, data.len().max(1));
    let per = data.len().div_ceil(threads).max(1);
    let chunks: Vec<Result<Vec<EvalEntry>, InferenceError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..data.len())
            .step_by(per)
            .map(|start| {
                s.spawn(move || {
                    (start..(start + per).min(data.len()))
                        .map(|i| average_with(model, &data.row(i), k, &mut seeds::substream(seed, seeds::ORDERING, i as u64)))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut entries = Vec::with_capacity(data.len());
    for c in chunks {
        entries.extend(c?);
    }
    Ok(EvalReport { orderings: k, entries })
}

/// A generated sample with the log-probability accumulated while drawing it.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// Values in canonical feature order.
    pub values: Vec<FeatureValue>,
    pub ordering: Vec<usize>,
    pub log_prob: Float,
}

fn placeholder(head: HeadKind) -> FeatureValue {
    if head.is_discrete() {
        FeatureValue::Discrete(0)
    } else {
        FeatureValue::Continuous(0.0)
    }
}

/// Continuous draws are clamped to this many standard units unless raw mode is requested.
pub const SAMPLE_CLAMP: Float = 10.0;

/// Ancestral sampling of one sequence per ordering, advanced together as a batch.
///
/// Position `k` is drawn from the model's prediction given the first `k` drawn values.
/// `clamp` bounds continuous draws to `[-clamp, clamp]`.
pub fn generate_with_orderings<R: Rng + ?Sized>(
    model: &DeformerModel,
    orderings: Vec<Vec<usize>>,
    clamp: Option<Float>,
    rng: &mut R,
) -> Result<Vec<Generated>, InferenceError> {
    let d = model.num_features();
    let layout = *model.layout();
    for o in &orderings {
        OrderedSample::new(&layout, &vec![placeholder(model.head()); d], o.clone())?;
    }
    let b = orderings.len();
    let mut drawn: Vec<Vec<FeatureValue>> = vec![Vec::with_capacity(d); b];
    let mut log_probs = vec![0.0; b];
    for k in 0..d {
        let mut ids = Vec::with_capacity(b * (k + 1));
        let mut vals = Vec::with_capacity(b * (k + 1));
        for (o, prev) in orderings.iter().zip(&drawn) {
            ids.extend(o[..=k].iter().map(|&f| layout.identity(f)));
            vals.extend(prev.iter().copied());
            vals.push(placeholder(model.head()));
        }
        let batch = SequenceBatch::new(b, k + 1, ids, vals)?;
        for ((head, prev), lp) in model.heads_at(&batch, k)?.iter().zip(&mut drawn).zip(&mut log_probs) {
            let mut v = head.sample(rng);
            if let (Some(c), FeatureValue::Continuous(x)) = (clamp, v) {
                v = FeatureValue::Continuous(x.clamp(-c, c));
            }
            *lp += head.log_prob(&v)?;
            prev.push(v);
        }
    }
    Ok(orderings
        .into_iter()
        .zip(drawn)
        .zip(log_probs)
        .map(|((ordering, seq), log_prob)| {
            let mut values = vec![placeholder(model.head()); d];
            for (&f, v) in ordering.iter().zip(seq) {
                values[f] = v;
            }
            Generated { values, ordering, log_prob }
        })
        .collect())
}

/// `n` samples, each under a fresh uniform ordering, drawn in batches of `batch_size`.
pub fn generate<R: Rng + ?Sized>(model: &DeformerModel, n: usize, batch_size: usize, clamp: Option<Float>, rng: &mut R) -> Result<Vec<Generated>, InferenceError> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let m = batch_size.max(1).min(n - out.len());
        let orderings = (0..m)
            .map(|_| shuffle_ordering(model.num_features(), rng))
            .collect::<Result<Vec<_>, _>>()?;
        out.extend(generate_with_orderings(model, orderings, clamp, rng)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FillMode {
    #[default]
    Sample,
    /// Most probable value at each step; the result does not depend on the RNG.
    Argmax,
}

/// Observed values by canonical feature index, plus the features to fill.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputationTask {
    pub observed: Vec<(usize, FeatureValue)>,
    pub missing: Vec<usize>,
    pub mode: FillMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Imputed {
    /// Completed values in canonical order; observed entries are returned as given.
    pub values: Vec<FeatureValue>,
    /// Ordering used: observed features first, then missing ones.
    pub ordering: Vec<usize>,
}

/// Fills the missing features by placing the observed ones first in the ordering.
///
/// In sample mode the observed features are shuffled; in argmax mode they keep canonical
/// order so the result is deterministic.
pub fn impute<R: Rng + ?Sized>(model: &DeformerModel, task: &ImputationTask, rng: &mut R) -> Result<Imputed, InferenceError> {
    let d = model.num_features();
    let mut seen = vec![false; d];
    for f in task.observed.iter().map(|(f, _)| *f).chain(task.missing.iter().copied()) {
        if f >= d {
            return Err(InferenceError::Invalid(format!("feature {f} out of range for {d} features")));
        }
        if std::mem::replace(&mut seen[f], true) {
            return Err(InferenceError::Invalid(format!("feature {f} is listed more than once")));
        }
    }
    if let Some(f) = seen.iter().position(|s| !s) {
        return Err(InferenceError::Invalid(format!("feature {f} is neither observed nor missing")));
    }
    for (_, v) in &task.observed {
        model.head().check_value(v)?;
    }
    let mut observed = task.observed.clone();
    match task.mode {
        FillMode::Sample => observed.shuffle(rng),
        FillMode::Argmax => observed.sort_by_key(|(f, _)| *f),
    }
    let mut ordering: Vec<usize> = observed.iter().map(|(f, _)| *f).collect();
    ordering.extend(&task.missing);
    let mut seq: Vec<FeatureValue> = observed.iter().map(|(_, v)| *v).collect();
    let layout = *model.layout();
    for k in observed.len()..d {
        let ids = ordering[..=k].iter().map(|&f| layout.identity(f)).collect();
        let mut vals = seq.clone();
        vals.push(placeholder(model.head()));
        let batch = SequenceBatch::new(1, k + 1, ids, vals)?;
        let head: HeadOutput = model.heads_at(&batch, k)?.remove(0);
        seq.push(match task.mode {
            FillMode::Sample => head.sample(rng),
            FillMode::Argmax => head.mode(),
        });
    }
    let mut values = vec![placeholder(model.head()); d];
    for (&f, v) in ordering.iter().zip(seq) {
        values[f] = v;
    }
    Ok(Imputed { values, ordering })
}

/// Location and spread of a set of scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: Float,
    pub std: Float,
    pub min: Float,
    pub p05: Float,
    pub p25: Float,
    pub median: Float,
    pub p75: Float,
    pub p95: Float,
    pub max: Float,
}

/// Percentiles use linear interpolation between order statistics.
pub fn summarize(values: &[Float]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let q = |p: Float| {
        let pos = p * (sorted.len() - 1) as Float;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as Float)
    };
    let (mean, std) = mean_std(values);
    Some(Summary {
        count: values.len(),
        mean,
        std,
        min: sorted[0],
        p05: q(0.05),
        p25: q(0.25),
        median: q(0.5),
        p75: q(0.75),
        p95: q(0.95),
        max: sorted[sorted.len() - 1],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OodReport {
    pub in_distribution: EvalReport,
    pub out_of_distribution: EvalReport,
    pub in_summary: Summary,
    pub out_summary: Summary,
}

/// Scores both datasets with order-averaged NLL; higher NLL means more anomalous.
pub fn ood_score(model: &DeformerModel, in_data: &Dataset, ood_data: &Dataset, k: usize, seed: u64, threads: usize) -> Result<OodReport, InferenceError> {
    if in_data.shape() != ood_data.shape() || in_data.is_discrete() != ood_data.is_discrete() {
        return Err(InferenceError::Invalid(format!(
            "datasets differ: {:?} vs {:?}",
            in_data.shape(),
            ood_data.shape()
        )));
    }
    if in_data.is_empty() || ood_data.is_empty() {
        return Err(InferenceError::Invalid("both datasets need samples".into()));
    }
    let in_distribution = evaluate_dataset(model, in_data, k, seed, threads)?;
    let out_of_distribution = evaluate_dataset(model, ood_data, k, seed, threads)?;
    let scores = |r: &EvalReport| r.entries.iter().map(|e| e.mean_nll).collect::<Vec<_>>();
    Ok(OodReport {
        in_summary: summarize(&scores(&in_distribution)).expect("non-empty"),
        out_summary: summarize(&scores(&out_of_distribution)).expect("non-empty"),
        in_distribution,
        out_of_distribution,
    })
}

/// Worker count for evaluation fan-out.
pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[cfg(test)]
mod tests;
