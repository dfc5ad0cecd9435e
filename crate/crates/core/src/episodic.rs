//! Episodic task construction.
//!
//! A task pairs a meta-train batch with a meta-test batch. Three strategies
//! decide where the two batches come from:
//!
//! - `S1`: both from one source domain picked uniformly.
//! - `S2`: both from the pooled union of all sources.
//! - `S3`: one source, picked uniformly, is the meta-test domain; the
//!   meta-train batch comes from the pooled remaining sources.
//!
//! Rows are drawn uniformly with replacement.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domains::DomainDataset;
use crate::nn::Batch;
use crate::rng::{RngStream, StreamRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum SamplingStrategy {
    #[serde(rename = "s1")]
    S1SameDomain,
    #[serde(rename = "s2")]
    S2AllDomains,
    #[default]
    #[serde(rename = "s3")]
    S3MetaSplit,
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingStrategy::S1SameDomain => "s1",
            SamplingStrategy::S2AllDomains => "s2",
            SamplingStrategy::S3MetaSplit => "s3",
        })
    }
}

impl FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(SamplingStrategy::S1SameDomain),
            "s2" => Ok(SamplingStrategy::S2AllDomains),
            "s3" => Ok(SamplingStrategy::S3MetaSplit),
            other => Err(Error::InvalidArgument(format!(
                "unknown sampling strategy `{other}` (expected s1, s2 or s3)"
            ))),
        }
    }
}

/// A meta-train / meta-test batch pair. The `*_domains` vectors give, per
/// row, the index of the source domain it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub meta_train: Batch,
    pub meta_test: Batch,
    pub meta_train_domains: Vec<usize>,
    pub meta_test_domains: Vec<usize>,
}

impl Task {
    /// A task from explicit batches, with no domain provenance.
    pub fn from_batches(meta_train: Batch, meta_test: Batch) -> Result<Self> {
        if meta_train.dim() != meta_test.dim() {
            return Err(Error::dim("task meta-test features", meta_train.dim(), meta_test.dim()));
        }
        Ok(Self {
            meta_train_domains: vec![usize::MAX; meta_train.len()],
            meta_test_domains: vec![usize::MAX; meta_test.len()],
            meta_train,
            meta_test,
        })
    }
}

fn check_sources(sources: &[DomainDataset], strategy: SamplingStrategy, batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let needed = if strategy == SamplingStrategy::S3MetaSplit {
        2
    } else {
        1
    };
    if sources.len() < needed {
        return Err(Error::Unsupported(format!(
            "strategy {strategy} needs at least {needed} source domains, have {}",
            sources.len()
        )));
    }
    if let Some(d) = sources.iter().find(|d| d.is_empty()) {
        return Err(Error::Empty(format!("source domain `{}`", d.domain_id)));
    }
    let dim = sources[0].dim();
    if let Some(d) = sources.iter().find(|d| d.dim() != dim) {
        return Err(Error::dim(format!("source `{}` features", d.domain_id), dim, d.dim()));
    }
    Ok(())
}

/// Draws `batch_size` rows uniformly from the union of `pool`.
fn draw_pooled(
    sources: &[DomainDataset],
    pool: &[usize],
    batch_size: usize,
    rng: &mut StreamRng,
) -> Result<(Batch, Vec<usize>)> {
    let total: u64 = pool.iter().map(|&i| sources[i].len() as u64).sum();
    let dim = sources[pool[0]].dim();
    let mut flat = Vec::with_capacity(batch_size * dim);
    let mut labels = Vec::with_capacity(batch_size);
    let mut tags = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut r = rng.random_range(0..total);
        let mut chosen = pool[0];
        for &i in pool {
            let len = sources[i].len() as u64;
            if r < len {
                chosen = i;
                break;
            }
            r -= len;
        }
        let (x, y) = sources[chosen].sample(r as usize);
        flat.extend(x.iter());
        labels.push(y);
        tags.push(chosen);
    }
    let features =
        ndarray::Array2::from_shape_vec((batch_size, dim), flat).map_err(|e| Error::Structure(e.to_string()))?;
    Ok((Batch::new(features, labels)?, tags))
}

pub(crate) fn sample_task_with(
    sources: &[DomainDataset],
    strategy: SamplingStrategy,
    batch_size: usize,
    rng: &mut StreamRng,
) -> Result<Task> {
    let n = sources.len() as u64;
    let (train_pool, test_pool): (Vec<usize>, Vec<usize>) = match strategy {
        SamplingStrategy::S1SameDomain => {
            let d = rng.random_range(0..n) as usize;
            (vec![d], vec![d])
        }
        SamplingStrategy::S2AllDomains => {
            let all: Vec<usize> = (0..sources.len()).collect();
            (all.clone(), all)
        }
        SamplingStrategy::S3MetaSplit => {
            let test = rng.random_range(0..n) as usize;
            let rest = (0..sources.len()).filter(|&i| i != test).collect();
            (rest, vec![test])
        }
    };
    let (meta_test, meta_test_domains) = draw_pooled(sources, &test_pool, batch_size, rng)?;
    let (meta_train, meta_train_domains) = draw_pooled(sources, &train_pool, batch_size, rng)?;
    debug_assert!(
        strategy != SamplingStrategy::S3MetaSplit || meta_train_domains.iter().all(|d| *d != test_pool[0]),
        "meta-test domain leaked into the meta-train batch"
    );
    Ok(Task {
        meta_train,
        meta_test,
        meta_train_domains,
        meta_test_domains,
    })
}

/// One task drawn from the start of `rng`.
pub fn sample_task(
    sources: &[DomainDataset],
    strategy: SamplingStrategy,
    batch_size: usize,
    rng: RngStream,
) -> Result<Task> {
    check_sources(sources, strategy, batch_size)?;
    sample_task_with(sources, strategy, batch_size, &mut rng.rng())
}

/// `s` tasks drawn in sequence from `rng`; under S3 the meta split is redrawn
/// for every task. The first task equals [`sample_task`] on the same stream.
pub fn sample_task_sequence(
    sources: &[DomainDataset],
    strategy: SamplingStrategy,
    batch_size: usize,
    s: usize,
    rng: RngStream,
) -> Result<Vec<Task>> {
    if s == 0 {
        return Err(Error::InvalidArgument("tasks per trajectory must be positive".into()));
    }
    check_sources(sources, strategy, batch_size)?;
    let mut gen = rng.rng();
    (0..s)
        .map(|_| sample_task_with(sources, strategy, batch_size, &mut gen))
        .collect()
}

/// A batch drawn uniformly from the pooled union of `sources`, as used by
/// plain supervised training.
pub fn sample_pooled_batch(sources: &[DomainDataset], batch_size: usize, rng: RngStream) -> Result<Batch> {
    check_sources(sources, SamplingStrategy::S2AllDomains, batch_size)?;
    let all: Vec<usize> = (0..sources.len()).collect();
    Ok(draw_pooled(sources, &all, batch_size, &mut rng.rng())?.0)
}
