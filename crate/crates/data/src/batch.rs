//! Seeded batching. Order and augmentation for sample `i` in epoch `e`
//! derive only from `(seed, e, i)`, so the stream is identical whatever
//! the number of decode workers.

use crossmlp_autograd::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{DataError, Result};
use crate::manifest::Manifest;
use crate::sample::{load_pair, Augment, LoadOptions, SamplePair};
use crate::seed::mix;

const ORDER_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

/// A stacked batch: images `[N, 3, H, W]`, semantics `[N, K, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Scalar> {
    pub ids: Vec<String>,
    pub source: Tensor<T>,
    pub target: Tensor<T>,
    pub semantic: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn stack(samples: &[SamplePair<T>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(DataError::Data("cannot stack an empty batch".into()));
        }
        let stack = |pick: fn(&SamplePair<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
            let parts: Vec<Tensor<T>> = samples
                .iter()
                .map(|s| {
                    let t = pick(s);
                    let mut shape = vec![1];
                    shape.extend_from_slice(t.shape());
                    t.clone().reshape(&shape)
                })
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| DataError::Data(e.to_string()))?;
            Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0).map_err(|e| DataError::Data(e.to_string()))
        };
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            source: stack(|s| &s.source)?,
            target: stack(|s| &s.target)?,
            semantic: stack(|s| &s.semantic)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle: bool,
    pub augment: bool,
    pub seed: u64,
}

/// Index groups for one epoch; the last group may be short.
pub fn epoch_order(n: usize, plan: &BatchPlan, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(DataError::Config("manifest has no entries".into()));
    }
    if plan.batch_size == 0 {
        return Err(DataError::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if plan.shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[plan.seed, ORDER_STREAM, epoch])));
    }
    Ok(order.chunks(plan.batch_size).map(<[usize]>::to_vec).collect())
}

/// The augmentation drawn for entry `index` in `epoch`.
pub fn augment_for(plan: &BatchPlan, size: u32, epoch: u64, index: usize) -> Option<Augment> {
    plan.augment.then(|| {
        Augment::sample(size, &mut ChaCha8Rng::seed_from_u64(mix(&[plan.seed, AUGMENT_STREAM, epoch, index as u64])))
    })
}

/// Decodes the listed entries in parallel and stacks them in list order.
pub fn load_batch<T: Scalar>(
    manifest: &Manifest,
    indices: &[usize],
    opts: &LoadOptions,
    plan: &BatchPlan,
    epoch: u64,
) -> Result<Batch<T>> {
    let samples = indices
        .par_iter()
        .map(|&i| {
            let entry = manifest
                .entries
                .get(i)
                .ok_or_else(|| DataError::Data(format!("index {i} outside a manifest of {}", manifest.len())))?;
            load_pair(manifest, entry, opts, augment_for(plan, opts.size, epoch, i).as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    Batch::stack(&samples)
}

/// Iterator over one epoch's batches.
pub struct BatchIter<'m, T: Scalar> {
    manifest: &'m Manifest,
    opts: LoadOptions,
    plan: BatchPlan,
    epoch: u64,
    groups: std::vec::IntoIter<Vec<usize>>,
    _scalar: std::marker::PhantomData<T>,
}

impl<'m, T: Scalar> BatchIter<'m, T> {
    pub fn new(manifest: &'m Manifest, opts: LoadOptions, plan: BatchPlan, epoch: u64) -> Result<Self> {
        let groups = epoch_order(manifest.len(), &plan, epoch)?.into_iter();
        Ok(Self { manifest, opts, plan, epoch, groups, _scalar: std::marker::PhantomData })
    }
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        let group = self.groups.next()?;
        Some(load_batch(self.manifest, &group, &self.opts, &self.plan, self.epoch))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.groups.size_hint()
    }
}
