//! Global-descriptor retrieval and mapping-frame selection.

use std::path::Path;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::frame::FrameTokens;
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Pooled frame descriptor. `usable` is false when the frame had no valid
/// token, in which case `vector` is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub vector: Vec<f64>,
    pub usable: bool,
}

/// Mean of the non-empty token descriptors, unit-normalized. A token counts
/// as empty when its descriptor is exactly zero.
pub fn global_descriptor(frame: &FrameTokens) -> Result<GlobalDescriptor> {
    if frame.token_count() == 0 {
        return Err(Error::InvalidInput(format!(
            "frame {} has no tokens",
            frame.frame_id
        )));
    }
    let width = frame.width();
    let mut sum = vec![0.0; width];
    let mut any = false;
    for t in 0..frame.token_count() {
        let d = frame.descriptor(t);
        if d.iter().all(|&x| x == 0.0) {
            continue;
        }
        any = true;
        for (s, x) in sum.iter_mut().zip(d) {
            *s += x;
        }
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !any || norm == 0.0 {
        return Ok(GlobalDescriptor {
            vector: vec![0.0; width],
            usable: false,
        });
    }
    // The 1/count factor cancels under normalization.
    Ok(GlobalDescriptor {
        vector: sum.into_iter().map(|x| x / norm).collect(),
        usable: true,
    })
}

/// Exhaustive cosine-similarity index over frames.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<u64>,
    /// `ids.len() × width`, unit rows.
    descriptors: Vec<f64>,
    width: usize,
}

impl RetrievalIndex {
    pub fn new(width: usize) -> Self {
        Self {
            ids: Vec::new(),
            descriptors: Vec::new(),
            width,
        }
    }

    pub fn insert(&mut self, id: u64, descriptor: &[f64]) -> Result<()> {
        if descriptor.len() != self.width {
            return Err(Error::Shape(format!(
                "descriptor width {} in an index of width {}",
                descriptor.len(),
                self.width
            )));
        }
        let norm = descriptor.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "descriptor of frame {id} has norm {norm}"
            )));
        }
        if self.ids.contains(&id) {
            return Err(Error::InvalidInput(format!(
                "frame id {id} already indexed"
            )));
        }
        self.ids.push(id);
        self.descriptors.extend_from_slice(descriptor);
        Ok(())
    }

    /// Indexes every frame with a usable descriptor; returns the index and the
    /// ids of the skipped frames.
    pub fn build<'a, I>(frames: I) -> Result<(Self, Vec<u64>)>
    where
        I: IntoIterator<Item = &'a FrameTokens>,
    {
        let mut index: Option<Self> = None;
        let mut skipped = Vec::new();
        for f in frames {
            let g = global_descriptor(f)?;
            let idx = index.get_or_insert_with(|| Self::new(f.width()));
            if g.usable {
                idx.insert(f.frame_id, &g.vector)?;
            } else {
                skipped.push(f.frame_id);
            }
        }
        let index = index.ok_or_else(|| Error::InvalidInput("no frames to index".into()))?;
        Ok((index, skipped))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        &self.descriptors[i * self.width..(i + 1) * self.width]
    }

    /// Cosine similarity of every indexed frame to `query`.
    pub fn similarities(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.width {
            return Err(Error::Shape(format!(
                "query width {} against index width {}",
                query.len(),
                self.width
            )));
        }
        let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if qn == 0.0 {
            return Err(Error::InvalidInput("zero query descriptor".into()));
        }
        Ok((0..self.len())
            .map(|i| {
                self.descriptor(i)
                    .iter()
                    .zip(query)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / qn
            })
            .collect())
    }

    /// The `k` most similar frame ids, most similar first; equal scores are
    /// ordered by ascending id.
    pub fn topk(&self, query: &[f64], k: usize) -> Result<Vec<u64>> {
        if self.is_empty() {
            return Err(Error::InvalidInput("empty index".into()));
        }
        if k < 1 || k > self.len() {
            return Err(Error::OutOfBounds(format!(
                "k = {k} with {} indexed frames",
                self.len()
            )));
        }
        let sims = self.similarities(query)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            sims[b]
                .total_cmp(&sims[a])
                .then(self.ids[a].cmp(&self.ids[b]))
        });
        Ok(order[..k].iter().map(|&i| self.ids[i]).collect())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("index");
        c.put_u64s("ids", self.ids.clone());
        c.put_tensor(
            "descriptors",
            Tensor::matrix(self.len(), self.width, self.descriptors.clone()).expect("index shape"),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("index")?;
        let ids = c.u64s("ids")?;
        let d = c.tensor("descriptors")?;
        if d.shape().len() != 2 || d.shape()[0] != ids.len() {
            return Err(Error::Format(format!(
                "{} ids but descriptor block {:?}",
                ids.len(),
                d.shape()
            )));
        }
        let mut index = Self::new(d.shape()[1]);
        for (i, &id) in ids.iter().enumerate() {
            index.insert(id, d.row(i))?;
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionStrategy {
    Retrieval,
    Random,
    Uniform,
}

impl std::str::FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieval" => Ok(Self::Retrieval),
            "random" => Ok(Self::Random),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::Config(format!(
                "unknown selection strategy {other:?} (retrieval, random or uniform)"
            ))),
        }
    }
}

impl std::fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Retrieval => "retrieval",
            Self::Random => "random",
            Self::Uniform => "uniform",
        })
    }
}

/// Indices `0, s, 2s, …` with `s = ⌊len / k⌋`.
pub fn uniform_indices(len: usize, k: usize) -> Result<Vec<usize>> {
    if k < 1 || k > len {
        return Err(Error::OutOfBounds(format!(
            "cannot pick {k} of {len} frames"
        )));
    }
    let step = len / k;
    Ok((0..k).map(|i| i * step).collect())
}

/// Picks `k` of `frames` (in mapping-sequence order) and returns their ids.
pub fn select_mapping_frames(
    frames: &[FrameTokens],
    strategy: SelectionStrategy,
    k: usize,
    query: &FrameTokens,
    seed: u64,
) -> Result<Vec<u64>> {
    if k < 1 || k > frames.len() {
        return Err(Error::OutOfBounds(format!(
            "cannot pick {k} of {} frames",
            frames.len()
        )));
    }
    match strategy {
        SelectionStrategy::Retrieval => {
            let (index, _) = RetrievalIndex::build(frames)?;
            let q = global_descriptor(query)?;
            if !q.usable {
                return Err(Error::InvalidInput(format!(
                    "query frame {} has no valid tokens to retrieve with",
                    query.frame_id
                )));
            }
            index.topk(&q.vector, k)
        }
        SelectionStrategy::Random => {
            let mut rng = rng_for(seed, &[query.frame_id]);
            let picks = rand::seq::index::sample(&mut rng, frames.len(), k);
            Ok(picks.iter().map(|i| frames[i].frame_id).collect())
        }
        SelectionStrategy::Uniform => Ok(uniform_indices(frames.len(), k)?
            .into_iter()
            .map(|i| frames[i].frame_id)
            .collect()),
    }
}

/// Every `rate`-th item, starting with the first.
pub fn subsample<T: Clone>(frames: &[T], rate: usize) -> Result<Vec<T>> {
    if rate < 1 {
        return Err(Error::InvalidInput(
            "subsampling rate must be at least 1".into(),
        ));
    }
    Ok(frames.iter().step_by(rate).cloned().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_spacing() {
        assert_eq!(
            uniform_indices(100, 20).unwrap(),
            (0..20).map(|i| 5 * i).collect::<Vec<_>>()
        );
        assert_eq!(uniform_indices(7, 3).unwrap(), vec![0, 2, 4]);
        assert!(uniform_indices(3, 4).is_err());
    }

    #[test]
    fn subsample_counts() {
        let v: Vec<usize> = (0..3700).collect();
        assert_eq!(subsample(&v, 15).unwrap().len(), 247);
        assert_eq!(subsample(&v, 1).unwrap(), v);
        assert_eq!(subsample(&v, 5000).unwrap(), vec![0]);
        assert!(subsample(&v, 0).is_err());
    }

    #[test]
    fn ties_by_id() {
        let mut idx = RetrievalIndex::new(2);
        idx.insert(7, &[1.0, 0.0]).unwrap();
        idx.insert(3, &[1.0, 0.0]).unwrap();
        idx.insert(5, &[0.0, 1.0]).unwrap();
        assert_eq!(idx.topk(&[1.0, 0.0], 3).unwrap(), vec![3, 7, 5]);
        assert!(idx.topk(&[1.0, 0.0], 0).is_err());
        assert!(idx.topk(&[1.0, 0.0], 4).is_err());
        assert!(idx.insert(3, &[0.0, 1.0]).is_err());
    }
}
