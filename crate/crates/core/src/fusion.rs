//! Majority-vote fusion of per-view partial UV atlases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Part index reserved for background / unlabeled surface.
pub const BACKGROUND: u16 = 0;

/// Index of the largest count; ties go to the lowest index. `None` when every
/// count is zero.
pub fn argmax_lowest(counts: &[u32]) -> Option<u16> {
    let mut best: Option<(usize, u32)> = None;
    for (i, &c) in counts.iter().enumerate() {
        if c > 0 && best.map_or(true, |(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    best.map(|(i, _)| i as u16)
}

/// Labels splatted from one view into UV space.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAtlas {
    pub width: usize,
    pub height: usize,
    pub parts: usize,
    /// Local mode of the splats landing on each texel.
    pub labels: Vec<Option<u16>>,
    /// Number of pixels splatted onto each texel.
    pub counts: Vec<u32>,
    /// Per-texel, per-part splat counts, `[texel * parts + part]`.
    pub label_counts: Vec<u32>,
}

impl PartialAtlas {
    pub fn empty(width: usize, height: usize, parts: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            parts,
            labels: vec![None; n],
            counts: vec![0; n],
            label_counts: vec![0; n * parts],
        }
    }

    pub fn splat(&mut self, texel: usize, label: u16) {
        self.counts[texel] += 1;
        self.label_counts[texel * self.parts + label as usize] += 1;
    }

    /// Recomputes each texel's local mode from its splat counts.
    pub fn finalize(&mut self) {
        for t in 0..self.labels.len() {
            self.labels[t] = argmax_lowest(&self.label_counts[t * self.parts..(t + 1) * self.parts]);
        }
    }

    /// Builds a partial atlas with one splat per labeled texel.
    pub fn from_labels(width: usize, height: usize, parts: usize, labels: &[Option<u16>]) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::contract("label grid does not match atlas size"));
        }
        let mut a = Self::empty(width, height, parts);
        for (t, l) in labels.iter().enumerate() {
            if let Some(l) = *l {
                if l as usize >= parts {
                    return Err(Error::contract(format!("label {l} >= part count {parts}")));
                }
                a.splat(t, l);
            }
        }
        a.finalize();
        Ok(a)
    }

    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Fused atlas with its per-texel vote tallies.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAtlas {
    pub width: usize,
    pub height: usize,
    pub parts: usize,
    pub labels: Vec<Option<u16>>,
    /// `[texel * parts + part]`.
    pub votes: Vec<u32>,
}

impl GlobalAtlas {
    pub fn valid_mask(&self) -> Vec<bool> {
        self.labels.iter().map(Option::is_some).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// Atlas with the given labels and a single vote per labeled texel.
    pub fn from_labels(width: usize, height: usize, parts: usize, labels: Vec<Option<u16>>) -> Result<Self> {
        let partial = PartialAtlas::from_labels(width, height, parts, &labels)?;
        vote(&[partial], VotePolicy::OneVotePerView)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VotePolicy {
    /// Each covering view casts one vote: its local mode at the texel.
    #[default]
    OneVotePerView,
    /// Every splatted pixel votes.
    OneVotePerSplat,
}

fn check_dims(partials: &[PartialAtlas]) -> Result<&PartialAtlas> {
    let first = partials
        .first()
        .ok_or_else(|| Error::contract("empty input: no partial atlases"))?;
    for p in partials {
        if (p.width, p.height, p.parts) != (first.width, first.height, first.parts) {
            return Err(Error::contract(format!(
                "partial atlas {}x{} (R={}) does not match {}x{} (R={})",
                p.width, p.height, p.parts, first.width, first.height, first.parts
            )));
        }
    }
    Ok(first)
}

/// Per-texel mode over views.
pub fn vote(partials: &[PartialAtlas], policy: VotePolicy) -> Result<GlobalAtlas> {
    let first = check_dims(partials)?;
    let (w, h, parts) = (first.width, first.height, first.parts);
    let mut votes = vec![0u32; w * h * parts];
    for p in partials {
        match policy {
            VotePolicy::OneVotePerView => {
                for (t, l) in p.labels.iter().enumerate() {
                    if let Some(l) = l {
                        votes[t * parts + *l as usize] += 1;
                    }
                }
            }
            VotePolicy::OneVotePerSplat => {
                for (v, c) in votes.iter_mut().zip(&p.label_counts) {
                    *v += c;
                }
            }
        }
    }
    let labels = votes.chunks(parts).map(argmax_lowest).collect();
    Ok(GlobalAtlas {
        width: w,
        height: h,
        parts,
        labels,
        votes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub views: usize,
    pub texels: usize,
    /// `histogram[k]` = number of texels seen by exactly `k` views.
    pub histogram: Vec<usize>,
    /// `at_least[k - 1]` = fraction of texels seen by at least `k` views.
    pub at_least: Vec<f64>,
}

pub fn view_counts(partials: &[PartialAtlas]) -> Result<Vec<usize>> {
    let first = check_dims(partials)?;
    let mut counts = vec![0usize; first.width * first.height];
    for p in partials {
        for (c, l) in counts.iter_mut().zip(&p.labels) {
            *c += l.is_some() as usize;
        }
    }
    Ok(counts)
}

pub fn coverage(partials: &[PartialAtlas]) -> Result<CoverageReport> {
    let counts = view_counts(partials)?;
    let m = partials.len();
    let mut histogram = vec![0usize; m + 1];
    for &c in &counts {
        histogram[c] += 1;
    }
    let texels = counts.len();
    let at_least = (1..=m)
        .map(|k| histogram[k..].iter().sum::<usize>() as f64 / texels as f64)
        .collect();
    Ok(CoverageReport {
        views: m,
        texels,
        histogram,
        at_least,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn partial(labels: &[Option<u16>]) -> PartialAtlas {
        PartialAtlas::from_labels(labels.len(), 1, 3, labels).unwrap()
    }

    #[test]
    fn single_partial_is_identity() {
        let p = partial(&[Some(1), None, Some(2), Some(0)]);
        let g = vote(&[p.clone()], VotePolicy::OneVotePerView).unwrap();
        assert_eq!(g.labels, p.labels);
    }

    #[test]
    fn strict_majority_wins() {
        let ps = [partial(&[Some(2)]), partial(&[Some(2)]), partial(&[Some(0)])];
        let g = vote(&ps, VotePolicy::OneVotePerView).unwrap();
        assert_eq!(g.labels, vec![Some(2)]);
        assert_eq!(g.votes, vec![1, 0, 2]);
    }

    #[test]
    fn ties_go_to_lowest_part() {
        let ps = [partial(&[Some(2)]), partial(&[Some(1)])];
        assert_eq!(vote(&ps, VotePolicy::OneVotePerView).unwrap().labels, vec![Some(1)]);
    }

    #[test]
    fn splat_policy_counts_pixels() {
        let mut a = PartialAtlas::empty(1, 1, 3);
        for _ in 0..3 {
            a.splat(0, 2);
        }
        a.finalize();
        let b = partial(&[Some(1)]);
        let c = partial(&[Some(1)]);
        let per_view = vote(&[a.clone(), b.clone(), c.clone()], VotePolicy::OneVotePerView).unwrap();
        let per_splat = vote(&[a, b, c], VotePolicy::OneVotePerSplat).unwrap();
        assert_eq!(per_view.labels, vec![Some(1)]);
        assert_eq!(per_splat.labels, vec![Some(2)]);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let a = partial(&[Some(1)]);
        let b = partial(&[Some(1), None]);
        assert!(matches!(vote(&[a, b], VotePolicy::OneVotePerView), Err(Error::Contract(_))));
    }

    #[test]
    fn coverage_of_one_full_partial() {
        let rep = coverage(&[partial(&[Some(0), Some(1)])]).unwrap();
        assert_eq!(rep.at_least, vec![1.0]);
        let two = coverage(&[partial(&[Some(0), Some(1)]), partial(&[None, None])]).unwrap();
        assert_eq!(two.at_least, vec![1.0, 0.0]);
    }

    #[test]
    fn coverage_of_known_overlaps() {
        let ps = [
            partial(&[Some(0), Some(1), None, None]),
            partial(&[None, Some(1), Some(2), None]),
            partial(&[None, Some(0), Some(2), None]),
        ];
        let rep = coverage(&ps).unwrap();
        assert_eq!(rep.histogram, vec![1, 1, 1, 1]);
        assert_eq!(rep.at_least, vec![0.75, 0.5, 0.25]);
    }

    #[test]
    fn coverage_of_nothing_is_an_error() {
        let err = coverage(&[]).unwrap_err();
        assert!(err.to_string().contains("empty input"));
    }
}
