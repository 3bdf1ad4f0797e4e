//! Input-gradient saliency of the trained encoder, aggregated over atlas
//! regions, ranked, and compared across subjects.

use rayon::prelude::*;

use crate::encoder::{backward, forward, EncoderParams, Example};
use crate::error::{Error, Result};
use crate::stats;
use crate::tensor::Tensor;

/// Integer region labels over a volume; 0 is background, regions are `1..=R`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtlasVolume {
    extents: [usize; 3],
    labels: Vec<u32>,
    regions: u32,
}

impl AtlasVolume {
    /// Every label in `1..=max` must occur at least once.
    pub fn new(extents: [usize; 3], labels: Vec<u32>) -> Result<Self> {
        let regions = labels.iter().copied().max().unwrap_or(0);
        Self::with_regions(extents, labels, regions)
    }

    pub fn with_regions(extents: [usize; 3], labels: Vec<u32>, regions: u32) -> Result<Self> {
        let n = extents.iter().product::<usize>();
        if n == 0 || labels.len() != n {
            return Err(Error::shape(format!(
                "atlas {extents:?} needs {n} labels, got {}",
                labels.len()
            )));
        }
        let mut present = vec![false; regions as usize + 1];
        for (i, &l) in labels.iter().enumerate() {
            if l > regions {
                return Err(Error::Data(format!(
                    "voxel {i}: label {l} outside 1..={regions}"
                )));
            }
            present[l as usize] = true;
        }
        if let Some(missing) = (1..=regions as usize).find(|&r| !present[r]) {
            return Err(Error::Data(format!("atlas label {missing} has no voxels")));
        }
        Ok(Self {
            extents,
            labels,
            regions,
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn regions(&self) -> u32 {
        self.regions
    }

    pub fn voxel_count(&self, label: u32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Flat indices of voxels carrying any of `labels`.
    pub fn voxels_in(&self, labels: &[u32]) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| labels.contains(l))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Sum over examples of `|d(0.5 ||mu(x) - y||^2) / dx|` per voxel.
pub fn voxel_saliency(params: &EncoderParams, dataset: &[Example]) -> Result<Tensor> {
    let ext = params.config.input;
    let d = params.config.latent_dim;
    let parts = dataset
        .par_iter()
        .map(|ex| {
            if ex.target.len() != d {
                return Err(Error::shape(format!(
                    "target of length {} for latent dim {d}",
                    ex.target.len()
                )));
            }
            let trace = forward(&ex.volume, params)?;
            let g: Vec<f64> = trace
                .dist
                .mean
                .iter()
                .zip(&ex.target)
                .map(|(m, y)| m - y)
                .collect();
            let grads = backward(&trace, params, &g, &vec![0.0; d], true)?;
            let input = grads.input.expect("input gradient requested");
            Ok(input.into_data())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Tensor::zeros(&ext);
    for p in parts {
        for (o, v) in out.data_mut().iter_mut().zip(p) {
            *o += v.abs();
        }
    }
    Ok(out)
}

/// Saliency of `dataset` aggregated over the regions of `atlas`.
pub fn make_region_scores(
    params: &EncoderParams,
    dataset: &[Example],
    atlas: &AtlasVolume,
    subject: &str,
) -> Result<RegionScores> {
    region_aggregate(&voxel_saliency(params, dataset)?, atlas, subject)
}

/// Aggregated saliency per region; `scores[r - 1]` belongs to label `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionScores {
    pub subject: String,
    pub scores: Vec<f64>,
}

impl RegionScores {
    pub fn score(&self, label: u32) -> Option<f64> {
        self.scores.get((label as usize).checked_sub(1)?).copied()
    }
}

pub fn region_aggregate(
    saliency: &Tensor,
    atlas: &AtlasVolume,
    subject: &str,
) -> Result<RegionScores> {
    if saliency.dims() != atlas.extents {
        return Err(Error::shape(format!(
            "saliency {:?} but atlas {:?}",
            saliency.dims(),
            atlas.extents
        )));
    }
    let mut scores = vec![0.0; atlas.regions as usize];
    for (i, (&s, &l)) in saliency.data().iter().zip(&atlas.labels).enumerate() {
        if l == 0 {
            continue;
        }
        let slot = scores
            .get_mut(l as usize - 1)
            .ok_or_else(|| Error::Data(format!("voxel {i}: label {l} outside atlas")))?;
        *slot += s;
    }
    Ok(RegionScores {
        subject: subject.to_string(),
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedRegion {
    pub label: u32,
    pub score: f64,
    /// Score in units of the `n`-th ranked score.
    pub relative: f64,
}

/// The `n` highest-scoring regions, ties by ascending label.
pub fn top_regions(scores: &RegionScores, n: usize) -> Result<Vec<RankedRegion>> {
    let r = scores.scores.len();
    if n == 0 || n > r {
        return Err(Error::config(format!("cannot rank top {n} of {r} regions")));
    }
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .total_cmp(&scores.scores[a])
            .then(a.cmp(&b))
    });
    order.truncate(n);
    let unit = scores.scores[order[n - 1]];
    Ok(order
        .into_iter()
        .map(|i| {
            let s = scores.scores[i];
            let relative = if unit > 0.0 {
                s / unit
            } else if s == 0.0 {
                1.0
            } else {
                f64::INFINITY
            };
            RankedRegion {
                label: i as u32 + 1,
                score: s,
                relative,
            }
        })
        .collect())
}

/// Spearman correlation between two subjects' region scores.
pub fn spearman(a: &RegionScores, b: &RegionScores) -> Result<f64> {
    stats::spearman(&a.scores, &b.scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::rng::stream;
    use crate::tensor::{relative_error, Tensor};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            input: [8, 8, 8],
            filters: [2, 2, 3],
            kernels: [3, 1, 1],
            latent_dim: 3,
            logvar_clamp: 10.0,
        }
    }

    fn example(seed: u64) -> Example {
        let mut rng = stream(seed, &[]);
        Example {
            volume: Tensor::from_vec(
                &[8, 8, 8],
                (0..512).map(|_| rng.sample(StandardNormal)).collect(),
            )
            .unwrap(),
            target: vec![0.5, -1.0, 2.0],
        }
    }

    #[test]
    fn dead_network_has_zero_saliency() {
        let mut p = EncoderParams::init(tiny(), 1).unwrap();
        p.conv[0] = Tensor::zeros(p.conv[0].dims());
        let s = voxel_saliency(&p, &[example(2)]).unwrap();
        assert_eq!(s.max_abs(), 0.0);
    }

    #[test]
    fn saliency_matches_finite_differences() {
        let p = EncoderParams::init(tiny(), 3).unwrap();
        let ex = example(4);
        let s = voxel_saliency(&p, std::slice::from_ref(&ex)).unwrap();
        let loss = |v: &Tensor| {
            let m = forward(v, &p).unwrap().dist.mean;
            0.5 * m
                .iter()
                .zip(&ex.target)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in (0..512).step_by(7) {
            let mut up = ex.volume.clone();
            up.data_mut()[i] += h;
            let mut dn = ex.volume.clone();
            dn.data_mut()[i] -= h;
            let fd = ((loss(&up) - loss(&dn)) / (2.0 * h)).abs();
            worst = worst.max(relative_error(s.data()[i], fd, 1e-6));
        }
        assert!(worst < 1e-3, "{worst}");
        let two = voxel_saliency(&p, &[ex.clone(), ex]).unwrap();
        for (a, b) in two.data().iter().zip(s.data()) {
            assert!((a - 2.0 * b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    fn atlas() -> AtlasVolume {
        AtlasVolume::new([1, 2, 3], vec![0, 1, 1, 2, 3, 3]).unwrap()
    }

    #[test]
    fn atlas_validation() {
        assert!(AtlasVolume::new([1, 1, 3], vec![0, 1, 3]).is_err());
        assert!(AtlasVolume::with_regions([1, 1, 2], vec![1, 3], 2).is_err());
        assert!(AtlasVolume::new([1, 1, 2], vec![1]).is_err());
        assert_eq!(atlas().voxel_count(3), 2);
        assert_eq!(atlas().voxels_in(&[2, 3]), vec![3, 4, 5]);
    }

    #[test]
    fn aggregation_examples() {
        let a = atlas();
        let ones = Tensor::full(&[1, 2, 3], 1.0);
        let r = region_aggregate(&ones, &a, "s").unwrap();
        assert_eq!(r.scores, vec![2.0, 1.0, 2.0]);
        let only3 = Tensor::from_vec(&[1, 2, 3], vec![5.0, 0.0, 0.0, 0.0, 1.0, 2.0]).unwrap();
        let r = region_aggregate(&only3, &a, "s").unwrap();
        assert_eq!(r.scores, vec![0.0, 0.0, 3.0]);
        // Relabel 1 <-> 3.
        let b = AtlasVolume::new([1, 2, 3], vec![0, 3, 3, 2, 1, 1]).unwrap();
        assert_eq!(
            region_aggregate(&only3, &b, "s").unwrap().scores,
            vec![3.0, 0.0, 0.0]
        );
        assert!(region_aggregate(&Tensor::zeros(&[2, 3]), &a, "s").is_err());
    }

    #[test]
    fn ranking_examples() {
        let s = RegionScores {
            subject: "a".into(),
            scores: vec![1.0, 4.0, 2.0, 8.0],
        };
        let top = top_regions(&s, 3).unwrap();
        assert_eq!(
            top.iter().map(|r| r.label).collect::<Vec<_>>(),
            vec![4, 2, 3]
        );
        assert_eq!(top[0].relative, 4.0);
        assert_eq!(top[2].relative, 1.0);
        let eq = RegionScores {
            subject: "b".into(),
            scores: vec![1.0; 5],
        };
        let labels: Vec<u32> = top_regions(&eq, 3)
            .unwrap()
            .iter()
            .map(|r| r.label)
            .collect();
        assert_eq!(labels, vec![1, 2, 3]);
        assert_eq!(top_regions(&eq, 5).unwrap().len(), 5);
        assert!(top_regions(&eq, 6).is_err());
    }

    #[test]
    fn mass_conserved() {
        let mut rng = stream(9, &[]);
        let sal =
            Tensor::from_vec(&[1, 2, 3], (0..6).map(|_| rng.random::<f64>()).collect()).unwrap();
        let r = region_aggregate(&sal, &atlas(), "s").unwrap();
        let labeled: f64 = sal.data()[1..].iter().sum();
        assert!((r.scores.iter().sum::<f64>() - labeled).abs() < 1e-12);
    }
}
