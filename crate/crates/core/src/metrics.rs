//! Diversity, segmentation-agreement and Fréchet-distance metrics.
//!
//! Noise is drawn from ChaCha8 streams split off one root seed: image `i`
//! of group `g` uses stream `g·2^32 + i` for its base bank and `z`, and
//! resample `r` of region `k` in image `i` uses stream
//! `i·2^32 + (k+1)·2^16 + r` to redraw the region's bank rows.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inade::{sample_noise_bank, NoiseBank};
use crate::label_maps::{instance_region, label_region, LabelPair, RegionMask, SemanticMask};
use crate::losses::FeatureExtractor;
use crate::tensor::Tensor;

/// Anything that maps a label pair, a noise bank and a global latent to a
/// 3×H×W image.
pub trait SynthesisModel {
    fn noise_channels(&self) -> usize;
    fn z_dim(&self) -> usize;
    fn generate(&self, pair: &LabelPair, bank: &NoiseBank, z: &[f64]) -> Result<Tensor>;
}

/// Distance between two C×H×W images, optionally restricted to a region.
pub trait PerceptualDistance {
    fn distance(&self, a: &Tensor, b: &Tensor, mask: Option<&RegionMask>) -> f64;
}

/// Mean absolute difference over the pixels of the region (all channels),
/// normalized by region size. An empty region scores 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanAbsDistance;

impl PerceptualDistance for MeanAbsDistance {
    fn distance(&self, a: &Tensor, b: &Tensor, mask: Option<&RegionMask>) -> f64 {
        assert_eq!(a.shape(), b.shape(), "distance of differently shaped images");
        let (c, h, w) = a.dims3();
        let hw = h * w;
        let mut sum = 0.0;
        let mut count = 0usize;
        for p in 0..hw {
            if mask.is_some_and(|m| !m.data()[p]) {
                continue;
            }
            count += 1;
            for k in 0..c {
                sum += (a.data()[k * hw + p] - b.data()[k * hw + p]).abs();
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / (count * c) as f64
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Base bank and latent for image `image` of group `group`.
pub fn base_noise(
    seed: u64,
    group: u64,
    image: u64,
    pair: &LabelPair,
    noise_channels: usize,
    z_dim: usize,
) -> Result<(NoiseBank, Vec<f64>)> {
    let mut rng = stream_rng(seed, (group << 32) | image);
    let bank = sample_noise_bank(pair.num_instances() as usize, noise_channels, &mut rng)?;
    let z = Tensor::randn(&[z_dim], &mut rng).into_data();
    Ok((bank, z))
}

/// Redraws `rows` (ascending instance labels) of `bank` for resample `r`
/// of region `k` in image `image`.
pub fn resample_rows(
    seed: u64,
    image: u64,
    region: u64,
    r: u64,
    bank: &NoiseBank,
    rows: &[u32],
) -> Result<NoiseBank> {
    let mut rng = stream_rng(seed, (image << 32) | ((region + 1) << 16) | r);
    let mut out = bank.clone();
    for &l in rows {
        out = out.redraw_row(l, &mut rng)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverallDiversity {
    pub score: f64,
    pub pairs: Vec<(usize, usize)>,
    pub pair_scores: Vec<f64>,
}

/// Generates `groups` result sets with independent noise and averages the
/// image-wise distance over `pairs` random group pairs.
pub fn overall_diversity(
    model: &dyn SynthesisModel,
    dataset: &[LabelPair],
    pd: &dyn PerceptualDistance,
    groups: usize,
    pairs: usize,
    seed: u64,
) -> Result<OverallDiversity> {
    if groups < 2 {
        return Err(Error::config("overall diversity needs at least 2 groups"));
    }
    if dataset.is_empty() {
        return Err(Error::config("overall diversity needs at least one label pair"));
    }
    let mut sets = Vec::with_capacity(groups);
    for g in 0..groups {
        let imgs = dataset
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (bank, z) = base_noise(seed, g as u64, i as u64, p, model.noise_channels(), model.z_dim())?;
                model.generate(p, &bank, &z)
            })
            .collect::<Result<Vec<_>>>()?;
        sets.push(imgs);
    }
    let mut rng = stream_rng(seed, u64::MAX);
    let chosen: Vec<(usize, usize)> = (0..pairs)
        .map(|_| {
            let idx = sample(&mut rng, groups, 2);
            let (a, b) = (idx.index(0), idx.index(1));
            (a.min(b), a.max(b))
        })
        .collect();
    let pair_scores: Vec<f64> = chosen
        .iter()
        .map(|&(a, b)| {
            sets[a]
                .iter()
                .zip(&sets[b])
                .map(|(x, y)| pd.distance(x, y, None))
                .sum::<f64>()
                / dataset.len() as f64
        })
        .collect();
    let score = if pair_scores.is_empty() {
        0.0
    } else {
        pair_scores.iter().sum::<f64>() / pair_scores.len() as f64
    };
    Ok(OverallDiversity {
        score,
        pairs: chosen,
        pair_scores,
    })
}

/// Inside/outside diversity of one resampled region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub image: usize,
    /// Instance label or class label, depending on the protocol.
    pub label: u32,
    pub inside: f64,
    pub outside: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionDiversity {
    pub inside: f64,
    pub outside: f64,
    pub regions: Vec<RegionScore>,
}

struct Region {
    label: u32,
    rows: Vec<u32>,
    mask: RegionMask,
}

fn region_diversity(
    model: &dyn SynthesisModel,
    dataset: &[LabelPair],
    pd: &dyn PerceptualDistance,
    resamples: usize,
    seed: u64,
    regions_of: impl Fn(&LabelPair) -> Result<Vec<Region>>,
) -> Result<RegionDiversity> {
    if dataset.is_empty() {
        return Err(Error::NoInstances);
    }
    if resamples < 2 {
        return Err(Error::config("region diversity needs at least 2 resamples"));
    }
    let mut scores = Vec::new();
    let (mut inside_sum, mut outside_sum) = (0.0, 0.0);
    for (i, pair) in dataset.iter().enumerate() {
        let regions = regions_of(pair)?;
        if regions.is_empty() {
            return Err(Error::NoInstances);
        }
        let (bank, z) = base_noise(seed, 0, i as u64, pair, model.noise_channels(), model.z_dim())?;
        let (mut img_in, mut img_out) = (0.0, 0.0);
        for (k, region) in regions.iter().enumerate() {
            let imgs = (0..resamples)
                .map(|r| {
                    let b = resample_rows(seed, i as u64, k as u64, r as u64, &bank, &region.rows)?;
                    model.generate(pair, &b, &z)
                })
                .collect::<Result<Vec<_>>>()?;
            let outside_mask = region.mask.complement();
            let (mut s_in, mut s_out, mut n) = (0.0, 0.0, 0usize);
            for a in 0..resamples {
                for b in a + 1..resamples {
                    s_in += pd.distance(&imgs[a], &imgs[b], Some(&region.mask));
                    s_out += pd.distance(&imgs[a], &imgs[b], Some(&outside_mask));
                    n += 1;
                }
            }
            let (inside, outside) = (s_in / n as f64, s_out / n as f64);
            img_in += inside;
            img_out += outside;
            scores.push(RegionScore {
                image: i,
                label: region.label,
                inside,
                outside,
            });
        }
        inside_sum += img_in / regions.len() as f64;
        outside_sum += img_out / regions.len() as f64;
    }
    let n = dataset.len() as f64;
    Ok(RegionDiversity {
        inside: inside_sum / n,
        outside: outside_sum / n,
        regions: scores,
    })
}

/// mISD / mOID: per instance, redraw only that instance's bank rows and
/// measure change inside and outside its region.
pub fn instance_diversity(
    model: &dyn SynthesisModel,
    dataset: &[LabelPair],
    pd: &dyn PerceptualDistance,
    resamples: usize,
    seed: u64,
) -> Result<RegionDiversity> {
    region_diversity(model, dataset, pd, resamples, seed, |p| {
        (1..=p.num_instances())
            .map(|l| {
                Ok(Region {
                    label: l,
                    rows: vec![l],
                    mask: instance_region(p.instances(), l)?,
                })
            })
            .collect()
    })
}

/// mCSD / mOCD: per present class, redraw the rows of all its instances.
pub fn class_diversity(
    model: &dyn SynthesisModel,
    dataset: &[LabelPair],
    pd: &dyn PerceptualDistance,
    resamples: usize,
    seed: u64,
) -> Result<RegionDiversity> {
    region_diversity(model, dataset, pd, resamples, seed, |p| {
        Ok(p
            .mask()
            .grid()
            .label_set()
            .into_iter()
            .map(|c| Region {
                label: c,
                rows: p.instances_of_class(c),
                mask: label_region(p.mask().grid(), c),
            })
            .collect())
    })
}

/// Mean IoU over classes present in either mask, and pixel accuracy.
pub fn miou_accu(pred: &SemanticMask, gt: &SemanticMask) -> Result<(f64, f64)> {
    let (pg, gg) = (pred.grid(), gt.grid());
    if pg.dims() != gg.dims() {
        return Err(Error::DimensionMismatch {
            expected: gg.dims(),
            got: pg.dims(),
        });
    }
    if pred.num_classes() != gt.num_classes() {
        return Err(Error::shape("masks use different class counts"));
    }
    let l = gt.num_classes() as usize;
    let mut inter = vec![0usize; l + 1];
    let mut union = vec![0usize; l + 1];
    let mut correct = 0usize;
    for (&p, &g) in pg.data().iter().zip(gg.data()) {
        if p == g {
            correct += 1;
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    let present: Vec<usize> = (1..=l).filter(|&c| union[c] > 0).collect();
    let miou = present.iter().map(|&c| inter[c] as f64 / union[c] as f64).sum::<f64>() / present.len() as f64;
    Ok((miou, correct as f64 / pg.data().len() as f64))
}

/// Mean and unbiased covariance of the rows of an N×D matrix.
pub fn gaussian_fit(emb: &Tensor) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = emb.dims2();
    let x = DMatrix::from_row_slice(n, d, emb.data());
    let mu = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mu;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu.transpose(), cov)
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from round-off are clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Jitter added to both covariances when either is near-singular.
pub const FID_JITTER: f64 = 1e-6;

/// Fréchet distance between two Gaussians.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let d = cov_a.nrows();
    let near_singular = |c: &DMatrix<f64>| {
        let e = SymmetricEigen::new((c + c.transpose()) * 0.5);
        e.eigenvalues.min() < 1e-10 * e.eigenvalues.max().max(1.0)
    };
    let (ca, cb) = if near_singular(cov_a) || near_singular(cov_b) {
        let j = DMatrix::<f64>::identity(d, d) * FID_JITTER;
        (cov_a + &j, cov_b + &j)
    } else {
        (cov_a.clone(), cov_b.clone())
    };
    // tr((Σa Σb)^½) = tr((Σa^½ Σb Σa^½)^½), the latter symmetric
    let sa = sqrtm_psd(&ca);
    let inner = &sa * &cb * &sa;
    let tr_sqrt = sqrtm_psd(&inner).trace();
    let diff = mu_a - mu_b;
    let v = diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    v.max(0.0)
}

/// FID between two image sets under a pluggable embedder.
pub fn fid(embedder: &dyn FeatureExtractor, set_a: &[Tensor], set_b: &[Tensor]) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::DegenerateSet("FID needs at least two images per set".into()));
    }
    let embed = |set: &[Tensor]| -> Result<Tensor> {
        let mut rows = Vec::new();
        let mut d = 0;
        for chunk in set.chunks(16) {
            let e = embedder.embed(&Tensor::stack(chunk)?);
            d = e.shape()[1];
            rows.extend_from_slice(e.data());
        }
        Tensor::new(&[set.len(), d], rows)
    };
    let (ea, eb) = (embed(set_a)?, embed(set_b)?);
    fid_from_embeddings(&ea, &eb)
}

pub fn fid_from_embeddings(ea: &Tensor, eb: &Tensor) -> Result<f64> {
    if ea.shape()[0] < 2 || eb.shape()[0] < 2 {
        return Err(Error::DegenerateSet("FID needs at least two embeddings per set".into()));
    }
    if ea.shape()[1] != eb.shape()[1] {
        return Err(Error::shape("embedding widths differ"));
    }
    if !ea.is_finite() || !eb.is_finite() {
        return Err(Error::DegenerateSet("non-finite embedding".into()));
    }
    let (ma, ca) = gaussian_fit(ea);
    let (mb, cb) = gaussian_fit(eb);
    Ok(frechet_distance(&ma, &ca, &mb, &cb))
}

/// Everything `cmd_eval` reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub lpips_overall: f64,
    pub mcsd: f64,
    pub mocd: f64,
    pub misd: f64,
    pub moid: f64,
    pub per_instance: Vec<RegionScore>,
    pub per_class: Vec<RegionScore>,
    pub groups: usize,
    pub pairs: usize,
    pub resamples: usize,
    pub seed: u64,
    pub num_images: usize,
}

pub fn diversity_report(
    model: &dyn SynthesisModel,
    dataset: &[LabelPair],
    pd: &dyn PerceptualDistance,
    groups: usize,
    pairs: usize,
    resamples: usize,
    seed: u64,
) -> Result<DiversityReport> {
    let overall = overall_diversity(model, dataset, pd, groups, pairs, seed)?;
    let inst = instance_diversity(model, dataset, pd, resamples, seed)?;
    let class = class_diversity(model, dataset, pd, resamples, seed)?;
    Ok(DiversityReport {
        lpips_overall: overall.score,
        mcsd: class.inside,
        mocd: class.outside,
        misd: inst.inside,
        moid: inst.outside,
        per_instance: inst.regions,
        per_class: class.regions,
        groups,
        pairs,
        resamples,
        seed,
        num_images: dataset.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_maps::{degenerate_instances, validate_pair, InstanceMap, LabelGrid};
    use crate::losses::RandomConvPyramid;
    use rand::{Rng, SeedableRng};

    struct Constant;
    impl SynthesisModel for Constant {
        fn noise_channels(&self) -> usize {
            4
        }
        fn z_dim(&self) -> usize {
            2
        }
        fn generate(&self, pair: &LabelPair, _: &NoiseBank, _: &[f64]) -> Result<Tensor> {
            let (h, w) = pair.dims();
            Ok(Tensor::full(&[3, h, w], 0.25))
        }
    }

    /// Fills the image with a constant derived from z[0].
    struct ZOffset(f64);
    impl SynthesisModel for ZOffset {
        fn noise_channels(&self) -> usize {
            4
        }
        fn z_dim(&self) -> usize {
            2
        }
        fn generate(&self, pair: &LabelPair, _: &NoiseBank, z: &[f64]) -> Result<Tensor> {
            let (h, w) = pair.dims();
            Ok(Tensor::full(&[3, h, w], self.0 * z[0]))
        }
    }

    /// Paints each instance region with the mean of its γ bank row.
    pub(crate) struct Painter;
    impl SynthesisModel for Painter {
        fn noise_channels(&self) -> usize {
            3
        }
        fn z_dim(&self) -> usize {
            1
        }
        fn generate(&self, pair: &LabelPair, bank: &NoiseBank, _: &[f64]) -> Result<Tensor> {
            let (h, w) = pair.dims();
            let g = pair.instances().grid();
            Ok(Tensor::from_fn(&[3, h, w], |i| {
                let l = g.data()[i % (h * w)] as usize;
                let row = bank.n_gamma().row(l - 1);
                row.iter().sum::<f64>() / row.len() as f64
            }))
        }
    }

    fn pair_8x8(seed: u64) -> LabelPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let split_y = rng.random_range(2..6);
        let split_x = rng.random_range(2..6);
        let inst: Vec<u32> = (0..64)
            .map(|p| {
                let (y, x) = (p / 8, p % 8);
                if y < split_y {
                    1
                } else if x < split_x {
                    2
                } else {
                    3
                }
            })
            .collect();
        let classes = [1u32, 2, 2];
        let mask = inst.iter().map(|&l| classes[l as usize - 1]).collect();
        validate_pair(
            SemanticMask::new(LabelGrid::new(8, 8, mask).unwrap(), 2).unwrap(),
            InstanceMap::new(LabelGrid::new(8, 8, inst).unwrap(), 3).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn distance_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[3, 4, 4], &mut rng);
        let b = Tensor::randn(&[3, 4, 4], &mut rng);
        let pd = MeanAbsDistance;
        assert_eq!(pd.distance(&a, &a, None), 0.0);
        assert_eq!(pd.distance(&a, &b, None), pd.distance(&b, &a, None));
        let m = RegionMask::from_fn(4, 4, |p| p < 5);
        let mut b2 = b.clone();
        for k in 0..3 {
            b2.data_mut()[k * 16 + 10] += 7.0;
        }
        assert_eq!(pd.distance(&a, &b, Some(&m)), pd.distance(&a, &b2, Some(&m)));
    }

    #[test]
    fn overall_stub_values() {
        let data = vec![pair_8x8(1), pair_8x8(2)];
        let r = overall_diversity(&Constant, &data, &MeanAbsDistance, 10, 10, 3).unwrap();
        assert_eq!(r.score, 0.0);
        assert_eq!(r.pairs.len(), 10);

        let delta = 0.5;
        let r = overall_diversity(&ZOffset(delta), &data, &MeanAbsDistance, 4, 6, 3).unwrap();
        let z0 = |g: u64, i: u64| base_noise(3, g, i, &data[i as usize], 4, 2).unwrap().1[0];
        let want: f64 = r
            .pairs
            .iter()
            .map(|&(a, b)| {
                (0..2)
                    .map(|i| delta * (z0(a as u64, i) - z0(b as u64, i)).abs())
                    .sum::<f64>()
                    / 2.0
            })
            .sum::<f64>()
            / 6.0;
        assert!((r.score - want).abs() < 1e-12);
        assert!(overall_diversity(&Constant, &data, &MeanAbsDistance, 1, 3, 0).is_err());
    }

    #[test]
    fn overall_invariant_to_pair_order() {
        let data = vec![pair_8x8(1)];
        let r = overall_diversity(&ZOffset(1.0), &data, &MeanAbsDistance, 5, 8, 11).unwrap();
        let mut scores = r.pair_scores.clone();
        scores.reverse();
        let rev = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!((rev - r.score).abs() < 1e-12);
        for (&(a, b), &s) in r.pairs.iter().zip(&r.pair_scores) {
            let z = |g| base_noise(11, g, 0, &data[0], 4, 2).unwrap().1[0];
            assert!((s - (z(a as u64) - z(b as u64)).abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_model_has_zero_region_diversity() {
        let data = vec![pair_8x8(3)];
        let i = instance_diversity(&Constant, &data, &MeanAbsDistance, 3, 0).unwrap();
        assert_eq!((i.inside, i.outside), (0.0, 0.0));
        let c = class_diversity(&Constant, &data, &MeanAbsDistance, 3, 0).unwrap();
        assert_eq!((c.inside, c.outside), (0.0, 0.0));
        assert!(matches!(
            instance_diversity(&Constant, &[], &MeanAbsDistance, 3, 0),
            Err(Error::NoInstances)
        ));
    }

    #[test]
    fn painter_outside_is_zero_and_inside_matches_draws() {
        let data = vec![pair_8x8(4)];
        let r = instance_diversity(&Painter, &data, &MeanAbsDistance, 3, 9).unwrap();
        assert_eq!(r.outside, 0.0);
        let (bank, _) = base_noise(9, 0, 0, &data[0], 3, 1).unwrap();
        let mut total = 0.0;
        for l in 1..=3u32 {
            let means: Vec<f64> = (0..3)
                .map(|rr| {
                    let b = resample_rows(9, 0, l as u64 - 1, rr, &bank, &[l]).unwrap();
                    b.n_gamma().row(l as usize - 1).iter().sum::<f64>() / 3.0
                })
                .collect();
            let mut s = 0.0;
            for a in 0..3 {
                for b in a + 1..3 {
                    s += (means[a] - means[b]).abs();
                }
            }
            total += s / 3.0;
        }
        assert!((r.inside - total / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_pairs_give_equal_class_and_instance_metrics() {
        for seed in 0..4 {
            let pair = pair_8x8(seed);
            let deg = degenerate_instances(pair.mask());
            let data = vec![deg];
            let i = instance_diversity(&Painter, &data, &MeanAbsDistance, 3, seed).unwrap();
            let c = class_diversity(&Painter, &data, &MeanAbsDistance, 3, seed).unwrap();
            assert_eq!(i.inside.to_bits(), c.inside.to_bits());
            assert_eq!(i.outside.to_bits(), c.outside.to_bits());
        }
    }

    #[test]
    fn miou_examples() {
        let m = |rows: &[[u32; 2]]| SemanticMask::new(LabelGrid::from_rows(rows).unwrap(), 2).unwrap();
        assert_eq!(miou_accu(&m(&[[1, 2], [2, 1]]), &m(&[[1, 2], [2, 1]])).unwrap(), (1.0, 1.0));
        assert_eq!(miou_accu(&m(&[[1, 1], [1, 1]]), &m(&[[1, 1], [2, 2]])).unwrap(), (0.25, 0.5));
        assert_eq!(miou_accu(&m(&[[1, 1], [1, 1]]), &m(&[[2, 2], [2, 2]])).unwrap(), (0.0, 0.0));
        let other = SemanticMask::new(LabelGrid::filled(1, 2, 1).unwrap(), 2).unwrap();
        assert!(matches!(
            miou_accu(&other, &m(&[[1, 1], [1, 1]])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    /// Denman–Beavers iteration for the principal square root of a
    /// general (non-symmetric) matrix.
    fn denman_beavers(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let mut y = a.clone();
        let mut z = DMatrix::<f64>::identity(n, n);
        for _ in 0..100 {
            let yi = y.clone().try_inverse().unwrap();
            let zi = z.clone().try_inverse().unwrap();
            y = (&y + zi) * 0.5;
            z = (&z + yi) * 0.5;
        }
        y
    }

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        &a * a.transpose() + DMatrix::<f64>::identity(d, d) * 0.5
    }

    #[test]
    fn matrix_sqrt_matches_denman_beavers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let a = random_spd(&mut rng, 4);
            let b = random_spd(&mut rng, 4);
            let sa = sqrtm_psd(&a);
            assert!((&sa * &sa - &a).abs().max() < 1e-9);
            let oracle = denman_beavers(&(&a * &b)).trace();
            let ours = sqrtm_psd(&(&sa * &b * &sa)).trace();
            assert!((oracle - ours).abs() < 1e-8, "{oracle} vs {ours}");
        }
    }

    #[test]
    fn fid_identity_symmetry_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Tensor::randn(&[50, 4], &mut rng);
        assert!(fid_from_embeddings(&a, &a).unwrap().abs() < 1e-6);
        let b = Tensor::randn(&[60, 4], &mut rng);
        let ab = fid_from_embeddings(&a, &b).unwrap();
        let ba = fid_from_embeddings(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);

        let n = 20_000;
        let mu = [1.0, -0.5, 0.25];
        let x = Tensor::randn(&[n, 3], &mut rng);
        let y = Tensor::from_fn(&[n, 3], |i| rng.sample::<f64, _>(rand_distr::StandardNormal) + mu[i % 3]);
        let want: f64 = mu.iter().map(|m| m * m).sum();
        let got = fid_from_embeddings(&x, &y).unwrap();
        assert!((got - want).abs() < 0.05, "{got} vs {want}");
        assert!(matches!(
            fid_from_embeddings(&Tensor::zeros(&[1, 3]), &x),
            Err(Error::DegenerateSet(_))
        ));
    }

    #[test]
    fn fid_on_images_with_pyramid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let px = RandomConvPyramid::default();
        let set: Vec<Tensor> = (0..6).map(|_| Tensor::randn(&[3, 16, 16], &mut rng)).collect();
        assert!(fid(&px, &set, &set).unwrap().abs() < 1e-6);
        let shifted: Vec<Tensor> = set.iter().map(|t| t.map(|v| v + 2.0)).collect();
        assert!(fid(&px, &set, &shifted).unwrap() > 0.0);
        assert!(fid(&px, &set[..1], &set).is_err());
    }
}
