//! Adversarial, feature-matching, perceptual and KL objectives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_fm: f64,
    pub lambda_perc: f64,
    pub lambda_kl: f64,
    /// First discriminator layer (1-based) used for feature matching.
    pub fm_start: usize,
    /// First extractor stage (1-based) used for the perceptual term.
    pub perc_start: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_fm: 10.0,
            lambda_perc: 10.0,
            lambda_kl: 0.05,
            fm_start: 3,
            perc_start: 3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_fm, self.lambda_perc, self.lambda_kl]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if self.fm_start == 0 || self.perc_start == 0 {
            return Err(Error::config("fm_start and perc_start are 1-based"));
        }
        Ok(())
    }
}

/// Fixed image → feature-list map used by the perceptual loss and the FID
/// embedding. Stages are N×C×H×W.
pub trait FeatureExtractor {
    fn features<'g>(&self, graph: &'g Graph, images: Var<'g>) -> Vec<Var<'g>>;

    fn num_stages(&self) -> usize;

    /// Global-average-pooled, concatenated stage features per image (N×D).
    fn embed(&self, images: &Tensor) -> Tensor {
        let g = Graph::new();
        let feats = self.features(&g, g.constant(images.clone()));
        let n = images.shape()[0];
        let mut rows = vec![Vec::new(); n];
        for f in feats {
            let v = f.value();
            let (_, c, h, w) = v.dims4();
            for (i, row) in rows.iter_mut().enumerate() {
                for k in 0..c {
                    let s = &v.data()[(i * c + k) * h * w..(i * c + k + 1) * h * w];
                    row.push(s.iter().sum::<f64>() / (h * w) as f64);
                }
            }
        }
        let d = rows[0].len();
        Tensor::new(&[n, d], rows.concat()).expect("embedding rows")
    }
}

/// `V(x) = x`, a single stage.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features<'g>(&self, _graph: &'g Graph, images: Var<'g>) -> Vec<Var<'g>> {
        vec![images]
    }

    fn num_stages(&self) -> usize {
        1
    }
}

pub const PYRAMID_SEED: u64 = 0x1A_DE_5EED;
pub const PYRAMID_WIDTHS: [usize; 4] = [16, 32, 64, 64];

/// Frozen random-weight pyramid of stride-2 3×3 convolutions with leaky
/// activations. Weights come from [`PYRAMID_SEED`] unless given another
/// seed, so every run sees the same extractor.
#[derive(Clone, Debug)]
pub struct RandomConvPyramid {
    weights: Vec<Tensor>,
    seed: u64,
}

impl Default for RandomConvPyramid {
    fn default() -> Self {
        Self::new(PYRAMID_SEED, &PYRAMID_WIDTHS)
    }
}

impl RandomConvPyramid {
    pub fn new(seed: u64, widths: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let weights = widths
            .iter()
            .map(|&c| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let w = Tensor::randn(&[c, cin, 3, 3], &mut rng).map(|v| v * std);
                cin = c;
                w
            })
            .collect();
        Self { weights, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl FeatureExtractor for RandomConvPyramid {
    fn features<'g>(&self, graph: &'g Graph, images: Var<'g>) -> Vec<Var<'g>> {
        let mut x = images;
        self.weights
            .iter()
            .map(|w| {
                x = x.conv2d(graph.constant(w.clone()), None, 2, (1, 1), None).leaky_relu(0.2);
                x
            })
            .collect()
    }

    fn num_stages(&self) -> usize {
        self.weights.len()
    }
}

fn scale_mean<'g>(terms: Vec<Var<'g>>) -> Var<'g> {
    let n = terms.len() as f64;
    let mut it = terms.into_iter();
    let first = it.next().expect("at least one scale");
    it.fold(first, |a, b| a.add(b)).scale(1.0 / n)
}

/// Mean over scales of `mean(relu(1 − real)) + mean(relu(1 + fake))`.
pub fn hinge_d_loss<'g>(real_logits: &[Var<'g>], fake_logits: &[Var<'g>]) -> Var<'g> {
    assert_eq!(real_logits.len(), fake_logits.len(), "scale count");
    scale_mean(
        real_logits
            .iter()
            .zip(fake_logits)
            .map(|(r, f)| {
                r.neg().add_scalar(1.0).relu().mean().add(f.add_scalar(1.0).relu().mean())
            })
            .collect(),
    )
}

/// `−mean(D(fake))`, averaged over scales.
pub fn hinge_g_loss<'g>(fake_logits: &[Var<'g>]) -> Var<'g> {
    scale_mean(fake_logits.iter().map(|f| f.mean().neg()).collect())
}

/// Sum over layers `fm_start..=E_D` of the mean absolute feature gap,
/// averaged over scales. Real features are detached.
pub fn feature_matching_loss<'g>(
    real_feats: &[Vec<Var<'g>>],
    fake_feats: &[Vec<Var<'g>>],
    fm_start: usize,
) -> Result<Var<'g>> {
    if real_feats.len() != fake_feats.len() || real_feats.is_empty() {
        return Err(Error::shape("feature lists differ in scale count"));
    }
    let mut per_scale = Vec::with_capacity(real_feats.len());
    for (r, f) in real_feats.iter().zip(fake_feats) {
        let depth = r.len();
        if f.len() != depth {
            return Err(Error::shape("feature lists differ in depth"));
        }
        if fm_start == 0 || fm_start > depth {
            return Err(Error::IndexOutOfRange {
                index: fm_start,
                max: depth,
            });
        }
        let mut acc: Option<Var<'g>> = None;
        for i in fm_start - 1..depth {
            let term = f[i].l1_mean(r[i].detach());
            acc = Some(match acc {
                Some(a) => a.add(term),
                None => term,
            });
        }
        per_scale.push(acc.expect("non-empty layer range"));
    }
    Ok(scale_mean(per_scale))
}

/// Sum over stages `perc_start..=E_V` of the mean absolute feature gap.
pub fn perceptual_loss<'g>(
    fx: &dyn FeatureExtractor,
    real: Var<'g>,
    fake: Var<'g>,
    perc_start: usize,
) -> Result<Var<'g>> {
    if real.shape() != fake.shape() {
        return Err(Error::shape("real and fake images differ in shape"));
    }
    let n = fx.num_stages();
    if perc_start == 0 || perc_start > n {
        return Err(Error::IndexOutOfRange {
            index: perc_start,
            max: n,
        });
    }
    let g = real.graph();
    let rf = fx.features(g, real.detach());
    let ff = fx.features(g, fake);
    let mut acc: Option<Var<'g>> = None;
    for i in perc_start - 1..n {
        let term = ff[i].l1_mean(rf[i].detach());
        acc = Some(match acc {
            Some(a) => a.add(term),
            None => term,
        });
    }
    Ok(acc.expect("non-empty stage range"))
}

/// Generator-side loss terms before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub hinge_g: f64,
    pub feature_matching: f64,
    pub perceptual: f64,
    pub kl: f64,
}

/// `hinge_g + λ_fm·FM + λ_perc·P + λ_kl·KL`.
pub fn total_generator_objective(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.hinge_g
        + w.lambda_fm * parts.feature_matching
        + w.lambda_perc * parts.perceptual
        + w.lambda_kl * parts.kl
}

/// Graph form of [`total_generator_objective`].
pub fn weighted_total<'g>(
    hinge_g: Var<'g>,
    fm: Var<'g>,
    perc: Var<'g>,
    kl: Var<'g>,
    w: &LossWeights,
) -> Var<'g> {
    hinge_g
        .add(fm.scale(w.lambda_fm))
        .add(perc.scale(w.lambda_perc))
        .add(kl.scale(w.lambda_kl))
}
