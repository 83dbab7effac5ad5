//! Reference-guided noise remapping.
//!
//! A U-shaped encoder built only from instance-masked operators turns a
//! reference image into four perturbation maps (two log-variances, two
//! shifts). Pooling them per instance gives a scale and shift per
//! instance and branch that remap the standard-normal noise bank, and a KL
//! term keeps the remapped laws near the prior.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::inade::{BankVars, NoiseBank};
use crate::label_maps::{resize_nearest, InstanceMap, LabelGrid, LabelPair};
use crate::params::{Conv2d, ConvSpec, Ctx, Group, ParamStore};
use crate::tensor::Tensor;

/// Number of maps the encoder head emits: s_γ, b_γ, s_β, b_β.
pub const NUM_MAPS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationMaps {
    pub s_gamma: Tensor,
    pub b_gamma: Tensor,
    pub s_beta: Tensor,
    pub b_beta: Tensor,
}

impl PerturbationMaps {
    fn from_stacked(t: &Tensor) -> Self {
        let part = |i: usize| t.index0(i);
        Self {
            s_gamma: part(0),
            b_gamma: part(1),
            s_beta: part(2),
            b_beta: part(3),
        }
    }

    fn all(&self) -> [&Tensor; 4] {
        [&self.s_gamma, &self.b_gamma, &self.s_beta, &self.b_beta]
    }
}

/// Per-instance scales (`a > 0`) and shifts for both branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSet {
    pub a_gamma: Vec<f64>,
    pub b_gamma: Vec<f64>,
    pub a_beta: Vec<f64>,
    pub b_beta: Vec<f64>,
    /// Digest of the label pair the set was encoded against, if known.
    pub pair_digest: Option<u64>,
}

impl PerturbationSet {
    pub fn identity(num_instances: usize) -> Self {
        Self {
            a_gamma: vec![1.0; num_instances],
            b_gamma: vec![0.0; num_instances],
            a_beta: vec![1.0; num_instances],
            b_beta: vec![0.0; num_instances],
            pair_digest: None,
        }
    }

    pub fn len(&self) -> usize {
        self.a_gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_gamma.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if self.b_gamma.len() != n || self.a_beta.len() != n || self.b_beta.len() != n {
            return Err(Error::shape("perturbation vectors differ in length"));
        }
        if self
            .a_gamma
            .iter()
            .chain(&self.a_beta)
            .any(|&a| !(a > 0.0 && a.is_finite()))
        {
            return Err(Error::shape("perturbation scales must be positive and finite"));
        }
        Ok(())
    }
}

/// Stable fingerprint of a label pair's instance layout and class table.
pub fn pair_digest(pair: &LabelPair) -> u64 {
    let mut h = DefaultHasher::new();
    pair.dims().hash(&mut h);
    pair.instances().grid().data().hash(&mut h);
    pair.instance_classes().hash(&mut h);
    h.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Channel width per resolution level; `len - 1` down/up steps.
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub slope: f64,
    /// Init gain of the output head; small keeps early remapping near
    /// the identity.
    pub head_gain: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128, 128],
            kernel: 3,
            slope: 0.2,
            head_gain: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Required divisor of input height and width.
    pub fn divisor(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("encoder widths must be non-empty and positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("encoder kernel must be odd"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RemappingEncoder {
    pub config: EncoderConfig,
    input: Conv2d,
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    head: Conv2d,
}

/// Instance maps of a batch at every encoder level, each level the 2×
/// nearest downsample of the previous one.
struct LevelLabels {
    grids: Vec<Rc<Vec<Vec<u32>>>>,
    dims: Vec<(usize, usize)>,
}

fn level_labels(pairs: &[LabelPair], levels: usize) -> Result<LevelLabels> {
    let (h, w) = pairs[0].dims();
    let mut cur: Vec<LabelGrid> = pairs.iter().map(|p| p.instances().grid().clone()).collect();
    let mut grids = Vec::with_capacity(levels);
    let mut dims = Vec::with_capacity(levels);
    let (mut lh, mut lw) = (h, w);
    for lvl in 0..levels {
        if lvl > 0 {
            if lh % 2 != 0 || lw % 2 != 0 {
                return Err(Error::shape(format!(
                    "{h}×{w} cannot be halved {} times",
                    levels - 1
                )));
            }
            lh /= 2;
            lw /= 2;
            cur = cur
                .iter()
                .map(|g| resize_nearest(g, lh, lw))
                .collect::<Result<_>>()?;
        }
        grids.push(Rc::new(cur.iter().map(|g| g.data().to_vec()).collect()));
        dims.push((lh, lw));
    }
    Ok(LevelLabels { grids, dims })
}

/// Per-instance perturbation rows of one image, bound into a graph. Each
/// field has shape `[L^p]`.
#[derive(Clone, Copy, Debug)]
pub struct PerturbVars<'g> {
    pub s_gamma: Var<'g>,
    pub b_gamma: Var<'g>,
    pub s_beta: Var<'g>,
    pub b_beta: Var<'g>,
}

impl<'g> PerturbVars<'g> {
    pub fn a_gamma(&self) -> Var<'g> {
        self.s_gamma.scale(0.5).exp()
    }

    pub fn a_beta(&self) -> Var<'g> {
        self.s_beta.scale(0.5).exp()
    }

    /// Remapped bank rows `a[l]·n[l] + b[l]`.
    pub fn remap(&self, bank: BankVars<'g>) -> BankVars<'g> {
        BankVars {
            gamma: bank.gamma.row_affine(self.a_gamma(), self.b_gamma),
            beta: bank.beta.row_affine(self.a_beta(), self.b_beta),
            id: bank.id,
        }
    }

    /// `0.5·(mean_l KL_γ + mean_l KL_β)`.
    pub fn kl(&self) -> Var<'g> {
        let branch = |s: Var<'g>, b: Var<'g>| {
            s.exp()
                .add(b.square())
                .add_scalar(-1.0)
                .sub(s)
                .scale(0.5)
                .mean()
        };
        branch(self.s_gamma, self.b_gamma)
            .add(branch(self.s_beta, self.b_beta))
            .scale(0.5)
    }

    pub fn to_set(&self) -> PerturbationSet {
        let exp_half = |v: Var<'g>| v.value().data().iter().map(|s| (0.5 * s).exp()).collect();
        PerturbationSet {
            a_gamma: exp_half(self.s_gamma),
            b_gamma: self.b_gamma.value().data().to_vec(),
            a_beta: exp_half(self.s_beta),
            b_beta: self.b_beta.value().data().to_vec(),
            pair_digest: None,
        }
    }
}

impl RemappingEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let g = Group::Encoder;
        let k = config.kernel;
        let w = &config.widths;
        let input = Conv2d::new(store, "enc.in", g, ConvSpec::same(3, w[0], k), rng);
        let down = (1..w.len())
            .map(|i| Conv2d::new(store, &format!("enc.down{i}"), g, ConvSpec::same(w[i - 1], w[i], k), rng))
            .collect();
        let up = (0..w.len() - 1)
            .map(|i| {
                Conv2d::new(
                    store,
                    &format!("enc.up{i}"),
                    g,
                    ConvSpec::same(w[i + 1] + w[i], w[i], k),
                    rng,
                )
            })
            .collect();
        let head = Conv2d::new(
            store,
            "enc.head",
            g,
            ConvSpec::same(w[0], NUM_MAPS, k).gain(config.head_gain),
            rng,
        );
        Ok(Self {
            config,
            input,
            down,
            up,
            head,
        })
    }

    fn check_inputs(&self, refs: &[usize], pairs: &[LabelPair]) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::shape("empty batch"));
        }
        let (n, c, h, w) = (refs[0], refs[1], refs[2], refs[3]);
        if n != pairs.len() || c != 3 {
            return Err(Error::shape(format!(
                "reference batch {refs:?} for {} label pairs",
                pairs.len()
            )));
        }
        if pairs.iter().any(|p| p.dims() != (h, w)) {
            return Err(Error::shape("reference and label pair sizes differ"));
        }
        Ok(())
    }

    /// Perturbation maps for an N×3×H×W reference batch: N×4×H×W.
    pub fn maps<'g>(&self, ctx: &Ctx<'g, '_>, refs: Var<'g>, pairs: &[LabelPair]) -> Result<Var<'g>> {
        let shape = refs.shape();
        if shape.len() != 4 {
            return Err(Error::shape("reference batch must be N×3×H×W"));
        }
        self.check_inputs(&shape, pairs)?;
        let lv = level_labels(pairs, self.config.levels())?;
        let slope = self.config.slope;
        let mut x = self
            .input
            .forward(ctx, refs, Some(lv.grids[0].clone()))
            .leaky_relu(slope);
        let mut skips = vec![x];
        for (i, conv) in self.down.iter().enumerate() {
            x = x.masked_downsample(lv.grids[i].clone(), lv.grids[i + 1].clone());
            x = conv.forward(ctx, x, Some(lv.grids[i + 1].clone())).leaky_relu(slope);
            skips.push(x);
        }
        for i in (0..self.up.len()).rev() {
            x = x.masked_upsample(lv.grids[i + 1].clone(), lv.grids[i].clone(), lv.dims[i]);
            x = ctx.graph.concat(&[x, skips[i]], 1);
            x = self.up[i].forward(ctx, x, Some(lv.grids[i].clone())).leaky_relu(slope);
        }
        Ok(self.head.forward(ctx, x, Some(lv.grids[0].clone())))
    }

    /// Instance-pooled perturbation rows per image.
    pub fn perturbations<'g>(
        &self,
        ctx: &Ctx<'g, '_>,
        refs: Var<'g>,
        pairs: &[LabelPair],
    ) -> Result<Vec<PerturbVars<'g>>> {
        let maps = self.maps(ctx, refs, pairs)?;
        Ok(pairs
            .iter()
            .enumerate()
            .map(|(i, p)| pool_maps(maps.select(i), p))
            .collect())
    }
}

/// Instance average pooling of a 4×H×W map stack into per-instance rows.
pub(crate) fn pool_maps<'g>(maps: Var<'g>, pair: &LabelPair) -> PerturbVars<'g> {
    let l = pair.num_instances() as usize;
    let pooled = maps.label_mean_pool(Rc::new(pair.instances().grid().data().to_vec()), l);
    let row = |i: usize| pooled.narrow(0, i, 1).reshape(&[l]);
    PerturbVars {
        s_gamma: row(0),
        b_gamma: row(1),
        s_beta: row(2),
        b_beta: row(3),
    }
}

// ---- plain-tensor API ------------------------------------------------------

fn single_grid(g: &LabelGrid) -> Rc<Vec<Vec<u32>>> {
    Rc::new(vec![g.data().to_vec()])
}

/// Instance partial convolution of a Cin×H×W input with same padding.
pub fn instance_partial_conv(
    x: &Tensor,
    inst: &LabelGrid,
    weights: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    if x.rank() != 3 || weights.rank() != 4 {
        return Err(Error::shape("expected Cin×H×W input and Cout×Cin×k×k kernel"));
    }
    let (cin, h, w) = x.dims3();
    let (cout, wcin, kh, kw) = weights.dims4();
    if wcin != cin {
        return Err(Error::shape(format!("kernel expects {wcin} channels, input has {cin}")));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape("partial convolution needs an odd kernel"));
    }
    if inst.dims() != (h, w) {
        return Err(Error::shape("instance map and input sizes differ"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("bias length must equal Cout"));
        }
    }
    let g = Graph::new();
    let xv = g.constant(x.clone().reshape(&[1, cin, h, w])?);
    let out = xv.conv2d(
        g.constant(weights.clone()),
        bias.map(|b| g.constant(b.clone())),
        1,
        (kh / 2, kw / 2),
        Some(single_grid(inst)),
    );
    let v = (*out.value()).clone().reshape(&[cout, h, w])?;
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    Down,
    Up,
}

/// Instance-masked 2× resampling of a C×H×W tensor. Down averages the
/// pixels of each window that share the window center's instance; up is
/// nearest replication.
pub fn instance_masked_resample(
    x: &Tensor,
    inst: &LabelGrid,
    direction: Resample,
    factor: usize,
) -> Result<(Tensor, LabelGrid)> {
    if factor != 2 {
        return Err(Error::shape("only factor 2 is supported"));
    }
    if x.rank() != 3 {
        return Err(Error::shape("expected C×H×W input"));
    }
    let (c, h, w) = x.dims3();
    if inst.dims() != (h, w) {
        return Err(Error::shape("instance map and input sizes differ"));
    }
    let g = Graph::new();
    let xv = g.constant(x.clone().reshape(&[1, c, h, w])?);
    let (out, grid, (oh, ow)) = match direction {
        Resample::Down => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(format!("{h}×{w} is not divisible by 2")));
            }
            let coarse = resize_nearest(inst, h / 2, w / 2)?;
            let out = xv.masked_downsample(single_grid(inst), single_grid(&coarse));
            (out, coarse, (h / 2, w / 2))
        }
        Resample::Up => {
            let fine = resize_nearest(inst, h * 2, w * 2)?;
            let out = xv.masked_upsample(single_grid(inst), single_grid(&fine), (h * 2, w * 2));
            (out, fine, (h * 2, w * 2))
        }
    };
    let v = (*out.value()).clone().reshape(&[c, oh, ow])?;
    Ok((v, grid))
}

/// Mean of `map` over each instance region, indexed by label − 1.
pub fn instance_average_pool(map: &Tensor, inst: &InstanceMap) -> Result<Vec<f64>> {
    let (h, w) = inst.grid().dims();
    if map.shape() != [h, w] {
        return Err(Error::shape("map and instance map sizes differ"));
    }
    let g = Graph::new();
    let out = g
        .constant(map.clone().reshape(&[1, h, w])?)
        .label_mean_pool(
            Rc::new(inst.grid().data().to_vec()),
            inst.num_instances() as usize,
        );
    let v = out.value().data().to_vec();
    Ok(v)
}

pub fn build_perturbation_set(maps: &PerturbationMaps, inst: &InstanceMap) -> Result<PerturbationSet> {
    let pooled = maps
        .all()
        .iter()
        .map(|m| instance_average_pool(m, inst))
        .collect::<Result<Vec<_>>>()?;
    let exp_half = |v: &[f64]| v.iter().map(|s| (0.5 * s).exp()).collect();
    Ok(PerturbationSet {
        a_gamma: exp_half(&pooled[0]),
        b_gamma: pooled[1].clone(),
        a_beta: exp_half(&pooled[2]),
        b_beta: pooled[3].clone(),
        pair_digest: None,
    })
}

/// `ñ[l] = a[l]·n[l] + b[l]` per branch, broadcast over the noise channels.
pub fn remap_noise(bank: &NoiseBank, ps: &PerturbationSet) -> Result<NoiseBank> {
    ps.check()?;
    if ps.len() != bank.rows() {
        return Err(Error::shape(format!(
            "{} perturbation rows for a bank of {}",
            ps.len(),
            bank.rows()
        )));
    }
    let g = Graph::new();
    let v = |x: &[f64]| g.constant(Tensor::from_parts(vec![x.len()], x.to_vec()));
    let ng = g
        .constant(bank.n_gamma().clone())
        .row_affine(v(&ps.a_gamma), v(&ps.b_gamma));
    let nb = g
        .constant(bank.n_beta().clone())
        .row_affine(v(&ps.a_beta), v(&ps.b_beta));
    let out = NoiseBank::from_parts((*ng.value()).clone(), (*nb.value()).clone(), true)?;
    Ok(out)
}

/// KL of `N(b, a²)` from `N(0, 1)` for one scalar law.
pub fn kl_normal(a: f64, b: f64) -> f64 {
    0.5 * (a * a + b * b - 1.0 - (a * a).ln())
}

/// `0.5·(mean_l KL_γ[l] + mean_l KL_β[l])`.
pub fn kl_loss(ps: &PerturbationSet) -> Result<f64> {
    ps.check()?;
    if ps.is_empty() {
        return Err(Error::NoInstances);
    }
    let n = ps.len() as f64;
    let branch = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).map(|(&a, &b)| kl_normal(a, b)).sum::<f64>() / n
    };
    Ok(0.5 * (branch(&ps.a_gamma, &ps.b_gamma) + branch(&ps.a_beta, &ps.b_beta)))
}

/// Runs the encoder in evaluation mode on one 3×H×W reference.
pub fn encode_reference(
    enc: &RemappingEncoder,
    store: &ParamStore,
    r: &Tensor,
    pair: &LabelPair,
) -> Result<PerturbationMaps> {
    if r.rank() != 3 {
        return Err(Error::shape("reference must be 3×H×W"));
    }
    let (c, h, w) = r.dims3();
    let g = Graph::new();
    let ctx = Ctx::eval(&g, store);
    let refs = g.constant(r.clone().reshape(&[1, c, h, w])?);
    let maps = enc.maps(&ctx, refs, std::slice::from_ref(pair))?;
    let stacked = maps.value().index0(0);
    Ok(PerturbationMaps::from_stacked(&stacked))
}

/// Encodes a reference straight into a pooled perturbation set tagged with
/// the pair digest.
pub fn encode_perturbations(
    enc: &RemappingEncoder,
    store: &ParamStore,
    r: &Tensor,
    pair: &LabelPair,
) -> Result<PerturbationSet> {
    let maps = encode_reference(enc, store, r, pair)?;
    let mut ps = build_perturbation_set(&maps, pair.instances())?;
    ps.pair_digest = Some(pair_digest(pair));
    Ok(ps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_maps::{validate_pair, SemanticMask};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair_from(inst: LabelGrid, classes: &[u32]) -> LabelPair {
        let mask = LabelGrid::new(
            inst.height(),
            inst.width(),
            inst.data().iter().map(|&l| classes[l as usize - 1]).collect(),
        )
        .unwrap();
        let lm = *classes.iter().max().unwrap();
        let n = inst.max_label();
        validate_pair(
            SemanticMask::new(mask, lm).unwrap(),
            InstanceMap::new(inst, n).unwrap(),
        )
        .unwrap()
    }

    /// Three blob instances on an 8×8 grid: left half, top-right, bottom-right.
    fn blob_pair() -> LabelPair {
        let inst = LabelGrid::new(
            8,
            8,
            (0..64)
                .map(|p| {
                    let (y, x) = (p / 8, p % 8);
                    if x < 3 {
                        1
                    } else if y < 5 {
                        2
                    } else {
                        3
                    }
                })
                .collect(),
        )
        .unwrap();
        pair_from(inst, &[1, 2, 2])
    }

    #[test]
    fn partial_conv_examples() {
        let w = Tensor::ones(&[1, 1, 1, 3]);
        let x = Tensor::full(&[1, 1, 3], 5.0);
        let inst = LabelGrid::filled(1, 3, 1).unwrap();
        let y = instance_partial_conv(&x, &inst, &w, None).unwrap();
        assert_eq!(y.data()[1], 15.0);
        // edge pixel: two valid taps, renormalized by 3/2
        assert_eq!(y.data()[0], 15.0);

        let inst2 = LabelGrid::from_rows(&[[1, 1, 2]]).unwrap();
        let a = instance_partial_conv(&x, &inst2, &w, None).unwrap();
        let x2 = Tensor::new(&[1, 1, 3], vec![5.0, 5.0, -100.0]).unwrap();
        let b = instance_partial_conv(&x2, &inst2, &w, None).unwrap();
        assert_eq!(a.data()[1], b.data()[1]);
        assert_eq!(a.data()[0], b.data()[0]);
        assert!(instance_partial_conv(&x, &inst, &Tensor::ones(&[1, 1, 2, 2]), None).is_err());
    }

    #[test]
    fn masked_resample_examples() {
        let inst = LabelGrid::filled(4, 4, 1).unwrap();
        let x = Tensor::full(&[2, 4, 4], 3.0);
        let (d, di) = instance_masked_resample(&x, &inst, Resample::Down, 2).unwrap();
        assert!(d.data().iter().all(|&v| v == 3.0));
        let (u, ui) = instance_masked_resample(&d, &di, Resample::Up, 2).unwrap();
        assert_eq!(u, x);
        assert_eq!(ui, inst);

        // window center (bottom-right under half-pixel nearest) is instance 2
        let inst = LabelGrid::from_rows(&[[1, 2], [2, 2]]).unwrap();
        let x = Tensor::new(&[1, 2, 2], vec![100.0, 4.0, 6.0, 5.0]).unwrap();
        let (d, di) = instance_masked_resample(&x, &inst, Resample::Down, 2).unwrap();
        assert_eq!(di.data(), &[2]);
        assert_eq!(d.data(), &[5.0]);
        let inst = LabelGrid::from_rows(&[[2, 2], [1, 2]]).unwrap();
        let x = Tensor::new(&[1, 2, 2], vec![4.0, 6.0, 50.0, 5.0]).unwrap();
        assert_eq!(instance_masked_resample(&x, &inst, Resample::Down, 2).unwrap().0.data(), &[5.0]);
        assert!(instance_masked_resample(&Tensor::zeros(&[1, 3, 3]), &LabelGrid::filled(3, 3, 1).unwrap(), Resample::Down, 2).is_err());
    }

    #[test]
    fn average_pool_examples() {
        let inst = InstanceMap::new(LabelGrid::from_rows(&[[1, 1, 2]]).unwrap(), 2).unwrap();
        let m = Tensor::new(&[1, 3], vec![2.0, 4.0, 7.0]).unwrap();
        assert_eq!(instance_average_pool(&m, &inst).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn perturbation_set_scales() {
        let inst = InstanceMap::new(LabelGrid::from_rows(&[[1, 2]]).unwrap(), 2).unwrap();
        let s = Tensor::new(&[1, 2], vec![0.0, 2.0 * 2f64.ln()]).unwrap();
        let maps = PerturbationMaps {
            s_gamma: s.clone(),
            b_gamma: Tensor::zeros(&[1, 2]),
            s_beta: s,
            b_beta: Tensor::ones(&[1, 2]),
        };
        let ps = build_perturbation_set(&maps, &inst).unwrap();
        assert_eq!(ps.a_gamma[0], 1.0);
        assert!((ps.a_gamma[1] - 2.0).abs() < 1e-12);
        assert_eq!(ps.b_beta, vec![1.0, 1.0]);
    }

    #[test]
    fn remap_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = crate::inade::sample_noise_bank(2, 5, &mut rng).unwrap();
        let same = remap_noise(&bank, &PerturbationSet::identity(2)).unwrap();
        assert_eq!(same.n_gamma(), bank.n_gamma());
        assert!(same.is_remapped());
        let mut ps = PerturbationSet::identity(2);
        ps.b_gamma = vec![5.0, 0.0];
        let shifted = remap_noise(&bank, &ps).unwrap();
        for k in 0..5 {
            assert_eq!(shifted.n_gamma().row(0)[k], bank.n_gamma().row(0)[k] + 5.0);
            assert_eq!(shifted.n_gamma().row(1)[k], bank.n_gamma().row(1)[k]);
        }
        assert!(remap_noise(&bank, &PerturbationSet::identity(3)).is_err());
    }

    #[test]
    fn remapped_law_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = crate::inade::sample_noise_bank(1, 100_000, &mut rng).unwrap();
        let mut ps = PerturbationSet::identity(1);
        ps.a_gamma = vec![2.0];
        ps.b_gamma = vec![1.0];
        let r = remap_noise(&bank, &ps).unwrap();
        let v = r.n_gamma().data();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
        assert!((std - 2.0).abs() < 0.04, "{std}");
    }

    #[test]
    fn kl_examples() {
        let mut ps = PerturbationSet::identity(1);
        assert_eq!(kl_loss(&ps).unwrap(), 0.0);
        ps.b_gamma = vec![1.0];
        ps.b_beta = vec![1.0];
        assert!((kl_loss(&ps).unwrap() - 0.5).abs() < 1e-12);
        let mut ps = PerturbationSet::identity(1);
        ps.a_gamma = vec![2.0];
        ps.a_beta = vec![2.0];
        let closed = kl_loss(&ps).unwrap();
        assert!((closed - 0.5 * (4.0 - 1.0 - 4f64.ln())).abs() < 1e-12);

        // Monte Carlo estimate of E_q[ln q − ln p] for q = N(0, 4)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let est: f64 = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                let x = 2.0 * z;
                let ln_q = -0.5 * z * z - 2f64.ln();
                let ln_p = -0.5 * x * x;
                ln_q - ln_p
            })
            .sum::<f64>()
            / n as f64;
        assert!((est - closed).abs() < 1e-2, "mc {est} closed {closed}");
    }

    #[test]
    fn graph_kl_matches_plain() {
        let g = Graph::new();
        let v = |x: Vec<f64>| g.constant(Tensor::new(&[x.len()], x).unwrap());
        let pv = PerturbVars {
            s_gamma: v(vec![0.3, -0.2]),
            b_gamma: v(vec![0.5, 1.0]),
            s_beta: v(vec![1.0, 0.0]),
            b_beta: v(vec![-0.1, 0.2]),
        };
        let plain = kl_loss(&pv.to_set()).unwrap();
        assert!((pv.kl().value().item() - plain).abs() < 1e-12);
    }

    fn small_encoder(store: &mut ParamStore) -> RemappingEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = EncoderConfig {
            widths: vec![4, 6, 6],
            head_gain: 1.0,
            ..EncoderConfig::default()
        };
        RemappingEncoder::new(store, cfg, &mut rng).unwrap()
    }

    #[test]
    fn encoder_output_shape() {
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store);
        let pair = blob_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = Tensor::randn(&[3, 8, 8], &mut rng);
        let maps = encode_reference(&enc, &store, &r, &pair).unwrap();
        for m in maps.all() {
            assert_eq!(m.shape(), &[8, 8]);
        }
        let bad = Tensor::randn(&[3, 4, 8], &mut rng);
        assert!(encode_reference(&enc, &store, &bad, &pair).is_err());
    }

    fn random_pair(seed: u64) -> LabelPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw = vec![0u32; 64];
        // a few random rectangles over a background
        for v in raw.iter_mut() {
            *v = 1;
        }
        for lbl in 2..=4 {
            let (y0, x0) = (rng.random_range(0..7), rng.random_range(0..7));
            let (hh, ww) = (rng.random_range(1..=4), rng.random_range(1..=4));
            for y in y0..(y0 + hh).min(8) {
                for x in x0..(x0 + ww).min(8) {
                    raw[y * 8 + x] = lbl;
                }
            }
        }
        let inst = InstanceMap::compacted(&LabelGrid::new(8, 8, raw).unwrap()).unwrap();
        let n = inst.num_instances();
        let classes: Vec<u32> = (1..=n).map(|l| 1 + l % 2).collect();
        pair_from(inst.grid().clone(), &classes)
    }

    #[test]
    fn non_contamination_metamorphic() {
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..10 {
            let pair = random_pair(100 + trial);
            let r = Tensor::randn(&[3, 8, 8], &mut rng);
            let base = encode_reference(&enc, &store, &r, &pair).unwrap();
            let base_set = build_perturbation_set(&base, pair.instances()).unwrap();
            for l in 1..=pair.num_instances() {
                let mut r2 = r.clone();
                for c in 0..3 {
                    for p in 0..64 {
                        if pair.instances().grid().data()[p] != l {
                            r2.data_mut()[c * 64 + p] += rng.random_range(-2.0..2.0);
                        }
                    }
                }
                let pert = encode_reference(&enc, &store, &r2, &pair).unwrap();
                for (a, b) in base.all().iter().zip(pert.all()) {
                    for p in 0..64 {
                        if pair.instances().grid().data()[p] == l {
                            assert!((a.data()[p] - b.data()[p]).abs() < 1e-6);
                        }
                    }
                }
                let set = build_perturbation_set(&pert, pair.instances()).unwrap();
                let i = l as usize - 1;
                assert!((set.a_gamma[i] - base_set.a_gamma[i]).abs() < 1e-6);
                assert!((set.b_beta[i] - base_set.b_beta[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn encoder_gradient_check() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = EncoderConfig {
            widths: vec![2, 3],
            head_gain: 1.0,
            ..EncoderConfig::default()
        };
        let enc = RemappingEncoder::new(&mut store, cfg, &mut rng).unwrap();
        let pair = blob_pair();
        let r = Tensor::randn(&[1, 3, 8, 8], &mut rng);
        let bank = crate::inade::sample_noise_bank(3, 4, &mut rng).unwrap();
        let loss = |store: &ParamStore| -> (f64, Vec<(crate::params::ParamId, Tensor)>) {
            let g = Graph::new();
            let ctx = Ctx::train(&g, store, &[Group::Encoder]);
            let refs = g.constant(r.clone());
            let pv = enc.perturbations(&ctx, refs, std::slice::from_ref(&pair)).unwrap();
            let b = pv[0].remap(bank.bind(&g, false));
            let wts = g.constant(Tensor::from_fn(&[3, 4], |i| ((i * 7) % 5) as f64 - 2.0));
            let out = b.gamma.mul(wts).sum().add(b.beta.square().mean()).add(pv[0].kl());
            let grads = g.backward(out);
            (out.value().item(), ctx.group_grads(&grads, Group::Encoder))
        };
        let (_, grads) = loss(&store);
        let h = 1e-5;
        let mut checked = 0;
        for (id, grad) in grads {
            for j in (0..grad.numel()).step_by(7) {
                let mut plus = store.clone();
                plus.param_mut(id).data_mut()[j] += h;
                let mut minus = store.clone();
                minus.param_mut(id).data_mut()[j] -= h;
                let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
                let an = grad.data()[j];
                let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
                assert!(err < 1e-3 || (fd - an).abs() < 1e-7, "param {} [{j}]: fd {fd} an {an}", store.param_name(id));
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    proptest! {
        #[test]
        fn kl_nonnegative(s in -3.0f64..3.0, b in -3.0f64..3.0) {
            let a = (0.5 * s).exp();
            let k = kl_normal(a, b);
            prop_assert!(k >= -1e-15);
            if s.abs() > 1e-3 || b.abs() > 1e-3 {
                prop_assert!(k > 0.0);
            }
        }

        #[test]
        fn pool_matches_loop(seed in 0u64..1000) {
            let pair = random_pair(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Tensor::randn(&[8, 8], &mut rng);
            let got = instance_average_pool(&m, pair.instances()).unwrap();
            for l in 1..=pair.num_instances() {
                let vals: Vec<f64> = (0..64)
                    .filter(|&p| pair.instances().grid().data()[p] == l)
                    .map(|p| m.data()[p])
                    .collect();
                let want = vals.iter().sum::<f64>() / vals.len() as f64;
                prop_assert!((got[l as usize - 1] - want).abs() < 1e-9);
            }
        }
    }
}
