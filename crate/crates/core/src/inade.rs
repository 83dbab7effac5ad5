//! Instance-adaptive denormalization.
//!
//! Per semantic class `c` and channel `k`, a layer holds an affine noise
//! law `γ = a_γ[c,k]·n̂ + b_γ[c,k]` (likewise for β). One standard-normal
//! noise bank of `L^p × C^0` rows is drawn per image and shared by every
//! layer; each layer maps it to its own depth with a bias-free linear
//! transform, samples per-instance modulation rows, scatters them onto the
//! resized instance map and applies them after parameter-free batch
//! normalization.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::label_maps::{resize_nearest, LabelGrid, LabelPair};
use crate::params::{BufferId, Ctx, Group, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
/// Default number of initial noise channels `C^0`.
pub const DEFAULT_NOISE_CHANNELS: usize = 64;

static NEXT_BANK_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_bank_id() -> u64 {
    NEXT_BANK_ID.fetch_add(1, Ordering::Relaxed)
}

/// Per-class noise laws of one layer, each `L^m × C^i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionParams {
    pub a_gamma: Tensor,
    pub b_gamma: Tensor,
    pub a_beta: Tensor,
    pub b_beta: Tensor,
}

impl DistributionParams {
    /// `a = 1`, `b_γ = 1`, `b_β = 0`: unit-mean scale, zero-mean shift.
    pub fn initial(num_classes: usize, channels: usize) -> Self {
        Self {
            a_gamma: Tensor::ones(&[num_classes, channels]),
            b_gamma: Tensor::ones(&[num_classes, channels]),
            a_beta: Tensor::ones(&[num_classes, channels]),
            b_beta: Tensor::zeros(&[num_classes, channels]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.a_gamma.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.a_gamma.shape()[1]
    }

    fn check(&self) -> Result<()> {
        let s = self.a_gamma.shape();
        if s.len() != 2
            || [&self.b_gamma, &self.a_beta, &self.b_beta]
                .iter()
                .any(|t| t.shape() != s)
        {
            return Err(Error::shape("distribution parameters must share an L^m×C shape"));
        }
        Ok(())
    }
}

/// Bias-free maps from the shared noise to a layer's depth, each `C^0 × C^i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTransform {
    pub f_gamma: Tensor,
    pub f_beta: Tensor,
}

impl LayerTransform {
    /// Gaussian init with std `1/√C^0`, so transformed noise has roughly
    /// unit variance per channel.
    pub fn initial<R: Rng + ?Sized>(noise_channels: usize, channels: usize, rng: &mut R) -> Self {
        let std = 1.0 / (noise_channels as f64).sqrt();
        Self {
            f_gamma: Tensor::randn(&[noise_channels, channels], rng).map(|v| v * std),
            f_beta: Tensor::randn(&[noise_channels, channels], rng).map(|v| v * std),
        }
    }

    pub fn noise_channels(&self) -> usize {
        self.f_gamma.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.f_gamma.shape()[1]
    }

    /// Euclidean norm of column `k` of the γ transform.
    pub fn gamma_column_norm(&self, k: usize) -> f64 {
        column_norm(&self.f_gamma, k)
    }

    pub fn beta_column_norm(&self, k: usize) -> f64 {
        column_norm(&self.f_beta, k)
    }
}

fn column_norm(m: &Tensor, k: usize) -> f64 {
    let (r, _) = m.dims2();
    (0..r).map(|i| m.row(i)[k].powi(2)).sum::<f64>().sqrt()
}

/// The per-image noise matrices `N_γ`, `N_β` (`L^p × C^0`).
#[derive(Clone, Debug)]
pub struct NoiseBank {
    n_gamma: Tensor,
    n_beta: Tensor,
    seed: Option<u64>,
    remapped: bool,
    id: u64,
}

impl PartialEq for NoiseBank {
    /// Value equality; the identity tag is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.n_gamma == other.n_gamma
            && self.n_beta == other.n_beta
            && self.seed == other.seed
            && self.remapped == other.remapped
    }
}

impl NoiseBank {
    pub fn from_parts(n_gamma: Tensor, n_beta: Tensor, remapped: bool) -> Result<Self> {
        if n_gamma.rank() != 2 || n_gamma.shape() != n_beta.shape() {
            return Err(Error::shape("noise matrices must share an L^p×C^0 shape"));
        }
        Ok(Self {
            n_gamma,
            n_beta,
            seed: None,
            remapped,
            id: fresh_bank_id(),
        })
    }

    pub fn n_gamma(&self) -> &Tensor {
        &self.n_gamma
    }

    pub fn n_beta(&self) -> &Tensor {
        &self.n_beta
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn is_remapped(&self) -> bool {
        self.remapped
    }

    /// Identity tag; every constructed or modified bank gets a new one.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn rows(&self) -> usize {
        self.n_gamma.shape()[0]
    }

    pub fn noise_channels(&self) -> usize {
        self.n_gamma.shape()[1]
    }

    /// Copy with both branches of instance `label` replaced.
    pub fn with_row(&self, label: u32, gamma: &[f64], beta: &[f64]) -> Result<Self> {
        let l = label as usize;
        if l == 0 || l > self.rows() {
            return Err(Error::LabelOutOfRange {
                label,
                max: self.rows() as u32,
            });
        }
        if gamma.len() != self.noise_channels() || beta.len() != self.noise_channels() {
            return Err(Error::shape("replacement row length must equal C^0"));
        }
        let mut out = self.clone();
        out.n_gamma.row_mut(l - 1).copy_from_slice(gamma);
        out.n_beta.row_mut(l - 1).copy_from_slice(beta);
        out.id = fresh_bank_id();
        out.seed = None;
        Ok(out)
    }

    /// Copy with instance `label` redrawn from `rng` (γ row, then β row).
    pub fn redraw_row<R: Rng + ?Sized>(&self, label: u32, rng: &mut R) -> Result<Self> {
        let c0 = self.noise_channels();
        let g = Tensor::randn(&[c0], rng);
        let b = Tensor::randn(&[c0], rng);
        self.with_row(label, g.data(), b.data())
    }

    /// Bank rows as graph leaves.
    pub fn bind<'g>(&self, graph: &'g Graph, requires_grad: bool) -> BankVars<'g> {
        BankVars {
            gamma: graph.leaf(self.n_gamma.clone(), requires_grad),
            beta: graph.leaf(self.n_beta.clone(), requires_grad),
            id: self.id,
        }
    }
}

/// I.i.d. standard-normal bank: all of `N_γ` row-major, then `N_β`.
pub fn sample_noise_bank<R: Rng + ?Sized>(
    num_instances: usize,
    noise_channels: usize,
    rng: &mut R,
) -> Result<NoiseBank> {
    if num_instances == 0 || noise_channels == 0 {
        return Err(Error::config("noise bank needs L^p ≥ 1 and C^0 ≥ 1"));
    }
    let g = Tensor::randn(&[num_instances, noise_channels], rng);
    let b = Tensor::randn(&[num_instances, noise_channels], rng);
    NoiseBank::from_parts(g, b, false)
}

/// [`sample_noise_bank`] from a fresh ChaCha8 stream seeded with `seed`.
pub fn sample_noise_bank_seeded(
    num_instances: usize,
    noise_channels: usize,
    seed: u64,
) -> Result<NoiseBank> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = sample_noise_bank(num_instances, noise_channels, &mut rng)?;
    bank.seed = Some(seed);
    Ok(bank)
}

/// A bank bound into a graph; with remapping its rows are differentiable.
#[derive(Clone, Copy, Debug)]
pub struct BankVars<'g> {
    pub gamma: Var<'g>,
    pub beta: Var<'g>,
    pub id: u64,
}

/// Dense per-pixel scale and shift maps, each `C × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationField {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Running per-channel statistics for evaluation-mode normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: DEFAULT_MOMENTUM,
        }
    }

    /// Folds in one batch's mean and biased variance over `count` values;
    /// the running variance tracks the unbiased estimate.
    pub fn update(&mut self, mean: &[f64], biased_var: &[f64], count: usize) {
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        let m = self.momentum;
        for k in 0..self.mean.len() {
            self.mean[k] = (1.0 - m) * self.mean[k] + m * mean[k];
            self.var[k] = (1.0 - m) * self.var[k] + m * biased_var[k] * unbias;
        }
    }
}

// ---- graph-level building blocks -------------------------------------------

fn class_rows(classes: &[u32]) -> Vec<usize> {
    classes.iter().map(|&c| c as usize - 1).collect()
}

/// `a[g(l)] ⊙ n̂[l] + b[g(l)]` for every instance row.
pub(crate) fn modulate_rows<'g>(
    a: Var<'g>,
    b: Var<'g>,
    classes: &[u32],
    nhat: Var<'g>,
) -> Var<'g> {
    let idx = class_rows(classes);
    a.gather_rows(&idx).mul(nhat).add(b.gather_rows(&idx))
}

/// Per-image row matrices scattered onto their label grids and stacked
/// into N×C×H×W.
pub(crate) fn scatter_batch<'g>(
    graph: &'g Graph,
    rows: &[Var<'g>],
    grids: &[Rc<Vec<u32>>],
    h: usize,
    w: usize,
) -> Var<'g> {
    let fields: Vec<Var<'g>> = rows
        .iter()
        .zip(grids)
        .map(|(r, g)| r.label_broadcast(g.clone(), h, w))
        .collect();
    graph.stack(&fields)
}

/// Instance labels of one image resized to a layer's resolution, plus the
/// instance→class table.
#[derive(Clone, Debug)]
pub struct LayerLabels {
    pub grid: Rc<Vec<u32>>,
    pub classes: Rc<Vec<u32>>,
}

/// Resized instance maps for every resolution a network visits, cached.
pub struct LabelPyramid<'a> {
    pairs: &'a [LabelPair],
    cache: RefCell<Vec<((usize, usize), Rc<Vec<LayerLabels>>)>>,
}

impl<'a> LabelPyramid<'a> {
    pub fn new(pairs: &'a [LabelPair]) -> Self {
        Self {
            pairs,
            cache: RefCell::new(Vec::new()),
        }
    }

    pub fn pairs(&self) -> &'a [LabelPair] {
        self.pairs
    }

    pub fn at(&self, h: usize, w: usize) -> Rc<Vec<LayerLabels>> {
        if let Some((_, v)) = self.cache.borrow().iter().find(|(k, _)| *k == (h, w)) {
            return v.clone();
        }
        let v: Rc<Vec<LayerLabels>> = Rc::new(
            self.pairs
                .iter()
                .map(|p| {
                    let r = resize_nearest(p.instances().grid(), h, w).expect("positive dims");
                    LayerLabels {
                        grid: Rc::new(r.data().to_vec()),
                        classes: Rc::new(p.instance_classes().to_vec()),
                    }
                })
                .collect(),
        );
        self.cache.borrow_mut().push(((h, w), v.clone()));
        v
    }
}

/// What one INADE layer saw during a traced forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub layer: usize,
    pub bank_ids: Vec<u64>,
    /// N×C×H×W scale and shift fields.
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub type Trace = RefCell<Vec<LayerTrace>>;

/// An INADE normalization layer whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct InadeLayer {
    pub index: usize,
    pub channels: usize,
    pub a_gamma: ParamId,
    pub b_gamma: ParamId,
    pub a_beta: ParamId,
    pub b_beta: ParamId,
    pub f_gamma: ParamId,
    pub f_beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

impl InadeLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        index: usize,
        num_classes: usize,
        channels: usize,
        noise_channels: usize,
        rng: &mut R,
    ) -> Self {
        let d = DistributionParams::initial(num_classes, channels);
        let t = LayerTransform::initial(noise_channels, channels, rng);
        let g = Group::Generator;
        Self {
            index,
            channels,
            a_gamma: store.add_param(&format!("{name}.a_gamma"), g, d.a_gamma),
            b_gamma: store.add_param(&format!("{name}.b_gamma"), g, d.b_gamma),
            a_beta: store.add_param(&format!("{name}.a_beta"), g, d.a_beta),
            b_beta: store.add_param(&format!("{name}.b_beta"), g, d.b_beta),
            f_gamma: store.add_param(&format!("{name}.f_gamma"), g, t.f_gamma),
            f_beta: store.add_param(&format!("{name}.f_beta"), g, t.f_beta),
            running_mean: store.add_buffer(
                &format!("{name}.running_mean"),
                g,
                Tensor::zeros(&[channels]),
            ),
            running_var: store.add_buffer(
                &format!("{name}.running_var"),
                g,
                Tensor::ones(&[channels]),
            ),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn distribution(&self, store: &ParamStore) -> DistributionParams {
        DistributionParams {
            a_gamma: store.param(self.a_gamma).clone(),
            b_gamma: store.param(self.b_gamma).clone(),
            a_beta: store.param(self.a_beta).clone(),
            b_beta: store.param(self.b_beta).clone(),
        }
    }

    pub fn transform(&self, store: &ParamStore) -> LayerTransform {
        LayerTransform {
            f_gamma: store.param(self.f_gamma).clone(),
            f_beta: store.param(self.f_beta).clone(),
        }
    }

    pub fn running_stats(&self, store: &ParamStore) -> RunningStats {
        RunningStats {
            mean: store.buffer(self.running_mean).data().to_vec(),
            var: store.buffer(self.running_var).data().to_vec(),
            momentum: self.momentum,
        }
    }

    /// Modulation fields (N×C×H×W each) for a batch at resolution h×w.
    pub fn fields<'g>(
        &self,
        ctx: &Ctx<'g, '_>,
        labels: &[LayerLabels],
        banks: &[BankVars<'g>],
        h: usize,
        w: usize,
    ) -> (Var<'g>, Var<'g>) {
        assert_eq!(labels.len(), banks.len(), "one bank per image");
        let (ag, bg) = (ctx.p(self.a_gamma), ctx.p(self.b_gamma));
        let (ab, bb) = (ctx.p(self.a_beta), ctx.p(self.b_beta));
        let (fg, fb) = (ctx.p(self.f_gamma), ctx.p(self.f_beta));
        let mut g_rows = Vec::with_capacity(banks.len());
        let mut b_rows = Vec::with_capacity(banks.len());
        for (lbl, bank) in labels.iter().zip(banks) {
            g_rows.push(modulate_rows(ag, bg, &lbl.classes, bank.gamma.matmul(fg)));
            b_rows.push(modulate_rows(ab, bb, &lbl.classes, bank.beta.matmul(fb)));
        }
        let grids: Vec<Rc<Vec<u32>>> = labels.iter().map(|l| l.grid.clone()).collect();
        (
            scatter_batch(ctx.graph, &g_rows, &grids, h, w),
            scatter_batch(ctx.graph, &b_rows, &grids, h, w),
        )
    }

    /// Normalize-then-modulate. Training passes use batch statistics and
    /// queue a running-statistics update; evaluation uses running values.
    pub fn forward<'g>(
        &self,
        ctx: &Ctx<'g, '_>,
        x: Var<'g>,
        pyramid: &LabelPyramid<'_>,
        banks: &[BankVars<'g>],
        trace: Option<&Trace>,
    ) -> Var<'g> {
        let shape = x.shape();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c, self.channels, "INADE layer {} channel mismatch", self.index);
        let labels = pyramid.at(h, w);
        let (gamma, beta) = self.fields(ctx, &labels, banks, h, w);
        if let Some(t) = trace {
            t.borrow_mut().push(LayerTrace {
                layer: self.index,
                bank_ids: banks.iter().map(|b| b.id).collect(),
                gamma: (*gamma.value()).clone(),
                beta: (*beta.value()).clone(),
            });
        }
        let xhat = if ctx.is_train() {
            let (xhat, mean, var) = x.batch_norm(self.eps);
            let mut rs = RunningStats {
                mean: ctx.buffer(self.running_mean).into_data(),
                var: ctx.buffer(self.running_var).into_data(),
                momentum: self.momentum,
            };
            rs.update(&mean, &var, n * h * w);
            ctx.update_buffer(self.running_mean, Tensor::from_parts(vec![c], rs.mean));
            ctx.update_buffer(self.running_var, Tensor::from_parts(vec![c], rs.var));
            xhat
        } else {
            let mean = ctx.buffer(self.running_mean);
            let var = ctx.buffer(self.running_var);
            x.normalize_with(mean.data(), var.data(), self.eps)
        };
        xhat.modulate(gamma, beta)
    }
}

// ---- plain-tensor API ------------------------------------------------------

/// `n̂ = N·F` for both branches, each `L^p × C^i`.
pub fn transform_noise(t: &LayerTransform, bank: &NoiseBank) -> Result<(Tensor, Tensor)> {
    if t.f_gamma.shape() != t.f_beta.shape() || t.f_gamma.rank() != 2 {
        return Err(Error::shape("transform matrices must share a C^0×C^i shape"));
    }
    if bank.noise_channels() != t.noise_channels() {
        return Err(Error::shape(format!(
            "bank has {} noise channels, transform expects {}",
            bank.noise_channels(),
            t.noise_channels()
        )));
    }
    let g = Graph::new();
    let ng = g.constant(bank.n_gamma.clone()).matmul(g.constant(t.f_gamma.clone()));
    let nb = g.constant(bank.n_beta.clone()).matmul(g.constant(t.f_beta.clone()));
    let out = ((*ng.value()).clone(), (*nb.value()).clone());
    Ok(out)
}

/// Per-instance modulation rows `γ[l] = a_γ[g(l)] ⊙ n̂_γ[l] + b_γ[g(l)]`.
pub fn modulate_instances(
    d: &DistributionParams,
    classes: &[u32],
    nhat_gamma: &Tensor,
    nhat_beta: &Tensor,
) -> Result<(Tensor, Tensor)> {
    d.check()?;
    let lm = d.num_classes() as u32;
    if let Some(&c) = classes.iter().find(|&&c| c == 0 || c > lm) {
        return Err(Error::ClassOutOfRange { class: c, max: lm });
    }
    for n in [nhat_gamma, nhat_beta] {
        if n.rank() != 2 || n.shape() != [classes.len(), d.channels()] {
            return Err(Error::shape(format!(
                "transformed noise {:?}, expected [{}, {}]",
                n.shape(),
                classes.len(),
                d.channels()
            )));
        }
    }
    let g = Graph::new();
    let gamma = modulate_rows(
        g.constant(d.a_gamma.clone()),
        g.constant(d.b_gamma.clone()),
        classes,
        g.constant(nhat_gamma.clone()),
    );
    let beta = modulate_rows(
        g.constant(d.a_beta.clone()),
        g.constant(d.b_beta.clone()),
        classes,
        g.constant(nhat_beta.clone()),
    );
    let out = ((*gamma.value()).clone(), (*beta.value()).clone());
    Ok(out)
}

/// Instance-guided scatter: `out[:, y, x] = rows[inst[y, x] - 1]`.
pub fn scatter_igs(rows: &Tensor, inst: &LabelGrid) -> Result<Tensor> {
    if rows.rank() != 2 {
        return Err(Error::shape("per-instance rows must be L^p×C"));
    }
    let lp = rows.shape()[0] as u32;
    if let Some(&label) = inst.data().iter().find(|&&l| l == 0 || l > lp) {
        return Err(Error::LabelOutOfRange { label, max: lp });
    }
    let g = Graph::new();
    let (h, w) = inst.dims();
    let out = g
        .constant(rows.clone())
        .label_broadcast(Rc::new(inst.data().to_vec()), h, w);
    let v = (*out.value()).clone();
    Ok(v)
}

/// Modulation field of one image at resolution h×w.
pub fn modulation_field(
    pair: &LabelPair,
    bank: &NoiseBank,
    d: &DistributionParams,
    t: &LayerTransform,
    h: usize,
    w: usize,
) -> Result<ModulationField> {
    if bank.rows() != pair.num_instances() as usize {
        return Err(Error::shape(format!(
            "bank has {} rows for {} instances",
            bank.rows(),
            pair.num_instances()
        )));
    }
    let (ng, nb) = transform_noise(t, bank)?;
    let (gr, br) = modulate_instances(d, pair.instance_classes(), &ng, &nb)?;
    let inst = resize_nearest(pair.instances().grid(), h, w)?;
    Ok(ModulationField {
        gamma: scatter_igs(&gr, &inst)?,
        beta: scatter_igs(&br, &inst)?,
    })
}

/// `(x - μ)/sqrt(var + eps) · Γ + Β` over an N×C×H×W batch with one field
/// per batch element. Training uses batch statistics and folds them into
/// `stats`; evaluation uses `stats` as is.
pub fn inade_normalize(
    x: &Tensor,
    fields: &[ModulationField],
    eps: f64,
    stats: &mut RunningStats,
    training: bool,
) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape("features must be N×C×H×W"));
    }
    let (n, c, h, w) = x.dims4();
    if fields.len() != n {
        return Err(Error::shape(format!("{} fields for batch of {n}", fields.len())));
    }
    if fields
        .iter()
        .any(|f| f.gamma.shape() != [c, h, w] || f.beta.shape() != [c, h, w])
    {
        return Err(Error::shape("modulation field shape differs from features"));
    }
    if stats.mean.len() != c {
        return Err(Error::shape("running statistics channel count"));
    }
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let xhat = if training {
        let (xhat, mean, var) = xv.batch_norm(eps);
        stats.update(&mean, &var, n * h * w);
        xhat
    } else {
        xv.normalize_with(&stats.mean, &stats.var, eps)
    };
    let gm = Tensor::stack(&fields.iter().map(|f| f.gamma.clone()).collect::<Vec<_>>())?;
    let bt = Tensor::stack(&fields.iter().map(|f| f.beta.clone()).collect::<Vec<_>>())?;
    let out = xhat.modulate(g.constant(gm), g.constant(bt));
    let v = (*out.value()).clone();
    Ok(v)
}

/// One full INADE layer over a batch: resize, transform, modulate, scatter,
/// normalize.
#[allow(clippy::too_many_arguments)]
pub fn inade_layer_forward(
    x: &Tensor,
    pairs: &[LabelPair],
    banks: &[NoiseBank],
    d: &DistributionParams,
    t: &LayerTransform,
    eps: f64,
    stats: &mut RunningStats,
    training: bool,
) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape("features must be N×C×H×W"));
    }
    let (n, c, h, w) = x.dims4();
    if pairs.len() != n || banks.len() != n {
        return Err(Error::shape("one label pair and one bank per batch element"));
    }
    if d.channels() != c || t.channels() != c {
        return Err(Error::shape(format!(
            "layer parameters have {} channels, features {c}",
            d.channels()
        )));
    }
    let fields = pairs
        .iter()
        .zip(banks)
        .map(|(p, b)| modulation_field(p, b, d, t, h, w))
        .collect::<Result<Vec<_>>>()?;
    inade_normalize(x, &fields, eps, stats, training)
}
