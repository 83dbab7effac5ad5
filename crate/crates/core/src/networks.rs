//! Generator of INADE residual blocks and the two-scale patch
//! discriminator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::inade::{BankVars, InadeLayer, LabelPyramid, NoiseBank, Trace, DEFAULT_NOISE_CHANNELS};
use crate::label_maps::{boundary_map, to_one_hot, LabelPair};
use crate::params::{Conv2d, ConvSpec, Ctx, Group, Linear, ParamStore};
use crate::remap::{EncoderConfig, RemappingEncoder};
use crate::tensor::Tensor;

pub const NUM_BLOCKS: usize = 6;
/// Width multipliers of the generator levels (initial tensor, then the
/// output of each block).
const GEN_MULT: [usize; NUM_BLOCKS + 1] = [16, 16, 16, 8, 4, 2, 1];
const DISC_MULT: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Number of semantic classes L^m.
    pub num_classes: usize,
    /// Initial noise channels C^0.
    pub noise_channels: usize,
    pub z_dim: usize,
    pub ngf: usize,
    pub gen_max_width: usize,
    pub ndf: usize,
    pub disc_max_width: usize,
    pub disc_scales: usize,
    pub spectral: bool,
    pub slope: f64,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 4,
            noise_channels: DEFAULT_NOISE_CHANNELS,
            z_dim: 256,
            ngf: 64,
            gen_max_width: 256,
            ndf: 64,
            disc_max_width: 256,
            disc_scales: 2,
            spectral: true,
            slope: 0.2,
            encoder: EncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A 2:1 (width = 2·height) output drops the second block's upsample.
    pub fn wide(&self) -> bool {
        self.width == 2 * self.height
    }

    pub fn upsamples(&self) -> [bool; NUM_BLOCKS] {
        let mut u = [true; NUM_BLOCKS];
        if self.wide() {
            u[1] = false;
        }
        u
    }

    /// Spatial size of the tensor produced by the initial linear map.
    pub fn initial_size(&self) -> (usize, usize) {
        let f = 1 << self.upsamples().iter().filter(|&&u| u).count();
        (self.height / f, self.width / f)
    }

    pub fn gen_widths(&self) -> [usize; NUM_BLOCKS + 1] {
        GEN_MULT.map(|m| (self.ngf * m).min(self.gen_max_width))
    }

    pub fn disc_widths(&self) -> [usize; 4] {
        DISC_MULT.map(|m| (self.ndf * m).min(self.disc_max_width))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m));
        if self.num_classes == 0 || self.noise_channels == 0 || self.z_dim == 0 {
            return bad("num_classes, noise_channels and z_dim must be positive");
        }
        if self.ngf == 0 || self.ndf == 0 || self.gen_max_width == 0 || self.disc_max_width == 0 {
            return bad("network widths must be positive");
        }
        if self.disc_scales == 0 {
            return bad("need at least one discriminator scale");
        }
        let f = 1 << self.upsamples().iter().filter(|&&u| u).count();
        if self.height == 0 || self.height % f != 0 || self.width % f != 0 {
            return bad(&format!(
                "resolution {}×{} must be divisible by {f}",
                self.height, self.width
            ));
        }
        if self.height != self.width && !self.wide() {
            return bad("only square and 2:1 (width = 2·height) outputs are supported");
        }
        let d = self.encoder.divisor();
        if self.height % d != 0 || self.width % d != 0 {
            return bad(&format!("resolution must be divisible by the encoder divisor {d}"));
        }
        // every scale must survive three stride-2 convolutions
        let min_side = self.height.min(self.width) >> (self.disc_scales - 1);
        if min_side < 8 || self.height % (1 << (self.disc_scales - 1)) != 0 {
            return bad("image too small for the discriminator scales");
        }
        self.encoder.validate()
    }
}

/// Residual block: two (INADE → leaky → conv) stages plus a learned
/// shortcut (INADE → 1×1 conv) when widths differ.
#[derive(Clone, Debug)]
pub struct INADEResBlock {
    pub cin: usize,
    pub cout: usize,
    norm0: InadeLayer,
    conv0: Conv2d,
    norm1: InadeLayer,
    conv1: Conv2d,
    shortcut: Option<(InadeLayer, Conv2d)>,
    slope: f64,
}

impl INADEResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        layer_base: usize,
        cin: usize,
        cout: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let g = Group::Generator;
        let mid = cin.min(cout);
        let (lm, c0) = (cfg.num_classes, cfg.noise_channels);
        let norm0 = InadeLayer::new(store, &format!("{name}.norm0"), layer_base, lm, cin, c0, rng);
        let conv0 = Conv2d::new(store, &format!("{name}.conv0"), g, ConvSpec::same(cin, mid, 3).spectral(cfg.spectral), rng);
        let norm1 = InadeLayer::new(store, &format!("{name}.norm1"), layer_base + 1, lm, mid, c0, rng);
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), g, ConvSpec::same(mid, cout, 3).spectral(cfg.spectral), rng);
        let shortcut = (cin != cout).then(|| {
            (
                InadeLayer::new(store, &format!("{name}.norm_s"), layer_base + 2, lm, cin, c0, rng),
                Conv2d::new(
                    store,
                    &format!("{name}.conv_s"),
                    g,
                    ConvSpec::same(cin, cout, 1).no_bias().spectral(cfg.spectral),
                    rng,
                ),
            )
        });
        Self {
            cin,
            cout,
            norm0,
            conv0,
            norm1,
            conv1,
            shortcut,
            slope: cfg.slope,
        }
    }

    pub fn inade_layers(&self) -> Vec<&InadeLayer> {
        let mut v = vec![&self.norm0, &self.norm1];
        if let Some((n, _)) = &self.shortcut {
            v.push(n);
        }
        v
    }

    pub fn forward<'g>(
        &self,
        ctx: &Ctx<'g, '_>,
        x: Var<'g>,
        pyramid: &LabelPyramid<'_>,
        banks: &[BankVars<'g>],
        trace: Option<&Trace>,
    ) -> Var<'g> {
        let skip = match &self.shortcut {
            Some((norm, conv)) => conv.forward(ctx, norm.forward(ctx, x, pyramid, banks, trace), None),
            None => x,
        };
        let dx = self.norm0.forward(ctx, x, pyramid, banks, trace).leaky_relu(self.slope);
        let dx = self.conv0.forward(ctx, dx, None);
        let dx = self.norm1.forward(ctx, dx, pyramid, banks, trace).leaky_relu(self.slope);
        let dx = self.conv1.forward(ctx, dx, None);
        skip.add(dx)
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: ModelConfig,
    head: Linear,
    blocks: Vec<INADEResBlock>,
    out: Conv2d,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.gen_widths();
        let (h0, w0) = cfg.initial_size();
        let head = Linear::new(store, "gen.head", Group::Generator, cfg.z_dim, widths[0] * h0 * w0, rng);
        let blocks = (0..NUM_BLOCKS)
            .map(|i| INADEResBlock::new(store, &format!("gen.block{i}"), 3 * i, widths[i], widths[i + 1], cfg, rng))
            .collect();
        let out = Conv2d::new(
            store,
            "gen.out",
            Group::Generator,
            ConvSpec::same(widths[NUM_BLOCKS], 3, 3).spectral(cfg.spectral),
            rng,
        );
        Ok(Self {
            config: cfg.clone(),
            head,
            blocks,
            out,
        })
    }

    pub fn inade_layers(&self) -> Vec<&InadeLayer> {
        self.blocks.iter().flat_map(|b| b.inade_layers()).collect()
    }

    pub fn blocks(&self) -> &[INADEResBlock] {
        &self.blocks
    }

    fn check_batch(&self, pairs: &[LabelPair], banks: &[BankVars<'_>], z: &[usize]) -> Result<()> {
        let cfg = &self.config;
        if pairs.is_empty() || pairs.len() != banks.len() {
            return Err(Error::shape("need one bank per label pair"));
        }
        if z != [pairs.len(), cfg.z_dim] {
            return Err(Error::shape(format!("z has shape {z:?}, expected [{}, {}]", pairs.len(), cfg.z_dim)));
        }
        for (p, b) in pairs.iter().zip(banks) {
            if p.dims() != (cfg.height, cfg.width) {
                return Err(Error::shape(format!(
                    "label pair is {:?}, model expects {}×{}",
                    p.dims(),
                    cfg.height,
                    cfg.width
                )));
            }
            if p.num_classes() as usize != cfg.num_classes {
                return Err(Error::shape("label pair class count differs from the model"));
            }
            let bs = b.gamma.shape();
            if bs != [p.num_instances() as usize, cfg.noise_channels] {
                return Err(Error::shape(format!(
                    "bank {bs:?} for {} instances and C^0 = {}",
                    p.num_instances(),
                    cfg.noise_channels
                )));
            }
        }
        Ok(())
    }

    /// N×3×H×W images in (−1, 1).
    pub fn forward<'g>(
        &self,
        ctx: &Ctx<'g, '_>,
        pairs: &[LabelPair],
        banks: &[BankVars<'g>],
        z: Var<'g>,
        trace: Option<&Trace>,
    ) -> Result<Var<'g>> {
        self.check_batch(pairs, banks, &z.shape())?;
        let cfg = &self.config;
        let (h0, w0) = cfg.initial_size();
        let pyramid = LabelPyramid::new(pairs);
        let mut x = self
            .head
            .forward(ctx, z)
            .reshape(&[pairs.len(), cfg.gen_widths()[0], h0, w0]);
        for (block, up) in self.blocks.iter().zip(cfg.upsamples()) {
            if up {
                x = x.upsample_nearest(2);
            }
            x = block.forward(ctx, x, &pyramid, banks, trace);
        }
        Ok(self.out.forward(ctx, x.leaky_relu(cfg.slope), None).tanh())
    }
}

/// Evaluation-mode generation of a single image.
pub fn generator_forward(
    gen: &Generator,
    store: &ParamStore,
    pair: &LabelPair,
    bank: &NoiseBank,
    z: &[f64],
) -> Result<Tensor> {
    let g = Graph::new();
    let ctx = Ctx::eval(&g, store);
    let zv = g.constant(Tensor::new(&[1, z.len()], z.to_vec())?);
    let out = gen.forward(&ctx, std::slice::from_ref(pair), &[bank.bind(&g, false)], zv, None)?;
    Ok(out.value().index0(0))
}

/// Conditioning planes: one-hot semantic classes then the instance
/// boundary map, (L^m + 1)×H×W.
pub fn condition_planes(pair: &LabelPair) -> Tensor {
    let onehot = to_one_hot(pair.mask().grid(), pair.num_classes())
        .expect("validated pair")
        .to_tensor();
    let (h, w) = pair.dims();
    let mut data = onehot.into_data();
    data.extend_from_slice(boundary_map(pair.instances()).data());
    Tensor::new(&[pair.num_classes() as usize + 1, h, w], data).expect("plane sizes")
}

#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    layers: Vec<Conv2d>,
    slope: f64,
}

impl PatchDiscriminator {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let w = cfg.disc_widths();
        let g = Group::Discriminator;
        let sn = cfg.spectral;
        let specs = [
            ConvSpec::same(cin, w[0], 4).stride(2, 1),
            ConvSpec::same(w[0], w[1], 4).stride(2, 1),
            ConvSpec::same(w[1], w[2], 4).stride(2, 1),
            ConvSpec::same(w[2], w[3], 3),
            ConvSpec::same(w[3], 1, 3),
        ];
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(i, s)| Conv2d::new(store, &format!("{name}.conv{i}"), g, s.spectral(sn), rng))
            .collect();
        Self {
            layers,
            slope: cfg.slope,
        }
    }

    /// Features of every layer; the last is the patch logit map.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>) -> Vec<Var<'g>> {
        let mut feats = Vec::with_capacity(self.layers.len());
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, conv) in self.layers.iter().enumerate() {
            h = conv.forward(ctx, h, None);
            if i < last {
                h = h.leaky_relu(self.slope);
            }
            feats.push(h);
        }
        feats
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub num_classes: usize,
    scales: Vec<PatchDiscriminator>,
}

/// Per-scale feature lists, each ending in the logit map.
pub type DiscFeatures<'g> = Vec<Vec<Var<'g>>>;

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let cin = Self::input_channels(cfg.num_classes);
        let scales = (0..cfg.disc_scales)
            .map(|s| PatchDiscriminator::new(store, &format!("disc.s{s}"), cin, cfg, rng))
            .collect();
        Ok(Self {
            num_classes: cfg.num_classes,
            scales,
        })
    }

    pub fn input_channels(num_classes: usize) -> usize {
        num_classes + 4
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn depth(&self) -> usize {
        self.scales[0].layers.len()
    }

    /// Constant conditioning planes for a batch, N×(L^m+1)×H×W.
    pub fn conditions<'g>(&self, graph: &'g Graph, pairs: &[LabelPair]) -> Result<Var<'g>> {
        let planes = pairs
            .iter()
            .map(|p| {
                if p.num_classes() as usize != self.num_classes {
                    Err(Error::shape("label pair class count differs from the discriminator"))
                } else {
                    Ok(condition_planes(p))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(graph.constant(Tensor::stack(&planes)?))
    }

    /// Features at every scale for N×3×H×W images under precomputed
    /// conditioning planes.
    pub fn forward_with<'g>(&self, ctx: &Ctx<'g, '_>, images: Var<'g>, cond: Var<'g>) -> Result<DiscFeatures<'g>> {
        let (is, cs) = (images.shape(), cond.shape());
        if is.len() != 4 || is[1] != 3 || cs[0] != is[0] || cs[2..] != is[2..] {
            return Err(Error::shape(format!("images {is:?} do not match conditions {cs:?}")));
        }
        let mut x = ctx.graph.concat(&[images, cond], 1);
        let mut out = Vec::with_capacity(self.scales.len());
        for (s, d) in self.scales.iter().enumerate() {
            if s > 0 {
                x = x.avg_pool2();
            }
            out.push(d.forward(ctx, x));
        }
        Ok(out)
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, images: Var<'g>, pairs: &[LabelPair]) -> Result<DiscFeatures<'g>> {
        let cond = self.conditions(ctx.graph, pairs)?;
        self.forward_with(ctx, images, cond)
    }
}

/// Evaluation-mode discriminator features for one 3×H×W image.
pub fn discriminator_forward(
    d: &Discriminator,
    store: &ParamStore,
    image: &Tensor,
    pair: &LabelPair,
) -> Result<Vec<Vec<Tensor>>> {
    if image.rank() != 3 || image.shape()[0] != 3 || (image.shape()[1], image.shape()[2]) != pair.dims() {
        return Err(Error::shape(format!(
            "image {:?} does not match label pair {:?}",
            image.shape(),
            pair.dims()
        )));
    }
    let g = Graph::new();
    let ctx = Ctx::eval(&g, store);
    let (h, w) = pair.dims();
    let x = g.constant(image.clone().reshape(&[1, 3, h, w])?);
    let feats = d.forward(&ctx, x, std::slice::from_ref(pair))?;
    Ok(feats
        .into_iter()
        .map(|s| s.into_iter().map(|v| (*v.value()).clone()).collect())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub generator: usize,
    pub discriminator: usize,
    pub encoder: usize,
}

/// Generator, discriminator and encoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Models {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub encoder: RemappingEncoder,
}

impl Models {
    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            generator: self.store.count(Group::Generator),
            discriminator: self.store.count(Group::Discriminator),
            encoder: self.store.count(Group::Encoder),
        }
    }
}

pub fn build_default_models<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Models> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let generator = Generator::new(&mut store, cfg, rng)?;
    let discriminator = Discriminator::new(&mut store, cfg, rng)?;
    let encoder = RemappingEncoder::new(&mut store, cfg.encoder.clone(), rng)?;
    Ok(Models {
        config: cfg.clone(),
        store,
        generator,
        discriminator,
        encoder,
    })
}

/// Conv kernels only (no biases, INADE tables or linear head), for width
/// scaling checks.
pub fn conv_weight_count(store: &ParamStore, group: Group) -> usize {
    store
        .params_in(group)
        .filter(|&id| store.param(id).rank() == 4)
        .map(|id| store.param(id).numel())
        .sum()
}

/// Bank identities seen by each traced INADE layer.
pub fn bank_ids(trace: &Trace) -> Vec<Vec<u64>> {
    trace.borrow().iter().map(|t| t.bank_ids.clone()).collect()
}
