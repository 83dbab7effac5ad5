//! Named parameter storage, per-forward binding into a [`Graph`], and the
//! basic trainable layers.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Which network a parameter belongs to; each group has its own optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Generator,
    Discriminator,
    Encoder,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Generator, Group::Discriminator, Group::Encoder];

    fn index(self) -> usize {
        match self {
            Group::Generator => 0,
            Group::Discriminator => 1,
            Group::Encoder => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    group: Group,
    value: Tensor,
}

/// Learnable tensors plus non-learnable buffers (running statistics,
/// power-iteration vectors), all addressable by unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Entry>,
    buffers: Vec<Entry>,
    names: HashMap<String, (bool, usize)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn register(&mut self, name: &str, is_param: bool, idx: usize) {
        let prev = self.names.insert(name.to_string(), (is_param, idx));
        assert!(prev.is_none(), "duplicate tensor name {name}");
    }

    pub fn add_param(&mut self, name: &str, group: Group, value: Tensor) -> ParamId {
        let idx = self.params.len();
        self.register(name, true, idx);
        self.params.push(Entry {
            name: name.to_string(),
            group,
            value,
        });
        ParamId(idx)
    }

    pub fn add_buffer(&mut self, name: &str, group: Group, value: Tensor) -> BufferId {
        let idx = self.buffers.len();
        self.register(name, false, idx);
        self.buffers.push(Entry {
            name: name.to_string(),
            group,
            value,
        });
        BufferId(idx)
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn param_group(&self, id: ParamId) -> Group {
        self.params[id.0].group
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn set_buffer(&mut self, id: BufferId, value: Tensor) {
        assert_eq!(self.buffers[id.0].value.shape(), value.shape());
        self.buffers[id.0].value = value;
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params_in(&self, group: Group) -> impl Iterator<Item = ParamId> + '_ {
        self.param_ids().filter(move |&id| self.param_group(id) == group)
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(&(true, i)) => Some(ParamId(i)),
            _ => None,
        }
    }

    /// Number of learnable scalars in a group.
    pub fn count(&self, group: Group) -> usize {
        self.params_in(group).map(|id| self.param(id).numel()).sum()
    }

    /// Every parameter and buffer as `(name, tensor)`, parameters first.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|e| (e.name.as_str(), &e.value))
    }

    /// Overwrites a tensor by name. Returns false for unknown names or a
    /// shape disagreement.
    pub fn assign(&mut self, name: &str, value: Tensor) -> bool {
        let entry = match self.names.get(name) {
            Some(&(true, i)) => &mut self.params[i],
            Some(&(false, i)) => &mut self.buffers[i],
            None => return false,
        };
        if entry.value.shape() != value.shape() {
            return false;
        }
        entry.value = value;
        true
    }

    pub fn len(&self) -> usize {
        self.params.len() + self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Binds store tensors into one graph for one forward pass.
pub struct Ctx<'g, 's> {
    pub graph: &'g Graph,
    store: &'s ParamStore,
    train: bool,
    trainable: [bool; 3],
    bound: RefCell<HashMap<ParamId, Var<'g>>>,
    updates: RefCell<Vec<(BufferId, Tensor)>>,
}

impl<'g, 's> Ctx<'g, 's> {
    /// Inference context: running statistics, nothing trainable.
    pub fn eval(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self::new(graph, store, false, &[])
    }

    /// Training context with the given groups receiving gradients.
    pub fn train(graph: &'g Graph, store: &'s ParamStore, trainable: &[Group]) -> Self {
        Self::new(graph, store, true, trainable)
    }

    pub fn new(graph: &'g Graph, store: &'s ParamStore, train: bool, trainable: &[Group]) -> Self {
        let mut t = [false; 3];
        for g in trainable {
            t[g.index()] = true;
        }
        Self {
            graph,
            store,
            train,
            trainable: t,
            bound: RefCell::new(HashMap::new()),
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// The graph leaf for a parameter, created on first use.
    pub fn p(&self, id: ParamId) -> Var<'g> {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let trainable = self.trainable[self.store.param_group(id).index()];
        let v = self.graph.leaf(self.store.param(id).clone(), trainable);
        self.bound.borrow_mut().insert(id, v);
        v
    }

    /// Current buffer value, including updates made earlier in this pass.
    pub fn buffer(&self, id: BufferId) -> Tensor {
        self.updates
            .borrow()
            .iter()
            .rev()
            .find(|(b, _)| *b == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| self.store.buffer(id).clone())
    }

    pub fn update_buffer(&self, id: BufferId, value: Tensor) {
        self.updates.borrow_mut().push((id, value));
    }

    /// Buffer updates to apply to the store once the pass is over.
    pub fn take_updates(&self) -> Vec<(BufferId, Tensor)> {
        std::mem::take(&mut *self.updates.borrow_mut())
    }

    /// Gradients of every bound parameter in `group`; parameters the loss
    /// never touched get zeros.
    pub fn group_grads(&self, grads: &Gradients, group: Group) -> Vec<(ParamId, Tensor)> {
        let bound = self.bound.borrow();
        let mut out: Vec<(ParamId, Tensor)> = self
            .store
            .params_in(group)
            .map(|id| {
                let g = match bound.get(&id) {
                    Some(v) => grads.get_or_zeros(*v),
                    None => Tensor::zeros(self.store.param(id).shape()),
                };
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

impl ParamStore {
    pub fn apply_updates(&mut self, updates: Vec<(BufferId, Tensor)>) {
        for (id, t) in updates {
            self.set_buffer(id, t);
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

fn randn_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Options for building a convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: (usize, usize),
    pub bias: bool,
    pub spectral: bool,
    /// Multiplier on the default He-style weight scale.
    pub gain: f64,
}

impl ConvSpec {
    /// Stride-1 convolution with same padding and a bias.
    pub fn same(cin: usize, cout: usize, k: usize) -> Self {
        Self {
            cin,
            cout,
            kernel: (k, k),
            stride: 1,
            pad: (k / 2, k / 2),
            bias: true,
            spectral: false,
            gain: 1.0,
        }
    }

    pub fn spectral(mut self, on: bool) -> Self {
        self.spectral = on;
        self
    }

    pub fn stride(mut self, stride: usize, pad: usize) -> Self {
        self.stride = stride;
        self.pad = (pad, pad);
        self
    }

    pub fn kernel(mut self, k: usize) -> Self {
        self.kernel = (k, k);
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    /// Power-iteration vectors `u` (Cout) and `v` (Cin·kh·kw).
    sn: Option<(BufferId, BufferId)>,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Self {
        let (kh, kw) = spec.kernel;
        let fan_in = (spec.cin * kh * kw) as f64;
        let std = spec.gain * (2.0 / fan_in).sqrt();
        let shape = [spec.cout, spec.cin, kh, kw];
        let w = Tensor::randn(&shape, rng).map(|v| v * std);
        let sn = spec.spectral.then(|| {
            let mut u = randn_vec(spec.cout, rng);
            normalize(&mut u);
            let v = power_v(&w, &u);
            let u_id = store.add_buffer(&format!("{name}.sn_u"), group, Tensor::from_parts(vec![u.len()], u));
            let v_id = store.add_buffer(&format!("{name}.sn_v"), group, Tensor::from_parts(vec![v.len()], v));
            (u_id, v_id)
        });
        let weight = store.add_param(&format!("{name}.weight"), group, w);
        let bias = spec
            .bias
            .then(|| store.add_param(&format!("{name}.bias"), group, Tensor::zeros(&[spec.cout])));
        Self {
            weight,
            bias,
            sn,
            spec,
        }
    }

    /// The effective kernel: spectrally normalized when enabled. Training
    /// passes advance the power iteration by one step.
    pub fn weight<'g>(&self, ctx: &Ctx<'g, '_>) -> Var<'g> {
        let w = ctx.p(self.weight);
        let Some((u_id, v_id)) = self.sn else { return w };
        let wv = w.value();
        let (u, v) = if ctx.is_train() {
            let u_prev = ctx.buffer(u_id);
            let v = power_v(&wv, u_prev.data());
            let u = power_u(&wv, &v);
            ctx.update_buffer(u_id, Tensor::from_parts(vec![u.len()], u.clone()));
            ctx.update_buffer(v_id, Tensor::from_parts(vec![v.len()], v.clone()));
            (u, v)
        } else {
            (ctx.buffer(u_id).into_data(), ctx.buffer(v_id).into_data())
        };
        w.spectral_normalize(&u, &v).0
    }

    pub fn forward<'g>(
        &self,
        ctx: &Ctx<'g, '_>,
        x: Var<'g>,
        labels: Option<Rc<Vec<Vec<u32>>>>,
    ) -> Var<'g> {
        let w = self.weight(ctx);
        let b = self.bias.map(|b| ctx.p(b));
        x.conv2d(w, b, self.spec.stride, self.spec.pad, labels)
    }
}

/// v = normalize(Wᵀ u) for W viewed as Cout × rest.
fn power_v(w: &Tensor, u: &[f64]) -> Vec<f64> {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    let mut v = vec![0.0; cols];
    for (r, ur) in u.iter().enumerate() {
        for (vc, wc) in v.iter_mut().zip(&w.data()[r * cols..(r + 1) * cols]) {
            *vc += ur * wc;
        }
    }
    normalize(&mut v);
    v
}

/// u = normalize(W v).
fn power_u(w: &Tensor, v: &[f64]) -> Vec<f64> {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    let mut u: Vec<f64> = (0..rows)
        .map(|r| {
            w.data()[r * cols..(r + 1) * cols]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    normalize(&mut u);
    u
}

/// Fully connected layer `x·W + b` with W stored as in×out.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let weight = store.add_param(
            &format!("{name}.weight"),
            group,
            Tensor::randn(&[fan_in, fan_out], rng).map(|v| v * std),
        );
        let bias = store.add_param(&format!("{name}.bias"), group, Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.matmul(ctx.p(self.weight)).add_row_vector(ctx.p(self.bias))
    }
}
