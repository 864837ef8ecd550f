//! Named parameter storage, the layer primitives built on [`Graph`], and SGD.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::graph::{ConvGeom, Graph, NormStats, Var};
use crate::tensor::{lit, Real, Tensor};

/// Ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Inserts every tensor into `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// SHA-256 over names, shapes and exact bit patterns.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Trainable parameters plus non-trainable buffers (batch-norm running stats).
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub params: ParamSet<T>,
    pub buffers: ParamSet<T>,
}

impl<T: Real> Weights<T> {
    pub fn new() -> Self {
        Self {
            params: ParamSet::new(),
            buffers: ParamSet::new(),
        }
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        Weights {
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }
}

impl<T: Real> Default for Weights<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Batch-norm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running estimates are updated.
    Train,
    /// Batch statistics; running estimates are left alone.
    TrainFrozen,
    /// Running statistics.
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Everything a layer needs during one forward pass.
pub struct Fwd<'a, T> {
    pub g: &'a mut Graph<T>,
    pub p: &'a [Var],
    pub buffers: &'a mut ParamSet<T>,
    pub mode: BnMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        w: &mut Weights<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let wt = uniform(rng, &[fan_in, fan_out], bound);
        let bt = uniform(rng, &[fan_out], bound);
        Self {
            w: w.params.push(format!("{name}.weight"), wt),
            b: w.params.push(format!("{name}.bias"), bt),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var) -> Var {
        let y = f.g.matmul(x, f.p[self.w]);
        f.g.add_bias(y, f.p[self.b])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub w: usize,
    pub geom: ConvGeom,
}

impl Conv {
    /// He-normal initialized, bias-free (always followed by batch norm).
    pub fn new<T: Real>(
        w: &mut Weights<T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = geom.kernel * geom.kernel * cin;
        let std = (2.0 / fan_in as f64).sqrt();
        let wt = normal(rng, &[fan_in, cout], std);
        Self {
            w: w.params.push(format!("{name}.weight"), wt),
            geom,
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var) -> Var {
        f.g.conv2d(x, f.p[self.w], self.geom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

impl BatchNorm {
    pub fn new<T: Real>(w: &mut Weights<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: w.params.push(format!("{name}.gamma"), Tensor::full([c], T::one())),
            beta: w.params.push(format!("{name}.beta"), Tensor::zeros([c])),
            running_mean: w.buffers.push(format!("{name}.running_mean"), Tensor::zeros([c])),
            running_var: w
                .buffers
                .push(format!("{name}.running_var"), Tensor::full([c], T::one())),
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var) -> Var {
        let eps = lit(BN_EPS);
        let (gamma, beta) = (f.p[self.gamma], f.p[self.beta]);
        match f.mode {
            BnMode::Eval => {
                let rm = f.buffers.get(self.running_mean).data().to_vec();
                let rv = f.buffers.get(self.running_var).data().to_vec();
                f.g.batch_norm(x, gamma, beta, NormStats::Running, Some((&rm, &rv)), eps)
                    .0
            }
            BnMode::Train | BnMode::TrainFrozen => {
                let (y, moments) = f.g.batch_norm(x, gamma, beta, NormStats::Batch, None, eps);
                if f.mode == BnMode::Train {
                    let moments = moments.expect("batch mode yields moments");
                    let mom = lit::<T>(BN_MOMENTUM);
                    let keep = T::one() - mom;
                    for (r, &m) in f
                        .buffers
                        .get_mut(self.running_mean)
                        .data_mut()
                        .iter_mut()
                        .zip(&moments.mean)
                    {
                        *r = keep * *r + mom * m;
                    }
                    for (r, &v) in f
                        .buffers
                        .get_mut(self.running_var)
                        .data_mut()
                        .iter_mut()
                        .zip(&moments.var_unbiased)
                    {
                        *r = keep * *r + mom * v;
                    }
                }
                y
            }
        }
    }
}

pub fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| lit::<T>(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| lit::<T>(std * standard_normal(rng)))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Box-Muller; kept local so the stream of draws is stable across crate versions.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// SGD with heavy-ball momentum and L2 weight decay, matching
/// `v <- mu * v + (g + wd * p); p <- p - lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &ParamSet<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        let (mu, wd, lr) = (lit::<T>(self.momentum), lit::<T>(self.weight_decay), lit::<T>(lr));
        for ((p, g), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.velocity)
        {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv = *pv - lr * *vv;
            }
        }
    }
}

/// Collects per-parameter gradients from a backward pass, zero-filling
/// parameters the loss never reached.
pub fn collect_grads<T: Real>(
    grads: &crate::graph::Grads<T>,
    vars: &[Var],
    params: &ParamSet<T>,
) -> Vec<Tensor<T>> {
    vars.iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect()
}

pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}
