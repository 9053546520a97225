//! Small parameterised layers shared by the network modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Padding, ParamId, ParamStore, Scalar, Tape, Var};

/// Deterministic per-parameter RNG: the stream depends only on the model seed
/// and the parameter's name, so adding or removing modules never perturbs the
/// initial values of the others.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a, stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Context for building layers: target store, seed, and name prefix.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub seed: u64,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            seed,
            prefix: String::new(),
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Runs `f` with `name` pushed onto the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_, T>) -> R) -> R {
        let saved = self.prefix.clone();
        self.prefix = self.path(name);
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn he_normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let full = self.path(name);
        let mut rng = param_rng(self.seed, &full);
        self.store.he_normal(full, shape, fan_in, &mut rng)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let full = self.path(name);
        let mut rng = param_rng(self.seed, &full);
        self.store.normal(full, shape, std, &mut rng)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let full = self.path(name);
        self.store.zeros(full, shape)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub pad: Padding,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        (kh, kw): (usize, usize),
        bias: bool,
    ) -> Self {
        b.scope(name, |b| Conv2d {
            weight: b.he_normal("weight", &[out_ch, in_ch, kh, kw], in_ch * kh * kw),
            bias: bias.then(|| b.zeros("bias", &[out_ch])),
            pad: Padding::same(kh, kw),
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let bias = self.bias.map(|id| tape.param(store, id));
        tape.conv2d(x, w, bias, self.pad)
    }
}

/// Convolution without bias, then instance normalisation and ReLU.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    pub conv: Conv2d,
}

impl ConvNormAct {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, in_ch: usize, out_ch: usize, kernel: (usize, usize)) -> Self {
        Self {
            conv: Conv2d::new(b, name, in_ch, out_ch, kernel, false),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.conv.forward(tape, store, x);
        norm_act(tape, y)
    }
}

pub fn norm_act<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let y = tape.instance_norm(x);
    tape.relu(y)
}

/// Two successive padded 3x3 conv-norm-ReLU stages.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub first: ConvNormAct,
    pub second: ConvNormAct,
}

impl ConvBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, in_ch: usize, out_ch: usize) -> Self {
        b.scope(name, |b| ConvBlock {
            first: ConvNormAct::new(b, "conv1", in_ch, out_ch, (3, 3)),
            second: ConvNormAct::new(b, "conv2", out_ch, out_ch, (3, 3)),
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.first.forward(tape, store, x);
        self.second.forward(tape, store, y)
    }
}
