use rand::Rng;

use crate::autograd::{ConvGeom, Tape, Var};
use crate::nn::{ParamId, ParamStore};
use crate::{Scalar, Tensor};

/// Forward-pass context: the tape to record on and the parameters to read.
pub struct Ctx<'t, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub store: &'t ParamStore<T>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        self.tape.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(t)
    }
}

fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// `y = x·W + b`, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), fan_in_uniform(&[cin, cout], cin, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[cout])));
        Self { w, b }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.linear(ctx.p(self.w), self.b.map(|b| ctx.p(b)))
    }
}

/// Dense convolution on `[H, W, C]` maps.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel: usize,
        stride: usize,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let fan = kernel * kernel * cin;
        let w = store.add(format!("{name}.w"), fan_in_uniform(&[kernel, kernel, cin, cout], fan, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        let geom = if kernel == 1 {
            ConvGeom { kernel: 1, stride, pad: 0, dilation: 1 }
        } else {
            ConvGeom::strided(kernel, stride)
        };
        Self { w, b, geom }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.conv2d(ctx.p(self.w), Some(ctx.p(self.b)), self.geom)
    }
}

/// Depthwise convolution with replicate padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub w: ParamId,
    pub b: ParamId,
    pub dilation: usize,
}

impl DepthwiseConv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel: usize,
        dilation: usize,
        c: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        let w = store.add(format!("{name}.w"), fan_in_uniform(&[kernel, kernel, c], kernel * kernel, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c]));
        Self { w, b, dilation }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.depthwise_conv2d(ctx.p(self.w), ctx.p(self.b), self.dilation)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        let g = store.add(format!("{name}.g"), Tensor::full(&[c], T::one()));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c]));
        Self { g, b }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.layer_norm(ctx.p(self.g), ctx.p(self.b), 1e-5)
    }
}

/// Two-layer ReLU feed-forward network on token rows.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), c, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, c, true, rng),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.down.forward(ctx, self.up.forward(ctx, x).relu())
    }
}

/// `relu(x + conv(relu(conv(x))))` with a 1×1 projection when the shape changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub c1: Conv,
    pub c2: Conv,
    pub skip: Option<Conv>,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let c1 = Conv::new(store, &format!("{name}.conv1"), 3, stride, cin, cout, rng);
        let c2 = Conv::new(store, &format!("{name}.conv2"), 3, 1, cout, cout, rng);
        let skip = (cin != cout || stride != 1)
            .then(|| Conv::new(store, &format!("{name}.skip"), 1, stride, cin, cout, rng));
        Self { c1, c2, skip }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let y = self.c2.forward(ctx, self.c1.forward(ctx, x).relu());
        let s = match &self.skip {
            Some(c) => c.forward(ctx, x),
            None => x,
        };
        y.add(s).relu()
    }
}
