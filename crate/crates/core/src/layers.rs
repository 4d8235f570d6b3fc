//! Parameterized building blocks bound to a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{BnUpdate, Graph, NormMode, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// One forward pass: the tape being recorded, the parameters it reads and
/// the batch-norm statistics it produced.
pub struct Ctx<'g, 's, T: Element> {
    pub graph: &'g mut Graph<T>,
    pub store: &'s ParamStore<T>,
    pub mode: NormMode,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'g, 's, T: Element> Ctx<'g, 's, T> {
    pub fn new(graph: &'g mut Graph<T>, store: &'s ParamStore<T>, mode: NormMode) -> Self {
        Self {
            graph,
            store,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Fan-in scaled Gaussian kernel, zero bias, "same" padding.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let kernel = store.add_kernel(&format!("{name}.weight"), c_out, c_in, k, rng);
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros([c_out, 1, 1, 1]));
        Self {
            kernel,
            bias,
            stride,
            pad: k / 2,
        }
    }

    /// Kernel drawn with a fixed std instead of fan-in scaling.
    #[allow(clippy::too_many_arguments)]
    pub fn with_std<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        std: f64,
        bias: f64,
    ) -> Self {
        let kernel = store.add(&format!("{name}.weight"), Tensor::randn([c_out, c_in, k, k], std, rng));
        let bias = store.add(&format!("{name}.bias"), Tensor::full([c_out, 1, 1, 1], T::of(bias)));
        Self {
            kernel,
            bias,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn set_bias<T: Element>(&self, store: &mut ParamStore<T>, value: f64) {
        store
            .get_mut(self.bias)
            .tensor
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::of(value));
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        let k = ctx.param(self.kernel);
        let b = ctx.param(self.bias);
        ctx.graph.conv2d(x, k, b, self.stride, self.pad)
    }

    pub fn out_channels<T: Element>(&self, store: &ParamStore<T>) -> usize {
        store.tensor(self.kernel).n()
    }

    pub fn in_channels<T: Element>(&self, store: &ParamStore<T>) -> usize {
        store.tensor(self.kernel).c()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full([c, 1, 1, 1], T::one())),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros([c, 1, 1, 1])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros([c, 1, 1, 1])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full([c, 1, 1, 1], T::one())),
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let rm = ctx.param(self.running_mean);
        let rv = ctx.param(self.running_var);
        let (y, stats) = ctx.graph.batch_norm(x, gamma, beta, (rm, rv), ctx.mode)?;
        if let Some((mean, var)) = stats {
            ctx.bn_updates.push(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                batch_mean: mean,
                batch_var_unbiased: var,
            });
        }
        Ok(y)
    }
}

/// conv → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self {
            conv: Conv::new(store, rng, &format!("{name}.conv"), c_in, c_out, k, stride),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out),
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.graph.relu(y))
    }
}
