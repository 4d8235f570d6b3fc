//! Map attention decision (MAD) unit.
//!
//! A side branch reads the top-level feature map, runs three 3×3
//! convolutions of width λ·C and collapses space with a global max pool. The
//! resulting per-image vector scales each channel of the concatenated
//! `[F, H]` maps of a lower level: `y_j = μ_j · x_j`.
//!
//! The vector is unconstrained; no squashing nonlinearity is applied, so
//! entries may become negative during training.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Conv, Ctx};
use crate::param::ParamStore;
use crate::tensor::{Element, Tensor};

pub const MAD_BIAS_INIT: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct MadHead {
    pub level: usize,
    pub lambda: usize,
    pub level_channels: usize,
    pub top_channels: usize,
    pub convs: [Conv; 3],
}

impl MadHead {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        level: usize,
        top_channels: usize,
        level_channels: usize,
        lambda: usize,
    ) -> Self {
        let width = lambda * level_channels;
        let mut mk = |i: usize, c_in: usize| {
            let c = Conv::new(store, rng, &format!("{name}.conv{i}"), c_in, width, 3, 1);
            c.set_bias(store, MAD_BIAS_INIT);
            c
        };
        let convs = [mk(1, top_channels), mk(2, width), mk(3, width)];
        Self {
            level,
            lambda,
            level_channels,
            top_channels,
            convs,
        }
    }

    pub fn vector_len(&self) -> usize {
        self.lambda * self.level_channels
    }

    /// μ = global_max_pool(conv(relu(conv(relu(conv(f3)))))), shape (n, λC, 1, 1).
    pub fn generate<T: Element>(&self, ctx: &mut Ctx<'_, '_, T>, f3: Var) -> Result<Var> {
        let c = ctx.graph.value(f3).c();
        if c != self.top_channels {
            return Err(Error::Config(format!(
                "MAD head for level {} expects {} top-level channels, got {c}",
                self.level, self.top_channels
            )));
        }
        let mut x = self.convs[0].forward(ctx, f3)?;
        x = ctx.graph.relu(x);
        x = self.convs[1].forward(ctx, x)?;
        x = ctx.graph.relu(x);
        x = self.convs[2].forward(ctx, x)?;
        ctx.graph.global_max_pool(x)
    }
}

/// The set of heads, one per gated level.
#[derive(Clone, Debug, Default)]
pub struct MadUnit {
    pub heads: Vec<MadHead>,
}

impl MadUnit {
    pub fn head(&self, level: usize) -> Result<&MadHead> {
        self.heads
            .iter()
            .find(|h| h.level == level)
            .ok_or_else(|| Error::Config(format!("no MAD head configured for level {level}")))
    }

    pub fn generate<T: Element>(&self, ctx: &mut Ctx<'_, '_, T>, f3: Var, level: usize) -> Result<Var> {
        self.head(level)?.generate(ctx, f3)
    }
}

/// Channel-wise gating of `x` by `mu`; `mu` must hold one value per channel
/// of `x` for each image.
pub fn mad_apply<T: Element>(graph: &mut Graph<T>, x: Var, mu: Var) -> Result<Var> {
    let (xs, ms) = (graph.value(x).shape(), graph.value(mu).shape());
    if ms[1] != xs[1] || ms[0] != xs[0] {
        return Err(Error::dim(
            "mad_apply",
            format!("MAD vector length {} (batch {}) vs {} channels (batch {})", ms[1], ms[0], xs[1], xs[0]),
        ));
    }
    graph.channel_scale(x, mu)
}

/// Extracted per-image gating vectors of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct MadVector {
    pub level: usize,
    pub lambda: usize,
    /// One row of length λ·C per image.
    pub values: Vec<Vec<f64>>,
}

impl MadVector {
    pub fn from_tensor<T: Element>(t: &Tensor<T>, level: usize, lambda: usize) -> Self {
        let c = t.c();
        Self {
            level,
            lambda,
            values: t
                .data()
                .chunks(c.max(1))
                .map(|r| r.iter().map(|v| v.f64()).collect())
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMove {
    /// ⟨∇y L, x⟩ > 0: the gradient step lowers μ_j.
    Decrease,
    /// ⟨∇y L, x⟩ < 0: the gradient step raises μ_j.
    Increase,
    Hold,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelProbe {
    pub image: usize,
    pub channel: usize,
    pub dot: f64,
    pub direction: GateMove,
}

/// For every (image, channel) reports the sign of ⟨∇y_j L, x_j⟩, i.e. which
/// way a plain gradient step moves μ_j. `upstream` is ∇y L with the shape of x.
pub fn mad_adapter_probe<T: Element>(x: &Tensor<T>, upstream: &[T]) -> Result<Vec<ChannelProbe>> {
    if upstream.len() != x.len() {
        return Err(Error::dim("mad_adapter_probe", "upstream gradient does not match x"));
    }
    let hw = x.h() * x.w();
    let c = x.c();
    Ok(x
        .data()
        .chunks(hw)
        .zip(upstream.chunks(hw))
        .enumerate()
        .map(|(p, (xp, gp))| {
            let dot: f64 = xp.iter().zip(gp).map(|(a, b)| a.f64() * b.f64()).sum();
            let direction = if dot > 0.0 {
                GateMove::Decrease
            } else if dot < 0.0 {
                GateMove::Increase
            } else {
                GateMove::Hold
            };
            ChannelProbe {
                image: p / c,
                channel: p % c,
                dot,
                direction,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NormMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_bias_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let head = MadHead::new(&mut store, &mut rng, "mad1", 1, 8, 4, 2);
        for c in &head.convs {
            store.get_mut(c.kernel).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, NormMode::Train);
        let f3 = ctx.graph.input(Tensor::randn([1, 8, 5, 5], 1.0, &mut rng));
        let mu = head.generate(&mut ctx, f3).unwrap();
        let v = g.value(mu);
        assert_eq!(v.shape(), [1, 8, 1, 1]);
        assert!(v.data().iter().all(|&x| (x - MAD_BIAS_INIT).abs() < 1e-12));
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let unit = MadUnit {
            heads: vec![MadHead::new(&mut store, &mut rng, "mad1", 1, 8, 4, 2)],
        };
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, NormMode::Eval);
        let f3 = ctx.graph.input(Tensor::zeros([1, 6, 2, 2]));
        assert!(matches!(unit.generate(&mut ctx, f3, 1), Err(Error::Config(_))));
        assert!(matches!(unit.generate(&mut ctx, f3, 2), Err(Error::Config(_))));
    }

    #[test]
    fn apply_length_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros([1, 4, 2, 2]));
        let mu = g.input(Tensor::zeros([1, 3, 1, 1]));
        assert!(mad_apply(&mut g, x, mu).is_err());
    }

    #[test]
    fn probe_signs() {
        let x = Tensor::<f64>::new([1, 2, 1, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let g = [2.0, 4.0, -1.0, -2.0];
        let p = mad_adapter_probe(&x, &g).unwrap();
        assert_eq!(p[0].direction, GateMove::Decrease);
        assert_eq!(p[1].direction, GateMove::Increase);
        assert_eq!(p[1].dot, -5.0);
    }
}
