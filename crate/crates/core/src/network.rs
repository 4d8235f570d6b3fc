//! The zoom-out-and-in backbone with per-level RPN heads.
//!
//! Zoom-out: a three-conv stem to stride 8, then three stages of plain
//! conv-BN-ReLU blocks with 2×2 max pooling between them (strides 8/16/32,
//! maps F1..F3). Zoom-in mirrors stages 2 and 1: bilinear 2× upsampling and a
//! conv, added to a 1×1 lateral projection of the same-level F, then the
//! mirrored blocks (maps H2, H1). Levels 1 and 2 predict from the gated
//! concatenation `[F, H]`; level 3 predicts from F3 directly.

use log::warn;
use rand::Rng;

use crate::anchors::{AnchorGrid, AnchorSpec, NUM_LEVELS};
use crate::assign::{AnchorLabel, LevelTargets};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Conv, ConvBnRelu, Ctx};
use crate::mad::{mad_apply, MadHead, MadUnit};
use crate::param::ParamStore;
use crate::tensor::{Element, Tensor};

pub const NETWORK_STRIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    /// Down-sampling path only.
    ZoomOut,
    /// Down-sampling path plus the mirrored up-sampling path.
    ZoomOutIn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attention {
    /// Per-image gating vectors from the top level.
    Mad,
    /// Gates fixed to 1: the concatenated maps pass through unchanged.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZipConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub level_channels: [usize; NUM_LEVELS],
    pub blocks_per_stage: usize,
    pub anchors: AnchorSpec,
    pub lambda: usize,
    pub topology: Topology,
    pub attention: Attention,
    /// 3 with the gray class (negative / gray / positive), 2 without.
    pub num_classes: usize,
    pub cls_weight: f64,
    pub reg_weight: f64,
}

impl Default for ZipConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 16,
            level_channels: [32, 64, 128],
            blocks_per_stage: 2,
            anchors: AnchorSpec::default(),
            lambda: 2,
            topology: Topology::ZoomOutIn,
            attention: Attention::Mad,
            num_classes: 3,
            cls_weight: 1.0,
            reg_weight: 1.0,
        }
    }
}

impl ZipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be >= 1".into()));
        }
        if !(2..=3).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes must be 2 or 3, got {}", self.num_classes)));
        }
        if self.lambda == 0 || self.lambda % 2 != 0 {
            return Err(Error::Config(format!("lambda must be a positive even number, got {}", self.lambda)));
        }
        if self.topology == Topology::ZoomOutIn && self.attention == Attention::Mad && self.lambda != 2 {
            return Err(Error::Config(format!(
                "proposal network merges two streams, so lambda must be 2 (got {})",
                self.lambda
            )));
        }
        if self.anchors.total_templates() == 0 {
            return Err(Error::Config("anchor spec has no templates".into()));
        }
        if self.anchors.strides != [8, 16, 32] {
            return Err(Error::Config(format!(
                "anchor strides must be [8, 16, 32], got {:?}",
                self.anchors.strides
            )));
        }
        Ok(())
    }

    /// Channels of the map a level predicts from.
    pub fn prediction_channels(&self, level: usize) -> usize {
        let c = self.level_channels[level - 1];
        if level < NUM_LEVELS && self.topology == Topology::ZoomOutIn {
            2 * c
        } else {
            c
        }
    }

    pub fn positive_class(&self) -> usize {
        self.num_classes - 1
    }

    pub fn class_of(&self, label: AnchorLabel) -> usize {
        match (self.num_classes, label) {
            (3, l) => l.class_index(),
            (_, AnchorLabel::Positive) => 1,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RpnHead {
    pub trunk: Conv,
    pub cls: Conv,
    pub reg: Conv,
    pub anchors: usize,
    pub classes: usize,
}

impl RpnHead {
    fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        width: usize,
        anchors: usize,
        classes: usize,
    ) -> Self {
        Self {
            trunk: Conv::new(store, rng, &format!("{name}.trunk"), c_in, width, 3, 1),
            cls: Conv::with_std(store, rng, &format!("{name}.cls"), width, anchors * classes, 1, 0.01, 0.0),
            reg: Conv::with_std(store, rng, &format!("{name}.reg"), width, anchors * 4, 1, 0.01, 0.0),
            anchors,
            classes,
        }
    }

    fn forward<T: Element>(&self, ctx: &mut Ctx<'_, '_, T>, y: Var) -> Result<(Var, Var)> {
        let t = self.trunk.forward(ctx, y)?;
        let t = ctx.graph.relu(t);
        Ok((self.cls.forward(ctx, t)?, self.reg.forward(ctx, t)?))
    }
}

#[derive(Clone, Debug)]
struct ZoomInStage {
    up: ConvBnRelu,
    lateral: Conv,
    blocks: Vec<ConvBnRelu>,
}

/// Every map of one forward pass, indexed by level - 1.
#[derive(Clone, Debug)]
pub struct LevelOutputs {
    pub f: [Var; NUM_LEVELS],
    pub h: [Option<Var>; NUM_LEVELS - 1],
    pub mu: [Option<Var>; NUM_LEVELS - 1],
    pub y: [Var; NUM_LEVELS],
    pub cls: [Option<Var>; NUM_LEVELS],
    pub reg: [Option<Var>; NUM_LEVELS],
}

#[derive(Clone, Debug)]
pub struct ZipNet {
    pub cfg: ZipConfig,
    stem: Vec<ConvBnRelu>,
    stages: Vec<Vec<ConvBnRelu>>,
    zoom_in: Vec<ZoomInStage>,
    pub mad: Option<MadUnit>,
    pub heads: [Option<RpnHead>; NUM_LEVELS],
}

impl ZipNet {
    /// Builds the network, registering its parameters in `store`.
    pub fn new<T: Element, R: Rng + ?Sized>(cfg: ZipConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let [c1, c2, c3] = cfg.level_channels;
        let s = cfg.stem_channels;
        let stem = vec![
            ConvBnRelu::new(store, rng, "stem.0", cfg.in_channels, s, 3, 2),
            ConvBnRelu::new(store, rng, "stem.1", s, s, 3, 2),
            ConvBnRelu::new(store, rng, "stem.2", s, c1, 3, 2),
        ];
        let mut stages = Vec::new();
        let mut c_prev = c1;
        for (m, &c) in cfg.level_channels.iter().enumerate() {
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| {
                    let c_in = if b == 0 { c_prev } else { c };
                    ConvBnRelu::new(store, rng, &format!("stage{}.{b}", m + 1), c_in, c, 3, 1)
                })
                .collect();
            stages.push(blocks);
            c_prev = c;
        }
        let mut zoom_in = Vec::new();
        let mut mad = None;
        if cfg.topology == Topology::ZoomOutIn {
            // stage for H2 first, then H1
            for (m, c_from, c_to) in [(2, c3, c2), (1, c2, c1)] {
                let name = format!("zoomin{m}");
                zoom_in.push(ZoomInStage {
                    up: ConvBnRelu::new(store, rng, &format!("{name}.up"), c_from, c_to, 3, 1),
                    lateral: Conv::new(store, rng, &format!("{name}.lateral"), c_to, c_to, 1, 1),
                    blocks: (0..cfg.blocks_per_stage)
                        .map(|b| ConvBnRelu::new(store, rng, &format!("{name}.{b}"), c_to, c_to, 3, 1))
                        .collect(),
                });
            }
            if cfg.attention == Attention::Mad {
                mad = Some(MadUnit {
                    heads: (1..NUM_LEVELS)
                        .map(|m| {
                            MadHead::new(store, rng, &format!("mad{m}"), m, c3, cfg.level_channels[m - 1], cfg.lambda)
                        })
                        .collect(),
                });
            }
        }
        let heads = std::array::from_fn(|i| {
            let m = i + 1;
            cfg.anchors.has_level(m).then(|| {
                RpnHead::new(
                    store,
                    rng,
                    &format!("rpn{m}"),
                    cfg.prediction_channels(m),
                    cfg.level_channels[i],
                    cfg.anchors.templates_per_level(m),
                    cfg.num_classes,
                )
            })
        });
        Ok(Self {
            cfg,
            stem,
            stages,
            zoom_in,
            mad,
            heads,
        })
    }

    pub fn forward_backbone<T: Element>(&self, ctx: &mut Ctx<'_, '_, T>, image: Var) -> Result<LevelOutputs> {
        let [_, c, h, w] = ctx.graph.value(image).shape();
        if c != self.cfg.in_channels {
            return Err(Error::dim(
                "forward_backbone",
                format!("image has {c} channels (axis 1), network expects {}", self.cfg.in_channels),
            ));
        }
        if h % NETWORK_STRIDE != 0 || w % NETWORK_STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::dim(
                "forward_backbone",
                format!("image size {h}x{w} (axes 2, 3) is not a positive multiple of {NETWORK_STRIDE}"),
            ));
        }
        let mut x = image;
        for block in &self.stem {
            x = block.forward(ctx, x)?;
        }
        let mut f = Vec::with_capacity(NUM_LEVELS);
        for (m, blocks) in self.stages.iter().enumerate() {
            if m > 0 {
                x = ctx.graph.max_pool2d(x, 2, 2)?;
            }
            for block in blocks {
                x = block.forward(ctx, x)?;
            }
            f.push(x);
        }
        let f: [Var; NUM_LEVELS] = [f[0], f[1], f[2]];

        let mut h_maps = [None, None];
        let mut mu = [None, None];
        let mut y = f;
        if self.cfg.topology == Topology::ZoomOutIn {
            let mut prev = f[2];
            for (stage, m) in self.zoom_in.iter().zip([2usize, 1]) {
                let up = ctx.graph.upsample2x(prev)?;
                let up = stage.up.forward(ctx, up)?;
                let lat = stage.lateral.forward(ctx, f[m - 1])?;
                let mut hm = ctx.graph.add(up, lat)?;
                for block in &stage.blocks {
                    hm = block.forward(ctx, hm)?;
                }
                h_maps[m - 1] = Some(hm);
                prev = hm;
            }
            for m in 1..NUM_LEVELS {
                let hm = h_maps[m - 1].expect("zoom-in map present");
                let cat = ctx.graph.concat_channels(f[m - 1], hm)?;
                y[m - 1] = match &self.mad {
                    Some(unit) => {
                        let v = unit.generate(ctx, f[2], m)?;
                        mu[m - 1] = Some(v);
                        mad_apply(ctx.graph, cat, v)?
                    }
                    None => cat,
                };
            }
        }

        let mut cls = [None, None, None];
        let mut reg = [None, None, None];
        for (i, head) in self.heads.iter().enumerate() {
            if let Some(head) = head {
                let (c, r) = head.forward(ctx, y[i])?;
                cls[i] = Some(c);
                reg[i] = Some(r);
            }
        }
        Ok(LevelOutputs {
            f,
            h: h_maps,
            mu,
            y,
            cls,
            reg,
        })
    }

    /// Anchor grids for an input of the given (padded) size; empty grids for
    /// levels without anchors.
    pub fn anchor_grids(&self, image_h: usize, image_w: usize) -> Vec<AnchorGrid> {
        self.anchor_grids_for(image_h, image_w, image_h, image_w)
    }

    /// Anchor grids for a padded `input_h × input_w` tensor holding an
    /// `image_h × image_w` picture; the inside flags use the picture bounds.
    pub fn anchor_grids_for(&self, input_h: usize, input_w: usize, image_h: usize, image_w: usize) -> Vec<AnchorGrid> {
        (1..=NUM_LEVELS)
            .map(|m| {
                if !self.cfg.anchors.has_level(m) {
                    return AnchorGrid {
                        level: m,
                        ..AnchorGrid::default()
                    };
                }
                let s = self.cfg.anchors.stride(m);
                crate::anchors::generate_anchors(&self.cfg.anchors, m, input_h / s, input_w / s, image_h, image_w)
            })
            .collect()
    }
}

/// Loss values of one forward pass (plain numbers, for logging).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTerms {
    /// (classification, regression) per level; `None` when the level had no
    /// head or no sampled anchors.
    pub per_level: [Option<(f64, f64)>; NUM_LEVELS],
    pub total: f64,
}

/// Summed multi-level RPN loss. `targets[i][m-1]` are the sampled anchors of
/// image `i` at level `m`. Per level, classification is averaged over sampled
/// anchors and squared-error regression is summed over positives and divided
/// by their count.
pub fn rpn_loss<T: Element>(
    graph: &mut Graph<T>,
    cfg: &ZipConfig,
    outputs: &LevelOutputs,
    targets: &[Vec<LevelTargets>],
    grids: &[AnchorGrid],
) -> Result<(Var, LossTerms)> {
    let k = cfg.num_classes;
    let mut terms = LossTerms::default();
    let mut total: Option<Var> = None;
    for level in 0..NUM_LEVELS {
        let (Some(cls), Some(reg)) = (outputs.cls[level], outputs.reg[level]) else {
            continue;
        };
        let grid = &grids[level];
        let [n, ck, h, w] = graph.value(cls).shape();
        let a = ck / k;
        if targets.len() != n {
            return Err(Error::dim("rpn_loss", format!("{} target sets for batch of {n}", targets.len())));
        }
        if grid.templates != a || grid.feat_h != h || grid.feat_w != w {
            return Err(Error::dim(
                "rpn_loss",
                format!(
                    "level {} head grid {h}x{w}x{a} vs anchors {}x{}x{}",
                    level + 1,
                    grid.feat_h,
                    grid.feat_w,
                    grid.templates
                ),
            ));
        }
        let mut cls_index = Vec::new();
        let mut labels = Vec::new();
        let mut reg_index = Vec::new();
        let mut reg_target = Vec::new();
        for (img, per_level) in targets.iter().enumerate() {
            for s in &per_level[level].samples {
                if s.anchor >= grid.len() {
                    return Err(Error::Index { op: "rpn_loss", index: s.anchor, bound: grid.len() });
                }
                let (row, col, t) = grid.position(s.anchor);
                for c in 0..k {
                    cls_index.push(((img * ck + t * k + c) * h + row) * w + col);
                }
                labels.push(cfg.class_of(s.label));
                if let (AnchorLabel::Positive, Some(off)) = (s.label, s.target) {
                    for r in 0..4 {
                        reg_index.push(((img * a * 4 + t * 4 + r) * h + row) * w + col);
                    }
                    reg_target.extend(off.0.iter().map(|&v| T::of(v)));
                }
            }
        }
        if labels.is_empty() {
            warn!("level {}: no sampled anchors, contributing 0 loss", level + 1);
            continue;
        }
        let b = labels.len();
        let logits = graph.gather(cls, cls_index, [b, k, 1, 1])?;
        let ce = graph.softmax_cross_entropy(logits, &labels)?;
        let ce = graph.scale(ce, cfg.cls_weight);
        let mut level_loss = ce;
        let mut reg_value = 0.0;
        let p = reg_target.len() / 4;
        if p > 0 {
            let pred = graph.gather(reg, reg_index, [p, 4, 1, 1])?;
            let target = Tensor::new([p, 4, 1, 1], reg_target)?;
            let l2 = graph.l2_regression(pred, &target, &vec![true; p])?;
            let l2 = graph.scale(l2, cfg.reg_weight / p as f64);
            reg_value = graph.scalar_value(l2);
            level_loss = graph.add(level_loss, l2)?;
        }
        terms.per_level[level] = Some((graph.scalar_value(ce), reg_value));
        total = Some(match total {
            Some(t) => graph.add(t, level_loss)?,
            None => level_loss,
        });
    }
    let total = match total {
        Some(t) => t,
        None => graph.leaf(Tensor::zeros([1, 1, 1, 1]), false),
    };
    terms.total = graph.scalar_value(total);
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NormMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: ZipConfig) -> (ZipNet, ParamStore<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let net = ZipNet::new(cfg, &mut store, &mut rng).unwrap();
        (net, store)
    }

    #[test]
    fn shape_ladder_at_256() {
        let (net, store) = build(ZipConfig::default());
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, NormMode::Eval);
        let img = ctx.graph.input(Tensor::zeros([1, 3, 256, 256]));
        let out = net.forward_backbone(&mut ctx, img).unwrap();
        assert_eq!(g.value(out.f[0]).shape(), [1, 32, 32, 32]);
        assert_eq!(g.value(out.f[1]).shape(), [1, 64, 16, 16]);
        assert_eq!(g.value(out.f[2]).shape(), [1, 128, 8, 8]);
        for m in 0..2 {
            assert_eq!(g.value(out.h[m].unwrap()).shape(), g.value(out.f[m]).shape());
            assert_eq!(g.value(out.mu[m].unwrap()).shape(), [1, 2 * [32, 64][m], 1, 1]);
        }
        assert_eq!(g.value(out.cls[0].unwrap()).shape(), [1, 30, 32, 32]);
        assert_eq!(g.value(out.reg[2].unwrap()).shape(), [1, 40, 8, 8]);
    }

    #[test]
    fn rejects_non_multiple_of_32() {
        let (net, store) = build(ZipConfig::default());
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, NormMode::Eval);
        let img = ctx.graph.input(Tensor::zeros([1, 3, 40, 64]));
        assert!(net.forward_backbone(&mut ctx, img).is_err());
    }

    #[test]
    fn zoom_out_all_on_top_has_single_head() {
        let cfg = ZipConfig {
            topology: Topology::ZoomOut,
            anchors: AnchorSpec::all_on_top(),
            ..ZipConfig::default()
        };
        let (net, _) = build(cfg);
        assert!(net.heads[0].is_none() && net.heads[1].is_none());
        assert_eq!(net.heads[2].as_ref().unwrap().anchors, 30);
        assert!(net.mad.is_none());
    }

    #[test]
    fn lambda_must_match_two_streams() {
        let cfg = ZipConfig { lambda: 4, ..ZipConfig::default() };
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(ZipNet::new(cfg, &mut store, &mut rng), Err(Error::Config(_))));
    }
}
