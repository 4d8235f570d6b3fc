//! Run configuration and the training loop.

use log::{error, info};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::anchors::{AnchorGrid, AnchorSpec, NUM_LEVELS};
use crate::assign::{assign, dynamic_train_scale, AnchorLabel, AssignmentConfig, LevelTargets, TrainScaleConfig};
use crate::boxes::BBox;
use crate::config::{self, KvFile};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::graph::{Graph, NormMode};
use crate::image::{image_to_tensor, RgbImage};
use crate::layers::Ctx;
use crate::network::{rpn_loss, Attention, LossTerms, Topology, ZipConfig, ZipNet};
use crate::param::{sgd_step, ParamStore, SgdConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate halves this many times, evenly spaced over the run.
    pub lr_halvings: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_grad_norm: f64,
    pub dy_train_scale: bool,
    pub scale: TrainScaleConfig,
    pub assign: AssignmentConfig,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_halvings: 3,
            clip_grad_norm: 10.0,
            dy_train_scale: true,
            scale: TrainScaleConfig::default(),
            assign: AssignmentConfig::default(),
            log_every: 100,
        }
    }
}

impl TrainConfig {
    /// Step `step` of `steps` falls in quarter `q`; the rate is `lr / 2^q`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let periods = self.lr_halvings + 1;
        let q = (step * periods / self.steps.max(1)).min(self.lr_halvings);
        self.lr * 0.5f64.powi(q as i32)
    }

    pub fn sgd_at(&self, step: usize) -> SgdConfig {
        SgdConfig {
            lr: self.lr_at(step),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Everything a config file can set: the model and its training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ZipConfig,
    pub train: TrainConfig,
}

fn parse_topology(s: &str) -> Result<Topology> {
    match s {
        "zoomout" => Ok(Topology::ZoomOut),
        "zoomoutin" => Ok(Topology::ZoomOutIn),
        _ => Err(Error::Config(format!("topology must be zoomout or zoomoutin, got `{s}`"))),
    }
}

fn parse_attention(s: &str) -> Result<Attention> {
    match s {
        "mad" => Ok(Attention::Mad),
        "uniform" => Ok(Attention::Uniform),
        _ => Err(Error::Config(format!("attention must be mad or uniform, got `{s}`"))),
    }
}

fn array3<T: Copy>(key: &str, v: Vec<T>) -> Result<[T; 3]> {
    v.try_into()
        .map_err(|v: Vec<T>| Error::Config(format!("key `{key}` needs 3 values, got {}", v.len())))
}

impl RunConfig {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let d = Self::default();
        let (m, t) = (&d.model, &d.train);
        let mut scales = m.anchors.scales.clone();
        for (i, s) in scales.iter_mut().enumerate() {
            if let Some(v) = kv.list(&format!("anchor_scales_{}", i + 1))? {
                *s = v;
            }
        }
        let anchors = AnchorSpec {
            scales,
            ratios: kv.list("anchor_ratios")?.unwrap_or(m.anchors.ratios.clone()),
            strides: match kv.list("anchor_strides")? {
                Some(v) => array3("anchor_strides", v)?,
                None => m.anchors.strides,
            },
        };
        let model = ZipConfig {
            in_channels: kv.get_or("in_channels", m.in_channels)?,
            stem_channels: kv.get_or("stem_channels", m.stem_channels)?,
            level_channels: match kv.list("level_channels")? {
                Some(v) => array3("level_channels", v)?,
                None => m.level_channels,
            },
            blocks_per_stage: kv.get_or("blocks_per_stage", m.blocks_per_stage)?,
            anchors,
            lambda: kv.get_or("lambda", m.lambda)?,
            topology: match kv.raw("topology") {
                Some(s) => parse_topology(s)?,
                None => m.topology,
            },
            attention: match kv.raw("attention") {
                Some(s) => parse_attention(s)?,
                None => m.attention,
            },
            num_classes: kv.get_or("num_classes", m.num_classes)?,
            cls_weight: kv.get_or("cls_weight", m.cls_weight)?,
            reg_weight: kv.get_or("reg_weight", m.reg_weight)?,
        };
        let a = &t.assign;
        let gray: Vec<f64> = kv.list("iou_gray")?.unwrap_or(vec![a.iou_gray.0, a.iou_gray.1]);
        if gray.len() != 2 {
            return Err(Error::Config("key `iou_gray` needs 2 values".into()));
        }
        let train = TrainConfig {
            steps: kv.get_or("steps", t.steps)?,
            lr: kv.get_or("lr", t.lr)?,
            momentum: kv.get_or("momentum", t.momentum)?,
            weight_decay: kv.get_or("weight_decay", t.weight_decay)?,
            lr_halvings: kv.get_or("lr_halvings", t.lr_halvings)?,
            clip_grad_norm: kv.get_or("clip_grad_norm", t.clip_grad_norm)?,
            dy_train_scale: kv.get_or("dy_train_scale", t.dy_train_scale)?,
            scale: TrainScaleConfig {
                target_lo: kv.get_or("scale_target_lo", t.scale.target_lo)?,
                target_hi: kv.get_or("scale_target_hi", t.scale.target_hi)?,
                min_side: kv.get_or("scale_min_side", t.scale.min_side)?,
                max_side: kv.get_or("scale_max_side", t.scale.max_side)?,
            },
            assign: AssignmentConfig {
                iou_pos: kv.get_or("iou_pos", a.iou_pos)?,
                iou_gray: (gray[0], gray[1]),
                iou_neg: kv.get_or("iou_neg", a.iou_neg)?,
                neg_to_pos_max: kv.get_or("neg_to_pos_max", a.neg_to_pos_max)?,
                gray_fraction: kv.get_or("gray_fraction", a.gray_fraction)?,
                batch_cap: kv.get_or("batch_cap", a.batch_cap)?,
                empty_floor: kv.get_or("empty_floor", a.empty_floor)?,
                use_gray: kv.get_or("use_gray", a.use_gray)?,
                equilibrium: kv.get_or("equilibrium", a.equilibrium)?,
            },
            log_every: kv.get_or("log_every", t.log_every)?,
        };
        kv.finish()?;
        if model.num_classes == 2 && train.assign.use_gray {
            return Err(Error::Config("use_gray requires num_classes = 3".into()));
        }
        if train.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        model.validate()?;
        Ok(Self { model, train })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text)?)
    }

    pub fn to_kv(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let a = &t.assign;
        let mut e: Vec<(&str, String)> = vec![
            ("in_channels", m.in_channels.to_string()),
            ("stem_channels", m.stem_channels.to_string()),
            ("level_channels", config::join(&m.level_channels)),
            ("blocks_per_stage", m.blocks_per_stage.to_string()),
            ("lambda", m.lambda.to_string()),
            (
                "topology",
                match m.topology {
                    Topology::ZoomOut => "zoomout",
                    Topology::ZoomOutIn => "zoomoutin",
                }
                .into(),
            ),
            (
                "attention",
                match m.attention {
                    Attention::Mad => "mad",
                    Attention::Uniform => "uniform",
                }
                .into(),
            ),
            ("num_classes", m.num_classes.to_string()),
            ("cls_weight", m.cls_weight.to_string()),
            ("reg_weight", m.reg_weight.to_string()),
        ];
        let keys = ["anchor_scales_1", "anchor_scales_2", "anchor_scales_3"];
        for (k, s) in keys.iter().zip(&m.anchors.scales) {
            e.push((k, config::join(s)));
        }
        e.extend([
            ("anchor_ratios", config::join(&m.anchors.ratios)),
            ("anchor_strides", config::join(&m.anchors.strides)),
            ("steps", t.steps.to_string()),
            ("lr", t.lr.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("lr_halvings", t.lr_halvings.to_string()),
            ("clip_grad_norm", t.clip_grad_norm.to_string()),
            ("dy_train_scale", t.dy_train_scale.to_string()),
            ("scale_target_lo", t.scale.target_lo.to_string()),
            ("scale_target_hi", t.scale.target_hi.to_string()),
            ("scale_min_side", t.scale.min_side.to_string()),
            ("scale_max_side", t.scale.max_side.to_string()),
            ("iou_pos", a.iou_pos.to_string()),
            ("iou_gray", config::join(&[a.iou_gray.0, a.iou_gray.1])),
            ("iou_neg", a.iou_neg.to_string()),
            ("neg_to_pos_max", a.neg_to_pos_max.to_string()),
            ("gray_fraction", a.gray_fraction.to_string()),
            ("batch_cap", a.batch_cap.to_string()),
            ("empty_floor", a.empty_floor.to_string()),
            ("use_gray", a.use_gray.to_string()),
            ("equilibrium", a.equilibrium.to_string()),
            ("log_every", t.log_every.to_string()),
        ]);
        config::render(&e)
    }
}

/// One image ready for a training step.
#[derive(Clone, Debug)]
pub struct Example {
    pub input: Tensor<f32>,
    pub grids: Vec<AnchorGrid>,
    pub targets: Vec<LevelTargets>,
    pub scale: f64,
    pub gts: Vec<BBox>,
}

/// Rescales the image (dynamic training scale), pads it to the network
/// stride, builds anchors for the padded grid, and samples targets.
pub fn prepare_example<R: Rng + ?Sized>(
    net: &ZipNet,
    image: &RgbImage,
    gts: &[BBox],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Example {
    let factor = if cfg.dy_train_scale {
        dynamic_train_scale(image.height, image.width, gts, &cfg.scale, rng)
    } else {
        1.0
    };
    let (img, fy, fx) = image.rescale(factor);
    let gts: Vec<BBox> = gts
        .iter()
        .map(|b| BBox::new(b.x1 * fx, b.y1 * fy, b.x2 * fx, b.y2 * fy))
        .filter(|b| b.is_valid())
        .collect();
    let input = image_to_tensor::<f32>(&img);
    let grids = net.anchor_grids_for(input.h(), input.w(), img.height, img.width);
    let targets = assign(&grids, &gts, &cfg.assign, rng);
    Example { input, grids, targets, scale: factor, gts }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub loss: LossTerms,
    pub positives: usize,
}

fn loss_dump(terms: &LossTerms) -> String {
    (0..NUM_LEVELS)
        .map(|m| match terms.per_level[m] {
            Some((c, r)) => format!("level{}: cls={c} reg={r}", m + 1),
            None => format!("level{}: none", m + 1),
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|(_, p)| p.tensor.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let f = (max_norm / norm) as f32;
        for p in store.iter_mut() {
            if let Some(g) = p.tensor.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= f);
            }
        }
    }
    norm
}

/// Forward, backward and one SGD update on a single example. A non-finite
/// loss aborts before any parameter changes.
pub fn train_step(
    net: &ZipNet,
    store: &mut ParamStore<f32>,
    ex: &Example,
    sgd: &SgdConfig,
    max_grad_norm: f64,
) -> Result<LossTerms> {
    let mut graph = Graph::new();
    let (loss, terms, bn) = {
        let mut ctx = Ctx::new(&mut graph, store, NormMode::Train);
        let x = ctx.graph.input(ex.input.clone());
        let out = net.forward_backbone(&mut ctx, x)?;
        let bn = std::mem::take(&mut ctx.bn_updates);
        let (loss, terms) = rpn_loss(&mut graph, &net.cfg, &out, std::slice::from_ref(&ex.targets), &ex.grids)?;
        (loss, terms, bn)
    };
    if !terms.total.is_finite() {
        let dump = loss_dump(&terms);
        error!("non-finite loss: {dump}");
        return Err(Error::NonFinite(format!("training loss ({dump})")));
    }
    graph.backward(loss)?;
    store.zero_grads();
    graph.collect_param_grads(store);
    clip_grad_norm(store, max_grad_norm);
    for u in &bn {
        u.apply(store);
    }
    sgd_step(store, sgd)?;
    Ok(terms)
}

/// Trains for `cfg.steps` steps, one image per step, visiting the corpus in
/// a fresh random order each epoch. `on_step` sees every report.
pub fn train(
    net: &ZipNet,
    store: &mut ParamStore<f32>,
    corpus: &dyn Corpus,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let mut order: Vec<usize> = Vec::new();
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..corpus.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled above");
        let (_, image, gts) = corpus.get(idx)?;
        let ex = prepare_example(net, &image, &gts, cfg, rng);
        let sgd = cfg.sgd_at(step);
        let loss = train_step(net, store, &ex, &sgd, cfg.clip_grad_norm)?;
        let positives = ex.targets.iter().map(|t| t.count(AnchorLabel::Positive)).sum();
        let r = StepReport { step, lr: sgd.lr, loss, positives };
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            info!("step {step} lr {:.2e} loss {:.4} ({})", r.lr, r.loss.total, loss_dump(&r.loss));
        }
        on_step(&r);
        reports.push(r);
    }
    Ok(reports)
}
