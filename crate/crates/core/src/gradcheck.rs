//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assign::{assign, AssignmentConfig};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::graph::{Graph, NormMode, Var};
use crate::layers::Ctx;
use crate::network::{rpn_loss, ZipConfig, ZipNet};
use crate::param::ParamStore;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Tensors longer than this are checked on a random subset of entries.
    pub max_entries_per_tensor: usize,
    pub seed: u64,
    /// Lower bound on the denominator of the relative error, so gradients
    /// well below this magnitude are compared in absolute terms.
    pub zero_floor: f64,
    /// When set, entries whose forward and backward one-sided differences
    /// disagree by more than this relative amount straddle a kink (ReLU or
    /// max selection) and are skipped instead of compared.
    pub kink_tol: Option<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_entries_per_tensor: 64,
            seed: 0,
            zero_floor: 1e-8,
            kink_tol: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries skipped as straddling a kink.
    pub skipped: usize,
    /// (parameter name, flat index) of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric gradient at the worst entry.
    pub worst_values: (f64, f64),
}

/// `|a - n| / max(|a|, |n|, floor)`: relative where the gradient is large,
/// absolute (scaled by `floor`) where both are near zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of `loss_fn` with respect to every
/// trainable entry of `store` against central differences.
pub fn gradcheck<F>(store: &mut ParamStore<f64>, loss_fn: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, store)?;
        let v = g.scalar_value(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    store.zero_grads();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let base = g.scalar_value(loss);
    if !base.is_finite() {
        return Err(Error::NonFinite("loss is not finite".into()));
    }
    g.backward(loss)?;
    g.collect_param_grads(store);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport::default();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let len = store.tensor(id).len();
        let analytic = store
            .get(id)
            .tensor
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; len]);
        if analytic.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{}`", store.get(id).name)));
        }
        let entries: Vec<usize> = if len <= opts.max_entries_per_tensor {
            (0..len).collect()
        } else {
            let mut e = sample(&mut rng, len, opts.max_entries_per_tensor).into_vec();
            e.sort_unstable();
            e
        };
        for i in entries {
            let orig = store.tensor(id).data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + opts.eps;
            let plus = eval(store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig - opts.eps;
            let minus = eval(store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            if let Some(tol) = opts.kink_tol {
                let fwd = (plus - base) / opts.eps;
                let bwd = (base - minus) / opts.eps;
                if relative_error(fwd, bwd, opts.zero_floor) > tol {
                    report.skipped += 1;
                    continue;
                }
            }
            let err = relative_error(analytic[i], numeric, opts.zero_floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), i));
                report.worst_values = (analytic[i], numeric);
            }
        }
    }
    store.zero_grads();
    Ok(report)
}

/// Settings for the full-network check. ReLU and max selection make the
/// loss piecewise smooth, so a small step plus kink skipping is needed; tiny
/// gradients are compared against a `1e-6` floor because the summed loss
/// carries roundoff of that order after dividing by `eps`.
pub fn network_check_options(seed: u64) -> GradcheckOptions {
    GradcheckOptions {
        eps: 1e-5,
        seed,
        zero_floor: 1e-6,
        kink_tol: Some(2e-4),
        ..GradcheckOptions::default()
    }
}

/// Largest fraction of entries a check may skip as kinks and still pass.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        let total = (self.checked + self.skipped).max(1) as f64;
        self.checked > 0 && self.max_rel_error <= tol && (self.skipped as f64) / total <= MAX_SKIPPED_FRACTION
    }
}

/// One named check of the suite.
#[derive(Clone, Debug)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradcheckReport,
}

fn weights(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    Tensor::<f64>::uniform([1, 1, 1, len], -1.0, 1.0, rng).into_data()
}

type Case = (&'static str, Vec<Shape>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

/// Every differentiable primitive on small random inputs, each reduced to
/// a scalar by a random weighted sum.
pub fn primitive_checks(opts: &GradcheckOptions) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let roi_features = {
        let mut r = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
        Tensor::<f64>::randn([1, 2, 6, 6], 1.0, &mut r)
    };
    let cases: Vec<Case> = vec![
        ("conv2d 3x3 stride 1", vec![[2, 3, 5, 5], [4, 3, 3, 3], [4, 1, 1, 1]], Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 1))),
        ("conv2d 3x3 stride 2", vec![[1, 2, 7, 6], [3, 2, 3, 3], [3, 1, 1, 1]], Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2, 1))),
        ("conv2d 1x1", vec![[2, 3, 4, 4], [5, 3, 1, 1], [5, 1, 1, 1]], Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 0))),
        ("max_pool2d", vec![[2, 2, 6, 6]], Box::new(|g, v| g.max_pool2d(v[0], 2, 2))),
        ("global_max_pool", vec![[2, 3, 4, 5]], Box::new(|g, v| g.global_max_pool(v[0]))),
        ("upsample2x", vec![[1, 2, 3, 4]], Box::new(|g, v| g.upsample2x(v[0]))),
        ("relu", vec![[2, 3, 4, 4]], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("add", vec![[1, 2, 3, 3], [1, 2, 3, 3]], Box::new(|g, v| g.add(v[0], v[1]))),
        ("scale", vec![[1, 2, 3, 3]], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("concat_channels", vec![[2, 2, 3, 3], [2, 3, 3, 3]], Box::new(|g, v| g.concat_channels(v[0], v[1]))),
        ("channel_scale", vec![[2, 4, 3, 3], [2, 4, 1, 1]], Box::new(|g, v| g.channel_scale(v[0], v[1]))),
        (
            "batch_norm train",
            vec![[2, 3, 4, 4], [3, 1, 1, 1], [3, 1, 1, 1]],
            Box::new(|g, v| {
                let rm = g.leaf(Tensor::zeros([3, 1, 1, 1]), false);
                let rv = g.leaf(Tensor::full([3, 1, 1, 1], 1.0), false);
                Ok(g.batch_norm(v[0], v[1], v[2], (rm, rv), NormMode::Train)?.0)
            }),
        ),
        (
            "batch_norm eval",
            vec![[2, 3, 4, 4], [3, 1, 1, 1], [3, 1, 1, 1]],
            Box::new(|g, v| {
                let rm = g.leaf(Tensor::full([3, 1, 1, 1], 0.2), false);
                let rv = g.leaf(Tensor::full([3, 1, 1, 1], 1.5), false);
                Ok(g.batch_norm(v[0], v[1], v[2], (rm, rv), NormMode::Eval)?.0)
            }),
        ),
        ("gather", vec![[1, 3, 4, 4]], Box::new(|g, v| g.gather(v[0], vec![0, 5, 5, 17, 40, 47], [3, 2, 1, 1]))),
        (
            "softmax_cross_entropy",
            vec![[4, 3, 1, 1]],
            Box::new(|g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1, 2])),
        ),
        (
            "l2_regression",
            vec![[3, 4, 1, 1]],
            Box::new(|g, v| {
                let t = Tensor::from_fn([3, 4, 1, 1], |[n, c, _, _]| (n as f64 - c as f64) * 0.3);
                g.l2_regression(v[0], &t, &[true, false, true])
            }),
        ),
    ];
    let mut out = Vec::new();
    for (name, shapes, f) in cases {
        let mut store = ParamStore::<f64>::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| store.add(&format!("in{i}"), Tensor::randn(*s, 1.0, &mut rng)))
            .collect();
        let probe_len = {
            let mut g = Graph::new();
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
            let y = f(&mut g, &vars)?;
            g.value(y).len()
        };
        let w = weights(probe_len, &mut rng);
        let report = gradcheck(
            &mut store,
            |g, s| {
                let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
                let y = f(g, &vars)?;
                g.weighted_sum(y, w.clone())
            },
            opts,
        )?;
        out.push(NamedCheck { name: name.into(), report });
    }

    // RoI pooling routes through fixed argmax indices taken at the base point
    let mut store = ParamStore::<f64>::new();
    let id = store.add("features", roi_features);
    let w = weights(2 * 2 * 2 * 2, &mut rng);
    let report = gradcheck(
        &mut store,
        |g, s| {
            let x = g.param(s, id);
            let fresh = crate::roi::roi_pool_argmax(g.value(x), &windows_for_check(), (2, 2))?;
            let y = g.route(x, [2, 2, 2, 2], fresh)?;
            g.weighted_sum(y, w.clone())
        },
        opts,
    )?;
    out.push(NamedCheck { name: "roi_pool".into(), report });
    Ok(out)
}

fn windows_for_check() -> [crate::roi::RoiWindow; 2] {
    [
        crate::roi::project_roi(&crate::boxes::BBox::new(0.0, 0.0, 48.0, 48.0), 8, 6, 6),
        crate::roi::project_roi(&crate::boxes::BBox::new(9.0, 4.0, 30.0, 40.0), 8, 6, 6),
    ]
}

/// The full network with MAD gating and the multi-level RPN loss, in f64, on
/// a `1×3×size×size` random image with two ground-truth boxes.
pub fn network_check(cfg: &ZipConfig, size: usize, opts: &GradcheckOptions) -> Result<NamedCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = ParamStore::<f64>::new();
    let net = ZipNet::new(cfg.clone(), &mut store, &mut rng)?;
    let image = Tensor::<f64>::randn([1, 3, size, size], 1.0, &mut rng);
    let s = size as f64;
    let gts = vec![
        BBox::new(0.1 * s, 0.15 * s, 0.4 * s, 0.5 * s),
        BBox::new(0.5 * s, 0.45 * s, 0.95 * s, 0.9 * s),
    ];
    let grids = net.anchor_grids(size, size);
    let targets = vec![assign(&grids, &gts, &AssignmentConfig::default(), &mut rng)];
    let report = gradcheck(
        &mut store,
        |g, s| {
            let mut ctx = Ctx::new(g, s, NormMode::Train);
            let x = ctx.graph.input(image.clone());
            let out = net.forward_backbone(&mut ctx, x)?;
            Ok(rpn_loss(g, &net.cfg, &out, &targets, &grids)?.0)
        },
        opts,
    )?;
    Ok(NamedCheck { name: "network (mad -> gating -> rpn loss)".into(), report })
}

/// The configuration the full-path check uses: narrow widths so a 64×64
/// input runs in milliseconds.
pub fn small_network_config() -> ZipConfig {
    ZipConfig {
        stem_channels: 4,
        level_channels: [4, 6, 8],
        blocks_per_stage: 1,
        ..ZipConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::from_fn([1, 2, 3, 3], |[_, c, y, x]| (c + y * 3 + x) as f64 * 0.1));
        let weights: Vec<f64> = (0..18).map(|i| (i as f64 * 0.7).cos()).collect();
        let report = gradcheck(
            &mut store,
            |g, s| {
                let v = g.param(s, x);
                let y = g.scale(v, 3.0);
                g.weighted_sum(y, weights.clone())
            },
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 18);
        assert!(report.max_rel_error <= 1e-8, "{report:?}");
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::full([1, 1, 1, 1], f64::NAN));
        let r = gradcheck(
            &mut store,
            |g, s| {
                let v = g.param(s, x);
                g.weighted_sum(v, vec![1.0])
            },
            &GradcheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}

#[cfg(test)]
mod suite_tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        let opts = GradcheckOptions::default();
        for c in primitive_checks(&opts).unwrap() {
            eprintln!("{:<28} {:.3e} ({} entries)", c.name, c.report.max_rel_error, c.report.checked);
            assert!(c.report.passes(1e-4), "{}: {:?}", c.name, c.report);
        }
    }

    #[test]
    fn network_passes() {
        let c = network_check(&small_network_config(), 64, &network_check_options(0)).unwrap();
        assert!(c.report.passes(1e-4), "{:?}", c.report);
    }
}
