//! Hand-worked values, frozen.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zoomnet_core::assign::{band, AssignmentConfig, Band};
use zoomnet_core::boxes::{decode_offsets, encode_offsets, iou, BBox};
use zoomnet_core::graph::BnUpdate;
use zoomnet_core::inference::nms;
use zoomnet_core::kernels::{conv2d_forward, max_pool2d_forward, upsample2x_forward};
use zoomnet_core::mad::mad_apply;
use zoomnet_core::metrics::{average_recall, ImageMatches};
use zoomnet_core::roi::{project_roi, roi_pool};
use zoomnet_core::{sgd_step, Graph, NormMode, ParamStore, SgdConfig, Tensor};

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [_, ci, h, w] = x.shape();
    let [co, _, kh, kw] = k.shape();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = b[o];
                for c in 0..ci {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let (y, xx) = ((oy * stride + dy) as isize - pad as isize, (ox * stride + dx) as isize - pad as isize);
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                s += x.at(0, c, y as usize, xx as usize) * k.at(o, c, dy, dx);
                            }
                        }
                    }
                }
                out.push(s);
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (stride, pad, ks) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
        let x = Tensor::<f64>::randn([1, 3, 7, 6], 1.0, &mut rng);
        let k = Tensor::<f64>::randn([4, 3, ks, ks], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([1, 4, 1, 1], 1.0, &mut rng);
        let (y, _) = conv2d_forward(&x, &k, &b, stride, pad).unwrap();
        close(y.data(), &naive_conv(&x, &k, b.data(), stride, pad), 1e-12);
    }
}

#[test]
fn conv_box_filter_values() {
    let x = Tensor::<f64>::new([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let k = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
    let b = Tensor::<f64>::full([1, 1, 1, 1], 0.5);
    let (y, _) = conv2d_forward(&x, &k, &b, 1, 1).unwrap();
    close(y.data(), &[12.5, 21.5, 16.5, 27.5, 45.5, 33.5, 24.5, 39.5, 28.5], 0.0);
}

#[test]
fn max_pool_picks_window_maxima() {
    let x = Tensor::<f64>::new([1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
    let (y, arg) = max_pool2d_forward(&x, 2, 2).unwrap();
    close(y.data(), &[5.0, 7.0, 13.0, 15.0], 0.0);
    assert_eq!(arg, vec![5, 7, 13, 15]);
}

#[test]
fn bilinear_upsample_values() {
    let x = Tensor::<f64>::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let y = upsample2x_forward(&x).unwrap();
    #[rustfmt::skip]
    let want = [
        0.0, 0.25, 0.75, 1.0,
        0.5, 0.75, 1.25, 1.5,
        1.5, 1.75, 2.25, 2.5,
        2.0, 2.25, 2.75, 3.0,
    ];
    close(y.data(), &want, 1e-15);
}

#[test]
fn batch_norm_train_stats_and_running_update() {
    let mut store = ParamStore::<f64>::new();
    let gamma = store.add("g", Tensor::full([1, 1, 1, 1], 1.0));
    let beta = store.add("b", Tensor::full([1, 1, 1, 1], 0.0));
    let rm = store.add_buffer("rm", Tensor::full([1, 1, 1, 1], 0.0));
    let rv = store.add_buffer("rv", Tensor::full([1, 1, 1, 1], 1.0));
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let (gv, bv) = (g.param(&store, gamma), g.param(&store, beta));
    let running = (g.param(&store, rm), g.param(&store, rv));
    let (y, stats) = g.batch_norm(x, gv, bv, running, NormMode::Train).unwrap();
    let (mean, unbiased) = stats.unwrap();
    close(&mean, &[2.5], 1e-15);
    close(&unbiased, &[5.0 / 3.0], 1e-15);
    // biased variance 1.25 normalises
    let s = (1.25f64 + 1e-5).sqrt();
    close(g.value(y).data(), &[-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s], 1e-12);
    BnUpdate { running_mean: rm, running_var: rv, batch_mean: mean, batch_var_unbiased: unbiased }.apply(&mut store);
    close(store.tensor(rm).data(), &[0.25], 1e-15);
    close(store.tensor(rv).data(), &[0.9 + 0.1 * 5.0 / 3.0], 1e-15);
}

#[test]
fn momentum_sgd_two_steps() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::full([1, 1, 1, 1], 1.0));
    let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.01 };
    store.get_mut(w).tensor.grad = Some(vec![0.5]);
    sgd_step(&mut store, &cfg).unwrap();
    close(store.tensor(w).data(), &[0.949], 1e-15);
    store.get_mut(w).tensor.grad = Some(vec![0.5]);
    sgd_step(&mut store, &cfg).unwrap();
    close(store.tensor(w).data(), &[0.852151], 1e-14);
    // grads are consumed
    assert!(sgd_step(&mut store, &cfg).is_err());
}

#[test]
fn gating_gradient_is_channel_dot_product() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new([1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
    let mu = g.leaf(Tensor::new([1, 2, 1, 1], vec![0.5, 2.0]).unwrap(), true);
    let y = mad_apply(&mut g, x, mu).unwrap();
    close(g.value(y).data(), &[0.5, 1.0, 6.0, 8.0], 0.0);
    let s = g.weighted_sum(y, vec![1.0, -1.0, 2.0, 0.5]).unwrap();
    assert_eq!(g.scalar_value(s), 0.5 - 1.0 + 12.0 + 4.0);
    g.backward(s).unwrap();
    // d/dmu_c = sum_hw w * x
    close(g.grad(mu).unwrap(), &[1.0 - 2.0, 6.0 + 2.0], 0.0);
    close(g.grad(x).unwrap(), &[0.5, -0.5, 4.0, 1.0], 0.0);
}

#[test]
fn gating_rejects_wrong_length() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros([1, 3, 2, 2]));
    let mu = g.input(Tensor::zeros([1, 2, 1, 1]));
    assert!(mad_apply(&mut g, x, mu).is_err());
}

#[test]
fn iou_of_shifted_squares() {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0);
    let b = BBox::new(1.0, 1.0, 11.0, 11.0);
    assert!((iou(&a, &b) - 81.0 / 119.0).abs() < 1e-15);
    let c = BBox::new(5.0, 0.0, 15.0, 10.0);
    assert!((iou(&a, &c) - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn nms_keeps_expected_indices() {
    let boxes = [
        BBox::new(0.0, 0.0, 10.0, 10.0).with_score(0.9),
        BBox::new(1.0, 1.0, 11.0, 11.0).with_score(0.8),
        BBox::new(20.0, 20.0, 30.0, 30.0).with_score(0.7),
        BBox::new(0.0, 0.0, 10.0, 10.0).with_score(0.9),
        BBox::new(5.0, 0.0, 15.0, 10.0).with_score(0.95),
    ];
    // 4 first; 0 overlaps it by 1/3 and survives; 3 duplicates 0 (tie
    // broken by index); 1 overlaps 0 by 0.68
    assert_eq!(nms(&boxes, 0.5, 100), vec![4, 0, 2]);
    assert_eq!(nms(&boxes, 0.3, 100), vec![4, 2]);
    assert_eq!(nms(&boxes, 0.7, 100), vec![4, 0, 1, 2]);
    assert_eq!(nms(&boxes, 0.5, 2), vec![4, 0]);
}

#[test]
fn bands_at_boundaries() {
    let cfg = AssignmentConfig::default();
    let cases = [
        (0.0, Band::Negative),
        (0.2499, Band::Negative),
        (0.25, Band::Excluded),
        (0.3499, Band::Excluded),
        (0.35, Band::Gray),
        (0.55, Band::Gray),
        (0.5501, Band::Excluded),
        (0.5999, Band::Excluded),
        (0.6, Band::Positive),
        (1.0, Band::Positive),
    ];
    for (v, want) in cases {
        assert_eq!(band(v, &cfg), want, "iou {v}");
    }
}

#[test]
fn codec_values() {
    let anchor = BBox::from_center(50.0, 50.0, 20.0, 40.0);
    let gt = BBox::from_center(60.0, 40.0, 40.0, 10.0);
    let t = encode_offsets(&anchor, &gt).unwrap().0;
    close(&t, &[0.5, -0.25, 2f64.ln(), 0.25f64.ln()], 1e-15);
    let back = decode_offsets(&anchor, &zoomnet_core::boxes::Offsets(t));
    close(&back.coords(), &gt.coords(), 1e-12);
}

#[test]
fn recall_of_two_object_image() {
    let gts = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(40.0, 40.0, 50.0, 50.0)];
    let props = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(41.0, 41.0, 51.0, 51.0), BBox::new(100.0, 100.0, 110.0, 110.0)];
    let m = vec![ImageMatches::compute(0, &props, &gts, 1000)];
    // exact match hits all ten thresholds; the 0.68 overlap hits 0.50..0.65
    assert_eq!(average_recall(&m, 1, None), Some(0.5));
    assert_eq!(average_recall(&m, 2, None), Some(0.7));
    assert_eq!(average_recall(&m, 3, None), Some(0.7));
    assert_eq!(average_recall(&[], 3, None), None);
}

#[test]
fn roi_window_and_pool_values() {
    let roi = BBox::new(10.0, 10.0, 40.0, 40.0);
    let win = project_roi(&roi, 16, 8, 8);
    assert_eq!((win.x0, win.y0, win.x1, win.y1, win.degenerate), (0, 0, 3, 3, false));
    let tiny = project_roi(&BBox::new(130.0, 130.0, 130.5, 130.5), 16, 8, 8);
    assert!(tiny.x1 - tiny.x0 == 1 && tiny.y1 - tiny.y0 == 1);

    let mut g = Graph::<f64>::new();
    let f = g.input(Tensor::new([1, 1, 8, 8], (0..64).map(f64::from).collect()).unwrap());
    let (out, degenerate) = roi_pool(&mut g, f, &[roi], 16, (2, 2)).unwrap();
    assert_eq!(degenerate, vec![false]);
    // bins [0,2) and [1,3) on both axes
    close(g.value(out).data(), &[9.0, 10.0, 17.0, 18.0], 0.0);
}

#[test]
fn roi_pool_matches_brute_force_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let feat = Tensor::<f64>::randn([1, 2, 9, 11], 1.0, &mut rng);
    let rois: Vec<BBox> = (0..30)
        .map(|i| {
            let x = (i * 7 % 120) as f64;
            let y = (i * 13 % 100) as f64;
            BBox::new(x, y, x + 8.0 + (i % 5) as f64 * 12.0, y + 8.0 + (i % 4) as f64 * 10.0)
        })
        .collect();
    let mut g = Graph::<f64>::new();
    let f = g.input(feat.clone());
    let (out, _) = roi_pool(&mut g, f, &rois, 16, (3, 3)).unwrap();
    let got = g.value(out).data();
    for (r, roi) in rois.iter().enumerate() {
        let w = project_roi(roi, 16, 9, 11);
        for c in 0..2 {
            // each output cell is the max over a sub-window; together they
            // cover the projected window and the global max is among them
            let cells = &got[(r * 2 + c) * 9..(r * 2 + c + 1) * 9];
            let mut best = f64::MIN;
            for y in w.y0..w.y1 {
                for x in w.x0..w.x1 {
                    best = best.max(feat.at(0, c, y, x));
                }
            }
            let cell_max = cells.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(cell_max, best);
            assert!(cells.iter().all(|v| *v <= best));
        }
    }
}
