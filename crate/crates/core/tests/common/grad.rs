//! Finite-difference checks of every differentiable op and of the full
//! detector loss, in double precision.

use std::cell::RefCell;

use super::random_tensor;
use foci::boxes::{BBox, GroundTruth};
use foci::config::{ConvLayerSpec, NetworkConfig, StageSpec};
use foci::head::{assign_targets, yolo_loss_terms, AnchorSet, LossWeights};
use foci::model::Detector;
use foci::params::{Mode, Session};
use foci::rng::SplitMix64;
use foci::tensor::{grad_check, ConvSpec, Shape, Tape, Tensor, Var};

pub const TOL: f64 = 1e-4;

/// Reduces `y` to a scalar with fixed pseudo-random weights so every output
/// element carries a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, y: Var) -> foci::Result<Var> {
    let mut rng = SplitMix64::new(99);
    let w = random_tensor(&mut rng, tape.shape(y), 1.0);
    tape.weighted_sum(y, w)
}

fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> foci::Result<Var>,
{
    let report = grad_check(f, inputs, TOL).unwrap();
    assert!(
        report.passed,
        "{name}: max relative error {:.3e} at {:?}",
        report.max_rel_error, report.worst
    );
    assert!(report.checked > 0);
}

fn rt(seed: u64, shape: Shape) -> Tensor<f64> {
    random_tensor(&mut SplitMix64::new(seed), shape, 1.0)
}

pub fn conv2d() {
    for (i, (k, s, d, p)) in [
        (1, 1, 1, 0),
        (3, 1, 1, 1),
        (3, 2, 1, 1),
        (3, 1, 2, 2),
        (5, 2, 2, 3),
    ]
    .into_iter()
    .enumerate()
    {
        let spec = ConvSpec::new(2, 3, k).stride(s).dilation(d).padding(p);
        let inputs = [
            rt(i as u64, Shape::new(2, 2, 7, 6)),
            rt(10 + i as u64, spec.weight_shape()),
            rt(20 + i as u64, Shape::new(3, 1, 1, 1)),
        ];
        check(&format!("conv2d {spec:?}"), &inputs, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
            project(t, y)
        });
    }
}

pub fn pooling() {
    let x = [rt(1, Shape::new(2, 2, 4, 6))];
    check("maxpool2", &x, |t, v| {
        let y = t.maxpool2(v[0])?;
        project(t, y)
    });
    check("upsample", &x, |t, v| {
        let y = t.upsample_nearest2(v[0]);
        project(t, y)
    });
    check("avgpool_to", &x, |t, v| {
        let y = t.avgpool_to(v[0], 2, 3)?;
        project(t, y)
    });
}

pub fn batchnorm() {
    let inputs = [
        rt(2, Shape::new(3, 2, 3, 3)),
        rt(3, Shape::new(2, 1, 1, 1)),
        rt(4, Shape::new(2, 1, 1, 1)),
    ];
    check("batchnorm train", &inputs, |t, v| {
        let (y, _, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
        project(t, y)
    });
    check("batchnorm eval", &inputs, |t, v| {
        let y = t.batchnorm_eval(v[0], v[1], v[2], &[0.2, -0.1], &[1.5, 0.7], 1e-5)?;
        project(t, y)
    });
}

pub fn pointwise() {
    let x = [rt(5, Shape::new(2, 3, 3, 2))];
    check("leaky relu", &x, |t, v| {
        let y = t.leaky_relu(v[0], 0.1);
        project(t, y)
    });
    check("sigmoid", &x, |t, v| {
        let y = t.sigmoid(v[0]);
        project(t, y)
    });
    check("exp", &x, |t, v| {
        let y = t.exp(v[0]);
        project(t, y)
    });
    check("sum", &x, |t, v| Ok(t.sum(v[0])));
    check("weighted sum", &x, |t, v| project(t, v[0]));
}

pub fn structural() {
    let a = rt(6, Shape::new(2, 2, 3, 3));
    let b = rt(7, Shape::new(2, 3, 3, 3));
    check("concat", &[a.clone(), b.clone()], |t, v| {
        let y = t.concat_channels(&[v[0], v[1]])?;
        project(t, y)
    });
    check("slice", std::slice::from_ref(&b), |t, v| {
        let y = t.slice_channels(v[0], 1, 2)?;
        project(t, y)
    });
    let c = rt(8, Shape::new(2, 2, 3, 3));
    check("add", &[a.clone(), c.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y)
    });
    let s = rt(9, Shape::new(2, 1, 3, 3)).map(|x| 0.5 + 0.4 * x);
    check("blend", &[s, a, c], |t, v| {
        let y = t.blend(v[0], v[1], v[2])?;
        project(t, y)
    });
}

fn gt(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> GroundTruth {
    GroundTruth {
        bbox: BBox::new(cx, cy, w, h),
        class_id,
    }
}

pub fn detection_loss() {
    let anchors = AnchorSet::new(vec![(0.6, 0.6), (1.2, 0.9)]).unwrap();
    let classes = 2;
    let grid = 3;
    let gts = vec![
        vec![gt(0.2, 0.3, 0.15, 0.2, 0), gt(0.7, 0.55, 0.3, 0.25, 1)],
        vec![gt(0.5, 0.8, 0.2, 0.12, 1)],
    ];
    let assignments = assign_targets(&gts, &anchors, grid);
    let raw = rt(30, Shape::new(2, anchors.len() * (5 + classes), grid, grid)).map(|x| 1.5 * x);
    check("yolo loss", &[raw], |t, v| {
        let (terms, grad) = yolo_loss_terms(
            t.value(v[0]),
            &assignments,
            &anchors,
            classes,
            LossWeights::default(),
        )?;
        t.fused_scalar(v[0], terms.total(), grad)
    });
}

/// 16-pixel network with every component present: four tapped stages, SAC on
/// every tap, pyramid, fusion and a two-anchor, two-class head.
fn tiny_config() -> NetworkConfig {
    let stage = |out_channels, kernel, pool_after, tap| StageSpec {
        convs: vec![ConvLayerSpec {
            out_channels,
            kernel,
        }],
        pool_after,
        tap,
    };
    NetworkConfig {
        name: "tiny".into(),
        input_resolution: 16,
        stages: vec![
            stage(2, 3, true, true),
            stage(2, 3, true, true),
            stage(2, 3, true, true),
            stage(2, 3, true, true),
            stage(2, 1, false, false),
        ],
        fpn_width: 2,
        head_channels: 3,
        anchors: AnchorSet::new(vec![(0.5, 0.5), (0.9, 0.7)]).unwrap(),
        num_classes: 2,
        grid: 1,
        ..NetworkConfig::desk()
    }
}

fn tiny_batch() -> (Tensor<f64>, Vec<Vec<GroundTruth>>) {
    let images = rt(40, Shape::new(2, 1, 16, 16)).map(|x| 0.5 + 0.5 * x);
    let gts = vec![
        vec![gt(0.4, 0.55, 0.3, 0.35, 1)],
        vec![gt(0.6, 0.45, 0.5, 0.4, 0)],
    ];
    (images, gts)
}

pub fn composite_parameters() {
    let mut det = Detector::<f64>::new(tiny_config(), 5).unwrap();
    let (images, gts) = tiny_batch();
    let weights = LossWeights::default();
    let out = det.train_step(&images, &gts, weights).unwrap();
    let base = det.store.clone();
    let step = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (id, analytic) in &out.grads {
        for j in 0..analytic.numel() {
            let mut loss_at = |delta: f64| {
                det.store = base.clone();
                det.store.value_mut(*id).data_mut()[j] += delta;
                det.train_step(&images, &gts, weights).unwrap().loss
            };
            let numeric = (loss_at(step) - loss_at(-step)) / (2.0 * step);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    assert_eq!(checked, det.store.trainable_count());
    assert!(worst < TOL, "worst relative error {worst:.3e}");
}

pub fn composite_input() {
    let det = Detector::<f64>::new(tiny_config(), 6).unwrap();
    let store = RefCell::new(det.store.clone());
    let (images, _) = tiny_batch();
    check("network input", &[images], |tape, v| {
        let mut store = store.borrow_mut();
        let mut sess = Session::new(&mut store, Mode::Eval);
        std::mem::swap(&mut sess.tape, tape);
        let raw = det.arch.forward(&mut sess, v[0]);
        std::mem::swap(&mut sess.tape, tape);
        project(tape, raw?)
    });
}

/// Every check above; panics on the first failure.
pub fn all() {
    conv2d();
    pooling();
    batchnorm();
    pointwise();
    structural();
    detection_loss();
    composite_parameters();
    composite_input();
}
