//! The acceptance criteria as plain functions: each panics on failure and
//! is shared by the integration tests and the acceptance run.

use super::{
    conv_oracle, ground_truth_near, match_oracle, nms_oracle, parameter_formula, random_detections,
    random_tensor, zero_insert,
};
use foci::boxes::{Detection, GroundTruth};
use foci::config::NetworkConfig;
use foci::eval::{average_precision, evaluate, match_detections, nms};
use foci::io::annotations::{self, AnnotationRecord};
use foci::io::{GrayImage, WeightFile};
use foci::model::Detector;
use foci::params::{Mode, ParamStore, Session};
use foci::rng::SplitMix64;
use foci::sac::Sac;
use foci::synth::{generate_image, SynthConfig};
use foci::tensor::kernels::conv2d;
use foci::tensor::{ConvSpec, Shape, Tensor};
use foci::Error;

pub fn random_spec(rng: &mut SplitMix64, k: usize, d: usize, s: usize) -> (ConvSpec, Shape) {
    let cin = rng.range_inclusive(1, 3) as usize;
    let cout = rng.range_inclusive(1, 3) as usize;
    let pad = rng.range_inclusive(0, (d * (k - 1) / 2) as u64 + 1) as usize;
    let spec = ConvSpec::new(cin, cout, k)
        .dilation(d)
        .stride(s)
        .padding(pad);
    let field = spec.receptive_field();
    let min = field.saturating_sub(2 * pad).max(1);
    let h = rng.range_inclusive(min as u64, min as u64 + 6) as usize;
    let w = rng.range_inclusive(min as u64, min as u64 + 6) as usize;
    let n = rng.range_inclusive(1, 2) as usize;
    (spec, Shape::new(n, cin, h, w))
}

pub fn sac_fixture(channels: usize, seed: u64) -> (Sac, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let sac = Sac::build(&mut store, "sac", channels, &mut SplitMix64::new(seed)).unwrap();
    (sac, store)
}

fn sorted(mut dets: Vec<Detection>) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    dets
}

pub fn conv_oracle_sweep() {
    let mut rng = SplitMix64::new(11);
    let mut cases = 0;
    for k in [1, 3, 5] {
        for d in [1, 2] {
            for s in [1, 2] {
                for _ in 0..10 {
                    let (spec, shape) = random_spec(&mut rng, k, d, s);
                    let x = random_tensor(&mut rng, shape, 1.0);
                    let w = random_tensor(&mut rng, spec.weight_shape(), 1.0);
                    let b: Vec<f64> = (0..spec.out_channels)
                        .map(|_| rng.uniform(-1.0, 1.0))
                        .collect();
                    let fast = conv2d(&x, &w, Some(&b), &spec).unwrap();
                    let slow = conv_oracle(&x, &w, Some(&b), &spec);
                    assert_eq!(fast.shape(), slow.shape(), "{spec:?}");
                    assert!(fast.max_abs_diff(&slow) < 1e-10, "{spec:?}");
                    cases += 1;
                }
            }
        }
    }
    assert!(cases >= 100);
}

pub fn dilation_sweep() {
    let mut rng = SplitMix64::new(12);
    for _ in 0..60 {
        let k = [3, 5][rng.below(2) as usize];
        let d = rng.range_inclusive(2, 3) as usize;
        let (spec, shape) = random_spec(&mut rng, k, d, 1);
        let x = random_tensor(&mut rng, shape, 1.0);
        let w = random_tensor(&mut rng, spec.weight_shape(), 1.0);
        let dense_w = zero_insert(&w, d);
        let dense = ConvSpec::new(spec.in_channels, spec.out_channels, dense_w.shape().h)
            .padding(spec.padding);
        let a = conv2d(&x, &w, None, &spec).unwrap();
        let b = conv2d(&x, &dense_w, None, &dense).unwrap();
        assert_eq!(a.shape(), b.shape());
        assert!(a.max_abs_diff(&b) < 1e-10);
    }
}

pub fn paper_shapes() {
    let cfg = NetworkConfig::paper();
    assert_eq!(cfg.input_resolution, 512);
    assert_eq!(cfg.tap_resolutions(), vec![512, 256, 128, 64]);
    assert_eq!(cfg.final_resolution(), 32);
    assert_eq!(cfg.grid, 32);
    assert_eq!(cfg.head_output_channels(), 5 * (5 + 1));
    let det = Detector::<f32>::new(cfg.clone(), 0).unwrap();
    assert_eq!(det.parameter_count(), parameter_formula(&cfg));
}

pub fn desk_shapes() {
    let cfg = NetworkConfig::desk();
    assert_eq!(cfg.tap_resolutions(), vec![64, 32, 16, 8]);
    assert_eq!(cfg.final_resolution(), 4);
    let mut det = Detector::<f32>::new(cfg.clone(), 0).unwrap();
    assert_eq!(det.parameter_count(), parameter_formula(&cfg));
    assert_eq!(det.parameter_count(), 389_738);

    let arch = det.arch.clone();
    let mut sess = Session::new(&mut det.store, Mode::Eval);
    let x = sess.tape.constant(Tensor::zeros(Shape::new(2, 1, 64, 64)));
    let out = arch.backbone.forward(&mut sess, x).unwrap();
    let channels = cfg.tap_channels();
    for (i, &tap) in out.taps.iter().enumerate() {
        let r = 64 >> i;
        assert_eq!(sess.tape.shape(tap), Shape::new(2, channels[i], r, r));
    }
    assert_eq!(
        sess.tape.shape(out.last),
        Shape::new(2, cfg.final_channels(), 4, 4)
    );
    let levels = arch.fpn.build_pyramid(&mut sess, &out.taps).unwrap();
    for (i, &p) in levels.iter().enumerate() {
        let r = 64 >> i;
        assert_eq!(sess.tape.shape(p), Shape::new(2, cfg.fpn_width, r, r));
    }
    let cat = arch.fpn.pool_and_concat(&mut sess, &levels, 4).unwrap();
    assert_eq!(sess.tape.shape(cat).c, 4 * cfg.fpn_width);
    let fused = arch.fpn.fuse_pyramid(&mut sess, &levels, 4).unwrap();
    assert_eq!(
        sess.tape.shape(fused),
        Shape::new(2, cfg.head_channels, 4, 4)
    );
    let raw = arch.head.forward(&mut sess, fused).unwrap();
    assert_eq!(sess.tape.shape(raw), Shape::new(2, 30, 4, 4));
}

pub fn sac_convexity() {
    let (sac, mut base) = sac_fixture(3, 1);
    let switch_bias = sac.switch.bias.unwrap();
    let mut rng = SplitMix64::new(2);
    for trial in 0..1000 {
        // vary the switch operating point as well as the input
        base.value_mut(switch_bias).data_mut()[0] = rng.uniform(-4.0, 4.0);
        let shape = Shape::new(1, 3, 3 + trial % 5, 4 + trial % 3);
        let scale = rng.uniform(0.1, 5.0);
        let x = random_tensor(&mut rng, shape, scale);
        let mut sess = Session::new(&mut base, Mode::Eval);
        let xv = sess.tape.constant(x);
        let parts = sac.forward_parts(&mut sess, xv).unwrap();
        let t = &sess.tape;
        let (y, a, b) = (
            t.value(parts.output),
            t.value(parts.branch_a),
            t.value(parts.branch_b),
        );
        assert_eq!(y.shape(), shape);
        for ((&y, &a), &b) in y.data().iter().zip(a.data()).zip(b.data()) {
            let slack = 1e-12 * (1.0 + a.abs().max(b.abs()));
            assert!(y >= a.min(b) - slack && y <= a.max(b) + slack);
        }
    }
}

pub fn sac_saturation() {
    let (sac, mut store) = sac_fixture(2, 3);
    let w = sac.switch.weights;
    *store.value_mut(w) = Tensor::zeros(store.value(w).shape());
    let x = random_tensor(&mut SplitMix64::new(4), Shape::new(2, 2, 7, 7), 2.0);
    for (logit, pick_a) in [(60.0, true), (-60.0, false)] {
        store.value_mut(sac.switch.bias.unwrap()).data_mut()[0] = logit;
        let mut sess = Session::new(&mut store, Mode::Eval);
        let xv = sess.tape.constant(x.clone());
        let parts = sac.forward_parts(&mut sess, xv).unwrap();
        let t = &sess.tape;
        let branch = if pick_a {
            parts.branch_a
        } else {
            parts.branch_b
        };
        assert!(t.value(parts.output).max_abs_diff(t.value(branch)) < 1e-8);
    }
}

pub fn nms_trials() {
    let mut rng = SplitMix64::new(21);
    for trial in 0..2000 {
        let dets = random_detections(&mut rng, 8, 2);
        let thr = [0.1, 0.3, 0.45, 0.7][trial % 4];
        assert_eq!(nms(&dets, thr), nms_oracle(&dets, thr), "trial {trial}");
    }
}

pub fn matching_trials() {
    let mut rng = SplitMix64::new(22);
    for trial in 0..2000 {
        let dets = sorted(random_detections(&mut rng, 8, 2));
        let gts = ground_truth_near(&mut rng, &dets, 3, 2);
        let thr = [0.1, 0.25, 0.5][trial % 3];
        let flags = match_detections(&dets, &gts, thr);
        assert_eq!(flags, match_oracle(&dets, &gts, thr), "trial {trial}");
        let tp = flags.iter().filter(|&&f| f).count();
        assert!(tp <= gts.len());
    }
}

pub fn ap_fixtures() {
    assert_eq!(average_precision(&[true, false, true], 2), Some(5.0 / 6.0));
    assert_eq!(average_precision(&[true, true], 2), Some(1.0));
    assert_eq!(average_precision(&[false, false], 2), Some(0.0));
    assert_eq!(average_precision(&[], 2), Some(0.0));
    assert_eq!(average_precision(&[false], 0), None);
}

pub fn weights_round_trip() {
    let det = Detector::<f32>::new(NetworkConfig::desk(), 3).unwrap();
    let file = WeightFile::from_store(&det.store);
    let bytes = file.encode();
    let back = WeightFile::decode(&bytes).unwrap();
    assert_eq!(back.encode(), bytes);

    let mut loaded = Detector::<f32>::new(NetworkConfig::desk(), 4).unwrap();
    loaded.store.load_values(back.params).unwrap();
    for ((_, a), (_, b)) in det.store.iter().zip(loaded.store.iter()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.foci");
    file.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

pub fn corrupted_weights() {
    let det = Detector::<f32>::new(NetworkConfig::desk(), 3).unwrap();
    let bytes = WeightFile::from_store(&det.store).encode();
    for cut in [0, 3, 7, 11, 100, bytes.len() / 2, bytes.len() - 1] {
        let err = WeightFile::decode(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Truncated), "cut {cut}: {err}");
    }
    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(matches!(WeightFile::decode(&bad), Err(Error::BadMagic)));
    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(
        WeightFile::decode(&newer),
        Err(Error::UnknownVersion(7))
    ));
    let mut junk = bytes;
    junk.push(0);
    assert!(matches!(
        WeightFile::decode(&junk),
        Err(Error::WeightFormat(_))
    ));
}

pub fn corrupted_pgm() {
    assert!(matches!(
        GrayImage::decode(b"P6\n1 1\n255\n\0\0\0"),
        Err(Error::PgmMagic(_))
    ));
    assert!(matches!(GrayImage::decode(b""), Err(Error::PgmMagic(_))));
    for bad in [
        &b"P5\n4 4\n255\n\x01\x02"[..],
        b"P5\n4\n",
        b"P5\n2 2\n15\n\0\0\0\0",
        b"P5\n0 2\n255\n",
    ] {
        assert!(
            matches!(GrayImage::decode(bad), Err(Error::PgmFormat(_))),
            "{:?}",
            String::from_utf8_lossy(bad)
        );
    }
}

pub fn annotation_errors() {
    let text = concat!(
        "{\"image\":\"a.pgm\",\"boxes\":[]}\n",
        "{\"image\":\"b.pgm\",\"boxes\":[{\"cx\":0.5,\"cy\":0.5,\"w\":0.1,\"h\":0.1,\"class\":0}]}\n",
        "{\"image\":\"c.pgm\",\"boxes\":[{\"cx\":0.5,\"cy\":0.5,\"w\":0.1,\"class\":0}]}\n",
    );
    match annotations::parse(text) {
        Err(Error::Annotation { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected an annotation error, got {other:?}"),
    }
    assert!(matches!(
        annotations::parse("not json\n"),
        Err(Error::Annotation { line: 1, .. })
    ));
    assert!(matches!(
        annotations::parse("{\"image\":\"a.pgm\",\"boxes\":[],\"extra\":1}"),
        Err(Error::Annotation { line: 1, .. })
    ));
}

/// Predictions scored against themselves as ground truth, `trials` random
/// instances of up to four images and three classes.
pub fn self_evaluation(trials: usize) {
    let mut rng = SplitMix64::new(31);
    let mut scored = 0;
    for trial in 0..trials {
        let images = rng.range_inclusive(1, 4) as usize;
        let dets: Vec<Vec<Detection>> = (0..images)
            .map(|_| random_detections(&mut rng, 8, 3))
            .collect();
        let gts: Vec<Vec<GroundTruth>> = dets
            .iter()
            .map(|list| {
                list.iter()
                    .map(|d| GroundTruth {
                        bbox: d.bbox,
                        class_id: d.class_id,
                    })
                    .collect()
            })
            .collect();
        let iou = rng.uniform(0.05, 1.0);
        let report = evaluate(&dets, &gts, 3, iou, 0.0);
        if gts.iter().all(Vec::is_empty) {
            assert_eq!(report.map, None, "trial {trial}");
        } else {
            assert_eq!(report.map, Some(1.0), "trial {trial}");
            scored += 1;
        }
    }
    assert!(scored * 2 > trials);
}

/// Writer output of images and annotations reads back to the same values
/// and re-encodes to the same bytes.
pub fn image_and_annotation_round_trips() {
    let cfg = SynthConfig::desk();
    let mut records = Vec::new();
    for index in 0..20 {
        let img = generate_image(&cfg, index);
        let bytes = img.image.encode();
        let back = GrayImage::decode(&bytes).unwrap();
        assert_eq!(back, img.image);
        assert_eq!(back.encode(), bytes);
        records.push(AnnotationRecord::new(
            format!("{index}.pgm"),
            &img.ground_truth,
        ));
    }
    let text = annotations::render(&records).unwrap();
    let back = annotations::parse(&text).unwrap();
    assert_eq!(back, records);
    assert_eq!(annotations::render(&back).unwrap(), text);
}
