//! Pipeline configuration file and the gen / train / infer / eval operations
//! behind the command-line tool.
//!
//! The configuration is plain text: `[section]` headers, `key = value`
//! lines, `#` comments. Every key is optional and defaults to the desk
//! preset.
//!
//! ```text
//! [network]
//! preset = desk                   # desk | paper
//! anchors = 0.4,0.4; 0.6,0.6      # (w,h) in grid cells, ';'-separated
//! num_classes = 1
//! fpn_width = 16
//! head_channels = 32
//! leaky_slope = 0.1
//!
//! [train]
//! learning_rate = 0.001
//! batch_size = 8
//! epochs = 40
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//! seed = 7
//! checkpoint_every = 0
//! lambda_coord = 5
//! lambda_noobj = 0.5
//!
//! [synth]
//! image_size = 64
//! count_min = 1
//! count_max = 3
//! radius_min = 3
//! radius_max = 6
//! intensity_min = 110
//! intensity_max = 180
//! background = 40
//! noise_std = 8
//! cluster_prob = 0
//! cluster_spread = 10
//! min_spacing = 16
//! seed = 2024
//!
//! [eval]
//! iou_threshold = 0.25
//! nms_threshold = 0.45
//! conf_threshold = 0.25            # counting and inference
//! score_floor = 0.005             # ranking for average precision
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::boxes::Detection;
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, EvalReport, DEFAULT_CONF, DEFAULT_EVAL_IOU, DEFAULT_NMS_IOU, DEFAULT_SCORE_FLOOR,
};
use crate::head::AnchorSet;
use crate::io::{Dataset, GrayImage, WeightFile};
use crate::model::Detector;
use crate::synth::{generate_split, Manifest, SynthConfig};
use crate::train::{checkpoint, render_history, restore, train_loop, TrainConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub nms_threshold: f64,
    /// Reported detections and foci counts.
    pub conf_threshold: f64,
    /// Detections ranked for the precision-recall curve.
    pub score_floor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_EVAL_IOU,
            nms_threshold: DEFAULT_NMS_IOU,
            conf_threshold: DEFAULT_CONF,
            score_floor: DEFAULT_SCORE_FLOOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn parse_value<T: FromStr>(raw: &str) -> std::result::Result<T, String> {
    raw.parse().map_err(|_| format!("cannot parse {raw:?}"))
}

/// `w,h; w,h; ...`
pub fn parse_anchors(raw: &str) -> std::result::Result<AnchorSet, String> {
    let priors = raw
        .split(';')
        .map(|pair| {
            let mut it = pair.split(',').map(str::trim);
            match (it.next(), it.next(), it.next()) {
                (Some(w), Some(h), None) => Ok((parse_value(w)?, parse_value(h)?)),
                _ => Err(format!("anchor {:?} is not a w,h pair", pair.trim())),
            }
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    AnchorSet::new(priors).map_err(|e| e.to_string())
}

impl PipelineConfig {
    pub fn desk() -> Self {
        Self {
            network: NetworkConfig::desk(),
            train: TrainConfig::desk(),
            synth: SynthConfig::desk(),
            eval: EvalConfig::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            network: NetworkConfig::paper(),
            train: TrainConfig::paper(),
            synth: SynthConfig {
                image_size: 512,
                radius_min: 6.0,
                radius_max: 30.0,
                count_max: 40,
                min_spacing: 20.0,
                cluster_prob: 0.3,
                cluster_spread: 40.0,
                ..SynthConfig::desk()
            },
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        for (name, v) in [
            ("iou_threshold", self.eval.iou_threshold),
            ("nms_threshold", self.eval.nms_threshold),
            ("conf_threshold", self.eval.conf_threshold),
            ("score_floor", self.eval.score_floor),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("eval.{name} = {v} outside [0, 1]")));
            }
        }
        if self.synth.image_size != self.network.input_resolution {
            return Err(Error::Config(format!(
                "synth.image_size {} differs from the network input resolution {}",
                self.synth.image_size, self.network.input_resolution
            )));
        }
        Ok(())
    }

    /// Parses configuration text; `origin` names the source in errors.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::ConfigParse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        // the preset decides the defaults, so find it first
        let mut entries = Vec::new();
        let mut section = String::new();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(line_no, format!("unterminated section header {line:?}")))?;
                section = name.trim().to_owned();
                if !["network", "train", "synth", "eval"].contains(&section.as_str()) {
                    return Err(err(line_no, format!("unknown section [{section}]")));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(line_no, format!("expected key = value, found {line:?}")))?;
            if section.is_empty() {
                return Err(err(line_no, "key outside of any section".into()));
            }
            let key = key.trim().to_owned();
            if !seen.insert((section.clone(), key.clone())) {
                return Err(err(line_no, format!("duplicate key {section}.{key}")));
            }
            entries.push((line_no, section.clone(), key, value.trim().to_owned()));
        }
        let mut cfg = match entries.iter().find(|e| e.1 == "network" && e.2 == "preset") {
            Some((line, _, _, v)) => match v.as_str() {
                "desk" => Self::desk(),
                "paper" => Self::paper(),
                other => return Err(err(*line, format!("unknown network preset {other:?}"))),
            },
            None => Self::desk(),
        };
        for (line, section, key, value) in &entries {
            cfg.apply(section, key, value).map_err(|m| err(*line, m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let (n, t, s, e) = (
            &mut self.network,
            &mut self.train,
            &mut self.synth,
            &mut self.eval,
        );
        match (section, key) {
            ("network", "preset") => {}
            ("network", "anchors") => n.anchors = parse_anchors(v)?,
            ("network", "num_classes") => n.num_classes = parse_value(v)?,
            ("network", "fpn_width") => n.fpn_width = parse_value(v)?,
            ("network", "head_channels") => n.head_channels = parse_value(v)?,
            ("network", "leaky_slope") => n.leaky_slope = parse_value(v)?,
            ("train", "learning_rate") => t.learning_rate = parse_value(v)?,
            ("train", "batch_size") => t.batch_size = parse_value(v)?,
            ("train", "epochs") => t.epochs = parse_value(v)?,
            ("train", "beta1") => t.beta1 = parse_value(v)?,
            ("train", "beta2") => t.beta2 = parse_value(v)?,
            ("train", "eps") => t.eps = parse_value(v)?,
            ("train", "seed") => t.seed = parse_value(v)?,
            ("train", "checkpoint_every") => t.checkpoint_every = parse_value(v)?,
            ("train", "lambda_coord") => t.loss.coord = parse_value(v)?,
            ("train", "lambda_noobj") => t.loss.no_object = parse_value(v)?,
            ("synth", "image_size") => s.image_size = parse_value(v)?,
            ("synth", "count_min") => s.count_min = parse_value(v)?,
            ("synth", "count_max") => s.count_max = parse_value(v)?,
            ("synth", "radius_min") => s.radius_min = parse_value(v)?,
            ("synth", "radius_max") => s.radius_max = parse_value(v)?,
            ("synth", "intensity_min") => s.intensity_min = parse_value(v)?,
            ("synth", "intensity_max") => s.intensity_max = parse_value(v)?,
            ("synth", "background") => s.background = parse_value(v)?,
            ("synth", "noise_std") => s.noise_std = parse_value(v)?,
            ("synth", "cluster_prob") => s.cluster_prob = parse_value(v)?,
            ("synth", "cluster_spread") => s.cluster_spread = parse_value(v)?,
            ("synth", "min_spacing") => s.min_spacing = parse_value(v)?,
            ("synth", "seed") => s.seed = parse_value(v)?,
            ("eval", "iou_threshold") => e.iou_threshold = parse_value(v)?,
            ("eval", "nms_threshold") => e.nms_threshold = parse_value(v)?,
            ("eval", "conf_threshold") => e.conf_threshold = parse_value(v)?,
            ("eval", "score_floor") => e.score_floor = parse_value(v)?,
            _ => return Err(format!("unknown key {section}.{key}")),
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Configuration text that parses back to `self`.
    pub fn render(&self) -> String {
        let (n, t, s, e) = (&self.network, &self.train, &self.synth, &self.eval);
        let anchors: Vec<String> = n
            .anchors
            .priors()
            .iter()
            .map(|(w, h)| format!("{w:?},{h:?}"))
            .collect();
        let mut out = String::new();
        let _ = writeln!(out, "[network]\npreset = {}", n.name);
        let _ = writeln!(out, "anchors = {}", anchors.join("; "));
        let _ = writeln!(out, "num_classes = {}", n.num_classes);
        let _ = writeln!(out, "fpn_width = {}", n.fpn_width);
        let _ = writeln!(out, "head_channels = {}", n.head_channels);
        let _ = writeln!(out, "leaky_slope = {:?}\n", n.leaky_slope);
        let _ = writeln!(out, "[train]\nlearning_rate = {:?}", t.learning_rate);
        let _ = writeln!(out, "batch_size = {}\nepochs = {}", t.batch_size, t.epochs);
        let _ = writeln!(
            out,
            "beta1 = {:?}\nbeta2 = {:?}\neps = {:?}",
            t.beta1, t.beta2, t.eps
        );
        let _ = writeln!(
            out,
            "seed = {}\ncheckpoint_every = {}",
            t.seed, t.checkpoint_every
        );
        let _ = writeln!(
            out,
            "lambda_coord = {:?}\nlambda_noobj = {:?}\n",
            t.loss.coord, t.loss.no_object
        );
        let _ = writeln!(out, "[synth]\nimage_size = {}", s.image_size);
        let _ = writeln!(
            out,
            "count_min = {}\ncount_max = {}",
            s.count_min, s.count_max
        );
        let _ = writeln!(
            out,
            "radius_min = {:?}\nradius_max = {:?}",
            s.radius_min, s.radius_max
        );
        let _ = writeln!(
            out,
            "intensity_min = {:?}\nintensity_max = {:?}",
            s.intensity_min, s.intensity_max
        );
        let _ = writeln!(
            out,
            "background = {:?}\nnoise_std = {:?}",
            s.background, s.noise_std
        );
        let _ = writeln!(
            out,
            "cluster_prob = {:?}\ncluster_spread = {:?}",
            s.cluster_prob, s.cluster_spread
        );
        let _ = writeln!(
            out,
            "min_spacing = {:?}\nseed = {}\n",
            s.min_spacing, s.seed
        );
        let _ = writeln!(out, "[eval]\niou_threshold = {:?}", e.iou_threshold);
        let _ = writeln!(
            out,
            "nms_threshold = {:?}\nconf_threshold = {:?}\nscore_floor = {:?}",
            e.nms_threshold, e.conf_threshold, e.score_floor
        );
        out
    }
}

/// Writes a synthetic dataset using the `[synth]` section, with image
/// indices starting at `first_index`.
pub fn run_gen(
    cfg: &PipelineConfig,
    out: &Path,
    first_index: u64,
    count: usize,
    force: bool,
) -> Result<Manifest> {
    generate_split(&cfg.synth, first_index, count, out, force)
}

/// Sibling of `weights` with `suffix` appended to its file stem.
pub fn sibling(weights: &Path, suffix: &str) -> PathBuf {
    let stem = weights
        .file_stem()
        .map_or_else(|| "weights".into(), |s| s.to_string_lossy().into_owned());
    weights.with_file_name(format!("{stem}{suffix}"))
}

pub struct TrainOutcome {
    pub detector: Detector<f32>,
    pub state: TrainState,
    pub history_path: PathBuf,
}

/// Trains on `data_dir` and writes the final weights to `out`, the loss
/// history to `<stem>.loss.txt` and, at the configured cadence,
/// checkpoints to `<stem>.epochNNNN.ckpt`. `resume` continues from a
/// checkpoint. `log` receives one line per epoch.
pub fn run_train(
    cfg: &PipelineConfig,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    mut log: impl FnMut(&str),
) -> Result<TrainOutcome> {
    let data = Dataset::load(data_dir)?;
    let mut detector = Detector::<f32>::new(cfg.network.clone(), cfg.train.seed)?;
    let mut state = match resume {
        Some(path) => restore(&mut detector, WeightFile::load(path)?)?,
        None => TrainState::new(&detector),
    };
    let every = cfg.train.checkpoint_every;
    train_loop(&mut detector, &data, &cfg.train, &mut state, |e| {
        log(&format!("epoch {} loss {:.6}", e.epoch, e.mean_loss));
        if every > 0 && (e.epoch + 1) % every == 0 {
            checkpoint(e.detector, e.state)
                .save(sibling(out, &format!(".epoch{:04}.ckpt", e.epoch + 1)))?;
        }
        Ok(())
    })?;
    WeightFile::from_store(&detector.store).save(out)?;
    let history_path = sibling(out, ".loss.txt");
    std::fs::write(
        &history_path,
        render_history(state.epoch - state.history.len(), &state.history),
    )
    .map_err(|e| Error::io(&history_path, e))?;
    Ok(TrainOutcome {
        detector,
        state,
        history_path,
    })
}

/// Builds the configured network and loads `weights` into it.
pub fn load_detector(cfg: &PipelineConfig, weights: &Path) -> Result<Detector<f32>> {
    let file = WeightFile::load(weights)?;
    let mut detector = Detector::<f32>::new(cfg.network.clone(), 0)?;
    detector.store.load_values(file.params)?;
    Ok(detector)
}

/// Detections on one image, indexed by descending score.
pub fn run_infer(
    cfg: &PipelineConfig,
    detector: &mut Detector<f32>,
    image: &GrayImage,
    conf: f64,
) -> Result<Vec<Detection>> {
    let res = cfg.network.input_resolution;
    if image.width != res || image.height != res {
        return Err(Error::Shape(format!(
            "image is {}x{}, the network expects {res}x{res}",
            image.width, image.height
        )));
    }
    let mut dets = detector.detect(&image.to_tensor(), conf, cfg.eval.nms_threshold)?;
    Ok(dets.pop().unwrap_or_default())
}

/// `Cell: <score> <index>` followed by the normalised box.
pub fn detection_line(d: &Detection) -> String {
    format!(
        "{} cx={:.4} cy={:.4} w={:.4} h={:.4}",
        d.label(),
        d.bbox.cx,
        d.bbox.cy,
        d.bbox.w,
        d.bbox.h
    )
}

/// Detects on every image of `data` and scores against its annotations.
pub fn evaluate_detector(
    detector: &mut Detector<f32>,
    data: &Dataset,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    const CHUNK: usize = 16;
    let mut dets = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let images = data.batch::<f32>(chunk)?;
        dets.extend(detector.detect(&images, eval.score_floor, eval.nms_threshold)?);
    }
    Ok(evaluate(
        &dets,
        &data.ground_truth,
        detector.config.num_classes,
        eval.iou_threshold,
        eval.conf_threshold,
    ))
}

pub fn run_eval(
    cfg: &PipelineConfig,
    weights: &Path,
    data_dir: &Path,
    iou: f64,
    report: &Path,
) -> Result<EvalReport> {
    let mut detector = load_detector(cfg, weights)?;
    let data = Dataset::load(data_dir)?;
    let eval = EvalConfig {
        iou_threshold: iou,
        ..cfg.eval
    };
    let result = evaluate_detector(&mut detector, &data, &eval)?;
    write_report(&result, report)?;
    Ok(result)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        for cfg in [PipelineConfig::desk(), PipelineConfig::paper()] {
            let back = PipelineConfig::parse(&cfg.render(), Path::new("x.cfg")).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn overrides_and_anchors() {
        let text = "[network]\npreset = desk\nanchors = 1,1; 2, 3\n\n[eval]\niou_threshold = 0.5 # stricter\n";
        let cfg = PipelineConfig::parse(text, Path::new("a.cfg")).unwrap();
        assert_eq!(cfg.network.anchors.priors(), &[(1.0, 1.0), (2.0, 3.0)]);
        assert_eq!(cfg.eval.iou_threshold, 0.5);
        assert_eq!(cfg.train, TrainConfig::desk());
    }

    #[test]
    fn errors_name_line() {
        let cases = [
            ("[network]\npreset = huge\n", 2),
            ("[train]\nepochs = 3\nepochs = 4\n", 3),
            ("[train]\nlearning = 1\n", 2),
            ("x = 1\n", 1),
            ("[bogus]\n", 1),
            ("[train]\nbatch_size = eight\n", 2),
        ];
        for (text, want) in cases {
            match PipelineConfig::parse(text, Path::new("c.cfg")) {
                Err(Error::ConfigParse { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(matches!(
            PipelineConfig::parse("[eval]\nconf_threshold = 1.5\n", Path::new("c.cfg")),
            Err(Error::Config(_))
        ));
    }
}
