//! Command-line driver. Every subcommand reads a flat `key = value`
//! configuration, validates it against the subcommand's schema, records the
//! resolved values in `manifest.txt` and writes its artifacts to the output
//! directory.
//!
//! Scene directories hold `<id>_left.png`, `<id>_right.png` and, where
//! available, `<id>_gt.pfm` and `<id>_occ.pgm`. Label directories hold
//! `<id>_labels.pfm` and `<id>_conf.pfm`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use rayon::prelude::*;

use crate::adapt::{
    adapt_model, generate_sample, pretrain, write_log_csv, AdaptConfig, AdaptationSample,
    ConfidenceEstimator, LabelSource, LabelledPair, PretrainConfig,
};
use crate::confidence::{confnet_train, lrc_confidence, ConfNetTrainConfig, ConfNetWeights};
use crate::diagnostics::{gradient_suite, suite_csv};
use crate::error::{Error, Result};
use crate::formats::{
    read_confidence, read_disparity, read_image, write_confidence, write_disparity, write_image,
    write_mask, DisparityFormat, DisparityMap, Image,
};
use crate::losses::{LossConfig, LossPreset, TauNetWeights};
use crate::metrics::{
    disparity_to_depth, mono_accumulate, stereo_accumulate, write_metrics_csv, DepthEvalConfig,
    MetricReport, MonoAccumulator, StereoAccumulator,
};
use crate::model::{ModelMode, TinyDispNet};
use crate::stereo::{match_stereo, match_stereo_right, SgmParams, StereoAlgorithm, StereoParams};
use crate::synth::{generate, Domain, SceneSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Synth,
    Stereo,
    Confidence,
    GenLabels,
    Pretrain,
    Adapt,
    Eval,
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Stereo => "stereo",
            Command::Confidence => "confidence",
            Command::GenLabels => "gen-labels",
            Command::Pretrain => "pretrain",
            Command::Adapt => "adapt",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "depthadapt", about = "Confidence-guided adaptation of disparity networks")]
struct Args {
    command: Command,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-key override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Failure of a run, split by exit status.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Text,
    U64,
    Usize,
    F64,
    Bool,
    Choice(&'static [&'static str]),
}

#[derive(Clone, Copy, Debug)]
enum Default_ {
    Required,
    Value(&'static str),
    /// Filled in from other keys after validation.
    Derived,
    Optional,
}

#[derive(Clone, Copy, Debug)]
struct Key {
    name: &'static str,
    kind: Kind,
    default: Default_,
}

const fn key(name: &'static str, kind: Kind, default: Default_) -> Key {
    Key { name, kind, default }
}

use Default_::{Derived, Optional, Required, Value};
use Kind::{Bool, Choice, Text, Usize, F64, U64};

const SEED: Key = key("seed", U64, Value("0"));
const OUT: Key = key("out", Text, Required);
const INPUT: Key = key("input", Text, Required);
const D_MAX: Key = key("d_max", Usize, Value("32"));
const CENSUS: Key = key("census_window", Usize, Value("5"));
const P1: Key = key("p1", F64, Value("7"));
const P2: Key = key("p2", F64, Value("86"));
const ESTIMATOR: Key = key("estimator", Choice(&["lrc", "confnet"]), Value("confnet"));
const CONFNET: Key = key("confnet", Text, Optional);
const MODE: Key = key("mode", Choice(&["stereo", "mono"]), Value("stereo"));
const EPOCHS: Key = key("epochs", Usize, Derived);
const LR: Key = key("lr", F64, Value("0.001"));

const SYNTH_KEYS: &[Key] = &[
    SEED,
    OUT,
    key("domain", Choice(&["A", "B"]), Required),
    key("count", Usize, Value("10")),
    key("width", Usize, Value("128")),
    key("height", Usize, Value("64")),
];

const STEREO_KEYS: &[Key] = &[
    SEED,
    OUT,
    INPUT,
    key("algo", Choice(&["AD", "SGM"]), Required),
    D_MAX,
    CENSUS,
    P1,
    P2,
    key("format", Choice(&["pfm", "kitti-png16"]), Value("pfm")),
];

const CONFIDENCE_KEYS: &[Key] = &[
    SEED,
    OUT,
    INPUT,
    key("algo", Choice(&["AD", "SGM"]), Required),
    ESTIMATOR,
    CONFNET,
    key("train", Bool, Value("false")),
    EPOCHS,
    LR,
    key("threshold", F64, Value("3")),
    D_MAX,
    CENSUS,
    P1,
    P2,
];

const GEN_LABELS_KEYS: &[Key] = &[
    SEED,
    OUT,
    INPUT,
    key("algo", Choice(&["AD", "SGM", "AD+SGM"]), Required),
    ESTIMATOR,
    CONFNET,
    D_MAX,
    CENSUS,
    P1,
    P2,
];

const PRETRAIN_KEYS: &[Key] = &[SEED, OUT, INPUT, MODE, D_MAX, EPOCHS, LR];

const ADAPT_KEYS: &[Key] = &[
    SEED,
    OUT,
    INPUT,
    key("labels", Text, Derived),
    key("algo", Choice(&["AD", "SGM", "AD+SGM"]), Required),
    key("model", Text, Required),
    key(
        "preset",
        Choice(&["regression", "weighted", "masked", "complete", "learned", "taunet"]),
        Value("complete"),
    ),
    key("tau", F64, Derived),
    key("lambda_smooth", F64, Derived),
    key("lambda_recon", F64, Derived),
    key("alpha", F64, Value("0.85")),
    key("temperature", F64, Value("50")),
    key("taunet", Text, Optional),
    EPOCHS,
    LR,
    key("tau_lr", F64, Value("0.05")),
];

const EVAL_KEYS: &[Key] = &[
    SEED,
    OUT,
    INPUT,
    key("model", Text, Required),
    key("metrics", Choice(&["stereo", "mono"]), Value("stereo")),
    key("baseline_focal", F64, Value("100")),
    key("crop", Text, Value("none")),
];

const GRADCHECK_KEYS: &[Key] = &[SEED, OUT, key("entries", Usize, Value("16"))];

fn schema(cmd: Command) -> &'static [Key] {
    match cmd {
        Command::Synth => SYNTH_KEYS,
        Command::Stereo => STEREO_KEYS,
        Command::Confidence => CONFIDENCE_KEYS,
        Command::GenLabels => GEN_LABELS_KEYS,
        Command::Pretrain => PRETRAIN_KEYS,
        Command::Adapt => ADAPT_KEYS,
        Command::Eval => EVAL_KEYS,
        Command::Gradcheck => GRADCHECK_KEYS,
    }
}

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// ignored.
pub fn parse_config(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(format!("line {}: empty key", n + 1));
        }
        map.insert(k.to_owned(), v.trim().to_owned());
    }
    Ok(map)
}

fn check_value(k: &Key, v: &str) -> std::result::Result<(), Failure> {
    let ok = match k.kind {
        Text => !v.is_empty(),
        U64 => v.parse::<u64>().is_ok(),
        Usize => v.parse::<usize>().is_ok(),
        F64 => v.parse::<f64>().is_ok_and(f64::is_finite),
        Bool => v == "true" || v == "false",
        Choice(opts) => opts.contains(&v),
    };
    if ok {
        Ok(())
    } else {
        let expected = match k.kind {
            Text => "a non-empty value".to_owned(),
            U64 | Usize => "a non-negative integer".to_owned(),
            F64 => "a finite number".to_owned(),
            Bool => "true or false".to_owned(),
            Choice(opts) => format!("one of {}", opts.join(", ")),
        };
        Err(invalid(format!("key `{}`: expected {expected}, got `{v}`", k.name)))
    }
}

/// Resolved configuration of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Merges `entries` over the schema defaults, rejecting unknown keys,
    /// missing required keys and unparsable values.
    pub fn resolve(command: Command, entries: BTreeMap<String, String>) -> std::result::Result<Self, Failure> {
        let keys = schema(command);
        let mut values = BTreeMap::new();
        for (k, v) in entries {
            if k == "command" {
                if v != command.name() {
                    return Err(invalid(format!(
                        "key `command`: configuration is for `{v}`, not `{}`",
                        command.name()
                    )));
                }
                continue;
            }
            let spec = keys
                .iter()
                .find(|s| s.name == k)
                .ok_or_else(|| invalid(format!("unknown key `{k}` for `{}`", command.name())))?;
            check_value(spec, &v)?;
            values.insert(k, v);
        }
        for spec in keys {
            if values.contains_key(spec.name) {
                continue;
            }
            match spec.default {
                Required => {
                    return Err(invalid(format!("missing required key `{}`", spec.name)));
                }
                Value(v) => {
                    values.insert(spec.name.to_owned(), v.to_owned());
                }
                Derived | Optional => {}
            }
        }
        let mut cfg = RunConfig { command, values };
        cfg.derive();
        cfg.check_semantics()?;
        Ok(cfg)
    }

    fn set_default(&mut self, k: &str, v: impl ToString) {
        self.values.entry(k.to_owned()).or_insert_with(|| v.to_string());
    }

    fn derive(&mut self) {
        match self.command {
            Command::Confidence => self.set_default("epochs", 14),
            Command::Pretrain => self.set_default("epochs", 10),
            Command::Adapt => {
                self.set_default("epochs", 5);
                let input = self.values["input"].clone();
                self.set_default("labels", input);
                let tau = if self.values["algo"] == "AD" { "0.8" } else { "0.9" };
                self.set_default("tau", tau);
                let preset: LossPreset = self.values["preset"].parse().expect("validated preset");
                let base = LossConfig::preset(preset, 0.0, 0.1);
                self.set_default("lambda_smooth", base.lambda_smooth);
                self.set_default("lambda_recon", base.lambda_recon);
            }
            _ => {}
        }
    }

    fn check_semantics(&self) -> std::result::Result<(), Failure> {
        for k in ["d_max", "census_window", "count", "epochs", "width", "height", "entries"] {
            if self.values.get(k).is_some_and(|v| v == "0") {
                return Err(invalid(format!("key `{k}`: must be at least 1")));
            }
        }
        for k in ["lr", "tau_lr", "temperature", "baseline_focal", "threshold"] {
            if self.values.get(k).is_some_and(|v| v.parse::<f64>().unwrap_or(0.0) <= 0.0) {
                return Err(invalid(format!("key `{k}`: must be positive")));
            }
        }
        if self.values.get("census_window").is_some() {
            let w = self.usize("census_window");
            if w % 2 == 0 || w > crate::stereo::MAX_CENSUS_WINDOW {
                return Err(invalid(format!(
                    "key `census_window`: must be odd and at most {}",
                    crate::stereo::MAX_CENSUS_WINDOW
                )));
            }
        }
        if self.values.contains_key("p1") {
            self.stereo_params()
                .sgm
                .validate()
                .map_err(|e| invalid(format!("keys `p1`/`p2`: {e}")))?;
        }
        if self.values.get("estimator").is_some_and(|e| e == "confnet")
            && !self.values.contains_key("confnet")
            && self.values.get("train").is_none_or(|t| t == "false")
        {
            return Err(invalid("missing required key `confnet` for the confnet estimator"));
        }
        if self.command == Command::Adapt {
            self.loss_config()?
                .validate()
                .map_err(|e| invalid(format!("loss keys: {e}")))?;
        }
        if self.command == Command::Eval {
            parse_crop(&self.values["crop"])?;
        }
        Ok(())
    }

    fn str(&self, k: &str) -> &str {
        &self.values[k]
    }

    fn path(&self, k: &str) -> PathBuf {
        PathBuf::from(&self.values[k])
    }

    fn usize(&self, k: &str) -> usize {
        self.values[k].parse().expect("validated integer")
    }

    fn f64(&self, k: &str) -> f64 {
        self.values[k].parse().expect("validated number")
    }

    fn seed(&self) -> u64 {
        self.values["seed"].parse().expect("validated seed")
    }

    fn stereo_params(&self) -> StereoParams {
        StereoParams {
            d_max: self.usize("d_max"),
            census_window: self.usize("census_window"),
            sgm: SgmParams {
                p1: self.f64("p1") as f32,
                p2: self.f64("p2") as f32,
                ..SgmParams::default()
            },
        }
    }

    fn loss_config(&self) -> std::result::Result<LossConfig, Failure> {
        let preset: LossPreset = self.str("preset").parse().map_err(|e: Error| invalid(e.to_string()))?;
        let mut cfg = LossConfig::preset(preset, self.f64("tau"), self.f64("lambda_recon"));
        cfg.lambda_smooth = self.f64("lambda_smooth");
        cfg.alpha = self.f64("alpha");
        cfg.temperature = self.f64("temperature");
        Ok(cfg)
    }

    /// `command = ...` followed by the resolved keys, sorted.
    pub fn manifest(&self) -> String {
        let mut s = format!("command = {}\n", self.command.name());
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn parse_crop(v: &str) -> std::result::Result<Option<[usize; 4]>, Failure> {
    if v == "none" {
        return Ok(None);
    }
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| invalid(format!("key `crop`: expected `none` or `x,y,width,height`, got `{v}`")))?;
    match parts[..] {
        [x, y, w, h] if w > 0 && h > 0 => Ok(Some([x, y, w, h])),
        _ => Err(invalid(format!(
            "key `crop`: expected `none` or `x,y,width,height`, got `{v}`"
        ))),
    }
}

/// Builds the configuration from parsed flags: file entries, then `--set`
/// overrides, then `--seed` and `--out`.
fn configure(args: &Args) -> std::result::Result<RunConfig, Failure> {
    let mut entries = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| invalid(format!("cannot read config {}: {e}", p.display())))?;
            parse_config(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?
        }
        None => BTreeMap::new(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        entries.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    if let Some(s) = args.seed {
        entries.insert("seed".into(), s.to_string());
    }
    if let Some(o) = &args.out {
        entries.insert("out".into(), o.display().to_string());
    }
    RunConfig::resolve(args.command, entries)
}

/// Entry point: parses `argv` (program name first), runs the subcommand and
/// returns the exit status. Diagnostics go to standard error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = configure(&args).and_then(|cfg| execute(&cfg));
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            EXIT_VALIDATION
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Runs an already resolved configuration.
pub fn execute(cfg: &RunConfig) -> std::result::Result<(), Failure> {
    let out = cfg.path("out");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_text(&out.join(MANIFEST), &cfg.manifest())?;
    match cfg.command {
        Command::Synth => synth(cfg, &out)?,
        Command::Stereo => stereo(cfg, &out)?,
        Command::Confidence => confidence(cfg, &out)?,
        Command::GenLabels => gen_labels(cfg, &out)?,
        Command::Pretrain => pretrain_cmd(cfg, &out)?,
        Command::Adapt => adapt(cfg, &out)?,
        Command::Eval => eval(cfg, &out)?,
        Command::Gradcheck => gradcheck(cfg, &out)?,
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Scene ids of a directory: the stems of its `*_left.png` files, sorted.
pub fn scene_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(id) = entry.file_name().to_str().and_then(|n| n.strip_suffix("_left.png")) {
            ids.push(id.to_owned());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(ids)
}

fn load_pair(dir: &Path, id: &str) -> Result<(Image, Image)> {
    Ok((
        read_image(dir.join(format!("{id}_left.png")))?,
        read_image(dir.join(format!("{id}_right.png")))?,
    ))
}

fn load_gt(dir: &Path, id: &str) -> Result<DisparityMap> {
    read_disparity(dir.join(format!("{id}_gt.pfm")), DisparityFormat::Pfm)
}

fn load_pairs(dir: &Path) -> Result<(Vec<String>, Vec<(Image, Image)>)> {
    let ids = scene_ids(dir)?;
    let pairs = ids.par_iter().map(|id| load_pair(dir, id)).collect::<Result<_>>()?;
    Ok((ids, pairs))
}

fn load_labelled(dir: &Path) -> Result<(Vec<String>, Vec<LabelledPair>)> {
    let ids = scene_ids(dir)?;
    let data = ids
        .par_iter()
        .map(|id| {
            let (left, right) = load_pair(dir, id)?;
            Ok(LabelledPair {
                left,
                right,
                gt: load_gt(dir, id)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((ids, data))
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let domain = match cfg.str("domain") {
        "A" => Domain::A,
        _ => Domain::B,
    };
    let first = cfg.seed();
    let (w, h) = (cfg.usize("width"), cfg.usize("height"));
    (0..cfg.usize("count") as u64).into_par_iter().try_for_each(|i| {
        let seed = first + i;
        let scene = generate(&SceneSpec::new(domain, seed, w, h))?;
        let id = format!("{seed:06}");
        write_image(&scene.left, out.join(format!("{id}_left.png")))?;
        write_image(&scene.right, out.join(format!("{id}_right.png")))?;
        write_disparity(&scene.gt, out.join(format!("{id}_gt.pfm")), DisparityFormat::Pfm)?;
        write_mask(&scene.occluded, w, h, out.join(format!("{id}_occ.pgm")))
    })
}

fn stereo(cfg: &RunConfig, out: &Path) -> Result<()> {
    let algo: StereoAlgorithm = cfg.str("algo").parse()?;
    let format: DisparityFormat = cfg.str("format").parse()?;
    let ext = match format {
        DisparityFormat::Pfm => "pfm",
        DisparityFormat::KittiPng16 => "png",
    };
    let params = cfg.stereo_params();
    let input = cfg.path("input");
    let (ids, pairs) = load_pairs(&input)?;
    ids.par_iter().zip(&pairs).try_for_each(|(id, (l, r))| {
        let d = match_stereo(l, r, algo, &params)?;
        write_disparity(&d, out.join(format!("{id}_disp.{ext}")), format)
    })
}

fn estimator(cfg: &RunConfig) -> Result<ConfidenceEstimator> {
    Ok(match cfg.str("estimator") {
        "lrc" => ConfidenceEstimator::Lrc,
        _ => ConfidenceEstimator::ConfNet(ConfNetWeights::load(cfg.path("confnet"))?),
    })
}

fn confidence(cfg: &RunConfig, out: &Path) -> Result<()> {
    let algo: StereoAlgorithm = cfg.str("algo").parse()?;
    let params = cfg.stereo_params();
    let input = cfg.path("input");
    let (ids, pairs) = load_pairs(&input)?;
    let maps: Vec<DisparityMap> = pairs
        .par_iter()
        .map(|(l, r)| match_stereo(l, r, algo, &params))
        .collect::<Result<_>>()?;
    let train = cfg.str("train") == "true";
    let weights = match cfg.str("estimator") {
        "lrc" => None,
        _ if train => {
            let dataset = ids
                .iter()
                .zip(&maps)
                .map(|(id, d)| Ok((d.clone(), load_gt(&input, id)?)))
                .collect::<Result<Vec<_>>>()?;
            let init = match cfg.values.get("confnet") {
                Some(p) => ConfNetWeights::load(p)?,
                None => ConfNetWeights::init(params.d_max as f32, cfg.seed()),
            };
            let tc = ConfNetTrainConfig {
                epochs: cfg.usize("epochs"),
                lr: cfg.f64("lr"),
                seed: cfg.seed(),
                threshold: cfg.f64("threshold") as f32,
            };
            let trained = confnet_train(&init, &dataset, &tc)?;
            trained.weights.save(out.join("confnet.bin"))?;
            let mut log = String::from("epoch,bce\n");
            for (e, b) in trained.bce.iter().enumerate() {
                let _ = writeln!(log, "{e},{b:.9}");
            }
            write_text(&out.join("confnet_log.csv"), &log)?;
            Some(trained.weights)
        }
        _ => Some(ConfNetWeights::load(cfg.path("confnet"))?),
    };
    ids.par_iter()
        .zip(&pairs)
        .zip(&maps)
        .try_for_each(|((id, (l, r)), d)| {
            let c = match &weights {
                Some(w) => w.forward(d)?,
                None => lrc_confidence(d, &match_stereo_right(l, r, algo, &params)?)?,
            };
            write_confidence(&c, out.join(format!("{id}_conf.pfm")))
        })
}

fn gen_labels(cfg: &RunConfig, out: &Path) -> Result<()> {
    let source: LabelSource = cfg.str("algo").parse()?;
    let est = estimator(cfg)?;
    let params = cfg.stereo_params();
    let input = cfg.path("input");
    let (ids, pairs) = load_pairs(&input)?;
    ids.par_iter().zip(&pairs).try_for_each(|(id, (l, r))| {
        let s = generate_sample(l, r, source, &est, &params)?;
        write_disparity(&s.labels, out.join(format!("{id}_labels.pfm")), DisparityFormat::Pfm)?;
        write_confidence(&s.conf, out.join(format!("{id}_conf.pfm")))
    })
}

fn pretrain_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mode: ModelMode = cfg.str("mode").parse()?;
    let (_, data) = load_labelled(&cfg.path("input"))?;
    let net = TinyDispNet::init(mode, cfg.usize("d_max") as f32, cfg.seed())?;
    let pc = PretrainConfig {
        epochs: cfg.usize("epochs"),
        lr: cfg.f64("lr"),
        seed: cfg.seed(),
    };
    let (net, history) = pretrain(&net, &data, &pc)?;
    net.save(out.join("model.bin"))?;
    let mut log = String::from("epoch,l1\n");
    for (e, l) in history.iter().enumerate() {
        let _ = writeln!(log, "{},{l:.9}", e + 1);
    }
    write_text(&out.join("pretrain_log.csv"), &log)
}

fn adapt(cfg: &RunConfig, out: &Path) -> std::result::Result<(), Failure> {
    let loss = cfg.loss_config()?;
    let ac = AdaptConfig {
        loss,
        epochs: cfg.usize("epochs"),
        lr: cfg.f64("lr"),
        tau_lr: cfg.f64("tau_lr"),
        seed: cfg.seed(),
    };
    let net = TinyDispNet::load(cfg.path("model"))?;
    let taunet = match cfg.values.get("taunet") {
        Some(p) => Some(TauNetWeights::load(p)?),
        None => None,
    };
    let input = cfg.path("input");
    let labels = cfg.path("labels");
    let (ids, pairs) = load_pairs(&input)?;
    let samples = ids
        .par_iter()
        .zip(pairs)
        .map(|(id, (l, r))| {
            let d = read_disparity(labels.join(format!("{id}_labels.pfm")), DisparityFormat::Pfm)?;
            let c = read_confidence(labels.join(format!("{id}_conf.pfm")))?;
            AdaptationSample::new(l, r, d, c)
        })
        .collect::<Result<Vec<_>>>()?;
    let outcome = adapt_model(&net, &samples, &ac, taunet.as_ref())?;
    outcome.net.save(out.join("model.bin"))?;
    write_log_csv(&outcome.log, out.join("log.csv"))?;
    if let Some(t) = &outcome.taunet {
        t.save(out.join("taunet.bin"))?;
    }
    Ok(())
}

fn eval(cfg: &RunConfig, out: &Path) -> std::result::Result<(), Failure> {
    let crop = parse_crop(cfg.str("crop"))?;
    let net = TinyDispNet::load(cfg.path("model"))?;
    let (ids, data) = load_labelled(&cfg.path("input"))?;
    let mono = cfg.str("metrics") == "mono";
    let bf = cfg.f64("baseline_focal") as f32;
    let depth_cfg = DepthEvalConfig::default();
    let cropped = |d: &DisparityMap| -> Result<DisparityMap> {
        match crop {
            Some([x, y, w, h]) => d.crop(x, y, w, h),
            None => Ok(d.clone()),
        }
    };
    let accs = data
        .par_iter()
        .map(|p| {
            let pred = cropped(&net.predict(&p.left, Some(&p.right))?)?;
            let gt = cropped(&p.gt)?;
            if mono {
                let gt_depth: Vec<f32> = disparity_to_depth(&gt, bf)
                    .into_iter()
                    .zip(gt.data())
                    .map(|(z, d)| if *d > 0.0 { z } else { -1.0 })
                    .collect();
                Ok(Acc::Mono(mono_accumulate(&disparity_to_depth(&pred, bf), &gt_depth, &depth_cfg)?))
            } else {
                Ok(Acc::Stereo(stereo_accumulate(&pred, &gt, None)?))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(accs.len());
    let mut pooled = if mono {
        Acc::Mono(MonoAccumulator::default())
    } else {
        Acc::Stereo(StereoAccumulator::default())
    };
    for (id, a) in ids.iter().zip(&accs) {
        pooled.merge(a);
        rows.push((id.clone(), a.report()?));
    }
    write_metrics_csv(out.join("eval.csv"), &rows, &pooled.report()?)?;
    Ok(())
}

enum Acc {
    Stereo(StereoAccumulator),
    Mono(MonoAccumulator),
}

impl Acc {
    fn merge(&mut self, other: &Acc) {
        match (self, other) {
            (Acc::Stereo(a), Acc::Stereo(b)) => a.merge(b),
            (Acc::Mono(a), Acc::Mono(b)) => a.merge(b),
            _ => unreachable!("accumulators share one kind"),
        }
    }

    fn report(&self) -> Result<MetricReport> {
        match self {
            Acc::Stereo(a) => a.report(),
            Acc::Mono(a) => a.report(),
        }
    }
}

fn gradcheck(cfg: &RunConfig, out: &Path) -> std::result::Result<(), Failure> {
    let entries = gradient_suite(cfg.seed(), cfg.usize("entries"))?;
    let report = suite_csv(&entries);
    write_text(&out.join("gradcheck.csv"), &report)?;
    print!("{report}");
    if let Some(bad) = entries.iter().find(|e| !e.report.passed()) {
        return Err(Failure::Runtime(Error::Range(format!(
            "gradient check failed for {} (max relative error {:.3e})",
            bad.name,
            bad.report.max_rel_error()
        ))));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(kv: &[(&str, &str)]) -> BTreeMap<String, String> {
        kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn config_parsing() {
        let m = parse_config("# c\n a = 1 \n\nb=x y\n").unwrap();
        assert_eq!(m, entries(&[("a", "1"), ("b", "x y")]));
        assert!(parse_config("novalue").is_err());
        assert!(parse_config(" = 3").is_err());
    }

    #[test]
    fn missing_algo_named() {
        let e = RunConfig::resolve(
            Command::Adapt,
            entries(&[("out", "o"), ("input", "i"), ("model", "m")]),
        )
        .unwrap_err();
        match e {
            Failure::Validation(m) => assert!(m.contains("`algo`"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_and_bad_values_rejected() {
        let base = [("out", "o"), ("domain", "A")];
        let bad = |extra: (&str, &str)| {
            let mut e = entries(&base);
            e.insert(extra.0.into(), extra.1.into());
            matches!(RunConfig::resolve(Command::Synth, e), Err(Failure::Validation(_)))
        };
        assert!(bad(("colour", "red")));
        assert!(bad(("count", "-1")));
        assert!(bad(("count", "0")));
        assert!(bad(("domain", "C")));
        assert!(bad(("command", "adapt")));
        assert!(!bad(("count", "3")));
    }

    #[test]
    fn derived_defaults_follow_algorithm() {
        let base = [("out", "o"), ("input", "i"), ("model", "m")];
        let mut e = entries(&base);
        e.insert("algo".into(), "AD".into());
        let c = RunConfig::resolve(Command::Adapt, e.clone()).unwrap();
        assert_eq!(c.values["tau"], "0.8");
        assert_eq!(c.values["labels"], "i");
        e.insert("algo".into(), "SGM".into());
        e.insert("preset".into(), "masked".into());
        let c = RunConfig::resolve(Command::Adapt, e.clone()).unwrap();
        assert_eq!((c.str("tau"), c.str("lambda_smooth")), ("0.9", "0"));
        e.insert("tau".into(), "1".into());
        assert!(RunConfig::resolve(Command::Adapt, e).is_err());
    }

    #[test]
    fn manifest_replays_to_same_config() {
        let c = RunConfig::resolve(Command::Synth, entries(&[("out", "o"), ("domain", "B")])).unwrap();
        let again = RunConfig::resolve(Command::Synth, parse_config(&c.manifest()).unwrap()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn crop_parsing() {
        assert_eq!(parse_crop("none").unwrap(), None);
        assert_eq!(parse_crop("1, 2,3,4").unwrap(), Some([1, 2, 3, 4]));
        assert!(parse_crop("1,2,3").is_err());
        assert!(parse_crop("0,0,0,4").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["depthadapt", "bogus"]), EXIT_VALIDATION);
        assert_eq!(run(["depthadapt", "adapt", "--out", "/nonexistent"]), EXIT_VALIDATION);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let missing = dir.path().join("nothing");
        let code = run([
            "depthadapt".as_ref(),
            "stereo".as_ref(),
            "--out".as_ref(),
            out.as_os_str(),
            "--set".as_ref(),
            format!("input={}", missing.display()).as_ref(),
            "--set".as_ref(),
            "algo=SGM".as_ref(),
        ] as [&std::ffi::OsStr; 8]);
        assert_eq!(code, EXIT_RUNTIME);
        assert!(out.join(MANIFEST).exists());
    }
}
