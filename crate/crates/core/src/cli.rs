//! Command-line jobs. Every job subcommand starts from defaults, applies
//! an optional `--config` file, then `--key value` overrides, and writes
//! its artifacts under `out`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use clap::{Arg, ArgAction, ArgMatches, Command};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{alignment_curve, cloud_category_features, export_embeddings, image_category_features};
use crate::backbone::{ContainerMeta, FreezePolicy, Transformer, TransformerConfig, WeightContainer};
use crate::config::{Protocol, TaskConfig, TaskKind, KEYS};
use crate::data::{generate, load_dataset, Dataset, ManifestEntry, Sample, SyntheticConfig};
use crate::error::{Error, Result};
use crate::heads::TextFeatureBank;
use crate::model::{PointClassifier, PointSegmenter};
use crate::tensor::ParamStore;
use crate::tokenization::{Image, ImageTokenizer, ImageTokenizerConfig};
use crate::training::{frozen_digest, sample_16shot, sample_kway_nshot, train, Classification, Task, TrainReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) => EXIT_CONFIG,
        Error::Data { .. } | Error::Format { .. } | Error::Io(_) => EXIT_DATA,
        Error::Numerical { .. } => EXIT_NUMERICAL,
        _ => EXIT_OTHER,
    }
}

fn job(name: &'static str, about: &'static str) -> Command {
    let mut cmd = Command::new(name)
        .about(about)
        .arg(Arg::new("config").long("config").value_name("FILE").help("key = value file applied before flags"));
    for &(key, help) in KEYS {
        cmd = cmd.arg(Arg::new(key).long(key.replace('_', "-")).value_name("VALUE").help(help));
    }
    cmd
}

fn gen_synthetic() -> Command {
    let num = |id: &'static str, default: &'static str, help: &'static str| {
        Arg::new(id).long(id).value_name("N").default_value(default).help(help)
    };
    Command::new("gen-synthetic")
        .about("write a seeded synthetic dataset")
        .arg(Arg::new("out").long("out").value_name("DIR").required(true))
        .arg(num("classes", "4", "shape classes"))
        .arg(num("per-class", "100", "clouds per class"))
        .arg(num("points", "512", "points per cloud"))
        .arg(num("seed", "0", "random seed"))
        .arg(num("images-per-class", "4", "depth renders per class"))
        .arg(Arg::new("images").long("images").value_name("SIZE").help("also render SIZE x SIZE depth images"))
        .arg(Arg::new("segmentation").long("segmentation").action(ArgAction::SetTrue).help("two-label planes only"))
        .arg(Arg::new("weights").long("weights").action(ArgAction::SetTrue).help("also write random backbone weights.epcl"))
        .arg(num("layers", "4", "blocks of the random backbone"))
        .arg(num("width", "128", "width of the random backbone"))
        .arg(num("heads", "4", "heads of the random backbone"))
        .arg(Arg::new("text-dim").long("text-dim").value_name("D").help("also write a random textbank.txt"))
}

pub fn command() -> Command {
    Command::new("epcl")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Point-cloud learning on a frozen image-pretrained transformer")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(job("train", "train a classifier or segmenter"))
        .subcommand(job("eval", "evaluate saved weights on the test split"))
        .subcommand(job("fewshot", "sample a few-shot episode, train and evaluate on it"))
        .subcommand(job("align", "layer-wise 2D/3D feature correlation"))
        .subcommand(job("export-embeddings", "write CLS features of every sample"))
        .subcommand(
            Command::new("inspect-weights")
                .about("print the tensor table of a weight file")
                .arg(Arg::new("path").value_name("PATH").required(true)),
        )
        .subcommand(gen_synthetic())
}

/// Runs one invocation and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match matches.subcommand() {
        Some(("inspect-weights", m)) => inspect(m),
        Some(("gen-synthetic", m)) => synthetic(m),
        Some((name, m)) => job_config(m).and_then(|cfg| match name {
            "train" => train_job(&cfg),
            "eval" => eval_job(&cfg),
            "fewshot" => fewshot_job(&cfg),
            "align" => align_job(&cfg),
            "export-embeddings" => export_job(&cfg),
            _ => unreachable!("subcommands are fixed"),
        }),
        None => unreachable!("subcommand required"),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn job_config(m: &ArgMatches) -> Result<TaskConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => TaskConfig::from_file(path)?,
        None => TaskConfig::default(),
    };
    for &(key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn number<T: std::str::FromStr>(m: &ArgMatches, id: &str) -> Result<T> {
    let raw = m.get_one::<String>(id).expect("defaulted");
    raw.parse().map_err(|_| Error::Argument(format!("bad value `{raw}` for --{id}")))
}

fn inspect(m: &ArgMatches) -> Result<()> {
    let path = m.get_one::<String>("path").expect("required");
    print!("{}", WeightContainer::load(path)?.table());
    Ok(())
}

fn synthetic(m: &ArgMatches) -> Result<()> {
    let out = Path::new(m.get_one::<String>("out").expect("required"));
    let mut cfg = SyntheticConfig::new(
        number(m, "classes")?,
        number(m, "per-class")?,
        number(m, "points")?,
        number(m, "seed")?,
    );
    cfg.segmentation = m.get_flag("segmentation");
    if m.get_one::<String>("images").is_some() {
        cfg.images = Some((number(m, "images")?, number(m, "images-per-class")?));
    }
    let manifest = generate(&cfg, out)?;
    let names = manifest.classes(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    if m.get_flag("weights") {
        let bb = TransformerConfig {
            layers: number(m, "layers")?,
            width: number(m, "width")?,
            heads: number(m, "heads")?,
            ..TransformerConfig::small()
        };
        let mut store = ParamStore::<f32>::new();
        Transformer::new(&mut store, bb.clone(), &mut rng)?;
        FreezePolicy::FrozenBackbone.apply(&mut store);
        WeightContainer::new(ContainerMeta::for_config(&bb, "random"), store).save(out.join("weights.epcl"))?;
    }
    if m.get_one::<String>("text-dim").is_some() {
        let dim: usize = number(m, "text-dim")?;
        let vectors = (0..names.len() * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        TextFeatureBank::new(names.clone(), dim, vectors, "random")?.save(out.join("textbank.txt"))?;
    }
    let clouds = manifest
        .entries
        .iter()
        .filter(|e| matches!(e, ManifestEntry::Sample { .. }))
        .count();
    println!("wrote {clouds} clouds in {} classes to {}", names.len(), out.display());
    Ok(())
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

fn load_weights(cfg: &TaskConfig) -> Result<Option<WeightContainer>> {
    cfg.weights.as_ref().map(WeightContainer::load).transpose()
}

fn build_classifier(cfg: &TaskConfig, classes: usize, text_dim: Option<usize>, rng: &mut ChaCha8Rng) -> Result<PointClassifier> {
    let mc = cfg.classifier(classes, text_dim);
    let mut model = match load_weights(cfg)? {
        Some(c) => PointClassifier::from_container(&c, mc, rng)?,
        None => PointClassifier::new(mc, rng)?,
    };
    model.apply(cfg.freeze);
    Ok(model)
}

fn build_segmenter(cfg: &TaskConfig, rng: &mut ChaCha8Rng) -> Result<PointSegmenter> {
    let sc = cfg.segmenter();
    let mut model = match load_weights(cfg)? {
        Some(c) => PointSegmenter::from_container(&c, sc, rng)?,
        None => PointSegmenter::new(sc, rng)?,
    };
    model.apply(cfg.freeze);
    Ok(model)
}

fn load_bank(cfg: &TaskConfig) -> Result<Option<TextFeatureBank>> {
    cfg.textbank.as_ref().map(TextFeatureBank::load).transpose()
}

struct Job {
    seed: u64,
    data: Dataset,
}

fn start(cfg: &TaskConfig) -> Result<Job> {
    let seed = cfg.validate()?;
    let data = load_dataset(cfg.data.as_ref().expect("validated"))?;
    std::fs::create_dir_all(&cfg.out)?;
    // `out` is left out so runs into different directories stay comparable.
    let text: String = cfg
        .to_text()
        .lines()
        .filter(|l| !l.starts_with("out ="))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(cfg.out.join("config.txt"), text)?;
    Ok(Job { seed, data })
}

fn refs(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().collect()
}

fn summary<M: Task>(task: &M, report: &TrainReport, lines: &[(&str, String)]) -> String {
    let store = task.store();
    let frozen = store.ids().filter(|&id| store.is_frozen(id)).count();
    let mut s = String::new();
    for (k, v) in lines {
        let _ = writeln!(s, "{k} {v}");
    }
    let _ = writeln!(s, "steps {}", report.steps);
    let _ = writeln!(s, "frozen_tensors {frozen}");
    let _ = writeln!(s, "trainable_tensors {}", store.len() - frozen);
    for r in report.records.iter().filter(|r| Some(r.epoch) == report.records.last().map(|l| l.epoch)) {
        let _ = writeln!(s, "final_{}_{} {}", r.split, r.metric, r.value);
    }
    let _ = writeln!(s, "frozen_digest {}", frozen_digest(store));
    s
}

fn finish<M: Task>(cfg: &TaskConfig, task: &M, report: &TrainReport, lines: &[(&str, String)], secs: f64) -> Result<()> {
    std::fs::write(cfg.out.join("metrics.csv"), report.to_csv())?;
    let text = summary(task, report, lines);
    std::fs::write(cfg.out.join("summary.txt"), &text)?;
    print!("{text}");
    println!("wall time {secs:.1}s");
    Ok(())
}

fn train_job(cfg: &TaskConfig) -> Result<()> {
    let job = start(cfg)?;
    let tc = cfg.train_config()?;
    let mut rng = init_rng(job.seed);
    let (tr, te) = (refs(&job.data.train), refs(&job.data.test));
    let clock = Instant::now();
    match cfg.task {
        TaskKind::Classify => {
            let bank = load_bank(cfg)?;
            let mut model = build_classifier(cfg, job.data.classes.len(), bank.as_ref().map(|b| b.dim), &mut rng)?;
            let mut task = Classification {
                model: &mut model,
                bank: bank.as_ref(),
            };
            let report = train(&mut task, &tr, &te, &tc)?;
            let secs = clock.elapsed().as_secs_f64();
            finish(cfg, &task, &report, &[("task", "classify".into())], secs)?;
            model.to_container(&cfg.source).save(cfg.out.join("model.epcl"))
        }
        TaskKind::Segment => {
            let mut model = build_segmenter(cfg, &mut rng)?;
            let report = train(&mut model, &tr, &te, &tc)?;
            let secs = clock.elapsed().as_secs_f64();
            finish(cfg, &model, &report, &[("task", "segment".into())], secs)?;
            model.to_container(&cfg.source).save(cfg.out.join("model.epcl"))
        }
        other => Err(Error::Config(format!(
            "`train` runs classify or segment tasks; use the `{}` subcommand",
            other.as_str()
        ))),
    }
}

fn eval_job(cfg: &TaskConfig) -> Result<()> {
    if cfg.weights.is_none() {
        return Err(Error::Config("`eval` needs `weights`".into()));
    }
    let job = start(cfg)?;
    let mut rng = init_rng(job.seed);
    let te = refs(&job.data.test);
    let metrics = match cfg.task {
        TaskKind::Segment => build_segmenter(cfg, &mut rng)?.evaluate(&te, cfg.batch_size)?,
        _ => {
            let bank = load_bank(cfg)?;
            let mut model = build_classifier(cfg, job.data.classes.len(), bank.as_ref().map(|b| b.dim), &mut rng)?;
            Classification {
                model: &mut model,
                bank: None,
            }
            .evaluate(&te, cfg.batch_size)?
        }
    };
    let mut s = format!("split test\nsamples {}\n", te.len());
    for (name, v) in metrics {
        let _ = writeln!(s, "{name} {v}");
    }
    std::fs::write(cfg.out.join("eval.txt"), &s)?;
    print!("{s}");
    Ok(())
}

fn fewshot_job(cfg: &TaskConfig) -> Result<()> {
    let job = start(cfg)?;
    let labels = |s: &[Sample]| s.iter().map(|x| x.label).collect::<Vec<_>>();
    let (trl, tel) = (labels(&job.data.train), labels(&job.data.test));
    let (ep, protocol) = match cfg.protocol {
        Protocol::KWayNShot => (sample_kway_nshot(&trl, &tel, cfg.way, cfg.shot, job.seed)?, "kway"),
        Protocol::SixteenShot => (sample_16shot(&trl, &tel, job.seed)?, "16shot"),
    };
    let pick = |pool: &[Sample], idx: &[usize]| -> Result<Vec<Sample>> {
        idx.iter()
            .map(|&i| {
                let s = &pool[i];
                let label = ep.remap(s.label).ok_or_else(|| Error::Data {
                    path: s.id.clone().into(),
                    msg: format!("class {} has no training samples", s.label),
                })?;
                Ok(Sample {
                    id: s.id.clone(),
                    cloud: s.cloud.clone(),
                    label,
                })
            })
            .collect()
    };
    let train_set = pick(&job.data.train, &ep.train)?;
    let test_set = pick(&job.data.test, &ep.test)?;
    let mut text = format!(
        "protocol {protocol}\nway {}\nshot {}\nseed {}\ntrain {}\ntest {}\nclasses",
        ep.way,
        ep.shot,
        ep.seed,
        train_set.len(),
        test_set.len()
    );
    for &c in &ep.classes {
        let _ = write!(text, " {}", job.data.classes[c]);
    }
    text.push('\n');
    for s in &train_set {
        let _ = writeln!(text, "train_sample {} {}", s.id, s.label);
    }
    for s in &test_set {
        let _ = writeln!(text, "test_sample {} {}", s.id, s.label);
    }
    std::fs::write(cfg.out.join("episode.txt"), text)?;
    println!(
        "episode: {}-way {}-shot, {} train / {} test",
        ep.way,
        ep.shot,
        train_set.len(),
        test_set.len()
    );

    let bank = match load_bank(cfg)? {
        Some(b) => {
            let names = ep.classes.iter().map(|&c| b.names[c].clone()).collect();
            let rows = ep.classes.iter().flat_map(|&c| b.row(c).to_vec()).collect();
            Some(TextFeatureBank::new(names, b.dim, rows, b.provenance.clone())?)
        }
        None => None,
    };
    let mut rng = init_rng(job.seed);
    let mut model = build_classifier(cfg, ep.classes.len(), bank.as_ref().map(|b| b.dim), &mut rng)?;
    let mut task = Classification {
        model: &mut model,
        bank: bank.as_ref(),
    };
    let clock = Instant::now();
    let report = train(&mut task, &refs(&train_set), &refs(&test_set), &cfg.train_config()?)?;
    let lines = [
        ("task", "fewshot".to_string()),
        ("train_samples", train_set.len().to_string()),
        ("test_samples", test_set.len().to_string()),
    ];
    finish(cfg, &task, &report, &lines, clock.elapsed().as_secs_f64())
}

fn align_job(cfg: &TaskConfig) -> Result<()> {
    let job = start(cfg)?;
    let data = &job.data;
    let mut rng = init_rng(job.seed);
    let mut model = build_classifier(cfg, data.classes.len(), None, &mut rng)?;
    let first: &Image = data
        .images
        .first()
        .map(|(_, img, _)| img)
        .ok_or_else(|| Error::Config("`align` needs a manifest with image entries".into()))?;
    let img_cfg = ImageTokenizerConfig {
        patch: cfg.image_patch,
        height: first.height,
        image_width: first.width,
        channels: first.channels,
        width: cfg.backbone.width,
    };
    let img_tok = ImageTokenizer::new(&mut model.store, "image_tokenizer", img_cfg, &mut rng)?;
    model.apply(cfg.freeze);

    let mut names = Vec::new();
    let (mut clouds, mut images) = (Vec::new(), Vec::new());
    for (c, name) in data.classes.iter().enumerate() {
        let imgs: Vec<&Image> = data.images.iter().filter(|x| x.2 == c).map(|x| &x.1).collect();
        let mut pts: Vec<_> = data.test.iter().filter(|s| s.label == c).map(|s| &s.cloud).collect();
        if pts.is_empty() {
            pts = data.train.iter().filter(|s| s.label == c).map(|s| &s.cloud).collect();
        }
        if imgs.is_empty() || pts.is_empty() {
            log::warn!("class {name} lacks images or clouds, skipped");
            continue;
        }
        names.push(name.clone());
        clouds.push(pts);
        images.push(imgs);
    }
    let f3d = cloud_category_features(&model.store, &model.backbone, &model.tokenizer, &model.task, &clouds)?;
    let f2d = image_category_features(&model.store, &model.backbone, &img_tok, &images)?;
    let curve = alignment_curve(&f2d, &f3d, &names, &names, cfg.estimator)?;
    for m in &curve.matrices {
        std::fs::write(cfg.out.join(format!("alignment_layer_{}.tsv", m.layer)), m.to_text())?;
    }
    let text = curve.to_text();
    std::fs::write(cfg.out.join("alignment_curve.tsv"), &text)?;
    print!("{text}");
    Ok(())
}

fn export_job(cfg: &TaskConfig) -> Result<()> {
    let job = start(cfg)?;
    let mut rng = init_rng(job.seed);
    let bank = load_bank(cfg)?;
    let model = build_classifier(cfg, job.data.classes.len(), bank.as_ref().map(|b| b.dim), &mut rng)?;
    let samples: Vec<&Sample> = job.data.train.iter().chain(&job.data.test).collect();
    let csv = export_embeddings(&model, &samples, cfg.layer, cfg.batch_size)?;
    std::fs::write(cfg.out.join("embeddings.csv"), csv)?;
    println!("exported {} rows at layer {}", samples.len(), cfg.layer);
    Ok(())
}
