use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use zoomnet_core::config::KvFile;
use zoomnet_core::corpus::{write_split, Annotations, DiskSplit, SceneSpec, Split, SplitSummary};
use zoomnet_core::gradcheck::{
    network_check, network_check_options, primitive_checks, small_network_config, GradcheckOptions, NamedCheck,
};
use zoomnet_core::inference::{
    calibrate, collect_calibration, propose_corpus, read_jsonl, write_jsonl, Calibration, InferenceConfig,
};
use zoomnet_core::metrics::{ImageMatches, RecallReport, AR_BUDGETS, BUDGET_GRID};
use zoomnet_core::network::{ZipConfig, ZipNet};
use zoomnet_core::train::{train, RunConfig, StepReport};
use zoomnet_core::ParamStore;

use crate::manifest::{sha256_file, sha256_tree, RunManifest};
use crate::{CliError, CliResult, Preset};

pub const DEFAULT_SCALES: [usize; 3] = [256, 192, 128];
pub const DEFAULT_BUDGET: usize = 100;
/// Proposals per image used when calibrating biases.
pub const BIAS_BUDGET: usize = 100;
/// Maximum gradient-check error accepted by `gradcheck`.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Number of images written per split by `gen`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub cal: usize,
    pub eval: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self { train: 2000, cal: 200, eval: 500 }
    }
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::new("missing_file", format!("{} does not exist", path.display())))
    }
}

/// Scene spec plus the `train_images`, `cal_images` and `eval_images` counts.
pub fn load_scene_config(path: Option<&Path>) -> CliResult<(SceneSpec, SplitCounts)> {
    let kv = match path {
        Some(p) => {
            require(p)?;
            KvFile::load(p)?
        }
        None => KvFile::default(),
    };
    let spec = SceneSpec::from_kv(&kv)?;
    let d = SplitCounts::default();
    let counts = SplitCounts {
        train: kv.get_or("train_images", d.train)?,
        cal: kv.get_or("cal_images", d.cal)?,
        eval: kv.get_or("eval_images", d.eval)?,
    };
    kv.finish()?;
    Ok((spec, counts))
}

pub fn load_run_config(path: Option<&Path>, base: RunConfig) -> CliResult<RunConfig> {
    match path {
        None => Ok(base),
        Some(p) => {
            require(p)?;
            Ok(RunConfig::from_kv(&KvFile::load(p)?)?)
        }
    }
}

fn split_counts_kv(c: &SplitCounts) -> String {
    format!("train_images = {}\ncal_images = {}\neval_images = {}\n", c.train, c.cal, c.eval)
}

/// Writes the train, cal and eval splits under `out`.
pub fn cmd_gen(config: Option<&Path>, seed: Option<u64>, out: &Path, argv: &[String]) -> CliResult<RunManifest> {
    let (mut spec, counts) = load_scene_config(config)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    std::fs::create_dir_all(out)?;
    let mut summaries: Vec<SplitSummary> = Vec::new();
    for (split, n) in [(Split::Train, counts.train), (Split::Cal, counts.cal), (Split::Eval, counts.eval)] {
        let s = write_split(&spec, split, n, out)?;
        info!("{}: {} images, {} objects, {} dropped", s.split, s.images, s.objects, s.dropped);
        summaries.push(s);
    }
    let scene_kv = spec.to_kv() + &split_counts_kv(&counts);
    std::fs::write(out.join("scene.kv"), &scene_kv)?;
    let mut m = RunManifest::new(argv, spec.seed).with_config("scene", scene_kv);
    m.corpus_sha256 = Some(sha256_tree(out, &["manifest.json"])?);
    m.metrics = json!({ "splits": summaries });
    m.save(&out.join("manifest.json"))?;
    Ok(m)
}

/// `corpus` may be a split directory or a corpus root holding split
/// directories.
pub fn resolve_split(corpus: &Path, split: Split) -> CliResult<PathBuf> {
    if corpus.join("annotations.json").exists() {
        return Ok(corpus.to_path_buf());
    }
    let dir = corpus.join(split.name());
    if dir.join("annotations.json").exists() {
        Ok(dir)
    } else {
        Err(CliError::new(
            "missing_file",
            format!("no annotations.json in {} or {}", corpus.display(), dir.display()),
        ))
    }
}

fn write_train_log(path: &Path, reports: &[StepReport]) -> CliResult<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,lr,loss,cls_1,reg_1,cls_2,reg_2,cls_3,reg_3,positives")?;
    for r in reports {
        write!(w, "{},{},{}", r.step, r.lr, r.loss.total)?;
        for l in &r.loss.per_level {
            match l {
                Some((c, g)) => write!(w, ",{c},{g}")?,
                None => write!(w, ",,")?,
            }
        }
        writeln!(w, ",{}", r.positives)?;
    }
    w.flush()?;
    Ok(())
}

fn build_net(model: &ZipConfig, seed: u64) -> CliResult<(ZipNet, ParamStore<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = ZipNet::new(model.clone(), &mut store, &mut rng)?;
    Ok((net, store))
}

/// Summary a training run leaves behind.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub manifest: RunManifest,
    pub checkpoint: PathBuf,
    pub calibration: Calibration,
}

/// Trains on `<corpus>/train`, calibrates on `<corpus>/cal` and writes
/// `model.ckpt`, `config.kv`, `inference.json`, `calibration.json`,
/// `train_log.csv` and `manifest.json` into `out`.
pub fn train_run(
    rc: &RunConfig,
    corpus: &Path,
    out: &Path,
    seed: u64,
    scales: &[usize],
    argv: &[String],
) -> CliResult<TrainOutcome> {
    let train_dir = resolve_split(corpus, Split::Train)?;
    let train_split = DiskSplit::open(&train_dir)?;
    let cal_split = DiskSplit::open(&corpus.join(Split::Cal.name())).ok();
    std::fs::create_dir_all(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = ZipNet::new(rc.model.clone(), &mut store, &mut rng)?;
    info!("training {} parameters for {} steps", store.trainable_count(), rc.train.steps);
    let reports = train(&net, &mut store, &train_split, &rc.train, &mut rng, |_| {})?;

    let ckpt = out.join("model.ckpt");
    store.save(&ckpt)?;
    std::fs::write(out.join("config.kv"), rc.to_kv())?;
    write_train_log(&out.join("train_log.csv"), &reports)?;

    let mut icfg = InferenceConfig { scales: scales.to_vec(), ..Default::default() };
    icfg.validate()?;
    let cal_images = match &cal_split {
        Some(c) => collect_calibration(&net, &store, c, &icfg)?,
        None => Vec::new(),
    };
    let calibration = calibrate(&cal_images, icfg.default_final_iou, BIAS_BUDGET, &AR_BUDGETS);
    calibration.apply(&mut icfg);
    std::fs::write(out.join("calibration.json"), serde_json::to_string_pretty(&calibration)? + "\n")?;
    std::fs::write(out.join("inference.json"), serde_json::to_string_pretty(&icfg)? + "\n")?;

    let tail = &reports[reports.len().saturating_sub(100)..];
    let mut m = RunManifest::new(argv, seed).with_config("run", rc.to_kv());
    m.checkpoint_sha256 = Some(sha256_file(&ckpt)?);
    m.corpus_sha256 = Some(sha256_tree(&train_dir, &[])?);
    m.metrics = json!({
        "steps": reports.len(),
        "final_loss": reports.last().map(|r| r.loss.total),
        "mean_loss_last_100": tail.iter().map(|r| r.loss.total).sum::<f64>() / tail.len().max(1) as f64,
        "calibration_images": cal_images.len(),
        "bias": calibration.bias,
        "final_iou": calibration.final_iou,
    });
    m.save(&out.join("manifest.json"))?;
    Ok(TrainOutcome { manifest: m, checkpoint: ckpt, calibration })
}

pub fn cmd_train(
    config: Option<&Path>,
    corpus: &Path,
    out: &Path,
    seed: u64,
    scales: &[usize],
    argv: &[String],
) -> CliResult<TrainOutcome> {
    let rc = load_run_config(config, RunConfig::default())?;
    train_run(&rc, corpus, out, seed, scales, argv)
}

/// A trained model loaded back from its run directory.
pub struct LoadedModel {
    pub config: RunConfig,
    pub net: ZipNet,
    pub store: ParamStore<f32>,
    pub inference: InferenceConfig,
    pub checkpoint_sha256: String,
}

/// Loads `model.ckpt` together with the `config.kv` and `inference.json`
/// beside it.
pub fn load_model(checkpoint: &Path) -> CliResult<LoadedModel> {
    let ckpt = if checkpoint.is_dir() { checkpoint.join("model.ckpt") } else { checkpoint.to_path_buf() };
    require(&ckpt)?;
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let cfg_path = dir.join("config.kv");
    require(&cfg_path)?;
    let config = RunConfig::from_kv(&KvFile::load(&cfg_path)?)?;
    let (net, mut store) = build_net(&config.model, 0)?;
    store.load(&ckpt)?;
    let inf_path = dir.join("inference.json");
    let inference = if inf_path.exists() {
        serde_json::from_slice(&std::fs::read(&inf_path)?)?
    } else {
        InferenceConfig::default()
    };
    Ok(LoadedModel { config, net, store, inference, checkpoint_sha256: sha256_file(&ckpt)? })
}

fn manifest_path_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "proposals".into());
    out.with_file_name(format!("{stem}.manifest.json"))
}

/// Writes the top `budget` proposals of every image in the eval split (or
/// the given split directory) to `out` as JSON lines.
pub fn cmd_propose(
    checkpoint: &Path,
    corpus: &Path,
    out: &Path,
    budget: usize,
    scales: Option<&[usize]>,
    argv: &[String],
) -> CliResult<RunManifest> {
    if budget == 0 {
        return Err(CliError::new("usage", "--budget must be positive"));
    }
    let model = load_model(checkpoint)?;
    let mut icfg = model.inference.clone();
    if let Some(s) = scales {
        icfg.scales = s.to_vec();
    }
    icfg.validate()?;
    let split_dir = resolve_split(corpus, Split::Eval)?;
    let split = DiskSplit::open(&split_dir)?;
    let sets = propose_corpus(&model.net, &model.store, &split, &icfg, budget)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(out)?);
    write_jsonl(&mut w, &sets)?;
    w.flush()?;
    let mut m = RunManifest::new(argv, 0)
        .with_config("run", model.config.to_kv())
        .with_config("inference", serde_json::to_string(&icfg)?);
    m.checkpoint_sha256 = Some(model.checkpoint_sha256);
    m.corpus_sha256 = Some(sha256_tree(&split_dir, &[])?);
    m.metrics = json!({
        "images": sets.len(),
        "budget": budget,
        "proposals": sets.iter().map(|s| s.proposals.len()).sum::<usize>(),
        "proposals_sha256": sha256_file(out)?,
    });
    m.save(&manifest_path_for(out))?;
    Ok(m)
}

/// Scores a proposal file against annotations. Images absent from the
/// proposal file count as having no proposals.
pub fn evaluate_files(proposals: &Path, annotations: &Path) -> CliResult<RecallReport> {
    require(proposals)?;
    require(annotations)?;
    let props = read_jsonl(BufReader::new(std::fs::File::open(proposals)?))?;
    let ann = Annotations::load(annotations)?;
    let gts = ann.boxes_by_image();
    let mut by_id = std::collections::BTreeMap::new();
    for (id, boxes) in props {
        if by_id.insert(id, boxes).is_some() {
            return Err(CliError::new("format", format!("image {id} appears twice in {}", proposals.display())));
        }
    }
    let known: std::collections::BTreeSet<u64> = gts.iter().map(|(id, _)| *id).collect();
    if let Some(id) = by_id.keys().find(|id| !known.contains(id)) {
        return Err(CliError::new("format", format!("proposals for image {id}, which is not in the annotations")));
    }
    let max_budget = *BUDGET_GRID.last().expect("non-empty");
    let matches = gts
        .iter()
        .map(|(id, g)| {
            let p = by_id.get(id).map(Vec::as_slice).unwrap_or(&[]);
            ImageMatches::compute(*id, p, g, max_budget)
        })
        .collect();
    Ok(RecallReport::from_matches(matches))
}

pub fn write_report(report: &RecallReport, dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report.to_json())? + "\n")?;
    std::fs::write(dir.join("recall_grid.csv"), report.to_csv())?;
    std::fs::write(dir.join("curves.txt"), report.ascii_curves())?;
    Ok(())
}

pub fn cmd_eval(proposals: &Path, annotations: &Path, out: &Path, argv: &[String]) -> CliResult<RecallReport> {
    let report = evaluate_files(proposals, annotations)?;
    write_report(&report, out)?;
    let mut m = RunManifest::new(argv, 0);
    m.metrics = json!({
        "proposals_sha256": sha256_file(proposals)?,
        "annotations_sha256": sha256_file(annotations)?,
        "report": report.to_json(),
    });
    m.save(&out.join("manifest.json"))?;
    Ok(report)
}

/// Result of the gradient-check suite.
#[derive(Clone, Debug)]
pub struct GradcheckSummary {
    pub checks: Vec<NamedCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradcheckSummary {
    pub fn lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .checks
            .iter()
            .map(|c| {
                format!(
                    "{:<40} max_rel_error {:.3e}  checked {:>5}  kinks skipped {:>3}  {}",
                    c.name,
                    c.report.max_rel_error,
                    c.report.checked,
                    c.report.skipped,
                    if c.report.passes(GRADCHECK_TOL) { "ok" } else { "FAIL" }
                )
            })
            .collect();
        out.push(format!("max relative error {:.3e} (tolerance {GRADCHECK_TOL:e})", self.max_rel_error));
        out
    }
}

/// Every primitive at the default step, then the full network (gating and
/// loss included) on a 64×64 image. `config` swaps in a different model.
pub fn run_gradcheck(model: Option<&ZipConfig>, seed: u64) -> CliResult<GradcheckSummary> {
    let opts = GradcheckOptions { seed, ..Default::default() };
    let mut checks = primitive_checks(&opts)?;
    let cfg = model.cloned().unwrap_or_else(small_network_config);
    checks.push(network_check(&cfg, 64, &network_check_options(seed))?);
    let max_rel_error = checks.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let passed = checks.iter().all(|c| c.report.passes(GRADCHECK_TOL));
    Ok(GradcheckSummary { checks, max_rel_error, passed })
}

pub fn cmd_gradcheck(config: Option<&Path>, seed: u64) -> CliResult<GradcheckSummary> {
    let model = match config {
        Some(p) => Some(load_run_config(Some(p), RunConfig::default())?.model),
        None => None,
    };
    run_gradcheck(model.as_ref(), seed)
}

/// What `ablate` leaves behind: the training run plus an evaluation of its
/// proposals on the eval split.
#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub preset: Preset,
    pub train: TrainOutcome,
    pub report: RecallReport,
}

/// Trains `preset` on top of `base`, proposes `budget` boxes per eval image
/// into `out/proposals.jsonl` and evaluates them into `out/report/`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    preset: Preset,
    base: &RunConfig,
    corpus: &Path,
    out: &Path,
    seed: u64,
    budget: usize,
    scales: &[usize],
    argv: &[String],
) -> CliResult<AblationOutcome> {
    let rc = preset.apply(base);
    let trained = train_run(&rc, corpus, out, seed, scales, argv)?;
    let proposals = out.join("proposals.jsonl");
    cmd_propose(&trained.checkpoint, corpus, &proposals, budget, None, argv)?;
    let ann = resolve_split(corpus, Split::Eval)?.join("annotations.json");
    let report = cmd_eval(&proposals, &ann, &out.join("report"), argv)?;
    let mut m = trained.manifest.clone();
    m.metrics["preset"] = json!(preset.name());
    m.metrics["budget"] = json!(budget);
    m.metrics["eval"] = report.to_json();
    m.save(&out.join("manifest.json"))?;
    Ok(AblationOutcome { preset, train: TrainOutcome { manifest: m, ..trained }, report })
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_ablate(
    preset: Preset,
    config: Option<&Path>,
    corpus: &Path,
    out: &Path,
    seed: u64,
    budget: usize,
    scales: &[usize],
    argv: &[String],
) -> CliResult<AblationOutcome> {
    let base = load_run_config(config, Preset::base_config())?;
    run_ablation(preset, &base, corpus, out, seed, budget, scales, argv)
}
