use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use histogen_core::annotate::{
    agreement, attach_human_scores, read_human_scores, run_pipeline, write_records, AgentEndpoint, Agreement,
    Endpoints, ErrorPolicy, PipelineConfig, RemoteEndpoint,
};
use histogen_core::backbone::{encode_conditions, ConditionKind, Conditions, Denoiser};
use histogen_core::diffusion::sample_batch;
use histogen_core::encoders::Encoders;
use histogen_core::gradsuite::{run_suite, OpCheck};
use histogen_core::io::{load_checkpoint, load_tensors, save_checkpoint, save_tensors};
use histogen_core::metrics::{evaluate_run, EvalReport};
use histogen_core::training::{make_batch, train_step, Adam, TrainItem};
use histogen_core::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::{self, Dataset, Item};
use crate::{grid, io_err, CliError};

pub const LOSS_LOG: &str = "loss.csv";
pub const CHECKPOINT: &str = "checkpoint.icdt";
pub const SAMPLES: &str = "samples.icdt";
pub const SAMPLE_GRID: &str = "samples.png";
pub const METRICS: &str = "metrics.json";
pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Patch side used when annotating the slide.
pub const ANNOTATION_PATCH: usize = 16;

/// Independent seeds for the parts of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    Rng::new(seed).split(stream).next_u64()
}

const MODEL_STREAM: u64 = 10;
const BATCH_STREAM: u64 = 11;
const SAMPLER_STREAM: u64 = 12;

/// Where the appearance-embedding condition comes from at sampling time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    /// The held-out image paired with the layout.
    #[default]
    Raw,
    /// A training image with the same caption (density and texture class).
    Reference,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn encoders(config: &Config) -> Result<Encoders, CliError> {
    Ok(Encoders::new(config.encoder_params())?)
}

pub fn new_model(config: &Config) -> Result<Denoiser, CliError> {
    Ok(Denoiser::new(
        config.model_config(),
        encoders(config)?,
        derive_seed(config.seed, MODEL_STREAM),
    )?)
}

/// Encoded conditions for one item with the configured streams dropped.
pub fn item_conditions(
    enc: &Encoders,
    item: &Item,
    appearance: &Tensor,
    drop: &[ConditionKind],
) -> Result<Conditions, CliError> {
    Ok(encode_conditions(enc, &item.entry.caption_ids, &item.mask, appearance)?.without_all(drop))
}

/// Clean latents paired with their (possibly ablated) conditions.
pub fn train_items(enc: &Encoders, items: &[Item], drop: &[ConditionKind]) -> Result<Vec<TrainItem>, CliError> {
    items
        .iter()
        .map(|it| {
            Ok(TrainItem {
                z0: enc.encode_image(&it.image)?,
                cond: item_conditions(enc, it, &it.image, drop)?,
            })
        })
        .collect()
}

/// Writes the dataset under `paths.dataset_dir`.
pub fn cmd_gen_data(config: &Config) -> Result<Dataset, CliError> {
    let data = dataset::generate(config.seed, config.data.n_train, config.data.n_eval);
    dataset::write(&config.paths.dataset_dir, &data, config.seed)?;
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub loss_log: PathBuf,
    pub checkpoint: PathBuf,
}

/// Trains from scratch on the training split; writes `loss.csv` and the
/// checkpoint (default `out_dir/checkpoint.icdt`).
pub fn cmd_train(
    config: &Config,
    checkpoint: Option<&Path>,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainSummary, CliError> {
    let data = dataset::read(&config.paths.dataset_dir)?;
    let out = &config.paths.out_dir;
    create_dir(out)?;
    let mut model = new_model(config)?;
    let schedule = config.schedule()?;
    let drop = &config.ablation.drop;
    let items = train_items(&model.encoders, &data.train, drop)?;

    let mut opts = config.train_options();
    opts.seed = derive_seed(config.seed, BATCH_STREAM);
    let log_path = out.join(LOSS_LOG);
    let mut log = String::from("step,loss\n");
    let mut optimizer = Adam::new(&model.params, opts.lr);
    let mut last = None;
    for step in 0..opts.steps {
        let batch = make_batch(&items, &schedule, &opts, step);
        let loss = train_step(&mut model, &mut optimizer, &batch, &schedule, opts.clip_norm).map_err(|e| match e {
            histogen_core::Error::Numeric(msg) => {
                CliError::Core(histogen_core::Error::Numeric(format!("step {step}: {msg}")))
            }
            other => CliError::Core(other),
        })?;
        log.push_str(&format!("{step},{loss}\n"));
        progress(step, loss);
        last = Some(loss);
        let every = config.train.checkpoint_every;
        if every > 0 && (step + 1) % every == 0 && step + 1 < opts.steps {
            save_checkpoint(&out.join(format!("checkpoint_{:06}.icdt", step + 1)), &model.params)?;
        }
    }
    fs::write(&log_path, log).map_err(|e| io_err(&log_path, e))?;
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join(CHECKPOINT));
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_checkpoint(&ckpt, &model.params)?;
    Ok(TrainSummary {
        steps: opts.steps,
        final_loss: last,
        loss_log: log_path,
        checkpoint: ckpt,
    })
}

/// Index of a training item with the same caption as `item`.
fn reference_for<'a>(item: &Item, train: &'a [Item]) -> Option<&'a Item> {
    train.iter().find(|t| t.entry.caption_ids == item.entry.caption_ids)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleSummary {
    pub n: usize,
    pub container: PathBuf,
    pub grid: PathBuf,
}

/// Generates `n` images (default `data.n_eval`) conditioned on the first `n`
/// held-out captions and layouts.
pub fn cmd_sample(
    config: &Config,
    checkpoint: &Path,
    n: Option<usize>,
    source: EmbeddingSource,
) -> Result<SampleSummary, CliError> {
    let data = dataset::read(&config.paths.dataset_dir)?;
    let n = n.unwrap_or(config.data.n_eval);
    if n == 0 || n > data.eval.len() {
        return Err(CliError::Config(format!(
            "--n must be in 1..={} (held-out layouts available), got {n}",
            data.eval.len()
        )));
    }
    let mut model = new_model(config)?;
    load_checkpoint(checkpoint, &mut model.params)?;
    let conds = data.eval[..n]
        .iter()
        .map(|it| {
            let appearance = match source {
                EmbeddingSource::Raw => &it.image,
                EmbeddingSource::Reference => &reference_for(it, &data.train).unwrap_or(it).image,
            };
            item_conditions(&model.encoders, it, appearance, &config.ablation.drop)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let schedule = config.schedule()?;
    let rng = Rng::new(derive_seed(config.seed, SAMPLER_STREAM));
    let latents = sample_batch(&model, &conds, &schedule, &rng, &config.model_config().latent.dims())?;
    let images = latents
        .iter()
        .map(|z| model.encoders.decode_latent(z))
        .collect::<Result<Vec<_>, _>>()?;

    let out = &config.paths.out_dir;
    create_dir(out)?;
    let names: Vec<(String, String)> = (0..n)
        .map(|i| (format!("image/{i:05}"), format!("latent/{i:05}")))
        .collect();
    let container = out.join(SAMPLES);
    save_tensors(
        &container,
        images
            .iter()
            .zip(&latents)
            .zip(&names)
            .flat_map(|((img, z), (ni, nz))| [(ni.as_str(), img), (nz.as_str(), z)]),
    )?;
    let grid_path = out.join(SAMPLE_GRID);
    grid::write_png(&grid_path, &images)?;
    Ok(SampleSummary {
        n,
        container,
        grid: grid_path,
    })
}

/// Generated images from a samples container, in index order.
pub fn read_samples(path: &Path) -> Result<Vec<Tensor>, CliError> {
    if !path.exists() {
        return Err(io_err(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let mut images: Vec<(String, Tensor)> = load_tensors(path)?
        .into_iter()
        .filter(|(n, _)| n.starts_with("image/"))
        .collect();
    images.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(images.into_iter().map(|(_, t)| t).collect())
}

/// Scores generated samples (default `out_dir/samples.icdt`) against the
/// held-out split; writes `metrics.json`.
pub fn cmd_evaluate(config: &Config, samples: Option<&Path>) -> Result<EvalReport, CliError> {
    let data = dataset::read(&config.paths.dataset_dir)?;
    let path = samples
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.paths.out_dir.join(SAMPLES));
    let generated = read_samples(&path)?;
    if generated.len() > data.eval.len() {
        return Err(CliError::Config(format!(
            "{} samples but only {} held-out layouts",
            generated.len(),
            data.eval.len()
        )));
    }
    let real: Vec<Tensor> = data.eval.iter().map(|it| it.image.clone()).collect();
    let layouts: Vec<Tensor> = data.eval[..generated.len()].iter().map(|it| it.mask.clone()).collect();
    let report = evaluate_run(&real, &generated, &layouts)?;
    create_dir(&config.paths.out_dir)?;
    write_json(&config.paths.out_dir.join(METRICS), &report)?;
    Ok(report)
}

/// The seven non-empty subsets of kept conditions, expressed as drop sets,
/// followed by the fully unconditional run.
pub fn ablation_drop_sets() -> Vec<Vec<ConditionKind>> {
    use ConditionKind::*;
    vec![
        vec![],
        vec![Embedding],
        vec![Layout],
        vec![Caption],
        vec![Layout, Embedding],
        vec![Caption, Embedding],
        vec![Caption, Layout],
        vec![Caption, Layout, Embedding],
    ]
}

pub fn drop_label(drop: &[ConditionKind]) -> String {
    if drop.is_empty() {
        "none".into()
    } else {
        drop.iter().map(|k| k.name()).collect::<Vec<_>>().join("+")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub drop: Vec<ConditionKind>,
    pub fid: f64,
    pub mean_dice: f64,
    pub mean_cosine: f64,
    pub final_loss: Option<f64>,
}

/// Train, sample and evaluate once per drop set; each run lives in
/// `out_dir/ablation/<label>`. Writes `ablation.json` and `ablation.csv`.
pub fn cmd_ablate(config: &Config) -> Result<Vec<AblationRow>, CliError> {
    let mut rows = Vec::new();
    for drop in ablation_drop_sets() {
        let mut cfg = config.clone();
        cfg.ablation.drop = drop.clone();
        cfg.paths.out_dir = config.paths.out_dir.join("ablation").join(drop_label(&drop));
        let trained = cmd_train(&cfg, None, |_, _| {})?;
        cmd_sample(&cfg, &trained.checkpoint, None, EmbeddingSource::Raw)?;
        let report = cmd_evaluate(&cfg, None)?;
        rows.push(AblationRow {
            drop,
            fid: report.fid,
            mean_dice: report.mean_dice,
            mean_cosine: report.mean_cosine,
            final_loss: trained.final_loss,
        });
    }
    let out = &config.paths.out_dir;
    create_dir(out)?;
    write_json(&out.join("ablation.json"), &rows)?;
    let mut csv = String::from("drop,fid,mean_dice,mean_cosine\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", drop_label(&r.drop), r.fid, r.mean_dice, r.mean_cosine));
    }
    let p = out.join("ablation.csv");
    fs::write(&p, csv).map_err(|e| io_err(&p, e))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnnotateSummary {
    pub records: usize,
    pub skipped: usize,
    pub agreement: Option<Agreement>,
}

/// Annotates the dataset slide. With `endpoint_url` every agent role is
/// served remotely and failing patches are skipped and logged.
pub fn cmd_annotate(
    config: &Config,
    endpoint_url: Option<&str>,
    human_scores: Option<&Path>,
    workers: usize,
) -> Result<AnnotateSummary, CliError> {
    let slide = dataset::read_slide(&config.paths.dataset_dir)?;
    let mut pc = PipelineConfig::mock(ANNOTATION_PATCH);
    pc.parallelism = workers.max(1);
    if let Some(url) = endpoint_url {
        pc.endpoints = Endpoints::all(AgentEndpoint::Remote(RemoteEndpoint::new(url)));
        pc.policy = ErrorPolicy::SkipAndLog;
    }
    let mut output = run_pipeline(&slide, &pc)?;
    let out = &config.paths.out_dir;
    create_dir(out)?;

    if let Some(path) = human_scores {
        let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
        attach_human_scores(&mut output.records, &read_human_scores(file)?)?;
    }
    let path = out.join("annotations.jsonl");
    let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    write_records(std::io::BufWriter::new(file), &output.records)?;
    if !output.skipped.is_empty() {
        let p = out.join("skipped.jsonl");
        let mut f = fs::File::create(&p).map_err(|e| io_err(&p, e))?;
        for s in &output.skipped {
            let line = serde_json::json!({ "patch_id": s.patch_id, "error": s.message });
            writeln!(f, "{line}").map_err(|e| io_err(&p, e))?;
        }
    }
    // computed last so that a degenerate comparison still leaves the records on disk
    let agreement = match human_scores {
        Some(_) => {
            let a = agreement(&output.records)?;
            write_json(&out.join("agreement.json"), &a)?;
            Some(a)
        }
        None => None,
    };

    Ok(AnnotateSummary {
        records: output.records.len(),
        skipped: output.skipped.len(),
        agreement,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub checks: Vec<OpCheck>,
    pub passed: bool,
}

/// Finite-difference check of every operation family; writes `gradcheck.json`.
pub fn cmd_gradcheck(config: &Config) -> Result<GradcheckReport, CliError> {
    let checks = run_suite(config.seed, GRADCHECK_EPS)?;
    let passed = checks.iter().all(|c| c.max_rel_error < GRADCHECK_TOLERANCE);
    let report = GradcheckReport {
        eps: GRADCHECK_EPS,
        tolerance: GRADCHECK_TOLERANCE,
        checks,
        passed,
    };
    create_dir(&config.paths.out_dir)?;
    write_json(&config.paths.out_dir.join("gradcheck.json"), &report)?;
    Ok(report)
}
