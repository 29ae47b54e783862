//! `sit`: train, distill, evaluate and analyze token-slimmed vision
//! transformers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use sit_core::analysis::{self, FlopConvention, SimilarityMeasure};
use sit_core::distill::{self, LogRecord};
use sit_core::io::checkpoint;
use sit_core::io::dataset::{gen_synth, SynthSpec};
use sit_core::io::write_atomic;
use sit_core::{Dataset, Result, RunConfig, Scalar, SitError, Tape, Tensor, VisionTransformer};

#[derive(Parser, Debug)]
#[command(
    name = "sit",
    version,
    about = "Token-slimmed vision transformers with feature recalibration distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

/// Flags layered over the run configuration.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    keep_ratio: Option<f64>,
    /// Blocks per stage, e.g. `2,2,2,2`.
    #[arg(long, global = true, value_delimiter = ',')]
    stages: Option<Vec<usize>>,
    #[arg(long, global = true)]
    lambda_token: Option<f64>,
    #[arg(long, global = true)]
    lambda_logits: Option<f64>,
    #[arg(long, global = true)]
    lambda_hard: Option<f64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Compute in f64.
    #[arg(long, global = true)]
    f64: bool,
    /// Training dataset file.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Held-out dataset file.
    #[arg(long, global = true)]
    test_data: Option<PathBuf>,
    /// Teacher checkpoint.
    #[arg(long, global = true)]
    teacher: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic texture dataset.
    GenSynth {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the full-token teacher with cross-entropy.
    TrainTeacher,
    /// Distill a slimmed student from a teacher checkpoint.
    Distill,
    /// Held-out accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Inference throughput; random weights unless a checkpoint is given.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Analytic cost report of the configured model.
    Flops {
        /// Count multiply and add separately.
        #[arg(long)]
        arithmetic: bool,
    },
    /// Token redundancy, attention focus and layer CKA against the teacher.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Slimming score maps (PGM) for one image.
    Vis {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!(
                "{}",
                json!({"error": {"kind": e.kind(), "message": e.to_string()}})
            );
            ExitCode::FAILURE
        }
    }
}

fn effective_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(r) = o.keep_ratio {
        cfg.model.keep_ratio = r;
    }
    if let Some(s) = &o.stages {
        cfg.model.stages = s.clone();
    }
    if let Some(l) = o.lambda_token {
        cfg.distill.lambda_token = l;
    }
    if let Some(l) = o.lambda_logits {
        cfg.distill.lambda_logits = l;
    }
    if let Some(l) = o.lambda_hard {
        cfg.distill.lambda_hard = l;
    }
    if let Some(t) = o.threads {
        cfg.bench.threads = t;
    }
    cfg.f64 |= o.f64;
    let paths = &mut cfg.paths;
    for (dst, src) in [
        (&mut paths.train_data, &o.data),
        (&mut paths.test_data, &o.test_data),
        (&mut paths.teacher, &o.teacher),
        (&mut paths.output_dir, &o.out),
    ] {
        if src.is_some() {
            dst.clone_from(src);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Value> {
    let cfg = effective_config(&cli.overrides)?;
    if cfg.f64 {
        dispatch::<f64>(&cli.command, &cfg)
    } else {
        dispatch::<f32>(&cli.command, &cfg)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| SitError::Config(format!("missing {what} path (flag or config)")))
}

/// Writes the report and the effective config into the output directory.
fn finish(cfg: &RunConfig, name: &str, report: Value) -> Result<Value> {
    if let Some(dir) = &cfg.paths.output_dir {
        cfg.save(&dir.join("run_config.json"))?;
        let text = serde_json::to_string_pretty(&report)?;
        write_atomic(&dir.join(format!("{name}.json")), text.as_bytes())?;
    }
    Ok(report)
}

fn dispatch<T: Scalar>(cmd: &Command, cfg: &RunConfig) -> Result<Value> {
    match cmd {
        Command::GenSynth {
            classes,
            per_class,
            size,
            noise,
            output,
        } => {
            let spec = SynthSpec {
                classes: *classes,
                samples_per_class: *per_class,
                size: *size,
                channels: cfg.model.in_channels,
                noise: *noise,
                seed: cfg.train.seed,
            };
            let data = gen_synth(&spec);
            data.save(output)?;
            let mut snapshot = cfg.clone();
            snapshot.paths.output_dir = Some(
                output
                    .parent()
                    .filter(|p| !p.as_os_str().is_empty())
                    .unwrap_or(Path::new("."))
                    .to_path_buf(),
            );
            let report = json!({"output": output, "samples": data.len(), "classes": data.classes, "size": size, "noise": noise, "seed": spec.seed});
            finish(&snapshot, "gen_synth", report)
        }
        Command::TrainTeacher => {
            let out = required(&cfg.paths.output_dir, "output")?;
            let data = Dataset::load(required(&cfg.paths.train_data, "training data")?)?;
            let test = load_optional(&cfg.paths.test_data)?;
            let mut model = VisionTransformer::<T>::new(cfg.model.teacher(), cfg.train.seed)?;
            cfg.save(&out.join("run_config.json"))?;
            let mut log = String::new();
            let result =
                distill::train_teacher(&mut model, &data, test.as_ref(), &cfg.train, &mut |r| {
                    push_log(&mut log, r)
                });
            write_atomic(&out.join("log.jsonl"), log.as_bytes())?;
            let summary = result?;
            let ckpt = out.join("teacher.ckpt");
            checkpoint::save(&ckpt, &model, metadata(cfg, "teacher", &summary))?;
            finish(
                cfg,
                "summary",
                json!({"checkpoint": ckpt, "summary": summary}),
            )
        }
        Command::Distill => {
            let out = required(&cfg.paths.output_dir, "output")?;
            let data = Dataset::load(required(&cfg.paths.train_data, "training data")?)?;
            let test = load_optional(&cfg.paths.test_data)?;
            let teacher =
                checkpoint::load::<T>(required(&cfg.paths.teacher, "teacher checkpoint")?, false)?;
            let hard = match &cfg.train.hard_teacher {
                Some(p) => Some(checkpoint::load::<T>(p, false)?),
                None => None,
            };
            let mut student = VisionTransformer::<T>::new(cfg.model.clone(), cfg.train.seed)?;
            distill::inherit_weights(&teacher, &mut student)?;
            cfg.save(&out.join("run_config.json"))?;
            let mut log = String::new();
            let result = distill::distill(
                &mut student,
                &teacher,
                hard.as_ref(),
                &data,
                test.as_ref(),
                &cfg.train,
                &cfg.distill,
                &mut |r| push_log(&mut log, r),
            );
            write_atomic(&out.join("log.jsonl"), log.as_bytes())?;
            let summary = result?;
            let ckpt = out.join("student.ckpt");
            checkpoint::save(&ckpt, &student, metadata(cfg, "student", &summary))?;
            finish(
                cfg,
                "summary",
                json!({"checkpoint": ckpt, "summary": summary}),
            )
        }
        Command::Eval { checkpoint: path } => {
            let model = checkpoint::load::<T>(path, false)?;
            let data = Dataset::load(required(&cfg.paths.test_data, "test data")?)?;
            let acc = distill::accuracy(&model, &data)?;
            finish(
                cfg,
                "eval",
                json!({"checkpoint": path, "samples": data.len(), "accuracy": acc}),
            )
        }
        Command::Bench { checkpoint: path } => {
            let model = match path {
                Some(p) => checkpoint::load::<T>(p, false)?,
                None => VisionTransformer::<T>::new(cfg.model.clone(), cfg.train.seed)?
                    .without_recalibration()?,
            };
            let c = model.config();
            let images = random_images::<T>(
                cfg.bench.batch_size,
                c.image_size,
                c.in_channels,
                cfg.train.seed,
            );
            let b = &cfg.bench;
            let result = analysis::bench(&model, &images, b.warmup, b.iterations, b.threads)?;
            let mut report = analysis::flops(c, FlopConvention::default())?;
            report.throughput = Some(result);
            finish(cfg, "bench", serde_json::to_value(report)?)
        }
        Command::Flops { arithmetic } => {
            let conv = if *arithmetic {
                FlopConvention::Arithmetic
            } else {
                FlopConvention::MultiplyAccumulate
            };
            finish(
                cfg,
                "flops",
                serde_json::to_value(analysis::flops(&cfg.model, conv)?)?,
            )
        }
        Command::Diagnose { checkpoint: path } => {
            let model = checkpoint::load::<T>(path, false)?;
            let data = Dataset::load(required(&cfg.paths.test_data, "test data")?)?;
            let teacher = match &cfg.paths.teacher {
                Some(p) => Some(checkpoint::load::<T>(p, false)?),
                None => None,
            };
            let report = diagnose(&model, teacher.as_ref(), &data, cfg)?;
            finish(cfg, "diagnostics", report)
        }
        Command::Vis {
            checkpoint: path,
            index,
        } => {
            let out = required(&cfg.paths.output_dir, "output")?;
            let model = checkpoint::load::<T>(path, false)?;
            let data = Dataset::load(required(&cfg.paths.test_data, "test data")?)?;
            if *index >= data.len() {
                return Err(SitError::Index {
                    index: *index,
                    len: data.len(),
                });
            }
            let image = data.image::<T>(*index);
            let g = model.config().grid();
            let maps = analysis::score_map(&model.slim_matrices(&image)?, (g, g))?;
            let mut files = Vec::new();
            for m in &maps {
                let f = out.join(format!("score_map_stage{}.pgm", m.stage));
                write_atomic(&f, m.to_pgm().as_bytes())?;
                files.push(f);
            }
            finish(
                cfg,
                "vis",
                json!({"index": index, "label": data.label(*index), "files": files, "score_maps": maps}),
            )
        }
    }
}

fn load_optional(p: &Option<PathBuf>) -> Result<Option<Dataset>> {
    p.as_deref().map(Dataset::load).transpose()
}

fn push_log(log: &mut String, r: &LogRecord) {
    log.push_str(&serde_json::to_string(r).expect("log record serializes"));
    log.push('\n');
}

fn metadata(cfg: &RunConfig, role: &str, s: &distill::TrainSummary) -> BTreeMap<String, Value> {
    BTreeMap::from([
        ("role".to_string(), json!(role)),
        ("seed".to_string(), json!(cfg.train.seed)),
        ("epochs".to_string(), json!(cfg.train.epochs)),
        ("final_loss".to_string(), json!(s.final_loss)),
        (
            "final_test_accuracy".to_string(),
            json!(s.final_test_accuracy()),
        ),
    ])
}

fn random_images<T: Scalar>(n: usize, size: usize, ch: usize, seed: u64) -> Vec<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::uniform(&[size, size, ch], 1.0, &mut rng))
        .collect()
}

/// Averages per-layer redundancy over images, exports head-averaged
/// attention rows of two random tokens in a late layer, and (with a
/// teacher) the class-token CKA between every student and teacher layer.
fn diagnose<T: Scalar>(
    model: &VisionTransformer<T>,
    teacher: Option<&VisionTransformer<T>>,
    data: &Dataset,
    cfg: &RunConfig,
) -> Result<Value> {
    let d = &cfg.diagnostics;
    let n = d.samples.min(data.len());
    let depth = model.config().depth;
    let mut proportions = vec![vec![0.0; d.top_k.len()]; depth];
    let mut cls_feats: Vec<Vec<T>> = vec![Vec::new(); depth];
    let mut focus = Value::Null;
    let focus_layer = depth.min(10) - 1;
    for i in 0..n {
        let image = data.image::<T>(i);
        let mut tape = Tape::frozen();
        let out = model.forward(&mut tape, &image, false)?;
        let layers: Vec<Tensor<T>> = out
            .block_tokens
            .iter()
            .map(|&v| content_rows(tape.value(v)))
            .collect();
        let stats = analysis::token_similarity_stats(
            &layers,
            d.similarity_threshold,
            &d.top_k,
            SimilarityMeasure::Pearson,
        )?;
        for (acc, s) in proportions.iter_mut().zip(&stats) {
            acc.iter_mut()
                .zip(&s.proportions)
                .for_each(|(a, p)| *a += p / n as f64);
        }
        for (f, &v) in cls_feats.iter_mut().zip(&out.block_tokens) {
            f.extend_from_slice(tape.value(v).row(0));
        }
        if i == 0 {
            let attn = tape
                .attention_probs(out.attention[focus_layer])
                .ok_or_else(|| SitError::Format("attention probabilities not retained".into()))?;
            let t = attn.shape()[1];
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let ids: Vec<usize> = sample(&mut rng, t - 1, 2.min(t - 1))
                .into_iter()
                .map(|j| j + 1)
                .collect();
            focus = json!({"layer": focus_layer, "tokens": ids, "rows": analysis::attention_focus(&attn, &ids)?});
        }
    }
    let c = model.config().embed_dim;
    let student_feats = cls_feats
        .into_iter()
        .map(|f| Tensor::new(&[n, c], f))
        .collect::<Result<Vec<_>>>()?;
    let cka = match teacher {
        Some(t) if n >= 2 => {
            let mut feats: Vec<Vec<T>> = vec![Vec::new(); t.config().depth];
            for i in 0..n {
                let mut tape = Tape::frozen();
                let out = t.forward(&mut tape, &data.image::<T>(i), false)?;
                for (f, &v) in feats.iter_mut().zip(&out.block_tokens) {
                    f.extend_from_slice(tape.value(v).row(0));
                }
            }
            let tc = t.config().embed_dim;
            let teacher_feats = feats
                .into_iter()
                .map(|f| Tensor::new(&[n, tc], f))
                .collect::<Result<Vec<_>>>()?;
            json!(analysis::cka_matrix(&student_feats, &teacher_feats)?)
        }
        _ => Value::Null,
    };
    let similarity: Vec<Value> = proportions
        .iter()
        .enumerate()
        .map(|(layer, p)| json!({"layer": layer, "threshold": d.similarity_threshold, "k": d.top_k, "proportions": p}))
        .collect();
    Ok(
        json!({"samples": n, "similarity": similarity, "attention_focus": focus, "cka_student_vs_teacher": cka}),
    )
}

fn content_rows<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (rows, c) = t.dims2().expect("block tokens are 2-D");
    Tensor::new(&[rows - 1, c], t.data()[c..].to_vec()).expect("shape arithmetic")
}
