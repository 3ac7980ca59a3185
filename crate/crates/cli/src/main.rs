use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use svlm::config::RunConfig;
use svlm::data::{build_corpora, file_checksum, holdout_leaks, read_corpora, write_corpora, write_jsonl, Corpora};
use svlm::gradcheck::full_model_suite;
use svlm::inference::{adapt_resolution, beam_search, greedy_decode, BeamConfig, Prediction};
use svlm::model::{build_prefix_mask, Model, StemConfig, Variant};
use svlm::objectives::Objective;
use svlm::parallel::{try_map, Exec};
use svlm::pipeline::{
    caption_eval, generative_finetune_eval, init_model, metrics_header, paired_finetune_eval, run_ablation,
    train_tokenizer, vqa_finetune_eval, Arm,
};
use svlm::tokenizer::Vocab;
use svlm::training::{Checkpoint, TrainData, Trainer};
use svlm::vision::Image;
use svlm::Error;

#[derive(Parser)]
#[command(name = "svlm", version, about = "Prefix-LM vision-language pretraining at desk scale")]
struct Cli {
    /// Run configuration (JSON). Missing keys take defaults; unknown keys are errors.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run work items on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpora, evaluation splits and a leakage report.
    Datagen {
        #[arg(long)]
        out: PathBuf,
        /// Number of image-text pairs (0 gives a text-only corpus).
        #[arg(long)]
        n_pairs: Option<usize>,
        #[arg(long)]
        n_docs: Option<usize>,
    },
    /// Train the BPE vocabulary on a generated corpus.
    TokenizerTrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Pretrain on mixed image-text pairs and text-only documents.
    Pretrain {
        #[command(flatten)]
        io: CorpusIo,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        arm: ArmFlags,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write a checkpoint every N steps.
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Finetune a checkpoint on a downstream task.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        out: PathBuf,
        /// Accept checkpoints missing some parameters (they keep their init).
        #[arg(long)]
        allow_partial: bool,
        /// Adapt positional tables to this square image size before finetuning.
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Caption an evaluation split and write predictions.
    Decode {
        #[command(flatten)]
        io: CorpusIo,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "heldin")]
        split: Split,
        /// Forced decoder prefix, for example "a picture of".
        #[arg(long)]
        prompt: Option<String>,
        /// Beam width; greedy decoding when absent.
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score captions on every split and write a JSON report.
    Eval {
        #[command(flatten)]
        io: CorpusIo,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run ablation arms end to end and write a comparison report.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated arm names; all arms when absent.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Human-readable views of checkpoints, masks and gradients.
    Inspect {
        #[command(subcommand)]
        what: Inspect,
    },
}

#[derive(Subcommand)]
enum Inspect {
    /// The effective run configuration as JSON, after defaults and --seed.
    Config,
    /// Parameter table with element counts.
    Params {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// ASCII grid of the prefix attention mask.
    Mask {
        #[arg(long)]
        t: usize,
        #[arg(long)]
        tp: usize,
    },
    /// Full-model finite-difference check in f64; fails above 1e-5.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Entries probed per parameter tensor.
        #[arg(long, default_value_t = 8)]
        per_param: usize,
    },
}

#[derive(Args)]
struct CorpusIo {
    /// Directory written by `datagen`.
    #[arg(long)]
    corpus: PathBuf,
    /// Vocabulary written by `tokenizer-train`.
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args)]
struct ArmFlags {
    /// Objective for text-only documents.
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long, value_enum)]
    variant: Option<VariantFlag>,
    /// Number of conv-stage blocks; 0 selects the linear patch projection.
    #[arg(long)]
    conv_blocks: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantFlag {
    EncoderDecoder,
    DecoderOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Vqa,
    Paired,
    GenVqa,
    GenVqaPartial,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Heldin,
    Compositional,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::NanLoss { .. } | Error::NonFinite(_) => 3,
        _ => 1,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn create(path: &Path) -> svlm::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_json(path: &Path, value: &serde_json::Value) -> svlm::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn load_config(cli: &Cli) -> svlm::Result<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::toy(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn load_corpus(cfg: &RunConfig, dir: &Path) -> svlm::Result<Corpora> {
    read_corpora(dir, cfg.corpus.holdout_combos()?)
}

fn load_train_data(dir: &Path, c: &Corpora, vocab: &Vocab, exec: Exec) -> svlm::Result<TrainData> {
    let pairs = try_map(exec, &c.pairs, |_, p| -> svlm::Result<_> {
        Ok((Image::load_ppm(&dir.join(&p.image))?, vocab.encode(&p.caption, false, true)?))
    })?;
    let docs = c.docs.iter().map(|d| vocab.encode(&d.text, false, true)).collect::<svlm::Result<_>>()?;
    Ok(TrainData { pairs, docs })
}

fn apply_arm(cfg: &mut RunConfig, arm: &ArmFlags) {
    if let Some(o) = arm.objective {
        cfg.train.objective = o;
    }
    if let Some(v) = arm.variant {
        cfg.model.variant = match v {
            VariantFlag::EncoderDecoder => Variant::EncoderDecoder,
            VariantFlag::DecoderOnly => Variant::DecoderOnly,
        };
    }
    match arm.conv_blocks {
        Some(0) => cfg.model.stem = StemConfig::Linear,
        Some(blocks) => {
            let width = match cfg.model.stem {
                StemConfig::Conv { width, .. } => width,
                StemConfig::Linear => 8,
            };
            cfg.model.stem = StemConfig::Conv { blocks, width };
        }
        None => {}
    }
}

fn load_model(path: &Path, allow_partial: bool) -> svlm::Result<Model<f32>> {
    Checkpoint::load(path)?.to_model(allow_partial)
}

fn run(cli: Cli) -> svlm::Result<()> {
    let mut cfg = load_config(&cli)?;
    let exec = if cli.sequential { Exec::Sequential } else { Exec::available() };
    match cli.command {
        Command::Datagen { out, n_pairs, n_docs } => {
            if let Some(n) = n_pairs {
                cfg.corpus.n_pairs = n;
            }
            if let Some(n) = n_docs {
                cfg.corpus.n_docs = n;
            }
            // batch counts are checked against the corpus at pretraining time
            let problems: Vec<String> = cfg.problems().into_iter().filter(|p| !p.starts_with("train:")).collect();
            if !problems.is_empty() {
                return Err(Error::Config(problems.join("; ")));
            }
            let corpora = build_corpora(&cfg.corpus)?;
            write_corpora(&out, &corpora, cfg.corpus.image_size)?;
            let leaks: Vec<&str> =
                holdout_leaks(&corpora.pairs, &corpora.holdout).iter().map(|p| p.id.as_str()).collect();
            write_json(
                &out.join("leakage.json"),
                &json!({
                    "holdout": corpora.holdout.iter().map(|c| c.to_string()).collect::<Vec<_>>(),
                    "scanned_pairs": corpora.pairs.len(),
                    "violations": leaks.len(),
                    "violating_ids": leaks,
                }),
            )?;
            let mut files = serde_json::Map::new();
            for name in ["pairs.jsonl", "text.jsonl", "eval.jsonl", "leakage.json"] {
                files.insert(name.into(), json!(format!("{:08x}", file_checksum(&out.join(name))?)));
            }
            write_json(
                &out.join("manifest.json"),
                &json!({
                    "config": cfg,
                    "counts": {
                        "pairs": corpora.pairs.len(),
                        "docs": corpora.docs.len(),
                        "heldin": corpora.heldin.len(),
                        "compositional": corpora.compositional.len(),
                    },
                    "crc32": files,
                }),
            )?;
            println!(
                "wrote {} pairs, {} documents, {} + {} evaluation scenes to {}; leakage violations: {}",
                corpora.pairs.len(),
                corpora.docs.len(),
                corpora.heldin.len(),
                corpora.compositional.len(),
                out.display(),
                leaks.len()
            );
        }
        Command::TokenizerTrain { corpus, out, vocab_size } => {
            if let Some(v) = vocab_size {
                cfg.tokenizer.vocab_size = v;
            }
            let c = load_corpus(&cfg, &corpus)?;
            let vocab = train_tokenizer(&cfg.tokenizer, &c)?;
            vocab.save(&out)?;
            println!("vocabulary of {} entries written to {}", vocab.len(), out.display());
        }
        Command::Pretrain { io, out, arm, steps, resume, checkpoint_every } => {
            apply_arm(&mut cfg, &arm);
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if checkpoint_every.is_some() {
                cfg.train.checkpoint_every = checkpoint_every;
            }
            let vocab = Vocab::load(&io.vocab)?;
            let c = load_corpus(&cfg, &io.corpus)?;
            cfg.corpus.n_pairs = c.pairs.len();
            cfg.corpus.n_docs = c.docs.len();
            cfg.tokenizer.vocab_size = vocab.len();
            cfg.validate()?;
            let data = load_train_data(&io.corpus, &c, &vocab, exec)?;
            let mut trainer = match &resume {
                Some(p) => Trainer::resume(&Checkpoint::load(p)?, cfg.train.clone(), &data, &vocab)?,
                None => Trainer::new(init_model(&cfg, &vocab)?, cfg.train.clone(), &data, &vocab)?,
            };
            trainer.exec = exec;
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            let metrics_path = out.join("metrics.jsonl");
            let mut metrics = if resume.is_some() && metrics_path.exists() {
                BufWriter::new(File::options().append(true).open(&metrics_path).map_err(io_err(&metrics_path))?)
            } else {
                let mut w = create(&metrics_path)?;
                writeln!(w, "{}", metrics_header(&cfg)).map_err(io_err(&metrics_path))?;
                w
            };
            trainer.run(&mut metrics, Some(&out))?;
            trainer.checkpoint().save(&out.join("final.svlm"))?;
            write_json(&out.join("config.json"), &serde_json::to_value(&cfg)?)?;
            println!("pretrained {} steps; checkpoint {}", trainer.step_index(), out.join("final.svlm").display());
        }
        Command::Finetune { checkpoint, vocab, task, out, allow_partial, resolution, steps } => {
            if let Some(s) = steps {
                cfg.vqa.finetune.steps = s;
            }
            let vocab = Vocab::load(&vocab)?;
            let mut model = match &checkpoint {
                Some(p) => load_model(p, allow_partial)?,
                None => init_model(&cfg, &vocab)?,
            };
            if let Some(r) = resolution {
                model = adapt_resolution(&model, [r, r])?;
                cfg.corpus.image_size = r;
                cfg.model.image_hw = [r, r];
            }
            let report = match task {
                Task::Vqa => {
                    let (acc, trace) = vqa_finetune_eval(&mut model, &cfg, &vocab, exec)?;
                    json!({ "task": "vqa", "accuracy": acc, "final_loss": trace.last() })
                }
                Task::Paired => {
                    let (acc, trace) = paired_finetune_eval(&mut model, &cfg, &vocab, exec)?;
                    json!({ "task": "paired", "accuracy": acc, "final_loss": trace.last() })
                }
                Task::GenVqa | Task::GenVqaPartial => {
                    let partial = matches!(task, Task::GenVqaPartial);
                    let r = generative_finetune_eval(&mut model, &cfg, &vocab, partial, exec)?;
                    write_jsonl(&out.join("predictions.jsonl"), &r.predictions)?;
                    json!({
                        "task": if partial { "gen_vqa_partial" } else { "gen_vqa" },
                        "accuracy": r.accuracy,
                        "unseen_answer_accuracy": r.unseen_answer_accuracy,
                    })
                }
            };
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            Checkpoint::from_model(&model).save(&out.join("final.svlm"))?;
            write_json(&out.join("report.json"), &json!({ "config": cfg, "result": report }))?;
            println!("{report}");
        }
        Command::Decode { io, checkpoint, split, prompt, beam, max_len, out } => {
            let vocab = Vocab::load(&io.vocab)?;
            let model = load_model(&checkpoint, false)?;
            let c = load_corpus(&cfg, &io.corpus)?;
            let records = match split {
                Split::Heldin => &c.heldin,
                Split::Compositional => &c.compositional,
            };
            let prompt = prompt.unwrap_or_else(|| cfg.eval.prompt.clone());
            let prompt_ids = if prompt.is_empty() { Vec::new() } else { vocab.encode(&prompt, false, false)? };
            let max_len = max_len.unwrap_or(cfg.eval.max_len);
            let preds = try_map(exec, records, |_, r| -> svlm::Result<Prediction> {
                let img = Image::load_ppm(&io.corpus.join(&r.image))?.to_tensor::<f32>();
                let (mut ids, score) = match beam {
                    Some(k) => {
                        let b = BeamConfig { width: k, max_len, ..cfg.eval.beam.unwrap_or_default() };
                        let h = beam_search(&model, Some(&img), &[], &prompt_ids, b)?;
                        (h.tokens, h.score)
                    }
                    None => (greedy_decode(&model, Some(&img), &[], &prompt_ids, max_len)?, 0.0),
                };
                if ids.last() == Some(&svlm::tokenizer::EOS) {
                    ids.pop();
                }
                Ok(Prediction { id: r.id.clone(), prediction: vocab.decode(&ids)?, score })
            })?;
            write_jsonl(&out, &preds)?;
            println!("{} predictions written to {}", preds.len(), out.display());
        }
        Command::Eval { io, checkpoint, out, limit } => {
            if limit.is_some() {
                cfg.eval.limit = limit;
            }
            let vocab = Vocab::load(&io.vocab)?;
            let model = load_model(&checkpoint, false)?;
            let c = load_corpus(&cfg, &io.corpus)?;
            let (heldin, _) = caption_eval(&model, &vocab, &c.heldin, &cfg, exec)?;
            let (compositional, _) = caption_eval(&model, &vocab, &c.compositional, &cfg, exec)?;
            let mut zs = cfg.clone();
            zs.eval.prompt = svlm::data::PROMPT.to_string();
            let (zero_shot, _) = caption_eval(&model, &vocab, &c.compositional, &zs, exec)?;
            let report = json!({
                "config": cfg,
                "splits": {
                    "heldin": heldin,
                    "compositional": compositional,
                    "compositional_prompted": zero_shot,
                },
            });
            write_json(&out, &report)?;
            println!("{}", report["splits"]);
        }
        Command::Ablate { out, arms, steps } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cfg.validate()?;
            let arms: Vec<Arm> = if arms.is_empty() {
                Arm::all()
            } else {
                arms.iter().map(|a| a.parse()).collect::<svlm::Result<_>>()?
            };
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            let mut metrics = create(&out.join("metrics.jsonl"))?;
            let report = run_ablation(&cfg, &arms, exec, &mut metrics)?;
            metrics.flush().map_err(io_err(&out))?;
            write_json(&out.join("report.json"), &serde_json::to_value(&report)?)?;
            let md = report.to_markdown();
            std::fs::write(out.join("report.md"), &md).map_err(io_err(&out))?;
            print!("{md}");
        }
        Command::Inspect { what } => match what {
            Inspect::Params { checkpoint } => {
                let ck = Checkpoint::load(&checkpoint)?;
                let mut total = 0;
                for (name, t) in &ck.records {
                    let n: usize = t.shape().iter().product();
                    total += n;
                    println!("{name:<40} {:<16} {n:>10}", format!("{:?}", t.shape()));
                }
                println!("{:<40} {:<16} {total:>10}", "total", "");
                let model = ck.to_model::<f32>(false)?;
                println!("model parameters: {}", model.num_parameters());
            }
            Inspect::Config => {
                println!("{}", serde_json::to_string_pretty(&cfg)?);
            }
            Inspect::Mask { t, tp } => {
                for row in build_prefix_mask(t, tp).to_grid() {
                    println!("{row}");
                }
            }
            Inspect::Gradcheck { seeds, per_param } => {
                let seeds: Vec<u64> = (0..seeds).collect();
                let results = full_model_suite(&seeds, Some(per_param))?;
                let mut worst = 0.0f64;
                for r in &results {
                    println!(
                        "{:?} seed {}: max rel error {:.3e} ({})",
                        r.variant, r.seed, r.worst.max_rel_error, r.worst.name
                    );
                    worst = worst.max(r.worst.max_rel_error);
                }
                if worst >= 1e-5 {
                    return Err(Error::NonFinite("gradient check above tolerance"));
                }
                println!("ok: worst {worst:.3e} < 1e-5");
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
