//! Command-line entry point: dataset generation, training phases,
//! evaluation, and single-image captioning with optional attention export.
//!
//! Every command is a pure function of its flags and input files; reruns
//! produce byte-identical artifacts (the training report's wall-time column
//! being the one documented exception). Each run writes a resolved-config
//! sidecar next to its outputs.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use captioner::attention;
use captioner::data::{self, Dataset, DatasetHeader, Split};
use captioner::decoding;
use captioner::error::{Error, Result};
use captioner::metrics;
use captioner::model::{self, CaptionModel, Forward, Group, ModelConfig, Variant};
use captioner::training::{self, Corpus, Phase, TrainConfig};
use captioner::vocab::{self, Vocabulary};

#[derive(Parser)]
#[command(name = "captioner", version, about = "Train and run a desk-scale image captioner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic shapes-and-captions dataset
    Datagen(DatagenArgs),
    /// Run one training phase (pretrain / finetune / scst)
    Train(TrainArgs),
    /// Beam-decode a dataset split and score it
    Eval(EvalArgs),
    /// Caption a single raw image file
    Caption(CaptionArgs),
}

/// `key=value` lines; `#` comments and blank lines ignored. Flags override.
fn read_config_file(path: &Path) -> Result<HashMap<String, String>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected key=value, got {line:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

struct Overrides(HashMap<String, String>);

impl Overrides {
    fn load(path: Option<&PathBuf>) -> Result<Self> {
        Ok(Overrides(match path {
            Some(p) => read_config_file(p)?,
            None => HashMap::new(),
        }))
    }

    /// flag > config file > default.
    fn get<T: FromStr + Clone>(&self, flag: &Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        if let Some(v) = flag {
            return Ok(v.clone());
        }
        match self.0.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| Error::Config(format!("config key {key}={raw:?}: {e}"))),
            None => Ok(default),
        }
    }

    fn get_opt<T: FromStr + Clone>(&self, flag: &Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag.clone());
        }
        match self.0.get(key) {
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("config key {key}={raw:?}: {e}"))),
            None => Ok(None),
        }
    }
}

fn write_sidecar(dir: &Path, resolved: &impl Serialize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let path = dir.join("run_config.json");
    let body = serde_json::to_string_pretty(resolved)
        .map_err(|e| Error::Data(format!("run config serialization: {e}")))?;
    std::fs::write(&path, body + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// datagen
// ---------------------------------------------------------------------------

#[derive(Args)]
struct DatagenArgs {
    /// Output directory for the dataset
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Training split size
    #[arg(long)]
    train: Option<usize>,
    /// Validation split size
    #[arg(long)]
    val: Option<usize>,
    /// Test split size
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long = "captions-per-image")]
    captions_per_image: Option<usize>,
    /// key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_datagen(a: DatagenArgs) -> Result<()> {
    let o = Overrides::load(a.config.as_ref())?;
    let header = DatasetHeader {
        seed: o.get(&a.seed, "seed", 0)?,
        resolution: o.get(&a.resolution, "resolution", 32)?,
        n_train: o.get(&a.train, "train", 500)?,
        n_val: o.get(&a.val, "val", 100)?,
        n_test: o.get(&a.test, "test", 100)?,
        captions_per_image: o.get(&a.captions_per_image, "captions-per-image", 2)?,
    };
    data::make_dataset(&a.out, &header)?;
    write_sidecar(&a.out, &json!({ "command": "datagen", "header": header }))?;
    println!(
        "wrote {} train / {} val / {} test records (seed {}, resolution {}) to {}",
        header.n_train,
        header.n_val,
        header.n_test,
        header.seed,
        header.resolution,
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `datagen`
    #[arg(long)]
    dataset: PathBuf,
    /// pretrain | finetune | scst
    #[arg(long)]
    phase: Phase,
    /// vanilla | fusion_no_se | full_se (new models only)
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "lr-encoder")]
    lr_encoder: Option<f64>,
    #[arg(long = "lr-decoder")]
    lr_decoder: Option<f64>,
    #[arg(long = "lr-fusion")]
    lr_fusion: Option<f64>,
    /// Comma-separated groups to freeze (replaces the phase default)
    #[arg(long)]
    freeze: Option<String>,
    #[arg(long = "warmup-frac")]
    warmup_frac: Option<f64>,
    #[arg(long = "weight-decay")]
    weight_decay: Option<f64>,
    /// Also run validation metrics every epoch (slower)
    #[arg(long = "with-val")]
    with_val: bool,
    #[arg(long = "checkpoint-in")]
    checkpoint_in: Option<PathBuf>,
    #[arg(long = "checkpoint-out")]
    checkpoint_out: PathBuf,
    /// Report CSV path (default: <checkpoint-out>/report.csv)
    #[arg(long = "report-out")]
    report_out: Option<PathBuf>,
    /// key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_freeze_list(list: &str) -> Result<[bool; 3]> {
    let mut frozen = [false; 3];
    for part in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let g: Group = part.parse()?;
        frozen[g as usize] = true;
    }
    Ok(frozen)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let o = Overrides::load(a.config.as_ref())?;
    let phase = a.phase;
    let mut cfg = TrainConfig::for_phase(phase);
    cfg.seed = o.get(&a.seed, "seed", cfg.seed)?;
    cfg.epochs = o.get(&a.epochs, "epochs", cfg.epochs)?;
    cfg.batch_size = o.get(&a.batch_size, "batch-size", cfg.batch_size)?;
    cfg.lr_encoder = o.get(&a.lr_encoder, "lr-encoder", cfg.lr_encoder)?;
    cfg.lr_decoder = o.get(&a.lr_decoder, "lr-decoder", cfg.lr_decoder)?;
    cfg.lr_fusion = o.get(&a.lr_fusion, "lr-fusion", cfg.lr_fusion)?;
    cfg.warmup_frac = o.get(&a.warmup_frac, "warmup-frac", cfg.warmup_frac)?;
    cfg.weight_decay = o.get(&a.weight_decay, "weight-decay", cfg.weight_decay)?;
    if let Some(list) = o.get_opt(&a.freeze, "freeze")? {
        let frozen = parse_freeze_list(&list)?;
        cfg.freeze_encoder = frozen[Group::Encoder as usize];
        cfg.freeze_decoder = frozen[Group::Decoder as usize];
        cfg.freeze_fusion = frozen[Group::Fusion as usize];
    }
    let variant = o.get(&a.variant, "variant", Variant::FullSe)?;

    let train_ds = Dataset::load(&a.dataset, Split::Train)?;
    let train = Corpus::from_dataset(&train_ds)?;
    let val = if a.with_val {
        Some(Corpus::from_dataset(&Dataset::load(&a.dataset, Split::Val)?)?)
    } else {
        None
    };

    let (mut model, vocabulary) = match &a.checkpoint_in {
        Some(dir) => {
            let (mut m, tokens) = model::load_checkpoint(dir)?;
            if a.variant.is_some() && m.config.variant != variant {
                return Err(Error::Config(format!(
                    "checkpoint is variant {}, but --variant {} was requested",
                    m.config.variant, variant
                )));
            }
            if m.resolution() != train_ds.resolution {
                m.interpolate_pos_embeddings(train_ds.resolution)?;
                println!(
                    "interpolated position embeddings to resolution {}",
                    train_ds.resolution
                );
            }
            (m, Vocabulary::from_plain_tokens(&tokens)?)
        }
        None => {
            if phase != Phase::Pretrain {
                return Err(Error::Config(format!(
                    "phase {phase} requires --checkpoint-in"
                )));
            }
            let vocabulary = Vocabulary::build(&train.captions.concat())?;
            let config = ModelConfig::desk(variant, vocabulary.len());
            (
                CaptionModel::new(config, train_ds.resolution, cfg.seed)?,
                vocabulary,
            )
        }
    };

    let report = match phase {
        Phase::Scst => training::scst_train(&mut model, &vocabulary, &train, val.as_ref(), &cfg)?,
        _ => training::ce_train(&mut model, &vocabulary, &train, val.as_ref(), &cfg)?,
    };

    model::save_checkpoint(&model, vocabulary.plain_tokens(), &a.checkpoint_out)?;
    let report_path = a
        .report_out
        .clone()
        .unwrap_or_else(|| a.checkpoint_out.join("report.csv"));
    report.write_csv(&report_path)?;
    write_sidecar(
        &a.checkpoint_out,
        &json!({
            "command": "train",
            "dataset": a.dataset,
            "checkpoint_in": a.checkpoint_in,
            "checkpoint_out": a.checkpoint_out,
            "report_out": report_path,
            "variant": model.config.variant,
            "model": model.config,
            "train": cfg,
            "with_val": a.with_val,
        }),
    )?;
    let last = report.rows.last().expect("at least one epoch");
    println!(
        "{phase} done: {} epochs, final train metric {:.4}, checkpoint at {}",
        report.rows.len(),
        last.train_loss,
        a.checkpoint_out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// train | val | test
    #[arg(long)]
    split: Option<Split>,
    #[arg(long = "checkpoint-in")]
    checkpoint_in: PathBuf,
    /// Output directory for predictions and metrics
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long = "length-norm")]
    length_norm: Option<f64>,
    /// Score the first reference caption against itself (metric ceiling)
    #[arg(long = "self-eval")]
    self_eval: bool,
    /// key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Serialize)]
struct Prediction<'a> {
    id: &'a str,
    caption: &'a str,
    cider_d: f64,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let o = Overrides::load(a.config.as_ref())?;
    let split = o.get(&a.split, "split", Split::Test)?;
    let beam = o.get(&a.beam, "beam", 5)?;
    let alpha = o.get(&a.length_norm, "length-norm", 0.0)?;

    let ds = Dataset::load(&a.dataset, split)?;
    let corpus = Corpus::from_dataset(&ds)?;
    let (model, tokens) = model::load_checkpoint(&a.checkpoint_in)?;
    let vocabulary = Vocabulary::from_plain_tokens(&tokens)?;

    let (candidates, references): (Vec<String>, Vec<Vec<String>>) = if a.self_eval {
        // ceiling check: each image's first reference scored against itself
        let firsts: Vec<String> = corpus.captions.iter().map(|c| c[0].clone()).collect();
        (firsts.clone(), firsts.into_iter().map(|c| vec![c]).collect())
    } else {
        let mut model = model;
        if model.resolution() != ds.resolution {
            model.interpolate_pos_embeddings(ds.resolution)?;
        }
        let mut out = Vec::with_capacity(corpus.len());
        for image in &corpus.images {
            let v = decoding::encode_image(&model, image)?;
            let hyp = decoding::beam_decode(&model, &v, beam, alpha)?;
            out.push(vocabulary.decode(&hyp.tokens)?);
        }
        (out, corpus.captions.clone())
    };

    let report = metrics::evaluate(&corpus.ids, &candidates, &references)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(a.out.display().to_string(), e))?;
    let pred_path = a.out.join("predictions.jsonl");
    let mut lines = String::new();
    for ((id, caption), &cider) in corpus
        .ids
        .iter()
        .zip(&candidates)
        .zip(&report.per_sample_cider)
    {
        let rec = Prediction {
            id,
            caption,
            cider_d: cider,
        };
        lines.push_str(
            &serde_json::to_string(&rec)
                .map_err(|e| Error::Data(format!("prediction serialization: {e}")))?,
        );
        lines.push('\n');
    }
    std::fs::write(&pred_path, lines).map_err(|e| Error::io(pred_path.display().to_string(), e))?;
    let metrics_path = a.out.join("metrics.csv");
    std::fs::write(
        &metrics_path,
        format!(
            "metric,value\ncider_d,{:.6}\nbleu4,{:.6}\n",
            report.cider_d, report.bleu4
        ),
    )
    .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    write_sidecar(
        &a.out,
        &json!({
            "command": "eval",
            "dataset": a.dataset,
            "split": split.tag(),
            "checkpoint_in": a.checkpoint_in,
            "beam": beam,
            "length_norm": alpha,
            "self_eval": a.self_eval,
        }),
    )?;
    println!("CIDEr-D {:.4}  BLEU@4 {:.4}", report.cider_d, report.bleu4);
    Ok(())
}

// ---------------------------------------------------------------------------
// caption
// ---------------------------------------------------------------------------

#[derive(Args)]
struct CaptionArgs {
    #[arg(long = "checkpoint-in")]
    checkpoint_in: PathBuf,
    /// Raw little-endian f32 HxWx3 image file
    #[arg(long)]
    image: PathBuf,
    /// Image resolution (defaults to the checkpoint's; interpolates if different)
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long = "length-norm")]
    length_norm: Option<f64>,
    /// Directory for per-token attention heatmaps
    #[arg(long = "export-attention")]
    export_attention: Option<PathBuf>,
    /// key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_caption(a: CaptionArgs) -> Result<()> {
    let o = Overrides::load(a.config.as_ref())?;
    let beam = o.get(&a.beam, "beam", 5)?;
    let alpha = o.get(&a.length_norm, "length-norm", 0.0)?;
    let (mut model, tokens) = model::load_checkpoint(&a.checkpoint_in)?;
    let resolution = o.get(&a.resolution, "resolution", model.resolution())?;
    if resolution != model.resolution() {
        model.interpolate_pos_embeddings(resolution)?;
    }
    let vocabulary = Vocabulary::from_plain_tokens(&tokens)?;
    let image = data::read_f32_image(&a.image, resolution)?;
    let v = decoding::encode_image(&model, &image)?;
    let hyp = decoding::beam_decode(&model, &v, beam, alpha)?;
    let caption = vocabulary.decode(&hyp.tokens)?;

    if let Some(dir) = &a.export_attention {
        let words: Vec<String> = vocab::words(&caption).map(str::to_string).collect();
        let mut prefix = vec![vocab::BOS];
        prefix.extend(hyp.tokens.iter().copied().filter(|&t| t != vocab::EOS));
        let mut f = Forward::eval(&model);
        let vi = f.inject_v_info(&v)?;
        let out = f.decode_text(vi, &prefix)?;
        let side = (model.n_patches() as f64).sqrt().round() as usize;
        let maps = attention::extract_heatmaps(&out.attention, &words, side)?;
        attention::write_heatmaps(dir, &maps)?;
        write_sidecar(
            dir,
            &json!({
                "command": "caption",
                "checkpoint_in": a.checkpoint_in,
                "image": a.image,
                "resolution": resolution,
                "beam": beam,
                "length_norm": alpha,
            }),
        )?;
    }
    println!("{caption}");
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Datagen(a) => cmd_datagen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Caption(a) => cmd_caption(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
