//! `htr`: train, evaluate and run the line recognizer.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use htr_convtext::checkpoint::{self, Checkpoint, Weights};
use htr_convtext::config::Config;
use htr_convtext::data::manifest::{manifest_root, write_manifest};
use htr_convtext::data::{load_manifest, load_split, normalize, synth_corpus, LineImage, LineRecord, Split};
use htr_convtext::inspect::{inspect_attention, write_attention};
use htr_convtext::metrics::{cer, wer};
use htr_convtext::model::HtrModel;
use htr_convtext::nn::{count_trainable, ParamStore};
use htr_convtext::train::{evaluate, fit, TrainState};
use htr_convtext::{CharVocab, HtrError, Result};

#[derive(Parser)]
#[command(name = "htr", version, about = "Handwritten text line recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightChoice {
    Raw,
    Ema,
}

impl From<WeightChoice> for Weights {
    fn from(w: WeightChoice) -> Self {
        match w {
            WeightChoice::Raw => Weights::Raw,
            WeightChoice::Ema => Weights::Ema,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write `last.ckpt` and `best.ckpt` to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Tab-separated manifest: image path, split, transcript.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Character and word error rates on one split of a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, value_enum, default_value = "raw")]
        weights: WeightChoice,
    },
    /// Print the transcription of each image.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "raw")]
        weights: WeightChoice,
    },
    /// Render synthetic lines and a manifest describing them.
    Synth {
        /// Characters to draw transcripts from.
        #[arg(long)]
        vocab: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// How many of the lines (taken from the end) go to the validation split.
        #[arg(long, default_value_t = 0)]
        val: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
    },
    /// Head-averaged encoder attention of one token, as CSV and a 1-pixel-high PNG.
    InspectAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        token: usize,
        #[arg(long)]
        layer: usize,
        /// Output stem; `.csv` and `.png` are appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Trainable parameter counts of a configuration.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// CER/WER between two files of line-aligned references and hypotheses.
    Score {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        hyps: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, data, out } => train(&config, &data, &out),
        Command::Eval {
            ckpt,
            data,
            split,
            weights,
        } => {
            let (ck, model, params) = load_for_inference(&ckpt, weights.into())?;
            let records = load_manifest(&data)?;
            let samples = load_split(&manifest_root(&data), &records, split, ck.config.mvp.geometry)?;
            let e = evaluate(&model, &params, &samples, &ck.vocab, ck.config.train.batch_val)?;
            println!("CER {:.4}\nWER {:.4}", e.cer, e.wer);
            Ok(())
        }
        Command::Decode { ckpt, images, weights } => {
            let (ck, model, params) = load_for_inference(&ckpt, weights.into())?;
            for path in images {
                let img = normalize(&LineImage::load(&path)?, ck.config.mvp.geometry)?;
                let t = htr_convtext::data::collate(&[(&img, &[][..])])?.images;
                let ids = model.decode(&params, &t)?.remove(0);
                println!("{}\t{}", path.display(), ck.vocab.decode(&ids)?);
            }
            Ok(())
        }
        Command::Synth {
            vocab,
            n,
            seed,
            out,
            val,
            height,
            width,
        } => synth(&vocab, n, seed, &out, val, height, width),
        Command::InspectAttn {
            ckpt,
            image,
            token,
            layer,
            out,
        } => {
            let (ck, model, params) = load_for_inference(&ckpt, Weights::Raw)?;
            let img = normalize(&LineImage::load(&image)?, ck.config.mvp.geometry)?;
            let t = htr_convtext::data::collate(&[(&img, &[][..])])?.images;
            let row = inspect_attention(&model, &params, &t, token, layer)?;
            write_attention(&row, &out)?;
            println!("{} weights written to {}.csv/.png", row.len(), out.display());
            Ok(())
        }
        Command::Params { config } => {
            let cfg = Config::load(&config)?;
            // any vocabulary size works for the count; use a typical 80 characters
            let classes = 82;
            let (_, all) = HtrModel::build(&cfg.model(), classes, true)?;
            let (_, infer) = HtrModel::build(&cfg.model(), classes, false)?;
            println!("inference parameters {}", count_trainable(&infer));
            println!("training parameters {}", count_trainable(&all));
            Ok(())
        }
        Command::Score { refs, hyps } => {
            let read = |p: &Path| -> Result<Vec<String>> {
                let text = std::fs::read_to_string(p).map_err(|e| HtrError::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                Ok(text.lines().map(str::to_owned).collect())
            };
            let (r, h) = (read(&refs)?, read(&hyps)?);
            println!("CER {:.4}\nWER {:.4}", cer(&r, &h)?, wer(&r, &h)?);
            Ok(())
        }
    }
}

fn load_for_inference(path: &Path, which: Weights) -> Result<(Checkpoint, HtrModel, ParamStore)> {
    let ck = checkpoint::load(path)?;
    let (model, specs) = HtrModel::build(&ck.config.model(), ck.vocab.size(), false)?;
    let params = checkpoint::params_for(&ck, &specs, which)?;
    Ok((ck, model, params))
}

fn train(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = Config::load(config)?;
    let records = load_manifest(data)?;
    let texts: Vec<&str> = records.iter().map(|r| r.transcript.as_str()).collect();
    let vocab = CharVocab::build(&texts)?;
    let root = manifest_root(data);
    let geom = cfg.mvp.geometry;
    let train_set = load_split(&root, &records, Split::Train, geom)?;
    let val_set = load_split(&root, &records, Split::Val, geom)?;
    info!(
        "{} training / {} validation lines, {} characters",
        train_set.len(),
        val_set.len(),
        vocab.chars().len()
    );
    let (model, specs) = HtrModel::build(&cfg.model(), vocab.size(), true)?;
    info!("{} trainable parameters", count_trainable(&specs));
    let state = TrainState::new(ParamStore::initialize(specs, cfg.train.seed), cfg.train.seed);
    let result = fit(&model, state, &train_set, &val_set, &vocab, &cfg.train, |s, stats| {
        if s.step % 50 == 0 || s.step == 1 {
            info!(
                "step {} loss {:.4} (ctc {:.4}, context {:.4}) lr {:.2e}",
                s.step, stats.loss, stats.ctc, stats.tcm, stats.lr
            );
        }
        true
    })?;
    std::fs::create_dir_all(out).map_err(|e| HtrError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let last = Checkpoint {
        config: cfg.clone(),
        vocab: vocab.clone(),
        state: result.state,
    };
    checkpoint::save(&last, &out.join("last.ckpt"))?;
    let best = match result.best {
        Some((params, best_cer)) => {
            info!("best validation CER {best_cer:.4}");
            let mut state = last.state.clone();
            state.params = params;
            Checkpoint { state, ..last }
        }
        None => last,
    };
    checkpoint::save(&best, &out.join("best.ckpt"))?;
    info!("final loss {:.4}; checkpoints in {}", result.last.loss, out.display());
    Ok(())
}

fn synth(chars: &str, n: usize, seed: u64, out: &Path, val: usize, height: usize, width: usize) -> Result<()> {
    let vocab = CharVocab::from_chars(chars.chars().collect::<std::collections::BTreeSet<_>>().into_iter().collect())?;
    let geom = htr_convtext::data::Geometry { height, width };
    let samples = synth_corpus(&vocab, n, seed, geom)?;
    std::fs::create_dir_all(out).map_err(|e| HtrError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let mut records = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let name = format!("line_{i:05}.png");
        s.image.save_png(&out.join(&name))?;
        records.push(LineRecord {
            image_path: PathBuf::from(name),
            split: if i + val >= n { Split::Val } else { Split::Train },
            transcript: s.text.clone(),
        });
    }
    write_manifest(&out.join("manifest.tsv"), &records)?;
    println!("{n} lines written to {}", out.display());
    Ok(())
}
