mod settings;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use convasr_core::backbone::{is_backbone_param, ModelConfig};
use convasr_core::corpus::{generate_synthetic_corpus, read_corpus, utterance_seed, write_corpus, Conversation, Vocabulary};
use convasr_core::dataset::{build_examples, Example};
use convasr_core::eval::{
    render_table, run_eval, split_held_out, sweep_with_data, EvalFlags, EvalReport, SweepConfig, SweepData,
};
use convasr_core::rescoring::{
    attention_rescore, final_score_and_reorder, fit_topic_model, group_by_utterance, hypothesis_topics,
    keep_first_pass, load_nbest, nbest, topic_rescore, write_nbest, TopicModel,
};
use convasr_core::training::{init_stage_two, save_checkpoint, train, Stage, TrainConfig};
use convasr_core::{Error, Model, Result};
use convasr_tensor::{ParamStore, TensorError};

use settings::Settings;

#[derive(Parser)]
#[command(name = "convasr", version, about = "Conversational speech recognition pipeline")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; every random component derives its own seed from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-speaker conversation corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        /// Where to write the vocabulary (default: next to the corpus).
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Train stage 1 (speech backbone) or stage 2 (latent variables).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
        stage: u32,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint that stage 2 starts from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Write first-pass n-best lists for the evaluation split.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "role_vae,topic_vae,att_res")]
        flags: EvalFlags,
    },
    /// Fit a topic model on the training split.
    TopicFit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-rank n-best lists, with topic rescoring when a topic model is given.
    Rescore {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        topics: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the evaluation split once per `--flags` value.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, required = true)]
        flags: Vec<EvalFlags>,
        #[arg(long)]
        topics: Option<PathBuf>,
        /// Label for the `config` column.
        #[arg(long, default_value = "eval")]
        name: String,
        /// Also append the JSON Lines rows to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fine-tune and evaluate stage 2 over a range of context lengths.
    Sweep {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Per-component seed derived from the run seed.
fn seed_for(seed: u64, component: &str) -> u64 {
    utterance_seed(seed, component)
}

fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.command {
        Command::GenCorpus { out, vocab } => {
            let corpus = generate_synthetic_corpus(&settings.synthetic, seed_for(seed, "corpus"))?;
            write_corpus(&out, &corpus.conversations)?;
            let vocab_path = vocab.unwrap_or_else(|| out.with_extension("vocab.json"));
            corpus.inventory.vocabulary(true).save(&vocab_path)?;
            eprintln!(
                "wrote {} conversations to {} and the vocabulary to {}",
                corpus.conversations.len(),
                out.display(),
                vocab_path.display()
            );
        }
        Command::Train {
            stage,
            corpus,
            vocab,
            out,
            init,
        } => {
            let stage = Stage::from_number(stage)?;
            let inputs = Inputs::load(&settings, &corpus, &vocab, seed)?;
            let config = settings.model_for_vocab(inputs.vocab.size())?;
            let mut model = match (stage, init) {
                (Stage::One, None) => Model::new(config, seed_for(seed, "init"))?,
                (Stage::One, Some(_)) => return Err(Error::Config("--init only applies to stage 2".into())),
                (Stage::Two, Some(path)) => init_stage_two(config, &path, seed_for(seed, "init"))?,
                (Stage::Two, None) => {
                    return Err(Error::Config(
                        "stage 2 needs the stage-1 checkpoint: pass it with --init <checkpoint>".into(),
                    ))
                }
            };
            let batches = inputs.examples(&settings, &inputs.train)?;
            let tc = TrainConfig {
                stage,
                seed: seed_for(seed, "train"),
                ..settings.train.clone()
            };
            train(&mut model, &batches, &tc, &mut |line| eprintln!("{line}"))?;
            save_checkpoint(&model, stage, &out)?;
            eprintln!("saved stage-{} checkpoint to {}", stage.number(), out.display());
        }
        Command::Decode {
            model,
            corpus,
            vocab,
            out,
            flags,
        } => {
            let inputs = Inputs::load(&settings, &corpus, &vocab, seed)?;
            let model = load_model(&settings, &inputs.vocab, &model, flags)?;
            let examples = inputs.examples(&settings, &inputs.test)?;
            let mut w = BufWriter::new(File::create(&out).map_err(|e| Error::io(&out, e))?);
            for ex in examples.iter().flatten() {
                let prep = model.prepare(&ex.features, &ex.contexts, flags.latent())?;
                let mut hyps = nbest(
                    &model,
                    &prep,
                    &inputs.vocab,
                    &ex.key,
                    settings.decode.beam_width,
                    settings.decode.n_best,
                )?;
                if flags.att_res {
                    for h in hyps.iter_mut() {
                        h.s_attn = Some(attention_rescore(&model, &prep, h, &inputs.vocab)?);
                    }
                }
                write_nbest(&mut w, &hyps)?;
            }
            w.flush().map_err(|e| Error::io(&out, e))?;
        }
        Command::TopicFit {
            model,
            corpus,
            vocab,
            out,
        } => {
            let inputs = Inputs::load(&settings, &corpus, &vocab, seed)?;
            let model = load_model(&settings, &inputs.vocab, &model, EvalFlags::NONE)?;
            let cfg = convasr_core::rescoring::TopicFitConfig {
                seed: seed_for(seed, "topics"),
                ..settings.topics.clone()
            };
            let tm = fit_topic_model(&model, &inputs.train, &inputs.vocab, &cfg)?;
            tm.save(&out)?;
            for (b, words) in tm.keywords.iter().enumerate() {
                println!("topic {b}: {}", words.join(" "));
            }
        }
        Command::Rescore {
            model,
            vocab,
            nbest,
            topics,
            out,
        } => {
            let vocab = Vocabulary::load(&vocab)?;
            let model = load_model(&settings, &vocab, &model, EvalFlags::NONE)?;
            let tm = topics.map(TopicModel::load).transpose()?;
            let mut w = BufWriter::new(File::create(&out).map_err(|e| Error::io(&out, e))?);
            for mut list in group_by_utterance(load_nbest(&nbest)?) {
                match &tm {
                    Some(tm) => {
                        let dists = hypothesis_topics(&model, tm, &list, &vocab)?;
                        topic_rescore(&mut list, &dists, tm)?;
                    }
                    None => keep_first_pass(&mut list),
                }
                let ranked = final_score_and_reorder(list)?;
                println!("{}\t{}", ranked[0].utt_id, ranked[0].text());
                write_nbest(&mut w, &ranked)?;
            }
            w.flush().map_err(|e| Error::io(&out, e))?;
        }
        Command::Eval {
            model,
            corpus,
            vocab,
            flags,
            topics,
            name,
            report,
        } => {
            let inputs = Inputs::load(&settings, &corpus, &vocab, seed)?;
            let any_latent = flags.iter().fold(EvalFlags::NONE, |acc, f| EvalFlags {
                role_vae: acc.role_vae || f.role_vae,
                topic_vae: acc.topic_vae || f.topic_vae,
                ..acc
            });
            let model = load_model(&settings, &inputs.vocab, &model, any_latent)?;
            let tm = topics.map(TopicModel::load).transpose()?;
            let examples = inputs.examples(&settings, &inputs.test)?;
            let mut rows: Vec<(String, EvalReport)> = Vec::new();
            for f in flags {
                let r = run_eval(&model, &inputs.vocab, &examples, f, tm.as_ref(), &settings.decode)?;
                rows.push((name.clone(), r));
            }
            let json: Vec<String> = rows.iter().map(|(c, r)| r.json_row(c).to_string()).collect();
            emit(&render_table(&rows), &json, report.as_deref())?;
        }
        Command::Sweep {
            corpus,
            vocab,
            init,
            report,
        } => {
            let vocab_set = Vocabulary::load(&vocab)?;
            let seeds = if settings.seeds.is_empty() {
                vec![seed]
            } else {
                settings.seeds.clone()
            };
            let cfg = SweepConfig {
                role_lengths: settings.role_lengths.clone(),
                topic_lengths: settings.topic_lengths.clone(),
                seeds,
                corpus,
                vocab,
                stage1: init,
                model: settings.model_for_vocab(vocab_set.size())?,
                features: settings.features.clone(),
                feature_seed: seed_for(seed, "features"),
                train: settings.train.clone(),
                held_out: settings.held_out,
                decode: settings.decode,
            };
            cfg.validate()?;
            let data = SweepData::load(&cfg)?;
            let table = sweep_with_data(&cfg, &data, &mut |line| eprintln!("{line}"))?;
            let json: Vec<String> = table.json_rows().iter().map(|v| v.to_string()).collect();
            emit(&table.render(), &json, report.as_deref())?;
        }
    }
    Ok(())
}

/// Print the table and the JSON Lines rows; append the rows to `report` too.
fn emit(table: &str, json: &[String], report: Option<&Path>) -> Result<()> {
    print!("{table}");
    for line in json {
        println!("{line}");
    }
    if let Some(path) = report {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        for line in json {
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

struct Inputs {
    vocab: Vocabulary,
    train: Vec<Conversation>,
    /// The held-out conversations, or every conversation when nothing is held out.
    test: Vec<Conversation>,
    feature_seed: u64,
}

impl Inputs {
    fn load(settings: &Settings, corpus: &Path, vocab: &Path, seed: u64) -> Result<Self> {
        let mut conversations = read_corpus(corpus)?;
        let vocab = Vocabulary::load(vocab)?;
        let (train, test) = if settings.held_out == 0 {
            (conversations.clone(), conversations)
        } else {
            split_held_out(&mut conversations, settings.held_out)?
        };
        Ok(Self {
            vocab,
            train,
            test,
            feature_seed: seed_for(seed, "features"),
        })
    }

    fn examples(&self, settings: &Settings, conversations: &[Conversation]) -> Result<Vec<Vec<Example>>> {
        build_examples(
            conversations,
            &self.vocab,
            &settings.features,
            self.feature_seed,
            settings.windows,
        )
    }
}

/// Full checkpoint, or a stage-1 checkpoint when no latent branch is used.
fn load_model(settings: &Settings, vocab: &Vocabulary, path: &Path, flags: EvalFlags) -> Result<Model> {
    let config: ModelConfig = settings.model_for_vocab(vocab.size())?;
    let stored = ParamStore::load(path).map_err(|e| match e {
        TensorError::Io(io) => Error::io(path, io),
        other => other.into(),
    })?;
    let backbone_only = stored.iter().all(|(_, n, _)| is_backbone_param(n));
    if !backbone_only {
        return Model::load(config, path);
    }
    if flags.role_vae || flags.topic_vae {
        return Err(Error::Config(format!(
            "{} is a stage-1 checkpoint; flags {flags} need a stage-2 checkpoint",
            path.display()
        )));
    }
    convasr_core::training::init_stage_two_from(config, &stored, 0)
}
