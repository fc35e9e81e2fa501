//! One function per subcommand. Every command resolves its configuration,
//! echoes it into the run directory and writes its artifacts there.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use unimlip::checkpoint::{load_checkpoint, save_checkpoint};
use unimlip::corpus_io::{manifest_path, read_split, write_split};
use unimlip::datagen::{generate_corpus, split_corpus, Sample, Vocabulary};
use unimlip::eval::{generate_questions, linear_probe_auc, retrieval_recall, vqa_finetune_eval, RecallReport, VqaReport};
use unimlip::model::{image_batch, token_batch, Model};
use unimlip::trainer::{run_phase, EpochRecord, Hooks, TrainConfig, TrainState};

use crate::ablation;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::metrics::MetricsWriter;
use crate::report;

pub const CONFIG_FILE: &str = "config.toml";
pub const SEED_FILE: &str = "seed";
const CORPUS: &str = "corpus";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Pretrain,
    EvalRetrieval,
    Probe,
    Vqa,
    Ablate,
    Report,
}

pub struct Invocation {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub run_dir: PathBuf,
    pub seed: Option<u64>,
}

/// Runs one command. Without `--config`, a configuration already echoed
/// into the run directory is the starting point.
pub fn dispatch(inv: &Invocation) -> Result<(), CliError> {
    let dir = &inv.run_dir;
    if inv.command == Command::Report {
        if !inv.overrides.is_empty() || inv.config.is_some() || inv.seed.is_some() {
            return Err(CliError::Usage("report reads the run directory only; it takes no configuration".into()));
        }
        return report::write_report(dir);
    }
    let echoed = dir.join(CONFIG_FILE);
    let base = inv.config.clone().or_else(|| echoed.exists().then_some(echoed));
    let cfg = RunConfig::load(base.as_deref(), &inv.overrides, inv.seed)?;
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    write_config(dir, &cfg)?;
    match inv.command {
        Command::GenData => gen_data(dir, &cfg),
        Command::Pretrain => pretrain(dir, &cfg),
        Command::EvalRetrieval => eval_retrieval(dir, &cfg),
        Command::Probe => probe(dir, &cfg),
        Command::Vqa => vqa(dir, &cfg),
        Command::Ablate => ablate(dir, &cfg),
        Command::Report => unreachable!(),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(CliError::io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(unimlip::Error::from)?;
    text.push('\n');
    write_file(path, text)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write_file(&dir.join(CONFIG_FILE), cfg.to_toml())?;
    write_file(&dir.join(SEED_FILE), format!("{}\n", cfg.train.seed))
}

fn data_dir(dir: &Path) -> PathBuf {
    dir.join("data")
}

#[derive(Serialize, Deserialize)]
struct Splits {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

pub fn gen_data(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let vocab = Vocabulary::build();
    let corpus = generate_corpus(&cfg.data.corpus, &vocab, cfg.model.max_len)?;
    let [a, b, c] = cfg.data.split;
    let (train, val, test) = split_corpus(&corpus, (a, b, c), cfg.data.corpus.seed)?;
    let ids = |s: &[Sample]| s.iter().map(|x| x.id).collect();
    let data = data_dir(dir);
    fs::create_dir_all(&data).map_err(CliError::io(&data))?;
    let spec = &cfg.data.corpus;
    write_split(&data, CORPUS, &corpus, [spec.n_channels, spec.image_size, spec.image_size])?;
    write_json(
        &data.join("splits.json"),
        &Splits {
            train: ids(&train),
            val: ids(&val),
            test: ids(&test),
        },
    )?;
    println!(
        "wrote {} samples ({} train, {} val, {} test) to {}",
        corpus.len(),
        train.len(),
        val.len(),
        test.len(),
        data.display()
    );
    Ok(())
}

pub struct Data {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Loads the corpus written by `gen-data` and checks it against `cfg`.
pub fn load_data(dir: &Path, cfg: &RunConfig) -> Result<Data, CliError> {
    let data = data_dir(dir);
    if !manifest_path(&data, CORPUS).exists() {
        return Err(CliError::Sequencing(format!("no corpus in {}; run gen-data first", data.display())));
    }
    let (corpus, dims) = read_split(&data, CORPUS)?;
    let m = &cfg.model;
    if dims != [m.in_channels, m.image_size, m.image_size] {
        return Err(CliError::Usage(format!(
            "corpus images are {dims:?} but the model expects {:?}",
            [m.in_channels, m.image_size, m.image_size]
        )));
    }
    if let Some(s) = corpus.iter().find(|s| s.tokens.len() != m.max_len) {
        return Err(CliError::Usage(format!(
            "corpus captions have {} tokens but model.max_len = {}",
            s.tokens.len(),
            m.max_len
        )));
    }
    let path = data.join("splits.json");
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let splits: Splits = serde_json::from_str(&text).map_err(unimlip::Error::from)?;
    let pick = |ids: &[usize]| -> Result<Vec<Sample>, CliError> {
        ids.iter()
            .map(|&i| {
                corpus.get(i).filter(|s| s.id == i).cloned().ok_or_else(|| CliError::Artifact {
                    path: path.clone(),
                    message: format!("sample id {i} not in corpus"),
                })
            })
            .collect()
    };
    Ok(Data {
        train: pick(&splits.train)?,
        val: pick(&splits.val)?,
        test: pick(&splits.test)?,
    })
}

fn checkpoints(dir: &Path) -> PathBuf {
    dir.join("checkpoints")
}

pub fn final_checkpoint(dir: &Path) -> PathBuf {
    checkpoints(dir).join("final.ckpt")
}

/// Both phases with metrics logging and checkpoints. Returns the final state.
pub fn train_run(
    dir: &Path,
    model: Model,
    train_cfg: &TrainConfig,
    data: &[Sample],
    checkpoint_every: usize,
) -> Result<(TrainState, Vec<EpochRecord>), CliError> {
    let ckpt = checkpoints(dir);
    fs::create_dir_all(&ckpt).map_err(CliError::io(&ckpt))?;
    let writer = RefCell::new(MetricsWriter::create(dir)?);
    let failure: RefCell<Option<CliError>> = RefCell::new(None);
    let mut state = TrainState::new(model, train_cfg);
    let mut epochs = Vec::new();
    for phase in [1u8, 2] {
        let mut on_step = |r: &unimlip::trainer::StepRecord| {
            if failure.borrow().is_none() {
                if let Err(e) = writer.borrow_mut().record(r) {
                    *failure.borrow_mut() = Some(e);
                }
            }
        };
        let mut on_epoch = |s: &TrainState, e: &EpochRecord| -> unimlip::Result<()> {
            if let Some(e) = failure.borrow_mut().take() {
                return Err(unimlip::Error::Io(std::io::Error::other(e.to_string())));
            }
            writer
                .borrow_mut()
                .flush()
                .map_err(|e| unimlip::Error::Io(std::io::Error::other(e.to_string())))?;
            if checkpoint_every > 0 && (e.epoch + 1).is_multiple_of(checkpoint_every) {
                save_checkpoint(s, &ckpt.join(format!("phase{}-epoch{:03}.ckpt", e.phase, e.epoch + 1)))?;
            }
            eprintln!("phase {} epoch {} total {:.4}", e.phase, e.epoch + 1, e.mean.total);
            Ok(())
        };
        let mut hooks = Hooks {
            on_step: &mut on_step,
            on_epoch: &mut on_epoch,
        };
        epochs.extend(run_phase(&mut state, train_cfg, phase, data, &mut hooks)?);
        if let Some(e) = failure.borrow_mut().take() {
            return Err(e);
        }
        let name = if phase == 1 { "phase1.ckpt" } else { "final.ckpt" };
        save_checkpoint(&state, &ckpt.join(name))?;
    }
    writer.borrow_mut().flush()?;
    Ok((state, epochs))
}

pub fn pretrain(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(dir, cfg)?;
    let model = Model::new(cfg.model.clone(), Vocabulary::build().len(), cfg.train.seed)?;
    train_run(dir, model, &cfg.train_config(), &data.train, cfg.checkpoint.every_epochs)?;
    report::write_report(dir)
}

fn load_final(dir: &Path) -> Result<TrainState, CliError> {
    let path = final_checkpoint(dir);
    if !path.exists() {
        return Err(CliError::Sequencing(format!("{} not found; run pretrain first", path.display())));
    }
    let state = load_checkpoint(&path)?;
    Ok(state)
}

/// Image-to-text then text-to-image recall of `model` on `samples`.
pub fn retrieval(model: &Model, samples: &[Sample], cfg: &RunConfig) -> Result<(RecallReport, RecallReport), CliError> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let m = &model.config;
    let images = image_batch(&refs, m.in_channels, m.image_size)?;
    let tokens = token_batch(&refs, m.max_len)?;
    let img = model.image_embeddings(&images, cfg.eval.chunk)?;
    let txt = model.text_embeddings(&tokens, cfg.eval.chunk)?;
    Ok(retrieval_recall(&img, &txt, &cfg.eval.ks)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalArtifact {
    pub split: String,
    pub reports: Vec<RecallReport>,
}

pub fn eval_retrieval(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(dir, cfg)?;
    let state = load_final(dir)?;
    let (i2t, t2i) = retrieval(&state.model, &data.test, cfg)?;
    let artifact = RetrievalArtifact {
        split: "test".into(),
        reports: vec![i2t, t2i],
    };
    write_json(&dir.join("retrieval.json"), &artifact)?;
    let text = report::retrieval_table(&artifact);
    write_file(&dir.join("retrieval.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn probe(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(dir, cfg)?;
    let state = load_final(dir)?;
    let rep = linear_probe_auc(&state.model, &data.train, &data.test, &cfg.eval.probe)?;
    write_json(&dir.join("probe.json"), &rep)?;
    let text = report::probe_table(&rep);
    write_file(&dir.join("probe.txt"), &text)?;
    print!("{text}");
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaArtifact {
    pub pretrained: VqaReport,
    pub random_init: Option<VqaReport>,
}

/// Fine-tunes `model` and, when configured, a freshly initialized model
/// seeded with `train.seed` on the same questions.
pub fn vqa_comparison(model: &Model, data: &Data, cfg: &RunConfig) -> Result<VqaArtifact, CliError> {
    let vocab = Vocabulary::build();
    let max_len = cfg.model.max_len;
    let seed = cfg.eval.vqa.seed;
    let train_q = generate_questions(&data.train, &vocab, max_len, seed)?;
    let test_q = generate_questions(&data.test, &vocab, max_len, seed.wrapping_add(1))?;
    let run = |m: &Model| vqa_finetune_eval(m, &data.train, &train_q, &data.test, &test_q, &cfg.eval.vqa);
    let pretrained = run(model)?;
    let random_init = if cfg.eval.vqa_random_baseline {
        let fresh = Model::new(model.config.clone(), model.vocab_size, cfg.train.seed)?;
        Some(run(&fresh)?)
    } else {
        None
    };
    Ok(VqaArtifact { pretrained, random_init })
}

pub fn vqa(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(dir, cfg)?;
    let state = load_final(dir)?;
    let artifact = vqa_comparison(&state.model, &data, cfg)?;
    write_json(&dir.join("vqa.json"), &artifact)?;
    let text = report::vqa_table(&artifact);
    write_file(&dir.join("vqa.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// One finished (variant, seed) cell of the ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub seed: u64,
    pub i2t: RecallReport,
    pub t2i: RecallReport,
}

/// Directory of one (variant, seed) cell of the ablation.
pub fn ablation_cell_dir(dir: &Path, variant: &str, seed: u64) -> PathBuf {
    dir.join("ablation").join(variant).join(format!("seed-{seed}"))
}

/// Runs every configured variant for every seed on one shared corpus.
/// A cell whose `result.json` exists is reused when its echoed config
/// matches the one it would be trained with now.
pub fn ablate(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(dir, cfg)?;
    let vocab_len = Vocabulary::build().len();
    let mut cells = Vec::new();
    for &seed in &cfg.ablate.seeds {
        for variant in &cfg.ablate.variants {
            let sub = ablation_cell_dir(dir, variant, seed);
            let result = sub.join("result.json");
            let base = TrainConfig {
                seed,
                ..cfg.train_config()
            };
            let train_cfg = ablation::apply(variant, &base)
                .ok_or_else(|| CliError::Usage(format!("ablate.variants: unknown variant `{variant}`")))?;
            let mut sub_cfg = cfg.clone();
            sub_cfg.perturb = train_cfg.perturb.clone();
            sub_cfg.train = train_cfg.clone();
            let echoed = fs::read_to_string(sub.join("config.toml")).ok();
            if result.exists() && echoed.as_deref() == Some(sub_cfg.to_toml().as_str()) {
                let text = fs::read_to_string(&result).map_err(CliError::io(&result))?;
                cells.push(serde_json::from_str(&text).map_err(unimlip::Error::from)?);
                continue;
            }
            fs::create_dir_all(&sub).map_err(CliError::io(&sub))?;
            write_config(&sub, &sub_cfg)?;
            eprintln!("ablation: {variant}, seed {seed}");
            let model = Model::new(cfg.model.clone(), vocab_len, seed)?;
            let (state, _) = train_run(&sub, model, &train_cfg, &data.train, 0)?;
            let (i2t, t2i) = retrieval(&state.model, &data.test, cfg)?;
            let cell = AblationCell {
                variant: variant.clone(),
                seed,
                i2t,
                t2i,
            };
            write_json(&result, &cell)?;
            cells.push(cell);
        }
    }
    let summary = report::AblationSummary::from_cells(&cfg.ablate.variants, &cells);
    write_json(&dir.join("ablation.json"), &summary)?;
    let text = report::ablation_table(&summary);
    write_file(&dir.join("ablation.txt"), &text)?;
    print!("{text}");
    report::write_report(dir)
}
