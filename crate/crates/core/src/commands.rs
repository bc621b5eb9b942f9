//! End-to-end commands behind the `g2p` binary.
//!
//! Every command reads and writes explicit paths. Files are replaced
//! atomically, and every artifact carries the seed and the materialized
//! configuration that produced it.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::codec::{encode, LanguageTag};
use crate::decode::{batch_decode, DecodeConfig};
use crate::error::{Error, ErrorKind, Result};
use crate::lexicon::{self, eligible_languages, read_dictionary, Lexicon, SplitSpec};
use crate::metrics::{evaluate, EvalReport};
use crate::nn::{ModelConfig, ModelParameters};
use crate::train::{derive_seed, run, Prepared, TrainConfig, TrainReport, TrainState};

pub const INGEST_MANIFEST: &str = "manifest.json";
pub const SPLIT_MANIFEST: &str = "splits.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";
pub const LAST_CHECKPOINT: &str = "state/last.ckpt";
pub const LAST_OPTIMIZER: &str = "state/last.adam";

/// Eligibility threshold: a language needs strictly more entries than this.
pub const DEFAULT_MIN_ENTRIES: usize = 3000;

/// Process exit code for a failure class.
pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Io => 1,
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Canonical per-language TSVs written by `ingest`.
    pub lexicon_dir: Option<PathBuf>,
    /// Train/dev/test files written by `partition`.
    pub split_dir: Option<PathBuf>,
    /// Input checkpoint for `finetune`, `predict` and `eval`.
    pub checkpoint: Option<PathBuf>,
    /// Where `train`, `finetune` and `eval` write their artifacts.
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub split_seed: u64,
    pub low_resource: bool,
    pub min_entries: usize,
    /// Continue from the periodic checkpoint in `output_dir` when there is one.
    pub resume: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lexicon_dir: None,
            split_dir: None,
            checkpoint: None,
            output_dir: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            split_seed: 0,
            low_resource: false,
            min_entries: DEFAULT_MIN_ENTRIES,
            resume: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()
    }

    /// Pretty JSON with every field present.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn split_spec(&self) -> SplitSpec {
        if self.low_resource {
            SplitSpec::low_resource(self.split_seed)
        } else {
            SplitSpec::standard(self.split_seed)
        }
    }

    fn required<'a>(&self, value: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::Config(format!("`{name}` is not set")))
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_lexicon(path: &Path, lexicon: &Lexicon) -> Result<()> {
    write_atomic(path, lexicon.to_tsv().as_bytes())
}

fn read_lexicon(path: &Path, language: &LanguageTag) -> Result<Lexicon> {
    Ok(read_dictionary(path, language)?.lexicon)
}

// ---------------------------------------------------------------- ingest

/// One dictionary file: `LANG:SOURCE:PATH` on the command line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestInput {
    pub language: LanguageTag,
    pub source: String,
    pub path: PathBuf,
}

impl std::str::FromStr for IngestInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.splitn(3, ':');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(lang), Some(source), Some(path)) if !source.is_empty() && !path.is_empty() => {
                Ok(IngestInput {
                    language: LanguageTag::new(lang)?,
                    source: source.to_owned(),
                    path: PathBuf::from(path),
                })
            }
            _ => Err(Error::Config(format!(
                "expected LANG:SOURCE:PATH, found {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub source: String,
    pub path: PathBuf,
    pub entries: usize,
    pub total_lines: usize,
    pub malformed_lines: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestedLanguage {
    pub language: LanguageTag,
    pub file: String,
    pub entries: usize,
    pub pairs: usize,
    pub sources: Vec<SourceStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestManifest {
    pub priority: Vec<String>,
    pub languages: Vec<IngestedLanguage>,
}

impl IngestManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INGEST_MANIFEST);
        if !path.exists() {
            return Err(Error::InsufficientData(format!(
                "no ingest manifest at {}",
                path.display()
            )));
        }
        read_json(&path)
    }

    pub fn lexicons(&self, dir: &Path) -> Result<Vec<Lexicon>> {
        self.languages
            .iter()
            .map(|l| read_lexicon(&dir.join(&l.file), &l.language))
            .collect()
    }
}

/// Parses every input, merges per language by source priority and writes one
/// canonical TSV per language plus a manifest.
pub fn ingest(inputs: &[IngestInput], priority: &[String], out_dir: &Path) -> Result<IngestManifest> {
    if inputs.is_empty() {
        return Err(Error::InsufficientData("no dictionaries to ingest".into()));
    }
    let mut by_language: BTreeMap<LanguageTag, Vec<(&IngestInput, Lexicon, SourceStats)>> =
        BTreeMap::new();
    for input in inputs {
        let parsed = read_dictionary(&input.path, &input.language)?;
        let stats = SourceStats {
            source: input.source.clone(),
            path: input.path.clone(),
            entries: parsed.lexicon.len(),
            total_lines: parsed.total_lines,
            malformed_lines: parsed.malformed_lines.len(),
        };
        by_language
            .entry(input.language.clone())
            .or_default()
            .push((input, parsed.lexicon, stats));
    }
    let priority_refs: Vec<&str> = priority.iter().map(String::as_str).collect();
    let mut languages = Vec::new();
    for (language, group) in by_language {
        let sources: Vec<(&str, &Lexicon)> =
            group.iter().map(|(i, l, _)| (i.source.as_str(), l)).collect();
        let merged = lexicon::merge(&sources, &priority_refs)?;
        let file = format!("{language}.tsv");
        write_lexicon(&out_dir.join(&file), &merged)?;
        languages.push(IngestedLanguage {
            language,
            file,
            entries: merged.len(),
            pairs: merged.pair_count(),
            sources: group.into_iter().map(|(_, _, s)| s).collect(),
        });
    }
    let manifest = IngestManifest {
        priority: priority.to_vec(),
        languages,
    };
    write_json(&out_dir.join(INGEST_MANIFEST), &manifest)?;
    Ok(manifest)
}

// ------------------------------------------------------------- partition

/// One split file, relative to the split directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPart {
    pub file: String,
    pub words: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitLanguage {
    pub language: LanguageTag,
    pub train: SplitPart,
    pub dev: SplitPart,
    pub test: SplitPart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IneligibleLanguage {
    pub language: LanguageTag,
    pub entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub min_entries: usize,
    pub languages: Vec<SplitLanguage>,
    pub ineligible: Vec<IneligibleLanguage>,
}

pub struct SplitData {
    pub language: LanguageTag,
    pub train: Lexicon,
    pub dev: Lexicon,
    pub test: Lexicon,
}

impl SplitManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SPLIT_MANIFEST);
        if !path.exists() {
            return Err(Error::InsufficientData(format!(
                "no split manifest at {}",
                path.display()
            )));
        }
        read_json(&path)
    }

    /// Reads the splits of `only` (or of every language).
    pub fn read(&self, dir: &Path, only: Option<&[LanguageTag]>) -> Result<Vec<SplitData>> {
        if let Some(wanted) = only {
            if let Some(missing) = wanted
                .iter()
                .find(|t| !self.languages.iter().any(|l| &l.language == *t))
            {
                return Err(Error::InsufficientData(format!("no splits for {missing}")));
            }
        }
        self.languages
            .iter()
            .filter(|l| only.map_or(true, |w| w.contains(&l.language)))
            .map(|l| {
                let read = |part: &SplitPart| read_lexicon(&dir.join(&part.file), &l.language);
                Ok(SplitData {
                    language: l.language.clone(),
                    train: read(&l.train)?,
                    dev: read(&l.dev)?,
                    test: read(&l.test)?,
                })
            })
            .collect()
    }
}

/// Splits every language with more than `min_entries` words; the rest are listed as ineligible.
pub fn partition(
    lexicon_dir: &Path,
    out_dir: &Path,
    spec: SplitSpec,
    min_entries: usize,
) -> Result<SplitManifest> {
    let ingested = IngestManifest::load(lexicon_dir)?;
    let lexicons = ingested.lexicons(lexicon_dir)?;
    let eligible = eligible_languages(&lexicons, min_entries);
    let mut languages = Vec::new();
    let mut ineligible = Vec::new();
    for lex in &lexicons {
        if !eligible.contains(lex.language()) {
            ineligible.push(IneligibleLanguage {
                language: lex.language().clone(),
                entries: lex.len(),
            });
            continue;
        }
        let split = lexicon::partition(lex, spec)?;
        let write = |name: &str, part: &Lexicon| -> Result<SplitPart> {
            let file = format!("{}/{name}.tsv", lex.language());
            write_lexicon(&out_dir.join(&file), part)?;
            Ok(SplitPart {
                file,
                words: part.len(),
            })
        };
        languages.push(SplitLanguage {
            language: lex.language().clone(),
            train: write("train", &split.train)?,
            dev: write("dev", &split.dev)?,
            test: write("test", &split.test)?,
        });
    }
    let manifest = SplitManifest {
        spec,
        min_entries,
        languages,
        ineligible,
    };
    write_json(&out_dir.join(SPLIT_MANIFEST), &manifest)?;
    Ok(manifest)
}

// --------------------------------------------------------- train / finetune

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateExtra {
    run_config: RunConfig,
    report: TrainReport,
}

/// What `train` and `finetune` leave behind.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: RunConfig,
    pub report: TrainReport,
    pub model_path: PathBuf,
}

/// Fills in the settings implied by the data: a single training language
/// never sees the wildcard tag, so its masking rate is pinned to zero.
pub fn materialize(config: &RunConfig, manifest: &SplitManifest) -> RunConfig {
    let mut cfg = config.clone();
    let count = match &cfg.train.language_filter {
        Some(filter) => filter.len(),
        None => manifest.languages.len(),
    };
    if count == 1 {
        cfg.train.unk_mask_rate = 0.0;
    }
    cfg
}

pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    train_from(config, None)
}

/// Fine-tunes the checkpoint named in `config.checkpoint` with a fresh optimizer.
pub fn finetune(config: &RunConfig) -> Result<TrainOutcome> {
    let path = config.required(&config.checkpoint, "checkpoint")?;
    let pretrained = Checkpoint::load(path)?;
    pretrained.header.model_config.ensure_matches(&config.model)?;
    train_from(config, Some(pretrained.to_params::<f32>()?))
}

fn train_from(config: &RunConfig, start: Option<ModelParameters<f32>>) -> Result<TrainOutcome> {
    config.validate()?;
    let split_dir = config.required(&config.split_dir, "split_dir")?;
    let out_dir = config.required(&config.output_dir, "output_dir")?.to_path_buf();
    let manifest = SplitManifest::load(split_dir)?;
    let cfg = materialize(config, &manifest);
    let splits = manifest.read(split_dir, cfg.train.language_filter.as_deref())?;
    let train: Vec<Lexicon> = splits.iter().map(|s| s.train.clone()).collect();
    let dev: Vec<Lexicon> = splits.iter().map(|s| s.dev.clone()).collect();
    let data = Prepared::new(&cfg.model, &cfg.train, &train, &dev)?;
    write_json(&out_dir.join(CONFIG_FILE), &cfg)?;

    let state = match resume_state(&cfg, &out_dir)? {
        Some(state) => state,
        None => {
            let params = match start {
                Some(p) => p,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, &[0]));
                    ModelParameters::init(&cfg.model, &mut rng)?
                }
            };
            TrainState::fresh(params)
        }
    };

    let state = run(&cfg.train, &data, state, |s| save_state(&cfg, &out_dir, s))?;
    save_state(&cfg, &out_dir, &state)?;
    Ok(TrainOutcome {
        config: cfg,
        report: state.report,
        model_path: out_dir.join(MODEL_FILE),
    })
}

fn save_state(cfg: &RunConfig, out_dir: &Path, state: &TrainState<f32>) -> Result<()> {
    let extra = serde_json::to_value(StateExtra {
        run_config: cfg.clone(),
        report: state.report.clone(),
    })?;
    let step = state.optimizer.step;
    Checkpoint::from_params(&state.best, Some(&cfg.train), step, extra.clone())
        .save(&out_dir.join(MODEL_FILE))?;
    Checkpoint::from_optimizer(&state.optimizer).save(&out_dir.join(LAST_OPTIMIZER))?;
    Checkpoint::from_params(&state.params, Some(&cfg.train), step, extra)
        .save(&out_dir.join(LAST_CHECKPOINT))?;
    write_json(&out_dir.join(REPORT_FILE), &state.report)
}

fn resume_state(cfg: &RunConfig, out_dir: &Path) -> Result<Option<TrainState<f32>>> {
    let last_path = out_dir.join(LAST_CHECKPOINT);
    if !cfg.resume || !last_path.exists() {
        return Ok(None);
    }
    let last = Checkpoint::load(&last_path)?;
    let extra: StateExtra = serde_json::from_value(last.header.extra.clone())
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", last_path.display())))?;
    let budget_free = |t: &TrainConfig| TrainConfig {
        max_steps: None,
        ..t.clone()
    };
    if budget_free(&extra.run_config.train) != budget_free(&cfg.train)
        || extra.run_config.model != cfg.model
    {
        return Err(Error::Config(
            "the saved run used a different model or training config".into(),
        ));
    }
    let optimizer = Checkpoint::load(&out_dir.join(LAST_OPTIMIZER))?.to_optimizer::<f32>()?;
    if optimizer.step != last.header.step {
        return Err(Error::Checkpoint("optimizer state is from another step".into()));
    }
    let best = Checkpoint::load(&out_dir.join(MODEL_FILE))?.to_params::<f32>()?;
    Ok(Some(TrainState {
        params: last.to_params()?,
        optimizer,
        report: extra.report,
        best,
    }))
}

// ---------------------------------------------------------------- predict

/// Loads inference parameters, checking the CRC.
pub fn load_model(path: &Path) -> Result<ModelParameters<f32>> {
    Checkpoint::load(path)?.to_params()
}

/// Writes `word<TAB>pronunciation<TAB>logprob` per non-blank input line, in input order.
pub fn predict<R: BufRead, W: Write>(
    params: &ModelParameters<f32>,
    input: R,
    tag: &LanguageTag,
    decode: &DecodeConfig,
    mut out: W,
) -> Result<usize> {
    decode.validate()?;
    let mut words = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<input>", e))?;
        let word = line.trim();
        if !word.is_empty() {
            words.push(word.to_owned());
        }
    }
    let sources = words
        .iter()
        .map(|w| encode(w, Some(tag)))
        .collect::<Result<Vec<_>>>()?;
    for (word, result) in words.iter().zip(batch_decode(params, &sources, decode)) {
        let best = result
            .map_err(|e| Error::InvalidInput(format!("{word:?}: {e}")))?
            .into_iter()
            .next()
            .ok_or_else(|| Error::InvalidInput(format!("{word:?}: no hypothesis")))?;
        writeln!(out, "{word}\t{}\t{:.6}", best.text, best.log_prob)
            .map_err(|e| Error::io("<output>", e))?;
    }
    out.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(words.len())
}

// ------------------------------------------------------------------- eval

pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_TEXT: &str = "eval.txt";

/// Test-set PER/WER for the checkpoint's languages (or `languages`), optionally
/// with the rank correlation between training size and PER.
pub fn eval(
    config: &RunConfig,
    languages: Option<&[LanguageTag]>,
    correlate: bool,
) -> Result<EvalReport> {
    config.decode.validate()?;
    let ckpt_path = config.required(&config.checkpoint, "checkpoint")?;
    let split_dir = config.required(&config.split_dir, "split_dir")?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let params = ckpt.to_params::<f32>()?;
    let manifest = SplitManifest::load(split_dir)?;
    let trained_on = ckpt
        .header
        .train_config
        .as_ref()
        .and_then(|t| t.language_filter.clone());
    let only = languages.map(<[LanguageTag]>::to_vec).or(trained_on);
    let splits = manifest.read(split_dir, only.as_deref())?;
    if splits.is_empty() {
        return Err(Error::InsufficientData("no test languages".into()));
    }
    let test: Vec<Lexicon> = splits.iter().map(|s| s.test.clone()).collect();
    let mut report = evaluate(&params, &test, &config.decode)?;
    if correlate {
        let sizes: Vec<(LanguageTag, usize)> = splits
            .iter()
            .map(|s| (s.language.clone(), s.train.len()))
            .collect();
        report.correlate(&sizes)?;
    }
    if let Some(out_dir) = &config.output_dir {
        write_json(&out_dir.join(EVAL_JSON), &report)?;
        write_atomic(&out_dir.join(EVAL_TEXT), report.to_table().as_bytes())?;
    }
    Ok(report)
}
