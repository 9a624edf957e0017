//! The `merlot` command line.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autodiff::{KlDirection, Primitive};
use crate::data::{generate_synthetic, parse_records, split_dataset, write_records, Format, SyntheticSpec, TrafficRecord};
use crate::metrics::{dump_embeddings, evaluate, EvalReport, ModelClassifier, MoeClassifier};
use crate::model::{init_student_from_teacher, load_checkpoint, Checkpoint, ModelConfig};
use crate::moe::{save_manifest, train_gate, ExpertEntry, ExpertManifest, MixtureOfExperts, MANIFEST_VERSION};
use crate::training::{distill, make_examples, train_supervised, write_loss_trace, EpochStats, TrainConfig};
use crate::verify::{run_suite, STEP, TOLERANCE};

/// Contents of the `--config` file. Every field is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Render prompts with the contextual fields.
    pub cfe: bool,
    pub deterministic: bool,
    /// Train share of the stratified split.
    pub split_ratio: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cfe: true,
            deterministic: false,
            split_ratio: 0.95,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            bail!("split_ratio {} outside (0, 1)", self.split_ratio);
        }
        self.train.validate()?;
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "merlot", version, about = "Distilled transformer experts behind a hard gate")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single-threaded, byte-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its 95:5 split.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Samples per task, overriding the spec.
        #[arg(long)]
        samples: Option<usize>,
        /// Noise of every task, overriding the spec.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a task model on cross-entropy.
    TrainTeacher {
        #[command(flatten)]
        io: TrainIo,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Distil a teacher into a layer-pruned student.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        io: TrainIo,
        /// Student depth; defaults to the teacher's.
        #[arg(long)]
        layers: Option<usize>,
        /// Weight of the soft term.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        temp: Option<f64>,
        /// `student_teacher` or `teacher_student`.
        #[arg(long)]
        kl_direction: Option<String>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train the gate on task identity.
    TrainGate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated task order; defaults to the sorted task ids.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Write an expert manifest.
    Manifest {
        #[arg(long)]
        gate: Option<PathBuf>,
        /// `TASK=CHECKPOINT`, repeatable.
        #[arg(long = "expert", required = true)]
        experts: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_cfe: bool,
    },
    /// Score a model or a manifest on labelled data.
    Eval {
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        model: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep only records of this task.
        #[arg(long)]
        task: Option<String>,
        /// Also write per-record predictions (manifest only).
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        no_cfe: bool,
    },
    /// Route and classify records through a manifest.
    Classify {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every backward rule.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_sign_flip: Option<String>,
    },
    /// Dump final hidden states for external plotting.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_cfe: bool,
    },
}

#[derive(Debug, Args)]
struct TrainIo {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep only records of this task.
    #[arg(long)]
    task: Option<String>,
    /// Loss trace path; defaults to `<out>.loss.tsv`.
    #[arg(long)]
    loss_trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelFlags {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    max_seq: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Render prompts without the contextual fields.
    #[arg(long)]
    no_cfe: bool,
    /// Per-epoch progress on stderr.
    #[arg(long)]
    progress: bool,
}

impl ModelFlags {
    fn apply(&self, m: &mut ModelConfig) {
        set(&mut m.n_layers, self.layers);
        set(&mut m.hidden_dim, self.hidden);
        set(&mut m.n_heads, self.heads);
        set(&mut m.max_seq, self.max_seq);
        set(&mut m.dropout, self.dropout);
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.train.epochs, self.epochs);
        set(&mut cfg.train.batch_size, self.batch_size);
        set(&mut cfg.train.learning_rate, self.lr);
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        cfg.model.seed = cfg.seed;
        cfg.cfe &= !self.no_cfe;
        cfg.train.progress |= self.progress;
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.deterministic |= cli.deterministic;
    match cli.command {
        Command::GenSynth { out, seed, samples, noise } => {
            set(&mut cfg.seed, seed);
            for t in &mut cfg.synthetic.tasks {
                set(&mut t.samples, samples);
                set(&mut t.noise, noise);
            }
            echo(&cfg)?;
            gen_synth(&cfg, &out)
        }
        Command::TrainTeacher { io, model, train } => {
            model.apply(&mut cfg.model);
            train.apply(&mut cfg);
            let records = task_records(&io.data, io.task.as_deref())?;
            let classes = sorted_labels(&records);
            cfg.model.n_classes = classes.len();
            echo(&cfg)?;
            let data = make_examples(&records, cfg.cfe, |r| classes.iter().position(|c| *c == r.label))?;
            let (params, trace) = train_supervised(&data, &cfg.model, &cfg.train)?;
            finish_training(Checkpoint::new(params, classes)?, &trace, &io.out, io.loss_trace.as_deref())
        }
        Command::Distill {
            teacher,
            io,
            layers,
            alpha,
            temp,
            kl_direction,
            train,
        } => {
            train.apply(&mut cfg);
            set(&mut cfg.train.alpha, alpha);
            set(&mut cfg.train.temperature, temp);
            if let Some(d) = kl_direction {
                cfg.train.kl_direction = match d.as_str() {
                    "student_teacher" => KlDirection::StudentTeacher,
                    "teacher_student" => KlDirection::TeacherStudent,
                    other => bail!("unknown KL direction `{other}`"),
                };
            }
            let t = load_checkpoint(&teacher).with_context(|| format!("teacher {}", teacher.display()))?;
            cfg.model = t.params.config().clone();
            let keep = layers.unwrap_or(cfg.model.n_layers);
            cfg.model.n_layers = keep;
            echo(&cfg)?;
            let records = task_records(&io.data, io.task.as_deref())?;
            let data = make_examples(&records, cfg.cfe, |r| t.classes.iter().position(|c| *c == r.label))?;
            let student = init_student_from_teacher(&t.params, keep)?;
            let (params, trace) = distill(&t.params, student, &data, &cfg.train)?;
            finish_training(Checkpoint::new(params, t.classes.clone())?, &trace, &io.out, io.loss_trace.as_deref())
        }
        Command::TrainGate {
            data,
            out,
            tasks,
            model,
            train,
        } => {
            model.apply(&mut cfg.model);
            train.apply(&mut cfg);
            let records = read_records(&data)?;
            let tasks = if tasks.is_empty() {
                records.iter().map(|r| r.task_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
            } else {
                tasks
            };
            cfg.model.n_classes = tasks.len().max(2);
            echo(&cfg)?;
            match train_gate(&records, &tasks, &cfg.model, &cfg.train, cfg.cfe)? {
                Some((ck, trace)) => finish_training(ck, &trace, &out, None),
                None => {
                    eprintln!("single task `{}`: no gate needed", tasks[0]);
                    Ok(0)
                }
            }
        }
        Command::Manifest {
            gate,
            experts,
            out,
            no_cfe,
        } => {
            echo(&cfg)?;
            write_manifest(gate.as_deref(), &experts, &out, cfg.cfe && !no_cfe)
        }
        Command::Eval {
            model,
            manifest,
            data,
            out,
            task,
            predictions,
            no_cfe,
        } => {
            cfg.cfe &= !no_cfe;
            echo(&cfg)?;
            let records = task_records(&data, task.as_deref())?;
            let report = match (model, manifest) {
                (Some(m), _) => {
                    let ck = load_checkpoint(&m).with_context(|| format!("model {}", m.display()))?;
                    evaluate(&ModelClassifier { checkpoint: &ck, cfe: cfg.cfe }, &records)?
                }
                (None, Some(m)) => {
                    let mut moe = MixtureOfExperts::load(&m)?;
                    moe.manifest.cfe &= !no_cfe;
                    if let Some(p) = predictions {
                        write_predictions(&moe, &records, &p)?;
                    }
                    evaluate(&MoeClassifier::new(&moe), &records)?
                }
                (None, None) => bail!("one of --model or --manifest is required"),
            };
            write_report(&report, &out)?;
            println!("{}", report.summary());
            Ok(0)
        }
        Command::Classify { manifest, input, out } => {
            echo(&cfg)?;
            let moe = MixtureOfExperts::load(&manifest)?;
            let records = task_records(&input, None)?;
            write_predictions(&moe, &records, &out)?;
            Ok(0)
        }
        Command::Gradcheck { seed, inject_sign_flip } => {
            let flip = match inject_sign_flip {
                Some(name) => Some(Primitive::from_name(&name).ok_or_else(|| anyhow!("unknown primitive `{name}`"))?),
                None => None,
            };
            gradcheck(seed, flip)
        }
        Command::Embed {
            model,
            data,
            out,
            no_cfe,
        } => {
            cfg.cfe &= !no_cfe;
            echo(&cfg)?;
            let ck = load_checkpoint(&model).with_context(|| format!("model {}", model.display()))?;
            let records = read_records(&data)?;
            let mut w = BufWriter::new(File::create(&out)?);
            let n = dump_embeddings(&ck.params, &records, cfg.cfe, &mut w)?;
            w.flush()?;
            eprintln!("wrote {n} embeddings to {}", out.display());
            Ok(0)
        }
    }
}

/// The effective configuration, on stderr, before any work.
fn echo(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let text = toml::to_string(cfg)?;
    eprintln!("# effective config\n{text}");
    Ok(())
}

fn format_of(path: &Path) -> Format {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") => Format::Tsv,
        _ => Format::Jsonl,
    }
}

/// Reads records, reporting and skipping malformed lines.
fn read_records(path: &Path) -> Result<Vec<TrafficRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let parsed = parse_records(BufReader::new(f), format_of(path)).with_context(|| format!("reading {}", path.display()))?;
    for e in &parsed.errors {
        eprintln!("{}:{}: skipped: {}", path.display(), e.line, e.message);
    }
    Ok(parsed.records)
}

fn task_records(path: &Path, task: Option<&str>) -> Result<Vec<TrafficRecord>> {
    let mut records = read_records(path)?;
    if let Some(t) = task {
        records.retain(|r| r.task_id == t);
        if records.is_empty() {
            bail!("no records of task `{t}` in {}", path.display());
        }
    }
    if records.is_empty() {
        bail!("{} holds no records", path.display());
    }
    Ok(records)
}

fn sorted_labels(records: &[TrafficRecord]) -> Vec<String> {
    records.iter().map(|r| r.label.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

fn gen_synth(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let records = generate_synthetic(&cfg.synthetic, cfg.seed)?;
    let (train, test) = split_dataset(&records, cfg.split_ratio, cfg.seed)?;
    std::fs::create_dir_all(out)?;
    for (name, set) in [("train.jsonl", &train), ("test.jsonl", &test)] {
        let mut w = BufWriter::new(File::create(out.join(name))?);
        write_records(&mut w, set, Format::Jsonl)?;
        w.flush()?;
    }
    std::fs::write(out.join("spec.toml"), toml::to_string(&cfg.synthetic)?)?;
    eprintln!("wrote {} train and {} test records to {}", train.len(), test.len(), out.display());
    Ok(0)
}

fn finish_training(ck: Checkpoint, trace: &[EpochStats], out: &Path, trace_path: Option<&Path>) -> Result<i32> {
    ck.save(out)?;
    let default_trace = PathBuf::from(format!("{}.loss.tsv", out.display()));
    let mut w = BufWriter::new(File::create(trace_path.unwrap_or(&default_trace))?);
    write_loss_trace(&mut w, trace)?;
    w.flush()?;
    if let Some(last) = trace.last() {
        eprintln!(
            "saved {} after {} epochs (loss {:.5}, train acc {:.4})",
            out.display(),
            last.epoch,
            last.mean_loss,
            last.accuracy
        );
    }
    Ok(0)
}

/// `path` as written into a manifest in `dir`: relative when it lies below.
fn manifest_path(dir: &Path, path: &Path) -> Result<PathBuf> {
    let abs = path.canonicalize().with_context(|| format!("checkpoint {}", path.display()))?;
    let base = dir.canonicalize()?;
    Ok(abs.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(abs))
}

fn write_manifest(gate: Option<&Path>, experts: &[String], out: &Path, cfe: bool) -> Result<i32> {
    let mut by_task = Vec::new();
    for e in experts {
        let (task, path) = e.split_once('=').ok_or_else(|| anyhow!("--expert wants TASK=CHECKPOINT, got `{e}`"))?;
        by_task.push((task.to_string(), PathBuf::from(path)));
    }
    let dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    let order: Vec<String> = match gate {
        Some(g) => load_checkpoint(g).with_context(|| format!("gate {}", g.display()))?.classes,
        None => by_task.iter().map(|(t, _)| t.clone()).collect(),
    };
    if order.len() != by_task.len() {
        bail!("gate covers {} tasks but {} experts were given", order.len(), by_task.len());
    }
    let mut entries = Vec::new();
    for (id, task) in order.iter().enumerate() {
        let (_, path) = by_task
            .iter()
            .find(|(t, _)| t == task)
            .ok_or_else(|| anyhow!("no expert given for gate task `{task}`"))?;
        let ck = load_checkpoint(path).with_context(|| format!("expert {}", path.display()))?;
        entries.push(ExpertEntry {
            id,
            task_id: task.clone(),
            checkpoint: manifest_path(&dir, path)?,
            classes: ck.classes,
        });
    }
    let manifest = ExpertManifest {
        version: MANIFEST_VERSION,
        cfe,
        gate: gate.map(|g| manifest_path(&dir, g)).transpose()?,
        experts: entries,
        root: dir,
    };
    MixtureOfExperts::from_manifest(manifest.clone())?;
    save_manifest(&manifest, out)?;
    eprintln!("wrote {}", out.display());
    Ok(0)
}

fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    std::fs::write(out, report.to_json())?;
    Ok(())
}

/// One line per record: expert id, class name, posterior.
fn write_predictions(moe: &MixtureOfExperts, records: &[TrafficRecord], out: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(out)?);
    for c in moe.classify_all(records)? {
        writeln!(w, "{}\t{}\t{}", c.expert, c.class, c.posterior)?;
    }
    w.flush()?;
    Ok(())
}

fn gradcheck(seed: u64, flip: Option<Primitive>) -> Result<i32> {
    let report = run_suite(seed, flip)?;
    println!("finite differences: h={STEP:e}, tolerance {TOLERANCE:e} (f64)");
    for c in &report.checks {
        println!(
            "{:<24} max rel error {:.3e}  {}",
            c.name,
            c.max_rel_error,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    let worst = report.worst();
    if report.passed() {
        println!("PASS: worst {worst:.3e}");
        Ok(0)
    } else {
        println!("FAIL: worst {worst:.3e}");
        Ok(1)
    }
}
