//! Artifact orchestration for the command-line stages.
//!
//! Every run lives in `<root>/<artifact fingerprint>/`. Stages read their
//! inputs from there, check lineage (each artifact names the ids of what it
//! was built from) and only then write, atomically.
//!
//! | file | written by | records |
//! |---|---|---|
//! | `corpus.bin`, `stats.txt` | ingest | |
//! | `backbone.ckpt`, `pretrain_log.tsv` | pretrain | corpus id, fingerprint |
//! | `bank.bin`, `index.bin` | build-bank | backbone id; bank id |
//! | `ram.ckpt`, `raft_log.tsv` | raft | corpus, backbone, bank, index ids |
//! | `reports/*.txt`, `reports/*.jsonl` | eval, ablate | all of the above |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::ablation::{self, SweepConfig, SweepMode, Trained};
use crate::binio::write_atomic;
use crate::checkpoint::{self, checkpoint_id, Checkpoint};
use crate::config::RunConfig;
use crate::data::{ingest_interactions, leave_one_out_split, InteractionLog, Split};
use crate::encoder::Backbone;
use crate::eval::{evaluate, Metrics, MetricsReport, ReportRow, DEFAULT_CUTOFFS};
use crate::memory::{build_reference_set, encode_bank, IvfIndex, Memory, MemoryBank};
use crate::pretrain::{pretrain, StopReason};
use crate::ram::{raft_train, AugmentedModel, Ram};
use crate::{Error, ItemId, Result};

/// Environment variable naming the artifact root; defaults to `./artifacts`.
pub const ARTIFACT_ROOT_ENV: &str = "RASEREC_ARTIFACTS";

pub const CORPUS: &str = "corpus.bin";
pub const STATS: &str = "stats.txt";
pub const BACKBONE: &str = "backbone.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.tsv";
pub const BANK: &str = "bank.bin";
pub const INDEX: &str = "index.bin";
pub const RAM: &str = "ram.ckpt";
pub const RAFT_LOG: &str = "raft_log.tsv";
pub const REPORTS: &str = "reports";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Drift,
    Partition,
    Noise,
    Sweep,
}

impl AblationKind {
    pub const ALL: [AblationKind; 4] = [Self::Drift, Self::Partition, Self::Noise, Self::Sweep];

    pub fn name(self) -> &'static str {
        match self {
            Self::Drift => "drift",
            Self::Partition => "partition",
            Self::Noise => "noise",
            Self::Sweep => "sweep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Command {
    Ingest,
    Pretrain,
    BuildBank,
    Raft,
    Eval,
    Ablate(AblationKind),
    /// Raw item names, oldest first.
    Recommend(Vec<String>),
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::MissingDependency(_) => 3,
        Error::LineageMismatch(_) => 4,
        Error::SelfCheck(_) => 5,
        _ => 1,
    }
}

pub fn artifact_root() -> PathBuf {
    std::env::var_os(ARTIFACT_ROOT_ENV).map_or_else(|| PathBuf::from("artifacts"), PathBuf::from)
}

fn check(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::SelfCheck(what()))
    }
}

fn lineage(expected: &str, found: Option<&str>, what: &str) -> Result<()> {
    match found {
        Some(f) if f == expected => Ok(()),
        other => Err(Error::LineageMismatch(format!(
            "{what}: expected {expected}, found {}",
            other.unwrap_or("nothing")
        ))),
    }
}

struct Corpus {
    log: InteractionLog,
    id: String,
    split: Split,
}

struct Loaded {
    corpus: Corpus,
    backbone: Backbone,
    backbone_id: String,
    memory: Memory,
    bank_id: String,
    index_id: String,
}

pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
}

impl Run {
    /// Validates `config` and places the run under `root`.
    pub fn new(config: RunConfig, root: &Path) -> Result<Self> {
        config.validate()?;
        let dir = root.join(config.artifact_fingerprint());
        Ok(Self { config, dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, names: &[&str], stage: &str) -> Result<()> {
        let missing: Vec<&str> = names.iter().copied().filter(|n| !self.path(n).is_file()).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingDependency(format!(
                "{stage} needs {} in {}",
                missing.join(", "),
                self.dir.display()
            )))
        }
    }

    fn base_meta(&self, kind: &str) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("kind".to_string(), kind.to_string()),
            ("fingerprint".to_string(), self.config.artifact_fingerprint()),
        ])
    }

    /// Runs one command. Progress goes to `log`; the returned text is the
    /// command's result for standard output.
    pub fn execute(&self, command: &Command, log: &mut dyn FnMut(&str)) -> Result<String> {
        match command {
            Command::Ingest => self.ingest(log),
            Command::Pretrain => self.pretrain(log),
            Command::BuildBank => self.build_bank(log),
            Command::Raft => self.raft(log),
            Command::Eval => self.eval(log),
            Command::Ablate(kind) => self.ablate(*kind, log),
            Command::Recommend(items) => self.recommend(items),
        }
    }

    fn ingest(&self, log: &mut dyn FnMut(&str)) -> Result<String> {
        let data = self
            .config
            .data_path()
            .ok_or_else(|| Error::Config("data_path is not set".into()))?;
        let min_core = self.config.usize("min_core");
        log(&format!("reading {}", data.display()));
        let corpus = ingest_interactions(&data, min_core)?;
        self_check_corpus(&corpus, min_core)?;
        std::fs::create_dir_all(&self.dir)?;
        let id = corpus.save(&self.path(CORPUS))?;
        let stats = corpus.stats().to_string();
        write_atomic(&self.path(STATS), stats.as_bytes())?;
        Ok(format!("{stats}corpus {id}\n"))
    }

    fn load_corpus(&self) -> Result<Corpus> {
        let (log, id) = InteractionLog::load(&self.path(CORPUS))?;
        let split = leave_one_out_split(&log);
        Ok(Corpus { log, id, split })
    }

    fn new_backbone(&self, num_items: usize) -> Result<Backbone> {
        Backbone::new(self.config.encoder(num_items), self.config.seed())
    }

    fn pretrain(&self, log: &mut dyn FnMut(&str)) -> Result<String> {
        self.require(&[CORPUS], "pretrain")?;
        let corpus = self.load_corpus()?;
        let backbone = self.new_backbone(corpus.log.num_items())?;
        log(&format!("pretraining {} parameters", backbone.num_parameters()));
        let cfg = self.config.pretrain();
        let out = pretrain(backbone, &corpus.split, &cfg, |e| {
            log(&format!(
                "epoch {} rec {:.4} val HR@10 {:.4} NDCG@10 {:.4}",
                e.epoch, e.rec, e.val_hr10, e.val_ndcg10
            ))
        })?;
        check(
            out.backbone.store.params().iter().all(|p| p.value.data().iter().all(|x| x.is_finite())),
            || "backbone has non-finite parameters".into(),
        )?;
        if let Some(best) = out.log.best() {
            let top = out
                .log
                .epochs
                .iter()
                .all(|e| (e.val_hr10, e.val_ndcg10) <= (best.val_hr10, best.val_ndcg10));
            check(top, || "kept epoch is not the best validated one".into())?;
        }
        let mut meta = self.base_meta("backbone");
        meta.insert("corpus".into(), corpus.id.clone());
        meta.insert("best_epoch".into(), out.log.best_epoch.to_string());
        meta.insert("stop".into(), format!("{:?}", out.log.stop));
        let id = checkpoint::save(&self.path(BACKBONE), &out.backbone.store, &meta)?;
        write_atomic(&self.path(PRETRAIN_LOG), out.log.to_tsv().as_bytes())?;
        if let StopReason::Diverged { epoch, batch } = out.log.stop {
            return Err(Error::Diverged {
                epoch,
                msg: format!("non-finite loss at batch {batch}; kept checkpoint {id}"),
            });
        }
        Ok(format!("backbone {id} (best epoch {})\n", out.log.best_epoch))
    }

    fn load_backbone(&self, corpus: &Corpus) -> Result<(Backbone, String)> {
        let ck = checkpoint::load(&self.path(BACKBONE))?;
        lineage("backbone", ck.meta("kind"), "backbone.ckpt kind")?;
        lineage(&corpus.id, ck.meta("corpus"), "backbone.ckpt corpus")?;
        let mut backbone = self.new_backbone(corpus.log.num_items())?;
        restore(&ck, &mut backbone.store)?;
        backbone.set_frozen(true);
        Ok((backbone, ck.id))
    }

    fn build_bank(&self, log: &mut dyn FnMut(&str)) -> Result<String> {
        self.require(&[CORPUS, BACKBONE], "build-bank")?;
        let corpus = self.load_corpus()?;
        let (backbone, backbone_id) = self.load_backbone(&corpus)?;
        let refs = build_reference_set(&corpus.split, backbone.config.max_len);
        log(&format!("encoding {} reference pairs", refs.len()));
        let bank = encode_bank(&refs, &backbone, &backbone_id)?;
        let memory = Memory::build(bank, self.config.usize("clusters"), self.config.usize("nprobe"), self.config.seed())?;
        check(memory.len() == refs.len(), || "bank size differs from the reference set".into())?;
        let mut seen = vec![false; memory.len()];
        for &i in memory.index.lists.iter().flatten() {
            check(!std::mem::replace(&mut seen[i as usize], true), || format!("entry {i} indexed twice"))?;
        }
        check(seen.iter().all(|&s| s), || "index misses bank entries".into())?;
        let bank_id = memory.bank.save(&self.path(BANK))?;
        let index_id = memory.index.save(&self.path(INDEX), &bank_id)?;
        Ok(format!(
            "bank {bank_id} ({} entries), index {index_id} ({} lists)\n",
            memory.len(),
            memory.index.k()
        ))
    }

    fn load_memory(&self, backbone_id: &str) -> Result<(Memory, String, String)> {
        let (bank, bank_id) = MemoryBank::load(&self.path(BANK))?;
        lineage(backbone_id, Some(&bank.checkpoint_id), "bank.bin backbone")?;
        let bytes = std::fs::read(self.path(INDEX))?;
        let index_id = crate::binio::digest_hex(&bytes);
        let (index, for_bank) = IvfIndex::decode(&bytes, &self.path(INDEX).display().to_string())?;
        lineage(&bank_id, Some(&for_bank), "index.bin bank")?;
        Ok((Memory { bank, index }, bank_id, index_id))
    }

    fn load_stack(&self, stage: &str, extra: &[&str]) -> Result<Loaded> {
        let mut needed = vec![CORPUS, BACKBONE, BANK, INDEX];
        needed.extend_from_slice(extra);
        self.require(&needed, stage)?;
        let corpus = self.load_corpus()?;
        let (backbone, backbone_id) = self.load_backbone(&corpus)?;
        let (memory, bank_id, index_id) = self.load_memory(&backbone_id)?;
        Ok(Loaded {
            corpus,
            backbone,
            backbone_id,
            memory,
            bank_id,
            index_id,
        })
    }

    fn raft(&self, log: &mut dyn FnMut(&str)) -> Result<String> {
        let l = self.load_stack("raft", &[])?;
        let cfg = self.config.raft();
        let ram = Ram::new(l.backbone.config.hidden, l.backbone.config.heads, cfg.seed)?;
        log(&format!("fine-tuning {} RAM parameters", ram.num_parameters()));
        let out = raft_train(&l.backbone, &l.backbone_id, &l.memory, &l.corpus.split, ram, &cfg, |e| {
            log(&format!(
                "epoch {} loss {:.4} val HR@10 {:.4} NDCG@10 {:.4}",
                e.epoch, e.loss, e.val_hr10, e.val_ndcg10
            ))
        })?;
        check(checkpoint_id(&l.backbone.store) == l.backbone_id, || {
            "backbone changed during RAFT".into()
        })?;
        let mut meta = self.base_meta("ram");
        meta.insert("corpus".into(), l.corpus.id.clone());
        meta.insert("backbone".into(), l.backbone_id.clone());
        meta.insert("bank".into(), l.bank_id.clone());
        meta.insert("index".into(), l.index_id.clone());
        meta.insert("best_epoch".into(), out.best_epoch.to_string());
        let id = checkpoint::save(&self.path(RAM), &out.ram.store, &meta)?;
        write_atomic(&self.path(RAFT_LOG), out.log_tsv().as_bytes())?;
        Ok(format!(
            "ram {id} (best epoch {}, {} examples without memories)\n",
            out.best_epoch, out.fallback_examples
        ))
    }

    fn load_ram(&self, l: &Loaded) -> Result<(Ram, String)> {
        let ck = checkpoint::load(&self.path(RAM))?;
        lineage("ram", ck.meta("kind"), "ram.ckpt kind")?;
        lineage(&l.backbone_id, ck.meta("backbone"), "ram.ckpt backbone")?;
        lineage(&l.bank_id, ck.meta("bank"), "ram.ckpt bank")?;
        lineage(&l.index_id, ck.meta("index"), "ram.ckpt index")?;
        let mut ram = Ram::new(l.backbone.config.hidden, l.backbone.config.heads, 0)?;
        restore(&ck, &mut ram.store)?;
        Ok((ram, ck.id))
    }

    fn report(&self, title: &str, l: &Loaded, ram_id: &str) -> MetricsReport {
        let mut r = MetricsReport::new(title, self.config.fingerprint());
        r.artifacts = BTreeMap::from([
            ("corpus".into(), l.corpus.id.clone()),
            ("backbone".into(), l.backbone_id.clone()),
            ("bank".into(), l.bank_id.clone()),
            ("index".into(), l.index_id.clone()),
            ("ram".into(), ram_id.to_string()),
        ]);
        r
    }

    fn write_report(&self, name: &str, report: &MetricsReport) -> Result<String> {
        for row in &report.rows {
            self_check_metrics(&row.label, &row.cohort, &row.metrics)?;
        }
        let dir = self.path(REPORTS);
        std::fs::create_dir_all(&dir)?;
        let table = report.to_table();
        write_atomic(&dir.join(format!("{name}.txt")), table.as_bytes())?;
        write_atomic(&dir.join(format!("{name}.jsonl")), report.to_jsonl().as_bytes())?;
        Ok(table)
    }

    fn eval(&self, log: &mut dyn FnMut(&str)) -> Result<String> {
        let l = self.load_stack("eval", &[RAM])?;
        let (ram, ram_id) = self.load_ram(&l)?;
        let split = &l.corpus.split;
        let cases = split.test_cases();
        let counts = split.train_item_counts();
        let mut report = self.report("eval", &l, &ram_id);
        log(&format!("evaluating {} test users", cases.len()));
        report.push_evaluation("backbone", &evaluate(&l.backbone, &cases, &counts)?, &DEFAULT_CUTOFFS)?;
        let model = AugmentedModel::new(&l.backbone, &l.memory, &ram, self.config.eval_fusion())?;
        report.push_evaluation("augmented", &evaluate(&model, &cases, &counts)?, &DEFAULT_CUTOFFS)?;
        self.write_report("eval", &report)
    }

    fn ablate(&self, kind: AblationKind, log: &mut dyn FnMut(&str)) -> Result<String> {
        let l = self.load_stack("ablate", &[RAM])?;
        let (ram, ram_id) = self.load_ram(&l)?;
        let t = Trained {
            backbone: &l.backbone,
            backbone_id: &l.backbone_id,
            memory: &l.memory,
            ram: &ram,
            split: &l.corpus.split,
        };
        let c = &self.config;
        let fusion = c.eval_fusion();
        let mut report = self.report(&format!("ablation-{}", kind.name()), &l, &ram_id);
        log(&format!("running the {} ablation", kind.name()));
        let rows = match kind {
            AblationKind::Drift => ablation::drift(&t, fusion, &c.f64_list("drift_ratios"))?,
            AblationKind::Partition => ablation::partition(
                &t,
                fusion,
                c.usize("partition_lo") as u32,
                c.usize("partition_hi") as u32,
            )?,
            AblationKind::Noise => ablation::noise(&t, fusion, &c.f64_list("noise_ratios"), c.seed())?,
            AblationKind::Sweep => {
                let cfg = SweepConfig {
                    mode: if c.get("sweep_mode") == "grid" { SweepMode::Grid } else { SweepMode::Axis },
                    alphas: c.f64_list("sweep_alphas"),
                    betas: c.f64_list("sweep_betas"),
                    ks: c.usize_list("sweep_ks"),
                    seeds: c.usize("sweep_seeds"),
                    base: c.raft(),
                };
                for row in ablation::sweep(&t, &cfg, |f, seed, m| {
                    log(&format!(
                        "alpha={} beta={} K={} seed {seed}: HR@10 {:.4}",
                        f.alpha,
                        f.beta,
                        f.k,
                        m.hr(10).unwrap_or(0.0)
                    ))
                })? {
                    report.rows.push(ReportRow {
                        label: row.label(),
                        cohort: "all".into(),
                        metrics: row.mean,
                        std: Some(row.std),
                    });
                }
                Vec::new()
            }
        };
        for (label, m) in rows {
            report.push(label, "all", m);
        }
        self.write_report(&format!("ablation-{}", kind.name()), &report)
    }

    fn recommend(&self, names: &[String]) -> Result<String> {
        let l = self.load_stack("recommend", &[RAM])?;
        let (ram, _) = self.load_ram(&l)?;
        let log = &l.corpus.log;
        let lookup: BTreeMap<&str, ItemId> = log
            .item_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i as ItemId))
            .collect();
        let prefix = names
            .iter()
            .map(|n| {
                lookup
                    .get(n.as_str())
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown item {n:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("recommend needs at least one item".into()));
        }
        let model = AugmentedModel::new(&l.backbone, &l.memory, &ram, self.config.eval_fusion())?;
        let rec = model.recommend(&prefix, self.config.usize("top_n"))?;
        let out = json!({
            "items": rec.items.iter().map(|&(i, s)| json!({"item": log.item_names[i as usize], "score": s})).collect::<Vec<_>>(),
            "fallback": rec.fallback,
            "trace": rec.trace.iter().map(|t| json!({
                "entry": t.entry,
                "user": log.user_names[t.origin.user as usize],
                "step": t.origin.step,
                "target": log.item_names[t.target as usize],
                "cosine": t.cosine,
            })).collect::<Vec<_>>(),
        });
        Ok(format!("{out}\n"))
    }
}

fn restore(ck: &Checkpoint, store: &mut crate::param::ParamStore) -> Result<()> {
    ck.restore_into(store)?;
    check(checkpoint_id(store) == ck.id, || "restored weights do not reproduce the checkpoint id".into())
}

fn self_check_corpus(log: &InteractionLog, min_core: usize) -> Result<()> {
    let mut item_deg = vec![0usize; log.num_items()];
    for (u, seq) in log.sequences.iter().enumerate() {
        check(seq.len() >= min_core, || format!("user {u} below the core threshold"))?;
        check(seq.windows(2).all(|w| w[0].timestamp <= w[1].timestamp), || {
            format!("user {u} is not in time order")
        })?;
        for x in seq {
            item_deg[x.item as usize] += 1;
        }
    }
    check(item_deg.iter().all(|&d| d >= min_core), || "an item is below the core threshold".into())
}

fn self_check_metrics(label: &str, cohort: &str, m: &Metrics) -> Result<()> {
    let bad = || format!("metrics of {label}/{cohort} are inconsistent");
    for i in 0..m.cutoffs.len() {
        check((0.0..=1.0).contains(&m.hr[i]) && (0.0..=1.0).contains(&m.ndcg[i]), bad)?;
        check(m.ndcg[i] <= m.hr[i] + 1e-12, bad)?;
        if i > 0 && m.cutoffs[i] > m.cutoffs[i - 1] {
            check(m.hr[i] >= m.hr[i - 1] && m.ndcg[i] >= m.ndcg[i - 1] - 1e-12, bad)?;
        }
    }
    Ok(())
}
