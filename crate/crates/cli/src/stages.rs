//! The pipeline stages. Each reads its inputs from the run directory and
//! writes its outputs back there.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use atomic_nli::agreement::{cohens_kappa, kendalls_tau_b};
use atomic_nli::backends::{
    Adapter, Backend, BackendDescriptor, MockClassifier, MockEmbedder, MockGenerator, ResponseCache, Transport,
};
use atomic_nli::decomposer::{decompose, generate_qud, Decomposition, ExemplarPurpose, ExemplarSet};
use atomic_nli::defeasible::{
    build_subproblems, evaluate_defeasible, identify_critical_atoms, table3_metrics, CriticalAtomSet,
    DefeasibleEvaluationRecord, DefeasibleOptions, DefeasibleSubProblem, Table3Report,
};
use atomic_nli::grouping::{
    bucket_accuracies, build_buckets, build_graph, inferential_consistency, maximal_cliques, BucketAccuracy,
    BucketWeighting, CriticalAtomBucket, GraphStats,
};
use atomic_nli::model::{Atom, DefeasibleExample, NliExample, NliLabel, Prediction};
use atomic_nli::nli::{consistency_report, evaluate_example, ConsistencyReport, NliEvaluationRecord};
use atomic_nli::prompts::EvaluationExemplars;
use atomic_nli::validator::{apply_annotations, latest_records, paired_judgments, primary_annotator, prune_atoms};
use atomic_nli::validator::{AnnotationRecord, PruneDecision};
use atomic_nli::{Error, Result};
use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::{load_dataset, Dataset, TaskKind};
use crate::rugplot::{render_csv, render_svg, slices_from, sort_slices};
use crate::run::{RunDir, Stage, ANNOTATIONS, CACHE_DIR, DATASET};

pub const ATOMS: &str = "atoms.jsonl";
pub const DECOMPOSITIONS: &str = "decompositions.jsonl";
pub const PRUNE: &str = "prune.jsonl";
pub const ATOMS_PRUNED: &str = "atoms_pruned.jsonl";
pub const NLI_PREDICTIONS: &str = "nli_predictions.jsonl";
pub const NLI_RECORDS: &str = "nli_records.jsonl";
pub const NLI_REPORT: &str = "reports/nli.json";
pub const NLI_REPORT_TXT: &str = "reports/nli.txt";
pub const ATOMS_ANNOTATED: &str = "atoms_annotated.jsonl";
pub const SUBPROBLEMS: &str = "subproblems.jsonl";
pub const CRITICAL: &str = "critical.jsonl";
pub const DEFEASIBLE_PREDICTIONS: &str = "defeasible_predictions.jsonl";
pub const DEFEASIBLE_RECORDS: &str = "defeasible_records.jsonl";
pub const DEFEASIBLE_REPORT: &str = "reports/defeasible.json";
pub const DEFEASIBLE_REPORT_TXT: &str = "reports/defeasible.txt";
pub const AGREEMENT_REPORT: &str = "reports/agreement.json";
pub const GRAPH: &str = "graph.json";
pub const BUCKETS: &str = "buckets.jsonl";
pub const QUDS: &str = "quds.jsonl";
pub const GROUPING_REPORT: &str = "reports/grouping.json";
pub const GROUPING_REPORT_TXT: &str = "reports/grouping.txt";
pub const SUMMARY: &str = "reports/summary.json";
pub const SUMMARY_TXT: &str = "reports/summary.txt";
pub const RUGPLOT_SVG: &str = "rugplot.svg";
pub const RUGPLOT_CSV: &str = "rugplot.csv";

pub const GENERATION_FIXTURES: &str = "generation.json";
pub const CLASSIFIER_FIXTURES: &str = "classifier.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Generator,
    Classifier,
    Embedder,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Generator => "generator",
            Role::Classifier => "classifier",
            Role::Embedder => "embedder",
        }
    }
}

/// Digest of the mock fixture files, folded into the mock backend ids.
pub fn fixture_fingerprint(dir: &Path) -> Result<String> {
    let generation = dir.join(GENERATION_FIXTURES);
    let mut bytes = std::fs::read(&generation).map_err(|e| {
        Error::Precondition(format!("mock fixtures: cannot read {}: {e}", generation.display()))
    })?;
    bytes.push(b'\n');
    if let Ok(classifier) = std::fs::read(dir.join(CLASSIFIER_FIXTURES)) {
        bytes.extend(classifier);
    }
    Ok(crate::dataset::sha256_hex(&bytes)[..16].to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub annotators: Vec<String>,
    /// The two annotators compared: the primary and the one sharing the most
    /// atoms with them.
    pub pair: Option<(String, String)>,
    pub validity_items: usize,
    pub validity_kappa: Option<f64>,
    pub effect_items: usize,
    pub effect_tau_b: Option<f64>,
}

impl AgreementReport {
    pub fn compute(records: &[AnnotationRecord], primary: Option<&str>) -> Self {
        let latest = latest_records(records);
        let annotators: BTreeSet<&str> = latest.iter().map(|r| r.annotator_id.as_str()).collect();
        let mut report = AgreementReport {
            annotators: annotators.iter().map(|s| s.to_string()).collect(),
            pair: None,
            validity_items: 0,
            validity_kappa: None,
            effect_items: 0,
            effect_tau_b: None,
        };
        let Some(first) = primary_annotator(records, primary) else { return report };
        let atoms_of = |who: &str| -> BTreeSet<&str> {
            latest.iter().filter(|r| r.annotator_id == who).map(|r| r.atom_id.as_str()).collect()
        };
        let mine = atoms_of(&first);
        let second = annotators
            .iter()
            .filter(|a| **a != first)
            .map(|a| (atoms_of(a).intersection(&mine).count(), *a))
            .filter(|(n, _)| *n > 0)
            .max_by(|x, y| x.0.cmp(&y.0).then(y.1.cmp(x.1)));
        let Some((_, second)) = second else { return report };
        let (validity, effects) = paired_judgments(records, &first, second);
        report.pair = Some((first.clone(), second.to_string()));
        report.validity_items = validity.len();
        report.effect_items = effects.len();
        let (va, vb): (Vec<bool>, Vec<bool>) = validity.into_iter().unzip();
        report.validity_kappa = cohens_kappa(&va, &vb).ok();
        let (ea, eb): (Vec<f64>, Vec<f64>) = effects.iter().map(|(x, y)| (f64::from(*x), f64::from(*y))).unzip();
        report.effect_tau_b = kendalls_tau_b(&ea, &eb).ok().flatten();
        report
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
        let mut out = String::new();
        let pair = self.pair.as_ref().map_or_else(|| "none".to_string(), |(a, b)| format!("{a} vs {b}"));
        let _ = writeln!(out, "{:<38} {pair}", "Annotator pair");
        let _ = writeln!(out, "{:<38} {} ({} items)", "Validity kappa", fmt(self.validity_kappa), self.validity_items);
        let _ = writeln!(out, "{:<38} {} ({} items)", "Effect tau-b", fmt(self.effect_tau_b), self.effect_items);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingReport {
    pub threshold: f64,
    pub weighting: BucketWeighting,
    /// Under the configured weighting; absent when there are no buckets.
    pub inferential_consistency: Option<f64>,
    pub inferential_consistency_uniform: Option<f64>,
    pub inferential_consistency_by_weight: Option<f64>,
    pub critical_atoms: usize,
    pub buckets: usize,
    pub singleton_buckets: usize,
    pub overlapping_atoms: usize,
    pub graph: GraphStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quds: Option<usize>,
}

impl GroupingReport {
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let rows = [
            ("Similarity threshold", format!("{:.2}", self.threshold)),
            ("Inferential consistency", fmt(self.inferential_consistency)),
            ("  uniform over buckets", fmt(self.inferential_consistency_uniform)),
            ("  weighted by bucket mass", fmt(self.inferential_consistency_by_weight)),
            ("Critical atoms", self.critical_atoms.to_string()),
            ("Buckets", self.buckets.to_string()),
            ("Singleton buckets", self.singleton_buckets.to_string()),
            ("Atoms in several cliques", self.overlapping_atoms.to_string()),
            ("Atom pairs", self.graph.pairs.to_string()),
            ("Pairs above threshold", self.graph.pairs_above_threshold.to_string()),
            ("Entailment calls", self.graph.entailment_calls.to_string()),
        ];
        for (name, value) in rows {
            let _ = writeln!(out, "{name:<38} {value}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub threshold: f64,
    pub nodes: Vec<String>,
    pub edges: Vec<(String, String)>,
    pub cliques: Vec<Vec<String>>,
    pub stats: GraphStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    #[serde(flatten)]
    pub bucket: CriticalAtomBucket,
    pub theta: f64,
    pub weight_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: TaskKind,
    pub examples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nli: Option<ConsistencyReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defeasible: Option<Table3Report>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<AgreementReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grouping: Option<GroupingReport>,
}

impl Summary {
    pub fn to_text(&self) -> String {
        let mut out = format!("task: {}\nexamples: {}\n", self.task.as_str(), self.examples);
        let sections: [(&str, Option<String>); 4] = [
            ("Traditional NLI", self.nli.as_ref().map(ConsistencyReport::to_text)),
            ("Defeasible NLI", self.defeasible.as_ref().map(Table3Report::to_text)),
            ("Annotator agreement", self.agreement.as_ref().map(AgreementReport::to_text)),
            ("Inferential consistency", self.grouping.as_ref().map(GroupingReport::to_text)),
        ];
        for (title, body) in sections {
            if let Some(body) = body {
                let _ = write!(out, "\n== {title} ==\n{body}");
            }
        }
        out
    }
}

/// One open run plus the configuration and backends it runs with.
pub struct Pipeline {
    pub run: RunDir,
    pub config: Config,
    fixtures: Option<PathBuf>,
    cache: Arc<ResponseCache>,
    /// Run missing upstream model stages instead of failing.
    pub run_upstream: bool,
}

impl Pipeline {
    pub fn new(run: RunDir, config: Config, fixtures: Option<PathBuf>) -> Result<Self> {
        let cache = Arc::new(ResponseCache::open(run.path(CACHE_DIR))?);
        Ok(Pipeline { run, config, fixtures, cache, run_upstream: false })
    }

    pub fn task(&self) -> TaskKind {
        self.run.manifest.task
    }

    pub fn dataset(&self) -> Result<Dataset> {
        load_dataset(&self.run.path(DATASET), self.task())
    }

    fn nli_examples(&self) -> Result<Vec<NliExample>> {
        match self.dataset()? {
            Dataset::Nli(v) => Ok(v),
            Dataset::Defeasible(_) => Err(self.wrong_task(TaskKind::Nli)),
        }
    }

    fn defeasible_examples(&self) -> Result<Vec<DefeasibleExample>> {
        match self.dataset()? {
            Dataset::Defeasible(v) => Ok(v),
            Dataset::Nli(_) => Err(self.wrong_task(TaskKind::Defeasible)),
        }
    }

    fn wrong_task(&self, wanted: TaskKind) -> Error {
        Error::Precondition(format!(
            "run {} holds a {} dataset; this stage needs a {} dataset",
            self.run.run_id(),
            self.task().as_str(),
            wanted.as_str()
        ))
    }

    fn parallelism(&self) -> usize {
        self.config.execution.parallelism.max(1)
    }

    fn backend(&mut self, role: Role) -> Result<Backend> {
        let descriptor = match role {
            Role::Generator => &self.config.backends.generator,
            Role::Classifier => &self.config.backends.classifier,
            Role::Embedder => &self.config.backends.embedder,
        };
        let descriptor: BackendDescriptor = descriptor.clone().ok_or_else(|| {
            Error::Precondition(format!(
                "no {} backend configured; set [backends.{}] in the config file or pass --mock",
                role.name(),
                role.name()
            ))
        })?;
        self.run.note_backend(role.name(), &descriptor)?;
        let options = self.config.execution.backend_options();
        let cache = Some(self.cache.clone());
        if descriptor.adapter != Adapter::Mock {
            return Backend::http(descriptor, cache, options);
        }
        let dir = self
            .fixtures
            .clone()
            .ok_or_else(|| Error::Precondition("mock backends need a fixture directory (--fixtures)".into()))?;
        let transport: Arc<dyn Transport> = match role {
            Role::Generator => Arc::new(MockGenerator::from_file(dir.join(GENERATION_FIXTURES))?),
            Role::Classifier => {
                let path = dir.join(CLASSIFIER_FIXTURES);
                Arc::new(if path.is_file() { MockClassifier::from_file(path)? } else { MockClassifier::new() })
            }
            Role::Embedder => Arc::new(MockEmbedder::default()),
        };
        Ok(Backend::new(descriptor, transport, cache, options))
    }

    fn decomposition_exemplars(&self) -> Result<ExemplarSet> {
        match &self.config.exemplars.decomposition {
            Some(path) => ExemplarSet::load(path, ExemplarPurpose::Decomposition),
            None => Ok(ExemplarSet::builtin_decomposition()),
        }
    }

    fn qud_exemplars(&self) -> Result<ExemplarSet> {
        match &self.config.exemplars.qud {
            Some(path) => ExemplarSet::load(path, ExemplarPurpose::Qud),
            None => Ok(ExemplarSet::builtin_qud()),
        }
    }

    fn evaluation_exemplars(&self) -> Result<EvaluationExemplars> {
        let mut ex = EvaluationExemplars::builtin();
        let files = &self.config.exemplars;
        if let Some(p) = &files.nli {
            ex.nli = EvaluationExemplars::load_nli(p)?;
        }
        if let Some(p) = &files.defeasible {
            ex.defeasible = EvaluationExemplars::load_defeasible(p)?;
        }
        if let Some(p) = &files.defeasible_atoms {
            ex.defeasible_atoms = EvaluationExemplars::load_defeasible(p)?;
        }
        Ok(ex)
    }

    async fn ensure_decomposed(&mut self) -> Result<()> {
        if self.run.has_stage(Stage::Decompose) || !self.run_upstream {
            return self.run.require(Stage::Decompose);
        }
        log::info!("running missing stage decompose");
        self.decompose().await.map(|_| ())
    }

    /// Makes sure pruned atoms exist, running missing stages when allowed.
    pub async fn ensure_pruned(&mut self) -> Result<()> {
        if self.run.has_stage(Stage::Prune) || !self.run_upstream {
            return self.run.require(Stage::Prune);
        }
        self.ensure_decomposed().await?;
        log::info!("running missing stage prune");
        self.prune().await.map(|_| ())
    }

    /// Decomposes every hypothesis. Returns the number of atoms.
    pub async fn decompose(&mut self) -> Result<usize> {
        let dataset = self.dataset()?;
        let generator = self.backend(Role::Generator)?;
        let exemplars = self.decomposition_exemplars()?;
        let triples = dataset.triples();
        let results: Vec<(Vec<Atom>, Decomposition)> = stream::iter(&triples)
            .map(|(id, _, hypothesis)| decompose(id, hypothesis, &generator, &exemplars))
            .buffered(self.parallelism())
            .try_collect()
            .await?;
        let (atoms, records): (Vec<Vec<Atom>>, Vec<Decomposition>) = results.into_iter().unzip();
        let atoms: Vec<Atom> = atoms.into_iter().flatten().collect();
        self.run.write_jsonl(ATOMS, &atoms)?;
        self.run.write_jsonl(DECOMPOSITIONS, &records)?;
        self.run.complete(Stage::Decompose, &[ATOMS, DECOMPOSITIONS])?;
        Ok(atoms.len())
    }

    /// Machine pruning. Returns (kept, total).
    pub async fn prune(&mut self) -> Result<(usize, usize)> {
        self.ensure_decomposed().await?;
        let dataset = self.dataset()?;
        let classifier = self.backend(Role::Classifier)?;
        let atoms: Vec<Atom> = self.run.read_jsonl(ATOMS)?;
        let with_premise = dataset.kind() == TaskKind::Defeasible;
        let mut decisions: Vec<PruneDecision> = Vec::with_capacity(atoms.len());
        for (id, premise, hypothesis) in dataset.triples() {
            let own: Vec<Atom> = atoms.iter().filter(|a| a.parent_example_id == id).cloned().collect();
            let premise = with_premise.then_some(premise);
            decisions.extend(prune_atoms(&own, hypothesis, premise, &classifier, self.parallelism()).await?);
        }
        let keep: BTreeMap<&str, bool> = decisions.iter().map(|d| (d.atom_id.as_str(), d.keep)).collect();
        let pruned: Vec<Atom> = atoms
            .iter()
            .map(|a| Atom { machine_valid: keep.get(a.atom_id.as_str()).copied(), ..a.clone() })
            .collect();
        self.run.write_jsonl(PRUNE, &decisions)?;
        self.run.write_jsonl(ATOMS_PRUNED, &pruned)?;
        self.run.complete(Stage::Prune, &[PRUNE, ATOMS_PRUNED])?;
        Ok((decisions.iter().filter(|d| d.keep).count(), decisions.len()))
    }

    pub fn annotations(&self) -> Result<Vec<AnnotationRecord>> {
        if self.run.path(ANNOTATIONS).is_file() {
            self.run.read_jsonl(ANNOTATIONS)
        } else {
            Ok(Vec::new())
        }
    }

    /// Appends the records of an annotation file that are not already
    /// stored. Returns the number added.
    pub fn import_annotations(&mut self, path: &Path) -> Result<usize> {
        self.run.require(Stage::Prune)?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        let atoms: Vec<Atom> = self.run.read_jsonl(ATOMS_PRUNED)?;
        let known: BTreeMap<&str, Option<bool>> =
            atoms.iter().map(|a| (a.atom_id.as_str(), a.machine_valid)).collect();
        let defeasible = self.task() == TaskKind::Defeasible;
        let mut stored = self.annotations()?;
        let mut added = 0;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let at = || format!("{}:{}", path.display(), i + 1);
            let record: AnnotationRecord = serde_json::from_str(line).map_err(|e| Error::from(e).context(at()))?;
            match known.get(record.atom_id.as_str()) {
                None => return Err(Error::Integrity(format!("{}: unknown atom {}", at(), record.atom_id))),
                Some(Some(false)) => {
                    return Err(Error::Integrity(format!("{}: atom {} was machine-pruned", at(), record.atom_id)))
                }
                _ => {}
            }
            if let Err(problems) = record.check(defeasible) {
                let detail: Vec<String> = problems.iter().map(|(f, m)| format!("field `{f}` {m}")).collect();
                return Err(Error::Integrity(format!("{}: {}", at(), detail.join("; "))));
            }
            if !is_repeat(&stored, &record) {
                self.run.append_jsonl(ANNOTATIONS, &record)?;
                stored.push(record);
                added += 1;
            }
        }
        if added > 0 {
            self.run.invalidate_after(Stage::Prune);
            self.run.save()?;
        }
        Ok(added)
    }

    pub async fn eval_nli(&mut self) -> Result<ConsistencyReport> {
        self.ensure_decomposed().await?;
        let examples = self.nli_examples()?;
        let generator = self.backend(Role::Generator)?;
        let exemplars = self.evaluation_exemplars()?;
        let atoms: Vec<Atom> = self.run.read_jsonl(ATOMS)?;
        let par = self.parallelism();
        let results: Vec<(NliEvaluationRecord, Vec<Prediction>)> = stream::iter(&examples)
            .map(|ex| {
                let own: Vec<Atom> = atoms.iter().filter(|a| a.parent_example_id == ex.id).cloned().collect();
                let generator = &generator;
                let exemplars = &exemplars.nli;
                async move { evaluate_example(ex, &own, generator, exemplars, par).await }
            })
            .buffered(par)
            .try_collect()
            .await?;
        let (records, predictions): (Vec<_>, Vec<Vec<Prediction>>) = results.into_iter().unzip();
        let predictions: Vec<Prediction> = predictions.into_iter().flatten().collect();
        let gold: BTreeMap<String, NliLabel> = examples.iter().map(|e| (e.id.clone(), e.gold)).collect();
        let report = consistency_report(&records, &gold)?;
        self.run.write_jsonl(NLI_PREDICTIONS, &predictions)?;
        self.run.write_jsonl(NLI_RECORDS, &records)?;
        self.run.write_json(NLI_REPORT, &report)?;
        self.run.write_text(NLI_REPORT_TXT, &report.to_text())?;
        self.run.complete(Stage::EvalNli, &[NLI_PREDICTIONS, NLI_RECORDS, NLI_REPORT, NLI_REPORT_TXT])?;
        Ok(report)
    }

    pub async fn eval_defeasible(&mut self) -> Result<Table3Report> {
        self.ensure_pruned().await?;
        let examples = self.defeasible_examples()?;
        let records = self.annotations()?;
        if records.is_empty() {
            return Err(Error::Precondition(format!(
                "run {} has no annotations; import them with --annotations FILE or collect them with annotate-serve",
                self.run.run_id()
            )));
        }
        let primary = self.config.annotation.primary_annotator.clone();
        let atoms: Vec<Atom> = self.run.read_jsonl(ATOMS_PRUNED)?;
        let annotated = apply_annotations(atoms, &records, primary.as_deref(), true)?;
        let mut subproblems: Vec<DefeasibleSubProblem> = Vec::new();
        let mut critical: Vec<CriticalAtomSet> = Vec::new();
        for ex in &examples {
            let own = build_subproblems(ex, &annotated)?;
            critical.push(identify_critical_atoms(ex, &own)?);
            subproblems.extend(own);
        }
        let generator = self.backend(Role::Generator)?;
        let exemplars = self.evaluation_exemplars()?;
        let options = DefeasibleOptions {
            unparsed_full: self.config.evaluation.unparsed_full,
            parallelism: self.parallelism(),
        };
        let (results, predictions) =
            evaluate_defeasible(&examples, &subproblems, &generator, &exemplars, options).await?;
        let report = table3_metrics(&results, &critical)?;
        let agreement = AgreementReport::compute(&records, primary.as_deref());
        self.run.write_jsonl(ATOMS_ANNOTATED, &annotated)?;
        self.run.write_jsonl(SUBPROBLEMS, &subproblems)?;
        self.run.write_jsonl(CRITICAL, &critical)?;
        self.run.write_jsonl(DEFEASIBLE_PREDICTIONS, &predictions)?;
        self.run.write_jsonl(DEFEASIBLE_RECORDS, &results)?;
        self.run.write_json(DEFEASIBLE_REPORT, &report)?;
        self.run.write_text(DEFEASIBLE_REPORT_TXT, &report.to_text())?;
        self.run.write_json(AGREEMENT_REPORT, &agreement)?;
        self.run.complete(
            Stage::EvalDefeasible,
            &[
                ATOMS_ANNOTATED,
                SUBPROBLEMS,
                CRITICAL,
                DEFEASIBLE_PREDICTIONS,
                DEFEASIBLE_RECORDS,
                DEFEASIBLE_REPORT,
                DEFEASIBLE_REPORT_TXT,
                AGREEMENT_REPORT,
            ],
        )?;
        Ok(report)
    }

    /// Groups critical atoms into buckets and scores inferential
    /// consistency. `threshold` overrides the configured one.
    pub async fn group(&mut self, threshold: Option<f64>, with_quds: bool) -> Result<GroupingReport> {
        self.run.require(Stage::EvalDefeasible)?;
        let threshold = threshold.unwrap_or(self.config.grouping.threshold);
        if !(-1.0..=1.0).contains(&threshold) {
            return Err(Error::Precondition(format!("threshold must lie in [-1, 1], got {threshold}")));
        }
        let critical: Vec<CriticalAtomSet> = self.run.read_jsonl(CRITICAL)?;
        let annotated: Vec<Atom> = self.run.read_jsonl(ATOMS_ANNOTATED)?;
        let results: Vec<DefeasibleEvaluationRecord> = self.run.read_jsonl(DEFEASIBLE_RECORDS)?;
        let by_id: BTreeMap<&str, &Atom> = annotated.iter().map(|a| (a.atom_id.as_str(), a)).collect();
        let critical_ids: BTreeSet<&str> = critical.iter().flat_map(|c| &c.atom_ids).map(String::as_str).collect();
        let mut nodes = Vec::with_capacity(critical_ids.len());
        for id in &critical_ids {
            let atom = by_id.get(id).ok_or_else(|| Error::Integrity(format!("critical atom {id} is not stored")))?;
            nodes.push((id.to_string(), atom.text.clone()));
        }

        let embedder = self.backend(Role::Embedder)?;
        let classifier = self.backend(Role::Classifier)?;
        let par = self.parallelism();
        let vectors: Vec<Vec<f64>> =
            stream::iter(&nodes).map(|(_, text)| embedder.embed(text)).buffered(par).try_collect().await?;
        let embeddings: BTreeMap<String, Vec<f64>> =
            nodes.iter().map(|(id, _)| id.clone()).zip(vectors).collect();
        let (graph, stats) = build_graph(&nodes, &embeddings, threshold, &classifier, par).await?;
        let cliques = maximal_cliques(&graph);
        let buckets = build_buckets(&cliques, &critical)?;
        let correct: BTreeMap<String, bool> = results.iter().map(|r| (r.example_id.clone(), r.full_correct())).collect();
        let accuracies: Vec<BucketAccuracy> = bucket_accuracies(&buckets.buckets, &correct)?;
        let ic = |w| (!accuracies.is_empty()).then(|| inferential_consistency(&accuracies, w)).transpose();
        let weighting = self.config.grouping.weighting;
        let mut report = GroupingReport {
            threshold,
            weighting,
            inferential_consistency: ic(weighting)?,
            inferential_consistency_uniform: ic(BucketWeighting::Uniform)?,
            inferential_consistency_by_weight: ic(BucketWeighting::ByWeight)?,
            critical_atoms: critical_ids.len(),
            buckets: buckets.buckets.len(),
            singleton_buckets: buckets.buckets.iter().filter(|b| b.member_atom_ids.len() == 1).count(),
            overlapping_atoms: buckets.overlapping_atoms,
            graph: stats.clone(),
            quds: None,
        };
        let mut outputs = vec![GRAPH, BUCKETS, GROUPING_REPORT, GROUPING_REPORT_TXT];
        if with_quds {
            let generator = self.backend(Role::Generator)?;
            let exemplars = self.qud_exemplars()?;
            let critical_atoms: Vec<&Atom> = critical_ids.iter().map(|id| by_id[id]).collect();
            let quds: Vec<_> = stream::iter(critical_atoms)
                .map(|atom| generate_qud(atom, &generator, &exemplars))
                .buffered(par)
                .try_collect()
                .await?;
            report.quds = Some(quds.len());
            self.run.write_jsonl(QUDS, &quds)?;
            outputs.push(QUDS);
        }
        let graph_file = GraphFile {
            threshold,
            nodes: graph.nodes.clone(),
            edges: graph.edges.iter().cloned().collect(),
            cliques,
            stats,
        };
        let rows: Vec<BucketRow> = buckets
            .buckets
            .into_iter()
            .zip(&accuracies)
            .map(|(bucket, acc)| BucketRow { bucket, theta: acc.theta, weight_total: acc.weight_total })
            .collect();
        self.run.write_json(GRAPH, &graph_file)?;
        self.run.write_jsonl(BUCKETS, &rows)?;
        self.run.write_json(GROUPING_REPORT, &report)?;
        self.run.write_text(GROUPING_REPORT_TXT, &report.to_text())?;
        self.run.complete(Stage::Group, &outputs)?;
        Ok(report)
    }

    /// Collects the finished reports of this run into one summary.
    pub fn report(&mut self) -> Result<Summary> {
        let task = self.task();
        let mut summary = Summary {
            task,
            examples: self.run.manifest.examples,
            nli: None,
            defeasible: None,
            agreement: None,
            grouping: None,
        };
        match task {
            TaskKind::Nli => {
                self.run.require(Stage::EvalNli)?;
                summary.nli = Some(self.run.read_json(NLI_REPORT)?);
            }
            TaskKind::Defeasible => {
                self.run.require(Stage::EvalDefeasible)?;
                summary.defeasible = Some(self.run.read_json(DEFEASIBLE_REPORT)?);
                summary.agreement = Some(self.run.read_json(AGREEMENT_REPORT)?);
                if self.run.has_stage(Stage::Group) {
                    summary.grouping = Some(self.run.read_json(GROUPING_REPORT)?);
                }
            }
        }
        self.run.write_json(SUMMARY, &summary)?;
        self.run.write_text(SUMMARY_TXT, &summary.to_text())?;
        self.run.complete(Stage::Report, &[SUMMARY, SUMMARY_TXT])?;
        Ok(summary)
    }

    /// Writes the rug plot and its table. Returns the number of slices.
    pub fn rugplot(&mut self) -> Result<usize> {
        self.run.require(Stage::EvalDefeasible)?;
        let examples = self.defeasible_examples()?;
        let atoms: Vec<Atom> = self.run.read_jsonl(ATOMS_ANNOTATED)?;
        let mut slices = slices_from(&examples, &atoms);
        sort_slices(&mut slices);
        let svg = render_svg(&slices, self.run.run_id())?;
        let csv = render_csv(&slices, self.run.run_id())?;
        crate::run::write_atomic(&self.run.path(RUGPLOT_SVG), svg.as_bytes())?;
        crate::run::write_atomic(&self.run.path(RUGPLOT_CSV), csv.as_bytes())?;
        self.run.complete(Stage::Rugplot, &[RUGPLOT_SVG, RUGPLOT_CSV])?;
        Ok(slices.len())
    }
}

/// Same judgment as the latest stored record for this atom and annotator.
pub fn is_repeat(stored: &[AnnotationRecord], record: &AnnotationRecord) -> bool {
    stored
        .iter()
        .rev()
        .find(|r| r.atom_id == record.atom_id && r.annotator_id == record.annotator_id)
        .is_some_and(|r| r.valid == record.valid && r.effect == record.effect)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(atom: &str, who: &str, valid: bool, effect: Option<i8>) -> AnnotationRecord {
        AnnotationRecord {
            atom_id: atom.into(),
            annotator_id: who.into(),
            valid,
            effect: effect.map(|v| atomic_nli::model::EffectScore::new(v).unwrap()),
            timestamp: "t".into(),
        }
    }

    #[test]
    fn agreement_pairs_primary_with_largest_overlap() {
        let records = vec![
            rec("a1", "ann", true, Some(2)),
            rec("a2", "ann", true, Some(-1)),
            rec("a3", "ann", false, None),
            rec("a1", "bob", true, Some(1)),
            rec("a2", "bob", true, Some(-2)),
            rec("a3", "bob", false, None),
            rec("a1", "cat", true, Some(2)),
        ];
        let report = AgreementReport::compute(&records, Some("ann"));
        assert_eq!(report.pair, Some(("ann".into(), "bob".into())));
        assert_eq!(report.validity_items, 3);
        assert_eq!(report.validity_kappa, Some(1.0));
        assert_eq!(report.effect_items, 2);
        assert_eq!(report.effect_tau_b, Some(1.0));
    }

    #[test]
    fn agreement_without_second_annotator_is_empty() {
        let report = AgreementReport::compute(&[rec("a1", "ann", true, Some(1))], None);
        assert_eq!(report.pair, None);
        assert_eq!(report.validity_kappa, None);
        assert!(report.to_text().contains("none"));
    }

    #[test]
    fn repeat_detection_ignores_timestamp() {
        let stored = vec![rec("a1", "ann", true, Some(1))];
        let mut again = rec("a1", "ann", true, Some(1));
        again.timestamp = "later".into();
        assert!(is_repeat(&stored, &again));
        assert!(!is_repeat(&stored, &rec("a1", "ann", true, Some(2))));
        assert!(!is_repeat(&stored, &rec("a1", "bob", true, Some(1))));
    }
}
