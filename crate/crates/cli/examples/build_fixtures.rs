//! Regenerates the bundled corpora, annotations and mock backend tables from
//! `fixtures/scenarios/*.json`.
//!
//!     cargo run -p atomic-nli-cli --example build_fixtures
//!
//! A scenario lists, per example, the atoms the mock generator should return
//! and the answer it should give for every prompt the pipeline will send.
//! Output is deterministic; rerunning leaves the tree unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use atomic_nli::backends::{ClassifierFixture, MockEmbedder, MockGenerator};
use atomic_nli::decomposer::{build_decomposition_prompt, build_qud_prompt, ExemplarSet};
use atomic_nli::grouping::cosine;
use atomic_nli::model::{atom_id, DefeasibleExample, DefeasibleLabel, EffectScore, NliExample, NliLabel};
use atomic_nli::prompts::{defeasible_atom_prompt, defeasible_prompt, nli_prompt, EvaluationExemplars};
use atomic_nli::validator::AnnotationRecord;
use serde::{Deserialize, Serialize};

#[derive(Deserialize)]
struct NliScenario {
    id: String,
    premise: String,
    hypothesis: String,
    gold: NliLabel,
    full: String,
    #[serde(default)]
    style: Option<String>,
    atoms: Vec<NliAtomSpec>,
}

#[derive(Deserialize)]
struct NliAtomSpec {
    text: String,
    admit: String,
    #[serde(default)]
    premise: Option<String>,
    /// Hypothesis-to-atom label for the pruning classifier; entailment if absent.
    #[serde(default)]
    classifier: Option<NliLabel>,
}

#[derive(Deserialize)]
struct DefeasibleScenario {
    id: String,
    premise: String,
    hypothesis: String,
    update: String,
    gold: DefeasibleLabel,
    full: String,
    #[serde(default)]
    table1: bool,
    atoms: Vec<DefeasibleAtomSpec>,
}

#[derive(Deserialize)]
struct DefeasibleAtomSpec {
    text: String,
    #[serde(default)]
    effect: Option<EffectScore>,
    #[serde(default)]
    pred: Option<String>,
    #[serde(default)]
    second: Option<EffectScore>,
    /// "premise" or "hypothesis": which pruning check removes the atom.
    #[serde(default)]
    pruned: Option<String>,
    #[serde(default)]
    qud: Option<String>,
}

#[derive(Serialize)]
struct TableAtom {
    name: String,
    text: String,
    effect: EffectScore,
}

#[derive(Serialize)]
struct TableRow {
    example: DefeasibleExample,
    atoms: Vec<TableAtom>,
}

/// Prompt-hash table that refuses two different answers for one prompt.
struct Answers {
    table: MockGenerator,
    by_prompt: BTreeMap<String, String>,
}

impl Answers {
    fn put(&mut self, prompt: String, answer: String) {
        if let Some(previous) = self.by_prompt.get(&prompt) {
            assert_eq!(previous, &answer, "conflicting answers for prompt:\n{prompt}");
            return;
        }
        self.table.insert(&prompt, answer.clone());
        self.by_prompt.insert(prompt, answer);
    }
}

#[derive(Default)]
struct Labels(BTreeMap<(String, String), NliLabel>);

impl Labels {
    fn put(&mut self, premise: &str, hypothesis: &str, label: NliLabel) {
        let key = (premise.to_string(), hypothesis.to_string());
        if let Some(previous) = self.0.insert(key, label) {
            assert_eq!(previous, label, "conflicting classifier labels for {premise:?} -> {hypothesis:?}");
        }
    }

    fn to_jsonl(&self) -> String {
        self.0
            .iter()
            .map(|((premise, hypothesis), label)| {
                let fixture =
                    ClassifierFixture { premise: premise.clone(), hypothesis: hypothesis.clone(), label: *label };
                serde_json::to_string(&fixture).unwrap() + "\n"
            })
            .collect()
    }
}

const NLI_REASONS: [(&str, &str); 3] = [
    ("e", "The premise states this directly."),
    ("n", "The premise does not settle this."),
    ("c", "The premise rules this out."),
];

fn nli_answer(label: &str, index: usize) -> String {
    let Some((_, reason)) = NLI_REASONS.iter().find(|(l, _)| *l == label) else {
        assert_eq!(label, "x", "unknown scripted label {label}");
        return "I am not able to decide this one.\n[END]".to_string();
    };
    match index % 3 {
        0 => format!("{label}\n{reason}\n[END]"),
        1 => format!("Answer: {label}\n{reason}\n[END]"),
        _ => format!("({label}) {reason}\n[END]"),
    }
}

fn effect_answer(label: &str, index: usize) -> String {
    let reason = match label {
        "more" => "The update makes this more likely.",
        "less" => "The update makes this less likely.",
        "none" => "The update is unrelated to this.",
        "x" => return "It is hard to say.\n[END]".to_string(),
        other => panic!("unknown scripted effect {other}"),
    };
    if index.is_multiple_of(2) {
        format!("{label}\n{reason}\n[END]")
    } else {
        format!("Answer: {label}. {reason}\n[END]")
    }
}

fn decomposition_answer(texts: &[&str], style: Option<&str>) -> String {
    let mut out = String::new();
    if style == Some("header") {
        out.push_str("FACTS:\n");
    }
    for (i, t) in texts.iter().enumerate() {
        match style {
            Some("bullets") => out.push_str(&format!("- {t}\n")),
            _ => out.push_str(&format!("{}. {t}\n", i + 1)),
        }
    }
    if style == Some("repeat") {
        if let Some(first) = texts.first() {
            out.push_str(&format!("{}. {first}\n", texts.len() + 1));
        }
    }
    out.push_str("[END]");
    out
}

fn qud_answer(atom: &str) -> String {
    let body = atom.trim_end_matches('.');
    let mut chars = body.chars();
    let lowered = match chars.next() {
        Some(c) => c.to_lowercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    };
    format!("Question: Is it the case that {lowered}?\n[END]")
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).unwrap() + "\n").collect()
}

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn main() {
    let root = fixtures_dir();
    let read = |name: &str| fs::read_to_string(root.join("scenarios").join(name)).expect("scenario file");
    let nli: Vec<NliScenario> = serde_json::from_str(&read("snli20.json")).expect("snli scenario");
    let defeasible: Vec<DefeasibleScenario> = serde_json::from_str(&read("dsnli20.json")).expect("dsnli scenario");
    // Mutually entailing atom texts; other pairs fall back to the mock
    // classifier's equality and containment rule.
    let paraphrases: Vec<(String, String)> = serde_json::from_str(&read("paraphrases.json")).expect("paraphrases");

    let decomposition = ExemplarSet::builtin_decomposition();
    let qud = ExemplarSet::builtin_qud();
    let eval = EvaluationExemplars::builtin();
    let mut answers = Answers { table: MockGenerator::new(), by_prompt: BTreeMap::new() };
    let mut labels = Labels::default();
    let mut counter = 0usize;
    let mut next = || {
        counter += 1;
        counter
    };

    let mut nli_examples = Vec::new();
    for s in &nli {
        let texts: Vec<&str> = s.atoms.iter().map(|a| a.text.as_str()).collect();
        answers.put(
            build_decomposition_prompt(&s.hypothesis, &decomposition).unwrap(),
            decomposition_answer(&texts, s.style.as_deref()),
        );
        answers.put(nli_prompt(&s.premise, &s.hypothesis, &eval.nli).unwrap(), nli_answer(&s.full, next()));
        for a in &s.atoms {
            labels.put(&s.hypothesis, &a.text, a.classifier.unwrap_or(NliLabel::Entailment));
            answers.put(nli_prompt(&s.hypothesis, &a.text, &eval.nli).unwrap(), nli_answer(&a.admit, next()));
            if let Some(label) = &a.premise {
                answers.put(nli_prompt(&s.premise, &a.text, &eval.nli).unwrap(), nli_answer(label, next()));
            }
        }
        nli_examples.push(NliExample {
            id: s.id.clone(),
            premise: s.premise.clone(),
            hypothesis: s.hypothesis.clone(),
            gold: s.gold,
        });
    }

    for (u, v) in &paraphrases {
        labels.put(u, v, NliLabel::Entailment);
        labels.put(v, u, NliLabel::Entailment);
    }

    let embedder = MockEmbedder::default();
    let mut defeasible_examples = Vec::new();
    let mut annotations = Vec::new();
    let mut table1 = Vec::new();
    let mut critical_texts: Vec<(String, String)> = Vec::new();
    for s in &defeasible {
        let example = DefeasibleExample {
            id: s.id.clone(),
            premise: s.premise.clone(),
            hypothesis: s.hypothesis.clone(),
            update: s.update.clone(),
            gold: s.gold,
        };
        let texts: Vec<&str> = s.atoms.iter().map(|a| a.text.as_str()).collect();
        answers.put(build_decomposition_prompt(&s.hypothesis, &decomposition).unwrap(), decomposition_answer(&texts, None));
        answers.put(
            defeasible_prompt(&s.premise, &s.hypothesis, &s.update, &eval.defeasible).unwrap(),
            effect_answer(&s.full, next()),
        );
        let mut best = 0i8;
        for a in &s.atoms {
            let by_h = a.pruned.as_deref() != Some("hypothesis");
            labels.put(&s.hypothesis, &a.text, if by_h { NliLabel::Entailment } else { NliLabel::Neutral });
            if by_h {
                let by_p = a.pruned.as_deref() == Some("premise");
                labels.put(&s.premise, &a.text, if by_p { NliLabel::Entailment } else { NliLabel::Neutral });
            }
            if a.pruned.is_some() {
                continue;
            }
            let effect = a.effect.unwrap_or_else(|| panic!("{}: unpruned atom {:?} needs an effect", s.id, a.text));
            let id = atom_id(&s.id, &a.text);
            let mut stamp = |annotator: &str, effect: EffectScore| {
                let n = annotations.len();
                annotations.push(AnnotationRecord {
                    atom_id: id.clone(),
                    annotator_id: annotator.to_string(),
                    valid: !effect.is_invalid(),
                    effect: (!effect.is_invalid()).then_some(effect),
                    timestamp: format!("2024-03-01T09:{:02}:{:02}Z", n / 60, n % 60),
                });
            };
            stamp("ann1", effect);
            if let Some(second) = a.second {
                stamp("ann2", second);
            }
            if let Some(v) = effect.value() {
                let pred = a.pred.as_deref().unwrap_or_else(|| panic!("{}: valid atom {:?} needs pred", s.id, a.text));
                answers.put(
                    defeasible_atom_prompt(&s.premise, &a.text, &s.update, &eval.defeasible_atoms).unwrap(),
                    effect_answer(pred, next()),
                );
                let answer = match &a.qud {
                    Some(q) => format!("Question: {q}\n[END]"),
                    None => qud_answer(&a.text),
                };
                answers.put(build_qud_prompt(&a.text, &qud).unwrap(), answer);
                if v.signum() == s.gold.sign() {
                    best = best.max(v.abs());
                }
            }
        }
        for a in s.atoms.iter().filter(|a| a.pruned.is_none()) {
            if let Some(v) = a.effect.and_then(EffectScore::value) {
                if v.signum() == s.gold.sign() && v.abs() == best {
                    critical_texts.push((s.id.clone(), a.text.clone()));
                }
            }
        }
        if s.table1 {
            let atoms = s
                .atoms
                .iter()
                .enumerate()
                .map(|(i, a)| TableAtom {
                    name: format!("a{}", i + 1),
                    text: a.text.clone(),
                    effect: a.effect.expect("table rows carry every effect"),
                })
                .collect();
            table1.push(TableRow { example: example.clone(), atoms });
        }
        defeasible_examples.push(example);
    }

    // Pairs of distinct critical texts that reach the graph threshold; printed
    // so the scenario author can see which candidates the classifier decides.
    for (i, (ei, ti)) in critical_texts.iter().enumerate() {
        for (ej, tj) in &critical_texts[i + 1..] {
            if ti == tj {
                continue;
            }
            let c = cosine(&embedder.embed(ti), &embedder.embed(tj)).unwrap();
            if c >= 0.6 {
                println!("cos {c:.3}  {ei} {ti:?}  ~  {ej} {tj:?}");
            }
        }
    }

    let mock = root.join("mock");
    fs::create_dir_all(&mock).unwrap();
    let write = |path: PathBuf, text: String| fs::write(&path, text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    write(root.join("snli20.jsonl"), jsonl(&nli_examples));
    write(root.join("dsnli20.jsonl"), jsonl(&defeasible_examples));
    write(root.join("dsnli20_annotations.jsonl"), jsonl(&annotations));
    write(root.join("table1.json"), serde_json::to_string_pretty(&table1).unwrap() + "\n");
    write(mock.join("generation.json"), answers.table.to_json_pretty());
    write(mock.join("classifier.jsonl"), labels.to_jsonl());
    println!(
        "{} nli examples, {} defeasible examples, {} annotation records, {} scripted prompts",
        nli_examples.len(),
        defeasible_examples.len(),
        annotations.len(),
        answers.by_prompt.len()
    );
}
