//! Atom-level NLI: model-admitted atoms, consistency rules between full and
//! atomic predictions, induced labels, and the aggregate report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use crate::backends::Backend;
use crate::error::{Error, Result};
use crate::model::{Atom, NliExample, NliLabel, PredictedLabel, Prediction, Relation, Subject};
use crate::prompts::{nli_prompt, parse_nli_response, NliExemplar};

fn counts(labels: &[NliLabel]) -> [usize; 3] {
    let mut c = [0; 3];
    for l in labels {
        c[*l as usize] += 1;
    }
    c
}

const E: usize = NliLabel::Entailment as usize;
const N: usize = NliLabel::Neutral as usize;
const C: usize = NliLabel::Contradiction as usize;

/// Whether atom predictions agree with the full prediction: entailment needs
/// every atom entailed, contradiction needs one contradicted atom, neutral
/// needs a neutral atom and no contradicted one.
pub fn check_consistency(full: NliLabel, atom_labels: &[NliLabel]) -> Result<bool> {
    if atom_labels.is_empty() {
        return Err(Error::Precondition("consistency needs at least one atom label".into()));
    }
    let c = counts(atom_labels);
    Ok(match full {
        NliLabel::Entailment => c[E] == atom_labels.len(),
        NliLabel::Contradiction => c[C] > 0,
        NliLabel::Neutral => c[N] > 0 && c[C] == 0,
    })
}

/// Full label composed from atom labels.
pub fn induce_label(atom_labels: &[NliLabel]) -> Result<NliLabel> {
    if atom_labels.is_empty() {
        return Err(Error::Precondition("cannot induce a label from zero atoms".into()));
    }
    let c = counts(atom_labels);
    Ok(if c[C] > 0 {
        NliLabel::Contradiction
    } else if c[E] == atom_labels.len() {
        NliLabel::Entailment
    } else {
        NliLabel::Neutral
    })
}

/// Asks the generator for one NLI label. Unparseable answers become neutral
/// with `parse_failed` set.
pub async fn predict_nli(
    generator: &Backend,
    exemplars: &[NliExemplar],
    subject: Subject,
    premise: &str,
    hypothesis: &str,
) -> Result<Prediction> {
    let prompt = nli_prompt(premise, hypothesis, exemplars)?;
    let raw = generator.generate(&prompt).await.map_err(|e| e.context(describe(&subject)))?;
    let parsed = parse_nli_response(&raw);
    if parsed.is_none() {
        log::warn!("unparseable NLI answer for {}", describe(&subject));
    }
    Ok(Prediction {
        predicted: PredictedLabel::Nli(parsed.unwrap_or(NliLabel::Neutral)),
        parse_failed: parsed.is_none(),
        raw_response: raw,
        backend_id: generator.backend_id().to_string(),
        subject,
    })
}

fn describe(subject: &Subject) -> String {
    match &subject.atom_id {
        Some(atom) => format!("{} atom {atom} ({:?})", subject.example_id, subject.relation),
        None => format!("{} ({:?})", subject.example_id, subject.relation),
    }
}

fn nli_of(p: &Prediction) -> NliLabel {
    match p.predicted {
        PredictedLabel::Nli(l) => l,
        PredictedLabel::Effect(_) => unreachable!("NLI predictions only"),
    }
}

/// The atoms the model itself judges entailed by the hypothesis, with the
/// underlying predictions.
pub async fn admit_atoms(
    hypothesis: &str,
    atoms: &[Atom],
    generator: &Backend,
    exemplars: &[NliExemplar],
    parallelism: usize,
) -> Result<(Vec<String>, Vec<Prediction>)> {
    if let Some(first) = atoms.first() {
        if let Some(stray) = atoms.iter().find(|a| a.parent_example_id != first.parent_example_id) {
            return Err(Error::Precondition(format!(
                "atom {} belongs to {}, not {}",
                stray.atom_id, stray.parent_example_id, first.parent_example_id
            )));
        }
    }
    let predictions: Vec<Prediction> = stream::iter(atoms)
        .map(|atom| {
            let subject = Subject {
                example_id: atom.parent_example_id.clone(),
                atom_id: Some(atom.atom_id.clone()),
                relation: Relation::HypothesisAtom,
            };
            predict_nli(generator, exemplars, subject, hypothesis, &atom.text)
        })
        .buffered(parallelism.max(1))
        .try_collect()
        .await?;
    let admitted = atoms
        .iter()
        .zip(&predictions)
        .filter(|(_, p)| nli_of(p) == NliLabel::Entailment)
        .map(|(a, _)| a.atom_id.clone())
        .collect();
    Ok((admitted, predictions))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliEvaluationRecord {
    pub example_id: String,
    pub full_prediction: NliLabel,
    pub admitted_atoms: Vec<String>,
    pub atom_predictions: BTreeMap<String, NliLabel>,
    /// Absent when no atom was admitted.
    pub consistent: Option<bool>,
    pub induced: Option<NliLabel>,
    #[serde(default)]
    pub parse_failures: u32,
}

impl NliEvaluationRecord {
    pub fn new(
        example_id: &str,
        full_prediction: NliLabel,
        admitted_atoms: Vec<String>,
        atom_predictions: BTreeMap<String, NliLabel>,
        parse_failures: u32,
    ) -> Result<Self> {
        let keys: Vec<&String> = atom_predictions.keys().collect();
        let mut admitted: Vec<&String> = admitted_atoms.iter().collect();
        admitted.sort();
        if keys != admitted {
            return Err(Error::Integrity(format!("{example_id}: atom predictions do not match admitted atoms")));
        }
        let labels: Vec<NliLabel> = admitted_atoms.iter().map(|a| atom_predictions[a]).collect();
        let (consistent, induced) = if labels.is_empty() {
            (None, None)
        } else {
            (Some(check_consistency(full_prediction, &labels)?), Some(induce_label(&labels)?))
        };
        Ok(NliEvaluationRecord {
            example_id: example_id.to_string(),
            full_prediction,
            admitted_atoms,
            atom_predictions,
            consistent,
            induced,
            parse_failures,
        })
    }

    pub fn excluded(&self) -> bool {
        self.admitted_atoms.is_empty()
    }
}

/// Full prediction, atom admission, and premise-vs-atom predictions for one
/// example.
pub async fn evaluate_example(
    example: &NliExample,
    atoms: &[Atom],
    generator: &Backend,
    exemplars: &[NliExemplar],
    parallelism: usize,
) -> Result<(NliEvaluationRecord, Vec<Prediction>)> {
    let full_subject = Subject { example_id: example.id.clone(), atom_id: None, relation: Relation::PremiseHypothesis };
    let full = predict_nli(generator, exemplars, full_subject, &example.premise, &example.hypothesis).await?;
    let (admitted, mut predictions) = admit_atoms(&example.hypothesis, atoms, generator, exemplars, parallelism).await?;
    let admitted_atoms: Vec<&Atom> = atoms.iter().filter(|a| admitted.contains(&a.atom_id)).collect();
    let atom_preds: Vec<Prediction> = stream::iter(admitted_atoms)
        .map(|atom| {
            let subject = Subject {
                example_id: example.id.clone(),
                atom_id: Some(atom.atom_id.clone()),
                relation: Relation::PremiseAtom,
            };
            predict_nli(generator, exemplars, subject, &example.premise, &atom.text)
        })
        .buffered(parallelism.max(1))
        .try_collect()
        .await?;
    let atom_predictions = atom_preds
        .iter()
        .map(|p| (p.subject.atom_id.clone().expect("atom subject"), nli_of(p)))
        .collect();
    predictions.insert(0, full);
    predictions.extend(atom_preds);
    let failures = predictions.iter().filter(|p| p.parse_failed).count() as u32;
    let record = NliEvaluationRecord::new(&example.id, nli_of(&predictions[0]), admitted, atom_predictions, failures)?;
    Ok((record, predictions))
}

/// A count-based percentage; `percent` is absent for an empty denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub numerator: usize,
    pub denominator: usize,
    pub percent: Option<f64>,
}

impl Ratio {
    pub fn new(numerator: usize, denominator: usize) -> Self {
        let percent = (denominator > 0).then(|| 100.0 * numerator as f64 / denominator as f64);
        Ratio { numerator, denominator, percent }
    }

    pub fn fraction(&self) -> Option<f64> {
        (self.denominator > 0).then(|| self.numerator as f64 / self.denominator as f64)
    }

    pub fn cell(&self) -> String {
        match self.percent {
            Some(p) => format!("{p:.1} ({}/{})", self.numerator, self.denominator),
            None => format!("n/a (0/{})", self.denominator),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyByLabel {
    pub entailment: Ratio,
    pub neutral: Ratio,
    pub contradiction: Ratio,
}

impl ConsistencyByLabel {
    pub fn get(&self, label: NliLabel) -> &Ratio {
        match label {
            NliLabel::Entailment => &self.entailment,
            NliLabel::Neutral => &self.neutral,
            NliLabel::Contradiction => &self.contradiction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub examples: usize,
    pub full_example_accuracy: Ratio,
    pub overall_logical_consistency: Ratio,
    pub consistency_on_correct_exs: Ratio,
    pub consistency_on_incorrect_exs: Ratio,
    pub logical_consistency_by_label: ConsistencyByLabel,
    pub induced_atom_label_accuracy: Ratio,
    pub excluded_zero_atom_examples: usize,
    pub parse_failures: usize,
    pub exclusion_policy: String,
}

pub const EXCLUSION_POLICY: &str = "examples with no admitted atoms count toward full-example accuracy only; \
consistency and induced-label columns are computed over the remaining examples";

pub fn consistency_report(
    records: &[NliEvaluationRecord],
    gold: &BTreeMap<String, NliLabel>,
) -> Result<ConsistencyReport> {
    let missing: Vec<&str> =
        records.iter().map(|r| r.example_id.as_str()).filter(|id| !gold.contains_key(*id)).collect();
    if !missing.is_empty() {
        return Err(Error::Integrity(format!("no gold label for: {}", missing.join(", "))));
    }
    let mut sorted: Vec<&NliEvaluationRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.example_id.cmp(&b.example_id));

    let mut full_correct = 0;
    let mut included = 0;
    let mut consistent = 0;
    let mut on_correct = (0, 0);
    let mut on_incorrect = (0, 0);
    let mut by_label = [(0, 0); 3];
    let mut induced_correct = 0;
    for r in &sorted {
        let g = gold[&r.example_id];
        let correct = r.full_prediction == g;
        full_correct += usize::from(correct);
        let (Some(cons), Some(induced)) = (r.consistent, r.induced) else { continue };
        included += 1;
        consistent += usize::from(cons);
        let slot = if correct { &mut on_correct } else { &mut on_incorrect };
        slot.0 += usize::from(cons);
        slot.1 += 1;
        let slot = &mut by_label[r.full_prediction as usize];
        slot.0 += usize::from(cons);
        slot.1 += 1;
        induced_correct += usize::from(induced == g);
    }
    let ratio = |(n, d): (usize, usize)| Ratio::new(n, d);
    Ok(ConsistencyReport {
        examples: sorted.len(),
        full_example_accuracy: Ratio::new(full_correct, sorted.len()),
        overall_logical_consistency: Ratio::new(consistent, included),
        consistency_on_correct_exs: ratio(on_correct),
        consistency_on_incorrect_exs: ratio(on_incorrect),
        logical_consistency_by_label: ConsistencyByLabel {
            entailment: ratio(by_label[E]),
            neutral: ratio(by_label[N]),
            contradiction: ratio(by_label[C]),
        },
        induced_atom_label_accuracy: Ratio::new(induced_correct, included),
        excluded_zero_atom_examples: sorted.len() - included,
        parse_failures: sorted.iter().map(|r| r.parse_failures as usize).sum(),
        exclusion_policy: EXCLUSION_POLICY.to_string(),
    })
}

impl ConsistencyReport {
    pub fn to_text(&self) -> String {
        let rows = [
            ("Full Example Accuracy", self.full_example_accuracy),
            ("Overall Logical Consistency", self.overall_logical_consistency),
            ("Consistency on Correct Exs", self.consistency_on_correct_exs),
            ("Consistency on Incorrect Exs", self.consistency_on_incorrect_exs),
            ("Logical Consistency (entailment)", self.logical_consistency_by_label.entailment),
            ("Logical Consistency (neutral)", self.logical_consistency_by_label.neutral),
            ("Logical Consistency (contradiction)", self.logical_consistency_by_label.contradiction),
            ("Induced Atom Label Accuracy", self.induced_atom_label_accuracy),
        ];
        let mut out = String::new();
        for (name, r) in rows {
            let _ = writeln!(out, "{name:<38} {}", r.cell());
        }
        let _ = writeln!(out, "{:<38} {}", "Examples", self.examples);
        let _ = writeln!(out, "{:<38} {}", "Excluded (no admitted atoms)", self.excluded_zero_atom_examples);
        let _ = writeln!(out, "{:<38} {}", "Parse failures", self.parse_failures);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendDescriptor, BackendOptions, MockGenerator};
    use crate::prompts::EvaluationExemplars;
    use proptest::prelude::*;
    use std::sync::Arc;
    use NliLabel::*;

    /// Each rule written as a quantifier over positions.
    fn rules_oracle(full: NliLabel, labels: &[NliLabel]) -> bool {
        let all = |l: NliLabel| labels.iter().all(|x| *x == l);
        let any = |l: NliLabel| labels.contains(&l);
        match full {
            Entailment => all(Entailment),
            Contradiction => any(Contradiction),
            Neutral => any(Neutral) && labels.iter().all(|x| *x == Neutral || *x == Entailment),
        }
    }

    fn induce_oracle(labels: &[NliLabel]) -> NliLabel {
        if labels.iter().all(|x| *x == Entailment) {
            Entailment
        } else if labels.contains(&Contradiction) {
            Contradiction
        } else {
            Neutral
        }
    }

    fn all_sequences(max_len: usize) -> Vec<Vec<NliLabel>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            frontier = frontier
                .iter()
                .flat_map(|s: &Vec<NliLabel>| NliLabel::ALL.iter().map(move |l| [s.clone(), vec![*l]].concat()))
                .collect();
            out.extend(frontier.clone());
        }
        out
    }

    #[test]
    fn rules_match_oracle_exhaustively() {
        let seqs = all_sequences(4);
        assert_eq!(seqs.len(), 1 + 3 + 9 + 27 + 81);
        for full in NliLabel::ALL {
            for s in &seqs {
                if s.is_empty() {
                    assert!(check_consistency(full, s).is_err());
                    continue;
                }
                assert_eq!(check_consistency(full, s).unwrap(), rules_oracle(full, s), "{full:?} {s:?}");
            }
        }
        for s in seqs.iter().filter(|s| !s.is_empty()) {
            assert_eq!(induce_label(s).unwrap(), induce_oracle(s));
        }
        assert!(induce_label(&[]).is_err());
    }

    #[test]
    fn listed_cases() {
        assert!(check_consistency(Entailment, &[Entailment; 3]).unwrap());
        assert!(!check_consistency(Contradiction, &[Entailment, Neutral, Neutral]).unwrap());
        assert!(!check_consistency(Neutral, &[Neutral, Contradiction]).unwrap());
        assert_eq!(induce_label(&[Entailment, Entailment]).unwrap(), Entailment);
        assert_eq!(induce_label(&[Entailment, Contradiction, Neutral]).unwrap(), Contradiction);
        assert_eq!(induce_label(&[Entailment, Neutral]).unwrap(), Neutral);
    }

    fn label() -> impl Strategy<Value = NliLabel> {
        prop_oneof![Just(Entailment), Just(Neutral), Just(Contradiction)]
    }

    proptest! {
        #[test]
        fn induced_label_is_always_consistent(labels in prop::collection::vec(label(), 1..12)) {
            prop_assert!(check_consistency(induce_label(&labels).unwrap(), &labels).unwrap());
        }

        #[test]
        fn consistency_ignores_order(labels in prop::collection::vec(label(), 1..8), full in label(), k in 0usize..8) {
            let mut rotated = labels.clone();
            rotated.rotate_left(k % labels.len());
            prop_assert_eq!(check_consistency(full, &labels).unwrap(), check_consistency(full, &rotated).unwrap());
        }

        #[test]
        fn duplicating_a_label_keeps_e_and_c_results(labels in prop::collection::vec(label(), 1..8), i in 0usize..8) {
            let mut more = labels.clone();
            more.push(labels[i % labels.len()]);
            for full in [Entailment, Contradiction, Neutral] {
                prop_assert_eq!(check_consistency(full, &labels).unwrap(), check_consistency(full, &more).unwrap());
            }
        }

        #[test]
        fn per_label_consistency_aggregates(rows in prop::collection::vec((label(), label(), prop::collection::vec(label(), 0..4)), 1..40)) {
            let mut gold = BTreeMap::new();
            let records: Vec<NliEvaluationRecord> = rows.iter().enumerate().map(|(i, (g, full, atoms))| {
                let id = format!("x{i:03}");
                gold.insert(id.clone(), *g);
                let admitted: Vec<String> = (0..atoms.len()).map(|j| format!("a{j}")).collect();
                let preds = admitted.iter().cloned().zip(atoms.iter().copied()).collect();
                NliEvaluationRecord::new(&id, *full, admitted, preds, 0).unwrap()
            }).collect();
            let report = consistency_report(&records, &gold).unwrap();
            let total = report.overall_logical_consistency.denominator;
            if total > 0 {
                let weighted: f64 = NliLabel::ALL.iter().map(|l| {
                    let r = report.logical_consistency_by_label.get(*l);
                    r.fraction().map_or(0.0, |f| f * r.denominator as f64)
                }).sum::<f64>() / total as f64;
                prop_assert!((weighted - report.overall_logical_consistency.fraction().unwrap()).abs() < 1e-12);
            }
            prop_assert_eq!(report.excluded_zero_atom_examples + total, rows.len());
        }
    }

    fn rec(id: &str, full: NliLabel, atoms: &[NliLabel]) -> NliEvaluationRecord {
        let admitted: Vec<String> = (0..atoms.len()).map(|j| format!("{id}-a{j}")).collect();
        let preds = admitted.iter().cloned().zip(atoms.iter().copied()).collect();
        NliEvaluationRecord::new(id, full, admitted, preds, 0).unwrap()
    }

    #[test]
    fn report_arithmetic() {
        let records = [rec("1", Entailment, &[Entailment]), rec("2", Contradiction, &[Contradiction, Neutral])];
        let gold = BTreeMap::from([("1".to_string(), Entailment), ("2".to_string(), Neutral)]);
        let report = consistency_report(&records, &gold).unwrap();
        assert_eq!(report.overall_logical_consistency.percent, Some(100.0));
        assert_eq!(report.full_example_accuracy.percent, Some(50.0));
        assert_eq!(report.consistency_on_incorrect_exs, Ratio::new(1, 1));
        assert_eq!(report.logical_consistency_by_label.neutral.percent, None);
        assert_eq!(report.induced_atom_label_accuracy, Ratio::new(1, 2));
    }

    #[test]
    fn all_entailment_run() {
        let records = [rec("1", Entailment, &[Entailment; 2]), rec("2", Entailment, &[Entailment])];
        let gold = BTreeMap::from([("1".to_string(), Entailment), ("2".to_string(), Neutral)]);
        let report = consistency_report(&records, &gold).unwrap();
        assert_eq!(report.logical_consistency_by_label.entailment.percent, Some(100.0));
    }

    #[test]
    fn zero_admitted_examples_are_excluded_and_counted() {
        let records = [rec("1", Neutral, &[]), rec("2", Neutral, &[Neutral])];
        let gold = BTreeMap::from([("1".to_string(), Neutral), ("2".to_string(), Neutral)]);
        let report = consistency_report(&records, &gold).unwrap();
        assert_eq!(report.excluded_zero_atom_examples, 1);
        assert_eq!(report.full_example_accuracy, Ratio::new(2, 2));
        assert_eq!(report.overall_logical_consistency, Ratio::new(1, 1));
        assert!(report.to_text().contains("Excluded (no admitted atoms)"));
        let err = consistency_report(&records, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn record_rejects_mismatched_keys() {
        let err = NliEvaluationRecord::new("x", Neutral, vec!["a".into()], BTreeMap::new(), 0).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[tokio::test]
    async fn admission_and_evaluation_with_fixture_generator() {
        let ex = EvaluationExemplars::builtin().nli;
        assert_eq!(ex.len(), 12);
        let example = NliExample {
            id: "s1".into(),
            premise: "A man plays a guitar on stage.".into(),
            hypothesis: "A man performs music.".into(),
            gold: Entailment,
        };
        let atoms = Atom::collect_unique("s1", ["There is a man.", "The man performs.", "The performance is music."]);
        let mut table = MockGenerator::new();
        let mut put = |p: &str, h: &str, answer: &str| table.insert(&nli_prompt(p, h, &ex).unwrap(), answer);
        put(&example.premise, &example.hypothesis, "e\nA guitar is music.\n[END]");
        put(&example.hypothesis, &atoms[0].text, "e\nStated.\n[END]");
        put(&example.hypothesis, &atoms[1].text, "n\nNot stated.\n[END]");
        put(&example.hypothesis, &atoms[2].text, "e\nStated.\n[END]");
        put(&example.premise, &atoms[0].text, "e\nYes.\n[END]");
        put(&example.premise, &atoms[2].text, "???");
        let gen = Backend::new(BackendDescriptor::mock("gen"), Arc::new(table), None, BackendOptions::default());

        let (admitted, _) = admit_atoms(&example.hypothesis, &atoms, &gen, &ex, 4).await.unwrap();
        assert_eq!(admitted, vec![atoms[0].atom_id.clone(), atoms[2].atom_id.clone()]);

        let (record, preds) = evaluate_example(&example, &atoms, &gen, &ex, 4).await.unwrap();
        assert_eq!(preds.len(), 1 + 3 + 2);
        assert_eq!(record.full_prediction, Entailment);
        assert_eq!(record.atom_predictions[&atoms[2].atom_id], Neutral);
        assert_eq!(record.parse_failures, 1);
        assert_eq!(record.consistent, Some(false));
        assert_eq!(record.induced, Some(Neutral));
    }

    #[tokio::test]
    async fn admission_rejects_foreign_atoms() {
        let gen = Backend::new(BackendDescriptor::mock("gen"), Arc::new(MockGenerator::new()), None, BackendOptions::default());
        let atoms = vec![Atom::new("a", "x"), Atom::new("b", "y")];
        assert!(matches!(admit_atoms("h", &atoms, &gen, &[], 1).await, Err(Error::Precondition(_))));
    }
}
