//! Defeasible sub-problems, critical atoms, model evaluation, and the
//! accuracy/conditional-probability report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use crate::backends::Backend;
use crate::error::{Error, Result};
use crate::model::{
    ternary_of_effect, Atom, DefeasibleExample, DefeasibleLabel, EffectScore, PredictedLabel, Prediction, Relation,
    Subject, TernaryEffect,
};
use crate::nli::Ratio;
use crate::prompts::{defeasible_atom_prompt, defeasible_prompt, parse_effect_response, EvaluationExemplars};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefeasibleSubProblem {
    pub example_id: String,
    pub atom_id: String,
    pub premise: String,
    pub atom_text: String,
    pub update: String,
    pub gold_effect: EffectScore,
}

/// One sub-problem per human-valid atom of `example`, ordered by atom id.
/// Atoms of other examples and atoms judged invalid are skipped.
pub fn build_subproblems(example: &DefeasibleExample, atoms: &[Atom]) -> Result<Vec<DefeasibleSubProblem>> {
    let mut out = Vec::new();
    for atom in atoms.iter().filter(|a| a.parent_example_id == example.id && a.human_valid == Some(true)) {
        let gold_effect = match atom.effect_gold {
            Some(e) if !e.is_invalid() => e,
            _ => {
                return Err(Error::Integrity(format!(
                    "valid atom {} of {} has no gold effect",
                    atom.atom_id, example.id
                )))
            }
        };
        out.push(DefeasibleSubProblem {
            example_id: example.id.clone(),
            atom_id: atom.atom_id.clone(),
            premise: example.premise.clone(),
            atom_text: atom.text.clone(),
            update: example.update.clone(),
            gold_effect,
        });
    }
    out.sort_by(|a, b| a.atom_id.cmp(&b.atom_id));
    if out.is_empty() {
        log::warn!("{} has no valid atoms", example.id);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticalAtomSet {
    pub example_id: String,
    pub atom_ids: Vec<String>,
    pub polarity: DefeasibleLabel,
    /// Absent when no atom matches the polarity.
    pub magnitude: Option<u8>,
}

impl CriticalAtomSet {
    pub fn is_empty(&self) -> bool {
        self.atom_ids.is_empty()
    }
}

/// Valid atoms whose effect points the same way as the example label and
/// attains the largest magnitude among those that do.
pub fn identify_critical_atoms(
    example: &DefeasibleExample,
    subproblems: &[DefeasibleSubProblem],
) -> Result<CriticalAtomSet> {
    if let Some(stray) = subproblems.iter().find(|s| s.example_id != example.id) {
        return Err(Error::Precondition(format!("sub-problem {} is not from {}", stray.atom_id, example.id)));
    }
    let sign = example.gold.sign();
    let matching: Vec<(&str, i8)> = subproblems
        .iter()
        .filter_map(|s| s.gold_effect.value().map(|v| (s.atom_id.as_str(), v)))
        .filter(|(_, v)| v.signum() == sign)
        .collect();
    let best = matching.iter().map(|(_, v)| v.abs()).max();
    let atom_ids: BTreeSet<&str> =
        matching.iter().filter(|(_, v)| Some(v.abs()) == best).map(|(id, _)| *id).collect();
    if atom_ids.is_empty() {
        log::warn!("{} has no atom in the direction of its label", example.id);
    }
    Ok(CriticalAtomSet {
        example_id: example.id.clone(),
        atom_ids: atom_ids.into_iter().map(str::to_string).collect(),
        polarity: example.gold,
        magnitude: best.map(|b| b as u8),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomOutcome {
    pub atom_id: String,
    pub gold_effect: EffectScore,
    pub predicted: TernaryEffect,
    #[serde(default)]
    pub parse_failed: bool,
}

impl AtomOutcome {
    /// Sign agreement between the ternary prediction and the five-point gold.
    pub fn correct(&self) -> bool {
        ternary_of_effect(self.gold_effect).map(|g| g == self.predicted).unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefeasibleEvaluationRecord {
    pub example_id: String,
    pub gold: DefeasibleLabel,
    pub full_prediction: DefeasibleLabel,
    #[serde(default)]
    pub full_parse_failed: bool,
    pub atoms: Vec<AtomOutcome>,
}

impl DefeasibleEvaluationRecord {
    pub fn full_correct(&self) -> bool {
        self.full_prediction == self.gold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DefeasibleOptions {
    /// Label recorded when a full-example answer cannot be parsed.
    pub unparsed_full: DefeasibleLabel,
    pub parallelism: usize,
}

impl Default for DefeasibleOptions {
    fn default() -> Self {
        DefeasibleOptions { unparsed_full: DefeasibleLabel::Weakener, parallelism: 8 }
    }
}

fn effect_prediction(subject: Subject, raw: String, parsed: TernaryEffect, failed: bool, backend: &Backend) -> Prediction {
    Prediction {
        subject,
        predicted: PredictedLabel::Effect(parsed),
        raw_response: raw,
        backend_id: backend.backend_id().to_string(),
        parse_failed: failed,
    }
}

async fn evaluate_one(
    example: &DefeasibleExample,
    subproblems: &[&DefeasibleSubProblem],
    generator: &Backend,
    exemplars: &EvaluationExemplars,
    options: DefeasibleOptions,
) -> Result<(DefeasibleEvaluationRecord, Vec<Prediction>)> {
    let prompt = defeasible_prompt(&example.premise, &example.hypothesis, &example.update, &exemplars.defeasible)?;
    let raw = generator.generate(&prompt).await.map_err(|e| e.context(format!("{} full example", example.id)))?;
    let parsed = parse_effect_response(&raw, false);
    if parsed.is_none() {
        log::warn!("unparseable answer for {}", example.id);
    }
    let full_prediction = match parsed {
        Some(TernaryEffect::More) => DefeasibleLabel::Strengthener,
        Some(_) => DefeasibleLabel::Weakener,
        None => options.unparsed_full,
    };
    let subject = Subject { example_id: example.id.clone(), atom_id: None, relation: Relation::FullUpdate };
    let mut predictions =
        vec![effect_prediction(subject, raw, full_prediction.as_effect(), parsed.is_none(), generator)];

    let atom_results: Vec<(AtomOutcome, Prediction)> = stream::iter(subproblems)
        .map(|sp| async move {
            let prompt = defeasible_atom_prompt(&sp.premise, &sp.atom_text, &sp.update, &exemplars.defeasible_atoms)?;
            let raw = generator
                .generate(&prompt)
                .await
                .map_err(|e| e.context(format!("{} atom {}", sp.example_id, sp.atom_id)))?;
            let parsed = parse_effect_response(&raw, true);
            if parsed.is_none() {
                log::warn!("unparseable answer for {} atom {}", sp.example_id, sp.atom_id);
            }
            let predicted = parsed.unwrap_or(TernaryEffect::None);
            let subject = Subject {
                example_id: sp.example_id.clone(),
                atom_id: Some(sp.atom_id.clone()),
                relation: Relation::AtomUpdate,
            };
            let outcome = AtomOutcome {
                atom_id: sp.atom_id.clone(),
                gold_effect: sp.gold_effect,
                predicted,
                parse_failed: parsed.is_none(),
            };
            Ok::<_, Error>((outcome, effect_prediction(subject, raw, predicted, parsed.is_none(), generator)))
        })
        .buffered(options.parallelism.max(1))
        .try_collect()
        .await?;
    let mut atoms = Vec::with_capacity(atom_results.len());
    for (outcome, prediction) in atom_results {
        atoms.push(outcome);
        predictions.push(prediction);
    }
    let record = DefeasibleEvaluationRecord {
        example_id: example.id.clone(),
        gold: example.gold,
        full_prediction,
        full_parse_failed: parsed.is_none(),
        atoms,
    };
    Ok((record, predictions))
}

/// Full-example (more/less) and atom (more/less/none) predictions for every
/// example, in example order.
pub async fn evaluate_defeasible(
    examples: &[DefeasibleExample],
    subproblems: &[DefeasibleSubProblem],
    generator: &Backend,
    exemplars: &EvaluationExemplars,
    options: DefeasibleOptions,
) -> Result<(Vec<DefeasibleEvaluationRecord>, Vec<Prediction>)> {
    if exemplars.defeasible.is_empty() || exemplars.defeasible_atoms.is_empty() {
        return Err(Error::Precondition("defeasible exemplars must be loaded".into()));
    }
    let mut by_example: BTreeMap<&str, Vec<&DefeasibleSubProblem>> = BTreeMap::new();
    for sp in subproblems {
        by_example.entry(sp.example_id.as_str()).or_default().push(sp);
    }
    let known: BTreeSet<&str> = examples.iter().map(|e| e.id.as_str()).collect();
    if let Some(stray) = by_example.keys().find(|id| !known.contains(*id)) {
        return Err(Error::Integrity(format!("sub-problems reference unknown example {stray}")));
    }
    let results: Vec<_> = stream::iter(examples)
        .map(|ex| {
            let sps = by_example.get(ex.id.as_str()).cloned().unwrap_or_default();
            async move { evaluate_one(ex, &sps, generator, exemplars, options).await }
        })
        .buffered(options.parallelism.max(1))
        .try_collect()
        .await?;
    let mut records = Vec::with_capacity(results.len());
    let mut predictions = Vec::new();
    for (r, p) in results {
        records.push(r);
        predictions.extend(p);
    }
    Ok((records, predictions))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table3Report {
    pub examples: usize,
    pub full_example_accuracy: Ratio,
    pub atom_accuracy: Ratio,
    pub atom_accuracy_non_neutral: Ratio,
    pub critical_atom_accuracy: Ratio,
    pub p_full_correct_given_critical_correct: Ratio,
    pub p_full_correct_given_critical_incorrect: Ratio,
    pub examples_with_critical_atoms: usize,
    pub empty_critical_examples: usize,
    pub full_parse_failures: usize,
    pub atom_parse_failures: usize,
}

pub fn table3_metrics(records: &[DefeasibleEvaluationRecord], critical_sets: &[CriticalAtomSet]) -> Result<Table3Report> {
    let critical: BTreeMap<&str, &CriticalAtomSet> =
        critical_sets.iter().map(|c| (c.example_id.as_str(), c)).collect();
    let mut sorted: Vec<&DefeasibleEvaluationRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.example_id.cmp(&b.example_id));

    let mut full = (0, 0);
    let mut atom = (0, 0);
    let mut non_neutral = (0, 0);
    let mut crit_atoms = (0, 0);
    let mut given_crit_ok = (0, 0);
    let mut given_crit_bad = (0, 0);
    let mut empty_critical = 0;
    for r in &sorted {
        let full_ok = r.full_correct();
        full.0 += usize::from(full_ok);
        full.1 += 1;
        for a in &r.atoms {
            atom.0 += usize::from(a.correct());
            atom.1 += 1;
            if a.gold_effect.value().is_some_and(|v| v != 0) {
                non_neutral.0 += usize::from(a.correct());
                non_neutral.1 += 1;
            }
        }
        let set = match critical.get(r.example_id.as_str()) {
            Some(set) if !set.is_empty() => set,
            _ => {
                empty_critical += 1;
                continue;
            }
        };
        let mut all_ok = true;
        for id in &set.atom_ids {
            let outcome = r.atoms.iter().find(|a| &a.atom_id == id).ok_or_else(|| {
                Error::Integrity(format!("{}: no prediction for critical atom {id}", r.example_id))
            })?;
            crit_atoms.0 += usize::from(outcome.correct());
            crit_atoms.1 += 1;
            all_ok &= outcome.correct();
        }
        let slot = if all_ok { &mut given_crit_ok } else { &mut given_crit_bad };
        slot.0 += usize::from(full_ok);
        slot.1 += 1;
    }
    let ratio = |(n, d): (usize, usize)| Ratio::new(n, d);
    Ok(Table3Report {
        examples: sorted.len(),
        full_example_accuracy: ratio(full),
        atom_accuracy: ratio(atom),
        atom_accuracy_non_neutral: ratio(non_neutral),
        critical_atom_accuracy: ratio(crit_atoms),
        p_full_correct_given_critical_correct: ratio(given_crit_ok),
        p_full_correct_given_critical_incorrect: ratio(given_crit_bad),
        examples_with_critical_atoms: sorted.len() - empty_critical,
        empty_critical_examples: empty_critical,
        full_parse_failures: sorted.iter().filter(|r| r.full_parse_failed).count(),
        atom_parse_failures: sorted.iter().flat_map(|r| &r.atoms).filter(|a| a.parse_failed).count(),
    })
}

impl Table3Report {
    pub fn to_text(&self) -> String {
        let rows = [
            ("Full Example Accuracy", self.full_example_accuracy),
            ("Atom Accuracy", self.atom_accuracy),
            ("Atom Accuracy (non-neutral gold)", self.atom_accuracy_non_neutral),
            ("Critical Atom Accuracy", self.critical_atom_accuracy),
            ("P(Full correct | Critical correct)", self.p_full_correct_given_critical_correct),
            ("P(Full correct | Critical incorrect)", self.p_full_correct_given_critical_incorrect),
        ];
        let mut out = String::new();
        for (name, r) in rows {
            let _ = writeln!(out, "{name:<38} {}", r.cell());
        }
        let _ = writeln!(out, "{:<38} {}", "Examples", self.examples);
        let _ = writeln!(out, "{:<38} {}", "Examples without critical atoms", self.empty_critical_examples);
        let _ = writeln!(out, "{:<38} {}", "Parse failures (full)", self.full_parse_failures);
        let _ = writeln!(out, "{:<38} {}", "Parse failures (atoms)", self.atom_parse_failures);
        out
    }
}
