//! Machine pruning of candidate atoms and ingestion of human annotations.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use crate::backends::Backend;
use crate::error::{Error, Result};
use crate::model::{Atom, EffectScore, NliLabel};

/// Keep the atom iff the hypothesis entails it.
pub async fn prune_by_hypothesis(atom: &Atom, hypothesis: &str, nli: &Backend) -> Result<bool> {
    require_text(atom)?;
    let label = nli
        .classify_entailment(hypothesis, &atom.text)
        .await
        .map_err(|e| e.context(format!("hypothesis check for atom {}", atom.atom_id)))?;
    Ok(label == NliLabel::Entailment)
}

/// Keep the atom iff the premise does not entail it.
pub async fn prune_by_premise(atom: &Atom, premise: &str, nli: &Backend) -> Result<bool> {
    require_text(atom)?;
    let label = nli
        .classify_entailment(premise, &atom.text)
        .await
        .map_err(|e| e.context(format!("premise check for atom {}", atom.atom_id)))?;
    Ok(label != NliLabel::Entailment)
}

fn require_text(atom: &Atom) -> Result<()> {
    if atom.text.trim().is_empty() {
        return Err(Error::Precondition(format!("atom {} has empty text", atom.atom_id)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub atom_id: String,
    pub example_id: String,
    pub entailed_by_hypothesis: bool,
    /// Only asked for atoms that passed the hypothesis check in the
    /// defeasible flow.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entailed_by_premise: Option<bool>,
    pub keep: bool,
}

/// Runs both pruning stages for one example's atoms. `premise` is `None` in
/// the traditional flow, where only the hypothesis check applies. Output
/// order follows `atoms`.
pub async fn prune_atoms(
    atoms: &[Atom],
    hypothesis: &str,
    premise: Option<&str>,
    nli: &Backend,
    parallelism: usize,
) -> Result<Vec<PruneDecision>> {
    stream::iter(atoms)
        .map(|atom| async move {
            let by_h = prune_by_hypothesis(atom, hypothesis, nli).await?;
            let by_p = match (by_h, premise) {
                (true, Some(p)) => Some(!prune_by_premise(atom, p, nli).await?),
                _ => None,
            };
            Ok::<_, Error>(PruneDecision {
                atom_id: atom.atom_id.clone(),
                example_id: atom.parent_example_id.clone(),
                entailed_by_hypothesis: by_h,
                entailed_by_premise: by_p,
                keep: by_h && by_p != Some(true),
            })
        })
        .buffered(parallelism.max(1))
        .try_collect()
        .await
}

/// Validity pairs and effect pairs for two annotators.
pub type PairedJudgments = (Vec<(bool, bool)>, Vec<(i8, i8)>);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub atom_id: String,
    pub annotator_id: String,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effect: Option<EffectScore>,
    pub timestamp: String,
}

impl AnnotationRecord {
    /// Field-level checks. Effects are required exactly for valid atoms of
    /// defeasible examples.
    pub fn check(&self, defeasible: bool) -> std::result::Result<(), Vec<(String, String)>> {
        let mut problems = Vec::new();
        if self.atom_id.trim().is_empty() {
            problems.push(("atom_id".into(), "must be non-empty".into()));
        }
        if self.annotator_id.trim().is_empty() {
            problems.push(("annotator_id".into(), "must be non-empty".into()));
        }
        match (self.effect, self.valid && defeasible) {
            (Some(EffectScore::Invalid), _) => {
                problems.push(("effect".into(), "use valid=false instead of an invalid effect".into()))
            }
            (None, true) => problems.push(("effect".into(), "required when valid is true".into())),
            (Some(_), false) if !self.valid => {
                problems.push(("effect".into(), "must be absent when valid is false".into()))
            }
            (Some(_), false) => problems.push(("effect".into(), "not used for this task".into())),
            _ => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

/// Keeps the last record per (atom, annotator), in first-seen order.
pub fn latest_records(records: &[AnnotationRecord]) -> Vec<AnnotationRecord> {
    let mut index: HashMap<(&str, &str), usize> = HashMap::new();
    let mut out: Vec<AnnotationRecord> = Vec::new();
    for r in records {
        match index.get(&(r.atom_id.as_str(), r.annotator_id.as_str())) {
            Some(&i) => out[i] = r.clone(),
            None => {
                index.insert((&r.atom_id, &r.annotator_id), out.len());
                out.push(r.clone());
            }
        }
    }
    out
}

/// The configured primary annotator, or else the one with most records
/// (ties to the lexicographically smallest id).
pub fn primary_annotator(records: &[AnnotationRecord], configured: Option<&str>) -> Option<String> {
    if let Some(id) = configured {
        return Some(id.to_string());
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in latest_records(records) {
        *counts.entry(r.annotator_id).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|(_, c)| *c == best).map(|(id, _)| id)
}

/// Copies human judgments onto atoms. For each atom the primary annotator's
/// record wins; atoms the primary skipped take the record of the
/// lexicographically first other annotator.
pub fn apply_annotations(
    mut atoms: Vec<Atom>,
    records: &[AnnotationRecord],
    primary: Option<&str>,
    defeasible: bool,
) -> Result<Vec<Atom>> {
    let by_id: HashMap<String, usize> = atoms.iter().enumerate().map(|(i, a)| (a.atom_id.clone(), i)).collect();
    let unknown: BTreeSet<&str> =
        records.iter().map(|r| r.atom_id.as_str()).filter(|id| !by_id.contains_key(*id)).collect();
    if !unknown.is_empty() {
        return Err(Error::Integrity(format!(
            "annotations reference unknown atoms: {}",
            unknown.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let pruned: BTreeSet<&str> = records
        .iter()
        .map(|r| r.atom_id.as_str())
        .filter(|id| atoms[by_id[*id]].machine_valid == Some(false))
        .collect();
    if !pruned.is_empty() {
        return Err(Error::Integrity(format!(
            "annotations reference machine-pruned atoms: {}",
            pruned.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    for r in records {
        if let Err(problems) = r.check(defeasible) {
            let detail: Vec<String> = problems.iter().map(|(f, m)| format!("{f} {m}")).collect();
            return Err(Error::Integrity(format!(
                "annotation for {} by {}: {}",
                r.atom_id,
                r.annotator_id,
                detail.join("; ")
            )));
        }
    }

    let primary = primary_annotator(records, primary);
    let mut chosen: BTreeMap<&str, &AnnotationRecord> = BTreeMap::new();
    let latest = latest_records(records);
    for r in &latest {
        let is_primary = primary.as_deref() == Some(r.annotator_id.as_str());
        match chosen.get(r.atom_id.as_str()) {
            None => {
                chosen.insert(&r.atom_id, r);
            }
            Some(cur) => {
                let cur_primary = primary.as_deref() == Some(cur.annotator_id.as_str());
                if is_primary || (!cur_primary && r.annotator_id < cur.annotator_id) {
                    chosen.insert(&r.atom_id, r);
                }
            }
        }
    }
    for (atom_id, r) in chosen {
        let atom = &mut atoms[by_id[atom_id]];
        atom.human_valid = Some(r.valid);
        atom.effect_gold = if r.valid { r.effect } else { None };
    }
    Ok(atoms)
}

/// Judgments by two annotators on the atoms both of them labeled, in atom id
/// order: validity pairs, then effect pairs for atoms both marked valid.
pub fn paired_judgments(records: &[AnnotationRecord], first: &str, second: &str) -> PairedJudgments {
    let latest = latest_records(records);
    let of = |who: &str| -> BTreeMap<&str, &AnnotationRecord> {
        latest.iter().filter(|r| r.annotator_id == who).map(|r| (r.atom_id.as_str(), r)).collect()
    };
    let a = of(first);
    let b = of(second);
    let mut validity = Vec::new();
    let mut effects = Vec::new();
    for (atom, ra) in &a {
        if let Some(rb) = b.get(atom) {
            validity.push((ra.valid, rb.valid));
            if let (Some(x), Some(y)) = (ra.effect.and_then(EffectScore::value), rb.effect.and_then(EffectScore::value)) {
                effects.push((x, y));
            }
        }
    }
    (validity, effects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendDescriptor, BackendOptions, MockClassifier};
    use std::sync::Arc;

    fn classifier(cls: MockClassifier) -> Backend {
        Backend::new(BackendDescriptor::mock("nli:mock"), Arc::new(cls), None, BackendOptions::default())
    }

    fn record(atom: &str, who: &str, valid: bool, effect: Option<i8>) -> AnnotationRecord {
        AnnotationRecord {
            atom_id: atom.into(),
            annotator_id: who.into(),
            valid,
            effect: effect.map(|e| EffectScore::new(e).unwrap()),
            timestamp: "2024-01-01T00:00:00Z".into(),
        }
    }

    #[tokio::test]
    async fn hypothesis_stage() {
        let h = "The people are trying to get the kite down from the tree.";
        let mut cls = MockClassifier::new();
        cls.insert(h, "The kite is on the ground.", NliLabel::Contradiction);
        let nli = classifier(cls);
        assert!(prune_by_hypothesis(&Atom::new("x", h), h, &nli).await.unwrap());
        assert!(!prune_by_hypothesis(&Atom::new("x", "The kite is on the ground."), h, &nli).await.unwrap());
    }

    #[tokio::test]
    async fn premise_stage() {
        let p = "People are climbing a tree. There are people climbing a tree.";
        let mut cls = MockClassifier::new();
        cls.insert(p, "There is a kite.", NliLabel::Neutral);
        let nli = classifier(cls);
        assert!(!prune_by_premise(&Atom::new("x", "There are people climbing a tree."), p, &nli).await.unwrap());
        assert!(prune_by_premise(&Atom::new("x", "There is a kite."), p, &nli).await.unwrap());
    }

    #[tokio::test]
    async fn combined_pruning_skips_premise_check_for_rejected_atoms() {
        let mut cls = MockClassifier::new();
        cls.insert("H", "b", NliLabel::Entailment);
        cls.insert("H", "c", NliLabel::Neutral);
        let nli = classifier(cls);
        let atoms = Atom::collect_unique("e", ["b", "c"]);
        let out = prune_atoms(&atoms, "H", Some("P"), &nli, 4).await.unwrap();
        assert_eq!(out[0].entailed_by_premise, Some(false));
        assert!(out[0].keep);
        assert_eq!(out[1].entailed_by_premise, None);
        assert!(!out[1].keep);
        assert_eq!(nli.transport_calls(), 3);
    }

    #[test]
    fn record_field_checks() {
        assert!(record("a", "x", false, None).check(true).is_ok());
        assert!(record("a", "x", true, Some(2)).check(true).is_ok());
        assert!(record("a", "x", true, None).check(false).is_ok());
        assert_eq!(record("a", "x", true, None).check(true).unwrap_err()[0].0, "effect");
        assert!(record("a", "x", false, Some(1)).check(true).is_err());
        assert!(record("a", "", true, Some(1)).check(true).is_err());
    }

    #[test]
    fn annotations_populate_human_fields() {
        let atoms = Atom::collect_unique("e", ["one", "two"]);
        let (a, b) = (atoms[0].atom_id.clone(), atoms[1].atom_id.clone());
        let out = apply_annotations(
            atoms,
            &[record(&a, "ann1", false, None), record(&b, "ann1", true, Some(2))],
            None,
            true,
        )
        .unwrap();
        assert_eq!(out[0].human_valid, Some(false));
        assert_eq!(out[0].effect_gold, None);
        assert_eq!(out[1].effect_gold, Some(EffectScore::Score(2)));
        assert_eq!(out[1].machine_valid, None);
    }

    #[test]
    fn primary_annotator_wins() {
        let atoms = Atom::collect_unique("e", ["one"]);
        let a = atoms[0].atom_id.clone();
        let records = [record(&a, "zed", true, Some(-1)), record(&a, "amy", true, Some(2))];
        let out = apply_annotations(atoms.clone(), &records, Some("zed"), true).unwrap();
        assert_eq!(out[0].effect_gold, Some(EffectScore::Score(-1)));
        let out = apply_annotations(atoms, &records, Some("amy"), true).unwrap();
        assert_eq!(out[0].effect_gold, Some(EffectScore::Score(2)));
        let (validity, effects) = paired_judgments(&records, "amy", "zed");
        assert_eq!(validity, vec![(true, true)]);
        assert_eq!(effects, vec![(2, -1)]);
    }

    #[test]
    fn later_submission_supersedes() {
        let records = [record("a", "x", true, Some(1)), record("b", "x", false, None), record("a", "x", true, Some(-2))];
        let latest = latest_records(&records);
        assert_eq!(latest.len(), 2);
        assert_eq!(latest[0].effect, Some(EffectScore::Score(-2)));
        assert_eq!(latest[1].atom_id, "b");
    }

    #[test]
    fn default_primary_is_most_active() {
        let records = [record("a", "bob", true, None), record("b", "bob", true, None), record("a", "al", true, None)];
        assert_eq!(primary_annotator(&records, None).as_deref(), Some("bob"));
        let tied = [record("a", "bob", true, None), record("a", "al", true, None)];
        assert_eq!(primary_annotator(&tied, None).as_deref(), Some("al"));
        assert_eq!(primary_annotator(&[], None), None);
    }

    #[test]
    fn unknown_and_pruned_atoms_are_integrity_errors() {
        let mut atoms = Atom::collect_unique("e", ["one", "two"]);
        atoms[1].machine_valid = Some(false);
        let err = apply_annotations(atoms.clone(), &[record("nope", "x", false, None)], None, true).unwrap_err();
        assert!(matches!(err, Error::Integrity(ref m) if m.contains("nope")));
        let pruned = atoms[1].atom_id.clone();
        let err = apply_annotations(atoms, &[record(&pruned, "x", false, None)], None, true).unwrap_err();
        assert!(matches!(err, Error::Integrity(ref m) if m.contains("machine-pruned")));
    }
}
