//! Shared data types: label algebras, examples, atoms, predictions.
//!
//! Every type serializes to a single JSON object (or scalar) so that datasets,
//! atom stores and prediction logs can be written one record per line.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Three-way NLI relation, serialized as `"e"`, `"n"`, `"c"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [NliLabel::Entailment, NliLabel::Neutral, NliLabel::Contradiction];

    pub fn as_str(self) -> &'static str {
        match self {
            NliLabel::Entailment => "e",
            NliLabel::Neutral => "n",
            NliLabel::Contradiction => "c",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Neutral => "neutral",
            NliLabel::Contradiction => "contradiction",
        }
    }
}

impl fmt::Display for NliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NliLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "e" | "entailment" => Ok(NliLabel::Entailment),
            "n" | "neutral" => Ok(NliLabel::Neutral),
            "c" | "contradiction" => Ok(NliLabel::Contradiction),
            other => Err(Error::Parse(format!("unknown NLI label {other:?}"))),
        }
    }
}

/// Gold label of a defeasible example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DefeasibleLabel {
    Strengthener,
    Weakener,
}

impl DefeasibleLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            DefeasibleLabel::Strengthener => "strengthener",
            DefeasibleLabel::Weakener => "weakener",
        }
    }

    /// Sign of the label as +1 / -1.
    pub fn sign(self) -> i8 {
        match self {
            DefeasibleLabel::Strengthener => 1,
            DefeasibleLabel::Weakener => -1,
        }
    }

    /// The answer a correct model gives on the binary prompt.
    pub fn as_effect(self) -> TernaryEffect {
        match self {
            DefeasibleLabel::Strengthener => TernaryEffect::More,
            DefeasibleLabel::Weakener => TernaryEffect::Less,
        }
    }
}

impl fmt::Display for DefeasibleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DefeasibleLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "strengthener" => Ok(DefeasibleLabel::Strengthener),
            "weakener" => Ok(DefeasibleLabel::Weakener),
            other => Err(Error::Parse(format!("unknown defeasible label {other:?}"))),
        }
    }
}

/// Direction of an update's effect as answered on the ternary prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TernaryEffect {
    More,
    Less,
    None,
}

impl TernaryEffect {
    pub fn as_str(self) -> &'static str {
        match self {
            TernaryEffect::More => "more",
            TernaryEffect::Less => "less",
            TernaryEffect::None => "none",
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            TernaryEffect::More => 1,
            TernaryEffect::Less => -1,
            TernaryEffect::None => 0,
        }
    }
}

impl fmt::Display for TernaryEffect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TernaryEffect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "more" => Ok(TernaryEffect::More),
            "less" => Ok(TernaryEffect::Less),
            "none" => Ok(TernaryEffect::None),
            other => Err(Error::Parse(format!("unknown effect {other:?}"))),
        }
    }
}

/// Binary reading of an effect score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryEffect {
    Label(DefeasibleLabel),
    NoEffect,
}

/// Five-point effect of an update on one atom, or the `Invalid` sentinel for
/// atoms rejected during human validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EffectScore {
    Score(i8),
    Invalid,
}

impl EffectScore {
    pub const SCALE: [i8; 5] = [-2, -1, 0, 1, 2];

    pub fn new(value: i8) -> Result<Self> {
        if (-2..=2).contains(&value) {
            Ok(EffectScore::Score(value))
        } else {
            Err(Error::Precondition(format!("effect score {value} outside [-2, 2]")))
        }
    }

    pub fn value(self) -> Option<i8> {
        match self {
            EffectScore::Score(v) => Some(v),
            EffectScore::Invalid => None,
        }
    }

    pub fn is_invalid(self) -> bool {
        matches!(self, EffectScore::Invalid)
    }
}

impl fmt::Display for EffectScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EffectScore::Score(v) if *v > 0 => write!(f, "+{v}"),
            EffectScore::Score(v) => write!(f, "{v}"),
            EffectScore::Invalid => f.write_str("invalid"),
        }
    }
}

impl FromStr for EffectScore {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches('(').trim_end_matches(')');
        if t.eq_ignore_ascii_case("invalid") {
            return Ok(EffectScore::Invalid);
        }
        let v: i8 = t
            .trim_start_matches('+')
            .parse()
            .map_err(|_| Error::Parse(format!("not an effect score: {s:?}")))?;
        EffectScore::new(v)
    }
}

impl Serialize for EffectScore {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            EffectScore::Score(v) => serializer.serialize_i8(*v),
            EffectScore::Invalid => serializer.serialize_str("invalid"),
        }
    }
}

impl<'de> Deserialize<'de> for EffectScore {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Int(v) => i8::try_from(v)
                .ok()
                .and_then(|v| EffectScore::new(v).ok())
                .ok_or_else(|| serde::de::Error::custom(format!("effect score {v} outside [-2, 2]"))),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Sign rule: positive → More, negative → Less, zero → None.
pub fn ternary_of_effect(score: EffectScore) -> Result<TernaryEffect> {
    match score {
        EffectScore::Invalid => Err(Error::Precondition("invalid atom has no effect class".into())),
        EffectScore::Score(v) if v > 0 => Ok(TernaryEffect::More),
        EffectScore::Score(v) if v < 0 => Ok(TernaryEffect::Less),
        EffectScore::Score(_) => Ok(TernaryEffect::None),
    }
}

/// Same sign rule, surfaced as strengthener / weakener / no effect.
pub fn binary_of_effect(score: EffectScore) -> Result<BinaryEffect> {
    Ok(match ternary_of_effect(score)? {
        TernaryEffect::More => BinaryEffect::Label(DefeasibleLabel::Strengthener),
        TernaryEffect::Less => BinaryEffect::Label(DefeasibleLabel::Weakener),
        TernaryEffect::None => BinaryEffect::NoEffect,
    })
}

macro_rules! label_serde {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
                serializer.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

label_serde!(NliLabel);
label_serde!(DefeasibleLabel);
label_serde!(TernaryEffect);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliExample {
    pub id: String,
    pub premise: String,
    pub hypothesis: String,
    pub gold: NliLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefeasibleExample {
    pub id: String,
    pub premise: String,
    pub hypothesis: String,
    pub update: String,
    pub gold: DefeasibleLabel,
}

impl NliExample {
    pub fn validate(&self) -> Result<()> {
        require_text("id", &self.id)?;
        require_text("premise", &self.premise)?;
        require_text("hypothesis", &self.hypothesis)
    }
}

impl DefeasibleExample {
    pub fn validate(&self) -> Result<()> {
        require_text("id", &self.id)?;
        require_text("premise", &self.premise)?;
        require_text("hypothesis", &self.hypothesis)?;
        require_text("update", &self.update)
    }
}

fn require_text(field: &str, value: &str) -> Result<()> {
    if value.trim().is_empty() {
        Err(Error::Precondition(format!("field `{field}` must be non-empty")))
    } else {
        Ok(())
    }
}

/// Canonical form used for atom identity: lowercase, internal whitespace
/// collapsed to single spaces, trailing periods removed.
pub fn normalize_text(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed.trim_end_matches('.').trim_end().to_string()
}

/// Deterministic atom id derived from the parent example and normalized text.
pub fn atom_id(parent_example_id: &str, text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(parent_example_id.as_bytes());
    hasher.update([0x1f]);
    hasher.update(normalize_text(text).as_bytes());
    let digest = hasher.finalize();
    format!("a{}", &hex::encode(digest)[..16])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Atom {
    pub atom_id: String,
    pub parent_example_id: String,
    pub text: String,
    #[serde(default)]
    pub machine_valid: Option<bool>,
    #[serde(default)]
    pub human_valid: Option<bool>,
    #[serde(default)]
    pub effect_gold: Option<EffectScore>,
}

impl Atom {
    pub fn new(parent_example_id: &str, text: &str) -> Self {
        Atom {
            atom_id: atom_id(parent_example_id, text),
            parent_example_id: parent_example_id.to_string(),
            text: text.trim().to_string(),
            machine_valid: None,
            human_valid: None,
            effect_gold: None,
        }
    }

    /// Builds atoms for one parent, collapsing texts that normalize equally.
    /// First occurrence wins and order is preserved.
    pub fn collect_unique<'a>(parent_example_id: &str, texts: impl IntoIterator<Item = &'a str>) -> Vec<Atom> {
        let mut seen = std::collections::HashSet::new();
        texts
            .into_iter()
            .filter(|t| !normalize_text(t).is_empty())
            .filter(|t| seen.insert(normalize_text(t)))
            .map(|t| Atom::new(parent_example_id, t))
            .collect()
    }

    /// Human-validated and carrying a usable gold effect.
    pub fn is_gold_valid(&self) -> bool {
        self.human_valid == Some(true) && self.effect_gold.map(|e| !e.is_invalid()).unwrap_or(false)
    }
}

/// Which inference a prediction answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// Premise vs full hypothesis.
    PremiseHypothesis,
    /// Hypothesis vs atom (the model's own admission check).
    HypothesisAtom,
    /// Premise vs atom.
    PremiseAtom,
    /// Premise, hypothesis and update.
    FullUpdate,
    /// Premise, atom and update.
    AtomUpdate,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Subject {
    pub example_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atom_id: Option<String>,
    pub relation: Relation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PredictedLabel {
    Nli(NliLabel),
    Effect(TernaryEffect),
}

/// One model answer, kept with its verbatim response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject: Subject,
    pub predicted: PredictedLabel,
    pub raw_response: String,
    pub backend_id: String,
    #[serde(default)]
    pub parse_failed: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ternary_sign_rule() {
        assert_eq!(ternary_of_effect(EffectScore::Score(2)).unwrap(), TernaryEffect::More);
        assert_eq!(ternary_of_effect(EffectScore::Score(0)).unwrap(), TernaryEffect::None);
        assert_eq!(ternary_of_effect(EffectScore::Score(-1)).unwrap(), TernaryEffect::Less);
        let err = ternary_of_effect(EffectScore::Invalid).unwrap_err();
        assert!(err.to_string().contains("invalid atom has no effect class"));
    }

    #[test]
    fn binary_sign_rule() {
        assert_eq!(
            binary_of_effect(EffectScore::Score(1)).unwrap(),
            BinaryEffect::Label(DefeasibleLabel::Strengthener)
        );
        assert_eq!(
            binary_of_effect(EffectScore::Score(-2)).unwrap(),
            BinaryEffect::Label(DefeasibleLabel::Weakener)
        );
        assert_eq!(binary_of_effect(EffectScore::Score(0)).unwrap(), BinaryEffect::NoEffect);
        assert!(binary_of_effect(EffectScore::Invalid).is_err());
    }

    #[test]
    fn effect_score_bounds_and_parsing() {
        assert!(EffectScore::new(3).is_err());
        assert!(EffectScore::new(-3).is_err());
        assert_eq!("+2".parse::<EffectScore>().unwrap(), EffectScore::Score(2));
        assert_eq!("(-1)".parse::<EffectScore>().unwrap(), EffectScore::Score(-1));
        assert_eq!("(invalid)".parse::<EffectScore>().unwrap(), EffectScore::Invalid);
        assert!(serde_json::from_str::<EffectScore>("7").is_err());
        assert_eq!(serde_json::to_string(&EffectScore::Invalid).unwrap(), "\"invalid\"");
    }

    #[test]
    fn labels_use_single_character_wire_form() {
        assert_eq!(serde_json::to_string(&NliLabel::Contradiction).unwrap(), "\"c\"");
        assert_eq!(serde_json::to_string(&DefeasibleLabel::Weakener).unwrap(), "\"weakener\"");
    }

    #[test]
    fn normalization_collapses_surface_variation() {
        assert_eq!(normalize_text("  The  Dog runs. "), "the dog runs");
        assert_eq!(normalize_text("The dog runs..."), "the dog runs");
        assert_eq!(atom_id("ex1", "The dog runs."), atom_id("ex1", "the   dog runs"));
        assert_ne!(atom_id("ex1", "The dog runs."), atom_id("ex2", "The dog runs."));
    }

    #[test]
    fn atom_id_is_stable() {
        // Frozen value: any change here breaks caches and annotation files.
        assert_eq!(atom_id("ex1", "There is a dog."), atom_id("ex1", "there is a dog"));
        assert_eq!(atom_id("ex1", "There is a dog.").len(), 17);
    }

    #[test]
    fn duplicate_texts_collapse() {
        let atoms = Atom::collect_unique("p", ["A fact.", "a fact", "Another fact."]);
        assert_eq!(atoms.len(), 2);
        assert_eq!(atoms[0].text, "A fact.");
    }

    #[test]
    fn examples_reject_empty_fields() {
        let ex = NliExample { id: "x".into(), premise: " ".into(), hypothesis: "h".into(), gold: NliLabel::Neutral };
        assert!(ex.validate().is_err());
    }

    fn any_effect() -> impl Strategy<Value = EffectScore> {
        prop_oneof![(-2i8..=2).prop_map(EffectScore::Score), Just(EffectScore::Invalid)]
    }

    proptest! {
        #[test]
        fn label_serialization_round_trips(
            nli in prop::sample::select(NliLabel::ALL.to_vec()),
            dl in prop::sample::select(vec![DefeasibleLabel::Strengthener, DefeasibleLabel::Weakener]),
            te in prop::sample::select(vec![TernaryEffect::More, TernaryEffect::Less, TernaryEffect::None]),
            eff in any_effect(),
        ) {
            prop_assert_eq!(serde_json::from_str::<NliLabel>(&serde_json::to_string(&nli).unwrap()).unwrap(), nli);
            prop_assert_eq!(serde_json::from_str::<DefeasibleLabel>(&serde_json::to_string(&dl).unwrap()).unwrap(), dl);
            prop_assert_eq!(serde_json::from_str::<TernaryEffect>(&serde_json::to_string(&te).unwrap()).unwrap(), te);
            prop_assert_eq!(serde_json::from_str::<EffectScore>(&serde_json::to_string(&eff).unwrap()).unwrap(), eff);
            prop_assert_eq!(eff.to_string().parse::<EffectScore>().unwrap(), eff);
        }

        #[test]
        fn atom_id_ignores_case_and_spacing(words in prop::collection::vec("[a-z]{1,6}", 1..6)) {
            let plain = words.join(" ");
            let noisy = format!("  {}.", words.join("   ").to_uppercase());
            prop_assert_eq!(atom_id("p", &plain), atom_id("p", &noisy));
        }
    }
}
