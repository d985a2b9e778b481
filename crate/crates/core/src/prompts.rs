//! Prompt templates, in-context exemplars, and response parsers.
//!
//! Templates live as plain-text files under `prompts/` with `{name}`
//! placeholders. A rendered prompt is the instruction, a blank line, one block
//! per exemplar (item followed by its answer), and finally the target item.

use std::collections::HashMap;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NliLabel, TernaryEffect};

/// Guidelines shown to human annotators next to each item.
pub const ANNOTATION_INSTRUCTIONS: &str = include_str!("../data/annotation_instructions.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub instruction: String,
    pub item: String,
    /// Joins an exemplar item to its answer.
    pub answer_separator: String,
}

impl PromptTemplate {
    fn builtin(instruction: &str, item: &str, answer_separator: &str) -> Self {
        PromptTemplate {
            instruction: instruction.trim_end().to_string(),
            item: item.trim_end().to_string(),
            answer_separator: answer_separator.to_string(),
        }
    }

    pub fn decomposition() -> Self {
        Self::builtin(
            include_str!("../prompts/decomposition.instruction.txt"),
            include_str!("../prompts/decomposition.item.txt"),
            "\n",
        )
    }

    pub fn nli() -> Self {
        Self::builtin(include_str!("../prompts/nli.instruction.txt"), include_str!("../prompts/nli.item.txt"), "\n")
    }

    pub fn defeasible_binary() -> Self {
        Self::builtin(
            include_str!("../prompts/defeasible_binary.instruction.txt"),
            include_str!("../prompts/defeasible.item.txt"),
            "\n",
        )
    }

    pub fn defeasible_ternary() -> Self {
        Self::builtin(
            include_str!("../prompts/defeasible_ternary.instruction.txt"),
            include_str!("../prompts/defeasible.item.txt"),
            "\n",
        )
    }

    pub fn qud() -> Self {
        Self::builtin(include_str!("../prompts/qud.instruction.txt"), include_str!("../prompts/qud.item.txt"), " ")
    }

    pub fn render(&self, exemplars: &[(Vars<'_>, String)], target: &Vars<'_>) -> Result<String> {
        let mut out = String::with_capacity(self.instruction.len() + 512 * (exemplars.len() + 1));
        out.push_str(&self.instruction);
        out.push_str("\n\n");
        for (vars, answer) in exemplars {
            out.push_str(&fill(&self.item, vars)?);
            out.push_str(&self.answer_separator);
            out.push_str(answer);
            out.push_str("\n\n");
        }
        out.push_str(&fill(&self.item, target)?);
        Ok(out)
    }
}

pub type Vars<'a> = HashMap<&'static str, &'a str>;

/// Single-pass placeholder substitution, so values containing braces are
/// copied verbatim.
pub fn fill(template: &str, vars: &Vars<'_>) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_placeholder(&after[..close]) => {
                let name = &after[..close];
                let value = vars
                    .get(name)
                    .ok_or_else(|| Error::Precondition(format!("template placeholder {{{name}}} has no value")))?;
                out.push_str(value);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn is_placeholder(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::from(e).context(path.display().to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliExemplar {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefeasibleExemplar {
    pub premise: String,
    pub hypothesis: String,
    pub update: String,
    pub label: TernaryEffect,
    pub explanation: String,
}

/// In-context exemplars for the three evaluation prompts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvaluationExemplars {
    pub nli: Vec<NliExemplar>,
    pub defeasible: Vec<DefeasibleExemplar>,
    pub defeasible_atoms: Vec<DefeasibleExemplar>,
}

impl EvaluationExemplars {
    pub fn builtin() -> Self {
        EvaluationExemplars {
            nli: serde_json::from_str(include_str!("../data/nli_exemplars.json")).expect("bundled exemplars parse"),
            defeasible: serde_json::from_str(include_str!("../data/defeasible_exemplars.json"))
                .expect("bundled exemplars parse"),
            defeasible_atoms: serde_json::from_str(include_str!("../data/defeasible_atom_exemplars.json"))
                .expect("bundled exemplars parse"),
        }
    }

    pub fn load_nli(path: &Path) -> Result<Vec<NliExemplar>> {
        load_json(path)
    }

    pub fn load_defeasible(path: &Path) -> Result<Vec<DefeasibleExemplar>> {
        load_json(path)
    }
}

fn nli_vars<'a>(premise: &'a str, hypothesis: &'a str) -> Vars<'a> {
    HashMap::from([("premise", premise), ("hypothesis", hypothesis)])
}

fn defeasible_vars<'a>(context: &'a str, hypothesis: &'a str, evidence: &'a str) -> Vars<'a> {
    HashMap::from([("context", context), ("hypothesis", hypothesis), ("evidence", evidence)])
}

/// Three-way NLI prompt.
pub fn nli_prompt(premise: &str, hypothesis: &str, exemplars: &[NliExemplar]) -> Result<String> {
    let shots: Vec<_> = exemplars
        .iter()
        .map(|ex| {
            (nli_vars(&ex.premise, &ex.hypothesis), format!("{}\n{}\n[END]", ex.label.as_str(), ex.explanation))
        })
        .collect();
    PromptTemplate::nli().render(&shots, &nli_vars(premise, hypothesis))
}

fn defeasible_with(
    template: PromptTemplate,
    premise: &str,
    hypothesis: &str,
    update: &str,
    exemplars: &[DefeasibleExemplar],
) -> Result<String> {
    let shots: Vec<_> = exemplars
        .iter()
        .map(|ex| {
            (
                defeasible_vars(&ex.premise, &ex.hypothesis, &ex.update),
                format!("{}\n{}\n[END]", ex.label.as_str(), ex.explanation),
            )
        })
        .collect();
    template.render(&shots, &defeasible_vars(premise, hypothesis, update))
}

/// Binary more/less prompt over a full hypothesis.
pub fn defeasible_prompt(premise: &str, hypothesis: &str, update: &str, exemplars: &[DefeasibleExemplar]) -> Result<String> {
    defeasible_with(PromptTemplate::defeasible_binary(), premise, hypothesis, update, exemplars)
}

/// Ternary more/less/none prompt over one atom.
pub fn defeasible_atom_prompt(premise: &str, atom: &str, update: &str, exemplars: &[DefeasibleExemplar]) -> Result<String> {
    defeasible_with(PromptTemplate::defeasible_ternary(), premise, atom, update, exemplars)
}

/// The part of a response before the first `[END]`.
pub fn before_end(raw: &str) -> &str {
    raw.split("[END]").next().unwrap_or("")
}

fn answer_line(raw: &str) -> Option<&str> {
    before_end(raw).lines().map(str::trim).find(|l| !l.is_empty())
}

fn tokens(line: &str) -> impl Iterator<Item = String> + '_ {
    line.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_ascii_lowercase)
}

/// Label from a three-way NLI response: the first standalone `e`/`n`/`c`
/// (or spelled-out label) on the answer line. `None` when absent.
pub fn parse_nli_response(raw: &str) -> Option<NliLabel> {
    let line = answer_line(raw)?;
    tokens(line).find_map(|t| match t.as_str() {
        "e" | "entailment" => Some(NliLabel::Entailment),
        "n" | "neutral" => Some(NliLabel::Neutral),
        "c" | "contradiction" => Some(NliLabel::Contradiction),
        _ => None,
    })
}

/// Effect from a more/less(/none) response. `allow_none` selects the ternary
/// reading; on the binary prompt a `none` answer counts as unparseable.
pub fn parse_effect_response(raw: &str, allow_none: bool) -> Option<TernaryEffect> {
    let line = answer_line(raw)?;
    tokens(line).find_map(|t| match t.as_str() {
        "more" => Some(TernaryEffect::More),
        "less" => Some(TernaryEffect::Less),
        "none" if allow_none => Some(TernaryEffect::None),
        _ => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fill_is_single_pass() {
        let vars: Vars = HashMap::from([("premise", "{hypothesis}"), ("hypothesis", "h")]);
        assert_eq!(fill("P: {premise} H: {hypothesis}", &vars).unwrap(), "P: {hypothesis} H: h");
        assert_eq!(fill("literal {Braces} and {", &vars).unwrap(), "literal {Braces} and {");
        assert!(fill("{missing}", &vars).is_err());
    }

    #[test]
    fn nli_prompt_layout() {
        let ex = EvaluationExemplars::builtin();
        assert_eq!(ex.nli.len(), 12);
        for label in NliLabel::ALL {
            assert_eq!(ex.nli.iter().filter(|e| e.label == label).count(), 4);
        }
        let prompt = nli_prompt("A dog runs.", "An animal moves.", &ex.nli).unwrap();
        assert!(prompt.starts_with("You will be given a premise and a hypothesis"));
        assert!(prompt.ends_with(
            "Premise: A dog runs.\nHypothesis:An animal moves.\n\nIs the hypothesis entailed by, contradicted by, or neutral with respect to the premise?"
        ));
        assert_eq!(prompt.matches("[END]\n\n").count(), 12);
    }

    #[test]
    fn defeasible_prompts_differ_only_in_instruction() {
        let ex = EvaluationExemplars::builtin();
        assert_eq!(ex.defeasible.len(), 10);
        let more = ex.defeasible.iter().filter(|e| e.label == TernaryEffect::More).count();
        assert_eq!(more, 5);
        let binary = defeasible_prompt("P", "H", "U", &[]).unwrap();
        let ternary = defeasible_atom_prompt("P", "H", "U", &[]).unwrap();
        assert!(binary.contains("or output 'less'"));
        assert!(ternary.contains("or output 'none' if the likelihood of the hypothesis remains unchanged"));
        assert!(binary.ends_with("Situation: P\n\nHypothesis: H\nEvidence: U\n\nDoes the evidence make the hypothesis about the situation more or less likely to be true?"));
    }

    #[test]
    fn nli_parser() {
        assert_eq!(parse_nli_response("e\nBecause.\n[END]"), Some(NliLabel::Entailment));
        assert_eq!(parse_nli_response("\n  Answer: 'c'\nThe man is not a woman.[END]"), Some(NliLabel::Contradiction));
        assert_eq!(parse_nli_response("Neutral\n[END]"), Some(NliLabel::Neutral));
        // Only the answer line counts.
        assert_eq!(parse_nli_response("I think so\ne\n[END]"), None);
        assert_eq!(parse_nli_response("[END] e"), None);
        assert_eq!(parse_nli_response(""), None);
    }

    #[test]
    fn effect_parser() {
        assert_eq!(parse_effect_response("more\nBecause...\n[END]", false), Some(TernaryEffect::More));
        assert_eq!(parse_effect_response("Less.\n[END]", true), Some(TernaryEffect::Less));
        assert_eq!(parse_effect_response("none\n[END]", true), Some(TernaryEffect::None));
        assert_eq!(parse_effect_response("none\n[END]", false), None);
        assert_eq!(parse_effect_response("moreover", true), None);
    }

    proptest! {
        #[test]
        fn parsers_are_total(raw in ".{0,200}") {
            let _ = parse_nli_response(&raw);
            let _ = parse_effect_response(&raw, true);
            let _ = parse_effect_response(&raw, false);
        }
    }
}
