//! Deterministic multi-attribute prompt splitting.

use crate::error::{Error, Result};

/// Imperative verbs that can open an editing clause. A clause that does not
/// start with one of these inherits the leading verb of the first clause.
const EDIT_VERBS: &[&str] = &[
    "make", "give", "turn", "add", "remove", "change", "paint", "color", "dye", "put", "replace",
    "set", "swap", "erase", "style", "transform",
];

fn starts_with_edit_verb(tokens: &[&str]) -> bool {
    tokens
        .first()
        .map(|t| EDIT_VERBS.contains(&t.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Split a prompt into sub-prompts on the standalone token "and".
///
/// When the first clause opens with a known editing verb and a later clause
/// does not, that verb is prepended so bare clauses stay imperative
/// ("Turn the hair red and the jacket blue" → "Turn the jacket blue").
pub fn split_prompt(prompt: &str) -> Result<Vec<String>> {
    if prompt.trim().is_empty() {
        return Err(Error::validation("prompt must be nonempty"));
    }
    let tokens: Vec<&str> = prompt.split_whitespace().collect();
    let mut clauses: Vec<Vec<&str>> = vec![Vec::new()];
    for tok in tokens {
        if tok.eq_ignore_ascii_case("and") {
            if !clauses.last().unwrap().is_empty() {
                clauses.push(Vec::new());
            }
        } else {
            clauses.last_mut().unwrap().push(tok);
        }
    }
    clauses.retain(|c| !c.is_empty());
    if clauses.is_empty() {
        return Err(Error::validation("prompt contains no clauses"));
    }

    let lead_verb = if starts_with_edit_verb(&clauses[0]) {
        Some(clauses[0][0])
    } else {
        None
    };
    let out = clauses
        .iter()
        .enumerate()
        .map(|(i, clause)| {
            if i > 0 && !starts_with_edit_verb(clause) {
                if let Some(verb) = lead_verb {
                    let mut s = verb.to_string();
                    s.push(' ');
                    s.push_str(&clause.join(" "));
                    return s;
                }
            }
            clause.join(" ")
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_the_and_token() {
        assert_eq!(
            split_prompt("Make his hair red and give him blue jacket").unwrap(),
            vec!["Make his hair red", "give him blue jacket"]
        );
    }

    #[test]
    fn single_clause_passes_through() {
        assert_eq!(
            split_prompt("Turn the bear orange").unwrap(),
            vec!["Turn the bear orange"]
        );
    }

    #[test]
    fn repeated_conjunctions_split_in_order() {
        assert_eq!(split_prompt("A and B and C").unwrap(), vec!["A", "B", "C"]);
    }

    #[test]
    fn bare_clauses_inherit_the_leading_verb() {
        assert_eq!(
            split_prompt("Turn the hair red and the jacket blue").unwrap(),
            vec!["Turn the hair red", "Turn the jacket blue"]
        );
    }

    #[test]
    fn words_containing_and_do_not_split() {
        assert_eq!(
            split_prompt("Paint the sandy beach").unwrap(),
            vec!["Paint the sandy beach"]
        );
    }

    #[test]
    fn empty_prompts_error() {
        assert!(split_prompt("").is_err());
        assert!(split_prompt("   ").is_err());
        assert!(split_prompt("and").is_err());
    }
}
