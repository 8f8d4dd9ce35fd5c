//! Recipe refinement: make every step name the ingredients it handles,
//! either with an offline rule or through a chat endpoint.

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::llm::{extract_json_object, ChatMessage, Endpoint};
use crate::text::RecipeSpec;

/// Instruction sent as the system message in live mode.
pub const REFINE_TEMPLATE: &str =
    "You rewrite cooking instructions for an image generator that draws one picture per step.
Input: a JSON object with the dish goal, the ordered step texts and the known ingredients.
For every step, rewrite the text so it explicitly names each ingredient visible in that step,
including ingredients carried over from earlier steps. Keep the action of the step unchanged,
keep the wording short, and do not add, merge, split or reorder steps.
Reply with JSON only, exactly of the form {\"steps\": [\"<step 1>\", \"<step 2>\", ...]}
containing one string per input step.";

/// How [`refine_recipe`] produces its rewrite.
#[derive(Clone, Debug, PartialEq)]
pub enum AgentMode {
    /// Deterministic offline rule.
    Mock,
    Live(Endpoint),
}

fn mentions(text: &str, ingredient: &str) -> bool {
    let text = text.to_lowercase();
    let needle = ingredient.trim().to_lowercase();
    if needle.is_empty() {
        return false;
    }
    text.match_indices(&needle).any(|(i, _)| {
        let before = text[..i].chars().next_back();
        let after = text[i + needle.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

/// Appends ` (a, b, …)` to `text`, before a final period if there is one.
fn append_list(text: &str, items: &[String]) -> String {
    let list = format!(" ({})", items.join(", "));
    let trimmed = text.trim_end();
    match trimmed.strip_suffix('.') {
        Some(head) => format!("{head}{list}."),
        None => format!("{trimmed}{list}"),
    }
}

/// Offline rule: steps that mention none of the recipe's ingredients get
/// the full ingredient list appended.
pub fn mock_refine(recipe: &RecipeSpec) -> RecipeSpec {
    let ingredients = recipe.ingredients();
    let mut out = recipe.clone();
    if ingredients.is_empty() {
        return out;
    }
    for step in &mut out.steps {
        if !ingredients.iter().any(|i| mentions(&step.text, i)) {
            step.text = append_list(&step.text, &ingredients);
        }
    }
    out
}

/// Chat messages for a live refinement request.
pub fn refine_messages(recipe: &RecipeSpec) -> Vec<ChatMessage> {
    let payload = json!({
        "goal": recipe.goal,
        "steps": recipe.step_texts(),
        "ingredients": recipe.ingredients(),
    });
    vec![
        ChatMessage::system(REFINE_TEMPLATE),
        ChatMessage::user(payload.to_string()),
    ]
}

/// Applies a `{"steps": [...]}` reply to `recipe`.
pub fn apply_refinement(recipe: &RecipeSpec, reply: &str) -> Result<RecipeSpec> {
    let v = extract_json_object(reply)?;
    let steps = v
        .get("steps")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Schema("$.steps: expected an array".into()))?;
    if steps.len() != recipe.steps.len() {
        return Err(Error::Schema(format!(
            "$.steps: expected {} steps, got {}",
            recipe.steps.len(),
            steps.len()
        )));
    }
    let mut out = recipe.clone();
    for (k, (step, new)) in out.steps.iter_mut().zip(steps).enumerate() {
        let text = new
            .as_str()
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| Error::Schema(format!("$.steps[{k}]: expected a non-empty string")))?;
        step.text = text.trim().to_string();
    }
    Ok(out)
}

/// Returns a recipe with the same steps, rewritten to name their
/// ingredients.
pub fn refine_recipe(recipe: &RecipeSpec, mode: &AgentMode) -> Result<RecipeSpec> {
    recipe.validate()?;
    match mode {
        AgentMode::Mock => Ok(mock_refine(recipe)),
        AgentMode::Live(endpoint) => {
            let reply = endpoint.chat(refine_messages(recipe))?;
            apply_refinement(recipe, &reply)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::test_server::{chat_reply, serve};
    use crate::text::RecipeStep;
    use std::time::Duration;

    fn carrot_recipe() -> RecipeSpec {
        RecipeSpec {
            goal: "vegetable pancake".into(),
            summary: None,
            steps: vec![
                RecipeStep {
                    text: "Cut the carrot strips and zucchini strips".into(),
                    ingredients: vec!["carrot strips".into(), "zucchini strips".into()],
                },
                RecipeStep::new("Pour the batter in the pan"),
            ],
        }
    }

    #[test]
    fn mock_appends_ingredients() {
        let out = mock_refine(&carrot_recipe());
        assert_eq!(out.steps[0].text, "Cut the carrot strips and zucchini strips");
        assert_eq!(
            out.steps[1].text,
            "Pour the batter in the pan (carrot strips, zucchini strips)"
        );
    }

    #[test]
    fn mock_keeps_final_period_last() {
        assert_eq!(append_list("Stir well.", &["egg".into()]), "Stir well (egg).");
    }

    #[test]
    fn mention_is_word_bounded() {
        assert!(mentions("Add the Egg.", "egg"));
        assert!(!mentions("Add eggplant", "egg"));
    }

    #[test]
    fn live_request_carries_template() {
        let reply = chat_reply("{\"steps\": [\"Cut carrot strips\", \"Pour batter with carrot strips\"]}");
        let (url, rx) = serve(vec![(200, reply)]);
        let ep = Endpoint {
            timeout: Duration::from_secs(5),
            ..Endpoint::new(url)
        };
        let out = refine_recipe(&carrot_recipe(), &AgentMode::Live(ep)).unwrap();
        assert_eq!(out.steps[1].text, "Pour batter with carrot strips");
        assert_eq!(out.steps[0].ingredients.len(), 2);
        let body: Value = serde_json::from_str(&rx.recv().unwrap().body).unwrap();
        assert_eq!(body["messages"][0]["content"], REFINE_TEMPLATE);
    }

    #[test]
    fn wrong_step_count_is_schema_error() {
        let err = apply_refinement(&carrot_recipe(), "{\"steps\": [\"only one\"]}").unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
        assert!(apply_refinement(&carrot_recipe(), "{\"steps\": [\"a\", 3]}").is_err());
        assert!(apply_refinement(&carrot_recipe(), "not json").is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::text::RecipeStep;
    use proptest::prelude::*;

    fn recipe() -> impl Strategy<Value = RecipeSpec> {
        let step = (
            "[a-z]{1,8}( [a-z]{1,8}){0,6}[.]?",
            prop::collection::vec("[a-z]{3,8}", 0..3),
        );
        prop::collection::vec(step, 1..10).prop_map(|steps| RecipeSpec {
            goal: "dish".into(),
            summary: None,
            steps: steps
                .into_iter()
                .map(|(text, ingredients)| RecipeStep { text, ingredients })
                .collect(),
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn mock_refinement_keeps_step_count(r in recipe()) {
            let out = refine_recipe(&r, &AgentMode::Mock).unwrap();
            prop_assert_eq!(out.steps.len(), r.steps.len());
            prop_assert_eq!(refine_recipe(&r, &AgentMode::Mock).unwrap(), out);
        }
    }
}
